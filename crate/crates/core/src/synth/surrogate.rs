use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::ndiff::{
    conv2d, fc, global_avg_pool, relu, GradRecord, Padding, Params, StorePass, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    /// Expected input side length.
    pub input_size: usize,
    /// Channels of the backbone stage whose output is the tapped feature.
    pub stage1_channels: usize,
    pub head_channels: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            input_size: 32,
            stage1_channels: 16,
            head_channels: 32,
        }
    }
}

impl SurrogateConfig {
    /// Shape of the tapped feature for a `size × size` input.
    pub fn feature_shape(&self) -> [usize; 3] {
        let s = crate::ndiff::ops::conv_out_extent(self.input_size, 3, 2);
        [self.stage1_channels, s, s]
    }
}

const B1_W: &str = "sur.b1.w";
const B1_B: &str = "sur.b1.b";
const B2_W: &str = "sur.b2.w";
const B2_B: &str = "sur.b2.b";
const H_W: &str = "sur.head.w";
const H_B: &str = "sur.head.b";
const FC_W: &str = "sur.fc.w";
const FC_B: &str = "sur.fc.b";

/// He-initialized weights, zero biases.
pub fn init_surrogate<R: Rng + ?Sized>(cfg: &SurrogateConfig, rng: &mut R) -> Params {
    let (c1, c2) = (cfg.stage1_channels, cfg.head_channels);
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let mut p = Params::new();
    p.insert(B1_W, Tensor::randn(&[c1, 1, 3, 3], he(9), rng));
    p.insert(B1_B, Tensor::zeros(&[c1]));
    p.insert(B2_W, Tensor::randn(&[c1, c1, 3, 3], he(9 * c1), rng));
    p.insert(B2_B, Tensor::zeros(&[c1]));
    p.insert(H_W, Tensor::randn(&[c2, c1, 3, 3], he(9 * c1), rng));
    p.insert(H_B, Tensor::zeros(&[c2]));
    p.insert(
        FC_W,
        Tensor::randn(&[NUM_CLASSES, c2], (1.0 / c2 as f64).sqrt(), rng),
    );
    p.insert(FC_B, Tensor::zeros(&[NUM_CLASSES]));
    p
}

fn conv_relu(
    params: &Params,
    x: &Tensor,
    w: &'static str,
    b: &'static str,
    stride: usize,
) -> Result<(GradRecord, GradRecord)> {
    let c = conv2d(
        x,
        params.get(w)?,
        Some(params.get(b)?),
        stride,
        Padding::Zero,
    )?;
    let r = relu(&c.output);
    Ok((c, r))
}

fn conv_relu_backward(
    conv: &GradRecord,
    act: &GradRecord,
    g: &Tensor,
    w: &str,
    b: &str,
    grads: &mut Params,
) -> Tensor {
    let dc = act.backward(g).remove(0);
    let mut gs = conv.backward(&dc).into_iter();
    let dx = gs.next().expect("conv input");
    grads.accumulate(w, &gs.next().expect("conv w"));
    grads.accumulate(b, &gs.next().expect("conv b"));
    dx
}

/// Backbone stage 1 (stride-2 then stride-1 conv, each followed by ReLU).
/// Its output is the feature handed to the controller.
pub fn backbone(params: &Params, x: &Tensor) -> Result<StorePass> {
    if x.shape().len() != 3 || x.shape()[0] != 1 {
        return Err(Error::dim(
            "backbone",
            format!("expected 1×H×W image, got {:?}", x.shape()),
        ));
    }
    let (c1, a1) = conv_relu(params, x, B1_W, B1_B, 2)?;
    let (c2, a2) = conv_relu(params, &a1.output, B2_W, B2_B, 1)?;
    let out = a2.output.clone();
    Ok(StorePass::new(out, move |g, grads| {
        let d = conv_relu_backward(&c2, &a2, g, B2_W, B2_B, grads);
        vec![conv_relu_backward(&c1, &a1, &d, B1_W, B1_B, grads)]
    }))
}

/// Classification head: stride-2 conv + ReLU, global pool, fc to logits.
pub fn head(params: &Params, feature: &Tensor) -> Result<StorePass> {
    let (c, a) = conv_relu(params, feature, H_W, H_B, 2)?;
    let pool = global_avg_pool(&a.output)?;
    let lin = fc(&pool.output, params.get(FC_W)?, params.get(FC_B)?)?;
    let out = lin.output.clone();
    Ok(StorePass::new(out, move |g, grads| {
        let mut gl = lin.backward(g).into_iter();
        let dp = gl.next().expect("fc input");
        grads.accumulate(FC_W, &gl.next().expect("fc w"));
        grads.accumulate(FC_B, &gl.next().expect("fc b"));
        let da = pool.backward(&dp).remove(0);
        vec![conv_relu_backward(&c, &a, &da, H_W, H_B, grads)]
    }))
}

/// Full recognizer pass exposing both the tapped feature and the logits.
pub struct SurrogatePass {
    pub feature: Tensor,
    pub logits: Tensor,
    backbone: StorePass,
    head: StorePass,
}

impl SurrogatePass {
    /// Gradient with respect to the input image for upstream gradients on
    /// the logits and, optionally, directly on the tapped feature.
    pub fn backward(
        &self,
        d_logits: &Tensor,
        d_feature: Option<&Tensor>,
        grads: &mut Params,
    ) -> Tensor {
        let mut df = self.head.backward(d_logits, grads).remove(0);
        if let Some(extra) = d_feature {
            df.add_assign(extra);
        }
        self.backbone.backward(&df, grads).remove(0)
    }
}

pub fn surrogate_forward(
    params: &Params,
    cfg: &SurrogateConfig,
    x: &Tensor,
) -> Result<SurrogatePass> {
    let n = cfg.input_size;
    if x.shape() != [1, n, n] {
        return Err(Error::dim(
            "surrogate_forward",
            format!("expected [1, {n}, {n}] image, got {:?}", x.shape()),
        ));
    }
    let backbone = backbone(params, x)?;
    let head = head(params, &backbone.output)?;
    Ok(SurrogatePass {
        feature: backbone.output.clone(),
        logits: head.output.clone(),
        backbone,
        head,
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of logit vectors whose argmax equals the label.
pub fn accuracy(logits: &[Tensor], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::dim(
            "accuracy",
            format!("{} predictions but {} labels", logits.len(), labels.len()),
        ));
    }
    if logits.is_empty() {
        return Err(Error::Config(
            "accuracy of an empty set is undefined".into(),
        ));
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| argmax(l.data()) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SurrogateConfig {
        SurrogateConfig {
            input_size: 12,
            stage1_channels: 3,
            head_channels: 4,
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = init_surrogate(&cfg, &mut rng);
        p.scale_all(0.0);
        let pass = surrogate_forward(&p, &cfg, &Tensor::zeros(&[1, 12, 12])).unwrap();
        assert_eq!(pass.logits, Tensor::zeros(&[3]));
    }

    #[test]
    fn feature_is_half_resolution() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_surrogate(&cfg, &mut rng);
        let x = Tensor::uniform(&[1, 12, 12], 0.0, 1.0, &mut rng);
        let pass = surrogate_forward(&p, &cfg, &x).unwrap();
        assert_eq!(pass.feature.shape(), &[3, 6, 6]);
        assert_eq!(cfg.feature_shape(), [3, 6, 6]);
    }

    #[test]
    fn wrong_size_is_shape_error() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_surrogate(&cfg, &mut rng);
        let err = surrogate_forward(&p, &cfg, &Tensor::zeros(&[1, 10, 12]));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn accuracy_contract() {
        let l = vec![
            Tensor::from_vec(vec![0.0, 2.0, 1.0]),
            Tensor::from_vec(vec![3.0, 0.0, 1.0]),
        ];
        assert_eq!(accuracy(&l, &[1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&l, &[1, 2]).unwrap(), 0.5);
        assert!(accuracy(&l, &[1]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn random_predictor_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let logits: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[3], 1.0, &mut rng)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let acc = accuracy(&logits, &labels).unwrap();
        let sigma = ((1.0 / 3.0) * (2.0 / 3.0) / n as f64).sqrt();
        assert!((acc - 1.0 / 3.0).abs() <= 3.0 * sigma, "{acc}");
    }
}
