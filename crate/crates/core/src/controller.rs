//! Feedback controller that predicts ISP parameters from a recognizer
//! feature.
//!
//! A feature-branch encoder turns the tapped feature into a latent vector
//! `V_0`. Each ISP stage `l` owns a head that decodes its parameters from
//! `V_{l-1}` and, with latent update enabled, gates the latent into `V_l`
//! according to what the stage was told to do.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isp::{ParamSpec, PipelineSpec, StageSpec};
use crate::ndiff::{
    conv2d, fc, global_avg_pool, relu, sigmoid_scalar, OpDesc, Padding, Params, StorePass, Tensor,
};

/// Sigmoid outputs are kept this far from 0 and 1 so decoded values stay
/// strictly inside their intervals even for saturated pre-activations.
const ACT_MARGIN: f64 = 1e-9;

/// Upper bound of the latent gate `5·sigmoid(x)`.
pub const GATE_SCALE: f64 = 5.0;

/// `(p_max − p_min)·sigmoid(x) + p_min`, strictly inside `(p_min, p_max)`.
pub fn act_range(x: f64, spec: &ParamSpec) -> f64 {
    let s = sigmoid_scalar(x).clamp(ACT_MARGIN, 1.0 - ACT_MARGIN);
    spec.range() * s + spec.min
}

/// Derivative of [`act_range`] with respect to its pre-activation.
pub fn act_range_grad(x: f64, spec: &ParamSpec) -> f64 {
    let s = sigmoid_scalar(x);
    if !(ACT_MARGIN..=1.0 - ACT_MARGIN).contains(&s) {
        return 0.0;
    }
    spec.range() * s * (1.0 - s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// `act(f_full(V))`: no learnable default.
    Plain,
    /// `act(p̂ + f_full(V))` with `p̂` held constant.
    ResidualStatic,
    /// `act(p̂ + f_full(V))` with `p̂` trained jointly.
    ResidualLearnable,
}

impl DecodeMode {
    pub fn is_residual(self) -> bool {
        !matches!(self, DecodeMode::Plain)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// When false the ISP runs with its static defaults and no controller.
    pub enabled: bool,
    pub mode: DecodeMode,
    pub latent_update: bool,
    pub latent_width: usize,
    pub sfb_conv_channels: usize,
    pub sfb_hidden: usize,
    /// Hidden width of each head's latent-update block.
    pub update_hidden: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            enabled: true,
            mode: DecodeMode::ResidualLearnable,
            latent_update: true,
            latent_width: 256,
            sfb_conv_channels: 32,
            sfb_hidden: 1024,
            update_hidden: 64,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_width == 0
            || self.sfb_conv_channels == 0
            || self.sfb_hidden == 0
            || self.update_hidden == 0
        {
            return Err(Error::Config("controller widths must be positive".into()));
        }
        Ok(())
    }
}

pub mod names {
    pub const SFB_CONV_W: &str = "ctrl.sfb.conv.w";
    pub const SFB_CONV_B: &str = "ctrl.sfb.conv.b";
    pub const SFB_FC1_W: &str = "ctrl.sfb.fc1.w";
    pub const SFB_FC1_B: &str = "ctrl.sfb.fc1.b";
    pub const SFB_FC2_W: &str = "ctrl.sfb.fc2.w";
    pub const SFB_FC2_B: &str = "ctrl.sfb.fc2.b";

    pub fn dec_w(l: usize) -> String {
        format!("ctrl.head{l}.dec.w")
    }
    pub fn dec_b(l: usize) -> String {
        format!("ctrl.head{l}.dec.b")
    }
    pub fn upd1_w(l: usize) -> String {
        format!("ctrl.head{l}.upd1.w")
    }
    pub fn upd1_b(l: usize) -> String {
        format!("ctrl.head{l}.upd1.b")
    }
    pub fn upd2_w(l: usize) -> String {
        format!("ctrl.head{l}.upd2.w")
    }
    pub fn upd2_b(l: usize) -> String {
        format!("ctrl.head{l}.upd2.b")
    }
    /// Learnable defaults `p̂` of stage `l` (pre-activation space).
    pub fn phat(l: usize) -> String {
        format!("isp.phat{l}")
    }
}

/// Random initialization of every controller tensor plus the stage defaults.
///
/// Decode layers start at zero so the first predictions are exactly the
/// static operating point; the update gates start near one.
pub fn init_controller<R: Rng + ?Sized>(
    cfg: &ControllerConfig,
    spec: &PipelineSpec,
    feature_channels: usize,
    rng: &mut R,
) -> Params {
    let mut p = Params::new();
    let (c, h, z) = (cfg.sfb_conv_channels, cfg.sfb_hidden, cfg.latent_width);
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    p.insert(
        names::SFB_CONV_W,
        Tensor::randn(&[c, feature_channels, 3, 3], he(feature_channels * 9), rng),
    );
    p.insert(names::SFB_CONV_B, Tensor::zeros(&[c]));
    p.insert(names::SFB_FC1_W, Tensor::randn(&[h, c], he(c), rng));
    p.insert(names::SFB_FC1_B, Tensor::zeros(&[h]));
    p.insert(
        names::SFB_FC2_W,
        Tensor::randn(&[z, h], (1.0 / h as f64).sqrt(), rng),
    );
    p.insert(names::SFB_FC2_B, Tensor::zeros(&[z]));
    for (l, stage) in spec.stages.iter().enumerate() {
        let n = stage.kind.param_count();
        let u = cfg.update_hidden;
        p.insert(names::dec_w(l), Tensor::zeros(&[n, z]));
        p.insert(names::dec_b(l), Tensor::zeros(&[n]));
        p.insert(names::phat(l), Tensor::from_vec(stage.phat.clone()));
        p.insert(names::upd1_w(l), Tensor::randn(&[u, n], he(n), rng));
        p.insert(names::upd1_b(l), Tensor::zeros(&[u]));
        p.insert(
            names::upd2_w(l),
            Tensor::randn(&[z, u], (1.0 / u as f64).sqrt(), rng),
        );
        // 5·sigmoid(ln(1/4)) = 1
        p.insert(names::upd2_b(l), Tensor::full(&[z], (0.25f64).ln()));
    }
    p
}

/// Feature branch: 3×3 stride-2 conv → ReLU → global average pool →
/// fc → ReLU → fc to the latent width. Returns `V_0`; backward yields
/// `[∂/∂feature]`.
pub fn encode_sfb(params: &Params, feature: &Tensor) -> Result<StorePass> {
    match *feature.shape() {
        [_, h, w] if h >= 3 && w >= 3 => {}
        _ => {
            return Err(Error::dim(
                "encode_sfb",
                format!(
                    "feature must be C×H×W with H,W ≥ 3, got {:?}",
                    feature.shape()
                ),
            ))
        }
    }
    let conv = conv2d(
        feature,
        params.get(names::SFB_CONV_W)?,
        Some(params.get(names::SFB_CONV_B)?),
        2,
        Padding::Zero,
    )?;
    let act = relu(&conv.output);
    let pool = global_avg_pool(&act.output)?;
    let fc1 = fc(
        &pool.output,
        params.get(names::SFB_FC1_W)?,
        params.get(names::SFB_FC1_B)?,
    )?;
    let hid = relu(&fc1.output);
    let fc2 = fc(
        &hid.output,
        params.get(names::SFB_FC2_W)?,
        params.get(names::SFB_FC2_B)?,
    )?;
    let out = fc2.output.clone();
    Ok(StorePass::new(out, move |g, grads| {
        let mut g2 = fc2.backward(g).into_iter();
        let dh = g2.next().expect("fc2 input");
        grads.accumulate(names::SFB_FC2_W, &g2.next().expect("fc2 w"));
        grads.accumulate(names::SFB_FC2_B, &g2.next().expect("fc2 b"));
        let dh = hid.backward(&dh).remove(0);
        let mut g1 = fc1.backward(&dh).into_iter();
        let dpool = g1.next().expect("fc1 input");
        grads.accumulate(names::SFB_FC1_W, &g1.next().expect("fc1 w"));
        grads.accumulate(names::SFB_FC1_B, &g1.next().expect("fc1 b"));
        let dact = pool.backward(&dpool).remove(0);
        let dconv = act.backward(&dact).remove(0);
        let mut gc = conv.backward(&dconv).into_iter();
        let dfeat = gc.next().expect("conv input");
        grads.accumulate(names::SFB_CONV_W, &gc.next().expect("conv w"));
        grads.accumulate(names::SFB_CONV_B, &gc.next().expect("conv b"));
        vec![dfeat]
    }))
}

/// Decodes stage `l`'s parameters from the previous latent.
///
/// Plain mode: `act(f_full(V))`; residual modes: `act(p̂ + f_full(V))`.
/// Backward yields `[∂/∂V_prev]` and accumulates decode-layer gradients and,
/// in residual modes, the gradient of `p̂`.
pub fn decode_params(
    params: &Params,
    l: usize,
    stage: &StageSpec,
    v_prev: &Tensor,
    mode: DecodeMode,
) -> Result<StorePass> {
    if !v_prev.all_finite() {
        return Err(Error::Numeric(format!(
            "latent entering head {l} is not finite"
        )));
    }
    let lin = fc(
        v_prev,
        params.get(&names::dec_w(l))?,
        params.get(&names::dec_b(l))?,
    )?;
    let mut pre = lin.output.clone();
    if pre.len() != stage.kind.param_count() {
        return Err(Error::Config(format!(
            "head {l} decodes {} values but stage {} takes {}",
            pre.len(),
            stage.kind.name(),
            stage.kind.param_count()
        )));
    }
    if mode.is_residual() {
        let phat = params.get(&names::phat(l))?;
        phat.check_shape("decode_params", "phat", &[stage.kind.param_count()])?;
        pre.add_assign(phat);
    }
    let out: Vec<f64> = pre
        .data()
        .iter()
        .zip(&stage.params)
        .map(|(&x, s)| act_range(x, s))
        .collect();
    let specs = stage.params.clone();
    Ok(StorePass::new(Tensor::from_vec(out), move |g, grads| {
        let dz: Vec<f64> = g
            .data()
            .iter()
            .zip(pre.data())
            .zip(&specs)
            .map(|((&gv, &x), s)| gv * act_range_grad(x, s))
            .collect();
        let dz = Tensor::from_vec(dz);
        if mode.is_residual() {
            grads.accumulate(&names::phat(l), &dz);
        }
        let mut gl = lin.backward(&dz).into_iter();
        let dv = gl.next().expect("dec input");
        grads.accumulate(&names::dec_w(l), &gl.next().expect("dec w"));
        grads.accumulate(&names::dec_b(l), &gl.next().expect("dec b"));
        vec![dv]
    }))
}

/// `V_l = f_a(P_l) ⊙ V_{l-1}` where `f_a` rescales each parameter to
/// `[0,1]` by its bounds, then applies fc → ReLU → fc → `5·sigmoid`.
///
/// Backward yields `[∂/∂P_l, ∂/∂V_prev]`.
pub fn update_latent(
    params: &Params,
    l: usize,
    stage: &StageSpec,
    p_l: &Tensor,
    v_prev: &Tensor,
) -> Result<StorePass> {
    if p_l.len() != stage.params.len() {
        return Err(Error::Config(format!(
            "head {l} update expects {} parameters, got {}",
            stage.params.len(),
            p_l.len()
        )));
    }
    for (v, s) in p_l.data().iter().zip(&stage.params) {
        if !s.contains(*v) {
            return Err(Error::Domain(format!(
                "head {l} parameter `{}` = {v} not strictly inside ({}, {})",
                s.name, s.min, s.max
            )));
        }
    }
    let norm = Tensor::from_vec(
        p_l.data()
            .iter()
            .zip(&stage.params)
            .map(|(&v, s)| s.normalize(v))
            .collect(),
    );
    let h1 = fc(
        &norm,
        params.get(&names::upd1_w(l))?,
        params.get(&names::upd1_b(l))?,
    )?;
    let a1 = relu(&h1.output);
    let h2 = fc(
        &a1.output,
        params.get(&names::upd2_w(l))?,
        params.get(&names::upd2_b(l))?,
    )?;
    if h2.output.len() != v_prev.len() {
        return Err(Error::dim(
            "update_latent",
            format!(
                "gate width {} differs from latent width {}",
                h2.output.len(),
                v_prev.len()
            ),
        ));
    }
    let sig: Vec<f64> = h2
        .output
        .data()
        .iter()
        .map(|&x| sigmoid_scalar(x))
        .collect();
    let out: Vec<f64> = sig
        .iter()
        .zip(v_prev.data())
        .map(|(&s, &v)| GATE_SCALE * s * v)
        .collect();
    let v_prev = v_prev.clone();
    let ranges: Vec<f64> = stage.params.iter().map(ParamSpec::range).collect();
    Ok(StorePass::new(Tensor::from_vec(out), move |g, grads| {
        let gd = g.data();
        let dv_prev: Vec<f64> = gd
            .iter()
            .zip(&sig)
            .map(|(&gv, &s)| gv * GATE_SCALE * s)
            .collect();
        let da: Vec<f64> = gd
            .iter()
            .zip(&sig)
            .zip(v_prev.data())
            .map(|((&gv, &s), &v)| gv * v * GATE_SCALE * s * (1.0 - s))
            .collect();
        let mut g2 = h2.backward(&Tensor::from_vec(da)).into_iter();
        let dact = g2.next().expect("upd2 input");
        grads.accumulate(&names::upd2_w(l), &g2.next().expect("upd2 w"));
        grads.accumulate(&names::upd2_b(l), &g2.next().expect("upd2 b"));
        let dh1 = a1.backward(&dact).remove(0);
        let mut g1 = h1.backward(&dh1).into_iter();
        let dnorm = g1.next().expect("upd1 input");
        grads.accumulate(&names::upd1_w(l), &g1.next().expect("upd1 w"));
        grads.accumulate(&names::upd1_b(l), &g1.next().expect("upd1 b"));
        let dp: Vec<f64> = dnorm
            .data()
            .iter()
            .zip(&ranges)
            .map(|(&d, &r)| d / r)
            .collect();
        vec![Tensor::from_vec(dp), Tensor::from_vec(dv_prev)]
    }))
}

/// Gate values `5·sigmoid(·)` of head `l` for a given parameter set.
pub fn gate_values(params: &Params, l: usize, stage: &StageSpec, p_l: &Tensor) -> Result<Vec<f64>> {
    let width = params.get(&names::upd2_b(l))?.len();
    let ones = Tensor::full(&[width], 1.0);
    Ok(update_latent(params, l, stage, p_l, &ones)?
        .output
        .into_data())
}

/// Decodes every stage from the feature.
///
/// `V_0 = encode_sfb(X_t)`; for each stage `P_l = decode(V_{l-1})` and, with
/// latent update on, `V_l = update(P_l, V_{l-1})`, otherwise `V_l = V_0`.
/// The output concatenates all `P_l`; backward yields `[∂/∂X_t]`.
pub fn control_pipeline(
    params: &Params,
    feature: &Tensor,
    cfg: &ControllerConfig,
    spec: &PipelineSpec,
) -> Result<StorePass> {
    for l in 0..spec.len() {
        if !params.contains(&names::dec_w(l)) {
            return Err(Error::Config(format!(
                "controller has no head for pipeline stage {l}"
            )));
        }
    }
    if params.contains(&names::dec_w(spec.len())) {
        return Err(Error::Config(format!(
            "controller has more heads than the {}-stage pipeline",
            spec.len()
        )));
    }
    let sfb = encode_sfb(params, feature)?;
    let v0 = sfb.output.clone();
    let mut decodes = Vec::with_capacity(spec.len());
    let mut updates = Vec::with_capacity(spec.len());
    let mut v = v0.clone();
    let mut flat = Vec::with_capacity(spec.total_params());
    let last = spec.len() - 1;
    for (l, stage) in spec.stages.iter().enumerate() {
        let dec = decode_params(params, l, stage, &v, cfg.mode)?;
        flat.extend_from_slice(dec.output.data());
        // The final latent feeds nothing, so its update is skipped.
        if cfg.latent_update && l < last {
            let upd = update_latent(params, l, stage, &dec.output, &v)?;
            v = upd.output.clone();
            updates.push(upd);
        }
        decodes.push(dec);
    }
    let sizes: Vec<usize> = spec.stages.iter().map(|s| s.kind.param_count()).collect();
    let offsets = spec.offsets();
    let lu = cfg.latent_update;
    Ok(StorePass::new(Tensor::from_vec(flat), move |g, grads| {
        let gd = g.data();
        let slice = |l: usize| Tensor::from_vec(gd[offsets[l]..offsets[l] + sizes[l]].to_vec());
        if lu {
            // Walk the chain backwards; dv holds ∂/∂V_l.
            let mut dv = Tensor::zeros(v0.shape());
            for l in (0..decodes.len()).rev() {
                let mut dp = slice(l);
                let mut dv_prev = Tensor::zeros(v0.shape());
                if let Some(upd) = updates.get(l) {
                    let mut gu = upd.backward(&dv, grads).into_iter();
                    dp.add_assign(&gu.next().expect("dP"));
                    dv_prev.add_assign(&gu.next().expect("dV"));
                }
                dv_prev.add_assign(&decodes[l].backward(&dp, grads).remove(0));
                dv = dv_prev;
            }
            sfb.backward(&dv, grads)
        } else {
            let mut dv0 = Tensor::zeros(v0.shape());
            for (l, dec) in decodes.iter().enumerate() {
                dv0.add_assign(&dec.backward(&slice(l), grads).remove(0));
            }
            sfb.backward(&dv0, grads)
        }
    }))
}

/// FLOPs of one additional controller head (decode plus latent update).
pub fn head_graph(cfg: &ControllerConfig, n_params: usize) -> Vec<OpDesc> {
    let (z, u, n) = (
        cfg.latent_width as u64,
        cfg.update_hidden as u64,
        n_params as u64,
    );
    let mut g = vec![
        OpDesc::Fc { n_in: z, n_out: n },
        OpDesc::Add { n },
        OpDesc::Sigmoid { n },
        OpDesc::Affine { n },
    ];
    if cfg.latent_update {
        g.extend([
            OpDesc::Affine { n },
            OpDesc::Fc { n_in: n, n_out: u },
            OpDesc::Relu { n: u },
            OpDesc::Fc { n_in: u, n_out: z },
            OpDesc::Sigmoid { n: z },
            OpDesc::Mul { n: z },
            OpDesc::Mul { n: z },
        ]);
    }
    g
}

/// FLOPs of the feature branch for a `C×H×W` tapped feature.
pub fn sfb_graph(cfg: &ControllerConfig, feature_shape: [usize; 3]) -> Vec<OpDesc> {
    let [c, h, w] = feature_shape;
    let ho = crate::ndiff::ops::conv_out_extent(h, 3, 2) as u64;
    let wo = crate::ndiff::ops::conv_out_extent(w, 3, 2) as u64;
    let f = cfg.sfb_conv_channels as u64;
    vec![
        OpDesc::Conv {
            filters: f,
            channels: c as u64,
            k: 3,
            h_out: ho,
            w_out: wo,
        },
        OpDesc::Relu { n: f * ho * wo },
        OpDesc::Pool {
            channels: f,
            h: ho,
            w: wo,
        },
        OpDesc::Fc {
            n_in: f,
            n_out: cfg.sfb_hidden as u64,
        },
        OpDesc::Relu {
            n: cfg.sfb_hidden as u64,
        },
        OpDesc::Fc {
            n_in: cfg.sfb_hidden as u64,
            n_out: cfg.latent_width as u64,
        },
    ]
}

/// Whole-controller graph: feature branch plus one head per stage.
pub fn controller_graph(
    cfg: &ControllerConfig,
    spec: &PipelineSpec,
    feature_shape: [usize; 3],
) -> Vec<OpDesc> {
    let mut g = sfb_graph(cfg, feature_shape);
    for s in &spec.stages {
        g.extend(head_graph(cfg, s.kind.param_count()));
    }
    g
}
