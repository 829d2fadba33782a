//! Neural primitives with exact vector-Jacobian products.
//!
//! Every op returns a [`GradRecord`]: the forward output together with a
//! closure mapping an upstream gradient (shaped like the output) to one
//! gradient per input, in the order the op takes its arguments.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

type BackwardFn = dyn Fn(&Tensor) -> Vec<Tensor> + Send + Sync;

/// Forward output paired with its backward contract.
pub struct GradRecord {
    pub output: Tensor,
    backward: Box<BackwardFn>,
}

impl GradRecord {
    pub fn new(
        output: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Tensor> + Send + Sync + 'static,
    ) -> Self {
        GradRecord {
            output,
            backward: Box::new(backward),
        }
    }

    /// Vector-Jacobian product for every input of the op.
    pub fn backward(&self, upstream: &Tensor) -> Vec<Tensor> {
        debug_assert_eq!(upstream.shape(), self.output.shape());
        (self.backward)(upstream)
    }
}

impl std::fmt::Debug for GradRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradRecord")
            .field("output", &self.output)
            .finish_non_exhaustive()
    }
}

/// Fully connected layer `weight · input + bias`.
pub fn fc(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<GradRecord> {
    if weight.shape().len() != 2 {
        return Err(Error::dim(
            "fc",
            format!("weight must be 2-D, got {:?}", weight.shape()),
        ));
    }
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    if input.len() != n_in || input.shape().len() != 1 {
        return Err(Error::dim(
            "fc",
            format!(
                "input {:?} does not match weight {:?}",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    bias.check_shape("fc", "bias", &[n_out])?;

    let x = input.data();
    let w = weight.data();
    let mut out = bias.data().to_vec();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }

    let input = input.clone();
    let weight = weight.clone();
    Ok(GradRecord::new(Tensor::from_vec(out), move |g| {
        let g = g.data();
        let w = weight.data();
        let x = input.data();
        let mut dx = vec![0.0; n_in];
        let mut dw = vec![0.0; n_out * n_in];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            let drow = &mut dw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                dx[i] += row[i] * go;
                drow[i] = go * x[i];
            }
        }
        vec![
            Tensor::from_vec(dx),
            Tensor::new(vec![n_out, n_in], dw).expect("fc weight grad shape"),
            Tensor::from_vec(g.to_vec()),
        ]
    }))
}

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Reflect,
    Zero,
}

const OUTSIDE: usize = usize::MAX;

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Source index for every (output position, tap) pair along one axis.
pub(crate) fn tap_table(
    n_in: usize,
    n_out: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Vec<usize> {
    let pad = (k / 2) as isize;
    let mut table = Vec::with_capacity(n_out * k);
    for o in 0..n_out {
        for t in 0..k {
            let i = (o * stride) as isize + t as isize - pad;
            let idx = match padding {
                Padding::Reflect => reflect_index(i, n_in),
                Padding::Zero if i < 0 || i >= n_in as isize => OUTSIDE,
                Padding::Zero => i as usize,
            };
            table.push(idx);
        }
    }
    table
}

/// Output extent of a "same"-padded convolution with the given stride.
pub fn conv_out_extent(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

/// 2-D cross-correlation over a `C×H×W` input with `F×C×k×k` kernels.
///
/// Padding is `k/2` on every side. Gradients are returned for the input,
/// the kernels and (when present) the bias.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<GradRecord> {
    if input.shape().len() != 3 || kernels.shape().len() != 4 {
        return Err(Error::dim(
            "conv2d",
            format!(
                "expected C×H×W input and F×C×k×k kernels, got {:?} and {:?}",
                input.shape(),
                kernels.shape()
            ),
        ));
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (f_out, kc, k, k2) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if k % 2 == 0 || k != k2 {
        return Err(Error::Config(format!(
            "conv2d kernel must be square with odd size, got {k}×{k2}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if kc != c_in {
        return Err(Error::dim(
            "conv2d",
            format!("input has {c_in} channels, kernels expect {kc}"),
        ));
    }
    let pad = k / 2;
    if padding == Padding::Reflect && (h <= pad || w <= pad) {
        return Err(Error::dim(
            "conv2d",
            format!("{h}×{w} input too small for reflect padding {pad}"),
        ));
    }
    if let Some(b) = bias {
        b.check_shape("conv2d", "bias", &[f_out])?;
    }
    let ho = conv_out_extent(h, k, stride);
    let wo = conv_out_extent(w, k, stride);
    let rows = tap_table(h, ho, k, stride, padding);
    let cols = tap_table(w, wo, k, stride, padding);

    let x = input.data();
    let kd = kernels.data();
    let mut out = vec![0.0; f_out * ho * wo];
    for f in 0..f_out {
        let out_f = &mut out[f * ho * wo..(f + 1) * ho * wo];
        if let Some(b) = bias {
            out_f.fill(b.data()[f]);
        }
        for c in 0..c_in {
            let x_c = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kd[((f * c_in + c) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let iy = rows[oy * k + ky];
                        if iy == OUTSIDE {
                            continue;
                        }
                        let x_row = &x_c[iy * w..(iy + 1) * w];
                        let o_row = &mut out_f[oy * wo..(oy + 1) * wo];
                        for ox in 0..wo {
                            let ix = cols[ox * k + kx];
                            if ix != OUTSIDE {
                                o_row[ox] += wv * x_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    let input = input.clone();
    let kernels = kernels.clone();
    let has_bias = bias.is_some();
    let output = Tensor::new(vec![f_out, ho, wo], out).expect("conv2d output shape");
    Ok(GradRecord::new(output, move |g| {
        let g = g.data();
        let x = input.data();
        let kd = kernels.data();
        let mut dx = vec![0.0; c_in * h * w];
        let mut dk = vec![0.0; kd.len()];
        for f in 0..f_out {
            let g_f = &g[f * ho * wo..(f + 1) * ho * wo];
            for c in 0..c_in {
                let x_c = &x[c * h * w..(c + 1) * h * w];
                let dx_c = &mut dx[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((f * c_in + c) * k + ky) * k + kx;
                        let wv = kd[widx];
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = rows[oy * k + ky];
                            if iy == OUTSIDE {
                                continue;
                            }
                            let g_row = &g_f[oy * wo..(oy + 1) * wo];
                            for ox in 0..wo {
                                let ix = cols[ox * k + kx];
                                if ix != OUTSIDE {
                                    let gv = g_row[ox];
                                    acc += gv * x_c[iy * w + ix];
                                    dx_c[iy * w + ix] += wv * gv;
                                }
                            }
                        }
                        dk[widx] = acc;
                    }
                }
            }
        }
        let mut grads = vec![
            Tensor::new(vec![c_in, h, w], dx).expect("conv2d input grad shape"),
            Tensor::new(vec![f_out, c_in, k, k], dk).expect("conv2d kernel grad shape"),
        ];
        if has_bias {
            let db = (0..f_out)
                .map(|f| g[f * ho * wo..(f + 1) * ho * wo].iter().sum())
                .collect();
            grads.push(Tensor::from_vec(db));
        }
        grads
    }))
}

pub fn relu(input: &Tensor) -> GradRecord {
    let out = input.map(|v| v.max(0.0));
    let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
    GradRecord::new(out, move |g| {
        let mut d = g.clone();
        for (v, &m) in d.data_mut().iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        vec![d]
    })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> GradRecord {
    let out = input.map(sigmoid_scalar);
    let s = out.clone();
    GradRecord::new(out, move |g| {
        let mut d = g.clone();
        for (v, &sv) in d.data_mut().iter_mut().zip(s.data()) {
            *v *= sv * (1.0 - sv);
        }
        vec![d]
    })
}

/// Mean over the spatial extent of a `C×H×W` tensor, giving `C` values.
pub fn global_avg_pool(input: &Tensor) -> Result<GradRecord> {
    if input.shape().len() != 3 {
        return Err(Error::dim(
            "global_avg_pool",
            format!("expected C×H×W, got {:?}", input.shape()),
        ));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let hw = h * w;
    let out: Vec<f64> = input
        .data()
        .chunks_exact(hw)
        .map(|ch| ch.iter().sum::<f64>() / hw as f64)
        .collect();
    Ok(GradRecord::new(Tensor::from_vec(out), move |g| {
        let mut d = Vec::with_capacity(c * hw);
        for &gv in g.data() {
            d.extend(std::iter::repeat_n(gv / hw as f64, hw));
        }
        vec![Tensor::new(vec![c, h, w], d).expect("pool grad shape")]
    }))
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of `softmax(logits)` against an integer class label.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<GradRecord> {
    let k = logits.len();
    if label >= k {
        return Err(Error::Index(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    let z = logits.data();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let loss = (lse - z[label]).max(0.0);
    let probs = softmax(z);
    let shape = logits.shape().to_vec();
    Ok(GradRecord::new(Tensor::scalar(loss), move |g| {
        let gv = g.data()[0];
        let mut d = probs.clone();
        d[label] -= 1.0;
        for v in &mut d {
            *v *= gv;
        }
        vec![Tensor::new(shape.clone(), d).expect("ce grad shape")]
    }))
}
