//! Forward formulas and analytic backward passes of the five ISP stages.
//!
//! Each `apply_*` returns a [`GradRecord`] whose backward yields
//! `[∂/∂X, ∂/∂params]` with the parameter gradient packed in stage order.

use super::IspKind;
use crate::error::{Error, Result};
use crate::ndiff::ops::{tap_table, Padding};
use crate::ndiff::{GradRecord, Tensor};

/// Stage filters use a fixed 5×5 support.
const KSIZE: usize = 5;

/// Lower clamp applied to GM inputs; `d/dX X^e` diverges at 0 for `e < 1`.
pub const GM_CLAMP_MIN: f64 = 1e-6;
/// Minimum admissible magnitude of the GM exponent denominator.
pub const GM_DENOM_GUARD: f64 = 1e-6;

fn image_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] if h > KSIZE / 2 && w > KSIZE / 2 => Ok((c, h, w)),
        _ => Err(Error::dim(
            op,
            format!("expected C×H×W image with H,W ≥ 3, got {:?}", x.shape()),
        )),
    }
}

fn params_tensor(g: [f64; 3], n: usize) -> Tensor {
    Tensor::from_vec(g[..n].to_vec())
}

/// Auto gain.
///
/// With `a = p_x(1−p_w)` and `b = a + p_w`, pixels below `a` and above `b`
/// follow the two outer segments of slope `(1−p_h)/(1−p_w)` anchored at 0
/// and 1; the band in between is stretched with slope `p_h/p_w`. Pixels
/// exactly on a breakpoint take the central segment.
pub fn apply_ag(x: &Tensor, p_w: f64, p_h: f64, p_x: f64) -> Result<GradRecord> {
    let open = |v: f64| v > 0.0 && v < 1.0;
    if !open(p_w) || !open(p_h) || !(0.0..=1.0).contains(&p_x) {
        return Err(Error::Domain(format!(
            "AG requires 0<p_w<1, 0<p_h<1, 0≤p_x≤1; got p_w={p_w}, p_h={p_h}, p_x={p_x}"
        )));
    }
    let lo = p_x * (1.0 - p_w);
    let hi = lo + p_w;
    let outer = (1.0 - p_h) / (1.0 - p_w);
    let inner = p_h / p_w;
    let out = x.map(|v| {
        if v < lo {
            outer * v
        } else if v > hi {
            outer * v + (p_h - p_w) / (1.0 - p_w)
        } else {
            p_x + inner * (v - p_x)
        }
    });
    let input = x.clone();
    Ok(GradRecord::new(out, move |g| {
        let mut dx = g.clone();
        let mut dp = [0.0; 3];
        let omw = 1.0 - p_w;
        for (d, &v) in dx.data_mut().iter_mut().zip(input.data()) {
            let gv = *d;
            if v < lo {
                *d = gv * outer;
                dp[0] += gv * (1.0 - p_h) * v / (omw * omw);
                dp[1] += gv * (-v / omw);
            } else if v > hi {
                *d = gv * outer;
                dp[0] += gv * (-(1.0 - p_h) * (1.0 - v) / (omw * omw));
                dp[1] += gv * (1.0 - v) / omw;
            } else {
                *d = gv * inner;
                dp[0] += gv * (-p_h / (p_w * p_w) * (v - p_x));
                dp[1] += gv * (v - p_x) / p_w;
                dp[2] += gv * (1.0 - inner);
            }
        }
        vec![dx, params_tensor(dp, 3)]
    }))
}

/// Normalized `size×size` Gaussian kernel with standard deviation `sigma`.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut k = Vec::with_capacity(size * size);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            k.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

fn squared_offsets(size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut d = Vec::with_capacity(size * size);
    for dy in -r..=r {
        for dx in -r..=r {
            d.push((dy * dy + dx * dx) as f64);
        }
    }
    d
}

/// Per-channel Gaussian filter with reflect padding.
pub fn gaussian_filter(x: &Tensor, sigma: f64, size: usize) -> Result<Tensor> {
    if size % 2 == 0 {
        return Err(Error::Config(format!(
            "Gaussian size must be odd, got {size}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::Domain(format!(
            "Gaussian sigma must be positive, got {sigma}"
        )));
    }
    let (c, h, w) = match *x.shape() {
        [c, h, w] if h > size / 2 && w > size / 2 => (c, h, w),
        _ => {
            return Err(Error::dim(
                "gaussian_filter",
                format!("image {:?} too small for size {size}", x.shape()),
            ))
        }
    };
    let k = gaussian_kernel(sigma, size);
    Ok(Tensor::new(vec![c, h, w], correlate(x.data(), c, h, w, &k, size)).expect("shape"))
}

/// Difference of Gaussians with support sizes one and five: `GF₁(X) − GF₅(X)`.
pub fn dog(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let narrow = gaussian_filter(x, sigma, 1)?;
    let wide = gaussian_filter(x, sigma, KSIZE)?;
    let mut out = narrow;
    out.add_scaled(&wide, -1.0);
    Ok(out)
}

fn correlate(x: &[f64], c: usize, h: usize, w: usize, k: &[f64], size: usize) -> Vec<f64> {
    let rows = tap_table(h, h, size, 1, Padding::Reflect);
    let cols = tap_table(w, w, size, 1, Padding::Reflect);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let oc = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ky in 0..size {
                    let sy = rows[y * size + ky];
                    for kx in 0..size {
                        acc += k[ky * size + kx] * xc[sy * w + cols[xx * size + kx]];
                    }
                }
                oc[y * w + xx] = acc;
            }
        }
    }
    out
}

/// `Σ_t k_t (x_i − x_j(t))`, i.e. `X − GF(X)` for a normalized kernel,
/// computed from differences so constant regions give exactly zero.
fn detail_response(x: &[f64], c: usize, h: usize, w: usize, k: &[f64], size: usize) -> Vec<f64> {
    let rows = tap_table(h, h, size, 1, Padding::Reflect);
    let cols = tap_table(w, w, size, 1, Padding::Reflect);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let oc = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let xi = xc[y * w + xx];
                let mut acc = 0.0;
                for ky in 0..size {
                    let sy = rows[y * size + ky];
                    for kx in 0..size {
                        acc += k[ky * size + kx] * (xi - xc[sy * w + cols[xx * size + kx]]);
                    }
                }
                oc[y * w + xx] = acc;
            }
        }
    }
    out
}

/// Transpose of [`correlate`]: scatters `g` back through the taps.
fn correlate_transpose(
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: &[f64],
    size: usize,
) -> Vec<f64> {
    let rows = tap_table(h, h, size, 1, Padding::Reflect);
    let cols = tap_table(w, w, size, 1, Padding::Reflect);
    let mut out = vec![0.0; g.len()];
    for ch in 0..c {
        let gc = &g[ch * h * w..(ch + 1) * h * w];
        let oc = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let gv = gc[y * w + xx];
                for ky in 0..size {
                    let sy = rows[y * size + ky];
                    for kx in 0..size {
                        oc[sy * w + cols[xx * size + kx]] += k[ky * size + kx] * gv;
                    }
                }
            }
        }
    }
    out
}

/// Denoiser: `(1−p_a)·X + p_a·BF(X)` with a 5×5 bilateral filter whose
/// spatial and intensity weights are Gaussians of deviation `p_σs` and
/// `p_σi`, normalized per pixel. Intensity differences use the input.
pub fn apply_dn(x: &Tensor, p_a: f64, sigma_s: f64, sigma_i: f64) -> Result<GradRecord> {
    if sigma_s <= 0.0 || sigma_i <= 0.0 {
        return Err(Error::Domain(format!(
            "DN sigmas must be positive, got p_sigma_s={sigma_s}, p_sigma_i={sigma_i}"
        )));
    }
    let (c, h, w) = image_dims("apply_dn", x)?;
    let rows = tap_table(h, h, KSIZE, 1, Padding::Reflect);
    let cols = tap_table(w, w, KSIZE, 1, Padding::Reflect);
    let d2 = squared_offsets(KSIZE);
    let spatial: Vec<f64> = d2
        .iter()
        .map(|&d| (-d / (2.0 * sigma_s * sigma_s)).exp())
        .collect();
    let inv_2si2 = 1.0 / (2.0 * sigma_i * sigma_i);
    let taps = KSIZE * KSIZE;
    let xd = x.data();

    // Per pixel: filter response minus input and weight sum; per tap: source index and weight.
    let mut detail = vec![0.0; xd.len()];
    let mut wsum = vec![0.0; xd.len()];
    let mut src = vec![0usize; xd.len() * taps];
    let mut weights = vec![0.0; xd.len() * taps];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = base + y * w + xx;
                let xi = xd[i];
                let (mut num, mut den) = (0.0, 0.0);
                for ky in 0..KSIZE {
                    let sy = rows[y * KSIZE + ky];
                    for kx in 0..KSIZE {
                        let t = ky * KSIZE + kx;
                        let j = base + sy * w + cols[xx * KSIZE + kx];
                        let diff = xi - xd[j];
                        let wt = spatial[t] * (-diff * diff * inv_2si2).exp();
                        src[i * taps + t] = j;
                        weights[i * taps + t] = wt;
                        num -= wt * diff;
                        den += wt;
                    }
                }
                // BF(X) − X accumulated from neighbour differences, so flat
                // regions are reproduced exactly.
                detail[i] = num / den;
                wsum[i] = den;
            }
        }
    }
    let out: Vec<f64> = xd
        .iter()
        .zip(&detail)
        .map(|(&xv, &d)| xv + p_a * d)
        .collect();

    let input = x.clone();
    let output = Tensor::new(x.shape().to_vec(), out).expect("shape");
    Ok(GradRecord::new(output, move |g| {
        let xd = input.data();
        let gd = g.data();
        let mut dx = vec![0.0; xd.len()];
        let mut dp = [0.0; 3];
        let si2 = sigma_i * sigma_i;
        let ss3 = sigma_s * sigma_s * sigma_s;
        let si3 = si2 * sigma_i;
        for i in 0..xd.len() {
            let gi = gd[i];
            if gi == 0.0 {
                continue;
            }
            dp[0] += gi * detail[i];
            dx[i] += gi * (1.0 - p_a);
            let gb = gi * p_a;
            let inv_w = 1.0 / wsum[i];
            let b = xd[i] + detail[i];
            for t in 0..taps {
                let j = src[i * taps + t];
                let wt = weights[i * taps + t];
                // Numerator path.
                dx[j] += gb * wt * inv_w;
                // Weight path through log w_ij.
                let cw = gb * (xd[j] - b) * inv_w * wt;
                let diff = xd[i] - xd[j];
                dx[i] -= cw * diff / si2;
                dx[j] += cw * diff / si2;
                dp[1] += cw * d2[t] / ss3;
                dp[2] += cw * diff * diff / si3;
            }
        }
        vec![
            Tensor::new(input.shape().to_vec(), dx).expect("shape"),
            params_tensor(dp, 3),
        ]
    }))
}

/// Sharpener: `X + p_a·DoG(X)` where `DoG(X) = X − GF(p_σ; X)` uses a
/// renormalized 5×5 Gaussian. `p_a` blends between the input and the fully
/// sharpened image `X + DoG(X)`.
pub fn apply_sn(x: &Tensor, p_a: f64, sigma: f64) -> Result<GradRecord> {
    if sigma <= 0.0 {
        return Err(Error::Domain(format!(
            "SN sigma must be positive, got p_sigma={sigma}"
        )));
    }
    let (c, h, w) = image_dims("apply_sn", x)?;
    let k = gaussian_kernel(sigma, KSIZE);
    let detail = detail_response(x.data(), c, h, w, &k, KSIZE);
    let out: Vec<f64> = x
        .data()
        .iter()
        .zip(&detail)
        .map(|(&v, &d)| v + p_a * d)
        .collect();

    let input = x.clone();
    let output = Tensor::new(x.shape().to_vec(), out).expect("shape");
    Ok(GradRecord::new(output, move |g| {
        let gd = g.data();
        let back = correlate_transpose(gd, c, h, w, &k, KSIZE);
        let dx: Vec<f64> = gd
            .iter()
            .zip(&back)
            .map(|(&gv, &b)| (1.0 + p_a) * gv - p_a * b)
            .collect();
        let da = gd.iter().zip(&detail).map(|(a, b)| a * b).sum::<f64>();

        // dk_t/dσ = k_t (d_t² − Σ k_m d_m²) / σ³
        let d2 = squared_offsets(KSIZE);
        let mean_d2: f64 = k.iter().zip(&d2).map(|(a, b)| a * b).sum();
        let s3 = sigma * sigma * sigma;
        let dk: Vec<f64> = k
            .iter()
            .zip(&d2)
            .map(|(&kt, &dt)| kt * (dt - mean_d2) / s3)
            .collect();
        let dblur = correlate(input.data(), c, h, w, &dk, KSIZE);
        let ds = -p_a * gd.iter().zip(&dblur).map(|(a, b)| a * b).sum::<f64>();
        vec![
            Tensor::new(input.shape().to_vec(), dx).expect("shape"),
            Tensor::from_vec(vec![da, ds]),
        ]
    }))
}

/// Gamma tone mapping `X^e` with
/// `e = (1/p_g1) · (1 − (1−p_g2)·X^(1/p_g1)) / (1 − (1−p_g2)·p_k^(1/p_g1))`,
/// evaluated on `X` clamped to `[1e-6, 1]`. Input gradients vanish where the
/// clamp is active.
pub fn apply_gm(x: &Tensor, g1: f64, g2: f64, knee: f64) -> Result<GradRecord> {
    if g1 <= 0.0 || knee <= 0.0 {
        return Err(Error::Domain(format!(
            "GM requires p_g1>0 and p_k>0; got p_g1={g1}, p_k={knee}"
        )));
    }
    let r = 1.0 / g1;
    let kr = knee.powf(r);
    let den = 1.0 - (1.0 - g2) * kr;
    if den.abs() < GM_DENOM_GUARD || !den.is_finite() {
        return Err(Error::Domain(format!(
            "GM exponent denominator {den:e} below guard for p_g1={g1}, p_g2={g2}, p_k={knee}"
        )));
    }
    let out = x.map(|v| {
        let xc = v.clamp(GM_CLAMP_MIN, 1.0);
        let num = 1.0 - (1.0 - g2) * xc.powf(r);
        (r * num / den * xc.ln()).exp()
    });
    let input = x.clone();
    let y = out.clone();
    Ok(GradRecord::new(out, move |g| {
        let mut dx = g.clone();
        let mut dp = [0.0; 3];
        let ln_k = knee.ln();
        let dden_dr = -(1.0 - g2) * kr * ln_k;
        let dden_dk = -(1.0 - g2) * r * kr / knee;
        for ((d, &v), &yv) in dx.data_mut().iter_mut().zip(input.data()).zip(y.data()) {
            let gv = *d;
            let xc = v.clamp(GM_CLAMP_MIN, 1.0);
            let lx = xc.ln();
            let u = (r * lx).exp();
            let num = 1.0 - (1.0 - g2) * u;
            let e = r * num / den;
            // Clamped pixels still depend on the parameters through xc^e.
            *d = if (GM_CLAMP_MIN..=1.0).contains(&v) {
                let de_dx = r * (-(1.0 - g2) * r * u / v) / den;
                gv * yv * (de_dx * lx + e / v)
            } else {
                0.0
            };

            let dnum_dr = -(1.0 - g2) * u * lx;
            let de_dr = num / den + r * dnum_dr / den - r * num * dden_dr / (den * den);
            let de_dg1 = -r * r * de_dr;
            let de_dg2 = r * (u * den - num * kr) / (den * den);
            let de_dk = -r * num * dden_dk / (den * den);
            let common = gv * yv * lx;
            dp[0] += common * de_dg1;
            dp[1] += common * de_dg2;
            dp[2] += common * de_dk;
        }
        vec![dx, params_tensor(dp, 3)]
    }))
}

/// Contrast stretcher `q_b·X + q_c`; no clipping.
pub fn apply_cs(x: &Tensor, q_b: f64, q_c: f64) -> Result<GradRecord> {
    if !q_b.is_finite() || !q_c.is_finite() {
        return Err(Error::Domain(format!(
            "CS parameters must be finite, got q_b={q_b}, q_c={q_c}"
        )));
    }
    let out = x.map(|v| q_b * v + q_c);
    let input = x.clone();
    Ok(GradRecord::new(out, move |g| {
        let dqb = g.dot(&input);
        let dqc = g.sum();
        vec![g.scale(q_b), Tensor::from_vec(vec![dqb, dqc])]
    }))
}

/// Dispatches on `kind`; `params` must hold exactly that stage's count.
pub fn apply_stage(kind: IspKind, x: &Tensor, params: &[f64]) -> Result<GradRecord> {
    if params.len() != kind.param_count() {
        return Err(Error::Config(format!(
            "{} takes {} parameters, got {}",
            kind.name(),
            kind.param_count(),
            params.len()
        )));
    }
    match kind {
        IspKind::Ag => apply_ag(x, params[0], params[1], params[2]),
        IspKind::Dn => apply_dn(x, params[0], params[1], params[2]),
        IspKind::Sn => apply_sn(x, params[0], params[1]),
        IspKind::Gm => apply_gm(x, params[0], params[1], params[2]),
        IspKind::Cs => apply_cs(x, params[0], params[1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor {
        let data = (0..h * w)
            .map(|i| (i as f64 + 0.5) / (h * w) as f64)
            .collect();
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn ag_identity_when_heights_match_widths() {
        let x = ramp(4, 4);
        for &(pw, px) in &[(0.3, 0.2), (0.7, 0.9), (0.5, 0.5)] {
            let r = apply_ag(&x, pw, pw, px).unwrap();
            for (a, b) in r.output.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ag_breakpoints_continuous_and_endpoints_fixed() {
        let (pw, ph, px) = (0.3, 0.6, 0.4);
        let lo = px * (1.0 - pw);
        let hi = lo + pw;
        let probe = Tensor::from_vec(vec![0.0, lo, hi, 1.0]);
        let y = apply_ag(&probe, pw, ph, px).unwrap().output;
        assert!(y.data()[0].abs() < 1e-12);
        assert!((y.data()[1] - px * (1.0 - ph)).abs() < 1e-12);
        assert!((y.data()[2] - (px * (1.0 - ph) + ph)).abs() < 1e-12);
        assert!((y.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ag_rejects_closed_bounds() {
        assert!(matches!(
            apply_ag(&ramp(3, 3), 1.0, 0.5, 0.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sn_zero_blend_is_identity() {
        let x = ramp(5, 5);
        assert_eq!(apply_sn(&x, 0.0, 1.0).unwrap().output, x);
    }

    #[test]
    fn dn_zero_blend_is_identity() {
        let x = ramp(6, 5);
        let r = apply_dn(&x, 0.0, 1.0, 0.1).unwrap();
        assert_eq!(r.output, x);
    }

    #[test]
    fn dn_matches_direct_bilateral_loop() {
        // Direct double loop with explicit mirroring, written independently.
        let (h, w) = (7usize, 7usize);
        let x = ramp(h, w);
        let (ss, si) = (1.0f64, 0.1f64);
        let mirror = |i: i64, n: i64| -> usize {
            let j = if i < 0 {
                -i
            } else if i >= n {
                2 * n - 2 - i
            } else {
                i
            };
            j as usize
        };
        let r = apply_dn(&x, 1.0, ss, si).unwrap();
        for y in 0..h as i64 {
            for xx in 0..w as i64 {
                let xi = x.data()[(y * w as i64 + xx) as usize];
                let (mut num, mut den) = (0.0, 0.0);
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let sy = mirror(y + dy, h as i64);
                        let sx = mirror(xx + dx, w as i64);
                        let xj = x.data()[sy * w + sx];
                        let wt = (-((dy * dy + dx * dx) as f64) / (2.0 * ss * ss)
                            - (xi - xj).powi(2) / (2.0 * si * si))
                            .exp();
                        num += wt * xj;
                        den += wt;
                    }
                }
                let got = r.output.data()[(y * w as i64 + xx) as usize];
                assert!((got - num / den).abs() < 1e-13, "({y},{xx})");
            }
        }
    }

    #[test]
    fn dn_and_sn_preserve_constants_exactly() {
        let x = Tensor::full(&[2, 5, 6], 0.4375);
        let dn = apply_dn(&x, 0.8, 1.3, 0.2).unwrap().output;
        let sn = apply_sn(&x, 0.9, 1.1).unwrap().output;
        assert_eq!(dn, x);
        assert_eq!(sn, x);
    }

    #[test]
    fn sn_single_bright_pixel_matches_gaussian_oracle() {
        let mut x = Tensor::zeros(&[1, 9, 9]);
        x.data_mut()[4 * 9 + 4] = 1.0;
        let r = apply_sn(&x, 1.0, 1.0).unwrap();
        // Oracle: unnormalized exp weights over the 5×5 support, then normalize.
        let mut z = 0.0;
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                z += (-((dy * dy + dx * dx) as f64) / 2.0).exp();
            }
        }
        for y in 0..9i32 {
            for xx in 0..9i32 {
                let (dy, dx) = (y - 4, xx - 4);
                let blur = if dy.abs() <= 2 && dx.abs() <= 2 {
                    (-((dy * dy + dx * dx) as f64) / 2.0).exp() / z
                } else {
                    0.0
                };
                let xv = x.data()[(y * 9 + xx) as usize];
                let want = xv + (xv - blur);
                let got = r.output.data()[(y * 9 + xx) as usize];
                assert!((got - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dog_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);
        assert_eq!(gaussian_filter(&x, 0.7, 1).unwrap(), x);
        let lhs = dog(&x, 0.7).unwrap();
        let mut rhs = x.clone();
        rhs.add_scaled(&gaussian_filter(&x, 0.7, 5).unwrap(), -1.0);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gm_reduces_to_plain_gamma_when_g2_is_one() {
        let x = Tensor::from_vec(vec![0.01, 0.2, 0.5, 0.9]);
        let y = apply_gm(&x, 2.2, 1.0, 0.3).unwrap().output;
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b.powf(1.0 / 2.2)).abs() < 1e-15);
        }
    }

    #[test]
    fn gm_fixed_points() {
        let (g1, g2, k) = (1.7, 0.4, 0.35);
        let x = Tensor::from_vec(vec![1.0, k]);
        let y = apply_gm(&x, g1, g2, k).unwrap().output;
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - k.powf(1.0 / g1)).abs() < 1e-12);
    }

    #[test]
    fn gm_reference_value() {
        // e = (1/2.2)(1 − 0.5·0.25^(1/2.2)) / (1 − 0.5·0.5^(1/2.2)), y = 0.25^e,
        // evaluated with 50-digit arithmetic.
        let y = apply_gm(&Tensor::scalar(0.25), 2.2, 0.5, 0.5)
            .unwrap()
            .output;
        assert!(
            (y.data()[0] - GM_REFERENCE).abs() < 1e-12,
            "{}",
            y.data()[0]
        );
    }

    const GM_REFERENCE: f64 = 0.482_889_295_785_070_813_856_461_248_274;

    #[test]
    fn gm_denominator_guard_names_params() {
        // g2 = 1 − 1/k^(1/g1) makes the denominator vanish.
        let (g1, k) = (2.0f64, 0.25f64);
        let g2 = 1.0 - 1.0 / k.powf(1.0 / g1);
        let err = apply_gm(&Tensor::scalar(0.5), g1, g2, k).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("p_g1") && msg.contains("p_g2") && msg.contains("p_k"));
    }

    #[test]
    fn gm_gradient_zero_where_clamped() {
        let x = Tensor::from_vec(vec![0.0, 1.5, 0.5]);
        let r = apply_gm(&x, 2.0, 0.5, 0.5).unwrap();
        let g = r.backward(&Tensor::from_vec(vec![1.0, 1.0, 1.0]));
        assert_eq!(g[0].data()[0], 0.0);
        assert_eq!(g[0].data()[1], 0.0);
        assert!(g[0].data()[2] > 0.0);
    }

    #[test]
    fn gm_param_gradient_counts_low_clamped_pixels() {
        // Output at a low-clamped pixel is 1e-6^e, which moves with the params.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(vec![-0.2, 0.0, 1e-7]);
        let err = finite_diff_check(
            |inp| {
                let p = inp[0].data();
                let r = apply_gm(&x, p[0], p[1], p[2])?;
                let out = r.output.clone();
                Ok(GradRecord::new(out, move |g| vec![r.backward(g).remove(1)]))
            },
            &[Tensor::from_vec(vec![1.7, 0.6, 0.4])],
            1e-5,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cs_arithmetic_and_gradients() {
        let r = apply_cs(&Tensor::scalar(0.3), 2.0, -0.1).unwrap();
        assert!((r.output.data()[0] - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[1, 4, 4], 0.0, 1.0, &mut rng);
        let g = apply_cs(&x, 1.3, 0.2)
            .unwrap()
            .backward(&Tensor::full(&[1, 4, 4], 1.0));
        assert!((g[1].data()[0] - x.sum()).abs() < 1e-12);
        assert_eq!(g[1].data()[1], 16.0);
        let err = finite_diff_check(
            |inp| apply_cs(&inp[0], inp[1].data()[0], inp[1].data()[1]),
            &[x, Tensor::from_vec(vec![1.3, 0.2])],
            1e-4,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    fn check_stage(kind: IspKind, params: Vec<f64>, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[2, 6, 7], 0.05, 0.95, &mut rng);
        let p = Tensor::from_vec(params);
        finite_diff_check(
            |inp| apply_stage(kind, &inp[0], inp[1].data()),
            &[x, p],
            1e-4,
            6,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn stage_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..10 {
            let cases = [
                (
                    IspKind::Dn,
                    vec![
                        rng.random_range(0.1..0.9),
                        rng.random_range(0.3..2.5),
                        rng.random_range(0.05..0.8),
                    ],
                ),
                (
                    IspKind::Sn,
                    vec![rng.random_range(0.1..0.9), rng.random_range(0.3..2.5)],
                ),
                (
                    IspKind::Gm,
                    vec![
                        rng.random_range(0.6..4.5),
                        rng.random_range(0.2..1.8),
                        rng.random_range(0.05..0.95),
                    ],
                ),
            ];
            for (kind, params) in cases {
                let err = check_stage(kind, params.clone(), seed);
                assert!(err < 1e-4, "{kind:?} {params:?}: {err}");
            }
        }
    }
}
