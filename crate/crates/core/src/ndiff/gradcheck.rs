//! Central finite-difference oracle for [`GradRecord`] backward passes.

use rand::Rng;

use super::ops::GradRecord;
use super::params::{Params, StorePass};
use super::tensor::Tensor;
use crate::error::Result;

/// Relative discrepancy with a small absolute floor so that two values that
/// are both numerically zero compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-10)
}

/// Compares `backward` against central differences along random directions.
///
/// For each of `directions` samples, draws an upstream vector `u` and an
/// input-space direction `v` of unit norm (jointly across all inputs), then
/// compares `Σ_i <backward(u)_i, v_i>` with
/// `(<u, f(x + εv)> − <u, f(x − εv)>) / 2ε`. Returns the maximum relative
/// error. Inputs are never mutated.
pub fn finite_diff_check<F, R>(
    op: F,
    inputs: &[Tensor],
    eps: f64,
    directions: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<GradRecord>,
    R: Rng + ?Sized,
{
    let base = op(inputs)?;
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let u = Tensor::randn(base.output.shape(), 1.0, rng);
        let mut dirs: Vec<Tensor> = inputs
            .iter()
            .map(|t| Tensor::randn(t.shape(), 1.0, rng))
            .collect();
        let norm = dirs
            .iter()
            .map(|d| d.dot(d))
            .sum::<f64>()
            .sqrt()
            .max(1e-300);
        for d in &mut dirs {
            *d = d.scale(1.0 / norm);
        }

        let grads = base.backward(&u);
        let analytic: f64 = grads.iter().zip(&dirs).map(|(g, d)| g.dot(d)).sum();

        let shifted = |sign: f64| -> Result<f64> {
            let moved: Vec<Tensor> = inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| {
                    let mut y = x.clone();
                    y.add_scaled(d, sign * eps);
                    y
                })
                .collect();
            Ok(op(&moved)?.output.dot(&u))
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(worst)
}

/// Presents a store-backed block as a plain op so it can be checked.
///
/// The resulting op takes `n_inputs` explicit inputs followed by one tensor
/// per entry of `names`, which replace the corresponding entries of `base`.
/// Its backward returns the explicit-input gradients followed by the
/// accumulated gradients of the named weights (zero when untouched).
pub fn store_op<'a, F>(
    base: &'a Params,
    names: &'a [String],
    n_inputs: usize,
    block: F,
) -> impl Fn(&[Tensor]) -> Result<GradRecord> + 'a
where
    F: Fn(&Params, &[Tensor]) -> Result<StorePass> + 'a,
{
    move |all: &[Tensor]| {
        let mut params = base.clone();
        for (name, t) in names.iter().zip(&all[n_inputs..]) {
            params.insert(name.clone(), t.clone());
        }
        let pass = block(&params, &all[..n_inputs])?;
        let output = pass.output.clone();
        let names = names.to_vec();
        let shapes: Vec<Vec<usize>> = all[n_inputs..].iter().map(|t| t.shape().to_vec()).collect();
        Ok(GradRecord::new(output, move |u| {
            let mut grads = Params::new();
            let mut out = pass.backward(u, &mut grads);
            for (name, shape) in names.iter().zip(&shapes) {
                out.push(
                    grads
                        .get(name)
                        .cloned()
                        .unwrap_or_else(|_| Tensor::zeros(shape)),
                );
            }
            out
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::ops::{fc, sigmoid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_op_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            Tensor::randn(&[8], 1.0, &mut rng),
            Tensor::randn(&[4, 8], 1.0, &mut rng),
            Tensor::randn(&[4], 1.0, &mut rng),
        ];
        // fc is bilinear; perturbing only the input keeps it linear.
        let w = inputs[1].clone();
        let b = inputs[2].clone();
        let err =
            finite_diff_check(|x| fc(&x[0], &w, &b), &inputs[..1], 1e-4, 20, &mut rng).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = vec![Tensor::randn(&[16], 1.0, &mut rng)];
        let corrupted = |inp: &[Tensor]| {
            let inner = sigmoid(&inp[0]);
            let out = inner.output.clone();
            Ok(GradRecord::new(out, move |g| {
                inner
                    .backward(g)
                    .into_iter()
                    .map(|t| t.scale(1.1))
                    .collect()
            }))
        };
        let err = finite_diff_check(corrupted, &x, 1e-4, 10, &mut rng).unwrap();
        assert!(err > 1e-2, "{err}");
    }
}
