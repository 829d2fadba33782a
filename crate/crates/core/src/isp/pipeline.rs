use super::{apply_stage, ParamSet, PipelineSpec};
use crate::error::{Error, Result};
use crate::ndiff::{GradRecord, Tensor};

/// Applies the stages left to right.
///
/// The backward returns `[∂/∂X, ∂/∂P_1, …, ∂/∂P_L]`.
pub fn apply_pipeline(x: &Tensor, spec: &PipelineSpec, params: &[ParamSet]) -> Result<GradRecord> {
    if params.len() != spec.len() {
        return Err(Error::Config(format!(
            "pipeline has {} stages but {} parameter sets were given",
            spec.len(),
            params.len()
        )));
    }
    let mut records = Vec::with_capacity(spec.len());
    let mut cur = x.clone();
    for (l, (stage, set)) in spec.stages.iter().zip(params).enumerate() {
        if set.stage != l {
            return Err(Error::Config(format!(
                "parameter set for stage {} supplied at position {l}",
                set.stage
            )));
        }
        set.check(stage)?;
        let rec = apply_stage(stage.kind, &cur, &set.values)?;
        cur = rec.output.clone();
        records.push(rec);
    }
    Ok(GradRecord::new(cur, move |g| {
        let mut grads = vec![Tensor::zeros(&[0]); records.len() + 1];
        let mut up = g.clone();
        for (l, rec) in records.iter().enumerate().rev() {
            let mut gs = rec.backward(&up).into_iter();
            up = gs.next().expect("input grad");
            grads[l + 1] = gs.next().expect("param grad");
        }
        grads[0] = up;
        grads
    }))
}

/// Same as [`apply_pipeline`] with all parameters concatenated in stage
/// order. The backward returns `[∂/∂X, ∂/∂params]`.
pub fn apply_pipeline_flat(x: &Tensor, spec: &PipelineSpec, flat: &[f64]) -> Result<GradRecord> {
    let sets = spec.split(flat)?;
    let inner = apply_pipeline(x, spec, &sets)?;
    let out = inner.output.clone();
    Ok(GradRecord::new(out, move |g| {
        let mut gs = inner.backward(g).into_iter();
        let dx = gs.next().expect("input grad");
        let dp: Vec<f64> = gs.flat_map(|t| t.into_data()).collect();
        vec![dx, Tensor::from_vec(dp)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isp::{IspKind, ParamSpec, StageSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_cs() -> PipelineSpec {
        PipelineSpec {
            stages: vec![StageSpec {
                kind: IspKind::Cs,
                params: vec![
                    ParamSpec {
                        name: "q_b".into(),
                        min: 0.5,
                        max: 1.5,
                    },
                    ParamSpec {
                        name: "q_c".into(),
                        min: -0.5,
                        max: 0.5,
                    },
                ],
                phat: vec![0.0, 0.0],
            }],
        }
    }

    #[test]
    fn single_stage_identity() {
        let spec = identity_cs();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[1, 4, 4], 0.0, 1.0, &mut rng);
        let vals = spec.default_values();
        assert_eq!(vals, vec![1.0, 0.0]);
        let out = apply_pipeline_flat(&x, &spec, &vals).unwrap().output;
        assert_eq!(out, x);
    }

    #[test]
    fn gm_then_cs_composes_scalar_oracles() {
        let spec = PipelineSpec::from_kinds(&[IspKind::Gm, IspKind::Cs]);
        let (g1, g2, k, qb, qc) = (2.2f64, 0.5f64, 0.5f64, 1.2f64, -0.05f64);
        let x = Tensor::new(vec![1, 3, 3], vec![0.25; 9]).unwrap();
        let out = apply_pipeline_flat(&x, &spec, &[g1, g2, k, qb, qc])
            .unwrap()
            .output;
        let r = 1.0 / g1;
        let e = r * (1.0 - (1.0 - g2) * 0.25f64.powf(r)) / (1.0 - (1.0 - g2) * k.powf(r));
        let want = qb * 0.25f64.powf(e) + qc;
        assert!((out.data()[4] - want).abs() < 1e-14);
    }

    #[test]
    fn length_mismatch_is_config_error() {
        let spec = PipelineSpec::from_kinds(&[IspKind::Gm, IspKind::Cs]);
        let x = Tensor::zeros(&[1, 4, 4]);
        let sets = vec![ParamSet {
            stage: 0,
            values: vec![2.0, 1.0, 0.5],
        }];
        assert!(matches!(
            apply_pipeline(&x, &spec, &sets),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn out_of_bounds_is_domain_error() {
        let spec = PipelineSpec::from_kinds(&[IspKind::Cs]);
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(
            apply_pipeline_flat(&x, &spec, &[5.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn four_stage_gradient_flow() {
        let spec = PipelineSpec::from_kinds(&[IspKind::Dn, IspKind::Sn, IspKind::Gm, IspKind::Cs]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);
        let rec = apply_pipeline_flat(&x, &spec, &spec.default_values()).unwrap();
        let g = rec.backward(&Tensor::full(rec.output.shape(), 1.0));
        assert!(g[1].all_finite());
        assert!(g[1].max_abs() > 0.0);
    }

    #[test]
    fn grouping_does_not_change_output() {
        let spec = PipelineSpec::from_kinds(&[IspKind::Dn, IspKind::Sn, IspKind::Gm, IspKind::Cs]);
        let head = PipelineSpec {
            stages: spec.stages[..2].to_vec(),
        };
        let tail = PipelineSpec {
            stages: spec.stages[2..].to_vec(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);
        let p = spec.default_values();
        let all = apply_pipeline_flat(&x, &spec, &p).unwrap().output;
        let mid = apply_pipeline_flat(&x, &head, &p[..5]).unwrap().output;
        let two = apply_pipeline_flat(&mid, &tail, &p[5..]).unwrap().output;
        for (a, b) in all.data().iter().zip(two.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
