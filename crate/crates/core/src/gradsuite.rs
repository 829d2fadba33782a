//! Finite-difference audit of every differentiable block.
//!
//! Each op is checked on freshly sampled inputs and weights along a random
//! joint direction. Non-smooth ops (AG breakpoints, ReLU, clamps) can put a
//! kink inside the probe interval; such instances are detected from the
//! scaling of one-sided slope gaps and resampled, never scored.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::controller::{
    control_pipeline, decode_params, encode_sfb, init_controller, names, update_latent,
    ControllerConfig, DecodeMode,
};
use crate::error::{Error, Result};
use crate::io::Config;
use crate::isp::{apply_pipeline_flat, apply_stage, IspKind, PipelineSpec, StageSpec};
use crate::ndiff::gradcheck::{rel_err, store_op};
use crate::ndiff::{
    conv2d, fc, global_avg_pool, relu, sigmoid, softmax_cross_entropy, GradRecord, Padding, Params,
    Tensor,
};
use crate::synth::{backbone, head, init_surrogate, surrogate_forward, SurrogateConfig};
use crate::trainer::Model;

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 100;
/// Give up on an op after this many kink rejections in a row.
const MAX_RESAMPLES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_err: f64,
    /// Instances rejected because a kink fell inside the probe interval.
    pub resampled: usize,
    pub seconds: f64,
}

enum Probe {
    Smooth(f64),
    Kink,
}

type BoxedOp<'a> = Box<dyn Fn(&[Tensor]) -> Result<GradRecord> + 'a>;

/// One scored directional check.
fn probe<R: Rng + ?Sized>(
    op: &BoxedOp<'_>,
    inputs: &[Tensor],
    eps: f64,
    rng: &mut R,
) -> Result<Probe> {
    let base = op(inputs)?;
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
    let analytic: f64 = base
        .backward(&u)
        .iter()
        .zip(&dirs)
        .map(|(g, d)| g.dot(d))
        .sum();
    let g = |t: f64| -> Result<f64> {
        let moved: Vec<Tensor> = inputs
            .iter()
            .zip(&dirs)
            .map(|(x, d)| {
                let mut y = x.clone();
                y.add_scaled(d, t);
                y
            })
            .collect();
        Ok(op(&moved)?.output.dot(&u))
    };
    let f0 = base.output.dot(&u);
    let central = (g(eps)? - g(-eps)?) / (2.0 * eps);
    let err = rel_err(analytic, central);
    // Second differences at h, h/2, h/4 scale by exactly 1/2 per level for a
    // smooth function; a kink at distance δ breaks that pattern.
    let gap = |h: f64| -> Result<f64> { Ok((g(h)? - 2.0 * f0 + g(-h)?) / h) };
    let gaps = [gap(eps)?, gap(eps / 2.0)?, gap(eps / 4.0)?];
    // Roundoff floor of a gap at the smallest step.
    let noise = 1e-13 * (f0.abs() + 1.0) / eps;
    let broken = |a: f64, b: f64| a.abs() > 10.0 * noise && (b / a - 0.5).abs() > 0.1;
    if broken(gaps[0], gaps[1]) || broken(gaps[1], gaps[2]) {
        return Ok(Probe::Kink);
    }
    Ok(Probe::Smooth(err))
}

fn check_op<R: Rng>(
    name: &str,
    instances: usize,
    eps: f64,
    rng: &mut R,
    mut sample: impl FnMut(&mut R) -> Result<(BoxedOp<'static>, Vec<Tensor>)>,
) -> Result<OpReport> {
    let t0 = Instant::now();
    let (mut done, mut resampled, mut streak, mut worst) = (0, 0, 0, 0.0f64);
    while done < instances {
        let (op, inputs) = sample(rng)?;
        match probe(&op, &inputs, eps, rng)? {
            Probe::Smooth(e) => {
                worst = worst.max(e);
                done += 1;
                streak = 0;
            }
            Probe::Kink => {
                resampled += 1;
                streak += 1;
                if streak > MAX_RESAMPLES {
                    return Err(Error::Numeric(format!(
                        "gradcheck {name}: {streak} consecutive instances hit a kink"
                    )));
                }
            }
        }
    }
    Ok(OpReport {
        op: name.to_string(),
        instances,
        max_rel_err: worst,
        resampled,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Values strictly inside each parameter interval (5% margins).
fn interior<R: Rng>(stage: &StageSpec, rng: &mut R) -> Vec<f64> {
    stage
        .params
        .iter()
        .map(|s| s.min + s.range() * rng.random_range(0.05..0.95))
        .collect()
}

fn image<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Pushes values away from the AG breakpoints so that a probe step cannot
/// cross them.
fn avoid_ag_breaks(x: &mut Tensor, p: &[f64]) {
    let lo = p[2] * (1.0 - p[0]);
    let hi = lo + p[0];
    for v in x.data_mut() {
        for b in [lo, hi] {
            if (*v - b).abs() < 1e-3 {
                *v = b + if *v < b { -1e-3 } else { 1e-3 };
            }
        }
    }
}

fn isp_sample<R: Rng>(
    kind: IspKind,
) -> impl FnMut(&mut R) -> Result<(BoxedOp<'static>, Vec<Tensor>)> {
    move |rng: &mut R| {
        let stage = StageSpec::new(kind);
        let p = interior(&stage, rng);
        let mut x = image(&[1, 6, 6], 0.01, 0.99, rng);
        if kind == IspKind::Ag {
            avoid_ag_breaks(&mut x, &p);
        }
        let op: BoxedOp<'static> =
            Box::new(move |t: &[Tensor]| apply_stage(kind, &t[0], t[1].data()));
        Ok((op, vec![x, Tensor::from_vec(p)]))
    }
}

const KINDS: [IspKind; 5] = [
    IspKind::Ag,
    IspKind::Dn,
    IspKind::Sn,
    IspKind::Gm,
    IspKind::Cs,
];

fn random_pipeline<R: Rng>(rng: &mut R, max_len: usize) -> PipelineSpec {
    let n = rng.random_range(1..=max_len);
    PipelineSpec::from_kinds(
        &(0..n)
            .map(|_| KINDS[rng.random_range(0..5)])
            .collect::<Vec<_>>(),
    )
}

fn small_controller(latent_update: bool) -> ControllerConfig {
    ControllerConfig {
        latent_width: 12,
        sfb_conv_channels: 4,
        sfb_hidden: 10,
        update_hidden: 6,
        latent_update,
        ..ControllerConfig::default()
    }
}

/// Controller weights with the zero-initialized decode layers replaced by
/// random ones, so their gradients are exercised.
fn random_controller<R: Rng>(
    cfg: &ControllerConfig,
    spec: &PipelineSpec,
    channels: usize,
    rng: &mut R,
) -> Params {
    let mut p = init_controller(cfg, spec, channels, rng);
    for (l, stage) in spec.stages.iter().enumerate() {
        let n = stage.kind.param_count();
        p.insert(
            names::dec_w(l),
            Tensor::randn(&[n, cfg.latent_width], 0.3, rng),
        );
        p.insert(names::dec_b(l), Tensor::randn(&[n], 0.3, rng));
        p.insert(names::phat(l), Tensor::randn(&[n], 0.5, rng));
        p.insert(
            names::upd2_b(l),
            Tensor::randn(&[cfg.latent_width], 0.5, rng),
        );
    }
    p
}

/// Wraps a store block so that the explicit inputs and every weight in
/// `weights` are perturbed together.
fn store_block(
    weights: Params,
    n_inputs: usize,
    block: impl Fn(&Params, &[Tensor]) -> Result<crate::ndiff::StorePass> + 'static,
) -> (BoxedOp<'static>, Vec<Tensor>) {
    let names: Vec<String> = weights.names().cloned().collect();
    let tensors: Vec<Tensor> = weights.iter().map(|(_, t)| t.clone()).collect();
    let op = move |all: &[Tensor]| store_op(&weights, &names, n_inputs, &block)(all);
    (Box::new(op), tensors)
}

fn with_inputs(
    pair: (BoxedOp<'static>, Vec<Tensor>),
    explicit: Vec<Tensor>,
) -> (BoxedOp<'static>, Vec<Tensor>) {
    let (op, weights) = pair;
    let mut all = explicit;
    all.extend(weights);
    (op, all)
}

fn model_sample<R: Rng>(
    dynamic: bool,
) -> impl FnMut(&mut R) -> Result<(BoxedOp<'static>, Vec<Tensor>)> {
    move |rng: &mut R| {
        let mut cfg = Config::default();
        cfg.pipeline = random_pipeline(rng, 3);
        cfg.synth.size = 8;
        cfg.surrogate = SurrogateConfig {
            input_size: 8,
            stage1_channels: 3,
            head_channels: 4,
        };
        cfg.controller = small_controller(rng.random_bool(0.5));
        cfg.controller.enabled = dynamic;
        cfg.trainer.seed = rng.random();
        let mut model = Model::new(cfg)?;
        // Zero biases leave pre-activations exactly on the ReLU kink.
        for (name, t) in model.params.iter_mut() {
            if name.starts_with("sur.") && t.shape().len() == 1 {
                *t = Tensor::randn(t.shape(), 0.2, rng);
            }
        }
        if dynamic {
            let spec = model.config.pipeline.clone();
            for (k, v) in random_controller(&model.config.controller, &spec, 3, rng).iter() {
                model.params.insert(k.clone(), v.clone());
            }
        } else {
            for l in 0..model.config.pipeline.len() {
                let n = model.config.pipeline.stages[l].kind.param_count();
                model
                    .params
                    .insert(names::phat(l), Tensor::randn(&[n], 0.5, rng));
            }
        }
        let x = image(&[1, 8, 8], 0.02, 0.98, rng);
        let label = rng.random_range(0..3);
        let p1: Vec<f64> = model
            .config
            .pipeline
            .stages
            .iter()
            .flat_map(|s| interior(s, rng))
            .collect();
        let names: Vec<String> = model.params.names().cloned().collect();
        let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
        let op: BoxedOp<'static> = Box::new(move |t: &[Tensor]| {
            let mut m = model.clone();
            for (n, v) in names.iter().zip(t) {
                m.params.insert(n.clone(), v.clone());
            }
            let (loss, grads) = m.sample_gradients(&x, label, &p1)?;
            let order: Vec<Tensor> = names
                .iter()
                .zip(t)
                .map(|(n, v)| grads.get(n).cloned().unwrap_or_else(|_| v.zeros_like()))
                .collect();
            Ok(GradRecord::new(Tensor::scalar(loss), move |u| {
                order.iter().map(|g| g.scale(u.data()[0])).collect()
            }))
        });
        Ok((op, inputs))
    }
}

/// Names of every checked op, in run order.
pub const OPS: [&str; 22] = [
    "isp.ag",
    "isp.dn",
    "isp.sn",
    "isp.gm",
    "isp.cs",
    "isp.pipeline",
    "nn.fc",
    "nn.conv2d",
    "nn.relu",
    "nn.sigmoid",
    "nn.global_avg_pool",
    "nn.softmax_cross_entropy",
    "ctrl.encode_sfb",
    "ctrl.decode_params",
    "ctrl.update_latent",
    "ctrl.control_pipeline_lu",
    "ctrl.control_pipeline_no_lu",
    "sur.backbone",
    "sur.head",
    "sur.forward",
    "train.static_step",
    "train.dynamic_step",
];

/// Runs the check for one named op.
pub fn check_named(name: &str, instances: usize, eps: f64, seed: u64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(OPS.iter().position(|o| *o == name).unwrap_or(OPS.len()) as u64);
    let r = &mut rng;
    match name {
        "isp.ag" => check_op(name, instances, eps, r, isp_sample(IspKind::Ag)),
        "isp.dn" => check_op(name, instances, eps, r, isp_sample(IspKind::Dn)),
        "isp.sn" => check_op(name, instances, eps, r, isp_sample(IspKind::Sn)),
        "isp.gm" => check_op(name, instances, eps, r, isp_sample(IspKind::Gm)),
        "isp.cs" => check_op(name, instances, eps, r, isp_sample(IspKind::Cs)),
        "isp.pipeline" => check_op(name, instances, eps, r, |rng| {
            let spec = random_pipeline(rng, 4);
            let p: Vec<f64> = spec.stages.iter().flat_map(|s| interior(s, rng)).collect();
            let x = image(&[1, 6, 6], 0.05, 0.95, rng);
            let op: BoxedOp<'static> =
                Box::new(move |t: &[Tensor]| apply_pipeline_flat(&t[0], &spec, t[1].data()));
            Ok((op, vec![x, Tensor::from_vec(p)]))
        }),
        "nn.fc" => check_op(name, instances, eps, r, |rng| {
            let (i, o) = (rng.random_range(1..12), rng.random_range(1..12));
            let op: BoxedOp<'static> = Box::new(|t: &[Tensor]| fc(&t[0], &t[1], &t[2]));
            Ok((
                op,
                vec![
                    Tensor::randn(&[i], 1.0, rng),
                    Tensor::randn(&[o, i], 1.0, rng),
                    Tensor::randn(&[o], 1.0, rng),
                ],
            ))
        }),
        "nn.conv2d" => check_op(name, instances, eps, r, |rng| {
            let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
            let (h, w) = (rng.random_range(3..8), rng.random_range(3..8));
            let stride = rng.random_range(1..=2);
            let pad = if rng.random_bool(0.5) {
                Padding::Zero
            } else {
                Padding::Reflect
            };
            let op: BoxedOp<'static> =
                Box::new(move |t: &[Tensor]| conv2d(&t[0], &t[1], Some(&t[2]), stride, pad));
            Ok((
                op,
                vec![
                    Tensor::randn(&[ci, h, w], 1.0, rng),
                    Tensor::randn(&[co, ci, 3, 3], 0.5, rng),
                    Tensor::randn(&[co], 0.5, rng),
                ],
            ))
        }),
        "nn.relu" => check_op(name, instances, eps, r, |rng| {
            let x = Tensor::randn(&[16], 1.0, rng).map(|v| {
                if v.abs() < 1e-3 {
                    v.signum() * 1e-3 + v
                } else {
                    v
                }
            });
            let op: BoxedOp<'static> = Box::new(|t: &[Tensor]| Ok(relu(&t[0])));
            Ok((op, vec![x]))
        }),
        "nn.sigmoid" => check_op(name, instances, eps, r, |rng| {
            let op: BoxedOp<'static> = Box::new(|t: &[Tensor]| Ok(sigmoid(&t[0])));
            Ok((op, vec![Tensor::randn(&[16], 3.0, rng)]))
        }),
        "nn.global_avg_pool" => check_op(name, instances, eps, r, |rng| {
            let shape = [
                rng.random_range(1..5),
                rng.random_range(1..6),
                rng.random_range(1..6),
            ];
            let op: BoxedOp<'static> = Box::new(|t: &[Tensor]| global_avg_pool(&t[0]));
            Ok((op, vec![Tensor::randn(&shape, 1.0, rng)]))
        }),
        "nn.softmax_cross_entropy" => check_op(name, instances, eps, r, |rng| {
            let k = rng.random_range(2..8);
            let label = rng.random_range(0..k);
            let op: BoxedOp<'static> =
                Box::new(move |t: &[Tensor]| softmax_cross_entropy(&t[0], label));
            Ok((op, vec![Tensor::randn(&[k], 2.0, rng)]))
        }),
        "ctrl.encode_sfb" => check_op(name, instances, eps, r, |rng| {
            let cfg = small_controller(true);
            let spec = PipelineSpec::from_kinds(&[IspKind::Gm]);
            let w = random_controller(&cfg, &spec, 3, rng).with_prefix("ctrl.sfb.");
            let feat = Tensor::randn(&[3, 6, 6], 1.0, rng);
            Ok(with_inputs(
                store_block(w, 1, |p, t| encode_sfb(p, &t[0])),
                vec![feat],
            ))
        }),
        "ctrl.decode_params" => check_op(name, instances, eps, r, |rng| {
            let cfg = small_controller(true);
            let spec = random_pipeline(rng, 1);
            let stage = spec.stages[0].clone();
            let mode = [
                DecodeMode::Plain,
                DecodeMode::ResidualStatic,
                DecodeMode::ResidualLearnable,
            ][rng.random_range(0..3)];
            let all = random_controller(&cfg, &spec, 3, rng);
            let mut w = all.with_prefix("ctrl.head0.dec");
            if mode.is_residual() {
                w.insert(names::phat(0), all.get(&names::phat(0))?.clone());
            }
            let v = Tensor::randn(&[cfg.latent_width], 1.0, rng);
            Ok(with_inputs(
                store_block(w, 1, move |p, t| decode_params(p, 0, &stage, &t[0], mode)),
                vec![v],
            ))
        }),
        "ctrl.update_latent" => check_op(name, instances, eps, r, |rng| {
            let cfg = small_controller(true);
            let spec = random_pipeline(rng, 1);
            let stage = spec.stages[0].clone();
            let w = random_controller(&cfg, &spec, 3, rng).with_prefix("ctrl.head0.upd");
            let p = Tensor::from_vec(interior(&stage, rng));
            let v = Tensor::randn(&[cfg.latent_width], 1.0, rng);
            Ok(with_inputs(
                store_block(w, 2, move |pr, t| {
                    update_latent(pr, 0, &stage, &t[0], &t[1])
                }),
                vec![p, v],
            ))
        }),
        "ctrl.control_pipeline_lu" | "ctrl.control_pipeline_no_lu" => {
            let lu = name.ends_with("_lu") && !name.ends_with("no_lu");
            check_op(name, instances, eps, r, move |rng| {
                let cfg = small_controller(lu);
                let spec = random_pipeline(rng, 3);
                let w = random_controller(&cfg, &spec, 3, rng);
                let feat = Tensor::randn(&[3, 6, 6], 1.0, rng);
                Ok(with_inputs(
                    store_block(w, 1, move |p, t| control_pipeline(p, &t[0], &cfg, &spec)),
                    vec![feat],
                ))
            })
        }
        "sur.backbone" | "sur.head" | "sur.forward" => {
            let which = name.to_string();
            check_op(name, instances, eps, r, move |rng| {
                let cfg = SurrogateConfig {
                    input_size: 8,
                    stage1_channels: 3,
                    head_channels: 4,
                };
                let mut w = init_surrogate(&cfg, rng);
                for (_, t) in w.iter_mut() {
                    if t.shape().len() == 1 {
                        *t = Tensor::randn(t.shape(), 0.2, rng);
                    }
                }
                let x = image(&[1, 8, 8], 0.0, 1.0, rng);
                Ok(match which.as_str() {
                    "sur.backbone" => {
                        with_inputs(store_block(w, 1, |p, t| backbone(p, &t[0])), vec![x])
                    }
                    "sur.head" => {
                        let feat = Tensor::randn(&cfg.feature_shape(), 1.0, rng).map(f64::abs);
                        with_inputs(store_block(w, 1, |p, t| head(p, &t[0])), vec![feat])
                    }
                    _ => with_inputs(
                        store_block(w, 1, move |p, t| {
                            let pass = surrogate_forward(p, &cfg, &t[0])?;
                            let out = pass.logits.clone();
                            Ok(crate::ndiff::StorePass::new(out, move |g, grads| {
                                vec![pass.backward(g, None, grads)]
                            }))
                        }),
                        vec![x],
                    ),
                })
            })
        }
        "train.static_step" => check_op(name, instances, eps, r, model_sample(false)),
        "train.dynamic_step" => check_op(name, instances, eps, r, model_sample(true)),
        other => Err(Error::Config(format!("unknown gradcheck op `{other}`"))),
    }
}

/// Checks every op in [`OPS`].
pub fn run_all(instances: usize, eps: f64, seed: u64) -> Result<Vec<OpReport>> {
    OPS.iter()
        .map(|op| check_named(op, instances, eps, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_runs_and_passes_at_small_scale() {
        for op in OPS {
            let r = check_named(op, 5, DEFAULT_EPS, 7).unwrap();
            assert!(r.max_rel_err < 1e-4, "{op}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn kink_is_detected_not_scored() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // |x| probed right at its kink.
        let op: BoxedOp<'static> = Box::new(|t: &[Tensor]| {
            let x = t[0].clone();
            let out = x.map(f64::abs);
            Ok(GradRecord::new(out, move |g| vec![g.clone()]))
        });
        let mut kinks = 0;
        for _ in 0..20 {
            if let Probe::Kink = probe(&op, &[Tensor::from_vec(vec![0.0])], 1e-4, &mut rng).unwrap()
            {
                kinks += 1;
            }
        }
        assert_eq!(kinks, 20);
    }

    #[test]
    fn smooth_bug_is_not_excused() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let op: BoxedOp<'static> = Box::new(|t: &[Tensor]| {
            let inner = sigmoid(&t[0]);
            let out = inner.output.clone();
            Ok(GradRecord::new(out, move |g| {
                inner
                    .backward(g)
                    .into_iter()
                    .map(|t| t.scale(1.001))
                    .collect()
            }))
        });
        for _ in 0..20 {
            let x = Tensor::randn(&[4], 1.0, &mut rng);
            match probe(&op, &[x], 1e-4, &mut rng).unwrap() {
                Probe::Smooth(e) => assert!(e > 5e-4, "{e}"),
                Probe::Kink => panic!("smooth function flagged as kink"),
            }
        }
    }
}
