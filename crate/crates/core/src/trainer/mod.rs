//! Two-frame end-to-end training, static baselines and evaluation.

pub mod ablation;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{act_range_grad, control_pipeline, init_controller, names, DecodeMode};
use crate::error::{Error, Result};
use crate::init_buffer::{InitBuffer, InitStrategy};
use crate::io::Config;
use crate::isp::apply_pipeline_flat;
use crate::ndiff::{
    softmax_cross_entropy, Adam, GradRecord, LrSchedule, Params, StorePass, Tensor,
};
use crate::synth::{
    argmax, backbone, generate_split, init_surrogate, surrogate_forward, Dataset, Split,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    /// Learning-rate multiplier of every `ctrl.` tensor.
    pub ctrl_lr_mult: f64,
    /// Learning-rate multiplier of the ISP defaults `isp.phat*`.
    pub isp_lr_mult: f64,
    pub seed: u64,
    pub init_strategy: InitStrategy,
    pub buffer_capacity: usize,
    pub ema_decay: f64,
    /// Name prefixes excluded from every update.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_phase1: 4,
            epochs_phase2: 4,
            train_images: 5000,
            test_images: 2000,
            batch_size: 16,
            lr_max: 1e-3,
            lr_min: 1e-6,
            warmup_steps: 1000,
            ctrl_lr_mult: 0.1,
            isp_lr_mult: 1.0,
            seed: 0,
            init_strategy: InitStrategy::Buffer,
            buffer_capacity: crate::init_buffer::DEFAULT_CAPACITY,
            ema_decay: crate::init_buffer::DEFAULT_EMA_DECAY,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// The schedule reported for the full-scale experiments.
    pub fn paper_scale() -> Self {
        TrainConfig {
            epochs_phase1: 24,
            epochs_phase2: 24,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_phase1 == 0 {
            return Err(Error::Config("epochs_phase1 must be positive".into()));
        }
        if self.batch_size == 0 || self.train_images == 0 {
            return Err(Error::Config(
                "batch_size and train_images must be positive".into(),
            ));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.ctrl_lr_mult > 0.0 && self.ctrl_lr_mult.is_finite()) {
            return Err(Error::Config("ctrl_lr_mult must be positive".into()));
        }
        if !(self.isp_lr_mult > 0.0 && self.isp_lr_mult.is_finite()) {
            return Err(Error::Config("isp_lr_mult must be positive".into()));
        }
        Ok(())
    }
}

/// How images reach the recognizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frontend {
    /// ISP parameters predicted per image by the controller.
    Dynamic,
    /// ISP at the learned static point `act_range(p̂)`.
    Static,
    /// Images go straight to the recognizer (already processed).
    Bypass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// The same frame decides the parameters and is then recognized.
    Twice,
    /// Parameters predicted from frame `t` are applied to frame `t+1`.
    Sequential,
}

/// Weights, buffer and configuration: everything inference needs.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub params: Params,
    pub buffer: InitBuffer,
    pub frontend: Frontend,
}

fn check_finite(t: &Tensor, stage: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values after {stage}")))
    }
}

fn identity_record(x: &Tensor) -> GradRecord {
    GradRecord::new(x.clone(), |g| vec![g.clone(), Tensor::zeros(&[0])])
}

struct SampleOut {
    loss: f64,
    correct: bool,
    applied: Vec<f64>,
}

impl Model {
    pub fn new(config: Config) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
        let mut params = init_surrogate(&config.surrogate, &mut rng);
        let frontend = if config.controller.enabled {
            let ctrl = init_controller(
                &config.controller,
                &config.pipeline,
                config.surrogate.stage1_channels,
                &mut rng,
            );
            for (k, v) in ctrl.iter() {
                params.insert(k.clone(), v.clone());
            }
            Frontend::Dynamic
        } else {
            for (l, s) in config.pipeline.stages.iter().enumerate() {
                params.insert(names::phat(l), Tensor::from_vec(s.phat.clone()));
            }
            Frontend::Static
        };
        let buffer = InitBuffer::new(
            config.pipeline.flat_specs(),
            config.trainer.buffer_capacity,
            config.trainer.ema_decay,
        )?;
        Ok(Model {
            config,
            params,
            buffer,
            frontend,
        })
    }

    /// Recognizer only; images must already be processed.
    pub fn bypass(config: Config) -> Result<Model> {
        let mut m = Model::new(Config {
            controller: crate::controller::ControllerConfig {
                enabled: false,
                ..config.controller.clone()
            },
            ..config
        })?;
        m.frontend = Frontend::Bypass;
        Ok(m)
    }

    /// Current `p̂` of every stage, concatenated.
    pub fn phat(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for l in 0..self.config.pipeline.len() {
            out.extend_from_slice(self.params.get(&names::phat(l))?.data());
        }
        Ok(out)
    }

    /// `act_range(p̂)`: the static operating point.
    pub fn static_point(&self) -> Result<Vec<f64>> {
        let specs = self.config.pipeline.flat_specs();
        Ok(self
            .phat()?
            .iter()
            .zip(&specs)
            .map(|(&x, s)| crate::controller::act_range(x, s))
            .collect())
    }

    fn isp(&self, x: &Tensor, p: &[f64]) -> Result<GradRecord> {
        match self.frontend {
            Frontend::Bypass => Ok(identity_record(x)),
            _ => apply_pipeline_flat(x, &self.config.pipeline, p),
        }
    }

    /// Controller prediction from a processed frame.
    fn predict_from(&self, y: &Tensor) -> Result<(StorePass, StorePass)> {
        let bb = backbone(&self.params, y)?;
        check_finite(&bb.output, "backbone tap")?;
        let ctrl = control_pipeline(
            &self.params,
            &bb.output,
            &self.config.controller,
            &self.config.pipeline,
        )?;
        check_finite(&ctrl.output, "controller")?;
        Ok((bb, ctrl))
    }

    /// Parameters the controller predicts after seeing `x` processed with `p`.
    pub fn predict_params(&self, x: &Tensor, p: &[f64]) -> Result<Vec<f64>> {
        let y = self.isp(x, p)?;
        Ok(self.predict_from(&y.output)?.1.output.into_data())
    }

    /// Logits for `x` processed with fixed parameters `p`.
    pub fn recognize(&self, x: &Tensor, p: &[f64]) -> Result<(Tensor, Tensor)> {
        let y = self.isp(x, p)?;
        let sp = surrogate_forward(&self.params, &self.config.surrogate, &y.output)?;
        Ok((sp.logits, sp.feature))
    }

    /// First-frame parameters used at inference time.
    pub fn inference_initial(&self) -> Result<Vec<f64>> {
        match self.frontend {
            Frontend::Bypass => Ok(Vec::new()),
            _ => Ok(self.buffer.inference_initial(&self.static_point()?)),
        }
    }

    /// Forward and backward for one labelled image, accumulating into
    /// `grads`. `p1` is the first-frame parameter vector.
    fn sample_step(
        &self,
        x: &Tensor,
        label: usize,
        p1: &[f64],
        grads: &mut Params,
    ) -> Result<SampleOut> {
        let (applied, rec, ctrl) = match self.frontend {
            Frontend::Dynamic => {
                let y1 = self.isp(x, p1)?;
                check_finite(&y1.output, "frame-1 ISP")?;
                let (bb, ctrl) = self.predict_from(&y1.output)?;
                let p2 = ctrl.output.data().to_vec();
                (p2, None, Some((bb, ctrl)))
            }
            Frontend::Static => (self.static_point()?, None, None),
            Frontend::Bypass => (Vec::new(), Some(identity_record(x)), None),
        };
        let y2 = match rec {
            Some(r) => r,
            None => self.isp(x, &applied)?,
        };
        check_finite(&y2.output, "frame-2 ISP")?;
        let sp = surrogate_forward(&self.params, &self.config.surrogate, &y2.output)?;
        check_finite(&sp.logits, "recognizer")?;
        let ce = softmax_cross_entropy(&sp.logits, label)?;
        let loss = ce.output.data()[0];
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let correct = argmax(sp.logits.data()) == label;

        let dlogits = ce.backward(&Tensor::scalar(1.0)).remove(0);
        let dy2 = sp.backward(&dlogits, None, grads);
        match self.frontend {
            Frontend::Dynamic => {
                let dp = y2.backward(&dy2).remove(1);
                let (bb, ctrl) = ctrl.expect("dynamic pass");
                let dfeat = ctrl.backward(&dp, grads).remove(0);
                bb.backward(&dfeat, grads);
            }
            Frontend::Static => {
                let dp = y2.backward(&dy2).remove(1);
                let phat = self.phat()?;
                let specs = self.config.pipeline.flat_specs();
                let offsets = self.config.pipeline.offsets();
                for (l, stage) in self.config.pipeline.stages.iter().enumerate() {
                    let o = offsets[l];
                    let n = stage.kind.param_count();
                    let d: Vec<f64> = (o..o + n)
                        .map(|i| dp.data()[i] * act_range_grad(phat[i], &specs[i]))
                        .collect();
                    grads.accumulate(&names::phat(l), &Tensor::from_vec(d));
                }
            }
            Frontend::Bypass => {}
        }
        Ok(SampleOut {
            loss,
            correct,
            applied,
        })
    }

    /// Loss and accumulated gradients of one image with a given first-frame
    /// parameter vector.
    pub fn sample_gradients(&self, x: &Tensor, label: usize, p1: &[f64]) -> Result<(f64, Params)> {
        let mut g = Params::new();
        let out = self.sample_step(x, label, p1, &mut g)?;
        Ok((out.loss, g))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: u8,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub param_mean: Vec<f64>,
    pub param_std: Vec<f64>,
}

/// Training state, resumable at epoch boundaries.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    /// 1 or 2 while training, 3 once finished.
    pub phase: u8,
    /// Next epoch to run within the current phase.
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

pub const PHASE_DONE: u8 = 3;

impl Trainer {
    pub fn new(model: Model) -> Trainer {
        let adam = Self::make_adam(&model.config, model.config.trainer.epochs_phase1);
        Trainer {
            model,
            adam,
            phase: 1,
            epoch: 0,
            metrics: Vec::new(),
        }
    }

    fn steps_per_epoch(cfg: &Config) -> u64 {
        cfg.trainer.train_images.div_ceil(cfg.trainer.batch_size) as u64
    }

    pub fn make_adam(cfg: &Config, epochs: usize) -> Adam {
        let t = &cfg.trainer;
        Adam::new(LrSchedule {
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            warmup_steps: t.warmup_steps,
            total_steps: Self::steps_per_epoch(cfg) * epochs as u64,
        })
        .with_group("ctrl.", t.ctrl_lr_mult)
        .with_group("isp.phat", t.isp_lr_mult)
    }

    pub fn is_done(&self) -> bool {
        self.phase >= PHASE_DONE
    }

    /// Whether `name` is updated in the current phase.
    pub fn trainable(&self, name: &str) -> bool {
        trainable_in(&self.model, self.phase, name)
    }

    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.model.config.trainer.seed);
        r.set_stream(((self.phase as u64) << 32) | self.epoch as u64);
        r
    }

    /// Runs one epoch of the current phase and advances the state.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if self.is_done() {
            return Err(Error::Config("training already finished".into()));
        }
        if data.len() != self.model.config.trainer.train_images {
            return Err(Error::Config(format!(
                "dataset has {} images but trainer.train_images is {}",
                data.len(),
                self.model.config.trainer.train_images
            )));
        }
        let mut rng = self.epoch_rng();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let strategy = self.model.config.trainer.init_strategy;
        let bs = self.model.config.trainer.batch_size;
        let n_params = self.model.config.pipeline.total_params();
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let mut sum = vec![0.0; n_params];
        let mut sq = vec![0.0; n_params];
        let mut logged = 0usize;
        let phase = self.phase;
        let allowed: Vec<String> = self
            .model
            .params
            .names()
            .filter(|n| self.trainable(n))
            .cloned()
            .collect();
        for batch in order.chunks(bs) {
            let mut grads = Params::new();
            for &i in batch {
                let p1 = match self.model.frontend {
                    Frontend::Dynamic => {
                        let sp = self.model.static_point()?;
                        self.model.buffer.sample_initial(strategy, &sp, &mut rng)
                    }
                    _ => Vec::new(),
                };
                let out =
                    self.model
                        .sample_step(&data.images[i], data.labels[i], &p1, &mut grads)?;
                loss_sum += out.loss;
                hits += usize::from(out.correct);
                if self.model.frontend == Frontend::Dynamic {
                    self.model.buffer.push_params(&out.applied)?;
                }
                if out.applied.len() == n_params {
                    for (k, v) in out.applied.iter().enumerate() {
                        sum[k] += v;
                        sq[k] += v * v;
                    }
                    logged += 1;
                }
            }
            grads.scale_all(1.0 / batch.len() as f64);
            self.adam
                .step(&mut self.model.params, &grads, |n| {
                    allowed.binary_search_by(|a| a.as_str().cmp(n)).is_ok()
                })
                .map_err(|e| Error::Numeric(format!("phase {phase} epoch {}: {e}", self.epoch)))?;
        }
        let n = data.len() as f64;
        let (param_mean, param_std) = if logged > 0 {
            let m: Vec<f64> = sum.iter().map(|s| s / logged as f64).collect();
            let s: Vec<f64> = sq
                .iter()
                .zip(&m)
                .map(|(q, m)| (q / logged as f64 - m * m).max(0.0).sqrt())
                .collect();
            (m, s)
        } else {
            (Vec::new(), Vec::new())
        };
        let rec = EpochMetrics {
            phase: self.phase,
            epoch: self.epoch,
            loss: loss_sum / n,
            accuracy: hits as f64 / n,
            param_mean,
            param_std,
        };
        debug!(
            "phase {} epoch {}: loss {:.4} acc {:.4}",
            rec.phase, rec.epoch, rec.loss, rec.accuracy
        );
        self.metrics.push(rec.clone());
        self.advance();
        Ok(rec)
    }

    fn advance(&mut self) {
        self.epoch += 1;
        let t = &self.model.config.trainer;
        if self.phase == 1 && self.epoch >= t.epochs_phase1 {
            self.epoch = 0;
            if t.epochs_phase2 > 0 {
                self.phase = 2;
                self.adam = Self::make_adam(&self.model.config, t.epochs_phase2);
            } else {
                self.phase = PHASE_DONE;
            }
        } else if self.phase == 2 && self.epoch >= t.epochs_phase2 {
            self.phase = PHASE_DONE;
            self.epoch = 0;
        }
    }

    /// Trains until both phases are complete, calling `on_epoch` after each
    /// epoch (for checkpointing).
    pub fn fit_with(
        &mut self,
        data: &Dataset,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(data)?;
            on_epoch(self)?;
        }
        Ok(())
    }
}

fn trainable_in(model: &Model, phase: u8, name: &str) -> bool {
    let cfg = &model.config;
    if cfg
        .trainer
        .frozen
        .iter()
        .any(|p| name.starts_with(p.as_str()))
    {
        return false;
    }
    if name.starts_with("sur.") {
        return true;
    }
    if phase != 1 {
        return false;
    }
    match model.frontend {
        Frontend::Dynamic => {
            name.starts_with("ctrl.")
                || (name.starts_with("isp.phat")
                    && cfg.controller.mode == DecodeMode::ResidualLearnable)
        }
        Frontend::Static => name.starts_with("isp.phat"),
        Frontend::Bypass => false,
    }
}

/// Training and test splits described by `cfg.synth` and `cfg.trainer`.
pub fn datasets(cfg: &Config) -> Result<(Dataset, Dataset)> {
    Ok((
        generate_split(&cfg.synth, Split::Train, cfg.trainer.train_images)?,
        generate_split(&cfg.synth, Split::Test, cfg.trainer.test_images)?,
    ))
}

/// Held-out split for model selection, the size of the test split.
pub fn validation_split(cfg: &Config) -> Result<Dataset> {
    generate_split(&cfg.synth, Split::Validation, cfg.trainer.test_images)
}

/// Trains a model from scratch on `data`.
pub fn fit(config: Config, data: &Dataset) -> Result<Trainer> {
    info!(
        "fit: seed {} strategy {:?} controller {}",
        config.trainer.seed, config.trainer.init_strategy, config.controller.enabled
    );
    let mut t = Trainer::new(Model::new(config)?);
    t.fit_with(data, |_| Ok(()))?;
    Ok(t)
}

/// Differentiable tuning of static ISP parameters: the controller is
/// disabled and `p̂` is trained jointly with the recognizer.
pub fn tune_static(mut config: Config, data: &Dataset) -> Result<Trainer> {
    config.controller.enabled = false;
    fit(config, data)
}

/// `x^(1/γ)` with negative inputs clamped to zero.
pub fn simple_gamma(x: &Tensor, gamma: f64) -> Tensor {
    let e = 1.0 / gamma;
    x.map(|v| v.max(0.0).powf(e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: f64,
    /// `(γ, score)` for every grid point, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Scores every point and returns the first maximizer.
pub fn grid_argmax(grid: &[f64], mut score: impl FnMut(f64) -> Result<f64>) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::Config("grid search needs at least one point".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &g in grid {
        scores.push((g, score(g)?));
    }
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok(GridResult {
        best: best.0,
        scores,
    })
}

/// Trains the recognizer on `x^(1/γ)`-processed images for every γ and
/// scores each on `val`. Returns the score table and the trainer of the
/// selected γ; its test images need `simple_gamma(x, best)` applied.
pub fn grid_search_gamma(
    grid: &[f64],
    config: &Config,
    train: &Dataset,
    val: &Dataset,
) -> Result<(GridResult, Trainer)> {
    if grid.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
        return Err(Error::Config("gamma grid values must be positive".into()));
    }
    let mut best: Option<(f64, Trainer)> = None;
    let res = grid_argmax(grid, |g| {
        let tr = train.map_images(|x| simple_gamma(x, g));
        let va = val.map_images(|x| simple_gamma(x, g));
        let mut t = Trainer::new(Model::bypass(config.clone())?);
        t.fit_with(&tr, |_| Ok(()))?;
        let acc = evaluate(&t.model, &va, EvalMode::Twice)?.accuracy;
        info!("grid γ={g}: validation accuracy {acc:.4}");
        if best.as_ref().is_none_or(|b| acc > b.0) {
            best = Some((acc, t));
        }
        Ok(acc)
    })?;
    let (_, t) = best.expect("non-empty grid");
    Ok((res, t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Parameters applied to each recognized frame.
    pub params: Vec<Vec<f64>>,
    pub logits: Vec<Tensor>,
}

/// Accuracy of `model` on `data`.
///
/// Twice: each image is processed with the inference-time initial
/// parameters, the controller predicts from that frame, and the same image
/// is reprocessed with the prediction. Sequential: the prediction made on
/// frame `t` is applied to frame `t+1`; each stream starts from the initial
/// parameters.
pub fn evaluate(model: &Model, data: &Dataset, mode: EvalMode) -> Result<EvalReport> {
    if mode == EvalMode::Sequential && !data.is_ordered() {
        return Err(Error::Config(
            "sequential evaluation needs ordered frames".into(),
        ));
    }
    let init = model.inference_initial()?;
    let mut logits = Vec::with_capacity(data.len());
    let mut params = Vec::with_capacity(data.len());
    match (model.frontend, mode) {
        (Frontend::Dynamic, EvalMode::Twice) => {
            for x in &data.images {
                let p = model.predict_params(x, &init)?;
                logits.push(model.recognize(x, &p)?.0);
                params.push(p);
            }
        }
        (Frontend::Dynamic, EvalMode::Sequential) => {
            let len = data.sequence_len.expect("ordered");
            let mut carry = init.clone();
            for (i, x) in data.images.iter().enumerate() {
                if i % len == 0 {
                    carry = init.clone();
                }
                let y = model.isp(x, &carry)?;
                let sp = surrogate_forward(&model.params, &model.config.surrogate, &y.output)?;
                let next = control_pipeline(
                    &model.params,
                    &sp.feature,
                    &model.config.controller,
                    &model.config.pipeline,
                )?
                .output
                .into_data();
                logits.push(sp.logits);
                params.push(std::mem::replace(&mut carry, next));
            }
        }
        _ => {
            let p = match model.frontend {
                Frontend::Static => model.static_point()?,
                _ => Vec::new(),
            };
            for x in &data.images {
                logits.push(model.recognize(x, &p)?.0);
                params.push(p.clone());
            }
        }
    }
    let accuracy = crate::synth::accuracy(&logits, &data.labels)?;
    Ok(EvalReport {
        accuracy,
        params,
        logits,
    })
}
