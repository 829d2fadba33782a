//! Directional ablations on the synthetic benchmark.
//!
//! Every configuration is trained once per seed on that seed's dataset and
//! scored on the matching test split; tables share runs where they overlap.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::{
    datasets, evaluate, fit, grid_search_gamma, simple_gamma, tune_static, validation_split,
    EvalMode, Trainer,
};
use crate::controller::DecodeMode;
use crate::error::{Error, Result};
use crate::init_buffer::InitStrategy;
use crate::io::Config;
use crate::isp::{IspKind, PipelineSpec, StageSpec};
use crate::synth::{generate_sequences, Dataset};

/// GM stage whose starting point is the identity curve (`g1 = g2 = 1`).
pub fn identity_gm() -> StageSpec {
    let mut s = StageSpec::new(IspKind::Gm);
    s.phat = vec![
        s.params[0]
            .inverse_activation(1.0)
            .expect("1 inside g1 bounds"),
        s.params[1]
            .inverse_activation(1.0)
            .expect("1 inside g2 bounds"),
        0.0,
    ];
    s
}

/// CS stage starting at `q_b = 1, q_c = 0`.
pub fn identity_cs() -> StageSpec {
    let mut s = StageSpec::new(IspKind::Cs);
    s.phat = vec![
        s.params[0]
            .inverse_activation(1.0)
            .expect("1 inside q_b bounds"),
        0.0,
    ];
    s
}

/// Small blend weights for the filtering stages so they start close to
/// a pass-through.
fn mild(kind: IspKind) -> StageSpec {
    let mut s = StageSpec::new(kind);
    s.phat[0] = s.params[0]
        .inverse_activation(0.1)
        .expect("0.1 inside blend bounds");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSettings {
    /// Base configuration; its pipeline is the single-GM pipeline.
    pub base: Config,
    pub seeds: Vec<u64>,
    /// `γ` values of the simple-gamma grid search.
    pub grid: Vec<f64>,
    /// Streams and frames per stream for the sequential comparison.
    pub sequences: (usize, usize),
}

impl AblationSettings {
    /// Sizes that finish in minutes on one CPU core.
    pub fn desk() -> Self {
        let mut base = Config::default();
        base.pipeline = PipelineSpec {
            stages: vec![identity_gm()],
        };
        base.synth.size = 16;
        base.surrogate.input_size = 16;
        base.surrogate.stage1_channels = 8;
        base.surrogate.head_channels = 16;
        base.controller.latent_width = 32;
        base.controller.sfb_conv_channels = 8;
        base.controller.sfb_hidden = 64;
        base.controller.update_hidden = 16;
        base.trainer.train_images = 4000;
        base.trainer.test_images = 2000;
        base.trainer.epochs_phase1 = 20;
        base.trainer.epochs_phase2 = 10;
        base.trainer.lr_max = 3e-3;
        base.trainer.lr_min = 1e-5;
        base.trainer.warmup_steps = 50;
        AblationSettings {
            base,
            seeds: vec![0, 1, 2, 3],
            grid: vec![0.5, 1.0, 1.5, 2.2, 3.0],
            sequences: (200, 10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub per_seed: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Mean of the named row; panics when absent.
    pub fn mean(&self, name: &str) -> f64 {
        self.row(name)
            .unwrap_or_else(|| panic!("no row `{name}` in {}", self.title))
            .mean()
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} (accuracy, seeds {:?})", self.title, self.seeds)?;
        for r in &self.rows {
            write!(f, "  {:<22}", r.name)?;
            for v in &r.per_seed {
                write!(f, " {:>6.2}", 100.0 * v)?;
            }
            writeln!(f, "  | mean {:>6.2}", 100.0 * r.mean())?;
        }
        Ok(())
    }
}

/// Named benchmark configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Run {
    Grid,
    Static,
    Plain(InitStrategy),
    Ro,
    RoPlus,
    FourStage { latent_update: bool },
}

impl Run {
    pub fn label(self) -> String {
        match self {
            Run::Grid => "grid-search gamma".into(),
            Run::Static => "diff. tuning (static)".into(),
            Run::Plain(s) => format!("plain, init {s:?}").to_lowercase(),
            Run::Ro => "RO (static p̂)".into(),
            Run::RoPlus => "RO+ (learnable p̂)".into(),
            Run::FourStage {
                latent_update: true,
            } => "4 stages, with LU".into(),
            Run::FourStage {
                latent_update: false,
            } => "4 stages, w/o LU".into(),
        }
    }
}

fn ord_key(run: Run) -> (u8, u8) {
    match run {
        Run::Grid => (0, 0),
        Run::Static => (1, 0),
        Run::Plain(s) => (2, s as u8),
        Run::Ro => (3, 0),
        Run::RoPlus => (4, 0),
        Run::FourStage { latent_update } => (5, latent_update as u8),
    }
}

/// Caches trained runs so tables can share them.
pub struct Suite {
    pub settings: AblationSettings,
    data: BTreeMap<u64, (Dataset, Dataset)>,
    scores: BTreeMap<((u8, u8), u64), f64>,
    tuned: BTreeMap<u64, Vec<f64>>,
    models: BTreeMap<u64, Trainer>,
}

impl Suite {
    pub fn new(settings: AblationSettings) -> Result<Suite> {
        settings.validate()?;
        Ok(Suite {
            settings,
            data: BTreeMap::new(),
            scores: BTreeMap::new(),
            tuned: BTreeMap::new(),
            models: BTreeMap::new(),
        })
    }

    fn seeded(&self, seed: u64) -> Config {
        let mut c = self.settings.base.clone();
        c.trainer.seed = seed;
        c.synth.seed = seed;
        c
    }

    fn data(&mut self, seed: u64) -> Result<(Dataset, Dataset)> {
        if !self.data.contains_key(&seed) {
            let d = datasets(&self.seeded(seed))?;
            self.data.insert(seed, d);
        }
        Ok(self.data[&seed].clone())
    }

    /// `p̂` learned by static tuning for `seed`.
    fn tuned_phat(&mut self, seed: u64) -> Result<Vec<f64>> {
        if !self.tuned.contains_key(&seed) {
            self.score(Run::Static, seed)?;
        }
        Ok(self.tuned[&seed].clone())
    }

    /// Trained RO+ model (the full dynamic method) for `seed`.
    pub fn dynamic_model(&mut self, seed: u64) -> Result<&Trainer> {
        if !self.models.contains_key(&seed) {
            self.score(Run::RoPlus, seed)?;
        }
        Ok(&self.models[&seed])
    }

    /// Test accuracy of `run` at `seed`, training it on first use.
    pub fn score(&mut self, run: Run, seed: u64) -> Result<f64> {
        let key = (ord_key(run), seed);
        if let Some(&s) = self.scores.get(&key) {
            return Ok(s);
        }
        let (train, test) = self.data(seed)?;
        let mut cfg = self.seeded(seed);
        let t0 = Instant::now();
        let acc = match run {
            Run::Grid => {
                let val = validation_split(&cfg)?;
                let (res, t) = grid_search_gamma(&self.settings.grid, &cfg, &train, &val)?;
                let te = test.map_images(|x| simple_gamma(x, res.best));
                evaluate(&t.model, &te, EvalMode::Twice)?.accuracy
            }
            Run::Static => {
                let t = tune_static(cfg, &train)?;
                let phat = t.model.phat()?;
                self.tuned.insert(seed, phat);
                evaluate(&t.model, &test, EvalMode::Twice)?.accuracy
            }
            Run::Plain(strategy) => {
                cfg.controller.mode = DecodeMode::Plain;
                cfg.trainer.init_strategy = strategy;
                let t = fit(cfg, &train)?;
                evaluate(&t.model, &test, EvalMode::Twice)?.accuracy
            }
            Run::Ro | Run::RoPlus => {
                // RO keeps the statically tuned defaults; RO+ learns its own
                // from the configured starting point.
                if run == Run::Ro {
                    let phat = self.tuned_phat(seed)?;
                    let mut off = 0;
                    for st in &mut cfg.pipeline.stages {
                        let n = st.phat.len();
                        st.phat = phat[off..off + n].to_vec();
                        off += n;
                    }
                    cfg.controller.mode = DecodeMode::ResidualStatic;
                } else {
                    cfg.controller.mode = DecodeMode::ResidualLearnable;
                }
                cfg.trainer.init_strategy = InitStrategy::Buffer;
                let t = fit(cfg, &train)?;
                let acc = evaluate(&t.model, &test, EvalMode::Twice)?.accuracy;
                if run == Run::RoPlus {
                    self.models.insert(seed, t);
                }
                acc
            }
            Run::FourStage { latent_update } => {
                cfg.pipeline = PipelineSpec {
                    stages: vec![
                        mild(IspKind::Dn),
                        mild(IspKind::Sn),
                        identity_gm(),
                        identity_cs(),
                    ],
                };
                cfg.controller.mode = DecodeMode::ResidualLearnable;
                cfg.controller.latent_update = latent_update;
                cfg.trainer.init_strategy = InitStrategy::Buffer;
                let t = fit(cfg, &train)?;
                evaluate(&t.model, &test, EvalMode::Twice)?.accuracy
            }
        };
        info!(
            "{} seed {seed}: {:.4} ({:.1}s)",
            run.label(),
            acc,
            t0.elapsed().as_secs_f64()
        );
        self.scores.insert(key, acc);
        Ok(acc)
    }

    fn table(&mut self, title: &str, runs: &[Run]) -> Result<AblationTable> {
        let seeds = self.settings.seeds.clone();
        let mut rows = Vec::with_capacity(runs.len());
        for &run in runs {
            let mut per_seed = Vec::with_capacity(seeds.len());
            for &s in &seeds {
                per_seed.push(self.score(run, s)?);
            }
            rows.push(AblationRow {
                name: run.label(),
                per_seed,
            });
        }
        Ok(AblationTable {
            title: title.into(),
            seeds,
            rows,
        })
    }

    /// Controller components, GM pipeline.
    pub fn table1(&mut self) -> Result<AblationTable> {
        self.table(
            "Table 1: controller components (GM)",
            &[
                Run::Plain(InitStrategy::None),
                Run::Plain(InitStrategy::Buffer),
                Run::Ro,
                Run::RoPlus,
            ],
        )
    }

    /// First-frame initialization strategies, plain decoding.
    pub fn table2(&mut self) -> Result<AblationTable> {
        self.table(
            "Table 2: parameter initializer (GM, plain)",
            &[
                Run::Plain(InitStrategy::None),
                Run::Plain(InitStrategy::Uniform),
                Run::Plain(InitStrategy::Gaussian),
                Run::Plain(InitStrategy::Buffer),
            ],
        )
    }

    /// Grid search vs differentiable static tuning vs dynamic control.
    pub fn table3(&mut self) -> Result<AblationTable> {
        self.table(
            "Table 3: tuning methods (GM)",
            &[Run::Grid, Run::Static, Run::RoPlus],
        )
    }

    /// Latent update on a four-stage pipeline.
    pub fn table5(&mut self) -> Result<AblationTable> {
        self.table(
            "Table 5: latent update (DN+SN+GM+CS)",
            &[
                Run::FourStage {
                    latent_update: false,
                },
                Run::FourStage {
                    latent_update: true,
                },
            ],
        )
    }

    /// Twice-input vs sequential evaluation of the dynamic model on ordered
    /// streams.
    pub fn table6(&mut self) -> Result<AblationTable> {
        let seeds = self.settings.seeds.clone();
        let (n_seq, len) = self.settings.sequences;
        let (mut twice, mut seq) = (Vec::new(), Vec::new());
        for &s in &seeds {
            let mut scfg = self.seeded(s).synth;
            scfg.seed = s.wrapping_add(1 << 20);
            let frames = generate_sequences(&scfg, n_seq, len)?;
            let model = &self.dynamic_model(s)?.model;
            twice.push(evaluate(model, &frames, EvalMode::Twice)?.accuracy);
            seq.push(evaluate(model, &frames, EvalMode::Sequential)?.accuracy);
        }
        Ok(AblationTable {
            title: "Table 6: evaluation protocol (GM, RO+)".into(),
            seeds,
            rows: vec![
                AblationRow {
                    name: "input twice".into(),
                    per_seed: twice,
                },
                AblationRow {
                    name: "input sequentially".into(),
                    per_seed: seq,
                },
            ],
        })
    }

    pub fn by_number(&mut self, table: u8) -> Result<AblationTable> {
        match table {
            1 => self.table1(),
            2 => self.table2(),
            3 => self.table3(),
            5 => self.table5(),
            6 => self.table6(),
            other => Err(Error::Config(format!(
                "no ablation table {other}; choose 1, 2, 3, 5 or 6"
            ))),
        }
    }
}
