//! Differentiable classical ISP stages and their ordered composition.
//!
//! Images are `C×H×W` tensors of linear intensities. Every stage works on
//! each channel independently.

mod ops;
mod pipeline;

pub use ops::{
    apply_ag, apply_cs, apply_dn, apply_gm, apply_sn, apply_stage, dog, gaussian_filter,
    gaussian_kernel, GM_CLAMP_MIN, GM_DENOM_GUARD,
};
pub use pipeline::{apply_pipeline, apply_pipeline_flat};

use serde::{Deserialize, Serialize};

use crate::controller::act_range;
use crate::error::{Error, Result};

/// The five stage kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IspKind {
    /// Auto gain: three-segment piecewise-linear map of `[0,1]` onto itself.
    Ag,
    /// Denoiser: blend with a 5×5 bilateral filter.
    Dn,
    /// Sharpener: blend with the difference-of-Gaussians detail signal.
    Sn,
    /// Parameterized gamma tone curve with a knee point.
    Gm,
    /// Contrast stretcher `q_b·x + q_c`, deliberately unclipped.
    Cs,
}

impl IspKind {
    pub fn param_count(self) -> usize {
        match self {
            IspKind::Ag | IspKind::Dn | IspKind::Gm => 3,
            IspKind::Sn | IspKind::Cs => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IspKind::Ag => "AG",
            IspKind::Dn => "DN",
            IspKind::Sn => "SN",
            IspKind::Gm => "GM",
            IspKind::Cs => "CS",
        }
    }

    /// Default search intervals, in parameter order.
    pub fn default_specs(self) -> Vec<ParamSpec> {
        let s = |name: &str, min: f64, max: f64| ParamSpec {
            name: name.to_string(),
            min,
            max,
        };
        match self {
            IspKind::Ag => vec![
                s("p_w", 0.01, 0.99),
                s("p_h", 0.01, 0.99),
                s("p_x", 0.01, 0.99),
            ],
            IspKind::Dn => vec![
                s("p_a", 0.0, 1.0),
                s("p_sigma_s", 0.1, 3.0),
                s("p_sigma_i", 0.01, 1.0),
            ],
            IspKind::Sn => vec![s("p_a", 0.0, 1.0), s("p_sigma", 0.1, 3.0)],
            IspKind::Gm => vec![
                s("p_g1", 0.5, 5.0),
                s("p_g2", 0.1, 2.0),
                s("p_k", 0.01, 0.99),
            ],
            IspKind::Cs => vec![s("q_b", 0.5, 3.0), s("q_c", -0.5, 0.5)],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ag" => Ok(IspKind::Ag),
            "dn" => Ok(IspKind::Dn),
            "sn" => Ok(IspKind::Sn),
            "gm" => Ok(IspKind::Gm),
            "cs" => Ok(IspKind::Cs),
            other => Err(Error::Config(format!("unknown ISP function `{other}`"))),
        }
    }
}

/// Search interval `(min, max)` of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl ParamSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(Error::Config(format!(
                "parameter `{}` has invalid bounds ({}, {})",
                self.name, self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    /// True when `v` lies in the open interval.
    pub fn contains(&self, v: f64) -> bool {
        v > self.min && v < self.max
    }

    /// Maps `v` into `[0, 1]` relative to the bounds.
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / self.range()
    }

    /// Pre-activation value whose range activation is `v`.
    pub fn inverse_activation(&self, v: f64) -> Result<f64> {
        if !self.contains(v) {
            return Err(Error::Domain(format!(
                "`{}` = {v} outside ({}, {})",
                self.name, self.min, self.max
            )));
        }
        let t = self.normalize(v);
        Ok((t / (1.0 - t)).ln())
    }
}

/// One pipeline stage: its kind, parameter bounds and learnable defaults
/// `p̂` (stored in pre-activation space).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub kind: IspKind,
    pub params: Vec<ParamSpec>,
    pub phat: Vec<f64>,
}

impl StageSpec {
    /// Stage with default bounds and `p̂ = 0` (the interval midpoints).
    pub fn new(kind: IspKind) -> Self {
        StageSpec {
            kind,
            params: kind.default_specs(),
            phat: vec![0.0; kind.param_count()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kind.param_count();
        if self.params.len() != n || self.phat.len() != n {
            return Err(Error::Config(format!(
                "{} takes {n} parameters, got {} bounds and {} defaults",
                self.kind.name(),
                self.params.len(),
                self.phat.len()
            )));
        }
        for p in &self.params {
            p.validate()?;
        }
        if self.phat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "{} has non-finite defaults",
                self.kind.name()
            )));
        }
        Ok(())
    }

    /// `act_range(p̂)` for every parameter.
    pub fn default_values(&self) -> Vec<f64> {
        self.phat
            .iter()
            .zip(&self.params)
            .map(|(&x, s)| act_range(x, s))
            .collect()
    }
}

/// Ordered list of stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub stages: Vec<StageSpec>,
}

impl PipelineSpec {
    pub fn from_kinds(kinds: &[IspKind]) -> Self {
        PipelineSpec {
            stages: kinds.iter().map(|&k| StageSpec::new(k)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("pipeline needs at least one stage".into()));
        }
        self.stages.iter().try_for_each(StageSpec::validate)
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Total parameter count across stages.
    pub fn total_params(&self) -> usize {
        self.stages.iter().map(|s| s.kind.param_count()).sum()
    }

    /// Start offset of each stage in the concatenated parameter vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.stages
            .iter()
            .map(|s| {
                let o = off;
                off += s.kind.param_count();
                o
            })
            .collect()
    }

    /// All bounds, concatenated in stage order.
    pub fn flat_specs(&self) -> Vec<ParamSpec> {
        self.stages.iter().flat_map(|s| s.params.clone()).collect()
    }

    pub fn flat_phat(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|s| s.phat.clone()).collect()
    }

    /// `act_range(p̂)` for the whole pipeline (the static operating point).
    pub fn default_values(&self) -> Vec<f64> {
        self.stages
            .iter()
            .flat_map(|s| s.default_values())
            .collect()
    }

    /// Splits a concatenated vector into per-stage sets, checking bounds.
    pub fn split(&self, flat: &[f64]) -> Result<Vec<ParamSet>> {
        if flat.len() != self.total_params() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.total_params(),
                flat.len()
            )));
        }
        let sets: Vec<ParamSet> = self
            .offsets()
            .into_iter()
            .zip(&self.stages)
            .enumerate()
            .map(|(l, (o, s))| ParamSet {
                stage: l,
                values: flat[o..o + s.kind.param_count()].to_vec(),
            })
            .collect();
        for set in &sets {
            set.check(&self.stages[set.stage])?;
        }
        Ok(sets)
    }

    pub fn display_names(&self) -> Vec<String> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(l, s)| {
                s.params
                    .iter()
                    .map(move |p| format!("{}{}.{}", s.kind.name(), l, p.name))
            })
            .collect()
    }
}

/// Parameter values for stage `stage`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub stage: usize,
    pub values: Vec<f64>,
}

impl ParamSet {
    /// Every value must lie strictly inside its interval.
    pub fn check(&self, spec: &StageSpec) -> Result<()> {
        if self.values.len() != spec.kind.param_count() {
            return Err(Error::Config(format!(
                "stage {} ({}) expects {} parameters, got {}",
                self.stage,
                spec.kind.name(),
                spec.kind.param_count(),
                self.values.len()
            )));
        }
        for (v, p) in self.values.iter().zip(&spec.params) {
            if !p.contains(*v) {
                return Err(Error::Domain(format!(
                    "stage {} ({}) parameter `{}` = {v} outside ({}, {})",
                    self.stage,
                    spec.kind.name(),
                    p.name,
                    p.min,
                    p.max
                )));
            }
        }
        Ok(())
    }
}
