//! First-frame parameter initialization.
//!
//! During training the first frame of each two-frame pair needs ISP
//! parameters before the controller has seen anything. The buffer remembers
//! recently predicted parameter vectors and offers several ways of drawing an
//! initial vector from them.

use std::collections::VecDeque;

use log::info;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isp::ParamSpec;
use crate::ndiff::{Params, Tensor};

pub const DEFAULT_CAPACITY: usize = 500;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;

/// Relative distance from a bound that clamped samples are nudged to.
const NUDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    /// Always the static operating point.
    None,
    /// Independent uniform draw inside each bound interval.
    Uniform,
    /// Running mean plus Gaussian noise with the running variance.
    Gaussian,
    /// A stored vector chosen uniformly at random.
    Buffer,
}

impl InitStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InitStrategy::None),
            "uniform" => Ok(InitStrategy::Uniform),
            "gaussian" => Ok(InitStrategy::Gaussian),
            "buffer" => Ok(InitStrategy::Buffer),
            other => Err(Error::Config(format!("unknown init strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitBuffer {
    specs: Vec<ParamSpec>,
    capacity: usize,
    decay: f64,
    entries: VecDeque<Vec<f64>>,
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    ema: Option<Vec<f64>>,
}

impl InitBuffer {
    /// `specs` are the bounds of the concatenated parameter vector.
    pub fn new(specs: Vec<ParamSpec>, capacity: usize, decay: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!(
                "moving-average decay {decay} not in [0,1)"
            )));
        }
        for s in &specs {
            s.validate()?;
        }
        let n = specs.len();
        Ok(InitBuffer {
            specs,
            capacity,
            decay,
            entries: VecDeque::with_capacity(capacity),
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            ema: None,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of vectors ever pushed.
    pub fn pushes(&self) -> u64 {
        self.count
    }

    /// Stored vectors, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population variance of every pushed vector.
    pub fn running_var(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.specs.len()];
        }
        self.m2.iter().map(|m| m / self.count as f64).collect()
    }

    pub fn moving_average(&self) -> Option<&[f64]> {
        self.ema.as_deref()
    }

    pub fn push_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::dim(
                "push_params",
                format!("expected {} values, got {}", self.specs.len(), params.len()),
            ));
        }
        for (v, s) in params.iter().zip(&self.specs) {
            if !s.contains(*v) {
                return Err(Error::Domain(format!(
                    "pushed parameter `{}` = {v} not strictly inside ({}, {})",
                    s.name, s.min, s.max
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(params.to_vec());

        self.count += 1;
        let n = self.count as f64;
        for ((m, m2), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(params) {
            let d = v - *m;
            *m += d / n;
            *m2 += d * (v - *m);
        }
        match &mut self.ema {
            None => self.ema = Some(params.to_vec()),
            Some(e) => {
                for (e, &v) in e.iter_mut().zip(params) {
                    *e = self.decay * *e + (1.0 - self.decay) * v;
                }
            }
        }
        Ok(())
    }

    fn clamp_interior(&self, v: &mut [f64]) {
        for (x, s) in v.iter_mut().zip(&self.specs) {
            let m = NUDGE * s.range();
            *x = x.clamp(s.min + m, s.max - m);
        }
    }

    fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.specs
            .iter()
            .map(|s| loop {
                let v = rng.random_range(s.min..s.max);
                if v > s.min {
                    break v;
                }
            })
            .collect()
    }

    /// Draws a first-frame parameter vector.
    ///
    /// `static_point` is the current `act_range(p̂)` vector, returned by the
    /// `none` strategy.
    pub fn sample_initial<R: Rng + ?Sized>(
        &self,
        strategy: InitStrategy,
        static_point: &[f64],
        rng: &mut R,
    ) -> Vec<f64> {
        match strategy {
            InitStrategy::None => static_point.to_vec(),
            InitStrategy::Uniform => self.sample_uniform(rng),
            InitStrategy::Gaussian => {
                if self.count == 0 {
                    info!("init buffer empty, gaussian strategy falls back to uniform");
                    return self.sample_uniform(rng);
                }
                let var = self.running_var();
                let mut v: Vec<f64> = self
                    .mean
                    .iter()
                    .zip(&var)
                    .map(|(&m, &s2)| {
                        if s2 > 0.0 {
                            let z: f64 = StandardNormal.sample(rng);
                            m + s2.sqrt() * z
                        } else {
                            m
                        }
                    })
                    .collect();
                self.clamp_interior(&mut v);
                v
            }
            InitStrategy::Buffer => {
                if self.entries.is_empty() {
                    info!("init buffer empty, buffer strategy falls back to uniform");
                    return self.sample_uniform(rng);
                }
                let i = rng.random_range(0..self.entries.len());
                self.entries[i].clone()
            }
        }
    }

    /// Initial parameters for inference: the moving average of everything
    /// predicted during training, or `static_point` when nothing was pushed.
    pub fn inference_initial(&self, static_point: &[f64]) -> Vec<f64> {
        match &self.ema {
            Some(e) => {
                let mut v = e.clone();
                self.clamp_interior(&mut v);
                v
            }
            None => static_point.to_vec(),
        }
    }

    /// Serializes the state as named tensors under `prefix`.
    pub fn to_params(&self, prefix: &str) -> Params {
        let n = self.specs.len();
        let mut p = Params::new();
        let flat: Vec<f64> = self.entries.iter().flatten().copied().collect();
        p.insert(
            format!("{prefix}entries"),
            Tensor::new(vec![self.entries.len(), n], flat).expect("entry shape"),
        );
        p.insert(format!("{prefix}count"), Tensor::scalar(self.count as f64));
        p.insert(format!("{prefix}mean"), Tensor::from_vec(self.mean.clone()));
        p.insert(format!("{prefix}m2"), Tensor::from_vec(self.m2.clone()));
        if let Some(e) = &self.ema {
            p.insert(format!("{prefix}ema"), Tensor::from_vec(e.clone()));
        }
        p
    }

    /// Restores state written by [`InitBuffer::to_params`].
    pub fn load_params(&mut self, p: &Params, prefix: &str) -> Result<()> {
        let n = self.specs.len();
        let entries = p.get(&format!("{prefix}entries"))?;
        if entries.shape().len() != 2 || entries.shape()[1] != n {
            return Err(Error::dim(
                "load_params",
                format!(
                    "buffer entries shape {:?}, width {n} expected",
                    entries.shape()
                ),
            ));
        }
        if entries.shape()[0] > self.capacity {
            return Err(Error::Config(format!(
                "{} stored entries exceed capacity {}",
                entries.shape()[0],
                self.capacity
            )));
        }
        let count = p.get(&format!("{prefix}count"))?.data()[0];
        let mean = p.get(&format!("{prefix}mean"))?;
        let m2 = p.get(&format!("{prefix}m2"))?;
        mean.check_shape("load_params", "mean", &[n])?;
        m2.check_shape("load_params", "m2", &[n])?;
        self.entries = entries
            .data()
            .chunks(n.max(1))
            .map(<[f64]>::to_vec)
            .collect();
        if n == 0 {
            self.entries.clear();
        }
        self.count = count as u64;
        self.mean = mean.data().to_vec();
        self.m2 = m2.data().to_vec();
        self.ema = match p.get(&format!("{prefix}ema")) {
            Ok(e) => {
                e.check_shape("load_params", "ema", &[n])?;
                Some(e.data().to_vec())
            }
            Err(_) => None,
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: "a".into(),
                min: 0.0,
                max: 1.0,
            },
            ParamSpec {
                name: "b".into(),
                min: 0.5,
                max: 5.0,
            },
        ]
    }

    #[test]
    fn singleton_buffer_returns_vector() {
        let mut b = InitBuffer::new(specs(), 500, 0.99).unwrap();
        b.push_params(&[0.3, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            b.sample_initial(InitStrategy::Buffer, &[0.5, 2.75], &mut rng),
            vec![0.3, 2.0]
        );
    }

    #[test]
    fn oldest_is_evicted() {
        let mut b = InitBuffer::new(specs(), 500, 0.99).unwrap();
        for i in 0..501 {
            b.push_params(&[(i as f64 + 0.5) / 502.0, 1.0]).unwrap();
        }
        assert_eq!(b.len(), 500);
        let first = 0.5 / 502.0;
        assert!(b.entries().all(|e| e[0] != first));
        assert_eq!(b.entries().next().unwrap()[0], 1.5 / 502.0);
    }

    #[test]
    fn constant_stream_statistics() {
        let mut b = InitBuffer::new(specs(), 10, 0.99).unwrap();
        for _ in 0..37 {
            b.push_params(&[0.25, 3.0]).unwrap();
        }
        assert_eq!(b.running_mean(), &[0.25, 3.0]);
        assert_eq!(b.running_var(), vec![0.0, 0.0]);
        assert_eq!(b.inference_initial(&[0.5, 2.75]), vec![0.25, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            b.sample_initial(InitStrategy::Gaussian, &[0.5, 2.75], &mut rng),
            vec![0.25, 3.0]
        );
    }

    #[test]
    fn ema_matches_scalar_recurrence() {
        let s = vec![ParamSpec {
            name: "a".into(),
            min: -1.0,
            max: 2.0,
        }];
        let mut b = InitBuffer::new(s, 500, 0.99).unwrap();
        for _ in 0..20 {
            b.push_params(&[0.0]).unwrap();
        }
        b.push_params(&[1.0]).unwrap();
        let got = b.moving_average().unwrap()[0];
        assert!((got - 0.01).abs() < 1e-15, "{got}");
    }

    #[test]
    fn out_of_bounds_push_is_rejected() {
        let mut b = InitBuffer::new(specs(), 5, 0.99).unwrap();
        assert!(matches!(b.push_params(&[1.0, 2.0]), Err(Error::Domain(_))));
        assert!(b.is_empty());
    }

    #[test]
    fn untrained_inference_uses_static_point() {
        let b = InitBuffer::new(specs(), 5, 0.99).unwrap();
        assert_eq!(b.inference_initial(&[0.5, 2.75]), vec![0.5, 2.75]);
    }

    #[test]
    fn uniform_mean_near_midpoint() {
        let b = InitBuffer::new(specs(), 5, 0.99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let v = b.sample_initial(InitStrategy::Uniform, &[0.5, 2.75], &mut rng);
            sum[0] += v[0];
            sum[1] += v[1];
        }
        for (s, spec) in sum.iter().zip(specs()) {
            let mean = s / n as f64;
            assert!((mean - spec.midpoint()).abs() <= 0.02 * spec.midpoint().abs());
        }
    }

    #[test]
    fn buffer_draw_frequencies() {
        let mut b = InitBuffer::new(specs(), 5, 0.99).unwrap();
        b.push_params(&[0.1, 1.0]).unwrap();
        b.push_params(&[0.9, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10_000;
        let a = (0..n)
            .filter(|_| b.sample_initial(InitStrategy::Buffer, &[0.5, 2.75], &mut rng)[0] == 0.1)
            .count();
        let frac = a as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn state_round_trips() {
        let mut b = InitBuffer::new(specs(), 3, 0.9).unwrap();
        for i in 0..5 {
            b.push_params(&[0.1 + 0.1 * i as f64, 1.0 + i as f64 * 0.5])
                .unwrap();
        }
        let p = b.to_params("buf.");
        let mut c = InitBuffer::new(specs(), 3, 0.9).unwrap();
        c.load_params(&p, "buf.").unwrap();
        assert_eq!(b, c);
    }
}
