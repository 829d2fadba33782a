//! Adam with linear warmup followed by cosine decay.

use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Learning rate used for the update at zero-based `step`.
    ///
    /// Warmup ramps linearly from `lr_max / warmup_steps`; afterwards the rate
    /// follows half a cosine from `lr_max` down to `lr_min` at `total_steps`.
    /// The result is always inside `[lr_min, lr_max]`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let lr = if step < self.warmup_steps {
            self.lr_max * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
            let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
            self.lr_min
                + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
        };
        lr.clamp(self.lr_min, self.lr_max)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Params,
    pub second: Params,
    /// Learning-rate multipliers keyed by parameter-name prefix; first match wins.
    pub groups: Vec<(String, f64)>,
}

impl Adam {
    pub fn new(schedule: LrSchedule) -> Self {
        Adam {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Params::new(),
            second: Params::new(),
            groups: Vec::new(),
        }
    }

    pub fn with_group(mut self, prefix: impl Into<String>, multiplier: f64) -> Self {
        self.groups.push((prefix.into(), multiplier));
        self
    }

    fn multiplier(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(1.0, |(_, m)| *m)
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// Applies one bias-corrected Adam update to every parameter that has a
    /// gradient and passes `trainable`. Non-finite gradients abort before any
    /// parameter is touched.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &Params,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            if trainable(name) && !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter `{name}` at step {}",
                    self.step
                )));
            }
        }
        let lr = self.schedule.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            if !trainable(&name) {
                continue;
            }
            let Ok(g) = grads.get(&name) else { continue };
            let mult = self.multiplier(&name);
            let p = params.get_mut(&name).expect("listed name");
            if !self.first.contains(&name) {
                self.first.insert(name.clone(), p.zeros_like());
                self.second.insert(name.clone(), p.zeros_like());
            }
            let m = self.first.get_mut(&name).expect("inserted");
            for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            }
            let v = self.second.get_mut(&name).expect("inserted");
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            let m = self.first.get(&name).expect("inserted");
            let v = self.second.get(&name).expect("inserted");
            let step_lr = lr * mult;
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *pv -= step_lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::Tensor;

    fn sched() -> LrSchedule {
        LrSchedule {
            lr_max: 1e-3,
            lr_min: 1e-6,
            warmup_steps: 1000,
            total_steps: 10_000,
        }
    }

    #[test]
    fn warmup_starts_at_lr_max_over_warmup() {
        assert!((sched().lr_at(0) - 1e-6).abs() < 1e-18);
        assert!((sched().lr_at(999) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn cosine_ends_at_min_and_stays_in_range() {
        let s = sched();
        assert!((s.lr_at(10_000) - 1e-6).abs() < 1e-15);
        for step in (0..12_000).step_by(37) {
            let lr = s.lr_at(step);
            assert!((1e-6..=1e-3).contains(&lr));
        }
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = Params::new();
        p.insert("w", Tensor::from_vec(vec![0.3, -1.2]));
        let before = p.clone();
        let g = p.zeros_like();
        let mut adam = Adam::new(sched());
        for _ in 0..5 {
            adam.step(&mut p, &g, |_| true).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn scalar_adam_matches_reference_recurrence() {
        // Reference recurrence written out by hand for g = 1 at constant lr.
        let schedule = LrSchedule {
            lr_max: 0.1,
            lr_min: 0.1,
            warmup_steps: 0,
            total_steps: 10,
        };
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let mut expected = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut trajectory = Vec::new();
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            expected -= lr * mh / (vh.sqrt() + eps);
            trajectory.push(expected);
        }
        // With a constant unit gradient each bias-corrected step is lr/(1+eps).
        assert!((trajectory[2] - (1.0 - 3.0 * 0.1 / (1.0 + 1e-8))).abs() < 1e-12);

        let mut p = Params::new();
        p.insert("x", Tensor::scalar(1.0));
        let mut g = Params::new();
        g.insert("x", Tensor::scalar(1.0));
        let mut adam = Adam::new(schedule);
        for want in trajectory {
            adam.step(&mut p, &g, |_| true).unwrap();
            assert!((p.get("x").unwrap().data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Params::new();
        p.insert("ctrl.w", Tensor::scalar(1.0));
        let mut g = Params::new();
        g.insert("ctrl.w", Tensor::scalar(f64::NAN));
        let err = Adam::new(sched()).step(&mut p, &g, |_| true).unwrap_err();
        assert!(err.to_string().contains("ctrl.w"));
        assert_eq!(p.get("ctrl.w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn group_multiplier_scales_step() {
        let schedule = LrSchedule {
            lr_max: 0.1,
            lr_min: 0.1,
            warmup_steps: 0,
            total_steps: 1,
        };
        let mut p = Params::new();
        p.insert("ctrl.a", Tensor::scalar(0.0));
        p.insert("sur.a", Tensor::scalar(0.0));
        let mut g = Params::new();
        g.insert("ctrl.a", Tensor::scalar(1.0));
        g.insert("sur.a", Tensor::scalar(1.0));
        let mut adam = Adam::new(schedule).with_group("ctrl.", 0.1);
        adam.step(&mut p, &g, |_| true).unwrap();
        let a = p.get("ctrl.a").unwrap().data()[0];
        let b = p.get("sur.a").unwrap().data()[0];
        assert!((a / b - 0.1).abs() < 1e-9);
    }
}
