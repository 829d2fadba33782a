//! Synthetic RAW-like shape scenes and the small recognizer trained on them.

mod surrogate;

pub use surrogate::{
    accuracy, argmax, backbone, head, init_surrogate, surrogate_forward, SurrogateConfig,
    SurrogatePass,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["disc", "square", "triangle"];
pub const NUM_CLASSES: usize = 3;

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Square image side in pixels.
    pub size: usize,
    /// Exposure scale, sampled log-uniformly.
    pub exposure: (f64, f64),
    /// Exponent applied to the clean linear render, sampled log-uniformly.
    pub gamma_distortion: (f64, f64),
    /// Standard deviation of additive read noise.
    pub read_noise: (f64, f64),
    /// Gain of the signal-dependent (shot) noise variance.
    pub noise_gain: (f64, f64),
    pub bits: u32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 32,
            exposure: (0.01, 1.0),
            gamma_distortion: (0.5, 2.0),
            read_noise: (0.0005, 0.003),
            noise_gain: (0.0, 0.0005),
            bits: 12,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("image size {} below 8", self.size)));
        }
        let pos = |name: &str, (lo, hi): (f64, f64), strict: bool| {
            let ok = lo.is_finite()
                && hi.is_finite()
                && lo <= hi
                && if strict { lo > 0.0 } else { lo >= 0.0 };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("invalid {name} range ({lo}, {hi})")))
            }
        };
        pos("exposure", self.exposure, true)?;
        pos("gamma_distortion", self.gamma_distortion, true)?;
        pos("read_noise", self.read_noise, false)?;
        pos("noise_gain", self.noise_gain, false)?;
        if self.exposure.1 > 1.0 {
            return Err(Error::Config("exposure above 1".into()));
        }
        if !(1..=24).contains(&self.bits) {
            return Err(Error::Config(format!(
                "bit depth {} not in 1..=24",
                self.bits
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Sequence,
    Validation,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
            Split::Sequence => 3,
            Split::Validation => 4,
        }
    }
}

/// Independent stream per (seed, split, index); splits never share a stream.
pub fn item_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(split.tag() << 48 | index);
    r
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.random_range(lo.ln()..hi.ln()).exp()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.random_range(lo..hi)
}

/// Scene content before the sensor: geometry, shading and tone distortion.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub label: usize,
    pub center: (f64, f64),
    pub radius: f64,
    pub background: f64,
    pub foreground: f64,
    texture: [(f64, f64, f64, f64); 2],
    pub gamma: f64,
}

impl SceneLayout {
    pub fn sample<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Self {
        let n = cfg.size as f64;
        let label = rng.random_range(0..NUM_CLASSES);
        let (center, radius) = loop {
            let radius = rng.random_range(0.2..0.34) * n;
            let c = (
                rng.random_range(0.3..0.7) * n,
                rng.random_range(0.3..0.7) * n,
            );
            // Triangles reach furthest from the centre (1.15·r).
            let reach = 1.15 * radius;
            if c.0 - reach >= 0.0 && c.0 + reach <= n && c.1 - reach >= 0.0 && c.1 + reach <= n {
                break (c, radius);
            }
        };
        let background: f64 = rng.random_range(0.05..0.35);
        let foreground = (background + rng.random_range(0.3..0.6)).min(1.0);
        let mut texture = [(0.0, 0.0, 0.0, 0.0); 2];
        for t in &mut texture {
            *t = (
                rng.random_range(0.0..0.06),
                rng.random_range(0.5..2.5) * std::f64::consts::TAU / n,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::PI),
            );
        }
        let gamma = log_uniform(rng, cfg.gamma_distortion);
        SceneLayout {
            label,
            center,
            radius,
            background,
            foreground,
            texture,
            gamma,
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let r = self.radius;
        match self.label {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            _ => {
                // Upward equilateral triangle with circumradius 1.15·r.
                let rc = 1.15 * r;
                let top = -rc;
                let base = 0.5 * rc;
                if dy < top || dy > base {
                    return false;
                }
                let half = (dy - top) / (base - top) * rc * 3f64.sqrt() / 2.0;
                dx.abs() <= half
            }
        }
    }

    fn background_at(&self, x: f64, y: f64) -> f64 {
        let mut v = self.background;
        for &(amp, freq, phase, angle) in &self.texture {
            v += amp * (freq * (x * angle.cos() + y * angle.sin()) + phase).sin();
        }
        v.clamp(0.0, 1.0)
    }

    /// Clean linear render after the scene's tone distortion, in `[0,1]`.
    pub fn render(&self, size: usize) -> Tensor {
        let mut out = vec![0.0; size * size];
        let ss = SUPERSAMPLE as f64;
        for i in 0..size {
            for j in 0..size {
                let mut cover = 0.0;
                for a in 0..SUPERSAMPLE {
                    for b in 0..SUPERSAMPLE {
                        let y = i as f64 + (a as f64 + 0.5) / ss;
                        let x = j as f64 + (b as f64 + 0.5) / ss;
                        if self.inside(x, y) {
                            cover += 1.0;
                        }
                    }
                }
                cover /= ss * ss;
                let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
                let bg = self.background_at(cx, cy);
                let v = bg * (1.0 - cover) + self.foreground * cover;
                out[i * size + j] = v.powf(self.gamma);
            }
        }
        Tensor::new(vec![1, size, size], out).expect("render shape")
    }
}

/// Sensor capture: exposure scaling, shot plus read noise, clipping and
/// quantization.
pub fn capture<R: Rng + ?Sized>(
    clean: &Tensor,
    exposure: f64,
    read_sigma: f64,
    gain: f64,
    bits: u32,
    rng: &mut R,
) -> Tensor {
    let levels = ((1u64 << bits) - 1) as f64;
    let data = clean
        .data()
        .iter()
        .map(|&v| {
            let s = v * exposure;
            let var = gain * s + read_sigma * read_sigma;
            let noisy = if var > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                s + var.sqrt() * z
            } else {
                s
            };
            (noisy.clamp(0.0, 1.0) * levels).round() / levels
        })
        .collect();
    Tensor::new(clean.shape().to_vec(), data).expect("capture shape")
}

/// Renders and captures one scene. Returns the raw image and its label.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> (Tensor, usize) {
    let layout = SceneLayout::sample(cfg, rng);
    let exposure = log_uniform(rng, cfg.exposure);
    let read = uniform(rng, cfg.read_noise);
    let gain = uniform(rng, cfg.noise_gain);
    let clean = layout.render(cfg.size);
    (
        capture(&clean, exposure, read, gain, cfg.bits, rng),
        layout.label,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Frames per stream when consecutive images form ordered streams.
    pub sequence_len: Option<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn is_ordered(&self) -> bool {
        self.sequence_len.is_some()
    }

    /// Applies `f` to every image, keeping labels and ordering.
    pub fn map_images(&self, f: impl Fn(&Tensor) -> Tensor) -> Dataset {
        Dataset {
            images: self.images.iter().map(f).collect(),
            labels: self.labels.clone(),
            sequence_len: self.sequence_len,
        }
    }
}

/// `n` independent scenes of one split. Image `i` depends only on
/// `(cfg, split, i)`.
pub fn generate_split(cfg: &SceneConfig, split: Split, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = item_rng(cfg.seed, split, i as u64);
        let (img, label) = generate_scene(cfg, &mut rng);
        images.push(img);
        labels.push(label);
    }
    Ok(Dataset {
        images,
        labels,
        sequence_len: None,
    })
}

/// Ordered frames: `n_seq` streams of `len` frames each. Within a stream the
/// shape stays put while exposure drifts log-linearly between two draws;
/// sensor noise is fresh every frame.
pub fn generate_sequences(cfg: &SceneConfig, n_seq: usize, len: usize) -> Result<Dataset> {
    cfg.validate()?;
    if len == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    let mut images = Vec::with_capacity(n_seq * len);
    let mut labels = Vec::with_capacity(n_seq * len);
    for s in 0..n_seq {
        let mut rng = item_rng(cfg.seed, Split::Sequence, s as u64);
        let layout = SceneLayout::sample(cfg, &mut rng);
        let clean = layout.render(cfg.size);
        let e0 = log_uniform(&mut rng, cfg.exposure).ln();
        let e1 = log_uniform(&mut rng, cfg.exposure).ln();
        let read = uniform(&mut rng, cfg.read_noise);
        let gain = uniform(&mut rng, cfg.noise_gain);
        for t in 0..len {
            let frac = if len > 1 {
                t as f64 / (len - 1) as f64
            } else {
                0.0
            };
            let e = (e0 + (e1 - e0) * frac).exp();
            images.push(capture(&clean, e, read, gain, cfg.bits, &mut rng));
            labels.push(layout.label);
        }
    }
    Ok(Dataset {
        images,
        labels,
        sequence_len: Some(len),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_cfg() -> SceneConfig {
        SceneConfig {
            size: 16,
            exposure: (1.0, 1.0),
            read_noise: (0.0, 0.0),
            noise_gain: (0.0, 0.0),
            ..SceneConfig::default()
        }
    }

    #[test]
    fn clean_render_is_bounded() {
        let cfg = clean_cfg();
        for i in 0..20 {
            let mut rng = item_rng(1, Split::Train, i);
            let (img, label) = generate_scene(&cfg, &mut rng);
            assert!(label < NUM_CLASSES);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(img.data().iter().cloned().fold(0.0, f64::max) <= 1.0);
        }
    }

    #[test]
    fn exposure_scales_mean() {
        let cfg = clean_cfg();
        let mut rng = item_rng(2, Split::Train, 0);
        let layout = SceneLayout::sample(&cfg, &mut rng);
        let clean = layout.render(cfg.size);
        let bright = capture(&clean, 1.0, 0.0, 0.0, 12, &mut rng);
        let dark = capture(&clean, 0.01, 0.0, 0.0, 12, &mut rng);
        let q = 0.5 / 4095.0;
        assert!((dark.mean() - bright.mean() / 100.0).abs() <= q * 1.01);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = SceneConfig::default();
        let a = generate_split(&cfg, Split::Train, 5).unwrap();
        let b = generate_split(&cfg, Split::Train, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_split(&cfg, Split::Test, 5).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn prefix_is_stable_under_longer_generation() {
        let cfg = clean_cfg();
        let a = generate_split(&cfg, Split::Train, 3).unwrap();
        let b = generate_split(&cfg, Split::Train, 7).unwrap();
        assert_eq!(a.images[..], b.images[..3]);
    }

    #[test]
    fn sequences_are_ordered_and_labelled_per_stream() {
        let cfg = SceneConfig {
            size: 12,
            ..SceneConfig::default()
        };
        let d = generate_sequences(&cfg, 3, 4).unwrap();
        assert!(d.is_ordered());
        assert_eq!(d.len(), 12);
        for s in 0..3 {
            assert!(d.labels[s * 4..s * 4 + 4]
                .iter()
                .all(|&l| l == d.labels[s * 4]));
        }
    }

    #[test]
    fn all_classes_occur() {
        let d = generate_split(&clean_cfg(), Split::Train, 60).unwrap();
        for c in 0..NUM_CLASSES {
            assert!(d.labels.contains(&c));
        }
    }

    #[test]
    fn bad_ranges_rejected() {
        let cfg = SceneConfig {
            exposure: (0.5, 0.1),
            ..SceneConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
