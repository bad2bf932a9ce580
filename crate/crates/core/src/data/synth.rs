//! Synthetic multi-domain "brain slice" suite.
//!
//! Each base sample is a union of one to three ellipses (the foreground
//! class) with a smooth internal texture, surrounded by a thin bright rim.
//! Domains differ only in how intensities are rendered; masks are shared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::dataset::{Dataset, Sample, Split};
use super::preprocess::min_max_scale;

/// Intensity transform of one acquisition domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub domain_id: String,
    /// Contrast exponent applied to the clean image.
    pub gamma: f64,
    /// Multiplier followed by saturation at 1.
    pub intensity_scale: f64,
    pub noise_std: f64,
    /// Amplitude of a smooth multiplicative field `1 + a·cos(...)`.
    pub bias_field_strength: f64,
    /// Gaussian blur in pixels.
    pub blur_sigma: f64,
}

impl DomainSpec {
    pub fn new(
        domain_id: &str,
        gamma: f64,
        intensity_scale: f64,
        noise_std: f64,
        bias_field_strength: f64,
        blur_sigma: f64,
    ) -> Self {
        Self {
            domain_id: domain_id.to_string(),
            gamma,
            intensity_scale,
            noise_std,
            bias_field_strength,
            blur_sigma,
        }
    }

    pub fn source() -> Self {
        Self::new("source", 1.0, 1.0, 0.02, 0.0, 0.0)
    }

    /// The five target presets, mildest first. Version 1.
    pub fn presets() -> Vec<Self> {
        vec![
            Self::new("t1-mild", 0.8, 1.0, 0.03, 0.10, 0.3),
            Self::new("t2-low", 1.4, 1.1, 0.04, 0.20, 0.5),
            Self::new("t3-moderate", 0.55, 1.3, 0.05, 0.25, 0.6),
            Self::new("t4-high", 2.0, 1.0, 0.07, 0.35, 0.8),
            Self::new("t5-severe", 2.8, 1.4, 0.09, 0.45, 1.0),
        ]
    }

    /// Source followed by the presets.
    pub fn suite() -> Vec<Self> {
        std::iter::once(Self::source()).chain(Self::presets()).collect()
    }

    pub fn by_id(id: &str) -> Option<Self> {
        Self::suite().into_iter().find(|d| d.domain_id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.intensity_scale > 0.0
            && self.noise_std >= 0.0
            && (0.0..1.0).contains(&self.bias_field_strength)
            && self.blur_sigma >= 0.0
            && [self.gamma, self.intensity_scale, self.noise_std, self.blur_sigma]
                .iter()
                .all(|v| v.is_finite());
        if !ok || self.domain_id.is_empty() || self.domain_id.contains(['/', '\\', ' ']) {
            return Err(Error::InvalidArgument(format!("invalid domain spec {self:?}")));
        }
        Ok(())
    }

    /// `key=value` form stored in dataset manifests.
    pub fn describe(&self) -> String {
        format!(
            "gamma={} intensity_scale={} noise_std={} bias_field_strength={} blur_sigma={}",
            self.gamma, self.intensity_scale, self.noise_std, self.bias_field_strength, self.blur_sigma
        )
    }

    pub fn parse(domain_id: &str, s: &str) -> Result<Self> {
        let mut d = Self::new(domain_id, 1.0, 1.0, 0.0, 0.0, 0.0);
        for pair in s.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad domain field '{pair}'")))?;
            let v: f64 = v.parse().map_err(|_| Error::Format(format!("bad domain value '{pair}'")))?;
            match k {
                "gamma" => d.gamma = v,
                "intensity_scale" => d.intensity_scale = v,
                "noise_std" => d.noise_std = v,
                "bias_field_strength" => d.bias_field_strength = v,
                "blur_sigma" => d.blur_sigma = v,
                _ => return Err(Error::Format(format!("unknown domain field '{k}'"))),
            }
        }
        d.validate()?;
        Ok(d)
    }
}

/// Parameters of a generated suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    pub seed: u64,
    pub n_train: usize,
    /// Size of the test split; validation has the same size.
    pub n_test: usize,
    pub image_size: usize,
    pub domains: Vec<DomainSpec>,
}

impl SuiteSpec {
    pub fn new(seed: u64, n_train: usize, n_test: usize, image_size: usize) -> Self {
        Self {
            seed,
            n_train,
            n_test,
            image_size,
            domains: DomainSpec::suite(),
        }
    }

    pub fn total(&self) -> usize {
        self.n_train + 2 * self.n_test
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.n_train {
            Split::Train
        } else if index < self.n_train + self.n_test {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Domain-independent geometry and clean intensities of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSample {
    pub size: usize,
    pub clean: Vec<f64>,
    pub mask: Vec<u32>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalised radius: < 1 inside.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

pub fn base_sample(seed: u64, index: usize, size: usize) -> BaseSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index as u64 + 1));
    let n = rng.random_range(1..=3);
    let ellipses: Vec<Ellipse> = (0..n)
        .map(|_| {
            let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy: rng.random_range(-0.15..0.15),
                cx: rng.random_range(-0.15..0.15),
                a: rng.random_range(0.3..0.55),
                b: rng.random_range(0.25..0.5),
                cos: t.cos(),
                sin: t.sin(),
            }
        })
        .collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(2.0..6.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let base_level = rng.random_range(0.45..0.6);
    let mut clean = vec![0.0; size * size];
    let mut mask = vec![0u32; size * size];
    for py in 0..size {
        for px in 0..size {
            let y = (py as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let x = (px as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let r = ellipses.iter().map(|e| e.radius(y, x)).fold(f64::INFINITY, f64::min);
            let i = py * size + px;
            if r < 1.0 {
                mask[i] = 1;
                let tex: f64 = waves
                    .iter()
                    .map(|(f, ang, ph, amp)| amp * (f * (x * ang.cos() + y * ang.sin()) + ph).sin())
                    .sum::<f64>()
                    / 3.0;
                clean[i] = (base_level + 0.18 * tex).clamp(0.05, 1.0);
            } else if (1.12..1.3).contains(&r) {
                clean[i] = 0.95;
            }
        }
    }
    BaseSample { size, clean, mask }
}

fn gaussian_blur(img: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
    let clamp = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * img[y * size + clamp(x as isize + j as isize - radius)])
                .sum();
        }
    }
    for y in 0..size {
        for x in 0..size {
            img[y * size + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[clamp(y as isize + j as isize - radius) * size + x])
                .sum();
        }
    }
}

/// Renders `base` under `spec`; the result is min-max scaled to `[0, 1]`.
/// `stream` seeds the domain-specific randomness (noise and field).
pub fn render_domain(base: &BaseSample, spec: &DomainSpec, stream: u64) -> Vec<f32> {
    let size = base.size;
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let freq: f64 = rng.random_range(1.0..2.0);
    let mut img: Vec<f64> = base.clean.iter().map(|&v| v.powf(spec.gamma)).collect();
    for py in 0..size {
        for px in 0..size {
            let y = (py as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let x = (px as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let field = 1.0 + spec.bias_field_strength * (freq * (x * angle.cos() + y * angle.sin()) + phase).cos();
            let v = &mut img[py * size + px];
            *v = (*v * field * spec.intensity_scale).min(1.0);
        }
    }
    gaussian_blur(&mut img, size, spec.blur_sigma);
    if spec.noise_std > 0.0 {
        for v in img.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v + spec.noise_std * z).max(0.0);
        }
    }
    let mut out: Vec<f32> = img.iter().map(|&v| v as f32).collect();
    min_max_scale(&mut out);
    out
}

fn domain_stream(seed: u64, domain_id: &str, index: usize) -> u64 {
    let h = domain_id
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3));
    mix(mix(seed, h), index as u64)
}

/// Generates every domain of `spec`. Sample ids, splits and masks are
/// shared across domains.
pub fn generate_domain_suite(spec: &SuiteSpec) -> Result<Vec<Dataset>> {
    if spec.n_train < 1 || spec.n_test < 1 {
        return Err(Error::InvalidArgument("n_train and n_test must be >= 1".into()));
    }
    if spec.image_size < 4 {
        return Err(Error::InvalidArgument("image size must be >= 4".into()));
    }
    if spec.domains.is_empty() {
        return Err(Error::InvalidArgument("no domains".into()));
    }
    for d in &spec.domains {
        d.validate()?;
    }
    let bases: Vec<BaseSample> = (0..spec.total()).map(|i| base_sample(spec.seed, i, spec.image_size)).collect();
    let mut out = Vec::with_capacity(spec.domains.len());
    for d in &spec.domains {
        let samples = bases
            .iter()
            .enumerate()
            .map(|(i, b)| Sample {
                id: format!("s{i:04}"),
                split: spec.split_of(i),
                image: render_domain(b, d, domain_stream(spec.seed, &d.domain_id, i)),
                mask: b.mask.clone(),
            })
            .collect();
        out.push(Dataset {
            domain: d.clone(),
            size: spec.image_size,
            samples,
        });
    }
    Ok(out)
}
