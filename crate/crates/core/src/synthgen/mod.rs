//! Synthetic fundus-like dataset with a controllable confound between one
//! sensitive attribute and the referable-DR label.
//!
//! Every image is a dark frame holding a circular retina disc with an optic
//! disc and vessel-like curves. Referable samples carry bright (exudate) or
//! dark (haemorrhage) blobs scaled by `lesion_intensity`. Each attribute in
//! group 1 adds a global, low-frequency signature scaled by
//! `sa_feature_strength`:
//!
//! | attribute   | signature                                         |
//! |-------------|---------------------------------------------------|
//! | `age`       | warm colour tint (red up, blue down)              |
//! | `sex`       | radial vignetting                                 |
//! | `education` | low-frequency sinusoidal texture                  |
//! | `insurance` | global brightness gain                            |
//! | `obesity`   | gamma darkening of mid-tones                      |
//!
//! Only the primary attribute is jointly sampled with the DR label through a
//! 2x2 contingency table; the others are independent Bernoulli draws.

mod augment;
mod io;
mod split;

pub use augment::{augment, AugmentParams, AugmentRanges};
pub use io::{load_dataset, save_dataset, IMAGES_MAGIC, META_HEADER};
pub use split::{split_dataset, SplitAssignment, SplitFractions, SplitName};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seeds;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(
        "confound infeasible: rho={rho} with DR prevalence {prevalence} and {sa} marginal {marginal} \
         (feasible rho range [{min_rho:.4}, {max_rho:.4}])"
    )]
    Infeasible {
        rho: f64,
        prevalence: f64,
        sa: Sa,
        marginal: f64,
        min_rho: f64,
        max_rho: f64,
    },
    #[error("split: {0}")]
    Split(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated tensor block: expected {expected} bytes of pixels, found {found}")]
    TruncatedTensor { expected: usize, found: usize },
    #[error("metadata has {meta} rows but the tensor block holds {tensors} images")]
    CountMismatch { meta: usize, tensors: usize },
    #[error("metadata row {row}: {msg}")]
    Metadata { row: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The five sensitive attributes, in canonical column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sa {
    Age,
    Sex,
    Education,
    Insurance,
    Obesity,
}

impl Sa {
    pub const ALL: [Sa; 5] = [Sa::Age, Sa::Sex, Sa::Education, Sa::Insurance, Sa::Obesity];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Sa::Age => "age",
            Sa::Sex => "sex",
            Sa::Education => "education",
            Sa::Insurance => "insurance",
            Sa::Obesity => "obesity",
        }
    }

    /// Human-readable labels of group 0 and group 1.
    pub fn group_labels(self) -> [&'static str; 2] {
        match self {
            Sa::Age => ["<=50", ">50"],
            Sa::Sex => ["female", "male"],
            Sa::Education => ["literate", "illiterate"],
            Sa::Insurance => ["no insurance", "insurance"],
            Sa::Obesity => ["no obesity", "obesity"],
        }
    }
}

impl fmt::Display for Sa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sa {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Sa::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown sensitive attribute `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Target Pearson correlation between the primary attribute and DR.
    pub confound_rho: f64,
    pub dr_prevalence: f64,
    /// Group-1 rate per attribute, indexed by [`Sa::index`].
    pub sa_marginals: [f64; 5],
    pub primary_sa: Sa,
    pub lesion_intensity: f64,
    pub sa_feature_strength: f64,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 500,
            images_per_patient: 4,
            image_size: 32,
            channels: 3,
            confound_rho: 0.0,
            dr_prevalence: 0.18,
            sa_marginals: [0.2, 0.35, 0.5, 0.1, 0.1],
            primary_sa: Sa::Age,
            lesion_intensity: 1.5,
            sa_feature_strength: 1.0,
            pixel_noise: 0.02,
            seed: 1,
        }
    }
}

/// Feasible Pearson-correlation range for two Bernoulli variables with the
/// given rates (Fréchet bounds on the joint cell).
pub fn rho_bounds(p: f64, q: f64) -> (f64, f64) {
    let sd = (p * (1.0 - p) * q * (1.0 - q)).sqrt();
    let lo = ((p + q - 1.0).max(0.0) - p * q) / sd;
    let hi = (p.min(q) - p * q) / sd;
    (lo, hi)
}

/// Joint distribution of `(dr, primary)` as `[p00, p01, p10, p11]`,
/// index = `2 * dr + primary`.
pub fn contingency(prevalence: f64, marginal: f64, rho: f64) -> Option<[f64; 4]> {
    let (p, q) = (prevalence, marginal);
    let p11 = p * q + rho * (p * (1.0 - p) * q * (1.0 - q)).sqrt();
    let cells = [1.0 - p - q + p11, q - p11, p - p11, p11];
    const TOL: f64 = 1e-12;
    if cells.iter().all(|&c| c >= -TOL) {
        Some(cells.map(|c| c.max(0.0)))
    } else {
        None
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<[f64; 4], SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_patients == 0 || self.images_per_patient == 0 {
            return bad("n_patients and images_per_patient must be positive".into());
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return bad(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            ));
        }
        if self.channels != 3 {
            return bad("only 3-channel images are generated".into());
        }
        if !(-1.0..=1.0).contains(&self.confound_rho) {
            return bad(format!("confound_rho {} outside [-1, 1]", self.confound_rho));
        }
        if !(self.dr_prevalence > 0.0 && self.dr_prevalence < 1.0) {
            return bad(format!("dr_prevalence {} outside (0, 1)", self.dr_prevalence));
        }
        for sa in Sa::ALL {
            let m = self.sa_marginals[sa.index()];
            if !(m > 0.0 && m < 1.0) {
                return bad(format!("{sa} marginal {m} outside (0, 1)"));
            }
        }
        for (name, v) in [
            ("lesion_intensity", self.lesion_intensity),
            ("sa_feature_strength", self.sa_feature_strength),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        let marginal = self.sa_marginals[self.primary_sa.index()];
        contingency(self.dr_prevalence, marginal, self.confound_rho).ok_or_else(|| {
            let (min_rho, max_rho) = rho_bounds(self.dr_prevalence, marginal);
            SynthError::Infeasible {
                rho: self.confound_rho,
                prevalence: self.dr_prevalence,
                sa: self.primary_sa,
                marginal,
                min_rho,
                max_rho,
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[channels, size, size]` row-major, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub dr_label: u8,
    /// Group id per attribute, indexed by [`Sa::index`].
    pub sa: [u8; 5],
    pub patient_id: String,
    pub image_id: String,
}

impl Sample {
    pub fn sa_group(&self, sa: Sa) -> u8 {
        self.sa[sa.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Distinct patient ids in first-appearance order.
    pub fn patients(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.patient_id.as_str()))
            .map(|s| s.patient_id.as_str())
            .collect()
    }
}

/// Pearson correlation of two binary indicator sequences.
pub fn binary_correlation(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

struct PatientDraw {
    dr: u8,
    sa: [u8; 5],
    tint_jitter: [f64; 3],
    center: (f64, f64),
    optic_side: f64,
    vessels: Vec<(f64, f64, f64, f64)>,
}

fn draw_patient(cfg: &GeneratorConfig, cells: &[f64; 4], rng: &mut ChaCha8Rng) -> PatientDraw {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut cell = 3;
    for (i, &c) in cells.iter().enumerate() {
        cum += c;
        if u < cum {
            cell = i;
            break;
        }
    }
    let dr = (cell / 2) as u8;
    let mut sa = [0u8; 5];
    for a in Sa::ALL {
        sa[a.index()] = if a == cfg.primary_sa {
            (cell % 2) as u8
        } else {
            u8::from(rng.random::<f64>() < cfg.sa_marginals[a.index()])
        };
    }
    let tint_jitter = [
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.02..0.02),
    ];
    let center = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let optic_side = if rng.random::<bool>() { 0.38 } else { -0.38 };
    let vessels = (0..4)
        .map(|k| {
            let base = k as f64 * std::f64::consts::FRAC_PI_2 + std::f64::consts::FRAC_PI_4;
            (
                base + rng.random_range(-0.4..0.4),
                rng.random_range(0.05..0.15),
                rng.random_range(3.0..6.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    PatientDraw {
        dr,
        sa,
        tint_jitter,
        center,
        optic_side,
        vessels,
    }
}

struct Lesion {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
    bright: bool,
}

fn render_image(cfg: &GeneratorConfig, pat: &PatientDraw, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = cfg.image_size;
    let strength = cfg.sa_feature_strength;
    let shift = (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
    let (cx, cy) = (pat.center.0 + shift.0, pat.center.1 + shift.1);
    let radius = 0.9;
    let optic = (cx + pat.optic_side, cy);

    let lesions: Vec<Lesion> = if pat.dr == 1 {
        let count = rng.random_range(2..=5);
        (0..count)
            .map(|_| {
                let r = 0.7 * rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                Lesion {
                    x: cx + r * t.cos(),
                    y: cy + r * t.sin(),
                    sigma: rng.random_range(0.04..0.08),
                    amp: cfg.lesion_intensity * rng.random_range(0.5..1.0),
                    bright: rng.random::<f64>() < 0.6,
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    // Vessel centre lines sampled as polylines from the optic disc outwards.
    let vessel_pts: Vec<(f64, f64)> = pat
        .vessels
        .iter()
        .flat_map(|&(angle, amp, freq, phase)| {
            (0..24).map(move |i| {
                let t = i as f64 / 23.0 * 1.1;
                let along = t;
                let across = amp * (freq * t + phase).sin();
                let (ca, sa) = (angle.cos(), angle.sin());
                (optic.0 + along * ca - across * sa, optic.1 + along * sa + across * ca)
            })
        })
        .collect();

    let noise = Normal::new(0.0, cfg.pixel_noise.max(1e-12)).expect("valid sigma");
    let sa_on = |a: Sa| pat.sa[a.index()] == 1;
    let mut out = vec![0f32; 3 * s * s];
    for py in 0..s {
        for px in 0..s {
            let u = (px as f64 + 0.5) / s as f64 * 2.0 - 1.0;
            let v = (py as f64 + 0.5) / s as f64 * 2.0 - 1.0;
            let (dx, dy) = (u - cx, v - cy);
            let r = (dx * dx + dy * dy).sqrt() / radius;
            let mask = 1.0 / (1.0 + ((r - 1.0) * 40.0).exp());
            let falloff = 1.0 - 0.35 * r.min(1.0).powi(2);
            let mut rgb = [
                (0.62 + pat.tint_jitter[0]) * falloff,
                (0.30 + pat.tint_jitter[1]) * falloff,
                (0.14 + pat.tint_jitter[2]) * falloff,
            ];

            let od2 = (u - optic.0).powi(2) + (v - optic.1).powi(2);
            let od = (-od2 / (2.0 * 0.08f64.powi(2))).exp();
            rgb[0] += 0.25 * od;
            rgb[1] += 0.22 * od;
            rgb[2] += 0.12 * od;

            let vd2 = vessel_pts
                .iter()
                .map(|&(x, y)| (u - x).powi(2) + (v - y).powi(2))
                .fold(f64::INFINITY, f64::min);
            let vessel = (-vd2 / (2.0 * 0.035f64.powi(2))).exp() * (1.0 - od);
            rgb[0] *= 1.0 - 0.25 * vessel;
            rgb[1] *= 1.0 - 0.45 * vessel;
            rgb[2] *= 1.0 - 0.45 * vessel;

            for l in &lesions {
                let w = (-((u - l.x).powi(2) + (v - l.y).powi(2)) / (2.0 * l.sigma * l.sigma)).exp() * l.amp;
                if l.bright {
                    rgb[0] += 0.9 * w;
                    rgb[1] += 0.8 * w;
                    rgb[2] += 0.3 * w;
                } else {
                    rgb[0] -= 0.5 * w;
                    rgb[1] -= 0.6 * w;
                    rgb[2] -= 0.3 * w;
                }
            }

            if sa_on(Sa::Age) {
                rgb[0] += 0.07 * strength;
                rgb[1] -= 0.01 * strength;
                rgb[2] -= 0.05 * strength;
            }
            if sa_on(Sa::Sex) {
                let g = 1.0 - 0.3 * strength * r.min(1.0).powi(2);
                rgb.iter_mut().for_each(|c| *c *= g);
            }
            if sa_on(Sa::Education) {
                let tex =
                    0.04 * strength * (3.0 * std::f64::consts::PI * u).sin() * (3.0 * std::f64::consts::PI * v).sin();
                rgb.iter_mut().for_each(|c| *c += tex);
            }
            if sa_on(Sa::Insurance) {
                rgb.iter_mut().for_each(|c| *c *= 1.0 + 0.12 * strength);
            }
            if sa_on(Sa::Obesity) {
                let gamma = 1.0 + 0.3 * strength;
                rgb.iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0).powf(gamma));
            }

            for (ch, &c) in rgb.iter().enumerate() {
                let val = 0.03 + (c - 0.03) * mask + noise.sample(rng);
                out[ch * s * s + py * s + px] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

fn generate_patient(cfg: &GeneratorConfig, cells: &[f64; 4], index: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[seeds::tag::PATIENT, index as u64]));
    let pat = draw_patient(cfg, cells, &mut rng);
    let patient_id = format!("P{index:05}");
    (0..cfg.images_per_patient)
        .map(|k| Sample {
            image: render_image(cfg, &pat, &mut rng),
            dr_label: pat.dr,
            sa: pat.sa,
            image_id: format!("{patient_id}_I{k}"),
            patient_id: patient_id.clone(),
        })
        .collect()
}

/// Generate `n_patients * images_per_patient` samples.
///
/// Every patient draws from its own stream derived from the master seed, so
/// the output is identical regardless of how many threads run the work.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset, SynthError> {
    let cells = cfg.validate()?;
    let samples = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(cfg, &cells, i))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(Dataset {
        channels: cfg.channels,
        height: cfg.image_size,
        width: cfg.image_size,
        samples,
    })
}

/// Sequential reference path for [`generate_dataset`].
pub fn generate_dataset_sequential(cfg: &GeneratorConfig) -> Result<Dataset, SynthError> {
    let cells = cfg.validate()?;
    let samples = (0..cfg.n_patients)
        .flat_map(|i| generate_patient(cfg, &cells, i))
        .collect();
    Ok(Dataset {
        channels: cfg.channels,
        height: cfg.image_size,
        width: cfg.image_size,
        samples,
    })
}
