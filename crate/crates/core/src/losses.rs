//! Training objectives: focal loss, the two-head classification loss,
//! SSIM/PSNR realism loss, the latent-perturbation disentanglement loss,
//! and their weighted total.
//!
//! Each objective exists in two forms: a graph builder (`*_term`) used for
//! training and gradient checks, and a plain function returning `f64` that
//! evaluates the same graph without keeping it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::gradcore::network::{LatentVars, MedLatent, ModelParams, Network, SensitLatent};
use crate::gradcore::{GradError, Graph, Scalar, Tensor, Var};

/// Floor applied inside every logarithm of a probability.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("batch size mismatch: {0} vs {1}")]
    BatchMismatch(usize, usize),
    #[error("class count mismatch: {0}")]
    ClassMismatch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("SSIM window {window} is larger than the {h}x{w} image")]
    WindowTooLarge { window: usize, h: usize, w: usize },
    #[error("non-finite value after {stage} in the disentanglement loss")]
    NonFinite { stage: &'static str },
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] GradError),
}

/// Which terms of the perturbation penalty are summed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DisentForm {
    /// Change of both latents after perturbing one of them.
    #[default]
    Literal,
    /// Only the change of the latent that was not perturbed.
    CrossOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_med: f64,
    pub lambda_sensit: f64,
    pub lambda_r: f64,
    pub lambda_d: f64,
    pub alpha_psnr: f64,
    pub focal_gamma: f64,
    /// Per-class weights for the focal loss; filled from the training split when empty.
    pub class_weights: Vec<f64>,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub disent_form: DisentForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_med: 1.0,
            lambda_sensit: 1.0,
            lambda_r: 1.0,
            lambda_d: 5.0,
            alpha_psnr: 48.0,
            focal_gamma: 2.0,
            class_weights: Vec::new(),
            ssim_window: 7,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            disent_form: DisentForm::Literal,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let nonneg = [
            ("lambda_med", self.lambda_med),
            ("lambda_sensit", self.lambda_sensit),
            ("lambda_r", self.lambda_r),
            ("lambda_d", self.lambda_d),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.alpha_psnr.is_finite() && self.alpha_psnr > 0.0) {
            return Err(LossError::Config("alpha_psnr must be > 0".into()));
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(LossError::Config("class weights must be > 0".into()));
        }
        if self.ssim_window == 0 {
            return Err(LossError::Config("ssim_window must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentTarget {
    Med,
    Sensit,
}

/// Gaussian perturbation applied to one latent half.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub noise_sigma: f64,
    pub target: LatentTarget,
}

impl PerturbationSpec {
    pub fn new(noise_sigma: f64, target: LatentTarget) -> Result<Self, LossError> {
        if !(noise_sigma.is_finite() && noise_sigma > 0.0) {
            return Err(LossError::Config(format!(
                "noise_sigma must be finite and positive, got {noise_sigma}"
            )));
        }
        Ok(Self { noise_sigma, target })
    }
}

fn one_hot<T: Scalar>(targets: &[usize], classes: usize) -> Result<Tensor<T>, LossError> {
    let mut data = vec![T::zero(); targets.len() * classes];
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(LossError::ClassMismatch(format!("target {t} with {classes} classes")));
        }
        data[i * classes + t] = T::one();
    }
    Ok(Tensor::new(vec![targets.len(), classes], data))
}

fn prob_shape<T: Scalar>(g: &Graph<T>, probs: Var, targets: &[usize]) -> Result<usize, LossError> {
    let s = g.shape(probs);
    if s.len() != 2 {
        return Err(LossError::Shape(format!("probabilities must be [n, k], got {s:?}")));
    }
    if s[0] != targets.len() {
        return Err(LossError::BatchMismatch(s[0], targets.len()));
    }
    Ok(s[1])
}

/// Probability of the true class, `[n]`.
fn true_class_prob<T: Scalar>(g: &mut Graph<T>, probs: Var, targets: &[usize]) -> Result<Var, LossError> {
    let k = prob_shape(g, probs, targets)?;
    let picked = g.mul_const(probs, one_hot(targets, k)?);
    Ok(g.sum_rows(picked))
}

/// Mean over the batch of `-w_t (1 - p_t)^gamma ln p_t`.
pub fn focal_term<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    targets: &[usize],
    class_weights: &[f64],
    gamma: f64,
) -> Result<Var, LossError> {
    let k = prob_shape(g, probs, targets)?;
    if class_weights.len() != k {
        return Err(LossError::ClassMismatch(format!(
            "{} class weights for {k} classes",
            class_weights.len()
        )));
    }
    let p_t = true_class_prob(g, probs, targets)?;
    let complement = g.scale(p_t, -T::one());
    let complement = g.offset(complement, T::one());
    let modulator = g.pow_const(complement, T::of(gamma));
    let log_p = g.log_floor(p_t, T::of(LOG_FLOOR));
    let term = g.mul(modulator, log_p);
    let w_t = Tensor::new(
        vec![targets.len()],
        targets.iter().map(|&t| T::of(class_weights[t])).collect(),
    );
    let weighted = g.mul_const(term, w_t);
    let m = g.mean(weighted);
    Ok(g.scale(m, -T::one()))
}

/// Batch mean of `-ln p_t`.
pub fn cross_entropy_term<T: Scalar>(g: &mut Graph<T>, probs: Var, targets: &[usize]) -> Result<Var, LossError> {
    let p_t = true_class_prob(g, probs, targets)?;
    let log_p = g.log_floor(p_t, T::of(LOG_FLOOR));
    let m = g.mean(log_p);
    Ok(g.scale(m, -T::one()))
}

/// `lambda_med * CE(p_med) + lambda_sensit * CE(p_sensit)`, each batch-averaged.
pub fn classification_term<T: Scalar>(
    g: &mut Graph<T>,
    p_med: Var,
    y_med: &[usize],
    p_sensit: Var,
    y_sensit: &[usize],
    weights: &LossWeights,
) -> Result<Var, LossError> {
    let med = cross_entropy_term(g, p_med, y_med)?;
    let sen = cross_entropy_term(g, p_sensit, y_sensit)?;
    let med = g.scale(med, T::of(weights.lambda_med));
    let sen = g.scale(sen, T::of(weights.lambda_sensit));
    Ok(g.add(med, sen))
}

fn check_pair<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<(), LossError> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    if g.shape(a).len() != 4 {
        return Err(LossError::Shape(format!("expected [n, c, h, w], got {:?}", g.shape(a))));
    }
    Ok(())
}

/// Per-sample SSIM `[n]`: mean of the local SSIM map over every window
/// position and channel, with uniform `window x window` statistics.
pub fn ssim_term<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    window: usize,
    c1: f64,
    c2: f64,
) -> Result<Var, LossError> {
    check_pair(g, a, b)?;
    let s = g.shape(a);
    let (h, w) = (s[2], s[3]);
    if window > h || window > w || window == 0 {
        return Err(LossError::WindowTooLarge { window, h, w });
    }
    let (c1, c2) = (T::of(c1), T::of(c2));
    let two = T::of(2.0);
    let mu_a = g.box_filter(a, window);
    let mu_b = g.box_filter(b, window);
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let e_aa = g.box_filter(aa, window);
    let e_bb = g.box_filter(bb, window);
    let e_ab = g.box_filter(ab, window);
    let mu_a2 = g.square(mu_a);
    let mu_b2 = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_a2);
    let var_b = g.sub(e_bb, mu_b2);
    let cov = g.sub(e_ab, mu_ab);

    let lum_num = g.scale(mu_ab, two);
    let lum_num = g.offset(lum_num, c1);
    let cs_num = g.scale(cov, two);
    let cs_num = g.offset(cs_num, c2);
    let num = g.mul(lum_num, cs_num);

    let lum_den = g.add(mu_a2, mu_b2);
    let lum_den = g.offset(lum_den, c1);
    let cs_den = g.add(var_a, var_b);
    let cs_den = g.offset(cs_den, c2);
    let den = g.mul(lum_den, cs_den);

    let map = g.div(num, den);
    Ok(g.mean_rows(map))
}

/// Per-sample PSNR `[n]` in dB, capped at `cap`.
pub fn psnr_term<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, max_value: f64, cap: f64) -> Result<Var, LossError> {
    check_pair(g, a, b)?;
    let diff = g.sub(a, b);
    let sq = g.square(diff);
    let mse = g.mean_rows(sq);
    Ok(g.psnr_capped(mse, T::of(max_value), T::of(cap)))
}

/// Batch mean of `(1 - SSIM) + (1 - PSNR / alpha)`, PSNR capped at alpha.
pub fn realism_term<T: Scalar>(
    g: &mut Graph<T>,
    original: Var,
    reconstruction: Var,
    weights: &LossWeights,
) -> Result<Var, LossError> {
    let ssim = ssim_term(
        g,
        original,
        reconstruction,
        weights.ssim_window,
        weights.ssim_c1,
        weights.ssim_c2,
    )?;
    let psnr = psnr_term(g, original, reconstruction, 1.0, weights.alpha_psnr)?;
    let ssim_part = g.scale(ssim, -T::one());
    let ssim_part = g.offset(ssim_part, T::one());
    let psnr_part = g.scale(psnr, T::of(-1.0 / weights.alpha_psnr));
    let psnr_part = g.offset(psnr_part, T::one());
    let per_sample = g.add(ssim_part, psnr_part);
    Ok(g.mean(per_sample))
}

/// Standard-normal draws scaled by each spec's sigma, one `[n, d]` block per
/// spec in order, row-major.
pub fn sample_noise<T: Scalar>(specs: &[PerturbationSpec], n: usize, d: usize, rng_seed: u64) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    specs
        .iter()
        .map(|s| {
            let data = (0..n * d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::of(z * s.noise_sigma)
                })
                .collect();
            Tensor::new(vec![n, d], data)
        })
        .collect()
}

fn ensure_finite<T: Scalar>(g: &Graph<T>, v: Var, stage: &'static str) -> Result<(), LossError> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(LossError::NonFinite { stage })
    }
}

/// Perturbation-consistency penalty.
///
/// For each spec: add the noise block to the targeted latent half, decode,
/// re-encode, and sum the squared change of the re-encoded latents against
/// the original encoding over latent coordinates. The per-sample sums over
/// specs are averaged over the batch. Gradients flow through every path,
/// including the original encoding.
pub fn disentanglement_term<T: Scalar>(
    g: &mut Graph<T>,
    net: &Network<'_>,
    latents: &LatentVars,
    specs: &[PerturbationSpec],
    noise: &[Tensor<T>],
    form: DisentForm,
) -> Result<Var, LossError> {
    let has = |t| specs.iter().any(|s| s.target == t);
    if specs.len() != 2 || !has(LatentTarget::Med) || !has(LatentTarget::Sensit) {
        return Err(LossError::Config(
            "need exactly one perturbation spec per latent half".into(),
        ));
    }
    if noise.len() != specs.len() {
        return Err(LossError::Config("one noise block per spec required".into()));
    }
    let d = g.shape(latents.med.0)[1];
    let mut acc: Option<Var> = None;
    for (spec, eps) in specs.iter().zip(noise) {
        let (med, sen) = match spec.target {
            LatentTarget::Med => {
                let zm = g.add_const(latents.med.0, eps);
                ensure_finite(g, zm, "noise")?;
                (zm, latents.sensit.0)
            }
            LatentTarget::Sensit => {
                let zs = g.add_const(latents.sensit.0, eps);
                ensure_finite(g, zs, "noise")?;
                (latents.med.0, zs)
            }
        };
        let altered = net.decode(g, MedLatent(med), SensitLatent(sen))?;
        ensure_finite(g, altered, "decode")?;
        let re = net.encode(g, altered)?;
        ensure_finite(g, re.joint, "re-encode")?;
        let per_sample = match form {
            DisentForm::Literal => {
                let diff = g.sub(latents.joint, re.joint);
                let sq = g.square(diff);
                g.sum_rows(sq)
            }
            DisentForm::CrossOnly => {
                let (orig, new) = match spec.target {
                    LatentTarget::Med => (latents.sensit.0, re.sensit.0),
                    LatentTarget::Sensit => (latents.med.0, re.med.0),
                };
                debug_assert_eq!(g.shape(orig)[1], d);
                let diff = g.sub(orig, new);
                let sq = g.square(diff);
                g.sum_rows(sq)
            }
        };
        acc = Some(match acc {
            None => per_sample,
            Some(prev) => g.add(prev, per_sample),
        });
    }
    let total = acc.expect("two specs");
    Ok(g.mean(total))
}

/// `classifier + lambda_r * realism + lambda_d * disent`.
pub fn total_term<T: Scalar>(
    g: &mut Graph<T>,
    classifier: Var,
    realism: Var,
    disent: Var,
    weights: &LossWeights,
) -> Var {
    let r = g.scale(realism, T::of(weights.lambda_r));
    let d = g.scale(disent, T::of(weights.lambda_d));
    let cr = g.add(classifier, r);
    g.add(cr, d)
}

// ---------------------------------------------------------------------------
// Plain evaluation

fn prob_matrix(probs: &[Vec<f64>]) -> Result<Tensor<f64>, LossError> {
    let k = probs.first().map_or(0, Vec::len);
    if probs.iter().any(|p| p.len() != k) {
        return Err(LossError::ClassMismatch("ragged probability rows".into()));
    }
    Ok(Tensor::new(vec![probs.len(), k], probs.concat()))
}

pub fn focal_loss(probs: &[Vec<f64>], targets: &[usize], class_weights: &[f64], gamma: f64) -> Result<f64, LossError> {
    if probs.len() != targets.len() {
        return Err(LossError::BatchMismatch(probs.len(), targets.len()));
    }
    let mut g = Graph::new();
    let p = g.leaf(prob_matrix(probs)?);
    let l = focal_term(&mut g, p, targets, class_weights, gamma)?;
    Ok(g.scalar(l))
}

pub fn classification_loss(
    p_med: &[Vec<f64>],
    y_med: &[usize],
    p_sensit: &[Vec<f64>],
    y_sensit: &[usize],
    weights: &LossWeights,
) -> Result<f64, LossError> {
    if p_med.len() != y_med.len() {
        return Err(LossError::BatchMismatch(p_med.len(), y_med.len()));
    }
    if p_sensit.len() != y_sensit.len() {
        return Err(LossError::BatchMismatch(p_sensit.len(), y_sensit.len()));
    }
    let mut g = Graph::new();
    let pm = g.leaf(prob_matrix(p_med)?);
    let ps = g.leaf(prob_matrix(p_sensit)?);
    let l = classification_term(&mut g, pm, y_med, ps, y_sensit, weights)?;
    Ok(g.scalar(l))
}

/// Accepts `[c, h, w]` or `[n, c, h, w]`.
fn as_batch(t: &Tensor<f64>) -> Result<Tensor<f64>, LossError> {
    match t.shape().len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            Ok(t.clone().reshaped(s))
        }
        4 => Ok(t.clone()),
        _ => Err(LossError::Shape(format!(
            "expected an image or image batch, got {:?}",
            t.shape()
        ))),
    }
}

/// Mean SSIM over the batch.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, window: usize, c1: f64, c2: f64) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let va = g.leaf(as_batch(a)?);
    let vb = g.leaf(as_batch(b)?);
    let s = ssim_term(&mut g, va, vb, window, c1, c2)?;
    let m = g.mean(s);
    Ok(g.scalar(m))
}

/// Mean per-image PSNR over the batch, each capped at `cap`.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, max_value: f64, cap: f64) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let va = g.leaf(as_batch(a)?);
    let vb = g.leaf(as_batch(b)?);
    let s = psnr_term(&mut g, va, vb, max_value, cap)?;
    let m = g.mean(s);
    Ok(g.scalar(m))
}

pub fn realism_loss(
    original: &Tensor<f64>,
    reconstruction: &Tensor<f64>,
    weights: &LossWeights,
) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let a = g.leaf(as_batch(original)?);
    let b = g.leaf(as_batch(reconstruction)?);
    let l = realism_term(&mut g, a, b, weights)?;
    Ok(g.scalar(l))
}

/// Encode `images`, perturb with noise drawn from `rng_seed`, and evaluate
/// the disentanglement penalty.
pub fn disentanglement_loss(
    params: &ModelParams<f64>,
    images: &Tensor<f64>,
    specs: &[PerturbationSpec],
    rng_seed: u64,
    form: DisentForm,
) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let net = Network::new(&params.arch, &bound);
    let x = g.leaf(images.clone());
    let lat = net.encode(&mut g, x)?;
    let noise = sample_noise(specs, images.rows(), params.arch.latent_dim, rng_seed);
    let l = disentanglement_term(&mut g, &net, &lat, specs, &noise, form)?;
    Ok(g.scalar(l))
}

/// Component values of one evaluation of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub classifier: f64,
    pub realism: f64,
    pub disent: f64,
}

pub fn total_loss(c: LossComponents, weights: &LossWeights) -> f64 {
    c.classifier + weights.lambda_r * c.realism + weights.lambda_d * c.disent
}

/// Default noise scale: `0.5 * mean_l2_norm / sqrt(d)`.
pub fn default_noise_sigma(latents: &[Vec<f64>]) -> f64 {
    if latents.is_empty() {
        return 0.0;
    }
    let d = latents[0].len().max(1) as f64;
    let mean_norm = latents
        .iter()
        .map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / latents.len() as f64;
    0.5 * mean_norm / d.sqrt()
}
