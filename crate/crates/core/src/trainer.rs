//! Training loops for the baseline classifier and the disentanglement
//! network, with class weighting, early stopping on validation F1,
//! resumable state and prediction export.
//!
//! Every stochastic choice is drawn from a stream derived from
//! `(config.seed, epoch, ...)`, so a run resumed from the state saved after
//! epoch `k` continues bit-for-bit like the uninterrupted run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fairaudit::{self, fmt_num, Confusion, PredictionRecord};
use crate::gradcore::checkpoint::{self, pack, unpack_adam, unpack_params};
use crate::gradcore::network::{self, Bound, LatentPair};
use crate::gradcore::{
    collect_grads, AdamHyper, AdamState, Architecture, Checkpoint, GradError, Graph, ModelKind, ModelParams, Network,
    Tensor, Var,
};
use crate::losses::{self, LatentTarget, LossError, LossWeights, PerturbationSpec};
use crate::seeds;
use crate::synthgen::{augment, AugmentRanges, Dataset, Sa, SplitAssignment, SplitName};

/// Images per forward pass at inference.
const INFER_CHUNK: usize = 64;
/// Noise stream offset for validation batches.
const VAL_STREAM: u64 = 1 << 32;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        source: GradError,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: ModelKind,
    /// Attribute supervising `c_sensit`; required in disentangled mode, ignored otherwise.
    pub target_sa: Option<Sa>,
    pub epochs_max: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub latent_dim: usize,
    pub loss: LossWeights,
    pub augment: bool,
    pub augment_ranges: AugmentRanges,
    /// Fixed perturbation scale; `None` recomputes the default from the
    /// training latents at the start of every epoch.
    pub noise_sigma: Option<f64>,
    /// Hard-label threshold for validation F1 and predictions.
    pub threshold: f64,
    /// Disentangled mode: weight the DR cross-entropy by the training-split
    /// class weights, as the baseline's focal loss is.
    pub weight_dr_classes: bool,
}

impl TrainConfig {
    pub fn baseline() -> Self {
        Self {
            mode: ModelKind::Baseline,
            target_sa: None,
            epochs_max: 30,
            patience: 10,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-6,
            seed: 1,
            latent_dim: 32,
            loss: LossWeights::default(),
            augment: true,
            augment_ranges: AugmentRanges::default(),
            noise_sigma: None,
            threshold: 0.5,
            weight_dr_classes: true,
        }
    }

    pub fn disentangled(target_sa: Sa) -> Self {
        Self {
            mode: ModelKind::Disentangled,
            target_sa: Some(target_sa),
            batch_size: 32,
            lr: 3e-3,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.mode == ModelKind::Disentangled && self.target_sa.is_none() {
            return bad("disentangled mode requires target_sa");
        }
        if self.epochs_max == 0 || self.batch_size == 0 || self.latent_dim == 0 {
            return bad("epochs_max, batch_size and latent_dim must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be finite and > 0");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and >= 0");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if let Some(s) = self.noise_sigma {
            PerturbationSpec::new(s, LatentTarget::Med)?;
        }
        self.loss.validate()?;
        self.augment_ranges.validate().map_err(TrainError::Config)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_classifier: f64,
    pub train_realism: f64,
    pub train_disent: f64,
    pub val_loss: f64,
    /// 0 when undefined (no positives predicted or present).
    pub val_f1: f64,
    pub val_auroc: Option<f64>,
    pub noise_sigma_med: Option<f64>,
    pub noise_sigma_sensit: Option<f64>,
}

/// Per-epoch records plus the early-stopping outcome. Equality ignores wall-clock.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters are restored: maximal val F1, earliest on ties.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Seconds per epoch of this process only; not saved in checkpoints so
    /// that they stay byte-reproducible.
    #[serde(skip)]
    pub wall_clock_secs: Vec<f64>,
}

impl PartialEq for TrainHistory {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs && self.best_epoch == other.best_epoch && self.stopped_early == other.stopped_early
    }
}

impl TrainHistory {
    fn best(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for r in &self.epochs {
            if best.is_none_or(|(_, f)| r.val_f1 > f) {
                best = Some((r.epoch, r.val_f1));
            }
        }
        best
    }

    /// Consecutive epochs since the best one.
    fn stale(&self) -> usize {
        match self.best() {
            Some((e, _)) => self.epochs.len() - 1 - e,
            None => 0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,train_loss,train_classifier,train_realism,train_disent,val_loss,val_f1,val_auroc,noise_sigma_med,noise_sigma_sensit,best\n",
        );
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), fmt_num);
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                fmt_num(r.train_loss),
                fmt_num(r.train_classifier),
                fmt_num(r.train_realism),
                fmt_num(r.train_disent),
                fmt_num(r.val_loss),
                fmt_num(r.val_f1),
                opt(r.val_auroc),
                opt(r.noise_sigma_med),
                opt(r.noise_sigma_sensit),
                u8::from(self.best_epoch == Some(r.epoch))
            );
        }
        s
    }
}

/// `N / (2 N_c)` per class over image-level labels.
pub fn compute_class_weights(labels: &[u8]) -> Result<[f64; 2], TrainError> {
    let n = labels.len();
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Err(TrainError::Data(format!(
            "class weights need both classes in the training split ({neg} negative, {pos} positive)"
        )));
    }
    Ok([n as f64 / (2.0 * neg as f64), n as f64 / (2.0 * pos as f64)])
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub best_params: ModelParams<f32>,
    pub history: TrainHistory,
    pub finished: bool,
}

#[derive(Serialize, Deserialize)]
struct StateEcho {
    config: TrainConfig,
    history: TrainHistory,
    finished: bool,
}

const BEST_PREFIX: &str = "best.";

impl TrainState {
    pub fn new(config: TrainConfig, arch: Architecture) -> Result<Self, TrainError> {
        let params = ModelParams::init(arch, seeds::derive(config.seed, &[seeds::tag::INIT]))?;
        let adam = AdamState::new(&params, AdamHyper::new(config.lr, config.weight_decay));
        Ok(Self {
            config,
            best_params: params.clone(),
            params,
            adam,
            history: TrainHistory::default(),
            finished: false,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.epochs.len()
    }

    /// Current parameters and optimizer state, plus the best parameters under `best.`.
    pub fn to_checkpoint(&self) -> Result<Checkpoint, TrainError> {
        let echo = StateEcho {
            config: self.config.clone(),
            history: self.history.clone(),
            finished: self.finished,
        };
        let mut ck = pack(
            &self.params,
            Some(&self.adam),
            serde_json::to_value(echo).map_err(GradError::from)?,
        )?;
        for t in &self.best_params.tensors {
            ck.tensors.push((format!("{BEST_PREFIX}{}", t.name), t.value.clone()));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let echo: StateEcho = serde_json::from_value(checkpoint::extra(ck)?).map_err(GradError::from)?;
        let params = unpack_params(ck, "")?;
        let adam = unpack_adam(ck, &params)?
            .ok_or_else(|| TrainError::Data("checkpoint carries no optimizer state".into()))?;
        let best_params = unpack_params(ck, BEST_PREFIX)?;
        Ok(Self {
            config: echo.config,
            params,
            adam,
            best_params,
            history: echo.history,
            finished: echo.finished,
        })
    }
}

/// Best-epoch parameters of a saved run.
pub fn best_params_from_checkpoint(ck: &Checkpoint) -> Result<ModelParams<f32>, TrainError> {
    Ok(unpack_params(ck, BEST_PREFIX)?)
}

/// The part of a dataset training may see: the train and val splits only.
pub struct TrainView {
    train: Vec<usize>,
    val: Vec<usize>,
}

impl TrainView {
    pub fn new(dataset: &Dataset, splits: &SplitAssignment) -> Result<Self, TrainError> {
        splits.validate(dataset).map_err(|e| TrainError::Data(e.to_string()))?;
        let train = splits.indices(dataset, SplitName::Train);
        let val = splits.indices(dataset, SplitName::Val);
        if train.is_empty() || val.is_empty() {
            return Err(TrainError::Data("train and val splits must be non-empty".into()));
        }
        Ok(Self { train, val })
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }
}

fn architecture(dataset: &Dataset, config: &TrainConfig) -> Result<Architecture, TrainError> {
    if dataset.height != dataset.width {
        return Err(TrainError::Data("images must be square".into()));
    }
    let arch = Architecture::new(config.mode, dataset.height, dataset.channels, config.latent_dim);
    arch.validate()?;
    Ok(arch)
}

/// Stack images `[n, c, s, s]`, optionally augmented per sample.
fn image_batch(dataset: &Dataset, idx: &[usize], aug: Option<(&AugmentRanges, u64, usize)>) -> Tensor<f32> {
    let (c, s) = (dataset.channels, dataset.height);
    let mut data = Vec::with_capacity(idx.len() * c * s * s);
    for &i in idx {
        let img = &dataset.samples[i].image;
        match aug {
            Some((ranges, seed, epoch)) => {
                let p = ranges.sample(seeds::derive(seed, &[seeds::tag::AUGMENT, epoch as u64, i as u64]));
                data.extend(augment(img, c, s, &p));
            }
            None => data.extend_from_slice(img),
        }
    }
    Tensor::new(vec![idx.len(), c, s, s], data)
}

struct Objective {
    loss: Var,
    dr_probs: Var,
    classifier: Var,
    realism: Option<Var>,
    disent: Option<Var>,
}

/// Build the training objective for one batch on `g`.
#[allow(clippy::too_many_arguments)]
fn objective(
    g: &mut Graph<f32>,
    net: &Network<'_>,
    images: Var,
    y_dr: &[usize],
    y_sa: &[usize],
    config: &TrainConfig,
    class_weights: &[f64; 2],
    noise: Option<(&[PerturbationSpec], &[Tensor<f32>])>,
) -> Result<Objective, TrainError> {
    let lat = net.encode(g, images)?;
    let w = &config.loss;
    match config.mode {
        ModelKind::Baseline => {
            let p = net.classify_joint(g, &lat)?;
            let cw: Vec<f64> = if w.class_weights.is_empty() {
                class_weights.to_vec()
            } else {
                w.class_weights.clone()
            };
            let l = losses::focal_term(g, p, y_dr, &cw, w.focal_gamma)?;
            Ok(Objective {
                loss: l,
                dr_probs: p,
                classifier: l,
                realism: None,
                disent: None,
            })
        }
        ModelKind::Disentangled => {
            let pm = net.classify_med(g, lat.med)?;
            let ps = net.classify_sensit(g, lat.sensit)?;
            let cls = if config.weight_dr_classes {
                let med = losses::focal_term(g, pm, y_dr, class_weights, 0.0)?;
                let med = g.scale(med, w.lambda_med as f32);
                let sen = losses::cross_entropy_term(g, ps, y_sa)?;
                let sen = g.scale(sen, w.lambda_sensit as f32);
                g.add(med, sen)
            } else {
                losses::classification_term(g, pm, y_dr, ps, y_sa, w)?
            };
            let mut loss = cls;
            let mut realism = None;
            let mut disent = None;
            if w.lambda_r != 0.0 {
                let recon = net.decode(g, lat.med, lat.sensit)?;
                let r = losses::realism_term(g, images, recon, w)?;
                let scaled = g.scale(r, w.lambda_r as f32);
                loss = g.add(loss, scaled);
                realism = Some(r);
            }
            if w.lambda_d != 0.0 {
                let (specs, eps) = noise.expect("noise is drawn whenever lambda_d != 0");
                let d = losses::disentanglement_term(g, net, &lat, specs, eps, w.disent_form)?;
                let scaled = g.scale(d, w.lambda_d as f32);
                loss = g.add(loss, scaled);
                disent = Some(d);
            }
            Ok(Objective {
                loss,
                dr_probs: pm,
                classifier: cls,
                realism,
                disent,
            })
        }
    }
}

fn labels(dataset: &Dataset, idx: &[usize], target: Option<Sa>) -> (Vec<usize>, Vec<usize>) {
    let y_dr = idx.iter().map(|&i| dataset.samples[i].dr_label as usize).collect();
    let y_sa = idx
        .iter()
        .map(|&i| target.map_or(0, |sa| dataset.samples[i].sa_group(sa) as usize))
        .collect();
    (y_dr, y_sa)
}

/// Per-half default perturbation scale from the un-augmented training latents.
fn epoch_sigmas(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    train: &[usize],
    config: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    if let Some(s) = config.noise_sigma {
        return Ok((s, s));
    }
    let lat = latents(params, dataset, train)?;
    let med: Vec<Vec<f64>> = lat
        .iter()
        .map(|l| l.z_med.iter().map(|&v| v as f64).collect())
        .collect();
    let sen: Vec<Vec<f64>> = lat
        .iter()
        .map(|l| l.z_sensit.iter().map(|&v| v as f64).collect())
        .collect();
    // A collapsed latent still needs a positive scale.
    let floor = |s: f64| if s.is_finite() && s > 1e-6 { s } else { 1e-6 };
    Ok((
        floor(losses::default_noise_sigma(&med)),
        floor(losses::default_noise_sigma(&sen)),
    ))
}

fn perturbation_specs(sigmas: (f64, f64)) -> Result<Vec<PerturbationSpec>, TrainError> {
    Ok(vec![
        PerturbationSpec::new(sigmas.0, LatentTarget::Med)?,
        PerturbationSpec::new(sigmas.1, LatentTarget::Sensit)?,
    ])
}

struct Sums {
    n: f64,
    total: f64,
    classifier: f64,
    realism: f64,
    disent: f64,
}

impl Sums {
    fn new() -> Self {
        Self {
            n: 0.0,
            total: 0.0,
            classifier: 0.0,
            realism: 0.0,
            disent: 0.0,
        }
    }

    fn add(&mut self, g: &Graph<f32>, o: &Objective, n: usize) {
        let n = n as f64;
        self.n += n;
        self.total += n * g.scalar(o.loss) as f64;
        self.classifier += n * g.scalar(o.classifier) as f64;
        self.realism += o.realism.map_or(0.0, |v| n * g.scalar(v) as f64);
        self.disent += o.disent.map_or(0.0, |v| n * g.scalar(v) as f64);
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.n
    }
}

/// Optional per-epoch callback, e.g. for writing resumable checkpoints.
pub type EpochHook<'a> = dyn FnMut(&TrainState) -> Result<(), TrainError> + 'a;

/// Train from scratch, or continue `resume` (whose config must equal `config`).
pub fn train(
    dataset: &Dataset,
    splits: &SplitAssignment,
    config: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: Option<&mut EpochHook<'_>>,
) -> Result<TrainState, TrainError> {
    config.validate()?;
    let view = TrainView::new(dataset, splits)?;
    let arch = architecture(dataset, config)?;
    let train_labels: Vec<u8> = view.train.iter().map(|&i| dataset.samples[i].dr_label).collect();
    let class_weights = compute_class_weights(&train_labels)?;

    let mut state = match resume {
        Some(s) => {
            if s.config != *config {
                return Err(TrainError::Config(
                    "resume checkpoint was written with a different config".into(),
                ));
            }
            if s.params.arch != arch {
                return Err(TrainError::Config(
                    "resume checkpoint architecture does not match the dataset".into(),
                ));
            }
            s
        }
        None => TrainState::new(config.clone(), arch.clone())?,
    };

    while !state.finished && state.epochs_done() < config.epochs_max {
        let epoch = state.epochs_done();
        let started = Instant::now();
        let sigmas = if config.mode == ModelKind::Disentangled && config.loss.lambda_d != 0.0 {
            Some(epoch_sigmas(&state.params, dataset, &view.train, config)?)
        } else {
            None
        };
        let specs = sigmas.map(perturbation_specs).transpose()?;

        let mut order = view.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, &[seeds::tag::SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);

        let mut sums = Sums::new();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let aug = config.augment.then_some((&config.augment_ranges, config.seed, epoch));
            let x = image_batch(dataset, chunk, aug);
            let (y_dr, y_sa) = labels(dataset, chunk, config.target_sa);
            let noise: Option<Vec<Tensor<f32>>> = specs.as_ref().map(|sp| {
                let seed = seeds::derive(config.seed, &[seeds::tag::NOISE, epoch as u64, b as u64]);
                losses::sample_noise(sp, chunk.len(), config.latent_dim, seed)
            });
            let mut g = Graph::new();
            let bound: Bound = state.params.bind(&mut g);
            let net = Network::new(&state.params.arch, &bound);
            let xv = g.leaf(x);
            let obj = objective(
                &mut g,
                &net,
                xv,
                &y_dr,
                &y_sa,
                config,
                &class_weights,
                specs.as_deref().zip(noise.as_deref()),
            )?;
            if !g.scalar(obj.loss).is_finite() || !g.value(obj.dr_probs).is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            sums.add(&g, &obj, chunk.len());
            let grads = collect_grads(&g, &bound, obj.loss);
            state
                .adam
                .step(&mut state.params, &grads)
                .map_err(|source| TrainError::Step {
                    epoch,
                    batch: b,
                    source,
                })?;
        }

        let (val_loss, val_f1, val_auroc) = evaluate(
            &state.params,
            dataset,
            &view.val,
            config,
            &class_weights,
            specs.as_deref(),
            epoch,
        )?;
        state.history.epochs.push(EpochRecord {
            epoch,
            train_loss: sums.mean(sums.total),
            train_classifier: sums.mean(sums.classifier),
            train_realism: sums.mean(sums.realism),
            train_disent: sums.mean(sums.disent),
            val_loss,
            val_f1,
            val_auroc,
            noise_sigma_med: sigmas.map(|s| s.0),
            noise_sigma_sensit: sigmas.map(|s| s.1),
        });
        state.history.wall_clock_secs.push(started.elapsed().as_secs_f64());

        let (best_epoch, _) = state.history.best().expect("at least one epoch");
        if best_epoch == epoch {
            state.best_params = state.params.clone();
        }
        state.history.best_epoch = Some(best_epoch);
        if state.history.stale() >= config.patience.max(1) {
            state.history.stopped_early = true;
            state.finished = true;
        }
        if state.epochs_done() >= config.epochs_max {
            state.finished = true;
        }
        if let Some(hook) = on_epoch.as_deref_mut() {
            hook(&state)?;
        }
    }
    state.finished = true;
    Ok(state)
}

/// Validation loss (no augmentation), F1 at the configured threshold, and AUROC.
fn evaluate(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    idx: &[usize],
    config: &TrainConfig,
    class_weights: &[f64; 2],
    specs: Option<&[PerturbationSpec]>,
    epoch: usize,
) -> Result<(f64, f64, Option<f64>), TrainError> {
    let mut sums = Sums::new();
    let mut scores = Vec::with_capacity(idx.len());
    for (b, chunk) in idx.chunks(INFER_CHUNK).enumerate() {
        let x = image_batch(dataset, chunk, None);
        let (y_dr, y_sa) = labels(dataset, chunk, config.target_sa);
        let noise = specs.map(|sp| {
            let seed = seeds::derive(config.seed, &[seeds::tag::NOISE, epoch as u64, VAL_STREAM + b as u64]);
            losses::sample_noise::<f32>(sp, chunk.len(), config.latent_dim, seed)
        });
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let net = Network::new(&params.arch, &bound);
        let xv = g.leaf(x);
        let obj = objective(
            &mut g,
            &net,
            xv,
            &y_dr,
            &y_sa,
            config,
            class_weights,
            specs.zip(noise.as_deref()),
        )?;
        sums.add(&g, &obj, chunk.len());
        let p = g.value(obj.dr_probs);
        scores.extend((0..chunk.len()).map(|i| p.row(i)[1] as f64));
    }
    let y: Vec<u8> = idx.iter().map(|&i| dataset.samples[i].dr_label).collect();
    let y_hat: Vec<u8> = scores
        .iter()
        .map(|&s| fairaudit::hard_label(s, config.threshold))
        .collect();
    let f1 = Confusion::from_labels(&y_hat, &y)
        .ok()
        .and_then(|c| c.f1().ok())
        .unwrap_or(0.0);
    let auroc = fairaudit::auroc(&scores, &y).ok();
    Ok((sums.mean(sums.total), f1, auroc))
}

/// Train the baseline and return its best-epoch parameters.
pub fn train_baseline(
    dataset: &Dataset,
    splits: &SplitAssignment,
    config: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainHistory), TrainError> {
    if config.mode != ModelKind::Baseline {
        return Err(TrainError::Config("train_baseline needs mode = baseline".into()));
    }
    let s = train(dataset, splits, config, None, None)?;
    Ok((s.best_params, s.history))
}

/// Train the disentanglement network and return its best-epoch parameters.
pub fn train_disentangled(
    dataset: &Dataset,
    splits: &SplitAssignment,
    config: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainHistory), TrainError> {
    if config.mode != ModelKind::Disentangled {
        return Err(TrainError::Config(
            "train_disentangled needs mode = disentangled".into(),
        ));
    }
    let s = train(dataset, splits, config, None, None)?;
    Ok((s.best_params, s.history))
}

/// Latent pairs for `idx`, un-augmented.
pub fn latents(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    idx: &[usize],
) -> Result<Vec<LatentPair<f32>>, TrainError> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(INFER_CHUNK) {
        out.extend(network::encode(params, &image_batch(dataset, chunk, None))?);
    }
    Ok(out)
}

/// DR probability `p(Referable)` for `idx`: `c_joint` for the baseline, `c_med` on `z_med` otherwise.
pub fn dr_scores(params: &ModelParams<f32>, dataset: &Dataset, idx: &[usize]) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(INFER_CHUNK) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let net = Network::new(&params.arch, &bound);
        let x = g.leaf(image_batch(dataset, chunk, None));
        let lat = net.encode(&mut g, x)?;
        let p = net.classify_dr(&mut g, &lat)?;
        let p = g.value(p);
        out.extend((0..chunk.len()).map(|i| p.row(i)[1] as f64));
    }
    Ok(out)
}

/// One record per sample of `idx`; `y_hat = 1` iff score > `threshold`.
pub fn predict(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    idx: &[usize],
    threshold: f64,
) -> Result<Vec<PredictionRecord>, TrainError> {
    let scores = dr_scores(params, dataset, idx)?;
    Ok(idx
        .iter()
        .zip(scores)
        .map(|(&i, score)| {
            let s = &dataset.samples[i];
            PredictionRecord {
                image_id: s.image_id.clone(),
                patient_id: s.patient_id.clone(),
                y_true: s.dr_label,
                score,
                y_hat: fairaudit::hard_label(score, threshold),
                sa: s.sa.map(Some),
            }
        })
        .collect())
}

pub fn write_history(history: &TrainHistory, path: &Path) -> Result<(), TrainError> {
    fs::write(path, history.to_csv())?;
    Ok(())
}

pub fn write_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    fs::write(path, state.to_checkpoint()?.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    let bytes = fs::read(path)?;
    TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weights_match_inverse_frequency() {
        assert_eq!(compute_class_weights(&[0, 1, 0, 1]).unwrap(), [1.0, 1.0]);
        let mut y = vec![0u8; 82];
        y.extend(vec![1u8; 18]);
        let w = compute_class_weights(&y).unwrap();
        assert!((w[0] - 0.6098).abs() < 1e-4 && (w[1] - 2.7778).abs() < 1e-4, "{w:?}");
        let doubled: Vec<u8> = y.iter().chain(&y).copied().collect();
        assert_eq!(compute_class_weights(&doubled).unwrap(), w);
        assert!(compute_class_weights(&[0, 0, 0]).is_err());
    }

    #[test]
    fn disentangled_without_target_is_rejected() {
        let mut c = TrainConfig::disentangled(Sa::Age);
        c.target_sa = None;
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
        assert!(TrainConfig::baseline().validate().is_ok());
    }
}
