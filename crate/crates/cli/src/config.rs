//! Strict flat `key=value` experiment files with section prefixes.
//!
//! Sections: `gen.`, `split.`, `train.`, `loss.`, `aug.`, `audit.`, plus
//! `baseline.` and `disentangled.` which override any `train.`/`loss.`/`aug.`
//! key for one model (`disentangled.lr=0.003`, `baseline.loss.focal_gamma=1`).
//! A top-level `seed` is the default for every section seed. Blank lines and
//! lines starting with `#` are ignored; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use dislab_core::fairaudit::AuditOptions;
use dislab_core::gradcore::ModelKind;
use dislab_core::losses::DisentForm;
use dislab_core::synthgen::{GeneratorConfig, Sa, SplitFractions};
use dislab_core::trainer::TrainConfig;

use crate::CliError;

const GEN_KEYS: &[&str] = &[
    "n_patients",
    "images_per_patient",
    "image_size",
    "channels",
    "confound_rho",
    "dr_prevalence",
    "primary_sa",
    "lesion_intensity",
    "sa_feature_strength",
    "pixel_noise",
    "seed",
    "marginal.age",
    "marginal.sex",
    "marginal.education",
    "marginal.insurance",
    "marginal.obesity",
];
const SPLIT_KEYS: &[&str] = &["train", "val", "test", "seed"];
const TRAIN_KEYS: &[&str] = &[
    "target_sa",
    "epochs_max",
    "patience",
    "batch_size",
    "lr",
    "weight_decay",
    "seed",
    "latent_dim",
    "augment",
    "noise_sigma",
    "threshold",
    "weight_dr_classes",
    "keep_epoch_checkpoints",
];
const LOSS_KEYS: &[&str] = &[
    "lambda_med",
    "lambda_sensit",
    "lambda_r",
    "lambda_d",
    "alpha_psnr",
    "focal_gamma",
    "class_weights",
    "ssim_window",
    "ssim_c1",
    "ssim_c2",
    "disent_form",
];
const AUG_KEYS: &[&str] = &[
    "flip_prob",
    "rotate",
    "max_brightness",
    "max_contrast",
    "max_blur_sigma",
    "blur_prob",
];
const AUDIT_KEYS: &[&str] = &["bins", "bootstrap_resamples", "bootstrap_seed"];

/// Parsed but unresolved entries: key to (value, line number).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    pub source: String,
    entries: BTreeMap<String, (String, usize)>,
}

fn known_model_key(rest: &str) -> bool {
    if let Some(k) = rest.strip_prefix("loss.") {
        LOSS_KEYS.contains(&k)
    } else if let Some(k) = rest.strip_prefix("aug.") {
        AUG_KEYS.contains(&k)
    } else {
        TRAIN_KEYS.contains(&rest)
    }
}

fn known_key(key: &str) -> bool {
    if key == "seed" {
        return true;
    }
    let Some((section, rest)) = key.split_once('.') else {
        return false;
    };
    match section {
        "gen" => GEN_KEYS.contains(&rest),
        "split" => SPLIT_KEYS.contains(&rest),
        "train" => rest == "mode" || TRAIN_KEYS.contains(&rest),
        "loss" => LOSS_KEYS.contains(&rest),
        "aug" => AUG_KEYS.contains(&rest),
        "audit" => AUDIT_KEYS.contains(&rest),
        "baseline" | "disentangled" => known_model_key(rest),
        _ => false,
    }
}

impl RawConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let err = |line: usize, msg: String| CliError::ConfigSyntax {
            file: source.to_string(),
            line,
            msg,
        };
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected key=value, got `{l}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !known_key(k) {
                return Err(err(line, format!("unknown key `{k}`")));
            }
            if v.is_empty() {
                return Err(err(line, format!("empty value for `{k}`")));
            }
            if let Some((_, first)) = entries.insert(k.to_string(), (v.to_string(), line)) {
                return Err(err(line, format!("`{k}` repeats line {first}")));
            }
        }
        Ok(Self {
            source: source.to_string(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Entries under `prefix`, with the prefix stripped, in key order.
    fn section<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str, usize)> + 'a {
        self.entries
            .iter()
            .filter_map(move |(k, (v, l))| k.strip_prefix(prefix).map(|r| (r, v.as_str(), *l)))
    }

    fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries.get(key).map(|(v, l)| (v.as_str(), *l))
    }

    fn fail(&self, line: usize, key: &str, msg: impl std::fmt::Display) -> CliError {
        CliError::ConfigSyntax {
            file: self.source.clone(),
            line,
            msg: format!("`{key}`: {msg}"),
        }
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn mode(v: &str) -> Result<ModelKind, String> {
    match v {
        "baseline" => Ok(ModelKind::Baseline),
        "disentangled" => Ok(ModelKind::Disentangled),
        _ => Err(format!("expected baseline or disentangled, got `{v}`")),
    }
}

fn mode_name(m: ModelKind) -> &'static str {
    match m {
        ModelKind::Baseline => "baseline",
        ModelKind::Disentangled => "disentangled",
    }
}

/// One training run as the CLI drives it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub config: TrainConfig,
    /// Also write the full state after every epoch under `checkpoints/`.
    pub keep_epoch_checkpoints: bool,
}

impl TrainRun {
    fn defaults(m: ModelKind, seed: u64) -> Self {
        let mut config = match m {
            ModelKind::Baseline => TrainConfig::baseline(),
            ModelKind::Disentangled => TrainConfig {
                target_sa: None,
                ..TrainConfig::disentangled(Sa::Age)
            },
        };
        config.seed = seed;
        Self {
            config,
            keep_epoch_checkpoints: false,
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let c = &mut self.config;
        if let Some(k) = key.strip_prefix("loss.") {
            let l = &mut c.loss;
            match k {
                "lambda_med" => l.lambda_med = num(v)?,
                "lambda_sensit" => l.lambda_sensit = num(v)?,
                "lambda_r" => l.lambda_r = num(v)?,
                "lambda_d" => l.lambda_d = num(v)?,
                "alpha_psnr" => l.alpha_psnr = num(v)?,
                "focal_gamma" => l.focal_gamma = num(v)?,
                "class_weights" => {
                    l.class_weights = if v == "auto" {
                        Vec::new()
                    } else {
                        let w = v.split(',').map(|x| num(x.trim())).collect::<Result<Vec<f64>, _>>()?;
                        if w.len() != 2 {
                            return Err("expected `auto` or two comma-separated weights".into());
                        }
                        w
                    }
                }
                "ssim_window" => l.ssim_window = num(v)?,
                "ssim_c1" => l.ssim_c1 = num(v)?,
                "ssim_c2" => l.ssim_c2 = num(v)?,
                "disent_form" => {
                    l.disent_form = match v {
                        "literal" => DisentForm::Literal,
                        "cross_only" => DisentForm::CrossOnly,
                        _ => return Err(format!("expected literal or cross_only, got `{v}`")),
                    }
                }
                _ => return Err("unknown key".into()),
            }
        } else if let Some(k) = key.strip_prefix("aug.") {
            let a = &mut c.augment_ranges;
            match k {
                "flip_prob" => a.flip_prob = num(v)?,
                "rotate" => a.rotate = boolean(v)?,
                "max_brightness" => a.max_brightness = num(v)?,
                "max_contrast" => a.max_contrast = num(v)?,
                "max_blur_sigma" => a.max_blur_sigma = num(v)?,
                "blur_prob" => a.blur_prob = num(v)?,
                _ => return Err("unknown key".into()),
            }
        } else {
            match key {
                "target_sa" => c.target_sa = Some(v.parse()?),
                "epochs_max" => c.epochs_max = num(v)?,
                "patience" => c.patience = num(v)?,
                "batch_size" => c.batch_size = num(v)?,
                "lr" => c.lr = num(v)?,
                "weight_decay" => c.weight_decay = num(v)?,
                "seed" => c.seed = num(v)?,
                "latent_dim" => c.latent_dim = num(v)?,
                "augment" => c.augment = boolean(v)?,
                "noise_sigma" => c.noise_sigma = if v == "auto" { None } else { Some(num(v)?) },
                "threshold" => c.threshold = num(v)?,
                "weight_dr_classes" => c.weight_dr_classes = boolean(v)?,
                "keep_epoch_checkpoints" => self.keep_epoch_checkpoints = boolean(v)?,
                _ => return Err("unknown key".into()),
            }
        }
        Ok(())
    }

    /// Every setting as `(key, value)` under `prefix`.
    pub fn echo(&self, prefix: &str, out: &mut BTreeMap<String, String>) {
        let c = &self.config;
        let l = &c.loss;
        let a = &c.augment_ranges;
        let mut put = |k: &str, v: String| {
            out.insert(format!("{prefix}{k}"), v);
        };
        put("mode", mode_name(c.mode).into());
        put("target_sa", c.target_sa.map_or("none".into(), |s| s.to_string()));
        put("epochs_max", c.epochs_max.to_string());
        put("patience", c.patience.to_string());
        put("batch_size", c.batch_size.to_string());
        put("lr", c.lr.to_string());
        put("weight_decay", c.weight_decay.to_string());
        put("seed", c.seed.to_string());
        put("latent_dim", c.latent_dim.to_string());
        put("augment", c.augment.to_string());
        put("noise_sigma", c.noise_sigma.map_or("auto".into(), |s| s.to_string()));
        put("threshold", c.threshold.to_string());
        put("weight_dr_classes", c.weight_dr_classes.to_string());
        put("keep_epoch_checkpoints", self.keep_epoch_checkpoints.to_string());
        put("loss.lambda_med", l.lambda_med.to_string());
        put("loss.lambda_sensit", l.lambda_sensit.to_string());
        put("loss.lambda_r", l.lambda_r.to_string());
        put("loss.lambda_d", l.lambda_d.to_string());
        put("loss.alpha_psnr", l.alpha_psnr.to_string());
        put("loss.focal_gamma", l.focal_gamma.to_string());
        put(
            "loss.class_weights",
            if l.class_weights.is_empty() {
                "auto".into()
            } else {
                l.class_weights.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
            },
        );
        put("loss.ssim_window", l.ssim_window.to_string());
        put("loss.ssim_c1", l.ssim_c1.to_string());
        put("loss.ssim_c2", l.ssim_c2.to_string());
        put(
            "loss.disent_form",
            match l.disent_form {
                DisentForm::Literal => "literal",
                DisentForm::CrossOnly => "cross_only",
            }
            .into(),
        );
        put("aug.flip_prob", a.flip_prob.to_string());
        put("aug.rotate", a.rotate.to_string());
        put("aug.max_brightness", a.max_brightness.to_string());
        put("aug.max_contrast", a.max_contrast.to_string());
        put("aug.max_blur_sigma", a.max_blur_sigma.to_string());
        put("aug.blur_prob", a.blur_prob.to_string());
    }
}

/// Every section resolved against its defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub seed: u64,
    pub gen: GeneratorConfig,
    pub split: SplitFractions,
    pub split_seed: u64,
    /// Model selected by `train.mode` (default baseline), for `train`.
    pub train: TrainRun,
    pub baseline: TrainRun,
    pub disentangled: TrainRun,
    pub audit: AuditOptions,
}

impl Experiment {
    /// Resolve `raw`. `seed_override` replaces the top-level seed and every
    /// section seed.
    pub fn resolve(raw: &RawConfig, seed_override: Option<u64>) -> Result<Self, CliError> {
        let seed = match (seed_override, raw.get("seed")) {
            (Some(s), _) => s,
            (None, Some((v, l))) => num(v).map_err(|m| raw.fail(l, "seed", m))?,
            (None, None) => 1,
        };
        let is_seed = |k: &str| k == "seed" || k.ends_with(".seed") || k == "bootstrap_seed";
        let skip = |k: &str| seed_override.is_some() && is_seed(k);

        let mut gen = GeneratorConfig {
            seed,
            ..GeneratorConfig::default()
        };
        for (k, v, l) in raw.section("gen.") {
            if skip(k) {
                continue;
            }
            let fail = |m: String| raw.fail(l, &format!("gen.{k}"), m);
            match k {
                "n_patients" => gen.n_patients = num(v).map_err(fail)?,
                "images_per_patient" => gen.images_per_patient = num(v).map_err(fail)?,
                "image_size" => gen.image_size = num(v).map_err(fail)?,
                "channels" => gen.channels = num(v).map_err(fail)?,
                "confound_rho" => gen.confound_rho = num(v).map_err(fail)?,
                "dr_prevalence" => gen.dr_prevalence = num(v).map_err(fail)?,
                "primary_sa" => gen.primary_sa = v.parse().map_err(fail)?,
                "lesion_intensity" => gen.lesion_intensity = num(v).map_err(fail)?,
                "sa_feature_strength" => gen.sa_feature_strength = num(v).map_err(fail)?,
                "pixel_noise" => gen.pixel_noise = num(v).map_err(fail)?,
                "seed" => gen.seed = num(v).map_err(fail)?,
                _ => {
                    let sa: Sa = k.trim_start_matches("marginal.").parse().map_err(fail)?;
                    gen.sa_marginals[sa.index()] = num(v).map_err(fail)?;
                }
            }
        }

        let mut split = SplitFractions::default();
        let mut split_seed = seed;
        for (k, v, l) in raw.section("split.") {
            if skip(k) {
                continue;
            }
            let fail = |m: String| raw.fail(l, &format!("split.{k}"), m);
            match k {
                "train" => split.train = num(v).map_err(fail)?,
                "val" => split.val = num(v).map_err(fail)?,
                "test" => split.test = num(v).map_err(fail)?,
                _ => split_seed = num(v).map_err(fail)?,
            }
        }

        let model = |m: ModelKind| -> Result<TrainRun, CliError> {
            let mut run = TrainRun::defaults(m, seed);
            for prefix in ["train.", "loss.", "aug."] {
                for (k, v, l) in raw.section(prefix) {
                    if k == "mode" && prefix == "train." || skip(k) {
                        continue;
                    }
                    let key = if prefix == "train." {
                        k.to_string()
                    } else {
                        format!("{prefix}{k}")
                    };
                    run.set(&key, v).map_err(|e| raw.fail(l, &format!("{prefix}{k}"), e))?;
                }
            }
            let own = format!("{}.", mode_name(m));
            for (k, v, l) in raw.section(&own) {
                if skip(k) {
                    continue;
                }
                run.set(k, v).map_err(|e| raw.fail(l, &format!("{own}{k}"), e))?;
            }
            Ok(run)
        };
        let baseline = model(ModelKind::Baseline)?;
        let disentangled = model(ModelKind::Disentangled)?;
        let train = match raw.get("train.mode") {
            None => baseline.clone(),
            Some((v, l)) => match mode(v).map_err(|m| raw.fail(l, "train.mode", m))? {
                ModelKind::Baseline => baseline.clone(),
                ModelKind::Disentangled => disentangled.clone(),
            },
        };

        let mut audit = AuditOptions {
            bootstrap_seed: seed,
            ..AuditOptions::default()
        };
        for (k, v, l) in raw.section("audit.") {
            if skip(k) {
                continue;
            }
            let fail = |m: String| raw.fail(l, &format!("audit.{k}"), m);
            match k {
                "bins" => audit.bins = num(v).map_err(fail)?,
                "bootstrap_resamples" => audit.bootstrap_resamples = num(v).map_err(fail)?,
                _ => audit.bootstrap_seed = num(v).map_err(fail)?,
            }
        }

        Ok(Self {
            seed,
            gen,
            split,
            split_seed,
            train,
            baseline,
            disentangled,
            audit,
        })
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        Self::resolve(&RawConfig::read(path)?, seed_override)
    }

    pub fn echo_data(&self, out: &mut BTreeMap<String, String>) {
        let g = &self.gen;
        out.insert("seed".into(), self.seed.to_string());
        for (k, v) in [
            ("n_patients", g.n_patients.to_string()),
            ("images_per_patient", g.images_per_patient.to_string()),
            ("image_size", g.image_size.to_string()),
            ("channels", g.channels.to_string()),
            ("confound_rho", g.confound_rho.to_string()),
            ("dr_prevalence", g.dr_prevalence.to_string()),
            ("primary_sa", g.primary_sa.to_string()),
            ("lesion_intensity", g.lesion_intensity.to_string()),
            ("sa_feature_strength", g.sa_feature_strength.to_string()),
            ("pixel_noise", g.pixel_noise.to_string()),
            ("seed", g.seed.to_string()),
        ] {
            out.insert(format!("gen.{k}"), v);
        }
        for sa in Sa::ALL {
            out.insert(format!("gen.marginal.{sa}"), g.sa_marginals[sa.index()].to_string());
        }
        out.insert("split.train".into(), self.split.train.to_string());
        out.insert("split.val".into(), self.split.val.to_string());
        out.insert("split.test".into(), self.split.test.to_string());
        out.insert("split.seed".into(), self.split_seed.to_string());
    }

    pub fn echo_audit(&self, out: &mut BTreeMap<String, String>) {
        out.insert("audit.bins".into(), self.audit.bins.to_string());
        out.insert(
            "audit.bootstrap_resamples".into(),
            self.audit.bootstrap_resamples.to_string(),
        );
        out.insert("audit.bootstrap_seed".into(), self.audit.bootstrap_seed.to_string());
    }
}
