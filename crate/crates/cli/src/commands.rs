//! The five subcommands. Each writes into its own output directory and ends
//! with a manifest of hashed outputs plus a separate timings file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dislab_core::fairaudit::{
    audit, compare_reports, read_predictions, read_report_json, write_audit_files, write_compare_files,
    write_predictions,
};
use dislab_core::synthgen::{generate_dataset, load_dataset, save_dataset, split_dataset, SplitName};
use dislab_core::trainer::{predict, read_checkpoint, train, write_checkpoint, write_history, TrainState};

use crate::config::{Experiment, TrainRun};
use crate::manifest::{dataset_hash, hash_tree, ExperimentManifest, Timings};
use crate::CliError;

pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const EPOCH_DIR: &str = "checkpoints";

/// What a command produced, for the caller to report.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub manifest: ExperimentManifest,
    pub warnings: Vec<String>,
    pub summary: Option<String>,
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Input {
            path: path.display().to_string(),
            msg: "no such directory".into(),
        })
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input {
            path: path.display().to_string(),
            msg: "no such file".into(),
        })
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn with_config(m: &mut ExperimentManifest, config_path: Option<&Path>) -> Result<(), CliError> {
    if let Some(p) = config_path {
        m.add_input("config", p)?;
    }
    Ok(())
}

/// Generate the dataset and its patient-level split into `out`.
pub fn cmd_synth(exp: &Experiment, config_path: Option<&Path>, out: &Path) -> Result<Outcome, CliError> {
    let t0 = Instant::now();
    exp.gen.validate()?;
    let data = generate_dataset(&exp.gen)?;
    let splits = split_dataset(&data, exp.split, exp.split_seed)?;
    create_dir(out)?;
    save_dataset(&data, Some(&splits), out)?;

    let mut m = ExperimentManifest::new("synth");
    exp.echo_data(&mut m.config);
    m.seeds.insert("gen".into(), exp.gen.seed);
    m.seeds.insert("split".into(), exp.split_seed);
    m.dataset_sha256 = Some(dataset_hash(out)?);
    with_config(&mut m, config_path)?;
    let m = m.finish(out)?;
    Timings {
        command: "synth".into(),
        total_secs: t0.elapsed().as_secs_f64(),
        ..Timings::default()
    }
    .write(out)?;
    Ok(Outcome {
        manifest: m,
        warnings: Vec::new(),
        summary: Some(format!("{} images from {} patients", data.len(), exp.gen.n_patients)),
    })
}

/// Train the model selected by `train.mode` on the dataset in `dataset_dir`.
pub fn cmd_train(
    exp: &Experiment,
    config_path: Option<&Path>,
    dataset_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<Outcome, CliError> {
    train_run(&exp.train, config_path, dataset_dir, out, resume)
}

fn train_run(
    run: &TrainRun,
    config_path: Option<&Path>,
    dataset_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<Outcome, CliError> {
    let t0 = Instant::now();
    run.config.validate()?;
    require_dir(dataset_dir)?;
    if let Some(p) = resume {
        require_file(p)?;
    }
    let (data, splits) = load_dataset(dataset_dir)?;
    let splits = splits.ok_or_else(|| {
        CliError::Validation(format!(
            "{} has no split column; generate it with `synth`",
            dataset_dir.join("meta.csv").display()
        ))
    })?;
    let resume_state = resume.map(read_checkpoint).transpose()?;

    create_dir(out)?;
    let epoch_dir = out.join(EPOCH_DIR);
    if run.keep_epoch_checkpoints {
        create_dir(&epoch_dir)?;
    }
    let mut hook = |s: &TrainState| {
        let r = s.history.epochs.last().expect("hook runs after an epoch");
        eprintln!(
            "  epoch {:3}  train loss {:.4}  val loss {:.4}  val F1 {:.3}  val AUROC {}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_f1,
            r.val_auroc.map_or("NA".into(), |a| format!("{a:.3}"))
        );
        if run.keep_epoch_checkpoints {
            write_checkpoint(s, &epoch_dir.join(format!("epoch_{:03}.ckpt", r.epoch)))?;
        }
        Ok(())
    };
    let state = train(&data, &splits, &run.config, resume_state, Some(&mut hook))?;

    write_checkpoint(&state, &out.join(CHECKPOINT))?;
    write_history(&state.history, &out.join("history.csv"))?;
    let test = splits.indices(&data, SplitName::Test);
    let preds = predict(&state.best_params, &data, &test, run.config.threshold)?;
    write_predictions(&preds, &out.join("predictions.csv"))?;

    let mut m = ExperimentManifest::new("train");
    run.echo("train.", &mut m.config);
    m.seeds.insert("train".into(), run.config.seed);
    m.dataset_sha256 = Some(dataset_hash(dataset_dir)?);
    with_config(&mut m, config_path)?;
    m.add_input("dataset", &dataset_dir.join("meta.csv"))?;
    m.add_input("dataset", &dataset_dir.join("images.bin"))?;
    if let Some(p) = resume {
        m.add_input("resume", p)?;
    }
    let m = m.finish(out)?;
    Timings {
        command: "train".into(),
        total_secs: t0.elapsed().as_secs_f64(),
        epoch_secs: state.history.wall_clock_secs.clone(),
        ..Timings::default()
    }
    .write(out)?;
    let best = state.history.best_epoch.map_or("none".into(), |e| e.to_string());
    Ok(Outcome {
        manifest: m,
        warnings: Vec::new(),
        summary: Some(format!(
            "{} epochs, best epoch {best}, {} test predictions",
            state.history.epochs.len(),
            preds.len()
        )),
    })
}

/// Audit a predictions file, or the `predictions.csv` inside a directory.
pub fn cmd_audit(
    exp: &Experiment,
    config_path: Option<&Path>,
    predictions: &Path,
    out: &Path,
) -> Result<Outcome, CliError> {
    let t0 = Instant::now();
    let file: PathBuf = if predictions.is_dir() {
        predictions.join("predictions.csv")
    } else {
        predictions.to_path_buf()
    };
    require_file(&file)?;
    let records = read_predictions(&file)?;
    let report = audit(&records, &exp.audit)?;
    create_dir(out)?;
    let warnings = write_audit_files(&report, out)?;

    let mut m = ExperimentManifest::new("audit");
    exp.echo_audit(&mut m.config);
    m.seeds.insert("bootstrap".into(), exp.audit.bootstrap_seed);
    with_config(&mut m, config_path)?;
    m.add_input("predictions", &file)?;
    let m = m.finish(out)?;
    Timings {
        command: "audit".into(),
        total_secs: t0.elapsed().as_secs_f64(),
        ..Timings::default()
    }
    .write(out)?;
    let auroc = report.overall.auroc.map_or("NA".into(), |a| format!("{a:.4}"));
    Ok(Outcome {
        manifest: m,
        warnings,
        summary: Some(format!("{} records, overall AUROC {auroc}", records.len())),
    })
}

/// Compare two audit directories (baseline first).
pub fn cmd_compare(baseline_dir: &Path, disentangled_dir: &Path, out: &Path) -> Result<Outcome, CliError> {
    let t0 = Instant::now();
    let mut reports = Vec::new();
    for d in [baseline_dir, disentangled_dir] {
        require_dir(d)?;
        let f = d.join("audit.json");
        require_file(&f)?;
        reports.push((read_report_json(&f)?, f));
    }
    let cmp = compare_reports(&reports[0].0, &reports[1].0)?;
    create_dir(out)?;
    write_compare_files(&cmp, out)?;

    let mut m = ExperimentManifest::new("compare");
    m.add_input("baseline_audit", &reports[0].1)?;
    m.add_input("disentangled_audit", &reports[1].1)?;
    let m = m.finish(out)?;
    Timings {
        command: "compare".into(),
        total_secs: t0.elapsed().as_secs_f64(),
        ..Timings::default()
    }
    .write(out)?;
    Ok(Outcome {
        manifest: m,
        warnings: Vec::new(),
        summary: Some(cmp.summary()),
    })
}

/// synth, baseline and disentangled training, both audits and the comparison,
/// under `out/{data,baseline,disentangled,audit_baseline,audit_disentangled,compare}`.
pub fn cmd_all(exp: &Experiment, config_path: Option<&Path>, out: &Path) -> Result<Outcome, CliError> {
    let t0 = Instant::now();
    exp.gen.validate()?;
    exp.baseline.config.validate()?;
    exp.disentangled.config.validate()?;

    let mut steps = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut step = |name: &str, f: &mut dyn FnMut() -> Result<Outcome, CliError>| -> Result<Outcome, CliError> {
        eprintln!("[{name}]");
        let t = Instant::now();
        let o = f()?;
        steps.insert(name.to_string(), t.elapsed().as_secs_f64());
        if let Some(s) = o.summary.as_deref().and_then(|s| s.lines().next()) {
            eprintln!("  {s}");
        }
        Ok(o)
    };
    let (data, base, dis) = (out.join("data"), out.join("baseline"), out.join("disentangled"));
    let (audit_b, audit_d, cmp) = (
        out.join("audit_baseline"),
        out.join("audit_disentangled"),
        out.join("compare"),
    );
    step("synth", &mut || cmd_synth(exp, config_path, &data))?;
    step("train baseline", &mut || {
        train_run(&exp.baseline, config_path, &data, &base, None)
    })?;
    step("train disentangled", &mut || {
        train_run(&exp.disentangled, config_path, &data, &dis, None)
    })?;
    for (name, pred, dir) in [
        ("audit baseline", &base, &audit_b),
        ("audit disentangled", &dis, &audit_d),
    ] {
        let o = step(name, &mut || cmd_audit(exp, config_path, pred, dir))?;
        warnings.extend(o.warnings.into_iter().map(|w| format!("{name}: {w}")));
    }
    let summary = step("compare", &mut || cmd_compare(&audit_b, &audit_d, &cmp))?.summary;

    let mut m = ExperimentManifest::new("all");
    exp.echo_data(&mut m.config);
    exp.baseline.echo("baseline.", &mut m.config);
    exp.disentangled.echo("disentangled.", &mut m.config);
    exp.echo_audit(&mut m.config);
    m.seeds.insert("gen".into(), exp.gen.seed);
    m.seeds.insert("split".into(), exp.split_seed);
    m.seeds.insert("baseline".into(), exp.baseline.config.seed);
    m.seeds.insert("disentangled".into(), exp.disentangled.config.seed);
    m.seeds.insert("bootstrap".into(), exp.audit.bootstrap_seed);
    m.dataset_sha256 = Some(dataset_hash(&data)?);
    with_config(&mut m, config_path)?;
    let m = m.finish(out)?;
    Timings {
        command: "all".into(),
        total_secs: t0.elapsed().as_secs_f64(),
        steps,
        ..Timings::default()
    }
    .write(out)?;
    Ok(Outcome {
        manifest: m,
        warnings,
        summary,
    })
}

/// Hashes of every reproducible file under `dir`, manifests included.
pub fn tree_hashes(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out: BTreeMap<String, String> = hash_tree(dir)?.into_iter().map(|f| (f.path, f.sha256)).collect();
    let top = dir.join(crate::manifest::MANIFEST);
    if top.is_file() {
        out.insert(crate::manifest::MANIFEST.into(), crate::manifest::sha256_file(&top)?);
    }
    Ok(out)
}
