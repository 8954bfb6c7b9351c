//! The `dislab` binary end to end: exit codes, determinism, resume and the
//! path, schema and feasibility errors.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::goldens::{config_path as fixture_config, predictions_path};
use dislab_cli::commands::tree_hashes;
use dislab_cli::manifest::ExperimentManifest;
use dislab_core::fairaudit::{compare_reports, read_report_json, write_compare_files};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn dislab(args: &[&str]) -> Output {
    dislab_env(args, &[])
}

fn dislab_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dislab"));
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn manifest(dir: &Path) -> ExperimentManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SMOKE_TRAIN: &str = "seed=3\ngen.n_patients=60\ngen.images_per_patient=2\ngen.image_size=16\n\
    train.mode=baseline\ntrain.epochs_max=3\ntrain.latent_dim=8\ntrain.batch_size=8\ntrain.keep_epoch_checkpoints=true\n";

#[test]
fn shipped_config_synthesizes_and_repeats_hash_for_hash() {
    let d = tempfile::tempdir().unwrap();
    let cfg = configs().join("experiment.cfg");
    let mut manifests = Vec::new();
    for run in ["a", "b"] {
        let out = d.path().join(run);
        let o = dislab(&["synth", "--config", p(&cfg), "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        for f in ["meta.csv", "images.bin", "manifest.json", "timings.json"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        manifests.push(manifest(&out));
    }
    assert_eq!(manifests[0], manifests[1]);
    let m = &manifests[0];
    assert_eq!(m.command, "synth");
    assert!(m.dataset_sha256.is_some());
    assert_eq!(m.config["gen.confound_rho"], "0.9");
    assert_eq!(
        m.outputs.iter().map(|f| f.path.as_str()).collect::<Vec<_>>(),
        ["images.bin", "meta.csv"]
    );
    let meta = fs::read_to_string(d.path().join("a/meta.csv")).unwrap();
    assert_eq!(meta.lines().count(), 2001);
}

#[test]
fn infeasible_confound_is_a_validation_error_naming_the_bound() {
    // Upper Frechet bound of Pearson rho for Bernoulli(0.18) and Bernoulli(0.5).
    let (p_dr, q) = (0.18f64, 0.5f64);
    let max_rho = (p_dr.min(q) - p_dr * q) / (p_dr * (1.0 - p_dr) * q * (1.0 - q)).sqrt();
    assert!((max_rho - 0.4685).abs() < 1e-4);
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        d.path(),
        "c.cfg",
        "gen.confound_rho=0.99\ngen.dr_prevalence=0.18\ngen.marginal.age=0.5\n",
    );
    let out = d.path().join("out");
    let o = dislab(&["synth", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(&format!("{max_rho:.4}")), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn disentangled_without_target_fails_before_any_compute() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "t.cfg", "train.mode=disentangled\n");
    let out = d.path().join("out");
    // The dataset directory does not even exist: validation comes first.
    let o = dislab(&[
        "train",
        "--config",
        p(&cfg),
        "--in",
        p(&d.path().join("nowhere")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("target_sa"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn config_errors_report_line_and_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "bad.cfg", "seed=1\n\ngen.confound=0.9\n");
    let o = dislab(&["synth", "--config", p(&cfg), "--out", p(&d.path().join("o"))]);
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(e.contains("line 3") && e.contains("gen.confound"), "{e}");
    let o = dislab(&["synth", "--config", p(&cfg)]);
    assert_eq!(code(&o), 1, "missing --out is a usage error");
}

#[test]
fn missing_directories_are_clear_path_errors() {
    let d = tempfile::tempdir().unwrap();
    let gone = d.path().join("missing_audit");
    let o = dislab(&[
        "compare",
        "--in",
        p(&gone),
        "--in",
        p(&gone),
        "--out",
        p(&d.path().join("c")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(p(&gone)), "{}", stderr(&o));
    let o = dislab(&["audit", "--in", p(&gone), "--out", p(&d.path().join("a"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing_audit"));
}

#[test]
fn train_predicts_every_test_sample_and_resume_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "t.cfg", SMOKE_TRAIN);
    let data = d.path().join("data");
    assert_eq!(code(&dislab(&["synth", "--config", p(&cfg), "--out", p(&data)])), 0);

    let full = d.path().join("full");
    let o = dislab(&["train", "--config", p(&cfg), "--in", p(&data), "--out", p(&full)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta = fs::read_to_string(data.join("meta.csv")).unwrap();
    let test_ids: Vec<&str> = meta
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",test"))
        .map(|l| l.split(',').next().unwrap())
        .collect();
    let preds = fs::read_to_string(full.join("predictions.csv")).unwrap();
    let pred_ids: Vec<&str> = preds.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert!(!test_ids.is_empty());
    assert_eq!(pred_ids, test_ids);
    for e in 0..3 {
        assert!(full.join(format!("checkpoints/epoch_{e:03}.ckpt")).is_file());
    }

    for k in 0..2 {
        let resumed = d.path().join(format!("resumed{k}"));
        let ck = full.join(format!("checkpoints/epoch_{k:03}.ckpt"));
        let o = dislab(&[
            "train",
            "--config",
            p(&cfg),
            "--in",
            p(&data),
            "--out",
            p(&resumed),
            "--resume",
            p(&ck),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        for f in ["checkpoint.ckpt", "history.csv", "predictions.csv"] {
            assert_eq!(
                fs::read(full.join(f)).unwrap(),
                fs::read(resumed.join(f)).unwrap(),
                "{f} after resuming from epoch {k}"
            );
        }
        assert!(manifest(&resumed).inputs.iter().any(|i| i.role == "resume"));
    }

    // A checkpoint from a different config is refused.
    let other = write_cfg(
        d.path(),
        "o.cfg",
        &SMOKE_TRAIN.replace("train.epochs_max=3", "train.epochs_max=4"),
    );
    let o = dislab(&[
        "train",
        "--config",
        p(&other),
        "--in",
        p(&data),
        "--out",
        p(&d.path().join("x")),
        "--resume",
        p(&full.join("checkpoints/epoch_000.ckpt")),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_with_runtime_failure() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "t.cfg", &format!("{SMOKE_TRAIN}train.lr=1e30\n"));
    let data = d.path().join("data");
    assert_eq!(code(&dislab(&["synth", "--config", p(&cfg), "--out", p(&data)])), 0);
    let o = dislab(&[
        "train",
        "--config",
        p(&cfg),
        "--in",
        p(&data),
        "--out",
        p(&d.path().join("t")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn compare_matches_library_output_and_self_comparison_is_zero() {
    let d = tempfile::tempdir().unwrap();
    let fx = fixture_config();
    let a = d.path().join("audit_a");
    let o = dislab(&[
        "audit",
        "--config",
        p(&fx),
        "--in",
        p(&predictions_path()),
        "--out",
        p(&a),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning:"));

    // A second audit from shifted scores.
    let shifted: String = fs::read_to_string(predictions_path())
        .unwrap()
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                return format!("{l}\n");
            }
            let mut f: Vec<String> = l.split(',').map(String::from).collect();
            let s: f64 = f[3].parse().unwrap();
            let s = if f[5] == "1" { (s * 0.8).min(1.0) } else { s };
            f[3] = format!("{s:.3}");
            format!("{}\n", f.join(","))
        })
        .collect();
    let pred_b = d.path().join("b.csv");
    fs::write(&pred_b, shifted).unwrap();
    let b = d.path().join("audit_b");
    assert_eq!(
        code(&dislab(&[
            "audit",
            "--config",
            p(&fx),
            "--in",
            p(&pred_b),
            "--out",
            p(&b)
        ])),
        0
    );

    let c = d.path().join("cmp");
    let o = dislab(&["compare", "--in", p(&a), "--in", p(&b), "--out", p(&c)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lib = d.path().join("lib");
    let cmp = compare_reports(
        &read_report_json(&a.join("audit.json")).unwrap(),
        &read_report_json(&b.join("audit.json")).unwrap(),
    )
    .unwrap();
    write_compare_files(&cmp, &lib).unwrap();
    for f in ["compare.csv", "summary.txt", "compare_disparity.svg"] {
        assert_eq!(fs::read(c.join(f)).unwrap(), fs::read(lib.join(f)).unwrap(), "{f}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains(&cmp.summary()));

    let s = d.path().join("self");
    assert_eq!(
        code(&dislab(&["compare", "--in", p(&a), "--in", p(&a), "--out", p(&s)])),
        0
    );
    let csv = fs::read_to_string(s.join("compare.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let delta = row.rsplit(',').next().unwrap();
        assert!(delta == "0" || delta == "NA", "{row}");
    }
}

#[test]
fn pipeline_is_hash_identical_across_runs_and_thread_counts() {
    let d = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.cfg");
    let mut trees = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let out = d.path().join(run);
        let o = dislab_env(
            &["all", "--config", p(&cfg), "--out", p(&out)],
            &[("TOOL_THREADS", threads)],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        trees.push(tree_hashes(&out).unwrap());
    }
    assert!(trees[0].len() > 40);
    assert_eq!(trees[0], trees[1]);
    assert_eq!(trees[0], trees[2]);
    for f in [
        "data/meta.csv",
        "baseline/predictions.csv",
        "disentangled/checkpoint.ckpt",
        "compare/summary.txt",
    ] {
        assert!(trees[0].contains_key(f), "{f}");
    }
    assert!(!trees[0].keys().any(|k| k.ends_with("timings.json")));

    let o = dislab_env(
        &["all", "--config", p(&cfg), "--out", p(&d.path().join("z"))],
        &[("TOOL_THREADS", "0")],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn seed_flag_changes_every_stream() {
    let d = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.cfg");
    let a = d.path().join("a");
    let b = d.path().join("b");
    assert_eq!(code(&dislab(&["synth", "--config", p(&cfg), "--out", p(&a)])), 0);
    assert_eq!(
        code(&dislab(&["synth", "--config", p(&cfg), "--out", p(&b), "--seed", "99"])),
        0
    );
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_ne!(ma.dataset_sha256, mb.dataset_sha256);
    assert_eq!(mb.seeds["gen"], 99);
    assert_eq!(mb.seeds["split"], 99);
}
