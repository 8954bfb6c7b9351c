//! Frozen audit fixture and golden CSVs rendered from brute-force metric
//! oracles. `DISLAB_BLESS=1` rewrites the fixture and the goldens; otherwise
//! they are only read.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use dislab_core::fairaudit::{fmt_num, read_predictions, PredictionRecord, PREDICTIONS_HEADER};
use dislab_core::synthgen::Sa;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const BINS: usize = 20;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/audit")
}

pub fn predictions_path() -> PathBuf {
    fixture_dir().join("predictions.csv")
}

pub fn perfect_path() -> PathBuf {
    fixture_dir().join("perfect.csv")
}

pub fn config_path() -> PathBuf {
    fixture_dir().join("audit.cfg")
}

pub fn golden_dir() -> PathBuf {
    fixture_dir().join("golden")
}

pub fn blessing() -> bool {
    std::env::var_os("DISLAB_BLESS").is_some()
}

fn na(x: Option<f64>) -> String {
    x.map_or("NA".into(), fmt_num)
}

// --- oracles ---------------------------------------------------------------

/// Pairwise AUROC: every (positive, negative) pair scores 1, 0.5 on ties.
pub fn auroc_pairs(records: &[&PredictionRecord]) -> Option<f64> {
    let pos: Vec<f64> = records.iter().filter(|r| r.y_true == 1).map(|r| r.score).collect();
    let neg: Vec<f64> = records.iter().filter(|r| r.y_true == 0).map(|r| r.score).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut s = 0.0;
    for &p in &pos {
        for &n in &neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(s / (pos.len() * neg.len()) as f64)
}

/// `(tp, fp, tn, fn)` of the stored hard labels.
fn counts(records: &[&PredictionRecord]) -> (usize, usize, usize, usize) {
    let c = |yh: u8, y: u8| records.iter().filter(|r| r.y_hat == yh && r.y_true == y).count();
    (c(1, 1), c(1, 0), c(0, 0), c(0, 1))
}

pub fn balanced_accuracy(records: &[&PredictionRecord]) -> Option<f64> {
    let (tp, fp, tn, fn_) = counts(records);
    if tp + fn_ == 0 || tn + fp == 0 {
        return None;
    }
    Some((tp as f64 / (tp + fn_) as f64 + tn as f64 / (tn + fp) as f64) / 2.0)
}

pub fn f1(records: &[&PredictionRecord]) -> Option<f64> {
    let (tp, fp, _, fn_) = counts(records);
    if 2 * tp + fp + fn_ == 0 {
        return None;
    }
    Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// `(model, treat_all)` net benefit at `t`, positives at `score > t`.
pub fn net_benefit(records: &[&PredictionRecord], t: f64) -> (f64, f64) {
    let n = records.len() as f64;
    let w = t / (1.0 - t);
    let tp = records.iter().filter(|r| r.score > t && r.y_true == 1).count() as f64;
    let fp = records.iter().filter(|r| r.score > t && r.y_true == 0).count() as f64;
    let pos = records.iter().filter(|r| r.y_true == 1).count() as f64;
    (tp / n - fp / n * w, pos / n - (n - pos) / n * w)
}

fn thresholds() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

// --- golden rendering ------------------------------------------------------

fn metrics_row(records: &[&PredictionRecord]) -> String {
    let n = records.len();
    let n_pos = records.iter().filter(|r| r.y_true == 1).count();
    if n == 0 {
        return "0,0,NA,NA,NA".into();
    }
    format!(
        "{n},{n_pos},{},{},{}",
        na(auroc_pairs(records)),
        na(balanced_accuracy(records)),
        na(f1(records))
    )
}

fn dca_rows(out: &mut String, group: &str, label: &str, records: &[&PredictionRecord]) {
    for t in thresholds() {
        let (m, a) = net_benefit(records, t);
        out.push_str(&format!(
            "{group},{label},{},{},{},0\n",
            fmt_num(t),
            fmt_num(m),
            fmt_num(a)
        ));
    }
}

/// Every CSV the audit of `records` must produce, as `(file name, contents)`.
pub fn oracle_csvs(records: &[PredictionRecord]) -> Vec<(String, String)> {
    let all: Vec<&PredictionRecord> = records.iter().collect();
    let mut files = Vec::new();

    let mut audit = String::from("sa,group,label,n,n_pos,auroc,balanced_accuracy,f1,disparity,missing\n");
    audit.push_str(&format!("overall,NA,all,{},NA,0\n", metrics_row(&all)));
    for sa in Sa::ALL {
        let groups: Vec<Vec<&PredictionRecord>> = (0..2u8)
            .map(|g| all.iter().copied().filter(|r| r.sa[sa.index()] == Some(g)).collect())
            .collect();
        let aucs: Vec<Option<f64>> = groups.iter().map(|g| auroc_pairs(g)).collect();
        let disparity = match (aucs[0], aucs[1]) {
            (Some(a), Some(b)) => Some((a - b).abs()),
            _ => None,
        };
        let missing = all.iter().filter(|r| r.sa[sa.index()].is_none()).count();
        for g in 0..2 {
            audit.push_str(&format!(
                "{sa},{g},{},{},{},{missing}\n",
                sa.group_labels()[g],
                metrics_row(&groups[g]),
                na(disparity)
            ));
        }

        let mut dca =
            String::from("group,label,threshold,net_benefit_model,net_benefit_treat_all,net_benefit_treat_none\n");
        for g in 0..2 {
            if !groups[g].is_empty() {
                dca_rows(&mut dca, &g.to_string(), sa.group_labels()[g], &groups[g]);
            }
        }
        files.push((format!("dca_{sa}.csv"), dca));

        for g in 0..2 {
            let mut neg = [0usize; BINS];
            let mut pos = [0usize; BINS];
            for r in &groups[g] {
                let mut b = 0;
                while b + 1 < BINS && r.score >= (b + 1) as f64 / BINS as f64 {
                    b += 1;
                }
                if r.y_true == 1 {
                    pos[b] += 1;
                } else {
                    neg[b] += 1;
                }
            }
            let mut s = String::from("bin_lower,bin_upper,count_y0,count_y1\n");
            for b in 0..BINS {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    fmt_num(b as f64 / BINS as f64),
                    fmt_num((b + 1) as f64 / BINS as f64),
                    neg[b],
                    pos[b]
                ));
            }
            files.push((format!("risk_{sa}_{g}.csv"), s));
        }
    }
    files.push(("audit.csv".into(), audit));

    let mut overall =
        String::from("group,label,threshold,net_benefit_model,net_benefit_treat_all,net_benefit_treat_none\n");
    dca_rows(&mut overall, "NA", "all", &all);
    files.push(("dca_overall.csv".into(), overall));
    files.sort();
    files
}

// --- fixture ---------------------------------------------------------------

/// `(image_id, patient_id, y_true, score text, y_hat, sa groups)`.
type Row = (String, String, u8, String, u8, [Option<u8>; 5]);

fn write_records(path: &Path, rows: &[Row]) {
    let mut s = format!("{PREDICTIONS_HEADER}\n");
    for (img, pat, y, score, yh, sa) in rows {
        s.push_str(&format!("{img},{pat},{y},{score},{yh}"));
        for g in sa {
            s.push_str(&g.map_or(",NA".into(), |g| format!(",{g}")));
        }
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

/// 200 records over 100 patients: three-decimal scores (so ties occur), an
/// insurance group with a single class and obesity partly missing.
fn generate_fixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut rows = Vec::new();
    for p in 0..100 {
        let bern = |rng: &mut ChaCha8Rng, q: f64| u8::from(rng.random::<f64>() < q);
        let age = bern(&mut rng, 0.25);
        let sex = bern(&mut rng, 0.5);
        let edu = bern(&mut rng, 0.5);
        let ins = bern(&mut rng, 0.15);
        let obe = if rng.random::<f64>() < 0.1 {
            None
        } else {
            Some(bern(&mut rng, 0.2))
        };
        for k in 0..2 {
            let y = if ins == 1 {
                0
            } else {
                bern(&mut rng, 0.3 + 0.3 * age as f64)
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            let centre = if y == 1 { 0.65 } else { 0.35 };
            let shift = if age == 1 { 0.08 } else { 0.0 };
            let score = (centre + shift + 0.15 * z).clamp(0.0, 1.0);
            let text = format!("{score:.3}");
            let yh = u8::from(text.parse::<f64>().unwrap() > 0.5);
            rows.push((
                format!("img{p:03}_{k}"),
                format!("pat{p:03}"),
                y,
                text,
                yh,
                [Some(age), Some(sex), Some(edu), Some(ins), obe],
            ));
        }
    }
    write_records(&predictions_path(), &rows);

    let perfect: Vec<_> = (0..40)
        .map(|i| {
            let y = u8::from(i < 12);
            (
                format!("img{i:03}"),
                format!("pat{i:03}"),
                y,
                y.to_string(),
                y,
                [
                    Some((i % 2) as u8),
                    Some((i / 2 % 2) as u8),
                    Some(0),
                    Some(1),
                    Some((i % 3 == 0) as u8),
                ],
            )
        })
        .collect();
    write_records(&perfect_path(), &perfect);
}

/// Regenerate fixture and goldens when blessing; return the golden file names.
pub fn ensure_goldens() -> BTreeSet<String> {
    if blessing() {
        fs::create_dir_all(golden_dir()).unwrap();
        generate_fixture();
        for entry in fs::read_dir(golden_dir()).unwrap() {
            fs::remove_file(entry.unwrap().path()).unwrap();
        }
        for (name, text) in oracle_csvs(&read_predictions(&predictions_path()).unwrap()) {
            fs::write(golden_dir().join(name), text).unwrap();
        }
    }
    fs::read_dir(golden_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect()
}

/// Differences between the CSVs in `out` and the goldens, one line each.
pub fn golden_mismatches(out: &Path) -> Vec<String> {
    let goldens = ensure_goldens();
    let produced: BTreeSet<String> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    let mut problems = Vec::new();
    for extra in produced.symmetric_difference(&goldens) {
        problems.push(format!("{extra}: present on one side only"));
    }
    for name in produced.intersection(&goldens) {
        let got = fs::read_to_string(out.join(name)).unwrap();
        let want = fs::read_to_string(golden_dir().join(name)).unwrap();
        if got != want {
            let line = got
                .lines()
                .zip(want.lines())
                .position(|(a, b)| a != b)
                .map_or(0, |i| i + 1);
            problems.push(format!("{name}: differs from golden at line {line}"));
        }
    }
    problems
}
