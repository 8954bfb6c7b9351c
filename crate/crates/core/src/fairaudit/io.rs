//! CSV/JSON serialization of predictions, audit reports and comparisons.
//!
//! Report CSVs print numbers with 6 significant digits and `NA` for
//! undefined values. `predictions.csv` keeps full precision for scores so
//! that an audit of the file equals an audit of the in-memory records.

use std::fs;
use std::path::Path;

use super::report::{AuditReport, Comparison};
use super::svg;
use super::{AuditError, PredictionRecord};
use crate::synthgen::Sa;

pub const PREDICTIONS_HEADER: &str = "image_id,patient_id,y_true,score,y_hat,age,sex,education,insurance,obesity";

/// `%g`-style formatting with 6 significant digits.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return "NA".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or("NA".into(), fmt_num)
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<(), AuditError> {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.image_id, r.patient_id, r.y_true, r.score, r.y_hat
        ));
        for g in r.sa {
            match g {
                Some(g) => out.push_str(&format!(",{g}")),
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, AuditError> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let err = |row: usize, column: &str, msg: String| AuditError::Schema {
        file: file.clone(),
        row,
        column: column.to_string(),
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != PREDICTIONS_HEADER {
        return Err(err(
            0,
            "header",
            format!("expected `{PREDICTIONS_HEADER}`, found `{header}`"),
        ));
    }
    let columns: Vec<&str> = PREDICTIONS_HEADER.split(',').collect();
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != columns.len() {
            return Err(err(
                row,
                "*",
                format!("expected {} fields, found {}", columns.len(), f.len()),
            ));
        }
        let bit = |k: usize| -> Result<u8, AuditError> {
            match f[k] {
                "0" => Ok(0),
                "1" => Ok(1),
                v => Err(err(row, columns[k], format!("expected 0 or 1, found `{v}`"))),
            }
        };
        let score: f64 = f[3]
            .parse()
            .map_err(|_| err(row, "score", format!("not a number: `{}`", f[3])))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(err(row, "score", format!("{score} is outside [0, 1]")));
        }
        let mut sa = [None; 5];
        for a in Sa::ALL {
            let k = 5 + a.index();
            sa[a.index()] = if f[k] == "NA" { None } else { Some(bit(k)?) };
        }
        if f[0].is_empty() || f[1].is_empty() {
            return Err(err(row, "image_id", "identifiers must be non-empty".into()));
        }
        records.push(PredictionRecord {
            image_id: f[0].to_string(),
            patient_id: f[1].to_string(),
            y_true: bit(2)?,
            score,
            y_hat: bit(4)?,
            sa,
        });
    }
    Ok(records)
}

pub fn write_report_json(report: &AuditReport, path: &Path) -> Result<(), AuditError> {
    fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<AuditReport, AuditError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Write every CSV and SVG of an audit into `dir`. Returns warnings for
/// subgroups whose plots were omitted.
pub fn write_audit_files(report: &AuditReport, dir: &Path) -> Result<Vec<String>, AuditError> {
    fs::create_dir_all(dir)?;
    let mut warnings = Vec::new();

    let mut audit = String::from("sa,group,label,n,n_pos,auroc,balanced_accuracy,f1,disparity,missing\n");
    let o = &report.overall;
    audit.push_str(&format!(
        "overall,NA,all,{},{},{},{},{},NA,0\n",
        o.n,
        o.n_pos,
        opt(o.auroc),
        opt(o.balanced_accuracy),
        opt(o.f1)
    ));
    for s in &report.per_sa {
        for g in &s.groups {
            audit.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                s.sa,
                g.group,
                g.label,
                g.n,
                g.n_pos,
                opt(g.auroc),
                opt(g.balanced_accuracy),
                opt(g.f1),
                opt(s.disparity),
                s.missing
            ));
            if g.n == 0 {
                warnings.push(format!("{} group `{}` is empty; its plots are omitted", s.sa, g.label));
            } else if g.auroc.is_none() {
                warnings.push(format!("{} group `{}` has a single class; AUROC is N/A", s.sa, g.label));
            }
        }
    }
    fs::write(dir.join("audit.csv"), audit)?;

    let dca_header = "group,label,threshold,net_benefit_model,net_benefit_treat_all,net_benefit_treat_none\n";
    if let Some(c) = &report.overall_dca {
        let mut s = String::from(dca_header);
        for i in 0..c.thresholds.len() {
            s.push_str(&format!(
                "NA,all,{},{},{},{}\n",
                fmt_num(c.thresholds[i]),
                fmt_num(c.net_benefit_model[i]),
                fmt_num(c.net_benefit_treat_all[i]),
                fmt_num(c.net_benefit_treat_none[i])
            ));
        }
        fs::write(dir.join("dca_overall.csv"), s)?;
    }
    for sa in Sa::ALL {
        let mut s = String::from(dca_header);
        let curves: Vec<_> = report.dca.iter().filter(|d| d.sa == sa).collect();
        for d in &curves {
            let label = sa.group_labels()[d.group as usize];
            let c = &d.value;
            for i in 0..c.thresholds.len() {
                s.push_str(&format!(
                    "{},{label},{},{},{},{}\n",
                    d.group,
                    fmt_num(c.thresholds[i]),
                    fmt_num(c.net_benefit_model[i]),
                    fmt_num(c.net_benefit_treat_all[i]),
                    fmt_num(c.net_benefit_treat_none[i])
                ));
            }
        }
        fs::write(dir.join(format!("dca_{sa}.csv")), s)?;
        if !curves.is_empty() {
            fs::write(dir.join(format!("dca_{sa}.svg")), svg::dca_svg(sa, &curves))?;
        }

        let hists: Vec<_> = report.risk.iter().filter(|r| r.sa == sa).collect();
        for h in &hists {
            let mut s = String::from("bin_lower,bin_upper,count_y0,count_y1\n");
            let b = h.value.bins as f64;
            for i in 0..h.value.bins {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    fmt_num(i as f64 / b),
                    fmt_num((i + 1) as f64 / b),
                    h.value.neg[i],
                    h.value.pos[i]
                ));
            }
            fs::write(dir.join(format!("risk_{sa}_{}.csv", h.group)), s)?;
        }
        let nonempty: Vec<_> = hists
            .into_iter()
            .filter(|h| h.value.neg.iter().chain(&h.value.pos).any(|&c| c > 0))
            .collect();
        if !nonempty.is_empty() {
            fs::write(dir.join(format!("risk_{sa}.svg")), svg::risk_svg(sa, &nonempty))?;
        }
    }
    fs::write(dir.join("disparity.svg"), svg::disparity_svg(&report.per_sa))?;

    if !report.ci.is_empty() {
        let mut s = String::from("sa,group,auroc_lower,auroc_upper,valid,resamples\n");
        for c in &report.ci {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.sa.map_or("overall".to_string(), |a| a.to_string()),
                c.group.map_or("NA".to_string(), |g| g.to_string()),
                opt(c.lower),
                opt(c.upper),
                c.valid,
                c.resamples
            ));
        }
        fs::write(dir.join("audit_ci.csv"), s)?;
    }
    write_report_json(report, &dir.join("audit.json"))?;
    Ok(warnings)
}

pub fn write_compare_files(cmp: &Comparison, dir: &Path) -> Result<(), AuditError> {
    fs::create_dir_all(dir)?;
    let mut s = String::from("metric,scope,group,baseline,disentangled,delta\n");
    for r in &cmp.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.metric,
            r.scope,
            if r.group.is_empty() { "NA" } else { &r.group },
            opt(r.baseline),
            opt(r.disentangled),
            opt(r.delta)
        ));
    }
    fs::write(dir.join("compare.csv"), s)?;
    fs::write(dir.join("summary.txt"), cmp.summary())?;
    fs::write(dir.join("compare_disparity.svg"), svg::compare_svg(cmp))?;
    Ok(())
}
