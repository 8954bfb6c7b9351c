//! Minimal SVG plots: decision curves, risk histograms and AUROC disparity bars.

use super::report::{Comparison, DecisionCurve, GroupValue, RiskHistogram, SaReport};
use crate::synthgen::Sa;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Canvas {
    body: String,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn new(title: &str, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) -> Self {
        let mut c = Canvas {
            body: String::new(),
            x,
            y,
        };
        c.body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            W / 2.0,
            esc(title)
        ));
        c.body.push_str(&format!(
            "<line x1=\"{PAD}\" y1=\"{b:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n\
             <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b:.1}\" stroke=\"black\"/>\n",
            b = H - PAD,
            r = W - PAD
        ));
        c.body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n\
             <text x=\"12\" y=\"{:.1}\" font-size=\"11\" transform=\"rotate(-90 12 {:.1})\" text-anchor=\"middle\">{}</text>\n",
            W / 2.0,
            H - 12.0,
            esc(xlabel),
            H / 2.0,
            H / 2.0,
            esc(ylabel)
        ));
        for (v, at) in [(x.0, PAD), (x.1, W - PAD)] {
            c.body.push_str(&format!(
                "<text x=\"{at:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{v:.2}</text>\n",
                H - PAD + 14.0
            ));
        }
        for (v, at) in [(y.0, H - PAD), (y.1, PAD)] {
            c.body.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{at:.1}\" text-anchor=\"end\" font-size=\"10\">{v:.2}</text>\n",
                PAD - 4.0
            ));
        }
        c
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        let y = y.clamp(self.y.0, self.y.1);
        H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }

    fn polyline(&mut self, xs: &[f64], ys: &[f64], color: &str, dash: bool) {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.1},{:.1}", self.px(x), self.py(y)))
            .collect();
        self.body.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{} points=\"{}\"/>\n",
            if dash { " stroke-dasharray=\"4 3\"" } else { "" },
            pts.join(" ")
        ));
    }

    fn rect(&mut self, x0: f64, x1: f64, y0: f64, y1: f64, color: &str) {
        let (l, r) = (self.px(x0), self.px(x1));
        let (t, b) = (self.py(y1), self.py(y0));
        self.body.push_str(&format!(
            "<rect x=\"{l:.1}\" y=\"{t:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n",
            (r - l).max(0.0),
            (b - t).max(0.0)
        ));
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = PAD + 4.0 + 14.0 * i as f64;
            self.body.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{}</text>\n",
                W - PAD - 120.0,
                y,
                W - PAD - 106.0,
                y + 9.0,
                esc(label)
            ));
        }
    }

    fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
             <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }
}

/// Net benefit against threshold for each subgroup, with treat-all and treat-none references.
pub fn dca_svg(sa: Sa, curves: &[&GroupValue<DecisionCurve>]) -> String {
    let ymax = curves
        .iter()
        .flat_map(|c| c.value.net_benefit_model.iter().chain(&c.value.net_benefit_treat_all))
        .copied()
        .fold(0.05, f64::max);
    let mut cv = Canvas::new(
        &format!("Decision curves by {sa}"),
        (0.0, 1.0),
        (-0.05, ymax * 1.1),
        "threshold probability",
        "net benefit",
    );
    let mut legend = Vec::new();
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % 2];
        let label = sa.group_labels()[c.group as usize];
        cv.polyline(&c.value.thresholds, &c.value.net_benefit_model, color, false);
        cv.polyline(&c.value.thresholds, &c.value.net_benefit_treat_all, color, true);
        legend.push((format!("{label} model"), color));
    }
    if let Some(c) = curves.first() {
        cv.polyline(&c.value.thresholds, &c.value.net_benefit_treat_none, COLORS[3], false);
        legend.push(("treat none".to_string(), COLORS[3]));
    }
    cv.legend(&legend);
    cv.finish()
}

/// Score histograms per subgroup, negatives and positives overlaid.
pub fn risk_svg(sa: Sa, hists: &[&GroupValue<RiskHistogram>]) -> String {
    let panel_h = H;
    let mut parts = Vec::new();
    for (i, h) in hists.iter().enumerate() {
        let ymax = h
            .value
            .neg
            .iter()
            .chain(&h.value.pos)
            .copied()
            .max()
            .unwrap_or(1)
            .max(1) as f64;
        let label = sa.group_labels()[h.group as usize];
        let mut cv = Canvas::new(
            &format!("Risk distribution, {sa} = {label}"),
            (0.0, 1.0),
            (0.0, ymax),
            "predicted risk",
            "count",
        );
        let b = h.value.bins as f64;
        for k in 0..h.value.bins {
            let (x0, x1) = (k as f64 / b, (k + 1) as f64 / b);
            let mid = (x0 + x1) / 2.0;
            cv.rect(x0, mid, 0.0, h.value.neg[k] as f64, COLORS[0]);
            cv.rect(mid, x1, 0.0, h.value.pos[k] as f64, COLORS[1]);
        }
        cv.legend(&[("Normal".into(), COLORS[0]), ("Referable".into(), COLORS[1])]);
        parts.push(format!(
            "<g transform=\"translate(0 {:.1})\">\n{}</g>\n",
            i as f64 * panel_h,
            cv.body
        ));
    }
    let total_h = panel_h * hists.len().max(1) as f64;
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{total_h}\" viewBox=\"0 0 {W} {total_h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
        parts.concat()
    )
}

fn bars(title: &str, ylabel: &str, items: &[(String, Option<f64>, Option<f64>)], names: [&str; 2]) -> String {
    let ymax = items
        .iter()
        .flat_map(|(_, a, b)| [*a, *b])
        .flatten()
        .fold(0.05, f64::max);
    let n = items.len().max(1) as f64;
    let mut cv = Canvas::new(title, (0.0, n), (0.0, ymax * 1.1), "", ylabel);
    for (i, (label, a, b)) in items.iter().enumerate() {
        let x = i as f64;
        if let Some(a) = a {
            cv.rect(x + 0.15, x + 0.5, 0.0, *a, COLORS[0]);
        }
        if let Some(b) = b {
            cv.rect(x + 0.5, x + 0.85, 0.0, *b, COLORS[1]);
        }
        let at = cv.px(x + 0.5);
        cv.body.push_str(&format!(
            "<text x=\"{at:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
            H - PAD + 26.0,
            esc(label)
        ));
    }
    cv.legend(&[(names[0].into(), COLORS[0]), (names[1].into(), COLORS[1])]);
    cv.finish()
}

/// Subgroup AUROC bar pairs per attribute, labelled with the gap.
pub fn disparity_svg(per_sa: &[SaReport]) -> String {
    let items: Vec<(String, Option<f64>, Option<f64>)> = per_sa
        .iter()
        .map(|s| {
            let gap = s.disparity.map_or("N/A".to_string(), |d| format!("{:.1}", 100.0 * d));
            (format!("{} (gap {gap})", s.sa), s.groups[0].auroc, s.groups[1].auroc)
        })
        .collect();
    bars("Subgroup AUROC by attribute", "AUROC", &items, ["group 0", "group 1"])
}

/// Disparity bars of the baseline next to the disentangled model.
pub fn compare_svg(cmp: &Comparison) -> String {
    let items: Vec<(String, Option<f64>, Option<f64>)> = cmp
        .rows
        .iter()
        .filter(|r| r.metric == "disparity")
        .map(|r| (r.scope.clone(), r.baseline, r.disentangled))
        .collect();
    bars(
        "AUROC disparity: baseline vs disentangled",
        "AUROC gap",
        &items,
        ["baseline", "disentangled"],
    )
}
