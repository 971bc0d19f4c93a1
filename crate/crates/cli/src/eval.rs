//! Full metric evaluation with a text table and a record file.

use std::fmt::Write as _;

use rfp_core::metrics::{evaluate_case, ClassMetrics, MetricsReport, Summary};
use rfp_core::segnet::SegNet;

use crate::dataset::Case;
use crate::error::CliResult;
use crate::train::{predict_cases, Record};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ids: Vec<String>,
    pub metrics: MetricsReport,
}

pub fn evaluate_predictions(preds: &[Vec<u8>], cases: &[Case], num_classes: usize) -> CliResult<EvalReport> {
    let mut metrics = MetricsReport::new(num_classes);
    let mut ids = Vec::with_capacity(cases.len());
    for (pred, case) in preds.iter().zip(cases) {
        let s = &case.sample;
        let spacing = s.spacing.map(f64::from);
        metrics.push(evaluate_case(pred, &s.labels, s.shape, spacing, num_classes)?);
        ids.push(case.id.clone());
    }
    Ok(EvalReport { ids, metrics })
}

pub fn evaluate(net: &SegNet<f32>, cases: &[Case], batch: usize) -> CliResult<EvalReport> {
    let preds = predict_cases(net, cases, batch)?;
    evaluate_predictions(&preds, cases, net.config.num_classes)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn summary_cell(s: Option<Summary>) -> String {
    s.map_or_else(|| "-".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.sd))
}

fn field(v: Option<f64>) -> String {
    v.map_or_else(|| "missing".to_string(), |x| format!("{x:?}"))
}

type Getter = fn(&ClassMetrics) -> Option<f64>;
const METRICS: [(&str, Getter); 3] = [("dsc", |m| m.dsc), ("assd", |m| m.assd), ("hd95", |m| m.hd95)];

impl EvalReport {
    /// Aligned table: one row per case and class, then mean ± sd per class.
    pub fn table(&self) -> String {
        let mut rows: Vec<[String; 5]> = vec![[
            "case".into(),
            "class".into(),
            "DSC".into(),
            "ASSD (mm)".into(),
            "HD95 (mm)".into(),
        ]];
        for (id, case) in self.ids.iter().zip(&self.metrics.cases) {
            for (i, m) in case.iter().enumerate() {
                rows.push([id.clone(), (i + 1).to_string(), cell(m.dsc), cell(m.assd), cell(m.hd95)]);
            }
        }
        for k in 1..self.metrics.num_classes {
            let [d, a, h] = METRICS.map(|(_, f)| summary_cell(self.metrics.class_summary(k, f)));
            rows.push(["mean".into(), k.to_string(), d, a, h]);
        }
        let mut widths = [0usize; 5];
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        for (ri, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(ci, (c, w))| {
                    let pad = w - c.chars().count();
                    if ci < 2 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if ri == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        if let Some(m) = self.metrics.mean_dsc() {
            let _ = writeln!(out, "mean foreground DSC {m:.4}");
        }
        out
    }

    /// One `event=case` record per case and class, one `event=summary`
    /// record per class and metric.
    pub fn records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for (id, case) in self.ids.iter().zip(&self.metrics.cases) {
            for (i, m) in case.iter().enumerate() {
                let mut r = Record::new("case");
                r.push("case", id).push("class", i + 1);
                for (name, f) in METRICS {
                    r.push(name, field(f(m)));
                }
                out.push(r);
            }
        }
        for k in 1..self.metrics.num_classes {
            for (name, f) in METRICS {
                let mut r = Record::new("summary");
                r.push("class", k).push("metric", name);
                match self.metrics.class_summary(k, f) {
                    Some(s) => r.push_f64("mean", s.mean).push_f64("sd", s.sd).push("count", s.count),
                    None => r.push("mean", "missing").push("sd", "missing").push("count", 0),
                };
                out.push(r);
            }
        }
        let mut r = Record::new("overall");
        r.push("mean_dsc", field(self.metrics.mean_dsc()));
        out.push(r);
        out
    }
}
