//! Accuracy and mean average precision, plus the metrics CSV format shared by
//! every training strategy.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of [`compute_metrics`]. `absent_classes` lists classes that were
/// excluded from the mAP because they never occur in the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub map: f64,
    pub absent_classes: Vec<usize>,
}

impl MetricsReport {
    pub fn has_warnings(&self) -> bool {
        !self.absent_classes.is_empty()
    }
}

/// Accuracy (argmax, ties broken toward the lowest class index) and mAP
/// (mean over classes of one-vs-rest average precision).
pub fn compute_metrics(probabilities: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let (n, k) = (probabilities.dim(0), probabilities.dim(1));
    if labels.len() != n {
        return Err(Error::Shape {
            context: "compute_metrics",
            expected: format!("{n} labels"),
            found: format!("{}", labels.len()),
        });
    }
    let p = probabilities.data();
    for ni in 0..n {
        let row_sum: f64 = p[ni * k..(ni + 1) * k].iter().sum();
        if (row_sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "compute_metrics: probability row {ni} sums to {row_sum}, not 1"
            )));
        }
    }
    for &y in labels {
        if y >= k {
            return Err(Error::Index {
                context: "compute_metrics label",
                index: y,
                bound: k,
            });
        }
    }

    let mut correct = 0usize;
    for (ni, &y) in labels.iter().enumerate() {
        let row = &p[ni * k..(ni + 1) * k];
        let mut best = 0usize;
        for ki in 1..k {
            if row[ki] > row[best] {
                best = ki;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / n as f64;

    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    let mut absent = Vec::new();
    for class in 0..k {
        let positives = labels.iter().filter(|&&y| y == class).count();
        if positives == 0 {
            absent.push(class);
            continue;
        }
        ap_sum += average_precision(p, n, k, class, labels);
        ap_count += 1;
    }
    let map = if ap_count == 0 { 0.0 } else { ap_sum / ap_count as f64 };
    Ok(MetricsReport {
        accuracy,
        map,
        absent_classes: absent,
    })
}

/// One-vs-rest AP for `class`: rank samples by score (descending, stable by
/// sample index), then average precision at each positive hit.
fn average_precision(p: &[f64], n: usize, k: usize, class: usize, labels: &[usize]) -> f64 {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        p[b * k + class]
            .partial_cmp(&p[a * k + class])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] == class {
            hits += 1;
            precision_sum += hits as f64 / (rank + 1) as f64;
        }
    }
    precision_sum / hits as f64
}

/// One row of the metrics CSV: run_id,strategy,stage,epoch,split,loss,accuracy,map
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub strategy: String,
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub map: f64,
}

pub const METRICS_HEADER: &str = "run_id,strategy,stage,epoch,split,loss,accuracy,map";

/// Shortest round-trip decimal form; stable across runs for identical f64s.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.strategy,
            r.stage,
            r.epoch,
            r.split,
            fmt_f64(r.loss),
            fmt_f64(r.accuracy),
            fmt_f64(r.map)
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(Error::contract(format!("bad metrics CSV header: {line}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::contract(format!(
                "metrics CSV line {i} has {} fields",
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::contract(format!("bad float {s} on line {i}")))
        };
        rows.push(MetricsRow {
            run_id: fields[0].to_string(),
            strategy: fields[1].to_string(),
            stage: fields[2].to_string(),
            epoch: fields[3]
                .parse()
                .map_err(|_| Error::contract(format!("bad epoch on line {i}")))?,
            split: fields[4].to_string(),
            loss: parse_f(fields[5])?,
            accuracy: parse_f(fields[6])?,
            map: parse_f(fields[7])?,
        });
    }
    Ok(rows)
}

/// Mean/std summary of several per-seed metrics CSVs, grouped by
/// (strategy, stage, epoch, split).
pub fn summarize_runs(runs: &[Vec<MetricsRow>]) -> String {
    #[derive(Default)]
    struct Acc {
        loss: Vec<f64>,
        accuracy: Vec<f64>,
        map: Vec<f64>,
    }
    let mut groups: BTreeMap<(String, String, usize, String), Acc> = BTreeMap::new();
    for run in runs {
        for r in run {
            let key = (
                r.strategy.clone(),
                r.stage.clone(),
                r.epoch,
                r.split.clone(),
            );
            let acc = groups.entry(key).or_default();
            acc.loss.push(r.loss);
            acc.accuracy.push(r.accuracy);
            acc.map.push(r.map);
        }
    }
    let stats = |xs: &[f64]| -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let mut out = String::from(
        "strategy,stage,epoch,split,n,loss_mean,loss_std,accuracy_mean,accuracy_std,map_mean,map_std\n",
    );
    for ((strategy, stage, epoch, split), acc) in &groups {
        let (lm, ls) = stats(&acc.loss);
        let (am, astd) = stats(&acc.accuracy);
        let (mm, ms) = stats(&acc.map);
        out.push_str(&format!(
            "{strategy},{stage},{epoch},{split},{},{},{},{},{},{},{}\n",
            acc.loss.len(),
            fmt_f64(lm),
            fmt_f64(ls),
            fmt_f64(am),
            fmt_f64(astd),
            fmt_f64(mm),
            fmt_f64(ms)
        ));
    }
    out
}
