//! Multi-label metrics, power error, the raw-sequence baseline and report files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform_init, Graph, ParamStore, Tensor, Var};
use crate::preprocess::NormalizedCycle;
use crate::rng::rng_for;
use crate::train::{fit_params, predict, EpochRecord, Example, Model, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// number of positive ground-truth labels
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// headline accuracy: mean per-sample |Y∧Ŷ| / |Y∨Ŷ|, empty∨empty counted as 1
    pub accuracy_jaccard: f64,
    /// fraction of samples whose whole label vector is right
    pub accuracy_exact: f64,
    /// running appliances correctly found, pooled over all samples
    pub recall_micro: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub per_class: Vec<ClassMetrics>,
    pub mae_power: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn multilabel_metrics(y: &[Vec<u8>], y_hat: &[Vec<u8>]) -> Result<MetricReport> {
    if y.len() != y_hat.len() {
        return Err(Error::shape("multilabel_metrics", &[y.len()], &[y_hat.len()]));
    }
    if y.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let k = y[0].len();
    for (a, b) in y.iter().zip(y_hat) {
        if a.len() != k || b.len() != k {
            return Err(Error::shape("multilabel_metrics", &[y.len(), k], &[a.len(), b.len()]));
        }
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let (mut jaccard, mut exact) = (0.0, 0usize);
    for (a, b) in y.iter().zip(y_hat) {
        let (mut inter, mut union) = (0usize, 0usize);
        for c in 0..k {
            let (t, p) = (a[c] == 1, b[c] == 1);
            match (t, p) {
                (true, true) => tp[c] += 1,
                (false, true) => fp[c] += 1,
                (true, false) => fn_[c] += 1,
                (false, false) => {}
            }
            inter += usize::from(t && p);
            union += usize::from(t || p);
        }
        jaccard += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        exact += usize::from(a == b);
    }
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fn_[c]);
            ClassMetrics {
                precision,
                recall,
                f1: f1(precision, recall),
                support: tp[c] + fn_[c],
            }
        })
        .collect();
    let n = y.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k.max(1) as f64;
    Ok(MetricReport {
        accuracy_jaccard: jaccard / n,
        accuracy_exact: exact as f64 / n,
        recall_micro: ratio(tp.iter().sum(), tp.iter().sum::<usize>() + fn_.iter().sum::<usize>()),
        precision_macro: mean(|m| m.precision),
        recall_macro: mean(|m| m.recall),
        f1_macro: mean(|m| m.f1),
        per_class,
        mae_power: None,
    })
}

/// Mean absolute error over all entries of two `[M×K]` tables.
pub fn power_mae(est: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::shape("power_mae", &[est.len()], &[truth.len()]));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in est.iter().zip(truth) {
        if a.len() != b.len() {
            return Err(Error::shape("power_mae", &[est.len(), a.len()], &[truth.len(), b.len()]));
        }
        sum += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        count += a.len();
    }
    if count == 0 {
        return Err(Error::invalid("power_mae needs at least one value"));
    }
    Ok(sum / count as f64)
}

/// Thresholded predictions of `model` on `examples`, scored.
pub fn evaluate_model(model: &Model, examples: &[Example], threshold: f64) -> Result<(MetricReport, Vec<Vec<u8>>)> {
    let k = model.num_classes();
    let mut preds = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        if e.label.len() != k {
            return Err(Error::invalid(format!(
                "sample {i} has {} labels but the model has {k} outputs",
                e.label.len()
            )));
        }
        preds.push(predict(model, &e.cycle, threshold)?.on_off);
    }
    let truth: Vec<Vec<u8>> = examples.iter().map(|e| e.label.clone()).collect();
    Ok((multilabel_metrics(&truth, &preds)?, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub kernel: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            dilations: vec![1, 2, 4],
            kernel: 3,
        }
    }
}

/// Conv1d stack on the normalized current alone, flattened into a dense sigmoid layer.
#[derive(Debug, Clone)]
pub struct RawSequenceModel {
    cfg: BaselineConfig,
    n_cyc: usize,
    num_classes: usize,
    pub params: ParamStore,
}

impl RawSequenceModel {
    pub fn new(cfg: BaselineConfig, n_cyc: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if cfg.channels == 0 || cfg.kernel == 0 || cfg.dilations.is_empty() || cfg.dilations.contains(&0) {
            return Err(Error::invalid("baseline widths, kernel and dilations must be ≥ 1"));
        }
        if n_cyc == 0 || num_classes == 0 {
            return Err(Error::invalid("baseline needs n_cyc ≥ 1 and at least one class"));
        }
        let mut rng = rng_for(seed, "baseline.init");
        let mut params = ParamStore::new(seed);
        let (c, k) = (cfg.channels, cfg.kernel);
        let mut cin = 1;
        for l in 0..cfg.dilations.len() {
            params.insert(format!("baseline.conv.{l}.weight"), uniform_init(&mut rng, &[c, cin, k], cin * k, c * k));
            params.insert(format!("baseline.conv.{l}.bias"), Tensor::zeros(&[c]));
            cin = c;
        }
        let flat = c * n_cyc;
        params.insert("baseline.head.weight", uniform_init(&mut rng, &[num_classes, flat], flat, num_classes));
        params.insert("baseline.head.bias", Tensor::zeros(&[num_classes]));
        Ok(Self {
            cfg,
            n_cyc,
            num_classes,
            params,
        })
    }

    pub fn forward(&self, g: &mut Graph, cycle: &NormalizedCycle) -> Result<Var> {
        forward_rawseq(&self.cfg, self.n_cyc, self.num_classes, g, cycle)
    }

    pub fn probabilities(&self, cycle: &NormalizedCycle) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let p = self.forward(&mut g, cycle)?;
        Ok(g.value(p).data().to_vec())
    }
}

fn forward_rawseq(cfg: &BaselineConfig, n_cyc: usize, k: usize, g: &mut Graph, cycle: &NormalizedCycle) -> Result<Var> {
    if cycle.len() != n_cyc {
        return Err(Error::invalid(format!("cycle has {} samples, baseline expects {n_cyc}", cycle.len())));
    }
    let mut x = g.constant(Tensor::new(vec![1, n_cyc], cycle.current.clone())?);
    for (l, &d) in cfg.dilations.iter().enumerate() {
        let w = g.param(&format!("baseline.conv.{l}.weight"))?;
        let b = g.param(&format!("baseline.conv.{l}.bias"))?;
        x = g.conv1d(x, w, d, true)?;
        x = g.add_row_bias(x, b)?;
        x = g.relu(x);
    }
    let x = g.reshape(x, &[cfg.channels * n_cyc, 1])?;
    let w = g.param("baseline.head.weight")?;
    let b = g.param("baseline.head.bias")?;
    let y = g.matmul(w, x)?;
    let y = g.reshape(y, &[k])?;
    let y = g.add_row_bias(y, b)?;
    Ok(g.sigmoid(y))
}

/// Trains the raw-sequence baseline on `train` and scores it on `test`.
pub fn baseline_rawseq(
    train: &[Example],
    test: &[Example],
    cfg: &BaselineConfig,
    tc: &TrainConfig,
) -> Result<(MetricReport, Vec<EpochRecord>)> {
    let first = train.first().ok_or_else(|| Error::invalid("no labeled samples"))?;
    let (k, n) = (first.label.len(), first.cycle.len());
    for (i, e) in train.iter().chain(test).enumerate() {
        if e.label.len() != k {
            return Err(Error::invalid(format!("sample {i} has {} labels, expected {k}", e.label.len())));
        }
    }
    let mut model = RawSequenceModel::new(cfg.clone(), n, k, tc.seed)?;
    let arch = (model.cfg.clone(), n, k);
    let log = fit_params(&mut model.params, train, tc, None, |g, c| {
        forward_rawseq(&arch.0, arch.1, arch.2, g, c)
    })?;
    let mut preds = Vec::with_capacity(test.len());
    for e in test {
        let p = model.probabilities(&e.cycle)?;
        preds.push(p.iter().map(|&v| u8::from(v >= 0.5)).collect());
    }
    let truth: Vec<Vec<u8>> = test.iter().map(|e| e.label.clone()).collect();
    Ok((multilabel_metrics(&truth, &preds)?, log))
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub metrics: MetricReport,
}

const CSV_HEADER: [&str; 7] = [
    "Method",
    "Accuracy",
    "Precision",
    "Recall",
    "F1-score",
    "ExactMatch",
    "MicroRecall",
];

pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.method.clone(),
            format!("{:.6}", m.accuracy_jaccard),
            format!("{:.6}", m.precision_macro),
            format!("{:.6}", m.recall_macro),
            format!("{:.6}", m.f1_macro),
            format!("{:.6}", m.accuracy_exact),
            format!("{:.6}", m.recall_micro),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report_json(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(rows).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fixed-width text table.
pub fn render_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>9}  {:>6}  {:>8}\n",
        "Method", "Accuracy", "Precision", "Recall", "F1-score"
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.3}  {:>9.3}  {:>6.3}  {:>8.3}",
            r.method, m.accuracy_jaccard, m.precision_macro, m.recall_macro, m.f1_macro
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let y = vec![vec![1, 0, 1], vec![0, 1, 0], vec![0, 0, 0]];
        let m = multilabel_metrics(&y, &y).unwrap();
        assert_eq!(m.f1_macro, 1.0);
        assert_eq!(m.accuracy_jaccard, 1.0);
        assert_eq!(m.accuracy_exact, 1.0);
        assert_eq!(m.precision_macro, 1.0);
        assert_eq!(m.recall_micro, 1.0);
    }

    #[test]
    fn hand_example() {
        let y = vec![vec![1, 0], vec![0, 1]];
        let p = vec![vec![1, 1], vec![0, 1]];
        let m = multilabel_metrics(&y, &p).unwrap();
        assert_eq!(m.per_class[0].precision, 1.0);
        assert_eq!(m.per_class[0].recall, 1.0);
        assert_eq!(m.per_class[1].precision, 0.5);
        assert_eq!(m.per_class[1].recall, 1.0);
        assert!((m.f1_macro - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.accuracy_jaccard, 0.75);
        assert_eq!(m.accuracy_exact, 0.5);
    }

    #[test]
    fn silent_predictor_scores_zero() {
        let y = vec![vec![1, 0], vec![1, 1]];
        let p = vec![vec![0, 0], vec![0, 0]];
        let m = multilabel_metrics(&y, &p).unwrap();
        assert_eq!(m.precision_macro, 0.0);
        assert_eq!(m.recall_macro, 0.0);
        assert_eq!(m.f1_macro, 0.0);
    }

    #[test]
    fn shape_errors() {
        assert!(multilabel_metrics(&[vec![1]], &[vec![1], vec![0]]).is_err());
        assert!(multilabel_metrics(&[vec![1, 0]], &[vec![1]]).is_err());
        assert!(power_mae(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn mae_examples() {
        let t = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(power_mae(&t, &t).unwrap(), 0.0);
        let off: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|v| v + 5.0).collect()).collect();
        assert_eq!(power_mae(&off, &t).unwrap(), 5.0);
        let e = vec![vec![0.5, 2.5], vec![1.0, 4.25]];
        assert_eq!(power_mae(&e, &t).unwrap(), (0.5 + 0.5 + 2.0 + 0.25) / 4.0);
    }

    #[test]
    fn table_lists_every_method() {
        let m = multilabel_metrics(&[vec![1]], &[vec![1]]).unwrap();
        let rows = vec![
            ReportRow { method: "Signature CNN".into(), metrics: m.clone() },
            ReportRow { method: "Sequence CNN".into(), metrics: m },
        ];
        let t = render_table(&rows);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("Sequence CNN") && t.contains("F1-score"));
    }
}
