//! Metrics and the incremental-versus-batch benchmark.

use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::data::{Dataset, SplitMix64};
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};

/// Area under the ROC curve by the Mann-Whitney statistic; ties count 1/2.
/// Labels are `+1` (target, positive) and `-1` (outlier).
pub fn auc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".to_string()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval(
            "AUC needs at least one target and one outlier".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Precision, recall and F1 for the positive label, with flags for zero
/// denominators (the value is then reported as 0).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `[[TP, FN], [FP, TN]]`.
    pub confusion: [[usize; 2]; 2],
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

pub fn prf(predictions: &[i8], labels: &[i8], positive: i8) -> Result<Prf> {
    if predictions.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = [[0usize; 2]; 2];
    for (&p, &l) in predictions.iter().zip(labels) {
        let row = usize::from(l != positive);
        let col = usize::from(p != positive);
        m[row][col] += 1;
    }
    let (tp, fn_, fp) = (m[0][0] as f64, m[0][1] as f64, m[1][0] as f64);
    let ratio = |num: f64, den: f64| {
        if den > 0.0 {
            (num / den, false)
        } else {
            (0.0, true)
        }
    };
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fn_);
    let (f1, f1_undefined) = ratio(2.0 * precision * recall, precision + recall);
    Ok(Prf {
        precision,
        recall,
        f1,
        confusion: m,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    })
}

/// AUC plus threshold metrics at `f >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub auc: f64,
    #[serde(flatten)]
    pub prf: Prf,
    pub n: usize,
}

pub fn metrics(scores: &[f64], labels: &[i8]) -> Result<Metrics> {
    let predictions: Vec<i8> = scores
        .iter()
        .map(|&s| if s >= 0.0 { 1 } else { -1 })
        .collect();
    Ok(Metrics {
        auc: auc(scores, labels)?,
        prf: prf(&predictions, labels, 1)?,
        n: scores.len(),
    })
}

/// Scores a labelled dataset with a trained model.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(Vec<f64>, Metrics)> {
    let labels = data
        .y
        .as_ref()
        .ok_or_else(|| Error::Eval("dataset has no labels".to_string()))?;
    let scores = data
        .x
        .iter()
        .map(|x| model.score(x))
        .collect::<Result<Vec<_>>>()?;
    let m = metrics(&scores, labels)?;
    Ok((scores, m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchParams {
    pub model: ModelParams,
    /// Fraction of the targets used for training; the rest are held out.
    pub train_fraction: f64,
    pub seed: u64,
    /// Batch retrain every `stride` arrivals (the final size is always
    /// included); 0 retrains only at the final size.
    pub batch_stride: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            model: ModelParams::default(),
            train_fraction: 0.5,
            seed: 0,
            batch_stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantiles {
    pub median: f64,
    pub p95: f64,
}

impl Quantiles {
    /// Median and nearest-rank 95th percentile; zeros for an empty sample.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                median: 0.0,
                p95: 0.0,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            median,
            p95: v[rank - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub warmup_ms: f64,
    pub per_update_ms: Quantiles,
    /// Batch solve at the final training size.
    pub batch_retrain_ms: f64,
    /// All batch retrains of the batch arm.
    pub batch_total_ms: f64,
    pub batch_retrains: usize,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    pub dataset: String,
    #[serde(flatten)]
    pub params: BenchParams,
}

/// Solver counters from the incremental arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathStats {
    pub insertions: usize,
    pub migrations: usize,
    pub fallbacks: usize,
    pub cycling_guards: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Incremental arm.
    #[serde(flatten)]
    pub metrics: Metrics,
    pub batch: Metrics,
    /// Largest `|f_incremental - f_batch|` over the test set.
    pub max_score_gap: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub path: PathStats,
    pub timing: Timing,
    pub config: BenchConfig,
}

impl EvalReport {
    /// The report without wall-clock timings, which is reproducible.
    pub fn without_timing(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        v
    }

    pub fn table(&self, with_timing: bool) -> String {
        let mut rows: Vec<(String, String, String)> = Vec::new();
        let mut both = |name: &str, a: String, b: String| rows.push((name.to_string(), a, b));
        let (m, b) = (&self.metrics, &self.batch);
        both("auc", fmt6(m.auc), fmt6(b.auc));
        both("precision", fmt6(m.prf.precision), fmt6(b.prf.precision));
        both("recall", fmt6(m.prf.recall), fmt6(b.prf.recall));
        both("f1", fmt6(m.prf.f1), fmt6(b.prf.f1));
        let conf = |c: &[[usize; 2]; 2]| {
            format!("[[{}, {}], [{}, {}]]", c[0][0], c[0][1], c[1][0], c[1][1])
        };
        both("confusion", conf(&m.prf.confusion), conf(&b.prf.confusion));
        let one = |rows: &mut Vec<(String, String, String)>, name: &str, v: String| {
            rows.push((name.to_string(), v, String::new()))
        };
        one(
            &mut rows,
            "max_score_gap",
            format!("{:.3e}", self.max_score_gap),
        );
        one(&mut rows, "n_train", self.n_train.to_string());
        one(&mut rows, "n_test", self.n_test.to_string());
        one(&mut rows, "migrations", self.path.migrations.to_string());
        one(&mut rows, "fallbacks", self.path.fallbacks.to_string());
        one(
            &mut rows,
            "kkt_residual",
            format!("{:.3e}", self.path.kkt_residual),
        );
        if with_timing {
            let t = &self.timing;
            one(&mut rows, "warmup_ms", format!("{:.3}", t.warmup_ms));
            one(
                &mut rows,
                "update_ms_median",
                format!("{:.4}", t.per_update_ms.median),
            );
            one(
                &mut rows,
                "update_ms_p95",
                format!("{:.4}", t.per_update_ms.p95),
            );
            rows.push((
                "batch_retrain_ms".to_string(),
                String::new(),
                format!("{:.3}", t.batch_retrain_ms),
            ));
            rows.push((
                "batch_total_ms".to_string(),
                String::new(),
                format!("{:.3}", t.batch_total_ms),
            ));
        }
        let header = (
            "metric".to_string(),
            "incremental".to_string(),
            "batch".to_string(),
        );
        let w0 = rows
            .iter()
            .chain([&header])
            .map(|r| r.0.len())
            .max()
            .unwrap_or(0);
        let w1 = rows
            .iter()
            .chain([&header])
            .map(|r| r.1.len())
            .max()
            .unwrap_or(0);
        let w2 = rows
            .iter()
            .chain([&header])
            .map(|r| r.2.len())
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        for (a, b, c) in std::iter::once(&header).chain(rows.iter()) {
            out.push_str(format!("{a:<w0$}  {b:>w1$}  {c:>w2$}").trim_end());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table(true))
    }
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Trains on a seeded share of the targets, tests on the held-out targets
/// plus every outlier, and runs both arms:
///
/// * incremental: warmup batch fit, then one `partial_fit` per remaining
///   training point, each timed;
/// * batch: a full batch solve of the training prefix at every
///   `batch_stride`-th arrival and at the final size.
pub fn bench(data: &Dataset, params: &BenchParams) -> Result<EvalReport> {
    data.validate()?;
    let labels = data
        .y
        .as_ref()
        .ok_or_else(|| Error::Eval("bench needs a labelled dataset".to_string()))?;
    if !(params.train_fraction > 0.0 && params.train_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train fraction must be in (0,1], got {}",
            params.train_fraction
        )));
    }
    let mut targets: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == 1).collect();
    let outliers: Vec<usize> = (0..data.len()).filter(|&i| labels[i] != 1).collect();
    SplitMix64::new(params.seed).shuffle(&mut targets);
    let n_train = (params.train_fraction * targets.len() as f64).round() as usize;
    let (train_idx, held_out) = targets.split_at(n_train);
    let test_idx: Vec<usize> = held_out.iter().chain(&outliers).copied().collect();
    let test_labels: Vec<i8> = test_idx.iter().map(|&i| labels[i]).collect();
    if held_out.is_empty() || outliers.is_empty() {
        return Err(Error::Eval(format!(
            "test split needs both classes: {} held-out targets, {} outliers",
            held_out.len(),
            outliers.len()
        )));
    }
    let train: Vec<Vec<f64>> = train_idx.iter().map(|&i| data.x[i].clone()).collect();
    let warmup = params.model.warmup_size();
    if train.len() < warmup {
        return Err(Error::TooFewPoints {
            got: train.len(),
            need: warmup,
            ceil_inv_c: params.model.min_points(),
            warmup: params.model.warmup,
        });
    }

    let t = Instant::now();
    let mut inc = Model::fit(&train[..warmup], params.model)?;
    let warmup_ms = ms_since(t);
    let mut per_update = Vec::with_capacity(train.len() - warmup);
    for x in &train[warmup..] {
        let t = Instant::now();
        inc.partial_fit(x)?;
        per_update.push(ms_since(t));
    }

    let mut sizes: Vec<usize> = if params.batch_stride == 0 {
        Vec::new()
    } else {
        (warmup + 1..=train.len())
            .step_by(params.batch_stride)
            .collect()
    };
    if sizes.last() != Some(&train.len()) {
        sizes.push(train.len());
    }
    let mut batch_total_ms = 0.0;
    let mut batch_retrain_ms = 0.0;
    let mut batch = None;
    for &k in &sizes {
        let t = Instant::now();
        let m = Model::batch_fit(&train[..k], params.model)?;
        batch_retrain_ms = ms_since(t);
        batch_total_ms += batch_retrain_ms;
        batch = Some(m);
    }
    let batch = batch.expect("at least one batch size");

    let score_all = |m: &Model| {
        test_idx
            .iter()
            .map(|&i| m.score(&data.x[i]))
            .collect::<Result<Vec<f64>>>()
    };
    let inc_scores = score_all(&inc)?;
    let batch_scores = score_all(&batch)?;
    let max_score_gap = inc_scores
        .iter()
        .zip(&batch_scores)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let stats = inc.state().stats();
    Ok(EvalReport {
        metrics: metrics(&inc_scores, &test_labels)?,
        batch: metrics(&batch_scores, &test_labels)?,
        max_score_gap,
        n_train: train.len(),
        n_test: test_idx.len(),
        path: PathStats {
            insertions: stats.insertions,
            migrations: stats.migrations,
            fallbacks: stats.fallbacks,
            cycling_guards: stats.cycling_guards,
            kkt_residual: inc.kkt_residual(),
        },
        timing: Timing {
            warmup_ms,
            per_update_ms: Quantiles::of(&per_update),
            batch_retrain_ms,
            batch_total_ms,
            batch_retrains: sizes.len(),
            n_points: train.len(),
        },
        config: BenchConfig {
            dataset: data.name.clone(),
            params: *params,
        },
    })
}
