use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold-0.5 classification metrics plus ranking AUC. `roc_auc` and
/// `mcc` are `None` when the labels contain a single class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub roc_auc: Option<f64>,
    pub mcc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.n() as f64
    }

    /// `2TP / (2TP + FP + FN)`, 0 when there are no positives at all.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }

    /// Matthews correlation; 0 when a marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let d = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if d == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / d.sqrt()
        }
    }
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Argument("metrics of an empty set".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Mann-Whitney statistic: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Uses mid-ranks over sorted scores.
pub fn roc_auc_rank(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Trapezoidal area under the ROC curve traced by lowering the threshold
/// through each distinct score.
pub fn roc_auc_trapezoid(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp as f64 / pos as f64, fp as f64 / neg as f64);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        (prev_tpr, prev_fpr) = (tpr, fpr);
    }
    Ok(Some(area))
}

pub fn metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    let (pos, neg) = check(scores, labels)?;
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Argument(format!("label {bad} is not binary")));
    }
    let c = Confusion::from_predictions(scores, labels, threshold);
    let both = pos > 0 && neg > 0;
    Ok(EvalReport {
        n: c.n(),
        accuracy: c.accuracy(),
        f1: c.f1(),
        roc_auc: roc_auc_rank(scores, labels)?,
        mcc: both.then(|| c.mcc()),
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub f1: f64,
    pub roc_auc: Option<f64>,
    pub mcc: Option<f64>,
}

/// Per-seed reports with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_seeds: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<EvalReport>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

/// Mean and `n - 1` standard deviation. Values are sorted before summing so
/// the result does not depend on their order.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn aggregate(seeds: &[u64], reports: Vec<EvalReport>) -> Result<AggregateReport> {
    if reports.len() < 2 || reports.len() != seeds.len() {
        return Err(Error::Argument(format!(
            "aggregation needs at least 2 runs with one seed each, got {} runs for {} seeds",
            reports.len(),
            seeds.len()
        )));
    }
    let col = |f: &dyn Fn(&EvalReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let opt_col = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
        reports.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| mean_std(&v))
    };
    let (acc, f1) = (col(&|r| r.accuracy), col(&|r| r.f1));
    let (auc, mcc) = (opt_col(&|r| r.roc_auc), opt_col(&|r| r.mcc));
    Ok(AggregateReport {
        n_seeds: reports.len(),
        seeds: seeds.to_vec(),
        mean: MetricSummary {
            accuracy: acc.0,
            f1: f1.0,
            roc_auc: auc.map(|a| a.0),
            mcc: mcc.map(|a| a.0),
        },
        std: MetricSummary {
            accuracy: acc.1,
            f1: f1.1,
            roc_auc: auc.map(|a| a.1),
            mcc: mcc.map(|a| a.1),
        },
        per_seed: reports,
    })
}

/// Runs `run` once per seed and aggregates the reports.
pub fn multi_seed_eval(mut run: impl FnMut(u64) -> Result<EvalReport>, seeds: &[u64]) -> Result<AggregateReport> {
    if seeds.len() < 2 {
        return Err(Error::Argument("multi-seed evaluation needs at least 2 seeds".into()));
    }
    let reports = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    aggregate(seeds, reports)
}
