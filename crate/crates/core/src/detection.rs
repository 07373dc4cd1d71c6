//! OOD scoring functions and threshold-free detection metrics.
//!
//! Higher scores mean "more in-distribution". An input is accepted as ID when
//! its score is `>= τ`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Minimum number of ID scores for the 95% TPR level to be meaningful.
pub const MIN_ID_SCORES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Msp,
    #[serde(rename = "maxlogit")]
    MaxLogit,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::Msp => "msp",
            Scorer::MaxLogit => "maxlogit",
        }
    }

    pub fn score_row(self, logits: &[f64]) -> f64 {
        match self {
            Scorer::Msp => msp_score(logits),
            Scorer::MaxLogit => maxlogit_score(logits),
        }
    }

    pub fn score(self, logits: &Matrix) -> Vec<f64> {
        logits.row_iter().map(|r| self.score_row(r)).collect()
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msp" => Ok(Scorer::Msp),
            "maxlogit" | "max-logit" | "max_logit" => Ok(Scorer::MaxLogit),
            other => Err(Error::invalid(format!("unknown scorer `{other}` (expected msp or maxlogit)"))),
        }
    }
}

/// Maximum softmax probability.
pub fn msp_score(logits: &[f64]) -> f64 {
    let lse = log_sum_exp(logits);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max - lse).exp()
}

pub fn maxlogit_score(logits: &[f64]) -> f64 {
    logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    id_scores: Vec<f64>,
    ood_scores: Vec<f64>,
    scorer: Scorer,
}

impl ScoreSeries {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>, scorer: Scorer) -> Result<Self> {
        if id_scores.is_empty() || ood_scores.is_empty() {
            return Err(Error::invalid("score series must both be nonempty"));
        }
        if id_scores.iter().chain(&ood_scores).any(|s| !s.is_finite()) {
            return Err(Error::invalid("scores must be finite"));
        }
        Ok(Self {
            id_scores,
            ood_scores,
            scorer,
        })
    }

    /// Scores two logit matrices with `scorer`.
    pub fn from_logits(id_logits: &Matrix, ood_logits: &Matrix, scorer: Scorer) -> Result<Self> {
        Self::new(scorer.score(id_logits), scorer.score(ood_logits), scorer)
    }

    pub fn id_scores(&self) -> &[f64] {
        &self.id_scores
    }

    pub fn ood_scores(&self) -> &[f64] {
        &self.ood_scores
    }

    pub fn scorer(&self) -> Scorer {
        self.scorer
    }

    /// Applies `f` to every score; used by invariance checks.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.id_scores.iter().map(|&s| f(s)).collect(),
            self.ood_scores.iter().map(|&s| f(s)).collect(),
            self.scorer,
        )
    }
}

/// Returns `(fpr95, τ)` with `τ` the `⌈0.05 n⌉`-th smallest ID score.
pub fn fpr_at_tpr95(series: &ScoreSeries) -> Result<(f64, f64)> {
    let n = series.id_scores.len();
    if n < MIN_ID_SCORES {
        return Err(Error::invalid(format!(
            "FPR95 needs at least {MIN_ID_SCORES} ID scores, got {n}"
        )));
    }
    let mut id = series.id_scores.clone();
    id.sort_by(f64::total_cmp);
    let k = n.div_ceil(20);
    let tau = id[k - 1];
    let fp = series.ood_scores.iter().filter(|&&s| s >= tau).count();
    Ok((fp as f64 / series.ood_scores.len() as f64, tau))
}

/// Mann–Whitney AUROC with ties counted as one half, via sorting.
pub fn auroc(series: &ScoreSeries) -> f64 {
    let mut id = series.id_scores.clone();
    id.sort_by(f64::total_cmp);
    let n = id.len();
    // Twice the statistic, kept integral: 2·#{id > ood} + #{id == ood}.
    let mut twice: u128 = 0;
    for &o in &series.ood_scores {
        let below = id.partition_point(|&v| v < o);
        let not_above = id.partition_point(|&v| v <= o);
        let greater = n - not_above;
        let equal = not_above - below;
        twice += 2 * greater as u128 + equal as u128;
    }
    twice as f64 / (2.0 * n as f64 * series.ood_scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

/// Equal-width bins over the joint range. A degenerate range (every score
/// identical) yields a single bin.
pub fn score_histogram(series: &ScoreSeries, bins: usize) -> Result<Vec<HistogramBin>> {
    if bins < 2 {
        return Err(Error::invalid(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let all = series.id_scores.iter().chain(&series.ood_scores);
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if lo == hi {
        return Ok(vec![HistogramBin {
            left: lo,
            right: hi,
            id_count: series.id_scores.len(),
            ood_count: series.ood_scores.len(),
        }]);
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            left: lo + b as f64 * width,
            right: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            id_count: 0,
            ood_count: 0,
        })
        .collect();
    let index = |s: f64| (((s - lo) / width) as usize).min(bins - 1);
    for &s in &series.id_scores {
        out[index(s)].id_count += 1;
    }
    for &s in &series.ood_scores {
        out[index(s)].ood_count += 1;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scorer: Scorer,
    pub fpr95: f64,
    pub auroc: f64,
    pub threshold: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub histogram: Vec<HistogramBin>,
}

impl DetectionReport {
    pub fn from_series(series: &ScoreSeries, bins: usize) -> Result<Self> {
        let (fpr95, threshold) = fpr_at_tpr95(series)?;
        Ok(Self {
            scorer: series.scorer,
            fpr95,
            auroc: auroc(series),
            threshold,
            n_id: series.id_scores.len(),
            n_ood: series.ood_scores.len(),
            histogram: score_histogram(series, bins)?,
        })
    }

    /// `bin_left,bin_right,id_count,ood_count` rows with a header.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,id_count,ood_count\n");
        for b in &self.histogram {
            out.push_str(&format!("{},{},{},{}\n", b.left, b.right, b.id_count, b.ood_count));
        }
        out
    }
}
