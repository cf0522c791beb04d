//! Detection metrics (ROC AUC, TDR at a fixed FDR) and the attention
//! coverage diagnostic.
//!
//! TDR is recall on FAKE samples; FDR is the false-alarm rate on REAL
//! samples. A sample counts as detected when its score is strictly above the
//! threshold.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Label;
use crate::saliency::ForgeryAttentionMap;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("undefined coverage: {0}")]
    UndefinedCoverage(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
}

impl ScoredSample {
    pub fn new(score: f64, label: Label) -> Self {
        Self { score, label }
    }
}

/// REAL scores sorted ascending, FAKE scores in input order.
fn split(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(MetricsError::Contract(format!("non-finite score {}", s.score)));
    }
    let mut reals: Vec<f64> = samples.iter().filter(|s| s.label == Label::Real).map(|s| s.score).collect();
    let fakes: Vec<f64> = samples.iter().filter(|s| s.label == Label::Fake).map(|s| s.score).collect();
    if reals.is_empty() || fakes.is_empty() {
        return Err(MetricsError::UndefinedMetric(format!(
            "needs both classes, got {} real and {} fake",
            reals.len(),
            fakes.len()
        )));
    }
    reals.sort_by(f64::total_cmp);
    Ok((reals, fakes))
}

/// Mann-Whitney AUC: P(fake > real) + P(fake = real) / 2, from exact pair
/// counts.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<f64> {
    let (reals, fakes) = split(samples)?;
    let (mut wins, mut ties) = (0u128, 0u128);
    for &f in &fakes {
        let below = reals.partition_point(|&r| r < f);
        let not_above = reals.partition_point(|&r| r <= f);
        wins += below as u128;
        ties += (not_above - below) as u128;
    }
    let pairs = 2 * reals.len() as u128 * fakes.len() as u128;
    Ok((2 * wins + ties) as f64 / pairs as f64)
}

/// Largest number of REAL false alarms allowed at `level`.
fn allowed_false_alarms(n_real: usize, level: f64) -> usize {
    (0..=n_real).rev().find(|&k| k as f64 / n_real as f64 <= level).unwrap_or(0)
}

/// The threshold `t*`: the smallest value with at most a `level` fraction of
/// REAL scores strictly above it.
pub fn fdr_threshold(samples: &[ScoredSample], level: f64) -> Result<f64> {
    check_level(level)?;
    let (reals, _) = split(samples)?;
    let k = allowed_false_alarms(reals.len(), level);
    Ok(reals[reals.len() - 1 - k])
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(MetricsError::Contract(format!("FDR level {level} outside (0, 1)")))
    }
}

/// Fraction of FAKE scores strictly above [`fdr_threshold`].
pub fn tdr_at_fdr(samples: &[ScoredSample], level: f64) -> Result<f64> {
    let t = fdr_threshold(samples, level)?;
    let (_, fakes) = split(samples)?;
    Ok(fakes.iter().filter(|&&f| f > t).count() as f64 / fakes.len() as f64)
}

/// Set when the REAL count cannot resolve `level`.
pub fn granularity_limited(n_real: usize, level: f64) -> bool {
    1.0 / n_real as f64 > level
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdrEntry {
    pub fdr: f64,
    pub tdr: f64,
    pub granularity_limited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_set: String,
    pub auc: f64,
    pub tdr: Vec<TdrEntry>,
    pub n_real: usize,
    pub n_fake: usize,
    pub warnings: Vec<String>,
    /// Mean attention coverage over FAKE samples with a forgery mask, when
    /// computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_coverage: Option<f64>,
}

impl EvalReport {
    pub fn from_scores(test_set: impl Into<String>, samples: &[ScoredSample], levels: &[f64]) -> Result<Self> {
        let n_real = samples.iter().filter(|s| s.label == Label::Real).count();
        let n_fake = samples.len() - n_real;
        let auc = roc_auc(samples)?;
        let mut tdr = Vec::with_capacity(levels.len());
        let mut warnings = Vec::new();
        for &level in levels {
            let limited = granularity_limited(n_real, level);
            if limited {
                let msg = format!("FDR {level} is finer than 1/{n_real} REAL samples; TDR is at the coarsest attainable rate");
                log::warn!("{msg}");
                warnings.push(msg);
            }
            tdr.push(TdrEntry {
                fdr: level,
                tdr: tdr_at_fdr(samples, level)?,
                granularity_limited: limited,
            });
        }
        Ok(Self {
            test_set: test_set.into(),
            auc,
            tdr,
            n_real,
            n_fake,
            warnings,
            attention_coverage: None,
        })
    }

    pub fn tdr_at(&self, level: f64) -> Option<f64> {
        self.tdr.iter().find(|e| e.fdr == level).map(|e| e.tdr)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["test_set".to_string(), "auc".into()];
        h.extend(self.tdr.iter().map(|e| format!("tdr@{}", e.fdr)));
        h.extend(["n_real".into(), "n_fake".into(), "attention_coverage".into()]);
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut row = vec![self.test_set.clone(), format!("{:.6}", self.auc)];
        row.extend(self.tdr.iter().map(|e| format!("{:.6}", e.tdr)));
        row.extend([
            self.n_real.to_string(),
            self.n_fake.to_string(),
            self.attention_coverage.map(|c| format!("{c:.6}")).unwrap_or_default(),
        ]);
        row
    }
}

/// Share of the attention mass inside `mask`.
pub fn attention_coverage(fam: &ForgeryAttentionMap, mask: &Array2<bool>) -> Result<f64> {
    if fam.dim() != mask.dim() {
        return Err(MetricsError::Contract(format!(
            "attention map {:?} and mask {:?} differ in shape",
            fam.dim(),
            mask.dim()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(MetricsError::Contract("empty forgery mask".into()));
    }
    let total = fam.sum();
    if total <= 0.0 {
        return Err(MetricsError::UndefinedCoverage("attention map is all zero".into()));
    }
    let inside: f64 = fam.values().iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    Ok(inside / total)
}
