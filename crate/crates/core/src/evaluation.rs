//! ROC curves, AUC and evaluation reports.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {i} is NaN")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!(
            "AUC undefined: need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Cumulative `(false positives, true positives)` after each distinct
/// threshold, highest score first; tied scores cross together.
fn roc_counts(scores: &[f64], labels: &[u8]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut out = vec![(0, 0)];
    let (mut fp, mut tp) = (0u64, 0u64);
    for (j, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(j + 1).is_none_or(|&n| scores[n] != scores[i]);
        if last_of_group {
            out.push((fp, tp));
        }
    }
    out
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(scores, labels)?;
    Ok(roc_counts(scores, labels)
        .into_iter()
        .map(|(fp, tp)| (fp as f64 / neg as f64, tp as f64 / pos as f64))
        .collect())
}

/// Trapezoidal area under the ROC curve, accumulated in exact integer
/// arithmetic before the final division.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let pts = roc_counts(scores, labels);
    // twice the area, in units of one (1/neg × 1/pos) cell
    let twice: u128 = pts
        .windows(2)
        .map(|w| u128::from(w[1].0 - w[0].0) * u128::from(w[1].1 + w[0].1))
        .sum();
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Mann–Whitney statistic: (concordant pairs + ½ ties) / (n_pos · n_neg),
/// computed from average ranks.
pub fn auc_mann_whitney(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // doubled ranks keep tie averages integral
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, average doubled = start + 1 + end
        let doubled = (start + 1 + end) as u128;
        let n_pos = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u128;
        doubled_rank_sum += doubled * n_pos;
        start = end;
    }
    let p = u128::from(pos);
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Anything that scores every record of a dataset.
pub trait Predictor {
    /// Probabilities in record order.
    fn predict(&self, ds: &Dataset) -> Result<Vec<f64>>;
    fn parameter_count(&self) -> usize;
    fn fingerprint(&self) -> String;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub roc_points: Vec<(f64, f64)>,
    pub params: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seconds_per_epoch: Option<f64>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[u8], params: usize, fingerprint: String) -> Result<Self> {
        let auc = auc(scores, labels)?;
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        Ok(Self {
            auc,
            n_pos,
            n_neg: labels.len() - n_pos,
            roc_points: roc_curve(scores, labels)?,
            params,
            seconds_per_epoch: None,
            fingerprint,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn write_roc_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "fpr,tpr")?;
        for (x, y) in &self.roc_points {
            writeln!(f, "{x},{y}")?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn evaluate(predictor: &dyn Predictor, ds: &Dataset) -> Result<EvalReport> {
    let scores = predictor.predict(ds)?;
    EvalReport::from_scores(&scores, &ds.labels(), predictor.parameter_count(), predictor.fingerprint())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_sweep() {
        let s = [0.8, 0.6, 0.4, 0.2];
        let l = [1, 0, 1, 0];
        assert_eq!(
            roc_curve(&s, &l).unwrap(),
            vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]
        );
        assert_eq!(auc(&s, &l).unwrap(), 0.75);
        assert_eq!(auc_mann_whitney(&s, &l).unwrap(), 0.75);
    }

    #[test]
    fn edge_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert!(roc_curve(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap().contains(&(0.0, 1.0)));
        let flat = [0.3; 6];
        let l = [1, 0, 0, 1, 0, 0];
        assert_eq!(roc_curve(&flat, &l).unwrap(), vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc(&flat, &l).unwrap(), 0.5);
        let err = auc(&[0.1, 0.2], &[1, 1]).unwrap_err().to_string();
        assert!(err.contains("AUC undefined"), "{err}");
        assert!(matches!(auc(&[f64::NAN, 0.2], &[1, 0]), Err(Error::Numeric(_))));
    }
}
