use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub importances: Vec<f64>,
    /// Column indices, most important first.
    pub selected_indices: Vec<usize>,
}

impl FeatureSelection {
    pub fn k(&self) -> usize {
        self.selected_indices.len()
    }

    pub fn d(&self) -> usize {
        self.importances.len()
    }

    /// Keeps every column in natural order.
    pub fn identity(d: usize) -> Self {
        Self {
            importances: vec![1.0 / d.max(1) as f64; d],
            selected_indices: (0..d).collect(),
        }
    }
}

/// One row per record: the column means of its EHR matrix over days.
pub fn patient_mean_features(ds: &Dataset) -> Result<(Tensor, Vec<u8>)> {
    let d = ds
        .ehr_dim()
        .ok_or_else(|| Error::Data("cannot build EHR features from an empty dataset".into()))?;
    let mut values = Vec::with_capacity(ds.len() * d);
    for rec in &ds.records {
        let n = rec.ehr.len() as f64;
        let mut mean = vec![0.0; d];
        for day in &rec.ehr {
            if day.len() != d {
                return Err(Error::Dimension(format!(
                    "admission {} has {} EHR columns, expected {d}",
                    rec.admission_id,
                    day.len()
                )));
            }
            mean.iter_mut().zip(day).for_each(|(m, v)| *m += v);
        }
        values.extend(mean.into_iter().map(|m| m / n));
    }
    Ok((Tensor::new(vec![ds.len(), d], values)?, ds.labels()))
}

/// Indices of the `k` largest importances; equal importances keep ascending index order.
pub fn select_top_k(importances: &[f64], k: usize) -> Result<FeatureSelection> {
    let d = importances.len();
    if k == 0 || k > d {
        return Err(Error::Config(format!("top-k must lie in 1..={d}, got {k}")));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(FeatureSelection {
        importances: importances.to_vec(),
        selected_indices: order,
    })
}

/// Projects an `n × d` EHR matrix onto the selected columns, in selection order.
pub fn apply_selection(ehr: &[Vec<f64>], sel: &FeatureSelection) -> Result<Tensor> {
    let k = sel.k();
    let mut values = Vec::with_capacity(ehr.len() * k);
    for day in ehr {
        for &j in &sel.selected_indices {
            let v = day.get(j).ok_or_else(|| {
                Error::Dimension(format!("selected column {j} out of range for width {}", day.len()))
            })?;
            values.push(*v);
        }
    }
    Tensor::new(vec![ehr.len(), k], values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests_support::record_with_ehr;

    #[test]
    fn top_k_cases() {
        assert_eq!(select_top_k(&[0.5, 0.3, 0.2], 2).unwrap().selected_indices, [0, 1]);
        assert_eq!(select_top_k(&[0.4, 0.4, 0.2], 1).unwrap().selected_indices, [0]);
        assert_eq!(select_top_k(&[0.1, 0.6, 0.3], 3).unwrap().selected_indices, [1, 2, 0]);
        assert!(select_top_k(&[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn selection_is_scale_invariant() {
        let imp = [0.05, 0.3, 0.3, 0.25, 0.1];
        let scaled: Vec<f64> = imp.iter().map(|v| v * 7.5).collect();
        assert_eq!(
            select_top_k(&imp, 3).unwrap().selected_indices,
            select_top_k(&scaled, 3).unwrap().selected_indices
        );
    }

    #[test]
    fn apply_selection_cases() {
        let ehr = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let id = apply_selection(&ehr, &FeatureSelection::identity(3)).unwrap();
        assert_eq!(id.to_rows(), ehr);
        let sel = FeatureSelection {
            importances: vec![0.0, 1.0, 0.0],
            selected_indices: vec![1],
        };
        let one = apply_selection(&ehr, &sel).unwrap();
        assert_eq!(one.shape(), &[2, 1]);
        assert_eq!(one.values(), &[2.0, 5.0]);
        let bad = FeatureSelection {
            importances: vec![1.0; 5],
            selected_indices: vec![4],
        };
        assert!(apply_selection(&ehr, &bad).is_err());
    }

    #[test]
    fn mean_features_per_record() {
        let ds = Dataset {
            records: vec![
                record_with_ehr(vec![vec![1.0, 2.0], vec![3.0, 4.0]], 1),
                record_with_ehr(vec![vec![5.0, 6.0]], 0),
                record_with_ehr(vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 5.0]], 1),
            ],
            ehr_feature_names: vec![],
        };
        let (x, y) = patient_mean_features(&ds).unwrap();
        assert_eq!(x.to_rows(), vec![vec![2.0, 3.0], vec![5.0, 6.0], vec![1.0, 2.0]]);
        assert_eq!(y, [1, 0, 1]);
    }
}
