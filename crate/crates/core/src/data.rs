//! Admission records, JSONL ingestion and patient-grouped splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Issue, Result};

/// Width of every precomputed image or note feature vector.
pub const FEATURE_VECTOR_DIM: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NotesKind {
    Text,
    Vector,
}

/// Clinical notes of one admission, either raw text or precomputed vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Notes {
    Text(Vec<String>),
    Vectors(Vec<Vec<f64>>),
}

impl Notes {
    pub fn len(&self) -> usize {
        match self {
            Notes::Text(t) => t.len(),
            Notes::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> NotesKind {
        match self {
            Notes::Text(_) => NotesKind::Text,
            Notes::Vectors(_) => NotesKind::Vector,
        }
    }
}

/// One hospital admission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmissionRecord {
    pub patient_id: String,
    pub admission_id: String,
    /// Days × EHR features.
    pub ehr: Vec<Vec<f64>>,
    /// Image feature vectors in acquisition order; may be empty.
    pub cxr: Vec<Vec<f64>>,
    pub notes: Notes,
    pub notes_kind: NotesKind,
    pub label: u8,
}

impl AdmissionRecord {
    pub fn ehr_width(&self) -> Option<usize> {
        self.ehr.first().map(Vec::len)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub admissions: usize,
    pub patients: usize,
    pub positives: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<AdmissionRecord>,
    pub ehr_feature_names: Vec<String>,
}

/// Checks every record invariant; `expected_d` is the dataset-wide EHR width.
pub fn validate_record(rec: &AdmissionRecord, expected_d: Option<usize>) -> Vec<Issue> {
    let mut issues = Vec::new();
    let mut push = |field: String, message: String| {
        issues.push(Issue {
            line: None,
            field,
            message,
        })
    };

    if rec.label > 1 {
        push("label".into(), "label out of range".into());
    }
    if rec.ehr.is_empty() {
        push("ehr".into(), "at least one day of EHR data is required".into());
    }
    let d = expected_d.or_else(|| rec.ehr_width());
    for (row, day) in rec.ehr.iter().enumerate() {
        if let Some(d) = d {
            if day.len() != d {
                push(
                    format!("ehr[{row}]"),
                    format!("ehr row has {} columns, expected {d}", day.len()),
                );
            }
        }
        if let Some(col) = day.iter().position(|v| !v.is_finite()) {
            push(format!("ehr[{row}][{col}]"), "non-finite value".into());
        }
    }
    for (row, v) in rec.cxr.iter().enumerate() {
        if v.len() != FEATURE_VECTOR_DIM {
            push(
                format!("cxr[{row}]"),
                format!("cxr vector dim != {FEATURE_VECTOR_DIM} (got {})", v.len()),
            );
        }
        if let Some(col) = v.iter().position(|x| !x.is_finite()) {
            push(format!("cxr[{row}][{col}]"), "non-finite value".into());
        }
    }
    if rec.notes.kind() != rec.notes_kind && !rec.notes.is_empty() {
        push(
            "notes_kind".into(),
            format!("declared {:?} but notes are {:?}", rec.notes_kind, rec.notes.kind()),
        );
    }
    if let Notes::Vectors(vs) = &rec.notes {
        for (row, v) in vs.iter().enumerate() {
            if v.len() != FEATURE_VECTOR_DIM {
                push(
                    format!("notes[{row}]"),
                    format!("note vector dim != {FEATURE_VECTOR_DIM} (got {})", v.len()),
                );
            }
            if let Some(col) = v.iter().position(|x| !x.is_finite()) {
                push(format!("notes[{row}][{col}]"), "non-finite value".into());
            }
        }
    }
    issues
}

impl Dataset {
    pub fn new(records: Vec<AdmissionRecord>, ehr_feature_names: Vec<String>) -> Result<Self> {
        let ds = Self {
            records,
            ehr_feature_names,
        };
        let d = ds.ehr_dim();
        let issues: Vec<Issue> = ds
            .records
            .iter()
            .flat_map(|r| validate_record(r, d))
            .collect();
        if !issues.is_empty() {
            return Err(Error::Validation(issues));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// EHR width; `None` for an empty dataset.
    pub fn ehr_dim(&self) -> Option<usize> {
        if !self.ehr_feature_names.is_empty() {
            return Some(self.ehr_feature_names.len());
        }
        self.records.iter().find_map(AdmissionRecord::ehr_width)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn meta(&self) -> DatasetMeta {
        let patients: BTreeSet<&str> = self.records.iter().map(|r| r.patient_id.as_str()).collect();
        DatasetMeta {
            admissions: self.records.len(),
            patients: patients.len(),
            positives: self.records.iter().filter(|r| r.label == 1).count(),
        }
    }

    /// Patient ids in first-appearance order.
    pub fn patient_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.patient_id.clone()))
            .map(|r| r.patient_id.clone())
            .collect()
    }

    /// Records whose patient is in `patients`, in original order.
    pub fn subset(&self, patients: &BTreeSet<String>) -> Dataset {
        Dataset {
            records: self
                .records
                .iter()
                .filter(|r| patients.contains(&r.patient_id))
                .cloned()
                .collect(),
            ehr_feature_names: self.ehr_feature_names.clone(),
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a JSONL dataset. Malformed JSON aborts with the offending line
/// number; invariant violations are collected across the whole file.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AdmissionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
        lines.push(i + 1);
    }
    if records.is_empty() {
        log::warn!("{}: dataset is empty", path.display());
        return Ok(Dataset::default());
    }

    let d = records[0].ehr_width();
    let mut issues = Vec::new();
    for (rec, &line) in records.iter().zip(&lines) {
        if let (Some(d), Some(w)) = (d, rec.ehr_width()) {
            if w != d {
                return Err(Error::Data(format!(
                    "line {line}: schema mismatch, record has {w} EHR columns but the first record has {d}"
                )));
            }
        }
        issues.extend(validate_record(rec, d).into_iter().map(|mut iss| {
            iss.line = Some(line);
            iss
        }));
    }
    if !issues.is_empty() {
        return Err(Error::Validation(issues));
    }
    let names = (0..d.unwrap_or(0)).map(|j| format!("ehr_{j}")).collect();
    Ok(Dataset {
        records,
        ehr_feature_names: names,
    })
}

/// Fractions for a three-way split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

fn shuffled_patients(ds: &Dataset, seed: u64) -> Vec<String> {
    let mut ids = ds.patient_ids();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// Splits by patient so that no patient's admissions straddle two splits.
pub fn split_by_patient(
    ds: &Dataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let f = [fractions.train, fractions.val, fractions.test];
    if f.iter().any(|&x| x.is_nan() || x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got {f:?}"
        )));
    }
    let ids = shuffled_patients(ds, seed);
    let n = ids.len();
    if n < 3 {
        return Err(Error::Data(format!("{n} patient(s) cannot fill three splits")));
    }
    let mut n_val = ((f[1] * n as f64).round() as usize).max(1);
    let mut n_test = ((f[2] * n as f64).round() as usize).max(1);
    while n_val + n_test > n - 1 {
        if n_val >= n_test {
            n_val -= 1;
        } else {
            n_test -= 1;
        }
    }
    let n_train = n - n_val - n_test;
    let take = |range: std::ops::Range<usize>| -> BTreeSet<String> { ids[range].iter().cloned().collect() };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..n);
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}

/// Two-way patient-grouped split (e.g. development pool vs. holdout).
pub fn holdout_by_patient(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("holdout fraction {test_fraction} not in (0,1)")));
    }
    let ids = shuffled_patients(ds, seed);
    let n = ids.len();
    if n < 2 {
        return Err(Error::Data(format!("{n} patient(s) cannot fill two splits")));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let dev: BTreeSet<String> = ids[..n - n_test].iter().cloned().collect();
    let test: BTreeSet<String> = ids[n - n_test..].iter().cloned().collect();
    Ok((ds.subset(&dev), ds.subset(&test)))
}

/// Assigns patients to `k` folds round-robin after a seeded shuffle.
pub fn patient_folds(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<BTreeSet<String>>> {
    if k < 2 {
        return Err(Error::Config(format!("K must be at least 2, got {k}")));
    }
    let ids = shuffled_patients(ds, seed);
    if ids.len() < k {
        return Err(Error::Data(format!("{} patients cannot fill {k} folds", ids.len())));
    }
    let mut folds = vec![BTreeSet::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].insert(id);
    }
    Ok(folds)
}

/// Count of admissions per patient.
pub fn admissions_per_patient(ds: &Dataset) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in &ds.records {
        *m.entry(r.patient_id.clone()).or_default() += 1;
    }
    m
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub(crate) fn record_with_ehr(ehr: Vec<Vec<f64>>, label: u8) -> AdmissionRecord {
        AdmissionRecord {
            patient_id: "p".into(),
            admission_id: "a".into(),
            ehr,
            cxr: vec![],
            notes: Notes::Text(vec![]),
            notes_kind: NotesKind::Text,
            label,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(pid: &str, aid: &str, label: u8) -> AdmissionRecord {
        AdmissionRecord {
            patient_id: pid.into(),
            admission_id: aid.into(),
            ehr: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            cxr: vec![],
            notes: Notes::Text(vec!["chest pain".into()]),
            notes_kind: NotesKind::Text,
            label,
        }
    }

    fn patients(n: usize) -> Dataset {
        let recs = (0..n)
            .map(|i| record(&format!("p{i}"), &format!("a{i}"), (i % 2) as u8))
            .collect();
        Dataset::new(recs, vec![]).unwrap()
    }

    #[test]
    fn valid_record_passes() {
        assert!(validate_record(&record("p", "a", 1), Some(2)).is_empty());
    }

    #[test]
    fn label_two_is_rejected() {
        let issues = validate_record(&record("p", "a", 2), Some(2));
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].message, "label out of range");
    }

    #[test]
    fn short_cxr_vector_is_rejected() {
        let mut r = record("p", "a", 0);
        r.cxr = vec![vec![0.0; 1023]];
        let issues = validate_record(&r, Some(2));
        assert!(issues[0].message.starts_with("cxr vector dim != 1024"), "{:?}", issues);
    }

    #[test]
    fn nan_in_ehr_names_field_and_row() {
        let mut r = record("p", "a", 0);
        r.ehr[1][0] = f64::NAN;
        let issues = validate_record(&r, Some(2));
        assert_eq!(issues[0].field, "ehr[1][0]");
    }

    #[test]
    fn split_ten_patients() {
        let ds = patients(10);
        let f = SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        };
        let (a, b, c) = split_by_patient(&ds, f, 42).unwrap();
        assert_eq!((a.meta().patients, b.meta().patients, c.meta().patients), (8, 1, 1));
        let again = split_by_patient(&ds, f, 42).unwrap();
        assert_eq!(a, again.0);
        assert_eq!(c, again.2);
    }

    #[test]
    fn patient_admissions_stay_together() {
        let mut recs = vec![];
        for i in 0..6 {
            for j in 0..3 {
                recs.push(record(&format!("p{i}"), &format!("a{i}_{j}"), (j % 2) as u8));
            }
        }
        let ds = Dataset::new(recs, vec![]).unwrap();
        let (a, b, c) = split_by_patient(&ds, SplitFractions::default(), 7).unwrap();
        for part in [&a, &b, &c] {
            for n in admissions_per_patient(part).values() {
                assert_eq!(*n, 3);
            }
        }
        assert_eq!(a.len() + b.len() + c.len(), 18);
    }

    #[test]
    fn split_rejects_bad_fractions_and_tiny_sets() {
        let bad = SplitFractions {
            train: 0.5,
            val: 0.5,
            test: 0.5,
        };
        assert!(split_by_patient(&patients(10), bad, 0).is_err());
        assert!(split_by_patient(&patients(2), SplitFractions::default(), 0).is_err());
    }

    #[test]
    fn folds_partition_patients() {
        let ds = patients(23);
        let folds = patient_folds(&ds, 5, 3).unwrap();
        let total: usize = folds.iter().map(BTreeSet::len).sum();
        assert_eq!(total, 23);
        let union: BTreeSet<_> = folds.iter().flatten().collect();
        assert_eq!(union.len(), 23);
        assert!(patient_folds(&ds, 1, 3).is_err());
        assert!(patient_folds(&patients(3), 4, 3).is_err());
    }
}
