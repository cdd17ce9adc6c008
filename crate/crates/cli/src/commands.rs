//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use readmit_core::data::{holdout_by_patient, load_dataset, split_by_patient, Dataset};
use readmit_core::evaluation::{evaluate, EvalReport, Predictor};
use readmit_core::features::{
    feature_importances, patient_mean_features, select_top_k, train_random_forest, FeaturePipeline,
    FeatureSelection, Modality,
};
use readmit_core::model::{EncoderKind, ModelArtifact};
use readmit_core::synth::{generate_synthetic, meta_path};
use readmit_core::training::{kfold_train_with, train_model, write_history_csv, Ensemble};
use readmit_core::{Error, Result};

use crate::config::RunConfig;
use crate::{EvalArgs, KfoldArgs, ModelArgs, SelectArgs, SynthArgs, TrainArgs};

pub const MODEL_FILE: &str = "model.rdmt";
const MODEL_EXT: &str = "rdmt";

/// Config file, then `--seed`, falling back to `$PT_SEED`.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            require_file(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let env_seed = match std::env::var("PT_SEED") {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("PT_SEED={s:?} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    if let Some(s) = seed.or(env_seed) {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist or is not a file", path.display()),
        )))
    }
}

fn data_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let p = flag
        .or_else(|| cfg.paths.data.clone())
        .ok_or_else(|| Error::Config("no dataset given (--data or [paths] data)".into()))?;
    require_file(&p)?;
    Ok(p)
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let p = flag
        .or_else(|| cfg.paths.out.clone())
        .ok_or_else(|| Error::Config("no output directory given (--out or [paths] out)".into()))?;
    fs::create_dir_all(&p)?;
    Ok(p)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    if let Some(v) = a.patients {
        s.n_patients = v;
    }
    if let Some(v) = a.positive_rate {
        s.positive_rate = v;
    }
    if let Some(v) = a.d_ehr {
        s.d_ehr = v;
    }
    if let Some(v) = a.informative_ehr {
        s.n_informative_ehr = v;
    }
    if let Some(v) = a.informative_tokens {
        s.n_informative_tokens = v;
    }
    if let Some(v) = a.vocab_size {
        s.vocab_size = v;
    }
    if let Some(v) = a.ehr_weight {
        s.ehr_weight = v;
    }
    if let Some(v) = a.token_weight {
        s.token_weight = v;
    }
    if let Some(v) = a.noise_factors {
        s.noise_factors = v;
    }
    let (ds, meta) = generate_synthetic(s)?;
    ds.write_jsonl(&a.out)?;
    meta.write(&meta_path(&a.out))?;
    let m = ds.meta();
    println!(
        "wrote {} admissions of {} patients ({} positive, rate {:.3}) to {}",
        m.admissions,
        m.patients,
        m.positives,
        meta.empirical_positive_rate,
        a.out.display()
    );
    Ok(())
}

/// On-disk form of a feature selection.
#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionFile {
    pub k: usize,
    pub indices: Vec<usize>,
    pub importances: Vec<f64>,
}

impl SelectionFile {
    fn read(path: &Path) -> Result<FeatureSelection> {
        let f: SelectionFile = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let d = f.importances.len();
        if f.k != f.indices.len() || f.k == 0 || f.indices.iter().any(|&i| i >= d) {
            return Err(Error::Data(format!(
                "{}: k = {} with {} indices over {d} columns",
                path.display(),
                f.k,
                f.indices.len()
            )));
        }
        Ok(FeatureSelection {
            importances: f.importances,
            selected_indices: f.indices,
        })
    }
}

fn require_both_classes(ds: &Dataset, what: &str) -> Result<()> {
    let m = ds.meta();
    if m.positives == 0 || m.positives == m.admissions {
        return Err(Error::Data(format!(
            "{what} needs both classes, got {} positive of {} admissions",
            m.positives, m.admissions
        )));
    }
    Ok(())
}

pub fn select_features(cfg: RunConfig, a: SelectArgs) -> Result<()> {
    let data = data_path(a.data, &cfg)?;
    let k = a.top_k.or(cfg.pipeline.top_k).unwrap_or(100);
    let trees = a.trees.unwrap_or(cfg.pipeline.n_trees);
    let ds = load_dataset(&data)?;
    let d = ds.ehr_dim().ok_or_else(|| Error::Data("dataset is empty".into()))?;
    if k == 0 || k > d {
        return Err(Error::Config(format!("--top-k must lie in 1..={d}, got {k}")));
    }
    require_both_classes(&ds, "feature selection")?;
    let (x, y) = patient_mean_features(&ds)?;
    let forest = train_random_forest(&x, &y, trees, cfg.pipeline.seed)?;
    let sel = select_top_k(&feature_importances(&forest), k)?;
    write_json(
        &a.out,
        &SelectionFile {
            k,
            indices: sel.selected_indices.clone(),
            importances: sel.importances,
        },
    )?;
    println!("kept {k} of {d} EHR columns; top 5: {:?}", &sel.selected_indices[..k.min(5)]);
    Ok(())
}

/// Resolved inputs shared by `train` and `kfold`.
struct Prepared {
    cfg: RunConfig,
    data: PathBuf,
    out: PathBuf,
    selection: Option<FeatureSelection>,
}

fn prepare(mut cfg: RunConfig, a: ModelArgs) -> Result<Prepared> {
    let data = data_path(a.data, &cfg)?;
    let selection_path = a.selection.or_else(|| cfg.paths.selection.clone());
    if let Some(p) = &selection_path {
        require_file(p)?;
    }
    if a.no_select {
        cfg.pipeline.top_k = None;
    } else if let Some(k) = a.top_k {
        cfg.pipeline.top_k = Some(k);
    }
    if let Some(m) = a.modalities {
        cfg.model.active_modalities = m.iter().map(|s| Modality::parse(s)).collect::<Result<_>>()?;
    }
    if let Some(e) = a.encoder {
        cfg.model.encoder = EncoderKind::parse(&e)?;
    }
    if let Some(v) = a.dropout {
        cfg.model.dropout = v;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr_max {
        t.lr_max = v;
    }
    if let Some(v) = a.lr_min {
        t.lr_min = v;
    }
    if let Some(v) = a.alpha {
        t.loss.alpha = v;
    }
    if let Some(v) = a.gamma {
        t.loss.gamma = v;
    }
    if let Some(v) = a.smoothing {
        t.loss.smoothing = v;
    }
    cfg.validate()?;
    let selection = match (&selection_path, a.no_select) {
        (Some(p), false) => Some(SelectionFile::read(p)?),
        _ => None,
    };
    let out = out_dir(a.out, &cfg)?;
    Ok(Prepared {
        cfg,
        data,
        out,
        selection,
    })
}

fn fit_pipeline(p: &Prepared, train: &Dataset) -> Result<FeaturePipeline> {
    match &p.selection {
        Some(sel) => {
            let d = train.ehr_dim().unwrap_or(0);
            if sel.d() != d {
                return Err(Error::Data(format!(
                    "selection was computed over {} EHR columns, dataset has {d}",
                    sel.d()
                )));
            }
            FeaturePipeline::with_selection(train, sel.clone(), &p.cfg.pipeline)
        }
        None => FeaturePipeline::fit(train, &p.cfg.pipeline),
    }
}

#[derive(Serialize)]
struct TrainReport {
    modalities: Vec<Modality>,
    encoder: EncoderKind,
    epochs: usize,
    best_epoch: usize,
    best_val_auc: Option<f64>,
    seconds_per_epoch: f64,
    train_admissions: usize,
    val_admissions: usize,
    test_admissions: usize,
    /// Holdout evaluation; absent if the test split has a single class.
    test: Option<EvalReport>,
}

pub fn train(cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let p = prepare(cfg, a.common)?;
    let ds = load_dataset(&p.data)?;
    let (tr, va, te) = split_by_patient(&ds, p.cfg.split, p.cfg.train.seed)?;
    let pipeline = fit_pipeline(&p, &tr)?;
    let (artifact, outcome) = train_model(pipeline, &tr, &va, &p.cfg.model, &p.cfg.train)?;
    artifact.save(p.out.join(MODEL_FILE))?;
    write_history_csv(p.out.join("history.csv"), &outcome.history)?;

    let test = match evaluate(&artifact, &te) {
        Ok(mut r) => {
            r.seconds_per_epoch = Some(outcome.seconds_per_epoch);
            Some(r)
        }
        Err(Error::Data(msg)) => {
            log::warn!("no test AUC: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let report = TrainReport {
        modalities: artifact.model.modalities(),
        encoder: p.cfg.model.encoder,
        epochs: p.cfg.train.epochs,
        best_epoch: outcome.best_epoch,
        best_val_auc: outcome.best_val_auc(),
        seconds_per_epoch: outcome.seconds_per_epoch,
        train_admissions: tr.len(),
        val_admissions: va.len(),
        test_admissions: te.len(),
        test,
    };
    write_json(&p.out.join("report.json"), &report)?;
    println!(
        "best epoch {} val AUC {} test AUC {} | {} params, {:.2} s/epoch | {}",
        report.best_epoch,
        fmt_auc(report.best_val_auc),
        fmt_auc(report.test.as_ref().map(|r| r.auc)),
        artifact.model.count_parameters(),
        report.seconds_per_epoch,
        p.out.display()
    );
    Ok(())
}

fn fmt_auc(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".into(), |a| format!("{a:.4}"))
}

#[derive(Serialize)]
struct KfoldReport {
    k: usize,
    /// Ensemble on the held-out patients.
    auc: f64,
    runtime_seconds: f64,
    fold_val_auc: Vec<f64>,
    fold_test_auc: Vec<f64>,
    holdout: EvalReport,
}

pub fn fold_file(i: usize) -> String {
    format!("fold_{i:02}.{MODEL_EXT}")
}

pub fn kfold(cfg: RunConfig, a: KfoldArgs) -> Result<()> {
    if a.k < 2 {
        return Err(Error::Config(format!("--k must be at least 2, got {}", a.k)));
    }
    let p = prepare(cfg, a.common)?;
    let ds = load_dataset(&p.data)?;
    let (pool, holdout) = holdout_by_patient(&ds, a.holdout, p.cfg.train.seed)?;
    let pipeline = fit_pipeline(&p, &pool)?;
    let out = kfold_train_with(&pool, a.k, &pipeline, &p.cfg.model, &p.cfg.train)?;
    for (i, (m, h)) in out.ensemble.members.iter().zip(&out.histories).enumerate() {
        m.save(p.out.join(fold_file(i)))?;
        write_history_csv(p.out.join(format!("fold_{i:02}_history.csv")), h)?;
    }
    let fold_test_auc = out
        .ensemble
        .members
        .iter()
        .map(|m| evaluate(m, &holdout).map(|r| r.auc))
        .collect::<Result<Vec<_>>>()?;
    let holdout_report = evaluate(&out.ensemble, &holdout)?;
    let report = KfoldReport {
        k: a.k,
        auc: holdout_report.auc,
        runtime_seconds: out.seconds,
        fold_val_auc: out.fold_val_auc,
        fold_test_auc,
        holdout: holdout_report,
    };
    write_json(&p.out.join("report.json"), &report)?;
    println!("{:>4} {:>8} {:>12}", "K", "AUC", "runtime (s)");
    println!("{:>4} {:>8.4} {:>12.1}", report.k, report.auc, report.runtime_seconds);
    Ok(())
}

/// A single model file, or every `.rdmt` file of a directory in name order.
pub fn load_predictor(path: &Path) -> Result<Box<dyn Predictor>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|f| f.extension().is_some_and(|e| e == MODEL_EXT));
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("{} holds no .{MODEL_EXT} files", path.display())));
        }
        let members = files.iter().map(ModelArtifact::load).collect::<Result<_>>()?;
        Ok(Box::new(Ensemble { members }))
    } else {
        require_file(path)?;
        Ok(Box::new(ModelArtifact::load(path)?))
    }
}

pub fn eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let data = data_path(a.data, &cfg)?;
    if !a.model.exists() {
        require_file(&a.model)?;
    }
    let predictor = load_predictor(&a.model)?;
    let ds = load_dataset(&data)?;
    let report = evaluate(predictor.as_ref(), &ds)?;
    let out = out_dir(a.out, &cfg)?;
    report.write_json(out.join("report.json"))?;
    report.write_roc_csv(out.join("roc.csv"))?;
    println!(
        "AUC {:.4} on {} admissions ({} positive), {} params",
        report.auc,
        report.n_pos + report.n_neg,
        report.n_pos,
        report.params
    );
    Ok(())
}
