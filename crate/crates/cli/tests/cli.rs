use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[pipeline]
top_k = 6
n_trees = 10
tfidf_dim = 32

[model]
d_model = 12
n_heads = 2
ehr_layers = 1
notes_layers = 1
d_ff = 16

[train]
batch_size = 8
epochs = 2
"#;

struct Ws {
    dir: TempDir,
}

impl Ws {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.path("small.toml"), SMALL).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_readmit"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("PT_SEED")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }

    fn synth(&self, name: &str, patients: usize, d_ehr: usize) {
        let (p, d) = (patients.to_string(), d_ehr.to_string());
        self.ok(&["synth", "--out", name, "--patients", &p, "--d-ehr", &d, "--vocab-size", "30"]);
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn synth_is_deterministic_and_honours_pt_seed() {
    let ws = Ws::new();
    ws.ok(&["synth", "--out", "a.jsonl", "--seed", "7"]);
    ws.ok(&["synth", "--out", "b.jsonl", "--seed", "7"]);
    assert_eq!(read(ws.path("a.jsonl")), read(ws.path("b.jsonl")));
    assert!(ws.path("a.jsonl.meta.json").is_file());

    let out = Command::new(env!("CARGO_BIN_EXE_readmit"))
        .args(["synth", "--out", "c.jsonl"])
        .current_dir(ws.dir.path())
        .env("PT_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(ws.path("a.jsonl")), read(ws.path("c.jsonl")));

    let meta: serde_json::Value = serde_json::from_slice(&read(ws.path("a.jsonl.meta.json"))).unwrap();
    let rate = meta["empirical_positive_rate"].as_f64().unwrap();
    assert!((rate - 0.2).abs() <= 0.03, "positive rate {rate}");
    let text = String::from_utf8(read(ws.path("a.jsonl"))).unwrap();
    let patients: std::collections::BTreeSet<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["patient_id"].to_string())
        .collect();
    assert_eq!(patients.len(), 500);

    assert_eq!(ws.code(&["synth", "--out", "d.jsonl", "--positive-rate", "1.5"]), 2);
}

#[test]
fn select_features_writes_k_indices_and_rejects_bad_input() {
    let ws = Ws::new();
    ws.synth("d.jsonl", 40, 12);
    ws.ok(&["select-features", "--data", "d.jsonl", "--out", "sel.json", "--top-k", "4", "--trees", "10"]);
    let sel: serde_json::Value = serde_json::from_slice(&read(ws.path("sel.json"))).unwrap();
    assert_eq!(sel["indices"].as_array().unwrap().len(), 4);
    let total: f64 = sel["importances"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    assert_eq!(ws.code(&["select-features", "--data", "d.jsonl", "--out", "x.json", "--top-k", "13"]), 2);
    assert_eq!(ws.code(&["select-features", "--data", "missing.jsonl", "--out", "x.json"]), 5);

    let negatives: String = fs::read_to_string(ws.path("d.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut r: serde_json::Value = serde_json::from_str(l).unwrap();
            r["label"] = 0.into();
            r.to_string() + "\n"
        })
        .collect();
    fs::write(ws.path("neg.jsonl"), negatives).unwrap();
    assert_eq!(ws.code(&["select-features", "--data", "neg.jsonl", "--out", "x.json", "--top-k", "4"]), 3);
}

#[test]
fn train_writes_one_history_row_per_epoch_for_each_modality_set() {
    let ws = Ws::new();
    ws.synth("d.jsonl", 40, 12);
    for (mods, out) in [("ehr", "ehr"), ("ehr,notes", "pt"), ("cxr", "cxr")] {
        ws.ok(&[
            "--config", "small.toml", "train", "--data", "d.jsonl", "--out", out, "--modalities", mods, "--epochs", "1",
        ]);
        let history = fs::read_to_string(ws.path(out).join("history.csv")).unwrap();
        assert_eq!(history.lines().count(), 2, "{history}");
        assert!(ws.path(out).join("model.rdmt").is_file());
        let report: serde_json::Value = serde_json::from_slice(&read(ws.path(out).join("report.json"))).unwrap();
        assert_eq!(report["modalities"].as_array().unwrap().len(), mods.split(',').count());
    }
    assert_eq!(
        ws.code(&["--config", "small.toml", "train", "--data", "d.jsonl", "--out", "bad", "--modalities", "ecg"]),
        2
    );
    assert_eq!(
        ws.code(&["--config", "small.toml", "train", "--data", "d.jsonl", "--out", "bad", "--epochs", "0"]),
        2
    );
}

#[test]
fn train_uses_a_precomputed_selection() {
    let ws = Ws::new();
    ws.synth("d.jsonl", 40, 12);
    ws.ok(&["select-features", "--data", "d.jsonl", "--out", "sel.json", "--top-k", "5", "--trees", "10"]);
    ws.ok(&[
        "--config", "small.toml", "train", "--data", "d.jsonl", "--out", "m", "--selection", "sel.json",
    ]);
    ws.ok(&["--config", "small.toml", "train", "--data", "d.jsonl", "--out", "all", "--no-select"]);
    assert_eq!(
        ws.code(&[
            "--config", "small.toml", "train", "--data", "d.jsonl", "--out", "x", "--selection", "sel.json", "--no-select",
        ]),
        2
    );
}

#[test]
fn kfold_writes_one_model_per_fold_and_rejects_k_one() {
    let ws = Ws::new();
    ws.synth("d.jsonl", 60, 12);
    let stdout = ws.ok(&["--config", "small.toml", "kfold", "--data", "d.jsonl", "--out", "ens", "--k", "3"]);
    assert!(stdout.contains("AUC"));
    let models = fs::read_dir(ws.path("ens"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "rdmt"))
        .count();
    assert_eq!(models, 3);
    ws.ok(&["eval", "--model", "ens", "--data", "d.jsonl", "--out", "ens_eval"]);

    assert_eq!(
        ws.code(&["--config", "small.toml", "kfold", "--data", "d.jsonl", "--out", "k1", "--k", "1"]),
        2
    );
}

#[test]
fn eval_of_single_member_directory_matches_the_model_file() {
    let ws = Ws::new();
    ws.synth("d.jsonl", 40, 12);
    ws.ok(&["--config", "small.toml", "train", "--data", "d.jsonl", "--out", "m"]);
    fs::create_dir(ws.path("one")).unwrap();
    fs::copy(ws.path("m/model.rdmt"), ws.path("one/fold_00.rdmt")).unwrap();
    ws.ok(&["eval", "--model", "m/model.rdmt", "--data", "d.jsonl", "--out", "e1"]);
    ws.ok(&["eval", "--model", "one", "--data", "d.jsonl", "--out", "e2"]);
    assert_eq!(read(ws.path("e1/roc.csv")), read(ws.path("e2/roc.csv")));
    let auc = |p: &str| {
        serde_json::from_slice::<serde_json::Value>(&read(ws.path(p).join("report.json"))).unwrap()["auc"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(auc("e1"), auc("e2"));

    let bytes = read(ws.path("m/model.rdmt"));
    fs::write(ws.path("trunc.rdmt"), &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(ws.code(&["eval", "--model", "trunc.rdmt", "--data", "d.jsonl", "--out", "e3"]), 3);

    ws.synth("wide.jsonl", 40, 14);
    assert_eq!(ws.code(&["eval", "--model", "m/model.rdmt", "--data", "wide.jsonl", "--out", "e4"]), 3);
    assert_eq!(ws.code(&["eval", "--model", "nope.rdmt", "--data", "d.jsonl", "--out", "e5"]), 5);
}

#[test]
fn help_documents_every_flag() {
    let ws = Ws::new();
    let cases: [(&str, &[&str]); 5] = [
        ("synth", &["--out", "--patients", "--positive-rate", "--d-ehr", "--noise-factors"]),
        ("select-features", &["--data", "--out", "--top-k", "--trees"]),
        (
            "train",
            &[
                "--data", "--out", "--selection", "--no-select", "--modalities", "--encoder", "--epochs", "--batch-size",
                "--lr-max", "--lr-min", "--alpha", "--gamma", "--smoothing", "--dropout",
            ],
        ),
        ("kfold", &["--k", "--holdout", "--modalities"]),
        ("eval", &["--model", "--data", "--out"]),
    ];
    for (cmd, flags) in cases {
        let help = ws.ok(&[cmd, "--help"]);
        for flag in flags.iter().chain(&["--config", "--seed", "--jobs", "--verbose"]) {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}

#[test]
fn config_errors_exit_two() {
    let ws = Ws::new();
    fs::write(ws.path("bad.toml"), "[train]\nepochz = 3\n").unwrap();
    assert_eq!(ws.code(&["--config", "bad.toml", "synth", "--out", "x.jsonl"]), 2);
    assert_eq!(ws.code(&["--config", "absent.toml", "synth", "--out", "x.jsonl"]), 5);
    let out = Command::new(env!("CARGO_BIN_EXE_readmit"))
        .args(["synth", "--out", "x.jsonl"])
        .current_dir(ws.dir.path())
        .env("PT_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(ws.code(&["--jobs", "0", "synth", "--out", "x.jsonl"]), 2);
}

#[test]
fn training_writes_only_under_out() {
    let ws = Ws::new();
    ws.synth("d.jsonl", 40, 12);
    let before: Vec<_> = fs::read_dir(ws.dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    ws.ok(&["--config", "small.toml", "train", "--data", "d.jsonl", "--out", "run/a"]);
    let mut after: Vec<_> = fs::read_dir(ws.dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    after.retain(|n| !before.contains(n));
    assert_eq!(after, vec![std::ffi::OsString::from("run")]);
    let mut inside: Vec<_> = fs::read_dir(ws.path("run/a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    inside.sort();
    assert_eq!(inside, ["history.csv", "model.rdmt", "report.json"]);
}
