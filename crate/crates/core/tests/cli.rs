use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stagecct::data::SyntheticSpec;
use stagecct::harness::{self, CohortMeta, ConfigSnapshot, Container, CvReport, DataSource, EvalReport, FoldReport, RunConfig, SynthManifest};

mod common;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stagecct"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_match_presets() {
    assert_eq!(RunConfig::load(&configs_dir().join("desk.json")).unwrap(), RunConfig::desk());
    assert_eq!(RunConfig::load(&configs_dir().join("paper.json")).unwrap(), RunConfig::paper());
    let o = run(&["config", "--preset", "desk"]);
    assert_eq!(code(&o), 0);
    let printed: RunConfig = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, RunConfig::desk());
}

#[test]
fn synth_is_reproducible_and_validated_first() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["synth", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let manifest: SynthManifest = harness::read_json(&a.join("manifest.json")).unwrap();
    assert_eq!((manifest.patients, manifest.positives), (721, 199));
    for f in ["events.csv", "labels.csv", "schema.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    for d in &manifest.files {
        assert_eq!(harness::sha256_file(&a.join(&d.name)).unwrap(), d.sha256);
    }

    // the written cohort loads back as the generated one
    let mut csv_cfg = RunConfig::desk();
    csv_cfg.data = DataSource::Csv { dir: a.clone(), hours: 24 };
    csv_cfg.validate().unwrap();
    let from_csv = harness::load_data(&csv_cfg.data).unwrap();
    let generated = harness::load_data(&RunConfig::desk().data).unwrap();
    assert_eq!(from_csv.labels(), generated.labels());
    assert_eq!(from_csv.schema, generated.schema);

    let mut bad = RunConfig::desk();
    bad.data = DataSource::Synthetic(SyntheticSpec {
        n_pos: 0,
        ..SyntheticSpec::default()
    });
    let cfg = write_config(dir.path(), "bad.json", &bad);
    let out = dir.path().join("never");
    let o = run(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn train_then_evaluate_agree_and_fingerprints_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", &common::tiny_config(12, 20, 3, 2));
    let out = dir.path().join("train");
    let o = run(&["train", "--config", s(&cfg), "--fold", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trained: EvalReport = harness::read_json(&out.join("train_metrics.json")).unwrap();

    let eval = dir.path().join("eval");
    let ckpt = out.join("checkpoint.bin");
    let o = run(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--split", "train", "--out", s(&eval)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let again: EvalReport = harness::read_json(&eval.join("metrics.json")).unwrap();
    assert_eq!(again, trained);
    let rows = fs::read_to_string(eval.join("scores.csv")).unwrap().lines().count();
    assert_eq!(rows, trained.n + 1);

    let held = dir.path().join("held");
    let o = run(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&held)]);
    assert_eq!(code(&o), 0);
    let test: EvalReport = harness::read_json(&held.join("metrics.json")).unwrap();
    assert_eq!(test.n + trained.n, 32);

    let o = run(&["evaluate", "--config", s(&cfg), "--seed", "1", "--checkpoint", s(&ckpt), "--out", s(&eval)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));

    // artifacts re-parse with the tool's own loaders
    let snap: ConfigSnapshot = harness::read_json(&out.join("config.json")).unwrap();
    let loaded = RunConfig::load(&cfg).unwrap();
    assert_eq!(snap.fingerprint, loaded.fingerprint());
    let (header, trace) = harness::read_trace(&out.join("trace.jsonl")).unwrap();
    assert_eq!((header.fingerprint, header.fold), (snap.fingerprint.clone(), Some(1)));
    assert_eq!(trace.len(), 2);
    let (model, meta) = harness::load_checkpoint(&ckpt, &loaded).unwrap();
    assert_eq!(meta.fold, Some(1));
    assert_eq!(model.config, loaded.model);
}

#[test]
fn evaluate_refuses_an_empty_or_undefined_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", &common::tiny_config(12, 20, 3, 1));
    let out = dir.path().join("train");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
    let eval = dir.path().join("eval");
    let o = run(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&out.join("checkpoint.bin")), "--split", "test", "--out", s(&eval)]);
    assert_eq!(code(&o), 1);
    assert!(!eval.join("metrics.json").exists());
}

#[test]
fn cross_validation_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", &common::tiny_config(12, 20, 3, 1));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, extra) in [(&a, None), (&b, Some("--parallel"))] {
        let mut args = vec!["cross-validate", "--config", s(&cfg), "--out", s(out)];
        args.extend(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("AUROC"));
    }
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
    assert_eq!(fs::read(a.join("table.txt")).unwrap(), fs::read(b.join("table.txt")).unwrap());

    let report: CvReport = harness::read_json(&a.join("metrics.json")).unwrap();
    assert_eq!(report.folds.len(), 3);
    let cfg = RunConfig::load(&cfg).unwrap();
    for f in 0..3 {
        let fold = a.join(format!("fold_{f:02}"));
        let fr: FoldReport = harness::read_json(&fold.join("metrics.json")).unwrap();
        assert_eq!(fr.summary, report.folds[f]);
        harness::read_trace(&fold.join("trace.jsonl")).unwrap();
        let c = Container::read_expecting(&fold.join("checkpoint.bin"), harness::CHECKPOINT_KIND, &cfg.fingerprint()).unwrap();
        assert!(!c.tensors.is_empty());
    }
}

#[test]
fn ablation_writes_four_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", &common::tiny_config(12, 20, 3, 1));
    let out = dir.path().join("abl");
    let o = run(&["cross-validate", "--ablation", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("clip_bce")).count(), 4);
    for arm in ["clip_bce", "clip_bce+patchup", "clip_bce+cc", "clip_bce+patchup+cc"] {
        assert!(out.join(arm).join("metrics.json").is_file(), "{arm}");
    }
}

#[test]
fn preprocess_writes_loadable_containers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", &common::tiny_config(12, 20, 3, 1));
    let out = dir.path().join("pre");
    let o = run(&["preprocess", "--config", s(&cfg), "--fold", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fp = RunConfig::load(&cfg).unwrap().fingerprint();
    let train = Container::read_expecting(&out.join("train.bin"), harness::COHORT_KIND, &fp).unwrap();
    let test = Container::read_expecting(&out.join("test.bin"), harness::COHORT_KIND, &fp).unwrap();
    let (nx, nt) = (train.get("x").unwrap().shape()[0], test.get("x").unwrap().shape()[0]);
    assert_eq!(nx + nt, 32);
    assert_eq!(train.get("x").unwrap().shape()[1..], [24, 64]);
    let stats: stagecct::data::CohortStats = harness::read_json(&out.join("stats.json")).unwrap();
    assert_eq!(stats.means.len(), 64);

    // the per-patient CSV layout carries the same numbers
    let csv_out = dir.path().join("pre_csv");
    let o = run(&["preprocess", "--config", s(&cfg), "--fold", "0", "--format", "csv", "--out", s(&csv_out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let meta: CohortMeta = harness::read_json(&csv_out.join("test/meta.json")).unwrap();
    assert_eq!(meta.patient_ids.len(), nt);
    let labels = stagecct::data::io::read_labels(&csv_out.join("test/labels.csv")).unwrap();
    let x = test.get("x").unwrap();
    for (k, id) in meta.patient_ids.iter().enumerate() {
        let (cols, values) = stagecct::data::io::read_matrix_csv(&csv_out.join("test").join(format!("{id}.csv"))).unwrap();
        assert_eq!(cols.len(), 64);
        assert_eq!(values, x.data()[k * 24 * 64..(k + 1) * 24 * 64]);
        assert_eq!(labels[k], (id.clone(), test.get("labels").unwrap().data()[k] as u8));
    }
    assert!(csv_out.join("train/labels.csv").is_file());
    assert_eq!(fs::read(csv_out.join("stats.json")).unwrap(), fs::read(out.join("stats.json")).unwrap());
}

#[test]
fn gradcheck_fault_exits_three() {
    let o = run(&["gradcheck", "--seeds", "1", "--inject-fault", "relu"]);
    assert_eq!(code(&o), 3);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL") && l.contains("relu")));
    assert!(String::from_utf8_lossy(&o.stderr).contains("relu"));
}

#[test]
fn bad_input_exits_one() {
    assert_eq!(code(&run(&["train", "--bogus"])), 1);
    assert_eq!(code(&run(&["gradcheck", "--seeds", "1", "--inject-fault", "nonsense"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("broken.json");
    fs::write(&p, "{ not json").unwrap();
    assert_eq!(code(&run(&["cross-validate", "--config", s(&p), "--out", s(dir.path())])), 1);
    assert_eq!(code(&run(&["train", "--config", s(&configs_dir().join("paper.json")), "--out", s(dir.path())])), 1);
}
