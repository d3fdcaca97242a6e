use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Container, DataSource, HarnessError, Result, RunConfig};
use crate::data::{fit_stats, generate_synthetic, io, preprocess_cohort, stratified_kfold, CohortStats, FoldPlan, PatientRecord, SyntheticSpec, VariableSchema};
use crate::metrics::{aggregate_folds, fold_metrics, format_table, FoldMetrics, MetricsReport};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::{LossToggles, StepRecord, Trainer};

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const COHORT_KIND: &str = "cohort";
const PREDICT_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct Cohort {
    pub schema: VariableSchema,
    pub records: Vec<PatientRecord>,
}

impl Cohort {
    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn load_data(source: &DataSource) -> Result<Cohort> {
    match source {
        DataSource::Csv { dir, hours } => {
            let (schema, records) = io::load_cohort(dir, *hours)?;
            Ok(Cohort { schema, records })
        }
        DataSource::Synthetic(spec) => {
            let c = generate_synthetic(spec)?;
            Ok(Cohort {
                schema: c.schema,
                records: c.records,
            })
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for `stream` of fold `fold` under the global seed.
/// Fold `None` stands for training on the whole cohort.
pub fn derive_seed(seed: u64, fold: Option<usize>, stream: u64) -> u64 {
    let f = fold.map_or(u64::MAX, |f| f as u64);
    splitmix(splitmix(splitmix(seed) ^ f) ^ stream)
}

/// Preprocessed tensors of one split, with statistics fitted on `train` only.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub stats: CohortStats,
    pub x_train: Tensor,
    pub y_train: Vec<u8>,
    pub x_test: Option<Tensor>,
    pub y_test: Vec<u8>,
    pub warnings: Vec<String>,
}

pub fn prepare(cohort: &Cohort, train: &[usize], test: &[usize]) -> Result<Prepared> {
    debug_assert!(test.iter().all(|i| !train.contains(i)), "train and test overlap");
    let train_refs: Vec<&PatientRecord> = train.iter().map(|&i| &cohort.records[i]).collect();
    let test_refs: Vec<&PatientRecord> = test.iter().map(|&i| &cohort.records[i]).collect();
    let stats = fit_stats(&train_refs, &cohort.schema)?;
    let (x_train, mut warnings) = preprocess_cohort(&train_refs, &cohort.schema, &stats)?;
    let x_test = if test.is_empty() {
        None
    } else {
        let (x, w) = preprocess_cohort(&test_refs, &cohort.schema, &stats)?;
        warnings.extend(w);
        Some(x)
    };
    Ok(Prepared {
        stats,
        x_train,
        y_train: train_refs.iter().map(|r| r.label).collect(),
        x_test,
        y_test: test_refs.iter().map(|r| r.label).collect(),
        warnings,
    })
}

/// A trained model with everything needed to score new records.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub stats: CohortStats,
    pub trace: Vec<StepRecord>,
    pub fold: Option<usize>,
}

/// Initializes and fits a model on `x`; seeds come from the global seed and `fold`.
pub fn fit_model(cfg: &RunConfig, x: &Tensor, y: &[u8], fold: Option<usize>) -> Result<(Model, Vec<StepRecord>)> {
    let model = Model::new(cfg.model.clone(), derive_seed(cfg.seed, fold, 0))?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), derive_seed(cfg.seed, fold, 1))?;
    let mut trace = Vec::new();
    trainer.fit(x, y, |r| trace.push(*r))?;
    Ok((trainer.model, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub positives_test: usize,
    pub metrics: FoldMetrics,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub summary: FoldSummary,
    pub trained: Trained,
    pub scores: Vec<f64>,
}

pub fn run_fold(cfg: &RunConfig, cohort: &Cohort, plan: &FoldPlan, fold: usize) -> Result<FoldOutcome> {
    let wrap = |e: HarnessError| HarnessError::Fold {
        fold,
        source: Box::new(e),
    };
    let train = plan.train_indices(fold);
    let test = plan.test_indices(fold);
    let prep = prepare(cohort, &train, &test).map_err(wrap)?;
    let (model, trace) = fit_model(cfg, &prep.x_train, &prep.y_train, Some(fold)).map_err(wrap)?;
    let x_test = prep.x_test.as_ref().ok_or_else(|| wrap(HarnessError::Config("empty test fold".into())))?;
    let scores = model.predict(x_test, PREDICT_CHUNK).map_err(|e| wrap(e.into()))?;
    let metrics = fold_metrics(&scores, &prep.y_test, cfg.threshold).map_err(|e| wrap(e.into()))?;
    Ok(FoldOutcome {
        summary: FoldSummary {
            fold,
            n_train: train.len(),
            n_test: test.len(),
            positives_test: prep.y_test.iter().filter(|&&y| y == 1).count(),
            metrics,
        },
        trained: Trained {
            model,
            stats: prep.stats,
            trace,
            fold: Some(fold),
        },
        scores,
    })
}

/// Aggregate of a cross-validated run; the serialized form is the metrics JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub fingerprint: String,
    pub label: String,
    pub threshold: f64,
    pub folds: Vec<FoldSummary>,
    pub report: MetricsReport,
}

/// Short name of the enabled loss terms, e.g. `clip_bce+cc`.
pub fn arm_label(t: &LossToggles) -> String {
    let parts: Vec<&str> = [(t.clip_bce, "clip_bce"), (t.patchup, "patchup"), (t.cc, "cc")]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
    parts.join("+")
}

pub fn cross_validate(cfg: &RunConfig, cohort: &Cohort, mut progress: impl FnMut(&FoldSummary, f64)) -> Result<(CvReport, Vec<FoldOutcome>)> {
    let plan = stratified_kfold(&cohort.labels(), cfg.folds.k, cfg.folds.seed)?;
    let outcomes: Vec<FoldOutcome> = if cfg.parallel {
        let res: Vec<Result<FoldOutcome>> = (0..plan.k).into_par_iter().map(|f| run_fold(cfg, cohort, &plan, f)).collect();
        let outcomes = res.into_iter().collect::<Result<Vec<_>>>()?;
        for o in &outcomes {
            progress(&o.summary, f64::NAN);
        }
        outcomes
    } else {
        let mut v = Vec::with_capacity(plan.k);
        for f in 0..plan.k {
            let start = Instant::now();
            let o = run_fold(cfg, cohort, &plan, f)?;
            progress(&o.summary, start.elapsed().as_secs_f64());
            v.push(o);
        }
        v
    };
    let folds: Vec<FoldSummary> = outcomes.iter().map(|o| o.summary.clone()).collect();
    let per: Vec<FoldMetrics> = folds.iter().map(|f| f.metrics).collect();
    let report = CvReport {
        fingerprint: cfg.fingerprint(),
        label: arm_label(&cfg.train.losses),
        threshold: cfg.threshold,
        folds,
        report: aggregate_folds(&per, cfg.std)?,
    };
    Ok((report, outcomes))
}

/// The four loss arms: clip-BCE alone, with PatchUp, with CC-loss, with both.
pub fn ablation_arms(cfg: &RunConfig) -> Vec<RunConfig> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(patchup, cc)| {
            let mut c = cfg.clone();
            c.train.losses = LossToggles {
                clip_bce: true,
                patchup,
                cc,
            };
            c
        })
        .collect()
}

pub fn table(reports: &[CvReport]) -> String {
    let rows: Vec<(String, &MetricsReport)> = reports.iter().map(|r| (r.label.clone(), &r.report)).collect();
    format_table(&rows)
}

// ---- artifacts --------------------------------------------------------

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(io::write_json(path, value)?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(io::read_json(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub fingerprint: String,
    pub fold: Option<usize>,
}

/// One header line, then one [`StepRecord`] per line.
pub fn write_trace(path: &Path, header: &TraceHeader, trace: &[StepRecord]) -> Result<()> {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for r in trace {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_trace(path: &Path) -> Result<(TraceHeader, Vec<StepRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let bad = |e: serde_json::Error| HarnessError::Container {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut lines = text.lines();
    let header = serde_json::from_str(lines.next().unwrap_or_default()).map_err(bad)?;
    let records = lines.map(|l| serde_json::from_str(l).map_err(bad)).collect::<Result<_>>()?;
    Ok((header, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fold: Option<usize>,
    pub stats: CohortStats,
    pub iterations: u64,
}

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, trained: &Trained) -> Result<()> {
    let meta = CheckpointMeta {
        fold: trained.fold,
        stats: trained.stats.clone(),
        iterations: trained.trace.len() as u64,
    };
    Container {
        kind: CHECKPOINT_KIND.into(),
        fingerprint: cfg.fingerprint(),
        meta: serde_json::to_value(meta).expect("meta serializes"),
        tensors: trained.model.params.named(),
    }
    .write(path)
}

/// Loads a checkpoint written under the same config; any other fingerprint is refused.
pub fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<(Model, CheckpointMeta)> {
    let c = Container::read_expecting(path, CHECKPOINT_KIND, &cfg.fingerprint())?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta).map_err(|e| HarnessError::Container {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut model = Model::new(cfg.model.clone(), 0)?;
    model.params.load_named(&c.tensors)?;
    Ok((model, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub fingerprint: String,
    pub config: RunConfig,
}

/// Writes the resolved config, per-fold traces, metrics and checkpoints, the
/// aggregate metrics JSON and the table under `out`.
pub fn write_cv_artifacts(out: &Path, cfg: &RunConfig, report: &CvReport, outcomes: &[FoldOutcome]) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let fp = cfg.fingerprint();
    let mut written = Vec::new();
    let snap = out.join("config.json");
    write_json(&snap, &ConfigSnapshot {
        fingerprint: fp.clone(),
        config: cfg.clone(),
    })?;
    written.push(snap);
    for o in outcomes {
        let dir = out.join(format!("fold_{:02}", o.summary.fold));
        create_dir(&dir)?;
        let header = TraceHeader {
            fingerprint: fp.clone(),
            fold: Some(o.summary.fold),
        };
        write_trace(&dir.join("trace.jsonl"), &header, &o.trained.trace)?;
        write_json(&dir.join("metrics.json"), &FoldReport {
            fingerprint: fp.clone(),
            threshold: cfg.threshold,
            summary: o.summary.clone(),
        })?;
        save_checkpoint(&dir.join("checkpoint.bin"), cfg, &o.trained)?;
        written.extend(["trace.jsonl", "metrics.json", "checkpoint.bin"].map(|f| dir.join(f)));
    }
    let metrics = out.join("metrics.json");
    write_json(&metrics, report)?;
    let tbl = out.join("table.txt");
    write_text(&tbl, &table(std::slice::from_ref(report)))?;
    written.extend([metrics, tbl]);
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fingerprint: String,
    pub threshold: f64,
    pub summary: FoldSummary,
}

/// Which records an evaluation or preprocessing step covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    Train,
    Test,
}

/// Record indices of `split` for `fold`, or all records when `fold` is `None`.
pub fn split_indices(cfg: &RunConfig, cohort: &Cohort, fold: Option<usize>, split: Split) -> Result<Vec<usize>> {
    let Some(fold) = fold else {
        return match split {
            Split::Test => Err(HarnessError::Config("a test split needs a fold".into())),
            _ => Ok((0..cohort.len()).collect()),
        };
    };
    if fold >= cfg.folds.k {
        return Err(HarnessError::Config(format!("fold {fold} out of range for k = {}", cfg.folds.k)));
    }
    let plan = stratified_kfold(&cohort.labels(), cfg.folds.k, cfg.folds.seed)?;
    Ok(match split {
        Split::All => (0..cohort.len()).collect(),
        Split::Train => plan.train_indices(fold),
        Split::Test => plan.test_indices(fold),
    })
}

/// Result of `train` or `evaluate` on one set of records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub fold: Option<usize>,
    pub split: Split,
    pub threshold: f64,
    pub n: usize,
    pub metrics: FoldMetrics,
}

/// Fits on the training split of `fold` (or every record) and reports
/// metrics of the final parameters on the same records.
pub fn train(cfg: &RunConfig, cohort: &Cohort, fold: Option<usize>) -> Result<(Trained, EvalReport)> {
    let idx = split_indices(cfg, cohort, fold, Split::Train)?;
    let prep = prepare(cohort, &idx, &[])?;
    let (model, trace) = fit_model(cfg, &prep.x_train, &prep.y_train, fold)?;
    let scores = model.predict(&prep.x_train, PREDICT_CHUNK)?;
    let metrics = fold_metrics(&scores, &prep.y_train, cfg.threshold)?;
    let report = EvalReport {
        fingerprint: cfg.fingerprint(),
        fold,
        split: Split::Train,
        threshold: cfg.threshold,
        n: idx.len(),
        metrics,
    };
    Ok((
        Trained {
            model,
            stats: prep.stats,
            trace,
            fold,
        },
        report,
    ))
}

pub fn write_train_artifacts(out: &Path, cfg: &RunConfig, trained: &Trained, report: &EvalReport) -> Result<()> {
    create_dir(out)?;
    let fp = cfg.fingerprint();
    write_json(&out.join("config.json"), &ConfigSnapshot {
        fingerprint: fp.clone(),
        config: cfg.clone(),
    })?;
    write_trace(&out.join("trace.jsonl"), &TraceHeader { fingerprint: fp, fold: trained.fold }, &trained.trace)?;
    save_checkpoint(&out.join("checkpoint.bin"), cfg, trained)?;
    write_json(&out.join("train_metrics.json"), report)
}

/// Scores `split` with a checkpoint, normalizing with the statistics stored in it.
pub fn evaluate(cfg: &RunConfig, cohort: &Cohort, checkpoint: &Path, split: Option<Split>) -> Result<(EvalReport, Vec<f64>, Vec<usize>)> {
    let (model, meta) = load_checkpoint(checkpoint, cfg)?;
    let split = split.unwrap_or(if meta.fold.is_some() { Split::Test } else { Split::All });
    let idx = split_indices(cfg, cohort, meta.fold, split)?;
    if idx.is_empty() {
        return Err(crate::metrics::MetricsError::Empty.into());
    }
    let refs: Vec<&PatientRecord> = idx.iter().map(|&i| &cohort.records[i]).collect();
    let (x, _) = preprocess_cohort(&refs, &cohort.schema, &meta.stats)?;
    let y: Vec<u8> = refs.iter().map(|r| r.label).collect();
    let scores = model.predict(&x, PREDICT_CHUNK)?;
    let metrics = fold_metrics(&scores, &y, cfg.threshold)?;
    Ok((
        EvalReport {
            fingerprint: cfg.fingerprint(),
            fold: meta.fold,
            split,
            threshold: cfg.threshold,
            n: idx.len(),
            metrics,
        },
        scores,
        idx,
    ))
}

/// `patient_id,label,score` rows.
pub fn write_scores(path: &Path, cohort: &Cohort, idx: &[usize], scores: &[f64]) -> Result<()> {
    let mut text = String::from("patient_id,label,score\n");
    for (&i, s) in idx.iter().zip(scores) {
        let r = &cohort.records[i];
        text.push_str(&format!("{},{},{s}\n", r.patient_id, r.label));
    }
    write_text(path, &text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub patients: usize,
    pub positives: usize,
    pub files: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Writes a synthetic cohort in the CSV layout plus `manifest.json`. The
/// generator settings are validated before anything touches the disk.
pub fn synth(spec: &SyntheticSpec, out: &Path) -> Result<SynthManifest> {
    spec.validate()?;
    let cohort = generate_synthetic(spec)?;
    let paths = io::write_cohort(out, &cohort.schema, &cohort.records)?;
    let files = paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                name: p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = SynthManifest {
        seed: spec.seed,
        spec: spec.clone(),
        patients: cohort.records.len(),
        positives: cohort.records.iter().filter(|r| r.label == 1).count(),
        files,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortMeta {
    pub fold: Option<usize>,
    pub split: Split,
    pub patient_ids: Vec<String>,
    pub stats: CohortStats,
}

/// Layout of preprocessed cohorts on disk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortFormat {
    /// One container per split holding `x` (`[N, T, V]`) and `labels` (`[N]`).
    #[default]
    Bin,
    /// One directory per split with a `T × V` CSV per patient, `labels.csv`
    /// and `meta.json`.
    Csv,
}

/// Preprocesses the training split of `fold` (all records without a fold)
/// and, with a fold, its held-out split under the same statistics.
pub fn preprocess(cfg: &RunConfig, cohort: &Cohort, fold: Option<usize>, format: CohortFormat, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let train = split_indices(cfg, cohort, fold, Split::Train)?;
    let test = if fold.is_some() {
        split_indices(cfg, cohort, fold, Split::Test)?
    } else {
        Vec::new()
    };
    let prep = prepare(cohort, &train, &test)?;
    let fp = cfg.fingerprint();
    let mut written = Vec::new();
    let train_split = if fold.is_some() { Split::Train } else { Split::All };
    let parts = [(train_split, &train, Some(&prep.x_train), &prep.y_train), (Split::Test, &test, prep.x_test.as_ref(), &prep.y_test)];
    for (split, idx, x, y) in parts {
        let Some(x) = x else { continue };
        let meta = CohortMeta {
            fold,
            split,
            patient_ids: idx.iter().map(|&i| cohort.records[i].patient_id.clone()).collect(),
            stats: prep.stats.clone(),
        };
        let name = serde_json::to_value(split).expect("split serializes");
        let name = name.as_str().expect("split is a string");
        if format == CohortFormat::Csv {
            written.extend(write_split_csv(&out.join(name), &cohort.schema.encoded_names(), x, &meta, y)?);
            continue;
        }
        let labels = Tensor::new(vec![y.len()], y.iter().map(|&l| l as f64).collect())?;
        let path = out.join(format!("{name}.bin"));
        Container {
            kind: COHORT_KIND.into(),
            fingerprint: fp.clone(),
            meta: serde_json::to_value(meta).expect("meta serializes"),
            tensors: vec![("x".into(), x.clone()), ("labels".into(), labels)],
        }
        .write(&path)?;
        written.push(path);
    }
    let stats = out.join("stats.json");
    write_json(&stats, &prep.stats)?;
    written.push(stats);
    Ok(written)
}

fn write_split_csv(dir: &Path, columns: &[String], x: &Tensor, meta: &CohortMeta, y: &[u8]) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let per = x.shape()[1] * x.shape()[2];
    let mut written = Vec::with_capacity(meta.patient_ids.len() + 2);
    for (id, values) in meta.patient_ids.iter().zip(x.data().chunks(per)) {
        let path = dir.join(format!("{id}.csv"));
        io::write_matrix_csv(&path, columns, values)?;
        written.push(path);
    }
    let labels: Vec<(String, u8)> = meta.patient_ids.iter().cloned().zip(y.iter().copied()).collect();
    let labels_path = dir.join(io::LABELS_FILE);
    io::write_labels(&labels_path, &labels)?;
    let meta_path = dir.join("meta.json");
    write_json(&meta_path, meta)?;
    written.extend([labels_path, meta_path]);
    Ok(written)
}
