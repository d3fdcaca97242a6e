use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stagecct::harness::gradsuite::{run_suite, SuiteOptions};
use stagecct::harness::{self, CohortFormat, DataSource, HarnessError, Result, RunConfig, Split};
use stagecct::tensor::OpKind;

#[derive(Parser, Debug)]
#[command(name = "stagecct", version, about = "Mortality prediction on hourly ICU records with a convolutional transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (JSON); the desk preset when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Decision threshold for the confusion matrix.
    #[arg(long, value_name = "X")]
    threshold: Option<f64>,
    /// Run folds on a thread pool.
    #[arg(long)]
    parallel: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Bin,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cohort in the CSV layout.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Impute, encode and normalize a cohort into tensor files.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Fit statistics on the training split of this fold.
        #[arg(long)]
        fold: Option<usize>,
        /// `bin` writes one container per split, `csv` one matrix per patient.
        #[arg(long, value_enum, default_value_t = FormatArg::Bin)]
        format: FormatArg,
    },
    /// Train one model and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on the training split of this fold instead of every record.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Stratified k-fold cross-validation.
    CrossValidate {
        #[command(flatten)]
        common: Common,
        /// Run the four loss arms and emit one table.
        #[arg(long)]
        ablation: bool,
    },
    /// Score records with a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Records to score; defaults to the held-out fold of the checkpoint.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Print the resolved configuration as JSON.
    Config {
        #[command(flatten)]
        common: Common,
        /// Start from a built-in preset instead of `--config`.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Finite-difference check of every op, loss and the whole model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    Ok(apply_overrides(base, common))
}

fn apply_overrides(mut cfg: RunConfig, common: &Common) -> RunConfig {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threshold {
        cfg.threshold = t;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.parallel |= common.parallel;
    cfg
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.out_dir
        .as_deref()
        .ok_or_else(|| HarnessError::Config("no output directory (use --out)".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = resolve(&common)?;
            let DataSource::Synthetic(mut spec) = cfg.data.clone() else {
                return Err(HarnessError::Config("synth needs a synthetic data source".into()));
            };
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let out = out_dir(&cfg)?;
            let m = harness::synth(&spec, out)?;
            println!("wrote {} patients ({} positive) to {}", m.patients, m.positives, out.display());
        }
        Command::Preprocess { common, fold, format } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let cohort = harness::load_data(&cfg.data)?;
            let format = match format {
                FormatArg::Bin => CohortFormat::Bin,
                FormatArg::Csv => CohortFormat::Csv,
            };
            let written = harness::preprocess(&cfg, &cohort, fold, format, out_dir(&cfg)?)?;
            println!("wrote {} files to {}", written.len(), out_dir(&cfg)?.display());
        }
        Command::Train { common, fold } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let out = out_dir(&cfg)?;
            let cohort = harness::load_data(&cfg.data)?;
            let start = Instant::now();
            let (trained, report) = harness::train(&cfg, &cohort, fold)?;
            harness::write_train_artifacts(out, &cfg, &trained, &report)?;
            let m = report.metrics;
            eprintln!("trained {} steps in {:.1} s", trained.trace.len(), start.elapsed().as_secs_f64());
            println!("training-set accuracy {:.4}, AUROC {}", m.accuracy, m.auroc.map_or("n/a".into(), |a| format!("{a:.4}")));
        }
        Command::CrossValidate { common, ablation } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let out = out_dir(&cfg)?.to_path_buf();
            let cohort = harness::load_data(&cfg.data)?;
            let arms = if ablation { harness::ablation_arms(&cfg) } else { vec![cfg.clone()] };
            let mut reports = Vec::new();
            for arm in &arms {
                let label = harness::arm_label(&arm.train.losses);
                let dir = if ablation { out.join(&label) } else { out.clone() };
                let (report, outcomes) = harness::cross_validate(arm, &cohort, |s, secs| {
                    eprintln!(
                        "[{label}] fold {}: auroc {} ({secs:.1} s)",
                        s.fold,
                        s.metrics.auroc.map_or("n/a".into(), |a| format!("{a:.4}"))
                    )
                })?;
                harness::write_cv_artifacts(&dir, arm, &report, &outcomes)?;
                reports.push(report);
            }
            let table = harness::table(&reports);
            if ablation {
                std::fs::write(out.join("ablation.txt"), &table).map_err(|e| HarnessError::Io { path: out.join("ablation.txt"), source: e })?;
            }
            print!("{table}");
        }
        Command::Evaluate { common, checkpoint, split } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let out = out_dir(&cfg)?;
            let cohort = harness::load_data(&cfg.data)?;
            let split = split.map(|s| match s {
                SplitArg::All => Split::All,
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            });
            let (report, scores, idx) = harness::evaluate(&cfg, &cohort, &checkpoint, split)?;
            std::fs::create_dir_all(out).map_err(|e| HarnessError::Io { path: out.to_path_buf(), source: e })?;
            harness::write_json(&out.join("metrics.json"), &report)?;
            harness::write_scores(&out.join("scores.csv"), &cohort, &idx, &scores)?;
            let agg = stagecct::metrics::aggregate_folds(&[report.metrics], cfg.std)?;
            print!("{}", stagecct::metrics::format_table(&[(harness::arm_label(&cfg.train.losses), &agg)]));
        }
        Command::Config { common, preset } => {
            let cfg = match preset {
                Some(Preset::Paper) => apply_overrides(RunConfig::paper(), &common),
                Some(Preset::Desk) => apply_overrides(RunConfig::desk(), &common),
                None => resolve(&common)?,
            };
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        }
        Command::Gradcheck { common, seeds, inject_fault } => {
            let cfg = resolve(&common)?;
            cfg.model.validate()?;
            let fault = match inject_fault.as_deref() {
                Some(name) => Some(OpKind::from_name(name).ok_or_else(|| HarnessError::Config(format!("unknown op kind '{name}'")))?),
                None => None,
            };
            let opts = SuiteOptions {
                seeds,
                model: cfg.model.clone(),
                fault,
                ..SuiteOptions::default()
            };
            let start = Instant::now();
            let report = run_suite(&opts)?;
            for c in &report.cases {
                println!(
                    "{:<5} {:<14} max rel err {:.2e}  ({} coords, worst {})",
                    if c.pass { "ok" } else { "FAIL" },
                    c.name,
                    c.max_rel_err,
                    c.checked,
                    c.worst
                );
            }
            eprintln!("{} cases in {:.1} s", report.cases.len(), start.elapsed().as_secs_f64());
            if let Some(out) = &cfg.out_dir {
                std::fs::create_dir_all(out).map_err(|e| HarnessError::Io { path: out.clone(), source: e })?;
                harness::write_json(&out.join("gradcheck.json"), &report)?;
            }
            if !report.pass {
                let failed: Vec<String> = report.failures().map(|c| format!("{} ({:.2e})", c.name, c.max_rel_err)).collect();
                return Err(HarnessError::GradCheck(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
