//! Pipeline runner: generate synthetic datasets, run preprocessing /
//! feature extraction / training / evaluation from a JSON config, expand
//! the ablation grid, and print reports.
//!
//! Exit codes: 0 success, 2 validation or configuration error, 3 runtime
//! failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use speechmap::dataset::Task;
use speechmap::pipeline::{
    run_grid, run_until, trial_connectivity_matrix, GridAxes, PipelineConfig, RunStage,
};
use speechmap::synthgen::{generate_to_dir, SynthConfig};
use speechmap::Error;

#[derive(Parser)]
#[command(name = "speechmap", version, about = "Speech-critical electrode prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Gen {
        /// Generator config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Load a dataset and cache preprocessed epochs and graph metrics.
    Preprocess(RunArgs),
    /// Additionally assemble per-fold feature matrices (exported as CSV).
    Features(RunArgs),
    /// Additionally train stage-1 classifiers (models saved per fold).
    Train(RunArgs),
    /// Run the full pipeline and write summary.json, verdicts and curves.
    Eval(RunArgs),
    /// Expand the mask x classifier x aggregation grid into one table.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        /// Grid axes JSON; defaults to the full ablation axes.
        #[arg(long)]
        axes: Option<PathBuf>,
    },
    /// Print the summary of a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Dump one trial's connectivity matrix as CSV.
    Connectivity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        task: String,
        #[arg(long)]
        trial: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Pipeline config JSON (see README for the schema).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override worker thread count (0 = default pool).
    #[arg(long)]
    threads: Option<usize>,
}

fn load_pipeline_config(args: &RunArgs) -> Result<PipelineConfig, Error> {
    let text = fs::read_to_string(&args.config).map_err(Error::io(args.config.clone()))?;
    let mut cfg: PipelineConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen { config, out, seed } => {
            let mut cfg: SynthConfig = match config {
                Some(path) => {
                    let text =
                        fs::read_to_string(&path).map_err(Error::io(path.clone()))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => SynthConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let generated = generate_to_dir(&cfg, &out)?;
            println!(
                "generated {} subjects x {} electrodes under {}",
                generated.dataset.subjects.len(),
                cfg.electrodes_per_subject,
                out.display()
            );
            Ok(())
        }
        Command::Preprocess(args) => run_stage(&args, RunStage::Preprocess),
        Command::Features(args) => run_stage(&args, RunStage::Features),
        Command::Train(args) => run_stage(&args, RunStage::Train),
        Command::Eval(args) => run_stage(&args, RunStage::Eval),
        Command::Grid { run, axes } => {
            let cfg = load_pipeline_config(&run)?;
            let axes: GridAxes = match axes {
                Some(path) => {
                    let text =
                        fs::read_to_string(&path).map_err(Error::io(path.clone()))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => GridAxes::default(),
            };
            let cells = run_grid(&cfg, &axes, &run.out)?;
            println!(
                "{:<24} {:<12} {:<16} {:>8} {:>8}",
                "mask", "classifier", "aggregation", "ROC", "PR"
            );
            for c in &cells {
                println!(
                    "{:<24} {:<12} {:<16} {:>8.3} {:>8.3}",
                    c.mask, c.classifier, c.aggregation, c.pooled.roc_auc, c.pooled.pr_auc
                );
            }
            Ok(())
        }
        Command::Report { run } => {
            let path = run.join("summary.json");
            let text = fs::read_to_string(&path).map_err(Error::io(path.clone()))?;
            let report: speechmap::eval::EvalReport = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            println!(
                "mode {} | {} electrodes ({} critical) | version {}",
                report.mode.label(),
                report.n_electrodes,
                report.n_critical,
                report.version
            );
            println!(
                "{:<6} {:>6} {:>5} {:>9} {:>8} {:>8}",
                "fold", "test", "crit", "threshold", "ROC", "PR"
            );
            for f in &report.folds {
                let (roc, pr) = f
                    .metrics
                    .map(|m| (format!("{:.3}", m.roc_auc), format!("{:.3}", m.pr_auc)))
                    .unwrap_or_else(|| ("-".into(), "-".into()));
                println!(
                    "{:<6} {:>6} {:>5} {:>9.3} {:>8} {:>8}",
                    f.fold, f.n_test, f.n_test_critical, f.threshold, roc, pr
                );
            }
            let p = &report.pooled;
            println!(
                "pooled: ROC {:.3} PR {:.3} acc {:.3} prec {:.3} rec {:.3} F1 {:.3} balacc {:.3}",
                p.roc_auc, p.pr_auc, p.accuracy, p.precision, p.recall, p.f1, p.balanced_accuracy
            );
            if let Some(fm) = &report.fold_mean {
                println!(
                    "fold-mean: ROC {:.3} PR {:.3} over {} folds",
                    fm.roc_auc, fm.pr_auc, fm.n_folds_used
                );
            }
            Ok(())
        }
        Command::Connectivity {
            config,
            subject,
            task,
            trial,
            out,
        } => {
            let text = fs::read_to_string(&config).map_err(Error::io(config.clone()))?;
            let cfg: PipelineConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
            let task = Task::from_code(&task)?;
            let (ids, weights) = trial_connectivity_matrix(&cfg, &subject, task, trial)?;
            let mut csv = String::from("electrode");
            for id in &ids {
                csv.push_str(&format!(",{id}"));
            }
            csv.push('\n');
            for (i, id) in ids.iter().enumerate() {
                csv.push_str(&id.to_string());
                for w in weights.row(i) {
                    csv.push_str(&format!(",{w}"));
                }
                csv.push('\n');
            }
            fs::write(&out, csv).map_err(Error::io(out.clone()))?;
            println!("wrote {}x{} connectivity matrix to {}", ids.len(), ids.len(), out.display());
            Ok(())
        }
    }
}

fn run_stage(args: &RunArgs, stage: RunStage) -> Result<(), Error> {
    let cfg = load_pipeline_config(args)?;
    let report = run_until(&cfg, &args.out, stage)?;
    if let Some(report) = report {
        let p = &report.pooled;
        println!(
            "pooled {}: ROC-AUC {:.3} PR-AUC {:.3} F1 {:.3} (summary at {})",
            report.mode.label(),
            p.roc_auc,
            p.pr_auc,
            p.f1,
            args.out.join("summary.json").display()
        );
    } else {
        println!("stage complete; artifacts under {}", args.out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
