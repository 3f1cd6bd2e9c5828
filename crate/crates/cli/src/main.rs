use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use longitrack::pipeline::{self, BackendName, FoldSelector, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "longitrack",
    version,
    about = "Promptable longitudinal lesion segmentation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; unset fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `dataset_root`.
    #[arg(long, global = true, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Overrides `output_root`.
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Gen {
        #[arg(long)]
        cases: usize,
    },
    /// Write the k-fold patient assignment.
    Split,
    /// Segment every lesion and write merged predictions.
    Infer {
        #[arg(long, default_value = "all", value_name = "I|all")]
        fold: String,
        #[arg(long, value_name = "NAME")]
        backend: Option<String>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        exclude_patient_on_edge: bool,
    },
    /// Score predictions and write metrics.csv.
    Eval {
        #[arg(long, default_value = "all", value_name = "I|all")]
        fold: String,
        /// Defaults to `<output_root>/predictions`.
        #[arg(long, value_name = "DIR")]
        predictions: Option<PathBuf>,
    },
    /// Check every case for structural errors and edge-center lesions.
    Validate,
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.dataset {
        cfg.dataset_root = d.clone();
    }
    if let Some(o) = &common.output {
        cfg.output_root = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Gen { cases } => {
            if cases == 0 {
                bail!("--cases must be at least 1");
            }
            let ids = pipeline::run_gen(&cfg, cases)?;
            println!(
                "generated {} cases in {}",
                ids.len(),
                cfg.dataset_root.display()
            );
        }
        Command::Split => {
            let folds = pipeline::run_split(&cfg)?;
            println!(
                "assigned {} patients to {} folds in {}",
                folds.assignment.len(),
                folds.k,
                cfg.output_root.join(pipeline::FOLDS_FILE).display()
            );
        }
        Command::Infer {
            fold,
            backend,
            jobs,
            exclude_patient_on_edge,
        } => {
            if let Some(name) = backend {
                cfg.backend.name = name.parse::<BackendName>()?;
            }
            cfg.exclude_patient_on_edge |= exclude_patient_on_edge;
            let fold: FoldSelector = fold.parse()?;
            let manifest = pipeline::run_infer(&cfg, fold, jobs)?;
            println!(
                "wrote {} files to {} ({} patients skipped, {} lesions skipped)",
                manifest.files.len(),
                cfg.predictions_dir().display(),
                manifest.skipped_patients.len(),
                manifest.skipped_lesions.len()
            );
        }
        Command::Eval { fold, predictions } => {
            let fold: FoldSelector = fold.parse()?;
            let dir = predictions.unwrap_or_else(|| cfg.predictions_dir());
            let report = pipeline::run_eval(&cfg, &dir, fold)?;
            for (pid, reason) in &report.excluded {
                eprintln!("excluded {pid}: {reason}");
            }
            for pid in &report.missing {
                eprintln!("missing prediction for {pid}");
            }
            if let Some(mean) = &report.mean {
                println!(
                    "MEAN dice {:.2} fnvol {:.2} fpvol {:.2} over {} patients",
                    mean.dice,
                    mean.fnvol,
                    mean.fpvol,
                    report.rows.len()
                );
            }
            if !report.is_complete() {
                eprintln!(
                    "evaluation incomplete: {} patients missing",
                    report.missing.len()
                );
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Validate => {
            let report = pipeline::run_validate(&cfg)?;
            for w in &report.warnings {
                println!(
                    "warning {}: lesion {} center {} voxels from the edge",
                    w.patient_id, w.lesion_id, w.face_distance
                );
            }
            for (pid, err) in &report.errors {
                eprintln!("error {pid}: {err}");
            }
            println!(
                "{} cases, {} warnings, {} errors",
                report.cases,
                report.warnings.len(),
                report.errors.len()
            );
            if !report.errors.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LONGITRACK_LOG", "info"))
        .init();
    let cli = Cli::parse();
    match run(cli).context("longitrack") {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
