//! `ilctc`: incremental learning for desk-scale CTC speech models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/file error,
//! 4 numerical abort during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ilctc_cli::analyze::{analyze_correlation, write_report};
use ilctc_cli::config::{Method, ManifestFile, StageConfigFile, TaskSpecFile};
use ilctc_cli::error::CliError;
use ilctc_cli::sequence::run_sequence;
use ilctc_cli::sweep::{run_sweep, SweepAxis};
use ilctc_cli::train::{evaluate_checkpoint, train_stage};
use ilctc_cli::io;

#[derive(Parser)]
#[command(
    name = "ilctc",
    about = "Incremental learning for CTC speech models: synthetic tasks, \
             distillation-based training stages, sequences, sweeps and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task dataset from a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch with the CTC objective.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one incremental stage (method taken from the config).
    IncrTrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Execute a multi-stage, multi-method sequence from a manifest.
    RunSeq {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and write the per-sample CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one loss weight over a grid, re-training the stage per value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// T, beta or gamma.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid; defaults to the reference grid per axis.
        #[arg(long)]
        values: Option<String>,
    },
    /// Correlate per-sample CER with the attention-map distance.
    Analyze {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the CSV and summary (default: current dir).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { spec, out } => {
            let file = TaskSpecFile::load(&spec)?;
            let task = file.resolve()?;
            let dataset = ilctc_core::synth::generate_task(&task)?;
            io::write_dataset(&out, &dataset)?;
            println!(
                "wrote {} samples (F={}, M={}) to {}",
                dataset.len(),
                dataset.input_dim,
                dataset.alphabet_size,
                out.display()
            );
        }
        Command::Pretrain { config } => {
            let spec = StageConfigFile::load(&config)?.resolve()?;
            if spec.method != Method::Pretrain {
                return Err(CliError::config(format!(
                    "pretrain expects method = \"pretrain\", config says {}",
                    spec.method
                )));
            }
            let outcome = train_stage(&spec)?;
            print_reports(&outcome.reports);
        }
        Command::IncrTrain { config } => {
            let spec = StageConfigFile::load(&config)?.resolve()?;
            if spec.method == Method::Pretrain {
                return Err(CliError::config(
                    "incr-train runs post-pretraining methods; use the pretrain subcommand",
                ));
            }
            let outcome = train_stage(&spec)?;
            print_reports(&outcome.reports);
        }
        Command::RunSeq { manifest } => {
            let manifest = ManifestFile::load(&manifest)?.resolve()?;
            let result = run_sequence(&manifest)?;
            println!("config hash: {}", result.config_hash);
            print!("{}", result.matrix_table());
            println!("outputs in {}", result.out_dir.display());
        }
        Command::Eval { ckpt, data, out } => {
            let checkpoint = io::read_checkpoint(&ckpt)?;
            let dataset = io::read_dataset(&data)?;
            let report = evaluate_checkpoint(
                &checkpoint,
                &dataset,
                checkpoint.meta.stage,
                &checkpoint.meta.method.clone(),
                0,
                None,
            )?;
            io::write_text(&out, &report.to_csv())?;
            print!("{}", report.summary_text());
        }
        Command::Sweep { config, axis, values } => {
            let spec = StageConfigFile::load(&config)?.resolve()?;
            let axis = SweepAxis::parse(&axis)?;
            let values = match values {
                None => axis.default_grid(),
                Some(list) => list
                    .split(',')
                    .map(|v| {
                        v.trim().parse::<f64>().map_err(|_| {
                            CliError::config(format!("bad sweep value {v:?}"))
                        })
                    })
                    .collect::<Result<Vec<f64>, CliError>>()?,
            };
            let result = run_sweep(&spec, axis, &values)?;
            print!("{}", result.to_csv());
        }
        Command::Analyze { student, teacher, data, n, seed, out } => {
            let student = io::read_checkpoint(&student)?;
            let teacher = io::read_checkpoint(&teacher)?;
            let dataset = io::read_dataset(&data)?;
            let report = analyze_correlation(&student, &teacher, &dataset, n, seed)?;
            write_report(&report, &out)?;
            print!("{}", report.summary_text());
        }
    }
    Ok(())
}

fn print_reports(reports: &[(PathBuf, ilctc_core::decode::EvalReport)]) {
    for (path, report) in reports {
        println!(
            "{}: corpus CER {:.2}% over {} samples",
            path.display(),
            report.corpus_cer * 100.0,
            report.samples.len()
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
