use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lowcount::harness::{self, EvalOptions, RunConfig, Sweep};
use lowcount::model::load_checkpoint;
use lowcount::scenegen::{export_ppm, load_dataset, save_dataset};
use lowcount::segscore::{self, io::load_proposal_set};
use lowcount::Error;

#[derive(Parser)]
#[command(
    name = "lowcount",
    version,
    about = "Partially-supervised object counting on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test splits into `<out>/train` and `<out>/test`.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory; writes checkpoints and the training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes report.json and report.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write every density map as PGM under `<report>/density`.
        #[arg(long)]
        dump_density: bool,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Train one arm per value on shared data and tabulate the results.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sweep: Sweep,
        /// Comma-separated values, e.g. `0,0.1`.
        #[arg(long)]
        values: String,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank segmentation proposals from a proposal directory; prints CSV.
    ScoreProposals {
        #[arg(long)]
        dir: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write every image of a dataset as binary PPM.
    ExportPpm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error with the exit status it maps to: 1 for usage or configuration
/// problems, 2 for failures while running.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = if matches!(error, Error::Config(_)) { 1 } else { 2 };
        Failure { code, error }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|error| Failure { code: 1, error })
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Hash and seed of the run that produced a checkpoint, read from the
/// `config.json` that training writes next to it.
fn run_identity(checkpoint: &Path) -> (String, u64) {
    checkpoint
        .parent()
        .map(|d| d.join("config.json"))
        .and_then(|p| fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str::<RunConfig>(&t).ok())
        .map_or((String::new(), 0), |c| (c.hash(), c.seed))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = load_config(&config)?;
            let (train, test) = harness::generate_splits(&cfg)?;
            save_dataset(&train, &out.join("train"))?;
            save_dataset(&test, &out.join("test"))?;
            println!(
                "wrote {} train and {} test samples to {}",
                train.len(),
                test.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let dataset = load_dataset(&data)?;
            let outcome = harness::train(&cfg, &dataset, Some(&out))?;
            println!(
                "trained {} epochs in {:.1}s; checkpoint at {}",
                cfg.total_epochs(),
                outcome.log.wall_clock_seconds,
                out.join("checkpoint").display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            report,
            dump_density,
            batch_size,
        } => {
            let mut model = load_checkpoint(&checkpoint)?.model;
            let dataset = load_dataset(&data)?;
            let (config_hash, seed) = run_identity(&checkpoint);
            let opts = EvalOptions {
                batch_size,
                config_hash,
                seed,
            };
            let eval = harness::evaluate(&mut model, &dataset, &opts)?;
            eval.report.write(&report)?;
            if dump_density {
                harness::dump_densities(&mut model, &dataset, &report.join("density"), batch_size)?;
            }
            let r = &eval.report;
            println!(
                "mRMSE {:.4}  mRMSE-nz {:.4}  m-relRMSE {:.4}  total RMSE {:.4}",
                r.mrmse, r.mrmse_nz, r.m_relrmse, r.total_rmse
            );
        }
        Command::Ablate {
            config,
            sweep,
            values,
            out,
        } => {
            let cfg = load_config(&config)?;
            let values = harness::parse_sweep(&values).map_err(|error| Failure { code: 1, error })?;
            let out = out.or_else(|| cfg.output_dir.clone());
            let (train, test) = harness::generate_splits(&cfg)?;
            let rows = harness::ablate(&cfg, sweep, &values, &train, &test, out.as_deref())?;
            print!("{}", harness::ablate_csv(&rows));
        }
        Command::ScoreProposals { dir, out } => {
            let (manifest, set) = load_proposal_set(&dir)?;
            let ranked = segscore::score_proposals(&set)?;
            let csv = segscore::io::ranking_csv(&ranked, &manifest.proposals);
            match out {
                Some(path) => write_text(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::ExportPpm { data, out } => {
            let dataset = load_dataset(&data)?;
            export_ppm(&dataset, &out)?;
            println!("wrote {} images to {}", dataset.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error}");
            ExitCode::from(code)
        }
    }
}
