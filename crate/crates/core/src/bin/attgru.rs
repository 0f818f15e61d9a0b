use std::path::PathBuf;
use std::process::ExitCode;

use attentive_gru::config::RunConfig;
use attentive_gru::harness::{self, GradCheckSettings};
use attentive_gru::model::ModelKind;
use attentive_gru::tensor::Precision;
use attentive_gru::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attgru", about = "Radar BEV temporal-fusion detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ModelKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic radar dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Overrides `data.sequences`.
        #[arg(long)]
        sequences: Option<usize>,
    },
    /// Train a detector.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Separate validation set for early stopping.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Continue the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `model.bin` or a training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the fusion layer over sequence lengths.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse()
}

fn parse_mode(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.data.seed = seed;
        c.train.seed = seed;
    }
    if let Some(p) = common.precision {
        c.train.precision = p;
    }
    if let Some(m) = common.mode {
        c.model.kind = m;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            common,
            out,
            force,
            sequences,
        } => {
            let mut c = load(&common)?;
            if let Some(n) = sequences {
                c.data.sequences = n;
            }
            let files = harness::simulate(&c, &out, force)?;
            println!("wrote {} sequences to {}", files.len(), out.display());
        }
        Command::Train {
            common,
            data,
            val,
            out,
            force,
            resume,
        } => {
            let c = load(&common)?;
            let r = harness::train_command(&c, &data, val.as_deref(), &out, force, resume)?;
            for e in &r.history {
                println!(
                    "epoch {:>3}  lr {:.1e}  train {:.6}  val {:.6}",
                    e.epoch, e.lr, e.train_loss, e.val_loss
                );
            }
            println!("{} steps, model written to {}", r.global_step, out.join("model.bin").display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
        } => {
            let c = load(&common)?;
            let report = harness::eval_command(&c, &checkpoint, &data, &out)?;
            print!("{}", report.to_csv());
        }
        Command::Bench {
            common,
            lengths,
            repeats,
            out,
        } => {
            let c = load(&common)?;
            let rows = harness::bench(&c.model, &lengths, repeats, c.train.seed)?;
            let csv = harness::bench_csv(&rows);
            print!("{csv}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                let path = dir.join("bench.csv");
                std::fs::write(&path, csv).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                c.echo(&dir)?;
            }
        }
        Command::Gradcheck {
            seed,
            epsilon,
            tolerance,
        } => {
            let summary = harness::gradcheck(&GradCheckSettings {
                epsilon,
                tolerance,
                seed: seed.unwrap_or(0),
            })?;
            print!("{}", summary.table());
            summary.ensure_passed()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
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
