use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ldn_cli::bench::{run_bench, to_csv, BenchSpec};
use ldn_cli::commands::{cmd_eval, cmd_gradcheck, cmd_train, cmd_verify};
use ldn_cli::{load_config, CliConfig, CliError};

/// Linear diffusion network: training, evaluation and structural checks.
#[derive(Parser)]
#[command(name = "ldn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file with "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Sets both model.seed and train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<CliConfig, CliError> {
        load_config(self.config.as_deref(), &self.set, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, streaming JSON-lines metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Where to write the final checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Metrics file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on fresh samples.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stability and global-dependency checks on a random-init model.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer forward time against sequence length, as CSV.
    Bench {
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        psi_hidden: usize,
        #[arg(long = "t-list", value_delimiter = ',', default_value = "128,256,512,1024")]
        t_list: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Time this many sequences at once across all cores instead of one
        /// sequence on one thread.
        #[arg(long)]
        parallel: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit(out: Option<&Path>, report: &serde_json::Value) -> Result<(), CliError> {
    let mut w = sink(out)?;
    writeln!(
        w,
        "{}",
        serde_json::to_string_pretty(report).expect("report serializes")
    )?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { cfg, ckpt, out } => {
            let cfg = cfg.load()?;
            let mut w = sink(out.as_deref())?;
            let summary = cmd_train(&cfg, &mut w, ckpt.as_deref())?;
            eprintln!("{summary}");
            Ok(())
        }
        Command::Eval { cfg, ckpt, out } => emit(out.as_deref(), &cmd_eval(&cfg.load()?, &ckpt)?),
        Command::Verify { cfg, out } => {
            let (report, pass) = cmd_verify(&cfg.load()?)?;
            emit(out.as_deref(), &report)?;
            if pass {
                Ok(())
            } else {
                Err(CliError::Check("verify".into()))
            }
        }
        Command::Gradcheck { cfg, eps, tol, out } => {
            let (report, pass) = cmd_gradcheck(&cfg.load()?, eps, tol)?;
            emit(out.as_deref(), &report)?;
            if pass {
                Ok(())
            } else {
                Err(CliError::Check(format!("gradcheck failures: {}", report["failures"])))
            }
        }
        Command::Bench {
            d,
            layers,
            psi_hidden,
            t_list,
            repeats,
            parallel,
            seed,
            out,
        } => {
            let rows = run_bench(&BenchSpec {
                d,
                layers,
                psi_hidden,
                t_list,
                repeats,
                parallel_batch: parallel,
                seed,
            })?;
            let mut w = sink(out.as_deref())?;
            w.write_all(to_csv(&rows).as_bytes())?;
            w.flush()?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
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
