//! `sparsemac` command-line driver: trace analysis, dense vs. sparse
//! simulation, sparsity sweeps and scheduled-form compression, all reported
//! as CSV.

mod config;
mod run;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_pairs, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] sparsemac::Error),
    #[error("trace: {0}")]
    Trace(#[from] sparsemac::trace::TraceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Parser)]
#[command(name = "sparsemac", version, about = "Sparse MAC accelerator simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-tensor zero fractions of a trace or synthetic layer.
    Analyze(Flags),
    /// Dense vs. sparse cycles and energy per layer and op.
    Simulate(Flags),
    /// Synthetic layer at sparsity 0.1 through 0.9.
    Sweep(Flags),
    /// Scheduled-form storage of every tensor.
    Compress(Flags),
}

#[derive(Args)]
struct Flags {
    /// key = value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: Option<String>,
    /// s=<f>,dims=<n,c,h,w>
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    rows: Option<String>,
    #[arg(long)]
    cols: Option<String>,
    #[arg(long)]
    lanes: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    /// dense, sparse_b or sparse_both
    #[arg(long)]
    mode: Option<String>,
    /// fwd, igrad, wgrad or all
    #[arg(long)]
    op: Option<String>,
    /// auto, a, b or both
    #[arg(long)]
    side: Option<String>,
    /// f32 or bf16
    #[arg(long)]
    dtype: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<String>,
}

impl Flags {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            for (k, v) in parse_pairs(&fs::read_to_string(path)?)? {
                cfg.set(&k, &v)?;
            }
        }
        let flags = [
            ("trace", &self.trace),
            ("synthetic", &self.synthetic),
            ("rows", &self.rows),
            ("cols", &self.cols),
            ("lanes", &self.lanes),
            ("depth", &self.depth),
            ("mode", &self.mode),
            ("op", &self.op),
            ("side", &self.side),
            ("dtype", &self.dtype),
            ("seed", &self.seed),
            ("out", &self.out),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

type Command = fn(&RunConfig) -> Result<String, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (flags, cmd): (&Flags, Command) = match &cli.cmd {
        Cmd::Analyze(f) => (f, run::analyze),
        Cmd::Simulate(f) => (f, run::simulate),
        Cmd::Sweep(f) => (f, run::sweep),
        Cmd::Compress(f) => (f, run::compress),
    };
    let result = flags.resolve().and_then(|cfg| {
        let csv = cmd(&cfg)?;
        match &cfg.out {
            Some(path) => fs::write(path, csv)?,
            None => print!("{csv}"),
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
