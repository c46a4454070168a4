//! `int4kv`: calibration, error benchmarks, attention benchmarks, serving
//! simulation and self-checks for the INT4 KV-cache library.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use int4kv::harness::MethodRecipe;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "int4kv", version, about = "INT4 KV-cache quantization toolkit")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: config `output_dir`, then $INT4KV_OUT_DIR, then ./int4kv-out).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn per-layer rotations and codebooks and write a calibration artifact.
    Calibrate(CalibrateArgs),
    /// Run the method matrix on synthetic activations and write error reports.
    BenchQuant(BenchQuantArgs),
    /// Time cache writes and decode per storage mode and report byte ratios.
    BenchAttn(BenchAttnArgs),
    /// Sweep concurrency in the serving simulator.
    ServeSim(ServeSimArgs),
    /// Run the oracle equivalence checks.
    Selftest,
}

#[derive(Args)]
struct CalibrateArgs {
    /// JSON file with per-layer `queries`, `keys` and `values` matrices.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    /// Codebook sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    clusters: Option<Vec<usize>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tokens: Option<usize>,
}

#[derive(Args)]
struct BenchQuantArgs {
    /// Method names, comma separated (e.g. `int4,bdr-128,km-c16+bdr-128,hessian+bdr-128`).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<MethodRecipe>>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    context_tokens: Option<usize>,
}

#[derive(Args)]
struct BenchAttnArgs {
    #[arg(long)]
    context_tokens: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
}

#[derive(Args)]
struct ServeSimArgs {
    /// Concurrency levels, comma separated.
    #[arg(long, value_delimiter = ',')]
    concurrency: Option<Vec<usize>>,
    #[arg(long)]
    budget_bytes: Option<u64>,
    #[arg(long)]
    no_traces: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    match &cli.command {
        Command::Calibrate(a) => {
            let c = &mut cfg.calibration;
            if a.samples.is_some() {
                c.samples = a.samples.clone();
            }
            set(&mut c.layers, a.layers);
            set(&mut c.rotation_order, a.order);
            set(&mut c.clusters, a.clusters.clone());
            set(&mut c.alpha, a.alpha);
            set(&mut c.tokens, a.tokens);
        }
        Command::BenchQuant(a) => {
            set(&mut cfg.methods, a.methods.clone());
            set(&mut cfg.bench.num_seeds, a.seeds);
            set(&mut cfg.bench.context_tokens, a.context_tokens);
        }
        Command::BenchAttn(a) => {
            set(&mut cfg.attn.context_tokens, a.context_tokens);
            set(&mut cfg.attn.trials, a.trials);
            set(&mut cfg.attn.rotation_order, a.order);
        }
        Command::ServeSim(a) => {
            set(&mut cfg.serve.concurrencies, a.concurrency.clone());
            if a.budget_bytes.is_some() {
                cfg.serve.budget_bytes = a.budget_bytes;
            }
            if a.no_traces {
                cfg.serve.write_traces = false;
            }
        }
        Command::Selftest => {}
    }
    cfg.validate()?;
    let out = cfg.resolve_out_dir(cli.out_dir.clone());
    match cli.command {
        Command::Calibrate(_) => commands::calibrate(&cfg, &out),
        Command::BenchQuant(_) => commands::bench_quant(&cfg, &out),
        Command::BenchAttn(_) => commands::bench_attn(&cfg, &out),
        Command::ServeSim(_) => commands::serve_sim(&cfg, &out),
        Command::Selftest => commands::selftest(&cfg, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
