//! Command-line entry point. Each subcommand runs one pipeline stage inside a
//! run directory and writes a manifest next to its outputs.

use clap::{Args, Parser, Subcommand};
use interlat::pipeline::{PayloadSpec, RunConfig, Workspace, OUTPUT_ROOT_ENV};
use interlat::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "interlat", version, about = "Latent-space communication between two small transformer agents")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory name, resolved under the output root.
    #[arg(long, global = true, default_value = "default")]
    run: String,
    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,
    /// Override a configuration key, e.g. `--set actor.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Reuse outputs of stages that already ran with the same configuration.
    #[arg(long, global = true)]
    reuse: bool,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/validation/seen/unseen task pools.
    GenData,
    /// Pretrain the base model (if needed) and train actor plus adapter.
    TrainActor,
    /// Train one reasoner per compression length.
    TrainReasoner {
        /// Lengths to train; defaults to the configured grid.
        #[arg(long = "k")]
        ks: Vec<usize>,
    },
    /// Evaluate payload kinds and perturbation variants on both splits.
    Eval {
        /// Payloads to run (matched, text, none, reasoner-K<k>, or a
        /// perturbation name); defaults to the configured list.
        #[arg(long = "payload")]
        payloads: Vec<String>,
    },
    /// CE sweeps over truncation ratios and compression lengths.
    CompressSweep,
    /// Top-k band profiles of trained versus untrained rollouts.
    AnalyzeParallelism,
    /// Message-production latency of full decode versus K-step rollout.
    BenchLatency,
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override key {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut table = match &common.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for o in &common.overrides {
        apply_override(&mut table, o)?;
    }
    RunConfig::from_toml(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let mut ws = Workspace::new(cfg, cli.common.output_root.join(&cli.common.run))?;
    ws.reuse = cli.common.reuse;
    ws.verbose = !cli.common.quiet;
    match cli.command {
        Command::GenData => {
            let d = ws.gen_data()?;
            println!(
                "tasks: train {} validation {} seen {} unseen {}",
                d.train.len(),
                d.validation.len(),
                d.seen_eval.len(),
                d.unseen_eval.len()
            );
        }
        Command::TrainActor => {
            let (_, _, out) = ws.train_actor()?;
            println!("best validation loss {:.4} at step {} (early stop: {})", out.best_val, out.best_step, out.stopped_early);
        }
        Command::TrainReasoner { ks } => {
            let only = (!ks.is_empty()).then_some(ks.as_slice());
            for (k, log) in ws.train_reasoners(only)? {
                if let Some(last) = log.last() {
                    println!("K={k}: task {:.4} pref {:.4} geom {:.4} total {:.4}", last.task, last.pref, last.geom, last.total);
                }
            }
        }
        Command::Eval { payloads } => {
            let names = if payloads.is_empty() { ws.cfg.eval.payloads.clone() } else { payloads };
            let specs = names.iter().map(|p| p.parse::<PayloadSpec>()).collect::<Result<Vec<_>>>()?;
            let (_, summary) = ws.eval(&specs)?;
            println!("{:<16} {:<7} {:>16} {:>12}", "payload", "split", "success", "steps");
            for s in summary {
                let steps = s.steps_success_mean.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<16} {:<7} {:>7.1} ± {:<6.1} {:>5}/{:.1}",
                    s.payload,
                    s.split,
                    100.0 * s.success_mean,
                    100.0 * s.success_std,
                    steps,
                    s.steps_all_mean
                );
            }
        }
        Command::CompressSweep => {
            for s in ws.compress_sweep()? {
                for p in &s.points {
                    println!("{:<22} {:>6} ce {:.4} bits  ΔCE {:+.2}%", s.source, p.grid, p.ce_bits, p.delta_ce_percent);
                }
            }
        }
        Command::AnalyzeParallelism => {
            let (trained, base) = ws.analyze_parallelism()?;
            let (tm, _) = interlat::analysis::aggregate_p50(&trained);
            let (bm, _) = interlat::analysis::aggregate_p50(&base);
            println!("mean P50(S10): trained {tm:.4} untrained {bm:.4}");
        }
        Command::BenchLatency => {
            for r in ws.bench_latency()? {
                println!("{:<24} {:.5}s ± {:.5}s over {}", r.case, r.mean_s, r.std_s, r.repetitions);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Capacity { .. } => 3,
        Error::TrainingFault(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
