use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use semprefetch::config::PrefetcherKind;
use semprefetch::sim::{compare, dump_slices, load_workload, Simulation};
use semprefetch::workloads::WorkloadKind;
use semprefetch::RunConfig;

#[derive(Parser)]
#[command(name = "semprefetch", version, about = "Semantic prefetcher simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prefetcher: Option<PrefetcherKind>,
    #[arg(long)]
    workload: Option<WorkloadKind>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulation and print the JSON report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the per-PIE table as CSV.
        #[arg(long)]
        pie_csv: Option<PathBuf>,
    },
    /// Run several configurations side by side.
    Compare {
        configs: Vec<PathBuf>,
        /// Comma-separated prefetchers applied to a single config.
        #[arg(long, value_delimiter = ',')]
        prefetchers: Vec<PrefetcherKind>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run, then print the generation draft and armed slice of every PIE.
    DumpSlices {
        #[command(flatten)]
        common: Common,
    },
    /// Print the workload program and memory image in assembler syntax.
    DumpProgram {
        #[command(flatten)]
        common: Common,
        /// Omit the memory image.
        #[arg(long)]
        text_only: bool,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn build_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = load_config(c.config.as_ref())?;
    if let Some(w) = c.workload {
        cfg.set("workload.kind", w.name())
            .map_err(anyhow::Error::msg)?;
    }
    if let Some(p) = c.prefetcher {
        cfg.prefetcher = p;
    }
    if let Some(s) = c.seed {
        cfg.set("sim.seed", &s.to_string())
            .map_err(anyhow::Error::msg)?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("`{kv}` is not KEY=VALUE"))?;
        cfg.set(k, v).map_err(anyhow::Error::msg)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn real_main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run {
            common,
            out,
            pie_csv,
        } => {
            let cfg = build_config(&common)?;
            let mut sim = Simulation::new(&cfg)?;
            sim.run()?;
            let report = sim.report();
            write_or_print(out.as_ref(), &report.to_json())?;
            if let Some(p) = pie_csv {
                std::fs::write(&p, report.pie_csv())
                    .with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Cmd::Compare {
            configs,
            prefetchers,
            seed,
        } => {
            let mut cfgs = Vec::new();
            for p in &configs {
                cfgs.push(load_config(Some(p))?);
            }
            if cfgs.is_empty() {
                cfgs.push(RunConfig::default());
            }
            if !prefetchers.is_empty() {
                if cfgs.len() != 1 {
                    bail!("--prefetchers needs exactly one config");
                }
                let base = cfgs.pop().expect("one config");
                cfgs = prefetchers
                    .iter()
                    .map(|&p| RunConfig {
                        prefetcher: p,
                        ..base.clone()
                    })
                    .collect();
            }
            if let Some(s) = seed {
                for c in &mut cfgs {
                    c.set("sim.seed", &s.to_string())
                        .map_err(anyhow::Error::msg)?;
                }
            }
            let report = compare(&cfgs)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::DumpSlices { common } => {
            let mut cfg = build_config(&common)?;
            cfg.prefetcher = PrefetcherKind::Semantic;
            let mut sim = Simulation::new(&cfg)?;
            sim.run()?;
            print!("{}", dump_slices(&sim));
        }
        Cmd::DumpProgram { common, text_only } => {
            let cfg = build_config(&common)?;
            let w = load_workload(&cfg)?;
            let memory = if text_only { &[][..] } else { &w.memory[..] };
            print!("{}", semprefetch::asm::render(&w.program, memory));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
