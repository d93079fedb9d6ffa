//! `geoeval`: validate manifests, run the benchmark, render reports,
//! generate synthetic cities and self-check head gradients.
//!
//! Exit codes: 0 success, 1 validation failure or error, 2 run finished
//! with per-job failures.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use geoeval::dataset::CityPolicy;
use geoeval::heads::{standard_gradient_checks, HeadKind};
use geoeval::manifest::{validate_manifest, Manifest};
use geoeval::runner::{report, run, RunPlan};
use geoeval::split::Protocol;
use geoeval::synth::{write_synth_suite, SynthConfig};

#[derive(Parser)]
#[command(name = "geoeval", version, about = "Evaluation harness for geospatial embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that every manifest entry resolves and dimensions agree.
    Validate { manifest: PathBuf },
    /// Evaluate every model on every task and city, resuming if possible.
    Run {
        manifest: PathBuf,
        /// Block grid as NXxNY.
        #[arg(long, default_value = "10x10", value_parser = parse_grid)]
        grid: (u32, u32),
        #[arg(long, value_delimiter = ',', default_value = "spatial,random")]
        protocols: Vec<Protocol>,
        #[arg(long, value_delimiter = ',', default_value = "42,24,7,0,100")]
        seeds: Vec<i64>,
        #[arg(long, default_value = "mlp")]
        head: HeadKind,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Worker threads; defaults to one per core.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Rebuild summaries and the leaderboard from a result store.
    Report { dir: PathBuf },
    /// Write synthetic cities and a manifest from a JSON config or list.
    Synth {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic head gradients with central differences.
    Gradcheck,
}

fn parse_grid(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected NXxNY, got {s}"))?;
    let parse = |t: &str| t.trim().parse::<u32>().map_err(|e| format!("bad grid size {t}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum SynthConfigs {
    One(SynthConfig),
    Many(Vec<SynthConfig>),
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate { manifest } => {
            let m = Manifest::load(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
            let r = validate_manifest(&m, &CityPolicy::default());
            println!("{} resolvable combinations", r.resolvable.len());
            for (c, why) in &r.gaps {
                println!("gap: {} {} {}: {why}", c.model, c.task, c.city);
            }
            for w in &r.warnings {
                println!("warning: {w}");
            }
            for e in &r.errors {
                println!("error: {e}");
            }
            Ok(if r.is_ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Run {
            manifest,
            grid,
            protocols,
            seeds,
            head,
            out,
            workers,
        } => {
            let m = Manifest::load(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
            let mut plan = RunPlan::new(m, out);
            plan.grid = grid;
            plan.protocols = protocols;
            plan.seeds = seeds;
            plan.head = head;
            plan.workers = workers;
            let s = match run(&plan) {
                Ok(s) => s,
                Err(e @ geoeval::Error::Validation(_)) => {
                    eprintln!("validation failed: {e}");
                    return Ok(ExitCode::from(1));
                }
                Err(e) => return Err(e.into()),
            };
            println!(
                "{} new records, {} total, {} jobs already complete",
                s.new_records, s.total_records, s.skipped_jobs
            );
            for (city, task) in &s.restricted {
                println!("restricted: {task} not evaluated for {city}");
            }
            for f in &s.failures {
                eprintln!(
                    "failed: {} {} {} {} {}: {}",
                    f.model,
                    f.task,
                    f.city,
                    f.protocol.map_or("-".into(), |p| p.to_string()),
                    f.seed.map_or("-".into(), |v| v.to_string()),
                    f.error
                );
            }
            if s.total_records > 0 {
                print!("{}", std::fs::read_to_string(plan.out_dir.join("leaderboard.txt"))?);
            }
            Ok(if s.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::Report { dir } => {
            let r = report(&dir)?;
            println!("protocol: {}", r.protocol);
            print!("{}", r.leaderboard);
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { config, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let configs = match serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))? {
                SynthConfigs::One(c) => vec![c],
                SynthConfigs::Many(v) => v,
            };
            if configs.is_empty() {
                bail!("{} lists no cities", config.display());
            }
            let m = write_synth_suite(&configs, &out)?;
            println!(
                "wrote {} cities and {} models; manifest at {}",
                m.cities.len(),
                m.models.len(),
                out.join("manifest.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck => {
            let mut ok = true;
            for c in standard_gradient_checks()? {
                ok &= c.passed();
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<18} max rel error {:.3e} (< {:.0e}) {verdict}",
                    c.name, c.max_rel_error, c.tolerance
                );
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_argument() {
        assert_eq!(parse_grid("20x20"), Ok((20, 20)));
        assert_eq!(parse_grid("10X4"), Ok((10, 4)));
        assert!(parse_grid("10").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
