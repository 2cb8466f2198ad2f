use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use superscale_core::fitting::{self, FitRange, JointFitOptions, JointPoint, SizePoint};
use superscale_core::harness::{self, AnalyzeOptions, ConfigFile, SweepConfig};

#[derive(Parser)]
#[command(name = "superscale", version, about = "Superposition toy models and scaling-law fits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a JSON config.
    Train {
        config: PathBuf,
        /// Directory that receives `<config hash>/`.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run every cell of a sweep config, skipping finished cells.
    Sweep {
        config: PathBuf,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        /// Worker threads (also capped by SUPERSCALE_THREADS).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Geometry report for a weight matrix (SPSW or headerless CSV).
    Analyze {
        matrix: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_ambiguity: bool,
        #[arg(long, default_value_t = 1.0)]
        strong_threshold: f64,
    },
    /// Log-log power-law fit of two CSV columns.
    Fit {
        csv: PathBuf,
        #[arg(long, default_value = "m")]
        x: String,
        #[arg(long, default_value = "loss")]
        y: String,
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long, default_value_t = 0)]
        skip_first: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Joint fit of `C / m^alpha + offset[group]` to a CSV with m,loss,group.
    FitJoint {
        csv: PathBuf,
        #[arg(long, default_value_t = 8)]
        starts: usize,
        #[arg(long, default_value_t = 20_000)]
        iterations: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zipf exponent of a JSON object of token counts.
    TokenFit {
        counts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Shared-slope fit of `N = c_class m^k` to a CSV with N,m,class.
    SizeFit {
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Squared overlaps of random unit vectors against the closed form.
    Baseline {
        #[arg(long, default_value_t = 50)]
        m: usize,
        #[arg(long, default_value_t = 2000)]
        vectors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-family loss-vs-width fits from a sweep CSV.
    ScalingReport {
        sweep_csv: PathBuf,
        #[arg(long, default_value_t = 0)]
        skip_first: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = r.headers()?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == *n)
                .with_context(|| format!("{} has no column `{n}`", path.display()))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(idx.iter().map(|&i| rec.get(i).unwrap_or("").to_string()).collect());
    }
    Ok(rows)
}

fn num(s: &str, what: &str) -> Result<f64> {
    s.parse().with_context(|| format!("cannot parse {what} value {s:?}"))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = ConfigFile::from_json(&text)?.resolve()?;
            let result = harness::run(&cfg, &out)?;
            eprintln!("run directory: {}", harness::run_dir(&out, &cfg).display());
            emit(&result, None)?;
        }
        Command::Sweep { config, out, threads } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg: SweepConfig = serde_json::from_str(&text)?;
            let rows = harness::sweep(&cfg, &out, threads)?;
            let failed = rows.iter().filter(|r| !r.is_ok()).count();
            eprintln!(
                "{} runs ({} failed); table at {}",
                rows.len(),
                failed,
                out.join(harness::SWEEP_CSV).display()
            );
        }
        Command::Analyze {
            matrix,
            out,
            no_ambiguity,
            strong_threshold,
        } => {
            let opts = AnalyzeOptions {
                ambiguity: !no_ambiguity,
                strong_threshold,
                ..Default::default()
            };
            emit(&harness::analyze(&matrix, &opts)?, out.as_deref())?;
        }
        Command::Fit {
            csv,
            x,
            y,
            lo,
            hi,
            skip_first,
            out,
        } => {
            let rows = read_columns(&csv, &[&x, &y])?;
            let pts = rows
                .iter()
                .map(|r| Ok((num(&r[0], &x)?, num(&r[1], &y)?)))
                .collect::<Result<Vec<_>>>()?;
            let range = FitRange { lo, hi, skip_first };
            emit(&fitting::fit_powerlaw(&pts, Some(range))?, out.as_deref())?;
        }
        Command::FitJoint {
            csv,
            starts,
            iterations,
            lr,
            seed,
            out,
        } => {
            let rows = read_columns(&csv, &["m", "loss", "group"])?;
            let pts = rows
                .into_iter()
                .map(|r| {
                    Ok(JointPoint {
                        m: num(&r[0], "m")?,
                        loss: num(&r[1], "loss")?,
                        group: r[2].clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let opts = JointFitOptions {
                lr,
                iterations,
                starts,
                seed,
                ..Default::default()
            };
            emit(&fitting::fit_joint_scaling(&pts, &opts)?, out.as_deref())?;
        }
        Command::TokenFit { counts, out } => {
            let text = fs::read_to_string(&counts).with_context(|| format!("reading {}", counts.display()))?;
            let map: BTreeMap<String, u64> = serde_json::from_str(&text)?;
            emit(&fitting::fit_token_frequency(map.values())?, out.as_deref())?;
        }
        Command::SizeFit { csv, out } => {
            let rows = read_columns(&csv, &["N", "m", "class"])?;
            let pts = rows
                .into_iter()
                .map(|r| {
                    Ok(SizePoint {
                        n: num(&r[0], "N")?,
                        m: num(&r[1], "m")?,
                        class: r[2].clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            emit(&fitting::fit_size_dimension(&pts)?, out.as_deref())?;
        }
        Command::Baseline { m, vectors, seed, out } => {
            if vectors < 2 {
                bail!("need at least 2 vectors");
            }
            emit(&harness::random_sphere_report(m, vectors, seed)?, out.as_deref())?;
        }
        Command::ScalingReport {
            sweep_csv,
            skip_first,
            out,
        } => {
            let rows = harness::read_sweep_csv(&sweep_csv)?;
            let range = FitRange {
                skip_first,
                ..Default::default()
            };
            let report = harness::scaling_report(&rows, Some(range))?;
            match out {
                Some(p) => harness::write_csv(&p, &report)?,
                None => emit(&report, None)?,
            }
        }
    }
    Ok(())
}
