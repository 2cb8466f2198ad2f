use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ConfigFile, RunConfig};
use super::train::{self, load_failure, run_dir, RunResult};
use crate::error::{Error, Result};
use crate::rng::stable_hash;
use crate::sampler::FrequencyKind;

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "SUPERSCALE_THREADS";

/// Values to sweep. Empty axes keep the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub m: Vec<usize>,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ConfigFile,
    pub grid: SweepGrid,
}

fn axis<T: Copy>(values: &[T], default: Option<T>) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![default]
    } else {
        values.iter().map(|&v| Some(v)).collect()
    }
}

/// One resolved config per grid cell, ordered alpha, density, gamma, m
/// (m varying fastest). Each cell's seed is a hash of the base seed and the
/// cell's own values, so adding grid points leaves existing cells alone.
pub fn expand(cfg: &SweepConfig) -> Result<Vec<RunConfig>> {
    let g = &cfg.grid;
    if g.m.is_empty() && g.gamma.is_empty() && g.alpha.is_empty() && g.density.is_empty() {
        return Err(Error::invalid("sweep grid has no values"));
    }
    let base_seed = cfg.base.seed.unwrap_or(0);
    let mut out = Vec::new();
    for alpha in axis(&g.alpha, None) {
        for density in axis(&g.density, None) {
            for gamma in axis(&g.gamma, None) {
                for m in axis(&g.m, None) {
                    let mut file = cfg.base.clone();
                    if let Some(m) = m {
                        file.m = Some(m);
                    }
                    if let Some(gamma) = gamma {
                        file.gamma = Some(gamma);
                    }
                    if alpha.is_some() || density.is_some() {
                        // start from the preset spec when the base leaves it out
                        let mut spec = match file.spec {
                            Some(s) => s,
                            None => file.resolve_spec()?,
                        };
                        if let Some(a) = alpha {
                            match &mut spec.kind {
                                FrequencyKind::Power { alpha } => *alpha = a,
                                _ => return Err(Error::invalid("alpha axis needs a power-law spec")),
                            }
                        }
                        if let Some(e) = density {
                            spec.density = e;
                        }
                        file.spec = Some(spec);
                    }
                    let mut config = file.resolve()?;
                    config.seed = stable_hash(&[
                        b"cell",
                        &base_seed.to_le_bytes(),
                        &config.m.to_le_bytes(),
                        &config.gamma.to_bits().to_le_bytes(),
                        &serde_json::to_vec(&config.spec)?,
                    ]);
                    out.push(config);
                }
            }
        }
    }
    Ok(out)
}

/// One tidy row per run: every config scalar followed by every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schema_version: u32,
    pub config_hash: String,
    pub status: String,
    pub failure_reason: Option<String>,
    pub recipe: String,
    pub profile: String,
    pub n: usize,
    pub freq_kind: String,
    pub alpha: Option<f64>,
    pub scale: Option<f64>,
    pub density: f64,
    pub m: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub lr_rule: String,
    pub bias_lr_scale: f64,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub eval_multiplier: usize,
    pub init_scheme: String,
    pub init_scale: f64,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub test_loss_stderr: Option<f64>,
    pub phi_half: Option<f64>,
    pub phi_one: Option<f64>,
    pub norm_min: Option<f64>,
    pub norm_mean: Option<f64>,
    pub norm_max: Option<f64>,
    pub mean_abs: Option<f64>,
    pub var_abs: Option<f64>,
    pub mean_sq: Option<f64>,
    pub var_sq: Option<f64>,
    pub max_abs: Option<f64>,
    pub n_strong: Option<usize>,
    pub strong_mean_sq: Option<f64>,
    pub strong_var_sq: Option<f64>,
    pub strong_var_ratio: Option<f64>,
    pub welch_kappa_sq: Option<f64>,
    pub ambiguity: Option<f64>,
    pub wall_time_s: Option<f64>,
}

fn tag<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

impl SweepRow {
    fn from_config(config: &RunConfig, status: &str, failure_reason: Option<String>) -> Self {
        let (freq_kind, alpha, scale) = match config.spec.kind {
            FrequencyKind::Power { alpha } => ("power", Some(alpha), None),
            FrequencyKind::Exponential { scale } => ("exponential", None, Some(scale)),
            FrequencyKind::Linear => ("linear", None, None),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config.hash(),
            status: status.into(),
            failure_reason,
            recipe: tag(&config.recipe),
            profile: tag(&config.profile),
            n: config.spec.n,
            freq_kind: freq_kind.into(),
            alpha,
            scale,
            density: config.spec.density,
            m: config.m,
            batch_size: config.batch_size,
            total_steps: config.total_steps,
            warmup_steps: config.warmup_steps,
            base_lr: config.base_lr,
            lr_rule: tag(&config.lr_rule),
            bias_lr_scale: config.bias_lr_scale,
            gamma: config.gamma,
            beta1: config.adam.beta1,
            beta2: config.adam.beta2,
            adam_eps: config.adam.eps,
            seed: config.seed,
            eval_multiplier: config.eval_multiplier,
            init_scheme: tag(&config.init_scheme),
            init_scale: config.init_scale,
            final_train_loss: None,
            final_test_loss: None,
            test_loss_stderr: None,
            phi_half: None,
            phi_one: None,
            norm_min: None,
            norm_mean: None,
            norm_max: None,
            mean_abs: None,
            var_abs: None,
            mean_sq: None,
            var_sq: None,
            max_abs: None,
            n_strong: None,
            strong_mean_sq: None,
            strong_var_sq: None,
            strong_var_ratio: None,
            welch_kappa_sq: None,
            ambiguity: None,
            wall_time_s: None,
        }
    }

    pub fn completed(r: &RunResult) -> Self {
        let mut row = Self::from_config(&r.config, "ok", None);
        let g = &r.geometry;
        row.final_train_loss = Some(r.final_train_loss);
        row.final_test_loss = Some(r.final_test_loss);
        row.test_loss_stderr = r.test_loss_stderr;
        row.phi_half = Some(g.phi.phi_half);
        row.phi_one = Some(g.phi.phi_one);
        row.norm_min = Some(g.phi.norm_min);
        row.norm_mean = Some(g.phi.norm_mean);
        row.norm_max = Some(g.phi.norm_max);
        if let Some(o) = &g.overlap_all {
            row.mean_abs = Some(o.mean_abs);
            row.var_abs = Some(o.var_abs);
            row.mean_sq = Some(o.mean_sq);
            row.var_sq = Some(o.var_sq);
            row.max_abs = Some(o.max_abs);
        }
        match &g.strong {
            Some(s) => {
                row.n_strong = Some(s.n_strong);
                row.strong_mean_sq = Some(s.mean_sq);
                row.strong_var_sq = Some(s.var_sq);
                row.strong_var_ratio = Some(s.var_ratio_vs_random);
                row.welch_kappa_sq = Some(s.welch_kappa_sq);
            }
            None => row.n_strong = Some((g.phi.phi_one * r.config.spec.n as f64).round() as usize),
        }
        row.ambiguity = g.ambiguity;
        row.wall_time_s = Some(r.wall_time_s);
        row
    }

    pub fn failed(config: &RunConfig, reason: String) -> Self {
        Self::from_config(config, "failed", Some(reason))
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Worker count: the request, capped by `SUPERSCALE_THREADS` when set,
/// defaulting to the available cores.
pub fn worker_count(requested: Option<usize>) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let env = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok());
    let n = requested.unwrap_or(cores);
    env.map_or(n, |cap| n.min(cap)).max(1)
}

fn run_cell(config: &RunConfig, runs: &Path) -> SweepRow {
    let dir = run_dir(runs, config);
    if let Ok(Some(f)) = load_failure(&dir) {
        if !dir.join(train::RESULT_FILE).exists() {
            return SweepRow::failed(config, f.reason);
        }
    }
    match train::run(config, runs) {
        Ok(r) => SweepRow::completed(&r),
        Err(e) => SweepRow::failed(config, e.to_string()),
    }
}

/// Runs every cell (skipping ones already on disk under `root/runs`) and
/// writes `root/sweep.csv`. Divergent cells become flagged rows.
pub fn sweep(cfg: &SweepConfig, root: &Path, threads: Option<usize>) -> Result<Vec<SweepRow>> {
    let cells = expand(cfg)?;
    let runs = root.join("runs");
    fs::create_dir_all(&runs)?;
    fs::write(root.join("sweep_config.json"), serde_json::to_string_pretty(cfg)?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(threads))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| cells.par_iter().map(|c| run_cell(c, &runs)).collect());
    write_sweep_csv(&root.join(SWEEP_CSV), &rows)?;
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?;
    if let Some(bad) = rows.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        return Err(Error::invalid(format!(
            "sweep CSV schema version {} is not {SCHEMA_VERSION}",
            bad.schema_version
        )));
    }
    Ok(rows)
}
