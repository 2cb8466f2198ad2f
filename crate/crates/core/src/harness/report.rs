use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sweep::SweepRow;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::fitting::{fit_powerlaw, FitRange};
use crate::geometry::{self, EtfReport, OverlapStats, PhiReport, PowerIterationOptions};
use crate::real::Real;
use crate::theory::ce_modelsize_loss;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub ambiguity: bool,
    pub overlap_batch: usize,
    pub strong_threshold: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            ambiguity: true,
            overlap_batch: geometry::DEFAULT_OVERLAP_BATCH,
            strong_threshold: geometry::STRONG_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub source: Option<PathBuf>,
    pub n: usize,
    pub m: usize,
    pub has_bias: bool,
    pub phi: PhiReport,
    pub overlap_all: Option<OverlapStats>,
    pub strong: Option<EtfReport>,
    pub random_mean_sq: Option<f64>,
    pub random_var_sq: Option<f64>,
    pub ambiguity: Option<f64>,
    pub ambiguity_error: Option<String>,
    pub ce_modelsize_loss: Option<f64>,
}

fn too_few_is_none<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::TooFewRows { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn analyze_matrix(w: ArrayView2<f64>, opts: &AnalyzeOptions) -> Result<AnalysisReport> {
    let (n, m) = w.dim();
    let (ambiguity, ambiguity_error) = if opts.ambiguity {
        match geometry::ambiguity(w, m, PowerIterationOptions::default()) {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };
    let baseline = geometry::random_sphere_baseline(m).ok();
    Ok(AnalysisReport {
        source: None,
        n,
        m,
        has_bias: false,
        phi: geometry::phi_report(w)?,
        overlap_all: too_few_is_none(geometry::overlap_stats(w, None, opts.overlap_batch))?,
        strong: too_few_is_none(geometry::etf_likeness(w, opts.strong_threshold))?,
        random_mean_sq: baseline.map(|b| b.0),
        random_var_sq: baseline.map(|b| b.1),
        ambiguity,
        ambiguity_error,
        ce_modelsize_loss: too_few_is_none(ce_modelsize_loss(w))?,
    })
}

/// Geometry and diagnostic report for a weight file (binary or CSV).
pub fn analyze(path: &Path, opts: &AnalyzeOptions) -> Result<AnalysisReport> {
    let stored = checkpoint::read_matrix(path)?;
    let w: Array2<f64> = geometry::to_f64(stored.w.view());
    let mut report = analyze_matrix(w.view(), opts)?;
    report.source = Some(path.to_path_buf());
    report.has_bias = stored.b.is_some();
    Ok(report)
}

/// Loss-vs-width fit of one sweep cell family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub freq_kind: String,
    pub n: usize,
    pub alpha: Option<f64>,
    pub scale: Option<f64>,
    pub density: f64,
    pub gamma: f64,
    /// `ok`, `skipped_failures` or `too_few_points`.
    pub status: String,
    pub n_runs: usize,
    pub failed_runs: usize,
    pub alpha_m: Option<f64>,
    pub alpha_m_stderr: Option<f64>,
    pub coefficient: Option<f64>,
    pub r_squared: Option<f64>,
    pub m_lo: Option<f64>,
    pub m_hi: Option<f64>,
}

pub const MIN_SCALING_POINTS: usize = 3;

/// Fits `final_test_loss ∝ m^-alpha_m` separately for each combination of
/// frequency profile, density and gamma. Families with a failed run are
/// reported but not fitted.
pub fn scaling_report(rows: &[SweepRow], range: Option<FitRange>) -> Result<Vec<ScalingRow>> {
    type Key = (String, usize, Option<u64>, Option<u64>, u64, u64);
    let mut groups: BTreeMap<Key, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.freq_kind.clone(),
            r.n,
            r.alpha.map(f64::to_bits),
            r.scale.map(f64::to_bits),
            r.density.to_bits(),
            r.gamma.to_bits(),
        );
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::new();
    for runs in groups.values() {
        let first = runs[0];
        let failed = runs.iter().filter(|r| !r.is_ok() || r.final_test_loss.is_none()).count();
        let mut row = ScalingRow {
            freq_kind: first.freq_kind.clone(),
            n: first.n,
            alpha: first.alpha,
            scale: first.scale,
            density: first.density,
            gamma: first.gamma,
            status: String::new(),
            n_runs: runs.len(),
            failed_runs: failed,
            alpha_m: None,
            alpha_m_stderr: None,
            coefficient: None,
            r_squared: None,
            m_lo: None,
            m_hi: None,
        };
        let mut ms: Vec<usize> = runs.iter().map(|r| r.m).collect();
        ms.sort_unstable();
        ms.dedup();
        if failed > 0 {
            row.status = "skipped_failures".into();
        } else if ms.len() < MIN_SCALING_POINTS {
            row.status = "too_few_points".into();
        } else {
            let pts: Vec<(f64, f64)> = runs
                .iter()
                .map(|r| (r.m as f64, r.final_test_loss.unwrap()))
                .collect();
            let fit = fit_powerlaw(&pts, range)?;
            row.status = "ok".into();
            row.alpha_m = Some(fit.exponent);
            row.alpha_m_stderr = fit.exponent_stderr;
            row.coefficient = Some(fit.coefficient);
            row.r_squared = Some(fit.r_squared);
            row.m_lo = Some(fit.range_used.0);
            row.m_hi = Some(fit.range_used.1);
        }
        out.push(row);
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Squared-overlap moments of random unit vectors, measured and predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub m: usize,
    pub vectors: usize,
    pub seed: u64,
    pub measured: OverlapStats,
    pub predicted_mean_sq: f64,
    pub predicted_var_sq: f64,
    pub mean_rel_error: f64,
    pub var_rel_error: f64,
}

pub fn random_sphere_report(m: usize, vectors: usize, seed: u64) -> Result<BaselineReport> {
    let (mean, var) = geometry::random_sphere_baseline(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::from_shape_simple_fn((vectors, m), || f64::normal(&mut rng, 1.0));
    for mut row in w.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    let measured = geometry::overlap_stats(w.view(), None, geometry::DEFAULT_OVERLAP_BATCH)?;
    Ok(BaselineReport {
        m,
        vectors,
        seed,
        predicted_mean_sq: mean,
        predicted_var_sq: var,
        mean_rel_error: (measured.mean_sq - mean).abs() / mean,
        var_rel_error: (measured.var_sq - var).abs() / var,
        measured,
    })
}
