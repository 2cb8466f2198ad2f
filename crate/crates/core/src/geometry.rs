//! Geometry of the learned representation rows: norm fractions, pairwise
//! overlap statistics, the Welch bound, random-sphere baselines and the
//! spectral distance to the padded identity.
//!
//! Pairwise statistics are accumulated block by block without forming the
//! full Gram matrix, so they scale to vocabulary-sized matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Norm threshold for a feature to count as represented.
pub const REPRESENTED_THRESHOLD: f64 = 0.5;
/// Norm threshold for a feature to count as strongly represented.
pub const STRONG_THRESHOLD: f64 = 1.0;
/// Added to row norms before normalizing.
pub const NORMALIZE_EPS: f64 = 1e-9;
pub const DEFAULT_OVERLAP_BATCH: usize = 8192;

pub fn row_norms(w: ArrayView2<f64>) -> Array1<f64> {
    w.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

/// Fraction of rows whose norm is strictly greater than `threshold`.
pub fn phi_fraction(w: ArrayView2<f64>, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::OutOfRange {
            what: "threshold",
            value: threshold,
            range: "(0, inf)".into(),
        });
    }
    if w.nrows() == 0 {
        return Ok(0.0);
    }
    let above = row_norms(w).iter().filter(|&&r| r > threshold).count();
    Ok(above as f64 / w.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormHistogram {
    /// `bins + 1` increasing bin edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl NormHistogram {
    pub fn new(norms: &[f64], bins: usize, upper: f64) -> Self {
        let bins = bins.max(1);
        let width = upper / bins as f64;
        let edges = (0..=bins).map(|k| k as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &r in norms {
            let k = ((r / width).floor() as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiReport {
    pub phi_half: f64,
    pub phi_one: f64,
    pub norm_min: f64,
    pub norm_mean: f64,
    pub norm_max: f64,
    pub norm_histogram: NormHistogram,
}

pub fn phi_report(w: ArrayView2<f64>) -> Result<PhiReport> {
    let norms = row_norms(w);
    let norms = norms.as_slice().unwrap();
    let n = norms.len().max(1) as f64;
    let max = norms.iter().copied().fold(0.0, f64::max);
    let upper = (max * 1.0001).max(2.0);
    Ok(PhiReport {
        phi_half: phi_fraction(w, REPRESENTED_THRESHOLD)?,
        phi_one: phi_fraction(w, STRONG_THRESHOLD)?,
        norm_min: norms.iter().copied().fold(f64::INFINITY, f64::min),
        norm_mean: norms.iter().sum::<f64>() / n,
        norm_max: max,
        norm_histogram: NormHistogram::new(norms, 40, upper),
    })
}

/// Statistics of `|cos|` and `cos²` over all unordered pairs of rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub count_pairs: u64,
    pub mean_abs: f64,
    /// Population variance of the absolute overlaps.
    pub var_abs: f64,
    /// Mean squared overlap, equal to `mean_abs² + var_abs`.
    pub mean_sq: f64,
    /// Population variance of the squared overlaps.
    pub var_sq: f64,
    pub max_abs: f64,
}

/// Streaming count / mean / sum of squared deviations, merged pairwise.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn merge(&mut self, o: Moments) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = o;
            return;
        }
        let (na, nb) = (self.count as f64, o.count as f64);
        let n = na + nb;
        let d = o.mean - self.mean;
        self.mean += d * nb / n;
        self.m2 += o.m2 + d * d * na * nb / n;
        self.count += o.count;
    }

    fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }
}

fn normalized_rows(w: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), w.ncols()));
    for (k, &i) in rows.iter().enumerate() {
        let r = w.row(i);
        let norm = r.dot(&r).sqrt() + NORMALIZE_EPS;
        out.row_mut(k).assign(&(&r / norm));
    }
    out
}

/// Pairwise overlap statistics of the ε-normalized rows of `w`.
///
/// `subset` restricts the computation to the listed rows. Rows are processed
/// in blocks of `batch` so at most `batch x batch` overlaps are held at once;
/// the result does not depend on `batch` beyond floating-point rounding.
pub fn overlap_stats(w: ArrayView2<f64>, subset: Option<&[usize]>, batch: usize) -> Result<OverlapStats> {
    let all: Vec<usize>;
    let rows = match subset {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&i| i >= w.nrows()) {
                return Err(Error::invalid(format!("row index {bad} out of bounds")));
            }
            s
        }
        None => {
            all = (0..w.nrows()).collect();
            &all
        }
    };
    if rows.len() < 2 {
        return Err(Error::TooFewRows {
            needed: 2,
            got: rows.len(),
        });
    }
    let batch = batch.max(1);
    let u = normalized_rows(w, rows);
    let k = u.nrows();
    let mut abs_m = Moments::default();
    let mut sq_m = Moments::default();
    let mut max_abs = 0.0f64;
    let mut gram = Array2::<f64>::zeros((batch.min(k), batch.min(k)));
    for a0 in (0..k).step_by(batch) {
        let a1 = (a0 + batch).min(k);
        for b0 in (a0..k).step_by(batch) {
            let b1 = (b0 + batch).min(k);
            let mut g = gram.slice_mut(s![..a1 - a0, ..b1 - b0]);
            general_mat_mul(1.0, &u.slice(s![a0..a1, ..]), &u.slice(s![b0..b1, ..]).t(), 0.0, &mut g);
            // within a diagonal block only pairs above the diagonal count
            let pairs = || {
                g.rows().into_iter().enumerate().flat_map(move |(ia, row)| {
                    let start = if a0 == b0 { ia + 1 } else { 0 };
                    row.into_iter().skip(start).copied()
                })
            };
            let (mut count, mut sum_abs, mut sum_sq) = (0u64, 0.0f64, 0.0f64);
            for c in pairs() {
                count += 1;
                sum_abs += c.abs();
                sum_sq += c * c;
                max_abs = max_abs.max(c.abs());
            }
            if count == 0 {
                continue;
            }
            let mean_abs = sum_abs / count as f64;
            let mean_sq = sum_sq / count as f64;
            let (mut m2_abs, mut m2_sq) = (0.0f64, 0.0f64);
            for c in pairs() {
                m2_abs += (c.abs() - mean_abs).powi(2);
                m2_sq += (c * c - mean_sq).powi(2);
            }
            abs_m.merge(Moments { count, mean: mean_abs, m2: m2_abs });
            sq_m.merge(Moments { count, mean: mean_sq, m2: m2_sq });
        }
    }
    Ok(OverlapStats {
        count_pairs: abs_m.count,
        mean_abs: abs_m.mean,
        var_abs: abs_m.variance(),
        mean_sq: sq_m.mean,
        var_sq: sq_m.variance(),
        max_abs,
    })
}

/// Welch lower bound `sqrt((nu - m) / (m (nu - 1)))` on the largest absolute
/// overlap among `nu` unit vectors in `R^m`.
pub fn welch_bound(nu: usize, m: usize) -> Result<f64> {
    if m == 0 || nu < 2 || nu < m {
        return Err(Error::OutOfRange {
            what: "nu",
            value: nu as f64,
            range: format!("nu >= max(m, 2) with m = {m} >= 1"),
        });
    }
    let (nu, m) = (nu as f64, m as f64);
    Ok(((nu - m) / (m * (nu - 1.0))).sqrt())
}

/// Mean and variance of the squared overlap of two independent uniform unit
/// vectors in `R^m`, which is `Beta(1/2, (m-1)/2)` distributed.
pub fn random_sphere_baseline(m: usize) -> Result<(f64, f64)> {
    if m < 2 {
        return Err(Error::OutOfRange {
            what: "m",
            value: m as f64,
            range: "[2, inf)".into(),
        });
    }
    let m = m as f64;
    Ok((1.0 / m, 2.0 * (m - 1.0) / (m * m * (m + 2.0))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterationOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for PowerIterationOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            max_iter: 20_000,
        }
    }
}

/// Spectral norm of `W Wᵀ - P`, where `P` is `n x n` with an `m x m`
/// identity in its top-left corner.
///
/// Power iteration on the square of the symmetric matrix, applied through
/// `W` so the `n x n` matrix is never formed.
pub fn ambiguity(w: ArrayView2<f64>, m: usize, opts: PowerIterationOptions) -> Result<f64> {
    let n = w.nrows();
    if w.ncols() != m {
        return Err(Error::dims(format!("{m} columns"), w.ncols()));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let k = m.min(n);
    let apply = |v: &Array1<f64>| -> Array1<f64> {
        let mut out = w.dot(&w.t().dot(v));
        for i in 0..k {
            out[i] -= v[i];
        }
        out
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0a3b);
    let mut v = Array1::from_shape_simple_fn(n, || f64::normal(&mut rng, 1.0));
    v /= v.dot(&v).sqrt();
    let mut est = 0.0f64;
    let mut change = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let av = apply(&v);
        let next_est = av.dot(&av).sqrt();
        if next_est == 0.0 {
            return Ok(0.0);
        }
        let a2v = apply(&av);
        let norm = a2v.dot(&a2v).sqrt();
        if norm == 0.0 {
            return Ok(next_est);
        }
        v = a2v / norm;
        change = (next_est - est).abs() / next_est;
        est = next_est;
        if change < opts.rel_tol {
            return Ok(est);
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: opts.max_iter,
        last_change: change,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtfReport {
    pub threshold: f64,
    pub n_strong: usize,
    pub mean_sq: f64,
    pub var_sq: f64,
    pub var_ratio_vs_random: f64,
    pub welch_kappa_sq: f64,
    pub stats: OverlapStats,
}

/// Overlap statistics of the rows with norm above `threshold`, compared
/// with random unit vectors and with the Welch bound for that many rows.
pub fn etf_likeness(w: ArrayView2<f64>, threshold: f64) -> Result<EtfReport> {
    let m = w.ncols();
    let norms = row_norms(w);
    let strong: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > threshold)
        .map(|(i, _)| i)
        .collect();
    let stats = overlap_stats(w, Some(&strong), DEFAULT_OVERLAP_BATCH)?;
    let (_, random_var) = random_sphere_baseline(m)?;
    // fewer rows than dimensions can be mutually orthogonal
    let kappa = if strong.len() <= m { 0.0 } else { welch_bound(strong.len(), m)? };
    Ok(EtfReport {
        threshold,
        n_strong: strong.len(),
        mean_sq: stats.mean_sq,
        var_sq: stats.var_sq,
        var_ratio_vs_random: stats.var_sq / random_var,
        welch_kappa_sq: kappa * kappa,
        stats,
    })
}

/// Converts a model weight matrix to `f64` for the geometry routines.
pub fn to_f64<F: Real>(w: ArrayView2<F>) -> Array2<f64> {
    w.mapv(|v| v.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn padded_identity(n: usize, m: usize) -> Array2<f64> {
        let mut w = Array2::zeros((n, m));
        for i in 0..m {
            w[[i, i]] = 1.0;
        }
        w
    }

    #[test]
    fn phi_counts() {
        let w = array![[1.0, 0.0], [0.0, 0.9], [0.01, 0.0], [0.0, 0.0]];
        assert_eq!(phi_fraction(w.view(), 0.5).unwrap(), 0.5);
        let w = padded_identity(20, 5);
        assert_eq!(phi_fraction(w.view(), 0.5).unwrap(), 0.25);
        // strict inequality at the threshold
        assert_eq!(phi_fraction(w.view(), 1.0).unwrap(), 0.0);
        assert!(phi_fraction(w.view(), 0.0).is_err());
    }

    #[test]
    fn phi_report_fields() {
        let w = array![[2.0, 0.0], [0.0, 0.9], [0.3, 0.0]];
        let r = phi_report(w.view()).unwrap();
        assert!((r.phi_half - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.phi_one - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.norm_histogram.counts.iter().sum::<usize>(), 3);
        assert_eq!(r.norm_max, 2.0);
    }

    #[test]
    fn orthonormal_rows_have_no_overlap() {
        let w = padded_identity(4, 4);
        let st = overlap_stats(w.view(), None, 3).unwrap();
        assert_eq!(st.count_pairs, 6);
        assert!(st.mean_abs.abs() < 1e-12 && st.mean_sq.abs() < 1e-12);
    }

    #[test]
    fn single_pair_at_sixty_degrees() {
        let h = 3f64.sqrt() / 2.0;
        let w = array![[2.0, 0.0], [0.5, h]];
        let st = overlap_stats(w.view(), None, 8192).unwrap();
        assert_eq!(st.count_pairs, 1);
        assert!((st.mean_abs - 0.5).abs() < 1e-8);
        assert!((st.mean_sq - 0.25).abs() < 1e-8);
        assert_eq!(st.var_abs, 0.0);
        assert_eq!(st.var_sq, 0.0);
    }

    #[test]
    fn too_few_rows() {
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            overlap_stats(w.view(), Some(&[1]), 10),
            Err(Error::TooFewRows { got: 1, .. })
        ));
    }

    #[test]
    fn welch_values() {
        assert_eq!(welch_bound(5, 5).unwrap(), 0.0);
        assert!((welch_bound(6, 3).unwrap() - (3.0f64 / 15.0).sqrt()).abs() < 1e-15);
        let k = welch_bound(1000, 100).unwrap();
        assert!((k / 0.1 - 1.0).abs() < 0.06);
        assert!(welch_bound(3, 4).is_err());
        assert!(welch_bound(1, 1).is_err());
    }

    #[test]
    fn sphere_baseline_closed_form() {
        assert_eq!(random_sphere_baseline(2).unwrap(), (0.5, 0.125));
        let (mean, var) = random_sphere_baseline(100_000).unwrap();
        assert!((mean * 1e5 - 1.0).abs() < 1e-12);
        assert!((var * 1e10 - 2.0).abs() < 1e-4);
        assert!(random_sphere_baseline(1).is_err());
    }

    #[test]
    fn ambiguity_trivial_cases() {
        let opts = PowerIterationOptions::default();
        assert_eq!(ambiguity(padded_identity(10, 3).view(), 3, opts).unwrap(), 0.0);
        let z = Array2::zeros((10, 3));
        assert!((ambiguity(z.view(), 3, opts).unwrap() - 1.0).abs() < 1e-9);
        assert!(ambiguity(z.view(), 4, opts).is_err());
    }

    #[test]
    fn etf_report_on_orthonormal_rows() {
        let mut w = padded_identity(6, 3);
        w.slice_mut(s![..3, ..]).mapv_inplace(|v| v * 1.5);
        let r = etf_likeness(w.view(), 1.0).unwrap();
        assert_eq!(r.n_strong, 3);
        assert!(r.mean_sq.abs() < 1e-12);
        assert_eq!(r.welch_kappa_sq, 0.0);
    }
}
