//! Regression: log-log power laws, the multi-group joint scaling fit,
//! token-frequency (Zipf) fits and the shared-slope size/dimension fit.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordinary least squares `y = intercept + slope x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// `None` with fewer than 3 points.
    pub slope_stderr: Option<f64>,
    pub r_squared: f64,
    /// Set when `y` has no variance; `r_squared` is then reported as 0.
    pub constant_response: bool,
    pub n_points: usize,
}

pub fn fit_linear(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::dims(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 points, got {n}")));
    }
    let nf = n as f64;
    let xm = xs.iter().sum::<f64>() / nf;
    let ym = ys.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - xm, y - ym);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx <= 0.0 || !sxx.is_finite() {
        return Err(Error::DegenerateAbscissa);
    }
    let constant_response = ys.iter().all(|&y| y == ys[0]);
    let (slope, intercept) = if constant_response {
        (0.0, ys[0])
    } else {
        (sxy / sxx, ym - sxy / sxx * xm)
    };
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if constant_response {
        0.0
    } else {
        (1.0 - ss_res / syy).min(1.0)
    };
    let slope_stderr = (n >= 3).then(|| (ss_res / (nf - 2.0) / sxx).sqrt());
    Ok(LinearFit {
        slope,
        intercept,
        slope_stderr,
        r_squared,
        constant_response,
        n_points: n,
    })
}

/// Which points enter a power-law fit. Bounds are inclusive and apply to
/// the abscissa after sorting by it; `skip_first` then drops the smallest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FitRange {
    #[serde(default)]
    pub lo: Option<f64>,
    #[serde(default)]
    pub hi: Option<f64>,
    #[serde(default)]
    pub skip_first: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Negated log-log slope: positive for a decaying law.
    pub exponent: f64,
    pub exponent_stderr: Option<f64>,
    pub coefficient: f64,
    pub r_squared: f64,
    pub n_points: usize,
    pub range_used: (f64, f64),
    pub constant_response: bool,
}

impl FitResult {
    pub fn predict(&self, x: f64) -> f64 {
        self.coefficient * x.powf(-self.exponent)
    }
}

/// Fits `y = coefficient * x^-exponent` by OLS in log-log space.
pub fn fit_powerlaw(points: &[(f64, f64)], range: Option<FitRange>) -> Result<FitResult> {
    for (index, &(x, y)) in points.iter().enumerate() {
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::NonPositiveData { index, value: x });
        }
        if !(y > 0.0 && y.is_finite()) {
            return Err(Error::NonPositiveData { index, value: y });
        }
    }
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(r) = range {
        pts.retain(|&(x, _)| r.lo.is_none_or(|lo| x >= lo) && r.hi.is_none_or(|hi| x <= hi));
        pts.drain(..r.skip_first.min(pts.len()));
    }
    if pts.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 points in range, got {}",
            pts.len()
        )));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let lin = fit_linear(&xs, &ys)?;
    Ok(FitResult {
        exponent: -lin.slope,
        exponent_stderr: lin.slope_stderr,
        coefficient: lin.intercept.exp(),
        r_squared: lin.r_squared,
        n_points: lin.n_points,
        range_used: (pts[0].0, pts[pts.len() - 1].0),
        constant_response: lin.constant_response,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPoint {
    pub m: f64,
    pub loss: f64,
    pub group: String,
}

/// Starting point for the joint fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointInit {
    pub c_m: f64,
    pub alpha_m: f64,
    pub offsets: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFitOptions {
    pub lr: f64,
    pub iterations: usize,
    pub starts: usize,
    pub seed: u64,
    /// Gradient norm below which the fit counts as converged.
    pub grad_tol: f64,
    /// Objective is recorded every this many iterations.
    pub trace_every: usize,
    #[serde(default)]
    pub init: Option<JointInit>,
}

impl Default for JointFitOptions {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            iterations: 20_000,
            starts: 8,
            seed: 0,
            grad_tol: 1e-6,
            trace_every: 100,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFitResult {
    pub c_m: f64,
    pub alpha_m: f64,
    pub offsets: BTreeMap<String, f64>,
    pub final_mse: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub non_convergence: bool,
    /// Index of the winning start.
    pub best_start: usize,
    /// `(iteration, mse)` of the winning start.
    pub trace: Vec<(usize, f64)>,
}

impl JointFitResult {
    pub fn predict(&self, m: f64, group: &str) -> Option<f64> {
        self.offsets
            .get(group)
            .map(|o| self.c_m * m.powf(-self.alpha_m) + o)
    }
}

/// Internal parameterization: `loss = exp(c) (m / m_ref)^-alpha + o_g`.
struct JointProblem {
    log_m: Vec<f64>,
    loss: Vec<f64>,
    group: Vec<usize>,
    n_groups: usize,
    log_m_ref: f64,
}

impl JointProblem {
    fn mse_grad(&self, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (c, alpha) = (theta[0], theta[1]);
        let n = self.loss.len() as f64;
        let mut f = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.fill(0.0);
        }
        for k in 0..self.loss.len() {
            let lx = self.log_m[k] - self.log_m_ref;
            let term = (c - alpha * lx).exp();
            let r = term + theta[2 + self.group[k]] - self.loss[k];
            f += r * r;
            if let Some(g) = g.as_deref_mut() {
                let d = 2.0 * r / n;
                g[0] += d * term;
                g[1] -= d * term * lx;
                g[2 + self.group[k]] += d;
            }
        }
        f / n
    }

    fn run(&self, start: Vec<f64>, opts: &JointFitOptions) -> (Vec<f64>, f64, f64, Vec<(usize, f64)>) {
        let dim = start.len();
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut theta = start;
        let mut m1 = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        let mut grad = vec![0.0; dim];
        let mut cand = vec![0.0; dim];
        let mut f = self.mse_grad(&theta, Some(&mut grad));
        let mut trace = vec![(0, f)];
        // step size shrinks on rejected steps so the objective never rises
        let mut damping = 1.0f64;
        for it in 1..=opts.iterations {
            let lr = opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * (it - 1) as f64 / opts.iterations as f64).cos());
            for k in 0..dim {
                m1[k] = b1 * m1[k] + (1.0 - b1) * grad[k];
                m2[k] = b2 * m2[k] + (1.0 - b2) * grad[k] * grad[k];
                let mh = m1[k] / (1.0 - b1.powi(it as i32));
                let vh = m2[k] / (1.0 - b2.powi(it as i32));
                cand[k] = theta[k] - damping * lr * mh / (vh.sqrt() + eps);
            }
            let fc = self.mse_grad(&cand, None);
            if fc <= f {
                std::mem::swap(&mut theta, &mut cand);
                f = self.mse_grad(&theta, Some(&mut grad));
                damping = (damping * 1.1).min(1.0);
            } else {
                damping *= 0.5;
            }
            if it % opts.trace_every.max(1) == 0 || it == opts.iterations {
                trace.push((it, f));
            }
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        (theta, f, gnorm, trace)
    }
}

/// Fits `loss = C_m / m^alpha_m + offset[group]` by minimizing the mean
/// squared error with Adam from several starts; the best start wins, ties
/// going to the lowest index.
pub fn fit_joint_scaling(points: &[JointPoint], opts: &JointFitOptions) -> Result<JointFitResult> {
    for (index, p) in points.iter().enumerate() {
        if !(p.m > 0.0 && p.m.is_finite()) {
            return Err(Error::NonPositiveData { index, value: p.m });
        }
        if !p.loss.is_finite() {
            return Err(Error::invalid(format!("loss at point {index} is not finite")));
        }
    }
    let mut names: Vec<String> = points.iter().map(|p| p.group.clone()).collect();
    names.sort();
    names.dedup();
    if names.len() < 2 && points.len() < 4 {
        return Err(Error::invalid("need at least 2 groups or at least 4 points"));
    }
    if points.len() < names.len() + 2 {
        return Err(Error::DegenerateDesign(format!(
            "{} points cannot determine {} parameters",
            points.len(),
            names.len() + 2
        )));
    }
    if opts.starts == 0 || opts.iterations == 0 {
        return Err(Error::invalid("starts and iterations must be at least 1"));
    }
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let log_m: Vec<f64> = points.iter().map(|p| p.m.ln()).collect();
    let log_m_ref = log_m.iter().sum::<f64>() / log_m.len() as f64;
    let problem = JointProblem {
        log_m,
        loss: points.iter().map(|p| p.loss).collect(),
        group: points.iter().map(|p| index[p.group.as_str()]).collect(),
        n_groups: names.len(),
        log_m_ref,
    };

    let group_min: Vec<f64> = (0..problem.n_groups)
        .map(|g| {
            problem
                .group
                .iter()
                .zip(&problem.loss)
                .filter(|(&k, _)| k == g)
                .map(|(_, &l)| l)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let spread = {
        let lo = problem.loss.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = problem.loss.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo).max(1e-3 * lo.abs().max(1e-12))
    };

    let starts: Vec<Vec<f64>> = (0..opts.starts)
        .map(|s| {
            if s == 0 {
                if let Some(init) = &opts.init {
                    let mut theta = vec![
                        init.c_m.max(1e-300).ln() - init.alpha_m * log_m_ref,
                        init.alpha_m,
                    ];
                    theta.extend(names.iter().zip(&group_min).map(|(n, &lo)| {
                        init.offsets.get(n).copied().unwrap_or(lo - 0.5 * spread)
                    }));
                    return theta;
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(s as u64);
            let alpha = rng.random_range(0.3..1.5);
            let frac: f64 = rng.random_range(0.2..0.8);
            let mut theta = vec![(frac * spread).ln(), alpha];
            theta.extend(group_min.iter().map(|&lo| lo - frac * spread));
            theta
        })
        .collect();

    let runs: Vec<_> = starts
        .into_par_iter()
        .map(|start| problem.run(start, opts))
        .collect();
    let (best_start, best) = runs
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.1.total_cmp(&b.1).then(i.cmp(j)))
        .expect("at least one start");
    let (theta, final_mse, grad_norm, trace) = best;
    Ok(JointFitResult {
        c_m: (theta[0] + theta[1] * log_m_ref).exp(),
        alpha_m: theta[1],
        offsets: names.into_iter().zip(theta[2..].iter().copied()).collect(),
        final_mse,
        iterations: opts.iterations,
        grad_norm,
        non_convergence: !(grad_norm <= opts.grad_tol),
        best_start,
        trace,
    })
}

/// Model sizes of four model families, used by [`llm_like_fixture`].
pub const FIXTURE_CLASSES: [(&str, &[f64]); 4] = [
    ("opt", &[768.0, 1024.0, 2048.0, 2560.0, 4096.0, 5120.0, 7168.0, 9216.0]),
    ("gpt2", &[768.0, 1024.0, 1280.0, 1600.0]),
    ("qwen", &[896.0, 1536.0, 2048.0, 3584.0, 5120.0]),
    ("pythia", &[512.0, 768.0, 1024.0, 2048.0, 2560.0, 4096.0, 5120.0]),
];
pub const FIXTURE_DATASETS: [&str; 4] = ["wikitext", "c4", "pile", "bookcorpus"];
/// Coefficient of the fixture's size term.
pub const FIXTURE_C_M: f64 = 400.0;

/// Synthetic LLM-style losses `C_m / m^alpha_m + offset` for every
/// (family, dataset) group with multiplicative Gaussian noise of relative
/// size `noise`. Returns the points and the planted offsets.
pub fn llm_like_fixture(alpha_m: f64, noise: f64, seed: u64) -> (Vec<JointPoint>, BTreeMap<String, f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut points = Vec::new();
    let mut offsets = BTreeMap::new();
    for (ci, (class, sizes)) in FIXTURE_CLASSES.iter().enumerate() {
        for (di, dataset) in FIXTURE_DATASETS.iter().enumerate() {
            let group = format!("{class}/{dataset}");
            let offset = 1.6 + 0.35 * di as f64 + 0.12 * ci as f64;
            offsets.insert(group.clone(), offset);
            for &m in *sizes {
                let clean = FIXTURE_C_M * m.powf(-alpha_m) + offset;
                let eps: f64 = normal.sample(&mut rng);
                points.push(JointPoint {
                    m,
                    loss: clean * (1.0 + eps),
                    group: group.clone(),
                });
            }
        }
    }
    (points, offsets)
}

pub const TOKEN_RANK_SAMPLES: usize = 1000;
pub const MIN_TOKENS: usize = 100;

/// Zipf exponent of a token-count table: counts are ranked, 1000 ranks are
/// spaced evenly in `log10(rank)` (rounded and deduplicated), and the
/// frequency is fitted against rank in log-log.
pub fn fit_token_frequency<'a, I>(counts: I) -> Result<FitResult>
where
    I: IntoIterator<Item = &'a u64>,
{
    let mut c: Vec<u64> = counts.into_iter().copied().filter(|&c| c > 0).collect();
    if c.len() < MIN_TOKENS {
        return Err(Error::TooFewTokens {
            needed: MIN_TOKENS,
            got: c.len(),
        });
    }
    c.sort_unstable_by(|a, b| b.cmp(a));
    let total = c.iter().map(|&x| x as f64).sum::<f64>();
    let top = (c.len() as f64).log10();
    let mut ranks: Vec<usize> = (0..TOKEN_RANK_SAMPLES)
        .map(|k| {
            let r = 10f64.powf(top * k as f64 / (TOKEN_RANK_SAMPLES - 1) as f64);
            (r.round() as usize).clamp(1, c.len())
        })
        .collect();
    ranks.dedup();
    let points: Vec<(f64, f64)> = ranks
        .iter()
        .map(|&r| (r as f64, c[r - 1] as f64 / total))
        .collect();
    fit_powerlaw(&points, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    /// Parameter count.
    pub n: f64,
    /// Model dimension.
    pub m: f64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeFit {
    pub shared_exponent: f64,
    pub stderr: Option<f64>,
    /// `c_class` in `N = c_class m^k`.
    pub per_class_coeff: BTreeMap<String, f64>,
    pub n_points: usize,
}

/// Fits `log N = k log m + c_class` with one slope shared across classes.
pub fn fit_size_dimension(points: &[SizePoint]) -> Result<SizeFit> {
    let mut classes: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (index, p) in points.iter().enumerate() {
        for v in [p.n, p.m] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositiveData { index, value: v });
            }
        }
        classes
            .entry(p.class.as_str())
            .or_default()
            .push((p.m.ln(), p.n.ln()));
    }
    if classes.is_empty() {
        return Err(Error::DegenerateDesign("no points".into()));
    }
    if let Some((name, pts)) = classes.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::DegenerateDesign(format!(
            "class {name} has {} point(s), need 2",
            pts.len()
        )));
    }
    let means: BTreeMap<&str, (f64, f64)> = classes
        .iter()
        .map(|(&k, v)| {
            let n = v.len() as f64;
            (k, (v.iter().map(|p| p.0).sum::<f64>() / n, v.iter().map(|p| p.1).sum::<f64>() / n))
        })
        .collect();
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (k, v) in &classes {
        let (xm, ym) = means[k];
        for &(x, y) in v {
            sxx += (x - xm) * (x - xm);
            sxy += (x - xm) * (y - ym);
        }
    }
    if sxx <= 0.0 {
        return Err(Error::DegenerateDesign("no variation in m within any class".into()));
    }
    let k = sxy / sxx;
    let mut ss_res = 0.0;
    for (c, v) in &classes {
        let (xm, ym) = means[c];
        for &(x, y) in v {
            ss_res += (y - ym - k * (x - xm)).powi(2);
        }
    }
    let dof = points.len() as f64 - classes.len() as f64 - 1.0;
    Ok(SizeFit {
        shared_exponent: k,
        stderr: (dof > 0.0).then(|| (ss_res / dof / sxx).sqrt()),
        per_class_coeff: means
            .iter()
            .map(|(&c, &(xm, ym))| (c.to_string(), (ym - k * xm).exp()))
            .collect(),
        n_points: points.len(),
    })
}

/// `a * b` with first-order error propagation for independent Gaussian
/// errors.
pub fn product_with_error(a: f64, a_err: f64, b: f64, b_err: f64) -> (f64, f64) {
    let value = a * b;
    let err = ((b * a_err).powi(2) + (a * b_err).powi(2)).sqrt();
    (value, err)
}
