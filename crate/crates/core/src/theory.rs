//! Loss predictions that do not need training: the ignored-feature loss of
//! the weak regime, its integral approximation, the single-active-feature
//! loss of a given model, the model-size part of a cross-entropy head, and
//! the regime exponent table.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NORMALIZE_EPS;
use crate::model::ToyModel;
use crate::real::Real;
use crate::sampler::{FrequencySpec, SingleFeatureSampler};

/// Second moment of `v ~ U(0, 2)`.
pub const V_SECOND_MOMENT: f64 = 4.0 / 3.0;
/// First moment of `v ~ U(0, 2)`.
pub const V_MEAN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakLoss {
    /// `sum_{i>k} (<v²> p_i - <v>² p_i²)`
    pub exact: f64,
    /// `<v²> sum_{i>k} p_i`
    pub approx: f64,
}

/// Loss of a model that represents the `k` most frequent features perfectly
/// and outputs the mean `<x_i>` for the rest.
pub fn weak_loss_exact(spec: &FrequencySpec, k: usize) -> Result<WeakLoss> {
    if k > spec.n {
        return Err(Error::OutOfRange {
            what: "k",
            value: k as f64,
            range: format!("[0, {}]", spec.n),
        });
    }
    let tail = &spec.p[k..];
    let exact = tail
        .iter()
        .map(|&p| V_SECOND_MOMENT * p - V_MEAN * V_MEAN * p * p)
        .sum();
    let approx = V_SECOND_MOMENT * tail.iter().sum::<f64>();
    Ok(WeakLoss { exact, approx })
}

/// Integral approximation of the ignored-feature loss for `p_i ∝ i^-alpha`,
/// as a fraction of the total: `∫_{φn}^n i^-α di / ∫_1^n i^-α di`.
pub fn weak_loss_closed_form(alpha: f64, n: usize, phi: f64) -> Result<f64> {
    if !(phi > 0.0 && phi <= 1.0) {
        return Err(Error::OutOfRange {
            what: "phi",
            value: phi,
            range: "(0, 1]".into(),
        });
    }
    if n < 2 {
        return Err(Error::OutOfRange {
            what: "n",
            value: n as f64,
            range: "[2, inf)".into(),
        });
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::OutOfRange {
            what: "alpha",
            value: alpha,
            range: "[0, inf)".into(),
        });
    }
    let ln_n = (n as f64).ln();
    if alpha == 1.0 {
        return Ok(-phi.ln() / ln_n);
    }
    // (φ^{1-α} - 1) n^{1-α} / (1 - n^{1-α}), written with expm1 so the limit
    // α → 1 is approached without cancellation
    let e = 1.0 - alpha;
    let num = (e * phi.ln()).exp_m1();
    let den = -(e * ln_n).exp_m1();
    Ok(num / den * (e * ln_n).exp())
}

/// `sum_{i >= c m²} p_i`: the loss carried by features beyond the
/// strongly represented ones when `c m²` of them fit ETF-like.
pub fn strong_tail_sum(spec: &FrequencySpec, m: usize, prefactor: f64) -> f64 {
    let start = ((prefactor * (m * m) as f64).round() as usize).max(1);
    spec.p.iter().skip(start - 1).sum()
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let n = nodes.max(1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for k in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p1 = z;
                p0 = 1.0;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        if n == 1 {
            z = 0.0;
            dp = 1.0;
        }
        let wk = 2.0 / ((1.0 - z * z) * dp * dp);
        x[k] = -z;
        x[n - 1 - k] = z;
        w[k] = wk;
        w[n - 1 - k] = wk;
    }
    if n == 1 {
        w[0] = 2.0;
    }
    (x, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongLossMethod {
    /// Gauss–Legendre with `nodes` points on each piece between ReLU kinks.
    Quadrature { nodes: usize },
    /// Monte Carlo over `(feature, value)` draws.
    MonteCarlo { samples: usize, seed: u64 },
}

struct Interval {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Interval {
    fn new(n: usize) -> Self {
        let (nodes, weights) = gauss_legendre(n);
        Self { nodes, weights }
    }

    /// `∫_a^b f`.
    fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let (half, mid) = ((b - a) / 2.0, (a + b) / 2.0);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    /// `∫_0^2 f`, split where `c v + b` changes sign.
    fn integrate_split(&self, c: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let kink = if c != 0.0 { -b / c } else { f64::NAN };
        if kink > 0.0 && kink < 2.0 {
            self.integrate(0.0, kink, &f) + self.integrate(kink, 2.0, &f)
        } else {
            self.integrate(0.0, 2.0, f)
        }
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Loss of the single-active-feature data model:
/// `sum_i p_i < sum_{j≠i} ReLU²(W_j·W_i v + b_j) + (ReLU(W_i·W_i v + b_i) - v)² >_v`
/// with `v ~ U(0, 2)`.
pub fn strong_loss_single_feature<F: Real>(
    model: &ToyModel<F>,
    spec: &FrequencySpec,
    method: StrongLossMethod,
) -> Result<f64> {
    if model.n() != spec.n {
        return Err(Error::dims(format!("{} features", spec.n), model.n()));
    }
    let w = model.w.mapv(|v| v.to_f64());
    let b = model.b.mapv(|v| v.to_f64());
    match method {
        StrongLossMethod::Quadrature { nodes } => {
            let rule = Interval::new(nodes.max(2));
            let mut total = 0.0;
            for (i, &p) in spec.p.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let c = w.dot(&w.row(i));
                let mut bracket = 0.0;
                for (j, (&cj, &bj)) in c.iter().zip(b.iter()).enumerate() {
                    bracket += if j == i {
                        rule.integrate_split(cj, bj, |v| (relu(cj * v + bj) - v).powi(2))
                    } else {
                        rule.integrate_split(cj, bj, |v| relu(cj * v + bj).powi(2))
                    };
                }
                total += p * bracket / 2.0;
            }
            Ok(total)
        }
        StrongLossMethod::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::invalid("samples must be at least 1"));
            }
            let sampler = SingleFeatureSampler::new(spec)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sum = 0.0;
            for _ in 0..samples {
                let (i, v) = sampler.sample(&mut rng);
                let c = w.dot(&w.row(i));
                let mut bracket = 0.0;
                for (j, (&cj, &bj)) in c.iter().zip(b.iter()).enumerate() {
                    let y = relu(cj * v + bj);
                    bracket += if j == i { (y - v).powi(2) } else { y * y };
                }
                sum += bracket;
            }
            Ok(spec.density * sum / samples as f64)
        }
    }
}

/// Model-size part of the cross-entropy loss of an output head whose rows
/// are the token representations, averaged over target rows:
/// `mean_i ½ sum_{j≠i} (W_i·W_j / |W_i|)² exp(-|W_i|)`.
pub fn ce_modelsize_loss(w: ArrayView2<f64>) -> Result<f64> {
    let n = w.nrows();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, got: n });
    }
    let norms: Array1<f64> = w.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let block = 1024.min(n);
    let mut gram = Array2::<f64>::zeros((block, n));
    let mut total = 0.0;
    for a0 in (0..n).step_by(block) {
        let a1 = (a0 + block).min(n);
        let mut g = gram.slice_mut(s![..a1 - a0, ..]);
        ndarray::linalg::general_mat_mul(1.0, &w.slice(s![a0..a1, ..]), &w.t(), 0.0, &mut g);
        for (k, row) in g.rows().into_iter().enumerate() {
            let i = a0 + k;
            let r = norms[i];
            let denom = (r + NORMALIZE_EPS).powi(2);
            let off: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &d)| d * d)
                .sum();
            total += 0.5 * off / denom * (-r).exp();
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Weak,
    StrongEven,
    StrongSkewed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimePrediction {
    pub regime: Regime,
    /// `None` when the regime predicts no power law (weak with `alpha <= 1`).
    pub predicted_alpha_m: Option<f64>,
}

/// Model exponent predicted for a regime and data exponent `alpha`:
/// `alpha - 1` (weak, `alpha > 1`), `1` (strong, even frequencies),
/// `2 (alpha - 1)` (strong, skewed frequencies).
pub fn predict_exponent(regime: Regime, alpha: f64) -> RegimePrediction {
    let predicted_alpha_m = match regime {
        Regime::Weak => (alpha > 1.0).then(|| alpha - 1.0),
        Regime::StrongEven => Some(1.0),
        Regime::StrongSkewed => Some(2.0 * (alpha - 1.0)),
    };
    RegimePrediction {
        regime,
        predicted_alpha_m,
    }
}
