//! Feature-frequency distributions and the sparse synthetic data model.
//!
//! A sample is `x_i = u_i * v_i` with `u_i ~ Bernoulli(p_i)` and
//! `v_i ~ Uniform(0, 2)`, all independent.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Shape of the unnormalized frequency profile over ranks `i = 1..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrequencyKind {
    /// `p_i ∝ i^-alpha`
    Power { alpha: f64 },
    /// `p_i ∝ exp(-i / scale)`
    Exponential { scale: f64 },
    /// `p_i ∝ n + 1 - i`
    Linear,
}

/// Serializable description of a frequency profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyParams {
    pub n: usize,
    #[serde(flatten)]
    pub kind: FrequencyKind,
    /// Expected number of active features per sample, `E = sum(p)`.
    pub density: f64,
}

impl FrequencyParams {
    pub fn build(&self) -> Result<FrequencySpec> {
        make_frequencies(self.kind, self.n, self.density)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySpec {
    pub n: usize,
    pub kind: FrequencyKind,
    pub density: f64,
    /// Non-increasing activation probabilities, summing to `density`.
    pub p: Vec<f64>,
}

impl FrequencySpec {
    pub fn params(&self) -> FrequencyParams {
        FrequencyParams {
            n: self.n,
            kind: self.kind,
            density: self.density,
        }
    }

    /// Build a spec from explicit probabilities. They must lie in `[0, 1]`
    /// and be non-increasing; `density` is taken as their sum.
    pub fn from_probabilities(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if let Some((i, &v)) = p
            .iter()
            .enumerate()
            .find(|(_, &v)| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::OutOfRange {
                what: "p_i",
                value: v,
                range: format!("[0, 1] at index {i}"),
            });
        }
        if p.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("probabilities must be non-increasing"));
        }
        let density = p.iter().sum();
        Ok(Self {
            n: p.len(),
            kind: FrequencyKind::Linear,
            density,
            p,
        })
    }
}

pub fn make_frequencies(kind: FrequencyKind, n: usize, density: f64) -> Result<FrequencySpec> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if !(density > 0.0 && density.is_finite()) {
        return Err(Error::OutOfRange {
            what: "density",
            value: density,
            range: "(0, inf)".into(),
        });
    }
    let weights: Vec<f64> = match kind {
        FrequencyKind::Power { alpha } => {
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return Err(Error::OutOfRange {
                    what: "alpha",
                    value: alpha,
                    range: "[0, inf)".into(),
                });
            }
            (1..=n).map(|i| (i as f64).powf(-alpha)).collect()
        }
        FrequencyKind::Exponential { scale } => {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::OutOfRange {
                    what: "scale",
                    value: scale,
                    range: "(0, inf)".into(),
                });
            }
            // Shifted by the first rank so large n/scale ratios do not underflow p_1.
            (1..=n).map(|i| (-((i - 1) as f64) / scale).exp()).collect()
        }
        FrequencyKind::Linear => (1..=n).map(|i| (n + 1 - i) as f64).collect(),
    };
    let total: f64 = weights.iter().sum();
    let p: Vec<f64> = weights.iter().map(|w| w / total * density).collect();
    if p[0] > 1.0 {
        return Err(Error::InfeasibleDensity {
            density,
            p_max: p[0],
        });
    }
    if let Some(&last) = p.last() {
        if last <= 0.0 {
            return Err(Error::invalid(format!(
                "frequency profile underflows to zero at rank {n}"
            )));
        }
    }
    Ok(FrequencySpec {
        n,
        kind,
        density,
        p,
    })
}

/// A `B x n` batch of samples.
///
/// `entries` lists the nonzero `(row, feature, value)` triples of `data`,
/// which the model uses to exploit sparsity.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    pub data: Array2<F>,
    pub entries: Vec<(usize, usize, F)>,
}

impl<F: Real> Batch<F> {
    pub fn from_dense(data: Array2<F>) -> Self {
        let entries = data
            .indexed_iter()
            .filter(|(_, &v)| v != F::zero())
            .map(|((s, i), &v)| (s, i, v))
            .collect();
        Self { data, entries }
    }

    pub fn zeros(batch_size: usize, n: usize) -> Self {
        Self {
            data: Array2::zeros((batch_size, n)),
            entries: Vec::new(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.data.ncols()
    }

    pub fn cast<G: Real>(&self) -> Batch<G> {
        Batch {
            data: self.data.mapv(|v| G::from_f64(v.to_f64())),
            entries: self
                .entries
                .iter()
                .map(|&(s, i, v)| (s, i, G::from_f64(v.to_f64())))
                .collect(),
        }
    }
}

/// Draws a fresh batch from `spec`.
pub fn sample_batch<F: Real, R: Rng + ?Sized>(
    spec: &FrequencySpec,
    batch_size: usize,
    rng: &mut R,
) -> Batch<F> {
    let mut batch = Batch::zeros(batch_size, spec.n);
    sample_batch_into(spec, &mut batch, rng);
    batch
}

/// Refills `batch` in place, reusing its allocation.
///
/// Each feature column is filled by geometric skipping between active rows,
/// which draws the same distribution as one Bernoulli trial per entry at a
/// cost proportional to the number of active entries.
pub fn sample_batch_into<F: Real, R: Rng + ?Sized>(
    spec: &FrequencySpec,
    batch: &mut Batch<F>,
    rng: &mut R,
) {
    assert_eq!(batch.n_features(), spec.n, "batch width must equal n");
    for &(s, i, _) in &batch.entries {
        batch.data[[s, i]] = F::zero();
    }
    batch.entries.clear();
    let rows = batch.batch_size();
    let two = F::from_f64(2.0);
    for (i, &p) in spec.p.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        if p >= 1.0 {
            for s in 0..rows {
                let v = two * F::open_unit(rng);
                batch.data[[s, i]] = v;
                batch.entries.push((s, i, v));
            }
            continue;
        }
        let log_q = (-p).ln_1p();
        let mut s = 0usize;
        loop {
            let u: f64 = f64::open_unit(rng);
            let skip = (u.ln() / log_q).floor();
            if skip >= (rows - s) as f64 {
                break;
            }
            s += skip as usize;
            let v = two * F::open_unit(rng);
            batch.data[[s, i]] = v;
            batch.entries.push((s, i, v));
            s += 1;
            if s >= rows {
                break;
            }
        }
    }
}

/// Draws from the single-active-feature data model: index `i` with
/// probability `p_i / E`, value uniform on (0, 2).
#[derive(Debug, Clone)]
pub struct SingleFeatureSampler {
    index: WeightedIndex<f64>,
}

impl SingleFeatureSampler {
    pub fn new(spec: &FrequencySpec) -> Result<Self> {
        let index = WeightedIndex::new(&spec.p)
            .map_err(|e| Error::invalid(format!("frequency weights: {e}")))?;
        Ok(Self { index })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let i = self.index.sample(rng);
        (i, 2.0 * f64::open_unit(rng))
    }
}

/// One-off convenience wrapper around [`SingleFeatureSampler`].
pub fn sample_single_feature<R: Rng + ?Sized>(
    spec: &FrequencySpec,
    rng: &mut R,
) -> Result<(usize, f64)> {
    Ok(SingleFeatureSampler::new(spec)?.sample(rng))
}
