//! Adam with the signed decoupled weight-decay / weight-growth rule and a
//! warm-up + cosine learning-rate schedule.
//!
//! After the Adam step, each row of `W` is updated as
//!
//! ```text
//! gamma >= 0:  W_i <- W_i - lr * gamma * W_i
//! gamma <  0:  W_i <- W_i - lr * gamma * W_i * (1 / |W_i| - 1)
//! ```
//!
//! The negative branch pulls every nonzero row toward unit norm. The bias
//! group never decays.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grads, ToyModel};
use crate::real::Real;

/// Rows with a smaller norm skip the growth term.
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak: f64,
}

impl Schedule {
    pub fn new(total_steps: u64, warmup_steps: u64, peak: f64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        Ok(Self {
            total_steps,
            warmup_steps,
            peak,
        })
    }

    pub fn with_peak(&self, peak: f64) -> Self {
        Self { peak, ..*self }
    }
}

/// Learning rate at step `t`: linear ramp from 0 to `peak` over the warm-up,
/// then half-cosine decay to 0 at `total_steps`.
pub fn lr_at(schedule: &Schedule, t: u64) -> Result<f64> {
    let Schedule {
        total_steps: total,
        warmup_steps: warmup,
        peak,
    } = *schedule;
    if t > total {
        return Err(Error::OutOfRange {
            what: "t",
            value: t as f64,
            range: format!("[0, {total}]"),
        });
    }
    if t < warmup {
        return Ok(peak * t as f64 / warmup as f64);
    }
    let span = total - warmup;
    if span == 0 {
        return Ok(peak);
    }
    let progress = (t - warmup) as f64 / span as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Peak learning rate and decay coefficient of one parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSettings {
    pub peak_lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<F> {
    pub m1_w: Array2<F>,
    pub m2_w: Array2<F>,
    pub m1_b: Array1<F>,
    pub m2_b: Array1<F>,
    pub t: u64,
    pub adam: AdamConfig,
    pub w_group: GroupSettings,
    pub b_group: GroupSettings,
}

impl<F: Real> OptimState<F> {
    pub fn new(n: usize, m: usize, adam: AdamConfig, w_group: GroupSettings, b_group: GroupSettings) -> Self {
        Self {
            m1_w: Array2::zeros((n, m)),
            m2_w: Array2::zeros((n, m)),
            m1_b: Array1::zeros(n),
            m2_b: Array1::zeros(n),
            t: 0,
            adam,
            w_group,
            b_group,
        }
    }
}

fn check_finite<F: Real>(v: impl Iterator<Item = F>, param: &'static str, step: u64) -> Result<()> {
    let mut bad = 0usize;
    let mut first = None;
    for (k, x) in v.enumerate() {
        if !x.is_finite() {
            bad += 1;
            first.get_or_insert((k, x));
        }
    }
    match first {
        None => Ok(()),
        Some((k, x)) => Err(Error::NonFiniteGradient {
            param,
            step,
            detail: format!("{bad} non-finite entries, first at flat index {k} = {x}"),
        }),
    }
}

fn adam_update<F: Real, D: ndarray::Dimension>(
    param: &mut ndarray::Array<F, D>,
    grad: &ndarray::Array<F, D>,
    m1: &mut ndarray::Array<F, D>,
    m2: &mut ndarray::Array<F, D>,
    adam: &AdamConfig,
    t: u64,
    lr: f64,
) {
    let b1 = F::from_f64(adam.beta1);
    let b2 = F::from_f64(adam.beta2);
    let one = F::one();
    let c1 = F::from_f64(1.0 - adam.beta1.powf(t as f64));
    let c2 = F::from_f64(1.0 - adam.beta2.powf(t as f64));
    let eps = F::from_f64(adam.eps);
    let lr = F::from_f64(lr);
    Zip::from(param)
        .and(grad)
        .and(m1)
        .and(m2)
        .for_each(|p, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        });
}

/// Applies the signed decoupled decay to every row of `w`.
pub fn apply_row_decay<F: Real>(w: &mut Array2<F>, gamma: f64, lr: f64) {
    if gamma == 0.0 || lr == 0.0 {
        return;
    }
    let g = F::from_f64(lr * gamma);
    for mut row in w.rows_mut() {
        if gamma > 0.0 {
            row.mapv_inplace(|x| x - g * x);
        } else {
            let norm = row.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
            if norm < MIN_ROW_NORM {
                continue;
            }
            let c = g * F::from_f64(1.0 / norm - 1.0);
            row.mapv_inplace(|x| x - c * x);
        }
    }
}

/// One optimizer step. `lr_w` and `lr_b` are the scheduled learning rates
/// of the two groups; decay on `W` is scaled by `lr_w`.
pub fn step<F: Real>(
    model: &mut ToyModel<F>,
    grads: &Grads<F>,
    state: &mut OptimState<F>,
    lr_w: f64,
    lr_b: f64,
) -> Result<()> {
    if grads.w.dim() != model.w.dim() || grads.b.len() != model.b.len() {
        return Err(Error::dims(
            format!("{:?}", model.w.dim()),
            format!("{:?}", grads.w.dim()),
        ));
    }
    if state.m1_w.dim() != model.w.dim() {
        return Err(Error::dims(
            format!("{:?}", model.w.dim()),
            format!("optimizer state {:?}", state.m1_w.dim()),
        ));
    }
    if !(lr_w >= 0.0 && lr_b >= 0.0) {
        return Err(Error::invalid("learning rates must be non-negative"));
    }
    let t = state.t + 1;
    check_finite(grads.w.iter().copied(), "W", t)?;
    check_finite(grads.b.iter().copied(), "b", t)?;
    state.t = t;
    let adam = state.adam;
    adam_update(&mut model.w, &grads.w, &mut state.m1_w, &mut state.m2_w, &adam, t, lr_w);
    adam_update(&mut model.b, &grads.b, &mut state.m1_b, &mut state.m2_b, &adam, t, lr_b);
    apply_row_decay(&mut model.w, state.w_group.weight_decay, lr_w);
    if state.b_group.weight_decay > 0.0 {
        let g = F::from_f64(lr_b * state.b_group.weight_decay);
        model.b.mapv_inplace(|x| x - g * x);
    }
    Ok(())
}

/// Change in `(|row| - 1)^2` produced by one growth-only step with
/// `gamma < 0`. Non-positive for small `lr`.
pub fn negative_decay_descent_check(row: ArrayView1<f64>, gamma: f64, lr: f64) -> Result<f64> {
    if gamma >= 0.0 {
        return Err(Error::invalid("gamma must be negative"));
    }
    let before = row.dot(&row).sqrt();
    if before < MIN_ROW_NORM {
        return Err(Error::ZeroRow);
    }
    let mut w = row.to_owned().insert_axis(ndarray::Axis(0));
    apply_row_decay(&mut w, gamma, lr);
    let after = w.row(0).dot(&w.row(0)).sqrt();
    Ok((after - 1.0).powi(2) - (before - 1.0).powi(2))
}
