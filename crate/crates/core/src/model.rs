//! The toy autoencoder `y = ReLU(W Wᵀ x + b)` with squared-error loss and
//! hand-derived gradients.
//!
//! `W` is `n x m` with row `W_i` the representation of feature `i`; batches
//! are row-major `B x n`, so the hidden layer is `h = x W` and the output is
//! `y = ReLU(h Wᵀ + b)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sampler::{sample_batch_into, Batch, FrequencySpec};

/// Below this fraction of active ReLUs the gradient products are accumulated
/// sparsely instead of with dense matrix products.
const SPARSE_GRAD_DENSITY: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<F> {
    pub h: Array2<F>,
    pub preact: Array2<F>,
    pub y: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Real> Grads<F> {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            w: Array2::zeros((n, m)),
            b: Array1::zeros(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestLoss {
    pub mean: f64,
    /// Standard error of the mean over evaluation batches; `None` for a
    /// single batch.
    pub stderr: Option<f64>,
    pub batches: usize,
}

impl<F: Real> ToyModel<F> {
    pub fn new(w: Array2<F>, b: Array1<F>) -> Result<Self> {
        if w.nrows() != b.len() {
            return Err(Error::dims(
                format!("bias of length {}", w.nrows()),
                b.len(),
            ));
        }
        Ok(Self { w, b })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            w: Array2::zeros((n, m)),
            b: Array1::zeros(n),
        }
    }

    /// Isotropic Gaussian init with entry std `scale / sqrt(m)`, zero bias.
    pub fn init_gaussian<R: Rng + ?Sized>(n: usize, m: usize, scale: f64, rng: &mut R) -> Self {
        let std = scale / (m as f64).sqrt();
        let w = Array2::from_shape_simple_fn((n, m), || F::normal(rng, std));
        Self {
            w,
            b: Array1::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn m(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> ToyModel<G> {
        ToyModel {
            w: self.w.mapv(|v| G::from_f64(v.to_f64())),
            b: self.b.mapv(|v| G::from_f64(v.to_f64())),
        }
    }

    fn check_batch(&self, batch: &Batch<F>) -> Result<()> {
        if batch.n_features() != self.n() {
            return Err(Error::dims(
                format!("{} features", self.n()),
                batch.n_features(),
            ));
        }
        Ok(())
    }
}

fn hidden_into<F: Real>(w: &Array2<F>, batch: &Batch<F>, h: &mut Array2<F>) {
    h.fill(F::zero());
    for &(s, i, v) in &batch.entries {
        axpy(v, w.row(i), h.row_mut(s).into_slice().unwrap());
    }
}

#[inline]
fn axpy<F: Real>(a: F, x: ArrayView1<F>, y: &mut [F]) {
    match x.as_slice() {
        Some(xs) => {
            for (yi, &xi) in y.iter_mut().zip(xs) {
                *yi += a * xi;
            }
        }
        None => {
            for (yi, &xi) in y.iter_mut().zip(x.iter()) {
                *yi += a * xi;
            }
        }
    }
}

pub fn forward<F: Real>(model: &ToyModel<F>, batch: &Batch<F>) -> Result<ForwardTrace<F>> {
    model.check_batch(batch)?;
    let (rows, n, m) = (batch.batch_size(), model.n(), model.m());
    let mut h = Array2::zeros((rows, m));
    hidden_into(&model.w, batch, &mut h);
    let mut preact = Array2::zeros((rows, n));
    general_mat_mul(F::one(), &h, &model.w.t(), F::zero(), &mut preact);
    preact += &model.b;
    let y = preact.mapv(|v| if v > F::zero() { v } else { F::zero() });
    Ok(ForwardTrace { h, preact, y })
}

/// Mean over the batch of the per-sample squared error summed over features.
pub fn loss<F: Real>(trace: &ForwardTrace<F>, batch: &Batch<F>) -> Result<f64> {
    if trace.y.dim() != batch.data.dim() {
        return Err(Error::dims(
            format!("{:?}", batch.data.dim()),
            format!("{:?}", trace.y.dim()),
        ));
    }
    let sse: f64 = trace
        .y
        .iter()
        .zip(batch.data.iter())
        .map(|(&y, &x)| {
            let r = (y - x).to_f64();
            r * r
        })
        .sum();
    Ok(sse / batch.batch_size() as f64)
}

/// Gradients of [`loss`] with respect to `W` and `b`.
///
/// `W` appears twice in the model, in the embedding `h = x W` and in the
/// read-out `h Wᵀ`; both paths contribute. The ReLU derivative at 0 is 0.
pub fn backward<F: Real>(
    model: &ToyModel<F>,
    batch: &Batch<F>,
    trace: &ForwardTrace<F>,
) -> Result<Grads<F>> {
    model.check_batch(batch)?;
    if trace.preact.dim() != batch.data.dim() || trace.h.dim() != (batch.batch_size(), model.m()) {
        return Err(Error::dims("trace produced by forward on this batch", "mismatched trace"));
    }
    let scale = F::from_f64(2.0 / batch.batch_size() as f64);
    let mut delta = Array2::zeros(batch.data.dim());
    ndarray::Zip::from(&mut delta)
        .and(&trace.preact)
        .and(&trace.y)
        .and(&batch.data)
        .for_each(|d, &p, &y, &x| {
            *d = if p > F::zero() { scale * (y - x) } else { F::zero() };
        });
    let gb = delta.sum_axis(Axis(0));
    // read-out path
    let mut gw = delta.t().dot(&trace.h);
    // embedding path
    let gh = delta.dot(&model.w);
    for &(s, i, v) in &batch.entries {
        axpy(v, gh.row(s), gw.row_mut(i).into_slice().unwrap());
    }
    Ok(Grads { w: gw, b: gb })
}

/// Reusable buffers for the fused training step.
#[derive(Debug, Clone)]
pub struct Workspace<F> {
    h: Array2<F>,
    z: Array2<F>,
    gh: Array2<F>,
}

impl<F: Real> Workspace<F> {
    pub fn new(batch_size: usize, n: usize, m: usize) -> Self {
        Self {
            h: Array2::zeros((batch_size, m)),
            z: Array2::zeros((batch_size, n)),
            gh: Array2::zeros((batch_size, m)),
        }
    }

    fn fits(&self, batch: &Batch<F>, model: &ToyModel<F>) -> bool {
        self.z.dim() == batch.data.dim() && self.h.ncols() == model.m()
    }
}

/// Loss only, reusing `ws`.
pub fn loss_with<F: Real>(model: &ToyModel<F>, batch: &Batch<F>, ws: &mut Workspace<F>) -> Result<f64> {
    model.check_batch(batch)?;
    if !ws.fits(batch, model) {
        *ws = Workspace::new(batch.batch_size(), model.n(), model.m());
    }
    hidden_into(&model.w, batch, &mut ws.h);
    general_mat_mul(F::one(), &ws.h, &model.w.t(), F::zero(), &mut ws.z);
    let mut sse = 0.0f64;
    for (zrow, xrow) in ws.z.rows().into_iter().zip(batch.data.rows()) {
        for ((&z, &bi), &x) in zrow.iter().zip(model.b.iter()).zip(xrow.iter()) {
            let pre = z + bi;
            let y = if pre > F::zero() { pre } else { F::zero() };
            let r = (y - x).to_f64();
            sse += r * r;
        }
    }
    Ok(sse / batch.batch_size() as f64)
}

const LANES: usize = 8;

/// Turns one row of `h Wᵀ` into `delta` in place, adds it to the bias
/// gradient and returns the row's squared error.
#[inline(never)]
fn delta_row<F: Real>(z: &mut [F], x: &[F], b: &[F], gb: &mut [F], scale: F, active: &mut usize) -> f64 {
    let zero = F::zero();
    let mut acc = [zero; LANES];
    let mut count = [0u32; LANES];
    let mut step = |z: &mut F, x: F, b: F, g: &mut F, k: usize| {
        let pre = *z + b;
        let on = pre > zero;
        let r = if on { pre } else { zero } - x;
        acc[k] += r * r;
        let d = if on { scale * r } else { zero };
        *z = d;
        *g += d;
        count[k] += on as u32;
    };
    let split = z.len() - z.len() % LANES;
    let (zh, zt) = z.split_at_mut(split);
    let (gh, gt) = gb.split_at_mut(split);
    for (((zc, xc), bc), gc) in zh
        .chunks_exact_mut(LANES)
        .zip(x.chunks_exact(LANES))
        .zip(b.chunks_exact(LANES))
        .zip(gh.chunks_exact_mut(LANES))
    {
        for k in 0..LANES {
            step(&mut zc[k], xc[k], bc[k], &mut gc[k], k);
        }
    }
    for (k, (zv, gv)) in zt.iter_mut().zip(gt.iter_mut()).enumerate() {
        step(zv, x[split + k], b[split + k], gv, k);
    }
    *active += count.iter().map(|&c| c as usize).sum::<usize>();
    acc.iter().map(|&v| Real::to_f64(v)).sum()
}

/// Fused forward + backward used by the training loop. Writes the
/// gradients into `grads` and returns the batch loss.
pub fn loss_and_grad<F: Real>(
    model: &ToyModel<F>,
    batch: &Batch<F>,
    ws: &mut Workspace<F>,
    grads: &mut Grads<F>,
) -> Result<f64> {
    model.check_batch(batch)?;
    if !ws.fits(batch, model) {
        *ws = Workspace::new(batch.batch_size(), model.n(), model.m());
    }
    let rows = batch.batch_size();
    let scale = F::from_f64(2.0 / rows as f64);
    hidden_into(&model.w, batch, &mut ws.h);
    general_mat_mul(F::one(), &ws.h, &model.w.t(), F::zero(), &mut ws.z);

    // z becomes delta in place; the bias gradient is its column sum
    grads.b.fill(F::zero());
    let bias = model.b.as_slice().expect("contiguous bias");
    let gb = grads.b.as_slice_mut().expect("contiguous bias gradient");
    let mut sse = 0.0f64;
    let mut active = 0usize;
    for (mut zrow, xrow) in ws.z.rows_mut().into_iter().zip(batch.data.rows()) {
        let zs = zrow.as_slice_mut().expect("contiguous workspace");
        let xs = xrow.to_slice().expect("contiguous batch");
        sse += delta_row(zs, xs, bias, gb, scale, &mut active);
    }
    let delta = &ws.z;

    let density = active as f64 / delta.len().max(1) as f64;
    if density < SPARSE_GRAD_DENSITY {
        grads.w.fill(F::zero());
        ws.gh.fill(F::zero());
        for (s, drow) in delta.rows().into_iter().enumerate() {
            let hrow = ws.h.row(s);
            let mut ghrow = ws.gh.row_mut(s);
            let gh_s = ghrow.as_slice_mut().unwrap();
            for (i, &d) in drow.iter().enumerate() {
                if d != F::zero() {
                    axpy(d, hrow, grads.w.row_mut(i).into_slice().unwrap());
                    axpy(d, model.w.row(i), gh_s);
                }
            }
        }
    } else {
        general_mat_mul(F::one(), &delta.t(), &ws.h, F::zero(), &mut grads.w);
        general_mat_mul(F::one(), delta, &model.w, F::zero(), &mut ws.gh);
    }
    for &(s, i, v) in &batch.entries {
        axpy(v, ws.gh.row(s), grads.w.row_mut(i).into_slice().unwrap());
    }
    Ok(sse / rows as f64)
}

/// Mean test loss over `multiplier` fresh batches of `batch_size` samples
/// drawn sequentially from `rng`.
pub fn test_loss<F: Real, R: Rng + ?Sized>(
    model: &ToyModel<F>,
    spec: &FrequencySpec,
    batch_size: usize,
    multiplier: usize,
    rng: &mut R,
) -> Result<TestLoss> {
    if multiplier == 0 {
        return Err(Error::invalid("multiplier must be at least 1"));
    }
    if spec.n != model.n() {
        return Err(Error::dims(format!("{} features", model.n()), spec.n));
    }
    let mut batch = Batch::zeros(batch_size, spec.n);
    let mut ws = Workspace::new(batch_size, model.n(), model.m());
    let mut losses = Vec::with_capacity(multiplier);
    for _ in 0..multiplier {
        sample_batch_into(spec, &mut batch, rng);
        losses.push(loss_with(model, &batch, &mut ws)?);
    }
    let k = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / k;
    let stderr = (losses.len() > 1).then(|| {
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    });
    Ok(TestLoss {
        mean,
        stderr,
        batches: losses.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use crate::sampler::{make_frequencies, sample_batch, FrequencyKind};
    use ndarray::{s, Array};

    fn uniform(n: usize, e: f64) -> FrequencySpec {
        make_frequencies(FrequencyKind::Power { alpha: 0.0 }, n, e).unwrap()
    }

    fn random_model(n: usize, m: usize, seed: u64) -> ToyModel<f64> {
        let mut rng = StreamKey::new(seed, 0).init();
        let mut model = ToyModel::init_gaussian(n, m, 1.0, &mut rng);
        model.b = Array::from_shape_simple_fn(n, || f64::normal(&mut rng, 0.3));
        model
    }

    #[test]
    fn identity_reconstructs_exactly() {
        let model = ToyModel::<f64>::new(Array2::eye(6), Array1::zeros(6)).unwrap();
        let batch = sample_batch::<f64, _>(&uniform(6, 2.0), 20, &mut StreamKey::new(1, 1).step(0));
        let t = forward(&model, &batch).unwrap();
        assert_eq!(t.y, batch.data);
        assert_eq!(loss(&t, &batch).unwrap(), 0.0);
        let g = backward(&model, &batch, &t).unwrap();
        assert!(g.w.iter().chain(g.b.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_output_bias() {
        let spec = uniform(4, 1.0);
        let mut model = ToyModel::<f64>::zeros(4, 2);
        let batch = sample_batch::<f64, _>(&spec, 10, &mut StreamKey::new(1, 1).step(0));
        assert!(forward(&model, &batch).unwrap().y.iter().all(|&v| v == 0.0));
        model.b = Array1::from(spec.p.clone());
        let y = forward(&model, &batch).unwrap().y;
        for row in y.rows() {
            assert_eq!(row.to_vec(), spec.p);
        }
    }

    #[test]
    fn zero_model_loss_matches_second_moment() {
        // E[sum x_i^2] = sum p_i * 4/3
        let spec = uniform(4, 1.0);
        let model = ToyModel::<f64>::zeros(4, 2);
        let tl = test_loss(&model, &spec, 2000, 50, &mut StreamKey::new(5, 0).eval(0)).unwrap();
        assert!((tl.mean - 4.0 / 3.0).abs() / (4.0 / 3.0) < 0.02, "{}", tl.mean);
    }

    #[test]
    fn mean_bias_loss_matches_variance_sum() {
        let spec = make_frequencies(FrequencyKind::Power { alpha: 1.0 }, 6, 1.5).unwrap();
        let mut model = ToyModel::<f64>::zeros(6, 3);
        model.b = Array1::from(spec.p.clone());
        let want: f64 = spec.p.iter().map(|p| 4.0 / 3.0 * p - p * p).sum();
        let tl = test_loss(&model, &spec, 2000, 50, &mut StreamKey::new(6, 0).eval(0)).unwrap();
        let se = tl.stderr.unwrap();
        assert!((tl.mean - want).abs() < 4.0 * se, "{} vs {want} (se {se})", tl.mean);
    }

    #[test]
    fn dimension_mismatch() {
        let model = ToyModel::<f64>::zeros(5, 2);
        let batch = Batch::<f64>::zeros(3, 4);
        assert!(matches!(forward(&model, &batch), Err(Error::DimensionMismatch { .. })));
        assert!(ToyModel::new(Array2::<f64>::zeros((3, 2)), Array1::zeros(2)).is_err());
    }

    #[test]
    fn fused_step_matches_reference_path() {
        for (k, density) in [(0, 0.5), (1, 3.0)] {
            let spec = make_frequencies(FrequencyKind::Power { alpha: 0.8 }, 30, density).unwrap();
            let mut model = random_model(30, 6, 40 + k);
            if k == 0 {
                // mostly negative bias drives the sparse gradient branch
                model.b.mapv_inplace(|b| b - 3.0);
            }
            let batch = sample_batch::<f64, _>(&spec, 16, &mut StreamKey::new(2, k).step(0));
            let t = forward(&model, &batch).unwrap();
            let want_loss = loss(&t, &batch).unwrap();
            let want = backward(&model, &batch, &t).unwrap();
            let mut ws = Workspace::new(16, 30, 6);
            let mut got = Grads::zeros(30, 6);
            let l = loss_and_grad(&model, &batch, &mut ws, &mut got).unwrap();
            assert!((l - want_loss).abs() < 1e-12);
            assert!((loss_with(&model, &batch, &mut ws).unwrap() - want_loss).abs() < 1e-12);
            for (a, b) in got.w.iter().zip(want.w.iter()).chain(got.b.iter().zip(want.b.iter())) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn concatenated_batches_forward_independently() {
        let spec = uniform(12, 2.0);
        let model = random_model(12, 4, 3);
        let a = sample_batch::<f64, _>(&spec, 7, &mut StreamKey::new(8, 0).step(0));
        let b = sample_batch::<f64, _>(&spec, 5, &mut StreamKey::new(8, 0).step(1));
        let joined = ndarray::concatenate(Axis(0), &[a.data.view(), b.data.view()]).unwrap();
        let tj = forward(&model, &Batch::from_dense(joined)).unwrap();
        let ta = forward(&model, &a).unwrap();
        let tb = forward(&model, &b).unwrap();
        for (x, y) in tj.y.slice(s![..7, ..]).iter().zip(ta.y.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in tj.y.slice(s![7.., ..]).iter().zip(tb.y.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_eval_batch_equals_loss() {
        let spec = uniform(10, 1.0);
        let model = random_model(10, 3, 9).cast::<f32>();
        let key = StreamKey::new(4, 4);
        let tl = test_loss(&model, &spec, 32, 1, &mut key.eval(0)).unwrap();
        let batch = sample_batch::<f32, _>(&spec, 32, &mut key.eval(0));
        let direct = loss(&forward(&model, &batch).unwrap(), &batch).unwrap();
        assert_eq!(tl.mean, direct);
        assert!(tl.stderr.is_none());
    }

    #[test]
    fn stderr_matches_sample_statistics() {
        let spec = uniform(10, 1.0);
        let model = random_model(10, 3, 9);
        let key = StreamKey::new(4, 4);
        let tl = test_loss(&model, &spec, 16, 5, &mut key.eval(0)).unwrap();
        let mut rng = key.eval(0);
        let losses: Vec<f64> = (0..5)
            .map(|_| {
                let b = sample_batch::<f64, _>(&spec, 16, &mut rng);
                loss(&forward(&model, &b).unwrap(), &b).unwrap()
            })
            .collect();
        let mean = losses.iter().sum::<f64>() / 5.0;
        let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / 4.0;
        assert!((tl.mean - mean).abs() < 1e-12);
        assert!((tl.stderr.unwrap() - (var / 5.0).sqrt()).abs() < 1e-12);
    }
}
