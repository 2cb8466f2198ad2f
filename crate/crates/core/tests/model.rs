use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use superscale_core::model::{backward, forward, loss, loss_and_grad, Grads, Workspace};
use superscale_core::sampler::{make_frequencies, sample_batch, Batch, FrequencyKind};
use superscale_core::ToyModel;

fn random_model(n: usize, m: usize, bias_shift: f64, seed: u64) -> ToyModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ToyModel::<f64>::init_gaussian(n, m, 1.0, &mut rng);
    model.b = Array1::from_shape_fn(n, |_| bias_shift + 0.3 * (rng.random::<f64>() - 0.5));
    model
}

fn dense_batch(rows: usize, n: usize, p: f64, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_fn((rows, n), |_| {
        if rng.random::<f64>() < p {
            2.0 * rng.random::<f64>()
        } else {
            0.0
        }
    });
    Batch::from_dense(data)
}

fn total_loss(model: &ToyModel<f64>, batch: &Batch<f64>) -> f64 {
    loss(&forward(model, batch).unwrap(), batch).unwrap()
}

fn random_orthogonal(m: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::<f64>::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5);
    let q = a.qr().q();
    Array2::from_shape_fn((m, m), |(i, j)| q[(i, j)])
}

#[test]
fn gradients_match_central_differences() {
    let (n, m) = (7, 3);
    let model = random_model(n, m, 0.05, 11);
    let batch = dense_batch(9, n, 0.4, 12);
    let trace = forward(&model, &batch).unwrap();
    let nearest_kink = trace.preact.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()));
    assert!(nearest_kink > 1e-4, "fixture sits on a kink: {nearest_kink}");
    let g = backward(&model, &batch, &trace).unwrap();
    let h = 1e-6;
    for i in 0..n {
        for k in 0..m {
            let mut plus = model.clone();
            plus.w[[i, k]] += h;
            let mut minus = model.clone();
            minus.w[[i, k]] -= h;
            let fd = (total_loss(&plus, &batch) - total_loss(&minus, &batch)) / (2.0 * h);
            assert!((fd - g.w[[i, k]]).abs() < 1e-6 * (1.0 + fd.abs()), "W[{i},{k}]: {fd} vs {}", g.w[[i, k]]);
        }
        let mut plus = model.clone();
        plus.b[i] += h;
        let mut minus = model.clone();
        minus.b[i] -= h;
        let fd = (total_loss(&plus, &batch) - total_loss(&minus, &batch)) / (2.0 * h);
        assert!((fd - g.b[i]).abs() < 1e-6 * (1.0 + fd.abs()), "b[{i}]: {fd} vs {}", g.b[i]);
    }
}

#[test]
fn f32_training_gradient_tracks_f64() {
    let model = random_model(30, 4, 0.0, 5);
    let spec = make_frequencies(FrequencyKind::Power { alpha: 1.0 }, 30, 3.0).unwrap();
    let batch: Batch<f64> = sample_batch(&spec, 64, &mut ChaCha8Rng::seed_from_u64(6));
    let g64 = backward(&model, &batch, &forward(&model, &batch).unwrap()).unwrap();
    let (m32, b32) = (model.cast::<f32>(), batch.cast::<f32>());
    let mut ws = Workspace::new(64, 30, 4);
    let mut g32 = Grads::zeros(30, 4);
    let l32 = loss_and_grad(&m32, &b32, &mut ws, &mut g32).unwrap();
    assert!((l32 - total_loss(&model, &batch)).abs() < 1e-4);
    for (a, b) in g32.w.iter().zip(g64.w.iter()) {
        assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
    }
}

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_matches_reference(seed in 0u64..10_000, shift in -1.5f64..0.3, p in 0.05f64..0.9) {
        // negative shifts push the fused path onto its sparse branch
        let (n, m) = (12, 4);
        let model = random_model(n, m, shift, seed);
        let batch = dense_batch(10, n, p, seed ^ 0xabc);
        let trace = forward(&model, &batch).unwrap();
        let reference = backward(&model, &batch, &trace).unwrap();
        let mut ws = Workspace::new(10, n, m);
        let mut g = Grads::zeros(n, m);
        let l = loss_and_grad(&model, &batch, &mut ws, &mut g).unwrap();
        prop_assert!((l - loss(&trace, &batch).unwrap()).abs() < 1e-12);
        prop_assert!(max_diff(&g.w, &reference.w) < 1e-12);
        for (a, b) in g.b.iter().zip(reference.b.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_rotation_invariant(seed in 0u64..10_000) {
        let (n, m) = (10, 4);
        let model = random_model(n, m, 0.0, seed);
        let batch = dense_batch(6, n, 0.3, seed + 1);
        let q = random_orthogonal(m, seed + 2);
        let rotated = ToyModel::new(model.w.dot(&q), model.b.clone()).unwrap();
        let (a, b) = (total_loss(&model, &batch), total_loss(&rotated, &batch));
        prop_assert!((a - b).abs() < 1e-10 * (1.0 + a));
        // gradients rotate with the weights
        let g = backward(&model, &batch, &forward(&model, &batch).unwrap()).unwrap();
        let gr = backward(&rotated, &batch, &forward(&rotated, &batch).unwrap()).unwrap();
        prop_assert!(max_diff(&g.w.dot(&q), &gr.w) < 1e-10);
    }

    #[test]
    fn loss_is_feature_permutation_invariant(seed in 0u64..10_000) {
        let (n, m) = (9, 3);
        let model = random_model(n, m, 0.02, seed);
        let batch = dense_batch(5, n, 0.4, seed + 1);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pw = Array2::from_shape_fn((n, m), |(i, k)| model.w[[perm[i], k]]);
        let pb = Array1::from_shape_fn(n, |i| model.b[perm[i]]);
        let pdata = Array2::from_shape_fn((5, n), |(s, i)| batch.data[[s, perm[i]]]);
        let permuted = ToyModel::new(pw, pb).unwrap();
        let pbatch = Batch::from_dense(pdata);
        let (a, b) = (total_loss(&model, &batch), total_loss(&permuted, &pbatch));
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + a));
        let g = backward(&model, &batch, &forward(&model, &batch).unwrap()).unwrap();
        let gp = backward(&permuted, &pbatch, &forward(&permuted, &pbatch).unwrap()).unwrap();
        for i in 0..n {
            for k in 0..m {
                prop_assert!((gp.w[[i, k]] - g.w[[perm[i], k]]).abs() < 1e-12);
            }
        }
    }
}
