use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use superscale_core::rng::StreamKey;
use superscale_core::sampler::{make_frequencies, sample_batch, Batch, FrequencyKind, SingleFeatureSampler};

#[test]
fn activation_rates_match_probabilities() {
    let spec = make_frequencies(FrequencyKind::Power { alpha: 0.8 }, 50, 5.0).unwrap();
    let rows = 40_000;
    let batch: Batch<f64> = sample_batch(&spec, rows, &mut StreamKey::new(9, 0).step(0));
    let mut counts = vec![0usize; spec.n];
    for &(_, i, _) in &batch.entries {
        counts[i] += 1;
    }
    for (i, (&c, &p)) in counts.iter().zip(&spec.p).enumerate() {
        let sd = (rows as f64 * p * (1.0 - p)).sqrt();
        let z = (c as f64 - rows as f64 * p) / sd;
        assert!(z.abs() < 5.0, "feature {i}: {c} active, expected {}", rows as f64 * p);
    }
    let per_row = batch.entries.len() as f64 / rows as f64;
    assert!((per_row - 5.0).abs() < 0.05, "{per_row}");
}

#[test]
fn active_values_are_uniform_on_open_interval() {
    let spec = make_frequencies(FrequencyKind::Exponential { scale: 20.0 }, 100, 4.0).unwrap();
    let batch: Batch<f64> = sample_batch(&spec, 20_000, &mut ChaCha8Rng::seed_from_u64(4));
    let mut v: Vec<f64> = batch.entries.iter().map(|e| e.2).collect();
    assert!(v.iter().all(|&x| x > 0.0 && x < 2.0));
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    let second = v.iter().map(|x| x * x).sum::<f64>() / k;
    assert!((mean - 1.0).abs() < 5.0 * (1.0f64 / 3.0 / k).sqrt(), "{mean}");
    assert!((second - 4.0 / 3.0).abs() < 0.02, "{second}");
    // one-sample Kolmogorov-Smirnov against U(0, 2) at the 1% level
    v.sort_by(f64::total_cmp);
    let d = v
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let f = x / 2.0;
            (f - j as f64 / k).abs().max(((j + 1) as f64 / k - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(d < 1.63 / k.sqrt(), "KS statistic {d}");
}

#[test]
fn dense_data_agrees_with_entries() {
    let spec = make_frequencies(FrequencyKind::Linear, 30, 2.0).unwrap();
    let batch: Batch<f32> = sample_batch(&spec, 200, &mut ChaCha8Rng::seed_from_u64(1));
    let nonzero = batch.data.iter().filter(|&&x| x != 0.0).count();
    assert_eq!(nonzero, batch.entries.len());
    for &(s, i, v) in &batch.entries {
        assert_eq!(batch.data[[s, i]], v);
    }
}

#[test]
fn single_feature_sampler_follows_normalized_frequencies() {
    let spec = make_frequencies(FrequencyKind::Power { alpha: 1.0 }, 8, 2.0).unwrap();
    let sampler = SingleFeatureSampler::new(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 80_000;
    let mut counts = [0usize; 8];
    for _ in 0..draws {
        let (i, v) = sampler.sample(&mut rng);
        assert!(v > 0.0 && v < 2.0);
        counts[i] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let q = spec.p[i] / spec.density;
        let sd = (draws as f64 * q * (1.0 - q)).sqrt();
        assert!((c as f64 - draws as f64 * q).abs() < 5.0 * sd, "feature {i}");
    }
}

fn kind() -> impl Strategy<Value = FrequencyKind> {
    prop_oneof![
        (0.0f64..3.0).prop_map(|alpha| FrequencyKind::Power { alpha }),
        (0.5f64..500.0).prop_map(|scale| FrequencyKind::Exponential { scale }),
        Just(FrequencyKind::Linear),
    ]
}

proptest! {
    #[test]
    fn families_are_normalized_sorted_and_bounded(kind in kind(), n in 1usize..400, e in 0.01f64..1.0) {
        let spec = make_frequencies(kind, n, e).unwrap();
        prop_assert_eq!(spec.p.len(), n);
        let total: f64 = spec.p.iter().sum();
        prop_assert!((total - e).abs() < 1e-9 * e);
        prop_assert!(spec.p.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(spec.p.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn batches_are_a_pure_function_of_the_stream(seed in any::<u64>(), step in 0u64..1000) {
        let spec = make_frequencies(FrequencyKind::Power { alpha: 1.2 }, 20, 1.0).unwrap();
        let key = StreamKey::new(seed, 0);
        let a: Batch<f32> = sample_batch(&spec, 16, &mut key.step(step));
        let b: Batch<f32> = sample_batch(&spec, 16, &mut key.step(step));
        prop_assert_eq!(a.data, b.data);
    }
}
