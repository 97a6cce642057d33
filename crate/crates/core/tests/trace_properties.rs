use std::fs;

use lukv::metrics::{metric_ranking, score, snapkv_score};
use lukv::oracle::{compute_oracle_importance, oracle_ranking};
use lukv::trace::{generate_synthetic_trace, load_trace, save_trace, Tensor};
use lukv::{Error, HeadIndex, HeadValues, MetricSpec, ModelShape, Ranking, Scenario, TraceBundle};
use proptest::prelude::*;

fn scenario() -> impl Strategy<Value = Scenario> {
    prop_oneof![Just(Scenario::Aligned), Just(Scenario::Misaligned), Just(Scenario::Mixed)]
}

fn small_trace() -> impl Strategy<Value = TraceBundle> {
    (1usize..3, 1usize..4, 8usize..40, 1usize..6, any::<u64>(), scenario()).prop_map(|(l, h, t, k, seed, sc)| {
        generate_synthetic_trace(ModelShape::new(l, h, t, k, 4).unwrap(), seed, sc).unwrap()
    })
}

fn with_vnorm(trace: &TraceBundle, vnorm: Vec<f32>) -> TraceBundle {
    TraceBundle::new(
        *trace.shape(),
        trace.decode_attn().clone(),
        Tensor::new(trace.vnorm().dims().to_vec(), vnorm).unwrap(),
        trace.prefill_attn().cloned(),
        trace.keys().cloned(),
    )
    .unwrap()
}

fn is_permutation(order: &[usize]) -> bool {
    let mut seen = vec![false; order.len()];
    order.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn save_load_roundtrip(trace in small_trace()) {
        let dir = tempfile::tempdir().unwrap();
        save_trace(&trace, dir.path().join("a")).unwrap();
        let loaded = load_trace(dir.path().join("a")).unwrap();
        prop_assert_eq!(loaded.decode_attn(), trace.decode_attn());
        prop_assert_eq!(loaded.vnorm(), trace.vnorm());
        prop_assert_eq!(loaded.prefill_attn(), trace.prefill_attn());
        prop_assert_eq!(loaded.keys(), trace.keys());
        prop_assert_eq!(loaded.shape(), trace.shape());
        save_trace(&loaded, dir.path().join("b")).unwrap();
        for name in ["manifest.json", "decode_attn.f32", "vnorm.f32"] {
            prop_assert_eq!(fs::read(dir.path().join("a").join(name)).unwrap(), fs::read(dir.path().join("b").join(name)).unwrap());
        }
    }

    #[test]
    fn generation_is_deterministic(
        (l, h, t, k) in (1usize..3, 1usize..4, 2usize..30, 1usize..5),
        seed in any::<u64>(),
        sc in scenario(),
    ) {
        let shape = ModelShape::new(l, h, t, k, 4).unwrap();
        let a = generate_synthetic_trace(shape, seed, sc).unwrap();
        let b = generate_synthetic_trace(shape, seed, sc).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn decode_rows_carry_at_most_unit_mass(trace in small_trace()) {
        let s = *trace.shape();
        for head in s.heads() {
            for k in 0..s.decode_len {
                let mass: f64 = trace.decode_row(head, k).iter().map(|&a| a as f64).sum();
                prop_assert!((0.0..=1.0 + 1e-6).contains(&mass), "row mass {mass}");
            }
        }
    }

    #[test]
    fn importance_scales_with_vnorm(trace in small_trace(), exp in -6i32..6, pick in any::<prop::sample::Index>()) {
        // power-of-two factors keep every product exact
        let c = 2f32.powi(exp);
        let s = *trace.shape();
        let target = pick.index(s.head_count());
        let t = s.prefill_len;
        let mut vnorm = trace.vnorm().data().to_vec();
        vnorm[target * t..(target + 1) * t].iter_mut().for_each(|v| *v *= c);
        let scaled = with_vnorm(&trace, vnorm);
        let before = compute_oracle_importance(&trace, false).unwrap();
        let after = compute_oracle_importance(&scaled, false).unwrap();
        for head in s.heads() {
            let factor = if s.flat(head) == target { c as f64 } else { 1.0 };
            for (a, b) in before.head(head).iter().zip(after.head(head)) {
                prop_assert_eq!(a * factor, *b);
            }
        }
        prop_assert_eq!(oracle_ranking(&before), oracle_ranking(&after));
    }

    #[test]
    fn importance_dominates_every_step(trace in small_trace()) {
        let s = *trace.shape();
        let imp = compute_oracle_importance(&trace, false).unwrap();
        for head in s.heads() {
            let v = trace.vnorm_head(head);
            for k in 0..s.decode_len {
                for (j, &a) in trace.decode_row(head, k).iter().enumerate() {
                    prop_assert!(imp.head(head)[j] >= a as f64 * v[j] as f64);
                }
            }
        }
    }

    #[test]
    fn normalization_keeps_within_layer_order(trace in small_trace()) {
        let raw = compute_oracle_importance(&trace, false).unwrap();
        let norm = compute_oracle_importance(&trace, true).unwrap();
        let s = *trace.shape();
        for layer in 0..s.num_layers {
            let total: f64 = raw.values().layer(layer).iter().sum();
            let sum: f64 = norm.values().layer(layer).iter().sum();
            prop_assert!(total == 0.0 || (sum - 1.0).abs() < 1e-12);
            // the normalized ranking sorts raw values too
            for head in (0..s.num_heads).map(|h| HeadIndex::new(layer, h)) {
                let order = oracle_ranking(&norm);
                let ranked: Vec<f64> = order.head(head).iter().map(|&j| raw.head(head)[j]).collect();
                prop_assert!(ranked.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn metric_rankings_are_permutations(trace in small_trace()) {
        let s = *trace.shape();
        let window = s.prefill_len.min(32).min(trace.window_rows().unwrap_or(1));
        for spec in [MetricSpec::snapkv().with_window(window), MetricSpec::keydiff(), MetricSpec::oracle()] {
            let ranking = metric_ranking(&score(&trace, &spec).unwrap()).unwrap();
            for head in s.heads() {
                prop_assert!(is_permutation(ranking.head(head)));
            }
        }
    }

    #[test]
    fn shifting_a_head_keeps_its_ranking(
        scores in prop::collection::vec(0u32..64, 1..40),
        shift in 0u32..1000,
    ) {
        // small integers: every shifted value is exact
        let t = scores.len();
        let base: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let shifted: Vec<f64> = base.iter().map(|s| s + shift as f64 - 500.0).collect();
        let a = Ranking::from_scores(&HeadValues::from_vec(1, 1, t, base).unwrap()).unwrap();
        let b = Ranking::from_scores(&HeadValues::from_vec(1, 1, t, shifted).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn snapkv_is_monotone(trace in small_trace(), pick in any::<prop::sample::Index>(), keep in 0.0f32..1.0) {
        // lowering one window entry can only lower scores; raising is the mirror image
        let spec = MetricSpec::snapkv().with_window(trace.window_rows().unwrap().min(trace.shape().prefill_len)).with_kernel(3);
        let prefill = trace.prefill_attn().unwrap();
        let mut data = prefill.data().to_vec();
        let i = pick.index(data.len());
        data[i] *= keep;
        let lowered = TraceBundle::new(
            *trace.shape(),
            trace.decode_attn().clone(),
            trace.vnorm().clone(),
            Some(Tensor::new(prefill.dims().to_vec(), data).unwrap()),
            trace.keys().cloned(),
        )
        .unwrap();
        let high = snapkv_score(&trace, &spec).unwrap();
        let low = snapkv_score(&lowered, &spec).unwrap();
        prop_assert!(low.as_slice().iter().zip(high.as_slice()).all(|(l, h)| l <= h));
    }

    #[test]
    fn oracle_passthrough_reproduces_the_oracle(trace in small_trace()) {
        let imp = compute_oracle_importance(&trace, false).unwrap();
        let ranking = metric_ranking(&score(&trace, &MetricSpec::oracle()).unwrap()).unwrap();
        prop_assert_eq!(ranking, oracle_ranking(&imp));
    }
}

fn tiny_bundle(l: usize, h: usize, t: usize, k: usize) -> TraceBundle {
    let shape = ModelShape::new(l, h, t, k, 0).unwrap();
    let n = l * h;
    let decode = Tensor::new(vec![l, h, k, t], vec![0.5 / t as f32; n * k * t]).unwrap();
    let vnorm = Tensor::new(vec![l, h, t], (0..n * t).map(|i| 1.0 + i as f32).collect()).unwrap();
    TraceBundle::new(shape, decode, vnorm, None, None).unwrap()
}

#[test]
fn one_row_bundle_carries_at_most_unit_mass() {
    let trace = generate_synthetic_trace(ModelShape::new(1, 1, 4, 1, 4).unwrap(), 7, Scenario::Aligned).unwrap();
    let mass: f64 = trace.decode_attn().data().iter().map(|&a| a as f64).sum();
    assert!(mass <= 1.0);
}

#[test]
fn short_tensor_file_is_a_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    save_trace(&tiny_bundle(1, 1, 10, 1), dir.path()).unwrap();
    let path = dir.path().join("decode_attn.f32");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..9 * 4]).unwrap();
    match load_trace(dir.path()) {
        Err(Error::SizeMismatch { tensor, expected, actual }) => {
            assert_eq!(tensor, "decode_attn");
            assert_eq!((expected, actual), (40, 36));
        }
        other => panic!("expected a size mismatch, got {other:?}"),
    }
}

#[test]
fn nan_entry_is_reported_with_its_index() {
    let dir = tempfile::tempdir().unwrap();
    save_trace(&tiny_bundle(2, 2, 3, 2), dir.path()).unwrap();
    let path = dir.path().join("decode_attn.f32");
    let mut bytes = fs::read(&path).unwrap();
    // element [1, 0, 1, 2] of a [2, 2, 2, 3] tensor
    let flat = ((2 + 0) * 2 + 1) * 3 + 2;
    bytes[flat * 4..flat * 4 + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    match load_trace(dir.path()) {
        Err(Error::InvalidValue { tensor, index, value }) => {
            assert_eq!(tensor, "decode_attn");
            assert_eq!(index, vec![1, 0, 1, 2]);
            assert!(value.is_nan());
        }
        other => panic!("expected an invalid value, got {other:?}"),
    }
}

#[test]
fn negative_attention_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_trace(&tiny_bundle(1, 1, 2, 1), dir.path()).unwrap();
    let path = dir.path().join("decode_attn.f32");
    let mut bytes = fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&(-0.25f32).to_le_bytes());
    fs::write(&path, bytes).unwrap();
    assert!(matches!(
        load_trace(dir.path()),
        Err(Error::InvalidValue { ref tensor, ref index, .. }) if tensor == "decode_attn" && index == &[0, 0, 0, 1]
    ));
}

#[test]
fn two_token_attention_file_is_eight_bytes() {
    let shape = ModelShape::new(1, 1, 2, 1, 0).unwrap();
    let decode = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.25]).unwrap();
    let vnorm = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_trace(&TraceBundle::new(shape, decode, vnorm, None, None).unwrap(), dir.path()).unwrap();
    let bytes = fs::read(dir.path().join("decode_attn.f32")).unwrap();
    assert_eq!(bytes, [0.5f32.to_le_bytes(), 0.25f32.to_le_bytes()].concat());
}

#[test]
fn zero_dimension_shape_is_invalid() {
    assert!(matches!(ModelShape::new(0, 1, 4, 1, 4), Err(Error::InvalidShape(_))));
}
