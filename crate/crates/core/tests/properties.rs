use int4kv::attention::{decode_step, decode_step_flat, DecodeRequest};
use int4kv::cache::{capacity_tokens, PagedKvCache, Precision};
use int4kv::int4::{dequantize_head, pack, packed_len, quantize_head, unpack, PackedNibbles, QuantParams};
use int4kv::rotation::{compose_transform_for, RotationSpec, Targets};
use int4kv::tensor::{fwht_blocks, make_hadamard};
use int4kv::vq::{CodebookKind, KMeans};
use int4kv::{FloatMatrix, HeadLayout};
use proptest::prelude::*;

fn finite(span: f64) -> impl Strategy<Value = f64> {
    -span..span
}

fn pow2_upto(max_log: u32) -> impl Strategy<Value = usize> {
    (0..=max_log).prop_map(|e| 1usize << e)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pack_unpack_bijective(nibbles in prop::collection::vec(0u8..16, 0..300)) {
        let bytes = pack(&nibbles).unwrap();
        prop_assert_eq!(bytes.len(), packed_len(nibbles.len()));
        prop_assert_eq!(unpack(&bytes, nibbles.len()).unwrap(), nibbles.clone());
        let p = PackedNibbles::from_nibbles(&nibbles).unwrap();
        prop_assert_eq!(p.nibbles(), nibbles);
    }

    #[test]
    fn roundtrip_within_half_step(x in prop::collection::vec(finite(1e4), 1..257)) {
        let (packed, params) = quantize_head(&x).unwrap();
        let back = dequantize_head(&packed, &params);
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= params.half_step() + 1e-9, "{a} vs {b}, s={}", params.scale);
        }
    }

    #[test]
    fn extremes_hit_the_ends_of_the_grid(x in prop::collection::vec(finite(100.0), 2..64)) {
        let (packed, params) = quantize_head(&x).unwrap();
        let codes = packed.nibbles();
        prop_assert!(codes.iter().all(|&c| c <= 15));
        if !params.is_constant() {
            let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(params.value(0) <= lo + params.half_step() + 1e-9);
            prop_assert!(params.value(15) >= hi - params.half_step() - 1e-9);
        }
    }

    #[test]
    fn sidecar_roundtrips(min in finite(1e3), width in 0.0f64..1e3) {
        let p = QuantParams::from_range(min, min + width).unwrap();
        let mut buf = Vec::new();
        p.write_le(&mut buf);
        prop_assert_eq!(QuantParams::read_le(&buf).unwrap(), p);
    }

    #[test]
    fn fwht_is_an_involution(log in 0u32..8, seed in any::<u64>()) {
        let order = 1usize << log;
        let x: Vec<f64> = (0..128).map(|i| ((seed.wrapping_mul(31).wrapping_add(i)) % 97) as f64 - 48.0).collect();
        let mut y = x.clone();
        fwht_blocks(&mut y, order);
        fwht_blocks(&mut y, order);
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_preserves_inner_products(
        order in pow2_upto(6),
        signed in any::<bool>(),
        q in prop::collection::vec(finite(10.0), 64),
        k in prop::collection::vec(finite(10.0), 64),
    ) {
        let mut spec = RotationSpec::hadamard(64, order, Targets::KeysAndValues).unwrap();
        if signed {
            spec = spec.with_random_signs(7, 0);
        }
        let (mut qr, mut kr) = (q.clone(), k.clone());
        spec.forward_key(0, &mut qr);
        spec.forward_key(0, &mut kr);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        prop_assert!((dot(&qr, &kr) - dot(&q, &k)).abs() <= 1e-9 * (1.0 + dot(&q, &q).sqrt() * dot(&k, &k).sqrt()));
        spec.inverse_key(0, &mut kr);
        for (a, b) in k.iter().zip(&kr) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fast_transform_matches_dense_matrix(order in pow2_upto(5), x in prop::collection::vec(finite(5.0), 32)) {
        let layout = HeadLayout::new(2, 1, 32, order, 16).unwrap();
        let spec = RotationSpec::hadamard(32, order, Targets::KeysOnly).unwrap().with_random_signs(3, 1);
        let t = compose_transform_for(&spec, &layout, 0).unwrap();
        prop_assert!(t.orthogonality_error() < 1e-12);
        let mut dense = vec![0.0; 32];
        t.vec_mul(&x, &mut dense);
        let mut fast = x.clone();
        spec.forward_key(0, &mut fast);
        for (a, b) in fast.iter().zip(&dense) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn capacity_ratio_is_exactly_four(budget in any::<u32>(), log_hd in 2u32..8, nkv in 1usize..9) {
        let hd = 1usize << log_hd;
        let layout = HeadLayout::new(nkv, nkv, hd, hd, 16).unwrap();
        let b = budget as u64 * 7;
        prop_assert_eq!(capacity_tokens(&layout, Precision::Int4, b), 4 * capacity_tokens(&layout, Precision::Bf16, b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_and_unfused_writes_agree(
        seed in any::<u64>(),
        bf16 in any::<bool>(),
        schedule in prop::collection::vec(0usize..3, 1..80),
    ) {
        let layout = HeadLayout::new(4, 2, 16, 8, 4).unwrap();
        let precision = if bf16 { Precision::Bf16 } else { Precision::Int4 };
        let spec = RotationSpec::hadamard(16, 8, Targets::KeysAndValues).unwrap().with_random_signs(seed, 0);
        let mut a = PagedKvCache::new(layout, precision, 64, spec.clone()).unwrap();
        let mut b = PagedKvCache::new(layout, precision, 64, spec).unwrap();
        let seqs: Vec<_> = (0..3).map(|_| (a.add_sequence(), b.add_sequence())).collect();
        for (i, &s) in schedule.iter().enumerate() {
            let k: Vec<f64> = (0..32).map(|j| ((seed as f64 + i as f64 * 1.7 + j as f64 * 0.3).sin()) * 9.0).collect();
            let v: Vec<f64> = k.iter().rev().map(|x| x * 0.5 - 1.0).collect();
            a.append_token(seqs[s].0, &k, &v).unwrap();
            b.append_token_unfused(seqs[s].1, &k, &v).unwrap();
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.dump(&mut x).unwrap();
        b.dump(&mut y).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn paged_decode_matches_flat(
        len in 1usize..70,
        page_tokens in prop::sample::select(vec![1usize, 3, 4, 16]),
        data in prop::collection::vec(finite(4.0), 70 * 32 * 2 + 8 * 16),
    ) {
        let layout = HeadLayout::new(8, 2, 16, 16, page_tokens).unwrap();
        let spec = RotationSpec::hadamard(16, 16, Targets::KeysAndValues).unwrap();
        let mut cache = PagedKvCache::new(layout, Precision::Int4, 70usize.div_ceil(page_tokens) + 1, spec.clone()).unwrap();
        let s = cache.add_sequence();
        for t in 0..len {
            let base = t * 64;
            cache.append_token(s, &data[base..base + 32], &data[base + 32..base + 64]).unwrap();
        }
        let q = FloatMatrix::new(8, 16, data[data.len() - 128..].to_vec()).unwrap();
        let paged = decode_step(&DecodeRequest { q: q.clone(), seq: s }, &cache).unwrap();
        let (k, v) = cache.flat_copy(s).unwrap();
        let flat = decode_step_flat(&q, &k, &v, &layout, &spec).unwrap().output;
        prop_assert!(paged.max_abs_diff(&flat) <= 1e-10);
    }

    #[test]
    fn lloyd_sse_never_increases(seed in any::<u64>(), clusters in 1usize..6, rows in 6usize..40) {
        let data: Vec<f64> = (0..rows * 3).map(|i| ((seed % 1000) as f64 * 0.37 + i as f64 * 1.3).sin() * 5.0).collect();
        let samples = FloatMatrix::new(rows, 3, data).unwrap();
        let fit = KMeans::new(clusters, seed).fit(&samples, CodebookKind::Key).unwrap();
        for w in fit.sse_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", fit.sse_history);
        }
    }
}

#[test]
fn dense_hadamard_is_orthonormal_and_symmetric() {
    for order in [1, 2, 4, 8, 16, 32, 64, 128] {
        let h = make_hadamard(order).unwrap();
        assert!(h.entries().orthogonality_error() < 1e-12);
        assert!(h.entries().is_symmetric(0.0));
    }
}
