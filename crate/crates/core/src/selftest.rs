//! Oracle equivalence checks bundled for the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{decode_step, decode_step_flat, DecodeRequest};
use crate::cache::{PagedKvCache, Precision};
use crate::error::Result;
use crate::int4::{dequantize_head, quantize_head};
use crate::rotation::{RotationSpec, Targets};
use crate::tensor::{fwht_blocks, make_hadamard, FloatMatrix, HeadLayout};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        fast_vs_dense_hadamard(seed)?,
        int4_roundtrip_bound(seed)?,
        fused_vs_unfused(seed)?,
        paged_vs_flat(seed)?,
    ])
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, span: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-span..span)).collect()
}

pub fn fast_vs_dense_hadamard(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 128;
    let mut worst: f64 = 0.0;
    for order in [1, 2, 4, 8, 16, 32, 64, 128] {
        let h = make_hadamard(order)?;
        for _ in 0..20 {
            let x = uniform(&mut rng, dim, 10.0);
            let mut fast = x.clone();
            fwht_blocks(&mut fast, order);
            for (b, block) in x.chunks_exact(order).enumerate() {
                let mut dense = vec![0.0; order];
                h.entries().vec_mul(block, &mut dense);
                for (a, d) in fast[b * order..(b + 1) * order].iter().zip(&dense) {
                    worst = worst.max((a - d).abs());
                }
            }
        }
    }
    Ok(Check { name: "fast_hadamard_vs_dense", passed: worst <= 1e-12, detail: format!("max abs diff {worst:e}") })
}

pub fn int4_roundtrip_bound(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let mut violations = 0;
    for _ in 0..1000 {
        let x = uniform(&mut rng, 128, 50.0);
        let (packed, params) = quantize_head(&x)?;
        let back = dequantize_head(&packed, &params);
        violations += x.iter().zip(&back).filter(|(a, b)| (*a - *b).abs() > params.half_step() + 1e-9).count();
    }
    Ok(Check { name: "int4_half_step_bound", passed: violations == 0, detail: format!("{violations} elements outside s/2") })
}

pub fn fused_vs_unfused(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let layout = HeadLayout::new(8, 4, 64, 16, 16)?;
    let spec = RotationSpec::hadamard(64, 16, Targets::KeysAndValues)?.with_random_signs(seed, 0);
    let mut mismatches = 0;
    for precision in [Precision::Int4, Precision::Bf16] {
        let mut fused = PagedKvCache::new(layout, precision, 16, spec.clone())?;
        let mut twopass = PagedKvCache::new(layout, precision, 16, spec.clone())?;
        let seqs: Vec<_> = (0..3).map(|_| (fused.add_sequence(), twopass.add_sequence())).collect();
        for i in 0..200 {
            let (a, b) = seqs[i % 3];
            let k = uniform(&mut rng, layout.kv_width(), 5.0);
            let v = uniform(&mut rng, layout.kv_width(), 5.0);
            fused.append_token(a, &k, &v)?;
            twopass.append_token_unfused(b, &k, &v)?;
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        fused.dump(&mut x)?;
        twopass.dump(&mut y)?;
        mismatches += x.iter().zip(&y).filter(|(p, q)| p != q).count() + x.len().abs_diff(y.len());
    }
    Ok(Check { name: "fused_vs_unfused_write", passed: mismatches == 0, detail: format!("{mismatches} differing bytes") })
}

pub fn paged_vs_flat(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let layout = HeadLayout::new(8, 2, 32, 32, 16)?;
    let spec = RotationSpec::hadamard(32, 8, Targets::KeysAndValues)?;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut cache = PagedKvCache::new(layout, Precision::Int4, 8, spec.clone())?;
        let s = cache.add_sequence();
        for _ in 0..rng.gen_range(1..=100) {
            cache.append_token(s, &uniform(&mut rng, 64, 3.0), &uniform(&mut rng, 64, 3.0))?;
        }
        let q = FloatMatrix::new(8, 32, uniform(&mut rng, 256, 2.0))?;
        let paged = decode_step(&DecodeRequest { q: q.clone(), seq: s }, &cache)?;
        let (k, v) = cache.flat_copy(s)?;
        let flat = decode_step_flat(&q, &k, &v, &layout, &spec)?.output;
        worst = worst.max(paged.max_abs_diff(&flat));
    }
    Ok(Check { name: "paged_vs_flat_decode", passed: worst <= 1e-10, detail: format!("max abs diff {worst:e}") })
}
