//! Single-query decode attention over the paged cache.
//!
//! Each query head is rotated with its KV head's key transform, scored
//! against the dequantized rotated keys, and softmax-weighted against the
//! dequantized values. When values were rotated, the weighted sum is mapped
//! back once per head after the contraction.

use crate::cache::{PagedKvCache, SeqId};
use crate::error::{shape_err, Error, Result};
use crate::rotation::RotationSpec;
use crate::tensor::{dot, FloatMatrix, HeadLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRequest {
    /// `num_q_heads × head_dim`.
    pub q: FloatMatrix,
    pub seq: SeqId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// `num_q_heads × head_dim`.
    pub output: FloatMatrix,
    /// Softmax weights, `num_q_heads × seq_len`.
    pub weights: FloatMatrix,
    /// Scaled logits, `num_q_heads × seq_len`.
    pub logits: FloatMatrix,
}

fn check_query(q: &FloatMatrix, layout: &HeadLayout) -> Result<()> {
    if q.rows() != layout.num_q_heads() || q.cols() != layout.head_dim() {
        return Err(shape_err(format!(
            "query is {}x{}, layout wants {}x{}",
            q.rows(),
            q.cols(),
            layout.num_q_heads(),
            layout.head_dim()
        )));
    }
    crate::tensor::check_finite(q.as_slice())
}

/// In-place max-subtracted softmax.
pub fn softmax(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

fn rotated_queries(q: &FloatMatrix, layout: &HeadLayout, spec: &RotationSpec) -> FloatMatrix {
    let mut qr = q.clone();
    for h in 0..layout.num_q_heads() {
        spec.forward_key(layout.kv_head_for(h), qr.row_mut(h));
    }
    qr
}

pub fn decode_step(req: &DecodeRequest, cache: &PagedKvCache) -> Result<FloatMatrix> {
    Ok(decode_step_traced(req, cache)?.output)
}

pub fn decode_step_traced(req: &DecodeRequest, cache: &PagedKvCache) -> Result<DecodeOutput> {
    let layout = cache.layout();
    check_query(&req.q, layout)?;
    let len = cache.seq_len(req.seq)?;
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let spec = cache.spec();
    let (nq, hd) = (layout.num_q_heads(), layout.head_dim());
    let qr = rotated_queries(&req.q, layout, spec);
    let scale = 1.0 / (hd as f64).sqrt();

    let mut logits = FloatMatrix::zeros(nq, len);
    cache.for_each_token(req.seq, |t, k, _| {
        for h in 0..nq {
            let kv = layout.kv_head_for(h);
            logits.set(h, t, dot(qr.row(h), &k[kv * hd..(kv + 1) * hd]) * scale);
        }
    })?;
    let mut weights = logits.clone();
    for h in 0..nq {
        softmax(weights.row_mut(h));
    }
    let mut output = FloatMatrix::zeros(nq, hd);
    cache.for_each_token(req.seq, |t, _, v| {
        for h in 0..nq {
            let kv = layout.kv_head_for(h);
            let w = weights.get(h, t);
            for (o, x) in output.row_mut(h).iter_mut().zip(&v[kv * hd..(kv + 1) * hd]) {
                *o += w * x;
            }
        }
    })?;
    for h in 0..nq {
        spec.inverse_value(layout.kv_head_for(h), output.row_mut(h));
    }
    Ok(DecodeOutput { output, weights, logits })
}

/// Decode over contiguous rotated-space K/V (one token per row, `kv_width` wide).
pub fn decode_step_flat(
    q: &FloatMatrix,
    k_rot: &FloatMatrix,
    v_rot: &FloatMatrix,
    layout: &HeadLayout,
    spec: &RotationSpec,
) -> Result<DecodeOutput> {
    check_query(q, layout)?;
    let qr = rotated_queries(q, layout, spec);
    let mut out = attend(&qr, k_rot, v_rot, layout)?;
    for h in 0..layout.num_q_heads() {
        spec.inverse_value(layout.kv_head_for(h), out.output.row_mut(h));
    }
    Ok(out)
}

/// Full-precision reference over unrotated K/V.
pub fn decode_step_fp(q: &FloatMatrix, k: &FloatMatrix, v: &FloatMatrix, layout: &HeadLayout) -> Result<FloatMatrix> {
    check_query(q, layout)?;
    Ok(attend(q, k, v, layout)?.output)
}

fn attend(q: &FloatMatrix, k: &FloatMatrix, v: &FloatMatrix, layout: &HeadLayout) -> Result<DecodeOutput> {
    let w = layout.kv_width();
    if k.cols() != w || v.cols() != w || k.rows() != v.rows() {
        return Err(shape_err(format!(
            "K is {}x{}, V is {}x{}, expected S x {w}",
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    let len = k.rows();
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let (nq, hd) = (layout.num_q_heads(), layout.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let mut logits = FloatMatrix::zeros(nq, len);
    for t in 0..len {
        for h in 0..nq {
            let kv = layout.kv_head_for(h);
            logits.set(h, t, dot(q.row(h), &k.row(t)[kv * hd..(kv + 1) * hd]) * scale);
        }
    }
    let mut weights = logits.clone();
    for h in 0..nq {
        softmax(weights.row_mut(h));
    }
    let mut output = FloatMatrix::zeros(nq, hd);
    for t in 0..len {
        for h in 0..nq {
            let kv = layout.kv_head_for(h);
            let wt = weights.get(h, t);
            for (o, x) in output.row_mut(h).iter_mut().zip(&v.row(t)[kv * hd..(kv + 1) * hd]) {
                *o += wt * x;
            }
        }
    }
    Ok(DecodeOutput { output, weights, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::Precision;
    use crate::rotation::Targets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> FloatMatrix {
        FloatMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn singleton_and_tied_keys() {
        let layout = HeadLayout::new(2, 1, 4, 4, 4).unwrap();
        let spec = RotationSpec::hadamard(4, 4, Targets::KeysAndValues).unwrap();
        let mut cache = PagedKvCache::new(layout, Precision::Int4, 2, spec).unwrap();
        let s = cache.add_sequence();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = random(2, 4, &mut rng);
        let req = DecodeRequest { q, seq: s };
        assert!(matches!(decode_step(&req, &cache), Err(Error::EmptySequence)));

        let k = [1.0, 2.0, 3.0, 4.0];
        let v = [0.5, -1.0, 2.0, 7.0];
        cache.append_token(s, &k, &v).unwrap();
        let out = decode_step_traced(&req, &cache).unwrap();
        assert_eq!(out.weights.row(0), &[1.0]);
        let mut expect = cache.read_token(s, 0).unwrap().1;
        cache.spec().inverse_value(0, &mut expect);
        assert_eq!(out.output.row(1), expect.as_slice());

        cache.append_token(s, &k, &[0.0; 4]).unwrap();
        let out = decode_step_traced(&req, &cache).unwrap();
        assert_eq!(out.weights.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn fp_reference_matches_double_loop() {
        let layout = HeadLayout::new(4, 2, 8, 8, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (random(4, 8, &mut rng), random(10, 16, &mut rng), random(10, 16, &mut rng));
        let out = decode_step_fp(&q, &k, &v, &layout).unwrap();
        for h in 0..4 {
            let kv = h / 2;
            let logits: Vec<f64> = (0..10)
                .map(|t| (0..8).map(|i| q.get(h, i) * k.get(t, kv * 8 + i)).sum::<f64>() / 8f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for i in 0..8 {
                let o: f64 = (0..10).map(|t| logits[t].exp() / z * v.get(t, kv * 8 + i)).sum();
                assert!((o - out.get(h, i)).abs() < 1e-10);
            }
        }
        let zero = FloatMatrix::zeros(10, 16);
        assert_eq!(decode_step_fp(&q, &k, &zero, &layout).unwrap(), FloatMatrix::zeros(4, 8));
    }

    #[test]
    fn post_contraction_inverse_equals_per_token_inverse() {
        let layout = HeadLayout::new(2, 1, 8, 4, 16).unwrap();
        let spec = RotationSpec::hadamard(8, 4, Targets::KeysAndValues).unwrap().with_random_signs(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cache = PagedKvCache::new(layout, Precision::Int4, 4, spec.clone()).unwrap();
        let s = cache.add_sequence();
        for _ in 0..20 {
            let (k, v) = (random(1, 8, &mut rng), random(1, 8, &mut rng));
            cache.append_token(s, k.row(0), v.row(0)).unwrap();
        }
        let q = random(2, 8, &mut rng);
        let out = decode_step_traced(&DecodeRequest { q, seq: s }, &cache).unwrap();
        for h in 0..2 {
            let mut acc = [0.0; 8];
            for t in 0..20 {
                let mut v = cache.read_token(s, t).unwrap().1;
                spec.inverse_value(0, &mut v);
                for (a, x) in acc.iter_mut().zip(&v) {
                    *a += out.weights.get(h, t) * x;
                }
            }
            for (a, b) in acc.iter().zip(out.output.row(h)) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((out.weights.row(h).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
