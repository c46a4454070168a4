//! Residual vector quantization: a k-means codebook picks the nearest
//! centroid, and the residual `x - c` is coded with token-wise INT4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::int4::{dequantize_into, quantize_head, PackedNibbles, QuantParams};
use crate::tensor::{check_finite, FloatMatrix};

const DUPLICATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    Key,
    Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: FloatMatrix,
    kind: CodebookKind,
}

impl Codebook {
    pub fn new(centroids: FloatMatrix, kind: CodebookKind) -> Result<Self> {
        if centroids.rows() == 0 || centroids.cols() == 0 {
            return Err(shape_err("codebook needs at least one non-empty centroid"));
        }
        for i in 0..centroids.rows() {
            for j in 0..i {
                let d = sq_dist(centroids.row(i), centroids.row(j));
                if d <= DUPLICATE_TOL * DUPLICATE_TOL {
                    return Err(shape_err(format!("centroids {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { centroids, kind })
    }

    pub fn centroids(&self) -> &FloatMatrix {
        &self.centroids
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.centroids.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroid(&self, id: usize) -> Result<&[f64]> {
        if id >= self.len() {
            return Err(Error::Index { index: id, len: self.len() });
        }
        Ok(self.centroids.row(id))
    }

    /// Nearest centroid and its squared distance; ties go to the lowest id.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        nearest(&self.centroids, x)
    }

    pub fn encode(&self, x: &[f64]) -> Result<VqCode> {
        if x.len() != self.dim() {
            return Err(shape_err(format!(
                "vector of length {} for a {}-dim codebook",
                x.len(),
                self.dim()
            )));
        }
        check_finite(x)?;
        let (id, _) = self.nearest(x);
        let residual: Vec<f64> = x.iter().zip(self.centroids.row(id)).map(|(a, c)| a - c).collect();
        let (packed, params) = quantize_head(&residual)?;
        Ok(VqCode { centroid_id: id as u32, residual: packed, params })
    }

    pub fn decode(&self, code: &VqCode) -> Result<Vec<f64>> {
        let c = self.centroid(code.centroid_id as usize)?;
        if code.residual.logical_len() != c.len() {
            return Err(shape_err(format!(
                "residual of length {} for a {}-dim codebook",
                code.residual.logical_len(),
                c.len()
            )));
        }
        let mut out = vec![0.0; c.len()];
        dequantize_into(code.residual.bytes(), &code.params, &mut out);
        out.iter_mut().zip(c).for_each(|(o, ci)| *o += ci);
        Ok(out)
    }
}

/// Centroid id plus INT4-coded residual.
#[derive(Debug, Clone, PartialEq)]
pub struct VqCode {
    pub centroid_id: u32,
    pub residual: PackedNibbles,
    pub params: QuantParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeans {
    pub clusters: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl KMeans {
    pub fn new(clusters: usize, seed: u64) -> Self {
        Self { clusters, max_iters: 100, seed }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Within-cluster SSE after each assignment step, then after the final update.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub assignments: Vec<usize>,
}

pub fn fit_codebook(samples: &FloatMatrix, clusters: usize, seed: u64, kind: CodebookKind) -> Result<Codebook> {
    Ok(KMeans::new(clusters, seed).fit(samples, kind)?.codebook)
}

impl KMeans {
    /// k-means++ seeding then Lloyd iterations until assignments stop changing.
    pub fn fit(&self, samples: &FloatMatrix, kind: CodebookKind) -> Result<KMeansFit> {
        let n = samples.rows();
        let k = self.clusters;
        if k == 0 {
            return Err(shape_err("cluster count must be positive"));
        }
        if n < k {
            return Err(Error::TooFewSamples { rows: n, clusters: k });
        }
        check_finite(samples.as_slice())?;
        let d = samples.cols();
        let mut centroids = self.seed_centroids(samples)?;

        let mut assign = vec![usize::MAX; n];
        let mut sse_history = Vec::new();
        let mut iterations = 0;
        loop {
            let fresh: Vec<(usize, f64)> = (0..n)
                .into_par_iter()
                .map(|i| nearest(&centroids, samples.row(i)))
                .collect();
            let changed = fresh.iter().zip(&assign).any(|((c, _), a)| c != a);
            for (a, (c, _)) in assign.iter_mut().zip(&fresh) {
                *a = *c;
            }
            let mut dist: Vec<f64> = fresh.iter().map(|(_, d)| *d).collect();
            sse_history.push(dist.iter().sum());
            if !changed || iterations >= self.max_iters {
                break;
            }
            iterations += 1;

            let mut sums = FloatMatrix::zeros(k, d);
            let mut counts = vec![0usize; k];
            for (i, &c) in assign.iter().enumerate() {
                counts[c] += 1;
                for (s, x) in sums.row_mut(c).iter_mut().zip(samples.row(i)) {
                    *s += x;
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    // move the worst-served sample into the empty cluster
                    let far = argmax(&dist);
                    let old = assign[far];
                    counts[old] -= 1;
                    for (s, x) in sums.row_mut(old).iter_mut().zip(samples.row(far)) {
                        *s -= x;
                    }
                    sums.row_mut(c).copy_from_slice(samples.row(far));
                    counts[c] = 1;
                    assign[far] = c;
                    dist[far] = 0.0;
                }
            }
            for (c, &n) in counts.iter().enumerate() {
                let inv = 1.0 / n as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        let codebook = Codebook::new(centroids, kind)?;
        Ok(KMeansFit { codebook, sse_history, iterations, assignments: assign })
    }

    fn seed_centroids(&self, samples: &FloatMatrix) -> Result<FloatMatrix> {
        let n = samples.rows();
        let k = self.clusters;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut chosen = vec![rng.gen_range(0..n)];
        let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(samples.row(i), samples.row(chosen[0]))).collect();
        while chosen.len() < k {
            let total: f64 = dist.iter().sum();
            if total <= 0.0 {
                return Err(Error::TooFewSamples { rows: n, clusters: k });
            }
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n;
            for (i, &w) in dist.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = i;
                if target < w {
                    break;
                }
                target -= w;
            }
            chosen.push(pick);
            for (i, di) in dist.iter_mut().enumerate() {
                *di = di.min(sq_dist(samples.row(i), samples.row(pick)));
            }
        }
        let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| samples.row(i).to_vec()).collect();
        FloatMatrix::from_rows(&rows)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &FloatMatrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
