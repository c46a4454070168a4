//! Orthogonal transforms applied to K (and optionally V) before quantization.
//!
//! A [`RotationSpec`] composes, in row-vector convention,
//!
//! ```text
//! T = diag(signs) · diag(H_h, ..., H_h) · R
//! ```
//!
//! where the sign flips and learned rotation `R` are optional. Keys always
//! use the full `T`. Values use `diag(signs) · H_blk` when the spec targets
//! both K and V, plus `R` only when learned rotation is enabled for values.
//!
//! Learned rotations come from query second moments: `M = (1/N) Σ q qᵀ`,
//! damped as `M + α·mean(diag M)·I`, eigendecomposed, with eigenvectors
//! sorted by descending eigenvalue and sign-canonicalized.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::symmetric_eigen;
use crate::seeds;
use crate::tensor::{fwht_blocks, FloatMatrix, HeadLayout};

/// Default damping strength for learned rotations.
pub const DEFAULT_ALPHA: f64 = 0.01;

const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    KeysOnly,
    KeysAndValues,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationSpec {
    head_dim: usize,
    order: usize,
    signs: Option<Vec<f64>>,
    /// One shared matrix, or one per KV head.
    learned: Option<Vec<FloatMatrix>>,
    learned_values: bool,
    targets: Targets,
}

impl RotationSpec {
    /// No rotation at all: plain token-wise INT4.
    pub fn identity(head_dim: usize) -> Self {
        Self {
            head_dim,
            order: 1,
            signs: None,
            learned: None,
            learned_values: false,
            targets: Targets::KeysAndValues,
        }
    }

    /// Block-diagonal Hadamard of the given order.
    pub fn hadamard(head_dim: usize, order: usize, targets: Targets) -> Result<Self> {
        if !order.is_power_of_two() {
            return Err(Error::InvalidOrder(order));
        }
        if order > head_dim || !head_dim.is_multiple_of(order) {
            return Err(shape_err(format!("order {order} does not divide head_dim {head_dim}")));
        }
        Ok(Self { order, targets, ..Self::identity(head_dim) })
    }

    pub fn with_signs(mut self, signs: Vec<f64>) -> Result<Self> {
        if signs.len() != self.head_dim {
            return Err(shape_err(format!(
                "{} signs for head_dim {}",
                signs.len(),
                self.head_dim
            )));
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(shape_err("sign entries must be ±1"));
        }
        self.signs = Some(signs);
        Ok(self)
    }

    /// Seeded per-block ±1 flips. Each sign is a pure function of
    /// `(seed, layer, block, position)`.
    pub fn with_random_signs(self, seed: u64, layer: usize) -> Self {
        let order = self.order.max(1);
        let signs = (0..self.head_dim)
            .map(|i| {
                let block = (i / order) as u64;
                let key = seeds::derive(seed, "signs", ((layer as u64) << 32) | block);
                let bits = seeds::splitmix64(key.wrapping_add((i % order) as u64));
                if bits >> 63 == 0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        self.with_signs(signs).expect("generated signs match head_dim")
    }

    pub fn with_learned(mut self, learned: Vec<FloatMatrix>) -> Result<Self> {
        if learned.is_empty() {
            return Err(shape_err("learned rotation list is empty"));
        }
        for r in &learned {
            if r.rows() != self.head_dim || r.cols() != self.head_dim {
                return Err(shape_err(format!(
                    "learned rotation is {}x{}, head_dim is {}",
                    r.rows(),
                    r.cols(),
                    self.head_dim
                )));
            }
            let err = r.orthogonality_error();
            if err > ORTHO_TOL {
                return Err(shape_err(format!("learned rotation is not orthogonal (defect {err:e})")));
            }
        }
        self.learned = Some(learned);
        Ok(self)
    }

    /// Also apply the learned rotation on the value branch.
    pub fn with_learned_values(mut self, enabled: bool) -> Self {
        self.learned_values = enabled;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn signs(&self) -> Option<&[f64]> {
        self.signs.as_deref()
    }

    pub fn learned(&self) -> Option<&[FloatMatrix]> {
        self.learned.as_deref()
    }

    pub fn learned_values(&self) -> bool {
        self.learned_values
    }

    pub fn targets(&self) -> Targets {
        self.targets
    }

    pub fn rotates_values(&self) -> bool {
        self.targets == Targets::KeysAndValues
    }

    pub fn is_identity(&self) -> bool {
        self.order == 1 && self.signs.is_none() && self.learned.is_none()
    }

    /// Check that this spec fits `layout`.
    pub fn check_layout(&self, layout: &HeadLayout) -> Result<()> {
        if self.head_dim != layout.head_dim() {
            return Err(shape_err(format!(
                "rotation built for head_dim {}, layout has {}",
                self.head_dim,
                layout.head_dim()
            )));
        }
        if let Some(l) = &self.learned {
            if l.len() != 1 && l.len() != layout.num_kv_heads() {
                return Err(shape_err(format!(
                    "{} learned rotations for {} KV heads",
                    l.len(),
                    layout.num_kv_heads()
                )));
            }
        }
        Ok(())
    }

    fn learned_for(&self, kv_head: usize) -> Option<&FloatMatrix> {
        self.learned.as_ref().map(|l| if l.len() == 1 { &l[0] } else { &l[kv_head] })
    }

    fn forward_base(&self, x: &mut [f64]) {
        if let Some(signs) = &self.signs {
            x.iter_mut().zip(signs).for_each(|(v, s)| *v *= s);
        }
        fwht_blocks(x, self.order);
    }

    fn inverse_base(&self, x: &mut [f64]) {
        fwht_blocks(x, self.order);
        if let Some(signs) = &self.signs {
            x.iter_mut().zip(signs).for_each(|(v, s)| *v *= s);
        }
    }

    fn apply_learned(r: &FloatMatrix, x: &mut [f64], transpose: bool) {
        let mut tmp = vec![0.0; x.len()];
        if transpose {
            // x · Rᵀ: out_i = Σ_j x_j R_ij
            for (o, row) in tmp.iter_mut().zip(r.iter_rows()) {
                *o = crate::tensor::dot(row, x);
            }
        } else {
            r.vec_mul(x, &mut tmp);
        }
        x.copy_from_slice(&tmp);
    }

    /// `x ← x · T` for a key (or query) head vector.
    pub fn forward_key(&self, kv_head: usize, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.head_dim);
        self.forward_base(x);
        if let Some(r) = self.learned_for(kv_head) {
            Self::apply_learned(r, x, false);
        }
    }

    /// `x ← x · Tᵀ`, undoing [`forward_key`](Self::forward_key).
    pub fn inverse_key(&self, kv_head: usize, x: &mut [f64]) {
        if let Some(r) = self.learned_for(kv_head) {
            Self::apply_learned(r, x, true);
        }
        self.inverse_base(x);
    }

    pub fn forward_value(&self, kv_head: usize, x: &mut [f64]) {
        if !self.rotates_values() {
            return;
        }
        self.forward_base(x);
        if self.learned_values {
            if let Some(r) = self.learned_for(kv_head) {
                Self::apply_learned(r, x, false);
            }
        }
    }

    pub fn inverse_value(&self, kv_head: usize, x: &mut [f64]) {
        if !self.rotates_values() {
            return;
        }
        if self.learned_values {
            if let Some(r) = self.learned_for(kv_head) {
                Self::apply_learned(r, x, true);
            }
        }
        self.inverse_base(x);
    }

    /// The same spec without sign flips or learned part.
    pub fn block_hadamard_only(&self) -> Self {
        Self { signs: None, learned: None, learned_values: false, ..self.clone() }
    }

    /// The spec with its learned part removed, keeping signs.
    pub fn without_learned(&self) -> Self {
        Self { learned: None, learned_values: false, ..self.clone() }
    }
}

/// Dense key-side transform `diag(signs) · H_blk · R` for KV head 0.
pub fn compose_transform(spec: &RotationSpec, layout: &HeadLayout) -> Result<FloatMatrix> {
    compose_transform_for(spec, layout, 0)
}

pub fn compose_transform_for(
    spec: &RotationSpec,
    layout: &HeadLayout,
    kv_head: usize,
) -> Result<FloatMatrix> {
    spec.check_layout(layout)?;
    if kv_head >= layout.num_kv_heads() {
        return Err(Error::Index { index: kv_head, len: layout.num_kv_heads() });
    }
    let n = spec.head_dim();
    let mut t = FloatMatrix::identity(n);
    // Row i of T is e_i · T.
    for i in 0..n {
        spec.forward_key(kv_head, t.row_mut(i));
    }
    Ok(t)
}

/// Running uncentered second moment of calibration queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment {
    sum_outer: FloatMatrix,
    count: usize,
}

impl SecondMoment {
    pub fn new(dim: usize) -> Self {
        Self { sum_outer: FloatMatrix::zeros(dim, dim), count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.sum_outer.rows()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sum_outer(&self) -> &FloatMatrix {
        &self.sum_outer
    }

    pub fn accumulate(&mut self, q: &[f64]) -> Result<()> {
        let d = self.dim();
        if q.len() != d {
            return Err(shape_err(format!("query of length {} for a {d}-dim moment", q.len())));
        }
        crate::tensor::check_finite(q)?;
        for (i, &qi) in q.iter().enumerate() {
            if qi == 0.0 {
                continue;
            }
            for (s, &qj) in self.sum_outer.row_mut(i).iter_mut().zip(q) {
                *s += qi * qj;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// `M = sum_outer / count`.
    pub fn matrix(&self) -> Result<FloatMatrix> {
        if self.count == 0 {
            return Err(Error::EmptyCalibration);
        }
        let n = self.count as f64;
        let d = self.dim();
        FloatMatrix::new(d, d, self.sum_outer.as_slice().iter().map(|v| v / n).collect())
    }
}

/// `M + α · mean(diag M) · I`.
pub fn damp(m: &FloatMatrix, alpha: f64) -> FloatMatrix {
    let d = m.rows();
    let mean_diag = (0..d).map(|i| m.get(i, i)).sum::<f64>() / d as f64;
    let mut out = m.clone();
    for i in 0..d {
        out.set(i, i, m.get(i, i) + alpha * mean_diag);
    }
    out
}

/// Eigenbasis of the damped second moment, columns by descending eigenvalue,
/// each column flipped so its largest-magnitude entry (lowest index on ties)
/// is positive.
pub fn learn_rotation(acc: &SecondMoment, alpha: f64) -> Result<FloatMatrix> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(shape_err(format!("damping alpha must be a finite non-negative number, got {alpha}")));
    }
    let damped = damp(&acc.matrix()?, alpha);
    let (values, vectors) = symmetric_eigen(&damped)?;
    let d = values.len();
    let mut order: Vec<usize> = (0..d).collect();
    // stable: equal eigenvalues keep the solver's order
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let mut r = FloatMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        let col: Vec<f64> = (0..d).map(|i| vectors.get(i, src)).collect();
        let mut pivot = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, v) in col.iter().enumerate() {
            r.set(i, dst, sign * v);
        }
    }
    Ok(r)
}

/// Query-weighted key error `δkᵀ M δk`.
pub fn score_weighted_error(delta_k: &[f64], m: &FloatMatrix) -> Result<f64> {
    let d = delta_k.len();
    if m.rows() != d || m.cols() != d {
        return Err(shape_err(format!(
            "error of length {d} against a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let total: f64 = m
        .iter_rows()
        .zip(delta_k)
        .map(|(row, &di)| di * crate::tensor::dot(row, delta_k))
        .sum();
    Ok(total.max(0.0))
}

/// How calibration queries are grouped into second moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// All query heads of a layer share one moment.
    #[default]
    Global,
    /// Query heads are pooled with the other heads of their KV group.
    PerKvHead,
}

/// Second moments of calibration queries, measured after the fixed part of
/// `base` (signs and block Hadamard) so the learned basis lives in the space
/// where it will be applied.
///
/// `queries` holds one token per row of width `num_q_heads * head_dim`.
pub fn query_moments(
    queries: &FloatMatrix,
    layout: &HeadLayout,
    base: &RotationSpec,
    pooling: Pooling,
) -> Result<Vec<SecondMoment>> {
    base.check_layout(layout)?;
    if queries.cols() != layout.q_width() {
        return Err(shape_err(format!(
            "query rows have width {}, expected {}",
            queries.cols(),
            layout.q_width()
        )));
    }
    let hd = layout.head_dim();
    let groups = match pooling {
        Pooling::Global => 1,
        Pooling::PerKvHead => layout.num_kv_heads(),
    };
    let fixed = base.without_learned();
    let mut moments = vec![SecondMoment::new(hd); groups];
    let mut buf = vec![0.0; hd];
    for row in queries.iter_rows() {
        for (qh, q) in row.chunks_exact(hd).enumerate() {
            let kv = layout.kv_head_for(qh);
            buf.copy_from_slice(q);
            fixed.forward_key(kv, &mut buf);
            let slot = if groups == 1 { 0 } else { kv };
            moments[slot].accumulate(&buf)?;
        }
    }
    Ok(moments)
}

/// Hessian-aware rotation: `base` composed with learned per-layer (or per
/// KV head) eigenbases from calibration queries.
pub fn hessian_rotation(
    queries: &FloatMatrix,
    layout: &HeadLayout,
    base: &RotationSpec,
    pooling: Pooling,
    alpha: f64,
) -> Result<RotationSpec> {
    let moments = query_moments(queries, layout, base, pooling)?;
    let learned = moments
        .iter()
        .map(|m| learn_rotation(m, alpha))
        .collect::<Result<Vec<_>>>()?;
    base.without_learned().with_learned(learned)
}
