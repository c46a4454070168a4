//! Head layout, dense row-major matrices and Hadamard construction.
//!
//! Everything downstream works on `f64`. Head vectors are rows; a token's
//! keys for all KV heads are `num_kv_heads` consecutive rows of `head_dim`
//! (or one row of `num_kv_heads * head_dim` when stored flat).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rotation::RotationSpec;

/// Dimensional configuration of one attention layer's KV cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutFields", into = "LayoutFields")]
pub struct HeadLayout {
    num_q_heads: usize,
    num_kv_heads: usize,
    head_dim: usize,
    rot_order: usize,
    page_tokens: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFields {
    num_q_heads: usize,
    num_kv_heads: usize,
    head_dim: usize,
    rot_order: usize,
    #[serde(default = "default_page_tokens")]
    page_tokens: usize,
}

fn default_page_tokens() -> usize {
    HeadLayout::DEFAULT_PAGE_TOKENS
}

impl TryFrom<LayoutFields> for HeadLayout {
    type Error = Error;
    fn try_from(f: LayoutFields) -> Result<Self> {
        HeadLayout::new(f.num_q_heads, f.num_kv_heads, f.head_dim, f.rot_order, f.page_tokens)
    }
}

impl From<HeadLayout> for LayoutFields {
    fn from(l: HeadLayout) -> Self {
        LayoutFields {
            num_q_heads: l.num_q_heads,
            num_kv_heads: l.num_kv_heads,
            head_dim: l.head_dim,
            rot_order: l.rot_order,
            page_tokens: l.page_tokens,
        }
    }
}

impl HeadLayout {
    pub const DEFAULT_PAGE_TOKENS: usize = 16;

    pub fn new(
        num_q_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
        rot_order: usize,
        page_tokens: usize,
    ) -> Result<Self> {
        if num_kv_heads == 0 || num_q_heads == 0 || !num_q_heads.is_multiple_of(num_kv_heads) {
            return Err(Error::InvalidLayout(format!(
                "num_q_heads ({num_q_heads}) must be a positive multiple of num_kv_heads ({num_kv_heads})"
            )));
        }
        // Packing needs an even head_dim and block rotation needs a power of two.
        if head_dim < 2 || !head_dim.is_power_of_two() {
            return Err(Error::InvalidLayout(format!(
                "head_dim {head_dim} must be an even power of two"
            )));
        }
        if !rot_order.is_power_of_two() || rot_order > head_dim {
            return Err(Error::InvalidLayout(format!(
                "rot_order {rot_order} must be a power of two dividing head_dim {head_dim}"
            )));
        }
        if page_tokens == 0 {
            return Err(Error::InvalidLayout("page_tokens must be at least 1".into()));
        }
        Ok(Self { num_q_heads, num_kv_heads, head_dim, rot_order, page_tokens })
    }

    pub fn num_q_heads(&self) -> usize {
        self.num_q_heads
    }

    pub fn num_kv_heads(&self) -> usize {
        self.num_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn rot_order(&self) -> usize {
        self.rot_order
    }

    pub fn page_tokens(&self) -> usize {
        self.page_tokens
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    /// GQA mapping from a query head to the KV head it reads.
    pub fn kv_head_for(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    /// Width of one token's keys (or values) across all KV heads.
    pub fn kv_width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn q_width(&self) -> usize {
        self.num_q_heads * self.head_dim
    }

    pub fn with_rot_order(self, rot_order: usize) -> Result<Self> {
        Self::new(self.num_q_heads, self.num_kv_heads, self.head_dim, rot_order, self.page_tokens)
    }

    pub fn with_page_tokens(self, page_tokens: usize) -> Result<Self> {
        Self::new(self.num_q_heads, self.num_kv_heads, self.head_dim, self.rot_order, page_tokens)
    }
}

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixFields", into = "MatrixFields")]
pub struct FloatMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFields {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixFields> for FloatMatrix {
    type Error = Error;

    fn try_from(m: MatrixFields) -> Result<Self> {
        Self::new(m.rows, m.cols, m.data)
    }
}

impl From<FloatMatrix> for MatrixFields {
    fn from(m: FloatMatrix) -> Self {
        Self { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl FloatMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; an empty-column matrix has no data anyway.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &FloatMatrix) -> Result<FloatMatrix> {
        if self.cols != rhs.rows {
            return Err(shape_err(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let lhs_row = self.row(r);
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row vector times matrix: `out_j = sum_i x_i m_ij`.
    pub fn vec_mul(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += xi * m;
            }
        }
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &FloatMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|r| (r + 1..self.cols).all(|c| (self.get(r, c) - self.get(c, r)).abs() <= tol))
    }

    /// `max |MᵀM - I|`, the orthonormality defect of the columns.
    pub fn orthogonality_error(&self) -> f64 {
        let gram = self.transpose().matmul(self).expect("square shapes agree");
        gram.max_abs_diff(&FloatMatrix::identity(self.cols))
    }
}

/// Orthonormal Sylvester Hadamard matrix, entries `±1/sqrt(order)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HadamardMatrix {
    order: usize,
    entries: FloatMatrix,
}

impl HadamardMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entries(&self) -> &FloatMatrix {
        &self.entries
    }
}

pub fn make_hadamard(order: usize) -> Result<HadamardMatrix> {
    if !order.is_power_of_two() {
        return Err(Error::InvalidOrder(order));
    }
    let scale = 1.0 / (order as f64).sqrt();
    let mut entries = FloatMatrix::zeros(order, order);
    for r in 0..order {
        for c in 0..order {
            // Sylvester: H[r][c] = (-1)^popcount(r & c)
            let sign = if (r & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            entries.set(r, c, sign * scale);
        }
    }
    Ok(HadamardMatrix { order, entries })
}

/// In-place orthonormal fast Walsh–Hadamard transform over each contiguous
/// block of `order` values. Equivalent to `x · diag(H_order, ..., H_order)`.
pub fn fwht_blocks(x: &mut [f64], order: usize) {
    debug_assert!(order.is_power_of_two() && x.len().is_multiple_of(order));
    if order == 1 {
        return;
    }
    let scale = 1.0 / (order as f64).sqrt();
    for block in x.chunks_exact_mut(order) {
        let mut h = 1;
        while h < order {
            for i in (0..order).step_by(2 * h) {
                for j in i..i + h {
                    let a = block[j];
                    let b = block[j + h];
                    block[j] = a + b;
                    block[j + h] = a - b;
                }
            }
            h *= 2;
        }
        block.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Rotate every head vector in `x` by the key-side transform of `spec`.
///
/// `x` holds one head vector per row (`cols == head_dim`, treated as KV head 0)
/// or one token per row (`cols == num_kv_heads * head_dim`).
pub fn apply_block_rotation(
    x: &FloatMatrix,
    layout: &HeadLayout,
    spec: &RotationSpec,
) -> Result<FloatMatrix> {
    spec.check_layout(layout)?;
    let hd = layout.head_dim();
    if x.cols() != hd && x.cols() != layout.kv_width() {
        return Err(shape_err(format!(
            "rows of width {} are neither head_dim {hd} nor kv width {}",
            x.cols(),
            layout.kv_width()
        )));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (head, chunk) in out.row_mut(r).chunks_exact_mut(hd).enumerate() {
            spec.forward_key(head, chunk);
        }
    }
    Ok(out)
}

pub(crate) fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{RotationSpec, Targets};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout(head_dim: usize, order: usize) -> HeadLayout {
        HeadLayout::new(2, 1, head_dim, order, 16).unwrap()
    }

    #[test]
    fn layout_rejects_bad_configs() {
        assert!(HeadLayout::new(3, 2, 128, 128, 16).is_err());
        assert!(HeadLayout::new(4, 2, 96, 32, 16).is_err());
        assert!(HeadLayout::new(4, 2, 128, 48, 16).is_err());
        assert!(HeadLayout::new(4, 2, 128, 256, 16).is_err());
        assert!(HeadLayout::new(4, 2, 128, 128, 0).is_err());
        let l = HeadLayout::new(32, 8, 128, 128, 16).unwrap();
        assert_eq!(l.group_size(), 4);
        assert_eq!(l.kv_head_for(0), 0);
        assert_eq!(l.kv_head_for(7), 1);
        assert_eq!(l.kv_head_for(31), 7);
    }

    #[test]
    fn layout_json_validates() {
        let ok: HeadLayout = serde_json::from_str(
            r#"{"num_q_heads":4,"num_kv_heads":2,"head_dim":64,"rot_order":16}"#,
        )
        .unwrap();
        assert_eq!(ok.page_tokens(), 16);
        assert!(serde_json::from_str::<HeadLayout>(
            r#"{"num_q_heads":4,"num_kv_heads":2,"head_dim":60,"rot_order":4}"#
        )
        .is_err());
        assert!(serde_json::from_str::<HeadLayout>(
            r#"{"num_q_heads":4,"num_kv_heads":2,"head_dim":64,"rot_order":4,"extra":1}"#
        )
        .is_err());
    }

    #[test]
    fn hadamard_small_orders() {
        assert_eq!(make_hadamard(1).unwrap().entries().as_slice(), &[1.0]);
        let h2 = make_hadamard(2).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_eq!(h2.entries().as_slice(), &[s, s, s, -s]);
        assert!(matches!(make_hadamard(6), Err(Error::InvalidOrder(6))));
        assert!(matches!(make_hadamard(0), Err(Error::InvalidOrder(0))));
    }

    #[test]
    fn hadamard_orthonormal_and_symmetric() {
        for order in [4, 8, 64, 128] {
            let h = make_hadamard(order).unwrap();
            let m = h.entries();
            assert!(m.is_symmetric(0.0));
            // direct multiply H·Hᵀ
            let prod = m.matmul(&m.transpose()).unwrap();
            let tol = if order == 4 { 1e-12 } else { 1e-6 };
            assert!(prod.max_abs_diff(&FloatMatrix::identity(order)) <= tol);
        }
    }

    #[test]
    fn outlier_example_rotates_as_hand_computed() {
        let spec = RotationSpec::hadamard(4, 4, Targets::KeysAndValues).unwrap();
        let x = FloatMatrix::new(1, 4, vec![1.0, 1.0, 1.0, 100.0]).unwrap();
        let y = apply_block_rotation(&x, &layout(4, 4), &spec).unwrap();
        let expected = [51.5, -49.5, -49.5, 49.5];
        for (a, b) in y.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // Brute-force product with the dense matrix agrees.
        let dense = x.matmul(make_hadamard(4).unwrap().entries()).unwrap();
        assert!(dense.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn order_one_is_identity() {
        let spec = RotationSpec::hadamard(8, 1, Targets::KeysAndValues).unwrap();
        let x = FloatMatrix::new(1, 8, (0..8).map(|i| i as f64 * 0.37 - 1.0).collect()).unwrap();
        let y = apply_block_rotation(&x, &layout(8, 1), &spec).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rotation_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = layout(64, 16);
        let spec = RotationSpec::hadamard(64, 16, Targets::KeysAndValues).unwrap();
        let x = FloatMatrix::new(5, 64, (0..320).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .unwrap();
        let twice = apply_block_rotation(&apply_block_rotation(&x, &l, &spec).unwrap(), &l, &spec)
            .unwrap();
        assert!(twice.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn fast_transform_matches_dense_block_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (hd, order) in [(8, 2), (16, 4), (32, 8), (64, 16), (64, 64)] {
            let h = make_hadamard(order).unwrap();
            let mut dense = FloatMatrix::zeros(hd, hd);
            for b in 0..hd / order {
                for r in 0..order {
                    for c in 0..order {
                        dense.set(b * order + r, b * order + c, h.entries().get(r, c));
                    }
                }
            }
            let x: Vec<f64> = (0..hd).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let xm = FloatMatrix::new(1, hd, x.clone()).unwrap();
            let expected = xm.matmul(&dense).unwrap();
            let mut fast = x;
            fwht_blocks(&mut fast, order);
            let got = FloatMatrix::new(1, hd, fast).unwrap();
            assert!(got.max_abs_diff(&expected) <= 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let spec = RotationSpec::hadamard(8, 4, Targets::KeysAndValues).unwrap();
        let x = FloatMatrix::zeros(1, 6);
        assert!(matches!(
            apply_block_rotation(&x, &layout(8, 4), &spec),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matrix_constructor_validates() {
        assert!(FloatMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            FloatMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFiniteInput)
        ));
    }
}
