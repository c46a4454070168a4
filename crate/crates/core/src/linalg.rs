//! Symmetric eigendecomposition of small dense matrices.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{shape_err, Result};
use crate::tensor::FloatMatrix;

/// Eigenvalues and eigenvectors (as columns) of a symmetric matrix, unsorted.
pub fn symmetric_eigen(a: &FloatMatrix) -> Result<(Vec<f64>, FloatMatrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(shape_err(format!("eigendecomposition needs a square matrix, got {}x{}", n, a.cols())));
    }
    let scale = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    if !a.is_symmetric(1e-9 * (1.0 + scale)) {
        return Err(shape_err("matrix is not symmetric"));
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, a.as_slice()));
    let vectors = FloatMatrix::new(n, n, eig.eigenvectors.transpose().as_slice().to_vec())?;
    Ok((eig.eigenvalues.as_slice().to_vec(), vectors))
}
