use nalgebra::DMatrix;

use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Singular values of a 2-D tensor, sorted descending, length `min(m, n)`.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    m.expect_ndim(2, "singular_values")?;
    if !m.is_finite() {
        return Err(contract!("singular_values: matrix has non-finite entries"));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mat = DMatrix::from_row_slice(rows, cols, m.data());
    let mut sv: Vec<f64> = mat.singular_values().iter().map(|s| s.max(0.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}
