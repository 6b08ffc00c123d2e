use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use super::CompressionError;
use crate::runtime::CompiledModel;
use crate::value::Value;

/// Top-`d` principal directions of the uncompressed residual vectors (every
/// sublayer snapshot at every non-BOS position of `inputs`), as a D x d
/// matrix with orthonormal columns.
///
/// Each column's sign is fixed so that its largest-magnitude entry is
/// positive.
pub fn pca_baseline(model: &CompiledModel, inputs: &[Vec<Value>], d: usize) -> Result<Array2<f64>, CompressionError> {
    let dm = model.config.d_model;
    if d == 0 || d > dm {
        return Err(CompressionError::BadConfig(format!("d = {d} must lie in 1..={dm}")));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0;
    for input in inputs {
        let (_, trace) = model.forward(input, true)?;
        for snap in trace.expect("trace requested").snapshots {
            for row in snap.rows().into_iter().skip(1) {
                rows.extend(row.iter());
                n += 1;
            }
        }
    }
    principal_components(&Array2::from_shape_vec((n, dm), rows).expect("row-major samples"), d)
}

/// Top-`d` principal directions of the rows of `samples`.
pub fn principal_components(samples: &Array2<f64>, d: usize) -> Result<Array2<f64>, CompressionError> {
    let (n, dm) = samples.dim();
    if d == 0 || d > dm {
        return Err(CompressionError::BadConfig(format!("d = {d} must lie in 1..={dm}")));
    }
    if n < d {
        return Err(CompressionError::TooFewSamples { needed: d, got: n });
    }
    let data = DMatrix::from_fn(n, dm, |i, j| samples[[i, j]]);
    let mean = data.row_mean();
    let mut centered = data;
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dm).collect();
    // stable sort keeps ties in index order, so the result is deterministic
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut w = Array2::zeros((dm, d));
    for (j, &c) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(c);
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dm {
            w[[i, j]] = sign * col[i];
        }
    }
    Ok(w)
}
