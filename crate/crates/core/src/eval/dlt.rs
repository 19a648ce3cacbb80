//! Linear triangulation from two or more calibrated views.
//!
//! Each observation contributes the two rows x*P3 - P1 and y*P3 - P2 of a
//! 2Nx4 system; the homogeneous solution is the eigenvector of AtA for its
//! smallest eigenvalue. Rows are normalized to unit length so the eigengap
//! test is scale free.

use super::jacobi::symmetric_eigen4;
use super::EvalError;
use crate::sim::Camera;

pub const DEGENERACY_REL_GAP: f64 = 1e-10;

pub fn dlt_triangulate(observations: &[(&Camera, (f64, f64))]) -> Result<[f64; 3], EvalError> {
    if observations.len() < 2 {
        return Err(EvalError::TooFewViews { got: observations.len() });
    }
    let mut ata = [[0.0f64; 4]; 4];
    for (cam, (x, y)) in observations {
        let p = cam.projection_matrix();
        for (coord, first) in [(*x, 0), (*y, 1)] {
            let mut row = [0.0f64; 4];
            for k in 0..4 {
                row[k] = coord * p[2][k] - p[first][k];
            }
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= f64::MIN_POSITIVE {
                continue;
            }
            for k in 0..4 {
                row[k] /= n;
            }
            for i in 0..4 {
                for j in 0..4 {
                    ata[i][j] += row[i] * row[j];
                }
            }
        }
    }

    let (w, v) = symmetric_eigen4(ata);
    let scale = w[3].abs().max(f64::MIN_POSITIVE);
    if (w[1] - w[0]).abs() <= DEGENERACY_REL_GAP * scale {
        return Err(EvalError::Degenerate { gap: (w[1] - w[0]).abs() / scale });
    }
    let h = [v[0][0], v[1][0], v[2][0], v[3][0]];
    let xyz_norm = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
    if h[3].abs() <= 1e-12 * xyz_norm.max(1.0) {
        return Err(EvalError::Degenerate { gap: h[3].abs() });
    }
    Ok([h[0] / h[3], h[1] / h[3], h[2] / h[3]])
}
