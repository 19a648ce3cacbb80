//! Cyclic Jacobi eigen-decomposition for 4x4 symmetric matrices.
//!
//! Sweeps over all off-diagonal pairs, rotating each to zero, until the
//! off-diagonal mass is negligible. Small fixed size keeps this exact enough
//! for null-space extraction without a general SVD.

pub const N: usize = 4;

/// Eigenvalues in ascending order with matching orthonormal eigenvector
/// columns: a = V diag(w) V^T.
pub fn symmetric_eigen4(a: [[f64; N]; N]) -> ([f64; N], [[f64; N]; N]) {
    let mut m = a;
    let mut v = [[0.0; N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let norm: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let tol = (norm * 1e-15).max(f64::MIN_POSITIVE);

    for _ in 0..64 {
        let off: f64 = (0..N)
            .flat_map(|p| (p + 1..N).map(move |q| (p, q)))
            .map(|(p, q)| m[p][q] * m[p][q])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..N {
            for q in p + 1..N {
                if m[p][q].abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                // rotation angle zeroing m[p][q]
                let theta = 0.5 * (2.0 * m[p][q]).atan2(m[q][q] - m[p][p]);
                let (s, c) = theta.sin_cos();
                for k in 0..N {
                    let (mp, mq) = (m[p][k], m[q][k]);
                    m[p][k] = c * mp - s * mq;
                    m[q][k] = s * mp + c * mq;
                }
                for k in 0..N {
                    let (mp, mq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mp - s * mq;
                    m[k][q] = s * mp + c * mq;
                    let (vp, vq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vp - s * vq;
                    v[k][q] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| m[i][i].partial_cmp(&m[j][j]).expect("finite eigenvalues"));
    let mut w = [0.0; N];
    let mut vs = [[0.0; N]; N];
    for (dst, &src) in order.iter().enumerate() {
        w[dst] = m[src][src];
        for k in 0..N {
            vs[k][dst] = v[k][src];
        }
    }
    (w, vs)
}
