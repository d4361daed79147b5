//! Small dense helpers that do not justify a LAPACK dependency.

use ndarray::Array2;

/// Inverse of a symmetric positive-definite matrix via Cholesky.
/// Returns `None` if the matrix is not positive definite.
pub fn spd_inverse(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    // solve L Y = I, then L^T X = Y
    let mut inv = Array2::<f64>::zeros((n, n));
    for col in 0..n {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[[k, i]] * inv[[k, col]];
            }
            inv[[i, col]] = s / l[[i, i]];
        }
    }
    Some(inv)
}

/// Right pseudo-inverse `Aᵀ (A Aᵀ + λI)⁻¹` of a wide, full-row-rank matrix,
/// with a tiny ridge relative to the mean diagonal.
pub fn right_pseudo_inverse(a: &Array2<f64>) -> Array2<f64> {
    let mut gram = a.dot(&a.t());
    let n = gram.nrows();
    let mean_diag = (0..n).map(|i| gram[[i, i]]).sum::<f64>() / n as f64;
    let ridge = mean_diag * 1e-10;
    for i in 0..n {
        gram[[i, i]] += ridge;
    }
    let inv = spd_inverse(&gram).expect("ridge-regularized Gram matrix is positive definite");
    a.t().dot(&inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn inverts_spd_matrix() {
        let a = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let inv = spd_inverse(&a).unwrap();
        let eye = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indefinite() {
        assert!(spd_inverse(&array![[1.0, 2.0], [2.0, 1.0]]).is_none());
    }

    #[test]
    fn pseudo_inverse_is_right_inverse() {
        let a = array![[1.0, 0.5, 0.0, 0.0], [0.0, 0.5, 1.0, 0.25]];
        let p = right_pseudo_inverse(&a);
        let eye = a.dot(&p);
        assert!((eye[[0, 0]] - 1.0).abs() < 1e-8);
        assert!(eye[[0, 1]].abs() < 1e-8);
        assert!((eye[[1, 1]] - 1.0).abs() < 1e-8);
    }
}
