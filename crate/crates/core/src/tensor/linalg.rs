//! Small dense symmetric eigen-decomposition and singular values.
//!
//! Cyclic Jacobi rotations on the Gram matrix; enough for the redundancy
//! diagnostics and the Gaussian Fréchet distance. Forward-only, f64.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;

/// Eigenvalues and eigenvectors of a symmetric matrix (column `j` of
/// `vectors` pairs with `values[j]`). Values sorted descending.
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    pub n: usize,
}

/// Cyclic Jacobi eigen-decomposition of a symmetric n×n matrix.
pub fn sym_eigen(mat: &[f64], n: usize) -> Result<SymEigen> {
    assert_eq!(mat.len(), n * n);
    let mut a = mat.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = mat
        .iter()
        .fold(0.0f64, |acc, x| acc + x * x)
        .sqrt()
        .max(1.0);

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= OFF_DIAG_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rows/cols p and q of A
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        // final check after the last sweep
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() > OFF_DIAG_TOL * scale {
            return Err(Error::Numeric(format!(
                "Jacobi eigen-decomposition did not converge in {} sweeps",
                MAX_SWEEPS
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = vec![0.0f64; n * n];
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + col] = v[k * n + src];
        }
    }
    Ok(SymEigen {
        values,
        vectors,
        n,
    })
}

/// Singular values of an m×n matrix, descending, via eigenvalues of the
/// smaller Gram matrix. Forward-only; no gradients.
pub fn svd_values(a: &Tensor<f64>) -> Result<Vec<f64>> {
    let shape = a.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "svd_values wants a matrix, got {:?}",
            shape
        )));
    }
    let (m, n) = (shape[0], shape[1]);
    if m * n > 1_000_000 {
        return Err(Error::Dimension(format!(
            "svd_values limited to 1e6 elements, got {}x{}",
            m, n
        )));
    }
    let data = a.data();
    // Gram matrix of the smaller side
    let k = m.min(n);
    let mut gram = vec![0.0f64; k * k];
    if m <= n {
        // A·Aᵀ
        for i in 0..m {
            for j in i..m {
                let mut acc = 0.0;
                for p in 0..n {
                    acc += data[i * n + p] * data[j * n + p];
                }
                gram[i * m + j] = acc;
                gram[j * m + i] = acc;
            }
        }
    } else {
        // Aᵀ·A
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for p in 0..m {
                    acc += data[p * n + i] * data[p * n + j];
                }
                gram[i * n + j] = acc;
                gram[j * n + i] = acc;
            }
        }
    }
    let eig = sym_eigen(&gram, k)?;
    Ok(eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect())
}

/// Symmetric matrix square root with negative eigenvalues clamped to zero.
pub fn sym_sqrt(mat: &[f64], n: usize) -> Result<Vec<f64>> {
    let eig = sym_eigen(mat, n)?;
    let mut out = vec![0.0f64; n * n];
    // V · diag(sqrt(max(λ,0))) · Vᵀ
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                let s = eig.values[k].max(0.0).sqrt();
                acc += eig.vectors[i * n + k] * s * eig.vectors[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diag_singular_values() {
        let a = Tensor::new(vec![3.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let sv = svd_values(&a).unwrap();
        assert!((sv[0] - 3.0).abs() < 1e-12);
        assert!((sv[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0f64, -2.0, 0.5];
        let v = [0.3f64, 1.1, -0.7, 2.0];
        let mut data = vec![0.0f64; 12];
        for i in 0..3 {
            for j in 0..4 {
                data[i * 4 + j] = u[i] * v[j];
            }
        }
        let a = Tensor::new(data, &[3, 4]).unwrap();
        let sv = svd_values(&a).unwrap();
        let un: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((sv[0] - un * vn).abs() < 1e-10);
        for &s in &sv[1..] {
            assert!(s < 1e-10);
        }
    }

    #[test]
    fn frobenius_identity_random() {
        // Σσᵢ² == ‖A‖_F² within rel 1e-8 for a random 8x6 matrix
        let mut state = 0x12345678u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let data: Vec<f64> = (0..48).map(|_| next()).collect();
        let fro: f64 = data.iter().map(|x| x * x).sum();
        let a = Tensor::new(data, &[8, 6]).unwrap();
        let sv = svd_values(&a).unwrap();
        assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        assert!(sv.iter().all(|&s| s >= 0.0));
        let total: f64 = sv.iter().map(|s| s * s).sum();
        assert!((total - fro).abs() / fro < 1e-8);
    }

    #[test]
    fn sym_sqrt_squares_back() {
        // S = M^(1/2) must satisfy S·S ≈ M for a PSD matrix
        let m = [4.0, 2.0, 2.0, 3.0]; // symmetric positive definite
        let s = sym_sqrt(&m, 2).unwrap();
        let mut back = [0.0f64; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    back[i * 2 + j] += s[i * 2 + k] * s[k * 2 + j];
                }
            }
        }
        for (x, y) in back.iter().zip(&m) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
