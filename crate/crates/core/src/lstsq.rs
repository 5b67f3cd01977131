//! Dense minimum-norm least squares: Householder QR down to a square
//! triangle, then one-sided Jacobi SVD of the triangle.

use alloc::vec;
use alloc::vec::Vec;

pub(crate) struct Solution {
    pub x: Vec<Vec<f64>>,
    pub rank: usize,
}

/// Solve `min ||A x - b||` for every right-hand side in `rhs`, choosing the
/// minimum-norm `x` when `A` is rank deficient. `a` is row-major `rows x cols`.
pub(crate) fn min_norm_lstsq(a: &[f64], rows: usize, cols: usize, rhs: &[Vec<f64>]) -> Solution {
    debug_assert_eq!(a.len(), rows * cols);
    let mut a = a.to_vec();
    let mut b: Vec<Vec<f64>> = rhs.to_vec();
    let k = rows.min(cols);

    for j in 0..k {
        let norm = libm::sqrt((j..rows).map(|i| a[i * cols + j] * a[i * cols + j]).sum());
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[j * cols + j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..rows).map(|i| a[i * cols + j]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in j..cols {
            let dot: f64 = (j..rows).map(|i| v[i - j] * a[i * cols + c]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..rows {
                a[i * cols + c] -= f * v[i - j];
            }
        }
        for rhs in b.iter_mut() {
            let dot: f64 = (j..rows).map(|i| v[i - j] * rhs[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..rows {
                rhs[i] -= f * v[i - j];
            }
        }
    }

    // square system R x = c (R padded with zero rows when rows < cols)
    let n = cols;
    let mut r = vec![0.0; n * n];
    for i in 0..k {
        for j in i..n {
            r[i * n + j] = a[i * cols + j];
        }
    }
    let c: Vec<Vec<f64>> = b
        .iter()
        .map(|rhs| (0..n).map(|i| if i < k { rhs[i] } else { 0.0 }).collect())
        .collect();

    let svd = jacobi_svd(&r, n);
    let smax = svd.sigma.iter().cloned().fold(0.0, f64::max);
    let tol = smax * (rows.max(cols) as f64) * f64::EPSILON * 16.0;
    let rank = svd.sigma.iter().filter(|&&s| s > tol).count();

    let x = c
        .iter()
        .map(|c| {
            let mut x = vec![0.0; n];
            for (idx, &s) in svd.sigma.iter().enumerate() {
                if s <= tol {
                    continue;
                }
                let coef: f64 = (0..n).map(|i| svd.u[i * n + idx] * c[i]).sum::<f64>() / s;
                for (j, xj) in x.iter_mut().enumerate() {
                    *xj += coef * svd.v[j * n + idx];
                }
            }
            x
        })
        .collect();
    Solution { x, rank }
}

struct Svd {
    u: Vec<f64>,
    sigma: Vec<f64>,
    v: Vec<f64>,
}

/// One-sided Jacobi (Hestenes) SVD of a square row-major matrix.
fn jacobi_svd(m: &[f64], n: usize) -> Svd {
    let mut u = m.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..n {
                    let up = u[i * n + p];
                    let uq = u[i * n + q];
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || libm::fabs(gamma) <= 1e-15 * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                for mat in [&mut u, &mut v] {
                    for i in 0..n {
                        let mp = mat[i * n + p];
                        let mq = mat[i * n + q];
                        mat[i * n + p] = c * mp - s * mq;
                        mat[i * n + q] = s * mp + c * mq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = vec![0.0; n];
    for j in 0..n {
        let norm = libm::sqrt((0..n).map(|i| u[i * n + j] * u[i * n + j]).sum());
        sigma[j] = norm;
        if norm > 0.0 {
            for i in 0..n {
                u[i * n + j] /= norm;
            }
        }
    }
    Svd { u, sigma, v }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overdetermined_exact_fit() {
        // y = 1 + 2 t sampled at 5 points
        let rows = 5;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..rows {
            let t = i as f64;
            a.extend_from_slice(&[1.0, t]);
            b.push(1.0 + 2.0 * t);
        }
        let s = min_norm_lstsq(&a, rows, 2, &[b]);
        assert_eq!(s.rank, 2);
        assert!((s.x[0][0] - 1.0).abs() < 1e-12);
        assert!((s.x[0][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn least_squares_residual_is_orthogonal() {
        let a = [1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0];
        let b = alloc::vec![0.0, 1.0, 1.0, 3.0];
        let s = min_norm_lstsq(&a, 4, 2, &[b.clone()]);
        let x = &s.x[0];
        for col in 0..2 {
            let dot: f64 = (0..4)
                .map(|i| a[i * 2 + col] * (a[i * 2] * x[0] + a[i * 2 + 1] * x[1] - b[i]))
                .sum();
            assert!(dot.abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_min_norm() {
        // duplicated column: x0 + x1 = 2 → min-norm (1, 1)
        let a = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let s = min_norm_lstsq(&a, 3, 2, &[alloc::vec![2.0, 2.0, 2.0]]);
        assert_eq!(s.rank, 1);
        assert!((s.x[0][0] - 1.0).abs() < 1e-12);
        assert!((s.x[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_column_gets_zero() {
        let a = [1.0, 0.0, 2.0, 0.0, 3.0, 0.0];
        let s = min_norm_lstsq(&a, 3, 2, &[alloc::vec![1.0, 2.0, 3.0]]);
        assert_eq!(s.rank, 1);
        assert!((s.x[0][0] - 1.0).abs() < 1e-12);
        assert_eq!(s.x[0][1], 0.0);
    }
}
