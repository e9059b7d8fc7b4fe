//! Singular values of small dense matrices by one-sided Jacobi rotations,
//! and the numerical rank built on them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default relative threshold for [`numerical_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 100;

/// Singular values in descending order.
///
/// Works on the columns of the matrix (or of its transpose, whichever has
/// fewer columns), rotating pairs until every pair is orthogonal to
/// working precision. Fails if that takes more than 100 sweeps.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    if m.shape().len() != 2 {
        return Err(Error::dimension("singular_values", m.shape(), &[]));
    }
    let (rows, cols) = (m.rows(), m.cols());
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    // Column-major working copy with n <= len.
    let (n, len) = if cols <= rows { (cols, rows) } else { (rows, cols) };
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            (0..len)
                .map(|i| if cols <= rows { m.at(i, j) } else { m.at(j, i) })
                .collect()
        })
        .collect();

    let eps = f64::EPSILON;
    // Columns whose norm has fallen to roundoff level never become
    // orthogonal in relative terms; treat them as converged.
    let fro2: f64 = w.iter().flatten().map(|x| x * x).sum();
    let negligible = eps * eps * fro2;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for k in 0..len {
                        a += wp[k] * wp[k];
                        b += wq[k] * wq[k];
                        g += wp[k] * wq[k];
                    }
                    (a, b, g)
                };
                if gamma == 0.0
                    || alpha.min(beta) <= negligible
                    || gamma.abs() <= eps * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = w.split_at_mut(q);
                let (wp, wq) = (&mut left[p], &mut right[0]);
                for k in 0..len {
                    let (x, y) = (wp[k], wq[k]);
                    wp[k] = c * x - s * y;
                    wq[k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }
    let mut sv: Vec<f64> = w.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values above `tol_factor · max(rows, cols) · σ_max`.
pub fn numerical_rank(m: &Tensor, tol_factor: f64) -> Result<usize> {
    let sv = singular_values(m)?;
    let Some(&max) = sv.first() else {
        return Ok(0);
    };
    if max == 0.0 {
        return Ok(0);
    }
    let threshold = tol_factor * m.rows().max(m.cols()) as f64 * max;
    Ok(sv.iter().filter(|&&s| s > threshold).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rank by Gaussian elimination with partial pivoting; pivots at or below
    /// `threshold` count as zero. Independent of the Jacobi path.
    fn elimination_rank(m: &Tensor, threshold: f64) -> usize {
        let (r, c) = (m.rows(), m.cols());
        let mut a: Vec<Vec<f64>> = (0..r).map(|i| (0..c).map(|j| m.at(i, j)).collect()).collect();
        let mut rank = 0;
        for col in 0..c {
            if rank == r {
                break;
            }
            let pivot = (rank..r)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .expect("non-empty range");
            if a[pivot][col].abs() <= threshold {
                continue;
            }
            a.swap(rank, pivot);
            for i in (rank + 1)..r {
                let f = a[i][col] / a[rank][col];
                for j in col..c {
                    a[i][j] -= f * a[rank][j];
                }
            }
            rank += 1;
        }
        rank
    }

    fn product(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                out.values_mut()[i * n + j] = (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum();
            }
        }
        out
    }

    #[test]
    fn zero_and_identity() {
        assert_eq!(numerical_rank(&Tensor::zeros(&[3, 5]), DEFAULT_RANK_TOL).unwrap(), 0);
        assert_eq!(numerical_rank(&Tensor::identity(4), DEFAULT_RANK_TOL).unwrap(), 4);
        assert_eq!(numerical_rank(&Tensor::zeros(&[0, 5]), DEFAULT_RANK_TOL).unwrap(), 0);
    }

    #[test]
    fn known_singular_values() {
        // diag(3, 2) padded to 3×2 and mixed with a rotation.
        let (c, s) = (0.6, 0.8);
        let m = Tensor::from_rows(&[&[3.0 * c, -2.0 * s], &[3.0 * s, 2.0 * c], &[0.0, 0.0]]).unwrap();
        let sv = singular_values(&m).unwrap();
        assert!((sv[0] - 3.0).abs() < 1e-14 && (sv[1] - 2.0).abs() < 1e-14);
        let wide = singular_values(&m.transposed()).unwrap();
        assert!((wide[0] - 3.0).abs() < 1e-14 && (wide[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn frobenius_norm_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m = Tensor::gaussian(&[rng.gen_range(1..9), rng.gen_range(1..9)], 1.0, &mut rng);
            let fro: f64 = m.values().iter().map(|x| x * x).sum();
            let sv: f64 = singular_values(&m).unwrap().iter().map(|s| s * s).sum();
            assert!((fro - sv).abs() < 1e-10 * fro.max(1.0));
        }
    }

    #[test]
    fn gaussian_factor_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::gaussian(&[8, 3], 1.0, &mut rng);
        let b = Tensor::gaussian(&[3, 6], 1.0, &mut rng);
        let ab = product(&a, &b);
        assert_eq!(numerical_rank(&ab, DEFAULT_RANK_TOL).unwrap(), 3);
        assert_eq!(elimination_rank(&ab, 1e-9), 3);
    }

    #[test]
    fn agrees_with_elimination_on_integer_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (r, c, k) = (rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..8));
            // Integer product of integer factors: exact rank <= k.
            let a = Tensor::new(vec![r, k], (0..r * k).map(|_| rng.gen_range(-3..=3) as f64).collect()).unwrap();
            let b = Tensor::new(vec![k, c], (0..k * c).map(|_| rng.gen_range(-3..=3) as f64).collect()).unwrap();
            let m = product(&a, &b);
            assert_eq!(
                numerical_rank(&m, DEFAULT_RANK_TOL).unwrap(),
                elimination_rank(&m, 1e-9),
                "{m:?}"
            );
        }
    }
}
