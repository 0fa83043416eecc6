use super::DenseMatrix;
use crate::error::{Error, Result};

/// Off-diagonal threshold: a column pair is orthogonal once
/// `|<a_p, a_q>| <= JACOBI_TOL * |a_p| |a_q|`.
const JACOBI_TOL: f64 = 1e-12;

/// Singular values at or below `sigma_max * RANK_TOL` get basis-completed
/// singular vectors instead of normalized Jacobi columns.
const RANK_TOL: f64 = 1e-13;

/// Thin SVD `m = U · diag(sigma) · Vt` with `n = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `rows x n`, orthonormal columns.
    pub u: DenseMatrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `n x cols`, orthonormal rows.
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    /// `U · diag(sigma) · Vt`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let (a, b) = truncated_factors(self, self.sigma.len()).expect("full rank is in range");
        super::matmul(&a, &b).expect("factor shapes agree")
    }
}

pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    svd_labeled(m, "matrix")
}

/// SVD with a label carried into numeric errors.
///
/// One-sided (Hestenes) Jacobi on the taller orientation. Singular vectors
/// follow a fixed sign convention: the first entry of each `U` column whose
/// magnitude exceeds `1e-12` is positive.
pub fn svd_labeled(m: &DenseMatrix, label: &str) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(Error::Shape(format!("svd of empty matrix {label}")));
    }
    let (rows, cols) = m.shape();
    let (mut u, sigma, mut vt) = if rows >= cols {
        let j = jacobi(m, label)?;
        (j.left, j.sigma, j.right.transpose())
    } else {
        // m^T = U' S V'^T  =>  m = V' S U'^T
        let j = jacobi(&m.transpose(), label)?;
        (j.right, j.sigma, j.left.transpose())
    };

    let n = sigma.len();
    for c in 0..n {
        let first = (0..u.rows()).map(|r| u.get(r, c)).find(|v| v.abs() > 1e-12);
        if matches!(first, Some(v) if v < 0.0) {
            for r in 0..u.rows() {
                u.set(r, c, -u.get(r, c));
            }
            for v in vt.row_mut(c) {
                *v = -*v;
            }
        }
    }
    Ok(SvdResult { u, sigma, vt })
}

struct Jacobi {
    /// `m x n` left vectors.
    left: DenseMatrix,
    sigma: Vec<f64>,
    /// `n x n` right vectors (as columns).
    right: DenseMatrix,
}

fn jacobi(a: &DenseMatrix, label: &str) -> Result<Jacobi> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    // column-major working copies
    let mut g: Vec<Vec<f64>> = (0..n).map(|c| (0..m).map(|r| a.get(r, c)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    let max_sweeps = 100 * n;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (gp, gq) = (&g[p], &g[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in gp.iter().zip(gq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric {
            matrix: label.to_string(),
            reason: format!("jacobi svd did not converge within {max_sweeps} sweeps"),
        });
    }

    let norms: Vec<f64> = g.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps the lower index first on ties
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let sigma_max = norms[order[0]];
    let mut left_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let s = norms[j];
            (s > 0.0 && s > sigma_max * RANK_TOL).then(|| g[j].iter().map(|x| x / s).collect())
        })
        .collect();
    complete_basis(&mut left_cols, m);

    let mut left = DenseMatrix::zeros(m, n);
    let mut right = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = left_cols[dst].as_ref().expect("completed");
        for r in 0..m {
            left.set(r, dst, col[r]);
        }
        for r in 0..n {
            right.set(r, dst, v[src][r]);
        }
    }
    Ok(Jacobi {
        left,
        sigma: order.iter().map(|&j| norms[j]).collect(),
        right,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column,
/// drawn from the standard basis in order.
fn complete_basis(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while candidate < dim {
            let mut w = vec![0.0; dim];
            w[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for c in cols.iter().flatten() {
                    let dot: f64 = c.iter().zip(&w).map(|(a, b)| a * b).sum();
                    for (wi, ci) in w.iter_mut().zip(c) {
                        *wi -= dot * ci;
                    }
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                w.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = Some(w);
                break;
            }
        }
    }
}

/// Rank-`r` factors `A = U[:, :r] diag(sigma[:r])` and `B = Vt[:r, :]`.
///
/// `r = 0` yields a `d x 0` and a `0 x k` factor whose product is zero.
pub fn truncated_factors(s: &SvdResult, r: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    let n = s.sigma.len();
    if r > n {
        return Err(Error::Range(format!("rank {r} exceeds spectrum length {n}")));
    }
    let mut a = s.u.leading_cols(r);
    for row in 0..a.rows() {
        for (v, sig) in a.row_mut(row).iter_mut().zip(&s.sigma) {
            *v *= sig;
        }
    }
    Ok((a, s.vt.leading_rows(r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{frobenius_norm, matmul};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    fn orthonormal_cols(m: &DenseMatrix) -> f64 {
        let g = matmul(&m.transpose(), m).unwrap();
        g.max_abs_diff(&DenseMatrix::identity(m.cols())).unwrap()
    }

    #[test]
    fn diagonal_spectrum() {
        let s = svd(&DenseMatrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn zero_matrix_has_zero_spectrum_and_orthonormal_vectors() {
        let s = svd(&DenseMatrix::zeros(4, 3)).unwrap();
        assert!(s.sigma.iter().all(|&x| x == 0.0));
        assert!(orthonormal_cols(&s.u) < 1e-12);
        assert!(orthonormal_cols(&s.vt.transpose()) < 1e-12);
    }

    #[test]
    fn random_tall_and_wide_reconstruct() {
        for (rows, cols, seed) in [(8, 5, 1), (5, 8, 2), (6, 6, 3), (1, 4, 4)] {
            let m = random(rows, cols, seed);
            let s = svd(&m).unwrap();
            let err = frobenius_norm(&m.sub(&s.reconstruct()).unwrap()) / frobenius_norm(&m);
            assert!(err < 1e-8, "{rows}x{cols}: {err}");
            assert!(orthonormal_cols(&s.u) < 1e-8);
            assert!(orthonormal_cols(&s.vt.transpose()) < 1e-8);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_completion() {
        // rank one 5x3
        let u = DenseMatrix::from_vec(5, 1, vec![1.0, 2.0, 0.0, -1.0, 0.5]).unwrap();
        let v = DenseMatrix::from_vec(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        let m = matmul(&u, &v).unwrap();
        let s = svd(&m).unwrap();
        assert!(s.sigma[1] < 1e-12 && s.sigma[2] < 1e-12);
        assert!(orthonormal_cols(&s.u) < 1e-10);
        assert!(m.max_abs_diff(&s.reconstruct()).unwrap() < 1e-12);
    }

    #[test]
    fn sign_convention_holds() {
        let s = svd(&random(7, 4, 9)).unwrap();
        for c in 0..4 {
            let first = (0..7).map(|r| s.u.get(r, c)).find(|v| v.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn deterministic_bytes() {
        let m = random(9, 6, 5);
        assert_eq!(svd(&m).unwrap(), svd(&m).unwrap());
    }

    #[test]
    fn truncation_examples() {
        let m = DenseMatrix::diag(&[3.0, 2.0, 1.0]);
        let s = svd(&m).unwrap();
        let (a, b) = truncated_factors(&s, 0).unwrap();
        assert_eq!((a.shape(), b.shape()), ((3, 0), (0, 3)));
        assert_eq!(matmul(&a, &b).unwrap(), DenseMatrix::zeros(3, 3));

        let (a, b) = truncated_factors(&s, 1).unwrap();
        let err = frobenius_norm(&m.sub(&matmul(&a, &b).unwrap()).unwrap());
        assert!((err * err - 5.0).abs() < 1e-12);

        let (a, b) = truncated_factors(&s, 3).unwrap();
        assert!(m.max_abs_diff(&matmul(&a, &b).unwrap()).unwrap() < 1e-12);

        assert!(matches!(truncated_factors(&s, 4), Err(Error::Range(_))));
    }

    #[test]
    fn empty_is_rejected() {
        assert!(svd(&DenseMatrix::zeros(0, 3)).is_err());
    }
}
