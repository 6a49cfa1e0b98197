//! Dense linear algebra helpers: LU solves with a reciprocal condition
//! estimate, and deterministic pairwise reductions.

use nalgebra::{DMatrix, DVector};

use crate::error::{OpeError, Result};

/// Reciprocal condition number below which a system is treated as singular.
pub const RCOND_THRESHOLD: f64 = 1e-12;

/// Result of a guarded dense solve.
#[derive(Debug, Clone)]
pub struct Solved {
    pub x: DVector<f64>,
    pub rcond: f64,
}

/// Solves `a x = b` by LU with partial pivoting.
///
/// Fails when the reciprocal 1-norm condition estimate drops below
/// [`RCOND_THRESHOLD`].
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Solved> {
    assert_eq!(a.nrows(), a.ncols());
    assert_eq!(a.nrows(), b.len());
    let lu = a.clone().lu();
    let rcond = rcond_estimate(a, &lu);
    if !(rcond >= RCOND_THRESHOLD) {
        return Err(OpeError::Singular {
            rcond,
            detail: format!("{}x{} system", a.nrows(), a.ncols()),
        });
    }
    let x = lu.solve(b).ok_or(OpeError::Singular {
        rcond,
        detail: "LU factorization has a zero pivot".into(),
    })?;
    Ok(Solved { x, rcond })
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Hager-Higham estimate of `1 / (||A||_1 ||A^{-1}||_1)` using the LU factors.
fn rcond_estimate(a: &DMatrix<f64>, lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 1.0;
    }
    let anorm = norm1(a);
    if anorm == 0.0 || !anorm.is_finite() {
        return 0.0;
    }
    let at = a.transpose();
    let lut = at.lu();
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut est = 0.0;
    for _ in 0..5 {
        let y = match lu.solve(&x) {
            Some(y) => y,
            None => return 0.0,
        };
        let new_est: f64 = y.iter().map(|v| v.abs()).sum();
        if !new_est.is_finite() {
            return 0.0;
        }
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let z = match lut.solve(&xi) {
            Some(z) => z,
            None => return 0.0,
        };
        let (jmax, zmax) = z
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, v)| {
                if v.abs() > acc.1 {
                    (j, v.abs())
                } else {
                    acc
                }
            });
        let ztx = z.dot(&x);
        if new_est <= est || zmax <= ztx {
            est = est.max(new_est);
            break;
        }
        est = new_est;
        x = DVector::zeros(n);
        x[jmax] = 1.0;
    }
    // Higham's alternating-sign safeguard.
    let mut alt = DVector::zeros(n);
    for i in 0..n {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        alt[i] = sign * (1.0 + i as f64 / (n.max(2) - 1) as f64);
    }
    if let Some(y) = lu.solve(&alt) {
        let alt_est = 2.0 * y.iter().map(|v| v.abs()).sum::<f64>() / (3.0 * n as f64);
        if alt_est.is_finite() {
            est = est.max(alt_est);
        } else {
            return 0.0;
        }
    }
    if est == 0.0 {
        return 0.0;
    }
    1.0 / (anorm * est)
}

/// Pairwise (cascade) summation. The split points depend only on the
/// length, so the result is identical regardless of how the slice was
/// produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Population variance `P_n[(x - mean)^2]` with the given centre.
pub fn centered_second_moment(xs: &[f64], centre: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - centre) * (x - centre)).collect();
    pairwise_sum(&sq) / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_identity() {
        let a = DMatrix::<f64>::identity(3, 3);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let s = solve(&a, &b).unwrap();
        assert_eq!(s.x, b);
        assert!((s.rcond - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_detected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(solve(&a, &b), Err(OpeError::Singular { .. })));
    }

    #[test]
    fn rcond_matches_exact_for_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-3, 10.0]));
        let lu = a.clone().lu();
        let r = rcond_estimate(&a, &lu);
        // ||A||_1 = 10, ||A^-1||_1 = 1000
        assert!((r - 1e-4).abs() < 1e-12, "{r}");
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499500.0);
        assert_eq!(mean(&[2.0, 4.0]), 3.0);
        assert_eq!(centered_second_moment(&[1.0, 3.0], 2.0), 1.0);
    }
}
