//! Small dense linear-algebra helpers (f64).

use crate::error::{Error, Result};

/// Solves `a x = b` for a dense row-major `n x n` matrix by LU with partial pivoting.
pub fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for k in 0..n {
        let (piv, pmax) = (k..n)
            .map(|r| (r, a[r * n + k].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmax <= scale * 1e-13 {
            return Err(Error::Solver(format!("singular matrix at column {k}")));
        }
        if piv != k {
            for c in 0..n {
                a.swap(k * n + c, piv * n + c);
            }
            b.swap(k, piv);
        }
        let d = a[k * n + k];
        for r in k + 1..n {
            let f = a[r * n + k] / d;
            if f == 0.0 {
                continue;
            }
            a[r * n + k] = 0.0;
            for c in k + 1..n {
                a[r * n + c] -= f * a[k * n + c];
            }
            b[r] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let mut s = b[k];
        for c in k + 1..n {
            s -= a[k * n + c] * x[c];
        }
        x[k] = s / a[k * n + k];
    }
    Ok(x)
}

/// Solves a banded system (`kl` sub- and `ku` super-diagonals) stored densely,
/// by LU with partial pivoting restricted to the band.
pub fn solve_banded(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, kl: usize, ku: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let reach = kl + ku;
    for k in 0..n {
        let last_row = (k + kl).min(n - 1);
        let last_col = (k + reach).min(n - 1);
        let (piv, pmax) = (k..=last_row)
            .map(|r| (r, a[r * n + k].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmax <= scale * 1e-13 {
            return Err(Error::Solver(format!("singular banded matrix at column {k}")));
        }
        if piv != k {
            for c in k..=last_col {
                a.swap(k * n + c, piv * n + c);
            }
            b.swap(k, piv);
        }
        let d = a[k * n + k];
        for r in k + 1..=last_row {
            let f = a[r * n + k] / d;
            if f == 0.0 {
                continue;
            }
            a[r * n + k] = 0.0;
            for c in k + 1..=last_col {
                a[r * n + c] -= f * a[k * n + c];
            }
            b[r] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let mut s = b[k];
        for c in k + 1..=(k + reach).min(n - 1) {
            s -= a[k * n + c] * x[c];
        }
        x[k] = s / a[k * n + k];
    }
    Ok(x)
}

/// Solves a tridiagonal system with the Thomas algorithm.
///
/// `lower[i]` multiplies `x[i-1]` in row `i` (`lower[0]` unused), `upper[i]`
/// multiplies `x[i+1]` (`upper[n-1]` unused).
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = if n > 1 { upper[0] / diag[0] } else { 0.0 };
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}
