//! One-sided Jacobi SVD. Used as a verification oracle only; never on the
//! hot path.

use super::{Matrix, Real};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const MAX_DIM: usize = 512;

/// Thin SVD `m = u · diag(s) · vᵀ`, singular values descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix<f64>,
    pub s: Vec<f64>,
    pub v: Matrix<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix<f64> {
        let (rows, k) = self.u.shape();
        let cols = self.v.rows();
        Matrix::from_fn(rows, cols, |i, j| {
            let mut acc = 0.0;
            for p in 0..k {
                acc += self.u.get(i, p) * self.s[p] * self.v.get(j, p);
            }
            acc
        })
    }
}

pub fn svd_small<T: Real>(m: &Matrix<T>) -> Result<Svd> {
    let (rows, cols) = m.shape();
    if rows > MAX_DIM || cols > MAX_DIM {
        return Err(Error::Contract(format!(
            "svd_small supports up to {MAX_DIM}x{MAX_DIM}, got {rows}x{cols}"
        )));
    }
    let m = m.cast::<f64>();
    if rows >= cols {
        jacobi(&m)
    } else {
        let t = jacobi(&m.transpose())?;
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

fn jacobi(a: &Matrix<f64>) -> Result<Svd> {
    let (m, n) = a.shape();
    // column-major working copy
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::OracleFailure(format!(
            "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));

    let s: Vec<f64> = order.iter().map(|&(sv, _)| sv).collect();
    let u = Matrix::from_fn(m, n, |i, k| {
        let (sv, j) = order[k];
        if sv > 0.0 {
            cols[j][i] / sv
        } else {
            0.0
        }
    });
    let v = Matrix::from_fn(n, n, |i, k| v[order[k].1][i]);
    Ok(Svd { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}
