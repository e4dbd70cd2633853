//! Muon update: the step direction is the Newton–Schulz approximation of
//! the gradient's orthogonal polar factor.

use super::{FastGrad, FastWeights};
use crate::error::Result;
use crate::numerics::{frobenius_norm, matmul, matmul_nt, Matrix, Real};

/// Quintic Newton–Schulz coefficients `(a, b, c)`.
pub const NS_COEFFS: [f64; 3] = [3.4445, -4.7750, 2.0315];

/// `X₀ = G / (‖G‖_F + eps)`, then `iters` rounds of
/// `X ← a·X + b·(XXᵀ)X + c·(XXᵀ)²X`.
pub fn newton_schulz5<T: Real>(g: &Matrix<T>, iters: usize, eps: T) -> Matrix<T> {
    newton_schulz_with(g, iters, eps, NS_COEFFS)
}

/// [`newton_schulz5`] with explicit coefficients.
pub fn newton_schulz_with<T: Real>(
    g: &Matrix<T>,
    iters: usize,
    eps: T,
    coeffs: [f64; 3],
) -> Matrix<T> {
    // Tall inputs run on the transpose so the Gram matrix is the small side;
    // (XXᵀ)ᵏX and X(XᵀX)ᵏ are the same polynomial.
    let tall = g.rows() > g.cols();
    let mut x = if tall { g.transpose() } else { g.clone() };
    let norm = frobenius_norm(&x);
    x = x.scale(T::one() / (norm + eps));
    let [a, b, c] = coeffs.map(T::lit);
    for _ in 0..iters {
        let gram = matmul_nt(&x, &x).expect("square by construction");
        let gram2 = matmul(&gram, &gram).expect("square by construction");
        let mut poly = gram.scale(b);
        poly.axpy(c, &gram2).expect("same shape");
        let mut next = matmul(&poly, &x).expect("shapes agree");
        next.axpy(a, &x).expect("same shape");
        x = next;
    }
    if tall {
        x.transpose()
    } else {
        x
    }
}

/// `W ← W − lr · NS(∇W)` for each fast-weight matrix. No momentum.
pub fn muon_step<T: Real>(
    theta: &FastWeights<T>,
    grad: &FastGrad<T>,
    lr: T,
    ns_iters: usize,
    eps: T,
) -> Result<FastWeights<T>> {
    muon_step_with(theta, grad, lr, ns_iters, eps, NS_COEFFS)
}

pub fn muon_step_with<T: Real>(
    theta: &FastWeights<T>,
    grad: &FastGrad<T>,
    lr: T,
    ns_iters: usize,
    eps: T,
    coeffs: [f64; 3],
) -> Result<FastWeights<T>> {
    let step = |w: &Matrix<T>, g: &Matrix<T>| -> Result<Matrix<T>> {
        let mut out = w.clone();
        out.axpy(-lr, &newton_schulz_with(g, ns_iters, eps, coeffs))?;
        Ok(out)
    };
    Ok(FastWeights {
        w1: step(&theta.w1, &grad.w1)?,
        w3: step(&theta.w3, &grad.w3)?,
        w2: step(&theta.w2, &grad.w2)?,
    })
}
