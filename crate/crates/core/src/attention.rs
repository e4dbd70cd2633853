//! Quadratic global softmax attention: the reference path the fast-weight
//! layer replaces.

use crate::error::{Error, Result};
use crate::numerics::{
    gemm, l2_normalize_slice, matmul_nt, rng_normal, softmax_in_place, Matrix, Real, Rng, View,
};

/// Default guard added to row norms before dividing.
pub const NORM_EPS: f64 = 1e-7;

/// Training-length token count used for entropy scaling:
/// 24 frames of a 37x37 patch grid.
pub const DEFAULT_TRAIN_TOKENS: usize = 32_856;

/// Query rows processed per block; bounds the score buffer to
/// `QUERY_BLOCK x n_tokens`.
const QUERY_BLOCK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    L2,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T: Real = f64> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub heads: usize,
    pub lambda_base: f64,
    pub norm_mode: NormMode,
}

impl<T: Real> AttentionParams<T> {
    /// Random projections scaled by `1/sqrt(d)`, `λ = 1/sqrt(d/heads)`.
    pub fn seeded(d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        let s = T::lit(1.0 / (d as f64).sqrt());
        let mut proj = || rng_normal::<T>(rng, d, d).scale(s);
        Ok(Self {
            w_q: proj(),
            w_k: proj(),
            w_v: proj(),
            w_o: proj(),
            heads,
            lambda_base: 1.0 / ((d / heads) as f64).sqrt(),
            norm_mode: NormMode::L2,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if w.shape() != (d, d) {
                return Err(Error::shape(
                    "AttentionParams",
                    format!("{name} is {:?}, expected ({d}, {d})", w.shape()),
                ));
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Contract(format!(
                "model dim {d} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntropyScaleConfig {
    pub n_train_tokens: usize,
    pub enabled: bool,
}

impl Default for EntropyScaleConfig {
    fn default() -> Self {
        Self {
            n_train_tokens: DEFAULT_TRAIN_TOKENS,
            enabled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Qkv<T: Real = f64> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

/// Projects tokens to queries, keys and values. With `NormMode::L2` every
/// head slice of each Q and K row is unit-normalized; V is never normalized.
pub fn project_qkv<T: Real>(
    tokens: &Matrix<T>,
    params: &AttentionParams<T>,
    eps: T,
) -> Result<Qkv<T>> {
    params.validate()?;
    if tokens.cols() != params.dim() {
        return Err(Error::shape(
            "project_qkv",
            format!("tokens have {} columns, model dim {}", tokens.cols(), params.dim()),
        ));
    }
    let mut q = matmul_nt(tokens, &params.w_q)?;
    let mut k = matmul_nt(tokens, &params.w_k)?;
    let v = matmul_nt(tokens, &params.w_v)?;
    if params.norm_mode == NormMode::L2 {
        normalize_heads(&mut q, params.heads, eps);
        normalize_heads(&mut k, params.heads, eps);
    }
    Ok(Qkv { q, k, v })
}

pub(crate) fn normalize_heads<T: Real>(m: &mut Matrix<T>, heads: usize, eps: T) {
    let hd = m.cols() / heads;
    for r in 0..m.rows() {
        for chunk in m.row_mut(r).chunks_exact_mut(hd) {
            l2_normalize_slice(chunk, eps);
        }
    }
}

/// `λ · max(1, ln N / ln N_T)`; unchanged when disabled.
pub fn entropy_scale(lambda_base: f64, n_tokens: usize, cfg: &EntropyScaleConfig) -> f64 {
    if !cfg.enabled || n_tokens <= cfg.n_train_tokens {
        return lambda_base;
    }
    let factor = (n_tokens as f64).ln() / (cfg.n_train_tokens as f64).ln();
    lambda_base * factor.max(1.0)
}

/// Multi-head scaled dot-product attention over all tokens. Query rows are
/// processed in blocks; each output row is computed identically to the
/// unblocked formula.
pub fn sdpa_global<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    lambda: f64,
) -> Result<Matrix<T>> {
    let (n_q, d) = q.shape();
    let n_kv = k.rows();
    if k.cols() != d || v.cols() != d || v.rows() != n_kv {
        return Err(Error::shape(
            "sdpa_global",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Contract(format!("dim {d} not divisible by {heads} heads")));
    }
    let hd = d / heads;
    let scale = T::lit(lambda);
    let mut out = Matrix::zeros(n_q, d);
    if n_kv == 0 {
        return Ok(out);
    }
    let mut scores = vec![T::zero(); QUERY_BLOCK.min(n_q) * n_kv];

    for h in 0..heads {
        let off = h * hd;
        // Kᵀ restricted to this head: hd x n_kv
        let k_t = View::new(&k.data()[off..], hd, n_kv, 1, d);
        let v_h = View::new(&v.data()[off..], n_kv, hd, d, 1);
        for start in (0..n_q).step_by(QUERY_BLOCK) {
            let rows = QUERY_BLOCK.min(n_q - start);
            let s = &mut scores[..rows * n_kv];
            s.fill(T::zero());
            let q_blk = View::new(&q.data()[start * d + off..], rows, hd, d, 1);
            gemm(q_blk, k_t, s, n_kv);
            for row in s.chunks_exact_mut(n_kv) {
                softmax_in_place(row, scale);
            }
            let p = View::new(&*s, rows, n_kv, n_kv, 1);
            gemm(p, v_h, &mut out.data_mut()[start * d + off..], d);
        }
    }
    Ok(out)
}

/// `tokens + sdpa_global(project_qkv(tokens)) · w_oᵀ` with entropy-scaled
/// temperature.
pub fn attention_block_reference<T: Real>(
    tokens: &Matrix<T>,
    params: &AttentionParams<T>,
    cfg: &EntropyScaleConfig,
) -> Result<Matrix<T>> {
    let qkv = project_qkv(tokens, params, T::lit(NORM_EPS))?;
    let lambda = entropy_scale(params.lambda_base, tokens.rows(), cfg);
    let o = sdpa_global(&qkv.q, &qkv.k, &qkv.v, params.heads, lambda)?;
    tokens.add(&matmul_nt(&o, &params.w_o)?)
}

/// Analytic cost: `4·n²·d` for the two attention contractions plus
/// `6·n·d²` for the four projections (2 flops per multiply-add, n-independent
/// softmax and normalization terms omitted).
pub fn flops_sdpa(n_tokens: u64, d: u64, _heads: u64) -> u64 {
    4 * n_tokens * n_tokens * d + 6 * n_tokens * d * d
}
