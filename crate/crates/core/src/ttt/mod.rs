//! Test-time-trained fast-weight attention.
//!
//! A global layer projects tokens to Q/K/V, builds a spatially mixed target
//! `V′` with a short 2D convolution, fits a SwiGLU MLP to map `K → V′` with a
//! few Muon steps (update), then answers every query by running the MLP
//! (apply). Both stages are linear in the number of tokens.

mod fast_weights;
mod muon;
mod shortconv;

pub use fast_weights::{fast_forward, inner_grad, inner_loss, FastGrad, FastWeights, InnerLoss};
pub use muon::{muon_step, muon_step_with, newton_schulz5, newton_schulz_with, NS_COEFFS};
pub use shortconv::{short_conv2d_values, FrameLayout};

use crate::attention::{project_qkv, AttentionParams, NormMode};
use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, ConvKernel, Matrix, Real, Rng};

/// Which projected stream the short convolution mixes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvTarget {
    #[default]
    Values,
    Keys,
    KeysAndValues,
    None,
}

impl ConvTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            ConvTarget::Values => "values",
            ConvTarget::Keys => "keys",
            ConvTarget::KeysAndValues => "keys_and_values",
            ConvTarget::None => "none",
        }
    }
}

impl std::str::FromStr for ConvTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "values" => Ok(Self::Values),
            "keys" => Ok(Self::Keys),
            "keys_and_values" => Ok(Self::KeysAndValues),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown conv_target `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TttConfig {
    pub steps: usize,
    pub lr: f64,
    pub ns_iters: usize,
    pub eps: f64,
    pub conv_kernel_size: usize,
    pub conv_target: ConvTarget,
    pub loss: InnerLoss,
    /// Divide the learning rate by the number of minibatches in sharded and
    /// offloaded runs. Off by default: gradients are summed.
    pub scale_lr_by_minibatches: bool,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            steps: 2,
            lr: 0.1,
            ns_iters: 5,
            eps: 1e-7,
            conv_kernel_size: 3,
            conv_target: ConvTarget::Values,
            loss: InnerLoss::NegDot,
            scale_lr_by_minibatches: false,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.ns_iters == 0 {
            return Err(Error::Contract("ns_iters must be >= 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Contract(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.conv_kernel_size % 2 == 0 {
            return Err(Error::Contract(format!(
                "conv_kernel_size must be odd, got {}",
                self.conv_kernel_size
            )));
        }
        Ok(())
    }
}

/// Slow weights of one fast-weight global layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TttLayerParams<T: Real = f64> {
    pub attn: AttentionParams<T>,
    pub theta0: FastWeights<T>,
    pub conv_kernel: ConvKernel<T>,
    pub cfg: TttConfig,
}

impl<T: Real> TttLayerParams<T> {
    /// Seeded layer: L2-normalized projections, `1/sqrt(d)`-scaled initial
    /// fast weights, depthwise kernel equal to identity plus `N(0, 0.1²)`.
    pub fn seeded(
        d: usize,
        heads: usize,
        expansion: usize,
        cfg: TttConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut attn = AttentionParams::seeded(d, heads, rng)?;
        attn.norm_mode = NormMode::L2;
        let theta0 = FastWeights::seeded(d, expansion, rng);
        let k = cfg.conv_kernel_size;
        let mut weights = match ConvKernel::<T>::identity(k, d)? {
            ConvKernel::Depthwise { weights, .. } => weights,
            ConvKernel::Dense { .. } => unreachable!("identity is depthwise"),
        };
        for w in &mut weights {
            *w += T::lit(0.1 * rng.normal());
        }
        Ok(Self {
            attn,
            theta0,
            conv_kernel: ConvKernel::depthwise(k, d, weights)?,
            cfg,
        })
    }
}

/// `cfg.steps` rounds of `{gradient; Muon step}` starting from `theta0`.
pub fn ttt_update<T: Real>(
    theta0: &FastWeights<T>,
    k: &Matrix<T>,
    vp: &Matrix<T>,
    cfg: &TttConfig,
) -> Result<FastWeights<T>> {
    cfg.validate()?;
    let mut theta = theta0.clone();
    for _ in 0..cfg.steps {
        let g = cfg.loss.grad(&theta, k, vp)?;
        theta = muon_step(&theta, &g, T::lit(cfg.lr), cfg.ns_iters, T::lit(cfg.eps))?;
    }
    Ok(theta)
}

/// Runs the fast-weight MLP on query rows. Never modifies `theta`.
pub fn ttt_apply<T: Real>(theta: &FastWeights<T>, q: &Matrix<T>) -> Result<Matrix<T>> {
    fast_forward(theta, q)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TttMode {
    UpdateAndApply,
    FrozenQuery,
}

/// Queries, keys and the fitting target of one layer.
#[derive(Clone, Debug)]
pub struct UpdateTargets<T: Real = f64> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub vp: Matrix<T>,
}

/// Projection plus short convolution on whichever stream `conv_target`
/// names.
pub fn ttt_targets<T: Real>(
    tokens: &Matrix<T>,
    layout: &FrameLayout,
    params: &TttLayerParams<T>,
) -> Result<UpdateTargets<T>> {
    layout.validate(tokens.rows())?;
    let qkv = project_qkv(tokens, &params.attn, T::lit(params.cfg.eps))?;
    let conv = |m: &Matrix<T>| short_conv2d_values(m, layout, &params.conv_kernel);
    let (k, vp) = match params.cfg.conv_target {
        ConvTarget::Values => (qkv.k, conv(&qkv.v)?),
        ConvTarget::Keys => (conv(&qkv.k)?, qkv.v),
        ConvTarget::KeysAndValues => (conv(&qkv.k)?, conv(&qkv.v)?),
        ConvTarget::None => (qkv.k, qkv.v),
    };
    Ok(UpdateTargets { q: qkv.q, k, vp })
}

/// `tokens + ttt_apply(theta, q) · w_oᵀ`
pub fn ttt_output<T: Real>(
    tokens: &Matrix<T>,
    q: &Matrix<T>,
    theta: &FastWeights<T>,
    w_o: &Matrix<T>,
) -> Result<Matrix<T>> {
    let o = ttt_apply(theta, q)?;
    tokens.add(&matmul_nt(&o, w_o)?)
}

/// One fast-weight global layer.
///
/// `UpdateAndApply` fits fresh weights from `params.theta0` (and rejects a
/// supplied state); `FrozenQuery` applies `state_in` without updating it.
/// Returns the output tokens and the weights that were applied.
pub fn ttt_block<T: Real>(
    tokens: &Matrix<T>,
    layout: &FrameLayout,
    params: &TttLayerParams<T>,
    mode: TttMode,
    state_in: Option<&FastWeights<T>>,
) -> Result<(Matrix<T>, FastWeights<T>)> {
    match (mode, state_in) {
        (TttMode::UpdateAndApply, None) => {
            let t = ttt_targets(tokens, layout, params)?;
            let theta = ttt_update(&params.theta0, &t.k, &t.vp, &params.cfg)?;
            let out = ttt_output(tokens, &t.q, &theta, &params.attn.w_o)?;
            Ok((out, theta))
        }
        (TttMode::FrozenQuery, Some(state)) => {
            layout.validate(tokens.rows())?;
            let qkv = project_qkv(tokens, &params.attn, T::lit(params.cfg.eps))?;
            let out = ttt_output(tokens, &qkv.q, state, &params.attn.w_o)?;
            Ok((out, state.clone()))
        }
        (TttMode::UpdateAndApply, Some(_)) => Err(Error::Contract(
            "update_and_apply starts from theta0 and takes no input state".into(),
        )),
        (TttMode::FrozenQuery, None) => Err(Error::Contract(
            "frozen_query requires stored fast weights".into(),
        )),
    }
}

/// Sequence-length dependent part of [`flops_ttt`]:
/// `steps·12·n·d·m + 6·n·d·m + 6·n·d²`.
pub fn flops_ttt_n_term(n_tokens: u64, d: u64, m: u64, steps: u64) -> u64 {
    steps * 12 * n_tokens * d * m + 6 * n_tokens * d * m + 6 * n_tokens * d * d
}

/// Analytic cost of one fast-weight layer. Per step: forward and backward
/// through the MLP (`12·n·d·m`) plus Newton–Schulz (`ns_iters·4·max(d,m)³`,
/// independent of n). Once: apply (`6·n·d·m`) and projections (`6·n·d²`).
pub fn flops_ttt(n_tokens: u64, d: u64, m: u64, steps: u64, ns_iters: u64) -> u64 {
    let ns = ns_iters * 4 * d.max(m).pow(3);
    flops_ttt_n_term(n_tokens, d, m, steps) + steps * ns
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_normal;

    fn layer(d: usize, cfg: TttConfig, seed: u64) -> TttLayerParams {
        TttLayerParams::seeded(d, 2, 4, cfg, &mut Rng::new(seed)).unwrap()
    }

    fn inputs(layout: &FrameLayout, d: usize, seed: u64) -> Matrix {
        rng_normal(&mut Rng::new(seed), layout.n_tokens(), d)
    }

    #[test]
    fn update_fixed_points() {
        let mut rng = Rng::new(3);
        let theta0: FastWeights = FastWeights::seeded(4, 2, &mut rng);
        let k = rng_normal(&mut rng, 7, 4);
        let vp = rng_normal(&mut rng, 7, 4);
        let cfg0 = TttConfig {
            steps: 0,
            ..Default::default()
        };
        assert_eq!(ttt_update(&theta0, &k, &vp, &cfg0).unwrap(), theta0);
        let cfg3 = TttConfig {
            steps: 3,
            ..Default::default()
        };
        assert_eq!(ttt_update(&theta0, &k, &Matrix::zeros(7, 4), &cfg3).unwrap(), theta0);
    }

    #[test]
    fn single_step_equals_manual_composition() {
        let mut rng = Rng::new(42);
        let theta0: FastWeights = FastWeights::seeded(4, 2, &mut rng);
        let k = rng_normal(&mut rng, 9, 4);
        let vp = rng_normal(&mut rng, 9, 4);
        let cfg = TttConfig {
            steps: 1,
            ..Default::default()
        };
        let manual = muon_step(&theta0, &inner_grad(&theta0, &k, &vp).unwrap(), 0.1, 5, 1e-7).unwrap();
        assert_eq!(ttt_update(&theta0, &k, &vp, &cfg).unwrap(), manual);
    }

    #[test]
    fn apply_examples() {
        let mut rng = Rng::new(42);
        let mut theta: FastWeights = FastWeights::seeded(4, 2, &mut rng);
        let q = rng_normal(&mut rng, 5, 4);
        let batched = ttt_apply(&theta, &q).unwrap();
        assert_eq!(batched, fast_forward(&theta, &q).unwrap());
        for r in 0..5 {
            let single = ttt_apply(&theta, &q.slice_rows(r, r + 1)).unwrap();
            assert_eq!(single.row(0), batched.row(r));
        }
        theta.w2 = Matrix::zeros(8, 4);
        assert_eq!(ttt_apply(&theta, &q).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn frozen_mode_passes_state_through() {
        let layout = FrameLayout::uniform(2, 2, 3, 2);
        let p = layer(8, TttConfig::default(), 1);
        let t = inputs(&layout, 8, 2);
        let state = FastWeights::seeded(8, 4, &mut Rng::new(9));
        let before = state.clone();
        let (_, out_state) = ttt_block(&t, &layout, &p, TttMode::FrozenQuery, Some(&state)).unwrap();
        assert_eq!(out_state, before);
        assert_eq!(state, before);
    }

    #[test]
    fn mode_state_contract() {
        let layout = FrameLayout::uniform(1, 2, 2, 1);
        let p = layer(4, TttConfig::default(), 1);
        let t = inputs(&layout, 4, 2);
        assert!(ttt_block(&t, &layout, &p, TttMode::FrozenQuery, None).is_err());
        let s = p.theta0.clone();
        assert!(ttt_block(&t, &layout, &p, TttMode::UpdateAndApply, Some(&s)).is_err());
    }

    #[test]
    fn zero_steps_zero_down_projection_is_identity() {
        let layout = FrameLayout::uniform(2, 3, 3, 2);
        let mut p = layer(
            8,
            TttConfig {
                steps: 0,
                ..Default::default()
            },
            4,
        );
        p.theta0.w2 = Matrix::zeros(32, 8);
        let t = inputs(&layout, 8, 5);
        let (out, _) = ttt_block(&t, &layout, &p, TttMode::UpdateAndApply, None).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn frame_permutation_equivariance() {
        let layout = FrameLayout::uniform(4, 2, 3, 2);
        let per = 8;
        let p = layer(8, TttConfig::default(), 6);
        let t = inputs(&layout, 8, 7);
        let frame_perm = [2, 0, 3, 1];
        let rows: Vec<usize> = frame_perm
            .iter()
            .flat_map(|&f| f * per..(f + 1) * per)
            .collect();
        let (out, theta) = ttt_block(&t, &layout, &p, TttMode::UpdateAndApply, None).unwrap();
        let (out_p, theta_p) =
            ttt_block(&t.select_rows(&rows), &layout, &p, TttMode::UpdateAndApply, None).unwrap();
        assert!(theta_p.max_rel_diff(&theta).unwrap() < 1e-10);
        assert!(out_p.max_rel_diff(&out.select_rows(&rows)).unwrap() < 1e-10);
    }

    #[test]
    fn conv_target_changes_objective() {
        let layout = FrameLayout::uniform(2, 3, 3, 1);
        let t = inputs(&layout, 8, 8);
        let p = layer(8, TttConfig::default(), 9);
        let none = TttLayerParams {
            cfg: TttConfig {
                conv_target: ConvTarget::None,
                ..Default::default()
            },
            ..p.clone()
        };
        let a = ttt_targets(&t, &layout, &p).unwrap();
        let b = ttt_targets(&t, &layout, &none).unwrap();
        assert_eq!(a.k, b.k);
        let la = inner_loss(&p.theta0, &a.k, &a.vp).unwrap();
        let lb = inner_loss(&p.theta0, &b.k, &b.vp).unwrap();
        assert_ne!(la, lb);
    }

    #[test]
    fn key_conv_targets() {
        let layout = FrameLayout::uniform(1, 3, 3, 1);
        let t = inputs(&layout, 4, 10);
        let base = layer(4, TttConfig::default(), 11);
        let with = |target| TttLayerParams {
            cfg: TttConfig {
                conv_target: target,
                ..Default::default()
            },
            ..base.clone()
        };
        let v = ttt_targets(&t, &layout, &with(ConvTarget::Values)).unwrap();
        let k = ttt_targets(&t, &layout, &with(ConvTarget::Keys)).unwrap();
        let kv = ttt_targets(&t, &layout, &with(ConvTarget::KeysAndValues)).unwrap();
        assert_ne!(k.k, v.k);
        assert_eq!(kv.k, k.k);
        assert_eq!(kv.vp, v.vp);
    }

    #[test]
    fn config_validation() {
        assert!(TttConfig::default().validate().is_ok());
        for bad in [
            TttConfig {
                lr: -0.1,
                ..Default::default()
            },
            TttConfig {
                ns_iters: 0,
                ..Default::default()
            },
            TttConfig {
                conv_kernel_size: 4,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("keys_and_values".parse::<ConvTarget>().unwrap(), ConvTarget::KeysAndValues);
        assert!("diag".parse::<ConvTarget>().is_err());
    }

    #[test]
    fn flops_model() {
        // independent evaluation of the published formula
        let n_term = 2u64 * 12 * 1000 * 128 * 512 + 6 * 1000 * 128 * 512 + 6 * 1000 * 128 * 128;
        assert_eq!(n_term, 2_064_384_000);
        let ns = 5u64 * 4 * 512 * 512 * 512;
        assert_eq!(flops_ttt(1000, 128, 512, 2, 5), n_term + 2 * ns);
        assert_eq!(flops_ttt(1000, 128, 512, 2, 5), 7_433_093_120);
        assert_eq!(
            flops_ttt_n_term(2000, 128, 512, 2),
            2 * flops_ttt_n_term(1000, 128, 512, 2)
        );
        assert_eq!(flops_ttt(1000, 128, 512, 0, 5), 6 * 1000 * 128 * 512 + 6 * 1000 * 128 * 128);
    }
}
