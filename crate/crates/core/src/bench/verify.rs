use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::config::Suite;
use crate::error::{Error, Result};
use crate::model::{tokenize_frames, tokenize_synthetic, GlobalMode, Model, ModelConfig, SceneState};
use crate::numerics::{frobenius_dot, rng_normal, svd_small, Matrix, Rng};
use crate::sharded::{
    grad_accumulate_sharded, make_shard_plan, shard_rows, verify_shard_equivalence_with_fault, Strategy,
    WorkerFault,
};
use crate::ttt::{
    inner_grad, newton_schulz_with, ttt_targets, ttt_update, FastWeights, InnerLoss, TttConfig, TttLayerParams,
    NS_COEFFS,
};

pub const GRAD_INSTANCES: usize = 100;
pub const GRAD_H: f64 = 1e-6;
/// Step for the residual loss, whose larger values make the h = 1e-6
/// difference quotient dominated by rounding.
pub const GRAD_H_RESIDUAL: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the finite-difference relative error, so entries
/// whose true gradient is near zero are judged on absolute error.
pub const GRAD_REL_FLOOR: f64 = 1e-3;
pub const LINEARITY_INSTANCES: usize = 50;
pub const LINEARITY_TOLERANCE: f64 = 1e-12;
pub const SPECTRAL_MATRICES: usize = 100;
pub const SPECTRAL_BAND: (f64, f64) = (0.3, 1.4);
pub const NS_IDENTITY_VALUE: f64 = 0.7655;
pub const NS_IDENTITY_TOLERANCE: f64 = 1e-3;
pub const REQUERY_TOLERANCE: f64 = 1e-8;

/// Deliberate defects used to confirm the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Newton–Schulz coefficients in reversed order.
    NsCoeffs,
    /// Worker 1 adds 1e-3 to every gradient entry.
    ShardWorker,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ns-coeffs" => Ok(Self::NsCoeffs),
            "shard-worker" => Ok(Self::ShardWorker),
            other => Err(Error::Config(format!("unknown fault `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub suite: Suite,
    pub passed: bool,
    pub detail: String,
}

pub fn run_suite(suite: Suite, seed: u64, fault: Option<Fault>) -> Result<SuiteResult> {
    let (passed, detail) = match suite {
        Suite::Grad => grad_suite(seed)?,
        Suite::Shard => shard_suite(seed, fault)?,
        Suite::Spectral => spectral_suite(seed, 64, fault)?,
        Suite::Query => query_suite(seed)?,
        Suite::Serde => serde_suite(seed)?,
    };
    Ok(SuiteResult { suite, passed, detail })
}

fn random_theta(rng: &mut Rng, d: usize, m: usize) -> FastWeights {
    let s = 1.0 / (d as f64).sqrt();
    FastWeights {
        w1: rng_normal(rng, d, m).scale(s),
        w3: rng_normal(rng, d, m).scale(s),
        w2: rng_normal(rng, m, d).scale(s),
    }
}

fn pick(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
}

fn matrix_mut(t: &mut FastWeights, which: usize) -> &mut Matrix {
    match which {
        0 => &mut t.w1,
        1 => &mut t.w3,
        _ => &mut t.w2,
    }
}

/// Worst elementwise `|a − f| / max(|a|, |f|, floor)` between the analytic
/// gradient and central differences of the loss.
pub fn finite_difference_error(
    loss: InnerLoss,
    theta: &FastWeights,
    k: &Matrix,
    vp: &Matrix,
    h: f64,
) -> Result<f64> {
    let g = loss.grad(theta, k, vp)?;
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let analytic = g.matrices()[which];
        for idx in 0..analytic.data().len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            matrix_mut(&mut plus, which).data_mut()[idx] += h;
            matrix_mut(&mut minus, which).data_mut()[idx] -= h;
            let f = (loss.loss(&plus, k, vp)? - loss.loss(&minus, k, vp)?) / (2.0 * h);
            let a = analytic.data()[idx];
            let denom = a.abs().max(f.abs()).max(GRAD_REL_FLOOR);
            worst = worst.max((a - f).abs() / denom);
        }
    }
    Ok(worst)
}

fn grad_suite(seed: u64) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = Rng::fork(seed, 0x9ad0_0000 + i as u64);
        let d = pick(&mut rng, 1, 8);
        let m = pick(&mut rng, 1, 32);
        let n = pick(&mut rng, 1, 16);
        let theta = random_theta(&mut rng, d, m);
        let k = rng_normal(&mut rng, n, d);
        let vp = rng_normal(&mut rng, n, d);
        worst = worst.max(finite_difference_error(InnerLoss::NegDot, &theta, &k, &vp, GRAD_H)?);
        worst_residual = worst_residual.max(finite_difference_error(
            InnerLoss::Residual,
            &theta,
            &k,
            &vp,
            GRAD_H_RESIDUAL,
        )?);
    }
    Ok((
        worst <= GRAD_TOLERANCE && worst_residual <= GRAD_TOLERANCE,
        format!(
            "{GRAD_INSTANCES} instances, max rel err {worst:.3e} (residual loss {worst_residual:.3e}, tol {GRAD_TOLERANCE:e})"
        ),
    ))
}

/// Shard-summed gradients against the full batch for partitions into 1, 2,
/// 4 and 8 shards. Returns the worst relative deviation.
pub fn linearity_check(seed: u64, instances: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = Rng::fork(seed, 0x11e0_0000 + i as u64);
        let d = pick(&mut rng, 2, 16);
        let m = pick(&mut rng, 2, 48);
        let frames = pick(&mut rng, 1, 12);
        let per_frame = pick(&mut rng, 1, 5);
        let theta = random_theta(&mut rng, d, m);
        let k = rng_normal(&mut rng, frames * per_frame, d);
        let vp = rng_normal(&mut rng, frames * per_frame, d);
        let full = inner_grad(&theta, &k, &vp)?;
        for workers in [1, 2, 4, 8] {
            for strategy in [Strategy::Contiguous, Strategy::RoundRobin] {
                let plan = make_shard_plan(frames, workers, strategy)?;
                let shards = shard_rows(&k, &vp, per_frame, &plan)?;
                let g = grad_accumulate_sharded(&theta, &shards, &plan)?;
                worst = worst.max(g.max_rel_diff(&full)?);
            }
        }
    }
    Ok(worst)
}

fn shard_suite(seed: u64, fault: Option<Fault>) -> Result<(bool, String)> {
    let lin = linearity_check(seed, LINEARITY_INSTANCES)?;
    let wf = (fault == Some(Fault::ShardWorker)).then_some(WorkerFault { worker: 1, delta: 1e-3 });
    let rep = verify_shard_equivalence_with_fault(seed, &[4, 9, 16], &[1, 2, 4, 8], wf)?;
    let mut detail = format!(
        "linearity max rel {lin:.3e} (tol {LINEARITY_TOLERANCE:e}); distributed max rel {:.3e} over {} runs (tol {:e})",
        rep.max_rel_dev(),
        rep.checks.len(),
        rep.tolerance
    );
    if let Some(c) = rep.checks.iter().find(|c| !c.passed) {
        detail.push_str(&format!(
            "; first failure: {} frames, {} workers ({}), faulty worker {:?}",
            c.n_frames,
            c.n_workers,
            c.strategy.as_str(),
            c.faulty_worker
        ));
    }
    Ok((lin <= LINEARITY_TOLERANCE && rep.passed(), detail))
}

/// Scalar image of `σ` under `iters` Newton–Schulz steps.
pub fn ns_scalar(mut s: f64, iters: usize, coeffs: [f64; 3]) -> f64 {
    let [a, b, c] = coeffs;
    for _ in 0..iters {
        s = a * s + b * s.powi(3) + c * s.powi(5);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralStats {
    pub identity_value: f64,
    pub identity_oracle: f64,
    pub min_singular: f64,
    pub max_singular: f64,
    pub min_alignment: f64,
    pub matrices: usize,
}

impl SpectralStats {
    pub fn passed(&self) -> bool {
        (self.identity_value - NS_IDENTITY_VALUE).abs() <= NS_IDENTITY_TOLERANCE
            && (self.identity_value - self.identity_oracle).abs() <= NS_IDENTITY_TOLERANCE
            && self.min_singular >= SPECTRAL_BAND.0
            && self.max_singular <= SPECTRAL_BAND.1
            && self.min_alignment >= 0.0
    }
}

/// Five Newton–Schulz iterations on the identity and on random Gaussian
/// matrices shaped like fast weights (`d × 4d` and `4d × d`, `d ≤ max_dim`).
pub fn spectral_check(seed: u64, max_dim: usize, coeffs: [f64; 3]) -> Result<SpectralStats> {
    let eps = 1e-7;
    let id = newton_schulz_with(&Matrix::<f64>::identity(4), 5, eps, coeffs);
    let identity_value = id.get(0, 0);
    let off_diag = (0..4)
        .flat_map(|r| (0..4).map(move |c| (r, c)))
        .filter(|(r, c)| r != c)
        .map(|(r, c)| id.get(r, c).abs())
        .fold(0.0, f64::max);
    if off_diag > 1e-12 {
        return Err(Error::OracleFailure(format!("NS5(I) has off-diagonal {off_diag:e}")));
    }
    // normalization divides by ‖I₄‖_F + eps = 2 + eps
    let identity_oracle = ns_scalar(1.0 / (2.0 + eps), 5, NS_COEFFS);

    let dims: Vec<usize> = [1, 2, 4, 8, 16, 32, 64, 128]
        .into_iter()
        .filter(|&d| d <= max_dim)
        .collect();
    let mut stats = SpectralStats {
        identity_value,
        identity_oracle,
        min_singular: f64::INFINITY,
        max_singular: 0.0,
        min_alignment: f64::INFINITY,
        matrices: SPECTRAL_MATRICES,
    };
    for i in 0..SPECTRAL_MATRICES {
        let mut rng = Rng::fork(seed, 0x5be0_0000 + i as u64);
        let d = dims[i % dims.len()];
        let (r, c) = if i % 2 == 0 { (d, 4 * d) } else { (4 * d, d) };
        let g: Matrix = rng_normal(&mut rng, r, c);
        let x = newton_schulz_with(&g, 5, eps, coeffs);
        let svd = svd_small(&x)?;
        for &s in &svd.s {
            stats.min_singular = stats.min_singular.min(s);
            stats.max_singular = stats.max_singular.max(s);
        }
        stats.min_alignment = stats.min_alignment.min(frobenius_dot(&x, &g)?);
    }
    Ok(stats)
}

fn spectral_suite(seed: u64, max_dim: usize, fault: Option<Fault>) -> Result<(bool, String)> {
    let coeffs = match fault {
        Some(Fault::NsCoeffs) => [NS_COEFFS[2], NS_COEFFS[1], NS_COEFFS[0]],
        _ => NS_COEFFS,
    };
    let s = spectral_check(seed, max_dim, coeffs)?;
    Ok((
        s.passed(),
        format!(
            "NS5(I4) = {:.5} (oracle {:.5}); {} matrices, singular values in [{:.4}, {:.4}], min <X, G> = {:.3e}",
            s.identity_value, s.identity_oracle, s.matrices, s.min_singular, s.max_singular, s.min_alignment
        ),
    ))
}

fn small_model(seed: u64) -> Result<Model> {
    Model::new(ModelConfig {
        layers: 2,
        d: 16,
        heads: 2,
        expansion: 4,
        global_mode: GlobalMode::Ttt,
        seed,
        ..ModelConfig::default()
    })
}

fn query_suite(seed: u64) -> Result<(bool, String)> {
    let model = small_model(seed)?;
    let grid = tokenize_synthetic(6, 3, 3, 16, seed)?;
    let (mapped, scene) = model.forward(&grid)?;
    let bytes = scene.to_bytes()?;
    let before = Sha256::digest(&bytes);

    let loaded = SceneState::from_bytes(&bytes)?;
    let queries = tokenize_frames(&[6, 7, 8], 3, 3, 16, seed)?;
    let joint = model.query(&loaded, &queries)?;
    let mut separable = true;
    for f in 0..queries.n_frames {
        let single = model.query(&loaded, &queries.select_frames(&[f])?)?;
        separable &= single.tokens == joint.frame_rows(f);
    }
    let requery = model.query(&scene, &grid.select_frames(&[1, 4])?)?;
    let expected = mapped.select_frames(&[1, 4])?;
    let requery_err = requery.tokens.max_rel_diff(&expected.tokens)?;
    let unchanged = Sha256::digest(loaded.to_bytes()?) == before && Sha256::digest(scene.to_bytes()?) == before;

    let foreign = small_model(seed.wrapping_add(1))?;
    let refused = matches!(foreign.query(&loaded, &queries), Err(Error::Fingerprint(_)));

    let passed = separable && requery_err <= REQUERY_TOLERANCE && unchanged && refused;
    Ok((
        passed,
        format!(
            "joint==single {separable}; re-query rel err {requery_err:.3e} (tol {REQUERY_TOLERANCE:e}); \
             scene unchanged {unchanged}; foreign config refused {refused}"
        ),
    ))
}

fn serde_suite(seed: u64) -> Result<(bool, String)> {
    let model = small_model(seed)?;
    let (_, scene) = model.forward(&tokenize_synthetic(3, 2, 2, 16, seed)?)?;
    let bytes = scene.to_bytes()?;
    let back = SceneState::from_bytes(&bytes)?;
    let bit_exact = back.to_bytes()? == bytes && back == scene.quantized();
    let (d, m) = scene.dims().unwrap_or((0, 0));
    let sized = bytes.len() == SceneState::encoded_len(scene.layers.len(), d, m);
    let mut bad_version = bytes.clone();
    bad_version[4] = 2;
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let rejects = SceneState::from_bytes(&bad_version).is_err()
        && SceneState::from_bytes(&bad_magic).is_err()
        && SceneState::from_bytes(&bytes[..bytes.len() - 4]).is_err();
    let fingerprint = model.verify_scene(&back).is_ok();
    Ok((
        bit_exact && sized && rejects && fingerprint,
        format!(
            "{} bytes; bit-exact {bit_exact}; size formula {sized}; corrupt inputs rejected {rejects}; fingerprint {fingerprint}",
            bytes.len()
        ),
    ))
}

/// Mean per-token inner loss of layer-0 targets on a synthetic scene after
/// each entry of `steps`, all runs starting from the same seeded weights.
pub fn step_loss_profile(
    seed: u64,
    n_frames: usize,
    grid: (usize, usize),
    d: usize,
    steps: &[usize],
) -> Result<Vec<f64>> {
    let tokens = tokenize_synthetic(n_frames, grid.0, grid.1, d, seed)?;
    let mut rng = Rng::fork(seed, 0x7e57);
    let params = TttLayerParams::seeded(d, 2, 4, TttConfig::default(), &mut rng)?;
    let t = ttt_targets(&tokens.tokens, &tokens.layout(), &params)?;
    let n = t.k.rows() as f64;
    steps
        .iter()
        .map(|&s| {
            let cfg = TttConfig { steps: s, ..params.cfg.clone() };
            let theta = ttt_update(&params.theta0, &t.k, &t.vp, &cfg)?;
            Ok(cfg.loss.loss(&theta, &t.k, &t.vp)? / n)
        })
        .collect()
}
