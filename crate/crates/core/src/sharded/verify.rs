use super::{make_shard_plan, run_distributed, shard_rows, Minibatch, Strategy, WorkerFault};
use crate::error::Result;
use crate::numerics::{rng_normal, Matrix, Rng};
use crate::ttt::{ttt_update, FastWeights, TttConfig};

const DIM: usize = 8;
const EXPANSION: usize = 4;
const ROWS_PER_FRAME: usize = 4;
pub const SHARD_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct ShardCheck {
    pub n_frames: usize,
    pub n_workers: usize,
    pub strategy: Strategy,
    pub max_rel_dev: f64,
    pub passed: bool,
    /// First worker whose gradient disagrees with a row-by-row recomputation.
    pub faulty_worker: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardReport {
    pub tolerance: f64,
    pub checks: Vec<ShardCheck>,
}

impl ShardReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_rel_dev(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_dev).fold(0.0, f64::max)
    }
}

/// Compares the distributed update against the single-worker update for
/// every `(size, workers, strategy)` combination.
pub fn verify_shard_equivalence(seed: u64, sizes: &[usize], worker_counts: &[usize]) -> Result<ShardReport> {
    verify_shard_equivalence_with_fault(seed, sizes, worker_counts, None)
}

pub fn verify_shard_equivalence_with_fault(
    seed: u64,
    sizes: &[usize],
    worker_counts: &[usize],
    fault: Option<WorkerFault>,
) -> Result<ShardReport> {
    let cfg = TttConfig::default();
    let mut checks = Vec::new();
    for &n_frames in sizes {
        let mut rng = Rng::fork(seed, n_frames as u64);
        let theta: FastWeights = FastWeights::seeded(DIM, EXPANSION, &mut rng);
        let rows = n_frames * ROWS_PER_FRAME;
        let k = rng_normal(&mut rng, rows, DIM);
        let vp = rng_normal(&mut rng, rows, DIM);
        let reference = ttt_update(&theta, &k, &vp, &cfg)?;

        for &n_workers in worker_counts {
            for strategy in [Strategy::Contiguous, Strategy::RoundRobin] {
                let plan = make_shard_plan(n_frames, n_workers, strategy)?;
                let shards = shard_rows(&k, &vp, ROWS_PER_FRAME, &plan)?;
                let out = run_distributed(&theta, &shards, &cfg, &plan, fault.as_ref())?;
                let max_rel_dev = out.weights.max_rel_diff(&reference)?;
                let passed = max_rel_dev <= SHARD_TOLERANCE;
                let faulty_worker = if passed {
                    None
                } else {
                    locate_fault(&theta, &shards, &out.first_step_grads)?
                };
                checks.push(ShardCheck {
                    n_frames,
                    n_workers,
                    strategy,
                    max_rel_dev,
                    passed,
                    faulty_worker,
                });
            }
        }
    }
    Ok(ShardReport {
        tolerance: SHARD_TOLERANCE,
        checks,
    })
}

fn locate_fault(
    theta: &FastWeights,
    shards: &[Minibatch],
    reported: &[FastWeights],
) -> Result<Option<usize>> {
    for (w, (shard, g)) in shards.iter().zip(reported).enumerate() {
        let oracle = row_by_row_grad(theta, shard)?;
        if g.max_rel_diff(&oracle)? > SHARD_TOLERANCE {
            return Ok(Some(w));
        }
    }
    Ok(None)
}

fn row_by_row_grad(theta: &FastWeights, shard: &Minibatch) -> Result<FastWeights> {
    let mut acc = FastWeights::zeros(theta.dim(), theta.hidden());
    for r in 0..shard.rows() {
        let k = Matrix::new(1, theta.dim(), shard.k.row(r).to_vec())?;
        let vp = Matrix::new(1, theta.dim(), shard.vp.row(r).to_vec())?;
        acc.add_assign(&TttConfig::default().loss.grad(theta, &k, &vp)?)?;
    }
    Ok(acc)
}
