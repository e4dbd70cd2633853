//! Minibatch-decomposed fast-weight updates.
//!
//! The inner objective is a sum over tokens, so its gradient is a sum of
//! per-minibatch gradients. That lets the update run over shards held by
//! separate workers (gradients reduced every step) or over minibatches
//! streamed one at a time from a parked store.

mod offload;
mod verify;

pub use offload::{run_offload_update, HostStore, MinibatchSource, ResidencyReport};
pub use verify::{verify_shard_equivalence, verify_shard_equivalence_with_fault, ShardCheck, ShardReport};

use std::thread;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::ttt::{muon_step, FastGrad, FastWeights, InnerLoss, TttConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Contiguous,
    RoundRobin,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Contiguous => "contiguous",
            Strategy::RoundRobin => "round_robin",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contiguous" => Ok(Self::Contiguous),
            "round_robin" => Ok(Self::RoundRobin),
            other => Err(Error::Config(format!("unknown shard strategy `{other}`"))),
        }
    }
}

/// Frame → worker assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardPlan {
    pub n_frames: usize,
    pub assignments: Vec<usize>,
    pub n_workers: usize,
    pub strategy: Strategy,
}

impl ShardPlan {
    /// Frames owned by `worker`, ascending.
    pub fn frames_of(&self, worker: usize) -> Vec<usize> {
        (0..self.n_frames)
            .filter(|&f| self.assignments[f] == worker)
            .collect()
    }
}

/// Contiguous plans split frames into near-equal consecutive blocks (the
/// first `n_frames % n_workers` blocks get one extra frame); round-robin
/// sends frame `i` to worker `i mod n_workers`. More workers than frames
/// leaves some shards empty.
pub fn make_shard_plan(n_frames: usize, n_workers: usize, strategy: Strategy) -> Result<ShardPlan> {
    if n_workers == 0 {
        return Err(Error::Contract("a shard plan needs at least one worker".into()));
    }
    let assignments = match strategy {
        Strategy::RoundRobin => (0..n_frames).map(|f| f % n_workers).collect(),
        Strategy::Contiguous => {
            let base = n_frames / n_workers;
            let extra = n_frames % n_workers;
            let mut out = Vec::with_capacity(n_frames);
            for w in 0..n_workers {
                let len = base + usize::from(w < extra);
                out.extend(std::iter::repeat_n(w, len));
            }
            out
        }
    };
    Ok(ShardPlan {
        n_frames,
        assignments,
        n_workers,
        strategy,
    })
}

/// Keys and fitting targets for one shard or minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch<T: Real = f64> {
    pub k: Matrix<T>,
    pub vp: Matrix<T>,
}

impl<T: Real> Minibatch<T> {
    pub fn rows(&self) -> usize {
        self.k.rows()
    }
}

/// Splits frame-contiguous rows into per-worker shards following `plan`.
pub fn shard_rows<T: Real>(
    k: &Matrix<T>,
    vp: &Matrix<T>,
    rows_per_frame: usize,
    plan: &ShardPlan,
) -> Result<Vec<Minibatch<T>>> {
    if k.rows() != plan.n_frames * rows_per_frame || vp.rows() != k.rows() {
        return Err(Error::shape(
            "shard_rows",
            format!(
                "{} key rows, {} target rows for {} frames of {rows_per_frame}",
                k.rows(),
                vp.rows(),
                plan.n_frames
            ),
        ));
    }
    Ok((0..plan.n_workers)
        .map(|w| {
            let rows: Vec<usize> = plan
                .frames_of(w)
                .into_iter()
                .flat_map(|f| f * rows_per_frame..(f + 1) * rows_per_frame)
                .collect();
            Minibatch {
                k: k.select_rows(&rows),
                vp: vp.select_rows(&rows),
            }
        })
        .collect())
}

/// Consecutive minibatches of `frames_per_batch` frames each (the last may
/// be shorter).
pub fn split_minibatches<T: Real>(
    k: &Matrix<T>,
    vp: &Matrix<T>,
    rows_per_frame: usize,
    frames_per_batch: usize,
) -> Result<Vec<Minibatch<T>>> {
    if frames_per_batch == 0 || rows_per_frame == 0 || k.rows() % rows_per_frame != 0 {
        return Err(Error::Contract(format!(
            "cannot split {} rows into batches of {frames_per_batch} frames x {rows_per_frame} rows",
            k.rows()
        )));
    }
    let step = rows_per_frame * frames_per_batch;
    Ok((0..k.rows())
        .step_by(step)
        .map(|s| {
            let e = (s + step).min(k.rows());
            Minibatch {
                k: k.slice_rows(s, e),
                vp: vp.slice_rows(s, e),
            }
        })
        .collect())
}

/// Additive perturbation injected into one worker's gradient; used to check
/// that verification catches a bad worker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorkerFault {
    pub worker: usize,
    pub delta: f64,
}

/// Computes every shard gradient on its own thread and returns them in
/// worker order.
fn worker_grads<T: Real>(
    theta: &FastWeights<T>,
    shards: &[Minibatch<T>],
    loss: InnerLoss,
    fault: Option<&WorkerFault>,
) -> Result<Vec<FastGrad<T>>> {
    let results: Vec<thread::Result<Result<FastGrad<T>>>> = thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .enumerate()
            .map(|(w, shard)| {
                scope.spawn(move || {
                    let mut g = loss.grad(theta, &shard.k, &shard.vp)?;
                    if let Some(f) = fault.filter(|f| f.worker == w) {
                        let delta = T::lit(f.delta);
                        g = FastWeights {
                            w1: g.w1.map(|x| x + delta),
                            w3: g.w3.map(|x| x + delta),
                            w2: g.w2.map(|x| x + delta),
                        };
                    }
                    Ok(g)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join()).collect()
    });

    results
        .into_iter()
        .enumerate()
        .map(|(worker, r)| match r {
            Ok(Ok(g)) => Ok(g),
            Ok(Err(e)) => Err(Error::Worker {
                worker,
                message: e.to_string(),
            }),
            Err(_) => Err(Error::Worker {
                worker,
                message: "worker panicked".into(),
            }),
        })
        .collect()
}

/// Sum in ascending worker order; the first gradient seeds the sum.
fn reduce_ordered<T: Real>(grads: Vec<FastGrad<T>>) -> Result<FastGrad<T>> {
    let mut it = grads.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::Contract("no shards to reduce".into()))?;
    for g in it {
        acc.add_assign(&g)?;
    }
    Ok(acc)
}

fn check_conformance<T: Real>(shards: &[Minibatch<T>], plan: &ShardPlan) -> Result<()> {
    if shards.len() != plan.n_workers {
        return Err(Error::Contract(format!(
            "{} shards for a plan with {} workers",
            shards.len(),
            plan.n_workers
        )));
    }
    Ok(())
}

/// `Σ_s ∇L(theta; shard_s)`, reduced in ascending shard order.
pub fn grad_accumulate_sharded<T: Real>(
    theta: &FastWeights<T>,
    shards: &[Minibatch<T>],
    plan: &ShardPlan,
) -> Result<FastGrad<T>> {
    check_conformance(shards, plan)?;
    reduce_ordered(worker_grads(theta, shards, InnerLoss::NegDot, None)?)
}

/// What was exchanged between workers during a distributed update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyncStats {
    pub steps: usize,
    pub workers: usize,
    /// Scalars each worker contributes per step: one gradient's worth,
    /// independent of how many frames the worker holds.
    pub payload_per_worker: usize,
}

impl SyncStats {
    pub fn total_payload(&self) -> usize {
        self.steps * self.workers * self.payload_per_worker
    }
}

#[derive(Clone, Debug)]
pub struct DistributedOutcome<T: Real = f64> {
    pub weights: FastWeights<T>,
    pub sync: SyncStats,
    /// Per-worker gradients of the first step, kept for fault localization.
    pub first_step_grads: Vec<FastGrad<T>>,
}

/// Synchronous data-parallel update: every step each worker computes its
/// shard gradient concurrently, gradients are reduced in ascending worker
/// order, and one identical Muon step is applied to the shared weights.
pub fn run_distributed<T: Real>(
    theta0: &FastWeights<T>,
    shards: &[Minibatch<T>],
    cfg: &TttConfig,
    plan: &ShardPlan,
    fault: Option<&WorkerFault>,
) -> Result<DistributedOutcome<T>> {
    cfg.validate()?;
    check_conformance(shards, plan)?;
    let lr = if cfg.scale_lr_by_minibatches {
        cfg.lr / plan.n_workers as f64
    } else {
        cfg.lr
    };
    let mut theta = theta0.clone();
    let mut first_step_grads = Vec::new();
    for step in 0..cfg.steps {
        let grads = worker_grads(&theta, shards, cfg.loss, fault)?;
        if step == 0 {
            first_step_grads = grads.clone();
        }
        let g = reduce_ordered(grads)?;
        theta = muon_step(&theta, &g, T::lit(lr), cfg.ns_iters, T::lit(cfg.eps))?;
    }
    Ok(DistributedOutcome {
        sync: SyncStats {
            steps: cfg.steps,
            workers: plan.n_workers,
            payload_per_worker: theta.numel(),
        },
        weights: theta,
        first_step_grads,
    })
}

pub fn run_distributed_update<T: Real>(
    theta0: &FastWeights<T>,
    shards: &[Minibatch<T>],
    cfg: &TttConfig,
    plan: &ShardPlan,
) -> Result<FastWeights<T>> {
    Ok(run_distributed(theta0, shards, cfg, plan, None)?.weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{rng_normal, Rng};
    use crate::ttt::{inner_grad, ttt_update};

    struct Instance {
        theta: FastWeights,
        k: Matrix,
        vp: Matrix,
    }

    const PER_FRAME: usize = 3;

    fn instance(frames: usize, seed: u64) -> Instance {
        let mut rng = Rng::new(seed);
        Instance {
            theta: FastWeights::seeded(4, 4, &mut rng),
            k: rng_normal(&mut rng, frames * PER_FRAME, 4),
            vp: rng_normal(&mut rng, frames * PER_FRAME, 4),
        }
    }

    #[test]
    fn plan_examples() {
        let p = make_shard_plan(4, 1, Strategy::Contiguous).unwrap();
        assert_eq!(p.assignments, vec![0; 4]);
        let p = make_shard_plan(5, 2, Strategy::Contiguous).unwrap();
        assert_eq!(p.frames_of(0), vec![0, 1, 2]);
        assert_eq!(p.frames_of(1), vec![3, 4]);
        let p = make_shard_plan(6, 4, Strategy::RoundRobin).unwrap();
        assert_eq!(p.frames_of(0), vec![0, 4]);
        assert_eq!(p.frames_of(1), vec![1, 5]);
        assert_eq!(p.frames_of(2), vec![2]);
        assert_eq!(p.frames_of(3), vec![3]);
        let p = make_shard_plan(2, 5, Strategy::Contiguous).unwrap();
        assert!(p.frames_of(4).is_empty());
        assert!(make_shard_plan(3, 0, Strategy::RoundRobin).is_err());
    }

    #[test]
    fn contiguous_blocks_are_balanced() {
        for n in 0..30 {
            for w in 1..9 {
                let p = make_shard_plan(n, w, Strategy::Contiguous).unwrap();
                let sizes: Vec<usize> = (0..w).map(|i| p.frames_of(i).len()).collect();
                let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                assert!(hi - lo <= 1);
                assert!(p.assignments.windows(2).all(|x| x[0] <= x[1]));
                assert!(p.assignments.iter().all(|&a| a < w));
            }
        }
    }

    #[test]
    fn single_shard_is_bitwise_full_batch() {
        let inst = instance(5, 1);
        let plan = make_shard_plan(5, 1, Strategy::Contiguous).unwrap();
        let shards = shard_rows(&inst.k, &inst.vp, PER_FRAME, &plan).unwrap();
        let g = grad_accumulate_sharded(&inst.theta, &shards, &plan).unwrap();
        assert_eq!(g, inner_grad(&inst.theta, &inst.k, &inst.vp).unwrap());
    }

    #[test]
    fn two_shards_match_full_batch() {
        let inst = instance(7, 2);
        let full = inner_grad(&inst.theta, &inst.k, &inst.vp).unwrap();
        for strategy in [Strategy::Contiguous, Strategy::RoundRobin] {
            let plan = make_shard_plan(7, 2, strategy).unwrap();
            let shards = shard_rows(&inst.k, &inst.vp, PER_FRAME, &plan).unwrap();
            let g = grad_accumulate_sharded(&inst.theta, &shards, &plan).unwrap();
            assert!(g.max_rel_diff(&full).unwrap() < 1e-12);
        }
    }

    #[test]
    fn plans_covering_same_rows_agree() {
        let inst = instance(8, 3);
        let a = make_shard_plan(8, 3, Strategy::Contiguous).unwrap();
        let b = make_shard_plan(8, 3, Strategy::RoundRobin).unwrap();
        let ga = grad_accumulate_sharded(&inst.theta, &shard_rows(&inst.k, &inst.vp, PER_FRAME, &a).unwrap(), &a).unwrap();
        let gb = grad_accumulate_sharded(&inst.theta, &shard_rows(&inst.k, &inst.vp, PER_FRAME, &b).unwrap(), &b).unwrap();
        assert!(ga.max_rel_diff(&gb).unwrap() < 1e-10);
    }

    #[test]
    fn distributed_matches_single_worker() {
        let inst = instance(9, 4);
        let cfg = TttConfig::default();
        let reference = ttt_update(&inst.theta, &inst.k, &inst.vp, &cfg).unwrap();

        let plan1 = make_shard_plan(9, 1, Strategy::Contiguous).unwrap();
        let shards1 = shard_rows(&inst.k, &inst.vp, PER_FRAME, &plan1).unwrap();
        assert_eq!(run_distributed_update(&inst.theta, &shards1, &cfg, &plan1).unwrap(), reference);

        for workers in [2, 4, 8] {
            let plan = make_shard_plan(9, workers, Strategy::RoundRobin).unwrap();
            let shards = shard_rows(&inst.k, &inst.vp, PER_FRAME, &plan).unwrap();
            let w = run_distributed_update(&inst.theta, &shards, &cfg, &plan).unwrap();
            assert!(w.max_rel_diff(&reference).unwrap() <= 1e-10, "{workers} workers");
        }
    }

    #[test]
    fn empty_shard_contributes_nothing() {
        let inst = instance(3, 5);
        let cfg = TttConfig::default();
        let plan3 = make_shard_plan(3, 3, Strategy::Contiguous).unwrap();
        let shards3 = shard_rows(&inst.k, &inst.vp, PER_FRAME, &plan3).unwrap();
        let plan4 = make_shard_plan(3, 4, Strategy::Contiguous).unwrap();
        let shards4 = shard_rows(&inst.k, &inst.vp, PER_FRAME, &plan4).unwrap();
        assert_eq!(shards4[3].rows(), 0);
        assert_eq!(
            run_distributed_update(&inst.theta, &shards3, &cfg, &plan3).unwrap(),
            run_distributed_update(&inst.theta, &shards4, &cfg, &plan4).unwrap()
        );
    }

    #[test]
    fn payload_is_independent_of_frame_count() {
        let cfg = TttConfig::default();
        let mut payloads = Vec::new();
        for frames in [4, 16] {
            let inst = instance(frames, 6);
            let plan = make_shard_plan(frames, 2, Strategy::Contiguous).unwrap();
            let shards = shard_rows(&inst.k, &inst.vp, PER_FRAME, &plan).unwrap();
            let out = run_distributed(&inst.theta, &shards, &cfg, &plan, None).unwrap();
            assert_eq!(out.sync.payload_per_worker, inst.theta.numel());
            assert_eq!(out.sync.total_payload(), 2 * 2 * inst.theta.numel());
            payloads.push(out.sync.payload_per_worker);
        }
        assert_eq!(payloads[0], payloads[1]);
    }

    #[test]
    fn worker_error_surfaces_with_index() {
        let inst = instance(4, 7);
        let plan = make_shard_plan(4, 2, Strategy::Contiguous).unwrap();
        let mut shards = shard_rows(&inst.k, &inst.vp, PER_FRAME, &plan).unwrap();
        shards[1].vp = Matrix::zeros(1, 4);
        let err = run_distributed_update(&inst.theta, &shards, &TttConfig::default(), &plan).unwrap_err();
        assert!(matches!(err, Error::Worker { worker: 1, .. }), "{err}");
        assert!(grad_accumulate_sharded(&inst.theta, &shards[..1], &plan).is_err());
    }

    #[test]
    fn minibatch_split_covers_rows() {
        let inst = instance(7, 8);
        let mbs = split_minibatches(&inst.k, &inst.vp, PER_FRAME, 3).unwrap();
        assert_eq!(mbs.iter().map(|m| m.rows()).collect::<Vec<_>>(), vec![9, 9, 3]);
        let parts: Vec<&Matrix> = mbs.iter().map(|m| &m.k).collect();
        assert_eq!(Matrix::vstack(&parts, 4).unwrap(), inst.k);
    }
}
