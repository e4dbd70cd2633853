use proptest::prelude::*;
use vgt3::attention::{entropy_scale, EntropyScaleConfig};
use vgt3::bench::{fit_scaling_exponent, BenchRecord, RunConfig};
use vgt3::model::SceneState;
use vgt3::numerics::{rng_normal, Matrix, Rng};
use vgt3::sharded::{make_shard_plan, run_offload_update, shard_rows, split_minibatches, HostStore, Strategy};
use vgt3::sharded::grad_accumulate_sharded;
use vgt3::ttt::{inner_grad, ttt_update, FastWeights, TttConfig};

fn data(seed: u64, frames: usize, per_frame: usize) -> (FastWeights, Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    let theta = FastWeights::seeded(4, 3, &mut rng);
    let rows = frames * per_frame;
    (theta, rng_normal(&mut rng, rows, 4), rng_normal(&mut rng, rows, 4))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_plan_sums_to_full_gradient(
        seed in any::<u64>(),
        frames in 1usize..20,
        workers in 1usize..10,
        rr in any::<bool>(),
    ) {
        let (theta, k, vp) = data(seed, frames, 3);
        let strategy = if rr { Strategy::RoundRobin } else { Strategy::Contiguous };
        let plan = make_shard_plan(frames, workers, strategy).unwrap();
        prop_assert_eq!(plan.assignments.len(), frames);
        let shards = shard_rows(&k, &vp, 3, &plan).unwrap();
        prop_assert_eq!(shards.iter().map(|s| s.rows()).sum::<usize>(), frames * 3);
        let g = grad_accumulate_sharded(&theta, &shards, &plan).unwrap();
        let full = inner_grad(&theta, &k, &vp).unwrap();
        prop_assert!(g.max_rel_diff(&full).unwrap() <= 1e-12);
    }

    #[test]
    fn offload_respects_limit_and_matches(
        seed in any::<u64>(),
        frames in 1usize..12,
        per_batch in 1usize..4,
        limit in 1usize..5,
    ) {
        let (theta, k, vp) = data(seed, frames, 2);
        let cfg = TttConfig::default();
        let mbs = split_minibatches(&k, &vp, 2, per_batch).unwrap();
        let n = mbs.len();
        let mut store = HostStore::new(mbs);
        let (w, rep) = run_offload_update(&theta, &mut store, limit, &cfg).unwrap();
        prop_assert!(rep.peak_resident_minibatches <= limit);
        prop_assert_eq!(store.parked(), n);
        prop_assert_eq!(rep.loads, rep.stores);
        let reference = ttt_update(&theta, &k, &vp, &cfg).unwrap();
        prop_assert!(w.max_rel_diff(&reference).unwrap() <= 1e-10);
    }

    #[test]
    fn scene_bytes_round_trip(seed in any::<u64>(), layers in 0usize..3, d in 1usize..6, e in 1usize..4, frames in any::<u32>()) {
        let mut rng = Rng::new(seed);
        let scene = SceneState {
            config_hash: seed.rotate_left(7),
            seed,
            n_frames: frames,
            layers: (0..layers).map(|_| FastWeights::seeded(d, e, &mut rng)).collect(),
        };
        let bytes = scene.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), SceneState::encoded_len(layers, d, d * e));
        let back = SceneState::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, scene.quantized());
    }

    #[test]
    fn entropy_factor_is_monotone_and_at_least_one(a in 1usize..10_000_000, b in 1usize..10_000_000) {
        let cfg = EntropyScaleConfig::default();
        let (lo, hi) = (a.min(b), a.max(b));
        let (fl, fh) = (entropy_scale(1.0, lo, &cfg), entropy_scale(1.0, hi, &cfg));
        prop_assert!(fl >= 1.0);
        prop_assert!(fh >= fl);
    }

    #[test]
    fn fit_recovers_slope_from_appended_rows(p in 0.5f64..2.5, reps in 1usize..3) {
        let mut rows = Vec::new();
        for _ in 0..reps {
            for n in [32usize, 64, 128, 256] {
                rows.push(BenchRecord {
                    mode: "ttt".into(),
                    n_frames: n,
                    tokens_per_frame: 64,
                    steps: 2,
                    wall_ms: 0.5 * (n as f64).powf(p),
                    flops_model: 0,
                    peak_resident_minibatches: 1,
                    seed: 42,
                });
            }
        }
        prop_assert!((fit_scaling_exponent(&rows, "ttt").unwrap() - p).abs() < 1e-9);
    }

    #[test]
    fn config_echo_reparses(seed in any::<u64>(), steps in 0usize..5, lr in 0.0f64..1.0, frames in prop::collection::vec(1usize..500, 1..5)) {
        let mut c = RunConfig { seed, frames, ..RunConfig::default() };
        c.ttt.steps = steps;
        c.ttt.lr = lr;
        let mut back = RunConfig::default();
        for line in c.echo().lines() {
            back.set_pair(line.trim_start_matches("# ")).unwrap();
        }
        prop_assert_eq!(back, c);
    }
}
