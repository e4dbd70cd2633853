use std::io::Write;
use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::config::{parse_suites, Precision, RunConfig};
use super::fit::fit_csv;
use super::records::{append_records, BenchRecord};
use super::verify::{run_suite, Fault, SuiteResult};
use crate::attention::flops_sdpa;
use crate::error::{Error, Result};
use crate::model::{tokenize_frames, tokenize_synthetic, Execution, GlobalMode, Model, SceneState, TokenGrid};
use crate::numerics::{Matrix, Real};
use crate::ttt::flops_ttt;

/// Median wall time in milliseconds of `repeats` runs after `warmup`
/// untimed runs, plus the value of the last run.
pub fn time_median<R>(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<R>) -> Result<(f64, R)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let r = f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        last = Some(r);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    Ok((median, last.expect("at least one repeat")))
}

/// Analytic cost of all global layers for `n_frames` frames.
pub fn flops_model(cfg: &RunConfig, mode: GlobalMode, n_frames: usize) -> u64 {
    let n = (n_frames * (cfg.tokens_per_frame + crate::model::DEFAULT_SPECIALS)) as u64;
    let d = cfg.d as u64;
    let per_layer = match mode {
        GlobalMode::Ttt => flops_ttt(
            n,
            d,
            (cfg.d * cfg.expansion) as u64,
            cfg.ttt.steps as u64,
            cfg.ttt.ns_iters as u64,
        ),
        GlobalMode::SoftmaxReference => flops_sdpa(n, d, cfg.heads as u64),
    };
    cfg.layers as u64 * per_layer
}

/// Rough peak working set of one forward pass in bytes.
pub fn estimate_bytes(cfg: &RunConfig, mode: GlobalMode, n_frames: usize) -> u128 {
    let n = (n_frames * (cfg.tokens_per_frame + crate::model::DEFAULT_SPECIALS)) as u128;
    let d = cfg.d as u128;
    let m = (cfg.d * cfg.expansion) as u128;
    let b = cfg.precision.bytes() as u128;
    let activations = 12 * n * d;
    let extra = match mode {
        GlobalMode::Ttt => 8 * n * m + 12 * d * m * cfg.layers as u128,
        GlobalMode::SoftmaxReference => 64 * n + 4 * d * d * cfg.layers as u128,
    };
    (activations + extra) * b
}

fn check_memory(cfg: &RunConfig, mode: GlobalMode, n_frames: usize) -> Result<()> {
    let need = estimate_bytes(cfg, mode, n_frames);
    let limit = cfg.max_memory_mb as u128 * (1 << 20);
    if need > limit {
        return Err(Error::Config(format!(
            "{} with {n_frames} frames needs about {} MiB, above max_memory_mb={}; \
             lower frames, tokens_per_frame or d, or raise max_memory_mb",
            mode.as_str(),
            need >> 20,
            cfg.max_memory_mb
        )));
    }
    Ok(())
}

fn bench_one<T: Real>(cfg: &RunConfig, mode: GlobalMode, n_frames: usize) -> Result<BenchRecord> {
    let (h, w) = cfg.grid()?;
    let model: Model<T> = Model::new(cfg.model_config(mode))?;
    let tokens: TokenGrid<T> = tokenize_synthetic(n_frames, h, w, cfg.d, cfg.seed)?.cast();
    let exec = match mode {
        GlobalMode::Ttt => cfg.execution()?,
        GlobalMode::SoftmaxReference => Execution::InMemory,
    };
    let (wall_ms, out) = time_median(cfg.warmup, cfg.repeats, || model.forward_with(&tokens, exec))?;
    if !out.tokens.tokens.is_finite() {
        return Err(Error::Contract(format!("{} forward produced non-finite tokens", mode.as_str())));
    }
    Ok(BenchRecord {
        mode: mode.as_str().to_string(),
        n_frames,
        tokens_per_frame: cfg.tokens_per_frame,
        steps: cfg.ttt.steps,
        wall_ms,
        flops_model: flops_model(cfg, mode, n_frames),
        peak_resident_minibatches: out.peak_resident_minibatches,
        seed: cfg.seed,
    })
}

/// Times the forward pass for every `(mode, n_frames)` and appends one CSV
/// row per pair to `cfg.out`.
pub fn cmd_bench(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    if cfg.frames.is_empty() || cfg.modes.is_empty() {
        return Err(Error::Config("bench needs at least one mode and one frame count".into()));
    }
    for &mode in &cfg.modes {
        for &n in &cfg.frames {
            check_memory(cfg, mode, n)?;
        }
    }
    let mut out = Vec::new();
    for &mode in &cfg.modes {
        for &n in &cfg.frames {
            let rec = match cfg.precision {
                Precision::F32 => bench_one::<f32>(cfg, mode, n)?,
                Precision::F64 => bench_one::<f64>(cfg, mode, n)?,
            };
            append_records(&cfg.out, std::slice::from_ref(&rec))?;
            writeln!(
                log,
                "{} n_frames={} wall_ms={:.3} flops_model={} peak_resident_minibatches={}",
                rec.mode, rec.n_frames, rec.wall_ms, rec.flops_model, rec.peak_resident_minibatches
            )?;
            out.push(rec);
        }
    }
    Ok(out)
}

fn single_frame_count(cfg: &RunConfig) -> Result<usize> {
    match cfg.frames.as_slice() {
        [n] => Ok(*n),
        other => Err(Error::Config(format!(
            "map needs exactly one frame count, got {other:?}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapSummary {
    pub layers: usize,
    pub bytes: usize,
    pub wall_ms: f64,
}

/// Maps a synthetic scene with the fast-weight model and writes its scene
/// state to `cfg.scene`.
pub fn cmd_map(cfg: &RunConfig, log: &mut dyn Write) -> Result<MapSummary> {
    cfg.validate()?;
    let n = single_frame_count(cfg)?;
    check_memory(cfg, GlobalMode::Ttt, n)?;
    let (h, w) = cfg.grid()?;
    let model: Model = Model::new(cfg.model_config(GlobalMode::Ttt))?;
    let tokens = tokenize_synthetic(n, h, w, cfg.d, cfg.seed)?;
    let start = Instant::now();
    let out = model.forward_with(&tokens, cfg.execution()?)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let bytes = out.scene.to_bytes()?;
    std::fs::write(&cfg.scene, &bytes).map_err(|e| Error::io_at(&cfg.scene, e))?;
    let summary = MapSummary {
        layers: out.scene.layers.len(),
        bytes: bytes.len(),
        wall_ms,
    };
    writeln!(
        log,
        "mapped {n} frames: layers={} bytes={} wall_ms={:.3} scene={}",
        summary.layers,
        summary.bytes,
        summary.wall_ms,
        cfg.scene.display()
    )?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameStats {
    pub frame_id: u64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub readout: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub wall_ms: f64,
    pub scene_sha256: String,
    pub frames: Vec<FrameStats>,
}

fn frame_stats(frame_id: u64, tokens: &Matrix, readout: &Matrix) -> FrameStats {
    let data = tokens.data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let mut r = [0.0; 3];
    for row in 0..readout.rows() {
        for (c, v) in r.iter_mut().enumerate() {
            *v += readout.get(row, c) / readout.rows() as f64;
        }
    }
    FrameStats {
        frame_id,
        mean,
        std: var.sqrt(),
        min: data.iter().copied().fold(f64::INFINITY, f64::min),
        max: data.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        readout: r,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs `query_frames` new views of the mapped scene through the frozen
/// stack. The scene file is checksummed before and after.
pub fn cmd_query(cfg: &RunConfig, log: &mut dyn Write) -> Result<QueryOutcome> {
    cfg.validate()?;
    let before = std::fs::read(&cfg.scene).map_err(|e| Error::io_at(&cfg.scene, e))?;
    let scene = SceneState::from_bytes(&before)?;
    let model: Model = Model::new(cfg.model_config(GlobalMode::Ttt))?;
    model.verify_scene(&scene)?;

    let (h, w) = cfg.grid()?;
    let first = u64::from(scene.n_frames);
    let ids: Vec<u64> = (first..first + cfg.query_frames as u64).collect();
    let queries = tokenize_frames(&ids, h, w, cfg.d, cfg.seed)?;
    let (wall_ms, out) = time_median(cfg.warmup, cfg.repeats, || model.query(&scene, &queries))?;
    let readout = model.readout(&out)?;

    let after = std::fs::read(&cfg.scene).map_err(|e| Error::io_at(&cfg.scene, e))?;
    if after != before {
        return Err(Error::Contract("scene file changed during query".into()));
    }
    let per = out.tokens_per_frame();
    let frames: Vec<FrameStats> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| frame_stats(id, &out.frame_rows(i), &readout.slice_rows(i * per, (i + 1) * per)))
        .collect();
    let outcome = QueryOutcome {
        wall_ms,
        scene_sha256: sha256_hex(&before),
        frames,
    };

    let mut table = String::from("frame_id,mean,std,min,max,readout_x,readout_y,readout_z\n");
    for f in &outcome.frames {
        table.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            f.frame_id, f.mean, f.std, f.min, f.max, f.readout[0], f.readout[1], f.readout[2]
        ));
    }
    if let Some(path) = &cfg.query_out {
        std::fs::write(path, &table).map_err(|e| Error::io_at(path, e))?;
    }
    write!(log, "{table}")?;
    writeln!(
        log,
        "queried {} frames: wall_ms={:.3} scene_sha256={} (unchanged)",
        outcome.frames.len(),
        outcome.wall_ms,
        outcome.scene_sha256
    )?;
    Ok(outcome)
}

/// Runs the selected suites; the caller decides the exit status.
pub fn cmd_verify(cfg: &RunConfig, fault: Option<Fault>, log: &mut dyn Write) -> Result<Vec<SuiteResult>> {
    let mut results = Vec::new();
    for suite in parse_suites(&cfg.suite)? {
        let r = run_suite(suite, cfg.seed, fault)?;
        writeln!(
            log,
            "[{}] {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            suite.as_str(),
            r.detail
        )?;
        results.push(r);
    }
    Ok(results)
}

pub fn cmd_fit(csv: &Path, mode: &str, log: &mut dyn Write) -> Result<f64> {
    let mode = mode.parse::<GlobalMode>()?.as_str();
    let p = fit_csv(csv, mode)?;
    writeln!(log, "{mode} scaling exponent: {p:.4}")?;
    Ok(p)
}
