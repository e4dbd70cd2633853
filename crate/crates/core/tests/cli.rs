use std::path::Path;
use std::process::{Command, Output};

fn vgt3(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgt3"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 8] = ["--dim", "16", "--heads", "2", "--layers", "2", "--tokens-per-frame", "9"];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&SMALL);
    v
}

#[test]
fn verify_default_seed_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = vgt3(dir.path(), &["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("[PASS]")).count(), 5);
}

#[test]
fn verify_suite_filter() {
    let dir = tempfile::tempdir().unwrap();
    let o = vgt3(dir.path(), &["verify", "--suite", "grad"]);
    assert_eq!(o.status.code(), Some(0));
    let results: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with('[')).map(String::from).collect();
    assert_eq!(results.len(), 1);
    assert!(results[0].starts_with("[PASS] grad:"));
}

#[test]
fn verify_fault_hooks_fail() {
    let dir = tempfile::tempdir().unwrap();
    for (fault, suite) in [("ns-coeffs", "spectral"), ("shard-worker", "shard")] {
        let o = vgt3(dir.path(), &["verify", "--suite", suite, "--fault", fault]);
        assert_eq!(o.status.code(), Some(1), "{fault}");
        assert!(stdout(&o).contains(&format!("[FAIL] {suite}")));
    }
}

#[test]
fn every_command_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = vgt3(dir.path(), &["--set", "lr=0.05", "verify", "--suite", "serde"]);
    let out = stdout(&o);
    assert!(out.contains("# lr=0.05\n"));
    assert!(out.contains("# suite=serde\n"));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "seed = 5\nsteps = 3\n").unwrap();
    let o = vgt3(dir.path(), &["--config", "run.cfg", "--seed", "6", "verify", "--suite", "serde"]);
    let out = stdout(&o);
    assert!(out.contains("# seed=6\n"));
    assert!(out.contains("# steps=3\n"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vgt3(dir.path(), &["bench", "--oops"]).status.code(), Some(2));
    assert_eq!(vgt3(dir.path(), &["--set", "nope=1", "verify"]).status.code(), Some(2));
    assert_eq!(vgt3(dir.path(), &["--set", "steps=x", "verify"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.cfg"), "frames = 8\ncolour = blue\n").unwrap();
    let o = vgt3(dir.path(), &["--config", "bad.cfg", "verify"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vgt3(dir.path(), &["query", "--scene", "missing.vgt3"]).status.code(), Some(3));
    assert_eq!(vgt3(dir.path(), &["fit", "--csv", "missing.csv"]).status.code(), Some(3));
    std::fs::write(dir.path().join("junk.vgt3"), b"not a scene").unwrap();
    assert_eq!(vgt3(dir.path(), &["query", "--scene", "junk.vgt3"]).status.code(), Some(3));
    let o = vgt3(dir.path(), &with_small(&["bench", "--frames", "2", "--out", "no/such/dir.csv"]));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn map_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.vgt3", "b.vgt3"] {
        let o = vgt3(dir.path(), &with_small(&["map", "--frames", "4", "--out", name]));
        assert_eq!(o.status.code(), Some(0));
        assert!(stdout(&o).contains("layers=2"));
    }
    let a = std::fs::read(dir.path().join("a.vgt3")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.vgt3")).unwrap());
    // 40-byte header + 2 layers of w1, w3, w2 (16 x 64 f32 each)
    assert_eq!(a.len(), 40 + 2 * 3 * 16 * 64 * 4);
    assert_eq!(&a[..4], b"VGT3");
}

#[test]
fn map_with_offload_and_workers_matches_format() {
    let dir = tempfile::tempdir().unwrap();
    let o = vgt3(dir.path(), &with_small(&["map", "--frames", "5", "--out", "o.vgt3", "--minibatch-frames", "2"]));
    assert_eq!(o.status.code(), Some(0));
    let o = vgt3(dir.path(), &with_small(&["map", "--frames", "5", "--out", "w.vgt3", "--workers", "3"]));
    assert_eq!(o.status.code(), Some(0));
    let o = vgt3(dir.path(), &with_small(&["map", "--frames", "5", "--workers", "2", "--minibatch-frames", "2"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn query_keeps_scene_and_rejects_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vgt3(dir.path(), &with_small(&["map", "--frames", "3", "--out", "s.vgt3"])).status.code(), Some(0));
    let before = std::fs::read(dir.path().join("s.vgt3")).unwrap();

    let o = vgt3(dir.path(), &with_small(&["query", "--scene", "s.vgt3", "--query-frames", "2", "--out", "q.csv"]));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("(unchanged)"));
    let q = std::fs::read_to_string(dir.path().join("q.csv")).unwrap();
    assert!(q.starts_with("frame_id,mean,std,min,max,"));
    assert_eq!(q.lines().count(), 3);
    assert_eq!(std::fs::read(dir.path().join("s.vgt3")).unwrap(), before);

    let mut args = with_small(&["query", "--scene", "s.vgt3", "--out", "q2.csv"]);
    args.extend_from_slice(&["--steps", "3"]);
    let o = vgt3(dir.path(), &args);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("q2.csv").exists());
    assert_eq!(std::fs::read(dir.path().join("s.vgt3")).unwrap(), before);
}

#[test]
fn bench_rows_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let o = vgt3(
        dir.path(),
        &with_small(&["bench", "--frames", "8", "--repeats", "1", "--out", "s.csv"]),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "mode,n_frames,tokens_per_frame,steps,wall_ms,flops_model,peak_resident_minibatches,seed");
    assert!(lines[1].starts_with("ttt,8,9,2,"));
    assert!(lines[2].starts_with("softmax_reference,8,9,2,"));

    // two fewer distinct sizes than needed
    assert_eq!(vgt3(dir.path(), &["fit", "--csv", "s.csv"]).status.code(), Some(2));
    let o = vgt3(
        dir.path(),
        &with_small(&["bench", "--modes", "ttt", "--frames", "2,4", "--repeats", "1", "--out", "s.csv"]),
    );
    assert_eq!(o.status.code(), Some(0));
    let o = vgt3(dir.path(), &["fit", "--csv", "s.csv", "--mode", "ttt"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("ttt scaling exponent:"));
}

#[test]
fn oom_scale_bench_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let o = vgt3(dir.path(), &["bench", "--frames", "1000000", "--out", "s.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("max_memory_mb"));
    assert!(!dir.path().join("s.csv").exists());
}
