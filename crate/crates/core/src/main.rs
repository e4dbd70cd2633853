use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vgt3::bench::{cmd_bench, cmd_fit, cmd_map, cmd_query, cmd_verify, Fault, RunConfig};
use vgt3::Error;

/// Fast-weight global attention toy stack: benchmarks, verification and
/// scene mapping/querying.
#[derive(Parser, Debug)]
#[command(name = "vgt3", version)]
struct Cli {
    /// key = value config file applied over the defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one setting (repeatable), e.g. --set lr=0.05
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tokens_per_frame: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct ExecArgs {
    /// Workers for the distributed update (1 = single process)
    #[arg(long)]
    workers: Option<usize>,
    /// Frames per offloaded minibatch (0 = keep everything resident)
    #[arg(long)]
    minibatch_frames: Option<usize>,
    #[arg(long)]
    resident_limit: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time forward passes over a frame sweep and append CSV rows
    Bench {
        /// Comma-separated global modes: ttt, softmax_reference
        #[arg(long)]
        modes: Option<String>,
        /// Comma-separated frame counts
        #[arg(long)]
        frames: Option<String>,
        #[arg(long)]
        precision: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Run verification suites; exit 1 on any failure
    Verify {
        /// all, or a comma-separated subset of grad,shard,spectral,query,serde
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Map a synthetic scene and write its fast weights
    Map {
        #[arg(long)]
        frames: Option<usize>,
        /// Scene file to write
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Query a mapped scene with new views
    Query {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        query_frames: Option<usize>,
        /// Per-frame statistics CSV
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Fit the log-log scaling exponent of wall time in frame count
    Fit {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "ttt")]
        mode: String,
    },
}

fn push<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl ModelArgs {
    fn overrides(&self, out: &mut Vec<(&'static str, String)>) {
        push(out, "layers", &self.layers);
        push(out, "d", &self.dim);
        push(out, "heads", &self.heads);
        push(out, "steps", &self.steps);
        push(out, "tokens_per_frame", &self.tokens_per_frame);
    }
}

impl ExecArgs {
    fn overrides(&self, out: &mut Vec<(&'static str, String)>) {
        push(out, "workers", &self.workers);
        push(out, "minibatch_frames", &self.minibatch_frames);
        push(out, "resident_limit", &self.resident_limit);
    }
}

fn flag_overrides(cmd: &Command) -> Vec<(&'static str, String)> {
    let mut o = Vec::new();
    match cmd {
        Command::Bench {
            modes,
            frames,
            precision,
            repeats,
            out,
            model,
            exec,
        } => {
            push(&mut o, "modes", modes);
            push(&mut o, "frames", frames);
            push(&mut o, "precision", precision);
            push(&mut o, "repeats", repeats);
            push(&mut o, "out", &path_str(out));
            model.overrides(&mut o);
            exec.overrides(&mut o);
        }
        Command::Verify { suite, .. } => push(&mut o, "suite", suite),
        Command::Map {
            frames,
            out,
            model,
            exec,
        } => {
            push(&mut o, "frames", frames);
            push(&mut o, "scene", &path_str(out));
            model.overrides(&mut o);
            exec.overrides(&mut o);
        }
        Command::Query {
            scene,
            query_frames,
            out,
            model,
        } => {
            push(&mut o, "scene", &path_str(scene));
            push(&mut o, "query_frames", query_frames);
            push(&mut o, "query_out", &path_str(out));
            model.overrides(&mut o);
        }
        Command::Fit { .. } => {}
    }
    o
}

fn resolve(cli: &Cli) -> vgt3::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read config: {io}")),
            other => other,
        })?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for (k, v) in flag_overrides(&cli.command) {
        cfg.set(k, &v)?;
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Fingerprint(_) | Error::Shape { .. } => 2,
        Error::Io(_) | Error::Csv(_) | Error::Format(_) => 3,
        _ => 1,
    }
}

fn run(cli: &Cli, stdout: &mut dyn Write) -> vgt3::Result<u8> {
    let cfg = resolve(cli)?;
    write!(stdout, "{}", cfg.echo())?;
    match &cli.command {
        Command::Bench { .. } => {
            cmd_bench(&cfg, stdout)?;
            writeln!(stdout, "wrote {}", cfg.out.display())?;
        }
        Command::Verify { fault, .. } => {
            let fault = fault.as_deref().map(str::parse::<Fault>).transpose()?;
            let results = cmd_verify(&cfg, fault, stdout)?;
            if results.iter().any(|r| !r.passed) {
                return Ok(1);
            }
        }
        Command::Map { .. } => {
            cmd_map(&cfg, stdout)?;
        }
        Command::Query { .. } => {
            cmd_query(&cfg, stdout)?;
        }
        Command::Fit { csv, mode } => {
            cmd_fit(csv, mode, stdout)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
