use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::EntropyScaleConfig;
use crate::error::{Error, Result};
use crate::model::{Execution, GlobalMode, ModelConfig};
use crate::sharded::Strategy;
use crate::ttt::{ConvTarget, InnerLoss, TttConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Shard,
    Spectral,
    Query,
    Serde,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Grad, Suite::Shard, Suite::Spectral, Suite::Query, Suite::Serde];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Shard => "shard",
            Suite::Spectral => "spectral",
            Suite::Query => "query",
            Suite::Serde => "serde",
        }
    }
}

/// Suites named by a `suite` value: `all` or a comma-separated list.
pub fn parse_suites(s: &str) -> Result<Vec<Suite>> {
    if s == "all" {
        return Ok(Suite::ALL.to_vec());
    }
    s.split(',')
        .map(|name| {
            Suite::ALL
                .into_iter()
                .find(|suite| suite.as_str() == name.trim())
                .ok_or_else(|| Error::Config(format!("unknown suite `{name}`")))
        })
        .collect()
}

/// Every tunable of every command. Resolved as defaults, then a
/// `key = value` file, then command-line overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub expansion: usize,
    pub ttt: TttConfig,
    pub entropy: EntropyScaleConfig,
    pub seed: u64,
    pub modes: Vec<GlobalMode>,
    pub frames: Vec<usize>,
    pub tokens_per_frame: usize,
    pub precision: Precision,
    pub warmup: usize,
    pub repeats: usize,
    pub workers: usize,
    pub strategy: Strategy,
    pub minibatch_frames: usize,
    pub resident_limit: usize,
    pub max_memory_mb: usize,
    pub out: PathBuf,
    pub scene: PathBuf,
    pub query_frames: usize,
    pub query_out: Option<PathBuf>,
    pub suite: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            layers: m.layers,
            d: m.d,
            heads: m.heads,
            expansion: m.expansion,
            ttt: m.ttt,
            entropy: m.entropy,
            seed: m.seed,
            modes: vec![GlobalMode::Ttt, GlobalMode::SoftmaxReference],
            frames: vec![32, 64, 128, 256],
            tokens_per_frame: 64,
            precision: Precision::F64,
            warmup: 1,
            repeats: 3,
            workers: 1,
            strategy: Strategy::Contiguous,
            minibatch_frames: 0,
            resident_limit: 1,
            max_memory_mb: 4096,
            out: PathBuf::from("scaling.csv"),
            scene: PathBuf::from("scene.vgt3"),
            query_frames: 1,
            query_out: None,
            suite: "all".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "layers" => self.layers = parse(key, v)?,
            "d" | "dim" => self.d = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "expansion" => self.expansion = parse(key, v)?,
            "steps" => self.ttt.steps = parse(key, v)?,
            "lr" => self.ttt.lr = parse(key, v)?,
            "ns_iters" => self.ttt.ns_iters = parse(key, v)?,
            "eps" => self.ttt.eps = parse(key, v)?,
            "conv_kernel_size" => self.ttt.conv_kernel_size = parse(key, v)?,
            "conv_target" => self.ttt.conv_target = ConvTarget::from_str(v)?,
            "loss" => self.ttt.loss = InnerLoss::from_str(v)?,
            "scale_lr_by_minibatches" => self.ttt.scale_lr_by_minibatches = parse(key, v)?,
            "entropy_scaling" => self.entropy.enabled = parse(key, v)?,
            "entropy_train_tokens" => self.entropy.n_train_tokens = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "modes" => {
                self.modes = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| GlobalMode::from_str(s.trim()))
                    .collect::<Result<_>>()?
            }
            "frames" => self.frames = parse_list(key, v)?,
            "tokens_per_frame" => self.tokens_per_frame = parse(key, v)?,
            "precision" => self.precision = Precision::from_str(v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "strategy" => self.strategy = Strategy::from_str(v)?,
            "minibatch_frames" => self.minibatch_frames = parse(key, v)?,
            "resident_limit" => self.resident_limit = parse(key, v)?,
            "max_memory_mb" => self.max_memory_mb = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "scene" => self.scene = PathBuf::from(v),
            "query_frames" => self.query_frames = parse(key, v)?,
            "query_out" => self.query_out = (!v.is_empty()).then(|| PathBuf::from(v)),
            "suite" => {
                parse_suites(v)?;
                self.suite = v.to_string();
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// `key=value` with the value split at the first `=`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Applies a config file: one `key = value` per line, `#` starts a
    /// comment, blank lines are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        self.apply_text(&text)
    }

    /// Fully resolved settings in a fixed order; feeding them back through
    /// [`RunConfig::set`] reproduces this config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("expansion", self.expansion.to_string()),
            ("steps", self.ttt.steps.to_string()),
            ("lr", format!("{:?}", self.ttt.lr)),
            ("ns_iters", self.ttt.ns_iters.to_string()),
            ("eps", format!("{:?}", self.ttt.eps)),
            ("conv_kernel_size", self.ttt.conv_kernel_size.to_string()),
            ("conv_target", self.ttt.conv_target.as_str().into()),
            ("loss", self.ttt.loss.as_str().into()),
            ("scale_lr_by_minibatches", self.ttt.scale_lr_by_minibatches.to_string()),
            ("entropy_scaling", self.entropy.enabled.to_string()),
            ("entropy_train_tokens", self.entropy.n_train_tokens.to_string()),
            ("seed", self.seed.to_string()),
            ("modes", self.modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",")),
            ("frames", join(&self.frames)),
            ("tokens_per_frame", self.tokens_per_frame.to_string()),
            ("precision", self.precision.as_str().into()),
            ("warmup", self.warmup.to_string()),
            ("repeats", self.repeats.to_string()),
            ("workers", self.workers.to_string()),
            ("strategy", self.strategy.as_str().into()),
            ("minibatch_frames", self.minibatch_frames.to_string()),
            ("resident_limit", self.resident_limit.to_string()),
            ("max_memory_mb", self.max_memory_mb.to_string()),
            ("out", self.out.display().to_string()),
            ("scene", self.scene.display().to_string()),
            ("query_frames", self.query_frames.to_string()),
            (
                "query_out",
                self.query_out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("suite", self.suite.clone()),
        ]
    }

    /// One `# key=value` line per setting.
    pub fn echo(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("# {k}={v}\n"))
            .collect()
    }

    pub fn model_config(&self, mode: GlobalMode) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d: self.d,
            heads: self.heads,
            expansion: self.expansion,
            global_mode: mode,
            ttt: self.ttt.clone(),
            entropy: self.entropy,
            seed: self.seed,
        }
    }

    /// Patch grid for `tokens_per_frame`: `h` is the largest divisor not
    /// above the square root, `w = tokens_per_frame / h`.
    pub fn grid(&self) -> Result<(usize, usize)> {
        grid_for(self.tokens_per_frame)
    }

    pub fn execution(&self) -> Result<Execution> {
        match (self.workers, self.minibatch_frames) {
            (0, _) => Err(Error::Config("workers must be >= 1".into())),
            (1, 0) => Ok(Execution::InMemory),
            (1, mf) => Ok(Execution::Offload {
                minibatch_frames: mf,
                resident_limit: self.resident_limit,
            }),
            (w, 0) => Ok(Execution::Distributed {
                workers: w,
                strategy: self.strategy,
            }),
            _ => Err(Error::Config(
                "workers > 1 and minibatch_frames > 0 cannot be combined".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(GlobalMode::Ttt).validate()?;
        self.grid()?;
        self.execution()?;
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.resident_limit == 0 {
            return Err(Error::Config("resident_limit must be >= 1".into()));
        }
        if self.query_frames == 0 {
            return Err(Error::Config("query_frames must be >= 1".into()));
        }
        if self.frames.contains(&0) {
            return Err(Error::Config("frame counts must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn grid_for(tokens_per_frame: usize) -> Result<(usize, usize)> {
    if tokens_per_frame == 0 {
        return Err(Error::Config("tokens_per_frame must be >= 1".into()));
    }
    let h = (1..=tokens_per_frame)
        .take_while(|h| h * h <= tokens_per_frame)
        .filter(|h| tokens_per_frame % h == 0)
        .last()
        .unwrap_or(1);
    Ok((h, tokens_per_frame / h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_and_reparse() {
        let c = RunConfig::default();
        let mut back = RunConfig {
            layers: 1,
            frames: vec![],
            ..RunConfig::default()
        };
        for (k, v) in c.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
        assert!(c.echo().lines().all(|l| l.starts_with("# ")));
        assert!(c.echo().contains("# frames=32,64,128,256\n"));
    }

    #[test]
    fn every_key_round_trips_non_default() {
        let mut c = RunConfig::default();
        c.apply_text(
            "layers = 2\nd=16\nheads=2\nexpansion=2\nsteps=3\nlr=0.05\nns_iters=4\neps=1e-6\n\
             conv_kernel_size=5\nconv_target=keys\nloss=residual\nscale_lr_by_minibatches=true\n\
             entropy_scaling=false\nentropy_train_tokens=100\nseed=9\nmodes=softmax\nframes=8\n\
             tokens_per_frame=12\nprecision=f32\nwarmup=0\nrepeats=5\nworkers=2\nstrategy=round_robin\n\
             minibatch_frames=0\nresident_limit=2\nmax_memory_mb=10\nout=a.csv\nscene=b.vgt3\n\
             query_frames=3\nquery_out=c.csv\nsuite=grad,serde\n",
        )
        .unwrap();
        let mut back = RunConfig::default();
        for (k, v) in c.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
        assert_eq!(c.modes, vec![GlobalMode::SoftmaxReference]);
        assert_eq!(c.execution().unwrap(), Execution::Distributed { workers: 2, strategy: Strategy::RoundRobin });
    }

    #[test]
    fn comments_and_errors() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\nseed = 5 # trailing\n").unwrap();
        assert_eq!(c.seed, 5);
        let err = c.apply_text("seed=1\nbogus=2\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(c.set("steps", "two").is_err());
        assert!(c.set_pair("steps").is_err());
        assert!(c.set("suite", "grad,nope").is_err());
        assert!(c.set("modes", "quadratic").is_err());
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_for(64).unwrap(), (8, 8));
        assert_eq!(grid_for(12).unwrap(), (3, 4));
        assert_eq!(grid_for(7).unwrap(), (1, 7));
        assert_eq!(grid_for(1).unwrap(), (1, 1));
        assert!(grid_for(0).is_err());
    }

    #[test]
    fn execution_selection() {
        let mut c = RunConfig::default();
        assert_eq!(c.execution().unwrap(), Execution::InMemory);
        c.minibatch_frames = 4;
        assert!(matches!(c.execution().unwrap(), Execution::Offload { minibatch_frames: 4, .. }));
        c.workers = 2;
        assert!(c.execution().is_err());
        c.workers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn suites() {
        assert_eq!(parse_suites("all").unwrap().len(), 5);
        assert_eq!(parse_suites("grad").unwrap(), vec![Suite::Grad]);
        assert!(parse_suites("").is_err());
    }
}
