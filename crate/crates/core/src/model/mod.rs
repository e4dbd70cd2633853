//! Toy alternating-attention stack: frame-wise self-attention followed by a
//! global layer, repeated. The global layer is either quadratic softmax
//! attention or the fast-weight layer; in the latter case the fitted fast
//! weights form a queryable scene state.

mod scene;
mod tokens;

pub use scene::{SceneState, FORMAT_VERSION, HEADER_BYTES, MAGIC};
pub use tokens::{tokenize_frames, tokenize_synthetic, TokenGrid, DEFAULT_SPECIALS};

use sha2::{Digest, Sha256};

use crate::attention::{attention_block_reference, AttentionParams, EntropyScaleConfig};
use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, rng_normal, Matrix, Real, Rng};
use crate::sharded::{
    make_shard_plan, run_distributed_update, run_offload_update, shard_rows, split_minibatches,
    HostStore, Strategy,
};
use crate::ttt::{ttt_block, ttt_output, ttt_targets, TttConfig, TttLayerParams, TttMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalMode {
    SoftmaxReference,
    Ttt,
}

impl GlobalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GlobalMode::SoftmaxReference => "softmax_reference",
            GlobalMode::Ttt => "ttt",
        }
    }
}

impl std::str::FromStr for GlobalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_reference" | "softmax" => Ok(Self::SoftmaxReference),
            "ttt" => Ok(Self::Ttt),
            other => Err(Error::Config(format!("unknown global mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub expansion: usize,
    pub global_mode: GlobalMode,
    pub ttt: TttConfig,
    pub entropy: EntropyScaleConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d: 128,
            heads: 4,
            expansion: 4,
            global_mode: GlobalMode::Ttt,
            ttt: TttConfig::default(),
            entropy: EntropyScaleConfig::default(),
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} must be a positive multiple of heads={}",
                self.d, self.heads
            )));
        }
        if self.expansion == 0 {
            return Err(Error::Config("expansion must be >= 1".into()));
        }
        self.ttt.validate()
    }

    pub fn hidden(&self) -> usize {
        self.d * self.expansion
    }

    /// Canonical text form of every field, in a fixed order.
    pub fn canonical(&self) -> String {
        format!(
            "layers={};d={};heads={};expansion={};global_mode={};steps={};lr={:?};ns_iters={};eps={:?};\
             conv_kernel_size={};conv_target={};loss={};scale_lr_by_minibatches={};\
             entropy_n_train={};entropy_enabled={};seed={}",
            self.layers,
            self.d,
            self.heads,
            self.expansion,
            self.global_mode.as_str(),
            self.ttt.steps,
            self.ttt.lr,
            self.ttt.ns_iters,
            self.ttt.eps,
            self.ttt.conv_kernel_size,
            self.ttt.conv_target.as_str(),
            self.ttt.loss.as_str(),
            self.ttt.scale_lr_by_minibatches,
            self.entropy.n_train_tokens,
            self.entropy.enabled,
            self.seed,
        )
    }
}

/// First 8 bytes (little-endian) of SHA-256 over [`ModelConfig::canonical`].
pub fn config_hash(cfg: &ModelConfig) -> u64 {
    let digest = Sha256::digest(cfg.canonical().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// How the fast-weight update of each global layer is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    InMemory,
    Offload {
        minibatch_frames: usize,
        resident_limit: usize,
    },
    Distributed {
        workers: usize,
        strategy: Strategy,
    },
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Real = f64> {
    pub tokens: TokenGrid<T>,
    pub scene: SceneState,
    /// Largest number of minibatches held at once by any global layer. An
    /// in-memory update holds the whole sequence as one minibatch.
    pub peak_resident_minibatches: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer<T: Real> {
    frame: AttentionParams<T>,
    global: TttLayerParams<T>,
}

/// Seeded slow weights for a [`ModelConfig`]. Both global modes share the
/// same projections, so swapping modes changes only the global mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f64> {
    cfg: ModelConfig,
    layers: Vec<Layer<T>>,
    readout: Matrix<T>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut rng = Rng::fork(cfg.seed, 0x1a7e_0000 + l as u64);
                Ok(Layer {
                    frame: AttentionParams::seeded(cfg.d, cfg.heads, &mut rng)?,
                    global: TttLayerParams::seeded(
                        cfg.d,
                        cfg.heads,
                        cfg.expansion,
                        cfg.ttt.clone(),
                        &mut rng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = Rng::fork(cfg.seed, 0x4ead);
        let readout = rng_normal::<T>(&mut rng, 3, cfg.d).scale(T::lit(1.0 / (cfg.d as f64).sqrt()));
        Ok(Self {
            cfg,
            layers,
            readout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> u64 {
        config_hash(&self.cfg)
    }

    /// Overrides layer `l`'s initial fast weights.
    pub fn set_theta0(&mut self, l: usize, theta0: crate::ttt::FastWeights<T>) -> Result<()> {
        theta0.validate()?;
        let layer = self
            .layers
            .get_mut(l)
            .ok_or_else(|| Error::Contract(format!("no layer {l}")))?;
        if (theta0.dim(), theta0.hidden()) != (self.cfg.d, self.cfg.hidden()) {
            return Err(Error::shape("set_theta0", "fast weight dims differ from config"));
        }
        layer.global.theta0 = theta0;
        Ok(())
    }

    fn check_tokens(&self, tokens: &TokenGrid<T>) -> Result<()> {
        if tokens.d != self.cfg.d || tokens.tokens.cols() != self.cfg.d {
            return Err(Error::shape(
                "model",
                format!("tokens have d={}, model d={}", tokens.d, self.cfg.d),
            ));
        }
        if tokens.n_frames == 0 {
            return Err(Error::Contract("at least one frame is required".into()));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &TokenGrid<T>) -> Result<(TokenGrid<T>, SceneState)> {
        let out = self.forward_with(tokens, Execution::InMemory)?;
        Ok((out.tokens, out.scene))
    }

    /// `layers ×` [frame-wise attention → global layer]. In fast-weight mode
    /// the returned scene holds each layer's fitted weights; in reference
    /// mode it is empty.
    pub fn forward_with(&self, tokens: &TokenGrid<T>, exec: Execution) -> Result<ForwardOutput<T>> {
        self.check_tokens(tokens)?;
        if self.cfg.global_mode == GlobalMode::SoftmaxReference && exec != Execution::InMemory {
            return Err(Error::Config(
                "offloaded and distributed execution need the ttt global mode".into(),
            ));
        }
        let layout = tokens.layout();
        let mut x = tokens.clone();
        let mut fitted = Vec::new();
        let mut peak = 1;
        for layer in &self.layers {
            x = frame_self_attention(&x, &layer.frame, &self.cfg.entropy)?;
            let y = match self.cfg.global_mode {
                GlobalMode::SoftmaxReference => {
                    attention_block_reference(&x.tokens, &layer.global.attn, &self.cfg.entropy)?
                }
                GlobalMode::Ttt => {
                    let (y, theta, resident) = self.global_update(&x, &layout, &layer.global, exec)?;
                    peak = peak.max(resident);
                    fitted.push(theta.cast());
                    y
                }
            };
            x = x.with_tokens(y)?;
        }
        Ok(ForwardOutput {
            tokens: x,
            scene: SceneState {
                config_hash: self.config_hash(),
                seed: self.cfg.seed,
                n_frames: u32::try_from(tokens.n_frames)
                    .map_err(|_| Error::Contract("frame count does not fit in u32".into()))?,
                layers: fitted,
            },
            peak_resident_minibatches: peak,
        })
    }

    fn global_update(
        &self,
        x: &TokenGrid<T>,
        layout: &crate::ttt::FrameLayout,
        params: &TttLayerParams<T>,
        exec: Execution,
    ) -> Result<(Matrix<T>, crate::ttt::FastWeights<T>, usize)> {
        match exec {
            Execution::InMemory => {
                let (y, theta) = ttt_block(&x.tokens, layout, params, TttMode::UpdateAndApply, None)?;
                Ok((y, theta, 1))
            }
            Execution::Offload {
                minibatch_frames,
                resident_limit,
            } => {
                let t = ttt_targets(&x.tokens, layout, params)?;
                let mbs = split_minibatches(&t.k, &t.vp, x.tokens_per_frame(), minibatch_frames)?;
                let mut store = HostStore::new(mbs);
                let (theta, report) =
                    run_offload_update(&params.theta0, &mut store, resident_limit, &params.cfg)?;
                let y = ttt_output(&x.tokens, &t.q, &theta, &params.attn.w_o)?;
                Ok((y, theta, report.peak_resident_minibatches))
            }
            Execution::Distributed { workers, strategy } => {
                let t = ttt_targets(&x.tokens, layout, params)?;
                let plan = make_shard_plan(x.n_frames, workers, strategy)?;
                let shards = shard_rows(&t.k, &t.vp, x.tokens_per_frame(), &plan)?;
                let theta = run_distributed_update(&params.theta0, &shards, &params.cfg, &plan)?;
                let y = ttt_output(&x.tokens, &t.q, &theta, &params.attn.w_o)?;
                Ok((y, theta, 1))
            }
        }
    }

    /// Checks that `scene` was produced by this model configuration.
    pub fn verify_scene(&self, scene: &SceneState) -> Result<()> {
        let expected = self.config_hash();
        if scene.config_hash != expected || scene.seed != self.cfg.seed {
            return Err(Error::Fingerprint(format!(
                "scene has hash {:016x} seed {}, model has hash {expected:016x} seed {}",
                scene.config_hash, scene.seed, self.cfg.seed
            )));
        }
        if scene.layers.len() != self.cfg.layers {
            return Err(Error::Fingerprint(format!(
                "scene has {} layers, model has {}",
                scene.layers.len(),
                self.cfg.layers
            )));
        }
        if scene.dims() != Some((self.cfg.d, self.cfg.hidden())) {
            return Err(Error::Fingerprint("fast weight dims differ from config".into()));
        }
        Ok(())
    }

    /// Same stack with every global layer applying its stored fast weights
    /// without updating them. Each query frame is processed independently of
    /// every other.
    pub fn query(&self, scene: &SceneState, query: &TokenGrid<T>) -> Result<TokenGrid<T>> {
        self.verify_scene(scene)?;
        self.check_tokens(query)?;
        let layout = query.layout();
        let mut x = query.clone();
        for (layer, stored) in self.layers.iter().zip(&scene.layers) {
            x = frame_self_attention(&x, &layer.frame, &self.cfg.entropy)?;
            let theta = stored.cast::<T>();
            let (y, _) = ttt_block(&x.tokens, &layout, &layer.global, TttMode::FrozenQuery, Some(&theta))?;
            x = x.with_tokens(y)?;
        }
        Ok(x)
    }

    /// Linear probe to 3 pseudo-coordinates per token.
    pub fn readout(&self, tokens: &TokenGrid<T>) -> Result<Matrix<T>> {
        matmul_nt(&tokens.tokens, &self.readout)
    }
}

/// Attention restricted to each frame's own tokens.
pub fn frame_self_attention<T: Real>(
    grid: &TokenGrid<T>,
    params: &AttentionParams<T>,
    entropy: &EntropyScaleConfig,
) -> Result<TokenGrid<T>> {
    let p = grid.tokens_per_frame();
    let mut out = Matrix::zeros(grid.n_tokens(), grid.d);
    for f in 0..grid.n_frames {
        let y = attention_block_reference(&grid.frame_rows(f), params, entropy)?;
        out.data_mut()[f * p * grid.d..(f + 1) * p * grid.d].copy_from_slice(y.data());
    }
    grid.with_tokens(out)
}
