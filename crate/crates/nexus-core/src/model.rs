//! The NEXUS architecture: patch embedding, low-rank projection, stacked
//! NanoBlocks with three parallel pathways fused by learned softmax weights,
//! weighted spatial pooling, and a two-layer prediction head.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{Array, DiffArray, Tape, TensorError};

/// Width of the hidden layer of the fusion-weight network `f_phi`.
const FUSION_HIDDEN: usize = 16;

const CHECKPOINT_MAGIC: &[u8] = b"NEXUS1\n";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        source: TensorError,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn at(stage: &'static str) -> impl Fn(TensorError) -> ModelError {
    move |source| ModelError::Stage { stage, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// One K-species forecast per monitoring site (`L x K`).
    PerSite,
    /// A single pooled K-species forecast.
    Pooled,
}

/// Architecture hyperparameters. Defaults correspond to the standard model:
/// 4 sites, 21-day lookback at 3-hourly resolution, 9 features per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NexusConfig {
    /// Number of monitoring sites L.
    pub sites: usize,
    /// Lookback timesteps T.
    pub lookback: usize,
    /// Input features per site D.
    pub features: usize,
    /// Patch length p.
    pub patch_len: usize,
    /// Patch stride s.
    pub stride: usize,
    /// Rank of the input projection bottleneck.
    pub rank: usize,
    /// Rank of the channel-mixing bottlenecks inside NanoBlocks
    /// (pointwise mixing and gate).
    pub mix_rank: usize,
    /// Latent width d'.
    pub d_hidden: usize,
    pub n_blocks: usize,
    pub head_hidden: usize,
    /// Output species K.
    pub output_species: usize,
    pub output_mode: OutputMode,
    pub kernel_width_compact: usize,
    pub kernel_width_depthwise: usize,
    pub dropout_rate: f64,
    /// Factor the input projection through the rank bottleneck. When false a
    /// single dense projection is used (ablation: w/o low-rank projection).
    pub use_lowrank: bool,
    /// Run all three pathways with learned fusion. When false only the
    /// CompactKernel pathway runs (ablation: w/o NanoBlock pathways).
    pub use_pathways: bool,
    /// Learned attention over sites. When false spatial pooling is a uniform
    /// mean (ablation: w/o weighted pooling).
    pub use_weighted_pooling: bool,
    /// Learnable per-position temporal term added after the projection.
    pub use_positional: bool,
    /// Residual connection around each NanoBlock.
    pub residual: bool,
}

impl Default for NexusConfig {
    fn default() -> Self {
        NexusConfig {
            sites: 4,
            lookback: 168,
            features: 9,
            patch_len: 4,
            stride: 2,
            rank: 32,
            mix_rank: 12,
            d_hidden: 64,
            n_blocks: 2,
            head_hidden: 32,
            output_species: 3,
            output_mode: OutputMode::PerSite,
            kernel_width_compact: 3,
            kernel_width_depthwise: 3,
            dropout_rate: 0.1,
            use_lowrank: true,
            use_pathways: true,
            use_weighted_pooling: true,
            use_positional: true,
            residual: true,
        }
    }
}

impl NexusConfig {
    /// Reduced sequence length after patching: T' = (T - p)/s + 1.
    pub fn t_prime(&self) -> usize {
        (self.lookback - self.patch_len) / self.stride + 1
    }

    /// Flattened patch width p*D.
    pub fn patch_dim(&self) -> usize {
        self.patch_len * self.features
    }

    pub fn output_len(&self) -> usize {
        match self.output_mode {
            OutputMode::PerSite => self.sites * self.output_species,
            OutputMode::Pooled => self.output_species,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("sites", self.sites),
            ("lookback", self.lookback),
            ("features", self.features),
            ("patch_len", self.patch_len),
            ("rank", self.rank),
            ("mix_rank", self.mix_rank),
            ("d_hidden", self.d_hidden),
            ("n_blocks", self.n_blocks),
            ("head_hidden", self.head_hidden),
            ("output_species", self.output_species),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.stride == 0 {
            return Err(ModelError::Config("stride must be >= 1".into()));
        }
        if self.patch_len > self.lookback {
            return Err(ModelError::Config(format!(
                "patch_len {} exceeds lookback {}",
                self.patch_len, self.lookback
            )));
        }
        if self.use_lowrank && self.rank > self.patch_dim().min(self.d_hidden) {
            return Err(ModelError::Config(format!(
                "rank {} exceeds min(p*D, d_hidden) = {}",
                self.rank,
                self.patch_dim().min(self.d_hidden)
            )));
        }
        if self.mix_rank > self.d_hidden {
            return Err(ModelError::Config(format!(
                "mix_rank {} exceeds d_hidden {}",
                self.mix_rank, self.d_hidden
            )));
        }
        for w in [self.kernel_width_compact, self.kernel_width_depthwise] {
            if w % 2 == 0 {
                return Err(ModelError::Config(format!("kernel width {w} must be odd")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout_rate {} must be in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

enum Init {
    /// Zero-mean normal, std sqrt(2/fan_in) — for weights feeding ReLU.
    Kaiming { fan_in: usize },
    /// Zero-mean normal, std sqrt(2/(fan_in+fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
}

struct ParamSpec {
    path: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(cfg: &NexusConfig) -> Vec<ParamSpec> {
    let d = cfg.d_hidden;
    let pd = cfg.patch_dim();
    let m = cfg.mix_rank;
    let mut specs = Vec::new();
    let mut push = |path: &str, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec {
            path: path.to_string(),
            shape,
            init,
        });
    };

    if cfg.use_lowrank {
        push(
            "proj.W1",
            vec![pd, cfg.rank],
            Init::Xavier {
                fan_in: pd,
                fan_out: cfg.rank,
            },
        );
        push(
            "proj.W2",
            vec![cfg.rank, d],
            Init::Xavier {
                fan_in: cfg.rank,
                fan_out: d,
            },
        );
    } else {
        push(
            "proj.W",
            vec![pd, d],
            Init::Xavier {
                fan_in: pd,
                fan_out: d,
            },
        );
    }
    push("proj.b", vec![d], Init::Zeros);
    if cfg.use_positional {
        push("pos", vec![cfg.t_prime(), d], Init::Zeros);
    }

    for i in 1..=cfg.n_blocks {
        let wc = cfg.kernel_width_compact;
        push(
            &format!("block{i}.compact.K_c"),
            vec![d, wc],
            Init::Xavier {
                fan_in: wc,
                fan_out: wc,
            },
        );
        if cfg.use_pathways {
            let wd = cfg.kernel_width_depthwise;
            push(
                &format!("block{i}.micro.K_d"),
                vec![d, wd],
                Init::Xavier {
                    fan_in: wd,
                    fan_out: wd,
                },
            );
            push(
                &format!("block{i}.micro.P1"),
                vec![d, m],
                Init::Xavier { fan_in: d, fan_out: m },
            );
            push(
                &format!("block{i}.micro.P2"),
                vec![m, d],
                Init::Xavier { fan_in: m, fan_out: d },
            );
            push(
                &format!("block{i}.gate.G1"),
                vec![d, m],
                Init::Xavier { fan_in: d, fan_out: m },
            );
            push(
                &format!("block{i}.gate.G2"),
                vec![m, d],
                Init::Xavier { fan_in: m, fan_out: d },
            );
            push(&format!("block{i}.gate.b_g"), vec![d], Init::Zeros);
            push(
                &format!("block{i}.fusion.W1"),
                vec![d, FUSION_HIDDEN],
                Init::Kaiming { fan_in: d },
            );
            push(&format!("block{i}.fusion.b1"), vec![FUSION_HIDDEN], Init::Zeros);
            push(
                &format!("block{i}.fusion.W2"),
                vec![FUSION_HIDDEN, 3],
                Init::Xavier {
                    fan_in: FUSION_HIDDEN,
                    fan_out: 3,
                },
            );
            push(&format!("block{i}.fusion.b2"), vec![3], Init::Zeros);
        }
    }

    if cfg.use_weighted_pooling {
        push(
            "pool.W",
            vec![d, 1],
            Init::Xavier { fan_in: d, fan_out: 1 },
        );
        push("pool.b", vec![1], Init::Zeros);
    }

    let out = cfg.output_len();
    push(
        "head.W_hidden",
        vec![d, cfg.head_hidden],
        Init::Kaiming { fan_in: d },
    );
    push("head.b_hidden", vec![cfg.head_hidden], Init::Zeros);
    push(
        "head.W_out",
        vec![cfg.head_hidden, out],
        Init::Xavier {
            fan_in: cfg.head_hidden,
            fan_out: out,
        },
    );
    push("head.b_out", vec![out], Init::Zeros);
    specs
}

/// The complete named parameter set of a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NexusParams {
    values: BTreeMap<String, Array>,
}

impl NexusParams {
    pub fn get(&self, path: &str) -> &Array {
        self.values
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"))
    }

    pub fn get_mut(&mut self, path: &str) -> &mut Array {
        self.values
            .get_mut(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"))
    }

    pub fn set(&mut self, path: &str, value: Array) {
        self.values.insert(path.to_string(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.values.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.values.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.values.values().map(Array::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.values().all(Array::is_finite)
    }
}

/// Whether a parameter participates in L2 weight decay. Biases and the
/// positional term are excluded.
pub fn is_decayed(path: &str) -> bool {
    let last = path.rsplit('.').next().unwrap_or(path);
    !last.starts_with('b') && path != "pos"
}

/// Deterministic parameter initialization: Kaiming for ReLU-fed weights,
/// Xavier for the gate and softmax-fed layers, zeros for biases. Each
/// parameter draws from its own named stream, so the layout of other
/// parameters never perturbs its values.
pub fn init_params(cfg: &NexusConfig, seed: u64) -> Result<NexusParams, ModelError> {
    cfg.validate()?;
    let mut params = NexusParams::default();
    for spec in param_specs(cfg) {
        let mut rng = rng::stream(seed, &format!("init.{}", spec.path));
        let value = match spec.init {
            Init::Kaiming { fan_in } => {
                Array::randn(spec.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
            }
            Init::Xavier { fan_in, fan_out } => Array::randn(
                spec.shape,
                (2.0 / (fan_in + fan_out) as f64).sqrt(),
                &mut rng,
            ),
            Init::Zeros => Array::zeros(spec.shape),
        };
        params.values.insert(spec.path, value);
    }
    Ok(params)
}

/// Exact number of scalars in the parameter set for a config.
pub fn count_parameters(cfg: &NexusConfig) -> usize {
    param_specs(cfg)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Scalar counts grouped by stage (`proj`, `pos`, `block1`, ..., `pool`,
/// `head`).
pub fn parameter_breakdown(cfg: &NexusConfig) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in param_specs(cfg) {
        let stage = s.path.split('.').next().unwrap().to_string();
        *out.entry(stage).or_insert(0) += s.shape.iter().product::<usize>();
    }
    out
}

/// Per-sample record of the data-dependent weights of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Fusion weights (alpha, beta, gamma) per NanoBlock.
    pub fusion_weights: Vec<[f64; 3]>,
    /// Spatial pooling weights over the L sites.
    pub pooling_weights: Vec<f64>,
}

/// Parameters lifted onto a tape for one forward/backward pass.
pub struct BoundParams {
    nodes: BTreeMap<String, DiffArray>,
}

impl BoundParams {
    fn get(&self, path: &str) -> &DiffArray {
        self.nodes
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DiffArray)> {
        self.nodes.iter()
    }

    /// Gradient of every parameter after a backward pass.
    pub fn grads(&self) -> BTreeMap<String, Array> {
        self.nodes
            .iter()
            .map(|(path, node)| {
                let g = node
                    .grad()
                    .unwrap_or_else(|| Array::zeros(node.shape().to_vec()));
                (path.clone(), g)
            })
            .collect()
    }
}

/// Record every parameter on `tape` as a differentiable leaf.
pub fn bind_params(tape: &Tape, params: &NexusParams) -> BoundParams {
    BoundParams {
        nodes: params
            .values
            .iter()
            .map(|(path, value)| (path.clone(), tape.leaf(value.clone())))
            .collect(),
    }
}

/// Record every parameter as a constant (inference; gradients do not flow).
pub fn bind_params_frozen(tape: &Tape, params: &NexusParams) -> BoundParams {
    BoundParams {
        nodes: params
            .values
            .iter()
            .map(|(path, value)| (path.clone(), tape.constant(value.clone())))
            .collect(),
    }
}

/// Low-rank projection H = P W1 W2 + b (bias broadcast over sites and
/// positions).
pub fn low_rank_project(
    patches: &DiffArray,
    w1: &DiffArray,
    w2: &DiffArray,
    bias: &DiffArray,
) -> Result<DiffArray, TensorError> {
    patches.matmul(w1)?.matmul(w2)?.add_broadcast(bias)
}

fn nanoblock<R: Rng>(
    cfg: &NexusConfig,
    bound: &BoundParams,
    block: usize,
    h: &DiffArray,
    training: bool,
    rng: &mut R,
) -> Result<(DiffArray, [f64; 3]), TensorError> {
    let p = |name: &str| bound.get(&format!("block{block}.{name}"));

    // CompactKernel pathway: learned temporal filter per channel.
    let z_c = h.conv1d_depthwise(p("compact.K_c"))?;

    let (mut z, weights);
    if cfg.use_pathways {
        // MicroConv pathway: depthwise temporal conv, then low-rank pointwise
        // channel mixing.
        let z_m = h
            .conv1d_depthwise(p("micro.K_d"))?
            .pointwise_conv(p("micro.P1"))?
            .pointwise_conv(p("micro.P2"))?;

        // FusionGate pathway: H (.) sigmoid(W_g H + b_g), W_g factored.
        let gate = h
            .matmul(p("gate.G1"))?
            .matmul(p("gate.G2"))?
            .add_broadcast(p("gate.b_g"))?
            .sigmoid();
        let z_g = h.mul(&gate)?;

        // Fusion weights from global feature statistics.
        let pooled = h.mean_axes(&[0, 1])?.reshape(vec![1, cfg.d_hidden])?;
        let hidden = pooled
            .matmul(p("fusion.W1"))?
            .add_broadcast(p("fusion.b1"))?
            .relu();
        let logits = hidden
            .matmul(p("fusion.W2"))?
            .add_broadcast(p("fusion.b2"))?
            .reshape(vec![3])?;
        let w = logits.softmax(0)?;
        let wv = w.value();
        weights = [wv.data()[0], wv.data()[1], wv.data()[2]];

        z = z_c
            .scale_by_elem(&w, 0)?
            .add(&z_m.scale_by_elem(&w, 1)?)?
            .add(&z_g.scale_by_elem(&w, 2)?)?;
    } else {
        z = z_c;
        weights = [1.0, 0.0, 0.0];
    }

    if cfg.residual {
        z = z.add(h)?;
    }
    let z = z.dropout(cfg.dropout_rate, training, rng)?;
    Ok((z, weights))
}

/// Full forward pass for one input window of shape `[L, T, D]`.
pub fn forward<R: Rng>(
    cfg: &NexusConfig,
    bound: &BoundParams,
    x: &DiffArray,
    training: bool,
    rng: &mut R,
) -> Result<(DiffArray, ForwardTrace), ModelError> {
    if x.shape() != [cfg.sites, cfg.lookback, cfg.features] {
        return Err(ModelError::Stage {
            stage: "input",
            source: TensorError::ShapeMismatch {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![cfg.sites, cfg.lookback, cfg.features],
            },
        });
    }
    let mut trace = ForwardTrace::default();

    // Patch embedding.
    let patches = x
        .unfold(cfg.patch_len, cfg.stride)
        .map_err(at("patch_embed"))?;

    // Projection into the latent space.
    let mut h = if cfg.use_lowrank {
        low_rank_project(
            &patches,
            bound.get("proj.W1"),
            bound.get("proj.W2"),
            bound.get("proj.b"),
        )
        .map_err(at("low_rank_project"))?
    } else {
        patches
            .matmul(bound.get("proj.W"))
            .and_then(|p| p.add_broadcast(bound.get("proj.b")))
            .map_err(at("low_rank_project"))?
    };
    if cfg.use_positional {
        h = h
            .add_broadcast(bound.get("pos"))
            .map_err(at("positional"))?;
    }

    // Stacked NanoBlocks.
    for block in 1..=cfg.n_blocks {
        let (z, weights) =
            nanoblock(cfg, bound, block, &h, training, rng).map_err(at("nanoblock"))?;
        trace.fusion_weights.push(weights);
        h = z;
    }

    // Weighted spatial pooling over temporally mean-pooled site features.
    let site_features = h.mean_axes(&[1]).map_err(at("weighted_spatial_pool"))?;
    let z_pool = if cfg.use_weighted_pooling {
        let scores = site_features
            .matmul(bound.get("pool.W"))
            .and_then(|s| s.add_broadcast(bound.get("pool.b")))
            .and_then(|s| s.reshape(vec![cfg.sites]))
            .map_err(at("weighted_spatial_pool"))?;
        let w = scores.softmax(0).map_err(at("weighted_spatial_pool"))?;
        trace.pooling_weights = w.value().data().to_vec();
        site_features
            .weighted_sum_rows(&w)
            .map_err(at("weighted_spatial_pool"))?
    } else {
        trace.pooling_weights = vec![1.0 / cfg.sites as f64; cfg.sites];
        site_features
            .mean_axes(&[0])
            .map_err(at("weighted_spatial_pool"))?
    };

    // Prediction head.
    let normed = z_pool.layer_norm(0).map_err(at("prediction_head"))?;
    let hidden = normed
        .reshape(vec![1, cfg.d_hidden])
        .and_then(|z| z.matmul(bound.get("head.W_hidden")))
        .and_then(|z| z.add_broadcast(bound.get("head.b_hidden")))
        .map_err(at("prediction_head"))?
        .relu();
    let out = hidden
        .matmul(bound.get("head.W_out"))
        .and_then(|z| z.add_broadcast(bound.get("head.b_out")))
        .map_err(at("prediction_head"))?;
    let out = match cfg.output_mode {
        OutputMode::PerSite => out
            .reshape(vec![cfg.sites, cfg.output_species])
            .map_err(at("prediction_head"))?,
        OutputMode::Pooled => out
            .reshape(vec![cfg.output_species])
            .map_err(at("prediction_head"))?,
    };
    Ok((out, trace))
}

/// Eval-mode forward on a scratch tape; deterministic pure function of
/// (params, input).
pub fn predict(
    cfg: &NexusConfig,
    params: &NexusParams,
    x: &Array,
) -> Result<(Array, ForwardTrace), ModelError> {
    let tape = Tape::new();
    let bound = bind_params_frozen(&tape, params);
    let xd = tape.constant(x.clone());
    let mut rng = rng::stream(0, "predict.unused");
    let (out, trace) = forward(cfg, &bound, &xd, false, &mut rng)?;
    Ok((out.value(), trace))
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
// magic "NEXUS1\n", one header line of canonical key=value config pairs, then
// per parameter: length-prefixed path, rank, shape dims, raw little-endian
// f64 values; a trailing FNV-1a 64-bit checksum over all value bytes.
// ---------------------------------------------------------------------------

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;

fn config_header(cfg: &NexusConfig) -> String {
    let mode = match cfg.output_mode {
        OutputMode::PerSite => "per_site",
        OutputMode::Pooled => "pooled",
    };
    format!(
        "sites={} lookback={} features={} patch_len={} stride={} rank={} mix_rank={} \
         d_hidden={} n_blocks={} head_hidden={} output_species={} output_mode={} \
         kernel_width_compact={} kernel_width_depthwise={} dropout_rate={:?} \
         use_lowrank={} use_pathways={} use_weighted_pooling={} use_positional={} residual={}",
        cfg.sites,
        cfg.lookback,
        cfg.features,
        cfg.patch_len,
        cfg.stride,
        cfg.rank,
        cfg.mix_rank,
        cfg.d_hidden,
        cfg.n_blocks,
        cfg.head_hidden,
        cfg.output_species,
        mode,
        cfg.kernel_width_compact,
        cfg.kernel_width_depthwise,
        cfg.dropout_rate,
        cfg.use_lowrank,
        cfg.use_pathways,
        cfg.use_weighted_pooling,
        cfg.use_positional,
        cfg.residual,
    )
}

fn bad(key: &str, value: &str) -> ModelError {
    ModelError::Checkpoint(format!("bad value for {key}: {value}"))
}

fn parse_header(line: &str) -> Result<NexusConfig, ModelError> {
    let mut cfg = NexusConfig::default();
    for pair in line.split_whitespace() {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| ModelError::Checkpoint(format!("malformed header entry {pair}")))?;
        match key {
            "sites" => cfg.sites = value.parse().map_err(|_| bad(key, value))?,
            "lookback" => cfg.lookback = value.parse().map_err(|_| bad(key, value))?,
            "features" => cfg.features = value.parse().map_err(|_| bad(key, value))?,
            "patch_len" => cfg.patch_len = value.parse().map_err(|_| bad(key, value))?,
            "stride" => cfg.stride = value.parse().map_err(|_| bad(key, value))?,
            "rank" => cfg.rank = value.parse().map_err(|_| bad(key, value))?,
            "mix_rank" => cfg.mix_rank = value.parse().map_err(|_| bad(key, value))?,
            "d_hidden" => cfg.d_hidden = value.parse().map_err(|_| bad(key, value))?,
            "n_blocks" => cfg.n_blocks = value.parse().map_err(|_| bad(key, value))?,
            "head_hidden" => cfg.head_hidden = value.parse().map_err(|_| bad(key, value))?,
            "output_species" => cfg.output_species = value.parse().map_err(|_| bad(key, value))?,
            "output_mode" => {
                cfg.output_mode = match value {
                    "per_site" => OutputMode::PerSite,
                    "pooled" => OutputMode::Pooled,
                    _ => return Err(ModelError::Checkpoint(format!("bad output_mode {value}"))),
                }
            }
            "kernel_width_compact" => cfg.kernel_width_compact = value.parse().map_err(|_| bad(key, value))?,
            "kernel_width_depthwise" => cfg.kernel_width_depthwise = value.parse().map_err(|_| bad(key, value))?,
            "dropout_rate" => cfg.dropout_rate = value.parse().map_err(|_| bad(key, value))?,
            "use_lowrank" => cfg.use_lowrank = value.parse().map_err(|_| bad(key, value))?,
            "use_pathways" => cfg.use_pathways = value.parse().map_err(|_| bad(key, value))?,
            "use_weighted_pooling" => cfg.use_weighted_pooling = value.parse().map_err(|_| bad(key, value))?,
            "use_positional" => cfg.use_positional = value.parse().map_err(|_| bad(key, value))?,
            "residual" => cfg.residual = value.parse().map_err(|_| bad(key, value))?,
            _ => return Err(ModelError::Checkpoint(format!("unknown header key {key}"))),
        }
    }
    Ok(cfg)
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &NexusConfig,
    params: &NexusParams,
) -> Result<(), ModelError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(config_header(cfg).as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(&(params.values.len() as u32).to_le_bytes())?;
    let mut checksum = FNV_OFFSET;
    for (ppath, value) in &params.values {
        w.write_all(&(ppath.len() as u32).to_le_bytes())?;
        w.write_all(ppath.as_bytes())?;
        w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
        for &dim in value.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in value.data() {
            let bytes = v.to_le_bytes();
            checksum = fnv1a(checksum, &bytes);
            w.write_all(&bytes)?;
        }
    }
    w.write_all(&checksum.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NexusConfig, NexusParams), ModelError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut header = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        if b[0] == b'\n' {
            break;
        }
        header.push(b[0]);
    }
    let header =
        String::from_utf8(header).map_err(|_| ModelError::Checkpoint("bad header".into()))?;
    let cfg = parse_header(&header)?;

    let mut count_bytes = [0u8; 4];
    r.read_exact(&mut count_bytes)?;
    let n_params = u32::from_le_bytes(count_bytes) as usize;

    let mut params = NexusParams::default();
    let mut checksum = FNV_OFFSET;
    for _ in 0..n_params {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| ModelError::Checkpoint("bad path".into()))?;
        r.read_exact(&mut len)?;
        let rank = u32::from_le_bytes(len) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut dim = [0u8; 8];
            r.read_exact(&mut dim)?;
            shape.push(u64::from_le_bytes(dim) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut vbytes = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut vbytes)?;
            checksum = fnv1a(checksum, &vbytes);
            data.push(f64::from_le_bytes(vbytes));
        }
        params.values.insert(
            name,
            Array::from_vec(shape, data)
                .map_err(|e| ModelError::Checkpoint(format!("inconsistent shape: {e}")))?,
        );
    }
    let mut stored = [0u8; 8];
    r.read_exact(&mut stored)?;
    if u64::from_le_bytes(stored) != checksum {
        return Err(ModelError::Checkpoint("checksum mismatch".into()));
    }

    // The stored parameter set must be exactly what the config prescribes.
    let expected: Vec<String> = param_specs(&cfg).into_iter().map(|s| s.path).collect();
    let got: Vec<String> = params.values.keys().cloned().collect();
    let mut expected_sorted = expected.clone();
    expected_sorted.sort();
    if expected_sorted != got {
        return Err(ModelError::Checkpoint(
            "parameter set does not match config".into(),
        ));
    }
    Ok((cfg, params))
}
