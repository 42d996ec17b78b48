//! Two-step angular adapter for multi-view token streams.
//!
//! Step one distills two per-view statistics over the token axis — the
//! per-channel supremum (projection difference) and the per-channel uniform
//! mean (adjacency divergence) — and maps their concatenation through a
//! shared affine layer into a 16-dimensional angular query. Broadcasting the
//! query across token positions yields the view's angular marker.
//!
//! Step two concatenates the marker onto the original tokens, projects down
//! to width 16, applies an exact-CDF GELU, projects back up to the token
//! width, scales, and adds the input back as a residual. With a zero
//! up-projection the adapter is therefore an exact identity.
//!
//! Ablation modes keep the parameter shapes fixed while changing what feeds
//! the query: `ConsistencyOnly` duplicates the mean, `DifferenceOnly`
//! duplicates the supremum, and `HardPerView` gives every view its own
//! parameter set instead of sharing one.

use crate::tensor::{Graph, NodeId, Tensor, TensorError};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Width of the angular query, marker, and down-projection.
pub const HIDDEN_WIDTH: usize = 16;

const CHECKPOINT_MAGIC: [u8; 4] = *b"FOPA";

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("token set is empty")]
    EmptyTokens,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mode {mode} expects {expected} parameter set(s), got {got}")]
    ModeParamMismatch {
        mode: AdapterMode,
        expected: usize,
        got: usize,
    },
    #[error("bad checkpoint magic {0:?}, expected {CHECKPOINT_MAGIC:?}")]
    CheckpointMagic([u8; 4]),
    #[error("checkpoint payload of {got} bytes is not a whole number of parameter sets ({set} bytes each)")]
    CheckpointLength { got: u64, set: u64 },
    #[error("unknown adapter mode id {0}")]
    UnknownModeId(u32),
    #[error("unknown adapter mode '{0}'")]
    UnknownMode(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Which light-field representation a token stream came from. Adapters are
/// never shared across representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    SubAperture,
    FocalStack,
}

/// Adapter variants: the shared two-statistic adapter and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    /// One parameter set shared by all views, query from (mean, max).
    Shared,
    /// Per-view parameter sets, query from (mean, max).
    HardPerView,
    /// Shared parameters, query from the mean statistic only.
    ConsistencyOnly,
    /// Shared parameters, query from the max statistic only.
    DifferenceOnly,
}

impl AdapterMode {
    pub fn id(self) -> u32 {
        match self {
            AdapterMode::Shared => 0,
            AdapterMode::HardPerView => 1,
            AdapterMode::ConsistencyOnly => 2,
            AdapterMode::DifferenceOnly => 3,
        }
    }

    pub fn from_id(id: u32) -> Result<Self, AdapterError> {
        match id {
            0 => Ok(AdapterMode::Shared),
            1 => Ok(AdapterMode::HardPerView),
            2 => Ok(AdapterMode::ConsistencyOnly),
            3 => Ok(AdapterMode::DifferenceOnly),
            other => Err(AdapterError::UnknownModeId(other)),
        }
    }

    /// Parameter sets expected for `k` views.
    pub fn param_sets(self, k: usize) -> usize {
        match self {
            AdapterMode::HardPerView => k,
            _ => 1,
        }
    }
}

impl std::fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AdapterMode::Shared => "shared",
            AdapterMode::HardPerView => "hard-per-view",
            AdapterMode::ConsistencyOnly => "consistency-only",
            AdapterMode::DifferenceOnly => "difference-only",
        };
        f.write_str(name)
    }
}

impl FromStr for AdapterMode {
    type Err = AdapterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shared" => Ok(AdapterMode::Shared),
            "hard-per-view" | "hard" => Ok(AdapterMode::HardPerView),
            "consistency-only" | "consistency" => Ok(AdapterMode::ConsistencyOnly),
            "difference-only" | "difference" => Ok(AdapterMode::DifferenceOnly),
            other => Err(AdapterError::UnknownMode(other.to_string())),
        }
    }
}

/// Per-view token tensors `[B, N, C]`, all sharing the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub views: Vec<Tensor>,
    pub representation: Representation,
}

impl TokenSet {
    pub fn new(views: Vec<Tensor>, representation: Representation) -> Result<Self, AdapterError> {
        if views.is_empty() {
            return Err(AdapterError::EmptyTokens);
        }
        let shape = views[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(AdapterError::ShapeMismatch(format!(
                "views must be [B,N,C], got {shape:?}"
            )));
        }
        if shape[1] == 0 {
            return Err(AdapterError::EmptyTokens);
        }
        for (i, v) in views.iter().enumerate() {
            if v.shape() != shape {
                return Err(AdapterError::ShapeMismatch(format!(
                    "view {i} has shape {:?}, expected {shape:?}",
                    v.shape()
                )));
            }
        }
        Ok(TokenSet {
            views,
            representation,
        })
    }

    pub fn k(&self) -> usize {
        self.views.len()
    }

    /// `(B, N, C)` shared by every view.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.views[0].shape();
        (s[0], s[1], s[2])
    }
}

/// The six trainable blocks of one adapter, plus the fixed output scale.
///
/// Shapes for token width `C`: query weight `[16, 2C]` and bias `[16]`,
/// down-projection `[16, C+16]` and bias `[16]`, up-projection `[C, 16]`
/// and bias `[C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    w_q: Tensor,
    b_q: Tensor,
    w_d: Tensor,
    b_d: Tensor,
    w_u: Tensor,
    b_u: Tensor,
    gamma: f64,
    channels: usize,
}

impl AdapterParams {
    /// Query and down weights start uniform in `±1/sqrt(fan_in)`; the
    /// up-projection and all biases start at zero, so a fresh adapter is an
    /// exact identity (residual-safe warm start).
    pub fn init<R: rand::Rng>(channels: usize, rng: &mut R) -> Result<Self, AdapterError> {
        let h = HIDDEN_WIDTH;
        let q_bound = 1.0 / ((2 * channels) as f64).sqrt();
        let d_bound = 1.0 / ((channels + h) as f64).sqrt();
        Ok(AdapterParams {
            w_q: Tensor::rand_uniform(&[h, 2 * channels], -q_bound, q_bound, rng)?,
            b_q: Tensor::zeros(&[h])?,
            w_d: Tensor::rand_uniform(&[h, channels + h], -d_bound, d_bound, rng)?,
            b_d: Tensor::zeros(&[h])?,
            w_u: Tensor::zeros(&[channels, h])?,
            b_u: Tensor::zeros(&[channels])?,
            gamma: 1.0,
            channels,
        })
    }

    pub fn zeros(channels: usize) -> Result<Self, AdapterError> {
        let h = HIDDEN_WIDTH;
        Ok(AdapterParams {
            w_q: Tensor::zeros(&[h, 2 * channels])?,
            b_q: Tensor::zeros(&[h])?,
            w_d: Tensor::zeros(&[h, channels + h])?,
            b_d: Tensor::zeros(&[h])?,
            w_u: Tensor::zeros(&[channels, h])?,
            b_u: Tensor::zeros(&[channels])?,
            gamma: 1.0,
            channels,
        })
    }

    pub fn from_blocks(
        channels: usize,
        blocks: [Tensor; 6],
        gamma: f64,
    ) -> Result<Self, AdapterError> {
        let h = HIDDEN_WIDTH;
        let [w_q, b_q, w_d, b_d, w_u, b_u] = blocks;
        let expect = |t: &Tensor, shape: &[usize], name: &str| {
            if t.shape() != shape {
                Err(AdapterError::ShapeMismatch(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        expect(&w_q, &[h, 2 * channels], "w_q")?;
        expect(&b_q, &[h], "b_q")?;
        expect(&w_d, &[h, channels + h], "w_d")?;
        expect(&b_d, &[h], "b_d")?;
        expect(&w_u, &[channels, h], "w_u")?;
        expect(&b_u, &[channels], "b_u")?;
        Ok(AdapterParams {
            w_q,
            b_q,
            w_d,
            b_d,
            w_u,
            b_u,
            gamma,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    /// The six blocks in declaration order, with stable names.
    pub fn blocks(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_d", &self.w_d),
            ("b_d", &self.b_d),
            ("w_u", &self.w_u),
            ("b_u", &self.b_u),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_d", &mut self.w_d),
            ("b_d", &mut self.b_d),
            ("w_u", &mut self.w_u),
            ("b_u", &mut self.b_u),
        ]
    }

    /// Number of trainable scalars actually held by this set.
    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zeroes the up-projection so the adapter becomes an exact identity.
    pub fn zero_up_projection(&mut self) {
        self.w_u.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.b_u.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    /// Registers the six blocks on a graph, trainable or frozen.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> AdapterNodes {
        let mut reg = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        AdapterNodes {
            w_q: reg(&self.w_q),
            b_q: reg(&self.b_q),
            w_d: reg(&self.w_d),
            b_d: reg(&self.b_d),
            w_u: reg(&self.w_u),
            b_u: reg(&self.b_u),
            gamma: self.gamma,
        }
    }
}

/// Graph handles for one registered parameter set.
#[derive(Debug, Clone, Copy)]
pub struct AdapterNodes {
    pub w_q: NodeId,
    pub b_q: NodeId,
    pub w_d: NodeId,
    pub b_d: NodeId,
    pub w_u: NodeId,
    pub b_u: NodeId,
    pub gamma: f64,
}

/// Trainable scalars for one adapter: `P(C) = 65C + 288`, and `K` times that
/// for `HardPerView`.
pub fn count_params(mode: AdapterMode, k: usize, channels: usize) -> usize {
    let h = HIDDEN_WIDTH;
    let per_set = (h * 2 * channels + h)      // query weight + bias
        + (h * (channels + h) + h)            // down-projection + bias
        + (channels * h + channels); // up-projection + bias
    per_set * mode.param_sets(k)
}

/// Per-channel supremum over token positions: `[B,N,C] -> [B,C]`.
pub fn projection_difference(x: &Tensor) -> Result<Tensor, AdapterError> {
    let mut g = Graph::new();
    let id = g.constant(x.clone());
    let out = g.reduce_max(id).map_err(map_empty)?;
    Ok(g.value(out).clone())
}

/// Per-channel uniform mean over token positions: `[B,N,C] -> [B,C]`.
pub fn adjacency_divergence(x: &Tensor) -> Result<Tensor, AdapterError> {
    let mut g = Graph::new();
    let id = g.constant(x.clone());
    let out = g.reduce_mean(id).map_err(map_empty)?;
    Ok(g.value(out).clone())
}

fn map_empty(e: TensorError) -> AdapterError {
    match e {
        TensorError::EmptyAxis => AdapterError::EmptyTokens,
        other => AdapterError::Tensor(other),
    }
}

/// Affine angular query from the concatenated statistics:
/// `[B,C] x [B,C] -> [B,16]`.
pub fn angular_query(
    mean_stat: &Tensor,
    max_stat: &Tensor,
    params: &AdapterParams,
) -> Result<Tensor, AdapterError> {
    let mut g = Graph::new();
    let f = g.constant(mean_stat.clone());
    let e = g.constant(max_stat.clone());
    let nodes = params.register(&mut g, false);
    let cat = g.concat_last(f, e)?;
    let q = g.linear(cat, nodes.w_q, Some(nodes.b_q))?;
    Ok(g.value(q).clone())
}

/// Broadcasts a query to every token position: `[B,16] -> [B,N,16]`.
pub fn angular_marker(query: &Tensor, n: usize) -> Result<Tensor, AdapterError> {
    let mut g = Graph::new();
    let q = g.constant(query.clone());
    let m = g.broadcast_rows(q, n).map_err(map_empty)?;
    Ok(g.value(m).clone())
}

/// Runs the full adapter for one view on an existing graph.
pub fn adapter_forward_view(
    g: &mut Graph,
    x: NodeId,
    nodes: &AdapterNodes,
    mode: AdapterMode,
) -> Result<NodeId, AdapterError> {
    let n = match g.shape(x) {
        [_, n, _] => *n,
        other => {
            return Err(AdapterError::ShapeMismatch(format!(
                "adapter input must be [B,N,C], got {other:?}"
            )))
        }
    };
    let max_stat = g.reduce_max(x).map_err(map_empty)?;
    let mean_stat = g.reduce_mean(x).map_err(map_empty)?;
    let query_in = match mode {
        AdapterMode::Shared | AdapterMode::HardPerView => g.concat_last(mean_stat, max_stat)?,
        AdapterMode::ConsistencyOnly => g.concat_last(mean_stat, mean_stat)?,
        AdapterMode::DifferenceOnly => g.concat_last(max_stat, max_stat)?,
    };
    let query = g.linear(query_in, nodes.w_q, Some(nodes.b_q))?;
    let marker = g.broadcast_rows(query, n)?;
    let cat = g.concat_last(x, marker)?;
    let pre = g.linear(cat, nodes.w_d, Some(nodes.b_d))?;
    let act = g.gelu(pre)?;
    let up = g.linear(act, nodes.w_u, Some(nodes.b_u))?;
    let scaled = g.scale(up, nodes.gamma)?;
    Ok(g.add(x, scaled)?)
}

/// Applies the adapter to every view of a token set. Shared modes take one
/// parameter set; `HardPerView` takes one per view.
pub fn apply_adapter(
    x: &TokenSet,
    mode: AdapterMode,
    params: &[AdapterParams],
) -> Result<TokenSet, AdapterError> {
    let expected = mode.param_sets(x.k());
    if params.len() != expected {
        return Err(AdapterError::ModeParamMismatch {
            mode,
            expected,
            got: params.len(),
        });
    }
    let (_, _, c) = x.dims();
    for p in params {
        if p.channels() != c {
            return Err(AdapterError::ShapeMismatch(format!(
                "parameter set built for C={}, tokens have C={c}",
                p.channels()
            )));
        }
    }
    let mut out = Vec::with_capacity(x.k());
    for (i, view) in x.views.iter().enumerate() {
        let set = if mode == AdapterMode::HardPerView {
            &params[i]
        } else {
            &params[0]
        };
        let mut g = Graph::new();
        let xid = g.constant(view.clone());
        let nodes = set.register(&mut g, false);
        let oid = adapter_forward_view(&mut g, xid, &nodes, mode)?;
        out.push(g.value(oid).clone());
    }
    TokenSet::new(out, x.representation)
}

/// Writes `FOPA`, u32 token width, u32 mode id, then each parameter set's
/// six blocks in declaration order as little-endian f64.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    mode: AdapterMode,
    params: &[AdapterParams],
) -> Result<(), AdapterError> {
    assert!(!params.is_empty());
    let channels = params[0].channels();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&(channels as u32).to_le_bytes())?;
    out.write_all(&mode.id().to_le_bytes())?;
    for set in params {
        for (_, block) in set.blocks() {
            for v in block.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint back; the number of parameter sets is implied by the
/// payload length.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(AdapterMode, Vec<AdapterParams>), AdapterError> {
    let file = File::open(path)?;
    let total = file.metadata()?.len();
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(AdapterError::CheckpointMagic(magic));
    }
    let mut buf4 = [0u8; 4];
    input.read_exact(&mut buf4)?;
    let channels = u32::from_le_bytes(buf4) as usize;
    input.read_exact(&mut buf4)?;
    let mode = AdapterMode::from_id(u32::from_le_bytes(buf4))?;

    let per_set = count_params(AdapterMode::Shared, 1, channels) as u64 * 8;
    let payload = total.saturating_sub(12);
    if per_set == 0 || payload == 0 || payload % per_set != 0 {
        return Err(AdapterError::CheckpointLength {
            got: payload,
            set: per_set,
        });
    }
    let sets = (payload / per_set) as usize;
    let h = HIDDEN_WIDTH;
    let shapes: [(&str, Vec<usize>); 6] = [
        ("w_q", vec![h, 2 * channels]),
        ("b_q", vec![h]),
        ("w_d", vec![h, channels + h]),
        ("b_d", vec![h]),
        ("w_u", vec![channels, h]),
        ("b_u", vec![channels]),
    ];
    let mut buf8 = [0u8; 8];
    let mut params = Vec::with_capacity(sets);
    for _ in 0..sets {
        let mut blocks = Vec::with_capacity(6);
        for (_, shape) in &shapes {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                input.read_exact(&mut buf8)?;
                data.push(f64::from_le_bytes(buf8));
            }
            blocks.push(Tensor::from_vec(shape, data)?);
        }
        let blocks: [Tensor; 6] = blocks.try_into().expect("exactly six blocks were read");
        params.push(AdapterParams::from_blocks(channels, blocks, 1.0)?);
    }
    Ok((mode, params))
}
