//! Multi-stage, multi-view toy encoder with a frozen backbone stand-in.
//!
//! Every selected view runs through the same four-stage stream: patch
//! embedding, then per stage a frozen linear+GELU mixing block, an optional
//! angular adapter (selective placement), and a 2x2 patch-merge downsampling
//! that advances to the next stage's channel width. Per-view stage outputs
//! are fused by point-wise summation, upsampled (nearest) to the stage-1
//! token grid, concatenated, and fed to a linear head.
//!
//! Only adapter and head parameters are ever trainable; the backbone is
//! frozen at construction and training verifies its fingerprint afterwards.

pub mod synth;
pub mod train;

use crate::adapter::{
    adapter_forward_view, AdapterError, AdapterMode, AdapterNodes, AdapterParams, Representation,
};
use crate::lightfield::{Image, LightFieldError};
use crate::metrics::{LabelGrid, MetricsError, RealGrid};
use crate::seeds;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};
use thiserror::Error;

/// Number of encoder stages (one patch embedding plus three downsamples).
pub const NUM_STAGES: usize = 4;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("patch size {patch} does not divide the {h}x{w} image")]
    IndivisibleDims { h: usize, w: usize, patch: usize },
    #[error("stage-1 token grid {gh}x{gw} must be divisible by 8 for three downsamples")]
    GridNotDivisible { gh: usize, gw: usize },
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("model expects {expected} views, got {got}")]
    KMismatch { expected: usize, got: usize },
    #[error("view {index} has dims {got:?}, expected {want:?}")]
    ViewDimsMismatch {
        index: usize,
        got: (usize, usize, usize),
        want: (usize, usize, usize),
    },
    #[error("loss diverged to a non-finite value at step {step}")]
    DivergedLoss { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Field(#[from] LightFieldError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Structural settings for the encoder and its head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub adapter_placement: [bool; NUM_STAGES],
    pub k: usize,
    pub representation: Representation,
    pub num_classes: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Defaults sized for the synthetic scenes: 4 px patches, adapters in
    /// the two middle stages.
    pub fn toy(k: usize, seed: u64) -> Self {
        EncoderConfig {
            patch_size: 4,
            stage_channels: [8, 12, 16, 16],
            adapter_placement: [false, true, true, false],
            k,
            representation: Representation::SubAperture,
            num_classes: synth::NUM_CLASSES,
            seed,
        }
    }

    pub fn without_adapters(mut self) -> Self {
        self.adapter_placement = [false; NUM_STAGES];
        self
    }

    fn validate(&self) -> Result<(), EncoderError> {
        if self.patch_size == 0 {
            return Err(EncoderError::ConfigInvalid("patch_size must be > 0".into()));
        }
        if self.k == 0 {
            return Err(EncoderError::ConfigInvalid("k must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(EncoderError::ConfigInvalid("num_classes must be >= 1".into()));
        }
        if self.stage_channels.contains(&0) {
            return Err(EncoderError::ConfigInvalid("stage channels must be > 0".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(EncoderError::ConfigInvalid(
                "stage channels must be nondecreasing".into(),
            ));
        }
        Ok(())
    }
}

/// What the linear head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// One logit per class per stage-1 token.
    Segmentation,
    /// A single saliency logit per stage-1 token.
    Saliency,
}

struct Backbone {
    embed_w: Tensor,
    embed_b: Tensor,
    mix_w: Vec<Tensor>,
    mix_b: Vec<Tensor>,
    merge_w: Vec<Tensor>,
    merge_b: Vec<Tensor>,
}

impl Backbone {
    fn blocks(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed_w, &self.embed_b];
        out.extend(self.mix_w.iter());
        out.extend(self.mix_b.iter());
        out.extend(self.merge_w.iter());
        out.extend(self.merge_b.iter());
        out
    }
}

/// Frozen-backbone encoder with trainable adapters and head.
pub struct Model {
    config: EncoderConfig,
    input_channels: usize,
    head_kind: HeadKind,
    mode: AdapterMode,
    backbone: Backbone,
    /// One entry per stage; `None` where no adapter is placed. The inner
    /// vector holds one parameter set, or K for `HardPerView`.
    adapters: Vec<Option<Vec<AdapterParams>>>,
    head_w: Tensor,
    head_b: Tensor,
}

/// Graph handles for the trainable parameters, in canonical order.
pub struct TrainableNodes {
    adapters: Vec<Option<Vec<AdapterNodes>>>,
    head_w: NodeId,
    head_b: NodeId,
    /// `(name, id)` pairs matching [`Model::trainable_names`] order.
    pub named: Vec<(String, NodeId)>,
}

/// Node handles produced by one forward pass.
pub struct ForwardIds {
    /// `[1, N1, out]` head logits.
    pub logits: NodeId,
    /// Post-adapter tokens per stage per view.
    pub per_view: Vec<Vec<NodeId>>,
    /// Point-wise sum of the per-view tokens, all four stages.
    pub fused: Vec<NodeId>,
}

/// Value-level snapshot of a forward pass.
pub struct ForwardArtifacts {
    pub logits: Tensor,
    pub per_view: Vec<Vec<Tensor>>,
    pub fused: Vec<Tensor>,
}

impl Model {
    pub fn new(
        config: EncoderConfig,
        input_channels: usize,
        mode: AdapterMode,
        head_kind: HeadKind,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        if input_channels == 0 {
            return Err(EncoderError::ConfigInvalid("input channels must be > 0".into()));
        }
        let seed = config.seed;
        let rep = match config.representation {
            Representation::SubAperture => "sai",
            Representation::FocalStack => "fs",
        };
        let ch = config.stage_channels;
        let patch_len = config.patch_size * config.patch_size * input_channels;

        let uniform = |label: String, rows: usize, cols: usize| -> Result<Tensor, EncoderError> {
            let mut r = seeds::rng(seed, &label);
            let bound = 1.0 / (cols as f64).sqrt();
            Ok(Tensor::rand_uniform(&[rows, cols], -bound, bound, &mut r)?)
        };

        let embed_w = uniform(format!("{rep}/backbone/embed"), ch[0], patch_len)?;
        let embed_b = Tensor::zeros(&[ch[0]])?;
        let mut mix_w = Vec::new();
        let mut mix_b = Vec::new();
        for s in 0..NUM_STAGES {
            mix_w.push(uniform(format!("{rep}/backbone/mix{s}"), ch[s], ch[s])?);
            mix_b.push(Tensor::zeros(&[ch[s]])?);
        }
        let mut merge_w = Vec::new();
        let mut merge_b = Vec::new();
        for s in 0..NUM_STAGES - 1 {
            merge_w.push(uniform(
                format!("{rep}/backbone/merge{s}"),
                ch[s + 1],
                4 * ch[s],
            )?);
            merge_b.push(Tensor::zeros(&[ch[s + 1]])?);
        }

        let mut adapters = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            if config.adapter_placement[s] {
                let sets = mode.param_sets(config.k);
                let mut stage_sets = Vec::with_capacity(sets);
                for i in 0..sets {
                    let mut r = seeds::rng(seed, &format!("{rep}/adapter/stage{s}/set{i}"));
                    stage_sets.push(AdapterParams::init(ch[s], &mut r)?);
                }
                adapters.push(Some(stage_sets));
            } else {
                adapters.push(None);
            }
        }

        let head_out = match head_kind {
            HeadKind::Segmentation => config.num_classes,
            HeadKind::Saliency => 1,
        };
        let fused_channels: usize = ch.iter().sum();
        let head_w = Tensor::zeros(&[head_out, fused_channels])?;
        let head_b = Tensor::zeros(&[head_out])?;

        Ok(Model {
            config,
            input_channels,
            head_kind,
            mode,
            backbone: Backbone {
                embed_w,
                embed_b,
                mix_w,
                mix_b,
                merge_w,
                merge_b,
            },
            adapters,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn adapter_params(&self, stage: usize) -> Option<&[AdapterParams]> {
        self.adapters[stage].as_deref()
    }

    /// Fingerprint of every frozen block; unchanged by training.
    pub fn backbone_fingerprint(&self) -> u64 {
        seeds::fingerprint(self.backbone.blocks().into_iter().map(|t| t.data()))
    }

    /// Trainable scalars: placed adapters plus the head.
    pub fn trainable_count(&self) -> usize {
        let adapter: usize = self
            .adapters
            .iter()
            .flatten()
            .flat_map(|sets| sets.iter())
            .map(|p| p.param_count())
            .sum();
        adapter + self.head_w.numel() + self.head_b.numel()
    }

    /// Canonical trainable parameter order: stages ascending, sets ascending,
    /// the six adapter blocks in declaration order, then the head.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (s, stage) in self.adapters.iter().enumerate() {
            if let Some(sets) = stage {
                for (i, set) in sets.iter().enumerate() {
                    for (block, _) in set.blocks() {
                        names.push(format!("stage{s}.set{i}.{block}"));
                    }
                }
            }
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    /// Snapshot of the trainable tensors in canonical order.
    pub fn trainable_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for stage in self.adapters.iter().flatten() {
            for set in stage {
                for (_, block) in set.blocks() {
                    out.push(block.clone());
                }
            }
        }
        out.push(self.head_w.clone());
        out.push(self.head_b.clone());
        out
    }

    /// Overwrites the trainable tensors from canonical-order data buffers.
    pub fn set_trainable_data(&mut self, buffers: &[Vec<f64>]) {
        let mut it = buffers.iter();
        for stage in self.adapters.iter_mut().flatten() {
            for set in stage {
                for (_, block) in set.blocks_mut() {
                    let src = it.next().expect("buffer count matches canonical order");
                    block.data_mut().copy_from_slice(src);
                }
            }
        }
        self.head_w
            .data_mut()
            .copy_from_slice(it.next().expect("head weight buffer"));
        self.head_b
            .data_mut()
            .copy_from_slice(it.next().expect("head bias buffer"));
        assert!(it.next().is_none(), "extra buffers beyond canonical order");
    }

    /// Fills adapters and head with small random values; useful for gradient
    /// checks where zero-initialized blocks would have degenerate gradients.
    pub fn randomize_trainable<R: rand::Rng>(&mut self, rng: &mut R) {
        for stage in self.adapters.iter_mut().flatten() {
            for set in stage {
                for (_, block) in set.blocks_mut() {
                    for v in block.data_mut() {
                        *v = rng.random_range(-0.4..0.4);
                    }
                }
            }
        }
        for v in self.head_w.data_mut() {
            *v = rng.random_range(-0.4..0.4);
        }
        for v in self.head_b.data_mut() {
            *v = rng.random_range(-0.4..0.4);
        }
    }

    /// Registers adapters and head as trainable graph parameters.
    pub fn register_trainable(&self, g: &mut Graph) -> TrainableNodes {
        self.register(g, true)
    }

    /// Reassembles [`TrainableNodes`] from node ids registered elsewhere (the
    /// gradient-check oracle registers parameters itself), in canonical order.
    pub fn nodes_from_ids(&self, ids: &[NodeId]) -> TrainableNodes {
        let mut it = ids.iter().copied();
        let mut adapters = Vec::with_capacity(NUM_STAGES);
        let mut named = Vec::new();
        for (s, stage) in self.adapters.iter().enumerate() {
            match stage {
                None => adapters.push(None),
                Some(sets) => {
                    let mut nodes = Vec::with_capacity(sets.len());
                    for (i, set) in sets.iter().enumerate() {
                        let ids6: Vec<NodeId> = (0..6)
                            .map(|_| it.next().expect("id count matches canonical order"))
                            .collect();
                        for ((block, _), id) in set.blocks().iter().zip(&ids6) {
                            named.push((format!("stage{s}.set{i}.{block}"), *id));
                        }
                        nodes.push(AdapterNodes {
                            w_q: ids6[0],
                            b_q: ids6[1],
                            w_d: ids6[2],
                            b_d: ids6[3],
                            w_u: ids6[4],
                            b_u: ids6[5],
                            gamma: set.gamma(),
                        });
                    }
                    adapters.push(Some(nodes));
                }
            }
        }
        let head_w = it.next().expect("head weight id");
        let head_b = it.next().expect("head bias id");
        assert!(it.next().is_none(), "extra ids beyond canonical order");
        named.push(("head.w".into(), head_w));
        named.push(("head.b".into(), head_b));
        TrainableNodes {
            adapters,
            head_w,
            head_b,
            named,
        }
    }

    /// Registers adapters and head as frozen constants (inference).
    pub fn register_frozen(&self, g: &mut Graph) -> TrainableNodes {
        self.register(g, false)
    }

    fn register(&self, g: &mut Graph, trainable: bool) -> TrainableNodes {
        let mut named = Vec::new();
        let mut adapters = Vec::with_capacity(NUM_STAGES);
        for (s, stage) in self.adapters.iter().enumerate() {
            match stage {
                None => adapters.push(None),
                Some(sets) => {
                    let mut nodes = Vec::with_capacity(sets.len());
                    for (i, set) in sets.iter().enumerate() {
                        let reg = set.register(g, trainable);
                        for ((block, _), id) in set.blocks().iter().zip([
                            reg.w_q, reg.b_q, reg.w_d, reg.b_d, reg.w_u, reg.b_u,
                        ]) {
                            named.push((format!("stage{s}.set{i}.{block}"), id));
                        }
                        nodes.push(reg);
                    }
                    adapters.push(Some(nodes));
                }
            }
        }
        let head_w = if trainable {
            g.param(self.head_w.clone())
        } else {
            g.constant(self.head_w.clone())
        };
        let head_b = if trainable {
            g.param(self.head_b.clone())
        } else {
            g.constant(self.head_b.clone())
        };
        named.push(("head.w".into(), head_w));
        named.push(("head.b".into(), head_b));
        TrainableNodes {
            adapters,
            head_w,
            head_b,
            named,
        }
    }

    /// Full forward pass for one set of selected views on an existing graph.
    pub fn forward_nodes(
        &self,
        g: &mut Graph,
        views: &[Image],
        nodes: &TrainableNodes,
    ) -> Result<ForwardIds, EncoderError> {
        if views.len() != self.config.k {
            return Err(EncoderError::KMismatch {
                expected: self.config.k,
                got: views.len(),
            });
        }
        let want = (
            views[0].height(),
            views[0].width(),
            views[0].channels(),
        );
        for (index, v) in views.iter().enumerate() {
            let got = (v.height(), v.width(), v.channels());
            if got != want {
                return Err(EncoderError::ViewDimsMismatch { index, got, want });
            }
        }
        if want.2 != self.input_channels {
            return Err(EncoderError::ViewDimsMismatch {
                index: 0,
                got: want,
                want: (want.0, want.1, self.input_channels),
            });
        }
        let ps = self.config.patch_size;
        if want.0 % ps != 0 || want.1 % ps != 0 {
            return Err(EncoderError::IndivisibleDims {
                h: want.0,
                w: want.1,
                patch: ps,
            });
        }
        let (gh, gw) = (want.0 / ps, want.1 / ps);
        if gh % 8 != 0 || gw % 8 != 0 {
            return Err(EncoderError::GridNotDivisible { gh, gw });
        }

        let embed_w = g.constant(self.backbone.embed_w.clone());
        let embed_b = g.constant(self.backbone.embed_b.clone());
        let mix: Vec<(NodeId, NodeId)> = (0..NUM_STAGES)
            .map(|s| {
                (
                    g.constant(self.backbone.mix_w[s].clone()),
                    g.constant(self.backbone.mix_b[s].clone()),
                )
            })
            .collect();
        let merge: Vec<(NodeId, NodeId)> = (0..NUM_STAGES - 1)
            .map(|s| {
                (
                    g.constant(self.backbone.merge_w[s].clone()),
                    g.constant(self.backbone.merge_b[s].clone()),
                )
            })
            .collect();

        let mut per_view: Vec<Vec<NodeId>> = vec![Vec::with_capacity(views.len()); NUM_STAGES];
        for (vi, view) in views.iter().enumerate() {
            let mut tokens = patch_embed(g, view, ps, embed_w, Some(embed_b))?;
            let (mut cur_gh, mut cur_gw) = (gh, gw);
            for s in 0..NUM_STAGES {
                if s > 0 {
                    tokens = merge_2x2(g, tokens, cur_gh, cur_gw, merge[s - 1].0, merge[s - 1].1)?;
                    cur_gh /= 2;
                    cur_gw /= 2;
                }
                let mixed = g.linear(tokens, mix[s].0, Some(mix[s].1))?;
                tokens = g.gelu(mixed)?;
                if let Some(stage_nodes) = &nodes.adapters[s] {
                    let set = if self.mode == AdapterMode::HardPerView {
                        &stage_nodes[vi]
                    } else {
                        &stage_nodes[0]
                    };
                    tokens = adapter_forward_view(g, tokens, set, self.mode)?;
                }
                per_view[s].push(tokens);
            }
        }

        let mut fused = Vec::with_capacity(NUM_STAGES);
        for stage_tokens in &per_view {
            let mut acc = stage_tokens[0];
            for &t in &stage_tokens[1..] {
                acc = g.add(acc, t)?;
            }
            fused.push(acc);
        }

        // nearest-neighbor upsample of stages 2..4 onto the stage-1 grid
        let mut head_in = fused[0];
        for s in 1..NUM_STAGES {
            let (sh, sw) = (gh >> s, gw >> s);
            let mut idx = Vec::with_capacity(gh * gw);
            for y in 0..gh {
                for x in 0..gw {
                    idx.push((y >> s) * sw + (x >> s));
                }
            }
            debug_assert!(idx.iter().all(|&i| i < sh * sw));
            let up = g.select_tokens(fused[s], &idx)?;
            head_in = g.concat_last(head_in, up)?;
        }
        let logits = g.linear(head_in, nodes.head_w, Some(nodes.head_b))?;

        Ok(ForwardIds {
            logits,
            per_view,
            fused,
        })
    }

    /// Deterministic value-level forward pass.
    pub fn forward_artifacts(&self, views: &[Image]) -> Result<ForwardArtifacts, EncoderError> {
        let mut g = Graph::new();
        let nodes = self.register_frozen(&mut g);
        let ids = self.forward_nodes(&mut g, views, &nodes)?;
        Ok(ForwardArtifacts {
            logits: g.value(ids.logits).clone(),
            per_view: ids
                .per_view
                .iter()
                .map(|stage| stage.iter().map(|&id| g.value(id).clone()).collect())
                .collect(),
            fused: ids.fused.iter().map(|&id| g.value(id).clone()).collect(),
        })
    }
}

/// Embeds an image as one linear token per non-overlapping patch:
/// `[1, (H/ps)*(W/ps), C_out]`. Patches are flattened `(py, px, channel)`
/// row-major; `w` is `[C_out, ps*ps*C_in]`.
pub fn patch_embed(
    g: &mut Graph,
    img: &Image,
    patch_size: usize,
    w: NodeId,
    b: Option<NodeId>,
) -> Result<NodeId, EncoderError> {
    let (h, wd, c) = (img.height(), img.width(), img.channels());
    if patch_size == 0 || h % patch_size != 0 || wd % patch_size != 0 {
        return Err(EncoderError::IndivisibleDims {
            h,
            w: wd,
            patch: patch_size,
        });
    }
    let (gh, gw) = (h / patch_size, wd / patch_size);
    let n = gh * gw;
    let patch_len = patch_size * patch_size * c;
    let mut rows = Vec::with_capacity(n * patch_len);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for ch in 0..c {
                        rows.push(f64::from(img.at(
                            gy * patch_size + py,
                            gx * patch_size + px,
                            ch,
                        )));
                    }
                }
            }
        }
    }
    let patches = g.constant(Tensor::from_vec(&[n, patch_len], rows)?);
    let embedded = g.linear(patches, w, b)?; // [N, C_out]
    let c_out = g.shape(embedded)[1];
    Ok(g.reshape(embedded, &[1, n, c_out])?)
}

/// 2x2 token-grid downsample: gathers each quad (top-left, top-right,
/// bottom-left, bottom-right), concatenates channels, and applies the merge
/// projection. `[1, gh*gw, C] -> [1, gh*gw/4, C_next]`.
fn merge_2x2(
    g: &mut Graph,
    tokens: NodeId,
    gh: usize,
    gw: usize,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId, EncoderError> {
    let (mh, mw) = (gh / 2, gw / 2);
    let mut tl = Vec::with_capacity(mh * mw);
    let mut tr = Vec::with_capacity(mh * mw);
    let mut bl = Vec::with_capacity(mh * mw);
    let mut br = Vec::with_capacity(mh * mw);
    for my in 0..mh {
        for mx in 0..mw {
            tl.push((2 * my) * gw + 2 * mx);
            tr.push((2 * my) * gw + 2 * mx + 1);
            bl.push((2 * my + 1) * gw + 2 * mx);
            br.push((2 * my + 1) * gw + 2 * mx + 1);
        }
    }
    let t0 = g.select_tokens(tokens, &tl)?;
    let t1 = g.select_tokens(tokens, &tr)?;
    let t2 = g.select_tokens(tokens, &bl)?;
    let t3 = g.select_tokens(tokens, &br)?;
    let top = g.concat_last(t0, t1)?;
    let bottom = g.concat_last(t2, t3)?;
    let quad = g.concat_last(top, bottom)?;
    Ok(g.linear(quad, w, Some(b))?)
}

/// Mean squared error between a prediction and a same-shape target constant.
pub fn mse_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq)?;
    let n = g.value(pred).numel();
    g.scale(total, 1.0 / n as f64)
}

/// One-hot target `[1, N, num_classes]` from a label grid (row-major cells).
pub fn one_hot_target(labels: &LabelGrid, num_classes: usize) -> Result<Tensor, TensorError> {
    let n = labels.height() * labels.width();
    let mut data = vec![0.0; n * num_classes];
    for (i, &l) in labels.data().iter().enumerate() {
        data[i * num_classes + l as usize] = 1.0;
    }
    Tensor::from_vec(&[1, n, num_classes], data)
}

/// Saliency target `[1, N, 1]` from a real grid.
pub fn saliency_target(map: &RealGrid) -> Result<Tensor, TensorError> {
    let n = map.height() * map.width();
    Tensor::from_vec(&[1, n, 1], map.data().to_vec())
}

/// Per-token argmax of `[1, N, C]` logits, reshaped to the token grid.
pub fn argmax_labels(logits: &Tensor, gh: usize, gw: usize) -> LabelGrid {
    let shape = logits.shape();
    assert_eq!(shape[0], 1);
    assert_eq!(shape[1], gh * gw);
    let classes = shape[2];
    let mut out = Vec::with_capacity(gh * gw);
    for token in 0..gh * gw {
        let mut best = (f64::NEG_INFINITY, 0u32);
        for c in 0..classes {
            let v = logits.at(&[0, token, c]);
            if v > best.0 {
                best = (v, c as u32);
            }
        }
        out.push(best.1);
    }
    LabelGrid::new(gh, gw, out)
}

/// Clamped saliency map from `[1, N, 1]` logits.
pub fn saliency_map(logits: &Tensor, gh: usize, gw: usize) -> RealGrid {
    let data = logits.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    RealGrid::new(gh, gw, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn toy_views(seed: u64, k: usize, h: usize, w: usize) -> Vec<Image> {
        let mut r = seeds::rng(seed, "encoder-test-views");
        use rand::Rng;
        (0..k)
            .map(|_| {
                let data = (0..h * w).map(|_| r.random_range(0.0..1.0)).collect();
                Image::new(h, w, 1, data)
            })
            .collect()
    }

    fn toy_model(k: usize, seed: u64) -> Model {
        Model::new(
            EncoderConfig::toy(k, seed),
            1,
            AdapterMode::Shared,
            HeadKind::Segmentation,
        )
        .unwrap()
    }

    #[test]
    fn patch_embed_counts_tokens_and_matches_loop_oracle() {
        let mut g = Graph::new();
        let img = toy_views(1, 1, 32, 32).remove(0);
        let mut r = seeds::rng(2, "pe");
        let w_t = Tensor::rand_uniform(&[5, 16], -1.0, 1.0, &mut r).unwrap();
        let w = g.constant(w_t.clone());
        let out = patch_embed(&mut g, &img, 4, w, None).unwrap();
        assert_eq!(g.shape(out), &[1, 64, 5]);

        // oracle: explicit loops over patches and weight rows
        let ps = 4;
        for gy in 0..2 {
            for gx in 0..2 {
                for co in 0..5 {
                    let mut acc = 0.0;
                    for py in 0..ps {
                        for px in 0..ps {
                            let flat = (py * ps + px) as usize;
                            acc += w_t.at(&[co, flat])
                                * f64::from(img.at(gy * ps + py, gx * ps + px, 0));
                        }
                    }
                    let token = gy * 8 + gx;
                    let got = g.value(out).at(&[0, token, co]);
                    assert!((got - acc).abs() < 1e-12, "token {token} ch {co}");
                }
            }
        }
    }

    #[test]
    fn patch_embed_identity_on_single_patch() {
        // ps=2 on a 2x2 one-channel image with identity weights: the single
        // token equals the flattened patch.
        let mut g = Graph::new();
        let img = Image::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]);
        let eye = Tensor::from_vec(
            &[4, 4],
            (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let w = g.constant(eye);
        let out = patch_embed(&mut g, &img, 2, w, None).unwrap();
        assert_eq!(g.shape(out), &[1, 1, 4]);
        let got: Vec<f32> = g.data(out).iter().map(|&v| v as f32).collect();
        assert_eq!(got, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn patch_embed_rejects_indivisible_dims() {
        let mut g = Graph::new();
        let img = Image::zeros(5, 4, 1);
        let w = g.constant(Tensor::zeros(&[2, 9]).unwrap());
        assert!(matches!(
            patch_embed(&mut g, &img, 3, w, None),
            Err(EncoderError::IndivisibleDims { .. })
        ));
    }

    #[test]
    fn token_count_quarters_per_stage() {
        let model = toy_model(2, 5);
        let views = toy_views(6, 2, 32, 32);
        let art = model.forward_artifacts(&views).unwrap();
        let counts: Vec<usize> = art.fused.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(counts, vec![64, 16, 4, 1]);
        let chans: Vec<usize> = art.fused.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(chans, vec![8, 12, 16, 16]);
    }

    #[test]
    fn fusion_is_pointwise_summation() {
        let model = toy_model(3, 7);
        let views = toy_views(8, 3, 32, 32);
        let art = model.forward_artifacts(&views).unwrap();
        for s in 0..NUM_STAGES {
            for i in 0..art.fused[s].numel() {
                let sum: f64 = art.per_view[s].iter().map(|t| t.data()[i]).sum();
                assert!(
                    (art.fused[s].data()[i] - sum).abs() < 1e-12,
                    "stage {s} entry {i}"
                );
            }
        }
    }

    #[test]
    fn duplicated_view_duplicates_its_stream() {
        let model = toy_model(2, 9);
        let mut views = toy_views(10, 1, 32, 32);
        views.push(views[0].clone());
        let art = model.forward_artifacts(&views).unwrap();
        for s in 0..NUM_STAGES {
            assert_eq!(art.per_view[s][0], art.per_view[s][1], "stage {s}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = toy_model(2, 11);
        let views = toy_views(12, 2, 32, 32);
        let a = model.forward_artifacts(&views).unwrap();
        let b = model.forward_artifacts(&views).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let model = toy_model(2, 13);
        let views = toy_views(14, 2, 32, 32);
        let art = model.forward_artifacts(&views).unwrap();
        assert!(art.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn freshly_initialized_adapters_are_transparent() {
        // Same seed, adapters placed vs absent: init zeroes the up-projection
        // so placed adapters start as exact identities and the streams agree.
        let with = toy_model(2, 15);
        let without = Model::new(
            EncoderConfig::toy(2, 15).without_adapters(),
            1,
            AdapterMode::Shared,
            HeadKind::Segmentation,
        )
        .unwrap();
        let views = toy_views(17, 2, 32, 32);
        let a = with.forward_artifacts(&views).unwrap();
        let b = without.forward_artifacts(&views).unwrap();
        assert_eq!(a.logits, b.logits);
        for s in 0..NUM_STAGES {
            assert_eq!(a.fused[s], b.fused[s], "stage {s}");
        }
    }

    #[test]
    fn gradients_are_zero_for_unplaced_adapters() {
        // placement [false; 4] leaves no adapter params at all, so instead
        // verify: with adapters placed but the loss built from a config whose
        // placement is empty, head grads exist. (The exact-zero property is
        // covered by construction: unplaced stages register no parameters.)
        let model = toy_model(1, 18);
        let names = model.trainable_names();
        assert!(names.iter().any(|n| n.starts_with("stage1.")));
        assert!(names.iter().any(|n| n.starts_with("stage2.")));
        assert!(!names.iter().any(|n| n.starts_with("stage0.")));
        assert!(!names.iter().any(|n| n.starts_with("stage3.")));

        let empty = Model::new(
            EncoderConfig::toy(1, 18).without_adapters(),
            1,
            AdapterMode::Shared,
            HeadKind::Segmentation,
        )
        .unwrap();
        assert_eq!(empty.trainable_names(), vec!["head.w", "head.b"]);
    }

    #[test]
    fn trainable_count_matches_enumeration() {
        let model = toy_model(3, 19);
        let by_tensors: usize = model.trainable_tensors().iter().map(|t| t.numel()).sum();
        assert_eq!(model.trainable_count(), by_tensors);
        // two placed stages with C=12 and C=16, shared mode
        let expected = (65 * 12 + 288) + (65 * 16 + 288)
            + model.head_w.numel() + model.head_b.numel();
        assert_eq!(model.trainable_count(), expected);
    }

    #[test]
    fn k_mismatch_is_rejected() {
        let model = toy_model(3, 20);
        let views = toy_views(21, 2, 32, 32);
        assert!(matches!(
            model.forward_artifacts(&views),
            Err(EncoderError::KMismatch {
                expected: 3,
                got: 2
            })
        ));
    }

    #[test]
    fn grid_not_divisible_is_rejected() {
        let model = toy_model(1, 22);
        let views = toy_views(23, 1, 16, 16); // 4x4 grid, not /8
        assert!(matches!(
            model.forward_artifacts(&views),
            Err(EncoderError::GridNotDivisible { gh: 4, gw: 4 })
        ));
    }

    #[test]
    fn config_validation() {
        let mut config = EncoderConfig::toy(1, 0);
        config.stage_channels = [8, 4, 16, 16];
        assert!(matches!(
            Model::new(config, 1, AdapterMode::Shared, HeadKind::Segmentation),
            Err(EncoderError::ConfigInvalid(_))
        ));
        let config = EncoderConfig {
            k: 0,
            ..EncoderConfig::toy(1, 0)
        };
        assert!(Model::new(config, 1, AdapterMode::Shared, HeadKind::Segmentation).is_err());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut model = toy_model(2, 24);
        let mut r = seeds::rng(25, "fd");
        model.randomize_trainable(&mut r);
        let views = toy_views(26, 2, 32, 32);
        let target =
            one_hot_target(&LabelGrid::new(8, 8, vec![1; 64]), synth::NUM_CLASSES).unwrap();

        let tensors = model.trainable_tensors();
        let names = model.trainable_names();
        let named: Vec<(&str, Tensor)> = names
            .iter()
            .map(|s| s.as_str())
            .zip(tensors)
            .collect();
        let report = crate::tensor::grad_check(
            &named,
            |g, ids| {
                let nodes = model.nodes_from_ids(ids);
                let out = model
                    .forward_nodes(g, &views, &nodes)
                    .map_err(|_| TensorError::ShapeMismatch("forward".into()))?;
                let t = g.constant(target.clone());
                mse_loss(g, out.logits, t)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
