//! Hierarchical spatio-temporal encoder and the per-frame box decoder.
//!
//! One encoder iteration runs, in order: attribute-spatial fusion on every
//! frame, action-spatial fusion on the action-consistent frames, action-temporal
//! fusion on the frame tokens, then position-wise feed-forward blocks on the
//! video and text tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{msa_forward, AttentionVariant, HeadConfig, MsaParams};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::nn::{normal_tensor, FeedForward, LayerNorm, Linear, Mlp};
use crate::retrieval::FramePartition;
use crate::scalar::Real;
use crate::tensor::{Result, Tensor, TensorError};

/// Per-frame patch grids plus a leading frame token per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoFeatures<R: Real> {
    pub grid: (usize, usize),
    /// `[I, 1 + H*W, D]`; row 0 of every frame is the frame token.
    pub tokens: Tensor<R>,
}

impl<R: Real> VideoFeatures<R> {
    pub fn new(grid: (usize, usize), tokens: Tensor<R>) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 3 || grid.0 * grid.1 == 0 || s[1] != 1 + grid.0 * grid.1 {
            return Err(TensorError::invalid(
                "VideoFeatures::new",
                format!("tokens {s:?} do not hold a frame token plus a {}x{} grid", grid.0, grid.1),
            ));
        }
        Ok(Self { grid, tokens })
    }

    pub fn frames(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

/// Query token features with the attribute/action partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySplit<R: Real> {
    /// `[N, D]`
    pub tokens: Tensor<R>,
    pub attr_idx: Vec<usize>,
    pub act_idx: Vec<usize>,
}

impl<R: Real> QuerySplit<R> {
    pub fn new(tokens: Tensor<R>, attr_idx: Vec<usize>, act_idx: Vec<usize>) -> Result<Self> {
        let n = tokens.shape().first().copied().unwrap_or(0);
        let mut all: Vec<usize> = attr_idx.iter().chain(&act_idx).copied().collect();
        all.sort_unstable();
        let covers = all.len() == n && all.iter().enumerate().all(|(i, &j)| i == j);
        if tokens.shape().len() != 2 || attr_idx.is_empty() || act_idx.is_empty() || !covers {
            return Err(TensorError::invalid(
                "QuerySplit::new",
                format!("attribute {attr_idx:?} and action {act_idx:?} must be nonempty and partition {n} tokens"),
            ));
        }
        Ok(Self {
            tokens,
            attr_idx,
            act_idx,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Mean of the action tokens, `[1, D]`.
    pub fn pooled_act(&self) -> Tensor<R> {
        let d = self.tokens.last_dim();
        let mut out = vec![R::zero(); d];
        for &i in &self.act_idx {
            out.iter_mut().zip(self.tokens.row(i)).for_each(|(o, &x)| *o += x);
        }
        let n = R::from_usize(self.act_idx.len()).unwrap();
        Tensor::new([1, d], out.into_iter().map(|x| x / n).collect()).expect("row shape")
    }

    /// Same split with every token zeroed.
    pub fn zeroed(&self) -> Self {
        Self {
            tokens: Tensor::zeros(self.tokens.shape().to_vec()),
            ..self.clone()
        }
    }
}

/// Which components of the model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub retrieval: bool,
    pub hierarchy: bool,
    pub pyramid: bool,
    pub shifted: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            retrieval: true,
            hierarchy: true,
            pyramid: true,
            shifted: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries_per_frame: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub components: Components,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            queries_per_frame: 4,
            num_heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            components: Components::default(),
        }
    }
}

impl EncoderConfig {
    pub fn heads(&self) -> Result<HeadConfig> {
        HeadConfig::new(self.num_heads, self.model_dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.heads()?;
        if self.decoder_layers == 0 || self.queries_per_frame == 0 || self.ffn_dim == 0 {
            return Err(TensorError::invalid(
                "EncoderConfig",
                "decoder layers, queries per frame and feed-forward width must be positive",
            ));
        }
        Ok(())
    }

    fn spatial_variant(&self, grid: (usize, usize)) -> Option<(usize, usize)> {
        self.components.pyramid.then_some(grid)
    }
}

/// Attribute-spatial parameters: two visual branches and two text branches.
#[derive(Clone, Debug)]
pub struct AttributeSpatialParams {
    pub vis_self: MsaParams,
    pub vis_text: MsaParams,
    pub text_self: MsaParams,
    pub text_vis: MsaParams,
    pub vis_norm: LayerNorm,
    pub text_norm: LayerNorm,
}

/// Action-spatial parameters share the same layout.
pub type ActionSpatialParams = AttributeSpatialParams;

impl AttributeSpatialParams {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut impl Rng, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            vis_self: MsaParams::new(store, rng, &format!("{name}.vis_self"), d)?,
            vis_text: MsaParams::new(store, rng, &format!("{name}.vis_text"), d)?,
            text_self: MsaParams::new(store, rng, &format!("{name}.text_self"), d)?,
            text_vis: MsaParams::new(store, rng, &format!("{name}.text_vis"), d)?,
            vis_norm: LayerNorm::new(store, &format!("{name}.vis_norm"), d)?,
            text_norm: LayerNorm::new(store, &format!("{name}.text_norm"), d)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ActionTemporalParams {
    pub consistent: MsaParams,
    pub independent: MsaParams,
    pub consistent_norm: LayerNorm,
    pub independent_norm: LayerNorm,
}

impl ActionTemporalParams {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut impl Rng, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            consistent: MsaParams::new(store, rng, &format!("{name}.consistent"), d)?,
            independent: MsaParams::new(store, rng, &format!("{name}.independent"), d)?,
            consistent_norm: LayerNorm::new(store, &format!("{name}.consistent_norm"), d)?,
            independent_norm: LayerNorm::new(store, &format!("{name}.independent_norm"), d)?,
        })
    }
}

/// Fusion stage of one encoder iteration.
#[derive(Clone, Debug)]
pub enum Fusion {
    Hierarchical {
        attribute_spatial: AttributeSpatialParams,
        action_spatial: ActionSpatialParams,
        action_temporal: ActionTemporalParams,
    },
    /// Full attention over all video and text tokens at once.
    Joint { attn: MsaParams, norm: LayerNorm },
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub fusion: Fusion,
    pub ff_video: FeedForward,
    pub ff_text: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: MsaParams,
    pub self_norm: LayerNorm,
    pub cross_attn: MsaParams,
    pub cross_norm: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub video_in: Linear,
    pub text_in: Linear,
    pub frame_pos: ParamId,
    pub patch_pos: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    pub object_queries: ParamId,
    pub decoder: Vec<DecoderLayerParams>,
    pub box_head: Mlp,
    pub conf_head: Linear,
}

impl EncoderParams {
    /// `feature_dim` is the width of the raw input features, `frames` and
    /// `grid` size the positional tables.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        cfg: &EncoderConfig,
        feature_dim: usize,
        frames: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut layers = Vec::with_capacity(cfg.encoder_layers);
        for l in 0..cfg.encoder_layers {
            let name = format!("enc{l}");
            let fusion = if cfg.components.hierarchy {
                Fusion::Hierarchical {
                    attribute_spatial: AttributeSpatialParams::new(store, rng, &format!("{name}.attr_spatial"), d)?,
                    action_spatial: AttributeSpatialParams::new(store, rng, &format!("{name}.act_spatial"), d)?,
                    action_temporal: ActionTemporalParams::new(store, rng, &format!("{name}.act_temporal"), d)?,
                }
            } else {
                Fusion::Joint {
                    attn: MsaParams::new(store, rng, &format!("{name}.joint"), d)?,
                    norm: LayerNorm::new(store, &format!("{name}.joint_norm"), d)?,
                }
            };
            layers.push(EncoderLayerParams {
                fusion,
                ff_video: FeedForward::new(store, rng, &format!("{name}.ff_video"), d, cfg.ffn_dim)?,
                ff_text: FeedForward::new(store, rng, &format!("{name}.ff_text"), d, cfg.ffn_dim)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            let name = format!("dec{l}");
            decoder.push(DecoderLayerParams {
                self_attn: MsaParams::new(store, rng, &format!("{name}.self"), d)?,
                self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d)?,
                cross_attn: MsaParams::new(store, rng, &format!("{name}.cross"), d)?,
                cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d)?,
                ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, cfg.ffn_dim)?,
            });
        }
        let j = grid.0 * grid.1;
        Ok(Self {
            // raw features are unit-norm vectors, so unit weights give unit-variance outputs
            video_in: Linear::with_std(store, rng, "video_in", feature_dim, d, 1.0)?,
            text_in: Linear::with_std(store, rng, "text_in", feature_dim, d, 1.0)?,
            frame_pos: store.add("frame_pos", normal_tensor(rng, &[frames, 1, d], 0.1))?,
            patch_pos: store.add("patch_pos", normal_tensor(rng, &[1, 1 + j, d], 1.0))?,
            layers,
            object_queries: store.add("object_queries", normal_tensor(rng, &[1, cfg.queries_per_frame, d], 1.0))?,
            decoder,
            box_head: Mlp::new(store, rng, "box_head", d, d, 4)?,
            conf_head: Linear::new(store, rng, "conf_head", d, 1)?,
        })
    }
}

/// Projects raw features into the model width and adds positions.
///
/// Returns `(video [I, 1+J, d], text [N, d])`.
pub fn embed_inputs<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    params: &EncoderParams,
    video: &VideoFeatures<R>,
    query: &QuerySplit<R>,
) -> Result<(Var, Var)> {
    let i = video.frames();
    let fp = ps.value(params.frame_pos).shape()[0];
    if i > fp {
        return Err(TensorError::invalid(
            "embed_inputs",
            format!("{i} frames but positions exist for {fp}"),
        ));
    }
    let v = g.constant(video.tokens.clone());
    let v = params.video_in.forward(g, ps, v)?;
    let frame_pos = g.param(ps, params.frame_pos);
    let frame_pos = g.narrow(frame_pos, 0, 0, i)?;
    let n = video.patches() + 1;
    let frame_pos = {
        let reps: Vec<Var> = vec![frame_pos; n];
        g.concat(&reps, 1)?
    };
    let patch_pos = g.param(ps, params.patch_pos);
    let patch_pos = g.broadcast0(patch_pos, i)?;
    let v = g.add(v, frame_pos)?;
    let v = g.add(v, patch_pos)?;
    let s = g.constant(query.tokens.clone());
    let s = params.text_in.forward(g, ps, s)?;
    Ok((v, s))
}

/// Replaces the rows `idx` of `base` (along axis 0) with the rows of `update`.
fn scatter_rows<R: Real>(g: &mut Graph<R>, base: Var, update: Var, idx: &[usize]) -> Result<Var> {
    let n = g.shape(base)[0];
    let mut order: Vec<usize> = (0..n).collect();
    for (k, &i) in idx.iter().enumerate() {
        order[i] = n + k;
    }
    let joined = g.concat(&[base, update], 0)?;
    g.gather(joined, &order)
}

fn residual_norm<R: Real>(g: &mut Graph<R>, ps: &ParamStore<R>, norm: &LayerNorm, x: Var, branches: &[Var]) -> Result<Var> {
    let mut s = x;
    for &b in branches {
        s = g.add(s, b)?;
    }
    norm.forward(g, ps, s)
}

/// Mean over the leading (frame) axis of `[I, n, d]`, returned as `[n, d]`;
/// a single-frame result arrives already as `[n, d]`.
fn frame_mean<R: Real>(g: &mut Graph<R>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() == 2 {
        return Ok(x);
    }
    let m = g.mean_axis0(x)?;
    g.reshape(m, [s[1], s[2]])
}

/// Attribute-spatial fusion on every frame.
///
/// `video` is `[I, 1+J, d]`, `s_attr` is `[Na, d]`. Both outputs are computed
/// from the inputs as given.
pub fn attribute_spatial_layer<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    p: &AttributeSpatialParams,
    video: Var,
    s_attr: Var,
    grid: (usize, usize),
    cfg: &EncoderConfig,
) -> Result<(Var, Var)> {
    let heads = cfg.heads()?;
    let (pyq, pyk) = match cfg.spatial_variant(grid) {
        Some(grid) => (
            AttentionVariant::PyramidQuery { grid },
            AttentionVariant::PyramidKey { grid },
        ),
        None => (AttentionVariant::Standard, AttentionVariant::Standard),
    };
    let a = msa_forward(g, ps, &p.vis_self, video, video, video, &heads, pyq)?.out;
    let b = msa_forward(g, ps, &p.vis_text, video, s_attr, s_attr, &heads, pyq)?.out;
    let new_video = residual_norm(g, ps, &p.vis_norm, video, &[a, b])?;

    let c = msa_forward(g, ps, &p.text_self, s_attr, s_attr, s_attr, &heads, AttentionVariant::Standard)?.out;
    let per_frame = msa_forward(g, ps, &p.text_vis, s_attr, video, video, &heads, pyk)?.out;
    let d = frame_mean(g, per_frame)?;
    let new_text = residual_norm(g, ps, &p.text_norm, s_attr, &[c, d])?;
    Ok((new_video, new_text))
}

/// Circular previous/next positions within a set of `n` frames.
pub fn circular_neighbors(n: usize) -> (Vec<usize>, Vec<usize>) {
    let prev = (0..n).map(|i| (i + n - 1) % n).collect();
    let next = (0..n).map(|i| (i + 1) % n).collect();
    (prev, next)
}

/// Action-spatial fusion over the consistent frames only.
///
/// `video_consistent` is `[Ic, 1+J, d]` in consistent-set order and `s_act`
/// is `[Nc, d]`. Neighbors wrap around at both ends of the set.
pub fn action_spatial_layer<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    p: &ActionSpatialParams,
    video_consistent: Var,
    s_act: Var,
    cfg: &EncoderConfig,
) -> Result<(Var, Var)> {
    let heads = cfg.heads()?;
    let n = g.shape(video_consistent)[0];
    let (shq, shk) = if cfg.components.shifted {
        let (pi, ni) = circular_neighbors(n);
        let prev = g.gather(video_consistent, &pi)?;
        let next = g.gather(video_consistent, &ni)?;
        (
            AttentionVariant::ShiftedQuery { prev, next },
            AttentionVariant::ShiftedKey { prev, next },
        )
    } else {
        (AttentionVariant::Standard, AttentionVariant::Standard)
    };
    let x = video_consistent;
    let a = msa_forward(g, ps, &p.vis_self, x, x, x, &heads, shq)?.out;
    let b = msa_forward(g, ps, &p.vis_text, x, s_act, s_act, &heads, shq)?.out;
    let new_video = residual_norm(g, ps, &p.vis_norm, x, &[a, b])?;

    let c = msa_forward(g, ps, &p.text_self, s_act, s_act, s_act, &heads, AttentionVariant::Standard)?.out;
    let per_frame = msa_forward(g, ps, &p.text_vis, s_act, x, x, &heads, shk)?.out;
    let d = frame_mean(g, per_frame)?;
    let new_text = residual_norm(g, ps, &p.text_norm, s_act, &[c, d])?;
    Ok((new_video, new_text))
}

/// Action-temporal fusion on frame tokens `[I, d]`.
///
/// Consistent tokens attend over themselves and the full sentence;
/// independent tokens attend over themselves, the consistent tokens and the
/// action tokens. Information only flows from consistent to independent.
pub fn action_temporal_layer<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    p: &ActionTemporalParams,
    frame_tokens: Var,
    partition: &FramePartition,
    text: Var,
    act_idx: &[usize],
    cfg: &EncoderConfig,
) -> Result<Var> {
    if partition.consistent.is_empty() {
        return Err(TensorError::invalid("action_temporal_layer", "no consistent frames"));
    }
    let heads = cfg.heads()?;
    let re = g.gather(frame_tokens, &partition.consistent)?;
    let kv = g.concat(&[re, text], 0)?;
    let a = msa_forward(g, ps, &p.consistent, re, kv, kv, &heads, AttentionVariant::Standard)?.out;
    let new_re = residual_norm(g, ps, &p.consistent_norm, re, &[a])?;
    let mut out = scatter_rows(g, frame_tokens, new_re, &partition.consistent)?;
    if !partition.independent.is_empty() {
        let ir = g.gather(frame_tokens, &partition.independent)?;
        let s_act = g.gather(text, act_idx)?;
        let kv = g.concat(&[ir, re, s_act], 0)?;
        let b = msa_forward(g, ps, &p.independent, ir, kv, kv, &heads, AttentionVariant::Standard)?.out;
        let new_ir = residual_norm(g, ps, &p.independent_norm, ir, &[b])?;
        out = scatter_rows(g, out, new_ir, &partition.independent)?;
    }
    Ok(out)
}

fn joint_layer<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    attn: &MsaParams,
    norm: &LayerNorm,
    video: Var,
    text: Var,
    cfg: &EncoderConfig,
) -> Result<(Var, Var)> {
    let s = g.shape(video).to_vec();
    let (i, n, d) = (s[0], s[1], s[2]);
    let flat = g.reshape(video, [i * n, d])?;
    let all = g.concat(&[flat, text], 0)?;
    let o = msa_forward(g, ps, attn, all, all, all, &cfg.heads()?, AttentionVariant::Standard)?.out;
    let all = residual_norm(g, ps, norm, all, &[o])?;
    let v = g.narrow(all, 0, 0, i * n)?;
    let v = g.reshape(v, [i, n, d])?;
    let t = g.narrow(all, 0, i * n, g.shape(text)[0])?;
    Ok((v, t))
}

/// One encoder iteration on embedded video `[I, 1+J, d]` and text `[N, d]`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    layer: &EncoderLayerParams,
    video: Var,
    text: Var,
    query: &QuerySplit<R>,
    partition: &FramePartition,
    grid: (usize, usize),
    cfg: &EncoderConfig,
) -> Result<(Var, Var)> {
    let (video, text) = match &layer.fusion {
        Fusion::Hierarchical {
            attribute_spatial,
            action_spatial,
            action_temporal,
        } => {
            let s_attr = g.gather(text, &query.attr_idx)?;
            let (video, s_attr) = attribute_spatial_layer(g, ps, attribute_spatial, video, s_attr, grid, cfg)?;
            let text = scatter_rows(g, text, s_attr, &query.attr_idx)?;

            let vc = g.gather(video, &partition.consistent)?;
            let s_act = g.gather(text, &query.act_idx)?;
            let (vc, s_act) = action_spatial_layer(g, ps, action_spatial, vc, s_act, cfg)?;
            let video = scatter_rows(g, video, vc, &partition.consistent)?;
            let text = scatter_rows(g, text, s_act, &query.act_idx)?;

            let s = g.shape(video).to_vec();
            let (i, n, d) = (s[0], s[1], s[2]);
            let ft = g.narrow(video, 1, 0, 1)?;
            let ft = g.reshape(ft, [i, d])?;
            let ft = action_temporal_layer(g, ps, action_temporal, ft, partition, text, &query.act_idx, cfg)?;
            let ft = g.reshape(ft, [i, 1, d])?;
            let patches = g.narrow(video, 1, 1, n - 1)?;
            let video = g.concat(&[ft, patches], 1)?;
            (video, text)
        }
        Fusion::Joint { attn, norm } => joint_layer(g, ps, attn, norm, video, text, cfg)?,
    };
    let video = layer.ff_video.forward(g, ps, video)?;
    let text = layer.ff_text.forward(g, ps, text)?;
    Ok((video, text))
}

/// All encoder iterations in sequence.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    params: &EncoderParams,
    video: Var,
    text: Var,
    query: &QuerySplit<R>,
    partition: &FramePartition,
    grid: (usize, usize),
    cfg: &EncoderConfig,
) -> Result<(Var, Var)> {
    let (mut v, mut t) = (video, text);
    for layer in &params.layers {
        (v, t) = encoder_layer(g, ps, layer, v, t, query, partition, grid, cfg)?;
    }
    Ok((v, t))
}

/// Per-frame object queries decoded against that frame's tokens and the text.
///
/// Returns `[I, Q, d]` plus the cross-attention weights of the last layer.
pub fn decoder_forward<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    params: &EncoderParams,
    video: Var,
    text: Var,
    cfg: &EncoderConfig,
) -> Result<(Var, Var)> {
    let heads = cfg.heads()?;
    let i = g.shape(video)[0];
    let n = g.shape(text)[0];
    let d = cfg.model_dim;
    let q0 = g.param(ps, params.object_queries);
    let mut q = g.broadcast0(q0, i)?;
    let t3 = g.reshape(text, [1, n, d])?;
    let tb = g.broadcast0(t3, i)?;
    let memory = g.concat(&[video, tb], 1)?;
    let mut weights = None;
    for layer in &params.decoder {
        let a = msa_forward(g, ps, &layer.self_attn, q, q, q, &heads, AttentionVariant::Standard)?.out;
        q = residual_norm(g, ps, &layer.self_norm, q, &[a])?;
        let c = msa_forward(g, ps, &layer.cross_attn, q, memory, memory, &heads, AttentionVariant::Standard)?;
        weights = Some(c.weights);
        q = residual_norm(g, ps, &layer.cross_norm, q, &[c.out])?;
        q = layer.ff.forward(g, ps, q)?;
    }
    let weights = weights.ok_or_else(|| TensorError::invalid("decoder_forward", "no decoder layers"))?;
    Ok((q, weights))
}

/// Box and confidence heads.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Normalized `(cx, cy, w, h)` per query, `[I, Q, 4]`.
    pub boxes: Var,
    /// Confidence logits, `[I, Q, 1]`.
    pub conf_logits: Var,
}

pub fn box_heads<R: Real>(g: &mut Graph<R>, ps: &ParamStore<R>, params: &EncoderParams, decoded: Var) -> Result<HeadOutput> {
    let raw = params.box_head.forward(g, ps, decoded)?;
    let boxes = g.sigmoid(raw);
    let conf_logits = params.conf_head.forward(g, ps, decoded)?;
    Ok(HeadOutput { boxes, conf_logits })
}

/// Per-frame predictions read from the head outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePredictions {
    /// `boxes[i][q]` is `[cx, cy, w, h]`.
    pub boxes: Vec<Vec<[f64; 4]>>,
    pub confidences: Vec<Vec<f64>>,
    /// Highest-confidence query per frame, lowest index on ties.
    pub chosen: Vec<usize>,
}

impl FramePredictions {
    pub fn chosen_boxes(&self) -> Vec<[f64; 4]> {
        self.chosen.iter().enumerate().map(|(i, &q)| self.boxes[i][q]).collect()
    }
}

pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Reads boxes and sigmoid confidences and picks one box per frame.
pub fn predict_boxes<R: Real>(boxes: &Tensor<R>, conf_logits: &Tensor<R>) -> Result<FramePredictions> {
    let s = boxes.shape();
    if s.len() != 3 || s[2] != 4 || conf_logits.len() != s[0] * s[1] {
        return Err(TensorError::invalid(
            "predict_boxes",
            format!("boxes {s:?} with confidences {:?}", conf_logits.shape()),
        ));
    }
    let (i, q) = (s[0], s[1]);
    let b = boxes.to_f64_vec();
    let c = conf_logits.to_f64_vec();
    let mut out = FramePredictions {
        boxes: Vec::with_capacity(i),
        confidences: Vec::with_capacity(i),
        chosen: Vec::with_capacity(i),
    };
    for f in 0..i {
        let fb = (0..q)
            .map(|k| {
                let o = (f * q + k) * 4;
                [b[o], b[o + 1], b[o + 2], b[o + 3]]
            })
            .collect();
        let fc: Vec<f64> = (0..q).map(|k| 1.0 / (1.0 + (-c[f * q + k]).exp())).collect();
        out.chosen.push(argmax_first(&fc));
        out.boxes.push(fb);
        out.confidences.push(fc);
    }
    Ok(out)
}
