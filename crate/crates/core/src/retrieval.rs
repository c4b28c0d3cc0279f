//! Coarse-to-fine action retrieval.
//!
//! Candidate temporal windows are encoded against their own frames only,
//! scored against the action text, and the best window is refined to pick the
//! individual frames whose attention mass passes a threshold. Everything is
//! trained with margin ranking losses, no frame labels involved.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{msa_forward, AttentionVariant, HeadConfig, MsaParams};
use crate::autodiff::{softmax_in_place, Graph, ParamStore, Var};
use crate::nn::{LayerNorm, Mlp};
use crate::scalar::Real;
use crate::tensor::{Result, Tensor, TensorError};

/// A temporal window of frames, 0-based and inclusive at both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub start: usize,
    pub end: usize,
    pub is_global: bool,
}

impl Proposal {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }

    pub fn frames(&self) -> Vec<usize> {
        (self.start..=self.end).collect()
    }

    /// Whether the window shares at least one frame with `[start, end]`.
    pub fn overlaps(&self, start: usize, end: usize) -> bool {
        self.start <= end && start <= self.end
    }
}

/// Division of a video's frames into action-consistent and action-independent sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePartition {
    pub consistent: Vec<usize>,
    pub independent: Vec<usize>,
    pub clip: Proposal,
}

impl FramePartition {
    /// Builds a partition from frame indices selected inside `clip`.
    pub fn from_selection(clip: Proposal, selected: &[usize], num_frames: usize) -> Result<Self> {
        let mut consistent: Vec<usize> = selected.iter().map(|&j| clip.start + j).collect();
        consistent.sort_unstable();
        consistent.dedup();
        if consistent.is_empty() || consistent.iter().any(|&f| !clip.contains(f)) || clip.end >= num_frames {
            return Err(TensorError::invalid(
                "FramePartition::from_selection",
                format!("selection {selected:?} does not fit clip {clip:?} of {num_frames} frames"),
            ));
        }
        let independent = (0..num_frames).filter(|f| consistent.binary_search(f).is_err()).collect();
        Ok(Self {
            consistent,
            independent,
            clip,
        })
    }

    /// Every frame consistent, as used when retrieval is switched off.
    pub fn all_consistent(num_frames: usize) -> Self {
        Self {
            consistent: (0..num_frames).collect(),
            independent: Vec::new(),
            clip: Proposal {
                start: 0,
                end: num_frames.saturating_sub(1),
                is_global: true,
            },
        }
    }

    pub fn is_consistent(&self, frame: usize) -> bool {
        self.consistent.binary_search(&frame).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalLossConfig {
    pub margin_global: f64,
    pub margin_clip: f64,
    pub margin_fine: f64,
    /// Frame-selection threshold on head-summed attention.
    pub delta: f64,
    /// Treat the input proposal of the fine loss as a fixed negative.
    pub detach_fine_negative: bool,
}

impl Default for RetrievalLossConfig {
    fn default() -> Self {
        Self {
            margin_global: 0.2,
            margin_clip: 0.2,
            margin_fine: 0.2,
            delta: 0.8,
            detach_fine_negative: false,
        }
    }
}

impl RetrievalLossConfig {
    pub fn validate(&self) -> Result<()> {
        let margins = [self.margin_global, self.margin_clip, self.margin_fine];
        if margins.iter().any(|m| !(*m >= 0.0)) || !(self.delta > 0.0) {
            return Err(TensorError::invalid(
                "RetrievalLossConfig",
                "margins must be nonnegative and delta positive",
            ));
        }
        Ok(())
    }
}

/// Global window first, then sliding windows by scale (descending) and start.
///
/// The stride of a scale is `max(1, scale / 2)`; windows identical to the
/// global span are not repeated and scales longer than the video are skipped.
pub fn generate_proposals(num_frames: usize, scales: &[usize]) -> Result<Vec<Proposal>> {
    if num_frames == 0 || scales.is_empty() || scales.contains(&0) {
        return Err(TensorError::invalid(
            "generate_proposals",
            format!("need at least one frame and positive scales, got {num_frames} frames, scales {scales:?}"),
        ));
    }
    let mut out = vec![Proposal {
        start: 0,
        end: num_frames - 1,
        is_global: true,
    }];
    let mut sorted = scales.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.dedup();
    for scale in sorted {
        if scale > num_frames {
            warn!("proposal scale {scale} exceeds {num_frames} frames; skipped");
            continue;
        }
        if scale == num_frames {
            continue;
        }
        let stride = (scale / 2).max(1);
        let mut start = 0;
        while start + scale <= num_frames {
            out.push(Proposal {
                start,
                end: start + scale - 1,
                is_global: false,
            });
            start += stride;
        }
    }
    Ok(out)
}

/// Trainable pieces of the retrieval stage.
#[derive(Clone, Debug)]
pub struct RetrievalParams {
    pub coarse: Vec<(MsaParams, LayerNorm)>,
    pub sim_video: Mlp,
    pub sim_text: Mlp,
    pub fine_query: Mlp,
    pub fine_attn: MsaParams,
}

pub const COARSE_LAYERS: usize = 2;

impl RetrievalParams {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut impl Rng, name: &str, d: usize) -> Result<Self> {
        let mut coarse = Vec::with_capacity(COARSE_LAYERS);
        for l in 0..COARSE_LAYERS {
            coarse.push((
                MsaParams::new(store, rng, &format!("{name}.coarse{l}"), d)?,
                LayerNorm::new(store, &format!("{name}.coarse{l}.norm"), d)?,
            ));
        }
        Ok(Self {
            coarse,
            sim_video: Mlp::new(store, rng, &format!("{name}.sim_video"), d, d, d)?,
            sim_text: Mlp::new(store, rng, &format!("{name}.sim_text"), d, d, d)?,
            fine_query: Mlp::new(store, rng, &format!("{name}.fine_query"), 2 * d, d, d)?,
            fine_attn: MsaParams::new(store, rng, &format!("{name}.fine"), d)?,
        })
    }
}

/// Mean of the member frame tokens of each proposal, `[1, d]` each.
pub fn proposal_init<R: Real>(g: &mut Graph<R>, proposals: &[Proposal], frame_tokens: Var) -> Result<Vec<Var>> {
    let num_frames = g.shape(frame_tokens)[0];
    proposals
        .iter()
        .map(|p| {
            if p.end >= num_frames || p.start > p.end {
                return Err(TensorError::invalid(
                    "proposal_init",
                    format!("proposal {p:?} outside {num_frames} frames"),
                ));
            }
            let members = g.gather(frame_tokens, &p.frames())?;
            g.mean_axis0(members)
        })
        .collect()
}

/// Refines each proposal by self-attention over the sequence made of the
/// proposal and its own frames; frames outside the span are never read.
///
/// `frame_tokens` is `[I, d]`; returns one `[1, d]` feature per proposal.
pub fn coarse_encode<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    params: &RetrievalParams,
    proposals: &[Proposal],
    frame_tokens: Var,
    cfg: &HeadConfig,
) -> Result<Vec<Var>> {
    let init = proposal_init(g, proposals, frame_tokens)?;
    let mut out = Vec::with_capacity(proposals.len());
    for (p, feat) in proposals.iter().zip(init) {
        let members = g.gather(frame_tokens, &p.frames())?;
        // the proposal and its private copy of its frames advance together
        let mut seq = g.concat(&[feat, members], 0)?;
        for (attn, norm) in &params.coarse {
            let o = msa_forward(g, ps, attn, seq, seq, seq, cfg, AttentionVariant::Standard)?;
            let s = g.add(seq, o.out)?;
            seq = norm.forward(g, ps, s)?;
        }
        out.push(g.narrow(seq, 0, 0, 1)?);
    }
    Ok(out)
}

pub fn project_video<R: Real>(g: &mut Graph<R>, ps: &ParamStore<R>, params: &RetrievalParams, x: Var) -> Result<Var> {
    params.sim_video.forward(g, ps, x)
}

pub fn project_text<R: Real>(g: &mut Graph<R>, ps: &ParamStore<R>, params: &RetrievalParams, y: Var) -> Result<Var> {
    params.sim_text.forward(g, ps, y)
}

/// Cosine similarity after projecting the video-side `x` and text-side `y`
/// into a shared space. Zero-norm projections give similarity 0.
pub fn similarity<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    params: &RetrievalParams,
    x: Var,
    y: Var,
) -> Result<Var> {
    let px = project_video(g, ps, params, x)?;
    let py = project_text(g, ps, params, y)?;
    g.cosine(px, py)
}

/// Index of the best-scoring proposal. Exact ties go to the earliest start,
/// then the shortest span, then the earlier position in the list.
pub fn select_clip(proposals: &[Proposal], thetas: &[f64]) -> Result<usize> {
    if proposals.is_empty() || proposals.len() != thetas.len() {
        return Err(TensorError::invalid(
            "select_clip",
            format!("{} proposals with {} scores", proposals.len(), thetas.len()),
        ));
    }
    let mut best = 0;
    for i in 1..proposals.len() {
        let (a, b) = (&proposals[i], &proposals[best]);
        let better = thetas[i] > thetas[best]
            || (thetas[i] == thetas[best] && (a.start, a.len()) < (b.start, b.len()));
        if better {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug)]
pub struct FineOutput {
    /// Refined clip feature `[1, d]`.
    pub refined: Var,
    /// Raw per-head scores of the refined query against each clip frame, `[L, T]`.
    pub head_scores: Var,
}

/// Refines the chosen clip's feature by attending from a text-conditioned
/// query over the clip's frames.
///
/// `clip_feature` and `s_act` are `[1, d]`; `clip_frames` is `[T, d]`.
#[allow(clippy::too_many_arguments)]
pub fn fine_encode<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    params: &RetrievalParams,
    clip: &Proposal,
    clip_feature: Var,
    clip_frames: Var,
    s_act: Var,
    cfg: &HeadConfig,
) -> Result<FineOutput> {
    let t = g.shape(clip_frames)[0];
    if t != clip.len() {
        return Err(TensorError::invalid(
            "fine_encode",
            format!("clip spans {} frames but {t} frame tokens were given", clip.len()),
        ));
    }
    let joint = g.concat(&[clip_feature, s_act], 1)?;
    let query = params.fine_query.forward(g, ps, joint)?;
    let o = msa_forward(g, ps, &params.fine_attn, query, clip_frames, clip_frames, cfg, AttentionVariant::Standard)?;
    let head_scores = g.reshape(o.raw_scores, [cfg.num_heads, t])?;
    Ok(FineOutput {
        refined: o.out,
        head_scores,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSelection {
    /// Per-frame softmax mass summed over heads; totals the head count.
    pub importance: Vec<f64>,
    /// Selected positions within the clip, ascending and never empty.
    pub selected: Vec<usize>,
}

/// Softmax per head over the clip frames, summed across heads; frames above
/// `delta` are selected, falling back to the (earliest) argmax frame.
pub fn select_frames<R: Real>(head_scores: &Tensor<R>, delta: f64) -> Result<FrameSelection> {
    if head_scores.shape().len() != 2 {
        return Err(TensorError::invalid("select_frames", "expects [heads, frames] scores"));
    }
    let t = head_scores.last_dim();
    let mut importance = vec![0.0; t];
    for row in head_scores.data().chunks(t) {
        let mut p: Vec<f64> = row.iter().map(|x| x.to_f64_lossy()).collect();
        softmax_in_place(&mut p);
        importance.iter_mut().zip(&p).for_each(|(s, x)| *s += x);
    }
    let mut selected: Vec<usize> = (0..t).filter(|&j| importance[j] > delta).collect();
    if selected.is_empty() {
        let mut best = 0;
        for j in 1..t {
            if importance[j] > importance[best] {
                best = j;
            }
        }
        selected.push(best);
    }
    Ok(FrameSelection { importance, selected })
}

fn hinge<R: Real>(g: &mut Graph<R>, margin: f64, pos: Var, neg: Var) -> Result<Var> {
    let diff = g.sub(neg, pos)?;
    let shifted = g.add_scalar(diff, R::lit(margin));
    Ok(g.relu(shifted))
}

/// Whole-video ranking loss against a negative text and a negative video.
pub fn loss_global<R: Real>(
    g: &mut Graph<R>,
    pos: Var,
    neg_text: Var,
    neg_video: Var,
    margin: f64,
) -> Result<Var> {
    let a = hinge(g, margin, pos, neg_text)?;
    let b = hinge(g, margin, pos, neg_video)?;
    g.add(a, b)
}

/// Clip-level ranking loss over the similarity sums of the non-global
/// proposals; zero when there are none.
pub fn loss_clip<R: Real>(
    g: &mut Graph<R>,
    pos: &[Var],
    neg_text: &[Var],
    neg_video: &[Var],
    margin: f64,
) -> Result<Var> {
    if pos.len() != neg_text.len() || pos.len() != neg_video.len() {
        return Err(TensorError::invalid(
            "loss_clip",
            format!("{} positives, {} text negatives, {} video negatives", pos.len(), neg_text.len(), neg_video.len()),
        ));
    }
    if pos.is_empty() {
        warn!("clip-level loss needs at least two proposals; contributing 0");
        return Ok(g.constant(Tensor::scalar(R::zero())));
    }
    let total = |g: &mut Graph<R>, xs: &[Var]| -> Result<Var> {
        let flat = xs.iter().map(|&x| g.reshape(x, [1])).collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&flat, 0)?;
        Ok(g.sum(cat))
    };
    let (sp, snt, snv) = (total(g, pos)?, total(g, neg_text)?, total(g, neg_video)?);
    loss_global(g, sp, snt, snv, margin)
}

/// Ranks the refined clip feature above the clip's input feature.
pub fn loss_fine<R: Real>(g: &mut Graph<R>, refined_sim: Var, input_sim: Var, margin: f64) -> Result<Var> {
    hinge(g, margin, refined_sim, input_sim)
}

pub fn retrieval_loss<R: Real>(g: &mut Graph<R>, global: Var, clip: Var, fine: Var) -> Result<Var> {
    let coarse = g.add(global, clip)?;
    g.add(coarse, fine)
}

/// Similarities of every proposal feature to a text feature, plus values.
pub fn proposal_similarities<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    params: &RetrievalParams,
    feats: &[Var],
    text: Var,
) -> Result<Vec<Var>> {
    let pt = project_text(g, ps, params, text)?;
    feats
        .iter()
        .map(|&f| {
            let pv = project_video(g, ps, params, f)?;
            g.cosine(pv, pt)
        })
        .collect()
}

/// Everything the retrieval stage produces for one video.
#[derive(Clone, Debug)]
pub struct RetrievalOutput {
    pub proposals: Vec<Proposal>,
    pub features: Vec<Var>,
    pub thetas: Vec<f64>,
    pub theta_vars: Vec<Var>,
    pub clip_index: usize,
    pub fine: FineOutput,
    pub selection: FrameSelection,
    pub partition: FramePartition,
}

/// Runs coarse encoding, clip choice, fine refinement and frame selection.
#[allow(clippy::too_many_arguments)]
pub fn retrieve<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    params: &RetrievalParams,
    proposals: &[Proposal],
    frame_tokens: Var,
    s_act: Var,
    cfg: &HeadConfig,
    delta: f64,
) -> Result<RetrievalOutput> {
    let num_frames = g.shape(frame_tokens)[0];
    let features = coarse_encode(g, ps, params, proposals, frame_tokens, cfg)?;
    let theta_vars = proposal_similarities(g, ps, params, &features, s_act)?;
    let thetas: Vec<f64> = theta_vars.iter().map(|&v| g.value(v).item().to_f64_lossy()).collect();
    let clip_index = select_clip(proposals, &thetas)?;
    let clip = proposals[clip_index];
    let clip_frames = g.gather(frame_tokens, &clip.frames())?;
    let fine = fine_encode(g, ps, params, &clip, features[clip_index], clip_frames, s_act, cfg)?;
    let selection = select_frames(g.value(fine.head_scores), delta)?;
    let partition = FramePartition::from_selection(clip, &selection.selected, num_frames)?;
    Ok(RetrievalOutput {
        proposals: proposals.to_vec(),
        features,
        thetas,
        theta_vars,
        clip_index,
        fine,
        selection,
        partition,
    })
}
