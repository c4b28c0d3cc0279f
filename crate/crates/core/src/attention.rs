//! Attention score variants and multi-head assembly.
//!
//! Scores are raw dot products `Q K^T`. The pyramid variants add a term in
//! which the patch side is replaced by its 3x3 valid-neighbor mean; the shifted
//! variants add the same product taken against the previous and next frames.
//! All extra terms are summed before scaling and softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::nn::weight;
use crate::scalar::Real;
use crate::tensor::{Result, TensorError};

/// Which operand of a locality-aware score carries the frame patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Query,
    Key,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_heads: usize,
    pub model_dim: usize,
}

impl HeadConfig {
    pub fn new(num_heads: usize, model_dim: usize) -> Result<Self> {
        if num_heads == 0 || model_dim == 0 || model_dim % num_heads != 0 {
            return Err(TensorError::invalid(
                "HeadConfig",
                format!("model_dim {model_dim} must be a positive multiple of num_heads {num_heads}"),
            ));
        }
        Ok(Self {
            num_heads,
            model_dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Score variant used inside [`msa_forward`].
///
/// Patch-side tensors are `[B, lead + H*W, d]` where `lead` is 0 or 1; a
/// leading frame token is kept out of the pooling and pools to itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionVariant {
    Standard,
    PyramidQuery { grid: (usize, usize) },
    PyramidKey { grid: (usize, usize) },
    /// Neighbors of the query-side frames, shaped like the query.
    ShiftedQuery { prev: Var, next: Var },
    /// Neighbors of the key-side frames, shaped like the key.
    ShiftedKey { prev: Var, next: Var },
}

/// Projections of one multi-head attention block.
#[derive(Clone, Debug)]
pub struct MsaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MsaParams {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
    ) -> Result<Self> {
        Ok(Self {
            wq: weight(store, rng, &format!("{name}.wq"), d, d)?,
            wk: weight(store, rng, &format!("{name}.wk"), d, d)?,
            wv: weight(store, rng, &format!("{name}.wv"), d, d)?,
            wo: weight(store, rng, &format!("{name}.wo"), d, d)?,
        })
    }
}

/// Result of one multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct MsaOutput {
    /// Same leading shape as the query input.
    pub out: Var,
    /// Per-head softmax weights `[B, heads, n, m]`.
    pub weights: Var,
    /// Per-head raw scores before scaling and softmax, `[B, heads, n, m]`.
    pub raw_scores: Var,
}

fn patch_lead(n: usize, grid: (usize, usize), op: &'static str) -> Result<usize> {
    let j = grid.0 * grid.1;
    match n.checked_sub(j) {
        Some(lead @ (0 | 1)) if j > 0 => Ok(lead),
        _ => Err(TensorError::invalid(
            op,
            format!("{n} tokens do not form a {}x{} patch grid", grid.0, grid.1),
        )),
    }
}

fn batch(shape: &[usize]) -> usize {
    if shape.len() == 3 {
        shape[0]
    } else {
        1
    }
}

/// Repeats a single-entry operand across `b` batch entries.
fn widen<R: Real>(g: &mut Graph<R>, x: Var, b: usize) -> Result<Var> {
    if b <= 1 || batch(g.shape(x)) != 1 {
        return Ok(x);
    }
    let s = g.shape(x).to_vec();
    let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
    let x3 = g.reshape(x, [1, n, d])?;
    g.broadcast0(x3, b)
}

fn tokens(shape: &[usize]) -> usize {
    shape[shape.len() - 2]
}

/// Raw single-head scores `Q K^T`, `[n, m]`.
pub fn compute_scores_standard<R: Real>(g: &mut Graph<R>, q: Var, k: Var) -> Result<Var> {
    let (n, m) = (tokens(g.shape(q)), tokens(g.shape(k)));
    if g.shape(q).len() != 2 || g.shape(k).len() != 2 {
        return Err(TensorError::invalid("compute_scores_standard", "expects matrices"));
    }
    let s = g.head_scores(q, k, 1)?;
    g.reshape(s, [n, m])
}

/// Pyramid scores against the patches `[J, d]` of one frame laid out on `grid`.
///
/// `Side::Key`: `Q F^T + Q Avg(F)^T`. `Side::Query`: `F K^T + Avg(F) K^T`.
pub fn compute_scores_pyramid<R: Real>(
    g: &mut Graph<R>,
    side_tokens: Var,
    frame_patches: Var,
    grid: (usize, usize),
    side: Side,
) -> Result<Var> {
    let j = tokens(g.shape(frame_patches));
    if j != grid.0 * grid.1 {
        return Err(TensorError::invalid(
            "compute_scores_pyramid",
            format!("{j} patches for a {}x{} grid", grid.0, grid.1),
        ));
    }
    let pooled = g.mean_pool_3x3_valid(frame_patches, grid.0, grid.1, 0)?;
    let (a, b) = match side {
        Side::Key => (
            compute_scores_standard(g, side_tokens, frame_patches)?,
            compute_scores_standard(g, side_tokens, pooled)?,
        ),
        Side::Query => (
            compute_scores_standard(g, frame_patches, side_tokens)?,
            compute_scores_standard(g, pooled, side_tokens)?,
        ),
    };
    g.add(a, b)
}

/// Shifted scores: the frame term plus the next- and previous-frame terms.
pub fn compute_scores_shifted<R: Real>(
    g: &mut Graph<R>,
    side_tokens: Var,
    frame_patches: Var,
    prev: Var,
    next: Var,
    side: Side,
) -> Result<Var> {
    for nb in [prev, next] {
        if g.shape(nb) != g.shape(frame_patches) {
            return Err(TensorError::ShapeMismatch {
                op: "compute_scores_shifted",
                lhs: g.shape(frame_patches).to_vec(),
                rhs: g.shape(nb).to_vec(),
            });
        }
    }
    let mut terms = Vec::with_capacity(3);
    for f in [frame_patches, next, prev] {
        terms.push(match side {
            Side::Key => compute_scores_standard(g, side_tokens, f)?,
            Side::Query => compute_scores_standard(g, f, side_tokens)?,
        });
    }
    let s = g.add(terms[0], terms[1])?;
    g.add(s, terms[2])
}

/// Multi-head attention: per-head projected variant scores, scaled by
/// `1/sqrt(head_dim)`, softmax over keys, weighted values, heads
/// concatenated and mixed by the output projection.
///
/// `q` is `[n, d]` or `[B, n, d]`; `k` and `v` are `[m, d]` or `[Bk, m, d]`
/// with `Bk` either 1 or `B`. A single query entry is repeated across a
/// batch of keys.
#[allow(clippy::too_many_arguments)]
pub fn msa_forward<R: Real>(
    g: &mut Graph<R>,
    ps: &ParamStore<R>,
    params: &MsaParams,
    q: Var,
    k: Var,
    v: Var,
    cfg: &HeadConfig,
    variant: AttentionVariant,
) -> Result<MsaOutput> {
    let d = cfg.model_dim;
    for x in [q, k, v] {
        if g.shape(x).last() != Some(&d) {
            return Err(TensorError::invalid(
                "msa_forward",
                format!("feature dim of {:?} is not model_dim {d}", g.shape(x)),
            ));
        }
    }
    if tokens(g.shape(k)) != tokens(g.shape(v)) {
        return Err(TensorError::ShapeMismatch {
            op: "msa_forward",
            lhs: g.shape(k).to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    let heads = cfg.num_heads;
    let wq = g.param(ps, params.wq);
    let wk = g.param(ps, params.wk);
    let wv = g.param(ps, params.wv);
    let wo = g.param(ps, params.wo);
    let qp = g.matmul(q, wq)?;
    let kp = g.matmul(k, wk)?;
    let vp = g.matmul(v, wv)?;
    let kb = batch(g.shape(k));
    let qp = widen(g, qp, kb)?;

    let base = g.head_scores(qp, kp, heads)?;
    let raw = match variant {
        AttentionVariant::Standard => base,
        AttentionVariant::PyramidQuery { grid } => {
            let lead = patch_lead(tokens(g.shape(q)), grid, "msa_forward(pyramid query)")?;
            let pooled = g.mean_pool_3x3_valid(qp, grid.0, grid.1, lead)?;
            let extra = g.head_scores(pooled, kp, heads)?;
            g.add(base, extra)?
        }
        AttentionVariant::PyramidKey { grid } => {
            let lead = patch_lead(tokens(g.shape(k)), grid, "msa_forward(pyramid key)")?;
            let pooled = g.mean_pool_3x3_valid(kp, grid.0, grid.1, lead)?;
            let extra = g.head_scores(qp, pooled, heads)?;
            g.add(base, extra)?
        }
        AttentionVariant::ShiftedQuery { prev, next } => {
            for nb in [prev, next] {
                if g.shape(nb) != g.shape(q) {
                    return Err(TensorError::ShapeMismatch {
                        op: "msa_forward(shifted query)",
                        lhs: g.shape(q).to_vec(),
                        rhs: g.shape(nb).to_vec(),
                    });
                }
            }
            let np = g.matmul(next, wq)?;
            let np = widen(g, np, kb)?;
            let pp = g.matmul(prev, wq)?;
            let pp = widen(g, pp, kb)?;
            let s_next = g.head_scores(np, kp, heads)?;
            let s_prev = g.head_scores(pp, kp, heads)?;
            let s = g.add(base, s_next)?;
            g.add(s, s_prev)?
        }
        AttentionVariant::ShiftedKey { prev, next } => {
            for nb in [prev, next] {
                if g.shape(nb) != g.shape(k) {
                    return Err(TensorError::ShapeMismatch {
                        op: "msa_forward(shifted key)",
                        lhs: g.shape(k).to_vec(),
                        rhs: g.shape(nb).to_vec(),
                    });
                }
            }
            let np = g.matmul(next, wk)?;
            let pp = g.matmul(prev, wk)?;
            let s_next = g.head_scores(qp, np, heads)?;
            let s_prev = g.head_scores(qp, pp, heads)?;
            let s = g.add(base, s_next)?;
            g.add(s, s_prev)?
        }
    };
    let scale = R::one() / R::from_usize(cfg.head_dim()).unwrap().sqrt();
    let scaled = g.scale(raw, scale);
    let weights = g.softmax(scaled);
    let mixed = g.head_mix(weights, vp, heads)?;
    let mut out = g.matmul(mixed, wo)?;
    if g.shape(q).len() == 2 && g.shape(out)[0] == 1 {
        let n = tokens(g.shape(q));
        out = g.reshape(out, [n, d])?;
    }
    Ok(MsaOutput {
        out,
        weights,
        raw_scores: raw,
    })
}
