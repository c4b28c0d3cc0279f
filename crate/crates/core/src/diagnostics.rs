//! Finite-difference gradient checks over every differentiable op and the
//! full training objective, plus brute-force checks of the attention
//! kernels and the structural isolation guarantees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    compute_scores_pyramid, compute_scores_shifted, compute_scores_standard, msa_forward, AttentionVariant, HeadConfig,
    MsaParams, Side,
};
use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamId, ParamStore, Var};
use crate::config::HeroConfig;
use crate::encoder::{action_temporal_layer, EncoderConfig, EncoderParams, Fusion, HeadOutput};
use crate::eval::BBox;
use crate::pipeline::{detection_loss, HeroModel, InputShape};
use crate::nn::normal_tensor;
use crate::retrieval::{coarse_encode, generate_proposals, loss_fine, select_frames, FramePartition, Proposal, RetrievalParams};
use crate::tensor::{Result, Tensor};
use crate::world::{generate_set, Action, WorldConfig};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Entries of uniform magnitude in `[0.2, 1]` with random sign, keeping
/// inputs clear of the kinks of relu, abs, min and max.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    away_from_zero(rng, shape).map(|x| 1.0 + 0.5 * x.abs())
}

type OpFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Each case names an op, the shapes of its inputs and how to apply it.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, x| g.matmul(x[0], x[1])),
        ("transpose", vec![vec![3, 4]], |g, x| g.transpose(x[0])),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, x| g.add(x[0], x[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, x| g.sub(x[0], x[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, x| g.mul(x[0], x[1])),
        ("div", vec![vec![2, 3], vec![0, 2, 3]], |g, x| g.div(x[0], x[1])),
        ("minimum", vec![vec![2, 3], vec![2, 3]], |g, x| g.minimum(x[0], x[1])),
        ("maximum", vec![vec![2, 3], vec![2, 3]], |g, x| g.maximum(x[0], x[1])),
        ("add_bias", vec![vec![3, 4], vec![4]], |g, x| g.add_bias(x[0], x[1])),
        ("affine", vec![vec![5]], |g, x| Ok(g.affine(x[0], 0.7, -0.3))),
        ("scale", vec![vec![5]], |g, x| Ok(g.scale(x[0], -1.7))),
        ("neg", vec![vec![5]], |g, x| Ok(g.neg(x[0]))),
        ("add_scalar", vec![vec![5]], |g, x| Ok(g.add_scalar(x[0], 0.4))),
        ("relu", vec![vec![6]], |g, x| Ok(g.relu(x[0]))),
        ("sigmoid", vec![vec![6]], |g, x| Ok(g.sigmoid(x[0]))),
        ("softplus", vec![vec![6]], |g, x| Ok(g.softplus(x[0]))),
        ("abs", vec![vec![6]], |g, x| Ok(g.abs(x[0]))),
        ("sum", vec![vec![2, 3]], |g, x| Ok(g.sum(x[0]))),
        ("mean", vec![vec![2, 3]], |g, x| Ok(g.mean(x[0]))),
        ("mean_axis0", vec![vec![3, 2, 2]], |g, x| g.mean_axis0(x[0])),
        ("softmax", vec![vec![3, 4]], |g, x| Ok(g.softmax(x[0]))),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, x| g.layer_norm(x[0], x[1], x[2])),
        ("reshape", vec![vec![2, 3]], |g, x| g.reshape(x[0], [3, 2])),
        ("narrow", vec![vec![3, 4]], |g, x| g.narrow(x[0], 1, 1, 2)),
        ("concat", vec![vec![2, 3], vec![1, 3]], |g, x| g.concat(&[x[0], x[1]], 0)),
        ("gather", vec![vec![4, 3]], |g, x| g.gather(x[0], &[2, 0, 2])),
        ("broadcast0", vec![vec![1, 2, 3]], |g, x| g.broadcast0(x[0], 3)),
        ("mean_pool_3x3_valid", vec![vec![2, 7, 3]], |g, x| g.mean_pool_3x3_valid(x[0], 2, 3, 1)),
        ("head_scores", vec![vec![2, 3, 4], vec![2, 5, 4]], |g, x| g.head_scores(x[0], x[1], 2)),
        ("head_mix", vec![vec![2, 2, 3, 5], vec![2, 5, 4]], |g, x| g.head_mix(x[0], x[1], 2)),
        ("cosine", vec![vec![1, 4], vec![1, 4]], |g, x| g.cosine(x[0], x[1])),
    ]
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

fn entry(name: impl Into<String>, report: GradCheckReport) -> SuiteEntry {
    SuiteEntry {
        name: name.into(),
        report,
    }
}

/// Inputs of the op checks, as parameters. A leading 0 in a shape asks for
/// strictly positive entries (used for divisors).
fn op_inputs(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Result<(ParamStore<f64>, Vec<ParamId>)> {
    let mut ps = ParamStore::new();
    let mut ids = Vec::new();
    for (k, s) in shapes.iter().enumerate() {
        let t = if s.first() == Some(&0) {
            positive(rng, &s[1..])
        } else {
            away_from_zero(rng, s)
        };
        ids.push(ps.add(format!("x{k}"), t)?);
    }
    Ok((ps, ids))
}

/// Weighted sum with fixed random weights, so every output coordinate matters.
fn reduce(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.reshape(g.shape(y).to_vec())?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check_ops(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for (name, shapes, f) in op_cases() {
        let (mut ps, ids) = op_inputs(rng, &shapes)?;
        if name == "minimum" || name == "maximum" {
            // keep the two operands apart
            let a = ps.value(ids[0]).clone();
            let gap = away_from_zero(rng, a.shape());
            let b = Tensor::new(a.shape().to_vec(), a.data().iter().zip(gap.data()).map(|(x, d)| x + 0.5 * d).collect())?;
            ps.set_value(ids[1], b)?;
        }
        let probe = {
            let mut g = Graph::new();
            let xs: Vec<Var> = ids.iter().map(|&id| g.param(&ps, id)).collect();
            let y = f(&mut g, &xs)?;
            g.value(y).len()
        };
        let weights = away_from_zero(rng, &[probe]);
        let report = grad_check(&mut ps, &opts(), |g, s| {
            let xs: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = f(g, &xs)?;
            reduce(g, y, &weights)
        })?;
        out.push(entry(name, report));
    }
    Ok(())
}

fn check_attention(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let names = ["msa_standard", "msa_pyramid_query", "msa_pyramid_key", "msa_shifted_query", "msa_shifted_key"];
    for (which, name) in names.iter().enumerate() {
        let mut ps = ParamStore::new();
        let p = MsaParams::new(&mut ps, rng, "attn", 4)?;
        let f = ps.add("frames", away_from_zero(rng, &[2, 5, 4]))?;
        let text = ps.add("text", away_from_zero(rng, &[1, 3, 4]))?;
        let cfg = HeadConfig::new(2, 4)?;
        let report = grad_check(&mut ps, &opts(), |g, s| {
            let (fv, tv) = (g.param(s, f), g.param(s, text));
            let tb = g.broadcast0(tv, 2)?;
            let prev = g.gather(fv, &[1, 0])?;
            let (q, k, var) = match which {
                0 => (fv, fv, AttentionVariant::Standard),
                1 => (fv, tv, AttentionVariant::PyramidQuery { grid: (2, 2) }),
                2 => (tb, fv, AttentionVariant::PyramidKey { grid: (2, 2) }),
                3 => (fv, tv, AttentionVariant::ShiftedQuery { prev, next: prev }),
                _ => (tb, fv, AttentionVariant::ShiftedKey { prev, next: prev }),
            };
            let o = msa_forward(g, s, &p, q, k, k, &cfg, var)?;
            let sq = g.mul(o.out, o.out)?;
            Ok(g.sum(sq))
        })?;
        out.push(entry(*name, report));
    }
    Ok(())
}

fn check_losses(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let mut ps = ParamStore::new();
    let params = RetrievalParams::new(&mut ps, rng, "retr", 4)?;
    let refined = ps.add("refined", away_from_zero(rng, &[1, 4]))?;
    let input = ps.add("input", away_from_zero(rng, &[1, 4]))?;
    let text = ps.add("text", away_from_zero(rng, &[1, 4]))?;
    // a large margin keeps the hinge active
    let report = grad_check(&mut ps, &opts(), |g, s| {
        let (r, i, t) = (g.param(s, refined), g.param(s, input), g.param(s, text));
        let a = crate::retrieval::similarity(g, s, &params, r, t)?;
        let b = crate::retrieval::similarity(g, s, &params, i, t)?;
        loss_fine(g, a, b, 3.0)
    })?;
    out.push(entry("loss_fine", report));

    let mut ps = ParamStore::new();
    let boxes = ps.add("boxes", Tensor::new([2, 3, 4], (0..24).map(|_| rng.random_range(0.2..0.6)).collect())?)?;
    let logits = ps.add("logits", away_from_zero(rng, &[2, 3, 1]))?;
    let gt = [BBox::new(0.4, 0.5, 0.3, 0.2)?, BBox::new(0.6, 0.4, 0.25, 0.35)?];
    let report = grad_check(&mut ps, &opts(), |g, s| {
        let heads = HeadOutput {
            boxes: g.param(s, boxes),
            conf_logits: g.param(s, logits),
        };
        Ok(detection_loss(g, &heads, &[1, 2], &gt)?.total)
    })?;
    out.push(entry("detection_loss", report));
    Ok(())
}

/// The smallest configuration the full model runs on: 2 frames, a 2x2 grid
/// and 3-token queries.
pub fn minimal_config() -> HeroConfig {
    let mut c = HeroConfig::default();
    c.world = WorldConfig {
        frames: 2,
        grid: (2, 2),
        feature_dim: 6,
        min_objects: 2,
        max_objects: 2,
        min_span: 1,
        max_span: 1,
        actions: vec![Action::MoveUp, Action::MoveDown],
        ..WorldConfig::default()
    };
    c.model.encoder = EncoderConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        queries_per_frame: 3,
        num_heads: 2,
        model_dim: 8,
        ffn_dim: 8,
        ..EncoderConfig::default()
    };
    c.model.proposal_scales = vec![1];
    c
}

fn check_end_to_end(seed: u64, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let c = minimal_config();
    let eps = generate_set::<f64>(&c.world, 2, seed)?;
    let mut model = HeroModel::<f64>::new(&c.model, InputShape::from(&c.world), seed)?;
    let net = &model.net;
    let report = grad_check(&mut model.store, &opts(), |g, ps| Ok(net.loss(g, ps, &eps[0], &eps[1], &c.train)?.total))?;
    out.push(entry("end_to_end_loss", report));
    Ok(())
}

/// Runs every check; the caller decides the tolerance.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    check_ops(&mut rng, &mut out)?;
    check_attention(&mut rng, &mut out)?;
    check_losses(&mut rng, &mut out)?;
    check_end_to_end(seed, &mut out)?;
    Ok(out)
}

/// Largest deviations of the pyramid and shifted score kernels from
/// brute-force recomputation over random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelOracleReport {
    pub instances: usize,
    pub pyramid_max_err: f64,
    pub shifted_max_err: f64,
    /// Constant frames give exactly twice (pyramid) and three times
    /// (shifted) the standard scores in every instance.
    pub reductions_exact: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over the valid 3x3 neighborhood of each cell by explicit enumeration.
fn neighbor_means(f: &Tensor<f64>, h: usize, w: usize) -> Vec<Vec<f64>> {
    let d = f.last_dim();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = vec![0.0; d];
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    acc.iter_mut().zip(f.row(yy * w + xx)).for_each(|(a, b)| *a += b);
                    n += 1.0;
                }
            }
            out.push(acc.into_iter().map(|a| a / n).collect());
        }
    }
    out
}

fn standard_for(g: &mut Graph<f64>, side: Side, tokens: Var, frame: Var) -> Result<Var> {
    match side {
        Side::Key => compute_scores_standard(g, tokens, frame),
        Side::Query => compute_scores_standard(g, frame, tokens),
    }
}

/// Compares the pyramid and shifted kernels against enumeration on
/// `instances` random grids, token counts and widths.
pub fn kernel_oracle_suite(instances: usize, seed: u64) -> Result<KernelOracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = KernelOracleReport {
        instances,
        pyramid_max_err: 0.0,
        shifted_max_err: 0.0,
        reductions_exact: true,
    };
    for _ in 0..instances {
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (d, m) = (rng.random_range(1..=6), rng.random_range(1..=4));
        let j = h * w;
        let frames: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&mut rng, &[j, d])).collect();
        let other = uniform(&mut rng, &[m, d]);
        let avg = neighbor_means(&frames[1], h, w);
        let constant = Tensor::new([j, d], uniform(&mut rng, &[1, d]).data().repeat(j))?;
        let mut g = Graph::<f64>::new();
        let fv: Vec<Var> = frames.iter().map(|t| g.constant(t.clone())).collect();
        let (ov, cv) = (g.constant(other.clone()), g.constant(constant));
        for side in [Side::Key, Side::Query] {
            let pyr = compute_scores_pyramid(&mut g, ov, fv[1], (h, w), side)?;
            let shi = compute_scores_shifted(&mut g, ov, fv[1], fv[0], fv[2], side)?;
            for i in 0..m {
                for p in 0..j {
                    let at = |t: &Tensor<f64>| match side {
                        Side::Key => t.at2(i, p),
                        Side::Query => t.at2(p, i),
                    };
                    let want = dot(other.row(i), frames[1].row(p)) + dot(other.row(i), &avg[p]);
                    report.pyramid_max_err = report.pyramid_max_err.max((at(g.value(pyr)) - want).abs());
                    let want: f64 = frames.iter().map(|f| dot(other.row(i), f.row(p))).sum();
                    report.shifted_max_err = report.shifted_max_err.max((at(g.value(shi)) - want).abs());
                }
            }
            let pyr = compute_scores_pyramid(&mut g, ov, cv, (h, w), side)?;
            let shi = compute_scores_shifted(&mut g, ov, fv[1], fv[1], fv[1], side)?;
            let std_c = standard_for(&mut g, side, ov, cv)?;
            let std_f = standard_for(&mut g, side, ov, fv[1])?;
            report.reductions_exact &= g.value(pyr) == &g.value(std_c).map(|x| 2.0 * x);
            report.reductions_exact &= g.value(shi) == &g.value(std_f).map(|x| 3.0 * x);
        }
    }
    Ok(report)
}

/// Violations of the structural guarantees over random configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralReport {
    pub configurations: usize,
    /// Independent-frame inputs with nonzero gradient from a consistent output.
    pub flow_violations: usize,
    /// Out-of-span frames with nonzero gradient from a proposal feature.
    pub proposal_violations: usize,
    pub empty_selections: usize,
    /// Largest `|sum(v_sum) - heads|`.
    pub max_mass_error: f64,
}

fn check_flow(rng: &mut ChaCha8Rng, report: &mut StructuralReport) -> Result<()> {
    let d = 4;
    let frames = rng.random_range(2..7);
    let cfg = EncoderConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        queries_per_frame: 2,
        num_heads: 2,
        model_dim: d,
        ffn_dim: d,
        ..EncoderConfig::default()
    };
    let mut ps = ParamStore::<f64>::new();
    let params = EncoderParams::new(&mut ps, rng, &cfg, d, frames, (2, 2))?;
    let Fusion::Hierarchical { action_temporal, .. } = &params.layers[0].fusion else {
        return Err(crate::tensor::TensorError::invalid("structural_suite", "expected hierarchical fusion"));
    };
    let mut consistent: Vec<usize> = (0..frames).filter(|_| rng.random_bool(0.5)).collect();
    if consistent.is_empty() {
        consistent.push(rng.random_range(0..frames));
    }
    let clip = Proposal {
        start: consistent[0],
        end: *consistent.last().expect("nonempty"),
        is_global: false,
    };
    let sel: Vec<usize> = consistent.iter().map(|c| c - clip.start).collect();
    let part = FramePartition::from_selection(clip, &sel, frames)?;
    let ft = ps.add("frame_tokens", normal_tensor(rng, &[frames, d], 1.0))?;
    let text = normal_tensor(rng, &[3, d], 1.0);
    for &c in &part.consistent {
        ps.zero_grad();
        let mut g = Graph::new();
        let f = g.param(&ps, ft);
        let t = g.constant(text.clone());
        let o = action_temporal_layer(&mut g, &ps, action_temporal, f, &part, t, &[1, 2], &cfg)?;
        let row = g.narrow(o, 0, c, 1)?;
        let l = g.sum(row);
        g.backward(l, &mut ps)?;
        report.flow_violations += part
            .independent
            .iter()
            .filter(|&&i| ps.grad(ft).row(i).iter().any(|&x| x != 0.0))
            .count();
    }
    Ok(())
}

fn check_proposals(rng: &mut ChaCha8Rng, report: &mut StructuralReport) -> Result<()> {
    let d = 4;
    let frames = rng.random_range(2..9);
    let mut ps = ParamStore::<f64>::new();
    let params = RetrievalParams::new(&mut ps, rng, "retr", d)?;
    let cfg = HeadConfig::new(2, d)?;
    let f = ps.add("frames", normal_tensor(rng, &[frames, d], 1.0))?;
    let props = generate_proposals(frames, &[frames, 3, 2])?;
    for (i, pr) in props.iter().enumerate() {
        ps.zero_grad();
        let mut g = Graph::new();
        let fv = g.param(&ps, f);
        let feats = coarse_encode(&mut g, &ps, &params, &props, fv, &cfg)?;
        let l = g.sum(feats[i]);
        g.backward(l, &mut ps)?;
        report.proposal_violations += (0..frames)
            .filter(|&j| !pr.contains(j) && ps.grad(f).row(j).iter().any(|&x| x != 0.0))
            .count();
    }
    Ok(())
}

fn check_selection(rng: &mut ChaCha8Rng, report: &mut StructuralReport) -> Result<()> {
    let heads = rng.random_range(1..6);
    let t = rng.random_range(1..9);
    let scale = rng.random_range(1e-3..20.0);
    let delta = rng.random_range(0.01..3.0);
    let scores: Tensor<f64> = normal_tensor(rng, &[heads, t], scale);
    let s = select_frames(&scores, delta)?;
    if s.selected.is_empty() {
        report.empty_selections += 1;
    }
    let err = (s.importance.iter().sum::<f64>() - heads as f64).abs();
    report.max_mass_error = report.max_mass_error.max(err);
    Ok(())
}

/// Checks single-flow isolation, proposal isolation and frame selection on
/// `configurations` random configurations each.
pub fn structural_suite(configurations: usize, seed: u64) -> Result<StructuralReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = StructuralReport {
        configurations,
        flow_violations: 0,
        proposal_violations: 0,
        empty_selections: 0,
        max_mass_error: 0.0,
    };
    for _ in 0..configurations {
        check_flow(&mut rng, &mut report)?;
        check_proposals(&mut rng, &mut report)?;
        check_selection(&mut rng, &mut report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_fresh_init() {
        let entries = gradient_suite(0).unwrap();
        assert_eq!(entries.len(), op_cases().len() + 5 + 2 + 1);
        for e in &entries {
            assert!(e.report.max_rel_error < 1e-4, "{}: {:?}", e.name, e.report);
            assert!(e.report.coords_checked > 0);
        }
    }

    #[test]
    fn kernel_oracles_agree() {
        let r = kernel_oracle_suite(50, 3).unwrap();
        assert!(r.pyramid_max_err < 1e-12 && r.shifted_max_err < 1e-12, "{r:?}");
        assert!(r.reductions_exact);
    }

    #[test]
    fn neighbor_means_by_hand() {
        let f = Tensor::new([4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(neighbor_means(&f, 2, 2), vec![vec![2.5]; 4]);
        let f = Tensor::new([3, 1], vec![1.0, 2.0, 6.0]).unwrap();
        assert_eq!(neighbor_means(&f, 1, 3), vec![vec![1.5], vec![3.0], vec![4.0]]);
    }

    #[test]
    fn structural_guarantees_hold() {
        let r = structural_suite(20, 5).unwrap();
        assert_eq!((r.flow_violations, r.proposal_violations, r.empty_selections), (0, 0, 0));
        assert!(r.max_mass_error < 1e-9);
    }
}
