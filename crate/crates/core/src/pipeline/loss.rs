//! Per-frame matching and the differentiable detection loss.

use crate::autodiff::{Graph, Var};
use crate::config::MatchCosts;
use crate::encoder::{FramePredictions, HeadOutput};
use crate::eval::{giou, BBox};
use crate::scalar::Real;
use crate::tensor::{Result, Tensor, TensorError};

pub(crate) fn raw_box(b: &[f64; 4]) -> BBox {
    BBox {
        cx: b[0],
        cy: b[1],
        w: b[2],
        h: b[3],
    }
}

pub fn l1_distance(a: &[f64; 4], b: &BBox) -> f64 {
    a.iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// Cost of explaining `gt` with a predicted box of the given confidence.
pub fn match_cost(pred: &[f64; 4], confidence: f64, gt: &BBox, w: &MatchCosts) -> f64 {
    w.l1 * l1_distance(pred, gt) + w.giou * (1.0 - giou(&raw_box(pred), gt))
        - w.conf * confidence.max(f64::MIN_POSITIVE).ln()
}

/// Lowest-cost query per frame; ties go to the lowest index.
pub fn match_predictions(preds: &FramePredictions, gt: &[BBox], w: &MatchCosts) -> Result<Vec<usize>> {
    if preds.boxes.len() != gt.len() {
        return Err(TensorError::invalid(
            "match_predictions",
            format!("{} predicted frames for {} ground-truth boxes", preds.boxes.len(), gt.len()),
        ));
    }
    Ok(preds
        .boxes
        .iter()
        .zip(&preds.confidences)
        .zip(gt)
        .map(|((boxes, confs), t)| {
            let mut best = (0, f64::INFINITY);
            for (q, (b, &c)) in boxes.iter().zip(confs).enumerate() {
                let cost = match_cost(b, c, t, w);
                if cost < best.1 {
                    best = (q, cost);
                }
            }
            best.0
        })
        .collect())
}

/// Detection loss terms, each already averaged over frames.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub l1: Var,
    pub giou: Var,
    pub conf: Var,
}

fn unit_clamp<R: Real>(g: &mut Graph<R>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let lo = g.constant(Tensor::zeros(shape.clone()));
    let hi = g.constant(Tensor::full(shape, R::one()));
    let x = g.maximum(x, lo)?;
    g.minimum(x, hi)
}

/// Clamped corners `(x0, y0, x1, y1)` of `[n, 4]` center-size boxes, each `[n, 1]`.
fn corners<R: Real>(g: &mut Graph<R>, b: Var) -> Result<[Var; 4]> {
    let cx = g.narrow(b, 1, 0, 1)?;
    let cy = g.narrow(b, 1, 1, 1)?;
    let w = g.narrow(b, 1, 2, 1)?;
    let h = g.narrow(b, 1, 3, 1)?;
    let hw = g.scale(w, R::lit(0.5));
    let hh = g.scale(h, R::lit(0.5));
    let raw = [g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?];
    let mut out = raw;
    for c in out.iter_mut() {
        *c = unit_clamp(g, *c)?;
    }
    Ok(out)
}

/// Row-wise generalized IoU of two `[n, 4]` box sets, as `[n, 1]`.
pub fn giou_graph<R: Real>(g: &mut Graph<R>, a: Var, b: Var) -> Result<Var> {
    let [ax0, ay0, ax1, ay1] = corners(g, a)?;
    let [bx0, by0, bx1, by1] = corners(g, b)?;
    let extent = |g: &mut Graph<R>, lo: Var, hi: Var| g.sub(hi, lo);
    let ix0 = g.maximum(ax0, bx0)?;
    let ix1 = g.minimum(ax1, bx1)?;
    let iy0 = g.maximum(ay0, by0)?;
    let iy1 = g.minimum(ay1, by1)?;
    let iw = extent(g, ix0, ix1)?;
    let iw = g.relu(iw);
    let ih = extent(g, iy0, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let (aw, ah) = (extent(g, ax0, ax1)?, extent(g, ay0, ay1)?);
    let (bw, bh) = (extent(g, bx0, bx1)?, extent(g, by0, by1)?);
    let area_a = g.mul(aw, ah)?;
    let area_b = g.mul(bw, bh)?;
    let sum = g.add(area_a, area_b)?;
    let union = g.sub(sum, inter)?;
    let hx0 = g.minimum(ax0, bx0)?;
    let hx1 = g.maximum(ax1, bx1)?;
    let hy0 = g.minimum(ay0, by0)?;
    let hy1 = g.maximum(ay1, by1)?;
    let hw = extent(g, hx0, hx1)?;
    let hh = extent(g, hy0, hy1)?;
    let hull = g.mul(hw, hh)?;
    let iou = g.div(inter, union)?;
    // iou - (hull - union) / hull == iou - 1 + union / hull
    let ratio = g.div(union, hull)?;
    let s = g.add(iou, ratio)?;
    Ok(g.add_scalar(s, -R::one()))
}

/// Matched queries pay L1 + (1 - gIoU) + confidence loss toward 1; the
/// other queries of the frame pay the mean confidence loss toward 0.
/// Everything is averaged over frames.
pub fn detection_loss<R: Real>(g: &mut Graph<R>, heads: &HeadOutput, matches: &[usize], gt: &[BBox]) -> Result<DetectionLoss> {
    let s = g.shape(heads.boxes).to_vec();
    let (frames, q) = (s[0], s[1]);
    if matches.len() != frames || gt.len() != frames || matches.iter().any(|&m| m >= q) {
        return Err(TensorError::invalid(
            "detection_loss",
            format!("{frames} frames of {q} queries, {} matches, {} boxes", matches.len(), gt.len()),
        ));
    }
    let inv_frames = R::lit(1.0 / frames as f64);
    let flat = g.reshape(heads.boxes, [frames * q, 4])?;
    let rows: Vec<usize> = matches.iter().enumerate().map(|(f, &m)| f * q + m).collect();
    let matched = g.gather(flat, &rows)?;
    let target: Vec<Vec<R>> = gt.iter().map(|b| b.to_array().map(R::lit).to_vec()).collect();
    let target = g.constant(Tensor::from_rows(&target)?);

    let diff = g.sub(matched, target)?;
    let diff = g.abs(diff);
    let l1 = g.sum(diff);
    let l1 = g.scale(l1, inv_frames);

    let gi = giou_graph(g, matched, target)?;
    let gi = g.sum(gi);
    let gi = g.affine(gi, -inv_frames, R::one());

    let z = g.reshape(heads.conf_logits, [frames * q])?;
    let mut labels = vec![R::zero(); frames * q];
    let unmatched_weight = if q > 1 { 1.0 / (q - 1) as f64 } else { 0.0 };
    let mut weights = vec![R::lit(unmatched_weight); frames * q];
    for &r in &rows {
        labels[r] = R::one();
        weights[r] = R::one();
    }
    let labels = g.constant(Tensor::vector(labels));
    let weights = g.constant(Tensor::vector(weights));
    // binary cross-entropy on logits: softplus(z) - y z
    let sp = g.softplus(z);
    let yz = g.mul(labels, z)?;
    let bce = g.sub(sp, yz)?;
    let bce = g.mul(bce, weights)?;
    let conf = g.sum(bce);
    let conf = g.scale(conf, inv_frames);

    let total = g.add(l1, gi)?;
    let total = g.add(total, conf)?;
    Ok(DetectionLoss {
        total,
        l1,
        giou: gi,
        conf,
    })
}

/// Weighted sum of the detection and retrieval objectives.
pub fn total_loss<R: Real>(g: &mut Graph<R>, det: Var, retr: Var, det_weight: f64, retr_weight: f64) -> Result<Var> {
    let a = g.scale(det, R::lit(det_weight));
    let b = g.scale(retr, R::lit(retr_weight));
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::iou;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn preds(boxes: Vec<Vec<[f64; 4]>>, confidences: Vec<Vec<f64>>) -> FramePredictions {
        FramePredictions {
            chosen: vec![0; boxes.len()],
            boxes,
            confidences,
        }
    }

    fn random_box(rng: &mut impl Rng) -> [f64; 4] {
        [
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.05..0.5),
            rng.random_range(0.05..0.5),
        ]
    }

    #[test]
    fn matching_examples() {
        let gt = [BBox::new(0.5, 0.5, 0.2, 0.2).unwrap()];
        let w = MatchCosts::default();
        assert_eq!(match_predictions(&preds(vec![vec![[0.1, 0.1, 0.1, 0.1]]], vec![vec![0.01]]), &gt, &w).unwrap(), vec![0]);
        let p = preds(
            vec![vec![[0.1, 0.1, 0.05, 0.05], [0.5, 0.5, 0.2, 0.2], [0.9, 0.9, 0.05, 0.05]]],
            vec![vec![0.5, 0.9, 0.5]],
        );
        assert_eq!(match_predictions(&p, &gt, &w).unwrap(), vec![1]);
        // identical candidates tie toward the lower index
        let p = preds(vec![vec![[0.5, 0.5, 0.2, 0.2]; 3]], vec![vec![0.7; 3]]);
        assert_eq!(match_predictions(&p, &gt, &w).unwrap(), vec![0]);
        assert!(match_predictions(&p, &[gt[0], gt[0]], &w).is_err());
    }

    #[test]
    fn matching_equals_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = MatchCosts::default();
        for _ in 0..200 {
            let frames = rng.random_range(1..4);
            let boxes: Vec<Vec<[f64; 4]>> = (0..frames).map(|_| (0..4).map(|_| random_box(&mut rng)).collect()).collect();
            let confs: Vec<Vec<f64>> = (0..frames).map(|_| (0..4).map(|_| rng.random_range(0.01..0.99)).collect()).collect();
            let gt: Vec<BBox> = (0..frames).map(|_| BBox::from_array(random_box(&mut rng)).unwrap()).collect();
            let got = match_predictions(&preds(boxes.clone(), confs.clone()), &gt, &w).unwrap();
            for f in 0..frames {
                let costs: Vec<f64> = (0..4)
                    .map(|q| {
                        let p = BBox::from_array(boxes[f][q]).unwrap();
                        let l1: f64 = boxes[f][q].iter().zip(gt[f].to_array()).map(|(a, b)| (a - b).abs()).sum();
                        5.0 * l1 + 2.0 * (1.0 - giou(&p, &gt[f])) - confs[f][q].ln()
                    })
                    .collect();
                let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
                assert_eq!(got[f], costs.iter().position(|&c| c == min).unwrap());
            }
        }
    }

    fn head_vars(g: &mut Graph<f64>, boxes: &[Vec<[f64; 4]>], logits: &[Vec<f64>]) -> HeadOutput {
        let (i, q) = (boxes.len(), boxes[0].len());
        let b: Vec<f64> = boxes.iter().flatten().flatten().copied().collect();
        let l: Vec<f64> = logits.iter().flatten().copied().collect();
        HeadOutput {
            boxes: g.variable(Tensor::new([i, q, 4], b).unwrap()),
            conf_logits: g.variable(Tensor::new([i, q, 1], l).unwrap()),
        }
    }

    fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    fn reference(boxes: &[Vec<[f64; 4]>], logits: &[Vec<f64>], matches: &[usize], gt: &[BBox]) -> f64 {
        let n = boxes.len() as f64;
        let q = boxes[0].len();
        let mut total = 0.0;
        for f in 0..boxes.len() {
            let m = matches[f];
            total += l1_distance(&boxes[f][m], &gt[f]) + 1.0 - giou(&raw_box(&boxes[f][m]), &gt[f]);
            total += softplus(-logits[f][m]);
            for k in (0..q).filter(|&k| k != m) {
                total += softplus(logits[f][k]) / (q - 1) as f64;
            }
        }
        total / n
    }

    #[test]
    fn detection_loss_matches_componentwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let frames = rng.random_range(1..5);
            let boxes: Vec<Vec<[f64; 4]>> = (0..frames).map(|_| (0..3).map(|_| random_box(&mut rng)).collect()).collect();
            let logits: Vec<Vec<f64>> = (0..frames).map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let gt: Vec<BBox> = (0..frames).map(|_| BBox::from_array(random_box(&mut rng)).unwrap()).collect();
            let matches: Vec<usize> = (0..frames).map(|_| rng.random_range(0..3)).collect();
            let mut g = Graph::new();
            let h = head_vars(&mut g, &boxes, &logits);
            let d = detection_loss(&mut g, &h, &matches, &gt).unwrap();
            let want = reference(&boxes, &logits, &matches, &gt);
            assert!((g.value(d.total).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_fit_limit() {
        let gt = [BBox::new(0.3, 0.6, 0.25, 0.25).unwrap()];
        let mut g = Graph::new();
        let h = head_vars(&mut g, &[vec![gt[0].to_array(), [0.9, 0.1, 0.1, 0.1]]], &[vec![40.0, -40.0]]);
        let d = detection_loss(&mut g, &h, &[0], &gt).unwrap();
        assert!(g.value(d.giou).item().abs() < 1e-15);
        assert!(g.value(d.total).item() < 1e-15);
    }

    #[test]
    fn giou_graph_agrees_with_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<[f64; 4]> = (0..20).map(|_| random_box(&mut rng)).collect();
        let b: Vec<[f64; 4]> = (0..20).map(|_| random_box(&mut rng)).collect();
        let mut g = Graph::new();
        let va = g.constant(Tensor::from_rows(&a).unwrap());
        let vb = g.constant(Tensor::from_rows(&b).unwrap());
        let out = giou_graph(&mut g, va, vb).unwrap();
        for k in 0..20 {
            let want = giou(&raw_box(&a[k]), &raw_box(&b[k]));
            assert!((g.value(out).data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let d = g.constant(Tensor::scalar(2.0));
        let r = g.constant(Tensor::scalar(0.5));
        let t = total_loss(&mut g, d, r, 1.0, 1.0).unwrap();
        assert_eq!(g.value(t).item(), 2.5);
        let t = total_loss(&mut g, d, r, 0.3, 0.0).unwrap();
        assert_eq!(g.value(t).item(), 0.3 * 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (a, b, wa, wb) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            let da = g.constant(Tensor::scalar(a));
            let db = g.constant(Tensor::scalar(b));
            let t = total_loss(&mut g, da, db, wa, wb).unwrap();
            assert!((g.value(t).item() - (wa * a + wb * b)).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_monotone_in_giou(
            cx in 0.2f64..0.8, cy in 0.2f64..0.8, shift in 0.0f64..0.1, logit in -4.0f64..4.0,
        ) {
            let gt = [BBox::new(0.5, 0.5, 0.25, 0.25).unwrap()];
            let eval = |dx: f64| {
                let mut g = Graph::new();
                let h = head_vars(&mut g, &[vec![[cx + dx, cy, 0.25, 0.25]]], &[vec![logit]]);
                let d = detection_loss(&mut g, &h, &[0], &gt).unwrap();
                (g.value(d.total).item(), g.value(d.giou).item(), g.value(d.l1).item())
            };
            let (loss, _, _) = eval(0.0);
            prop_assert!(loss >= 0.0);
            // holding L1 and confidence fixed, a better gIoU lowers the loss
            let mut g = Graph::new();
            let target = [0.5, 0.5, 0.25, 0.25];
            let worse = [0.5 + shift + 0.01, 0.5, 0.25, 0.25];
            let h1 = head_vars(&mut g, &[vec![target]], &[vec![logit]]);
            let h2 = head_vars(&mut g, &[vec![worse]], &[vec![logit]]);
            let d1 = detection_loss(&mut g, &h1, &[0], &gt).unwrap();
            let d2 = detection_loss(&mut g, &h2, &[0], &gt).unwrap();
            let g1 = 1.0 - g.value(d1.giou).item();
            let g2 = 1.0 - g.value(d2.giou).item();
            prop_assert!(g1 > g2);
            let rest1 = g.value(d1.total).item() - g.value(d1.giou).item() - g.value(d1.l1).item();
            let rest2 = g.value(d2.total).item() - g.value(d2.giou).item() - g.value(d2.l1).item();
            prop_assert!((rest1 - rest2).abs() < 1e-12);
            prop_assert!(iou(&BBox::from_array(target).unwrap(), &gt[0]) == 1.0);
        }
    }
}
