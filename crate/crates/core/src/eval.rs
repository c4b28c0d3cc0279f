//! Box overlap metrics and the thresholded accuracy report.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};

/// Accuracy thresholds reported for every evaluation.
pub const THRESHOLDS: [f64; 3] = [0.4, 0.5, 0.6];

/// Normalized center-size box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form clipped to the unit square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    /// Whether any corner had to be moved into `[0, 1]`.
    pub clamped: bool,
}

impl Corners {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        let ok = [cx, cy, w, h].iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && w > 0.0 && h > 0.0;
        if !ok {
            return Err(TensorError::invalid("BBox::new", format!("{b:?} is not a normalized box")));
        }
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn corners(&self) -> Corners {
        let raw = [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ];
        let c = raw.map(|v| v.clamp(0.0, 1.0));
        Corners {
            x0: c[0],
            y0: c[1],
            x1: c[2],
            y1: c[3],
            clamped: c != raw,
        }
    }
}

fn inter_union_hull(a: &BBox, b: &BBox) -> (f64, f64, f64) {
    let (ca, cb) = (a.corners(), b.corners());
    let iw = (ca.x1.min(cb.x1) - ca.x0.max(cb.x0)).max(0.0);
    let ih = (ca.y1.min(cb.y1) - ca.y0.max(cb.y0)).max(0.0);
    let inter = iw * ih;
    let union = ca.area() + cb.area() - inter;
    let hull = (ca.x1.max(cb.x1) - ca.x0.min(cb.x0)) * (ca.y1.max(cb.y1) - ca.y0.min(cb.y0));
    (inter, union, hull)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union, _) = inter_union_hull(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union, hull) = inter_union_hull(a, b);
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

/// A video counts as accurate when its mean per-frame IoU strictly exceeds `alpha`.
pub fn accuracy_at(frame_ious: &[f64], alpha: f64) -> bool {
    !frame_ious.is_empty() && frame_ious.iter().sum::<f64>() / frame_ious.len() as f64 > alpha
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub frame_ious: Vec<f64>,
    pub mean_iou: f64,
    pub boxes: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: [f64; 3],
    pub accuracy: [f64; 3],
    pub avg: f64,
    pub episodes: usize,
    pub mean_iou: f64,
    pub config_hash: String,
    pub records: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<EpisodeRecord>, config_hash: impl Into<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(TensorError::invalid("EvalReport", "no episodes to evaluate"));
        }
        let n = records.len() as f64;
        let accuracy = THRESHOLDS.map(|a| records.iter().filter(|r| accuracy_at(&r.frame_ious, a)).count() as f64 / n);
        Ok(Self {
            thresholds: THRESHOLDS,
            accuracy,
            avg: accuracy.iter().sum::<f64>() / 3.0,
            episodes: records.len(),
            mean_iou: records.iter().map(|r| r.mean_iou).sum::<f64>() / n,
            config_hash: config_hash.into(),
            records,
        })
    }

    pub fn accuracy_at(&self, alpha: f64) -> Option<f64> {
        THRESHOLDS.iter().position(|&t| t == alpha).map(|i| self.accuracy[i])
    }
}

/// One row of a fixed-width accuracy table, in percent.
pub fn table_row(label: &str, report: &EvalReport) -> String {
    format!(
        "{label:<24} {:>6.1} {:>6.1} {:>6.1} {:>6.1}",
        100.0 * report.accuracy[0],
        100.0 * report.accuracy[1],
        100.0 * report.accuracy[2],
        100.0 * report.avg
    )
}

pub fn table_header() -> String {
    format!("{:<24} {:>6} {:>6} {:>6} {:>6}", "", "0.4", "0.5", "0.6", "Avg")
}
