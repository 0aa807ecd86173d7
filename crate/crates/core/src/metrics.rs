//! Instance segmentation metrics: detection F1 and panoptic quality with
//! one-to-one matching at IoU > 0.5.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Default (and minimum) IoU threshold for a match.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Per-pixel instance labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl InstanceMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} instance map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    fn areas(&self) -> HashMap<u32, usize> {
        let mut areas = HashMap::new();
        for &l in self.labels.iter().filter(|l| **l != 0) {
            *areas.entry(l).or_insert(0) += 1;
        }
        areas
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub gt_id: u32,
    pub pred_id: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub matched_iou_sum: f64,
    /// Sorted by ground-truth id.
    pub pairs: Vec<MatchedPair>,
}

impl MatchReport {
    /// Adds counts from another report; `pairs` are not carried over.
    pub fn accumulate(&mut self, other: &MatchReport) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.matched_iou_sum += other.matched_iou_sum;
    }
}

/// Matches ground-truth and predicted instances whose IoU strictly exceeds
/// `iou_threshold`. With a threshold of at least 0.5 each instance can take
/// part in at most one such pair.
pub fn match_instances(
    gt: &InstanceMap,
    pred: &InstanceMap,
    iou_threshold: f64,
) -> Result<MatchReport> {
    if gt.dims() != pred.dims() {
        return Err(Error::ShapeMismatch {
            expected: gt.dims(),
            found: pred.dims(),
        });
    }
    if !(IOU_THRESHOLD..=1.0).contains(&iou_threshold) {
        return Err(Error::InvalidParameter(format!(
            "IoU threshold must be in [0.5, 1], got {iou_threshold}"
        )));
    }

    let gt_area = gt.areas();
    let pred_area = pred.areas();
    let mut overlap: HashMap<(u32, u32), usize> = HashMap::new();
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        if g != 0 && p != 0 {
            *overlap.entry((g, p)).or_insert(0) += 1;
        }
    }

    let mut pairs: Vec<MatchedPair> = overlap
        .into_iter()
        .filter_map(|((g, p), inter)| {
            let union = gt_area[&g] + pred_area[&p] - inter;
            let iou = inter as f64 / union as f64;
            (iou > iou_threshold).then_some(MatchedPair {
                gt_id: g,
                pred_id: p,
                iou,
            })
        })
        .collect();
    pairs.sort_by_key(|m| (m.gt_id, m.pred_id));

    let tp = pairs.len();
    Ok(MatchReport {
        tp,
        fp: pred_area.len() - tp,
        fn_: gt_area.len() - tp,
        matched_iou_sum: pairs.iter().map(|m| m.iou).sum(),
        pairs,
    })
}

/// `2 tp / (2 tp + fp + fn)`; 1 when both maps are empty.
pub fn f1_50(report: &MatchReport) -> f64 {
    let denom = 2 * report.tp + report.fp + report.fn_;
    if denom == 0 {
        return 1.0;
    }
    (2 * report.tp) as f64 / denom as f64
}

/// `sum(IoU) / (tp + fp/2 + fn/2)`; 1 when both maps are empty.
pub fn pq_50(report: &MatchReport) -> f64 {
    let denom = report.tp as f64 + 0.5 * report.fp as f64 + 0.5 * report.fn_ as f64;
    if denom == 0.0 {
        return 1.0;
    }
    report.matched_iou_sum / denom
}

/// How per-image results are combined over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Sum counts and IoUs over all images, then apply the formulas.
    #[default]
    Dataset,
    /// Average the per-image metric values.
    PerImage,
}

/// Corpus-level `(F1, PQ)`.
pub fn aggregate(reports: &[MatchReport], mode: Aggregation) -> Option<(f64, f64)> {
    if reports.is_empty() {
        return None;
    }
    Some(match mode {
        Aggregation::Dataset => {
            let mut total = MatchReport::default();
            for r in reports {
                total.accumulate(r);
            }
            (f1_50(&total), pq_50(&total))
        }
        Aggregation::PerImage => {
            let n = reports.len() as f64;
            (
                reports.iter().map(f1_50).sum::<f64>() / n,
                reports.iter().map(pq_50).sum::<f64>() / n,
            )
        }
    })
}
