//! Detection evaluation: greedy matching at the 50% overlap criterion,
//! precision-recall curves, all-points-interpolated average precision, and
//! recall against false positives per image.

use std::collections::BTreeMap;

use crate::geometry::Rect;

/// A scored detection attributed to an image.
#[derive(Debug, Clone)]
pub struct ScoredBox {
    pub image: String,
    pub bbox: Rect,
    pub score: f64,
}

/// One point of the precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// One point of the recall-FPPI curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FppiPoint {
    pub fppi: f64,
    pub recall: f64,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub pr: Vec<PrPoint>,
    pub recall_fppi: Vec<FppiPoint>,
    pub ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub num_ground_truth: usize,
    pub num_images: usize,
}

impl EvalResult {
    /// Highest recall reached at or below the given FPPI.
    pub fn recall_at_fppi(&self, fppi: f64) -> f64 {
        self.recall_fppi
            .iter()
            .filter(|p| p.fppi <= fppi)
            .map(|p| p.recall)
            .fold(0.0, f64::max)
    }
}

/// Evaluates detections against per-image ground-truth boxes.
///
/// Detections are processed in descending score order; each matches the
/// highest-IoU unmatched ground-truth box of its image and counts as a true
/// positive only when that IoU is strictly greater than `iou_thresh`.
/// `num_images` is the size of the evaluated image set (FPPI denominator),
/// which may exceed the number of images with detections or ground truth.
pub fn evaluate(
    detections: &[ScoredBox],
    ground_truth: &BTreeMap<String, Vec<Rect>>,
    num_images: usize,
    iou_thresh: f64,
) -> EvalResult {
    let num_gt: usize = ground_truth.values().map(|v| v.len()).sum();
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .total_cmp(&da.score)
            .then_with(|| da.image.cmp(&db.image))
            .then(da.bbox.x.total_cmp(&db.bbox.x))
            .then(da.bbox.y.total_cmp(&db.bbox.y))
    });

    let mut matched: BTreeMap<&str, Vec<bool>> = ground_truth
        .iter()
        .map(|(k, v)| (k.as_str(), vec![false; v.len()]))
        .collect();

    let mut pr = Vec::with_capacity(order.len());
    let mut recall_fppi = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &k in &order {
        let det = &detections[k];
        let hit = match (ground_truth.get(&det.image), matched.get_mut(det.image.as_str())) {
            (Some(boxes), Some(flags)) => {
                let mut best_iou = 0.0;
                let mut best = None;
                for (g, b) in boxes.iter().enumerate() {
                    if flags[g] {
                        continue;
                    }
                    let iou = det.bbox.iou(b);
                    if iou > best_iou {
                        best_iou = iou;
                        best = Some(g);
                    }
                }
                match best {
                    Some(g) if best_iou > iou_thresh => {
                        flags[g] = true;
                        true
                    }
                    _ => false,
                }
            }
            _ => false,
        };
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 };
        pr.push(PrPoint {
            recall,
            precision: tp as f64 / (tp + fp) as f64,
        });
        recall_fppi.push(FppiPoint {
            fppi: if num_images > 0 {
                fp as f64 / num_images as f64
            } else {
                0.0
            },
            recall,
        });
    }

    EvalResult {
        ap: average_precision(&pr),
        pr,
        recall_fppi,
        true_positives: tp,
        false_positives: fp,
        num_ground_truth: num_gt,
        num_images,
    }
}

/// All-points interpolated average precision: the integral of the precision
/// envelope over recall.
pub fn average_precision(pr: &[PrPoint]) -> f64 {
    if pr.is_empty() {
        return 0.0;
    }
    // Envelope from the right: precision at recall r is the max precision at
    // any recall >= r.
    let mut env: Vec<PrPoint> = Vec::with_capacity(pr.len());
    let mut max_p = 0.0f64;
    for p in pr.iter().rev() {
        max_p = max_p.max(p.precision);
        env.push(PrPoint {
            recall: p.recall,
            precision: max_p,
        });
    }
    env.reverse();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for p in &env {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * p.precision;
            prev_recall = p.recall;
        }
    }
    ap
}
