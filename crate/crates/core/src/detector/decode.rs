//! Head decoding and per-class greedy non-maximum suppression.

use crate::data::BoxCxcywh;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::metrics::iou;
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;

/// Decode one raw head map into detections.
///
/// Per cell: objectness and class logits pass through a sigmoid; confidence
/// is objectness × best class score (argmax ties take the lowest class id).
/// Cells at or above `conf_threshold` decode to normalized boxes. Greedy NMS
/// then runs per class in descending confidence (ties broken by cell index),
/// suppressing boxes with IoU strictly above `iou_threshold` against a kept
/// box.
pub fn decode_and_nms(
    head: &Tensor,
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&conf_threshold) || !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::invalid(
            "decode_and_nms",
            "thresholds must lie in [0,1]",
        ));
    }
    if head.rank() != 3 || head.shape()[0] < 6 || head.shape()[1] != head.shape()[2] {
        return Err(Error::invalid(
            "decode_and_nms",
            format!("expected (5+classes)×c×c head map, got {:?}", head.shape()),
        ));
    }
    let classes = head.shape()[0] - 5;
    let cells = head.shape()[1];

    let mut candidates: Vec<Detection> = Vec::new();
    for cy in 0..cells {
        for cx in 0..cells {
            let obj = sigmoid_scalar(head.at3(0, cy, cx));
            let mut best_class = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for k in 0..classes {
                let s = sigmoid_scalar(head.at3(5 + k, cy, cx));
                if s > best_score {
                    best_score = s;
                    best_class = k;
                }
            }
            let confidence = obj * best_score;
            if confidence < conf_threshold {
                continue;
            }
            let tx = head.at3(1, cy, cx).clamp(0.0, 1.0);
            let ty = head.at3(2, cy, cx).clamp(0.0, 1.0);
            let w = head.at3(3, cy, cx).clamp(1e-4, 1.0);
            let h = head.at3(4, cy, cx).clamp(1e-4, 1.0);
            candidates.push(Detection {
                class_id: best_class,
                confidence,
                bbox: BoxCxcywh::new(
                    (cx as f64 + tx) / cells as f64,
                    (cy as f64 + ty) / cells as f64,
                    w,
                    h,
                ),
            });
        }
    }

    // per-class greedy NMS; candidates are already in cell-index order, and
    // the stable sort keeps that order for equal confidences
    let mut kept: Vec<Detection> = Vec::new();
    for class_id in 0..classes {
        let mut class_dets: Vec<&Detection> = candidates
            .iter()
            .filter(|d| d.class_id == class_id)
            .collect();
        class_dets.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .expect("finite confidences")
        });
        let mut class_kept: Vec<Detection> = Vec::new();
        'next: for d in class_dets {
            for k in &class_kept {
                if iou(&d.bbox, &k.bbox)? > iou_threshold {
                    continue 'next;
                }
            }
            class_kept.push(*d);
        }
        kept.extend(class_kept);
    }
    Ok(kept)
}
