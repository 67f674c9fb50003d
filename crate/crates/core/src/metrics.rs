//! Detection evaluation: IoU, greedy confidence-ordered matching, 101-point
//! interpolated average precision, and the aggregate report with mAP50,
//! mAP50-95, precision, and recall.
//!
//! Conventions, stated once:
//!
//! * matching is per image and per class, predictions in descending
//!   confidence order (ties keep input order), each prediction taking the
//!   unmatched ground truth with the highest IoU at or above the threshold
//!   (IoU ties take the lowest ground-truth index);
//! * AP uses 101-point interpolation at recalls {0, 0.01, …, 1} over the
//!   max-precision-to-the-right envelope;
//! * AP thresholds run 0.50:0.05:0.95; a class with no ground truth is
//!   scored 0 if predictions exist and is skipped from the mean otherwise;
//! * precision/recall are macro-averaged over classes at the confidence that
//!   maximizes macro-F1 on the IoU-0.5 pooled matches (ties resolved toward
//!   the higher confidence).

use crate::data::{BoxCxcywh, LabeledBox};
use crate::detector::Detection;
use crate::error::{Error, Result};

/// Intersection-over-union of two boxes with positive extents.
pub fn iou(a: &BoxCxcywh, b: &BoxCxcywh) -> Result<f64> {
    if a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::invalid(
            "iou",
            format!("boxes must have positive extents, got {a:?} and {b:?}"),
        ));
    }
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // areas from the same corner arithmetic, so identical boxes land on
    // exactly 1
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    Ok(inter / (area_a + area_b - inter))
}

/// Greedy TP/FP assignment for one image. Returns one flag per prediction,
/// aligned with the input order.
pub fn match_predictions(
    preds: &[Detection],
    gts: &[LabeledBox],
    iou_threshold: f64,
) -> Result<Vec<bool>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        preds[j]
            .confidence
            .partial_cmp(&preds[i].confidence)
            .expect("finite confidences")
            .then(i.cmp(&j))
    });

    let mut gt_taken = vec![false; gts.len()];
    let mut flags = vec![false; preds.len()];
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] || gt.class_id != p.class_id {
                continue;
            }
            let v = iou(&p.bbox, &gt.bbox)?;
            if v >= iou_threshold {
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv, // ties keep the lowest gt index
                };
                if better {
                    best = Some((gi, v));
                }
            }
        }
        if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            flags[pi] = true;
        }
    }
    Ok(flags)
}

/// 101-point interpolated AP from pooled match flags.
///
/// `flags[i]` says whether the prediction with confidence `confidences[i]`
/// was a true positive; `num_gt` is the total ground-truth count for the
/// class. Returns 0 when predictions exist but there is nothing to recall.
pub fn ap_from_matches(flags: &[bool], confidences: &[f64], num_gt: usize) -> f64 {
    debug_assert_eq!(flags.len(), confidences.len());
    if num_gt == 0 {
        return 0.0;
    }
    if flags.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&i, &j| {
        confidences[j]
            .partial_cmp(&confidences[i])
            .expect("finite confidences")
            .then(i.cmp(&j))
    });

    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(order.len()); // (recall, precision)
    for (k, &i) in order.iter().enumerate() {
        if flags[i] {
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }

    interpolated_ap(&curve)
}

/// 101-point mean of the max-precision-to-the-right envelope.
fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let mut best = 0.0;
        for &(rec, prec) in curve {
            if rec >= r && prec > best {
                best = prec;
            }
        }
        total += best;
    }
    total / 101.0
}

/// One prediction pooled across the dataset.
#[derive(Clone, Copy, Debug)]
struct PooledPred {
    confidence: f64,
    tp: bool,
}

/// AP thresholds 0.50:0.05:0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// AP per class per threshold; `None` marks a class skipped at that
    /// threshold (no ground truth and no predictions anywhere).
    pub per_class_ap: Vec<Vec<Option<f64>>>,
    pub map50: f64,
    pub map50_95: f64,
    pub precision: f64,
    pub recall: f64,
    /// Confidence of the max-F1 operating point behind precision/recall.
    pub operating_confidence: f64,
    /// Recall-sorted PR points per class at IoU 0.5.
    pub pr_curves50: Vec<Vec<(f64, f64)>>,
}

impl EvalReport {
    /// Flat `class,metric,value` lines; bit-stable for identical inputs.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("all,mAP50,{:.6}\n", self.map50));
        out.push_str(&format!("all,mAP50-95,{:.6}\n", self.map50_95));
        out.push_str(&format!("all,precision,{:.6}\n", self.precision));
        out.push_str(&format!("all,recall,{:.6}\n", self.recall));
        out.push_str(&format!(
            "all,operating_confidence,{:.6}\n",
            self.operating_confidence
        ));
        for (c, row) in self.per_class_ap.iter().enumerate() {
            match row[0] {
                Some(ap) => out.push_str(&format!("{c},AP50,{ap:.6}\n")),
                None => out.push_str(&format!("{c},AP50,skipped\n")),
            }
        }
        out
    }

    /// Human-readable table. Precision/recall are macro-averaged at the
    /// max-F1 confidence.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("metric        value\n");
        out.push_str(&format!("mAP50         {:.5}\n", self.map50));
        out.push_str(&format!("mAP50-95      {:.5}\n", self.map50_95));
        out.push_str(&format!("precision     {:.5}\n", self.precision));
        out.push_str(&format!("recall        {:.5}\n", self.recall));
        out.push_str(&format!("op-confidence {:.5}\n", self.operating_confidence));
        out
    }
}

/// Evaluate pooled predictions against ground truth, both given per image.
pub fn evaluate(
    preds_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<LabeledBox>],
    num_classes: usize,
) -> Result<EvalReport> {
    if preds_per_image.len() != gts_per_image.len() {
        return Err(Error::invalid(
            "evaluate",
            format!(
                "prediction images ({}) != ground-truth images ({})",
                preds_per_image.len(),
                gts_per_image.len()
            ),
        ));
    }
    for img in gts_per_image {
        for gt in img {
            if gt.class_id >= num_classes {
                return Err(Error::invalid(
                    "evaluate",
                    format!("ground-truth class id {} outside catalog of {num_classes}", gt.class_id),
                ));
            }
        }
    }
    for img in preds_per_image {
        for p in img {
            if p.class_id >= num_classes {
                return Err(Error::invalid(
                    "evaluate",
                    format!("prediction class id {} outside catalog of {num_classes}", p.class_id),
                ));
            }
        }
    }

    let thresholds = ap_thresholds();
    let num_gt_per_class: Vec<usize> = (0..num_classes)
        .map(|c| {
            gts_per_image
                .iter()
                .flatten()
                .filter(|g| g.class_id == c)
                .count()
        })
        .collect();
    let num_pred_per_class: Vec<usize> = (0..num_classes)
        .map(|c| {
            preds_per_image
                .iter()
                .flatten()
                .filter(|p| p.class_id == c)
                .count()
        })
        .collect();

    // pooled flags per class per threshold, plus the IoU-0.5 pool for P/R
    let mut per_class_ap: Vec<Vec<Option<f64>>> = vec![vec![None; thresholds.len()]; num_classes];
    let mut pool50: Vec<Vec<PooledPred>> = vec![Vec::new(); num_classes];
    let mut pr_curves50: Vec<Vec<(f64, f64)>> = vec![Vec::new(); num_classes];

    for (ti, &t) in thresholds.iter().enumerate() {
        let mut pooled: Vec<Vec<PooledPred>> = vec![Vec::new(); num_classes];
        for (preds, gts) in preds_per_image.iter().zip(gts_per_image) {
            let flags = match_predictions(preds, gts, t)?;
            for (p, &tp) in preds.iter().zip(&flags) {
                pooled[p.class_id].push(PooledPred {
                    confidence: p.confidence,
                    tp,
                });
            }
        }
        for c in 0..num_classes {
            if num_gt_per_class[c] == 0 && num_pred_per_class[c] == 0 {
                continue; // skipped class at this threshold
            }
            let flags: Vec<bool> = pooled[c].iter().map(|p| p.tp).collect();
            let confs: Vec<f64> = pooled[c].iter().map(|p| p.confidence).collect();
            per_class_ap[c][ti] = Some(ap_from_matches(&flags, &confs, num_gt_per_class[c]));
        }
        if (t - 0.5).abs() < 1e-9 {
            pool50 = pooled;
            for c in 0..num_classes {
                pr_curves50[c] = pr_curve(&pool50[c], num_gt_per_class[c]);
            }
        }
    }

    let mean_over = |f: &dyn Fn(usize) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = (0..num_classes).filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };

    let map50 = mean_over(&|c| per_class_ap[c][0]);
    let map50_95 = mean_over(&|c| {
        let row = &per_class_ap[c];
        if row[0].is_none() {
            return None;
        }
        Some(row.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / row.len() as f64)
    });
    let (Some(map50), Some(map50_95)) = (map50, map50_95) else {
        return Err(Error::invalid(
            "evaluate",
            "no class has any ground truth or prediction",
        ));
    };

    let (precision, recall, operating_confidence) =
        operating_point(&pool50, &num_gt_per_class);

    Ok(EvalReport {
        per_class_ap,
        map50,
        map50_95,
        precision,
        recall,
        operating_confidence,
        pr_curves50,
    })
}

fn pr_curve(pool: &[PooledPred], num_gt: usize) -> Vec<(f64, f64)> {
    if num_gt == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&i, &j| {
        pool[j]
            .confidence
            .partial_cmp(&pool[i].confidence)
            .expect("finite confidences")
            .then(i.cmp(&j))
    });
    let mut tp = 0;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            if pool[i].tp {
                tp += 1;
            }
            (tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// Macro-averaged precision/recall at the confidence maximizing macro-F1.
/// Classes with no ground truth and no predictions are skipped; a class with
/// ground truth but no predictions above the threshold contributes (0,0).
fn operating_point(pool50: &[Vec<PooledPred>], num_gt: &[usize]) -> (f64, f64, f64) {
    let mut candidates: Vec<f64> = pool50
        .iter()
        .flatten()
        .map(|p| p.confidence)
        .collect();
    candidates.sort_by(|a, b| b.partial_cmp(a).expect("finite confidences"));
    candidates.dedup();
    if candidates.is_empty() {
        return (0.0, 0.0, 0.0);
    }

    let macro_pr = |conf: f64| -> (f64, f64) {
        let mut ps = Vec::new();
        let mut rs = Vec::new();
        for (c, preds) in pool50.iter().enumerate() {
            if num_gt[c] == 0 && preds.is_empty() {
                continue;
            }
            let kept: Vec<&PooledPred> = preds.iter().filter(|p| p.confidence >= conf).collect();
            let tp = kept.iter().filter(|p| p.tp).count();
            let p = if kept.is_empty() {
                0.0
            } else {
                tp as f64 / kept.len() as f64
            };
            let r = if num_gt[c] == 0 {
                // no ground truth: recall is vacuous; precision still counts
                if kept.is_empty() {
                    1.0
                } else {
                    0.0 // every kept prediction is false
                }
            } else {
                tp as f64 / num_gt[c] as f64
            };
            ps.push(p);
            rs.push(r);
        }
        if ps.is_empty() {
            (0.0, 0.0)
        } else {
            (
                ps.iter().sum::<f64>() / ps.len() as f64,
                rs.iter().sum::<f64>() / rs.len() as f64,
            )
        }
    };

    let mut best = (0.0, 0.0, candidates[0], -1.0); // (p, r, conf, f1)
    for &conf in &candidates {
        let (p, r) = macro_pr(conf);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f1 > best.3 {
            best = (p, r, conf, f1);
        }
    }
    (best.0, best.1, best.2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoxCxcywh {
        BoxCxcywh::new(cx, cy, w, h)
    }

    fn det(class_id: usize, confidence: f64, bbox: BoxCxcywh) -> Detection {
        Detection {
            class_id,
            confidence,
            bbox,
        }
    }

    fn gt(class_id: usize, bbox: BoxCxcywh) -> LabeledBox {
        LabeledBox { class_id, bbox }
    }

    #[test]
    fn iou_examples() {
        let a = b(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);

        let disjoint = b(0.9, 0.9, 0.1, 0.1);
        assert_eq!(iou(&a, &disjoint).unwrap(), 0.0);

        // corner boxes (0,0)-(2,2) and (1,1)-(3,3): intersection 1, union 7
        let p = b(1.0, 1.0, 2.0, 2.0);
        let q = b(2.0, 2.0, 2.0, 2.0);
        assert!((iou(&p, &q).unwrap() - 1.0 / 7.0).abs() < 1e-12);

        assert!(iou(&a, &b(0.5, 0.5, 0.0, 0.1)).is_err());
    }

    #[test]
    fn iou_is_symmetric() {
        let p = b(0.3, 0.4, 0.25, 0.3);
        let q = b(0.4, 0.45, 0.3, 0.2);
        assert_eq!(iou(&p, &q).unwrap(), iou(&q, &p).unwrap());
    }

    #[test]
    fn matching_single_gt_two_preds() {
        let gts = vec![gt(0, b(0.5, 0.5, 0.2, 0.2))];
        let preds = vec![
            det(0, 0.8, b(0.5, 0.5, 0.2, 0.2)),
            det(0, 0.6, b(0.5, 0.5, 0.2, 0.2)),
        ];
        let flags = match_predictions(&preds, &gts, 0.5).unwrap();
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn matching_wrong_class_is_fp() {
        let gts = vec![gt(1, b(0.5, 0.5, 0.2, 0.2))];
        let preds = vec![det(0, 0.9, b(0.5, 0.5, 0.2, 0.2))];
        assert_eq!(match_predictions(&preds, &gts, 0.5).unwrap(), vec![false]);
    }

    #[test]
    fn matching_below_threshold_is_fp() {
        // IoU 0.45 at threshold 0.5: prefix overlap of 0.45 along x
        let gts = vec![gt(0, b(0.5, 0.5, 1.0, 1.0))];
        let preds = vec![det(0, 0.9, b(0.5 - 0.275, 0.5, 0.45, 1.0))];
        let v = iou(&preds[0].bbox, &gts[0].bbox).unwrap();
        assert!(v < 0.5 && v > 0.4, "{v}");
        assert_eq!(match_predictions(&preds, &gts, 0.5).unwrap(), vec![false]);
    }

    #[test]
    fn ap_perfect_and_empty() {
        assert_eq!(ap_from_matches(&[true, true], &[0.9, 0.8], 2), 1.0);
        assert_eq!(ap_from_matches(&[], &[], 3), 0.0);
        // no gt but predictions exist
        assert_eq!(ap_from_matches(&[false], &[0.9], 0), 0.0);
    }

    #[test]
    fn ap_fp_above_tp_is_half() {
        // FP at conf .95, TP at conf .9, one GT: precision at recall 1 is 0.5
        let ap = ap_from_matches(&[false, true], &[0.95, 0.9], 1);
        assert!((ap - 0.5).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn evaluate_perfect_predictions() {
        let gts = vec![
            vec![gt(0, b(0.3, 0.3, 0.2, 0.2)), gt(1, b(0.7, 0.7, 0.2, 0.2))],
            vec![gt(2, b(0.5, 0.5, 0.4, 0.3))],
        ];
        let preds: Vec<Vec<Detection>> = gts
            .iter()
            .map(|img| img.iter().map(|g| det(g.class_id, 0.9, g.bbox)).collect())
            .collect();
        let r = evaluate(&preds, &gts, 8).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.map50_95, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn evaluate_single_box_iou_60_gives_map5095_of_03() {
        // exact-dyadic construction: prediction x-span [0, 3/8], gt [0, 5/8],
        // same y-span → IoU exactly 0.6
        let gts = vec![vec![gt(0, b(0.3125, 0.5, 0.625, 0.5))]];
        let preds = vec![vec![det(0, 0.9, b(0.1875, 0.5, 0.375, 0.5))]];
        let v = iou(&preds[0][0].bbox, &gts[0][0].bbox).unwrap();
        assert_eq!(v, 0.6);
        let r = evaluate(&preds, &gts, 1).unwrap();
        assert_eq!(r.map50, 1.0);
        assert!((r.map50_95 - 0.3).abs() < 1e-12, "{}", r.map50_95);
    }

    #[test]
    fn evaluate_empty_predictions_zero_recall() {
        let gts = vec![vec![gt(0, b(0.5, 0.5, 0.2, 0.2))]];
        let preds = vec![vec![]];
        let r = evaluate(&preds, &gts, 1).unwrap();
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.map50, 0.0);
    }

    #[test]
    fn evaluate_rejects_unknown_class() {
        let gts = vec![vec![gt(9, b(0.5, 0.5, 0.2, 0.2))]];
        assert!(evaluate(&[vec![]], &gts, 8).is_err());
    }

    #[test]
    fn evaluate_is_order_invariant() {
        let gts = vec![
            vec![gt(0, b(0.3, 0.3, 0.2, 0.2)), gt(0, b(0.7, 0.7, 0.2, 0.2))],
            vec![gt(1, b(0.5, 0.5, 0.3, 0.3))],
        ];
        let preds = vec![
            vec![
                det(0, 0.9, b(0.31, 0.3, 0.2, 0.2)),
                det(0, 0.7, b(0.9, 0.9, 0.1, 0.1)),
            ],
            vec![det(1, 0.8, b(0.5, 0.52, 0.3, 0.3))],
        ];
        let r1 = evaluate(&preds, &gts, 2).unwrap();

        // swap image order and reverse predictions within images
        let preds2: Vec<Vec<Detection>> = preds
            .iter()
            .rev()
            .map(|v| v.iter().rev().cloned().collect())
            .collect();
        let gts2: Vec<Vec<LabeledBox>> = gts.iter().rev().cloned().collect();
        let r2 = evaluate(&preds2, &gts2, 2).unwrap();
        assert_eq!(r1.map50, r2.map50);
        assert_eq!(r1.map50_95, r2.map50_95);
        assert_eq!(r1.precision, r2.precision);
        assert_eq!(r1.recall, r2.recall);
    }

    #[test]
    fn ap_non_increasing_in_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(404);
        for _ in 0..100 {
            let n_gt = rng.random_range(1..4usize);
            let gts: Vec<LabeledBox> = (0..n_gt)
                .map(|_| {
                    gt(
                        0,
                        b(
                            rng.random_range(0.2..0.8),
                            rng.random_range(0.2..0.8),
                            rng.random_range(0.1..0.3),
                            rng.random_range(0.1..0.3),
                        ),
                    )
                })
                .collect();
            let preds: Vec<Detection> = (0..rng.random_range(1..5usize))
                .map(|_| {
                    let base = gts[rng.random_range(0..n_gt)].bbox;
                    det(
                        0,
                        rng.random_range(0.1..1.0),
                        b(
                            base.cx + rng.random_range(-0.05..0.05),
                            base.cy + rng.random_range(-0.05..0.05),
                            (base.w + rng.random_range(-0.05..0.05)).max(0.02),
                            (base.h + rng.random_range(-0.05..0.05)).max(0.02),
                        ),
                    )
                })
                .collect();

            let mut last = f64::INFINITY;
            for t in ap_thresholds() {
                let flags = match_predictions(&preds, &gts, t).unwrap();
                let confs: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
                let ap = ap_from_matches(&flags, &confs, n_gt);
                assert!(ap <= last + 1e-12, "AP increased: {ap} after {last} at t={t}");
                last = ap;
            }
        }
    }

    #[test]
    fn duplicate_lower_confidence_tp_never_increases_ap() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(777);
        for _ in 0..100 {
            let gbox = b(0.5, 0.5, 0.3, 0.3);
            let gts = vec![gt(0, gbox), gt(0, b(0.2, 0.2, 0.15, 0.15))];
            let mut preds = vec![
                det(0, rng.random_range(0.5..1.0), gbox),
                det(0, rng.random_range(0.1..0.5), b(0.21, 0.2, 0.15, 0.15)),
            ];
            let confs = |p: &[Detection]| p.iter().map(|d| d.confidence).collect::<Vec<_>>();
            let flags = match_predictions(&preds, &gts, 0.5).unwrap();
            let ap_before = ap_from_matches(&flags, &confs(&preds), 2);

            // duplicate of the first (matched) box at lower confidence
            preds.push(det(0, preds[0].confidence * 0.5, gbox));
            let flags2 = match_predictions(&preds, &gts, 0.5).unwrap();
            let ap_after = ap_from_matches(&flags2, &confs(&preds), 2);
            assert!(ap_after <= ap_before + 1e-12);
        }
    }

    #[test]
    fn report_text_is_stable() {
        let gts = vec![vec![gt(0, b(0.5, 0.5, 0.2, 0.2))]];
        let preds = vec![vec![det(0, 0.75, b(0.5, 0.5, 0.2, 0.2))]];
        let r1 = evaluate(&preds, &gts, 2).unwrap();
        let r2 = evaluate(&preds, &gts, 2).unwrap();
        assert_eq!(r1.to_kv_text(), r2.to_kv_text());
        assert_eq!(r1.to_table(), r2.to_table());
        assert!(r1.to_kv_text().contains("all,mAP50,1.000000"));
        // class 1 has no gt and no preds: skipped
        assert!(r1.to_kv_text().contains("1,AP50,skipped"));
    }
}
