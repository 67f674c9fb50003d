//! Detection loss: binary cross-entropy on objectness over all cells,
//! binary cross-entropy on class logits at positive cells, and L1 on box
//! parameters at positive cells, combined with weights 1/1/5.
//!
//! Each ground-truth box is assigned to the cell containing its center; when
//! two boxes land in one cell the first in input order claims it.
//! Normalization keeps the three terms at comparable scale on sparse grids:
//! the objectness term averages positive cells and negative cells
//! separately (so a handful of positives is not drowned by the background),
//! while the class and box terms average their per-cell sums over positive
//! cells.

use crate::data::LabeledBox;
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub obj: f64,
    pub cls: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            obj: 1.0,
            cls: 1.0,
            bbox: 5.0,
        }
    }
}

pub struct Targets {
    /// 1×c×c objectness target.
    pub obj: Tensor,
    /// 4×c×c box parameter targets (tx, ty, w, h).
    pub bbox: Tensor,
    /// classes×c×c one-hot class targets.
    pub cls: Tensor,
    /// 4×c×c mask, 1 at positive cells.
    pub bbox_mask: Tensor,
    /// classes×c×c mask, 1 at positive cells.
    pub cls_mask: Tensor,
    pub num_positive: usize,
}

/// Build per-cell targets. Boxes must already satisfy the label invariants
/// (inside the unit square, positive extents).
pub fn assign_targets(gts: &[LabeledBox], classes: usize, cells: usize) -> Result<Targets> {
    let mut obj = Tensor::zeros(&[1, cells, cells]);
    let mut bbox = Tensor::zeros(&[4, cells, cells]);
    let mut cls = Tensor::zeros(&[classes, cells, cells]);
    let mut bbox_mask = Tensor::zeros(&[4, cells, cells]);
    let mut cls_mask = Tensor::zeros(&[classes, cells, cells]);
    let mut taken = vec![false; cells * cells];
    let mut num_positive = 0usize;

    for gt in gts {
        let b = &gt.bbox;
        if !(0.0..=1.0).contains(&b.cx)
            || !(0.0..=1.0).contains(&b.cy)
            || b.w <= 0.0
            || b.h <= 0.0
            || b.w > 1.0
            || b.h > 1.0
        {
            return Err(Error::invalid(
                "assign_targets",
                format!("box outside the unit square: {b:?}"),
            ));
        }
        if gt.class_id >= classes {
            return Err(Error::invalid(
                "assign_targets",
                format!("class id {} outside catalog of {classes}", gt.class_id),
            ));
        }
        let cell_x = ((b.cx * cells as f64) as usize).min(cells - 1);
        let cell_y = ((b.cy * cells as f64) as usize).min(cells - 1);
        let cell = cell_y * cells + cell_x;
        if taken[cell] {
            continue; // first box in input order keeps the cell
        }
        taken[cell] = true;
        num_positive += 1;

        obj.data_mut()[cell] = 1.0;
        let plane = cells * cells;
        let t = [
            b.cx * cells as f64 - cell_x as f64,
            b.cy * cells as f64 - cell_y as f64,
            b.w,
            b.h,
        ];
        for (k, v) in t.iter().enumerate() {
            bbox.data_mut()[k * plane + cell] = *v;
            bbox_mask.data_mut()[k * plane + cell] = 1.0;
        }
        cls.data_mut()[gt.class_id * plane + cell] = 1.0;
        for k in 0..classes {
            cls_mask.data_mut()[k * plane + cell] = 1.0;
        }
    }

    Ok(Targets {
        obj,
        bbox,
        cls,
        bbox_mask,
        cls_mask,
        num_positive,
    })
}

/// Loss over one raw head map of shape (5+classes)×cells×cells.
pub fn loss_graph<'t>(
    head: Var<'t>,
    gts: &[LabeledBox],
    classes: usize,
    weights: LossWeights,
) -> Result<Var<'t>> {
    let shape = head.shape();
    if shape.len() != 3 || shape[0] != 5 + classes || shape[1] != shape[2] {
        return Err(Error::invalid(
            "loss",
            format!(
                "expected ({}+5)×c×c head map, got {:?}",
                classes, shape
            ),
        ));
    }
    let cells = shape[1];
    let t = assign_targets(gts, classes, cells)?;
    let norm_pos = 1.0 / t.num_positive.max(1) as f64;

    let obj_bce = head.slice_ch(0, 1)?.bce_with_logits(&t.obj)?;
    let neg_mask = Tensor::from_fn(t.obj.shape(), |i| 1.0 - t.obj.data()[i]);
    let num_neg = (cells * cells - t.num_positive).max(1);
    let obj_term = obj_bce
        .mul_const(&t.obj)?
        .sum()
        .scale(norm_pos)
        .add(obj_bce.mul_const(&neg_mask)?.sum().scale(1.0 / num_neg as f64))?;
    let bbox_term = head
        .slice_ch(1, 5)?
        .l1_dist(&t.bbox)?
        .mul_const(&t.bbox_mask)?
        .sum()
        .scale(norm_pos);
    let cls_term = head
        .slice_ch(5, 5 + classes)?
        .bce_with_logits(&t.cls)?
        .mul_const(&t.cls_mask)?
        .sum()
        .scale(norm_pos);

    obj_term
        .scale(weights.obj)
        .add(cls_term.scale(weights.cls))?
        .add(bbox_term.scale(weights.bbox))
}

/// Loss on a plain head tensor, for tests and verification.
pub fn loss_value(
    head: &Tensor,
    gts: &[LabeledBox],
    classes: usize,
    weights: LossWeights,
) -> Result<f64> {
    let tape = crate::tape::Tape::new();
    let h = tape.leaf(head.clone());
    Ok(loss_graph(h, gts, classes, weights)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BoxCxcywh;

    fn gt(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> LabeledBox {
        LabeledBox {
            class_id,
            bbox: BoxCxcywh::new(cx, cy, w, h),
        }
    }

    #[test]
    fn empty_ground_truth_low_logits_near_zero_loss() {
        // all objectness logits at -10: per-cell BCE is ln(1+e^-10) < 0.001
        let classes = 3;
        let cells = 4;
        let mut head = Tensor::zeros(&[5 + classes, cells, cells]);
        for i in 0..cells * cells {
            head.data_mut()[i] = -10.0;
        }
        let loss = loss_value(&head, &[], classes, LossWeights::default()).unwrap();
        assert!(loss < 0.001, "{loss}");
        assert!(loss > 0.0);
    }

    #[test]
    fn perfect_box_predictions_zero_l1_term() {
        let classes = 2;
        let cells = 4;
        let g = gt(1, 0.5625, 0.3125, 0.25, 0.125);
        // center falls in cell (x=2, y=1): tx = 0.5625*4-2 = 0.25, ty = 0.25
        let mut head = Tensor::zeros(&[5 + classes, cells, cells]);
        let plane = cells * cells;
        let cell = cells + 2;
        head.data_mut()[plane + cell] = 0.25; // tx
        head.data_mut()[2 * plane + cell] = 0.25; // ty
        head.data_mut()[3 * plane + cell] = 0.25; // w
        head.data_mut()[4 * plane + cell] = 0.125; // h

        let full = loss_value(&head, &[g], classes, LossWeights::default()).unwrap();
        let no_box = loss_value(
            &head,
            &[g],
            classes,
            LossWeights {
                bbox: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((full - no_box).abs() < 1e-12, "L1 term not zero");
    }

    #[test]
    fn box_outside_unit_square_is_rejected() {
        let head = Tensor::zeros(&[7, 4, 4]);
        let bad = gt(0, 1.4, 0.5, 0.2, 0.2);
        assert!(loss_value(&head, &[bad], 2, LossWeights::default()).is_err());
    }

    #[test]
    fn first_box_claims_shared_cell() {
        let t = assign_targets(
            &[gt(0, 0.51, 0.51, 0.2, 0.2), gt(1, 0.52, 0.52, 0.3, 0.3)],
            2,
            4,
        )
        .unwrap();
        assert_eq!(t.num_positive, 1);
        // the surviving target is class 0's box
        let plane = 16;
        let cell = 2 * 4 + 2;
        assert_eq!(t.cls.data()[cell], 1.0);
        assert_eq!(t.cls.data()[plane + cell], 0.0);
        assert!((t.bbox.data()[2 * plane + cell] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn loss_is_positive_and_finite_on_random_heads() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let head = Tensor::from_fn(&[8, 4, 4], |_| rng.random_range(-3.0..3.0));
            let gts = vec![gt(1, 0.3, 0.6, 0.2, 0.3)];
            let loss = loss_value(&head, &gts, 3, LossWeights::default()).unwrap();
            assert!(loss.is_finite() && loss > 0.0);
        }
    }
}
