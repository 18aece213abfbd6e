//! Combined detection objective: classification + box regression + confidence.

use serde::{Deserialize, Serialize};

use super::assign::{GridSpec, TargetAssignment};
use super::geometry::{box_loss, box_loss_grad, BoundingBox};
use crate::error::{Error, Result};
use crate::gan::loss::{bce_logit_grad, bce_term, bce_term_grad};

/// Log-size offsets are clamped here before exponentiation.
const MAX_LOG_SCALE: f64 = 4.0;

/// One (cell, anchor) prediction after decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPrediction {
    pub bbox: BoundingBox,
    /// Objectness after the sigmoid.
    pub conf: f64,
    /// Class distribution after the softmax.
    pub class_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clc: f64,
    pub bbox: f64,
    pub conf: f64,
    pub total: f64,
}

fn sigmoid(z: f64) -> f64 {
    usv_nn::sigmoid(z)
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[inline]
fn raw_index(grid: &GridSpec, slot: usize, field: usize) -> usize {
    let kk = grid.cells();
    let cell = slot / grid.m();
    let anchor = slot % grid.m();
    (anchor * grid.per_anchor() + field) * kk + cell
}

fn check_raw(raw: &[f64], grid: &GridSpec) -> Result<()> {
    let want = grid.slots() * grid.per_anchor();
    if raw.len() != want {
        return Err(Error::InvalidArgument(format!("raw head output has {} values, grid needs {want}", raw.len())));
    }
    Ok(())
}

/// Decode one image's raw head output (`[M * (5 + C), k, k]`, channel-major).
///
/// Centres are cell-relative sigmoids, sizes scale the anchor exponentially.
pub fn decode(raw: &[f64], grid: &GridSpec) -> Result<Vec<SlotPrediction>> {
    check_raw(raw, grid)?;
    let k = grid.k as f64;
    let mut out = Vec::with_capacity(grid.slots());
    for slot in 0..grid.slots() {
        let cell = slot / grid.m();
        let (row, col) = ((cell / grid.k) as f64, (cell % grid.k) as f64);
        let (aw, ah) = grid.anchors[slot % grid.m()];
        let r = |f| raw[raw_index(grid, slot, f)];
        let bbox = BoundingBox {
            cx: (col + sigmoid(r(0))) / k,
            cy: (row + sigmoid(r(1))) / k,
            w: aw * r(2).min(MAX_LOG_SCALE).exp(),
            h: ah * r(3).min(MAX_LOG_SCALE).exp(),
        };
        let logits: Vec<f64> = (0..grid.classes).map(|c| r(5 + c)).collect();
        out.push(SlotPrediction { bbox, conf: sigmoid(r(4)), class_probs: softmax(&logits) });
    }
    Ok(out)
}

fn check_slots(assign: &TargetAssignment, n: usize) -> Result<()> {
    if assign.slots.len() != n {
        return Err(Error::InvalidArgument(format!(
            "assignment has {} slots, predictions have {n}",
            assign.slots.len()
        )));
    }
    Ok(())
}

/// Sum over positive slots of the per-class binary cross-entropy.
pub fn clc_loss(assign: &TargetAssignment, probs: &[Vec<f64>]) -> Result<f64> {
    check_slots(assign, probs.len())?;
    let mut total = 0.0;
    for (slot, pos) in assign.positives() {
        let p = &probs[slot];
        if p.len() != assign.classes {
            return Err(Error::InvalidArgument(format!("slot {slot} has {} class probabilities", p.len())));
        }
        total += p
            .iter()
            .enumerate()
            .map(|(c, &pc)| bce_term(pc, if c == pos.class_id { 1.0 } else { 0.0 }))
            .sum::<f64>();
    }
    Ok(total)
}

/// Objectness BCE towards 1 at positives plus `lambda_noobj` times BCE
/// towards 0 at negatives.
pub fn conf_loss(assign: &TargetAssignment, conf: &[f64], lambda_noobj: f64) -> Result<f64> {
    check_slots(assign, conf.len())?;
    Ok(conf
        .iter()
        .enumerate()
        .map(|(s, &c)| if assign.indicator(s) { bce_term(c, 1.0) } else { lambda_noobj * bce_term(c, 0.0) })
        .sum())
}

/// Sum of [`box_loss`] over positive slots.
pub fn box_loss_sum(assign: &TargetAssignment, boxes: &[BoundingBox]) -> Result<f64> {
    check_slots(assign, boxes.len())?;
    assign.positives().map(|(s, pos)| box_loss(&boxes[s], &pos.truth)).sum()
}

pub fn total_loss(assign: &TargetAssignment, preds: &[SlotPrediction], grid: &GridSpec) -> Result<LossBreakdown> {
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.class_probs.clone()).collect();
    let conf: Vec<f64> = preds.iter().map(|p| p.conf).collect();
    let boxes: Vec<BoundingBox> = preds.iter().map(|p| p.bbox).collect();
    let clc = clc_loss(assign, &probs)?;
    let bbox = box_loss_sum(assign, &boxes)?;
    let conf = conf_loss(assign, &conf, grid.lambda_noobj)?;
    Ok(LossBreakdown { clc, bbox, conf, total: clc + bbox + conf })
}

/// Loss of one image and its gradient with respect to the raw head output.
pub fn total_loss_grad(assign: &TargetAssignment, raw: &[f64], grid: &GridSpec) -> Result<(LossBreakdown, Vec<f64>)> {
    let preds = decode(raw, grid)?;
    let loss = total_loss(assign, &preds, grid)?;
    let mut grad = vec![0.0; raw.len()];
    let k = grid.k as f64;
    for (slot, pred) in preds.iter().enumerate() {
        let positive = assign.slots[slot];
        let target = if positive.is_some() { 1.0 } else { 0.0 };
        let weight = if positive.is_some() { 1.0 } else { grid.lambda_noobj };
        grad[raw_index(grid, slot, 4)] = weight * bce_logit_grad(pred.conf, target);

        let Some(pos) = positive else { continue };
        // softmax + per-class BCE
        let p = &pred.class_probs;
        let g: Vec<f64> = (0..grid.classes)
            .map(|c| bce_term_grad(p[c], if c == pos.class_id { 1.0 } else { 0.0 }))
            .collect();
        let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
        for c in 0..grid.classes {
            grad[raw_index(grid, slot, 5 + c)] = p[c] * (g[c] - dot);
        }
        // box decode chain rule
        let (_, gb) = box_loss_grad(&pred.bbox, &pos.truth)?;
        let r = |f| raw[raw_index(grid, slot, f)];
        let (sx, sy) = (sigmoid(r(0)), sigmoid(r(1)));
        grad[raw_index(grid, slot, 0)] = gb[0] * sx * (1.0 - sx) / k;
        grad[raw_index(grid, slot, 1)] = gb[1] * sy * (1.0 - sy) / k;
        grad[raw_index(grid, slot, 2)] = if r(2) < MAX_LOG_SCALE { gb[2] * pred.bbox.w } else { 0.0 };
        grad[raw_index(grid, slot, 3)] = if r(3) < MAX_LOG_SCALE { gb[3] * pred.bbox.h } else { 0.0 };
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::assign::assign_targets;
    use crate::gan::loss::BCE_EPS;
    use std::f64::consts::LN_2;

    fn one_positive(classes: usize) -> (GridSpec, TargetAssignment) {
        let grid = GridSpec::new(1, vec![(0.2, 0.2)], classes, 0.5).unwrap();
        let a = assign_targets(&[(0, BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap())], &grid).unwrap();
        (grid, a)
    }

    #[test]
    fn clc_cases() {
        let grid = GridSpec::new(2, vec![(0.2, 0.2)], 2, 0.5).unwrap();
        let none = assign_targets(&[], &grid).unwrap();
        assert_eq!(clc_loss(&none, &vec![vec![0.5, 0.5]; 4]).unwrap(), 0.0);
        let (_, a) = one_positive(2);
        assert!(clc_loss(&a, &[vec![1.0 - BCE_EPS, BCE_EPS]]).unwrap() < 1e-6);
        assert!((clc_loss(&a, &[vec![0.5, 0.5]]).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        assert!(clc_loss(&a, &[vec![0.5, 0.5], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn conf_cases() {
        let grid = GridSpec::new(2, vec![(0.2, 0.2)], 2, 0.5).unwrap();
        let none = assign_targets(&[], &grid).unwrap();
        assert!(conf_loss(&none, &[BCE_EPS; 4], 0.5).unwrap() < 1e-6);
        let (_, a) = one_positive(2);
        assert!((conf_loss(&a, &[0.5], 0.5).unwrap() - LN_2).abs() < 1e-12);
        let g1 = GridSpec::new(1, vec![(0.2, 0.2)], 2, 0.5).unwrap();
        let neg = assign_targets(&[], &g1).unwrap();
        assert!((conf_loss(&neg, &[0.5], 0.5).unwrap() - 0.5 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_cases() {
        let grid = GridSpec::new(2, vec![(0.2, 0.2)], 2, 0.5).unwrap();
        let none = assign_targets(&[], &grid).unwrap();
        let perfect_neg = vec![
            SlotPrediction { bbox: BoundingBox::new(0.5, 0.5, 0.1, 0.1).unwrap(), conf: BCE_EPS, class_probs: vec![0.5, 0.5] };
            4
        ];
        assert!(total_loss(&none, &perfect_neg, &grid).unwrap().total < 1e-6);

        let (g1, a) = one_positive(2);
        let truth = a.slots[0].unwrap().truth;
        let p = SlotPrediction { bbox: truth, conf: 0.5, class_probs: vec![1.0 - BCE_EPS, BCE_EPS] };
        let l = total_loss(&a, &[p], &g1).unwrap();
        assert!((l.total - LN_2).abs() < 1e-6);
        assert!((l.total - (l.clc + l.bbox + l.conf)).abs() < 1e-12);
    }

    #[test]
    fn decode_shape_is_checked() {
        let grid = GridSpec::new(2, vec![(0.2, 0.2), (0.1, 0.3)], 3, 0.5).unwrap();
        assert!(decode(&vec![0.0; 2 * 2 * 2 * 8], &grid).is_ok());
        assert!(decode(&[0.0; 10], &grid).is_err());
    }
}
