//! Training losses with analytic gradients.
//!
//! Box regression (L1 + GIoU), entity cross-entropy, predicate focal loss,
//! L1 feature distillation, and their weighted total. Every gradient is
//! checked against central finite differences in [`crate::gradcheck`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("target {target} out of range for {classes} classes")]
    IndexOutOfRange { target: usize, classes: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

impl LossError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::DegenerateBox(_) => "DegenerateBox",
            Self::IndexOutOfRange { .. } => "IndexOutOfRange",
            Self::DimensionMismatch { .. } => "DimensionMismatch",
        }
    }
}

/// Axis-aligned box `(x1, y1, x2, y2)` with `x2 > x1` and `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = LossError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, LossError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(LossError::DegenerateBox([x1, y1, x2, y2]));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }

    /// Generalized IoU, in `(-1, 1]`.
    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let hull = self.union(other).area();
        inter / union - (hull - union) / hull
    }
}

/// A loss value and its gradient with respect to the first argument.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<G> {
    pub value: f64,
    pub grad: G,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `||b - gt||_1 + 1 - GIoU(b, gt)` and its gradient in `b`.
///
/// Subgradients at the kinks (equal coordinates, touching edges) are 0 on
/// the L1 side and take the one-sided branch selected by the comparisons
/// below on the GIoU side.
pub fn bbox_loss(b: &BBox, gt: &BBox) -> LossGrad<[f64; 4]> {
    let (bc, gc) = (b.coords(), gt.coords());
    let l1: f64 = bc.iter().zip(&gc).map(|(x, y)| (x - y).abs()).sum();

    let iw_raw = b.x2.min(gt.x2) - b.x1.max(gt.x1);
    let ih_raw = b.y2.min(gt.y2) - b.y1.max(gt.y1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
    let area_b = w * h;
    let union = area_b + gt.area() - inter;
    let cw = b.x2.max(gt.x2) - b.x1.min(gt.x1);
    let ch = b.y2.max(gt.y2) - b.y1.min(gt.y1);
    let hull = cw * ch;
    let giou = inter / union - (hull - union) / hull;

    // d(iw)/d(x1, x2) and d(ih)/d(y1, y2); zero once the boxes separate
    let overlap = iw_raw > 0.0 && ih_raw > 0.0;
    let d_iw = if overlap {
        [if b.x1 > gt.x1 { -1.0 } else { 0.0 }, if b.x2 < gt.x2 { 1.0 } else { 0.0 }]
    } else {
        [0.0, 0.0]
    };
    let d_ih = if overlap {
        [if b.y1 > gt.y1 { -1.0 } else { 0.0 }, if b.y2 < gt.y2 { 1.0 } else { 0.0 }]
    } else {
        [0.0, 0.0]
    };
    let d_inter = [d_iw[0] * ih, d_ih[0] * iw, d_iw[1] * ih, d_ih[1] * iw];
    let d_area = [-h, -w, h, w];
    let d_cw = [if b.x1 < gt.x1 { -1.0 } else { 0.0 }, if b.x2 > gt.x2 { 1.0 } else { 0.0 }];
    let d_ch = [if b.y1 < gt.y1 { -1.0 } else { 0.0 }, if b.y2 > gt.y2 { 1.0 } else { 0.0 }];
    let d_hull = [d_cw[0] * ch, d_ch[0] * cw, d_cw[1] * ch, d_ch[1] * cw];

    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        // giou = inter/union - 1 + union/hull
        let d_giou = d_inter[i] / union - inter * d_union / (union * union) + d_union / hull
            - union * d_hull[i] / (hull * hull);
        grad[i] = sign(bc[i] - gc[i]) - d_giou;
    }
    LossGrad {
        value: l1 + (1.0 - giou),
        grad,
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_target(target: usize, classes: usize) -> Result<(), LossError> {
    if target >= classes {
        return Err(LossError::IndexOutOfRange { target, classes });
    }
    Ok(())
}

/// `-log softmax(logits)[target]`; gradient `softmax - onehot`.
pub fn entity_ce(logits: &[f64], target: usize) -> Result<LossGrad<Vec<f64>>, LossError> {
    check_target(target, logits.len())?;
    let value = log_sum_exp(logits) - logits[target] + 0.0;
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok(LossGrad { value, grad })
}

/// Multi-class focal loss on logits:
/// `-balance * (1 - p_t)^gamma * log p_t`.
///
/// With `gamma = 0` and `balance = 1` the value is bitwise the cross-entropy.
pub fn predicate_focal(
    logits: &[f64],
    target: usize,
    gamma: f64,
    balance: f64,
) -> Result<LossGrad<Vec<f64>>, LossError> {
    check_target(target, logits.len())?;
    let log_pt = logits[target] - log_sum_exp(logits);
    let probs = softmax(logits);
    let pt = log_pt.exp();
    let one_minus = 1.0 - pt;
    let weight = one_minus.powf(gamma);
    let value = -(balance * weight * log_pt) + 0.0;
    // d value / d z_j = coef * (onehot_j - p_j)
    let focus = if gamma == 0.0 {
        0.0
    } else {
        gamma * one_minus.powf(gamma - 1.0) * pt * log_pt
    };
    let coef = -balance * (weight - focus);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| coef * (if j == target { 1.0 } else { 0.0 } - p))
        .collect();
    Ok(LossGrad { value, grad })
}

/// `||r - v||_1`; gradient `sign(r - v)` with 0 at equality.
pub fn distill_l1(r: &[f64], v: &[f64]) -> Result<LossGrad<Vec<f64>>, LossError> {
    if r.len() != v.len() {
        return Err(LossError::DimensionMismatch {
            expected: r.len(),
            found: v.len(),
        });
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(r.len());
    for (a, b) in r.iter().zip(v) {
        value += (a - b).abs();
        grad.push(sign(a - b));
    }
    Ok(LossGrad { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 1.0,
            lambda3: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub bbox: f64,
    pub ent: f64,
    pub pre: f64,
    pub distill: f64,
}

/// `bbox + lambda1 * ent + lambda2 * pre + lambda3 * distill`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.bbox + w.lambda1 * parts.ent + w.lambda2 * parts.pre + w.lambda3 * parts.distill
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn identical_boxes_cost_nothing() {
        let x = b(1.0, 2.0, 4.0, 7.5);
        let l = bbox_loss(&x, &x);
        assert_eq!(l.value, 0.0);
        assert_eq!(x.giou(&x), 1.0);
    }

    #[test]
    fn far_boxes_approach_two() {
        let a = b(0.0, 0.0, 1.0, 1.0);
        let mut prev = 0.0;
        for shift in [10.0, 100.0, 1000.0, 10000.0] {
            let g = 1.0 - a.giou(&b(shift, 0.0, shift + 1.0, 1.0));
            assert!(g < 2.0 && g > prev);
            prev = g;
        }
        assert!(2.0 - prev < 1e-3);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0, 0, -1, 1]").is_err());
        assert_eq!(serde_json::from_str::<BBox>("[0, 0, 1, 1]").unwrap(), b(0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn union_is_min_max() {
        assert_eq!(b(0.0, 0.0, 2.0, 2.0).union(&b(1.0, 1.0, 3.0, 3.0)), b(0.0, 0.0, 3.0, 3.0));
    }

    #[test]
    fn ce_closed_forms() {
        let l = entity_ce(&[0.0; 4], 2).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-15);
        assert!(entity_ce(&[30.0, 0.0, 0.0], 0).unwrap().value < 1e-12);
        assert_eq!(
            entity_ce(&[0.0], 1),
            Err(LossError::IndexOutOfRange { target: 1, classes: 1 })
        );
    }

    #[test]
    fn focal_reduces_to_ce() {
        let z = [0.3, -1.2, 2.5, 0.0];
        for t in 0..4 {
            let ce = entity_ce(&z, t).unwrap();
            let fl = predicate_focal(&z, t, 0.0, 1.0).unwrap();
            assert_eq!(ce.value.to_bits(), fl.value.to_bits());
        }
    }

    #[test]
    fn focal_confident_is_zero() {
        for gamma in [0.0, 0.5, 2.0, 5.0] {
            let l = predicate_focal(&[1000.0, 0.0, 0.0], 0, gamma, 0.25).unwrap();
            assert_eq!(l.value, 0.0);
            assert!(l.value.is_sign_positive());
        }
    }

    #[test]
    fn distill_cases() {
        let v = [0.5, -1.0, 2.0];
        assert_eq!(distill_l1(&v, &v).unwrap().value, 0.0);
        assert_eq!(distill_l1(&v, &v).unwrap().grad, vec![0.0; 3]);
        let r = [1.5, -1.0, 2.0];
        assert_eq!(distill_l1(&r, &v).unwrap().value, 1.0);
        assert!(distill_l1(&r, &v[..2]).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let ones = LossParts { bbox: 1.0, ent: 1.0, pre: 1.0, distill: 1.0 };
        assert_eq!(total_loss(&ones, &LossWeights::default()), 24.0);
        assert_eq!(total_loss(&LossParts::default(), &LossWeights::default()), 0.0);
        let w = LossWeights { lambda3: 0.0, ..Default::default() };
        let a = LossParts { distill: 5.0, ..ones };
        assert_eq!(total_loss(&a, &w), total_loss(&ones, &w));
    }
}
