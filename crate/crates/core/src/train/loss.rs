//! Segmentation losses and their gradients with respect to the probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::MASK_THRESHOLD;
use crate::tensor::{Mat, Scalar};

pub const PROB_CLAMP: f64 = 1e-7;
pub const CONFIDENCE_WEIGHT: f64 = 0.05;
pub const DEFAULT_DICE_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    /// `(confidence - IoU)^2`, before weighting.
    pub confidence_term: f64,
    pub total: f64,
}

fn check_len(probs: usize, gt: &BinaryMask) -> Result<()> {
    if probs != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{probs} probabilities for a mask of {} elements",
            gt.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &[f64], gt: &BinaryMask) -> Result<f64> {
    check_len(probs.len(), gt)?;
    Ok(bce(probs, gt.data()))
}

fn bce<T: Scalar>(probs: &[T], gt: &[u8]) -> f64 {
    let mut sum = 0.0;
    for (&p, &g) in probs.iter().zip(gt) {
        let s = p.f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        sum += if g != 0 { s.ln() } else { (1.0 - s).ln() };
    }
    -sum / probs.len() as f64
}

/// `1 - (2 sum(g s) + eps) / (sum(g^2) + sum(s^2) + eps)`; two empty inputs
/// with `eps = 0` give 0.
pub fn dice_loss(probs: &[f64], gt: &BinaryMask, epsilon: f64) -> Result<f64> {
    check_len(probs.len(), gt)?;
    Ok(dice(probs, gt.data(), epsilon))
}

fn dice_sums<T: Scalar>(probs: &[T], gt: &[u8]) -> (f64, f64, f64) {
    let (mut inter, mut gg, mut ss) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(gt) {
        let s = p.f64();
        let g = g as f64;
        inter += g * s;
        gg += g * g;
        ss += s * s;
    }
    (inter, gg, ss)
}

fn dice<T: Scalar>(probs: &[T], gt: &[u8], eps: f64) -> f64 {
    let (inter, gg, ss) = dice_sums(probs, gt);
    let den = gg + ss + eps;
    if den == 0.0 {
        return 0.0;
    }
    1.0 - (2.0 * inter + eps) / den
}

/// IoU between the thresholded probabilities and the ground truth.
pub fn thresholded_iou<T: Scalar>(probs: &[T], gt: &[u8]) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in probs.iter().zip(gt) {
        let m = p.f64() > MASK_THRESHOLD as f64;
        let g = g != 0;
        inter += (m && g) as u64;
        union += (m || g) as u64;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn total_loss(probs: &[f64], gt: &BinaryMask, confidence: f64, epsilon: f64) -> Result<LossBreakdown> {
    check_len(probs.len(), gt)?;
    let iou = thresholded_iou(probs, gt.data());
    Ok(breakdown(probs, gt.data(), confidence, iou, epsilon))
}

fn breakdown<T: Scalar>(probs: &[T], gt: &[u8], confidence: f64, iou: f64, eps: f64) -> LossBreakdown {
    let bce = bce(probs, gt);
    let dice = dice(probs, gt, eps);
    let confidence_term = (confidence - iou).powi(2);
    LossBreakdown {
        bce,
        dice,
        confidence_term,
        total: bce + dice + CONFIDENCE_WEIGHT * confidence_term,
    }
}

/// Loss value and gradients for one case. `iou_target` is held constant.
pub(crate) struct CaseLoss<T> {
    pub loss: LossBreakdown,
    pub d_probs: Mat<T>,
    pub d_confidence: T,
}

pub(crate) fn case_loss<T: Scalar>(
    probs: &Mat<T>,
    gt: &[u8],
    confidence: T,
    iou_target: f64,
    eps: f64,
) -> CaseLoss<T> {
    let data = probs.data();
    let n = data.len() as f64;
    let loss = breakdown(data, gt, confidence.f64(), iou_target, eps);
    let (inter, gg, ss) = dice_sums(data, gt);
    let den = gg + ss + eps;
    let num = 2.0 * inter + eps;
    let grad = data
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let s = p.f64();
            let g = g as f64;
            let d_bce = if s < PROB_CLAMP || s > 1.0 - PROB_CLAMP {
                0.0
            } else {
                -(g / s - (1.0 - g) / (1.0 - s)) / n
            };
            let d_dice = if den == 0.0 {
                0.0
            } else {
                -(2.0 * g * den - num * 2.0 * s) / (den * den)
            };
            T::of(d_bce + d_dice)
        })
        .collect();
    CaseLoss {
        loss,
        d_probs: Mat::from_vec(probs.rows(), probs.cols(), grad),
        d_confidence: T::of(CONFIDENCE_WEIGHT * 2.0 * (confidence.f64() - iou_target)),
    }
}
