//! Dice and focal losses over soft masks, composed from tape ops so the
//! whole training objective stays differentiable end to end.

use serde::{Deserialize, Serialize};

use crate::dataset::BinaryMask;
use crate::tensor::{Tape, Tensor, TensorError};

use super::TrainError;

pub const PROB_CLAMP: f64 = 1e-7;
const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dice: 1.0,
            lambda_focal: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lambda_dice.is_finite()
            && self.lambda_focal.is_finite()
            && self.focal_gamma.is_finite()
            && self.lambda_dice >= 0.0
            && self.lambda_focal >= 0.0
            && self.focal_gamma >= 0.0
            && (0.0..=1.0).contains(&self.focal_alpha);
        if ok {
            Ok(())
        } else {
            Err(TrainError::BadWeights(format!("{self:?}")))
        }
    }
}

pub fn mask_to_tensor(mask: &BinaryMask) -> Tensor {
    Tensor::new(
        mask.pixels.iter().map(|&p| p as f64).collect(),
        &[mask.h, mask.w],
    )
    .expect("mask data is finite")
}

fn check_shapes(op: &str, p: &Tensor, y: &Tensor) -> Result<(), TensorError> {
    if p.shape() != y.shape() {
        return Err(TensorError::ShapeMismatch {
            op: op.to_string(),
            lhs: p.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// `1 - (2*sum(P.Y) + eps) / (sum(P) + sum(Y) + eps)` with `eps = 1`.
pub fn dice_loss(tape: &mut Tape, p: &Tensor, y: &Tensor) -> Result<Tensor, TensorError> {
    check_shapes("dice", p, y)?;
    let eps = Tensor::scalar(DICE_SMOOTH);
    let inter = tape.mul(p, y)?;
    let inter = tape.sum(&inter, None)?;
    let num = tape.scalar_mul(&inter, &Tensor::scalar(2.0))?;
    let num = tape.add(&num, &eps)?;
    let sums = tape.sum(p, None)?;
    let sum_y = tape.sum(y, None)?;
    let den = tape.add(&sums, &sum_y)?;
    let den = tape.add(&den, &eps)?;
    let inv = tape.power(&den, -1.0)?;
    let ratio = tape.mul(&num, &inv)?;
    tape.sub(&Tensor::scalar(1.0), &ratio)
}

/// Exact clamp of probabilities to `[lo, 1-lo]` built from relu, so the tape
/// gradient matches the hard-clamp subgradient.
fn clamp_probs(tape: &mut Tape, p: &Tensor, lo: f64) -> Result<Tensor, TensorError> {
    let hi = 1.0 - lo;
    let lo_t = Tensor::filled(p.shape(), lo);
    let hi_t = Tensor::filled(p.shape(), hi);
    let above = tape.sub(p, &lo_t)?;
    let above = tape.relu(&above)?;
    let floored = tape.add(&above, &lo_t)?;
    let below = tape.sub(&hi_t, &floored)?;
    let below = tape.relu(&below)?;
    tape.sub(&hi_t, &below)
}

/// Mean over pixels of `-alpha_t (1 - p_t)^gamma log(p_t)` with
/// `p_t = P` on foreground and `1 - P` on background.
pub fn focal_loss(
    tape: &mut Tape,
    p: &Tensor,
    y: &Tensor,
    gamma: f64,
    alpha: f64,
) -> Result<Tensor, TensorError> {
    check_shapes("focal", p, y)?;
    let ones = Tensor::filled(p.shape(), 1.0);
    // constants derived from the binary target
    let y_neg = Tensor::new(
        y.data().iter().map(|&v| 1.0 - v).collect(),
        y.shape(),
    )?;
    let alpha_t = Tensor::new(
        y.data().iter().map(|&v| alpha * v + (1.0 - alpha) * (1.0 - v)).collect(),
        y.shape(),
    )?;

    let fg = tape.mul(y, p)?;
    let p_inv = tape.sub(&ones, p)?;
    let bg = tape.mul(&y_neg, &p_inv)?;
    let p_t = tape.add(&fg, &bg)?;
    let p_t = clamp_probs(tape, &p_t, PROB_CLAMP)?;
    let one_minus = tape.sub(&ones, &p_t)?;
    let modulating = tape.power(&one_minus, gamma)?;
    let log_p = tape.log(&p_t)?;
    let weighted = tape.mul(&alpha_t, &modulating)?;
    let weighted = tape.mul(&weighted, &log_p)?;
    let mean = tape.mean(&weighted, None)?;
    tape.scalar_mul(&mean, &Tensor::scalar(-1.0))
}

/// Per-frame weighted sum of dice and focal terms, averaged over the clip.
/// `ignore` masks (when present) drop pixels from both terms.
pub struct FrameTarget<'a> {
    pub target: &'a BinaryMask,
    pub ignore: Option<&'a BinaryMask>,
}

#[derive(Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub dice_value: f64,
    pub focal_value: f64,
}

pub fn total_loss(
    tape: &mut Tape,
    logits: &[Tensor],
    targets: &[FrameTarget],
    weights: &LossWeights,
) -> Result<LossBreakdown, TrainError> {
    weights.validate()?;
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(TrainError::EmptyClip);
    }
    let mut frame_losses = Vec::with_capacity(logits.len());
    let mut dice_acc = 0.0;
    let mut focal_acc = 0.0;
    for (p_logits, frame) in logits.iter().zip(targets) {
        let mut p = tape.sigmoid(p_logits)?;
        let mut y = mask_to_tensor(frame.target);
        if let Some(ignore) = frame.ignore {
            // ignored pixels contribute nothing to either term
            let keep = Tensor::new(
                ignore.pixels.iter().map(|&v| 1.0 - v as f64).collect(),
                &[ignore.h, ignore.w],
            )
            .map_err(TrainError::from)?;
            p = tape.mul(&p, &keep)?;
            y = Tensor::new(
                y.data()
                    .iter()
                    .zip(keep.data())
                    .map(|(a, b)| a * b)
                    .collect(),
                y.shape(),
            )
            .map_err(TrainError::from)?;
        }
        let dice = dice_loss(tape, &p, &y)?;
        let focal = focal_loss(tape, &p, &y, weights.focal_gamma, weights.focal_alpha)?;
        dice_acc += dice.item();
        focal_acc += focal.item();
        let weighted_dice = tape.scalar_mul(&dice, &Tensor::scalar(weights.lambda_dice))?;
        let weighted_focal = tape.scalar_mul(&focal, &Tensor::scalar(weights.lambda_focal))?;
        frame_losses.push(tape.add(&weighted_dice, &weighted_focal)?);
    }
    let refs: Vec<&Tensor> = frame_losses.iter().collect();
    let stacked = tape.concat(&refs, 0)?;
    let total = tape.mean(&stacked, None)?;
    Ok(LossBreakdown {
        total,
        dice_value: dice_acc / logits.len() as f64,
        focal_value: focal_acc / logits.len() as f64,
    })
}
