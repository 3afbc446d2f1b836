//! Class-weighted focal loss: `-w_t * (1 - p_t)^gamma * log(p_t)` averaged
//! over pixels, with class weights from the inverse log frequency of class
//! occurrences in the ground-truth mask.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Probability floor applied before the logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    InverseLogFrequency,
    Uniform,
}

#[derive(Debug, Clone, Copy)]
pub struct FocalConfig {
    /// Focusing parameter, `>= 0`. Zero reduces the loss to cross-entropy
    /// (under uniform weights).
    pub gamma: f64,
    pub weight_mode: WeightMode,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { gamma: 2.0, weight_mode: WeightMode::InverseLogFrequency }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "focal gamma must be finite and non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Read a mask pixel as a class index in `[0, num_classes)`.
fn label_at(mask: &Tensor, idx: usize, num_classes: usize, op: &'static str) -> Result<usize> {
    let v = mask.data()[idx];
    let label = v as usize;
    if v.fract() != 0.0 || v < 0.0 || label >= num_classes {
        return Err(Error::Domain {
            op,
            detail: format!(
                "mask value {} at pixel {} outside class range 0..{}",
                v, idx, num_classes
            ),
        });
    }
    Ok(label)
}

/// Per-class pixel counts of a mask (background included).
pub fn class_pixel_counts(mask: &Tensor, num_classes: usize) -> Result<Vec<usize>> {
    if mask.rank() != 2 {
        return Err(Error::Shape {
            op: "class_pixel_counts",
            detail: format!("expected [H, W] mask, got {:?}", mask.shape()),
        });
    }
    let mut counts = vec![0usize; num_classes];
    for idx in 0..mask.numel() {
        counts[label_at(mask, idx, num_classes, "class_weights")?] += 1;
    }
    Ok(counts)
}

/// Inverse-log-frequency class weights:
/// `w_t = 1 / ln(1.1 + Y_t / sum_i Y_i)`, background included in the sum.
/// Classes absent from the mask receive the maximum weight `1/ln(1.1)`.
pub fn class_weights(mask: &Tensor, num_classes: usize) -> Result<Vec<f64>> {
    let counts = class_pixel_counts(mask, num_classes)?;
    let total: usize = counts.iter().sum();
    Ok(counts
        .iter()
        .map(|&y| 1.0 / (1.1 + y as f64 / total as f64).ln())
        .collect())
}

/// Differentiable focal loss on a tape. `logits` is a `[(N+1), H, W]` var,
/// `mask` the ground-truth class indices at the same resolution.
pub fn focal_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    mask: &Tensor,
    cfg: &FocalConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 || mask.shape() != [shape[1], shape[2]] {
        return Err(Error::Shape {
            op: "focal_loss",
            detail: format!("logits {:?} vs mask {:?}", shape, mask.shape()),
        });
    }
    let c = shape[0];
    let pixels = shape[1] * shape[2];

    let weights = match cfg.weight_mode {
        WeightMode::InverseLogFrequency => class_weights(mask, c)?,
        WeightMode::Uniform => vec![1.0; c],
    };

    // Constant per-pixel structures derived from the mask.
    let mut onehot = Tensor::zeros(vec![c, pixels]);
    let mut wrow = Tensor::zeros(vec![1, pixels]);
    for p in 0..pixels {
        let label = label_at(mask, p, c, "focal_loss")?;
        onehot.data_mut()[label * pixels + p] = 1.0;
        wrow.data_mut()[p] = weights[label];
    }

    let flat = tape.reshape(logits, vec![c, pixels])?;
    let probs = tape.softmax_channels(flat)?;
    let onehot_v = tape.leaf(&onehot, false)?;
    let picked = tape.mul(probs, onehot_v)?;
    let pt = tape.sum_axis0(picked)?;
    let pt = tape.clamp(pt, PROB_CLAMP, 1.0)?;

    let neg_pt = tape.neg(pt)?;
    let one_minus = tape.add_scalar(neg_pt, 1.0)?;
    let focus = tape.pow(one_minus, cfg.gamma)?;
    let log_pt = tape.log(pt)?;
    let scaled = tape.mul(focus, log_pt)?;
    let wv = tape.leaf(&wrow, false)?;
    let weighted = tape.mul(scaled, wv)?;
    let neg = tape.neg(weighted)?;
    tape.mean(neg)
}

/// Focal loss on plain tensors (no gradients).
pub fn focal_loss(logits: &Tensor, mask: &Tensor, cfg: &FocalConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let lv = tape.leaf(logits, false)?;
    let loss = focal_loss_on_tape(&mut tape, lv, mask, cfg)?;
    Ok(tape.value(loss).clone())
}
