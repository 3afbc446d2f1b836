//! Mean intersection-over-union for segmentation masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// IoU of one class between two masks. A class absent from both masks
/// scores 1.0 (correct rejection).
pub fn class_iou(pred: &Tensor, truth: &Tensor, class: usize) -> Result<f64> {
    if pred.shape() != truth.shape() || pred.rank() != 2 {
        return Err(Error::Shape {
            op: "class_iou",
            detail: format!("pred {:?} vs truth {:?}", pred.shape(), truth.shape()),
        });
    }
    let c = class as f64;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, t) in pred.data().iter().zip(truth.data()) {
        let in_p = *p == c;
        let in_t = *t == c;
        if in_p && in_t {
            inter += 1;
        }
        if in_p || in_t {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Mean IoU over the given foreground classes (background excluded by the
/// caller's class list).
pub fn miou(pred: &Tensor, truth: &Tensor, classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Contract {
            op: "miou",
            detail: "class list is empty".to_string(),
        });
    }
    let mut acc = 0.0;
    for &c in classes {
        acc += class_iou(pred, truth, c)?;
    }
    Ok(acc / classes.len() as f64)
}

/// IoU of the background class (label 0), reported separately from the
/// foreground mean.
pub fn background_iou(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    class_iou(pred, truth, 0)
}
