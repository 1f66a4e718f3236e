use crate::error::Result;
use crate::tensor::{ops, Tensor};

/// Predictions at or above this value count as foreground.
pub const DICE_THRESHOLD: f64 = 0.5;

/// `1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)` over every element.
pub fn soft_dice_loss(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    ops::soft_dice(pred, target, eps)
}

/// Hard Dice overlap after thresholding both inputs at 0.5. Two empty masks
/// score 1.
pub fn dice_score(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        let (p, g) = (p >= DICE_THRESHOLD, g >= DICE_THRESHOLD);
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = t(&[1.0, 0.0, 1.0, 1.0]);
        assert!(soft_dice_loss(&g, &g, 1e-5).unwrap().abs() < 1e-12);
        assert_eq!(dice_score(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn zero_prediction() {
        let g = t(&[1.0, 0.0, 1.0, 1.0]);
        let p = t(&[0.0; 4]);
        assert!((soft_dice_loss(&p, &g, 1e-5).unwrap() - 1.0).abs() < 1e-5);
        assert_eq!(dice_score(&p, &g).unwrap(), 0.0);
    }

    #[test]
    fn half_prediction_closed_form() {
        let g = t(&[1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let p = t(&[0.5; 8]);
        let l = soft_dice_loss(&p, &g, 0.0).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hard_dice_examples() {
        assert_eq!(dice_score(&t(&[1.0, 0.0, 0.0]), &t(&[0.0, 1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(dice_score(&t(&[1.0, 1.0, 0.0]), &t(&[0.0, 1.0, 1.0])).unwrap(), 0.5);
        assert_eq!(dice_score(&t(&[0.0; 3]), &t(&[0.0; 3])).unwrap(), 1.0);
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(soft_dice_loss(&t(&[1.5]), &t(&[1.0]), 1e-5).is_err());
        assert!(soft_dice_loss(&t(&[0.5]), &t(&[-1.0]), 1e-5).is_err());
    }
}
