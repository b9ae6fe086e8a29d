//! Training objective: equally weighted cross-entropy + soft Dice.

use crate::error::Result;
use crate::ops;
use crate::tensor::Tensor;

/// 0.5 * CE + 0.5 * soft-Dice over logits [n, K, h, w] and integer targets
/// (row-major, length n*h*w).
pub fn combined_loss(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let ce = ops::cross_entropy_mean(logits, targets)?;
    let dice = ops::soft_dice_loss(logits, targets)?;
    ops::add(&ops::scale(&ce, 0.5), &ops::scale(&dice, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_k2_gives_half_ln2_plus_dice_term() {
        let logits = Tensor::new(&[1, 2, 2, 2], vec![0.0; 8]).unwrap();
        let targets = vec![0u32, 0, 1, 1];
        let loss = combined_loss(&logits, &targets).unwrap().scalar_value().unwrap();
        // CE term is ln 2; dice with p=0.5 everywhere and balanced targets:
        // per class (2*0.5*2 + eps)/(2 + 2 + eps) = 0.5, so dice loss = 0.5.
        let expect = 0.5 * (2.0f32).ln() + 0.5 * 0.5;
        assert!((loss - expect).abs() < 1e-5, "{loss} vs {expect}");
    }

    #[test]
    fn loss_is_nonnegative() {
        let logits = Tensor::new(&[1, 3, 2, 2], (0..12).map(|i| (i as f32).sin()).collect()).unwrap();
        let targets = vec![2u32, 0, 1, 2];
        let loss = combined_loss(&logits, &targets).unwrap().scalar_value().unwrap();
        assert!(loss >= 0.0);
    }
}
