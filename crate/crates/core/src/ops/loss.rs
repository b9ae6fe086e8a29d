//! Fused segmentation losses over logits [n, K, h, w] and integer label
//! maps. Pixel sums accumulate in f64.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f32 = 1e-5;

fn check_logits_targets(logits: &Tensor, targets: &[u32]) -> Result<(usize, usize, usize)> {
    if logits.ndim() != 4 {
        return Err(Error::shape(format!(
            "loss: expected logits [n, k, h, w], got {:?}",
            logits.shape()
        )));
    }
    let (n, k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]);
    let pixels = n * h * w;
    if targets.len() != pixels {
        return Err(Error::shape(format!(
            "loss: {} target pixels for logits {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= k) {
        return Err(Error::data(format!("loss: target class {} >= num_classes {}", bad, k)));
    }
    Ok((k, pixels, h * w))
}

/// Per-pixel softmax probabilities, channel-major like the logits.
fn softmax_pixels(logits: &Tensor, k: usize, hw: usize) -> Vec<f32> {
    let n = logits.shape()[0];
    let src = logits.data();
    let mut probs = vec![0.0f32; src.len()];
    for b in 0..n {
        for s in 0..hw {
            let base = b * k * hw + s;
            let mut mx = f32::NEG_INFINITY;
            for c in 0..k {
                mx = mx.max(src[base + c * hw]);
            }
            let mut denom = 0.0f64;
            for c in 0..k {
                let e = (src[base + c * hw] - mx).exp();
                probs[base + c * hw] = e;
                denom += e as f64;
            }
            let inv = (1.0 / denom) as f32;
            for c in 0..k {
                probs[base + c * hw] *= inv;
            }
        }
    }
    probs
}

/// Mean pixel negative log-likelihood of the target class.
pub fn cross_entropy_mean(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (k, pixels, hw) = check_logits_targets(logits, targets)?;
    let n = logits.shape()[0];
    let src = logits.data();
    let mut total = 0.0f64;
    for b in 0..n {
        for s in 0..hw {
            let base = b * k * hw + s;
            let mut mx = f32::NEG_INFINITY;
            for c in 0..k {
                mx = mx.max(src[base + c * hw]);
            }
            let mut denom = 0.0f64;
            for c in 0..k {
                denom += ((src[base + c * hw] - mx) as f64).exp();
            }
            let t = targets[b * hw + s] as usize;
            total += denom.ln() + mx as f64 - src[base + t * hw] as f64;
        }
    }
    let value = (total / pixels as f64) as f32;

    let pl = logits.clone();
    let tg = targets.to_vec();
    Ok(Tensor::from_op(vec![1], vec![value], &[logits], move |g, store| {
        if pl.requires_grad() {
            let probs = softmax_pixels(&pl, k, hw);
            let scale = g[0] / pixels as f32;
            let mut dx = probs;
            for b in 0..n {
                for s in 0..hw {
                    let t = tg[b * hw + s] as usize;
                    dx[b * k * hw + t * hw + s] -= 1.0;
                }
            }
            for v in dx.iter_mut() {
                *v *= scale;
            }
            store.accumulate(&pl, dx);
        }
    }))
}

/// Soft Dice loss: 1 - mean over classes of (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps),
/// with p the softmax probability and t the one-hot target.
pub fn soft_dice_loss(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (k, _pixels, hw) = check_logits_targets(logits, targets)?;
    let n = logits.shape()[0];
    let probs = softmax_pixels(logits, k, hw);

    let mut inter = vec![0.0f64; k]; // sum p*t per class
    let mut psum = vec![0.0f64; k];
    let mut tsum = vec![0.0f64; k];
    for b in 0..n {
        for s in 0..hw {
            let t = targets[b * hw + s] as usize;
            tsum[t] += 1.0;
            for c in 0..k {
                let p = probs[b * k * hw + c * hw + s] as f64;
                psum[c] += p;
                if c == t {
                    inter[c] += p;
                }
            }
        }
    }
    let eps = DICE_EPS as f64;
    let mut dice_mean = 0.0f64;
    let mut denom = vec![0.0f64; k];
    for c in 0..k {
        denom[c] = psum[c] + tsum[c] + eps;
        dice_mean += (2.0 * inter[c] + eps) / denom[c];
    }
    dice_mean /= k as f64;
    let value = (1.0 - dice_mean) as f32;

    let pl = logits.clone();
    let tg = targets.to_vec();
    Ok(Tensor::from_op(vec![1], vec![value], &[logits], move |g, store| {
        if pl.requires_grad() {
            // dL/dp_c(x) = -(1/K) * (2*t_c(x)*denom_c - (2*inter_c+eps)) / denom_c^2,
            // then through the per-pixel softmax.
            let numer: Vec<f64> = (0..k).map(|c| 2.0 * inter[c] + eps).collect();
            // Per-class gradient terms that do not depend on the pixel.
            let base_term: Vec<f64> =
                (0..k).map(|c| -(1.0 / k as f64) * -numer[c] / (denom[c] * denom[c])).collect();
            let target_term: Vec<f64> =
                (0..k).map(|c| -(1.0 / k as f64) * 2.0 * denom[c] / (denom[c] * denom[c])).collect();
            let mut dx = vec![0.0f32; pl.elem_count()];
            let g0 = g[0] as f64;
            let mut gp = vec![0.0f64; k];
            for b in 0..n {
                for s in 0..hw {
                    let t = tg[b * hw + s] as usize;
                    let base = b * k * hw + s;
                    // gradient w.r.t. probabilities at this pixel
                    for (c, slot) in gp.iter_mut().enumerate() {
                        *slot = base_term[c] + if c == t { target_term[c] } else { 0.0 };
                    }
                    // chain rule through softmax: dz = p * (gp - sum_j gp_j p_j)
                    let mut dot = 0.0f64;
                    for (c, gpc) in gp.iter().enumerate() {
                        dot += gpc * probs[base + c * hw] as f64;
                    }
                    for (c, gpc) in gp.iter().enumerate() {
                        let p = probs[base + c * hw] as f64;
                        dx[base + c * hw] = (g0 * p * (gpc - dot)) as f32;
                    }
                }
            }
            store.accumulate(&pl, dx);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_ce_is_ln_k() {
        let logits = Tensor::new(&[1, 2, 2, 2], vec![0.0; 8]).unwrap();
        let targets = vec![0u32, 1, 0, 1];
        let ce = cross_entropy_mean(&logits, &targets).unwrap();
        assert!((ce.scalar_value().unwrap() - (2.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        // Strongly favor the right class everywhere.
        let mut data = vec![0.0f32; 2 * 4];
        let targets = vec![0u32, 1, 1, 0];
        for (s, &t) in targets.iter().enumerate() {
            data[t as usize * 4 + s] = 50.0;
        }
        let logits = Tensor::new(&[1, 2, 2, 2], data).unwrap();
        let ce = cross_entropy_mean(&logits, &targets).unwrap();
        let dice = soft_dice_loss(&logits, &targets).unwrap();
        assert!(ce.scalar_value().unwrap() < 1e-5);
        assert!(dice.scalar_value().unwrap() < 1e-4);
    }

    #[test]
    fn out_of_range_target_rejected() {
        let logits = Tensor::new(&[1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        assert!(matches!(cross_entropy_mean(&logits, &[2]), Err(Error::Data(_))));
        assert!(matches!(soft_dice_loss(&logits, &[5]), Err(Error::Data(_))));
    }

    #[test]
    fn dice_hand_computed_2x2() {
        // Single-batch 2x2, K=2, logits chosen so p(class1) = sigmoid(1) at
        // every pixel; targets: one pixel of class 1.
        let z0 = 0.0f32;
        let z1 = 1.0f32;
        let logits = Tensor::new(&[1, 2, 2, 2], vec![z0; 4].into_iter().chain(vec![z1; 4]).collect()).unwrap();
        let targets = vec![0u32, 0, 0, 1];
        let p1 = 1.0 / (1.0 + (-1.0f64).exp());
        let p0 = 1.0 - p1;
        let eps = DICE_EPS as f64;
        let dice0 = (2.0 * (3.0 * p0) + eps) / (4.0 * p0 + 3.0 + eps);
        let dice1 = (2.0 * p1 + eps) / (4.0 * p1 + 1.0 + eps);
        let expect = 1.0 - 0.5 * (dice0 + dice1);
        let got = soft_dice_loss(&logits, &targets).unwrap().scalar_value().unwrap();
        assert!((got - expect as f32).abs() < 1e-6, "{got} vs {expect}");
    }
}
