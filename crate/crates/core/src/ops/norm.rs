//! Batch normalization over feature maps ([n, c, h, w]) and token
//! sequences ([n, t, c]).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where the channel axis lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnLayout {
    /// [n, c, h, w]; statistics over (n, h, w).
    Nchw,
    /// [..., c]; statistics over all leading dims.
    ChannelsLast,
}

/// Running statistics; updated by training-mode forward passes.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

fn check_shapes(x: &Tensor, gamma: &Tensor, beta: &Tensor, layout: BnLayout) -> Result<usize> {
    let c = match layout {
        BnLayout::Nchw => {
            if x.ndim() != 4 {
                return Err(Error::shape(format!("batch_norm: expected 4-D input, got {:?}", x.shape())));
            }
            x.shape()[1]
        }
        BnLayout::ChannelsLast => *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("batch_norm: empty shape"))?,
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::config(format!(
            "batch_norm: gamma/beta shapes {:?}/{:?} do not match {} channels",
            gamma.shape(),
            beta.shape(),
            c
        )));
    }
    Ok(c)
}

/// Visit every element of channel `c` in order; index math per layout.
#[inline]
fn for_each_channel_index(shape: &[usize], layout: BnLayout, c: usize, mut f: impl FnMut(usize)) {
    match layout {
        BnLayout::Nchw => {
            let (n, ch, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            for b in 0..n {
                let base = (b * ch + c) * hw;
                for s in 0..hw {
                    f(base + s);
                }
            }
        }
        BnLayout::ChannelsLast => {
            let ch = *shape.last().unwrap();
            let rows: usize = shape.iter().product::<usize>() / ch;
            for r in 0..rows {
                f(r * ch + c);
            }
        }
    }
}

/// Training-mode batch norm: normalizes with batch statistics and updates
/// `running` in place (momentum update; unbiased variance stored).
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    layout: BnLayout,
    eps: f32,
    momentum: f32,
    running: &mut BnStats,
) -> Result<Tensor> {
    let c = check_shapes(x, gamma, beta, layout)?;
    let reduce_n = x.elem_count() / c;
    if reduce_n < 2 {
        return Err(Error::config(format!(
            "batch_norm: training mode needs at least 2 samples per channel, got {}",
            reduce_n
        )));
    }
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::config("batch_norm: running stats channel mismatch"));
    }

    let src = x.data();
    let shape = x.shape().to_vec();
    let mut mean = vec![0.0f32; c];
    let mut invstd = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for_each_channel_index(&shape, layout, ch, |i| s += src[i] as f64);
        let m = s / reduce_n as f64;
        let mut v = 0.0f64;
        for_each_channel_index(&shape, layout, ch, |i| {
            let d = src[i] as f64 - m;
            v += d * d;
        });
        let var_biased = v / reduce_n as f64;
        mean[ch] = m as f32;
        invstd[ch] = (1.0 / (var_biased + eps as f64).sqrt()) as f32;
        let var_unbiased = v / (reduce_n - 1) as f64;
        running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * m as f32;
        running.var[ch] = (1.0 - momentum) * running.var[ch] + momentum * var_unbiased as f32;
    }

    let mut data = vec![0.0f32; src.len()];
    for ch in 0..c {
        let (m, is) = (mean[ch], invstd[ch]);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for_each_channel_index(&shape, layout, ch, |i| {
            data[i] = (src[i] - m) * is * g + b;
        });
    }

    let px = x.clone();
    let pg = gamma.clone();
    let pbeta = beta.clone();
    Ok(Tensor::from_op(shape.clone(), data, &[x, gamma, beta], move |gy, store| {
        let src = px.data();
        let n = reduce_n as f64;
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        let mut dx = if px.requires_grad() { vec![0.0f32; src.len()] } else { Vec::new() };
        for ch in 0..c {
            let (m, is) = (mean[ch], invstd[ch]);
            let mut s1 = 0.0f64; // sum dy
            let mut s2 = 0.0f64; // sum dy * xhat
            for_each_channel_index(&shape, layout, ch, |i| {
                let xh = (src[i] - m) * is;
                s1 += gy[i] as f64;
                s2 += (gy[i] * xh) as f64;
            });
            dbeta[ch] = s1 as f32;
            dgamma[ch] = s2 as f32;
            if px.requires_grad() {
                let gch = pg.data()[ch] as f64;
                let isd = is as f64;
                for_each_channel_index(&shape, layout, ch, |i| {
                    let xh = ((src[i] - m) * is) as f64;
                    let d = gch * isd * (gy[i] as f64 - s1 / n - xh * s2 / n);
                    dx[i] = d as f32;
                });
            }
        }
        if px.requires_grad() {
            store.accumulate(&px, dx);
        }
        if pg.requires_grad() {
            store.accumulate(&pg, dgamma);
        }
        if pbeta.requires_grad() {
            store.accumulate(&pbeta, dbeta);
        }
    }))
}

/// Eval-mode batch norm: a fixed affine map built from running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    layout: BnLayout,
    eps: f32,
    running: &BnStats,
) -> Result<Tensor> {
    let c = check_shapes(x, gamma, beta, layout)?;
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::config("batch_norm: running stats channel mismatch"));
    }
    let mut scale = vec![0.0f32; c];
    let mut shift = vec![0.0f32; c];
    for ch in 0..c {
        let is = 1.0 / (running.var[ch] + eps).sqrt();
        scale[ch] = gamma.data()[ch] * is;
        shift[ch] = beta.data()[ch] - running.mean[ch] * scale[ch];
    }
    let shape = x.shape().to_vec();
    let src = x.data();
    let mut data = vec![0.0f32; src.len()];
    for ch in 0..c {
        let (sc, sh) = (scale[ch], shift[ch]);
        for_each_channel_index(&shape, layout, ch, |i| data[i] = src[i] * sc + sh);
    }

    let px = x.clone();
    let pg = gamma.clone();
    let pbeta = beta.clone();
    let rmean = running.mean.clone();
    let rvar = running.var.clone();
    Ok(Tensor::from_op(shape.clone(), data, &[x, gamma, beta], move |gy, store| {
        let src = px.data();
        if px.requires_grad() {
            let mut dx = vec![0.0f32; src.len()];
            for ch in 0..c {
                let sc = pg.data()[ch] / (rvar[ch] + eps).sqrt();
                for_each_channel_index(&shape, layout, ch, |i| dx[i] = gy[i] * sc);
            }
            store.accumulate(&px, dx);
        }
        if pg.requires_grad() || pbeta.requires_grad() {
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for ch in 0..c {
                let is = 1.0 / (rvar[ch] + eps).sqrt();
                let m = rmean[ch];
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for_each_channel_index(&shape, layout, ch, |i| {
                    s1 += gy[i] as f64;
                    s2 += (gy[i] * (src[i] - m) * is) as f64;
                });
                dbeta[ch] = s1 as f32;
                dgamma[ch] = s2 as f32;
            }
            if pg.requires_grad() {
                store.accumulate(&pg, dgamma);
            }
            if pbeta.requires_grad() {
                store.accumulate(&pbeta, dbeta);
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_two_point_channel() {
        // Channel values {1, 3}: mean 2, biased var 1 -> roughly {-1, +1}.
        let x = Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let gamma = Tensor::new(&[1], vec![1.0]).unwrap();
        let beta = Tensor::new(&[1], vec![0.0]).unwrap();
        let mut rs = BnStats::new(1);
        let y = batch_norm_train(&x, &gamma, &beta, BnLayout::Nchw, 1e-5, 0.1, &mut rs).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
        // Running stats moved toward batch stats (unbiased var = 2).
        assert!((rs.mean[0] - 0.2).abs() < 1e-6);
        assert!((rs.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-5);
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Tensor::new(&[1, 2, 1, 2], vec![5.0, -3.0, 2.0, 9.0]).unwrap();
        let gamma = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let beta = Tensor::new(&[2], vec![0.5, -0.5]).unwrap();
        let mut rs = BnStats::new(2);
        let y = batch_norm_train(&x, &gamma, &beta, BnLayout::Nchw, 1e-5, 0.1, &mut rs).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, -0.5, -0.5]);
    }

    #[test]
    fn already_normalized_stays_put() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let gamma = Tensor::new(&[1], vec![1.0]).unwrap();
        let beta = Tensor::new(&[1], vec![0.0]).unwrap();
        let mut rs = BnStats::new(1);
        let y = batch_norm_train(&x, &gamma, &beta, BnLayout::Nchw, 1e-5, 0.1, &mut rs).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_depends_only_on_running_stats() {
        let gamma = Tensor::new(&[1], vec![2.0]).unwrap();
        let beta = Tensor::new(&[1], vec![1.0]).unwrap();
        let rs = BnStats { mean: vec![1.0], var: vec![4.0] };
        let x = Tensor::new(&[1, 1, 1, 2], vec![3.0, -1.0]).unwrap();
        let y = batch_norm_eval(&x, &gamma, &beta, BnLayout::Nchw, 0.0, &rs).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-6); // 2*(3-1)/2+1
        assert!((y.data()[1] + 1.0).abs() < 1e-6); // 2*(-1-1)/2+1
    }

    #[test]
    fn tokens_layout_reduces_over_rows() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap();
        let gamma = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let mut rs = BnStats::new(2);
        let y =
            batch_norm_train(&x, &gamma, &beta, BnLayout::ChannelsLast, 1e-5, 0.1, &mut rs).unwrap();
        // channel 0: {1, 3}; channel 1: {10, 30}
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[2] - 1.0).abs() < 1e-4);
        assert!((y.data()[1] + 1.0).abs() < 1e-4);
        assert!((y.data()[3] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn training_needs_two_samples() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let gamma = Tensor::new(&[1], vec![1.0]).unwrap();
        let beta = Tensor::new(&[1], vec![0.0]).unwrap();
        let mut rs = BnStats::new(1);
        assert!(batch_norm_train(&x, &gamma, &beta, BnLayout::Nchw, 1e-5, 0.1, &mut rs).is_err());
    }
}
