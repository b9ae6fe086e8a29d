//! Layers: convolution, batch norm, linear, plus parameter initialization.
//!
//! Layers own their parameters as immutable [`Tensor`] values. Batch-norm
//! running statistics sit behind an `RwLock` so eval-mode forwards can share
//! a model across threads; training is single-writer by contract.

use std::sync::RwLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, BnLayout, BnStats};
use crate::tensor::Tensor;

/// Uniform fan-based init on ±sqrt(6 / (fan_in + fan_out)).
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::param(shape, data)
}

pub fn zeros_param(shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![0.0; n])
}

pub fn ones_param(shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![1.0; n])
}

/// 2D convolution layer.
pub struct Conv2dLayer {
    pub weight: Tensor, // [c_out, c_in, k, k]
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = uniform_init(rng, &[c_out, c_in, k, k], c_in * k * k, c_out * k * k)?;
        let bias = if bias { Some(zeros_param(&[c_out])?) } else { None };
        Ok(Conv2dLayer { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Batch normalization with interior-mutable running statistics.
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RwLock<BnStats>,
    pub eps: f32,
    pub momentum: f32,
    pub layout: BnLayout,
}

impl BatchNormLayer {
    pub fn new(channels: usize, layout: BnLayout) -> Result<Self> {
        Ok(BatchNormLayer {
            gamma: ones_param(&[channels])?,
            beta: zeros_param(&[channels])?,
            running: RwLock::new(BnStats::new(channels)),
            eps: 1e-5,
            momentum: 0.1,
            layout,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        if training {
            let mut stats = self
                .running
                .write()
                .map_err(|_| Error::config("batch_norm: poisoned running-stat lock"))?;
            ops::batch_norm_train(x, &self.gamma, &self.beta, self.layout, self.eps, self.momentum, &mut stats)
        } else {
            let stats = self
                .running
                .read()
                .map_err(|_| Error::config("batch_norm: poisoned running-stat lock"))?;
            ops::batch_norm_eval(x, &self.gamma, &self.beta, self.layout, self.eps, &stats)
        }
    }

    pub fn stats(&self) -> BnStats {
        self.running.read().expect("running-stat lock").clone()
    }

    pub fn set_stats(&self, stats: BnStats) {
        *self.running.write().expect("running-stat lock") = stats;
    }
}

/// Token-wise affine projection.
pub struct LinearLayer {
    pub weight: Tensor, // [d_out, d_in]
    pub bias: Option<Tensor>,
}

impl LinearLayer {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = uniform_init(rng, &[d_out, d_in], d_in, d_out)?;
        let bias = if bias { Some(zeros_param(&[d_out])?) } else { None };
        Ok(LinearLayer { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Elementwise nonlinearity choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Relu,
    Hardswish,
}

impl Act {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Act::Relu => ops::relu(x),
            Act::Hardswish => ops::hardswish(x),
        }
    }
}

/// Convolution + batch norm + activation, the basic block of both the stem
/// and the decoder.
pub struct ConvBnAct {
    pub conv: Conv2dLayer,
    pub bn: BatchNormLayer,
    pub act: Act,
}

impl ConvBnAct {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        act: Act,
    ) -> Result<Self> {
        Ok(ConvBnAct {
            // bias folded into the following batch norm
            conv: Conv2dLayer::new(rng, c_in, c_out, k, stride, padding, false)?,
            bn: BatchNormLayer::new(c_out, BnLayout::Nchw)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y, training)?;
        Ok(self.act.apply(&y))
    }
}

/// Named traversal of a module tree's learnable parameters and batch-norm
/// layers (whose running statistics are persisted but not learned).
pub trait ParamModule {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);
    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNormLayer)>);
}

impl ParamModule for Conv2dLayer {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
    fn collect_bn<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a BatchNormLayer)>) {}
}

impl ParamModule for LinearLayer {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
    fn collect_bn<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a BatchNormLayer)>) {}
}

impl ParamModule for BatchNormLayer {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNormLayer)>) {
        out.push((prefix.to_string(), self));
    }
}

impl ParamModule for ConvBnAct {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.bn.collect_params(&format!("{prefix}.bn"), out);
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv.collect_params_mut(&format!("{prefix}.conv"), out);
        self.bn.collect_params_mut(&format!("{prefix}.bn"), out);
    }
    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNormLayer)>) {
        self.bn.collect_bn(&format!("{prefix}.bn"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = uniform_init(&mut r1, &[4, 5], 5, 4).unwrap();
        let b = uniform_init(&mut r2, &[4, 5], 5, 4).unwrap();
        assert_eq!(a.data(), b.data());
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn eval_mode_is_idempotent_affine_with_unit_stats() {
        // gamma=1, beta=0, running stats (0,1): y = x / sqrt(1+eps); applying
        // twice differs from once only by the eps correction.
        let bn = BatchNormLayer::new(1, BnLayout::Nchw).unwrap();
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y1 = bn.forward(&x, false).unwrap();
        let y2 = bn.forward(&y1, false).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
