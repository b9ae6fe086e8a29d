//! Numerically stabilized softmax along an arbitrary axis.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// softmax(x) along `axis`, stabilized by max subtraction.
pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.ndim() {
        return Err(Error::shape(format!(
            "softmax: axis {} out of range for shape {:?}",
            axis,
            a.shape()
        )));
    }
    let lanes = a.shape()[axis];
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let outer: usize = a.shape()[..axis].iter().product();

    let src = a.data();
    let mut data = vec![0.0f32; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lanes * inner + i;
            let mut mx = f32::NEG_INFINITY;
            for l in 0..lanes {
                mx = mx.max(src[base + l * inner]);
            }
            let mut denom = 0.0f64;
            for l in 0..lanes {
                let e = (src[base + l * inner] - mx).exp();
                data[base + l * inner] = e;
                denom += e as f64;
            }
            let inv = (1.0 / denom) as f32;
            for l in 0..lanes {
                data[base + l * inner] *= inv;
            }
        }
    }

    let pa = a.clone();
    let y = data.clone();
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a], move |g, store| {
        if pa.requires_grad() {
            // dx = y * (g - sum(g * y)) per lane
            let mut dx = vec![0.0f32; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lanes * inner + i;
                    let mut dot = 0.0f64;
                    for l in 0..lanes {
                        let idx = base + l * inner;
                        dot += (g[idx] * y[idx]) as f64;
                    }
                    let dot = dot as f32;
                    for l in 0..lanes {
                        let idx = base + l * inner;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            store.accumulate(&pa, dx);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_on_equal_inputs() {
        let x = Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stabilized_against_large_offsets() {
        let x = Tensor::new(&[2], vec![12.0, 1012.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!(y.is_finite());
        assert!(y.data()[0] < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_two_values() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        let e = std::f32::consts::E;
        assert!((y.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-6);
        assert!((y.data()[1] - e / (1.0 + e)).abs() < 1e-6);
        assert!((y.data()[0] - 0.2689).abs() < 1e-4);
        assert!((y.data()[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn middle_axis() {
        let x = Tensor::new(&[2, 3, 2], (0..12).map(|i| (i % 5) as f32).collect()).unwrap();
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let s: f32 = (0..3).map(|l| y.data()[o * 6 + l * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
