//! Elementwise operations: add, scalar scale, activations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elementwise sum of two same-shape tensors (the residual connection).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "add: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], move |g, store| {
        if pa.requires_grad() {
            store.accumulate(&pa, g.to_vec());
        }
        if pb.requires_grad() {
            store.accumulate(&pb, g.to_vec());
        }
    }))
}

/// Multiply by a compile-time constant scalar.
pub fn scale(a: &Tensor, s: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x * s).collect();
    let pa = a.clone();
    Tensor::from_op(a.shape().to_vec(), data, &[a], move |g, store| {
        if pa.requires_grad() {
            store.accumulate(&pa, g.iter().map(|v| v * s).collect());
        }
    })
}

/// relu(x) = max(0, x)
pub fn relu(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    let pa = a.clone();
    Tensor::from_op(a.shape().to_vec(), data, &[a], move |g, store| {
        if pa.requires_grad() {
            let dx = pa
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                .collect();
            store.accumulate(&pa, dx);
        }
    })
}

/// hardswish(x) = x * clamp(x + 3, 0, 6) / 6
pub fn hardswish(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a
        .data()
        .iter()
        .map(|&x| x * (x + 3.0).clamp(0.0, 6.0) / 6.0)
        .collect();
    let pa = a.clone();
    Tensor::from_op(a.shape().to_vec(), data, &[a], move |g, store| {
        if pa.requires_grad() {
            let dx = pa
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gy)| {
                    let d = if x <= -3.0 {
                        0.0
                    } else if x >= 3.0 {
                        1.0
                    } else {
                        (2.0 * x + 3.0) / 6.0
                    };
                    gy * d
                })
                .collect();
            store.accumulate(&pa, dx);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn hardswish_values() {
        let x = Tensor::new(&[4], vec![-3.0, 3.0, 1.0, -4.0]).unwrap();
        let y = hardswish(&x);
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 3.0);
        assert!((y.data()[2] - 4.0 / 6.0).abs() < 1e-6);
        assert_eq!(y.data()[3], 0.0);
    }
}
