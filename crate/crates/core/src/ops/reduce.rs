//! Full reductions. Sums accumulate in f64 to keep scalar outputs stable.

use crate::tensor::Tensor;

pub fn sum_all(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().map(|&v| v as f64).sum();
    let pa = a.clone();
    Tensor::from_op(vec![1], vec![s as f32], &[a], move |g, store| {
        if pa.requires_grad() {
            store.accumulate(&pa, vec![g[0]; pa.elem_count()]);
        }
    })
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.elem_count().max(1);
    let s: f64 = a.data().iter().map(|&v| v as f64).sum();
    let pa = a.clone();
    Tensor::from_op(vec![1], vec![(s / n as f64) as f32], &[a], move |g, store| {
        if pa.requires_grad() {
            let gv = g[0] / n as f32;
            store.accumulate(&pa, vec![gv; pa.elem_count()]);
        }
    })
}
