//! Shape manipulation: reshape (zero-copy), permute, concat.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != a.elem_count() {
        return Err(Error::shape(format!(
            "reshape: {:?} has {} elements, target {:?} needs {}",
            a.shape(),
            a.elem_count(),
            shape,
            n
        )));
    }
    let pa = a.clone();
    Ok(a.view_op(shape.to_vec(), move |g, store| {
        if pa.requires_grad() {
            store.accumulate(&pa, g.to_vec());
        }
    }))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_copy(src: &[f32], shape: &[usize], dims: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let n = src.len();
    let mut out = vec![0.0f32; n];
    // Walk output positions; map each back to its source index.
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        let mut src_idx = 0usize;
        for (k, &os) in out_strides.iter().enumerate() {
            let coord = rem / os;
            rem %= os;
            src_idx += coord * in_strides[dims[k]];
        }
        *slot = src[src_idx];
    }
    (out_shape, out)
}

/// Reorder axes; `dims` is a permutation of `0..ndim`.
pub fn permute(a: &Tensor, dims: &[usize]) -> Result<Tensor> {
    let nd = a.ndim();
    let mut seen = vec![false; nd];
    if dims.len() != nd || dims.iter().any(|&d| d >= nd || std::mem::replace(&mut seen[d], true)) {
        return Err(Error::shape(format!(
            "permute: {:?} is not a permutation of 0..{}",
            dims, nd
        )));
    }
    let (out_shape, data) = permute_copy(a.data(), a.shape(), dims);
    let pa = a.clone();
    let dims_v = dims.to_vec();
    let shape_v = a.shape().to_vec();
    Ok(Tensor::from_op(out_shape.clone(), data, &[a], move |g, store| {
        if pa.requires_grad() {
            // Adjoint of a permutation is the inverse permutation.
            let mut inv = vec![0usize; dims_v.len()];
            for (i, &d) in dims_v.iter().enumerate() {
                inv[d] = i;
            }
            let gshape: Vec<usize> = dims_v.iter().map(|&d| shape_v[d]).collect();
            let (_, dx) = permute_copy(g, &gshape, &inv);
            store.accumulate(&pa, dx);
        }
    }))
}

/// Concatenate along `axis`. All other dims must match.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat: empty input list"));
    }
    let nd = parts[0].ndim();
    if axis >= nd {
        return Err(Error::shape(format!("concat: axis {} out of range", axis)));
    }
    let mut out_shape = parts[0].shape().to_vec();
    let mut axis_total = 0usize;
    for p in parts {
        if p.ndim() != nd {
            return Err(Error::shape("concat: rank mismatch"));
        }
        for d in 0..nd {
            if d != axis && p.shape()[d] != out_shape[d] {
                return Err(Error::shape(format!(
                    "concat: shape {:?} incompatible with {:?} on axis {}",
                    p.shape(),
                    out_shape,
                    axis
                )));
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = vec![0.0f32; outer * axis_total * inner];
    let mut offset = 0usize;
    for p in parts {
        let pa = p.shape()[axis];
        for o in 0..outer {
            let src = &p.data()[o * pa * inner..(o + 1) * pa * inner];
            let dst_start = (o * axis_total + offset) * inner;
            data[dst_start..dst_start + pa * inner].copy_from_slice(src);
        }
        offset += pa;
    }

    let owned: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
    Ok(Tensor::from_op(out_shape, data, parts, move |g, store| {
        let mut offset = 0usize;
        for p in &owned {
            let pa = p.shape()[axis];
            if p.requires_grad() {
                let mut dp = vec![0.0f32; p.elem_count()];
                for o in 0..outer {
                    let src_start = (o * axis_total + offset) * inner;
                    dp[o * pa * inner..(o + 1) * pa * inner]
                        .copy_from_slice(&g[src_start..src_start + pa * inner]);
                }
                store.accumulate(p, dp);
            }
            offset += pa;
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::new(&[2, 3, 4], (0..24).map(|i| i as f32).collect()).unwrap();
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = permute(&y, &[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn concat_channels() {
        let a = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[1, 1, 2], vec![9.0, 8.0]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 9.0, 8.0]);
    }
}
