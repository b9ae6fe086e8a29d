//! Matrix products: plain 2D matmul, token-wise linear projection and
//! batched matmul for attention.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(format!(
            "matmul: incompatible shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut data = vec![0.0f32; m * n];
    kernels::mm_nn_acc(&mut data, a.data(), b.data(), m, k, n);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(vec![m, n], data, &[a, b], move |g, store| {
        if pa.requires_grad() {
            let mut da = vec![0.0f32; m * k];
            kernels::mm_nt_acc(&mut da, g, pb.data(), m, n, k);
            store.accumulate(&pa, da);
        }
        if pb.requires_grad() {
            let mut db = vec![0.0f32; k * n];
            kernels::mm_tn_acc(&mut db, pa.data(), g, k, m, n);
            store.accumulate(&pb, db);
        }
    }))
}

/// Token-wise affine map: x[..., d_in] * w[d_out, d_in]^T + b.
///
/// Leading dimensions are flattened into rows; the token count is preserved.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.ndim() != 2 {
        return Err(Error::shape("linear: weight must be 2-D [d_out, d_in]"));
    }
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let last = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("linear: input must have at least 1 dim"))?;
    if last != d_in {
        return Err(Error::config(format!(
            "linear: input width {} does not match weight d_in {}",
            last, d_in
        )));
    }
    if let Some(bias) = b {
        if bias.shape() != [d_out] {
            return Err(Error::config(format!(
                "linear: bias shape {:?} expected [{}]",
                bias.shape(),
                d_out
            )));
        }
    }
    let rows = x.elem_count() / d_in;
    let wt = kernels::transpose(w.data(), d_out, d_in);
    let mut data = vec![0.0f32; rows * d_out];
    kernels::mm_nn_acc(&mut data, x.data(), &wt, rows, d_in, d_out);
    if let Some(bias) = b {
        for r in data.chunks_mut(d_out) {
            for (v, &bv) in r.iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = d_out;

    let px = x.clone();
    let pw = w.clone();
    let pb = b.cloned();
    let mut parents: Vec<&Tensor> = vec![x, w];
    if let Some(bias) = b {
        parents.push(bias);
    }
    Ok(Tensor::from_op(out_shape, data, &parents, move |g, store| {
        if px.requires_grad() {
            // dx = g * w
            let mut dx = vec![0.0f32; rows * d_in];
            kernels::mm_nn_acc(&mut dx, g, pw.data(), rows, d_out, d_in);
            store.accumulate(&px, dx);
        }
        if pw.requires_grad() {
            // dw = g^T * x
            let mut dw = vec![0.0f32; d_out * d_in];
            kernels::mm_tn_acc(&mut dw, g, px.data(), d_out, rows, d_in);
            store.accumulate(&pw, dw);
        }
        if let Some(bias) = &pb {
            if bias.requires_grad() {
                let mut db = vec![0.0f32; d_out];
                for r in g.chunks(d_out) {
                    for (s, &gv) in db.iter_mut().zip(r) {
                        *s += gv;
                    }
                }
                store.accumulate(bias, db);
            }
        }
    }))
}

/// Batched matmul over identical leading dims.
///
/// `a`: [batch.., m, k]; `b`: [batch.., k, n] (or [batch.., n, k] when
/// `trans_b`). Returns [batch.., m, n].
pub fn bmm(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let nd = a.ndim();
    if nd < 2 || b.ndim() != nd {
        return Err(Error::shape("bmm: inputs must have equal rank >= 2"));
    }
    if a.shape()[..nd - 2] != b.shape()[..nd - 2] {
        return Err(Error::shape(format!(
            "bmm: batch dims differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let m = a.shape()[nd - 2];
    let k = a.shape()[nd - 1];
    let (kb, n) = if trans_b {
        (b.shape()[nd - 1], b.shape()[nd - 2])
    } else {
        (b.shape()[nd - 2], b.shape()[nd - 1])
    };
    if kb != k {
        return Err(Error::shape(format!(
            "bmm: inner dims differ ({} vs {}), shapes {:?} x {:?} trans_b={}",
            k, kb, a.shape(), b.shape(), trans_b
        )));
    }
    let batch: usize = a.shape()[..nd - 2].iter().product();
    let mut data = vec![0.0f32; batch * m * n];
    for s in 0..batch {
        let asl = &a.data()[s * m * k..(s + 1) * m * k];
        let bsl = &b.data()[s * k * n..(s + 1) * k * n];
        let csl = &mut data[s * m * n..(s + 1) * m * n];
        if trans_b {
            kernels::mm_nt_acc(csl, asl, bsl, m, k, n);
        } else {
            kernels::mm_nn_acc(csl, asl, bsl, m, k, n);
        }
    }
    let mut out_shape = a.shape()[..nd - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);

    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(out_shape, data, &[a, b], move |g, store| {
        if pa.requires_grad() {
            let mut da = vec![0.0f32; pa.elem_count()];
            for s in 0..batch {
                let gsl = &g[s * m * n..(s + 1) * m * n];
                let bsl = &pb.data()[s * k * n..(s + 1) * k * n];
                let dsl = &mut da[s * m * k..(s + 1) * m * k];
                if trans_b {
                    // c = a b^T  =>  da = g b
                    kernels::mm_nn_acc(dsl, gsl, bsl, m, n, k);
                } else {
                    // c = a b  =>  da = g b^T
                    kernels::mm_nt_acc(dsl, gsl, bsl, m, n, k);
                }
            }
            store.accumulate(&pa, da);
        }
        if pb.requires_grad() {
            let mut db = vec![0.0f32; pb.elem_count()];
            for s in 0..batch {
                let gsl = &g[s * m * n..(s + 1) * m * n];
                let asl = &pa.data()[s * m * k..(s + 1) * m * k];
                let dsl = &mut db[s * k * n..(s + 1) * k * n];
                if trans_b {
                    // c = a b^T  =>  db = g^T a
                    kernels::mm_tn_acc(dsl, gsl, asl, n, m, k);
                } else {
                    // c = a b  =>  db = a^T g
                    kernels::mm_tn_acc(dsl, asl, gsl, k, m, n);
                }
            }
            store.accumulate(&pb, db);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::new(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::new(&[2], vec![10.0, -10.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[1.0 - 3.0 + 10.0, 3.0 - 10.0, 4.0 - 6.0 + 10.0, 7.5 - 10.0]);
    }

    #[test]
    fn linear_channel_mismatch_is_config_error() {
        let x = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        let w = Tensor::new(&[2, 4], vec![0.0; 8]).unwrap();
        assert!(matches!(linear(&x, &w, None), Err(crate::error::Error::Config(_))));
    }

    #[test]
    fn bmm_trans_b_matches_plain() {
        let a = Tensor::new(&[2, 2, 3], (0..12).map(|i| i as f32 * 0.25).collect()).unwrap();
        let b = Tensor::new(&[2, 4, 3], (0..24).map(|i| (i as f32 * 0.3).sin()).collect()).unwrap();
        let y = bmm(&a, &b, true).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4]);
        for s in 0..2 {
            for i in 0..2 {
                for j in 0..4 {
                    let mut acc = 0.0f32;
                    for p in 0..3 {
                        acc += a.data()[s * 6 + i * 3 + p] * b.data()[s * 12 + j * 3 + p];
                    }
                    assert!((y.data()[s * 8 + i * 4 + j] - acc).abs() < 1e-5);
                }
            }
        }
    }
}
