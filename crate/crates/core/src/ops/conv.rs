//! 2D convolution via explicit im2col + matrix multiply.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Columns per im2col tile; bounds scratch memory and keeps the matmul
/// operands cache-resident.
const TILE: usize = 4096;

/// conv2d: x[n, c_in, h, w] * w[c_out, c_in, k, k] (+ bias[c_out]).
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(Error::shape(format!(
            "conv2d: expected 4-D input and weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, wc_in, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if k != k2 {
        return Err(Error::config("conv2d: only square kernels supported"));
    }
    if wc_in != c_in {
        return Err(Error::config(format!(
            "conv2d: input has {} channels but weight expects {}",
            c_in, wc_in
        )));
    }
    if stride == 0 {
        return Err(Error::config("conv2d: stride must be >= 1"));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::shape(format!(
            "conv2d: kernel {} does not fit input {}x{} with padding {}",
            k, h, wd, pad
        )));
    }
    if let Some(bias) = b {
        if bias.shape() != [c_out] {
            return Err(Error::config(format!(
                "conv2d: bias shape {:?} expected [{}]",
                bias.shape(),
                c_out
            )));
        }
    }

    let g = ConvGeom::new(c_in, h, wd, k, stride, pad);
    let (oh, ow) = (g.out_h, g.out_w);
    let ohw = g.out_len();
    let pl = g.patch_len();

    let mut out = vec![0.0f32; n * c_out * ohw];
    let mut cols = vec![0.0f32; pl * TILE.min(ohw)];
    let mut tmp = vec![0.0f32; c_out * TILE.min(ohw)];
    for s in 0..n {
        let xs = &x.data()[s * c_in * h * wd..(s + 1) * c_in * h * wd];
        let os = &mut out[s * c_out * ohw..(s + 1) * c_out * ohw];
        let mut start = 0usize;
        while start < ohw {
            let len = TILE.min(ohw - start);
            let cslice = &mut cols[..pl * len];
            kernels::im2col_tile(xs, &g, start, len, cslice);
            let tslice = &mut tmp[..c_out * len];
            tslice.fill(0.0);
            kernels::mm_nn_acc(tslice, w.data(), cslice, c_out, pl, len);
            for co in 0..c_out {
                os[co * ohw + start..co * ohw + start + len]
                    .copy_from_slice(&tslice[co * len..(co + 1) * len]);
            }
            start += len;
        }
    }
    if let Some(bias) = b {
        for s in 0..n {
            for co in 0..c_out {
                let bv = bias.data()[co];
                let off = (s * c_out + co) * ohw;
                for v in &mut out[off..off + ohw] {
                    *v += bv;
                }
            }
        }
    }

    let px = x.clone();
    let pw = w.clone();
    let pb = b.cloned();
    let mut parents: Vec<&Tensor> = vec![x, w];
    if let Some(bias) = b {
        parents.push(bias);
    }
    Ok(Tensor::from_op(vec![n, c_out, oh, ow], out, &parents, move |gy, store| {
        let need_x = px.requires_grad();
        let need_w = pw.requires_grad();
        let need_b = pb.as_ref().map(|t| t.requires_grad()).unwrap_or(false);

        let mut dx = if need_x { vec![0.0f32; px.elem_count()] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0f32; pw.elem_count()] } else { Vec::new() };
        // im2col is recomputed tile by tile rather than saved from the
        // forward pass; it is cheap relative to the matmuls.
        let wt = if need_x { kernels::transpose(pw.data(), c_out, pl) } else { Vec::new() };
        let mut cols = vec![0.0f32; pl * TILE.min(ohw)];
        let mut gtile = vec![0.0f32; c_out * TILE.min(ohw)];
        let mut dcols = vec![0.0f32; pl * TILE.min(ohw)];
        for s in 0..n {
            let xs = &px.data()[s * c_in * h * wd..(s + 1) * c_in * h * wd];
            let gs = &gy[s * c_out * ohw..(s + 1) * c_out * ohw];
            let mut start = 0usize;
            while start < ohw {
                let len = TILE.min(ohw - start);
                let gt = &mut gtile[..c_out * len];
                for co in 0..c_out {
                    gt[co * len..(co + 1) * len]
                        .copy_from_slice(&gs[co * ohw + start..co * ohw + start + len]);
                }
                if need_w {
                    let cslice = &mut cols[..pl * len];
                    kernels::im2col_tile(xs, &g, start, len, cslice);
                    // dw[c_out, pl] += g_tile[c_out, len] * cols[pl, len]^T
                    kernels::mm_nt_acc(&mut dw, gt, cslice, c_out, len, pl);
                }
                if need_x {
                    let dc = &mut dcols[..pl * len];
                    dc.fill(0.0);
                    // dcols[pl, len] = w^T[pl, c_out] * g_tile[c_out, len]
                    kernels::mm_nn_acc(dc, &wt, gt, pl, c_out, len);
                    let dxs = &mut dx[s * c_in * h * wd..(s + 1) * c_in * h * wd];
                    kernels::col2im_tile_acc(dxs, &g, start, len, dc);
                }
                start += len;
            }
        }
        if need_x {
            store.accumulate(&px, dx);
        }
        if need_w {
            store.accumulate(&pw, dw);
        }
        if need_b {
            let bias = pb.as_ref().unwrap();
            let mut db = vec![0.0f32; c_out];
            for s in 0..n {
                for (co, acc) in db.iter_mut().enumerate() {
                    let off = (s * c_out + co) * ohw;
                    let mut sum = 0.0f32;
                    for &v in &gy[off..off + ohw] {
                        sum += v;
                    }
                    *acc += sum;
                }
            }
            store.accumulate(bias, db);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::new(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let w = Tensor::new(&[2, 1, 3, 3], vec![0.7; 18]).unwrap();
        let b = Tensor::new(&[2], vec![1.5, -2.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        for i in 0..9 {
            assert_eq!(y.data()[i], 1.5);
            assert_eq!(y.data()[9 + i], -2.0);
        }
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        let expect: Vec<f32> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn strided_overlap_counts() {
        // 4x4 ones, k=3, stride 2, pad 1, all-ones weight: each output counts
        // the in-bounds taps of its window: [[4, 6], [6, 9]].
        let x = Tensor::new(&[1, 1, 4, 4], vec![1.0; 16]).unwrap();
        let w = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 6.0, 6.0, 9.0]);
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = Tensor::new(&[1, 2, 4, 4], vec![0.0; 32]).unwrap();
        let w = Tensor::new(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
        assert!(matches!(conv2d(&x, &w, None, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_follows_stride_formula() {
        let x = Tensor::new(&[2, 3, 11, 7], vec![0.5; 2 * 3 * 77]).unwrap();
        let w = Tensor::new(&[4, 3, 3, 3], vec![0.1; 4 * 27]).unwrap();
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 6, 4]);
    }
}
