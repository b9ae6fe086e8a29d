//! Dense f32 matrix kernels.
//!
//! One well-tested multiply-accumulate inner loop serves convolution (via
//! im2col), linear layers and attention. All kernels write disjoint output
//! rows and keep a fixed per-element reduction order, so results are
//! bit-identical for a given input regardless of thread count.

use rayon::prelude::*;

/// Work threshold (in multiply-accumulates) below which kernels stay serial.
const PAR_THRESHOLD: usize = 1 << 18;

/// c[m,n] += a[m,k] * b[k,n]
pub fn mm_nn_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [f32], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in ci.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (dot products of contiguous rows)
pub fn mm_nt_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [f32], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cj) in ci.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *cj += s;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
pub fn mm_tn_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [f32], i: usize| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in ci.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// Row-major transpose of a [rows, cols] matrix.
pub fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        ConvGeom { c_in, h, w, k, stride, pad, out_h, out_w }
    }
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Fill `cols` ([patch_len, len]) with the im2col patches for output
/// positions `[start, start+len)` of one image `x` ([c_in, h, w]).
pub fn im2col_tile(x: &[f32], g: &ConvGeom, start: usize, len: usize, cols: &mut [f32]) {
    debug_assert_eq!(cols.len(), g.patch_len() * len);
    let (k, stride, pad) = (g.k, g.stride, g.pad);
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * len..(row + 1) * len];
                for (t, d) in dst.iter_mut().enumerate() {
                    let pos = start + t;
                    let oy = pos / g.out_w;
                    let ox = pos % g.out_w;
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    *d = if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                        plane[iy as usize * g.w + ix as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Scatter-add the adjoint of `im2col_tile`: `cols` ([patch_len, len]) back
/// into `dx` ([c_in, h, w]).
pub fn col2im_tile_acc(dx: &mut [f32], g: &ConvGeom, start: usize, len: usize, cols: &[f32]) {
    debug_assert_eq!(cols.len(), g.patch_len() * len);
    let (k, stride, pad) = (g.k, g.stride, g.pad);
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * len..(row + 1) * len];
                for (t, &v) in src.iter().enumerate() {
                    let pos = start + t;
                    let oy = pos / g.out_w;
                    let ox = pos % g.out_w;
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                        plane[iy as usize * g.w + ix as usize] += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_nn_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let mut c = vec![0.0; m * n];
        mm_nn_acc(&mut c, &a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j] - s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let (m, k, n) = (4, 3, 6);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.7).cos()).collect();
        let b: Vec<f32> = (0..n * k).map(|i| (i as f32 * 0.3).sin()).collect();
        let mut c1 = vec![0.0; m * n];
        mm_nt_acc(&mut c1, &a, &b, m, k, n);
        let bt = transpose(&b, n, k);
        let mut c2 = vec![0.0; m * n];
        mm_nn_acc(&mut c2, &a, &bt, m, k, n);
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-5);
        }

        let a2: Vec<f32> = (0..k * m).map(|i| (i as f32 * 0.2).sin()).collect();
        let b2: Vec<f32> = (0..k * n).map(|i| i as f32 * 0.1).collect();
        let mut c3 = vec![0.0; m * n];
        mm_tn_acc(&mut c3, &a2, &b2, m, k, n);
        let at = transpose(&a2, k, m);
        let mut c4 = vec![0.0; m * n];
        mm_nn_acc(&mut c4, &at, &b2, m, k, n);
        for (x, y) in c3.iter().zip(&c4) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn im2col_roundtrip_counts_contributions() {
        // col2im of an all-ones cols tensor counts how many patches touch
        // each input pixel; verify against direct enumeration.
        let g = ConvGeom::new(1, 4, 4, 3, 2, 1);
        let total = g.out_len();
        let cols = vec![1.0f32; g.patch_len() * total];
        let mut dx = vec![0.0f32; 16];
        col2im_tile_acc(&mut dx, &g, 0, total, &cols);
        let mut expect = vec![0.0f32; 16];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if iy >= 0 && iy < 4 && ix >= 0 && ix < 4 {
                            expect[iy as usize * 4 + ix as usize] += 1.0;
                        }
                    }
                }
            }
        }
        assert_eq!(dx, expect);
    }
}
