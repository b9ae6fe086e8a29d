//! Bilinear resize with the align-corners=false convention.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-axis sample positions: source index pair and interpolation weight.
fn axis_map(out_n: usize, in_n: usize) -> Vec<(usize, usize, f32)> {
    let ratio = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let src = src.max(0.0);
            let i0 = (src.floor() as usize).min(in_n - 1);
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, f: f32) -> f32 {
    // a + f*(b-a): exact for f == 0 and for a == b (constants survive).
    a + f * (b - a)
}

/// Resize x[n, c, h, w] to [n, c, out_h, out_w].
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::shape(format!("bilinear_resize: expected 4-D input, got {:?}", x.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize: output dims must be >= 1"));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ymap = axis_map(out_h, h);
    let xmap = axis_map(out_w, w);

    let src = x.data();
    let mut data = vec![0.0f32; n * c * out_h * out_w];
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let out_plane = &mut data[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
            let r0 = &plane[y0 * w..y0 * w + w];
            let r1 = &plane[y1 * w..y1 * w + w];
            let orow = &mut out_plane[oy * out_w..(oy + 1) * out_w];
            for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                let top = lerp(r0[x0], r0[x1], fx);
                let bot = lerp(r1[x0], r1[x1], fx);
                orow[ox] = lerp(top, bot, fy);
            }
        }
    }

    let px = x.clone();
    let ym = ymap.clone();
    let xm = xmap.clone();
    Ok(Tensor::from_op(vec![n, c, out_h, out_w], data, &[x], move |g, store| {
        if px.requires_grad() {
            let mut dx = vec![0.0f32; px.elem_count()];
            for p in 0..n * c {
                let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dplane = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ym.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xm.iter().enumerate() {
                        let gv = gp[oy * out_w + ox];
                        dplane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dplane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        dplane[y1 * w + x0] += gv * fy * (1.0 - fx);
                        dplane[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            store.accumulate(&px, dx);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_bit_exact() {
        let x = Tensor::new(&[1, 1, 3, 4], (0..12).map(|i| (i as f32).sin()).collect()).unwrap();
        let y = bilinear_resize(&x, 3, 4).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn constants_survive_any_size() {
        let x = Tensor::new(&[1, 2, 2, 2], vec![0.37; 8]).unwrap();
        for (oh, ow) in [(1, 1), (3, 5), (7, 2), (14, 14)] {
            let y = bilinear_resize(&x, oh, ow).unwrap();
            for &v in y.data() {
                assert_eq!(v, 0.37);
            }
        }
    }

    #[test]
    fn two_by_two_upsample_matches_reference_loop() {
        // Direct scalar evaluation of the align-corners=false formula.
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let xin = [[1.0f32, 2.0], [3.0, 4.0]];
        for oy in 0..4 {
            for ox in 0..4 {
                let sy = ((oy as f64 + 0.5) * 0.5 - 0.5).max(0.0);
                let sx = ((ox as f64 + 0.5) * 0.5 - 0.5).max(0.0);
                let y0 = (sy.floor() as usize).min(1);
                let x0 = (sx.floor() as usize).min(1);
                let y1 = (y0 + 1).min(1);
                let x1 = (x0 + 1).min(1);
                let fy = (sy - y0 as f64) as f32;
                let fx = (sx - x0 as f64) as f32;
                let expect = (1.0 - fy) * ((1.0 - fx) * xin[y0][x0] + fx * xin[y0][x1])
                    + fy * ((1.0 - fx) * xin[y1][x0] + fx * xin[y1][x1]);
                let got = y.data()[oy * 4 + ox];
                assert!((got - expect).abs() < 1e-6, "({oy},{ox}): {got} vs {expect}");
            }
        }
        // Spot-check corners: clamped sampling reproduces corner values.
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[3], 2.0);
        assert_eq!(y.data()[12], 3.0);
        assert_eq!(y.data()[15], 4.0);
    }

    #[test]
    fn non_integer_ratio_4_to_14() {
        let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(|i| i as f32).collect()).unwrap();
        let y = bilinear_resize(&x, 14, 14).unwrap();
        assert_eq!(y.shape(), &[1, 1, 14, 14]);
        assert!(y.is_finite());
    }
}
