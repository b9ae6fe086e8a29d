//! Token-sequence helpers used by attention: row gathering and the learned
//! per-displacement attention bias.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gather tokens: x[n, t, c] indexed by `idx` -> [n, idx.len(), c].
pub fn token_select(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::shape(format!("token_select: expected [n, t, c], got {:?}", x.shape())));
    }
    let (n, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
        return Err(Error::shape(format!("token_select: index {} out of {} tokens", bad, t)));
    }
    let tq = idx.len();
    let mut data = vec![0.0f32; n * tq * c];
    for b in 0..n {
        for (q, &src_t) in idx.iter().enumerate() {
            let src = &x.data()[(b * t + src_t) * c..(b * t + src_t + 1) * c];
            data[(b * tq + q) * c..(b * tq + q + 1) * c].copy_from_slice(src);
        }
    }
    let px = x.clone();
    let idx_v = idx.to_vec();
    Ok(Tensor::from_op(vec![n, tq, c], data, &[x], move |g, store| {
        if px.requires_grad() {
            let mut dx = vec![0.0f32; px.elem_count()];
            for b in 0..n {
                for (q, &src_t) in idx_v.iter().enumerate() {
                    let gs = &g[(b * tq + q) * c..(b * tq + q + 1) * c];
                    let ds = &mut dx[(b * t + src_t) * c..(b * t + src_t + 1) * c];
                    for (d, &gv) in ds.iter_mut().zip(gs) {
                        *d += gv;
                    }
                }
            }
            store.accumulate(&px, dx);
        }
    }))
}

/// scores[n, heads, tq, tk] + table[heads, n_offsets] gathered through
/// `offset_index` (length tq*tk, values < n_offsets), broadcast over batch.
pub fn add_attention_bias(scores: &Tensor, table: &Tensor, offset_index: &[u32]) -> Result<Tensor> {
    if scores.ndim() != 4 || table.ndim() != 2 {
        return Err(Error::shape(format!(
            "add_attention_bias: scores {:?}, table {:?}",
            scores.shape(),
            table.shape()
        )));
    }
    let (n, heads, tq, tk) =
        (scores.shape()[0], scores.shape()[1], scores.shape()[2], scores.shape()[3]);
    if table.shape()[0] != heads {
        return Err(Error::config(format!(
            "add_attention_bias: table has {} heads, scores have {}",
            table.shape()[0],
            heads
        )));
    }
    if offset_index.len() != tq * tk {
        return Err(Error::config(format!(
            "add_attention_bias: offset index covers {} pairs, scores have {}x{}",
            offset_index.len(),
            tq,
            tk
        )));
    }
    let n_off = table.shape()[1];
    if let Some(&bad) = offset_index.iter().find(|&&s| s as usize >= n_off) {
        return Err(Error::config(format!(
            "add_attention_bias: slot {} out of {} offsets",
            bad, n_off
        )));
    }

    let mut data = scores.data().to_vec();
    for b in 0..n {
        for h in 0..heads {
            let trow = &table.data()[h * n_off..(h + 1) * n_off];
            let base = (b * heads + h) * tq * tk;
            for (p, &slot) in offset_index.iter().enumerate() {
                data[base + p] += trow[slot as usize];
            }
        }
    }

    let ps = scores.clone();
    let pt = table.clone();
    let idx = offset_index.to_vec();
    Ok(Tensor::from_op(scores.shape().to_vec(), data, &[scores, table], move |g, store| {
        if ps.requires_grad() {
            store.accumulate(&ps, g.to_vec());
        }
        if pt.requires_grad() {
            let mut dt = vec![0.0f32; pt.elem_count()];
            for b in 0..n {
                for h in 0..heads {
                    let base = (b * heads + h) * tq * tk;
                    let drow = &mut dt[h * n_off..(h + 1) * n_off];
                    for (p, &slot) in idx.iter().enumerate() {
                        drow[slot as usize] += g[base + p];
                    }
                }
            }
            store.accumulate(&pt, dt);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_picks_rows() {
        let x = Tensor::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = token_select(&x, &[2, 0]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn bias_broadcasts_over_batch() {
        let scores = Tensor::new(&[2, 1, 1, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let table = Tensor::new(&[1, 2], vec![10.0, 20.0]).unwrap();
        let y = add_attention_bias(&scores, &table, &[0, 1]).unwrap();
        assert_eq!(y.data(), &[10.0, 20.0, 11.0, 21.0]);
    }
}
