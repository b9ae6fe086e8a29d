//! Segmentation metrics: per-class Dice similarity and Hausdorff distance
//! (exact and 95th-percentile), slice-to-volume stacking, and case-level
//! evaluation of a model against a manifest.

use rayon::prelude::*;

use crate::data::{load_slice, CaseManifest};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Integer class labels over a 2-D slice or 3-D volume, with per-axis
/// physical spacing in millimetres.
#[derive(Clone, Debug)]
pub struct LabelMap {
    /// [h, w] or [d, h, w]
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
    /// Spacing per axis, same order as `shape`.
    pub spacing: Vec<f64>,
}

impl LabelMap {
    pub fn new(shape: Vec<usize>, data: Vec<u8>, spacing: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "label map: shape {:?} expects {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.len() != spacing.len() {
            return Err(Error::shape("label map: spacing rank must match shape"));
        }
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::data("label map: spacing must be positive"));
        }
        Ok(LabelMap { shape, data, spacing })
    }

    pub fn volume_diagonal(&self) -> f64 {
        self.shape
            .iter()
            .zip(&self.spacing)
            .map(|(&n, &s)| {
                let ext = n as f64 * s;
                ext * ext
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn check_same_geometry(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "metric: shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    if a.spacing != b.spacing {
        return Err(Error::shape(format!(
            "metric: spacing mismatch {:?} vs {:?}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

/// Dice similarity coefficient for class `c`: 2|A∩B| / (|A|+|B|).
/// Both masks empty → 1.0; exactly one empty → 0.0.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    check_same_geometry(pred, gt)?;
    let mut inter = 0u64;
    let mut a = 0u64;
    let mut b = 0u64;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let pa = p == class;
        let gb = g == class;
        a += pa as u64;
        b += gb as u64;
        inter += (pa && gb) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Hausdorff mode: classic maximum or 95th percentile of the pooled
/// directed distances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HdMode {
    Max,
    P95,
}

impl HdMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "max" => Ok(HdMode::Max),
            "p95" | "95" | "hd95" => Ok(HdMode::P95),
            other => Err(Error::config(format!("unknown hd mode '{other}' (max or p95)"))),
        }
    }
}

/// 1-D squared Euclidean distance transform (lower envelope of parabolas)
/// over grid positions i*spacing. Exact in real arithmetic.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(out.len(), n);
    let mut v = vec![0usize; n]; // parabola sites
    let mut z = vec![0.0f64; n + 1]; // boundaries
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let pos = |i: usize| i as f64 * spacing;
    for q in 1..n {
        if f[q].is_infinite() && f[q] > 0.0 {
            continue;
        }
        loop {
            let p = v[k];
            // intersection of parabolas rooted at p and q
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * pos(q) - 2.0 * pos(p));
            if s <= z[k] {
                if k == 0 {
                    // replace the only parabola
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        out[q] = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance transform of a binary mask (true =
/// foreground) over an N-D grid with anisotropic spacing.
fn squared_edt(mask: &[bool], shape: &[usize], spacing: &[f64]) -> Vec<f64> {
    let total: usize = shape.iter().product();
    let mut dist: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    debug_assert_eq!(dist.len(), total);

    // Sweep each axis in turn with the 1-D transform.
    for axis in 0..shape.len() {
        let n = shape[axis];
        if n == 1 {
            continue;
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut lane = vec![0.0f64; n];
        let mut out = vec![0.0f64; n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for (j, l) in lane.iter_mut().enumerate() {
                    *l = dist[base + j * inner];
                }
                if lane.iter().all(|v| v.is_infinite()) {
                    continue;
                }
                edt_1d(&lane, spacing[axis], &mut out);
                for (j, &v) in out.iter().enumerate() {
                    dist[base + j * inner] = v;
                }
            }
        }
    }
    dist
}

/// Directed distances from every foreground voxel of `from` to the nearest
/// foreground voxel of `to` (physical millimetres).
fn directed_distances(from: &[bool], to: &[bool], shape: &[usize], spacing: &[f64]) -> Vec<f64> {
    let sq = squared_edt(to, shape, spacing);
    from.iter()
        .zip(&sq)
        .filter(|(&f, _)| f)
        .map(|(_, &d)| d.sqrt())
        .collect()
}

/// Linear-interpolation percentile (numpy convention), p in [0, 100].
fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return values[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// Result of a Hausdorff computation; `sentinel` flags the one-mask-empty
/// case, where the volume diagonal is reported instead of a distance.
#[derive(Clone, Copy, Debug)]
pub struct HdResult {
    pub value: f64,
    pub sentinel: bool,
}

/// Symmetric Hausdorff distance between the class-`c` masks of `pred` and
/// `gt`, in millimetres over voxel centers scaled by spacing.
pub fn hausdorff(pred: &LabelMap, gt: &LabelMap, class: u8, mode: HdMode) -> Result<HdResult> {
    check_same_geometry(pred, gt)?;
    let a: Vec<bool> = pred.data.iter().map(|&v| v == class).collect();
    let b: Vec<bool> = gt.data.iter().map(|&v| v == class).collect();
    let a_any = a.iter().any(|&v| v);
    let b_any = b.iter().any(|&v| v);
    if !a_any && !b_any {
        return Ok(HdResult { value: 0.0, sentinel: false });
    }
    if a_any != b_any {
        return Ok(HdResult { value: pred.volume_diagonal(), sentinel: true });
    }
    let d_ab = directed_distances(&a, &b, &pred.shape, &pred.spacing);
    let d_ba = directed_distances(&b, &a, &pred.shape, &pred.spacing);
    let value = match mode {
        HdMode::Max => {
            let m1 = d_ab.iter().cloned().fold(0.0f64, f64::max);
            let m2 = d_ba.iter().cloned().fold(0.0f64, f64::max);
            m1.max(m2)
        }
        HdMode::P95 => {
            let mut pooled: Vec<f64> = d_ab;
            pooled.extend(d_ba);
            percentile(&mut pooled, 95.0)
        }
    };
    Ok(HdResult { value, sentinel: false })
}

/// Stack ordered 2-D slices into a [d, h, w] volume. Slice indices must be
/// contiguous from 0; input order is irrelevant.
pub fn stack_slices(slices: &[(usize, LabelMap)], spacing: (f64, f64, f64)) -> Result<LabelMap> {
    if slices.is_empty() {
        return Err(Error::data("stack_slices: no slices"));
    }
    let (h, w) = {
        let s = &slices[0].1;
        if s.shape.len() != 2 {
            return Err(Error::shape("stack_slices: slices must be 2-D"));
        }
        (s.shape[0], s.shape[1])
    };
    let d = slices.len();
    let mut sorted: Vec<Option<&LabelMap>> = vec![None; d];
    for (idx, s) in slices {
        if s.shape != [h, w] {
            return Err(Error::shape(format!(
                "stack_slices: slice {} shape {:?} differs from {:?}",
                idx,
                s.shape,
                [h, w]
            )));
        }
        if *idx >= d {
            return Err(Error::data(format!(
                "stack_slices: slice index {} out of range 0..{} (missing slice?)",
                idx, d
            )));
        }
        if sorted[*idx].is_some() {
            return Err(Error::data(format!("stack_slices: duplicate slice index {}", idx)));
        }
        sorted[*idx] = Some(s);
    }
    let mut data = Vec::with_capacity(d * h * w);
    for (i, s) in sorted.iter().enumerate() {
        let s = s.ok_or_else(|| Error::data(format!("stack_slices: missing slice index {}", i)))?;
        data.extend_from_slice(&s.data);
    }
    LabelMap::new(vec![d, h, w], data, vec![spacing.0, spacing.1, spacing.2])
}

/// Per-case, per-class metrics plus foreground aggregates.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub hd_mode_label: String,
    /// (case_id, class, dsc, hd, hd_sentinel)
    pub per_case: Vec<(String, u8, f64, f64, bool)>,
    /// Mean over cases of the per-case foreground-class means.
    pub mean_dsc: f64,
    pub mean_hd: f64,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<16} {:>5} {:>8} {:>10}\n", "case", "class", "dsc", "hd_mm"));
        for (case, class, d, h, sent) in &self.per_case {
            let flag = if *sent { "*" } else { "" };
            s.push_str(&format!("{case:<16} {class:>5} {d:>8.4} {h:>9.3}{flag}\n"));
        }
        s.push_str(&format!(
            "mean foreground dsc {:.4}, hd({}) {:.3} mm\n",
            self.mean_dsc, self.hd_mode_label, self.mean_hd
        ));
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }

    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        for (case, class, d, h, sent) in &self.per_case {
            s.push_str(&format!(
                "metric.case={case} class={class} dsc={d:.6} hd={h:.6} sentinel={sent}\n"
            ));
        }
        s.push_str(&format!("metric.mean.dsc={:.6}\n", self.mean_dsc));
        s.push_str(&format!("metric.mean.hd={:.6}\n", self.mean_hd));
        s.push_str(&format!("metric.hd_mode={}\n", self.hd_mode_label));
        s
    }
}

/// Argmax over class logits [1, K, h, w] -> label slice [h, w].
pub fn logits_to_labels(logits: &Tensor) -> Result<LabelMap> {
    if logits.ndim() != 4 || logits.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "logits_to_labels: expected [1, k, h, w], got {:?}",
            logits.shape()
        )));
    }
    let (k, h, w) = (logits.shape()[1], logits.shape()[2], logits.shape()[3]);
    let hw = h * w;
    let mut data = vec![0u8; hw];
    for s in 0..hw {
        let mut best = 0usize;
        let mut best_v = logits.data()[s];
        for c in 1..k {
            let v = logits.data()[c * hw + s];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        data[s] = best as u8;
    }
    LabelMap::new(vec![h, w], data, vec![1.0, 1.0])
}

/// Nearest-neighbor resize of a label slice.
pub fn nearest_resize_labels(src: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    if src.shape.len() != 2 {
        return Err(Error::shape("nearest_resize_labels: expected 2-D slice"));
    }
    let (h, w) = (src.shape[0], src.shape[1]);
    if (h, w) == (out_h, out_w) {
        return Ok(src.clone());
    }
    let mut data = vec![0u8; out_h * out_w];
    for oy in 0..out_h {
        let sy = (((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).round().max(0.0) as usize).min(h - 1);
        for ox in 0..out_w {
            let sx =
                (((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).round().max(0.0) as usize).min(w - 1);
            data[oy * out_w + ox] = src.data[sy * w + sx];
        }
    }
    LabelMap::new(vec![out_h, out_w], data, src.spacing.clone())
}

/// Predict every slice of every case in the manifest, stack to volumes and
/// compute per-class DSC and HD against the ground truth. Cases evaluate in
/// parallel; results are merged in case order.
pub fn evaluate_cases(model: &Model, manifest: &CaseManifest, hd_mode: HdMode) -> Result<MetricReport> {
    let k = manifest.num_classes as u8;
    let case_ids = manifest.case_ids();
    let results: Vec<Result<(String, Vec<(u8, f64, f64, bool)>)>> = case_ids
        .par_iter()
        .map(|case_id| {
            let entries = manifest.case_slices(case_id)?;
            let mut pred_slices = Vec::with_capacity(entries.len());
            let mut gt_slices = Vec::with_capacity(entries.len());
            for e in entries {
                let rec = load_slice(&e.image_path, &e.label_path, manifest.num_classes)?;
                let (h, w) = (rec.height, rec.width);
                let x = rec.image_tensor(model.config.in_channels, model.config.input_size)?;
                let logits = model.forward_eval(&x)?;
                let mut pred = logits_to_labels(&logits)?;
                if (pred.shape[0], pred.shape[1]) != (h, w) {
                    pred = nearest_resize_labels(&pred, h, w)?;
                }
                pred_slices.push((e.slice_index, pred));
                gt_slices.push((e.slice_index, LabelMap::new(vec![h, w], rec.label, vec![1.0, 1.0])?));
            }
            let pred_vol = stack_slices(&pred_slices, manifest.spacing)?;
            let gt_vol = stack_slices(&gt_slices, manifest.spacing)?;
            let mut per_class = Vec::new();
            for c in 1..k {
                let d = dsc(&pred_vol, &gt_vol, c)?;
                let h = hausdorff(&pred_vol, &gt_vol, c, hd_mode)?;
                per_class.push((c, d, h.value, h.sentinel));
            }
            Ok((case_id.clone(), per_class))
        })
        .collect();

    let mut report = MetricReport {
        hd_mode_label: match hd_mode {
            HdMode::Max => "max".into(),
            HdMode::P95 => "p95".into(),
        },
        ..Default::default()
    };
    let mut case_dsc_means = Vec::new();
    let mut case_hd_means = Vec::new();
    for r in results {
        let (case_id, per_class) = r?;
        let mut ds = Vec::new();
        let mut hs = Vec::new();
        for (c, d, h, sent) in per_class {
            report.per_case.push((case_id.clone(), c, d, h, sent));
            if sent {
                report
                    .warnings
                    .push(format!("case {case_id} class {c}: one mask empty, hd set to volume diagonal"));
            }
            ds.push(d);
            hs.push(h);
        }
        if !ds.is_empty() {
            case_dsc_means.push(ds.iter().sum::<f64>() / ds.len() as f64);
            case_hd_means.push(hs.iter().sum::<f64>() / hs.len() as f64);
        }
    }
    if !case_dsc_means.is_empty() {
        report.mean_dsc = case_dsc_means.iter().sum::<f64>() / case_dsc_means.len() as f64;
        report.mean_hd = case_hd_means.iter().sum::<f64>() / case_hd_means.len() as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map2(shape: [usize; 2], data: Vec<u8>) -> LabelMap {
        LabelMap::new(shape.to_vec(), data, vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn dsc_identical_disjoint_half() {
        let a = map2([2, 2], vec![1, 1, 0, 0]);
        let b = map2([2, 2], vec![1, 1, 0, 0]);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 1.0);
        let c = map2([2, 2], vec![0, 0, 1, 1]);
        assert_eq!(dsc(&a, &c, 1).unwrap(), 0.0);
        // |A|=2, |B|=2, overlap 1 -> 0.5
        let d = map2([2, 2], vec![0, 1, 1, 0]);
        let e = map2([2, 2], vec![0, 1, 0, 1]);
        assert_eq!(dsc(&d, &e, 1).unwrap(), 0.5);
    }

    #[test]
    fn dsc_empty_conventions() {
        let empty = map2([2, 2], vec![0; 4]);
        let full = map2([2, 2], vec![1; 4]);
        assert_eq!(dsc(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dsc(&empty, &full, 1).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_hand_case_3_4_5() {
        let mut a = vec![0u8; 5 * 6];
        let mut b = vec![0u8; 5 * 6];
        a[0] = 1; // (0,0)
        b[3 * 6 + 4] = 1; // (3,4)
        let am = map2([5, 6], a);
        let bm = map2([5, 6], b);
        let hd = hausdorff(&am, &bm, 1, HdMode::Max).unwrap();
        assert!((hd.value - 5.0).abs() < 1e-12);
        assert!(!hd.sentinel);
    }

    #[test]
    fn hausdorff_identical_and_empty() {
        let a = map2([3, 3], vec![0, 1, 0, 1, 1, 1, 0, 1, 0]);
        assert_eq!(hausdorff(&a, &a, 1, HdMode::Max).unwrap().value, 0.0);
        let empty = map2([3, 3], vec![0; 9]);
        assert_eq!(hausdorff(&empty, &empty, 1, HdMode::Max).unwrap().value, 0.0);
        let hd = hausdorff(&a, &empty, 1, HdMode::Max).unwrap();
        assert!(hd.sentinel);
        assert!((hd.value - (18.0f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn anisotropic_spacing_scales_distances() {
        let mut a = vec![0u8; 4];
        let mut b = vec![0u8; 4];
        a[0] = 1; // (0,0)
        b[1] = 1; // (0,1)
        let am = LabelMap::new(vec![2, 2], a, vec![1.0, 2.5]).unwrap();
        let bm = LabelMap::new(vec![2, 2], b, vec![1.0, 2.5]).unwrap();
        let hd = hausdorff(&am, &bm, 1, HdMode::Max).unwrap();
        assert!((hd.value - 2.5).abs() < 1e-12);
    }

    #[test]
    fn stacking_orders_slices() {
        let s0 = map2([1, 2], vec![0, 1]);
        let s1 = map2([1, 2], vec![2, 3]);
        let s2 = map2([1, 2], vec![4, 5]);
        // shuffled input order
        let vol = stack_slices(&[(2, s2.clone()), (0, s0), (1, s1)], (2.0, 1.0, 1.0)).unwrap();
        assert_eq!(vol.shape, vec![3, 1, 2]);
        assert_eq!(vol.data, vec![0, 1, 2, 3, 4, 5]);
        assert!(stack_slices(&[(1, s2)], (1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0];
        assert!((percentile(&mut v, 95.0) - 3.85).abs() < 1e-12);
        let mut w = vec![5.0];
        assert_eq!(percentile(&mut w, 95.0), 5.0);
    }
}
