//! Dataset ingestion and preparation: the raw tensor file format, case
//! manifests, augmentation, batching, and a synthetic shapes dataset for
//! desk-scale training runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub const LVTR_MAGIC: &[u8; 4] = b"LVTR";

/// dtype codes of the raw tensor file format.
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;

/// Write a little-endian raw tensor file: magic, dtype code, u32 ndim,
/// u32 dims, payload.
pub fn write_lvtr_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    write_lvtr(path, DTYPE_F32, shape, bytemuck_f32(data))
}

pub fn write_lvtr_u8(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    write_lvtr(path, DTYPE_U8, shape, data.to_vec())
}

fn bytemuck_f32(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_lvtr(path: &Path, dtype: u8, shape: &[usize], payload: Vec<u8>) -> Result<()> {
    let n: usize = shape.iter().product();
    let width = if dtype == DTYPE_F32 { 4 } else { 1 };
    if payload.len() != n * width {
        return Err(Error::shape(format!(
            "lvtr write: payload {} bytes does not match shape {:?}",
            payload.len(),
            shape
        )));
    }
    let mut buf = Vec::with_capacity(9 + 4 * shape.len() + payload.len());
    buf.extend_from_slice(LVTR_MAGIC);
    buf.push(dtype);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&payload);
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Parsed raw tensor file.
#[derive(Debug)]
pub struct RawTensor {
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

pub fn read_lvtr(path: &Path) -> Result<RawTensor> {
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    let fail = |offset: usize, msg: &str| Error::Format { offset: offset as u64, msg: msg.to_string() };
    if buf.len() < 9 {
        return Err(fail(buf.len(), "truncated header"));
    }
    if &buf[0..4] != LVTR_MAGIC {
        return Err(fail(0, "bad magic (expected LVTR)"));
    }
    let dtype = buf[4];
    if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
        return Err(fail(4, "unknown dtype code"));
    }
    let ndim = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    if ndim > 8 {
        return Err(fail(5, "implausible ndim"));
    }
    let dims_end = 9 + 4 * ndim;
    if buf.len() < dims_end {
        return Err(fail(buf.len(), "truncated dims"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 9 + 4 * i;
        let d = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fail(off, "zero dimension"));
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    let width = if dtype == DTYPE_F32 { 4 } else { 1 };
    let expect = dims_end + n * width;
    if buf.len() != expect {
        return Err(fail(buf.len().min(expect), "payload length does not match dims"));
    }
    Ok(RawTensor { dtype, shape, payload: buf[dims_end..].to_vec() })
}

fn payload_to_f32(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// One training slice: normalized intensities plus its label map.
#[derive(Clone, Debug)]
pub struct SliceRecord {
    pub case_id: String,
    pub slice_index: usize,
    pub height: usize,
    pub width: usize,
    /// Intensities in [0, 1], row-major [h, w].
    pub image: Vec<f32>,
    /// Class labels, row-major [h, w], values < K.
    pub label: Vec<u8>,
}

impl SliceRecord {
    /// [1, in_channels, th, tw] input tensor: bilinear-resized intensities
    /// replicated across channels.
    pub fn image_tensor(&self, in_channels: usize, target: (usize, usize)) -> Result<Tensor> {
        let t = Tensor::new(&[1, 1, self.height, self.width], self.image.clone())?;
        let resized = if (self.height, self.width) == target {
            t
        } else {
            ops::bilinear_resize(&t, target.0, target.1)?
        };
        if in_channels == 1 {
            return Ok(resized);
        }
        let refs: Vec<&Tensor> = std::iter::repeat(&resized).take(in_channels).collect();
        ops::concat(&refs, 1)
    }
}

/// Load a slice from an image/label raw tensor file pair; intensities are
/// clamped to [0, 1] and label values checked against `num_classes`.
pub fn load_slice(image_path: &Path, label_path: &Path, num_classes: usize) -> Result<SliceRecord> {
    let img = read_lvtr(image_path)?;
    if img.dtype != DTYPE_F32 || img.shape.len() != 2 {
        return Err(Error::data(format!(
            "{}: image must be 2-D f32",
            image_path.display()
        )));
    }
    let lbl = read_lvtr(label_path)?;
    if lbl.dtype != DTYPE_U8 || lbl.shape.len() != 2 {
        return Err(Error::data(format!(
            "{}: label must be 2-D u8",
            label_path.display()
        )));
    }
    if img.shape != lbl.shape {
        return Err(Error::data(format!(
            "{}: image shape {:?} != label shape {:?}",
            image_path.display(),
            img.shape,
            lbl.shape
        )));
    }
    if let Some(&bad) = lbl.payload.iter().find(|&&v| v as usize >= num_classes) {
        return Err(Error::data(format!(
            "{}: label value {} >= num_classes {}",
            label_path.display(),
            bad,
            num_classes
        )));
    }
    let image: Vec<f32> = payload_to_f32(&img.payload).iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(SliceRecord {
        case_id: String::new(),
        slice_index: 0,
        height: img.shape[0],
        width: img.shape[1],
        image,
        label: lbl.payload,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split '{other}'"))),
        }
    }
}

/// One manifest line: where a slice lives on disk.
#[derive(Clone, Debug)]
pub struct SliceEntry {
    pub split: Split,
    pub case_id: String,
    pub slice_index: usize,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
}

/// Dataset index: tab-separated slice table with a K/spacing header.
#[derive(Clone, Debug)]
pub struct CaseManifest {
    pub num_classes: usize,
    /// (mm_z, mm_y, mm_x)
    pub spacing: (f64, f64, f64),
    pub entries: Vec<SliceEntry>,
}

impl CaseManifest {
    /// Parse and validate a manifest. Every referenced file must exist and
    /// slice indices must be contiguous from 0 within each case.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::data(format!("{}: empty manifest", path.display())))?;
        let mut num_classes = None;
        let mut spacing = None;
        for field in header.split('\t') {
            match field.split_once('=') {
                Some(("K", v)) => {
                    num_classes = Some(v.parse::<usize>().map_err(|_| {
                        Error::data(format!("{}: header field K='{v}' not an integer", path.display()))
                    })?)
                }
                Some(("spacing", v)) => {
                    let parts: Vec<&str> = v.split(',').collect();
                    if parts.len() != 3 {
                        return Err(Error::data(format!(
                            "{}: header spacing needs 3 comma-separated values",
                            path.display()
                        )));
                    }
                    let mut s = [0.0f64; 3];
                    for (i, p) in parts.iter().enumerate() {
                        s[i] = p.parse().map_err(|_| {
                            Error::data(format!("{}: spacing component '{p}' not a number", path.display()))
                        })?;
                        if s[i] <= 0.0 {
                            return Err(Error::data(format!("{}: spacing must be positive", path.display())));
                        }
                    }
                    spacing = Some((s[0], s[1], s[2]));
                }
                _ => {
                    return Err(Error::data(format!(
                        "{}: unknown header field '{field}'",
                        path.display()
                    )))
                }
            }
        }
        let num_classes = num_classes
            .ok_or_else(|| Error::data(format!("{}: header missing K", path.display())))?;
        if num_classes < 2 {
            return Err(Error::data(format!("{}: K must be >= 2", path.display())));
        }
        let spacing = spacing
            .ok_or_else(|| Error::data(format!("{}: header missing spacing", path.display())))?;

        let mut entries = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::data(format!(
                    "{}:{}: expected 5 tab-separated fields, got {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            let split = Split::parse(fields[0]).map_err(|_| {
                Error::data(format!("{}:{}: bad split '{}'", path.display(), lineno + 1, fields[0]))
            })?;
            let slice_index: usize = fields[2].parse().map_err(|_| {
                Error::data(format!(
                    "{}:{}: slice_index '{}' not an integer",
                    path.display(),
                    lineno + 1,
                    fields[2]
                ))
            })?;
            let image_path = dir.join(fields[3]);
            let label_path = dir.join(fields[4]);
            for p in [&image_path, &label_path] {
                if !p.exists() {
                    return Err(Error::data(format!(
                        "{}:{}: referenced file {} does not exist",
                        path.display(),
                        lineno + 1,
                        p.display()
                    )));
                }
            }
            entries.push(SliceEntry {
                split,
                case_id: fields[1].to_string(),
                slice_index,
                image_path,
                label_path,
            });
        }

        let manifest = CaseManifest { num_classes, spacing, entries };
        manifest.validate_contiguous(path)?;
        Ok(manifest)
    }

    fn validate_contiguous(&self, path: &Path) -> Result<()> {
        let mut by_case: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
        for e in &self.entries {
            by_case.entry((e.split.name(), &e.case_id)).or_default().push(e.slice_index);
        }
        for ((split, case), mut idx) in by_case {
            idx.sort_unstable();
            for (want, got) in idx.iter().enumerate() {
                if want != *got {
                    return Err(Error::data(format!(
                        "{}: case {split}/{case}: slice indices not contiguous from 0 (found {got}, expected {want})",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!(
            "K={}\tspacing={},{},{}\n",
            self.num_classes, self.spacing.0, self.spacing.1, self.spacing.2
        );
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        for e in &self.entries {
            let rel_img = e.image_path.strip_prefix(dir).unwrap_or(&e.image_path);
            let rel_lbl = e.label_path.strip_prefix(dir).unwrap_or(&e.label_path);
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.split.name(),
                e.case_id,
                e.slice_index,
                rel_img.display(),
                rel_lbl.display()
            ));
        }
        fs::write(path, text)?;
        Ok(())
    }

    /// Entries restricted to one split.
    pub fn subset(&self, split: Split) -> CaseManifest {
        CaseManifest {
            num_classes: self.num_classes,
            spacing: self.spacing,
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    /// Sorted unique case ids.
    pub fn case_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.iter().map(|e| e.case_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn case_slices(&self, case_id: &str) -> Result<Vec<&SliceEntry>> {
        let mut slices: Vec<&SliceEntry> =
            self.entries.iter().filter(|e| e.case_id == case_id).collect();
        if slices.is_empty() {
            return Err(Error::data(format!("manifest has no slices for case '{case_id}'")));
        }
        slices.sort_by_key(|e| e.slice_index);
        Ok(slices)
    }

    /// Load every slice of one split into memory.
    pub fn load_records(&self, split: Split) -> Result<Vec<SliceRecord>> {
        let mut records = Vec::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            let mut r = load_slice(&e.image_path, &e.label_path, self.num_classes)?;
            r.case_id = e.case_id.clone();
            r.slice_index = e.slice_index;
            records.push(r);
        }
        Ok(records)
    }
}

// ---- augmentation ----------------------------------------------------

fn flip_h<T: Copy>(data: &mut [T], h: usize, w: usize) {
    for r in 0..h {
        data[r * w..(r + 1) * w].reverse();
    }
}

fn flip_v<T: Copy>(data: &mut [T], h: usize, w: usize) {
    for r in 0..h / 2 {
        for c in 0..w {
            data.swap(r * w + c, (h - 1 - r) * w + c);
        }
    }
}

/// Rotate image content counter-clockwise by `angle` radians about the
/// center (row 0 on top). Bilinear sampling, out-of-bounds fill 0.
pub fn rotate_image(data: &[f32], h: usize, w: usize, angle: f64) -> Vec<f32> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let dr = r as f64 - cy;
            let dc = c as f64 - cx;
            let sr = cy + dr * cos + dc * sin;
            let sc = cx - dr * sin + dc * cos;
            let r0 = sr.floor();
            let c0 = sc.floor();
            let fy = (sr - r0) as f32;
            let fx = (sc - c0) as f32;
            let sample = |rr: f64, cc: f64| -> f32 {
                if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 {
                    0.0
                } else {
                    data[rr as usize * w + cc as usize]
                }
            };
            let v00 = sample(r0, c0);
            let v01 = sample(r0, c0 + 1.0);
            let v10 = sample(r0 + 1.0, c0);
            let v11 = sample(r0 + 1.0, c0 + 1.0);
            let top = v00 + fx * (v01 - v00);
            let bot = v10 + fx * (v11 - v10);
            out[r * w + c] = top + fy * (bot - top);
        }
    }
    out
}

/// Same rotation for label maps: nearest-neighbor, out-of-bounds fill 0.
pub fn rotate_labels(data: &[u8], h: usize, w: usize, angle: f64) -> Vec<u8> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let dr = r as f64 - cy;
            let dc = c as f64 - cx;
            let sr = (cy + dr * cos + dc * sin).round();
            let sc = (cx - dr * sin + dc * cos).round();
            out[r * w + c] = if sr < 0.0 || sc < 0.0 || sr >= h as f64 || sc >= w as f64 {
                0
            } else {
                data[sr as usize * w + sc as usize]
            };
        }
    }
    out
}

/// Maximum augmentation rotation, degrees either side.
pub const AUGMENT_MAX_ROTATION_DEG: f64 = 20.0;

/// Random flips (p = 0.5 each axis) then a rotation uniform in
/// ±AUGMENT_MAX_ROTATION_DEG about the center.
pub fn augment(record: &SliceRecord, rng: &mut ChaCha8Rng) -> SliceRecord {
    let (h, w) = (record.height, record.width);
    let mut image = record.image.clone();
    let mut label = record.label.clone();
    if rng.gen_bool(0.5) {
        flip_h(&mut image, h, w);
        flip_h(&mut label, h, w);
    }
    if rng.gen_bool(0.5) {
        flip_v(&mut image, h, w);
        flip_v(&mut label, h, w);
    }
    let deg = rng.gen_range(-AUGMENT_MAX_ROTATION_DEG..=AUGMENT_MAX_ROTATION_DEG);
    let angle = deg.to_radians();
    if deg.abs() > 1e-12 {
        image = rotate_image(&image, h, w, angle);
        label = rotate_labels(&label, h, w, angle);
    }
    SliceRecord { image, label, ..record.clone() }
}

// ---- batching ---------------------------------------------------------

/// One training batch: images [n, c, s, s] and row-major integer labels.
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u32>,
}

/// Shuffle records with `shuffle_seed`, resize to `target_size` (images
/// bilinear, labels nearest) and group into batches; the final batch may be
/// short.
pub fn make_batches(
    records: &[SliceRecord],
    batch_size: usize,
    target_size: usize,
    in_channels: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    if records.is_empty() {
        return Err(Error::data("make_batches: empty record set"));
    }
    if batch_size == 0 {
        return Err(Error::config("make_batches: batch_size must be >= 1"));
    }
    if target_size % 16 != 0 {
        return Err(Error::config(format!(
            "make_batches: target size {target_size} must be divisible by 16"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let s = target_size;
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let n = chunk.len();
        let mut images = vec![0.0f32; n * in_channels * s * s];
        let mut labels = vec![0u32; n * s * s];
        for (bi, &ri) in chunk.iter().enumerate() {
            let r = &records[ri];
            let plane = r.image_tensor(1, (s, s))?;
            let lbl = crate::metrics::nearest_resize_labels(
                &crate::metrics::LabelMap::new(
                    vec![r.height, r.width],
                    r.label.clone(),
                    vec![1.0, 1.0],
                )?,
                s,
                s,
            )?;
            for c in 0..in_channels {
                let off = (bi * in_channels + c) * s * s;
                images[off..off + s * s].copy_from_slice(plane.data());
            }
            for (i, &v) in lbl.data.iter().enumerate() {
                labels[bi * s * s + i] = v as u32;
            }
        }
        batches.push(Batch { images: Tensor::new(&[n, in_channels, s, s], images)?, labels });
    }
    Ok(batches)
}

// ---- synthetic dataset -------------------------------------------------

/// Generator parameters for the synthetic shapes dataset.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub train_cases: usize,
    pub test_cases: usize,
    pub slices_per_case: usize,
    pub size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_cases: 20,
            test_cases: 4,
            slices_per_case: 10,
            size: 128,
            num_classes: 3,
            seed: 1234,
        }
    }
}

/// Region radius bounds as fractions of the image side.
pub const REGION_RADIUS_MIN_FRAC: f64 = 0.12;
pub const REGION_RADIUS_MAX_FRAC: f64 = 0.22;

/// Smallest per-class pixel share a generated slice must contain.
pub const MIN_CLASS_FRACTION: f64 = 0.01;

fn draw_region(label: &mut [u8], size: usize, class: u8, kind: usize, rng: &mut ChaCha8Rng) {
    let rmin = REGION_RADIUS_MIN_FRAC * size as f64;
    let rmax = REGION_RADIUS_MAX_FRAC * size as f64;
    let r1 = rng.gen_range(rmin..=rmax);
    let r2 = rng.gen_range(rmin..=rmax);
    let margin = r1.max(r2).ceil() as usize + 1;
    let cy = rng.gen_range(margin..size - margin) as f64;
    let cx = rng.gen_range(margin..size - margin) as f64;
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // rotate into the region frame
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let inside = match kind {
                0 => (u / r1).powi(2) + (v / r2).powi(2) <= 1.0, // ellipse
                1 => u.abs() <= r1 && v.abs() <= r2,             // rectangle
                _ => {
                    // ring: annulus of the mean radius
                    let rr = (u * u + v * v).sqrt();
                    let ro = 0.5 * (r1 + r2);
                    rr <= ro && rr >= 0.55 * ro
                }
            };
            if inside {
                label[y * size + x] = class;
            }
        }
    }
}

fn synth_slice(size: usize, k: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<u8>) {
    let normal = Normal::new(0.0f64, 0.1).expect("sigma > 0");
    loop {
        let mut label = vec![0u8; size * size];
        for c in 1..k {
            draw_region(&mut label, size, c as u8, (c - 1) % 3, rng);
        }
        // every class must keep at least MIN_CLASS_FRACTION of the pixels,
        // even after later regions overwrite earlier ones
        let mut counts = vec![0usize; k];
        for &v in &label {
            counts[v as usize] += 1;
        }
        let min_pixels = (MIN_CLASS_FRACTION * (size * size) as f64).ceil() as usize;
        if counts.iter().any(|&c| c < min_pixels) {
            continue;
        }
        let image: Vec<f32> = label
            .iter()
            .map(|&c| {
                let mean = (c as f64 + 0.5) / k as f64;
                (mean + normal.sample(rng)).clamp(0.0, 1.0) as f32
            })
            .collect();
        return (image, label);
    }
}

/// Generate the dataset under `out_dir` and write `manifest.tsv`. Fully
/// deterministic from `spec.seed`.
pub fn generate_synthetic_dataset(out_dir: &Path, spec: &SyntheticSpec) -> Result<CaseManifest> {
    if spec.num_classes < 2 {
        return Err(Error::config("synthetic: num_classes must be >= 2"));
    }
    if (spec.size as f64 * REGION_RADIUS_MAX_FRAC).ceil() as usize * 2 + 4 >= spec.size {
        return Err(Error::config(format!(
            "synthetic: size {} too small to place regions",
            spec.size
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::new();
    let cases: Vec<(Split, String)> = (0..spec.train_cases)
        .map(|i| (Split::Train, format!("train{:03}", i)))
        .chain((0..spec.test_cases).map(|i| (Split::Test, format!("test{:03}", i))))
        .collect();
    for (split, case_id) in cases {
        for s in 0..spec.slices_per_case {
            let (image, label) = synth_slice(spec.size, spec.num_classes, &mut rng);
            let img_name = format!("{case_id}_{s}_img.lvtr");
            let lbl_name = format!("{case_id}_{s}_lbl.lvtr");
            write_lvtr_f32(&out_dir.join(&img_name), &[spec.size, spec.size], &image)?;
            write_lvtr_u8(&out_dir.join(&lbl_name), &[spec.size, spec.size], &label)?;
            entries.push(SliceEntry {
                split,
                case_id: case_id.clone(),
                slice_index: s,
                image_path: out_dir.join(&img_name),
                label_path: out_dir.join(&lbl_name),
            });
        }
    }
    let manifest = CaseManifest { num_classes: spec.num_classes, spacing: (1.0, 1.0, 1.0), entries };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn lvtr_roundtrip_is_bit_exact() {
        let dir = tmpdir();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let h = rng.gen_range(1..6);
            let w = rng.gen_range(1..6);
            let data: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let p = dir.path().join(format!("t{trial}.lvtr"));
            write_lvtr_f32(&p, &[h, w], &data).unwrap();
            let back = read_lvtr(&p).unwrap();
            assert_eq!(back.shape, vec![h, w]);
            assert_eq!(payload_to_f32(&back.payload), data);
        }
    }

    #[test]
    fn lvtr_known_bytes() {
        let dir = tmpdir();
        let p = dir.path().join("x.lvtr");
        write_lvtr_f32(&p, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"LVTR");
        assert_eq!(bytes[4], DTYPE_F32);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        let back = read_lvtr(&p).unwrap();
        assert_eq!(payload_to_f32(&back.payload), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn load_slice_rejects_label_equal_to_k() {
        let dir = tmpdir();
        let img = dir.path().join("a_img.lvtr");
        let lbl = dir.path().join("a_lbl.lvtr");
        write_lvtr_f32(&img, &[2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        write_lvtr_u8(&lbl, &[2, 2], &[0, 1, 2, 3]).unwrap();
        assert!(load_slice(&img, &lbl, 3).is_err());
        assert!(load_slice(&img, &lbl, 4).is_ok());
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tmpdir();
        let p = dir.path().join("bad.lvtr");
        fs::write(&p, b"NOPE\x00\x01\x00\x00\x00\x02").unwrap();
        match read_lvtr(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let rec = SliceRecord {
            case_id: "c".into(),
            slice_index: 0,
            height: 3,
            width: 4,
            image: (0..12).map(|i| i as f32 / 12.0).collect(),
            label: (0..12).map(|i| (i % 3) as u8).collect(),
        };
        let mut img = rec.image.clone();
        flip_h(&mut img, 3, 4);
        flip_h(&mut img, 3, 4);
        assert_eq!(img, rec.image);
        let mut lbl = rec.label.clone();
        flip_v(&mut lbl, 3, 4);
        flip_v(&mut lbl, 3, 4);
        assert_eq!(lbl, rec.label);
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let img: Vec<f32> = (0..9).map(|i| i as f32).collect();
        assert_eq!(rotate_image(&img, 3, 3, 0.0), img);
        let lbl: Vec<u8> = (0..9).map(|i| i as u8).collect();
        assert_eq!(rotate_labels(&lbl, 3, 3, 0.0), lbl);
    }

    #[test]
    fn rotation_90deg_matches_hand_rotated_mask() {
        // content rotates counter-clockwise: top-left corner moves to the
        // bottom-left.
        let lbl = vec![1u8, 2, 0, 0, 0, 0, 0, 0, 0];
        let got = rotate_labels(&lbl, 3, 3, std::f64::consts::FRAC_PI_2);
        let expect = vec![0u8, 0, 0, 2, 0, 0, 1, 0, 0];
        assert_eq!(got, expect);
    }

    #[test]
    fn augment_preserves_label_value_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rec = SliceRecord {
            case_id: "c".into(),
            slice_index: 0,
            height: 16,
            width: 16,
            image: vec![0.5; 256],
            label: (0..256).map(|i| (i % 3) as u8).collect(),
        };
        for _ in 0..20 {
            let out = augment(&rec, &mut rng);
            assert!(out.label.iter().all(|&v| v < 3));
            assert!(out.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn batches_of_17_split_8_8_1() {
        let rec = |i: usize| SliceRecord {
            case_id: format!("c{i}"),
            slice_index: 0,
            height: 16,
            width: 16,
            image: vec![0.25; 256],
            label: vec![0; 256],
        };
        let records: Vec<SliceRecord> = (0..17).map(rec).collect();
        let batches = make_batches(&records, 8, 16, 3, 9).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].images.shape(), &[8, 3, 16, 16]);
        assert_eq!(batches[2].images.shape(), &[1, 3, 16, 16]);
        // same seed reproduces the order bit-exactly
        let again = make_batches(&records, 8, 16, 3, 9).unwrap();
        assert_eq!(batches[1].images.data(), again[1].images.data());
    }

    #[test]
    fn channel_replication() {
        let rec = SliceRecord {
            case_id: "c".into(),
            slice_index: 0,
            height: 2,
            width: 2,
            image: vec![0.1, 0.2, 0.3, 0.4],
            label: vec![0; 4],
        };
        let t = rec.image_tensor(3, (2, 2)).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert_eq!(&t.data()[0..4], &t.data()[4..8]);
        assert_eq!(&t.data()[0..4], &t.data()[8..12]);
    }

    #[test]
    fn synthetic_dataset_is_deterministic_and_class_complete() {
        let d1 = tmpdir();
        let d2 = tmpdir();
        let spec = SyntheticSpec {
            train_cases: 1,
            test_cases: 1,
            slices_per_case: 2,
            size: 64,
            num_classes: 3,
            seed: 77,
        };
        let m1 = generate_synthetic_dataset(d1.path(), &spec).unwrap();
        let m2 = generate_synthetic_dataset(d2.path(), &spec).unwrap();
        for (e1, e2) in m1.entries.iter().zip(&m2.entries) {
            let b1 = fs::read(&e1.image_path).unwrap();
            let b2 = fs::read(&e2.image_path).unwrap();
            assert_eq!(b1, b2);
        }
        // every class present with >= 1% of pixels
        let min_pixels = (0.01f64 * 64.0 * 64.0).ceil() as usize;
        for r in m1.load_records(Split::Train).unwrap() {
            let mut counts = [0usize; 3];
            for &v in &r.label {
                counts[v as usize] += 1;
            }
            assert!(counts.iter().all(|&c| c >= min_pixels), "{counts:?}");
        }
    }

    #[test]
    fn synthetic_k2_ellipse_area_within_radius_bounds() {
        let dir = tmpdir();
        let spec = SyntheticSpec {
            train_cases: 1,
            test_cases: 0,
            slices_per_case: 4,
            size: 96,
            num_classes: 2,
            seed: 11,
        };
        let m = generate_synthetic_dataset(dir.path(), &spec).unwrap();
        let rmin = REGION_RADIUS_MIN_FRAC * 96.0;
        let rmax = REGION_RADIUS_MAX_FRAC * 96.0;
        for r in m.load_records(Split::Train).unwrap() {
            let fg = r.label.iter().filter(|&&v| v == 1).count() as f64;
            let lo = std::f64::consts::PI * rmin * rmin * 0.85;
            let hi = std::f64::consts::PI * rmax * rmax * 1.15;
            assert!(fg >= lo && fg <= hi, "fg={fg}, bounds [{lo}, {hi}]");
        }
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tmpdir();
        let spec = SyntheticSpec {
            train_cases: 2,
            test_cases: 1,
            slices_per_case: 3,
            size: 48,
            num_classes: 3,
            seed: 1,
        };
        generate_synthetic_dataset(dir.path(), &spec).unwrap();
        let m = CaseManifest::load(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(m.num_classes, 3);
        assert_eq!(m.subset(Split::Train).case_ids().len(), 2);
        assert_eq!(m.subset(Split::Test).case_ids().len(), 1);
        assert_eq!(m.case_slices("train000").unwrap().len(), 3);

        // malformed manifest: missing file
        let bad = dir.path().join("bad.tsv");
        fs::write(&bad, "K=3\tspacing=1,1,1\ntrain\tc0\t0\tmissing.lvtr\tmissing2.lvtr\n").unwrap();
        let err = CaseManifest::load(&bad).unwrap_err().to_string();
        assert!(err.contains("missing.lvtr"), "{err}");
    }
}
