//! Binary checkpoints: little-endian, CRC-32C protected, exact round-trip.
//!
//! Layout: magic "LVTU", version u32, length-prefixed UTF-8 config
//! (key=value lines), u32 record count, then per-tensor records
//! (kind u8, name, dims, f32 payload), and a trailing CRC-32C over all
//! preceding bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LVTU";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BN_MEAN: u8 = 1;
const KIND_BN_VAR: u8 = 2;
const KIND_ADAM_M: u8 = 3;
const KIND_ADAM_V: u8 = 4;

/// CRC-32C (Castagnoli), reflected polynomial 0x82F63B78.
pub fn crc32c(data: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut crc = i as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 { (crc >> 1) ^ 0x82F6_3B78 } else { crc >> 1 };
            }
            *slot = crc;
        }
        t
    });
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = (crc >> 8) ^ table[((crc ^ b as u32) & 0xFF) as usize];
    }
    crc ^ 0xFFFF_FFFF
}

fn push_record(buf: &mut Vec<u8>, kind: u8, name: &str, shape: &[usize], data: &[f32]) {
    buf.push(kind);
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn config_text(config: &ModelConfig, seed: u64, adam_step: Option<u64>) -> String {
    let widths: Vec<String> = config
        .decoder_widths
        .iter()
        .flat_map(|&(a, b)| [a.to_string(), b.to_string()])
        .collect();
    let mut s = format!(
        "variant={}\nnum_classes={}\nin_channels={}\nnum_skips={}\nconv_only={}\ninput_h={}\ninput_w={}\ndecoder_widths={}\nseed={}\n",
        config.variant,
        config.num_classes,
        config.in_channels,
        config.num_skips,
        config.conv_only,
        config.input_size.0,
        config.input_size.1,
        widths.join(","),
        seed,
    );
    if let Some(step) = adam_step {
        s.push_str(&format!("adam_step={step}\n"));
    }
    s
}

fn parse_config(text: &str) -> Result<(ModelConfig, u64, Option<u64>)> {
    let mut map = HashMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Integrity(format!("checkpoint config line '{line}' not key=value")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k).ok_or_else(|| Error::Integrity(format!("checkpoint config missing '{k}'")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Integrity(format!("checkpoint config field '{k}' not an integer")))
    };
    let widths_raw = get("decoder_widths")?;
    let parts: Vec<usize> = widths_raw
        .split(',')
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Integrity("checkpoint decoder_widths malformed".into()))?;
    if parts.len() != 8 {
        return Err(Error::Integrity("checkpoint decoder_widths needs 8 entries".into()));
    }
    let config = ModelConfig {
        variant: Variant::parse(get("variant")?)?,
        num_classes: parse_usize("num_classes")?,
        in_channels: parse_usize("in_channels")?,
        num_skips: parse_usize("num_skips")?,
        conv_only: get("conv_only")? == "true",
        input_size: (parse_usize("input_h")?, parse_usize("input_w")?),
        decoder_widths: [
            (parts[0], parts[1]),
            (parts[2], parts[3]),
            (parts[4], parts[5]),
            (parts[6], parts[7]),
        ],
    };
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| Error::Integrity("checkpoint seed not an integer".into()))?;
    let adam_step = match map.get("adam_step") {
        Some(v) => Some(
            v.parse::<u64>()
                .map_err(|_| Error::Integrity("checkpoint adam_step not an integer".into()))?,
        ),
        None => None,
    };
    Ok((config, seed, adam_step))
}

/// Serialize model parameters, BN running statistics and (optionally) the
/// optimizer moments.
pub fn save_checkpoint(
    model: &Model,
    seed: u64,
    optimizer: Option<&AdamState>,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = config_text(&model.config, seed, optimizer.map(|o| o.step));
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());

    let params = model.named_params();
    let bns = model.bn_layers();
    // optimizer moments saved in parameter order for determinism; only
    // parameters that have moments yet contribute records
    let with_moments: Vec<&str> = match optimizer {
        Some(opt) => params
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| opt.moments.contains_key(*n))
            .collect(),
        None => Vec::new(),
    };
    let n_records = params.len() + 2 * bns.len() + 2 * with_moments.len();
    buf.extend_from_slice(&(n_records as u32).to_le_bytes());

    for (name, t) in &params {
        push_record(&mut buf, KIND_PARAM, name, t.shape(), t.data());
    }
    for (name, bn) in &bns {
        let stats = bn.stats();
        push_record(&mut buf, KIND_BN_MEAN, name, &[stats.mean.len()], &stats.mean);
        push_record(&mut buf, KIND_BN_VAR, name, &[stats.var.len()], &stats.var);
    }
    if let Some(opt) = optimizer {
        for name in &with_moments {
            let (m, v) = &opt.moments[*name];
            push_record(&mut buf, KIND_ADAM_M, name, &[m.len()], m);
            push_record(&mut buf, KIND_ADAM_V, name, &[v.len()], v);
        }
    }

    let crc = crc32c(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Record {
    kind: u8,
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity(format!(
                "checkpoint truncated reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// A parsed checkpoint: rebuilt model plus any saved optimizer moments.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub model: Model,
    pub adam_step: Option<u64>,
    pub adam_moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Checkpoint {
    /// Verify integrity, parse, rebuild the model and assign every tensor.
    /// Any mismatch (version, checksum, missing or extra tensors, shape
    /// drift) fails without producing a partially loaded model.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let raw = fs::read(path)?;
        if raw.len() < 12 {
            return Err(Error::Integrity("checkpoint too short".into()));
        }
        let (body, crc_bytes) = raw.split_at(raw.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        let computed = crc32c(body);
        if stored != computed {
            return Err(Error::Integrity(format!(
                "checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})"
            )));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("bad checkpoint magic".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let cfg_len = r.u32("config length")? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
            .map_err(|_| Error::Integrity("checkpoint config not UTF-8".into()))?;
        let (config, seed, adam_step) = parse_config(cfg_text)?;

        let n_records = r.u32("record count")? as usize;
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let kind = r.take(1, "record kind")?[0];
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Integrity("record name not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dim")? as usize);
            }
            let n: usize = shape.iter().product();
            let bytes = r.take(4 * n, "payload")?;
            let data: Vec<f32> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            records.push(Record { kind, name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} trailing bytes",
                body.len() - r.pos
            )));
        }

        let mut model = Model::build(&config, seed)?;
        let mut params: HashMap<String, Record> = HashMap::new();
        let mut bn_mean: HashMap<String, Vec<f32>> = HashMap::new();
        let mut bn_var: HashMap<String, Vec<f32>> = HashMap::new();
        let mut adam_m: HashMap<String, Vec<f32>> = HashMap::new();
        let mut adam_v: HashMap<String, Vec<f32>> = HashMap::new();
        for rec in records {
            match rec.kind {
                KIND_PARAM => {
                    params.insert(rec.name.clone(), rec);
                }
                KIND_BN_MEAN => {
                    bn_mean.insert(rec.name, rec.data);
                }
                KIND_BN_VAR => {
                    bn_var.insert(rec.name, rec.data);
                }
                KIND_ADAM_M => {
                    adam_m.insert(rec.name, rec.data);
                }
                KIND_ADAM_V => {
                    adam_v.insert(rec.name, rec.data);
                }
                k => return Err(Error::Integrity(format!("unknown record kind {k}"))),
            }
        }

        for (name, slot) in model.named_params_mut() {
            let rec = params.remove(&name).ok_or_else(|| {
                Error::Integrity(format!("checkpoint missing parameter '{name}'"))
            })?;
            if rec.shape != slot.shape() {
                return Err(Error::Integrity(format!(
                    "parameter '{name}' shape {:?} != stored {:?}",
                    slot.shape(),
                    rec.shape
                )));
            }
            *slot = Tensor::param(&rec.shape, rec.data)?;
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Integrity(format!("checkpoint has unknown parameter '{extra}'")));
        }
        for (name, bn) in model.bn_layers() {
            let mean = bn_mean
                .remove(&name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint missing running mean '{name}'")))?;
            let var = bn_var
                .remove(&name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint missing running var '{name}'")))?;
            if mean.len() != bn.channels() || var.len() != bn.channels() {
                return Err(Error::Integrity(format!("running stats '{name}' have wrong width")));
            }
            bn.set_stats(crate::ops::BnStats { mean, var });
        }
        if let Some(extra) = bn_mean.keys().chain(bn_var.keys()).next() {
            return Err(Error::Integrity(format!("checkpoint has unknown buffer '{extra}'")));
        }

        let mut adam_moments = HashMap::new();
        for (name, m) in adam_m {
            let v = adam_v
                .remove(&name)
                .ok_or_else(|| Error::Integrity(format!("optimizer moment pair incomplete for '{name}'")))?;
            adam_moments.insert(name, (m, v));
        }

        Ok(Checkpoint { config, seed, model, adam_step, adam_moments })
    }

    /// Load and additionally require the stored config to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
        let ckpt = Self::load(path)?;
        if &ckpt.config != expected {
            return Err(Error::Config(format!(
                "checkpoint config mismatch: stored variant={} k={} skips={} conv_only={} input={}x{}, expected variant={} k={} skips={} conv_only={} input={}x{}",
                ckpt.config.variant,
                ckpt.config.num_classes,
                ckpt.config.num_skips,
                ckpt.config.conv_only,
                ckpt.config.input_size.0,
                ckpt.config.input_size.1,
                expected.variant,
                expected.num_classes,
                expected.num_skips,
                expected.conv_only,
                expected.input_size.0,
                expected.input_size.1,
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild an optimizer from the stored moments.
    pub fn restore_optimizer(&self, lr: f32, weight_decay: f32) -> AdamState {
        let mut adam = AdamState::new(lr, weight_decay);
        adam.step = self.adam_step.unwrap_or(0);
        adam.moments = self.adam_moments.clone();
        adam
    }
}
