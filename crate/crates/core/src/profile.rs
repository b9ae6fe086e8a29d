//! Efficiency accounting: exact parameter counts, analytic multiply-
//! accumulate estimates over the built model, and wall-clock throughput.

use std::time::Instant;

use crate::encoder::AttentionLayer;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Conv2dLayer, LinearLayer};
use crate::tensor::Tensor;

/// Throughput measurement for one thread-pool configuration.
#[derive(Clone, Debug)]
pub struct FpsEntry {
    pub threads: usize,
    pub batch: usize,
    pub input: (usize, usize),
    pub warmup_iters: usize,
    pub measure_iters: usize,
    pub fps: f64,
}

/// Parameter, MAC and throughput report for one model.
#[derive(Clone, Debug, Default)]
pub struct ProfileReport {
    pub label: String,
    pub params_total: u64,
    pub params_by_module: Vec<(String, u64)>,
    pub macs_total: u64,
    pub fps: Vec<FpsEntry>,
    pub hardware: String,
}

impl ProfileReport {
    pub fn flops_g(&self) -> f64 {
        // 1 MAC reported as 1 FLOP, matching the table convention of
        // common profilers.
        self.macs_total as f64 / 1e9
    }
    pub fn params_m(&self) -> f64 {
        self.params_total as f64 / 1e6
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("model: {}\n", self.label));
        s.push_str(&format!("params: {:.2} M ({} scalars)\n", self.params_m(), self.params_total));
        s.push_str(&format!("flops:  {:.2} G (MACs at batch 1)\n", self.flops_g()));
        for (name, count) in &self.params_by_module {
            s.push_str(&format!("  {:<18} {:>12}\n", name, count));
        }
        for f in &self.fps {
            s.push_str(&format!(
                "fps: {:.2} (threads={}, batch={}, {}x{}, warmup={}, iters={})\n",
                f.fps, f.threads, f.batch, f.input.0, f.input.1, f.warmup_iters, f.measure_iters
            ));
        }
        if !self.hardware.is_empty() {
            s.push_str(&format!("hardware: {}\n", self.hardware));
        }
        s
    }

    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("profile.model={}\n", self.label));
        s.push_str(&format!("profile.params.total={}\n", self.params_total));
        s.push_str(&format!("profile.flops.g={:.4}\n", self.flops_g()));
        for (name, count) in &self.params_by_module {
            s.push_str(&format!("profile.params.{name}={count}\n"));
        }
        for f in &self.fps {
            s.push_str(&format!("profile.fps.threads{}={:.3}\n", f.threads, f.fps));
        }
        s
    }
}

/// Exact count of learnable scalars, grouped by top-level module.
/// Running statistics are buffers, not parameters, and are excluded.
pub fn count_params(model: &Model) -> (u64, Vec<(String, u64)>) {
    let mut by_module: Vec<(String, u64)> = Vec::new();
    let mut total = 0u64;
    for (name, t) in model.named_params() {
        let n = t.elem_count() as u64;
        total += n;
        let module = name.split('.').take(2).collect::<Vec<_>>().join(".");
        match by_module.iter_mut().find(|(m, _)| *m == module) {
            Some((_, c)) => *c += n,
            None => by_module.push((module, n)),
        }
    }
    (total, by_module)
}

fn conv_macs(conv: &Conv2dLayer, h: usize, w: usize) -> (usize, usize, u64) {
    let k = conv.kernel();
    let oh = (h + 2 * conv.padding - k) / conv.stride + 1;
    let ow = (w + 2 * conv.padding - k) / conv.stride + 1;
    let m = (oh * ow * conv.out_channels() * conv.in_channels() * k * k) as u64;
    (oh, ow, m)
}

fn linear_macs(l: &LinearLayer, tokens: usize) -> u64 {
    (tokens * l.d_in() * l.d_out()) as u64
}

fn attention_macs(a: &AttentionLayer) -> u64 {
    let tk = a.key_grid.0 * a.key_grid.1;
    let tq = a.query_count();
    let mut m = 0u64;
    m += linear_macs(&a.q_proj, tq);
    m += linear_macs(&a.k_proj, tk);
    m += linear_macs(&a.v_proj, tk);
    m += (a.heads * tq * tk * a.key_dim) as u64; // scores
    m += (a.heads * tq * tk * a.v_dim) as u64; // value mixing
    m += linear_macs(&a.out_proj, tq);
    m
}

/// Analytic multiply-accumulate count for a single image through the built
/// model. Batch norm, activations and resizes are excluded.
pub fn estimate_macs(model: &Model, h: usize, w: usize) -> Result<u64> {
    if (h, w) != model.config.input_size {
        return Err(Error::config(format!(
            "estimate_macs: model built for {}x{}, asked for {}x{}",
            model.config.input_size.0, model.config.input_size.1, h, w
        )));
    }
    let mut macs = 0u64;

    // stem
    let (mut ch, mut cw) = (h, w);
    for layer in &model.encoder.stem.layers {
        let (oh, ow, m) = conv_macs(&layer.conv, ch, cw);
        macs += m;
        ch = oh;
        cw = ow;
    }

    // transformer stages and downsampling
    if !model.config.conv_only {
        let grids = model.encoder.config.stage_grids();
        for (i, blocks) in model.encoder.stages.iter().enumerate() {
            let t = grids[i].0 * grids[i].1;
            for b in blocks {
                macs += linear_macs(&b.mlp.fc1, t);
                macs += linear_macs(&b.mlp.fc2, t);
                macs += attention_macs(&b.attn);
            }
            if i < 2 {
                let d = &model.encoder.downsamples[i];
                macs += attention_macs(&d.attn);
                let tq = d.attn.query_count();
                macs += linear_macs(&d.mlp.fc1, tq);
                macs += linear_macs(&d.mlp.fc2, tq);
            }
        }
    }

    // decoder
    let (mut dh, mut dw) = (h / 16, w / 16);
    if let Some(proj) = &model.decoder.bottleneck_proj {
        let (_, _, m) = conv_macs(&proj.conv, dh, dw);
        macs += m;
    }
    for block in &model.decoder.blocks {
        dh *= 2;
        dw *= 2;
        let (_, _, ma) = conv_macs(&block.conv_a.conv, dh, dw);
        let (_, _, mb) = conv_macs(&block.conv_b.conv, dh, dw);
        macs += ma + mb;
    }
    let (_, _, mh) = conv_macs(&model.decoder.head, dh, dw);
    macs += mh;

    Ok(macs)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn run_fps(model: &Model, x: &Tensor, batch: usize, warmup: usize, iters: usize) -> Result<f64> {
    for _ in 0..warmup {
        model.forward_eval(x)?;
    }
    let mut rates = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        model.forward_eval(x)?;
        let dt = t0.elapsed().as_secs_f64();
        rates.push(batch as f64 / dt.max(1e-9));
    }
    Ok(median(rates))
}

/// Median images/second in eval mode, measured once on a single-thread pool
/// and once on the ambient pool.
pub fn measure_fps(model: &Model, batch: usize, warmup: usize, iters: usize) -> Result<Vec<FpsEntry>> {
    let (h, w) = model.config.input_size;
    let x = Tensor::full(&[batch, model.config.in_channels, h, w], 0.5);
    let mut entries = Vec::new();

    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let fps1 = single.install(|| run_fps(model, &x, batch, warmup, iters))?;
    entries.push(FpsEntry {
        threads: 1,
        batch,
        input: (h, w),
        warmup_iters: warmup,
        measure_iters: iters,
        fps: fps1,
    });

    let fps_n = run_fps(model, &x, batch, warmup, iters)?;
    entries.push(FpsEntry {
        threads: rayon::current_num_threads(),
        batch,
        input: (h, w),
        warmup_iters: warmup,
        measure_iters: iters,
        fps: fps_n,
    });
    Ok(entries)
}

fn hardware_note() -> String {
    format!(
        "{} logical cpus, {}",
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        std::env::consts::ARCH
    )
}

/// Full report for one model; FPS measurement is optional.
pub fn profile_model(model: &Model, label: &str, fps_iters: Option<(usize, usize, usize)>) -> Result<ProfileReport> {
    let (params_total, params_by_module) = count_params(model);
    let (h, w) = model.config.input_size;
    let macs_total = estimate_macs(model, h, w)?;
    let fps = match fps_iters {
        Some((batch, warmup, iters)) => measure_fps(model, batch, warmup, iters)?,
        None => Vec::new(),
    };
    Ok(ProfileReport {
        label: label.to_string(),
        params_total,
        params_by_module,
        macs_total,
        fps,
        hardware: hardware_note(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_conv_param_count() {
        // 3 -> 8 channel 3x3 conv with bias: 3*8*9 + 8 = 224
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2dLayer::new(&mut rng, 3, 8, 3, 1, 1, true).unwrap();
        let n: usize = conv.weight.elem_count() + conv.bias.as_ref().unwrap().elem_count();
        assert_eq!(n, 224);
    }

    #[test]
    fn single_conv_mac_formula() {
        // 3 -> 8 channels, k=3, 4x4 output: 4*4*8*3*9 = 3456
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2dLayer::new(&mut rng, 3, 8, 3, 1, 1, false).unwrap();
        let (oh, ow, m) = conv_macs(&conv, 4, 4);
        assert_eq!((oh, ow), (4, 4));
        assert_eq!(m, 3456);
    }

    #[test]
    fn macs_additive_over_modules() {
        let mut cfg = ModelConfig::new(Variant::L128s, 3);
        cfg.input_size = (64, 64);
        let model = Model::build(&cfg, 0).unwrap();
        let total = estimate_macs(&model, 64, 64).unwrap();
        assert!(total > 0);
        // params invariant under forward execution
        let before = count_params(&model);
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        model.forward_eval(&x).unwrap();
        let after = count_params(&model);
        assert_eq!(before.0, after.0);
    }
}
