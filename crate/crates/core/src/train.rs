//! Training loop: slice-wise optimization with augmentation, per-epoch
//! evaluation, and best-by-DSC checkpointing.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{augment, make_batches, Batch, CaseManifest, SliceRecord, Split};
use crate::error::{Error, Result};
use crate::losses::combined_loss;
use crate::metrics::{evaluate_cases, HdMode};
use crate::model::Model;
use crate::optim::AdamState;
use crate::tensor::{backward, with_grads};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub input_size: usize,
    pub augment: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once the eval DSC reaches this value.
    pub early_stop_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 1,
            seed: 42,
            input_size: 224,
            augment: true,
            checkpoint_dir: None,
            early_stop_dsc: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_dsc: f64,
    pub eval_dsc: f64,
    pub wall_secs: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} loss={:.6} train_dsc={:.4} eval_dsc={:.4} wall_s={:.1}",
            self.epoch, self.loss, self.train_dsc, self.eval_dsc, self.wall_secs
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_eval_dsc: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

/// One optimization step over a batch; returns the loss value.
pub fn train_step(model: &mut Model, batch: &Batch, adam: &mut AdamState) -> Result<f64> {
    let (loss_v, grads) = with_grads(|| -> Result<_> {
        let logits = model.forward(&batch.images, true)?;
        let loss = combined_loss(&logits, &batch.labels)?;
        let v = loss.scalar_value()?;
        let grads = backward(&loss)?;
        Ok((v, grads))
    })?;
    if !loss_v.is_finite() {
        return Err(Error::Grad(format!("non-finite training loss {loss_v}")));
    }
    let mut params = model.named_params_mut();
    adam.step(&mut params, &grads)?;
    Ok(loss_v as f64)
}

/// Mean foreground Dice of argmax predictions against batch labels
/// (training-progress monitoring only).
pub fn batch_foreground_dsc(logits: &crate::tensor::Tensor, labels: &[u32], k: usize) -> f64 {
    let (n, kc, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    let hw = h * w;
    let mut pred = vec![0u32; n * hw];
    for b in 0..n {
        for s in 0..hw {
            let mut best = 0u32;
            let mut best_v = logits.data()[b * kc * hw + s];
            for c in 1..kc {
                let v = logits.data()[b * kc * hw + c * hw + s];
                if v > best_v {
                    best_v = v;
                    best = c as u32;
                }
            }
            pred[b * hw + s] = best;
        }
    }
    let mut dices = Vec::new();
    for c in 1..k as u32 {
        let mut inter = 0u64;
        let mut pa = 0u64;
        let mut ga = 0u64;
        for (p, g) in pred.iter().zip(labels) {
            let pm = *p == c;
            let gm = *g == c;
            inter += (pm && gm) as u64;
            pa += pm as u64;
            ga += gm as u64;
        }
        dices.push(if pa + ga == 0 { 1.0 } else { 2.0 * inter as f64 / (pa + ga) as f64 });
    }
    if dices.is_empty() {
        0.0
    } else {
        dices.iter().sum::<f64>() / dices.len() as f64
    }
}

/// Full training run over the manifest's train split, evaluating on the
/// test split each epoch. Writes `last.lvtu` every epoch and `best.lvtu`
/// on eval-DSC improvement when a checkpoint dir is configured.
pub fn train(
    model: &mut Model,
    manifest: &CaseManifest,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let records: Vec<SliceRecord> = manifest.load_records(Split::Train)?;
    if records.is_empty() && cfg.epochs > 0 {
        return Err(Error::data("train: no training slices in manifest"));
    }
    let test_manifest = manifest.subset(Split::Test);
    let have_eval = !test_manifest.entries.is_empty();

    let mut adam = match resume {
        Some(ck) => ck.restore_optimizer(cfg.lr, cfg.weight_decay),
        None => AdamState::new(cfg.lr, cfg.weight_decay),
    };

    let mut outcome = TrainOutcome {
        logs: Vec::new(),
        best_eval_dsc: f64::NEG_INFINITY,
        best_checkpoint: None,
        last_checkpoint: None,
    };

    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    if cfg.epochs == 0 {
        // checkpoint of the initialized model, no training
        if let Some(dir) = &cfg.checkpoint_dir {
            let path = dir.join("last.lvtu");
            save_checkpoint(model, cfg.seed, Some(&adam), &path)?;
            outcome.last_checkpoint = Some(path);
        }
        return Ok(outcome);
    }

    let start_epoch = adam.step as usize / records.len().div_ceil(cfg.batch_size).max(1);
    for epoch in start_epoch..cfg.epochs {
        let t0 = Instant::now();
        let epoch_seed = cfg.seed.wrapping_add(epoch as u64 + 1);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let epoch_records: Vec<SliceRecord> = if cfg.augment {
            records.iter().map(|r| augment(r, &mut aug_rng)).collect()
        } else {
            records.clone()
        };
        let batches = make_batches(
            &epoch_records,
            cfg.batch_size,
            cfg.input_size,
            model.config.in_channels,
            epoch_seed,
        )?;

        let mut loss_sum = 0.0f64;
        for batch in &batches {
            let loss = train_step(model, batch, &mut adam)?;
            loss_sum += loss;
        }
        // train DSC sampled from the last batch of the epoch
        let train_dsc = {
            let last = batches.last().expect("non-empty batches");
            let logits = model.forward_eval(&last.images)?;
            batch_foreground_dsc(&logits, &last.labels, manifest.num_classes)
        };

        let eval_dsc = if have_eval {
            evaluate_cases(model, &test_manifest, HdMode::P95)?.mean_dsc
        } else {
            f64::NAN
        };

        let log = EpochLog {
            epoch,
            loss: loss_sum / batches.len() as f64,
            train_dsc,
            eval_dsc,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        outcome.logs.push(log);

        if let Some(dir) = &cfg.checkpoint_dir {
            let last = dir.join("last.lvtu");
            save_checkpoint(model, cfg.seed, Some(&adam), &last)?;
            outcome.last_checkpoint = Some(last);
            if have_eval && eval_dsc > outcome.best_eval_dsc {
                let best = dir.join("best.lvtu");
                save_checkpoint(model, cfg.seed, Some(&adam), &best)?;
                outcome.best_checkpoint = Some(best);
            }
        }
        if have_eval && eval_dsc > outcome.best_eval_dsc {
            outcome.best_eval_dsc = eval_dsc;
        }
        if let Some(stop) = cfg.early_stop_dsc {
            if have_eval && eval_dsc >= stop {
                break;
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticSpec};
    use crate::model::{ModelConfig, Variant};

    #[test]
    fn zero_epochs_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            train_cases: 1,
            test_cases: 1,
            slices_per_case: 2,
            size: 32,
            num_classes: 2,
            seed: 5,
        };
        let manifest = generate_synthetic_dataset(dir.path(), &spec).unwrap();
        let mut cfg = ModelConfig::new(Variant::L128s, 2);
        cfg.input_size = (32, 32);
        cfg.conv_only = true;
        let mut model = Model::build(&cfg, 1).unwrap();
        let tc = TrainConfig {
            epochs: 0,
            input_size: 32,
            checkpoint_dir: Some(dir.path().join("ckpt")),
            ..Default::default()
        };
        let out = train(&mut model, &manifest, &tc, None).unwrap();
        assert!(out.last_checkpoint.unwrap().exists());
        assert!(out.logs.is_empty());
    }
}
