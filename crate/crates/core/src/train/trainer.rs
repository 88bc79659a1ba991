use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{extract_patch, HyperCube, LabelMap, Split};
use crate::exec::Executor;
use crate::model::{loss_and_grads, predict, ModelConfig, ModelParams};
use crate::train::metrics::EvalReport;
use crate::train::optim::{clip_gradients, AdamW, ClipMode};
use crate::{derive_seed, seeded, Error, Result, Tensor};

// Stream labels fed to `derive_seed`.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr: 3e-4,
            weight_decay: 2e-4,
            clip_norm: 1.0,
            clip_mode: ClipMode::PerTensor,
            label_smoothing: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "lr {} must be > 0, weight decay {} >= 0, clip norm {} > 0",
                self.lr, self.weight_decay, self.clip_norm
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub loss: f64,
    pub val_oa: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation OA (the initial
    /// parameters when no epoch ran).
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_oa: f64,
}

fn pixel_target(labels: &LabelMap, pixel: usize) -> usize {
    labels.labels()[pixel] as usize - 1
}

fn check_inputs(cfg: &ModelConfig, cube: &HyperCube, labels: &LabelMap) -> Result<()> {
    cfg.validate()?;
    labels.check_pair(cube)?;
    if cfg.bands != cube.bands() {
        return Err(Error::dim("model bands", &[cfg.bands], &[cube.bands()]));
    }
    if cfg.num_classes != labels.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but the label map has {}",
            cfg.num_classes,
            labels.num_classes()
        )));
    }
    Ok(())
}

/// Predicted class ids (`1..=K`) for flat pixel indices.
pub fn predict_pixels<E: Executor>(
    params: &ModelParams,
    cfg: &ModelConfig,
    cube: &HyperCube,
    pixels: &[usize],
    exec: &E,
) -> Result<Vec<u16>> {
    let w = cube.width();
    let preds = exec.map(pixels.len(), |i| -> Result<u16> {
        let p = pixels[i];
        let patch = extract_patch(cube, p / w, p % w, cfg.patch_size)?;
        let probs = predict(params, cfg, &patch)?;
        Ok(argmax(probs.data()) as u16 + 1)
    });
    preds.into_iter().collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Confusion-matrix report over `pixels` with dropout disabled.
pub fn evaluate<E: Executor>(
    params: &ModelParams,
    cfg: &ModelConfig,
    cube: &HyperCube,
    labels: &LabelMap,
    pixels: &[usize],
    exec: &E,
) -> Result<EvalReport> {
    if pixels.is_empty() {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    check_inputs(cfg, cube, labels)?;
    let preds = predict_pixels(params, cfg, cube, pixels, exec)?;
    EvalReport::from_pairs(
        cfg.num_classes,
        pixels
            .iter()
            .zip(&preds)
            .map(|(&px, &p)| (pixel_target(labels, px), p as usize - 1)),
    )
}

/// Mini-batch training with per-epoch reshuffling, best-validation selection
/// and full determinism in `tcfg.seed`. Per-sample gradients may be computed
/// concurrently by `exec`; they are summed in sample order.
pub fn train<E: Executor>(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    cube: &HyperCube,
    labels: &LabelMap,
    split: &Split,
    exec: &E,
) -> Result<TrainOutcome> {
    check_inputs(cfg, cube, labels)?;
    tcfg.validate()?;
    let k = cfg.num_classes;
    let mut counts = alloc::vec![0usize; k];
    for &p in &split.train {
        counts[pixel_target(labels, p)] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Split {
            class: c as u16 + 1,
            count: 0,
        });
    }
    if split.val.is_empty() {
        return Err(Error::Eval("validation split is empty".into()));
    }

    let mut params = ModelParams::init(cfg, &mut seeded(derive_seed(tcfg.seed, &[STREAM_INIT])))?;
    let mut outcome = TrainOutcome {
        params: params.clone(),
        log: Vec::with_capacity(tcfg.epochs),
        best_epoch: 0,
        best_val_oa: f64::NEG_INFINITY,
    };
    let mut opt = AdamW::new(tcfg.lr, tcfg.weight_decay);
    let w = cube.width();
    let mut order = split.train.clone();

    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut seeded(derive_seed(tcfg.seed, &[STREAM_SHUFFLE, epoch as u64])));
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let results = exec.map(batch.len(), |i| -> Result<(f64, Vec<Tensor>)> {
                let px = batch[i];
                let patch = extract_patch(cube, px / w, px % w, cfg.patch_size)?;
                let mut rng = seeded(derive_seed(
                    tcfg.seed,
                    &[STREAM_DROPOUT, epoch as u64, step as u64, i as u64],
                ));
                loss_and_grads(
                    &params,
                    cfg,
                    &patch,
                    pixel_target(labels, px),
                    tcfg.label_smoothing,
                    true,
                    &mut rng,
                )
            });
            let mut sum: Option<Vec<Tensor>> = None;
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let mut plist = params.params_mut();
            for (p, mut g) in plist.iter_mut().zip(sum.unwrap_or_default()) {
                g.scale_in_place(inv);
                p.grad = g;
            }
            clip_gradients(&mut plist, tcfg.clip_norm, tcfg.clip_mode);
            opt.step(&mut plist);
        }
        if !params.is_finite() {
            return Err(Error::Numeric {
                op: "train",
                detail: format!("non-finite parameters after epoch {epoch}"),
            });
        }
        let val = evaluate(&params, cfg, cube, labels, &split.val, exec)?;
        outcome.log.push(EpochLog {
            epoch,
            loss: loss_sum / order.len() as f64,
            val_oa: val.oa,
        });
        if val.oa > outcome.best_val_oa {
            outcome.best_val_oa = val.oa;
            outcome.best_epoch = epoch;
            outcome.params = params.clone();
        }
    }
    if tcfg.epochs == 0 {
        outcome.best_val_oa = 0.0;
    }
    Ok(outcome)
}
