//! Per-fold training and fine-tuning loops.
//!
//! Each epoch samples augmented patches per scan (with rng streams derived
//! from `(seed, case, day, epoch)` so parallel data prep cannot change
//! results), optimizes dice loss on sigmoid logits under the one-cycle
//! schedule, and validates on the held-out fold via sliding-window
//! inference. The checkpoint with the best validation composite is retained.

use std::io::Write;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data::{augment, sample_patch, AugmentationConfig, FoldAssignment, VolumeSample};
use crate::error::TrainError;
use crate::metrics::{dice_loss, evaluate_masks, MaskVolume, DICE_SMOOTH};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::unet::{Model, UNetConfig};

use super::infer::sliding_window_predict;
use super::optim::{AdamW, AdamWHyper};
use super::schedule::onecycle_lr;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_run1: usize,
    pub epochs_run2: usize,
    pub lr_init_run1: f64,
    pub lr_init_run2: f64,
    pub lr_min: f64,
    pub patch: [usize; 3],
    pub overlap: f64,
    pub threshold: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Save a periodic checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs_run1: 120,
            epochs_run2: 40,
            lr_init_run1: 5e-4,
            lr_init_run2: 3e-4,
            lr_min: 1e-4,
            patch: [160, 160, 80],
            overlap: 0.5,
            threshold: 0.5,
            weight_decay: 1e-2,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.epochs_run1 == 0 {
            return Err(TrainError::Tensor(crate::error::TensorError::InvalidArgument {
                op: "train config",
                detail: "batch_size and epochs_run1 must be positive".into(),
            }));
        }
        for (lr, name) in [(self.lr_init_run1, "run1"), (self.lr_init_run2, "run2")] {
            if self.lr_min > lr {
                return Err(TrainError::Tensor(crate::error::TensorError::InvalidArgument {
                    op: "train config",
                    detail: format!("lr_min {} exceeds lr_init_{name} {lr}", self.lr_min),
                }));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_soft_dsc: f64,
    pub val_dsc: f64,
    pub val_hd_score: f64,
    pub val_composite: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint<f32>,
    pub last: Checkpoint<f32>,
    pub history: Vec<EpochRecord>,
}

/// History CSV: `epoch,lr,train_soft_dsc,val_dsc,val_hd_score,val_composite`.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,lr,train_soft_dsc,val_dsc,val_hd_score,val_composite")?;
    for r in history {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.epoch, r.lr, r.train_soft_dsc, r.val_dsc, r.val_hd_score, r.val_composite
        )?;
    }
    Ok(())
}

fn hash_case(case_id: &str) -> u64 {
    // FNV-1a; stable across platforms
    let mut h = 0xcbf29ce484222325u64;
    for b in case_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn split_fold<'a>(
    fold_id: usize,
    folds: &FoldAssignment,
    dataset: &'a [VolumeSample],
) -> Result<(Vec<&'a VolumeSample>, Vec<&'a VolumeSample>), TrainError> {
    if fold_id >= folds.k {
        return Err(TrainError::BadFold {
            fold: fold_id,
            k: folds.k,
        });
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in dataset {
        match folds.fold(&s.case_id) {
            Some(f) if f == fold_id => val.push(s),
            Some(_) => train.push(s),
            None => train.push(s),
        }
    }
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet { fold: fold_id });
    }
    Ok((train, val))
}

fn validate_model(
    model: &Model<f32>,
    val: &[&VolumeSample],
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64), TrainError> {
    if val.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let mut dsc_sum = 0.0;
    let mut hd_sum = 0.0;
    let mut comp_sum = 0.0;
    for s in val {
        let probs = sliding_window_predict(model, &image_chw(s), cfg.patch, cfg.overlap)?;
        let pred = threshold_probs(&probs, cfg.threshold, s.mask.spacing);
        let report = evaluate_masks(&pred, &s.mask)?;
        dsc_sum += report.mean_dsc;
        hd_sum += report.mean_hausdorff_score;
        comp_sum += report.composite;
    }
    let n = val.len() as f64;
    Ok((dsc_sum / n, hd_sum / n, comp_sum / n))
}

/// Volume image reshaped to `(C, D, H, W)` for inference.
pub fn image_chw(s: &VolumeSample) -> Tensor<f32> {
    s.image.clone()
}

/// Threshold a probability volume `(C, D, H, W)` into a mask; ties count
/// positive.
pub fn threshold_probs(probs: &Tensor<f32>, threshold: f64, spacing: [f64; 3]) -> MaskVolume {
    let s = probs.shape();
    let mut mask = MaskVolume::from_data(
        s[0],
        [s[1], s[2], s[3]],
        probs.data().iter().map(|&p| p as f64 >= threshold).collect(),
    )
    .expect("shape");
    mask.spacing = spacing;
    mask
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    train: &[&VolumeSample],
    val: &[&VolumeSample],
    epochs: usize,
    lr_peak: f64,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    run_tag: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let root = Rng::from_seed(cfg.seed);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = epochs * steps_per_epoch;
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, Checkpoint<f32>)> = None;
    let mut global_step = 0usize;

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.derive(&[run_tag, 10, epoch as u64]).shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut lr_last = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let [pd, ph, pw] = cfg.patch;
            let voxels = pd * ph * pw;
            let mut images = Vec::with_capacity(b * voxels);
            let mut targets = Vec::with_capacity(b * 3 * voxels);
            for &i in chunk {
                let s = train[i];
                let mut prng = root.derive(&[
                    run_tag,
                    20,
                    hash_case(&s.case_id),
                    s.day as u64,
                    epoch as u64,
                ]);
                let patch = sample_patch(s, cfg.patch, &mut prng);
                let (img, mask) = augment(&patch.image, &patch.mask, aug, &mut prng);
                images.extend_from_slice(img.data());
                let mt = mask.to_tensor::<f32>();
                targets.extend_from_slice(mt.data());
            }
            let images = Tensor::from_vec(vec![b, 1, pd, ph, pw], images).expect("batch shape");
            let targets = Tensor::from_vec(vec![b, 3, pd, ph, pw], targets).expect("batch shape");

            let mut tape = Tape::new();
            let x = tape.leaf(images, false);
            let mut drop_rng = root.derive(&[run_tag, 30, global_step as u64]);
            let trace = model.forward_train(&mut tape, x, &mut drop_rng)?;
            let probs = tape.sigmoid(trace.logits);
            let loss = dice_loss(&mut tape, probs, &targets, DICE_SMOOTH)?;
            let loss_value = tape.value(loss).item() as f64;
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged { step: global_step });
            }
            let grads_map = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = trace
                .param_vars
                .iter()
                .map(|&v| grads_map.get_or_zeros(v, &tape))
                .collect();
            let lr = onecycle_lr(global_step, total_steps, lr_peak, cfg.lr_min)?;
            opt.step(model, &grads, lr)?;
            loss_sum += loss_value * b as f64;
            lr_last = lr;
            global_step += 1;
        }

        let train_soft_dsc = 1.0 - loss_sum / train.len() as f64;
        let (val_dsc, val_hd_score, val_composite) = validate_model(model, val, cfg)?;
        history.push(EpochRecord {
            epoch,
            lr: lr_last,
            train_soft_dsc,
            val_dsc,
            val_hd_score,
            val_composite,
        });

        let better = match &best {
            None => true,
            Some((score, _)) => val_composite > *score,
        };
        if better {
            best = Some((
                val_composite,
                Checkpoint::from_model(model, epoch, cfg.seed, Some(opt.clone())),
            ));
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                Checkpoint::from_model(model, epoch, cfg.seed, Some(opt.clone()))
                    .save(&dir.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
        }
    }

    let last = Checkpoint::from_model(model, epochs.saturating_sub(1), cfg.seed, Some(opt.clone()));
    let best = best.map(|(_, c)| c).unwrap_or_else(|| {
        Checkpoint::from_model(model, epochs.saturating_sub(1), cfg.seed, Some(opt.clone()))
    });
    Ok(TrainOutcome {
        best,
        last,
        history,
    })
}

/// Train one fold from scratch (run 1 of the schedule).
pub fn train_fold(
    fold_id: usize,
    folds: &FoldAssignment,
    dataset: &[VolumeSample],
    unet: UNetConfig,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (train, val) = split_fold(fold_id, folds, dataset)?;
    let mut init_rng = Rng::from_seed(cfg.seed).derive(&[fold_id as u64, 1]);
    let mut model: Model<f32> = Model::build(unet, &mut init_rng)?;
    let hyper = AdamWHyper {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamW::new(hyper, &model.config().parameter_specs());
    run_epochs(
        &mut model,
        &mut opt,
        &train,
        &val,
        cfg.epochs_run1,
        cfg.lr_init_run1,
        cfg,
        aug,
        100 + fold_id as u64,
        checkpoint_dir,
    )
}

/// Resume a checkpoint's weights with a fresh optimizer and run the shorter
/// second cycle (`lr_init_run2` down to `lr_min`). Zero epochs returns the
/// checkpoint unchanged.
pub fn finetune(
    checkpoint: &Checkpoint<f32>,
    fold_id: usize,
    folds: &FoldAssignment,
    dataset: &[VolumeSample],
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if cfg.epochs_run2 == 0 {
        return Ok(TrainOutcome {
            best: clone_checkpoint(checkpoint),
            last: clone_checkpoint(checkpoint),
            history: Vec::new(),
        });
    }
    let (train, val) = split_fold(fold_id, folds, dataset)?;
    let mut model = checkpoint.to_model()?;
    let hyper = AdamWHyper {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamW::new(hyper, &model.config().parameter_specs());
    run_epochs(
        &mut model,
        &mut opt,
        &train,
        &val,
        cfg.epochs_run2,
        cfg.lr_init_run2,
        cfg,
        aug,
        200 + fold_id as u64,
        checkpoint_dir,
    )
}

fn clone_checkpoint(c: &Checkpoint<f32>) -> Checkpoint<f32> {
    Checkpoint {
        config: c.config.clone(),
        epoch: c.epoch,
        rng_seed: c.rng_seed,
        weights: c.weights.clone(),
        bn_stats: c.bn_stats.clone(),
        optimizer: c.optimizer.clone(),
    }
}
