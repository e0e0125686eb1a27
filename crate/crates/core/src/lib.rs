//! Self-contained volumetric segmentation engine.
//!
//! Builds a 3D UNet on a from-scratch reverse-mode autodiff core, trains it
//! with dice loss under a one-cycle AdamW schedule, evaluates exact
//! dice/Hausdorff metrics, and explains predictions with gradient- and
//! reference-based attribution maps. Everything is deterministic for a
//! fixed seed and runs at desk scale on a CPU.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod xai;

pub use error::{DataError, FormatError, MetricsError, ModelError, TensorError, TrainError, XaiError};
pub use gradcheck::{grad_check, CheckMode};
pub use ops::{BnMode, BnStats};
pub use rng::Rng;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{Dtype, Scalar, Tensor};
pub use checkpoint::Checkpoint;
pub use data::{VolumeSample, CLASS_NAMES};
pub use metrics::{composite_score, dice_loss, dsc, evaluate_masks, hausdorff, hausdorff_score, MaskVolume, MetricsReport};
pub use container::Container;
pub use train::{ensemble_predict, finetune, onecycle_lr, sliding_window_predict, train_fold, AdamW, AdamWHyper, TrainConfig};
pub use unet::{ForwardTrace, Model, UNetConfig};
pub use xai::{deeplift_rescale, grad_cam, guided_backprop, guided_grad_cam, render_overlay, AttributionMap, AttributionMethod, Baseline, PixelSet};
