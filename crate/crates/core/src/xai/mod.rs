//! Attribution methods: GradCAM over pixel sets, guided backpropagation,
//! guided GradCAM, and reference-based DeepLift (rescale rule), plus overlay
//! rendering.
//!
//! All methods run against an eval-mode forward pass (dropout off, frozen
//! normalization statistics); stochastic attributions are rejected by
//! construction since the training forward is never used here.

mod deeplift;
mod gradcam;
mod guided;
mod overlay;
mod upsample;

pub use deeplift::{deeplift_rescale, Baseline, DeepLiftAttribution};
pub use gradcam::{grad_cam, seg_grad_cam_additivity_probe, AdditivityReport};
pub use guided::{guided_backprop, guided_grad_cam};
pub use overlay::{
    append_sidecar, attribution_to_container, read_attribution_container, render_overlay,
    OverlayOptions,
};
pub use upsample::trilinear_upsample;

use serde_json::json;

use crate::error::XaiError;
use crate::tensor::{Scalar, Tensor};

/// Output voxels whose class logits form the attribution target
/// `sum over M of y^c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSet {
    pub class_id: usize,
    pub voxels: Vec<(usize, usize, usize)>,
}

impl PixelSet {
    pub fn all_voxels(class_id: usize, dims: [usize; 3]) -> Self {
        let mut voxels = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    voxels.push((d, h, w));
                }
            }
        }
        PixelSet { class_id, voxels }
    }

    /// Voxels of a boolean mask channel (row-major over `dims`).
    pub fn from_mask(
        class_id: usize,
        mask: &[bool],
        dims: [usize; 3],
    ) -> Result<Self, XaiError> {
        let mut voxels = Vec::new();
        let mut i = 0usize;
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    if mask[i] {
                        voxels.push((d, h, w));
                    }
                    i += 1;
                }
            }
        }
        if voxels.is_empty() {
            return Err(XaiError::EmptyPixelSet);
        }
        Ok(PixelSet { class_id, voxels })
    }

    pub fn single(class_id: usize, voxel: (usize, usize, usize)) -> Self {
        PixelSet {
            class_id,
            voxels: vec![voxel],
        }
    }

    pub fn validate(&self, classes: usize, dims: [usize; 3]) -> Result<(), XaiError> {
        if self.voxels.is_empty() {
            return Err(XaiError::EmptyPixelSet);
        }
        if self.class_id >= classes {
            return Err(XaiError::ClassOutOfRange {
                class: self.class_id,
                classes,
            });
        }
        for &(d, h, w) in &self.voxels {
            if d >= dims[0] || h >= dims[1] || w >= dims[2] {
                return Err(XaiError::PixelOutOfRange {
                    index: (d, h, w),
                    extents: (dims[0], dims[1], dims[2]),
                });
            }
        }
        Ok(())
    }

    /// Indicator cotangent over logits of shape `(1, C, D, H, W)`.
    pub fn seed_tensor<T: Scalar>(&self, logits_shape: &[usize]) -> Tensor<T> {
        let (c, dims) = (
            logits_shape[1],
            [logits_shape[2], logits_shape[3], logits_shape[4]],
        );
        let mut data = vec![T::zero(); logits_shape.iter().product()];
        for &(d, h, w) in &self.voxels {
            let idx = ((self.class_id * dims[0] + d) * dims[1] + h) * dims[2] + w;
            data[idx] = T::one();
        }
        let _ = c;
        Tensor::from_vec(logits_shape.to_vec(), data).expect("shape")
    }

    pub fn is_disjoint(&self, other: &PixelSet) -> Option<(usize, usize, usize)> {
        let set: std::collections::BTreeSet<_> = self.voxels.iter().collect();
        other.voxels.iter().find(|v| set.contains(v)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributionMethod {
    GradCam,
    GuidedBackprop,
    GuidedGradCam,
    DeepLift,
}

impl AttributionMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttributionMethod::GradCam => "gradcam",
            AttributionMethod::GuidedBackprop => "guided_backprop",
            AttributionMethod::GuidedGradCam => "guided_gradcam",
            AttributionMethod::DeepLift => "deeplift",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "gradcam" => Some(AttributionMethod::GradCam),
            "guided_backprop" | "guided-backprop" => Some(AttributionMethod::GuidedBackprop),
            "guided_gradcam" | "guided-gradcam" => Some(AttributionMethod::GuidedGradCam),
            "deeplift" => Some(AttributionMethod::DeepLift),
            _ => None,
        }
    }

    /// GradCAM maps are rectified; the others carry sign.
    pub fn signed(self) -> bool {
        !matches!(self, AttributionMethod::GradCam)
    }
}

/// Per-voxel relevance volume aligned to the input grid.
#[derive(Debug, Clone)]
pub struct AttributionMap<T: Scalar> {
    pub method: AttributionMethod,
    pub class_id: usize,
    pub pixel_count: usize,
    pub layer: Option<String>,
    /// `(D, H, W)` on the input grid.
    pub values: Tensor<T>,
}

impl<T: Scalar> AttributionMap<T> {
    pub fn meta_json(&self) -> serde_json::Value {
        json!({
            "kind": "attribution",
            "method": self.method.name(),
            "class_id": self.class_id,
            "pixel_count": self.pixel_count,
            "layer": self.layer,
        })
    }
}
