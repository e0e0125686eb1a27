//! GradCAM generalized to segmentation: the scalar target is the sum of
//! class logits over a pixel set M, per-channel weights are spatial means of
//! the layer gradient, and the weighted activation map is rectified and
//! upsampled to the input grid.

use crate::error::XaiError;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::unet::Model;

use super::upsample::trilinear_upsample;
use super::{AttributionMap, AttributionMethod, PixelSet};

/// GradCAM map before the final rectification, on the layer grid. This is
/// linear in the pixel-set seed, which the additivity probe exploits.
fn pre_relu_map<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    target_layer: &str,
    pixel_set: &PixelSet,
) -> Result<(Tensor<T>, [usize; 3]), XaiError> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let trace = model.forward_eval(&mut tape, x)?;
    let logits_shape = tape.shape(trace.logits).to_vec();
    pixel_set.validate(
        logits_shape[1],
        [logits_shape[2], logits_shape[3], logits_shape[4]],
    )?;
    let act = trace
        .activation(target_layer)
        .ok_or_else(|| XaiError::UnknownLayer(target_layer.to_string()))?;

    let seed = pixel_set.seed_tensor::<T>(&logits_shape);
    let grads = tape.backward_seeded(trace.logits, &seed)?;
    let g = grads
        .get(act)
        .ok_or_else(|| XaiError::UnknownLayer(format!("{target_layer} (no gradient path)")))?;

    let ashape = tape.shape(act).to_vec(); // (1, K, d, h, w)
    let k = ashape[1];
    let spatial = [ashape[2], ashape[3], ashape[4]];
    let voxels = spatial[0] * spatial[1] * spatial[2];
    let a = tape.value(act).data();
    let gd = g.data();

    // alpha_k: global average of the gradient over the layer's spatial grid
    let mut alpha = vec![T::zero(); k];
    for (ch, slot) in alpha.iter_mut().enumerate() {
        let base = ch * voxels;
        let mut s = T::zero();
        for &v in &gd[base..base + voxels] {
            s = s + v;
        }
        *slot = s / T::from_f64(voxels as f64);
    }

    let mut map = vec![T::zero(); voxels];
    for ch in 0..k {
        let base = ch * voxels;
        let w = alpha[ch];
        for (i, m) in map.iter_mut().enumerate() {
            *m = *m + w * a[base + i];
        }
    }
    Ok((
        Tensor::from_vec(spatial.to_vec(), map).expect("shape"),
        [logits_shape[2], logits_shape[3], logits_shape[4]],
    ))
}

/// GradCAM attribution for `pixel_set` at `target_layer`, rectified and
/// trilinearly upsampled to the input grid.
pub fn grad_cam<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    target_layer: &str,
    pixel_set: &PixelSet,
) -> Result<AttributionMap<T>, XaiError> {
    let (pre, out_dims) = pre_relu_map(model, input, target_layer, pixel_set)?;
    let rectified = pre.map(|v| if v > T::zero() { v } else { T::zero() });
    let values = trilinear_upsample(&rectified, out_dims);
    Ok(AttributionMap {
        method: AttributionMethod::GradCam,
        class_id: pixel_set.class_id,
        pixel_count: pixel_set.voxels.len(),
        layer: Some(target_layer.to_string()),
        values,
    })
}

#[derive(Debug, Clone)]
pub struct AdditivityReport {
    /// `max |map(M1 u M2) - map(M1) - map(M2)|` over the layer grid.
    pub max_abs_deviation: f64,
    /// Deviation relative to the union map's max magnitude.
    pub max_rel_deviation: f64,
}

/// Verify that pre-rectification maps are additive over disjoint pixel
/// sets: gradients are linear in the seed, so
/// `map(M1 u M2) == map(M1) + map(M2)` up to floating-point error.
pub fn seg_grad_cam_additivity_probe<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    target_layer: &str,
    m1: &PixelSet,
    m2: &PixelSet,
) -> Result<AdditivityReport, XaiError> {
    if m1.voxels.is_empty() || m2.voxels.is_empty() {
        return Err(XaiError::EmptyPixelSet);
    }
    if m1.class_id != m2.class_id {
        return Err(XaiError::ClassOutOfRange {
            class: m2.class_id,
            classes: m1.class_id + 1,
        });
    }
    if let Some(v) = m1.is_disjoint(m2) {
        return Err(XaiError::OverlappingPixelSets(v));
    }
    let union = PixelSet {
        class_id: m1.class_id,
        voxels: m1.voxels.iter().chain(&m2.voxels).copied().collect(),
    };
    let (map1, _) = pre_relu_map(model, input, target_layer, m1)?;
    let (map2, _) = pre_relu_map(model, input, target_layer, m2)?;
    let (map12, _) = pre_relu_map(model, input, target_layer, &union)?;

    let mut max_abs = 0.0f64;
    let mut max_mag = 0.0f64;
    for ((&a, &b), &u) in map1.data().iter().zip(map2.data()).zip(map12.data()) {
        let dev = (u.as_f64() - a.as_f64() - b.as_f64()).abs();
        max_abs = max_abs.max(dev);
        max_mag = max_mag.max(u.as_f64().abs());
    }
    Ok(AdditivityReport {
        max_abs_deviation: max_abs,
        max_rel_deviation: max_abs / max_mag.max(1e-300),
    })
}
