//! Whole-volume prediction: overlapping patch tiles blended with a Gaussian
//! importance window, and probability-mean ensembling across fold models.

use crate::error::TrainError;
use crate::metrics::MaskVolume;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::unet::Model;

/// Tile start positions covering `extent` with patches of `size` at the
/// given overlap; the last tile is clamped flush to the end.
fn tile_positions(extent: usize, size: usize, overlap: f64) -> Vec<usize> {
    debug_assert!(extent >= size);
    let stride = ((size as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let mut out = Vec::new();
    let mut pos = 0usize;
    loop {
        let clamped = pos.min(extent - size);
        if out.last() != Some(&clamped) {
            out.push(clamped);
        }
        if clamped == extent - size {
            break;
        }
        pos += stride;
    }
    out
}

/// Gaussian importance window over a patch, sigma = extent/8 per axis,
/// floored to keep edge weights from underflowing.
fn gaussian_window(size: [usize; 3]) -> Vec<f64> {
    let mut w = Vec::with_capacity(size.iter().product());
    let center: Vec<f64> = size.iter().map(|&e| (e as f64 - 1.0) / 2.0).collect();
    let sigma: Vec<f64> = size.iter().map(|&e| (e as f64 / 8.0).max(0.5)).collect();
    for z in 0..size[0] {
        let gz = ((z as f64 - center[0]) / sigma[0]).powi(2);
        for y in 0..size[1] {
            let gy = ((y as f64 - center[1]) / sigma[1]).powi(2);
            for x in 0..size[2] {
                let gx = ((x as f64 - center[2]) / sigma[2]).powi(2);
                w.push((-0.5 * (gz + gy + gx)).exp().max(1e-8));
            }
        }
    }
    w
}

/// Sigmoid probabilities for a whole volume `(C_in, D, H, W)`: tiles the
/// volume with `patch`-sized windows at the given overlap fraction, pads
/// edges with zeros, and blends overlapping patch predictions with a
/// Gaussian importance window. Output is `(C_out, D, H, W)` in [0, 1].
pub fn sliding_window_predict<T: Scalar>(
    model: &Model<T>,
    volume: &Tensor<T>,
    patch: [usize; 3],
    overlap: f64,
) -> Result<Tensor<T>, TrainError> {
    let vshape = volume.shape().to_vec();
    assert_eq!(vshape.len(), 4, "volume must be (C, D, H, W)");
    let cin = vshape[0];
    let dims = [vshape[1], vshape[2], vshape[3]];
    let out_ch = model.config().out_channels;

    let padded = [
        dims[0].max(patch[0]),
        dims[1].max(patch[1]),
        dims[2].max(patch[2]),
    ];
    let before = [
        (padded[0] - dims[0]) / 2,
        (padded[1] - dims[1]) / 2,
        (padded[2] - dims[2]) / 2,
    ];
    let vdata = volume.data();
    let at = |c: usize, z: isize, y: isize, x: isize| -> T {
        if z < 0
            || y < 0
            || x < 0
            || z as usize >= dims[0]
            || y as usize >= dims[1]
            || x as usize >= dims[2]
        {
            T::zero()
        } else {
            vdata[((c * dims[0] + z as usize) * dims[1] + y as usize) * dims[2] + x as usize]
        }
    };

    let tiles_z = tile_positions(padded[0], patch[0], overlap);
    let tiles_y = tile_positions(padded[1], patch[1], overlap);
    let tiles_x = tile_positions(padded[2], patch[2], overlap);
    let single_tile = tiles_z.len() == 1
        && tiles_y.len() == 1
        && tiles_x.len() == 1
        && padded == dims;

    let run_patch = |corner: [usize; 3]| -> Result<Tensor<T>, TrainError> {
        let mut data = Vec::with_capacity(cin * patch.iter().product::<usize>());
        for c in 0..cin {
            for z in 0..patch[0] {
                for y in 0..patch[1] {
                    for x in 0..patch[2] {
                        data.push(at(
                            c,
                            (corner[0] + z) as isize - before[0] as isize,
                            (corner[1] + y) as isize - before[1] as isize,
                            (corner[2] + x) as isize - before[2] as isize,
                        ));
                    }
                }
            }
        }
        let input = Tensor::from_vec(vec![1, cin, patch[0], patch[1], patch[2]], data)
            .expect("patch shape");
        let mut tape = Tape::new();
        let x = tape.leaf(input, false);
        let trace = model.forward_eval(&mut tape, x)?;
        let probs = tape.sigmoid(trace.logits);
        Ok(tape.value(probs).clone())
    };

    if single_tile {
        let probs = run_patch([0, 0, 0])?;
        return Ok(probs
            .reshape(vec![out_ch, patch[0], patch[1], patch[2]])
            .expect("drop batch axis"));
    }

    let window = gaussian_window(patch);
    let padded_n = padded[0] * padded[1] * padded[2];
    let mut accum = vec![0.0f64; out_ch * padded_n];
    let mut weight = vec![0.0f64; padded_n];
    for &tz in &tiles_z {
        for &ty in &tiles_y {
            for &tx in &tiles_x {
                let probs = run_patch([tz, ty, tx])?;
                let pdata = probs.data();
                let mut wi = 0usize;
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        let vrow = ((tz + z) * padded[1] + (ty + y)) * padded[2] + tx;
                        for x in 0..patch[2] {
                            let wv = window[wi + x];
                            weight[vrow + x] += wv;
                            for c in 0..out_ch {
                                let p = pdata
                                    [((c * patch[0] + z) * patch[1] + y) * patch[2] + x];
                                accum[c * padded_n + vrow + x] += wv * p.as_f64();
                            }
                        }
                        wi += patch[2];
                    }
                }
            }
        }
    }

    // normalize and crop padding
    let mut out = Vec::with_capacity(out_ch * dims[0] * dims[1] * dims[2]);
    for c in 0..out_ch {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let pi = ((z + before[0]) * padded[1] + (y + before[1])) * padded[2]
                        + (x + before[2]);
                    out.push(T::from_f64(accum[c * padded_n + pi] / weight[pi]));
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![out_ch, dims[0], dims[1], dims[2]], out).expect("shape"))
}

/// Mean of per-model probability volumes, thresholded per class. A tie at
/// the threshold counts as positive. All models must share one config.
pub fn ensemble_predict<T: Scalar>(
    models: &[Model<T>],
    volume: &Tensor<T>,
    patch: [usize; 3],
    overlap: f64,
    threshold: f64,
) -> Result<MaskVolume, TrainError> {
    let Some(first) = models.first() else {
        return Err(TrainError::EmptyEnsemble);
    };
    for m in &models[1..] {
        if m.config() != first.config() {
            return Err(TrainError::EnsembleConfigMismatch {
                detail: format!("{:?} vs {:?}", m.config(), first.config()),
            });
        }
    }
    let mut mean: Vec<f64> = Vec::new();
    for model in models {
        let probs = sliding_window_predict(model, volume, patch, overlap)?;
        if mean.is_empty() {
            mean = vec![0.0; probs.numel()];
        }
        for (a, &p) in mean.iter_mut().zip(probs.data()) {
            *a += p.as_f64();
        }
    }
    let k = models.len() as f64;
    let dims = [volume.shape()[1], volume.shape()[2], volume.shape()[3]];
    let classes = first.config().out_channels;
    let mask_data: Vec<bool> = mean.iter().map(|&s| s / k >= threshold).collect();
    Ok(MaskVolume::from_data(classes, dims, mask_data).expect("shape"))
}
