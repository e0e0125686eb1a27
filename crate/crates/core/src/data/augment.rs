//! Training-time augmentation: random flip, affine, grid distortion, coarse
//! dropout, and intensity shift/scale, each gated by its own probability.
//!
//! Spatial transforms move image and mask through the same coordinate map,
//! with trilinear interpolation for the image and nearest-neighbor for the
//! mask. Coarse dropout and intensity changes touch the image only, so
//! masks stay truthful.

use crate::metrics::MaskVolume;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub p_flip: f64,
    pub p_affine: f64,
    pub p_grid: f64,
    pub p_coarse_dropout: f64,
    pub p_intensity: f64,
    /// Spatial axes eligible for flipping (0=D, 1=H, 2=W).
    pub flip_axes: Vec<usize>,
    /// Rotation about the depth axis, radians, drawn from [-max, max].
    pub rotate_max_rad: f64,
    /// Isotropic scale drawn from [1-s, 1+s].
    pub scale_max: f64,
    /// Translation per axis in voxels, drawn from [-t, t].
    pub translate_max: [f64; 3],
    pub grid_cells: usize,
    /// Per-cell length jitter fraction for grid distortion.
    pub grid_magnitude: f64,
    pub dropout_holes: usize,
    /// Hole side length as a fraction of each extent.
    pub hole_size_frac: f64,
    pub intensity_shift: f64,
    pub intensity_scale: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            p_flip: 0.5,
            p_affine: 0.5,
            p_grid: 0.5,
            p_coarse_dropout: 0.5,
            p_intensity: 0.5,
            flip_axes: vec![0, 1, 2],
            rotate_max_rad: 0.26,
            scale_max: 0.1,
            translate_max: [4.0, 8.0, 8.0],
            grid_cells: 4,
            grid_magnitude: 0.3,
            dropout_holes: 4,
            hole_size_frac: 0.15,
            intensity_shift: 0.1,
            intensity_scale: 0.2,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No-op configuration (all probabilities zero).
    pub fn disabled() -> Self {
        AugmentationConfig {
            p_flip: 0.0,
            p_affine: 0.0,
            p_grid: 0.0,
            p_coarse_dropout: 0.0,
            p_intensity: 0.0,
            ..Default::default()
        }
    }
}

/// Flip image and mask along one spatial axis (0=D, 1=H, 2=W).
pub fn flip_volume(image: &Tensor<f32>, mask: &MaskVolume, axis: usize) -> (Tensor<f32>, MaskVolume) {
    let dims = [image.shape()[1], image.shape()[2], image.shape()[3]];
    let [dd, hh, ww] = dims;
    let src = image.data();
    let flip_coord = |z: usize, y: usize, x: usize| -> (usize, usize, usize) {
        match axis {
            0 => (dd - 1 - z, y, x),
            1 => (z, hh - 1 - y, x),
            _ => (z, y, ww - 1 - x),
        }
    };
    let mut img = vec![0.0f32; src.len()];
    let mut mi = 0usize;
    for z in 0..dd {
        for y in 0..hh {
            for x in 0..ww {
                let (sz, sy, sx) = flip_coord(z, y, x);
                img[mi] = src[(sz * hh + sy) * ww + sx];
                mi += 1;
            }
        }
    }
    let image_out = Tensor::from_vec(image.shape().to_vec(), img).expect("shape");
    let mut mask_out = MaskVolume::new(mask.classes, dims);
    mask_out.spacing = mask.spacing;
    for c in 0..mask.classes {
        let srcm = mask.class(c);
        let dstm = mask_out.class_mut(c);
        let mut i = 0usize;
        for z in 0..dd {
            for y in 0..hh {
                for x in 0..ww {
                    let (sz, sy, sx) = flip_coord(z, y, x);
                    dstm[i] = srcm[(sz * hh + sy) * ww + sx];
                    i += 1;
                }
            }
        }
    }
    (image_out, mask_out)
}

fn trilinear(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> f32 {
    let [dd, hh, ww] = dims;
    let f = |z: i64, y: i64, x: i64| -> f32 {
        if z < 0 || y < 0 || x < 0 || z >= dd as i64 || y >= hh as i64 || x >= ww as i64 {
            0.0
        } else {
            data[(z as usize * hh + y as usize) * ww + x as usize]
        }
    };
    let z0 = p[0].floor();
    let y0 = p[1].floor();
    let x0 = p[2].floor();
    let (tz, ty, tx) = (p[0] - z0, p[1] - y0, p[2] - x0);
    let (z0, y0, x0) = (z0 as i64, y0 as i64, x0 as i64);
    let mut acc = 0.0f64;
    for (dz, wz) in [(0i64, 1.0 - tz), (1, tz)] {
        for (dy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0i64, 1.0 - tx), (1, tx)] {
                acc += wz * wy * wx * f(z0 + dz, y0 + dy, x0 + dx) as f64;
            }
        }
    }
    acc as f32
}

fn nearest_bool(data: &[bool], dims: [usize; 3], p: [f64; 3]) -> bool {
    let [dd, hh, ww] = dims;
    let z = p[0].round() as i64;
    let y = p[1].round() as i64;
    let x = p[2].round() as i64;
    if z < 0 || y < 0 || x < 0 || z >= dd as i64 || y >= hh as i64 || x >= ww as i64 {
        false
    } else {
        data[(z as usize * hh + y as usize) * ww + x as usize]
    }
}

/// Apply a coordinate map `src = f(out)` to image (trilinear) and mask
/// (nearest).
fn warp(
    image: &Tensor<f32>,
    mask: &MaskVolume,
    src_of: impl Fn([usize; 3]) -> [f64; 3],
) -> (Tensor<f32>, MaskVolume) {
    let dims = [image.shape()[1], image.shape()[2], image.shape()[3]];
    let [dd, hh, ww] = dims;
    let data = image.data();
    let mut img = Vec::with_capacity(data.len());
    for z in 0..dd {
        for y in 0..hh {
            for x in 0..ww {
                img.push(trilinear(data, dims, src_of([z, y, x])));
            }
        }
    }
    let image_out = Tensor::from_vec(image.shape().to_vec(), img).expect("shape");
    let mut mask_out = MaskVolume::new(mask.classes, dims);
    mask_out.spacing = mask.spacing;
    for c in 0..mask.classes {
        let srcm = mask.class(c);
        let dstm = mask_out.class_mut(c);
        let mut i = 0usize;
        for z in 0..dd {
            for y in 0..hh {
                for x in 0..ww {
                    dstm[i] = nearest_bool(srcm, dims, src_of([z, y, x]));
                    i += 1;
                }
            }
        }
    }
    (image_out, mask_out)
}

fn apply_affine(
    image: &Tensor<f32>,
    mask: &MaskVolume,
    cfg: &AugmentationConfig,
    rng: &mut Rng,
) -> (Tensor<f32>, MaskVolume) {
    let dims = [image.shape()[1], image.shape()[2], image.shape()[3]];
    let theta = rng.uniform_in(-cfg.rotate_max_rad, cfg.rotate_max_rad);
    let scale = rng.uniform_in(1.0 - cfg.scale_max, 1.0 + cfg.scale_max);
    let t = [
        rng.uniform_in(-cfg.translate_max[0], cfg.translate_max[0]),
        rng.uniform_in(-cfg.translate_max[1], cfg.translate_max[1]),
        rng.uniform_in(-cfg.translate_max[2], cfg.translate_max[2]),
    ];
    let center = [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ];
    let (sin, cos) = theta.sin_cos();
    // inverse map: undo translation, rotation about the depth axis, and scale
    let src_of = move |out: [usize; 3]| -> [f64; 3] {
        let zc = out[0] as f64 - center[0] - t[0];
        let yc = out[1] as f64 - center[1] - t[1];
        let xc = out[2] as f64 - center[2] - t[2];
        let yr = (cos * yc + sin * xc) / scale;
        let xr = (-sin * yc + cos * xc) / scale;
        let zr = zc / scale;
        [zr + center[0], yr + center[1], xr + center[2]]
    };
    warp(image, mask, src_of)
}

fn grid_axis_map(extent: usize, cells: usize, magnitude: f64, rng: &mut Rng) -> Vec<f64> {
    // distorted cell boundaries, renormalized to preserve the total extent
    let factors: Vec<f64> = (0..cells)
        .map(|_| 1.0 + rng.uniform_in(-magnitude, magnitude))
        .collect();
    let total: f64 = factors.iter().sum();
    let mut bounds = Vec::with_capacity(cells + 1);
    let mut acc = 0.0;
    bounds.push(0.0);
    for f in &factors {
        acc += f / total;
        bounds.push(acc * extent as f64);
    }
    // per-voxel source coordinate via piecewise-linear map
    let cell_len = extent as f64 / cells as f64;
    (0..extent)
        .map(|v| {
            let k = ((v as f64 / cell_len) as usize).min(cells - 1);
            let frac = (v as f64 - k as f64 * cell_len) / cell_len;
            bounds[k] + frac * (bounds[k + 1] - bounds[k])
        })
        .collect()
}

fn apply_grid_distortion(
    image: &Tensor<f32>,
    mask: &MaskVolume,
    cfg: &AugmentationConfig,
    rng: &mut Rng,
) -> (Tensor<f32>, MaskVolume) {
    let dims = [image.shape()[1], image.shape()[2], image.shape()[3]];
    let mz = grid_axis_map(dims[0], cfg.grid_cells, cfg.grid_magnitude, rng);
    let my = grid_axis_map(dims[1], cfg.grid_cells, cfg.grid_magnitude, rng);
    let mx = grid_axis_map(dims[2], cfg.grid_cells, cfg.grid_magnitude, rng);
    let src_of = move |out: [usize; 3]| -> [f64; 3] { [mz[out[0]], my[out[1]], mx[out[2]]] };
    warp(image, mask, src_of)
}

fn apply_coarse_dropout(image: &Tensor<f32>, cfg: &AugmentationConfig, rng: &mut Rng) -> Tensor<f32> {
    let dims = [image.shape()[1], image.shape()[2], image.shape()[3]];
    let [dd, hh, ww] = dims;
    let mut data = image.data().to_vec();
    for _ in 0..cfg.dropout_holes {
        let side = [
            ((cfg.hole_size_frac * dd as f64).round() as usize).max(1),
            ((cfg.hole_size_frac * hh as f64).round() as usize).max(1),
            ((cfg.hole_size_frac * ww as f64).round() as usize).max(1),
        ];
        let corner = [
            rng.below(dd.saturating_sub(side[0]) + 1),
            rng.below(hh.saturating_sub(side[1]) + 1),
            rng.below(ww.saturating_sub(side[2]) + 1),
        ];
        for z in corner[0]..(corner[0] + side[0]).min(dd) {
            for y in corner[1]..(corner[1] + side[1]).min(hh) {
                let row = (z * hh + y) * ww;
                for x in corner[2]..(corner[2] + side[2]).min(ww) {
                    data[row + x] = 0.0;
                }
            }
        }
    }
    Tensor::from_vec(image.shape().to_vec(), data).expect("shape")
}

/// Apply each configured transform with its probability. Output intensities
/// are re-clamped to [0,1].
pub fn augment(
    image: &Tensor<f32>,
    mask: &MaskVolume,
    cfg: &AugmentationConfig,
    rng: &mut Rng,
) -> (Tensor<f32>, MaskVolume) {
    let mut img = image.clone();
    let mut msk = mask.clone();

    if rng.bernoulli(cfg.p_flip) && !cfg.flip_axes.is_empty() {
        let axis = cfg.flip_axes[rng.below(cfg.flip_axes.len())];
        let (i, m) = flip_volume(&img, &msk, axis);
        img = i;
        msk = m;
    }
    if rng.bernoulli(cfg.p_affine) {
        let (i, m) = apply_affine(&img, &msk, cfg, rng);
        img = i;
        msk = m;
    }
    if rng.bernoulli(cfg.p_grid) {
        let (i, m) = apply_grid_distortion(&img, &msk, cfg, rng);
        img = i;
        msk = m;
    }
    if rng.bernoulli(cfg.p_coarse_dropout) {
        img = apply_coarse_dropout(&img, cfg, rng);
    }
    if rng.bernoulli(cfg.p_intensity) {
        let scale = rng.uniform_in(1.0 - cfg.intensity_scale, 1.0 + cfg.intensity_scale) as f32;
        let shift = rng.uniform_in(-cfg.intensity_shift, cfg.intensity_shift) as f32;
        img = img.map(|v| scale * v + shift);
    }
    img = img.map(|v| v.clamp(0.0, 1.0));
    (img, msk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dims: [usize; 3]) -> (Tensor<f32>, MaskVolume) {
        let [d, h, w] = dims;
        let image = Tensor::from_fn(vec![1, d, h, w], |i| ((i * 37 % 101) as f32) / 101.0);
        let mut mask = MaskVolume::new(3, dims);
        for c in 0..3 {
            for i in (c..d * h * w).step_by(7 + c) {
                mask.class_mut(c)[i] = true;
            }
        }
        (image, mask)
    }

    #[test]
    fn zero_probabilities_is_identity() {
        let (image, mask) = fixture([6, 6, 6]);
        let mut rng = Rng::from_seed(1);
        let (i, m) = augment(&image, &mask, &AugmentationConfig::disabled(), &mut rng);
        assert_eq!(i.data(), image.data());
        assert_eq!(m, mask);
    }

    #[test]
    fn flip_twice_is_identity() {
        let (image, mask) = fixture([5, 6, 7]);
        for axis in 0..3 {
            let (i1, m1) = flip_volume(&image, &mask, axis);
            let (i2, m2) = flip_volume(&i1, &m1, axis);
            assert_eq!(i2.data(), image.data());
            assert_eq!(m2, mask);
        }
    }

    #[test]
    fn flips_preserve_mask_count() {
        let (image, mask) = fixture([6, 5, 4]);
        let count = |m: &MaskVolume| m.data().iter().filter(|&&b| b).count();
        for axis in 0..3 {
            let (_, m) = flip_volume(&image, &mask, axis);
            assert_eq!(count(&m), count(&mask));
        }
    }

    #[test]
    fn augmentation_is_deterministic_per_seed() {
        let (image, mask) = fixture([8, 8, 8]);
        let cfg = AugmentationConfig::default();
        let run = |seed: u64| {
            let mut rng = Rng::from_seed(seed);
            augment(&image, &mask, &cfg, &mut rng)
        };
        let (a_img, a_mask) = run(42);
        let (b_img, b_mask) = run(42);
        assert_eq!(a_img.data(), b_img.data());
        assert_eq!(a_mask, b_mask);
    }

    #[test]
    fn output_stays_in_unit_range() {
        let (image, mask) = fixture([8, 8, 8]);
        let cfg = AugmentationConfig {
            p_flip: 1.0,
            p_affine: 1.0,
            p_grid: 1.0,
            p_coarse_dropout: 1.0,
            p_intensity: 1.0,
            ..Default::default()
        };
        for seed in 0..10 {
            let mut rng = Rng::from_seed(seed);
            let (img, _) = augment(&image, &mask, &cfg, &mut rng);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn spatial_transforms_keep_pair_congruent() {
        // a perfect prediction transformed alongside the truth stays perfect
        let (image, mask) = fixture([8, 8, 8]);
        let cfg = AugmentationConfig {
            p_flip: 1.0,
            p_affine: 1.0,
            p_grid: 1.0,
            p_coarse_dropout: 0.0,
            p_intensity: 0.0,
            ..Default::default()
        };
        for seed in 0..5 {
            let mut rng1 = Rng::from_seed(seed);
            let mut rng2 = Rng::from_seed(seed);
            let (_, truth) = augment(&image, &mask, &cfg, &mut rng1);
            let (_, pred) = augment(&image, &mask, &cfg, &mut rng2);
            for c in 0..3 {
                let d = crate::metrics::dsc(pred.class(c), truth.class(c)).unwrap();
                assert_eq!(d, 1.0);
            }
        }
    }
}
