//! Synthetic desk-scale dataset: each scan holds a bright ellipsoid
//! (stomach), a curved tube (large bowel), and a thin winding tube (small
//! bowel) with exact analytic masks, over a noisy background.
//!
//! Geometry is drawn per `(case, day)` from rng streams derived off the
//! global seed, so generation is bitwise deterministic and day-to-day organ
//! movement comes for free. Image intensities are quantized to the 16-bit
//! grid before conversion to float, which makes the PNG round-trip exact.

use crate::error::DataError;
use crate::metrics::MaskVolume;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{CropOffset, VolumeSample};

/// Analytic scene description for one scan.
#[derive(Debug, Clone)]
pub struct SyntheticGeometry {
    pub stomach_center: [f64; 3],
    pub stomach_radii: [f64; 3],
    /// Sampled centerline of the large bowel and its tube radius.
    pub large_bowel: (Vec<[f64; 3]>, f64),
    /// Sampled centerline of the small bowel and its tube radius.
    pub small_bowel: (Vec<[f64; 3]>, f64),
}

impl SyntheticGeometry {
    /// Membership predicates over voxel centers; class order matches
    /// `CLASS_NAMES` (large bowel, small bowel, stomach).
    pub fn class_predicate(&self, class: usize, p: [f64; 3]) -> bool {
        match class {
            0 => tube_contains(&self.large_bowel.0, self.large_bowel.1, p),
            1 => tube_contains(&self.small_bowel.0, self.small_bowel.1, p),
            2 => {
                let mut acc = 0.0;
                for a in 0..3 {
                    let t = (p[a] - self.stomach_center[a]) / self.stomach_radii[a];
                    acc += t * t;
                }
                acc <= 1.0
            }
            _ => false,
        }
    }
}

fn tube_contains(samples: &[[f64; 3]], radius: f64, p: [f64; 3]) -> bool {
    let r2 = radius * radius;
    samples.iter().any(|s| {
        let dz = p[0] - s[0];
        let dy = p[1] - s[1];
        let dx = p[2] - s[2];
        dz * dz + dy * dy + dx * dx <= r2
    })
}

/// Scene parameters for one `(case, day)` pair under the given seed stream.
pub fn synthetic_geometry(dims: [usize; 3], rng: &mut Rng) -> SyntheticGeometry {
    let [d, h, w] = [dims[0] as f64, dims[1] as f64, dims[2] as f64];
    let min_hw = h.min(w);

    let stomach_center = [
        d * rng.uniform_in(0.35, 0.6),
        h * rng.uniform_in(0.25, 0.4),
        w * rng.uniform_in(0.3, 0.5),
    ];
    let stomach_radii = [
        (d * rng.uniform_in(0.14, 0.22)).max(1.5),
        (h * rng.uniform_in(0.1, 0.16)).max(1.5),
        (w * rng.uniform_in(0.1, 0.16)).max(1.5),
    ];

    // large bowel: a C-shaped arc sweeping the lower half, drifting in depth
    let arc_center = [h * 0.62, w * rng.uniform_in(0.45, 0.55)];
    let arc_r = min_hw * rng.uniform_in(0.26, 0.34);
    let phi0 = rng.uniform_in(-0.4, 0.1);
    let span = rng.uniform_in(1.2, 1.6) * std::f64::consts::PI;
    let z0 = d * rng.uniform_in(0.3, 0.45);
    let z1 = d * rng.uniform_in(0.55, 0.7);
    let n = 120;
    let large: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let phi = phi0 + span * t;
            [
                z0 + (z1 - z0) * t,
                arc_center[0] + arc_r * 0.8 * phi.sin(),
                arc_center[1] + arc_r * phi.cos(),
            ]
        })
        .collect();
    let large_r = (min_hw * 0.055).max(1.4);

    // small bowel: a thinner winding path through the middle
    let amp_h = h * rng.uniform_in(0.12, 0.2);
    let amp_w = w * rng.uniform_in(0.12, 0.2);
    let freq = rng.uniform_in(1.5, 2.5);
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let zc0 = d * rng.uniform_in(0.25, 0.35);
    let zc1 = d * rng.uniform_in(0.65, 0.78);
    let small: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let ang = std::f64::consts::TAU * freq * t + phase;
            [
                zc0 + (zc1 - zc0) * t,
                h * 0.45 + amp_h * ang.sin(),
                w * 0.5 + amp_w * (1.7 * ang).cos(),
            ]
        })
        .collect();
    let small_r = (min_hw * 0.032).max(1.0);

    SyntheticGeometry {
        stomach_center,
        stomach_radii,
        large_bowel: (large, large_r),
        small_bowel: (small, small_r),
    }
}

fn rasterize_tube(mask: &mut [bool], dims: [usize; 3], samples: &[[f64; 3]], radius: f64) {
    let [dd, hh, ww] = dims;
    let r2 = radius * radius;
    for s in samples {
        let zlo = ((s[0] - radius).floor().max(0.0)) as usize;
        let zhi = ((s[0] + radius).ceil() as usize).min(dd.saturating_sub(1));
        let ylo = ((s[1] - radius).floor().max(0.0)) as usize;
        let yhi = ((s[1] + radius).ceil() as usize).min(hh.saturating_sub(1));
        let xlo = ((s[2] - radius).floor().max(0.0)) as usize;
        let xhi = ((s[2] + radius).ceil() as usize).min(ww.saturating_sub(1));
        if s[0] + radius < 0.0 || s[1] + radius < 0.0 || s[2] + radius < 0.0 {
            continue;
        }
        for z in zlo..=zhi {
            let dz = z as f64 - s[0];
            for y in ylo..=yhi {
                let dy = y as f64 - s[1];
                let row = (z * hh + y) * ww;
                for x in xlo..=xhi {
                    let dx = x as f64 - s[2];
                    if dz * dz + dy * dy + dx * dx <= r2 {
                        mask[row + x] = true;
                    }
                }
            }
        }
    }
}

fn rasterize_ellipsoid(mask: &mut [bool], dims: [usize; 3], center: [f64; 3], radii: [f64; 3]) {
    let [dd, hh, ww] = dims;
    for z in 0..dd {
        let tz = (z as f64 - center[0]) / radii[0];
        if tz.abs() > 1.0 {
            continue;
        }
        for y in 0..hh {
            let ty = (y as f64 - center[1]) / radii[1];
            if tz * tz + ty * ty > 1.0 {
                continue;
            }
            let row = (z * hh + y) * ww;
            for x in 0..ww {
                let tx = (x as f64 - center[2]) / radii[2];
                if tz * tz + ty * ty + tx * tx <= 1.0 {
                    mask[row + x] = true;
                }
            }
        }
    }
}

const CLASS_INTENSITY: [f64; 3] = [0.55, 0.38, 0.85];
const BACKGROUND: f64 = 0.12;
const NOISE_SIGMA: f64 = 0.02;

/// Build the mask volume for a geometry.
pub fn masks_for(geometry: &SyntheticGeometry, dims: [usize; 3]) -> MaskVolume {
    let mut mask = MaskVolume::new(3, dims);
    rasterize_tube(
        mask.class_mut(0),
        dims,
        &geometry.large_bowel.0,
        geometry.large_bowel.1,
    );
    rasterize_tube(
        mask.class_mut(1),
        dims,
        &geometry.small_bowel.0,
        geometry.small_bowel.1,
    );
    rasterize_ellipsoid(
        mask.class_mut(2),
        dims,
        geometry.stomach_center,
        geometry.stomach_radii,
    );
    mask
}

/// Generate `cases` cases of 1-5 scans each. Shapes below 16 voxels on any
/// axis are rejected.
pub fn generate_synthetic(
    cases: usize,
    dims: [usize; 3],
    rng: &Rng,
) -> Result<Vec<VolumeSample>, DataError> {
    if dims.iter().any(|&e| e < 16) {
        return Err(DataError::DegenerateShape {
            shape: (dims[0], dims[1], dims[2]),
        });
    }
    let mut out = Vec::new();
    for c in 0..cases {
        let days = 1 + rng.derive(&[1, c as u64]).below(5);
        for day in 0..days {
            let mut grng = rng.derive(&[2, c as u64, day as u64]);
            let geometry = synthetic_geometry(dims, &mut grng);
            let mask = masks_for(&geometry, dims);

            let n = dims[0] * dims[1] * dims[2];
            let mut noise_rng = rng.derive(&[3, c as u64, day as u64]);
            let mut image = Vec::with_capacity(n);
            for i in 0..n {
                let mut v = BACKGROUND;
                for class in 0..3 {
                    if mask.class(class)[i] {
                        v = v.max(CLASS_INTENSITY[class]);
                    }
                }
                v += NOISE_SIGMA * noise_rng.normal();
                let q = (v.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16;
                image.push(q as f32 / u16::MAX as f32);
            }
            out.push(VolumeSample {
                case_id: format!("case{c:03}"),
                day: day as u32,
                image: Tensor::from_vec(vec![1, dims[0], dims[1], dims[2]], image)
                    .expect("shape"),
                mask,
                crop_offset: CropOffset::identity(dims),
                warnings: Vec::new(),
            });
        }
    }
    Ok(out)
}
