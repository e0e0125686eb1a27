//! Random spatial patch extraction with symmetric zero padding for volumes
//! smaller than the patch.

use crate::metrics::MaskVolume;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::VolumeSample;

#[derive(Debug, Clone)]
pub struct Patch {
    pub image: Tensor<f32>,
    pub mask: MaskVolume,
    /// Patch corner in the (possibly padded) volume grid.
    pub corner: [usize; 3],
}

fn pad_amounts(dim: usize, target: usize) -> (usize, usize) {
    if dim >= target {
        return (0, 0);
    }
    let total = target - dim;
    (total / 2, total - total / 2)
}

/// Uniform-random patch of `size` (D,H,W). Volumes smaller than the patch
/// along any axis are zero-padded symmetrically first; image and mask are
/// cropped congruently.
pub fn sample_patch(v: &VolumeSample, size: [usize; 3], rng: &mut Rng) -> Patch {
    let dims = v.dims();
    let padded: [usize; 3] = [
        dims[0].max(size[0]),
        dims[1].max(size[1]),
        dims[2].max(size[2]),
    ];
    let before = [
        pad_amounts(dims[0], size[0]).0,
        pad_amounts(dims[1], size[1]).0,
        pad_amounts(dims[2], size[2]).0,
    ];
    let corner = [
        rng.below(padded[0] - size[0] + 1),
        rng.below(padded[1] - size[1] + 1),
        rng.below(padded[2] - size[2] + 1),
    ];

    let img = v.image.data();
    let [_, hh, ww] = [dims[0], dims[1], dims[2]];
    let mut image = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] {
        let src_z = (corner[0] + z) as isize - before[0] as isize;
        for y in 0..size[1] {
            let src_y = (corner[1] + y) as isize - before[1] as isize;
            for x in 0..size[2] {
                let src_x = (corner[2] + x) as isize - before[2] as isize;
                let inside = src_z >= 0
                    && src_y >= 0
                    && src_x >= 0
                    && (src_z as usize) < dims[0]
                    && (src_y as usize) < dims[1]
                    && (src_x as usize) < dims[2];
                image.push(if inside {
                    img[(src_z as usize * hh + src_y as usize) * ww + src_x as usize]
                } else {
                    0.0
                });
            }
        }
    }
    let image = Tensor::from_vec(vec![1, size[0], size[1], size[2]], image).expect("patch shape");

    let mut mask = MaskVolume::new(v.mask.classes, size);
    mask.spacing = v.mask.spacing;
    for c in 0..v.mask.classes {
        let src = v.mask.class(c);
        let dst = mask.class_mut(c);
        let mut di = 0usize;
        for z in 0..size[0] {
            let src_z = (corner[0] + z) as isize - before[0] as isize;
            for y in 0..size[1] {
                let src_y = (corner[1] + y) as isize - before[1] as isize;
                for x in 0..size[2] {
                    let src_x = (corner[2] + x) as isize - before[2] as isize;
                    let inside = src_z >= 0
                        && src_y >= 0
                        && src_x >= 0
                        && (src_z as usize) < dims[0]
                        && (src_y as usize) < dims[1]
                        && (src_x as usize) < dims[2];
                    dst[di] = inside
                        && src[(src_z as usize * hh + src_y as usize) * ww + src_x as usize];
                    di += 1;
                }
            }
        }
    }

    Patch {
        image,
        mask,
        corner,
    }
}
