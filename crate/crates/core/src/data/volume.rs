//! Volume assembly from slice stacks and the crop/normalize preprocessing.

use crate::error::DataError;
use crate::metrics::MaskVolume;
use crate::tensor::Tensor;

use super::disk::{slice_id, ManifestRow};
use super::rle::{rle_decode, RleOrder};
use super::{class_index, CropOffset, SliceRecord, VolumeSample};

/// Stack slices of one scan into a volume and decode its mask manifest rows.
/// Slices must share dimensions and form a contiguous index range after
/// sorting; manifest rows for other scans are ignored and missing rows leave
/// the class empty on that slice.
pub fn assemble_volume(
    mut slices: Vec<SliceRecord>,
    manifest: &[ManifestRow],
) -> Result<VolumeSample, DataError> {
    let Some(first) = slices.first() else {
        return Err(DataError::EmptyScan {
            case: String::new(),
            day: 0,
        });
    };
    let case_id = first.case_id.clone();
    let day = first.day;
    let (h, w) = (first.height, first.width);
    for s in &slices {
        if (s.height, s.width) != (h, w) {
            return Err(DataError::MixedSliceDims {
                case: case_id,
                day,
                a: (h, w),
                b: (s.height, s.width),
            });
        }
    }
    slices.sort_by_key(|s| s.slice_index);
    for pair in slices.windows(2) {
        if pair[1].slice_index == pair[0].slice_index {
            return Err(DataError::DuplicateSlice {
                case: case_id,
                day,
                index: pair[1].slice_index,
            });
        }
        if pair[1].slice_index != pair[0].slice_index + 1 {
            return Err(DataError::NonContiguousSlices {
                case: case_id,
                day,
                index: pair[1].slice_index,
            });
        }
    }

    let d = slices.len();
    let mut image = Vec::with_capacity(d * h * w);
    for s in &slices {
        image.extend(s.image.iter().map(|&v| v as f32 / u16::MAX as f32));
    }
    let image = Tensor::from_vec(vec![1, d, h, w], image).expect("stacked shape");

    let mut mask = MaskVolume::new(3, [d, h, w]);
    let id_to_z: std::collections::BTreeMap<String, usize> = slices
        .iter()
        .enumerate()
        .map(|(z, s)| (slice_id(&s.case_id, s.day, s.slice_index), z))
        .collect();
    for (row_idx, row) in manifest.iter().enumerate() {
        let Some(&z) = id_to_z.get(&row.id) else {
            continue;
        };
        let class = class_index(&row.class).ok_or_else(|| DataError::UnknownClass(row.class.clone()))?;
        if row.segmentation.trim().is_empty() {
            continue;
        }
        let decoded = rle_decode(&row.segmentation, h, w, RleOrder::RowMajor).map_err(|e| {
            DataError::BadManifestRow {
                row: row_idx,
                detail: e.to_string(),
            }
        })?;
        let per_slice = h * w;
        let target = &mut mask.class_mut(class)[z * per_slice..(z + 1) * per_slice];
        for (t, &v) in target.iter_mut().zip(&decoded) {
            *t |= v;
        }
    }

    Ok(VolumeSample {
        case_id: slices[0].case_id.clone(),
        day,
        image,
        mask,
        crop_offset: CropOffset::identity([d, h, w]),
        warnings: Vec::new(),
    })
}

/// Tight bounding box of voxels above `threshold_fraction * max intensity`,
/// expanded by `margin_voxels` and applied identically to image and mask.
/// An all-zero volume is returned unchanged with a warning flag.
pub fn crop_foreground(
    v: &VolumeSample,
    threshold_fraction: f64,
    margin_voxels: usize,
) -> VolumeSample {
    let dims = v.dims();
    let data = v.image.data();
    let max = data.iter().fold(0.0f32, |a, &b| a.max(b));
    if max <= 0.0 {
        let mut out = v.clone();
        out.warnings.push("crop_foreground: all-zero volume, returned uncropped".into());
        return out;
    }
    let thr = (threshold_fraction * max as f64) as f32;
    let [dd, hh, ww] = dims;
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    let mut idx = 0usize;
    for z in 0..dd {
        for y in 0..hh {
            for x in 0..ww {
                if data[idx] > thr {
                    any = true;
                    let p = [z, y, x];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
                idx += 1;
            }
        }
    }
    if !any {
        let mut out = v.clone();
        out.warnings
            .push("crop_foreground: nothing above threshold, returned uncropped".into());
        return out;
    }
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(margin_voxels);
        hi[a] = (hi[a] + margin_voxels).min(dims[a] - 1);
    }
    let new_dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];

    let mut image = Vec::with_capacity(new_dims.iter().product());
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            let row = (z * hh + y) * ww;
            image.extend_from_slice(&data[row + lo[2]..row + hi[2] + 1]);
        }
    }
    let image = Tensor::from_vec(
        vec![1, new_dims[0], new_dims[1], new_dims[2]],
        image,
    )
    .expect("crop shape");

    let mut mask = MaskVolume::new(v.mask.classes, new_dims);
    mask.spacing = v.mask.spacing;
    for c in 0..v.mask.classes {
        let src = v.mask.class(c);
        let dst = mask.class_mut(c);
        let mut di = 0usize;
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                let row = (z * hh + y) * ww;
                for x in lo[2]..=hi[2] {
                    dst[di] = src[row + x];
                    di += 1;
                }
            }
        }
    }

    VolumeSample {
        case_id: v.case_id.clone(),
        day: v.day,
        image,
        mask,
        crop_offset: CropOffset {
            original: v.crop_offset.original,
            offset: [
                v.crop_offset.offset[0] + lo[0],
                v.crop_offset.offset[1] + lo[1],
                v.crop_offset.offset[2] + lo[2],
            ],
        },
        warnings: v.warnings.clone(),
    }
}

/// Clip at the 99.5th intensity percentile (nearest-rank) then min-max scale
/// to [0,1]. A constant volume maps to all zeros with a warning flag.
pub fn normalize_intensity(v: &VolumeSample) -> VolumeSample {
    let data = v.image.data();
    let mut sorted: Vec<f32> = data.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    let n = sorted.len();
    let rank = ((0.995 * n as f64).ceil() as usize).clamp(1, n) - 1;
    let clip = sorted[rank];
    let min = sorted[0];
    let mut out = v.clone();
    if clip <= min {
        out.image = Tensor::zeros(v.image.shape().to_vec());
        out.warnings
            .push("normalize_intensity: constant volume, output all zeros".into());
        return out;
    }
    let scale = 1.0 / (clip - min);
    out.image = Tensor::from_vec(
        v.image.shape().to_vec(),
        data.iter().map(|&x| (x.min(clip) - min) * scale).collect(),
    )
    .expect("shape");
    out
}
