//! Dataset ingestion, preprocessing, augmentation, fold splitting, and the
//! synthetic data generator.

mod augment;
mod disk;
mod folds;
mod patch;
mod rle;
mod synthetic;
mod volume;

pub use augment::{augment, flip_volume, AugmentationConfig};
pub use disk::{
    load_fold_csv, read_dataset, read_volume_container, save_fold_csv, slice_id,
    volume_to_container, write_dataset, ManifestRow,
};
pub use folds::{stratified_group_kfold, FoldAssignment, ScanStat};
pub use patch::{sample_patch, Patch};
pub use rle::{rle_decode, rle_encode, RleOrder};
pub use synthetic::{generate_synthetic, masks_for, synthetic_geometry, SyntheticGeometry};
pub use volume::{assemble_volume, crop_foreground, normalize_intensity};

use crate::metrics::MaskVolume;
use crate::tensor::Tensor;

/// Canonical class order of the mask channels.
pub const CLASS_NAMES: [&str; 3] = ["large_bowel", "small_bowel", "stomach"];

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == name)
}

/// One 2D slice as read from disk (16-bit grayscale source range).
#[derive(Debug, Clone)]
pub struct SliceRecord {
    pub case_id: String,
    pub day: u32,
    pub slice_index: usize,
    pub height: usize,
    pub width: usize,
    pub image: Vec<u16>,
}

/// Where a cropped volume sits inside its original extents, so predictions
/// can be mapped back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropOffset {
    pub original: [usize; 3],
    pub offset: [usize; 3],
}

impl CropOffset {
    pub fn identity(dims: [usize; 3]) -> Self {
        CropOffset {
            original: dims,
            offset: [0; 3],
        }
    }
}

/// One scan: image volume `(1, D, H, W)` in [0,1] with its 3-class mask.
#[derive(Debug, Clone)]
pub struct VolumeSample {
    pub case_id: String,
    pub day: u32,
    pub image: Tensor<f32>,
    pub mask: MaskVolume,
    pub crop_offset: CropOffset,
    pub warnings: Vec<String>,
}

impl VolumeSample {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    /// Fraction of slices carrying any annotation; the fold stratum signal.
    pub fn annotated_slice_fraction(&self) -> f64 {
        let [d, h, w] = self.dims();
        if d == 0 {
            return 0.0;
        }
        let per_slice = h * w;
        let mut annotated = 0usize;
        for z in 0..d {
            let mut any = false;
            for c in 0..self.mask.classes {
                let data = self.mask.class(c);
                if data[z * per_slice..(z + 1) * per_slice].iter().any(|&b| b) {
                    any = true;
                    break;
                }
            }
            annotated += any as usize;
        }
        annotated as f64 / d as f64
    }
}
