//! On-disk dataset layout and caches.
//!
//! A dataset directory holds `images/{case}_day{DD}_slice_{SSSS}.png`
//! (16-bit grayscale) plus `manifest.csv` with columns
//! `id,class,segmentation` (run-length text, row-major). Preprocessed
//! volumes and fold assignments use the shared binary container and a
//! two-column CSV respectively.

use std::fs;
use std::path::Path;

use serde_json::json;

use crate::container::Container;
use crate::error::{DataError, FormatError};
use crate::metrics::MaskVolume;
use crate::tensor::Tensor;

use super::folds::FoldAssignment;
use super::rle::{rle_encode, RleOrder};
use super::{CropOffset, SliceRecord, VolumeSample};

/// Manifest/slice identifier: `case001_day02_slice_0013`.
pub fn slice_id(case_id: &str, day: u32, slice_index: usize) -> String {
    format!("{case_id}_day{day:02}_slice_{slice_index:04}")
}

fn parse_slice_id(id: &str) -> Option<(String, u32, usize)> {
    let (head, slice) = id.rsplit_once("_slice_")?;
    let (case, day) = head.rsplit_once("_day")?;
    Some((case.to_string(), day.parse().ok()?, slice.parse().ok()?))
}

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub id: String,
    pub class: String,
    pub segmentation: String,
}

/// Write a sample set as a paper-conformant slice stack plus RLE manifest.
pub fn write_dataset(dir: &Path, samples: &[VolumeSample]) -> Result<(), DataError> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut writer = csv::Writer::from_path(dir.join("manifest.csv"))?;
    writer.write_record(["id", "class", "segmentation"])?;
    for s in samples {
        let [d, h, w] = s.dims();
        let data = s.image.data();
        for z in 0..d {
            let id = slice_id(&s.case_id, s.day, z);
            let plane: Vec<u16> = data[z * h * w..(z + 1) * h * w]
                .iter()
                .map(|&v| (v * u16::MAX as f32).round() as u16)
                .collect();
            let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
                image::ImageBuffer::from_vec(w as u32, h as u32, plane)
                    .expect("plane dimensions");
            let path = images.join(format!("{id}.png"));
            buf.save(&path).map_err(|e| DataError::Image {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            for (c, &class) in super::CLASS_NAMES.iter().enumerate() {
                let slice_mask = &s.mask.class(c)[z * h * w..(z + 1) * h * w];
                writer.write_record([
                    id.as_str(),
                    class,
                    rle_encode(slice_mask, h, w, RleOrder::RowMajor).as_str(),
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// Read a dataset directory back: slices grouped per scan (sorted by case
/// then day) plus all manifest rows.
#[allow(clippy::type_complexity)]
pub fn read_dataset(dir: &Path) -> Result<(Vec<Vec<SliceRecord>>, Vec<ManifestRow>), DataError> {
    let images = dir.join("images");
    let mut grouped: std::collections::BTreeMap<(String, u32), Vec<SliceRecord>> =
        std::collections::BTreeMap::new();
    for entry in fs::read_dir(&images)? {
        let entry = entry?;
        let path = entry.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some((case_id, day, slice_index)) = parse_slice_id(stem) else {
            return Err(DataError::Image {
                path: path.display().to_string(),
                detail: "file name is not case_dayDD_slice_SSSS".into(),
            });
        };
        let img = image::open(&path)
            .map_err(|e| DataError::Image {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?
            .into_luma16();
        let (w, h) = img.dimensions();
        grouped.entry((case_id.clone(), day)).or_default().push(SliceRecord {
            case_id,
            day,
            slice_index,
            height: h as usize,
            width: w as usize,
            image: img.into_raw(),
        });
    }

    let manifest_path = dir.join("manifest.csv");
    let mut rows = Vec::new();
    if manifest_path.exists() {
        let mut reader = csv::Reader::from_path(&manifest_path)?;
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() < 2 {
                return Err(DataError::BadManifestRow {
                    row: i,
                    detail: format!("{} columns", record.len()),
                });
            }
            rows.push(ManifestRow {
                id: record[0].to_string(),
                class: record[1].to_string(),
                segmentation: record.get(2).unwrap_or("").to_string(),
            });
        }
    }
    Ok((grouped.into_values().collect(), rows))
}

/// Pack a volume sample into the shared binary container.
pub fn volume_to_container(v: &VolumeSample) -> Container {
    let mut c = Container::new(json!({
        "kind": "volume",
        "case_id": v.case_id,
        "day": v.day,
        "crop_original": v.crop_offset.original,
        "crop_offset": v.crop_offset.offset,
        "spacing": v.mask.spacing,
        "warnings": v.warnings,
    }));
    c.put_tensor("image", &v.image);
    let mask_bytes: Vec<u8> = v.mask.data().iter().map(|&b| b as u8).collect();
    let [d, h, w] = v.mask.dims;
    c.put_u8("mask", vec![v.mask.classes, d, h, w], &mask_bytes);
    c
}

pub fn read_volume_container(path: &Path) -> Result<VolumeSample, DataError> {
    let c = Container::read_from(path)?;
    let image: Tensor<f32> = c.tensor("image")?;
    let (mshape, mdata) = c.u8_entry("mask")?;
    if mshape.len() != 4 {
        return Err(FormatError::Header(format!("mask entry has shape {mshape:?}")).into());
    }
    let mut mask = MaskVolume::from_data(
        mshape[0],
        [mshape[1], mshape[2], mshape[3]],
        mdata.iter().map(|&b| b != 0).collect(),
    )
    .map_err(|_| FormatError::Header("mask entry size mismatch".into()))?;
    let spacing = c.meta["spacing"]
        .as_array()
        .map(|a| {
            let mut s = [1.0f64; 3];
            for (i, v) in a.iter().take(3).enumerate() {
                s[i] = v.as_f64().unwrap_or(1.0);
            }
            s
        })
        .unwrap_or([1.0; 3]);
    mask.spacing = spacing;
    let arr3 = |key: &str| -> [usize; 3] {
        let mut out = [0usize; 3];
        if let Some(a) = c.meta[key].as_array() {
            for (i, v) in a.iter().take(3).enumerate() {
                out[i] = v.as_u64().unwrap_or(0) as usize;
            }
        }
        out
    };
    Ok(VolumeSample {
        case_id: c.meta["case_id"].as_str().unwrap_or("").to_string(),
        day: c.meta["day"].as_u64().unwrap_or(0) as u32,
        image,
        mask,
        crop_offset: CropOffset {
            original: arr3("crop_original"),
            offset: arr3("crop_offset"),
        },
        warnings: c.meta["warnings"]
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(String::from))
                    .collect()
            })
            .unwrap_or_default(),
    })
}

pub fn save_fold_csv(path: &Path, folds: &FoldAssignment) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["case_id", "fold"])?;
    for (case, fold) in &folds.fold_of {
        writer.write_record([case.as_str(), &fold.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_fold_csv(path: &Path) -> Result<FoldAssignment, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut fold_of = Vec::new();
    let mut k = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let fold: usize = record
            .get(1)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| DataError::BadManifestRow {
                row: i,
                detail: "bad fold column".into(),
            })?;
        k = k.max(fold + 1);
        fold_of.push((record[0].to_string(), fold));
    }
    fold_of.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(FoldAssignment { k, fold_of })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assemble_volume, generate_synthetic};
    use crate::rng::Rng;

    #[test]
    fn dataset_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rng = Rng::from_seed(21);
        let samples = generate_synthetic(2, [16, 18, 20], &rng).unwrap();
        write_dataset(dir.path(), &samples).unwrap();

        let (scans, manifest) = read_dataset(dir.path()).unwrap();
        assert_eq!(
            scans.len(),
            samples.len(),
            "scan count after re-ingest differs"
        );
        for scan in scans {
            let v = assemble_volume(scan, &manifest).unwrap();
            let orig = samples
                .iter()
                .find(|s| s.case_id == v.case_id && s.day == v.day)
                .expect("scan matches an emitted sample");
            assert_eq!(v.image.data(), orig.image.data(), "image bits differ");
            assert_eq!(v.mask, orig.mask, "mask differs");
        }
    }

    #[test]
    fn volume_container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rng = Rng::from_seed(22);
        let mut samples = generate_synthetic(1, [16, 16, 16], &rng).unwrap();
        samples[0].warnings.push("test warning".into());
        let path = dir.path().join("vol.xvol");
        volume_to_container(&samples[0]).write_to(&path).unwrap();
        let back = read_volume_container(&path).unwrap();
        assert_eq!(back.case_id, samples[0].case_id);
        assert_eq!(back.image.data(), samples[0].image.data());
        assert_eq!(back.mask, samples[0].mask);
        assert_eq!(back.warnings, samples[0].warnings);
    }

    #[test]
    fn fold_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let folds = FoldAssignment {
            k: 3,
            fold_of: vec![
                ("case000".into(), 0),
                ("case001".into(), 2),
                ("case002".into(), 1),
            ],
        };
        let path = dir.path().join("folds.csv");
        save_fold_csv(&path, &folds).unwrap();
        let back = load_fold_csv(&path).unwrap();
        assert_eq!(back, folds);
    }

    #[test]
    fn slice_id_parses_back() {
        let id = slice_id("case012", 3, 47);
        assert_eq!(id, "case012_day03_slice_0047");
        assert_eq!(
            parse_slice_id(&id),
            Some(("case012".to_string(), 3, 47))
        );
    }
}
