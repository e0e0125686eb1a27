//! Attribution overlays: a grayscale anatomy slice blended with a
//! color-mapped attribution slice, optionally next to the ground-truth mask
//! panel. Rendering is fully deterministic for fixed inputs.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde_json::json;

use crate::container::Container;
use crate::error::{FormatError, XaiError};
use crate::metrics::MaskVolume;
use crate::tensor::{Scalar, Tensor};

use super::{AttributionMap, AttributionMethod};

/// Sequential warm colormap (black -> red -> yellow -> white), `t` in [0,1].
fn warm(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let seg = |a: f64, b: f64, t: f64| -> f64 { a + (b - a) * t };
    let (r, g, b) = if t < 1.0 / 3.0 {
        let u = t * 3.0;
        (seg(0.05, 0.85, u), 0.02, seg(0.05, 0.1, u))
    } else if t < 2.0 / 3.0 {
        let u = (t - 1.0 / 3.0) * 3.0;
        (seg(0.85, 1.0, u), seg(0.02, 0.85, u), 0.1)
    } else {
        let u = (t - 2.0 / 3.0) * 3.0;
        (1.0, seg(0.85, 1.0, u), seg(0.1, 0.95, u))
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Diverging colormap (blue -> white -> red), `t` in [-1,1].
fn diverging(t: f64) -> [u8; 3] {
    let t = t.clamp(-1.0, 1.0);
    let lerp = |a: f64, b: f64, u: f64| a + (b - a) * u;
    let (r, g, b) = if t < 0.0 {
        let u = t + 1.0; // 0 at -1, 1 at 0
        (lerp(0.13, 1.0, u), lerp(0.3, 1.0, u), lerp(0.85, 1.0, u))
    } else {
        (1.0, lerp(1.0, 0.2, t), lerp(1.0, 0.15, t))
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

#[derive(Debug, Clone)]
pub struct OverlayOptions {
    /// Blend strength of the color layer at maximum attribution.
    pub alpha: f64,
    /// Append a side-by-side ground-truth panel for this class.
    pub truth_panel: bool,
}

impl Default for OverlayOptions {
    fn default() -> Self {
        OverlayOptions {
            alpha: 0.6,
            truth_panel: false,
        }
    }
}

fn extract_slice<T: Scalar>(
    values: &[T],
    dims: [usize; 3],
    axis: usize,
    index: usize,
) -> (usize, usize, Vec<f64>) {
    let [d, h, w] = dims;
    match axis {
        0 => {
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    out.push(values[(index * h + y) * w + x].as_f64());
                }
            }
            (h, w, out)
        }
        1 => {
            let mut out = Vec::with_capacity(d * w);
            for z in 0..d {
                for x in 0..w {
                    out.push(values[(z * h + index) * w + x].as_f64());
                }
            }
            (d, w, out)
        }
        _ => {
            let mut out = Vec::with_capacity(d * h);
            for z in 0..d {
                for y in 0..h {
                    out.push(values[(z * h + y) * w + index].as_f64());
                }
            }
            (d, h, out)
        }
    }
}

/// Render one slice of the attribution map over the anatomy volume
/// `(1, D, H, W)` as a PNG. Signed methods use the diverging colormap
/// normalized symmetrically; GradCAM uses the sequential warm map.
pub fn render_overlay<T: Scalar>(
    map: &AttributionMap<T>,
    volume: &Tensor<T>,
    truth: Option<&MaskVolume>,
    slice_axis: usize,
    slice_index: usize,
    options: &OverlayOptions,
    out_path: &Path,
) -> Result<(), XaiError> {
    let dims = [volume.shape()[1], volume.shape()[2], volume.shape()[3]];
    if slice_axis > 2 {
        return Err(XaiError::SliceOutOfRange {
            index: slice_axis,
            extent: 3,
        });
    }
    if slice_index >= dims[slice_axis] {
        return Err(XaiError::SliceOutOfRange {
            index: slice_index,
            extent: dims[slice_axis],
        });
    }
    let (rows, cols, anatomy) = extract_slice(volume.data(), dims, slice_axis, slice_index);
    let (_, _, attribution) = extract_slice(map.values.data(), dims, slice_axis, slice_index);

    // normalize over the whole map so slices are comparable
    let max_mag = map
        .values
        .data()
        .iter()
        .fold(0.0f64, |a, &v| a.max(v.as_f64().abs()));

    let panels = if options.truth_panel && truth.is_some() {
        2
    } else {
        1
    };
    let mut img = image::RgbImage::new((cols * panels) as u32, rows as u32);
    for r in 0..rows {
        for c in 0..cols {
            let gray = (anatomy[r * cols + c].clamp(0.0, 1.0) * 255.0) as u8;
            let v = attribution[r * cols + c];
            let (color, strength) = if max_mag == 0.0 {
                ([0u8; 3], 0.0)
            } else if map.method.signed() {
                (diverging(v / max_mag), (v / max_mag).abs())
            } else {
                (warm(v / max_mag), v / max_mag)
            };
            let a = options.alpha * strength;
            let px = [
                ((1.0 - a) * gray as f64 + a * color[0] as f64) as u8,
                ((1.0 - a) * gray as f64 + a * color[1] as f64) as u8,
                ((1.0 - a) * gray as f64 + a * color[2] as f64) as u8,
            ];
            img.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    if panels == 2 {
        let truth = truth.expect("panel requested with truth");
        let (_, _, tslice) = extract_slice(
            &truth
                .class(map.class_id)
                .iter()
                .map(|&b| if b { 1.0f64 } else { 0.0 })
                .collect::<Vec<f64>>(),
            truth.dims,
            slice_axis,
            slice_index,
        );
        for r in 0..rows {
            for c in 0..cols {
                let on = tslice[r * cols + c] > 0.5;
                let gray = (anatomy[r * cols + c].clamp(0.0, 1.0) * 255.0) as u8;
                let px = if on {
                    [60, 220, 60]
                } else {
                    [gray, gray, gray]
                };
                img.put_pixel((cols + c) as u32, r as u32, image::Rgb(px));
            }
        }
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(out_path)
        .map_err(|e| XaiError::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}

/// Pack an attribution map into the shared binary container.
pub fn attribution_to_container<T: Scalar>(map: &AttributionMap<T>) -> Container {
    let mut c = Container::new(map.meta_json());
    c.put_tensor("values", &map.values);
    c
}

pub fn read_attribution_container(path: &Path) -> Result<AttributionMap<f32>, FormatError> {
    let c = Container::read_from(path)?;
    let values: Tensor<f32> = c.tensor("values")?;
    let method = c.meta["method"]
        .as_str()
        .and_then(AttributionMethod::parse)
        .ok_or_else(|| FormatError::Header("unknown attribution method".into()))?;
    Ok(AttributionMap {
        method,
        class_id: c.meta["class_id"].as_u64().unwrap_or(0) as usize,
        pixel_count: c.meta["pixel_count"].as_u64().unwrap_or(0) as usize,
        layer: c.meta["layer"].as_str().map(String::from),
        values,
    })
}

/// Append one JSON line describing a saved map to the sidecar log.
pub fn append_sidecar(
    sidecar_path: &Path,
    map_meta: &serde_json::Value,
    checksum_hex: &str,
) -> std::io::Result<()> {
    if let Some(parent) = sidecar_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut line = map_meta.clone();
    line["checksum"] = json!(checksum_hex);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(sidecar_path)?;
    writeln!(f, "{line}")?;
    Ok(())
}
