//! Subcommand implementations. Each writes its artifacts under the output
//! directory and returns the paths to be checksummed into the run log.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;
use xseg3d_core::container::Container;
use xseg3d_core::data::{
    assemble_volume, crop_foreground, generate_synthetic, load_fold_csv, normalize_intensity,
    read_dataset, read_volume_container, rle_encode, save_fold_csv, slice_id,
    stratified_group_kfold, volume_to_container, write_dataset, RleOrder, ScanStat, VolumeSample,
    CLASS_NAMES,
};
use xseg3d_core::metrics::{evaluate_masks, write_metrics_csv, MaskVolume};
use xseg3d_core::train::{threshold_probs, write_history_csv};
use xseg3d_core::xai::{
    append_sidecar, attribution_to_container, deeplift_rescale, grad_cam, guided_backprop,
    guided_grad_cam, read_attribution_container, render_overlay, seg_grad_cam_additivity_probe,
    AttributionMap, AttributionMethod, Baseline, OverlayOptions, PixelSet,
};
use xseg3d_core::{
    ensemble_predict, finetune, sliding_window_predict, train_fold, Checkpoint, Model, Rng,
};

use crate::config::RunConfig;
use crate::manifest::sha256_hex;

pub fn synth(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rng = Rng::from_seed(cfg.run.seed);
    let samples = generate_synthetic(cfg.synthetic.cases, cfg.synthetic.dims, &rng)?;
    let data_dir = out_dir.join("data");
    write_dataset(&data_dir, &samples)?;
    println!(
        "wrote {} scans from {} cases to {}",
        samples.len(),
        cfg.synthetic.cases,
        data_dir.display()
    );
    Ok(vec![data_dir.join("manifest.csv")])
}

pub fn ingest(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (scans, manifest) = read_dataset(data_dir)?;
    let volumes_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&volumes_dir)?;
    let mut outputs = Vec::new();
    for slices in scans {
        let raw = assemble_volume(slices, &manifest)?;
        let cropped = crop_foreground(
            &raw,
            cfg.preprocess.threshold_fraction,
            cfg.preprocess.margin_voxels,
        );
        let sample = normalize_intensity(&cropped);
        for w in &sample.warnings {
            eprintln!("warning: {}/{}: {w}", sample.case_id, sample.day);
        }
        let path = volumes_dir.join(format!("{}_day{:02}.xvol", sample.case_id, sample.day));
        volume_to_container(&sample).write_to(&path)?;
        outputs.push(path);
    }
    println!("ingested {} volumes into {}", outputs.len(), volumes_dir.display());
    Ok(outputs)
}

pub fn load_volumes(dir: &Path) -> Result<Vec<VolumeSample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading volume dir {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("xvol"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .xvol volumes under {}", dir.display());
    }
    paths
        .iter()
        .map(|p| Ok(read_volume_container(p)?))
        .collect()
}

pub fn split(cfg: &RunConfig, volumes_dir: &Path, k: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let volumes = load_volumes(volumes_dir)?;
    let stats: Vec<ScanStat> = volumes
        .iter()
        .map(|s| ScanStat {
            case_id: s.case_id.clone(),
            day: s.day,
            annotated_slices: (s.annotated_slice_fraction() * s.dims()[0] as f64).round() as usize,
            total_slices: s.dims()[0],
        })
        .collect();
    let mut rng = Rng::from_seed(cfg.run.seed).derive(&[b's' as u64]);
    let folds = stratified_group_kfold(&stats, k, &mut rng)?;
    let path = out_dir.join("folds.csv");
    save_fold_csv(&path, &folds)?;
    let mut val_counts = vec![0usize; k];
    for s in &stats {
        val_counts[folds.fold(&s.case_id).expect("assigned")] += 1;
    }
    println!("assigned {} cases over {k} folds; validation scans per fold {val_counts:?}", folds.fold_of.len());
    Ok(vec![path])
}

pub fn train(
    cfg: &RunConfig,
    volumes_dir: &Path,
    folds_path: &Path,
    fold: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let volumes = load_volumes(volumes_dir)?;
    let folds = load_fold_csv(folds_path)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.run.seed;
    let periodic = out_dir.join("periodic");
    let outcome = train_fold(
        fold,
        &folds,
        &volumes,
        cfg.unet.clone(),
        &train_cfg,
        &cfg.augment,
        (train_cfg.checkpoint_every > 0).then_some(periodic.as_path()),
    )?;
    let ckpt_path = out_dir.join(format!("fold{fold}.ckpt"));
    outcome.best.save(&ckpt_path)?;
    let hist_path = out_dir.join(format!("fold{fold}_history.csv"));
    write_history_csv(&hist_path, &outcome.history)?;
    let last = outcome.history.last().expect("epochs > 0");
    let best_composite = outcome
        .history
        .iter()
        .map(|r| r.val_composite)
        .fold(0.0, f64::max);
    println!(
        "fold {fold}: {} epochs, final train soft-DSC {:.4}, best val composite {:.4} (epoch {})",
        outcome.history.len(),
        last.train_soft_dsc,
        best_composite,
        outcome.best.epoch
    );
    Ok(vec![ckpt_path, hist_path])
}

pub fn finetune_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    volumes_dir: &Path,
    folds_path: &Path,
    fold: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let volumes = load_volumes(volumes_dir)?;
    let folds = load_fold_csv(folds_path)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.run.seed;
    let outcome = finetune(&ckpt, fold, &folds, &volumes, &train_cfg, &cfg.augment, None)?;
    let ckpt_path = out_dir.join(format!("fold{fold}_finetuned.ckpt"));
    outcome.best.save(&ckpt_path)?;
    let hist_path = out_dir.join(format!("fold{fold}_finetune_history.csv"));
    write_history_csv(&hist_path, &outcome.history)?;
    println!(
        "finetuned fold {fold} for {} epochs",
        outcome.history.len()
    );
    Ok(vec![ckpt_path, hist_path])
}

fn filter_volumes<'a>(
    volumes: &'a [VolumeSample],
    case: Option<&str>,
    day: Option<u32>,
) -> Vec<&'a VolumeSample> {
    volumes
        .iter()
        .filter(|v| case.is_none_or(|c| v.case_id == c))
        .filter(|v| day.is_none_or(|d| v.day == d))
        .collect()
}

/// Map a mask on the cropped grid back onto the original slice grid.
fn uncrop_mask(mask: &MaskVolume, sample: &VolumeSample) -> MaskVolume {
    let orig = sample.crop_offset.original;
    let off = sample.crop_offset.offset;
    let mut out = MaskVolume::new(mask.classes, orig);
    out.spacing = mask.spacing;
    for c in 0..mask.classes {
        for z in 0..mask.dims[0] {
            for y in 0..mask.dims[1] {
                for x in 0..mask.dims[2] {
                    if mask.get(c, z, y, x) {
                        out.set(c, z + off[0], y + off[1], x + off[2], true);
                    }
                }
            }
        }
    }
    out
}

fn save_mask(path: &Path, mask: &MaskVolume, sample: &VolumeSample) -> Result<()> {
    let mut c = Container::new(json!({
        "kind": "mask",
        "case_id": sample.case_id,
        "day": sample.day,
        "crop_original": sample.crop_offset.original,
        "crop_offset": sample.crop_offset.offset,
    }));
    let bytes: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
    c.put_u8(
        "mask",
        vec![mask.classes, mask.dims[0], mask.dims[1], mask.dims[2]],
        &bytes,
    );
    c.write_to(path)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<(String, u32, MaskVolume)> {
    let c = Container::read_from(path)?;
    let (shape, data) = c.u8_entry("mask")?;
    let mask = MaskVolume::from_data(
        shape[0],
        [shape[1], shape[2], shape[3]],
        data.iter().map(|&b| b != 0).collect(),
    )
    .map_err(|e| anyhow!("bad mask entry: {e}"))?;
    Ok((
        c.meta["case_id"].as_str().unwrap_or("").to_string(),
        c.meta["day"].as_u64().unwrap_or(0) as u32,
        mask,
    ))
}

fn write_prediction_csv(
    path: &Path,
    rows: &[(String, u32, MaskVolume)],
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["id", "class", "predicted"])?;
    for (case, day, mask) in rows {
        let [d, h, w] = mask.dims;
        for z in 0..d {
            let id = slice_id(case, *day, z);
            for (c, &class) in CLASS_NAMES.iter().enumerate() {
                let slice = &mask.class(c)[z * h * w..(z + 1) * h * w];
                writer.write_record([
                    id.as_str(),
                    class,
                    rle_encode(slice, h, w, RleOrder::RowMajor).as_str(),
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

fn predict_masks(
    models: &[Model<f32>],
    volumes: &[&VolumeSample],
    cfg: &RunConfig,
    out_dir: &Path,
    tag: &str,
) -> Result<Vec<PathBuf>> {
    let mask_dir = out_dir.join(format!("{tag}_masks"));
    std::fs::create_dir_all(&mask_dir)?;
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    for sample in volumes {
        let mask = ensemble_predict(
            models,
            &sample.image,
            cfg.train.patch,
            cfg.train.overlap,
            cfg.train.threshold,
        )?;
        let path = mask_dir.join(format!("{}_day{:02}.xmask", sample.case_id, sample.day));
        save_mask(&path, &mask, sample)?;
        outputs.push(path);
        rows.push((sample.case_id.clone(), sample.day, uncrop_mask(&mask, sample)));
    }
    let csv_path = out_dir.join(format!("{tag}.csv"));
    write_prediction_csv(&csv_path, &rows)?;
    outputs.push(csv_path);
    println!("predicted {} volumes into {}", rows.len(), mask_dir.display());
    Ok(outputs)
}

pub fn predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    volumes_dir: &Path,
    case: Option<&str>,
    day: Option<u32>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let volumes = load_volumes(volumes_dir)?;
    let selected = filter_volumes(&volumes, case, day);
    if selected.is_empty() {
        bail!("no volumes match the case/day filter");
    }
    predict_masks(std::slice::from_ref(&model), &selected, cfg, out_dir, "predictions")
}

pub fn ensemble(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    volumes_dir: &Path,
    case: Option<&str>,
    day: Option<u32>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut models = Vec::with_capacity(checkpoints.len());
    for p in checkpoints {
        models.push(Checkpoint::<f32>::load(p)?.to_model()?);
    }
    let volumes = load_volumes(volumes_dir)?;
    let selected = filter_volumes(&volumes, case, day);
    if selected.is_empty() {
        bail!("no volumes match the case/day filter");
    }
    predict_masks(&models, &selected, cfg, out_dir, "ensemble")
}

pub fn evaluate(pred_dir: &Path, volumes_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let volumes = load_volumes(volumes_dir)?;
    let mut mask_paths: Vec<PathBuf> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("xmask"))
        .collect();
    mask_paths.sort();
    if mask_paths.is_empty() {
        bail!("no .xmask predictions under {}", pred_dir.display());
    }
    let mut rows = Vec::new();
    for path in &mask_paths {
        let (case, day, pred) = read_mask(path)?;
        let truth = volumes
            .iter()
            .find(|v| v.case_id == case && v.day == day)
            .ok_or_else(|| anyhow!("no ground-truth volume for {case}/day{day:02}"))?;
        let report = evaluate_masks(&pred, &truth.mask)?;
        rows.push((case, day, report));
    }
    let csv_path = out_dir.join("metrics.csv");
    write_metrics_csv(&csv_path, &CLASS_NAMES, &rows)?;
    let mean_composite: f64 =
        rows.iter().map(|(_, _, r)| r.composite).sum::<f64>() / rows.len() as f64;
    let mean_dsc: f64 = rows.iter().map(|(_, _, r)| r.mean_dsc).sum::<f64>() / rows.len() as f64;
    println!(
        "evaluated {} volumes: mean DSC {:.4}, mean composite {:.4}",
        rows.len(),
        mean_dsc,
        mean_composite
    );
    Ok(vec![csv_path])
}

#[allow(clippy::too_many_arguments)]
pub fn explain(
    cfg: &RunConfig,
    checkpoint: &Path,
    volumes_dir: &Path,
    case: &str,
    day: u32,
    method_flag: Option<&str>,
    class_flag: Option<&str>,
    layer_flag: Option<&str>,
    probe_additivity: bool,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let volumes = load_volumes(volumes_dir)?;
    let sample = volumes
        .iter()
        .find(|v| v.case_id == case && v.day == day)
        .ok_or_else(|| anyhow!("no volume {case}/day{day:02} under {}", volumes_dir.display()))?;

    let method_name = method_flag.unwrap_or(&cfg.xai.method);
    let method = AttributionMethod::parse(method_name)
        .ok_or_else(|| anyhow!("unknown attribution method `{method_name}`"))?;
    let layer = layer_flag.unwrap_or(&cfg.xai.layer);
    let class_name = class_flag.unwrap_or("small_bowel");
    let class_id = match class_name.parse::<usize>() {
        Ok(i) if i < 3 => i,
        _ => CLASS_NAMES
            .iter()
            .position(|&c| c == class_name)
            .ok_or_else(|| anyhow!("unknown class `{class_name}`"))?,
    };

    let dims = sample.dims();
    let input = sample
        .image
        .reshape(vec![1, 1, dims[0], dims[1], dims[2]])
        .map_err(|e| anyhow!("volume shape: {e}"))?;

    // pixel set M: the model's own predicted mask for the class, or every
    // output voxel when the prediction is empty or configured so
    let pixel_set = if cfg.xai.pixel_set == "all" {
        PixelSet::all_voxels(class_id, dims)
    } else {
        let probs = sliding_window_predict(&model, &sample.image, cfg.train.patch, cfg.train.overlap)?;
        let pred = threshold_probs(&probs, cfg.train.threshold, sample.mask.spacing);
        match PixelSet::from_mask(class_id, pred.class(class_id), dims) {
            Ok(ps) => ps,
            Err(_) => {
                eprintln!("warning: predicted mask for {class_name} is empty; using all voxels");
                PixelSet::all_voxels(class_id, dims)
            }
        }
    };

    if probe_additivity {
        let half = pixel_set.voxels.len() / 2;
        if half == 0 || pixel_set.voxels.len() < 2 {
            bail!("additivity probe needs at least two voxels in the pixel set");
        }
        let m1 = PixelSet {
            class_id,
            voxels: pixel_set.voxels[..half].to_vec(),
        };
        let m2 = PixelSet {
            class_id,
            voxels: pixel_set.voxels[half..].to_vec(),
        };
        let report = seg_grad_cam_additivity_probe(&model, &input, layer, &m1, &m2)?;
        println!(
            "additivity probe at {layer}: max abs dev {:.3e}, max rel dev {:.3e}",
            report.max_abs_deviation, report.max_rel_deviation
        );
    }

    let map: AttributionMap<f32> = match method {
        AttributionMethod::GradCam => grad_cam(&model, &input, layer, &pixel_set)?,
        AttributionMethod::GuidedBackprop => guided_backprop(&model, &input, &pixel_set)?,
        AttributionMethod::GuidedGradCam => guided_grad_cam(&model, &input, layer, &pixel_set)?,
        AttributionMethod::DeepLift => {
            let baseline = Baseline::zeros_like(&input);
            let att = deeplift_rescale(&model, &input, &baseline, &pixel_set)?;
            println!(
                "deeplift completeness: sum {:.6} vs delta {:.6}",
                att.total, att.delta
            );
            att.map
        }
    };

    let maps_dir = out_dir.join("maps");
    std::fs::create_dir_all(&maps_dir)?;
    let map_path = maps_dir.join(format!(
        "{}_day{:02}_{}_{}.xatt",
        case,
        day,
        method.name(),
        CLASS_NAMES[class_id]
    ));
    let container = attribution_to_container(&map);
    let bytes = container.to_bytes();
    std::fs::write(&map_path, &bytes)?;
    append_sidecar(
        &out_dir.join("maps.jsonl"),
        &map.meta_json(),
        &sha256_hex(&bytes),
    )?;
    println!("wrote attribution map {}", map_path.display());
    Ok(vec![map_path, out_dir.join("maps.jsonl")])
}

#[allow(clippy::too_many_arguments)]
pub fn render(
    map_path: &Path,
    volumes_dir: &Path,
    axis: usize,
    index: Option<usize>,
    with_truth: bool,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let map = read_attribution_container(map_path)?;
    let stem = map_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("map");
    let (case, day) = stem
        .split_once("_day")
        .and_then(|(c, rest)| {
            let day: u32 = rest.split('_').next()?.parse().ok()?;
            Some((c.to_string(), day))
        })
        .ok_or_else(|| anyhow!("map file name must start with case_dayDD"))?;
    let volumes = load_volumes(volumes_dir)?;
    let sample = volumes
        .iter()
        .find(|v| v.case_id == case && v.day == day)
        .ok_or_else(|| anyhow!("no volume {case}/day{day:02} to render against"))?;
    let dims = sample.dims();
    let index = index.unwrap_or(dims[axis.min(2)] / 2);
    let png_path = out_dir.join(format!("{stem}_axis{axis}_slice{index:04}.png"));
    render_overlay(
        &map,
        &sample.image,
        with_truth.then_some(&sample.mask),
        axis,
        index,
        &OverlayOptions {
            truth_panel: with_truth,
            ..Default::default()
        },
        &png_path,
    )?;
    println!("rendered {}", png_path.display());
    Ok(vec![png_path])
}
