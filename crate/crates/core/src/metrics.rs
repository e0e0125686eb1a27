//! Segmentation metrics: dice similarity, exact 3D Hausdorff distance, the
//! normalized Hausdorff score, the 0.4/0.6 composite, and the differentiable
//! dice loss used for training.
//!
//! Empty-mask conventions: two empty masks agree perfectly (DSC 1, distance
//! 0); exactly one empty mask is maximal error (distance = volume diagonal,
//! score 0), which keeps the Hausdorff score inside [0, 1].

use crate::error::MetricsError;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Multilabel boolean mask volume `(classes, D, H, W)`; class channels may
/// overlap. Spacing is the per-axis physical voxel size.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub classes: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    data: Vec<bool>,
}

impl MaskVolume {
    pub fn new(classes: usize, dims: [usize; 3]) -> Self {
        MaskVolume {
            classes,
            dims,
            spacing: [1.0; 3],
            data: vec![false; classes * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_data(
        classes: usize,
        dims: [usize; 3],
        data: Vec<bool>,
    ) -> Result<Self, MetricsError> {
        let expected = classes * dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(MetricsError::ShapeMismatch {
                lhs: vec![classes, dims[0], dims[1], dims[2]],
                rhs: vec![data.len()],
            });
        }
        Ok(MaskVolume {
            classes,
            dims,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn voxels_per_class(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn class(&self, c: usize) -> &[bool] {
        let n = self.voxels_per_class();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn class_mut(&mut self, c: usize) -> &mut [bool] {
        let n = self.voxels_per_class();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn set(&mut self, c: usize, d: usize, h: usize, w: usize, v: bool) {
        let [_, hh, ww] = [self.dims[0], self.dims[1], self.dims[2]];
        let n = self.voxels_per_class();
        self.data[c * n + (d * hh + h) * ww + w] = v;
    }

    pub fn get(&self, c: usize, d: usize, h: usize, w: usize) -> bool {
        let ww = self.dims[2];
        let hh = self.dims[1];
        let n = self.voxels_per_class();
        self.data[c * n + (d * hh + h) * ww + w]
    }

    /// Dense 0/1 tensor of shape `(classes, D, H, W)`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![self.classes, self.dims[0], self.dims[1], self.dims[2]],
            self.data
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("shape")
    }
}

fn check_same_dims(x_dims: [usize; 3], y_dims: [usize; 3]) -> Result<(), MetricsError> {
    if x_dims != y_dims {
        return Err(MetricsError::ShapeMismatch {
            lhs: x_dims.to_vec(),
            rhs: y_dims.to_vec(),
        });
    }
    Ok(())
}

/// Dice similarity coefficient `2|X n Y| / (|X| + |Y|)` over boolean masks
/// of equal length; both empty counts as perfect agreement (1.0).
pub fn dsc(x: &[bool], y: &[bool]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::ShapeMismatch {
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    let mut inter = 0usize;
    let mut cx = 0usize;
    let mut cy = 0usize;
    for (&a, &b) in x.iter().zip(y) {
        cx += a as usize;
        cy += b as usize;
        inter += (a && b) as usize;
    }
    if cx + cy == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (cx + cy) as f64)
}

/// Euclidean length of the volume's bounding box under the given spacing.
pub fn volume_diagonal(dims: [usize; 3], spacing: [f64; 3]) -> f64 {
    let d = dims[0] as f64 * spacing[0];
    let h = dims[1] as f64 * spacing[1];
    let w = dims[2] as f64 * spacing[2];
    (d * d + h * h + w * w).sqrt()
}

fn collect_points(mask: &[bool], dims: [usize; 3]) -> Vec<[i64; 3]> {
    let mut pts = Vec::new();
    let mut idx = 0usize;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                if mask[idx] {
                    pts.push([d as i64, h as i64, w as i64]);
                }
                idx += 1;
            }
        }
    }
    pts
}

/// Voxels of the set with an in-grid 6-neighbor outside the set; point-to-set
/// distances from outside points are always attained on this boundary.
fn boundary_points(mask: &[bool], dims: [usize; 3]) -> Vec<[i64; 3]> {
    let [dd, hh, ww] = dims;
    let at = |d: usize, h: usize, w: usize| mask[(d * hh + h) * ww + w];
    let mut pts = Vec::new();
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                if !at(d, h, w) {
                    continue;
                }
                // only in-grid non-set neighbors make a voxel reachable
                let has_outside_neighbor = (d > 0 && !at(d - 1, h, w))
                    || (d + 1 < dd && !at(d + 1, h, w))
                    || (h > 0 && !at(d, h - 1, w))
                    || (h + 1 < hh && !at(d, h + 1, w))
                    || (w > 0 && !at(d, h, w - 1))
                    || (w + 1 < ww && !at(d, h, w + 1));
                if has_outside_neighbor {
                    pts.push([d as i64, h as i64, w as i64]);
                }
            }
        }
    }
    pts
}

fn dist_sq(a: [i64; 3], b: [i64; 3], sp2: [f64; 3]) -> f64 {
    let dz = (a[0] - b[0]) as f64;
    let dy = (a[1] - b[1]) as f64;
    let dx = (a[2] - b[2]) as f64;
    dz * dz * sp2[0] + dy * dy * sp2[1] + dx * dx * sp2[2]
}

/// `max_{a in X} min_{b in Y} d(a, b)^2` with early termination; `y_mask`
/// provides O(1) membership (members have distance zero).
fn directed_sq(
    x_pts: &[[i64; 3]],
    y_boundary: &[[i64; 3]],
    y_mask: &[bool],
    dims: [usize; 3],
    sp2: [f64; 3],
) -> f64 {
    let [_, hh, ww] = dims;
    let mut cur_max = 0.0f64;
    for &a in x_pts {
        let flat = (a[0] as usize * hh + a[1] as usize) * ww + a[2] as usize;
        if y_mask[flat] {
            continue;
        }
        let mut min_sq = f64::INFINITY;
        let mut capped = false;
        for &b in y_boundary {
            let d = dist_sq(a, b, sp2);
            if d < min_sq {
                min_sq = d;
                if min_sq <= cur_max {
                    capped = true;
                    break;
                }
            }
        }
        if !capped && min_sq > cur_max {
            cur_max = min_sq;
        }
    }
    cur_max
}

/// Exact symmetric Hausdorff distance between two boolean masks, in spacing
/// units. Both empty: 0. Exactly one empty: the volume diagonal.
pub fn hausdorff(
    x: &MaskClass<'_>,
    y: &MaskClass<'_>,
    spacing: [f64; 3],
) -> Result<f64, MetricsError> {
    check_same_dims(x.dims, y.dims)?;
    let x_pts = collect_points(x.data, x.dims);
    let y_pts = collect_points(y.data, y.dims);
    match (x_pts.is_empty(), y_pts.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(volume_diagonal(x.dims, spacing)),
        _ => {}
    }
    let sp2 = [
        spacing[0] * spacing[0],
        spacing[1] * spacing[1],
        spacing[2] * spacing[2],
    ];
    let xb = boundary_points(x.data, x.dims);
    let yb = boundary_points(y.data, y.dims);
    let fwd = directed_sq(&x_pts, &yb, y.data, y.dims, sp2);
    let bwd = directed_sq(&y_pts, &xb, x.data, x.dims, sp2);
    Ok(fwd.max(bwd).sqrt())
}

/// One class channel of a mask volume.
pub struct MaskClass<'a> {
    pub dims: [usize; 3],
    pub data: &'a [bool],
}

impl MaskVolume {
    pub fn class_view(&self, c: usize) -> MaskClass<'_> {
        MaskClass {
            dims: self.dims,
            data: self.class(c),
        }
    }
}

/// `1 - d_H / diagonal`: a higher-is-better rescaling of the Hausdorff
/// distance onto [0, 1].
pub fn hausdorff_score(
    x: &MaskClass<'_>,
    y: &MaskClass<'_>,
    spacing: [f64; 3],
) -> Result<f64, MetricsError> {
    let d = hausdorff(x, y, spacing)?;
    Ok(1.0 - d / volume_diagonal(x.dims, spacing))
}

/// Competition metric: `0.4 * DSC + 0.6 * hausdorff_score`.
pub fn composite_score(mean_dsc: f64, mean_hausdorff_score: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&mean_dsc) {
        return Err(MetricsError::ScoreRange {
            name: "dsc",
            value: mean_dsc,
        });
    }
    if !(0.0..=1.0).contains(&mean_hausdorff_score) {
        return Err(MetricsError::ScoreRange {
            name: "hausdorff_score",
            value: mean_hausdorff_score,
        });
    }
    Ok(0.4 * mean_dsc + 0.6 * mean_hausdorff_score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub hausdorff_distance: f64,
    pub hausdorff_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    pub mean_hausdorff_score: f64,
    pub composite: f64,
}

/// Per-class and aggregate metrics for a predicted mask against the truth.
pub fn evaluate_masks(pred: &MaskVolume, truth: &MaskVolume) -> Result<MetricsReport, MetricsError> {
    if pred.classes != truth.classes || pred.dims != truth.dims {
        return Err(MetricsError::ShapeMismatch {
            lhs: vec![pred.classes, pred.dims[0], pred.dims[1], pred.dims[2]],
            rhs: vec![truth.classes, truth.dims[0], truth.dims[1], truth.dims[2]],
        });
    }
    let spacing = truth.spacing;
    let mut per_class = Vec::with_capacity(pred.classes);
    for c in 0..pred.classes {
        let d = dsc(pred.class(c), truth.class(c))?;
        let hd = hausdorff(&pred.class_view(c), &truth.class_view(c), spacing)?;
        let hs = 1.0 - hd / volume_diagonal(pred.dims, spacing);
        per_class.push(ClassMetrics {
            dsc: d,
            hausdorff_distance: hd,
            hausdorff_score: hs,
        });
    }
    let mean_dsc = per_class.iter().map(|m| m.dsc).sum::<f64>() / per_class.len() as f64;
    let mean_hausdorff_score =
        per_class.iter().map(|m| m.hausdorff_score).sum::<f64>() / per_class.len() as f64;
    let composite = composite_score(mean_dsc, mean_hausdorff_score)?;
    Ok(MetricsReport {
        per_class,
        mean_dsc,
        mean_hausdorff_score,
        composite,
    })
}

/// Soft dice loss `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`, averaged
/// over batch and classes. `probs` must already be sigmoid outputs in [0,1];
/// `target` is a 0/1 tensor of the same shape.
pub fn dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &Tensor<T>,
    smooth: f64,
) -> Result<Var, MetricsError> {
    let pshape = tape.shape(probs).to_vec();
    if pshape != target.shape() {
        return Err(MetricsError::ShapeMismatch {
            lhs: pshape,
            rhs: target.shape().to_vec(),
        });
    }
    if pshape.len() < 2 {
        return Err(MetricsError::ShapeMismatch {
            lhs: pshape,
            rhs: vec![0, 0],
        });
    }
    for &v in tape.value(probs).data() {
        let f = v.as_f64();
        if !(0.0..=1.0).contains(&f) {
            return Err(MetricsError::ProbabilityRange { value: f });
        }
    }
    let spatial_axes: Vec<usize> = (2..pshape.len()).collect();
    let t = tape.leaf(target.clone(), false);
    let pt = tape.mul(probs, t)?;
    let sum_pt = tape.sum_axes(pt, &spatial_axes)?;
    let sum_p = tape.sum_axes(probs, &spatial_axes)?;
    let sum_t = tape.sum_axes(t, &spatial_axes)?;
    let s = T::from_f64(smooth);
    let num = tape.affine(sum_pt, T::from_f64(2.0), s);
    let den_sum = tape.add(sum_p, sum_t)?;
    let den = tape.add_scalar(den_sum, s);
    let dice = tape.div(num, den)?;
    let mean_dice = tape.mean_all(dice);
    Ok(tape.affine(mean_dice, T::from_f64(-1.0), T::one()))
}

/// Default smoothing constant for the dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, CheckMode};
    use crate::rng::Rng;

    fn mask_from_indices(dims: [usize; 3], idx: &[usize]) -> MaskVolume {
        let mut m = MaskVolume::new(1, dims);
        for &i in idx {
            m.class_mut(0)[i] = true;
        }
        m
    }

    #[test]
    fn dsc_identity_and_disjoint() {
        let a = mask_from_indices([2, 2, 2], &[0, 1, 2]);
        let b = mask_from_indices([2, 2, 2], &[5, 6]);
        assert_eq!(dsc(a.class(0), a.class(0)).unwrap(), 1.0);
        assert_eq!(dsc(a.class(0), b.class(0)).unwrap(), 0.0);
    }

    #[test]
    fn dsc_half_overlap() {
        // |X|=4, |Y|=4, overlap 2 -> 2*2/8 = 0.5
        let a = mask_from_indices([2, 2, 2], &[0, 1, 2, 3]);
        let b = mask_from_indices([2, 2, 2], &[2, 3, 4, 5]);
        assert_eq!(dsc(a.class(0), b.class(0)).unwrap(), 0.5);
    }

    #[test]
    fn dsc_both_empty_is_one() {
        let a = MaskVolume::new(1, [3, 3, 3]);
        assert_eq!(dsc(a.class(0), a.class(0)).unwrap(), 1.0);
    }

    #[test]
    fn dsc_symmetry() {
        let mut rng = Rng::from_seed(1);
        for _ in 0..50 {
            let a = MaskVolume::from_data(
                1,
                [4, 4, 4],
                (0..64).map(|_| rng.bernoulli(0.3)).collect(),
            )
            .unwrap();
            let b = MaskVolume::from_data(
                1,
                [4, 4, 4],
                (0..64).map(|_| rng.bernoulli(0.3)).collect(),
            )
            .unwrap();
            assert_eq!(
                dsc(a.class(0), b.class(0)).unwrap(),
                dsc(b.class(0), a.class(0)).unwrap()
            );
        }
    }

    #[test]
    fn hausdorff_identity_zero() {
        let a = mask_from_indices([4, 4, 4], &[0, 7, 13]);
        assert_eq!(
            hausdorff(&a.class_view(0), &a.class_view(0), [1.0; 3]).unwrap(),
            0.0
        );
    }

    #[test]
    fn hausdorff_pythagorean() {
        // single voxels at (0,0,0) and (3,4,0): distance 5
        let dims = [5, 5, 5];
        let a = mask_from_indices(dims, &[0]);
        let mut b = MaskVolume::new(1, dims);
        b.set(0, 3, 4, 0, true);
        assert_eq!(
            hausdorff(&a.class_view(0), &b.class_view(0), [1.0; 3]).unwrap(),
            5.0
        );
    }

    /// O(|X| * |Y|) brute force over all voxel pairs.
    fn hausdorff_brute(x: &MaskClass<'_>, y: &MaskClass<'_>, spacing: [f64; 3]) -> f64 {
        let xp = collect_points(x.data, x.dims);
        let yp = collect_points(y.data, y.dims);
        if xp.is_empty() && yp.is_empty() {
            return 0.0;
        }
        if xp.is_empty() || yp.is_empty() {
            return volume_diagonal(x.dims, spacing);
        }
        let sp2 = [
            spacing[0] * spacing[0],
            spacing[1] * spacing[1],
            spacing[2] * spacing[2],
        ];
        let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| -> f64 {
            from.iter()
                .map(|&a| {
                    to.iter()
                        .map(|&b| dist_sq(a, b, sp2))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        directed(&xp, &yp).max(directed(&yp, &xp)).sqrt()
    }

    #[test]
    fn hausdorff_matches_brute_force() {
        let mut rng = Rng::from_seed(7);
        for trial in 0..200 {
            let dims = [
                2 + rng.below(7),
                2 + rng.below(7),
                2 + rng.below(7),
            ];
            let n = dims[0] * dims[1] * dims[2];
            let p = rng.uniform_in(0.02, 0.4);
            let a = MaskVolume::from_data(1, dims, (0..n).map(|_| rng.bernoulli(p)).collect())
                .unwrap();
            let b = MaskVolume::from_data(1, dims, (0..n).map(|_| rng.bernoulli(p)).collect())
                .unwrap();
            let fast = hausdorff(&a.class_view(0), &b.class_view(0), [1.0; 3]).unwrap();
            let brute = hausdorff_brute(&a.class_view(0), &b.class_view(0), [1.0; 3]);
            assert_eq!(fast, brute, "trial {trial} dims {dims:?}");
        }
    }

    #[test]
    fn hausdorff_zero_iff_equal() {
        let mut rng = Rng::from_seed(8);
        for _ in 0..50 {
            let dims = [4, 4, 4];
            let a = MaskVolume::from_data(1, dims, (0..64).map(|_| rng.bernoulli(0.3)).collect())
                .unwrap();
            let mut b = a.clone();
            let d0 = hausdorff(&a.class_view(0), &b.class_view(0), [1.0; 3]).unwrap();
            assert_eq!(d0, 0.0);
            // flip one voxel; distance must become positive unless both
            // empty-side rules kick in identically
            let flip = rng.below(64);
            b.class_mut(0)[flip] = !b.class_mut(0)[flip];
            let d1 = hausdorff(&a.class_view(0), &b.class_view(0), [1.0; 3]).unwrap();
            assert!(d1 > 0.0);
        }
    }

    #[test]
    fn hausdorff_score_cases() {
        let dims = [3, 4, 5];
        let a = mask_from_indices(dims, &[0, 1]);
        assert_eq!(
            hausdorff_score(&a.class_view(0), &a.class_view(0), [1.0; 3]).unwrap(),
            1.0
        );
        let empty = MaskVolume::new(1, dims);
        assert_eq!(
            hausdorff_score(&a.class_view(0), &empty.class_view(0), [1.0; 3]).unwrap(),
            0.0
        );
    }

    #[test]
    fn hausdorff_score_monotone_in_distance() {
        let dims = [1, 1, 10];
        let a = mask_from_indices(dims, &[0]);
        let mut prev = 1.0;
        for w in 1..10 {
            let b = mask_from_indices(dims, &[w]);
            let s = hausdorff_score(&a.class_view(0), &b.class_view(0), [1.0; 3]).unwrap();
            assert!(s < prev, "score not decreasing at offset {w}");
            prev = s;
        }
    }

    #[test]
    fn composite_reproduces_printed_fold_totals() {
        // validation DSC / Hausdorff columns against printed totals
        let folds = [
            (0.825, 0.962, 0.906),
            (0.805, 0.960, 0.898),
            (0.812, 0.963, 0.903),
            (0.820, 0.964, 0.906),
        ];
        for (i, (d, h, total)) in folds.iter().enumerate() {
            let c = composite_score(*d, *h).unwrap();
            assert!(
                (c - total).abs() <= 0.005,
                "fold {}: computed {c}, printed {total}",
                i + 1
            );
        }
        assert_eq!(composite_score(1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn composite_rejects_out_of_range() {
        assert!(composite_score(1.2, 0.5).is_err());
        assert!(composite_score(0.5, -0.1).is_err());
    }

    #[test]
    fn evaluate_matching_masks() {
        let mut m = MaskVolume::new(3, [4, 4, 4]);
        for c in 0..3 {
            m.set(c, c, c, c, true);
            m.set(c, 1, 2, 3, true);
        }
        let report = evaluate_masks(&m, &m).unwrap();
        for cm in &report.per_class {
            assert_eq!(cm.dsc, 1.0);
            assert_eq!(cm.hausdorff_distance, 0.0);
            assert_eq!(cm.hausdorff_score, 1.0);
        }
        assert_eq!(report.composite, 1.0);
    }

    #[test]
    fn evaluate_empty_prediction() {
        let pred = MaskVolume::new(3, [4, 4, 4]);
        let mut truth = MaskVolume::new(3, [4, 4, 4]);
        for c in 0..3 {
            truth.set(c, 1, 1, 1, true);
        }
        let report = evaluate_masks(&pred, &truth).unwrap();
        assert_eq!(report.mean_dsc, 0.0);
        assert_eq!(report.mean_hausdorff_score, 0.0);
        assert_eq!(report.composite, 0.0);
    }

    #[test]
    fn dice_loss_perfect_prediction() {
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = Rng::from_seed(3);
        let target = Tensor::<f64>::from_fn(vec![1, 3, 4, 4, 4], |_| {
            if rng.bernoulli(0.4) {
                1.0
            } else {
                0.0
            }
        });
        let p = tape.leaf(target.clone(), false);
        let loss = dice_loss(&mut tape, p, &target, DICE_SMOOTH).unwrap();
        assert!(tape.value(loss).item() < 1e-4);
    }

    #[test]
    fn dice_loss_half_probs_closed_form() {
        // probs 0.5 everywhere, target half-positive per class:
        // dice = (V/2 + s) / (V + s), loss = 1 - dice
        let v = 64usize;
        let mut tape: Tape<f64> = Tape::new();
        let target = Tensor::<f64>::from_fn(vec![1, 3, 4, 4, 4], |i| ((i % v) < v / 2) as u8 as f64);
        let p = tape.leaf(Tensor::full(vec![1, 3, 4, 4, 4], 0.5), false);
        let s = 1e-5;
        let loss = dice_loss(&mut tape, p, &target, s).unwrap();
        let expected = 1.0 - (v as f64 / 2.0 + s) / (v as f64 + s);
        assert!(
            (tape.value(loss).item() - expected).abs() < 1e-12,
            "{} vs {expected}",
            tape.value(loss).item()
        );
    }

    #[test]
    fn dice_loss_rejects_out_of_range_probs() {
        let mut tape: Tape<f64> = Tape::new();
        let target = Tensor::<f64>::zeros(vec![1, 1, 2, 2, 2]);
        let p = tape.leaf(Tensor::full(vec![1, 1, 2, 2, 2], 1.5), false);
        assert!(matches!(
            dice_loss(&mut tape, p, &target, DICE_SMOOTH),
            Err(MetricsError::ProbabilityRange { .. })
        ));
    }

    #[test]
    fn dice_loss_gradient_check() {
        let mut rng = Rng::from_seed(4);
        let target = Tensor::<f64>::from_fn(vec![2, 3, 3, 3, 3], |_| rng.bernoulli(0.5) as u8 as f64);
        let probs = Tensor::<f64>::from_fn(vec![2, 3, 3, 3, 3], |_| rng.uniform_in(0.05, 0.95));
        let err = grad_check(
            |tape, v| dice_loss(tape, v[0], &target, DICE_SMOOTH).unwrap(),
            &[probs],
            1e-6,
            CheckMode::Full,
        );
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn dice_loss_equals_one_minus_soft_dsc() {
        // with smooth = 0 the loss is exactly 1 - soft-DSC
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = Rng::from_seed(5);
        let target = Tensor::<f64>::from_fn(vec![1, 1, 2, 2, 2], |_| rng.bernoulli(0.6) as u8 as f64);
        let probs_t = Tensor::<f64>::from_fn(vec![1, 1, 2, 2, 2], |_| rng.uniform_in(0.1, 0.9));
        let p = tape.leaf(probs_t.clone(), false);
        let loss = dice_loss(&mut tape, p, &target, 0.0).unwrap();
        let pt: f64 = probs_t
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| a * b)
            .sum();
        let soft = 2.0 * pt / (probs_t.data().iter().sum::<f64>() + target.data().iter().sum::<f64>());
        assert!((tape.value(loss).item() - (1.0 - soft)).abs() < 1e-12);
    }
}

/// Write per-scan metrics as CSV rows
/// `case,day,class,dsc,hausdorff_distance,hausdorff_score,composite` with one
/// `aggregate` row per scan carrying the means and composite.
pub fn write_metrics_csv(
    path: &std::path::Path,
    class_names: &[&str],
    rows: &[(String, u32, MetricsReport)],
) -> std::io::Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "case,day,class,dsc,hausdorff_distance,hausdorff_score,composite")?;
    for (case, day, report) in rows {
        for (c, m) in report.per_class.iter().enumerate() {
            let name = class_names.get(c).copied().unwrap_or("class");
            writeln!(
                f,
                "{case},{day},{name},{},{},{},",
                m.dsc, m.hausdorff_distance, m.hausdorff_score
            )?;
        }
        writeln!(
            f,
            "{case},{day},aggregate,{},,{},{}",
            report.mean_dsc, report.mean_hausdorff_score, report.composite
        )?;
    }
    Ok(())
}
