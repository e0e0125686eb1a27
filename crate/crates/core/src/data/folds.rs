//! Stratified group k-fold assignment.
//!
//! Groups are cases: every scan (day) of a case lands in the same fold. The
//! stratum label is the quantile bin of each case's annotated-slice
//! fraction; cases are dealt per bin to the fold with the fewest cases of
//! that bin (ties broken by total scan count, then fold index), which keeps
//! every per-fold bin histogram within one of the ideal split.

use std::collections::BTreeMap;

use crate::error::DataError;
use crate::rng::Rng;

/// Per-scan annotation statistics feeding the splitter.
#[derive(Debug, Clone)]
pub struct ScanStat {
    pub case_id: String,
    pub day: u32,
    pub annotated_slices: usize,
    pub total_slices: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    /// `(case_id, fold)` sorted by case id.
    pub fold_of: Vec<(String, usize)>,
}

impl FoldAssignment {
    pub fn fold(&self, case_id: &str) -> Option<usize> {
        self.fold_of
            .iter()
            .find(|(c, _)| c == case_id)
            .map(|&(_, f)| f)
    }

    pub fn cases_in(&self, fold: usize) -> Vec<&str> {
        self.fold_of
            .iter()
            .filter(|&&(_, f)| f == fold)
            .map(|(c, _)| c.as_str())
            .collect()
    }
}

/// Assign cases to `k` folds. Requires at least `k` distinct cases.
pub fn stratified_group_kfold(
    scans: &[ScanStat],
    k: usize,
    rng: &mut Rng,
) -> Result<FoldAssignment, DataError> {
    // pool scans per case: annotated fraction and scan count
    let mut per_case: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for s in scans {
        let e = per_case.entry(&s.case_id).or_insert((0, 0, 0));
        e.0 += s.annotated_slices;
        e.1 += s.total_slices;
        e.2 += 1;
    }
    let n_cases = per_case.len();
    if n_cases < k {
        return Err(DataError::TooFewCases { k, cases: n_cases });
    }

    // quantile-bin the annotated fractions into k bins by sorted rank
    let mut cases: Vec<(String, f64, usize)> = per_case
        .into_iter()
        .map(|(case, (ann, tot, scans))| {
            let frac = if tot == 0 { 0.0 } else { ann as f64 / tot as f64 };
            (case.to_string(), frac, scans)
        })
        .collect();
    cases.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite fractions").then(a.0.cmp(&b.0)));
    let n_bins = k.min(n_cases);
    let bin_of = |rank: usize| (rank * n_bins / n_cases).min(n_bins - 1);

    let mut bins: Vec<Vec<(String, usize)>> = vec![Vec::new(); n_bins];
    for (rank, (case, _, scan_count)) in cases.into_iter().enumerate() {
        bins[bin_of(rank)].push((case, scan_count));
    }

    let mut bin_counts = vec![vec![0usize; k]; n_bins];
    let mut scan_totals = vec![0usize; k];
    let mut fold_of = Vec::with_capacity(n_cases);
    for (b, bin) in bins.iter_mut().enumerate() {
        rng.shuffle(bin);
        // heaviest cases placed first so scan totals stay balanced
        bin.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (case, scan_count) in bin.drain(..) {
            let fold = (0..k)
                .min_by_key(|&f| (bin_counts[b][f], scan_totals[f], f))
                .expect("k > 0");
            bin_counts[b][fold] += 1;
            scan_totals[fold] += scan_count;
            fold_of.push((case, fold));
        }
    }
    fold_of.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(FoldAssignment { k, fold_of })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roster(cases: usize, seed: u64) -> Vec<ScanStat> {
        let mut rng = Rng::from_seed(seed);
        let mut scans = Vec::new();
        for c in 0..cases {
            let days = 1 + rng.below(5);
            let frac = rng.uniform();
            for d in 0..days {
                let total = 80 + rng.below(64);
                scans.push(ScanStat {
                    case_id: format!("case{c:03}"),
                    day: d as u32,
                    annotated_slices: (frac * total as f64) as usize,
                    total_slices: total,
                });
            }
        }
        scans
    }

    #[test]
    fn every_case_in_exactly_one_fold() {
        let scans = roster(37, 1);
        let mut rng = Rng::from_seed(2);
        let folds = stratified_group_kfold(&scans, 5, &mut rng).unwrap();
        assert_eq!(folds.fold_of.len(), 37);
        let mut seen = std::collections::BTreeSet::new();
        for (case, f) in &folds.fold_of {
            assert!(*f < 5);
            assert!(seen.insert(case.clone()), "case {case} assigned twice");
        }
    }

    #[test]
    fn group_constraint_holds_for_scans() {
        let scans = roster(20, 3);
        let mut rng = Rng::from_seed(4);
        let folds = stratified_group_kfold(&scans, 4, &mut rng).unwrap();
        for s in &scans {
            assert!(folds.fold(&s.case_id).is_some());
        }
    }

    #[test]
    fn too_few_cases_rejected() {
        let scans = roster(3, 5);
        let mut rng = Rng::from_seed(6);
        assert!(matches!(
            stratified_group_kfold(&scans, 5, &mut rng),
            Err(DataError::TooFewCases { k: 5, cases: 3 })
        ));
    }

    #[test]
    fn bin_histograms_within_one_of_ideal() {
        for seed in 0..10 {
            let scans = roster(40 + seed as usize * 7, seed);
            let mut rng = Rng::from_seed(seed + 100);
            let k = 5;
            let folds = stratified_group_kfold(&scans, k, &mut rng).unwrap();

            // recompute bins exactly as the splitter defines them
            let mut per_case: BTreeMap<String, (usize, usize)> = BTreeMap::new();
            for s in &scans {
                let e = per_case.entry(s.case_id.clone()).or_insert((0, 0));
                e.0 += s.annotated_slices;
                e.1 += s.total_slices;
            }
            let mut fracs: Vec<(String, f64)> = per_case
                .into_iter()
                .map(|(c, (a, t))| (c, a as f64 / t as f64))
                .collect();
            fracs.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            let n = fracs.len();
            let mut hist = vec![vec![0isize; k]; k];
            for (rank, (case, _)) in fracs.iter().enumerate() {
                let bin = (rank * k / n).min(k - 1);
                hist[bin][folds.fold(case).unwrap()] += 1;
            }
            for (b, row) in hist.iter().enumerate() {
                let max = row.iter().max().unwrap();
                let min = row.iter().min().unwrap();
                assert!(
                    max - min <= 1,
                    "seed {seed} bin {b}: histogram {row:?} spread > 1"
                );
            }
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let scans = roster(25, 9);
        let run = || {
            let mut rng = Rng::from_seed(77);
            stratified_group_kfold(&scans, 5, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }
}
