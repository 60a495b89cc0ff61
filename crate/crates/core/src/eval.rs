//! FROC/CPM, ROC-AUC and patient-level fold assignment.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Average false positives per scan at which CPM samples sensitivity.
pub const FROC_TARGETS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub series_id: String,
    pub position: [f64; 3],
    pub score: f64,
    pub truth: bool,
    pub nodule_id: Option<String>,
}

impl Candidate {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Contract(format!("candidate score {} outside [0, 1]", self.score)));
        }
        if self.truth && self.nodule_id.is_none() {
            return Err(Error::Contract(format!(
                "true-nodule candidate in series {:?} has no nodule id",
                self.series_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    /// `(average FPs per scan, sensitivity)` after each distinct threshold,
    /// from the highest score down.
    pub points: Vec<(f64, f64)>,
    pub scans: usize,
    pub nodules: usize,
    /// Sensitivity at each of [`FROC_TARGETS`].
    pub sensitivities: [f64; 7],
    pub cpm: f64,
}

/// Sweeps the threshold over every distinct score. Sensitivity at a target is
/// that of the largest achieved FP rate not above it, or 0 if none.
pub fn froc(candidates: &[Candidate], scans: usize) -> Result<FrocCurve> {
    if scans == 0 {
        return Err(Error::config("FROC needs at least one scan"));
    }
    for c in candidates {
        c.validate()?;
    }
    let nodule_ids: HashSet<&str> = candidates
        .iter()
        .filter(|c| c.truth)
        .filter_map(|c| c.nodule_id.as_deref())
        .collect();
    if nodule_ids.is_empty() {
        return Err(Error::UndefinedMetric("FROC with zero true nodules".into()));
    }
    let nodules = nodule_ids.len();

    let mut order: Vec<&Candidate> = candidates.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut hit: HashSet<&str> = HashSet::new();
    let mut fp = 0usize;
    let mut points = Vec::new();
    let mut fp_counts = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = order[i].score;
        while i < order.len() && order[i].score == s {
            let c = order[i];
            if c.truth {
                hit.insert(c.nodule_id.as_deref().expect("validated"));
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / scans as f64, hit.len() as f64 / nodules as f64));
        fp_counts.push(fp);
    }

    let mut sensitivities = [0.0; 7];
    for (slot, &t) in sensitivities.iter_mut().zip(FROC_TARGETS.iter()) {
        // sensitivity is non-decreasing along the sweep, so the last point
        // within budget is also the largest FP rate within budget
        *slot = points
            .iter()
            .zip(&fp_counts)
            .rfind(|(_, &n)| n as f64 <= t * scans as f64)
            .map_or(0.0, |(p, _)| p.1);
    }
    let curve = FrocCurve {
        points,
        scans,
        nodules,
        sensitivities,
        cpm: 0.0,
    };
    Ok(FrocCurve {
        cpm: cpm(&curve),
        ..curve
    })
}

/// Mean of the seven target sensitivities.
pub fn cpm(curve: &FrocCurve) -> f64 {
    curve.sensitivities.iter().sum::<f64>() / curve.sensitivities.len() as f64
}

/// Mann-Whitney AUC: concordant pairs plus half the tied pairs, over all
/// positive/negative pairs.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NumericDomain("NaN score passed to auc".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // walk tie groups in ascending score, counting negatives strictly below
    let mut below = 0usize;
    let mut credit = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let start = i;
        while i < order.len() && scores[order[i]] == s {
            i += 1;
        }
        let group = &order[start..i];
        let gp = group.iter().filter(|&&k| labels[k]).count();
        let gn = group.len() - gp;
        credit += gp as f64 * below as f64 + 0.5 * (gp * gn) as f64;
        below += gn;
    }
    Ok(credit / (pos as f64 * neg as f64))
}

/// Splits patients into `k` folds of roughly equal instance counts. Patients
/// are shuffled by `seed`, stably sorted by descending count and each is
/// placed in the currently lightest fold (lowest index on ties).
pub fn kfold_by_patient(patients: &[(String, usize)], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k == 0 {
        return Err(Error::config("fold count must be positive"));
    }
    if k > patients.len() {
        return Err(Error::config(format!("{k} folds requested for {} patients", patients.len())));
    }
    let mut seen = HashSet::new();
    if let Some((dup, _)) = patients.iter().find(|(id, _)| !seen.insert(id.as_str())) {
        return Err(Error::config(format!("patient {dup:?} listed twice")));
    }
    let mut order: Vec<&(String, usize)> = patients.iter().collect();
    order.shuffle(&mut substream(seed, "folds"));
    order.sort_by_key(|p| std::cmp::Reverse(p.1));
    let mut folds = vec![Vec::new(); k];
    let mut load = vec![0usize; k];
    for (id, n) in order {
        let lightest = (0..k).min_by_key(|&f| (load[f], f)).expect("k > 0");
        folds[lightest].push(id.clone());
        load[lightest] += n;
    }
    Ok(folds)
}

/// Total instance count of each fold.
pub fn fold_loads(patients: &[(String, usize)], folds: &[Vec<String>]) -> Vec<usize> {
    let counts: HashMap<&str, usize> = patients.iter().map(|(id, n)| (id.as_str(), *n)).collect();
    folds
        .iter()
        .map(|f| f.iter().map(|id| counts.get(id.as_str()).copied().unwrap_or(0)).sum())
        .collect()
}

/// Keeps candidates scoring at least `threshold`, in their original order.
pub fn filter_candidates(candidates: &[Candidate], threshold: f64) -> Result<Vec<Candidate>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(candidates.iter().filter(|c| c.score >= threshold).cloned().collect())
}
