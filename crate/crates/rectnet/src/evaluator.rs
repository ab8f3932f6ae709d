//! Evaluation: candidate-to-nodule matching with grid-step dilation,
//! FROC sweeps replayed from cached mode tables, and sensitivity broken
//! down by reader-score strata.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{candidates_at, CandidateNodule, DetectionOutput};
use crate::error::{Error, Result};
use crate::volume::NoduleAnnotation;

/// Outcome of matching one volume's candidates against its truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    /// (candidate id, nodule id, overlap in truth voxels), one pair per
    /// matched candidate and nodule.
    pub matched: Vec<(usize, usize, usize)>,
    /// Nodule ids no candidate hit.
    pub missed_nodules: Vec<usize>,
    /// Candidate ids left unmatched: the false positives.
    pub false_positives: Vec<usize>,
}

/// Number of truth voxels inside the candidate's member boxes, each
/// member dilated by one grid step in-plane and one slice vertically.
fn overlap_voxels(
    candidate: &CandidateNodule,
    nodule: &NoduleAnnotation,
    grid_step: usize,
) -> usize {
    let s = grid_step as i64;
    nodule
        .voxels
        .iter()
        .filter(|&&(x, y, z)| {
            candidate.members.iter().any(|m| {
                (x as i64 - m.voxel[0] as i64).abs() <= s
                    && (y as i64 - m.voxel[1] as i64).abs() <= s
                    && (z as i64 - m.voxel[2] as i64).abs() <= 1
            })
        })
        .count()
}

/// One-to-one greedy matching by largest voxel overlap; ties prefer the
/// smaller nodule id, then the smaller candidate id.
pub fn match_candidates(
    candidates: &[CandidateNodule],
    nodules: &[NoduleAnnotation],
    grid_step: usize,
) -> MatchOutcome {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for c in candidates {
        for n in nodules {
            let overlap = overlap_voxels(c, n, grid_step);
            if overlap > 0 {
                pairs.push((c.id, n.id, overlap));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.cmp(&a.2).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
    let mut used_candidates: HashSet<usize> = HashSet::new();
    let mut used_nodules: HashSet<usize> = HashSet::new();
    let mut matched = Vec::new();
    for (cid, nid, overlap) in pairs {
        if used_candidates.contains(&cid) || used_nodules.contains(&nid) {
            continue;
        }
        used_candidates.insert(cid);
        used_nodules.insert(nid);
        matched.push((cid, nid, overlap));
    }
    matched.sort_by_key(|&(_, nid, _)| nid);
    let missed_nodules = nodules
        .iter()
        .map(|n| n.id)
        .filter(|id| !used_nodules.contains(id))
        .collect();
    let false_positives = candidates
        .iter()
        .map(|c| c.id)
        .filter(|id| !used_candidates.contains(id))
        .collect();
    MatchOutcome {
        matched,
        missed_nodules,
        false_positives,
    }
}

/// One operating point of the detector across a set of scans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub accept_p: f64,
    pub sensitivity: f64,
    pub fps_per_scan: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub total_nodules: usize,
    pub scans: usize,
}

/// One scan's detections paired with its truth.
pub struct EvalPair<'a> {
    pub detection: &'a DetectionOutput,
    pub nodules: &'a [NoduleAnnotation],
}

fn operating_point(
    pairs: &[EvalPair<'_>],
    accept_p: f64,
    candidate_sets: &[Vec<CandidateNodule>],
) -> FrocPoint {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut total = 0usize;
    for (pair, candidates) in pairs.iter().zip(candidate_sets.iter()) {
        let outcome = match_candidates(candidates, pair.nodules, pair.detection.grid_step);
        tp += outcome.matched.len();
        fp += outcome.false_positives.len();
        total += pair.nodules.len();
    }
    FrocPoint {
        accept_p,
        sensitivity: if total == 0 {
            0.0
        } else {
            tp as f64 / total as f64
        },
        fps_per_scan: fp as f64 / pairs.len() as f64,
        true_positives: tp,
        false_positives: fp,
        total_nodules: total,
        scans: pairs.len(),
    }
}

/// Default acceptance sweep: 0.50 to 0.98 in steps of 0.02.
pub fn default_thresholds() -> Vec<f64> {
    (0..25).map(|i| 0.5 + 0.02 * i as f64).collect()
}

/// Sweep the acceptance threshold over cached mode tables, producing
/// one FROC point per threshold. Mean shift is never re-run.
pub fn froc_sweep(pairs: &[EvalPair<'_>], thresholds: &[f64]) -> Result<Vec<FrocPoint>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no scans to evaluate".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let sets: Vec<Vec<CandidateNodule>> = pairs
                .iter()
                .map(|p| candidates_at(&p.detection.clusters, t))
                .collect();
            operating_point(pairs, t, &sets)
        })
        .collect())
}

/// FROC point at each detection's stored operating threshold, using the
/// candidates it shipped with.
pub fn stored_operating_point(pairs: &[EvalPair<'_>]) -> Result<FrocPoint> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no scans to evaluate".into()));
    }
    let accept_p = pairs[0].detection.accept_p;
    let sets: Vec<Vec<CandidateNodule>> = pairs
        .iter()
        .map(|p| p.detection.candidates.clone())
        .collect();
    Ok(operating_point(pairs, accept_p, &sets))
}

/// Sensitivity inside one stratum of the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    /// Grouping axis: "subtlety", "malignancy", or "agreement".
    pub stratum: String,
    /// Class label inside the axis.
    pub class: String,
    pub nodules: usize,
    pub detected: usize,
    /// None when the stratum holds no nodules.
    pub sensitivity: Option<f64>,
}

fn stratum_rows<F>(
    pairs: &[EvalPair<'_>],
    detected: &[HashSet<(usize, usize)>],
    axis: &str,
    classes: &[&str],
    classify: F,
) -> Vec<StratumRow>
where
    F: Fn(&NoduleAnnotation) -> String,
{
    let mut rows: Vec<StratumRow> = classes
        .iter()
        .map(|c| StratumRow {
            stratum: axis.to_string(),
            class: c.to_string(),
            nodules: 0,
            detected: 0,
            sensitivity: None,
        })
        .collect();
    for (si, pair) in pairs.iter().enumerate() {
        for n in pair.nodules {
            let label = classify(n);
            let row = rows
                .iter_mut()
                .find(|r| r.class == label)
                .expect("classifier yields a declared class");
            row.nodules += 1;
            if detected[si].contains(&(si, n.id)) {
                row.detected += 1;
            }
        }
    }
    for row in &mut rows {
        if row.nodules > 0 {
            row.sensitivity = Some(row.detected as f64 / row.nodules as f64);
        }
    }
    rows
}

/// Per-stratum sensitivity at the stored operating threshold. Strata
/// with no nodules report a None sensitivity rather than a number.
pub fn stratified_sensitivity(pairs: &[EvalPair<'_>]) -> Result<Vec<StratumRow>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no scans to evaluate".into()));
    }
    let detected: Vec<HashSet<(usize, usize)>> = pairs
        .iter()
        .enumerate()
        .map(|(si, pair)| {
            let outcome = match_candidates(
                &pair.detection.candidates,
                pair.nodules,
                pair.detection.grid_step,
            );
            outcome
                .matched
                .iter()
                .map(|&(_, nid, _)| (si, nid))
                .collect()
        })
        .collect();
    let mut rows = stratum_rows(
        pairs,
        &detected,
        "subtlety",
        &["difficult", "medium", "easy"],
        |n| n.subtlety_class().label().to_string(),
    );
    rows.extend(stratum_rows(
        pairs,
        &detected,
        "malignancy",
        &["difficult", "medium", "easy"],
        |n| n.malignancy_class().label().to_string(),
    ));
    rows.extend(stratum_rows(
        pairs,
        &detected,
        "agreement",
        &["1", "2", "3", "4"],
        |n| n.agreement_level.to_string(),
    ));
    Ok(rows)
}

pub fn write_froc_csv(points: &[FrocPoint], path: &Path) -> Result<()> {
    // Curve points ordered by ascending FP rate.
    let mut points = points.to_vec();
    points.sort_by(|a, b| {
        a.fps_per_scan
            .total_cmp(&b.fps_per_scan)
            .then(b.accept_p.total_cmp(&a.accept_p))
    });
    let mut text = String::from("accept_p,fps_per_scan,sensitivity\n");
    for p in &points {
        text.push_str(&format!(
            "{:.4},{:.4},{:.4}\n",
            p.accept_p, p.fps_per_scan, p.sensitivity
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_strata_csv(rows: &[StratumRow], path: &Path) -> Result<()> {
    let mut text = String::from("stratum,class,nodules,detected,sensitivity\n");
    for r in rows {
        let s = match r.sensitivity {
            Some(v) => format!("{v:.4}"),
            None => "N/A".to_string(),
        };
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.stratum, r.class, r.nodules, r.detected, s
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Check that candidate files line up with truth files by volume name.
pub fn check_volume_ids(detection: &DetectionOutput, truth_name: &str) -> Result<()> {
    if detection.volume != truth_name {
        return Err(Error::VolumeIdMismatch {
            candidates: detection.volume.clone(),
            truth: truth_name.to_string(),
        });
    }
    Ok(())
}
