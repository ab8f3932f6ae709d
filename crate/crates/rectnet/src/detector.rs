//! Detection: dense grid inference over the lung field, probability
//! thresholding, 26-connected region growing on the grid, and mean-shift
//! condensation of each region into at most one candidate nodule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::sampler::{extract_stack, grid_step, sample_grid};
use crate::volume::{BinaryMask, Volume};

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    /// Inference grid step as a multiple of the in-plane pixel length.
    pub grid_multiplier: f64,
    /// Grid points with probability below this are dropped.
    pub prob_threshold: f64,
    /// Mean-shift kernel bandwidth in grid steps.
    pub bandwidth: f64,
    /// A mode survives if its average member probability exceeds this.
    pub accept_p: f64,
    pub max_iters: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            grid_multiplier: 4.0,
            prob_threshold: 0.5,
            bandwidth: 1.5,
            accept_p: 0.75,
            max_iters: 500,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.prob_threshold && self.prob_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "probability threshold {} outside (0, 1)",
                self.prob_threshold
            )));
        }
        if !(0.5 < self.accept_p && self.accept_p < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "accept_p {} outside (0.5, 1)",
                self.accept_p
            )));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::InvalidConfig("bandwidth must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Sparse per-grid-point nodule probabilities over one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// In-plane grid step in pixels.
    pub step: usize,
    pub entries: Vec<MapEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub voxel: [usize; 3],
    pub p: f32,
}

/// Classify every lung-field grid point. Entries keep grid scan order,
/// so the result is independent of worker count.
pub fn infer_map(
    volume: &Volume,
    mask: &BinaryMask,
    model: &Model<f32>,
    config: &DetectorConfig,
) -> Result<ProbabilityMap> {
    config.validate()?;
    if mask.dims() != volume.dims() {
        return Err(Error::ShapeMismatch(format!(
            "mask dims {:?} differ from volume dims {:?}",
            mask.dims(),
            volume.dims()
        )));
    }
    let centers = sample_grid(mask, config.grid_multiplier);
    let patch = model.input_size();
    let k = model.k();
    let entries: Vec<Result<MapEntry>> = centers
        .par_iter()
        .map(|&c| {
            let stack = extract_stack(volume, c, patch, k)?;
            let probs = model.predict(&stack);
            if !probs.iter().all(|p| p.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite probability at {c:?}"
                )));
            }
            Ok(MapEntry {
                voxel: [c.0, c.1, c.2],
                p: probs[1],
            })
        })
        .collect();
    let dims = volume.dims();
    let spacing = volume.spacing();
    Ok(ProbabilityMap {
        dims: [dims.0, dims.1, dims.2],
        spacing: [spacing.0, spacing.1, spacing.2],
        step: grid_step(config.grid_multiplier),
        entries: entries.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Keep entries with p >= threshold.
pub fn threshold_map(map: &ProbabilityMap, threshold: f64) -> Vec<MapEntry> {
    map.entries
        .iter()
        .copied()
        .filter(|e| e.p as f64 >= threshold)
        .collect()
}

/// Grid coordinates of an entry: in-plane positions divide by the grid
/// step, slices count as-is.
fn grid_coord(entry: &MapEntry, step: usize) -> (i64, i64, i64) {
    (
        (entry.voxel[0] / step) as i64,
        (entry.voxel[1] / step) as i64,
        entry.voxel[2] as i64,
    )
}

/// Group retained grid points into 26-connected clusters (adjacent iff
/// all grid-coordinate deltas are at most 1). Returns index sets into
/// `entries`, each sorted, ordered by smallest member.
pub fn grow_clusters(entries: &[MapEntry], step: usize) -> Vec<Vec<usize>> {
    use std::collections::HashMap;
    let mut by_coord: HashMap<(i64, i64, i64), usize> = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_coord.insert(grid_coord(e, step), i);
    }
    let mut visited = vec![false; entries.len()];
    let mut clusters = Vec::new();
    for start in 0..entries.len() {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut cluster = vec![start];
        let mut queue = vec![start];
        while let Some(i) = queue.pop() {
            let (gx, gy, gz) = grid_coord(&entries[i], step);
            for dz in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        if let Some(&j) = by_coord.get(&(gx + dx, gy + dy, gz + dz)) {
                            if !visited[j] {
                                visited[j] = true;
                                cluster.push(j);
                                queue.push(j);
                            }
                        }
                    }
                }
            }
        }
        cluster.sort_unstable();
        clusters.push(cluster);
    }
    clusters
}

/// One retained grid point with its probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub voxel: [usize; 3],
    pub p: f32,
}

/// A mean-shift mode inside one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeInfo {
    /// Mode position in grid-index space (x/step, y/step, z).
    pub position: [f64; 3],
    /// Mean probability over assigned members.
    pub avg_p: f64,
    pub members: Vec<Member>,
    /// True if every assigned trajectory converged within the iteration
    /// budget.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModes {
    pub modes: Vec<ModeInfo>,
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

/// Gaussian-kernel mean shift over one cluster's points in grid-index
/// space. Every point ascends to a mode; modes closer than half the
/// bandwidth merge; each point is assigned to its (nearest) mode.
pub fn meanshift_modes(
    entries: &[MapEntry],
    cluster: &[usize],
    step: usize,
    config: &DetectorConfig,
) -> ClusterModes {
    let h = config.bandwidth;
    let h_sq2 = 2.0 * h * h;
    let points: Vec<[f64; 3]> = cluster
        .iter()
        .map(|&i| {
            let v = entries[i].voxel;
            [
                v[0] as f64 / step as f64,
                v[1] as f64 / step as f64,
                v[2] as f64,
            ]
        })
        .collect();

    // (final position, converged) per trajectory.
    let tol = 1e-3 * h;
    let trajectories: Vec<([f64; 3], bool)> = points
        .iter()
        .map(|&start| {
            let mut x = start;
            let mut converged = false;
            for _ in 0..config.max_iters {
                let mut wsum = 0.0;
                let mut acc = [0.0f64; 3];
                for p in &points {
                    let w = (-dist_sq(x, *p) / h_sq2).exp();
                    wsum += w;
                    acc[0] += w * p[0];
                    acc[1] += w * p[1];
                    acc[2] += w * p[2];
                }
                let next = [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum];
                let shift = dist_sq(x, next).sqrt();
                x = next;
                if shift < tol {
                    converged = true;
                    break;
                }
            }
            (x, converged)
        })
        .collect();

    // Collect distinct modes from converged trajectories first.
    let merge_sq = (h / 2.0) * (h / 2.0);
    let mut mode_positions: Vec<[f64; 3]> = Vec::new();
    let mut assignment: Vec<Option<usize>> = vec![None; cluster.len()];
    let mut mode_converged: Vec<bool> = Vec::new();
    for (ti, &(pos, converged)) in trajectories.iter().enumerate() {
        if !converged {
            continue;
        }
        let found = mode_positions
            .iter()
            .position(|&m| dist_sq(m, pos) <= merge_sq);
        let mi = match found {
            Some(mi) => mi,
            None => {
                mode_positions.push(pos);
                mode_converged.push(true);
                mode_positions.len() - 1
            }
        };
        assignment[ti] = Some(mi);
    }
    // Non-converged trajectories join the nearest mode; if none exists
    // the stopping position becomes a mode flagged as non-converged.
    for (ti, &(pos, converged)) in trajectories.iter().enumerate() {
        if converged {
            continue;
        }
        if mode_positions.is_empty() {
            mode_positions.push(pos);
            mode_converged.push(false);
            assignment[ti] = Some(0);
            continue;
        }
        let (mi, _) = mode_positions
            .iter()
            .enumerate()
            .map(|(mi, &m)| (mi, dist_sq(m, pos)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty modes");
        assignment[ti] = Some(mi);
        mode_converged[mi] = false;
    }

    // Refine each mode to the mean stopping point of its converged
    // trajectories, which removes any dependence on point order.
    for (mi, pos) in mode_positions.iter_mut().enumerate() {
        let mut n = 0.0f64;
        let mut acc = [0.0f64; 3];
        for (ti, assigned) in assignment.iter().enumerate() {
            if *assigned == Some(mi) && trajectories[ti].1 {
                n += 1.0;
                for a in 0..3 {
                    acc[a] += trajectories[ti].0[a];
                }
            }
        }
        if n > 0.0 {
            *pos = [acc[0] / n, acc[1] / n, acc[2] / n];
        }
    }

    let mut modes: Vec<ModeInfo> = mode_positions
        .iter()
        .zip(mode_converged.iter())
        .map(|(&position, &converged)| ModeInfo {
            position,
            avg_p: 0.0,
            members: Vec::new(),
            converged,
        })
        .collect();
    for (ti, assigned) in assignment.iter().enumerate() {
        let mi = assigned.expect("every trajectory assigned");
        let e = entries[cluster[ti]];
        modes[mi].members.push(Member {
            voxel: e.voxel,
            p: e.p,
        });
    }
    for mode in &mut modes {
        let total: f64 = mode.members.iter().map(|m| m.p as f64).sum();
        mode.avg_p = total / mode.members.len() as f64;
    }
    ClusterModes { modes }
}

/// Candidate nodule: the merged accepted modes of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateNodule {
    pub id: usize,
    /// Probability-weighted centroid of the member grid points, rounded
    /// to the nearest voxel.
    pub center_voxel: [usize; 3],
    pub members: Vec<Member>,
    /// Mean probability over members.
    pub score: f64,
}

/// Condense accepted modes (avg_p > accept_p) of one cluster into at
/// most one candidate.
pub fn candidate_from_modes(modes: &ClusterModes, accept_p: f64) -> Option<(Vec<Member>, f64)> {
    let mut members: Vec<Member> = Vec::new();
    for mode in &modes.modes {
        if mode.avg_p > accept_p {
            members.extend(mode.members.iter().copied());
        }
    }
    if members.is_empty() {
        return None;
    }
    members.sort_by_key(|m| (m.voxel[2], m.voxel[1], m.voxel[0]));
    let score =
        members.iter().map(|m| m.p as f64).sum::<f64>() / members.len() as f64;
    Some((members, score))
}

fn weighted_center(members: &[Member]) -> [usize; 3] {
    let mut wsum = 0.0f64;
    let mut acc = [0.0f64; 3];
    for m in members {
        let w = m.p as f64;
        wsum += w;
        for a in 0..3 {
            acc[a] += w * m.voxel[a] as f64;
        }
    }
    [
        (acc[0] / wsum).round() as usize,
        (acc[1] / wsum).round() as usize,
        (acc[2] / wsum).round() as usize,
    ]
}

/// Full detection output for one volume, including the per-cluster mode
/// tables so acceptance sweeps can be replayed without re-running
/// inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutput {
    pub volume: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub grid_step: usize,
    pub prob_threshold: f64,
    pub bandwidth: f64,
    pub accept_p: f64,
    pub candidates: Vec<CandidateNodule>,
    pub clusters: Vec<ClusterModes>,
}

/// Assemble candidates from mode tables at a given acceptance level.
pub fn candidates_at(clusters: &[ClusterModes], accept_p: f64) -> Vec<CandidateNodule> {
    let mut out = Vec::new();
    for modes in clusters {
        if let Some((members, score)) = candidate_from_modes(modes, accept_p) {
            out.push(CandidateNodule {
                id: out.len(),
                center_voxel: weighted_center(&members),
                members,
                score,
            });
        }
    }
    out
}

/// Run the whole detection pipeline on one volume. Returns the output
/// together with the dense probability map it was built from.
pub fn detect(
    volume: &Volume,
    mask: &BinaryMask,
    model: &Model<f32>,
    config: &DetectorConfig,
    volume_name: &str,
) -> Result<(DetectionOutput, ProbabilityMap)> {
    let map = infer_map(volume, mask, model, config)?;
    let retained = threshold_map(&map, config.prob_threshold);
    let clusters = grow_clusters(&retained, map.step);
    let mode_tables: Vec<ClusterModes> = clusters
        .par_iter()
        .map(|cluster| meanshift_modes(&retained, cluster, map.step, config))
        .collect();
    let candidates = candidates_at(&mode_tables, config.accept_p);
    let output = DetectionOutput {
        volume: volume_name.to_string(),
        dims: map.dims,
        spacing: map.spacing,
        grid_step: map.step,
        prob_threshold: config.prob_threshold,
        bandwidth: config.bandwidth,
        accept_p: config.accept_p,
        candidates,
        clusters: mode_tables,
    };
    Ok((output, map))
}

pub fn write_detection(output: &DetectionOutput, path: &std::path::Path) -> Result<()> {
    let json = serde_json::to_string_pretty(output).expect("detection serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_detection(path: &std::path::Path) -> Result<DetectionOutput> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Write per-slice probability maps as binary 8-bit PGM files
/// (`<stem>_z<k>.pgm`), probability 0..1 scaled to 0..255; off-grid
/// pixels are zero.
pub fn write_probability_pgms(map: &ProbabilityMap, dir: &std::path::Path, stem: &str) -> Result<()> {
    let [nx, ny, nz] = map.dims;
    for z in 0..nz {
        let mut pixels = vec![0u8; nx * ny];
        for e in map.entries.iter().filter(|e| e.voxel[2] == z) {
            pixels[e.voxel[1] * nx + e.voxel[0]] = (e.p.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        let mut data = format!("P5\n{nx} {ny}\n255\n").into_bytes();
        data.extend_from_slice(&pixels);
        let path = dir.join(format!("{stem}_z{z}.pgm"));
        std::fs::write(&path, data).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
