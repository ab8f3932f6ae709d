//! Patch-stack sampling: regular in-plane grids over the lung field,
//! multi-slice stack extraction with intensity normalization, in-plane
//! augmentation, and balanced dataset manifests.
//!
//! A patch stack is 2k+1 consecutive axial M x M windows centered on one
//! voxel. The stack label is 1 iff the center voxel belongs to a nodule.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lung_seg::{segment_lungs, SegmentationConfig};
use crate::volume::{read_annotations, read_mask, read_volume, BinaryMask, NoduleAnnotation, Volume};

pub const HU_WINDOW_LO: f32 = -1000.0;
pub const HU_WINDOW_HI: f32 = 400.0;

/// Clamp to [-1000, 400] HU and map onto [0, 1].
#[inline]
pub fn normalize_hu(hu: i16) -> f32 {
    let v = (hu as f32).clamp(HU_WINDOW_LO, HU_WINDOW_HI);
    (v - HU_WINDOW_LO) / (HU_WINDOW_HI - HU_WINDOW_LO)
}

/// Regular in-plane grid restricted to mask-true voxels. The grid is
/// anchored at (0, 0) on every slice with step = round(multiplier)
/// pixels, never below 1.
pub fn sample_grid(mask: &BinaryMask, multiplier: f64) -> Vec<(usize, usize, usize)> {
    let step = (multiplier.round() as usize).max(1);
    let (nx, ny, nz) = mask.dims();
    let mut centers = Vec::new();
    for z in 0..nz {
        for y in (0..ny).step_by(step) {
            for x in (0..nx).step_by(step) {
                if mask.get(x, y, z) {
                    centers.push((x, y, z));
                }
            }
        }
    }
    centers
}

/// Grid step in pixels for a multiplier.
pub fn grid_step(multiplier: f64) -> usize {
    (multiplier.round() as usize).max(1)
}

/// 2k+1 axial slices of size x size normalized samples, slice-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStack {
    pub size: usize,
    pub depth: usize,
    pub data: Vec<f32>,
}

impl PatchStack {
    pub fn slice(&self, i: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn center_slice(&self) -> &[f32] {
        self.slice(self.depth / 2)
    }
}

/// Extract the stack of 2k+1 patches of `patch` pixels centered at
/// `center`. The window starts at center - patch/2 on each in-plane
/// axis; pixels outside the volume read as air, slices beyond the first
/// or last are replicated.
pub fn extract_stack(
    volume: &Volume,
    center: (usize, usize, usize),
    patch: usize,
    k: usize,
) -> Result<PatchStack> {
    let (nx, ny, nz) = volume.dims();
    if center.0 >= nx || center.1 >= ny || center.2 >= nz {
        return Err(Error::CenterOutOfBounds {
            center,
            dims: (nx, ny, nz),
        });
    }
    let depth = 2 * k + 1;
    let x0 = center.0 as i64 - (patch as i64) / 2;
    let y0 = center.1 as i64 - (patch as i64) / 2;
    let mut data = Vec::with_capacity(depth * patch * patch);
    for j in 0..depth {
        let dz = j as i64 - k as i64;
        let z = (center.2 as i64 + dz).clamp(0, nz as i64 - 1);
        for py in 0..patch {
            for px in 0..patch {
                let hu = volume.get_padded(x0 + px as i64, y0 + py as i64, z);
                data.push(normalize_hu(hu));
            }
        }
    }
    Ok(PatchStack {
        size: patch,
        depth,
        data,
    })
}

/// Bilinear resample of one square slice.
pub fn resample_slice(src: &[f32], src_size: usize, dst_size: usize) -> Vec<f32> {
    if src_size == dst_size {
        return src.to_vec();
    }
    let s = src_size as f64 / dst_size as f64;
    let mut out = vec![0.0f32; dst_size * dst_size];
    let coord = |i: usize| ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (src_size - 1) as f64);
    for oy in 0..dst_size {
        let fy = coord(oy);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_size - 1);
        let wy = fy - y0 as f64;
        for ox in 0..dst_size {
            let fx = coord(ox);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_size - 1);
            let wx = fx - x0 as f64;
            let v00 = src[y0 * src_size + x0] as f64;
            let v01 = src[y0 * src_size + x1] as f64;
            let v10 = src[y1 * src_size + x0] as f64;
            let v11 = src[y1 * src_size + x1] as f64;
            out[oy * dst_size + ox] = (v00 * (1.0 - wy) * (1.0 - wx)
                + v01 * (1.0 - wy) * wx
                + v10 * wy * (1.0 - wx)
                + v11 * wy * wx) as f32;
        }
    }
    out
}

/// Resample every slice of a stack to `dst_size`.
pub fn resample_stack(stack: &PatchStack, dst_size: usize) -> PatchStack {
    if stack.size == dst_size {
        return stack.clone();
    }
    let mut data = Vec::with_capacity(stack.depth * dst_size * dst_size);
    for i in 0..stack.depth {
        data.extend(resample_slice(stack.slice(i), stack.size, dst_size));
    }
    PatchStack {
        size: dst_size,
        depth: stack.depth,
        data,
    }
}

/// In-plane symmetry applied identically to every slice. Rotations are
/// clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    Identity,
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
}

impl Augment {
    pub const ALL: [Augment; 6] = [
        Augment::Identity,
        Augment::FlipH,
        Augment::FlipV,
        Augment::Rot90,
        Augment::Rot180,
        Augment::Rot270,
    ];

    /// Source pixel for destination (x, y) on an n x n slice. Clockwise
    /// rotation reads from (y, n-1-x); counter-clockwise from (n-1-y, x).
    #[inline]
    fn source(&self, x: usize, y: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Augment::Identity => (x, y),
            Augment::FlipH => (m - x, y),
            Augment::FlipV => (x, m - y),
            Augment::Rot90 => (y, m - x),
            Augment::Rot180 => (m - x, m - y),
            Augment::Rot270 => (m - y, x),
        }
    }

    pub fn apply(&self, stack: &PatchStack) -> PatchStack {
        if *self == Augment::Identity {
            return stack.clone();
        }
        let n = stack.size;
        let mut data = Vec::with_capacity(stack.data.len());
        for i in 0..stack.depth {
            let src = stack.slice(i);
            for y in 0..n {
                for x in 0..n {
                    let (sx, sy) = self.source(x, y, n);
                    data.push(src[sy * n + sx]);
                }
            }
        }
        PatchStack {
            size: n,
            depth: stack.depth,
            data,
        }
    }
}

/// One labeled sample: a center in a volume at one patch scale with one
/// augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume: usize,
    pub center: [usize; 3],
    pub patch: usize,
    pub aug: Augment,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRef {
    pub volume: String,
    pub annotations: Option<String>,
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub negatives: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub class_counts: ClassCounts,
    pub k: usize,
    pub patch_sizes: Vec<usize>,
    pub volumes: Vec<VolumeRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// JSON-lines layout: the header (carrying class counts) first, then
    /// one entry per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header = serde_json::to_string(&self.header).expect("header serializes");
        writeln!(out, "{header}").expect("vec write");
        for entry in &self.entries {
            let line = serde_json::to_string(entry).expect("entry serializes");
            writeln!(out, "{line}").expect("vec write");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty manifest"))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| Error::format(path, e.to_string()))?;
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("entry {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(DatasetManifest { header, entries })
    }
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    /// Grid step as a multiple of the in-plane pixel length.
    pub grid_multiplier: f64,
    /// Fraction of positive entries in the balanced manifest.
    pub pos_rate: f64,
    /// Cap on positive centers drawn from each nodule's voxel set.
    pub max_positives_per_nodule: usize,
    /// Native patch edge in pixels; the coarse scale is 8/5 of it.
    pub patch_size: usize,
    pub k: usize,
    /// Expand positives with the 5 non-identity symmetries.
    pub augment: bool,
    pub seed: u64,
    pub segmentation: SegmentationConfig,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            grid_multiplier: 25.0,
            pos_rate: 0.5,
            max_positives_per_nodule: 24,
            patch_size: 50,
            k: 3,
            augment: true,
            seed: 0,
            segmentation: SegmentationConfig::default(),
        }
    }
}

pub fn coarse_patch_size(native: usize) -> usize {
    ((native * 8) as f64 / 5.0).round() as usize
}

/// Keep the first `count` elements of a seeded partial Fisher-Yates
/// shuffle.
fn select_subset<T>(pool: &mut Vec<T>, count: usize, rng: &mut ChaCha8Rng) {
    let n = pool.len();
    let count = count.min(n);
    for i in 0..count {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(count);
}

/// Build a balanced training manifest over the given volumes. Positive
/// centers come from nodule voxel sets (capped per nodule), negatives
/// from the lung-field grid; entries carry both patch scales, and
/// positives additionally carry all six symmetries when augmentation is
/// on.
pub fn build_dataset(volumes: &[VolumeRef], config: &BuildConfig) -> Result<DatasetManifest> {
    if volumes.is_empty() {
        return Err(Error::EmptyDataset("no volumes given".into()));
    }
    if !(0.0 < config.pos_rate && config.pos_rate < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "pos_rate {} outside (0, 1)",
            config.pos_rate
        )));
    }
    let scales = [config.patch_size, coarse_patch_size(config.patch_size)];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut positive_centers: Vec<(usize, (usize, usize, usize))> = Vec::new();
    let mut negative_centers: Vec<(usize, (usize, usize, usize))> = Vec::new();

    for (vi, vref) in volumes.iter().enumerate() {
        let volume = read_volume(Path::new(&vref.volume))?;
        let mask = match &vref.mask {
            Some(p) => read_mask(Path::new(p))?,
            None => segment_lungs(&volume, &config.segmentation)?,
        };
        if mask.dims() != volume.dims() {
            return Err(Error::ShapeMismatch(format!(
                "mask dims {:?} differ from volume dims {:?} for {}",
                mask.dims(),
                volume.dims(),
                vref.volume
            )));
        }
        let annotations: Vec<NoduleAnnotation> = match &vref.annotations {
            Some(p) => read_annotations(Path::new(p))?,
            None => Vec::new(),
        };
        let nodule_voxels: HashSet<(usize, usize, usize)> = annotations
            .iter()
            .flat_map(|a| a.voxels.iter().copied())
            .collect();

        for ann in &annotations {
            let mut voxels = ann.voxels.clone();
            select_subset(&mut voxels, config.max_positives_per_nodule, &mut rng);
            for v in voxels {
                positive_centers.push((vi, v));
            }
        }
        for c in sample_grid(&mask, config.grid_multiplier) {
            if !nodule_voxels.contains(&c) {
                negative_centers.push((vi, c));
            }
        }
    }

    if positive_centers.is_empty() && negative_centers.is_empty() {
        return Err(Error::EmptyDataset(
            "no candidate centers inside the lung field".into(),
        ));
    }

    let augs_per_positive = if config.augment { Augment::ALL.len() } else { 1 };
    let pos_entries_per_center = scales.len() * augs_per_positive;
    let neg_entries_per_center = scales.len();
    let n_pos_entries = positive_centers.len() * pos_entries_per_center;
    let wanted_neg_entries =
        (n_pos_entries as f64 * (1.0 - config.pos_rate) / config.pos_rate).round() as usize;
    let wanted_neg_centers =
        (wanted_neg_entries as f64 / neg_entries_per_center as f64).round() as usize;
    select_subset(&mut negative_centers, wanted_neg_centers, &mut rng);

    let mut entries = Vec::new();
    for &(vi, c) in &positive_centers {
        for &scale in &scales {
            for aug in Augment::ALL.iter().take(augs_per_positive) {
                entries.push(ManifestEntry {
                    volume: vi,
                    center: [c.0, c.1, c.2],
                    patch: scale,
                    aug: *aug,
                    label: 1,
                });
            }
        }
    }
    for &(vi, c) in &negative_centers {
        for &scale in &scales {
            entries.push(ManifestEntry {
                volume: vi,
                center: [c.0, c.1, c.2],
                patch: scale,
                aug: Augment::Identity,
                label: 0,
            });
        }
    }

    let positives = entries.iter().filter(|e| e.label == 1).count();
    let negatives = entries.len() - positives;
    Ok(DatasetManifest {
        header: ManifestHeader {
            class_counts: ClassCounts {
                negatives,
                positives,
            },
            k: config.k,
            patch_sizes: scales.to_vec(),
            volumes: volumes.to_vec(),
        },
        entries,
    })
}

/// Materialize the stack for a manifest entry at model input size
/// `input_size`: extract at the entry's scale, resample, then augment.
pub fn stack_for_entry(
    volume: &Volume,
    entry: &ManifestEntry,
    input_size: usize,
    k: usize,
) -> Result<PatchStack> {
    let center = (entry.center[0], entry.center[1], entry.center[2]);
    let stack = extract_stack(volume, center, entry.patch, k)?;
    let resampled = resample_stack(&stack, input_size);
    Ok(entry.aug.apply(&resampled))
}
