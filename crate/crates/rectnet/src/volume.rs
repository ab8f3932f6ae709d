//! Volume data model, on-disk formats, and the synthetic thoracic phantom
//! generator used for desk-scale training and evaluation.
//!
//! A volume on disk is a `<name>.json` header next to a `<name>.raw`
//! payload of little-endian `i16` samples, ordered x fastest, then y,
//! then z. Masks use the same header with `"dtype":"u8"`. Ground-truth
//! nodule annotations live in `<name>.nodules.json` as run-length encoded
//! voxel sets plus reader scores.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;
pub const AIR_HU: i16 = -1000;

/// 3D grid of Hounsfield-unit samples with spacing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    data: Vec<i16>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64), data: Vec<i16>) -> Result<Self> {
        validate_geometry(dims, spacing)?;
        let expected = dims.0 * dims.1 * dims.2;
        if data.len() != expected {
            return Err(Error::PayloadSizeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: (usize, usize, usize), spacing: (f64, f64, f64), hu: i16) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(dims, spacing, vec![hu; n])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.0 + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.data[self.index(x, y, z)]
    }

    /// HU at (x, y, z) for possibly out-of-bounds signed coordinates;
    /// out-of-bounds reads come back as air.
    #[inline]
    pub fn get_padded(&self, x: i64, y: i64, z: i64) -> i16 {
        if x < 0
            || y < 0
            || z < 0
            || x >= self.dims.0 as i64
            || y >= self.dims.1 as i64
            || z >= self.dims.2 as i64
        {
            AIR_HU
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        x < self.dims.0 && y < self.dims.1 && z < self.dims.2
    }

    /// World-space position (mm) of the voxel center.
    pub fn voxel_center_mm(&self, x: usize, y: usize, z: usize) -> (f64, f64, f64) {
        (
            (x as f64 + 0.5) * self.spacing.0,
            (y as f64 + 0.5) * self.spacing.1,
            (z as f64 + 0.5) * self.spacing.2,
        )
    }
}

fn validate_geometry(dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<()> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(Error::InvalidGeometry(format!("zero-sized dims {dims:?}")));
    }
    if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
        return Err(Error::InvalidGeometry(format!(
            "non-positive spacing {spacing:?}"
        )));
    }
    Ok(())
}

/// One boolean per voxel, dims matching the paired volume.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new_false(dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Self {
        BinaryMask {
            dims,
            spacing,
            data: vec![false; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_data(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        data: Vec<bool>,
    ) -> Result<Self> {
        validate_geometry(dims, spacing)?;
        let expected = dims.0 * dims.1 * dims.2;
        if data.len() != expected {
            return Err(Error::PayloadSizeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(BinaryMask { dims, spacing, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.0 + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// True iff every true voxel of `self` is also true in `other`.
    pub fn subset_of(&self, other: &BinaryMask) -> bool {
        self.data
            .iter()
            .zip(other.data.iter())
            .all(|(&a, &b)| !a || b)
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Three-way grouping of averaged reader scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreClass {
    Difficult,
    Medium,
    Easy,
}

impl ScoreClass {
    /// Bin a mean 1-5 score at the 2.5 / 3.5 cut points. Both boundaries
    /// fall in the medium class.
    pub fn from_mean(mean: f64) -> ScoreClass {
        if mean < 2.5 {
            ScoreClass::Difficult
        } else if mean <= 3.5 {
            ScoreClass::Medium
        } else {
            ScoreClass::Easy
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ScoreClass::Difficult => "difficult",
            ScoreClass::Medium => "medium",
            ScoreClass::Easy => "easy",
        }
    }
}

/// Ground-truth nodule: exact member voxels plus reader scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub id: usize,
    /// Member voxel coordinates (x, y, z).
    pub voxels: Vec<(usize, usize, usize)>,
    /// Per-reader subtlety scores, 1-5, up to 4 readers.
    pub subtlety: Vec<f64>,
    /// Per-reader malignancy scores, 1-5.
    pub malignancy: Vec<f64>,
    /// Number of readers marking this nodule (1-4).
    pub agreement_level: u8,
}

impl NoduleAnnotation {
    pub fn mean_subtlety(&self) -> f64 {
        mean(&self.subtlety)
    }

    pub fn mean_malignancy(&self) -> f64 {
        mean(&self.malignancy)
    }

    pub fn subtlety_class(&self) -> ScoreClass {
        ScoreClass::from_mean(self.mean_subtlety())
    }

    pub fn malignancy_class(&self) -> ScoreClass {
        ScoreClass::from_mean(self.mean_malignancy())
    }

    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        if self.voxels.is_empty() {
            return Err(Error::InvalidGeometry(format!(
                "annotation {} has an empty voxel set",
                self.id
            )));
        }
        for &(x, y, z) in &self.voxels {
            if x >= dims.0 || y >= dims.1 || z >= dims.2 {
                return Err(Error::InvalidGeometry(format!(
                    "annotation {} voxel ({x},{y},{z}) outside dims {dims:?}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    raw: String,
}

/// Resolve `<dir>/<stem>` naming for the header/raw pair. Accepts a path
/// with or without the `.json` extension.
fn header_path(path: &Path) -> PathBuf {
    if path.extension().map(|e| e == "json").unwrap_or(false) {
        path.to_path_buf()
    } else {
        path.with_extension("json")
    }
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string())
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    let header = header_path(path);
    let stem = stem_of(&header);
    let raw_name = format!("{stem}.raw");
    let meta = VolumeHeader {
        dims: [volume.dims.0, volume.dims.1, volume.dims.2],
        spacing: [volume.spacing.0, volume.spacing.1, volume.spacing.2],
        dtype: "i16".to_string(),
        raw: raw_name.clone(),
    };
    let json = serde_json::to_string(&meta).expect("header serializes");
    fs::write(&header, json).map_err(|e| Error::io(&header, e))?;

    let mut payload = Vec::with_capacity(volume.data.len() * 2);
    for &v in &volume.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let raw = header.with_file_name(raw_name);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let header = header_path(path);
    let text = fs::read_to_string(&header).map_err(|e| Error::io(&header, e))?;
    let meta: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&header, e.to_string()))?;
    if meta.dtype != "i16" {
        return Err(Error::format(
            &header,
            format!("expected dtype i16, found {}", meta.dtype),
        ));
    }
    let dims = (meta.dims[0], meta.dims[1], meta.dims[2]);
    let spacing = (meta.spacing[0], meta.spacing[1], meta.spacing[2]);
    validate_geometry(dims, spacing)?;

    let raw = header.with_file_name(&meta.raw);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() % 2 != 0 {
        return Err(Error::format(&raw, "odd payload byte count"));
    }
    let data: Vec<i16> = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Volume::new(dims, spacing, data)
}

pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let header = header_path(path);
    let stem = stem_of(&header);
    let raw_name = format!("{stem}.raw");
    let meta = VolumeHeader {
        dims: [mask.dims.0, mask.dims.1, mask.dims.2],
        spacing: [mask.spacing.0, mask.spacing.1, mask.spacing.2],
        dtype: "u8".to_string(),
        raw: raw_name.clone(),
    };
    let json = serde_json::to_string(&meta).expect("header serializes");
    fs::write(&header, json).map_err(|e| Error::io(&header, e))?;

    let payload: Vec<u8> = mask.data.iter().map(|&b| b as u8).collect();
    let raw = header.with_file_name(raw_name);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let header = header_path(path);
    let text = fs::read_to_string(&header).map_err(|e| Error::io(&header, e))?;
    let meta: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&header, e.to_string()))?;
    if meta.dtype != "u8" {
        return Err(Error::format(
            &header,
            format!("expected dtype u8, found {}", meta.dtype),
        ));
    }
    let dims = (meta.dims[0], meta.dims[1], meta.dims[2]);
    let spacing = (meta.spacing[0], meta.spacing[1], meta.spacing[2]);
    validate_geometry(dims, spacing)?;

    let raw = header.with_file_name(&meta.raw);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    for (i, &b) in bytes.iter().enumerate() {
        if b > 1 {
            return Err(Error::format(&raw, format!("mask byte {i} is {b}, not 0/1")));
        }
    }
    let data: Vec<bool> = bytes.iter().map(|&b| b != 0).collect();
    BinaryMask::from_data(dims, spacing, data)
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    nodules: Vec<AnnotationRecord>,
}

/// Voxel sets are stored as x-runs: [x_start, y, z, length].
#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    id: usize,
    runs: Vec<[usize; 4]>,
    subtlety: Vec<f64>,
    malignancy: Vec<f64>,
    agreement_level: u8,
}

fn encode_runs(voxels: &[(usize, usize, usize)]) -> Vec<[usize; 4]> {
    let mut sorted: Vec<_> = voxels.to_vec();
    sorted.sort_by_key(|&(x, y, z)| (z, y, x));
    let mut runs = Vec::new();
    let mut iter = sorted.into_iter();
    if let Some((mut sx, mut sy, mut sz)) = iter.next() {
        let mut len = 1usize;
        for (x, y, z) in iter {
            if z == sz && y == sy && x == sx + len {
                len += 1;
            } else {
                runs.push([sx, sy, sz, len]);
                sx = x;
                sy = y;
                sz = z;
                len = 1;
            }
        }
        runs.push([sx, sy, sz, len]);
    }
    runs
}

fn decode_runs(runs: &[[usize; 4]]) -> Vec<(usize, usize, usize)> {
    let mut voxels = Vec::new();
    for &[x, y, z, len] in runs {
        for dx in 0..len {
            voxels.push((x + dx, y, z));
        }
    }
    voxels
}

pub fn write_annotations(annotations: &[NoduleAnnotation], path: &Path) -> Result<()> {
    let file = AnnotationFile {
        nodules: annotations
            .iter()
            .map(|a| AnnotationRecord {
                id: a.id,
                runs: encode_runs(&a.voxels),
                subtlety: a.subtlety.clone(),
                malignancy: a.malignancy.clone(),
                agreement_level: a.agreement_level,
            })
            .collect(),
    };
    let json = serde_json::to_string(&file).expect("annotations serialize");
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<NoduleAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(file
        .nodules
        .into_iter()
        .map(|r| NoduleAnnotation {
            id: r.id,
            voxels: decode_runs(&r.runs),
            subtlety: r.subtlety,
            malignancy: r.malignancy,
            agreement_level: r.agreement_level,
        })
        .collect())
}

/// Conventional annotation path for a volume written at `path`.
pub fn annotation_path(path: &Path) -> PathBuf {
    let header = header_path(path);
    let stem = stem_of(&header);
    header.with_file_name(format!("{stem}.nodules.json"))
}

// ---------------------------------------------------------------------------
// Synthetic phantom
// ---------------------------------------------------------------------------

/// Axis-aligned ellipsoid in world coordinates (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub radii_mm: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: (f64, f64, f64)) -> bool {
        let dx = (p.0 - self.center_mm[0]) / self.radii_mm[0];
        let dy = (p.1 - self.center_mm[1]) / self.radii_mm[1];
        let dz = (p.2 - self.center_mm[2]) / self.radii_mm[2];
        dx * dx + dy * dy + dz * dz <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleSpec {
    pub center_mm: [f64; 3],
    pub radii_mm: [f64; 3],
    pub hu: i16,
}

/// Tube of constant radius around a polyline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselSpec {
    pub polyline_mm: Vec<[f64; 3]>,
    pub radius_mm: f64,
    pub hu: i16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub lung: Ellipsoid,
    pub nodules: Vec<NoduleSpec>,
    pub vessels: Vec<VesselSpec>,
    /// HU of air outside the body.
    pub air_hu: i16,
    /// Mean HU of lung tissue; must sit in [-600, -400].
    pub lung_hu: i16,
    /// HU of chest wall / body; must be at least -100.
    pub body_hu: i16,
    /// Chest-wall thickness added around the lung ellipsoid to form the
    /// body region.
    pub wall_mm: f64,
    /// Standard deviation of additive Gaussian noise inside the lung
    /// ellipsoid, in HU.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [96, 96, 28],
            spacing: [1.25, 1.25, 2.5],
            lung: Ellipsoid {
                center_mm: [60.0, 60.0, 35.0],
                radii_mm: [42.0, 34.0, 26.0],
            },
            nodules: Vec::new(),
            vessels: Vec::new(),
            air_hu: AIR_HU,
            lung_hu: -500,
            body_hu: 40,
            wall_mm: 8.0,
            noise_sigma: 30.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        validate_geometry(
            (self.dims[0], self.dims[1], self.dims[2]),
            (self.spacing[0], self.spacing[1], self.spacing[2]),
        )?;
        if !(-600..=-400).contains(&(self.lung_hu as i64)) {
            return Err(Error::InvalidPhantom(format!(
                "lung HU mean {} outside [-600, -400]",
                self.lung_hu
            )));
        }
        if self.body_hu < -100 {
            return Err(Error::InvalidPhantom(format!(
                "body HU {} below -100",
                self.body_hu
            )));
        }
        for (i, n) in self.nodules.iter().enumerate() {
            if !(-200..=200).contains(&n.hu) {
                return Err(Error::InvalidPhantom(format!(
                    "nodule {i} HU {} outside [-200, 200]",
                    n.hu
                )));
            }
        }
        for (i, v) in self.vessels.iter().enumerate() {
            if !(-200..=200).contains(&v.hu) {
                return Err(Error::InvalidPhantom(format!(
                    "vessel {i} HU {} outside [-200, 200]",
                    v.hu
                )));
            }
            if v.polyline_mm.len() < 2 {
                return Err(Error::InvalidPhantom(format!(
                    "vessel {i} polyline needs at least 2 points"
                )));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidPhantom("negative noise sigma".into()));
        }
        Ok(())
    }

    /// Contrast-to-noise ratio of a nodule against the lung background.
    pub fn nodule_cnr(&self, nodule: &NoduleSpec) -> f64 {
        let contrast = (nodule.hu as f64 - self.lung_hu as f64).abs();
        if self.noise_sigma <= 0.0 {
            f64::INFINITY
        } else {
            contrast / self.noise_sigma
        }
    }
}

fn dist_to_segment_sq(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len_sq = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len_sq == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len_sq).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Render a phantom volume, its exact lung mask, and exact nodule
/// annotations. Deterministic for a given spec (including seed).
pub fn generate_phantom(
    spec: &PhantomSpec,
) -> Result<(Volume, BinaryMask, Vec<NoduleAnnotation>)> {
    spec.validate()?;
    let dims = (spec.dims[0], spec.dims[1], spec.dims[2]);
    let spacing = (spec.spacing[0], spec.spacing[1], spec.spacing[2]);
    let body = Ellipsoid {
        center_mm: spec.lung.center_mm,
        radii_mm: [
            spec.lung.radii_mm[0] + spec.wall_mm,
            spec.lung.radii_mm[1] + spec.wall_mm,
            spec.lung.radii_mm[2] + spec.wall_mm,
        ],
    };

    let mut volume = Volume::filled(dims, spacing, spec.air_hu)?;
    let mut lung_truth = BinaryMask::new_false(dims, spacing);

    // Base anatomy: air, wall, lung.
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let p = volume.voxel_center_mm(x, y, z);
                let hu = if spec.lung.contains(p) {
                    lung_truth.set(x, y, z, true);
                    spec.lung_hu
                } else if body.contains(p) {
                    spec.body_hu
                } else {
                    spec.air_hu
                };
                let i = volume.index(x, y, z);
                volume.data[i] = hu;
            }
        }
    }

    // Vessels overwrite lung tissue; restricted to the lung interior so
    // the wall keeps its HU.
    for vessel in &spec.vessels {
        let r_sq = vessel.radius_mm * vessel.radius_mm;
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    if !lung_truth.get(x, y, z) {
                        continue;
                    }
                    let p = volume.voxel_center_mm(x, y, z);
                    let pa = [p.0, p.1, p.2];
                    let hit = vessel
                        .polyline_mm
                        .windows(2)
                        .any(|w| dist_to_segment_sq(pa, w[0], w[1]) <= r_sq);
                    if hit {
                        let i = volume.index(x, y, z);
                        volume.data[i] = vessel.hu;
                    }
                }
            }
        }
    }

    // Nodules: rasterize, check containment and overlap, overwrite last
    // so annotations are exact.
    let mut annotations = Vec::new();
    let mut claimed: HashSet<(usize, usize, usize)> = HashSet::new();
    for (id, nodule) in spec.nodules.iter().enumerate() {
        let shape = Ellipsoid {
            center_mm: nodule.center_mm,
            radii_mm: nodule.radii_mm,
        };
        let mut voxels = Vec::new();
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    if shape.contains(volume.voxel_center_mm(x, y, z)) {
                        if !lung_truth.get(x, y, z) {
                            return Err(Error::NoduleOutsideLung { id });
                        }
                        voxels.push((x, y, z));
                    }
                }
            }
        }
        if voxels.is_empty() {
            return Err(Error::InvalidPhantom(format!(
                "nodule {id} rasterizes to zero voxels"
            )));
        }
        for &v in &voxels {
            if !claimed.insert(v) {
                let a = annotations
                    .iter()
                    .position(|ann: &NoduleAnnotation| ann.voxels.contains(&v))
                    .unwrap_or(0);
                return Err(Error::OverlappingNodules { a, b: id });
            }
        }
        for &(x, y, z) in &voxels {
            let i = volume.index(x, y, z);
            volume.data[i] = nodule.hu;
        }

        let cnr = spec.nodule_cnr(nodule);
        let subtlety_score = (1.0 + cnr / 3.0).clamp(1.0, 5.0);
        let mean_radius =
            (nodule.radii_mm[0] + nodule.radii_mm[1] + nodule.radii_mm[2]) / 3.0;
        let malignancy_score = (1.0 + mean_radius / 1.5).clamp(1.0, 5.0);
        annotations.push(NoduleAnnotation {
            id,
            voxels,
            subtlety: vec![subtlety_score; 4],
            malignancy: vec![malignancy_score; 4],
            agreement_level: 4,
        });
    }

    // Additive Gaussian noise over the lung ellipsoid interior, fixed
    // scan order for determinism.
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    if lung_truth.get(x, y, z) {
                        let i = volume.index(x, y, z);
                        let noisy = volume.data[i] as f64 + normal.sample(&mut rng);
                        volume.data[i] =
                            noisy.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16;
                    }
                }
            }
        }
    }

    Ok((volume, lung_truth, annotations))
}
