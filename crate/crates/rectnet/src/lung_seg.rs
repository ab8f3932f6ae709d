//! Lung segmentation by HU thresholding, per-slice background removal and
//! hole filling, and in-plane morphological dilation.
//!
//! The full chain recovers the lung field including juxtapleural
//! structures that a plain threshold would clip off.

use crate::error::Result;
use crate::volume::{BinaryMask, Volume};

/// Voxels strictly below the threshold become true.
pub fn threshold_mask(volume: &Volume, threshold_hu: i16) -> BinaryMask {
    let dims = volume.dims();
    let data = volume.data().iter().map(|&v| v < threshold_hu).collect();
    BinaryMask::from_data(dims, volume.spacing(), data).expect("dims match volume")
}

/// 4-connected flood fill over one slice, restricted to positions where
/// `predicate` holds. Returns visited flags for the slice.
fn flood_slice(
    width: usize,
    height: usize,
    seeds: &[(usize, usize)],
    predicate: impl Fn(usize, usize) -> bool,
) -> Vec<bool> {
    let mut visited = vec![false; width * height];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for &(x, y) in seeds {
        if predicate(x, y) && !visited[y * width + x] {
            visited[y * width + x] = true;
            stack.push((x, y));
        }
    }
    while let Some((x, y)) = stack.pop() {
        let mut push = |nx: usize, ny: usize, stack: &mut Vec<(usize, usize)>| {
            if predicate(nx, ny) && !visited[ny * width + nx] {
                visited[ny * width + nx] = true;
                stack.push((nx, ny));
            }
        };
        if x > 0 {
            push(x - 1, y, &mut stack);
        }
        if x + 1 < width {
            push(x + 1, y, &mut stack);
        }
        if y > 0 {
            push(x, y - 1, &mut stack);
        }
        if y + 1 < height {
            push(x, y + 1, &mut stack);
        }
    }
    visited
}

fn border_seeds(width: usize, height: usize) -> Vec<(usize, usize)> {
    let mut seeds = Vec::new();
    for x in 0..width {
        seeds.push((x, 0));
        if height > 1 {
            seeds.push((x, height - 1));
        }
    }
    for y in 1..height.saturating_sub(1) {
        seeds.push((0, y));
        if width > 1 {
            seeds.push((width - 1, y));
        }
    }
    seeds
}

/// Per slice: clear true components touching the slice border (outside
/// air), then set false components not reachable from the border
/// (enclosed holes such as vessels) to true. Both passes use
/// 4-connectivity.
pub fn remove_background_fill(mask: &BinaryMask) -> BinaryMask {
    let (nx, ny, nz) = mask.dims();
    let mut out = mask.clone();
    let seeds = border_seeds(nx, ny);
    for z in 0..nz {
        let background = flood_slice(nx, ny, &seeds, |x, y| mask.get(x, y, z));
        for y in 0..ny {
            for x in 0..nx {
                if background[y * nx + x] {
                    out.set(x, y, z, false);
                }
            }
        }
        // Holes: false voxels (in the updated slice) not connected to the
        // border through false voxels.
        let snapshot: Vec<bool> = {
            let mut s = vec![false; nx * ny];
            for y in 0..ny {
                for x in 0..nx {
                    s[y * nx + x] = out.get(x, y, z);
                }
            }
            s
        };
        let outside = flood_slice(nx, ny, &seeds, |x, y| !snapshot[y * nx + x]);
        for y in 0..ny {
            for x in 0..nx {
                if !snapshot[y * nx + x] && !outside[y * nx + x] {
                    out.set(x, y, z, true);
                }
            }
        }
    }
    out
}

/// In-plane dilation with a disk structuring element of the given pixel
/// radius: offsets (dx, dy) with dx^2 + dy^2 <= r^2.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let offsets = disk_offsets(radius);
    let (nx, ny, nz) = mask.dims();
    let mut out = BinaryMask::new_false(mask.dims(), mask.spacing());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.get(x, y, z) {
                    continue;
                }
                for &(dx, dy) in &offsets {
                    let tx = x as i64 + dx;
                    let ty = y as i64 + dy;
                    if tx >= 0 && ty >= 0 && (tx as usize) < nx && (ty as usize) < ny {
                        out.set(tx as usize, ty as usize, z, true);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let r_sq = r * r;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r_sq {
                offsets.push((dx, dy));
            }
        }
    }
    offsets
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentationConfig {
    pub threshold_hu: i16,
    pub dilate_radius: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            threshold_hu: -480,
            dilate_radius: 3,
        }
    }
}

/// Threshold, remove background and fill holes, then dilate.
pub fn segment_lungs(volume: &Volume, config: &SegmentationConfig) -> Result<BinaryMask> {
    let thresholded = threshold_mask(volume, config.threshold_hu);
    let cleaned = remove_background_fill(&thresholded);
    Ok(dilate(&cleaned, config.dilate_radius))
}
