//! Visual-hull carving on an oriented voxel lattice.
//!
//! Each voxel center is projected into every camera; a voxel is occupied at
//! threshold `N` when at least `N` projections land on foreground mask pixels.
//! Projections outside an image count as background. Colors are a weighted
//! mean of nearest-pixel samples (weight 1 visible, 0.25 occluded, 0 outside).

mod grid;
mod volume_file;

use std::ops::Range;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

pub use grid::{GridSpec, VoxelGrid, DEFAULT_RESOLUTION};
pub use volume_file::{encode_volume, header_path, read_volume, write_volume, VolumeHeader};

use crate::camera::{CameraRig, PinholeCamera};
use crate::dataset::FrameSet;
use crate::imaging::{pixel_index, ColorImage, Mask};

pub const VISIBLE_WEIGHT: f64 = 1.0;
pub const OCCLUDED_WEIGHT: f64 = 0.25;

#[derive(Debug, Error)]
pub enum CarveError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("camera threshold {threshold} outside 1..={cameras}")]
    InvalidThreshold { threshold: usize, cameras: usize },
    #[error("{masks} masks supplied for a rig of {cameras} cameras")]
    CameraCountMismatch { masks: usize, cameras: usize },
    #[error("dual-threshold carving needs at least two cameras")]
    TooFewCameras,
    #[error("no voxel reaches the usage threshold")]
    EmptyUsage,
    #[error("no usage threshold fits the budget of {budget} voxels")]
    BudgetExceeded { budget: usize },
    #[error("volume file {path}: {message}")]
    VolumeFile { path: String, message: String },
}

impl CarveError {
    pub fn code(&self) -> &'static str {
        match self {
            CarveError::InvalidGrid(_) => "InvalidGrid",
            CarveError::InvalidThreshold { .. } => "InvalidThreshold",
            CarveError::CameraCountMismatch { .. } => "CameraCountMismatch",
            CarveError::TooFewCameras => "TooFewCameras",
            CarveError::EmptyUsage => "EmptyUsage",
            CarveError::BudgetExceeded { .. } => "BudgetExceeded",
            CarveError::VolumeFile { .. } => "VolumeFile",
        }
    }
}

/// Camera-frame position of voxel `(i, j, k)` is `origin + i*di + j*dj + k*dk`.
struct CameraLattice {
    origin: Vector3<f64>,
    di: Vector3<f64>,
    dj: Vector3<f64>,
    dk: Vector3<f64>,
}

impl CameraLattice {
    fn new(cam: &PinholeCamera, spec: &GridSpec) -> Self {
        let axes = cam.rotation * spec.axes();
        let origin = cam.to_camera_frame(&spec.voxel_center(0, 0, 0));
        Self {
            origin,
            di: axes.column(0) * spec.edge,
            dj: axes.column(1) * spec.edge,
            dk: axes.column(2) * spec.edge,
        }
    }

    #[inline]
    fn row_start(&self, i: usize, j: usize) -> Vector3<f64> {
        self.origin + self.di * i as f64 + self.dj * j as f64
    }
}

/// Nearest-pixel index of a camera-frame point, `None` when behind the camera or off-image.
#[inline]
fn pixel_of(cam: &PinholeCamera, x: &Vector3<f64>) -> Option<usize> {
    if x.z <= 0.0 {
        return None;
    }
    let u = cam.fx * (x.x / x.z) + cam.cx;
    let v = cam.fy * (x.y / x.z) + cam.cy;
    pixel_index(u, v, cam.width, cam.height)
}

fn check_masks(masks: &[Mask], rig: &CameraRig) -> Result<(), CarveError> {
    if masks.len() != rig.len() {
        return Err(CarveError::CameraCountMismatch {
            masks: masks.len(),
            cameras: rig.len(),
        });
    }
    for (m, c) in masks.iter().zip(rig.cameras()) {
        if m.width != c.width || m.height != c.height {
            return Err(CarveError::InvalidGrid(format!(
                "mask {}x{} does not match camera {}x{}",
                m.width, m.height, c.width, c.height
            )));
        }
    }
    Ok(())
}

/// Per voxel, the number of cameras whose mask is set at the voxel's projection.
pub fn mask_counts(masks: &[Mask], rig: &CameraRig, spec: &GridSpec) -> Result<Vec<u8>, CarveError> {
    counts_reaching(masks, rig, spec, 0)
}

/// Like [`mask_counts`], but a voxel stops being projected once it can no
/// longer reach `target`; such voxels end with some count below `target`.
fn counts_reaching(masks: &[Mask], rig: &CameraRig, spec: &GridSpec, target: usize) -> Result<Vec<u8>, CarveError> {
    spec.validate()?;
    check_masks(masks, rig)?;
    if rig.len() > u8::MAX as usize {
        return Err(CarveError::InvalidThreshold {
            threshold: rig.len(),
            cameras: u8::MAX as usize,
        });
    }
    let lattices: Vec<CameraLattice> = rig.cameras().iter().map(|c| CameraLattice::new(c, spec)).collect();
    let [_, dy, dz] = spec.dims;
    let cameras = rig.len();
    let mut counts = vec![0u8; spec.len()];
    counts.par_chunks_mut(dy * dz).enumerate().for_each(|(i, slab)| {
        for (n, ((cam, lat), mask)) in rig.cameras().iter().zip(&lattices).zip(masks).enumerate() {
            // a count below `need` before this camera can no longer reach the target
            let need = target.saturating_sub(cameras - n) as u8;
            for j in 0..dy {
                let mut x = lat.row_start(i, j);
                let row = &mut slab[j * dz..(j + 1) * dz];
                for count in row.iter_mut() {
                    if *count >= need {
                        if let Some(p) = pixel_of(cam, &x) {
                            *count += mask.data[p];
                        }
                    }
                    x += lat.dk;
                }
            }
        }
    });
    Ok(counts)
}

/// Binary occupancy: voxels seen as foreground by at least `threshold` cameras.
pub fn carve_occupancy(
    masks: &[Mask],
    rig: &CameraRig,
    spec: &GridSpec,
    threshold: usize,
) -> Result<Vec<u8>, CarveError> {
    if threshold == 0 || threshold > rig.len() {
        return Err(CarveError::InvalidThreshold {
            threshold,
            cameras: rig.len(),
        });
    }
    let counts = counts_reaching(masks, rig, spec, threshold)?;
    Ok(counts.into_iter().map(|c| u8::from(c as usize >= threshold)).collect())
}

/// Mean of the `C` and `C - 1` threshold volumes; values in {0, 0.5, 1}.
pub fn carve_dual(masks: &[Mask], rig: &CameraRig, spec: &GridSpec) -> Result<Vec<f32>, CarveError> {
    let c = rig.len();
    if c < 2 {
        return Err(CarveError::TooFewCameras);
    }
    let counts = counts_reaching(masks, rig, spec, c - 1)?;
    Ok(counts
        .into_iter()
        .map(|n| {
            let n = n as usize;
            0.5 * f32::from(u8::from(n >= c)) + 0.5 * f32::from(u8::from(n + 1 >= c))
        })
        .collect())
}

/// Depth-buffer visibility of occupied voxels from camera `cam_index`.
///
/// Occupied voxels that project into the image are ordered by distance to the
/// camera center (ties by voxel index); the first voxel to reach a pixel is
/// visible and every later voxel on that pixel is occluded.
pub fn visibility(occupancy: &[f32], rig: &CameraRig, spec: &GridSpec, cam_index: usize) -> Vec<bool> {
    let cam = rig.camera(cam_index);
    let lat = CameraLattice::new(cam, spec);
    let mut candidates: Vec<(f64, usize, usize)> = occupancy
        .par_iter()
        .enumerate()
        .filter(|(_, &o)| o > 0.0)
        .filter_map(|(idx, _)| {
            let [i, j, k] = spec.coords(idx);
            let x = lat.row_start(i, j) + lat.dk * k as f64;
            pixel_of(cam, &x).map(|p| (x.norm_squared(), idx, p))
        })
        .collect();
    candidates.par_sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut claimed = vec![false; cam.width * cam.height];
    let mut visible = vec![false; occupancy.len()];
    for (_, idx, p) in candidates {
        if !claimed[p] {
            claimed[p] = true;
            visible[idx] = true;
        }
    }
    visible
}

/// Occlusion-weighted mean color for every occupied voxel; unoccupied voxels and
/// voxels that project outside every image get black.
pub fn assign_colors(
    occupancy: &[f32],
    images: &[ColorImage],
    rig: &CameraRig,
    spec: &GridSpec,
    visible: &[Vec<bool>],
) -> Vec<[f32; 3]> {
    let lattices: Vec<CameraLattice> = rig.cameras().iter().map(|c| CameraLattice::new(c, spec)).collect();
    occupancy
        .par_iter()
        .enumerate()
        .map(|(idx, &occ)| {
            if occ <= 0.0 {
                return [0.0; 3];
            }
            let [i, j, k] = spec.coords(idx);
            let mut acc = [0.0f64; 3];
            let mut total = 0.0;
            for (c, cam) in rig.cameras().iter().enumerate() {
                let x = lattices[c].row_start(i, j) + lattices[c].dk * k as f64;
                let Some(p) = pixel_of(cam, &x) else {
                    continue;
                };
                let w = if visible[c][idx] {
                    VISIBLE_WEIGHT
                } else {
                    OCCLUDED_WEIGHT
                };
                let px = images[c].data[p];
                for ch in 0..3 {
                    acc[ch] += w * px[ch];
                }
                total += w;
            }
            if total > 0.0 {
                acc.map(|a| (a / total) as f32)
            } else {
                [0.0; 3]
            }
        })
        .collect()
}

/// Dual-threshold carve plus visibility-weighted coloring of one frame.
pub fn carve_frame(frame: &FrameSet, rig: &CameraRig, spec: &GridSpec) -> Result<VoxelGrid, CarveError> {
    let occupancy = carve_dual(&frame.masks, rig, spec)?;
    let visible: Vec<Vec<bool>> = (0..rig.len())
        .map(|c| visibility(&occupancy, rig, spec, c))
        .collect();
    let color = assign_colors(&occupancy, &frame.images, rig, spec, &visible);
    Ok(VoxelGrid {
        spec: spec.clone(),
        occupancy,
        color,
    })
}

/// Accumulated per-voxel occupancy counts on the full base lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageCounts {
    pub base_resolution: usize,
    pub counts: Vec<u32>,
}

impl UsageCounts {
    pub fn new(base_resolution: usize) -> Self {
        Self {
            base_resolution,
            counts: vec![0; base_resolution.pow(3)],
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.base_resolution + j) * self.base_resolution + k
    }

    /// Adds one frame; every voxel with occupancy > 0 counts once.
    pub fn add(&mut self, grid: &VoxelGrid) {
        let s = &grid.spec;
        for (idx, &occ) in grid.occupancy.iter().enumerate() {
            if occ > 0.0 {
                let [i, j, k] = s.coords(idx);
                let b = self.index(s.start[0] + i, s.start[1] + j, s.start[2] + k);
                self.counts[b] += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncationConfig {
    /// Minimum usage count for a voxel to be kept.
    pub threshold: u32,
    /// Window extents are padded to a multiple of this.
    pub multiple: usize,
    /// Optional cap on the product of the window extents; the threshold is
    /// raised until the window fits.
    pub max_voxels: Option<usize>,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            threshold: 1,
            multiple: 16,
            max_voxels: None,
        }
    }
}

/// Smallest padded window of the base lattice containing every voxel whose usage
/// reaches the threshold.
pub fn truncate_volume(usage: &UsageCounts, cfg: &TruncationConfig) -> Result<[Range<usize>; 3], CarveError> {
    let max_count = usage.counts.iter().copied().max().unwrap_or(0);
    let mut threshold = cfg.threshold.max(1);
    loop {
        let ranges = padded_window(usage, threshold, cfg.multiple).ok_or(CarveError::EmptyUsage)?;
        let size: usize = ranges.iter().map(|r| r.len()).product();
        match cfg.max_voxels {
            Some(budget) if size > budget => {
                if threshold >= max_count {
                    return Err(CarveError::BudgetExceeded { budget });
                }
                threshold += 1;
            }
            _ => return Ok(ranges),
        }
    }
}

fn padded_window(usage: &UsageCounts, threshold: u32, multiple: usize) -> Option<[Range<usize>; 3]> {
    let n = usage.base_resolution;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (idx, &c) in usage.counts.iter().enumerate() {
        if c >= threshold {
            any = true;
            let ijk = [idx / (n * n), (idx / n) % n, idx % n];
            for a in 0..3 {
                lo[a] = lo[a].min(ijk[a]);
                hi[a] = hi[a].max(ijk[a]);
            }
        }
    }
    if !any {
        return None;
    }
    let multiple = multiple.max(1);
    Some(std::array::from_fn(|a| {
        let extent = hi[a] - lo[a] + 1;
        let padded = extent.div_ceil(multiple).saturating_mul(multiple).min(n);
        let start = lo[a].saturating_sub((padded - extent) / 2).min(n - padded);
        start..start + padded
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::PinholeCamera;

    fn ring_rig(count: usize, size: usize) -> CameraRig {
        let cams = (0..count)
            .map(|c| {
                let a = c as f64 * std::f64::consts::TAU / count as f64;
                let eye = Vector3::new(4.0 * a.cos(), 4.0 * a.sin(), 1.0);
                let f = size as f64 * 1.5;
                let half = size as f64 / 2.0;
                PinholeCamera::look_at(eye, Vector3::zeros(), Vector3::z(), f, f, half, half, size, size).unwrap()
            })
            .collect();
        CameraRig::from_cameras(cams).unwrap()
    }

    #[test]
    fn full_masks_occupy_all_visible_voxels() {
        let rig = ring_rig(4, 48);
        let spec = GridSpec::cube(8, 0.1, Vector3::zeros(), 0.0);
        let masks = vec![Mask::full(48, 48); 4];
        let occ = carve_occupancy(&masks, &rig, &spec, 4).unwrap();
        assert!(occ.iter().all(|&o| o == 1));
    }

    #[test]
    fn one_empty_mask_clears_everything_at_full_threshold() {
        let rig = ring_rig(4, 48);
        let spec = GridSpec::cube(8, 0.1, Vector3::zeros(), 0.0);
        let mut masks = vec![Mask::full(48, 48); 4];
        masks[2] = Mask::empty(48, 48);
        let occ = carve_occupancy(&masks, &rig, &spec, 4).unwrap();
        assert!(occ.iter().all(|&o| o == 0));
        let dual = carve_dual(&masks, &rig, &spec).unwrap();
        assert!(dual.iter().all(|&o| o == 0.5));
    }

    #[test]
    fn threshold_is_validated() {
        let rig = ring_rig(4, 16);
        let spec = GridSpec::cube(4, 0.1, Vector3::zeros(), 0.0);
        let masks = vec![Mask::full(16, 16); 4];
        assert!(carve_occupancy(&masks, &rig, &spec, 0).is_err());
        assert!(carve_occupancy(&masks, &rig, &spec, 5).is_err());
        assert!(carve_occupancy(&masks[..3], &rig, &spec, 2).is_err());
    }

    #[test]
    fn single_voxel_visible_everywhere() {
        let rig = ring_rig(4, 48);
        let spec = GridSpec::cube(8, 0.1, Vector3::zeros(), 0.0);
        let mut occ = vec![0.0f32; spec.len()];
        let idx = spec.index(3, 4, 5);
        occ[idx] = 1.0;
        for c in 0..4 {
            let vis = visibility(&occ, &rig, &spec, c);
            assert!(vis[idx]);
            assert_eq!(vis.iter().filter(|&&v| v).count(), 1);
        }
    }

    #[test]
    fn nearer_voxel_on_shared_ray_occludes() {
        // camera on the +x axis looking at the origin; voxels along the x axis share a pixel
        let cam = PinholeCamera::look_at(
            Vector3::new(5.0, 0.05, 0.05),
            Vector3::new(0.0, 0.05, 0.05),
            Vector3::z(),
            20.0,
            20.0,
            8.0,
            8.0,
            16,
            16,
        )
        .unwrap();
        let rig = CameraRig::from_cameras(vec![cam]).unwrap();
        let spec = GridSpec::cube(4, 0.1, Vector3::zeros(), 0.0);
        let mut occ = vec![0.0f32; spec.len()];
        let near = spec.index(3, 2, 2);
        let far = spec.index(0, 2, 2);
        occ[near] = 1.0;
        occ[far] = 0.5;
        let vis = visibility(&occ, &rig, &spec, 0);
        assert!(vis[near]);
        assert!(!vis[far]);
    }

    #[test]
    fn colors_use_visibility_weights() {
        let rig = ring_rig(2, 32);
        let spec = GridSpec::cube(4, 0.05, Vector3::zeros(), 0.0);
        let mut occ = vec![0.0f32; spec.len()];
        let idx = spec.index(1, 2, 1);
        occ[idx] = 1.0;
        let images = vec![
            ColorImage::filled(32, 32, [1.0, 0.0, 0.0]),
            ColorImage::filled(32, 32, [0.0, 0.0, 1.0]),
        ];
        let mut vis = vec![vec![false; spec.len()]; 2];
        vis[0][idx] = true;
        let colors = assign_colors(&occ, &images, &rig, &spec, &vis);
        let c = colors[idx];
        assert!((c[0] - 0.8).abs() < 1e-6 && c[1] == 0.0 && (c[2] - 0.2).abs() < 1e-6, "{c:?}");
        assert_eq!(colors[spec.index(0, 0, 0)], [0.0; 3]);
    }

    #[test]
    fn off_image_voxels_are_black() {
        let rig = ring_rig(2, 32);
        let spec = GridSpec::cube(4, 0.05, Vector3::new(0.0, 0.0, 50.0), 0.0);
        let occ = vec![1.0f32; spec.len()];
        let images = vec![ColorImage::filled(32, 32, [1.0, 0.0, 0.0]); 2];
        let vis: Vec<_> = (0..2).map(|c| visibility(&occ, &rig, &spec, c)).collect();
        let colors = assign_colors(&occ, &images, &rig, &spec, &vis);
        assert!(colors.iter().all(|c| *c == [0.0; 3]));
    }

    fn box_usage(lo: [usize; 3], hi: [usize; 3]) -> UsageCounts {
        let mut u = UsageCounts::new(112);
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for k in lo[2]..hi[2] {
                    let b = u.index(i, j, k);
                    u.counts[b] = 3;
                }
            }
        }
        u
    }

    #[test]
    fn truncation_pads_to_multiples_of_16() {
        let u = box_usage([11, 21, 26], [101, 91, 86]);
        let r = truncate_volume(&u, &TruncationConfig::default()).unwrap();
        assert_eq!(r.clone().map(|r| r.len()), [96, 80, 64]);
        for (axis, (lo, hi)) in [(11, 101), (21, 91), (26, 86)].into_iter().enumerate() {
            assert!(r[axis].start <= lo && r[axis].end >= hi);
        }
    }

    #[test]
    fn truncation_of_full_usage_and_empty_usage() {
        let u = box_usage([0; 3], [112; 3]);
        let r = truncate_volume(&u, &TruncationConfig::default()).unwrap();
        assert_eq!(r, [0..112, 0..112, 0..112]);
        let empty = UsageCounts::new(112);
        assert!(matches!(
            truncate_volume(&empty, &TruncationConfig::default()),
            Err(CarveError::EmptyUsage)
        ));
    }

    #[test]
    fn truncation_raises_threshold_to_fit_budget() {
        let mut u = box_usage([40, 40, 40], [60, 60, 60]);
        // a rarely used outlier far away
        let b = u.index(0, 0, 0);
        u.counts[b] = 1;
        let cfg = TruncationConfig {
            max_voxels: Some(32 * 32 * 32),
            ..TruncationConfig::default()
        };
        let r = truncate_volume(&u, &cfg).unwrap();
        assert_eq!(r.clone().map(|r| r.len()), [32, 32, 32]);
        let tight = TruncationConfig {
            max_voxels: Some(10),
            ..TruncationConfig::default()
        };
        assert!(matches!(truncate_volume(&u, &tight), Err(CarveError::BudgetExceeded { .. })));
    }

    #[test]
    fn usage_counts_respect_window_offset() {
        let spec = GridSpec::cube(16, 0.1, Vector3::zeros(), 0.0).truncated(&[4..8, 2..6, 0..4]);
        let mut grid = VoxelGrid::empty(spec);
        grid.occupancy[0] = 0.5;
        let mut usage = UsageCounts::new(16);
        usage.add(&grid);
        assert_eq!(usage.counts[usage.index(4, 2, 0)], 1);
        assert_eq!(usage.counts.iter().sum::<u32>(), 1);
    }
}
