//! Body center and heading from carved volumes.
//!
//! Each frame's occupancy is summarized by a moment-matched Gaussian. The
//! principal axis of its covariance gives the heading up to sign; signs are
//! chained through time by pushing the tip `μ_t + v_t` through the closed-form
//! Gaussian Wasserstein-2 map into frame `t + 1`, and finally the whole track is
//! flipped if it points against the net direction of travel.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::carve::VoxelGrid;
use crate::linalg::{min_eigenvalue3, sym_map3, symmetrize3};

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("volume has no occupied voxels")]
    EmptyVolume,
    #[error("matrix is not symmetric positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotSpd { min_eigenvalue: f64 },
    #[error("principal axis is vertical; azimuth undefined")]
    VerticalAxis,
    #[error("sequence too short: need at least {needed} frames, got {got}")]
    SequenceTooShort { needed: usize, got: usize },
    #[error("track file {path}: {message}")]
    TrackFile { path: String, message: String },
}

impl PoseError {
    pub fn code(&self) -> &'static str {
        match self {
            PoseError::EmptyVolume => "EmptyVolume",
            PoseError::NotSpd { .. } => "NotSPD",
            PoseError::VerticalAxis => "VerticalAxis",
            PoseError::SequenceTooShort { .. } => "SequenceTooShort",
            PoseError::TrackFile { .. } => "TrackFile",
        }
    }
}

/// Per-frame body center, signed heading axis and azimuth.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyFrame {
    pub index: usize,
    pub center: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub axis: Vector3<f64>,
    pub azimuth: f64,
}

/// Occupancy-weighted mean and covariance of voxel centers. The covariance
/// includes the `edge²/12` spread of a uniformly filled cell.
pub fn moment_gaussian(grid: &VoxelGrid) -> Result<(Vector3<f64>, Matrix3<f64>), PoseError> {
    let spec = &grid.spec;
    let axes = spec.axes();
    let mut mass = 0.0;
    let mut sum = Vector3::zeros();
    for (idx, &occ) in grid.occupancy.iter().enumerate() {
        if occ > 0.0 {
            let [i, j, k] = spec.coords(idx);
            let w = f64::from(occ);
            mass += w;
            sum += spec.local_offset(i, j, k) * w;
        }
    }
    if mass <= 0.0 {
        return Err(PoseError::EmptyVolume);
    }
    let local_mean = sum / mass;
    let mut cov = Matrix3::zeros();
    for (idx, &occ) in grid.occupancy.iter().enumerate() {
        if occ > 0.0 {
            let [i, j, k] = spec.coords(idx);
            let d = spec.local_offset(i, j, k) - local_mean;
            cov += d * d.transpose() * f64::from(occ);
        }
    }
    cov /= mass;
    cov += Matrix3::identity() * (spec.edge * spec.edge / 12.0);
    let mean = spec.center + axes * local_mean;
    let cov = symmetrize3(&(axes * cov * axes.transpose()));
    Ok((mean, cov))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisEstimate {
    pub axis: Vector3<f64>,
    pub eigenvalue: f64,
    /// The top two eigenvalues agree to within 1e-9 relative; the axis was
    /// picked by the tie-break rule.
    pub degenerate: bool,
}

const DEGENERACY_TOLERANCE: f64 = 1e-9;

/// Flips `v` so its first non-negligible component is positive (x, then y, then z).
pub fn canonical_axis(v: &Vector3<f64>) -> Vector3<f64> {
    for c in 0..3 {
        if v[c].abs() > 1e-12 {
            return if v[c] < 0.0 { -v } else { *v };
        }
    }
    *v
}

fn check_spd(m: &Matrix3<f64>) -> Result<(), PoseError> {
    let asym = (m - m.transpose()).amax();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let min_eigenvalue = min_eigenvalue3(m);
    if !m.iter().all(|v| v.is_finite()) || asym > 1e-9 * scale || min_eigenvalue <= 0.0 {
        return Err(PoseError::NotSpd { min_eigenvalue });
    }
    Ok(())
}

/// Unit eigenvector of the largest eigenvalue, in canonical sign.
///
/// When the top eigenvalue is repeated the axis is the normalized projection
/// of the first coordinate axis (x, then y, then z) with the largest component
/// in the top eigenspace; for an isotropic matrix that is `(1, 0, 0)`.
pub fn principal_axis(cov: &Matrix3<f64>) -> Result<AxisEstimate, PoseError> {
    check_spd(cov)?;
    let eig = SymmetricEigen::new(symmetrize3(cov));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let second = eig.eigenvalues[order[1]];
    let degenerate = top - second < DEGENERACY_TOLERANCE * top.abs();
    let axis = if degenerate {
        let span: Vec<Vector3<f64>> = order
            .iter()
            .filter(|&&k| top - eig.eigenvalues[k] < DEGENERACY_TOLERANCE * top.abs())
            .map(|&k| eig.eigenvectors.column(k).into_owned())
            .collect();
        let project = |e: Vector3<f64>| span.iter().map(|b| b * b.dot(&e)).sum::<Vector3<f64>>();
        let mut best = project(Vector3::x());
        for e in [Vector3::y(), Vector3::z()] {
            let p = project(e);
            if p.norm() > best.norm() + 1e-12 {
                best = p;
            }
        }
        best.normalize()
    } else {
        eig.eigenvectors.column(order[0]).normalize()
    };
    Ok(AxisEstimate {
        axis: canonical_axis(&axis),
        eigenvalue: top,
        degenerate,
    })
}

/// Linear part `A` of the Gaussian W2 map from `N(·, Σ1)` to `N(·, Σ2)`:
/// `A = Σ1^{-1/2} (Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2} Σ1^{-1/2}`.
pub fn ot_map_matrix(sigma1: &Matrix3<f64>, sigma2: &Matrix3<f64>) -> Result<Matrix3<f64>, PoseError> {
    check_spd(sigma1)?;
    check_spd(sigma2)?;
    if sigma1 == sigma2 {
        return Ok(Matrix3::identity());
    }
    let root1 = sym_map3(sigma1, f64::sqrt);
    let inv_root1 = sym_map3(sigma1, |l| 1.0 / l.sqrt());
    let middle = sym_map3(&symmetrize3(&(root1 * sigma2 * root1)), |l| l.max(0.0).sqrt());
    Ok(symmetrize3(&(inv_root1 * middle * inv_root1)))
}

/// Closed-form optimal transport map between two Gaussians, applied to `x`.
pub fn ot_transport(
    mu1: &Vector3<f64>,
    sigma1: &Matrix3<f64>,
    mu2: &Vector3<f64>,
    sigma2: &Matrix3<f64>,
    x: &Vector3<f64>,
) -> Result<Vector3<f64>, PoseError> {
    let a = ot_map_matrix(sigma1, sigma2)?;
    if a == Matrix3::identity() {
        return Ok(x + (mu2 - mu1));
    }
    Ok(mu2 + a * (x - mu1))
}

/// One frame of input to [`sign_consistency`]: center, covariance, unsigned axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSample {
    pub center: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub axis: Vector3<f64>,
}

/// Chooses the sign of every axis so consecutive axes agree under the W2 map.
/// Input signs are ignored; the first axis keeps its canonical sign.
pub fn sign_consistency(samples: &[AxisSample]) -> Result<Vec<Vector3<f64>>, PoseError> {
    let Some(first) = samples.first() else {
        return Err(PoseError::SequenceTooShort { needed: 1, got: 0 });
    };
    let mut out = Vec::with_capacity(samples.len());
    out.push(canonical_axis(&first.axis));
    for pair in samples.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let signed_prev = out[out.len() - 1];
        let reference = prev.center + signed_prev;
        let moved = ot_transport(&prev.center, &prev.covariance, &next.center, &next.covariance, &reference)?;
        let candidate = canonical_axis(&next.axis);
        let d_plus = (next.center + candidate - moved).norm();
        let d_minus = (next.center - candidate - moved).norm();
        out.push(if d_plus <= d_minus + 1e-12 { candidate } else { -candidate });
    }
    Ok(out)
}

/// Negates every axis when `Σ_t (μ_{t+1} - μ_t) · v_t < 0`. Returns whether it flipped.
pub fn global_flip(centers: &[Vector3<f64>], axes: &mut [Vector3<f64>]) -> Result<bool, PoseError> {
    if centers.len() < 2 {
        return Err(PoseError::SequenceTooShort {
            needed: 2,
            got: centers.len(),
        });
    }
    let score: f64 = centers
        .windows(2)
        .zip(axes.iter())
        .map(|(c, v)| (c[1] - c[0]).dot(v))
        .sum();
    if score < 0.0 {
        axes.iter_mut().for_each(|v| *v = -*v);
        return Ok(true);
    }
    Ok(false)
}

/// Heading angle of the axis projected onto the horizontal plane, in `[0, 2π)`.
pub fn azimuth(v: &Vector3<f64>) -> Result<f64, PoseError> {
    if v.x.hypot(v.y) <= 1e-9 {
        return Err(PoseError::VerticalAxis);
    }
    let a = v.y.atan2(v.x).rem_euclid(TAU);
    Ok(if a >= TAU { 0.0 } else { a })
}

/// Full per-sequence procedure: principal axes, temporal sign chaining, global
/// flip (for two or more frames) and azimuths.
pub fn track_sequence(gaussians: &[(usize, Vector3<f64>, Matrix3<f64>)]) -> Result<Vec<BodyFrame>, PoseError> {
    let samples = gaussians
        .iter()
        .map(|(_, mu, sigma)| {
            Ok(AxisSample {
                center: *mu,
                covariance: *sigma,
                axis: principal_axis(sigma)?.axis,
            })
        })
        .collect::<Result<Vec<_>, PoseError>>()?;
    let mut axes = sign_consistency(&samples)?;
    if samples.len() >= 2 {
        let centers: Vec<_> = samples.iter().map(|s| s.center).collect();
        global_flip(&centers, &mut axes)?;
    }
    gaussians
        .iter()
        .zip(axes)
        .map(|((index, mu, sigma), axis)| {
            Ok(BodyFrame {
                index: *index,
                center: *mu,
                covariance: *sigma,
                axis,
                azimuth: azimuth(&axis)?,
            })
        })
        .collect()
}

pub const TRACK_HEADER: &str = "index,mu_x,mu_y,mu_z,v_x,v_y,v_z,azimuth";

/// CSV track: one row per frame, `index, μ (3), v (3), azimuth`.
pub fn format_track(frames: &[BodyFrame]) -> String {
    let mut s = String::from(TRACK_HEADER);
    s.push('\n');
    for f in frames {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            f.index, f.center.x, f.center.y, f.center.z, f.axis.x, f.axis.y, f.axis.z, f.azimuth
        );
    }
    s
}

/// Track rows as written by [`format_track`]; covariance is not stored and comes back as zero.
pub fn read_track(path: &Path) -> Result<Vec<BodyFrame>, PoseError> {
    let err = |message: String| PoseError::TrackFile {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRACK_HEADER) {
        return Err(err("missing header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 8 {
                return Err(err(format!("row {}: expected 8 fields", n + 1)));
            }
            let index = fields[0]
                .parse::<usize>()
                .map_err(|e| err(format!("row {}: {e}", n + 1)))?;
            let nums = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(format!("row {}: {e}", n + 1)))?;
            Ok(BodyFrame {
                index,
                center: Vector3::new(nums[0], nums[1], nums[2]),
                covariance: Matrix3::zeros(),
                axis: Vector3::new(nums[3], nums[4], nums[5]),
                azimuth: nums[6],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carve::GridSpec;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn single_voxel_moments() {
        let spec = GridSpec::cube(8, 0.5, Vector3::new(1.0, 2.0, 3.0), 0.3);
        let mut grid = VoxelGrid::empty(spec.clone());
        let idx = spec.index(2, 5, 7);
        grid.occupancy[idx] = 1.0;
        let (mu, sigma) = moment_gaussian(&grid).unwrap();
        assert!((mu - spec.voxel_center(2, 5, 7)).norm() < 1e-12);
        assert!((sigma - Matrix3::identity() * (0.25 / 12.0)).amax() < 1e-15);
    }

    #[test]
    fn two_voxels_midpoint() {
        let spec = GridSpec::cube(8, 0.5, Vector3::zeros(), 0.0);
        let mut grid = VoxelGrid::empty(spec.clone());
        grid.occupancy[spec.index(1, 1, 1)] = 0.5;
        grid.occupancy[spec.index(5, 3, 1)] = 0.5;
        let (mu, _) = moment_gaussian(&grid).unwrap();
        let mid = (spec.voxel_center(1, 1, 1) + spec.voxel_center(5, 3, 1)) / 2.0;
        assert!((mu - mid).norm() < 1e-12);
    }

    #[test]
    fn empty_volume_errors() {
        let grid = VoxelGrid::empty(GridSpec::cube(4, 0.5, Vector3::zeros(), 0.0));
        assert!(matches!(moment_gaussian(&grid), Err(PoseError::EmptyVolume)));
    }

    #[test]
    fn diagonal_principal_axis() {
        let est = principal_axis(&Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).unwrap();
        assert_eq!(est.axis, Vector3::new(1.0, 0.0, 0.0));
        assert!(!est.degenerate);
        let neg = principal_axis(&Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 4.0))).unwrap();
        assert_eq!(neg.axis, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn isotropic_is_flagged_degenerate() {
        let est = principal_axis(&Matrix3::identity()).unwrap();
        assert!(est.degenerate);
        assert!((est.axis - Vector3::x()).norm() < 1e-12);
    }

    #[test]
    fn non_spd_rejected() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 2.0));
        assert!(matches!(principal_axis(&m), Err(PoseError::NotSpd { .. })));
        assert!(ot_transport(&Vector3::zeros(), &m, &Vector3::zeros(), &Matrix3::identity(), &Vector3::zeros()).is_err());
    }

    #[test]
    fn ot_identity_and_translation() {
        let s = Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5);
        let mu = Vector3::new(0.3, -1.0, 2.0);
        let x = Vector3::new(0.1, 0.2, 0.3);
        assert_eq!(ot_transport(&mu, &s, &mu, &s, &x).unwrap(), x);
        let d = Vector3::new(1.0, -2.0, 0.5);
        let i = Matrix3::identity();
        let y = ot_transport(&mu, &i, &(mu + d), &i, &x).unwrap();
        assert!((y - (x + d)).norm() < 1e-12);
    }

    #[test]
    fn global_flip_rules() {
        let centers: Vec<_> = (0..4).map(|t| Vector3::new(t as f64, 0.0, 0.0)).collect();
        let mut axes = vec![-Vector3::x(); 4];
        assert!(global_flip(&centers, &mut axes).unwrap());
        assert!(axes.iter().all(|a| *a == Vector3::x()));
        assert!(!global_flip(&centers, &mut axes).unwrap());
        let still = vec![Vector3::zeros(); 3];
        let mut axes = vec![-Vector3::y(); 3];
        assert!(!global_flip(&still, &mut axes).unwrap());
        assert!(global_flip(&still[..1], &mut axes).is_err());
    }

    #[test]
    fn azimuth_values() {
        assert_eq!(azimuth(&Vector3::x()).unwrap(), 0.0);
        assert!((azimuth(&Vector3::y()).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((azimuth(&-Vector3::y()).unwrap() - 3.0 * FRAC_PI_2).abs() < 1e-15);
        assert!(matches!(azimuth(&Vector3::z()), Err(PoseError::VerticalAxis)));
    }

    #[test]
    fn static_sequence_keeps_first_sign() {
        let s = Matrix3::from_diagonal(&Vector3::new(3.0, 1.0, 0.5));
        let samples: Vec<_> = (0..5)
            .map(|t| AxisSample {
                center: Vector3::zeros(),
                covariance: s,
                axis: if t % 2 == 0 { Vector3::x() } else { -Vector3::x() },
            })
            .collect();
        let out = sign_consistency(&samples).unwrap();
        assert!(out.iter().all(|a| *a == Vector3::x()));
    }

    #[test]
    fn track_file_round_trip() {
        let frames = vec![BodyFrame {
            index: 7,
            center: Vector3::new(0.1, -0.25, 1.0 / 3.0),
            covariance: Matrix3::zeros(),
            axis: Vector3::new(0.6, 0.8, 0.0),
            azimuth: 0.8f64.atan2(0.6),
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.csv");
        std::fs::write(&path, format_track(&frames)).unwrap();
        assert_eq!(read_track(&path).unwrap(), frames);
    }
}
