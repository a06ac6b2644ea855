//! Gaussian particles: construction from carved voxels, perspective projection
//! of their covariance, and a deterministic tiled software rasterizer.

mod particle_file;
mod raster;

use nalgebra::{Matrix2, Matrix3, UnitQuaternion, Vector2, Vector3};

pub use particle_file::{decode_particles, encode_particles, read_particles, write_particles, ParticleFileError};
pub use raster::{composite_table, rasterize, rasterize_with, CompositeTable, RasterConfig};

use crate::camera::{CameraError, PinholeCamera};
use crate::carve::VoxelGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParticle {
    pub mean: Vector3<f64>,
    /// Natural log of the standard deviation along each principal axis.
    pub log_scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl GaussianParticle {
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, color: [f64; 3], opacity: f64) -> Self {
        Self {
            mean,
            log_scale: Vector3::repeat(sigma.ln()),
            rotation: UnitQuaternion::identity(),
            color,
            opacity,
        }
    }

    /// `R(q) diag(exp(2 s)) R(q)ᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let d = Matrix3::from_diagonal(&self.log_scale.map(|s| (2.0 * s).exp()));
        r * d * r.transpose()
    }

    /// Unnormalized density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
    pub fn density(&self, x: &Vector3<f64>) -> f64 {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let local = r.transpose() * (x - self.mean);
        let m: f64 = (0..3).map(|a| (local[a] * (-self.log_scale[a]).exp()).powi(2)).sum();
        (-0.5 * m).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatConfig {
    /// Voxels with occupancy at or above this become particles.
    pub render_threshold: f32,
    /// Particle standard deviation as a multiple of the voxel edge.
    pub size_factor: f64,
    pub opacity: f64,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            render_threshold: 0.5,
            size_factor: 0.7,
            opacity: 0.9,
        }
    }
}

/// One isotropic particle per voxel at or above the render threshold, centered
/// on the voxel and carrying the voxel color. Ordered by voxel index.
pub fn voxels_to_gaussians(grid: &VoxelGrid, cfg: &SplatConfig) -> Vec<GaussianParticle> {
    let sigma = cfg.size_factor * grid.spec.edge;
    grid.occupancy
        .iter()
        .enumerate()
        .filter(|(_, &o)| o >= cfg.render_threshold)
        .map(|(idx, _)| {
            let c = grid.color[idx];
            GaussianParticle::isotropic(
                grid.spec.voxel_center_at(idx),
                sigma,
                [f64::from(c[0]), f64::from(c[1]), f64::from(c[2])],
                cfg.opacity,
            )
        })
        .collect()
}

/// Screen-space footprint of a particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
    pub depth: f64,
}

/// `J W Σ Wᵀ Jᵀ` with `W` the camera rotation and `J` the pinhole Jacobian at `x_cam`.
pub fn image_covariance(cam: &PinholeCamera, cov: &Matrix3<f64>, x_cam: &Vector3<f64>) -> Matrix2<f64> {
    let jw = cam.pinhole_jacobian(x_cam) * cam.rotation;
    let m = jw * cov * jw.transpose();
    (m + m.transpose()) * 0.5
}

pub const DEFAULT_COVARIANCE_FLOOR: f64 = 0.3;

pub fn project_gaussian(p: &GaussianParticle, cam: &PinholeCamera) -> Result<ProjectedGaussian, CameraError> {
    project_gaussian_with_floor(p, cam, DEFAULT_COVARIANCE_FLOOR)
}

pub fn project_gaussian_with_floor(
    p: &GaussianParticle,
    cam: &PinholeCamera,
    floor: f64,
) -> Result<ProjectedGaussian, CameraError> {
    let x_cam = cam.to_camera_frame(&p.mean);
    let proj = cam.project_camera_frame(&x_cam)?;
    let covariance = image_covariance(cam, &p.covariance(), &x_cam) + Matrix2::identity() * floor;
    Ok(ProjectedGaussian {
        mean: Vector2::new(proj.u, proj.v),
        covariance,
        depth: proj.depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carve::GridSpec;

    #[test]
    fn covariance_is_spd_for_rotated_particles() {
        let p = GaussianParticle {
            mean: Vector3::zeros(),
            log_scale: Vector3::new(-1.0, 0.2, 0.5),
            rotation: UnitQuaternion::from_euler_angles(0.3, 1.0, -0.4),
            color: [0.0; 3],
            opacity: 0.5,
        };
        let c = p.covariance();
        assert!((c - c.transpose()).amax() < 1e-14);
        assert!(c.symmetric_eigen().eigenvalues.min() > 0.0);
        // density agrees with the covariance form
        let x = Vector3::new(0.3, -0.2, 0.5);
        let m = (x - p.mean).dot(&(c.try_inverse().unwrap() * (x - p.mean)));
        assert!((p.density(&x) - (-0.5 * m).exp()).abs() < 1e-12);
    }

    #[test]
    fn identity_projection_case() {
        let cam = PinholeCamera::new(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0), 8, 8).unwrap();
        let p = GaussianParticle::isotropic(Vector3::zeros(), 1.0, [1.0; 3], 1.0);
        let g = project_gaussian(&p, &cam).unwrap();
        assert!((g.covariance - Matrix2::identity() * 1.3).amax() < 1e-15);
        assert_eq!(g.depth, 1.0);
        assert_eq!(g.mean, Vector2::zeros());
    }

    #[test]
    fn doubling_fx_quadruples_first_entry() {
        let mut cam =
            PinholeCamera::new(3.0, 2.0, 1.0, 1.0, Matrix3::identity(), Vector3::new(0.1, -0.2, 2.0), 8, 8).unwrap();
        let p = GaussianParticle {
            log_scale: Vector3::new(-0.5, 0.1, 0.3),
            rotation: UnitQuaternion::from_euler_angles(0.2, 0.1, 0.7),
            ..GaussianParticle::isotropic(Vector3::new(0.3, 0.1, 0.4), 1.0, [0.0; 3], 1.0)
        };
        let a = project_gaussian_with_floor(&p, &cam, 0.0).unwrap().covariance;
        cam.fx *= 2.0;
        let b = project_gaussian_with_floor(&p, &cam, 0.0).unwrap().covariance;
        assert!((b[(0, 0)] - 4.0 * a[(0, 0)]).abs() < 1e-12);
        assert!((b[(0, 1)] - 2.0 * a[(0, 1)]).abs() < 1e-12);
        assert!((b[(1, 1)] - a[(1, 1)]).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_projection_fails() {
        let cam = PinholeCamera::new(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 8, 8).unwrap();
        let p = GaussianParticle::isotropic(Vector3::new(0.0, 0.0, -1.0), 1.0, [1.0; 3], 1.0);
        assert!(project_gaussian(&p, &cam).is_err());
    }

    #[test]
    fn voxel_conversion_respects_threshold() {
        let spec = GridSpec::cube(4, 0.5, Vector3::zeros(), 0.0);
        let mut grid = VoxelGrid::empty(spec);
        grid.occupancy[3] = 1.0;
        grid.occupancy[9] = 0.5;
        grid.color[3] = [0.25, 0.5, 0.75];
        let strict = voxels_to_gaussians(
            &grid,
            &SplatConfig {
                render_threshold: 0.75,
                ..SplatConfig::default()
            },
        );
        assert_eq!(strict.len(), 1);
        assert_eq!(strict[0].color, [0.25, 0.5, 0.75]);
        assert_eq!(strict[0].mean, grid.spec.voxel_center_at(3));
        assert!((strict[0].log_scale[0].exp() - 0.35).abs() < 1e-12);
        assert_eq!(strict[0].opacity, 0.9);
        assert_eq!(voxels_to_gaussians(&grid, &SplatConfig::default()).len(), 2);
    }
}
