//! Synthetic ground truth: unions of colored ellipsoids moving rigidly in
//! front of a ring of cameras, imaged with the project's own rasterizer, plus
//! an analytic visual-hull oracle.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{CameraError, CameraRig, PinholeCamera};
use crate::carve::GridSpec;
use crate::dataset::FrameSet;
use crate::imaging::pixel_index;
use crate::splat::{rasterize, GaussianParticle};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene has no ellipsoids")]
    NoEllipsoids,
    #[error("ring rig needs at least 4 cameras, got {0}")]
    TooFewCameras(usize),
    #[error("ellipsoid {0} has a non-positive semi-axis")]
    InvalidAxes(usize),
    #[error("frame {frame} is outside a trajectory of {frames} poses")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error(transparent)]
    Camera(#[from] CameraError),
}

impl SynthError {
    pub fn code(&self) -> &'static str {
        match self {
            SynthError::NoEllipsoids => "NoEllipsoids",
            SynthError::TooFewCameras(_) => "TooFewCameras",
            SynthError::InvalidAxes(_) => "InvalidAxes",
            SynthError::FrameOutOfRange { .. } => "FrameOutOfRange",
            SynthError::Camera(e) => e.code(),
        }
    }
}

/// Axis-aligned in the body frame.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub color: [f64; 3],
}

/// Cameras evenly spaced on a horizontal circle, all looking at the origin.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RingRig {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub focal: f64,
    pub image_width: usize,
    pub image_height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose {
    pub translation: [f64; 3],
    pub azimuth: f64,
}

impl Pose {
    pub fn rotation(&self) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), self.azimuth).into_inner()
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + Vector3::from(self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub ellipsoids: Vec<Ellipsoid>,
    pub rig: RingRig,
    pub trajectory: Vec<Pose>,
    pub particles_per_ellipsoid: usize,
    pub particle_sigma: f64,
    pub opacity: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.ellipsoids.is_empty() {
            return Err(SynthError::NoEllipsoids);
        }
        if self.rig.count < 4 {
            return Err(SynthError::TooFewCameras(self.rig.count));
        }
        if let Some(i) = self
            .ellipsoids
            .iter()
            .position(|e| !e.semi_axes.iter().all(|&a| a > 0.0))
        {
            return Err(SynthError::InvalidAxes(i));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.trajectory.len()
    }

    pub fn pose(&self, frame: usize) -> Result<Pose, SynthError> {
        self.trajectory.get(frame).copied().ok_or(SynthError::FrameOutOfRange {
            frame,
            frames: self.trajectory.len(),
        })
    }

    /// One unit sphere with a shaded surface, six cameras, a single frame.
    pub fn standard_sphere() -> Self {
        Self {
            ellipsoids: vec![Ellipsoid {
                center: [0.0; 3],
                semi_axes: [1.0; 3],
                color: [0.8, 0.45, 0.25],
            }],
            rig: RingRig {
                count: 6,
                radius: 5.0,
                height: 2.5,
                focal: 150.0,
                image_width: 128,
                image_height: 128,
            },
            trajectory: vec![Pose {
                translation: [0.0; 3],
                azimuth: 0.0,
            }],
            particles_per_ellipsoid: 4000,
            particle_sigma: 0.04,
            opacity: 0.9,
            seed: 7,
        }
    }

    /// Rotation about the vertical axis at `rate` radians per frame.
    pub fn spinning(mut self, frames: usize, rate: f64) -> Self {
        self.trajectory = (0..frames)
            .map(|f| Pose {
                translation: [0.0; 3],
                azimuth: rate * f as f64,
            })
            .collect();
        self
    }

    /// Random union of 1–3 ellipsoids inside a radius-1.2 ball.
    pub fn random(seed: u64, cameras: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(1..=3);
        let ellipsoids = (0..count)
            .map(|_| Ellipsoid {
                center: std::array::from_fn(|_| rng.random_range(-0.35..0.35)),
                semi_axes: std::array::from_fn(|_| rng.random_range(0.3..0.7)),
                color: std::array::from_fn(|_| rng.random_range(0.1..0.9)),
            })
            .collect();
        Self {
            ellipsoids,
            rig: RingRig {
                count: cameras,
                ..Self::standard_sphere().rig
            },
            seed,
            ..Self::standard_sphere()
        }
    }
}

pub fn build_rig(spec: &SceneSpec) -> Result<CameraRig, SynthError> {
    spec.validate()?;
    let r = &spec.rig;
    let cams = (0..r.count)
        .map(|c| {
            let a = std::f64::consts::TAU * c as f64 / r.count as f64;
            let eye = Vector3::new(r.radius * a.cos(), r.radius * a.sin(), r.height);
            PinholeCamera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::z(),
                r.focal,
                r.focal,
                (r.image_width as f64 - 1.0) / 2.0,
                (r.image_height as f64 - 1.0) / 2.0,
                r.image_width,
                r.image_height,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CameraRig::from_cameras(cams)?)
}

/// Surface particles in the body frame. Each ellipsoid contributes a fixed
/// number of particles at Gaussian-sampled directions mapped onto its
/// surface, shaded by the vertical component of the direction.
pub fn body_particles(spec: &SceneSpec) -> Vec<GaussianParticle> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.ellipsoids.len() * spec.particles_per_ellipsoid);
    for e in &spec.ellipsoids {
        for _ in 0..spec.particles_per_ellipsoid {
            let dir = loop {
                let v = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                if let Some(u) = v.try_normalize(1e-9) {
                    break u;
                }
            };
            let pos = Vector3::from(e.center) + dir.component_mul(&Vector3::from(e.semi_axes));
            let shade = 0.75 + 0.25 * dir.z;
            out.push(GaussianParticle::isotropic(
                pos,
                spec.particle_sigma,
                e.color.map(|c| (c * shade).clamp(0.0, 1.0)),
                spec.opacity,
            ));
        }
    }
    out
}

pub fn posed_particles(spec: &SceneSpec, frame: usize) -> Result<Vec<GaussianParticle>, SynthError> {
    let pose = spec.pose(frame)?;
    Ok(body_particles(spec)
        .into_iter()
        .map(|p| GaussianParticle {
            mean: pose.apply(&p.mean),
            ..p
        })
        .collect())
}

/// Images over white and masks at coverage ≥ 0.5, one per camera.
pub fn render_frame_set(particles: &[GaussianParticle], rig: &CameraRig, index: usize) -> FrameSet {
    let rendered: Vec<_> = rig.cameras().par_iter().map(|cam| rasterize(particles, cam, [1.0; 3])).collect();
    FrameSet {
        index,
        images: rendered.iter().map(|r| r.rgb()).collect(),
        masks: rendered.iter().map(|r| r.silhouette()).collect(),
    }
}

pub fn generate_scene(
    spec: &SceneSpec,
    frame: usize,
) -> Result<(Vec<GaussianParticle>, FrameSet, CameraRig), SynthError> {
    let rig = build_rig(spec)?;
    let particles = posed_particles(spec, frame)?;
    let frame_set = render_frame_set(&particles, &rig, frame);
    Ok((particles, frame_set, rig))
}

/// Whether the ray from `origin` along `dir` (`s > 0`) meets the posed ellipsoid.
fn ray_hits(e: &Ellipsoid, pose: &Pose, origin: &Vector3<f64>, dir: &Vector3<f64>) -> bool {
    let rot_t = pose.rotation().transpose();
    let center = pose.apply(&Vector3::from(e.center));
    let inv = Vector3::from(e.semi_axes).map(|a| 1.0 / a);
    let o = (rot_t * (origin - center)).component_mul(&inv);
    let d = (rot_t * dir).component_mul(&inv);
    let a = d.norm_squared();
    let b = o.dot(&d);
    let c = o.norm_squared() - 1.0;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return false;
    }
    // the farther root must lie ahead of the camera
    (-b + disc.sqrt()) / a > 0.0
}

/// Brute-force hull: a voxel is occupied when its center projects inside the
/// image and inside the analytic silhouette of the posed ellipsoid union for
/// every camera.
pub fn hull_oracle(spec: &SceneSpec, frame: usize, rig: &CameraRig, grid: &GridSpec) -> Result<Vec<u8>, SynthError> {
    spec.validate()?;
    let pose = spec.pose(frame)?;
    Ok((0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.voxel_center_at(idx);
            let inside = rig.cameras().iter().all(|cam| {
                let Ok(p) = cam.project(&x) else {
                    return false;
                };
                if pixel_index(p.u, p.v, cam.width, cam.height).is_none() {
                    return false;
                }
                let origin = cam.center();
                let dir = x - origin;
                spec.ellipsoids.iter().any(|e| ray_hits(e, &pose, &origin, &dir))
            });
            u8::from(inside)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sphere() -> SceneSpec {
        let mut s = SceneSpec::standard_sphere();
        s.rig.image_width = 48;
        s.rig.image_height = 48;
        s.rig.focal = 55.0;
        s.particles_per_ellipsoid = 800;
        s.particle_sigma = 0.08;
        s
    }

    #[test]
    fn sphere_masks_are_nonempty_blobs() {
        let (particles, frame, rig) = generate_scene(&small_sphere(), 0).unwrap();
        assert_eq!(particles.len(), 800);
        assert_eq!(rig.len(), 6);
        for m in &frame.masks {
            assert!(m.area() > 100);
            // the image border stays empty
            assert!(!m.get(0, 0) && !m.get(47, 47));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&small_sphere(), 0).unwrap();
        let b = generate_scene(&small_sphere(), 0).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.images, b.1.images);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small_sphere();
        s.rig.count = 3;
        assert!(matches!(s.validate(), Err(SynthError::TooFewCameras(3))));
        let mut s = small_sphere();
        s.ellipsoids[0].semi_axes[1] = 0.0;
        assert!(matches!(s.validate(), Err(SynthError::InvalidAxes(0))));
        assert!(matches!(small_sphere().pose(1), Err(SynthError::FrameOutOfRange { .. })));
    }

    #[test]
    fn hull_contains_sphere_with_bounded_excess() {
        let spec = small_sphere();
        let rig = build_rig(&spec).unwrap();
        let grid = GridSpec::cube(48, 2.6 / 48.0, Vector3::zeros(), 0.0);
        let occ = hull_oracle(&spec, 0, &rig, &grid).unwrap();
        let mut inside = 0usize;
        for idx in 0..grid.len() {
            if grid.voxel_center_at(idx).norm() < 1.0 {
                inside += 1;
                assert_eq!(occ[idx], 1);
            }
        }
        let hull = occ.iter().filter(|&&o| o == 1).count();
        let ratio = hull as f64 / inside as f64;
        assert!((1.0..=1.6).contains(&ratio), "{ratio}");
    }

    #[test]
    fn region_away_from_the_body_is_empty() {
        let spec = small_sphere();
        let rig = build_rig(&spec).unwrap();
        let grid = GridSpec::cube(8, 0.05, Vector3::new(0.0, 0.0, 1.8), 0.0);
        assert!(hull_oracle(&spec, 0, &rig, &grid).unwrap().iter().all(|&o| o == 0));
    }
}
