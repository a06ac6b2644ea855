//! Ideal pinhole cameras, robust multi-view triangulation and per-frame
//! principal-point re-centering.

use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point lies behind the camera (camera-frame z = {depth})")]
    PointBehindCamera { depth: f64 },
    #[error("degenerate triangulation geometry (condition number {condition:e})")]
    DegenerateGeometry { condition: f64 },
    #[error("triangulation needs observations from at least two distinct cameras, got {0}")]
    TooFewObservations(usize),
    #[error("observation references camera {index} but the rig has {count} cameras")]
    UnknownCamera { index: usize, count: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("rig file {path}: {message}")]
    RigFile { path: String, message: String },
}

impl CameraError {
    pub fn code(&self) -> &'static str {
        match self {
            CameraError::PointBehindCamera { .. } => "PointBehindCamera",
            CameraError::DegenerateGeometry { .. } => "DegenerateGeometry",
            CameraError::TooFewObservations(_) => "TooFewObservations",
            CameraError::UnknownCamera { .. } => "UnknownCamera",
            CameraError::InvalidCamera(_) => "InvalidCamera",
            CameraError::RigFile { .. } => "RigFile",
        }
    }
}

/// Calibrated view: `x_cam = R x_world + t`, `u = fx x/z + cx`, `v = fy y/z + cy`.
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

/// Pixel position and camera-frame depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

const ROTATION_TOLERANCE: f64 = 1e-9;

impl PinholeCamera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`. The image "up" direction follows `up`
    /// projected orthogonally to the optical axis; image rows grow downward.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| CameraError::InvalidCamera("eye coincides with target".into()))?;
        let up_perp = (up - forward * up.dot(&forward))
            .try_normalize(1e-12)
            .ok_or_else(|| CameraError::InvalidCamera("up vector parallel to view axis".into()))?;
        let down = -up_perp;
        let right = down.cross(&forward);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(fx, fy, cx, cy, rotation, translation, width, height)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(CameraError::InvalidCamera("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CameraError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::InvalidCamera("image size must be positive".into()));
        }
        let gram_err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if gram_err > ROTATION_TOLERANCE {
            return Err(CameraError::InvalidCamera(format!(
                "rotation not orthonormal (max |RᵀR - I| = {gram_err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(CameraError::InvalidCamera(format!("rotation determinant {det}")));
        }
        Ok(())
    }

    #[inline]
    pub fn to_camera_frame(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_world + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn project(&self, x_world: &Vector3<f64>) -> Result<Projection, CameraError> {
        self.project_camera_frame(&self.to_camera_frame(x_world))
    }

    #[inline]
    pub fn project_camera_frame(&self, x_cam: &Vector3<f64>) -> Result<Projection, CameraError> {
        let z = x_cam.z;
        if z <= 0.0 || !z.is_finite() {
            return Err(CameraError::PointBehindCamera { depth: z });
        }
        Ok(Projection {
            u: self.fx * (x_cam.x / z) + self.cx,
            v: self.fy * (x_cam.y / z) + self.cy,
            depth: z,
        })
    }

    /// World point on the ray through `(u, v)` at camera-frame depth `depth`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let x_cam = Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        );
        self.rotation.transpose() * (x_cam - self.translation)
    }

    /// 3×4 matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let k = Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.set_column(3, &self.translation);
        k * rt
    }

    /// Jacobian of `(u, v)` with respect to the camera-frame point.
    #[inline]
    pub fn pinhole_jacobian(&self, x_cam: &Vector3<f64>) -> Matrix2x3<f64> {
        let z = x_cam.z;
        let z2 = z * z;
        Matrix2x3::new(
            self.fx / z,
            0.0,
            -self.fx * x_cam.x / z2,
            0.0,
            self.fy / z,
            -self.fy * x_cam.y / z2,
        )
    }

    /// Copy of the camera whose principal point is moved so that `x_world`
    /// projects exactly onto `centroid`.
    pub fn recenter_intrinsics(
        &self,
        x_world: &Vector3<f64>,
        centroid: (f64, f64),
    ) -> Result<PinholeCamera, CameraError> {
        let x_cam = self.to_camera_frame(x_world);
        if x_cam.z <= 0.0 || !x_cam.z.is_finite() {
            return Err(CameraError::PointBehindCamera { depth: x_cam.z });
        }
        let mut out = self.clone();
        out.cx = centroid.0 - self.fx * (x_cam.x / x_cam.z);
        out.cy = centroid.1 - self.fy * (x_cam.y / x_cam.z);
        Ok(out)
    }
}

/// Ordered set of named cameras; the order is the camera index used everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    names: Vec<String>,
    cameras: Vec<PinholeCamera>,
}

impl CameraRig {
    pub fn new(entries: Vec<(String, PinholeCamera)>) -> Result<Self, CameraError> {
        let (names, cameras): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        for cam in &cameras {
            cam.validate()?;
        }
        Ok(Self { names, cameras })
    }

    /// Rig with generated names `cam0`, `cam1`, ...
    pub fn from_cameras(cameras: Vec<PinholeCamera>) -> Result<Self, CameraError> {
        Self::new(
            cameras
                .into_iter()
                .enumerate()
                .map(|(i, c)| (format!("cam{i}"), c))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn cameras(&self) -> &[PinholeCamera] {
        &self.cameras
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn camera(&self, index: usize) -> &PinholeCamera {
        &self.cameras[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    /// Replaces camera `index`, keeping its name.
    pub fn with_camera(&self, index: usize, camera: PinholeCamera) -> CameraRig {
        let mut out = self.clone();
        out.cameras[index] = camera;
        out
    }

    pub fn load(path: &Path) -> Result<Self, CameraError> {
        let rig_err = |message: String| CameraError::RigFile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| rig_err(e.to_string()))?;
        let file: RigFile = toml::from_str(&text).map_err(|e| rig_err(e.to_string()))?;
        let entries = file
            .camera
            .into_iter()
            .map(|rec| {
                let rotation = Matrix3::from_row_slice(&rec.rotation);
                let translation = Vector3::from_row_slice(&rec.translation);
                let cam = PinholeCamera::new(
                    rec.fx,
                    rec.fy,
                    rec.cx,
                    rec.cy,
                    rotation,
                    translation,
                    rec.width,
                    rec.height,
                )
                .map_err(|e| rig_err(format!("camera {}: {e}", rec.name)))?;
                Ok((rec.name, cam))
            })
            .collect::<Result<Vec<_>, CameraError>>()?;
        Self::new(entries)
    }

    pub fn to_toml(&self) -> String {
        let file = RigFile {
            camera: self
                .names
                .iter()
                .zip(&self.cameras)
                .map(|(name, c)| CameraRecord {
                    name: name.clone(),
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                    rotation: std::array::from_fn(|i| c.rotation[(i / 3, i % 3)]),
                    translation: [c.translation.x, c.translation.y, c.translation.z],
                    width: c.width,
                    height: c.height,
                })
                .collect(),
        };
        toml::to_string(&file).expect("rig serialization cannot fail")
    }
}

/// On-disk rig layout, one `[[camera]]` table per view.
#[derive(Debug, Serialize, Deserialize)]
struct RigFile {
    camera: Vec<CameraRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    name: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
    width: usize,
    height: usize,
}

/// A 2D sighting of the target in one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulationConfig {
    /// Huber threshold in pixels.
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub max_condition: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            huber_delta: 2.0,
            max_iterations: 50,
            step_tolerance: 1e-8,
            max_condition: 1e12,
        }
    }
}

fn check_observations(obs: &[Observation], rig: &CameraRig) -> Result<(), CameraError> {
    for o in obs {
        if o.camera >= rig.len() {
            return Err(CameraError::UnknownCamera {
                index: o.camera,
                count: rig.len(),
            });
        }
    }
    let mut cams: Vec<usize> = obs.iter().map(|o| o.camera).collect();
    cams.sort_unstable();
    cams.dedup();
    if cams.len() < 2 {
        return Err(CameraError::TooFewObservations(cams.len()));
    }
    Ok(())
}

/// Linear (DLT) triangulation with row-normalized equations.
pub fn triangulate_dlt(
    obs: &[Observation],
    rig: &CameraRig,
    max_condition: f64,
) -> Result<Vector3<f64>, CameraError> {
    check_observations(obs, rig)?;
    let mut normal = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for o in obs {
        let p = rig.camera(o.camera).projection_matrix();
        for (coord, row) in [(o.u, 0), (o.v, 1)] {
            let eq = p.row(2) * coord - p.row(row);
            let a = Vector3::new(eq[0], eq[1], eq[2]);
            let scale = a.norm();
            if scale == 0.0 {
                continue;
            }
            let a = a / scale;
            let b = -eq[3] / scale;
            normal += a * a.transpose();
            rhs += a * b;
        }
    }
    let eig = normal.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= max_condition) {
        return Err(CameraError::DegenerateGeometry { condition });
    }
    let mut inv = Matrix3::zeros();
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        inv += v * v.transpose() / *lambda;
    }
    Ok(inv * rhs)
}

pub fn triangulate_robust(obs: &[Observation], rig: &CameraRig) -> Result<Vector3<f64>, CameraError> {
    triangulate_robust_with(obs, rig, &TriangulationConfig::default())
}

/// Huber-weighted reprojection-error minimization, started from the DLT solution
/// and refined by iteratively reweighted Gauss-Newton steps.
pub fn triangulate_robust_with(
    obs: &[Observation],
    rig: &CameraRig,
    cfg: &TriangulationConfig,
) -> Result<Vector3<f64>, CameraError> {
    let mut x = triangulate_dlt(obs, rig, cfg.max_condition)?;
    for _ in 0..cfg.max_iterations {
        let mut hessian = Matrix3::<f64>::zeros();
        let mut gradient = Vector3::<f64>::zeros();
        for o in obs {
            let cam = rig.camera(o.camera);
            let x_cam = cam.to_camera_frame(&x);
            let Ok(p) = cam.project_camera_frame(&x_cam) else {
                continue;
            };
            let residual = Vector2::new(p.u - o.u, p.v - o.v);
            let norm = residual.norm();
            let weight = if norm <= cfg.huber_delta {
                1.0
            } else {
                cfg.huber_delta / norm
            };
            let jac = cam.pinhole_jacobian(&x_cam) * cam.rotation;
            hessian += weight * jac.transpose() * jac;
            gradient += weight * jac.transpose() * residual;
        }
        let Some(chol) = hessian.cholesky() else {
            break;
        };
        let step = -chol.solve(&gradient);
        x += step;
        if step.norm() < cfg.step_tolerance {
            break;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn simple(fx: f64, fy: f64, cx: f64, cy: f64) -> PinholeCamera {
        PinholeCamera::new(fx, fy, cx, cy, Matrix3::identity(), Vector3::zeros(), 64, 64).unwrap()
    }

    #[test]
    fn project_identity_case() {
        let p = simple(1.0, 1.0, 0.0, 0.0).project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (0.0, 0.0, 1.0));
    }

    #[test]
    fn project_direct_substitution() {
        let p = simple(2.0, 2.0, 10.0, 20.0).project(&Vector3::new(1.0, 1.0, 2.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (11.0, 21.0, 2.0));
    }

    #[test]
    fn project_behind_camera_is_an_error() {
        let cam = simple(1.0, 1.0, 0.0, 0.0);
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, 0.0)),
            Err(CameraError::PointBehindCamera { .. })
        ));
        assert!(cam.project(&Vector3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        let r = Matrix3::identity() * 2.0;
        assert!(PinholeCamera::new(1.0, 1.0, 0.0, 0.0, r, Vector3::zeros(), 4, 4).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(PinholeCamera::new(1.0, 1.0, 0.0, 0.0, reflect, Vector3::zeros(), 4, 4).is_err());
        assert!(PinholeCamera::new(0.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 4, 4).is_err());
        assert!(PinholeCamera::new(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 0, 4).is_err());
    }

    #[test]
    fn look_at_points_axis_at_target() {
        let cam = PinholeCamera::look_at(
            Vector3::new(3.0, 0.0, 0.0),
            Vector3::zeros(),
            Vector3::z(),
            100.0,
            100.0,
            50.0,
            50.0,
            100,
            100,
        )
        .unwrap();
        let p = cam.project(&Vector3::zeros()).unwrap();
        assert!((p.u - 50.0).abs() < 1e-12 && (p.v - 50.0).abs() < 1e-12);
        assert!((p.depth - 3.0).abs() < 1e-12);
        // world +z appears upward in the image
        let up = cam.project(&Vector3::new(0.0, 0.0, 0.1)).unwrap();
        assert!(up.v < 50.0);
        assert!((cam.center() - Vector3::new(3.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn recenter_fixed_point_returns_same_camera() {
        let cam = simple(300.0, 310.0, 32.0, 30.0);
        let x = Vector3::new(0.1, -0.2, 2.0);
        let p = cam.project(&x).unwrap();
        let out = cam.recenter_intrinsics(&x, (p.u, p.v)).unwrap();
        assert!((out.cx - cam.cx).abs() < 1e-12 && (out.cy - cam.cy).abs() < 1e-12);
        assert_eq!((out.fx, out.fy, out.rotation, out.translation), (cam.fx, cam.fy, cam.rotation, cam.translation));
    }

    #[test]
    fn recenter_substitution_value() {
        let cam = simple(1.0, 1.0, 0.0, 0.0);
        let out = cam.recenter_intrinsics(&Vector3::new(1.0, 0.0, 2.0), (5.0, 0.0)).unwrap();
        assert_eq!(out.cx, 4.5);
    }

    #[test]
    fn recenter_behind_camera() {
        let cam = simple(1.0, 1.0, 0.0, 0.0);
        assert!(cam.recenter_intrinsics(&Vector3::new(0.0, 0.0, -1.0), (0.0, 0.0)).is_err());
    }

    fn orthogonal_pair() -> CameraRig {
        let a = PinholeCamera::look_at(
            Vector3::new(0.0, 0.0, 10.0),
            Vector3::zeros(),
            Vector3::y(),
            500.0,
            500.0,
            320.0,
            240.0,
            640,
            480,
        )
        .unwrap();
        let b = PinholeCamera::look_at(
            Vector3::new(10.0, 0.0, 0.0),
            Vector3::zeros(),
            Vector3::z(),
            500.0,
            500.0,
            320.0,
            240.0,
            640,
            480,
        )
        .unwrap();
        CameraRig::from_cameras(vec![a, b]).unwrap()
    }

    #[test]
    fn triangulates_exact_projections() {
        let rig = orthogonal_pair();
        let truth = Vector3::new(1.0, 2.0, 3.0);
        let obs: Vec<_> = (0..2)
            .map(|i| {
                let p = rig.camera(i).project(&truth).unwrap();
                Observation { camera: i, u: p.u, v: p.v }
            })
            .collect();
        let x = triangulate_robust(&obs, &rig).unwrap();
        assert!((x - truth).norm() < 1e-6, "{x}");
    }

    #[test]
    fn coincident_cameras_are_degenerate() {
        let cam = orthogonal_pair().camera(0).clone();
        let rig = CameraRig::from_cameras(vec![cam.clone(), cam]).unwrap();
        let obs = [
            Observation { camera: 0, u: 300.0, v: 200.0 },
            Observation { camera: 1, u: 300.0, v: 200.0 },
        ];
        assert!(matches!(
            triangulate_robust(&obs, &rig),
            Err(CameraError::DegenerateGeometry { .. })
        ));
    }

    #[test]
    fn single_camera_is_rejected() {
        let rig = orthogonal_pair();
        let obs = [
            Observation { camera: 0, u: 300.0, v: 200.0 },
            Observation { camera: 0, u: 301.0, v: 200.0 },
        ];
        assert!(matches!(
            triangulate_robust(&obs, &rig),
            Err(CameraError::TooFewObservations(1))
        ));
    }

    #[test]
    fn rig_file_round_trip() {
        let rig = orthogonal_pair();
        let rot = Rotation3::from_euler_angles(0.3, -0.2, 1.1).into_inner();
        let rig = rig.with_camera(1, PinholeCamera::new(812.5, 799.25, 320.1, 239.9, rot, Vector3::new(0.1, 0.2, 5.0), 640, 480).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rig.toml");
        std::fs::write(&path, rig.to_toml()).unwrap();
        let back = CameraRig::load(&path).unwrap();
        assert_eq!(back, rig);
    }
}
