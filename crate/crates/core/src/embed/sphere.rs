//! Spherical quadrature grid, complex spherical harmonics, and the inward
//! looking virtual cameras placed on the grid nodes.

use std::f64::consts::PI;

use nalgebra::Vector3;
use num_complex::Complex64;

use super::EmbedError;
use crate::camera::PinholeCamera;

/// Gauss-Legendre nodes in `cos θ` times a uniform azimuth ring.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereGrid {
    pub bandwidth: usize,
    /// Polar angles, ascending, strictly inside `(0, π)`.
    pub theta: Vec<f64>,
    pub theta_weights: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`,
/// ordered by descending node.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            let step = p / d;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let dp = legendre_with_derivative(n, x).1;
        nodes.push(x);
        weights.push(2.0 / ((1.0 - x * x) * dp * dp));
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let n = n as f64;
    (p1, n * (x * p1 - p0) / (x * x - 1.0))
}

impl SphereGrid {
    pub fn new(bandwidth: usize, n_theta: usize, n_phi: usize) -> Result<Self, EmbedError> {
        if n_theta < bandwidth + 1 || n_phi < 2 * bandwidth + 1 {
            return Err(EmbedError::InvalidGrid(format!(
                "{n_theta}x{n_phi} nodes cannot resolve bandwidth {bandwidth}"
            )));
        }
        let (nodes, weights) = gauss_legendre(n_theta);
        Ok(Self {
            bandwidth,
            theta: nodes.iter().map(|x| x.acos()).collect(),
            theta_weights: weights,
            phi: (0..n_phi).map(|i| 2.0 * PI * i as f64 / n_phi as f64).collect(),
        })
    }

    pub fn n_theta(&self) -> usize {
        self.theta.len()
    }

    pub fn n_phi(&self) -> usize {
        self.phi.len()
    }

    /// Number of nodes; views are ordered polar-major.
    pub fn len(&self) -> usize {
        self.n_theta() * self.n_phi()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(θ, φ)` of view `index`.
    pub fn node(&self, index: usize) -> (f64, f64) {
        (self.theta[index / self.n_phi()], self.phi[index % self.n_phi()])
    }

    pub fn weight(&self, index: usize) -> f64 {
        self.theta_weights[index / self.n_phi()] * 2.0 * PI / self.n_phi() as f64
    }

    /// `(L + 1)²` coefficients per feature channel.
    pub fn coefficient_count(&self) -> usize {
        (self.bandwidth + 1) * (self.bandwidth + 1)
    }
}

impl Default for SphereGrid {
    fn default() -> Self {
        Self::new(3, 4, 8).expect("default grid is valid")
    }
}

/// Position of `(l, m)` in the `l`-major, `m` ascending coefficient order.
#[inline]
pub fn lm_index(l: usize, m: i64) -> usize {
    l * l + (m + l as i64) as usize
}

/// Associated Legendre `P_l^m(x)` for `m ≥ 0`, Condon-Shortley phase included.
pub fn assoc_legendre(l: usize, m: usize, x: f64) -> f64 {
    if m > l {
        return 0.0;
    }
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for k in 0..m {
        pmm *= -((2 * k + 1) as f64) * s;
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    for ll in m + 2..=l {
        let next = ((2 * ll - 1) as f64 * x * pm1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pm1;
        pm1 = next;
    }
    pm1
}

/// Orthonormal complex spherical harmonic `Y_lm(θ, φ)`.
pub fn spherical_harmonic(l: usize, m: i64, theta: f64, phi: f64) -> Complex64 {
    let am = m.unsigned_abs() as usize;
    let ratio: f64 = ((l - am + 1)..=(l + am)).map(|k| k as f64).product();
    let norm = ((2 * l + 1) as f64 / (4.0 * PI) / ratio).sqrt();
    let y = Complex64::from_polar(norm * assoc_legendre(l, am, theta.cos()), am as f64 * phi);
    if m < 0 {
        let sign = if am.is_multiple_of(2) { 1.0 } else { -1.0 };
        y.conj() * sign
    } else {
        y
    }
}

/// `Y*_lm` at every node, weighted: `table[node][lm]`.
pub fn weighted_conjugate_harmonics(grid: &SphereGrid) -> Vec<Vec<Complex64>> {
    (0..grid.len())
        .map(|v| {
            let (theta, phi) = grid.node(v);
            let w = grid.weight(v);
            let mut row = Vec::with_capacity(grid.coefficient_count());
            for l in 0..=grid.bandwidth {
                for m in -(l as i64)..=l as i64 {
                    row.push(spherical_harmonic(l, m, theta, phi).conj() * w);
                }
            }
            row
        })
        .collect()
}

/// `f̂_{k,lm} = Σ_nodes w f_k Y*_lm`, laid out `k`-major then `(l, m)`.
/// `samples[node]` holds the feature vector of one view.
pub fn sh_coefficients(samples: &[Vec<f64>], grid: &SphereGrid) -> Result<Vec<Complex64>, EmbedError> {
    if samples.len() != grid.len() {
        return Err(EmbedError::MissingSamples {
            expected: grid.len(),
            found: samples.len(),
        });
    }
    let dims = samples.first().map_or(0, Vec::len);
    if let Some(bad) = samples.iter().find(|s| s.len() != dims) {
        return Err(EmbedError::BadDimensions(format!(
            "feature vectors of length {} and {dims}",
            bad.len()
        )));
    }
    let harmonics = weighted_conjugate_harmonics(grid);
    let nc = grid.coefficient_count();
    let mut out = vec![Complex64::new(0.0, 0.0); dims * nc];
    for (sample, ys) in samples.iter().zip(&harmonics) {
        for (k, &f) in sample.iter().enumerate() {
            let dst = &mut out[k * nc..(k + 1) * nc];
            for (d, y) in dst.iter_mut().zip(ys) {
                *d += y * f;
            }
        }
    }
    Ok(out)
}

/// `|f̂|²` elementwise, same layout.
pub fn power_features(coefficients: &[Complex64]) -> Vec<f64> {
    coefficients.iter().map(|c| c.norm_sqr()).collect()
}

/// Inward-looking cameras on the grid nodes around `center`, with `up` the world
/// z axis projected off the view axis. The focal length makes a sphere of
/// `bounding_radius` about `center` fill 90% of the frame; the principal point
/// is `(size/2, size/2)`.
pub fn sphere_cameras(
    center: Vector3<f64>,
    radius: f64,
    bounding_radius: f64,
    grid: &SphereGrid,
    size: usize,
) -> Result<Vec<PinholeCamera>, EmbedError> {
    if !(radius > bounding_radius && bounding_radius > 0.0) {
        return Err(EmbedError::InvalidGrid(format!(
            "camera radius {radius} must exceed bounding radius {bounding_radius} > 0"
        )));
    }
    let half = size as f64 / 2.0;
    let focal = 0.9 * half / (bounding_radius / radius).asin().tan();
    (0..grid.len())
        .map(|v| {
            let (theta, phi) = grid.node(v);
            let dir = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            PinholeCamera::look_at(
                center + dir * radius,
                center,
                Vector3::z(),
                focal,
                focal,
                half,
                half,
                size,
                size,
            )
            .map_err(|e| EmbedError::InvalidGrid(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_cover_the_sphere() {
        let grid = SphereGrid::default();
        assert_eq!(grid.len(), 32);
        let total: f64 = (0..grid.len()).map(|v| grid.weight(v)).sum();
        assert!((total - 4.0 * PI).abs() < 1e-9);
        assert!(grid.theta.iter().all(|&t| t > 0.0 && t < PI));
        assert!(grid.theta.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn gauss_legendre_integrates_degree_seven() {
        let (x, w) = gauss_legendre(4);
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * (x.powi(6) + x.powi(7))).sum();
        assert!((integral - 2.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn low_order_harmonics_match_closed_forms() {
        let (t, p) = (0.7, 1.3);
        let y10 = spherical_harmonic(1, 0, t, p);
        assert!((y10.re - (3.0 / (4.0 * PI)).sqrt() * t.cos()).abs() < 1e-14);
        let y11 = spherical_harmonic(1, 1, t, p);
        let expect = Complex64::from_polar(-(3.0 / (8.0 * PI)).sqrt() * t.sin(), p);
        assert!((y11 - expect).norm() < 1e-14);
        let y2m1 = spherical_harmonic(2, -1, t, p);
        let expect = Complex64::from_polar((15.0 / (8.0 * PI)).sqrt() * t.sin() * t.cos(), -p);
        assert!((y2m1 - expect).norm() < 1e-14);
    }

    #[test]
    fn constant_field_has_only_dc() {
        let grid = SphereGrid::default();
        let samples = vec![vec![2.5]; grid.len()];
        let coeffs = sh_coefficients(&samples, &grid).unwrap();
        assert!((coeffs[0].re - 2.5 * (4.0 * PI).sqrt()).abs() < 1e-12);
        assert!(coeffs[1..].iter().all(|c| c.norm() < 1e-12));
        assert!(power_features(&vec![Complex64::new(0.0, 0.0); 4]).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn missing_samples_are_rejected() {
        let grid = SphereGrid::default();
        assert!(matches!(
            sh_coefficients(&[vec![1.0]], &grid),
            Err(EmbedError::MissingSamples { expected: 32, found: 1 })
        ));
        assert!(SphereGrid::new(3, 3, 8).is_err());
    }

    #[test]
    fn equatorial_camera_geometry() {
        let grid = SphereGrid {
            bandwidth: 0,
            theta: vec![PI / 2.0],
            theta_weights: vec![2.0],
            phi: vec![0.0],
        };
        let center = Vector3::new(1.0, 2.0, 3.0);
        let cams = sphere_cameras(center, 5.0, 1.0, &grid, 224).unwrap();
        let c = &cams[0];
        assert!((c.center() - (center + Vector3::new(5.0, 0.0, 0.0))).norm() < 1e-12);
        assert!((c.rotation.row(2).transpose() - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        let p = c.project(&center).unwrap();
        assert!((p.u - 112.0).abs() < 1e-12 && (p.v - 112.0).abs() < 1e-12);
    }
}
