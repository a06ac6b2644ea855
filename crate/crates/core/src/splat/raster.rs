use nalgebra::Vector2;
use rayon::prelude::*;

use super::{project_gaussian_with_floor, GaussianParticle};
use crate::camera::PinholeCamera;
use crate::imaging::RenderedImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Footprint radius in standard deviations (Mahalanobis distance).
    pub sigma_cutoff: f64,
    /// Added to the diagonal of every projected covariance, in pixels².
    pub covariance_floor: f64,
    /// Compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            sigma_cutoff: 3.0,
            covariance_floor: super::DEFAULT_COVARIANCE_FLOOR,
            min_transmittance: 1e-4,
        }
    }
}

/// A particle prepared for one camera.
struct Splat {
    index: u32,
    depth: f64,
    mean: Vector2<f64>,
    /// Upper triangle of the inverse 2D covariance.
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
    cols: (usize, usize),
    rows: (usize, usize),
}

impl Splat {
    #[inline]
    fn mahalanobis2(&self, col: usize, row: usize) -> f64 {
        let dx = col as f64 - self.mean.x;
        let dy = row as f64 - self.mean.y;
        self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy
    }

    #[inline]
    fn covers(&self, col: usize, row: usize) -> bool {
        col >= self.cols.0 && col <= self.cols.1 && row >= self.rows.0 && row <= self.rows.1
    }
}

/// Inclusive pixel range `[ceil(c - r), floor(c + r)]` clipped to `0..len`.
fn pixel_span(center: f64, radius: f64, len: usize) -> Option<(usize, usize)> {
    let lo = (center - radius).ceil().max(0.0);
    let hi = (center + radius).floor().min(len as f64 - 1.0);
    (lo <= hi && lo.is_finite() && hi.is_finite()).then(|| (lo as usize, hi as usize))
}

/// Projected particles in compositing order (depth, then particle index) and
/// per-tile lists of splat positions in that order.
struct Binned {
    splats: Vec<Splat>,
    tiles_x: usize,
    bins: Vec<Vec<u32>>,
}

fn bin(particles: &[GaussianParticle], cam: &PinholeCamera, cfg: &RasterConfig) -> Binned {
    let (w, h) = (cam.width, cam.height);
    let mut splats: Vec<Splat> = particles
        .par_iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let g = project_gaussian_with_floor(p, cam, cfg.covariance_floor).ok()?;
            let cov = g.covariance;
            let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
            if !(det > 0.0) {
                return None;
            }
            let cols = pixel_span(g.mean.x, cfg.sigma_cutoff * cov[(0, 0)].sqrt(), w)?;
            let rows = pixel_span(g.mean.y, cfg.sigma_cutoff * cov[(1, 1)].sqrt(), h)?;
            Some(Splat {
                index: index as u32,
                depth: g.depth,
                mean: g.mean,
                conic: [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det],
                color: p.color,
                opacity: p.opacity,
                cols,
                rows,
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let t = cfg.tile_size.max(1);
    let tiles_x = w.div_ceil(t);
    let tiles_y = h.div_ceil(t);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (pos, s) in splats.iter().enumerate() {
        for ty in s.rows.0 / t..=s.rows.1 / t {
            for tx in s.cols.0 / t..=s.cols.1 / t {
                bins[ty * tiles_x + tx].push(pos as u32);
            }
        }
    }
    Binned { splats, tiles_x, bins }
}

pub fn rasterize(particles: &[GaussianParticle], cam: &PinholeCamera, background: [f64; 3]) -> RenderedImage {
    rasterize_with(particles, cam, background, &RasterConfig::default())
}

/// Front-to-back alpha compositing of every particle footprint covering each
/// pixel. Tiles are independent, so the result does not depend on thread count.
pub fn rasterize_with(
    particles: &[GaussianParticle],
    cam: &PinholeCamera,
    background: [f64; 3],
    cfg: &RasterConfig,
) -> RenderedImage {
    let (w, h) = (cam.width, cam.height);
    let t = cfg.tile_size.max(1);
    let binned = bin(particles, cam, cfg);
    let cutoff2 = cfg.sigma_cutoff * cfg.sigma_cutoff;
    let mut data = vec![[0.0; 4]; w * h];
    data.par_chunks_mut(t * w).enumerate().for_each(|(ty, band)| {
        let band_rows = band.len() / w;
        for tx in 0..binned.tiles_x {
            let list = &binned.bins[ty * binned.tiles_x + tx];
            for r in 0..band_rows {
                let row = ty * t + r;
                for col in tx * t..((tx + 1) * t).min(w) {
                    let mut transmittance = 1.0;
                    let mut rgb = [0.0; 3];
                    for &pos in list {
                        let s = &binned.splats[pos as usize];
                        if !s.covers(col, row) {
                            continue;
                        }
                        let d2 = s.mahalanobis2(col, row);
                        if d2 > cutoff2 {
                            continue;
                        }
                        let alpha = s.opacity * (-0.5 * d2).exp();
                        let weight = transmittance * alpha;
                        for c in 0..3 {
                            rgb[c] += weight * s.color[c];
                        }
                        transmittance *= 1.0 - alpha;
                        if transmittance < cfg.min_transmittance {
                            break;
                        }
                    }
                    band[r * w + col] = [
                        (rgb[0] + transmittance * background[0]).clamp(0.0, 1.0),
                        (rgb[1] + transmittance * background[1]).clamp(0.0, 1.0),
                        (rgb[2] + transmittance * background[2]).clamp(0.0, 1.0),
                        (1.0 - transmittance).clamp(0.0, 1.0),
                    ];
                }
            }
        }
    });
    RenderedImage {
        width: w,
        height: h,
        data,
    }
}

/// For every pixel, the particles whose footprint covers it, in compositing
/// order, with the footprint value `exp(-½ d²)`. No early termination; this is
/// the linearization point used by the refinement solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeTable {
    pub width: usize,
    pub height: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl CompositeTable {
    #[inline]
    pub fn pixel(&self, p: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }
}

pub fn composite_table(particles: &[GaussianParticle], cam: &PinholeCamera, cfg: &RasterConfig) -> CompositeTable {
    let (w, h) = (cam.width, cam.height);
    let t = cfg.tile_size.max(1);
    let binned = bin(particles, cam, cfg);
    let cutoff2 = cfg.sigma_cutoff * cfg.sigma_cutoff;
    let rows: Vec<(Vec<usize>, Vec<(u32, f64)>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut counts = Vec::with_capacity(w);
            let mut entries = Vec::new();
            for col in 0..w {
                let before = entries.len();
                for &pos in &binned.bins[(row / t) * binned.tiles_x + col / t] {
                    let s = &binned.splats[pos as usize];
                    if !s.covers(col, row) {
                        continue;
                    }
                    let d2 = s.mahalanobis2(col, row);
                    if d2 <= cutoff2 {
                        entries.push((s.index, (-0.5 * d2).exp()));
                    }
                }
                counts.push(entries.len() - before);
            }
            (counts, entries)
        })
        .collect();
    let mut offsets = Vec::with_capacity(w * h + 1);
    offsets.push(0);
    let mut entries = Vec::new();
    for (counts, e) in rows {
        for c in counts {
            offsets.push(offsets[offsets.len() - 1] + c);
        }
        entries.extend(e);
    }
    CompositeTable {
        width: w,
        height: h,
        offsets,
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn cam16() -> PinholeCamera {
        PinholeCamera::new(20.0, 20.0, 7.5, 7.5, Matrix3::identity(), Vector3::new(0.0, 0.0, 4.0), 16, 16).unwrap()
    }

    #[test]
    fn opaque_particle_at_pixel_center() {
        let cam = cam16();
        // projects exactly onto pixel (8, 8)
        let mean = cam.backproject(8.0, 8.0, 4.0);
        let p = GaussianParticle::isotropic(mean, 0.1, [0.2, 0.4, 0.6], 1.0);
        let img = rasterize(&[p], &cam, [1.0; 3]);
        let px = img.get(8, 8);
        assert!((px[0] - 0.2).abs() < 1e-15 && (px[1] - 0.4).abs() < 1e-15 && (px[2] - 0.6).abs() < 1e-15);
        assert_eq!(px[3], 1.0);
    }

    #[test]
    fn opaque_front_particle_hides_back() {
        let cam = cam16();
        let front = GaussianParticle::isotropic(cam.backproject(8.0, 8.0, 4.0), 0.1, [1.0, 0.0, 0.0], 1.0);
        let back = GaussianParticle::isotropic(cam.backproject(8.0, 8.0, 6.0), 0.1, [0.0, 1.0, 0.0], 1.0);
        let img = rasterize(&[back, front], &cam, [1.0; 3]);
        assert_eq!(img.get(8, 8), [1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_scene_is_background() {
        let img = rasterize(&[], &cam16(), [0.5, 0.25, 1.0]);
        assert!(img.data.iter().all(|p| *p == [0.5, 0.25, 1.0, 0.0]));
    }

    #[test]
    fn table_lists_covering_particles_in_depth_order() {
        let cam = cam16();
        let a = GaussianParticle::isotropic(cam.backproject(8.0, 8.0, 6.0), 0.1, [0.0; 3], 0.5);
        let b = GaussianParticle::isotropic(cam.backproject(8.0, 8.0, 4.0), 0.1, [0.0; 3], 0.5);
        let table = composite_table(&[a, b], &cam, &RasterConfig::default());
        let hits = table.pixel(8 * 16 + 8);
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].0, 1);
        assert_eq!(hits[1].0, 0);
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
        assert!(table.pixel(0).is_empty());
    }
}
