//! Per-view feature extraction.

use std::path::Path;

use super::EmbedError;
use crate::imaging::ColorImage;

pub const VIEW_SIZE: usize = 224;
pub const FEATURE_DIMS: usize = 512;
const CELLS: usize = 8;
const BINS: usize = 16;
const MOMENTS: usize = 16;

/// A pixel counts as foreground when some channel is darker than white by
/// more than two 8-bit quantization steps.
pub const FOREGROUND_MARGIN: f64 = 2.0 / 255.0;

pub trait FeatureExtractor: Sync {
    fn dims(&self) -> usize;
    fn extract(&self, image: &ColorImage) -> Result<Vec<f64>, EmbedError>;
}

/// Deterministic 512-dimensional descriptor of a 224×224 view rendered over
/// white:
///
/// * per-cell mean RGB on an 8×8 grid (192)
/// * per-cell foreground fraction (64)
/// * 16-bin per-channel foreground histograms, each summing to 1 (48)
/// * per-cell RGB standard deviation (192)
/// * radial moments `mean((r / 112)^n)`, `n = 1..=16`, of foreground pixels
///   about their centroid (16)
///
/// Histograms and moments are zero when the view has no foreground.
#[derive(Debug, Clone, Copy, Default)]
pub struct HandcraftedExtractor;

#[inline]
pub fn is_foreground(px: [f64; 3]) -> bool {
    px.iter().any(|&c| c < 1.0 - FOREGROUND_MARGIN)
}

impl FeatureExtractor for HandcraftedExtractor {
    fn dims(&self) -> usize {
        FEATURE_DIMS
    }

    fn extract(&self, image: &ColorImage) -> Result<Vec<f64>, EmbedError> {
        if image.width != VIEW_SIZE || image.height != VIEW_SIZE {
            return Err(EmbedError::BadDimensions(format!(
                "expected {VIEW_SIZE}x{VIEW_SIZE} view, got {}x{}",
                image.width, image.height
            )));
        }
        let cell = VIEW_SIZE / CELLS;
        let per_cell = (cell * cell) as f64;
        let mut means = vec![0.0; CELLS * CELLS * 3];
        let mut stds = vec![0.0; CELLS * CELLS * 3];
        let mut coverage = vec![0.0; CELLS * CELLS];
        for cy in 0..CELLS {
            for cx in 0..CELLS {
                let c = cy * CELLS + cx;
                let mut sum = [0.0; 3];
                let mut fg = 0usize;
                for r in cy * cell..(cy + 1) * cell {
                    for col in cx * cell..(cx + 1) * cell {
                        let px = image.get(r, col);
                        for k in 0..3 {
                            sum[k] += px[k];
                        }
                        fg += usize::from(is_foreground(px));
                    }
                }
                let mean = sum.map(|s| s / per_cell);
                let mut var = [0.0; 3];
                for r in cy * cell..(cy + 1) * cell {
                    for col in cx * cell..(cx + 1) * cell {
                        let px = image.get(r, col);
                        for k in 0..3 {
                            var[k] += (px[k] - mean[k]).powi(2);
                        }
                    }
                }
                for k in 0..3 {
                    means[c * 3 + k] = mean[k];
                    stds[c * 3 + k] = (var[k] / per_cell).sqrt();
                }
                coverage[c] = fg as f64 / per_cell;
            }
        }

        let mut hist = vec![0.0; 3 * BINS];
        let mut points = Vec::new();
        for (i, px) in image.data.iter().enumerate() {
            if !is_foreground(*px) {
                continue;
            }
            for k in 0..3 {
                let bin = ((px[k].clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1);
                hist[k * BINS + bin] += 1.0;
            }
            points.push(((i % VIEW_SIZE) as f64, (i / VIEW_SIZE) as f64));
        }
        let mut moments = vec![0.0; MOMENTS];
        if !points.is_empty() {
            let n = points.len() as f64;
            for h in &mut hist {
                *h /= n;
            }
            moments = radial_moments(&points, MOMENTS, VIEW_SIZE as f64 / 2.0);
        }

        let mut out = Vec::with_capacity(FEATURE_DIMS);
        out.extend(means);
        out.extend(coverage);
        out.extend(hist);
        out.extend(stds);
        out.extend(moments);
        debug_assert_eq!(out.len(), FEATURE_DIMS);
        Ok(out)
    }
}

/// `mean((|p - centroid| / scale)^n)` for `n = 1..=count`.
pub fn radial_moments(points: &[(f64, f64)], count: usize, scale: f64) -> Vec<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut out = vec![0.0; count];
    for &(x, y) in points {
        let rho = (x - cx).hypot(y - cy) / scale;
        let mut pow = 1.0;
        for m in out.iter_mut() {
            pow *= rho;
            *m += pow;
        }
    }
    out.iter().map(|m| m / n).collect()
}

/// Externally computed per-view features: `frames × views × dims` floats.
///
/// File layout (little-endian): `u32` frames, `u32` views, `u32` dims, then
/// `f32` values, frame-major, views in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportedFeatures {
    pub frames: usize,
    pub views: usize,
    pub dims: usize,
    pub data: Vec<f32>,
}

impl ImportedFeatures {
    pub fn view(&self, frame: usize, view: usize) -> &[f32] {
        let start = (frame * self.views + view) * self.dims;
        &self.data[start..start + self.dims]
    }

    /// Feature vectors of every view of one frame.
    pub fn frame_samples(&self, frame: usize) -> Vec<Vec<f64>> {
        (0..self.views)
            .map(|v| self.view(frame, v).iter().map(|&x| f64::from(x)).collect())
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        for v in [self.frames, self.views, self.dims] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EmbedError> {
        if bytes.len() < 12 {
            return Err(EmbedError::FeatureFile("truncated header".into()));
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
        let (frames, views, dims) = (word(0), word(4), word(8));
        let expected = frames
            .checked_mul(views)
            .and_then(|v| v.checked_mul(dims))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| EmbedError::FeatureFile("header overflows".into()))?;
        if bytes.len() - 12 != expected {
            return Err(EmbedError::FeatureFile(format!(
                "{frames}x{views}x{dims} header needs {expected} data bytes, found {}",
                bytes.len() - 12
            )));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            frames,
            views,
            dims,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self, EmbedError> {
        let bytes =
            std::fs::read(path).map_err(|e| EmbedError::FeatureFile(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}
