//! Training losses and rendering-quality metrics.
//!
//! Ground truth is always whitened outside its mask before comparison, so the
//! losses and metrics do not depend on background pixel values.

use thiserror::Error;

use crate::imaging::{ColorImage, Mask, RenderedImage};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("prediction and mask are both empty")]
    BothEmpty,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl LossError {
    pub fn code(&self) -> &'static str {
        match self {
            LossError::EmptyMask => "EmptyMask",
            LossError::BothEmpty => "BothEmpty",
            LossError::ShapeMismatch(_) => "ShapeMismatch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_color: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_color: 0.5 }
    }
}

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL: f64 = 99.0;

fn check_shape(w: usize, h: usize, mask: &Mask) -> Result<(), LossError> {
    if w != mask.width || h != mask.height {
        return Err(LossError::ShapeMismatch(format!(
            "{w}x{h} image against {}x{} mask",
            mask.width, mask.height
        )));
    }
    Ok(())
}

/// `Σ |x̂ - x| / (3 Σ m)` with `x` whitened outside the mask.
pub fn l1_color_loss(pred: &ColorImage, gt: &ColorImage, mask: &Mask) -> Result<f64, LossError> {
    check_shape(pred.width, pred.height, mask)?;
    check_shape(gt.width, gt.height, mask)?;
    let area = mask.area();
    if area == 0 {
        return Err(LossError::EmptyMask);
    }
    let mut sum = 0.0;
    for ((p, g), &m) in pred.data.iter().zip(&gt.data).zip(&mask.data) {
        let target = if m != 0 { *g } else { [1.0; 3] };
        sum += (p[0] - target[0]).abs() + (p[1] - target[1]).abs() + (p[2] - target[2]).abs();
    }
    Ok(sum / (3.0 * area as f64))
}

/// Soft IoU complement `1 - Σ m̂ m / Σ (m̂ + m - m̂ m)`.
pub fn iou_loss(coverage: &[f64], mask: &Mask) -> Result<f64, LossError> {
    if coverage.len() != mask.data.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} coverage values against {} mask pixels",
            coverage.len(),
            mask.data.len()
        )));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&c, &m) in coverage.iter().zip(&mask.data) {
        let m = if m != 0 { 1.0 } else { 0.0 };
        inter += c * m;
        union += c + m - c * m;
    }
    if union <= 0.0 {
        return Err(LossError::BothEmpty);
    }
    Ok(1.0 - inter / union)
}

/// `L_IoU + λ_color L_color` for one view.
pub fn total_loss(pred: &RenderedImage, gt: &ColorImage, mask: &Mask, cfg: &LossConfig) -> Result<f64, LossError> {
    let iou = iou_loss(&pred.coverage(), mask)?;
    let color = l1_color_loss(&pred.rgb(), gt, mask)?;
    Ok(iou + cfg.lambda_color * color)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub iou: f64,
    /// Mask-area-normalized L1 color error, ×100.
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Hard IoU of two masks; two empty masks count as a perfect match.
pub fn mask_iou(pred: &Mask, gt: &Mask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(a != 0 && b != 0);
        union += usize::from(a != 0 || b != 0);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Peak-1.0 PSNR over all pixels and channels.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> f64 {
    let n = (a.data.len() * 3) as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        PSNR_IDENTICAL
    } else {
        -10.0 * mse.log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of a `w`×`h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = kernel.len();
    let ow = w + 1 - k;
    let oh = h + 1 - k;
    let mut horiz = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            horiz[r * ow + c] = (0..k).map(|t| kernel[t] * plane[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|t| kernel[t] * horiz[(r + t) * ow + c]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), data range 1, valid
/// windows only, averaged over the three channels. Images smaller than the
/// window use the largest odd window that fits.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> f64 {
    let (w, h) = (a.width, a.height);
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return 1.0;
    }
    let kernel = gaussian_kernel(size, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.data.iter().map(|p| p[ch]).collect();
        let y: Vec<f64> = b.data.iter().map(|p| p[ch]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(&x, w, h, &kernel);
        let (my, _, _) = filter_valid(&y, w, h, &kernel);
        let (sxx, _, _) = filter_valid(&xx, w, h, &kernel);
        let (syy, _, _) = filter_valid(&yy, w, h, &kernel);
        let (sxy, _, _) = filter_valid(&xy, w, h, &kernel);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    total / 3.0
}

/// IoU of the coverage binarized at 0.5, L1 ×100, and PSNR/SSIM against the
/// whitened ground truth over the full image.
pub fn metric_suite(pred: &RenderedImage, gt: &ColorImage, mask: &Mask) -> Result<Metrics, LossError> {
    check_shape(pred.width, pred.height, mask)?;
    check_shape(gt.width, gt.height, mask)?;
    let rgb = pred.rgb();
    let white = gt.whitened(mask);
    Ok(Metrics {
        iou: mask_iou(&pred.silhouette(), mask),
        l1: 100.0 * l1_color_loss(&rgb, gt, mask)?,
        psnr: psnr(&rgb, &white),
        ssim: ssim(&rgb, &white),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rendered_from(img: &ColorImage, coverage: &[f64]) -> RenderedImage {
        RenderedImage {
            width: img.width,
            height: img.height,
            data: img.data.iter().zip(coverage).map(|(p, &c)| [p[0], p[1], p[2], c]).collect(),
        }
    }

    #[test]
    fn l1_zero_for_whitened_gt() {
        let gt = ColorImage::filled(4, 4, [0.3, 0.2, 0.1]);
        let mut mask = Mask::empty(4, 4);
        mask.set(1, 1, true);
        let pred = gt.whitened(&mask);
        assert_eq!(l1_color_loss(&pred, &gt, &mask).unwrap(), 0.0);
    }

    #[test]
    fn l1_black_against_white() {
        let pred = ColorImage::filled(5, 3, [0.0; 3]);
        let gt = ColorImage::filled(5, 3, [1.0; 3]);
        assert_eq!(l1_color_loss(&pred, &gt, &Mask::full(5, 3)).unwrap(), 1.0);
        assert_eq!(l1_color_loss(&pred, &gt, &Mask::empty(5, 3)), Err(LossError::EmptyMask));
    }

    #[test]
    fn iou_loss_cases() {
        let mut mask = Mask::empty(4, 1);
        mask.set(0, 0, true);
        mask.set(0, 1, true);
        assert_eq!(iou_loss(&[1.0, 1.0, 0.0, 0.0], &mask).unwrap(), 0.0);
        assert_eq!(iou_loss(&[0.0, 0.0, 1.0, 1.0], &mask).unwrap(), 1.0);
        let full = Mask::full(4, 1);
        assert_eq!(iou_loss(&[0.5; 4], &full).unwrap(), 0.5);
        assert_eq!(iou_loss(&[0.0; 4], &Mask::empty(4, 1)), Err(LossError::BothEmpty));
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let gt = ColorImage::filled(4, 4, [0.5; 3]);
        let mask = Mask::full(4, 4);
        let perfect = rendered_from(&gt, &[1.0; 16]);
        assert_eq!(total_loss(&perfect, &gt, &mask, &LossConfig::default()).unwrap(), 0.0);
        let off = rendered_from(&ColorImage::filled(4, 4, [0.9; 3]), &[0.5; 16]);
        let iou = iou_loss(&off.coverage(), &mask).unwrap();
        let no_color = total_loss(&off, &gt, &mask, &LossConfig { lambda_color: 0.0 }).unwrap();
        assert_eq!(no_color, iou);
        let both = total_loss(&off, &gt, &mask, &LossConfig::default()).unwrap();
        assert!((both - (0.5 + 0.5 * 0.4)).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_metrics() {
        let mut gt = ColorImage::filled(16, 16, [0.2, 0.6, 0.4]);
        let mut mask = Mask::empty(16, 16);
        for r in 4..12 {
            for c in 3..13 {
                mask.set(r, c, true);
                gt.set(r, c, [r as f64 / 16.0, c as f64 / 16.0, 0.5]);
            }
        }
        let cov: Vec<f64> = mask.data.iter().map(|&m| f64::from(m)).collect();
        let pred = rendered_from(&gt.whitened(&mask), &cov);
        let m = metric_suite(&pred, &gt, &mask).unwrap();
        assert_eq!(m.iou, 1.0);
        assert_eq!(m.l1, 0.0);
        assert_eq!(m.psnr, PSNR_IDENTICAL);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        let inverted: Vec<f64> = cov.iter().map(|c| 1.0 - c).collect();
        let inv = rendered_from(&gt.whitened(&mask), &inverted);
        assert_eq!(metric_suite(&inv, &gt, &mask).unwrap().iou, 0.0);
    }

    fn wave(h: usize, w: usize, fr: f64, fc: f64, amp: f64, phase: f64) -> ColorImage {
        let mut img = ColorImage::filled(w, h, [0.0; 3]);
        for r in 0..h {
            for c in 0..w {
                let px = std::array::from_fn(|ch| {
                    0.5 + amp * (fr * r as f64 + fc * c as f64 + ch as f64 + phase).sin()
                });
                img.set(r, c, px);
            }
        }
        img
    }

    #[test]
    fn matches_frozen_scikit_image_values() {
        // structural_similarity(win_size=11, gaussian_weights=True, sigma=1.5,
        // use_sample_covariance=False, data_range=1) and peak_signal_noise_ratio
        let a = wave(32, 40, 0.3, 0.2, 0.4, 0.0);
        let b = wave(32, 40, 0.31, 0.19, 0.35, 0.5);
        assert!((ssim(&a, &b) - 0.786_716_998_926_052_7).abs() < 1e-9);
        assert!((psnr(&a, &b) - 17.654_988_822_674_117).abs() < 1e-9);
    }
}
