//! Per-frame refinement of particle colors and opacities against multi-view
//! targets. Geometry stays fixed, so every view's footprint table is built
//! once and reused for all solves.

use rayon::prelude::*;
use thiserror::Error;

use crate::camera::CameraRig;
use crate::dataset::FrameSet;
use crate::imaging::{ColorImage, Mask};
use crate::metrics::{metric_suite, LossConfig, LossError, Metrics};
use crate::splat::{composite_table, rasterize_with, CompositeTable, GaussianParticle, RasterConfig};

#[derive(Debug, Error, PartialEq)]
pub enum RefineError {
    #[error("no views selected for refinement")]
    NoViews,
    #[error("view {view} is not in a rig of {cameras} cameras")]
    UnknownView { view: usize, cameras: usize },
    #[error("frame has {images} images and {masks} masks for {cameras} cameras")]
    FrameMismatch { images: usize, masks: usize, cameras: usize },
    #[error("invalid refine config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

impl RefineError {
    pub fn code(&self) -> &'static str {
        match self {
            RefineError::NoViews => "NoViews",
            RefineError::UnknownView { .. } => "UnknownView",
            RefineError::FrameMismatch { .. } => "FrameMismatch",
            RefineError::InvalidConfig(_) => "InvalidConfig",
            RefineError::Loss(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorMode {
    /// Joint linear least squares over all views, then opacity descent.
    LeastSquares,
    /// Colors descend alongside opacities.
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub color_mode: ColorMode,
    pub opacity_steps: usize,
    /// Step size of projected gradient descent. The losses are normalized by
    /// mask area, so a single particle's gradient is roughly its footprint
    /// over that area and useful steps are large.
    pub learning_rate: f64,
    /// Camera indices used for fitting; empty means every camera.
    pub views: Vec<usize>,
    pub loss: LossConfig,
    pub background: [f64; 3],
    pub raster: RasterConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            color_mode: ColorMode::LeastSquares,
            opacity_steps: 100,
            learning_rate: 2000.0,
            views: Vec::new(),
            loss: LossConfig::default(),
            background: [1.0; 3],
            raster: RasterConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.opacity_steps > 0 && !(self.learning_rate > 0.0) {
            return Err(RefineError::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.loss.lambda_color >= 0.0) {
            return Err(RefineError::InvalidConfig(format!(
                "lambda_color {} must be nonnegative",
                self.loss.lambda_color
            )));
        }
        Ok(())
    }
}

pub const OPACITY_MIN: f64 = 0.01;
pub const OPACITY_MAX: f64 = 1.0;
pub const COLOR_RIDGE: f64 = 1e-6;

struct View<'a> {
    table: CompositeTable,
    image: &'a ColorImage,
    mask: &'a Mask,
}

fn selected_views(frame: &FrameSet, rig: &CameraRig, cfg: &RefineConfig) -> Result<Vec<usize>, RefineError> {
    if frame.images.len() != rig.len() || frame.masks.len() != rig.len() {
        return Err(RefineError::FrameMismatch {
            images: frame.images.len(),
            masks: frame.masks.len(),
            cameras: rig.len(),
        });
    }
    let views: Vec<usize> = if cfg.views.is_empty() {
        (0..rig.len()).collect()
    } else {
        cfg.views.clone()
    };
    if views.is_empty() {
        return Err(RefineError::NoViews);
    }
    if let Some(&view) = views.iter().find(|&&v| v >= rig.len()) {
        return Err(RefineError::UnknownView {
            view,
            cameras: rig.len(),
        });
    }
    Ok(views)
}

fn prepare<'a>(
    particles: &[GaussianParticle],
    frame: &'a FrameSet,
    rig: &CameraRig,
    cfg: &RefineConfig,
) -> Result<Vec<View<'a>>, RefineError> {
    selected_views(frame, rig, cfg)?
        .into_iter()
        .map(|v| {
            let table = composite_table(particles, rig.camera(v), &cfg.raster);
            let (image, mask) = (&frame.images[v], &frame.masks[v]);
            if image.width != table.width || image.height != table.height || mask.data.len() != table.len() {
                return Err(LossError::ShapeMismatch(format!(
                    "view {v}: image {}x{} for a {}x{} camera",
                    image.width, image.height, table.width, table.height
                ))
                .into());
            }
            Ok(View { table, image, mask })
        })
        .collect()
}

/// Composited color and coverage of one pixel.
#[inline]
fn composite_pixel(entries: &[(u32, f64)], alpha: &[f64], colors: &[[f64; 3]], bg: [f64; 3]) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    for &(i, g) in entries {
        let a = alpha[i as usize] * g;
        for c in 0..3 {
            rgb[c] += t * a * colors[i as usize][c];
        }
        t *= 1.0 - a;
    }
    ([rgb[0] + t * bg[0], rgb[1] + t * bg[1], rgb[2] + t * bg[2]], 1.0 - t)
}

/// Sum of squared color residuals over masked pixels of every view.
fn masked_sq_error(views: &[View], alpha: &[f64], colors: &[[f64; 3]], bg: [f64; 3]) -> f64 {
    views
        .iter()
        .map(|view| {
            (0..view.table.len())
                .into_par_iter()
                .filter(|&p| view.mask.data[p] != 0)
                .map(|p| {
                    let (rgb, _) = composite_pixel(view.table.pixel(p), alpha, colors, bg);
                    let x = view.image.data[p];
                    (0..3).map(|c| (rgb[c] - x[c]).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorFit {
    pub colors: Vec<[f64; 3]>,
    /// Particles with zero total compositing weight; their colors are unchanged.
    pub uncovered: Vec<usize>,
    pub error_before: f64,
    pub error_after: f64,
}

/// Sparse rows of the color design matrix: one row per masked pixel.
struct Design {
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
    targets: Vec<[f64; 3]>,
}

fn assemble(views: &[View], alpha: &[f64], bg: [f64; 3]) -> Design {
    let mut design = Design {
        offsets: vec![0],
        entries: Vec::new(),
        targets: Vec::new(),
    };
    for view in views {
        let rows: Vec<(Vec<(u32, f64)>, [f64; 3])> = (0..view.table.len())
            .into_par_iter()
            .filter(|&p| view.mask.data[p] != 0)
            .map(|p| {
                let mut t = 1.0;
                let mut row = Vec::with_capacity(view.table.pixel(p).len());
                for &(i, g) in view.table.pixel(p) {
                    let a = alpha[i as usize] * g;
                    row.push((i, t * a));
                    t *= 1.0 - a;
                }
                let x = view.image.data[p];
                (row, [x[0] - t * bg[0], x[1] - t * bg[1], x[2] - t * bg[2]])
            })
            .collect();
        for (row, target) in rows {
            design.entries.extend(row);
            design.offsets.push(design.entries.len());
            design.targets.push(target);
        }
    }
    design
}

impl Design {
    /// Copy without entries below `floor`; rows keep their targets.
    fn pruned(&self, floor: f64) -> Design {
        let mut out = Design {
            offsets: vec![0],
            entries: Vec::with_capacity(self.entries.len()),
            targets: self.targets.clone(),
        };
        for r in 0..self.rows() {
            out.entries.extend(self.row(r).iter().filter(|e| e.1 >= floor));
            out.offsets.push(out.entries.len());
        }
        out
    }

    fn rows(&self) -> usize {
        self.targets.len()
    }

    fn row(&self, r: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }

    /// `(WᵀW + λI) x` for one channel.
    fn normal_apply(&self, x: &[f64], ridge: f64, out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = ridge * xi;
        }
        for r in 0..self.rows() {
            let row = self.row(r);
            let dot: f64 = row.iter().map(|&(i, w)| w * x[i as usize]).sum();
            for &(i, w) in row {
                out[i as usize] += w * dot;
            }
        }
    }
}

const CG_TOLERANCE: f64 = 1e-10;
/// Compositing weights below this are left out of the linear solve.
const SOLVE_WEIGHT_FLOOR: f64 = 1e-8;
const CG_MAX_ITERATIONS: usize = 1000;

/// Jacobi-preconditioned conjugate gradients on the ridge normal equations,
/// started from `x`.
fn solve_channel(design: &Design, diag: &[f64], rhs: &[f64], ridge: f64, x: &mut [f64]) {
    let n = x.len();
    let mut ax = vec![0.0; n];
    design.normal_apply(x, ridge, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut ap = vec![0.0; n];
    for _ in 0..n.clamp(50, CG_MAX_ITERATIONS) {
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= CG_TOLERANCE * rhs_norm {
            break;
        }
        design.normal_apply(&p, ridge, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            break;
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
}

/// Least-squares colors over the masked pixels of all selected views, with a
/// small ridge toward the current colors. The clamped solution is blended with
/// the current colors by an exact line search, so the masked squared error
/// never increases.
pub fn fit_colors_least_squares(
    particles: &[GaussianParticle],
    frame: &FrameSet,
    rig: &CameraRig,
    cfg: &RefineConfig,
) -> Result<ColorFit, RefineError> {
    let views = prepare(particles, frame, rig, cfg)?;
    let alpha: Vec<f64> = particles.iter().map(|p| p.opacity).collect();
    let current: Vec<[f64; 3]> = particles.iter().map(|p| p.color).collect();
    Ok(fit_colors_prepared(&views, &alpha, &current, cfg.background))
}

fn fit_colors_prepared(views: &[View], alpha: &[f64], current: &[[f64; 3]], bg: [f64; 3]) -> ColorFit {
    let n = current.len();
    let design = assemble(views, alpha, bg);
    let mut coverage = vec![0.0; n];
    for &(i, w) in &design.entries {
        coverage[i as usize] += w * w;
    }
    let uncovered: Vec<usize> = (0..n).filter(|&i| coverage[i] == 0.0).collect();
    // Hidden particles with negligible weight only slow the solver down; they
    // keep their colors through the ridge term.
    let system = design.pruned(SOLVE_WEIGHT_FLOOR);
    let mut diag = vec![COLOR_RIDGE; n];
    for &(i, w) in &system.entries {
        diag[i as usize] += w * w;
    }

    let mut solved = current.to_vec();
    for c in 0..3 {
        let mut rhs: Vec<f64> = current.iter().map(|col| COLOR_RIDGE * col[c]).collect();
        for r in 0..system.rows() {
            let target = system.targets[r][c];
            for &(i, w) in system.row(r) {
                rhs[i as usize] += w * target;
            }
        }
        let mut x: Vec<f64> = current.iter().map(|col| col[c]).collect();
        solve_channel(&system, &diag, &rhs, COLOR_RIDGE, &mut x);
        for (s, v) in solved.iter_mut().zip(x) {
            s[c] = v.clamp(0.0, 1.0);
        }
    }
    for &i in &uncovered {
        solved[i] = current[i];
    }

    // residual r0 = W c0 - b and direction W d, with d = solved - current
    let mut r0_dot_wd = 0.0;
    let mut wd_sq = 0.0;
    let mut before = 0.0;
    for r in 0..design.rows() {
        for c in 0..3 {
            let mut pred = 0.0;
            let mut wd = 0.0;
            for &(i, w) in design.row(r) {
                pred += w * current[i as usize][c];
                wd += w * (solved[i as usize][c] - current[i as usize][c]);
            }
            let r0 = pred - design.targets[r][c];
            before += r0 * r0;
            r0_dot_wd += r0 * wd;
            wd_sq += wd * wd;
        }
    }
    let t = if wd_sq > 0.0 { (-r0_dot_wd / wd_sq).clamp(0.0, 1.0) } else { 0.0 };
    let colors: Vec<[f64; 3]> = current
        .iter()
        .zip(&solved)
        .map(|(c0, c1)| std::array::from_fn(|c| c0[c] + t * (c1[c] - c0[c])))
        .collect();
    let after = (before + 2.0 * t * r0_dot_wd + t * t * wd_sq).max(0.0);
    if !uncovered.is_empty() {
        log::warn!("{} particles receive no compositing weight", uncovered.len());
    }
    ColorFit {
        colors,
        uncovered,
        error_before: before,
        error_after: after.min(before),
    }
}

/// Value and gradients of the mean per-view loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

const GRADIENT_ROWS: usize = 16;

fn view_loss_gradient(
    view: &View,
    alpha: &[f64],
    colors: &[[f64; 3]],
    cfg: &RefineConfig,
    out: &mut LossGradient,
    scale: f64,
) -> Result<f64, LossError> {
    let bg = cfg.background;
    let lambda = cfg.loss.lambda_color;
    let len = view.table.len();
    let area = view.mask.data.iter().filter(|&&m| m != 0).count();
    if area == 0 {
        return Err(LossError::EmptyMask);
    }
    let forward: Vec<([f64; 3], f64)> = (0..len)
        .into_par_iter()
        .map(|p| composite_pixel(view.table.pixel(p), alpha, colors, bg))
        .collect();
    let (mut inter, mut union, mut l1) = (0.0, 0.0, 0.0);
    for (p, (rgb, cov)) in forward.iter().enumerate() {
        let m = if view.mask.data[p] != 0 { 1.0 } else { 0.0 };
        inter += cov * m;
        union += cov + m - cov * m;
        let x = if m > 0.0 { view.image.data[p] } else { [1.0; 3] };
        l1 += (0..3).map(|c| (rgb[c] - x[c]).abs()).sum::<f64>();
    }
    if union <= 0.0 {
        return Err(LossError::BothEmpty);
    }
    let denom = 3.0 * area as f64;
    let loss = 1.0 - inter / union + lambda * l1 / denom;

    let width = view.table.width;
    let n = alpha.len();
    let partials: Vec<(Vec<f64>, Vec<[f64; 3]>)> = (0..len)
        .collect::<Vec<_>>()
        .par_chunks(GRADIENT_ROWS * width.max(1))
        .map(|pixels| {
            let mut ga = vec![0.0; n];
            let mut gc = vec![[0.0; 3]; n];
            let mut trans = Vec::new();
            for &p in pixels {
                let entries = view.table.pixel(p);
                if entries.is_empty() {
                    continue;
                }
                let m = if view.mask.data[p] != 0 { 1.0 } else { 0.0 };
                let x = if m > 0.0 { view.image.data[p] } else { [1.0; 3] };
                let rgb = forward[p].0;
                let d_cov = -(m * union - inter * (1.0 - m)) / (union * union);
                let d_rgb: [f64; 3] = std::array::from_fn(|c| {
                    let r = rgb[c] - x[c];
                    let s = if r > 0.0 {
                        1.0
                    } else if r < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    lambda * s / denom
                });
                trans.clear();
                let mut t = 1.0;
                for &(i, g) in entries {
                    trans.push(t);
                    t *= 1.0 - alpha[i as usize] * g;
                }
                let mut behind = bg;
                let mut pass = 1.0;
                for (k, &(i, g)) in entries.iter().enumerate().rev() {
                    let i = i as usize;
                    let a = alpha[i] * g;
                    let tk = trans[k];
                    let col = colors[i];
                    let mut da = d_cov * tk * pass;
                    for c in 0..3 {
                        da += d_rgb[c] * tk * (col[c] - behind[c]);
                        gc[i][c] += d_rgb[c] * tk * a;
                    }
                    ga[i] += g * da;
                    for c in 0..3 {
                        behind[c] = a * col[c] + (1.0 - a) * behind[c];
                    }
                    pass *= 1.0 - a;
                }
            }
            (ga, gc)
        })
        .collect();
    for (ga, gc) in partials {
        for i in 0..n {
            out.opacity[i] += scale * ga[i];
            for c in 0..3 {
                out.color[i][c] += scale * gc[i][c];
            }
        }
    }
    Ok(loss)
}

fn loss_gradient_prepared(
    views: &[View],
    alpha: &[f64],
    colors: &[[f64; 3]],
    cfg: &RefineConfig,
) -> Result<LossGradient, LossError> {
    let n = alpha.len();
    let mut out = LossGradient {
        loss: 0.0,
        opacity: vec![0.0; n],
        color: vec![[0.0; 3]; n],
    };
    let scale = 1.0 / views.len() as f64;
    for view in views {
        out.loss += scale * view_loss_gradient(view, alpha, colors, cfg, &mut out, scale)?;
    }
    Ok(out)
}

/// Mean over the selected views of `L_IoU + λ L_color`, evaluated on the
/// compositing tables, with analytic gradients for opacities and colors.
pub fn loss_and_gradient(
    particles: &[GaussianParticle],
    frame: &FrameSet,
    rig: &CameraRig,
    cfg: &RefineConfig,
) -> Result<LossGradient, RefineError> {
    let views = prepare(particles, frame, rig, cfg)?;
    let alpha: Vec<f64> = particles.iter().map(|p| p.opacity).collect();
    let colors: Vec<[f64; 3]> = particles.iter().map(|p| p.color).collect();
    Ok(loss_gradient_prepared(&views, &alpha, &colors, cfg)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpacityFit {
    pub opacities: Vec<f64>,
    /// Updated colors in gradient mode; the input colors otherwise.
    pub colors: Vec<[f64; 3]>,
    /// Loss before the first step and after every step.
    pub trace: Vec<f64>,
}

/// Projected gradient descent on opacities within `[0.01, 1]`.
pub fn refine_opacity(
    particles: &[GaussianParticle],
    frame: &FrameSet,
    rig: &CameraRig,
    cfg: &RefineConfig,
) -> Result<OpacityFit, RefineError> {
    cfg.validate()?;
    let views = prepare(particles, frame, rig, cfg)?;
    let alpha: Vec<f64> = particles.iter().map(|p| p.opacity).collect();
    let colors: Vec<[f64; 3]> = particles.iter().map(|p| p.color).collect();
    Ok(descend(&views, alpha, colors, cfg)?)
}

fn descend(
    views: &[View],
    mut alpha: Vec<f64>,
    mut colors: Vec<[f64; 3]>,
    cfg: &RefineConfig,
) -> Result<OpacityFit, LossError> {
    let mut state = loss_gradient_prepared(views, &alpha, &colors, cfg)?;
    let mut trace = vec![state.loss];
    for _ in 0..cfg.opacity_steps {
        for (a, g) in alpha.iter_mut().zip(&state.opacity) {
            *a = (*a - cfg.learning_rate * g).clamp(OPACITY_MIN, OPACITY_MAX);
        }
        if cfg.color_mode == ColorMode::Gradient {
            for (col, g) in colors.iter_mut().zip(&state.color) {
                for c in 0..3 {
                    col[c] = (col[c] - cfg.learning_rate * g[c]).clamp(0.0, 1.0);
                }
            }
        }
        state = loss_gradient_prepared(views, &alpha, &colors, cfg)?;
        trace.push(state.loss);
    }
    Ok(OpacityFit {
        opacities: alpha,
        colors,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub particles: Vec<GaussianParticle>,
    pub color_fit: Option<ColorFit>,
    pub trace: Vec<f64>,
}

/// Full per-frame refinement: colors by least squares (in that mode), opacity
/// descent, then a final color solve at the refined opacities.
pub fn refine_frame(
    particles: &[GaussianParticle],
    frame: &FrameSet,
    rig: &CameraRig,
    cfg: &RefineConfig,
) -> Result<RefineReport, RefineError> {
    cfg.validate()?;
    let views = prepare(particles, frame, rig, cfg)?;
    let mut colors: Vec<[f64; 3]> = particles.iter().map(|p| p.color).collect();
    let alpha: Vec<f64> = particles.iter().map(|p| p.opacity).collect();
    let least_squares = cfg.color_mode == ColorMode::LeastSquares;
    if least_squares {
        colors = fit_colors_prepared(&views, &alpha, &colors, cfg.background).colors;
    }
    let fit = descend(&views, alpha, colors, cfg)?;
    let mut colors = fit.colors;
    let mut color_fit = None;
    if least_squares {
        let last = fit_colors_prepared(&views, &fit.opacities, &colors, cfg.background);
        colors.clone_from(&last.colors);
        color_fit = Some(last);
    }
    let particles = particles
        .iter()
        .zip(fit.opacities.iter().zip(&colors))
        .map(|(p, (&opacity, &color))| GaussianParticle {
            opacity,
            color,
            ..p.clone()
        })
        .collect();
    Ok(RefineReport {
        particles,
        color_fit,
        trace: fit.trace,
    })
}

/// Renders one camera over white and scores it against that camera's target.
pub fn evaluate_holdout(
    particles: &[GaussianParticle],
    frame: &FrameSet,
    camera: usize,
    rig: &CameraRig,
    raster: &RasterConfig,
) -> Result<Metrics, RefineError> {
    if camera >= rig.len() || camera >= frame.images.len() || camera >= frame.masks.len() {
        return Err(RefineError::UnknownView {
            view: camera,
            cameras: rig.len(),
        });
    }
    let rendered = rasterize_with(particles, rig.camera(camera), [1.0; 3], raster);
    Ok(metric_suite(&rendered, &frame.images[camera], &frame.masks[camera])?)
}

/// Masked squared color error of the current particles on the selected views.
pub fn masked_color_error(
    particles: &[GaussianParticle],
    frame: &FrameSet,
    rig: &CameraRig,
    cfg: &RefineConfig,
) -> Result<f64, RefineError> {
    let views = prepare(particles, frame, rig, cfg)?;
    let alpha: Vec<f64> = particles.iter().map(|p| p.opacity).collect();
    let colors: Vec<[f64; 3]> = particles.iter().map(|p| p.color).collect();
    Ok(masked_sq_error(&views, &alpha, &colors, cfg.background))
}
