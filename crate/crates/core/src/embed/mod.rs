//! Rotation-invariant visual embeddings: render the particles from cameras on
//! a sphere, describe each view, expand the descriptors in spherical
//! harmonics, keep the phase-free power, then reduce with PCA and adversarial
//! PCA against the heading.

mod features;
mod knn;
mod pca;
mod sphere;

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;
use thiserror::Error;

pub use features::{
    is_foreground, radial_moments, FeatureExtractor, HandcraftedExtractor, ImportedFeatures, FEATURE_DIMS,
    FOREGROUND_MARGIN, VIEW_SIZE,
};
pub use knn::{knn_query, DEFAULT_EXCLUSION};
pub use pca::{
    adversarial_pca, azimuth_concomitants, centered, column_mean, default_pca_dims, linear_r2, mean_r2, pca_reduce,
    select_mu, AdversarialPca, PcaModel, MAX_MU_EXPONENT, R2_LIMIT,
};
pub use sphere::{
    assoc_legendre, gauss_legendre, lm_index, power_features, sh_coefficients, sphere_cameras, spherical_harmonic,
    weighted_conjugate_harmonics, SphereGrid,
};

use crate::imaging::ColorImage;
use crate::splat::{rasterize, GaussianParticle};

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("invalid sphere grid: {0}")]
    InvalidGrid(String),
    #[error("expected samples at {expected} grid nodes, found {found}")]
    MissingSamples { expected: usize, found: usize },
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("feature file: {0}")]
    FeatureFile(String),
    #[error("need at least 2 samples, found {0}")]
    TooFewSamples(usize),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("requested {requested} components but the data has rank {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("concomitant covariance is singular (constant heading?)")]
    SingularConcomitant,
    #[error("no adversarial strength up to 1e12 reaches R² < 0.05 (best {best_r2:.4})")]
    NoFeasibleMu { best_r2: f64 },
    #[error("frame {0} has no embedding")]
    UnknownFrame(usize),
    #[error("need {needed} neighbors but only {available} frames lie outside the exclusion window")]
    InsufficientCandidates { needed: usize, available: usize },
}

impl EmbedError {
    pub fn code(&self) -> &'static str {
        match self {
            EmbedError::InvalidGrid(_) => "InvalidGrid",
            EmbedError::MissingSamples { .. } => "MissingSamples",
            EmbedError::BadDimensions(_) => "BadDimensions",
            EmbedError::FeatureFile(_) => "FeatureFile",
            EmbedError::TooFewSamples(_) => "TooFewSamples",
            EmbedError::InvalidDims(_) => "InvalidDims",
            EmbedError::RankDeficient { .. } => "RankDeficient",
            EmbedError::SingularConcomitant => "SingularConcomitant",
            EmbedError::NoFeasibleMu { .. } => "NoFeasibleMu",
            EmbedError::UnknownFrame(_) => "UnknownFrame",
            EmbedError::InsufficientCandidates { .. } => "InsufficientCandidates",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedConfig {
    pub bandwidth: usize,
    pub n_theta: usize,
    pub n_phi: usize,
    /// Camera distance as a multiple of the bounding radius.
    pub radius_factor: f64,
    pub view_size: usize,
    /// PCA target; `None` means `min(2000, n - 1)`.
    pub pca_dims: Option<usize>,
    pub apca_dims: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            bandwidth: 3,
            n_theta: 4,
            n_phi: 8,
            radius_factor: 2.0,
            view_size: VIEW_SIZE,
            pca_dims: None,
            apca_dims: 50,
        }
    }
}

impl EmbedConfig {
    pub fn grid(&self) -> Result<SphereGrid, EmbedError> {
        SphereGrid::new(self.bandwidth, self.n_theta, self.n_phi)
    }
}

/// Every grid view of the particles over white.
pub fn render_views(
    particles: &[GaussianParticle],
    center: Vector3<f64>,
    bounding_radius: f64,
    grid: &SphereGrid,
    cfg: &EmbedConfig,
) -> Result<Vec<ColorImage>, EmbedError> {
    let cams = sphere_cameras(
        center,
        cfg.radius_factor * bounding_radius,
        bounding_radius,
        grid,
        cfg.view_size,
    )?;
    Ok(cams.par_iter().map(|cam| rasterize(particles, cam, [1.0; 3]).rgb()).collect())
}

/// Power features of one frame from per-view feature vectors in grid order.
pub fn frame_power_features(samples: &[Vec<f64>], grid: &SphereGrid) -> Result<Vec<f64>, EmbedError> {
    Ok(power_features(&sh_coefficients(samples, grid)?))
}

/// Render, describe, and expand one frame.
pub fn embed_frame(
    particles: &[GaussianParticle],
    center: Vector3<f64>,
    bounding_radius: f64,
    cfg: &EmbedConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<f64>, EmbedError> {
    let grid = cfg.grid()?;
    let views = render_views(particles, center, bounding_radius, &grid, cfg)?;
    let samples = views
        .par_iter()
        .map(|v| extractor.extract(v))
        .collect::<Result<Vec<_>, _>>()?;
    frame_power_features(&samples, &grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEmbedding {
    pub pca: PcaModel,
    pub apca: AdversarialPca,
}

/// PCA then adversarial PCA of per-frame power features (rows), with the
/// adversarial strength chosen by [`select_mu`].
pub fn embed_sequence(power: &DMatrix<f64>, azimuths: &[f64], cfg: &EmbedConfig) -> Result<SequenceEmbedding, EmbedError> {
    let n = power.nrows();
    if n < 2 {
        return Err(EmbedError::TooFewSamples(n));
    }
    let target = cfg.pca_dims.unwrap_or_else(|| default_pca_dims(n)).min((n - 1).min(power.ncols()));
    let pca = pca_reduce(power, target)?;
    let projected = pca.project(power);
    let out = cfg.apca_dims.min(pca.dims());
    if out < cfg.apca_dims {
        log::warn!("embedding dimension reduced from {} to {out}", cfg.apca_dims);
    }
    let apca = select_mu(&projected, &azimuth_concomitants(azimuths), out)?;
    Ok(SequenceEmbedding { pca, apca })
}
