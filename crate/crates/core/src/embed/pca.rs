//! Principal components and the adversarial variant that suppresses
//! directions linearly predictable from concomitant variables.

use nalgebra::{DMatrix, DVector};

use super::EmbedError;
use crate::linalg::{canonical_sign, sorted_sym_eigen};

/// Relative eigenvalue floor below which a direction counts as null.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// Orthonormal components as columns, by descending variance.
    pub components: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Dimension asked for before rank truncation.
    pub requested: usize,
}

impl PcaModel {
    pub fn dims(&self) -> usize {
        self.components.ncols()
    }

    /// Rows of `data` projected onto the components.
    pub fn project(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        center_with(data, &self.mean) * &self.components
    }
}

pub fn column_mean(data: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(data.ncols(), data.column_iter().map(|c| c.mean()))
}

fn center_with(data: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = data.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

pub fn centered(data: &DMatrix<f64>) -> DMatrix<f64> {
    center_with(data, &column_mean(data))
}

/// `min(2000, n - 1)`.
pub fn default_pca_dims(samples: usize) -> usize {
    2000.min(samples.saturating_sub(1))
}

/// PCA of the rows of `data` (samples × features). Uses the sample Gram matrix
/// when there are fewer samples than features. A request above the numerical
/// rank is truncated to the rank with a warning.
pub fn pca_reduce(data: &DMatrix<f64>, target: usize) -> Result<PcaModel, EmbedError> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(EmbedError::TooFewSamples(n));
    }
    if target == 0 || target > (n - 1).min(d) {
        return Err(EmbedError::InvalidDims(format!(
            "target {target} outside 1..={} for {n} samples of dimension {d}",
            (n - 1).min(d)
        )));
    }
    let mean = column_mean(data);
    let x = center_with(data, &mean);
    let scale = 1.0 / (n - 1) as f64;
    let (values, vectors) = if n <= d {
        let (vals, u) = sorted_sym_eigen(&x * x.transpose() * scale);
        let mut v = DMatrix::zeros(d, n);
        for k in 0..n {
            if vals[k] > 0.0 {
                let mut col = x.transpose() * u.column(k) / ((n - 1) as f64 * vals[k]).sqrt();
                canonical_sign(&mut col);
                v.set_column(k, &col);
            }
        }
        (vals, v)
    } else {
        sorted_sym_eigen(x.transpose() * &x * scale)
    };
    let top = values.iter().cloned().fold(0.0f64, f64::max);
    let rank = values.iter().filter(|&&v| v > RANK_TOLERANCE * top).count();
    let keep = if target > rank {
        log::warn!("requested {target} components but the data has rank {rank}; truncating");
        rank
    } else {
        target
    };
    if keep == 0 {
        return Err(EmbedError::RankDeficient { requested: target, rank });
    }
    Ok(PcaModel {
        mean,
        components: vectors.columns(0, keep).into_owned(),
        eigenvalues: values.iter().take(keep).cloned().collect(),
        requested: target,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialPca {
    pub mu: f64,
    /// Orthonormal basis as columns.
    pub basis: DMatrix<f64>,
    /// Rows of the centered input projected on the basis.
    pub embeddings: DMatrix<f64>,
}

/// Top `out_dims` eigenvectors of `C_X - μ C_XY C_YY⁻¹ C_YX`.
pub fn adversarial_pca(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    out_dims: usize,
    mu: f64,
) -> Result<AdversarialPca, EmbedError> {
    let (n, p) = x.shape();
    if y.nrows() != n {
        return Err(EmbedError::InvalidDims(format!("{n} samples but {} concomitant rows", y.nrows())));
    }
    if !(mu >= 0.0) {
        return Err(EmbedError::InvalidDims(format!("adversarial strength {mu} must be nonnegative")));
    }
    if n < 2 {
        return Err(EmbedError::TooFewSamples(n));
    }
    if out_dims == 0 || out_dims > p {
        return Err(EmbedError::InvalidDims(format!("{out_dims} output dims from {p} inputs")));
    }
    let xc = centered(x);
    let yc = centered(y);
    let scale = 1.0 / (n - 1) as f64;
    let cx = xc.transpose() * &xc * scale;
    let cxy = xc.transpose() * &yc * scale;
    let cyy = yc.transpose() * &yc * scale;
    let eig = cyy.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    if !(top > 0.0) || eig.eigenvalues.min() <= 1e-10 * top {
        return Err(EmbedError::SingularConcomitant);
    }
    let cyy_inv = cyy.try_inverse().ok_or(EmbedError::SingularConcomitant)?;
    let explained = &cxy * cyy_inv * cxy.transpose();
    let m = cx - explained * mu;
    let (_, vectors) = sorted_sym_eigen((&m + m.transpose()) * 0.5);
    let basis = vectors.columns(0, out_dims).into_owned();
    let embeddings = &xc * &basis;
    Ok(AdversarialPca { mu, basis, embeddings })
}

/// Coefficient of determination of an ordinary least-squares fit of `target`
/// on `features` plus an intercept.
pub fn linear_r2(features: &DMatrix<f64>, target: &DVector<f64>) -> f64 {
    let n = features.nrows();
    let mut design = DMatrix::from_element(n, features.ncols() + 1, 1.0);
    design.columns_mut(1, features.ncols()).copy_from(features);
    let svd = design.clone().svd(true, true);
    let coef = svd.solve(target, 1e-12).expect("svd computed with both factors");
    let residual = target - design * coef;
    let mean = target.mean();
    let total: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if total == 0.0 {
        return 0.0;
    }
    1.0 - residual.norm_squared() / total
}

pub const R2_LIMIT: f64 = 0.05;
pub const MAX_MU_EXPONENT: i32 = 12;

/// Mean R² of predicting each concomitant column from the embeddings.
pub fn mean_r2(embeddings: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let total: f64 = y.column_iter().map(|c| linear_r2(embeddings, &c.into_owned())).sum();
    total / y.ncols() as f64
}

/// Smallest `μ = 10^k`, `k = 0..=12`, whose embeddings explain less than 5% of
/// the concomitant variance on average.
pub fn select_mu(x: &DMatrix<f64>, y: &DMatrix<f64>, out_dims: usize) -> Result<AdversarialPca, EmbedError> {
    let mut best = f64::INFINITY;
    for k in 0..=MAX_MU_EXPONENT {
        let fit = adversarial_pca(x, y, out_dims, 10f64.powi(k))?;
        let r2 = mean_r2(&fit.embeddings, y);
        if r2 < R2_LIMIT {
            return Ok(fit);
        }
        best = best.min(r2);
    }
    Err(EmbedError::NoFeasibleMu { best_r2: best })
}

/// `(sin φ, cos φ)` rows.
pub fn azimuth_concomitants(azimuths: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(azimuths.len(), 2, |r, c| if c == 0 { azimuths[r].sin() } else { azimuths[r].cos() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    }

    #[test]
    fn planar_data_reconstructs_exactly() {
        let mut s = 7;
        let (n, d) = (12, 40);
        let a = DVector::from_fn(d, |_, _| lcg(&mut s));
        let b = DVector::from_fn(d, |_, _| lcg(&mut s));
        let offset = DVector::from_fn(d, |_, _| lcg(&mut s));
        let data = DMatrix::from_fn(n, d, |_, _| 0.0);
        let mut data = data;
        for r in 0..n {
            let (p, q) = (lcg(&mut s) * 4.0, lcg(&mut s));
            data.set_row(r, &(&offset + &a * p + &b * q).transpose());
        }
        let model = pca_reduce(&data, 2).unwrap();
        let proj = model.project(&data);
        let recon = &proj * model.components.transpose();
        let err = (centered(&data) - recon).amax();
        assert!(err < 1e-8, "{err}");
        // variances equal eigenvalues
        for k in 0..2 {
            let col = proj.column(k);
            let var = col.norm_squared() / (n - 1) as f64;
            assert!((var - model.eigenvalues[k]).abs() < 1e-8);
        }
        // rank truncation
        let over = pca_reduce(&data, 5).unwrap();
        assert_eq!(over.dims(), 2);
        assert_eq!(over.requested, 5);
    }

    #[test]
    fn zero_strength_matches_plain_pca() {
        let mut s = 11;
        let x = DMatrix::from_fn(60, 6, |_, c| lcg(&mut s) * (c + 1) as f64);
        let y = DMatrix::from_fn(60, 2, |_, _| lcg(&mut s));
        let fit = adversarial_pca(&x, &y, 3, 0.0).unwrap();
        let plain = pca_reduce(&x, 3).unwrap();
        assert!((fit.basis.clone() - plain.components).amax() < 1e-8);
    }

    #[test]
    fn constant_azimuth_is_singular() {
        let x = DMatrix::from_fn(10, 3, |r, c| (r * c) as f64);
        let y = azimuth_concomitants(&[0.4; 10]);
        assert_eq!(adversarial_pca(&x, &y, 2, 1.0), Err(EmbedError::SingularConcomitant));
    }

    #[test]
    fn r2_of_exact_linear_target_is_one() {
        let f = DMatrix::from_fn(20, 2, |r, c| ((r * (c + 3)) % 7) as f64);
        let t = DVector::from_fn(20, |r, _| 2.0 * f[(r, 0)] - f[(r, 1)] + 1.0);
        assert!((linear_r2(&f, &t) - 1.0).abs() < 1e-12);
    }
}
