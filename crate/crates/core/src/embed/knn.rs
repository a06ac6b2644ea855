//! Euclidean nearest neighbors that skip temporally adjacent frames.

use super::EmbedError;

pub const DEFAULT_EXCLUSION: usize = 500;

/// The `k` frames nearest to `query` among those more than `window` frames
/// away, closest first. Equal distances go to the smaller frame index.
/// `frames[i]` is the frame index of `embeddings[i]`.
pub fn knn_query(
    frames: &[usize],
    embeddings: &[Vec<f64>],
    query: usize,
    k: usize,
    window: usize,
) -> Result<Vec<usize>, EmbedError> {
    if frames.len() != embeddings.len() {
        return Err(EmbedError::InvalidDims(format!(
            "{} frame indices for {} embeddings",
            frames.len(),
            embeddings.len()
        )));
    }
    if k == 0 {
        return Err(EmbedError::InvalidDims("k must be at least 1".into()));
    }
    let q = frames
        .iter()
        .position(|&f| f == query)
        .ok_or(EmbedError::UnknownFrame(query))?;
    let target = &embeddings[q];
    let mut candidates: Vec<(f64, usize)> = frames
        .iter()
        .zip(embeddings)
        .filter(|(&f, _)| f.abs_diff(query) > window)
        .map(|(&f, e)| {
            let d: f64 = e.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, f)
        })
        .collect();
    if candidates.len() < k {
        return Err(EmbedError::InsufficientCandidates {
            needed: k,
            available: candidates.len(),
        });
    }
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, order);
        candidates.truncate(k);
    }
    candidates.sort_by(order);
    Ok(candidates.into_iter().map(|(_, f)| f).collect())
}
