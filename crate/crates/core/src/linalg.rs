//! Small symmetric-matrix helpers.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};

/// Applies `f` to the eigenvalues of a symmetric 3×3 matrix.
pub fn sym_map3(m: &Matrix3<f64>, f: impl Fn(f64) -> f64) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*m);
    let mut out = Matrix3::zeros();
    for k in 0..3 {
        let v = eig.eigenvectors.column(k);
        out += v * v.transpose() * f(eig.eigenvalues[k]);
    }
    symmetrize3(&out)
}

pub fn symmetrize3(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric 3×3 matrix.
pub fn min_eigenvalue3(m: &Matrix3<f64>) -> f64 {
    SymmetricEigen::new(*m).eigenvalues.min()
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue (ties keep
/// the solver's order), with each eigenvector's largest-magnitude entry made positive.
pub fn sorted_sym_eigen(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        canonical_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Flips `v` so that its largest-magnitude entry is positive (first such entry on ties).
pub fn canonical_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = Matrix3::new(4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0);
        let r = sym_map3(&m, f64::sqrt);
        assert!((r * r - m).amax() < 1e-12);
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, 3.0]));
        let (vals, vecs) = sorted_sym_eigen(m);
        assert_eq!(vals.as_slice(), &[5.0, 3.0, 1.0]);
        assert_eq!(vecs[(1, 0)], 1.0);
    }
}
