//! Dense linear-algebra helpers shared by the estimators: SVD pseudo-inverse,
//! rank and null-space queries, Kronecker products and the (half-)vectorization
//! operators together with the duplication matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Default relative cutoff for [`pinv`].
pub const PINV_REL_TOL: f64 = 1e-10;

/// Moore–Penrose pseudo-inverse via SVD; singular values below
/// `rel_tol * sigma_max` are treated as zero.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u computed");
    let v_t = svd.v_t.as_ref().expect("v_t computed");
    let sigma_max = svd.singular_values.max();
    if sigma_max <= 0.0 || !sigma_max.is_finite() {
        return DMatrix::zeros(cols, rows);
    }
    let cutoff = rel_tol * sigma_max;
    let mut out = DMatrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            // out += v_k * u_k^T / s
            let vk = v_t.row(k).transpose();
            let uk = u.column(k);
            out.ger(1.0 / s, &vk, &uk, 1.0);
        }
    }
    out
}

/// Singular values (descending) and a complete orthonormal set of right
/// singular vectors, one per column, even when the matrix is wide.
pub struct FullSvd {
    pub singular_values: Vec<f64>,
    /// `cols x cols`; column `k` pairs with `singular_values[k]` (zero-padded).
    pub v: DMatrix<f64>,
}

pub fn full_svd(m: &DMatrix<f64>) -> FullSvd {
    let (rows, cols) = m.shape();
    let padded = if rows < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v = svd.v_t.expect("v_t computed").transpose();
    let mut singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    singular_values.resize(cols, 0.0);
    FullSvd { singular_values, v }
}

impl FullSvd {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.iter().copied().fold(0.0, f64::max)
    }

    pub fn rank(&self, rel_tol: f64) -> usize {
        let cutoff = rel_tol * self.sigma_max();
        if self.sigma_max() <= 0.0 {
            return 0;
        }
        self.singular_values.iter().filter(|&&s| s > cutoff).count()
    }

    /// `sigma_max / sigma_min` over the retained singular values.
    pub fn condition_number(&self, rel_tol: f64) -> f64 {
        let cutoff = rel_tol * self.sigma_max();
        let retained: Vec<f64> = self
            .singular_values
            .iter()
            .copied()
            .filter(|&s| s > cutoff && s > 0.0)
            .collect();
        match retained.iter().copied().reduce(f64::min) {
            Some(min) => self.sigma_max() / min,
            None => f64::INFINITY,
        }
    }

    /// Orthonormal basis (as columns) of the numerical null space.
    pub fn nullspace(&self, rel_tol: f64) -> DMatrix<f64> {
        let cutoff = rel_tol * self.sigma_max();
        let idx: Vec<usize> = self
            .singular_values
            .iter()
            .enumerate()
            .filter(|(_, &s)| s <= cutoff || self.sigma_max() <= 0.0)
            .map(|(k, _)| k)
            .collect();
        DMatrix::from_fn(self.v.nrows(), idx.len(), |r, c| self.v[(r, idx[c])])
    }
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-major vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), rows * cols, "unvec: length mismatch");
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

pub fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Half-vectorization of `(S + S^T)/2`: the lower triangle stacked column by column.
pub fn vech(s: &DMatrix<f64>) -> DVector<f64> {
    assert!(s.is_square(), "vech: matrix must be square");
    let n = s.nrows();
    let mut out = DVector::zeros(vech_len(n));
    let mut idx = 0;
    for j in 0..n {
        for i in j..n {
            out[idx] = 0.5 * (s[(i, j)] + s[(j, i)]);
            idx += 1;
        }
    }
    out
}

/// Inverse of [`vech`]; the result is exactly symmetric.
pub fn unvech(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), vech_len(n), "unvech: length mismatch");
    let mut s = DMatrix::zeros(n, n);
    let mut idx = 0;
    for j in 0..n {
        for i in j..n {
            s[(i, j)] = v[idx];
            s[(j, i)] = v[idx];
            idx += 1;
        }
    }
    s
}

/// The 0/1 matrix `D` with `D * vech(S) = vec(S)` for every symmetric `S`.
pub fn duplication_matrix(n: usize) -> DMatrix<f64> {
    assert!(n >= 1, "duplication_matrix: n must be positive");
    let mut d = DMatrix::zeros(n * n, vech_len(n));
    let mut col = 0;
    for j in 0..n {
        for i in j..n {
            d[(j * n + i, col)] = 1.0;
            d[(i * n + j, col)] = 1.0;
            col += 1;
        }
    }
    d
}

/// Clips negative eigenvalues of a symmetric matrix to zero.
/// Returns the projection and whether anything was clipped.
pub fn project_psd(s: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.iter().any(|&l| l < 0.0);
    let vals = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    ((&out + out.transpose()) * 0.5, clipped)
}

/// Symmetric matrix with eigenvalues floored at `floor`.
pub(crate) fn eig_floor(s: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    (&out + out.transpose()) * 0.5
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pinv_of_singular_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let p = pinv(&m, PINV_REL_TOL);
        assert_relative_eq!(p, DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.0])));
    }

    #[test]
    fn pinv_of_identity() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert_relative_eq!(pinv(&i, PINV_REL_TOL), i, epsilon = 1e-15);
    }

    #[test]
    fn pinv_left_inverse_of_full_rank_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 5, 3);
        let p = pinv(&m, PINV_REL_TOL);
        assert_relative_eq!(p * &m, DMatrix::identity(3, 3), epsilon = 1e-10);
    }

    #[test]
    fn pinv_of_zero_is_zero() {
        let z = DMatrix::<f64>::zeros(3, 2);
        assert_eq!(pinv(&z, PINV_REL_TOL), DMatrix::zeros(2, 3));
    }

    #[test]
    fn duplication_small_cases() {
        assert_eq!(duplication_matrix(1), DMatrix::from_element(1, 1, 1.0));
        let d2 = duplication_matrix(2);
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 3, &[
            1.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
            0.0, 1.0, 0.0,
            0.0, 0.0, 1.0,
        ]);
        assert_eq!(d2, expected);
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(&d2 * v, DVector::from_vec(vec![1.0, 2.0, 2.0, 3.0]));
    }

    #[test]
    fn duplication_n4_shape_and_column_sums() {
        let d = duplication_matrix(4);
        assert_eq!(d.shape(), (16, 10));
        for c in 0..10 {
            let s: f64 = d.column(c).sum();
            assert!(s == 1.0 || s == 2.0);
        }
        assert!(d.iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn vech_simple_cases() {
        assert_eq!(
            vech(&DMatrix::identity(2, 2)),
            DVector::from_vec(vec![1.0, 0.0, 1.0])
        );
        assert_eq!(vech(&DMatrix::zeros(3, 3)), DVector::zeros(6));
    }

    #[test]
    fn unvech_round_trip_symmetrizes() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 3.0]);
        let back = unvech(&vech(&s), 2);
        assert_eq!(back, (&s + s.transpose()) * 0.5);
    }

    #[test]
    fn nullspace_of_rank_deficient() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let svd = full_svd(&m);
        assert_eq!(svd.rank(1e-8), 2);
        let ns = svd.nullspace(1e-8);
        assert_eq!(ns.ncols(), 1);
        assert_relative_eq!(ns[(2, 0)].abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(svd.condition_number(1e-8), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn psd_projection_clips_negative_eigenvalues() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        let (p, clipped) = project_psd(&s);
        assert!(clipped);
        assert_relative_eq!(p, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), epsilon = 1e-14);
        let (same, clipped) = project_psd(&DMatrix::identity(3, 3));
        assert!(!clipped);
        assert_relative_eq!(same, DMatrix::identity(3, 3), epsilon = 1e-14);
    }

    #[test]
    fn kron_matches_definition() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(2, 1, &[3.0, 4.0]);
        let k = kron(&a, &b);
        assert_eq!(k, DMatrix::from_row_slice(2, 2, &[3.0, 6.0, 4.0, 8.0]));
    }
}
