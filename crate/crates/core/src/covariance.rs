//! Ground-truth covariance models, Gaussian sampling and empirical statistics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::{stream_rng, streams};

const ORTHO_TOL: f64 = 1e-10;
const CLAMP_REL: f64 = 1e-10;
/// Stream used by [`sample_gaussian`]; row `i` is drawn from index `i`.
const DATA_STREAM: u64 = 8;

/// Eigenvalues `λ_ν = C ν^{-k}` normalized so that their mean is one.
pub fn powerlaw_spectrum(d: usize, k: f64) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::domain("spectrum dimension must be positive"));
    }
    if !(k >= 0.0) || !k.is_finite() {
        return Err(Error::domain(format!(
            "hierarchy exponent must be finite and >= 0, got {k}"
        )));
    }
    let raw: Vec<f64> = (1..=d).map(|nu| (nu as f64).powf(-k)).collect();
    let total = crate::numeric::compensated_sum(raw.iter().copied());
    let scale = d as f64 / total;
    Ok(raw.into_iter().map(|v| v * scale).collect())
}

/// Gaussian model `N(μ, R Λ Rᵀ)` stored in spectral form.
#[derive(Clone, Debug)]
pub struct SpectralCovariance {
    eigenvalues: DVector<f64>,
    basis: DMatrix<f64>,
    mean: DVector<f64>,
    identity_basis: bool,
}

impl SpectralCovariance {
    pub fn new(eigenvalues: DVector<f64>, basis: DMatrix<f64>, mean: DVector<f64>) -> Result<Self> {
        let d = eigenvalues.len();
        if d == 0 {
            return Err(Error::domain("covariance dimension must be positive"));
        }
        if basis.nrows() != d || basis.ncols() != d || mean.len() != d {
            return Err(Error::domain(format!(
                "shape mismatch: {} eigenvalues, {}x{} basis, mean of length {}",
                d,
                basis.nrows(),
                basis.ncols(),
                mean.len()
            )));
        }
        if eigenvalues.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::domain("eigenvalues must be finite and non-negative"));
        }
        if eigenvalues.as_slice().windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::domain("eigenvalues must be sorted in descending order"));
        }
        let defect = (basis.transpose() * &basis - DMatrix::identity(d, d)).norm();
        if defect > ORTHO_TOL {
            return Err(Error::domain(format!("basis is not orthogonal (defect {defect:e})")));
        }
        let identity_basis = basis == DMatrix::identity(d, d);
        Ok(SpectralCovariance {
            eigenvalues,
            basis,
            mean,
            identity_basis,
        })
    }

    /// Centered model with identity basis.
    pub fn diagonal(eigenvalues: &[f64]) -> Result<Self> {
        let d = eigenvalues.len();
        Self::new(
            DVector::from_column_slice(eigenvalues),
            DMatrix::identity(d, d),
            DVector::zeros(d),
        )
    }

    /// Centered power-law model with identity basis.
    pub fn powerlaw(d: usize, k: f64) -> Result<Self> {
        Self::diagonal(&powerlaw_spectrum(d, k)?)
    }

    /// Eigendecompose a symmetric covariance matrix.
    pub fn from_matrix(cov: &DMatrix<f64>, mean: DVector<f64>) -> Result<Self> {
        let (values, vectors) = sorted_symmetric_eigen(cov)?;
        Self::new(values, vectors, mean)
    }

    pub fn with_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::domain("mean has the wrong dimension"));
        }
        self.mean = mean;
        Ok(self)
    }

    /// Replace the basis by a Haar-random rotation drawn from `seed`.
    pub fn with_random_rotation(mut self, seed: u64) -> Self {
        self.basis = random_orthogonal(self.dim(), seed);
        self.identity_basis = false;
        self
    }

    /// Conjugate the basis by an orthogonal matrix: `Σ → Q Σ Qᵀ`, `μ → Q μ`.
    pub fn rotated(&self, rotation: &DMatrix<f64>) -> Result<Self> {
        Self::new(self.eigenvalues.clone(), rotation * &self.basis, rotation * &self.mean)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Dense `R Λ Rᵀ`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let scaled = &self.basis * DMatrix::from_diagonal(&self.eigenvalues);
        let m = scaled * self.basis.transpose();
        (&m + m.transpose()) * 0.5
    }

    /// `vᵀ Σ v` evaluated in the spectral basis.
    pub fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        let proj = self.basis.tr_mul(v);
        proj.iter().zip(self.eigenvalues.iter()).map(|(p, l)| l * p * p).sum()
    }

    pub fn mean_eigenvalue(&self) -> f64 {
        self.eigenvalues.sum() / self.dim() as f64
    }

    pub fn is_full_rank(&self) -> bool {
        self.eigenvalues.iter().all(|&l| l > 0.0)
    }

    /// Write one sample `μ + R Λ^{1/2} z` into `out` using `rng`.
    pub fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let z: Vec<f64> = (0..d)
            .map(|i| self.eigenvalues[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if self.identity_basis {
            for (i, o) in out.iter_mut().enumerate() {
                *o = self.mean[i] + z[i];
            }
        } else {
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = self.mean[i];
                for (j, zj) in z.iter().enumerate() {
                    acc += self.basis[(i, j)] * zj;
                }
                *o = acc;
            }
        }
    }
}

/// `n` i.i.d. rows from `model`. Row `i` depends only on `(seed, i)`.
pub fn sample_gaussian(model: &SpectralCovariance, n: usize, seed: u64) -> DMatrix<f64> {
    let d = model.dim();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, DATA_STREAM, i as u64);
            let mut row = vec![0.0; d];
            model.draw_into(&mut rng, &mut row);
            row
        })
        .collect();
    rows_to_matrix(&rows, d)
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, streams::ROTATION, 0);
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Empirical mean and eigendecomposed covariance of a training set.
#[derive(Clone, Debug)]
pub struct EmpiricalStats {
    pub sample_count: usize,
    pub mean: DVector<f64>,
    pub cov_eigenvalues: DVector<f64>,
    pub cov_basis: DMatrix<f64>,
}

impl EmpiricalStats {
    /// Second moment about a known `center`, which is also reported as the mean.
    ///
    /// This is the estimator for data whose population mean is known (the
    /// centered setting used by the training-dynamics and replica results).
    pub fn about_center(data: &DMatrix<f64>, center: &DVector<f64>) -> Result<Self> {
        let (n, d) = data.shape();
        if n == 0 || d == 0 {
            return Err(Error::domain("data matrix is empty"));
        }
        if center.len() != d {
            return Err(Error::domain("center has the wrong dimension"));
        }
        let mut shifted = data.clone();
        for mut row in shifted.row_iter_mut() {
            row -= center.transpose();
        }
        let cov = shifted.tr_mul(&shifted) / n as f64;
        Self::from_covariance(n, center.clone(), &cov)
    }

    /// Build from a mean and a dense covariance matrix.
    pub fn from_covariance(sample_count: usize, mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::domain("sample count must be positive"));
        }
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::domain("covariance and mean dimensions differ"));
        }
        let (cov_eigenvalues, cov_basis) = sorted_symmetric_eigen(cov)?;
        Ok(EmpiricalStats {
            sample_count,
            mean,
            cov_eigenvalues,
            cov_basis,
        })
    }

    /// Same covariance, different reported mean.
    pub fn with_mean(mut self, mean: DVector<f64>) -> Self {
        assert_eq!(mean.len(), self.dim(), "mean has the wrong dimension");
        self.mean = mean;
        self
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let scaled = &self.cov_basis * DMatrix::from_diagonal(&self.cov_eigenvalues);
        scaled * self.cov_basis.transpose()
    }

    /// Number of eigenvalues above `rel_tol · λ_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let max = self.cov_eigenvalues.max();
        if max <= 0.0 {
            return 0;
        }
        self.cov_eigenvalues.iter().filter(|&&l| l > rel_tol * max).count()
    }

    /// Mean expressed in the eigenbasis: `(e⁰_ν)ᵀ μ₀`.
    pub fn mean_in_basis(&self) -> DVector<f64> {
        self.cov_basis.tr_mul(&self.mean)
    }

    /// Diagonal of the truth covariance in this eigenbasis: `(e⁰_ν)ᵀ Σ e⁰_ν`.
    pub fn projected_variances(&self, truth: &SpectralCovariance) -> DVector<f64> {
        // (e⁰)ᵀ R Λ Rᵀ e⁰ = Σ_j λ_j (Rᵀ e⁰)_j²
        let overlap = truth.basis().tr_mul(&self.cov_basis);
        DVector::from_fn(self.dim(), |nu, _| {
            overlap
                .column(nu)
                .iter()
                .zip(truth.eigenvalues().iter())
                .map(|(o, l)| l * o * o)
                .sum()
        })
    }

    /// `(μ - μ₀)` expressed in this eigenbasis.
    pub fn mean_offset_in_basis(&self, truth: &SpectralCovariance) -> DVector<f64> {
        self.cov_basis.tr_mul(&(truth.mean() - &self.mean))
    }
}

/// Sample mean and `1/N` sample covariance of the rows of `data`.
pub fn empirical_stats(data: &DMatrix<f64>) -> Result<EmpiricalStats> {
    let (n, d) = data.shape();
    if n == 0 || d == 0 {
        return Err(Error::domain("data matrix is empty"));
    }
    let mean = DVector::from_fn(d, |j, _| data.column(j).sum() / n as f64);
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / n as f64;
    EmpiricalStats::from_covariance(n, mean, &cov)
}

/// Symmetric eigendecomposition sorted descending with a fixed sign convention.
///
/// Each eigenvector has its largest-magnitude entry positive. Negative
/// eigenvalues smaller than `1e-10 · max|λ|` are clamped to zero; larger ones
/// are reported as an error.
pub fn sorted_symmetric_eigen(matrix: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = matrix.nrows();
    if matrix.ncols() != d {
        return Err(Error::domain("matrix is not square"));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("matrix has non-finite entries"));
    }
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut values = DVector::zeros(d);
    let mut vectors = DMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        let mut lambda = eig.eigenvalues[src];
        if lambda < 0.0 {
            if -lambda <= CLAMP_REL * scale {
                lambda = 0.0;
            } else {
                return Err(Error::Domain(format!(
                    "matrix has a negative eigenvalue {lambda:e} (scale {scale:e})"
                )));
            }
        }
        values[dst] = lambda;
        let col = eig.eigenvectors.column(src);
        let pivot = col
            .iter()
            .enumerate()
            .fold(
                (0usize, 0.0f64),
                |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best },
            )
            .0;
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(dst, &(col * sign));
    }
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn powerlaw_examples() {
        assert_eq!(powerlaw_spectrum(4, 0.0).unwrap(), vec![1.0; 4]);
        let s = powerlaw_spectrum(4, 1.0).unwrap();
        // C = 4 / (1 + 1/2 + 1/3 + 1/4) = 48/25
        let expected = [1.92, 0.96, 0.64, 0.48];
        for (a, b) in s.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_eq!(powerlaw_spectrum(1, 5.0).unwrap(), vec![1.0]);
        assert!(powerlaw_spectrum(0, 1.0).is_err());
        assert!(powerlaw_spectrum(3, -1.0).is_err());
    }

    #[test]
    fn zero_covariance_samples_equal_mean() {
        let m = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let model = SpectralCovariance::diagonal(&[0.0; 3])
            .unwrap()
            .with_mean(m.clone())
            .unwrap();
        let x = sample_gaussian(&model, 3, 11);
        for row in x.row_iter() {
            assert_eq!(row.transpose(), m);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let model = SpectralCovariance::powerlaw(5, 1.0).unwrap().with_random_rotation(3);
        assert_eq!(sample_gaussian(&model, 20, 9), sample_gaussian(&model, 20, 9));
        assert_ne!(sample_gaussian(&model, 20, 9), sample_gaussian(&model, 20, 10));
    }

    #[test]
    fn identity_sample_covariance_is_close() {
        let model = SpectralCovariance::diagonal(&[1.0, 1.0]).unwrap();
        let x = sample_gaussian(&model, 100_000, 5);
        let stats = empirical_stats(&x).unwrap();
        let cov = stats.covariance_matrix();
        for i in 0..2 {
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((cov[(i, j)] - target).abs() < 0.05, "{cov}");
            }
        }
    }

    #[test]
    fn single_sample_has_zero_scatter() {
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let s = empirical_stats(&x).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 2.0, 3.0]);
        assert!(s.cov_eigenvalues.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn antipodal_pair_is_rank_one() {
        let a = [0.6, -0.8, 2.0];
        let x = DMatrix::from_row_slice(2, 3, &[a[0], a[1], a[2], -a[0], -a[1], -a[2]]);
        let s = empirical_stats(&x).unwrap();
        let norm2: f64 = a.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(s.mean.norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.cov_eigenvalues[0], norm2, epsilon = 1e-12);
        assert_eq!(s.rank(1e-12), 1);
    }

    #[test]
    fn scaled_identity_rows_match_dense_covariance() {
        let d = 6;
        let x = DMatrix::identity(d, d) * (d as f64).sqrt();
        let s = empirical_stats(&x).unwrap();
        // dense brute force, straight from the definition
        let mut brute = DMatrix::zeros(d, d);
        let mu: Vec<f64> = (0..d)
            .map(|j| (0..d).map(|i| x[(i, j)]).sum::<f64>() / d as f64)
            .collect();
        for i in 0..d {
            for a in 0..d {
                for b in 0..d {
                    brute[(a, b)] += (x[(i, a)] - mu[a]) * (x[(i, b)] - mu[b]) / d as f64;
                }
            }
        }
        assert!((s.covariance_matrix() - brute).abs().max() < 1e-12);
        // Id - 11ᵀ/d has eigenvalue 1 (d-1 times) and 0 once
        for i in 0..d - 1 {
            assert_abs_diff_eq!(s.cov_eigenvalues[i], 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(s.cov_eigenvalues[d - 1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_data_is_rejected() {
        assert!(empirical_stats(&DMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn eigen_sign_convention_and_order() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let (vals, vecs) = sorted_symmetric_eigen(&m).unwrap();
        assert!(vals.as_slice().windows(2).all(|w| w[0] >= w[1]));
        for j in 0..3 {
            let col = vecs.column(j);
            let max = col.iter().fold(0.0f64, |a, v| if v.abs() > a.abs() { *v } else { a });
            assert!(max > 0.0);
        }
        assert!(
            (&vecs * DMatrix::from_diagonal(&vals) * vecs.transpose() - &m)
                .abs()
                .max()
                < 1e-12
        );
    }

    #[test]
    fn clearly_negative_eigenvalue_is_an_error() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(sorted_symmetric_eigen(&m).is_err());
    }

    #[test]
    fn model_invariants() {
        let model = SpectralCovariance::powerlaw(7, 1.3).unwrap().with_random_rotation(4);
        let r = model.basis();
        assert!((r.transpose() * r - DMatrix::identity(7, 7)).norm() < 1e-10);
        let m = model.matrix();
        assert!((&m - m.transpose()).norm() < 1e-10);
        assert!(SpectralCovariance::diagonal(&[1.0, 2.0]).is_err());
        assert!(SpectralCovariance::diagonal(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn projected_variances_match_dense_quadratic_forms() {
        let truth = SpectralCovariance::powerlaw(5, 1.0).unwrap().with_random_rotation(8);
        let x = sample_gaussian(&truth, 12, 1);
        let s = empirical_stats(&x).unwrap();
        let dense = truth.matrix();
        let pv = s.projected_variances(&truth);
        for nu in 0..5 {
            let e = s.cov_basis.column(nu);
            let direct = (e.transpose() * &dense * e)[(0, 0)];
            assert_abs_diff_eq!(pv[nu], direct, epsilon = 1e-12);
        }
    }
}
