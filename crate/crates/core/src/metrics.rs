//! Monte Carlo losses, denoiser-difference measures and detail similarity.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::covariance::SpectralCovariance;
use crate::denoiser::{LinearDenoiser, Objective};
use crate::error::{Error, Result};
use crate::numeric::{Estimate, Welford};
use crate::seed::{stream_rng, streams};

const BLOCK: usize = 4096;

/// Anything that can supply clean samples `x₀` for loss estimation.
pub trait DataSource: Sync {
    fn dim(&self) -> usize;
    /// Write one sample into `out`.
    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]);
}

/// A fixed training set; rows are picked uniformly at random.
pub struct Rows<'a>(pub &'a DMatrix<f64>);

impl DataSource for Rows<'_> {
    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let i = rng.random_range(0..self.0.nrows());
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.0[(i, j)];
        }
    }
}

/// Fresh draws from the ground truth.
impl DataSource for SpectralCovariance {
    fn dim(&self) -> usize {
        SpectralCovariance::dim(self)
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        self.draw_into(rng, out);
    }
}

/// Target of the objective and its penalty at step `t` for a draw.
fn sample_loss(den: &LinearDenoiser, t: usize, z0: &[f64], eps: &[f64], out: &mut [f64]) -> f64 {
    let a = den.schedule().alpha_bar()[t];
    let (ra, rn) = (a.sqrt(), (1.0 - a).sqrt());
    let zt: Vec<f64> = z0.iter().zip(eps).map(|(x, e)| ra * x + rn * e).collect();
    den.apply_in_basis(t, &zt, out);
    let target = match den.objective() {
        Objective::NoisePrediction => eps,
        Objective::DataPrediction => z0,
    };
    let err: f64 = out.iter().zip(target).map(|(p, y)| (y - p) * (y - p)).sum();
    err / z0.len() as f64
}

/// Monte Carlo estimate of the training objective on samples from `source`.
///
/// Draw `i` uses step `i mod T`, so with at least two draws per step the
/// estimate is stratified over steps. The ridge penalty is added exactly.
pub fn monte_carlo_loss<S: DataSource>(
    denoiser: &LinearDenoiser,
    source: &S,
    noise_draws: usize,
    seed: u64,
) -> Result<Estimate> {
    if noise_draws == 0 {
        return Err(Error::domain("need at least one noise draw"));
    }
    let d = denoiser.dim();
    if source.dim() != d {
        return Err(Error::domain("data and denoiser dimensions differ"));
    }
    let steps = denoiser.steps();
    let basis = denoiser.basis();
    let blocks = noise_draws.div_ceil(BLOCK);
    let partial: Vec<Vec<Welford>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, streams::NOISE, b as u64);
            let mut acc = vec![Welford::default(); steps];
            let mut x = vec![0.0; d];
            let mut out = vec![0.0; d];
            let end = ((b + 1) * BLOCK).min(noise_draws);
            for i in b * BLOCK..end {
                let t = i % steps;
                source.draw(&mut rng, &mut x);
                let z0 = basis.tr_mul(&DVector::from_column_slice(&x));
                let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                acc[t].push(sample_loss(denoiser, t, z0.as_slice(), &eps, &mut out));
            }
            acc
        })
        .collect();
    let mut per_step = vec![Welford::default(); steps];
    for block in &partial {
        for (total, part) in per_step.iter_mut().zip(block) {
            total.merge(part);
        }
    }
    let penalty: f64 = (0..steps)
        .map(|t| denoiser.schedule().gamma()[t] * denoiser.weights().row(t).norm_squared())
        .sum::<f64>()
        / (d * steps) as f64;

    if per_step.iter().all(|w| w.count() >= 2) {
        let mean = per_step.iter().map(|w| w.mean()).sum::<f64>() / steps as f64;
        let var = per_step.iter().map(|w| w.variance() / w.count() as f64).sum::<f64>() / (steps * steps) as f64;
        Ok(Estimate {
            mean: mean + penalty,
            std_error: var.sqrt(),
        })
    } else {
        // too few draws to stratify: steps were still visited in order, so
        // treat every draw as one sample
        let mut all = Welford::default();
        for w in &per_step {
            all.merge(w);
        }
        Ok(Estimate {
            mean: all.mean() + penalty,
            std_error: if all.count() > 1 {
                (all.variance() / all.count() as f64).sqrt()
            } else {
                f64::NAN
            },
        })
    }
}

/// Affine form `x ↦ G x + h` of one step of a denoiser, in original coordinates.
fn affine_parts(den: &LinearDenoiser, t: usize) -> (DMatrix<f64>, DVector<f64>) {
    let g = den.weight_matrix(t);
    let offsets = DVector::from_iterator(den.dim(), den.offsets().row(t).iter().copied());
    let h = match den.objective() {
        Objective::NoisePrediction => {
            let root = den.schedule().alpha_bar()[t].sqrt();
            -(&g * den.center()) * root
        }
        Objective::DataPrediction => den.basis() * offsets,
    };
    (g, h)
}

fn check_pair(a: &LinearDenoiser, b: &LinearDenoiser, test: &DMatrix<f64>) -> Result<()> {
    if a.dim() != b.dim() || test.ncols() != a.dim() {
        return Err(Error::domain("denoisers and test data must share the dimension"));
    }
    if a.schedule().alpha_bar() != b.schedule().alpha_bar() {
        return Err(Error::domain("denoisers must share the noise schedule"));
    }
    if test.nrows() == 0 {
        return Err(Error::domain("test set is empty"));
    }
    Ok(())
}

/// Noised test input `√ᾱ x + √(1-ᾱ) ε` for every step, drawn from stream `(seed, row)`.
fn noised_inputs(x: &DVector<f64>, alpha_bar: &[f64], rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    alpha_bar
        .iter()
        .map(|&a| {
            let eps = DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            x * a.sqrt() + eps * (1.0 - a).sqrt()
        })
        .collect()
}

/// `(1/T) Σ_t (1/d) ⟨‖ε_A(x_t) - ε_B(x_t)‖²⟩` over noised test samples.
///
/// Both models see the same noised input. Each test row contributes one
/// value (averaged over steps), and the standard error is taken over rows.
pub fn delta_epsilon_empirical(
    a: &LinearDenoiser,
    b: &LinearDenoiser,
    test: &DMatrix<f64>,
    seed: u64,
) -> Result<Estimate> {
    check_pair(a, b, test)?;
    let steps = a.steps();
    let d = a.dim();
    let diffs: Vec<(DMatrix<f64>, DVector<f64>)> = (0..steps)
        .map(|t| {
            let (ga, ha) = affine_parts(a, t);
            let (gb, hb) = affine_parts(b, t);
            (ga - gb, ha - hb)
        })
        .collect();
    let values: Vec<f64> = (0..test.nrows())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, streams::NOISE, i as u64);
            let x = test.row(i).transpose();
            let inputs = noised_inputs(&x, a.schedule().alpha_bar(), &mut rng);
            let total: f64 = inputs
                .iter()
                .zip(&diffs)
                .map(|(xt, (g, h))| (g * xt + h).norm_squared())
                .sum();
            total / (steps * d) as f64
        })
        .collect();
    Ok(Estimate::from_samples(&values))
}

/// Per-step, per-mode relative squared difference
/// `d_{t,ν} = ⟨(ε_A - ε_B)_ν² / |(ε_A,ν + η)(ε_B,ν + η)|⟩`, components taken
/// in `basis`. Returns a `T × d` matrix.
pub fn mode_resolved_difference(
    a: &LinearDenoiser,
    b: &LinearDenoiser,
    basis: &DMatrix<f64>,
    test: &DMatrix<f64>,
    eta: f64,
    seed: u64,
) -> Result<DMatrix<f64>> {
    check_pair(a, b, test)?;
    if !(eta > 0.0) {
        return Err(Error::domain("eta must be positive"));
    }
    let d = a.dim();
    if basis.shape() != (d, d) {
        return Err(Error::domain("basis must be d x d"));
    }
    let steps = a.steps();
    let parts: Vec<_> = (0..steps).map(|t| (affine_parts(a, t), affine_parts(b, t))).collect();
    let sums: Vec<DMatrix<f64>> = (0..test.nrows())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, streams::NOISE, i as u64);
            let x = test.row(i).transpose();
            let inputs = noised_inputs(&x, a.schedule().alpha_bar(), &mut rng);
            let mut out = DMatrix::zeros(steps, d);
            for (t, xt) in inputs.iter().enumerate() {
                let ((ga, ha), (gb, hb)) = &parts[t];
                let ea = basis.tr_mul(&(ga * xt + ha));
                let eb = basis.tr_mul(&(gb * xt + hb));
                for nu in 0..d {
                    let diff = ea[nu] - eb[nu];
                    let scale = ((ea[nu] + eta) * (eb[nu] + eta)).abs();
                    out[(t, nu)] = if diff == 0.0 { 0.0 } else { diff * diff / scale };
                }
            }
            out
        })
        .collect();
    let mut total = DMatrix::zeros(steps, d);
    for s in &sums {
        total += s;
    }
    Ok(total / test.nrows() as f64)
}

/// Coordinates of `x` along all but the `drop_leading` leading basis vectors.
fn detail_coords(x: &DVector<f64>, basis: &DMatrix<f64>, drop_leading: usize) -> DVector<f64> {
    let d = basis.ncols();
    basis.columns(drop_leading, d - drop_leading).tr_mul(x)
}

fn check_basis(dim: usize, basis: &DMatrix<f64>, drop_leading: usize) -> Result<()> {
    if basis.shape() != (dim, dim) {
        return Err(Error::domain("basis must be d x d"));
    }
    if drop_leading >= dim {
        return Err(Error::domain(format!("cannot drop {drop_leading} of {dim} directions")));
    }
    Ok(())
}

fn cosine(x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let (nx, ny) = (x.norm(), y.norm());
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::domain("similarity is undefined for a zero projection"));
    }
    Ok((x.dot(y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Cosine similarity after projecting out the `drop_leading` leading directions.
pub fn detail_similarity(x: &DVector<f64>, y: &DVector<f64>, basis: &DMatrix<f64>, drop_leading: usize) -> Result<f64> {
    check_basis(x.len(), basis, drop_leading)?;
    if y.len() != x.len() {
        return Err(Error::domain("vectors have different lengths"));
    }
    cosine(
        &detail_coords(x, basis, drop_leading),
        &detail_coords(y, basis, drop_leading),
    )
}

/// For each generated row, the best detail similarity to any training row.
///
/// Training rows without detail content are skipped.
pub fn nearest_training_similarity(
    generated: &DMatrix<f64>,
    training: &DMatrix<f64>,
    basis: &DMatrix<f64>,
    drop_leading: usize,
) -> Result<Vec<f64>> {
    let d = basis.nrows();
    check_basis(generated.ncols(), basis, drop_leading)?;
    if training.ncols() != d {
        return Err(Error::domain("training rows have the wrong dimension"));
    }
    let keep = basis.columns(drop_leading, d - drop_leading);
    let project = |m: &DMatrix<f64>| -> Vec<DVector<f64>> {
        let coords = m * keep;
        coords
            .row_iter()
            .map(|r| {
                let v = r.transpose();
                let n = v.norm();
                if n > 0.0 {
                    v / n
                } else {
                    v
                }
            })
            .collect()
    };
    let train = project(training);
    if train.iter().all(|v| v.norm() == 0.0) {
        return Err(Error::domain("no training row has detail content"));
    }
    project(generated)
        .par_iter()
        .map(|g| {
            if g.norm() == 0.0 {
                return Err(Error::domain("similarity is undefined for a zero projection"));
            }
            Ok(train
                .iter()
                .filter(|v| v.norm() > 0.0)
                .map(|v| g.dot(v).clamp(-1.0, 1.0))
                .fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{empirical_stats, sample_gaussian, EmpiricalStats};
    use crate::denoiser::{optimal_noise_denoiser, residual_loss};
    use crate::schedule::NoiseSchedule;
    use approx::assert_abs_diff_eq;

    fn setup() -> (SpectralCovariance, DMatrix<f64>, LinearDenoiser) {
        let truth = SpectralCovariance::powerlaw(3, 1.0).unwrap().with_random_rotation(1);
        let x = sample_gaussian(&truth, 6, 2);
        let stats = empirical_stats(&x).unwrap();
        let sched = NoiseSchedule::new(10, 10.0, 0.0).unwrap();
        let den = optimal_noise_denoiser(&stats, &sched);
        (truth, x, den)
    }

    #[test]
    fn zero_denoiser_loss_is_one() {
        let (_, x, den) = setup();
        let zero = LinearDenoiser::new(
            Objective::NoisePrediction,
            den.schedule().clone(),
            den.basis().clone(),
            den.center().clone(),
            DMatrix::zeros(10, 3),
            DMatrix::zeros(10, 3),
        )
        .unwrap();
        let est = monte_carlo_loss(&zero, &Rows(&x), 100_000, 3).unwrap();
        assert!(est.z_score(1.0).abs() < 3.0, "{est:?}");
    }

    #[test]
    fn optimum_on_training_data_matches_residual() {
        let (_, x, den) = setup();
        let stats = empirical_stats(&x).unwrap();
        let r = residual_loss(&stats, den.schedule(), Objective::NoisePrediction);
        let est = monte_carlo_loss(&den, &Rows(&x), 200_000, 4).unwrap();
        assert!(est.z_score(r).abs() < 3.0, "{est:?} vs {r}");
    }

    #[test]
    fn identical_denoisers_have_no_difference() {
        let (truth, _, den) = setup();
        let test = sample_gaussian(&truth, 50, 9);
        let de = delta_epsilon_empirical(&den, &den, &test, 1).unwrap();
        assert_eq!(de.mean, 0.0);
        let m = mode_resolved_difference(&den, &den, den.basis(), &test, 1e-3, 1).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_epsilon_is_symmetric() {
        let (truth, _, a) = setup();
        let other = sample_gaussian(&truth, 30, 11);
        let b = optimal_noise_denoiser(&empirical_stats(&other).unwrap(), a.schedule());
        let test = sample_gaussian(&truth, 40, 12);
        let ab = delta_epsilon_empirical(&a, &b, &test, 5).unwrap();
        let ba = delta_epsilon_empirical(&b, &a, &test, 5).unwrap();
        assert_abs_diff_eq!(ab.mean, ba.mean, epsilon = 1e-14);
        assert!(ab.mean > 0.0);
    }

    #[test]
    fn mode_difference_is_finite_for_zero_components() {
        let stats = EmpiricalStats::from_covariance(4, DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
        let sched = NoiseSchedule::new(5, 10.0, 0.0).unwrap();
        let a = optimal_noise_denoiser(&stats, &sched);
        let zero = LinearDenoiser::new(
            Objective::NoisePrediction,
            sched,
            a.basis().clone(),
            DVector::zeros(2),
            DMatrix::zeros(5, 2),
            DMatrix::zeros(5, 2),
        )
        .unwrap();
        let test = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, -0.5]);
        let m = mode_resolved_difference(&a, &zero, a.basis(), &test, 1e-3, 2).unwrap();
        assert!(m.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn detail_similarity_cases() {
        let basis = DMatrix::identity(8, 8);
        let x = DVector::from_fn(8, |i, _| i as f64 + 1.0);
        assert_abs_diff_eq!(detail_similarity(&x, &x, &basis, 5).unwrap(), 1.0, epsilon = 1e-15);
        let mut y = x.clone();
        for i in 0..5 {
            y[i] = -10.0 * i as f64;
        }
        assert_abs_diff_eq!(detail_similarity(&x, &y, &basis, 5).unwrap(), 1.0, epsilon = 1e-15);
        let mut p = DVector::zeros(8);
        let mut q = DVector::zeros(8);
        p[5] = 1.0;
        q[6] = 2.0;
        assert_eq!(detail_similarity(&p, &q, &basis, 5).unwrap(), 0.0);
        let lead = DVector::from_fn(8, |i, _| if i < 5 { 1.0 } else { 0.0 });
        assert!(detail_similarity(&lead, &x, &basis, 5).is_err());
        assert!(detail_similarity(&x, &x, &basis, 8).is_err());
    }

    #[test]
    fn nearest_similarity_cases() {
        let truth = SpectralCovariance::powerlaw(10, 1.0).unwrap();
        let train = sample_gaussian(&truth, 7, 1);
        let basis = DMatrix::identity(10, 10);
        let copied = train.rows(3, 1).into_owned();
        let s = nearest_training_similarity(&copied, &train, &basis, 5).unwrap();
        assert_abs_diff_eq!(s[0], 1.0, epsilon = 1e-12);
        let one = train.rows(0, 1).into_owned();
        let other = train.rows(1, 1).into_owned();
        let s = nearest_training_similarity(&one, &other, &basis, 5).unwrap();
        let direct = detail_similarity(&one.row(0).transpose(), &other.row(0).transpose(), &basis, 5).unwrap();
        assert_abs_diff_eq!(s[0], direct, epsilon = 1e-12);
    }
}
