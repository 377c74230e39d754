//! Optimal affine denoisers, their losses and gradient-flow training dynamics.
//!
//! All denoisers are diagonal in the eigenbasis `e⁰` of the training
//! covariance, so every quantity is a sum of independent per-mode terms.
//! Losses carry a `1/(dT)` prefactor and include the ridge penalty
//! `γ_t ‖W_t‖²` (or `γ_t ‖V_t‖²`).

use nalgebra::{DMatrix, DVector};

use crate::covariance::{EmpiricalStats, SpectralCovariance};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Objective {
    /// `ε_θ(x, t) = W_t (x - √ᾱ_t b_t)` predicts the added noise.
    #[default]
    NoisePrediction,
    /// `f_θ(x, t) = V_t x + r_t` predicts the clean sample.
    DataPrediction,
}

/// Per-timestep affine map stored as one weight per mode.
#[derive(Clone, Debug)]
pub struct LinearDenoiser {
    objective: Objective,
    schedule: NoiseSchedule,
    basis: DMatrix<f64>,
    center: DVector<f64>,
    /// `T × d`, row `t` holds the diagonal of `W_t` or `V_t` in the basis.
    weights: DMatrix<f64>,
    /// `T × d` offsets in basis coordinates: `(e⁰)ᵀ b_t` or `(e⁰)ᵀ r_t`.
    offsets: DMatrix<f64>,
}

impl LinearDenoiser {
    /// Assemble a denoiser from explicit weights and offsets.
    pub fn new(
        objective: Objective,
        schedule: NoiseSchedule,
        basis: DMatrix<f64>,
        center: DVector<f64>,
        weights: DMatrix<f64>,
        offsets: DMatrix<f64>,
    ) -> Result<Self> {
        let d = center.len();
        let steps = schedule.steps();
        if basis.shape() != (d, d) {
            return Err(Error::domain("basis must be d x d"));
        }
        if weights.shape() != (steps, d) || offsets.shape() != (steps, d) {
            return Err(Error::domain(format!(
                "weights and offsets must be {steps} x {d} (got {:?} and {:?})",
                weights.shape(),
                offsets.shape()
            )));
        }
        if weights.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("denoiser parameters must be finite"));
        }
        Ok(LinearDenoiser {
            objective,
            schedule,
            basis,
            center,
            weights,
            offsets,
        })
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Training mean `μ₀` in original coordinates.
    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn offsets(&self) -> &DMatrix<f64> {
        &self.offsets
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    /// Apply the map at step index `t` (0-based) to basis coordinates `z`.
    pub fn apply_in_basis(&self, t: usize, z: &[f64], out: &mut [f64]) {
        let root = self.schedule.alpha_bar()[t].sqrt();
        let w = self.weights.row(t);
        let b = self.offsets.row(t);
        match self.objective {
            Objective::NoisePrediction => {
                for nu in 0..z.len() {
                    out[nu] = w[nu] * (z[nu] - root * b[nu]);
                }
            }
            Objective::DataPrediction => {
                for nu in 0..z.len() {
                    out[nu] = w[nu] * z[nu] + b[nu];
                }
            }
        }
    }

    /// Apply the map at step index `t` to a point in original coordinates.
    pub fn apply(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        let z = self.basis.tr_mul(x);
        let mut out = vec![0.0; self.dim()];
        self.apply_in_basis(t, z.as_slice(), &mut out);
        &self.basis * DVector::from_vec(out)
    }

    /// Dense weight matrix `R diag(w_t) Rᵀ` at step index `t`.
    pub fn weight_matrix(&self, t: usize) -> DMatrix<f64> {
        let diag = DVector::from_iterator(self.dim(), self.weights.row(t).iter().copied());
        &self.basis * DMatrix::from_diagonal(&diag) * self.basis.transpose()
    }
}

/// Optimum of the noise-prediction objective.
pub fn optimal_noise_denoiser(stats: &EmpiricalStats, schedule: &NoiseSchedule) -> LinearDenoiser {
    let d = stats.dim();
    let lambda = &stats.cov_eigenvalues;
    let weights = DMatrix::from_fn(schedule.steps(), d, |t, nu| {
        let a = schedule.alpha_bar()[t];
        optimal_noise_weight(a, schedule.gamma()[t], lambda[nu])
    });
    let m = stats.mean_in_basis();
    let offsets = DMatrix::from_fn(schedule.steps(), d, |_, nu| m[nu]);
    LinearDenoiser {
        objective: Objective::NoisePrediction,
        schedule: schedule.clone(),
        basis: stats.cov_basis.clone(),
        center: stats.mean.clone(),
        weights,
        offsets,
    }
}

/// Optimum of the data-prediction objective; `γ_t` acts as a ridge on `V_t`.
pub fn optimal_data_denoiser(stats: &EmpiricalStats, schedule: &NoiseSchedule) -> LinearDenoiser {
    let d = stats.dim();
    let lambda = &stats.cov_eigenvalues;
    let m = stats.mean_in_basis();
    let weights = DMatrix::from_fn(schedule.steps(), d, |t, nu| {
        optimal_data_weight(schedule.alpha_bar()[t], schedule.gamma()[t], lambda[nu])
    });
    let offsets = DMatrix::from_fn(schedule.steps(), d, |t, nu| {
        (1.0 - schedule.alpha_bar()[t].sqrt() * weights[(t, nu)]) * m[nu]
    });
    LinearDenoiser {
        objective: Objective::DataPrediction,
        schedule: schedule.clone(),
        basis: stats.cov_basis.clone(),
        center: stats.mean.clone(),
        weights,
        offsets,
    }
}

pub fn optimal_noise_weight(alpha_bar: f64, gamma: f64, lambda: f64) -> f64 {
    (1.0 - alpha_bar).sqrt() / mode_stiffness(alpha_bar, gamma, lambda)
}

pub fn optimal_data_weight(alpha_bar: f64, gamma: f64, lambda: f64) -> f64 {
    alpha_bar.sqrt() * lambda / mode_stiffness(alpha_bar, gamma, lambda)
}

/// `ᾱλ + 1 - ᾱ + γ`, the curvature of either per-mode loss.
pub fn mode_stiffness(alpha_bar: f64, gamma: f64, lambda: f64) -> f64 {
    alpha_bar * lambda + 1.0 - alpha_bar + gamma
}

/// Per-mode noise-prediction loss with `second_moment = E[((x - μ₀)_ν)²]`.
pub fn noise_mode_loss(alpha_bar: f64, gamma: f64, w: f64, second_moment: f64) -> f64 {
    let miss = 1.0 - (1.0 - alpha_bar).sqrt() * w;
    alpha_bar * w * w * second_moment + miss * miss + gamma * w * w
}

/// Per-mode data-prediction loss for data with the given mode mean and variance.
pub fn data_mode_loss(alpha_bar: f64, gamma: f64, v: f64, r: f64, mean: f64, variance: f64) -> f64 {
    let keep = 1.0 - alpha_bar.sqrt() * v;
    let bias = keep * mean - r;
    keep * keep * variance + bias * bias + (1.0 - alpha_bar) * v * v + gamma * v * v
}

/// Minimal training loss of the affine family on the training statistics.
pub fn residual_loss(stats: &EmpiricalStats, schedule: &NoiseSchedule, objective: Objective) -> f64 {
    let d = stats.dim();
    let lambda = &stats.cov_eigenvalues;
    let mut total = 0.0;
    for (&a, &g) in schedule.alpha_bar().iter().zip(schedule.gamma()) {
        let mut inner = 0.0;
        for &l in lambda.iter() {
            let stiff = mode_stiffness(a, g, l);
            inner += match objective {
                Objective::NoisePrediction => (a * l + g) / stiff,
                Objective::DataPrediction => l * (1.0 - a + g) / stiff,
            };
        }
        total += inner;
    }
    total / (d * schedule.steps()) as f64
}

/// Per-step loss of `denoiser` on a Gaussian with mode means `mean` and mode
/// variances `variance`, both expressed in the denoiser's basis. Each entry is
/// normalized by `1/d`.
fn step_losses_on_moments(denoiser: &LinearDenoiser, mean: &DVector<f64>, variance: &DVector<f64>) -> Vec<f64> {
    let schedule = denoiser.schedule();
    let d = denoiser.dim();
    (0..schedule.steps())
        .map(|t| {
            let a = schedule.alpha_bar()[t];
            let g = schedule.gamma()[t];
            let mut inner = 0.0;
            for nu in 0..d {
                let w = denoiser.weights[(t, nu)];
                inner += match denoiser.objective {
                    Objective::NoisePrediction => {
                        // ε_θ centers on √ᾱ b; the data enter through x₀ - b
                        let shift = mean[nu] - denoiser.offsets[(t, nu)];
                        noise_mode_loss(a, g, w, variance[nu] + shift * shift)
                    }
                    Objective::DataPrediction => {
                        data_mode_loss(a, g, w, denoiser.offsets[(t, nu)], mean[nu], variance[nu])
                    }
                };
            }
            inner / d as f64
        })
        .collect()
}

fn average(per_step: &[f64]) -> f64 {
    per_step.iter().sum::<f64>() / per_step.len() as f64
}

/// Per-step training loss on the empirical distribution `(μ₀, Σ₀)`.
pub fn train_loss_per_step(denoiser: &LinearDenoiser, stats: &EmpiricalStats) -> Vec<f64> {
    let mean = denoiser.basis().tr_mul(&stats.mean);
    // Σ₀ is diagonal in its own eigenbasis
    let overlap = denoiser.basis().tr_mul(&stats.cov_basis);
    let variance = DVector::from_fn(denoiser.dim(), |nu, _| {
        overlap
            .row(nu)
            .iter()
            .zip(stats.cov_eigenvalues.iter())
            .map(|(o, l)| l * o * o)
            .sum()
    });
    step_losses_on_moments(denoiser, &mean, &variance)
}

/// Training loss of any denoiser on the empirical distribution `(μ₀, Σ₀)`.
pub fn train_loss(denoiser: &LinearDenoiser, stats: &EmpiricalStats) -> f64 {
    average(&train_loss_per_step(denoiser, stats))
}

/// Per-step expected loss on fresh samples from `truth`.
pub fn test_loss_per_step(denoiser: &LinearDenoiser, truth: &SpectralCovariance) -> Vec<f64> {
    let overlap = truth.basis().tr_mul(denoiser.basis());
    let variance = DVector::from_fn(denoiser.dim(), |nu, _| {
        overlap
            .column(nu)
            .iter()
            .zip(truth.eigenvalues().iter())
            .map(|(o, l)| l * o * o)
            .sum()
    });
    let mean = denoiser.basis().tr_mul(truth.mean());
    step_losses_on_moments(denoiser, &mean, &variance)
}

/// Expected loss on fresh samples from `truth`, for any weights.
pub fn test_loss(denoiser: &LinearDenoiser, truth: &SpectralCovariance) -> f64 {
    average(&test_loss_per_step(denoiser, truth))
}

/// Test minus residual loss of the optimal noise denoiser, from the mode sum.
pub fn optimal_noise_gap(stats: &EmpiricalStats, truth: &SpectralCovariance, schedule: &NoiseSchedule) -> f64 {
    let s = stats.projected_variances(truth);
    let delta = stats.mean_offset_in_basis(truth);
    let d = stats.dim();
    let mut total = 0.0;
    for (&a, &g) in schedule.alpha_bar().iter().zip(schedule.gamma()) {
        let mut inner = 0.0;
        for nu in 0..d {
            let l = stats.cov_eigenvalues[nu];
            let stiff = mode_stiffness(a, g, l);
            inner += (a - a * a) * (s[nu] - l + delta[nu] * delta[nu]) / (stiff * stiff);
        }
        total += inner;
    }
    total / (d * schedule.steps()) as f64
}

/// Gradient-flow time, learning rate and initial weights.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub tau: f64,
    pub learning_rate: f64,
    /// `T × d` initial weights in the training eigenbasis; zero if absent.
    pub init_weights: Option<DMatrix<f64>>,
}

impl TrainingState {
    pub fn new(tau: f64, learning_rate: f64) -> Self {
        TrainingState {
            tau,
            learning_rate,
            init_weights: None,
        }
    }

    pub fn with_init(mut self, init: DMatrix<f64>) -> Self {
        self.init_weights = Some(init);
        self
    }

    pub fn at(&self, tau: f64) -> Self {
        TrainingState { tau, ..self.clone() }
    }

    fn validate(&self, steps: usize, d: usize) -> Result<()> {
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::domain(format!("training time must be >= 0, got {}", self.tau)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::domain("learning rate must be positive"));
        }
        if let Some(w) = &self.init_weights {
            if w.shape() != (steps, d) {
                return Err(Error::domain(format!("initial weights must be {steps} x {d}")));
            }
        }
        Ok(())
    }
}

/// Relaxation rate `2 (η / dT) (ᾱλ + 1 - ᾱ + γ)` of one weight.
pub fn mode_rate(learning_rate: f64, d: usize, steps: usize, alpha_bar: f64, gamma: f64, lambda: f64) -> f64 {
    2.0 * learning_rate / (d * steps) as f64 * mode_stiffness(alpha_bar, gamma, lambda)
}

fn require_centered(stats: &EmpiricalStats) -> Result<()> {
    if stats.mean.iter().any(|m| *m != 0.0) {
        return Err(Error::domain(
            "training dynamics are derived for centered data (mean must be zero)",
        ));
    }
    Ok(())
}

/// Weights after gradient flow for time `state.tau`.
pub fn gradient_flow_weights(
    stats: &EmpiricalStats,
    schedule: &NoiseSchedule,
    state: &TrainingState,
    objective: Objective,
) -> Result<LinearDenoiser> {
    require_centered(stats)?;
    let d = stats.dim();
    let steps = schedule.steps();
    state.validate(steps, d)?;
    let optimum = match objective {
        Objective::NoisePrediction => optimal_noise_denoiser(stats, schedule),
        Objective::DataPrediction => optimal_data_denoiser(stats, schedule),
    };
    let weights = DMatrix::from_fn(steps, d, |t, nu| {
        let a = schedule.alpha_bar()[t];
        let g = schedule.gamma()[t];
        let l = stats.cov_eigenvalues[nu];
        let target = optimum.weights[(t, nu)];
        let start = state.init_weights.as_ref().map_or(0.0, |w| w[(t, nu)]);
        let decay = (-mode_rate(state.learning_rate, d, steps, a, g, l) * state.tau).exp();
        target + decay * (start - target)
    });
    Ok(LinearDenoiser {
        weights,
        offsets: DMatrix::zeros(steps, d),
        ..optimum
    })
}

/// Data-prediction initial weights matching noise-prediction weights `w0`
/// through `x = √ᾱ f + √(1-ᾱ) ε`.
pub fn matched_data_init(schedule: &NoiseSchedule, noise_init: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(noise_init.nrows(), noise_init.ncols(), |t, nu| {
        let a = schedule.alpha_bar()[t];
        (1.0 - (1.0 - a).sqrt() * noise_init[(t, nu)]) / a.sqrt()
    })
}

/// Largest violation of `x = √ᾱ f(x) + √(1-ᾱ) ε(x)` over all steps and modes,
/// measured on the linear and constant parts of the two maps.
pub fn prediction_identity_residual(noise: &LinearDenoiser, data: &LinearDenoiser) -> f64 {
    let schedule = noise.schedule();
    let mut worst = 0.0f64;
    for t in 0..noise.steps() {
        let a = schedule.alpha_bar()[t];
        for nu in 0..noise.dim() {
            let w = noise.weights[(t, nu)];
            let v = data.weights[(t, nu)];
            let slope = a.sqrt() * v + (1.0 - a).sqrt() * w - 1.0;
            let constant = a.sqrt() * data.offsets[(t, nu)] - (1.0 - a).sqrt() * w * a.sqrt() * noise.offsets[(t, nu)];
            worst = worst.max(slope.abs()).max(constant.abs());
        }
    }
    worst
}

/// Exact `τ`-derivative of `test_loss - train_loss` along the noise-prediction
/// gradient flow.
///
/// Each mode contributes `2ᾱ_t w (s_ν + δ_ν² - λ⁰_ν) dw/dτ / (dT)`; for
/// zero-initialized weights this is
/// `4η ᾱ(1-ᾱ)(s - λ⁰ + δ²) e^{-rτ}(1 - e^{-rτ}) / ((dT)² A)`.
pub fn loss_gap_derivative(
    stats: &EmpiricalStats,
    truth: &SpectralCovariance,
    schedule: &NoiseSchedule,
    state: &TrainingState,
) -> Result<f64> {
    require_centered(stats)?;
    let d = stats.dim();
    let steps = schedule.steps();
    state.validate(steps, d)?;
    let s = stats.projected_variances(truth);
    let delta = stats.mean_offset_in_basis(truth);
    let norm = (d * steps) as f64;
    let mut total = 0.0;
    for t in 0..steps {
        let a = schedule.alpha_bar()[t];
        let g = schedule.gamma()[t];
        let mut inner = 0.0;
        for nu in 0..d {
            let l = stats.cov_eigenvalues[nu];
            let target = optimal_noise_weight(a, g, l);
            let start = state.init_weights.as_ref().map_or(0.0, |w| w[(t, nu)]);
            let rate = mode_rate(state.learning_rate, d, steps, a, g, l);
            let decay = (-rate * state.tau).exp();
            let w = target + decay * (start - target);
            let dw = -rate * decay * (start - target);
            inner += 2.0 * a * w * (s[nu] + delta[nu] * delta[nu] - l) * dw;
        }
        total += inner;
    }
    Ok(total / norm)
}

/// Modes whose test loss eventually rises during training:
/// `s_ν > λ⁰_ν + γ_t / ᾱ_t`. Returned as a `T × d` table.
pub fn overfitting_modes(
    stats: &EmpiricalStats,
    truth: &SpectralCovariance,
    schedule: &NoiseSchedule,
) -> Vec<Vec<bool>> {
    let s = stats.projected_variances(truth);
    schedule
        .alpha_bar()
        .iter()
        .zip(schedule.gamma())
        .map(|(&a, &g)| {
            (0..stats.dim())
                .map(|nu| s[nu] > stats.cov_eigenvalues[nu] + g / a)
                .collect()
        })
        .collect()
}
