//! Reverse-process sampling from linear denoisers and predicted sample moments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::covariance::{rows_to_matrix, EmpiricalStats};
use crate::denoiser::{LinearDenoiser, Objective};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, SigmaChoice};
use crate::seed::{stream_rng, streams};

/// Per-mode mean and variance of generated samples at denoising time `s`.
#[derive(Clone, Debug)]
pub struct SampleStatistics {
    /// Mean in original coordinates.
    pub mean: DVector<f64>,
    /// Variance of each mode of the training eigenbasis.
    pub cov_eigenvalues: DVector<f64>,
    pub s: f64,
}

/// Coefficients of one reverse step at step index `t`:
/// `u' = (u - √(1-ᾱ_t) ε)/√α_t + k_t ε + σ_t ξ`.
#[derive(Clone, Copy, Debug)]
struct StepCoefficients {
    inv_root_alpha: f64,
    noise_root: f64,
    kick: f64,
    sigma: f64,
}

fn step_coefficients(schedule: &NoiseSchedule, t: usize, sigma: SigmaChoice) -> StepCoefficients {
    let beta = schedule.beta()[t];
    let variance = match sigma {
        // no fresh noise on the final step
        SigmaChoice::MatchBeta if t > 0 => beta,
        _ => 0.0,
    };
    let prev = schedule.alpha_bar_prev(t);
    StepCoefficients {
        inv_root_alpha: 1.0 / (1.0 - beta).sqrt(),
        noise_root: (1.0 - schedule.alpha_bar()[t]).sqrt(),
        // a negative radicand only appears for σ_t² > 1 - ᾱ_{t-1}
        kick: (1.0 - prev - variance).max(0.0).sqrt(),
        sigma: variance.sqrt(),
    }
}

fn require_noise_denoiser(denoiser: &LinearDenoiser) -> Result<()> {
    if denoiser.objective() != Objective::NoisePrediction {
        return Err(Error::domain("iterative sampling needs a noise-prediction denoiser"));
    }
    Ok(())
}

/// Run the reverse iteration from white noise for `count` trajectories.
///
/// Trajectory `i` draws from stream `(seed, i)`, so results do not depend on
/// the thread count.
pub fn sample_iterative(
    denoiser: &LinearDenoiser,
    count: usize,
    seed: u64,
    sigma: SigmaChoice,
) -> Result<DMatrix<f64>> {
    require_noise_denoiser(denoiser)?;
    let d = denoiser.dim();
    let steps = denoiser.steps();
    let coeffs: Vec<StepCoefficients> = (0..steps)
        .map(|t| step_coefficients(denoiser.schedule(), t, sigma))
        .collect();
    let rows: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, streams::SAMPLING, i as u64);
            // white noise is isotropic, so it can be drawn in the eigenbasis
            let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let mut eps = vec![0.0; d];
            for t in (0..steps).rev() {
                let c = coeffs[t];
                denoiser.apply_in_basis(t, &u, &mut eps);
                for nu in 0..d {
                    let mut next = (u[nu] - c.noise_root * eps[nu]) * c.inv_root_alpha + c.kick * eps[nu];
                    if c.sigma > 0.0 {
                        next += c.sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                    u[nu] = next;
                }
            }
            let x = denoiser.basis() * DVector::from_vec(u);
            x.as_slice().to_vec()
        })
        .collect();
    Ok(rows_to_matrix(&rows, d))
}

/// Exact mean and per-mode variance of [`sample_iterative`]'s output.
///
/// Each mode follows an affine recursion `u' = A u + B + σ ξ`, so its first
/// two moments propagate exactly.
pub fn iterative_moments(denoiser: &LinearDenoiser, sigma: SigmaChoice) -> Result<SampleStatistics> {
    require_noise_denoiser(denoiser)?;
    let d = denoiser.dim();
    let schedule = denoiser.schedule();
    let mut mean = vec![0.0; d];
    let mut var = vec![1.0; d];
    for t in (0..denoiser.steps()).rev() {
        let c = step_coefficients(schedule, t, sigma);
        let root = schedule.alpha_bar()[t].sqrt();
        for nu in 0..d {
            let w = denoiser.weights()[(t, nu)];
            let pull = c.noise_root * c.inv_root_alpha - c.kick;
            let gain = c.inv_root_alpha - pull * w;
            let shift = pull * w * root * denoiser.offsets()[(t, nu)];
            mean[nu] = gain * mean[nu] + shift;
            var[nu] = gain * gain * var[nu] + c.sigma * c.sigma;
        }
    }
    Ok(SampleStatistics {
        mean: denoiser.basis() * DVector::from_vec(mean),
        cov_eigenvalues: DVector::from_vec(var),
        s: 1.0,
    })
}

/// Direct Gaussian generator `√Σ₀ u₀ + μ₀`.
pub fn sample_one_step(stats: &EmpiricalStats, count: usize, seed: u64) -> DMatrix<f64> {
    let d = stats.dim();
    let scale: Vec<f64> = stats.cov_eigenvalues.iter().map(|l| l.sqrt()).collect();
    let rows: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, streams::SAMPLING, i as u64);
            let z = DVector::from_fn(d, |nu, _| scale[nu] * rng.sample::<f64, _>(StandardNormal));
            let x = &stats.cov_basis * z + &stats.mean;
            x.as_slice().to_vec()
        })
        .collect();
    rows_to_matrix(&rows, d)
}

/// Continuous-time sample moments at denoising time `s ∈ [0, 1]`.
///
/// With ridge scale `c` every eigenvalue is shifted to `λ⁰ + c`.
pub fn predicted_sample_stats(
    stats: &EmpiricalStats,
    schedule: &NoiseSchedule,
    s: f64,
    sigma: SigmaChoice,
) -> Result<SampleStatistics> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::domain(format!("denoising time must lie in [0, 1], got {s}")));
    }
    let end = schedule.alpha_bar_continuous(1.0);
    let now = schedule.alpha_bar_continuous(1.0 - s);
    let m = stats.mean_in_basis();
    let c = schedule.reg_scale();
    let d = stats.dim();
    let mut mean = DVector::zeros(d);
    let mut var = DVector::zeros(d);
    for nu in 0..d {
        let excess = stats.cov_eigenvalues[nu] + c - 1.0;
        let x_now = now * excess + 1.0;
        let x_end = end * excess + 1.0;
        let ratio = x_now / x_end;
        match sigma {
            SigmaChoice::Zero => {
                var[nu] = ratio;
                mean[nu] = (now.sqrt() - (end * ratio).sqrt()) * m[nu];
            }
            SigmaChoice::MatchBeta => {
                // the homogeneous term enters with a minus sign so that σ_u(0)² = 1
                var[nu] = x_now - end * end * excess / now * ratio * ratio;
                mean[nu] = (now.sqrt() - (end * end / now * ratio).sqrt()) * m[nu];
            }
        }
    }
    Ok(SampleStatistics {
        mean: &stats.cov_basis * mean,
        cov_eigenvalues: var,
        s,
    })
}
