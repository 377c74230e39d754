//! Replica-theory predictions for denoisers trained on `N` samples.
//!
//! Everything is driven by the order parameter `q`, the positive solution of
//! `q = (1/d) Σ λ / (1 + λ N / (dq + Nc))`, where `c = 1/α̂` is the effective
//! ridge. Training-set averages of resolvent traces of `Id + α̂ Σ₀` then follow
//! in closed form from the ground-truth spectrum alone.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::covariance::{EmpiricalStats, SpectralCovariance};
use crate::error::{Error, Result};
use crate::numeric::compensated_sum;
use crate::schedule::NoiseSchedule;

/// Default residual tolerance of [`solve_q`].
pub const DEFAULT_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct ReplicaInput {
    eigenvalues: Vec<f64>,
    sample_count: usize,
    reg: f64,
}

impl ReplicaInput {
    /// Spectrum of the ground truth, training-set size and ridge `c = 1/α̂`.
    pub fn new(eigenvalues: &[f64], sample_count: usize, reg: f64) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::domain("spectrum is empty"));
        }
        if eigenvalues.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::domain("eigenvalues must be finite and non-negative"));
        }
        if eigenvalues.iter().all(|&l| l == 0.0) {
            return Err(Error::domain("spectrum is identically zero"));
        }
        if sample_count == 0 {
            return Err(Error::domain("sample count must be positive"));
        }
        if !(reg >= 0.0) || !reg.is_finite() {
            return Err(Error::domain(format!(
                "regularization must be finite and >= 0, got {reg}"
            )));
        }
        Ok(ReplicaInput {
            eigenvalues: eigenvalues.to_vec(),
            sample_count,
            reg,
        })
    }

    pub fn from_alpha_hat(eigenvalues: &[f64], sample_count: usize, alpha_hat: f64) -> Result<Self> {
        if !(alpha_hat > 0.0) {
            return Err(Error::domain("alphaHat must be positive"));
        }
        Self::new(eigenvalues, sample_count, 1.0 / alpha_hat)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Ridge `c = 1/α̂`.
    pub fn reg(&self) -> f64 {
        self.reg
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `N / d`.
    pub fn ratio(&self) -> f64 {
        self.sample_count as f64 / self.dim() as f64
    }

    pub fn mean_eigenvalue(&self) -> f64 {
        self.mean_of(|l| l)
    }

    fn mean_of(&self, f: impl Fn(f64) -> f64) -> f64 {
        compensated_sum(self.eigenvalues.iter().map(|&l| f(l))) / self.dim() as f64
    }

    /// Right-hand side of the self-consistency equation.
    pub fn fixed_point_rhs(&self, q: f64) -> f64 {
        let shift = q + self.ratio() * self.reg;
        if shift <= 0.0 {
            return 0.0;
        }
        // λ / (1 + λN/(dq + Nc)) = λP / (P + (N/d)λ) with P = q + Nc/d
        let a = self.ratio();
        self.mean_of(|l| l * shift / (shift + a * l))
    }

    /// `s(q) = (α̂(d/N - 1)q + 1) / (α̂(d/N)q + 1)`, written in terms of `c`.
    pub fn resolvent_from_q(&self, q: f64) -> f64 {
        let inv = 1.0 / self.ratio();
        ((inv - 1.0) * q + self.reg) / (inv * q + self.reg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplicaSolution {
    pub q: f64,
    /// `ḡ = (1/d)⟨Tr (Id + α̂Σ₀)^{-1}⟩`.
    pub g_bar: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub tol: f64,
    pub damping: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: DEFAULT_TOL,
            damping: 0.5,
            max_iter: 100_000,
        }
    }
}

/// Solve for `q` with the default damped iteration.
pub fn solve_q(input: &ReplicaInput, tol: f64) -> Result<ReplicaSolution> {
    solve_q_with(
        input,
        &SolverOptions {
            tol,
            ..SolverOptions::default()
        },
    )
}

pub fn solve_q_with(input: &ReplicaInput, options: &SolverOptions) -> Result<ReplicaSolution> {
    solve_from(input, options, input.mean_eigenvalue())
}

fn solve_from(input: &ReplicaInput, options: &SolverOptions, start: f64) -> Result<ReplicaSolution> {
    if !(options.tol > 0.0) {
        return Err(Error::domain("solver tolerance must be positive"));
    }
    let finish = |q: f64, iterations: usize| {
        let residual = input.fixed_point_rhs(q) - q;
        ReplicaSolution {
            q,
            g_bar: psi2(input, q),
            residual,
            iterations,
        }
    };
    // With c = 0 and N >= d the right-hand side has slope d/N <= 1 at the origin
    // and is concave, so zero is the only fixed point.
    if input.reg == 0.0 && input.sample_count >= input.dim() {
        return Ok(finish(0.0, 0));
    }
    let mut q = start;
    let mut residual = f64::INFINITY;
    for it in 1..=options.max_iter {
        let rhs = input.fixed_point_rhs(q);
        residual = rhs - q;
        if residual.abs() < options.tol {
            return Ok(finish(q, it));
        }
        q += options.damping * residual;
    }
    bisect(input, options).map_err(|_| Error::Solver {
        msg: format!("fixed point for q did not converge in {} iterations", options.max_iter),
        residual,
    })
}

/// Bracketed fallback on `[0, λ̄]`, where `rhs(q) - q` changes sign once.
fn bisect(input: &ReplicaInput, options: &SolverOptions) -> Result<ReplicaSolution> {
    let f = |q: f64| input.fixed_point_rhs(q) - q;
    let mut lo = 0.0;
    let mut hi = input.mean_eigenvalue();
    if f(hi) > 0.0 {
        return Err(Error::Solver {
            msg: "no sign change on [0, mean eigenvalue]".into(),
            residual: f(hi),
        });
    }
    for it in 1..=400 {
        let mid = 0.5 * (lo + hi);
        let r = f(mid);
        if r.abs() < options.tol || hi - lo < f64::EPSILON * hi {
            return Ok(ReplicaSolution {
                q: mid,
                g_bar: psi2(input, mid),
                residual: r,
                iterations: options.max_iter + it,
            });
        }
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Solver {
        msg: "bisection did not converge".into(),
        residual: f(0.5 * (lo + hi)),
    })
}

/// Solve from `λ̄/10` and `10 λ̄` and fail if the two roots differ by more than `1e-8`.
pub fn verify_unique(input: &ReplicaInput, options: &SolverOptions) -> Result<ReplicaSolution> {
    let mean = input.mean_eigenvalue();
    let low = solve_from(input, options, 0.1 * mean)?;
    let high = solve_from(input, options, 10.0 * mean)?;
    if (low.q - high.q).abs() > 1e-8 {
        return Err(Error::Solver {
            msg: format!("fixed point is not unique: {} vs {}", low.q, high.q),
            residual: (low.q - high.q).abs(),
        });
    }
    Ok(low)
}

/// The `n`-th element of the decreasing upper-bound series for `q`.
pub fn q_bound_series(input: &ReplicaInput, n: usize) -> f64 {
    let mut q = input.mean_eigenvalue();
    let inv = 1.0 / input.ratio();
    for _ in 0..n {
        let h = inv * q + input.reg;
        q = h * input.mean_of(|l| l / (l + h));
    }
    q
}

/// `q + N/(dα̂) = q + (N/d) c`.
fn shifted(input: &ReplicaInput, q: f64) -> f64 {
    q + input.ratio() * input.reg
}

fn psi2(input: &ReplicaInput, q: f64) -> f64 {
    let p = shifted(input, q);
    let a = input.ratio();
    input.mean_of(|l| if p == 0.0 && l == 0.0 { 1.0 } else { p / (p + a * l) })
}

/// Training-set averages of resolvent traces of `M = Id + α̂ Σ₀`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsiFunctions {
    /// `(1/d)⟨Tr M^{-2}⟩`.
    pub psi11: f64,
    /// `(1/d)⟨Tr Σ M^{-2}⟩`.
    pub psi12: f64,
    /// `(P²)[R₁ + (N/d) R_{3/2}² / χ]`, the symmetrized variant
    /// `(1/d)⟨Tr Σ^{1/2} M^{-1} Σ^{1/2} M^{-1}⟩`.
    pub psi12_symmetric: f64,
    /// `(1/d)⟨Tr M^{-1}⟩`.
    pub psi2: f64,
    pub r0: f64,
    pub r1: f64,
    pub r3_2: f64,
    pub r2: f64,
}

/// Resolvent-square averages at the solved `q`.
///
/// Fails when the susceptibility `1 - (N/d) R₂` is not positive.
pub fn psi_functions(input: &ReplicaInput, solution: &ReplicaSolution) -> Result<PsiFunctions> {
    let p = shifted(input, solution.q);
    if !(p > 0.0) {
        return Err(Error::domain("resolvent averages need q + Nc/d > 0"));
    }
    let a = input.ratio();
    let r = |k: f64| input.mean_of(|l| l.powf(k) / (p + a * l).powi(2));
    let (r0, r1, r3_2, r2) = (r(0.0), r(1.0), r(1.5), r(2.0));
    let chi = 1.0 - a * r2;
    if !(chi > 0.0) {
        return Err(Error::Solver {
            msg: format!("singular susceptibility: (N/d) R2 = {}", a * r2),
            residual: chi,
        });
    }
    let p2 = p * p;
    Ok(PsiFunctions {
        psi11: p2 * (r0 + a * r1 * r1 / chi),
        psi12: p2 * r1 / chi,
        psi12_symmetric: p2 * (r1 + a * r3_2 * r3_2 / chi),
        psi2: psi2(input, solution.q),
        r0,
        r1,
        r3_2,
        r2,
    })
}

/// Replica average of `(1/d) DKL(N(μ₀, Σ₀ + c Id) ‖ N(μ, Σ))` over training sets.
pub fn predict_dkl(input: &ReplicaInput) -> Result<f64> {
    let c = input.reg;
    if !(c > 0.0) {
        return Err(Error::domain(
            "the averaged divergence needs a positive regularization c",
        ));
    }
    if input.eigenvalues.contains(&0.0) {
        return Err(Error::domain("ground-truth covariance must be full rank"));
    }
    let q = solve_q(input, DEFAULT_TOL)?.q;
    let d = input.dim() as f64;
    let n = input.sample_count as f64;
    let inv = d / n;
    let growth = inv * q / c + 1.0;
    let first = 0.5 * q / (inv * q + c);
    let second = -compensated_sum(input.eigenvalues.iter().map(|&l| (c / l + 1.0 / growth).abs().ln())) / (2.0 * d);
    let third = -n / (2.0 * d) * growth.ln();
    let inv_sqrt = compensated_sum(input.eigenvalues.iter().map(|&l| l.powf(-0.5)));
    let inv_trace = compensated_sum(input.eigenvalues.iter().map(|&l| 1.0 / l));
    let fourth = (d + 2.0 * c.sqrt() * inv_sqrt + c * (n + 1.0) * inv_trace) / (2.0 * n * d);
    Ok(first + second + third + fourth)
}

/// Warn when `c Tr Σ^{-1} > d`, where the averaged divergence is dominated by
/// the regularization terms.
pub fn dkl_warning(input: &ReplicaInput) -> Option<String> {
    let inv_trace: f64 = input.eigenvalues.iter().map(|l| 1.0 / l).sum();
    let load = input.reg * inv_trace;
    (load > input.dim() as f64).then(|| {
        format!(
            "c * Tr(Sigma^-1) = {load:.3e} exceeds d = {}; prediction is dominated by the ridge terms",
            input.dim()
        )
    })
}

/// `DKL(N(μ₀, Σ₀ + c Id) ‖ N(μ, Σ))` for one training set (not divided by `d`).
pub fn empirical_dkl(truth: &SpectralCovariance, stats: &EmpiricalStats, c: f64) -> Result<f64> {
    let d = truth.dim();
    if stats.dim() != d {
        return Err(Error::domain("truth and statistics have different dimensions"));
    }
    if !truth.is_full_rank() {
        return Err(Error::domain("ground-truth covariance must be full rank"));
    }
    if !(c >= 0.0) {
        return Err(Error::domain("regularization must be non-negative"));
    }
    let lambda = truth.eigenvalues();
    let shifted: Vec<f64> = stats.cov_eigenvalues.iter().map(|l| l + c).collect();
    if shifted.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::domain("regularized training covariance is singular"));
    }
    let log_truth = compensated_sum(lambda.iter().map(|l| l.ln()));
    let log_model = compensated_sum(shifted.iter().map(|v| v.ln()));
    let overlap = truth.basis().tr_mul(&stats.cov_basis);
    let trace = compensated_sum((0..d).flat_map(|j| {
        let overlap = &overlap;
        let shifted = &shifted;
        (0..d).map(move |nu| shifted[nu] * overlap[(j, nu)].powi(2) / lambda[j])
    }));
    let delta: DVector<f64> = truth.basis().tr_mul(&(truth.mean() - &stats.mean));
    let mahalanobis = compensated_sum((0..d).map(|j| delta[j] * delta[j] / lambda[j]));
    Ok(0.5 * (log_truth - log_model + mahalanobis + trace - d as f64))
}

/// Replica predictions of the residual loss, test loss and `Δε_N`, together
/// with their per-step contributions.
#[derive(Clone, Debug)]
pub struct LossPrediction {
    pub residual: f64,
    pub test_loss: f64,
    pub delta_epsilon: f64,
    /// `q` at each step.
    pub q: Vec<f64>,
    pub residual_per_step: Vec<f64>,
    pub test_loss_per_step: Vec<f64>,
    pub delta_epsilon_per_step: Vec<f64>,
}

struct StepPrediction {
    q: f64,
    residual: f64,
    test_loss: f64,
    delta_epsilon: f64,
}

fn predict_step(spectrum: &[f64], n: usize, alpha_bar: f64, gamma: f64) -> Result<StepPrediction> {
    let stiff = 1.0 - alpha_bar + gamma;
    let alpha_hat = alpha_bar / stiff;
    let input = ReplicaInput::from_alpha_hat(spectrum, n, alpha_hat)?;
    let solution = solve_q(&input, DEFAULT_TOL)?;
    let psi = psi_functions(&input, &solution)?;
    let q = solution.q;
    let inv = 1.0 / input.ratio();
    let noise = 1.0 - alpha_bar;

    let residual = alpha_hat * q / (inv * alpha_hat * q + 1.0) + gamma / stiff * psi.psi2;
    let quadratic = (noise * psi.psi11 + alpha_bar * psi.psi12) / stiff;
    let test_loss = 1.0 + noise / stiff * (quadratic - 2.0 * psi.psi2) + gamma * noise / (stiff * stiff) * psi.psi11;

    // (1/d)⟨‖(W - W∞) x_t‖²⟩ with W∞ the optimum for the true covariance; the
    // training average of M^{-1} is diagonal in the truth basis with entries
    // 1/(1 + λκ), κ = (N/d)/(q + Nc/d).
    let p = shifted(&input, q);
    let a = input.ratio();
    let root = noise.sqrt();
    let cross = input.mean_of(|l| {
        let input_var = alpha_bar * l + noise;
        let w_inf = root / (alpha_bar * l + stiff);
        input_var * w_inf * p / (p + a * l)
    });
    let reference = input.mean_of(|l| {
        let input_var = alpha_bar * l + noise;
        let w_inf = root / (alpha_bar * l + stiff);
        w_inf * w_inf * input_var
    });
    let delta_epsilon =
        noise / (stiff * stiff) * (noise * psi.psi11 + alpha_bar * psi.psi12) - 2.0 * root / stiff * cross + reference;

    Ok(StepPrediction {
        q,
        residual,
        test_loss,
        delta_epsilon,
    })
}

/// Replica predictions for a ground-truth spectrum, training-set size and schedule.
pub fn predict_all(spectrum: &[f64], n: usize, schedule: &NoiseSchedule) -> Result<LossPrediction> {
    let steps: Vec<StepPrediction> = schedule
        .alpha_bar()
        .par_iter()
        .zip(schedule.gamma().par_iter())
        .map(|(&a, &g)| predict_step(spectrum, n, a, g))
        .collect::<Result<_>>()?;
    let mean = |f: &dyn Fn(&StepPrediction) -> f64| compensated_sum(steps.iter().map(f)) / steps.len() as f64;
    Ok(LossPrediction {
        residual: mean(&|s| s.residual),
        test_loss: mean(&|s| s.test_loss),
        delta_epsilon: mean(&|s| s.delta_epsilon),
        q: steps.iter().map(|s| s.q).collect(),
        residual_per_step: steps.iter().map(|s| s.residual).collect(),
        test_loss_per_step: steps.iter().map(|s| s.test_loss).collect(),
        delta_epsilon_per_step: steps.iter().map(|s| s.delta_epsilon).collect(),
    })
}

/// Replica residual and test loss of the optimal noise-prediction denoiser.
pub fn predict_losses(spectrum: &[f64], n: usize, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    let p = predict_all(spectrum, n, schedule)?;
    Ok((p.residual, p.test_loss))
}

/// Replica `Δε_N`: mean squared gap to the infinite-data denoiser, per dimension.
pub fn predict_delta_epsilon(spectrum: &[f64], n: usize, schedule: &NoiseSchedule) -> Result<f64> {
    Ok(predict_all(spectrum, n, schedule)?.delta_epsilon)
}
