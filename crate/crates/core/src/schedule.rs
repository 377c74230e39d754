//! Discrete noise schedules and their continuous-time view.

use crate::error::{Error, Result};

/// Default ratio `β̂_min / β̂_max` of the linear continuous-time rate.
pub const DEFAULT_BETA_RATIO: f64 = 0.005;
/// Default total noise `ζ(1)`, so that `ᾱ(1) = e^{-10}`.
pub const DEFAULT_ZETA_TOTAL: f64 = 10.0;

/// How the ridge strength follows the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RegCoupling {
    /// `γ_t = c · ᾱ_t`, equivalent to training on `Σ₀ + c Id`.
    #[default]
    AlphaBar,
    /// `γ_t = c · √ᾱ_t`.
    SqrtAlphaBar,
}

/// Sampling noise used by the reverse iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SigmaChoice {
    /// Deterministic reverse process, `σ_t = 0`.
    Zero,
    /// `σ_t² = β_t`.
    #[default]
    MatchBeta,
}

#[derive(Clone, Debug, PartialEq)]
enum Profile {
    /// `β̂(t) = min + (max - min) t`.
    Linear { min: f64, max: f64 },
    /// User-supplied `ᾱ`; the continuous view interpolates `ζ` linearly.
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    sigma: Vec<f64>,
    gamma: Vec<f64>,
    reg_scale: f64,
    coupling: RegCoupling,
    profile: Profile,
}

impl NoiseSchedule {
    /// Linear-rate schedule with `ζ(1) = zeta_total` and `γ_t = c ᾱ_t`.
    pub fn new(steps: usize, zeta_total: f64, reg_scale: f64) -> Result<Self> {
        Self::linear(steps, zeta_total, reg_scale, DEFAULT_BETA_RATIO, RegCoupling::AlphaBar)
    }

    pub fn linear(
        steps: usize,
        zeta_total: f64,
        reg_scale: f64,
        beta_ratio: f64,
        coupling: RegCoupling,
    ) -> Result<Self> {
        if steps < 2 {
            return Err(Error::domain(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(zeta_total > 0.0) || !zeta_total.is_finite() {
            return Err(Error::domain(format!("zetaTotal must be positive, got {zeta_total}")));
        }
        if !(0.0..=1.0).contains(&beta_ratio) {
            return Err(Error::domain(format!(
                "beta ratio must lie in [0, 1], got {beta_ratio}"
            )));
        }
        let max = 2.0 * zeta_total / (1.0 + beta_ratio);
        let profile = Profile::Linear {
            min: beta_ratio * max,
            max,
        };
        let alpha_bar = (1..=steps)
            .map(|t| (-zeta_linear(t as f64 / steps as f64, beta_ratio * max, max)).exp())
            .collect();
        Self::build(alpha_bar, reg_scale, coupling, profile)
    }

    /// Schedule from an explicit `ᾱ_1 > … > ᾱ_T` in `(0, 1)`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, reg_scale: f64, coupling: RegCoupling) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::domain("schedule needs at least 2 steps"));
        }
        Self::build(alpha_bar, reg_scale, coupling, Profile::Custom)
    }

    fn build(alpha_bar: Vec<f64>, reg_scale: f64, coupling: RegCoupling, profile: Profile) -> Result<Self> {
        if !(reg_scale >= 0.0) || !reg_scale.is_finite() {
            return Err(Error::domain(format!(
                "regularization scale must be >= 0, got {reg_scale}"
            )));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::domain("alphaBar must lie strictly inside (0, 1)"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::domain("alphaBar must be strictly decreasing"));
        }
        let beta: Vec<f64> = alpha_bar
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                1.0 - a / prev
            })
            .collect();
        let gamma = alpha_bar
            .iter()
            .map(|&a| match coupling {
                RegCoupling::AlphaBar => reg_scale * a,
                RegCoupling::SqrtAlphaBar => reg_scale * a.sqrt(),
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule {
            alpha_bar,
            beta,
            sigma,
            gamma,
            reg_scale,
            coupling,
            profile,
        })
    }

    /// Set `σ_t` from one of the standard choices.
    pub fn with_sigma(mut self, choice: SigmaChoice) -> Self {
        self.sigma = match choice {
            SigmaChoice::Zero => vec![0.0; self.steps()],
            SigmaChoice::MatchBeta => self.beta.iter().map(|b| b.sqrt()).collect(),
        };
        self
    }

    pub fn with_sigma_values(mut self, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != self.steps() || sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::domain("sigma must have one non-negative entry per step"));
        }
        self.sigma = sigma;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `ᾱ_t` for `t = 1..=T` stored at index `t - 1`.
    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn reg_scale(&self) -> f64 {
        self.reg_scale
    }

    pub fn coupling(&self) -> RegCoupling {
        self.coupling
    }

    /// `ᾱ_{t-1}` for the step stored at `index`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, index: usize) -> f64 {
        if index == 0 {
            1.0
        } else {
            self.alpha_bar[index - 1]
        }
    }

    /// Effective signal-to-noise `α̂_t = ᾱ_t / (1 - ᾱ_t + γ_t)`.
    pub fn effective_snr(&self) -> Vec<f64> {
        self.alpha_bar
            .iter()
            .zip(&self.gamma)
            .map(|(a, g)| a / (1.0 - a + g))
            .collect()
    }

    /// Continuous rate `β̂(t)` for `t ∈ [0, 1]`, if the schedule has one.
    pub fn beta_hat(&self, t: f64) -> Option<f64> {
        match self.profile {
            Profile::Linear { min, max } => Some(min + (max - min) * t),
            Profile::Custom => None,
        }
    }

    /// Integrated rate `ζ(t) = ∫₀ᵗ β̂`.
    pub fn zeta(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match self.profile {
            Profile::Linear { min, max } => zeta_linear(t, min, max),
            Profile::Custom => {
                let steps = self.steps() as f64;
                let x = t * steps;
                let lo = x.floor() as usize;
                let zeta_at = |i: usize| if i == 0 { 0.0 } else { -self.alpha_bar[i - 1].ln() };
                if lo >= self.steps() {
                    return zeta_at(self.steps());
                }
                let frac = x - lo as f64;
                zeta_at(lo) * (1.0 - frac) + zeta_at(lo + 1) * frac
            }
        }
    }

    /// Continuous `ᾱ(t) = e^{-ζ(t)}`; equals `ᾱ_t` at `t = step / T`.
    pub fn alpha_bar_continuous(&self, t: f64) -> f64 {
        (-self.zeta(t)).exp()
    }

    pub fn max_beta(&self) -> f64 {
        self.beta.iter().copied().fold(0.0, f64::max)
    }
}

fn zeta_linear(t: f64, min: f64, max: f64) -> f64 {
    min * t + 0.5 * (max - min) * t * t
}
