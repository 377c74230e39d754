//! Flat `key = value` experiment configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::denoiser::Objective;
use crate::error::{Error, Result};
use crate::schedule::{RegCoupling, SigmaChoice, DEFAULT_BETA_RATIO, DEFAULT_ZETA_TOTAL};

/// How training statistics are estimated from a sampled training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Estimator {
    /// Second moment about the known population center.
    #[default]
    KnownCenter,
    /// Mean-subtracted `1/N` sample covariance.
    SampleMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SamplerKind {
    #[default]
    Iterative,
    OneStep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub d: usize,
    pub steps: usize,
    pub k: Vec<f64>,
    /// Data matrix whose covariance spectrum replaces the power law.
    pub spectrum: Option<PathBuf>,
    pub c: Vec<f64>,
    pub zeta: f64,
    pub beta_ratio: f64,
    pub coupling: RegCoupling,
    pub seed: u64,
    pub n: Vec<usize>,
    pub tau: Vec<f64>,
    pub eta: f64,
    pub sigma: SigmaChoice,
    pub objective: Objective,
    pub draws: usize,
    pub out: Option<PathBuf>,
    pub estimator: Estimator,
    pub rotate: bool,
    pub noise_draws: usize,
    pub test_samples: usize,
    pub reference_n: usize,
    pub samples: usize,
    pub sampler: SamplerKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            d: 100,
            steps: 100,
            k: vec![1.0],
            spectrum: None,
            c: vec![0.0],
            zeta: DEFAULT_ZETA_TOTAL,
            beta_ratio: DEFAULT_BETA_RATIO,
            coupling: RegCoupling::AlphaBar,
            seed: 0,
            n: vec![100],
            tau: log_grid(-1.0, 4.0, 21),
            eta: 1.0,
            sigma: SigmaChoice::MatchBeta,
            objective: Objective::NoisePrediction,
            draws: 10,
            out: None,
            estimator: Estimator::KnownCenter,
            rotate: false,
            noise_draws: 0,
            test_samples: 0,
            reference_n: 0,
            samples: 1000,
            sampler: SamplerKind::Iterative,
        }
    }
}

/// `count` points spaced evenly in `log10` between `10^lo` and `10^hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![10f64.powf(lo)],
        _ => (0..count)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (count - 1) as f64))
            .collect(),
    }
}

fn config_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn scalar<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err(line, format!("invalid value {value:?} for {key}")))
}

fn list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| scalar(line, key, v)).collect()
}

fn boolean(line: usize, key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(config_err(line, format!("invalid boolean {other:?} for {key}"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| config_err(line, "expected `key = value`"))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(config_err(line, format!("duplicate key {key}")));
            }
            match key {
                "d" => cfg.d = scalar(line, key, value)?,
                "T" | "steps" => cfg.steps = scalar(line, key, value)?,
                "k" => cfg.k = list(line, key, value)?,
                "spectrum" => cfg.spectrum = Some(PathBuf::from(value)),
                "c" => cfg.c = list(line, key, value)?,
                "zeta" => cfg.zeta = scalar(line, key, value)?,
                "beta_ratio" => cfg.beta_ratio = scalar(line, key, value)?,
                "coupling" => {
                    cfg.coupling = match value {
                        "alpha-bar" => RegCoupling::AlphaBar,
                        "sqrt-alpha-bar" => RegCoupling::SqrtAlphaBar,
                        other => return Err(config_err(line, format!("unknown coupling {other:?}"))),
                    }
                }
                "seed" => cfg.seed = scalar(line, key, value)?,
                "N" => cfg.n = list(line, key, value)?,
                "tau" => cfg.tau = list(line, key, value)?,
                "tau_log" => {
                    let spec: Vec<f64> = list(line, key, value)?;
                    if spec.len() != 3 || spec[2] < 1.0 || spec[2].fract() != 0.0 {
                        return Err(config_err(line, "tau_log expects `lo, hi, count`"));
                    }
                    cfg.tau = log_grid(spec[0], spec[1], spec[2] as usize);
                }
                "eta" => cfg.eta = scalar(line, key, value)?,
                "sigma" => {
                    cfg.sigma = match value {
                        "zero" => SigmaChoice::Zero,
                        "match-beta" => SigmaChoice::MatchBeta,
                        other => return Err(config_err(line, format!("unknown sigma choice {other:?}"))),
                    }
                }
                "objective" => {
                    cfg.objective = match value {
                        "noise" => Objective::NoisePrediction,
                        "data" => Objective::DataPrediction,
                        other => return Err(config_err(line, format!("unknown objective {other:?}"))),
                    }
                }
                "draws" => cfg.draws = scalar(line, key, value)?,
                "out" => cfg.out = Some(PathBuf::from(value)),
                "estimator" => {
                    cfg.estimator = match value {
                        "known-center" => Estimator::KnownCenter,
                        "sample-mean" => Estimator::SampleMean,
                        other => return Err(config_err(line, format!("unknown estimator {other:?}"))),
                    }
                }
                "rotate" => cfg.rotate = boolean(line, key, value)?,
                "noise_draws" => cfg.noise_draws = scalar(line, key, value)?,
                "test_samples" => cfg.test_samples = scalar(line, key, value)?,
                "reference_n" => cfg.reference_n = scalar(line, key, value)?,
                "samples" => cfg.samples = scalar(line, key, value)?,
                "sampler" => {
                    cfg.sampler = match value {
                        "iterative" => SamplerKind::Iterative,
                        "one-step" => SamplerKind::OneStep,
                        other => return Err(config_err(line, format!("unknown sampler {other:?}"))),
                    }
                }
                other => return Err(config_err(line, format!("unknown key {other:?}"))),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Check sizes and ranges; called after command-line overrides.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.d == 0 {
            return fail("d must be positive");
        }
        if self.steps < 2 {
            return fail("T must be at least 2");
        }
        if self.n.is_empty() || self.n.contains(&0) {
            return fail("N must be a non-empty list of positive sizes");
        }
        if self.k.is_empty() || self.k.iter().any(|k| !(*k >= 0.0) || !k.is_finite()) {
            return fail("k must be a non-empty list of non-negative exponents");
        }
        if self.c.is_empty() || self.c.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return fail("c must be a non-empty list of non-negative values");
        }
        if !(self.zeta > 0.0) || !self.zeta.is_finite() {
            return fail("zeta must be positive");
        }
        if !(0.0..=1.0).contains(&self.beta_ratio) {
            return fail("beta_ratio must lie in [0, 1]");
        }
        if self.tau.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return fail("tau values must be non-negative");
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return fail("eta must be positive");
        }
        if self.draws == 0 {
            return fail("draws must be positive");
        }
        if self.samples == 0 {
            return fail("samples must be positive");
        }
        if let Some(out) = &self.out {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                if !parent.is_dir() {
                    return Err(Error::Config(format!(
                        "output directory {} does not exist",
                        parent.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_value_kinds() {
        let cfg = ExperimentConfig::parse(
            "# sweep\n d = 50\nT=20\nk = 0, 1,2\nN = 10,100 # trailing comment\nc = 1e-4\n\
             sigma = zero\nobjective = data\nestimator = sample-mean\nrotate = true\ntau_log = 0, 2, 3\n",
        )
        .unwrap();
        assert_eq!(cfg.d, 50);
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.k, vec![0.0, 1.0, 2.0]);
        assert_eq!(cfg.n, vec![10, 100]);
        assert_eq!(cfg.c, vec![1e-4]);
        assert_eq!(cfg.sigma, SigmaChoice::Zero);
        assert_eq!(cfg.objective, Objective::DataPrediction);
        assert_eq!(cfg.estimator, Estimator::SampleMean);
        assert!(cfg.rotate);
        assert_eq!(cfg.tau.len(), 3);
        assert!((cfg.tau[2] - 100.0).abs() < 1e-12);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(ExperimentConfig::parse("d 5"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("d = x"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("d = 1\nd = 2"), Err(Error::Config(_))));
        let cfg = ExperimentConfig::parse("N = 0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
