//! Sweep implementations behind each subcommand.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::config::{Estimator, ExperimentConfig, SamplerKind};
use crate::covariance::{empirical_stats, sample_gaussian, EmpiricalStats, SpectralCovariance};
use crate::denoiser::{
    gradient_flow_weights, loss_gap_derivative, matched_data_init, optimal_data_denoiser, optimal_noise_denoiser,
    prediction_identity_residual, residual_loss, test_loss, test_loss_per_step, train_loss, train_loss_per_step,
    Objective, TrainingState,
};
use crate::error::{Error, Result};
use crate::io::{load_data_matrix, Cell, Table};
use crate::metrics::{delta_epsilon_empirical, monte_carlo_loss, Rows};
use crate::numeric::Estimate;
use crate::replica::{self, ReplicaInput};
use crate::sampler::{sample_iterative, sample_one_step};
use crate::schedule::NoiseSchedule;
use crate::seed::{derive_seed, streams};

/// One observation of a sweep in long format.
#[derive(Clone, Debug)]
pub struct ExperimentRecord {
    pub d: usize,
    pub k: Option<f64>,
    pub c: f64,
    pub n: usize,
    pub seed: u64,
    pub draw: Option<usize>,
    pub tau: Option<f64>,
    pub t: Option<usize>,
    pub metric: &'static str,
    pub value: f64,
    pub std_error: Option<f64>,
    pub error: Option<String>,
}

pub const RECORD_COLUMNS: [&str; 12] = [
    "d",
    "k",
    "c",
    "N",
    "seed",
    "draw",
    "tau",
    "t",
    "metric",
    "value",
    "std_error",
    "error",
];

fn cmp_opt<T: PartialOrd>(a: &Option<T>, b: &Option<T>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => x.partial_cmp(y).unwrap_or(Ordering::Equal),
    }
}

/// Order by `(N, draw, τ)`, then by the remaining keys, so output does not
/// depend on scheduling.
pub fn sort_records(records: &mut [ExperimentRecord]) {
    records.sort_by(|a, b| {
        a.n.cmp(&b.n)
            .then_with(|| cmp_opt(&a.draw, &b.draw))
            .then_with(|| cmp_opt(&a.tau, &b.tau))
            .then_with(|| cmp_opt(&a.k, &b.k))
            .then_with(|| a.c.total_cmp(&b.c))
            .then_with(|| cmp_opt(&a.t, &b.t))
            .then_with(|| a.metric.cmp(b.metric))
    });
}

pub fn records_table(records: &[ExperimentRecord]) -> Table {
    let mut table = Table::new(&RECORD_COLUMNS);
    for r in records {
        table.push(vec![
            r.d.into(),
            r.k.into(),
            r.c.into(),
            r.n.into(),
            r.seed.into(),
            r.draw.into(),
            r.tau.into(),
            r.t.map(|t| t + 1).into(),
            r.metric.into(),
            r.value.into(),
            r.std_error.into(),
            r.error
                .as_deref()
                .map(|e| Cell::Text(e.replace(',', ";")))
                .unwrap_or(Cell::Empty),
        ]);
    }
    table
}

/// Ground truth for one sweep: a power law per `k`, or a spectrum taken from
/// a data file.
pub struct Truth {
    pub k: Option<f64>,
    pub model: SpectralCovariance,
}

pub fn truths(cfg: &ExperimentConfig) -> Result<Vec<Truth>> {
    if let Some(path) = &cfg.spectrum {
        let data = load_data_matrix(path)?;
        let stats = empirical_stats(&data)?;
        let d = stats.dim();
        let model = SpectralCovariance::new(
            stats.cov_eigenvalues.clone(),
            DMatrix::identity(d, d),
            DVector::zeros(d),
        )?;
        return Ok(vec![Truth {
            k: None,
            model: rotate(cfg, model),
        }]);
    }
    cfg.k
        .iter()
        .map(|&k| {
            Ok(Truth {
                k: Some(k),
                model: rotate(cfg, SpectralCovariance::powerlaw(cfg.d, k)?),
            })
        })
        .collect()
}

fn rotate(cfg: &ExperimentConfig, model: SpectralCovariance) -> SpectralCovariance {
    if cfg.rotate {
        model.with_random_rotation(derive_seed(cfg.seed, streams::ROTATION, 0))
    } else {
        model
    }
}

fn training_seed(cfg: &ExperimentConfig, n: usize, draw: usize) -> u64 {
    derive_seed(cfg.seed, streams::TRAINING, ((n as u64) << 20) | draw as u64)
}

/// Training set for `(N, draw)`; the same rows are reused across `k` and `c`.
pub fn training_set(cfg: &ExperimentConfig, truth: &SpectralCovariance, n: usize, draw: usize) -> DMatrix<f64> {
    sample_gaussian(truth, n, training_seed(cfg, n, draw))
}

/// Statistics used to train denoisers: centered on the known mean unless the
/// sample-mean estimator is configured.
pub fn training_stats(
    cfg: &ExperimentConfig,
    truth: &SpectralCovariance,
    data: &DMatrix<f64>,
) -> Result<EmpiricalStats> {
    match cfg.estimator {
        Estimator::KnownCenter => EmpiricalStats::about_center(data, truth.mean()),
        Estimator::SampleMean => empirical_stats(data),
    }
}

/// Statistics for the divergence sweep: the generated mean is always the
/// sample mean; the covariance follows the configured estimator.
fn dkl_stats(cfg: &ExperimentConfig, truth: &SpectralCovariance, data: &DMatrix<f64>) -> Result<EmpiricalStats> {
    let sample = empirical_stats(data)?;
    match cfg.estimator {
        Estimator::KnownCenter => Ok(EmpiricalStats::about_center(data, truth.mean())?.with_mean(sample.mean)),
        Estimator::SampleMean => Ok(sample),
    }
}

fn schedule(cfg: &ExperimentConfig, c: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(cfg.steps, cfg.zeta, c, cfg.beta_ratio, cfg.coupling)
}

struct Cell4<'a> {
    truth: &'a Truth,
    c: f64,
    n: usize,
    draw: usize,
}

fn cells<'a>(cfg: &ExperimentConfig, truths: &'a [Truth]) -> Vec<Cell4<'a>> {
    let mut out = Vec::new();
    for truth in truths {
        for &c in &cfg.c {
            for &n in &cfg.n {
                for draw in 0..cfg.draws {
                    out.push(Cell4 { truth, c, n, draw });
                }
            }
        }
    }
    out
}

struct Recorder<'a> {
    cfg: &'a ExperimentConfig,
    d: usize,
    k: Option<f64>,
    c: f64,
    n: usize,
    draw: Option<usize>,
    out: Vec<ExperimentRecord>,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a ExperimentConfig, truth: &Truth, c: f64, n: usize, draw: Option<usize>) -> Self {
        Recorder {
            cfg,
            d: truth.model.dim(),
            k: truth.k,
            c,
            n,
            draw,
            out: Vec::new(),
        }
    }

    fn full(&mut self, metric: &'static str, tau: Option<f64>, t: Option<usize>, value: Result<f64>, se: Option<f64>) {
        let (value, error) = match value {
            Ok(v) => (v, None),
            Err(e) => (f64::NAN, Some(e.to_string())),
        };
        self.out.push(ExperimentRecord {
            d: self.d,
            k: self.k,
            c: self.c,
            n: self.n,
            seed: self.cfg.seed,
            draw: self.draw,
            tau,
            t,
            metric,
            value,
            std_error: se,
            error,
        });
    }

    fn value(&mut self, metric: &'static str, value: Result<f64>) {
        self.full(metric, None, None, value, None);
    }

    fn estimate(&mut self, metric: &'static str, est: Result<Estimate>) {
        match est {
            Ok(e) => self.full(metric, None, None, Ok(e.mean), Some(e.std_error)),
            Err(err) => self.full(metric, None, None, Err(err), None),
        }
    }
}

fn finish(mut records: Vec<ExperimentRecord>) -> Table {
    sort_records(&mut records);
    records_table(&records)
}

/// Sorted eigenvalues of each configured ground truth.
pub fn cmd_spectrum(cfg: &ExperimentConfig) -> Result<Table> {
    let mut table = Table::new(&["k", "rank", "eigenvalue"]);
    for truth in truths(cfg)? {
        for (i, l) in truth.model.eigenvalues().iter().enumerate() {
            table.push(vec![truth.k.into(), (i + 1).into(), (*l).into()]);
        }
    }
    Ok(table)
}

/// Divergence of the regularized empirical Gaussian from the truth, per
/// draw and averaged, next to the replica prediction.
pub fn cmd_sweep_dkl(cfg: &ExperimentConfig) -> Result<Table> {
    let truths = truths(cfg)?;
    let per_draw: Vec<Vec<ExperimentRecord>> = cells(cfg, &truths)
        .par_iter()
        .map(|cell| {
            let model = &cell.truth.model;
            let data = training_set(cfg, model, cell.n, cell.draw);
            let mut rec = Recorder::new(cfg, cell.truth, cell.c, cell.n, Some(cell.draw));
            let value = dkl_stats(cfg, model, &data)
                .and_then(|stats| replica::empirical_dkl(model, &stats, cell.c))
                .map(|v| v / model.dim() as f64);
            rec.value("dkl", value);
            rec.out
        })
        .collect();
    let mut records: Vec<ExperimentRecord> = per_draw.into_iter().flatten().collect();

    for truth in &truths {
        for &c in &cfg.c {
            for &n in &cfg.n {
                let values: Vec<f64> = records
                    .iter()
                    .filter(|r| r.k == truth.k && r.c == c && r.n == n && r.error.is_none())
                    .map(|r| r.value)
                    .collect();
                let mut rec = Recorder::new(cfg, truth, c, n, None);
                rec.estimate("dkl_mean", Ok(Estimate::from_samples(&values)));
                let input = || ReplicaInput::new(truth.model.eigenvalues().as_slice(), n, c);
                rec.value("dkl_predicted", input().and_then(|i| replica::predict_dkl(&i)));
                rec.value(
                    "q",
                    input()
                        .and_then(|i| replica::solve_q(&i, replica::DEFAULT_TOL))
                        .map(|s| s.q),
                );
                records.extend(rec.out);
            }
        }
    }
    Ok(finish(records))
}

fn tau_star(taus: &[f64], losses: &[f64]) -> Option<f64> {
    losses
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| taus[i])
}

/// Train/test losses: closed form, Monte Carlo, replica, per-step slices and
/// gradient-flow curves with the optimal stopping time.
pub fn cmd_loss_curves(cfg: &ExperimentConfig) -> Result<Table> {
    let truths = truths(cfg)?;
    let schedules: Vec<NoiseSchedule> = cfg.c.iter().map(|&c| schedule(cfg, c)).collect::<Result<_>>()?;
    let sched_for = |c: f64| &schedules[cfg.c.iter().position(|&x| x == c).unwrap()];

    let per_draw: Vec<Result<Vec<ExperimentRecord>>> = cells(cfg, &truths)
        .par_iter()
        .map(|cell| {
            let model = &cell.truth.model;
            let sched = sched_for(cell.c);
            let data = training_set(cfg, model, cell.n, cell.draw);
            let stats = training_stats(cfg, model, &data)?;
            let mut rec = Recorder::new(cfg, cell.truth, cell.c, cell.n, Some(cell.draw));

            let den = match cfg.objective {
                Objective::NoisePrediction => optimal_noise_denoiser(&stats, sched),
                Objective::DataPrediction => optimal_data_denoiser(&stats, sched),
            };
            rec.value("train_loss", Ok(residual_loss(&stats, sched, cfg.objective)));
            rec.value("test_loss", Ok(test_loss(&den, model)));
            for (t, (tr, te)) in train_loss_per_step(&den, &stats)
                .into_iter()
                .zip(test_loss_per_step(&den, model))
                .enumerate()
            {
                rec.full("train_loss_step", None, Some(t), Ok(tr), None);
                rec.full("test_loss_step", None, Some(t), Ok(te), None);
            }
            if cfg.noise_draws > 0 {
                let mc_seed = derive_seed(training_seed(cfg, cell.n, cell.draw), streams::NOISE, 0);
                rec.estimate(
                    "train_loss_mc",
                    monte_carlo_loss(&den, &Rows(&data), cfg.noise_draws, mc_seed),
                );
                rec.estimate(
                    "test_loss_mc",
                    monte_carlo_loss(&den, model, cfg.noise_draws, mc_seed ^ 1),
                );
            }
            if cfg.reference_n > 0 && cfg.test_samples > 0 && cfg.objective == Objective::NoisePrediction {
                let ref_seed = derive_seed(cfg.seed, streams::REFERENCE, 0);
                let reference = sample_gaussian(model, cfg.reference_n, ref_seed);
                let ref_den = optimal_noise_denoiser(&training_stats(cfg, model, &reference)?, sched);
                let test_seed = derive_seed(training_seed(cfg, cell.n, cell.draw), streams::TEST, 0);
                let test = sample_gaussian(model, cfg.test_samples, test_seed);
                rec.estimate("delta_eps", delta_epsilon_empirical(&den, &ref_den, &test, test_seed));
            }
            if stats.mean.iter().all(|&m| m == 0.0) {
                let state = TrainingState::new(0.0, cfg.eta);
                for &tau in &cfg.tau {
                    let trained = gradient_flow_weights(&stats, sched, &state.at(tau), cfg.objective)?;
                    rec.full(
                        "train_loss_tau",
                        Some(tau),
                        None,
                        Ok(train_loss(&trained, &stats)),
                        None,
                    );
                    rec.full("test_loss_tau", Some(tau), None, Ok(test_loss(&trained, model)), None);
                    if cfg.objective == Objective::NoisePrediction {
                        let slope = loss_gap_derivative(&stats, model, sched, &state.at(tau));
                        rec.full("gap_derivative_tau", Some(tau), None, slope, None);
                    }
                }
            }
            Ok(rec.out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_draw {
        records.extend(r?);
    }

    for truth in &truths {
        for &c in &cfg.c {
            let sched = sched_for(c);
            for &n in &cfg.n {
                let mut rec = Recorder::new(cfg, truth, c, n, None);
                if cfg.objective == Objective::NoisePrediction {
                    match replica::predict_all(truth.model.eigenvalues().as_slice(), n, sched) {
                        Ok(p) => {
                            rec.value("train_loss_predicted", Ok(p.residual));
                            rec.value("test_loss_predicted", Ok(p.test_loss));
                            rec.value("delta_eps_predicted", Ok(p.delta_epsilon));
                        }
                        Err(e) => rec.value("test_loss_predicted", Err(e)),
                    }
                }
                let mean_curve: Vec<f64> = cfg
                    .tau
                    .iter()
                    .map(|&tau| {
                        let v: Vec<f64> = records
                            .iter()
                            .filter(|r| {
                                r.k == truth.k
                                    && r.c == c
                                    && r.n == n
                                    && r.metric == "test_loss_tau"
                                    && r.tau == Some(tau)
                            })
                            .map(|r| r.value)
                            .collect();
                        if v.is_empty() {
                            f64::NAN
                        } else {
                            v.iter().sum::<f64>() / v.len() as f64
                        }
                    })
                    .collect();
                for (&tau, &m) in cfg.tau.iter().zip(&mean_curve) {
                    if m.is_finite() {
                        rec.full("test_loss_tau_mean", Some(tau), None, Ok(m), None);
                    }
                }
                if let Some(best) = tau_star(&cfg.tau, &mean_curve) {
                    rec.value("tau_star", Ok(best));
                }
                records.extend(rec.out);
            }
        }
    }
    Ok(finish(records))
}

/// Noise- and data-prediction training side by side with matched
/// initialization, plus the residual of the identity linking them.
pub fn cmd_compare_objectives(cfg: &ExperimentConfig) -> Result<Table> {
    if cfg.estimator != Estimator::KnownCenter {
        return Err(Error::Config(
            "compare-objectives needs centered data (estimator = known-center)".into(),
        ));
    }
    let truths = truths(cfg)?;
    let schedules: Vec<NoiseSchedule> = cfg.c.iter().map(|&c| schedule(cfg, c)).collect::<Result<_>>()?;
    let per_draw: Vec<Result<Vec<ExperimentRecord>>> = cells(cfg, &truths)
        .par_iter()
        .map(|cell| {
            let model = &cell.truth.model;
            let sched = &schedules[cfg.c.iter().position(|&x| x == cell.c).unwrap()];
            let data = training_set(cfg, model, cell.n, cell.draw);
            let stats = training_stats(cfg, model, &data)?;
            let mut rec = Recorder::new(cfg, cell.truth, cell.c, cell.n, Some(cell.draw));
            let zero = DMatrix::zeros(sched.steps(), stats.dim());
            let noise_state = TrainingState::new(0.0, cfg.eta);
            let data_state = TrainingState::new(0.0, cfg.eta).with_init(matched_data_init(sched, &zero));
            for &tau in &cfg.tau {
                let eps = gradient_flow_weights(&stats, sched, &noise_state.at(tau), Objective::NoisePrediction)?;
                let f = gradient_flow_weights(&stats, sched, &data_state.at(tau), Objective::DataPrediction)?;
                let tau = Some(tau);
                rec.full("train_loss_noise", tau, None, Ok(train_loss(&eps, &stats)), None);
                rec.full("test_loss_noise", tau, None, Ok(test_loss(&eps, model)), None);
                rec.full("train_loss_data", tau, None, Ok(train_loss(&f, &stats)), None);
                rec.full("test_loss_data", tau, None, Ok(test_loss(&f, model)), None);
                rec.full(
                    "identity_residual",
                    tau,
                    None,
                    Ok(prediction_identity_residual(&eps, &f)),
                    None,
                );
            }
            Ok(rec.out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_draw {
        records.extend(r?);
    }
    Ok(finish(records))
}

/// Generated samples from a denoiser trained on the first configured
/// `(k, c, N)` with training draw 0.
pub fn cmd_sample(cfg: &ExperimentConfig) -> Result<DMatrix<f64>> {
    let truths = truths(cfg)?;
    let truth = &truths[0].model;
    let c = cfg.c[0];
    let n = cfg.n[0];
    let data = training_set(cfg, truth, n, 0);
    let stats = training_stats(cfg, truth, &data)?;
    let seed = derive_seed(cfg.seed, streams::SAMPLING, 0);
    match cfg.sampler {
        SamplerKind::OneStep => {
            let mut shifted = stats.clone();
            shifted.cov_eigenvalues.add_scalar_mut(c);
            Ok(sample_one_step(&shifted, cfg.samples, seed))
        }
        SamplerKind::Iterative => {
            let den = optimal_noise_denoiser(&stats, &schedule(cfg, c)?);
            sample_iterative(&den, cfg.samples, seed, cfg.sigma)
        }
    }
}
