//! Seeded Monte-Carlo sweeps of ML error against the averaged bounds.
//!
//! Bit draw `d` of a bound average uses substream `d` of the plan seed;
//! estimation trial `t` at sweep point `p` uses `trial_stream(p + 1, t)`, so
//! the two families never share a stream.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{ml_estimate, LikelihoodEvaluator, SearchSpec};
use crate::fim_crb::{
    ecrbob_sweep, fim_mismatched, mean_and_stderr, Component, MismatchPair, MAX_SINGULAR_FRACTION,
    MIN_WEIGHT_COVERAGE,
};
use crate::geometry::jacobian;
use crate::rng::{substream, trial_stream};
use crate::scalar::{count, lit, to_f64, Real};
use crate::signal_model::{Decay, Scenario, SignalPerturbation};
use crate::waveform::random_bits;

/// Largest fraction of failed estimation trials before a point is flagged.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

/// Sweep configuration shared by every experiment.
#[derive(Debug, Clone)]
pub struct ExperimentPlan<T: Real> {
    pub scenario: Scenario<T>,
    pub scnr_db: Vec<T>,
    /// ML trials per sweep point; zero computes bounds only.
    pub trials: usize,
    /// Bit draws averaged by the bound at each point.
    pub bit_draws: usize,
    pub seed: u64,
    pub search: SearchSpec<T>,
    /// Variance of the assumed-signal error in the mismatch experiment.
    pub mismatch_variance: T,
    /// Importance samples per draw for the mismatched information.
    pub mismatch_samples: usize,
}

impl<T: Real> ExperimentPlan<T> {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.scnr_db.is_empty() {
            return Err(Error::invalid("experiment", "the SCNR grid is empty"));
        }
        if self.scnr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("experiment", "SCNR values must be finite"));
        }
        if self.bit_draws == 0 {
            return Err(Error::invalid("experiment", "at least one bit draw is required"));
        }
        if !(self.mismatch_variance >= T::zero()) {
            return Err(Error::invalid("experiment", "mismatch variance must be non-negative"));
        }
        if self.trials > 0 {
            self.search.validate()?;
            if !self.search.contains(&self.scenario.truth) {
                return Err(Error::invalid("search box", "the box does not contain the true target state"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentStats<T: Real> {
    pub component: Component,
    pub rmse: Option<T>,
    pub rmse_stderr: Option<T>,
    pub recrbob: Option<T>,
    pub recrbob_stderr: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint<T: Real> {
    pub scnr_db: T,
    /// One entry per `Component::ALL`, in that order.
    pub stats: Vec<ComponentStats<T>>,
    pub trials: usize,
    pub failures: usize,
    /// Bound draws excluded as singular or unstable.
    pub bound_failures: usize,
    pub bound_draws: usize,
    /// Too many failed trials or bound draws for the entry to be trusted.
    pub flagged: bool,
}

impl<T: Real> SweepPoint<T> {
    pub fn get(&self, component: Component) -> &ComponentStats<T> {
        self.stats.iter().find(|s| s.component == component).expect("every component is present")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult<T: Real> {
    /// Series name, e.g. `reflection_rate=0.1`.
    pub label: String,
    pub points: Vec<SweepPoint<T>>,
}

impl<T: Real> SweepResult<T> {
    /// Smallest SCNR whose position RMSE is at most twice the position bound.
    pub fn threshold(&self) -> Option<T> {
        self.points.iter().find_map(|p| {
            let s = p.get(Component::Position);
            match (s.rmse, s.recrbob) {
                (Some(r), Some(b)) if r <= lit::<T>(2.0) * b => Some(p.scnr_db),
                _ => None,
            }
        })
    }

    /// CSV with header `sweep_var,component,rmse,rmse_stderr,recrbob,trials,failures`.
    /// Missing values are written as `NaN`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sweep_var,component,rmse,rmse_stderr,recrbob,trials,failures\n");
        let fmt = |v: Option<T>| v.map_or_else(|| "NaN".to_string(), |x| format!("{:.12e}", to_f64(x)));
        for p in &self.points {
            for s in &p.stats {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    to_f64(p.scnr_db),
                    s.component.name(),
                    fmt(s.rmse),
                    fmt(s.rmse_stderr),
                    fmt(s.recrbob),
                    p.trials,
                    p.failures
                );
            }
        }
        out
    }
}

/// Root bound per component plus the number of usable draws.
struct BoundStats<T: Real> {
    values: Vec<(T, T)>,
    failures: usize,
    draws: usize,
}

impl<T: Real> BoundStats<T> {
    fn from_draws(draws: &[DMatrix<T>], failures: usize) -> Self {
        let values = Component::ALL
            .iter()
            .map(|c| {
                let v: Vec<T> = draws.iter().map(|d| c.variance(d)).collect();
                let (m, s) = mean_and_stderr(&v);
                let root = m.sqrt();
                (root, s / (lit::<T>(2.0) * root))
            })
            .collect();
        BoundStats {
            values,
            failures,
            draws: draws.len() + failures,
        }
    }
}

/// Squared errors per component for the successful trials at one point.
struct TrialStats<T: Real> {
    squared: Vec<[T; 6]>,
    failures: usize,
}

fn run_trials<T: Real>(plan: &ExperimentPlan<T>, point: usize, scnr_db: T, mismatch: bool) -> Result<TrialStats<T>> {
    let scenario = plan.scenario.with_scnr(scnr_db);
    let model = scenario.covariance_model()?;
    let truth = scenario.truth.to_array();
    let p = scenario.layout.num_paths();
    let outcomes: Vec<Option<[T; 6]>> = (0..plan.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(plan.seed, trial_stream(point + 1, t));
            let bits = random_bits(scenario.layout.num_tx(), scenario.gmsk.num_bits, &mut rng);
            let waveform = scenario.waveform(bits).ok()?;
            let actual = scenario.steering(&waveform, &scenario.truth, None).ok()?;
            let r = model.synthesize(&actual, &mut rng);
            let pert = mismatch
                .then(|| SignalPerturbation::random(scenario.num_samples(), p, plan.mismatch_variance, &mut rng));
            let eval = LikelihoodEvaluator::new(&scenario, &model, &waveform, pert.as_ref(), &r).ok()?;
            let est = ml_estimate(&eval, &plan.search).ok()?;
            let hat = est.theta_hat.to_array();
            let err = [hat[0] - truth[0], hat[1] - truth[1], hat[2] - truth[2], hat[3] - truth[3]];
            let mut sq = [T::zero(); 6];
            for (slot, c) in sq.iter_mut().zip(Component::ALL) {
                *slot = c.squared_error(&err);
            }
            Some(sq)
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    Ok(TrialStats {
        squared: outcomes.into_iter().flatten().collect(),
        failures,
    })
}

fn assemble<T: Real>(
    scnr_db: T,
    trials: Option<TrialStats<T>>,
    bound: Option<&BoundStats<T>>,
    requested: usize,
) -> SweepPoint<T> {
    let stats = Component::ALL
        .iter()
        .enumerate()
        .map(|(i, &component)| {
            let (rmse, rmse_stderr) = match &trials {
                Some(t) if !t.squared.is_empty() => {
                    let v: Vec<T> = t.squared.iter().map(|s| s[i]).collect();
                    let (mse, se) = mean_and_stderr(&v);
                    let rmse = mse.sqrt();
                    let se = if rmse > T::zero() { se / (lit::<T>(2.0) * rmse) } else { se.sqrt() };
                    (Some(rmse), se.is_finite().then_some(se))
                }
                _ => (None, None),
            };
            let (recrbob, recrbob_stderr) = match bound {
                Some(b) => (Some(b.values[i].0), b.values[i].1.is_finite().then_some(b.values[i].1)),
                None => (None, None),
            };
            ComponentStats {
                component,
                rmse,
                rmse_stderr,
                recrbob,
                recrbob_stderr,
            }
        })
        .collect();
    let failures = trials.as_ref().map_or(0, |t| t.failures);
    let (bound_failures, bound_draws) = bound.map_or((0, 0), |b| (b.failures, b.draws));
    let flagged = count::<f64>(failures) > MAX_FAILURE_FRACTION * requested as f64
        || bound.is_none()
        || count::<f64>(bound_failures) > MAX_SINGULAR_FRACTION * bound_draws as f64;
    SweepPoint {
        scnr_db,
        stats,
        trials: requested,
        failures,
        bound_failures,
        bound_draws,
        flagged,
    }
}

fn matched_bounds<T: Real>(plan: &ExperimentPlan<T>) -> Result<Vec<BoundStats<T>>> {
    Ok(ecrbob_sweep(&plan.scenario, &plan.scnr_db, plan.bit_draws, plan.seed)?
        .iter()
        .map(|e| BoundStats::from_draws(&e.draws, e.singular))
        .collect())
}

/// ML RMSE and matched RECRBOB over the plan's SCNR grid.
pub fn run_rmse_sweep<T: Real>(plan: &ExperimentPlan<T>, label: &str) -> Result<SweepResult<T>> {
    plan.validate()?;
    let bounds = matched_bounds(plan)?;
    let mut points = Vec::with_capacity(plan.scnr_db.len());
    for (i, (&s, b)) in plan.scnr_db.iter().zip(&bounds).enumerate() {
        let trials = if plan.trials > 0 { Some(run_trials(plan, i, s, false)?) } else { None };
        points.push(assemble(s, trials, Some(b), plan.trials));
    }
    Ok(SweepResult {
        label: label.to_string(),
        points,
    })
}

/// Which correlation a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationKind {
    Reflection,
    Noise,
}

impl CorrelationKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorrelationKind::Reflection => "reflection_rate",
            CorrelationKind::Noise => "noise_rate",
        }
    }
}

pub fn decay_label<T: Real>(d: &Decay<T>) -> String {
    match d {
        Decay::Independent => "inf".to_string(),
        Decay::Rate(r) => format!("{}", to_f64(*r)),
    }
}

/// One SCNR sweep per decay value.
pub fn run_correlation_sweep<T: Real>(
    plan: &ExperimentPlan<T>,
    kind: CorrelationKind,
    decays: &[Decay<T>],
) -> Result<Vec<SweepResult<T>>> {
    decays
        .iter()
        .map(|d| {
            let mut p = plan.clone();
            match kind {
                CorrelationKind::Reflection => p.scenario.reflection.decay = *d,
                CorrelationKind::Noise => p.scenario.noise.decay = *d,
            }
            run_rmse_sweep(&p, &format!("{}={}", kind.name(), decay_label(d)))
        })
        .collect()
}

/// One SCNR sweep per transmitter frequency offset.
pub fn run_offset_sweep<T: Real>(plan: &ExperimentPlan<T>, offsets_hz: &[T]) -> Result<Vec<SweepResult<T>>> {
    offsets_hz
        .iter()
        .map(|&df| {
            let mut p = plan.clone();
            p.scenario.gmsk.freq_offset = df;
            run_rmse_sweep(&p, &format!("freq_offset_hz={}", to_f64(df)))
        })
        .collect()
}

fn draw_seed(seed: u64, draw: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(draw as u64 + 1)
}

/// Mismatched bounds at every SCNR. Draws failing the stability condition,
/// with importance weights that miss most of their expected mass, or with a
/// singular information matrix are excluded and counted.
fn mismatched_bounds<T: Real>(plan: &ExperimentPlan<T>) -> Result<Vec<Option<BoundStats<T>>>> {
    let sc = &plan.scenario;
    let base = sc.covariance_model()?;
    let jac = jacobian(&sc.layout, &sc.truth, sc.wavelength())?;
    let p = sc.layout.num_paths();
    let draws: Vec<_> = (0..plan.bit_draws)
        .map(|d| {
            let mut rng = substream(plan.seed, d as u64);
            let bits = random_bits(sc.layout.num_tx(), sc.gmsk.num_bits, &mut rng);
            let wf = sc.waveform(bits)?;
            let pert = SignalPerturbation::random(sc.num_samples(), p, plan.mismatch_variance, &mut rng);
            let assumed = sc.steering(&wf, &sc.truth, Some(&pert))?;
            let actual = sc.steering(&wf, &sc.truth, None)?;
            Ok((assumed, actual))
        })
        .collect::<Result<_>>()?;
    plan.scnr_db
        .iter()
        .map(|&s| {
            let model = base.with_noise_power(sc.with_scnr(s).noise_power()?)?;
            let mut good = Vec::new();
            let mut failed = 0;
            for (d, (assumed, actual)) in draws.iter().enumerate() {
                let pair = MismatchPair {
                    assumed_steering: assumed.clone(),
                    assumed_model: model.clone(),
                    actual_steering: actual.clone(),
                    actual_model: model.clone(),
                };
                match fim_mismatched(&pair, &jac, plan.mismatch_samples, draw_seed(plan.seed, d)) {
                    Ok(m) if m.result.is_reliable() && m.weight_coverage >= lit(MIN_WEIGHT_COVERAGE) => {
                        good.push(m.result.crb)
                    }
                    Ok(_) | Err(Error::MismatchUnstable) => failed += 1,
                    Err(e) => return Err(e),
                }
            }
            let usable = count::<f64>(failed) <= MAX_SINGULAR_FRACTION * plan.bit_draws as f64 && !good.is_empty();
            Ok(usable.then(|| BoundStats::from_draws(&good, failed)))
        })
        .collect()
}

/// Result of the mismatch experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchResult<T: Real> {
    /// RMSE under the mismatched model against the mismatched bound.
    pub mismatched: SweepResult<T>,
    /// Matched bound on the same SCNR grid and bit draws.
    pub matched_bound: SweepResult<T>,
    /// Draws per SCNR point that failed the stability condition, had poor
    /// importance-weight coverage, or were singular.
    pub unstable_draws: Vec<usize>,
}

/// Estimator assumes the perturbed signal, data follow the clean one.
pub fn run_mismatch_experiment<T: Real>(plan: &ExperimentPlan<T>) -> Result<MismatchResult<T>> {
    plan.validate()?;
    if plan.mismatch_samples < 2 {
        return Err(Error::invalid("experiment", "the mismatch bound needs at least two importance samples"));
    }
    let bounds = mismatched_bounds(plan)?;
    let matched = matched_bounds(plan)?;
    let mut points = Vec::with_capacity(plan.scnr_db.len());
    let mut matched_points = Vec::with_capacity(plan.scnr_db.len());
    let mut unstable = Vec::with_capacity(plan.scnr_db.len());
    for (i, (&s, b)) in plan.scnr_db.iter().zip(&bounds).enumerate() {
        let trials = if plan.trials > 0 { Some(run_trials(plan, i, s, true)?) } else { None };
        let mut point = assemble(s, trials, b.as_ref(), plan.trials);
        if b.is_none() {
            point.bound_draws = plan.bit_draws;
            point.bound_failures = plan.bit_draws;
        }
        unstable.push(point.bound_failures);
        points.push(point);
        matched_points.push(assemble(s, None, Some(&matched[i]), 0));
    }
    Ok(MismatchResult {
        mismatched: SweepResult {
            label: format!("mismatch_variance={}", to_f64(plan.mismatch_variance)),
            points,
        },
        matched_bound: SweepResult {
            label: "matched".to_string(),
            points: matched_points,
        },
        unstable_draws: unstable,
    })
}
