//! Oracle and invariant checks on a scenario, with a deterministic report.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::estimator::{log_likelihood, LikelihoodEvaluator};
use crate::fim_crb::{
    chain_rule_expansion, fim_intermediate, fim_intermediate_trace, fim_intermediate_trace_fd, fim_mismatched, fim_theta,
    fim_theta_trace_fd, FdSteps, MismatchPair,
};
use crate::geometry::{intermediate_params, jacobian, StationLayout, TargetState};
use crate::linalg::normalized_error;
use crate::rng::substream;
use crate::scalar::{lit, to_f64, Real};
use crate::signal_model::Scenario;
use crate::waveform::{random_bits, GmskWaveform};

/// Tolerances of the individual checks.
pub const TOL_CLOSED_FORM: f64 = 1e-8;
pub const TOL_TRACE_FD: f64 = 1e-5;
pub const TOL_THETA_FD: f64 = 1e-4;
pub const TOL_JACOBIAN: f64 = 1e-6;
pub const TOL_EXPANSION: f64 = 1e-10;
pub const TOL_ENERGY: f64 = 1e-12;
pub const TOL_WAVEFORM_DERIVATIVE: f64 = 1e-6;
pub const TOL_LIKELIHOOD: f64 = 1e-9;
/// Matched-mismatch agreement in Monte-Carlo standard errors.
pub const MISMATCH_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    fn push(&mut self, name: &str, value: f64, tolerance: f64) {
        self.checks.push(Check {
            name: name.to_string(),
            value,
            tolerance,
            passed: value <= tolerance,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// CSV with header `check,value,tolerance,pass`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,value,tolerance,pass\n");
        for c in &self.checks {
            let _ = writeln!(out, "{},{:.6e},{:e},{}", c.name, c.value, c.tolerance, c.passed);
        }
        out
    }
}

/// Central-difference Jacobian of the intermediate parameters with respect
/// to `(x, y, vx, vy)`, laid out like `JacobianBlocks::assembled`.
pub fn jacobian_fd<T: Real>(
    layout: &StationLayout<T>,
    target: &TargetState<T>,
    wavelength: T,
    position_step: T,
    velocity_step: T,
) -> Result<DMatrix<T>> {
    let base = target.to_array();
    let dim = layout.num_intermediate();
    let mut out = DMatrix::zeros(4, dim);
    for i in 0..4 {
        let h = if i < 2 { position_step } else { velocity_step };
        let mut up = base;
        let mut down = base;
        up[i] += h;
        down[i] -= h;
        let a = intermediate_params(layout, &TargetState::from_array(up), wavelength)?.to_vector();
        let b = intermediate_params(layout, &TargetState::from_array(down), wavelength)?.to_vector();
        for j in 0..dim {
            out[(i, j)] = (a[j] - b[j]) / (h + h);
        }
    }
    Ok(out)
}

/// Largest block-relative difference between two Jacobians: each
/// `tau`/`f`/`d_t`/`d_r` block is scaled by its own largest entry.
pub fn jacobian_error<T: Real>(analytic: &DMatrix<T>, fd: &DMatrix<T>, num_tx: usize, num_rx: usize) -> T {
    let p = num_tx * num_rx;
    let blocks = [(0, p), (p, p), (2 * p, num_tx), (2 * p + num_tx, num_rx)];
    let mut worst = T::zero();
    for (start, len) in blocks {
        let a = analytic.columns(start, len);
        let b = fd.columns(start, len);
        let scale = a.abs().max();
        if scale > T::zero() {
            worst = worst.max((a - b).abs().max() / scale);
        }
    }
    worst
}

/// Largest `|sum_k |s_m|^2 Ts - 1|` and largest envelope deviation.
pub fn waveform_normalization<T: Real>(waveform: &GmskWaveform<T>) -> (T, T) {
    let ts = waveform.params().sample_period();
    let mut energy = T::zero();
    let mut envelope = T::zero();
    for m in 0..waveform.num_tx() {
        let s = waveform.sampled(m);
        let e = s.iter().fold(T::zero(), |a, z| a + z.norm_sqr()) * ts;
        energy = energy.max((e - T::one()).abs());
        let amp = waveform.amplitude(m);
        for z in &s {
            envelope = envelope.max((z.norm_sqr().sqrt() - amp).abs() / amp);
        }
    }
    (energy, envelope)
}

/// Largest relative error of `ds/dt` against central differences at the
/// sample instants.
pub fn waveform_derivative_error<T: Real>(waveform: &GmskWaveform<T>) -> T {
    let ts = waveform.params().sample_period();
    let h = ts * lit(1e-5);
    let mut worst = T::zero();
    for m in 0..waveform.num_tx() {
        for t in waveform.params().sample_times() {
            let fd = (waveform.sample(m, t + h) - waveform.sample(m, t - h)) / (h + h);
            let an = waveform.sample_time_derivative(m, t);
            let (err, scale) = ((fd - an).norm_sqr().sqrt(), an.norm_sqr().sqrt());
            worst = worst.max(if scale > T::zero() { err / scale } else { err });
        }
    }
    worst
}

/// Runs every oracle on `scenario` with bits drawn from `seed`.
pub fn run_suite<T: Real>(scenario: &Scenario<T>, seed: u64, mismatch_samples: usize) -> Result<ValidationReport> {
    scenario.validate()?;
    let mut report = ValidationReport::default();
    let mut rng = substream(seed, 0);
    let bits = random_bits(scenario.layout.num_tx(), scenario.gmsk.num_bits, &mut rng);
    let waveform = scenario.waveform(bits)?;
    let model = scenario.covariance_model()?;
    let steering = scenario.steering(&waveform, &scenario.truth, None)?;
    let cov = model.covariance(&steering)?;
    let (m, n) = (scenario.layout.num_tx(), scenario.layout.num_rx());

    let closed = fim_intermediate(&steering, &model, &cov)?;
    let trace = fim_intermediate_trace(&steering, &model, &cov)?;
    report.push("fim_closed_form_vs_trace", to_f64(normalized_error(&closed.matrix, &trace.matrix)), TOL_CLOSED_FORM);

    let steps = FdSteps::for_waveform(&scenario.gmsk);
    let trace_fd = fim_intermediate_trace_fd(scenario, &model, &waveform, &steps)?;
    report.push("fim_trace_vs_finite_difference", to_f64(normalized_error(&trace_fd.matrix, &trace.matrix)), TOL_TRACE_FD);

    let jac = jacobian(&scenario.layout, &scenario.truth, scenario.wavelength())?;
    let theta = fim_theta(&closed, &jac)?;
    let theta_fd = fim_theta_trace_fd(scenario, &model, &waveform, &steps)?;
    report.push("fim_chain_rule_vs_direct", to_f64(normalized_error(&theta_fd.j_theta, &theta.j_theta)), TOL_THETA_FD);

    let fd = jacobian_fd(&scenario.layout, &scenario.truth, scenario.wavelength(), lit(1e-2), lit(1e-3))?;
    report.push("jacobian_vs_finite_difference", to_f64(jacobian_error(&jac.assembled(), &fd, m, n)), TOL_JACOBIAN);

    let expansion = chain_rule_expansion(&closed, &jac)?;
    report.push("chain_rule_expansion", to_f64(expansion.max_normalized()), TOL_EXPANSION);

    let (energy, envelope) = waveform_normalization(&waveform);
    report.push("waveform_energy", to_f64(energy), TOL_ENERGY);
    report.push("waveform_envelope", to_f64(envelope), TOL_ENERGY);
    report.push("waveform_derivative", to_f64(waveform_derivative_error(&waveform)), TOL_WAVEFORM_DERIVATIVE);

    let r = model.synthesize(&steering, &mut rng);
    let eval = LikelihoodEvaluator::new(scenario, &model, &waveform, None, &r)?;
    let t = scenario.truth;
    let mut worst = T::zero();
    for cand in [t, TargetState::new(t.x + lit(120.0), t.y - lit(80.0), t.vx - lit(7.0), t.vy + lit(4.0))] {
        let dense = log_likelihood(&r, scenario, &model, &waveform, None, &cand)?;
        worst = worst.max((eval.evaluate(&cand) - dense).abs() / dense.abs().max(T::one()));
    }
    report.push("likelihood_fast_vs_dense", to_f64(worst), TOL_LIKELIHOOD);

    let pair = MismatchPair {
        assumed_steering: steering.clone(),
        assumed_model: model.clone(),
        actual_steering: steering.clone(),
        actual_model: model.clone(),
    };
    let mc = fim_mismatched(&pair, &jac, mismatch_samples, seed)?;
    let mut sigmas = T::zero();
    for i in 0..4 {
        let diff = (mc.result.j_theta[(i, i)] - theta.j_theta[(i, i)]).abs();
        sigmas = sigmas.max(diff / mc.j_theta_stderr[(i, i)]);
    }
    report.push("mismatch_reduces_to_matched", to_f64(sigmas), MISMATCH_SIGMAS);

    let crb = &theta.crb;
    let asym = (crb - crb.transpose()).abs().max() / crb.abs().max();
    report.push("crb_symmetry", to_f64(asym), TOL_CLOSED_FORM);
    let min_eig = crb.clone().symmetric_eigenvalues().min();
    report.push("crb_negative_eigenvalue", to_f64((-min_eig / crb.abs().max()).max(T::zero())), TOL_CLOSED_FORM);
    Ok(report)
}
