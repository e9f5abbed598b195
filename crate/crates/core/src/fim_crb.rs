//! Fisher information and Cramér-Rao bounds for the target state.
//!
//! The information over the intermediate parameters is computed in closed
//! form from Cholesky solves against `C`. A slower trace-formula path,
//! `J_ij = tr(C^-1 dC_i C^-1 dC_j)`, is kept as an independent oracle.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{jacobian, IntermediateParams, JacobianBlocks, TargetState};
use crate::linalg::{complexify, symmetric_part, symmetric_pinv, CMatrix, CVector, HermitianFactor};
use crate::rng::substream;
use crate::scalar::{complex_normal, count, lit, to_f64, Real};
use crate::signal_model::{CovarianceBundle, CovarianceModel, ParamKind, Scenario, SteeringSet};
use crate::waveform::{random_bits, BitSequence, GmskParams, GmskWaveform};

/// Relative eigenvalue threshold for the pseudo-inverse.
pub const PINV_REL_TOL: f64 = 1e-12;
/// Condition number above which a bound is reported as unreliable.
pub const MAX_CONDITION: f64 = 1e12;
/// Largest tolerated fraction of singular bit draws.
pub const MAX_SINGULAR_FRACTION: f64 = 0.1;
/// Relative standard error on the mismatched information diagonal above
/// which a warning is attached.
pub const MAX_MC_REL_STDERR: f64 = 0.1;
/// Weight coverage below which a mismatched estimate is flagged.
pub const MIN_WEIGHT_COVERAGE: f64 = 0.5;

/// One of the four intermediate-parameter families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Delay,
    Doppler,
    DistTx,
    DistRx,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Delay, Block::Doppler, Block::DistTx, Block::DistRx];

    pub fn name(&self) -> &'static str {
        match self {
            Block::Delay => "tau",
            Block::Doppler => "f",
            Block::DistTx => "dt",
            Block::DistRx => "dr",
        }
    }
}

/// Information matrix over `vartheta = [tau, f, d_t, d_r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FimIntermediate<T: Real> {
    pub matrix: DMatrix<T>,
    num_tx: usize,
    num_rx: usize,
}

impl<T: Real> FimIntermediate<T> {
    pub fn new(matrix: DMatrix<T>, num_tx: usize, num_rx: usize) -> Result<Self> {
        let dim = 2 * num_tx * num_rx + num_tx + num_rx;
        if matrix.shape() != (dim, dim) {
            return Err(Error::Dimension {
                context: "intermediate information",
                expected: format!("{dim}x{dim}"),
                got: format!("{}x{}", matrix.nrows(), matrix.ncols()),
            });
        }
        Ok(FimIntermediate { matrix, num_tx, num_rx })
    }

    pub fn num_tx(&self) -> usize {
        self.num_tx
    }

    pub fn num_rx(&self) -> usize {
        self.num_rx
    }

    fn range(&self, block: Block) -> (usize, usize) {
        let p = self.num_tx * self.num_rx;
        match block {
            Block::Delay => (0, p),
            Block::Doppler => (p, p),
            Block::DistTx => (2 * p, self.num_tx),
            Block::DistRx => (2 * p + self.num_tx, self.num_rx),
        }
    }

    /// Sub-matrix `J_{row, col}`.
    pub fn block(&self, row: Block, col: Block) -> DMatrix<T> {
        let (r0, rn) = self.range(row);
        let (c0, cn) = self.range(col);
        self.matrix.view((r0, c0), (rn, cn)).into_owned()
    }

    pub fn set_block(&mut self, row: Block, col: Block, value: &DMatrix<T>) {
        let (r0, rn) = self.range(row);
        let (c0, cn) = self.range(col);
        self.matrix.view_mut((r0, c0), (rn, cn)).copy_from(value);
    }
}

/// Position of the intermediate parameter that column `kind` of path `c`
/// differentiates.
fn intermediate_index(kind: ParamKind, c: usize, num_tx: usize, num_rx: usize) -> usize {
    let p = num_tx * num_rx;
    match kind {
        ParamKind::Delay => c,
        ParamKind::Doppler => p + c,
        ParamKind::DistTx => 2 * p + c % num_tx,
        ParamKind::DistRx => 2 * p + num_tx + c / num_tx,
    }
}

/// Stacks the four dense derivative families: `[D_tau, D_f, D_dt, D_dr]`.
fn stacked_derivatives<T: Real>(steering: &SteeringSet<T>) -> CMatrix<T> {
    let p = steering.num_paths();
    let rows = steering.num_rx() * steering.num_samples();
    let mut d = CMatrix::zeros(rows, 4 * p);
    for (f, kind) in ParamKind::ALL.iter().enumerate() {
        d.view_mut((0, f * p), (rows, p)).copy_from(&steering.dense_derivative(*kind));
    }
    d
}

/// Closed-form information over the intermediate parameters.
///
/// With `Y = R S^H C^-1` and stacked derivative columns `d_a` (each tied to
/// the path `src(a)` whose column it differentiates),
///
/// ```text
/// E_ab = 2 Re{ (Y D)_{src a, b} (Y D)_{src b, a} + (D^H C^-1 D)_{ab} (Y S R)_{src b, src a} }
/// ```
///
/// and `J_ij` sums `E_ab` over the columns belonging to parameters `i`, `j`.
pub fn fim_intermediate<T: Real>(
    steering: &SteeringSet<T>,
    model: &CovarianceModel<T>,
    cov: &CovarianceBundle<T>,
) -> Result<FimIntermediate<T>> {
    let (num_tx, num_rx) = (steering.num_tx(), steering.num_rx());
    let p = steering.num_paths();
    if model.reflection().nrows() != p {
        return Err(Error::Dimension {
            context: "reflection covariance",
            expected: p.to_string(),
            got: model.reflection().nrows().to_string(),
        });
    }
    let s = steering.dense();
    let d = stacked_derivatives(steering);
    let r = complexify(model.reflection());
    let cinv_s = cov.factor.solve(&s);
    let cinv_d = cov.factor.solve(&d);
    let yd = &r * (cinv_s.adjoint() * &d);
    let ysr = &r * (s.adjoint() * &cinv_s) * &r;
    let dpd = d.adjoint() * &cinv_d;

    let dim = 2 * p + num_tx + num_rx;
    let mut j = DMatrix::zeros(dim, dim);
    let kinds: Vec<(usize, usize)> = (0..4 * p)
        .map(|a| {
            let kind = ParamKind::ALL[a / p];
            (a % p, intermediate_index(kind, a % p, num_tx, num_rx))
        })
        .collect();
    let two = lit::<T>(2.0);
    for (a, &(sa, ia)) in kinds.iter().enumerate() {
        for (b, &(sb, ib)) in kinds.iter().enumerate() {
            let e = yd[(sa, b)] * yd[(sb, a)] + dpd[(a, b)] * ysr[(sb, sa)];
            j[(ia, ib)] += two * e.re;
        }
    }
    FimIntermediate::new(symmetric_part(&j), num_tx, num_rx)
}

/// `Re tr(A B)` without forming the product.
fn trace_product_re<T: Real>(a: &CMatrix<T>, b: &CMatrix<T>) -> T {
    let mut acc = T::zero();
    for k in 0..a.nrows() {
        for l in 0..a.ncols() {
            let x = a[(k, l)] * b[(l, k)];
            acc += x.re;
        }
    }
    acc
}

fn trace_information_from_derivatives<T: Real>(cov: &CovarianceBundle<T>, dc: &[CMatrix<T>]) -> DMatrix<T> {
    let a: Vec<CMatrix<T>> = dc.iter().map(|d| cov.factor.solve(d)).collect();
    let n = a.len();
    let mut j = DMatrix::zeros(n, n);
    for i in 0..n {
        for k in i..n {
            let v = trace_product_re(&a[i], &a[k]);
            j[(i, k)] = v;
            j[(k, i)] = v;
        }
    }
    j
}

/// Trace-formula information over the intermediate parameters using the
/// analytic `dC_i = dS_i R S^H + S R dS_i^H`.
pub fn fim_intermediate_trace<T: Real>(
    steering: &SteeringSet<T>,
    model: &CovarianceModel<T>,
    cov: &CovarianceBundle<T>,
) -> Result<FimIntermediate<T>> {
    let s = steering.dense();
    let r = complexify(model.reflection());
    let rs = &r * s.adjoint();
    let dc: Vec<CMatrix<T>> = (0..steering.num_intermediate())
        .map(|i| {
            let ds = steering.dense_parameter_derivative(i);
            let a = &ds * &rs;
            &a + a.adjoint()
        })
        .collect();
    FimIntermediate::new(
        trace_information_from_derivatives(cov, &dc),
        steering.num_tx(),
        steering.num_rx(),
    )
}

/// Trace-formula information over an arbitrary parameter vector with
/// `dC/dp_i` from central differences of `c_at`.
pub fn trace_information_fd<T, F>(point: &DVector<T>, steps: &[T], cov: &CovarianceBundle<T>, mut c_at: F) -> Result<DMatrix<T>>
where
    T: Real,
    F: FnMut(&DVector<T>) -> Result<CMatrix<T>>,
{
    if steps.len() != point.len() {
        return Err(Error::Dimension {
            context: "finite-difference steps",
            expected: point.len().to_string(),
            got: steps.len().to_string(),
        });
    }
    let mut dc = Vec::with_capacity(point.len());
    for (i, &h) in steps.iter().enumerate() {
        let mut up = point.clone();
        let mut down = point.clone();
        up[i] += h;
        down[i] -= h;
        let diff = c_at(&up)? - c_at(&down)?;
        dc.push(diff.map(|z| z / (h + h)));
    }
    Ok(trace_information_from_derivatives(cov, &dc))
}

/// Central-difference step sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSteps<T: Real> {
    pub delay: T,
    pub doppler: T,
    pub distance: T,
    pub position: T,
    pub velocity: T,
}

impl<T: Real> FdSteps<T> {
    pub fn for_waveform(params: &GmskParams<T>) -> Self {
        FdSteps {
            delay: params.sample_period() * lit(1e-4),
            doppler: lit(1e-3),
            distance: lit(1e-2),
            position: lit(1e-2),
            velocity: lit(1e-3),
        }
    }

    fn intermediate(&self, num_tx: usize, num_rx: usize) -> Vec<T> {
        let p = num_tx * num_rx;
        let mut v = vec![self.delay; p];
        v.extend(std::iter::repeat_n(self.doppler, p));
        v.extend(std::iter::repeat_n(self.distance, num_tx + num_rx));
        v
    }
}

/// Trace-formula information over the intermediate parameters with
/// finite-difference `dC`.
pub fn fim_intermediate_trace_fd<T: Real>(
    scenario: &Scenario<T>,
    model: &CovarianceModel<T>,
    waveform: &GmskWaveform<T>,
    steps: &FdSteps<T>,
) -> Result<FimIntermediate<T>> {
    let (m, n) = (scenario.layout.num_tx(), scenario.layout.num_rx());
    let point = scenario.intermediate(&scenario.truth)?.to_vector();
    let cov = model.covariance(&scenario.steering(waveform, &scenario.truth, None)?)?;
    let j = trace_information_fd(&point, &steps.intermediate(m, n), &cov, |v| {
        let ip = IntermediateParams::from_vector(v, m, n)?;
        let st = SteeringSet::from_intermediate(&ip, waveform, &scenario.energies, scenario.path_gain, None)?;
        Ok(model.covariance(&st)?.matrix)
    })?;
    FimIntermediate::new(j, m, n)
}

/// Trace-formula information directly over the target state with
/// finite-difference `dC/dtheta`.
pub fn fim_theta_trace_fd<T: Real>(
    scenario: &Scenario<T>,
    model: &CovarianceModel<T>,
    waveform: &GmskWaveform<T>,
    steps: &FdSteps<T>,
) -> Result<FimResult<T>> {
    let truth = scenario.truth;
    let point = DVector::from_row_slice(&truth.to_array());
    let cov = model.covariance(&scenario.steering(waveform, &truth, None)?)?;
    let h = [steps.position, steps.position, steps.velocity, steps.velocity];
    let j = trace_information_fd(&point, &h, &cov, |v| {
        let target = TargetState::new(v[0], v[1], v[2], v[3]);
        Ok(model.covariance(&scenario.steering(waveform, &target, None)?)?.matrix)
    })?;
    Ok(FimResult::from_information(j, Derivation::FiniteDifference))
}

/// How an information matrix was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Derivation {
    ClosedForm,
    TraceOracle,
    FiniteDifference,
    MonteCarlo,
}

impl Derivation {
    pub fn name(&self) -> &'static str {
        match self {
            Derivation::ClosedForm => "closed-form",
            Derivation::TraceOracle => "trace-oracle",
            Derivation::FiniteDifference => "finite-difference",
            Derivation::MonteCarlo => "monte-carlo",
        }
    }
}

/// Information and bound for `theta = (x, y, vx, vy)`.
#[derive(Debug, Clone)]
pub struct FimResult<T: Real> {
    pub j_theta: DMatrix<T>,
    pub crb: DMatrix<T>,
    pub derivation: Derivation,
    pub condition: T,
    pub rank: usize,
    /// Directions of `theta` the data cannot resolve.
    pub null_space: Vec<DVector<T>>,
    pub warnings: Vec<String>,
}

impl<T: Real> FimResult<T> {
    pub fn from_information(j_theta: DMatrix<T>, derivation: Derivation) -> Self {
        let j_theta = symmetric_part(&j_theta);
        let pinv = symmetric_pinv(&j_theta, lit(PINV_REL_TOL));
        let mut warnings = Vec::new();
        if !(pinv.condition <= lit(MAX_CONDITION)) {
            warnings.push(format!(
                "information matrix is ill-conditioned (condition {:.3e}, rank {}); bound is unreliable",
                to_f64(pinv.condition),
                pinv.rank
            ));
            for v in &pinv.null_space {
                let dir: Vec<String> = v.iter().map(|x| format!("{:.4}", to_f64(*x))).collect();
                warnings.push(format!("unresolved direction in (x, y, vx, vy): [{}]", dir.join(", ")));
            }
        }
        FimResult {
            crb: symmetric_part(&pinv.inverse),
            j_theta,
            derivation,
            condition: pinv.condition,
            rank: pinv.rank,
            null_space: pinv.null_space,
            warnings,
        }
    }

    pub fn is_reliable(&self) -> bool {
        self.rank == self.j_theta.nrows() && self.condition <= lit(MAX_CONDITION)
    }
}

/// Chain rule `J_theta = G J_vartheta G^T` with `G = grad_theta(vartheta^T)`.
pub fn fim_theta<T: Real>(j: &FimIntermediate<T>, jac: &JacobianBlocks<T>) -> Result<FimResult<T>> {
    let g = jac.assembled();
    if g.ncols() != j.matrix.nrows() {
        return Err(Error::Dimension {
            context: "chain rule",
            expected: j.matrix.nrows().to_string(),
            got: g.ncols().to_string(),
        });
    }
    Ok(FimResult::from_information(&g * &j.matrix * g.transpose(), Derivation::ClosedForm))
}

/// Bound for one realisation of the transmitted bits.
pub fn crb_for_bits<T: Real>(
    scenario: &Scenario<T>,
    model: &CovarianceModel<T>,
    bits: Vec<BitSequence>,
) -> Result<FimResult<T>> {
    let waveform = scenario.waveform(bits)?;
    let steering = scenario.steering(&waveform, &scenario.truth, None)?;
    let cov = model.covariance(&steering)?;
    let j = fim_intermediate(&steering, model, &cov)?;
    fim_theta(&j, &jacobian(&scenario.layout, &scenario.truth, scenario.wavelength())?)
}

/// Scalar summaries of a 4x4 bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    X,
    Y,
    Vx,
    Vy,
    Position,
    Velocity,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::X,
        Component::Y,
        Component::Vx,
        Component::Vy,
        Component::Position,
        Component::Velocity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::X => "x",
            Component::Y => "y",
            Component::Vx => "vx",
            Component::Vy => "vy",
            Component::Position => "position",
            Component::Velocity => "velocity",
        }
    }

    /// State indices whose variances add up to this component.
    pub fn indices(&self) -> &'static [usize] {
        match self {
            Component::X => &[0],
            Component::Y => &[1],
            Component::Vx => &[2],
            Component::Vy => &[3],
            Component::Position => &[0, 1],
            Component::Velocity => &[2, 3],
        }
    }

    /// Summed variance from a covariance-like matrix.
    pub fn variance<T: Real>(&self, m: &DMatrix<T>) -> T {
        self.indices().iter().fold(T::zero(), |acc, &i| acc + m[(i, i)])
    }

    /// Summed squared error from a state error.
    pub fn squared_error<T: Real>(&self, err: &[T; 4]) -> T {
        self.indices().iter().fold(T::zero(), |acc, &i| acc + err[i] * err[i])
    }
}

/// Mean and standard error of a sample.
pub fn mean_and_stderr<T: Real>(values: &[T]) -> (T, T) {
    let n = values.len();
    if n == 0 {
        return (lit(f64::NAN), lit(f64::NAN));
    }
    let mean = values.iter().fold(T::zero(), |a, &b| a + b) / count(n);
    if n < 2 {
        return (mean, lit(f64::NAN));
    }
    let ss = values.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean));
    (mean, (ss / count::<T>(n - 1) / count::<T>(n)).sqrt())
}

/// Bound averaged over random bit sequences.
#[derive(Debug, Clone)]
pub struct Ecrbob<T: Real> {
    pub mean: DMatrix<T>,
    /// Per-entry standard error of `mean`; NaN with fewer than two draws.
    pub stderr: DMatrix<T>,
    /// Per-draw bounds that entered the average.
    pub draws: Vec<DMatrix<T>>,
    pub singular: usize,
}

impl<T: Real> Ecrbob<T> {
    fn from_draws(draws: Vec<DMatrix<T>>, singular: usize) -> Self {
        let mut mean = DMatrix::zeros(4, 4);
        let mut stderr = DMatrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let v: Vec<T> = draws.iter().map(|d| d[(i, j)]).collect();
                let (m, s) = mean_and_stderr(&v);
                mean[(i, j)] = m;
                stderr[(i, j)] = s;
            }
        }
        Ecrbob {
            mean,
            stderr,
            draws,
            singular,
        }
    }

    /// Root bound for `component` and its delta-method standard error.
    pub fn root(&self, component: Component) -> (T, T) {
        let v: Vec<T> = self.draws.iter().map(|d| component.variance(d)).collect();
        let (m, s) = mean_and_stderr(&v);
        let root = m.sqrt();
        (root, s / (lit::<T>(2.0) * root))
    }
}

fn check_singular(singular: usize, total: usize) -> Result<()> {
    if singular as f64 > MAX_SINGULAR_FRACTION * total as f64 {
        return Err(Error::TooManySingularDraws { failed: singular, total });
    }
    Ok(())
}

/// ECRBOB at several SCNR values. Bit draw `d` comes from substream `d` of
/// `seed`, so every SCNR point (and every scenario variant sharing `seed`)
/// averages over the same bit sequences.
pub fn ecrbob_sweep<T: Real>(scenario: &Scenario<T>, scnr_db: &[T], draws: usize, seed: u64) -> Result<Vec<Ecrbob<T>>> {
    if draws == 0 {
        return Err(Error::invalid("ecrbob", "at least one bit draw is required"));
    }
    scenario.validate()?;
    let base = scenario.covariance_model()?;
    let models: Vec<CovarianceModel<T>> = scnr_db
        .iter()
        .map(|&s| base.with_noise_power(scenario.with_scnr(s).noise_power()?))
        .collect::<Result<_>>()?;
    let jac = jacobian(&scenario.layout, &scenario.truth, scenario.wavelength())?;
    let per_draw: Vec<Vec<Option<DMatrix<T>>>> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = substream(seed, d as u64);
            let bits = random_bits(scenario.layout.num_tx(), scenario.gmsk.num_bits, &mut rng);
            let waveform = scenario.waveform(bits)?;
            let steering = scenario.steering(&waveform, &scenario.truth, None)?;
            models
                .iter()
                .map(|model| {
                    let cov = model.covariance(&steering)?;
                    let res = fim_theta(&fim_intermediate(&steering, model, &cov)?, &jac)?;
                    Ok(res.is_reliable().then_some(res.crb))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    (0..scnr_db.len())
        .map(|k| {
            let good: Vec<DMatrix<T>> = per_draw.iter().filter_map(|v| v[k].clone()).collect();
            let singular = draws - good.len();
            check_singular(singular, draws)?;
            Ok(Ecrbob::from_draws(good, singular))
        })
        .collect()
}

pub fn ecrbob<T: Real>(scenario: &Scenario<T>, draws: usize, seed: u64) -> Result<Ecrbob<T>> {
    Ok(ecrbob_sweep(scenario, &[scenario.scnr_db], draws, seed)?.remove(0))
}

/// Assumed (`0`) and actual (`1`) models of a mismatched estimation problem.
#[derive(Debug, Clone)]
pub struct MismatchPair<T: Real> {
    pub assumed_steering: SteeringSet<T>,
    pub assumed_model: CovarianceModel<T>,
    pub actual_steering: SteeringSet<T>,
    pub actual_model: CovarianceModel<T>,
}

/// Monte-Carlo estimate of the mismatched information.
#[derive(Debug, Clone)]
pub struct MismatchedFim<T: Real> {
    pub j_vartheta: DMatrix<T>,
    /// Bound derived from the averaged `J_theta`.
    pub result: FimResult<T>,
    /// Per-entry standard error of `result.j_theta`.
    pub j_theta_stderr: DMatrix<T>,
    pub samples: usize,
    pub max_diag_rel_stderr: T,
    /// Sample mean of the importance weights over their exact expectation;
    /// far below 1 when the draws miss the mass of `p0^2 / p1`.
    pub weight_coverage: T,
}

const MC_CHUNK: usize = 256;

struct McSums<T: Real> {
    vartheta: DMatrix<T>,
    theta: DMatrix<T>,
    theta_sq: DMatrix<T>,
    weights: T,
}

/// Importance-weighted Monte-Carlo estimate of
/// `E_p1[(p0/p1)^2 grad log p0 grad log p0^T]`, mapped to `theta` per sample.
pub fn fim_mismatched<T: Real>(
    pair: &MismatchPair<T>,
    jac: &JacobianBlocks<T>,
    samples: usize,
    seed: u64,
) -> Result<MismatchedFim<T>> {
    if samples < 2 {
        return Err(Error::invalid("mismatched information", "at least two samples are required"));
    }
    let s0 = &pair.assumed_steering;
    let (num_tx, num_rx, k) = (s0.num_tx(), s0.num_rx(), s0.num_samples());
    if pair.actual_steering.num_tx() != num_tx
        || pair.actual_steering.num_rx() != num_rx
        || pair.actual_steering.num_samples() != k
    {
        return Err(Error::Dimension {
            context: "mismatch pair",
            expected: format!("{num_rx} receivers, {num_tx} transmitters, {k} samples"),
            got: format!(
                "{} receivers, {} transmitters, {} samples",
                pair.actual_steering.num_rx(),
                pair.actual_steering.num_tx(),
                pair.actual_steering.num_samples()
            ),
        });
    }
    let c0 = pair.assumed_model.covariance(s0)?;
    let c1 = pair.actual_model.covariance(&pair.actual_steering)?;
    let stability = (&c1.matrix + &c1.matrix) - &c0.matrix;
    if HermitianFactor::new(stability, "stability", "").is_err() {
        return Err(Error::MismatchUnstable);
    }
    // E_p1[w] = det C1 / (det C0^2 det(2 C0^-1 - C1^-1)), compared with the
    // sample mean of the weights as a coverage diagnostic
    let log_weight_mass = {
        let c0_inv = c0.factor.inverse();
        let precision = HermitianFactor::new(&c0_inv + &c0_inv - c1.factor.inverse(), "stability", "")
            .map_err(|_| Error::MismatchUnstable)?;
        c1.log_det() - c0.log_det() - c0.log_det() - precision.log_det()
    };
    let l1 = c1.factor.lower();
    let p = s0.num_paths();
    let dim = s0.num_intermediate();
    let g = jac.assembled();
    if g.ncols() != dim {
        return Err(Error::Dimension {
            context: "chain rule",
            expected: dim.to_string(),
            got: g.ncols().to_string(),
        });
    }
    let r0 = complexify(pair.assumed_model.reflection());
    let s0d = s0.dense();
    let d = stacked_derivatives(s0);
    let yd = &r0 * (c0.factor.solve(&s0d).adjoint() * &d);
    let index: Vec<usize> = (0..4 * p)
        .map(|a| intermediate_index(ParamKind::ALL[a / p], a % p, num_tx, num_rx))
        .collect();
    let trace_term: Vec<T> = (0..4 * p).map(|a| yd[(a % p, a)].re).collect();
    let log_det_gap = c1.log_det() - c0.log_det();
    let nk = num_rx * k;
    let two = lit::<T>(2.0);

    let chunks = samples.div_ceil(MC_CHUNK);
    let partial: Vec<McSums<T>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = substream(seed, chunk as u64);
            let mut sums = McSums {
                vartheta: DMatrix::zeros(dim, dim),
                theta: DMatrix::zeros(4, 4),
                theta_sq: DMatrix::zeros(4, 4),
                weights: T::zero(),
            };
            let todo = MC_CHUNK.min(samples - chunk * MC_CHUNK);
            for _ in 0..todo {
                let gvec: CVector<T> = DVector::from_fn(nk, |_, _| complex_normal::<T, _>(&mut rng));
                let r = &l1 * &gvec;
                let x = c0.factor.solve_vec(&r);
                let log_w = two * (log_det_gap - r.dotc(&x).re + gvec.norm_squared());
                let w = log_w.exp();
                sums.weights += w;
                let proj = &r0 * (s0d.adjoint() * &x);
                let xd = d.adjoint() * &x;
                let mut score = DVector::<T>::zeros(dim);
                for a in 0..4 * p {
                    let val = xd[a].conj() * proj[a % p];
                    score[index[a]] += two * (val.re - trace_term[a]);
                }
                sums.vartheta += &score * score.transpose() * w;
                let st = &g * &score;
                let outer = &st * st.transpose() * w;
                sums.theta_sq += outer.component_mul(&outer);
                sums.theta += outer;
            }
            sums
        })
        .collect();

    let mut total = McSums {
        vartheta: DMatrix::zeros(dim, dim),
        theta: DMatrix::zeros(4, 4),
        theta_sq: DMatrix::zeros(4, 4),
        weights: T::zero(),
    };
    for part in partial {
        total.weights += part.weights;
        total.vartheta += part.vartheta;
        total.theta += part.theta;
        total.theta_sq += part.theta_sq;
    }
    let n = count::<T>(samples);
    let j_vartheta = symmetric_part(&(total.vartheta / n));
    let mean = &total.theta / n;
    let j_theta_stderr = DMatrix::from_fn(4, 4, |i, j| {
        let m = mean[(i, j)];
        let var = (total.theta_sq[(i, j)] / n - m * m).max(T::zero()) * n / (n - T::one());
        (var / n).sqrt()
    });
    let mut result = FimResult::from_information(mean, Derivation::MonteCarlo);
    let max_diag_rel_stderr = (0..4).fold(T::zero(), |acc, i| {
        let rel = j_theta_stderr[(i, i)] / result.j_theta[(i, i)].abs();
        acc.max(rel)
    });
    if !(max_diag_rel_stderr <= lit(MAX_MC_REL_STDERR)) {
        result.warnings.push(format!(
            "Monte-Carlo relative standard error on the information diagonal is {:.1}%",
            100.0 * to_f64(max_diag_rel_stderr)
        ));
    }
    let weight_coverage = ((total.weights / n).ln() - log_weight_mass).exp();
    if !(weight_coverage >= lit(MIN_WEIGHT_COVERAGE)) {
        result.warnings.push(format!(
            "importance weights average {:.3e} of their expectation; the information is underestimated",
            to_f64(weight_coverage)
        ));
    }
    Ok(MismatchedFim {
        j_vartheta,
        weight_coverage,
        result,
        j_theta_stderr,
        samples,
        max_diag_rel_stderr,
    })
}

/// Exact value of the expectation estimated by [`fim_mismatched`], over
/// `theta`.
///
/// `p0^2 / p1` is proportional to a zero-mean complex Gaussian with
/// covariance `Sigma = (2 C0^-1 - C1^-1)^-1`, so the expectation reduces to
/// second moments of quadratic forms. Dense `O(dim (NK)^3)`; meant as a
/// reference for the sampler.
pub fn fim_mismatched_exact<T: Real>(pair: &MismatchPair<T>, jac: &JacobianBlocks<T>) -> Result<FimResult<T>> {
    let s0 = &pair.assumed_steering;
    let c0 = pair.assumed_model.covariance(s0)?;
    let c1 = pair.actual_model.covariance(&pair.actual_steering)?;
    let c0_inv = c0.factor.inverse();
    let c1_inv = c1.factor.inverse();
    let precision = HermitianFactor::new(&c0_inv + &c0_inv - &c1_inv, "stability", "")
        .map_err(|_| Error::MismatchUnstable)?;
    let sigma = precision.inverse();
    let scale = (c1.log_det() - precision.log_det() - c0.log_det() * lit(2.0)).exp();
    let r0 = complexify(pair.assumed_model.reflection());
    let s0d = s0.dense();
    let rs = &r0 * s0d.adjoint();
    let dim = s0.num_intermediate();
    let mut means = Vec::with_capacity(dim);
    let mut products = Vec::with_capacity(dim);
    for a in 0..dim {
        let ds = s0.dense_parameter_derivative(a);
        let half = &ds * &rs;
        let dc = &half + half.adjoint();
        let c0_dc = &c0_inv * &dc;
        let b = &c0_dc * &c0_inv * &sigma;
        means.push((b.trace() - c0_dc.trace()).re);
        products.push(b);
    }
    let mut j = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        for b in a..dim {
            let cross = products[a].component_mul(&products[b].transpose()).sum().re;
            let v = scale * (means[a] * means[b] + cross);
            j[(a, b)] = v;
            j[(b, a)] = v;
        }
    }
    let g = jac.assembled();
    Ok(FimResult::from_information(&g * j * g.transpose(), Derivation::ClosedForm))
}

/// Outcome of comparing the scalar sum expansion with the matrix chain rule.
#[derive(Debug, Clone)]
pub struct ChainRuleReport<T: Real> {
    pub expansion: DMatrix<T>,
    pub product: DMatrix<T>,
    /// `|expansion - product|` per entry.
    pub discrepancy: DMatrix<T>,
    /// Discrepancy normalised by `sqrt(|P_ii P_jj|)`.
    pub normalized: DMatrix<T>,
}

impl<T: Real> ChainRuleReport<T> {
    pub fn max_normalized(&self) -> T {
        self.normalized.iter().fold(T::zero(), |m, &v| m.max(v))
    }
}

/// Evaluates `J_theta` as the quadruple sum over path pairs `(n, m)`,
/// `(p, q)` in which each distance term is divided by the number of paths
/// that share it, and compares it with `G J G^T`.
pub fn chain_rule_expansion<T: Real>(j: &FimIntermediate<T>, jac: &JacobianBlocks<T>) -> Result<ChainRuleReport<T>> {
    let (num_tx, num_rx) = (j.num_tx(), j.num_rx());
    let p_count = num_tx * num_rx;
    if jac.num_paths() != p_count {
        return Err(Error::Dimension {
            context: "chain rule expansion",
            expected: p_count.to_string(),
            got: jac.num_paths().to_string(),
        });
    }
    let (mf, nf) = (count::<T>(num_tx), count::<T>(num_rx));
    // weights of (tau, f, d_t, d_r) of path c in the derivative of component u
    let weights = |u: usize, c: usize| -> [T; 4] {
        let (n, m) = (c / num_tx, c % num_tx);
        if u < 2 {
            [
                jac.delay_pos[(u, c)],
                jac.doppler_pos[(u, c)],
                jac.dist_tx[(u, m)] / nf,
                jac.dist_rx[(u, n)] / mf,
            ]
        } else {
            [T::zero(), jac.doppler_vel[(u - 2, c)], T::zero(), T::zero()]
        }
    };
    let idx = |c: usize| -> [usize; 4] {
        [
            c,
            p_count + c,
            2 * p_count + c % num_tx,
            2 * p_count + num_tx + c / num_tx,
        ]
    };
    let mut expansion = DMatrix::zeros(4, 4);
    for u in 0..4 {
        for v in 0..4 {
            let mut acc = T::zero();
            for c in 0..p_count {
                let wc = weights(u, c);
                let ic = idx(c);
                for d in 0..p_count {
                    let wd = weights(v, d);
                    let id = idx(d);
                    for a in 0..4 {
                        if wc[a] == T::zero() {
                            continue;
                        }
                        for b in 0..4 {
                            acc += wc[a] * wd[b] * j.matrix[(ic[a], id[b])];
                        }
                    }
                }
            }
            expansion[(u, v)] = acc;
        }
    }
    let g = jac.assembled();
    let product = &g * &j.matrix * g.transpose();
    let discrepancy = (&expansion - &product).abs();
    let normalized = DMatrix::from_fn(4, 4, |i, k| {
        let s = (product[(i, i)] * product[(k, k)]).abs().sqrt();
        if s > T::zero() {
            discrepancy[(i, k)] / s
        } else {
            discrepancy[(i, k)]
        }
    });
    Ok(ChainRuleReport {
        expansion,
        product,
        discrepancy,
        normalized,
    })
}

/// CSV rows `block,i,j,value` for the information matrix and bound.
pub fn fim_report_csv<T: Real>(result: &FimResult<T>) -> String {
    let mut out = String::from("block,i,j,value\n");
    for (name, m) in [("j_theta", &result.j_theta), ("crb", &result.crb)] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let _ = writeln!(out, "{name},{i},{j},{:e}", to_f64(m[(i, j)]));
            }
        }
    }
    out
}

/// Human-readable summary of a bound.
pub fn fim_summary<T: Real>(result: &FimResult<T>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "derivation: {}", result.derivation.name());
    let _ = writeln!(out, "condition number: {:.3e}", to_f64(result.condition));
    for c in Component::ALL {
        let _ = writeln!(out, "root bound {:>8}: {:.6e}", c.name(), to_f64(c.variance(&result.crb).sqrt()));
    }
    for w in &result.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::StationLayout;
    use crate::linalg::normalized_error;
    use crate::signal_model::{Decay, NoiseCorrelation, ReflectionCorrelation};
    use nalgebra::Point2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scenario(num_tx: usize, num_rx: usize, bits: usize, df: f64) -> Scenario<f64> {
        let layout = StationLayout::ring(Point2::new(15_000.0, 10_000.0), 7000.0, num_tx, num_rx).unwrap();
        let mut gmsk = GmskParams::gsm(df);
        gmsk.num_bits = bits;
        Scenario {
            reflection: ReflectionCorrelation::uniform(Decay::Rate(0.1), 1.0, num_tx * num_rx),
            layout,
            truth: TargetState::new(15_150.0, 10_127.5, 50.0, 30.0),
            gmsk,
            energies: vec![1.0; num_tx],
            path_gain: 1.0,
            noise: NoiseCorrelation {
                decay: Decay::Rate(1e-5),
            },
            scnr_db: 10.0,
        }
    }

    fn setup(sc: &Scenario<f64>, seed: u64) -> (GmskWaveform<f64>, SteeringSet<f64>, CovarianceModel<f64>, CovarianceBundle<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wf = sc.waveform(random_bits(sc.layout.num_tx(), sc.gmsk.num_bits, &mut rng)).unwrap();
        let st = sc.steering(&wf, &sc.truth, None).unwrap();
        let model = sc.covariance_model().unwrap();
        let cov = model.covariance(&st).unwrap();
        (wf, st, model, cov)
    }

    #[test]
    fn closed_form_matches_trace_formula() {
        let sc = scenario(2, 2, 4, 300.0);
        let (_, st, model, cov) = setup(&sc, 1);
        let a = fim_intermediate(&st, &model, &cov).unwrap();
        let b = fim_intermediate_trace(&st, &model, &cov).unwrap();
        assert!(normalized_error(&a.matrix, &b.matrix) < 1e-8);
    }

    #[test]
    fn analytic_trace_matches_finite_differences() {
        let sc = scenario(2, 1, 4, 300.0);
        let (wf, st, model, cov) = setup(&sc, 2);
        let a = fim_intermediate_trace(&st, &model, &cov).unwrap();
        let steps = FdSteps::for_waveform(&sc.gmsk);
        let b = fim_intermediate_trace_fd(&sc, &model, &wf, &steps).unwrap();
        assert!(normalized_error(&b.matrix, &a.matrix) < 1e-5);
    }

    #[test]
    fn information_vanishes_without_signal() {
        let mut sc = scenario(2, 2, 4, 300.0);
        let (wf, _, model, _) = setup(&sc, 3);
        sc.energies = vec![1e-30; 2];
        let st = sc.steering(&wf, &sc.truth, None).unwrap();
        let cov = model.covariance(&st).unwrap();
        let j = fim_intermediate(&st, &model, &cov).unwrap();
        assert!(j.matrix.abs().max() < 1e-20);
    }

    #[test]
    fn blocks_are_transposes() {
        let sc = scenario(2, 3, 4, 300.0);
        let (_, st, model, cov) = setup(&sc, 4);
        let j = fim_intermediate(&st, &model, &cov).unwrap();
        for a in Block::ALL {
            for b in Block::ALL {
                assert_eq!(j.block(a, b), j.block(b, a).transpose());
            }
        }
        assert!(j.block(Block::Doppler, Block::Doppler).diagonal().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn velocity_rows_come_only_from_doppler_blocks() {
        let sc = scenario(2, 2, 4, 300.0);
        let (_, st, model, cov) = setup(&sc, 5);
        let mut j = fim_intermediate(&st, &model, &cov).unwrap();
        let p = 4;
        for b in Block::ALL {
            let (r, c) = if b == Block::Doppler { (p, p) } else { j.block(Block::Doppler, b).shape() };
            j.set_block(Block::Doppler, b, &DMatrix::zeros(r, c));
            j.set_block(b, Block::Doppler, &DMatrix::zeros(c, r));
        }
        let jac = jacobian(&sc.layout, &sc.truth, sc.wavelength()).unwrap();
        let res = fim_theta(&j, &jac).unwrap();
        for i in 0..4 {
            for k in 2..4 {
                assert_eq!(res.j_theta[(i, k)], 0.0);
                assert_eq!(res.j_theta[(k, i)], 0.0);
            }
        }
    }

    #[test]
    fn single_pair_is_rank_deficient() {
        let sc = scenario(1, 1, 8, 300.0);
        let (_, st, model, cov) = setup(&sc, 6);
        let j = fim_intermediate(&st, &model, &cov).unwrap();
        let jac = jacobian(&sc.layout, &sc.truth, sc.wavelength()).unwrap();
        let res = fim_theta(&j, &jac).unwrap();
        assert!(res.rank <= 3);
        assert!(!res.is_reliable());
        assert!(!res.warnings.is_empty());
    }

    #[test]
    fn expansion_equals_product_for_single_pair() {
        let sc = scenario(1, 1, 4, 300.0);
        let (_, st, model, cov) = setup(&sc, 7);
        let j = fim_intermediate(&st, &model, &cov).unwrap();
        let jac = jacobian(&sc.layout, &sc.truth, sc.wavelength()).unwrap();
        let rep = chain_rule_expansion(&j, &jac).unwrap();
        assert!(rep.max_normalized() < 1e-12);
    }

    #[test]
    fn expansion_velocity_block_matches_product() {
        let sc = scenario(2, 3, 4, 300.0);
        let (_, st, model, cov) = setup(&sc, 8);
        let j = fim_intermediate(&st, &model, &cov).unwrap();
        let jac = jacobian(&sc.layout, &sc.truth, sc.wavelength()).unwrap();
        let rep = chain_rule_expansion(&j, &jac).unwrap();
        let h = &jac.doppler_vel;
        let hjh = h * j.block(Block::Doppler, Block::Doppler) * h.transpose();
        let vv = rep.expansion.view((2, 2), (2, 2)).into_owned();
        assert!(normalized_error(&vv, &hjh) < 1e-12);
    }

    #[test]
    fn one_draw_ecrbob_equals_single_bound() {
        let sc = scenario(2, 2, 4, 300.0);
        let e = ecrbob(&sc, 1, 42).unwrap();
        let bits = random_bits(2, 4, &mut substream(42, 0));
        let single = crb_for_bits(&sc, &sc.covariance_model().unwrap(), bits).unwrap();
        assert_eq!(e.mean, single.crb);
        assert!(e.stderr[(0, 0)].is_nan());
    }

    #[test]
    fn ecrbob_is_reproducible() {
        let sc = scenario(2, 2, 4, 300.0);
        let a = ecrbob(&sc, 4, 7).unwrap();
        let b = ecrbob(&sc, 4, 7).unwrap();
        assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn matched_mismatch_weights_are_unity() {
        let sc = scenario(1, 2, 4, 300.0);
        let (_, st, model, cov) = setup(&sc, 9);
        let pair = MismatchPair {
            assumed_steering: st.clone(),
            assumed_model: model.clone(),
            actual_steering: st.clone(),
            actual_model: model.clone(),
        };
        let jac = jacobian(&sc.layout, &sc.truth, sc.wavelength()).unwrap();
        let mc = fim_mismatched(&pair, &jac, 4000, 1).unwrap();
        let exact = fim_intermediate(&st, &model, &cov).unwrap();
        let exact_theta = fim_theta(&exact, &jac).unwrap();
        for i in 0..4 {
            let diff = (mc.result.j_theta[(i, i)] - exact_theta.j_theta[(i, i)]).abs();
            assert!(diff < 4.0 * mc.j_theta_stderr[(i, i)], "entry {i}");
        }
    }

    #[test]
    fn exact_mismatched_reduces_to_matched() {
        let sc = scenario(2, 2, 4, 300.0);
        let (_, st, model, cov) = setup(&sc, 10);
        let pair = MismatchPair {
            assumed_steering: st.clone(),
            assumed_model: model.clone(),
            actual_steering: st.clone(),
            actual_model: model.clone(),
        };
        let jac = jacobian(&sc.layout, &sc.truth, sc.wavelength()).unwrap();
        let exact = fim_mismatched_exact(&pair, &jac).unwrap();
        let matched = fim_theta(&fim_intermediate(&st, &model, &cov).unwrap(), &jac).unwrap();
        assert!(normalized_error(&exact.j_theta, &matched.j_theta) < 1e-8);
    }

    #[test]
    fn sampler_agrees_with_exact_under_mild_mismatch() {
        let mut sc = scenario(1, 2, 4, 300.0);
        sc.scnr_db = -10.0;
        let (wf, actual, model, _) = setup(&sc, 11);
        let mut rng = substream(11, 1);
        let pert = crate::signal_model::SignalPerturbation::random(sc.num_samples(), 2, 1e-3, &mut rng);
        let assumed = sc.steering(&wf, &sc.truth, Some(&pert)).unwrap();
        let pair = MismatchPair {
            assumed_steering: assumed,
            assumed_model: model.clone(),
            actual_steering: actual,
            actual_model: model,
        };
        let jac = jacobian(&sc.layout, &sc.truth, sc.wavelength()).unwrap();
        let exact = fim_mismatched_exact(&pair, &jac).unwrap();
        let mc = fim_mismatched(&pair, &jac, 20_000, 3).unwrap();
        assert!((mc.weight_coverage - 1.0).abs() < 0.1);
        let cov = pair.actual_model.covariance(&pair.actual_steering).unwrap();
        let matched = fim_theta(&fim_intermediate(&pair.actual_steering, &pair.actual_model, &cov).unwrap(), &jac).unwrap();
        assert!(normalized_error(&exact.j_theta, &matched.j_theta) > 1e-2);
        for i in 0..4 {
            let diff = (mc.result.j_theta[(i, i)] - exact.j_theta[(i, i)]).abs();
            assert!(diff < 4.0 * mc.j_theta_stderr[(i, i)], "entry {i}: {diff} vs {}", mc.j_theta_stderr[(i, i)]);
        }
    }

    #[test]
    fn csv_report_has_header_and_rows() {
        let sc = scenario(2, 2, 4, 300.0);
        let res = crb_for_bits(&sc, &sc.covariance_model().unwrap(), random_bits(2, 4, &mut substream(1, 0))).unwrap();
        let csv = fim_report_csv(&res);
        assert!(csv.starts_with("block,i,j,value\n"));
        assert_eq!(csv.lines().count(), 33);
    }
}
