//! Maximum-likelihood estimation of the target state.
//!
//! The log-likelihood `-r^H C^-1 r - ln det C` is evaluated through the
//! matrix inversion lemma. With `R = L L^T`, `Q = sigma^2 Q~ kron I_K`,
//! `G = S^H Q^-1 S` and `b = S^H Q^-1 r`:
//!
//! ```text
//! ln det C    = NK ln sigma^2 + K ln det Q~ + ln det(I + L^T G L)
//! r^H C^-1 r  = r^H Q^-1 r - (L^T b)^H (I + L^T G L)^-1 (L^T b)
//! ```
//!
//! Only `NM x NM` systems are factored per candidate.

use nalgebra::{DMatrix, Point2};
use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{TargetState, COLOCATION_RADIUS_M};
use crate::linalg::{psd_factor, CMatrix, CVector};
use crate::scalar::{cis, count, lit, Real};
use crate::signal_model::{CovarianceModel, Scenario, SignalPerturbation, PSD_CLAMP};
use crate::waveform::GmskWaveform;

/// Dense reference log-likelihood `-r^H C^-1 r - ln det C` (constant
/// dropped). Returns `-inf` when the candidate is colocated with a station.
pub fn log_likelihood<T: Real>(
    r: &CVector<T>,
    scenario: &Scenario<T>,
    model: &CovarianceModel<T>,
    waveform: &GmskWaveform<T>,
    perturbation: Option<&SignalPerturbation<T>>,
    candidate: &TargetState<T>,
) -> Result<T> {
    let steering = match scenario.steering(waveform, candidate, perturbation) {
        Ok(s) => s,
        Err(Error::Colocated { .. }) => return Ok(-T::infinity()),
        Err(e) => return Err(e),
    };
    let cov = model.covariance(&steering)?;
    Ok(-cov.factor.quad_form(r) - cov.log_det())
}

/// Signal columns at one candidate position, before the Doppler rotation.
#[derive(Debug, Clone)]
pub struct PositionTerms<T: Real> {
    /// `K x NM`: `sqrt(E P0)/(d_t d_r) * (s_m(kTs - tau) + n_c(k))`.
    base: CMatrix<T>,
    /// Doppler per unit `vx` and per unit `vy`, Hz per m/s, by path.
    doppler_vx: Vec<T>,
    doppler_vy: Vec<T>,
}

/// Fast log-likelihood over candidate target states for a fixed
/// observation.
#[derive(Debug, Clone)]
pub struct LikelihoodEvaluator<'a, T: Real> {
    scenario: &'a Scenario<T>,
    waveform: &'a GmskWaveform<T>,
    perturbation: Option<&'a SignalPerturbation<T>>,
    times: Vec<T>,
    amp_scale: Vec<T>,
    /// Factor of `R` with the null columns removed.
    refl_factor: DMatrix<T>,
    /// `sqrt(diag R)` when `R` is diagonal.
    refl_diag: Option<Vec<T>>,
    noise_inv: DMatrix<T>,
    noise_power: T,
    /// `(Q~^-1 kron I) r / sigma^2`.
    whitened: CVector<T>,
    constant: T,
}

impl<'a, T: Real> LikelihoodEvaluator<'a, T> {
    pub fn new(
        scenario: &'a Scenario<T>,
        model: &CovarianceModel<T>,
        waveform: &'a GmskWaveform<T>,
        perturbation: Option<&'a SignalPerturbation<T>>,
        r: &CVector<T>,
    ) -> Result<Self> {
        let n_rx = scenario.layout.num_rx();
        let k = scenario.num_samples();
        if r.len() != n_rx * k {
            return Err(Error::Dimension {
                context: "observation length",
                expected: (n_rx * k).to_string(),
                got: r.len().to_string(),
            });
        }
        let full = psd_factor(model.reflection(), lit(PSD_CLAMP));
        let keep: Vec<usize> = (0..full.ncols()).filter(|&j| full.column(j).iter().any(|v| *v != T::zero())).collect();
        let refl_factor = full.select_columns(&keep);
        let r_mat = model.reflection();
        let diagonal = (0..r_mat.nrows()).all(|i| (0..r_mat.ncols()).all(|j| i == j || r_mat[(i, j)] == T::zero()));
        let refl_diag = diagonal.then(|| r_mat.diagonal().iter().map(|v| v.max(T::zero()).sqrt()).collect());
        let chol = model.noise_correlation().clone().cholesky().ok_or(Error::NotPositiveDefinite {
            matrix: "noise correlation",
            hint: "; increase the noise decay rate",
        })?;
        let log_det_q = chol.l().diagonal().iter().fold(T::zero(), |a, d| a + d.ln()) * lit(2.0);
        let noise_inv = chol.inverse();
        let sigma2 = model.noise_power();
        let whitened = CVector::from_fn(n_rx * k, |row, _| {
            let (n, kk) = (row / k, row % k);
            let mut acc = Complex::new(T::zero(), T::zero());
            for n2 in 0..n_rx {
                acc += r[n2 * k + kk] * noise_inv[(n, n2)];
            }
            acc / sigma2
        });
        let rqr = r.dotc(&whitened).re;
        let constant = rqr + count::<T>(n_rx * k) * sigma2.ln() + count::<T>(k) * log_det_q;
        let amp_scale = scenario.energies.iter().map(|e| (*e * scenario.path_gain).sqrt()).collect();
        Ok(LikelihoodEvaluator {
            scenario,
            waveform,
            perturbation,
            times: scenario.gmsk.sample_times(),
            amp_scale,
            refl_factor,
            refl_diag,
            noise_inv,
            noise_power: sigma2,
            whitened,
            constant,
        })
    }

    /// Waveform samples and Doppler coefficients at a candidate position;
    /// `None` when colocated with a station.
    pub fn position_terms(&self, x: T, y: T) -> Option<PositionTerms<T>> {
        let layout = &self.scenario.layout;
        let p = Point2::new(x, y);
        let radius = lit::<T>(COLOCATION_RADIUS_M);
        let unit = |s: &Point2<T>| {
            let d = s - p;
            let dist = d.norm();
            (d / dist, dist)
        };
        let tx: Vec<_> = layout.transmitters().iter().map(unit).collect();
        let rx: Vec<_> = layout.receivers().iter().map(unit).collect();
        if tx.iter().chain(rx.iter()).any(|(_, d)| !(*d > radius)) {
            return None;
        }
        let (m_count, n_count) = (tx.len(), rx.len());
        let light = lit::<T>(crate::scalar::SPEED_OF_LIGHT);
        let lambda = self.scenario.wavelength();
        let k = self.times.len();
        let mut base = CMatrix::zeros(k, m_count * n_count);
        let mut doppler_vx = Vec::with_capacity(m_count * n_count);
        let mut doppler_vy = Vec::with_capacity(m_count * n_count);
        for (n, (ur, dr)) in rx.iter().enumerate() {
            for (m, (ut, dt)) in tx.iter().enumerate() {
                let c = n * m_count + m;
                let tau = (*dt + *dr) / light;
                let amp = self.amp_scale[m] / (*dt * *dr);
                for (kk, &t) in self.times.iter().enumerate() {
                    let mut s = self.waveform.sample(m, t - tau);
                    if let Some(pert) = self.perturbation {
                        s += pert.samples[(kk, c)];
                    }
                    base[(kk, c)] = s * amp;
                }
                doppler_vx.push((ut.x + ur.x) / lambda);
                doppler_vy.push((ut.y + ur.y) / lambda);
            }
        }
        Some(PositionTerms {
            base,
            doppler_vx,
            doppler_vy,
        })
    }

    /// `exp(j 2 pi v coeff_c k Ts)`, `k = 1..K`, as a `K x NM` matrix,
    /// generated by repeated rotation.
    pub fn phasors(&self, coeffs: &[T], v: T) -> CMatrix<T> {
        let k = self.times.len();
        let ts = self.scenario.gmsk.sample_period();
        let mut out = CMatrix::zeros(k, coeffs.len());
        for (c, &coeff) in coeffs.iter().enumerate() {
            let step = cis(T::two_pi() * v * coeff * ts);
            let col = &mut out.as_mut_slice()[c * k..(c + 1) * k];
            let mut e = step;
            for slot in col.iter_mut() {
                *slot = e;
                e *= step;
            }
        }
        out
    }

    /// Log-likelihood from cached position terms and velocity phasors.
    pub fn evaluate_with(&self, terms: &PositionTerms<T>, phase_vx: &CMatrix<T>, phase_vy: &CMatrix<T>) -> T {
        let zero = Complex::new(T::zero(), T::zero());
        let k = self.times.len();
        let m_count = self.scenario.layout.num_tx();
        let p = terms.base.ncols();
        let (base, vx, vy) = (terms.base.as_slice(), phase_vx.as_slice(), phase_vy.as_slice());
        let u: Vec<Complex<T>> = (0..k * p).map(|i| base[i] * vx[i] * vy[i]).collect();
        let y = self.whitened.as_slice();
        let dotc = |a: &[Complex<T>], b: &[Complex<T>]| a.iter().zip(b).fold(zero, |acc, (x, y)| acc + x.conj() * y);
        let mut gram = vec![zero; p * p];
        let mut proj = vec![zero; p];
        for i in 0..p {
            let ni = i / m_count;
            let ui = &u[i * k..(i + 1) * k];
            proj[i] = dotc(ui, &y[ni * k..(ni + 1) * k]);
            for j in i..p {
                let w = self.noise_inv[(ni, j / m_count)];
                if w == T::zero() {
                    continue;
                }
                let g = dotc(ui, &u[j * k..(j + 1) * k]) * (w / self.noise_power);
                gram[i * p + j] = g;
                gram[j * p + i] = g.conj();
            }
        }
        // inner = I + L^T G L and z = L^T b
        let (rank, mut inner, z) = match &self.refl_diag {
            Some(d) => {
                let mut inner = vec![zero; p * p];
                for a in 0..p {
                    for b in 0..p {
                        inner[a * p + b] = gram[a * p + b] * (d[a] * d[b]);
                    }
                }
                (p, inner, (0..p).map(|a| proj[a] * d[a]).collect::<Vec<_>>())
            }
            None => {
                let l = &self.refl_factor;
                let rank = l.ncols();
                let z: Vec<_> = (0..rank).map(|a| (0..p).fold(zero, |acc, i| acc + proj[i] * l[(i, a)])).collect();
                let mut gl = vec![zero; p * rank];
                for i in 0..p {
                    for b in 0..rank {
                        gl[i * rank + b] = (0..p).fold(zero, |acc, j| acc + gram[i * p + j] * l[(j, b)]);
                    }
                }
                let mut inner = vec![zero; rank * rank];
                for a in 0..rank {
                    for b in 0..rank {
                        inner[a * rank + b] = (0..p).fold(zero, |acc, i| acc + gl[i * rank + b] * l[(i, a)]);
                    }
                }
                (rank, inner, z)
            }
        };
        for a in 0..rank {
            inner[a * rank + a] += T::one();
        }
        // in-place lower Cholesky of the Hermitian `inner`
        let mut log_det = T::zero();
        for j in 0..rank {
            let mut d = inner[j * rank + j].re;
            for q in 0..j {
                d -= inner[j * rank + q].norm_sqr();
            }
            if !(d > T::zero()) {
                return -T::infinity();
            }
            let d = d.sqrt();
            log_det += d.ln();
            inner[j * rank + j] = Complex::new(d, T::zero());
            for i in j + 1..rank {
                let mut v = inner[i * rank + j];
                for q in 0..j {
                    v -= inner[i * rank + q] * inner[j * rank + q].conj();
                }
                inner[i * rank + j] = v / d;
            }
        }
        let mut w = z;
        let mut quad = T::zero();
        for i in 0..rank {
            let mut v = w[i];
            for q in 0..i {
                v -= inner[i * rank + q] * w[q];
            }
            w[i] = v / inner[i * rank + i].re;
            quad += w[i].norm_sqr();
        }
        let value = quad - self.constant - log_det * lit(2.0);
        if value.is_finite() {
            value
        } else {
            -T::infinity()
        }
    }

    /// Log-likelihood at an arbitrary candidate (`-inf` if colocated).
    pub fn evaluate(&self, candidate: &TargetState<T>) -> T {
        match self.position_terms(candidate.x, candidate.y) {
            Some(terms) => {
                let px = self.phasors(&terms.doppler_vx, candidate.vx);
                let py = self.phasors(&terms.doppler_vy, candidate.vy);
                self.evaluate_with(&terms, &px, &py)
            }
            None => -T::infinity(),
        }
    }
}

/// One searched coordinate: `count` grid nodes spanning `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis<T: Real> {
    pub min: T,
    pub max: T,
    pub count: usize,
}

impl<T: Real> Axis<T> {
    pub fn new(min: T, max: T, count: usize) -> Self {
        Axis { min, max, count }
    }

    pub fn fixed(value: T) -> Self {
        Axis {
            min: value,
            max: value,
            count: 1,
        }
    }

    /// Whether the coordinate is searched at all.
    pub fn is_free(&self) -> bool {
        self.count > 1 && self.max > self.min
    }

    pub fn node(&self, i: usize) -> T {
        if !self.is_free() {
            return self.min;
        }
        self.min + (self.max - self.min) * count::<T>(i) / count::<T>(self.count - 1)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !self.min.is_finite() || !self.max.is_finite() || self.max < self.min {
            return Err(Error::invalid("search box", format!("{name} range is empty or not finite")));
        }
        if self.count == 0 || (self.max > self.min && self.count < 2) {
            return Err(Error::invalid(
                "search box",
                format!("{name} needs at least two grid nodes when its range is non-degenerate"),
            ));
        }
        Ok(())
    }
}

/// Search region and optimiser settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSpec<T: Real> {
    pub x: Axis<T>,
    pub y: Axis<T>,
    pub vx: Axis<T>,
    pub vy: Axis<T>,
    pub max_iterations: usize,
    /// Initial simplex edge in grid cells.
    pub simplex_scale: T,
    /// Convergence threshold on the relative spread of log-likelihoods.
    pub tolerance: T,
}

impl<T: Real> SearchSpec<T> {
    /// Box of half-widths `pos_half`/`vel_half` around the given centres with
    /// the default 21 x 21 x 11 x 11 grid.
    pub fn centred(position: Point2<T>, pos_half: T, velocity: [T; 2], vel_half: T) -> Self {
        SearchSpec {
            x: Axis::new(position.x - pos_half, position.x + pos_half, 21),
            y: Axis::new(position.y - pos_half, position.y + pos_half, 21),
            vx: Axis::new(velocity[0] - vel_half, velocity[0] + vel_half, 11),
            vy: Axis::new(velocity[1] - vel_half, velocity[1] + vel_half, 11),
            max_iterations: 500,
            simplex_scale: T::one(),
            tolerance: lit(1e-6),
        }
    }

    pub fn axes(&self) -> [Axis<T>; 4] {
        [self.x, self.y, self.vx, self.vy]
    }

    pub fn validate(&self) -> Result<()> {
        for (a, name) in self.axes().iter().zip(["x", "y", "vx", "vy"]) {
            a.validate(name)?;
        }
        if !(self.tolerance > T::zero()) {
            return Err(Error::invalid("search", "tolerance must be positive"));
        }
        if !(self.simplex_scale > T::zero()) {
            return Err(Error::invalid("search", "simplex scale must be positive"));
        }
        Ok(())
    }

    pub fn contains(&self, s: &TargetState<T>) -> bool {
        self.axes()
            .iter()
            .zip(s.to_array())
            .all(|(a, v)| v >= a.min && v <= a.max)
    }

    pub fn num_cells(&self) -> usize {
        self.axes().iter().map(|a| a.count).product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlEstimate<T: Real> {
    pub theta_hat: TargetState<T>,
    pub log_likelihood: T,
    /// Simplex iterations used by the refinement.
    pub iterations: usize,
    /// Coarse-grid node indices `(x, y, vx, vy)` of the best cell.
    pub grid_cell: [usize; 4],
    pub grid_log_likelihood: T,
    pub converged: bool,
}

fn better<T: Real>(a: T, b: T) -> bool {
    a > b
}

/// Exhaustive coarse grid followed by a simplex refinement from the best
/// node. Ties on the grid go to the lowest linear cell index.
pub fn ml_estimate<T: Real>(eval: &LikelihoodEvaluator<'_, T>, search: &SearchSpec<T>) -> Result<MlEstimate<T>> {
    search.validate()?;
    let [ax, ay, avx, avy] = search.axes();
    let per_position = avx.count * avy.count;
    let positions: Vec<(usize, T, usize)> = (0..ax.count * ay.count)
        .into_par_iter()
        .map(|pos| {
            let (ix, iy) = (pos / ay.count, pos % ay.count);
            let mut best = (-T::infinity(), usize::MAX);
            if let Some(terms) = eval.position_terms(ax.node(ix), ay.node(iy)) {
                let py: Vec<CMatrix<T>> = (0..avy.count).map(|j| eval.phasors(&terms.doppler_vy, avy.node(j))).collect();
                for ivx in 0..avx.count {
                    let px = eval.phasors(&terms.doppler_vx, avx.node(ivx));
                    for (ivy, pyv) in py.iter().enumerate() {
                        let v = eval.evaluate_with(&terms, &px, pyv);
                        if better(v, best.0) {
                            best = (v, ivx * avy.count + ivy);
                        }
                    }
                }
            }
            (pos, best.0, best.1)
        })
        .collect();
    let mut winner: Option<(T, usize)> = None;
    for (pos, v, local) in positions {
        if local == usize::MAX || !(v > -T::infinity()) {
            continue;
        }
        if winner.is_none_or(|(w, _)| v > w) {
            winner = Some((v, pos * per_position + local));
        }
    }
    let (grid_ll, cell) = winner.ok_or(Error::EmptySearch)?;
    let grid_cell = [
        cell / (ay.count * per_position),
        (cell / per_position) % ay.count,
        (cell / avy.count) % avx.count,
        cell % avy.count,
    ];
    let start = [
        ax.node(grid_cell[0]),
        ay.node(grid_cell[1]),
        avx.node(grid_cell[2]),
        avy.node(grid_cell[3]),
    ];
    let refined = refine(eval, search, start, grid_ll);
    Ok(MlEstimate {
        theta_hat: TargetState::from_array(refined.point),
        log_likelihood: refined.value,
        iterations: refined.iterations,
        grid_cell,
        grid_log_likelihood: grid_ll,
        converged: refined.converged,
    })
}

struct Refined<T: Real> {
    point: [T; 4],
    value: T,
    iterations: usize,
    converged: bool,
}

/// Nelder-Mead over the free axes in box-normalised coordinates, clamped to
/// the box. The starting point is kept unless a strictly better one is found.
fn refine<T: Real>(eval: &LikelihoodEvaluator<'_, T>, search: &SearchSpec<T>, start: [T; 4], start_value: T) -> Refined<T> {
    let axes = search.axes();
    let free: Vec<usize> = (0..4).filter(|&i| axes[i].is_free()).collect();
    let dim = free.len();
    if dim == 0 || search.max_iterations == 0 {
        return Refined {
            point: start,
            value: start_value,
            iterations: 0,
            converged: true,
        };
    }
    let to_point = |u: &[T]| -> [T; 4] {
        let mut p = start;
        for (j, &i) in free.iter().enumerate() {
            let a = &axes[i];
            let t = u[j].max(T::zero()).min(T::one());
            p[i] = a.min + (a.max - a.min) * t;
        }
        p
    };
    let clamp = |u: Vec<T>| -> Vec<T> { u.into_iter().map(|v| v.max(T::zero()).min(T::one())).collect() };
    let objective = |u: &[T]| -> T {
        let v = eval.evaluate(&TargetState::from_array(to_point(u)));
        if v > -T::infinity() {
            v
        } else {
            -T::infinity()
        }
    };
    let origin: Vec<T> = free
        .iter()
        .map(|&i| {
            let a = &axes[i];
            (start[i] - a.min) / (a.max - a.min)
        })
        .collect();
    let mut simplex: Vec<(Vec<T>, T)> = vec![(origin.clone(), start_value)];
    for (j, &i) in free.iter().enumerate() {
        let step = search.simplex_scale / count::<T>(axes[i].count - 1);
        let mut v = origin.clone();
        v[j] = if v[j] + step <= T::one() { v[j] + step } else { v[j] - step };
        let v = clamp(v);
        let f = objective(&v);
        simplex.push((v, f));
    }
    let (alpha, gamma, rho, sigma) = (T::one(), lit::<T>(2.0), lit::<T>(0.5), lit::<T>(0.5));
    let mut iterations = 0;
    let mut converged = false;
    while iterations < search.max_iterations {
        // stable sort: earlier vertices win ties, so the start stays best unless beaten
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        let spread = (best - worst).abs();
        let scale = best.abs().max(T::one());
        if best.is_finite() && worst.is_finite() && spread <= search.tolerance * scale {
            converged = true;
            break;
        }
        iterations += 1;
        let centroid: Vec<T> = (0..dim)
            .map(|j| simplex[..dim].iter().fold(T::zero(), |acc, v| acc + v.0[j]) / count::<T>(dim))
            .collect();
        let along = |coef: T| -> Vec<T> {
            clamp((0..dim).map(|j| centroid[j] + coef * (simplex[dim].0[j] - centroid[j])).collect())
        };
        let xr = along(-alpha);
        let fr = objective(&xr);
        if fr > simplex[0].1 {
            let xe = along(-gamma);
            let fe = objective(&xe);
            simplex[dim] = if fe > fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr > simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr > simplex[dim].1 {
            let xc = along(-rho);
            let fc = objective(&xc);
            (xc, fc)
        } else {
            let xc = along(rho);
            let fc = objective(&xc);
            (xc, fc)
        };
        if fc > simplex[dim].1.max(fr) || (fc > simplex[dim].1 && fr <= simplex[dim].1) {
            simplex[dim] = (xc, fc);
            continue;
        }
        let best_point = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            let shrunk: Vec<T> = (0..dim).map(|j| best_point[j] + sigma * (v.0[j] - best_point[j])).collect();
            let f = objective(&shrunk);
            *v = (shrunk, f);
        }
    }
    simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let (best_u, best_f) = simplex.swap_remove(0);
    if best_f > start_value {
        Refined {
            point: to_point(&best_u),
            value: best_f,
            iterations,
            converged,
        }
    } else {
        Refined {
            point: start,
            value: start_value,
            iterations,
            converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::StationLayout;
    use crate::rng::substream;
    use crate::signal_model::{Decay, NoiseCorrelation, ReflectionCorrelation};
    use crate::waveform::{random_bits, GmskParams};

    fn scenario(decay_r: Decay<f64>, decay_q: Decay<f64>) -> Scenario<f64> {
        let layout = StationLayout::ring(Point2::new(15_000.0, 10_000.0), 7000.0, 2, 3).unwrap();
        let mut gmsk = GmskParams::gsm(300.0);
        gmsk.num_bits = 8;
        Scenario {
            reflection: ReflectionCorrelation::uniform(decay_r, 1.0, 6),
            layout,
            truth: TargetState::new(15_150.0, 10_127.5, 50.0, 30.0),
            gmsk,
            energies: vec![1.0; 2],
            path_gain: 1.0,
            noise: NoiseCorrelation { decay: decay_q },
            scnr_db: 5.0,
        }
    }

    fn observation(sc: &Scenario<f64>, seed: u64) -> (GmskWaveform<f64>, CovarianceModel<f64>, CVector<f64>) {
        let mut rng = substream(seed, 0);
        let wf = sc.waveform(random_bits(2, sc.gmsk.num_bits, &mut rng)).unwrap();
        let model = sc.covariance_model().unwrap();
        let st = sc.steering(&wf, &sc.truth, None).unwrap();
        let r = model.synthesize(&st, &mut rng);
        (wf, model, r)
    }

    #[test]
    fn fast_path_matches_dense() {
        for (dr, dq) in [
            (Decay::Independent, Decay::Independent),
            (Decay::Rate(0.1), Decay::Rate(1e-5)),
            (Decay::Rate(0.0), Decay::Rate(5e-6)),
        ] {
            let sc = scenario(dr, dq);
            let (wf, model, r) = observation(&sc, 1);
            let mut rng = substream(3, 3);
            let pert = SignalPerturbation::random(sc.num_samples(), 6, 0.1, &mut rng);
            for pert in [None, Some(&pert)] {
                let eval = LikelihoodEvaluator::new(&sc, &model, &wf, pert, &r).unwrap();
                for cand in [
                    sc.truth,
                    TargetState::new(15_300.0, 9_900.0, 40.0, 35.0),
                    TargetState::new(14_600.0, 10_400.0, -20.0, 0.0),
                ] {
                    let fast = eval.evaluate(&cand);
                    let dense = log_likelihood(&r, &sc, &model, &wf, pert, &cand).unwrap();
                    assert!((fast - dense).abs() < 1e-9 * dense.abs().max(1.0), "{fast} vs {dense}");
                }
            }
        }
    }

    #[test]
    fn phase_rotation_invariance() {
        let sc = scenario(Decay::Independent, Decay::Independent);
        let (wf, model, r) = observation(&sc, 2);
        let rot = r.map(|z| z * cis(0.7));
        let a = LikelihoodEvaluator::new(&sc, &model, &wf, None, &r).unwrap().evaluate(&sc.truth);
        let b = LikelihoodEvaluator::new(&sc, &model, &wf, None, &rot).unwrap().evaluate(&sc.truth);
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn zero_observation_gives_negative_log_det() {
        let sc = scenario(Decay::Independent, Decay::Independent);
        let (wf, model, r) = observation(&sc, 3);
        let zero = r.map(|_| Complex::new(0.0, 0.0));
        let eval = LikelihoodEvaluator::new(&sc, &model, &wf, None, &zero).unwrap();
        let cov = model.covariance(&sc.steering(&wf, &sc.truth, None).unwrap()).unwrap();
        assert!((eval.evaluate(&sc.truth) + cov.log_det()).abs() < 1e-9 * cov.log_det().abs());
    }

    #[test]
    fn colocated_candidate_is_rejected() {
        let sc = scenario(Decay::Independent, Decay::Independent);
        let (wf, model, r) = observation(&sc, 4);
        let eval = LikelihoodEvaluator::new(&sc, &model, &wf, None, &r).unwrap();
        let rx = sc.layout.receivers()[0];
        assert_eq!(eval.evaluate(&TargetState::new(rx.x, rx.y, 0.0, 0.0)), f64::NEG_INFINITY);
        let dense = log_likelihood(&r, &sc, &model, &wf, None, &TargetState::new(rx.x, rx.y, 0.0, 0.0)).unwrap();
        assert_eq!(dense, f64::NEG_INFINITY);
    }

    #[test]
    fn degenerate_box_returns_the_point() {
        let sc = scenario(Decay::Independent, Decay::Independent);
        let (wf, model, r) = observation(&sc, 5);
        let eval = LikelihoodEvaluator::new(&sc, &model, &wf, None, &r).unwrap();
        let t = sc.truth;
        let spec = SearchSpec {
            x: Axis::fixed(t.x),
            y: Axis::fixed(t.y),
            vx: Axis::fixed(t.vx),
            vy: Axis::fixed(t.vy),
            max_iterations: 500,
            simplex_scale: 1.0,
            tolerance: 1e-6,
        };
        let est = ml_estimate(&eval, &spec).unwrap();
        assert_eq!(est.theta_hat, t);
        assert_eq!(est.log_likelihood, eval.evaluate(&t));
    }

    #[test]
    fn all_rejected_grid_is_an_error() {
        let sc = scenario(Decay::Independent, Decay::Independent);
        let (wf, model, r) = observation(&sc, 6);
        let eval = LikelihoodEvaluator::new(&sc, &model, &wf, None, &r).unwrap();
        let rx = sc.layout.receivers()[0];
        let spec = SearchSpec {
            x: Axis::fixed(rx.x),
            y: Axis::fixed(rx.y),
            vx: Axis::new(0.0, 1.0, 2),
            vy: Axis::fixed(0.0),
            max_iterations: 10,
            simplex_scale: 1.0,
            tolerance: 1e-6,
        };
        assert!(matches!(ml_estimate(&eval, &spec), Err(Error::EmptySearch)));
    }

    #[test]
    fn estimate_is_deterministic_monotone_and_in_box() {
        let mut sc = scenario(Decay::Independent, Decay::Independent);
        sc.scnr_db = 20.0;
        let (wf, model, r) = observation(&sc, 7);
        let eval = LikelihoodEvaluator::new(&sc, &model, &wf, None, &r).unwrap();
        let mut spec = SearchSpec::centred(Point2::new(15_000.0, 10_000.0), 500.0, [30.0, 30.0], 50.0);
        spec.x.count = 5;
        spec.y.count = 5;
        spec.vx.count = 5;
        spec.vy.count = 5;
        let a = ml_estimate(&eval, &spec).unwrap();
        let b = ml_estimate(&eval, &spec).unwrap();
        assert_eq!(a, b);
        assert!(a.log_likelihood >= a.grid_log_likelihood);
        assert!(spec.contains(&a.theta_hat));
        let err = [a.theta_hat.x - 15_150.0, a.theta_hat.y - 10_127.5];
        assert!(err[0].hypot(err[1]) < 250.0, "{:?}", a.theta_hat);
    }
}
