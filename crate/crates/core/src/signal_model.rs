//! Received-signal model `r = S zeta + w` with `zeta ~ CN(0, R)` and
//! `w ~ CN(0, Q)`, so that `r ~ CN(0, C)` with `C = S R S^H + Q`.
//!
//! Paths are indexed `c = n * M + m` for receiver `n` and transmitter `m`.
//! Receiver `n` owns rows `n * K .. (n + 1) * K` of every `NK`-long vector.

use nalgebra::{DMatrix, DVector, Point2};
use num_complex::Complex;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{intermediate_params, IntermediateParams, StationLayout, TargetState};
use crate::linalg::{complexify, hermitian_part, psd_factor, CMatrix, CVector, HermitianFactor};
use crate::scalar::{cis, complex_normal, count, lit, Real};
use crate::waveform::{BitSequence, GmskParams, GmskWaveform};

/// Eigenvalues of `R` below this fraction of the largest are treated as zero.
pub const PSD_CLAMP: f64 = 1e-12;

/// Exponential correlation decay. `Independent` is the infinite-rate limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decay<T: Real> {
    Independent,
    Rate(T),
}

impl<T: Real> Decay<T> {
    /// Maps an infinite rate onto `Independent`.
    pub fn from_rate(rate: T) -> Self {
        if rate.is_finite() {
            Decay::Rate(rate)
        } else {
            Decay::Independent
        }
    }

    pub fn rate(&self) -> T {
        match self {
            Decay::Independent => T::infinity(),
            Decay::Rate(r) => *r,
        }
    }

    /// Correlation between two distinct members separated by `separation`.
    pub fn correlation(&self, separation: T) -> T {
        match self {
            Decay::Independent => T::zero(),
            Decay::Rate(r) => (-*r * separation).exp(),
        }
    }

    fn validate(&self, what: &'static str) -> Result<()> {
        match self {
            Decay::Rate(r) if !(*r >= T::zero()) || !r.is_finite() => {
                Err(Error::invalid(what, "decay rate must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

/// Reflection-coefficient covariance `R = diag(sigma) (R^r kron R^t) diag(sigma)`,
/// with angular correlation `exp(-decay * dphi)` where `dphi` is the angle
/// subtended at the target by the two stations.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionCorrelation<T: Real> {
    pub decay: Decay<T>,
    /// Per-path variance `sigma_c^2`, indexed by path.
    pub variances: Vec<T>,
}

impl<T: Real> ReflectionCorrelation<T> {
    pub fn uniform(decay: Decay<T>, variance: T, num_paths: usize) -> Self {
        ReflectionCorrelation {
            decay,
            variances: vec![variance; num_paths],
        }
    }
}

/// Spatial noise correlation `Q~_{nn'} = exp(-decay * |p_n - p_n'|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseCorrelation<T: Real> {
    pub decay: Decay<T>,
}

/// Angle at `vertex` between the directions to `a` and `b`, in `[0, pi]`.
pub fn separation_angle<T: Real>(vertex: &Point2<T>, a: &Point2<T>, b: &Point2<T>) -> T {
    let u = a - vertex;
    let v = b - vertex;
    let cross = u.x * v.y - u.y * v.x;
    let dot = u.dot(&v);
    cross.abs().atan2(dot)
}

fn angular_correlation<T: Real>(decay: &Decay<T>, vertex: &Point2<T>, stations: &[Point2<T>]) -> DMatrix<T> {
    let n = stations.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            T::one()
        } else {
            decay.correlation(separation_angle(vertex, &stations[i], &stations[j]))
        }
    })
}

/// Complete description of one radar scenario.
#[derive(Debug, Clone)]
pub struct Scenario<T: Real> {
    pub layout: StationLayout<T>,
    pub truth: TargetState<T>,
    pub gmsk: GmskParams<T>,
    /// Transmit energy per transmitter.
    pub energies: Vec<T>,
    /// Path-gain reference `P0`.
    pub path_gain: T,
    pub reflection: ReflectionCorrelation<T>,
    pub noise: NoiseCorrelation<T>,
    pub scnr_db: T,
}

impl<T: Real> Scenario<T> {
    pub fn validate(&self) -> Result<()> {
        self.gmsk.validate()?;
        let m = self.layout.num_tx();
        if self.energies.len() != m {
            return Err(Error::Dimension {
                context: "transmit energies",
                expected: m.to_string(),
                got: self.energies.len().to_string(),
            });
        }
        if self.energies.iter().any(|e| !(*e > T::zero()) || !e.is_finite()) {
            return Err(Error::invalid("scenario", "transmit energies must be positive"));
        }
        if !(self.path_gain > T::zero()) || !self.path_gain.is_finite() {
            return Err(Error::invalid("scenario", "path gain must be positive"));
        }
        if !self.scnr_db.is_finite() {
            return Err(Error::invalid("scenario", "SCNR must be finite"));
        }
        if !self.truth.is_finite() {
            return Err(Error::invalid("scenario", "target state must be finite"));
        }
        let p = self.layout.num_paths();
        if self.reflection.variances.len() != p {
            return Err(Error::Dimension {
                context: "reflection variances",
                expected: p.to_string(),
                got: self.reflection.variances.len().to_string(),
            });
        }
        if self.reflection.variances.iter().any(|v| !(*v >= T::zero()) || !v.is_finite()) {
            return Err(Error::invalid("reflection", "variances must be non-negative"));
        }
        self.reflection.decay.validate("reflection")?;
        self.noise.decay.validate("noise")?;
        self.layout.check_clearance(&self.truth.position())?;
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.gmsk.num_samples()
    }

    pub fn wavelength(&self) -> T {
        self.gmsk.wavelength()
    }

    pub fn with_scnr(&self, scnr_db: T) -> Self {
        Scenario {
            scnr_db,
            ..self.clone()
        }
    }

    pub fn intermediate(&self, target: &TargetState<T>) -> Result<IntermediateParams<T>> {
        intermediate_params(&self.layout, target, self.wavelength())
    }

    /// `sum_c sigma_c^2 E_m P0 / (d_tm^2 d_rn^2)` at `target`.
    pub fn received_power(&self, target: &TargetState<T>) -> Result<T> {
        let ip = self.intermediate(target)?;
        let m_count = self.layout.num_tx();
        let mut acc = T::zero();
        for (c, var) in self.reflection.variances.iter().enumerate() {
            let (n, m) = (c / m_count, c % m_count);
            let d = ip.dist_tx[m] * ip.dist_rx[n];
            acc += *var * self.energies[m] * self.path_gain / (d * d);
        }
        Ok(acc)
    }

    /// Per-sample noise power `sigma_w^2` that realises `scnr_db` at the truth.
    pub fn noise_power(&self) -> Result<T> {
        let power = self.received_power(&self.truth)?;
        let ratio = lit::<T>(10.0).powf(self.scnr_db / lit(10.0));
        Ok(power / (count::<T>(self.layout.num_rx()) * ratio))
    }

    /// SCNR in dB implied by a given noise power.
    pub fn scnr_from_noise_power(&self, noise_power: T) -> Result<T> {
        let power = self.received_power(&self.truth)?;
        Ok(lit::<T>(10.0) * (power / (count::<T>(self.layout.num_rx()) * noise_power)).log10())
    }

    /// Reflection covariance `R` (`NM x NM`), angles measured at `target`.
    pub fn reflection_covariance(&self, target: &TargetState<T>) -> Result<DMatrix<T>> {
        self.layout.check_clearance(&target.position())?;
        let p = target.position();
        let rr = angular_correlation(&self.reflection.decay, &p, self.layout.receivers());
        let rt = angular_correlation(&self.reflection.decay, &p, self.layout.transmitters());
        let rho = rr.kronecker(&rt);
        let sigma: Vec<T> = self.reflection.variances.iter().map(|v| v.sqrt()).collect();
        Ok(DMatrix::from_fn(rho.nrows(), rho.ncols(), |i, j| sigma[i] * sigma[j] * rho[(i, j)]))
    }

    /// Spatial noise correlation `Q~` (`N x N`, unit diagonal), checked to be
    /// positive definite.
    pub fn noise_correlation(&self) -> Result<DMatrix<T>> {
        let d = self.layout.receiver_distances();
        let q = DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| {
            if i == j {
                T::one()
            } else {
                self.noise.decay.correlation(d[(i, j)])
            }
        });
        if q.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite {
                matrix: "noise correlation",
                hint: "; increase the noise decay rate",
            });
        }
        Ok(q)
    }

    /// Covariance model with `R` and `Q` evaluated at the truth. These are
    /// treated as known and held fixed when the target hypothesis changes.
    pub fn covariance_model(&self) -> Result<CovarianceModel<T>> {
        CovarianceModel::new(
            self.reflection_covariance(&self.truth)?,
            self.noise_correlation()?,
            self.noise_power()?,
            self.num_samples(),
        )
    }

    pub fn waveform(&self, bits: Vec<BitSequence>) -> Result<GmskWaveform<T>> {
        if bits.len() != self.layout.num_tx() {
            return Err(Error::Dimension {
                context: "bit sequences",
                expected: self.layout.num_tx().to_string(),
                got: bits.len().to_string(),
            });
        }
        GmskWaveform::new(self.gmsk, bits)
    }

    pub fn steering(
        &self,
        waveform: &GmskWaveform<T>,
        target: &TargetState<T>,
        perturbation: Option<&SignalPerturbation<T>>,
    ) -> Result<SteeringSet<T>> {
        let ip = self.intermediate(target)?;
        SteeringSet::from_intermediate(&ip, waveform, &self.energies, self.path_gain, perturbation)
    }
}

/// Additive error on the sampled transmit signals, one length-`K` sequence
/// per path. Models imperfect knowledge of the illuminating waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPerturbation<T: Real> {
    /// `K x NM`.
    pub samples: CMatrix<T>,
}

impl<T: Real> SignalPerturbation<T> {
    /// I.i.d. `CN(0, variance)` samples.
    pub fn random<R: Rng + ?Sized>(num_samples: usize, num_paths: usize, variance: T, rng: &mut R) -> Self {
        let sd = variance.sqrt();
        let mut samples = CMatrix::zeros(num_samples, num_paths);
        for c in 0..num_paths {
            for k in 0..num_samples {
                samples[(k, c)] = complex_normal::<T, R>(rng) * sd;
            }
        }
        SignalPerturbation { samples }
    }
}

/// Which intermediate-parameter family a derivative column belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Delay,
    Doppler,
    DistTx,
    DistRx,
}

impl ParamKind {
    pub const ALL: [ParamKind; 4] = [ParamKind::Delay, ParamKind::Doppler, ParamKind::DistTx, ParamKind::DistRx];
}

/// Per-path signal columns `u_c` (length `K`) and their derivatives with
/// respect to the path's own delay, Doppler and distances.
#[derive(Debug, Clone)]
pub struct SteeringSet<T: Real> {
    num_tx: usize,
    num_rx: usize,
    /// `K x NM` each.
    u: CMatrix<T>,
    d_delay: CMatrix<T>,
    d_doppler: CMatrix<T>,
    d_dist_tx: CMatrix<T>,
    d_dist_rx: CMatrix<T>,
}

impl<T: Real> SteeringSet<T> {
    pub fn from_intermediate(
        ip: &IntermediateParams<T>,
        waveform: &GmskWaveform<T>,
        energies: &[T],
        path_gain: T,
        perturbation: Option<&SignalPerturbation<T>>,
    ) -> Result<Self> {
        let num_tx = ip.dist_tx.len();
        let num_rx = ip.dist_rx.len();
        let p = num_tx * num_rx;
        if waveform.num_tx() != num_tx || energies.len() != num_tx {
            return Err(Error::Dimension {
                context: "transmitter count",
                expected: num_tx.to_string(),
                got: format!("{} waveforms, {} energies", waveform.num_tx(), energies.len()),
            });
        }
        let k_count = waveform.params().num_samples();
        if let Some(pert) = perturbation {
            if pert.samples.shape() != (k_count, p) {
                return Err(Error::Dimension {
                    context: "signal perturbation",
                    expected: format!("{k_count}x{p}"),
                    got: format!("{}x{}", pert.samples.nrows(), pert.samples.ncols()),
                });
            }
        }
        let times = waveform.params().sample_times();
        let mut u = CMatrix::zeros(k_count, p);
        let mut d_delay = CMatrix::zeros(k_count, p);
        let mut d_doppler = CMatrix::zeros(k_count, p);
        let mut d_dist_tx = CMatrix::zeros(k_count, p);
        let mut d_dist_rx = CMatrix::zeros(k_count, p);
        for c in 0..p {
            let (n, m) = (c / num_tx, c % num_tx);
            let (dt, dr) = (ip.dist_tx[m], ip.dist_rx[n]);
            let amp = (energies[m] * path_gain).sqrt() / (dt * dr);
            for (k, &t) in times.iter().enumerate() {
                let rot = cis(T::two_pi() * ip.doppler[c] * t);
                let mut s = waveform.sample(m, t - ip.tau[c]);
                let ds = waveform.sample_time_derivative(m, t - ip.tau[c]);
                if let Some(pert) = perturbation {
                    s += pert.samples[(k, c)];
                }
                let val = s * rot * amp;
                u[(k, c)] = val;
                d_delay[(k, c)] = -(ds * rot * amp);
                d_doppler[(k, c)] = val * Complex::new(T::zero(), T::two_pi() * t);
                d_dist_tx[(k, c)] = -val / dt;
                d_dist_rx[(k, c)] = -val / dr;
            }
        }
        Ok(SteeringSet {
            num_tx,
            num_rx,
            u,
            d_delay,
            d_doppler,
            d_dist_tx,
            d_dist_rx,
        })
    }

    pub fn num_tx(&self) -> usize {
        self.num_tx
    }

    pub fn num_rx(&self) -> usize {
        self.num_rx
    }

    pub fn num_paths(&self) -> usize {
        self.num_tx * self.num_rx
    }

    pub fn num_samples(&self) -> usize {
        self.u.nrows()
    }

    /// Number of intermediate parameters `2NM + M + N`.
    pub fn num_intermediate(&self) -> usize {
        2 * self.num_paths() + self.num_tx + self.num_rx
    }

    /// Compact `K x NM` signal columns.
    pub fn columns(&self) -> &CMatrix<T> {
        &self.u
    }

    pub fn derivative_columns(&self, kind: ParamKind) -> &CMatrix<T> {
        match kind {
            ParamKind::Delay => &self.d_delay,
            ParamKind::Doppler => &self.d_doppler,
            ParamKind::DistTx => &self.d_dist_tx,
            ParamKind::DistRx => &self.d_dist_rx,
        }
    }

    fn expand(&self, compact: &CMatrix<T>) -> CMatrix<T> {
        let k = self.num_samples();
        let mut out = CMatrix::zeros(self.num_rx * k, self.num_paths());
        for c in 0..self.num_paths() {
            let n = c / self.num_tx;
            out.view_mut((n * k, c), (k, 1)).copy_from(&compact.column(c));
        }
        out
    }

    /// Block-structured `NK x NM` matrix `S`.
    pub fn dense(&self) -> CMatrix<T> {
        self.expand(&self.u)
    }

    /// `NK x NM` matrix whose column `c` is the derivative of column `c` of
    /// `S` with respect to the `kind` parameter of path `c`.
    pub fn dense_derivative(&self, kind: ParamKind) -> CMatrix<T> {
        self.expand(self.derivative_columns(kind))
    }

    /// Paths whose columns depend on intermediate parameter `index`, with the
    /// derivative family that carries the dependence. Layout of the
    /// intermediate vector: delays, Dopplers (both by path), transmitter
    /// distances, receiver distances.
    pub fn parameter_paths(&self, index: usize) -> (ParamKind, Vec<usize>) {
        let p = self.num_paths();
        let (m_count, n_count) = (self.num_tx, self.num_rx);
        if index < p {
            (ParamKind::Delay, vec![index])
        } else if index < 2 * p {
            (ParamKind::Doppler, vec![index - p])
        } else if index < 2 * p + m_count {
            let m = index - 2 * p;
            (ParamKind::DistTx, (0..n_count).map(|n| n * m_count + m).collect())
        } else {
            let n = index - 2 * p - m_count;
            (ParamKind::DistRx, (0..m_count).map(|m| n * m_count + m).collect())
        }
    }

    /// `d S / d vartheta_index` as a dense `NK x NM` matrix.
    pub fn dense_parameter_derivative(&self, index: usize) -> CMatrix<T> {
        let (kind, paths) = self.parameter_paths(index);
        let cols = self.derivative_columns(kind);
        let k = self.num_samples();
        let mut out = CMatrix::zeros(self.num_rx * k, self.num_paths());
        for c in paths {
            let n = c / self.num_tx;
            out.view_mut((n * k, c), (k, 1)).copy_from(&cols.column(c));
        }
        out
    }
}

/// Known second-order statistics: `R`, `Q~` and `sigma_w^2`.
#[derive(Debug, Clone)]
pub struct CovarianceModel<T: Real> {
    reflection: DMatrix<T>,
    noise_corr: DMatrix<T>,
    noise_power: T,
    num_samples: usize,
}

impl<T: Real> CovarianceModel<T> {
    pub fn new(reflection: DMatrix<T>, noise_corr: DMatrix<T>, noise_power: T, num_samples: usize) -> Result<Self> {
        if !reflection.is_square() || !noise_corr.is_square() {
            return Err(Error::invalid("covariance model", "matrices must be square"));
        }
        if !(noise_power > T::zero()) || !noise_power.is_finite() {
            return Err(Error::invalid("covariance model", "noise power must be positive"));
        }
        Ok(CovarianceModel {
            reflection,
            noise_corr,
            noise_power,
            num_samples,
        })
    }

    pub fn reflection(&self) -> &DMatrix<T> {
        &self.reflection
    }

    pub fn noise_correlation(&self) -> &DMatrix<T> {
        &self.noise_corr
    }

    pub fn noise_power(&self) -> T {
        self.noise_power
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn with_noise_power(&self, noise_power: T) -> Result<Self> {
        CovarianceModel::new(self.reflection.clone(), self.noise_corr.clone(), noise_power, self.num_samples)
    }

    /// Dense `Q = sigma_w^2 Q~ kron I_K`.
    pub fn noise_dense(&self) -> CMatrix<T> {
        let q = self.noise_corr.kronecker(&DMatrix::identity(self.num_samples, self.num_samples)) * self.noise_power;
        complexify(&q)
    }

    /// `C = S R S^H + Q`, symmetrised and factored.
    pub fn covariance(&self, steering: &SteeringSet<T>) -> Result<CovarianceBundle<T>> {
        let s = steering.dense();
        if s.ncols() != self.reflection.nrows() || s.nrows() != self.noise_corr.nrows() * self.num_samples {
            return Err(Error::Dimension {
                context: "covariance assembly",
                expected: format!("{}x{}", self.noise_corr.nrows() * self.num_samples, self.reflection.nrows()),
                got: format!("{}x{}", s.nrows(), s.ncols()),
            });
        }
        let r = complexify(&self.reflection);
        let c = hermitian_part(&(&s * &r * s.adjoint() + self.noise_dense()));
        CovarianceBundle::new(c)
    }

    /// One draw of `r = S zeta + w`.
    pub fn synthesize<R: Rng + ?Sized>(&self, steering: &SteeringSet<T>, rng: &mut R) -> CVector<T> {
        let p = self.reflection.nrows();
        let n_rx = self.noise_corr.nrows();
        let k = self.num_samples;
        let lr = psd_factor(&self.reflection, lit(PSD_CLAMP));
        let lq = self
            .noise_corr
            .clone()
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| psd_factor(&self.noise_corr, lit(PSD_CLAMP)));
        let g1: Vec<Complex<T>> = (0..p).map(|_| complex_normal::<T, R>(rng)).collect();
        let g2: Vec<Complex<T>> = (0..n_rx * k).map(|_| complex_normal::<T, R>(rng)).collect();
        let zeta: Vec<Complex<T>> = (0..p)
            .map(|i| (0..p).fold(Complex::new(T::zero(), T::zero()), |acc, j| acc + g1[j] * lr[(i, j)]))
            .collect();
        let sd = self.noise_power.sqrt();
        let u = steering.columns();
        let m_count = steering.num_tx();
        DVector::from_fn(n_rx * k, |row, _| {
            let (n, kk) = (row / k, row % k);
            let mut acc = Complex::new(T::zero(), T::zero());
            for n2 in 0..=n {
                acc += g2[n2 * k + kk] * lq[(n, n2)];
            }
            acc *= sd;
            for m in 0..m_count {
                let c = n * m_count + m;
                acc += u[(kk, c)] * zeta[c];
            }
            acc
        })
    }
}

/// Observation covariance together with its Cholesky factorisation.
#[derive(Debug, Clone)]
pub struct CovarianceBundle<T: Real> {
    pub matrix: CMatrix<T>,
    pub factor: HermitianFactor<T>,
}

impl<T: Real> CovarianceBundle<T> {
    pub fn new(matrix: CMatrix<T>) -> Result<Self> {
        let factor = HermitianFactor::new(matrix.clone(), "observation covariance", "")?;
        Ok(CovarianceBundle { matrix, factor })
    }

    pub fn log_det(&self) -> T {
        self.factor.log_det()
    }
}
