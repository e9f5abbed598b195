//! GMSK signals of opportunity.
//!
//! Transmitter `m` (zero-based) emits
//!
//! ```text
//! s_m(t) = A_m exp(j * sum_i c_mi q(t - i Tp)) exp(j 2 pi (m + 1) df t),  i = 1..Nc
//! ```
//!
//! where `q` is the integrated Gaussian-filtered frequency pulse. `q` is
//! evaluated in closed form, so the waveform and its time derivative can be
//! sampled at arbitrary (fractional) delays.

use num_complex::Complex;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{cis, count, lit, Real, SPEED_OF_LIGHT};

/// Half-length of the phase pulse support, in bit durations, measured from
/// the pulse centre.
pub const PULSE_HALF_SUPPORT_BITS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmskParams<T: Real> {
    /// Bit duration `Tp`, seconds.
    pub bit_duration: T,
    /// Bandwidth-time product `B Tp`.
    pub bt_product: T,
    /// Bits per observation window, `Nc`.
    pub num_bits: usize,
    /// Carrier offset between neighbouring transmitters, Hz.
    pub freq_offset: T,
    /// Carrier frequency, Hz.
    pub carrier: T,
    /// Samples per bit.
    pub oversampling: usize,
}

impl<T: Real> GmskParams<T> {
    /// GSM-like parameters: 577 us bits, BT = 0.3, 16 bits, 900 MHz carrier,
    /// four samples per bit.
    pub fn gsm(freq_offset: T) -> Self {
        GmskParams {
            bit_duration: lit(577e-6),
            bt_product: lit(0.3),
            num_bits: 16,
            freq_offset,
            carrier: lit(900e6),
            oversampling: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bit_duration > T::zero()) || !self.bit_duration.is_finite() {
            return Err(Error::invalid("waveform", "bit duration must be positive"));
        }
        if !(self.bt_product > T::zero()) || !self.bt_product.is_finite() {
            return Err(Error::invalid("waveform", "BT product must be positive"));
        }
        if self.num_bits == 0 {
            return Err(Error::invalid("waveform", "at least one bit is required"));
        }
        if self.oversampling == 0 {
            return Err(Error::invalid("waveform", "oversampling must be at least 1"));
        }
        if !(self.carrier > T::zero()) || !self.carrier.is_finite() {
            return Err(Error::invalid("waveform", "carrier frequency must be positive"));
        }
        if !self.freq_offset.is_finite() {
            return Err(Error::invalid("waveform", "frequency offset must be finite"));
        }
        Ok(())
    }

    /// `Ts = Tp / oversampling`.
    pub fn sample_period(&self) -> T {
        self.bit_duration / count(self.oversampling)
    }

    /// `K = Nc * oversampling`.
    pub fn num_samples(&self) -> usize {
        self.num_bits * self.oversampling
    }

    pub fn wavelength(&self) -> T {
        lit::<T>(SPEED_OF_LIGHT) / self.carrier
    }

    /// Sampling instants `k Ts`, `k = 1..K`.
    pub fn sample_times(&self) -> Vec<T> {
        let ts = self.sample_period();
        (1..=self.num_samples()).map(|k| count::<T>(k) * ts).collect()
    }
}

/// Bits `c_mi` of one transmitter, each `-1` or `+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitSequence(Vec<i8>);

impl BitSequence {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::invalid("bit sequence", "every bit must be -1 or +1"));
        }
        Ok(BitSequence(bits))
    }

    pub fn ones(len: usize) -> Self {
        BitSequence(vec![1; len])
    }

    /// Equiprobable i.i.d. bits.
    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        BitSequence((0..len).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
    }

    pub fn bits(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Draws one independent bit sequence per transmitter.
pub fn random_bits<R: Rng + ?Sized>(num_tx: usize, num_bits: usize, rng: &mut R) -> Vec<BitSequence> {
    (0..num_tx).map(|_| BitSequence::random(num_bits, rng)).collect()
}

/// Upper Gaussian tail probability `(1/sqrt(2 pi)) * int_x^inf exp(-u^2/2) du`.
pub fn gaussian_tail<T: Real>(x: T) -> T {
    lit::<T>(0.5) * (x / lit::<T>(2.0).sqrt()).erfc()
}

fn gaussian_density<T: Real>(x: T) -> T {
    (-x * x / lit::<T>(2.0)).exp() / T::two_pi().sqrt()
}

/// GMSK frequency pulse `z` and its running integral `q`.
///
/// `z(t) = pi/(2 Tp) * (Q(k (t - Tp)) - Q(k t))` with `k = 2 pi B / sqrt(ln 2)`;
/// it is symmetric about `Tp/2` and integrates to `pi/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePulse<T: Real> {
    bit_duration: T,
    kappa: T,
    half_support: T,
}

impl<T: Real> PhasePulse<T> {
    pub fn new(params: &GmskParams<T>) -> Result<Self> {
        params.validate()?;
        let bandwidth = params.bt_product / params.bit_duration;
        Ok(PhasePulse {
            bit_duration: params.bit_duration,
            kappa: T::two_pi() * bandwidth / T::ln_2().sqrt(),
            half_support: lit::<T>(PULSE_HALF_SUPPORT_BITS) * params.bit_duration,
        })
    }

    pub fn bit_duration(&self) -> T {
        self.bit_duration
    }

    /// Half-width of the truncated support around the pulse centre `Tp/2`.
    pub fn half_support(&self) -> T {
        self.half_support
    }

    fn centre(&self) -> T {
        self.bit_duration / lit::<T>(2.0)
    }

    /// Antiderivative helper `H(t) = t Q(-k t) + phi(k t) / k`, which vanishes
    /// as `t -> -inf`.
    fn lower_primitive(&self, t: T) -> T {
        t * gaussian_tail(-self.kappa * t) + gaussian_density(self.kappa * t) / self.kappa
    }

    /// Frequency pulse `z(t)`, rad/s.
    pub fn frequency(&self, t: T) -> T {
        let offset = t - self.centre();
        if offset.abs() > self.half_support {
            return T::zero();
        }
        // mirror into the left half, where both tails are small and do not cancel
        let t = if offset > T::zero() { self.bit_duration - t } else { t };
        let scale = T::frac_pi_2() / self.bit_duration;
        scale * (gaussian_tail(-self.kappa * t) - gaussian_tail(-self.kappa * (t - self.bit_duration)))
    }

    /// Phase pulse `q(t) = int_{-inf}^t z(u) du`, rad.
    pub fn phase(&self, t: T) -> T {
        let offset = t - self.centre();
        if offset < -self.half_support {
            return T::zero();
        }
        if offset > self.half_support {
            return T::frac_pi_2();
        }
        let left = |t: T| {
            T::frac_pi_2() / self.bit_duration
                * (self.lower_primitive(t) - self.lower_primitive(t - self.bit_duration))
        };
        if offset <= T::zero() {
            left(t)
        } else {
            T::frac_pi_2() - left(self.bit_duration - t)
        }
    }
}

/// A set of GMSK waveforms, one per transmitter, with per-transmitter
/// normalisation `sum_k |s_m(k Ts)|^2 Ts = 1`.
#[derive(Debug, Clone)]
pub struct GmskWaveform<T: Real> {
    params: GmskParams<T>,
    pulse: PhasePulse<T>,
    bits: Vec<BitSequence>,
    amplitudes: Vec<T>,
}

impl<T: Real> GmskWaveform<T> {
    pub fn new(params: GmskParams<T>, bits: Vec<BitSequence>) -> Result<Self> {
        let pulse = PhasePulse::new(&params)?;
        if bits.is_empty() {
            return Err(Error::invalid("waveform", "at least one bit sequence is required"));
        }
        if let Some(b) = bits.iter().find(|b| b.len() != params.num_bits) {
            return Err(Error::Dimension {
                context: "bit sequence length",
                expected: params.num_bits.to_string(),
                got: b.len().to_string(),
            });
        }
        let mut waveform = GmskWaveform {
            params,
            pulse,
            bits,
            amplitudes: Vec::new(),
        };
        let ts = params.sample_period();
        let times = params.sample_times();
        waveform.amplitudes = (0..waveform.bits.len())
            .map(|m| {
                let energy = times
                    .iter()
                    .map(|&t| cis(waveform.phase(m, t)).norm_sqr() * ts)
                    .fold(T::zero(), |a, b| a + b);
                T::one() / energy.sqrt()
            })
            .collect();
        Ok(waveform)
    }

    pub fn params(&self) -> &GmskParams<T> {
        &self.params
    }

    pub fn pulse(&self) -> &PhasePulse<T> {
        &self.pulse
    }

    pub fn bits(&self) -> &[BitSequence] {
        &self.bits
    }

    pub fn num_tx(&self) -> usize {
        self.bits.len()
    }

    /// Normalisation factor `A_m`.
    pub fn amplitude(&self, m: usize) -> T {
        self.amplitudes[m]
    }

    fn carrier_offset(&self, m: usize) -> T {
        T::two_pi() * count::<T>(m + 1) * self.params.freq_offset
    }

    /// Unwrapped phase of `s_m(t)`, including the carrier offset term.
    pub fn phase(&self, m: usize, t: T) -> T {
        let tp = self.params.bit_duration;
        let mut acc = T::zero();
        for (i, &c) in self.bits[m].bits().iter().enumerate() {
            let q = self.pulse.phase(t - count::<T>(i + 1) * tp);
            if c > 0 {
                acc += q;
            } else {
                acc -= q;
            }
        }
        acc + self.carrier_offset(m) * t
    }

    /// Instantaneous angular frequency `d phase / dt`, rad/s.
    pub fn phase_rate(&self, m: usize, t: T) -> T {
        let tp = self.params.bit_duration;
        let mut acc = T::zero();
        for (i, &c) in self.bits[m].bits().iter().enumerate() {
            let z = self.pulse.frequency(t - count::<T>(i + 1) * tp);
            if c > 0 {
                acc += z;
            } else {
                acc -= z;
            }
        }
        acc + self.carrier_offset(m)
    }

    pub fn sample(&self, m: usize, t: T) -> Complex<T> {
        cis(self.phase(m, t)) * self.amplitudes[m]
    }

    /// `d s_m / dt` at `t`. The derivative with respect to a delay `tau` of
    /// `s_m(t - tau)` is the negative of this evaluated at `t - tau`.
    pub fn sample_time_derivative(&self, m: usize, t: T) -> Complex<T> {
        self.sample(m, t) * Complex::new(T::zero(), self.phase_rate(m, t))
    }

    /// `s_m(k Ts)`, `k = 1..K`.
    pub fn sampled(&self, m: usize) -> Vec<Complex<T>> {
        self.params.sample_times().into_iter().map(|t| self.sample(m, t)).collect()
    }
}
