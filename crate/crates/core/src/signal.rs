//! Frequency-domain echo synthesis for monostatic OFDM access points.
//!
//! After dividing out the unit-modulus transmit symbols, AP `p` observes an
//! M × N × K cube (antenna × symbol × subcarrier)
//!
//! ```text
//! Y[m, n, k] = Σ_l β_l · e^{j2π m (d/λ) ψ_l} · e^{j2π n Ts f_l} · e^{−j2π k Δf τ_l} + noise
//! ```
//!
//! with m = 0..M−1, n = 1..N, k = 1..K and β_l = α_l · a(ψ_l)ᴴ f.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{self, SPEED_OF_LIGHT};
use crate::rng;
use crate::scenario::ScenarioConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfdmParams {
    pub carrier_frequency: f64,
    pub subcarrier_spacing: f64,
    pub subcarriers: usize,
    pub symbols: usize,
    /// Full symbol period including the cyclic prefix, seconds.
    pub symbol_period: f64,
}

impl OfdmParams {
    /// 4.9 GHz carrier, 30 kHz spacing, 7 symbols of 35.677 µs and
    /// `resource_blocks` × 12 subcarriers.
    pub fn nr_30khz(resource_blocks: usize) -> Self {
        Self {
            carrier_frequency: 4.9e9,
            subcarrier_spacing: 30e3,
            subcarriers: 12 * resource_blocks,
            symbols: 7,
            symbol_period: 35.677e-6,
        }
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("carrier_frequency", self.carrier_frequency),
            ("subcarrier_spacing", self.subcarrier_spacing),
            ("symbol_period", self.symbol_period),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositiveInput { name, value: v });
            }
        }
        if self.subcarriers == 0 || self.symbols == 0 {
            return Err(Error::Config("need at least one subcarrier and one symbol".into()));
        }
        // allow for rounding in the quoted NR symbol duration
        if self.symbol_period * self.subcarrier_spacing < 1.0 - 1e-9 {
            return Err(Error::Config(format!(
                "symbol period {} s is shorter than 1/Δf",
                self.symbol_period
            )));
        }
        Ok(())
    }
}

fn phasor(phase: f64) -> Complex64 {
    Complex64::from_polar(1.0, phase)
}

/// ULA response, element m = e^{j2π m (d/λ) ψ}, m = 0..M−1.
pub fn steering_spatial(psi: f64, antennas: usize, spacing: f64, wavelength: f64) -> Result<DVector<Complex64>> {
    if !(psi.abs() <= 1.0) {
        return Err(Error::InvalidAngle(psi));
    }
    let step = 2.0 * PI * spacing / wavelength * psi;
    Ok(DVector::from_fn(antennas, |m, _| phasor(step * m as f64)))
}

/// Slow-time response, element n = e^{j2π n Ts f_d}, n = 1..N.
pub fn steering_doppler(doppler: f64, symbols: usize, symbol_period: f64) -> DVector<Complex64> {
    let step = 2.0 * PI * symbol_period * doppler;
    DVector::from_fn(symbols, |i, _| phasor(step * (i + 1) as f64))
}

/// Subcarrier response, element k = e^{−j2π k Δf τ}, k = 1..K.
pub fn steering_delay(tau: f64, subcarriers: usize, spacing: f64) -> DVector<Complex64> {
    let step = -2.0 * PI * spacing * tau;
    DVector::from_fn(subcarriers, |i, _| phasor(step * (i + 1) as f64))
}

/// Two-way path loss in dB for carrier `fc_mhz`, range `d_km` and RCS in m².
pub fn path_loss_db(fc_mhz: f64, d_km: f64, rcs: f64) -> Result<f64> {
    for (name, value) in [("fc_mhz", fc_mhz), ("d_km", d_km), ("rcs", rcs)] {
        if !(value > 0.0) {
            return Err(Error::NonPositiveInput { name, value });
        }
    }
    Ok(103.4 + 20.0 * fc_mhz.log10() + 40.0 * d_km.log10() - 10.0 * rcs.log10())
}

/// Unit-norm beamformer with i.i.d. uniform phases.
pub fn random_beamformer<R: Rng + ?Sized>(antennas: usize, rng: &mut R) -> DVector<Complex64> {
    let scale = 1.0 / (antennas as f64).sqrt();
    DVector::from_fn(antennas, |_, _| {
        Complex64::from_polar(scale, rng.random_range(0.0..2.0 * PI))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelGain {
    /// Composite gain α · a(ψ)ᴴ f.
    pub beta: Complex64,
    /// Path-loss amplitude with random phase.
    pub alpha: Complex64,
}

/// Per-(AP, target) quantities derived from ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub delay: f64,
    pub virtual_angle: f64,
    pub doppler: f64,
    /// Linear amplitude |α| implied by the path-loss model.
    pub amplitude: f64,
}

pub fn path_params(scenario: &ScenarioConfig, ap_index: usize, target_index: usize) -> Result<PathParams> {
    let ap = &scenario.aps[ap_index];
    let target = &scenario.targets[target_index];
    let ofdm = &scenario.ofdm;
    let range = geometry::range(target.position, ap)?;
    let loss = path_loss_db(ofdm.carrier_frequency / 1e6, range / 1e3, target.rcs)?;
    Ok(PathParams {
        delay: geometry::candidate_delay(target.position, ap)?,
        virtual_angle: geometry::candidate_virtual_angle(target.position, ap)?,
        doppler: 2.0 * target.closing_speed(ap)? / ofdm.wavelength(),
        amplitude: 10f64.powf(-(loss - scenario.reference_loss_db) / 20.0),
    })
}

/// Gains for every target at one AP under a given beamformer and gain phases.
pub fn channel_gains(
    scenario: &ScenarioConfig,
    ap_index: usize,
    beamformer: &DVector<Complex64>,
    phases: &[f64],
) -> Result<Vec<ChannelGain>> {
    let ap = &scenario.aps[ap_index];
    let lambda = scenario.ofdm.wavelength();
    (0..scenario.targets.len())
        .map(|l| {
            let path = path_params(scenario, ap_index, l)?;
            let alpha = Complex64::from_polar(path.amplitude, phases[l]);
            let a = steering_spatial(path.virtual_angle, ap.antennas, ap.spacing, lambda)?;
            Ok(ChannelGain {
                beta: alpha * a.dotc(beamformer),
                alpha,
            })
        })
        .collect()
}

/// One AP's observation cube. Storage is `m + M·(k + K·n)`, so for each
/// symbol the MK entries of one EVA snapshot are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoTensor {
    pub ap_index: usize,
    pub antennas: usize,
    pub symbols: usize,
    pub subcarriers: usize,
    pub data: Vec<Complex64>,
    pub gains: Vec<ChannelGain>,
}

impl EchoTensor {
    pub fn zeros(ap_index: usize, antennas: usize, symbols: usize, subcarriers: usize) -> Self {
        Self {
            ap_index,
            antennas,
            symbols,
            subcarriers,
            data: vec![Complex64::new(0.0, 0.0); antennas * symbols * subcarriers],
            gains: Vec::new(),
        }
    }

    #[inline]
    pub fn offset(&self, m: usize, n: usize, k: usize) -> usize {
        m + self.antennas * (k + self.subcarriers * n)
    }

    pub fn get(&self, m: usize, n: usize, k: usize) -> Complex64 {
        self.data[self.offset(m, n, k)]
    }

    pub fn set(&mut self, m: usize, n: usize, k: usize, v: Complex64) {
        let i = self.offset(m, n, k);
        self.data[i] = v;
    }

    pub fn scale(&mut self, factor: Complex64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Build the cube from explicit gains; `noise_sigma` is the complex noise
/// standard deviation (σ²/2 per real component).
pub fn synthesize_with_gains<R: Rng + ?Sized>(
    scenario: &ScenarioConfig,
    ap_index: usize,
    gains: &[ChannelGain],
    noise_sigma: f64,
    rng: &mut R,
) -> Result<EchoTensor> {
    let ap = &scenario.aps[ap_index];
    let ofdm = &scenario.ofdm;
    let (m_n, n_n, k_n) = (ap.antennas, ofdm.symbols, ofdm.subcarriers);
    let mut tensor = EchoTensor::zeros(ap_index, m_n, n_n, k_n);
    tensor.gains = gains.to_vec();

    for (l, gain) in gains.iter().enumerate() {
        let path = path_params(scenario, ap_index, l)?;
        let a = steering_spatial(path.virtual_angle, m_n, ap.spacing, ofdm.wavelength())?;
        let o = steering_doppler(path.doppler, n_n, ofdm.symbol_period);
        let g = steering_delay(path.delay, k_n, ofdm.subcarrier_spacing);
        for n in 0..n_n {
            for k in 0..k_n {
                let on = gain.beta * o[n] * g[k];
                for m in 0..m_n {
                    let i = tensor.offset(m, n, k);
                    tensor.data[i] += on * a[m];
                }
            }
        }
    }

    if noise_sigma > 0.0 {
        let s = noise_sigma / 2f64.sqrt();
        for v in tensor.data.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex64::new(re * s, im * s);
        }
    }
    Ok(tensor)
}

/// Draw a beamformer and gain phases, then synthesize the cube.
pub fn synthesize_echo<R: Rng + ?Sized>(
    scenario: &ScenarioConfig,
    ap_index: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<EchoTensor> {
    let ap = &scenario.aps[ap_index];
    let f = random_beamformer(ap.antennas, rng);
    let phases: Vec<f64> = (0..scenario.targets.len())
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let gains = channel_gains(scenario, ap_index, &f, &phases)?;
    synthesize_with_gains(scenario, ap_index, &gains, noise_sigma, rng)
}

/// Synthesize every AP, each from its own stream derived from `seed`.
pub fn synthesize_scene(scenario: &ScenarioConfig, noise_sigma: f64, seed: u64) -> Result<Vec<EchoTensor>> {
    (0..scenario.aps.len())
        .map(|p| {
            let mut rng = rng::stream(seed, &[p as u64]);
            synthesize_echo(scenario, p, noise_sigma, &mut rng)
        })
        .collect()
}

/// Noise level giving `snr_db` for the strongest (AP, target) pair, using
/// the expected beamforming gain E|aᴴf|² = 1 so that |β| = |α|.
pub fn noise_sigma_for_snr(scenario: &ScenarioConfig, snr_db: f64) -> Result<f64> {
    if scenario.targets.is_empty() {
        return Err(Error::Config("SNR reference needs at least one target".into()));
    }
    let mut strongest = 0.0f64;
    for p in 0..scenario.aps.len() {
        for l in 0..scenario.targets.len() {
            strongest = strongest.max(path_params(scenario, p, l)?.amplitude);
        }
    }
    Ok(strongest / 10f64.powf(snr_db / 20.0))
}
