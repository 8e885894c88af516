//! Cramér-Rao bound on target position from per-AP delay and virtual-angle
//! Fisher information.
//!
//! For target l the parameter vector is Ξ = [τ_1..τ_P, ψ_1..ψ_P]. Each AP
//! contributes three diagonal entries
//!
//! ```text
//! Ψ_pp = 4π²|β|²Δf²·MK·N(N+1)(2N+1) / (3σ²)
//! Ω_pp = 4π²|β|²d²·M(M+1)(2M+1)·KN / (3σ²λ²)
//! Υ_pp = −2π²|β|²Δf·d·M(M+1)·N(N+1)·K / (σ²λ)
//! ```
//!
//! and the bound is (Θ F Θᵀ)⁻¹ with Θ = ∂Ξ/∂p. The gains β and Doppler are
//! treated as known, so the bound is optimistic against estimators that
//! must also resolve them.

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{self, AngleJacobian, ApGeometry, Vec2};
use crate::scenario::ScenarioConfig;
use crate::signal::{path_params, OfdmParams};

const MAX_CONDITION: f64 = 1e12;

/// Index weighting in the information sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FimConvention {
    /// Delay weight n = 1..N, angle weight m = 1..M; closed forms above.
    #[default]
    Printed,
    /// Delay weight k − k̄ over subcarriers, angle weight m − m̄; the cross
    /// term vanishes.
    PhaseCentered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CrlbOptions {
    pub convention: FimConvention,
    pub angle: AngleJacobian,
}

/// Diagonals of the Ψ, Ω and Υ blocks, one entry per AP.
#[derive(Debug, Clone, PartialEq)]
pub struct FimBlocks {
    pub psi_diag: Vec<f64>,
    pub omega_diag: Vec<f64>,
    pub upsilon_diag: Vec<f64>,
}

impl FimBlocks {
    pub fn aps(&self) -> usize {
        self.psi_diag.len()
    }

    /// F = [[Ψ, Υ], [Υ, Ω]], 2P × 2P.
    pub fn assemble(&self) -> DMatrix<f64> {
        let p = self.aps();
        let mut f = DMatrix::zeros(2 * p, 2 * p);
        for i in 0..p {
            f[(i, i)] = self.psi_diag[i];
            f[(p + i, p + i)] = self.omega_diag[i];
            f[(i, p + i)] = self.upsilon_diag[i];
            f[(p + i, i)] = self.upsilon_diag[i];
        }
        f
    }
}

fn check_noise(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveNoise(sigma));
    }
    Ok(())
}

/// Nominal |β_{p,l}| per AP: path-loss amplitude times the expected unit
/// beamforming gain.
pub fn nominal_gains(scenario: &ScenarioConfig, target_index: usize) -> Result<Vec<f64>> {
    (0..scenario.aps.len())
        .map(|p| path_params(scenario, p, target_index).map(|pp| pp.amplitude))
        .collect()
}

fn centered_sq_sum(n: usize) -> f64 {
    // Σ (i − ī)² over n consecutive integers
    let n = n as f64;
    n * (n * n - 1.0) / 12.0
}

/// Closed-form blocks for explicit gain magnitudes.
pub fn fim_blocks_for(
    gains: &[f64],
    aps: &[ApGeometry],
    ofdm: &OfdmParams,
    sigma: f64,
    convention: FimConvention,
) -> Result<FimBlocks> {
    check_noise(sigma)?;
    let s2 = sigma * sigma;
    let df = ofdm.subcarrier_spacing;
    let lambda = ofdm.wavelength();
    let k = ofdm.subcarriers as f64;
    let n = ofdm.symbols as f64;
    let mut blocks = FimBlocks {
        psi_diag: Vec::with_capacity(aps.len()),
        omega_diag: Vec::with_capacity(aps.len()),
        upsilon_diag: Vec::with_capacity(aps.len()),
    };
    for (ap, &beta) in aps.iter().zip(gains) {
        let m = ap.antennas as f64;
        let d = ap.spacing;
        let b2 = beta * beta;
        let (psi, omega, ups) = match convention {
            FimConvention::Printed => (
                4.0 * PI * PI * b2 * df * df * m * k * n * (n + 1.0) * (2.0 * n + 1.0) / (3.0 * s2),
                4.0 * PI * PI * b2 * d * d * m * (m + 1.0) * (2.0 * m + 1.0) * k * n / (3.0 * s2 * lambda * lambda),
                -2.0 * PI * PI * b2 * df * d * m * (m + 1.0) * n * (n + 1.0) * k / (s2 * lambda),
            ),
            FimConvention::PhaseCentered => (
                2.0 / s2 * b2 * (2.0 * PI * df).powi(2) * m * n * centered_sq_sum(ofdm.subcarriers),
                2.0 / s2 * b2 * (2.0 * PI * d / lambda).powi(2) * k * n * centered_sq_sum(ap.antennas),
                0.0,
            ),
        };
        blocks.psi_diag.push(psi);
        blocks.omega_diag.push(omega);
        blocks.upsilon_diag.push(ups);
    }
    Ok(blocks)
}

pub fn fim_blocks_closed_form(
    scenario: &ScenarioConfig,
    target_index: usize,
    sigma: f64,
    convention: FimConvention,
) -> Result<FimBlocks> {
    check_noise(sigma)?;
    let gains = nominal_gains(scenario, target_index)?;
    fim_blocks_for(&gains, &scenario.aps, &scenario.ofdm, sigma, convention)
}

/// Oracle: enumerate every (m, k, n) observation, form the derivative
/// vectors ∂s/∂τ and ∂s/∂ψ elementwise and take (2/σ²)·Re{aᴴb}.
pub fn fim_blocks_bruteforce(
    scenario: &ScenarioConfig,
    target_index: usize,
    sigma: f64,
    convention: FimConvention,
) -> Result<FimBlocks> {
    check_noise(sigma)?;
    let ofdm = &scenario.ofdm;
    let lambda = ofdm.wavelength();
    let gains = nominal_gains(scenario, target_index)?;
    let mut blocks = FimBlocks {
        psi_diag: Vec::new(),
        omega_diag: Vec::new(),
        upsilon_diag: Vec::new(),
    };
    for (p, ap) in scenario.aps.iter().enumerate() {
        let path = path_params(scenario, p, target_index)?;
        let beta = Complex64::new(gains[p], 0.0);
        let (m_n, k_n, n_n) = (ap.antennas, ofdm.subcarriers, ofdm.symbols);
        let m_bar = (m_n as f64 + 1.0) / 2.0;
        let k_bar = (k_n as f64 + 1.0) / 2.0;
        let (mut tt, mut aa, mut ta) = (0.0, 0.0, 0.0);
        for m in 1..=m_n {
            for k in 1..=k_n {
                for n in 1..=n_n {
                    let phase = 2.0 * PI * n as f64 * ofdm.symbol_period * path.doppler
                        - 2.0 * PI * k as f64 * ofdm.subcarrier_spacing * path.delay
                        + 2.0 * PI * m as f64 * path.virtual_angle * ap.spacing / lambda;
                    let s = beta * Complex64::from_polar(1.0, phase);
                    let (w_tau, w_psi) = match convention {
                        FimConvention::Printed => (n as f64, m as f64),
                        FimConvention::PhaseCentered => (k as f64 - k_bar, m as f64 - m_bar),
                    };
                    let d_tau = Complex64::new(0.0, -2.0 * PI * w_tau * ofdm.subcarrier_spacing) * s;
                    let d_psi = Complex64::new(0.0, 2.0 * PI * w_psi * ap.spacing / lambda) * s;
                    tt += (d_tau.conj() * d_tau).re;
                    aa += (d_psi.conj() * d_psi).re;
                    ta += (d_tau.conj() * d_psi).re;
                }
            }
        }
        let scale = 2.0 / (sigma * sigma);
        blocks.psi_diag.push(scale * tt);
        blocks.omega_diag.push(scale * aa);
        blocks.upsilon_diag.push(scale * ta);
    }
    Ok(blocks)
}

/// Θ = ∂Ξ/∂p: row 0 is ∂/∂x, row 1 is ∂/∂y; columns are τ_1..τ_P then
/// ψ_1..ψ_P.
pub fn position_jacobian(target: Vec2, aps: &[ApGeometry], angle: AngleJacobian) -> Result<DMatrix<f64>> {
    let p = aps.len();
    let mut theta = DMatrix::zeros(2, 2 * p);
    for (i, ap) in aps.iter().enumerate() {
        let dt = geometry::delay_jacobian(target, ap)?;
        let da = angle.gradient(target, ap)?;
        theta[(0, i)] = dt.x;
        theta[(1, i)] = dt.y;
        theta[(0, p + i)] = da.x;
        theta[(1, p + i)] = da.y;
    }
    Ok(theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrlbReport {
    /// Position-error covariance bound, m².
    pub covariance_bound: Matrix2<f64>,
    /// √trace of the bound, meters.
    pub root_crlb: f64,
    /// |β|²/σ² per AP, dB.
    pub per_ap_snr: Vec<f64>,
}

pub const CRLB_CSV_HEADER: &str = "target_id,snr_db,root_crlb_m,bound_xx,bound_xy,bound_yy";

impl CrlbReport {
    pub fn csv_row(&self, target_id: usize, snr_db: f64) -> String {
        let b = &self.covariance_bound;
        format!(
            "{},{},{},{},{},{}",
            target_id,
            snr_db,
            self.root_crlb,
            b[(0, 0)],
            b[(0, 1)],
            b[(1, 1)]
        )
    }
}

/// (Θ F Θᵀ)⁻¹ from explicit blocks and geometry.
pub fn crlb_from_blocks(blocks: &FimBlocks, target: Vec2, aps: &[ApGeometry], angle: AngleJacobian) -> Result<Matrix2<f64>> {
    let theta = position_jacobian(target, aps, angle)?;
    let info = &theta * blocks.assemble() * theta.transpose();
    let info = Matrix2::new(info[(0, 0)], info[(0, 1)], info[(1, 0)], info[(1, 1)]);
    let info = (info + info.transpose()) * 0.5;
    let eig = info.symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::SingularGeometry(if lo > 0.0 { hi / lo } else { f64::INFINITY }));
    }
    let bound = info.try_inverse().ok_or(Error::SingularGeometry(f64::INFINITY))?;
    Ok((bound + bound.transpose()) * 0.5)
}

pub fn crlb_position(
    scenario: &ScenarioConfig,
    target_index: usize,
    sigma: f64,
    options: CrlbOptions,
) -> Result<CrlbReport> {
    let blocks = fim_blocks_closed_form(scenario, target_index, sigma, options.convention)?;
    let target = scenario.targets[target_index].position;
    let bound = crlb_from_blocks(&blocks, target, &scenario.aps, options.angle)?;
    let per_ap_snr = nominal_gains(scenario, target_index)?
        .iter()
        .map(|b| 10.0 * (b * b / (sigma * sigma)).log10())
        .collect();
    Ok(CrlbReport {
        root_crlb: bound.trace().sqrt(),
        covariance_bound: bound,
        per_ap_snr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::geometry::TargetTruth;
    use crate::signal::OfdmParams;
    use approx::assert_relative_eq;

    fn one_ap_scene(m: usize, k: usize, n: usize, df: f64) -> ScenarioConfig {
        let ofdm = OfdmParams {
            subcarrier_spacing: df,
            subcarriers: k,
            symbols: n,
            symbol_period: 1.1 / df,
            ..OfdmParams::nr_30khz(1)
        };
        let aps = ScenarioConfig::ap_ring(1, 500.0, m, &ofdm);
        // at the reference distance, so |β| = 1
        let t = TargetTruth::new(Vec2::new(0.0, 0.0), Vec2::new(3.0, 1.0), 0.01).unwrap();
        ScenarioConfig::new(aps, vec![t], ofdm)
    }

    #[test]
    fn single_symbol_delay_information() {
        let s = one_ap_scene(4, 3, 1, 30e3);
        let b = fim_blocks_closed_form(&s, 0, 0.5, FimConvention::Printed).unwrap();
        let want = 2.0 / 0.25 * 12.0 * (2.0 * PI * 30e3).powi(2);
        assert_relative_eq!(b.psi_diag[0], want, max_relative = 1e-14);
    }

    #[test]
    fn information_scales_with_gain_and_noise() {
        let s = one_ap_scene(4, 3, 5, 30e3);
        let b1 = fim_blocks_for(&[1.0], &s.aps, &s.ofdm, 1.0, FimConvention::Printed).unwrap();
        let b2 = fim_blocks_for(&[2.0], &s.aps, &s.ofdm, 1.0, FimConvention::Printed).unwrap();
        let b3 = fim_blocks_for(&[1.0], &s.aps, &s.ofdm, 0.5, FimConvention::Printed).unwrap();
        assert_relative_eq!(b2.psi_diag[0], 4.0 * b1.psi_diag[0], max_relative = 1e-14);
        assert_relative_eq!(b3.omega_diag[0], 4.0 * b1.omega_diag[0], max_relative = 1e-14);
    }

    #[test]
    fn reference_dimensions_match_triple_sum() {
        let s = one_ap_scene(8, 96, 7, 30e3);
        let closed = fim_blocks_closed_form(&s, 0, 1.0, FimConvention::Printed).unwrap();
        let mut oracle = 0.0;
        for _m in 1..=8 {
            for _k in 1..=96 {
                for n in 1..=7 {
                    oracle += (2.0 * PI * n as f64 * 30e3).powi(2) * 2.0;
                }
            }
        }
        assert_relative_eq!(closed.psi_diag[0], oracle, max_relative = 1e-12);
    }

    #[test]
    fn cross_term_negative_and_single_antenna_angle_info() {
        let s = one_ap_scene(1, 4, 3, 15e3);
        let b = fim_blocks_bruteforce(&s, 0, 1.0, FimConvention::Printed).unwrap();
        assert!(b.upsilon_diag[0] < 0.0);
        // M(M+1)(2M+1) = 6 at M = 1
        let lambda = s.ofdm.wavelength();
        let d = s.aps[0].spacing;
        let want = 4.0 * PI * PI * d * d * 6.0 * 4.0 * 3.0 / (3.0 * lambda * lambda);
        assert_relative_eq!(b.omega_diag[0], want, max_relative = 1e-12);
    }

    #[test]
    fn centered_convention_matches_its_oracle() {
        let s = one_ap_scene(5, 7, 4, 30e3);
        let c = fim_blocks_closed_form(&s, 0, 0.3, FimConvention::PhaseCentered).unwrap();
        let o = fim_blocks_bruteforce(&s, 0, 0.3, FimConvention::PhaseCentered).unwrap();
        assert_relative_eq!(c.psi_diag[0], o.psi_diag[0], max_relative = 1e-10);
        assert_relative_eq!(c.omega_diag[0], o.omega_diag[0], max_relative = 1e-10);
        assert!(o.upsilon_diag[0].abs() < 1e-10 * (o.psi_diag[0] * o.omega_diag[0]).sqrt());
    }

    #[test]
    fn jacobian_aligned_geometry() {
        let ap = ApGeometry::new(Vec2::zeros(), 0.0, 8, 0.03).unwrap();
        let t = Vec2::new(40.0, 0.0);
        let th = position_jacobian(t, std::slice::from_ref(&ap), AngleJacobian::Global).unwrap();
        assert_relative_eq!(th[(0, 0)], 2.0 / geometry::SPEED_OF_LIGHT);
        assert_eq!(th[(1, 0)], 0.0);
        assert_eq!(th[(0, 1)], 0.0);
    }

    #[test]
    fn jacobian_mirror_symmetry() {
        let up = ApGeometry::new(Vec2::new(0.0, 100.0), 0.0, 8, 0.03).unwrap();
        let down = ApGeometry::new(Vec2::new(0.0, -100.0), 0.0, 8, 0.03).unwrap();
        let t = Vec2::new(35.0, 0.0);
        let th = position_jacobian(t, &[up, down], AngleJacobian::Global).unwrap();
        // mirror about the x-axis: x-rows equal, y-rows flip sign
        assert_relative_eq!(th[(0, 0)], th[(0, 1)]);
        assert_relative_eq!(th[(1, 0)], -th[(1, 1)]);
        assert_relative_eq!(th[(0, 2)], th[(0, 3)]);
        assert_relative_eq!(th[(1, 2)], -th[(1, 3)]);
    }

    #[test]
    fn compass_geometry_is_isotropic() {
        let ofdm = OfdmParams::nr_30khz(2);
        let aps = ScenarioConfig::ap_ring(4, 300.0, 8, &ofdm);
        let t = TargetTruth::new(Vec2::zeros(), Vec2::zeros(), 0.01).unwrap();
        let s = ScenarioConfig::new(aps, vec![t], ofdm);
        let r = crlb_position(&s, 0, 0.1, CrlbOptions::default()).unwrap();
        let b = r.covariance_bound;
        assert_relative_eq!(b[(0, 0)], b[(1, 1)], max_relative = 1e-10);
        assert!(b[(0, 1)].abs() < 1e-10 * b[(0, 0)]);
    }

    #[test]
    fn halving_noise_halves_root_bound() {
        let s = ScenarioConfig::reference_scene(2);
        let a = crlb_position(&s, 1, 0.2, CrlbOptions::default()).unwrap();
        let b = crlb_position(&s, 1, 0.1, CrlbOptions::default()).unwrap();
        assert_relative_eq!(b.root_crlb / a.root_crlb, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn more_aps_tighter_bound() {
        let s = ScenarioConfig::reference_scene(2);
        let sigma = crate::signal::noise_sigma_for_snr(&s, 10.0).unwrap();
        let full = crlb_position(&s, 1, sigma, CrlbOptions::default()).unwrap();
        assert!(full.root_crlb.is_finite() && full.root_crlb > 0.0);
        let mut one = s.clone();
        one.aps.truncate(1);
        let single = crlb_position(&one, 1, sigma, CrlbOptions::default()).unwrap();
        assert!(single.root_crlb > full.root_crlb);
    }

    #[test]
    fn errors() {
        let s = ScenarioConfig::reference_scene(1);
        assert!(matches!(
            fim_blocks_closed_form(&s, 0, 0.0, FimConvention::Printed),
            Err(Error::NonPositiveNoise(_))
        ));
        // single AP with only the global angle seen end-on: no cross-range info
        let ap = ApGeometry::new(Vec2::zeros(), 0.0, 8, 0.03).unwrap();
        let blocks = fim_blocks_for(&[1.0], std::slice::from_ref(&ap), &s.ofdm, 1.0, FimConvention::Printed).unwrap();
        assert!(matches!(
            crlb_from_blocks(&blocks, Vec2::new(50.0, 0.0), &[ap], AngleJacobian::Global),
            Err(Error::SingularGeometry(_))
        ));
    }

    #[test]
    fn csv_row_layout() {
        let s = ScenarioConfig::reference_scene(1);
        let r = crlb_position(&s, 0, 0.1, CrlbOptions::default()).unwrap();
        let row = r.csv_row(0, 10.0);
        assert_eq!(row.split(',').count(), CRLB_CSV_HEADER.split(',').count());
        assert!(row.starts_with("0,10,"));
    }

    proptest! {
        #[test]
        fn bound_is_positive_definite_and_scales_with_noise(
            x in -80.0..80.0f64, y in -80.0..80.0f64, sigma in 1e-4..1.0f64, local in any::<bool>(),
        ) {
            let mut s = ScenarioConfig::reference_scene(1);
            s.targets[0].position = Vec2::new(x, y);
            let options = CrlbOptions {
                convention: FimConvention::Printed,
                angle: if local { AngleJacobian::LocalFrame } else { AngleJacobian::Global },
            };
            let a = crlb_position(&s, 0, sigma, options).unwrap();
            let b = crlb_position(&s, 0, 2.0 * sigma, options).unwrap();
            let c = a.covariance_bound;
            prop_assert!(c[(0, 0)] > 0.0 && c.determinant() > 0.0);
            prop_assert!((c[(0, 1)] - c[(1, 0)]).abs() <= 1e-12 * c.abs().max());
            prop_assert!((b.root_crlb / a.root_crlb - 2.0).abs() < 1e-12);
        }
    }
}
