//! Ground-truth scene description and its TOML file format.
//!
//! File schema (SI units, angles in degrees):
//!
//! ```toml
//! snr_db = 10.0                  # optional, default 10
//! reference_distance_m = 500.0   # optional: range at which |α| = 1
//! reference_rcs_m2 = 0.01        # optional: RCS used for that reference
//!
//! [ofdm]
//! carrier_frequency_hz = 4.9e9
//! subcarrier_spacing_hz = 30e3
//! subcarriers = 24
//! symbols = 7
//! symbol_period_s = 35.677e-6
//!
//! [ap_ring]                      # either a ring ...
//! count = 5
//! radius_m = 500.0
//! antennas = 8
//!
//! [[aps]]                        # ... and/or explicit APs
//! position_m = [500.0, 0.0]
//! orientation_deg = -90.0        # optional: default faces the origin
//! antennas = 8
//! spacing_m = 0.0306             # optional: default λ/2
//!
//! [[targets]]
//! position_m = [-32.0, -35.0]
//! velocity_mps = [15.0, -10.0]
//! rcs_m2 = 0.01
//!
//! [estimator]                    # optional, every key optional
//! roi_m = [-100.0, -100.0, 100.0, 100.0]
//! coarse_resolution_m = 2.0
//! peak_exclusion_radius_m = 10.0
//! qn_tolerance_m = 1e-4
//! qn_max_iters = 200
//! fd_step_m = 1e-3
//! local_maxima = true            # peak picks restricted to grid maxima
//! smoothing = { antennas = 8, subcarriers = 12, forward_backward = true }
//! ```

use serde::Deserialize;
use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, Roi};
use crate::geometry::{ApGeometry, TargetTruth, Vec2};
use crate::signal::{path_loss_db, OfdmParams};
use crate::subspace::Smoothing;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub aps: Vec<ApGeometry>,
    pub targets: Vec<TargetTruth>,
    pub ofdm: OfdmParams,
    /// Path loss (dB) that maps to unit gain amplitude.
    pub reference_loss_db: f64,
}

impl ScenarioConfig {
    /// Reference gain anchored at 500 m and RCS 0.01 m².
    pub fn new(aps: Vec<ApGeometry>, targets: Vec<TargetTruth>, ofdm: OfdmParams) -> Self {
        let reference_loss_db =
            path_loss_db(ofdm.carrier_frequency / 1e6, 0.5, 0.01).expect("positive reference");
        Self {
            aps,
            targets,
            ofdm,
            reference_loss_db,
        }
    }

    /// `count` APs spaced uniformly on a circle about the origin, broadside
    /// facing the center, half-wavelength ULAs.
    pub fn ap_ring(count: usize, radius: f64, antennas: usize, ofdm: &OfdmParams) -> Vec<ApGeometry> {
        let spacing = ofdm.wavelength() / 2.0;
        (0..count)
            .map(|p| {
                let phi = 2.0 * PI * p as f64 / count as f64;
                let pos = Vec2::new(radius * phi.cos(), radius * phi.sin());
                let kappa = ApGeometry::kappa_facing(pos, Vec2::zeros());
                ApGeometry::new(pos, kappa, antennas, spacing).expect("valid ring AP")
            })
            .collect()
    }

    /// The reference evaluation scene: five 8-element APs on a 500 m circle,
    /// 30 kHz NR numerology, two 0.01 m² targets at (−32, −35) and (40, 30).
    pub fn reference_scene(resource_blocks: usize) -> Self {
        let ofdm = OfdmParams::nr_30khz(resource_blocks);
        let aps = Self::ap_ring(5, 500.0, 8, &ofdm);
        let targets = vec![
            TargetTruth::new(Vec2::new(-32.0, -35.0), Vec2::new(15.0, -10.0), 0.01).unwrap(),
            TargetTruth::new(Vec2::new(40.0, 30.0), Vec2::new(-20.0, 12.0), 0.01).unwrap(),
        ];
        Self::new(aps, targets, ofdm)
    }

    pub fn validate(&self) -> Result<()> {
        self.ofdm.validate()?;
        if self.aps.is_empty() {
            return Err(Error::Config("scenario has no APs".into()));
        }
        for t in &self.targets {
            if !(t.rcs > 0.0) {
                return Err(Error::NonPositiveInput { name: "rcs", value: t.rcs });
            }
            for ap in &self.aps {
                if t.position == ap.position {
                    return Err(Error::ZeroRange { x: t.position.x, y: t.position.y });
                }
            }
        }
        Ok(())
    }

    pub fn target_positions(&self) -> Vec<Vec2> {
        self.targets.iter().map(|t| t.position).collect()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OfdmSection {
    carrier_frequency_hz: f64,
    subcarrier_spacing_hz: f64,
    subcarriers: usize,
    symbols: usize,
    symbol_period_s: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RingSection {
    count: usize,
    radius_m: f64,
    antennas: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ApSection {
    position_m: [f64; 2],
    orientation_deg: Option<f64>,
    antennas: usize,
    spacing_m: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetSection {
    position_m: [f64; 2],
    #[serde(default)]
    velocity_mps: [f64; 2],
    rcs_m2: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatorSection {
    roi_m: Option<[f64; 4]>,
    coarse_resolution_m: Option<f64>,
    peak_exclusion_radius_m: Option<f64>,
    qn_tolerance_m: Option<f64>,
    qn_max_iters: Option<usize>,
    fd_step_m: Option<f64>,
    smoothing: Option<Smoothing>,
    local_maxima: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    snr_db: Option<f64>,
    reference_distance_m: Option<f64>,
    reference_rcs_m2: Option<f64>,
    ofdm: OfdmSection,
    ap_ring: Option<RingSection>,
    #[serde(default)]
    aps: Vec<ApSection>,
    #[serde(default)]
    targets: Vec<TargetSection>,
    #[serde(default)]
    estimator: EstimatorSection,
}

/// A parsed scenario file.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: ScenarioConfig,
    pub estimator: EstimatorConfig,
    pub snr_db: f64,
}

pub fn parse_scenario(text: &str) -> Result<LoadedScenario> {
    let file: ScenarioFile = toml::from_str(text)?;
    let ofdm = OfdmParams {
        carrier_frequency: file.ofdm.carrier_frequency_hz,
        subcarrier_spacing: file.ofdm.subcarrier_spacing_hz,
        subcarriers: file.ofdm.subcarriers,
        symbols: file.ofdm.symbols,
        symbol_period: file.ofdm.symbol_period_s,
    };
    ofdm.validate()?;

    let mut aps = match &file.ap_ring {
        Some(r) => ScenarioConfig::ap_ring(r.count, r.radius_m, r.antennas, &ofdm),
        None => Vec::new(),
    };
    for a in &file.aps {
        let pos = Vec2::new(a.position_m[0], a.position_m[1]);
        let kappa = match a.orientation_deg {
            Some(deg) => deg.to_radians(),
            None => ApGeometry::kappa_facing(pos, Vec2::zeros()),
        };
        let spacing = a.spacing_m.unwrap_or(ofdm.wavelength() / 2.0);
        aps.push(ApGeometry::new(pos, kappa, a.antennas, spacing)?);
    }
    let targets = file
        .targets
        .iter()
        .map(|t| {
            TargetTruth::new(
                Vec2::new(t.position_m[0], t.position_m[1]),
                Vec2::new(t.velocity_mps[0], t.velocity_mps[1]),
                t.rcs_m2,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let reference_loss_db = path_loss_db(
        ofdm.carrier_frequency / 1e6,
        file.reference_distance_m.unwrap_or(500.0) / 1e3,
        file.reference_rcs_m2.unwrap_or(0.01),
    )?;
    let scenario = ScenarioConfig {
        aps,
        targets,
        ofdm,
        reference_loss_db,
    };
    scenario.validate()?;

    let mut estimator = EstimatorConfig::new(scenario.targets.len().max(1));
    let e = &file.estimator;
    if let Some([x0, y0, x1, y1]) = e.roi_m {
        estimator.roi = Roi::new(x0, y0, x1, y1)?;
    }
    if let Some(v) = e.coarse_resolution_m {
        estimator.coarse_resolution = v;
    }
    if let Some(v) = e.peak_exclusion_radius_m {
        estimator.peak_exclusion_radius = v;
    }
    if let Some(v) = e.qn_tolerance_m {
        estimator.qn_tolerance = v;
    }
    if let Some(v) = e.qn_max_iters {
        estimator.qn_max_iters = v;
    }
    if let Some(v) = e.fd_step_m {
        estimator.fd_step = v;
    }
    estimator.smoothing = e.smoothing;
    if let Some(v) = e.local_maxima {
        estimator.local_maxima = v;
    }
    estimator.validate()?;

    Ok(LoadedScenario {
        scenario,
        estimator,
        snr_db: file.snr_db.unwrap_or(10.0),
    })
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<LoadedScenario> {
    parse_scenario(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const REFERENCE: &str = r#"
snr_db = 5.0

[ofdm]
carrier_frequency_hz = 4.9e9
subcarrier_spacing_hz = 30e3
subcarriers = 24
symbols = 7
symbol_period_s = 35.677e-6

[ap_ring]
count = 5
radius_m = 500.0
antennas = 8

[[targets]]
position_m = [-32.0, -35.0]
velocity_mps = [15.0, -10.0]
rcs_m2 = 0.01

[[targets]]
position_m = [40.0, 30.0]
velocity_mps = [-20.0, 12.0]
rcs_m2 = 0.01
"#;

    #[test]
    fn ring_file_matches_builtin_scene() {
        let loaded = parse_scenario(REFERENCE).unwrap();
        assert_eq!(loaded.scenario, ScenarioConfig::reference_scene(2));
        assert_eq!(loaded.snr_db, 5.0);
        assert_eq!(loaded.estimator.targets, 2);
    }

    #[test]
    fn explicit_ap_orientation_in_degrees() {
        let text = r#"
[ofdm]
carrier_frequency_hz = 4.9e9
subcarrier_spacing_hz = 30e3
subcarriers = 12
symbols = 7
symbol_period_s = 35.677e-6

[[aps]]
position_m = [0.0, -300.0]
orientation_deg = 90.0
antennas = 4
spacing_m = 0.02

[estimator]
roi_m = [-50.0, -50.0, 50.0, 50.0]
coarse_resolution_m = 1.0
local_maxima = true
smoothing = { antennas = 3, subcarriers = 6, forward_backward = true }
"#;
        let loaded = parse_scenario(text).unwrap();
        let ap = &loaded.scenario.aps[0];
        assert_relative_eq!(ap.kappa, PI / 2.0);
        assert_eq!(ap.spacing, 0.02);
        assert_eq!(loaded.estimator.coarse_resolution, 1.0);
        assert_eq!(loaded.estimator.roi.x1, 50.0);
        assert!(loaded.estimator.local_maxima);
        assert_eq!(
            loaded.estimator.smoothing,
            Some(Smoothing {
                antennas: 3,
                subcarriers: 6,
                forward_backward: true
            })
        );
        assert_eq!(parse_scenario(REFERENCE).unwrap().estimator.smoothing, None);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(parse_scenario(&REFERENCE.replace("rcs_m2 = 0.01", "rcs = 0.01")).is_err());
        assert!(parse_scenario(&REFERENCE.replace("rcs_m2 = 0.01", "rcs_m2 = -1.0")).is_err());
        assert!(parse_scenario(&REFERENCE.replace("symbol_period_s = 35.677e-6", "symbol_period_s = 1e-6")).is_err());
    }

    #[test]
    fn ring_faces_center() {
        let s = ScenarioConfig::reference_scene(2);
        for ap in &s.aps {
            assert_relative_eq!(ap.position.norm(), 500.0, epsilon = 1e-9);
            let psi = crate::geometry::candidate_virtual_angle(Vec2::zeros(), ap).unwrap();
            assert!(psi.abs() < 1e-12);
        }
    }
}
