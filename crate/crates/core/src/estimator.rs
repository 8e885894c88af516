//! Association-free localization: per-AP subspace estimation, coarse grid
//! search of the fused spectrum with greedy peak extraction, then
//! quasi-Newton refinement of every peak.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ApGeometry, Vec2};
use crate::signal::{EchoTensor, OfdmParams};
use crate::subspace::{spectrum_grid, FusedSpectrum, Smoothing, SpectrumGrid, SteeringModel};

/// Axis-aligned search rectangle, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Roi {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x1 >= x0 && y1 >= y0) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("degenerate ROI [{x0}, {y0}, {x1}, {y1}]")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn square(half_width: f64) -> Self {
        Self {
            x0: -half_width,
            y0: -half_width,
            x1: half_width,
            y1: half_width,
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub roi: Roi,
    pub coarse_resolution: f64,
    pub peak_exclusion_radius: f64,
    /// Number of targets L (known model order).
    pub targets: usize,
    /// Stop once the quasi-Newton position step falls below this, meters.
    pub qn_tolerance: f64,
    pub qn_max_iters: usize,
    /// Central-difference step for numerical gradients, meters.
    pub fd_step: f64,
    /// Window averaging of the per-AP covariance; `None` uses the full
    /// MK × MK covariance.
    pub smoothing: Option<Smoothing>,
    /// Restrict coarse peak picks to local maxima of the grid.
    pub local_maxima: bool,
}

impl EstimatorConfig {
    pub fn new(targets: usize) -> Self {
        Self {
            roi: Roi::square(100.0),
            coarse_resolution: 2.0,
            peak_exclusion_radius: 10.0,
            targets,
            qn_tolerance: 1e-4,
            qn_max_iters: 200,
            fd_step: 1e-3,
            smoothing: None,
            local_maxima: false,
        }
    }

    /// Window averaging over all antennas and half the subcarriers with
    /// forward-backward averaging, plus local-maximum peak picks.
    pub fn decorrelated(mut self, antennas: usize, subcarriers: usize) -> Self {
        self.smoothing = Some(Smoothing {
            antennas,
            subcarriers: (subcarriers / 2).max(1),
            forward_backward: true,
        });
        self.local_maxima = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("coarse_resolution", self.coarse_resolution),
            ("peak_exclusion_radius", self.peak_exclusion_radius),
            ("qn_tolerance", self.qn_tolerance),
            ("fd_step", self.fd_step),
        ] {
            if !(value > 0.0) {
                return Err(Error::NonPositiveInput { name, value });
            }
        }
        if self.peak_exclusion_radius < self.coarse_resolution {
            return Err(Error::Config("peak exclusion radius smaller than grid resolution".into()));
        }
        if self.targets == 0 {
            return Err(Error::Config("need at least one target".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub estimates: Vec<Vec2>,
    pub spectrum_values: Vec<f64>,
    pub coarse_seeds: Vec<Vec2>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    /// Ψ at the estimate below 10× the coarse-grid median.
    pub low_confidence: Vec<bool>,
    /// Closer than half the exclusion radius to a higher-ranked estimate.
    pub duplicate: Vec<bool>,
    pub grid_median: f64,
}

/// Greedy extraction: take the global maximum, suppress every cell within
/// `exclusion` of it, repeat. Returned in descending Ψ.
pub fn find_peaks(grid: &SpectrumGrid, count: usize, exclusion: f64) -> Result<Vec<Vec2>> {
    let mut order: Vec<usize> = (0..grid.values.len()).collect();
    order.sort_by(|&a, &b| grid.values[b].total_cmp(&grid.values[a]).then(a.cmp(&b)));

    let mut peaks: Vec<Vec2> = Vec::with_capacity(count);
    for cell in order {
        if peaks.len() == count {
            break;
        }
        let p = grid.point_of(cell);
        if peaks.iter().all(|q| (p - q).norm() > exclusion) {
            peaks.push(p);
        }
    }
    if peaks.len() < count {
        return Err(Error::InsufficientPeaks {
            requested: count,
            found: peaks.len(),
        });
    }
    Ok(peaks)
}

/// Whether no 8-neighbour of the cell has a larger value.
pub fn is_local_max(grid: &SpectrumGrid, cell: usize) -> bool {
    let (ix, iy) = ((cell % grid.nx) as isize, (cell / grid.nx) as isize);
    let v = grid.values[cell];
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            let (x, y) = (ix + dx, iy + dy);
            if (dx, dy) == (0, 0) || x < 0 || y < 0 || x >= grid.nx as isize || y >= grid.ny as isize {
                continue;
            }
            if grid.values[y as usize * grid.nx + x as usize] > v {
                return false;
            }
        }
    }
    true
}

/// Greedy extraction restricted to local maxima of the grid, topped up
/// from [`find_peaks`] when fewer than `count` maxima survive suppression.
pub fn find_local_peaks(grid: &SpectrumGrid, count: usize, exclusion: f64) -> Result<Vec<Vec2>> {
    let mut order: Vec<usize> = (0..grid.values.len()).filter(|&c| is_local_max(grid, c)).collect();
    order.sort_by(|&a, &b| grid.values[b].total_cmp(&grid.values[a]).then(a.cmp(&b)));
    let mut peaks: Vec<Vec2> = Vec::with_capacity(count);
    for cell in order {
        if peaks.len() == count {
            return Ok(peaks);
        }
        let p = grid.point_of(cell);
        if peaks.iter().all(|q| (p - q).norm() > exclusion) {
            peaks.push(p);
        }
    }
    if peaks.len() == count {
        return Ok(peaks);
    }
    let mut all: Vec<usize> = (0..grid.values.len()).collect();
    all.sort_by(|&a, &b| grid.values[b].total_cmp(&grid.values[a]).then(a.cmp(&b)));
    for cell in all {
        if peaks.len() == count {
            break;
        }
        let p = grid.point_of(cell);
        if peaks.iter().all(|q| (p - q).norm() > exclusion) {
            peaks.push(p);
        }
    }
    if peaks.len() < count {
        return Err(Error::InsufficientPeaks {
            requested: count,
            found: peaks.len(),
        });
    }
    Ok(peaks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refined {
    pub position: Vec2,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn gradient(f: &impl Fn(Vec2) -> f64, p: Vec2, h: f64) -> Vector2<f64> {
    let ex = Vec2::new(h, 0.0);
    let ey = Vec2::new(0.0, h);
    Vector2::new(
        (f(p + ex) - f(p - ex)) / (2.0 * h),
        (f(p + ey) - f(p - ey)) / (2.0 * h),
    )
}

/// BFGS ascent of Ψ, run as descent on −ln Ψ with central-difference
/// gradients and Armijo backtracking. Steps are capped at half the peak
/// exclusion radius so a refinement cannot hop to a neighbouring peak.
/// The returned point never has lower Ψ than the seed.
pub fn refine_peak(seed: Vec2, objective: impl Fn(Vec2) -> f64, cfg: &EstimatorConfig) -> Refined {
    let cost = |p: Vec2| {
        let v = objective(p);
        if v > 0.0 && v.is_finite() {
            -v.ln()
        } else {
            f64::INFINITY
        }
    };
    let max_step = 0.5 * cfg.peak_exclusion_radius;

    let mut x = seed;
    let mut fx = cost(x);
    let mut g = gradient(&cost, x, cfg.fd_step);
    let mut h_inv = Matrix2::identity();
    let mut first = true;
    let mut iterations = 0;
    let mut converged = false;

    if !fx.is_finite() || !g.iter().all(|v| v.is_finite()) {
        return Refined {
            position: seed,
            value: objective(seed),
            iterations: 0,
            converged: false,
        };
    }

    while iterations < cfg.qn_max_iters {
        if g.norm() == 0.0 {
            converged = true;
            break;
        }
        let mut d = -(h_inv * g);
        if g.dot(&d) >= 0.0 {
            h_inv = Matrix2::identity();
            d = -g;
        }
        if d.norm() > max_step {
            d *= max_step / d.norm();
        }

        let slope = g.dot(&d);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = x + d * alpha;
            let ft = cost(trial);
            if ft <= fx + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
            if (d * alpha).norm() < 0.01 * cfg.qn_tolerance {
                break;
            }
        }
        iterations += 1;

        let Some((x_new, f_new)) = accepted else {
            // no decrease along a descent direction: at the optimum to
            // within the resolution of the line search
            converged = (d * alpha).norm() < cfg.qn_tolerance;
            break;
        };
        let s = x_new - x;
        let g_new = gradient(&cost, x_new, cfg.fd_step);
        let y = g_new - g;
        x = x_new;
        fx = f_new;
        g = g_new;

        if s.norm() < cfg.qn_tolerance {
            converged = true;
            break;
        }

        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                h_inv *= sy / y.dot(&y);
                first = false;
            }
            let rho = 1.0 / sy;
            let i = Matrix2::identity();
            h_inv = (i - s * y.transpose() * rho) * h_inv * (i - y * s.transpose() * rho) + s * s.transpose() * rho;
        } else {
            h_inv = Matrix2::identity();
            first = true;
        }
    }

    Refined {
        position: x,
        value: objective(x),
        iterations,
        converged,
    }
}

fn run_pipeline(
    tensors: &[EchoTensor],
    aps: &[ApGeometry],
    ofdm: &OfdmParams,
    cfg: &EstimatorConfig,
    model: SteeringModel,
) -> Result<LocalizationResult> {
    cfg.validate()?;
    if tensors.is_empty() {
        return Err(Error::Config("need at least one AP tensor".into()));
    }
    let (antennas, subcarriers) = match &cfg.smoothing {
        Some(s) => {
            s.validate(tensors[0].antennas, tensors[0].subcarriers)?;
            (s.antennas, s.subcarriers)
        }
        None => (tensors[0].antennas, tensors[0].subcarriers),
    };
    let dim = match model {
        SteeringModel::Eva => antennas * subcarriers,
        SteeringModel::DelayOnly => subcarriers,
    };
    if cfg.targets >= dim {
        return Err(Error::InsufficientPeaks {
            requested: cfg.targets,
            found: dim.saturating_sub(1),
        });
    }

    // Step 1: per-AP subspaces
    let spectrum = FusedSpectrum::from_tensors_smoothed(tensors, aps, ofdm, cfg.targets, model, cfg.smoothing)?;

    // Step 2: coarse grid and peaks
    let grid = spectrum_grid(&spectrum, &cfg.roi, cfg.coarse_resolution)?;
    let seeds = if cfg.local_maxima {
        find_local_peaks(&grid, cfg.targets, cfg.peak_exclusion_radius)?
    } else {
        find_peaks(&grid, cfg.targets, cfg.peak_exclusion_radius)?
    };
    let grid_median = grid.median();

    // Step 3: fine search per peak
    let objective = |p: Vec2| spectrum.value(p).unwrap_or(0.0);
    let refined: Vec<Refined> = seeds
        .par_iter()
        .map(|&s| refine_peak(s, objective, cfg))
        .collect();

    let estimates: Vec<Vec2> = refined.iter().map(|r| r.position).collect();
    let duplicate = (0..estimates.len())
        .map(|i| (0..i).any(|j| (estimates[i] - estimates[j]).norm() < 0.5 * cfg.peak_exclusion_radius))
        .collect();

    Ok(LocalizationResult {
        spectrum_values: refined.iter().map(|r| r.value).collect(),
        coarse_seeds: seeds,
        iterations: refined.iter().map(|r| r.iterations).collect(),
        converged: refined.iter().map(|r| r.converged).collect(),
        low_confidence: refined.iter().map(|r| r.value < 10.0 * grid_median).collect(),
        duplicate,
        grid_median,
        estimates,
    })
}

/// Full EVA subspace-fusion pipeline. `aps` is indexed by each tensor's
/// `ap_index`.
pub fn localize(
    tensors: &[EchoTensor],
    aps: &[ApGeometry],
    ofdm: &OfdmParams,
    cfg: &EstimatorConfig,
) -> Result<LocalizationResult> {
    run_pipeline(tensors, aps, ofdm, cfg, SteeringModel::Eva)
}

/// Baseline that discards the spatial dimension: K-element subcarrier
/// subspaces with N·M snapshots, delay-only steering, same fusion and search.
pub fn delay_only_localize(
    tensors: &[EchoTensor],
    aps: &[ApGeometry],
    ofdm: &OfdmParams,
    cfg: &EstimatorConfig,
) -> Result<LocalizationResult> {
    run_pipeline(tensors, aps, ofdm, cfg, SteeringModel::DelayOnly)
}
