//! EVA-array subspace machinery: mode-2 unfolding, sample covariance,
//! noise-subspace extraction and the fused pseudospectrum over position.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimator::Roi;
use crate::geometry::{self, ApGeometry, Vec2};
use crate::signal::{steering_delay, steering_spatial, EchoTensor, OfdmParams};

/// Relative eigen-gap below which the signal/noise split is reported as
/// ambiguous.
const SPLIT_GAP: f64 = 1e-6;

/// Mode-2 unfolding: rows are EVA elements `r = k·M + m`, columns are
/// OFDM symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedData {
    pub matrix: DMatrix<Complex64>,
    pub antennas: usize,
    pub subcarriers: usize,
}

pub fn mode2_unfold(tensor: &EchoTensor) -> UnfoldedData {
    let rows = tensor.antennas * tensor.subcarriers;
    // storage already places one EVA snapshot per symbol contiguously
    UnfoldedData {
        matrix: DMatrix::from_column_slice(rows, tensor.symbols, &tensor.data),
        antennas: tensor.antennas,
        subcarriers: tensor.subcarriers,
    }
}

pub fn refold(u: &UnfoldedData, ap_index: usize) -> EchoTensor {
    let mut t = EchoTensor::zeros(ap_index, u.antennas, u.matrix.ncols(), u.subcarriers);
    for n in 0..u.matrix.ncols() {
        for k in 0..u.subcarriers {
            for m in 0..u.antennas {
                t.set(m, n, k, u.matrix[(k * u.antennas + m, n)]);
            }
        }
    }
    t
}

/// Subcarrier-only arrangement used by the delay-only baseline: K rows,
/// N·M snapshot columns (column `n·M + m`).
pub fn delay_domain_unfold(tensor: &EchoTensor) -> DMatrix<Complex64> {
    let m_n = tensor.antennas;
    DMatrix::from_fn(tensor.subcarriers, tensor.symbols * m_n, |k, c| {
        tensor.get(c % m_n, c / m_n, k)
    })
}

/// (1/N)·Y·Yᴴ for snapshot matrix Y, forced exactly Hermitian.
pub fn covariance_of(snapshots: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let n = snapshots.ncols().max(1) as f64;
    let r = snapshots * snapshots.adjoint() / Complex64::new(n, 0.0);
    (&r + r.adjoint()) * Complex64::new(0.5, 0.0)
}

pub fn sample_covariance(u: &UnfoldedData) -> DMatrix<Complex64> {
    covariance_of(&u.matrix)
}

/// Orthonormal noise-subspace basis of one AP's covariance.
#[derive(Debug, Clone)]
pub struct NoiseProjector {
    pub ap_index: usize,
    /// dim × (dim − L), orthonormal columns.
    pub basis: DMatrix<Complex64>,
    /// dim × L signal eigenvectors, kept for diagnostics and cheap projection.
    pub signal_basis: DMatrix<Complex64>,
    pub signal_eigenvalues: Vec<f64>,
    /// All eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues L−1 and L are too close to separate signal from noise.
    pub ambiguous_split: bool,
}

impl NoiseProjector {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn order(&self) -> usize {
        self.signal_basis.ncols()
    }

    /// ‖U_wᴴ ω‖² computed directly from the noise basis.
    pub fn noise_energy_direct(&self, w: &DVector<Complex64>) -> f64 {
        (self.basis.adjoint() * w).norm_squared()
    }

    /// ‖U_wᴴ ω‖², via the complement ‖ω‖² − ‖U_sᴴ ω‖² when the signal
    /// subspace is the smaller of the two.
    pub fn noise_energy(&self, w: &DVector<Complex64>) -> f64 {
        if self.order() < self.basis.ncols() {
            let mut s = 0.0;
            for col in self.signal_basis.column_iter() {
                s += col.dotc(w).norm_sqr();
            }
            (w.norm_squared() - s).max(0.0)
        } else {
            self.noise_energy_direct(w)
        }
    }

    /// U_w U_wᴴ.
    pub fn projector(&self) -> DMatrix<Complex64> {
        &self.basis * self.basis.adjoint()
    }
}

/// Split the eigenvectors of `r` into the top `order` (signal) and the
/// remaining `dim − order` (noise).
pub fn noise_subspace(r: &DMatrix<Complex64>, order: usize, ap_index: usize) -> Result<NoiseProjector> {
    let dim = r.nrows();
    if order >= dim || r.ncols() != dim {
        return Err(Error::InvalidModelOrder { order, dim });
    }
    let trace: f64 = (0..dim).map(|i| r[(i, i)].re).sum();
    if order > 0 && !(trace > 0.0) {
        return Err(Error::RankDeficient);
    }

    let eig = r.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();

    let signal_basis = DMatrix::from_fn(dim, order, |row, c| eig.eigenvectors[(row, idx[c])]);
    let basis = DMatrix::from_fn(dim, dim - order, |row, c| eig.eigenvectors[(row, idx[order + c])]);

    let ambiguous_split = order > 0 && {
        let (lo, hi) = (eigenvalues[order], eigenvalues[order - 1]);
        hi <= 0.0 || (hi - lo) <= SPLIT_GAP * hi.abs()
    };
    if ambiguous_split {
        log::warn!(
            "AP {ap_index}: eigenvalues {} and {} too close to split signal from noise",
            order - 1,
            order
        );
    }

    Ok(NoiseProjector {
        ap_index,
        basis,
        signal_basis,
        signal_eigenvalues: eigenvalues[..order].to_vec(),
        eigenvalues,
        ambiguous_split,
    })
}

/// EVA steering vector g(τ(p)) ⊗ a(ψ(p)).
pub fn eva_steering(p: Vec2, ap: &ApGeometry, ofdm: &OfdmParams) -> Result<DVector<Complex64>> {
    let tau = geometry::candidate_delay(p, ap)?;
    let psi = geometry::candidate_virtual_angle(p, ap)?;
    let g = steering_delay(tau, ofdm.subcarriers, ofdm.subcarrier_spacing);
    let a = steering_spatial(psi, ap.antennas, ap.spacing, ofdm.wavelength())?;
    Ok(g.kronecker(&a))
}

/// Sliding-subarray averaging over the EVA grid: every `antennas` ×
/// `subcarriers` window contributes its N snapshots to one covariance of
/// the window size, optionally followed by forward-backward averaging.
/// Decorrelates targets whose Doppler signatures are indistinguishable
/// over a short burst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothing {
    pub antennas: usize,
    pub subcarriers: usize,
    pub forward_backward: bool,
}

impl Smoothing {
    pub fn validate(&self, antennas: usize, subcarriers: usize) -> Result<()> {
        if self.antennas == 0 || self.antennas > antennas || self.subcarriers == 0 || self.subcarriers > subcarriers {
            return Err(Error::Config(format!(
                "smoothing window {}x{} does not fit a {}x{} array",
                self.antennas, self.subcarriers, antennas, subcarriers
            )));
        }
        Ok(())
    }
}

/// R ← (R + J R* J) / 2 with J the exchange matrix.
pub fn forward_backward(r: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let n = r.nrows();
    DMatrix::from_fn(n, n, |i, j| (r[(i, j)] + r[(n - 1 - i, n - 1 - j)].conj()) * 0.5)
}

/// Window-averaged covariance for one AP. `model` selects the EVA window
/// (antennas × subcarriers) or the subcarrier-only window (all antennas
/// and symbols as snapshots).
pub fn smoothed_covariance(tensor: &EchoTensor, s: &Smoothing, model: SteeringModel) -> Result<DMatrix<Complex64>> {
    s.validate(tensor.antennas, tensor.subcarriers)?;
    let (m_all, n_all, k_all) = (tensor.antennas, tensor.symbols, tensor.subcarriers);
    let (ms, ks) = match model {
        SteeringModel::Eva => (s.antennas, s.subcarriers),
        SteeringModel::DelayOnly => (1, s.subcarriers),
    };
    let dim = ms * ks;
    let mut r = DMatrix::<Complex64>::zeros(dim, dim);
    let mut count = 0usize;
    let mut snap = DMatrix::<Complex64>::zeros(dim, n_all);
    let m_offsets = match model {
        SteeringModel::Eva => m_all - ms + 1,
        SteeringModel::DelayOnly => m_all,
    };
    for i in 0..m_offsets {
        for j in 0..=(k_all - ks) {
            for n in 0..n_all {
                for k in 0..ks {
                    for m in 0..ms {
                        snap[(k * ms + m, n)] = tensor.get(i + m, n, j + k);
                    }
                }
            }
            r += &snap * snap.adjoint();
            count += n_all;
        }
    }
    r /= Complex64::new(count as f64, 0.0);
    let r = (&r + r.adjoint()) * Complex64::new(0.5, 0.0);
    Ok(if s.forward_backward { forward_backward(&r) } else { r })
}

/// Which observation space each AP's subspace lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteeringModel {
    /// MK-element EVA array (delay and angle).
    Eva,
    /// K-element subcarrier array (delay only).
    DelayOnly,
}

impl SteeringModel {
    pub fn steering(self, p: Vec2, ap: &ApGeometry, ofdm: &OfdmParams) -> Result<DVector<Complex64>> {
        match self {
            SteeringModel::Eva => eva_steering(p, ap, ofdm),
            SteeringModel::DelayOnly => Ok(steering_delay(
                geometry::candidate_delay(p, ap)?,
                ofdm.subcarriers,
                ofdm.subcarrier_spacing,
            )),
        }
    }

    pub fn snapshots(self, tensor: &EchoTensor) -> DMatrix<Complex64> {
        match self {
            SteeringModel::Eva => mode2_unfold(tensor).matrix,
            SteeringModel::DelayOnly => delay_domain_unfold(tensor),
        }
    }
}

/// Fused cost Ψ(p) = 1 / (Σ_p ‖U_{p,w}ᴴ ω_p(p)‖² + ε) over a set of APs.
#[derive(Debug, Clone)]
pub struct FusedSpectrum {
    pub projectors: Vec<NoiseProjector>,
    pub aps: Vec<ApGeometry>,
    pub ofdm: OfdmParams,
    pub model: SteeringModel,
    /// Denominator floor, 1e−12 × total observation dimension.
    pub floor: f64,
}

impl FusedSpectrum {
    /// Step 1 of the pipeline: per-AP unfolding, covariance and EVD.
    pub fn from_tensors(
        tensors: &[EchoTensor],
        aps: &[ApGeometry],
        ofdm: &OfdmParams,
        order: usize,
        model: SteeringModel,
    ) -> Result<Self> {
        Self::from_tensors_smoothed(tensors, aps, ofdm, order, model, None)
    }

    /// As [`FusedSpectrum::from_tensors`], with optional window averaging;
    /// steering then spans a single window.
    pub fn from_tensors_smoothed(
        tensors: &[EchoTensor],
        aps: &[ApGeometry],
        ofdm: &OfdmParams,
        order: usize,
        model: SteeringModel,
        smoothing: Option<Smoothing>,
    ) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::Config("need at least one AP tensor".into()));
        }
        let projectors = tensors
            .par_iter()
            .map(|t| {
                let r = match &smoothing {
                    Some(s) => smoothed_covariance(t, s, model)?,
                    None => covariance_of(&model.snapshots(t)),
                };
                noise_subspace(&r, order, t.ap_index)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ofdm = ofdm.clone();
        let mut aps: Vec<ApGeometry> = tensors.iter().map(|t| aps[t.ap_index].clone()).collect();
        if let Some(s) = smoothing {
            ofdm.subcarriers = s.subcarriers;
            for ap in &mut aps {
                ap.antennas = s.antennas;
            }
        }
        Ok(Self::new(projectors, aps, ofdm, model))
    }

    /// `aps[i]` must be the geometry of `projectors[i]`.
    pub fn new(projectors: Vec<NoiseProjector>, aps: Vec<ApGeometry>, ofdm: OfdmParams, model: SteeringModel) -> Self {
        let total_dim: usize = projectors.iter().map(|p| p.dim()).sum();
        Self {
            projectors,
            aps,
            ofdm,
            model,
            floor: 1e-12 * total_dim as f64,
        }
    }

    /// Σ_p ‖U_{p,w}ᴴ ω_p(p)‖².
    pub fn projection_energy(&self, p: Vec2) -> Result<f64> {
        let mut sum = 0.0;
        for (proj, ap) in self.projectors.iter().zip(&self.aps) {
            let w = self.model.steering(p, ap, &self.ofdm)?;
            sum += proj.noise_energy(&w);
        }
        Ok(sum)
    }

    pub fn value(&self, p: Vec2) -> Result<f64> {
        Ok(1.0 / (self.projection_energy(p)? + self.floor))
    }
}

pub fn fused_spectrum(p: Vec2, spectrum: &FusedSpectrum) -> Result<f64> {
    spectrum.value(p)
}

/// Dense evaluation of Ψ on a lattice; `values` is row-major with rows
/// along y.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumGrid {
    pub origin: Vec2,
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl SpectrumGrid {
    pub fn point(&self, ix: usize, iy: usize) -> Vec2 {
        self.origin + Vec2::new(ix as f64, iy as f64) * self.spacing
    }

    pub fn point_of(&self, cell: usize) -> Vec2 {
        self.point(cell % self.nx, cell / self.nx)
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    /// Cell index whose center is nearest to `p`, if inside the lattice.
    pub fn cell_containing(&self, p: Vec2) -> Option<(usize, usize)> {
        let f = (p - self.origin) / self.spacing;
        let (ix, iy) = (f.x.round(), f.y.round());
        if ix < 0.0 || iy < 0.0 || ix as usize >= self.nx || iy as usize >= self.ny {
            return None;
        }
        Some((ix as usize, iy as usize))
    }

    pub fn median(&self) -> f64 {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    /// Header line, metadata line, then one line of dB values per y row.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("origin_x,origin_y,spacing,nx,ny\n");
        let _ = writeln!(s, "{},{},{},{},{}", self.origin.x, self.origin.y, self.spacing, self.nx, self.ny);
        for row in self.values.chunks(self.nx) {
            let line: Vec<String> = row.iter().map(|v| format!("{}", 10.0 * v.log10())).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }
}

pub fn spectrum_grid(spectrum: &FusedSpectrum, roi: &Roi, resolution: f64) -> Result<SpectrumGrid> {
    if !(resolution > 0.0) {
        return Err(Error::NonPositiveInput {
            name: "resolution",
            value: resolution,
        });
    }
    let count = |span: f64| (span / resolution + 1e-9).floor() as usize + 1;
    let nx = count(roi.x1 - roi.x0);
    let ny = count(roi.y1 - roi.y0);
    let origin = Vec2::new(roi.x0, roi.y0);
    let values: Vec<f64> = (0..nx * ny)
        .into_par_iter()
        .map(|cell| {
            let p = origin + Vec2::new((cell % nx) as f64, (cell / nx) as f64) * resolution;
            match spectrum.value(p) {
                Ok(v) => v,
                Err(Error::ZeroRange { .. }) => 0.0,
                Err(_) => 0.0,
            }
        })
        .collect();
    Ok(SpectrumGrid {
        origin,
        spacing: resolution,
        nx,
        ny,
        values,
    })
}
