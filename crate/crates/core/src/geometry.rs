//! Planar geometry linking a hypothesized target position to the observables
//! of each access point: round-trip delay and virtual angle, plus their
//! position gradients.
//!
//! Each AP carries a local frame whose x-axis is the ULA axis. The
//! local-to-global transform is
//!
//! ```text
//! T(κ) = [  cos κ   sin κ ]
//!        [ -sin κ   cos κ ]
//! ```
//!
//! so a global point `p` maps to the local frame as `T(κ)⁻¹ (p - p_ap)`. The
//! virtual angle ψ = cos θ is the x-component of the local unit direction.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub type Vec2 = Vector2<f64>;

/// Wrap an angle to (-π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Position, orientation and array layout of a monostatic access point.
#[derive(Debug, Clone, PartialEq)]
pub struct ApGeometry {
    pub position: Vec2,
    /// Angle between local and global frames, radians, in (-π, π].
    pub kappa: f64,
    pub antennas: usize,
    /// Element spacing of the ULA, meters.
    pub spacing: f64,
}

impl ApGeometry {
    pub fn new(position: Vec2, kappa: f64, antennas: usize, spacing: f64) -> Result<Self> {
        if antennas == 0 {
            return Err(Error::Config("AP needs at least one antenna".into()));
        }
        if !(spacing > 0.0) {
            return Err(Error::NonPositiveInput {
                name: "antenna_spacing",
                value: spacing,
            });
        }
        Ok(Self {
            position,
            kappa: normalize_angle(kappa),
            antennas,
            spacing,
        })
    }

    /// Orientation whose broadside (local +y axis) faces `point`.
    pub fn kappa_facing(position: Vec2, point: Vec2) -> f64 {
        // local +y maps to (sin κ, cos κ) in the global frame
        let d = point - position;
        normalize_angle(d.x.atan2(d.y))
    }

    /// Unit vector of the ULA axis (local +x) in the global frame.
    pub fn array_axis(&self) -> Vec2 {
        rotation_matrix(self.kappa) * Vec2::new(1.0, 0.0)
    }
}

/// Ground truth for one point target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTruth {
    pub position: Vec2,
    pub velocity: Vec2,
    /// Radar cross-section, m².
    pub rcs: f64,
}

impl TargetTruth {
    pub fn new(position: Vec2, velocity: Vec2, rcs: f64) -> Result<Self> {
        if !(rcs > 0.0) {
            return Err(Error::NonPositiveInput {
                name: "rcs",
                value: rcs,
            });
        }
        Ok(Self {
            position,
            velocity,
            rcs,
        })
    }

    /// Radial speed toward the AP (positive when closing), m/s.
    pub fn closing_speed(&self, ap: &ApGeometry) -> Result<f64> {
        let d = offset(self.position, ap)?;
        Ok(-self.velocity.dot(&d) / d.norm())
    }
}

/// Local-to-global transform T(κ).
pub fn rotation_matrix(kappa: f64) -> Matrix2<f64> {
    let (s, c) = kappa.sin_cos();
    Matrix2::new(c, s, -s, c)
}

/// Global point expressed in the AP's local frame: T(κ)⁻¹ (p − p_ap).
pub fn to_local(p: Vec2, ap: &ApGeometry) -> Vec2 {
    // T is orthonormal, so its inverse is the transpose
    rotation_matrix(ap.kappa).transpose() * (p - ap.position)
}

fn offset(p: Vec2, ap: &ApGeometry) -> Result<Vec2> {
    let d = p - ap.position;
    if d.norm() == 0.0 || !d.norm().is_finite() {
        return Err(Error::ZeroRange { x: p.x, y: p.y });
    }
    Ok(d)
}

pub fn range(p: Vec2, ap: &ApGeometry) -> Result<f64> {
    offset(p, ap).map(|d| d.norm())
}

/// Round-trip delay 2·range/c, seconds.
pub fn candidate_delay(p: Vec2, ap: &ApGeometry) -> Result<f64> {
    Ok(2.0 * range(p, ap)? / SPEED_OF_LIGHT)
}

/// Unit direction of the target in the AP's local frame, `(cos θ, sin θ)`.
pub fn local_direction(p: Vec2, ap: &ApGeometry) -> Result<Vec2> {
    offset(p, ap)?;
    let local = to_local(p, ap);
    Ok(local / local.norm())
}

/// Virtual angle ψ = cos θ of the local angle of arrival.
pub fn candidate_virtual_angle(p: Vec2, ap: &ApGeometry) -> Result<f64> {
    Ok(local_direction(p, ap)?.x.clamp(-1.0, 1.0))
}

/// Virtual angle measured against the global x-axis, (x_t − x_ap)/range.
pub fn global_virtual_angle(p: Vec2, ap: &ApGeometry) -> Result<f64> {
    let d = offset(p, ap)?;
    Ok(d.x / d.norm())
}

/// (∂τ/∂x, ∂τ/∂y), seconds per meter.
pub fn delay_jacobian(p: Vec2, ap: &ApGeometry) -> Result<Vec2> {
    let d = offset(p, ap)?;
    Ok(d * (2.0 / (SPEED_OF_LIGHT * d.norm())))
}

/// Closed-form gradient of the global virtual angle:
/// `((y_t − y_a)² / r³, −(x_t − x_a)(y_t − y_a) / r³)`.
pub fn angle_jacobian(p: Vec2, ap: &ApGeometry) -> Result<Vec2> {
    let d = offset(p, ap)?;
    let r3 = d.norm().powi(3);
    Ok(Vec2::new(d.y * d.y / r3, -d.x * d.y / r3))
}

/// Gradient of the local virtual angle, the quantity the ULA phase actually
/// depends on: (e − ψ·d̂)/r with e the array axis and d̂ the line of sight.
pub fn local_angle_jacobian(p: Vec2, ap: &ApGeometry) -> Result<Vec2> {
    let d = offset(p, ap)?;
    let r = d.norm();
    let los = d / r;
    let axis = ap.array_axis();
    let psi = axis.dot(&los);
    Ok((axis - los * psi) / r)
}

/// Which angle parameterization the position Jacobian differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleJacobian {
    /// Global-frame ψᵍ with the printed closed forms.
    Global,
    /// Local-frame ψ seen by the rotated ULA.
    #[default]
    LocalFrame,
}

impl AngleJacobian {
    pub fn angle(self, p: Vec2, ap: &ApGeometry) -> Result<f64> {
        match self {
            AngleJacobian::Global => global_virtual_angle(p, ap),
            AngleJacobian::LocalFrame => candidate_virtual_angle(p, ap),
        }
    }

    pub fn gradient(self, p: Vec2, ap: &ApGeometry) -> Result<Vec2> {
        match self {
            AngleJacobian::Global => angle_jacobian(p, ap),
            AngleJacobian::LocalFrame => local_angle_jacobian(p, ap),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ap(x: f64, y: f64, kappa: f64) -> ApGeometry {
        ApGeometry::new(Vec2::new(x, y), kappa, 8, 0.03).unwrap()
    }

    fn central_diff(f: impl Fn(Vec2) -> f64, p: Vec2, h: f64) -> Vec2 {
        let ex = Vec2::new(h, 0.0);
        let ey = Vec2::new(0.0, h);
        Vec2::new(
            (f(p + ex) - f(p - ex)) / (2.0 * h),
            (f(p + ey) - f(p - ey)) / (2.0 * h),
        )
    }

    #[test]
    fn rotation_cases() {
        assert_eq!(rotation_matrix(0.0), Matrix2::identity());
        let t = rotation_matrix(PI / 2.0);
        assert_relative_eq!(t, Matrix2::new(0.0, 1.0, -1.0, 0.0), epsilon = 1e-15);
        let prod = rotation_matrix(0.7) * rotation_matrix(-0.7);
        assert_relative_eq!(prod, Matrix2::identity(), epsilon = 1e-15);
        assert_relative_eq!(rotation_matrix(1.3).determinant(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn to_local_cases() {
        assert_eq!(to_local(Vec2::new(3.0, 4.0), &ap(0.0, 0.0, 0.0)), Vec2::new(3.0, 4.0));
        assert_eq!(to_local(Vec2::new(1.0, 0.0), &ap(1.0, 0.0, 0.0)), Vec2::zeros());

        // explicit 2x2 inverse: [[a,b],[c,d]]⁻¹ = [[d,-b],[-c,a]]/(ad-bc)
        let k = PI / 2.0;
        let (a, b, c, d) = (k.cos(), k.sin(), -k.sin(), k.cos());
        let det = a * d - b * c;
        let (px, py) = (0.0, 1.0);
        let oracle = Vec2::new((d * px - b * py) / det, (-c * px + a * py) / det);
        assert_relative_eq!(to_local(Vec2::new(px, py), &ap(0.0, 0.0, k)), oracle, epsilon = 1e-15);
    }

    #[test]
    fn delay_values() {
        let a = ap(0.0, 0.0, 0.3);
        let tau = candidate_delay(Vec2::new(150.0, 0.0), &a).unwrap();
        assert_relative_eq!(tau, 1.000_692_285e-6, max_relative = 1e-9);

        let a = ap(500.0, 0.0, 1.0);
        let tau = candidate_delay(Vec2::new(40.0, 30.0), &a).unwrap();
        let expected = 2.0 * (460.0f64.powi(2) + 30.0f64.powi(2)).sqrt() / SPEED_OF_LIGHT;
        assert_relative_eq!(tau, expected, max_relative = 1e-15);

        let base = candidate_delay(Vec2::new(2.0, 7.0), &ap(2.0, 0.0, 0.0)).unwrap();
        for k in [-2.0, 0.5, 3.0] {
            assert_eq!(candidate_delay(Vec2::new(2.0, 7.0), &ap(2.0, 0.0, k)).unwrap(), base);
        }
    }

    #[test]
    fn zero_range_is_an_error() {
        let a = ap(1.0, 2.0, 0.0);
        let p = Vec2::new(1.0, 2.0);
        assert!(matches!(candidate_delay(p, &a), Err(Error::ZeroRange { .. })));
        assert!(candidate_virtual_angle(p, &a).is_err());
        assert!(delay_jacobian(p, &a).is_err());
        assert!(angle_jacobian(p, &a).is_err());
    }

    #[test]
    fn virtual_angle_cases() {
        let a = ap(0.0, 0.0, 0.0);
        assert_eq!(candidate_virtual_angle(Vec2::new(10.0, 0.0), &a).unwrap(), 1.0);
        assert_relative_eq!(candidate_virtual_angle(Vec2::new(0.0, 10.0), &a).unwrap(), 0.0);

        // rotate-then-normalize oracle: a target placed along T(κ)·(1,0)
        // sits on the local x-axis
        let k = PI / 4.0;
        let along = rotation_matrix(k) * Vec2::new(10.0 * 2f64.sqrt(), 0.0);
        assert_relative_eq!(along, Vec2::new(10.0, -10.0), epsilon = 1e-12);
        assert_relative_eq!(candidate_virtual_angle(along, &ap(0.0, 0.0, k)).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kappa_facing_puts_point_at_broadside() {
        let pos = Vec2::new(500.0, 0.0);
        let k = ApGeometry::kappa_facing(pos, Vec2::zeros());
        assert_relative_eq!(k, -PI / 2.0, epsilon = 1e-15);
        let a = ap(500.0, 0.0, k);
        assert_relative_eq!(candidate_virtual_angle(Vec2::zeros(), &a).unwrap(), 0.0, epsilon = 1e-15);
        let d = local_direction(Vec2::zeros(), &a).unwrap();
        assert_relative_eq!(d.y, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_cases() {
        let a = ap(0.0, 0.0, 0.0);
        let j = delay_jacobian(Vec2::new(25.0, 0.0), &a).unwrap();
        assert_relative_eq!(j, Vec2::new(2.0 / SPEED_OF_LIGHT, 0.0));
        // due east: printed numerator (y_t − y_a)² vanishes
        assert_eq!(angle_jacobian(Vec2::new(25.0, 0.0), &a).unwrap(), Vec2::zeros());
    }

    #[test]
    fn angle_jacobians_match_their_scalar_maps() {
        let a = ap(-3.0, 11.0, 0.9);
        let p = Vec2::new(40.0, -17.0);
        let fd = central_diff(|q| global_virtual_angle(q, &a).unwrap(), p, 1e-4);
        assert_relative_eq!(angle_jacobian(p, &a).unwrap(), fd, max_relative = 1e-6);
        let fd = central_diff(|q| candidate_virtual_angle(q, &a).unwrap(), p, 1e-4);
        assert_relative_eq!(local_angle_jacobian(p, &a).unwrap(), fd, max_relative = 1e-6);
    }

    #[test]
    fn local_and_global_coincide_at_zero_orientation() {
        let a = ap(5.0, -2.0, 0.0);
        let p = Vec2::new(-30.0, 44.0);
        assert_relative_eq!(
            local_angle_jacobian(p, &a).unwrap(),
            angle_jacobian(p, &a).unwrap(),
            epsilon = 1e-15
        );
    }

    fn coords() -> impl Strategy<Value = f64> {
        -500.0..500.0f64
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(k in -10.0..10.0f64) {
            let t = rotation_matrix(k);
            let err = (t.transpose() * t - Matrix2::identity()).abs().max();
            prop_assert!(err < 1e-12);
        }

        #[test]
        fn delay_is_positive_and_orientation_free(
            px in coords(), py in coords(), ax in coords(), ay in coords(), k in -PI..PI
        ) {
            let p = Vec2::new(px, py);
            prop_assume!((p - Vec2::new(ax, ay)).norm() > 1e-6);
            let t0 = candidate_delay(p, &ap(ax, ay, 0.0)).unwrap();
            let tk = candidate_delay(p, &ap(ax, ay, k)).unwrap();
            prop_assert!(t0 > 0.0);
            prop_assert!(((t0 - tk) / t0).abs() <= 1e-15);
        }

        #[test]
        fn local_direction_is_unit(px in coords(), py in coords(), ax in coords(), ay in coords(), k in -PI..PI) {
            let p = Vec2::new(px, py);
            prop_assume!((p - Vec2::new(ax, ay)).norm() > 1e-6);
            let a = ap(ax, ay, k);
            let psi = candidate_virtual_angle(p, &a).unwrap();
            prop_assert!((-1.0..=1.0).contains(&psi));
            let d = local_direction(p, &a).unwrap();
            prop_assert!((d.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn to_local_preserves_norm(px in coords(), py in coords(), ax in coords(), ay in coords(), k in -PI..PI) {
            let p = Vec2::new(px, py);
            let a = ap(ax, ay, k);
            let n = (p - a.position).norm();
            prop_assert!((to_local(p, &a).norm() - n).abs() <= 1e-12 * n.max(1.0));
        }
    }
}
