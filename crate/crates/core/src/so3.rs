//! Quaternion and rotation algebra (Hamilton convention, `[w, x, y, z]`).
//!
//! Besides the usual product / rotation-matrix / exp / log machinery this
//! module carries the pieces the attitude controller is built from: the Hopf
//! projection `q ↦ Im(q ⊗ k ⊗ q̄)` onto thrust directions, the two base charts
//! that lift a thrust direction back onto the 3-sphere, the yaw quaternion
//! parameterizing each fiber, and the SO(3) right Jacobian with its inverse.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unit direction on the 2-sphere.
pub type UnitVector3 = Unit<Vector3<f64>>;

/// Below this rotation angle the Jacobians switch to their Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// Scalar parts closer than this to zero are treated as half-turn rotations by
/// [`log_so3`].
pub const HALF_TURN_TOLERANCE: f64 = 1e-9;

/// Distance from the excluded pole below which a base chart refuses to evaluate.
pub const POLE_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum So3Error {
    #[error("north chart is singular at the south pole (c = {0})")]
    NorthChartSingular(f64),
    #[error("south chart is singular at the north pole (c = {0})")]
    SouthChartSingular(f64),
}

/// Hamilton quaternion `w + x i + y j + z k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat::new(1.0, 0.0, 0.0, 0.0);
    pub const I: Quat = Quat::new(0.0, 1.0, 0.0, 0.0);
    pub const J: Quat = Quat::new(0.0, 0.0, 1.0, 0.0);
    pub const K: Quat = Quat::new(0.0, 0.0, 0.0, 1.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_parts(w: f64, v: Vector3<f64>) -> Self {
        Quat::new(w, v.x, v.y, v.z)
    }

    /// Pure quaternion `[0, v]`.
    pub fn pure(v: Vector3<f64>) -> Self {
        Quat::from_parts(0.0, v)
    }

    pub fn vec(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn conj(&self) -> Self {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn norm_squared(&self) -> f64 {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn scale(&self, s: f64) -> Self {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn normalize(&self) -> Self {
        self.scale(1.0 / self.norm())
    }

    /// Multiplicative inverse; equals the conjugate for unit quaternions.
    pub fn inverse(&self) -> Self {
        self.conj().scale(1.0 / self.norm_squared())
    }

    /// Representative of the same rotation with non-negative scalar part.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            -*self
        } else {
            *self
        }
    }

    /// Flip sign so that `self · reference ≥ 0`.
    pub fn aligned_with(&self, reference: &Quat) -> Self {
        if self.dot(reference) < 0.0 {
            -*self
        } else {
            *self
        }
    }

    /// Distance between the rotations represented by `self` and `other`,
    /// ignoring the global sign.
    pub fn sign_invariant_distance(&self, other: &Quat) -> f64 {
        (*self - *other).norm().min((*self + *other).norm())
    }

    /// Geodesic angle between the two rotations, in `[0, π]`.
    pub fn angle_to(&self, other: &Quat) -> f64 {
        2.0 * self.dot(other).abs().min(1.0).acos()
    }

    /// Rotation about `axis` (need not be normalized) by `angle` radians.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::from_parts(c, axis * (s / n))
    }

    /// Rotation matrix taking body vectors to the world frame. Assumes a unit
    /// quaternion; see [`quat_to_rot`] for the checked variant.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let Quat { w, x, y, z } = *self;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Matrix3::new(
            1.0 - 2.0 * (yy + zz),
            2.0 * (xy - wz),
            2.0 * (xz + wy),
            2.0 * (xy + wz),
            1.0 - 2.0 * (xx + zz),
            2.0 * (yz - wx),
            2.0 * (xz - wy),
            2.0 * (yz + wx),
            1.0 - 2.0 * (xx + yy),
        )
    }

    /// Rotates `v` from the body frame into the world frame.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * v
    }

    /// ZYX Euler composition `R_z(yaw) R_y(pitch) R_x(roll)`.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        Quat::from_axis_angle(&Vector3::z(), yaw)
            * Quat::from_axis_angle(&Vector3::y(), pitch)
            * Quat::from_axis_angle(&Vector3::x(), roll)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

impl Mul for Quat {
    type Output = Quat;

    fn mul(self, r: Quat) -> Quat {
        let l = self;
        // Terms grouped so that conj(q) ⊗ q has an exactly zero vector part.
        Quat::new(
            l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            (l.w * r.x + l.x * r.w) + (l.y * r.z - l.z * r.y),
            (l.w * r.y + l.y * r.w) + (l.z * r.x - l.x * r.z),
            (l.w * r.z + l.z * r.w) + (l.x * r.y - l.y * r.x),
        )
    }
}

impl Add for Quat {
    type Output = Quat;

    fn add(self, r: Quat) -> Quat {
        Quat::new(self.w + r.w, self.x + r.x, self.y + r.y, self.z + r.z)
    }
}

impl Sub for Quat {
    type Output = Quat;

    fn sub(self, r: Quat) -> Quat {
        Quat::new(self.w - r.w, self.x - r.x, self.y - r.y, self.z - r.z)
    }
}

impl Neg for Quat {
    type Output = Quat;

    fn neg(self) -> Quat {
        self.scale(-1.0)
    }
}

/// Hamilton product `q1 ⊗ q2`.
pub fn quat_mul(q1: Quat, q2: Quat) -> Quat {
    q1 * q2
}

/// Rotation matrix together with a flag telling whether the input had to be
/// renormalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckedRotation {
    pub matrix: Matrix3<f64>,
    pub renormalized: bool,
}

/// Converts a quaternion to its rotation matrix, normalizing inputs whose norm
/// is off by more than `1e-6`.
pub fn quat_to_rot(q: Quat) -> CheckedRotation {
    let renormalized = (q.norm() - 1.0).abs() > 1e-6;
    let q = if renormalized { q.normalize() } else { q };
    CheckedRotation {
        matrix: q.rotation_matrix(),
        renormalized,
    }
}

/// Hopf map `q ↦ Im(q ⊗ k ⊗ q̄)`: the body z-axis expressed in the world frame.
pub fn hopf_project(q: Quat) -> Vector3<f64> {
    let Quat { w, x, y, z } = q;
    Vector3::new(
        2.0 * (x * z + w * y),
        2.0 * (y * z - w * x),
        w * w - x * x - y * y + z * z,
    )
}

/// Yaw quaternion `[cos(ψ/2), 0, 0, sin(ψ/2)]`, i.e. `e^{ψk/2}`.
pub fn yaw_quat(psi: f64) -> Quat {
    let (s, c) = (0.5 * psi).sin_cos();
    Quat::new(c, 0.0, 0.0, s)
}

/// North base chart: the tilt-without-twist quaternion taking `k` to `s`.
/// Defined everywhere except the south pole.
pub fn chart_north(s: &UnitVector3) -> Result<Quat, So3Error> {
    let (a, b, c) = (s.x, s.y, s.z);
    if c <= -1.0 + POLE_MARGIN {
        return Err(So3Error::NorthChartSingular(c));
    }
    let scale = 1.0 / (2.0 * (1.0 + c)).sqrt();
    Ok(Quat::new(1.0 + c, -b, a, 0.0).scale(scale))
}

/// South base chart, built from the intersection of the fiber with the
/// xz-plane. Defined everywhere except the north pole.
pub fn chart_south(s: &UnitVector3) -> Result<Quat, So3Error> {
    let (a, b, c) = (s.x, s.y, s.z);
    if c >= 1.0 - POLE_MARGIN {
        return Err(So3Error::SouthChartSingular(c));
    }
    let scale = 1.0 / (2.0 * (1.0 - c)).sqrt();
    Ok(Quat::new(-b, 1.0 - c, 0.0, a).scale(scale))
}

/// Yaw offset that makes the south chart agree with the north chart at `s`:
/// `q_N(s) ⊗ q_yaw(ψ) = ±q_S(s) ⊗ q_yaw(ψ + offset)`.
pub fn chart_yaw_offset(s: &Vector3<f64>) -> f64 {
    2.0 * s.x.atan2(s.y)
}

/// Exponential map from a rotation vector to a unit quaternion.
pub fn exp_so3(v: &Vector3<f64>) -> Quat {
    let angle = v.norm();
    if angle < SERIES_THRESHOLD {
        // sin(θ/2)/θ ≈ 1/2 − θ²/48
        let k = 0.5 - angle * angle / 48.0;
        return Quat::from_parts(1.0 - angle * angle / 8.0, v * k).normalize();
    }
    Quat::from_axis_angle(v, angle)
}

/// Logarithm map to a rotation vector with angle in `[0, π]`.
///
/// Half-turn rotations (scalar part within [`HALF_TURN_TOLERANCE`] of zero)
/// are ambiguous in sign; the axis is then oriented so that its
/// largest-magnitude component is positive.
pub fn log_so3(q: Quat) -> Vector3<f64> {
    let q = q.normalize();
    let v = q.vec();
    let vn = v.norm();
    if q.w.abs() < HALF_TURN_TOLERANCE {
        let mut axis = v / vn;
        let lead = axis.iamax();
        if axis[lead] < 0.0 {
            axis = -axis;
        }
        return axis * std::f64::consts::PI;
    }
    let q = q.canonical();
    if vn < 1e-12 {
        return q.vec() * (2.0 / q.w);
    }
    let angle = 2.0 * vn.atan2(q.w);
    q.vec() * (angle / vn)
}

/// Cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3): `exp(e + δ) ≈ exp(e) · exp(J_r(e) δ)`.
pub fn right_jacobian(e: &Vector3<f64>) -> Matrix3<f64> {
    let theta = e.norm();
    let k = skew(e);
    if theta < SERIES_THRESHOLD {
        return Matrix3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let t2 = theta * theta;
    Matrix3::identity() - ((1.0 - theta.cos()) / t2) * k
        + ((theta - theta.sin()) / (t2 * theta)) * k * k
}

/// Inverse right Jacobian of SO(3), valid for `‖e‖ ≤ π`.
pub fn inv_right_jacobian(e: &Vector3<f64>) -> Matrix3<f64> {
    let theta = e.norm();
    let k = skew(e);
    if theta < SERIES_THRESHOLD {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    // 1/θ² − (1 + cos θ)/(2θ sin θ), written with cot(θ/2) so that θ = π is finite.
    let half = 0.5 * theta;
    let coeff = 1.0 / (theta * theta) - half.cos() / (half.sin() * 2.0 * theta);
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4, PI};

    fn unit_quat() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-2)
            .prop_map(|(w, x, y, z)| Quat::new(w, x, y, z).normalize())
    }

    fn unit_vec() -> impl Strategy<Value = UnitVector3> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(x, y, z)| x * x + y * y + z * z > 1e-2)
            .prop_map(|(x, y, z)| Unit::new_normalize(Vector3::new(x, y, z)))
    }

    #[test]
    fn basis_products_follow_hamilton_convention() {
        assert_eq!(Quat::I * Quat::J, Quat::K);
        assert_eq!(Quat::J * Quat::K, Quat::I);
        assert_eq!(Quat::K * Quat::I, Quat::J);
        assert_eq!(Quat::I * Quat::I, -Quat::IDENTITY);
        let q = Quat::new(0.3, -0.2, 0.5, 0.1);
        assert_eq!(q * Quat::IDENTITY, q);
    }

    #[test]
    fn half_angle_composition() {
        let c = FRAC_PI_4.cos();
        let s = FRAC_PI_4.sin();
        let q = Quat::new(c, s, 0.0, 0.0);
        let qq = q * q;
        assert_relative_eq!(qq.w, 0.0, epsilon = 1e-15);
        assert_relative_eq!(qq.x, 1.0, epsilon = 1e-15);
        assert_relative_eq!(qq.y, 0.0);
        assert_relative_eq!(qq.z, 0.0);
    }

    #[test]
    fn rotation_matrix_elementary_cases() {
        assert_eq!(Quat::IDENTITY.rotation_matrix(), Matrix3::identity());
        let q = Quat::new(FRAC_PI_4.cos(), FRAC_PI_4.sin(), 0.0, 0.0);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_relative_eq!(q.rotation_matrix(), rx, epsilon = 1e-15);
    }

    #[test]
    fn quat_to_rot_flags_non_unit_input() {
        let out = quat_to_rot(Quat::new(2.0, 0.0, 0.0, 0.0));
        assert!(out.renormalized);
        assert_relative_eq!(out.matrix, Matrix3::identity(), epsilon = 1e-15);
        assert!(!quat_to_rot(Quat::IDENTITY).renormalized);
    }

    #[test]
    fn hopf_projection_fixed_points() {
        assert_eq!(hopf_project(Quat::IDENTITY), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(hopf_project(Quat::I), Vector3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn chart_examples() {
        let north_pole = Unit::new_normalize(Vector3::z());
        assert_eq!(chart_north(&north_pole).unwrap(), Quat::IDENTITY);
        let ex = Unit::new_normalize(Vector3::x());
        let qn = chart_north(&ex).unwrap();
        assert_relative_eq!(qn.w, FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_relative_eq!(qn.y, FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_eq!((qn.x, qn.z), (0.0, 0.0));

        let south_pole = Unit::new_normalize(-Vector3::z());
        assert_eq!(chart_south(&south_pole).unwrap(), Quat::I);
        let qs = chart_south(&ex).unwrap();
        assert_relative_eq!(qs.x, FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_relative_eq!(qs.z, FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_eq!((qs.w, qs.y), (0.0, 0.0));
    }

    #[test]
    fn charts_reject_their_poles() {
        let south_pole = Unit::new_normalize(-Vector3::z());
        assert!(matches!(chart_north(&south_pole), Err(So3Error::NorthChartSingular(_))));
        let north_pole = Unit::new_normalize(Vector3::z());
        assert!(matches!(chart_south(&north_pole), Err(So3Error::SouthChartSingular(_))));
    }

    #[test]
    fn log_examples() {
        assert_eq!(log_so3(Quat::IDENTITY), Vector3::zeros());
        let q = Quat::new(FRAC_PI_4.cos(), FRAC_PI_4.sin(), 0.0, 0.0);
        assert_relative_eq!(log_so3(q), Vector3::new(FRAC_PI_2, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn log_half_turn_tie_break() {
        // -i and i are the same half-turn; both map to +π about x.
        assert_relative_eq!(log_so3(-Quat::I), Vector3::new(PI, 0.0, 0.0));
        assert_relative_eq!(log_so3(Quat::I), Vector3::new(PI, 0.0, 0.0));
        let q = Quat::new(0.0, 0.6, -0.8, 0.0);
        assert_relative_eq!(log_so3(q), Vector3::new(-0.6, 0.8, 0.0) * PI, epsilon = 1e-14);
    }

    #[test]
    fn inverse_right_jacobian_limits() {
        assert_eq!(inv_right_jacobian(&Vector3::zeros()), Matrix3::identity());
        let tiny = Vector3::new(1e-8, 0.0, 0.0);
        assert_relative_eq!(inv_right_jacobian(&tiny), Matrix3::identity(), epsilon = 1e-7);
        // finite at a half turn
        let m = inv_right_jacobian(&Vector3::new(0.0, PI, 0.0));
        assert!(m.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn jacobian_series_branch_is_continuous() {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let below = inv_right_jacobian(&(axis * (SERIES_THRESHOLD * (1.0 - 1e-9))));
        let above = inv_right_jacobian(&(axis * (SERIES_THRESHOLD * (1.0 + 1e-9))));
        assert_relative_eq!(below, above, epsilon = 1e-9);
    }

    #[test]
    fn inverse_jacobian_times_forward_is_identity() {
        for (i, angle) in [0.1, 0.7, 1.5, 2.2, 3.0].iter().enumerate() {
            let axis = Vector3::new(1.0 + i as f64, -0.4, 0.25 * i as f64).normalize();
            let e = axis * *angle;
            let p = inv_right_jacobian(&e) * right_jacobian(&e);
            assert_relative_eq!(p, Matrix3::identity(), epsilon = 1e-9);
        }
    }

    #[test]
    fn euler_composition_matches_elementary_rotations() {
        let q = Quat::from_euler_zyx(0.4, -0.2, 0.1);
        let rz = Quat::from_axis_angle(&Vector3::z(), 0.4).rotation_matrix();
        let ry = Quat::from_axis_angle(&Vector3::y(), -0.2).rotation_matrix();
        let rx = Quat::from_axis_angle(&Vector3::x(), 0.1).rotation_matrix();
        assert_relative_eq!(q.rotation_matrix(), rz * ry * rx, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn product_of_units_is_unit(a in unit_quat(), b in unit_quat()) {
            prop_assert!(((a * b).norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rotation_is_orthonormal(q in unit_quat()) {
            let r = q.rotation_matrix();
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rotation_is_a_homomorphism(a in unit_quat(), b in unit_quat()) {
            let lhs = (a * b).rotation_matrix();
            let rhs = a.rotation_matrix() * b.rotation_matrix();
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }

        #[test]
        fn hopf_is_third_rotation_column(q in unit_quat()) {
            let col = q.rotation_matrix().column(2).into_owned();
            let direct = (q * Quat::K * q.conj()).vec();
            prop_assert!((hopf_project(q) - col).norm() < 1e-12);
            prop_assert!((hopf_project(q) - direct).norm() < 1e-12);
        }

        #[test]
        fn hopf_is_fiber_invariant(q in unit_quat(), psi in -10.0..10.0f64) {
            let d = hopf_project(q * yaw_quat(psi)) - hopf_project(q);
            prop_assert!(d.norm() < 1e-9);
        }

        #[test]
        fn north_chart_round_trip(s in unit_vec()) {
            prop_assume!(s.z > -0.99);
            let q = chart_north(&s).unwrap();
            prop_assert!((q.norm() - 1.0).abs() < 1e-12);
            prop_assert!((hopf_project(q) - s.into_inner()).norm() < 1e-9);
        }

        #[test]
        fn south_chart_round_trip(s in unit_vec()) {
            prop_assume!(s.z < 0.99);
            let q = chart_south(&s).unwrap();
            prop_assert!((hopf_project(q) - s.into_inner()).norm() < 1e-9);
        }

        #[test]
        fn charts_agree_up_to_the_yaw_offset(s in unit_vec(), psi in -PI..PI) {
            prop_assume!(s.z.abs() < 0.95 && s.x.hypot(s.y) > 1e-3);
            let qn = chart_north(&s).unwrap() * yaw_quat(psi);
            let qs = chart_south(&s).unwrap() * yaw_quat(psi + chart_yaw_offset(&s));
            prop_assert!(qn.sign_invariant_distance(&qs) < 1e-9);
        }

        #[test]
        fn exp_log_round_trip(q in unit_quat()) {
            let back = exp_so3(&log_so3(q));
            prop_assert!(back.sign_invariant_distance(&q) < 1e-9);
        }

        #[test]
        fn log_exp_round_trip(axis in unit_vec(), angle in 0.0..(PI - 1e-3)) {
            let v = axis.into_inner() * angle;
            prop_assert!((log_so3(exp_so3(&v)) - v).norm() < 1e-9);
        }

        #[test]
        fn log_norm_is_geodesic_angle(a in unit_quat(), b in unit_quat()) {
            let e = log_so3(a.inverse() * b);
            prop_assert!((e.norm() - a.angle_to(&b)).abs() < 1e-7);
        }

        #[test]
        fn inverse_jacobian_matches_finite_differences(axis in unit_vec(), angle in 0.05..3.0f64) {
            // Column i of J_r(e) ≈ Log(exp(e)⁻¹ ⊗ exp(e + h eᵢ)) / h.
            let e = axis.into_inner() * angle;
            let h = 1e-6;
            let base = exp_so3(&e);
            let mut jr = Matrix3::zeros();
            for i in 0..3 {
                let mut ep = e;
                ep[i] += h;
                let mut em = e;
                em[i] -= h;
                let fwd = log_so3(base.conj() * exp_so3(&ep));
                let bwd = log_so3(base.conj() * exp_so3(&em));
                jr.set_column(i, &((fwd - bwd) / (2.0 * h)));
            }
            let p = inv_right_jacobian(&e) * jr;
            prop_assert!((p - Matrix3::identity()).amax() < 1e-5, "{p}");
        }
    }
}
