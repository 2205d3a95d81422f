//! Quaternion and SO(3) kinematics shared by the dynamics and control modules.
//!
//! Conventions: scalar-first unit quaternions with the Hamilton product,
//! right-handed frames. `UnitQuat::rotation` maps body coordinates into
//! inertial coordinates.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Unit quaternion `[eta, eps]` (scalar part first).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat {
    pub eta: f64,
    pub eps: Vec3,
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat {
        eta: 1.0,
        eps: Vec3::new(0.0, 0.0, 0.0),
    };

    /// Builds a quaternion from raw components and renormalizes.
    pub fn new(eta: f64, eps: Vec3) -> Self {
        Self { eta, eps }.normalized()
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Self::new(q[0], Vec3::new(q[1], q[2], q[3]))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.eta, self.eps.x, self.eps.y, self.eps.z]
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, axis * (s / n))
    }

    pub fn norm(&self) -> f64 {
        (self.eta * self.eta + self.eps.norm_squared()).sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        self.eta /= n;
        self.eps /= n;
        self
    }

    pub fn conjugate(self) -> Self {
        Self {
            eta: self.eta,
            eps: -self.eps,
        }
    }

    /// Hamilton product, renormalized.
    pub fn mul(self, rhs: UnitQuat) -> UnitQuat {
        let eta = self.eta * rhs.eta - self.eps.dot(&rhs.eps);
        let eps = rhs.eps * self.eta + self.eps * rhs.eta + self.eps.cross(&rhs.eps);
        UnitQuat { eta, eps }.normalized()
    }

    /// Rotation matrix `R = I + 2*eta*[eps]x + 2*[eps]x^2` (body to inertial).
    pub fn rotation(&self) -> Mat3 {
        let sx = skew(self.eps);
        Mat3::identity() + sx * (2.0 * self.eta) + sx * sx * 2.0
    }

    /// Angle (rad) between the body x axis and the inertial up direction `-g_hat`.
    ///
    /// Zero in hover (thrust axis vertical), approaches pi/2 in level flight.
    pub fn tilt_from_vertical(&self, up: Vec3) -> f64 {
        let bx = self.rotation() * Vec3::x();
        bx.dot(&up.normalize()).clamp(-1.0, 1.0).acos()
    }
}

impl std::ops::Mul for UnitQuat {
    type Output = UnitQuat;
    fn mul(self, rhs: UnitQuat) -> UnitQuat {
        UnitQuat::mul(self, rhs)
    }
}

/// Quaternion rate `[eta_dot, eps_dot]`; not renormalized.
#[derive(Debug, Clone, Copy)]
pub struct QuatRate {
    pub eta: f64,
    pub eps: Vec3,
}

/// Attitude kinematics `q_dot = 1/2 q (x) [0, omega_b]`.
pub fn quat_deriv(q: UnitQuat, omega_b: Vec3) -> QuatRate {
    QuatRate {
        eta: -0.5 * q.eps.dot(&omega_b),
        eps: 0.5 * (omega_b * q.eta + q.eps.cross(&omega_b)),
    }
}

/// Attitude error `q_ref^-1 (x) q`; identity when `q == q_ref`.
pub fn quat_error(q_ref: UnitQuat, q: UnitQuat) -> UnitQuat {
    q_ref.conjugate().mul(q)
}

/// Euler angles (roll, pitch, yaw) in the ZYX convention, for plotting only.
pub fn euler_angles(q: UnitQuat) -> (f64, f64, f64) {
    let r = q.rotation();
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    (roll, pitch, yaw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn e(i: usize) -> Vec3 {
        let mut v = Vec3::zeros();
        v[i] = 1.0;
        v
    }

    #[test]
    fn skew_reproduces_cross_product_basis() {
        assert_eq!(skew(e(0)) * e(1), e(2));
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(skew(v) * v, Vec3::zeros());
    }

    #[test]
    fn skew_is_exactly_antisymmetric() {
        let v = Vec3::new(-0.3, 7.5, 2.25);
        let s = skew(v);
        assert_eq!(s + s.transpose(), Mat3::zeros());
    }

    #[test]
    fn skew_of_lateral_offset_matches_reduced_pattern() {
        // For a = (0, -a_y, 0) the only surviving entries are +/- a_y in the corners.
        let a_y = 0.155;
        let s = skew(Vec3::new(0.0, -a_y, 0.0));
        let expected = Mat3::new(0.0, 0.0, -a_y, 0.0, 0.0, 0.0, a_y, 0.0, 0.0);
        assert_eq!(s, expected);
    }

    #[test]
    fn identity_quat_rotation_is_identity() {
        assert_eq!(UnitQuat::IDENTITY.rotation(), Mat3::identity());
    }

    #[test]
    fn half_turn_about_y_maps_e1_to_minus_e3() {
        let q = UnitQuat::new(1.0 / 2.0_f64.sqrt(), Vec3::new(0.0, 1.0 / 2.0_f64.sqrt(), 0.0));
        let r = q.rotation();
        assert_relative_eq!(r * e(0), -e(2), epsilon = 1e-12);
    }

    #[test]
    fn rotation_matches_elementwise_quaternion_form() {
        // Full element-wise matrix in terms of (eta, eps).
        let q = UnitQuat::new(0.9, Vec3::new(0.19, 0.36, 0.15));
        let (n, e1, e2, e3) = (q.eta, q.eps.x, q.eps.y, q.eps.z);
        let expected = Mat3::new(
            n * n + e1 * e1 - e2 * e2 - e3 * e3,
            2.0 * e1 * e2 - 2.0 * n * e3,
            2.0 * n * e2 + 2.0 * e1 * e3,
            2.0 * n * e3 + 2.0 * e1 * e2,
            n * n - e1 * e1 + e2 * e2 - e3 * e3,
            2.0 * e2 * e3 - 2.0 * n * e1,
            2.0 * e1 * e3 - 2.0 * n * e2,
            2.0 * n * e1 + 2.0 * e2 * e3,
            n * n - e1 * e1 - e2 * e2 + e3 * e3,
        );
        assert_relative_eq!(q.rotation(), expected, epsilon = 1e-14);
    }

    #[test]
    fn quat_mul_identity_and_inverse() {
        let q = UnitQuat::from_axis_angle(Vec3::new(1.0, -2.0, 0.5), 1.1);
        let qi = UnitQuat::IDENTITY.mul(q);
        assert_relative_eq!(qi.eta, q.eta, epsilon = 1e-15);
        let back = q.mul(q.conjugate());
        assert_relative_eq!(back.eta.abs(), 1.0, epsilon = 1e-15);
        assert!(back.eps.norm() < 1e-15);
    }

    #[test]
    fn quat_deriv_at_identity_is_half_rate() {
        let w = Vec3::new(0.3, -0.7, 0.2);
        let d = quat_deriv(UnitQuat::IDENTITY, w);
        assert_eq!(d.eta, 0.0);
        assert_eq!(d.eps, 0.5 * w);

        let dz = quat_deriv(UnitQuat::from_axis_angle(e(2), 0.4), Vec3::zeros());
        assert_eq!(dz.eta, 0.0);
        assert_eq!(dz.eps, Vec3::zeros());
    }

    #[test]
    fn quat_error_basics() {
        let q = UnitQuat::from_axis_angle(Vec3::new(0.2, 1.0, -0.4), 0.8);
        let id = quat_error(q, q);
        assert_relative_eq!(id.eta.abs(), 1.0, epsilon = 1e-14);
        let same = quat_error(UnitQuat::IDENTITY, q);
        assert_relative_eq!(same.eta, q.eta, epsilon = 1e-14);

        // Double cover: q and -q encode the same rotation.
        let neg = UnitQuat { eta: -q.eta, eps: -q.eps };
        let err = quat_error(q, neg);
        assert_relative_eq!(err.eta.abs(), 1.0, epsilon = 1e-14);
    }

    fn arb_unit_quat() -> impl Strategy<Value = UnitQuat> {
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
        )
            .prop_filter_map("avoid near-zero quaternions", |(a, b, c, d)| {
                let n = (a * a + b * b + c * c + d * d).sqrt();
                (n > 1e-3).then(|| UnitQuat::new(a, Vec3::new(b, c, d)))
            })
    }

    proptest! {
        #[test]
        fn rotation_is_proper_orthogonal(q in arb_unit_quat()) {
            let r = q.rotation();
            let gram = r.transpose() * r - Mat3::identity();
            prop_assert!(gram.amax() <= 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn product_stays_unit_and_is_homomorphic(a in arb_unit_quat(), b in arb_unit_quat()) {
            let ab = a.mul(b);
            prop_assert!((ab.norm() - 1.0).abs() <= 1e-9);
            let lhs = ab.rotation();
            let rhs = a.rotation() * b.rotation();
            prop_assert!((lhs - rhs).amax() <= 1e-12);
        }

        #[test]
        fn deriv_is_norm_preserving_to_first_order(q in arb_unit_quat(), w in prop::array::uniform3(-5.0f64..5.0)) {
            let d = quat_deriv(q, Vec3::from(w));
            let inner = q.eta * d.eta + q.eps.dot(&d.eps);
            prop_assert!(inner.abs() <= 1e-12);
        }

        #[test]
        fn deriv_component_form_uses_constrained_eta(eps in prop::array::uniform3(-0.5f64..0.5), w in prop::array::uniform3(-3.0f64..3.0)) {
            let eps = Vec3::from(eps);
            let eta = (1.0 - eps.norm_squared()).sqrt();
            let q = UnitQuat { eta, eps };
            let w = Vec3::from(w);
            let d = quat_deriv(q, w);
            // Component form with eta replaced by sqrt(1 - |eps|^2).
            let expected = 0.5 * ((1.0 - eps.norm_squared()).sqrt() * w + eps.cross(&w));
            prop_assert!((d.eps - expected).norm() <= 1e-12);
        }

        #[test]
        fn rotation_two_written_forms_agree(q in arb_unit_quat()) {
            let sx = skew(q.eps);
            let form_a = Mat3::identity() + sx * (2.0 * q.eta) + sx * sx * 2.0;
            let outer = q.eps * q.eps.transpose() - Mat3::identity() * q.eps.norm_squared();
            let form_b = Mat3::identity() + sx * (2.0 * q.eta) + outer * 2.0;
            prop_assert!((form_a - form_b).amax() <= 1e-12);
        }
    }
}
