//! Dual quaternions for rigid transforms and weighted blending.
//!
//! A dual quaternion `q = real + eps * dual` encodes a rigid transform; the
//! real part carries the rotation, the dual part carries the translation.
//! Weighted sums of sign-aligned unit dual quaternions, renormalized, give a
//! smooth blend of transforms.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DqError {
    /// Real-part norm too close to zero to normalize.
    #[error("degenerate blend: real part norm {0} below threshold")]
    BlendDegenerate(f64),
}

/// Rigid transform as a dual quaternion. Not necessarily unit; call
/// [`DualQuat::normalized`] to project back onto rigid transforms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuat {
    pub real: Quaternion<f64>,
    pub dual: Quaternion<f64>,
}

impl DualQuat {
    pub const IDENTITY: Self = Self {
        real: Quaternion::new(1.0, 0.0, 0.0, 0.0),
        dual: Quaternion::new(0.0, 0.0, 0.0, 0.0),
    };

    pub fn new(real: Quaternion<f64>, dual: Quaternion<f64>) -> Self {
        Self { real, dual }
    }

    /// Build from a rotation about the origin followed by a translation,
    /// i.e. `x -> R x + t`.
    pub fn from_rotation_translation(rot: UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        let real = *rot.quaternion();
        let t_quat = Quaternion::new(0.0, t.x, t.y, t.z);
        Self {
            real,
            dual: t_quat * real * 0.5,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::from_rotation_translation(UnitQuaternion::identity(), t)
    }

    /// Exact exponential of a 6-dof twist `(omega, t)` under the
    /// rotate-then-translate convention: `x -> exp(omega) x + t`.
    pub fn from_twist(omega: Vector3<f64>, t: Vector3<f64>) -> Self {
        let rot = UnitQuaternion::from_scaled_axis(omega);
        Self::from_rotation_translation(rot, t)
    }

    /// Rotation part. Caller must hold a unit real part.
    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_unchecked(self.real)
    }

    /// Translation part `t = 2 * dual * conj(real)` (vector part).
    pub fn translation(&self) -> Vector3<f64> {
        let q = self.dual * self.real.conjugate() * 2.0;
        Vector3::new(q.i, q.j, q.k)
    }

    /// Unit-normalize: scale by the real norm and project the dual part onto
    /// the rigid-transform constraint `<real, dual> = 0`.
    pub fn normalized(&self) -> Result<Self, DqError> {
        let n = self.real.norm();
        if n <= 1e-9 {
            return Err(DqError::BlendDegenerate(n));
        }
        let real = self.real / n;
        let mut dual = self.dual / n;
        dual -= real * real.dot(&dual);
        Ok(Self { real, dual })
    }

    /// Apply the full rigid transform to a point. Requires unit real part.
    pub fn transform_point(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * v + self.translation()
    }

    /// Apply only the rotation part to a direction. Requires unit real part.
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * v
    }

    /// Composition: `self` applied after `rhs`.
    pub fn mul_dq(&self, rhs: &Self) -> Self {
        Self {
            real: self.real * rhs.real,
            dual: self.real * rhs.dual + self.dual * rhs.real,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            real: self.real * s,
            dual: self.dual * s,
        }
    }

    pub fn add(&self, rhs: &Self) -> Self {
        Self {
            real: self.real + rhs.real,
            dual: self.dual + rhs.dual,
        }
    }

    /// Sign of the real-part inner product; used for hemisphere alignment
    /// before summing (q and -q encode the same transform).
    pub fn real_dot(&self, rhs: &Self) -> f64 {
        self.real.dot(&rhs.real)
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }

    /// Max component-wise distance to another dual quaternion, modulo sign.
    pub fn approx_eq(&self, rhs: &Self, tol: f64) -> bool {
        let direct = (self.real - rhs.real).norm().max((self.dual - rhs.dual).norm());
        let flipped =
            (self.real + rhs.real).norm().max((self.dual + rhs.dual).norm());
        direct.min(flipped) <= tol
    }
}

impl Default for DualQuat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn normalize_is_scale_invariant() {
        let q = DualQuat::IDENTITY.scaled(2.0).normalized().unwrap();
        assert!(q.approx_eq(&DualQuat::IDENTITY, 1e-12));
    }

    #[test]
    fn normalize_is_idempotent_on_unit_inputs() {
        let q = DualQuat::from_rotation_translation(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.3, -0.2, 0.9)),
            Vector3::new(0.5, 1.0, -0.25),
        );
        let n = q.normalized().unwrap();
        assert!(n.approx_eq(&q, 1e-9));
    }

    #[test]
    fn normalize_enforces_plucker_condition() {
        let mut q = DualQuat::from_rotation_translation(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.1, 0.7, -0.4)),
            Vector3::new(0.2, 0.0, 0.3),
        );
        // Break the constraint, normalization must restore it.
        q.dual += q.real * 0.05;
        let n = q.normalized().unwrap();
        assert!(n.real.dot(&n.dual).abs() < 1e-6);
        assert_relative_eq!(n.real.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sum_of_sign_aligned_copies_normalizes_back() {
        let q = DualQuat::from_rotation_translation(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, 1.2)),
            Vector3::new(0.1, -0.2, 0.05),
        );
        let sum = q.add(&q.negated().negated());
        let n = sum.normalized().unwrap();
        assert!(n.approx_eq(&q, 1e-9));
    }

    #[test]
    fn degenerate_real_part_is_rejected() {
        let q = DualQuat::new(
            Quaternion::new(0.0, 0.0, 0.0, 0.0),
            Quaternion::new(0.0, 1.0, 0.0, 0.0),
        );
        assert!(matches!(q.normalized(), Err(DqError::BlendDegenerate(_))));
    }

    #[test]
    fn point_transform_matches_rotation_plus_translation() {
        let rot = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, FRAC_PI_2));
        let t = Vector3::new(1.0, 2.0, 3.0);
        let q = DualQuat::from_rotation_translation(rot, t);
        let p = Vector3::new(1.0, 0.0, 0.0);
        let out = q.transform_point(&p);
        assert_relative_eq!(out, rot * p + t, epsilon = 1e-12);
        assert_relative_eq!(q.translation(), t, epsilon = 1e-12);
    }

    #[test]
    fn composition_matches_sequential_application() {
        let a = DualQuat::from_twist(Vector3::new(0.2, 0.0, 0.4), Vector3::new(0.1, 0.0, 0.0));
        let b = DualQuat::from_twist(Vector3::new(0.0, -0.3, 0.1), Vector3::new(0.0, 0.2, 0.5));
        let p = Vector3::new(0.3, -0.7, 1.1);
        let via_compose = a.mul_dq(&b).transform_point(&p);
        let via_sequential = a.transform_point(&b.transform_point(&p));
        assert_relative_eq!(via_compose, via_sequential, epsilon = 1e-12);
    }
}
