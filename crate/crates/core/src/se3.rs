//! Rigid-body transforms in 3D.
//!
//! Rotations are stored as unit quaternions and renormalized after every
//! composition. Tangent vectors are ordered `[linear; angular]`, so the
//! adjoint of `T = (R, t)` is `[[R, [t]x R], [0, R]]`, and perturbations
//! are applied on the right: `T * exp(delta)`.

use std::fmt;
use std::ops::Mul;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix3, Matrix6, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Below this angle the closed forms switch to their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-4;

/// Guard of the align-vectors construction: `|a x b| < ALIGN_EPS` returns identity.
pub const ALIGN_EPS: f64 = 1e-6;

static ANTIPARALLEL_ALIGNMENTS: AtomicU64 = AtomicU64::new(0);

/// Number of `align_vectors` calls so far that hit the identity guard with
/// antiparallel inputs. The returned identity does not map `a` onto `b` in
/// that case.
pub fn antiparallel_alignment_count() -> u64 {
    ANTIPARALLEL_ALIGNMENTS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    rotation: UnitQuaternion<T>,
    translation: Vector3<T>,
}

/// Element of the tangent space: `linear` in meters, `angular` in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist<T: Real> {
    pub linear: Vector3<T>,
    pub angular: Vector3<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError<T: Real> {
    /// Meters.
    pub translation: T,
    /// Degrees.
    pub rotation_deg: T,
}

impl<T: Real> fmt::Debug for Pose<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        write!(
            f,
            "Pose(q=[{:?}, {:?}, {:?}, {:?}], t=[{:?}, {:?}, {:?}])",
            q.w, q.i, q.j, q.k, self.translation.x, self.translation.y, self.translation.z
        )
    }
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<T>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Builds a pose from a rotation matrix that is assumed orthonormal.
    pub fn from_matrix_parts(rotation: &Matrix3<T>, translation: Vector3<T>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self {
            translation: -(inv * self.translation),
            rotation: inv,
        }
    }

    pub fn compose(&self, other: &Self) -> Self {
        let mut q = self.rotation.into_inner() * other.rotation.into_inner();
        q /= q.norm();
        Self {
            rotation: UnitQuaternion::new_unchecked(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation * v
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> T {
        so3_log(&self.rotation).norm()
    }

    /// Exponential map from the tangent space.
    pub fn exp(xi: &Twist<T>) -> Self {
        let rotation = so3_exp(&xi.angular);
        let translation = so3_left_jacobian(&xi.angular) * xi.linear;
        Self {
            rotation,
            translation,
        }
    }

    /// Logarithmic map. Never fails; at exactly pi the axis sign is arbitrary.
    pub fn ln(&self) -> Twist<T> {
        let angular = so3_log(&self.rotation);
        let linear = so3_left_jacobian_inv(&angular) * self.translation;
        Twist { linear, angular }
    }

    /// `self * exp(delta)`.
    pub fn retract(&self, delta: &Twist<T>) -> Self {
        self.compose(&Self::exp(delta))
    }

    /// Adjoint for `[linear; angular]` ordering: `exp(Ad * xi) = T exp(xi) T^-1`.
    pub fn adjoint(&self) -> Matrix6<T> {
        let r = self.rotation_matrix();
        let tr = skew(&self.translation) * r;
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }

    /// `[qw, qx, qy, qz, tx, ty, tz]`.
    pub fn to_array(&self) -> [T; 7] {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    /// Inverse of [`Pose::to_array`]; the quaternion is renormalized.
    pub fn from_array(a: &[T; 7]) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pose record".into()));
        }
        let q = Quaternion::new(a[0], a[1], a[2], a[3]);
        let n = q.norm();
        if n < lit(1e-12) {
            return Err(Error::InvalidArgument("zero-norm quaternion".into()));
        }
        Ok(Self::new(
            UnitQuaternion::new_unchecked(q / n),
            Vector3::new(a[4], a[5], a[6]),
        ))
    }

    /// Converts to another scalar precision.
    pub fn cast<U: Real>(&self) -> Pose<U> {
        let a = self.to_array();
        let c = |x: T| -> U { nalgebra::convert(nalgebra::try_convert::<T, f64>(x).unwrap_or(0.0)) };
        let q = Quaternion::new(c(a[0]), c(a[1]), c(a[2]), c(a[3]));
        Pose::new(
            UnitQuaternion::new_normalize(q),
            Vector3::new(c(a[4]), c(a[5]), c(a[6])),
        )
    }
}

impl<T: Real> Mul for Pose<T> {
    type Output = Pose<T>;

    fn mul(self, rhs: Pose<T>) -> Pose<T> {
        self.compose(&rhs)
    }
}

impl<'a, T: Real> Mul<&'a Pose<T>> for Pose<T> {
    type Output = Pose<T>;

    fn mul(self, rhs: &'a Pose<T>) -> Pose<T> {
        self.compose(rhs)
    }
}

impl<'a, T: Real> Mul<&'a Pose<T>> for &'a Pose<T> {
    type Output = Pose<T>;

    fn mul(self, rhs: &'a Pose<T>) -> Pose<T> {
        self.compose(rhs)
    }
}

impl<T: Real> Twist<T> {
    pub fn zero() -> Self {
        Self {
            linear: Vector3::zeros(),
            angular: Vector3::zeros(),
        }
    }

    pub fn new(linear: Vector3<T>, angular: Vector3<T>) -> Self {
        Self { linear, angular }
    }

    pub fn from_vector(v: &Vector6<T>) -> Self {
        Self {
            linear: v.fixed_rows::<3>(0).into_owned(),
            angular: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<T> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.linear);
        v.fixed_rows_mut::<3>(3).copy_from(&self.angular);
        v
    }

    pub fn norm_squared(&self) -> T {
        self.linear.norm_squared() + self.angular.norm_squared()
    }

    pub fn norm(&self) -> T {
        self.norm_squared().sqrt()
    }
}

/// Logarithm with the ambiguous-axis check: fails when the rotation angle
/// is within 1e-6 of pi.
pub fn log_map<T: Real>(p: &Pose<T>) -> Result<Twist<T>> {
    let xi = p.ln();
    let angle = xi.angular.norm();
    if angle > T::pi() - lit(1e-6) {
        return Err(Error::AmbiguousAxis {
            angle: nalgebra::try_convert(angle).unwrap_or(f64::NAN),
        });
    }
    Ok(xi)
}

pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

pub fn so3_exp<T: Real>(phi: &Vector3<T>) -> UnitQuaternion<T> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (w, k) = if theta < lit(SMALL_ANGLE) {
        (
            T::one() - theta2 / lit(8.0),
            lit::<T>(0.5) - theta2 / lit(48.0),
        )
    } else {
        let half = theta * lit(0.5);
        (half.cos(), half.sin() / theta)
    };
    let q = Quaternion::new(w, k * phi.x, k * phi.y, k * phi.z);
    UnitQuaternion::new_unchecked(q / q.norm())
}

/// Rotation vector of a unit quaternion, angle in `[0, pi]`.
pub fn so3_log<T: Real>(q: &UnitQuaternion<T>) -> Vector3<T> {
    let q = q.quaternion();
    let (w, v) = if q.w < T::zero() {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n2 = v.norm_squared();
    let n = n2.sqrt();
    if n < lit(SMALL_ANGLE) {
        // 2 atan(n / w) / n expanded around n = 0
        let s = lit::<T>(2.0) / w * (T::one() - n2 / (lit::<T>(3.0) * w * w));
        v * s
    } else {
        let theta = lit::<T>(2.0) * n.atan2(w);
        v * (theta / n)
    }
}

/// Left Jacobian of SO(3); also the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < lit(SMALL_ANGLE) {
        (
            lit::<T>(0.5) - theta2 / lit(24.0),
            lit::<T>(1.0 / 6.0) - theta2 / lit(120.0),
        )
    } else {
        (
            (T::one() - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inv<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let c = if theta < lit(SMALL_ANGLE) {
        lit::<T>(1.0 / 12.0) + theta2 / lit(720.0)
    } else {
        T::one() / theta2 - (T::one() + theta.cos()) / (lit::<T>(2.0) * theta * theta.sin())
    };
    Matrix3::identity() - k * lit::<T>(0.5) + k * k * c
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q_block<T: Real>(rho: &Vector3<T>, phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let px = skew(phi);
    let rx = skew(rho);
    let (c1, c2, c3) = if theta < lit(SMALL_ANGLE) {
        (
            lit::<T>(1.0 / 6.0) - theta2 / lit(120.0),
            lit::<T>(1.0 / 24.0) - theta2 / lit(720.0),
            lit::<T>(1.0 / 120.0) - theta2 / lit(2520.0),
        )
    } else {
        let (s, c) = (theta.sin(), theta.cos());
        let theta4 = theta2 * theta2;
        (
            (theta - s) / (theta2 * theta),
            (theta2 + lit::<T>(2.0) * c - lit(2.0)) / (lit::<T>(2.0) * theta4),
            (lit::<T>(2.0) * theta - lit::<T>(3.0) * s + theta * c)
                / (lit::<T>(2.0) * theta4 * theta),
        )
    };
    let pr = px * rx;
    let rp = rx * px;
    let prp = pr * px;
    rx * lit::<T>(0.5) + (pr + rp + prp) * c1 + (px * pr + rp * px - prp * lit::<T>(3.0)) * c2
        + (prp * px + px * prp) * c3
}

/// Left Jacobian of SE(3): `exp(xi + d) ~= exp(Jl d) exp(xi)`.
pub fn se3_left_jacobian<T: Real>(xi: &Twist<T>) -> Matrix6<T> {
    let j = so3_left_jacobian(&xi.angular);
    let q = se3_q_block(&xi.linear, &xi.angular);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out
}

/// Right Jacobian of SE(3): `exp(xi + d) ~= exp(xi) exp(Jr d)`.
pub fn se3_right_jacobian<T: Real>(xi: &Twist<T>) -> Matrix6<T> {
    se3_left_jacobian(&Twist::new(-xi.linear, -xi.angular))
}

/// Inverse right Jacobian: `log(exp(xi) exp(d)) ~= xi + Jr^-1 d`.
pub fn se3_right_jacobian_inv<T: Real>(xi: &Twist<T>) -> Matrix6<T> {
    let neg = Twist::new(-xi.linear, -xi.angular);
    let j_inv = so3_left_jacobian_inv(&neg.angular);
    let q = se3_q_block(&neg.linear, &neg.angular);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-(j_inv * q * j_inv)));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out
}

/// Rotation taking the direction of `a` onto the direction of `b`.
///
/// Both inputs are normalized first. When `|a x b| < ALIGN_EPS` the identity
/// is returned, including for antiparallel inputs (counted, see
/// [`antiparallel_alignment_count`]).
pub fn align_vectors<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> Result<Matrix3<T>> {
    let (na, nb) = (a.norm(), b.norm());
    if !(na > T::zero()) || !(nb > T::zero()) {
        return Err(Error::InvalidArgument(
            "align_vectors requires nonzero input vectors".into(),
        ));
    }
    let a = a / na;
    let b = b / nb;
    let v = a.cross(&b);
    let s = v.norm();
    let c = a.dot(&b);
    if s < lit(ALIGN_EPS) {
        if c < T::zero() {
            ANTIPARALLEL_ALIGNMENTS.fetch_add(1, Ordering::Relaxed);
            log::debug!("align_vectors: antiparallel inputs, returning identity");
        }
        return Ok(Matrix3::identity());
    }
    let k = skew(&v);
    Ok(Matrix3::identity() + k + k * k * ((T::one() - c) / (s * s)))
}

/// Translational distance and rotation angle (degrees) between two poses.
pub fn pose_error<T: Real>(p: &Pose<T>, q: &Pose<T>) -> PoseError<T> {
    let translation = (p.translation - q.translation).norm();
    let rel = p.rotation.inverse() * q.rotation;
    let angle = so3_log(&rel).norm();
    PoseError {
        translation,
        rotation_deg: angle * lit(180.0) / T::pi(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_twist(rng: &mut impl Rng, max_angle: f64) -> Twist<f64> {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        Twist::new(
            Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ),
            axis * rng.gen_range(0.0..max_angle),
        )
    }

    fn assert_pose_eq(a: &Pose<f64>, b: &Pose<f64>, tol: f64) {
        let e = pose_error(a, b);
        assert!(e.translation < tol, "translation {} ({a:?} vs {b:?})", e.translation);
        assert!(e.rotation_deg.to_radians() < tol, "rotation {}", e.rotation_deg);
    }

    #[test]
    fn log_of_identity_is_zero() {
        let xi = log_map(&Pose::<f64>::identity()).unwrap();
        assert_eq!(xi.norm(), 0.0);
    }

    #[test]
    fn log_of_pure_translation() {
        let p = Pose::from_translation(Vector3::new(0.5, 0.0, 0.0));
        let xi = log_map(&p).unwrap();
        assert_eq!(xi.angular, Vector3::zeros());
        assert_relative_eq!(xi.linear, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn log_of_quarter_turn_about_z() {
        let p = Pose::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2));
        let xi = log_map(&p).unwrap();
        assert_relative_eq!(xi.angular, Vector3::new(0.0, 0.0, FRAC_PI_2), epsilon = 1e-12);
        assert_relative_eq!(xi.linear.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn log_near_pi_reports_ambiguous_axis() {
        let p = Pose::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI - 1e-8));
        assert!(matches!(log_map(&p), Err(Error::AmbiguousAxis { .. })));
        let ok = Pose::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI - 1e-3));
        assert!(log_map(&ok).is_ok());
    }

    #[test]
    fn exp_log_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, 3.0);
            let back = Pose::exp(&xi).ln();
            worst = worst.max((back.to_vector() - xi.to_vector()).amax());
        }
        assert!(worst < 1e-8, "max round-trip error {worst}");
    }

    #[test]
    fn group_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = Pose::exp(&random_twist(&mut rng, 3.0));
            let b = Pose::exp(&random_twist(&mut rng, 3.0));
            let c = Pose::exp(&random_twist(&mut rng, 3.0));
            assert_pose_eq(&((a * b) * c), &(a * (b * c)), 1e-9);
            assert_pose_eq(&(a * a.inverse()), &Pose::identity(), 1e-9);
            assert_pose_eq(&(Pose::identity() * a), &a, 1e-12);
            assert_pose_eq(&(a * Pose::identity()), &a, 1e-12);
            let r = a.rotation_matrix();
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn adjoint_conjugates_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = Pose::exp(&random_twist(&mut rng, 3.0));
            let xi = random_twist(&mut rng, 1.0);
            let lhs = Pose::exp(&Twist::from_vector(&(t.adjoint() * xi.to_vector())));
            let rhs = t * Pose::exp(&xi) * t.inverse();
            assert_pose_eq(&lhs, &rhs, 1e-9);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for trial in 0..50 {
            let max = if trial < 5 { 1e-5 } else { 2.5 };
            let xi = random_twist(&mut rng, max);
            let jr = se3_right_jacobian(&xi);
            let jr_inv = se3_right_jacobian_inv(&xi);
            let jl = se3_left_jacobian(&xi);
            assert!((jr * jr_inv - Matrix6::identity()).amax() < 1e-9);
            let base = Pose::exp(&xi);
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let plus = Twist::from_vector(&(xi.to_vector() + d));
                let minus = Twist::from_vector(&(xi.to_vector() - d));
                // right: exp(xi)^-1 exp(xi + d) = exp(Jr d)
                let r_fd = ((base.inverse() * Pose::exp(&plus)).ln().to_vector()
                    - (base.inverse() * Pose::exp(&minus)).ln().to_vector())
                    / (2.0 * h);
                assert!((r_fd - jr.column(k)).amax() < 1e-6, "Jr column {k}");
                let l_fd = ((Pose::exp(&plus) * base.inverse()).ln().to_vector()
                    - (Pose::exp(&minus) * base.inverse()).ln().to_vector())
                    / (2.0 * h);
                assert!((l_fd - jl.column(k)).amax() < 1e-6, "Jl column {k}");
            }
        }
    }

    #[test]
    fn align_vectors_examples() {
        let x = Vector3::new(1.0, 0.0, 0.0);
        let y = Vector3::new(0.0, 1.0, 0.0);
        assert_eq!(align_vectors(&x, &x).unwrap(), Matrix3::identity());
        let r = align_vectors(&x, &y).unwrap();
        let expected = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2)
            .to_rotation_matrix()
            .into_inner();
        assert_relative_eq!(r, expected, epsilon = 1e-12);
        let a = Vector3::new(1.0, 1.0, 0.0) / 2f64.sqrt();
        let r = align_vectors(&a, &y).unwrap();
        assert!((r * a - y).norm() < 1e-9);
        assert!(align_vectors(&Vector3::zeros(), &y).is_err());
    }

    #[test]
    fn align_vectors_antiparallel_returns_identity_and_counts() {
        let before = antiparallel_alignment_count();
        let x = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(align_vectors(&x, &(-x)).unwrap(), Matrix3::identity());
        assert!(antiparallel_alignment_count() > before);
    }

    #[test]
    fn align_vectors_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut done = 0;
        while done < 1000 {
            let a = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let b = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if a.norm() < 1e-3 || b.norm() < 1e-3 || a.normalize().dot(&b.normalize()) < -0.999 {
                continue;
            }
            let r = align_vectors(&a, &b).unwrap();
            assert!((r * a.normalize() - b.normalize()).norm() < 1e-9);
            done += 1;
        }
    }

    #[test]
    fn pose_error_examples() {
        let id = Pose::<f64>::identity();
        let e = pose_error(&id, &id);
        assert_eq!((e.translation, e.rotation_deg), (0.0, 0.0));
        let e = pose_error(&id, &Pose::from_translation(Vector3::new(3.0, 4.0, 0.0)));
        assert_relative_eq!(e.translation, 5.0);
        assert_eq!(e.rotation_deg, 0.0);
        let axis = nalgebra::Unit::new_normalize(Vector3::new(0.3, -1.0, 0.4));
        let q = Pose::from_rotation(UnitQuaternion::from_axis_angle(&axis, 15f64.to_radians()));
        let e = pose_error(&id, &q);
        assert_eq!(e.translation, 0.0);
        assert_relative_eq!(e.rotation_deg, 15.0, epsilon = 1e-10);
    }

    #[test]
    fn array_round_trip_and_f32() {
        let p = Pose::exp(&Twist::new(Vector3::new(1.0, -2.0, 0.5), Vector3::new(0.1, 0.2, -0.3)));
        let back = Pose::from_array(&p.to_array()).unwrap();
        assert_pose_eq(&p, &back, 1e-12);
        let pf: Pose<f32> = p.cast();
        let xf = pf.ln();
        assert!((xf.linear.x as f64 - p.ln().linear.x).abs() < 1e-4);
        assert!(Pose::<f64>::from_array(&[0.0; 7]).is_err());
    }

    proptest! {
        #[test]
        fn pose_error_symmetric_rotation_and_triangle(
            a in prop::array::uniform6(-2.0f64..2.0),
            b in prop::array::uniform6(-2.0f64..2.0),
            c in prop::array::uniform6(-2.0f64..2.0),
        ) {
            let mk = |v: [f64; 6]| Pose::exp(&Twist::from_vector(&Vector6::from_row_slice(&v)));
            let (p, q, r) = (mk(a), mk(b), mk(c));
            let pq = pose_error(&p, &q);
            let qp = pose_error(&q, &p);
            prop_assert!((pq.rotation_deg - qp.rotation_deg).abs() < 1e-9);
            let pr = pose_error(&p, &r);
            let rq = pose_error(&r, &q);
            prop_assert!(pq.translation <= pr.translation + rq.translation + 1e-12);
        }
    }
}
