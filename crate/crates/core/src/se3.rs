//! Rigid transforms, unit dual quaternions, and dual quaternion blending.
//!
//! Quaternions follow the (w, x, y, z) convention in all documentation and
//! serialized layouts. The blend [`dqb`] averages SE(3) elements on the
//! manifold: weighted sum of unit dual quaternions, antipodal sign fix
//! against the first element, then renormalization.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

/// Raised when the blended real part vanishes, i.e. the weighted rotations
/// cancel and no representative rotation exists.
#[derive(Debug, Error)]
#[error("degenerate blend: real part norm {real_norm:.3e} below 1e-12")]
pub struct DegenerateBlend {
    pub real_norm: f64,
}

/// An SE(3) element: unit-quaternion rotation plus translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rot_inv = self.rotation.inverse();
        Self {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    pub fn apply(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn to_dual_quaternion(&self) -> UnitDualQuaternion {
        let real = *self.rotation.quaternion();
        let t = Quaternion::new(
            0.0,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        );
        UnitDualQuaternion {
            real,
            dual: (t * real) * 0.5,
        }
    }
}

/// Dual quaternion `real + ε·dual` with unit real part and
/// `⟨real, dual⟩ = 0`, encoding an SE(3) element.
#[derive(Clone, Copy, Debug)]
pub struct UnitDualQuaternion {
    pub real: Quaternion<f64>,
    pub dual: Quaternion<f64>,
}

impl UnitDualQuaternion {
    pub fn identity() -> Self {
        Self {
            real: Quaternion::new(1.0, 0.0, 0.0, 0.0),
            dual: Quaternion::new(0.0, 0.0, 0.0, 0.0),
        }
    }

    pub fn to_rigid_transform(&self) -> RigidTransform {
        let rotation = UnitQuaternion::from_quaternion(self.real);
        let inv_sq = 1.0 / self.real.norm_squared();
        // t = 2 · vec(dual ⊗ real*); the scalar part of dual ⊗ real* carries
        // only the ⟨real, dual⟩ defect and never enters the translation.
        let tq = self.dual * self.real.conjugate();
        let translation = Vector3::new(tq.i, tq.j, tq.k) * (2.0 * inv_sq);
        RigidTransform { rotation, translation }
    }

    pub fn real_norm(&self) -> f64 {
        self.real.norm()
    }

    /// `⟨real, dual⟩` as 4-vectors; zero for a valid unit dual quaternion.
    pub fn orthogonality_defect(&self) -> f64 {
        quat_dot(&self.real, &self.dual)
    }
}

fn quat_dot(a: &Quaternion<f64>, b: &Quaternion<f64>) -> f64 {
    a.w * b.w + a.i * b.i + a.j * b.j + a.k * b.k
}

/// Weighted dual quaternion blend, returned in normalized dual-quaternion
/// form. Signs are fixed against the first element before summation so that
/// antipodal representatives of the same rotation reinforce instead of
/// cancelling.
pub fn dqb_dual(pairs: &[(f64, RigidTransform)]) -> Result<UnitDualQuaternion, DegenerateBlend> {
    assert!(!pairs.is_empty(), "dqb needs at least one pair");
    let first = pairs[0].1.to_dual_quaternion();
    let mut real = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    let mut dual = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for (w, t) in pairs {
        let dq = t.to_dual_quaternion();
        let sign = if quat_dot(&dq.real, &first.real) < 0.0 {
            -*w
        } else {
            *w
        };
        real += dq.real * sign;
        dual += dq.dual * sign;
    }
    let norm = real.norm();
    if norm < 1e-12 {
        return Err(DegenerateBlend { real_norm: norm });
    }
    let real = real / norm;
    let mut dual = dual / norm;
    dual -= real * quat_dot(&real, &dual);
    Ok(UnitDualQuaternion { real, dual })
}

/// Weighted dual quaternion blend as a rigid transform.
pub fn dqb(pairs: &[(f64, RigidTransform)]) -> Result<RigidTransform, DegenerateBlend> {
    Ok(dqb_dual(pairs)?.to_rigid_transform())
}

/// Frobenius norm of the matrix logarithm of the relative rotation,
/// `‖log(R_a R_b⁻¹)‖_F = √2 · θ` with θ the relative angle in [0, π].
///
/// Computed from the relative quaternion as `θ = 2·atan2(‖vec‖, |w|)`,
/// which stays regular through θ = π where the matrix log itself would
/// need an axis-disambiguation step.
pub fn rotation_log_norm(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let qa = a.quaternion();
    let qb = b.quaternion();
    let angle = kernel::relative_angle(
        [qa.w, qa.i, qa.j, qa.k],
        [qb.w, qb.i, qb.j, qb.k],
    );
    std::f64::consts::SQRT_2 * angle
}

/// Scalar-generic SE(3) kernels shared by the loss evaluations (on `f64`)
/// and the Jacobian helpers (on dual numbers).
///
/// All formulas are smooth in the ambient quaternion coordinates: rotations
/// divide by the squared quaternion norm and the relative angle is scale
/// invariant, so finite differences taken directly on quaternion components
/// agree with the derivatives assembled from these kernels.
pub(crate) mod kernel {
    use crate::dual::Real;

    pub fn quat_mul<S: Real>(a: [S; 4], b: [S; 4]) -> [S; 4] {
        [
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ]
    }

    pub fn quat_conj<S: Real>(q: [S; 4]) -> [S; 4] {
        [q[0], -q[1], -q[2], -q[3]]
    }

    pub fn norm_sq4<S: Real>(q: [S; 4]) -> S {
        q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]
    }

    pub fn norm3<S: Real>(v: [S; 3]) -> S {
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }

    pub fn sub3<S: Real>(a: [S; 3], b: [S; 3]) -> [S; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    /// Rotate `v` by the quaternion `q`, dividing by ‖q‖² so the map is
    /// defined (and smooth) for any nonzero quaternion.
    pub fn rotate<S: Real>(q: [S; 4], v: [S; 3]) -> [S; 3] {
        let qv = quat_mul(quat_mul(q, [S::from_f64(0.0), v[0], v[1], v[2]]), quat_conj(q));
        let inv = S::from_f64(1.0) / norm_sq4(q);
        [qv[1] * inv, qv[2] * inv, qv[3] * inv]
    }

    /// Rotate `v` by the inverse of `q`.
    pub fn rotate_inv<S: Real>(q: [S; 4], v: [S; 3]) -> [S; 3] {
        rotate(quat_conj(q), v)
    }

    /// Relative rotation angle between two (not necessarily unit)
    /// quaternions, in [0, π]. Scale invariant in both arguments.
    pub fn relative_angle<S: Real>(qa: [S; 4], qb: [S; 4]) -> S {
        let r = quat_mul(qa, quat_conj(qb));
        let vec_norm = norm3([r[1], r[2], r[3]]);
        S::from_f64(2.0) * vec_norm.atan2(r[0].abs())
    }

    /// Dual quaternion (8 reals: real part then dual part) of the rigid
    /// transform with rotation `q` and translation `t`. For non-unit `q`
    /// this scales the whole dual quaternion, which downstream consumers
    /// cancel through their own normalization.
    pub fn dq_from_parts<S: Real>(q: [S; 4], t: [S; 3]) -> [S; 8] {
        let half = S::from_f64(0.5);
        let d = quat_mul([S::from_f64(0.0), t[0], t[1], t[2]], q);
        [
            q[0], q[1], q[2], q[3],
            d[0] * half, d[1] * half, d[2] * half, d[3] * half,
        ]
    }

    /// Dual quaternion product `a ⊗ b`.
    pub fn dq_mul<S: Real>(a: [S; 8], b: [S; 8]) -> [S; 8] {
        let ar = [a[0], a[1], a[2], a[3]];
        let ad = [a[4], a[5], a[6], a[7]];
        let br = [b[0], b[1], b[2], b[3]];
        let bd = [b[4], b[5], b[6], b[7]];
        let r = quat_mul(ar, br);
        let d1 = quat_mul(ar, bd);
        let d2 = quat_mul(ad, br);
        [
            r[0], r[1], r[2], r[3],
            d1[0] + d2[0], d1[1] + d2[1], d1[2] + d2[2], d1[3] + d2[3],
        ]
    }

    /// Quaternion conjugate of both parts; the inverse for unit dual
    /// quaternions, and proportional to it for uniformly scaled ones.
    pub fn dq_conj<S: Real>(a: [S; 8]) -> [S; 8] {
        [a[0], -a[1], -a[2], -a[3], a[4], -a[5], -a[6], -a[7]]
    }

    /// Relative transform `dst ∘ src⁻¹` in dual quaternion form, built from
    /// the two rigid transforms' parts.
    pub fn dq_delta<S: Real>(
        q_src: [S; 4],
        t_src: [S; 3],
        q_dst: [S; 4],
        t_dst: [S; 3],
    ) -> [S; 8] {
        let src = dq_from_parts(q_src, t_src);
        let dst = dq_from_parts(q_dst, t_dst);
        dq_mul(dst, dq_conj(src))
    }

    /// Apply a blended (unnormalized) dual quaternion to a point. The
    /// division by ‖real‖² absorbs the normalization, so callers may pass
    /// raw weighted sums directly.
    pub fn dq_apply<S: Real>(b: [S; 8], x: [S; 3]) -> [S; 3] {
        let r = [b[0], b[1], b[2], b[3]];
        let d = [b[4], b[5], b[6], b[7]];
        let inv = S::from_f64(1.0) / norm_sq4(r);
        let rotated = rotate(r, x);
        let tq = quat_mul(d, quat_conj(r));
        let two = S::from_f64(2.0);
        [
            rotated[0] + two * tq[1] * inv,
            rotated[1] + two * tq[2] * inv,
            rotated[2] + two * tq[3] * inv,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_rigid;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn identity_dual_quaternion() {
        let dq = RigidTransform::identity().to_dual_quaternion();
        assert_eq!(
            (dq.real.w, dq.real.i, dq.real.j, dq.real.k),
            (1.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(
            (dq.dual.w, dq.dual.i, dq.dual.j, dq.dual.k),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn pure_translation_dual_part() {
        let t = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 2.0));
        let dq = t.to_dual_quaternion();
        assert_eq!(
            (dq.real.w, dq.real.i, dq.real.j, dq.real.k),
            (1.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(
            (dq.dual.w, dq.dual.i, dq.dual.j, dq.dual.k),
            (0.0, 0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn half_turn_about_z() {
        let t = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI),
            Vector3::zeros(),
        );
        let dq = t.to_dual_quaternion();
        assert_relative_eq!(dq.real.w, 0.0, epsilon = 1e-12);
        assert_relative_eq!(dq.real.k.abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(dq.dual.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn single_element_blend_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t = random_rigid(&mut rng);
            for w in [1.0, 0.3, 17.0] {
                let b = dqb(&[(w, t)]).unwrap();
                assert_relative_eq!(b.rotation.angle_to(&t.rotation), 0.0, epsilon = 1e-9);
                assert_relative_eq!(
                    (b.translation - t.translation).norm(),
                    0.0,
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn idempotent_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = random_rigid(&mut rng);
        let b = dqb(&[(0.5, t), (0.5, t)]).unwrap();
        assert_relative_eq!(b.rotation.angle_to(&t.rotation), 0.0, epsilon = 1e-9);
        assert_relative_eq!((b.translation - t.translation).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn even_blend_halves_rotation_angle() {
        let quarter = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
            Vector3::zeros(),
        );
        let b = dqb(&[(0.5, RigidTransform::identity()), (0.5, quarter)]).unwrap();
        assert_relative_eq!(b.rotation.angle(), FRAC_PI_2 / 2.0, epsilon = 1e-9);
        assert_relative_eq!(b.translation.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn antipodal_representatives_do_not_cancel() {
        let t = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.7),
            Vector3::new(1.0, 0.0, 0.0),
        );
        let mut flipped = t;
        flipped.rotation = UnitQuaternion::from_quaternion(-t.rotation.quaternion());
        let b = dqb(&[(0.5, t), (0.5, flipped)]).unwrap();
        assert_relative_eq!(b.rotation.angle_to(&t.rotation), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn vanishing_real_part_reported_as_degenerate() {
        // Two elements can never cancel once signs are aligned to the first:
        // identity vs half-turn lands halfway instead of degenerating.
        let id = RigidTransform::identity();
        let half = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI),
            Vector3::zeros(),
        );
        let ok = dqb(&[(0.5, id), (0.5, half)]).unwrap();
        assert_relative_eq!(ok.rotation.angle(), FRAC_PI_2, epsilon = 1e-9);

        // The guard fires when the summed real parts truly vanish: a
        // zero-weight anchor keys the sign fix while the remaining pair,
        // antipodal to each other but both orthogonal to the anchor,
        // annihilates.
        let up = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI),
            Vector3::zeros(),
        );
        let down = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -PI),
            Vector3::zeros(),
        );
        let err = dqb(&[(0.0, id), (0.5, up), (0.5, down)]).unwrap_err();
        assert!(err.real_norm < 1e-12);
    }

    #[test]
    fn rotation_log_norm_quarter_turn() {
        let a = UnitQuaternion::identity();
        let b = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), FRAC_PI_2);
        let expected = std::f64::consts::SQRT_2 * FRAC_PI_2;
        assert_relative_eq!(rotation_log_norm(&a, &b), expected, epsilon = 1e-12);
        assert_relative_eq!(rotation_log_norm(&b, &a), expected, epsilon = 1e-12);
        assert_relative_eq!(rotation_log_norm(&b, &b), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_log_norm_near_pi() {
        let a = UnitQuaternion::identity();
        let b = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), PI - 1e-9);
        let v = rotation_log_norm(&a, &b);
        assert_relative_eq!(v, std::f64::consts::SQRT_2 * PI, epsilon = 1e-6);
        let c = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), PI);
        assert_relative_eq!(
            rotation_log_norm(&a, &c),
            std::f64::consts::SQRT_2 * PI,
            epsilon = 1e-12
        );
    }

    #[test]
    fn compose_inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = random_rigid(&mut rng);
            let e = t.compose(&t.inverse());
            assert!(e.rotation.angle() < 1e-9);
            assert!(e.translation.norm() < 1e-9);
        }
    }

    #[test]
    fn dual_quaternion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let t = random_rigid(&mut rng);
            let back = t.to_dual_quaternion().to_rigid_transform();
            assert!(back.rotation.angle_to(&t.rotation) < 1e-9);
            assert!((back.translation - t.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn blend_matches_applied_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random_rigid(&mut rng);
            let b = random_rigid(&mut rng);
            let w = rng.gen_range(0.05..0.95);
            let blended = dqb(&[(w, a), (1.0 - w, b)]).unwrap();
            let dq = dqb_dual(&[(w, a), (1.0 - w, b)]).unwrap();
            assert!(dq.real_norm() - 1.0 < 1e-9);
            assert!(dq.orthogonality_defect().abs() < 1e-9);
            let p = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let via_kernel = {
                let qa = a.rotation.quaternion();
                let qb = b.rotation.quaternion();
                let da = kernel::dq_from_parts(
                    [qa.w, qa.i, qa.j, qa.k],
                    [a.translation.x, a.translation.y, a.translation.z],
                );
                let db = kernel::dq_from_parts(
                    [qb.w, qb.i, qb.j, qb.k],
                    [b.translation.x, b.translation.y, b.translation.z],
                );
                let sign = if da[0] * db[0] + da[1] * db[1] + da[2] * db[2] + da[3] * db[3] < 0.0
                {
                    -(1.0 - w)
                } else {
                    1.0 - w
                };
                let mut sum = [0.0; 8];
                for i in 0..8 {
                    sum[i] = w * da[i] + sign * db[i];
                }
                kernel::dq_apply(sum, [p.x, p.y, p.z])
            };
            let direct = blended.apply(&p);
            assert_relative_eq!(via_kernel[0], direct.x, epsilon = 1e-9);
            assert_relative_eq!(via_kernel[1], direct.y, epsilon = 1e-9);
            assert_relative_eq!(via_kernel[2], direct.z, epsilon = 1e-9);
        }
    }

    #[test]
    fn kernel_rotate_matches_quaternion_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let t = random_rigid(&mut rng);
            let q = t.rotation.quaternion();
            let p = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let k = kernel::rotate([q.w, q.i, q.j, q.k], [p.x, p.y, p.z]);
            let d = t.rotation * p;
            assert_relative_eq!(k[0], d.x, epsilon = 1e-10);
            assert_relative_eq!(k[1], d.y, epsilon = 1e-10);
            assert_relative_eq!(k[2], d.z, epsilon = 1e-10);
            let ki = kernel::rotate_inv([q.w, q.i, q.j, q.k], [p.x, p.y, p.z]);
            let di = t.rotation.inverse() * p;
            assert_relative_eq!(ki[0], di.x, epsilon = 1e-10);
        }
    }
}
