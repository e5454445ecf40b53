//! Narrow Jacobian blocks for the hand-assembled loss gradients.
//!
//! Each helper evaluates one kernel from [`crate::se3::kernel`] on dual
//! numbers and returns the value together with its partials. Loss code
//! chains these blocks instead of differentiating whole residuals at once,
//! which keeps the dual-number lane counts (and therefore cost) small.

use crate::dual::Dual;
use crate::se3::kernel;

/// Rotation of `v` by quaternion `q`: value and 3×4 Jacobian w.r.t. `q`.
pub fn rotate_jac(q: [f64; 4], v: [f64; 3]) -> ([f64; 3], [[f64; 4]; 3]) {
    let qd: [Dual<4>; 4] = std::array::from_fn(|i| Dual::var(q[i], i));
    let vd = v.map(Dual::constant);
    let out = kernel::rotate(qd, vd);
    (out.map(|o| o.v), out.map(|o| o.d))
}

/// Rotation of `v` by the inverse of `q`: value and 3×4 Jacobian w.r.t. `q`.
pub fn rotate_inv_jac(q: [f64; 4], v: [f64; 3]) -> ([f64; 3], [[f64; 4]; 3]) {
    let qd: [Dual<4>; 4] = std::array::from_fn(|i| Dual::var(q[i], i));
    let vd = v.map(Dual::constant);
    let out = kernel::rotate_inv(qd, vd);
    (out.map(|o| o.v), out.map(|o| o.d))
}

/// Effective rotation matrix of `q` (including the 1/‖q‖² factor), which is
/// the Jacobian of `rotate(q, ·)` w.r.t. the rotated vector.
pub fn rotate_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for col in 0..3 {
        let mut e = [0.0; 3];
        e[col] = 1.0;
        let r = kernel::rotate(q, e);
        for row in 0..3 {
            m[row][col] = r[row];
        }
    }
    m
}

/// Jacobian of `rotate_inv(q, ·)` w.r.t. the rotated vector.
pub fn rotate_inv_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    rotate_matrix(kernel::quat_conj(q))
}

/// Relative rotation angle of two quaternions with its gradients.
pub fn relative_angle_jac(qa: [f64; 4], qb: [f64; 4]) -> (f64, [f64; 4], [f64; 4]) {
    let a: [Dual<8>; 4] = std::array::from_fn(|i| Dual::var(qa[i], i));
    let b: [Dual<8>; 4] = std::array::from_fn(|i| Dual::var(qb[i], 4 + i));
    let out = kernel::relative_angle(a, b);
    let mut da = [0.0; 4];
    let mut db = [0.0; 4];
    da.copy_from_slice(&out.d[..4]);
    db.copy_from_slice(&out.d[4..]);
    (out.v, da, db)
}

/// Relative transform `dst ∘ src⁻¹` as a dual quaternion, with the 8×14
/// Jacobian over (q_src, t_src, q_dst, t_dst) in that lane order.
pub fn dq_delta_jac(
    q_src: [f64; 4],
    t_src: [f64; 3],
    q_dst: [f64; 4],
    t_dst: [f64; 3],
) -> ([f64; 8], [[f64; 14]; 8]) {
    let qs: [Dual<14>; 4] = std::array::from_fn(|i| Dual::var(q_src[i], i));
    let ts: [Dual<14>; 3] = std::array::from_fn(|i| Dual::var(t_src[i], 4 + i));
    let qd: [Dual<14>; 4] = std::array::from_fn(|i| Dual::var(q_dst[i], 7 + i));
    let td: [Dual<14>; 3] = std::array::from_fn(|i| Dual::var(t_dst[i], 11 + i));
    let out = kernel::dq_delta(qs, ts, qd, td);
    (out.map(|o| o.v), out.map(|o| o.d))
}

/// Application of a blended dual quaternion to a point: value, 3×8 Jacobian
/// w.r.t. the blend coefficients, and 3×3 Jacobian w.r.t. the point.
pub fn dq_apply_jac(b: [f64; 8], x: [f64; 3]) -> ([f64; 3], [[f64; 8]; 3], [[f64; 3]; 3]) {
    let bd: [Dual<11>; 8] = std::array::from_fn(|i| Dual::var(b[i], i));
    let xd: [Dual<11>; 3] = std::array::from_fn(|i| Dual::var(x[i], 8 + i));
    let out = kernel::dq_apply(bd, xd);
    let val = out.map(|o| o.v);
    let mut jb = [[0.0; 8]; 3];
    let mut jx = [[0.0; 3]; 3];
    for row in 0..3 {
        jb[row].copy_from_slice(&out[row].d[..8]);
        jx[row].copy_from_slice(&out[row].d[8..]);
    }
    (val, jb, jx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut impl Rng) -> [f64; 4] {
        let mut q = [0.0; 4];
        loop {
            for x in &mut q {
                *x = rng.gen_range(-1.0..1.0);
            }
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.3 {
                for x in &mut q {
                    *x /= n;
                }
                return q;
            }
        }
    }

    fn rand3(rng: &mut impl Rng) -> [f64; 3] {
        std::array::from_fn(|_| rng.gen_range(-2.0..2.0))
    }

    fn fd_check(analytic: f64, f: impl Fn(f64) -> f64, x: f64) {
        let h = 1e-6;
        let fd = (f(x + h) - f(x - h)) / (2.0 * h);
        let rel = (fd - analytic).abs() / (fd.abs() + analytic.abs() + 1e-8);
        assert!(rel < 1e-5, "fd {fd} vs analytic {analytic}");
    }

    #[test]
    fn rotate_jacobians_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let q = rand4(&mut rng);
            let v = rand3(&mut rng);
            let (_, jq) = rotate_jac(q, v);
            for row in 0..3 {
                for col in 0..4 {
                    fd_check(
                        jq[row][col],
                        |x| {
                            let mut qq = q;
                            qq[col] = x;
                            kernel_rotate(qq, v)[row]
                        },
                        q[col],
                    );
                }
            }
            let m = rotate_matrix(q);
            for row in 0..3 {
                for col in 0..3 {
                    fd_check(
                        m[row][col],
                        |x| {
                            let mut vv = v;
                            vv[col] = x;
                            kernel_rotate(q, vv)[row]
                        },
                        v[col],
                    );
                }
            }
        }
    }

    fn kernel_rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
        crate::se3::kernel::rotate(q, v)
    }

    #[test]
    fn relative_angle_jacobian_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let qa = rand4(&mut rng);
            let qb = rand4(&mut rng);
            let (_, da, db) = relative_angle_jac(qa, qb);
            for i in 0..4 {
                fd_check(
                    da[i],
                    |x| {
                        let mut q = qa;
                        q[i] = x;
                        crate::se3::kernel::relative_angle(q, qb)
                    },
                    qa[i],
                );
                fd_check(
                    db[i],
                    |x| {
                        let mut q = qb;
                        q[i] = x;
                        crate::se3::kernel::relative_angle(qa, q)
                    },
                    qb[i],
                );
            }
        }
    }

    #[test]
    fn dq_delta_jacobian_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let qs = rand4(&mut rng);
        let ts = rand3(&mut rng);
        let qd = rand4(&mut rng);
        let td = rand3(&mut rng);
        let (_, jac) = dq_delta_jac(qs, ts, qd, td);
        let eval = |qs: [f64; 4], ts: [f64; 3], qd: [f64; 4], td: [f64; 3]| {
            crate::se3::kernel::dq_delta(qs, ts, qd, td)
        };
        for row in 0..8 {
            for lane in 0..14 {
                fd_check(
                    jac[row][lane],
                    |x| {
                        let (mut qs, mut ts, mut qd, mut td) = (qs, ts, qd, td);
                        match lane {
                            0..=3 => qs[lane] = x,
                            4..=6 => ts[lane - 4] = x,
                            7..=10 => qd[lane - 7] = x,
                            _ => td[lane - 11] = x,
                        }
                        eval(qs, ts, qd, td)[row]
                    },
                    match lane {
                        0..=3 => qs[lane],
                        4..=6 => ts[lane - 4],
                        7..=10 => qd[lane - 7],
                        _ => td[lane - 11],
                    },
                );
            }
        }
    }

    #[test]
    fn dq_apply_jacobian_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..10 {
            let q = rand4(&mut rng);
            let t = rand3(&mut rng);
            let b = crate::se3::kernel::dq_from_parts(q, t);
            let x = rand3(&mut rng);
            let (_, jb, jx) = dq_apply_jac(b, x);
            for row in 0..3 {
                for lane in 0..8 {
                    fd_check(
                        jb[row][lane],
                        |v| {
                            let mut bb = b;
                            bb[lane] = v;
                            crate::se3::kernel::dq_apply(bb, x)[row]
                        },
                        b[lane],
                    );
                }
                for lane in 0..3 {
                    fd_check(
                        jx[row][lane],
                        |v| {
                            let mut xx = x;
                            xx[lane] = v;
                            crate::se3::kernel::dq_apply(b, xx)[row]
                        },
                        x[lane],
                    );
                }
            }
        }
    }
}
