//! Lifting 2D tracklets into 3D trajectories, seeding the scaffold from
//! them, and the geometric optimization stage.
//!
//! The geometric stage moves node rotations and occluded node translations
//! while visible translations stay pinned. Its objective combines a
//! distance- and local-coordinate-preserving rigidity loss over the
//! topology pyramid with velocity and acceleration smoothness.

use crate::camera::{CameraError, CameraModel};
use crate::jac::{relative_angle_jac, rotate_inv_jac, rotate_inv_matrix};
use crate::optim::{
    minimize, MinimizeResult, Objective, OptimError, ParamBlock, Params, Schedule,
};
use crate::priors::{DepthStack, Tracklet2D};
use crate::scaffold::{resample_trajectories, MotionScaffold, PyramidLevel, ScaffoldError, ScaffoldNode};
use crate::se3::kernel;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::f64::consts::SQRT_2;
use std::path::PathBuf;

#[derive(Clone, Debug)]
pub struct LiftedTrajectory {
    pub positions: Vec<Vector3<f64>>,
    pub visibility: Vec<bool>,
    /// Index of the source tracklet.
    pub source: usize,
}

/// Replaces occluded entries in place: interior gaps are linearly
/// interpolated between the nearest visible frames with time-proportional
/// weights, leading and trailing gaps copy the nearest visible position.
pub fn interpolate_occluded(points: &mut [Vector3<f64>], visibility: &[bool]) {
    let t_count = points.len();
    let visible: Vec<usize> = (0..t_count).filter(|&t| visibility[t]).collect();
    assert!(!visible.is_empty(), "need at least one visible frame");
    for t in 0..t_count {
        if visibility[t] {
            continue;
        }
        let right = visible.iter().find(|&&v| v > t);
        let left = visible.iter().rev().find(|&&v| v < t);
        points[t] = match (left, right) {
            (Some(&l), Some(&r)) => {
                let span = (r - l) as f64;
                (points[l] * ((r - t) as f64) + points[r] * ((t - l) as f64)) / span
            }
            (Some(&l), None) => points[l],
            (None, Some(&r)) => points[r],
            (None, None) => unreachable!(),
        };
    }
}

/// Lifts one tracklet to a 3D trajectory: visible frames are backprojected
/// through the corrected depth, occluded frames filled by
/// [`interpolate_occluded`].
pub fn lift(
    track: &Tracklet2D,
    source: usize,
    cam: &CameraModel,
    depths: &DepthStack,
) -> Result<LiftedTrajectory, CameraError> {
    let t_count = track.len();
    let mut positions = vec![Vector3::zeros(); t_count];
    for t in 0..t_count {
        if track.visible(t) {
            let p = &track.points[t];
            positions[t] = cam.backproject(p, depths.corrected_at(t, p), t)?;
        }
    }
    interpolate_occluded(&mut positions, &track.visibility);
    Ok(LiftedTrajectory {
        positions,
        visibility: track.visibility.clone(),
        source,
    })
}

pub fn lift_all(
    tracks: &[Tracklet2D],
    ids: &[usize],
    cam: &CameraModel,
    depths: &DepthStack,
) -> Result<Vec<LiftedTrajectory>, CameraError> {
    ids.iter().map(|&i| lift(&tracks[i], i, cam, depths)).collect()
}

/// Builds a scaffold from lifted trajectories: curve-distance resampling,
/// identity rotations, translations copied bit-exactly, topology and
/// pyramid constructed. Returns the scaffold and, per node, the index of
/// its source trajectory in `lifted`.
pub fn init_scaffold(
    lifted: &[LiftedTrajectory],
    r_init: f64,
    spacing: f64,
    k: usize,
) -> Result<(MotionScaffold, Vec<usize>), ScaffoldError> {
    assert!(r_init > 0.0, "control radius must be positive");
    let candidates: Vec<Vec<Vector3<f64>>> =
        lifted.iter().map(|l| l.positions.clone()).collect();
    let kept = resample_trajectories(&candidates, spacing);
    let nodes = kept
        .iter()
        .map(|&i| ScaffoldNode {
            transforms: lifted[i]
                .positions
                .iter()
                .map(|p| crate::se3::RigidTransform::from_translation(*p))
                .collect(),
            radius: r_init,
        })
        .collect();
    let mut scaffold = MotionScaffold::new(nodes);
    scaffold.build_topology(k)?;
    scaffold.build_pyramid(3, 0.5, 4);
    Ok((scaffold, kept))
}

/// Node visibility matrix for [`geometric_optimize`], inherited from the
/// trajectories each node was built from.
pub fn node_visibility(lifted: &[LiftedTrajectory], kept: &[usize]) -> Vec<Vec<bool>> {
    kept.iter().map(|&i| lifted[i].visibility.clone()).collect()
}

#[derive(Clone, Debug)]
pub struct GeoGradients {
    /// Ambient quaternion gradient per (node, frame), node-major.
    pub rotation: Vec<[f64; 4]>,
    pub translation: Vec<[f64; 3]>,
}

pub(crate) fn q_at(x: &[f64], id: usize) -> [f64; 4] {
    [x[4 * id], x[4 * id + 1], x[4 * id + 2], x[4 * id + 3]]
}

pub(crate) fn t_at(x: &[f64], id: usize) -> [f64; 3] {
    [x[3 * id], x[3 * id + 1], x[3 * id + 2]]
}

pub(crate) fn add_t(g: &mut [f64], id: usize, v: [f64; 3], w: f64) {
    g[3 * id] += w * v[0];
    g[3 * id + 1] += w * v[1];
    g[3 * id + 2] += w * v[2];
}

pub(crate) fn add_q(g: &mut [f64], id: usize, v: [f64; 4], w: f64) {
    for c in 0..4 {
        g[4 * id + c] += w * v[c];
    }
}

const EPS: f64 = 1e-12;

/// Rigidity loss over the pyramid for one frame interval: per directed
/// edge, `lambda_l` penalizes change of the pair distance and `lambda_c`
/// change of the point expressed in the neighbor's local frame.
pub(crate) fn arap_flat(
    xq: &[f64],
    xt: &[f64],
    t_count: usize,
    levels: &[PyramidLevel],
    delta: usize,
    lambda_l: f64,
    lambda_c: f64,
    inv_mats: Option<&[[[f64; 3]; 3]]>,
    mut grad: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    assert!(delta >= 1);
    let mut value = 0.0;
    for level in levels {
        for (i, &m) in level.subset.iter().enumerate() {
            for &n in &level.neighbors[i] {
                for t in 0..t_count.saturating_sub(delta) {
                    let tp = t + delta;
                    let (im_t, in_t) = (m * t_count + t, n * t_count + t);
                    let (im_p, in_p) = (m * t_count + tp, n * t_count + tp);
                    let a = kernel::sub3(t_at(xt, im_t), t_at(xt, in_t));
                    let b = kernel::sub3(t_at(xt, im_p), t_at(xt, in_p));
                    if lambda_l != 0.0 {
                        let (na, nb) = (kernel::norm3(a), kernel::norm3(b));
                        value += lambda_l * (na - nb).abs();
                        if let Some((_, gt)) = grad.as_mut() {
                            let s = if na > nb { 1.0 } else if na < nb { -1.0 } else { 0.0 };
                            if s != 0.0 {
                                if na > EPS {
                                    let d = [a[0] / na, a[1] / na, a[2] / na];
                                    add_t(gt, im_t, d, lambda_l * s);
                                    add_t(gt, in_t, d, -lambda_l * s);
                                }
                                if nb > EPS {
                                    let d = [b[0] / nb, b[1] / nb, b[2] / nb];
                                    add_t(gt, im_p, d, -lambda_l * s);
                                    add_t(gt, in_p, d, lambda_l * s);
                                }
                            }
                        }
                    }
                    if lambda_c != 0.0 {
                        let (qn_t, qn_p) = (q_at(xq, in_t), q_at(xq, in_p));
                        let c0 = kernel::rotate_inv(qn_t, a);
                        let c1 = kernel::rotate_inv(qn_p, b);
                        let e = kernel::sub3(c0, c1);
                        let ne = kernel::norm3(e);
                        value += lambda_c * ne;
                        if ne > EPS {
                            if let Some((gq, gt)) = grad.as_mut() {
                                let eh = [e[0] / ne, e[1] / ne, e[2] / ne];
                                let (_, j0) = rotate_inv_jac(qn_t, a);
                                let (_, j1) = rotate_inv_jac(qn_p, b);
                                let mut gq0 = [0.0; 4];
                                let mut gq1 = [0.0; 4];
                                for row in 0..3 {
                                    for col in 0..4 {
                                        gq0[col] += eh[row] * j0[row][col];
                                        gq1[col] += eh[row] * j1[row][col];
                                    }
                                }
                                add_q(gq, in_t, gq0, lambda_c);
                                add_q(gq, in_p, gq1, -lambda_c);
                                let mats = inv_mats.expect("inverse rotations cached");
                                let (m0, m1) = (&mats[in_t], &mats[in_p]);
                                let mut d0 = [0.0; 3];
                                let mut d1 = [0.0; 3];
                                for c in 0..3 {
                                    for r in 0..3 {
                                        d0[c] += m0[r][c] * eh[r];
                                        d1[c] += m1[r][c] * eh[r];
                                    }
                                }
                                add_t(gt, im_t, d0, lambda_c);
                                add_t(gt, in_t, d0, -lambda_c);
                                add_t(gt, im_p, d1, -lambda_c);
                                add_t(gt, in_p, d1, lambda_c);
                            }
                        }
                    }
                }
            }
        }
    }
    value
}

/// Velocity and acceleration smoothness over every node trajectory;
/// rotation rates are measured by the Frobenius norm of the relative
/// rotation log.
pub(crate) fn smooth_flat(
    xq: &[f64],
    xt: &[f64],
    m_count: usize,
    t_count: usize,
    w_vel: f64,
    w_acc: f64,
    mut grad: Option<(&mut [f64], &mut [f64])>,
) -> (f64, f64) {
    let mut vel = 0.0;
    let mut acc = 0.0;
    for m in 0..m_count {
        for t in 0..t_count.saturating_sub(1) {
            let (i0, i1) = (m * t_count + t, m * t_count + t + 1);
            let d = kernel::sub3(t_at(xt, i0), t_at(xt, i1));
            let nd = kernel::norm3(d);
            vel += nd;
            let rot = SQRT_2 * kernel::relative_angle(q_at(xq, i0), q_at(xq, i1));
            vel += rot;
            if let Some((gq, gt)) = grad.as_mut() {
                if nd > EPS {
                    let dh = [d[0] / nd, d[1] / nd, d[2] / nd];
                    add_t(gt, i0, dh, w_vel);
                    add_t(gt, i1, dh, -w_vel);
                }
                if rot > EPS {
                    let (_, da, db) = relative_angle_jac(q_at(xq, i0), q_at(xq, i1));
                    add_q(gq, i0, da, w_vel * SQRT_2);
                    add_q(gq, i1, db, w_vel * SQRT_2);
                }
            }
        }
        for t in 0..t_count.saturating_sub(2) {
            let ids = [m * t_count + t, m * t_count + t + 1, m * t_count + t + 2];
            let (p0, p1, p2) = (t_at(xt, ids[0]), t_at(xt, ids[1]), t_at(xt, ids[2]));
            let dd = [
                p0[0] - 2.0 * p1[0] + p2[0],
                p0[1] - 2.0 * p1[1] + p2[1],
                p0[2] - 2.0 * p1[2] + p2[2],
            ];
            let ndd = kernel::norm3(dd);
            acc += ndd;
            let r01 = kernel::relative_angle(q_at(xq, ids[0]), q_at(xq, ids[1]));
            let r12 = kernel::relative_angle(q_at(xq, ids[1]), q_at(xq, ids[2]));
            acc += SQRT_2 * (r01 - r12).abs();
            if let Some((gq, gt)) = grad.as_mut() {
                if ndd > EPS {
                    let dh = [dd[0] / ndd, dd[1] / ndd, dd[2] / ndd];
                    add_t(gt, ids[0], dh, w_acc);
                    add_t(gt, ids[1], dh, -2.0 * w_acc);
                    add_t(gt, ids[2], dh, w_acc);
                }
                let s = if r01 > r12 { 1.0 } else if r01 < r12 { -1.0 } else { 0.0 };
                if s != 0.0 {
                    let (_, da01, db01) = relative_angle_jac(q_at(xq, ids[0]), q_at(xq, ids[1]));
                    let (_, da12, db12) = relative_angle_jac(q_at(xq, ids[1]), q_at(xq, ids[2]));
                    add_q(gq, ids[0], da01, w_acc * SQRT_2 * s);
                    add_q(gq, ids[1], db01, w_acc * SQRT_2 * s);
                    add_q(gq, ids[1], da12, -w_acc * SQRT_2 * s);
                    add_q(gq, ids[2], db12, -w_acc * SQRT_2 * s);
                }
            }
        }
    }
    (vel, acc)
}

pub(crate) fn flatten_nodes(scaffold: &MotionScaffold) -> (Vec<f64>, Vec<f64>) {
    let t_count = scaffold.frame_count();
    let mut xq = Vec::with_capacity(4 * scaffold.node_count() * t_count);
    let mut xt = Vec::with_capacity(3 * scaffold.node_count() * t_count);
    for node in &scaffold.nodes {
        for tf in &node.transforms {
            let q = tf.rotation.quaternion();
            xq.extend_from_slice(&[q.w, q.i, q.j, q.k]);
            xt.extend_from_slice(&[tf.translation.x, tf.translation.y, tf.translation.z]);
        }
    }
    (xq, xt)
}

pub(crate) fn inverse_rotations(xq: &[f64]) -> Vec<[[f64; 3]; 3]> {
    (0..xq.len() / 4).map(|id| rotate_inv_matrix(q_at(xq, id))).collect()
}

fn gradients_from_flat(gq: &[f64], gt: &[f64]) -> GeoGradients {
    GeoGradients {
        rotation: (0..gq.len() / 4).map(|i| q_at(gq, i)).collect(),
        translation: (0..gt.len() / 3).map(|i| t_at(gt, i)).collect(),
    }
}

/// Rigidity loss of the scaffold for one frame interval.
pub fn loss_arap(
    scaffold: &MotionScaffold,
    delta: usize,
    lambda_l: f64,
    lambda_c: f64,
) -> (f64, GeoGradients) {
    let (xq, xt) = flatten_nodes(scaffold);
    let mats = inverse_rotations(&xq);
    let mut gq = vec![0.0; xq.len()];
    let mut gt = vec![0.0; xt.len()];
    let value = arap_flat(
        &xq,
        &xt,
        scaffold.frame_count(),
        &scaffold.pyramid,
        delta,
        lambda_l,
        lambda_c,
        Some(&mats),
        Some((&mut gq, &mut gt)),
    );
    (value, gradients_from_flat(&gq, &gt))
}

#[derive(Clone, Copy, Debug)]
pub struct SmoothLoss {
    pub vel: f64,
    pub acc: f64,
}

/// Velocity and acceleration smoothness of the scaffold; the gradient is
/// of their unweighted sum.
pub fn loss_smooth(scaffold: &MotionScaffold) -> (SmoothLoss, GeoGradients) {
    let (xq, xt) = flatten_nodes(scaffold);
    let mut gq = vec![0.0; xq.len()];
    let mut gt = vec![0.0; xt.len()];
    let (vel, acc) = smooth_flat(
        &xq,
        &xt,
        scaffold.node_count(),
        scaffold.frame_count(),
        1.0,
        1.0,
        Some((&mut gq, &mut gt)),
    );
    (SmoothLoss { vel, acc }, gradients_from_flat(&gq, &gt))
}

#[derive(Clone, Debug)]
pub struct GeoConfig {
    pub lambda_arap: f64,
    pub lambda_l: f64,
    pub lambda_c: f64,
    pub lambda_vel: f64,
    pub lambda_acc: f64,
    /// Frame intervals the rigidity loss is summed over.
    pub deltas: Vec<usize>,
    pub iterations: usize,
    pub learning_rate: f64,
    pub log: Option<PathBuf>,
}

impl Default for GeoConfig {
    fn default() -> Self {
        Self {
            lambda_arap: 1.0,
            lambda_l: 1.0,
            lambda_c: 0.3,
            lambda_vel: 0.1,
            lambda_acc: 0.1,
            deltas: vec![1, 4],
            iterations: 800,
            learning_rate: 0.01,
            log: None,
        }
    }
}

struct GeoObjective {
    levels: Vec<PyramidLevel>,
    m_count: usize,
    t_count: usize,
    cfg: GeoConfig,
    last_arap: f64,
    last_vel: f64,
    last_acc: f64,
}

impl GeoObjective {
    fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        x.split_at(4 * self.m_count * self.t_count)
    }
}

impl Objective for GeoObjective {
    fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (xq, xt) = self.split(x);
        let nq = xq.len();
        let mut parts = grad.map(|g| g.split_at_mut(nq));
        let wants = parts.is_some();
        let mats = if wants && self.cfg.lambda_c != 0.0 {
            Some(inverse_rotations(xq))
        } else {
            None
        };
        let mut arap = 0.0;
        for &delta in &self.cfg.deltas {
            // The outer weight scales gradients directly, so each term
            // accumulates with lambda_arap folded in.
            let la = self.cfg.lambda_arap * self.cfg.lambda_l;
            let lc = self.cfg.lambda_arap * self.cfg.lambda_c;
            arap += arap_flat(
                xq,
                xt,
                self.t_count,
                &self.levels,
                delta,
                la,
                lc,
                mats.as_deref(),
                parts.as_mut().map(|(gq, gt)| (&mut **gq, &mut **gt)),
            );
        }
        let (vel, acc) = smooth_flat(
            xq,
            xt,
            self.m_count,
            self.t_count,
            self.cfg.lambda_vel,
            self.cfg.lambda_acc,
            parts.as_mut().map(|(gq, gt)| (&mut **gq, &mut **gt)),
        );
        self.last_arap = arap;
        self.last_vel = vel;
        self.last_acc = acc;
        arap + self.cfg.lambda_vel * vel + self.cfg.lambda_acc * acc
    }

    fn loss_terms(&self) -> Vec<(String, f64)> {
        vec![
            ("arap".into(), self.last_arap),
            ("vel".into(), self.last_vel),
            ("acc".into(), self.last_acc),
        ]
    }
}

/// Optimizes node rotations and occluded node translations in place.
/// Visible translations (per the node visibility matrix) are frozen and
/// come back bit-identical; the final objective never exceeds the initial
/// one.
pub fn geometric_optimize(
    scaffold: &mut MotionScaffold,
    visibility: &[Vec<bool>],
    cfg: &GeoConfig,
) -> Result<MinimizeResult, OptimError> {
    let (m_count, t_count) = (scaffold.node_count(), scaffold.frame_count());
    assert_eq!(visibility.len(), m_count, "one visibility row per node");
    let (xq, xt) = flatten_nodes(scaffold);
    let quats = ParamBlock::unit_quaternions(xq);
    let mut trans = ParamBlock::euclidean(xt);
    for m in 0..m_count {
        assert_eq!(visibility[m].len(), t_count);
        for t in 0..t_count {
            if visibility[m][t] {
                let id = m * t_count + t;
                trans.freeze_range(3 * id..3 * id + 3);
            }
        }
    }
    let mut params = Params::new(vec![quats, trans]);
    let mut objective = GeoObjective {
        levels: scaffold.pyramid.clone(),
        m_count,
        t_count,
        cfg: cfg.clone(),
        last_arap: 0.0,
        last_vel: 0.0,
        last_acc: 0.0,
    };
    let mut schedule = Schedule::new(cfg.iterations, cfg.learning_rate);
    schedule.log = cfg.log.clone();
    let result = minimize(&mut objective, &mut params, &schedule)?;

    let xq = &params.blocks[0].values;
    let xt = &params.blocks[1].values;
    for m in 0..m_count {
        for t in 0..t_count {
            let id = m * t_count + t;
            let q = q_at(xq, id);
            let tr = t_at(xt, id);
            let node = &mut scaffold.nodes[m].transforms[t];
            node.rotation =
                UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
            node.translation = Vector3::new(tr[0], tr[1], tr[2]);
        }
    }
    Ok(result)
}
