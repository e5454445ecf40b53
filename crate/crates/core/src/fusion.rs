//! Time-fused dynamic Gaussian scene. Gaussians spawn from depth at their
//! reference frame, ride the scaffold deformation field to any query time,
//! and are refined jointly with the scaffold against the 2D tracklets.

use crate::camera::{CameraError, CameraModel, Z_EPS};
use crate::jac::{dq_apply_jac, dq_delta_jac};
use crate::lift::{
    add_q, add_t, arap_flat, flatten_nodes, inverse_rotations, q_at, smooth_flat, t_at, GeoConfig,
};
use crate::optim::{
    minimize, MinimizeResult, Objective, OptimError, ParamBlock, Params, Schedule,
};
use crate::priors::{DepthStack, RgbFrame, Tracklet2D};
use crate::scaffold::{
    resample_trajectories, MotionScaffold, ScaffoldError, ScaffoldNode, SkinningWeights,
    WEIGHT_FLOOR,
};
use crate::se3::{kernel, DegenerateBlend, RigidTransform};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Blend(#[from] DegenerateBlend),
    #[error(transparent)]
    Scaffold(#[from] ScaffoldError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("scene file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const INIT_OPACITY: f64 = 0.7;
pub const DEFAULT_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

/// A Gaussian bound to the deformation field: geometry lives at `t_ref`
/// and is carried to other times by blending its support nodes. The
/// support set is fixed at spawn; `delta_w` are additive per-node weight
/// corrections applied before the non-negativity clamp.
#[derive(Clone, Debug)]
pub struct DynGaussian {
    pub center: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scales: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub t_ref: usize,
    pub anchor: usize,
    pub support: Vec<usize>,
    pub delta_w: Vec<f64>,
    /// Source tracklet driving this Gaussian's reprojection residual.
    pub track: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct DynGaussianSet {
    pub gaussians: Vec<DynGaussian>,
}

#[derive(Clone, Debug)]
pub struct StaticGaussian {
    pub center: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scales: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, Default)]
pub struct StaticGaussianSet {
    pub gaussians: Vec<StaticGaussian>,
}

/// A Gaussian carried to one query time.
#[derive(Clone, Debug)]
pub struct PosedGaussian {
    pub center: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scales: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

#[allow(clippy::too_many_arguments)]
fn spawn_at(
    p: Vector2<f64>,
    t: usize,
    depths: &DepthStack,
    cam: &CameraModel,
    scaffold: &MotionScaffold,
    stride: usize,
    rgb: Option<&[RgbFrame]>,
    track: Option<usize>,
) -> Result<Option<DynGaussian>, FusionError> {
    let d = depths.corrected_at(t, &p);
    if !d.is_finite() {
        return Ok(None);
    }
    let center = cam.backproject(&p, d, t)?;
    let sigma = stride as f64 * d / cam.fx;
    let (px, py) = depths.pixel_index(&p);
    let color = match rgb {
        Some(frames) => {
            let c = frames[t].pixels[py * frames[t].width + px];
            [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
        }
        None => DEFAULT_COLOR,
    };
    let w = scaffold.skinning_weights(&center, t);
    Ok(Some(DynGaussian {
        center,
        rotation: UnitQuaternion::identity(),
        scales: Vector3::repeat(sigma),
        opacity: INIT_OPACITY,
        color,
        t_ref: t,
        anchor: w.anchor_node,
        support: w.neighbor_ids,
        delta_w: vec![0.0; w.weights.len()],
        track,
    }))
}

/// Spawn foreground Gaussians: one per masked pixel on the global
/// `stride`-aligned grid of every frame, plus one per dynamic tracklet at
/// its first visible frame (carrying the track association). Centers are
/// exact backprojections of the corrected depth; pixels without finite
/// depth are skipped.
#[allow(clippy::too_many_arguments)]
pub fn init_gaussians(
    depths: &DepthStack,
    cam: &CameraModel,
    fg_masks: &[Vec<bool>],
    stride: usize,
    scaffold: &MotionScaffold,
    tracks: &[Tracklet2D],
    dynamic_ids: &[usize],
    rgb: Option<&[RgbFrame]>,
) -> Result<DynGaussianSet, FusionError> {
    assert!(stride >= 1, "stride must be at least 1");
    let (w, h) = (depths.width, depths.height);
    let mut gaussians = Vec::new();
    for (t, mask) in fg_masks.iter().enumerate() {
        assert_eq!(mask.len(), w * h, "mask size mismatch at frame {t}");
        for y in (0..h).step_by(stride) {
            for x in (0..w).step_by(stride) {
                if !mask[y * w + x] {
                    continue;
                }
                let p = Vector2::new(x as f64, y as f64);
                if let Some(g) = spawn_at(p, t, depths, cam, scaffold, stride, rgb, None)? {
                    gaussians.push(g);
                }
            }
        }
    }
    for &i in dynamic_ids {
        let track = &tracks[i];
        let Some(t0) = track.first_visible() else { continue };
        let p = track.points[t0];
        if let Some(g) = spawn_at(p, t0, depths, cam, scaffold, stride, rgb, Some(i))? {
            gaussians.push(g);
        }
    }
    Ok(DynGaussianSet { gaussians })
}

/// Background counterpart: one static Gaussian per unmasked pixel of frame
/// `t` on the stride grid. Static Gaussians never warp.
pub fn init_static_gaussians(
    depths: &DepthStack,
    cam: &CameraModel,
    fg_masks: &[Vec<bool>],
    stride: usize,
    t: usize,
    rgb: Option<&[RgbFrame]>,
) -> Result<StaticGaussianSet, FusionError> {
    assert!(stride >= 1, "stride must be at least 1");
    let (w, h) = (depths.width, depths.height);
    let mut gaussians = Vec::new();
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            if fg_masks[t][y * w + x] {
                continue;
            }
            let p = Vector2::new(x as f64, y as f64);
            let d = depths.corrected_at(t, &p);
            if !d.is_finite() {
                continue;
            }
            let center = cam.backproject(&p, d, t)?;
            let sigma = stride as f64 * d / cam.fx;
            let color = match rgb {
                Some(frames) => {
                    let c = frames[t].pixels[y * frames[t].width + x];
                    [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
                }
                None => DEFAULT_COLOR,
            };
            gaussians.push(StaticGaussian {
                center,
                rotation: UnitQuaternion::identity(),
                scales: Vector3::repeat(sigma),
                opacity: INIT_OPACITY,
                color,
            });
        }
    }
    Ok(StaticGaussianSet { gaussians })
}

/// Support weights of one Gaussian at its reference frame: RBF base
/// weights re-evaluated at the current center plus `delta_w`, clamped to
/// be non-negative. The support set itself stays as spawned.
pub fn effective_weights(g: &DynGaussian, scaffold: &MotionScaffold) -> SkinningWeights {
    let weights = g
        .support
        .iter()
        .zip(&g.delta_w)
        .map(|(&n, &dw)| (scaffold.skinning_weight(&g.center, n, g.t_ref) + dw).max(0.0))
        .collect();
    SkinningWeights {
        anchor_node: g.anchor,
        neighbor_ids: g.support.clone(),
        weights,
    }
}

/// Carry one Gaussian from its reference frame to `t`.
pub fn fuse_one(
    g: &DynGaussian,
    scaffold: &MotionScaffold,
    t: usize,
) -> Result<PosedGaussian, DegenerateBlend> {
    let w = effective_weights(g, scaffold);
    let motion = scaffold.warp(&w, g.t_ref, t)?;
    Ok(PosedGaussian {
        center: motion.apply(&g.center),
        rotation: motion.rotation * g.rotation,
        scales: g.scales,
        opacity: g.opacity,
        color: g.color,
    })
}

/// The whole dynamic set at query time `t`; output order and length match
/// the set regardless of `t`.
pub fn fuse_at(
    set: &DynGaussianSet,
    scaffold: &MotionScaffold,
    t: usize,
) -> Result<Vec<PosedGaussian>, FusionError> {
    set.gaussians
        .iter()
        .map(|g| fuse_one(g, scaffold, t).map_err(FusionError::from))
        .collect()
}

const EPS: f64 = 1e-12;

/// Everything the reprojection loss needs besides the flat parameter
/// vectors: per-Gaussian support layout, track association, and the fixed
/// camera.
struct TrackProblem {
    t_count: usize,
    radii: Vec<f64>,
    supports: Vec<Vec<usize>>,
    t_refs: Vec<usize>,
    assoc: Vec<Option<usize>>,
    dw_offsets: Vec<usize>,
    tracks: Vec<Tracklet2D>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    poses: Vec<RigidTransform>,
    views: Vec<RigidTransform>,
}

struct TrackGradSlices<'a> {
    gq: &'a mut [f64],
    gt: &'a mut [f64],
    gdw: &'a mut [f64],
    gmu: &'a mut [f64],
}

impl TrackProblem {
    fn new(
        set: &DynGaussianSet,
        scaffold: &MotionScaffold,
        tracks: &[Tracklet2D],
        cam: &CameraModel,
    ) -> Self {
        let t_count = scaffold.frame_count();
        let mut dw_offsets = Vec::with_capacity(set.gaussians.len());
        let mut off = 0;
        for g in &set.gaussians {
            dw_offsets.push(off);
            off += g.delta_w.len();
        }
        Self {
            t_count,
            radii: scaffold.nodes.iter().map(|n| n.radius).collect(),
            supports: set.gaussians.iter().map(|g| g.support.clone()).collect(),
            t_refs: set.gaussians.iter().map(|g| g.t_ref).collect(),
            assoc: set.gaussians.iter().map(|g| g.track).collect(),
            dw_offsets,
            tracks: tracks.to_vec(),
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            poses: cam.poses.clone(),
            views: cam.poses.iter().map(|p| p.inverse()).collect(),
        }
    }

    fn dw_len(&self) -> usize {
        self.dw_offsets.last().map_or(0, |&o| o)
            + self.supports.last().map_or(0, |s| s.len())
    }

    /// Sum over associated Gaussians and visible frames of the pixel
    /// distance between the projected fused center and the tracklet.
    /// Returns the unweighted value; gradients accumulate scaled by
    /// `weight`. Frames whose fused center lands behind the camera are
    /// skipped.
    fn eval(
        &self,
        xq: &[f64],
        xt: &[f64],
        dw: &[f64],
        mu: &[f64],
        weight: f64,
        mut grads: Option<TrackGradSlices>,
    ) -> Result<f64, DegenerateBlend> {
        let mut value = 0.0;
        let wants = grads.is_some();
        let mut delta_cache: HashMap<(usize, usize, usize), [f64; 8]> = HashMap::new();
        let mut jac_cache: HashMap<(usize, usize, usize), ([f64; 8], [[f64; 14]; 8])> =
            HashMap::new();
        for (j, assoc) in self.assoc.iter().enumerate() {
            let Some(track_id) = assoc else { continue };
            let track = &self.tracks[*track_id];
            let t_ref = self.t_refs[j];
            let sup = &self.supports[j];
            let off = self.dw_offsets[j];
            let mu_j = [mu[3 * j], mu[3 * j + 1], mu[3 * j + 2]];
            // Base RBF weights at the current center and node positions.
            let mut base = Vec::with_capacity(sup.len());
            for &n in sup {
                let tau = t_at(xt, n * self.t_count + t_ref);
                let d = kernel::sub3(mu_j, tau);
                let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                base.push((-d2 / (2.0 * self.radii[n])).exp());
            }
            let eff: Vec<f64> = base
                .iter()
                .zip(&dw[off..off + sup.len()])
                .map(|(b, d)| b + d)
                .collect();
            let wt: Vec<f64> = eff.iter().map(|e| e.max(WEIGHT_FLOOR)).collect();
            for t in 0..track.len() {
                if !track.visible(t) {
                    continue;
                }
                // Blend the per-node motions in dual quaternion form, signs
                // fixed against the first support node.
                let mut deltas = Vec::with_capacity(sup.len());
                for &n in sup {
                    let key = (n, t_ref, t);
                    let d = if wants {
                        let entry = jac_cache.entry(key).or_insert_with(|| {
                            dq_delta_jac(
                                q_at(xq, n * self.t_count + t_ref),
                                t_at(xt, n * self.t_count + t_ref),
                                q_at(xq, n * self.t_count + t),
                                t_at(xt, n * self.t_count + t),
                            )
                        });
                        entry.0
                    } else {
                        *delta_cache.entry(key).or_insert_with(|| {
                            kernel::dq_delta(
                                q_at(xq, n * self.t_count + t_ref),
                                t_at(xt, n * self.t_count + t_ref),
                                q_at(xq, n * self.t_count + t),
                                t_at(xt, n * self.t_count + t),
                            )
                        })
                    };
                    deltas.push(d);
                }
                let mut signs = Vec::with_capacity(sup.len());
                let mut b = [0.0; 8];
                for (i, d) in deltas.iter().enumerate() {
                    let dot = d[0] * deltas[0][0]
                        + d[1] * deltas[0][1]
                        + d[2] * deltas[0][2]
                        + d[3] * deltas[0][3];
                    let s = if dot < 0.0 { -1.0 } else { 1.0 };
                    signs.push(s);
                    for lane in 0..8 {
                        b[lane] += wt[i] * s * d[lane];
                    }
                }
                let real_n2 = kernel::norm_sq4([b[0], b[1], b[2], b[3]]);
                if real_n2.sqrt() < 1e-12 {
                    return Err(DegenerateBlend { real_norm: real_n2.sqrt() });
                }
                let m = kernel::dq_apply(b, mu_j);
                let mv = Vector3::new(m[0], m[1], m[2]);
                let c = self.views[t].apply(&mv);
                if c.z <= Z_EPS {
                    continue;
                }
                let u = self.fx * c.x / c.z + self.cx;
                let v = self.fy * c.y / c.z + self.cy;
                let e = [u - track.points[t].x, v - track.points[t].y];
                let r = (e[0] * e[0] + e[1] * e[1]).sqrt();
                value += r;
                if r <= EPS || !wants {
                    continue;
                }
                let g = grads.as_mut().unwrap();
                let ge = [e[0] / r, e[1] / r];
                let gc = Vector3::new(
                    self.fx / c.z * ge[0],
                    self.fy / c.z * ge[1],
                    -(self.fx * c.x * ge[0] + self.fy * c.y * ge[1]) / (c.z * c.z),
                );
                let gm = self.poses[t].rotation * gc;
                let (_, jb, jx) = dq_apply_jac(b, mu_j);
                let mut gb = [0.0; 8];
                for row in 0..3 {
                    for lane in 0..8 {
                        gb[lane] += gm[row] * jb[row][lane];
                    }
                }
                for row in 0..3 {
                    for col in 0..3 {
                        g.gmu[3 * j + col] += weight * gm[row] * jx[row][col];
                    }
                }
                for (i, &n) in sup.iter().enumerate() {
                    let delta = &deltas[i];
                    let gw: f64 = (0..8).map(|l| delta[l] * gb[l]).sum::<f64>() * signs[i];
                    if eff[i] > WEIGHT_FLOOR {
                        g.gdw[off + i] += weight * gw;
                        // Weight also depends on the center and on the node
                        // position at the reference frame.
                        let tau = t_at(xt, n * self.t_count + t_ref);
                        let d = kernel::sub3(mu_j, tau);
                        let scale = gw * base[i] / self.radii[n];
                        for col in 0..3 {
                            g.gmu[3 * j + col] -= weight * scale * d[col];
                        }
                        add_t(
                            g.gt,
                            n * self.t_count + t_ref,
                            d,
                            weight * scale,
                        );
                    }
                    let coeff = wt[i] * signs[i];
                    let jac = &jac_cache[&(n, t_ref, t)].1;
                    let mut g14 = [0.0; 14];
                    for lane in 0..8 {
                        let gl = coeff * gb[lane];
                        if gl == 0.0 {
                            continue;
                        }
                        for p in 0..14 {
                            g14[p] += gl * jac[lane][p];
                        }
                    }
                    add_q(
                        g.gq,
                        n * self.t_count + t_ref,
                        [g14[0], g14[1], g14[2], g14[3]],
                        weight,
                    );
                    add_t(g.gt, n * self.t_count + t_ref, [g14[4], g14[5], g14[6]], weight);
                    add_q(
                        g.gq,
                        n * self.t_count + t,
                        [g14[7], g14[8], g14[9], g14[10]],
                        weight,
                    );
                    add_t(g.gt, n * self.t_count + t, [g14[11], g14[12], g14[13]], weight);
                }
            }
        }
        Ok(value)
    }
}

/// Gradients of the reprojection loss, grouped like the inputs: node
/// transforms in node-major frame order, then per-Gaussian weight
/// corrections and centers.
#[derive(Clone, Debug)]
pub struct TrackGradients {
    pub node_rotation: Vec<[f64; 4]>,
    pub node_translation: Vec<[f64; 3]>,
    pub delta_w: Vec<Vec<f64>>,
    pub center: Vec<[f64; 3]>,
}

/// Reprojection loss of the associated Gaussians over their visible
/// frames, with gradients for every quantity the photometric stage
/// optimizes.
pub fn loss_track(
    set: &DynGaussianSet,
    scaffold: &MotionScaffold,
    tracks: &[Tracklet2D],
    cam: &CameraModel,
) -> Result<(f64, TrackGradients), FusionError> {
    let problem = TrackProblem::new(set, scaffold, tracks, cam);
    let (xq, xt) = flatten_nodes(scaffold);
    let (dw, mu) = flatten_gaussians(set);
    let mut gq = vec![0.0; xq.len()];
    let mut gt = vec![0.0; xt.len()];
    let mut gdw = vec![0.0; dw.len()];
    let mut gmu = vec![0.0; mu.len()];
    let value = problem.eval(
        &xq,
        &xt,
        &dw,
        &mu,
        1.0,
        Some(TrackGradSlices {
            gq: &mut gq,
            gt: &mut gt,
            gdw: &mut gdw,
            gmu: &mut gmu,
        }),
    )?;
    let grads = TrackGradients {
        node_rotation: (0..gq.len() / 4).map(|i| q_at(&gq, i)).collect(),
        node_translation: (0..gt.len() / 3).map(|i| t_at(&gt, i)).collect(),
        delta_w: set
            .gaussians
            .iter()
            .enumerate()
            .map(|(j, g)| {
                let o = problem.dw_offsets[j];
                gdw[o..o + g.delta_w.len()].to_vec()
            })
            .collect(),
        center: (0..gmu.len() / 3).map(|i| t_at(&gmu, i)).collect(),
    };
    Ok((value, grads))
}

/// Mean visible-frame reprojection residual per Gaussian; `None` for
/// Gaussians without a track association or without any usable frame.
pub fn track_residuals(
    set: &DynGaussianSet,
    scaffold: &MotionScaffold,
    tracks: &[Tracklet2D],
    cam: &CameraModel,
) -> Result<Vec<Option<f64>>, FusionError> {
    let mut out = Vec::with_capacity(set.gaussians.len());
    for g in &set.gaussians {
        let Some(track_id) = g.track else {
            out.push(None);
            continue;
        };
        let track = &tracks[track_id];
        let w = effective_weights(g, scaffold);
        let mut sum = 0.0;
        let mut count = 0;
        for t in 0..track.len() {
            if !track.visible(t) {
                continue;
            }
            let motion = scaffold.warp(&w, g.t_ref, t)?;
            match cam.project(&motion.apply(&g.center), t) {
                Ok(p) => {
                    sum += (p - track.points[t]).norm();
                    count += 1;
                }
                Err(CameraError::BehindCamera { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        out.push(if count > 0 { Some(sum / count as f64) } else { None });
    }
    Ok(out)
}

fn flatten_gaussians(set: &DynGaussianSet) -> (Vec<f64>, Vec<f64>) {
    let mut dw = Vec::new();
    let mut mu = Vec::with_capacity(3 * set.gaussians.len());
    for g in &set.gaussians {
        dw.extend_from_slice(&g.delta_w);
        mu.extend_from_slice(&[g.center.x, g.center.y, g.center.z]);
    }
    (dw, mu)
}

fn median_radius(scaffold: &MotionScaffold) -> f64 {
    let mut radii: Vec<f64> = scaffold.nodes.iter().map(|n| n.radius).collect();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    radii[radii.len() / 2]
}

/// Grow the scaffold where tracked Gaussians reproject badly: the fused
/// center trajectories of Gaussians whose mean residual exceeds
/// `threshold` are resampled at `spacing` (also against existing node
/// curves) and inserted as new nodes with identity rotations. The node
/// count never exceeds `cap`; affected Gaussians are re-anchored with
/// their weight corrections reset. Returns the number of nodes added.
pub fn densify_nodes(
    set: &mut DynGaussianSet,
    scaffold: &mut MotionScaffold,
    residuals: &[Option<f64>],
    threshold: f64,
    spacing: f64,
    cap: usize,
) -> Result<usize, FusionError> {
    assert_eq!(residuals.len(), set.gaussians.len());
    let t_count = scaffold.frame_count();
    let flagged: Vec<usize> = residuals
        .iter()
        .enumerate()
        .filter_map(|(j, r)| match r {
            Some(r) if *r > threshold => Some(j),
            _ => None,
        })
        .collect();
    if flagged.is_empty() || scaffold.node_count() >= cap {
        return Ok(0);
    }
    let mut candidates = Vec::with_capacity(flagged.len());
    for &j in &flagged {
        let g = &set.gaussians[j];
        let mut traj = Vec::with_capacity(t_count);
        for t in 0..t_count {
            traj.push(fuse_one(g, scaffold, t)?.center);
        }
        candidates.push(traj);
    }
    // Keep only trajectories clear of the existing node curves, then
    // thin the survivors against each other.
    let clear: Vec<usize> = (0..candidates.len())
        .filter(|&i| {
            scaffold.nodes.iter().all(|n| {
                let d = n
                    .transforms
                    .iter()
                    .zip(&candidates[i])
                    .map(|(tf, p)| (tf.translation - p).norm())
                    .fold(0.0, f64::max);
                d >= spacing
            })
        })
        .collect();
    let cleared: Vec<Vec<Vector3<f64>>> =
        clear.iter().map(|&i| candidates[i].clone()).collect();
    let kept = resample_trajectories(&cleared, spacing);
    let room = cap - scaffold.node_count();
    let radius = median_radius(scaffold);
    let new_nodes: Vec<ScaffoldNode> = kept
        .iter()
        .take(room)
        .map(|&i| ScaffoldNode {
            transforms: cleared[i]
                .iter()
                .map(|p| RigidTransform::new(UnitQuaternion::identity(), *p))
                .collect(),
            radius,
        })
        .collect();
    let added = new_nodes.len();
    if added == 0 {
        return Ok(0);
    }
    scaffold.insert_nodes(new_nodes)?;
    for &j in &flagged {
        let g = &mut set.gaussians[j];
        let w = scaffold.skinning_weights(&g.center, g.t_ref);
        g.anchor = w.anchor_node;
        g.support = w.neighbor_ids;
        g.delta_w = vec![0.0; g.support.len()];
    }
    Ok(added)
}

/// Drop nodes whose largest clamped skinning weight over all Gaussian
/// supports falls below `threshold`; nodes outside every support count as
/// zero. Gaussian supports are re-indexed (and re-anchored if emptied).
/// Fails without touching anything if fewer than `K + 1` nodes would
/// remain. Returns the removed node ids.
pub fn prune_nodes(
    set: &mut DynGaussianSet,
    scaffold: &mut MotionScaffold,
    threshold: f64,
) -> Result<Vec<usize>, FusionError> {
    let m = scaffold.node_count();
    let mut max_w = vec![0.0f64; m];
    for g in &set.gaussians {
        let w = effective_weights(g, scaffold);
        for (&n, &wv) in w.neighbor_ids.iter().zip(&w.weights) {
            if wv > max_w[n] {
                max_w[n] = wv;
            }
        }
    }
    let removal: Vec<usize> = (0..m).filter(|&n| max_w[n] < threshold).collect();
    if removal.is_empty() {
        return Ok(removal);
    }
    let remaining = m - removal.len();
    if remaining < scaffold.k + 1 {
        return Err(ScaffoldError::InsufficientNodes {
            have: remaining,
            need: scaffold.k + 1,
        }
        .into());
    }
    scaffold.remove_nodes(&removal)?;
    let mut new_id = vec![usize::MAX; m];
    let mut next = 0;
    for (old, id) in new_id.iter_mut().enumerate() {
        if !removal.contains(&old) {
            *id = next;
            next += 1;
        }
    }
    for g in &mut set.gaussians {
        let mut support = Vec::with_capacity(g.support.len());
        let mut delta_w = Vec::with_capacity(g.delta_w.len());
        for (&n, &dw) in g.support.iter().zip(&g.delta_w) {
            if new_id[n] != usize::MAX {
                support.push(new_id[n]);
                delta_w.push(dw);
            }
        }
        if support.is_empty() || new_id[g.anchor] == usize::MAX {
            let w = scaffold.skinning_weights(&g.center, g.t_ref);
            g.anchor = w.anchor_node;
            g.support = w.neighbor_ids;
            g.delta_w = vec![0.0; g.support.len()];
        } else {
            g.anchor = new_id[g.anchor];
            g.support = support;
            g.delta_w = delta_w;
        }
    }
    Ok(removal)
}

#[derive(Clone, Debug)]
pub struct PhotoConfig {
    /// Weight of the reprojection term; zero skips it entirely, reducing
    /// the stage to the geometric objective.
    pub lambda_track: f64,
    /// Rigidity and smoothness weights plus the iteration budget.
    pub geo: GeoConfig,
    /// Densify/prune cadence in iterations.
    pub control_every: usize,
    /// Mean pixel residual above which a Gaussian's trajectory seeds new
    /// nodes.
    pub densify_threshold: f64,
    pub densify_spacing: f64,
    pub node_cap: usize,
    pub prune_threshold: f64,
}

impl Default for PhotoConfig {
    fn default() -> Self {
        Self {
            lambda_track: 1.0,
            geo: GeoConfig::default(),
            control_every: 200,
            densify_threshold: 2.0,
            densify_spacing: 0.25,
            node_cap: 10_000,
            prune_threshold: 1e-4,
        }
    }
}

struct PhotoObjective {
    track: TrackProblem,
    levels: Vec<crate::scaffold::PyramidLevel>,
    m_count: usize,
    t_count: usize,
    n_gauss: usize,
    cfg: PhotoConfig,
    last_track: f64,
    last_arap: f64,
    last_vel: f64,
    last_acc: f64,
}

impl PhotoObjective {
    fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let nq = 4 * self.m_count * self.t_count;
        let nt = 3 * self.m_count * self.t_count;
        let nd = self.track.dw_len();
        let (xq, rest) = x.split_at(nq);
        let (xt, rest) = rest.split_at(nt);
        let (dw, mu) = rest.split_at(nd);
        debug_assert_eq!(mu.len(), 3 * self.n_gauss);
        (xq, xt, dw, mu)
    }
}

impl Objective for PhotoObjective {
    fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (xq, xt, dw, mu) = self.split(x);
        let nq = xq.len();
        let nt = xt.len();
        let nd = dw.len();
        let mut parts = grad.map(|g| {
            let (gq, rest) = g.split_at_mut(nq);
            let (gt, rest) = rest.split_at_mut(nt);
            let (gdw, gmu) = rest.split_at_mut(nd);
            (gq, gt, gdw, gmu)
        });
        let wants = parts.is_some();
        let geo = &self.cfg.geo;
        let mats = if wants && geo.lambda_c != 0.0 {
            Some(inverse_rotations(xq))
        } else {
            None
        };
        let mut arap = 0.0;
        for &delta in &geo.deltas {
            let la = geo.lambda_arap * geo.lambda_l;
            let lc = geo.lambda_arap * geo.lambda_c;
            arap += arap_flat(
                xq,
                xt,
                self.t_count,
                &self.levels,
                delta,
                la,
                lc,
                mats.as_deref(),
                parts.as_mut().map(|(gq, gt, _, _)| (&mut **gq, &mut **gt)),
            );
        }
        let (vel, acc) = smooth_flat(
            xq,
            xt,
            self.m_count,
            self.t_count,
            geo.lambda_vel,
            geo.lambda_acc,
            parts.as_mut().map(|(gq, gt, _, _)| (&mut **gq, &mut **gt)),
        );
        self.last_arap = arap;
        self.last_vel = vel;
        self.last_acc = acc;
        let mut total = arap + geo.lambda_vel * vel + geo.lambda_acc * acc;
        if self.cfg.lambda_track != 0.0 {
            let slices = parts.as_mut().map(|(gq, gt, gdw, gmu)| TrackGradSlices {
                gq,
                gt,
                gdw,
                gmu,
            });
            match self.track.eval(xq, xt, dw, mu, self.cfg.lambda_track, slices) {
                Ok(v) => {
                    self.last_track = v;
                    total += self.cfg.lambda_track * v;
                }
                Err(_) => {
                    // A degenerate blend has no usable value; the optimizer
                    // reports it as a non-finite objective.
                    self.last_track = f64::INFINITY;
                    total = f64::INFINITY;
                }
            }
        } else {
            self.last_track = 0.0;
        }
        total
    }

    fn loss_terms(&self) -> Vec<(String, f64)> {
        vec![
            ("track".into(), self.last_track),
            ("arap".into(), self.last_arap),
            ("vel".into(), self.last_vel),
            ("acc".into(), self.last_acc),
        ]
    }
}

fn run_segment(
    set: &mut DynGaussianSet,
    scaffold: &mut MotionScaffold,
    visibility: &[Vec<bool>],
    tracks: &[Tracklet2D],
    cam: &CameraModel,
    cfg: &PhotoConfig,
    iterations: usize,
    log: bool,
) -> Result<MinimizeResult, FusionError> {
    let (m_count, t_count) = (scaffold.node_count(), scaffold.frame_count());
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
    let (dw, mu) = flatten_gaussians(set);
    let mut params = Params::new(vec![
        quats,
        trans,
        ParamBlock::euclidean(dw),
        ParamBlock::euclidean(mu),
    ]);
    let mut objective = PhotoObjective {
        track: TrackProblem::new(set, scaffold, tracks, cam),
        levels: scaffold.pyramid.clone(),
        m_count,
        t_count,
        n_gauss: set.gaussians.len(),
        cfg: cfg.clone(),
        last_track: 0.0,
        last_arap: 0.0,
        last_vel: 0.0,
        last_acc: 0.0,
    };
    let mut schedule = Schedule::new(iterations, cfg.geo.learning_rate);
    if log {
        schedule.log = cfg.geo.log.clone();
    }
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
    let dw = &params.blocks[2].values;
    let mu = &params.blocks[3].values;
    let mut off = 0;
    for (j, g) in set.gaussians.iter_mut().enumerate() {
        for slot in g.delta_w.iter_mut() {
            *slot = dw[off];
            off += 1;
        }
        g.center = Vector3::new(mu[3 * j], mu[3 * j + 1], mu[3 * j + 2]);
    }
    Ok(result)
}

/// Joint refinement of scaffold transforms, per-Gaussian weight
/// corrections, and centers against the tracklets, regularized by the
/// geometric terms. Node translations at frames where the node was
/// observed stay frozen. Every `control_every` iterations the scaffold is
/// densified from badly-tracked Gaussians and pruned of unused nodes; a
/// prune that would under-populate the topology is skipped with a
/// warning. The convergence log, if any, covers the final segment only.
pub fn photometric_stage(
    set: &mut DynGaussianSet,
    scaffold: &mut MotionScaffold,
    visibility: &[Vec<bool>],
    tracks: &[Tracklet2D],
    cam: &CameraModel,
    cfg: &PhotoConfig,
) -> Result<MinimizeResult, FusionError> {
    assert_eq!(visibility.len(), scaffold.node_count());
    let t_count = scaffold.frame_count();
    let mut vis = visibility.to_vec();
    let total = cfg.geo.iterations;
    let mut remaining = total;
    let mut aggregate: Option<MinimizeResult> = None;
    loop {
        let n = remaining.min(cfg.control_every.max(1));
        let last = n == remaining;
        let result = run_segment(set, scaffold, &vis, tracks, cam, cfg, n, last)?;
        aggregate = Some(match aggregate {
            None => result,
            Some(prev) => MinimizeResult {
                initial_value: prev.initial_value,
                value: result.value,
                iterations: prev.iterations + result.iterations,
            },
        });
        remaining -= n;
        if remaining == 0 {
            break;
        }
        let residuals = track_residuals(set, scaffold, tracks, cam)?;
        let added = densify_nodes(
            set,
            scaffold,
            &residuals,
            cfg.densify_threshold,
            cfg.densify_spacing,
            cfg.node_cap,
        )?;
        for _ in 0..added {
            vis.push(vec![false; t_count]);
        }
        match prune_nodes(set, scaffold, cfg.prune_threshold) {
            Ok(removed) => {
                for &id in removed.iter().rev() {
                    vis.remove(id);
                }
            }
            Err(FusionError::Scaffold(ScaffoldError::InsufficientNodes { have, need })) => {
                eprintln!("prune skipped: would leave {have} nodes, need {need}");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(aggregate.expect("at least one segment runs"))
}

pub struct RenderOutput {
    pub image: RgbFrame,
    pub depth: Vec<f64>,
}

/// Painter-style preview of the scene at frame `t`: isotropic splats,
/// far-to-near alpha compositing, and alpha-weighted expected depth with
/// an infinite sentinel where nothing lands. The optional pose overrides
/// the frame's camera pose.
#[allow(clippy::too_many_arguments)]
pub fn preview_render(
    set: &DynGaussianSet,
    stat: Option<&StaticGaussianSet>,
    scaffold: &MotionScaffold,
    cam: &CameraModel,
    t: usize,
    pose_override: Option<&RigidTransform>,
    width: usize,
    height: usize,
    background: [f64; 3],
) -> Result<RenderOutput, FusionError> {
    let mut posed = fuse_at(set, scaffold, t)?;
    if let Some(s) = stat {
        posed.extend(s.gaussians.iter().map(|g| PosedGaussian {
            center: g.center,
            rotation: g.rotation,
            scales: g.scales,
            opacity: g.opacity,
            color: g.color,
        }));
    }
    let pose = pose_override.cloned().unwrap_or_else(|| cam.poses[t].clone());
    let view = pose.inverse();
    // (z, u, v, sigma_px, index), far to near with stable index ties.
    let mut splats: Vec<(f64, f64, f64, f64, usize)> = Vec::new();
    for (i, g) in posed.iter().enumerate() {
        let c = view.apply(&g.center);
        if c.z <= Z_EPS {
            continue;
        }
        let u = cam.fx * c.x / c.z + cam.cx;
        let v = cam.fy * c.y / c.z + cam.cy;
        let sigma = (g.scales.x + g.scales.y + g.scales.z) / 3.0 * cam.fx / c.z;
        splats.push((c.z, u, v, sigma.max(1e-6), i));
    }
    splats.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.4.cmp(&b.4)));
    let mut color = vec![background; width * height];
    let mut alpha = vec![0.0f64; width * height];
    let mut depth_acc = vec![0.0f64; width * height];
    for &(z, u, v, sigma, i) in &splats {
        let g = &posed[i];
        let extent = (3.0 * sigma).ceil().max(1.0);
        let x0 = ((u - extent).floor().max(0.0)) as usize;
        let x1 = ((u + extent).ceil().min((width - 1) as f64)) as usize;
        let y0 = ((v - extent).floor().max(0.0)) as usize;
        let y1 = ((v + extent).ceil().min((height - 1) as f64)) as usize;
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 - u;
                let dy = py as f64 - v;
                let a = (g.opacity * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp())
                    .min(0.999);
                if a < 1e-4 {
                    continue;
                }
                let idx = py * width + px;
                for ch in 0..3 {
                    color[idx][ch] = a * g.color[ch] + (1.0 - a) * color[idx][ch];
                }
                alpha[idx] = a + (1.0 - a) * alpha[idx];
                depth_acc[idx] = a * z + (1.0 - a) * depth_acc[idx];
            }
        }
    }
    let pixels = color
        .iter()
        .map(|c| {
            [
                (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]
        })
        .collect();
    let depth = alpha
        .iter()
        .zip(&depth_acc)
        .map(|(&a, &d)| if a > 1e-12 { d / a } else { f64::INFINITY })
        .collect();
    Ok(RenderOutput {
        image: RgbFrame { width, height, pixels },
        depth,
    })
}

const M4D_MAGIC: &[u8; 4] = b"M4D1";

/// Scene container: dynamic and static Gaussian records followed by an
/// embedded scaffold block.
pub fn write_m4d(
    path: &Path,
    set: &DynGaussianSet,
    stat: &StaticGaussianSet,
    scaffold: &MotionScaffold,
) -> Result<(), FusionError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(M4D_MAGIC)?;
    w.write_u32::<LittleEndian>(1)?;
    w.write_u32::<LittleEndian>(set.gaussians.len() as u32)?;
    w.write_u32::<LittleEndian>(stat.gaussians.len() as u32)?;
    for g in &set.gaussians {
        for v in [g.center.x, g.center.y, g.center.z] {
            w.write_f64::<LittleEndian>(v)?;
        }
        let q = g.rotation.quaternion();
        for v in [q.w, q.i, q.j, q.k] {
            w.write_f64::<LittleEndian>(v)?;
        }
        for v in [g.scales.x, g.scales.y, g.scales.z] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_f64::<LittleEndian>(g.opacity)?;
        for v in g.color {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u32::<LittleEndian>(g.t_ref as u32)?;
        w.write_i64::<LittleEndian>(g.track.map_or(-1, |t| t as i64))?;
        w.write_u32::<LittleEndian>(g.anchor as u32)?;
        w.write_u32::<LittleEndian>(g.support.len() as u32)?;
        for &n in &g.support {
            w.write_u32::<LittleEndian>(n as u32)?;
        }
        for &d in &g.delta_w {
            w.write_f64::<LittleEndian>(d)?;
        }
    }
    for g in &stat.gaussians {
        for v in [g.center.x, g.center.y, g.center.z] {
            w.write_f64::<LittleEndian>(v)?;
        }
        let q = g.rotation.quaternion();
        for v in [q.w, q.i, q.j, q.k] {
            w.write_f64::<LittleEndian>(v)?;
        }
        for v in [g.scales.x, g.scales.y, g.scales.z] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_f64::<LittleEndian>(g.opacity)?;
        for v in g.color {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    scaffold.write_msca_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_vec3(r: &mut impl Read) -> Result<Vector3<f64>, std::io::Error> {
    Ok(Vector3::new(
        r.read_f64::<LittleEndian>()?,
        r.read_f64::<LittleEndian>()?,
        r.read_f64::<LittleEndian>()?,
    ))
}

fn read_quat(r: &mut impl Read) -> Result<UnitQuaternion<f64>, std::io::Error> {
    let w = r.read_f64::<LittleEndian>()?;
    let x = r.read_f64::<LittleEndian>()?;
    let y = r.read_f64::<LittleEndian>()?;
    let z = r.read_f64::<LittleEndian>()?;
    Ok(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
}

fn check_attrs(scales: &Vector3<f64>, opacity: f64) -> Result<(), FusionError> {
    if !(scales.x > 0.0 && scales.y > 0.0 && scales.z > 0.0) {
        return Err(FusionError::Format(format!("non-positive scale {scales:?}")));
    }
    if !(opacity > 0.0 && opacity < 1.0) {
        return Err(FusionError::Format(format!("opacity {opacity} outside (0, 1)")));
    }
    Ok(())
}

pub fn read_m4d(
    path: &Path,
) -> Result<(DynGaussianSet, StaticGaussianSet, MotionScaffold), FusionError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != M4D_MAGIC {
        return Err(FusionError::Format(format!("bad magic {magic:?}, expected M4D1")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != 1 {
        return Err(FusionError::Format(format!("unsupported version {version}")));
    }
    let n_dyn = r.read_u32::<LittleEndian>()? as usize;
    let n_static = r.read_u32::<LittleEndian>()? as usize;
    let mut gaussians = Vec::with_capacity(n_dyn);
    for _ in 0..n_dyn {
        let center = read_vec3(&mut r)?;
        let rotation = read_quat(&mut r)?;
        let scales = read_vec3(&mut r)?;
        let opacity = r.read_f64::<LittleEndian>()?;
        let color = [
            r.read_f64::<LittleEndian>()?,
            r.read_f64::<LittleEndian>()?,
            r.read_f64::<LittleEndian>()?,
        ];
        check_attrs(&scales, opacity)?;
        let t_ref = r.read_u32::<LittleEndian>()? as usize;
        let track = match r.read_i64::<LittleEndian>()? {
            -1 => None,
            t if t >= 0 => Some(t as usize),
            t => return Err(FusionError::Format(format!("bad track id {t}"))),
        };
        let anchor = r.read_u32::<LittleEndian>()? as usize;
        let k = r.read_u32::<LittleEndian>()? as usize;
        let mut support = Vec::with_capacity(k);
        for _ in 0..k {
            support.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let mut delta_w = Vec::with_capacity(k);
        for _ in 0..k {
            delta_w.push(r.read_f64::<LittleEndian>()?);
        }
        gaussians.push(DynGaussian {
            center,
            rotation,
            scales,
            opacity,
            color,
            t_ref,
            anchor,
            support,
            delta_w,
            track,
        });
    }
    let mut stat = Vec::with_capacity(n_static);
    for _ in 0..n_static {
        let center = read_vec3(&mut r)?;
        let rotation = read_quat(&mut r)?;
        let scales = read_vec3(&mut r)?;
        let opacity = r.read_f64::<LittleEndian>()?;
        let color = [
            r.read_f64::<LittleEndian>()?,
            r.read_f64::<LittleEndian>()?,
            r.read_f64::<LittleEndian>()?,
        ];
        check_attrs(&scales, opacity)?;
        stat.push(StaticGaussian {
            center,
            rotation,
            scales,
            opacity,
            color,
        });
    }
    let scaffold = MotionScaffold::read_msca_from(&mut r)?;
    let m = scaffold.node_count();
    let t_count = scaffold.frame_count();
    for g in &gaussians {
        if g.t_ref >= t_count || g.anchor >= m || g.support.iter().any(|&n| n >= m) {
            return Err(FusionError::Format(
                "gaussian references out-of-range node or frame".into(),
            ));
        }
    }
    Ok((
        DynGaussianSet { gaussians },
        StaticGaussianSet { gaussians: stat },
        scaffold,
    ))
}

/// Point-cloud export of one posed scene as ASCII PLY with colored
/// vertices.
pub fn export_ply(path: &Path, posed: &[PosedGaussian]) -> Result<(), FusionError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", posed.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property uchar red")?;
    writeln!(w, "property uchar green")?;
    writeln!(w, "property uchar blue")?;
    writeln!(w, "end_header")?;
    for g in posed {
        let c = g.color.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
        writeln!(
            w,
            "{} {} {} {} {} {}",
            g.center.x, g.center.y, g.center.z, c[0], c[1], c[2]
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lift::geometric_optimize;
    use crate::optim::check_gradient;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn simple_cam(t_count: usize) -> CameraModel {
        CameraModel::new(
            60.0,
            60.0,
            32.0,
            24.0,
            vec![RigidTransform::identity(); t_count],
        )
    }

    fn build_scaffold(
        nodes: Vec<ScaffoldNode>,
        k: usize,
    ) -> MotionScaffold {
        let mut s = MotionScaffold::new(nodes);
        s.build_topology(k).unwrap();
        s.build_pyramid(1, 0.5, k);
        s.build_anchor_index();
        s
    }

    /// Nodes rigidly carried by a shared per-frame motion from static
    /// offsets; node trajectories are exactly `motion[t] ∘ offset`.
    fn rigid_scaffold(
        offsets: &[Vector3<f64>],
        motion: &[RigidTransform],
        radius: f64,
        k: usize,
    ) -> MotionScaffold {
        let nodes = offsets
            .iter()
            .map(|o| ScaffoldNode {
                transforms: motion
                    .iter()
                    .map(|g| g.compose(&RigidTransform::new(UnitQuaternion::identity(), *o)))
                    .collect(),
                radius,
            })
            .collect();
        build_scaffold(nodes, k)
    }

    fn orbit_motion(t_count: usize) -> Vec<RigidTransform> {
        (0..t_count)
            .map(|t| {
                let angle = 0.08 * t as f64;
                RigidTransform::new(
                    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), angle),
                    Vector3::new(0.02 * t as f64, -0.01 * t as f64, 0.015 * t as f64),
                )
            })
            .collect()
    }

    fn manual_gaussian(
        center: Vector3<f64>,
        t_ref: usize,
        scaffold: &MotionScaffold,
        track: Option<usize>,
    ) -> DynGaussian {
        let w = scaffold.skinning_weights(&center, t_ref);
        DynGaussian {
            center,
            rotation: UnitQuaternion::identity(),
            scales: Vector3::repeat(0.05),
            opacity: 0.7,
            color: [0.5, 0.5, 0.5],
            t_ref,
            anchor: w.anchor_node,
            support: w.neighbor_ids,
            delta_w: vec![0.0; w.weights.len()],
            track,
        }
    }

    /// A scene where six world points ride one rigid motion, with
    /// scaffold nodes on the points themselves and tracklets from exact
    /// projections.
    fn consistent_scene() -> (MotionScaffold, DynGaussianSet, Vec<Tracklet2D>, CameraModel) {
        let t_count = 5;
        let offsets = [
            Vector3::new(-0.5, -0.3, 5.0),
            Vector3::new(0.6, -0.2, 5.2),
            Vector3::new(0.1, 0.5, 4.8),
            Vector3::new(-0.4, 0.4, 5.5),
            Vector3::new(0.5, 0.3, 4.6),
            Vector3::new(0.0, -0.5, 5.8),
        ];
        let motion = orbit_motion(t_count);
        let scaffold = rigid_scaffold(&offsets, &motion, 1.0, 2);
        let cam = simple_cam(t_count);
        let mut tracks = Vec::new();
        for o in &offsets {
            let mut points = Vec::new();
            let mut visibility = Vec::new();
            for g in motion.iter() {
                let pos = g.apply(o);
                points.push(cam.project(&pos, 0).unwrap());
                visibility.push(true);
            }
            tracks.push(Tracklet2D { points, visibility });
        }
        let gaussians = (0..offsets.len())
            .map(|i| manual_gaussian(offsets[i], 0, &scaffold, Some(i)))
            .collect();
        (scaffold, DynGaussianSet { gaussians }, tracks, cam)
    }

    #[test]
    fn init_spawns_on_the_stride_grid_with_exact_centers() {
        let (w, h, t_count) = (64, 48, 2);
        let depths = DepthStack::new(w, h, vec![vec![5.0; w * h]; t_count]);
        let cam = simple_cam(t_count);
        let mut mask = vec![false; w * h];
        for y in 5..15 {
            for x in 3..13 {
                mask[y * w + x] = true;
            }
        }
        let masks = vec![mask; t_count];
        let node = ScaffoldNode {
            transforms: vec![RigidTransform::identity(); t_count],
            radius: 1.0,
        };
        let scaffold = build_scaffold(vec![node], 0);
        let set =
            init_gaussians(&depths, &cam, &masks, 2, &scaffold, &[], &[], None).unwrap();
        assert_eq!(set.gaussians.len(), 50, "25 per frame on a 10x10 region");
        for g in &set.gaussians {
            let p = cam.project(&g.center, g.t_ref).unwrap();
            let (px, py) = depths.pixel_index(&p);
            assert_eq!(px % 2, 0);
            assert_eq!(py % 2, 0);
            let expected = cam
                .backproject(
                    &Vector2::new(px as f64, py as f64),
                    depths.corrected(g.t_ref, px, py),
                    g.t_ref,
                )
                .unwrap();
            assert_eq!(g.center, expected, "centers are exact backprojections");
            assert!(g.delta_w.iter().all(|&d| d == 0.0));
            assert_eq!(g.scales.x, 2.0 * 5.0 / 60.0);
            assert!(g.track.is_none());
        }
    }

    #[test]
    fn fusing_at_the_reference_time_is_the_identity() {
        let t_count = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nodes = (0..5)
            .map(|_| {
                let base = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(4.0..6.0),
                );
                ScaffoldNode {
                    transforms: (0..t_count)
                        .map(|t| {
                            RigidTransform::new(
                                UnitQuaternion::from_axis_angle(
                                    &Vector3::x_axis(),
                                    0.05 * t as f64,
                                ),
                                base + Vector3::new(0.03, 0.0, -0.02) * t as f64,
                            )
                        })
                        .collect(),
                    radius: 0.8,
                }
            })
            .collect();
        let scaffold = build_scaffold(nodes, 2);
        let set = DynGaussianSet {
            gaussians: (0..6)
                .map(|i| {
                    manual_gaussian(
                        Vector3::new(0.3 * i as f64 - 0.8, 0.1 * i as f64, 5.0),
                        2,
                        &scaffold,
                        None,
                    )
                })
                .collect(),
        };
        for t in 0..t_count {
            let posed = fuse_at(&set, &scaffold, t).unwrap();
            assert_eq!(posed.len(), set.gaussians.len(), "count independent of query time");
        }
        let posed = fuse_at(&set, &scaffold, 2).unwrap();
        for (g, p) in set.gaussians.iter().zip(&posed) {
            assert!((p.center - g.center).norm() < 1e-9);
            assert!(p.rotation.angle_to(&g.rotation) < 1e-9);
        }
    }

    #[test]
    fn single_node_support_reproduces_that_nodes_motion() {
        let t_count = 3;
        let motion: Vec<RigidTransform> = (0..t_count)
            .map(|t| {
                RigidTransform::new(
                    UnitQuaternion::from_axis_angle(
                        &nalgebra::Unit::new_normalize(Vector3::new(0.3, 1.0, -0.2)),
                        0.4 * t as f64,
                    ),
                    Vector3::new(0.5 * t as f64, -0.2 * t as f64, 5.0),
                )
            })
            .collect();
        let node = ScaffoldNode { transforms: motion.clone(), radius: 1.0 };
        let scaffold = build_scaffold(vec![node], 0);
        let g = manual_gaussian(Vector3::new(0.4, -0.1, 5.3), 0, &scaffold, None);
        let posed = fuse_one(&g, &scaffold, 2).unwrap();
        let delta = motion[2].compose(&motion[0].inverse());
        assert!((posed.center - delta.apply(&g.center)).norm() < 1e-12);
        assert!(posed.rotation.angle_to(&(delta.rotation * g.rotation)) < 1e-12);
    }

    #[test]
    fn shared_rigid_motion_moves_every_gaussian_rigidly() {
        let t_count = 4;
        let offsets: Vec<Vector3<f64>> = vec![
            Vector3::new(-0.6, -0.2, 5.0),
            Vector3::new(0.7, -0.3, 5.4),
            Vector3::new(0.2, 0.6, 4.7),
            Vector3::new(-0.3, 0.5, 5.6),
            Vector3::new(0.4, 0.1, 4.9),
            Vector3::new(-0.1, -0.6, 5.2),
        ];
        let motion = orbit_motion(t_count);
        let scaffold = rigid_scaffold(&offsets, &motion, 1.0, 3);
        let set = DynGaussianSet {
            gaussians: (0..5)
                .map(|i| {
                    manual_gaussian(
                        Vector3::new(0.2 * i as f64 - 0.4, 0.15 * i as f64 - 0.3, 5.1),
                        0,
                        &scaffold,
                        None,
                    )
                })
                .collect(),
        };
        for t in 0..t_count {
            let expected = motion[t].compose(&motion[0].inverse());
            for (g, p) in set.gaussians.iter().zip(fuse_at(&set, &scaffold, t).unwrap()) {
                assert!(
                    (p.center - expected.apply(&g.center)).norm() < 1e-6,
                    "blending identical motions is that motion"
                );
            }
        }
    }

    #[test]
    fn track_loss_vanishes_on_a_consistent_scene() {
        let (scaffold, set, tracks, cam) = consistent_scene();
        let (value, _) = loss_track(&set, &scaffold, &tracks, &cam).unwrap();
        assert!(value < 1e-6, "ground truth reprojects onto its tracklets, got {value}");

        // Occluded frames contribute nothing even with corrupt pixels.
        let mut occluded = tracks.clone();
        occluded[0].visibility[3] = false;
        occluded[0].points[3] = Vector2::new(9e3, -9e3);
        let (with_occ, _) = loss_track(&set, &scaffold, &occluded, &cam).unwrap();
        assert!(with_occ < 1e-6);

        let mut off = set.clone();
        off.gaussians[0].center.x += 0.05;
        let (perturbed, _) = loss_track(&off, &scaffold, &tracks, &cam).unwrap();
        assert!(perturbed > 1e-3, "moving a center must cost, got {perturbed}");
    }

    #[test]
    fn track_loss_agrees_with_fused_projections() {
        let (mut scaffold, mut set, tracks, cam) = consistent_scene();
        // Make the state inconsistent so the cross-check covers nonzero
        // residuals and mixed weights.
        for node in scaffold.nodes.iter_mut() {
            for (t, tf) in node.transforms.iter_mut().enumerate() {
                tf.translation.x += 0.01 * t as f64;
            }
        }
        set.gaussians[1].delta_w[0] = 0.2;
        set.gaussians[2].delta_w[1] = -0.3;
        let (value, _) = loss_track(&set, &scaffold, &tracks, &cam).unwrap();
        let mut manual = 0.0;
        for g in &set.gaussians {
            let track = &tracks[g.track.unwrap()];
            for t in 0..track.len() {
                if !track.visible(t) {
                    continue;
                }
                let posed = fuse_one(g, &scaffold, t).unwrap();
                manual += (cam.project(&posed.center, t).unwrap() - track.points[t]).norm();
            }
        }
        assert!(
            (value - manual).abs() < 1e-9,
            "flat evaluation {value} vs warp-based {manual}"
        );
    }

    #[test]
    fn photometric_gradients_match_finite_differences() {
        let (mut scaffold, mut set, mut tracks, cam) = consistent_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for node in scaffold.nodes.iter_mut() {
            for tf in node.transforms.iter_mut() {
                tf.translation += Vector3::new(
                    rng.gen_range(-0.02..0.02),
                    rng.gen_range(-0.02..0.02),
                    rng.gen_range(-0.02..0.02),
                );
            }
        }
        for track in tracks.iter_mut() {
            for p in track.points.iter_mut() {
                p.x += rng.gen_range(-1.5..1.5);
                p.y += rng.gen_range(-1.5..1.5);
            }
        }
        for g in set.gaussians.iter_mut() {
            for d in g.delta_w.iter_mut() {
                *d = rng.gen_range(-0.05..0.05);
            }
        }
        // One hard-clamped entry: locally flat on both sides of the check.
        set.gaussians[0].delta_w[0] = -5.0;
        let mut objective = PhotoObjective {
            track: TrackProblem::new(&set, &scaffold, &tracks, &cam),
            levels: scaffold.pyramid.clone(),
            m_count: scaffold.node_count(),
            t_count: scaffold.frame_count(),
            n_gauss: set.gaussians.len(),
            cfg: PhotoConfig {
                lambda_track: 1.0,
                geo: GeoConfig {
                    lambda_arap: 0.3,
                    lambda_l: 1.0,
                    lambda_c: 0.4,
                    lambda_vel: 0.1,
                    lambda_acc: 0.05,
                    deltas: vec![1, 2],
                    ..GeoConfig::default()
                },
                ..PhotoConfig::default()
            },
            last_track: 0.0,
            last_arap: 0.0,
            last_vel: 0.0,
            last_acc: 0.0,
        };
        let (xq, xt) = flatten_nodes(&scaffold);
        let (dw, mu) = flatten_gaussians(&set);
        let mut x0 = xq;
        x0.extend(xt);
        x0.extend(dw);
        x0.extend(mu);
        let err = check_gradient(&mut objective, &x0, 1e-6);
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn densify_ignores_clean_scenes_and_caps_growth() {
        let (scaffold, set, tracks, cam) = consistent_scene();
        let mut scaffold2 = scaffold.clone();
        let mut set2 = set.clone();
        let residuals = track_residuals(&set2, &scaffold2, &tracks, &cam).unwrap();
        let added = densify_nodes(&mut set2, &mut scaffold2, &residuals, 2.0, 0.1, 100).unwrap();
        assert_eq!(added, 0, "no residual above threshold");
        assert_eq!(scaffold2.node_count(), scaffold.node_count());

        // Force every Gaussian over threshold: growth is limited by the
        // cap and supports of flagged Gaussians reset.
        let fake = vec![Some(10.0); set.gaussians.len()];
        let mut capped = scaffold.clone();
        let mut set3 = set.clone();
        set3.gaussians[0].delta_w[0] = 0.5;
        let before = capped.node_count();
        let added = densify_nodes(&mut set3, &mut capped, &fake, 2.0, 1e-6, before + 2).unwrap();
        assert!(added <= 2);
        assert!(added > 0, "far trajectories must add nodes");
        assert_eq!(capped.node_count(), before + added);
        assert!(set3.gaussians[0].delta_w.iter().all(|&d| d == 0.0));

        let mut full = scaffold.clone();
        let mut set4 = set.clone();
        let added = densify_nodes(&mut set4, &mut full, &fake, 2.0, 1e-6, before).unwrap();
        assert_eq!(added, 0, "cap already reached");
    }

    #[test]
    fn densify_plants_nodes_on_an_uncovered_blob() {
        let t_count = 4;
        // Scaffold covers a cluster near the origin only.
        let offsets = [
            Vector3::new(-0.2, 0.0, 5.0),
            Vector3::new(0.2, 0.1, 5.1),
            Vector3::new(0.0, -0.2, 4.9),
        ];
        let motion = vec![RigidTransform::identity(); t_count];
        let mut scaffold = rigid_scaffold(&offsets, &motion, 0.5, 1);
        // Gaussians sit on a separate blob the scaffold knows nothing
        // about.
        let blob = [
            Vector3::new(2.0, 0.0, 6.0),
            Vector3::new(2.1, 0.1, 6.1),
            Vector3::new(1.9, -0.1, 5.9),
        ];
        let mut set = DynGaussianSet {
            gaussians: blob
                .iter()
                .map(|p| manual_gaussian(*p, 0, &scaffold, Some(0)))
                .collect(),
        };
        let residuals = vec![Some(6.0); set.gaussians.len()];
        let before = scaffold.node_count();
        let added =
            densify_nodes(&mut set, &mut scaffold, &residuals, 2.0, 0.15, 100).unwrap();
        assert!(added >= 1);
        let new_node = &scaffold.nodes[before];
        assert!(
            (new_node.translation(0) - blob[0]).norm() < 1e-9,
            "a static scaffold fuses blob Gaussians in place, so the first \
             kept trajectory is the first blob center"
        );
        for g in &set.gaussians {
            assert!(
                g.anchor >= before,
                "re-anchored Gaussians should latch onto the new nodes"
            );
        }
    }

    #[test]
    fn prune_drops_unused_nodes_without_disturbing_the_rest() {
        let t_count = 4;
        let offsets = [
            Vector3::new(-0.3, 0.0, 5.0),
            Vector3::new(0.3, 0.1, 5.2),
            Vector3::new(0.0, -0.3, 4.8),
            Vector3::new(80.0, 80.0, 90.0),
        ];
        let motion = orbit_motion(t_count);
        let mut scaffold = rigid_scaffold(&offsets, &motion, 1.0, 2);
        let mut set = DynGaussianSet {
            gaussians: (0..4)
                .map(|i| {
                    manual_gaussian(
                        Vector3::new(0.1 * i as f64 - 0.2, 0.05 * i as f64, 5.0),
                        0,
                        &scaffold,
                        None,
                    )
                })
                .collect(),
        };
        for g in &set.gaussians {
            assert!(
                !g.support.contains(&3),
                "the far node must not enter any support for this test"
            );
        }
        let before: Vec<Vec<Vector3<f64>>> = (0..t_count)
            .map(|t| {
                fuse_at(&set, &scaffold, t)
                    .unwrap()
                    .into_iter()
                    .map(|p| p.center)
                    .collect()
            })
            .collect();

        let mut untouched = set.clone();
        let removed = prune_nodes(&mut untouched, &mut scaffold.clone(), 0.0).unwrap();
        assert!(removed.is_empty(), "threshold zero never prunes");

        let removed = prune_nodes(&mut set, &mut scaffold, 1e-6).unwrap();
        assert_eq!(removed, vec![3]);
        assert_eq!(scaffold.node_count(), 3);
        for (t, frame) in before.iter().enumerate() {
            for (p, old) in fuse_at(&set, &scaffold, t).unwrap().iter().zip(frame) {
                assert!(
                    (p.center - old).norm() < 1e-6,
                    "pruning an unused node must not disturb the fuse"
                );
            }
        }

        // A threshold above every weight would empty the scaffold; the
        // call must fail without touching it.
        let mut greedy = scaffold.clone();
        let err = prune_nodes(&mut set, &mut greedy, 1.1).unwrap_err();
        assert!(matches!(
            err,
            FusionError::Scaffold(ScaffoldError::InsufficientNodes { .. })
        ));
        assert_eq!(greedy.node_count(), 3, "failed prune leaves the scaffold intact");
    }

    #[test]
    fn zero_track_weight_reduces_to_the_geometric_stage() {
        let (scaffold, set, tracks, cam) = consistent_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bumped = scaffold.clone();
        for node in bumped.nodes.iter_mut() {
            for tf in node.transforms.iter_mut() {
                tf.rotation = UnitQuaternion::from_axis_angle(
                    &nalgebra::Unit::new_normalize(Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )),
                    rng.gen_range(0.0..0.2),
                ) * tf.rotation;
                tf.translation.y += rng.gen_range(-0.05..0.05);
            }
        }
        let m = bumped.node_count();
        let t_count = bumped.frame_count();
        let mut visibility = vec![vec![false; t_count]; m];
        for (i, row) in visibility.iter_mut().enumerate() {
            row[0] = true;
            row[i % t_count] = true;
        }
        let geo = GeoConfig {
            iterations: 40,
            learning_rate: 0.01,
            ..GeoConfig::default()
        };
        let mut geo_scaffold = bumped.clone();
        let geo_result = geometric_optimize(&mut geo_scaffold, &visibility, &geo).unwrap();
        let mut photo_scaffold = bumped.clone();
        let mut photo_set = set.clone();
        let cfg = PhotoConfig {
            lambda_track: 0.0,
            geo,
            control_every: 10_000,
            ..PhotoConfig::default()
        };
        let photo_result = photometric_stage(
            &mut photo_set,
            &mut photo_scaffold,
            &visibility,
            &tracks,
            &cam,
            &cfg,
        )
        .unwrap();
        assert_eq!(geo_result.value, photo_result.value);
        assert_eq!(geo_result.iterations, photo_result.iterations);
        for (a, b) in geo_scaffold.nodes.iter().zip(&photo_scaffold.nodes) {
            for (ta, tb) in a.transforms.iter().zip(&b.transforms) {
                assert_eq!(ta.rotation.quaternion().coords, tb.rotation.quaternion().coords);
                assert_eq!(ta.translation, tb.translation);
            }
        }
        for (g0, g1) in set.gaussians.iter().zip(&photo_set.gaussians) {
            assert_eq!(g0.center, g1.center, "centers get no track gradient");
            assert_eq!(g0.delta_w, g1.delta_w);
        }
    }

    #[test]
    fn photometric_stage_repairs_perturbed_occluded_frames() {
        let (scaffold, set, tracks, cam) = consistent_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut broken = scaffold.clone();
        let t_count = broken.frame_count();
        for node in broken.nodes.iter_mut() {
            for tf in node.transforms.iter_mut().skip(1) {
                tf.translation += Vector3::new(
                    rng.gen_range(-0.08..0.08),
                    rng.gen_range(-0.08..0.08),
                    rng.gen_range(-0.08..0.08),
                );
            }
        }
        // Only frame 0 counts as observed, so the optimizer may move
        // every later translation.
        let visibility: Vec<Vec<bool>> = (0..broken.node_count())
            .map(|_| {
                let mut row = vec![false; t_count];
                row[0] = true;
                row
            })
            .collect();
        let mut set2 = set.clone();
        let before: f64 = track_residuals(&set2, &broken, &tracks, &cam)
            .unwrap()
            .iter()
            .map(|r| r.unwrap())
            .sum();
        let cfg = PhotoConfig {
            lambda_track: 1.0,
            geo: GeoConfig {
                lambda_arap: 0.1,
                lambda_vel: 0.02,
                lambda_acc: 0.02,
                iterations: 250,
                learning_rate: 0.02,
                ..GeoConfig::default()
            },
            control_every: 10_000,
            ..PhotoConfig::default()
        };
        let result =
            photometric_stage(&mut set2, &mut broken, &visibility, &tracks, &cam, &cfg).unwrap();
        assert!(result.value <= result.initial_value);
        let after: f64 = track_residuals(&set2, &broken, &tracks, &cam)
            .unwrap()
            .iter()
            .map(|r| r.unwrap())
            .sum();
        assert!(
            after < 0.5 * before,
            "reprojection residual should at least halve: {before} -> {after}"
        );
    }

    #[test]
    fn photometric_stage_leaves_ground_truth_alone() {
        let (scaffold, set, tracks, cam) = consistent_scene();
        let mut s = scaffold.clone();
        let mut g = set.clone();
        let visibility =
            vec![vec![true; s.frame_count()]; s.node_count()];
        let cfg = PhotoConfig {
            lambda_track: 1.0,
            geo: GeoConfig {
                lambda_arap: 0.0,
                lambda_l: 0.0,
                lambda_c: 0.0,
                lambda_vel: 0.0,
                lambda_acc: 0.0,
                iterations: 50,
                ..GeoConfig::default()
            },
            control_every: 10_000,
            ..PhotoConfig::default()
        };
        let result = photometric_stage(&mut g, &mut s, &visibility, &tracks, &cam, &cfg).unwrap();
        assert!(result.value < 1e-6, "a consistent scene stays put, got {}", result.value);
        for (a, b) in scaffold.nodes.iter().zip(&s.nodes) {
            for (ta, tb) in a.transforms.iter().zip(&b.transforms) {
                assert!((ta.translation - tb.translation).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn photometric_stage_runs_node_control_between_segments() {
        let (scaffold, set, tracks, cam) = consistent_scene();
        let mut s = scaffold.clone();
        let mut g = set.clone();
        let visibility = vec![vec![false; s.frame_count()]; s.node_count()];
        let cfg = PhotoConfig {
            lambda_track: 1.0,
            geo: GeoConfig {
                iterations: 30,
                learning_rate: 0.005,
                ..GeoConfig::default()
            },
            control_every: 10,
            node_cap: s.node_count() + 4,
            prune_threshold: 1e-9,
            ..PhotoConfig::default()
        };
        let result =
            photometric_stage(&mut g, &mut s, &visibility, &tracks, &cam, &cfg).unwrap();
        assert_eq!(result.iterations, 30);
        assert!(s.node_count() <= cfg.node_cap);
        for gauss in &g.gaussians {
            assert!(gauss.support.iter().all(|&n| n < s.node_count()));
        }
    }

    #[test]
    fn render_empty_scene_is_background_and_infinite_depth() {
        let scaffold = build_scaffold(
            vec![ScaffoldNode {
                transforms: vec![RigidTransform::identity(); 2],
                radius: 1.0,
            }],
            0,
        );
        let cam = simple_cam(2);
        let out = preview_render(
            &DynGaussianSet::default(),
            None,
            &scaffold,
            &cam,
            0,
            None,
            64,
            48,
            [0.2, 0.4, 0.6],
        )
        .unwrap();
        assert!(out.image.pixels.iter().all(|p| *p == [51, 102, 153]));
        assert!(out.depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn render_centers_brightest_pixel_on_axis_and_orders_by_depth() {
        let t_count = 2;
        let scaffold = build_scaffold(
            vec![ScaffoldNode {
                transforms: vec![RigidTransform::identity(); t_count],
                radius: 1.0,
            }],
            0,
        );
        let cam = simple_cam(t_count);
        let mut g = manual_gaussian(Vector3::new(0.0, 0.0, 6.0), 0, &scaffold, None);
        g.color = [0.0, 0.0, 1.0];
        g.opacity = 0.95;
        g.scales = Vector3::repeat(0.25);
        let set = DynGaussianSet { gaussians: vec![g] };
        let stat = StaticGaussianSet {
            gaussians: vec![StaticGaussian {
                center: Vector3::new(0.0, 0.0, 4.0),
                rotation: UnitQuaternion::identity(),
                scales: Vector3::repeat(0.15),
                opacity: 0.95,
                color: [1.0, 0.0, 0.0],
            }],
        };
        let out = preview_render(
            &set,
            Some(&stat),
            &scaffold,
            &cam,
            0,
            None,
            64,
            48,
            [0.0, 0.0, 0.0],
        )
        .unwrap();
        let center = out.image.pixels[24 * 64 + 32];
        assert!(center[0] > 200, "the nearer red splat wins the center pixel");
        assert!(center[0] > center[2]);
        for (i, p) in out.image.pixels.iter().enumerate() {
            assert!(p[0] <= center[0], "pixel {i} outshines the optical axis");
        }
        let d = out.depth[24 * 64 + 32];
        assert!(d > 3.9 && d < 4.6, "expected depth near the front splat, got {d}");

        // Without the red splat the blue one owns the center and its
        // expected depth.
        let out = preview_render(&set, None, &scaffold, &cam, 0, None, 64, 48, [0.0; 3]).unwrap();
        let center = out.image.pixels[24 * 64 + 32];
        assert!(center[2] > 200);
        assert!((out.depth[24 * 64 + 32] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn scene_file_round_trips_bit_exactly() {
        let (scaffold, mut set, _, _) = consistent_scene();
        set.gaussians[0].delta_w[1] = 0.125;
        set.gaussians[1].track = None;
        set.gaussians[2].color = [0.1, 0.9, 0.4];
        let stat = StaticGaussianSet {
            gaussians: vec![StaticGaussian {
                center: Vector3::new(1.0, -2.0, 7.5),
                rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.3),
                scales: Vector3::new(0.1, 0.2, 0.3),
                opacity: 0.55,
                color: [0.25, 0.5, 0.75],
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.m4d");
        write_m4d(&path, &set, &stat, &scaffold).unwrap();
        let (set2, stat2, scaffold2) = read_m4d(&path).unwrap();
        assert_eq!(set2.gaussians.len(), set.gaussians.len());
        for (a, b) in set.gaussians.iter().zip(&set2.gaussians) {
            assert_eq!(a.center, b.center);
            assert_eq!(a.rotation.quaternion().coords, b.rotation.quaternion().coords);
            assert_eq!(a.scales, b.scales);
            assert_eq!(a.opacity, b.opacity);
            assert_eq!(a.color, b.color);
            assert_eq!(a.t_ref, b.t_ref);
            assert_eq!(a.anchor, b.anchor);
            assert_eq!(a.support, b.support);
            assert_eq!(a.delta_w, b.delta_w);
            assert_eq!(a.track, b.track);
        }
        for (a, b) in stat.gaussians.iter().zip(&stat2.gaussians) {
            assert_eq!(a.center, b.center);
            assert_eq!(a.opacity, b.opacity);
        }
        assert_eq!(scaffold2.node_count(), scaffold.node_count());
        assert_eq!(scaffold2.k, scaffold.k);
        for (a, b) in scaffold.nodes.iter().zip(&scaffold2.nodes) {
            assert_eq!(a.radius, b.radius);
            for (ta, tb) in a.transforms.iter().zip(&b.transforms) {
                assert_eq!(ta.rotation.quaternion().coords, tb.rotation.quaternion().coords);
                assert_eq!(ta.translation, tb.translation);
            }
        }

        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        let err = read_m4d(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn ply_export_writes_one_colored_vertex_per_gaussian() {
        let posed = vec![
            PosedGaussian {
                center: Vector3::new(1.0, 2.0, 3.0),
                rotation: UnitQuaternion::identity(),
                scales: Vector3::repeat(0.1),
                opacity: 0.7,
                color: [1.0, 0.0, 0.5],
            },
            PosedGaussian {
                center: Vector3::new(-1.0, 0.0, 5.0),
                rotation: UnitQuaternion::identity(),
                scales: Vector3::repeat(0.1),
                opacity: 0.7,
                color: [0.0, 1.0, 0.0],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.ply");
        export_ply(&path, &posed).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\n"));
        assert!(text.contains("element vertex 2"));
        let body: Vec<&str> = text
            .split("end_header\n")
            .nth(1)
            .unwrap()
            .lines()
            .collect();
        assert_eq!(body.len(), 2);
        assert_eq!(body[0], "1 2 3 255 0 128");
    }
}
