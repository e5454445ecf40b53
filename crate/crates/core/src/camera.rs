//! Pinhole camera stack and tracklet-based bundle adjustment.
//!
//! The solver recovers focal length, per-frame world-from-camera poses,
//! per-frame depth scales, and sparse per-pixel depth corrections from
//! static tracklets. Both losses compare a tracklet observation lifted
//! through one frame's depth against the same tracklet seen from another
//! frame; gradients are assembled by hand from the small Jacobian blocks
//! in [`crate::jac`] so a full evaluation stays cheap on long videos.

use crate::jac::{rotate_inv_jac, rotate_inv_matrix, rotate_jac, rotate_matrix};
use crate::optim::{
    minimize, MinimizeResult, Objective, OptimError, ParamBlock, Params, Schedule,
};
use crate::priors::{CameraFile, DepthStack, Tracklet2D};
use crate::se3::{kernel, RigidTransform};
use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point behind camera at frame {frame} (z = {z:.3e})")]
    BehindCamera { frame: usize, z: f64 },
    #[error("non-positive depth {value:.3e} at frame {frame}")]
    NonPositiveDepth { frame: usize, value: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Minimum camera-frame z accepted by projection and by the loss terms.
pub const Z_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-from-camera pose per frame.
    pub poses: Vec<RigidTransform>,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, poses: Vec<RigidTransform>) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Self { fx, fy, cx, cy, poses }
    }

    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    /// Pixel of a world point seen at frame `t`.
    pub fn project(&self, x_world: &Vector3<f64>, t: usize) -> Result<Vector2<f64>, CameraError> {
        let c = self.poses[t].inverse().apply(x_world);
        if c.z <= Z_EPS {
            return Err(CameraError::BehindCamera { frame: t, z: c.z });
        }
        Ok(Vector2::new(
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
        ))
    }

    /// World point whose camera-frame z at frame `t` equals `depth`.
    pub fn backproject(
        &self,
        p: &Vector2<f64>,
        depth: f64,
        t: usize,
    ) -> Result<Vector3<f64>, CameraError> {
        if depth <= 0.0 {
            return Err(CameraError::NonPositiveDepth { frame: t, value: depth });
        }
        let c = Vector3::new(
            (p.x - self.cx) / self.fx * depth,
            (p.y - self.cy) / self.fy * depth,
            depth,
        );
        Ok(self.poses[t].apply(&c))
    }

    pub fn to_file(&self, depths: Option<&DepthStack>) -> CameraFile {
        let poses = self
            .poses
            .iter()
            .map(|p| {
                let r = p.rotation.to_rotation_matrix();
                std::array::from_fn(|row| {
                    [
                        r[(row, 0)],
                        r[(row, 1)],
                        r[(row, 2)],
                        p.translation[row],
                    ]
                })
            })
            .collect();
        CameraFile {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            poses: Some(poses),
            depth_scales: depths.map(|d| d.scale.clone()),
            pixel_corrections: depths.map(|d| {
                d.pixel_correction
                    .iter()
                    .map(|m| m.iter().map(|(&(x, y), &c)| (x, y, c)).collect())
                    .collect()
            }),
        }
    }

    pub fn from_file(file: &CameraFile) -> Self {
        let poses = file
            .poses
            .as_deref()
            .unwrap_or_default()
            .iter()
            .map(pose_from_rows)
            .collect();
        Self::new(file.fx, file.fy, file.cx, file.cy, poses)
    }
}

/// Rigid transform from a 3x4 row-major [R | t] matrix, re-orthonormalizing
/// the rotation part.
pub fn pose_from_rows(rows: &[[f64; 4]; 3]) -> RigidTransform {
    let m = Matrix3::from_fn(|r, c| rows[r][c]);
    RigidTransform {
        rotation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix(&m)),
        translation: Vector3::new(rows[0][3], rows[1][3], rows[2][3]),
    }
}

/// Copies the depth scales and pixel corrections of a camera file into a
/// depth stack, leaving frames the file does not cover untouched.
pub fn apply_depth_corrections(depths: &mut DepthStack, file: &CameraFile) {
    if let Some(scales) = &file.depth_scales {
        for (t, s) in scales.iter().enumerate().take(depths.scale.len()) {
            depths.scale[t] = *s;
        }
    }
    if let Some(corr) = &file.pixel_corrections {
        for (t, entries) in corr.iter().enumerate().take(depths.pixel_correction.len()) {
            depths.pixel_correction[t] = entries.iter().map(|&(x, y, c)| ((x, y), c)).collect();
        }
    }
}

/// Scale-invariant depth gap |x/y − 1| + |y/x − 1|; symmetric, zero iff
/// the depths agree.
pub fn scale_invariant_gap(x: f64, y: f64) -> f64 {
    (x / y - 1.0).abs() + (y / x - 1.0).abs()
}

/// Ordered frame pairs visited by the losses. The default walks strides of
/// 1, 2, 4, 8, ... in both directions, which keeps long videos near-linear;
/// `all_pairs` restores the full quadratic double sum.
pub fn frame_pairs(t_count: usize, all_pairs: bool) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    if all_pairs {
        for a in 0..t_count {
            for b in 0..t_count {
                if a != b {
                    pairs.push((a, b));
                }
            }
        }
    } else {
        for a in 0..t_count {
            let mut d = 1;
            while a + d < t_count {
                pairs.push((a, a + d));
                pairs.push((a + d, a));
                d *= 2;
            }
        }
    }
    pairs
}

/// Gradients of a bundle-adjustment loss, grouped by parameter.
#[derive(Clone, Debug)]
pub struct BaGradients {
    /// (fx, fy, cx, cy).
    pub intrinsics: [f64; 4],
    /// Ambient (w, x, y, z) quaternion gradient per frame.
    pub rotation: Vec<[f64; 4]>,
    pub translation: Vec<[f64; 3]>,
    /// Per-frame gradient w.r.t. the log of the depth scale.
    pub log_scale: Vec<f64>,
    /// Aligned with [`BaProblem::correction_keys`].
    pub correction: Vec<f64>,
}

impl BaGradients {
    fn zeros(t_count: usize, n_corr: usize) -> Self {
        Self {
            intrinsics: [0.0; 4],
            rotation: vec![[0.0; 4]; t_count],
            translation: vec![[0.0; 3]; t_count],
            log_scale: vec![0.0; t_count],
            correction: vec![0.0; n_corr],
        }
    }
}

/// Camera parameters plus depth corrections in optimizable form. The
/// depth seen by the losses is `exp(log_scale) * (raw + correction)`.
#[derive(Clone, Debug)]
pub struct BaState {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Vec<[f64; 4]>,
    pub translation: Vec<[f64; 3]>,
    pub log_scale: Vec<f64>,
    pub correction: Vec<f64>,
}

impl BaState {
    pub fn from_model(
        cam: &CameraModel,
        depths: &DepthStack,
        correction_keys: &[(usize, (u32, u32))],
    ) -> Self {
        let rotation = cam
            .poses
            .iter()
            .map(|p| {
                let q = p.rotation.quaternion();
                [q.w, q.i, q.j, q.k]
            })
            .collect();
        let translation = cam
            .poses
            .iter()
            .map(|p| [p.translation.x, p.translation.y, p.translation.z])
            .collect();
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation,
            translation,
            log_scale: depths.scale.iter().map(|s| s.ln()).collect(),
            correction: correction_keys
                .iter()
                .map(|&(t, (x, y))| depths.correction(t, x as usize, y as usize))
                .collect(),
        }
    }

    pub fn to_model(&self) -> CameraModel {
        let poses = self
            .rotation
            .iter()
            .zip(&self.translation)
            .map(|(q, t)| RigidTransform {
                rotation: UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])),
                translation: Vector3::new(t[0], t[1], t[2]),
            })
            .collect();
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, poses)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub proj: f64,
    pub z: f64,
    pub penalty: f64,
    /// Pair terms dropped because the lifted point fell behind the target
    /// camera or a corrected depth was not positive.
    pub skipped: usize,
}

struct Obs {
    frame: usize,
    u: f64,
    v: f64,
    raw: f64,
    corr: usize,
}

struct PairTerm {
    src: usize,
    dst: usize,
}

/// Residual structure of one bundle adjustment: which tracklet
/// observations exist, which ordered pairs are compared, and where the
/// sparse depth-correction parameters live.
pub struct BaProblem {
    pub t_count: usize,
    obs: Vec<Obs>,
    pairs: Vec<PairTerm>,
    /// One entry per correction parameter: (frame, rounded pixel).
    pub correction_keys: Vec<(usize, (u32, u32))>,
    median_raw: Vec<f64>,
    correction_weight: f64,
}

const HINGE_WEIGHT: f64 = 1e4;
const BARRIER_WEIGHT: f64 = 1e4;
/// Corrections are nudged to stay within this fraction of the frame's
/// median raw depth.
const CORRECTION_CAP: f64 = 0.05;
/// The positivity barrier engages when raw + correction dips below this
/// fraction of the raw depth.
const BARRIER_FLOOR: f64 = 0.05;

impl BaProblem {
    pub fn new(
        tracks: &[Tracklet2D],
        static_ids: &[usize],
        depths: &DepthStack,
        all_pairs: bool,
        correction_weight: f64,
    ) -> Self {
        let t_count = depths.frame_count();
        let mut obs = Vec::new();
        let mut key_index: BTreeMap<(usize, (u32, u32)), usize> = BTreeMap::new();
        let mut slots: Vec<Vec<Option<usize>>> = Vec::with_capacity(static_ids.len());
        for &i in static_ids {
            let track = &tracks[i];
            let mut slot = vec![None; t_count];
            for t in 0..t_count.min(track.len()) {
                if !track.visible(t) {
                    continue;
                }
                let p = track.points[t];
                let (px, py) = depths.pixel_index(&p);
                let key = (t, (px as u32, py as u32));
                let next = key_index.len();
                let corr = *key_index.entry(key).or_insert(next);
                slot[t] = Some(obs.len());
                obs.push(Obs {
                    frame: t,
                    u: p.x,
                    v: p.y,
                    raw: depths.raw(t, px, py),
                    corr,
                });
            }
            slots.push(slot);
        }
        let mut correction_keys = vec![(0usize, (0u32, 0u32)); key_index.len()];
        for (key, idx) in key_index {
            correction_keys[idx] = key;
        }
        let mut pairs = Vec::new();
        for (a, b) in frame_pairs(t_count, all_pairs) {
            for slot in &slots {
                if let (Some(src), Some(dst)) = (slot[a], slot[b]) {
                    pairs.push(PairTerm { src, dst });
                }
            }
        }
        let median_raw = (0..t_count).map(|t| depths.median_raw(t)).collect();
        Self {
            t_count,
            obs,
            pairs,
            correction_keys,
            median_raw,
            correction_weight,
        }
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// Evaluates the reprojection, depth-alignment, and correction-penalty
    /// terms; gradients (if requested) accumulate the three with weights
    /// `w_proj`, `w_z`, `w_pen`.
    pub fn evaluate(
        &self,
        state: &BaState,
        w_proj: f64,
        w_z: f64,
        w_pen: f64,
        mut grads: Option<&mut BaGradients>,
    ) -> LossBreakdown {
        let want_grads = grads.is_some();
        let t_count = self.t_count;
        let (fx, fy, cx, cy) = (state.fx, state.fy, state.cx, state.cy);

        let scales: Vec<f64> = state.log_scale.iter().map(|l| l.exp()).collect();
        let mut rot_mat = Vec::with_capacity(t_count);
        let mut rot_inv_mat = Vec::with_capacity(t_count);
        for t in 0..t_count {
            rot_mat.push(rotate_matrix(state.rotation[t]));
            rot_inv_mat.push(rotate_inv_matrix(state.rotation[t]));
        }

        // Forward pass per observation: corrected depth, camera ray, world
        // point, and (when differentiating) the rotation Jacobian there.
        struct Fwd {
            d: f64,
            h0: f64,
            h1: f64,
            xw: [f64; 3],
            jq: Option<[[f64; 4]; 3]>,
        }
        let mut fwd = Vec::with_capacity(self.obs.len());
        for o in &self.obs {
            let base = o.raw + state.correction[o.corr];
            let d = scales[o.frame] * base;
            let h0 = (o.u - cx) / fx;
            let h1 = (o.v - cy) / fy;
            let xc = [h0 * d, h1 * d, d];
            let (r, jq) = if want_grads {
                let (r, j) = rotate_jac(state.rotation[o.frame], xc);
                (r, Some(j))
            } else {
                (kernel::rotate(state.rotation[o.frame], xc), None)
            };
            let t = state.translation[o.frame];
            fwd.push(Fwd {
                d,
                h0,
                h1,
                xw: [r[0] + t[0], r[1] + t[1], r[2] + t[2]],
                jq,
            });
        }

        let mut out = LossBreakdown::default();
        let mut xw_acc = vec![[0.0; 3]; self.obs.len()];
        for pair in &self.pairs {
            let ob = &self.obs[pair.dst];
            let fa = &fwd[pair.src];
            let fb_frame = ob.frame;
            if fa.d <= 0.0 {
                out.skipped += 1;
                continue;
            }
            let tb = state.translation[fb_frame];
            let w3 = [
                fa.xw[0] - tb[0],
                fa.xw[1] - tb[1],
                fa.xw[2] - tb[2],
            ];
            let (y, jinv) = if want_grads {
                let (y, j) = rotate_inv_jac(state.rotation[fb_frame], w3);
                (y, Some(j))
            } else {
                (kernel::rotate_inv(state.rotation[fb_frame], w3), None)
            };
            if y[2] <= Z_EPS {
                out.skipped += 1;
                continue;
            }

            let mut gy = [0.0; 3];

            let uh = fx * y[0] / y[2] + cx;
            let vh = fy * y[1] / y[2] + cy;
            let (eu, ev) = (uh - ob.u, vh - ob.v);
            let n = (eu * eu + ev * ev).sqrt();
            out.proj += n;
            if want_grads && n > 1e-12 {
                let (hu, hv) = (eu / n, ev / n);
                gy[0] += w_proj * hu * fx / y[2];
                gy[1] += w_proj * hv * fy / y[2];
                gy[2] -= w_proj * (hu * fx * y[0] + hv * fy * y[1]) / (y[2] * y[2]);
                if let Some(g) = grads.as_deref_mut() {
                    g.intrinsics[0] += w_proj * hu * y[0] / y[2];
                    g.intrinsics[1] += w_proj * hv * y[1] / y[2];
                    g.intrinsics[2] += w_proj * hu;
                    g.intrinsics[3] += w_proj * hv;
                }
            }

            let db = scales[fb_frame] * (ob.raw + state.correction[ob.corr]);
            if db > 0.0 {
                out.z += scale_invariant_gap(y[2], db);
                if want_grads {
                    let sgn = if y[2] > db {
                        1.0
                    } else if y[2] < db {
                        -1.0
                    } else {
                        0.0
                    };
                    let d_dx = sgn * (1.0 / db + db / (y[2] * y[2]));
                    let d_dy = -sgn * (y[2] / (db * db) + 1.0 / y[2]);
                    gy[2] += w_z * d_dx;
                    if let Some(g) = grads.as_deref_mut() {
                        g.log_scale[fb_frame] += w_z * d_dy * db;
                        g.correction[ob.corr] += w_z * d_dy * scales[fb_frame];
                    }
                }
            } else {
                out.skipped += 1;
            }

            if let Some(g) = grads.as_deref_mut() {
                let jinv = jinv.unwrap();
                for row in 0..3 {
                    for col in 0..4 {
                        g.rotation[fb_frame][col] += gy[row] * jinv[row][col];
                    }
                }
                let minv = &rot_inv_mat[fb_frame];
                let mut gw = [0.0; 3];
                for c in 0..3 {
                    for r in 0..3 {
                        gw[c] += minv[r][c] * gy[r];
                    }
                }
                for c in 0..3 {
                    g.translation[fb_frame][c] -= gw[c];
                    xw_acc[pair.src][c] += gw[c];
                }
            }
        }

        if let Some(g) = grads.as_deref_mut() {
            for (i, o) in self.obs.iter().enumerate() {
                let acc = xw_acc[i];
                if acc == [0.0; 3] {
                    continue;
                }
                let f = &fwd[i];
                for c in 0..3 {
                    g.translation[o.frame][c] += acc[c];
                }
                let jq = f.jq.as_ref().unwrap();
                for row in 0..3 {
                    for col in 0..4 {
                        g.rotation[o.frame][col] += acc[row] * jq[row][col];
                    }
                }
                let m = &rot_mat[o.frame];
                let mut gxc = [0.0; 3];
                for c in 0..3 {
                    for r in 0..3 {
                        gxc[c] += m[r][c] * acc[r];
                    }
                }
                g.intrinsics[0] -= gxc[0] * f.d * f.h0 / fx;
                g.intrinsics[1] -= gxc[1] * f.d * f.h1 / fy;
                g.intrinsics[2] -= gxc[0] * f.d / fx;
                g.intrinsics[3] -= gxc[1] * f.d / fy;
                let gd = gxc[0] * f.h0 + gxc[1] * f.h1 + gxc[2];
                g.log_scale[o.frame] += gd * f.d;
                g.correction[o.corr] += gd * scales[o.frame];
            }
        }

        // Smallness and positivity penalties on the sparse corrections.
        for (idx, &(frame, _)) in self.correction_keys.iter().enumerate() {
            let c = state.correction[idx];
            let med = self.median_raw[frame];
            let mut pen = self.correction_weight * c * c;
            let mut dpen = 2.0 * self.correction_weight * c;
            let excess = c.abs() - CORRECTION_CAP * med;
            if excess > 0.0 {
                pen += HINGE_WEIGHT * excess * excess;
                dpen += 2.0 * HINGE_WEIGHT * excess * c.signum();
            }
            out.penalty += pen;
            if let Some(g) = grads.as_deref_mut() {
                g.correction[idx] += w_pen * dpen;
            }
        }
        for o in &self.obs {
            let base = o.raw + state.correction[o.corr];
            let floor = BARRIER_FLOOR * o.raw;
            if base < floor {
                let med = self.median_raw[o.frame];
                let gap = (floor - base) / med;
                out.penalty += BARRIER_WEIGHT * gap * gap;
                if let Some(g) = grads.as_deref_mut() {
                    g.correction[o.corr] -= w_pen * 2.0 * BARRIER_WEIGHT * gap / med;
                }
            }
        }
        out
    }
}

/// Reprojection loss over static tracklets with its gradients.
pub fn loss_proj(
    tracks: &[Tracklet2D],
    static_ids: &[usize],
    cam: &CameraModel,
    depths: &DepthStack,
    all_pairs: bool,
) -> (f64, BaGradients) {
    let problem = BaProblem::new(tracks, static_ids, depths, all_pairs, 0.0);
    let state = BaState::from_model(cam, depths, &problem.correction_keys);
    let mut g = BaGradients::zeros(problem.t_count, problem.correction_keys.len());
    let b = problem.evaluate(&state, 1.0, 0.0, 0.0, Some(&mut g));
    (b.proj, g)
}

/// Depth-alignment loss over static tracklets with its gradients.
pub fn loss_depth_align(
    tracks: &[Tracklet2D],
    static_ids: &[usize],
    cam: &CameraModel,
    depths: &DepthStack,
    all_pairs: bool,
) -> Result<(f64, BaGradients), CameraError> {
    let problem = BaProblem::new(tracks, static_ids, depths, all_pairs, 0.0);
    let state = BaState::from_model(cam, depths, &problem.correction_keys);
    for (idx, &(frame, (x, y))) in problem.correction_keys.iter().enumerate() {
        let d = state.log_scale[frame].exp()
            * (depths.raw(frame, x as usize, y as usize) + state.correction[idx]);
        if d <= 0.0 {
            return Err(CameraError::NonPositiveDepth { frame, value: d });
        }
    }
    let mut g = BaGradients::zeros(problem.t_count, problem.correction_keys.len());
    let b = problem.evaluate(&state, 0.0, 1.0, 0.0, Some(&mut g));
    Ok((b.z, g))
}

#[derive(Clone, Debug)]
pub struct BaConfig {
    pub lambda_proj: f64,
    pub lambda_z: f64,
    /// L2 weight on the sparse per-pixel depth corrections.
    pub correction_weight: f64,
    pub all_pairs: bool,
    /// Freeze fx, fy at their initial values instead of solving for them.
    pub known_intrinsics: bool,
    pub iterations: usize,
    pub learning_rate: f64,
    pub log: Option<PathBuf>,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            lambda_proj: 1.0,
            lambda_z: 0.1,
            correction_weight: 1.0,
            all_pairs: false,
            known_intrinsics: false,
            iterations: 2000,
            learning_rate: 0.01,
            log: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CameraInit {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraInit {
    /// Focal guess with the principal point at the image center.
    pub fn from_focal(focal: f64, depths: &DepthStack) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: depths.width as f64 / 2.0,
            cy: depths.height as f64 / 2.0,
        }
    }
}

pub struct BundleSolution {
    pub camera: CameraModel,
    pub depths: DepthStack,
    pub result: MinimizeResult,
    pub breakdown: LossBreakdown,
}

struct BaObjective<'a> {
    problem: &'a BaProblem,
    template: BaState,
    lambda_proj: f64,
    lambda_z: f64,
    last: LossBreakdown,
    last_fx: f64,
}

impl BaObjective<'_> {
    /// The flat vector carries ln(fx), ln(fy): focal lengths sit two orders
    /// of magnitude above every other parameter, and log space turns the
    /// optimizer's uniform step size into a proportional one.
    fn state_from_flat(&self, x: &[f64]) -> BaState {
        let t = self.template.rotation.len();
        let mut s = self.template.clone();
        s.fx = x[0].exp();
        s.fy = x[1].exp();
        let mut off = 2;
        for i in 0..t {
            s.rotation[i] = [x[off], x[off + 1], x[off + 2], x[off + 3]];
            off += 4;
        }
        for i in 0..t {
            s.translation[i] = [x[off], x[off + 1], x[off + 2]];
            off += 3;
        }
        for i in 0..t {
            s.log_scale[i] = x[off];
            off += 1;
        }
        for i in 0..s.correction.len() {
            s.correction[i] = x[off];
            off += 1;
        }
        debug_assert_eq!(off, x.len());
        s
    }
}

impl Objective for BaObjective<'_> {
    fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let state = self.state_from_flat(x);
        self.last_fx = state.fx;
        match grad {
            Some(gslice) => {
                let mut g =
                    BaGradients::zeros(self.problem.t_count, self.problem.correction_keys.len());
                self.last = self.problem.evaluate(
                    &state,
                    self.lambda_proj,
                    self.lambda_z,
                    1.0,
                    Some(&mut g),
                );
                gslice[0] = g.intrinsics[0] * state.fx;
                gslice[1] = g.intrinsics[1] * state.fy;
                let t = self.problem.t_count;
                let mut off = 2;
                for i in 0..t {
                    gslice[off..off + 4].copy_from_slice(&g.rotation[i]);
                    off += 4;
                }
                for i in 0..t {
                    gslice[off..off + 3].copy_from_slice(&g.translation[i]);
                    off += 3;
                }
                gslice[off..off + t].copy_from_slice(&g.log_scale);
                off += t;
                gslice[off..].copy_from_slice(&g.correction);
            }
            None => {
                self.last = self.problem.evaluate(&state, 0.0, 0.0, 0.0, None);
            }
        }
        self.lambda_proj * self.last.proj + self.lambda_z * self.last.z + self.last.penalty
    }

    fn loss_terms(&self) -> Vec<(String, f64)> {
        vec![
            ("proj".into(), self.last.proj),
            ("z".into(), self.last.z),
            ("penalty".into(), self.last.penalty),
            ("skipped".into(), self.last.skipped as f64),
            ("fx".into(), self.last_fx),
        ]
    }
}

/// Rigid transform best mapping `src` onto `dst` in the least-squares
/// sense (dst ≈ R src + t).
pub fn fit_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> RigidTransform {
    assert_eq!(src.len(), dst.len());
    assert!(src.len() >= 3, "need at least three correspondences");
    let n = src.len() as f64;
    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - mu_s) * (d - mu_d).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = vt.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        r = vt.transpose() * flip * u.transpose();
    }
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = mu_d - r * mu_s;
    RigidTransform { rotation, translation }
}

/// Chains frame-to-frame rigid fits of backprojected static tracklets into
/// initial world-from-camera poses, with frame 0 at the identity.
fn chain_init(
    tracks: &[Tracklet2D],
    static_ids: &[usize],
    depths: &DepthStack,
    init: &CameraInit,
) -> Vec<RigidTransform> {
    let t_count = depths.frame_count();
    let backproj = |p: &Vector2<f64>, d: f64| {
        Vector3::new(
            (p.x - init.cx) / init.fx * d,
            (p.y - init.cy) / init.fy * d,
            d,
        )
    };
    let mut poses = vec![RigidTransform::identity()];
    for t in 1..t_count {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for &i in static_ids {
            let track = &tracks[i];
            if t < track.len() && track.visible(t - 1) && track.visible(t) {
                let da = depths.raw_at(t - 1, &track.points[t - 1]);
                let db = depths.raw_at(t, &track.points[t]);
                if da > 0.0 && db > 0.0 {
                    dst.push(backproj(&track.points[t - 1], da));
                    src.push(backproj(&track.points[t], db));
                }
            }
        }
        let delta = if src.len() >= 3 {
            fit_rigid(&src, &dst)
        } else {
            log::warn!("chain init: only {} correspondences at frame {t}", src.len());
            RigidTransform::identity()
        };
        poses.push(poses[t - 1].compose(&delta));
    }
    poses
}

/// Total loss of the chain initialization built from a focal guess, with
/// skipped pair terms charged heavily so a guess that throws points behind
/// the camera cannot look cheap.
fn init_score(
    tracks: &[Tracklet2D],
    static_ids: &[usize],
    depths: &DepthStack,
    problem: &BaProblem,
    init: &CameraInit,
    cfg: &BaConfig,
) -> f64 {
    let poses = chain_init(tracks, static_ids, depths, init);
    let cam = CameraModel::new(init.fx, init.fy, init.cx, init.cy, poses);
    let state = BaState::from_model(&cam, depths, &problem.correction_keys);
    let b = problem.evaluate(&state, 0.0, 0.0, 0.0, None);
    cfg.lambda_proj * b.proj + cfg.lambda_z * b.z + 1e6 * b.skipped as f64
}

/// Gradient descent follows the coupled focal-pose-scale valley far too
/// slowly to fix a 20% focal error within budget, so the focal guess is
/// refined first by direct search: coarse log-spaced candidates around the
/// caller's guess, then golden-section between the best candidate's
/// neighbors. Each probe is one chain initialization plus one loss pass.
fn sweep_focal(
    tracks: &[Tracklet2D],
    static_ids: &[usize],
    depths: &DepthStack,
    problem: &BaProblem,
    init: &CameraInit,
    cfg: &BaConfig,
) -> CameraInit {
    let at = |mult: f64| CameraInit {
        fx: init.fx * mult,
        fy: init.fy * mult,
        cx: init.cx,
        cy: init.cy,
    };
    // The overall argmin across every probe is kept, so a guess that is
    // already optimal (the caller's own, multiplier 1) survives exactly.
    let mut best = (1.0f64, f64::INFINITY);
    let mut score = |mult: f64| {
        let s = init_score(tracks, static_ids, depths, problem, &at(mult), cfg);
        if s < best.1 {
            best = (mult, s);
        }
        s
    };
    score(1.0);

    let steps = 12;
    let (lo, hi) = (0.6f64.ln(), 1.7f64.ln());
    let grid: Vec<f64> = (0..=steps)
        .map(|i| (lo + (hi - lo) * i as f64 / steps as f64).exp())
        .collect();
    let scores: Vec<f64> = grid.iter().map(|&g| score(g)).collect();
    let coarse = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();

    let (mut a, mut b) = (
        grid[coarse.saturating_sub(1)].ln(),
        grid[(coarse + 1).min(steps)].ln(),
    );
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (score(c.exp()), score(d.exp()));
    for _ in 0..12 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = score(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = score(d.exp());
        }
    }
    score((0.5 * (a + b)).exp());
    log::debug!("focal sweep: init {} -> {}", init.fx, init.fx * best.0);
    at(best.0)
}

/// Solves focal length, poses, per-frame depth scales, and sparse depth
/// corrections from static tracklets. Frame 0 is pinned to the identity
/// and its depth scale to 1, which fixes the gauge at the initial frame-0
/// median depth.
pub fn solve_bundle(
    tracks: &[Tracklet2D],
    static_ids: &[usize],
    depths: &DepthStack,
    init: &CameraInit,
    cfg: &BaConfig,
) -> Result<BundleSolution, CameraError> {
    if static_ids.is_empty() {
        return Err(CameraError::DegenerateGeometry(
            "no static tracklets to adjust against".into(),
        ));
    }
    let problem = BaProblem::new(tracks, static_ids, depths, cfg.all_pairs, cfg.correction_weight);
    if problem.pairs.is_empty() {
        return Err(CameraError::DegenerateGeometry(
            "no co-visible static observations".into(),
        ));
    }

    let init = if cfg.known_intrinsics {
        *init
    } else {
        sweep_focal(tracks, static_ids, depths, &problem, init, cfg)
    };
    let init = &init;
    let poses = chain_init(tracks, static_ids, depths, init);
    let max_center = poses
        .iter()
        .map(|p| p.translation.norm())
        .fold(0.0f64, f64::max);
    let depth_scale = depths.median_raw(0);
    if max_center < 1e-3 * depth_scale {
        return Err(CameraError::DegenerateGeometry(format!(
            "camera translation unobservable (max center offset {max_center:.2e} \
             against median depth {depth_scale:.2e}); pure-rotation input"
        )));
    }

    let cam0 = CameraModel::new(init.fx, init.fy, init.cx, init.cy, poses);
    let template = BaState::from_model(&cam0, depths, &problem.correction_keys);

    let mut focal = ParamBlock::euclidean(vec![template.fx.ln(), template.fy.ln()]);
    if cfg.known_intrinsics {
        focal.freeze_all();
    }
    let mut quats =
        ParamBlock::unit_quaternions(template.rotation.iter().flatten().copied().collect());
    quats.freeze_range(0..4);
    let mut trans =
        ParamBlock::euclidean(template.translation.iter().flatten().copied().collect());
    trans.freeze_range(0..3);
    let mut scales = ParamBlock::euclidean(template.log_scale.clone());
    scales.freeze_range(0..1);
    let mut corr = ParamBlock::euclidean(template.correction.clone());
    // Slow learner: the many per-pixel corrections otherwise absorb camera
    // error faster than the camera parameters can fix it.
    corr.lr_scale = 0.1;
    let mut params = Params::new(vec![focal, quats, trans, scales, corr]);

    let mut objective = BaObjective {
        problem: &problem,
        template,
        lambda_proj: cfg.lambda_proj,
        lambda_z: cfg.lambda_z,
        last: LossBreakdown::default(),
        last_fx: 0.0,
    };
    // Camera first, corrections frozen: with the per-pixel escape valves
    // shut, the depth-alignment term has to be resolved by focal, poses,
    // and scales. The joint polish then starts from consistent geometry.
    // Plateau-driven decay instead of a fixed schedule: the productive
    // step size depends on how far the initialization is off, so the rate
    // holds while the loss falls and halves when it stalls.
    let split = cfg.iterations * 2 / 5;
    let mut schedule = Schedule::new(split, cfg.learning_rate);
    schedule.cosine_decay = false;
    schedule.adaptive_rate = true;
    let warm = minimize(&mut objective, params.freeze_block(4), &schedule)?;
    params.thaw_block(4);
    schedule.iterations = cfg.iterations - split;
    schedule.log = cfg.log.clone();
    let polish = minimize(&mut objective, &mut params, &schedule)?;
    let result = MinimizeResult {
        initial_value: warm.initial_value,
        value: polish.value,
        iterations: warm.iterations + polish.iterations,
    };

    let solved = objective.state_from_flat(&params.flatten());
    let breakdown = problem.evaluate(&solved, 0.0, 0.0, 0.0, None);
    let camera = solved.to_model();
    let mut out_depths = depths.clone();
    for (t, l) in solved.log_scale.iter().enumerate() {
        out_depths.scale[t] = l.exp();
    }
    for m in &mut out_depths.pixel_correction {
        m.clear();
    }
    for (idx, &(frame, key)) in problem.correction_keys.iter().enumerate() {
        out_depths.pixel_correction[frame].insert(key, solved.correction[idx]);
    }
    Ok(BundleSolution {
        camera,
        depths: out_depths,
        result,
        breakdown,
    })
}
