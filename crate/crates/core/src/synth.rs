//! Built-in synthetic scene generator: four small dynamic scenes with exact
//! ground truth, used as the verification oracle for the whole pipeline.
//!
//! Scenes are constructed exactly first (projections, depth maps, and tracks
//! all agree to machine precision), then noise and occlusion are injected on
//! top. Every dynamic scene is a union of rigid clusters whose spacing keeps
//! the curve-distance KNN topology from ever bridging two clusters, so the
//! ground-truth scaffold is exactly rigid under its own topology.

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::priors::{
    depth_path, read_tracks, write_pfm, write_tracks, CameraFile, DepthStack, PriorsError,
    Tracklet2D,
};
use crate::scaffold::{MotionScaffold, ScaffoldError, ScaffoldNode};
use crate::se3::RigidTransform;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    BadSpec(String),
    #[error("synthetic dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Priors(#[from] PriorsError),
    #[error(transparent)]
    Scaffold(#[from] ScaffoldError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// Static interior observed by an orbiting camera; exercises bundle
    /// adjustment alone.
    RigidOrbit,
    /// A fixed background plus a forearm swinging about a hinge.
    ArticulatedArm,
    /// A curtain of hinged slats rippling with a phase-shifted wave.
    BendingSheet,
    /// Two separate rigid bodies drifting apart.
    TwoBody,
}

/// Everything that fixes a synthetic dataset. Identical specs generate
/// byte-identical directories.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Number of 2D tracklets to place (best effort; placement rejects
    /// candidates that collide in pixel space or are rarely visible).
    pub track_count: usize,
    /// Camera orbit radius around the scene center.
    pub orbit_radius: f64,
    /// Total angle in radians swept by the orbiting camera.
    pub orbit_sweep: f64,
    /// Multiplicative per-pixel depth noise (standard deviation).
    pub depth_noise: f64,
    /// Additive track noise in pixels (standard deviation).
    pub track_noise: f64,
    /// Bernoulli rate at which visible track entries are flagged occluded.
    pub occlusion: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::preset(SceneKind::RigidOrbit)
    }
}

impl SceneSpec {
    /// Noiseless reference configuration of a scene family.
    pub fn preset(kind: SceneKind) -> Self {
        let (track_count, orbit_sweep) = match kind {
            SceneKind::RigidOrbit => (200, 2.1),
            SceneKind::ArticulatedArm => (140, 1.6),
            SceneKind::BendingSheet => (160, 1.2),
            SceneKind::TwoBody => (150, 1.6),
        };
        Self {
            kind,
            frames: 24,
            width: 64,
            height: 48,
            focal: 60.0,
            track_count,
            orbit_radius: 2.0,
            orbit_sweep,
            depth_noise: 0.0,
            track_noise: 0.0,
            occlusion: 0.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames < 3 {
            return Err(SynthError::BadSpec(format!(
                "need at least 3 frames, got {}",
                self.frames
            )));
        }
        if self.width < 8 || self.height < 8 {
            return Err(SynthError::BadSpec(format!(
                "image {}x{} too small",
                self.width, self.height
            )));
        }
        if !(self.focal > 0.0) {
            return Err(SynthError::BadSpec(format!("focal {} must be positive", self.focal)));
        }
        if self.track_count < 8 {
            return Err(SynthError::BadSpec(format!(
                "need at least 8 tracks, got {}",
                self.track_count
            )));
        }
        for (name, v) in [
            ("depth_noise", self.depth_noise),
            ("track_noise", self.track_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::BadSpec(format!("{name} {v} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return Err(SynthError::BadSpec(format!(
                "occlusion {} outside [0, 1]",
                self.occlusion
            )));
        }
        if !(self.orbit_radius > 0.0 && self.orbit_radius <= 4.0) {
            return Err(SynthError::BadSpec(format!(
                "orbit radius {} outside (0, 4]",
                self.orbit_radius
            )));
        }
        Ok(())
    }
}

/// A generated scene held in memory: the noisy dataset exactly as written to
/// disk plus the exact ground truth it was derived from.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    /// Ground-truth camera (intrinsics and world-from-camera poses).
    pub camera: CameraModel,
    /// Tracks as written: noise applied, occlusion folded into visibility.
    pub tracks: Vec<Tracklet2D>,
    /// Exact projections with purely geometric visibility (in front of the
    /// camera and inside the image), before noise and occlusion.
    pub clean_tracks: Vec<Tracklet2D>,
    /// Exact world-space trajectory of every track.
    pub tracks_3d: Vec<Vec<Vector3<f64>>>,
    /// Rigid cluster of each track; 0 is the static background.
    pub body: Vec<usize>,
    /// Depth maps as written (noise applied).
    pub depths: DepthStack,
    /// Ground-truth scaffold: exact node trajectories and rotations.
    pub gt_scaffold: MotionScaffold,
    /// Rigid cluster of each scaffold node.
    pub node_body: Vec<usize>,
    /// World-space surface samples at frame 0.
    pub surface: Vec<Vector3<f64>>,
}

impl SyntheticScene {
    pub fn static_ids(&self) -> Vec<usize> {
        (0..self.body.len()).filter(|&i| self.body[i] == 0).collect()
    }

    pub fn dynamic_ids(&self) -> Vec<usize> {
        (0..self.body.len()).filter(|&i| self.body[i] != 0).collect()
    }
}

/// Ground truth as re-read from a dataset's `gt/` directory.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub camera: CameraModel,
    pub tracks: Vec<Tracklet2D>,
    pub tracks_3d: Vec<Vec<Vector3<f64>>>,
    pub body: Vec<usize>,
    pub surface: Vec<Vector3<f64>>,
    pub scaffold: MotionScaffold,
}

/// Center of the synthetic room; all scene content sits around it.
const CENTER: Vector3<f64> = Vector3::new(0.0, 0.0, 6.0);
/// Radius of the spherical shell enclosing camera and scene; depth maps fall
/// back to the shell wherever no tracked point covers a pixel.
const SHELL_RADIUS: f64 = 6.0;

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Standard normal via Box-Muller; consumes exactly two uniforms.
fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn look_at(position: Vector3<f64>, target: Vector3<f64>) -> RigidTransform {
    let forward = (target - position).normalize();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let right = down.cross(&forward).normalize();
    let down_cam = forward.cross(&right);
    let m = Matrix3::from_columns(&[right, down_cam, forward]);
    RigidTransform {
        rotation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m)),
        translation: position,
    }
}

fn camera_path(spec: &SceneSpec) -> CameraModel {
    let t_count = spec.frames;
    let mut poses = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let u = t as f64 / (t_count - 1) as f64;
        let alpha = spec.orbit_sweep * (u - 0.5);
        let bob = 0.18 * (2.3 * alpha + 0.4).sin();
        let p = CENTER
            + Vector3::new(
                spec.orbit_radius * alpha.sin(),
                bob,
                -spec.orbit_radius * alpha.cos(),
            );
        poses.push(look_at(p, CENTER));
    }
    CameraModel::new(
        spec.focal,
        spec.focal,
        spec.width as f64 / 2.0,
        spec.height as f64 / 2.0,
        poses,
    )
}

/// Rigid motion of one cluster: world pose of the cluster frame per time.
#[derive(Clone)]
struct ClusterMotion {
    frames: Vec<RigidTransform>,
}

impl ClusterMotion {
    fn still() -> Self {
        Self { frames: Vec::new() }
    }

    fn at(&self, t: usize) -> RigidTransform {
        if self.frames.is_empty() {
            RigidTransform::identity()
        } else {
            self.frames[t]
        }
    }

    fn point(&self, local: &Vector3<f64>, t: usize) -> Vector3<f64> {
        self.at(t).apply(local)
    }
}

/// Geometry of one scene family: rigid clusters (0 = static world, with
/// identity motion), a sampler of surface points per cluster, the mixture of
/// clusters that tracks are drawn from, and the ground-truth node layout.
struct SceneContent {
    motions: Vec<ClusterMotion>,
    samplers: Vec<SamplerKind>,
    /// (cluster, sampler, weight) mixture used when drawing tracks.
    mixture: Vec<(usize, usize, f64)>,
    /// (cluster, local position, radius) of each ground-truth node.
    nodes: Vec<(usize, Vector3<f64>, f64)>,
    knn: usize,
}

enum SamplerKind {
    /// Points on the enclosing shell, inside a forward cone.
    Shell,
    /// Uniform in an axis-aligned local box.
    Box(Vector3<f64>, Vector3<f64>),
}

impl SamplerKind {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        match self {
            SamplerKind::Shell => {
                let d = Vector3::new(
                    rng.gen_range(-0.36..0.36),
                    rng.gen_range(-0.26..0.26),
                    1.0,
                )
                .normalize();
                CENTER + SHELL_RADIUS * d
            }
            SamplerKind::Box(c, half) => {
                Vector3::new(
                    c.x + rng.gen_range(-half.x..half.x),
                    c.y + rng.gen_range(-half.y..half.y),
                    c.z + rng.gen_range(-half.z..half.z),
                )
            }
        }
    }
}

fn grid3(center: Vector3<f64>, half: Vector3<f64>) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(8);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                out.push(center + Vector3::new(sx * half.x, sy * half.y, sz * half.z));
            }
        }
    }
    out
}

fn scene_content(spec: &SceneSpec) -> SceneContent {
    let t_count = spec.frames;
    let u_of = |t: usize| t as f64 / (t_count - 1) as f64;
    match spec.kind {
        SceneKind::RigidOrbit => {
            let desk = SamplerKind::Box(CENTER, Vector3::new(0.7, 0.5, 0.6));
            let nodes = grid3(CENTER, Vector3::new(0.4, 0.4, 0.4))
                .into_iter()
                .map(|p| (0, p, 0.08))
                .collect();
            SceneContent {
                motions: vec![ClusterMotion::still()],
                samplers: vec![SamplerKind::Shell, desk],
                mixture: vec![(0, 0, 0.55), (0, 1, 0.45)],
                nodes,
                knn: 3,
            }
        }
        SceneKind::ArticulatedArm => {
            let hinge = CENTER + Vector3::new(0.0, 0.25, -0.45);
            let axis = Vector3::z_axis();
            let frames = (0..t_count)
                .map(|t| {
                    let phi = 0.9 * (1.5 * std::f64::consts::PI * u_of(t) - 0.4).sin();
                    RigidTransform {
                        rotation: UnitQuaternion::from_axis_angle(&axis, phi),
                        translation: hinge,
                    }
                })
                .collect();
            let mut nodes = Vec::new();
            for l in [0.45, 0.65, 0.85, 1.05] {
                for j in [-0.06, 0.06] {
                    nodes.push((1, Vector3::new(l, j, 0.0), 0.05));
                }
            }
            SceneContent {
                motions: vec![ClusterMotion::still(), ClusterMotion { frames }],
                samplers: vec![
                    SamplerKind::Shell,
                    SamplerKind::Box(
                        Vector3::new(0.75, 0.0, 0.0),
                        Vector3::new(0.35, 0.12, 0.12),
                    ),
                ],
                mixture: vec![(0, 0, 0.5), (1, 1, 0.5)],
                nodes,
                knn: 3,
            }
        }
        SceneKind::BendingSheet => {
            let slats = 4;
            let mut motions = vec![ClusterMotion::still()];
            let mut nodes = Vec::new();
            let axis = Vector3::x_axis();
            for j in 0..slats {
                let hinge = CENTER + Vector3::new(0.0, -0.9 + 0.5 * j as f64, 0.6);
                let frames = (0..t_count)
                    .map(|t| {
                        let phi = 0.35
                            * (3.0 * std::f64::consts::PI * u_of(t) - 0.9 * j as f64).sin();
                        RigidTransform {
                            rotation: UnitQuaternion::from_axis_angle(&axis, phi),
                            translation: hinge,
                        }
                    })
                    .collect();
                motions.push(ClusterMotion { frames });
                for i in 0..9 {
                    let x = -1.0 + 0.25 * i as f64;
                    for o in [0.15, 0.33] {
                        nodes.push((1 + j, Vector3::new(x, o, 0.0), 0.05));
                    }
                }
            }
            let samplers = vec![
                SamplerKind::Shell,
                SamplerKind::Box(
                    Vector3::new(0.0, 0.24, 0.0),
                    Vector3::new(1.1, 0.12, 1e-9),
                ),
            ];
            let mut mixture = vec![(0, 0, 0.4)];
            for j in 0..slats {
                mixture.push((1 + j, 1, 0.6 / slats as f64));
            }
            SceneContent { motions, samplers, mixture, nodes, knn: 3 }
        }
        SceneKind::TwoBody => {
            let a0 = CENTER + Vector3::new(-0.85, 0.1, 0.15);
            let va = Vector3::new(-0.010, 0.007, 0.012);
            let b0 = CENTER + Vector3::new(0.85, -0.35, 0.22);
            let vb = Vector3::new(0.010, 0.009, -0.008);
            let ya = Vector3::y_axis();
            let za = Vector3::z_axis();
            let frames_a = (0..t_count)
                .map(|t| RigidTransform {
                    rotation: UnitQuaternion::from_axis_angle(&ya, 0.055 * t as f64),
                    translation: a0 + va * t as f64,
                })
                .collect();
            let frames_b = (0..t_count)
                .map(|t| RigidTransform {
                    rotation: UnitQuaternion::from_axis_angle(&za, 0.07 * t as f64),
                    translation: b0 + vb * t as f64,
                })
                .collect();
            let mut nodes: Vec<(usize, Vector3<f64>, f64)> =
                grid3(Vector3::zeros(), Vector3::new(0.2, 0.2, 0.2))
                    .into_iter()
                    .map(|p| (1, p, 0.08))
                    .collect();
            nodes.extend(
                grid3(Vector3::zeros(), Vector3::new(0.14, 0.14, 0.14))
                    .into_iter()
                    .map(|p| (2, p, 0.05)),
            );
            SceneContent {
                motions: vec![
                    ClusterMotion::still(),
                    ClusterMotion { frames: frames_a },
                    ClusterMotion { frames: frames_b },
                ],
                samplers: vec![
                    SamplerKind::Shell,
                    SamplerKind::Box(Vector3::zeros(), Vector3::new(0.32, 0.28, 0.32)),
                    SamplerKind::Box(Vector3::zeros(), Vector3::new(0.26, 0.20, 0.20)),
                ],
                mixture: vec![(0, 0, 0.4), (1, 1, 0.3), (2, 2, 0.3)],
                nodes,
                knn: 3,
            }
        }
    }
}

fn draw_mixture(content: &SceneContent, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let total: f64 = content.mixture.iter().map(|(_, _, w)| w).sum();
    let mut x = rng.gen::<f64>() * total;
    for &(cluster, sampler, w) in &content.mixture {
        x -= w;
        if x <= 0.0 {
            return (cluster, sampler);
        }
    }
    let &(cluster, sampler, _) = content.mixture.last().unwrap();
    (cluster, sampler)
}

struct Placed {
    traj: Vec<Vector3<f64>>,
    cluster: usize,
    proj: Vec<Vector2<f64>>,
    geo_vis: Vec<bool>,
}

fn place_track(
    content: &SceneContent,
    cam: &CameraModel,
    spec: &SceneSpec,
    claimed: &mut [HashSet<(i64, i64)>],
    rng: &mut ChaCha8Rng,
) -> Option<Placed> {
    let t_count = spec.frames;
    let (cluster, sampler) = draw_mixture(content, rng);
    let local = content.samplers[sampler].draw(rng);
    let motion = &content.motions[cluster];
    let is_static = cluster == 0;

    let mut traj = Vec::with_capacity(t_count);
    let mut proj = Vec::with_capacity(t_count);
    let mut geo_vis = Vec::with_capacity(t_count);
    let mut pixels: Vec<Option<(i64, i64)>> = Vec::with_capacity(t_count);
    let mut visible = 0usize;
    let mut last = Vector2::new(0.0, 0.0);
    for t in 0..t_count {
        let x = if is_static { local } else { motion.point(&local, t) };
        let c = cam.poses[t].inverse().apply(&x);
        let (p, vis) = if c.z > 0.5 {
            let p = Vector2::new(
                cam.fx * c.x / c.z + cam.cx,
                cam.fy * c.y / c.z + cam.cy,
            );
            let inside = p.x >= 0.0
                && p.x <= (spec.width - 1) as f64
                && p.y >= 0.0
                && p.y <= (spec.height - 1) as f64;
            (p, inside)
        } else {
            (last, false)
        };
        last = p;
        traj.push(x);
        proj.push(p);
        geo_vis.push(vis);
        pixels.push(if vis {
            Some((p.x.round() as i64, p.y.round() as i64))
        } else {
            None
        });
        if vis {
            visible += 1;
        }
    }

    let min_visible = if is_static {
        (0.7 * t_count as f64).ceil() as usize
    } else {
        ((0.5 * t_count as f64).ceil() as usize).max(2)
    };
    if visible < min_visible {
        return None;
    }
    for (t, px) in pixels.iter().enumerate() {
        if let Some(px) = px {
            if claimed[t].contains(px) {
                return None;
            }
        }
    }
    for (t, px) in pixels.iter().enumerate() {
        if let Some(px) = px {
            claimed[t].insert(*px);
        }
    }
    Some(Placed { traj, cluster, proj, geo_vis })
}

fn shell_depth_map(cam: &CameraModel, spec: &SceneSpec, t: usize) -> Vec<f64> {
    let mut map = vec![0.0; spec.width * spec.height];
    let pose = &cam.poses[t];
    let oc = pose.translation - CENTER;
    let q = oc.dot(&oc) - SHELL_RADIUS * SHELL_RADIUS;
    for y in 0..spec.height {
        for x in 0..spec.width {
            let v = Vector3::new(
                (x as f64 - cam.cx) / cam.fx,
                (y as f64 - cam.cy) / cam.fy,
                1.0,
            );
            let w = pose.rotation * v;
            let a = w.dot(&w);
            let b = w.dot(&oc);
            // The camera stays inside the shell, so q < 0 and the forward
            // intersection always exists.
            let s = (-b + (b * b - a * q).sqrt()) / a;
            map[y * spec.width + x] = s;
        }
    }
    map
}

fn build_gt_scaffold(
    content: &SceneContent,
    t_count: usize,
) -> Result<(MotionScaffold, Vec<usize>), SynthError> {
    let mut nodes = Vec::with_capacity(content.nodes.len());
    let mut node_body = Vec::with_capacity(content.nodes.len());
    for (cluster, local, radius) in &content.nodes {
        let motion = &content.motions[*cluster];
        let transforms: Vec<RigidTransform> = (0..t_count)
            .map(|t| {
                let pose = motion.at(t);
                if *cluster == 0 {
                    RigidTransform::from_translation(*local)
                } else {
                    RigidTransform {
                        rotation: pose.rotation,
                        translation: pose.apply(local),
                    }
                }
            })
            .collect();
        nodes.push(ScaffoldNode { transforms, radius: *radius });
        node_body.push(*cluster);
    }
    let mut scaffold = MotionScaffold::new(nodes);
    scaffold.build_topology(content.knn)?;
    for (n, neighbors) in scaffold.topology.iter().enumerate() {
        for &m in neighbors {
            assert_eq!(
                node_body[n], node_body[m],
                "scene layout error: scaffold topology bridges rigid clusters {} and {}",
                node_body[n], node_body[m]
            );
        }
    }
    scaffold.build_pyramid(2, 0.5, content.knn);
    scaffold.build_anchor_index();
    Ok((scaffold, node_body))
}

/// Construct a scene entirely in memory. The returned struct holds both the
/// noisy dataset (exactly what [`write_scene`] persists) and the exact
/// ground truth.
pub fn build_scene(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    spec.validate()?;
    let t_count = spec.frames;
    let cam = camera_path(spec);
    let content = scene_content(spec);

    let mut rng_geo = stream(spec.seed, 1);
    let mut claimed: Vec<HashSet<(i64, i64)>> = vec![HashSet::new(); t_count];
    let mut placed: Vec<Placed> = Vec::with_capacity(spec.track_count);
    let mut attempts = 0usize;
    let cap = 500 * spec.track_count;
    while placed.len() < spec.track_count && attempts < cap {
        attempts += 1;
        if let Some(p) = place_track(&content, &cam, spec, &mut claimed, &mut rng_geo) {
            placed.push(p);
        }
    }
    if placed.len() < 8 {
        return Err(SynthError::BadSpec(format!(
            "could only place {} of {} tracks; scene too crowded for {}x{}",
            placed.len(),
            spec.track_count,
            spec.width,
            spec.height
        )));
    }

    // Occlusion: one Bernoulli draw per (track, frame), independent of the
    // geometry stream so flag counts are exactly comparable across rates.
    let n = placed.len();
    let mut final_vis: Vec<Vec<bool>> = placed.iter().map(|p| p.geo_vis.clone()).collect();
    if spec.occlusion > 0.0 {
        let mut rng_occ = stream(spec.seed, 2);
        for vis in final_vis.iter_mut() {
            for v in vis.iter_mut() {
                let hit = rng_occ.gen::<f64>() < spec.occlusion;
                if hit {
                    *v = false;
                }
            }
        }
        // Keep every track observable: restore the earliest occluded entries
        // until at least two geometrically visible frames survive.
        for (i, vis) in final_vis.iter_mut().enumerate() {
            let mut have = vis.iter().filter(|v| **v).count();
            for t in 0..t_count {
                if have >= 2 {
                    break;
                }
                if placed[i].geo_vis[t] && !vis[t] {
                    vis[t] = true;
                    have += 1;
                }
            }
        }
    }

    // Track noise: two uniforms per entry whether used or not, so the
    // noise stream does not depend on visibility patterns.
    let mut rng_trk = stream(spec.seed, 3);
    let mut tracks = Vec::with_capacity(n);
    let mut clean_tracks = Vec::with_capacity(n);
    for (i, p) in placed.iter().enumerate() {
        let mut noisy = Vec::with_capacity(t_count);
        for t in 0..t_count {
            let nx = randn(&mut rng_trk);
            let ny = randn(&mut rng_trk);
            let mut q = p.proj[t];
            if final_vis[i][t] && spec.track_noise > 0.0 {
                q.x = (q.x + spec.track_noise * nx).clamp(0.0, (spec.width - 1) as f64);
                q.y = (q.y + spec.track_noise * ny).clamp(0.0, (spec.height - 1) as f64);
            }
            noisy.push(q);
        }
        tracks.push(Tracklet2D { points: noisy, visibility: final_vis[i].clone() });
        clean_tracks.push(Tracklet2D {
            points: p.proj.clone(),
            visibility: p.geo_vis.clone(),
        });
    }

    // Depth: analytic shell everywhere, then the exact camera-space z of
    // each tracked point at its rounded pixel. Placement guarantees those
    // pixels are distinct per frame.
    let mut maps: Vec<Vec<f64>> = (0..t_count).map(|t| shell_depth_map(&cam, spec, t)).collect();
    for p in &placed {
        for t in 0..t_count {
            if p.geo_vis[t] {
                let px = p.proj[t].x.round() as usize;
                let py = p.proj[t].y.round() as usize;
                let z = cam.poses[t].inverse().apply(&p.traj[t]).z;
                maps[t][py * spec.width + px] = z;
            }
        }
    }
    if spec.depth_noise > 0.0 {
        let mut rng_dep = stream(spec.seed, 4);
        for map in maps.iter_mut() {
            for d in map.iter_mut() {
                let f = (1.0 + spec.depth_noise * randn(&mut rng_dep)).max(0.1);
                *d *= f;
            }
        }
    }
    let depths = DepthStack::new(spec.width, spec.height, maps);

    let (gt_scaffold, node_body) = build_gt_scaffold(&content, t_count)?;
    let mut surface: Vec<Vector3<f64>> = placed.iter().map(|p| p.traj[0]).collect();
    surface.extend(gt_scaffold.nodes.iter().map(|n| n.translation(0)));

    Ok(SyntheticScene {
        spec: spec.clone(),
        camera: cam,
        tracks,
        clean_tracks,
        tracks_3d: placed.iter().map(|p| p.traj.clone()).collect(),
        body: placed.iter().map(|p| p.cluster).collect(),
        depths,
        gt_scaffold,
        node_body,
        surface,
    })
}

const TRACKS3D_MAGIC: &[u8; 4] = b"TK3D";
const SURFACE_MAGIC: &[u8; 4] = b"SRF1";

fn write_tracks3d(
    path: &Path,
    tracks_3d: &[Vec<Vector3<f64>>],
    body: &[usize],
) -> Result<(), SynthError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(TRACKS3D_MAGIC)?;
    let t_count = tracks_3d.first().map_or(0, |t| t.len());
    w.write_u32::<LittleEndian>(tracks_3d.len() as u32)?;
    w.write_u32::<LittleEndian>(t_count as u32)?;
    for traj in tracks_3d {
        for p in traj {
            for c in 0..3 {
                w.write_f64::<LittleEndian>(p[c])?;
            }
        }
    }
    for &b in body {
        w.write_u32::<LittleEndian>(b as u32)?;
    }
    w.flush()?;
    Ok(())
}

fn read_tracks3d(path: &Path) -> Result<(Vec<Vec<Vector3<f64>>>, Vec<usize>), SynthError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRACKS3D_MAGIC {
        return Err(SynthError::Format(format!("bad 3D track magic {magic:?}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let t_count = r.read_u32::<LittleEndian>()? as usize;
    let mut tracks = Vec::with_capacity(n);
    for _ in 0..n {
        let mut traj = Vec::with_capacity(t_count);
        for _ in 0..t_count {
            let x = r.read_f64::<LittleEndian>()?;
            let y = r.read_f64::<LittleEndian>()?;
            let z = r.read_f64::<LittleEndian>()?;
            traj.push(Vector3::new(x, y, z));
        }
        tracks.push(traj);
    }
    let mut body = Vec::with_capacity(n);
    for _ in 0..n {
        body.push(r.read_u32::<LittleEndian>()? as usize);
    }
    Ok((tracks, body))
}

fn write_surface(path: &Path, surface: &[Vector3<f64>]) -> Result<(), SynthError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(SURFACE_MAGIC)?;
    w.write_u32::<LittleEndian>(surface.len() as u32)?;
    for p in surface {
        for c in 0..3 {
            w.write_f64::<LittleEndian>(p[c])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_surface(path: &Path) -> Result<Vec<Vector3<f64>>, SynthError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SURFACE_MAGIC {
        return Err(SynthError::Format(format!("bad surface magic {magic:?}")));
    }
    let m = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let x = r.read_f64::<LittleEndian>()?;
        let y = r.read_f64::<LittleEndian>()?;
        let z = r.read_f64::<LittleEndian>()?;
        out.push(Vector3::new(x, y, z));
    }
    Ok(out)
}

/// Persist a scene as a dataset directory: the loader layout at the root
/// (intrinsics-only `camera.json`, per-frame depth, noisy tracks) plus the
/// exact ground truth under `gt/`.
pub fn write_scene(scene: &SyntheticScene, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir.join("depth"))?;
    std::fs::create_dir_all(dir.join("gt"))?;

    CameraFile {
        fx: scene.camera.fx,
        fy: scene.camera.fy,
        cx: scene.camera.cx,
        cy: scene.camera.cy,
        poses: None,
        depth_scales: None,
        pixel_corrections: None,
    }
    .write(&dir.join("camera.json"))?;
    for t in 0..scene.depths.frame_count() {
        write_pfm(
            &depth_path(dir, t),
            scene.depths.width,
            scene.depths.height,
            &scene.depths.maps[t],
        )?;
    }
    write_tracks(&dir.join("tracks.bin"), &scene.tracks)?;

    let gt = dir.join("gt");
    scene.camera.to_file(None).write(&gt.join("camera.json"))?;
    write_tracks(&gt.join("tracks.bin"), &scene.clean_tracks)?;
    write_tracks3d(&gt.join("tracks3d.bin"), &scene.tracks_3d, &scene.body)?;
    write_surface(&gt.join("surface.bin"), &scene.surface)?;
    scene.gt_scaffold.write_msca(&gt.join("scaffold.msca"))?;
    Ok(())
}

/// Build and persist in one call.
pub fn generate(spec: &SceneSpec, dir: &Path) -> Result<SyntheticScene, SynthError> {
    let scene = build_scene(spec)?;
    write_scene(&scene, dir)?;
    Ok(scene)
}

/// Parse a TOML scene description; omitted keys fall back to the preset of
/// the chosen kind.
pub fn read_spec(path: &Path) -> Result<SceneSpec, SynthError> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct SpecFile {
        kind: Option<SceneKind>,
        frames: Option<usize>,
        width: Option<usize>,
        height: Option<usize>,
        focal: Option<f64>,
        track_count: Option<usize>,
        orbit_radius: Option<f64>,
        orbit_sweep: Option<f64>,
        depth_noise: Option<f64>,
        track_noise: Option<f64>,
        occlusion: Option<f64>,
        seed: Option<u64>,
    }

    let text = std::fs::read_to_string(path)?;
    let file: SpecFile =
        toml::from_str(&text).map_err(|e| SynthError::BadSpec(format!("{path:?}: {e}")))?;
    let mut spec = SceneSpec::preset(file.kind.unwrap_or(SceneKind::RigidOrbit));
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = file.$field { spec.$field = v; })*
        };
    }
    take!(
        frames, width, height, focal, track_count, orbit_radius, orbit_sweep, depth_noise,
        track_noise, occlusion, seed
    );
    spec.validate()?;
    Ok(spec)
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth, SynthError> {
    let gt = dir.join("gt");
    let camera = CameraModel::from_file(&CameraFile::read(&gt.join("camera.json"))?);
    let tracks = read_tracks(&gt.join("tracks.bin"))?;
    let (tracks_3d, body) = read_tracks3d(&gt.join("tracks3d.bin"))?;
    let surface = read_surface(&gt.join("surface.bin"))?;
    let scaffold = MotionScaffold::read_msca(&gt.join("scaffold.msca"))?;
    Ok(GroundTruth { camera, tracks, tracks_3d, body, surface, scaffold })
}
