//! Helpers shared by the unit tests.

use crate::camera::CameraModel;
use crate::priors::{DepthStack, Tracklet2D};
use crate::se3::RigidTransform;
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn random_rigid(rng: &mut impl Rng) -> RigidTransform {
    let q = Quaternion::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    RigidTransform {
        rotation: UnitQuaternion::from_quaternion(q),
        translation: Vector3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        ),
    }
}

pub struct CameraRig {
    pub camera: CameraModel,
    pub points: Vec<Vector3<f64>>,
    pub tracks: Vec<Tracklet2D>,
    pub depths: DepthStack,
}

/// Static scene watched by a moving pinhole camera, with depth maps that
/// carry the exact camera-frame z at every rounded track pixel. Tracks are
/// rejection-sampled so no two occupy neighboring pixels in any frame,
/// which keeps depth lookups collision-free.
pub fn camera_rig(seed: u64, t_count: usize, n_tracks: usize, pure_rotation: bool) -> CameraRig {
    let (w, h) = (64usize, 48usize);
    let (fx, fy, cx, cy) = (60.0, 60.0, 32.0, 24.0);
    let mut poses = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let s = t as f64;
        let axis = Vector3::new(0.2, 1.0, 0.1).normalize();
        let rotation = UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            0.015 * s,
        );
        let translation = if pure_rotation {
            Vector3::zeros()
        } else {
            Vector3::new(0.06 * s, 0.012 * s * if t % 2 == 0 { 1.0 } else { -1.0 }, 0.03 * s)
        };
        poses.push(RigidTransform { rotation, translation });
    }
    let camera = CameraModel::new(fx, fy, cx, cy, poses);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_visible = (t_count * 7).div_ceil(10).max(2);
    let mut points = Vec::new();
    let mut tracks: Vec<Tracklet2D> = Vec::new();
    let mut attempts = 0;
    while points.len() < n_tracks && attempts < 20_000 {
        attempts += 1;
        let p = Vector3::new(
            rng.gen_range(-1.2..1.2),
            rng.gen_range(-0.9..0.9),
            rng.gen_range(4.0..8.0),
        );
        let mut pix = vec![Vector2::zeros(); t_count];
        let mut vis = vec![false; t_count];
        for t in 0..t_count {
            let cam_pt = camera.poses[t].inverse().apply(&p);
            if cam_pt.z <= 0.5 {
                continue;
            }
            let u = fx * cam_pt.x / cam_pt.z + cx;
            let v = fy * cam_pt.y / cam_pt.z + cy;
            if u >= 0.0 && u < (w as f64 - 0.5) && v >= 0.0 && v < (h as f64 - 0.5) {
                pix[t] = Vector2::new(u, v);
                vis[t] = true;
            }
        }
        if vis.iter().filter(|v| **v).count() < min_visible {
            continue;
        }
        let collides = tracks.iter().any(|other| {
            (0..t_count).any(|t| {
                vis[t]
                    && other.visibility[t]
                    && (pix[t].x - other.points[t].x).abs() < 1.6
                    && (pix[t].y - other.points[t].y).abs() < 1.6
            })
        });
        if collides {
            continue;
        }
        points.push(p);
        tracks.push(Tracklet2D {
            points: pix,
            visibility: vis,
        });
    }
    assert_eq!(points.len(), n_tracks, "rig sampling starved");

    let mut maps = vec![vec![10.0; w * h]; t_count];
    for (i, p) in points.iter().enumerate() {
        for t in 0..t_count {
            if !tracks[i].visibility[t] {
                continue;
            }
            let z = camera.poses[t].inverse().apply(p).z;
            let px = tracks[i].points[t].x.round() as usize;
            let py = tracks[i].points[t].y.round() as usize;
            maps[t][py * w + px] = z;
        }
    }
    let depths = DepthStack::new(w, h, maps);
    CameraRig {
        camera,
        points,
        tracks,
        depths,
    }
}
