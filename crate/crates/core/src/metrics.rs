//! Trajectory and correspondence metrics for comparing a reconstruction
//! against ground truth.
//!
//! Camera error uses the usual gauge-free protocol: translations are aligned
//! by a closed-form similarity (rotation, translation, uniform scale) before
//! the RMSE, and relative-pose errors apply the fitted scale to the
//! prediction's relative translations.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::priors::Tracklet2D;
use crate::se3::RigidTransform;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric input mismatch: {0}")]
    Mismatch(String),
    #[error("metric undefined: {0}")]
    Empty(String),
}

/// Similarity transform `x ↦ scale · rotation · x + translation`.
#[derive(Clone, Copy, Debug)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Least-squares similarity aligning `src` onto `dst` (Umeyama's closed
/// form). Degenerate inputs (fewer than 3 points, or zero spread) fall back
/// to a pure translation between the means.
pub fn align_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Similarity {
    assert_eq!(src.len(), dst.len(), "point sets must pair up");
    let n = src.len();
    if n == 0 {
        return Similarity::identity();
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().fold(Vector3::zeros(), |a, b| a + b) * inv_n;
    let mu_d = dst.iter().fold(Vector3::zeros(), |a, b| a + b) * inv_n;
    let mut var_s = 0.0;
    let mut cov = Matrix3::zeros();
    for (x, y) in src.iter().zip(dst) {
        let xc = x - mu_s;
        let yc = y - mu_d;
        var_s += xc.dot(&xc) * inv_n;
        cov += (yc * xc.transpose()) * inv_n;
    }
    if n < 3 || var_s < 1e-18 {
        return Similarity {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: mu_d - mu_s,
        };
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let trace = svd.singular_values.dot(&s_diag);
    let scale = trace / var_s;
    let translation = mu_d - scale * (rotation * mu_s);
    Similarity { scale, rotation, translation }
}

/// Gauge-free camera trajectory errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraErrors {
    /// RMSE of camera centers after similarity alignment, scene units.
    pub ate: f64,
    /// RMSE of consecutive relative-translation errors, scene units.
    pub rpe_trans: f64,
    /// RMSE of consecutive relative-rotation errors, degrees.
    pub rpe_rot_deg: f64,
}

pub fn eval_camera(pred: &CameraModel, gt: &CameraModel) -> Result<CameraErrors, MetricsError> {
    let t_count = gt.frame_count();
    if pred.frame_count() != t_count {
        return Err(MetricsError::Mismatch(format!(
            "predicted {} frames vs ground truth {}",
            pred.frame_count(),
            t_count
        )));
    }
    if t_count < 2 {
        return Err(MetricsError::Empty(format!(
            "need at least 2 frames, got {t_count}"
        )));
    }
    let centers_pred: Vec<Vector3<f64>> = pred.poses.iter().map(|p| p.translation).collect();
    let centers_gt: Vec<Vector3<f64>> = gt.poses.iter().map(|p| p.translation).collect();
    let sim = align_similarity(&centers_pred, &centers_gt);
    let mut sq = 0.0;
    for (p, g) in centers_pred.iter().zip(&centers_gt) {
        sq += (sim.apply(p) - g).norm_squared();
    }
    let ate = (sq / t_count as f64).sqrt();

    let rel = |poses: &[RigidTransform], t: usize| poses[t].inverse().compose(&poses[t + 1]);
    let mut sq_t = 0.0;
    let mut sq_r = 0.0;
    for t in 0..t_count - 1 {
        let dp = rel(&pred.poses, t);
        let dg = rel(&gt.poses, t);
        sq_t += (sim.scale * dp.translation - dg.translation).norm_squared();
        let ang = dp.rotation.angle_to(&dg.rotation);
        sq_r += ang * ang;
    }
    let pairs = (t_count - 1) as f64;
    Ok(CameraErrors {
        ate,
        rpe_trans: (sq_t / pairs).sqrt(),
        rpe_rot_deg: (sq_r / pairs).sqrt().to_degrees(),
    })
}

/// Track-correspondence score: each track is anchored at the ground truth's
/// first visible frame and the prediction is transferred to every other
/// frame with visible ground truth; the score is the fraction of transfers
/// landing within `tau` pixels.
pub fn eval_pck_t(
    pred: &[Tracklet2D],
    gt: &[Tracklet2D],
    tau: f64,
) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Mismatch(format!(
            "{} predicted tracks vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(MetricsError::Empty(format!("threshold {tau} must be positive")));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(MetricsError::Mismatch(format!(
                "track length {} vs {}",
                p.len(),
                g.len()
            )));
        }
        let Some(anchor) = g.first_visible() else {
            continue;
        };
        for t in 0..g.len() {
            if t == anchor || !g.visible(t) {
                continue;
            }
            total += 1;
            if (p.points[t] - g.points[t]).norm() <= tau {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(MetricsError::Empty(
            "no transferable track entries".to_string(),
        ));
    }
    Ok(hits as f64 / total as f64)
}

/// The conventional correspondence threshold: 0.05 of the image diagonal.
pub fn pck_threshold(width: usize, height: usize) -> f64 {
    0.05 * ((width * width + height * height) as f64).sqrt()
}

/// RMSE between paired 3D trajectories, counting only frames marked valid
/// (pass `None` to count every frame).
pub fn trajectory_rmse(
    pred: &[Vec<Vector3<f64>>],
    gt: &[Vec<Vector3<f64>>],
    valid: Option<&[Vec<bool>]>,
) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Mismatch(format!(
            "{} predicted trajectories vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(MetricsError::Mismatch(format!(
                "trajectory {i}: {} frames vs {}",
                p.len(),
                g.len()
            )));
        }
        for t in 0..p.len() {
            if let Some(v) = valid {
                if !v[i][t] {
                    continue;
                }
            }
            sq += (p[t] - g[t]).norm_squared();
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::Empty("no valid trajectory entries".to_string()));
    }
    Ok((sq / count as f64).sqrt())
}

/// Symmetric chamfer distance: average of the two directed mean
/// nearest-neighbor distances.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty(format!(
            "chamfer needs nonempty sets, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let directed = |from: &[Vector3<f64>], to: &[Vector3<f64>]| -> f64 {
        let mut acc = 0.0;
        for p in from {
            let mut best = f64::INFINITY;
            for q in to {
                best = best.min((p - q).norm_squared());
            }
            acc += best.sqrt();
        }
        acc / from.len() as f64
    };
    Ok(0.5 * (directed(a, b) + directed(b, a)))
}

/// The end-to-end evaluation summary the pipeline writes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ate: f64,
    pub rpe_trans: f64,
    pub rpe_rot_deg: f64,
    /// Correspondence score of the reconstruction-induced tracks.
    pub pck_t: f64,
    /// Correspondence score of the raw input tracks, for reference.
    pub pck_t_input: f64,
    pub trajectory_rmse_3d: f64,
    pub chamfer: f64,
}

impl EvalReport {
    pub fn check(&self) -> Result<(), MetricsError> {
        let fields = [
            ("ate", self.ate),
            ("rpe_trans", self.rpe_trans),
            ("rpe_rot_deg", self.rpe_rot_deg),
            ("pck_t", self.pck_t),
            ("pck_t_input", self.pck_t_input),
            ("trajectory_rmse_3d", self.trajectory_rmse_3d),
            ("chamfer", self.chamfer),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MetricsError::Empty(format!(
                    "report field {name} = {v} must be finite and nonnegative"
                )));
            }
        }
        for (name, v) in [("pck_t", self.pck_t), ("pck_t_input", self.pck_t_input)] {
            if v > 1.0 {
                return Err(MetricsError::Empty(format!(
                    "report field {name} = {v} above 1"
                )));
            }
        }
        Ok(())
    }

    /// Key/value text form; formatting is deterministic so identical runs
    /// produce identical bytes.
    pub fn to_text(&self) -> String {
        format!(
            "ate: {:.9}\nrpe_trans: {:.9}\nrpe_rot_deg: {:.9}\npck_t: {:.9}\npck_t_input: {:.9}\ntrajectory_rmse_3d: {:.9}\nchamfer: {:.9}\n",
            self.ate,
            self.rpe_trans,
            self.rpe_rot_deg,
            self.pck_t,
            self.pck_t_input,
            self.trajectory_rmse_3d,
            self.chamfer
        )
    }
}

/// Convenience for tests comparing 2D points.
pub fn px(x: f64, y: f64) -> Vector2<f64> {
    Vector2::new(x, y)
}
