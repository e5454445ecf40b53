//! End-to-end driver: tracklets and depth in, fused dynamic scene and an
//! evaluation report out. Every stage persists its artifact so interrupted
//! runs can resume, and reruns with the same inputs reproduce outputs byte
//! for byte.

use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{
    apply_depth_corrections, solve_bundle, CameraInit, CameraModel,
};
use crate::config::PipelineConfig;
use crate::fusion::{
    fuse_one, init_gaussians, init_static_gaussians, photometric_stage, read_m4d, write_m4d,
    DynGaussianSet, StaticGaussianSet,
};
use crate::lift::{geometric_optimize, init_scaffold, lift_all, node_visibility, LiftedTrajectory};
use crate::metrics::{
    align_similarity, chamfer, eval_camera, eval_pck_t, pck_threshold, trajectory_rmse, EvalReport,
};
use crate::priors::{
    default_static_threshold, epipolar_classify, load_priors, CameraFile, DepthStack, Priors,
    Tracklet2D,
};
use crate::scaffold::MotionScaffold;
use crate::synth;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("stage {stage} failed ({artifact}): {message}")]
    Stage {
        stage: &'static str,
        artifact: String,
        message: String,
    },
}

fn fail(stage: &'static str, artifact: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        artifact: artifact.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyFile {
    pub threshold: f64,
    pub static_ids: Vec<usize>,
    pub dynamic_ids: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NodesFile {
    /// Source tracklet index of each scaffold node, in node order.
    pub sources: Vec<usize>,
    pub visibility: Vec<Vec<bool>>,
}

#[derive(Debug)]
pub struct RunSummary {
    /// Stages that actually executed; resumed stages are absent.
    pub stages_run: Vec<&'static str>,
    pub report: Option<EvalReport>,
}

fn write_json<T: Serialize>(
    stage: &'static str,
    path: &Path,
    value: &T,
) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| fail(stage, path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| fail(stage, path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(
    stage: &'static str,
    path: &Path,
) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| fail(stage, path, e))?;
    serde_json::from_str(&text).map_err(|e| fail(stage, path, e))
}

/// Tracklet indices seeding scaffold nodes: the dynamic set, padded with an
/// evenly spaced static sample when the scene has too little (or no) dynamic
/// content to support the node neighborhood size.
pub fn node_sources(static_ids: &[usize], dynamic_ids: &[usize], knn: usize) -> Vec<usize> {
    let need = knn + 2;
    let mut ids = dynamic_ids.to_vec();
    if ids.len() >= need {
        return ids;
    }
    let want = need.max(8).min(dynamic_ids.len() + static_ids.len());
    let missing = want.saturating_sub(ids.len());
    if missing > 0 && !static_ids.is_empty() {
        let step = (static_ids.len() / missing).max(1);
        ids.extend(static_ids.iter().step_by(step).take(missing));
    }
    ids.sort_unstable();
    ids
}

/// Per-frame foreground masks: the rounded pixel of every visible dynamic
/// tracklet entry.
pub fn dynamic_masks(
    tracks: &[Tracklet2D],
    dynamic_ids: &[usize],
    depths: &DepthStack,
) -> Vec<Vec<bool>> {
    let (w, h) = (depths.width, depths.height);
    let t_count = tracks.first().map_or(0, |t| t.len());
    let mut masks = vec![vec![false; w * h]; t_count];
    for &i in dynamic_ids {
        for t in 0..t_count {
            if !tracks[i].visibility[t] {
                continue;
            }
            let (px, py) = depths.pixel_index(&tracks[i].points[t]);
            masks[t][py * w + px] = true;
        }
    }
    masks
}

struct Evaluation {
    report: EvalReport,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    data: &Path,
    priors: &Priors,
    camera: &CameraModel,
    static_ids: &[usize],
    set: &DynGaussianSet,
    stat: &StaticGaussianSet,
    scaffold: &MotionScaffold,
) -> Result<Evaluation, PipelineError> {
    let stage = "evaluate";
    let depths = &priors.depths;
    let gt_dir = data.join("gt");
    let gt = synth::read_ground_truth(data).map_err(|e| fail(stage, &gt_dir, e))?;
    let t_count = camera.frame_count();

    let cam_err = eval_camera(camera, &gt.camera).map_err(|e| fail(stage, &gt_dir, e))?;

    // Gauge bridge: similarity mapping solved camera centers onto the ground
    // truth path, applied to every predicted 3D point before comparison.
    let pred_centers: Vec<Vector3<f64>> = camera.poses.iter().map(|p| p.translation).collect();
    let gt_centers: Vec<Vector3<f64>> = gt.camera.poses.iter().map(|p| p.translation).collect();
    let sim = align_similarity(&pred_centers, &gt_centers);

    let is_static: Vec<bool> = {
        let mut v = vec![false; priors.tracklets.len()];
        for &i in static_ids {
            v[i] = true;
        }
        v
    };
    let gaussian_of_track: Vec<Option<usize>> = {
        let mut v = vec![None; priors.tracklets.len()];
        for (gi, g) in set.gaussians.iter().enumerate() {
            if let Some(ti) = g.track {
                if v[ti].is_none() {
                    v[ti] = Some(gi);
                }
            }
        }
        v
    };

    let mut pred_tracks: Vec<Tracklet2D> = Vec::with_capacity(priors.tracklets.len());
    let mut pred_3d: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(priors.tracklets.len());
    let mut valid_3d: Vec<Vec<bool>> = Vec::with_capacity(priors.tracklets.len());
    for (i, track) in priors.tracklets.iter().enumerate() {
        let trajectory: Option<Vec<Vector3<f64>>> = if is_static[i] {
            // Static model: one world point, fixed across time.
            lift_all(&priors.tracklets, &[i], camera, depths)
                .ok()
                .and_then(|l| l.first().map(static_point))
                .map(|p| vec![p; t_count])
        } else if let Some(gi) = gaussian_of_track[i] {
            (0..t_count)
                .map(|t| fuse_one(&set.gaussians[gi], scaffold, t).map(|p| p.center))
                .collect::<Result<Vec<_>, _>>()
                .ok()
        } else {
            lift_all(&priors.tracklets, &[i], camera, depths)
                .ok()
                .and_then(|l| l.first().map(|l| l.positions.clone()))
        };
        match trajectory {
            Some(points_3d) => {
                let points: Vec<Vector2<f64>> = points_3d
                    .iter()
                    .enumerate()
                    .map(|(t, x)| camera.project(x, t).unwrap_or(track.points[t]))
                    .collect();
                pred_tracks.push(Tracklet2D {
                    points,
                    visibility: vec![true; t_count],
                });
                pred_3d.push(points_3d.iter().map(|p| sim.apply(p)).collect());
                valid_3d.push(vec![true; t_count]);
            }
            None => {
                pred_tracks.push(track.clone());
                pred_3d.push(vec![Vector3::zeros(); t_count]);
                valid_3d.push(vec![false; t_count]);
            }
        }
    }

    let tau = pck_threshold(depths.width, depths.height);
    let pck_t = eval_pck_t(&pred_tracks, &gt.tracks, tau).map_err(|e| fail(stage, &gt_dir, e))?;
    let pck_t_input =
        eval_pck_t(&priors.tracklets, &gt.tracks, tau).map_err(|e| fail(stage, &gt_dir, e))?;
    let rmse_3d = trajectory_rmse(&pred_3d, &gt.tracks_3d, Some(&valid_3d))
        .map_err(|e| fail(stage, &gt_dir, e))?;

    let mut cloud: Vec<Vector3<f64>> = Vec::new();
    for g in &set.gaussians {
        if let Ok(p) = fuse_one(g, scaffold, 0) {
            cloud.push(sim.apply(&p.center));
        }
    }
    cloud.extend(stat.gaussians.iter().map(|g| sim.apply(&g.center)));
    let chamfer_3d = chamfer(&cloud, &gt.surface).map_err(|e| fail(stage, &gt_dir, e))?;

    let report = EvalReport {
        ate: cam_err.ate,
        rpe_trans: cam_err.rpe_trans,
        rpe_rot_deg: cam_err.rpe_rot_deg,
        pck_t,
        pck_t_input,
        trajectory_rmse_3d: rmse_3d,
        chamfer: chamfer_3d,
    };
    report.check().map_err(|e| fail(stage, &gt_dir, e))?;
    Ok(Evaluation { report })
}

fn static_point(l: &LiftedTrajectory) -> Vector3<f64> {
    let t0 = l.visibility.iter().position(|&v| v).unwrap_or(0);
    l.positions[t0]
}

fn log_path(cfg: &PipelineConfig, out: &Path, name: &str) -> Option<PathBuf> {
    cfg.log_convergence.then(|| out.join(name))
}

/// Runs every stage against the dataset in `data`, writing artifacts into
/// `out`. With `resume`, stages whose artifacts already exist are reloaded
/// instead of recomputed. Evaluation runs only when the dataset carries a
/// `gt/` directory.
pub fn run_pipeline(
    data: &Path,
    cfg: &PipelineConfig,
    out: &Path,
    resume: bool,
) -> Result<RunSummary, PipelineError> {
    cfg.validate()
        .map_err(|e| PipelineError::Usage(e.to_string()))?;
    std::fs::create_dir_all(out).map_err(|e| fail("setup", out, e))?;
    let mut stages_run = Vec::new();

    let mut priors = load_priors(data).map_err(|e| fail("load", data, e))?;
    let t_count = priors.depths.maps.len();
    if t_count < 2 {
        return Err(fail("load", data, "need at least two frames"));
    }

    // Split tracklets by whether a single moving camera explains them.
    let classify_path = out.join("classify.json");
    let split: ClassifyFile = if resume && classify_path.exists() {
        read_json("classify", &classify_path)?
    } else {
        let threshold = cfg
            .static_threshold
            .unwrap_or_else(|| default_static_threshold(priors.depths.height));
        let c = epipolar_classify(&priors.tracklets, threshold)
            .map_err(|e| fail("classify", &classify_path, e))?;
        let file = ClassifyFile {
            threshold,
            static_ids: c.static_ids,
            dynamic_ids: c.dynamic_ids,
        };
        write_json("classify", &classify_path, &file)?;
        stages_run.push("classify");
        file
    };

    // Bundle adjustment over the static set; corrected depths feed everything
    // downstream.
    let camera_path = out.join("camera_solved.json");
    let camera: CameraModel;
    if resume && camera_path.exists() {
        let file = CameraFile::read(&camera_path).map_err(|e| fail("camera", &camera_path, e))?;
        camera = CameraModel::from_file(&file);
        if camera.frame_count() != t_count {
            return Err(fail(
                "camera",
                &camera_path,
                format!(
                    "artifact has {} poses, dataset has {} frames",
                    camera.frame_count(),
                    t_count
                ),
            ));
        }
        apply_depth_corrections(&mut priors.depths, &file);
    } else {
        let init = match (&priors.camera_seed, cfg.init_focal) {
            (Some(seed), _) => CameraInit {
                fx: seed.fx,
                fy: seed.fy,
                cx: seed.cx,
                cy: seed.cy,
            },
            (None, Some(f)) => CameraInit::from_focal(f, &priors.depths),
            (None, None) => {
                return Err(PipelineError::Usage(
                    "dataset has no camera.json; provide an initial focal guess".into(),
                ))
            }
        };
        let mut ba_cfg = cfg.ba.to_config();
        ba_cfg.log = log_path(cfg, out, "camera_log.jsonl");
        let solution = solve_bundle(
            &priors.tracklets,
            &split.static_ids,
            &priors.depths,
            &init,
            &ba_cfg,
        )
        .map_err(|e| fail("camera", &camera_path, e))?;
        camera = solution.camera;
        priors.depths = solution.depths;
        let file = camera.to_file(Some(&priors.depths));
        file.write(&camera_path)
            .map_err(|e| fail("camera", &camera_path, e))?;
        stages_run.push("camera");
    }

    // Lift node seeds to 3D and optimize the scaffold against its rigidity
    // and smoothness terms.
    let scaffold_path = out.join("scaffold_geo.msca");
    let nodes_path = out.join("nodes.json");
    let mut scaffold: MotionScaffold;
    let visibility: Vec<Vec<bool>>;
    if resume && scaffold_path.exists() && nodes_path.exists() {
        scaffold =
            MotionScaffold::read_msca(&scaffold_path).map_err(|e| fail("scaffold", &scaffold_path, e))?;
        let nodes: NodesFile = read_json("scaffold", &nodes_path)?;
        visibility = nodes.visibility;
        if visibility.len() != scaffold.node_count() {
            return Err(fail(
                "scaffold",
                &nodes_path,
                format!(
                    "{} visibility rows for {} nodes",
                    visibility.len(),
                    scaffold.node_count()
                ),
            ));
        }
    } else {
        let sources = node_sources(&split.static_ids, &split.dynamic_ids, cfg.scaffold.knn);
        let mut lifted = Vec::new();
        for &i in &sources {
            match lift_all(&priors.tracklets, &[i], &camera, &priors.depths) {
                Ok(mut l) => lifted.append(&mut l),
                Err(_) => continue,
            }
        }
        let (s, kept) = init_scaffold(
            &lifted,
            cfg.scaffold.radius,
            cfg.scaffold.spacing,
            cfg.scaffold.knn,
        )
        .map_err(|e| fail("scaffold", &scaffold_path, e))?;
        scaffold = s;
        visibility = node_visibility(&lifted, &kept);
        let nodes = NodesFile {
            sources: kept.iter().map(|&i| lifted[i].source).collect(),
            visibility: visibility.clone(),
        };

        let mut geo_cfg = cfg.geo.to_config();
        geo_cfg.log = log_path(cfg, out, "scaffold_log.jsonl");
        geometric_optimize(&mut scaffold, &visibility, &geo_cfg)
            .map_err(|e| fail("scaffold", &scaffold_path, e))?;
        scaffold
            .write_msca(&scaffold_path)
            .map_err(|e| fail("scaffold", &scaffold_path, e))?;
        write_json("scaffold", &nodes_path, &nodes)?;
        stages_run.push("scaffold");
    }

    // Spawn Gaussians from corrected depth and tighten the scaffold against
    // the tracklet reprojections, growing or trimming nodes as coverage
    // demands.
    let scene_path = out.join("scene.m4d");
    let set: DynGaussianSet;
    let stat: StaticGaussianSet;
    if resume && scene_path.exists() {
        let (s, st, sc) = read_m4d(&scene_path).map_err(|e| fail("fuse", &scene_path, e))?;
        set = s;
        stat = st;
        scaffold = sc;
    } else {
        let masks = dynamic_masks(&priors.tracklets, &split.dynamic_ids, &priors.depths);
        let mut dyn_set = init_gaussians(
            &priors.depths,
            &camera,
            &masks,
            1,
            &scaffold,
            &priors.tracklets,
            &split.dynamic_ids,
            priors.rgb.as_deref(),
        )
        .map_err(|e| fail("fuse", &scene_path, e))?;
        stat = init_static_gaussians(
            &priors.depths,
            &camera,
            &masks,
            cfg.fusion.static_stride,
            0,
            priors.rgb.as_deref(),
        )
        .map_err(|e| fail("fuse", &scene_path, e))?;
        let mut photo_cfg = cfg.photo.to_config(&cfg.geo);
        photo_cfg.geo.log = log_path(cfg, out, "fuse_log.jsonl");
        photometric_stage(
            &mut dyn_set,
            &mut scaffold,
            &visibility,
            &priors.tracklets,
            &camera,
            &photo_cfg,
        )
        .map_err(|e| fail("fuse", &scene_path, e))?;
        set = dyn_set;
        write_m4d(&scene_path, &set, &stat, &scaffold)
            .map_err(|e| fail("fuse", &scene_path, e))?;
        stages_run.push("fuse");
    }

    // Score against ground truth when the dataset provides it.
    let report_path = out.join("report.json");
    let report = if !data.join("gt").exists() {
        None
    } else if resume && report_path.exists() {
        Some(read_json("evaluate", &report_path)?)
    } else {
        let ev = evaluate(
            data,
            &priors,
            &camera,
            &split.static_ids,
            &set,
            &stat,
            &scaffold,
        )?;
        write_json("evaluate", &report_path, &ev.report)?;
        std::fs::write(out.join("report.txt"), ev.report.to_text())
            .map_err(|e| fail("evaluate", &report_path, e))?;
        stages_run.push("evaluate");
        Some(ev.report)
    };

    Ok(RunSummary { stages_run, report })
}

/// Re-score existing pipeline artifacts in `pred` against the ground truth
/// carried by the dataset in `data`.
pub fn evaluate_artifacts(data: &Path, pred: &Path) -> Result<EvalReport, PipelineError> {
    let stage = "evaluate";
    let mut priors = load_priors(data).map_err(|e| fail("load", data, e))?;
    let split: ClassifyFile = read_json(stage, &pred.join("classify.json"))?;
    let camera_path = pred.join("camera_solved.json");
    let file = CameraFile::read(&camera_path).map_err(|e| fail(stage, &camera_path, e))?;
    let camera = CameraModel::from_file(&file);
    apply_depth_corrections(&mut priors.depths, &file);
    let scene_path = pred.join("scene.m4d");
    let (set, stat, scaffold) = read_m4d(&scene_path).map_err(|e| fail(stage, &scene_path, e))?;
    let ev = evaluate(
        data,
        &priors,
        &camera,
        &split.static_ids,
        &set,
        &stat,
        &scaffold,
    )?;
    Ok(ev.report)
}
