use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mosca_core::camera::{
    apply_depth_corrections, pose_from_rows, solve_bundle, CameraInit, CameraModel,
};
use mosca_core::config::{self, PipelineConfig};
use mosca_core::fusion::{
    export_ply, fuse_at, init_gaussians, init_static_gaussians, photometric_stage, preview_render,
    read_m4d, write_m4d, PosedGaussian,
};
use mosca_core::lift::{geometric_optimize, init_scaffold, lift_all, node_visibility};
use mosca_core::pipeline::{self, evaluate_artifacts, run_pipeline, NodesFile};
use mosca_core::priors::{
    default_static_threshold, epipolar_classify, load_priors, write_png, CameraFile, Priors,
};
use mosca_core::scaffold::MotionScaffold;
use mosca_core::synth;
use mosca_core::RigidTransform;

#[derive(Parser)]
#[command(name = "mosca", version, about = "Sparse-trajectory 4D reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with exact ground truth.
    Synth {
        /// TOML scene description; omitted keys use the kind's preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bundle-adjust camera intrinsics, poses, and depth alignment against
    /// the static tracklets.
    Ba {
        #[arg(long)]
        data: PathBuf,
        /// Focal guess (px) when the dataset has no camera.json.
        #[arg(long)]
        init_focal: Option<f64>,
        /// Freeze intrinsics at their initial values.
        #[arg(long)]
        known_intrinsics: bool,
        /// Use every ordered frame pair instead of strided chains.
        #[arg(long)]
        ba_all_pairs: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Lift dynamic tracks to 3D and optimize the motion scaffold.
    Lift {
        #[arg(long)]
        data: PathBuf,
        /// Solved camera file (from `mosca ba` or a pipeline run).
        #[arg(long)]
        camera: PathBuf,
        /// Initial node skinning radius, scene units squared.
        #[arg(long, default_value_t = 0.05)]
        r_init: f64,
        /// Node resampling spacing, scene units.
        #[arg(long, default_value_t = 0.25)]
        spacing: f64,
        #[arg(long, default_value_t = 4)]
        knn: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Spawn Gaussians on the scaffold and refine against the tracklets.
    Fuse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        scaffold: PathBuf,
        /// Node metadata written by `mosca lift`; defaults to nodes.json
        /// next to the scaffold, else every node counts as observed.
        #[arg(long)]
        nodes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one frame of a fused scene.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        frame: usize,
        /// JSON file holding a 3x4 row-major world-from-camera pose that
        /// overrides the frame's solved pose.
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also export the posed Gaussians as an ASCII point cloud.
        #[arg(long)]
        ply: Option<PathBuf>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Run the full pipeline: classify, camera, scaffold, fuse, evaluate.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Reuse artifacts from an interrupted run.
        #[arg(long)]
        resume: bool,
    },
    /// Score pipeline artifacts against a dataset's ground truth.
    Eval {
        /// Output directory of a pipeline run.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory carrying a gt/ subdirectory.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Print the full default configuration.
    Config {
        #[arg(long)]
        dump: bool,
    },
}

fn classify(priors: &Priors) -> Result<(Vec<usize>, Vec<usize>)> {
    let threshold = default_static_threshold(priors.depths.height);
    let c = epipolar_classify(&priors.tracklets, threshold)
        .context("static/dynamic classification failed")?;
    Ok((c.static_ids, c.dynamic_ids))
}

fn load_camera(path: &Path, priors: &mut Priors) -> Result<CameraModel> {
    let file = CameraFile::read(path).with_context(|| format!("reading {path:?}"))?;
    let camera = CameraModel::from_file(&file);
    if camera.frame_count() != priors.depths.maps.len() {
        bail!(
            "{path:?} has {} poses but the dataset has {} frames",
            camera.frame_count(),
            priors.depths.maps.len()
        );
    }
    apply_depth_corrections(&mut priors.depths, &file);
    Ok(camera)
}

fn lift_robust(
    priors: &Priors,
    sources: &[usize],
    camera: &CameraModel,
) -> Vec<mosca_core::lift::LiftedTrajectory> {
    let mut lifted = Vec::new();
    for &i in sources {
        match lift_all(&priors.tracklets, &[i], camera, &priors.depths) {
            Ok(mut l) => lifted.append(&mut l),
            Err(e) => log::warn!("skipping tracklet {i}: {e}"),
        }
    }
    lifted
}

fn cmd_synth(spec: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let spec = match spec {
        Some(path) => synth::read_spec(&path)?,
        None => synth::SceneSpec::default(),
    };
    let scene = synth::generate(&spec, &out)?;
    println!(
        "wrote {:?} scene to {}: {} frames, {} tracks ({} static)",
        spec.kind,
        out.display(),
        spec.frames,
        scene.tracks.len(),
        scene.static_ids().len(),
    );
    Ok(())
}

fn cmd_ba(
    data: PathBuf,
    init_focal: Option<f64>,
    known_intrinsics: bool,
    all_pairs: bool,
    out: PathBuf,
) -> Result<()> {
    let priors = load_priors(&data)?;
    let (static_ids, dynamic_ids) = classify(&priors)?;
    println!(
        "{} static / {} dynamic tracklets",
        static_ids.len(),
        dynamic_ids.len()
    );
    let init = match (&priors.camera_seed, init_focal) {
        (Some(seed), _) => CameraInit {
            fx: seed.fx,
            fy: seed.fy,
            cx: seed.cx,
            cy: seed.cy,
        },
        (None, Some(f)) => CameraInit::from_focal(f, &priors.depths),
        (None, None) => bail!("dataset has no camera.json; pass --init-focal"),
    };
    std::fs::create_dir_all(&out)?;
    let mut cfg = config::BaSection::default().to_config();
    cfg.known_intrinsics = known_intrinsics;
    cfg.all_pairs = all_pairs;
    cfg.log = Some(out.join("ba_log.txt"));
    let solution = solve_bundle(&priors.tracklets, &static_ids, &priors.depths, &init, &cfg)?;
    let path = out.join("camera_solved.json");
    solution.camera.to_file(Some(&solution.depths)).write(&path)?;
    println!(
        "solved camera -> {}: fx {:.3}, fy {:.3}, loss {:.3e} -> {:.3e} in {} iterations",
        path.display(),
        solution.camera.fx,
        solution.camera.fy,
        solution.result.initial_value,
        solution.result.value,
        solution.result.iterations,
    );
    Ok(())
}

fn cmd_lift(
    data: PathBuf,
    camera: PathBuf,
    r_init: f64,
    spacing: f64,
    knn: usize,
    out: PathBuf,
) -> Result<()> {
    let mut priors = load_priors(&data)?;
    let camera = load_camera(&camera, &mut priors)?;
    let (static_ids, dynamic_ids) = classify(&priors)?;
    let sources = pipeline::node_sources(&static_ids, &dynamic_ids, knn);
    let lifted = lift_robust(&priors, &sources, &camera);
    let (mut scaffold, kept) = init_scaffold(&lifted, r_init, spacing, knn)?;
    let visibility = node_visibility(&lifted, &kept);
    let result = geometric_optimize(
        &mut scaffold,
        &visibility,
        &config::GeoSection::default().to_config(),
    )?;
    std::fs::create_dir_all(&out)?;
    let scaffold_path = out.join("scaffold.msca");
    scaffold.write_msca(&scaffold_path)?;
    let nodes = NodesFile {
        sources: kept.iter().map(|&i| lifted[i].source).collect(),
        visibility,
    };
    let nodes_path = out.join("nodes.json");
    std::fs::write(&nodes_path, serde_json::to_string_pretty(&nodes)? + "\n")?;
    println!(
        "scaffold with {} nodes -> {} (+ {}): loss {:.3e} -> {:.3e}",
        scaffold.node_count(),
        scaffold_path.display(),
        nodes_path.display(),
        result.initial_value,
        result.value,
    );
    Ok(())
}

fn cmd_fuse(
    data: PathBuf,
    camera: PathBuf,
    scaffold_path: PathBuf,
    nodes: Option<PathBuf>,
    out: PathBuf,
) -> Result<()> {
    let mut priors = load_priors(&data)?;
    let camera = load_camera(&camera, &mut priors)?;
    let (_, dynamic_ids) = classify(&priors)?;
    let mut scaffold = MotionScaffold::read_msca(&scaffold_path)?;
    let nodes_path = nodes.unwrap_or_else(|| {
        scaffold_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("nodes.json")
    });
    let visibility = if nodes_path.exists() {
        let file: NodesFile = serde_json::from_str(&std::fs::read_to_string(&nodes_path)?)?;
        if file.visibility.len() != scaffold.node_count() {
            bail!(
                "{:?} has {} visibility rows for {} nodes",
                nodes_path,
                file.visibility.len(),
                scaffold.node_count()
            );
        }
        file.visibility
    } else {
        log::warn!("no node metadata at {nodes_path:?}; treating every node as observed");
        vec![vec![true; scaffold.frame_count()]; scaffold.node_count()]
    };

    let masks = pipeline::dynamic_masks(&priors.tracklets, &dynamic_ids, &priors.depths);
    let mut set = init_gaussians(
        &priors.depths,
        &camera,
        &masks,
        1,
        &scaffold,
        &priors.tracklets,
        &dynamic_ids,
        priors.rgb.as_deref(),
    )?;
    let stat = init_static_gaussians(&priors.depths, &camera, &masks, 2, 0, priors.rgb.as_deref())?;
    let cfg = config::PhotoSection::default().to_config(&config::GeoSection::default());
    let result = photometric_stage(
        &mut set,
        &mut scaffold,
        &visibility,
        &priors.tracklets,
        &camera,
        &cfg,
    )?;
    write_m4d(&out, &set, &stat, &scaffold)?;
    println!(
        "fused {} dynamic + {} static Gaussians -> {}: loss {:.3e} -> {:.3e}",
        set.gaussians.len(),
        stat.gaussians.len(),
        out.display(),
        result.initial_value,
        result.value,
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_render(
    scene: PathBuf,
    camera: PathBuf,
    frame: usize,
    pose: Option<PathBuf>,
    out: PathBuf,
    ply: Option<PathBuf>,
    width: Option<usize>,
    height: Option<usize>,
) -> Result<()> {
    let (set, stat, scaffold) = read_m4d(&scene)?;
    let file = CameraFile::read(&camera)?;
    let cam = CameraModel::from_file(&file);
    if frame >= scaffold.frame_count() {
        bail!(
            "frame {frame} out of range; the scene has {} frames",
            scaffold.frame_count()
        );
    }
    let pose_override = match pose {
        Some(path) => {
            let rows: [[f64; 4]; 3] = serde_json::from_str(&std::fs::read_to_string(&path)?)
                .with_context(|| format!("parsing 3x4 pose from {path:?}"))?;
            Some(pose_from_rows(&rows))
        }
        None => None,
    };
    let width = width.unwrap_or_else(|| (2.0 * file.cx).round() as usize);
    let height = height.unwrap_or_else(|| (2.0 * file.cy).round() as usize);
    let result = preview_render(
        &set,
        Some(&stat),
        &scaffold,
        &cam,
        frame,
        pose_override.as_ref(),
        width,
        height,
        [0.0, 0.0, 0.0],
    )?;
    write_png(&out, &result.image)?;
    println!("rendered frame {frame} -> {}", out.display());
    if let Some(ply_path) = ply {
        let mut posed = fuse_at(&set, &scaffold, frame)?;
        posed.extend(stat.gaussians.iter().map(|g| PosedGaussian {
            center: g.center,
            rotation: g.rotation,
            scales: g.scales,
            opacity: g.opacity,
            color: g.color,
        }));
        export_ply(&ply_path, &posed)?;
        println!("exported {} points -> {}", posed.len(), ply_path.display());
    }
    Ok(())
}

fn cmd_run(data: PathBuf, config_path: Option<PathBuf>, out: PathBuf, resume: bool) -> Result<()> {
    let cfg = match config_path {
        Some(path) => config::load(&path)?,
        None => PipelineConfig::default(),
    };
    let summary = run_pipeline(&data, &cfg, &out, resume)?;
    if summary.stages_run.is_empty() {
        println!("all artifacts up to date in {}", out.display());
    } else {
        println!("ran stages: {}", summary.stages_run.join(", "));
    }
    match summary.report {
        Some(report) => print!("{}", report.to_text()),
        None => println!("dataset has no gt/ directory; skipped evaluation"),
    }
    Ok(())
}

fn cmd_eval(pred: PathBuf, gt: PathBuf) -> Result<()> {
    let report = evaluate_artifacts(&gt, &pred)?;
    print!("{}", report.to_text());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Synth { spec, out } => cmd_synth(spec, out),
        Cmd::Ba {
            data,
            init_focal,
            known_intrinsics,
            ba_all_pairs,
            out,
        } => cmd_ba(data, init_focal, known_intrinsics, ba_all_pairs, out),
        Cmd::Lift {
            data,
            camera,
            r_init,
            spacing,
            knn,
            out,
        } => cmd_lift(data, camera, r_init, spacing, knn, out),
        Cmd::Fuse {
            data,
            camera,
            scaffold,
            nodes,
            out,
        } => cmd_fuse(data, camera, scaffold, nodes, out),
        Cmd::Render {
            scene,
            camera,
            frame,
            pose,
            out,
            ply,
            width,
            height,
        } => cmd_render(scene, camera, frame, pose, out, ply, width, height),
        Cmd::Run {
            data,
            config,
            out,
            resume,
        } => cmd_run(data, config, out, resume),
        Cmd::Eval { pred, gt } => cmd_eval(pred, gt),
        Cmd::Config { dump } => {
            if !dump {
                bail!("pass --dump to print the default configuration");
            }
            print!("{}", config::default_dump());
            Ok(())
        }
    }
}
