//! Ingestion of precomputed priors (2D tracks, depth maps, optional camera
//! seed) from a dataset directory, plus the epipolar static/dynamic
//! tracklet classifier.
//!
//! Directory layout: `tracks.bin` (TRK1), `depth/%05d.pfm`, optional
//! `camera.json`, optional `rgb/%05d.png`.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, Matrix3, SMatrix, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum PriorsError {
    #[error("format error: {0}")]
    FormatError(String),
    #[error("inconsistent length: {what} has {got} frames, expected {expected}")]
    InconsistentLength {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("non-positive depth {value} at frame {frame}, pixel ({x}, {y})")]
    NonPositiveDepth {
        frame: usize,
        x: usize,
        y: usize,
        value: f64,
    },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A long-term 2D pixel trajectory with per-frame visibility.
#[derive(Clone, Debug)]
pub struct Tracklet2D {
    pub points: Vec<Vector2<f64>>,
    pub visibility: Vec<bool>,
}

impl Tracklet2D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn visible(&self, t: usize) -> bool {
        self.visibility[t]
    }

    pub fn first_visible(&self) -> Option<usize> {
        self.visibility.iter().position(|v| *v)
    }
}

/// Per-frame depth maps (row-major, row 0 at the top of the image) with a
/// per-frame scale and sparse per-pixel corrections. The corrected depth at
/// a pixel is `scale_t · (raw + correction)`.
#[derive(Clone, Debug)]
pub struct DepthStack {
    pub width: usize,
    pub height: usize,
    pub maps: Vec<Vec<f64>>,
    pub scale: Vec<f64>,
    pub pixel_correction: Vec<BTreeMap<(u32, u32), f64>>,
}

impl DepthStack {
    pub fn new(width: usize, height: usize, maps: Vec<Vec<f64>>) -> Self {
        let t = maps.len();
        Self {
            width,
            height,
            maps,
            scale: vec![1.0; t],
            pixel_correction: vec![BTreeMap::new(); t],
        }
    }

    pub fn frame_count(&self) -> usize {
        self.maps.len()
    }

    pub fn raw(&self, t: usize, x: usize, y: usize) -> f64 {
        self.maps[t][y * self.width + x]
    }

    pub fn correction(&self, t: usize, x: usize, y: usize) -> f64 {
        *self.pixel_correction[t]
            .get(&(x as u32, y as u32))
            .unwrap_or(&0.0)
    }

    pub fn corrected(&self, t: usize, x: usize, y: usize) -> f64 {
        self.scale[t] * (self.raw(t, x, y) + self.correction(t, x, y))
    }

    /// Nearest-pixel indices of a continuous pixel position, clamped to the
    /// image.
    pub fn pixel_index(&self, p: &Vector2<f64>) -> (usize, usize) {
        let x = p.x.round().clamp(0.0, (self.width - 1) as f64) as usize;
        let y = p.y.round().clamp(0.0, (self.height - 1) as f64) as usize;
        (x, y)
    }

    pub fn corrected_at(&self, t: usize, p: &Vector2<f64>) -> f64 {
        let (x, y) = self.pixel_index(p);
        self.corrected(t, x, y)
    }

    pub fn raw_at(&self, t: usize, p: &Vector2<f64>) -> f64 {
        let (x, y) = self.pixel_index(p);
        self.raw(t, x, y)
    }

    /// Median of the finite raw depths of frame `t`.
    pub fn median_raw(&self, t: usize) -> f64 {
        let mut vals: Vec<f64> = self.maps[t].iter().copied().filter(|d| d.is_finite()).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if vals.is_empty() {
            return 1.0;
        }
        vals[vals.len() / 2]
    }
}

/// Camera metadata as stored in `camera.json` / `camera_solved.json`.
/// Poses are 3×4 world-from-camera matrices, row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<Vec<[[f64; 4]; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scales: Option<Vec<f64>>,
    /// Sparse per-pixel depth corrections as (x, y, value) per frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_corrections: Option<Vec<Vec<(u32, u32, f64)>>>,
}

impl CameraFile {
    pub fn read(path: &Path) -> Result<Self, PriorsError> {
        let data = std::fs::read_to_string(path)?;
        serde_json::from_str(&data).map_err(|e| PriorsError::FormatError(format!("{path:?}: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<(), PriorsError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| PriorsError::FormatError(e.to_string()))?;
        w.flush()?;
        Ok(())
    }
}

/// One decoded RGB frame, row-major from the top-left.
#[derive(Clone, Debug)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

/// Everything `load_priors` pulls out of a dataset directory.
#[derive(Clone, Debug)]
pub struct Priors {
    pub tracklets: Vec<Tracklet2D>,
    pub depths: DepthStack,
    pub camera_seed: Option<CameraFile>,
    pub rgb: Option<Vec<RgbFrame>>,
}

impl Priors {
    pub fn frame_count(&self) -> usize {
        self.depths.frame_count()
    }

    /// Human-readable summary for the CLI validator.
    pub fn manifest(&self, dir: &Path) -> String {
        let mut out = String::new();
        out.push_str(&format!("dataset: {}\n", dir.display()));
        out.push_str(&format!(
            "frames: {}   image: {}x{}\n",
            self.frame_count(),
            self.depths.width,
            self.depths.height
        ));
        let visible: usize = self
            .tracklets
            .iter()
            .map(|t| t.visibility.iter().filter(|v| **v).count())
            .sum();
        out.push_str(&format!(
            "tracks: {} ({} visible observations)\n",
            self.tracklets.len(),
            visible
        ));
        match &self.camera_seed {
            Some(c) => out.push_str(&format!(
                "camera: fx={} fy={} cx={} cy={} poses={}\n",
                c.fx,
                c.fy,
                c.cx,
                c.cy,
                c.poses.as_ref().map_or(0, |p| p.len())
            )),
            None => out.push_str("camera: none\n"),
        }
        out.push_str(&format!(
            "rgb: {}\n",
            self.rgb.as_ref().map_or(0, |r| r.len())
        ));
        out
    }
}

pub fn depth_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("depth").join(format!("{frame:05}.pfm"))
}

pub fn rgb_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("rgb").join(format!("{frame:05}.png"))
}

/// Load and cross-validate a dataset directory.
pub fn load_priors(dir: &Path) -> Result<Priors, PriorsError> {
    let tracklets = read_tracks(&dir.join("tracks.bin"))?;
    let t_tracks = tracklets.first().map_or(0, |t| t.len());

    let depth_dir = dir.join("depth");
    let mut frames: Vec<PathBuf> = std::fs::read_dir(&depth_dir)
        .map_err(|_| PriorsError::FormatError(format!("missing depth directory {depth_dir:?}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pfm"))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(PriorsError::FormatError("no depth frames".into()));
    }
    if frames.len() != t_tracks {
        return Err(PriorsError::InconsistentLength {
            what: "depth stack".into(),
            expected: t_tracks,
            got: frames.len(),
        });
    }

    let mut maps = Vec::with_capacity(frames.len());
    let mut size = None;
    for (t, path) in frames.iter().enumerate() {
        let (w, h, data) = read_pfm(path)?;
        match size {
            None => size = Some((w, h)),
            Some(s) if s != (w, h) => {
                return Err(PriorsError::FormatError(format!(
                    "depth frame {t} is {w}x{h}, expected {}x{}",
                    s.0, s.1
                )))
            }
            _ => {}
        }
        for (i, d) in data.iter().enumerate() {
            if d.is_finite() && *d <= 0.0 {
                return Err(PriorsError::NonPositiveDepth {
                    frame: t,
                    x: i % w,
                    y: i / w,
                    value: *d,
                });
            }
        }
        maps.push(data);
    }
    let (width, height) = size.unwrap();
    let depths = DepthStack::new(width, height, maps);

    for (i, track) in tracklets.iter().enumerate() {
        if track.len() != t_tracks {
            return Err(PriorsError::InconsistentLength {
                what: format!("track {i}"),
                expected: t_tracks,
                got: track.len(),
            });
        }
        if !track.visibility.iter().any(|v| *v) {
            return Err(PriorsError::FormatError(format!(
                "track {i} has no visible frame"
            )));
        }
        for (t, (p, vis)) in track.points.iter().zip(&track.visibility).enumerate() {
            if *vis
                && !(p.x >= -0.5
                    && p.x < width as f64 - 0.5
                    && p.y >= -0.5
                    && p.y < height as f64 - 0.5)
            {
                return Err(PriorsError::FormatError(format!(
                    "track {i} visible at frame {t} outside image: ({}, {})",
                    p.x, p.y
                )));
            }
        }
    }

    let camera_path = dir.join("camera.json");
    let camera_seed = if camera_path.exists() {
        let cam = CameraFile::read(&camera_path)?;
        if let Some(poses) = &cam.poses {
            if poses.len() != t_tracks {
                return Err(PriorsError::InconsistentLength {
                    what: "camera poses".into(),
                    expected: t_tracks,
                    got: poses.len(),
                });
            }
        }
        Some(cam)
    } else {
        None
    };

    let rgb = if dir.join("rgb").is_dir() {
        let mut frames_rgb = Vec::new();
        for t in 0..t_tracks {
            let path = rgb_path(dir, t);
            if !path.exists() {
                break;
            }
            frames_rgb.push(read_png(&path)?);
        }
        if frames_rgb.is_empty() {
            None
        } else {
            if frames_rgb.len() != t_tracks {
                return Err(PriorsError::InconsistentLength {
                    what: "rgb frames".into(),
                    expected: t_tracks,
                    got: frames_rgb.len(),
                });
            }
            Some(frames_rgb)
        }
    } else {
        None
    };

    Ok(Priors {
        tracklets,
        depths,
        camera_seed,
        rgb,
    })
}

/// Portable float map, grayscale ("Pf"), negative scale = little-endian.
/// Scanlines are stored bottom-up; the returned buffer is top-down.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>), PriorsError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    let mut token = String::new();
    let mut tokens = Vec::new();
    while tokens.len() < 3 {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        header.push(byte[0]);
        if byte[0].is_ascii_whitespace() {
            if !token.is_empty() {
                tokens.push(std::mem::take(&mut token));
            }
        } else {
            token.push(byte[0] as char);
        }
    }
    if tokens[0] != "Pf" {
        return Err(PriorsError::FormatError(format!(
            "{path:?}: bad magic {:?}, expected Pf",
            tokens[0]
        )));
    }
    let dims: Vec<usize> = tokens[1]
        .split_whitespace()
        .chain(tokens[2].split_whitespace())
        .take(2)
        .map(|s| s.parse().map_err(|_| PriorsError::FormatError(format!("{path:?}: bad dims"))))
        .collect::<Result<_, _>>()?;
    let (w, h) = (dims[0], dims[1]);
    let mut scale_line = String::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        scale_line.push(byte[0] as char);
    }
    let scale: f64 = scale_line
        .trim()
        .parse()
        .map_err(|_| PriorsError::FormatError(format!("{path:?}: bad scale {scale_line:?}")))?;
    let little_endian = scale < 0.0;
    let mut raw = vec![0u8; w * h * 4];
    r.read_exact(&mut raw)?;
    let mut data = vec![0.0f64; w * h];
    for row_file in 0..h {
        let row_img = h - 1 - row_file;
        for x in 0..w {
            let off = (row_file * w + x) * 4;
            let bytes: [u8; 4] = raw[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            data[row_img * w + x] = v as f64;
        }
    }
    Ok((w, h, data))
}

/// Write a grayscale PFM (little-endian, top-down input buffer).
pub fn write_pfm(path: &Path, w: usize, h: usize, data: &[f64]) -> Result<(), PriorsError> {
    assert_eq!(data.len(), w * h);
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write!(out, "Pf\n{w} {h}\n-1.0\n")?;
    for row_file in 0..h {
        let row_img = h - 1 - row_file;
        for x in 0..w {
            out.write_all(&(data[row_img * w + x] as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// TRK1 track container: magic, N, T, then per track and frame
/// (u: f32, v: f32, visible: u8).
pub fn read_tracks(path: &Path) -> Result<Vec<Tracklet2D>, PriorsError> {
    let mut r = BufReader::new(
        std::fs::File::open(path)
            .map_err(|_| PriorsError::FormatError(format!("missing track file {path:?}")))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"TRK1" {
        return Err(PriorsError::FormatError(format!(
            "{path:?}: bad magic {magic:?}, expected TRK1"
        )));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let t = r.read_u32::<LittleEndian>()? as usize;
    let mut tracks = Vec::with_capacity(n);
    for _ in 0..n {
        let mut points = Vec::with_capacity(t);
        let mut visibility = Vec::with_capacity(t);
        for _ in 0..t {
            let u = r.read_f32::<LittleEndian>()? as f64;
            let v = r.read_f32::<LittleEndian>()? as f64;
            let flag = r.read_u8()?;
            points.push(Vector2::new(u, v));
            visibility.push(flag != 0);
        }
        tracks.push(Tracklet2D { points, visibility });
    }
    Ok(tracks)
}

pub fn write_tracks(path: &Path, tracks: &[Tracklet2D]) -> Result<(), PriorsError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(b"TRK1")?;
    w.write_u32::<LittleEndian>(tracks.len() as u32)?;
    let t = tracks.first().map_or(0, |t| t.len());
    w.write_u32::<LittleEndian>(t as u32)?;
    for track in tracks {
        assert_eq!(track.len(), t, "ragged track lengths");
        for (p, vis) in track.points.iter().zip(&track.visibility) {
            w.write_f32::<LittleEndian>(p.x as f32)?;
            w.write_f32::<LittleEndian>(p.y as f32)?;
            w.write_u8(u8::from(*vis))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<RgbFrame, PriorsError> {
    let img = image::open(path)
        .map_err(|e| PriorsError::FormatError(format!("{path:?}: {e}")))?
        .to_rgb8();
    let (width, height) = (img.width() as usize, img.height() as usize);
    let pixels = img.pixels().map(|p| p.0).collect();
    Ok(RgbFrame {
        width,
        height,
        pixels,
    })
}

pub fn write_png(path: &Path, frame: &RgbFrame) -> Result<(), PriorsError> {
    let mut img = image::RgbImage::new(frame.width as u32, frame.height as u32);
    for (i, px) in frame.pixels.iter().enumerate() {
        let x = (i % frame.width) as u32;
        let y = (i / frame.width) as u32;
        img.put_pixel(x, y, image::Rgb(*px));
    }
    img.save(path)
        .map_err(|e| PriorsError::FormatError(format!("{path:?}: {e}")))
}

/// Per-tracklet epipolar statistics from the consecutive-frame fundamental
/// matrices.
#[derive(Clone, Debug)]
pub struct EpipolarStats {
    /// Max Sampson distance (px) of each tracklet over its co-visible
    /// consecutive frame pairs; 0 when a tracklet has none.
    pub max_error: Vec<f64>,
    /// (first frame of pair, mean inlier Sampson distance).
    pub pair_mean_inlier_error: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct Classification {
    pub static_ids: Vec<usize>,
    pub dynamic_ids: Vec<usize>,
    pub stats: EpipolarStats,
}

/// Default static threshold: 1 px at a 480 px image height, scaled linearly
/// with resolution.
pub fn default_static_threshold(image_height: usize) -> f64 {
    image_height as f64 / 480.0
}

const RANSAC_MAX_ITERS: usize = 2000;
const RANSAC_INLIER_PX: f64 = 1.0;
const RANSAC_MIN_INLIER_RATIO: f64 = 0.25;
const RANSAC_CONFIDENCE: f64 = 0.999;
const RANSAC_SEED: u64 = 7;

/// Split tracklets into static and dynamic sets by their maximum Sampson
/// distance to per-consecutive-pair fundamental matrices estimated with
/// seeded RANSAC over a normalized 8-point solver.
pub fn epipolar_classify(
    tracklets: &[Tracklet2D],
    threshold: f64,
) -> Result<Classification, PriorsError> {
    let t_count = tracklets.first().map_or(0, |t| t.len());
    let mut max_error = vec![0.0f64; tracklets.len()];
    let mut pair_means = Vec::new();
    let mut any_pair_usable = false;

    for t in 0..t_count.saturating_sub(1) {
        let mut ids = Vec::new();
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        for (i, track) in tracklets.iter().enumerate() {
            if track.visible(t) && track.visible(t + 1) {
                ids.push(i);
                pa.push(track.points[t]);
                pb.push(track.points[t + 1]);
            }
        }
        if ids.len() < 8 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(RANSAC_SEED ^ (t as u64).wrapping_mul(0x9E3779B9));
        let Some((f, inliers)) = ransac_fundamental(&pa, &pb, &mut rng) else {
            continue;
        };
        if (inliers.len() as f64) < RANSAC_MIN_INLIER_RATIO * ids.len() as f64 {
            continue;
        }
        any_pair_usable = true;
        let mean: f64 = inliers
            .iter()
            .map(|&j| sampson_px(&f, &pa[j], &pb[j]))
            .sum::<f64>()
            / inliers.len() as f64;
        pair_means.push((t, mean));
        for (j, &id) in ids.iter().enumerate() {
            let e = sampson_px(&f, &pa[j], &pb[j]);
            if e > max_error[id] {
                max_error[id] = e;
            }
        }
    }

    if !any_pair_usable {
        return Err(PriorsError::DegenerateGeometry(
            "no frame pair reached the required RANSAC inlier ratio".into(),
        ));
    }

    let mut static_ids = Vec::new();
    let mut dynamic_ids = Vec::new();
    for (i, e) in max_error.iter().enumerate() {
        if *e < threshold {
            static_ids.push(i);
        } else {
            dynamic_ids.push(i);
        }
    }
    Ok(Classification {
        static_ids,
        dynamic_ids,
        stats: EpipolarStats {
            max_error,
            pair_mean_inlier_error: pair_means,
        },
    })
}

/// First-order geometric (Sampson) distance in pixels of the correspondence
/// (a, b) to the fundamental matrix `f` (constraint `b̃ᵀ F ã = 0`).
pub fn sampson_px(f: &Matrix3<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let xa = Vector3::new(a.x, a.y, 1.0);
    let xb = Vector3::new(b.x, b.y, 1.0);
    let fa = f * xa;
    let ftb = f.transpose() * xb;
    let num = xb.dot(&fa).abs();
    let den = (fa.x * fa.x + fa.y * fa.y + ftb.x * ftb.x + ftb.y * ftb.y).sqrt();
    if den < 1e-300 {
        return f64::INFINITY;
    }
    num / den
}

fn ransac_fundamental(
    pa: &[Vector2<f64>],
    pb: &[Vector2<f64>],
    rng: &mut ChaCha8Rng,
) -> Option<(Matrix3<f64>, Vec<usize>)> {
    let n = pa.len();
    let mut best_inliers: Vec<usize> = Vec::new();
    let mut iter = 0usize;
    let mut max_iter = RANSAC_MAX_ITERS;
    while iter < max_iter {
        iter += 1;
        let sample = rand::seq::index::sample(rng, n, 8).into_vec();
        let sa: Vec<Vector2<f64>> = sample.iter().map(|&i| pa[i]).collect();
        let sb: Vec<Vector2<f64>> = sample.iter().map(|&i| pb[i]).collect();
        let Some(f) = eight_point(&sa, &sb) else {
            continue;
        };
        let inliers: Vec<usize> = (0..n)
            .filter(|&i| sampson_px(&f, &pa[i], &pb[i]) < RANSAC_INLIER_PX)
            .collect();
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
            let w = best_inliers.len() as f64 / n as f64;
            let denom = (1.0 - w.powi(8)).max(1e-12).ln();
            if denom < 0.0 {
                let needed = ((1.0 - RANSAC_CONFIDENCE).ln() / denom).ceil() as usize;
                max_iter = max_iter.min(iter + needed);
            }
        }
    }
    if best_inliers.len() < 8 {
        return None;
    }
    let ia: Vec<Vector2<f64>> = best_inliers.iter().map(|&i| pa[i]).collect();
    let ib: Vec<Vector2<f64>> = best_inliers.iter().map(|&i| pb[i]).collect();
    let f = eight_point(&ia, &ib)?;
    Some((f, best_inliers))
}

/// Normalized (Hartley) 8-point fundamental matrix fit over `n ≥ 8`
/// correspondences, least squares via the smallest eigenvector of AᵀA, with
/// the rank-2 constraint enforced.
pub fn eight_point(pa: &[Vector2<f64>], pb: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = pa.len();
    if n < 8 {
        return None;
    }
    let ta = hartley_normalization(pa)?;
    let tb = hartley_normalization(pb)?;
    let mut a = DMatrix::zeros(n, 9);
    for i in 0..n {
        let x = ta * Vector3::new(pa[i].x, pa[i].y, 1.0);
        let xp = tb * Vector3::new(pb[i].x, pb[i].y, 1.0);
        let row = [
            xp.x * x.x,
            xp.x * x.y,
            xp.x,
            xp.y * x.x,
            xp.y * x.y,
            xp.y,
            x.x,
            x.y,
            1.0,
        ];
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let ata: SMatrix<f64, 9, 9> = SMatrix::from_iterator(
        (a.transpose() * &a).iter().copied(),
    );
    let eig = nalgebra::SymmetricEigen::new(ata);
    let mut min_idx = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let fvec = eig.eigenvectors.column(min_idx);
    let f_norm = Matrix3::new(
        fvec[0], fvec[1], fvec[2],
        fvec[3], fvec[4], fvec[5],
        fvec[6], fvec[7], fvec[8],
    );
    let svd = f_norm.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut s = Matrix3::zeros();
    s[(0, 0)] = svd.singular_values[0];
    s[(1, 1)] = svd.singular_values[1];
    let f_rank2 = u * s * vt;
    let f = tb.transpose() * f_rank2 * ta;
    let norm = f.norm();
    if !norm.is_finite() || norm < 1e-300 {
        return None;
    }
    Some(f / norm)
}

/// Similarity transform sending the points to centroid 0 with mean distance
/// √2.
fn hartley_normalization(pts: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let centroid = pts.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = pts.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::RigidTransform;
    use approx::assert_relative_eq;
    use nalgebra::{UnitQuaternion, Vector3};

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let (w, h) = (5, 3);
        let data: Vec<f64> = (0..15).map(|i| 1.0 + i as f64 * 0.25).collect();
        write_pfm(&path, w, h, &data).unwrap();
        let (rw, rh, rd) = read_pfm(&path).unwrap();
        assert_eq!((rw, rh), (w, h));
        for (a, b) in rd.iter().zip(&data) {
            assert_relative_eq!(a, b);
        }
    }

    #[test]
    fn tracks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.bin");
        let tracks = vec![
            Tracklet2D {
                points: vec![Vector2::new(1.5, 2.25), Vector2::new(3.0, 4.0)],
                visibility: vec![true, false],
            },
            Tracklet2D {
                points: vec![Vector2::new(0.0, 0.0), Vector2::new(7.5, 1.0)],
                visibility: vec![false, true],
            },
        ];
        write_tracks(&path, &tracks).unwrap();
        let loaded = read_tracks(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].points[0], Vector2::new(1.5, 2.25));
        assert_eq!(loaded[0].visibility, vec![true, false]);
        assert_eq!(loaded[1].points[1], Vector2::new(7.5, 1.0));
    }

    fn write_min_dataset(
        dir: &Path,
        t_frames: usize,
        w: usize,
        h: usize,
        zero_pixel: Option<(usize, usize, usize)>,
    ) {
        std::fs::create_dir_all(dir.join("depth")).unwrap();
        for t in 0..t_frames {
            let mut data = vec![2.0; w * h];
            if let Some((zt, zx, zy)) = zero_pixel {
                if zt == t {
                    data[zy * w + zx] = 0.0;
                }
            }
            write_pfm(&depth_path(dir, t), w, h, &data).unwrap();
        }
        let tracks = vec![
            Tracklet2D {
                points: vec![Vector2::new(2.0, 2.0); t_frames],
                visibility: vec![true; t_frames],
            };
            3
        ];
        write_tracks(&dir.join("tracks.bin"), &tracks).unwrap();
    }

    #[test]
    fn load_priors_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_min_dataset(dir.path(), 4, 8, 6, None);
        let p = load_priors(dir.path()).unwrap();
        assert_eq!(p.frame_count(), 4);
        assert_eq!(p.tracklets.len(), 3);
        assert!(p.camera_seed.is_none());

        let dir2 = tempfile::tempdir().unwrap();
        write_min_dataset(dir2.path(), 4, 8, 6, Some((2, 3, 1)));
        match load_priors(dir2.path()) {
            Err(PriorsError::NonPositiveDepth { frame: 2, x: 3, y: 1, .. }) => {}
            other => panic!("expected NonPositiveDepth, got {other:?}"),
        }

        let dir3 = tempfile::tempdir().unwrap();
        write_min_dataset(dir3.path(), 4, 8, 6, None);
        std::fs::remove_file(depth_path(dir3.path(), 3)).unwrap();
        match load_priors(dir3.path()) {
            Err(PriorsError::InconsistentLength { expected: 4, got: 3, .. }) => {}
            other => panic!("expected InconsistentLength, got {other:?}"),
        }
    }

    #[test]
    fn camera_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("camera.json");
        let cam = CameraFile {
            fx: 60.0,
            fy: 60.0,
            cx: 32.0,
            cy: 24.0,
            poses: Some(vec![[[1.0, 0.0, 0.0, 0.5], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]]),
            depth_scales: None,
            pixel_corrections: None,
        };
        cam.write(&path).unwrap();
        let loaded = CameraFile::read(&path).unwrap();
        assert_eq!(loaded.fx, 60.0);
        assert_eq!(loaded.poses.unwrap()[0][0][3], 0.5);
    }

    /// Rigid scene seen by a moving camera; used by the classifier tests.
    fn rigid_scene_tracks(
        n_points: usize,
        t_frames: usize,
        dynamic_last: bool,
    ) -> Vec<Tracklet2D> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (fx, fy, cx, cy) = (60.0, 60.0, 32.0, 24.0);
        let points: Vec<Vector3<f64>> = (0..n_points)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(3.0..6.0),
                )
            })
            .collect();
        let poses: Vec<RigidTransform> = (0..t_frames)
            .map(|t| {
                let s = t as f64 / t_frames as f64;
                RigidTransform::new(
                    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.2 * s),
                    Vector3::new(0.8 * s, 0.1 * s, 0.0),
                )
            })
            .collect();
        (0..n_points)
            .map(|i| {
                let mut pts = Vec::new();
                let mut vis = Vec::new();
                for (t, pose) in poses.iter().enumerate() {
                    let mut world = points[i];
                    if dynamic_last && i == n_points - 1 {
                        world += Vector3::new(0.4, 0.0, 0.0) * t as f64;
                    }
                    let cam = pose.inverse().apply(&world);
                    let u = fx * cam.x / cam.z + cx;
                    let v = fy * cam.y / cam.z + cy;
                    pts.push(Vector2::new(u, v));
                    vis.push(true);
                }
                Tracklet2D {
                    points: pts,
                    visibility: vis,
                }
            })
            .collect()
    }

    #[test]
    fn classify_static_scene() {
        let tracks = rigid_scene_tracks(40, 6, false);
        let c = epipolar_classify(&tracks, 0.5).unwrap();
        assert_eq!(c.static_ids.len(), 40);
        assert!(c.dynamic_ids.is_empty());
        for e in &c.stats.max_error {
            assert!(*e < 1e-6, "noiseless Sampson error {e}");
        }
    }

    #[test]
    fn classify_flags_independent_mover() {
        let tracks = rigid_scene_tracks(41, 6, true);
        let c = epipolar_classify(&tracks, 1.0).unwrap();
        assert!(c.dynamic_ids.contains(&40), "mover not flagged: {:?}", c.dynamic_ids);
        assert!(c.static_ids.len() >= 38);
        assert!(c.stats.max_error[40] > 1.0);
    }

    #[test]
    fn classify_infinite_threshold_all_static() {
        let tracks = rigid_scene_tracks(41, 6, true);
        let c = epipolar_classify(&tracks, f64::INFINITY).unwrap();
        assert_eq!(c.static_ids.len(), 41);
        assert!(c.dynamic_ids.is_empty());
    }

    #[test]
    fn classify_monotone_in_threshold() {
        let tracks = rigid_scene_tracks(41, 6, true);
        let mut prev = 0usize;
        for th in [0.01, 0.1, 1.0, 10.0, f64::INFINITY] {
            let c = epipolar_classify(&tracks, th).unwrap();
            assert!(c.static_ids.len() >= prev);
            prev = c.static_ids.len();
        }
    }

    #[test]
    fn eight_point_recovers_epipolar_constraint() {
        let tracks = rigid_scene_tracks(30, 2, false);
        let pa: Vec<Vector2<f64>> = tracks.iter().map(|t| t.points[0]).collect();
        let pb: Vec<Vector2<f64>> = tracks.iter().map(|t| t.points[1]).collect();
        let f = eight_point(&pa, &pb).unwrap();
        for (a, b) in pa.iter().zip(&pb) {
            assert!(sampson_px(&f, a, b) < 1e-6);
        }
    }
}
