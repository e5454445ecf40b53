//! The motion scaffold: sparse SE(3) trajectory nodes, curve-distance KNN
//! topology, a coarsening pyramid, and the dense deformation field obtained
//! by dual-quaternion skinning.

use crate::se3::{dqb, DegenerateBlend, RigidTransform};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde_json::json;
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScaffoldError {
    #[error("insufficient nodes: have {have}, need at least {need}")]
    InsufficientNodes { have: usize, need: usize },
    #[error(transparent)]
    DegenerateBlend(#[from] DegenerateBlend),
    #[error("scaffold file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One scaffold node: a rigid transform per frame plus the RBF radius that
/// scales its skinning influence.
#[derive(Clone, Debug)]
pub struct ScaffoldNode {
    pub transforms: Vec<RigidTransform>,
    pub radius: f64,
}

impl ScaffoldNode {
    pub fn translation(&self, t: usize) -> Vector3<f64> {
        self.transforms[t].translation
    }
}

/// One pyramid level: a subset of node ids (ascending) with a neighbor list
/// per subset entry, all in global node ids.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub subset: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
}

/// Skinning support for one query point: the anchor (nearest node at the
/// source frame), the node ids blended over, and their RBF weights.
#[derive(Clone, Debug)]
pub struct SkinningWeights {
    pub anchor_node: usize,
    pub neighbor_ids: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MotionScaffold {
    pub nodes: Vec<ScaffoldNode>,
    /// Per-node K nearest neighbors under curve distance, self excluded.
    pub topology: Vec<Vec<usize>>,
    /// Level 0 mirrors the full topology; coarser levels are nested subsets.
    pub pyramid: Vec<PyramidLevel>,
    pub k: usize,
    pub pyramid_factor: f64,
    pub coarse_k: usize,
    anchor_grids: Option<Vec<FrameGrid>>,
}

/// Weights below this floor are raised to it before blending, so far-away
/// queries still blend instead of hitting a degenerate all-zero sum.
pub const WEIGHT_FLOOR: f64 = 1e-12;

impl MotionScaffold {
    pub fn new(nodes: Vec<ScaffoldNode>) -> Self {
        assert!(
            nodes.windows(2).all(|w| w[0].transforms.len() == w[1].transforms.len()),
            "all nodes must span the same frame count"
        );
        Self {
            nodes,
            topology: Vec::new(),
            pyramid: Vec::new(),
            k: 0,
            pyramid_factor: 0.5,
            coarse_k: 4,
            anchor_grids: None,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn frame_count(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.transforms.len())
    }

    /// Max-over-time distance between two node translation curves.
    pub fn curve_distance(&self, a: usize, b: usize) -> f64 {
        curve_distance_between(&self.nodes[a], &self.nodes[b])
    }

    /// K-nearest-neighbor topology under curve distance, ties broken toward
    /// the lower node index.
    pub fn build_topology(&mut self, k: usize) -> Result<(), ScaffoldError> {
        let m = self.nodes.len();
        if m <= k {
            return Err(ScaffoldError::InsufficientNodes { have: m, need: k + 1 });
        }
        let all: Vec<usize> = (0..m).collect();
        self.topology = knn_among(&self.nodes, &all, k);
        self.k = k;
        self.pyramid.clear();
        self.anchor_grids = None;
        Ok(())
    }

    /// Coarsening pyramid: level 0 is the full topology; each coarser level
    /// keeps a farthest-point-sampled, nested subset of roughly
    /// `factor^level` of the nodes with `coarse_k` neighbors recomputed
    /// inside the subset. Level sizes clamp to at least `coarse_k + 1`.
    pub fn build_pyramid(&mut self, levels: usize, factor: f64, coarse_k: usize) {
        assert!(levels >= 1, "pyramid needs at least one level");
        assert_eq!(self.topology.len(), self.nodes.len(), "build topology first");
        let m = self.nodes.len();
        self.pyramid_factor = factor;
        self.coarse_k = coarse_k;
        let mut pyramid = vec![PyramidLevel {
            subset: (0..m).collect(),
            neighbors: self.topology.clone(),
        }];
        if levels > 1 {
            let order = farthest_point_order(&self.nodes);
            for level in 1..levels {
                let want = ((m as f64) * factor.powi(level as i32)).round() as usize;
                let size = want.clamp((coarse_k + 1).min(m), m);
                let mut subset: Vec<usize> = order[..size].to_vec();
                subset.sort_unstable();
                let k_eff = coarse_k.min(size.saturating_sub(1));
                let neighbors = knn_among(&self.nodes, &subset, k_eff);
                pyramid.push(PyramidLevel { subset, neighbors });
            }
        }
        self.pyramid = pyramid;
    }

    /// RBF influence of `node` on point `x` at frame `t_src`:
    /// `exp(−‖x − t‖² / (2r))`, the radius acting as a squared-length scale.
    pub fn skinning_weight(&self, x: &Vector3<f64>, node: usize, t_src: usize) -> f64 {
        let node = &self.nodes[node];
        let d2 = (x - node.translation(t_src)).norm_squared();
        (-d2 / (2.0 * node.radius)).exp()
    }

    /// Nearest node to `x` at frame `t`, ties toward the lower index. Uses
    /// the per-frame grid when built, otherwise a full scan; both return
    /// the identical argmin.
    pub fn nearest_node(&self, x: &Vector3<f64>, t: usize) -> usize {
        if let Some(grids) = &self.anchor_grids {
            return grids[t].nearest(x, &self.nodes, t);
        }
        brute_nearest(&self.nodes, x, t)
    }

    /// Build per-frame spatial grids for `nearest_node` queries.
    pub fn build_anchor_index(&mut self) {
        let t_count = self.frame_count();
        self.anchor_grids = Some(
            (0..t_count)
                .map(|t| FrameGrid::build(&self.nodes, t))
                .collect(),
        );
    }

    /// Skinning support of `x` at `t_src`: RBF weights over the topology
    /// neighbors of the nearest node. A node without neighbors (single-node
    /// scaffold or K = 0) blends over the anchor alone.
    pub fn skinning_weights(&self, x: &Vector3<f64>, t_src: usize) -> SkinningWeights {
        let anchor = self.nearest_node(x, t_src);
        let mut ids = self.topology.get(anchor).cloned().unwrap_or_default();
        if ids.is_empty() {
            ids.push(anchor);
        }
        let weights = ids
            .iter()
            .map(|&i| self.skinning_weight(x, i, t_src))
            .collect();
        SkinningWeights {
            anchor_node: anchor,
            neighbor_ids: ids,
            weights,
        }
    }

    /// Blended SE(3) motion carrying the support of `w` from `t_src` to
    /// `t_dst`: DQB over the per-node relative transforms
    /// `Q_dst ∘ Q_src⁻¹`, weights floored at [`WEIGHT_FLOOR`].
    pub fn warp(
        &self,
        w: &SkinningWeights,
        t_src: usize,
        t_dst: usize,
    ) -> Result<RigidTransform, DegenerateBlend> {
        let pairs: Vec<(f64, RigidTransform)> = w
            .neighbor_ids
            .iter()
            .zip(&w.weights)
            .map(|(&i, &wi)| {
                let node = &self.nodes[i];
                let delta = node.transforms[t_dst].compose(&node.transforms[t_src].inverse());
                (wi.max(WEIGHT_FLOOR), delta)
            })
            .collect();
        dqb(&pairs)
    }

    /// Warp the point `x` from `t_src` to `t_dst` with freshly computed
    /// skinning weights.
    pub fn warp_point(
        &self,
        x: &Vector3<f64>,
        t_src: usize,
        t_dst: usize,
    ) -> Result<Vector3<f64>, DegenerateBlend> {
        let w = self.skinning_weights(x, t_src);
        Ok(self.warp(&w, t_src, t_dst)?.apply(x))
    }

    pub fn write_msca(&self, path: &Path) -> Result<(), ScaffoldError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_msca_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Serialize into any writer; also used to embed scaffolds in scene
    /// files.
    pub fn write_msca_to(&self, w: &mut impl Write) -> Result<(), ScaffoldError> {
        w.write_all(b"MSCA")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u32::<LittleEndian>(self.nodes.len() as u32)?;
        w.write_u32::<LittleEndian>(self.frame_count() as u32)?;
        w.write_u32::<LittleEndian>(self.k as u32)?;
        w.write_u32::<LittleEndian>(self.pyramid.len().max(1) as u32)?;
        w.write_f64::<LittleEndian>(self.pyramid_factor)?;
        w.write_u32::<LittleEndian>(self.coarse_k as u32)?;
        for node in &self.nodes {
            for t in &node.transforms {
                let q = t.rotation.quaternion();
                for v in [q.w, q.i, q.j, q.k] {
                    w.write_f64::<LittleEndian>(v)?;
                }
                for v in [t.translation.x, t.translation.y, t.translation.z] {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
            w.write_f64::<LittleEndian>(node.radius)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a scaffold and rebuild topology, pyramid, and anchor index from
    /// the stored parameters.
    pub fn read_msca(path: &Path) -> Result<Self, ScaffoldError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        Self::read_msca_from(&mut r)
    }

    /// Deserialize from any reader positioned at an MSCA block.
    pub fn read_msca_from(r: &mut impl Read) -> Result<Self, ScaffoldError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MSCA" {
            return Err(ScaffoldError::Format(format!(
                "bad magic {magic:?}, expected MSCA"
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(ScaffoldError::Format(format!("unsupported version {version}")));
        }
        let m = r.read_u32::<LittleEndian>()? as usize;
        let t_count = r.read_u32::<LittleEndian>()? as usize;
        let k = r.read_u32::<LittleEndian>()? as usize;
        let levels = r.read_u32::<LittleEndian>()? as usize;
        let factor = r.read_f64::<LittleEndian>()?;
        let coarse_k = r.read_u32::<LittleEndian>()? as usize;
        let mut nodes = Vec::with_capacity(m);
        for _ in 0..m {
            let mut transforms = Vec::with_capacity(t_count);
            for _ in 0..t_count {
                let qw = r.read_f64::<LittleEndian>()?;
                let qx = r.read_f64::<LittleEndian>()?;
                let qy = r.read_f64::<LittleEndian>()?;
                let qz = r.read_f64::<LittleEndian>()?;
                let tx = r.read_f64::<LittleEndian>()?;
                let ty = r.read_f64::<LittleEndian>()?;
                let tz = r.read_f64::<LittleEndian>()?;
                transforms.push(RigidTransform::new(
                    UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz)),
                    Vector3::new(tx, ty, tz),
                ));
            }
            let radius = r.read_f64::<LittleEndian>()?;
            if !(radius > 0.0) {
                return Err(ScaffoldError::Format(format!("non-positive radius {radius}")));
            }
            nodes.push(ScaffoldNode { transforms, radius });
        }
        let mut scaffold = Self::new(nodes);
        scaffold.build_topology(k)?;
        scaffold.build_pyramid(levels, factor, coarse_k);
        scaffold.build_anchor_index();
        Ok(scaffold)
    }

    /// Lossless structured export for debugging; floats print with
    /// round-trip precision.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let nodes: Vec<_> = self
            .nodes
            .iter()
            .map(|n| {
                let frames: Vec<_> = n
                    .transforms
                    .iter()
                    .map(|t| {
                        let q = t.rotation.quaternion();
                        json!({
                            "rotation_wxyz": [q.w, q.i, q.j, q.k],
                            "translation": [t.translation.x, t.translation.y, t.translation.z],
                        })
                    })
                    .collect();
                json!({ "frames": frames, "radius": n.radius })
            })
            .collect();
        json!({
            "node_count": self.nodes.len(),
            "frame_count": self.frame_count(),
            "k": self.k,
            "pyramid_factor": self.pyramid_factor,
            "coarse_k": self.coarse_k,
            "nodes": nodes,
            "topology": self.topology,
            "pyramid": self
                .pyramid
                .iter()
                .map(|l| json!({ "subset": l.subset, "neighbors": l.neighbors }))
                .collect::<Vec<_>>(),
        })
    }

    pub fn write_debug_json(&self, path: &Path) -> Result<(), ScaffoldError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.to_debug_json())
            .map_err(|e| ScaffoldError::Format(e.to_string()))?;
        w.flush()?;
        Ok(())
    }

    /// Append nodes and rebuild topology, pyramid, and anchor index.
    pub fn insert_nodes(&mut self, new_nodes: Vec<ScaffoldNode>) -> Result<(), ScaffoldError> {
        self.nodes.extend(new_nodes);
        self.rebuild()
    }

    /// Remove the listed nodes and rebuild. Fails without mutating if fewer
    /// than `k + 1` nodes would remain.
    pub fn remove_nodes(&mut self, ids: &[usize]) -> Result<(), ScaffoldError> {
        let keep: Vec<bool> = {
            let mut keep = vec![true; self.nodes.len()];
            for &i in ids {
                keep[i] = false;
            }
            keep
        };
        let remaining = keep.iter().filter(|k| **k).count();
        if remaining < self.k + 1 {
            return Err(ScaffoldError::InsufficientNodes {
                have: remaining,
                need: self.k + 1,
            });
        }
        let mut it = keep.iter();
        self.nodes.retain(|_| *it.next().unwrap());
        self.rebuild()
    }

    fn rebuild(&mut self) -> Result<(), ScaffoldError> {
        let k = self.k;
        let levels = self.pyramid.len().max(1);
        let (factor, coarse_k) = (self.pyramid_factor, self.coarse_k);
        self.build_topology(k)?;
        self.build_pyramid(levels, factor, coarse_k);
        self.build_anchor_index();
        Ok(())
    }
}

pub fn curve_distance_between(a: &ScaffoldNode, b: &ScaffoldNode) -> f64 {
    a.transforms
        .iter()
        .zip(&b.transforms)
        .map(|(ta, tb)| (ta.translation - tb.translation).norm())
        .fold(0.0, f64::max)
}

fn brute_nearest(nodes: &[ScaffoldNode], x: &Vector3<f64>, t: usize) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, n) in nodes.iter().enumerate() {
        let d2 = (x - n.translation(t)).norm_squared();
        if d2 < best.0 || (d2 == best.0 && i < best.1) {
            best = (d2, i);
        }
    }
    best.1
}

/// KNN among `subset` (global ids) under curve distance; neighbor lists are
/// sorted ascending by (distance, id).
fn knn_among(nodes: &[ScaffoldNode], subset: &[usize], k: usize) -> Vec<Vec<usize>> {
    subset
        .iter()
        .map(|&i| {
            let mut dists: Vec<(f64, usize)> = subset
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (curve_distance_between(&nodes[i], &nodes[j]), j))
                .collect();
            dists.sort_unstable_by(|a, b| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
            });
            dists.truncate(k);
            dists.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Farthest-point sampling order over all nodes under curve distance,
/// starting from node 0; prefixes of this order are nested samples.
fn farthest_point_order(nodes: &[ScaffoldNode]) -> Vec<usize> {
    let m = nodes.len();
    let mut order = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; m];
    let mut picked = vec![false; m];
    let mut current = 0usize;
    for _ in 0..m {
        order.push(current);
        picked[current] = true;
        for j in 0..m {
            if !picked[j] {
                let d = curve_distance_between(&nodes[current], &nodes[j]);
                if d < min_dist[j] {
                    min_dist[j] = d;
                }
            }
        }
        let mut next = (f64::NEG_INFINITY, usize::MAX);
        for j in 0..m {
            if !picked[j] && (min_dist[j] > next.0 || (min_dist[j] == next.0 && j < next.1)) {
                next = (min_dist[j], j);
            }
        }
        if next.1 == usize::MAX {
            break;
        }
        current = next.1;
    }
    order
}

/// Greedy curve-distance resampling: keep a candidate iff it is at least
/// `spacing` away from everything already kept. Returns kept indices in
/// input order.
pub fn resample_trajectories(candidates: &[Vec<Vector3<f64>>], spacing: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let ok = kept.iter().all(|&j| {
            let d = candidates[j]
                .iter()
                .zip(c)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            d >= spacing
        });
        if ok {
            kept.push(i);
        }
    }
    kept
}

/// Uniform spatial hash over node translations at one frame, returning the
/// exact same argmin (with lower-index tie-break) as a full scan.
#[derive(Clone, Debug)]
struct FrameGrid {
    origin: Vector3<f64>,
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    cell_lo: (i64, i64, i64),
    cell_hi: (i64, i64, i64),
}

impl FrameGrid {
    fn build(nodes: &[ScaffoldNode], t: usize) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for n in nodes {
            let p = n.translation(t);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        let extent = (hi - lo).amax().max(1e-9);
        let cell = extent / (nodes.len() as f64).cbrt().ceil().max(1.0);
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let key = |p: &Vector3<f64>| {
            (
                ((p.x - lo.x) / cell).floor() as i64,
                ((p.y - lo.y) / cell).floor() as i64,
                ((p.z - lo.z) / cell).floor() as i64,
            )
        };
        let mut cell_lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut cell_hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, n) in nodes.iter().enumerate() {
            let k = key(&n.translation(t));
            cell_lo = (cell_lo.0.min(k.0), cell_lo.1.min(k.1), cell_lo.2.min(k.2));
            cell_hi = (cell_hi.0.max(k.0), cell_hi.1.max(k.1), cell_hi.2.max(k.2));
            cells.entry(k).or_default().push(i as u32);
        }
        Self {
            origin: lo,
            cell,
            cells,
            cell_lo,
            cell_hi,
        }
    }

    fn nearest(&self, x: &Vector3<f64>, nodes: &[ScaffoldNode], t: usize) -> usize {
        // Clamp the start cell into the occupied range: queries far outside
        // the node bounding box would otherwise spin through billions of
        // empty rings. Clamping only shrinks per-axis cell distances, so the
        // (ring - 1) pruning bound below stays valid.
        let cx = (((x.x - self.origin.x) / self.cell).floor() as i64)
            .clamp(self.cell_lo.0, self.cell_hi.0);
        let cy = (((x.y - self.origin.y) / self.cell).floor() as i64)
            .clamp(self.cell_lo.1, self.cell_hi.1);
        let cz = (((x.z - self.origin.z) / self.cell).floor() as i64)
            .clamp(self.cell_lo.2, self.cell_hi.2);
        let max_ring = [
            (cx - self.cell_lo.0).abs(),
            (cx - self.cell_hi.0).abs(),
            (cy - self.cell_lo.1).abs(),
            (cy - self.cell_hi.1).abs(),
            (cz - self.cell_lo.2).abs(),
            (cz - self.cell_hi.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap();
        let mut best = (f64::INFINITY, usize::MAX);
        for ring in 0..=max_ring {
            // Any cell in this ring is at least (ring − 1) cells away from
            // the query's own cell, so once the best hit beats that bound
            // no farther ring can improve it.
            if best.1 != usize::MAX {
                let bound = (ring - 1).max(0) as f64 * self.cell;
                if best.0 <= bound * bound {
                    break;
                }
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &i in ids {
                                let i = i as usize;
                                let d2 = (x - nodes[i].translation(t)).norm_squared();
                                if d2 < best.0 || (d2 == best.0 && i < best.1) {
                                    best = (d2, i);
                                }
                            }
                        }
                    }
                }
            }
        }
        best.1
    }
}
