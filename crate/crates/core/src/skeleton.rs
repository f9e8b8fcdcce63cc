//! Skeleton topology, graph adjacency, and box-relative coordinate normalization.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Frame, Joint, Pose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    /// Limbs as unordered joint-index pairs.
    pub edges: Vec<(usize, usize)>,
    /// Left/right joint pairs swapped by a horizontal flip.
    pub flip_pairs: Vec<(usize, usize)>,
    /// Per-joint OKS falloff constants.
    pub oks_sigmas: Vec<f64>,
}

impl SkeletonSpec {
    /// The 12-joint couple-pose skeleton.
    ///
    /// Joint order: left/right shoulder, elbow, wrist, hip, knee, ankle,
    /// with left at even indices.
    pub fn ocpose12() -> Self {
        let parts = [
            ("shoulder", 0.079),
            ("elbow", 0.072),
            ("wrist", 0.062),
            ("hip", 0.107),
            ("knee", 0.087),
            ("ankle", 0.089),
        ];
        let mut joint_names = Vec::new();
        let mut oks_sigmas = Vec::new();
        for (part, sigma) in parts {
            for side in ["left", "right"] {
                joint_names.push(format!("{side}_{part}"));
                oks_sigmas.push(sigma);
            }
        }
        SkeletonSpec {
            joint_names,
            edges: vec![
                (0, 2),
                (2, 4),
                (1, 3),
                (3, 5),
                (6, 8),
                (8, 10),
                (7, 9),
                (9, 11),
                (0, 1),
                (6, 7),
                (0, 6),
                (1, 7),
            ],
            flip_pairs: (0..6).map(|p| (2 * p, 2 * p + 1)).collect(),
            oks_sigmas,
        }
    }

    /// Looks up a bundled skeleton by name.
    pub fn bundled(name: &str) -> Option<Self> {
        match name {
            "ocpose12" => Some(Self::ocpose12()),
            _ => None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: SkeletonSpec = serde_json::from_str(text)
            .map_err(|e| Error::Topology(format!("invalid skeleton document: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_joints();
        if n == 0 {
            return Err(Error::Topology("skeleton has no joints".into()));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.edges {
            if a >= n || b >= n {
                return Err(Error::Topology(format!(
                    "edge ({a}, {b}) out of range for {n} joints"
                )));
            }
            if a == b {
                return Err(Error::Topology(format!("self-edge on joint {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Topology(format!("duplicate edge ({a}, {b})")));
            }
        }
        let mut used = BTreeSet::new();
        for &(l, r) in &self.flip_pairs {
            if l >= n || r >= n || l == r || !used.insert(l) || !used.insert(r) {
                return Err(Error::Topology(format!("invalid flip pair ({l}, {r})")));
            }
        }
        if self.oks_sigmas.len() != n {
            return Err(Error::Topology(format!(
                "{} OKS sigmas for {n} joints",
                self.oks_sigmas.len()
            )));
        }
        if let Some(s) = self.oks_sigmas.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Topology(format!("OKS sigma {s} must be positive")));
        }
        Ok(())
    }

    /// Joint permutation applied by a horizontal flip (an involution).
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.num_joints()).collect();
        for &(l, r) in &self.flip_pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }
}

/// Binary symmetric adjacency with self-loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    size: usize,
    entries: Vec<u8>,
}

impl AdjacencyMatrix {
    fn with_self_loops(size: usize) -> Self {
        let mut entries = vec![0; size * size];
        for i in 0..size {
            entries[i * size + i] = 1;
        }
        AdjacencyMatrix { size, entries }
    }

    fn connect(&mut self, i: usize, j: usize) {
        self.entries[i * self.size + j] = 1;
        self.entries[j * self.size + i] = 1;
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.size + j]
    }

    pub fn nnz(&self) -> usize {
        self.entries.iter().filter(|&&e| e != 0).count()
    }

    /// Neighbor count including the node itself.
    pub fn degree(&self, i: usize) -> usize {
        self.entries[i * self.size..(i + 1) * self.size]
            .iter()
            .filter(|&&e| e != 0)
            .count()
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.entries.chunks(self.size).map(<[u8]>::to_vec).collect()
    }

    /// `D^-1 A`: each row averages over the node's neighborhood.
    pub fn mean_aggregation(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.size, self.size]);
        for i in 0..self.size {
            let d = self.degree(i) as f64;
            for j in 0..self.size {
                if self.get(i, j) != 0 {
                    t.data_mut()[i * self.size + j] = 1.0 / d;
                }
            }
        }
        t
    }
}

pub fn build_adjacency(skeleton: &SkeletonSpec) -> Result<AdjacencyMatrix> {
    skeleton.validate()?;
    let mut adj = AdjacencyMatrix::with_self_loops(skeleton.num_joints());
    for &(a, b) in &skeleton.edges {
        adj.connect(a, b);
    }
    Ok(adj)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoupleGraphSpec {
    pub base: SkeletonSpec,
    pub adjacency: AdjacencyMatrix,
    /// Limb edges of both skeletons, second copy offset by `N`.
    pub skeleton_edges: Vec<(usize, usize)>,
    /// `(i, i + N)` for every joint.
    pub interaction_edges: Vec<(usize, usize)>,
}

pub fn build_couple_graph(skeleton: &SkeletonSpec) -> Result<CoupleGraphSpec> {
    skeleton.validate()?;
    let n = skeleton.num_joints();
    let skeleton_edges: Vec<(usize, usize)> = skeleton
        .edges
        .iter()
        .flat_map(|&(a, b)| [(a, b), (a + n, b + n)])
        .collect();
    let interaction_edges: Vec<(usize, usize)> = (0..n).map(|i| (i, i + n)).collect();
    let mut adjacency = AdjacencyMatrix::with_self_loops(2 * n);
    for &(a, b) in skeleton_edges.iter().chain(&interaction_edges) {
        adjacency.connect(a, b);
    }
    Ok(CoupleGraphSpec {
        base: skeleton.clone(),
        adjacency,
        skeleton_edges,
        interaction_edges,
    })
}

/// Axis-aligned box in source-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::DegenerateBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn scaled(&self, factor: f64) -> BoundingBox {
        BoundingBox {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    pub fn normalize_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        (2.0 * (x - cx) / self.width(), 2.0 * (y - cy) / self.height())
    }

    pub fn denormalize_point(&self, u: f64, v: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        (cx + u * self.width() / 2.0, cy + v * self.height() / 2.0)
    }
}

/// Maps a pixel-frame pose into the box's `[-1, 1]` frame; confidences are untouched.
pub fn normalize_pose(pose: &Pose, bbox: &BoundingBox) -> Result<Pose> {
    bbox.validate()?;
    expect_frame(pose, Frame::Pixel)?;
    Ok(map_pose(pose, Frame::Normalized, |x, y| bbox.normalize_point(x, y)))
}

pub fn denormalize_pose(pose: &Pose, bbox: &BoundingBox) -> Result<Pose> {
    bbox.validate()?;
    expect_frame(pose, Frame::Normalized)?;
    Ok(map_pose(pose, Frame::Pixel, |u, v| bbox.denormalize_point(u, v)))
}

fn expect_frame(pose: &Pose, expected: Frame) -> Result<()> {
    if pose.frame != expected {
        return Err(Error::FrameMismatch {
            expected,
            found: pose.frame,
        });
    }
    Ok(())
}

fn map_pose(pose: &Pose, frame: Frame, f: impl Fn(f64, f64) -> (f64, f64)) -> Pose {
    Pose {
        joints: pose
            .joints
            .iter()
            .map(|j| {
                let (x, y) = f(j.x, j.y);
                Joint { x, y, c: j.c }
            })
            .collect(),
        frame,
    }
}
