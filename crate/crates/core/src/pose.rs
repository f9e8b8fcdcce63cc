//! Pose estimates and ground-truth annotations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate frame a pose is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Source-image pixels; pixel `(i, j)` covers `[j, j+1) x [i, i+1)`.
    Pixel,
    /// The `[-1, 1]^2` frame of a bounding box.
    Normalized,
    /// Cell indices of a heatmap grid (cell centers at integers).
    HeatmapGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    /// Confidence in `[0, 1]`.
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joints: Vec<Joint>,
    pub frame: Frame,
}

impl Pose {
    pub fn new(joints: Vec<Joint>, frame: Frame) -> Result<Self> {
        for (k, j) in joints.iter().enumerate() {
            if !j.x.is_finite() || !j.y.is_finite() {
                return Err(Error::InvalidInput(format!("joint {k} has non-finite coordinates")));
            }
            if !(0.0..=1.0).contains(&j.c) {
                return Err(Error::InvalidInput(format!(
                    "joint {k} confidence {} outside [0, 1]",
                    j.c
                )));
            }
        }
        Ok(Pose { joints, frame })
    }

    /// Builds a pose from an `N x 3` row-major `(x, y, c)` buffer.
    pub fn from_rows(rows: &[f64], frame: Frame) -> Result<Self> {
        if rows.len() % 3 != 0 {
            return Err(Error::Shape(format!("{} values is not a multiple of 3", rows.len())));
        }
        let joints = rows
            .chunks(3)
            .map(|r| Joint {
                x: r[0],
                y: r[1],
                c: r[2].clamp(0.0, 1.0),
            })
            .collect();
        Pose::new(joints, frame)
    }

    pub fn to_rows(&self) -> Vec<f64> {
        self.joints.iter().flat_map(|j| [j.x, j.y, j.c]).collect()
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.joints.is_empty() {
            return 0.0;
        }
        self.joints.iter().map(|j| j.c).sum::<f64>() / self.joints.len() as f64
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.joints.iter().map(|j| [j.x, j.y]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPose {
    pub coords: Vec<[f64; 2]>,
    /// Joint carries a ground-truth position.
    pub labeled: Vec<bool>,
    /// Joint is visible in the image. Implies `labeled`.
    pub visible: Vec<bool>,
    pub frame: Frame,
}

impl GroundTruthPose {
    pub fn new(
        coords: Vec<[f64; 2]>,
        labeled: Vec<bool>,
        visible: Vec<bool>,
        frame: Frame,
    ) -> Result<Self> {
        if coords.len() != labeled.len() || coords.len() != visible.len() {
            return Err(Error::Shape(format!(
                "ground truth lengths differ: coords {}, labeled {}, visible {}",
                coords.len(),
                labeled.len(),
                visible.len()
            )));
        }
        if let Some(k) = (0..coords.len()).find(|&k| visible[k] && !labeled[k]) {
            return Err(Error::InvalidInput(format!("joint {k} is visible but unlabeled")));
        }
        if let Some(k) = (0..coords.len())
            .find(|&k| labeled[k] && !(coords[k][0].is_finite() && coords[k][1].is_finite()))
        {
            return Err(Error::InvalidInput(format!("labeled joint {k} is not finite")));
        }
        Ok(GroundTruthPose {
            coords,
            labeled,
            visible,
            frame,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled.iter().filter(|&&l| l).count()
    }

    pub fn num_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn num_invisible(&self) -> usize {
        self.num_labeled() - self.num_visible()
    }

    /// `1.0` for labeled joints and `0.0` elsewhere.
    pub fn mask(&self) -> Vec<f64> {
        self.labeled.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
    }

    /// The ground truth as a full-confidence pose (unlabeled joints included as-is).
    pub fn as_pose(&self) -> Pose {
        Pose {
            joints: self
                .coords
                .iter()
                .map(|c| Joint {
                    x: c[0],
                    y: c[1],
                    c: 1.0,
                })
                .collect(),
            frame: self.frame,
        }
    }
}
