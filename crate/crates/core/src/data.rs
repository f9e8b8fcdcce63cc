//! Annotation files, PNG images, instance cropping and the synthetic
//! two-person dataset generator.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ImageCrop;
use crate::error::{Error, Result};
use crate::pose::{Frame, GroundTruthPose};
use crate::skeleton::{BoundingBox, SkeletonSpec};
use crate::tensor::Tensor;

/// Fraction by which a person box is enlarged before cropping.
pub const CROP_MARGIN: f64 = 0.15;

/// File name of the annotation document inside a dataset directory.
pub const ANNOTATION_FILE: &str = "annotations.json";

/// Reads a PNG as a `C x H x W` tensor in `[0, 1]`; `channels` is 1 (luma) or 3.
pub fn load_png(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    let (w, h, raw) = match channels {
        1 => {
            let g = img.to_luma8();
            (g.width() as usize, g.height() as usize, g.into_raw())
        }
        3 => {
            let c = img.to_rgb8();
            (c.width() as usize, c.height() as usize, c.into_raw())
        }
        n => return Err(Error::Config(format!("unsupported channel count {n}"))),
    };
    let mut data = vec![0.0; channels * h * w];
    for (i, px) in raw.chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * h * w + i] = v as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Writes a 1- or 3-channel tensor in `[0, 1]` as PNG.
pub fn save_png(path: &Path, pixels: &Tensor) -> Result<()> {
    let &[c, h, w] = pixels.shape() else {
        return Err(Error::Shape(format!("image must be C x H x W, got {:?}", pixels.shape())));
    };
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut raw = vec![0u8; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            raw[i * c + ch] = quant(pixels.data()[ch * h * w + i]);
        }
    }
    let color = match c {
        1 => image::ColorType::L8,
        3 => image::ColorType::Rgb8,
        n => return Err(Error::Shape(format!("cannot write a {n}-channel image"))),
    };
    image::save_buffer(path, &raw, w as u32, h as u32, color).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    File(PathBuf),
    Pixels(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub bbox: BoundingBox,
    /// Pixel frame.
    pub pose: GroundTruthPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub image_id: u64,
    pub image: ImageSource,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
    /// Annotated person pairs, as indices into `instances`.
    pub pairs: Option<Vec<(usize, usize)>>,
}

impl DatasetRecord {
    pub fn pixels(&self, channels: usize) -> Result<Tensor> {
        let px = match &self.image {
            ImageSource::File(path) => load_png(path, channels)?,
            ImageSource::Pixels(t) => t.clone(),
        };
        if px.shape() != [channels, self.height, self.width] {
            return Err(self.error(format!(
                "image is {:?}, expected {channels} x {} x {}",
                px.shape(),
                self.height,
                self.width
            )));
        }
        Ok(px)
    }

    fn error(&self, reason: impl Into<String>) -> Error {
        Error::Data {
            record: format!("image {}", self.image_id),
            reason: reason.into(),
        }
    }

    /// Labeled joints must lie within the image extended by `margin` pixels
    /// on every side; pair indices must be valid and distinct.
    pub fn validate(&self, num_joints: usize, margin: f64) -> Result<()> {
        for inst in &self.instances {
            if inst.pose.len() != num_joints {
                return Err(self.error(format!(
                    "instance {} has {} joints, skeleton has {num_joints}",
                    inst.id,
                    inst.pose.len()
                )));
            }
            inst.bbox.validate().map_err(|e| self.error(format!("instance {}: {e}", inst.id)))?;
            for (k, c) in inst.pose.coords.iter().enumerate() {
                let inside = c[0] >= -margin
                    && c[0] <= self.width as f64 + margin
                    && c[1] >= -margin
                    && c[1] <= self.height as f64 + margin;
                if inst.pose.labeled[k] && !inside {
                    return Err(self.error(format!(
                        "instance {} joint {k} at ({}, {}) lies outside the image",
                        inst.id, c[0], c[1]
                    )));
                }
            }
        }
        for &(a, b) in self.pairs.iter().flatten() {
            if a == b || a >= self.instances.len() || b >= self.instances.len() {
                return Err(self.error(format!("invalid pair ({a}, {b})")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Name of a bundled skeleton.
    pub skeleton: String,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn skeleton_spec(&self) -> Result<SkeletonSpec> {
        SkeletonSpec::bundled(&self.skeleton)
            .ok_or_else(|| Error::Config(format!("unknown skeleton {:?}", self.skeleton)))
    }

    pub fn num_instances(&self) -> usize {
        self.records.iter().map(|r| r.instances.len()).sum()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    #[serde(default = "default_skeleton")]
    skeleton: String,
    images: Vec<ImageEntry>,
    annotations: Vec<AnnotationEntry>,
}

fn default_skeleton() -> String {
    "ocpose12".to_string()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageEntry {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
    /// Pairs of annotation ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pairs: Option<Vec<[u64; 2]>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationEntry {
    id: u64,
    image_id: u64,
    /// `[x, y, width, height]`.
    bbox: [f64; 4],
    /// Flat `(x, y, v)` triples; `v` is 0 labeled but invisible, 1 visible,
    /// 2 unlabeled.
    keypoints: Vec<f64>,
}

/// Accepts either an annotation file or a dataset directory containing one.
pub fn annotation_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ANNOTATION_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_annotations(path: &Path) -> Result<Dataset> {
    let path = annotation_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let skeleton = SkeletonSpec::bundled(&file.skeleton)
        .ok_or_else(|| Error::Config(format!("unknown skeleton {:?}", file.skeleton)))?;
    let n = skeleton.num_joints();

    let mut records = Vec::with_capacity(file.images.len());
    let mut slot = HashMap::new();
    for img in &file.images {
        if slot.insert(img.id, records.len()).is_some() {
            return Err(Error::Data {
                record: format!("image {}", img.id),
                reason: "duplicate image id".into(),
            });
        }
        records.push(DatasetRecord {
            image_id: img.id,
            image: ImageSource::File(base.join(&img.file_name)),
            width: img.width,
            height: img.height,
            instances: Vec::new(),
            pairs: None,
        });
    }
    let mut ann_ids = HashSet::new();
    for ann in &file.annotations {
        let err = |reason: String| Error::Data {
            record: format!("annotation {}", ann.id),
            reason,
        };
        if !ann_ids.insert(ann.id) {
            return Err(err("duplicate annotation id".into()));
        }
        let &r = slot
            .get(&ann.image_id)
            .ok_or_else(|| err(format!("unknown image {}", ann.image_id)))?;
        if ann.keypoints.len() != 3 * n {
            return Err(err(format!(
                "{} keypoint values, expected {} (x, y, v) triples",
                ann.keypoints.len(),
                n
            )));
        }
        let mut coords = Vec::with_capacity(n);
        let mut labeled = Vec::with_capacity(n);
        let mut visible = Vec::with_capacity(n);
        for (k, t) in ann.keypoints.chunks(3).enumerate() {
            let (l, v) = match t[2] {
                v if v == 0.0 => (true, false),
                v if v == 1.0 => (true, true),
                v if v == 2.0 => (false, false),
                v => return Err(err(format!("joint {k} has visibility flag {v}"))),
            };
            coords.push([t[0], t[1]]);
            labeled.push(l);
            visible.push(v);
        }
        let pose = GroundTruthPose::new(coords, labeled, visible, Frame::Pixel)
            .map_err(|e| err(e.to_string()))?;
        let [x, y, w, h] = ann.bbox;
        let bbox = BoundingBox::from_xywh(x, y, w, h).map_err(|e| err(e.to_string()))?;
        records[r].instances.push(Instance {
            id: ann.id,
            bbox,
            pose,
        });
    }
    for img in &file.images {
        let record = &mut records[slot[&img.id]];
        if let Some(pairs) = &img.pairs {
            let index: HashMap<u64, usize> =
                record.instances.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
            let mut resolved = Vec::with_capacity(pairs.len());
            for &[a, b] in pairs {
                match (index.get(&a), index.get(&b)) {
                    (Some(&i), Some(&j)) => resolved.push((i, j)),
                    _ => {
                        return Err(record.error(format!(
                            "pair ({a}, {b}) names an annotation outside this image"
                        )))
                    }
                }
            }
            record.pairs = Some(resolved);
        }
        let margin = 0.1 * record.width.max(record.height) as f64;
        record.validate(n, margin)?;
    }
    Ok(Dataset {
        skeleton: file.skeleton,
        records,
    })
}

/// Writes the annotation document. File-backed images are referenced
/// relative to the document's directory when possible.
pub fn save_annotations(path: &Path, dataset: &Dataset) -> Result<()> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for r in &dataset.records {
        let ImageSource::File(file) = &r.image else {
            return Err(r.error("in-memory image must be written to disk first"));
        };
        let file_name = file.strip_prefix(&base).unwrap_or(file).to_string_lossy().into_owned();
        images.push(ImageEntry {
            id: r.image_id,
            file_name,
            width: r.width,
            height: r.height,
            pairs: r
                .pairs
                .as_ref()
                .map(|ps| ps.iter().map(|&(a, b)| [r.instances[a].id, r.instances[b].id]).collect()),
        });
        for inst in &r.instances {
            let p = &inst.pose;
            let keypoints = (0..p.len())
                .flat_map(|k| {
                    let v = match (p.labeled[k], p.visible[k]) {
                        (true, true) => 1.0,
                        (true, false) => 0.0,
                        _ => 2.0,
                    };
                    [p.coords[k][0], p.coords[k][1], v]
                })
                .collect();
            let b = inst.bbox;
            annotations.push(AnnotationEntry {
                id: inst.id,
                image_id: r.image_id,
                bbox: [b.x1, b.y1, b.width(), b.height()],
                keypoints,
            });
        }
    }
    let file = AnnotationFile {
        skeleton: dataset.skeleton.clone(),
        images,
        annotations,
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes in-memory images as PNGs under `dir/images/` plus the annotation
/// document, returning the dataset as it reads back from disk.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<Dataset> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut out = dataset.clone();
    for r in &mut out.records {
        if let ImageSource::Pixels(px) = &r.image {
            let file = images.join(format!("{:06}.png", r.image_id));
            save_png(&file, px)?;
            r.image = ImageSource::File(file);
        }
    }
    save_annotations(&dir.join(ANNOTATION_FILE), &out)?;
    Ok(out)
}

/// Axis-aligned map `p' = scale * p + offset` between pixel frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub scale: [f64; 2],
    pub offset: [f64; 2],
}

impl CropTransform {
    pub fn identity() -> Self {
        CropTransform {
            scale: [1.0, 1.0],
            offset: [0.0, 0.0],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.scale[0] * p[0] + self.offset[0],
            self.scale[1] * p[1] + self.offset[1],
        ]
    }

    pub fn inverse(&self) -> Self {
        let s = [1.0 / self.scale[0], 1.0 / self.scale[1]];
        CropTransform {
            scale: s,
            offset: [-self.offset[0] * s[0], -self.offset[1] * s[1]],
        }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &CropTransform) -> Self {
        CropTransform {
            scale: [self.scale[0] * next.scale[0], self.scale[1] * next.scale[1]],
            offset: [
                next.scale[0] * self.offset[0] + next.offset[0],
                next.scale[1] * self.offset[1] + next.offset[1],
            ],
        }
    }
}

/// The person box enlarged by `margin` of its size around its center.
pub fn expand_box(b: &BoundingBox, margin: f64) -> BoundingBox {
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() * (1.0 + margin) / 2.0, b.height() * (1.0 + margin) / 2.0);
    BoundingBox {
        x1: cx - hw,
        y1: cy - hh,
        x2: cx + hw,
        y2: cy + hh,
    }
}

/// Crops `bbox` (enlarged by `margin`) from a `C x H x W` image and resizes
/// it to `target = [h, w]` bilinearly; area outside the image reads as 0.
/// Returns the crop and the source-to-crop pixel transform.
pub fn crop_instance(
    image: &Tensor,
    image_id: u64,
    bbox: &BoundingBox,
    target: [usize; 2],
    margin: f64,
) -> Result<(ImageCrop, CropTransform)> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("image must be C x H x W, got {:?}", image.shape())));
    };
    bbox.validate()?;
    let region = expand_box(bbox, margin);
    let ix = region.x2.min(w as f64) - region.x1.max(0.0);
    let iy = region.y2.min(h as f64) - region.y1.max(0.0);
    if ix <= 0.0 || iy <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "box {region:?} does not intersect the {w}x{h} image"
        )));
    }
    let [th, tw] = target;
    let sx = tw as f64 / region.width();
    let sy = th as f64 / region.height();
    let transform = CropTransform {
        scale: [sx, sy],
        offset: [-region.x1 * sx, -region.y1 * sy],
    };
    let taps = |n_out: usize, start: f64, s: f64, n_in: usize| -> Vec<[(usize, f64); 2]> {
        (0..n_out)
            .map(|j| {
                let u = (j as f64 + 0.5) / s + start - 0.5;
                let lo = u.floor();
                let f = u - lo;
                let weight = |i: f64, wgt: f64| {
                    if i >= 0.0 && i < n_in as f64 {
                        (i as usize, wgt)
                    } else {
                        (0, 0.0)
                    }
                };
                [weight(lo, 1.0 - f), weight(lo + 1.0, f)]
            })
            .collect()
    };
    let tx = taps(tw, region.x1, sx, w);
    let ty = taps(th, region.y1, sy, h);
    let src = image.data();
    let mut out = vec![0.0; c * th * tw];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (i, ry) in ty.iter().enumerate() {
            for (j, rx) in tx.iter().enumerate() {
                let mut v = 0.0;
                for &(yi, wy) in ry {
                    if wy == 0.0 {
                        continue;
                    }
                    for &(xi, wx) in rx {
                        if wx != 0.0 {
                            v += wy * wx * plane[yi * w + xi];
                        }
                    }
                }
                out[(ch * th + i) * tw + j] = v;
            }
        }
    }
    Ok((
        ImageCrop {
            pixels: Tensor::from_vec(&[c, th, tw], out)?,
            source_box: region,
            source_image_id: image_id,
        },
        transform,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_images: usize,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub skeleton: String,
    /// Bounds on every skeleton edge length, in pixels.
    pub limb_length: [f64; 2],
    pub limb_thickness: [f64; 2],
    /// Target fraction of labeled joints that are invisible.
    pub occlusion_target: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 100,
            image_size: [64, 64],
            skeleton: "ocpose12".into(),
            limb_length: [6.0, 11.0],
            limb_thickness: [2.0, 3.0],
            occlusion_target: 0.2,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.skeleton != "ocpose12" {
            return Err(Error::Config(format!(
                "synthetic figures need the ocpose12 skeleton, got {:?}",
                self.skeleton
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_target) {
            return Err(Error::Config(format!(
                "occlusion_target {} outside [0, 1]",
                self.occlusion_target
            )));
        }
        let [lo, hi] = self.limb_length;
        let [tlo, thi] = self.limb_thickness;
        if !(lo > 0.0 && hi > lo && tlo > 0.0 && thi >= tlo && self.noise >= 0.0) {
            return Err(Error::Config("limb ranges must be positive and ordered".into()));
        }
        let [h, w] = self.image_size;
        let span = 4.0 * hi;
        if (h as f64) < span || (w as f64) < span {
            return Err(Error::Config(format!(
                "image {h}x{w} is too small for limbs up to {hi} px"
            )));
        }
        Ok(())
    }
}

/// Joint positions of one stick figure plus its drawing parameters.
#[derive(Clone, Debug)]
struct Figure {
    joints: Vec<[f64; 2]>,
    thickness: f64,
}

/// Person on the left/right axis of the picture, limbs mirrored with noise.
fn sample_figure(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Figure {
    let [lo, hi] = cfg.limb_length;
    let skeleton = SkeletonSpec::ocpose12();
    let jitter = Normal::new(0.0, 0.25).expect("valid deviation");
    loop {
        let sw = rng.random_range(lo..0.9 * hi);
        let hw = (sw * rng.random_range(0.75..0.95)).max(lo);
        let tl = rng.random_range(lo + 0.4 * (hi - lo)..hi);
        let tilt: f64 = rng.random_range(-0.15..0.15);
        let upper = rng.random_range(lo..hi);
        let fore = rng.random_range(lo..hi);
        let thigh = rng.random_range(lo..hi);
        let shin = rng.random_range(lo..hi);
        let arm = rng.random_range(-0.3..0.9) * std::f64::consts::PI;
        let elbow = rng.random_range(-0.5..0.8) * std::f64::consts::PI;
        let leg = rng.random_range(-0.1..0.3) * std::f64::consts::PI;
        let knee = rng.random_range(-0.3..0.3) * std::f64::consts::PI;
        let mut joints = vec![[0.0; 2]; 12];
        for (side, sign) in [(0usize, -1.0), (1usize, 1.0)] {
            let (a1, a2, l1, l2) = if side == 0 {
                (arm, elbow, leg, knee)
            } else {
                (
                    arm + jitter.sample(rng),
                    elbow + jitter.sample(rng),
                    leg + jitter.sample(rng),
                    knee + jitter.sample(rng),
                )
            };
            let dir = |a: f64| [sign * a.sin(), a.cos()];
            let shoulder = [sign * sw / 2.0, 0.0];
            let hip = [sign * hw / 2.0, tl];
            let step = |p: [f64; 2], d: [f64; 2], len: f64| [p[0] + len * d[0], p[1] + len * d[1]];
            let elbow_p = step(shoulder, dir(a1), upper);
            let wrist = step(elbow_p, dir(a1 + a2), fore);
            let knee_p = step(hip, dir(l1), thigh);
            let ankle = step(knee_p, dir(l1 + l2), shin);
            for (part, p) in [shoulder, elbow_p, wrist, hip, knee_p, ankle].into_iter().enumerate() {
                joints[2 * part + side] = p;
            }
        }
        let (s, c) = tilt.sin_cos();
        for p in &mut joints {
            *p = [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        }
        let ok = skeleton.edges.iter().all(|&(a, b)| {
            let d = dist(joints[a], joints[b]);
            d >= lo && d <= hi
        });
        if ok {
            let [tlo, thi] = cfg.limb_thickness;
            let thickness = if thi > tlo { rng.random_range(tlo..thi) } else { tlo };
            return Figure { joints, thickness };
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Torso quadrilateral: shoulders then hips, in drawing order.
fn torso(f: &Figure) -> [[f64; 2]; 4] {
    [f.joints[0], f.joints[1], f.joints[7], f.joints[6]]
}

fn inside_convex(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut sign = 0.0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

fn translated(f: &Figure, d: [f64; 2]) -> Figure {
    Figure {
        joints: f.joints.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect(),
        thickness: f.thickness,
    }
}

/// Whether joint `p` is hidden by the drawn limbs, joint markers or torso of `front`.
fn covered_by(p: [f64; 2], front: &Figure, edges: &[(usize, usize)]) -> bool {
    let reach = front.thickness / 2.0 + 0.5;
    edges
        .iter()
        .any(|&(a, b)| segment_distance(p, front.joints[a], front.joints[b]) <= reach)
        || front.joints.iter().any(|&q| dist(p, q) <= joint_radius(front))
        || inside_convex(p, &torso(front))
}

fn joint_radius(f: &Figure) -> f64 {
    0.8 * f.thickness
}

fn fits(f: &Figure, w: usize, h: usize, pad: f64) -> bool {
    f.joints
        .iter()
        .all(|p| p[0] >= pad && p[0] <= w as f64 - pad && p[1] >= pad && p[1] <= h as f64 - pad)
}

fn figure_box(f: &Figure, w: usize, h: usize) -> BoundingBox {
    let pad = f.thickness + 2.0;
    let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &f.joints {
        x1 = x1.min(p[0]);
        y1 = y1.min(p[1]);
        x2 = x2.max(p[0]);
        y2 = y2.max(p[1]);
    }
    BoundingBox {
        x1: (x1 - pad).max(0.0),
        y1: (y1 - pad).max(0.0),
        x2: (x2 + pad).min(w as f64),
        y2: (y2 + pad).min(h as f64),
    }
}

/// Intensities of torso, limbs and joint markers.
struct Shade {
    torso: f64,
    limb: f64,
    joint: f64,
}

fn draw(canvas: &mut [f64], w: usize, h: usize, f: &Figure, edges: &[(usize, usize)], shade: &Shade) {
    let quad = torso(f);
    let r_limb = f.thickness / 2.0;
    let r_joint = joint_radius(f);
    for i in 0..h {
        for j in 0..w {
            let p = [j as f64 + 0.5, i as f64 + 0.5];
            let px = &mut canvas[i * w + j];
            if inside_convex(p, &quad) {
                *px = shade.torso;
            }
            let d = edges
                .iter()
                .map(|&(a, b)| segment_distance(p, f.joints[a], f.joints[b]))
                .fold(f64::INFINITY, f64::min);
            let alpha = (r_limb + 0.5 - d).clamp(0.0, 1.0);
            *px = *px * (1.0 - alpha) + shade.limb * alpha;
            let d = f.joints.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min);
            let alpha = (r_joint + 0.5 - d).clamp(0.0, 1.0);
            *px = *px * (1.0 - alpha) + shade.joint * alpha;
        }
    }
}

const BACK: Shade = Shade {
    torso: 0.3,
    limb: 0.45,
    joint: 0.6,
};
const FRONT: Shade = Shade {
    torso: 0.55,
    limb: 0.8,
    joint: 1.0,
};

/// Measured fraction of labeled joints marked invisible.
pub fn occlusion_fraction(records: &[DatasetRecord]) -> f64 {
    let (mut inv, mut lab) = (0usize, 0usize);
    for inst in records.iter().flat_map(|r| &r.instances) {
        inv += inst.pose.num_invisible();
        lab += inst.pose.num_labeled();
    }
    if lab == 0 {
        0.0
    } else {
        inv as f64 / lab as f64
    }
}

/// Renders two overlapping stick figures per image, the second drawn over
/// the first. Joints of the back figure covered by the front one are
/// labeled invisible. Record `i` draws from a generator seeded with
/// `seed + i`; the front figure's placement is chosen among candidates so
/// the running invisible fraction tracks `occlusion_target`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let skeleton = SkeletonSpec::ocpose12();
    let [h, w] = cfg.image_size;
    let n = skeleton.num_joints();
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid deviation");
    let mut records = Vec::with_capacity(cfg.num_images);
    let (mut invisible, mut labeled) = (0usize, 0usize);
    for idx in 0..cfg.num_images {
        let image_id = idx as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(image_id));
        let mut placed = None;
        for _attempt in 0..200 {
            let back = sample_figure(&mut rng, cfg);
            let front = sample_figure(&mut rng, cfg);
            let pad = back.thickness.max(front.thickness) + 1.0;
            let cx = rng.random_range(0.3..0.7) * w as f64;
            let cy = rng.random_range(0.2..0.45) * h as f64;
            let back = translated(&back, [cx, cy]);
            if !fits(&back, w, h, pad) {
                continue;
            }
            let mut best: Option<(f64, Figure, Vec<bool>)> = None;
            for _ in 0..40 {
                let dx = rng.random_range(-1.0..1.0) * 2.0 * cfg.limb_length[1];
                let dy = rng.random_range(-0.5..0.5) * cfg.limb_length[1];
                let cand = translated(&front, [cx + dx, cy + dy]);
                if !fits(&cand, w, h, pad) {
                    continue;
                }
                let hidden: Vec<bool> =
                    back.joints.iter().map(|&p| covered_by(p, &cand, &skeleton.edges)).collect();
                let k = hidden.iter().filter(|&&x| x).count();
                let frac = (invisible + k) as f64 / (labeled + 2 * n) as f64;
                let gap = (frac - cfg.occlusion_target).abs();
                if best.as_ref().is_none_or(|(g, _, _)| gap < *g) {
                    best = Some((gap, cand, hidden));
                }
            }
            if let Some((_, front, hidden)) = best {
                placed = Some((back, front, hidden));
                break;
            }
        }
        let (back, front, hidden) = placed.ok_or_else(|| Error::Data {
            record: format!("image {image_id}"),
            reason: "could not place two figures inside the image".into(),
        })?;

        let mut canvas = vec![0.1; h * w];
        draw(&mut canvas, w, h, &back, &skeleton.edges, &BACK);
        draw(&mut canvas, w, h, &front, &skeleton.edges, &FRONT);
        for px in &mut canvas {
            let v = if cfg.noise > 0.0 { *px + noise.sample(&mut rng) } else { *px };
            *px = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }

        let k = hidden.iter().filter(|&&x| x).count();
        invisible += k;
        labeled += 2 * n;
        let make = |f: &Figure, hidden: &[bool], id: u64| -> Result<Instance> {
            Ok(Instance {
                id,
                bbox: figure_box(f, w, h),
                pose: GroundTruthPose::new(
                    f.joints.clone(),
                    vec![true; n],
                    hidden.iter().map(|&x| !x).collect(),
                    Frame::Pixel,
                )?,
            })
        };
        records.push(DatasetRecord {
            image_id,
            image: ImageSource::Pixels(Tensor::from_vec(&[1, h, w], canvas)?),
            width: w,
            height: h,
            instances: vec![make(&back, &hidden, 2 * image_id)?, make(&front, &[false; 12], 2 * image_id + 1)?],
            pairs: Some(vec![(0, 1)]),
        });
    }
    let frac = occlusion_fraction(&records);
    if cfg.num_images > 0 && (frac - cfg.occlusion_target).abs() > 0.1 {
        return Err(Error::Data {
            record: "synthetic set".into(),
            reason: format!(
                "reached occlusion fraction {frac:.3}, target {}",
                cfg.occlusion_target
            ),
        });
    }
    Ok(Dataset {
        skeleton: cfg.skeleton.clone(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(num: usize, target: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            num_images: num,
            occlusion_target: target,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_generate(&small(4, 0.2, 7)).unwrap();
        let b = synth_generate(&small(4, 0.2, 7)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&small(4, 0.2, 8)).unwrap();
        assert_ne!(a.records[0].image, c.records[0].image);
    }

    #[test]
    fn synth_hits_occlusion_target() {
        let ds = synth_generate(&small(200, 0.3, 1)).unwrap();
        let frac = occlusion_fraction(&ds.records);
        assert!((0.2..=0.4).contains(&frac), "{frac}");
        let ds = synth_generate(&small(50, 0.0, 1)).unwrap();
        assert!(occlusion_fraction(&ds.records) <= 0.1);
    }

    #[test]
    fn synth_respects_bounds_and_limb_lengths() {
        let cfg = small(30, 0.2, 3);
        let ds = synth_generate(&cfg).unwrap();
        let sk = SkeletonSpec::ocpose12();
        for r in &ds.records {
            r.validate(12, 0.0).unwrap();
            assert_eq!(r.pairs, Some(vec![(0, 1)]));
            assert_eq!(r.instances[1].pose.num_invisible(), 0);
            for inst in &r.instances {
                for &(a, b) in &sk.edges {
                    let d = dist(inst.pose.coords[a], inst.pose.coords[b]);
                    assert!(d >= cfg.limb_length[0] - 1e-9 && d <= cfg.limb_length[1] + 1e-9);
                }
                for c in &inst.pose.coords {
                    assert!(c[0] >= inst.bbox.x1 && c[0] <= inst.bbox.x2);
                    assert!(c[1] >= inst.bbox.y1 && c[1] <= inst.bbox.y2);
                }
            }
        }
    }

    #[test]
    fn synth_rejects_bad_configs() {
        assert!(synth_generate(&SynthConfig { occlusion_target: 1.5, ..small(1, 0.2, 0) }).is_err());
        assert!(synth_generate(&SynthConfig { skeleton: "coco17".into(), ..small(1, 0.2, 0) }).is_err());
        // more than the back figure can provide
        assert!(synth_generate(&small(20, 0.9, 0)).is_err());
    }

    #[test]
    fn crop_identity_case() {
        let img = Tensor::from_vec(&[1, 4, 6], (0..24).map(|v| v as f64 / 24.0).collect()).unwrap();
        let b = BoundingBox::new(0.0, 0.0, 6.0, 4.0).unwrap();
        let (crop, t) = crop_instance(&img, 0, &b, [4, 6], 0.0).unwrap();
        assert_eq!(crop.pixels, img);
        assert_eq!(t, CropTransform::identity());
    }

    #[test]
    fn crop_rejects_outside_boxes() {
        let img = Tensor::zeros(&[1, 8, 8]);
        let b = BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert!(crop_instance(&img, 0, &b, [8, 8], CROP_MARGIN).is_err());
    }

    #[test]
    fn crop_samples_expected_pixels() {
        // a linear ramp is reproduced exactly by bilinear resampling
        let (h, w) = (20, 30);
        let img = Tensor::from_vec(&[1, h, w], (0..h * w).map(|i| (i % w) as f64 + 0.5).collect()).unwrap();
        let b = BoundingBox::new(5.0, 4.0, 25.0, 16.0).unwrap();
        let (crop, t) = crop_instance(&img, 0, &b, [16, 16], CROP_MARGIN).unwrap();
        let inv = t.inverse();
        for i in 0..16 {
            for j in 0..16 {
                let src = inv.apply([j as f64 + 0.5, i as f64 + 0.5]);
                if src[0] > 0.5 && src[0] < w as f64 - 0.5 {
                    assert!((crop.pixels.get3(0, i, j) - src[0]).abs() < 1e-9);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn crop_transform_round_trip_and_interior_joints(
            x in 0.0..40.0f64, y in 0.0..40.0f64, bw in 4.0..30.0f64, bh in 4.0..30.0f64,
            pts in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 50),
        ) {
            let img = Tensor::zeros(&[1, 64, 64]);
            let b = BoundingBox::from_xywh(x, y, bw, bh).unwrap();
            let (_, t) = crop_instance(&img, 0, &b, [32, 24], CROP_MARGIN).unwrap();
            let inv = t.inverse();
            for &(u, v) in &pts {
                let p = [x + u * bw, y + v * bh];
                let q = t.apply(p);
                prop_assert!(q[0] >= 0.0 && q[0] <= 24.0 && q[1] >= 0.0 && q[1] <= 32.0);
                let back = inv.apply(q);
                prop_assert!((back[0] - p[0]).abs() <= 1e-6 && (back[1] - p[1]).abs() <= 1e-6);
            }
        }

        #[test]
        fn crop_transforms_compose(
            x in 0.0..20.0f64, y in 0.0..20.0f64, bw in 8.0..40.0f64, bh in 8.0..40.0f64,
            px in 0.0..60.0f64, py in 0.0..60.0f64,
        ) {
            let img = Tensor::zeros(&[1, 64, 64]);
            let b1 = BoundingBox::from_xywh(x, y, bw, bh).unwrap();
            let (c1, t1) = crop_instance(&img, 0, &b1, [32, 32], CROP_MARGIN).unwrap();
            let full = BoundingBox::new(0.0, 0.0, 32.0, 32.0).unwrap();
            let (_, t2) = crop_instance(&c1.pixels, 0, &full, [32, 32], 0.0).unwrap();
            let composed = t1.then(&t2);
            let (a, d) = (composed.apply([px, py]), t1.apply([px, py]));
            prop_assert!((a[0] - d[0]).abs() <= 1e-6 && (a[1] - d[1]).abs() <= 1e-6);
        }
    }
}
