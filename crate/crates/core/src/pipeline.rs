//! Turning annotated records into network samples, and running a model
//! over a dataset for evaluation.

use serde::{Deserialize, Serialize};

use crate::backbone::ImageCrop;
use crate::correction::pair_people;
use crate::data::{crop_instance, Dataset, CROP_MARGIN};
use crate::error::Result;
use crate::evaluation::{compute_map, inv_vis_breakdown, ApReport, GroundTruth, InvVisReport, Prediction};
use crate::model::{InstanceOutput, Model};
use crate::pose::{Frame, GroundTruthPose, Pose};
use crate::skeleton::{denormalize_pose, BoundingBox};

/// One person crop with its ground truth in the crop's normalized frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub crop: ImageCrop,
    pub gt: GroundTruthPose,
    /// Person box in source pixels.
    pub bbox: BoundingBox,
    pub record: usize,
    pub instance: usize,
}

impl Sample {
    /// Pixel-frame ground truth.
    pub fn gt_pixels(&self) -> GroundTruthPose {
        let coords = self
            .gt
            .coords
            .iter()
            .map(|c| {
                let (x, y) = self.crop.source_box.denormalize_point(c[0], c[1]);
                [x, y]
            })
            .collect();
        GroundTruthPose {
            coords,
            labeled: self.gt.labeled.clone(),
            visible: self.gt.visible.clone(),
            frame: Frame::Pixel,
        }
    }
}

/// Crops every instance of every record. Unlabeled joints get coordinates
/// `(0, 0)` so every sample is finite.
pub fn prepare_samples(dataset: &Dataset, channels: usize, crop_size: [usize; 2]) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(dataset.num_instances());
    for (ri, record) in dataset.records.iter().enumerate() {
        if record.instances.is_empty() {
            continue;
        }
        let pixels = record.pixels(channels)?;
        for (ii, inst) in record.instances.iter().enumerate() {
            let (crop, _) = crop_instance(&pixels, record.image_id, &inst.bbox, crop_size, CROP_MARGIN)?;
            let coords = inst
                .pose
                .coords
                .iter()
                .zip(&inst.pose.labeled)
                .map(|(c, &l)| {
                    if l {
                        let (u, v) = crop.source_box.normalize_point(c[0], c[1]);
                        [u, v]
                    } else {
                        [0.0, 0.0]
                    }
                })
                .collect();
            let gt = GroundTruthPose::new(
                coords,
                inst.pose.labeled.clone(),
                inst.pose.visible.clone(),
                Frame::Normalized,
            )?;
            samples.push(Sample {
                crop,
                gt,
                bbox: inst.bbox,
                record: ri,
                instance: ii,
            });
        }
    }
    Ok(samples)
}

/// Pairs of sample indices to refine jointly: the annotated pairs of a
/// record, or greedy box pairing when it has none.
pub fn couple_pairs(dataset: &Dataset, samples: &[Sample]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < samples.len() {
        let r = samples[start].record;
        let end = start + samples[start..].iter().take_while(|s| s.record == r).count();
        let record = &dataset.records[r];
        let pairs = match &record.pairs {
            Some(p) => p.clone(),
            None => {
                let boxed: Vec<(BoundingBox, Pose)> =
                    record.instances.iter().map(|i| (i.bbox, i.pose.as_pose())).collect();
                pair_people(&boxed)
            }
        };
        for (a, b) in pairs {
            out.push((start + a, start + b));
        }
        start = end;
    }
    out
}

/// Model output for one sample, in both frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrediction {
    pub initial: Pose,
    pub final_pose: Pose,
    pub initial_pixels: Pose,
    pub final_pixels: Pose,
}

/// Runs the model on every sample; with `couple` set, the final poses of
/// paired people are refined jointly.
pub fn predict(model: &Model, samples: &[Sample], pairs: Option<&[(usize, usize)]>) -> Result<Vec<SamplePrediction>> {
    let outputs = samples
        .iter()
        .map(|s| model.infer(&s.crop))
        .collect::<Result<Vec<InstanceOutput>>>()?;
    let mut finals: Vec<Pose> = outputs.iter().map(|o| o.trace.final_pose.clone()).collect();
    for &(a, b) in pairs.unwrap_or(&[]) {
        let (ra, rb) = model.refine_couple(
            &outputs[a],
            &samples[a].crop.source_box,
            &outputs[b],
            &samples[b].crop.source_box,
        )?;
        finals[a] = ra;
        finals[b] = rb;
    }
    outputs
        .into_iter()
        .zip(finals)
        .zip(samples)
        .map(|((o, f), s)| {
            Ok(SamplePrediction {
                initial_pixels: denormalize_pose(&o.initial, &s.crop.source_box)?,
                final_pixels: denormalize_pose(&f, &s.crop.source_box)?,
                initial: o.initial,
                final_pose: f,
            })
        })
        .collect()
}

/// Mean `|dx| + |dy|` per joint in the normalized crop frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointErrors {
    pub visible: f64,
    pub invisible: f64,
    pub visible_joints: usize,
    pub invisible_joints: usize,
}

pub fn joint_errors(preds: &[&Pose], samples: &[Sample]) -> JointErrors {
    let (mut sv, mut si, mut nv, mut ni) = (0.0, 0.0, 0usize, 0usize);
    for (p, s) in preds.iter().zip(samples) {
        for k in (0..s.gt.len()).filter(|&k| s.gt.labeled[k]) {
            let e = (p.joints[k].x - s.gt.coords[k][0]).abs() + (p.joints[k].y - s.gt.coords[k][1]).abs();
            if s.gt.visible[k] {
                sv += e;
                nv += 1;
            } else {
                si += e;
                ni += 1;
            }
        }
    }
    JointErrors {
        visible: if nv == 0 { 0.0 } else { sv / nv as f64 },
        invisible: if ni == 0 { 0.0 } else { si / ni as f64 },
        visible_joints: nv,
        invisible_joints: ni,
    }
}

/// Metrics for one pose stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub ap: ApReport,
    pub inv_vis: InvVisReport,
    pub errors: JointErrors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub initial: StageMetrics,
    #[serde(rename = "final")]
    pub final_stage: StageMetrics,
    pub instances: usize,
}

impl EvalReport {
    /// Side-by-side text tables.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&ApReport::header());
        s.push('\n');
        s.push_str(&self.initial.ap.row("initial"));
        s.push('\n');
        s.push_str(&self.final_stage.ap.row("final"));
        s.push_str("\n\n");
        s.push_str(&InvVisReport::header());
        s.push('\n');
        s.push_str(&self.initial.inv_vis.row("initial"));
        s.push('\n');
        s.push_str(&self.final_stage.inv_vis.row("final"));
        s.push_str("\n\n");
        s.push_str(&format!("{:<10} {:>9} {:>9}\n", "L1 error", "invisible", "visible"));
        for (name, e) in [("initial", &self.initial.errors), ("final", &self.final_stage.errors)] {
            s.push_str(&format!("{:<10} {:>9.4} {:>9.4}\n", name, e.invisible, e.visible));
        }
        s
    }
}

fn stage_metrics(
    poses_px: &[&Pose],
    poses_norm: &[&Pose],
    samples: &[Sample],
    dataset: &Dataset,
    sigmas: &[f64],
) -> Result<StageMetrics> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let mut pairs = Vec::with_capacity(samples.len());
    for ((p, s), _) in poses_px.iter().zip(samples).zip(poses_norm) {
        let record = &dataset.records[s.record];
        let gt = GroundTruth {
            image_id: record.image_id,
            instance_id: record.instances[s.instance].id,
            pose: s.gt_pixels(),
            bbox: s.bbox,
        };
        preds.push(Prediction {
            image_id: record.image_id,
            pose: (*p).clone(),
            score: p.mean_confidence(),
            bbox: Some(s.bbox),
        });
        pairs.push(((*p).clone(), gt.clone()));
        gts.push(gt);
    }
    Ok(StageMetrics {
        ap: compute_map(&preds, &gts, sigmas, false)?,
        inv_vis: inv_vis_breakdown(&pairs, sigmas)?,
        errors: joint_errors(poses_norm, samples),
    })
}

/// Initial- and final-pose metrics over `samples`.
pub fn evaluate(
    dataset: &Dataset,
    samples: &[Sample],
    preds: &[SamplePrediction],
    sigmas: &[f64],
) -> Result<EvalReport> {
    let init_px: Vec<&Pose> = preds.iter().map(|p| &p.initial_pixels).collect();
    let init_n: Vec<&Pose> = preds.iter().map(|p| &p.initial).collect();
    let fin_px: Vec<&Pose> = preds.iter().map(|p| &p.final_pixels).collect();
    let fin_n: Vec<&Pose> = preds.iter().map(|p| &p.final_pose).collect();
    Ok(EvalReport {
        initial: stage_metrics(&init_px, &init_n, samples, dataset, sigmas)?,
        final_stage: stage_metrics(&fin_px, &fin_n, samples, dataset, sigmas)?,
        instances: samples.len(),
    })
}
