//! Keypoint similarity, COCO-style average precision, per-joint visibility
//! breakdowns and box-overlap statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::pose::{GroundTruthPose, Pose};
use crate::skeleton::BoundingBox;

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Per-joint similarity `exp(-d^2 / (2 s^2 k^2))` with `k = 2 sigma`.
pub fn joint_similarity(d2: f64, area: f64, sigma: f64) -> f64 {
    let k = 2.0 * sigma;
    (-d2 / (2.0 * area * k * k)).exp()
}

/// Object keypoint similarity averaged over the labeled joints of `gt`.
/// `area` is the object area in squared pixels.
pub fn compute_oks(pred: &Pose, gt: &GroundTruthPose, area: f64, sigmas: &[f64]) -> Result<f64> {
    if pred.frame != gt.frame {
        return Err(Error::FrameMismatch {
            expected: gt.frame,
            found: pred.frame,
        });
    }
    if pred.len() != gt.len() || sigmas.len() != gt.len() {
        return Err(Error::Shape(format!(
            "oks: {} predicted joints, {} ground-truth joints, {} sigmas",
            pred.len(),
            gt.len(),
            sigmas.len()
        )));
    }
    if !(area > 0.0) {
        return Err(Error::InvalidInput(format!("oks: object area {area} is not positive")));
    }
    let labeled = gt.num_labeled();
    if labeled == 0 {
        return Err(Error::InvalidInput("oks: no labeled joints".into()));
    }
    let total: f64 = (0..gt.len())
        .filter(|&k| gt.labeled[k])
        .map(|k| {
            let dx = pred.joints[k].x - gt.coords[k][0];
            let dy = pred.joints[k].y - gt.coords[k][1];
            joint_similarity(dx * dx + dy * dy, area, sigmas[k])
        })
        .sum();
    Ok(total / labeled as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: u64,
    pub pose: Pose,
    pub score: f64,
    /// Detection box, used by the background filter.
    #[serde(default)]
    pub bbox: Option<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub instance_id: u64,
    pub pose: GroundTruthPose,
    pub bbox: BoundingBox,
}

impl GroundTruth {
    pub fn area(&self) -> f64 {
        self.bbox.area()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub threshold: f64,
    pub ap: f64,
    /// Cumulative precision and recall after each score-ranked prediction.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub map_50_95: f64,
    pub ap_50: f64,
    pub ap_75: f64,
    pub ap_80: f64,
    pub ap_90: f64,
    pub curves: Vec<PrCurve>,
}

impl ApReport {
    pub fn header() -> String {
        format!("{:<10} {:>7} {:>7} {:>7} {:>7} {:>7}", "", "mAP", "AP50", "AP75", "AP80", "AP90")
    }

    pub fn row(&self, label: &str) -> String {
        format!(
            "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            label,
            100.0 * self.map_50_95,
            100.0 * self.ap_50,
            100.0 * self.ap_75,
            100.0 * self.ap_80,
            100.0 * self.ap_90
        )
    }
}

/// Ranks predictions by descending score; ties keep input order.
fn ranked(preds: &[&Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Precision at 101 evenly spaced recall levels, from the upper envelope of
/// the precision/recall curve.
fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < envelope.len() {
            total += envelope[idx];
        }
    }
    total / 101.0
}

fn check_ids(gts: &[GroundTruth]) -> Result<()> {
    let mut seen = HashSet::new();
    for g in gts {
        if !seen.insert((g.image_id, g.instance_id)) {
            return Err(Error::InvalidInput(format!(
                "ground-truth instance {} appears twice in image {}",
                g.instance_id, g.image_id
            )));
        }
    }
    Ok(())
}

/// Drops predictions whose box overlaps no ground-truth box of its image.
fn target_filtered<'a>(preds: &'a [Prediction], gts: &[GroundTruth]) -> Vec<&'a Prediction> {
    preds
        .iter()
        .filter(|p| match &p.bbox {
            None => true,
            Some(b) => gts.iter().any(|g| g.image_id == p.image_id && iou(b, &g.bbox) > 0.0),
        })
        .collect()
}

/// Average precision at one OKS threshold. Within each image predictions
/// are taken in descending score order and claim the unmatched ground truth
/// of highest OKS, provided it reaches `threshold`.
pub fn average_precision(
    preds: &[Prediction],
    gts: &[GroundTruth],
    sigmas: &[f64],
    threshold: f64,
    target_filter: bool,
) -> Result<PrCurve> {
    check_ids(gts)?;
    let preds: Vec<&Prediction> = if target_filter {
        target_filtered(preds, gts)
    } else {
        preds.iter().collect()
    };
    let scorable: Vec<&GroundTruth> = gts.iter().filter(|g| g.pose.num_labeled() > 0).collect();
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, g) in scorable.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(i);
    }
    let mut matched = vec![false; scorable.len()];
    let order = ranked(&preds);
    let mut tp = Vec::with_capacity(order.len());
    for &pi in &order {
        let p = preds[pi];
        let mut best: Option<(f64, usize)> = None;
        for &gi in by_image.get(&p.image_id).map(Vec::as_slice).unwrap_or(&[]) {
            if matched[gi] {
                continue;
            }
            let g = scorable[gi];
            let oks = compute_oks(&p.pose, &g.pose, g.area(), sigmas)?;
            if oks >= threshold && best.is_none_or(|(b, _)| oks > b) {
                best = Some((oks, gi));
            }
        }
        if let Some((_, gi)) = best {
            matched[gi] = true;
        }
        tp.push(best.is_some());
    }
    let npos = scorable.len();
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(if npos == 0 { 0.0 } else { hits as f64 / npos as f64 });
    }
    let ap = if npos == 0 { 0.0 } else { interpolated_ap(&precision, &recall) };
    Ok(PrCurve {
        threshold,
        ap,
        precision,
        recall,
    })
}

/// AP at every threshold in `0.50:0.05:0.95`, with their mean.
pub fn compute_map(
    preds: &[Prediction],
    gts: &[GroundTruth],
    sigmas: &[f64],
    target_filter: bool,
) -> Result<ApReport> {
    let curves = coco_thresholds()
        .into_iter()
        .map(|t| average_precision(preds, gts, sigmas, t, target_filter))
        .collect::<Result<Vec<_>>>()?;
    let at = |i: usize| curves[i].ap;
    Ok(ApReport {
        map_50_95: curves.iter().map(|c| c.ap).sum::<f64>() / curves.len() as f64,
        ap_50: at(0),
        ap_75: at(5),
        ap_80: at(6),
        ap_90: at(8),
        curves,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionStats {
    pub total: usize,
    /// Pairs with IoU strictly above 0.3, 0.5 and 0.75.
    pub counts: [usize; 3],
    pub fractions: [f64; 3],
    pub average_iou: f64,
    /// False when there are no pairs and `average_iou` is a placeholder 0.
    pub average_defined: bool,
}

pub const OCCLUSION_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.75];

impl OcclusionStats {
    pub fn from_ious(ious: &[f64]) -> Self {
        let total = ious.len();
        let counts = OCCLUSION_THRESHOLDS.map(|t| ious.iter().filter(|&&v| v > t).count());
        let fractions = counts.map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 });
        let average_iou = if total == 0 { 0.0 } else { ious.iter().sum::<f64>() / total as f64 };
        OcclusionStats {
            total,
            counts,
            fractions,
            average_iou,
            average_defined: total > 0,
        }
    }

    pub fn header() -> String {
        format!(
            "{:<12} {:>8} {:>16} {:>16} {:>16} {:>8}",
            "dataset", "total", "IoU>0.3", "IoU>0.5", "IoU>0.75", "average"
        )
    }

    pub fn row(&self, name: &str) -> String {
        let cell = |i: usize| format!("{} ({:.0}%)", self.counts[i], 100.0 * self.fractions[i]);
        let avg = if self.average_defined {
            format!("{:.2}", self.average_iou)
        } else {
            "n/a".to_string()
        };
        format!(
            "{:<12} {:>8} {:>16} {:>16} {:>16} {:>8}",
            name,
            self.total,
            cell(0),
            cell(1),
            cell(2),
            avg
        )
    }
}

/// IoUs of adjacent instance pairs: the annotated pairs of each record, or
/// every overlapping intra-image pair when a record carries no pairing.
pub fn adjacent_pair_ious(records: &[DatasetRecord]) -> Vec<f64> {
    let mut out = Vec::new();
    for r in records {
        match &r.pairs {
            Some(pairs) => {
                for &(a, b) in pairs {
                    out.push(iou(&r.instances[a].bbox, &r.instances[b].bbox));
                }
            }
            None => {
                for a in 0..r.instances.len() {
                    for b in a + 1..r.instances.len() {
                        let v = iou(&r.instances[a].bbox, &r.instances[b].bbox);
                        if v > 0.0 {
                            out.push(v);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn occlusion_stats(records: &[DatasetRecord]) -> OcclusionStats {
    OcclusionStats::from_ious(&adjacent_pair_ious(records))
}

impl fmt::Display for OcclusionStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::header())?;
        write!(f, "{}", self.row("dataset"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvVisReport {
    pub visible_joints: usize,
    pub invisible_joints: usize,
    pub visible_at_75: f64,
    pub visible_at_90: f64,
    pub invisible_at_75: f64,
    pub invisible_at_90: f64,
}

impl InvVisReport {
    pub fn header() -> String {
        format!("{:<10} {:>7} {:>7} {:>7} {:>7}", "", "Inv@75", "Inv@90", "Vis@75", "Vis@90")
    }

    pub fn row(&self, label: &str) -> String {
        format!(
            "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            label,
            100.0 * self.invisible_at_75,
            100.0 * self.invisible_at_90,
            100.0 * self.visible_at_75,
            100.0 * self.visible_at_90
        )
    }
}

/// Fraction of visible and of invisible labeled joints whose per-joint
/// similarity reaches 0.75 and 0.90. Pairs are `(prediction, gt)` in pixels.
pub fn inv_vis_breakdown(pairs: &[(Pose, GroundTruth)], sigmas: &[f64]) -> Result<InvVisReport> {
    // [visible, invisible] x [0.75, 0.90]
    let mut hits = [[0usize; 2]; 2];
    let mut totals = [0usize; 2];
    for (pred, gt) in pairs {
        let g = &gt.pose;
        if pred.frame != g.frame {
            return Err(Error::FrameMismatch {
                expected: g.frame,
                found: pred.frame,
            });
        }
        if pred.len() != g.len() || sigmas.len() != g.len() {
            return Err(Error::Shape("inv/vis breakdown: joint counts differ".into()));
        }
        for k in (0..g.len()).filter(|&k| g.labeled[k]) {
            let cat = if g.visible[k] { 0 } else { 1 };
            let dx = pred.joints[k].x - g.coords[k][0];
            let dy = pred.joints[k].y - g.coords[k][1];
            let s = joint_similarity(dx * dx + dy * dy, gt.area(), sigmas[k]);
            totals[cat] += 1;
            hits[cat][0] += (s >= 0.75) as usize;
            hits[cat][1] += (s >= 0.90) as usize;
        }
    }
    let rate = |cat: usize, t: usize| {
        if totals[cat] == 0 {
            0.0
        } else {
            hits[cat][t] as f64 / totals[cat] as f64
        }
    };
    Ok(InvVisReport {
        visible_joints: totals[0],
        invisible_joints: totals[1],
        visible_at_75: rate(0, 0),
        visible_at_90: rate(0, 1),
        invisible_at_75: rate(1, 0),
        invisible_at_90: rate(1, 1),
    })
}
