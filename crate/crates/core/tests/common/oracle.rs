//! Brute-force reference for keypoint AP. Every partial one-to-one
//! assignment of an image's predictions to its ground truths is enumerated,
//! and the one a score-ordered greedy matcher would produce is picked out
//! by checking its defining property directly.

use occpose::evaluation::{GroundTruth, Prediction};

pub fn oks(pred: &Prediction, gt: &GroundTruth, sigmas: &[f64]) -> f64 {
    let area = (gt.bbox.x2 - gt.bbox.x1) * (gt.bbox.y2 - gt.bbox.y1);
    let mut sum = 0.0;
    let mut n = 0.0;
    for k in 0..sigmas.len() {
        if !gt.pose.labeled[k] {
            continue;
        }
        let dx = pred.pose.joints[k].x - gt.pose.coords[k][0];
        let dy = pred.pose.joints[k].y - gt.pose.coords[k][1];
        let var = 4.0 * sigmas[k] * sigmas[k];
        sum += (-(dx * dx + dy * dy) / (2.0 * area * var)).exp();
        n += 1.0;
    }
    sum / n
}

/// All maps from `m` predictions to a ground-truth index or `None`, with no
/// ground truth used twice.
fn assignments(m: usize, n: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = vec![Vec::new()];
    for _ in 0..m {
        let mut next = Vec::new();
        for a in &out {
            let mut none = a.clone();
            none.push(None);
            next.push(none);
            for g in 0..n {
                if !a.contains(&Some(g)) {
                    let mut with = a.clone();
                    with.push(Some(g));
                    next.push(with);
                }
            }
        }
        out = next;
    }
    out
}

/// Whether `assign` (indexed by rank) is what greedy matching yields: each
/// prediction holds the best ground truth above threshold among those not
/// held by a better-scored prediction, and holds nothing only when none qualifies.
fn is_greedy(assign: &[Option<usize>], sim: &[Vec<f64>], threshold: f64) -> bool {
    for (i, a) in assign.iter().enumerate() {
        let taken: Vec<usize> = assign[..i].iter().flatten().copied().collect();
        let free: Vec<usize> = (0..sim[i].len()).filter(|g| !taken.contains(g) && sim[i][*g] >= threshold).collect();
        match a {
            None => {
                if !free.is_empty() {
                    return false;
                }
            }
            Some(g) => {
                if !free.contains(g) || free.iter().any(|&o| sim[i][o] > sim[i][*g]) {
                    return false;
                }
            }
        }
    }
    true
}

pub fn average_precision(preds: &[Prediction], gts: &[GroundTruth], sigmas: &[f64], threshold: f64) -> f64 {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.pose.labeled.iter().any(|&l| l)).collect();
    let mut images: Vec<u64> = preds.iter().map(|p| p.image_id).chain(gts.iter().map(|g| g.image_id)).collect();
    images.sort();
    images.dedup();
    // (score, true positive) for every prediction
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for img in images {
        let mut ps: Vec<&Prediction> = preds.iter().filter(|p| p.image_id == img).collect();
        ps.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let gs: Vec<&&GroundTruth> = gts.iter().filter(|g| g.image_id == img).collect();
        let sim: Vec<Vec<f64>> = ps.iter().map(|p| gs.iter().map(|g| oks(p, g, sigmas)).collect()).collect();
        let chosen: Vec<Vec<Option<usize>>> = assignments(ps.len(), gs.len())
            .into_iter()
            .filter(|a| is_greedy(a, &sim, threshold))
            .collect();
        assert_eq!(chosen.len(), 1, "greedy assignment must be unique");
        for (p, a) in ps.iter().zip(&chosen[0]) {
            scored.push((p.score, a.is_some()));
        }
    }
    if gts.is_empty() {
        return 0.0;
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    let mut hits = 0.0;
    for (i, &(_, tp)) in scored.iter().enumerate() {
        if tp {
            hits += 1.0;
        }
        points.push((hits / gts.len() as f64, hits / (i + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

pub fn mean_ap(preds: &[Prediction], gts: &[GroundTruth], sigmas: &[f64]) -> f64 {
    let ts: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    ts.iter().map(|&t| average_precision(preds, gts, sigmas, t)).sum::<f64>() / ts.len() as f64
}
