//! Random small keypoint scenes for evaluator checks.

use occpose::evaluation::{GroundTruth, Prediction};
use occpose::pose::{Frame, GroundTruthPose, Joint, Pose};
use occpose::skeleton::BoundingBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Scene {
    pub preds: Vec<Prediction>,
    pub gts: Vec<GroundTruth>,
}

/// At most three ground truths and three predictions over one or two
/// images. Predictions are noisy copies of ground truths (or of nothing),
/// so similarities cover the whole range of thresholds.
pub fn random_scene(seed: u64, joints: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_gt = rng.random_range(1..=3);
    let n_pred = rng.random_range(1..=3);
    let images = rng.random_range(1..=2u64);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|i| {
            let x = rng.random_range(0.0..60.0);
            let y = rng.random_range(0.0..60.0);
            let (w, h) = (rng.random_range(10.0..30.0), rng.random_range(10.0..30.0));
            let coords: Vec<[f64; 2]> = (0..joints)
                .map(|_| [x + rng.random_range(0.0..w), y + rng.random_range(0.0..h)])
                .collect();
            let mut labeled: Vec<bool> = (0..joints).map(|_| rng.random_bool(0.85)).collect();
            labeled[0] = true;
            let visible = labeled.iter().map(|&l| l && rng.random_bool(0.7)).collect();
            GroundTruth {
                image_id: rng.random_range(0..images),
                instance_id: i as u64,
                pose: GroundTruthPose::new(coords, labeled, visible, Frame::Pixel).unwrap(),
                bbox: BoundingBox::from_xywh(x, y, w, h).unwrap(),
            }
        })
        .collect();
    let preds = (0..n_pred)
        .map(|_| {
            let src = &gts[rng.random_range(0..gts.len())];
            let noise = [0.5, 2.0, 4.0, 8.0][rng.random_range(0..4)];
            let joints = src
                .pose
                .coords
                .iter()
                .map(|c| Joint {
                    x: c[0] + rng.random_range(-noise..noise),
                    y: c[1] + rng.random_range(-noise..noise),
                    c: 1.0,
                })
                .collect();
            Prediction {
                image_id: if rng.random_bool(0.8) { src.image_id } else { rng.random_range(0..images) },
                pose: Pose::new(joints, Frame::Pixel).unwrap(),
                score: rng.random_range(0.0..1.0),
                bbox: None,
            }
        })
        .collect();
    Scene { preds, gts }
}
