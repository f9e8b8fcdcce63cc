//! Losses, augmentation, proposal filtering and the optimization loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, COUPLE_PARAMS, PARAMS};
use crate::correction::{couple_tags, CoupleMember, RefinementTrace};
use crate::error::{Error, Result};
use crate::evaluation::compute_oks;
use crate::model::{Ablation, Model, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::pipeline::{couple_pairs, Sample};
use crate::pose::{Frame, GroundTruthPose, Pose};
use crate::skeleton::{denormalize_pose, SkeletonSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Weights of the three refinement stages; the initial pose has weight 1.
    pub lambdas: [f64; 3],
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train the couple refiner after the base network, with the base frozen.
    pub couple_graph_enabled: bool,
    pub couple_epochs: usize,
    pub ablation: Ablation,
    /// Mirror each sample with probability one half.
    pub flip_augment: bool,
    /// Skip samples whose initial pose fails the proposal rule.
    pub proposal_filter: bool,
    /// Stop the base phase after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambdas: [0.3, 0.5, 1.0],
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            couple_graph_enabled: false,
            couple_epochs: 5,
            ablation: Ablation::default(),
            flip_augment: true,
            proposal_filter: false,
            max_steps: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|&l| !(l >= 0.0)) || !(self.lambdas[2] > 0.0) {
            return Err(Error::Config(format!(
                "lambdas {:?} must be nonnegative with a positive final weight",
                self.lambdas
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A whole run: network layout plus optimization settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()
    }
}

fn check_frames(pred: Frame, gt: &GroundTruthPose) -> Result<()> {
    if pred != gt.frame {
        return Err(Error::FrameMismatch {
            expected: gt.frame,
            found: pred,
        });
    }
    Ok(())
}

/// Sum of `|dx| + |dy|` over labeled joints, divided by their count.
pub fn masked_l1(pred: &Pose, gt: &GroundTruthPose) -> Result<f64> {
    check_frames(pred.frame, gt)?;
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted joints, {} labeled slots", pred.len(), gt.len())));
    }
    let n = gt.num_labeled();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = (0..gt.len())
        .filter(|&k| gt.labeled[k])
        .map(|k| (pred.joints[k].x - gt.coords[k][0]).abs() + (pred.joints[k].y - gt.coords[k][1]).abs())
        .sum();
    Ok(sum / n as f64)
}

/// [`masked_l1`] on a tape; `pred` is `N x 2` or `N x 3` in `frame`.
/// Unlabeled joints receive exactly zero gradient.
pub fn masked_l1_var<'t>(pred: Var<'t>, frame: Frame, gt: &GroundTruthPose) -> Result<Var<'t>> {
    check_frames(frame, gt)?;
    let shape = pred.shape();
    if shape.len() != 2 || shape[0] != gt.len() || shape[1] < 2 {
        return Err(Error::Shape(format!("prediction {shape:?} does not match {} joints", gt.len())));
    }
    let tape = pred.tape();
    let n = gt.len();
    let xy = if shape[1] == 2 { pred } else { pred.narrow(1, 0, 2)? };
    let target: Vec<f64> = (0..n)
        .flat_map(|k| if gt.labeled[k] { gt.coords[k] } else { [0.0, 0.0] })
        .collect();
    let mask: Vec<f64> = gt.mask().iter().flat_map(|&m| [m, m]).collect();
    let diff = xy.sub(tape.constant(Tensor::from_vec(&[n, 2], target)?))?;
    let masked = diff.mul(tape.constant(Tensor::from_vec(&[n, 2], mask)?))?;
    let count = gt.num_labeled().max(1) as f64;
    Ok(masked.abs().sum().scale(1.0 / count))
}

/// Loss of each supervised pose and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub initial: f64,
    pub pose1: f64,
    pub pose2: f64,
    pub final_pose: f64,
}

/// `λ1 L(pose1) + λ2 L(pose2) + λ3 L(final) + L(initial)`.
pub fn total_loss(trace: &RefinementTrace, init: &Pose, gt: &GroundTruthPose, lambdas: [f64; 3]) -> Result<LossTerms> {
    let [l1, l2, l3] = [
        masked_l1(&trace.pose1, gt)?,
        masked_l1(&trace.pose2, gt)?,
        masked_l1(&trace.final_pose, gt)?,
    ];
    let li = masked_l1(init, gt)?;
    Ok(LossTerms {
        total: lambdas[0] * l1 + lambdas[1] * l2 + lambdas[2] * l3 + li,
        initial: li,
        pose1: l1,
        pose2: l2,
        final_pose: l3,
    })
}

/// [`total_loss`] on a tape, with the scalar terms alongside.
pub fn total_loss_var<'t>(
    poses: &[Var<'t>],
    init: Var<'t>,
    gt: &GroundTruthPose,
    lambdas: [f64; 3],
) -> Result<(Var<'t>, LossTerms)> {
    if poses.len() != 3 {
        return Err(Error::Shape(format!("expected three refined poses, got {}", poses.len())));
    }
    let terms: Vec<Var<'t>> = poses
        .iter()
        .map(|&p| masked_l1_var(p, Frame::Normalized, gt))
        .collect::<Result<_>>()?;
    let li = masked_l1_var(init, Frame::Normalized, gt)?;
    let total = terms[0]
        .scale(lambdas[0])
        .add(terms[1].scale(lambdas[1]))?
        .add(terms[2].scale(lambdas[2]))?
        .add(li)?;
    let value = |v: Var<'_>| v.value().item();
    Ok((
        total,
        LossTerms {
            total: value(total),
            initial: value(li),
            pose1: value(terms[0]),
            pose2: value(terms[1]),
            final_pose: value(terms[2]),
        },
    ))
}

/// A proposal is kept when it has more than five visible joints and its
/// OKS against the ground truth exceeds 0.3. Both poses are in pixels.
pub fn accept_proposal(pred: &Pose, gt: &GroundTruthPose, area: f64, sigmas: &[f64]) -> Result<bool> {
    if gt.num_visible() <= 5 {
        return Ok(false);
    }
    Ok(compute_oks(pred, gt, area, sigmas)? > 0.3)
}

/// Indices of the candidates `(prediction, ground truth, object area)` that pass [`accept_proposal`].
pub fn select_proposals(candidates: &[(Pose, GroundTruthPose, f64)], sigmas: &[f64]) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for (i, (p, g, area)) in candidates.iter().enumerate() {
        if accept_proposal(p, g, *area, sigmas)? {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// Horizontal mirror of a sample. The crop's continuous coordinate `x`
/// becomes `W - x` (so pixel column `j` becomes `W - 1 - j`), which is
/// `x -> -x` in the normalized frame; left and right joints swap.
pub fn flip_augment(sample: &Sample, skeleton: &SkeletonSpec) -> Result<Sample> {
    let perm = skeleton.flip_permutation();
    if perm.len() != sample.gt.len() {
        return Err(Error::Shape("skeleton does not match the sample".into()));
    }
    let px = &sample.crop.pixels;
    let &[c, h, w] = px.shape() else {
        return Err(Error::Shape(format!("crop must be C x H x W, got {:?}", px.shape())));
    };
    let mut data = vec![0.0; c * h * w];
    for row in 0..c * h {
        for j in 0..w {
            data[row * w + j] = px.data()[row * w + (w - 1 - j)];
        }
    }
    let g = &sample.gt;
    let gt = GroundTruthPose {
        coords: perm.iter().map(|&k| [-g.coords[k][0], g.coords[k][1]]).collect(),
        labeled: perm.iter().map(|&k| g.labeled[k]).collect(),
        visible: perm.iter().map(|&k| g.visible[k]).collect(),
        frame: g.frame,
    };
    let mut crop = sample.crop.clone();
    crop.pixels = Tensor::from_vec(&[c, h, w], data)?;
    Ok(Sample { crop, gt, ..sample.clone() })
}

/// Mirrors a normalized pose the way [`flip_augment`] mirrors ground truth.
pub fn flip_pose(pose: &Pose, skeleton: &SkeletonSpec) -> Pose {
    let perm = skeleton.flip_permutation();
    let joints = perm
        .iter()
        .map(|&k| {
            let j = pose.joints[k];
            crate::pose::Joint { x: -j.x, ..j }
        })
        .collect();
    Pose {
        joints,
        frame: pose.frame,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }

    fn store(&self, like: &ParamStore, moments: &[Tensor]) -> ParamStore {
        let mut s = ParamStore::new();
        for ((name, _), t) in like.iter().zip(moments) {
            s.add(name, t.clone());
        }
        s
    }

    fn save_into(&self, ck: &mut Checkpoint, group: &str, like: &ParamStore) {
        ck.groups.insert(format!("{group}.adam_m"), self.store(like, &self.m));
        ck.groups.insert(format!("{group}.adam_v"), self.store(like, &self.v));
        let mut t = ParamStore::new();
        t.add("t", Tensor::scalar(self.t as f64));
        ck.groups.insert(format!("{group}.adam_t"), t);
    }

    fn restore(ck: &Checkpoint, group: &str, like: &ParamStore) -> Result<Self> {
        let mut adam = Adam::new(like);
        let mut m = like.clone();
        m.load_from(ck.group(&format!("{group}.adam_m"))?)?;
        let mut v = like.clone();
        v.load_from(ck.group(&format!("{group}.adam_v"))?)?;
        adam.m = m.values().to_vec();
        adam.v = v.values().to_vec();
        let t = ck.group(&format!("{group}.adam_t"))?;
        adam.t = t.values().first().map(|t| t.item() as u64).unwrap_or(0);
        Ok(adam)
    }
}

/// Cosine decay from `base` at step 0 towards 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Couple,
}

/// One row of the loss log: batch means after the forward pass of `step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub initial: f64,
    pub pose1: f64,
    pub pose2: f64,
    #[serde(rename = "final")]
    pub final_pose: f64,
    pub couple: f64,
    /// Samples that contributed (after proposal filtering).
    pub samples: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `loss.csv` and `checkpoints/` go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue after the epoch this checkpoint closed.
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(epoch as u64))
}

/// Largest-gradient joint of an `N x k` gradient; NaN counts as largest.
fn worst_joint(grad: Option<&Tensor>) -> usize {
    let Some(g) = grad else { return 0 };
    let cols = g.shape().get(1).copied().unwrap_or(1);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in g.data().iter().enumerate() {
        let mag = if v.is_nan() { f64::INFINITY } else { v.abs() };
        if mag > best.1 {
            best = (i / cols, mag);
        }
    }
    best.0
}

struct StepStats {
    terms: LossTerms,
    couple: f64,
    used: usize,
}

/// Forward and backward over one batch of base samples; returns the mean
/// gradient in `acc`.
fn base_batch(
    model: &Model,
    batch: &[(&Sample, bool)],
    cfg: &TrainingConfig,
    acc: &mut [Tensor],
    epoch: usize,
    batch_id: usize,
) -> Result<StepStats> {
    for a in acc.iter_mut() {
        a.scale_in_place(0.0);
    }
    let mut sum = LossTerms::default();
    let mut used = 0;
    for (sample, flip) in batch {
        let flipped;
        let sample = if *flip {
            flipped = flip_augment(sample, &model.skeleton)?;
            &flipped
        } else {
            *sample
        };
        let tape = Tape::new();
        let p = Bound::new(&tape, &model.params, true);
        let out = model.forward(&p, tape.constant(sample.crop.pixels.clone()))?;
        if cfg.proposal_filter {
            let init = Pose::from_rows(out.initial.value().data(), Frame::Normalized)?;
            let init_px = denormalize_pose(&init, &sample.crop.source_box)?;
            if !accept_proposal(&init_px, &sample.gt_pixels(), sample.bbox.area(), &model.skeleton.oks_sigmas)? {
                continue;
            }
        }
        let (loss, terms) = total_loss_var(&out.trace.poses, out.initial, &sample.gt, cfg.lambdas)?;
        let grads = tape.backward(loss);
        if !terms.total.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: batch_id,
                joint: worst_joint(grads.get(out.initial)),
            });
        }
        p.accumulate_grads(&grads, acc);
        used += 1;
        sum.total += terms.total;
        sum.initial += terms.initial;
        sum.pose1 += terms.pose1;
        sum.pose2 += terms.pose2;
        sum.final_pose += terms.final_pose;
    }
    let n = used.max(1) as f64;
    for a in acc.iter_mut() {
        a.scale_in_place(1.0 / n);
    }
    if acc.iter().any(|a| !a.all_finite()) {
        return Err(Error::NonFinite {
            epoch,
            batch: batch_id,
            joint: 0,
        });
    }
    Ok(StepStats {
        terms: LossTerms {
            total: sum.total / n,
            initial: sum.initial / n,
            pose1: sum.pose1 / n,
            pose2: sum.pose2 / n,
            final_pose: sum.final_pose / n,
        },
        couple: 0.0,
        used,
    })
}

/// Frozen base outputs needed by the couple refiner.
struct CoupleInput {
    pose: Tensor,
    fine: Tensor,
}

fn couple_batch(
    model: &Model,
    batch: &[(usize, usize)],
    inputs: &[CoupleInput],
    samples: &[Sample],
    acc: &mut [Tensor],
    epoch: usize,
    batch_id: usize,
) -> Result<StepStats> {
    for a in acc.iter_mut() {
        a.scale_in_place(0.0);
    }
    let mut sum = 0.0;
    for &(a, b) in batch {
        let tape = Tape::new();
        let p = Bound::new(&tape, &model.couple_params, true);
        let (ta, tb) = couple_tags(&samples[a].crop.source_box, &samples[b].crop.source_box);
        let member = |i: usize, tag| CoupleMember {
            pose: tape.constant(inputs[i].pose.clone()),
            fine: tape.constant(inputs[i].fine.clone()),
            tag,
        };
        let (ra, rb) = model.couple_forward(&p, member(a, ta), member(b, tb))?;
        let loss = masked_l1_var(ra, Frame::Normalized, &samples[a].gt)?
            .add(masked_l1_var(rb, Frame::Normalized, &samples[b].gt)?)?;
        let grads = tape.backward(loss);
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: batch_id,
                joint: worst_joint(grads.get(ra)),
            });
        }
        p.accumulate_grads(&grads, acc);
        sum += value;
    }
    let n = batch.len().max(1) as f64;
    for a in acc.iter_mut() {
        a.scale_in_place(1.0 / n);
    }
    Ok(StepStats {
        terms: LossTerms::default(),
        couple: sum / n,
        used: batch.len(),
    })
}

fn write_log(path: &Path, rows: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains `model` on `samples`. The base phase optimizes the whole network
/// for `cfg.epochs` epochs; when the couple graph is enabled a second phase
/// then trains only the couple refiner. Shuffling and flips are seeded per
/// epoch, so a resumed run continues exactly as an uninterrupted one.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    pairs: &[(usize, usize)],
    cfg: &TrainingConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let base_total = cfg.max_steps.map_or(cfg.epochs * steps_per_epoch, |m| m.min(cfg.epochs * steps_per_epoch));
    let couple_epochs = if cfg.couple_graph_enabled && !pairs.is_empty() { cfg.couple_epochs } else { 0 };
    let couple_steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let couple_total = couple_epochs * couple_steps_per_epoch;

    let mut adam = Adam::new(&model.params);
    let mut couple_adam = Adam::new(&model.couple_params);
    let (mut epoch, mut step) = (0, 0);
    if let Some(ck) = &opts.resume {
        model.params.load_from(ck.group(PARAMS)?)?;
        model.couple_params.load_from(ck.group(COUPLE_PARAMS)?)?;
        adam = Adam::restore(ck, PARAMS, &model.params)?;
        couple_adam = Adam::restore(ck, COUPLE_PARAMS, &model.couple_params)?;
        epoch = ck.meta.epoch;
        step = ck.meta.step;
    }

    let mut report = TrainReport::default();
    let ck_dir = opts.out_dir.as_ref().map(|d| d.join("checkpoints"));
    let save = |model: &Model, adam: &Adam, couple_adam: &Adam, epoch: usize, step: usize| -> Result<Option<PathBuf>> {
        let Some(dir) = &ck_dir else { return Ok(None) };
        let mut ck = Checkpoint::from_model(model, model_seed(model, cfg), epoch, step);
        ck.meta.training = serde_json::to_value(cfg).unwrap_or_default();
        adam.save_into(&mut ck, PARAMS, &model.params);
        couple_adam.save_into(&mut ck, COUPLE_PARAMS, &model.couple_params);
        let path = dir.join(format!("epoch_{epoch:03}.json"));
        ck.save(&path)?;
        Ok(Some(path))
    };

    let mut acc = model.params.zeros_like();
    while epoch < cfg.epochs && step < base_total {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order.iter().map(|_| cfg.flip_augment && rng.random_bool(0.5)).collect();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if step >= base_total {
                break;
            }
            let batch: Vec<(&Sample, bool)> = chunk
                .iter()
                .enumerate()
                .map(|(i, &s)| (&samples[s], flips[b * cfg.batch_size + i]))
                .collect();
            let stats = base_batch(model, &batch, cfg, &mut acc, epoch, b)?;
            let lr = cosine_lr(cfg.learning_rate, step, base_total);
            if stats.used > 0 {
                adam.step(&mut model.params, &acc, lr);
            }
            if !model.params.all_finite() {
                return Err(Error::NonFinite { epoch, batch: b, joint: 0 });
            }
            report.losses.push(LossRecord {
                step,
                epoch,
                phase: Phase::Base,
                lr,
                loss: stats.terms.total,
                initial: stats.terms.initial,
                pose1: stats.terms.pose1,
                pose2: stats.terms.pose2,
                final_pose: stats.terms.final_pose,
                couple: 0.0,
                samples: stats.used,
            });
            step += 1;
        }
        epoch += 1;
        report.checkpoints.extend(save(model, &adam, &couple_adam, epoch, step)?);
    }

    if couple_epochs > 0 {
        let base_epochs = epoch.max(cfg.epochs);
        let frozen = samples
            .iter()
            .map(|s| {
                let out = model.infer(&s.crop)?;
                Ok(CoupleInput {
                    pose: Tensor::from_vec(&[out.trace.final_pose.len(), 3], out.trace.final_pose.to_rows())?,
                    fine: out.fine,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cacc = model.couple_params.zeros_like();
        let mut cstep = 0;
        // Resumed runs may already be partway through this phase.
        let first = epoch.saturating_sub(base_epochs);
        cstep += first * couple_steps_per_epoch;
        for ce in first..couple_epochs {
            let e = base_epochs + ce;
            let mut rng = epoch_rng(cfg.seed, e);
            let mut order: Vec<(usize, usize)> = pairs.to_vec();
            order.shuffle(&mut rng);
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let stats = couple_batch(model, chunk, &frozen, samples, &mut cacc, e, b)?;
                let lr = cosine_lr(cfg.learning_rate, cstep, couple_total);
                couple_adam.step(&mut model.couple_params, &cacc, lr);
                report.losses.push(LossRecord {
                    step,
                    epoch: e,
                    phase: Phase::Couple,
                    lr,
                    loss: stats.couple,
                    initial: 0.0,
                    pose1: 0.0,
                    pose2: 0.0,
                    final_pose: 0.0,
                    couple: stats.couple,
                    samples: stats.used,
                });
                step += 1;
                cstep += 1;
            }
            report.checkpoints.extend(save(model, &adam, &couple_adam, e + 1, step)?);
        }
    }

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_log(&dir.join("loss.csv"), &report.losses)?;
    }
    Ok(report)
}

fn model_seed(_model: &Model, cfg: &TrainingConfig) -> u64 {
    cfg.seed
}

/// Convenience wrapper: builds the couple pairs from the dataset.
pub fn train_on_dataset(
    model: &mut Model,
    dataset: &crate::data::Dataset,
    samples: &[Sample],
    cfg: &TrainingConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let pairs = couple_pairs(dataset, samples);
    train(model, samples, &pairs, cfg, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, ImageCrop};
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::pose::Joint;
    use crate::skeleton::BoundingBox;
    use proptest::prelude::*;
    use rand::Rng;

    fn gt_from(coords: Vec<[f64; 2]>, labeled: Vec<bool>) -> GroundTruthPose {
        let n = coords.len();
        GroundTruthPose::new(coords, labeled.clone(), labeled.iter().map(|_| false).take(n).collect(), Frame::Normalized)
            .unwrap()
    }

    fn pose_from(xy: &[[f64; 2]]) -> Pose {
        Pose::new(xy.iter().map(|p| Joint { x: p[0], y: p[1], c: 0.5 }).collect(), Frame::Normalized).unwrap()
    }

    #[test]
    fn masked_l1_examples() {
        let gt = gt_from(vec![[0.0, 0.0], [1.0, 1.0]], vec![true, true]);
        assert_eq!(masked_l1(&pose_from(&[[0.0, 0.0], [1.0, 1.0]]), &gt).unwrap(), 0.0);
        let one = gt_from(vec![[0.0, 0.0]], vec![true]);
        assert_eq!(masked_l1(&pose_from(&[[1.0, 2.0]]), &one).unwrap(), 3.0);
        let none = gt_from(vec![[0.0, 0.0]], vec![false]);
        assert_eq!(masked_l1(&pose_from(&[[1.0, 2.0]]), &none).unwrap(), 0.0);
        let px = Pose::new(vec![Joint { x: 0.0, y: 0.0, c: 1.0 }], Frame::Pixel).unwrap();
        assert!(matches!(masked_l1(&px, &one), Err(Error::FrameMismatch { .. })));
    }

    #[test]
    fn unlabeled_joints_get_zero_gradient() {
        let gt = gt_from(vec![[0.0, 0.0], [0.3, -0.2], [0.0, 0.0]], vec![false, true, false]);
        let tape = Tape::new();
        let pred = tape.leaf(Tensor::from_vec(&[3, 3], vec![0.5, 0.5, 1.0, 0.1, 0.1, 1.0, -0.4, 0.2, 1.0]).unwrap());
        let loss = masked_l1_var(pred, Frame::Normalized, &gt).unwrap();
        let g = tape.backward(loss).get_or_zeros(pred);
        assert_eq!(&g.data()[0..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&g.data()[6..9], &[0.0, 0.0, 0.0]);
        assert_eq!(&g.data()[3..5], &[-1.0, 1.0]);
        let none = gt_from(vec![[0.0, 0.0]], vec![false]);
        let tape = Tape::new();
        let pred = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let loss = masked_l1_var(pred, Frame::Normalized, &none).unwrap();
        assert_eq!(loss.value().item(), 0.0);
        assert_eq!(tape.backward(loss).get_or_zeros(pred).data(), &[0.0, 0.0]);
    }

    fn trace_with_losses(gt: &GroundTruthPose, losses: [f64; 3]) -> RefinementTrace {
        // a single labeled joint displaced along x by the wanted loss
        let at = |d: f64| pose_from(&[[gt.coords[0][0] + d, gt.coords[0][1]]]);
        RefinementTrace {
            pose1: at(losses[0]),
            pose2: at(losses[1]),
            final_pose: at(losses[2]),
            block_features: Vec::new(),
        }
    }

    #[test]
    fn weighted_sum_example() {
        let gt = gt_from(vec![[0.0, 0.0]], vec![true]);
        let trace = trace_with_losses(&gt, [2.0, 2.0, 2.0]);
        let init = pose_from(&[[4.0, 0.0]]);
        let t = total_loss(&trace, &init, &gt, [0.3, 0.5, 1.0]).unwrap();
        assert_eq!(t.total, 7.6);
        let perfect = trace_with_losses(&gt, [0.0; 3]);
        assert_eq!(total_loss(&perfect, &pose_from(&[[0.0, 0.0]]), &gt, [0.3, 0.5, 1.0]).unwrap().total, 0.0);
    }

    #[test]
    fn final_only_weights_leave_middle_poses_without_gradient() {
        let gt = gt_from(vec![[0.1, 0.2], [0.0, -0.3]], vec![true, true]);
        let inputs: Vec<Tensor> = (0..4)
            .map(|i| Tensor::from_vec(&[2, 3], vec![0.3 + 0.1 * i as f64, -0.2, 0.5, 0.7, 0.4 - 0.2 * i as f64, 0.5]).unwrap())
            .collect();
        let report = check_gradients(
            &inputs,
            &|_tape, v| total_loss_var(&v[0..3], v[3], &gt, [0.0, 0.0, 1.0]).unwrap().0,
            &GradCheck::default(),
        );
        assert!(report.passed(), "{report}");
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = total_loss_var(&vars[0..3], vars[3], &gt, [0.0, 0.0, 1.0]).unwrap().0;
        let g = tape.backward(loss);
        assert!(g.get_or_zeros(vars[0]).data().iter().all(|&x| x == 0.0));
        assert!(g.get_or_zeros(vars[1]).data().iter().all(|&x| x == 0.0));
        assert!(g.get_or_zeros(vars[2]).max_abs() > 0.0);
        assert!(g.get_or_zeros(vars[3]).max_abs() > 0.0);
    }

    #[test]
    fn proposal_rules() {
        let sigmas = vec![0.5; 12];
        let mk = |visible: usize| {
            GroundTruthPose::new(vec![[0.0, 0.0]; 12], vec![true; 12], (0..12).map(|k| k < visible).collect(), Frame::Pixel)
                .unwrap()
        };
        let at = |d: f64| Pose::new(vec![Joint { x: d, y: 0.0, c: 1.0 }; 12], Frame::Pixel).unwrap();
        // area 1, k = 1: similarity exp(-d^2 / 2)
        let d = |oks: f64| (-2.0 * f64::ln(oks)).sqrt();
        assert!(!accept_proposal(&at(0.0), &mk(4), 1.0, &sigmas).unwrap());
        assert!(!accept_proposal(&at(d(0.2)), &mk(6), 1.0, &sigmas).unwrap());
        assert!(accept_proposal(&at(d(0.5)), &mk(6), 1.0, &sigmas).unwrap());
        let cands = vec![(at(0.0), mk(4), 1.0), (at(d(0.2)), mk(6), 1.0), (at(d(0.5)), mk(6), 1.0)];
        assert_eq!(select_proposals(&cands, &sigmas).unwrap(), vec![2]);
    }

    fn sample(rng: &mut ChaCha8Rng) -> Sample {
        let pixels = Tensor::from_vec(&[1, 4, 6], (0..24).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let coords = (0..12).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let labeled: Vec<bool> = (0..12).map(|_| rng.random_bool(0.8)).collect();
        let visible = labeled.iter().map(|&l| l && rng.random_bool(0.5)).collect();
        Sample {
            crop: ImageCrop {
                pixels,
                source_box: BoundingBox::new(0.0, 0.0, 6.0, 4.0).unwrap(),
                source_image_id: 0,
            },
            gt: GroundTruthPose::new(coords, labeled, visible, Frame::Normalized).unwrap(),
            bbox: BoundingBox::new(0.0, 0.0, 6.0, 4.0).unwrap(),
            record: 0,
            instance: 0,
        }
    }

    #[test]
    fn flip_is_an_involution_and_swaps_sides() {
        let sk = SkeletonSpec::ocpose12();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = sample(&mut rng);
            let f = flip_augment(&s, &sk).unwrap();
            assert_eq!(flip_augment(&f, &sk).unwrap(), s);
            // left wrist of the flip is the mirrored right wrist
            assert_eq!(f.gt.coords[4], [-s.gt.coords[5][0], s.gt.coords[5][1]]);
            assert_eq!(f.gt.visible[4], s.gt.visible[5]);
            assert_eq!(f.crop.pixels.get3(0, 1, 0), s.crop.pixels.get3(0, 1, 5));
        }
    }

    #[test]
    fn symmetric_pose_maps_to_itself() {
        let sk = SkeletonSpec::ocpose12();
        let coords: Vec<[f64; 2]> = (0..6)
            .flat_map(|p| {
                let (x, y) = (0.1 + 0.05 * p as f64, -0.5 + 0.2 * p as f64);
                [[-x, y], [x, y]]
            })
            .collect();
        let pose = pose_from(&coords);
        assert_eq!(flip_pose(&pose, &sk), pose);
    }

    proptest! {
        #[test]
        fn loss_is_flip_invariant(seed in 0u64..1000) {
            let sk = SkeletonSpec::ocpose12();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample(&mut rng);
            let pred = pose_from(&(0..12).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect::<Vec<_>>());
            let f = flip_augment(&s, &sk).unwrap();
            let a = masked_l1(&pred, &s.gt).unwrap();
            let b = masked_l1(&flip_pose(&pred, &sk), &f.gt).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(&[3], vec![1.5, -0.0, 2.0]).unwrap());
        let before = store.clone();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Tensor::from_vec(&[3], vec![0.3, -1.0, 0.0]).unwrap()], 0.0);
        assert_eq!(store, before);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let err = RunConfig::from_json_str(r#"{"training": {"learning_rat": 0.1}}"#).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
        assert!(RunConfig::from_json_str(r#"{"training": {"lambdas": [0.3, 0.5, 0.0]}}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"training": {"batch_size": 0}}"#).is_err());
        let cfg = RunConfig::from_json_str(r#"{"model": {"gcn_channels": 16}}"#).unwrap();
        assert_eq!(cfg.model.gcn_channels, 16);
        assert_eq!(cfg.training.lambdas, [0.3, 0.5, 1.0]);
    }

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                in_channels: 1,
                crop_size: [16, 16],
                encoder_channels: [4, 6, 8],
                f2_channels: 6,
                f3_channels: 5,
                skip_connections: true,
            },
            gcn_channels: 8,
            block_channels: 12,
            ..ModelConfig::default()
        };
        Model::new(&cfg, Ablation::default(), 0).unwrap()
    }

    fn tiny_samples(n: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|i| {
                let mut s = sample(&mut rng);
                s.crop.pixels =
                    Tensor::from_vec(&[1, 16, 16], (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
                s.record = i;
                s
            })
            .collect()
    }

    #[test]
    fn untrained_loss_is_scaled_initial_loss() {
        let model = tiny_model();
        let s = &tiny_samples(1)[0];
        let out = model.infer(&s.crop).unwrap();
        let init = masked_l1(&out.initial, &s.gt).unwrap();
        let t = total_loss(&out.trace, &out.initial, &s.gt, [0.3, 0.5, 1.0]).unwrap();
        assert!((t.total - init * 2.8).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let samples = tiny_samples(2);
        let cfg = TrainingConfig {
            epochs: 25,
            batch_size: 2,
            learning_rate: 3e-3,
            flip_augment: false,
            ..TrainingConfig::default()
        };
        let mut a = tiny_model();
        let ra = train(&mut a, &samples, &[], &cfg, &TrainOptions::default()).unwrap();
        let mut b = tiny_model();
        let rb = train(&mut b, &samples, &[], &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(a.params, b.params);
        assert_eq!(ra.losses.len(), 25);
        assert!(ra.losses.last().unwrap().loss < 0.7 * ra.losses[0].loss);
        assert_eq!(ra.losses[0].lr, 3e-3);
    }

    #[test]
    fn resume_continues_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(3);
        let cfg = TrainingConfig {
            epochs: 3,
            batch_size: 2,
            ..TrainingConfig::default()
        };
        let mut full = tiny_model();
        let opts = TrainOptions {
            out_dir: Some(dir.path().join("full")),
            resume: None,
        };
        let report = train(&mut full, &samples, &[], &cfg, &opts).unwrap();
        assert_eq!(report.checkpoints.len(), 3);
        assert!(dir.path().join("full/loss.csv").exists());
        let ck = Checkpoint::load(&report.checkpoints[0]).unwrap();
        let mut resumed = ck.to_model().unwrap();
        let opts = TrainOptions {
            out_dir: None,
            resume: Some(ck),
        };
        let rest = train(&mut resumed, &samples, &[], &cfg, &opts).unwrap();
        assert_eq!(rest.losses[0].loss, report.losses[2].loss);
        assert_eq!(rest.losses, report.losses[2..]);
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn couple_phase_trains_only_couple_params() {
        let samples = tiny_samples(4);
        let cfg = TrainingConfig {
            epochs: 1,
            batch_size: 2,
            couple_graph_enabled: true,
            couple_epochs: 2,
            ..TrainingConfig::default()
        };
        let mut model = tiny_model();
        let report = train(&mut model, &samples, &[(0, 1), (2, 3)], &cfg, &TrainOptions::default()).unwrap();
        let couple_rows: Vec<_> = report.losses.iter().filter(|r| r.phase == Phase::Couple).collect();
        assert_eq!(couple_rows.len(), 2);
        assert_ne!(model.couple_params, tiny_model().couple_params);
        let mut base_only = tiny_model();
        let cfg_base = TrainingConfig { couple_graph_enabled: false, ..cfg };
        train(&mut base_only, &samples, &[(0, 1), (2, 3)], &cfg_base, &TrainOptions::default()).unwrap();
        assert_eq!(base_only.params, model.params);
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostic() {
        let mut samples = tiny_samples(1);
        samples[0].crop.pixels.data_mut()[3] = f64::NAN;
        let mut model = tiny_model();
        let err = train(&mut model, &samples, &[], &TrainingConfig { epochs: 1, ..TrainingConfig::default() }, &TrainOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { epoch: 0, batch: 0, .. }), "{err}");
    }
}
