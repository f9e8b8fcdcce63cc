//! Image-guided progressive graph refinement of an initial pose, and the
//! two-person couple refiner.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::evaluation::iou;
use crate::nn::{GcnLayer, NodeLinear, SelfAttention};
use crate::params::{Bound, Init, ParamStore};
use crate::pose::{Frame, Pose};
use crate::skeleton::BoundingBox;
use crate::tensor::Tensor;

/// Samples a `C x h x w` map at normalized joint locations, giving `C x N`.
pub fn grid_sample_joints(featmap: &Tensor, coords: &[[f64; 2]]) -> Result<Tensor> {
    let tape = Tape::new();
    let flat: Vec<f64> = coords.iter().flatten().copied().collect();
    let c = tape.constant(Tensor::from_vec(&[coords.len(), 2], flat)?);
    let out = Var::grid_sample(tape.constant(featmap.clone()), c)?;
    let value = out.value();
    Ok((*value).clone())
}

/// Residual GCN block: two stacked GCN layers on the main path, one
/// channel-adjusting GCN layer on the skip path, then self-attention over
/// the nodes of their sum.
#[derive(Clone, Debug)]
pub struct ResGcnBlock {
    main1: GcnLayer,
    main2: GcnLayer,
    skip: GcnLayer,
    attention: SelfAttention,
    in_channels: usize,
    extra_skip_channels: usize,
}

impl ResGcnBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        extra_skip_channels: usize,
        out_channels: usize,
    ) -> Self {
        ResGcnBlock {
            main1: GcnLayer::new(store, rng, &format!("{name}.main1"), in_channels, out_channels),
            main2: GcnLayer::new(store, rng, &format!("{name}.main2"), out_channels, out_channels),
            skip: GcnLayer::new(
                store,
                rng,
                &format!("{name}.skip"),
                in_channels + extra_skip_channels,
                out_channels,
            ),
            attention: SelfAttention::new(store, rng, &format!("{name}.attention"), out_channels),
            in_channels,
            extra_skip_channels,
        }
    }

    pub fn main_path_params(&self) -> Vec<crate::params::ParamId> {
        let mut ids = Vec::new();
        for l in [&self.main1, &self.main2] {
            ids.extend([l.w_self, l.w_neigh, l.bias]);
        }
        ids
    }

    /// `node_feats` and `sampled` are concatenated along channels; `extra_skip`
    /// joins the skip path only.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, '_>,
        node_feats: Var<'t>,
        sampled: Var<'t>,
        extra_skip: Option<Var<'t>>,
        agg: Var<'t>,
    ) -> Result<Var<'t>> {
        let input = Var::concat(&[node_feats, sampled], 0)?;
        if input.shape()[0] != self.in_channels {
            return Err(Error::Shape(format!(
                "resgcn block expects {} input channels, got {:?} + {:?}",
                self.in_channels,
                node_feats.shape(),
                sampled.shape()
            )));
        }
        let main = self.main2.forward(p, self.main1.forward(p, input, agg)?, agg)?;
        let skip_in = match (extra_skip, self.extra_skip_channels) {
            (Some(extra), c) if c > 0 => Var::concat(&[input, extra], 0)?,
            (None, 0) => input,
            _ => {
                return Err(Error::Shape(format!(
                    "resgcn block skip path expects {} extra channels",
                    self.extra_skip_channels
                )))
            }
        };
        let skip = self.skip.forward(p, skip_in, agg)?;
        self.attention.forward(p, main.add(skip)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnPlan {
    pub embed_channels: usize,
    pub block_channels: usize,
    /// Channels of F̂1, F̂2, F̂3.
    pub level_channels: [usize; 3],
    pub progressive: bool,
    pub multi_scale: bool,
}

/// Progressive refiner: embeds `(x, y, c)` per joint, then each block samples
/// an adapted feature level at the current estimate and predicts a residual
/// displacement.
#[derive(Clone, Debug)]
pub struct IgpGcn {
    embed: [GcnLayer; 2],
    blocks: Vec<ResGcnBlock>,
    heads: Vec<NodeLinear>,
    levels: Vec<usize>,
    level_channels: [usize; 3],
}

/// Per-block outputs of the refiner on a tape.
pub struct TraceVars<'t> {
    /// Pose after each block, `N x 3` normalized `(x, y, c)`.
    pub poses: Vec<Var<'t>>,
    pub features: Vec<Var<'t>>,
}

impl IgpGcn {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, plan: &GcnPlan) -> Self {
        let e = plan.embed_channels;
        let b = plan.block_channels;
        let embed = [
            GcnLayer::new(store, rng, "gcn.embed1", 3, e),
            GcnLayer::new(store, rng, "gcn.embed2", e, e),
        ];
        let levels: Vec<usize> = match (plan.progressive, plan.multi_scale) {
            (true, true) => vec![0, 1, 2],
            (true, false) => vec![2, 2, 2],
            (false, _) => vec![2],
        };
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        for (j, &level) in levels.iter().enumerate() {
            let node_in = if j == 0 { e } else { b };
            // The last of three progressive blocks also sees the embedding on its skip path.
            let extra = if plan.progressive && j == 2 { e } else { 0 };
            let name = if plan.progressive {
                format!("gcn.block{}", j + 1)
            } else {
                "gcn.single".to_string()
            };
            blocks.push(ResGcnBlock::new(
                store,
                rng,
                &name,
                node_in + plan.level_channels[level],
                extra,
                b,
            ));
            heads.push(NodeLinear::new(store, rng, &format!("{name}.head"), b, 2, Init::Zeros));
        }
        IgpGcn {
            embed,
            blocks,
            heads,
            levels,
            level_channels: plan.level_channels,
        }
    }

    pub fn blocks(&self) -> &[ResGcnBlock] {
        &self.blocks
    }

    pub fn heads(&self) -> &[NodeLinear] {
        &self.heads
    }

    /// `init` is `N x 3` normalized; `adapted` are F̂1..F̂3. With
    /// `image_guided` off the blocks receive zero features in place of samples.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, '_>,
        init: Var<'t>,
        adapted: &[Var<'t>; 3],
        agg: Var<'t>,
        image_guided: bool,
    ) -> Result<TraceVars<'t>> {
        let n = init.shape()[0];
        if init.shape() != [n, 3] || agg.shape() != [n, n] {
            return Err(Error::Shape(format!(
                "initial pose {:?} does not match graph {:?}",
                init.shape(),
                agg.shape()
            )));
        }
        let tape = p.tape();
        let mut coords = init.narrow(1, 0, 2)?;
        let conf = init.narrow(1, 2, 1)?;
        let x0 = init.transpose()?;
        let emb = self.embed[1].forward(p, self.embed[0].forward(p, x0, agg)?, agg)?;
        let mut h = emb;
        let mut poses = Vec::with_capacity(3);
        let mut features = Vec::with_capacity(3);
        for (j, (block, head)) in self.blocks.iter().zip(&self.heads).enumerate() {
            let level = self.levels[j];
            let sampled = if image_guided {
                Var::grid_sample(adapted[level], coords)?
            } else {
                tape.constant(Tensor::zeros(&[self.level_channels[level], n]))
            };
            let extra = (block.extra_skip_channels > 0).then_some(emb);
            h = block.forward(p, h, sampled, extra, agg)?;
            let disp = head.forward(p, h)?.transpose()?;
            coords = coords.add(disp)?;
            poses.push(Var::concat(&[coords, conf], 1)?);
            features.push(h);
        }
        while poses.len() < 3 {
            poses.insert(0, *poses.last().expect("at least one block"));
        }
        Ok(TraceVars { poses, features })
    }
}

/// Poses after each refinement block, in the crop's normalized frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub pose1: Pose,
    pub pose2: Pose,
    pub final_pose: Pose,
    /// Per-block node features, `C x N` row-major.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub block_features: Vec<Vec<f64>>,
}

impl RefinementTrace {
    pub fn from_vars(trace: &TraceVars<'_>, keep_features: bool) -> Result<Self> {
        let pose = |v: &Var<'_>| Pose::from_rows(v.value().data(), Frame::Normalized);
        Ok(RefinementTrace {
            pose1: pose(&trace.poses[0])?,
            pose2: pose(&trace.poses[1])?,
            final_pose: pose(&trace.poses[2])?,
            block_features: if keep_features {
                trace.features.iter().map(|f| f.value().data().to_vec()).collect()
            } else {
                Vec::new()
            },
        })
    }

    pub fn poses(&self) -> [&Pose; 3] {
        [&self.pose1, &self.pose2, &self.final_pose]
    }
}

/// Greedy pairing by descending box IoU. Each instance joins at most one
/// pair; instances overlapping nobody stay unpaired. Equal IoUs resolve to
/// the lexicographically smaller index pair.
pub fn pair_people(instances: &[(BoundingBox, Pose)]) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for i in 0..instances.len() {
        for j in i + 1..instances.len() {
            let o = iou(&instances[i].0, &instances[j].0);
            if o > 0.0 {
                candidates.push((o, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut used = vec![false; instances.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used[i] && !used[j] {
            used[i] = true;
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Relative placement of each person's box with respect to the other's,
/// used as a per-node tag. Swapping the two people swaps the tags.
pub fn couple_tags(a: &BoundingBox, b: &BoundingBox) -> ([f64; 2], [f64; 2]) {
    let (ca, cb) = (a.center(), b.center());
    let sx = (a.width() + b.width()) / 2.0;
    let sy = (a.height() + b.height()) / 2.0;
    let t = [(ca.0 - cb.0) / sx, (ca.1 - cb.1) / sy];
    (t, [-t[0], -t[1]])
}

/// One member of a couple as seen by [`CoupleRefiner::forward`].
#[derive(Clone, Copy)]
pub struct CoupleMember<'t> {
    /// `N x 3` normalized pose.
    pub pose: Var<'t>,
    /// The member's own adapted fine map.
    pub fine: Var<'t>,
    pub tag: [f64; 2],
}

/// Refines two people jointly on the 2N-node couple graph.
#[derive(Clone, Debug)]
pub struct CoupleRefiner {
    embed: GcnLayer,
    block: ResGcnBlock,
    head: NodeLinear,
}

impl CoupleRefiner {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, plan: &GcnPlan) -> Self {
        let e = plan.embed_channels;
        CoupleRefiner {
            embed: GcnLayer::new(store, rng, "couple.embed", 5, e),
            block: ResGcnBlock::new(
                store,
                rng,
                "couple.block",
                e + plan.level_channels[2],
                0,
                plan.block_channels,
            ),
            head: NodeLinear::new(store, rng, "couple.head", plan.block_channels, 2, Init::Zeros),
        }
    }

    pub fn head(&self) -> &NodeLinear {
        &self.head
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t, '_>,
        a: CoupleMember<'t>,
        b: CoupleMember<'t>,
        agg: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n = a.pose.shape()[0];
        if b.pose.shape() != a.pose.shape() || agg.shape() != [2 * n, 2 * n] {
            return Err(Error::Shape(format!(
                "couple members {:?} / {:?} do not share a skeleton matching {:?}",
                a.pose.shape(),
                b.pose.shape(),
                agg.shape()
            )));
        }
        let tape = p.tape();
        let tags: Vec<f64> = [a.tag, b.tag]
            .iter()
            .flat_map(|t| std::iter::repeat_n(*t, n).flatten())
            .collect();
        let tags = tape.constant(Tensor::from_vec(&[2 * n, 2], tags)?);
        let stacked = Var::concat(&[a.pose, b.pose], 0)?;
        let x = Var::concat(&[stacked, tags], 1)?.transpose()?;
        let emb = self.embed.forward(p, x, agg)?;
        let coords = stacked.narrow(1, 0, 2)?;
        let sampled = Var::concat(
            &[
                Var::grid_sample(a.fine, a.pose.narrow(1, 0, 2)?)?,
                Var::grid_sample(b.fine, b.pose.narrow(1, 0, 2)?)?,
            ],
            1,
        )?;
        let h = self.block.forward(p, emb, sampled, None, agg)?;
        let disp = self.head.forward(p, h)?.transpose()?;
        let refined = Var::concat(&[coords.add(disp)?, stacked.narrow(1, 2, 1)?], 1)?;
        Ok((refined.narrow(0, 0, n)?, refined.narrow(0, n, n)?))
    }
}
