//! The assembled network: backbone, feature adaptation, heatmap head,
//! progressive graph refiner and the optional couple refiner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::FeatureAdaptation;
use crate::autodiff::{Tape, Var};
use crate::backbone::{grid_to_normalized, Backbone, BackboneConfig, HeatmapHead, ImageCrop};
use crate::correction::{couple_tags, CoupleMember, CoupleRefiner, GcnPlan, IgpGcn, RefinementTrace, TraceVars};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::pose::{Frame, Pose};
use crate::skeleton::{build_adjacency, build_couple_graph, BoundingBox, SkeletonSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Name of a bundled skeleton.
    pub skeleton: String,
    pub backbone: BackboneConfig,
    /// Width of the pose embedding.
    pub gcn_channels: usize,
    /// Width of each residual graph block.
    pub block_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            skeleton: "ocpose12".into(),
            backbone: BackboneConfig::default(),
            gcn_channels: 128,
            block_channels: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.skeleton_spec()?;
        if self.gcn_channels == 0 || self.block_channels == 0 {
            return Err(Error::Config("graph channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn skeleton_spec(&self) -> Result<SkeletonSpec> {
        SkeletonSpec::bundled(&self.skeleton)
            .ok_or_else(|| Error::Config(format!("unknown skeleton {:?}", self.skeleton)))
    }
}

/// Component switches; all on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Sample image features at the joints (off: blocks see zeros).
    pub image_guided: bool,
    /// Three blocks (off: one block on the fine map).
    pub progressive: bool,
    /// Coarse-to-fine sampling (off: every block samples the fine map).
    pub multi_scale: bool,
    /// Feature adaptation (off: backbone maps are used directly).
    pub cfa: bool,
    /// Fusion blocks inside the adaptation (off: a conv block per level).
    pub fusion: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            image_guided: true,
            progressive: true,
            multi_scale: true,
            cfa: true,
            fusion: true,
        }
    }
}

impl Ablation {
    /// Turns off the component named as on the command line.
    pub fn disable(&mut self, name: &str) -> Result<()> {
        match name {
            "image_guided" => self.image_guided = false,
            "progressive" => self.progressive = false,
            "multi_scale" => self.multi_scale = false,
            "cfa" => self.cfa = false,
            "fusion" => self.fusion = false,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }
}

/// Tape values of one instance's forward pass.
pub struct ForwardVars<'t> {
    /// `N x Hh x Wh` raw scores.
    pub heatmap: Var<'t>,
    /// `N x 3` normalized initial pose.
    pub initial: Var<'t>,
    pub trace: TraceVars<'t>,
    pub adapted: [Var<'t>; 3],
}

/// Plain-value result of [`Model::infer`], in the crop's normalized frame.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceOutput {
    pub initial: Pose,
    pub trace: RefinementTrace,
    /// Adapted fine map, kept for the couple refiner.
    pub fine: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub skeleton: SkeletonSpec,
    pub params: ParamStore,
    pub couple_params: ParamStore,
    backbone: Backbone,
    cfa: Option<FeatureAdaptation>,
    head: HeatmapHead,
    gcn: IgpGcn,
    couple: CoupleRefiner,
    agg: Tensor,
    couple_agg: Tensor,
}

impl Model {
    /// Builds a freshly initialized model; parameters depend only on `seed`.
    pub fn new(config: &ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        config.validate()?;
        let skeleton = config.skeleton_spec()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, &mut rng, &config.backbone);
        let cfa = ablation
            .cfa
            .then(|| FeatureAdaptation::new(&mut params, &mut rng, &config.backbone, ablation.fusion));
        let [[c1, ..], [c2, ..], [c3, ..]] = config.backbone.pyramid_shapes();
        let head = HeatmapHead::new(&mut params, &mut rng, c3, skeleton.num_joints());
        let plan = GcnPlan {
            embed_channels: config.gcn_channels,
            block_channels: config.block_channels,
            level_channels: [c1, c2, c3],
            progressive: ablation.progressive,
            multi_scale: ablation.multi_scale,
        };
        let gcn = IgpGcn::new(&mut params, &mut rng, &plan);
        // Separate stream so the base weights do not depend on the couple stage.
        let mut couple_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut couple_params = ParamStore::new();
        let couple = CoupleRefiner::new(&mut couple_params, &mut couple_rng, &plan);
        Ok(Model {
            config: config.clone(),
            ablation,
            agg: build_adjacency(&skeleton)?.mean_aggregation(),
            couple_agg: build_couple_graph(&skeleton)?.adjacency.mean_aggregation(),
            skeleton,
            params,
            couple_params,
            backbone,
            cfa,
            head,
            gcn,
            couple,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.skeleton.num_joints()
    }

    pub fn crop_size(&self) -> [usize; 2] {
        self.config.backbone.crop_size
    }

    pub fn gcn(&self) -> &IgpGcn {
        &self.gcn
    }

    pub fn couple_refiner(&self) -> &CoupleRefiner {
        &self.couple
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, crop: Var<'t>) -> Result<ForwardVars<'t>> {
        let pyramid = self.backbone.forward(p, crop)?;
        let adapted = match &self.cfa {
            Some(cfa) => cfa.forward(p, &pyramid)?,
            None => pyramid,
        };
        let heatmap = self.head.forward(p, adapted[2])?;
        let (initial, trace) = self.refine(p, heatmap, &adapted)?;
        Ok(ForwardVars {
            heatmap,
            initial,
            trace,
            adapted,
        })
    }

    /// Everything after the heatmap head: integral regression to the
    /// normalized frame, then graph refinement.
    pub fn refine<'t>(
        &self,
        p: &Bound<'t, '_>,
        heatmap: Var<'t>,
        adapted: &[Var<'t>; 3],
    ) -> Result<(Var<'t>, TraceVars<'t>)> {
        let grid = heatmap.soft_argmax()?;
        let initial = grid_to_normalized(grid, self.config.backbone.heatmap_size())?;
        let agg = p.tape().constant(self.agg.clone());
        let trace = self.gcn.forward(p, initial, adapted, agg, self.ablation.image_guided)?;
        Ok((initial, trace))
    }

    pub fn infer(&self, crop: &ImageCrop) -> Result<InstanceOutput> {
        let tape = Tape::new();
        let p = Bound::new(&tape, &self.params, false);
        let out = self.forward(&p, tape.constant(crop.pixels.clone()))?;
        let initial = Pose::from_rows(out.initial.value().data(), Frame::Normalized)?;
        let trace = RefinementTrace::from_vars(&out.trace, false)?;
        let fine = (*out.adapted[2].value()).clone();
        Ok(InstanceOutput {
            initial,
            trace,
            fine,
        })
    }

    /// Couple refinement on a tape; `p` binds [`Model::couple_params`].
    pub fn couple_forward<'t>(
        &self,
        p: &Bound<'t, '_>,
        a: CoupleMember<'t>,
        b: CoupleMember<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let agg = p.tape().constant(self.couple_agg.clone());
        self.couple.forward(p, a, b, agg)
    }

    /// Jointly refines the final poses of two people whose crops cover
    /// `box_a` and `box_b`.
    pub fn refine_couple(
        &self,
        a: &InstanceOutput,
        box_a: &BoundingBox,
        b: &InstanceOutput,
        box_b: &BoundingBox,
    ) -> Result<(Pose, Pose)> {
        let tape = Tape::new();
        let p = Bound::new(&tape, &self.couple_params, false);
        let (ta, tb) = couple_tags(box_a, box_b);
        let member = |o: &InstanceOutput, tag| -> Result<CoupleMember<'_>> {
            let n = o.trace.final_pose.len();
            Ok(CoupleMember {
                pose: tape.constant(Tensor::from_vec(&[n, 3], o.trace.final_pose.to_rows())?),
                fine: tape.constant(o.fine.clone()),
                tag,
            })
        };
        let (ra, rb) = self.couple_forward(&p, member(a, ta)?, member(b, tb)?)?;
        Ok((
            Pose::from_rows(ra.value().data(), Frame::Normalized)?,
            Pose::from_rows(rb.value().data(), Frame::Normalized)?,
        ))
    }
}
