//! Cascaded feature adaption: a conv block on the coarse map, then fusion
//! blocks that carry each adapted level into the next finer one.

use rand::Rng;

use crate::autodiff::Var;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Bound, Init, ParamStore};

/// Upsample-project-gate-convolve merge of a coarser adapted map into the
/// next finer backbone map.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    proj: Conv2d,
    attention: Conv2d,
    conv: Conv2d,
    coarse_channels: usize,
    fine_channels: usize,
}

impl FusionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        coarse_channels: usize,
        fine_channels: usize,
    ) -> Self {
        FusionBlock {
            proj: Conv2d::new(store, rng, &format!("{name}.proj"), coarse_channels, fine_channels, 1, 1, Init::Lecun),
            attention: Conv2d::new(store, rng, &format!("{name}.attention"), 2 * fine_channels, 1, 1, 1, Init::Lecun),
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), fine_channels, fine_channels, 3, 1, Init::He),
            coarse_channels,
            fine_channels,
        }
    }

    /// Bias of the single-channel gate logit, exposed for saturation probes.
    pub fn attention_bias(&self) -> crate::params::ParamId {
        self.attention.bias
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, coarse: Var<'t>, fine: Var<'t>) -> Result<Var<'t>> {
        let (cs, fs) = (coarse.shape(), fine.shape());
        if cs.len() != 3 || fs.len() != 3 || cs[0] != self.coarse_channels || fs[0] != self.fine_channels {
            return Err(Error::Shape(format!(
                "fusion expects ({} x h x w, {} x H x W), got {cs:?} and {fs:?}",
                self.coarse_channels, self.fine_channels
            )));
        }
        if cs[1] >= fs[1] || cs[2] >= fs[2] {
            return Err(Error::Shape(format!(
                "fusion level mismatch: {cs:?} is not coarser than {fs:?}"
            )));
        }
        let up = coarse.upsample_bilinear(fs[1], fs[2])?;
        let projected = self.proj.forward(p, up)?;
        let logits = self
            .attention
            .forward(p, Var::concat(&[projected, fine], 0)?)?;
        let mixed = Var::gate(logits.sigmoid(), projected, fine)?;
        Ok(self.conv.forward(p, mixed)?.relu())
    }
}

#[derive(Clone, Debug)]
enum LevelAdapter {
    Fusion(FusionBlock),
    /// Ablation without fusion: an independent conv block per level.
    Conv(Conv2d),
}

#[derive(Clone, Debug)]
pub struct FeatureAdaptation {
    coarse: Conv2d,
    middle: LevelAdapter,
    fine: LevelAdapter,
}

impl FeatureAdaptation {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &BackboneConfig, fusion: bool) -> Self {
        let [[c1, ..], [c2, ..], [c3, ..]] = cfg.pyramid_shapes();
        let coarse = Conv2d::new(store, rng, "cfa.conv1", c1, c1, 3, 1, Init::He);
        let (middle, fine) = if fusion {
            (
                LevelAdapter::Fusion(FusionBlock::new(store, rng, "cfa.fusion2", c1, c2)),
                LevelAdapter::Fusion(FusionBlock::new(store, rng, "cfa.fusion3", c2, c3)),
            )
        } else {
            (
                LevelAdapter::Conv(Conv2d::new(store, rng, "cfa.conv2", c2, c2, 3, 1, Init::He)),
                LevelAdapter::Conv(Conv2d::new(store, rng, "cfa.conv3", c3, c3, 3, 1, Init::He)),
            )
        };
        FeatureAdaptation { coarse, middle, fine }
    }

    pub fn fusion_blocks(&self) -> Vec<&FusionBlock> {
        [&self.middle, &self.fine]
            .into_iter()
            .filter_map(|l| match l {
                LevelAdapter::Fusion(f) => Some(f),
                LevelAdapter::Conv(_) => None,
            })
            .collect()
    }

    /// F̂1 = conv(F1); F̂2 = fusion(F̂1, F2); F̂3 = fusion(F̂2, F3).
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, pyramid: &[Var<'t>; 3]) -> Result<[Var<'t>; 3]> {
        let a1 = conv_block(&self.coarse, p, pyramid[0])?;
        let a2 = adapt(&self.middle, p, a1, pyramid[1])?;
        let a3 = adapt(&self.fine, p, a2, pyramid[2])?;
        Ok([a1, a2, a3])
    }
}

/// One 3x3 convolution followed by a rectifier.
pub fn conv_block<'t>(conv: &Conv2d, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
    if x.shape().first() != Some(&conv.in_channels) {
        return Err(Error::Shape(format!(
            "conv block expects {} channels, got {:?}",
            conv.in_channels,
            x.shape()
        )));
    }
    Ok(conv.forward(p, x)?.relu())
}

fn adapt<'t>(level: &LevelAdapter, p: &Bound<'t, '_>, prev: Var<'t>, raw: Var<'t>) -> Result<Var<'t>> {
    match level {
        LevelAdapter::Fusion(f) => f.forward(p, prev, raw),
        LevelAdapter::Conv(c) => conv_block(c, p, raw),
    }
}
