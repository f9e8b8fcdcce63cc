//! Small encoder-decoder producing a three-level feature pyramid, the heatmap
//! head, and heatmap-to-coordinate conversion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Bound, Init, ParamStore};
use crate::pose::{Frame, Joint, Pose};
use crate::skeleton::BoundingBox;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Crop height and width; both must be divisible by 8.
    pub crop_size: [usize; 2],
    /// Channels of the three stride-2 encoder stages (the last is F1's).
    pub encoder_channels: [usize; 3],
    pub f2_channels: usize,
    pub f3_channels: usize,
    /// Concatenate the matching encoder map into each decoder stage.
    pub skip_connections: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            crop_size: [64, 64],
            encoder_channels: [16, 32, 64],
            f2_channels: 32,
            f3_channels: 32,
            skip_connections: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.crop_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "crop_size {h}x{w} must be positive multiples of 8"
            )));
        }
        if self.in_channels == 0
            || self.encoder_channels.contains(&0)
            || self.f2_channels == 0
            || self.f3_channels == 0
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// `(channels, height, width)` of F1, F2 and F3.
    pub fn pyramid_shapes(&self) -> [[usize; 3]; 3] {
        let [h, w] = self.crop_size;
        [
            [self.encoder_channels[2], h / 8, w / 8],
            [self.f2_channels, h / 4, w / 4],
            [self.f3_channels, h / 2, w / 2],
        ]
    }

    pub fn heatmap_size(&self) -> [usize; 2] {
        let [_, h, w] = self.pyramid_shapes()[2];
        [h, w]
    }
}

/// A person crop ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCrop {
    /// `C x H x W`, values in `[0, 1]`.
    pub pixels: Tensor,
    /// Region of the source image the crop covers.
    pub source_box: BoundingBox,
    pub source_image_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// Coarse, middle, fine.
    pub levels: [Tensor; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `N x Hh x Wh` raw scores.
    pub scores: Tensor,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    enc: [Conv2d; 3],
    dec2: Conv2d,
    dec3: Conv2d,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &BackboneConfig) -> Self {
        let [c0, c1, c2] = cfg.encoder_channels;
        let enc = [
            Conv2d::new(store, rng, "backbone.enc1", cfg.in_channels, c0, 3, 2, Init::He),
            Conv2d::new(store, rng, "backbone.enc2", c0, c1, 3, 2, Init::He),
            Conv2d::new(store, rng, "backbone.enc3", c1, c2, 3, 2, Init::He),
        ];
        let (s1, s0) = if cfg.skip_connections { (c1, c0) } else { (0, 0) };
        let dec2 = Conv2d::new(store, rng, "backbone.dec2", c2 + s1, cfg.f2_channels, 3, 1, Init::He);
        let dec3 = Conv2d::new(
            store,
            rng,
            "backbone.dec3",
            cfg.f2_channels + s0,
            cfg.f3_channels,
            3,
            1,
            Init::He,
        );
        Backbone {
            cfg: cfg.clone(),
            enc,
            dec2,
            dec3,
        }
    }

    /// Encodes a `C x H x W` crop and decodes F1 (1/8), F2 (1/4) and F3 (1/2),
    /// each decoder stage upsampling and, with skip connections, merging the
    /// matching encoder map.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, crop: Var<'t>) -> Result<[Var<'t>; 3]> {
        let expected = [self.cfg.in_channels, self.cfg.crop_size[0], self.cfg.crop_size[1]];
        if crop.shape() != expected {
            return Err(Error::Shape(format!(
                "crop {:?} does not match configured {expected:?}",
                crop.shape()
            )));
        }
        let e1 = self.enc[0].forward(p, crop)?.relu();
        let e2 = self.enc[1].forward(p, e1)?.relu();
        let f1 = self.enc[2].forward(p, e2)?.relu();
        let [_, h2, w2] = self.cfg.pyramid_shapes()[1];
        let [_, h3, w3] = self.cfg.pyramid_shapes()[2];
        let up1 = f1.upsample_bilinear(h2, w2)?;
        let merge = |up: Var<'t>, skip: Var<'t>| {
            if self.cfg.skip_connections {
                Var::concat(&[up, skip], 0)
            } else {
                Ok(up)
            }
        };
        let f2 = self.dec2.forward(p, merge(up1, e2)?)?.relu();
        let up2 = f2.upsample_bilinear(h3, w3)?;
        let f3 = self.dec3.forward(p, merge(up2, e1)?)?.relu();
        Ok([f1, f2, f3])
    }
}

/// Linear 3x3 convolution from the adapted fine map to per-joint scores.
#[derive(Clone, Debug)]
pub struct HeatmapHead {
    conv: Conv2d,
}

impl HeatmapHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, in_channels: usize, joints: usize) -> Self {
        HeatmapHead {
            conv: Conv2d::new(store, rng, "heatmap_head", in_channels, joints, 3, 1, Init::Lecun),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, fine: Var<'t>) -> Result<Var<'t>> {
        if fine.shape().first() != Some(&self.conv.in_channels) {
            return Err(Error::Shape(format!(
                "heatmap head expects {} channels, got {:?}",
                self.conv.in_channels,
                fine.shape()
            )));
        }
        self.conv.forward(p, fine)
    }
}

/// Maps `N x 3` heatmap-grid rows to the crop's `[-1, 1]` frame.
///
/// A grid of `W` cells spans the crop, so cell `g` has its center at
/// `(2g + 1) / W - 1`. The confidence column passes through.
pub fn grid_to_normalized<'t>(rows: Var<'t>, heatmap_size: [usize; 2]) -> Result<Var<'t>> {
    let [hh, wh] = heatmap_size;
    let x = rows
        .narrow(1, 0, 1)?
        .scale(2.0 / wh as f64)
        .offset(1.0 / wh as f64 - 1.0);
    let y = rows
        .narrow(1, 1, 1)?
        .scale(2.0 / hh as f64)
        .offset(1.0 / hh as f64 - 1.0);
    Var::concat(&[x, y, rows.narrow(1, 2, 1)?], 1)
}

/// Integral regression: per-joint softmax expectation in heatmap-grid units,
/// with the softmax peak as confidence.
pub fn soft_argmax(h: &Heatmap) -> Result<Pose> {
    let tape = Tape::new();
    let rows = tape.constant(h.scores.clone()).soft_argmax()?;
    let value = rows.value();
    Pose::from_rows(value.data(), Frame::HeatmapGrid)
}

/// Grid cell of the largest raw score (first in row-major order on ties);
/// confidence is the softmax peak, as for [`soft_argmax`].
pub fn hard_argmax(h: &Heatmap) -> Result<Pose> {
    let s = h.scores.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("heatmap must be N x H x W, got {s:?}")));
    }
    let (n, hh, ww) = (s[0], s[1], s[2]);
    let plane = hh * ww;
    let joints = (0..n)
        .map(|k| {
            let scores = &h.scores.data()[k * plane..(k + 1) * plane];
            let mut best = 0;
            for (i, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = i;
                }
            }
            let mut probs = scores.to_vec();
            softmax_in_place(&mut probs);
            Joint {
                x: (best % ww) as f64,
                y: (best / ww) as f64,
                c: probs[best],
            }
        })
        .collect();
    Pose::new(joints, Frame::HeatmapGrid)
}
