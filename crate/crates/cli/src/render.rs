//! Pose overlays. Ground truth is green, the initial pose blue and the
//! final pose red; limbs use a darker shade of the same color. Joints whose
//! ground truth is invisible are drawn as rings, the rest as filled discs.

use image::{Rgb, RgbImage};
use serde::Serialize;

use occpose::pose::{GroundTruthPose, Pose};
use occpose::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Gt,
    Initial,
    Final,
}

impl Layer {
    pub fn color(self) -> Rgb<u8> {
        match self {
            Layer::Gt => Rgb([0, 200, 0]),
            Layer::Initial => Rgb([40, 120, 255]),
            Layer::Final => Rgb([255, 40, 40]),
        }
    }

    pub fn limb_color(self) -> Rgb<u8> {
        let Rgb([r, g, b]) = self.color();
        Rgb([r / 2, g / 2, b / 2])
    }
}

/// Layer names and colors, as recorded in render manifests.
pub fn legend() -> serde_json::Value {
    let entry = |l: Layer| {
        let Rgb(c) = l.color();
        serde_json::json!({ "joint": c, "limb": l.limb_color().0 })
    };
    serde_json::json!({
        "gt": entry(Layer::Gt),
        "initial": entry(Layer::Initial),
        "final": entry(Layer::Final),
        "invisible": "ring",
        "visible": "disc",
    })
}

/// One annotated person with both predicted poses, all in image pixels.
pub struct Person<'a> {
    pub gt: &'a GroundTruthPose,
    pub initial: &'a Pose,
    pub final_pose: &'a Pose,
}

/// Marker radius in output pixels.
pub fn marker_radius(scale: u32) -> f64 {
    scale as f64 + 1.0
}

/// Draws the requested layers over an upscaled copy of `pixels` (`C x H x W`
/// in `[0, 1]`). Image point `(x, y)` lands at `(x * scale, y * scale)`.
pub fn draw(pixels: &Tensor, people: &[Person<'_>], edges: &[(usize, usize)], scale: u32, layers: &[Layer]) -> RgbImage {
    let &[c, h, w] = pixels.shape() else {
        panic!("image must be C x H x W");
    };
    let s = scale as usize;
    let mut img = RgbImage::from_fn((w * s) as u32, (h * s) as u32, |x, y| {
        let (i, j) = (y as usize / s, x as usize / s);
        let px = |ch: usize| (pixels.get3(ch.min(c - 1), i, j).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    // Fixed drawing order so later layers sit on top.
    for layer in [Layer::Gt, Layer::Initial, Layer::Final] {
        if !layers.contains(&layer) {
            continue;
        }
        for person in people {
            let (points, labeled): (Vec<[f64; 2]>, Vec<bool>) = match layer {
                Layer::Gt => (person.gt.coords.clone(), person.gt.labeled.clone()),
                Layer::Initial => (person.initial.coords(), vec![true; person.initial.len()]),
                Layer::Final => (person.final_pose.coords(), vec![true; person.final_pose.len()]),
            };
            let at = |k: usize| [points[k][0] * scale as f64, points[k][1] * scale as f64];
            for &(a, b) in edges {
                if labeled[a] && labeled[b] {
                    line(&mut img, at(a), at(b), layer.limb_color());
                }
            }
            for k in (0..points.len()).filter(|&k| labeled[k]) {
                let hollow = person.gt.labeled[k] && !person.gt.visible[k];
                marker(&mut img, at(k), marker_radius(scale), hollow, layer.color());
            }
        }
    }
    img
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: Rgb<u8>) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for t in 0..=steps {
        let f = t as f64 / steps as f64;
        let x = a[0] + f * (b[0] - a[0]);
        let y = a[1] + f * (b[1] - a[1]);
        put(img, x.floor() as i64, y.floor() as i64, color);
    }
}

/// Disc, or ring of width one pixel, centered on the continuous point `c`.
fn marker(img: &mut RgbImage, c: [f64; 2], r: f64, hollow: bool, color: Rgb<u8>) {
    let reach = r.ceil() as i64 + 1;
    let (cx, cy) = (c[0].floor() as i64, c[1].floor() as i64);
    for y in cy - reach..=cy + reach {
        for x in cx - reach..=cx + reach {
            let d = ((x as f64 + 0.5 - c[0]).powi(2) + (y as f64 + 0.5 - c[1]).powi(2)).sqrt();
            if d <= r && (!hollow || d > r - 1.0) {
                put(img, x, y, color);
            }
        }
    }
}
