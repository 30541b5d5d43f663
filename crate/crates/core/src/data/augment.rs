use rand::Rng;
use serde::{Deserialize, Serialize};

use super::frame::{DepthFrame, Sample};
use crate::error::Result;
use crate::p2o::PoseUVZ;

/// Sampling ranges for online augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translation_mm: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 180.0,
            scale_min: 0.9,
            scale_max: 1.1,
            translation_mm: 10.0,
        }
    }
}

/// One concrete transform: in-plane rotation about the crop center, scale
/// about the hand center, then translation in mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub translation_mm: [f64; 3],
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        rotation_deg: 0.0,
        scale: 1.0,
        translation_mm: [0.0; 3],
    };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let r = cfg.rotation_deg;
        let t = cfg.translation_mm;
        Self {
            rotation_deg: if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 },
            scale: if cfg.scale_max > cfg.scale_min {
                rng.random_range(cfg.scale_min..=cfg.scale_max)
            } else {
                cfg.scale_min
            },
            translation_mm: [0; 3].map(|_| if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 }),
        }
    }
}

struct NormalizedTransform {
    cos: f64,
    sin: f64,
    scale: f64,
    shift: [f64; 3],
}

impl NormalizedTransform {
    fn new(p: &AugmentParams, frame: &DepthFrame) -> Self {
        let a = p.rotation_deg.to_radians();
        let cube = frame.crop.cube;
        Self {
            cos: a.cos(),
            sin: a.sin(),
            scale: p.scale,
            // The crop window spans 2 * cube mm at the hand center depth.
            shift: [
                p.translation_mm[0] / (2.0 * cube),
                p.translation_mm[1] / (2.0 * cube),
                p.translation_mm[2] / cube,
            ],
        }
    }

    fn forward(&self, n: [f64; 3]) -> [f64; 3] {
        let (du, dv) = (n[0] - 0.5, n[1] - 0.5);
        let ru = self.cos * du - self.sin * dv;
        let rv = self.sin * du + self.cos * dv;
        [
            0.5 + self.scale * ru + self.shift[0],
            0.5 + self.scale * rv + self.shift[1],
            self.scale * n[2] + self.shift[2],
        ]
    }

    /// Source location of an output image position (u, v only).
    fn inverse_uv(&self, u: f64, v: f64) -> (f64, f64) {
        let du = (u - 0.5 - self.shift[0]) / self.scale;
        let dv = (v - 0.5 - self.shift[1]) / self.scale;
        (
            0.5 + self.cos * du + self.sin * dv,
            0.5 - self.sin * du + self.cos * dv,
        )
    }
}

/// Applies `params` to image and labels together. Resampling is nearest;
/// pixels pushed outside the cube become background.
pub fn augment_with(sample: &Sample, params: &AugmentParams) -> Result<Sample> {
    if *params == AugmentParams::IDENTITY {
        return Ok(sample.clone());
    }
    let frame = &sample.frame;
    let t = NormalizedTransform::new(params, frame);
    let s = frame.size;
    let sf = s as f64;
    let mut pixels = vec![1.0f32; s * s];
    let mut valid = vec![false; s * s];
    for row in 0..s {
        for col in 0..s {
            let (u, v) = t.inverse_uv((col as f64 + 0.5) / sf, (row as f64 + 0.5) / sf);
            let (sc, sr) = ((u * sf).floor(), (v * sf).floor());
            if sc < 0.0 || sr < 0.0 || sc >= sf || sr >= sf {
                continue;
            }
            let src = sr as usize * s + sc as usize;
            if !frame.valid[src] {
                continue;
            }
            let z = t.scale * frame.pixels[src] as f64 + t.shift[2];
            if z.abs() <= 1.0 {
                pixels[row * s + col] = z as f32;
                valid[row * s + col] = true;
            }
        }
    }
    let pose = PoseUVZ {
        joints: sample.pose.joints.iter().map(|&j| t.forward(j)).collect(),
    };
    let frame = DepthFrame {
        pixels,
        valid,
        ..frame.clone()
    };
    let pose_world = frame.to_world(&pose)?;
    Ok(Sample {
        frame,
        pose,
        pose_world,
    })
}

pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    augment_with(sample, &AugmentParams::sample(cfg, rng))
}
