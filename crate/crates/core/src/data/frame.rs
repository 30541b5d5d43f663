use serde::{Deserialize, Serialize};

use super::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::p2o::PoseUVZ;

/// Depth image in millimetres as captured; `0` marks a missing reading.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDepth {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
}

impl RawDepth {
    pub fn new(width: usize, height: usize, depth: Vec<f32>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::Data(format!(
                "depth buffer has {} values for a {width}x{height} image",
                depth.len()
            )));
        }
        Ok(Self { width, height, depth })
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.depth[row * self.width + col]
    }
}

/// Maps original-image UVZ (pixels, pixels, mm) to crop-normalized UVZ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    /// Hand center `(u, v, z_mm)` in the original image.
    pub center: [f64; 3],
    /// Half extent of the crop cube in mm.
    pub cube: f64,
    /// Left, top, width, height of the window in original pixels.
    pub window: [f64; 4],
}

impl CropTransform {
    pub fn new(center: [f64; 3], cube: f64, intrinsics: &CameraIntrinsics) -> Result<Self> {
        if !(cube > 0.0) {
            return Err(Error::Data(format!("crop cube must be positive, got {cube}")));
        }
        if !(center[2] > 0.0) {
            return Err(Error::Data(format!("hand center depth {} is not positive", center[2])));
        }
        let w = 2.0 * cube * intrinsics.fx / center[2];
        let h = 2.0 * cube * intrinsics.fy / center[2];
        Ok(Self {
            center,
            cube,
            window: [center[0] - w / 2.0, center[1] - h / 2.0, w, h],
        })
    }

    pub fn normalize(&self, uvz: [f64; 3]) -> [f64; 3] {
        let [u0, v0, w, h] = self.window;
        [
            (uvz[0] - u0) / w,
            (uvz[1] - v0) / h,
            (uvz[2] - self.center[2]) / self.cube,
        ]
    }

    pub fn denormalize(&self, n: [f64; 3]) -> [f64; 3] {
        let [u0, v0, w, h] = self.window;
        [n[0] * w + u0, n[1] * h + v0, n[2] * self.cube + self.center[2]]
    }
}

/// Cropped, resized depth with values normalized to `[-1, 1]` about the
/// hand center; background and out-of-cube pixels hold `1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub valid: Vec<bool>,
    pub crop: CropTransform,
    pub intrinsics: CameraIntrinsics,
}

impl DepthFrame {
    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.pixels[row * self.size + col]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn normalize_world(&self, world: &[[f64; 3]]) -> Result<PoseUVZ> {
        let joints = world
            .iter()
            .map(|&p| Ok(self.crop.normalize(self.intrinsics.project(p)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PoseUVZ { joints })
    }

    pub fn to_original(&self, pose: &PoseUVZ) -> Vec<[f64; 3]> {
        pose.joints.iter().map(|&n| self.crop.denormalize(n)).collect()
    }

    pub fn to_world(&self, pose: &PoseUVZ) -> Result<Vec<[f64; 3]>> {
        self.to_original(pose)
            .into_iter()
            .map(|p| self.intrinsics.back_project(p))
            .collect()
    }

    /// World coordinates of a predicted pose; never fails on depth.
    pub fn predicted_world(&self, pose: &PoseUVZ) -> Vec<[f64; 3]> {
        self.to_original(pose)
            .into_iter()
            .map(|p| self.intrinsics.back_project_unchecked(p))
            .collect()
    }
}

/// Crop around `center` (original `(u, v, z_mm)`), resize to
/// `out_size x out_size` by nearest sampling, and normalize depth to
/// `[-1, 1]` over `center.z ± cube`.
pub fn crop_and_normalize(
    raw: &RawDepth,
    center: [f64; 3],
    cube: f64,
    intrinsics: &CameraIntrinsics,
    out_size: usize,
) -> Result<DepthFrame> {
    if !(center[0] >= 0.0
        && center[1] >= 0.0
        && center[0] <= raw.width as f64
        && center[1] <= raw.height as f64)
    {
        return Err(Error::Data(format!(
            "hand center ({:.2}, {:.2}) lies outside the {}x{} image",
            center[0], center[1], raw.width, raw.height
        )));
    }
    let crop = CropTransform::new(center, cube, intrinsics)?;
    let [u0, v0, w, h] = crop.window;
    let n = out_size * out_size;
    let mut pixels = vec![1.0f32; n];
    let mut valid = vec![false; n];
    for row in 0..out_size {
        let v = v0 + (row as f64 + 0.5) * h / out_size as f64;
        let src_row = v.round();
        if src_row < 0.0 || src_row >= raw.height as f64 {
            continue;
        }
        for col in 0..out_size {
            let u = u0 + (col as f64 + 0.5) * w / out_size as f64;
            let src_col = u.round();
            if src_col < 0.0 || src_col >= raw.width as f64 {
                continue;
            }
            let d = raw.at(src_col as usize, src_row as usize) as f64;
            if d <= 0.0 {
                continue;
            }
            let z = (d - center[2]) / cube;
            if z.abs() <= 1.0 {
                pixels[row * out_size + col] = z as f32;
                valid[row * out_size + col] = true;
            }
        }
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Data("crop contains no valid depth pixels".into()));
    }
    Ok(DepthFrame {
        size: out_size,
        pixels,
        valid,
        crop,
        intrinsics: *intrinsics,
    })
}

/// One annotated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frame: DepthFrame,
    /// Crop-normalized joint coordinates.
    pub pose: PoseUVZ,
    pub pose_world: Vec<[f64; 3]>,
}

impl Sample {
    /// Crops `raw` around the centroid of the world joints.
    pub fn from_world(
        raw: &RawDepth,
        joints_world: &[[f64; 3]],
        cube: f64,
        intrinsics: &CameraIntrinsics,
        out_size: usize,
    ) -> Result<Self> {
        if joints_world.is_empty() {
            return Err(Error::Data("sample has no joints".into()));
        }
        let n = joints_world.len() as f64;
        let mut c = [0.0; 3];
        for p in joints_world {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        let center = intrinsics.project(c)?;
        let frame = crop_and_normalize(raw, center, cube, intrinsics, out_size)?;
        let pose = frame.normalize_world(joints_world)?;
        Ok(Self {
            frame,
            pose,
            pose_world: joints_world.to_vec(),
        })
    }

    pub fn joints(&self) -> usize {
        self.pose.joints.len()
    }

    /// The same frame labelled with only the listed joints. Indices must be
    /// in range.
    pub fn select_joints(&self, indices: &[usize]) -> Self {
        Self {
            frame: self.frame.clone(),
            pose: PoseUVZ {
                joints: indices.iter().map(|&i| self.pose.joints[i]).collect(),
            },
            pose_world: indices.iter().map(|&i| self.pose_world[i]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 31.5,
            cy: 31.5,
        }
    }

    fn plane(d: f32) -> RawDepth {
        RawDepth::new(64, 64, vec![d; 64 * 64]).unwrap()
    }

    #[test]
    fn plane_at_center_depth_normalizes_to_zero() {
        let f = crop_and_normalize(&plane(400.0), [31.5, 31.5, 400.0], 100.0, &cam(), 16).unwrap();
        for (p, v) in f.pixels.iter().zip(&f.valid) {
            if *v {
                assert_eq!(*p, 0.0);
            }
        }
        assert!(f.valid_count() > 0);
    }

    #[test]
    fn cube_endpoints_map_to_plus_minus_one() {
        let f = crop_and_normalize(&plane(500.0), [31.5, 31.5, 400.0], 100.0, &cam(), 8).unwrap();
        assert!(f.valid.iter().zip(&f.pixels).any(|(&v, &p)| v && p == 1.0));
        let f = crop_and_normalize(&plane(300.0), [31.5, 31.5, 400.0], 100.0, &cam(), 8).unwrap();
        assert!(f.valid.iter().zip(&f.pixels).all(|(&v, &p)| !v || p == -1.0));
    }

    #[test]
    fn empty_crop_is_a_data_error() {
        let r = crop_and_normalize(&plane(0.0), [31.5, 31.5, 400.0], 100.0, &cam(), 8);
        assert!(matches!(r, Err(Error::Data(_))));
        let r = crop_and_normalize(&plane(900.0), [31.5, 31.5, 400.0], 100.0, &cam(), 8);
        assert!(matches!(r, Err(Error::Data(_))));
        let r = crop_and_normalize(&plane(400.0), [80.0, 31.5, 400.0], 100.0, &cam(), 8);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn crop_transform_is_invertible() {
        let t = CropTransform::new([40.0, 22.0, 350.0], 150.0, &cam()).unwrap();
        let p = [37.25, 30.5, 402.0];
        let back = t.denormalize(t.normalize(p));
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() < 1e-9);
        }
    }
}
