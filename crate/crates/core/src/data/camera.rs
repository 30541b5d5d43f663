use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels. Pixel `(col, row)` has its center at
/// `u = col`, `v = row`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Camera of the synthetic renderer.
    pub const SYNTHETIC: Self = Self {
        fx: 120.0,
        fy: 120.0,
        cx: 47.5,
        cy: 47.5,
    };

    /// Intel RealSense intrinsics commonly used with ICVL.
    pub const ICVL: Self = Self {
        fx: 241.42,
        fy: 241.42,
        cx: 160.0,
        cy: 120.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Validation(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// `(u, v, z_mm) -> (x, y, z)` in mm.
    pub fn back_project(&self, uvz: [f64; 3]) -> Result<[f64; 3]> {
        let z = uvz[2];
        if !(z > 0.0) {
            return Err(Error::Data(format!("cannot back-project nonpositive depth {z}")));
        }
        Ok(self.back_project_unchecked(uvz))
    }

    /// Pinhole back-projection for any depth, including network outputs
    /// that land on or behind the camera plane.
    pub fn back_project_unchecked(&self, uvz: [f64; 3]) -> [f64; 3] {
        let [u, v, z] = uvz;
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }

    pub fn project(&self, xyz: [f64; 3]) -> Result<[f64; 3]> {
        let [x, y, z] = xyz;
        if !(z > 0.0) {
            return Err(Error::Data(format!("cannot project point with depth {z}")));
        }
        Ok([self.fx * x / z + self.cx, self.fy * y / z + self.cy, z])
    }
}

pub fn uvz_to_xyz(pose: &[[f64; 3]], intrinsics: &CameraIntrinsics) -> Result<Vec<[f64; 3]>> {
    pose.iter().map(|&p| intrinsics.back_project(p)).collect()
}

pub fn xyz_to_uvz(points: &[[f64; 3]], intrinsics: &CameraIntrinsics) -> Result<Vec<[f64; 3]>> {
    points.iter().map(|&p| intrinsics.project(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAM: CameraIntrinsics = CameraIntrinsics {
        fx: 241.42,
        fy: 240.0,
        cx: 160.0,
        cy: 120.0,
    };

    #[test]
    fn principal_point_lies_on_axis() {
        assert_eq!(CAM.back_project([160.0, 120.0, 500.0]).unwrap(), [0.0, 0.0, 500.0]);
    }

    #[test]
    fn one_focal_length_right_at_depth_two() {
        let p = CAM.back_project([CAM.cx + CAM.fx, CAM.cy, 2.0]).unwrap();
        assert!((p[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn round_trip_and_errors() {
        let pts = vec![[12.5, -40.0, 380.0], [-3.0, 7.25, 512.0]];
        let back = uvz_to_xyz(&xyz_to_uvz(&pts, &CAM).unwrap(), &CAM).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
        assert!(matches!(CAM.back_project([0.0, 0.0, 0.0]), Err(Error::Data(_))));
        assert!(matches!(CAM.project([0.0, 0.0, -1.0]), Err(Error::Data(_))));
    }
}
