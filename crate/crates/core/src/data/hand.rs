//! Procedural capsule hand and its depth renderer.

use rand::Rng;

use super::camera::CameraIntrinsics;
use super::frame::{RawDepth, Sample};
use crate::error::{Error, Result};

pub const SYNTH_JOINTS: usize = 14;
const MAX_RETRIES: usize = 100;

/// Segment with a radius; `a == b` gives a sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn add_scaled(a: [f64; 3], d: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * d[0], a[1] + s * d[1], a[2] + s * d[2]]
}

/// Nearest positive hit of a unit ray from the origin with a sphere.
fn sphere_hit(rd: [f64; 3], center: [f64; 3], r: f64) -> Option<f64> {
    let oc = [-center[0], -center[1], -center[2]];
    let b = dot(oc, rd);
    let h = b * b - (dot(oc, oc) - r * r);
    if h < 0.0 {
        return None;
    }
    let t = -b - h.sqrt();
    (t > 0.0).then_some(t)
}

impl Capsule {
    /// Ray parameter of the nearest hit along the unit direction `rd` from the
    /// camera origin.
    pub fn intersect(&self, rd: [f64; 3]) -> Option<f64> {
        let ba = sub(self.b, self.a);
        let baba = dot(ba, ba);
        let oa = [-self.a[0], -self.a[1], -self.a[2]];
        let bard = dot(ba, rd);
        let k2 = baba - bard * bard;
        if baba == 0.0 || k2 <= 1e-12 * baba {
            let ta = sphere_hit(rd, self.a, self.radius);
            let tb = sphere_hit(rd, self.b, self.radius);
            return match (ta, tb) {
                (Some(x), Some(y)) => Some(x.min(y)),
                (x, y) => x.or(y),
            };
        }
        let baoa = dot(ba, oa);
        let rdoa = dot(rd, oa);
        let oaoa = dot(oa, oa);
        let k1 = baba * rdoa - baoa * bard;
        let k0 = baba * oaoa - baoa * baoa - self.radius * self.radius * baba;
        let h = k1 * k1 - k2 * k0;
        if h < 0.0 {
            return None;
        }
        let t = (-k1 - h.sqrt()) / k2;
        let y = baoa + t * bard;
        if y > 0.0 && y < baba {
            return (t > 0.0).then_some(t);
        }
        let cap = if y <= 0.0 { self.a } else { self.b };
        sphere_hit(rd, cap, self.radius)
    }
}

/// Z-buffer render of `capsules`; missed pixels hold 0.
pub fn render_capsules(
    capsules: &[Capsule],
    intrinsics: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> RawDepth {
    let mut depth = vec![0.0f32; width * height];
    for row in 0..height {
        for col in 0..width {
            let d = [
                (col as f64 - intrinsics.cx) / intrinsics.fx,
                (row as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            ];
            let norm = dot(d, d).sqrt();
            let rd = [d[0] / norm, d[1] / norm, d[2] / norm];
            let nearest = capsules
                .iter()
                .filter_map(|c| c.intersect(rd))
                .fold(f64::INFINITY, f64::min);
            if nearest.is_finite() {
                depth[row * width + col] = (nearest * rd[2]) as f32;
            }
        }
    }
    RawDepth {
        width,
        height,
        depth,
    }
}

/// Two-bone digit rooted at `base` in the hand frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Digit {
    pub base: [f64; 3],
    /// Rest direction in the palm plane, radians from +y toward +x.
    pub splay: f64,
    pub lengths: [f64; 2],
    pub radii: [f64; 2],
    pub abduction_limit: f64,
    pub flex_limits: [f64; 2],
}

/// Kinematic hand in a local frame: palm in the z = 0 plane, fingers along
/// +y, flexion toward -z. Digits are ordered pinky, ring, middle, index, thumb.
#[derive(Clone, Debug, PartialEq)]
pub struct HandModel {
    pub digits: [Digit; 5],
    pub wrists: [[f64; 3]; 2],
    pub palm_center: [f64; 3],
    pub palm_radius: f64,
    pub palm_capsule_radius: f64,
    pub tilt_limit: f64,
    pub roll_limit: f64,
    pub translation_xy: f64,
    pub depth_range: [f64; 2],
}

impl Default for HandModel {
    fn default() -> Self {
        let finger = |x: f64, y: f64, l: [f64; 2]| Digit {
            base: [x, y, 0.0],
            splay: 0.0,
            lengths: l,
            radii: [9.0, 8.0],
            abduction_limit: 15f64.to_radians(),
            flex_limits: [80f64.to_radians(), 90f64.to_radians()],
        };
        Self {
            digits: [
                finger(-22.0, 35.0, [32.0, 35.0]),
                finger(-8.0, 35.0, [42.0, 45.0]),
                finger(7.0, 35.0, [45.0, 50.0]),
                finger(22.0, 35.0, [40.0, 45.0]),
                Digit {
                    base: [28.0, -20.0, 0.0],
                    splay: 50f64.to_radians(),
                    lengths: [30.0, 30.0],
                    radii: [11.0, 9.0],
                    abduction_limit: 20f64.to_radians(),
                    flex_limits: [50f64.to_radians(), 60f64.to_radians()],
                },
            ],
            wrists: [[-25.0, -40.0, 0.0], [25.0, -40.0, 0.0]],
            palm_center: [0.0, 0.0, 0.0],
            palm_radius: 22.0,
            palm_capsule_radius: 12.5,
            tilt_limit: 35f64.to_radians(),
            roll_limit: 60f64.to_radians(),
            translation_xy: 15.0,
            depth_range: [360.0, 440.0],
        }
    }
}

/// Joint angles and rigid placement.
#[derive(Clone, Debug, PartialEq)]
pub struct HandPose {
    /// Per digit: abduction, first and second flexion (radians).
    pub digits: [[f64; 3]; 5],
    /// Tilt about x, tilt about y, in-plane rotation about z (radians).
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl HandPose {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.digits.iter().flatten().copied().collect();
        v.extend(self.rotation);
        v.extend(self.translation);
        v
    }
}

fn rotate(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [dot(r[0], p), dot(r[1], p), dot(r[2], p)]
}

fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        m
    };
    mul(rz, mul(ry, rx))
}

impl HandModel {
    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.digits.iter().enumerate() {
            if d.lengths.iter().chain(&d.radii).any(|&v| !(v > 0.0)) {
                return Err(Error::Validation(format!("digit {i} needs positive bone lengths and radii")));
            }
        }
        if !(self.palm_radius > 0.0 && self.palm_capsule_radius > 0.0) {
            return Err(Error::Validation("palm radii must be positive".into()));
        }
        if !(self.depth_range[0] > 0.0 && self.depth_range[1] >= self.depth_range[0]) {
            return Err(Error::Validation(format!("invalid depth range {:?}", self.depth_range)));
        }
        Ok(())
    }

    /// Parent of each joint in the kinematic tree; the palm center is the root.
    pub fn parents(&self) -> [Option<usize>; SYNTH_JOINTS] {
        [
            Some(1),
            Some(13),
            Some(3),
            Some(13),
            Some(5),
            Some(13),
            Some(7),
            Some(13),
            Some(9),
            Some(10),
            Some(13),
            Some(13),
            Some(13),
            None,
        ]
    }

    pub fn sample_pose(&self, rng: &mut impl Rng) -> HandPose {
        let mut digits = [[0.0; 3]; 5];
        for (d, out) in self.digits.iter().zip(&mut digits) {
            let a = d.abduction_limit;
            *out = [
                rng.random_range(-a..=a),
                rng.random_range(0.0..=d.flex_limits[0]),
                rng.random_range(0.0..=d.flex_limits[1]),
            ];
        }
        let (t, r) = (self.tilt_limit, self.roll_limit);
        let xy = self.translation_xy;
        HandPose {
            digits,
            rotation: [
                rng.random_range(-t..=t),
                rng.random_range(-t..=t),
                rng.random_range(-r..=r),
            ],
            translation: [
                rng.random_range(-xy..=xy),
                rng.random_range(-xy..=xy),
                rng.random_range(self.depth_range[0]..=self.depth_range[1]),
            ],
        }
    }

    /// Joints of each digit in the hand frame: (root, mid, tip).
    fn digit_chain(d: &Digit, angles: [f64; 3]) -> [[f64; 3]; 3] {
        let yaw = d.splay + angles[0];
        let dir = |flex: f64| [yaw.sin() * flex.cos(), yaw.cos() * flex.cos(), -flex.sin()];
        let mid = add_scaled(d.base, dir(angles[1]), d.lengths[0]);
        let tip = add_scaled(mid, dir(angles[1] + angles[2]), d.lengths[1]);
        [d.base, mid, tip]
    }

    fn to_camera(pose: &HandPose, p: [f64; 3]) -> [f64; 3] {
        // Hand +y points up in the image, which is camera -y.
        let q = rotate(&rotation_matrix(pose.rotation), [p[0], -p[1], p[2]]);
        [
            q[0] + pose.translation[0],
            q[1] + pose.translation[1],
            q[2] + pose.translation[2],
        ]
    }

    /// World (camera) joint positions in mm, in the 14-joint order.
    pub fn joints(&self, pose: &HandPose) -> Vec<[f64; 3]> {
        let chains: Vec<_> = self
            .digits
            .iter()
            .zip(&pose.digits)
            .map(|(d, a)| Self::digit_chain(d, *a))
            .collect();
        let local = [
            chains[0][2],
            chains[0][1],
            chains[1][2],
            chains[1][1],
            chains[2][2],
            chains[2][1],
            chains[3][2],
            chains[3][1],
            chains[4][2],
            chains[4][1],
            chains[4][0],
            self.wrists[0],
            self.wrists[1],
            self.palm_center,
        ];
        local.iter().map(|&p| Self::to_camera(pose, p)).collect()
    }

    pub fn capsules(&self, pose: &HandPose) -> Vec<Capsule> {
        let mut local = Vec::new();
        for (d, a) in self.digits.iter().zip(&pose.digits) {
            let [root, mid, tip] = Self::digit_chain(d, *a);
            local.push(Capsule { a: root, b: mid, radius: d.radii[0] });
            local.push(Capsule { a: mid, b: tip, radius: d.radii[1] });
        }
        let r = self.palm_capsule_radius;
        let [pinky, _, _, index, thumb] = &self.digits;
        let [wl, wr] = self.wrists;
        for (a, b) in [
            (wl, wr),
            (wl, pinky.base),
            (wr, index.base),
            (pinky.base, index.base),
            (wr, thumb.base),
        ] {
            local.push(Capsule { a, b, radius: r });
        }
        local.push(Capsule {
            a: self.palm_center,
            b: self.palm_center,
            radius: self.palm_radius,
        });
        local
            .into_iter()
            .map(|c| Capsule {
                a: Self::to_camera(pose, c.a),
                b: Self::to_camera(pose, c.b),
                radius: c.radius,
            })
            .collect()
    }
}

/// Rendering and crop settings for synthetic samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub intrinsics: CameraIntrinsics,
    pub raw_size: usize,
    pub cube: f64,
    pub out_size: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::SYNTHETIC,
            raw_size: 96,
            cube: 150.0,
            out_size: 96,
        }
    }
}

/// Renders a random pose. Poses that fail to produce a usable crop are
/// redrawn, up to a fixed retry budget.
pub fn synth_generate(
    model: &HandModel,
    settings: &SynthSettings,
    rng: &mut impl Rng,
) -> Result<(Sample, HandPose)> {
    model.validate()?;
    let mut last = String::new();
    for _ in 0..MAX_RETRIES {
        let pose = model.sample_pose(rng);
        let joints = model.joints(&pose);
        if joints.iter().all(|p| p[2] <= 0.0) {
            last = "all joints behind the camera".into();
            continue;
        }
        let raw = render_capsules(
            &model.capsules(&pose),
            &settings.intrinsics,
            settings.raw_size,
            settings.raw_size,
        );
        match Sample::from_world(&raw, &joints, settings.cube, &settings.intrinsics, settings.out_size) {
            Ok(s) => return Ok((s, pose)),
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::Data(format!(
        "synthetic generation failed after {MAX_RETRIES} attempts: {last}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_depth_minimum_is_center_minus_radius() {
        let cam = CameraIntrinsics {
            cx: 48.0,
            cy: 48.0,
            ..CameraIntrinsics::SYNTHETIC
        };
        let s = Capsule {
            a: [0.0, 0.0, 400.0],
            b: [0.0, 0.0, 400.0],
            radius: 30.0,
        };
        let raw = render_capsules(&[s], &cam, 96, 96);
        let (mut best, mut at) = (f32::INFINITY, 0);
        for (i, &d) in raw.depth.iter().enumerate() {
            if d > 0.0 && d < best {
                best = d;
                at = i;
            }
        }
        assert_eq!(at, 48 * 96 + 48);
        assert!((best as f64 - 370.0).abs() < 1e-4);

        // Off-axis pixel: ray-sphere oracle for a ray tilted by one pixel.
        let d = raw.at(49, 48) as f64;
        let tan: f64 = 1.0 / 120.0;
        let cos: f64 = 1.0 / (1.0 + tan * tan).sqrt();
        let sin = tan * cos;
        let t = 400.0 * cos - (900.0 - (400.0 * sin).powi(2)).sqrt();
        assert!((d - t * cos).abs() < 1e-3);
    }

    #[test]
    fn capsule_body_hit_matches_cylinder_geometry() {
        let c = Capsule {
            a: [-50.0, 0.0, 300.0],
            b: [50.0, 0.0, 300.0],
            radius: 10.0,
        };
        assert!((c.intersect([0.0, 0.0, 1.0]).unwrap() - 290.0).abs() < 1e-9);
        let cap = c.intersect([-50.0 / 290.0f64.hypot(50.0), 0.0, 290.0 / 290.0f64.hypot(50.0)]);
        assert!(cap.is_some());
        assert!(c.intersect([0.0, 1.0, 0.0]).is_none());
    }

    #[test]
    fn labels_agree_with_model_joints() {
        let model = HandModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (sample, pose) = synth_generate(&model, &SynthSettings::default(), &mut rng).unwrap();
        let joints = model.joints(&pose);
        let back = sample.frame.to_world(&sample.pose).unwrap();
        for (a, b) in joints.iter().zip(&back) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-3);
            }
        }
        assert_eq!(sample.joints(), SYNTH_JOINTS);
    }

    #[test]
    fn different_seeds_give_different_poses() {
        let model = HandModel::default();
        let a = model.sample_pose(&mut ChaCha8Rng::seed_from_u64(1)).to_vec();
        let b = model.sample_pose(&mut ChaCha8Rng::seed_from_u64(2)).to_vec();
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn parents_form_a_tree_rooted_at_palm() {
        let p = HandModel::default().parents();
        for j in 0..SYNTH_JOINTS {
            let mut k = j;
            let mut steps = 0;
            while let Some(next) = p[k] {
                k = next;
                steps += 1;
                assert!(steps < SYNTH_JOINTS);
            }
            assert_eq!(k, 13);
        }
    }
}
