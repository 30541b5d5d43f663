//! Pixel-to-offset head and weighted aggregation of per-pixel votes.

use serde::{Deserialize, Serialize};

use crate::data::DepthFrame;
use crate::error::{shape_err, Error, Result};
use crate::jgr::VotingTensor;
use crate::layers::{Conv, Ctx, Init};
use crate::numerics::{Scalar, Tensor4, Var};

/// Largest tolerated deviation of a joint's voting weights from unit sum.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-4;

/// Joint coordinates `(u, v, z)` in crop-normalized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseUVZ {
    pub joints: Vec<[f64; 3]>,
}

impl PoseUVZ {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Stacks poses as a `(B, N, 1, 3)` tensor.
    pub fn stack<T: Scalar>(poses: &[PoseUVZ]) -> Result<Tensor4<T>> {
        let n = poses.first().map_or(0, PoseUVZ::len);
        if poses.iter().any(|p| p.len() != n) {
            return Err(shape_err!("poses in a batch have different joint counts"));
        }
        let data = poses
            .iter()
            .flat_map(|p| p.joints.iter().flatten().map(|&v| T::of(v)))
            .collect();
        Tensor4::from_vec([poses.len(), n, 1, 3], data)
    }

    /// Splits a `(B, N, 1, 3)` tensor into poses.
    pub fn unstack<T: Scalar>(t: &Tensor4<T>) -> Result<Vec<PoseUVZ>> {
        let [b, n, one, three] = t.dims();
        if one != 1 || three != 3 {
            return Err(shape_err!("pose tensor must be (B, N, 1, 3), got {:?}", t.dims()));
        }
        Ok((0..b)
            .map(|i| PoseUVZ {
                joints: t.item(i)[..n * 3]
                    .chunks_exact(3)
                    .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
                    .collect(),
            })
            .collect())
    }
}

/// Per-pixel `(u, v, z)` at offset-map resolution with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    pub size: usize,
    /// Row-major `(u, v, z)` per cell.
    pub coords: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl CoordinateGrid {
    pub fn cells(&self) -> usize {
        self.coords.len()
    }

    /// Stacks grids as a `(B, S, S, 3)` tensor.
    pub fn stack<T: Scalar>(grids: &[&CoordinateGrid]) -> Result<Tensor4<T>> {
        let s = grids.first().map_or(0, |g| g.size);
        if grids.iter().any(|g| g.size != s) {
            return Err(shape_err!("grids in a batch have different sizes"));
        }
        let data = grids
            .iter()
            .flat_map(|g| g.coords.iter().flatten().map(|&v| T::of(v)))
            .collect();
        Tensor4::from_vec([grids.len(), s, s, 3], data)
    }
}

/// Pixel-center UV and block-mean depth over valid pixels; empty blocks are
/// flagged invalid and sit on the far plane `z = 1`.
pub fn make_coordinate_grid(frame: &DepthFrame, resolution: usize) -> Result<CoordinateGrid> {
    if resolution == 0 || !frame.size.is_multiple_of(resolution) {
        return Err(shape_err!(
            "grid resolution {resolution} does not divide frame size {}",
            frame.size
        ));
    }
    let f = frame.size / resolution;
    let r = resolution as f64;
    let mut coords = Vec::with_capacity(resolution * resolution);
    let mut valid = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        for col in 0..resolution {
            let (mut sum, mut count) = (0.0, 0usize);
            for dy in 0..f {
                for dx in 0..f {
                    let i = (row * f + dy) * frame.size + col * f + dx;
                    if frame.valid[i] {
                        sum += frame.pixels[i] as f64;
                        count += 1;
                    }
                }
            }
            let z = if count > 0 { sum / count as f64 } else { 1.0 };
            coords.push([(col as f64 + 0.5) / r, (row as f64 + 0.5) / r, z]);
            valid.push(count > 0);
        }
    }
    Ok(CoordinateGrid {
        size: resolution,
        coords,
        valid,
    })
}

/// `Δc*_ki = c*_k − c_i` laid out joint-major as `(1, S, S, 3N)`.
pub fn compute_offset_targets(pose: &PoseUVZ, grid: &CoordinateGrid) -> Tensor4<f64> {
    let n = pose.len();
    let mut data = Vec::with_capacity(grid.cells() * 3 * n);
    for cell in &grid.coords {
        for j in &pose.joints {
            for a in 0..3 {
                data.push(j[a] - cell[a]);
            }
        }
    }
    Tensor4::from_vec([1, grid.size, grid.size, 3 * n], data).expect("sized above")
}

fn check_weight_sums<T: Scalar>(w: &Tensor4<T>) -> Result<()> {
    let [b, h, wd, n] = w.dims();
    for bi in 0..b {
        let item = w.item(bi);
        for k in 0..n {
            let s: f64 = (0..h * wd).map(|i| item[i * n + k].as_f64()).sum();
            if (s - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::Contract(format!(
                    "voting weights of joint {k} in batch item {bi} sum to {s}"
                )));
            }
        }
    }
    Ok(())
}

fn check_aligned(offsets: [usize; 4], grid: [usize; 4], w: [usize; 4]) -> Result<()> {
    let [b, h, wd, c] = offsets;
    let n = w[3];
    if c != 3 * n || w[..3] != [b, h, wd] || grid != [b, h, wd, 3] {
        return Err(shape_err!(
            "offsets {offsets:?}, grid {grid:?} and weights {w:?} are not aligned"
        ));
    }
    Ok(())
}

fn aggregate_values<T: Scalar>(offsets: &Tensor4<T>, grid: &Tensor4<T>, w: &Tensor4<T>) -> Tensor4<T> {
    let [b, h, wd, n] = w.dims();
    let mut out = Tensor4::zeros([b, n, 1, 3]);
    for bi in 0..b {
        let (o, g, wi) = (offsets.item(bi), grid.item(bi), w.item(bi));
        let dst = &mut out.data_mut()[bi * n * 3..(bi + 1) * n * 3];
        for i in 0..h * wd {
            for k in 0..n {
                let wk = wi[i * n + k];
                for a in 0..3 {
                    dst[k * 3 + a] += wk * (g[i * 3 + a] + o[i * 3 * n + k * 3 + a]);
                }
            }
        }
    }
    out
}

/// `c_k = Σ_i w_ki (c_i + Δc_ki)` over `(B, S, S, 3N)` offsets, a
/// `(B, S, S, 3)` grid and `(B, S, S, N)` weights; returns `(B, N, 1, 3)`.
pub fn aggregate_joints<T: Scalar>(offsets: &Tensor4<T>, grid: &Tensor4<T>, w: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_aligned(offsets.dims(), grid.dims(), w.dims())?;
    check_weight_sums(w)?;
    Ok(aggregate_values(offsets, grid, w))
}

/// Differentiable [`aggregate_joints`] with respect to offsets and weights.
pub fn aggregate_joints_tape<T: Scalar>(
    ctx: &mut Ctx<T>,
    offsets: Var,
    grid: &Tensor4<T>,
    w: VotingTensor,
) -> Result<Var> {
    let (ov, wv) = (ctx.tape.value(offsets), ctx.tape.value(w.0));
    check_aligned(ov.dims(), grid.dims(), wv.dims())?;
    check_weight_sums(wv)?;
    let y = aggregate_values(ov, grid, wv);
    let grid = grid.clone();
    let w = w.0;
    Ok(ctx.tape.push(y, vec![offsets, w], move |t, g| {
        let (ov, wv) = (t.value(offsets), t.value(w));
        let [b, h, wd, n] = wv.dims();
        let mut go = Tensor4::zeros(ov.dims());
        let mut gw = Tensor4::zeros(wv.dims());
        for bi in 0..b {
            let gk = g.item(bi);
            let (o, gr, wi) = (ov.item(bi), grid.item(bi), wv.item(bi));
            let base_o = bi * h * wd * 3 * n;
            let base_w = bi * h * wd * n;
            for i in 0..h * wd {
                for k in 0..n {
                    let wk = wi[i * n + k];
                    let mut acc = T::zero();
                    for a in 0..3 {
                        let ga = gk[k * 3 + a];
                        go.data_mut()[base_o + i * 3 * n + k * 3 + a] = wk * ga;
                        acc += (gr[i * 3 + a] + o[i * 3 * n + k * 3 + a]) * ga;
                    }
                    gw.data_mut()[base_w + i * n + k] = acc;
                }
            }
        }
        Ok(vec![go, gw])
    }))
}

/// 1x1 convolution `C -> 3N` producing joint-major `(Δu, Δv, Δz)` maps.
#[derive(Clone, Debug)]
pub struct OffsetHead {
    pub conv: Conv,
    pub joints: usize,
}

impl OffsetHead {
    pub fn new(prefix: &str, channels: usize, joints: usize) -> Self {
        Self {
            conv: Conv::new(format!("{prefix}/offsets"), 1, channels, 3 * joints, true),
            joints,
        }
    }

    pub fn register(&self, init: &mut Init) -> Result<()> {
        self.conv.register(init)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, augmented: Var) -> Result<Var> {
        let c = ctx.tape.dims(augmented)[3];
        if c != self.conv.cin {
            return Err(shape_err!("offset head expects {} channels, got {c}", self.conv.cin));
        }
        self.conv.forward(ctx, augmented)
    }
}
