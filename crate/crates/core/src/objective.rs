//! Huber coordinate and offset losses summed over stacked stages.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Scalar, Tape, Tensor4, Var};
use crate::p2o::PoseUVZ;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub delta: f64,
    pub beta: f64,
    pub stages: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            beta: 1e-4,
            stages: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("loss.delta must be positive, got {}", self.delta)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("loss.beta must be nonnegative, got {}", self.beta)));
        }
        if self.stages == 0 {
            return Err(Error::Config("loss.stages must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber`]: `x` clamped to `[-δ, δ]`.
pub fn huber_grad(x: f64, delta: f64) -> f64 {
    x.clamp(-delta, delta)
}

/// Σ over joints and axes, mean over the batch.
pub fn coordinate_loss(pred: &[PoseUVZ], gt: &[PoseUVZ], delta: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape_err!("{} predicted poses for {} targets", pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(shape_err!("pose has {} joints, target has {}", p.len(), g.len()));
        }
        for (a, b) in p.joints.iter().zip(&g.joints) {
            sum += (0..3).map(|k| huber(a[k] - b[k], delta)).sum::<f64>();
        }
    }
    Ok(sum / pred.len() as f64)
}

/// Σ over pixels, joints and axes, mean over the batch.
pub fn offset_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>, delta: f64) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(shape_err!("offsets {:?} vs targets {:?}", pred.dims(), target.dims()));
    }
    let b = pred.batch().max(1) as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| huber(p.as_f64() - t.as_f64(), delta))
        .sum();
    Ok(sum / b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub coord: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LossReport {
    /// `Σ_s coord_s + β offset_s`.
    pub fn compose(coord: Vec<f64>, offset: Vec<f64>, cfg: &LossConfig) -> Result<Self> {
        if coord.len() != cfg.stages || offset.len() != cfg.stages {
            return Err(Error::Validation(format!(
                "loss expects {} stages, got {} coordinate and {} offset terms",
                cfg.stages,
                coord.len(),
                offset.len()
            )));
        }
        let total = coord.iter().zip(&offset).map(|(c, o)| c + cfg.beta * o).sum();
        Ok(Self { total, coord, offset })
    }

    /// Stage and term name of the first non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        for s in 0..self.coord.len() {
            if !self.coord[s].is_finite() {
                return Err(Error::NonFinite { stage: s + 1, term: "coordinate" });
            }
            if !self.offset[s].is_finite() {
                return Err(Error::NonFinite { stage: s + 1, term: "offset" });
            }
        }
        if !self.total.is_finite() {
            return Err(Error::NonFinite {
                stage: self.coord.len(),
                term: "total",
            });
        }
        Ok(())
    }
}

/// Predictions of one stage for a batch.
#[derive(Clone, Debug)]
pub struct StagePrediction {
    pub poses: Vec<PoseUVZ>,
    pub offsets: Tensor4<f64>,
}

pub fn total_loss(
    stages: &[StagePrediction],
    gt: &[PoseUVZ],
    offset_targets: &Tensor4<f64>,
    cfg: &LossConfig,
) -> Result<LossReport> {
    if stages.len() != cfg.stages {
        return Err(Error::Validation(format!(
            "loss expects {} stages, got {}",
            cfg.stages,
            stages.len()
        )));
    }
    let mut coord = Vec::with_capacity(stages.len());
    let mut offset = Vec::with_capacity(stages.len());
    for s in stages {
        coord.push(coordinate_loss(&s.poses, gt, cfg.delta)?);
        offset.push(offset_loss(&s.offsets, offset_targets, cfg.delta)?);
    }
    LossReport::compose(coord, offset, cfg)
}

/// `(1/B) Σ huber(pred − target)` as a scalar tape node.
pub fn huber_loss_tape<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor4<T>, delta: f64) -> Result<Var> {
    let p = tape.value(pred);
    if p.dims() != target.dims() {
        return Err(shape_err!("prediction {:?} vs target {:?}", p.dims(), target.dims()));
    }
    let inv_b = 1.0 / p.batch().max(1) as f64;
    let sum: f64 = p
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| huber(a.as_f64() - b.as_f64(), delta))
        .sum();
    let y = Tensor4::full([1, 1, 1, 1], T::of(sum * inv_b));
    let target = target.clone();
    Ok(tape.push(y, vec![pred], move |t, g| {
        let scale = g.data()[0].as_f64() * inv_b;
        let p = t.value(pred);
        let mut out = Tensor4::zeros(p.dims());
        for ((o, a), b) in out.data_mut().iter_mut().zip(p.data()).zip(target.data()) {
            *o = T::of(scale * huber_grad(a.as_f64() - b.as_f64(), delta));
        }
        Ok(vec![out])
    }))
}
