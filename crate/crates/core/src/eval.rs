//! Mean 3D joint error, success-frame curves and report files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, SampleSource};
use crate::error::{Error, Result};
use crate::model::{Batch, JgrP2o};
use crate::numerics::ParamStore;
use crate::p2o::PoseUVZ;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub max_threshold_mm: f64,
    pub threshold_step_mm: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_threshold_mm: 80.0,
            threshold_step_mm: 1.0,
            batch_size: 32,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_step_mm > 0.0) || !(self.max_threshold_mm >= 0.0) {
            return Err(Error::Config(format!(
                "eval thresholds need a positive step and nonnegative maximum, got {} and {}",
                self.threshold_step_mm, self.max_threshold_mm
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// `0, step, 2·step, …` up to and including the maximum.
    pub fn thresholds(&self) -> Vec<f64> {
        let n = (self.max_threshold_mm / self.threshold_step_mm + 1e-9).floor() as usize;
        (0..=n).map(|i| i as f64 * self.threshold_step_mm).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_error_mm: f64,
    pub per_joint_mm: Vec<f64>,
    /// `(threshold_mm, fraction)` pairs in ascending threshold order.
    pub success_curve: Vec<(f64, f64)>,
    pub frames: usize,
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_pairs(preds: &[Vec<[f64; 3]>], gts: &[Vec<[f64; 3]>]) -> Result<usize> {
    if preds.len() != gts.len() {
        return Err(Error::Validation(format!(
            "{} predicted frames for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    let n = gts.first().map_or(0, Vec::len);
    for (f, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != n || g.len() != n {
            return Err(Error::Validation(format!(
                "frame {f} has {} predicted and {} ground-truth joints, expected {n}",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(n)
}

/// Mean Euclidean distance over frames and joints, and its per-joint
/// breakdown, in mm.
pub fn mean_3d_error(preds: &[Vec<[f64; 3]>], gts: &[Vec<[f64; 3]>]) -> Result<(f64, Vec<f64>)> {
    let n = check_pairs(preds, gts)?;
    if preds.is_empty() || n == 0 {
        return Ok((0.0, vec![0.0; n]));
    }
    let mut per_joint = vec![0.0; n];
    for (p, g) in preds.iter().zip(gts) {
        for (j, (a, b)) in p.iter().zip(g).enumerate() {
            per_joint[j] += distance(a, b);
        }
    }
    let frames = preds.len() as f64;
    per_joint.iter_mut().for_each(|e| *e /= frames);
    let mean = per_joint.iter().sum::<f64>() / n as f64;
    Ok((mean, per_joint))
}

/// Fraction of frames whose worst joint error is strictly below each
/// threshold.
pub fn success_curve(preds: &[Vec<[f64; 3]>], gts: &[Vec<[f64; 3]>], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Validation("success-curve thresholds must be sorted ascending".into()));
    }
    check_pairs(preds, gts)?;
    let worst: Vec<f64> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| distance(a, b)).fold(0.0, f64::max))
        .collect();
    let frames = worst.len().max(1) as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, worst.iter().filter(|&&w| w < t).count() as f64 / frames))
        .collect())
}

pub fn report_from_poses(preds: &[Vec<[f64; 3]>], gts: &[Vec<[f64; 3]>], cfg: &EvalConfig) -> Result<EvalReport> {
    let (mean_error_mm, per_joint_mm) = mean_3d_error(preds, gts)?;
    Ok(EvalReport {
        mean_error_mm,
        per_joint_mm,
        success_curve: success_curve(preds, gts, &cfg.thresholds())?,
        frames: preds.len(),
    })
}

/// Network output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub pose: PoseUVZ,
    /// Original-image `(u, v, z_mm)`.
    pub uvz: Vec<[f64; 3]>,
    pub world: Vec<[f64; 3]>,
}

/// Final-stage predictions for every sample, in dataset order, with
/// running-statistic normalization and no augmentation.
pub fn predict_all(
    model: &JgrP2o,
    params: &ParamStore<f32>,
    data: &dyn SampleSource,
    batch_size: usize,
) -> Result<(Vec<FramePrediction>, Vec<Sample>)> {
    if data.joints() != model.joints() {
        return Err(Error::Validation(format!(
            "data has {} joints but the model has {}",
            data.joints(),
            model.joints()
        )));
    }
    let feature = model.cfg.backbone.feature_size;
    let mut preds = Vec::with_capacity(data.len());
    let mut samples = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch_samples = chunk.iter().map(|&i| data.get(i)).collect::<Result<Vec<_>>>()?;
        let batch = Batch::<f32>::from_samples(&batch_samples, feature)?;
        for (pose, s) in model.predict(params, &batch)?.into_iter().zip(&batch_samples) {
            preds.push(FramePrediction {
                uvz: s.frame.to_original(&pose),
                world: s.frame.predicted_world(&pose),
                pose,
            });
        }
        samples.extend(batch_samples);
    }
    Ok((preds, samples))
}

/// Predicts every frame and scores it against the labels.
pub fn evaluate(
    model: &JgrP2o,
    params: &ParamStore<f32>,
    data: &dyn SampleSource,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<FramePrediction>)> {
    let (preds, samples) = predict_all(model, params, data, cfg.batch_size)?;
    let world: Vec<Vec<[f64; 3]>> = preds.iter().map(|p| p.world.clone()).collect();
    let gts: Vec<Vec<[f64; 3]>> = samples.iter().map(|s| s.pose_world.clone()).collect();
    Ok((report_from_poses(&world, &gts, cfg)?, preds))
}

/// Writes `report.json` and `curve.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
    let path = dir.join("report.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let mut csv = String::from("threshold_mm,fraction\n");
    for (t, f) in &report.success_curve {
        csv.push_str(&format!("{t},{f}\n"));
    }
    let path = dir.join("curve.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_poses_have_zero_error() {
        let g = vec![vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]];
        let (m, pj) = mean_3d_error(&g, &g).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(pj, vec![0.0, 0.0]);
        let c = success_curve(&g, &g, &[0.5, 1.0]).unwrap();
        assert_eq!(c, vec![(0.5, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn one_displaced_joint() {
        let n = 4;
        let g = vec![vec![[0.0, 0.0, 500.0]; n]];
        let mut p = g.clone();
        p[0][2][0] += 3.0;
        let (m, pj) = mean_3d_error(&p, &g).unwrap();
        assert!((m - 3.0 / n as f64).abs() < 1e-12);
        assert_eq!(pj[2], 3.0);
    }

    #[test]
    fn curve_at_ten_mm_counts_half() {
        let g = vec![vec![[0.0; 3]], vec![[0.0; 3]]];
        let p = vec![vec![[5.0, 0.0, 0.0]], vec![[15.0, 0.0, 0.0]]];
        let c = success_curve(&p, &g, &[10.0, f64::INFINITY]).unwrap();
        assert_eq!(c, vec![(10.0, 0.5), (f64::INFINITY, 1.0)]);
        // Strictly below: a worst error equal to the threshold fails.
        assert_eq!(success_curve(&p, &g, &[5.0]).unwrap()[0].1, 0.0);
        assert!(matches!(success_curve(&p, &g, &[2.0, 1.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn mismatches_are_validation_errors() {
        let g = vec![vec![[0.0; 3]; 2]];
        assert!(matches!(mean_3d_error(&[], &g), Err(Error::Validation(_))));
        let p = vec![vec![[0.0; 3]; 3]];
        assert!(matches!(mean_3d_error(&p, &g), Err(Error::Validation(_))));
    }

    #[test]
    fn default_thresholds() {
        let t = EvalConfig::default().thresholds();
        assert_eq!(t.len(), 81);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[80], 80.0);
    }
}
