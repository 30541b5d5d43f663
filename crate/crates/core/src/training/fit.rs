//! Epoch loop: seeded shuffling, online augmentation, the stacked loss,
//! Adam updates and running-statistic updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, AdamState};
use super::TrainConfig;
use crate::config::RunConfig;
use crate::data::{augment, Sample, SampleSource};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::model::{Batch, JgrP2o};
use crate::numerics::{NormMode, ParamStore, Tape};
use crate::objective::LossReport;

/// Header of the per-step training log for a two-stage model.
pub const LOG_HEADER: &str = "epoch,step,lr,total,coord_s1,offset_s1,coord_s2,offset_s2";

/// Parameters, optimizer state and position in the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps within the current epoch.
    pub epoch_step: usize,
    /// Completed steps overall.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: &JgrP2o, seed: u64) -> Result<Self> {
        let params = model.init(seed)?.cast();
        let adam = AdamState::new(&params);
        Ok(Self {
            params,
            adam,
            epoch: 0,
            epoch_step: 0,
            step: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// Zero-based epoch of this step.
    pub epoch: usize,
    /// One-based global step.
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
}

impl StepLog {
    pub fn header(stages: usize) -> String {
        let mut h = String::from("epoch,step,lr,total");
        for s in 1..=stages {
            h.push_str(&format!(",coord_s{s},offset_s{s}"));
        }
        h
    }

    pub fn csv_line(&self) -> String {
        let mut line = format!("{},{},{},{}", self.epoch, self.step, self.lr, self.loss.total);
        for (c, o) in self.loss.coord.iter().zip(&self.loss.offset) {
            line.push_str(&format!(",{c},{o}"));
        }
        line
    }
}

pub enum Event<'a> {
    Step(&'a StepLog),
    /// Sent after `state.epoch` has been advanced.
    EpochEnd {
        epoch: usize,
        mean_total: f64,
        state: &'a TrainState,
    },
}

/// Learning rate during zero-based `epoch`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.lr_decay.powi(epoch as i32)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Augmentation randomness depends only on the seed, the epoch and the
/// sample index, so loading order and parallelism do not matter.
fn augment_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995_a5a5_5a5a);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn load_batch(cfg: &RunConfig, data: &dyn SampleSource, indices: &[usize], epoch: usize) -> Result<Vec<Sample>> {
    let ranges = cfg.augment.ranges();
    indices
        .par_iter()
        .map(|&i| {
            let s = data.get(i)?;
            match &ranges {
                Some(a) => augment(&s, a, &mut augment_rng(cfg.train.seed, epoch, i)),
                None => Ok(s),
            }
        })
        .collect()
}

/// One optimizer step on `samples`; returns the loss before the update.
pub fn train_step(
    model: &JgrP2o,
    cfg: &RunConfig,
    state: &mut TrainState,
    samples: &[Sample],
    lr: f64,
) -> Result<LossReport> {
    let batch = Batch::<f32>::from_samples(samples, cfg.backbone.feature_size)?;
    let mut tape = Tape::new();
    let vars = {
        let mut ctx = Ctx::new(&mut tape, &state.params, NormMode::Train);
        model.loss(&mut ctx, &batch, &cfg.loss)?
    };
    let scalar = |v| f64::from(tape.value(v).data()[0]);
    let report = LossReport {
        total: scalar(vars.total),
        coord: vars.coord.iter().map(|&v| scalar(v)).collect(),
        offset: vars.offset.iter().map(|&v| scalar(v)).collect(),
    };
    report.check_finite()?;
    state.params.zero_grads();
    tape.backward(vars.total, &mut state.params)?;
    adam_step(&mut state.params, &mut state.adam, &cfg.train, lr)?;
    for u in tape.take_stat_updates() {
        state.params.set_norm_stats(&u.prefix, &u.stats)?;
    }
    Ok(report)
}

/// Trains from `state` until `train.epochs` epochs (or `train.max_steps`
/// steps) are complete. Resuming from a saved state continues the same
/// trajectory.
pub fn fit(
    model: &JgrP2o,
    cfg: &RunConfig,
    data: &dyn SampleSource,
    state: &mut TrainState,
    on_event: &mut dyn FnMut(Event<'_>) -> Result<()>,
) -> Result<()> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Validation("training set is empty".into()));
    }
    if data.joints() != model.joints() {
        return Err(Error::Validation(format!(
            "training data has {} joints but the model has {}",
            data.joints(),
            model.joints()
        )));
    }
    let tc = &cfg.train;
    let bs = tc.batch_size;
    let per_epoch = n.div_ceil(bs);
    while state.epoch < tc.epochs {
        let order = epoch_order(tc.seed, state.epoch, n);
        let lr = learning_rate(tc, state.epoch);
        let mut sum = 0.0;
        let mut steps = 0usize;
        while state.epoch_step < per_epoch {
            if tc.max_steps > 0 && state.step >= tc.max_steps {
                return Ok(());
            }
            let lo = state.epoch_step * bs;
            let hi = (lo + bs).min(n);
            let samples = load_batch(cfg, data, &order[lo..hi], state.epoch)?;
            let loss = train_step(model, cfg, state, &samples, lr)?;
            state.epoch_step += 1;
            state.step += 1;
            sum += loss.total;
            steps += 1;
            on_event(Event::Step(&StepLog {
                epoch: state.epoch,
                step: state.step,
                lr,
                loss,
            }))?;
        }
        state.epoch += 1;
        state.epoch_step = 0;
        on_event(Event::EpochEnd {
            epoch: state.epoch,
            mean_total: sum / steps.max(1) as f64,
            state,
        })?;
    }
    Ok(())
}
