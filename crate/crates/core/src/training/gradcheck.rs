//! Finite-difference check of the full network loss in `f64`.
//!
//! Batch norm runs in eval mode with running statistics set to the exact
//! moments of the checked batch, so activations are scaled as in training
//! while the loss stays a smooth function of every parameter. Biases and
//! normalization affine terms are perturbed away from their initial values
//! so that no ReLU input sits exactly on its kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Split};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::model::{Batch, JgrP2o};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, NormMode, ParamKind, ParamStore, Pass, Probe, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Largest accepted relative error.
    pub tol: f64,
    pub step: f64,
    /// Step reductions allowed when a difference straddles a kink.
    pub refinements: usize,
    /// Scalars sampled per parameter entry.
    pub per_entry: usize,
    /// Training samples in the checked batch.
    pub batch: usize,
    pub seed: u64,
    /// Half-width of the uniform perturbation of biases and norm terms.
    pub jitter: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            step: 1e-5,
            refinements: 4,
            per_entry: 200,
            batch: 2,
            seed: 0,
            jitter: 0.1,
        }
    }
}

/// Parameters for the check: seeded init, then jittered biases and norm terms.
fn jittered_params(model: &JgrP2o, gc: &GradCheckConfig) -> Result<ParamStore<f64>> {
    let mut store = model.init(gc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed.wrapping_add(1));
    if gc.jitter > 0.0 {
        for (_, p) in store.iter_mut() {
            if matches!(p.kind, ParamKind::Bias | ParamKind::NormScale | ParamKind::NormShift) {
                for v in p.value.data_mut() {
                    *v += rng.random_range(-gc.jitter..gc.jitter);
                }
            }
        }
    }
    Ok(store)
}

/// Sets every running statistic to the moments of `batch` under `store`.
pub fn calibrate_norms(model: &JgrP2o, store: &mut ParamStore<f64>, batch: &Batch<f64>) -> Result<()> {
    let mut tape = Tape::new();
    {
        let mut ctx = Ctx::new(&mut tape, &*store, NormMode::Train);
        let input = ctx.tape.constant(batch.input.clone());
        model.forward(&mut ctx, input, &batch.grid)?;
    }
    for u in tape.take_stat_updates() {
        store.set_norm_stats(&u.prefix, &u.batch)?;
    }
    Ok(())
}

/// Runs the check described by `cfg.gradcheck` on the configured model and
/// the first `gradcheck.batch` training samples.
pub fn check_model_gradients(cfg: &RunConfig) -> Result<GradCheckReport> {
    let gc = &cfg.gradcheck;
    let model = JgrP2o::new(cfg.model_config()?)?;
    let data = cfg.dataset(Split::Train)?;
    if data.len() < gc.batch || gc.batch == 0 {
        return Err(Error::Config(format!(
            "gradcheck.batch = {} but the training set has {} samples",
            gc.batch,
            data.len()
        )));
    }
    let samples = (0..gc.batch).map(|i| data.get(i)).collect::<Result<Vec<_>>>()?;
    let batch = Batch::<f64>::from_samples(&samples, cfg.backbone.feature_size)?;
    let mut store = jittered_params(&model, gc)?;
    calibrate_norms(&model, &mut store, &batch)?;
    let opts = GradCheckOptions {
        step: gc.step,
        refinements: gc.refinements,
        seed: gc.seed,
        per_entry: gc.per_entry,
    };
    grad_check(
        &mut store,
        |st, pass| {
            let mut tape = Tape::new();
            let loss = {
                let mut ctx = Ctx::new(&mut tape, &*st, NormMode::Eval);
                model.loss(&mut ctx, &batch, &cfg.loss)?.total
            };
            let value = tape.value(loss).data()[0];
            if pass == Pass::WithGradients {
                st.zero_grads();
                tape.backward(loss, st)?;
            }
            Ok(Probe {
                value,
                branches: tape.branch_digest(),
            })
        },
        &opts,
    )
}
