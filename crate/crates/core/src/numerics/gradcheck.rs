//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::error::{Error, Result};

/// What the objective must compute on a given call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    ValueOnly,
    /// Also write the gradient into the store's `grad` arrays (after zeroing).
    WithGradients,
}

/// Objective value plus the branch digest of the forward pass that produced
/// it (see [`crate::numerics::Tape::branch_digest`]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub branches: u64,
}

impl From<f64> for Probe {
    fn from(value: f64) -> Self {
        Self { value, branches: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// When a perturbed pass takes a different branch than the base pass the
    /// difference straddles a kink; the step is divided by ten and retried up
    /// to this many times.
    pub refinements: usize,
    pub seed: u64,
    /// Scalars checked per named entry; entries at or below this size are
    /// checked exhaustively.
    pub per_entry: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            refinements: 4,
            seed: 0,
            per_entry: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EntryReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest |analytic| gradient seen, to spot entries with no signal.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Scalars whose step had to be reduced to stay on one smooth piece.
    pub refined: usize,
    /// Scalars where every step tried still crossed a kink.
    pub kinked: usize,
    pub entries: Vec<EntryReport>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against `(f(θ+h) − f(θ−h)) / 2h` for every
/// trainable scalar (or a seeded subsample per entry).
pub fn grad_check<F, P>(store: &mut ParamStore<f64>, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>, Pass) -> Result<P>,
    P: Into<Probe>,
{
    let mut eval = |store: &mut ParamStore<f64>, pass| f(store, pass).map(Into::into);
    let base_probe: Probe = eval(store, Pass::ValueOnly)?;
    let again_probe: Probe = eval(store, Pass::ValueOnly)?;
    let (base, again) = (base_probe.value, again_probe.value);
    if base.to_bits() != again.to_bits() || base_probe.branches != again_probe.branches {
        return Err(Error::Determinism(format!(
            "objective returned {base:e} then {again:e} for identical parameters"
        )));
    }
    store.zero_grads();
    eval(store, Pass::WithGradients)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .filter(|(_, p)| p.kind.is_trainable())
        .map(|(n, p)| (n.to_string(), p.grad.data().to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        refined: 0,
        kinked: 0,
        entries: Vec::new(),
    };
    for (name, grad) in analytic {
        let n = grad.len();
        let indices: Vec<usize> = if n <= opts.per_entry {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.per_entry).into_vec();
            v.sort_unstable();
            v
        };
        let mut entry = EntryReport {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            max_abs_grad: 0.0,
        };
        for i in indices {
            let orig = store.value(&name)?.data()[i];
            let mut h = opts.step;
            let mut attempt = 0;
            let numeric = loop {
                store.get_mut(&name)?.value.data_mut()[i] = orig + h;
                let plus = eval(store, Pass::ValueOnly)?;
                store.get_mut(&name)?.value.data_mut()[i] = orig - h;
                let minus = eval(store, Pass::ValueOnly)?;
                store.get_mut(&name)?.value.data_mut()[i] = orig;
                let smooth = plus.branches == base_probe.branches && minus.branches == base_probe.branches;
                if smooth || attempt == opts.refinements {
                    if attempt > 0 {
                        report.refined += 1;
                    }
                    if !smooth {
                        report.kinked += 1;
                    }
                    break (plus.value - minus.value) / (2.0 * h);
                }
                attempt += 1;
                h /= 10.0;
            };
            let err = relative_error(grad[i], numeric);
            entry.checked += 1;
            entry.max_abs_grad = entry.max_abs_grad.max(grad[i].abs());
            if err > entry.max_rel_error {
                entry.max_rel_error = err;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
        report.checked += entry.checked;
        report.entries.push(entry);
    }
    Ok(report)
}
