//! Adam with bias correction and decoupled weight decay.

use indexmap::IndexMap;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor4};

/// First and second moments per trainable entry, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub moments: IndexMap<String, (Tensor4<T>, Tensor4<T>)>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like the trainable entries of `params`.
    pub fn new(params: &ParamStore<T>) -> Self {
        let moments = params
            .iter()
            .filter(|(_, p)| p.kind.is_trainable())
            .map(|(n, p)| {
                let z = Tensor4::zeros(p.value.dims());
                (n.to_string(), (z.clone(), z))
            })
            .collect();
        Self { t: 0, moments }
    }
}

/// One update from the gradients currently stored in `params`. Entries whose
/// kind decays are first shrunk by `1 − lr·wd`.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &TrainConfig, lr: f64) -> Result<()> {
    let trainable = params.iter().filter(|(_, p)| p.kind.is_trainable()).count();
    if trainable != state.moments.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} entries but the model has {trainable}",
            state.moments.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let shrink = 1.0 - lr * cfg.weight_decay;
    for (name, p) in params.iter_mut().filter(|(_, p)| p.kind.is_trainable()) {
        let (m, v) = state
            .moments
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("no optimizer moments for {name}")))?;
        if m.dims() != p.value.dims() || v.dims() != p.value.dims() {
            return Err(Error::State(format!(
                "moments of {name} have shape {:?}, parameter has {:?}",
                m.dims(),
                p.value.dims()
            )));
        }
        let decays = p.kind.decays() && cfg.weight_decay > 0.0;
        let values = p.value.data_mut();
        for (i, (&g, (mi, vi))) in p
            .grad
            .data()
            .iter()
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            .enumerate()
        {
            let g = g.as_f64();
            let mn = cfg.beta1 * mi.as_f64() + (1.0 - cfg.beta1) * g;
            let vn = cfg.beta2 * vi.as_f64() + (1.0 - cfg.beta2) * g * g;
            *mi = T::of(mn);
            *vi = T::of(vn);
            let mut theta = values[i].as_f64();
            if decays {
                theta *= shrink;
            }
            theta -= lr * (mn / c1) / ((vn / c2).sqrt() + cfg.epsilon);
            values[i] = T::of(theta);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamKind;

    fn store(grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", ParamKind::Weight, Tensor4::full([1, 1, 2, 2], 0.5)).unwrap();
        s.insert("b", ParamKind::Bias, Tensor4::full([1, 1, 1, 2], 0.5)).unwrap();
        for (_, p) in s.iter_mut() {
            p.grad.fill(grad);
        }
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(0.0);
        let before = s.clone();
        let mut st = AdamState::new(&s);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut s, &mut st, &cfg, 1e-3).unwrap();
        assert!(s.values_equal(&before));
    }

    #[test]
    fn first_step_moves_each_scalar_by_about_lr() {
        let mut s = store(0.3);
        let mut st = AdamState::new(&s);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let lr = 1e-3;
        adam_step(&mut s, &mut st, &cfg, lr).unwrap();
        // m̂ = g and v̂ = g² after bias correction.
        let expected = 0.5 - lr * 0.3 / (0.3 + cfg.epsilon);
        for v in s.value("w").unwrap().data() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_spares_biases() {
        let mut s = store(0.0);
        let mut st = AdamState::new(&s);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        adam_step(&mut s, &mut st, &cfg, 0.5).unwrap();
        assert_eq!(s.value("w").unwrap().data()[0], 0.5 * (1.0 - 0.05));
        assert_eq!(s.value("b").unwrap().data()[0], 0.5);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut s = store(1.0);
        let mut st = AdamState::new(&s);
        st.moments.get_mut("w").unwrap().0 = Tensor4::zeros([1, 1, 1, 1]);
        let e = adam_step(&mut s, &mut st, &TrainConfig::default(), 1e-3).unwrap_err();
        assert!(matches!(e, Error::State(_)));
    }
}
