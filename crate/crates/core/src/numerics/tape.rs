//! Linear record of primitive applications for reverse-mode differentiation.
//!
//! Only the fixed set of primitives the network uses is supported. Each
//! recorded node keeps its output value, its inputs, and a closure that maps
//! the output gradient to input gradients.

use super::ops::{self, NormMode, NormStats, Padding};
use super::params::ParamStore;
use super::tensor::{Scalar, Tensor4};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tape<T>, &Tensor4<T>) -> Result<Vec<Tensor4<T>>>>;

struct Node<T> {
    value: Tensor4<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
    param: Option<String>,
}

/// Running-statistic update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub prefix: String,
    /// Running statistics after the momentum update.
    pub stats: NormStats<T>,
    /// Biased batch moments of this pass.
    pub batch: NormStats<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    stat_updates: Vec<StatUpdate<T>>,
    branches: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stat_updates: Vec::new(),
            branches: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Digest of every branch taken by piecewise primitives (ReLU masks and
    /// max-pool winners). Two forward passes with equal digests evaluated the
    /// same smooth piece of the network.
    pub fn branch_digest(&self) -> u64 {
        self.branches
    }

    fn record_branches(&mut self, words: impl Iterator<Item = u64>) {
        for w in words {
            self.branches = (self.branches ^ w).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17);
        }
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.dims()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Tape::gradients`].
    pub fn leaf(&mut self, value: Tensor4<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; its gradient is accumulated into the
    /// store by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            needs_grad: true,
            param: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a node. `backward` must return one gradient per input, in order.
    pub fn push(
        &mut self,
        value: Tensor4<T>,
        inputs: Vec<Var>,
        backward: impl Fn(&Tape<T>, &Tensor4<T>) -> Result<Vec<Tensor4<T>>> + 'static,
    ) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            inputs,
            backward: Some(Box::new(backward)),
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar output, got dims {:?}",
                self.dims(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::full(self.dims(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let input_grads = backward(self, &g)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[inp.0].needs_grad {
                    continue;
                }
                if ig.dims() != self.dims(inp) {
                    return Err(shape_err!(
                        "gradient dims {:?} do not match value dims {:?}",
                        ig.dims(),
                        self.dims(inp)
                    ));
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep that adds parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &grads.grads[i]) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(grads)
    }

    // ---- primitives ----

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let b = bias.map(|b| self.value(b).data().to_vec());
        let y = ops::conv2d(self.value(x), self.value(kernel), b.as_deref(), stride, padding)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(y, inputs, move |t, g| {
            let grads = ops::conv2d_backward(t.value(x), t.value(kernel), stride, padding, g)?;
            let mut out = vec![grads.input, grads.kernel];
            if has_bias {
                let n = grads.bias.len();
                out.push(Tensor4::from_vec([1, 1, 1, n], grads.bias)?);
            }
            Ok(out)
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err!("add of {:?} and {:?}", self.dims(a), self.dims(b)));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, vec![a, b], |_, g| Ok(vec![g.clone(), g.clone()])))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let y = self.value(a).map(|v| v * f);
        self.push(y, vec![a], move |_, g| Ok(vec![g.map(|v| v * f)]))
    }

    /// Sum of any number of same-shaped values.
    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items
            .first()
            .ok_or_else(|| Error::Validation("sum of no terms".into()))?;
        let mut y = self.value(first).clone();
        for &v in &items[1..] {
            if self.dims(v) != y.dims() {
                return Err(shape_err!("sum of {:?} and {:?}", y.dims(), self.dims(v)));
            }
            y.add_assign(self.value(v));
        }
        let n = items.len();
        Ok(self.push(y, items.to_vec(), move |_, g| Ok(vec![g.clone(); n])))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let mask: Vec<u64> = self
            .value(x)
            .data()
            .chunks(64)
            .map(|c| c.iter().enumerate().fold(0u64, |m, (i, &v)| m | (u64::from(v > T::zero()) << i)))
            .collect();
        self.record_branches(mask.into_iter());
        self.push(y, vec![x], move |t, g| Ok(vec![ops::relu_backward(t.value(x), g)]))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x);
        let (y, arg) = ops::max_pool2(self.value(x))?;
        self.record_branches(arg.iter().map(|&a| a as u64));
        Ok(self.push(y, vec![x], move |_, g| Ok(vec![ops::max_pool2_backward(dims, &arg, g)])))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x);
        let y = ops::avg_pool2(self.value(x))?;
        Ok(self.push(y, vec![x], move |_, g| Ok(vec![ops::avg_pool2_backward(dims, g)])))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let y = ops::upsample2(self.value(x));
        self.push(y, vec![x], |_, g| Ok(vec![ops::upsample2_backward(g)]))
    }

    /// Batch norm with per-channel `scale`/`shift` stored as `(1, 1, 1, C)`.
    /// In train mode the updated running statistics are queued under `prefix`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: NormMode,
        running: &NormStats<T>,
        prefix: &str,
    ) -> Result<Var> {
        let fwd = ops::batch_norm(
            self.value(x),
            self.value(scale).data(),
            self.value(shift).data(),
            mode,
            running,
        )?;
        if mode == NormMode::Train {
            self.stat_updates.push(StatUpdate {
                prefix: prefix.to_string(),
                stats: fwd.running.clone(),
                batch: fwd.used.clone(),
            });
        }
        let normalized = fwd.normalized;
        let inv_std = fwd.inv_std;
        Ok(self.push(fwd.output, vec![x, scale, shift], move |t, g| {
            let gr = ops::batch_norm_backward(&normalized, &inv_std, t.value(scale).data(), mode, g);
            let c = gr.scale.len();
            Ok(vec![
                gr.input,
                Tensor4::from_vec([1, 1, 1, c], gr.scale)?,
                Tensor4::from_vec([1, 1, 1, c], gr.shift)?,
            ])
        }))
    }

    pub fn spatial_softmax(&mut self, x: Var) -> Var {
        let y = ops::spatial_softmax(self.value(x));
        let out = Var(self.nodes.len());
        self.push(y, vec![x], move |t, g| {
            Ok(vec![ops::spatial_softmax_backward(t.value(out), g)])
        })
    }

    pub fn channel_softmax(&mut self, x: Var) -> Var {
        let y = ops::channel_softmax(self.value(x));
        let out = Var(self.nodes.len());
        self.push(y, vec![x], move |t, g| {
            Ok(vec![ops::channel_softmax_backward(t.value(out), g)])
        })
    }

    pub fn bmm(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let y = ops::bmm(self.value(a), trans_a, self.value(b), trans_b)?;
        Ok(self.push(y, vec![a, b], move |t, g| {
            let (ga, gb) = ops::bmm_backward(t.value(a), trans_a, t.value(b), trans_b, g)?;
            Ok(vec![ga, gb])
        }))
    }

    pub fn reshape(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        let from = self.dims(x);
        let y = self.value(x).clone().reshape(dims)?;
        Ok(self.push(y, vec![x], move |_, g| Ok(vec![g.clone().reshape(from)?])))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let first = self.dims(a)[3];
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, vec![a, b], move |_, g| {
            let (ga, gb) = ops::split_channels(g, first);
            Ok(vec![ga, gb])
        }))
    }
}
