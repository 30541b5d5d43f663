//! Parameterized building blocks shared by the backbone and the heads.
//!
//! A layer knows its parameter names and shapes (`register`) and how to apply
//! itself on a tape (`forward`). Parameters are initialized in `f64` and cast
//! to the working precision afterwards so that `f32` and `f64` models built
//! from the same seed agree up to rounding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{NormMode, Padding, ParamKind, ParamStore, Scalar, Tape, Tensor4, Var};

/// Everything a forward pass needs besides its inputs.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: NormMode,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: NormMode) -> Self {
        Self { tape, store, mode }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.store, name)
    }
}

/// Parameter initializer; optional rng so counting never draws numbers.
pub struct Init<'r> {
    pub store: ParamStore<f64>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Init<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            store: ParamStore::new(),
            rng: Some(rng),
        }
    }

    /// Shapes only: every value is zero.
    pub fn shapes_only() -> Self {
        Self {
            store: ParamStore::new(),
            rng: None,
        }
    }

    pub fn normal(&mut self, name: &str, kind: ParamKind, dims: [usize; 4], std: f64) -> Result<()> {
        let t = match self.rng.as_deref_mut() {
            Some(rng) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                Tensor4::from_fn(dims, |_| dist.sample(rng))
            }
            None => Tensor4::zeros(dims),
        };
        self.store.insert(name, kind, t)
    }

    pub fn constant(&mut self, name: &str, kind: ParamKind, dims: [usize; 4], value: f64) -> Result<()> {
        self.store.insert(name, kind, Tensor4::full(dims, value))
    }

    pub fn tensor(&mut self, name: &str, kind: ParamKind, value: Tensor4<f64>) -> Result<()> {
        self.store.insert(name, kind, value)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        match self.rng.as_deref_mut() {
            Some(rng) => rng.random_range(low..=high),
            None => 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, kernel: usize, cin: usize, cout: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            kernel,
            cin,
            cout,
            stride: 1,
            bias,
        }
    }

    pub fn kernel_name(&self) -> String {
        format!("{}/kernel", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn register(&self, init: &mut Init) -> Result<()> {
        let fan_in = (self.kernel * self.kernel * self.cin) as f64;
        init.normal(
            &self.kernel_name(),
            ParamKind::Weight,
            [self.kernel, self.kernel, self.cin, self.cout],
            (2.0 / fan_in).sqrt(),
        )?;
        if self.bias {
            init.constant(&self.bias_name(), ParamKind::Bias, [1, 1, 1, self.cout], 0.0)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout + if self.bias { self.cout } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let k = ctx.param(&self.kernel_name())?;
        let b = if self.bias {
            Some(ctx.param(&self.bias_name())?)
        } else {
            None
        };
        ctx.tape.conv2d(x, k, b, self.stride, Padding::Same)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
}

impl Norm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn register(&self, init: &mut Init) -> Result<()> {
        let d = [1, 1, 1, self.channels];
        init.constant(&format!("{}/scale", self.name), ParamKind::NormScale, d, 1.0)?;
        init.constant(&format!("{}/shift", self.name), ParamKind::NormShift, d, 0.0)?;
        init.constant(&format!("{}/running_mean", self.name), ParamKind::RunningStat, d, 0.0)?;
        init.constant(&format!("{}/running_var", self.name), ParamKind::RunningStat, d, 1.0)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let scale = ctx.param(&format!("{}/scale", self.name))?;
        let shift = ctx.param(&format!("{}/shift", self.name))?;
        let stats = ctx.store.norm_stats(&self.name)?;
        ctx.tape.batch_norm(x, scale, shift, ctx.mode, &stats, &self.name)
    }
}

/// Convolution (no bias) followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvBnRelu {
    pub fn new(name: &str, kernel: usize, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv::new(format!("{name}/conv"), kernel, cin, cout, false),
            norm: Norm::new(format!("{name}/bn"), cout),
        }
    }

    pub fn register(&self, init: &mut Init) -> Result<()> {
        self.conv.register(init)?;
        self.norm.register(init)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.param_count()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualLayout {
    /// BN-ReLU-1x1 → BN-ReLU-3x3 → BN-ReLU-1x1 at half width.
    Bottleneck,
    /// BN-ReLU-3x3 → BN-ReLU-3x3.
    Basic,
}

/// Pre-activation residual block with identity skip (1x1 projection when the
/// channel count changes).
#[derive(Clone, Debug)]
pub struct Residual {
    pre: Vec<(Norm, Conv)>,
    skip: Option<Conv>,
}

impl Residual {
    pub fn new(name: &str, cin: usize, cout: usize, layout: ResidualLayout) -> Self {
        let pre = match layout {
            ResidualLayout::Bottleneck => {
                let mid = (cout / 2).max(1);
                vec![
                    (Norm::new(format!("{name}/bn1"), cin), Conv::new(format!("{name}/conv1"), 1, cin, mid, false)),
                    (Norm::new(format!("{name}/bn2"), mid), Conv::new(format!("{name}/conv2"), 3, mid, mid, false)),
                    (Norm::new(format!("{name}/bn3"), mid), Conv::new(format!("{name}/conv3"), 1, mid, cout, true)),
                ]
            }
            ResidualLayout::Basic => vec![
                (Norm::new(format!("{name}/bn1"), cin), Conv::new(format!("{name}/conv1"), 3, cin, cout, false)),
                (Norm::new(format!("{name}/bn2"), cout), Conv::new(format!("{name}/conv2"), 3, cout, cout, true)),
            ],
        };
        let skip = (cin != cout).then(|| Conv::new(format!("{name}/skip"), 1, cin, cout, true));
        Self { pre, skip }
    }

    pub fn register(&self, init: &mut Init) -> Result<()> {
        for (n, c) in &self.pre {
            n.register(init)?;
            c.register(init)?;
        }
        if let Some(s) = &self.skip {
            s.register(init)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.pre
            .iter()
            .map(|(n, c)| n.param_count() + c.param_count())
            .sum::<usize>()
            + self.skip.as_ref().map_or(0, Conv::param_count)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut y = x;
        for (n, c) in &self.pre {
            y = n.forward(ctx, y)?;
            y = ctx.tape.relu(y);
            y = c.forward(ctx, y)?;
        }
        let skip = match &self.skip {
            Some(s) => s.forward(ctx, x)?,
            None => x,
        };
        ctx.tape.add(y, skip)
    }
}
