//! Hourglass feature extractor.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv, ConvBnRelu, Ctx, Init, Residual, ResidualLayout};
use crate::numerics::{Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_size: usize,
    /// Spatial size of the feature map and of the offset maps.
    pub feature_size: usize,
    pub channels: usize,
    /// Number of down/up levels in each hourglass.
    pub depth: usize,
    pub stages: usize,
    pub pool: PoolKind,
    pub residual: ResidualLayout,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 96,
            feature_size: 24,
            channels: DEFAULT_CHANNELS,
            depth: 2,
            stages: 2,
            pool: PoolKind::Max,
            residual: ResidualLayout::Bottleneck,
        }
    }
}

/// Width of the full-size model; see `configs/full.toml`.
pub const DEFAULT_CHANNELS: usize = 136;

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages == 0 {
            return bad("backbone.stages must be at least 1".into());
        }
        if self.channels < 2 {
            return bad(format!("backbone.channels must be at least 2, got {}", self.channels));
        }
        if self.feature_size == 0 || !self.input_size.is_multiple_of(self.feature_size) {
            return bad(format!(
                "backbone.input_size {} is not a multiple of backbone.feature_size {}",
                self.input_size, self.feature_size
            ));
        }
        let ratio = self.input_size / self.feature_size;
        if !ratio.is_power_of_two() {
            return bad(format!("input/feature ratio {ratio} is not a power of two"));
        }
        if !self.feature_size.is_multiple_of(1 << self.depth) {
            return bad(format!(
                "backbone.feature_size {} is not divisible by 2^{}",
                self.feature_size, self.depth
            ));
        }
        Ok(())
    }

    pub fn downsample_levels(&self) -> usize {
        (self.input_size / self.feature_size).trailing_zeros() as usize
    }
}

fn pool<T: Scalar>(ctx: &mut Ctx<T>, kind: PoolKind, x: Var) -> Result<Var> {
    match kind {
        PoolKind::Max => ctx.tape.max_pool2(x),
        PoolKind::Avg => ctx.tape.avg_pool2(x),
    }
}

/// 5x5 conv + BN/ReLU, a widening residual block, then one pool followed by
/// a residual block per factor of two between input and feature size.
#[derive(Clone, Debug)]
pub struct Stem {
    cfg: BackboneConfig,
    conv: ConvBnRelu,
    widen: Residual,
    blocks: Vec<Residual>,
}

impl Stem {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let c = cfg.channels;
        let half = (c / 2).max(1);
        Self {
            cfg: cfg.clone(),
            conv: ConvBnRelu::new("stem/c0", 5, 1, half),
            widen: Residual::new("stem/r0", half, c, cfg.residual),
            blocks: (0..cfg.downsample_levels())
                .map(|i| Residual::new(&format!("stem/r{}", i + 1), c, c, cfg.residual))
                .collect(),
        }
    }

    pub fn register(&self, init: &mut Init) -> Result<()> {
        self.conv.register(init)?;
        self.widen.register(init)?;
        self.blocks.iter().try_for_each(|b| b.register(init))
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
            + self.widen.param_count()
            + self.blocks.iter().map(Residual::param_count).sum::<usize>()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, depth_image: Var) -> Result<Var> {
        let [_, h, w, c] = ctx.tape.dims(depth_image);
        if h != self.cfg.input_size || w != self.cfg.input_size || c != 1 {
            return Err(shape_err!(
                "stem expects {0}x{0}x1 input, got {h}x{w}x{c}",
                self.cfg.input_size
            ));
        }
        let mut x = self.conv.forward(ctx, depth_image)?;
        x = self.widen.forward(ctx, x)?;
        for b in &self.blocks {
            x = pool(ctx, self.cfg.pool, x)?;
            x = b.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// Symmetric encoder/decoder with a skip branch at every level.
#[derive(Clone, Debug)]
pub enum Hourglass {
    /// Depth 0: a single residual block.
    Leaf(Residual),
    Level {
        pool: PoolKind,
        skip: Residual,
        down: Residual,
        inner: Box<Hourglass>,
        up: Residual,
    },
}

impl Hourglass {
    pub fn new(prefix: &str, depth: usize, channels: usize, cfg: &BackboneConfig) -> Self {
        let res = |n: &str| Residual::new(&format!("{prefix}/{n}"), channels, channels, cfg.residual);
        if depth == 0 {
            return Hourglass::Leaf(res("leaf"));
        }
        Hourglass::Level {
            pool: cfg.pool,
            skip: res("skip"),
            down: res("down"),
            inner: Box::new(Hourglass::new(&format!("{prefix}/l{}", depth - 1), depth - 1, channels, cfg)),
            up: res("up"),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Hourglass::Leaf(_) => 0,
            Hourglass::Level { inner, .. } => 1 + inner.depth(),
        }
    }

    pub fn register(&self, init: &mut Init) -> Result<()> {
        match self {
            Hourglass::Leaf(r) => r.register(init),
            Hourglass::Level {
                skip, down, inner, up, ..
            } => {
                skip.register(init)?;
                down.register(init)?;
                inner.register(init)?;
                up.register(init)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Hourglass::Leaf(r) => r.param_count(),
            Hourglass::Level {
                skip, down, inner, up, ..
            } => skip.param_count() + down.param_count() + inner.param_count() + up.param_count(),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let [_, h, w, _] = ctx.tape.dims(x);
        let div = 1usize << self.depth();
        if h % div != 0 || w % div != 0 {
            return Err(shape_err!(
                "hourglass of depth {} needs spatial dims divisible by {div}, got {h}x{w}",
                self.depth()
            ));
        }
        match self {
            Hourglass::Leaf(r) => r.forward(ctx, x),
            Hourglass::Level {
                pool: kind,
                skip,
                down,
                inner,
                up,
            } => {
                let upper = skip.forward(ctx, x)?;
                let low = pool(ctx, *kind, x)?;
                let low = down.forward(ctx, low)?;
                let low = inner.forward(ctx, low)?;
                let low = up.forward(ctx, low)?;
                let low = ctx.tape.upsample2(low);
                ctx.tape.add(upper, low)
            }
        }
    }
}

/// Per-stage backbone: optional input remap, hourglass, residual, and a
/// 1x1 conv+BN+ReLU producing the local feature map X.
#[derive(Clone, Debug)]
pub struct StageTrunk {
    pub remap: Option<Conv>,
    pub hourglass: Hourglass,
    pub post: Residual,
    pub lin: ConvBnRelu,
}

impl StageTrunk {
    pub fn new(stage: usize, cfg: &BackboneConfig) -> Self {
        let c = cfg.channels;
        let p = format!("stage{}", stage + 1);
        Self {
            remap: (stage > 0).then(|| Conv::new(format!("{p}/remap"), 1, c, c, true)),
            hourglass: Hourglass::new(&format!("{p}/hg"), cfg.depth, c, cfg),
            post: Residual::new(&format!("{p}/post"), c, c, cfg.residual),
            lin: ConvBnRelu::new(&format!("{p}/lin"), 1, c, c),
        }
    }

    pub fn register(&self, init: &mut Init) -> Result<()> {
        if let Some(r) = &self.remap {
            r.register(init)?;
        }
        self.hourglass.register(init)?;
        self.post.register(init)?;
        self.lin.register(init)
    }

    pub fn param_count(&self) -> usize {
        self.remap.as_ref().map_or(0, Conv::param_count)
            + self.hourglass.param_count()
            + self.post.param_count()
            + self.lin.param_count()
    }

    /// Input of stage `s >= 2`: stem features plus a 1x1 remap of the previous
    /// stage's augmented feature map.
    pub fn stage_input<T: Scalar>(&self, ctx: &mut Ctx<T>, stem: Var, prev_augmented: Var) -> Result<Var> {
        let remap = self
            .remap
            .as_ref()
            .ok_or_else(|| Error::Validation("the first stage has no stage input remap".into()))?;
        if ctx.tape.dims(prev_augmented)[3] != remap.cin {
            return Err(shape_err!(
                "stage input expects {} channels, got {}",
                remap.cin,
                ctx.tape.dims(prev_augmented)[3]
            ));
        }
        let r = remap.forward(ctx, prev_augmented)?;
        ctx.tape.add(stem, r)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.hourglass.forward(ctx, x)?;
        let y = self.post.forward(ctx, y)?;
        self.lin.forward(ctx, y)
    }
}
