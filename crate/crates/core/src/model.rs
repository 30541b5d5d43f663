//! Full network: shared stem, then per stage a backbone trunk, the joint
//! graph reasoning module and the pixel-to-offset head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, Stem, StageTrunk};
use crate::data::Sample;
use crate::error::{shape_err, Error, Result};
use crate::jgr::{GraphPolicy, JgrModule, JgrOutput, Topology, VotingTensor};
use crate::layers::{Ctx, Init};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor4, Var};
use crate::objective::{huber_loss_tape, LossConfig};
use crate::p2o::{aggregate_joints_tape, compute_offset_targets, make_coordinate_grid, CoordinateGrid, OffsetHead, PoseUVZ};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub topology: Topology,
    pub policy: GraphPolicy,
    /// Without reasoning each stage averages its offset predictions over all
    /// pixels with equal weights.
    pub reasoning: bool,
}

impl ModelConfig {
    pub fn joints(&self) -> usize {
        self.topology.joints
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub trunk: StageTrunk,
    pub jgr: JgrModule,
    pub head: OffsetHead,
}

#[derive(Clone, Debug)]
pub struct JgrP2o {
    pub cfg: ModelConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
}

/// Tape handles produced by one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub features: Var,
    pub weights: VotingTensor,
    pub jgr: Option<JgrOutput>,
    pub augmented: Var,
    pub offsets: Var,
    /// `(B, N, 1, 3)` aggregated joints.
    pub pose: Var,
}

/// Loss nodes of a forward pass.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub coord: Vec<Var>,
    pub offset: Vec<Var>,
    pub stages: Vec<StageOutput>,
}

/// Network inputs and targets for a set of samples.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `(B, S, S, 1)` normalized depth.
    pub input: Tensor4<T>,
    /// `(B, F, F, 3)` coordinate grids.
    pub grid: Tensor4<T>,
    /// `(B, N, 1, 3)` target poses.
    pub poses: Tensor4<T>,
    /// `(B, F, F, 3N)` offset targets.
    pub offset_targets: Tensor4<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[Sample], feature_size: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Validation("empty batch".into()))?;
        let (s, n) = (first.frame.size, first.joints());
        let mut input = Vec::with_capacity(samples.len() * s * s);
        let mut grids = Vec::with_capacity(samples.len());
        let mut targets = Vec::new();
        for smp in samples {
            if smp.frame.size != s || smp.joints() != n {
                return Err(shape_err!("samples in a batch differ in size or joint count"));
            }
            input.extend(smp.frame.pixels.iter().map(|&p| T::of(p as f64)));
            let grid = make_coordinate_grid(&smp.frame, feature_size)?;
            targets.extend(compute_offset_targets(&smp.pose, &grid).into_vec().into_iter().map(T::of));
            grids.push(grid);
        }
        let b = samples.len();
        let grid_refs: Vec<&CoordinateGrid> = grids.iter().collect();
        let poses: Vec<PoseUVZ> = samples.iter().map(|s| s.pose.clone()).collect();
        Ok(Self {
            input: Tensor4::from_vec([b, s, s, 1], input)?,
            grid: CoordinateGrid::stack(&grid_refs)?,
            poses: PoseUVZ::stack(&poses)?,
            offset_targets: Tensor4::from_vec([b, feature_size, feature_size, 3 * n], targets)?,
        })
    }

    pub fn len(&self) -> usize {
        self.input.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch {
            input: self.input.cast(),
            grid: self.grid.cast(),
            poses: self.poses.cast(),
            offset_targets: self.offset_targets.cast(),
        }
    }
}

impl JgrP2o {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.backbone.validate()?;
        let c = cfg.backbone.channels;
        let n = cfg.joints();
        if n == 0 {
            return Err(Error::Config("model needs at least one joint".into()));
        }
        let stages = (0..cfg.backbone.stages)
            .map(|s| {
                let p = format!("stage{}", s + 1);
                Ok(Stage {
                    trunk: StageTrunk::new(s, &cfg.backbone),
                    jgr: JgrModule::new(&format!("{p}/jgr"), c, &cfg.topology, cfg.policy, cfg.reasoning)?,
                    head: OffsetHead::new(&format!("{p}/p2o"), c, n),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem: Stem::new(&cfg.backbone),
            cfg,
            stages,
        })
    }

    pub fn joints(&self) -> usize {
        self.cfg.joints()
    }

    fn register(&self, init: &mut Init) -> Result<()> {
        self.stem.register(init)?;
        for s in &self.stages {
            s.trunk.register(init)?;
            s.jgr.register(init)?;
            s.head.register(init)?;
        }
        Ok(())
    }

    /// Seeded parameter initialization in `f64`.
    pub fn init(&self, seed: u64) -> Result<ParamStore<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        self.register(&mut init)?;
        Ok(init.store)
    }

    /// Parameter names and shapes with zero values.
    pub fn shapes(&self) -> Result<ParamStore<f64>> {
        let mut init = Init::shapes_only();
        self.register(&mut init)?;
        Ok(init.store)
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self
                .stages
                .iter()
                .map(|s| s.trunk.param_count() + s.jgr.param_count() + s.head.param_count())
                .sum::<usize>()
    }

    /// Trainable scalar counts per module, in forward order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out = vec![("stem".to_string(), self.stem.param_count())];
        for (i, s) in self.stages.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            out.push((format!("{p}/backbone"), s.trunk.param_count()));
            out.push((format!("{p}/jgr"), s.jgr.param_count()));
            out.push((format!("{p}/p2o"), s.head.param_count()));
        }
        out
    }

    /// Runs every stage on `(B, S, S, 1)` input with a `(B, F, F, 3)` grid.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, input: Var, grid: &Tensor4<T>) -> Result<Vec<StageOutput>> {
        let stem = self.stem.forward(ctx, input)?;
        let mut outputs: Vec<StageOutput> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let x_in = match outputs.last() {
                None => stem,
                Some(prev) => stage.trunk.stage_input(ctx, stem, prev.augmented)?,
            };
            let features = stage.trunk.forward(ctx, x_in)?;
            let (weights, jgr, augmented) = if self.cfg.reasoning {
                let out = stage.jgr.forward(ctx, features)?;
                (out.weights, Some(out), out.augmented)
            } else {
                (stage.jgr.uniform_weights(ctx, features)?, None, features)
            };
            let offsets = stage.head.forward(ctx, augmented)?;
            let pose = aggregate_joints_tape(ctx, offsets, grid, weights)?;
            outputs.push(StageOutput {
                features,
                weights,
                jgr,
                augmented,
                offsets,
                pose,
            });
        }
        Ok(outputs)
    }

    /// Forward pass plus the stacked loss over all stages.
    pub fn loss<T: Scalar>(&self, ctx: &mut Ctx<T>, batch: &Batch<T>, cfg: &LossConfig) -> Result<LossVars> {
        if cfg.stages != self.stages.len() {
            return Err(Error::Validation(format!(
                "loss.stages = {} but the model has {} stages",
                cfg.stages,
                self.stages.len()
            )));
        }
        let input = ctx.tape.constant(batch.input.clone());
        let stages = self.forward(ctx, input, &batch.grid)?;
        let mut coord = Vec::new();
        let mut offset = Vec::new();
        let mut terms = Vec::new();
        for s in &stages {
            let c = huber_loss_tape(ctx.tape, s.pose, &batch.poses, cfg.delta)?;
            let o = huber_loss_tape(ctx.tape, s.offsets, &batch.offset_targets, cfg.delta)?;
            terms.push(c);
            terms.push(ctx.tape.scale(o, cfg.beta));
            coord.push(c);
            offset.push(o);
        }
        let total = ctx.tape.sum(&terms)?;
        Ok(LossVars {
            total,
            coord,
            offset,
            stages,
        })
    }

    /// Final-stage poses for a batch, evaluated with running statistics.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, batch: &Batch<T>) -> Result<Vec<PoseUVZ>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, crate::numerics::NormMode::Eval);
        let input = ctx.tape.constant(batch.input.clone());
        let stages = self.forward(&mut ctx, input, &batch.grid)?;
        let last = stages.last().expect("at least one stage");
        PoseUVZ::unstack(tape.value(last.pose))
    }
}

/// Trainable parameter count of a model configuration.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(JgrP2o::new(cfg.clone())?.param_count())
}
