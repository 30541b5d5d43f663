//! Joint graph reasoning: pixel-to-joint voting, one round of graph
//! convolution over joint features, joint-to-pixel mapping, and fusion with
//! the local features.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv, ConvBnRelu, Ctx, Init};
use crate::numerics::{ParamKind, Scalar, Tensor4, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphPolicy {
    Skeleton,
    Similarity,
    Parameterized,
}

impl fmt::Display for GraphPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphPolicy::Skeleton => "skeleton",
            GraphPolicy::Similarity => "similarity",
            GraphPolicy::Parameterized => "parameterized",
        })
    }
}

impl FromStr for GraphPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skeleton" => Ok(GraphPolicy::Skeleton),
            "similarity" => Ok(GraphPolicy::Similarity),
            "parameterized" => Ok(GraphPolicy::Parameterized),
            other => Err(Error::Config(format!(
                "unknown graph policy {other:?} (expected skeleton, similarity or parameterized)"
            ))),
        }
    }
}

/// Joint count and bone list of a hand skeleton.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub name: String,
    pub joints: usize,
    pub edges: Vec<(usize, usize)>,
}

const ICVL_EDGES: &[(usize, usize)] = &[
    (0, 1), (1, 2), (2, 3),
    (0, 4), (4, 5), (5, 6),
    (0, 7), (7, 8), (8, 9),
    (0, 10), (10, 11), (11, 12),
    (0, 13), (13, 14), (14, 15),
];

/// Joint order: pinky tip, pinky mid, ring tip, ring mid, middle tip,
/// middle mid, index tip, index mid, thumb tip, thumb mid, thumb root,
/// wrist left, wrist right, palm center.
const NYU_EDGES: &[(usize, usize)] = &[
    (0, 1), (1, 13),
    (2, 3), (3, 13),
    (4, 5), (5, 13),
    (6, 7), (7, 13),
    (8, 9), (9, 10), (10, 13),
    (11, 13), (12, 13),
];

const MSRA_EDGES: &[(usize, usize)] = &[
    (0, 1), (1, 2), (2, 3), (3, 4),
    (0, 5), (5, 6), (6, 7), (7, 8),
    (0, 9), (9, 10), (10, 11), (11, 12),
    (0, 13), (13, 14), (14, 15), (15, 16),
    (0, 17), (17, 18), (18, 19), (19, 20),
];

const CHAIN4_EDGES: &[(usize, usize)] = &[(0, 1), (1, 2), (2, 3)];

impl Topology {
    pub const BUILTIN: &'static [&'static str] = &["icvl", "nyu", "msra", "synth", "chain4"];

    pub fn builtin(name: &str) -> Option<Self> {
        let (joints, edges) = match name {
            "icvl" => (16, ICVL_EDGES),
            "nyu" | "synth" => (14, NYU_EDGES),
            "msra" => (21, MSRA_EDGES),
            "chain4" => (4, CHAIN4_EDGES),
            _ => return None,
        };
        Some(Self {
            name: name.to_string(),
            joints,
            edges: edges.to_vec(),
        })
    }

    /// Built-in name, or a path to an edge-list file (one `i j` pair per
    /// line, 0-based; `#` starts a comment).
    pub fn resolve(name_or_path: &str, joints: usize) -> Result<Self> {
        if let Some(t) = Self::builtin(name_or_path) {
            if t.joints != joints {
                return Err(Error::Validation(format!(
                    "topology {name_or_path:?} has {} joints but the model is configured for {joints}",
                    t.joints
                )));
            }
            return Ok(t);
        }
        Self::from_edge_file(Path::new(name_or_path), joints)
    }

    pub fn from_edge_file(path: &Path, joints: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let nums: Vec<&str> = line.split_whitespace().collect();
            if nums.len() != 2 {
                return Err(parse_err(format!("expected two joint indices, got {line:?}")));
            }
            let a = nums[0].parse().map_err(|_| parse_err(format!("bad index {:?}", nums[0])))?;
            let b = nums[1].parse().map_err(|_| parse_err(format!("bad index {:?}", nums[1])))?;
            edges.push((a, b));
        }
        let t = Self {
            name: path.display().to_string(),
            joints,
            edges,
        };
        validate_edges(&t.edges, joints)?;
        Ok(t)
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            name: format!("{}-permuted", self.name),
            joints: self.joints,
            edges: self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
        }
    }
}

fn validate_edges(edges: &[(usize, usize)], n: usize) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(Error::Validation(format!(
                "edge ({a}, {b}) references a joint outside 0..{n}"
            )));
        }
        if a == b {
            return Err(Error::Validation(format!("edge ({a}, {a}) is a self-loop")));
        }
        if !seen.insert((a.min(b), a.max(b))) {
            return Err(Error::Validation(format!("duplicate edge ({a}, {b})")));
        }
    }
    Ok(())
}

/// Connection weights between joints.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphAdjacency {
    pub policy: GraphPolicy,
    /// `(1, N, 1, N)`, or `(B, N, 1, N)` for the per-sample similarity graph.
    pub matrix: Tensor4<f64>,
    /// Bones of the skeleton policy; empty otherwise.
    pub edges: Vec<(usize, usize)>,
}

impl GraphAdjacency {
    pub fn joints(&self) -> usize {
        self.matrix.height()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.at(0, i, 0, j)
    }

    /// Square roots of the self-loop-augmented degrees, `D̃^{1/2} 1`.
    pub fn sqrt_degrees(&self) -> Vec<f64> {
        degrees(&self.edges, self.joints())
            .into_iter()
            .map(f64::sqrt)
            .collect()
    }
}

fn degrees(edges: &[(usize, usize)], n: usize) -> Vec<f64> {
    let mut d = vec![1.0; n];
    for &(a, b) in edges {
        d[a] += 1.0;
        d[b] += 1.0;
    }
    d
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for the undirected skeleton graph.
pub fn build_skeleton_adjacency(edges: &[(usize, usize)], n: usize) -> Result<GraphAdjacency> {
    validate_edges(edges, n)?;
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(i, j) in edges {
        a[i][j] = 1.0;
        a[j][i] = 1.0;
    }
    let d = degrees(edges, n);
    let matrix = Tensor4::from_fn([1, n, 1, n], |[_, i, _, j]| a[i][j] / (d[i] * d[j]).sqrt());
    Ok(GraphAdjacency {
        policy: GraphPolicy::Skeleton,
        matrix,
        edges: edges.to_vec(),
    })
}

/// Row-wise softmax of the bilinear scores `(f_i U) · (f_j V)`, computed
/// directly (no tape).
pub fn build_similarity_adjacency(
    features: &Tensor4<f64>,
    upsilon: &Tensor4<f64>,
    psi: &Tensor4<f64>,
) -> Result<GraphAdjacency> {
    use crate::numerics::ops::{bmm, channel_softmax};
    let p = bmm(features, false, upsilon, false)?;
    let q = bmm(features, false, psi, false)?;
    let scores = bmm(&p, false, &q, true)?;
    Ok(GraphAdjacency {
        policy: GraphPolicy::Similarity,
        matrix: channel_softmax(&scores),
        edges: Vec::new(),
    })
}

/// Spatial-softmax voting weights `(B, H, W, N)`. The same handle feeds the
/// pixel-to-joint vote, the joint-to-pixel map, and offset aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VotingTensor(pub Var);

/// Joint feature rows `(B, N, 1, C)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JointFeatures(pub Var);

#[derive(Clone, Copy, Debug)]
pub struct JgrOutput {
    pub weights: VotingTensor,
    pub features: JointFeatures,
    pub adjacency: Var,
    pub evolved: JointFeatures,
    /// Joint context before the ρ transform.
    pub context_pre: Var,
    pub context: Var,
    pub augmented: Var,
}

/// Parameters and wiring of one stage's reasoning module. With
/// `reasoning == false` the module has no parameters: every pixel votes
/// with weight `1/(H·W)` and the features pass through unchanged.
#[derive(Clone, Debug)]
pub struct JgrModule {
    pub prefix: String,
    pub channels: usize,
    pub joints: usize,
    pub policy: GraphPolicy,
    pub reasoning: bool,
    pub skeleton: GraphAdjacency,
    pub phi: Conv,
    pub varphi: Conv,
    pub rho: ConvBnRelu,
    pub tau: ConvBnRelu,
}

impl JgrModule {
    pub fn new(
        prefix: &str,
        channels: usize,
        topology: &Topology,
        policy: GraphPolicy,
        reasoning: bool,
    ) -> Result<Self> {
        let c = channels;
        let n = topology.joints;
        Ok(Self {
            prefix: prefix.to_string(),
            channels: c,
            joints: n,
            policy,
            reasoning,
            skeleton: build_skeleton_adjacency(&topology.edges, n)?,
            phi: Conv::new(format!("{prefix}/phi"), 1, c, n, false),
            varphi: Conv::new(format!("{prefix}/varphi"), 1, c, c, true),
            rho: ConvBnRelu::new(&format!("{prefix}/rho"), 1, c, c),
            tau: ConvBnRelu::new(&format!("{prefix}/tau"), 1, 2 * c, c),
        })
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}/{leaf}", self.prefix)
    }

    pub fn register(&self, init: &mut Init) -> Result<()> {
        let c = self.channels;
        let n = self.joints;
        if !self.reasoning {
            return Ok(());
        }
        self.phi.register(init)?;
        self.varphi.register(init)?;
        init.normal(&self.name("graph/weight"), ParamKind::Weight, [1, c, 1, c], (2.0 / c as f64).sqrt())?;
        match self.policy {
            GraphPolicy::Skeleton => {}
            GraphPolicy::Similarity => {
                let std = 1.0 / (c as f64).sqrt();
                init.normal(&self.name("similarity/upsilon"), ParamKind::Weight, [1, c, 1, c], std)?;
                init.normal(&self.name("similarity/psi"), ParamKind::Weight, [1, c, 1, c], std)?;
            }
            GraphPolicy::Parameterized => {
                let mut a = self.skeleton.matrix.clone();
                for v in a.data_mut() {
                    *v += init.uniform(-0.01, 0.01);
                }
                debug_assert_eq!(a.dims(), [1, n, 1, n]);
                init.tensor(&self.name("graph/adjacency"), ParamKind::Adjacency, a)?;
            }
        }
        self.rho.register(init)?;
        self.tau.register(init)
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let mut n = 0;
        if self.reasoning {
            n += self.phi.param_count() + self.varphi.param_count() + c * c + self.rho.param_count() + self.tau.param_count();
            n += match self.policy {
                GraphPolicy::Skeleton => 0,
                GraphPolicy::Similarity => 2 * c * c,
                GraphPolicy::Parameterized => self.joints * self.joints,
            };
        }
        n
    }

    /// `W = Φ(φ(X))`.
    pub fn voting_weights<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<VotingTensor> {
        self.check_features(ctx, x)?;
        let logits = self.phi.forward(ctx, x)?;
        Ok(VotingTensor(ctx.tape.spatial_softmax(logits)))
    }

    /// Equal weights `1/(H·W)` for every pixel and joint, shaped like the
    /// voting weights of `x`.
    pub fn uniform_weights<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<VotingTensor> {
        self.check_features(ctx, x)?;
        let [b, h, w, _] = ctx.tape.dims(x);
        let value = Tensor4::full([b, h, w, self.joints], T::of(1.0 / (h * w) as f64));
        Ok(VotingTensor(ctx.tape.constant(value)))
    }

    /// `f_k = Σ_i w_ki ϕ(x_i)`.
    pub fn vote<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, w: VotingTensor) -> Result<JointFeatures> {
        let [b, h, wd, _] = ctx.tape.dims(x);
        let [wb, wh, ww, _] = ctx.tape.dims(w.0);
        if (b, h, wd) != (wb, wh, ww) {
            return Err(shape_err!("voting weights and features are not aligned"));
        }
        let y = self.varphi.forward(ctx, x)?;
        Ok(JointFeatures(ctx.tape.bmm(w.0, true, y, false)?))
    }

    /// `A^e` for the configured policy; `(1, N, 1, N)` or `(B, N, 1, N)`.
    pub fn adjacency<T: Scalar>(&self, ctx: &mut Ctx<T>, f: JointFeatures) -> Result<Var> {
        match self.policy {
            GraphPolicy::Skeleton => Ok(ctx.tape.constant(self.skeleton.matrix.cast())),
            GraphPolicy::Parameterized => ctx.param(&self.name("graph/adjacency")),
            GraphPolicy::Similarity => {
                let u = ctx.param(&self.name("similarity/upsilon"))?;
                let v = ctx.param(&self.name("similarity/psi"))?;
                let p = ctx.tape.bmm(f.0, false, u, false)?;
                let q = ctx.tape.bmm(f.0, false, v, false)?;
                let s = ctx.tape.bmm(p, false, q, true)?;
                Ok(ctx.tape.channel_softmax(s))
            }
        }
    }

    /// `F^e = ReLU(A^e F W^e)`.
    pub fn reason<T: Scalar>(&self, ctx: &mut Ctx<T>, f: JointFeatures, adjacency: Var) -> Result<JointFeatures> {
        let we = ctx.param(&self.name("graph/weight"))?;
        graph_reason(ctx, f, adjacency, we)
    }

    /// `(1/N) Σ_k w_ki f^e_k` laid out as `(B, H, W, C)`, before ρ.
    pub fn context_pre<T: Scalar>(&self, ctx: &mut Ctx<T>, fe: JointFeatures, w: VotingTensor) -> Result<Var> {
        joint_to_pixel_context(ctx, fe, w)
    }

    /// `c_i = ρ((1/N) Σ_k w_ki f^e_k)`.
    pub fn map_to_pixels<T: Scalar>(&self, ctx: &mut Ctx<T>, fe: JointFeatures, w: VotingTensor) -> Result<(Var, Var)> {
        let pre = self.context_pre(ctx, fe, w)?;
        let c = self.rho.forward(ctx, pre)?;
        Ok((pre, c))
    }

    /// `x̄_i = τ([c_i; x_i])`.
    pub fn enhance<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, context: Var) -> Result<Var> {
        let cat = ctx.tape.concat_channels(context, x)?;
        self.tau.forward(ctx, cat)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<JgrOutput> {
        if !self.reasoning {
            return Err(Error::Validation(format!(
                "{} has graph reasoning disabled",
                self.prefix
            )));
        }
        let weights = self.voting_weights(ctx, x)?;
        let features = self.vote(ctx, x, weights)?;
        let adjacency = self.adjacency(ctx, features)?;
        let evolved = self.reason(ctx, features, adjacency)?;
        let (context_pre, context) = self.map_to_pixels(ctx, evolved, weights)?;
        let augmented = self.enhance(ctx, x, context)?;
        Ok(JgrOutput {
            weights,
            features,
            adjacency,
            evolved,
            context_pre,
            context,
            augmented,
        })
    }

    fn check_features<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<()> {
        let c = ctx.tape.dims(x)[3];
        if c != self.channels {
            return Err(shape_err!("{} expects {} channels, got {c}", self.prefix, self.channels));
        }
        Ok(())
    }
}

/// `ReLU(A F W)` with `A` `(1|B, N, 1, N)`, `F` `(B, N, 1, C)`, `W` `(1, C, 1, C)`.
pub fn graph_reason<T: Scalar>(ctx: &mut Ctx<T>, f: JointFeatures, adjacency: Var, weight: Var) -> Result<JointFeatures> {
    let [_, n, _, c] = ctx.tape.dims(f.0);
    let [_, an, _, am] = ctx.tape.dims(adjacency);
    let [_, wr, _, wc] = ctx.tape.dims(weight);
    if an != n || am != n || wr != c || wc != c {
        return Err(shape_err!(
            "graph reasoning needs {n}x{n} adjacency and {c}x{c} weight, got {an}x{am} and {wr}x{wc}"
        ));
    }
    let af = ctx.tape.bmm(adjacency, false, f.0, false)?;
    let afw = ctx.tape.bmm(af, false, weight, false)?;
    Ok(JointFeatures(ctx.tape.relu(afw)))
}

pub fn joint_to_pixel_context<T: Scalar>(ctx: &mut Ctx<T>, fe: JointFeatures, w: VotingTensor) -> Result<Var> {
    let [b, h, wd, n] = ctx.tape.dims(w.0);
    let c = ctx.tape.dims(fe.0)[3];
    let sum = ctx.tape.bmm(w.0, false, fe.0, false)?;
    let mean = ctx.tape.scale(sum, 1.0 / n as f64);
    ctx.tape.reshape(mean, [b, h, wd, c])
}
