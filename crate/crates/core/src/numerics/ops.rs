//! Forward and backward kernels for the differentiable primitives.
//!
//! Every function here is pure. Activations use the `(B, H, W, C)` layout and
//! convolution kernels are stored as `(kh, kw, cin, cout)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor4};
use crate::error::{shape_err, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding giving `ceil(H / stride)` outputs.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(x: [usize; 4], k: [usize; 4], stride: usize, padding: Padding) -> Result<Self> {
        let [_, in_h, in_w, cin] = x;
        let [kh, kw, kcin, cout] = k;
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be at least 1"));
        }
        if kcin != cin {
            return Err(shape_err!(
                "conv2d input has {cin} channels but kernel expects {kcin}"
            ));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = in_h.div_ceil(stride);
                let ow = in_w.div_ceil(stride);
                let ph = ((oh.saturating_sub(1)) * stride + kh).saturating_sub(in_h);
                let pw = ((ow.saturating_sub(1)) * stride + kw).saturating_sub(in_w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if in_h < kh || in_w < kw {
                    (0, 0, 0, 0)
                } else {
                    ((in_h - kh) / stride + 1, (in_w - kw) / stride + 1, 0, 0)
                }
            }
        };
        if out_h == 0 || out_w == 0 || cout == 0 {
            return Err(shape_err!(
                "conv2d produces an empty output for input {x:?} and kernel {k:?}"
            ));
        }
        Ok(Self {
            in_h,
            in_w,
            out_h,
            out_w,
            kh,
            kw,
            cin,
            cout,
            stride,
            pad_top,
            pad_left,
        })
    }

    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

/// 2-D cross-correlation with optional per-output-channel bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor4<T>> {
    let g = ConvGeometry::new(input.dims(), kernel.dims(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(shape_err!(
                "conv2d bias has {} entries, expected {}",
                b.len(),
                g.cout
            ));
        }
    }
    let batch = input.batch();
    let mut out = Tensor4::zeros([batch, g.out_h, g.out_w, g.cout]);
    let out_item = g.out_h * g.out_w * g.cout;
    let k = kernel.data();
    out.data_mut()
        .par_chunks_mut(out_item)
        .enumerate()
        .for_each(|(b, y)| {
            let x = input.item(b);
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let o = &mut y[(oh * g.out_w + ow) * g.cout..][..g.cout];
                    if let Some(bias) = bias {
                        o.copy_from_slice(bias);
                    }
                    for ky in 0..g.kh {
                        let Some(ih) = g.src(oh, ky, g.pad_top, g.in_h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(iw) = g.src(ow, kx, g.pad_left, g.in_w) else {
                                continue;
                            };
                            let xp = &x[(ih * g.in_w + iw) * g.cin..][..g.cin];
                            let kp = &k[(ky * g.kw + kx) * g.cin * g.cout..][..g.cin * g.cout];
                            for (ci, &xv) in xp.iter().enumerate() {
                                if xv == T::zero() {
                                    continue;
                                }
                                let kr = &kp[ci * g.cout..][..g.cout];
                                for (yo, &kv) in o.iter_mut().zip(kr) {
                                    *yo += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub kernel: Tensor4<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.dims(), kernel.dims(), stride, padding)?;
    let batch = input.batch();
    if grad_out.dims() != [batch, g.out_h, g.out_w, g.cout] {
        return Err(shape_err!(
            "conv2d gradient has dims {:?}, expected {:?}",
            grad_out.dims(),
            [batch, g.out_h, g.out_w, g.cout]
        ));
    }
    let k = kernel.data();
    let klen = kernel.len();
    let mut gx = Tensor4::zeros(input.dims());
    let item = input.item_len();

    // Per-item kernel and bias partials, reduced below in batch order so the
    // result does not depend on scheduling.
    let partials: Vec<(Vec<T>, Vec<T>)> = gx
        .data_mut()
        .par_chunks_mut(item)
        .enumerate()
        .map(|(b, gxi)| {
            let x = input.item(b);
            let gy = grad_out.item(b);
            let mut gk = vec![T::zero(); klen];
            let mut gb = vec![T::zero(); g.cout];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let go = &gy[(oh * g.out_w + ow) * g.cout..][..g.cout];
                    for (acc, &v) in gb.iter_mut().zip(go) {
                        *acc += v;
                    }
                    for ky in 0..g.kh {
                        let Some(ih) = g.src(oh, ky, g.pad_top, g.in_h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(iw) = g.src(ow, kx, g.pad_left, g.in_w) else {
                                continue;
                            };
                            let base = (ih * g.in_w + iw) * g.cin;
                            let koff = (ky * g.kw + kx) * g.cin * g.cout;
                            for ci in 0..g.cin {
                                let kr = &k[koff + ci * g.cout..][..g.cout];
                                let mut dot = T::zero();
                                for (&a, &b) in go.iter().zip(kr) {
                                    dot += a * b;
                                }
                                gxi[base + ci] += dot;
                                let xv = x[base + ci];
                                if xv != T::zero() {
                                    let gkr = &mut gk[koff + ci * g.cout..][..g.cout];
                                    for (acc, &v) in gkr.iter_mut().zip(go) {
                                        *acc += xv * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (gk, gb)
        })
        .collect();

    let mut gk = Tensor4::zeros(kernel.dims());
    let mut gb = vec![T::zero(); g.cout];
    for (pk, pb) in partials {
        for (a, b) in gk.data_mut().iter_mut().zip(pk) {
            *a += b;
        }
        for (a, b) in gb.iter_mut().zip(pb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    })
}

/// Exp-normalizes every channel over its `H * W` positions.
pub fn spatial_softmax<T: Scalar>(logits: &Tensor4<T>) -> Tensor4<T> {
    let [b, h, w, c] = logits.dims();
    let hw = h * w;
    let mut out = Tensor4::zeros(logits.dims());
    let x = logits.data();
    let y = out.data_mut();
    for bi in 0..b {
        let base = bi * hw * c;
        for ch in 0..c {
            let mut max = T::neg_infinity();
            for i in 0..hw {
                max = max.max(x[base + i * c + ch]);
            }
            let mut sum = T::zero();
            for i in 0..hw {
                let e = (x[base + i * c + ch] - max).exp();
                y[base + i * c + ch] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for i in 0..hw {
                y[base + i * c + ch] *= inv;
            }
        }
    }
    out
}

pub fn spatial_softmax_backward<T: Scalar>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let [b, h, w, c] = output.dims();
    let hw = h * w;
    let y = output.data();
    let gy = grad_out.data();
    let mut gx = Tensor4::zeros(output.dims());
    let g = gx.data_mut();
    for bi in 0..b {
        let base = bi * hw * c;
        for ch in 0..c {
            let mut dot = T::zero();
            for i in 0..hw {
                let o = base + i * c + ch;
                dot += gy[o] * y[o];
            }
            for i in 0..hw {
                let o = base + i * c + ch;
                g[o] = y[o] * (gy[o] - dot);
            }
        }
    }
    gx
}

/// Exp-normalizes along the channel axis at every `(b, h, w)` position.
pub fn channel_softmax<T: Scalar>(logits: &Tensor4<T>) -> Tensor4<T> {
    let c = logits.channels();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn channel_softmax_backward<T: Scalar>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let c = output.channels();
    let mut gx = Tensor4::zeros(output.dims());
    for ((g, y), gy) in gx
        .data_mut()
        .chunks_mut(c.max(1))
        .zip(output.data().chunks(c.max(1)))
        .zip(grad_out.data().chunks(c.max(1)))
    {
        let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
        for ((gi, &yi), &gyi) in g.iter_mut().zip(y).zip(gy) {
            *gi = yi * (gyi - dot);
        }
    }
    gx
}

/// Accumulates `op(a) * op(b)` into `c` (`m x n`), where `op` optionally
/// transposes. `a` is `m x k` (or `k x m` when transposed), `b` is `k x n`
/// (or `n x k`).
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Scalar>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == T::zero() {
                        continue;
                    }
                    for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == T::zero() {
                        continue;
                    }
                    for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut dot = T::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        dot += x * y;
                    }
                    c[i * n + j] += dot;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut dot = T::zero();
                    for p in 0..k {
                        dot += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += dot;
                }
            }
        }
    }
}

fn mat_dims<T: Scalar>(t: &Tensor4<T>, trans: bool) -> (usize, usize) {
    let rows = t.height() * t.width();
    let cols = t.channels();
    if trans {
        (cols, rows)
    } else {
        (rows, cols)
    }
}

/// Batched matrix product. Each tensor is read as `batch` matrices of shape
/// `(H * W) x C`; a batch of 1 broadcasts. Output is `(B, m, 1, n)`.
pub fn bmm<T: Scalar>(
    a: &Tensor4<T>,
    trans_a: bool,
    b: &Tensor4<T>,
    trans_b: bool,
) -> Result<Tensor4<T>> {
    let (m, ka) = mat_dims(a, trans_a);
    let (kb, n) = mat_dims(b, trans_b);
    if ka != kb {
        return Err(shape_err!(
            "matmul inner dimensions disagree: {m}x{ka} times {kb}x{n}"
        ));
    }
    let (ba, bb) = (a.batch(), b.batch());
    let batch = if ba == bb || bb == 1 {
        ba
    } else if ba == 1 {
        bb
    } else {
        return Err(shape_err!("matmul batch sizes {ba} and {bb} do not broadcast"));
    };
    let mut out = Tensor4::zeros([batch, m, 1, n]);
    let mn = m * n;
    for i in 0..batch {
        let ai = a.item(if ba == 1 { 0 } else { i });
        let bi = b.item(if bb == 1 { 0 } else { i });
        gemm_acc(ai, trans_a, bi, trans_b, &mut out.data_mut()[i * mn..(i + 1) * mn], m, ka, n);
    }
    Ok(out)
}

/// Plain matrix product of two single matrices.
pub fn matmul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    bmm(a, false, b, false)
}

fn fold_batch<T: Scalar>(g: Tensor4<T>, like: [usize; 4]) -> Result<Tensor4<T>> {
    let per = like[1] * like[2] * like[3];
    if g.batch() == like[0] {
        return g.reshape(like);
    }
    // Broadcast operand: sum the per-item gradients.
    let mut acc = Tensor4::zeros(like);
    for chunk in g.data().chunks(per) {
        for (a, &v) in acc.data_mut().iter_mut().zip(chunk) {
            *a += v;
        }
    }
    Ok(acc)
}

pub fn bmm_backward<T: Scalar>(
    a: &Tensor4<T>,
    trans_a: bool,
    b: &Tensor4<T>,
    trans_b: bool,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let gc = grad_out;
    let (ga, gb) = match (trans_a, trans_b) {
        (false, false) => (bmm(gc, false, b, true)?, bmm(a, true, gc, false)?),
        (true, false) => (bmm(b, false, gc, true)?, bmm(a, false, gc, false)?),
        (false, true) => (bmm(gc, false, b, false)?, bmm(gc, true, a, false)?),
        (true, true) => (bmm(b, true, gc, true)?, bmm(gc, true, a, true)?),
    };
    Ok((fold_batch(ga, a.dims())?, fold_batch(gb, b.dims())?))
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(input: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

fn check_even<T: Scalar>(x: &Tensor4<T>, what: &str) -> Result<()> {
    if !x.height().is_multiple_of(2) || !x.width().is_multiple_of(2) || x.height() == 0 || x.width() == 0 {
        return Err(shape_err!(
            "{what} needs even, nonzero spatial dims, got {}x{}",
            x.height(),
            x.width()
        ));
    }
    Ok(())
}

/// Non-overlapping 2x2 mean.
pub fn avg_pool2<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_even(x, "avg_pool2")?;
    let [b, h, w, c] = x.dims();
    let quarter = T::of(0.25);
    Ok(Tensor4::from_fn([b, h / 2, w / 2, c], |[bi, i, j, ch]| {
        (x.at(bi, 2 * i, 2 * j, ch)
            + x.at(bi, 2 * i, 2 * j + 1, ch)
            + x.at(bi, 2 * i + 1, 2 * j, ch)
            + x.at(bi, 2 * i + 1, 2 * j + 1, ch))
            * quarter
    }))
}

pub fn avg_pool2_backward<T: Scalar>(input_dims: [usize; 4], grad_out: &Tensor4<T>) -> Tensor4<T> {
    let quarter = T::of(0.25);
    Tensor4::from_fn(input_dims, |[b, i, j, c]| grad_out.at(b, i / 2, j / 2, c) * quarter)
}

/// Non-overlapping 2x2 max. Also returns, per output element, the flat
/// index of the winning input element (first maximum in scan order).
pub fn max_pool2<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    check_even(x, "max_pool2")?;
    let [b, h, w, c] = x.dims();
    let mut out = Tensor4::zeros([b, h / 2, w / 2, c]);
    let mut arg = Vec::with_capacity(out.len());
    let mut o = 0;
    for bi in 0..b {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for ch in 0..c {
                    let mut best = x.offset(bi, 2 * i, 2 * j, ch);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = x.offset(bi, 2 * i + di, 2 * j + dj, ch);
                        if x.data()[cand] > x.data()[best] {
                            best = cand;
                        }
                    }
                    out.data_mut()[o] = x.data()[best];
                    arg.push(best);
                    o += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward<T: Scalar>(
    input_dims: [usize; 4],
    argmax: &[usize],
    grad_out: &Tensor4<T>,
) -> Tensor4<T> {
    let mut g = Tensor4::zeros(input_dims);
    for (&src, &v) in argmax.iter().zip(grad_out.data()) {
        g.data_mut()[src] += v;
    }
    g
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [b, h, w, c] = x.dims();
    Tensor4::from_fn([b, 2 * h, 2 * w, c], |[bi, i, j, ch]| x.at(bi, i / 2, j / 2, ch))
}

/// Exact adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor4<T>) -> Tensor4<T> {
    let [b, h, w, c] = grad_out.dims();
    Tensor4::from_fn([b, h / 2, w / 2, c], |[bi, i, j, ch]| {
        grad_out.at(bi, 2 * i, 2 * j, ch)
            + grad_out.at(bi, 2 * i, 2 * j + 1, ch)
            + grad_out.at(bi, 2 * i + 1, 2 * j, ch)
            + grad_out.at(bi, 2 * i + 1, 2 * j + 1, ch)
    })
}

/// Concatenates along channels, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [ba, ha, wa, ca] = a.dims();
    let [bb, hb, wb, cb] = b.dims();
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(shape_err!(
            "cannot concatenate {:?} and {:?} along channels",
            a.dims(),
            b.dims()
        ));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks(ca.max(1)).zip(b.data().chunks(cb.max(1))) {
        out.extend_from_slice(&ra[..ca]);
        out.extend_from_slice(&rb[..cb]);
    }
    Tensor4::from_vec([ba, ha, wa, ca + cb], out)
}

pub fn split_channels<T: Scalar>(g: &Tensor4<T>, first: usize) -> (Tensor4<T>, Tensor4<T>) {
    let [b, h, w, c] = g.dims();
    let second = c - first;
    let mut ga = Vec::with_capacity(b * h * w * first);
    let mut gb = Vec::with_capacity(b * h * w * second);
    for row in g.data().chunks(c.max(1)) {
        ga.extend_from_slice(&row[..first]);
        gb.extend_from_slice(&row[first..]);
    }
    (
        Tensor4::from_vec([b, h, w, first], ga).expect("split lengths"),
        Tensor4::from_vec([b, h, w, second], gb).expect("split lengths"),
    )
}

/// Running mean and (biased) variance per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> NormStats<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub struct NormForward<T> {
    pub output: Tensor4<T>,
    /// Normalized input before the affine transform.
    pub normalized: Tensor4<T>,
    pub inv_std: Vec<T>,
    /// Running statistics after this call; unchanged in eval mode.
    pub running: NormStats<T>,
    /// Statistics used for normalization (batch moments in train mode).
    pub used: NormStats<T>,
}

pub fn batch_norm<T: Scalar>(
    x: &Tensor4<T>,
    scale: &[T],
    shift: &[T],
    mode: NormMode,
    running: &NormStats<T>,
) -> Result<NormForward<T>> {
    let c = x.channels();
    if scale.len() != c || shift.len() != c || running.mean.len() != c || running.var.len() != c {
        return Err(shape_err!(
            "batch_norm over {c} channels got scale {}, shift {}, stats {}/{}",
            scale.len(),
            shift.len(),
            running.mean.len(),
            running.var.len()
        ));
    }
    let count = x.len() / c.max(1);
    let eps = T::of(BN_EPSILON);
    let (mean, var, next) = match mode {
        NormMode::Eval => (running.mean.clone(), running.var.clone(), running.clone()),
        NormMode::Train => {
            let mut mean = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            let n = T::of(count as f64);
            mean.iter_mut().for_each(|m| *m = *m / n);
            let mut var = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s = *s / n);
            let mom = T::of(BN_MOMENTUM);
            let one_minus = T::one() - mom;
            let next = NormStats {
                mean: running
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| mom * r + one_minus * b)
                    .collect(),
                var: running
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| mom * r + one_minus * b)
                    .collect(),
            };
            (mean, var, next)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = x.clone();
    let mut output = x.clone();
    for (nrow, orow) in normalized
        .data_mut()
        .chunks_mut(c)
        .zip(output.data_mut().chunks_mut(c))
    {
        for ch in 0..c {
            let xh = (nrow[ch] - mean[ch]) * inv_std[ch];
            nrow[ch] = xh;
            orow[ch] = scale[ch] * xh + shift[ch];
        }
    }
    Ok(NormForward {
        output,
        normalized,
        inv_std,
        running: next,
        used: NormStats { mean, var },
    })
}

pub struct NormGrads<T> {
    pub input: Tensor4<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    normalized: &Tensor4<T>,
    inv_std: &[T],
    scale: &[T],
    mode: NormMode,
    grad_out: &Tensor4<T>,
) -> NormGrads<T> {
    let c = normalized.channels();
    let count = normalized.len() / c.max(1);
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for (nrow, grow) in normalized.data().chunks(c).zip(grad_out.data().chunks(c)) {
        for ch in 0..c {
            gshift[ch] += grow[ch];
            gscale[ch] += grow[ch] * nrow[ch];
        }
    }
    let mut gx = grad_out.clone();
    match mode {
        NormMode::Eval => {
            for row in gx.data_mut().chunks_mut(c) {
                for ch in 0..c {
                    row[ch] *= scale[ch] * inv_std[ch];
                }
            }
        }
        NormMode::Train => {
            let n = T::of(count as f64);
            for (row, nrow) in gx.data_mut().chunks_mut(c).zip(normalized.data().chunks(c)) {
                for ch in 0..c {
                    let k = scale[ch] * inv_std[ch] / n;
                    row[ch] = k * (n * row[ch] - gshift[ch] - nrow[ch] * gscale[ch]);
                }
            }
        }
    }
    NormGrads {
        input: gx,
        scale: gscale,
        shift: gshift,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_1x1_kernel_is_identity() {
        let x = Tensor4::from_fn([2, 3, 4, 3], |[b, h, w, c]| (b * 31 + h * 7 + w * 3 + c) as f64 * 0.1 - 1.0);
        let k = Tensor4::<f64>::identity(3).reshape([1, 1, 3, 3]).unwrap();
        let y = conv2d(&x, &k, Some(&[0.0; 3]), 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_input_3x3_ones_valid() {
        let c = 1.75;
        let x = Tensor4::full([1, 5, 6, 1], c);
        let k = Tensor4::full([3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, None, 1, Padding::Valid).unwrap();
        assert_eq!(y.dims(), [1, 3, 4, 1]);
        // Direct summation: nine copies of c.
        let expected: f64 = (0..9).map(|_| c).sum();
        assert!(y.data().iter().all(|&v| v == expected));
    }

    #[test]
    fn zero_kernel_and_bias_annihilate() {
        let x = Tensor4::from_fn([1, 4, 4, 2], |[_, h, w, c]| (h + w + c) as f64);
        let k = Tensor4::zeros([3, 3, 2, 5]);
        let y = conv2d(&x, &k, Some(&[0.0; 5]), 2, Padding::Same).unwrap();
        assert_eq!(y.dims(), [1, 2, 2, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor4::<f64>::zeros([1, 4, 4, 2]);
        let k = Tensor4::zeros([1, 1, 3, 1]);
        assert!(matches!(conv2d(&x, &k, None, 1, Padding::Same), Err(crate::Error::Shape(_))));
        let k = Tensor4::zeros([5, 5, 2, 1]);
        assert!(matches!(conv2d(&x, &k, None, 1, Padding::Valid), Err(crate::Error::Shape(_))));
        let k = Tensor4::zeros([1, 1, 2, 1]);
        assert!(conv2d(&x, &k, None, 0, Padding::Same).is_err());
    }

    #[test]
    fn same_padding_output_is_ceil() {
        let x = Tensor4::<f64>::zeros([1, 7, 5, 1]);
        let k = Tensor4::zeros([3, 3, 1, 1]);
        let y = conv2d(&x, &k, None, 2, Padding::Same).unwrap();
        assert_eq!(y.dims(), [1, 4, 3, 1]);
    }

    #[test]
    fn spatial_softmax_examples() {
        let y = spatial_softmax(&Tensor4::<f64>::zeros([1, 2, 2, 1]));
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let y = spatial_softmax(&t([1, 2, 2, 1], &[0.0, 3f64.ln(), 0.0, 0.0]));
        let expected = [1.0 / 6.0, 0.5, 1.0 / 6.0, 1.0 / 6.0];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }

        let y = spatial_softmax(&t([1, 2, 2, 1], &[100.0, 0.0, 0.0, 0.0]));
        assert!(y.data()[0] >= 1.0 - 3e-43);
        assert!(y.data()[1..].iter().all(|&v| v <= (-43f64).exp()));
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor4::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let swap = Tensor4::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(matmul(&a, &swap).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(matmul(&a, &Tensor4::identity(2)).unwrap(), a);
        let z = matmul(&a, &Tensor4::zeros([1, 2, 1, 3])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let bad = Tensor4::<f64>::zeros([1, 3, 1, 3]);
        assert!(matches!(matmul(&a, &bad), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor4::from_fn([1, 3, 1, 2], |[_, i, _, j]| (i * 2 + j) as f64 + 0.5);
        let b = Tensor4::from_fn([1, 3, 1, 4], |[_, i, _, j]| (i as f64) - (j as f64) * 0.25);
        let at = Tensor4::from_fn([1, 2, 1, 3], |[_, i, _, j]| a.at(0, j, 0, i));
        let bt = Tensor4::from_fn([1, 4, 1, 3], |[_, i, _, j]| b.at(0, j, 0, i));
        let reference = matmul(&at, &b).unwrap();
        assert_eq!(bmm(&a, true, &b, false).unwrap(), reference);
        assert_eq!(bmm(&at, false, &bt, true).unwrap(), reference);
        assert_eq!(bmm(&a, true, &bt, true).unwrap(), reference);
    }

    #[test]
    fn relu_examples() {
        let y = relu(&t([1, 1, 1, 3], &[-1.0, 0.0, 2.5]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.5]);
        let g = relu_backward(&t([1, 1, 1, 3], &[-1.0, 0.0, 2.5]), &t([1, 1, 1, 3], &[1.0, 1.0, 1.0]));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pooling_examples() {
        let y = avg_pool2(&t([1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let c = Tensor4::full([1, 4, 4, 2], 3.0);
        assert_eq!(avg_pool2(&c).unwrap(), Tensor4::full([1, 2, 2, 2], 3.0));
        assert_eq!(upsample2(&avg_pool2(&c).unwrap()), c);
        assert!(matches!(avg_pool2(&Tensor4::<f64>::zeros([1, 3, 4, 1])), Err(crate::Error::Shape(_))));
        let (m, arg) = max_pool2(&t([1, 2, 2, 1], &[1.0, 4.0, 4.0, 2.0])).unwrap();
        assert_eq!(m.data(), &[4.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn upsample_examples() {
        let y = upsample2(&t([1, 1, 1, 1], &[7.0]));
        assert_eq!(y, Tensor4::full([1, 2, 2, 1], 7.0));
        let y = upsample2(&t([1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn batch_norm_examples() {
        let x = Tensor4::from_fn([2, 3, 3, 2], |[b, h, w, c]| (b * 9 + h * 3 + w) as f64 * (c as f64 + 1.0) + 4.0);
        let id = NormStats::identity(2);
        let y = batch_norm(&x, &[1.0, 1.0], &[0.0, 0.0], NormMode::Eval, &id).unwrap();
        // Eval with unit stats only divides by sqrt(1 + eps).
        let s = 1.0 / (1.0 + BN_EPSILON).sqrt();
        assert!(y.output.max_abs_diff(&x.map(|v| v * s)) < 1e-12);

        let y = batch_norm(&x, &[1.0, 1.0], &[0.0, 0.0], NormMode::Train, &id).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = y.normalized.data().iter().skip(ch).step_by(2).copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
        assert_ne!(y.running, id);

        let y = batch_norm(&x, &[0.0, 0.0], &[0.3, -2.0], NormMode::Train, &id).unwrap();
        for (i, &v) in y.output.data().iter().enumerate() {
            assert_eq!(v, if i % 2 == 0 { 0.3 } else { -2.0 });
        }
        assert!(batch_norm(&x, &[1.0], &[0.0], NormMode::Eval, &id).is_err());
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor4::from_fn([1, 2, 2, 2], |[_, h, w, c]| (h * 4 + w * 2 + c) as f64);
        let b = Tensor4::from_fn([1, 2, 2, 3], |[_, h, w, c]| -((h * 6 + w * 3 + c) as f64));
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.channels(), 5);
        assert_eq!(cat.at(0, 1, 0, 1), a.at(0, 1, 0, 1));
        assert_eq!(cat.at(0, 1, 0, 3), b.at(0, 1, 0, 1));
        let (ga, gb) = split_channels(&cat, 2);
        assert_eq!((ga, gb), (a, b));
    }
}
