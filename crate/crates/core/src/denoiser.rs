//! Per-feature MLP noise predictor with U-Net style residual and skip structure.
//!
//! Every feature vector is processed independently; there is no coupling
//! between rows of a batch. Parameters live in one flat buffer described by a
//! [`Layout`], so gradients, optimizer state and checkpoints all share the same
//! indexing.
//!
//! Dataflow for one vector `x` at timestep `t`:
//!
//! ```text
//! h = input_proj(x)
//! for each input block j:   h = block_j(h);        skip_j = h
//! for each output block i:  h = block_i(h, skip_{n-1-i})
//! out = output_proj(h)
//! ```
//!
//! and a residual block computes
//! `h + linear2(silu(norm2(linear1(silu(norm1(in))) + t)))`, where `in` is `h`,
//! `[h, skip]` (concatenating skips) or `h + skip` (additive skips).

use std::ops::Range;
use std::sync::Arc;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::{self, Execution, CHUNK_ROWS};

pub const GROUPNORM_EPS: f64 = 1e-5;

/// Scalar type the network can run in. `f32` for training and inference,
/// `f64` for gradient verification.
pub trait Real: Float + Send + Sync + std::iter::Sum + std::fmt::Debug + 'static {
    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipMode {
    Concat,
    Add,
}

impl SkipMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipMode::Concat => "concat",
            SkipMode::Add => "add",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(SkipMode::Concat),
            "add" => Ok(SkipMode::Add),
            other => Err(Error::invalid(format!("unknown skip mode {other:?}"))),
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Channels per group below which the default group count is reduced.
pub const MIN_GROUP_SIZE: usize = 4;

/// Largest divisor of `gcd(32, hidden)` that leaves at least
/// [`MIN_GROUP_SIZE`] channels per group, or 1. A one-channel group
/// normalizes every activation to zero, so the plain gcd rule would make
/// every block constant for `hidden <= 32`.
pub fn default_groups(hidden: usize) -> usize {
    let g = gcd(32, hidden.max(1));
    (1..=g)
        .rev()
        .find(|d| g % d == 0 && hidden / d >= MIN_GROUP_SIZE)
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_input_blocks: usize,
    pub n_output_blocks: usize,
    pub groupnorm_groups: usize,
    pub skip: SkipMode,
}

impl DenoiserConfig {
    /// Defaults: hidden width equal to the input width, 6 + 6 blocks,
    /// [`default_groups`] norm groups, concatenating skips.
    pub fn new(input_dim: usize) -> Self {
        Self::with_hidden(input_dim, input_dim, 6)
    }

    pub fn with_hidden(input_dim: usize, hidden_dim: usize, blocks: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            n_input_blocks: blocks,
            n_output_blocks: blocks,
            groupnorm_groups: default_groups(hidden_dim),
            skip: SkipMode::Concat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("input_dim and hidden_dim must be >= 1"));
        }
        if self.n_input_blocks != self.n_output_blocks {
            return Err(Error::invalid(format!(
                "skip pairing needs n_input_blocks == n_output_blocks, got {} and {}",
                self.n_input_blocks, self.n_output_blocks
            )));
        }
        if self.groupnorm_groups == 0 || self.hidden_dim % self.groupnorm_groups != 0 {
            return Err(Error::invalid(format!(
                "groupnorm_groups {} must divide hidden_dim {}",
                self.groupnorm_groups, self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// What a parameter tensor is, which decides its initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    /// Final linear of a residual block or the output projection.
    ZeroWeight,
    ZeroBias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub role: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
    /// Fan-in for weight and bias initialization.
    pub fan_in: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct LinearSlots {
    weight: Range<usize>,
    bias: Range<usize>,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug, Clone)]
struct NormSlots {
    scale: Range<usize>,
    shift: Range<usize>,
    dim: usize,
}

#[derive(Debug, Clone)]
struct BlockSlots {
    norm1: NormSlots,
    linear1: LinearSlots,
    norm2: NormSlots,
    linear2: LinearSlots,
    /// Index of the input block whose output is fed in as a skip.
    skip_from: Option<usize>,
}

/// Tensor table plus resolved per-layer offsets for a configuration.
#[derive(Debug, Clone)]
pub struct Layout {
    slots: Vec<TensorSlot>,
    input_proj: LinearSlots,
    blocks: Vec<BlockSlots>,
    output_proj: LinearSlots,
    total: usize,
}

struct LayoutBuilder {
    slots: Vec<TensorSlot>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, role: String, shape: Vec<usize>, kind: TensorKind, fan_in: usize) -> Range<usize> {
        let len: usize = shape.iter().product();
        let offset = self.total;
        self.slots.push(TensorSlot {
            role,
            shape,
            offset,
            kind,
            fan_in,
        });
        self.total += len;
        offset..offset + len
    }

    fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize, zero: bool) -> LinearSlots {
        let (wk, bk) = if zero {
            (TensorKind::ZeroWeight, TensorKind::ZeroBias)
        } else {
            (TensorKind::Weight, TensorKind::Bias)
        };
        let weight = self.push(format!("{name}_weight"), vec![in_dim, out_dim], wk, in_dim);
        let bias = self.push(format!("{name}_bias"), vec![out_dim], bk, in_dim);
        LinearSlots {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> NormSlots {
        let scale = self.push(format!("{name}_scale"), vec![dim], TensorKind::NormScale, dim);
        let shift = self.push(format!("{name}_shift"), vec![dim], TensorKind::NormShift, dim);
        NormSlots { scale, shift, dim }
    }
}

impl Layout {
    pub fn new(cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, h) = (cfg.input_dim, cfg.hidden_dim);
        let mut b = LayoutBuilder {
            slots: Vec::new(),
            total: 0,
        };
        let input_proj = b.linear("input_proj", c, h, false);
        let mut blocks = Vec::new();
        let n = cfg.n_input_blocks;
        for i in 0..n + cfg.n_output_blocks {
            let (name, skip_from) = if i < n {
                (format!("in{i:02}"), None)
            } else {
                (format!("out{:02}", i - n), Some(n - 1 - (i - n)))
            };
            let in_dim = match (skip_from, cfg.skip) {
                (Some(_), SkipMode::Concat) => 2 * h,
                _ => h,
            };
            blocks.push(BlockSlots {
                norm1: b.norm(&format!("{name}_norm1"), in_dim),
                linear1: b.linear(&format!("{name}_linear1"), in_dim, h, false),
                norm2: b.norm(&format!("{name}_norm2"), h),
                linear2: b.linear(&format!("{name}_linear2"), h, h, true),
                skip_from,
            });
        }
        let output_proj = b.linear("output_proj", h, c, true);
        Ok(Self {
            slots: b.slots,
            input_proj,
            blocks,
            output_proj,
            total: b.total,
        })
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// All weights of the network in one flat buffer.
#[derive(Debug, Clone)]
pub struct DenoiserParams<T = f32> {
    cfg: DenoiserConfig,
    layout: Arc<Layout>,
    values: Vec<T>,
}

// The layout is a pure function of the configuration.
impl<T: PartialEq> PartialEq for DenoiserParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.values == other.values
    }
}

/// Gradients, congruent with [`DenoiserParams`] of the same configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T = f32> {
    pub values: Vec<T>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + b;
        }
    }
}

impl DenoiserParams<f32> {
    /// Fan-in scaled uniform weights, unit norm scales, zero shifts, and zero
    /// final linears so that every residual block starts as the identity and
    /// the whole network outputs zero.
    pub fn init<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        let layout = Arc::new(Layout::new(cfg)?);
        let mut values = vec![0.0f32; layout.total];
        for slot in layout.slots() {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for v in &mut values[slot.range()] {
                *v = match slot.kind {
                    TensorKind::Weight | TensorKind::Bias => rng.random_range(-bound..bound) as f32,
                    TensorKind::NormScale => 1.0,
                    TensorKind::ZeroWeight | TensorKind::ZeroBias | TensorKind::NormShift => 0.0,
                };
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            values,
        })
    }
}

impl<T: Real> DenoiserParams<T> {
    pub fn from_values(cfg: &DenoiserConfig, values: Vec<T>) -> Result<Self> {
        let layout = Arc::new(Layout::new(cfg)?);
        if values.len() != layout.total {
            return Err(Error::shape(format!(
                "configuration needs {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            values,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn tensor(&self, index: usize) -> &[T] {
        &self.values[self.layout.slots[index].range()]
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            cfg: self.cfg.clone(),
            layout: Arc::clone(&self.layout),
            values: self
                .values
                .iter()
                .map(|&v| U::of(v.to_f64().expect("finite")))
                .collect(),
        }
    }

    pub fn zero_grads(&self) -> ParamGrads<T> {
        ParamGrads::zeros(self.values.len())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// True when the output projection is identically zero, i.e. the network
    /// predicts zero noise for every input.
    pub fn output_is_zero(&self) -> bool {
        let o = &self.layout.output_proj;
        self.values[o.weight.clone()]
            .iter()
            .chain(&self.values[o.bias.clone()])
            .all(|v| v.is_zero())
    }

    fn check_batch(&self, x: &[T], timesteps: &[usize]) -> Result<usize> {
        let c = self.cfg.input_dim;
        if x.len() != timesteps.len() * c {
            return Err(Error::shape(format!(
                "batch of {} timesteps needs {} input values for C = {c}, got {}",
                timesteps.len(),
                timesteps.len() * c,
                x.len()
            )));
        }
        if timesteps.contains(&0) {
            return Err(Error::invalid("timesteps are 1-based"));
        }
        Ok(timesteps.len())
    }

    pub fn forward(&self, x_t: &[T], t: usize) -> Result<Vec<T>> {
        self.forward_batch(x_t, &[t], Execution::Sequential)
    }

    /// Row-major `[N, C]` in, `[N, C]` out.
    pub fn forward_batch(&self, x: &[T], timesteps: &[usize], exec: Execution) -> Result<Vec<T>> {
        let n = self.check_batch(x, timesteps)?;
        let c = self.cfg.input_dim;
        let mut out = vec![T::zero(); n * c];
        exec::for_each_chunk_mut(exec, &mut out, c, CHUNK_ROWS, |rows, chunk| {
            let xs = &x[rows.start * c..rows.end * c];
            let tape = self.forward_chunk(xs, &timesteps[rows]);
            chunk.copy_from_slice(&tape.output);
        });
        Ok(out)
    }

    /// Gradient of `<forward(x_t, t), upstream>` with respect to the
    /// parameters and to `x_t`.
    pub fn backward(&self, x_t: &[T], t: usize, upstream: &[T]) -> Result<(ParamGrads<T>, Vec<T>)> {
        self.backward_batch(x_t, &[t], upstream, Execution::Sequential)
    }

    /// Batched [`Self::backward`]; parameter gradients are summed over rows.
    pub fn backward_batch(
        &self,
        x: &[T],
        timesteps: &[usize],
        upstream: &[T],
        exec: Execution,
    ) -> Result<(ParamGrads<T>, Vec<T>)> {
        let n = self.check_batch(x, timesteps)?;
        if upstream.len() != x.len() {
            return Err(Error::shape("upstream gradient must match the output shape"));
        }
        let c = self.cfg.input_dim;
        let parts = exec::map_chunks(exec, n, CHUNK_ROWS, |rows| {
            let span = rows.start * c..rows.end * c;
            let tape = self.forward_chunk(&x[span.clone()], &timesteps[rows]);
            let mut grads = self.zero_grads();
            let dx = self.backward_chunk(&tape, &upstream[span], &mut grads);
            (grads, dx)
        });
        Ok(merge(self.zero_grads(), parts))
    }

    /// Forward pass, per-row loss and upstream gradient from `loss_fn`, and
    /// backward pass, fused per chunk. `loss_fn(rows, output, d_output)` fills
    /// `d_output` and returns the chunk's loss contribution. Returns the loss
    /// summed in chunk order and the summed parameter gradients.
    pub fn value_and_grad<F>(
        &self,
        x: &[T],
        timesteps: &[usize],
        exec: Execution,
        loss_fn: F,
    ) -> Result<(f64, ParamGrads<T>)>
    where
        F: Fn(Range<usize>, &[T], &mut [T]) -> f64 + Sync + Send,
    {
        let n = self.check_batch(x, timesteps)?;
        let c = self.cfg.input_dim;
        let parts = exec::map_chunks(exec, n, CHUNK_ROWS, |rows| {
            let span = rows.start * c..rows.end * c;
            let tape = self.forward_chunk(&x[span], &timesteps[rows.clone()]);
            let mut upstream = vec![T::zero(); tape.output.len()];
            let loss = loss_fn(rows, &tape.output, &mut upstream);
            let mut grads = self.zero_grads();
            self.backward_chunk(&tape, &upstream, &mut grads);
            (loss, grads)
        });
        let mut total = self.zero_grads();
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            total.add_assign(&g);
        }
        Ok((loss, total))
    }

    fn forward_chunk(&self, x: &[T], timesteps: &[usize]) -> ChunkTape<T> {
        let p = &self.values;
        let l = &*self.layout;
        let n = timesteps.len();
        let h_dim = self.cfg.hidden_dim;
        let groups = self.cfg.groupnorm_groups;
        let tvals: Vec<T> = timesteps.iter().map(|&t| T::of(t as f64)).collect();

        let mut h = vec![T::zero(); n * h_dim];
        linear_forward(p, &l.input_proj, x, &mut h, n);

        let mut blocks = Vec::with_capacity(l.blocks.len());
        let mut skips: Vec<Vec<T>> = Vec::with_capacity(self.cfg.n_input_blocks);
        for bs in &l.blocks {
            let input = match bs.skip_from {
                None => h.clone(),
                Some(j) => match self.cfg.skip {
                    SkipMode::Concat => concat_rows(&h, &skips[j], n, h_dim),
                    SkipMode::Add => h.iter().zip(&skips[j]).map(|(&a, &b)| a + b).collect(),
                },
            };
            let bt = block_forward(p, bs, input, &tvals, n, groups);
            for (hv, &r) in h.iter_mut().zip(&bt.residual) {
                *hv = *hv + r;
            }
            blocks.push(bt);
            if bs.skip_from.is_none() {
                skips.push(h.clone());
            }
        }
        let mut output = vec![T::zero(); n * self.cfg.input_dim];
        linear_forward(p, &l.output_proj, &h, &mut output, n);
        ChunkTape {
            n,
            x: x.to_vec(),
            blocks,
            h_final: h,
            output,
        }
    }

    fn backward_chunk(&self, tape: &ChunkTape<T>, upstream: &[T], grads: &mut ParamGrads<T>) -> Vec<T> {
        let p = &self.values;
        let l = &*self.layout;
        let n = tape.n;
        let h_dim = self.cfg.hidden_dim;
        let groups = self.cfg.groupnorm_groups;
        let g = &mut grads.values;

        let mut dh = vec![T::zero(); n * h_dim];
        linear_backward(p, g, &l.output_proj, &tape.h_final, upstream, Some(&mut dh), n);

        let n_in = self.cfg.n_input_blocks;
        let mut d_skips: Vec<Vec<T>> = vec![vec![T::zero(); n * h_dim]; n_in];
        for (bi, (bs, bt)) in l.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            if bi < n_in {
                // the output of input block `bi` also fed a skip
                for (d, &s) in dh.iter_mut().zip(&d_skips[bi]) {
                    *d = *d + s;
                }
            }
            let d_in = block_backward(p, g, bs, bt, &dh, n, groups);
            match bs.skip_from {
                None => {
                    for (d, &di) in dh.iter_mut().zip(&d_in) {
                        *d = *d + di;
                    }
                }
                Some(j) => match self.cfg.skip {
                    SkipMode::Concat => {
                        let ds = &mut d_skips[j];
                        for r in 0..n {
                            let src = &d_in[r * 2 * h_dim..(r + 1) * 2 * h_dim];
                            for k in 0..h_dim {
                                dh[r * h_dim + k] = dh[r * h_dim + k] + src[k];
                                ds[r * h_dim + k] = ds[r * h_dim + k] + src[h_dim + k];
                            }
                        }
                    }
                    SkipMode::Add => {
                        let ds = &mut d_skips[j];
                        for ((d, s), &di) in dh.iter_mut().zip(ds.iter_mut()).zip(&d_in) {
                            *d = *d + di;
                            *s = *s + di;
                        }
                    }
                },
            }
        }
        let mut dx = vec![T::zero(); n * self.cfg.input_dim];
        linear_backward(p, g, &l.input_proj, &tape.x, &dh, Some(&mut dx), n);
        dx
    }
}

fn merge<T: Real>(mut total: ParamGrads<T>, parts: Vec<(ParamGrads<T>, Vec<T>)>) -> (ParamGrads<T>, Vec<T>) {
    let mut dx = Vec::new();
    for (g, d) in parts {
        total.add_assign(&g);
        dx.extend(d);
    }
    (total, dx)
}

struct ChunkTape<T> {
    n: usize,
    x: Vec<T>,
    blocks: Vec<BlockTape<T>>,
    h_final: Vec<T>,
    output: Vec<T>,
}

struct BlockTape<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    act1: Vec<T>,
    sig1: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    act2: Vec<T>,
    sig2: Vec<T>,
    residual: Vec<T>,
}

fn concat_rows<T: Real>(a: &[T], b: &[T], n: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(2 * n * d);
    for r in 0..n {
        out.extend_from_slice(&a[r * d..(r + 1) * d]);
        out.extend_from_slice(&b[r * d..(r + 1) * d]);
    }
    out
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Derivative of silu at `x` given `s = sigmoid(x)`.
fn silu_grad<T: Real>(x: T, s: T) -> T {
    s * (T::one() + x * (T::one() - s))
}

/// `out[r] = bias + x[r] * W` with `W` stored `[in, out]`.
fn linear_forward<T: Real>(p: &[T], ls: &LinearSlots, x: &[T], out: &mut [T], n: usize) {
    let w = &p[ls.weight.clone()];
    let b = &p[ls.bias.clone()];
    let (id, od) = (ls.in_dim, ls.out_dim);
    for r in 0..n {
        let o = &mut out[r * od..(r + 1) * od];
        o.copy_from_slice(b);
        for (k, &xv) in x[r * id..(r + 1) * id].iter().enumerate() {
            let wr = &w[k * od..(k + 1) * od];
            for (ov, &wv) in o.iter_mut().zip(wr) {
                *ov = *ov + xv * wv;
            }
        }
    }
}

fn linear_backward<T: Real>(
    p: &[T],
    g: &mut [T],
    ls: &LinearSlots,
    x: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    n: usize,
) {
    let (id, od) = (ls.in_dim, ls.out_dim);
    // transposed so the input gradient is a sum of contiguous rows
    let wt: Vec<T> = dx
        .as_ref()
        .map(|_| {
            let w = &p[ls.weight.clone()];
            (0..od).flat_map(|o| (0..id).map(move |k| w[k * od + o])).collect()
        })
        .unwrap_or_default();
    let (gw, gb) = {
        let (lo, hi) = g.split_at_mut(ls.bias.start);
        (&mut lo[ls.weight.clone()], &mut hi[..od])
    };
    for r in 0..n {
        let d = &dout[r * od..(r + 1) * od];
        let xr = &x[r * id..(r + 1) * id];
        for (b, &dv) in gb.iter_mut().zip(d) {
            *b = *b + dv;
        }
        for (gr, &xv) in gw.chunks_exact_mut(od).zip(xr) {
            for (gv, &dv) in gr.iter_mut().zip(d) {
                *gv = *gv + xv * dv;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxr = &mut dx[r * id..(r + 1) * id];
            for (wr, &dv) in wt.chunks_exact(id).zip(d) {
                for (dxv, &wv) in dxr.iter_mut().zip(wr) {
                    *dxv = *dxv + wv * dv;
                }
            }
        }
    }
}

/// Normalize each group of each row; returns `(xhat, rstd)` with `rstd`
/// stored `[n, groups]`.
pub(crate) fn group_norm<T: Real>(x: &[T], n: usize, dim: usize, groups: usize) -> (Vec<T>, Vec<T>) {
    let m = dim / groups;
    let inv_m = T::of(1.0 / m as f64);
    let eps = T::of(GROUPNORM_EPS);
    let mut xhat = vec![T::zero(); n * dim];
    let mut rstd = vec![T::zero(); n * groups];
    for r in 0..n {
        for gi in 0..groups {
            let s = r * dim + gi * m;
            let xs = &x[s..s + m];
            let mean = xs.iter().copied().sum::<T>() * inv_m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r * groups + gi] = rs;
            for (o, &v) in xhat[s..s + m].iter_mut().zip(xs) {
                *o = (v - mean) * rs;
            }
        }
    }
    (xhat, rstd)
}

/// `silu(xhat * scale + shift)` per row, plus the sigmoid for backward.
fn affine_silu<T: Real>(p: &[T], ns: &NormSlots, xhat: &[T]) -> (Vec<T>, Vec<T>) {
    let scale = &p[ns.scale.clone()];
    let shift = &p[ns.shift.clone()];
    let mut act = vec![T::zero(); xhat.len()];
    let mut sig = vec![T::zero(); xhat.len()];
    for ((row, ar), sr) in xhat
        .chunks_exact(ns.dim)
        .zip(act.chunks_exact_mut(ns.dim))
        .zip(sig.chunks_exact_mut(ns.dim))
    {
        for (k, &xh) in row.iter().enumerate() {
            let u = xh * scale[k] + shift[k];
            sr[k] = sigmoid(u);
            ar[k] = u * sr[k];
        }
    }
    (act, sig)
}

fn block_forward<T: Real>(
    p: &[T],
    bs: &BlockSlots,
    input: Vec<T>,
    tvals: &[T],
    n: usize,
    groups: usize,
) -> BlockTape<T> {
    let h_dim = bs.linear1.out_dim;
    let (xhat1, rstd1) = group_norm(&input, n, bs.norm1.dim, groups);
    let (act1, sig1) = affine_silu(p, &bs.norm1, &xhat1);
    let mut z = vec![T::zero(); n * h_dim];
    linear_forward(p, &bs.linear1, &act1, &mut z, n);
    for (row, &t) in z.chunks_exact_mut(h_dim).zip(tvals) {
        for v in row {
            *v = *v + t;
        }
    }
    let (xhat2, rstd2) = group_norm(&z, n, h_dim, groups);
    let (act2, sig2) = affine_silu(p, &bs.norm2, &xhat2);
    let mut residual = vec![T::zero(); n * h_dim];
    linear_forward(p, &bs.linear2, &act2, &mut residual, n);
    BlockTape {
        xhat1,
        rstd1,
        act1,
        sig1,
        xhat2,
        rstd2,
        act2,
        sig2,
        residual,
    }
}

/// Backward through `silu(norm(x))` given the gradient at the activation.
fn norm_silu_backward<T: Real>(
    p: &[T],
    g: &mut [T],
    ns: &NormSlots,
    xhat: &[T],
    rstd: &[T],
    sig: &[T],
    d_act: &[T],
    n: usize,
    groups: usize,
) -> Vec<T> {
    let dim = ns.dim;
    let m = dim / groups;
    let inv_m = T::of(1.0 / m as f64);
    let scale = &p[ns.scale.clone()];
    let shift = &p[ns.shift.clone()];
    let mut dx = vec![T::zero(); n * dim];
    let mut dxhat = vec![T::zero(); dim];
    for r in 0..n {
        let xr = &xhat[r * dim..(r + 1) * dim];
        let dr = &d_act[r * dim..(r + 1) * dim];
        for k in 0..dim {
            let u = xr[k] * scale[k] + shift[k];
            let du = dr[k] * silu_grad(u, sig[r * dim + k]);
            g[ns.scale.start + k] = g[ns.scale.start + k] + du * xr[k];
            g[ns.shift.start + k] = g[ns.shift.start + k] + du;
            dxhat[k] = du * scale[k];
        }
        for gi in 0..groups {
            let s = gi * m;
            let rs = rstd[r * groups + gi];
            let sum_d: T = dxhat[s..s + m].iter().copied().sum();
            let sum_dx: T = dxhat[s..s + m]
                .iter()
                .zip(&xr[s..s + m])
                .map(|(&a, &b)| a * b)
                .sum();
            for k in s..s + m {
                dx[r * dim + k] = rs * (dxhat[k] - inv_m * sum_d - xr[k] * inv_m * sum_dx);
            }
        }
    }
    dx
}

fn block_backward<T: Real>(
    p: &[T],
    g: &mut [T],
    bs: &BlockSlots,
    bt: &BlockTape<T>,
    d_out: &[T],
    n: usize,
    groups: usize,
) -> Vec<T> {
    let h_dim = bs.linear1.out_dim;
    let mut d_act2 = vec![T::zero(); n * h_dim];
    linear_backward(p, g, &bs.linear2, &bt.act2, d_out, Some(&mut d_act2), n);
    let dz = norm_silu_backward(p, g, &bs.norm2, &bt.xhat2, &bt.rstd2, &bt.sig2, &d_act2, n, groups);
    let mut d_act1 = vec![T::zero(); n * bs.norm1.dim];
    linear_backward(p, g, &bs.linear1, &bt.act1, &dz, Some(&mut d_act1), n);
    norm_silu_backward(p, g, &bs.norm1, &bt.xhat1, &bt.rstd1, &bt.sig1, &d_act1, n, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig::with_hidden(4, 4, 1)
    }

    /// Random parameters everywhere, including the zero-initialized tensors.
    fn random_params(cfg: &DenoiserConfig, seed: u64) -> DenoiserParams<f64> {
        let mut rng = seeded(seed);
        let layout = Layout::new(cfg).unwrap();
        let values = layout
            .slots()
            .iter()
            .flat_map(|s| {
                let kind = s.kind;
                (0..s.len()).map(|_| match kind {
                    TensorKind::NormScale => rng.random_range(0.5..1.5),
                    _ => rng.random_range(-1.0..1.0),
                }).collect::<Vec<_>>()
            })
            .collect();
        DenoiserParams::from_values(cfg, values).unwrap()
    }

    #[test]
    fn default_groups_keep_several_channels() {
        assert_eq!(default_groups(384), 32);
        assert_eq!(default_groups(768), 32);
        assert_eq!(default_groups(64), 16);
        assert_eq!(default_groups(16), 4);
        assert_eq!(default_groups(4), 1);
        assert_eq!(default_groups(6), 1);
        assert_eq!(default_groups(24), 4);
    }

    #[test]
    fn zero_init_outputs_zero() {
        let cfg = DenoiserConfig::new(8);
        let p = DenoiserParams::init(&cfg, &mut seeded(1)).unwrap();
        assert!(p.output_is_zero());
        for t in [1, 10, 1000] {
            let out = p.forward(&[0.3, -1.0, 2.0, 0.0, 5.0, 1.0, -2.0, 0.1], t).unwrap();
            assert!(out.iter().all(|&v| v == 0.0));
        }
        // non-final weights are random
        assert!(p.tensor(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = DenoiserConfig::new(8);
        let a = DenoiserParams::init(&cfg, &mut seeded(5)).unwrap();
        let b = DenoiserParams::init(&cfg, &mut seeded(5)).unwrap();
        let c = DenoiserParams::init(&cfg, &mut seeded(6)).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn config_validation() {
        let mut cfg = DenoiserConfig::new(16);
        assert_eq!(cfg.groupnorm_groups, 4);
        assert_eq!(DenoiserConfig::new(48).groupnorm_groups, 8);
        assert_eq!(DenoiserConfig::new(64).groupnorm_groups, 16);
        cfg.n_output_blocks = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = DenoiserConfig::new(16);
        cfg.groupnorm_groups = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layout_shapes() {
        let cfg = DenoiserConfig::with_hidden(3, 4, 2);
        let l = Layout::new(&cfg).unwrap();
        let find = |role: &str| l.slots().iter().find(|s| s.role == role).unwrap().shape.clone();
        assert_eq!(find("input_proj_weight"), vec![3, 4]);
        assert_eq!(find("in01_linear1_weight"), vec![4, 4]);
        assert_eq!(find("out00_norm1_scale"), vec![8]);
        assert_eq!(find("out00_linear1_weight"), vec![8, 4]);
        assert_eq!(find("output_proj_weight"), vec![4, 3]);
        assert_eq!(l.slots().len(), 4 + 8 * 4);
    }

    #[test]
    fn shape_errors() {
        let cfg = tiny_cfg();
        let p = random_params(&cfg, 1);
        assert!(p.forward(&[0.0; 3], 1).is_err());
        assert!(p.forward(&[0.0; 4], 0).is_err());
        assert!(p.backward(&[0.0; 4], 1, &[0.0; 3]).is_err());
    }

    /// Straight-line double-precision evaluation of the tiny net.
    fn reference_forward(p: &DenoiserParams<f64>, x: &[f64], t: f64) -> Vec<f64> {
        let cfg = p.config();
        let h = cfg.hidden_dim;
        let g = cfg.groupnorm_groups;
        let get = |role: &str| -> Vec<f64> {
            let s = p.layout().slots().iter().find(|s| s.role == role).unwrap();
            p.values()[s.range()].to_vec()
        };
        let lin = |name: &str, x: &[f64]| -> Vec<f64> {
            let w = get(&format!("{name}_weight"));
            let b = get(&format!("{name}_bias"));
            let od = b.len();
            (0..od)
                .map(|j| b[j] + x.iter().enumerate().map(|(k, xv)| xv * w[k * od + j]).sum::<f64>())
                .collect()
        };
        let norm = |name: &str, x: &[f64]| -> Vec<f64> {
            let sc = get(&format!("{name}_scale"));
            let sh = get(&format!("{name}_shift"));
            let m = x.len() / g;
            let mut out = vec![0.0; x.len()];
            for gi in 0..g {
                let xs = &x[gi * m..(gi + 1) * m];
                let mean = xs.iter().sum::<f64>() / m as f64;
                let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
                for k in 0..m {
                    let i = gi * m + k;
                    out[i] = (x[i] - mean) / (var + GROUPNORM_EPS).sqrt() * sc[i] + sh[i];
                }
            }
            out
        };
        let silu = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|a| a / (1.0 + (-a).exp())).collect() };
        let block = |name: &str, input: &[f64], main: &[f64]| -> Vec<f64> {
            let a = silu(norm(&format!("{name}_norm1"), input));
            let z: Vec<f64> = lin(&format!("{name}_linear1"), &a).into_iter().map(|v| v + t).collect();
            let a2 = silu(norm(&format!("{name}_norm2"), &z));
            let r = lin(&format!("{name}_linear2"), &a2);
            main.iter().zip(r).map(|(m, r)| m + r).collect()
        };
        let h0 = lin("input_proj", x);
        let h1 = block("in00", &h0, &h0);
        let cat: Vec<f64> = h1.iter().chain(&h1).copied().collect();
        let h2 = block("out00", &cat, &h1);
        assert_eq!(h2.len(), h);
        lin("output_proj", &h2)
    }

    #[test]
    fn forward_matches_hand_evaluation() {
        let cfg = tiny_cfg();
        let p = random_params(&cfg, 2);
        let x = [0.3, -0.7, 1.1, 0.05];
        for t in [1usize, 3, 17] {
            let got = p.forward(&x, t).unwrap();
            let want = reference_forward(&p, &x, t as f64);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn batched_equals_independent_and_permutes() {
        let cfg = DenoiserConfig::new(8);
        let p = random_params(&cfg, 3).cast::<f32>();
        let mut rng = seeded(9);
        let n = 150;
        let x: Vec<f32> = (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ts: Vec<usize> = (0..n).map(|i| 1 + i % 25).collect();
        for exec in [Execution::Sequential, Execution::Parallel] {
            let batch = p.forward_batch(&x, &ts, exec).unwrap();
            for i in 0..n {
                let single = p.forward(&x[i * 8..(i + 1) * 8], ts[i]).unwrap();
                assert_eq!(&batch[i * 8..(i + 1) * 8], single.as_slice());
            }
            // reversed row order gives reversed outputs
            let xr: Vec<f32> = x.chunks(8).rev().flatten().copied().collect();
            let tr: Vec<usize> = ts.iter().rev().copied().collect();
            let rev = p.forward_batch(&xr, &tr, exec).unwrap();
            let back: Vec<f32> = rev.chunks(8).rev().flatten().copied().collect();
            assert_eq!(back, batch);
        }
    }

    #[test]
    fn group_norm_is_scale_invariant() {
        let x = [0.5f64, -1.0, 2.0, 0.25, 3.0, -2.0, 1.0, 0.0];
        let (a, _) = group_norm(&x, 1, 8, 2);
        for c in [0.5, 3.0, 40.0] {
            let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
            let (b, _) = group_norm(&xs, 1, 8, 2);
            for (u, v) in a.iter().zip(&b) {
                // eps breaks exact invariance; it is negligible at these scales
                assert!((u - v).abs() < 1e-4, "{u} vs {v}");
            }
        }
    }

    fn fd_check(cfg: &DenoiserConfig, seed: u64) {
        let p = random_params(cfg, seed);
        let c = cfg.input_dim;
        let mut rng = seeded(seed + 100);
        let x: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let up: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = 3;
        let (grads, dx) = p.backward(&x, t, &up).unwrap();
        let objective = |q: &DenoiserParams<f64>, xv: &[f64]| -> f64 {
            q.forward(xv, t).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        // fourth-order central differences; the two-point stencil's O(h^2)
        // truncation error through the normalization is itself about 1e-6
        let step = 1e-3;
        let central = |f: &dyn Fn(f64) -> f64| (-f(2.0 * step) + 8.0 * f(step) - 8.0 * f(-step) + f(-2.0 * step)) / (12.0 * step);
        // relative error of a whole gradient tensor: |analytic - numeric| / |numeric|
        let check = |analytic: &[f64], numeric: &[f64], what: &str| {
            let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let norm = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
            let err = diff / norm.max(1e-12);
            assert!(err < 1e-6, "{what}: relative error {err}");
        };
        let numeric: Vec<f64> = (0..p.values().len())
            .map(|i| {
                central(&|h| {
                    let mut q = p.clone();
                    q.values_mut()[i] += h;
                    objective(&q, &x)
                })
            })
            .collect();
        for slot in p.layout().slots() {
            check(&grads.values[slot.range()], &numeric[slot.range()], &slot.role);
        }
        let numeric_x: Vec<f64> = (0..c)
            .map(|k| {
                central(&|h| {
                    let mut xh = x.clone();
                    xh[k] += h;
                    objective(&p, &xh)
                })
            })
            .collect();
        check(&dx, &numeric_x, "input");
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(&tiny_cfg(), 7);
        let mut add = DenoiserConfig::with_hidden(3, 4, 2);
        add.skip = SkipMode::Add;
        add.groupnorm_groups = 2;
        fd_check(&add, 8);
        let mut grouped = DenoiserConfig::with_hidden(4, 4, 2);
        grouped.groupnorm_groups = 2;
        fd_check(&grouped, 9);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let cfg = tiny_cfg();
        let p = random_params(&cfg, 4);
        let x = [0.1, 0.2, -0.3, 0.4];
        let g1 = [1.0, -0.5, 0.25, 2.0];
        let g2 = [-0.3, 0.7, 1.5, 0.0];
        let g12: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let (a, da) = p.backward(&x, 2, &g1).unwrap();
        let (b, db) = p.backward(&x, 2, &g2).unwrap();
        let (s, ds) = p.backward(&x, 2, &g12).unwrap();
        for i in 0..s.values.len() {
            assert!((s.values[i] - a.values[i] - b.values[i]).abs() < 1e-12);
        }
        for k in 0..4 {
            assert!((ds[k] - da[k] - db[k]).abs() < 1e-12);
        }
        let (z, dz) = p.backward(&x, 2, &[0.0; 4]).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        assert!(dz.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_backward_sums_rows_and_is_exec_independent() {
        let cfg = DenoiserConfig::new(8);
        let p = random_params(&cfg, 5).cast::<f32>();
        let mut rng = seeded(10);
        let n = 200;
        let x: Vec<f32> = (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f32> = (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ts: Vec<usize> = (0..n).map(|i| 1 + i % 7).collect();
        let (gs, dxs) = p.backward_batch(&x, &ts, &up, Execution::Sequential).unwrap();
        let (gp, dxp) = p.backward_batch(&x, &ts, &up, Execution::Parallel).unwrap();
        assert_eq!(gs, gp);
        assert_eq!(dxs, dxp);
        let mut sum = vec![0.0f64; p.values().len()];
        for i in 0..n {
            let (g, dx) = p.backward(&x[i * 8..(i + 1) * 8], ts[i], &up[i * 8..(i + 1) * 8]).unwrap();
            for (s, v) in sum.iter_mut().zip(g.values) {
                *s += v as f64;
            }
            assert_eq!(dx, &dxs[i * 8..(i + 1) * 8]);
        }
        for (a, b) in gs.values.iter().zip(&sum) {
            assert!((*a as f64 - b).abs() < 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}
