//! Reverse-mode tape.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Recording an
//! op appends a node holding the result value plus enough metadata to replay
//! it backwards; [`Tape::backward`] consumes the tape in one reverse sweep
//! and returns the gradients of all parameter leaves.
//!
//! Node ids are created in execution order, so reverse id order is a valid
//! topological order for the backward pass. Ops reject non-finite outputs
//! immediately rather than letting NaN propagate.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spectral::kernels;
use crate::tensor::conv::{self, ConvDims};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Abs { x: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Rfft2Stack { x: Var },
    Irfft2Unstack { x: Var, width: usize },
    Dwt2Stack { x: Var },
    Idwt2Stack { x: Var },
    UpsampleNearest2 { x: Var },
    AvgPool2 { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu { .. } => "relu",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Abs { .. } => "abs",
        Op::Scale { .. } => "scale",
        Op::AddConst { .. } => "add_const",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Div { .. } => "div",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Rfft2Stack { .. } => "rfft2",
        Op::Irfft2Unstack { .. } => "irfft2",
        Op::Dwt2Stack { .. } => "dwt2",
        Op::Idwt2Stack { .. } => "idwt2",
        Op::UpsampleNearest2 { .. } => "upsample_nearest2",
        Op::AvgPool2 { .. } => "avg_pool2",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients extracted by [`Tape::backward`], indexed by the leaf's [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a parameter leaf. `None` for constants,
    /// non-leaves, and leaves the loss does not depend on.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Insert a tensor the loss will not be differentiated against.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.clone(), false)
    }

    /// Insert a trainable tensor; its gradient appears in the backward result.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.clone(), true)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(id)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(op_name(&op), "non-finite value in forward result"));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(id))
    }

    // ---- elementwise -------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| c * v);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddConst { x }, &[x])
    }

    /// Shapes must match exactly, or one operand must be a single element
    /// (scalar broadcast). Anything else is a dimension error.
    fn binary_shapes(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(b).numel() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::dim(format!("{what}: incompatible shapes {sa:?} vs {sb:?}")))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        what: &str,
    ) -> Result<Var> {
        let shape = self.binary_shapes(a, b, what)?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data: Vec<f64> = if da.len() == db.len() {
            da.iter().zip(db).map(|(&p, &q)| f(p, q)).collect()
        } else if db.len() == 1 {
            da.iter().map(|&p| f(p, db[0])).collect()
        } else {
            db.iter().map(|&q| f(da[0], q)).collect()
        };
        let value = Tensor::from_vec(&shape, data)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul { a, b }, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p / q, Op::Div { a, b }, "div")
    }

    // ---- shape ops ---------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat: empty part list"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat: axis {axis} out of rank {}", first.len())));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::dim(format!("concat: ragged shapes {first:?} vs {s:?}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let s_axis = self.shape(p)[axis];
            let block = s_axis * inner;
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + block].copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += s_axis;
        }
        let value = Tensor::from_vec(&out_shape, data)?;
        self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::dim(format!(
                "slice: range {start}..{} invalid for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let s = (o * shape[axis] + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[s..s + len * inner]);
        }
        let value = Tensor::from_vec(&out_shape, data)?;
        self.push(value, Op::Slice { x, axis, start }, &[x])
    }

    // ---- convolution -------------------------------------------------

    /// Cross-correlation with bias, NCHW. Odd kernels only; output size must
    /// divide evenly under the given stride.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!("conv2d: need rank-4 x and w, got {xs:?}, {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::dim(format!(
                "conv2d: input has {} channels but weight expects {}",
                xs[1], ws[1]
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::dim(format!("conv2d: bias {bs:?} must be [{}]", ws[0])));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be >= 1"));
        }
        let span_h = xs[2] + 2 * padding;
        let span_w = xs[3] + 2 * padding;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return Err(Error::config(format!(
                "conv2d: size {}x{} with pad {padding} stride {stride} kernel {kh}x{kw} \
                 gives a non-integer output size",
                xs[2], xs[3]
            )));
        }
        let dims = ConvDims {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh,
            kw,
            stride,
            pad: padding,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kw) / stride + 1,
        };
        let mut out = vec![0.0; dims.n * dims.cout * dims.out_h * dims.out_w];
        conv::forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &dims, &mut out);
        let value = Tensor::from_vec(&[dims.n, dims.cout, dims.out_h, dims.out_w], out)?;
        self.push(value, Op::Conv2d { x, w, b, dims }, &[x, w, b])
    }

    // ---- spectral ----------------------------------------------------

    fn rank4(&self, x: Var, what: &str) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::dim(format!("{what}: expects [N,C,H,W], got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Unnormalized forward real FFT over H,W with re/im half-spectrum planes
    /// stacked along the channel axis: [N,C,H,W] -> [N,2C,H,half_width(W)].
    /// Channels 0..C hold the real planes, C..2C the imaginary planes.
    pub fn rfft2_stack(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "rfft2")?;
        let wf = kernels::half_width(w);
        let mut out = vec![0.0; n * 2 * c * h * wf];
        {
            let src = self.value(x).data();
            out.par_chunks_mut(2 * c * h * wf).enumerate().for_each(|(ni, chunk)| {
                let (re_half, im_half) = chunk.split_at_mut(c * h * wf);
                for ci in 0..c {
                    kernels::rfft2_plane(
                        &src[(ni * c + ci) * h * w..][..h * w],
                        h,
                        w,
                        &mut re_half[ci * h * wf..][..h * wf],
                        &mut im_half[ci * h * wf..][..h * wf],
                    );
                }
            });
        }
        let value = Tensor::from_vec(&[n, 2 * c, h, wf], out)?;
        self.push(value, Op::Rfft2Stack { x }, &[x])
    }

    /// Inverse of [`Tape::rfft2_stack`], 1/(H·W) normalized:
    /// [N,2C,H,half_width(W)] -> [N,C,H,W].
    pub fn irfft2_unstack(&mut self, x: Var, width: usize) -> Result<Var> {
        let [n, c2, h, wf] = self.rank4(x, "irfft2")?;
        if c2 % 2 != 0 {
            return Err(Error::dim(format!("irfft2: stacked channels {c2} must be even")));
        }
        if wf != kernels::half_width(width) {
            return Err(Error::dim(format!(
                "irfft2: stored width {wf} does not match half_width({width})"
            )));
        }
        let c = c2 / 2;
        let mut out = vec![0.0; n * c * h * width];
        {
            let src = self.value(x).data();
            out.par_chunks_mut(c * h * width).enumerate().for_each(|(ni, chunk)| {
                for ci in 0..c {
                    let re = &src[(ni * c2 + ci) * h * wf..][..h * wf];
                    let im = &src[(ni * c2 + c + ci) * h * wf..][..h * wf];
                    kernels::irfft2_plane(re, im, h, width, &mut chunk[ci * h * width..][..h * width]);
                }
            });
        }
        let value = Tensor::from_vec(&[n, c, h, width], out)?;
        self.push(value, Op::Irfft2Unstack { x, width }, &[x])
    }

    /// One-level Haar analysis with subbands stacked along channels in
    /// (LL, LH, HL, HH) order: [N,C,H,W] -> [N,4C,H/2,W/2].
    pub fn dwt2_stack(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "dwt2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("dwt2: needs even spatial dims, got {h}x{w}")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let sub = h2 * w2;
        let mut out = vec![0.0; n * 4 * c * sub];
        {
            let src = self.value(x).data();
            out.par_chunks_mut(4 * c * sub).enumerate().for_each(|(ni, chunk)| {
                let (ll, rest) = chunk.split_at_mut(c * sub);
                let (lh, rest) = rest.split_at_mut(c * sub);
                let (hl, hh) = rest.split_at_mut(c * sub);
                for ci in 0..c {
                    kernels::dwt2_plane(
                        &src[(ni * c + ci) * h * w..][..h * w],
                        h,
                        w,
                        &mut ll[ci * sub..][..sub],
                        &mut lh[ci * sub..][..sub],
                        &mut hl[ci * sub..][..sub],
                        &mut hh[ci * sub..][..sub],
                    );
                }
            });
        }
        let value = Tensor::from_vec(&[n, 4 * c, h2, w2], out)?;
        self.push(value, Op::Dwt2Stack { x }, &[x])
    }

    /// Exact synthesis inverse of [`Tape::dwt2_stack`]:
    /// [N,4C,h,w] -> [N,C,2h,2w].
    pub fn idwt2_stack(&mut self, x: Var) -> Result<Var> {
        let [n, c4, h2, w2] = self.rank4(x, "idwt2")?;
        if c4 % 4 != 0 {
            return Err(Error::dim(format!("idwt2: stacked channels {c4} must divide by 4")));
        }
        let c = c4 / 4;
        let sub = h2 * w2;
        let mut out = vec![0.0; n * c * 4 * sub];
        {
            let src = self.value(x).data();
            out.par_chunks_mut(c * 4 * sub).enumerate().for_each(|(ni, chunk)| {
                let base = ni * c4 * sub;
                for ci in 0..c {
                    kernels::idwt2_plane(
                        &src[base + ci * sub..][..sub],
                        &src[base + (c + ci) * sub..][..sub],
                        &src[base + (2 * c + ci) * sub..][..sub],
                        &src[base + (3 * c + ci) * sub..][..sub],
                        h2,
                        w2,
                        &mut chunk[ci * 4 * sub..][..4 * sub],
                    );
                }
            });
        }
        let value = Tensor::from_vec(&[n, c, 2 * h2, 2 * w2], out)?;
        self.push(value, Op::Idwt2Stack { x }, &[x])
    }

    // ---- resampling ---------------------------------------------------

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "upsample_nearest2")?;
        let mut out = vec![0.0; n * c * 4 * h * w];
        {
            let src = self.value(x).data();
            out.par_chunks_mut(4 * h * w).enumerate().for_each(|(p, chunk)| {
                let plane = &src[p * h * w..][..h * w];
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        chunk[i * 2 * w + j] = plane[(i / 2) * w + j / 2];
                    }
                }
            });
        }
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)?;
        self.push(value, Op::UpsampleNearest2 { x }, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("avg_pool2: needs even spatial dims, got {h}x{w}")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * h2 * w2];
        {
            let src = self.value(x).data();
            out.par_chunks_mut(h2 * w2).enumerate().for_each(|(p, chunk)| {
                let plane = &src[p * h * w..][..h * w];
                for i in 0..h2 {
                    for j in 0..w2 {
                        let t = 2 * i * w + 2 * j;
                        chunk[i * w2 + j] =
                            0.25 * (plane[t] + plane[t + 1] + plane[t + w] + plane[t + w + 1]);
                    }
                }
            });
        }
        let value = Tensor::from_vec(&[n, c, h2, w2], out)?;
        self.push(value, Op::AvgPool2 { x }, &[x])
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll { x }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(value, Op::MeanAll { x }, &[x])
    }

    /// mean(|a - b|), the L1 distance used by both losses.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean_all(d)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape; each recorded op
    /// is visited exactly once. Gradients accumulate (+=) where a value
    /// feeds several consumers.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut bufs: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        bufs[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();

        for id in (0..n).rev() {
            let Some(g) = bufs[id].take() else { continue };
            let node = &self.nodes[id];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(op_name(&node.op), "non-finite gradient"));
            }
            match &node.op {
                Op::Leaf => {
                    if node.needs_grad {
                        out[id] = Some(Tensor::from_vec(node.value.shape(), g)?);
                    }
                }
                Op::Conv2d { x, w, b, dims } => {
                    if self.needs(*x) {
                        let mut gx = vec![0.0; dims.n * dims.cin * dims.h * dims.w];
                        conv::grad_input(&g, self.nodes[w.0].value.data(), dims, &mut gx);
                        accum(&mut bufs, x.0, gx);
                    }
                    if self.needs(*w) {
                        let mut gw = vec![0.0; dims.cout * dims.cin * dims.kh * dims.kw];
                        conv::grad_weight(&g, self.nodes[x.0].value.data(), dims, &mut gw);
                        accum(&mut bufs, w.0, gw);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; dims.cout];
                        conv::grad_bias(&g, dims, &mut gb);
                        accum(&mut bufs, b.0, gb);
                    }
                }
                Op::Relu { x } => {
                    // Subgradient at the kink is fixed to 0.
                    let gx = zip_map(&g, self.nodes[x.0].value.data(), |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                    self.accum_if(&mut bufs, *x, gx);
                }
                Op::LeakyRelu { x, slope } => {
                    let s = *slope;
                    let gx = zip_map(&g, self.nodes[x.0].value.data(), |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else {
                            s * gv
                        }
                    });
                    self.accum_if(&mut bufs, *x, gx);
                }
                Op::Abs { x } => {
                    let gx = zip_map(&g, self.nodes[x.0].value.data(), |gv, xv| gv * sign(xv));
                    self.accum_if(&mut bufs, *x, gx);
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    let gx = g.iter().map(|&v| c * v).collect();
                    self.accum_if(&mut bufs, *x, gx);
                }
                Op::AddConst { x } => {
                    self.accum_if(&mut bufs, *x, g);
                }
                Op::Add { a, b } => {
                    self.accum_broadcast(&mut bufs, *a, &g, |gv, _| gv, None);
                    self.accum_broadcast(&mut bufs, *b, &g, |gv, _| gv, None);
                }
                Op::Sub { a, b } => {
                    self.accum_broadcast(&mut bufs, *a, &g, |gv, _| gv, None);
                    self.accum_broadcast(&mut bufs, *b, &g, |gv, _| -gv, None);
                }
                Op::Mul { a, b } => {
                    let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    self.accum_broadcast(&mut bufs, *a, &g, |gv, ov| gv * ov, Some(db));
                    self.accum_broadcast(&mut bufs, *b, &g, |gv, ov| gv * ov, Some(da));
                }
                Op::Div { a, b } => {
                    let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    self.accum_broadcast(&mut bufs, *a, &g, |gv, ov| gv / ov, Some(db));
                    // d(a/b)/db = -a / b^2
                    let quot: Vec<f64> = if da.len() >= db.len() {
                        // b may be scalar-broadcast
                        (0..g.len())
                            .map(|i| -da[i] / (db[i % db.len()] * db[i % db.len()]))
                            .collect()
                    } else {
                        (0..g.len()).map(|i| -da[0] / (db[i] * db[i])).collect()
                    };
                    self.accum_broadcast(&mut bufs, *b, &g, |gv, ov| gv * ov, Some(&quot));
                }
                Op::Concat { parts, axis } => {
                    let out_shape = node.value.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let total_axis = out_shape[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let p_axis = self.shape(p)[*axis];
                        if self.needs(p) {
                            let block = p_axis * inner;
                            let mut gp = vec![0.0; outer * block];
                            for o in 0..outer {
                                let src = (o * total_axis + offset) * inner;
                                gp[o * block..(o + 1) * block]
                                    .copy_from_slice(&g[src..src + block]);
                            }
                            accum(&mut bufs, p.0, gp);
                        }
                        offset += p_axis;
                    }
                }
                Op::Slice { x, axis, start } => {
                    if self.needs(*x) {
                        let in_shape = self.shape(*x);
                        let out_shape = node.value.shape();
                        let outer: usize = in_shape[..*axis].iter().product();
                        let inner: usize = in_shape[*axis + 1..].iter().product();
                        let len = out_shape[*axis];
                        let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                        for o in 0..outer {
                            let dst = (o * in_shape[*axis] + *start) * inner;
                            gx[dst..dst + len * inner]
                                .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                        }
                        accum(&mut bufs, x.0, gx);
                    }
                }
                Op::Rfft2Stack { x } => {
                    if self.needs(*x) {
                        let xs = self.shape(*x);
                        let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                        let wf = kernels::half_width(w);
                        let mut gx = vec![0.0; n_b * c * h * w];
                        gx.par_chunks_mut(c * h * w).enumerate().for_each(|(ni, chunk)| {
                            let base = ni * 2 * c * h * wf;
                            for ci in 0..c {
                                kernels::rfft2_adjoint_plane(
                                    &g[base + ci * h * wf..][..h * wf],
                                    &g[base + (c + ci) * h * wf..][..h * wf],
                                    h,
                                    w,
                                    &mut chunk[ci * h * w..][..h * w],
                                );
                            }
                        });
                        accum(&mut bufs, x.0, gx);
                    }
                }
                Op::Irfft2Unstack { x, width } => {
                    if self.needs(*x) {
                        let xs = self.shape(*x);
                        let (n_b, c2, h, wf) = (xs[0], xs[1], xs[2], xs[3]);
                        let c = c2 / 2;
                        let mut gx = vec![0.0; n_b * c2 * h * wf];
                        let w = *width;
                        gx.par_chunks_mut(c2 * h * wf).enumerate().for_each(|(ni, chunk)| {
                            let (re_half, im_half) = chunk.split_at_mut(c * h * wf);
                            for ci in 0..c {
                                kernels::irfft2_adjoint_plane(
                                    &g[(ni * c + ci) * h * w..][..h * w],
                                    h,
                                    w,
                                    &mut re_half[ci * h * wf..][..h * wf],
                                    &mut im_half[ci * h * wf..][..h * wf],
                                );
                            }
                        });
                        accum(&mut bufs, x.0, gx);
                    }
                }
                Op::Dwt2Stack { x } => {
                    if self.needs(*x) {
                        let xs = self.shape(*x);
                        let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                        let (h2, w2) = (h / 2, w / 2);
                        let sub = h2 * w2;
                        // Orthonormal filters: the adjoint of analysis is synthesis.
                        let mut gx = vec![0.0; n_b * c * h * w];
                        gx.par_chunks_mut(c * h * w).enumerate().for_each(|(ni, chunk)| {
                            let base = ni * 4 * c * sub;
                            for ci in 0..c {
                                kernels::idwt2_plane(
                                    &g[base + ci * sub..][..sub],
                                    &g[base + (c + ci) * sub..][..sub],
                                    &g[base + (2 * c + ci) * sub..][..sub],
                                    &g[base + (3 * c + ci) * sub..][..sub],
                                    h2,
                                    w2,
                                    &mut chunk[ci * h * w..][..h * w],
                                );
                            }
                        });
                        accum(&mut bufs, x.0, gx);
                    }
                }
                Op::Idwt2Stack { x } => {
                    if self.needs(*x) {
                        let xs = self.shape(*x);
                        let (n_b, c4, h2, w2) = (xs[0], xs[1], xs[2], xs[3]);
                        let c = c4 / 4;
                        let sub = h2 * w2;
                        let mut gx = vec![0.0; n_b * c4 * sub];
                        gx.par_chunks_mut(c4 * sub).enumerate().for_each(|(ni, chunk)| {
                            let (ll, rest) = chunk.split_at_mut(c * sub);
                            let (lh, rest) = rest.split_at_mut(c * sub);
                            let (hl, hh) = rest.split_at_mut(c * sub);
                            for ci in 0..c {
                                kernels::dwt2_plane(
                                    &g[(ni * c + ci) * 4 * sub..][..4 * sub],
                                    2 * h2,
                                    2 * w2,
                                    &mut ll[ci * sub..][..sub],
                                    &mut lh[ci * sub..][..sub],
                                    &mut hl[ci * sub..][..sub],
                                    &mut hh[ci * sub..][..sub],
                                );
                            }
                        });
                        accum(&mut bufs, x.0, gx);
                    }
                }
                Op::UpsampleNearest2 { x } => {
                    if self.needs(*x) {
                        let xs = self.shape(*x);
                        let (h, w) = (xs[2], xs[3]);
                        let planes = xs[0] * xs[1];
                        let mut gx = vec![0.0; planes * h * w];
                        gx.par_chunks_mut(h * w).enumerate().for_each(|(p, chunk)| {
                            let gp = &g[p * 4 * h * w..][..4 * h * w];
                            for i in 0..h {
                                for j in 0..w {
                                    let t = 2 * i * 2 * w + 2 * j;
                                    chunk[i * w + j] =
                                        gp[t] + gp[t + 1] + gp[t + 2 * w] + gp[t + 2 * w + 1];
                                }
                            }
                        });
                        accum(&mut bufs, x.0, gx);
                    }
                }
                Op::AvgPool2 { x } => {
                    if self.needs(*x) {
                        let xs = self.shape(*x);
                        let (h, w) = (xs[2], xs[3]);
                        let (h2, w2) = (h / 2, w / 2);
                        let planes = xs[0] * xs[1];
                        let mut gx = vec![0.0; planes * h * w];
                        gx.par_chunks_mut(h * w).enumerate().for_each(|(p, chunk)| {
                            let gp = &g[p * h2 * w2..][..h2 * w2];
                            for i in 0..h2 {
                                for j in 0..w2 {
                                    let q = 0.25 * gp[i * w2 + j];
                                    let t = 2 * i * w + 2 * j;
                                    chunk[t] = q;
                                    chunk[t + 1] = q;
                                    chunk[t + w] = q;
                                    chunk[t + w + 1] = q;
                                }
                            }
                        });
                        accum(&mut bufs, x.0, gx);
                    }
                }
                Op::SumAll { x } => {
                    let gx = vec![g[0]; self.nodes[x.0].value.numel()];
                    self.accum_if(&mut bufs, *x, gx);
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[x.0].value.numel();
                    let gx = vec![g[0] / n as f64; n];
                    self.accum_if(&mut bufs, *x, gx);
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accum_if(&self, bufs: &mut [Option<Vec<f64>>], target: Var, contribution: Vec<f64>) {
        if self.needs(target) {
            accum(bufs, target.0, contribution);
        }
    }

    /// Accumulate an elementwise-transformed gradient into `target`,
    /// summing it down when `target` was scalar-broadcast.
    fn accum_broadcast(
        &self,
        bufs: &mut [Option<Vec<f64>>],
        target: Var,
        g: &[f64],
        f: impl Fn(f64, f64) -> f64,
        other: Option<&[f64]>,
    ) {
        if !self.needs(target) {
            return;
        }
        let t_len = self.nodes[target.0].value.numel();
        let term = |i: usize| match other {
            Some(o) => f(g[i], o[i % o.len()]),
            None => f(g[i], 0.0),
        };
        let contribution = if t_len == g.len() {
            (0..g.len()).map(term).collect()
        } else {
            // target was a broadcast scalar
            vec![(0..g.len()).map(term).sum()]
        };
        accum(bufs, target.0, contribution);
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&gv, &xv)| f(gv, xv)).collect()
}

fn accum(bufs: &mut [Option<Vec<f64>>], target: usize, contribution: Vec<f64>) {
    match &mut bufs[target] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::tensor::{finite_diff_grad, rel_err};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Autodiff gradient and central-difference gradient of the same scalar
    /// function of one input.
    fn ad_and_fd(
        build: impl Fn(&mut Tape, Var) -> Result<Var>,
        x0: &Tensor,
        h: f64,
    ) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let xv = tape.param(x0);
        let loss = build(&mut tape, xv).unwrap();
        let g_ad = tape.backward(loss).unwrap().take(xv).unwrap();
        let g_fd = finite_diff_grad(
            &mut |t| {
                let mut tape = Tape::new();
                let xv = tape.constant(t);
                let loss = build(&mut tape, xv)?;
                tape.value(loss).item()
            },
            x0,
            h,
        )
        .unwrap();
        (g_ad, g_fd)
    }

    fn assert_grads_close(g_ad: &Tensor, g_fd: &Tensor, tol: f64, what: &str) {
        for (i, (&a, &b)) in g_ad.data().iter().zip(g_fd.data()).enumerate() {
            let r = rel_err(a, b);
            assert!(r < tol, "{what}[{i}]: ad={a} fd={b} rel={r}");
        }
    }

    #[test]
    fn conv2d_box_filter_counts() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(&Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[2], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn conv2d_zero_weight_is_constant_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(&random(&[2, 3, 5, 5], 1));
        let w = tape.constant(&Tensor::zeros(&[4, 3, 3, 3]));
        let b = tape.constant(&Tensor::from_vec(&[4], vec![0.5, -1.0, 0.0, 2.0]).unwrap());
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[2, 4, 5, 5]);
        for n in 0..2 {
            for (co, &bv) in [0.5, -1.0, 0.0, 2.0].iter().enumerate() {
                for &v in &out.data()[(n * 4 + co) * 25..(n * 4 + co + 1) * 25] {
                    assert_eq!(v, bv);
                }
            }
        }
    }

    #[test]
    fn conv2d_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 2, 5, 5]));
        let w_bad_cin = tape.constant(&Tensor::zeros(&[3, 1, 3, 3]));
        let b = tape.constant(&Tensor::zeros(&[3]));
        assert!(matches!(tape.conv2d(x, w_bad_cin, b, 1, 1), Err(Error::Dim(_))));
        let w_even = tape.constant(&Tensor::zeros(&[3, 2, 2, 2]));
        assert!(matches!(tape.conv2d(x, w_even, b, 1, 1), Err(Error::Config(_))));
        let w = tape.constant(&Tensor::zeros(&[3, 2, 3, 3]));
        // (5 + 2 - 3) = 4 does not divide by stride 3
        assert!(matches!(tape.conv2d(x, w, b, 3, 1), Err(Error::Config(_))));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let x0 = random(&[1, 2, 5, 5], 7);
        let w0 = random(&[3, 2, 3, 3], 8);
        let b0 = random(&[3], 9);

        // d/dx
        let (g_ad, g_fd) = ad_and_fd(
            |tape, xv| {
                let w = tape.constant(&w0);
                let b = tape.constant(&b0);
                let y = tape.conv2d(xv, w, b, 1, 1)?;
                tape.sum_all(y)
            },
            &x0,
            1e-5,
        );
        assert_grads_close(&g_ad, &g_fd, 1e-6, "conv d/dx");

        // d/dw
        let (g_ad, g_fd) = ad_and_fd(
            |tape, wv| {
                let x = tape.constant(&x0);
                let b = tape.constant(&b0);
                let y = tape.conv2d(x, wv, b, 1, 1)?;
                tape.sum_all(y)
            },
            &w0,
            1e-5,
        );
        assert_grads_close(&g_ad, &g_fd, 1e-6, "conv d/dw");

        // d/db
        let (g_ad, g_fd) = ad_and_fd(
            |tape, bv| {
                let x = tape.constant(&x0);
                let w = tape.constant(&w0);
                let y = tape.conv2d(x, w, bv, 1, 1)?;
                tape.sum_all(y)
            },
            &b0,
            1e-5,
        );
        assert_grads_close(&g_ad, &g_fd, 1e-6, "conv d/db");
    }

    #[test]
    fn strided_conv_gradients_match_finite_differences() {
        let x0 = random(&[1, 2, 7, 7], 17);
        let w0 = random(&[3, 2, 3, 3], 18);
        let b0 = random(&[3], 19);
        for (what, target) in [("x", 0), ("w", 1), ("b", 2)] {
            let inputs = [&x0, &w0, &b0];
            let (g_ad, g_fd) = ad_and_fd(
                |tape, v| {
                    let mut vars: Vec<Var> =
                        inputs.iter().map(|t| tape.constant(t)).collect();
                    vars[target] = v;
                    let y = tape.conv2d(vars[0], vars[1], vars[2], 2, 1)?;
                    // weight the outputs so gradients are not all equal
                    let m = tape.constant(&random(tape.shape(y), 20));
                    let y = tape.mul(y, m)?;
                    tape.sum_all(y)
                },
                inputs[target],
                1e-5,
            );
            assert_grads_close(&g_ad, &g_fd, 1e-6, &format!("strided conv d/d{what}"));
        }
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        // gradient of sum(relu(x)) away from the kink
        let mut x0 = random(&[24], 3);
        for v in x0.data_mut() {
            if v.abs() <= 1e-3 {
                *v += 0.5;
            }
        }
        let (g_ad, g_fd) = ad_and_fd(
            |tape, xv| {
                let y = tape.relu(xv)?;
                tape.sum_all(y)
            },
            &x0,
            1e-5,
        );
        assert_grads_close(&g_ad, &g_fd, 1e-6, "relu");
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut tape = Tape::new();
        let x0 = random(&[2, 3], 4);
        let x = tape.constant(&x0);
        let z = tape.constant(&Tensor::zeros(&[2, 3]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), &x0);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x0 = random(&[10], 5).map(|v| v + if v.abs() < 5e-2 { 0.2 } else { 0.0 });
        let other = random(&[10], 6).map(|v| v + 2.5); // keep away from 0 for div
        let scalar = Tensor::scalar(1.7);
        for (name, f) in [
            ("leaky_relu", 0usize),
            ("abs", 1),
            ("mul", 2),
            ("div", 3),
            ("mul_scalar", 4),
            ("div_by_scalar", 5),
            ("scalar_div", 6),
            ("scale_addconst", 7),
        ] {
            let (g_ad, g_fd) = ad_and_fd(
                |tape, xv| {
                    let o = tape.constant(&other);
                    let s = tape.constant(&scalar);
                    let y = match f {
                        0 => tape.leaky_relu(xv, 0.2)?,
                        1 => tape.abs(xv)?,
                        2 => tape.mul(xv, o)?,
                        3 => tape.div(xv, o)?,
                        4 => tape.mul(xv, s)?,
                        5 => tape.div(xv, s)?,
                        6 => {
                            let num = tape.sum_all(o)?;
                            let den = tape.sum_all(xv)?;
                            tape.div(num, den)?
                        }
                        7 => {
                            let y = tape.scale(xv, -0.3)?;
                            tape.add_const(y, 2.0)?
                        }
                        _ => unreachable!(),
                    };
                    tape.sum_all(y)
                },
                &x0,
                1e-5,
            );
            assert_grads_close(&g_ad, &g_fd, 1e-6, name);
        }
    }

    #[test]
    fn concat_shapes_and_identity() {
        let mut tape = Tape::new();
        let a0 = random(&[1, 2, 4, 4], 11);
        let b0 = random(&[1, 2, 4, 4], 12);
        let a = tape.constant(&a0);
        let b = tape.constant(&b0);
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4, 4]);

        let single = tape.concat(&[a], 1).unwrap();
        assert_eq!(tape.value(single), &a0);

        // slice-back roundtrip is bitwise
        let got_a = tape.slice(y, 1, 0, 2).unwrap();
        let got_b = tape.slice(y, 1, 2, 2).unwrap();
        assert_eq!(tape.value(got_a), &a0);
        assert_eq!(tape.value(got_b), &b0);
    }

    #[test]
    fn concat_rejects_empty_and_ragged() {
        let mut tape = Tape::new();
        assert!(matches!(tape.concat(&[], 0), Err(Error::Dim(_))));
        let a = tape.constant(&Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.constant(&Tensor::zeros(&[1, 2, 4, 5]));
        assert!(matches!(tape.concat(&[a, b], 1), Err(Error::Dim(_))));
    }

    #[test]
    fn concat_and_slice_gradients() {
        let x0 = random(&[2, 3, 2, 2], 13);
        let (g_ad, g_fd) = ad_and_fd(
            |tape, xv| {
                let c = tape.constant(&random(&[2, 2, 2, 2], 14));
                let y = tape.concat(&[xv, c], 1)?;
                let m = tape.constant(&random(&[2, 5, 2, 2], 15));
                let y = tape.mul(y, m)?;
                let part = tape.slice(y, 1, 1, 3)?;
                tape.sum_all(part)
            },
            &x0,
            1e-5,
        );
        assert_grads_close(&g_ad, &g_fd, 1e-6, "concat/slice");
    }

    #[test]
    fn backward_of_weighted_sum_returns_other_factor() {
        let x0 = random(&[7], 21);
        let w0 = random(&[7], 22);
        let mut tape = Tape::new();
        let w = tape.param(&w0);
        let x = tape.constant(&x0);
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let g = tape.backward(loss).unwrap().take(w).unwrap();
        assert_eq!(g, x0);
    }

    #[test]
    fn backward_accumulates_over_consumers() {
        let mut tape = Tape::new();
        let y = tape.param(&random(&[4], 23));
        let s1 = tape.sum_all(y).unwrap();
        let s2 = tape.sum_all(y).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let g = tape.backward(loss).unwrap().take(y).unwrap();
        assert!(g.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let y = tape.param(&random(&[4], 24));
        let z = tape.relu(y).unwrap();
        assert!(matches!(tape.backward(z), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::scalar(1.0));
        let b = tape.constant(&Tensor::scalar(0.0));
        assert!(matches!(tape.div(a, b), Err(Error::Numeric { .. })));
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let x0 = random(&[2, 4, 16, 16], 31);
        let w0 = random(&[4, 4, 3, 3], 32);
        let b0 = random(&[4], 33);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(&x0);
            let w = tape.constant(&w0);
            let b = tape.constant(&b0);
            let y = tape.conv2d(x, w, b, 1, 1).unwrap();
            let f = tape.rfft2_stack(y).unwrap();
            tape.value(f).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn fft_roundtrip_gradient_is_ones() {
        for &(h, w) in &[(6usize, 6usize), (4, 5), (3, 8)] {
            let x0 = random(&[1, 2, h, w], (h * w) as u64);
            let mut tape = Tape::new();
            let x = tape.param(&x0);
            let f = tape.rfft2_stack(x).unwrap();
            let y = tape.irfft2_unstack(f, w).unwrap();
            assert!(tape.value(y).max_abs_diff(&x0) < 1e-10);
            let loss = tape.sum_all(y).unwrap();
            let g = tape.backward(loss).unwrap().take(x).unwrap();
            for &v in g.data() {
                assert!((v - 1.0).abs() < 1e-8, "{h}x{w}: got {v}");
            }
        }
    }

    #[test]
    fn fft_ops_gradients_match_finite_differences() {
        let x0 = random(&[1, 1, 4, 5], 41);
        let (g_ad, g_fd) = ad_and_fd(
            |tape, xv| {
                let f = tape.rfft2_stack(xv)?;
                let m = tape.constant(&random(&[1, 2, 4, 3], 42));
                let f = tape.mul(f, m)?;
                let y = tape.irfft2_unstack(f, 5)?;
                let m2 = tape.constant(&random(&[1, 1, 4, 5], 43));
                let y = tape.mul(y, m2)?;
                tape.sum_all(y)
            },
            &x0,
            1e-5,
        );
        assert_grads_close(&g_ad, &g_fd, 1e-6, "rfft2/irfft2");
    }

    #[test]
    fn dwt_roundtrip_gradient_is_ones() {
        let x0 = random(&[1, 2, 8, 8], 51);
        let mut tape = Tape::new();
        let x = tape.param(&x0);
        let s = tape.dwt2_stack(x).unwrap();
        let y = tape.idwt2_stack(s).unwrap();
        assert!(tape.value(y).max_abs_diff(&x0) < 1e-10);
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap().take(x).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn dwt_ops_gradients_match_finite_differences() {
        let x0 = random(&[1, 2, 4, 4], 52);
        let (g_ad, g_fd) = ad_and_fd(
            |tape, xv| {
                let s = tape.dwt2_stack(xv)?;
                let m = tape.constant(&random(&[1, 8, 2, 2], 53));
                let s = tape.mul(s, m)?;
                let y = tape.idwt2_stack(s)?;
                tape.sum_all(y)
            },
            &x0,
            1e-5,
        );
        assert_grads_close(&g_ad, &g_fd, 1e-6, "dwt2/idwt2");
    }

    #[test]
    fn resampling_gradients_match_finite_differences() {
        let x0 = random(&[1, 2, 4, 4], 61);
        for (name, up) in [("upsample", true), ("avgpool", false)] {
            let (g_ad, g_fd) = ad_and_fd(
                |tape, xv| {
                    let y = if up {
                        tape.upsample_nearest2(xv)?
                    } else {
                        tape.avg_pool2(xv)?
                    };
                    let m = tape.constant(&random(tape.shape(y), 62));
                    let y = tape.mul(y, m)?;
                    tape.sum_all(y)
                },
                &x0,
                1e-5,
            );
            assert_grads_close(&g_ad, &g_fd, 1e-6, name);
        }
    }

    #[test]
    fn mean_abs_diff_gradient_is_scaled_sign() {
        let x0 = random(&[6], 71).map(|v| v + 3.0); // all above target: sign +1
        let t0 = Tensor::zeros(&[6]);
        let mut tape = Tape::new();
        let x = tape.param(&x0);
        let t = tape.constant(&t0);
        let loss = tape.mean_abs_diff(x, t).unwrap();
        let g = tape.backward(loss).unwrap().take(x).unwrap();
        for &v in g.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }
}
