//! Reverse-mode autodiff over an append-only node list.
//!
//! Every forward op evaluates eagerly and appends one node holding its value
//! and the ids of its inputs. Inputs always precede the node that consumes
//! them, so a single reverse sweep over the list is a valid topological
//! order for the backward pass.

use crate::autodiff::kernels::{self, Window};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Conv2d { x: Var, w: Var, bias: Option<Var>, win: Window, batch: usize },
    ConvTranspose2d { x: Var, w: Var, bias: Option<Var>, win: Window, batch: usize, c_in: usize },
    Upsample { x: Var, factor: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    IndexSelect { table: Var, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or `None` if no path reached it.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn dims(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.dims()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(var.0))
        }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() == vb.dims() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::from_shape(va.shape().clone(), data);
        }
        let out = kernels::broadcast_dims(va.dims(), vb.dims()).ok_or_else(|| {
            Error::shape(format!("cannot broadcast {} with {}", va.shape(), vb.shape()))
        })?;
        let sa = kernels::broadcast_strides(va.dims(), &out);
        let sb = kernels::broadcast_strides(vb.dims(), &out);
        let mut data = vec![0.0; out.iter().product()];
        let (da, db) = (va.data(), vb.data());
        kernels::for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Tensor::new(out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x / y)?;
        Ok(self.push_op(v, Op::Div(a, b), &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).map(f);
        Ok(self.push_op(v, op, &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ---- linear algebra -------------------------------------------------

    /// `[..., m, k] x [..., k, n]`. The right operand may also be a plain
    /// `[k, n]` matrix shared across every leading index of the left one.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() < 2 || db.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank >= 2, got {da:?} x {db:?}")));
        }
        let (m, k) = (da[da.len() - 2], da[da.len() - 1]);
        let (kb, n) = (db[db.len() - 2], db[db.len() - 1]);
        let lead_a = &da[..da.len() - 2];
        let lead_b = &db[..db.len() - 2];
        if k != kb {
            return Err(Error::shape(format!("matmul inner dims {da:?} x {db:?}")));
        }
        let shared_b = lead_b.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(Error::shape(format!("matmul batch dims {da:?} x {db:?}")));
        }
        let batch: usize = lead_a.iter().product();
        let mut out_dims = lead_a.to_vec();
        out_dims.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let bo = if shared_b { 0 } else { i * k * n };
            kernels::gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[bo..bo + k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let value = Tensor::new(out_dims, out)?;
        Ok(self.push_op(
            value,
            Op::MatMul { a, b, batch, m, k, n, shared_b },
            &[a, b],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let r = self.dims(x).len();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    // ---- convolution ----------------------------------------------------

    /// Cross-correlation of `x` (`[B, C_in, H, W]`) with `w`
    /// (`[C_out, C_in, k, k]`) plus an optional per-channel `bias`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (dx, dw) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if dx.len() != 4 || dw.len() != 4 || dw[2] != dw[3] || dw[1] != dx[1] {
            return Err(Error::shape(format!("conv2d input {dx:?} with weight {dw:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        let (batch, c_in, h, wd) = (dx[0], dx[1], dx[2], dx[3]);
        let (c_out, k) = (dw[0], dw[2]);
        self.check_bias(bias, c_out)?;
        let out_h = conv_extent(h, k, stride, pad)?;
        let out_w = conv_extent(wd, k, stride, pad)?;
        let win = Window {
            channels: c_in,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let bv = bias.map(|b| self.value(b).data());
        let plane = out_h * out_w;
        let mut cols = vec![0.0; win.rows() * win.cols()];
        let mut out = vec![0.0; batch * c_out * plane];
        for b in 0..batch {
            kernels::im2col(&xin[b * c_in * h * wd..(b + 1) * c_in * h * wd], &win, &mut cols);
            let ob = &mut out[b * c_out * plane..(b + 1) * c_out * plane];
            kernels::gemm(c_out, win.rows(), plane, wv, false, &cols, false, ob, 0.0);
            if let Some(bv) = bv {
                for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let value = Tensor::new([batch, c_out, out_h, out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push_op(value, Op::Conv2d { x, w, bias, win, batch }, &inputs))
    }

    /// Transposed convolution: `x` is `[B, C_in, H, W]`, `w` is
    /// `[C_in, C_out, k, k]`; the output extent is `(H-1)*stride - 2*pad + k`.
    /// This is the adjoint of [`Graph::conv2d`] with the same weight.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (dx, dw) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if dx.len() != 4 || dw.len() != 4 || dw[2] != dw[3] || dw[0] != dx[1] {
            return Err(Error::shape(format!(
                "conv_transpose2d input {dx:?} with weight {dw:?}"
            )));
        }
        let (batch, c_in, h, wd) = (dx[0], dx[1], dx[2], dx[3]);
        let (c_out, k) = (dw[1], dw[2]);
        self.check_bias(bias, c_out)?;
        if stride == 0 || (h - 1) * stride + k <= 2 * pad || (wd - 1) * stride + k <= 2 * pad {
            return Err(Error::shape(format!(
                "conv_transpose2d stride {stride} pad {pad} kernel {k} on {h}x{wd}"
            )));
        }
        let out_h = (h - 1) * stride + k - 2 * pad;
        let out_w = (wd - 1) * stride + k - 2 * pad;
        // The window reads the output image and produces the input grid.
        let win = Window {
            channels: c_out,
            height: out_h,
            width: out_w,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let bv = bias.map(|b| self.value(b).data());
        let plane = out_h * out_w;
        let mut cols = vec![0.0; win.rows() * win.cols()];
        let mut out = vec![0.0; batch * c_out * plane];
        for b in 0..batch {
            let xb = &xin[b * c_in * h * wd..(b + 1) * c_in * h * wd];
            kernels::gemm(win.rows(), c_in, h * wd, wv, true, xb, false, &mut cols, 0.0);
            let ob = &mut out[b * c_out * plane..(b + 1) * c_out * plane];
            kernels::col2im(&cols, &win, ob);
            if let Some(bv) = bv {
                for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let value = Tensor::new([batch, c_out, out_h, out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push_op(
            value,
            Op::ConvTranspose2d { x, w, bias, win, batch, c_in },
            &inputs,
        ))
    }

    fn check_bias(&self, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            self.check(b)?;
            if self.dims(b) != [channels] {
                return Err(Error::shape(format!(
                    "bias {:?} for {channels} channels",
                    self.dims(b)
                )));
            }
        }
        Ok(())
    }

    /// Bilinear resize of `[B, C, H, W]` by an integer factor, half-pixel
    /// centers (align-corners = false).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check(x)?;
        let d = self.dims(x).to_vec();
        if d.len() != 4 || factor == 0 {
            return Err(Error::shape(format!("bilinear upsample of {d:?} by {factor}")));
        }
        let (h, w) = (d[2], d[3]);
        let (oh, ow) = (h * factor, w * factor);
        let ty = kernels::bilinear_taps(h, factor);
        let tx = kernels::bilinear_taps(w, factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; d[0] * d[1] * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let top = (1.0 - b.frac) * plane[a.lo * w + b.lo] + b.frac * plane[a.lo * w + b.hi];
                    let bot = (1.0 - b.frac) * plane[a.hi * w + b.lo] + b.frac * plane[a.hi * w + b.hi];
                    dst[oy * ow + ox] = (1.0 - a.frac) * top + a.frac * bot;
                }
            }
        }
        let value = Tensor::new([d[0], d[1], oh, ow], out)?;
        Ok(self.push_op(value, Op::Upsample { x, factor }, &[x]))
    }

    // ---- normalization --------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::shape(format!("softmax axis {axis} of {}", v.shape())));
        }
        let (outer, extent, inner) = v.shape().around(axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let max = (0..extent)
                    .map(|e| src[base + e * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for e in 0..extent {
                    let ex = (src[base + e * inner] - max).exp();
                    out[base + e * inner] = ex;
                    total += ex;
                }
                for e in 0..extent {
                    out[base + e * inner] /= total;
                }
            }
        }
        let value = Tensor::from_shape(v.shape().clone(), out)?;
        Ok(self.push_op(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let v = self.value(x);
        let d = *v.dims().last().ok_or_else(|| Error::shape("layernorm of a scalar"))?;
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(Error::shape(format!(
                "layernorm affine {:?}/{:?} for width {d}",
                self.dims(gamma),
                self.dims(beta)
            )));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = v.numel() / d;
        let mut xhat = vec![0.0; v.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::from_shape(v.shape().clone(), out)?;
        Ok(self.push_op(
            value,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    // ---- structure ------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.dims(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let d = self.dims(v);
            let agree = d.len() == base.len()
                && d.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::shape(format!("concat {d:?} with {base:?} on axis {axis}")));
            }
            total += d[axis];
        }
        let mut out_dims = base.clone();
        out_dims[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_dims.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let block = self.dims(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(out_dims, out)?;
        Ok(self.push_op(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Contiguous sub-range `start..start+len` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let d = self.dims(x).to_vec();
        if axis >= d.len() || len == 0 || start + len > d[axis] {
            return Err(Error::shape(format!("slice {start}..{} of axis {axis} in {d:?}", start + len)));
        }
        let (outer, extent, inner) = self.value(x).shape().around(axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * extent * inner + start * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_dims = d;
        out_dims[axis] = len;
        let value = Tensor::new(out_dims, out)?;
        Ok(self.push_op(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        self.check(x)?;
        let d = self.dims(x);
        if axis >= d.len() || sizes.iter().sum::<usize>() != d[axis] {
            return Err(Error::shape(format!("split {sizes:?} of axis {axis} in {d:?}")));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let shape = Shape::new(dims.to_vec())?;
        if shape.numel() != v.numel() {
            return Err(Error::shape(format!("reshape {} to {dims:?}", v.shape())));
        }
        let value = Tensor::from_shape(shape, v.data().to_vec())?;
        Ok(self.push_op(value, Op::Reshape(x), &[x]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check(x)?;
        let d = self.dims(x).to_vec();
        let mut seen = vec![false; d.len()];
        if perm.len() != d.len() || perm.iter().any(|&p| p >= d.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("permutation {perm:?} of {d:?}")));
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| d[p]).collect();
        let mut out = vec![0.0; self.value(x).numel()];
        kernels::permute(self.value(x).data(), &d, perm, &mut out);
        let value = Tensor::new(out_dims, out)?;
        Ok(self.push_op(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    // ---- reductions -----------------------------------------------------

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::shape(format!("sum axis {axis} of {}", v.shape())));
        }
        let (outer, extent, inner) = v.shape().around(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &v.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (acc, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        let mut dims = v.dims().to_vec();
        dims[axis] = 1;
        let value = Tensor::new(dims, out)?;
        Ok(self.push_op(value, Op::SumAxis { x, axis }, &[x]))
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(self.value(x).sum());
        Ok(self.push_op(value, Op::SumAll(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Rows of `table` (gathered along axis 0) in `indices` order.
    pub fn index_select(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.check(table)?;
        let t = self.value(table);
        let rows = *t.dims().first().ok_or_else(|| Error::shape("index_select of a scalar"))?;
        if indices.is_empty() {
            return Err(Error::shape("index_select with no indices"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("index {bad} out of {rows} rows")));
        }
        let width = t.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut dims = t.dims().to_vec();
        dims[0] = indices.len();
        let value = Tensor::new(dims, out)?;
        Ok(self.push_op(
            value,
            Op::IndexSelect { table, indices: indices.to_vec() },
            &[table],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from the scalar `output`. Every node is visited once.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check(output)?;
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::NonScalarOutput(out.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !matches!(node.op, Op::Leaf) {
                self.backprop(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &self.nodes[id];
                g.filter(|_| node.needs_grad).map(|g| {
                    Tensor::from_shape(node.value.shape().clone(), g).expect("grad shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.reduce_into(*a, node, g, grads, |gi, _, _| gi);
                self.reduce_into(*b, node, g, grads, |gi, _, _| gi);
            }
            Op::Sub(a, b) => {
                self.reduce_into(*a, node, g, grads, |gi, _, _| gi);
                self.reduce_into(*b, node, g, grads, |gi, _, _| -gi);
            }
            Op::Mul(a, b) => {
                self.broadcast_backward(*a, *b, node, g, grads, |gi, _, y| gi * y, |gi, x, _| gi * x);
            }
            Op::Div(a, b) => {
                self.broadcast_backward(
                    *a,
                    *b,
                    node,
                    g,
                    grads,
                    |gi, _, y| gi / y,
                    |gi, x, y| -gi * x / (y * y),
                );
            }
            Op::Scale(x, c) => self.elementwise(*x, g, grads, |gi, _, _| gi * c, node),
            Op::AddScalar(x) => self.elementwise(*x, g, grads, |gi, _, _| gi, node),
            Op::Exp(x) => self.elementwise(*x, g, grads, |gi, _, y| gi * y, node),
            Op::Log(x) => self.elementwise(*x, g, grads, |gi, xi, _| gi / xi, node),
            Op::Gelu(x) => self.elementwise(*x, g, grads, |gi, xi, _| gi * gelu_grad(xi), node),
            Op::Relu(x) => {
                self.elementwise(*x, g, grads, |gi, xi, _| if xi > 0.0 { gi } else { 0.0 }, node)
            }
            Op::Clamp { x, lo, hi } => self.elementwise(
                *x,
                g,
                grads,
                |gi, xi, _| if xi >= *lo && xi <= *hi { gi } else { 0.0 },
                node,
            ),
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let ga = slot(grads, *a, va.len());
                    for i in 0..*batch {
                        let bo = if *shared_b { 0 } else { i * k * n };
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[bo..bo + k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, vb.len());
                    for i in 0..*batch {
                        let bo = if *shared_b { 0 } else { i * k * n };
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[bo..bo + k * n],
                            1.0,
                        );
                    }
                }
            }
            Op::Conv2d { x, w, bias, win, batch } => {
                let (vx, vw) = (val(*x), val(*w));
                let c_out = self.nodes[w.0].value.dims()[0];
                let plane = win.cols();
                let in_size = win.channels * win.height * win.width;
                let mut cols = vec![0.0; win.rows() * plane];
                for b in 0..*batch {
                    let gb = &g[b * c_out * plane..(b + 1) * c_out * plane];
                    if self.wants(*w) {
                        kernels::im2col(&vx[b * in_size..(b + 1) * in_size], win, &mut cols);
                        let gw = slot(grads, *w, vw.len());
                        kernels::gemm(c_out, plane, win.rows(), gb, false, &cols, true, gw, 1.0);
                    }
                    if self.wants(*x) {
                        kernels::gemm(win.rows(), c_out, plane, vw, true, gb, false, &mut cols, 0.0);
                        let gx = slot(grads, *x, vx.len());
                        kernels::col2im(&cols, win, &mut gx[b * in_size..(b + 1) * in_size]);
                    }
                }
                if let Some(bias) = bias {
                    self.bias_backward(*bias, c_out, plane, *batch, g, grads);
                }
            }
            Op::ConvTranspose2d { x, w, bias, win, batch, c_in } => {
                let (vx, vw) = (val(*x), val(*w));
                let c_out = win.channels;
                let out_plane = win.height * win.width;
                let in_plane = win.cols();
                let mut cols = vec![0.0; win.rows() * in_plane];
                for b in 0..*batch {
                    let gb = &g[b * c_out * out_plane..(b + 1) * c_out * out_plane];
                    kernels::im2col(gb, win, &mut cols);
                    let xs = b * c_in * in_plane..(b + 1) * c_in * in_plane;
                    if self.wants(*x) {
                        let gx = slot(grads, *x, vx.len());
                        kernels::gemm(*c_in, win.rows(), in_plane, vw, false, &cols, false, &mut gx[xs.clone()], 1.0);
                    }
                    if self.wants(*w) {
                        let gw = slot(grads, *w, vw.len());
                        kernels::gemm(*c_in, in_plane, win.rows(), &vx[xs], false, &cols, true, gw, 1.0);
                    }
                }
                if let Some(bias) = bias {
                    self.bias_backward(*bias, c_out, out_plane, *batch, g, grads);
                }
            }
            Op::Upsample { x, factor } => {
                if !self.wants(*x) {
                    return;
                }
                let d = self.nodes[x.0].value.dims();
                let (h, w) = (d[2], d[3]);
                let (oh, ow) = (h * factor, w * factor);
                let ty = kernels::bilinear_taps(h, *factor);
                let tx = kernels::bilinear_taps(w, *factor);
                let gx = slot(grads, *x, d.iter().product());
                for (p, src) in g.chunks(oh * ow).enumerate() {
                    let plane = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, a) in ty.iter().enumerate() {
                        for (ox, b) in tx.iter().enumerate() {
                            let gv = src[oy * ow + ox];
                            let top = (1.0 - a.frac) * gv;
                            let bot = a.frac * gv;
                            plane[a.lo * w + b.lo] += top * (1.0 - b.frac);
                            plane[a.lo * w + b.hi] += top * b.frac;
                            plane[a.hi * w + b.lo] += bot * (1.0 - b.frac);
                            plane[a.hi * w + b.hi] += bot * b.frac;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if !self.wants(*x) {
                    return;
                }
                let y = node.value.data();
                let (outer, extent, inner) = node.value.shape().around(*axis);
                let gx = slot(grads, *x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        let dot: f64 = (0..extent)
                            .map(|e| g[base + e * inner] * y[base + e * inner])
                            .sum();
                        for e in 0..extent {
                            let at = base + e * inner;
                            gx[at] += y[at] * (g[at] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.value.dims().last().expect("rank >= 1");
                let gam = val(*gamma);
                if self.wants(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = slot(grads, *beta, d);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let dims = node.value.dims();
                let outer: usize = dims[..*axis].iter().product();
                let inner: usize = dims[axis + 1..].iter().product();
                let total = dims[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let block = self.nodes[v.0].value.dims()[*axis] * inner;
                    if self.wants(*v) {
                        let gv = slot(grads, *v, outer * block);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + block];
                            for (a, s) in gv[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                if !self.wants(*x) {
                    return;
                }
                let src_shape = self.nodes[x.0].value.shape();
                let (outer, extent, inner) = src_shape.around(*axis);
                let len = node.value.dims()[*axis];
                let gx = slot(grads, *x, src_shape.numel());
                for o in 0..outer {
                    let off = o * extent * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (a, s) in gx[off..off + len * inner].iter_mut().zip(src) {
                        *a += s;
                    }
                }
            }
            Op::Reshape(x) => self.elementwise(*x, g, grads, |gi, _, _| gi, node),
            Op::Permute { x, perm } => {
                if !self.wants(*x) {
                    return;
                }
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let mut back = vec![0.0; g.len()];
                kernels::permute(g, node.value.dims(), &inverse, &mut back);
                let gx = slot(grads, *x, g.len());
                for (a, s) in gx.iter_mut().zip(&back) {
                    *a += s;
                }
            }
            Op::SumAxis { x, axis } => {
                if !self.wants(*x) {
                    return;
                }
                let shape = self.nodes[x.0].value.shape();
                let (outer, extent, inner) = shape.around(*axis);
                let gx = slot(grads, *x, shape.numel());
                for o in 0..outer {
                    for e in 0..extent {
                        let dst = &mut gx[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for (a, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *a += s;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    let n = self.nodes[x.0].value.numel();
                    slot(grads, *x, n).iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::IndexSelect { table, indices } => {
                if !self.wants(*table) {
                    return;
                }
                let t = &self.nodes[table.0].value;
                let width = t.numel() / t.dims()[0];
                let gt = slot(grads, *table, t.numel());
                for (r, &i) in indices.iter().enumerate() {
                    for (a, s) in gt[i * width..(i + 1) * width].iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *a += s;
                    }
                }
            }
        }
    }

    /// Same-shape unary backward: `f(grad, input, output)`.
    fn elementwise(
        &self,
        x: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(f64, f64, f64) -> f64,
        node: &Node,
    ) {
        if !self.wants(x) {
            return;
        }
        let xv = self.nodes[x.0].value.data();
        let yv = node.value.data();
        let gx = slot(grads, x, xv.len());
        for i in 0..gx.len() {
            gx[i] += f(g[i], xv[i], yv[i]);
        }
    }

    /// Backward for a binary broadcasting op whose partials depend on both
    /// operand values.
    #[allow(clippy::too_many_arguments)]
    fn broadcast_backward(
        &self,
        a: Var,
        b: Var,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        da: impl Fn(f64, f64, f64) -> f64,
        db: impl Fn(f64, f64, f64) -> f64,
    ) {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = node.value.dims();
        let sa = kernels::broadcast_strides(va.dims(), out);
        let sb = kernels::broadcast_strides(vb.dims(), out);
        let (xa, xb) = (va.data(), vb.data());
        if va.dims() == out && vb.dims() == out {
            if self.wants(a) {
                let ga = slot(grads, a, xa.len());
                for i in 0..g.len() {
                    ga[i] += da(g[i], xa[i], xb[i]);
                }
            }
            if self.wants(b) {
                let gb = slot(grads, b, xb.len());
                for i in 0..g.len() {
                    gb[i] += db(g[i], xa[i], xb[i]);
                }
            }
            return;
        }
        if self.wants(a) {
            let ga = slot(grads, a, xa.len());
            kernels::for_each_broadcast(out, &sa, &sb, |o, ia, ib| ga[ia] += da(g[o], xa[ia], xb[ib]));
        }
        if self.wants(b) {
            let gb = slot(grads, b, xb.len());
            kernels::for_each_broadcast(out, &sa, &sb, |o, ia, ib| gb[ib] += db(g[o], xa[ia], xb[ib]));
        }
    }

    /// Backward into one operand of a broadcasting op that only needs the
    /// upstream gradient.
    fn reduce_into(
        &self,
        v: Var,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        if !self.wants(v) {
            return;
        }
        let vv = &self.nodes[v.0].value;
        let gv = slot(grads, v, vv.numel());
        if vv.dims() == node.value.dims() {
            for (a, &gi) in gv.iter_mut().zip(g) {
                *a += f(gi, 0.0, 0.0);
            }
            return;
        }
        let out = node.value.dims();
        let sv = kernels::broadcast_strides(vv.dims(), out);
        let zeros = vec![0; out.len()];
        kernels::for_each_broadcast(out, &sv, &zeros, |o, iv, _| gv[iv] += f(g[o], 0.0, 0.0));
    }

    fn bias_backward(
        &self,
        bias: Var,
        channels: usize,
        plane: usize,
        batch: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        if !self.wants(bias) {
            return;
        }
        let gb = slot(grads, bias, channels);
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                gb[c] += g[off..off + plane].iter().sum::<f64>();
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn conv_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} larger than padded extent {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::NonIntegralOutput(format!(
            "({size} + 2*{pad} - {kernel}) / {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}
