//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order. [`Graph::backward`] walks the nodes once in
//! reverse and accumulates vector-Jacobian products into the inputs that
//! require gradients.
//!
//! Layout conventions: images are `[N, C, H, W]`, matrices are `[rows, cols]`.
//! Broadcasting is limited to a single-element operand in `add`, `sub` and
//! `mul`, plus the channel-wise forms `add_bias` and `affine_scale_shift`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    MatMul,
    /// Stride 1, zero "same" padding, odd kernel. Inputs `[x, w]` or `[x, w, b]`.
    Conv2d,
    Silu,
    Relu,
    Mean,
    Sum,
    Abs,
    ConcatChannels,
    /// 2x2 average pooling.
    Downsample2x,
    /// Nearest-neighbour upsampling.
    Upsample2x,
    /// `x * scale[n, c] + shift[n, c]`. Inputs `[x, scale, shift]`.
    AffineScaleShift,
    /// Adds a `[C]` vector along dimension 1.
    AddBias,
    /// Multiplication by a constant.
    Scale(f32),
    /// Addition of a constant.
    AddScalar(f32),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Silu => "silu",
            OpKind::Relu => "relu",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Abs => "abs",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Downsample2x => "downsample2x",
            OpKind::Upsample2x => "upsample2x",
            OpKind::AffineScaleShift => "affine_scale_shift",
            OpKind::AddBias => "add_bias",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<OpKind>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Recorded computation. Create one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a copy of `t`; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        value.set_requires_grad(false);
        self.push(value, None, Vec::new(), t.requires_grad())
    }

    /// Inserts a non-differentiable value without copying.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        t.clear_grad();
        self.push(t, None, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient held for `v` into `param`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, param: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => param.accumulate_grad(g),
            None => param.accumulate_grad(&vec![0.0; param.numel()]),
        }
    }

    fn push(&mut self, value: Tensor, op: Option<OpKind>, inputs: Vec<Var>, rg: bool) -> Var {
        self.nodes.push(Node { value, op, inputs, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `kind` on `inputs` and records it.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::invalid(format!("{}: unknown node {}", kind.name(), v.0)));
            }
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(kind, &vals)?;
        if !out.is_finite() {
            return Err(Error::numeric(format!("{} produced a non-finite value", kind.name())));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(out, Some(kind), inputs.to_vec(), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(OpKind::Conv2d, &[x, w, b]),
            None => self.apply(OpKind::Conv2d, &[x, w]),
        }
    }
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Silu, &[x])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Abs, &[x])
    }
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatChannels, xs)
    }
    pub fn downsample2x(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Downsample2x, &[x])
    }
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Upsample2x, &[x])
    }
    pub fn affine_scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.apply(OpKind::AffineScaleShift, &[x, scale, shift])
    }
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::AddBias, &[x, b])
    }
    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }
    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        self.apply(OpKind::AddScalar(c), &[x])
    }

    /// `x @ w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Mean squared difference, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Mean absolute difference, reduced to a scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d)?;
        self.mean(ad)
    }

    /// Populates gradients of the scalar `loss` for every differentiable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lnode = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid(format!("backward: unknown node {}", loss.0)))?;
        if lnode.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lnode.value.shape()),
            ));
        }
        if !lnode.requires_grad {
            return Err(Error::invalid("backward: loss does not depend on any trainable tensor"));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = self.grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(op) = node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let gins = backward_rule(op, &inputs, &node.value, &gout, &need)?;
                let input_ids = node.inputs.clone();
                for ((v, g), needed) in input_ids.into_iter().zip(gins).zip(need) {
                    if !needed {
                        continue;
                    }
                    let Some(g) = g else { continue };
                    match &mut self.grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            // Leaves keep their gradient; interior gradients are released.
            if self.nodes[id].op.is_none() {
                self.grads[id] = Some(gout);
            }
        }
        Ok(())
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        s => Err(Error::shape(op, format!("expected [N, C, H, W], got {s:?}"))),
    }
}

fn arity(op: OpKind, inputs: &[&Tensor], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{}: expected {:?} inputs, got {}", op.name(), allowed, inputs.len())))
    }
}

/// Computes one operation without recording it.
pub fn forward(op: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            arity(op, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            let f: fn(f32, f32) -> f32 = match op {
                OpKind::Add => |x, y| x + y,
                OpKind::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape(), data)
            } else if b.numel() == 1 {
                let s = b.data()[0];
                Tensor::new(a.shape(), a.data().iter().map(|&x| f(x, s)).collect())
            } else if a.numel() == 1 {
                let s = a.data()[0];
                Tensor::new(b.shape(), b.data().iter().map(|&y| f(s, y)).collect())
            } else {
                Err(Error::shape(op.name(), format!("{:?} vs {:?}", a.shape(), b.shape())))
            }
        }
        OpKind::MatMul => {
            arity(op, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = match (a.shape(), b.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
                (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} vs {sb:?}"))),
            };
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
            Tensor::new(&[m, n], out)
        }
        OpKind::Conv2d => {
            arity(op, inputs, &[2, 3])?;
            let (x, w) = (inputs[0], inputs[1]);
            let (n, ci, h, wd) = dims4("conv2d", x)?;
            let (co, kh, kw) = conv_weight_dims(x, w)?;
            if let Some(b) = inputs.get(2) {
                if b.shape() != [co] {
                    return Err(Error::shape("conv2d", format!("bias {:?} for {co} output channels", b.shape())));
                }
            }
            let mut out = vec![0.0; n * co * h * wd];
            let hw = h * wd;
            let kk = ci * kh * kw;
            let mut cols = vec![0.0; kk * hw];
            for s in 0..n {
                kernels::im2col(&x.data()[s * ci * hw..(s + 1) * ci * hw], ci, h, wd, kh, kw, &mut cols);
                let o = &mut out[s * co * hw..(s + 1) * co * hw];
                if let Some(b) = inputs.get(2) {
                    for (c, plane) in o.chunks_exact_mut(hw).enumerate() {
                        plane.iter_mut().for_each(|v| *v = b.data()[c]);
                    }
                }
                let beta = if inputs.len() == 3 { 1.0 } else { 0.0 };
                kernels::gemm(co, kk, hw, w.data(), false, &cols, false, o, beta);
            }
            Tensor::new(&[n, co, h, wd], out)
        }
        OpKind::Silu => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            Tensor::new(x.shape(), x.data().iter().map(|&v| v * sigmoid(v)).collect())
        }
        OpKind::Relu => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())
        }
        OpKind::Abs => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            Tensor::new(x.shape(), x.data().iter().map(|v| v.abs()).collect())
        }
        OpKind::Sum | OpKind::Mean => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let s: f64 = x.data().iter().map(|&v| v as f64).sum();
            let v = if op == OpKind::Mean { s / x.numel() as f64 } else { s };
            Ok(Tensor::scalar(v as f32))
        }
        OpKind::ConcatChannels => {
            if inputs.is_empty() {
                return Err(Error::invalid("concat_channels: no inputs"));
            }
            let (n, _, h, w) = dims4("concat_channels", inputs[0])?;
            let mut ctot = 0;
            for t in inputs {
                let (n2, c2, h2, w2) = dims4("concat_channels", t)?;
                if (n2, h2, w2) != (n, h, w) {
                    return Err(Error::shape(
                        "concat_channels",
                        format!("{:?} vs {:?}", inputs[0].shape(), t.shape()),
                    ));
                }
                ctot += c2;
            }
            let hw = h * w;
            let mut out = Vec::with_capacity(n * ctot * hw);
            for s in 0..n {
                for t in inputs {
                    let c = t.shape()[1];
                    out.extend_from_slice(&t.data()[s * c * hw..(s + 1) * c * hw]);
                }
            }
            Tensor::new(&[n, ctot, h, w], out)
        }
        OpKind::Downsample2x => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let (n, c, h, w) = dims4("downsample2x", x)?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape("downsample2x", format!("odd spatial extent in {:?}", x.shape())));
            }
            let (ho, wo) = (h / 2, w / 2);
            let src = x.data();
            let mut out = vec![0.0; n * c * ho * wo];
            for p in 0..n * c {
                let ip = &src[p * h * w..(p + 1) * h * w];
                let op_ = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        let a = ip[2 * i * w + 2 * j] + ip[2 * i * w + 2 * j + 1];
                        let b = ip[(2 * i + 1) * w + 2 * j] + ip[(2 * i + 1) * w + 2 * j + 1];
                        op_[i * wo + j] = 0.25 * (a + b);
                    }
                }
            }
            Tensor::new(&[n, c, ho, wo], out)
        }
        OpKind::Upsample2x => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            let (n, c, h, w) = dims4("upsample2x", x)?;
            let (ho, wo) = (h * 2, w * 2);
            let src = x.data();
            let mut out = vec![0.0; n * c * ho * wo];
            for p in 0..n * c {
                let ip = &src[p * h * w..(p + 1) * h * w];
                let op_ = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        op_[i * wo + j] = ip[(i / 2) * w + j / 2];
                    }
                }
            }
            Tensor::new(&[n, c, ho, wo], out)
        }
        OpKind::AffineScaleShift => {
            arity(op, inputs, &[3])?;
            let (x, sc, sh) = (inputs[0], inputs[1], inputs[2]);
            let (n, c, h, w) = dims4("affine_scale_shift", x)?;
            if sc.shape() != [n, c] || sh.shape() != [n, c] {
                return Err(Error::shape(
                    "affine_scale_shift",
                    format!("x {:?} needs scale/shift [{n}, {c}], got {:?} and {:?}", x.shape(), sc.shape(), sh.shape()),
                ));
            }
            let hw = h * w;
            let mut out = x.data().to_vec();
            for (p, plane) in out.chunks_exact_mut(hw).enumerate() {
                let (a, b) = (sc.data()[p], sh.data()[p]);
                plane.iter_mut().for_each(|v| *v = *v * a + b);
            }
            Tensor::new(x.shape(), out)
        }
        OpKind::AddBias => {
            arity(op, inputs, &[2])?;
            let (x, b) = (inputs[0], inputs[1]);
            if x.rank() < 2 || b.shape() != [x.shape()[1]] {
                return Err(Error::shape("add_bias", format!("x {:?} vs bias {:?}", x.shape(), b.shape())));
            }
            let c = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let mut out = x.data().to_vec();
            for (p, chunk) in out.chunks_exact_mut(inner).enumerate() {
                let bv = b.data()[p % c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
            Tensor::new(x.shape(), out)
        }
        OpKind::Scale(k) => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            Tensor::new(x.shape(), x.data().iter().map(|&v| v * k).collect())
        }
        OpKind::AddScalar(k) => {
            arity(op, inputs, &[1])?;
            let x = inputs[0];
            Tensor::new(x.shape(), x.data().iter().map(|&v| v + k).collect())
        }
    }
}

fn conv_weight_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    let ci = x.shape()[1];
    match w.shape() {
        &[co, wci, kh, kw] if wci == ci && kh % 2 == 1 && kw % 2 == 1 => Ok((co, kh, kw)),
        s => Err(Error::shape(
            "conv2d",
            format!("input {:?} vs weight {s:?} (need [C_out, {ci}, odd, odd])", x.shape()),
        )),
    }
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Gradients for each input given the output gradient `g`. Entries are
/// `None` where the input does not need a gradient.
fn backward_rule(
    op: OpKind,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &[f32],
    need: &[bool],
) -> Result<Vec<Option<Vec<f32>>>> {
    let sum_f64 = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() as f32;
    let res = match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let sign = if op == OpKind::Sub { -1.0 } else { 1.0 };
            // Per-element partials before reducing broadcast operands.
            let ga: Vec<f32> = match op {
                OpKind::Mul => {
                    let bd = b.data();
                    if b.numel() == 1 && a.numel() != 1 {
                        g.iter().map(|&gv| gv * bd[0]).collect()
                    } else {
                        g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect()
                    }
                }
                _ => g.to_vec(),
            };
            let gb: Vec<f32> = match op {
                OpKind::Mul => {
                    let ad = a.data();
                    if a.numel() == 1 && b.numel() != 1 {
                        g.iter().map(|&gv| gv * ad[0]).collect()
                    } else {
                        g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect()
                    }
                }
                _ => g.iter().map(|&gv| sign * gv).collect(),
            };
            let reduce = |t: &Tensor, full: Vec<f32>| {
                if t.numel() == 1 && out.numel() != 1 {
                    vec![sum_f64(&full)]
                } else {
                    full
                }
            };
            vec![
                need[0].then(|| reduce(a, ga)),
                need[1].then(|| reduce(b, gb)),
            ]
        }
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, false, b.data(), true, &mut ga, 0.0);
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, a.data(), true, g, false, &mut gb, 0.0);
                gb
            });
            vec![ga, gb]
        }
        OpKind::Conv2d => {
            let (x, w) = (inputs[0], inputs[1]);
            let (n, ci, h, wd) = dims4("conv2d", x)?;
            let (co, kh, kw) = conv_weight_dims(x, w)?;
            let hw = h * wd;
            let kk = ci * kh * kw;
            let mut gx = need[0].then(|| vec![0.0; x.numel()]);
            let mut gw = need[1].then(|| vec![0.0f32; w.numel()]);
            let mut cols = vec![0.0; kk * hw];
            let mut dcols = vec![0.0; kk * hw];
            for s in 0..n {
                let gs = &g[s * co * hw..(s + 1) * co * hw];
                if let Some(gw) = gw.as_mut() {
                    kernels::im2col(&x.data()[s * ci * hw..(s + 1) * ci * hw], ci, h, wd, kh, kw, &mut cols);
                    kernels::gemm(co, hw, kk, gs, false, &cols, true, gw, 1.0);
                }
                if let Some(gx) = gx.as_mut() {
                    kernels::gemm(kk, co, hw, w.data(), true, gs, false, &mut dcols, 0.0);
                    kernels::col2im(&dcols, ci, h, wd, kh, kw, &mut gx[s * ci * hw..(s + 1) * ci * hw]);
                }
            }
            let mut res = vec![gx, gw];
            if inputs.len() == 3 {
                res.push(need[2].then(|| {
                    let mut gb = vec![0.0f64; co];
                    for s in 0..n {
                        for c in 0..co {
                            let off = (s * co + c) * hw;
                            gb[c] += g[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
                        }
                    }
                    gb.into_iter().map(|v| v as f32).collect()
                }));
            }
            res
        }
        OpKind::Silu => {
            let x = inputs[0];
            vec![Some(
                x.data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect(),
            )]
        }
        OpKind::Relu => {
            let x = inputs[0];
            vec![Some(x.data().iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect())]
        }
        OpKind::Abs => {
            let x = inputs[0];
            vec![Some(
                x.data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else if v < 0.0 { -gv } else { 0.0 })
                    .collect(),
            )]
        }
        OpKind::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
        OpKind::Mean => {
            let n = inputs[0].numel();
            vec![Some(vec![g[0] / n as f32; n])]
        }
        OpKind::ConcatChannels => {
            let (n, _, h, w) = dims4("concat_channels", out)?;
            let hw = h * w;
            let ctot = out.shape()[1];
            let mut res = Vec::with_capacity(inputs.len());
            let mut c0 = 0;
            for (t, &nd) in inputs.iter().zip(need) {
                let c = t.shape()[1];
                if nd {
                    let mut gi = Vec::with_capacity(t.numel());
                    for s in 0..n {
                        let off = (s * ctot + c0) * hw;
                        gi.extend_from_slice(&g[off..off + c * hw]);
                    }
                    res.push(Some(gi));
                } else {
                    res.push(None);
                }
                c0 += c;
            }
            res
        }
        OpKind::Downsample2x => {
            let (n, c, h, w) = dims4("downsample2x", inputs[0])?;
            let (ho, wo) = (h / 2, w / 2);
            let mut gi = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                let ip = &mut gi[p * h * w..(p + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        ip[i * w + j] = 0.25 * gp[(i / 2) * wo + j / 2];
                    }
                }
            }
            vec![Some(gi)]
        }
        OpKind::Upsample2x => {
            let (n, c, h, w) = dims4("upsample2x", inputs[0])?;
            let (ho, wo) = (h * 2, w * 2);
            let mut gi = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                let ip = &mut gi[p * h * w..(p + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        let a = gp[2 * i * wo + 2 * j] + gp[2 * i * wo + 2 * j + 1];
                        let b = gp[(2 * i + 1) * wo + 2 * j] + gp[(2 * i + 1) * wo + 2 * j + 1];
                        ip[i * w + j] = a + b;
                    }
                }
            }
            vec![Some(gi)]
        }
        OpKind::AffineScaleShift => {
            let (x, sc) = (inputs[0], inputs[1]);
            let (_, _, h, w) = dims4("affine_scale_shift", x)?;
            let hw = h * w;
            let gx = need[0].then(|| {
                let mut gx = g.to_vec();
                for (p, plane) in gx.chunks_exact_mut(hw).enumerate() {
                    let a = sc.data()[p];
                    plane.iter_mut().for_each(|v| *v *= a);
                }
                gx
            });
            let gsc = need[1].then(|| {
                g.chunks_exact(hw)
                    .zip(x.data().chunks_exact(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32)
                    .collect()
            });
            let gsh = need[2].then(|| g.chunks_exact(hw).map(sum_f64).collect());
            vec![gx, gsc, gsh]
        }
        OpKind::AddBias => {
            let x = inputs[0];
            let c = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let gb = need[1].then(|| {
                let mut acc = vec![0.0f64; c];
                for (p, chunk) in g.chunks_exact(inner).enumerate() {
                    acc[p % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                }
                acc.into_iter().map(|v| v as f32).collect()
            });
            vec![need[0].then(|| g.to_vec()), gb]
        }
        OpKind::Scale(k) => vec![Some(g.iter().map(|&v| v * k).collect())],
        OpKind::AddScalar(_) => vec![Some(g.to_vec())],
    };
    Ok(res)
}

pub(crate) mod kernels {
    /// `c = op(a) @ op(b) + beta * c` for row-major `a` (`m x k` after op)
    /// and `b` (`k x n` after op).
    #[allow(clippy::too_many_arguments)]
    pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32], beta: f32) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        // SAFETY: the strides above address exactly the m*k, k*n and m*n
        // row-major buffers whose lengths are asserted by the callers.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// Unfolds a `[C, H, W]` image into `[C * kh * kw, H * W]` patch columns
    /// with zero padding.
    pub fn im2col(x: &[f32], c: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut [f32]) {
        let (ph, pw) = (kh / 2, kw / 2);
        let hw = h * w;
        for ci in 0..c {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &mut cols[((ci * kh + ky) * kw + kx) * hw..][..hw];
                    let dx = kx as isize - pw as isize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for i in 0..h {
                        let si = i as isize + ky as isize - ph as isize;
                        let dst = &mut row[i * w..(i + 1) * w];
                        if si < 0 || si >= h as isize || x0 >= x1 {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[si as usize * w..(si as usize + 1) * w];
                        dst[..x0].iter_mut().for_each(|v| *v = 0.0);
                        dst[x1..].iter_mut().for_each(|v| *v = 0.0);
                        let s0 = (x0 as isize + dx) as usize;
                        dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatters columns back onto a zeroed image.
    pub fn col2im(cols: &[f32], c: usize, h: usize, w: usize, kh: usize, kw: usize, x: &mut [f32]) {
        let (ph, pw) = (kh / 2, kw / 2);
        let hw = h * w;
        for ci in 0..c {
            let plane = &mut x[ci * hw..(ci + 1) * hw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &cols[((ci * kh + ky) * kw + kx) * hw..][..hw];
                    let dx = kx as isize - pw as isize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for i in 0..h {
                        let si = i as isize + ky as isize - ph as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let s0 = (x0 as isize + dx) as usize;
                        let dst = &mut plane[si as usize * w + s0..][..x1 - x0];
                        dst.iter_mut().zip(&row[i * w + x0..i * w + x1]).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
}
