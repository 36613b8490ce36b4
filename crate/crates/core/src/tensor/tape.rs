use std::sync::Arc;

use super::conv::{self, ConvGeom};
use super::resize::ResizePlan;
use super::{chw, numel, DiffTensor, ParamSet, PROB_EPS};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse per-pixel neighbourhood weights: pixel `p` pairs with the
/// entries `offsets[p]..offsets[p + 1]` of `(neighbors, weights)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborWeights {
    pub height: usize,
    pub width: usize,
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
}

impl NeighborWeights {
    pub fn pixel(&self, p: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[p]..self.offsets[p + 1];
        self.neighbors[range.clone()]
            .iter()
            .copied()
            .zip(self.weights[range].iter().copied())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    Resize {
        input: Var,
        plan: ResizePlan,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Silu(Var),
    Abs(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    SoftmaxChannels(Var),
    ConcatChannels(Vec<Var>),
    SumChannels(Var),
    SelectChannel(Var, usize),
    Sum(Var),
    Mean(Var),
    StopGradient,
    NeighborhoodL1 {
        input: Var,
        targets: Vec<f64>,
        weights: Arc<NeighborWeights>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the loss does not depend on `var` through a differentiable path.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Append-only record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(String, Var)>,
}

/// How two operand shapes combine elementwise.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    /// Left operand has one channel and repeats over the right's channels.
    Left(usize),
    /// Right operand has one channel.
    Right(usize),
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> DiffTensor {
        let n = &self.nodes[v.0];
        DiffTensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: DiffTensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), true, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: DiffTensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), false, Op::Constant)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        Ok(self.constant(DiffTensor::new(shape, values)?))
    }

    /// Binds a named parameter as a differentiable leaf. Binding the same
    /// name twice on one tape returns the existing node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.bound.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), true, Op::Leaf);
        self.bound.push((name.to_string(), v));
        Ok(v)
    }

    pub(crate) fn bound_vars<'a>(&'a self, name: &'a str) -> impl Iterator<Item = Var> + 'a {
        self.bound
            .iter()
            .filter(move |(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    // ---------------------------------------------------------------- layers

    /// Zero-padded cross-correlation of a `[C, H, W]` input with an
    /// `[O, C, kh, kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (in_c, in_h, in_w) = chw(self.shape(input))?;
        let (out_c, k_c, kh, kw) = match self.shape(kernel) {
            [o, c, kh, kw] => (*o, *c, *kh, *kw),
            s => {
                return Err(Error::shape(format!(
                    "conv2d kernel must be [out, in, kh, kw], got {s:?}"
                )))
            }
        };
        if k_c != in_c {
            return Err(Error::shape(format!(
                "conv2d kernel expects {k_c} input channels, input has {in_c}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {in_h}x{in_w} (pad {padding})"
            )));
        }
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
        };
        let cols = conv::im2col(self.value(input), &geom);
        let out = conv::forward(self.value(kernel), &cols, &geom);
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            vec![out_c, geom.out_h, geom.out_w],
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        ))
    }

    /// Adds a per-channel bias of shape `[C]`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(input))?;
        if self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "bias of shape {:?} for {c}-channel input",
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(input).to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            for v in plane {
                *v += b[ch];
            }
        }
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(vec![c, h, w], out, rg, Op::BiasAdd { input, bias }))
    }

    /// Bilinear resize with half-pixel-center alignment.
    pub fn bilinear_resize(&mut self, input: Var, target_h: usize, target_w: usize) -> Result<Var> {
        if target_h == 0 || target_w == 0 {
            return Err(Error::invalid(format!(
                "resize target must be at least 1x1, got {target_h}x{target_w}"
            )));
        }
        let (c, h, w) = chw(self.shape(input))?;
        if h == 0 || w == 0 {
            return Err(Error::shape("cannot resize an empty map"));
        }
        let plan = ResizePlan::new(h, w, target_h, target_w);
        let out = plan.forward(self.value(input), c);
        let rg = self.rg(input);
        Ok(self.push(
            vec![c, target_h, target_w],
            out,
            rg,
            Op::Resize { input, plan },
        ))
    }

    // ------------------------------------------------------------ elementwise

    fn bcast(&self, a: Var, b: Var) -> Result<(Vec<usize>, Bcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((sa.to_vec(), Bcast::Same));
        }
        if let ([ca, ha, wa], [cb, hb, wb]) = (sa, sb) {
            if ha == hb && wa == wb {
                if *ca == 1 {
                    return Ok((sb.to_vec(), Bcast::Left(ha * wa)));
                }
                if *cb == 1 {
                    return Ok((sa.to_vec(), Bcast::Right(ha * wa)));
                }
            }
        }
        Err(Error::shape(format!(
            "incompatible operand shapes {sa:?} and {sb:?}"
        )))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (shape, mode) = self.bcast(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = numel(&shape);
        let out: Vec<f64> = match mode {
            Bcast::Same => va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect(),
            Bcast::Left(plane) => (0..n).map(|i| f(va[i % plane], vb[i])).collect(),
            Bcast::Right(plane) => (0..n).map(|i| f(va[i], vb[i % plane])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, rg, op)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        self.unary(x, |v| v + offset, Op::AddScalar(x))
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log of `max(x, PROB_EPS)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(PROB_EPS).ln(), Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::invalid(format!("clamp bounds [{lo}, {hi}] are empty")));
        }
        Ok(self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { input: x, lo, hi }))
    }

    /// Passes values through, blocks gradients.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).to_vec();
        self.push(shape, value, false, Op::StopGradient)
    }

    // ---------------------------------------------------------- channel ops

    pub fn softmax_over_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(x))?;
        let plane = h * w;
        let v = self.value(x);
        let mut out = vec![0.0; c * plane];
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(v[ch * plane + p]);
            }
            let mut total = 0.0;
            for ch in 0..c {
                let e = (v[ch * plane + p] - max).exp();
                out[ch * plane + p] = e;
                total += e;
            }
            for ch in 0..c {
                out[ch * plane + p] /= total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, h, w], out, rg, Op::SoftmaxChannels(x)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels needs at least one input"))?;
        let (_, h, w) = chw(self.shape(*first))?;
        let mut total_c = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (c, ph, pw) = chw(self.shape(p))?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "concat_channels spatial mismatch: {h}x{w} vs {ph}x{pw}"
                )));
            }
            total_c += c;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            vec![total_c, h, w],
            out,
            rg,
            Op::ConcatChannels(parts.to_vec()),
        ))
    }

    /// `[C, H, W] -> [1, H, W]`
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(x))?;
        let plane = h * w;
        let v = self.value(x);
        let mut out = vec![0.0; plane];
        for ch in 0..c {
            for (o, s) in out.iter_mut().zip(&v[ch * plane..(ch + 1) * plane]) {
                *o += s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![1, h, w], out, rg, Op::SumChannels(x)))
    }

    /// `[C, H, W] -> [1, H, W]` holding channel `channel`.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let (c, h, w) = chw(self.shape(x))?;
        if channel >= c {
            return Err(Error::shape(format!(
                "channel {channel} out of range for {c}-channel tensor"
            )));
        }
        let plane = h * w;
        let out = self.value(x)[channel * plane..(channel + 1) * plane].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![1, h, w], out, rg, Op::SelectChannel(x, channel)))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], rg, Op::Mean(x))
    }

    /// `sum_p sum_q w(p, q) * |x(p) - target(q)|` over a single-channel map,
    /// with the targets held constant.
    pub fn neighborhood_l1(
        &mut self,
        x: Var,
        targets: Vec<f64>,
        weights: Arc<NeighborWeights>,
    ) -> Result<Var> {
        let (c, h, w) = chw(self.shape(x))?;
        if c != 1 || h != weights.height || w != weights.width || targets.len() != h * w {
            return Err(Error::shape(format!(
                "neighborhood_l1 expects a 1x{}x{} map and matching targets, got {:?} and {} targets",
                weights.height,
                weights.width,
                self.shape(x),
                targets.len()
            )));
        }
        let v = self.value(x);
        let mut total = 0.0;
        for (p, &vp) in v.iter().enumerate() {
            for (q, wq) in weights.pixel(p) {
                total += wq * (vp - targets[q]).abs();
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Vec::new(),
            vec![total],
            rg,
            Op::NeighborhoodL1 {
                input: x,
                targets,
                weights,
            },
        ))
    }

    // -------------------------------------------------------------- backward

    /// Reverse accumulation from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Convenience: backward plus accumulation into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.backward(loss)?;
        params.accumulate_grads(self, &grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reduces a full-shape gradient onto a broadcast (single-channel) operand.
    fn reduce_bcast(g: &[f64], plane: usize) -> Vec<f64> {
        let mut out = vec![0.0; plane];
        for chunk in g.chunks(plane) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        out
    }

    fn binary_grads(
        &self,
        a: Var,
        b: Var,
        g: &[f64],
        da: impl Fn(f64, f64, f64) -> f64,
        db: impl Fn(f64, f64, f64) -> f64,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (_, mode) = self.bcast(a, b).expect("shapes validated in forward");
        let (va, vb) = (self.value(a), self.value(b));
        let (ia, ib): (Box<dyn Fn(usize) -> usize>, Box<dyn Fn(usize) -> usize>) = match mode {
            Bcast::Same => (Box::new(|i| i), Box::new(|i| i)),
            Bcast::Left(p) => (Box::new(move |i| i % p), Box::new(|i| i)),
            Bcast::Right(p) => (Box::new(|i| i), Box::new(move |i| i % p)),
        };
        if self.rg(a) {
            let full: Vec<f64> = (0..g.len())
                .map(|i| da(g[i], va[ia(i)], vb[ib(i)]))
                .collect();
            let d = match mode {
                Bcast::Left(p) => Self::reduce_bcast(&full, p),
                _ => full,
            };
            self.accumulate(grads, a, d);
        }
        if self.rg(b) {
            let full: Vec<f64> = (0..g.len())
                .map(|i| db(g[i], va[ia(i)], vb[ib(i)]))
                .collect();
            let d = match mode {
                Bcast::Right(p) => Self::reduce_bcast(&full, p),
                _ => full,
            };
            self.accumulate(grads, b, d);
        }
    }

    fn unary_grad(
        &self,
        x: Var,
        out: &[f64],
        g: &[f64],
        f: impl Fn(f64, f64, f64) -> f64,
        grads: &mut [Option<Vec<f64>>],
    ) {
        if !self.rg(x) {
            return;
        }
        let xv = self.value(x);
        let d = g
            .iter()
            .zip(xv)
            .zip(out)
            .map(|((g, x), y)| f(*g, *x, *y))
            .collect();
        self.accumulate(grads, x, d);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                if self.rg(*kernel) {
                    self.accumulate(grads, *kernel, conv::kernel_grad(g, cols, geom));
                }
                if self.rg(*input) {
                    let dcols = conv::cols_grad(self.value(*kernel), g, geom);
                    self.accumulate(grads, *input, conv::col2im(&dcols, geom));
                }
            }
            Op::BiasAdd { input, bias } => {
                self.accumulate(grads, *input, g.to_vec());
                if self.rg(*bias) {
                    let c = self.shape(*bias)[0];
                    let plane = g.len() / c.max(1);
                    let db = g.chunks(plane).map(|ch| ch.iter().sum()).collect();
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Resize { input, plan } => {
                if self.rg(*input) {
                    let c = self.shape(*input)[0];
                    self.accumulate(grads, *input, plan.backward(g, c));
                }
            }
            Op::Add(a, b) => self.binary_grads(*a, *b, g, |g, _, _| g, |g, _, _| g, grads),
            Op::Sub(a, b) => self.binary_grads(*a, *b, g, |g, _, _| g, |g, _, _| -g, grads),
            Op::Mul(a, b) => {
                self.binary_grads(*a, *b, g, |g, _, y| g * y, |g, x, _| g * x, grads)
            }
            Op::Div(a, b) => self.binary_grads(
                *a,
                *b,
                g,
                |g, _, y| g / y,
                |g, x, y| -g * x / (y * y),
                grads,
            ),
            Op::Scale(x, f) => {
                let f = *f;
                self.unary_grad(*x, out, g, |g, _, _| g * f, grads)
            }
            Op::AddScalar(x) => self.unary_grad(*x, out, g, |g, _, _| g, grads),
            Op::Exp(x) => self.unary_grad(*x, out, g, |g, _, y| g * y, grads),
            Op::Log(x) => self.unary_grad(
                *x,
                out,
                g,
                |g, x, _| if x > PROB_EPS { g / x } else { 0.0 },
                grads,
            ),
            Op::Sigmoid(x) => self.unary_grad(*x, out, g, |g, _, y| g * y * (1.0 - y), grads),
            Op::Silu(x) => self.unary_grad(
                *x,
                out,
                g,
                |g, x, _| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                },
                grads,
            ),
            Op::Abs(x) => self.unary_grad(*x, out, g, |g, x, _| g * sign(x), grads),
            Op::Clamp { input, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.unary_grad(
                    *input,
                    out,
                    g,
                    |g, x, _| if x > lo && x < hi { g } else { 0.0 },
                    grads,
                )
            }
            Op::SoftmaxChannels(x) => {
                if self.rg(*x) {
                    let (c, h, w) = chw(&node.shape).expect("validated in forward");
                    let plane = h * w;
                    let mut d = vec![0.0; c * plane];
                    for p in 0..plane {
                        let dot: f64 = (0..c).map(|k| g[k * plane + p] * out[k * plane + p]).sum();
                        for k in 0..c {
                            let idx = k * plane + p;
                            d[idx] = out[idx] * (g[idx] - dot);
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::ConcatChannels(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SumChannels(x) => {
                if self.rg(*x) {
                    let c = self.shape(*x)[0];
                    let d = (0..c).flat_map(|_| g.iter().copied()).collect();
                    self.accumulate(grads, *x, d);
                }
            }
            Op::SelectChannel(x, channel) => {
                if self.rg(*x) {
                    let mut d = vec![0.0; self.value(*x).len()];
                    let plane = g.len();
                    d[channel * plane..(channel + 1) * plane].copy_from_slice(g);
                    self.accumulate(grads, *x, d);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::NeighborhoodL1 {
                input,
                targets,
                weights,
            } => {
                if self.rg(*input) {
                    let v = self.value(*input);
                    let d = v
                        .iter()
                        .enumerate()
                        .map(|(p, &vp)| {
                            g[0] * weights
                                .pixel(p)
                                .map(|(q, wq)| wq * sign(vp - targets[q]))
                                .sum::<f64>()
                        })
                        .collect();
                    self.accumulate(grads, *input, d);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
