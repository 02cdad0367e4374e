use super::kernels::{self, PoolMode, Region};
use super::{broadcast_index_map, broadcast_shape, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded operation. Inputs refer to earlier entries of the same tape.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Norm2(Var),
    Conv2d { input: Var, kernel: Var, bias: Var, padding: usize },
    Pool2d { input: Var, window: usize, mode: PoolMode },
    Upsample { input: Var, factor: usize },
    Softmax { input: Var, axis: usize, temps: Option<Vec<f64>>, log: bool },
    Narrow { input: Var, start: usize, len: usize },
    Gather { input: Var, labels: Vec<usize> },
    RegionPool { input: Var, regions: Vec<Region> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Norm2(_) => "norm2",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool2d { .. } => "pool2d",
            Op::Upsample { .. } => "upsample",
            Op::Softmax { log: false, .. } => "softmax",
            Op::Softmax { log: true, .. } => "log_softmax",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::RegionPool { .. } => "region_pool",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Log(a) | Op::Exp(a) | Op::Sqrt(a) | Op::Sum(a) | Op::Mean(a) | Op::Norm2(a) => vec![a],
            Op::Conv2d { input, kernel, bias, .. } => vec![input, kernel, bias],
            Op::Pool2d { input, .. }
            | Op::Upsample { input, .. }
            | Op::Softmax { input, .. }
            | Op::Narrow { input, .. }
            | Op::Gather { input, .. }
            | Op::RegionPool { input, .. } => vec![input],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Every method that creates a value appends exactly one node, so node order
/// is execution order and [`Tape::backward`] walks it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if `var` requires grad.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Registers an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(TensorError::ForeignVar(var.0));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let inputs = op.inputs();
        for &v in &inputs {
            self.check(v)?;
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape())?;
            let ma = broadcast_index_map(ta.shape(), &shape);
            let mb = broadcast_index_map(tb.shape(), &shape);
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(ta.data()[i], tb.data()[j])).collect();
            Tensor::new(shape, data)?
        };
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(TensorError::LogDomain(bad));
        }
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(TensorError::Invalid(format!("sqrt of non-positive value {bad}")));
        }
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken as zero.
    pub fn norm2(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Op::Norm2(a), Tensor::scalar(s))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), padding)?;
        self.push(Op::Conv2d { input, kernel, bias, padding }, out)
    }

    pub fn pool2d(&mut self, input: Var, window: usize, mode: PoolMode) -> Result<Var> {
        self.check(input)?;
        let out = kernels::pool2d_forward(self.value(input), window, mode)?;
        self.push(Op::Pool2d { input, window, mode }, out)
    }

    /// Bilinear resize of a `[c, h, w]` map by an integer factor (half-pixel centers).
    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        self.check(input)?;
        let out = kernels::upsample_forward(self.value(input), factor)?;
        self.push(Op::Upsample { input, factor }, out)
    }

    pub fn softmax(&mut self, input: Var, axis: usize, temps: Option<&[f64]>) -> Result<Var> {
        self.softmax_impl(input, axis, temps, false)
    }

    pub fn log_softmax(&mut self, input: Var, axis: usize, temps: Option<&[f64]>) -> Result<Var> {
        self.softmax_impl(input, axis, temps, true)
    }

    fn softmax_impl(&mut self, input: Var, axis: usize, temps: Option<&[f64]>, log: bool) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let mut out = Tensor::zeros(x.shape());
        kernels::softmax_axis(x, axis, temps, log, out.data_mut())?;
        self.push(Op::Softmax { input, axis, temps: temps.map(<[f64]>::to_vec), log }, out)
    }

    /// First-axis slice `[start, start + len)`.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let lead = x.shape()[0];
        if len == 0 || start + len > lead {
            return Err(TensorError::Invalid(format!("narrow [{start}, {}) of extent {lead}", start + len)));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(shape, x.data()[start * inner..(start + len) * inner].to_vec())?;
        self.push(Op::Narrow { input, start, len }, out)
    }

    /// Picks `input[labels[p], p]` for every position `p` of a `[k, ...]` tensor.
    pub fn gather(&mut self, input: Var, labels: &[usize]) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let k = x.shape()[0];
        let inner: usize = x.shape()[1..].iter().product();
        if labels.len() != inner {
            return Err(TensorError::ShapeMismatch { expected: vec![inner], got: vec![labels.len()] });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Invalid(format!("label {bad} out of range for {k} channels")));
        }
        let data = labels.iter().enumerate().map(|(p, &l)| x.data()[l * inner + p]).collect();
        let shape = if x.shape().len() > 1 { x.shape()[1..].to_vec() } else { vec![1] };
        let out = Tensor::new(shape, data)?;
        self.push(Op::Gather { input, labels: labels.to_vec() }, out)
    }

    /// Flat concatenation of width- and height-pooled slices over `regions`.
    pub fn region_pool(&mut self, input: Var, regions: &[Region]) -> Result<Var> {
        self.check(input)?;
        let out = Tensor::from_vec(kernels::pool_regions(self.value(input), regions)?);
        self.push(Op::RegionPool { input, regions: regions.to_vec() }, out)
    }

    /// Reverse pass from a one-element `root`.
    ///
    /// Every leaf created with `requires_grad` gets an entry, zero-filled if
    /// the root does not depend on it.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        let n = self.value(root).len();
        if n != 1 {
            return Err(TensorError::NonScalarRoot(n));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.local_grads(node, &g)? {
                accumulate(&mut grads[input.0], gi, self.value(input).shape())?;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);
        let mut out = Vec::new();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(a) {
                    out.push((a, reduce_to(g, self.value(a).shape())?));
                }
                if self.wants(b) {
                    let gb = reduce_to(g, self.value(b).shape())?;
                    out.push((b, if sign < 0.0 { gb.map(|x| -x) } else { gb }));
                }
            }
            Op::Mul(a, b) => {
                let shape = g.shape();
                let (ta, tb) = (self.value(a), self.value(b));
                let ma = broadcast_index_map(ta.shape(), shape);
                let mb = broadcast_index_map(tb.shape(), shape);
                if self.wants(a) {
                    let full: Vec<f64> = gd.iter().zip(&mb).map(|(&gv, &j)| gv * tb.data()[j]).collect();
                    out.push((a, reduce_to(&Tensor::new(shape.to_vec(), full)?, ta.shape())?));
                }
                if self.wants(b) {
                    let full: Vec<f64> = gd.iter().zip(&ma).map(|(&gv, &i)| gv * ta.data()[i]).collect();
                    out.push((b, reduce_to(&Tensor::new(shape.to_vec(), full)?, tb.shape())?));
                }
            }
            Op::Scale(a, s) => out.push((a, g.map(|x| x * s))),
            Op::Relu(a) => {
                let x = self.value(a).data();
                out.push((a, like(a, gd.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect())?));
            }
            Op::Log(a) => {
                let x = self.value(a).data();
                out.push((a, like(a, gd.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect())?));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                out.push((a, like(a, gd.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect())?));
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                out.push((a, like(a, gd.iter().zip(y).map(|(&gv, &yv)| gv * 0.5 / yv).collect())?));
            }
            Op::Sum(a) => out.push((a, Tensor::full(self.value(a).shape(), gd[0]))),
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                out.push((a, Tensor::full(self.value(a).shape(), gd[0] / n)));
            }
            Op::Norm2(a) => {
                let norm = node.value.data()[0];
                let scale = if norm > 0.0 { gd[0] / norm } else { 0.0 };
                out.push((a, self.value(a).map(|x| x * scale)));
            }
            Op::Conv2d { input, kernel, bias, padding } => {
                let want = [self.wants(input), self.wants(kernel), self.wants(bias)];
                let cg = kernels::conv2d_backward(self.value(input), self.value(kernel), padding, gd, want);
                if let Some(d) = cg.input {
                    out.push((input, like(input, d)?));
                }
                if let Some(d) = cg.kernel {
                    out.push((kernel, like(kernel, d)?));
                }
                if let Some(d) = cg.bias {
                    out.push((bias, like(bias, d)?));
                }
            }
            Op::Pool2d { input, window, mode } => {
                out.push((input, like(input, kernels::pool2d_backward(self.value(input), window, mode, gd))?));
            }
            Op::Upsample { input, factor } => {
                out.push((input, like(input, kernels::upsample_backward(self.value(input).shape(), factor, gd))?));
            }
            Op::Softmax { input, axis, ref temps, log } => {
                let d = kernels::softmax_axis_backward(&node.value, axis, temps.as_deref(), log, gd);
                out.push((input, like(input, d)?));
            }
            Op::Narrow { input, start, len } => {
                let x = self.value(input);
                let inner: usize = x.shape()[1..].iter().product();
                let mut d = vec![0.0; x.len()];
                d[start * inner..(start + len) * inner].copy_from_slice(gd);
                out.push((input, like(input, d)?));
            }
            Op::Gather { input, ref labels } => {
                let x = self.value(input);
                let inner = labels.len();
                let mut d = vec![0.0; x.len()];
                for (p, &l) in labels.iter().enumerate() {
                    d[l * inner + p] += gd[p];
                }
                out.push((input, like(input, d)?));
            }
            Op::RegionPool { input, ref regions } => {
                let d = kernels::pool_regions_backward(self.value(input).shape(), regions, gd);
                out.push((input, like(input, d)?));
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor, expected: &[usize]) -> Result<()> {
    if g.shape() != expected {
        return Err(TensorError::ShapeMismatch { expected: expected.to_vec(), got: g.shape().to_vec() });
    }
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
    Ok(())
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let map = broadcast_index_map(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    for (&gv, &i) in g.data().iter().zip(&map) {
        out.data_mut()[i] += gv;
    }
    Ok(out)
}
