use super::{
    numel, split_at_axis, Element, MatmulSpec, RearrangePlan, Result, Tensor, TensorError,
};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<E: Element> {
    Leaf,
    Add(Var, Var),
    /// rhs shape is a suffix of lhs shape; broadcast over the leading axes.
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBroadcast(Var, Var),
    MulConst(Var, Tensor<E>),
    Scale(Var, E),
    AddScalar(Var),
    MatMul(Var, Var, MatmulSpec),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        axis: usize,
        xhat: Tensor<E>,
        rstd: Vec<E>,
    },
    Gelu(Var),
    Silu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Expand {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Ordered record of executed operations (a Wengert tape).
///
/// Every op appends one node holding its output value; [`Graph::backward`]
/// walks the nodes in exact reverse order. A graph is meant to live for one
/// forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
    params: Vec<(usize, Var)>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for each bound parameter as `(parameter index, grad)`.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<E>)> {
        self.params
            .iter()
            .filter_map(|&(p, v)| self.get(v).map(|g| (p, g)))
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf tagged with a parameter index, reported by [`Gradients::params`].
    pub fn param(&mut self, index: usize, value: Tensor<E>) -> Var {
        let v = self.leaf(value, true);
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn suffix_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_shape("add_broadcast", a, b)?;
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(bv.len().max(1)) {
            for (x, &y) in chunk.iter_mut().zip(&bv) {
                *x = *x + y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::AddBroadcast(a, b), rg))
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_shape("mul_broadcast", a, b)?;
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(bv.len().max(1)) {
            for (x, &y) in chunk.iter_mut().zip(&bv) {
                *x = *x * y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MulBroadcast(a, b), rg))
    }

    /// Elementwise product with a fixed (non-differentiable) tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor<E>) -> Result<Var> {
        let v = self.value(a).zip_map(&c, |x, y| x * y)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = E::from_f64(s);
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = E::from_f64(s);
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `[.., m, k] x [.., k, n]`. Leading batch axes must match, or one side
    /// must be a plain matrix that is broadcast over the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let spec = MatmulSpec::new(self.shape(a), self.shape(b))?;
        let mut out = vec![E::zero(); numel(&spec.out_shape)];
        spec.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let v = Tensor::from_vec(&spec.out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b, spec), rg))
    }

    /// `x w + b` with `w: [in, out]` and optional `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let v = softmax_forward(self.value(x), axis);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes every slice along `axis` to zero mean and unit variance,
    /// then applies optional per-position `gain` and `bias` of length
    /// `shape[axis]`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        axis: usize,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        if eps <= 0.0 {
            return Err(TensorError::Invalid("layer_norm: eps must be positive".into()));
        }
        let shape = self.shape(x).to_vec();
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let mut xhat = vec![E::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(outer * inner);
        let inv_dim = 1.0 / dim as f64;
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| o * dim * inner + d * inner + i;
                let mean = (0..dim).map(|d| xv[at(d)].as_f64()).sum::<f64>() * inv_dim;
                let var = (0..dim)
                    .map(|d| (xv[at(d)].as_f64() - mean).powi(2))
                    .sum::<f64>()
                    * inv_dim;
                let r = 1.0 / (var + eps).sqrt();
                for d in 0..dim {
                    xhat[at(d)] = E::from_f64((xv[at(d)].as_f64() - mean) * r);
                }
                rstd.push(E::from_f64(r));
            }
        }
        let xhat = Tensor::from_vec(&shape, xhat)?;
        let mut y = xhat.clone();
        if gain.is_some() || bias.is_some() {
            let g = gain.map(|g| self.value(g).data().to_vec());
            let b = bias.map(|b| self.value(b).data().to_vec());
            for (idx, v) in y.data_mut().iter_mut().enumerate() {
                let d = (idx / inner) % dim;
                if let Some(g) = &g {
                    *v = *v * g[d];
                }
                if let Some(b) = &b {
                    *v = *v + b[d];
                }
            }
        }
        let rg = self.rg(x)
            || gain.is_some_and(|g| self.rg(g))
            || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| E::from_f64(gelu_parts(a.as_f64()).0));
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| {
            let a = a.as_f64();
            E::from_f64(a * sigmoid(a))
        });
        let rg = self.rg(x);
        self.push(v, Op::Silu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Applies a resolved [`RearrangePlan`] as reshape, permute, reshape.
    pub fn rearrange(&mut self, x: Var, plan: &RearrangePlan) -> Result<Var> {
        if self.shape(x) != plan.input_shape() {
            return Err(TensorError::ShapeMismatch {
                op: "rearrange",
                lhs: self.shape(x).to_vec(),
                rhs: plan.input_shape().to_vec(),
            });
        }
        let identity = plan.perm().iter().enumerate().all(|(i, &p)| i == p);
        if identity {
            return self.reshape(x, plan.output_shape());
        }
        let e = self.reshape(x, plan.elementary_shape())?;
        let p = self.permute(e, plan.perm())?;
        self.reshape(p, plan.output_shape())
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Narrow { x, axis, start }, rg))
    }

    /// Inserts a new axis of size `n` at `axis`, repeating the input along it.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "expand",
                axis,
                rank: shape.len(),
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let chunk = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(chunk);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, n);
        let v = Tensor::from_vec(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Expand { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`. Every leaf created with
    /// `requires_grad` receives a gradient (zeros when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(ls));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf);
            if !is_leaf || !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if let Some(p) = node.param {
                params.push((p, Var(i)));
            }
        }
        Ok(Gradients { grads, params })
    }

    fn backprop_node(
        &self,
        node: &Node<E>,
        g: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let mut send = |v: Var, t: Tensor<E>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.accumulate(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.rg(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::AddBroadcast(a, b) => {
                send(*a, g.clone());
                if self.rg(*b) {
                    send(*b, reduce_leading(g, self.shape(*b))?);
                }
            }
            Op::MulBroadcast(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for chunk in ga.data_mut().chunks_mut(bv.numel().max(1)) {
                        for (x, &y) in chunk.iter_mut().zip(bv.data()) {
                            *x = *x * y;
                        }
                    }
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y)?;
                    send(*b, reduce_leading(&prod, bv.shape())?);
                }
            }
            Op::MulConst(a, c) => send(*a, g.zip_map(c, |x, y| x * y)?),
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b, spec) => {
                let (da, db) = spec.backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g.data(),
                    self.rg(*a),
                    self.rg(*b),
                );
                if let Some(da) = da {
                    send(*a, Tensor::from_vec(self.shape(*a), da)?);
                }
                if let Some(db) = db {
                    send(*b, Tensor::from_vec(self.shape(*b), db)?);
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, dim, inner) = split_at_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![E::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| o * dim * inner + d * inner + i;
                        let dot = (0..dim).fold(E::zero(), |acc, d| acc + gd[at(d)] * yd[at(d)]);
                        for d in 0..dim {
                            gx[at(d)] = yd[at(d)] * (gd[at(d)] - dot);
                        }
                    }
                }
                send(*x, Tensor::from_vec(y.shape(), gx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            } => {
                let shape = xhat.shape();
                let (outer, dim, inner) = split_at_axis(shape, *axis);
                let (xh, gd) = (xhat.data(), g.data());
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut gb = vec![E::zero(); dim];
                        for (idx, &v) in gd.iter().enumerate() {
                            let d = (idx / inner) % dim;
                            gb[d] = gb[d] + v;
                        }
                        send(*b, Tensor::from_vec(&[dim], gb)?);
                    }
                }
                let gain_v = gain.map(|gv| self.value(gv).data().to_vec());
                if let Some(gv) = gain {
                    if self.rg(*gv) {
                        let mut gg = vec![E::zero(); dim];
                        for (idx, (&v, &h)) in gd.iter().zip(xh).enumerate() {
                            let d = (idx / inner) % dim;
                            gg[d] = gg[d] + v * h;
                        }
                        send(*gv, Tensor::from_vec(&[dim], gg)?);
                    }
                }
                if self.rg(*x) {
                    let inv_dim = E::from_f64(1.0 / dim as f64);
                    let mut gx = vec![E::zero(); xh.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |d: usize| o * dim * inner + d * inner + i;
                            let gh = |d: usize| match &gain_v {
                                Some(gv) => gd[at(d)] * gv[d],
                                None => gd[at(d)],
                            };
                            let mut m1 = E::zero();
                            let mut m2 = E::zero();
                            for d in 0..dim {
                                m1 = m1 + gh(d);
                                m2 = m2 + gh(d) * xh[at(d)];
                            }
                            m1 = m1 * inv_dim;
                            m2 = m2 * inv_dim;
                            let r = rstd[o * inner + i];
                            for d in 0..dim {
                                gx[at(d)] = r * (gh(d) - m1 - xh[at(d)] * m2);
                            }
                        }
                    }
                    send(*x, Tensor::from_vec(shape, gx)?);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                send(
                    *x,
                    g.zip_map(xv, |gv, a| gv * E::from_f64(gelu_parts(a.as_f64()).1))?,
                );
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                send(
                    *x,
                    g.zip_map(xv, |gv, a| {
                        let a = a.as_f64();
                        let s = sigmoid(a);
                        gv * E::from_f64(s * (1.0 + a * (1.0 - s)))
                    })?,
                );
            }
            Op::Reshape(x) => send(*x, g.reshape(self.shape(*x))?),
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                send(*x, g.permute(&inv)?);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        send(p, g.narrow(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, dim, inner) = split_at_axis(in_shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![E::zero(); numel(in_shape)];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                send(*x, Tensor::from_vec(in_shape, gx)?);
            }
            Op::Expand { x, axis } => {
                let in_shape = self.shape(*x);
                let outer = numel(&in_shape[..*axis]);
                let inner = numel(&in_shape[*axis..]);
                let n = g.shape()[*axis];
                let mut gx = vec![E::zero(); outer * inner];
                for o in 0..outer {
                    for r in 0..n {
                        let src = &g.data()[(o * n + r) * inner..(o * n + r + 1) * inner];
                        for (d, &s) in gx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                send(*x, Tensor::from_vec(in_shape, gx)?);
            }
            Op::Sum(x) => send(*x, Tensor::full(self.shape(*x), g.item())),
            Op::Mean(x) => {
                let n = E::from_f64(self.value(*x).numel() as f64);
                send(*x, Tensor::full(self.shape(*x), g.item() / n));
            }
        }
        Ok(())
    }
}

/// Sums `g` over its leading axes down to `shape` (a suffix of `g.shape()`).
fn reduce_leading<E: Element>(g: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    let n = numel(shape).max(1);
    let mut out = vec![E::zero(); numel(shape)];
    for chunk in g.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    Tensor::from_vec(shape, out)
}

pub(crate) fn softmax_forward<E: Element>(x: &Tensor<E>, axis: usize) -> Tensor<E> {
    let (outer, dim, inner) = split_at_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![E::zero(); xd.len()];
    if inner == 1 {
        for (src, dst) in xd.chunks(dim).zip(out.chunks_mut(dim)) {
            let max = src.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - max;
            }
            E::exp_nonpositive(dst);
            let total = dst.iter().fold(E::zero(), |t, &d| t + d);
            let inv = E::one() / total;
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
    } else {
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| o * dim * inner + d * inner + i;
                let max = (0..dim).fold(E::neg_infinity(), |m, d| m.max(xd[at(d)]));
                let mut total = E::zero();
                for d in 0..dim {
                    out[at(d)] = (xd[at(d)] - max).exp();
                    total = total + out[at(d)];
                }
                for d in 0..dim {
                    out[at(d)] = out[at(d)] / total;
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[std::f64::consts::LN_2, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).is_finite());
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3, 2], &[0.1, 2.0, -1.0, 0.5, 3.0, 0.0, 1.0, 1.0, 2.0, -2.0, 0.0, 4.0]));
        let y = g.softmax(x, 1).unwrap();
        let yv = g.value(y);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|d| yv.get(&[o, d, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, 0, None, None, 1e-12).unwrap();
        let yv = g.value(y).data();
        assert!((yv[0] + 1.0).abs() < 1e-9 && (yv[1] - 1.0).abs() < 1e-9);

        let x = g.constant(t(&[4], &[2.5; 4]));
        let y = g.layer_norm(x, 0, None, None, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_grad_is_ones_and_softmax_sum_grad_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 5.0, -3.0]), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 5.0, -3.0]), true);
        let y = g.softmax(x, 1).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3]), true);
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaves_get_zero_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn param_grads_are_reported_by_index() {
        let mut g = Graph::<f64>::new();
        let w = g.param(7, t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(w, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let collected: Vec<_> = grads.params().collect();
        assert_eq!(collected.len(), 1);
        assert_eq!(collected[0].0, 7);
        assert_eq!(collected[0].1.data(), &[3.0, 4.0]);
    }
}
