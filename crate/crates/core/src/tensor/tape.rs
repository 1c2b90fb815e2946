use super::kernels::{self, MatmulLayout};
use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var, MatmulLayout),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    IndexSelect {
        input: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Execution-ordered record of primitive operations.
///
/// Node ids increase with execution order, so a reverse scan over the node
/// list is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let layout = kernels::matmul_layout(self.shape(a), self.shape(b))?;
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), &layout);
        let value = Tensor::new(layout.out_shape(), data)?;
        Ok(self.push(value, Op::MatMul(a, b, layout), &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = kernels::broadcast_shape(&sa, &sb)?;
        let total: usize = out.iter().product();
        let mut data = vec![0.0; total];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        kernels::for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(va[ia], vb[ib]));
        Tensor::new(out, data)
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// `a / d` elementwise. Unlike `scale(a, 1/d)`, `d / d` is exactly 1.
    pub fn div_scalar(&mut self, a: Var, d: f64) -> Var {
        let v = self.value(a).map(|x| x / d);
        self.push(v, Op::DivScalar(a, d), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(perm)?;
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::Shape(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape(a)
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Gathers slices along `axis`; indices may repeat or be omitted.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {} out of range for {:?}", axis, shape)));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::Index(format!(
                "index {} out of range for axis {} of extent {}",
                bad, axis, shape[axis]
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * len + i) * inner;
                data.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(
            v,
            Op::IndexSelect {
                input: a,
                axis,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::Shape(format!(
                "axis {} out of range for {:?}",
                axis,
                self.shape(a)
            )));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`. NaN input is a numeric error.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let data = kernels::softmax(x.data(), x.shape(), axis);
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("log_softmax input contains NaN".into()));
        }
        let data = kernels::log_softmax(x.data(), x.shape(), axis);
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(v, Op::LogSoftmax(a, axis), &[a]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both of
    /// the last axis' extent).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.shape(p) != [d] {
                return Err(Error::Shape(format!(
                    "layer_norm {} shape {:?}, expected [{}]",
                    name,
                    self.shape(p),
                    d
                )));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Inverted dropout. Identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0,1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(a).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.bernoulli(p) { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Mean token negative log-likelihood over the last axis of `logits`.
    ///
    /// `targets` has one entry per logit row; positions equal to
    /// `ignore_index` are skipped. With every position ignored the loss is 0
    /// and the gradient is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape
            .last()
            .ok_or_else(|| Error::Shape("cross_entropy on a scalar".into()))?;
        let rows = self.value(logits).numel() / v;
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for logits {:?}",
                targets.len(),
                shape
            )));
        }
        let mut resolved = Vec::with_capacity(rows);
        for (pos, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                resolved.push(None);
            } else if t >= v {
                return Err(Error::Index(format!(
                    "target {} at position {} outside vocabulary of {}",
                    t, pos, v
                )));
            } else {
                resolved.push(Some(t));
            }
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax(x, &[rows, v], 1);
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in resolved.iter().enumerate() {
            if let Some(t) = *t {
                let row = &x[r * v..(r + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: resolved,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar root. Every node is visited at most once, in
    /// reverse execution order.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("{:?} is not on this tape", root)));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b, l) => {
                let (m, k, n) = (l.m, l.k, l.n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let mut ga = vec![0.0; av.len()];
                    for bi in 0..l.batch {
                        let ao = if l.a_batched { bi * m * k } else { 0 };
                        let bo = if l.b_batched { bi * k * n } else { 0 };
                        kernels::gemm_abt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for bi in 0..l.batch {
                        let ao = if l.a_batched { bi * m * k } else { 0 };
                        let bo = if l.b_batched { bi * k * n } else { 0 };
                        kernels::gemm_atb_acc(
                            &av[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let out = node.value.shape();
                let mut ga = self.wants(*a).then(|| vec![0.0; self.value(*a).numel()]);
                let mut gb = self.wants(*b).then(|| vec![0.0; self.value(*b).numel()]);
                kernels::for_each_broadcast(out, sa, sb, |o, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += sign * g[o];
                    }
                });
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let out = node.value.shape();
                let mut ga = self.wants(*a).then(|| vec![0.0; va.len()]);
                let mut gb = self.wants(*b).then(|| vec![0.0; vb.len()]);
                kernels::for_each_broadcast(out, sa, sb, |o, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o] * vb[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += g[o] * va[ia];
                    }
                });
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::DivScalar(a, d) => acc(*a, g.iter().map(|x| x / d).collect()),
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_perm(perm);
                let (back, _) = kernels::permute(g, node.value.shape(), &inv);
                acc(*a, back);
            }
            Op::IndexSelect { input, axis, indices } => {
                let shape = self.shape(*input);
                let (outer, len, inner) = kernels::axis_split(shape, *axis);
                let mut gi = vec![0.0; outer * len * inner];
                let k = indices.len();
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = (o * k + j) * inner;
                        let dst = (o * len + i) * inner;
                        for t in 0..inner {
                            gi[dst + t] += g[src + t];
                        }
                    }
                }
                acc(*input, gi);
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = xhat.len() / d;
                if self.wants(*input) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    acc(*input, gx);
                }
                if self.wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    acc(*gain, gg);
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    acc(*bias, gb);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter().zip(x).map(|(gi, &xi)| gi * kernels::gelu_grad(xi)).collect(),
                );
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let mut gl = vec![0.0; probs.len()];
                if *count > 0 {
                    let v = probs.len() / targets.len();
                    let w = g[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..v {
                                gl[r * v + j] = w * probs[r * v + j];
                            }
                            gl[r * v + t] -= w;
                        }
                    }
                }
                acc(*logits, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.constant(t(&[2, 2], &[0., 1., 1., 0.]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1., 2., 3., 4.]);
        let out = tape.matmul(i2, p).unwrap();
        assert_eq!(tape.value(out).data(), &[0., 1., 1., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let (b2, w2) = (b.clone(), w.clone());
        let report = grad_check(
            move |tape, x| {
                let bv = tape.constant(b2.clone());
                let wv = tape.constant(w2.clone());
                let y = tape.matmul(x, bv)?;
                let y = tape.mul(y, wv)?;
                Ok(tape.sum(y))
            },
            &a,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        let report = grad_check(
            move |tape, x| {
                let av = tape.constant(a.clone());
                let wv = tape.constant(w.clone());
                let y = tape.matmul(av, x)?;
                let y = tape.mul(y, wv)?;
                Ok(tape.sum(y))
            },
            &b,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn batched_matmul_with_broadcast_weight_gradient() {
        let mut rng = Rng::new(2);
        let x = random(&[2, 3, 4], &mut rng);
        let w = random(&[4, 5], &mut rng);
        let r = random(&[2, 3, 5], &mut rng);
        let report = grad_check(
            move |tape, wv| {
                let xv = tape.constant(x.clone());
                let rv = tape.constant(r.clone());
                let y = tape.matmul(xv, wv)?;
                let y = tape.mul(y, rv)?;
                Ok(tape.sum(y))
            },
            &w,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1., 1., 1.]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[0., 2f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., f64::NAN]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let x = random(&[5], &mut rng);
        let w = random(&[5], &mut rng);
        let report = grad_check(
            move |tape, xv| {
                let y = tape.softmax(xv, 0)?;
                let wv = tape.constant(w.clone());
                let y = tape.mul(y, wv)?;
                Ok(tape.sum(y))
            },
            &x,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn softmax_on_middle_axis() {
        let mut rng = Rng::new(4);
        let x = random(&[2, 3, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, 1).unwrap();
        let y = tape.value(y);
        for i in 0..2 {
            for k in 0..4 {
                let s: f64 = (0..3).map(|j| y.at(&[i, j, k])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::full(&[4], 3.5));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1., -1.]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-9 && (d[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = Rng::new(5);
        let x = random(&[2, 8], &mut rng);
        let gain = random(&[8], &mut rng);
        let bias = random(&[8], &mut rng);
        let w = random(&[2, 8], &mut rng);
        let (g2, b2, w2) = (gain.clone(), bias.clone(), w.clone());
        let report = grad_check(
            move |tape, xv| {
                let g = tape.constant(g2.clone());
                let b = tape.constant(b2.clone());
                let wv = tape.constant(w2.clone());
                let y = tape.layer_norm(xv, g, b, 1e-5)?;
                let y = tape.mul(y, wv)?;
                Ok(tape.sum(y))
            },
            &x,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        let report = grad_check(
            move |tape, gv| {
                let xv = tape.constant(x.clone());
                let b = tape.constant(bias.clone());
                let wv = tape.constant(w.clone());
                let y = tape.layer_norm(xv, gv, b, 1e-5)?;
                let y = tape.mul(y, wv)?;
                Ok(tape.sum(y))
            },
            &gain,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 2, 4]));
        let l = tape.cross_entropy(logits, &[0, 3], usize::MAX).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let logits = tape.constant(t(&[1, 1, 3], &[0., 1000., 0.]));
        let l = tape.cross_entropy(logits, &[1], usize::MAX).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::from_fn(&[1, 3, 5], |i| i as f64 * 0.1));
        let l = tape.cross_entropy(logits, &[0, 0, 0], 0).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(logits).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 1, 4]));
        assert!(matches!(tape.cross_entropy(logits, &[4], 99), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = Rng::new(6);
        let x = random(&[2, 3, 5], &mut rng);
        let report = grad_check(
            |tape, xv| tape.cross_entropy(xv, &[1, 4, 0, 2, 9, 3], 9),
            &x,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn backward_trivial_cases() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn composite_graph_gradient() {
        // permute, reshape, index_select, broadcasting, gelu and division chained together
        let mut rng = Rng::new(7);
        let x = random(&[2, 3, 4], &mut rng);
        let bias = random(&[4], &mut rng);
        let report = grad_check(
            move |tape, xv| {
                let b = tape.constant(bias.clone());
                let y = tape.add(xv, b)?;
                let y = tape.permute(y, &[2, 0, 1])?;
                let y = tape.reshape(y, &[4, 6])?;
                let y = tape.index_select(y, 1, &[5, 0, 0, 3])?;
                let y = tape.gelu(y);
                let y = tape.div_scalar(y, 0.7);
                let z = tape.log_softmax(y, 1)?;
                let z = tape.mul(z, y)?;
                Ok(tape.mean(z))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn dropout_keeps_expectation_scale() {
        let mut rng = Rng::new(8);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[10_000]));
        let y = tape.dropout(x, 0.1, &mut rng).unwrap();
        let d = tape.value(y).data();
        let zeros = d.iter().filter(|&&v| v == 0.0).count();
        assert!((800..1200).contains(&zeros), "{zeros}");
        assert!(d.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
        let same = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(same, x);
    }
}
