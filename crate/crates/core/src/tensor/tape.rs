use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{dim_err, Error, Result};

use super::ops::{self, ConvDims};
use super::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Conv2d { input: usize, kernel: usize, stride: usize, padding: usize },
    MaxPool { input: usize, argmax: Vec<usize> },
    Relu(usize),
    Reshape(usize),
    SoftmaxCe { logits: usize, probs: Tensor, labels: Vec<usize> },
    Sum(usize),
    Mul(usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Linear record of operations, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so inputs always precede the
/// node that consumes them. A node requires a gradient iff one of its inputs
/// does; backward rules skip inputs that do not.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every `requires_grad` leaf, keyed by its handle.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], add: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    add(t.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable was not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        Ok(&self.nodes[self.idx(v)?])
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    fn rg(&self, a: usize) -> bool {
        self.nodes[a].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = ops::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::MatMul(ia, ib), value, rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let value = ops::add_bias(&self.nodes[ix].value, &self.nodes[ib].value)?;
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(Op::AddBias(ix, ib), value, rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ii, ik) = (self.idx(input)?, self.idx(kernel)?);
        let value = ops::conv2d(&self.nodes[ii].value, &self.nodes[ik].value, stride, padding)?;
        let rg = self.rg(ii) || self.rg(ik);
        Ok(self.push(
            Op::Conv2d { input: ii, kernel: ik, stride, padding },
            value,
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let ii = self.idx(input)?;
        let (value, argmax) = ops::maxpool2d(&self.nodes[ii].value, window, stride)?;
        let rg = self.rg(ii);
        Ok(self.push(Op::MaxPool { input: ii, argmax }, value, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let value = ops::relu(&self.nodes[ii].value);
        let rg = self.rg(ii);
        Ok(self.push(Op::Relu(ii), value, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let ii = self.idx(input)?;
        let value = self.nodes[ii].value.reshape(shape)?;
        let rg = self.rg(ii);
        Ok(self.push(Op::Reshape(ii), value, rg))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let t = &self.node(input)?.value;
        let shape = [t.batch_len(), t.sample_len()];
        self.reshape(input, &shape)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let (loss, probs) = ops::softmax_cross_entropy(&self.nodes[il].value, labels)?;
        let rg = self.rg(il);
        Ok(self.push(
            Op::SoftmaxCe { logits: il, probs, labels: labels.to_vec() },
            Tensor::scalar(loss),
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let value = Tensor::scalar(self.nodes[ii].value.sum());
        let rg = self.rg(ii);
        Ok(self.push(Op::Sum(ii), value, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.shape() != y.shape() {
            return Err(dim_err!("mul shapes differ: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::Mul(ia, ib), value, rg))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        self.backward_with(loss, Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        let io = self.idx(output)?;
        if seed.shape() != self.nodes[io].value.shape() {
            return Err(dim_err!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.nodes[io].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=io).map(|_| None).collect();
        grads[io] = Some(seed);
        for i in (0..=io).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate().take(io + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.grads.insert(Var { tape: self.id, index: i }, g);
            }
        }
        // Leaves recorded after the output cannot influence it.
        for (i, node) in self.nodes.iter().enumerate().skip(io + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                out.grads.insert(Var { tape: self.id, index: i }, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    accumulate(&mut grads[*a], av.shape(), |d| ops::gemm_nt(gd, bv.data(), d, m, n, k));
                }
                if self.rg(*b) {
                    accumulate(&mut grads[*b], bv.shape(), |d| ops::gemm_tn(av.data(), gd, d, m, k, n));
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    let shape = self.nodes[*x].value.shape();
                    accumulate(&mut grads[*x], shape, |d| {
                        for (o, v) in d.iter_mut().zip(gd) {
                            *o += v;
                        }
                    });
                }
                if self.rg(*b) {
                    let bshape = self.nodes[*b].value.shape();
                    let xshape = self.nodes[*x].value.shape();
                    let inner: usize = xshape[2..].iter().product();
                    let dlen = bshape[0];
                    accumulate(&mut grads[*b], bshape, |d| {
                        for (chunk_idx, chunk) in gd.chunks(inner).enumerate() {
                            d[chunk_idx % dlen] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let (xv, kv) = (&self.nodes[*input].value, &self.nodes[*kernel].value);
                let dims = ConvDims::new(xv, kv, *stride, *padding)?;
                let (q, p, f) = (dims.q(), dims.p(), dims.f);
                let (need_x, need_k) = (self.rg(*input), self.rg(*kernel));
                let mut dx = need_x.then(|| vec![0.0; xv.len()]);
                let mut dk = need_k.then(|| vec![0.0; kv.len()]);
                let sample = dims.c * dims.h * dims.w;
                for (s0, s1) in dims.chunks() {
                    let ld = (s1 - s0) * p;
                    let mut go = vec![0.0; f * ld];
                    for s in s0..s1 {
                        for ch in 0..f {
                            go[ch * ld + (s - s0) * p..ch * ld + (s - s0 + 1) * p]
                                .copy_from_slice(&gd[(s * f + ch) * p..(s * f + ch + 1) * p]);
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let cols = dims.cols(xv, s0, s1);
                        ops::gemm_nt(&go, &cols, dk, f, ld, q);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut dcols = vec![0.0; q * ld];
                        ops::gemm_tn(kv.data(), &go, &mut dcols, f, q, ld);
                        for s in s0..s1 {
                            ops::col2im(
                                &dcols[(s - s0) * p..],
                                (dims.c, dims.h, dims.w),
                                dims.win,
                                (dims.oh, dims.ow),
                                ld,
                                &mut dx[s * sample..(s + 1) * sample],
                            );
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[*input], xv.shape(), |d| add_into(d, &dx));
                }
                if let Some(dk) = dk {
                    accumulate(&mut grads[*kernel], kv.shape(), |d| add_into(d, &dk));
                }
            }
            Op::MaxPool { input, argmax } => {
                let shape = self.nodes[*input].value.shape();
                accumulate(&mut grads[*input], shape, |d| {
                    for (&src, &v) in argmax.iter().zip(gd) {
                        d[src] += v;
                    }
                });
            }
            Op::Relu(input) => {
                let xv = &self.nodes[*input].value;
                accumulate(&mut grads[*input], xv.shape(), |d| {
                    for ((o, &x), &v) in d.iter_mut().zip(xv.data()).zip(gd) {
                        if x > 0.0 {
                            *o += v;
                        }
                    }
                });
            }
            Op::Reshape(input) => {
                let shape = self.nodes[*input].value.shape();
                accumulate(&mut grads[*input], shape, |d| add_into(d, gd));
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let (n, k) = (probs.shape()[0], probs.shape()[1]);
                let scale = gd[0] / n as f64;
                accumulate(&mut grads[*logits], probs.shape(), |d| {
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            d[r * k + c] += scale * (probs.data()[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::Sum(input) => {
                let shape = self.nodes[*input].value.shape();
                accumulate(&mut grads[*input], shape, |d| {
                    for o in d.iter_mut() {
                        *o += gd[0];
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.rg(*a) {
                    accumulate(&mut grads[*a], av.shape(), |d| {
                        for ((o, &y), &v) in d.iter_mut().zip(bv.data()).zip(gd) {
                            *o += y * v;
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[*b], bv.shape(), |d| {
                        for ((o, &x), &v) in d.iter_mut().zip(av.data()).zip(gd) {
                            *o += x * v;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
