//! Operation tape for reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops return
//! [`Var`] handles into the tape; calling [`Tape::backward`] on a scalar
//! replays the recorded ops in reverse and accumulates gradients for every
//! node with `requires_grad`. Ops whose inputs are all constants are computed
//! eagerly but not recorded, so an inference pass over constant parameters
//! records nothing.
//!
//! Shape errors are programming errors at this layer (inputs are validated
//! where data enters the system), so ops panic with a descriptive message
//! rather than returning `Result`.

use super::{broadcast_shapes, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

enum Op {
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { a: Var, k: f64, out: Var },
    Matmul { a: Var, b: Var, out: Var },
    SwapAxes { a: Var, ax0: usize, ax1: usize, out: Var },
    Reshape { a: Var, out: Var },
    Concat { parts: Vec<Var>, axis: usize, out: Var },
    Slice { a: Var, axis: usize, start: usize, out: Var },
    Softmax { x: Var, axis: usize, out: Var },
    LogSoftmax { x: Var, axis: usize, out: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<f64>, rstd: Vec<f64>, out: Var },
    Gelu { x: Var, out: Var },
    Relu { x: Var, out: Var },
    SumAll { x: Var, out: Var },
    SumAxis { x: Var, axis: usize, out: Var },
}

/// Records a forward pass and differentiates it.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Copy a tensor onto the tape, keeping its `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Put raw data on the tape as a non-differentiable constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "constant data length {} does not match shape {:?}", data.len(), shape);
        self.push(shape.to_vec(), data, false)
    }

    /// Put raw data on the tape as a differentiable leaf.
    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "variable data length {} does not match shape {:?}", data.len(), shape);
        self.push(shape.to_vec(), data, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].data.clone())
    }

    /// Gradient of the last `backward` target with respect to `v`, if `v`
    /// required gradients and lies on a path to the target.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>, bool) {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let out_shape = broadcast_shapes(&na.shape, &nb.shape);
        let data = broadcast_apply(&na.shape, &na.data, &nb.shape, &nb.data, &out_shape, f);
        let rg = na.requires_grad || nb.requires_grad;
        (out_shape, data, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (shape, data, rg) = self.binary(a, b, |x, y| x + y);
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::Add { a, b, out });
        }
        out
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (shape, data, rg) = self.binary(a, b, |x, y| x - y);
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::Sub { a, b, out });
        }
        out
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (shape, data, rg) = self.binary(a, b, |x, y| x * y);
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::Mul { a, b, out });
        }
        out
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let na = &self.nodes[a.0];
        let data = na.data.iter().map(|v| v * k).collect();
        let rg = na.requires_grad;
        let shape = na.shape.clone();
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::Scale { a, k, out });
        }
        out
    }

    // ---- matmul ----------------------------------------------------------

    /// Matrix product with numpy semantics: the last two axes are contracted
    /// and leading axes broadcast. A rank-2 `b` multiplies every row batch of
    /// `a` (the common "linear layer" case), and equal leading axes multiply
    /// pairwise (the attention case).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert!(
            na.shape.len() >= 2 && nb.shape.len() >= 2,
            "matmul requires rank >= 2, got {:?} x {:?}",
            na.shape,
            nb.shape
        );
        let (m, ka) = (na.shape[na.shape.len() - 2], na.shape[na.shape.len() - 1]);
        let (kb, n) = (nb.shape[nb.shape.len() - 2], nb.shape[nb.shape.len() - 1]);
        assert_eq!(ka, kb, "matmul inner dimensions differ: {:?} x {:?}", na.shape, nb.shape);
        let k = ka;

        let batch_shape = broadcast_shapes(
            &na.shape[..na.shape.len() - 2],
            &nb.shape[..nb.shape.len() - 2],
        );
        let batches: usize = batch_shape.iter().product();
        let (sa, sb) = (
            batch_strides(&na.shape[..na.shape.len() - 2], &batch_shape, m * k),
            batch_strides(&nb.shape[..nb.shape.len() - 2], &batch_shape, k * n),
        );

        let mut data = vec![0.0; batches * m * n];
        let mut odo = Odometer::new(&batch_shape);
        for bi in 0..batches {
            let (oa, ob) = (odo.offset(&sa), odo.offset(&sb));
            mm_nn_acc(
                &na.data[oa..oa + m * k],
                &nb.data[ob..ob + k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
            odo.step();
        }

        let mut out_shape = batch_shape;
        out_shape.push(m);
        out_shape.push(n);
        let rg = na.requires_grad || nb.requires_grad;
        let out = self.push(out_shape, data, rg);
        if rg {
            self.ops.push(Op::Matmul { a, b, out });
        }
        out
    }

    // ---- shape ops --------------------------------------------------------

    pub fn swap_axes(&mut self, a: Var, ax0: usize, ax1: usize) -> Var {
        let na = &self.nodes[a.0];
        let rank = na.shape.len();
        assert!(ax0 < rank && ax1 < rank, "swap_axes {}<->{} out of range for {:?}", ax0, ax1, na.shape);
        let mut shape = na.shape.clone();
        shape.swap(ax0, ax1);
        let data = permuted_swap(&na.shape, &na.data, ax0, ax1);
        let rg = na.requires_grad;
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::SwapAxes { a, ax0, ax1, out });
        }
        out
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let na = &self.nodes[a.0];
        let numel: usize = shape.iter().product();
        assert_eq!(numel, na.data.len(), "reshape {:?} -> {:?} changes element count", na.shape, shape);
        let data = na.data.clone();
        let rg = na.requires_grad;
        let out = self.push(shape.to_vec(), data, rg);
        if rg {
            self.ops.push(Op::Reshape { a, out });
        }
        out
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = &self.nodes[parts[0].0].shape;
        let rank = first.len();
        assert!(axis < rank, "concat axis {} out of range for rank {}", axis, rank);
        let mut axis_total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            assert_eq!(s.len(), rank, "concat rank mismatch: {:?} vs {:?}", first, s);
            for d in 0..rank {
                if d != axis {
                    assert_eq!(s[d], first[d], "concat shapes differ off-axis: {:?} vs {:?}", first, s);
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;

        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let out_stride = axis_total * inner;
        let mut data = vec![0.0; outer * out_stride];
        let mut off = 0;
        for p in parts {
            let np = &self.nodes[p.0];
            let plen = np.shape[axis] * inner;
            for o in 0..outer {
                data[o * out_stride + off..o * out_stride + off + plen]
                    .copy_from_slice(&np.data[o * plen..(o + 1) * plen]);
            }
            off += plen;
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::Concat { parts: parts.to_vec(), axis, out });
        }
        out
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let na = &self.nodes[a.0];
        let rank = na.shape.len();
        assert!(axis < rank, "slice axis {} out of range for {:?}", axis, na.shape);
        assert!(
            start + len <= na.shape[axis],
            "slice {}..{} exceeds axis length {} of {:?}",
            start,
            start + len,
            na.shape[axis],
            na.shape
        );
        let outer: usize = na.shape[..axis].iter().product();
        let inner: usize = na.shape[axis + 1..].iter().product();
        let in_stride = na.shape[axis] * inner;
        let mut shape = na.shape.clone();
        shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = o * in_stride + start * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&na.data[src..src + len * inner]);
        }
        let rg = na.requires_grad;
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::Slice { a, axis, start, out });
        }
        out
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Vec<Var> {
        let total: usize = sizes.iter().sum();
        assert_eq!(
            total,
            self.nodes[a.0].shape[axis],
            "split sizes {:?} do not cover axis length {}",
            sizes,
            self.nodes[a.0].shape[axis]
        );
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len));
            start += len;
        }
        out
    }

    // ---- nonlinearities ---------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let nx = &self.nodes[x.0];
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        let data = lane_map(&nx.shape, &nx.data, axis, softmax_lane);
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::Softmax { x, axis, out });
        }
        out
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let nx = &self.nodes[x.0];
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        let data = lane_map(&nx.shape, &nx.data, axis, log_softmax_lane);
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::LogSoftmax { x, axis, out });
        }
        out
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let d = *self.nodes[x.0].shape.last().expect("layer_norm on rank-0 tensor");
        assert_eq!(self.nodes[gain.0].shape, [d], "layer_norm gain shape mismatch");
        assert_eq!(self.nodes[bias.0].shape, [d], "layer_norm bias shape mismatch");
        let rows = self.nodes[x.0].data.len() / d;
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; rows * d];
        {
            let (nx, ng, nb) = (&self.nodes[x.0], &self.nodes[gain.0], &self.nodes[bias.0]);
            for r in 0..rows {
                let row = &nx.data[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                mean[r] = mu;
                rstd[r] = rs;
                let o = &mut data[r * d..(r + 1) * d];
                for i in 0..d {
                    o[i] = (row[i] - mu) * rs * ng.data[i] + nb.data[i];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gain.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::LayerNorm { x, gain, bias, mean, rstd, out });
        }
        out
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let nx = &self.nodes[x.0];
        let data = nx.data.iter().map(|&v| gelu_scalar(v)).collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::Gelu { x, out });
        }
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let nx = &self.nodes[x.0];
        let data = nx.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::Relu { x, out });
        }
        out
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let nx = &self.nodes[x.0];
        let s: f64 = nx.data.iter().sum();
        let rg = nx.requires_grad;
        let out = self.push(vec![1], vec![s], rg);
        if rg {
            self.ops.push(Op::SumAll { x, out });
        }
        out
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let nx = &self.nodes[x.0];
        let rank = nx.shape.len();
        assert!(axis < rank, "sum_axis {} out of range for {:?}", axis, nx.shape);
        let outer: usize = nx.shape[..axis].iter().product();
        let alen = nx.shape[axis];
        let inner: usize = nx.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..alen {
                let src = (o * alen + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += nx.data[src + i];
                }
            }
        }
        let mut shape = nx.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = nx.requires_grad;
        let out = self.push(shape, data, rg);
        if rg {
            self.ops.push(Op::SumAxis { x, axis, out });
        }
        out
    }

    /// Copy a value out of the graph: same data, no gradient connection.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, false)
    }

    // ---- backward -------------------------------------------------------------

    /// Accumulate d(loss)/d(node) for every differentiable node reachable from
    /// `loss`. Panics if `loss` is not a scalar. Nodes not on a path to the
    /// loss simply keep no gradient.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].shape
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        let Tape { nodes, ops, grads } = self;
        for op in ops.iter().rev() {
            backward_op(op, nodes, grads);
        }
    }
}

fn out_of(op: &Op) -> Var {
    match op {
        Op::Add { out, .. }
        | Op::Sub { out, .. }
        | Op::Mul { out, .. }
        | Op::Scale { out, .. }
        | Op::Matmul { out, .. }
        | Op::SwapAxes { out, .. }
        | Op::Reshape { out, .. }
        | Op::Concat { out, .. }
        | Op::Slice { out, .. }
        | Op::Softmax { out, .. }
        | Op::LogSoftmax { out, .. }
        | Op::LayerNorm { out, .. }
        | Op::Gelu { out, .. }
        | Op::Relu { out, .. }
        | Op::SumAll { out, .. }
        | Op::SumAxis { out, .. } => *out,
    }
}

fn backward_op(op: &Op, nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let out = out_of(op);
    // Ops later in the tape have already contributed everything to `out`;
    // if nothing reached it, this op cannot influence the loss.
    let dout = match grads[out.0].take() {
        Some(g) => g,
        None => return,
    };

    {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, add: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
            add(slot);
        };

        match op {
            Op::Add { a, b, out } => {
                let os = &nodes[out.0].shape;
                acc(grads, *a, &mut |g| reduce_into(&dout, os, &nodes[a.0].shape, g, 1.0));
                acc(grads, *b, &mut |g| reduce_into(&dout, os, &nodes[b.0].shape, g, 1.0));
            }
            Op::Sub { a, b, out } => {
                let os = &nodes[out.0].shape;
                acc(grads, *a, &mut |g| reduce_into(&dout, os, &nodes[a.0].shape, g, 1.0));
                acc(grads, *b, &mut |g| reduce_into(&dout, os, &nodes[b.0].shape, g, -1.0));
            }
            Op::Mul { a, b, out } => {
                let os = &nodes[out.0].shape;
                if nodes[a.0].requires_grad {
                    let full = broadcast_apply(os, &dout, &nodes[b.0].shape, &nodes[b.0].data, os, |d, bv| d * bv);
                    acc(grads, *a, &mut |g| reduce_into(&full, os, &nodes[a.0].shape, g, 1.0));
                }
                if nodes[b.0].requires_grad {
                    let full = broadcast_apply(os, &dout, &nodes[a.0].shape, &nodes[a.0].data, os, |d, av| d * av);
                    acc(grads, *b, &mut |g| reduce_into(&full, os, &nodes[b.0].shape, g, 1.0));
                }
            }
            Op::Scale { a, k, .. } => {
                acc(grads, *a, &mut |g| {
                    for (gi, di) in g.iter_mut().zip(&dout) {
                        *gi += k * di;
                    }
                });
            }
            Op::Matmul { a, b, out } => backward_matmul(nodes, grads, *a, *b, *out, &dout, &acc),
            Op::SwapAxes { a, ax0, ax1, out } => {
                let permuted = permuted_swap(&nodes[out.0].shape, &dout, *ax0, *ax1);
                acc(grads, *a, &mut |g| {
                    for (gi, di) in g.iter_mut().zip(&permuted) {
                        *gi += di;
                    }
                });
            }
            Op::Reshape { a, .. } => {
                acc(grads, *a, &mut |g| {
                    for (gi, di) in g.iter_mut().zip(&dout) {
                        *gi += di;
                    }
                });
            }
            Op::Concat { parts, axis, out } => {
                let os = &nodes[out.0].shape;
                let outer: usize = os[..*axis].iter().product();
                let inner: usize = os[*axis + 1..].iter().product();
                let out_stride = os[*axis] * inner;
                let mut off = 0;
                for p in parts {
                    let plen = nodes[p.0].shape[*axis] * inner;
                    acc(grads, *p, &mut |g| {
                        for o in 0..outer {
                            let src = o * out_stride + off;
                            for i in 0..plen {
                                g[o * plen + i] += dout[src + i];
                            }
                        }
                    });
                    off += plen;
                }
            }
            Op::Slice { a, axis, start, out } => {
                let ashape = &nodes[a.0].shape;
                let os = &nodes[out.0].shape;
                let outer: usize = ashape[..*axis].iter().product();
                let inner: usize = ashape[*axis + 1..].iter().product();
                let in_stride = ashape[*axis] * inner;
                let len = os[*axis];
                acc(grads, *a, &mut |g| {
                    for o in 0..outer {
                        let dst = o * in_stride + start * inner;
                        for i in 0..len * inner {
                            g[dst + i] += dout[o * len * inner + i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis, out } => {
                let p = &nodes[out.0].data;
                let (outer, alen, inner) = lane_dims(&nodes[out.0].shape, *axis);
                acc(grads, *x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * alen * inner + i;
                            let mut dot = 0.0;
                            for l in 0..alen {
                                let idx = base + l * inner;
                                dot += dout[idx] * p[idx];
                            }
                            for l in 0..alen {
                                let idx = base + l * inner;
                                g[idx] += p[idx] * (dout[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis, out } => {
                let ls = &nodes[out.0].data;
                let (outer, alen, inner) = lane_dims(&nodes[out.0].shape, *axis);
                acc(grads, *x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * alen * inner + i;
                            let mut sum = 0.0;
                            for l in 0..alen {
                                sum += dout[base + l * inner];
                            }
                            for l in 0..alen {
                                let idx = base + l * inner;
                                g[idx] += dout[idx] - ls[idx].exp() * sum;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, mean, rstd, .. } => {
                let d = *nodes[x.0].shape.last().unwrap();
                let rows = nodes[x.0].data.len() / d;
                let xd = &nodes[x.0].data;
                let gd = &nodes[gain.0].data;
                acc(grads, *x, &mut |g| {
                    for r in 0..rows {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let xr = &xd[r * d..(r + 1) * d];
                        let dr = &dout[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for i in 0..d {
                            let xh = (xr[i] - mu) * rs;
                            let dg = dr[i] * gd[i];
                            s1 += dg;
                            s2 += dg * xh;
                        }
                        s1 /= d as f64;
                        s2 /= d as f64;
                        let gr = &mut g[r * d..(r + 1) * d];
                        for i in 0..d {
                            let xh = (xr[i] - mu) * rs;
                            gr[i] += rs * (dr[i] * gd[i] - s1 - xh * s2);
                        }
                    }
                });
                acc(grads, *gain, &mut |g| {
                    for r in 0..rows {
                        let (mu, rs) = (mean[r], rstd[r]);
                        for i in 0..d {
                            g[i] += dout[r * d + i] * (xd[r * d + i] - mu) * rs;
                        }
                    }
                });
                acc(grads, *bias, &mut |g| {
                    for r in 0..rows {
                        for i in 0..d {
                            g[i] += dout[r * d + i];
                        }
                    }
                });
            }
            Op::Gelu { x, .. } => {
                let xd = &nodes[x.0].data;
                acc(grads, *x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dout[i] * gelu_deriv(xd[i]);
                    }
                });
            }
            Op::Relu { x, .. } => {
                let xd = &nodes[x.0].data;
                acc(grads, *x, &mut |g| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            g[i] += dout[i];
                        }
                    }
                });
            }
            Op::SumAll { x, .. } => {
                let d = dout[0];
                acc(grads, *x, &mut |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::SumAxis { x, axis, .. } => {
                let (outer, alen, inner) = lane_dims(&nodes[x.0].shape, *axis);
                acc(grads, *x, &mut |g| {
                    for o in 0..outer {
                        for l in 0..alen {
                            let dst = (o * alen + l) * inner;
                            for i in 0..inner {
                                g[dst + i] += dout[o * inner + i];
                            }
                        }
                    }
                });
            }
        }
    }

    grads[out.0] = Some(dout);
}

/// Accumulates a partial gradient into `grads[var]`, allocating the buffer
/// on first touch; the closure writes the contribution in place.
type GradSink<'a> = dyn Fn(&mut [Option<Vec<f64>>], Var, &mut dyn FnMut(&mut [f64])) + 'a;

#[allow(clippy::too_many_arguments)]
fn backward_matmul(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: Var,
    b: Var,
    out: Var,
    dout: &[f64],
    acc: &GradSink<'_>,
) {
    let (na, nb, no) = (&nodes[a.0], &nodes[b.0], &nodes[out.0]);
    let m = na.shape[na.shape.len() - 2];
    let k = na.shape[na.shape.len() - 1];
    let n = nb.shape[nb.shape.len() - 1];
    let batch_shape = &no.shape[..no.shape.len() - 2];
    let batches: usize = batch_shape.iter().product();
    let sa = batch_strides(&na.shape[..na.shape.len() - 2], batch_shape, m * k);
    let sb = batch_strides(&nb.shape[..nb.shape.len() - 2], batch_shape, k * n);

    if na.requires_grad {
        acc(grads, a, &mut |g| {
            let mut odo = Odometer::new(batch_shape);
            for bi in 0..batches {
                let (oa, ob) = (odo.offset(&sa), odo.offset(&sb));
                mm_nt_acc(
                    &dout[bi * m * n..(bi + 1) * m * n],
                    &nb.data[ob..ob + k * n],
                    &mut g[oa..oa + m * k],
                    m,
                    n,
                    k,
                );
                odo.step();
            }
        });
    }
    if nb.requires_grad {
        acc(grads, b, &mut |g| {
            let mut odo = Odometer::new(batch_shape);
            for bi in 0..batches {
                let (oa, ob) = (odo.offset(&sa), odo.offset(&sb));
                mm_tn_acc(
                    &na.data[oa..oa + m * k],
                    &dout[bi * m * n..(bi + 1) * m * n],
                    &mut g[ob..ob + k * n],
                    k,
                    m,
                    n,
                );
                odo.step();
            }
        });
    }
}

// ---- kernels -----------------------------------------------------------------

/// out[m,n] += a[m,k] @ b[k,n]
fn mm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T  (dot-product kernel)
fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, ov) in orow.iter_mut().enumerate() {
            *ov += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[m,n] += a[k,m]^T @ b[k,n]  (outer-product accumulation over k rows)
fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Independent accumulators let the compiler vectorize the reduction
    // without reassociating a single serial chain.
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

// ---- broadcast / layout helpers -----------------------------------------------

/// Per-dimension element strides of `shape` right-aligned into `out_shape`,
/// with stride 0 on broadcast dimensions.
fn elem_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Strides over *batch blocks* of `block` elements, for matmul leading dims.
fn batch_strides(shape: &[usize], batch_shape: &[usize], block: usize) -> Vec<usize> {
    let mut s = elem_strides(shape, batch_shape);
    for v in s.iter_mut() {
        *v *= block;
    }
    s
}

struct Odometer {
    shape: Vec<usize>,
    idx: Vec<usize>,
}

impl Odometer {
    fn new(shape: &[usize]) -> Self {
        Odometer { shape: shape.to_vec(), idx: vec![0; shape.len()] }
    }

    fn offset(&self, strides: &[usize]) -> usize {
        self.idx.iter().zip(strides).map(|(i, s)| i * s).sum()
    }

    fn step(&mut self) {
        for j in (0..self.shape.len()).rev() {
            self.idx[j] += 1;
            if self.idx[j] < self.shape[j] {
                return;
            }
            self.idx[j] = 0;
        }
    }
}

fn broadcast_apply(
    a_shape: &[usize],
    a: &[f64],
    b_shape: &[usize],
    b: &[f64],
    out_shape: &[usize],
    f: fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    if a_shape == b_shape {
        for i in 0..numel {
            out[i] = f(a[i], b[i]);
        }
        return out;
    }
    // Suffix broadcast (e.g. [B,N,D] + [D]) reduces to a modulo walk.
    if a_shape == out_shape && is_suffix_of(b_shape, out_shape) {
        let bl = b.len().max(1);
        for i in 0..numel {
            out[i] = f(a[i], b[i % bl]);
        }
        return out;
    }
    if b_shape == out_shape && is_suffix_of(a_shape, out_shape) {
        let al = a.len().max(1);
        for i in 0..numel {
            out[i] = f(a[i % al], b[i]);
        }
        return out;
    }
    let sa = elem_strides(a_shape, out_shape);
    let sb = elem_strides(b_shape, out_shape);
    let mut odo = Odometer::new(out_shape);
    for o in out.iter_mut() {
        *o = f(a[odo.offset(&sa)], b[odo.offset(&sb)]);
        odo.step();
    }
    out
}

/// True when `shape` right-aligns against `out_shape` with only leading 1s,
/// so its flat index is `flat % numel`.
fn is_suffix_of(shape: &[usize], out_shape: &[usize]) -> bool {
    let pad = out_shape.len() - shape.len();
    let mut boundary = shape.len();
    for i in (0..shape.len()).rev() {
        if shape[i] != out_shape[pad + i] {
            boundary = i + 1;
            break;
        }
        boundary = i;
    }
    shape[..boundary].iter().all(|&d| d == 1)
}

/// Accumulate `scale * full` (shaped `from_shape`) into `g` (shaped `to_shape`),
/// summing over broadcast dimensions.
fn reduce_into(full: &[f64], from_shape: &[usize], to_shape: &[usize], g: &mut [f64], scale: f64) {
    if from_shape == to_shape {
        for (gi, fi) in g.iter_mut().zip(full) {
            *gi += scale * fi;
        }
        return;
    }
    if is_suffix_of(to_shape, from_shape) {
        let tl = g.len().max(1);
        for (i, fi) in full.iter().enumerate() {
            g[i % tl] += scale * fi;
        }
        return;
    }
    let st = elem_strides(to_shape, from_shape);
    let mut odo = Odometer::new(from_shape);
    for fi in full {
        g[odo.offset(&st)] += scale * fi;
        odo.step();
    }
}

fn permuted_swap(shape: &[usize], data: &[f64], ax0: usize, ax1: usize) -> Vec<f64> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let (ax0, ax1) = (ax0.min(ax1), ax0.max(ax1));
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);

    // Walk the output in order; map each output index to the input offset.
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut mapped = in_strides.clone();
    mapped.swap(ax0, ax1);

    let mut out = vec![0.0; data.len()];
    if ax1 < rank - 1 {
        // Last axis untouched: copy contiguous runs.
        let run = shape[rank - 1];
        let outer_shape = &out_shape[..rank - 1];
        let mut odo = Odometer::new(outer_shape);
        let count: usize = outer_shape.iter().product();
        for c in 0..count {
            let src = odo.offset(&mapped[..rank - 1]);
            out[c * run..(c + 1) * run].copy_from_slice(&data[src..src + run]);
            odo.step();
        }
    } else {
        let mut odo = Odometer::new(&out_shape);
        for o in out.iter_mut() {
            *o = data[odo.offset(&mapped)];
            odo.step();
        }
    }
    out
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {} out of range for {:?}", axis, shape);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn lane_map(
    shape: &[usize],
    data: &[f64],
    axis: usize,
    f: fn(&mut dyn Iterator<Item = f64>, &mut Vec<f64>),
) -> Vec<f64> {
    let (outer, alen, inner) = lane_dims(shape, axis);
    let mut out = vec![0.0; data.len()];
    let mut lane = Vec::with_capacity(alen);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * alen * inner + i;
            lane.clear();
            f(&mut (0..alen).map(|l| data[base + l * inner]), &mut lane);
            for (l, v) in lane.iter().enumerate() {
                out[base + l * inner] = *v;
            }
        }
    }
    out
}

fn softmax_lane(xs: &mut dyn Iterator<Item = f64>, out: &mut Vec<f64>) {
    out.extend(xs);
    assert!(out.iter().all(|v| v.is_finite()), "softmax over non-finite input");
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_lane(xs: &mut dyn Iterator<Item = f64>, out: &mut Vec<f64>) {
    out.extend(xs);
    assert!(out.iter().all(|v| v.is_finite()), "log_softmax over non-finite input");
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = out.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in out.iter_mut() {
        *v -= lse;
    }
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}
