use std::cell::RefCell;
use std::sync::Arc;

use super::ops::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Spatial / channel pooling flavours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Global average over H×W, N×C×1×1.
    GlobalAvg,
    /// Global max over H×W, N×C×1×1.
    GlobalMax,
    /// Average across channels, N×1×H×W.
    ChannelAvg,
    /// Max across channels, N×1×H×W.
    ChannelMax,
    /// Average over the positions where a binary H×W mask is 1, N×C×1×1.
    LocalAvg,
}

enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    Conv1d {
        input: usize,
        kernel: usize,
    },
    GlobalAvg {
        input: usize,
    },
    ChannelAvg {
        input: usize,
    },
    LocalAvg {
        input: usize,
        mask: Vec<f64>,
        count: f64,
    },
    /// Output element `i` copies input element `index[i]` (max pooling).
    Gather {
        input: usize,
        index: Vec<usize>,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Sigmoid {
        input: usize,
    },
    Relu {
        input: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Upsample {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Reshape {
        input: usize,
    },
    Sum {
        input: usize,
    },
    Bce {
        pred: usize,
        gt: Arc<Tensor>,
    },
    Iou {
        pred: usize,
        gt: Arc<Tensor>,
    },
    DoubleGrad {
        input: usize,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records executed operations so gradients can be replayed in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

pub(crate) const BCE_CLAMP: f64 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that will receive gradients.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.var(value, true)
    }

    /// A leaf excluded from gradient accumulation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.var(value, false)
    }

    pub fn var(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires
    /// gradients. Repeated calls add to the stored gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = loss.id;
        if nodes[root].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[root].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf) {
                match &mut nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let nodes_ro: &Vec<Node> = &nodes;
            backprop_node(nodes_ro, i, &g, &mut grads);
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn reduce_broadcast(g: &[f64], out_shape: &[usize], in_shape: &[usize], scale: Option<&[f64]>) -> Vec<f64> {
    let in_len: usize = in_shape.iter().product();
    let mut red = vec![0.0; in_len];
    if out_shape == in_shape {
        match scale {
            Some(s) => red.iter_mut().zip(g.iter().zip(s)).for_each(|(r, (g, s))| *r = g * s),
            None => red.copy_from_slice(g),
        }
        return red;
    }
    let map = ops::broadcast_map(out_shape, in_shape);
    for (k, &src) in map.iter().enumerate() {
        red[src] += match scale {
            Some(s) => g[k] * s[k],
            None => g[k],
        };
    }
    red
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => unreachable!(),
        Op::Conv2d {
            input,
            kernel,
            geom,
        } => {
            let (need_in, need_k) = (nodes[*input].requires_grad, nodes[*kernel].requires_grad);
            let (gi, gk) = ops::conv2d_backward(
                nodes[*input].value.data(),
                nodes[*kernel].value.data(),
                g,
                geom,
                need_in,
                need_k,
            );
            if need_in {
                accumulate(nodes, grads, *input, gi);
            }
            if need_k {
                accumulate(nodes, grads, *kernel, gk);
            }
        }
        Op::Conv1d { input, kernel } => {
            let x = &nodes[*input].value;
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let (gi, gk) =
                ops::conv1d_channels_backward(x.data(), n, c, nodes[*kernel].value.data(), g);
            accumulate(nodes, grads, *input, gi);
            accumulate(nodes, grads, *kernel, gk);
        }
        Op::GlobalAvg { input } => {
            let x = &nodes[*input].value;
            let plane = x.shape()[2] * x.shape()[3];
            let inv = 1.0 / plane as f64;
            let gi = (0..x.len()).map(|k| g[k / plane] * inv).collect();
            accumulate(nodes, grads, *input, gi);
        }
        Op::ChannelAvg { input } => {
            let (n, c, h, w) = nodes[*input].value.dims4().unwrap();
            let plane = h * w;
            let inv = 1.0 / c as f64;
            let mut gi = vec![0.0; n * c * plane];
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..plane {
                        gi[(b * c + ch) * plane + p] = g[b * plane + p] * inv;
                    }
                }
            }
            accumulate(nodes, grads, *input, gi);
        }
        Op::LocalAvg { input, mask, count } => {
            let x = &nodes[*input].value;
            let plane = mask.len();
            let gi = if *count > 0.0 {
                (0..x.len())
                    .map(|k| g[k / plane] * mask[k % plane] / count)
                    .collect()
            } else {
                vec![0.0; x.len()]
            };
            accumulate(nodes, grads, *input, gi);
        }
        Op::Gather { input, index } => {
            let mut gi = vec![0.0; nodes[*input].value.len()];
            for (k, &src) in index.iter().enumerate() {
                if src != usize::MAX {
                    gi[src] += g[k];
                }
            }
            accumulate(nodes, grads, *input, gi);
        }
        Op::Mul { a, b } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                let vb_full = broadcast_values(vb, out.shape());
                let ga = reduce_broadcast(g, out.shape(), va.shape(), Some(&vb_full));
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let va_full = broadcast_values(va, out.shape());
                let gb = reduce_broadcast(g, out.shape(), vb.shape(), Some(&va_full));
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Add { a, b } => {
            for &p in [a, b] {
                if nodes[p].requires_grad {
                    let gp = reduce_broadcast(g, out.shape(), nodes[p].value.shape(), None);
                    accumulate(nodes, grads, p, gp);
                }
            }
        }
        Op::Scale { input, factor } => {
            accumulate(nodes, grads, *input, g.iter().map(|v| v * factor).collect());
        }
        Op::Sigmoid { input } => {
            let gi = g
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            accumulate(nodes, grads, *input, gi);
        }
        Op::Relu { input } => {
            let gi = g
                .iter()
                .zip(nodes[*input].value.data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *input, gi);
        }
        Op::Concat { parts } => {
            let (n, ctot, h, w) = out.dims4().unwrap();
            let plane = h * w;
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p].value.shape()[1];
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(n * c * plane);
                    for b in 0..n {
                        let start = (b * ctot + offset) * plane;
                        gp.extend_from_slice(&g[start..start + c * plane]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += c;
            }
        }
        Op::Upsample { input } => {
            let (n, c, h, w) = nodes[*input].value.dims4().unwrap();
            let (_, _, oh, ow) = out.dims4().unwrap();
            let gi = ops::upsample_backward(g, n * c, h, w, oh, ow);
            accumulate(nodes, grads, *input, gi);
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let x = &nodes[*input].value;
            let wt = &nodes[*weight].value;
            let (n, cin) = (x.shape()[0], x.shape()[1]);
            let cout = wt.shape()[0];
            if nodes[*input].requires_grad {
                let mut gi = vec![0.0; n * cin];
                for b in 0..n {
                    for o in 0..cout {
                        let go = g[b * cout + o];
                        for k in 0..cin {
                            gi[b * cin + k] += go * wt.data()[o * cin + k];
                        }
                    }
                }
                accumulate(nodes, grads, *input, gi);
            }
            if nodes[*weight].requires_grad {
                let mut gw = vec![0.0; cout * cin];
                for b in 0..n {
                    for o in 0..cout {
                        let go = g[b * cout + o];
                        for k in 0..cin {
                            gw[o * cin + k] += go * x.data()[b * cin + k];
                        }
                    }
                }
                accumulate(nodes, grads, *weight, gw);
            }
            if let Some(bias) = bias {
                let mut gb = vec![0.0; cout];
                for b in 0..n {
                    for o in 0..cout {
                        gb[o] += g[b * cout + o];
                    }
                }
                accumulate(nodes, grads, *bias, gb);
            }
        }
        Op::Reshape { input } | Op::DoubleGrad { input } => {
            let factor = if matches!(nodes[i].op, Op::DoubleGrad { .. }) {
                2.0
            } else {
                1.0
            };
            accumulate(nodes, grads, *input, g.iter().map(|v| v * factor).collect());
        }
        Op::Sum { input } => {
            accumulate(nodes, grads, *input, vec![g[0]; nodes[*input].value.len()]);
        }
        Op::Bce { pred, gt } => {
            let p = nodes[*pred].value.data();
            let inv = 1.0 / p.len() as f64;
            let gi = p
                .iter()
                .zip(gt.data())
                .map(|(&p, &t)| {
                    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                        0.0
                    } else {
                        g[0] * inv * (-t / p + (1.0 - t) / (1.0 - p))
                    }
                })
                .collect();
            accumulate(nodes, grads, *pred, gi);
        }
        Op::Iou { pred, gt } => {
            let p = nodes[*pred].value.data();
            let (inter, union) = iou_terms(p, gt.data());
            let gi = gt
                .data()
                .iter()
                .map(|&t| -g[0] * (t * union - (inter + 1.0) * (1.0 - t)) / (union * union))
                .collect();
            accumulate(nodes, grads, *pred, gi);
        }
    }
}

fn broadcast_values(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    ops::broadcast_map(out_shape, t.shape())
        .into_iter()
        .map(|k| t.data()[k])
        .collect()
}

/// `(Σ p·g, Σ p + Σ g − Σ p·g + 1)`.
fn iou_terms(p: &[f64], g: &[f64]) -> (f64, f64) {
    let inter = ops::accurate_sum(p.iter().zip(g).map(|(a, b)| a * b));
    let sp = ops::accurate_sum(p.iter().copied());
    let sg = ops::accurate_sum(g.iter().copied());
    (inter, sp + sg - inter + 1.0)
}

fn check_mask(mask: &Tensor, h: usize, w: usize) -> Result<Vec<f64>> {
    let plane: usize = mask.shape().iter().product();
    let dims_ok = mask.shape().iter().rev().take(2).eq([w, h].iter())
        && mask.shape().iter().rev().skip(2).all(|&d| d == 1);
    if plane != h * w || !dims_ok {
        return Err(Error::shape(
            "pool",
            format!("mask shape {:?} does not match spatial size {h}x{w}", mask.shape()),
        ));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid("pool: mask values must be 0 or 1"));
    }
    Ok(mask.data().to_vec())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    /// 2-D cross-correlation of an NCHW input with an OIKhKw kernel.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        let x = self.value();
        let k = kernel.value();
        let geom = ops::conv2d_geom(&x, &k, stride, padding)?;
        let out = ops::conv2d_forward(x.data(), k.data(), &geom);
        let shape = [geom.n, geom.o, geom.oh, geom.ow];
        let t = Tensor::new(&shape, out)?;
        Ok(self.tape.push(
            t,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Convolution across the channel axis of an N×C×1×1 descriptor with an
    /// odd-length kernel, zero padded to keep C.
    pub fn conv1d_channels(self, kernel: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        let x = self.value();
        let k = kernel.value();
        if k.shape().len() != 1 || k.len() % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv1d_channels: kernel must be 1-D with odd length, got shape {:?}",
                k.shape()
            )));
        }
        let (n, c) = match x.shape() {
            [n, c, 1, 1] | [n, c] => (*n, *c),
            s => {
                return Err(Error::shape(
                    "conv1d_channels",
                    format!("input must be N x C x 1 x 1, got {s:?}"),
                ))
            }
        };
        let out = ops::conv1d_channels_forward(x.data(), n, c, k.data());
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.tape.push(
            t,
            Op::Conv1d {
                input: self.id,
                kernel: kernel.id,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Pools an NCHW input. `mask` is required for [`PoolMode::LocalAvg`]
    /// and must be a binary H×W map; an empty mask yields zeros.
    pub fn pool(self, mode: PoolMode, mask: Option<&Tensor>) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x
            .dims4()
            .map_err(|_| Error::shape("pool", format!("input must be NCHW, got {:?}", x.shape())))?;
        let plane = h * w;
        let data = x.data();
        if mode == PoolMode::LocalAvg && mask.is_none() {
            return Err(Error::invalid("pool: local average pooling requires a mask"));
        }
        if mode != PoolMode::LocalAvg && mask.is_some() {
            return Err(Error::invalid("pool: mask given for a non-local mode"));
        }
        match mode {
            PoolMode::GlobalAvg => {
                let out = (0..n * c)
                    .map(|p| ops::accurate_sum(data[p * plane..(p + 1) * plane].iter().copied()) / plane as f64)
                    .collect();
                let t = Tensor::new(&[n, c, 1, 1], out)?;
                Ok(self.tape.push(t, Op::GlobalAvg { input: self.id }, &[self.id]))
            }
            PoolMode::LocalAvg => {
                let m = check_mask(mask.unwrap(), h, w)?;
                let count: f64 = m.iter().sum();
                let out = (0..n * c)
                    .map(|p| {
                        if count == 0.0 {
                            0.0
                        } else {
                            ops::accurate_sum(
                                data[p * plane..(p + 1) * plane]
                                    .iter()
                                    .zip(&m)
                                    .map(|(x, m)| x * m),
                            ) / count
                        }
                    })
                    .collect();
                let t = Tensor::new(&[n, c, 1, 1], out)?;
                Ok(self.tape.push(
                    t,
                    Op::LocalAvg {
                        input: self.id,
                        mask: m,
                        count,
                    },
                    &[self.id],
                ))
            }
            PoolMode::GlobalMax => {
                let mut out = Vec::with_capacity(n * c);
                let mut index = Vec::with_capacity(n * c);
                for p in 0..n * c {
                    let (k, v) = first_argmax(&data[p * plane..(p + 1) * plane]);
                    out.push(v);
                    index.push(p * plane + k);
                }
                let t = Tensor::new(&[n, c, 1, 1], out)?;
                Ok(self.tape.push(
                    t,
                    Op::Gather {
                        input: self.id,
                        index,
                    },
                    &[self.id],
                ))
            }
            PoolMode::ChannelAvg => {
                let mut out = vec![0.0; n * plane];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for p in 0..plane {
                            out[b * plane + p] += data[base + p];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= c as f64);
                let t = Tensor::new(&[n, 1, h, w], out)?;
                Ok(self.tape.push(t, Op::ChannelAvg { input: self.id }, &[self.id]))
            }
            PoolMode::ChannelMax => {
                let mut out = vec![f64::NEG_INFINITY; n * plane];
                let mut index = vec![0usize; n * plane];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for p in 0..plane {
                            let v = data[base + p];
                            if v > out[b * plane + p] || ch == 0 {
                                out[b * plane + p] = v;
                                index[b * plane + p] = base + p;
                            }
                        }
                    }
                }
                let t = Tensor::new(&[n, 1, h, w], out)?;
                Ok(self.tape.push(
                    t,
                    Op::Gather {
                        input: self.id,
                        index,
                    },
                    &[self.id],
                ))
            }
        }
    }

    pub fn gap(self) -> Result<Var<'t>> {
        self.pool(PoolMode::GlobalAvg, None)
    }

    pub fn gmp(self) -> Result<Var<'t>> {
        self.pool(PoolMode::GlobalMax, None)
    }

    pub fn cap(self) -> Result<Var<'t>> {
        self.pool(PoolMode::ChannelAvg, None)
    }

    pub fn cmp(self) -> Result<Var<'t>> {
        self.pool(PoolMode::ChannelMax, None)
    }

    pub fn lap(self, mask: &Tensor) -> Result<Var<'t>> {
        self.pool(PoolMode::LocalAvg, Some(mask))
    }

    /// Spatial max pooling with `-inf` padding.
    pub fn max_pool2d(self, kernel: usize, stride: usize, padding: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if kernel == 0 || stride == 0 || padding >= kernel {
            return Err(Error::invalid(format!(
                "max_pool2d: invalid kernel {kernel}, stride {stride}, padding {padding}"
            )));
        }
        let oh = ops::conv_out_size(h, kernel, stride, padding)
            .ok_or_else(|| Error::shape("max_pool2d", "input smaller than window"))?;
        let ow = ops::conv_out_size(w, kernel, stride, padding)
            .ok_or_else(|| Error::shape("max_pool2d", "input smaller than window"))?;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut index = Vec::with_capacity(n * c * oh * ow);
        let data = x.data();
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let k = base + iy as usize * w + ix as usize;
                            if arg == usize::MAX || data[k] > best {
                                best = data[k];
                                arg = k;
                            }
                        }
                    }
                    out.push(best);
                    index.push(arg);
                }
            }
        }
        let t = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.tape.push(
            t,
            Op::Gather {
                input: self.id,
                index,
            },
            &[self.id],
        ))
    }

    fn binary(self, other: Var<'t>, mul: bool) -> Result<Var<'t>> {
        self.same_tape(&other);
        let a = self.value();
        let b = other.value();
        let shape = ops::broadcast_shape(a.shape(), b.shape())?;
        let out: Vec<f64> = if a.shape() == b.shape() {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| if mul { x * y } else { x + y })
                .collect()
        } else {
            let ma = ops::broadcast_map(&shape, a.shape());
            let mb = ops::broadcast_map(&shape, b.shape());
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| {
                    let (x, y) = (a.data()[i], b.data()[j]);
                    if mul {
                        x * y
                    } else {
                        x + y
                    }
                })
                .collect()
        };
        let t = Tensor::new(&shape, out)?;
        let op = if mul {
            Op::Mul {
                a: self.id,
                b: other.id,
            }
        } else {
            Op::Add {
                a: self.id,
                b: other.id,
            }
        };
        Ok(self.tape.push(t, op, &[self.id, other.id]))
    }

    /// Element-wise product; size-1 axes broadcast.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, true)
    }

    /// Element-wise sum; size-1 axes broadcast.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, false)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let t = self.value().map(|v| v * factor);
        self.tape.push(
            t,
            Op::Scale {
                input: self.id,
                factor,
            },
            &[self.id],
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let t = self.value().map(ops::sigmoid);
        self.tape.push(t, Op::Sigmoid { input: self.id }, &[self.id])
    }

    pub fn relu(self) -> Var<'t> {
        let t = self.value().map(|v| v.max(0.0));
        self.tape.push(t, Op::Relu { input: self.id }, &[self.id])
    }

    /// Bilinear resize with align-corners-false sampling.
    pub fn upsample_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("upsample_bilinear: output size must be >= 1"));
        }
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let out = ops::upsample_forward(x.data(), n * c, h, w, out_h, out_w);
        let t = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.tape.push(t, Op::Upsample { input: self.id }, &[self.id]))
    }

    /// `x Wᵀ + b` for an `N × C_in` input and a `C_out × C_in` weight.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let x = self.value();
        let wt = weight.value();
        let (n, cin) = match x.shape() {
            [n, c] => (*n, *c),
            s => return Err(Error::shape("linear", format!("input must be N x C_in, got {s:?}"))),
        };
        let cout = match wt.shape() {
            [o, i] if *i == cin => *o,
            s => {
                return Err(Error::shape(
                    "linear",
                    format!("weight shape {s:?} incompatible with C_in = {cin}"),
                ))
            }
        };
        let bv = match bias {
            Some(b) => {
                self.same_tape(&b);
                let bv = b.value();
                if bv.shape() != [cout] {
                    return Err(Error::shape(
                        "linear",
                        format!("bias shape {:?}, expected [{cout}]", bv.shape()),
                    ));
                }
                Some(bv)
            }
            None => None,
        };
        let mut out = vec![0.0; n * cout];
        for b in 0..n {
            for o in 0..cout {
                let mut acc = bv.as_ref().map_or(0.0, |bv| bv.data()[o]);
                for k in 0..cin {
                    acc += wt.data()[o * cin + k] * x.data()[b * cin + k];
                }
                out[b * cout + o] = acc;
            }
        }
        let t = Tensor::new(&[n, cout], out)?;
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        Ok(self.tape.push(
            t,
            Op::Linear {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
            },
            &parents,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        Ok(self.tape.push(t, Op::Reshape { input: self.id }, &[self.id]))
    }

    pub fn sum(self) -> Var<'t> {
        let t = Tensor::scalar(self.value().sum());
        self.tape.push(t, Op::Sum { input: self.id }, &[self.id])
    }

    /// Mean binary cross-entropy against a constant target, predictions
    /// clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(self, target: &Tensor) -> Result<Var<'t>> {
        let p = self.value();
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "bce",
                format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let sum = ops::accurate_sum(p.data().iter().zip(target.data()).map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        }));
        let t = Tensor::scalar(sum / p.len() as f64);
        Ok(self.tape.push(
            t,
            Op::Bce {
                pred: self.id,
                gt: Arc::new(target.clone()),
            },
            &[self.id],
        ))
    }

    /// Soft IoU loss `1 − (Σpg + 1) / (Σp + Σg − Σpg + 1)`.
    pub fn iou(self, target: &Tensor) -> Result<Var<'t>> {
        let p = self.value();
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "iou",
                format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let (inter, union) = iou_terms(p.data(), target.data());
        let t = Tensor::scalar(1.0 - (inter + 1.0) / union);
        Ok(self.tape.push(
            t,
            Op::Iou {
                pred: self.id,
                gt: Arc::new(target.clone()),
            },
            &[self.id],
        ))
    }

    /// Identity forward whose backward doubles the gradient. Exists only to
    /// plant faults that gradient checking must catch.
    #[doc(hidden)]
    pub fn fault_double_grad(self) -> Var<'t> {
        let t = (*self.value()).clone();
        self.tape.push(t, Op::DoubleGrad { input: self.id }, &[self.id])
    }
}

fn first_argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (k, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// Concatenates NCHW parts along the channel axis in argument order.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels: no inputs"))?;
    let tape = first.tape;
    let values: Vec<Arc<Tensor>> = parts
        .iter()
        .map(|p| {
            first.same_tape(p);
            p.value()
        })
        .collect();
    let (n, _, h, w) = values[0].dims4()?;
    let mut ctot = 0;
    for v in &values {
        let (vn, vc, vh, vw) = v.dims4()?;
        if (vn, vh, vw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("part {:?} does not match N/H/W of {:?}", v.shape(), values[0].shape()),
            ));
        }
        ctot += vc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * ctot * plane);
    for b in 0..n {
        for v in &values {
            let c = v.shape()[1];
            out.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let t = Tensor::new(&[n, ctot, h, w], out)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(t, Op::Concat { parts: ids.clone() }, &ids))
}
