//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation reads
//! earlier nodes and pushes one output node, so node order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Values are stored as `f32`; every reduction (matmul, conv, sums,
//! softmax normalizers) accumulates in `f64`.
//!
//! Graphs are cheap and meant to be rebuilt for every forward pass.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddRow { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f32 },
    AddScalar { a: Var },
    Relu { a: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Flatten { a: Var },
    LogSoftmax { a: Var },
    Softmax { a: Var },
    Log { a: Var, floor: Option<f32> },
    Sum { a: Var },
    Mean { a: Var },
    Gather { a: Var, idx: Vec<usize> },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
}

/// Operation tape plus gradient buffers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
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

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Inserts a tensor as a leaf. The leaf is differentiable iff
    /// `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Inserts a non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Inserts a differentiable leaf.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ---- forward operations -------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|x| *x = 0.0);
            let arow = &av[i * k..(i + 1) * k];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let aip = aip as f64;
                let brow = &bv[p * n..(p + 1) * n];
                for (s, &bpj) in acc.iter_mut().zip(brow) {
                    *s += aip * bpj as f64;
                }
            }
            for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = *s as f32;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], out, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(op, shape, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add { a, b }, a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub { a, b }, a, b, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul { a, b }, a, b, |x, y| x * y))
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let n = *sa.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(shape_err("add_row", format!("{sa:?} + row {sb:?}")));
        }
        let bv = self.value(b);
        let value = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::AddRow { a, b }, shape, value, rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Op::Scale { a, s }, shape, value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar { a }, shape, value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Op::Relu { a }, shape, value, rg)
    }

    /// Stride-1 convolution of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`
    /// and bias `b: [O]`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 || sx[1] != sw[1] || sb[0] != sw[0] {
            return Err(shape_err("conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (h2, w2) = (sx[2] + 2 * pad, sx[3] + 2 * pad);
        if sw[2] > h2 || sw[3] > w2 {
            return Err(shape_err(
                "conv2d",
                format!("kernel {:?} larger than padded input {h2}x{w2}", &sw[2..]),
            ));
        }
        let g = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            h: sx[2],
            w: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            pad,
            oh: h2 - sw[2] + 1,
            ow: w2 - sw[3] + 1,
        };
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0f32; g.batch * g.out_ch * g.oh * g.ow];
        for bi in 0..g.batch {
            for o in 0..g.out_ch {
                for i in 0..g.oh {
                    for j in 0..g.ow {
                        let mut s = bv[o] as f64;
                        for c in 0..g.in_ch {
                            for p in 0..g.kh {
                                let Some(r) = (i + p).checked_sub(g.pad).filter(|&r| r < g.h)
                                else {
                                    continue;
                                };
                                for q in 0..g.kw {
                                    let Some(col) =
                                        (j + q).checked_sub(g.pad).filter(|&c| c < g.w)
                                    else {
                                        continue;
                                    };
                                    s += wv[((o * g.in_ch + c) * g.kh + p) * g.kw + q] as f64
                                        * xv[((bi * g.in_ch + c) * g.h + r) * g.w + col] as f64;
                                }
                            }
                        }
                        out[((bi * g.out_ch + o) * g.oh + i) * g.ow + j] = s as f32;
                    }
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Op::Conv2d { x, w, b, geom: g },
            vec![g.batch, g.out_ch, g.oh, g.ow],
            out,
            rg,
        ))
    }

    /// Non-overlapping `k x k` max pooling over `[B, C, H, W]`; trailing
    /// rows/columns that do not fill a window are dropped. Ties go to the
    /// first position in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(shape_err("max_pool2d", format!("input {s:?}, window {k}")));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..s[0] * s[1] {
            let base = plane * s[2] * s[3];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * k * s[3] + j * k;
                    for p in 0..k {
                        for q in 0..k {
                            let idx = base + (i * k + p) * s[3] + j * k + q;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::MaxPool2d { x, argmax }, vec![s[0], s[1], oh, ow], out, rg))
    }

    /// `[B, ...] -> [B, prod(...)]`
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(shape_err("flatten", "rank-0 input"));
        }
        let shape = vec![s[0], s[1..].iter().product()];
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Flatten { a }, shape, value, rg))
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize> {
        match self.shape(a).last() {
            Some(&k) => Ok(k),
            None => Err(shape_err(op, "needs at least one dimension")),
        }
    }

    /// Log-softmax over the last dimension, computed with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let k = self.last_dim("log_softmax", a)?;
        let value = log_softmax_rows(self.value(a), k);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LogSoftmax { a }, shape, value, rg))
    }

    /// Softmax over the last dimension, as `exp(log_softmax(a))`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let k = self.last_dim("softmax", a)?;
        let value = log_softmax_rows(self.value(a), k)
            .into_iter()
            .map(f32::exp)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Softmax { a }, shape, value, rg))
    }

    /// Natural log. Non-positive inputs are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log of non-positive value {bad}"),
            });
        }
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Log { a, floor: None }, shape, value, rg))
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f32) -> Result<Var> {
        if floor <= 0.0 {
            return Err(Error::Domain {
                op: "log_clamped",
                detail: format!("floor must be positive, got {floor}"),
            });
        }
        let value = self.value(a).iter().map(|x| x.max(floor).ln()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Log { a, floor: Some(floor) }, shape, value, rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|&x| x as f64).sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum { a }, vec![1], vec![s as f32], rg)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Op::Mean { a }, vec![1], vec![s as f32], rg)
    }

    /// Picks `a[i, idx[i]]` from a `[B, K]` tensor, giving `[B]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != idx.len() {
            return Err(shape_err(
                "gather",
                format!("input {s:?} with {} indices", idx.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let v = self.value(a);
        let value = idx.iter().enumerate().map(|(i, &j)| v[i * k + j]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::Gather {
                a,
                idx: idx.to_vec(),
            },
            vec![idx.len()],
            value,
            rg,
        ))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Back-propagates from a scalar `loss`. Afterwards every differentiable
    /// leaf holds a gradient (zeros if it does not influence `loss`).
    ///
    /// Running it a second time without [`zero_grad`](Self::zero_grad) is
    /// an error rather than a silent double accumulation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::NonScalarLoss(self.node(loss).shape.clone()));
        }
        self.backward_done = true;
        if self.node(loss).requires_grad {
            self.grads[loss.0] = Some(vec![1.0]);
            for id in (0..=loss.0).rev() {
                let Some(gout) = self.grads[id].take() else {
                    continue;
                };
                if self.nodes[id].requires_grad {
                    self.propagate(id, &gout);
                }
                self.grads[id] = Some(gout);
            }
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && g.is_none() {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, id: usize, gout: &[f32]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    // dA = dC · Bᵀ
                    let bv = self.value(b);
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let s: f64 = grow
                                .iter()
                                .zip(brow)
                                .map(|(&g, &bb)| g as f64 * bb as f64)
                                .sum();
                            da[i * k + p] = s as f32;
                        }
                    }
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    // dB = Aᵀ · dC
                    let av = self.value(a);
                    let mut db = vec![0.0f64; k * n];
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p] as f64;
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, &g) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * g as f64;
                            }
                        }
                    }
                    self.accumulate(b, db.into_iter().map(|x| x as f32).collect());
                }
            }
            Op::Add { a, b } => {
                self.accumulate(a, gout.to_vec());
                self.accumulate(b, gout.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(a, gout.to_vec());
                self.accumulate(b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul { a, b } => {
                let da = gout.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                let db = gout.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::AddRow { a, b } => {
                self.accumulate(a, gout.to_vec());
                if self.wants(b) {
                    let n = self.shape(b)[0];
                    let mut db = vec![0.0f64; n];
                    for row in gout.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g as f64);
                    }
                    self.accumulate(b, db.into_iter().map(|x| x as f32).collect());
                }
            }
            Op::Scale { a, s } => self.accumulate(a, gout.iter().map(|g| g * s).collect()),
            Op::AddScalar { a } | Op::Flatten { a } => self.accumulate(a, gout.to_vec()),
            Op::Relu { a } => {
                let da = gout
                    .iter()
                    .zip(self.value(a))
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(a, da);
            }
            Op::Conv2d { x, w, b, geom: g } => self.conv2d_backward(gout, x, w, b, g),
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0f32; self.value(x).len()];
                for (&src, &gv) in argmax.iter().zip(gout) {
                    dx[src] += gv;
                }
                self.accumulate(x, dx);
            }
            Op::LogSoftmax { a } => {
                // dx = dy - softmax * sum(dy)
                let k = *self.shape(a).last().unwrap();
                let y = &self.nodes[id].value;
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(k).zip(gout.chunks(k)) {
                    let s: f64 = gr.iter().map(|&v| v as f64).sum();
                    dx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(&yy, &gg)| (gg as f64 - (yy as f64).exp() * s) as f32),
                    );
                }
                self.accumulate(a, dx);
            }
            Op::Softmax { a } => {
                // dx = s * (dy - <dy, s>)
                let k = *self.shape(a).last().unwrap();
                let y = &self.nodes[id].value;
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(k).zip(gout.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&s, &g)| s as f64 * g as f64).sum();
                    dx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(&s, &g)| (s as f64 * (g as f64 - dot)) as f32),
                    );
                }
                self.accumulate(a, dx);
            }
            Op::Log { a, floor } => {
                let lo = floor.unwrap_or(0.0);
                let dx = gout
                    .iter()
                    .zip(self.value(a))
                    .map(|(&g, &x)| if x > lo || floor.is_none() { g / x } else { 0.0 })
                    .collect();
                self.accumulate(a, dx);
            }
            Op::Sum { a } => {
                let n = self.value(a).len();
                self.accumulate(a, vec![gout[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(a).len();
                self.accumulate(a, vec![(gout[0] as f64 / n as f64) as f32; n]);
            }
            Op::Gather { a, idx } => {
                let k = self.shape(a)[1];
                let mut da = vec![0.0f32; self.value(a).len()];
                for (i, (&j, &g)) in idx.iter().zip(gout).enumerate() {
                    da[i * k + j] += g;
                }
                self.accumulate(a, da);
            }
        }
    }

    fn conv2d_backward(&mut self, gout: &[f32], x: Var, w: Var, b: Var, g: ConvGeom) {
        let (want_x, want_w, want_b) = (self.wants(x), self.wants(w), self.wants(b));
        let (xv, wv) = (self.value(x), self.value(w));
        let mut dx = vec![0.0f64; if want_x { xv.len() } else { 0 }];
        let mut dw = vec![0.0f64; if want_w { wv.len() } else { 0 }];
        let mut db = vec![0.0f64; if want_b { g.out_ch } else { 0 }];
        for bi in 0..g.batch {
            for o in 0..g.out_ch {
                for i in 0..g.oh {
                    for j in 0..g.ow {
                        let go = gout[((bi * g.out_ch + o) * g.oh + i) * g.ow + j] as f64;
                        if want_b {
                            db[o] += go;
                        }
                        if go == 0.0 || !(want_x || want_w) {
                            continue;
                        }
                        for c in 0..g.in_ch {
                            for p in 0..g.kh {
                                let Some(r) = (i + p).checked_sub(g.pad).filter(|&r| r < g.h)
                                else {
                                    continue;
                                };
                                for q in 0..g.kw {
                                    let Some(col) =
                                        (j + q).checked_sub(g.pad).filter(|&c| c < g.w)
                                    else {
                                        continue;
                                    };
                                    let wi = ((o * g.in_ch + c) * g.kh + p) * g.kw + q;
                                    let xi = ((bi * g.in_ch + c) * g.h + r) * g.w + col;
                                    if want_x {
                                        dx[xi] += go * wv[wi] as f64;
                                    }
                                    if want_w {
                                        dw[wi] += go * xv[xi] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
        if want_x {
            self.accumulate(x, cast(dx));
        }
        if want_w {
            self.accumulate(w, cast(dw));
        }
        if want_b {
            self.accumulate(b, cast(db));
        }
    }
}

/// Row-wise stable log-softmax over chunks of length `k`.
pub(crate) fn log_softmax_rows(v: &[f32], k: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(v.len());
    for row in v.chunks(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = if max.is_finite() {
            max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln()
        } else {
            max
        };
        out.extend(row.iter().map(|&x| (x as f64 - lse) as f32));
    }
    out
}
