//! Test-side oracles: an independent f64 interpreter for the engine's op
//! set, a random graph generator and a finite-difference gradient check.
#![allow(dead_code)]

use fairbat::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub enum ROp {
    Leaf(usize),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f32),
    AddScalar(usize, f32),
    Relu(usize),
    Conv2d { x: usize, w: usize, b: usize, pad: usize },
    MaxPool(usize, usize),
    Flatten(usize),
    LogSoftmax(usize),
    Softmax(usize),
    Log(usize),
    LogClamped(usize, f32),
    Sum(usize),
    Mean(usize),
    Gather(usize, Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct RefGraph {
    /// Leaf values, already rounded to f32.
    pub leaves: Vec<(Vec<usize>, Vec<f32>)>,
    pub ops: Vec<ROp>,
    pub shapes: Vec<Vec<usize>>,
}

/// Kink pattern of one evaluation: relu signs, pooling winners and clamp
/// activity. Finite differences are only trusted where it does not change.
type Pattern = Vec<usize>;

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

impl RefGraph {
    pub fn output(&self) -> usize {
        self.ops.len() - 1
    }

    fn leaf(&mut self, shape: Vec<usize>, rng: &mut ChaCha8Rng, scale: f32) -> usize {
        let data = (0..numel(&shape)).map(|_| rng.random_range(-scale..scale)).collect();
        self.leaves.push((shape.clone(), data));
        self.push(ROp::Leaf(self.leaves.len() - 1), shape)
    }

    fn push(&mut self, op: ROp, shape: Vec<usize>) -> usize {
        self.ops.push(op);
        self.shapes.push(shape);
        self.ops.len() - 1
    }

    /// Reference forward pass in f64.
    pub fn eval(&self, leaves: &[Vec<f64>]) -> (Vec<Vec<f64>>, Pattern) {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.ops.len());
        let mut pat = Vec::new();
        for (id, op) in self.ops.iter().enumerate() {
            let shape = &self.shapes[id];
            let v = match op {
                ROp::Leaf(i) => leaves[*i].clone(),
                ROp::MatMul(a, b) => {
                    let (m, k) = (self.shapes[*a][0], self.shapes[*a][1]);
                    let n = self.shapes[*b][1];
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            out[i * n + j] = (0..k).map(|p| vals[*a][i * k + p] * vals[*b][p * n + j]).sum();
                        }
                    }
                    out
                }
                ROp::Add(a, b) => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x + y).collect(),
                ROp::Sub(a, b) => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x - y).collect(),
                ROp::Mul(a, b) => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x * y).collect(),
                ROp::AddRow(a, b) => {
                    let n = vals[*b].len();
                    vals[*a].iter().enumerate().map(|(i, x)| x + vals[*b][i % n]).collect()
                }
                ROp::Scale(a, s) => vals[*a].iter().map(|x| x * *s as f64).collect(),
                ROp::AddScalar(a, c) => vals[*a].iter().map(|x| x + *c as f64).collect(),
                ROp::Relu(a) => vals[*a]
                    .iter()
                    .map(|&x| {
                        pat.push(usize::from(x > 0.0));
                        x.max(0.0)
                    })
                    .collect(),
                ROp::Conv2d { x, w, b, pad } => {
                    let (sx, sw) = (&self.shapes[*x], &self.shapes[*w]);
                    let (bn, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                    let (o, kh, kw) = (sw[0], sw[2], sw[3]);
                    let (oh, ow) = (shape[2], shape[3]);
                    let mut out = vec![0.0; bn * o * oh * ow];
                    for bi in 0..bn {
                        for oc in 0..o {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let mut s = vals[*b][oc];
                                    for ci in 0..c {
                                        for p in 0..kh {
                                            for q in 0..kw {
                                                let r = i as isize + p as isize - *pad as isize;
                                                let cc = j as isize + q as isize - *pad as isize;
                                                if r < 0 || cc < 0 || r >= h as isize || cc >= wd as isize {
                                                    continue;
                                                }
                                                let xi = ((bi * c + ci) * h + r as usize) * wd + cc as usize;
                                                let wi = ((oc * c + ci) * kh + p) * kw + q;
                                                s += vals[*w][wi] * vals[*x][xi];
                                            }
                                        }
                                    }
                                    out[((bi * o + oc) * oh + i) * ow + j] = s;
                                }
                            }
                        }
                    }
                    out
                }
                ROp::MaxPool(x, k) => {
                    let s = &self.shapes[*x];
                    let (oh, ow) = (shape[2], shape[3]);
                    let mut out = Vec::new();
                    for plane in 0..s[0] * s[1] {
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut best = (f64::NEG_INFINITY, 0);
                                for p in 0..*k {
                                    for q in 0..*k {
                                        let idx = plane * s[2] * s[3] + (i * k + p) * s[3] + j * k + q;
                                        if vals[*x][idx] > best.0 {
                                            best = (vals[*x][idx], idx);
                                        }
                                    }
                                }
                                pat.push(best.1);
                                out.push(best.0);
                            }
                        }
                    }
                    out
                }
                ROp::Flatten(a) => vals[*a].clone(),
                ROp::LogSoftmax(a) | ROp::Softmax(a) => {
                    let k = *self.shapes[*a].last().unwrap();
                    let mut out = Vec::new();
                    for row in vals[*a].chunks(k) {
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                        for x in row {
                            out.push(if matches!(op, ROp::Softmax(_)) { (x - lse).exp() } else { x - lse });
                        }
                    }
                    out
                }
                ROp::Log(a) => vals[*a].iter().map(|x| x.ln()).collect(),
                ROp::LogClamped(a, f) => vals[*a]
                    .iter()
                    .map(|&x| {
                        let f = *f as f64;
                        pat.push(usize::from(x > f));
                        x.max(f).ln()
                    })
                    .collect(),
                ROp::Sum(a) => vec![vals[*a].iter().sum()],
                ROp::Mean(a) => vec![vals[*a].iter().sum::<f64>() / vals[*a].len() as f64],
                ROp::Gather(a, idx) => {
                    let k = self.shapes[*a][1];
                    idx.iter().enumerate().map(|(i, &j)| vals[*a][i * k + j]).collect()
                }
            };
            debug_assert_eq!(v.len(), numel(shape));
            vals.push(v);
        }
        (vals, pat)
    }

    pub fn leaf_values_f64(&self) -> Vec<Vec<f64>> {
        self.leaves.iter().map(|(_, d)| d.iter().map(|&x| x as f64).collect()).collect()
    }

    /// Rebuilds the graph in the engine. Returns the leaf variables and
    /// every node's variable.
    pub fn build(&self, g: &mut Graph) -> (Vec<Var>, Vec<Var>) {
        let mut leaves = Vec::new();
        let mut vars: Vec<Var> = Vec::new();
        for op in &self.ops {
            let v = match op {
                ROp::Leaf(i) => {
                    let (s, d) = &self.leaves[*i];
                    let v = g.variable(&Tensor::new(s.clone(), d.clone()).unwrap());
                    leaves.push(v);
                    v
                }
                ROp::MatMul(a, b) => g.matmul(vars[*a], vars[*b]).unwrap(),
                ROp::Add(a, b) => g.add(vars[*a], vars[*b]).unwrap(),
                ROp::Sub(a, b) => g.sub(vars[*a], vars[*b]).unwrap(),
                ROp::Mul(a, b) => g.mul(vars[*a], vars[*b]).unwrap(),
                ROp::AddRow(a, b) => g.add_row(vars[*a], vars[*b]).unwrap(),
                ROp::Scale(a, s) => g.scale(vars[*a], *s),
                ROp::AddScalar(a, c) => g.add_scalar(vars[*a], *c),
                ROp::Relu(a) => g.relu(vars[*a]),
                ROp::Conv2d { x, w, b, pad } => g.conv2d(vars[*x], vars[*w], vars[*b], *pad).unwrap(),
                ROp::MaxPool(x, k) => g.max_pool2d(vars[*x], *k).unwrap(),
                ROp::Flatten(a) => g.flatten(vars[*a]).unwrap(),
                ROp::LogSoftmax(a) => g.log_softmax(vars[*a]).unwrap(),
                ROp::Softmax(a) => g.softmax(vars[*a]).unwrap(),
                ROp::Log(a) => g.log(vars[*a]).unwrap(),
                ROp::LogClamped(a, f) => g.log_clamped(vars[*a], *f).unwrap(),
                ROp::Sum(a) => g.sum(vars[*a]),
                ROp::Mean(a) => g.mean(vars[*a]),
                ROp::Gather(a, idx) => g.gather(vars[*a], idx).unwrap(),
            };
            vars.push(v);
        }
        (leaves, vars)
    }

    pub fn describe(&self) -> String {
        self.ops
            .iter()
            .zip(&self.shapes)
            .map(|(o, s)| format!("{o:?}:{s:?}"))
            .collect::<Vec<_>>()
            .join(" -> ")
    }
}

fn pick(rng: &mut ChaCha8Rng, pool: &[usize]) -> usize {
    pool[rng.random_range(0..pool.len())]
}

/// Random composition of dense ops on `[batch, width]` tensors, or a
/// convolutional stem followed by dense ops, reduced to a scalar.
pub fn random_graph(seed: u64) -> RefGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = RefGraph {
        leaves: vec![],
        ops: vec![],
        shapes: vec![],
    };
    let batch = rng.random_range(1..=3);
    let mut pool: Vec<usize> = Vec::new();

    if rng.random_bool(0.3) {
        let c = rng.random_range(1..=2);
        let hw = rng.random_range(4..=6);
        let x = g.leaf(vec![batch, c, hw, hw], &mut rng, 1.0);
        let o = rng.random_range(1..=3);
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let pad = if k == 3 && rng.random_bool(0.5) { 1 } else { 0 };
        let w = g.leaf(vec![o, c, k, k], &mut rng, 0.8);
        let b = g.leaf(vec![o], &mut rng, 0.5);
        let oh = hw + 2 * pad - k + 1;
        let mut h = g.push(ROp::Conv2d { x, w, b, pad }, vec![batch, o, oh, oh]);
        if rng.random_bool(0.7) {
            h = g.push(ROp::Relu(h), vec![batch, o, oh, oh]);
        }
        let mut side = oh;
        if rng.random_bool(0.7) {
            side = oh / 2;
            h = g.push(ROp::MaxPool(h, 2), vec![batch, o, side, side]);
        }
        let flat = o * side * side;
        h = g.push(ROp::Flatten(h), vec![batch, flat]);
        pool.push(h);
    } else {
        let w = rng.random_range(2..=5);
        pool.push(g.leaf(vec![batch, w], &mut rng, 1.0));
    }

    let steps = rng.random_range(2..=7);
    for _ in 0..steps {
        let a = pick(&mut rng, &pool);
        let s = g.shapes[a].clone();
        let id = match rng.random_range(0..10) {
            0 | 1 => {
                let m = rng.random_range(2..=5);
                let w = g.leaf(vec![s[1], m], &mut rng, 0.8);
                g.push(ROp::MatMul(a, w), vec![s[0], m])
            }
            2 => {
                let b = g.leaf(vec![s[1]], &mut rng, 0.5);
                g.push(ROp::AddRow(a, b), s)
            }
            3 => g.push(ROp::Relu(a), s),
            4 => {
                let same: Vec<usize> = pool.iter().copied().filter(|&p| g.shapes[p] == s).collect();
                let b = if same.len() > 1 && rng.random_bool(0.5) {
                    pick(&mut rng, &same)
                } else {
                    g.leaf(s.clone(), &mut rng, 1.0)
                };
                match rng.random_range(0..3) {
                    0 => g.push(ROp::Add(a, b), s),
                    1 => g.push(ROp::Sub(a, b), s),
                    _ => g.push(ROp::Mul(a, b), s),
                }
            }
            5 => {
                if rng.random_bool(0.5) {
                    g.push(ROp::Scale(a, rng.random_range(-1.5..1.5)), s)
                } else {
                    g.push(ROp::AddScalar(a, rng.random_range(-1.0..1.0)), s)
                }
            }
            6 => g.push(ROp::LogSoftmax(a), s),
            7 => g.push(ROp::Softmax(a), s),
            _ => {
                let p = g.push(ROp::Softmax(a), s.clone());
                if rng.random_bool(0.5) {
                    g.push(ROp::Log(p), s)
                } else {
                    g.push(ROp::LogClamped(p, 1e-12), s)
                }
            }
        };
        pool.push(id);
    }

    let last = *pool.last().unwrap();
    let s = g.shapes[last].clone();
    let head = if rng.random_bool(0.4) {
        let ls = g.push(ROp::LogSoftmax(last), s.clone());
        let idx: Vec<usize> = (0..s[0]).map(|_| rng.random_range(0..s[1])).collect();
        let picked = g.push(ROp::Gather(ls, idx), vec![s[0]]);
        let total = g.push(ROp::Sum(picked), vec![1]);
        g.push(ROp::Scale(total, -1.0 / s[0] as f32), vec![1])
    } else if rng.random_bool(0.5) {
        g.push(ROp::Sum(last), vec![1])
    } else {
        g.push(ROp::Mean(last), vec![1])
    };
    if pool.len() > 2 && rng.random_bool(0.5) {
        let other = pick(&mut rng, &pool[..pool.len() - 1]);
        let m = g.push(ROp::Mean(other), vec![1]);
        g.push(ROp::Add(head, m), vec![1]);
    }
    g
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-6;
pub const REL_FLOOR: f64 = 1e-2;

/// Compares engine gradients for every leaf coordinate against central
/// differences of the f64 reference. Coordinates whose perturbation moves
/// across a relu kink, pooling tie or clamp boundary are skipped.
pub fn check_gradients(rg: &RefGraph) -> GradCheck {
    let mut g = Graph::new();
    let (leaves, vars) = rg.build(&mut g);
    let out = vars[rg.output()];
    g.backward(out).unwrap();
    let base = rg.leaf_values_f64();
    let (_, base_pat) = rg.eval(&base);
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for (li, &lv) in leaves.iter().enumerate() {
        let analytic = g.grad(lv).unwrap().to_vec();
        for j in 0..base[li].len() {
            let mut plus = base.clone();
            plus[li][j] += FD_STEP;
            let mut minus = base.clone();
            minus[li][j] -= FD_STEP;
            let (vp, pp) = rg.eval(&plus);
            let (vm, pm) = rg.eval(&minus);
            if pp != base_pat || pm != base_pat {
                skipped += 1;
                continue;
            }
            let fd = (vp[rg.output()][0] - vm[rg.output()][0]) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j] as f64, fd, REL_FLOOR));
            checked += 1;
        }
    }
    GradCheck {
        max_rel_err: worst,
        checked,
        skipped,
    }
}
