use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Per-feature statistics measured on a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Exponential moving averages of batch statistics, used in eval mode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Mean 0, variance 1 for `features` channels.
    pub fn identity(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        if self.is_empty() {
            self.mean = batch.mean.clone();
            self.var = batch.var.clone();
            return;
        }
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with statistics of the current batch (all leading axes pooled).
    Train,
    Eval(&'a RunningStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatGlobal {
        x: Var,
        g: Var,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    /// Scalar computed outside the graph whose gradient w.r.t. `x` is already known.
    External {
        x: Var,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. Nodes are appended in creation order,
/// which is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `target.grad`.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => Err(Error::usage("no gradient recorded for this variable")),
        }
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], var: Var, len: usize) -> &'a mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.needs_grad(*v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
        name: &'static str,
    ) -> Result<Var> {
        check_finite(&data, name)?;
        Ok(self.push(Tensor::from_parts(shape, data), op, inputs))
    }

    /// Registers a leaf. It takes part in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        let requires_grad = value.requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.requires_grad = false;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `y[.., :] = x[.., :] . w + b` over every leading index of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() < 2 || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::dim("linear", &xs, &ws));
        }
        if bs != [ws[1]] {
            return Err(Error::dim("linear bias", &ws, &bs));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        gemm(
            MatRef::row_major(self.value(x).data(), rows, din),
            MatRef::row_major(self.value(w).data(), din, dout),
            0.0,
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(dout) {
            row.iter_mut().zip(bias).for_each(|(y, b)| *y += b);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push_checked(shape, out, Op::Linear { x, w, b }, &[x, w, b], "linear")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push_checked(shape, out, Op::Relu { x }, &[x], "relu")
    }

    /// Per-feature normalization over all leading axes (B*N samples for `[B,N,D]`).
    ///
    /// In train mode the measured batch statistics are returned so the caller
    /// can fold them into its running state.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if xs.len() < 2 {
            return Err(Error::dim("batchnorm", &xs, &[d]));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            let gs = self.shape(gamma).to_vec();
            return Err(Error::dim("batchnorm gamma/beta", &xs, &gs));
        }
        let (rows, _) = self.value(x).rows_cols();
        let data = self.value(x).data();

        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; d];
                for row in data.chunks_exact(d) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; d];
                for row in data.chunks_exact(d) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval(running) => {
                if running.is_empty() {
                    return Err(Error::usage(
                        "batchnorm in eval mode needs populated running statistics",
                    ));
                }
                if running.mean.len() != d || running.var.len() != d {
                    return Err(Error::dim("batchnorm running stats", &xs, &[running.mean.len()]));
                }
                (running.mean.clone(), running.var.clone(), None)
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for ((row, xh), o) in data
            .chunks_exact(d)
            .zip(xhat.chunks_exact_mut(d))
            .zip(out.chunks_exact_mut(d))
        {
            for j in 0..d {
                xh[j] = (row[j] - mean[j]) * inv_std[j];
                o[j] = g[j] * xh[j] + b[j];
            }
        }
        let train = stats.is_some();
        let var_out = self.push_checked(
            xs,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
            "batchnorm",
        )?;
        Ok((var_out, stats))
    }

    /// Max over the point axis of `[B,N,D]`. Ties go to the lowest point index.
    /// Returns the pooled `[B,D]` values and the winning point index per slot.
    pub fn max_pool_points(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::dim("max_pool_points", &xs, &[0, 0, 0]));
        }
        let (b, n, d) = (xs[0], xs[1], xs[2]);
        if n == 0 {
            return Err(Error::EmptyInput("max_pool_points"));
        }
        let data = self.value(x).data();
        let mut values = vec![f64::NEG_INFINITY; b * d];
        let mut argmax = vec![0usize; b * d];
        for bi in 0..b {
            let vals = &mut values[bi * d..(bi + 1) * d];
            let args = &mut argmax[bi * d..(bi + 1) * d];
            for ni in 0..n {
                let row = &data[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                for j in 0..d {
                    if row[j] > vals[j] {
                        vals[j] = row[j];
                        args[j] = ni;
                    }
                }
            }
        }
        let var = self.push_checked(
            vec![b, d],
            values,
            Op::MaxPool {
                x,
                argmax: argmax.clone(),
            },
            &[x],
            "max_pool_points",
        )?;
        Ok((var, argmax))
    }

    /// Appends the per-cloud global feature `g[b]` to every point row of `x[b]`.
    pub fn concat_global(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(g).to_vec();
        if xs.len() != 3 || gs.len() != 2 || xs[0] != gs[0] {
            return Err(Error::dim("concat_global", &xs, &gs));
        }
        let (b, n, d1, d2) = (xs[0], xs[1], xs[2], gs[1]);
        let xd = self.value(x).data();
        let gd = self.value(g).data();
        let mut out = Vec::with_capacity(b * n * (d1 + d2));
        for bi in 0..b {
            let gr = &gd[bi * d2..(bi + 1) * d2];
            for ni in 0..n {
                out.extend_from_slice(&xd[(bi * n + ni) * d1..(bi * n + ni + 1) * d1]);
                out.extend_from_slice(gr);
            }
        }
        self.push_checked(
            vec![b, n, d1 + d2],
            out,
            Op::ConcatGlobal { x, g },
            &[x, g],
            "concat_global",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push_checked(vec![1], vec![s], Op::Sum { x }, &[x], "sum")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked(shape, out, op(a, b), &[a, b], name)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push_checked(shape, out, Op::Scale { x, factor }, &[x], "scale")
    }

    /// Attaches a scalar computed outside the engine (e.g. a point-set metric)
    /// together with its gradient with respect to `x`.
    pub fn external_scalar(&mut self, x: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(x).len() {
            return Err(Error::dim("external_scalar", self.shape(x), &[local_grad.len()]));
        }
        check_finite(&local_grad, "external_scalar gradient")?;
        self.push_checked(
            vec![1],
            vec![value],
            Op::External { x, local_grad },
            &[x],
            "external_scalar",
        )
    }

    /// Discrete choices made by the non-smooth ops: ReLU input signs and
    /// max-pool winners, in node order. Two evaluations with equal patterns
    /// lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => out.extend(self.value(*x).data().iter().map(|v| usize::from(*v > 0.0))),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`. Every differentiable leaf gets a
    /// gradient (zeros when it does not influence the loss).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                grads[id].get_or_insert_with(|| vec![0.0; node.value.len()]);
            } else {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (din, dout) = {
                    let ws = self.shape(*w);
                    (ws[0], ws[1])
                };
                let rows = gout.len() / dout;
                let gmat = MatRef::row_major(gout, rows, dout);
                if self.needs_grad(*x) {
                    let gx = accumulate(grads, *x, rows * din);
                    let wm = MatRef::row_major(self.value(*w).data(), din, dout);
                    gemm(gmat, wm.t(), 1.0, gx);
                }
                if self.needs_grad(*w) {
                    let gw = accumulate(grads, *w, din * dout);
                    let xm = MatRef::row_major(self.value(*x).data(), rows, din);
                    gemm(xm.t(), gmat, 1.0, gw);
                }
                if self.needs_grad(*b) {
                    let gb = accumulate(grads, *b, dout);
                    for row in gout.chunks_exact(dout) {
                        gb.iter_mut().zip(row).for_each(|(g, r)| *g += r);
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs_grad(*x) {
                    let xd = self.value(*x).data();
                    let gx = accumulate(grads, *x, xd.len());
                    for ((g, v), go) in gx.iter_mut().zip(xd).zip(gout) {
                        if *v > 0.0 {
                            *g += go;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let d = inv_std.len();
                let rows = xhat.len() / d;
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for (go, xh) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        sum_g[j] += go[j];
                        sum_gx[j] += go[j] * xh[j];
                    }
                }
                if self.needs_grad(*x) {
                    let gam = self.value(*gamma).data().to_vec();
                    let gx = accumulate(grads, *x, xhat.len());
                    let r = rows as f64;
                    for ((gxr, go), xh) in gx
                        .chunks_exact_mut(d)
                        .zip(gout.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                    {
                        for j in 0..d {
                            let k = gam[j] * inv_std[j];
                            gxr[j] += if *train {
                                k * (go[j] - sum_g[j] / r - xh[j] * sum_gx[j] / r)
                            } else {
                                k * go[j]
                            };
                        }
                    }
                }
                if self.needs_grad(*gamma) {
                    let gg = accumulate(grads, *gamma, d);
                    gg.iter_mut().zip(&sum_gx).for_each(|(g, s)| *g += s);
                }
                if self.needs_grad(*beta) {
                    let gb = accumulate(grads, *beta, d);
                    gb.iter_mut().zip(&sum_g).for_each(|(g, s)| *g += s);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs_grad(*x) {
                    let xs = self.shape(*x);
                    let (n, d) = (xs[1], xs[2]);
                    let len = self.value(*x).len();
                    let gx = accumulate(grads, *x, len);
                    for (slot, (&ni, go)) in argmax.iter().zip(gout).enumerate() {
                        let (bi, j) = (slot / d, slot % d);
                        gx[(bi * n + ni) * d + j] += go;
                    }
                }
            }
            Op::ConcatGlobal { x, g } => {
                let xs = self.shape(*x);
                let (b, n, d1) = (xs[0], xs[1], xs[2]);
                let d2 = self.shape(*g)[1];
                let dw = d1 + d2;
                if self.needs_grad(*x) {
                    let gx = accumulate(grads, *x, b * n * d1);
                    for (gxr, go) in gx.chunks_exact_mut(d1).zip(gout.chunks_exact(dw)) {
                        gxr.iter_mut().zip(&go[..d1]).for_each(|(a, v)| *a += v);
                    }
                }
                if self.needs_grad(*g) {
                    let gg = accumulate(grads, *g, b * d2);
                    for (p, go) in gout.chunks_exact(dw).enumerate() {
                        let bi = p / n;
                        gg[bi * d2..(bi + 1) * d2]
                            .iter_mut()
                            .zip(&go[d1..])
                            .for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs_grad(*x) {
                    let gx = accumulate(grads, *x, gout.len());
                    gx.iter_mut().zip(gout).for_each(|(a, v)| *a += v);
                }
            }
            Op::Sum { x } => {
                if self.needs_grad(*x) {
                    let len = self.value(*x).len();
                    let gx = accumulate(grads, *x, len);
                    gx.iter_mut().for_each(|a| *a += gout[0]);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs_grad(*v) {
                        let gv = accumulate(grads, *v, gout.len());
                        gv.iter_mut().zip(gout).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.needs_grad(*v) {
                        let od = self.value(*other).data();
                        let gv = accumulate(grads, *v, gout.len());
                        for ((s, g), o) in gv.iter_mut().zip(gout).zip(od) {
                            *s += g * o;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs_grad(*x) {
                    let gx = accumulate(grads, *x, gout.len());
                    gx.iter_mut().zip(gout).for_each(|(s, g)| *s += g * factor);
                }
            }
            Op::External { x, local_grad } => {
                if self.needs_grad(*x) {
                    let gx = accumulate(grads, *x, local_grad.len());
                    gx.iter_mut()
                        .zip(local_grad)
                        .for_each(|(s, l)| *s += gout[0] * l);
                }
            }
        }
    }
}
