//! Eager reverse-mode autodiff tape.
//!
//! Operations append nodes to the tape in execution order, so the node list
//! is always topologically sorted and a single reverse sweep visits each
//! node exactly once. Gradients accumulate additively into `grad` buffers;
//! calling [`Tape::backward`] twice without resetting doubles them.
//!
//! Broadcasting is deliberately narrow: `add` accepts equal shapes, a
//! `[C]` bias against `[N, C]`, or a `[C]` bias against `[N, C, H, W]`.
//! Everything else is a dimension error.

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Probability floor used by cross-entropy before taking logs. Keeps
/// one-hot-sharp inputs from producing infinities.
pub const LOG_FLOOR: f64 = 1e-12;

const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E> {
    Leaf,
    Detach,
    Add { a: Var, b: Var, bcast: Bcast },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: E },
    Relu { x: Var },
    Matmul { a: Var, b: Var },
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    Reshape { x: Var },
    GlobalAvgPool { x: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, mean: Vec<E>, invstd: Vec<E> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<E>, invstd: Vec<E> },
    SoftmaxT { z: Var, tau: E },
    CrossEntropy { target: Var, model: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Bcast {
    None,
    /// rhs `[C]` added to every row of `[N, C]`.
    Rows,
    /// rhs `[C]` added per channel of `[N, C, H, W]`.
    Channels,
}

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// Ordered record of tensor operations with reverse-mode replay.
pub struct Tape<E: Float> {
    nodes: Vec<Node<E>>,
}

impl<E: Float> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Float> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Insert a leaf value. Gradients accumulate into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, if this node requires one and backward ran.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_from(&mut self, value: Tensor<E>, parents: &[Var], op: Op<E>) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, rg, op)
    }

    // ---- elementwise and shape ops ----

    /// Elementwise add with the documented bias broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let bcast = if sa == sb {
            Bcast::None
        } else if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            Bcast::Rows
        } else if sb.len() == 1 && sa.len() == 4 && sa[1] == sb[0] {
            Bcast::Channels
        } else {
            return Err(Error::dim(format!("add: unsupported shapes {sa:?} + {sb:?}")));
        };
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            match bcast {
                Bcast::None => ta.zip_map(tb, |x, y| x + y)?,
                Bcast::Rows => {
                    let cols = sa[1];
                    let mut data = ta.data().to_vec();
                    for (i, v) in data.iter_mut().enumerate() {
                        *v += tb.data()[i % cols];
                    }
                    Tensor::new(sa.clone(), data)?
                }
                Bcast::Channels => {
                    let (c, hw) = (sa[1], sa[2] * sa[3]);
                    let mut data = ta.data().to_vec();
                    for (i, v) in data.iter_mut().enumerate() {
                        *v += tb.data()[(i / hw) % c];
                    }
                    Tensor::new(sa.clone(), data)?
                }
            }
        };
        Ok(self.push_from(out, &[a, b], Op::Add { a, b, bcast }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_from(out, &[a, b], Op::Sub { a, b }))
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_from(out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push_from(out, &[x], Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN propagates rather than silently clamping to zero.
        let out = self.value(x).map(|v| {
            if v > E::ZERO || v.is_nan() {
                v
            } else {
                E::ZERO
            }
        });
        self.push_from(out, &[x], Op::Relu { x })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_from(out, &[x], Op::Reshape { x }))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, false, Op::Detach)
    }

    // ---- linear algebra ----

    /// `a[m,k] . b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!("matmul: expected 2-D operands, got {sa:?} x {sb:?}")));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul: inner dims disagree ({sa:?} x {sb:?})")));
        }
        let out = {
            let da = self.value(a).data();
            let db = self.value(b).data();
            let mut c = vec![E::ZERO; m * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = da[i * k + p];
                    let brow = &db[p * n..(p + 1) * n];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += aip * brow[j];
                    }
                }
            }
            Tensor::new(vec![m, n], c)?
        };
        Ok(self.push_from(out, &[a, b], Op::Matmul { a, b }))
    }

    /// Cross-correlation of `x[N,C,H,W]` with `k[F,C,Kh,Kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.value(x).shape(), self.value(k).shape());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::dim(format!("conv2d: expected 4-D operands, got {sx:?}, {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be >= 1".to_string()));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, ck, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if c != ck {
            return Err(Error::dim(format!(
                "conv2d: input has {c} channels but kernel expects {ck}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let out = {
            let dx = self.value(x).data();
            let dk = self.value(k).data();
            let mut y = vec![E::ZERO; n * f * oh * ow];
            for ni in 0..n {
                for fi in 0..f {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = E::ZERO;
                            for ci in 0..c {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = ((ni * c + ci) * h + iy as usize) * w;
                                    let krow = ((fi * c + ci) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += dx[xrow + ix as usize] * dk[krow + kx];
                                    }
                                }
                            }
                            y[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            Tensor::new(vec![n, f, oh, ow], y)?
        };
        Ok(self.push_from(out, &[x, k], Op::Conv2d { x, k, stride, pad }))
    }

    /// Mean over spatial dims: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool: expected 4-D input, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = E::from_f64(1.0 / hw as f64);
        let d = self.value(x).data();
        let mut out = vec![E::ZERO; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * hw;
            let mut acc = E::ZERO;
            for j in 0..hw {
                acc += d[base + j];
            }
            *o = acc * inv;
        }
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push_from(out, &[x], Op::GlobalAvgPool { x }))
    }

    // ---- normalization ----

    /// Batch norm over `[N,C,H,W]` using per-batch channel statistics.
    /// Returns the output plus the batch mean and (population) variance so
    /// the caller can maintain running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, Tensor<E>, Tensor<E>)> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("batch_norm: expected 4-D input, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        self.check_bn_affine(c, gamma, beta)?;
        let m = (n * hw) as f64;
        let d = self.value(x).data();
        let mut mean = vec![E::ZERO; c];
        let mut var = vec![E::ZERO; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for j in 0..hw {
                    acc += d[base + j].to_f64();
                }
            }
            let mu = acc / m;
            let mut vacc = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for j in 0..hw {
                    let dv = d[base + j].to_f64() - mu;
                    vacc += dv * dv;
                }
            }
            mean[ci] = E::from_f64(mu);
            var[ci] = E::from_f64(vacc / m);
        }
        let invstd: Vec<E> =
            var.iter().map(|v| E::from_f64(1.0 / (v.to_f64() + BN_EPS).sqrt())).collect();
        let out = self.bn_forward(x, gamma, beta, &mean, &invstd)?;
        let op = Op::BatchNormTrain { x, gamma, beta, mean: mean.clone(), invstd };
        let v = self.push_from(out, &[x, gamma, beta], op);
        Ok((v, Tensor::from_vec(mean), Tensor::from_vec(var)))
    }

    /// Batch norm using fixed running statistics (evaluation mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
    ) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("batch_norm: expected 4-D input, got {s:?}")));
        }
        let c = s[1];
        self.check_bn_affine(c, gamma, beta)?;
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(Error::dim("batch_norm: running stats length != channels".to_string()));
        }
        let mean = running_mean.data().to_vec();
        let invstd: Vec<E> = running_var
            .data()
            .iter()
            .map(|v| E::from_f64(1.0 / (v.to_f64() + BN_EPS).sqrt()))
            .collect();
        let out = self.bn_forward(x, gamma, beta, &mean, &invstd)?;
        let op = Op::BatchNormEval { x, gamma, beta, mean, invstd };
        Ok(self.push_from(out, &[x, gamma, beta], op))
    }

    fn check_bn_affine(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(v).shape();
            if s != [c] {
                return Err(Error::dim(format!(
                    "batch_norm: {name} has shape {s:?}, expected [{c}]"
                )));
            }
        }
        Ok(())
    }

    fn bn_forward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[E],
        invstd: &[E],
    ) -> Result<Tensor<E>> {
        let s = self.value(x).shape().to_vec();
        let (c, hw) = (s[1], s[2] * s[3]);
        let d = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut y = vec![E::ZERO; d.len()];
        for (i, out) in y.iter_mut().enumerate() {
            let ci = (i / hw) % c;
            *out = g[ci] * (d[i] - mean[ci]) * invstd[ci] + b[ci];
        }
        Tensor::new(s, y)
    }

    // ---- probability ops ----

    /// Temperature softmax over the last axis, computed with
    /// max-subtraction. `tau` must be positive.
    pub fn softmax_t(&mut self, z: Var, tau: E) -> Result<Var> {
        if !(tau > E::ZERO) {
            return Err(Error::domain(format!("softmax temperature must be > 0, got {tau}")));
        }
        let s = self.value(z).shape().to_vec();
        if s.is_empty() {
            return Err(Error::dim("softmax: scalar input has no class axis".to_string()));
        }
        let cols = *s.last().unwrap();
        let rows = self.value(z).numel() / cols;
        let d = self.value(z).data();
        let mut p = vec![E::ZERO; d.len()];
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let out = &mut p[r * cols..(r + 1) * cols];
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maxv(v);
            }
            let mut sum = E::ZERO;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = ((v - mx) / tau).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        }
        let out = Tensor::new(s, p)?;
        Ok(self.push_from(out, &[z], Op::SoftmaxT { z, tau }))
    }

    /// Row-wise cross-entropy `H(target, model) = -sum target*ln(model)`,
    /// with `model` clamped at [`LOG_FLOOR`] before the log. Both inputs
    /// must be valid distributions per row; `[N,C]` yields `[N]`, `[C]`
    /// yields a scalar.
    pub fn cross_entropy(&mut self, target: Var, model: Var) -> Result<Var> {
        let st = self.value(target).shape().to_vec();
        let sm = self.value(model).shape().to_vec();
        if st != sm {
            return Err(Error::dim(format!("cross_entropy: shapes {st:?} vs {sm:?}")));
        }
        if st.is_empty() || st.len() > 2 {
            return Err(Error::dim(format!("cross_entropy: expected [C] or [N,C], got {st:?}")));
        }
        let cols = *st.last().unwrap();
        let rows = self.value(model).numel() / cols;
        for (name, v) in [("target", target), ("model", model)] {
            validate_distribution_rows(self.value(v).data(), rows, cols, name)?;
        }
        let floor = E::from_f64(LOG_FLOOR);
        let dt = self.value(target).data();
        let dm = self.value(model).data();
        let mut h = vec![E::ZERO; rows];
        for (r, out) in h.iter_mut().enumerate() {
            let mut acc = E::ZERO;
            for i in r * cols..(r + 1) * cols {
                acc += dt[i] * dm[i].maxv(floor).ln();
            }
            *out = -acc;
        }
        let out_shape = if st.len() == 1 { Vec::new() } else { vec![rows] };
        let out = Tensor::new(out_shape, h)?;
        Ok(self.push_from(out, &[target, model], Op::CrossEntropy { target, model }))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = E::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push_from(Tensor::scalar(acc), &[x], Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let mut acc = E::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let mean = acc * E::from_f64(1.0 / n as f64);
        self.push_from(Tensor::scalar(mean), &[x], Op::MeanAll { x })
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`. Gradients are added into the
    /// `grad` buffer of every node with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut flow: Vec<Option<Tensor<E>>> = Vec::with_capacity(n);
        flow.resize_with(n, || None);
        flow[loss.0] = Some(Tensor::full(self.value(loss).shape(), E::ONE));

        for id in (0..=loss.0).rev() {
            let Some(gy) = flow[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            // Accumulate into the node's persistent grad buffer.
            match &mut self.nodes[id].grad {
                Some(g) => {
                    for (gv, &nv) in g.data_mut().iter_mut().zip(gy.data()) {
                        *gv += nv;
                    }
                }
                None => self.nodes[id].grad = Some(gy.clone()),
            }
            self.propagate(id, &gy, &mut flow)?;
        }
        Ok(())
    }

    /// Drop accumulated gradients (the tape itself is usually rebuilt per
    /// step, so this mostly serves tests).
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn propagate(&self, id: usize, gy: &Tensor<E>, flow: &mut [Option<Tensor<E>>]) -> Result<()> {
        let send = |flow: &mut [Option<Tensor<E>>], v: Var, contrib: Tensor<E>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut flow[v.0] {
                Some(acc) => {
                    for (a, &c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf | Op::Detach => {}
            Op::Add { a, b, bcast } => {
                send(flow, *a, gy.clone());
                match bcast {
                    Bcast::None => send(flow, *b, gy.clone()),
                    Bcast::Rows => {
                        let cols = self.value(*b).numel();
                        let mut gb = vec![E::ZERO; cols];
                        for (i, &v) in gy.data().iter().enumerate() {
                            gb[i % cols] += v;
                        }
                        send(flow, *b, Tensor::from_vec(gb));
                    }
                    Bcast::Channels => {
                        let s = self.value(*a).shape();
                        let (c, hw) = (s[1], s[2] * s[3]);
                        let mut gb = vec![E::ZERO; c];
                        for (i, &v) in gy.data().iter().enumerate() {
                            gb[(i / hw) % c] += v;
                        }
                        send(flow, *b, Tensor::from_vec(gb));
                    }
                }
            }
            Op::Sub { a, b } => {
                send(flow, *a, gy.clone());
                send(flow, *b, gy.map(|v| -v));
            }
            Op::Mul { a, b } => {
                send(flow, *a, gy.zip_map(self.value(*b), |g, bv| g * bv)?);
                send(flow, *b, gy.zip_map(self.value(*a), |g, av| g * av)?);
            }
            Op::Scale { x, c } => {
                let c = *c;
                send(flow, *x, gy.map(|g| g * c));
            }
            Op::Relu { x } => {
                send(flow, *x, gy.zip_map(self.value(*x), |g, xv| {
                    if xv > E::ZERO {
                        g
                    } else {
                        E::ZERO
                    }
                })?);
            }
            Op::Reshape { x } => {
                let orig = self.value(*x).shape().to_vec();
                send(flow, *x, gy.clone().reshaped(orig)?);
            }
            Op::Matmul { a, b } => {
                let sa = self.value(*a).shape();
                let (m, k) = (sa[0], sa[1]);
                let n = self.value(*b).shape()[1];
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let dg = gy.data();
                // dA = gY . B^T
                let mut ga = vec![E::ZERO; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &db[p * n..(p + 1) * n];
                        let grow = &dg[i * n..(i + 1) * n];
                        let mut acc = E::ZERO;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                send(flow, *a, Tensor::new(vec![m, k], ga)?);
                // dB = A^T . gY
                let mut gb = vec![E::ZERO; k * n];
                for i in 0..m {
                    let grow = &dg[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = da[i * k + p];
                        let brow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            brow[j] += aip * grow[j];
                        }
                    }
                }
                send(flow, *b, Tensor::new(vec![k, n], gb)?);
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let sx = self.value(*x).shape().to_vec();
                let sk = self.value(*k).shape().to_vec();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (f, kh, kw) = (sk[0], sk[2], sk[3]);
                let so = gy.shape();
                let (oh, ow) = (so[2], so[3]);
                let dx = self.value(*x).data();
                let dk = self.value(*k).data();
                let dg = gy.data();
                let mut gx = vec![E::ZERO; dx.len()];
                let mut gk = vec![E::ZERO; dk.len()];
                for ni in 0..n {
                    for fi in 0..f {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = dg[((ni * f + fi) * oh + oy) * ow + ox];
                                for ci in 0..c {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow = ((ni * c + ci) * h + iy as usize) * w;
                                        let krow = ((fi * c + ci) * kh + ky) * kw;
                                        for kx in 0..kw {
                                            let ix =
                                                (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            gx[xrow + ix as usize] += g * dk[krow + kx];
                                            gk[krow + kx] += g * dx[xrow + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                send(flow, *x, Tensor::new(sx, gx)?);
                send(flow, *k, Tensor::new(sk, gk)?);
            }
            Op::GlobalAvgPool { x } => {
                let s = self.value(*x).shape().to_vec();
                let hw = s[2] * s[3];
                let inv = E::from_f64(1.0 / hw as f64);
                let mut gx = vec![E::ZERO; self.value(*x).numel()];
                for (i, g) in gx.iter_mut().enumerate() {
                    *g = gy.data()[i / hw] * inv;
                }
                send(flow, *x, Tensor::new(s, gx)?);
            }
            Op::BatchNormTrain { x, gamma, beta, mean, invstd } => {
                let s = self.value(*x).shape().to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let m = (n * hw) as f64;
                let d = self.value(*x).data();
                let g = self.value(*gamma).data();
                let dg = gy.data();
                let mut sum_g = vec![E::ZERO; c];
                let mut sum_gx = vec![E::ZERO; c];
                for i in 0..dg.len() {
                    let ci = (i / hw) % c;
                    let xhat = (d[i] - mean[ci]) * invstd[ci];
                    sum_g[ci] += dg[i];
                    sum_gx[ci] += dg[i] * xhat;
                }
                let inv_m = E::from_f64(1.0 / m);
                let mut gx = vec![E::ZERO; d.len()];
                for i in 0..dg.len() {
                    let ci = (i / hw) % c;
                    let xhat = (d[i] - mean[ci]) * invstd[ci];
                    gx[i] = g[ci]
                        * invstd[ci]
                        * (dg[i] - sum_g[ci] * inv_m - xhat * sum_gx[ci] * inv_m);
                }
                send(flow, *x, Tensor::new(s, gx)?);
                send(flow, *gamma, Tensor::from_vec(sum_gx));
                send(flow, *beta, Tensor::from_vec(sum_g));
            }
            Op::BatchNormEval { x, gamma, beta, mean, invstd } => {
                let s = self.value(*x).shape().to_vec();
                let (c, hw) = (s[1], s[2] * s[3]);
                let d = self.value(*x).data();
                let g = self.value(*gamma).data();
                let dg = gy.data();
                let mut gx = vec![E::ZERO; d.len()];
                let mut sum_g = vec![E::ZERO; c];
                let mut sum_gx = vec![E::ZERO; c];
                for i in 0..dg.len() {
                    let ci = (i / hw) % c;
                    gx[i] = dg[i] * g[ci] * invstd[ci];
                    sum_g[ci] += dg[i];
                    sum_gx[ci] += dg[i] * (d[i] - mean[ci]) * invstd[ci];
                }
                send(flow, *x, Tensor::new(s, gx)?);
                send(flow, *gamma, Tensor::from_vec(sum_gx));
                send(flow, *beta, Tensor::from_vec(sum_g));
            }
            Op::SoftmaxT { z, tau } => {
                let p = self.nodes[id].value.data();
                let cols = *self.nodes[id].value.shape().last().unwrap();
                let rows = p.len() / cols;
                let inv_tau = E::ONE / *tau;
                let mut gz = vec![E::ZERO; p.len()];
                for r in 0..rows {
                    let pr = &p[r * cols..(r + 1) * cols];
                    let gr = &gy.data()[r * cols..(r + 1) * cols];
                    let mut dot = E::ZERO;
                    for j in 0..cols {
                        dot += gr[j] * pr[j];
                    }
                    let out = &mut gz[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        out[j] = pr[j] * (gr[j] - dot) * inv_tau;
                    }
                }
                send(flow, *z, Tensor::new(self.value(*z).shape().to_vec(), gz)?);
            }
            Op::CrossEntropy { target, model } => {
                let st = self.value(*target).shape().to_vec();
                let cols = *st.last().unwrap();
                let rows = self.value(*model).numel() / cols;
                let floor = E::from_f64(LOG_FLOOR);
                let dt = self.value(*target).data();
                let dm = self.value(*model).data();
                let mut gm = vec![E::ZERO; dm.len()];
                let mut gt = vec![E::ZERO; dt.len()];
                for r in 0..rows {
                    let gr = gy.data()[r];
                    for i in r * cols..(r + 1) * cols {
                        // Inside the clamp region the log is constant.
                        if dm[i] > floor {
                            gm[i] = -gr * dt[i] / dm[i];
                        }
                        gt[i] = -gr * dm[i].maxv(floor).ln();
                    }
                }
                send(flow, *model, Tensor::new(sm_shape(&st), gm)?);
                send(flow, *target, Tensor::new(sm_shape(&st), gt)?);
            }
            Op::SumAll { x } => {
                let g = gy.item();
                send(flow, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel().max(1);
                let g = gy.item() * E::from_f64(1.0 / n as f64);
                send(flow, *x, Tensor::full(self.value(*x).shape(), g));
            }
        }
        Ok(())
    }
}

fn sm_shape(shape: &[usize]) -> Vec<usize> {
    shape.to_vec()
}

fn validate_distribution_rows<E: Float>(
    data: &[E],
    rows: usize,
    cols: usize,
    name: &str,
) -> Result<()> {
    for r in 0..rows {
        let mut sum = 0.0;
        for &v in &data[r * cols..(r + 1) * cols] {
            let v = v.to_f64();
            if v < 0.0 {
                return Err(Error::domain(format!(
                    "cross_entropy: {name} row {r} has negative entry {v}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::domain(format!(
                "cross_entropy: {name} row {r} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}
