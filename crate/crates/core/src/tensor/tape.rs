use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::conv::{self, ConvGeom};
use super::kernels::{axpy, dot, gemm_acc};
use super::Tensor;
use crate::error::{param_err, shape_err, validation_err, Error, Result};

/// Probabilities below this are clamped before taking the log in the
/// cross-entropy loss.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: usize, weight: usize, bias: usize, geom: ConvGeom },
    MaxPool { input: usize, argmax: Vec<usize> },
    AvgPool { input: usize, k: usize, stride: usize },
    Relu { input: usize },
    Linear { input: usize, weight: usize, bias: usize },
    Concat { a: usize, b: usize, outer: usize, a_inner: usize, b_inner: usize },
    GlobalAvgPool { input: usize },
    Softmax { input: usize },
    Dropout { input: usize, mask: Vec<f64> },
    Cce { probs: usize, labels: Vec<f64> },
    SoftmaxCce { logits: usize, labels: Vec<f64>, probs: Vec<f64> },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { input: usize, factor: f64 },
    Sum { input: usize },
    ColumnSum { input: usize, column: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Records a forward computation in topological order so it can be
/// differentiated in one reverse sweep.
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

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.index(v).expect("var belongs to another tape")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.index(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Gradient written by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.index(v).ok().and_then(|i| self.nodes[i].grad.as_ref())
    }

    /// Like [`Tape::grad`] but yields zeros for values the loss never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(v).shape()),
        }
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::State(format!("variable {} is not recorded on this tape", v.index)));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var { tape: self.id, index }
    }

    fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    fn any_grad(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ----- ops ---------------------------------------------------------

    /// 2-D cross-correlation of `[N,C,H,W]` input with `[K,C,kh,kw]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, wi, bi) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let xs = self.node(xi).value.shape();
        let ws = self.node(wi).value.shape();
        let bs = self.node(bi).value.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err!("conv2d expects rank-4 input and weight, got {:?} and {:?}", xs, ws));
        }
        if stride < 1 {
            return Err(param_err!("conv2d stride must be >= 1"));
        }
        if xs[1] != ws[1] {
            return Err(shape_err!("conv2d input has {} channels but weight expects {}", xs[1], ws[1]));
        }
        if bs != [ws[0]] {
            return Err(shape_err!("conv2d bias {:?} does not match {} filters", bs, ws[0]));
        }
        let (h, w) = (xs[2], xs[3]);
        let (kh, kw) = (ws[2], ws[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(shape_err!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w,
            k: ws[0],
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let out = conv::forward(
            &geom,
            self.node(xi).value.data(),
            self.node(wi).value.data(),
            self.node(bi).value.data(),
        );
        let value = Tensor::new(vec![geom.n, geom.k, geom.oh, geom.ow], out)?;
        let rg = self.any_grad(&[xi, wi, bi]);
        Ok(self.push(value, rg, Op::Conv2d { input: xi, weight: wi, bias: bi, geom }))
    }

    fn pool_geometry(&self, xi: usize, k: usize, stride: usize) -> Result<[usize; 6]> {
        if k < 1 || stride < 1 {
            return Err(param_err!("pool window and stride must be >= 1 (got {k}, {stride})"));
        }
        let s = self.node(xi).value.shape();
        if s.len() != 4 {
            return Err(shape_err!("pooling expects [N,C,H,W], got {:?}", s));
        }
        if k > s[2] || k > s[3] {
            return Err(param_err!("pool window {k} exceeds map {}x{}", s[2], s[3]));
        }
        let oh = (s[2] - k) / stride + 1;
        let ow = (s[3] - k) / stride + 1;
        Ok([s[0], s[1], s[2], s[3], oh, ow])
    }

    /// Windowed maximum; the backward pass routes to the first maximal element.
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let xi = self.index(input)?;
        let [n, c, h, w, oh, ow] = self.pool_geometry(xi, k, stride)?;
        let x = self.node(xi).value.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.any_grad(&[xi]);
        Ok(self.push(value, rg, Op::MaxPool { input: xi, argmax }))
    }

    pub fn avg_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let xi = self.index(input)?;
        let [n, c, h, w, oh, ow] = self.pool_geometry(xi, k, stride)?;
        let x = self.node(xi).value.data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        let row = base + (oy * stride + dy) * w + ox * stride;
                        s += x[row..row + k].iter().sum::<f64>();
                    }
                    out.push(s * inv);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.any_grad(&[xi]);
        Ok(self.push(value, rg, Op::AvgPool { input: xi, k, stride }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let value = self.node(xi).value.map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[xi]);
        Ok(self.push(value, rg, Op::Relu { input: xi }))
    }

    /// `input[N,D] · weight[M,D]ᵀ + bias[M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let (xs, ws, bs) =
            (self.node(xi).value.shape(), self.node(wi).value.shape(), self.node(bi).value.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(shape_err!(
                "linear: input {:?}, weight {:?}, bias {:?} are incompatible",
                xs,
                ws,
                bs
            ));
        }
        let (n, d, m) = (xs[0], xs[1], ws[0]);
        let x = self.node(xi).value.data();
        let wt = self.node(wi).value.data();
        let b = self.node(bi).value.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xr = &x[i * d..(i + 1) * d];
            for j in 0..m {
                out[i * m + j] = dot(xr, &wt[j * d..(j + 1) * d]) + b[j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.any_grad(&[xi, wi, bi]);
        Ok(self.push(value, rg, Op::Linear { input: xi, weight: wi, bias: bi }))
    }

    /// Concatenates along the channel axis: axis 1 for `[N,C,H,W]` maps, the
    /// last axis for every other rank.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let sa = self.node(ai).value.shape().to_vec();
        let sb = self.node(bi).value.shape().to_vec();
        if sa.len() != sb.len() || sa.is_empty() {
            return Err(shape_err!("concat: ranks differ ({:?} vs {:?})", sa, sb));
        }
        let axis = if sa.len() == 4 { 1 } else { sa.len() - 1 };
        for (d, (x, y)) in sa.iter().zip(&sb).enumerate() {
            if d != axis && x != y {
                return Err(shape_err!("concat: shapes {:?} and {:?} differ off-axis", sa, sb));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let trailing: usize = sa[axis + 1..].iter().product();
        let a_inner = sa[axis] * trailing;
        let b_inner = sb[axis] * trailing;
        let (da, db) = (self.node(ai).value.data(), self.node(bi).value.data());
        let mut out = Vec::with_capacity(outer * (a_inner + b_inner));
        for o in 0..outer {
            out.extend_from_slice(&da[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&db[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[ai, bi]);
        Ok(self.push(value, rg, Op::Concat { a: ai, b: bi, outer, a_inner, b_inner }))
    }

    /// Per-channel spatial mean, `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let s = self.node(xi).value.shape();
        if s.len() != 4 {
            return Err(shape_err!("global_avg_pool expects [N,C,H,W], got {:?}", s));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if hw == 0 {
            return Err(param_err!("global_avg_pool over an empty spatial map"));
        }
        let inv = 1.0 / hw as f64;
        let out: Vec<f64> =
            self.node(xi).value.data().chunks(hw).map(|plane| plane.iter().sum::<f64>() * inv).collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.any_grad(&[xi]);
        Ok(self.push(value, rg, Op::GlobalAvgPool { input: xi }))
    }

    /// Row-wise softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let xi = self.index(logits)?;
        let value = softmax_rows(&self.node(xi).value)?;
        let rg = self.any_grad(&[xi]);
        Ok(self.push(value, rg, Op::Softmax { input: xi }))
    }

    /// Inverted dropout. `rng == None` means evaluation mode, which is the
    /// identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        let xi = self.index(input)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(param_err!("dropout rate must lie in [0, 1), got {rate}"));
        }
        let Some(rng) = rng else {
            return Ok(input);
        };
        if rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = &self.node(xi).value;
        let mask: Vec<f64> =
            (0..x.numel()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let out: Vec<f64> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[xi]);
        Ok(self.push(value, rg, Op::Dropout { input: xi, mask }))
    }

    /// Mean categorical cross-entropy of probability rows against one-hot
    /// labels, with `log` clamped at [`LOG_PROB_FLOOR`].
    pub fn cce_loss(&mut self, probs: Var, labels: &Tensor) -> Result<Var> {
        let pi = self.index(probs)?;
        let p = &self.node(pi).value;
        check_one_hot(p, labels)?;
        let loss = cce_value(p.data(), labels.data(), rows_of(p));
        let rg = self.any_grad(&[pi]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::Cce { probs: pi, labels: labels.data().to_vec() }))
    }

    /// Softmax followed by [`Tape::cce_loss`], with the fused `(ŷ − y)/N`
    /// gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let xi = self.index(logits)?;
        let probs = softmax_rows(&self.node(xi).value)?;
        check_one_hot(&probs, labels)?;
        let loss = cce_value(probs.data(), labels.data(), rows_of(&probs));
        let rg = self.any_grad(&[xi]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCce { logits: xi, labels: labels.data().to_vec(), probs: probs.into_data() },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape(a, b, "add")?;
        let out: Vec<f64> =
            self.node(ai).value.data().iter().zip(self.node(bi).value.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.node(ai).value.shape().to_vec(), out)?;
        let rg = self.any_grad(&[ai, bi]);
        Ok(self.push(value, rg, Op::Add { a: ai, b: bi }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape(a, b, "mul")?;
        let out: Vec<f64> =
            self.node(ai).value.data().iter().zip(self.node(bi).value.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.node(ai).value.shape().to_vec(), out)?;
        let rg = self.any_grad(&[ai, bi]);
        Ok(self.push(value, rg, Op::Mul { a: ai, b: bi }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let xi = self.index(input)?;
        let value = self.node(xi).value.map(|v| v * factor);
        let rg = self.any_grad(&[xi]);
        Ok(self.push(value, rg, Op::Scale { input: xi, factor }))
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let s = self.node(xi).value.sum();
        let rg = self.any_grad(&[xi]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { input: xi }))
    }

    /// Sum over rows of column `column` of a `[N,C]` tensor.
    pub fn column_sum(&mut self, input: Var, column: usize) -> Result<Var> {
        let xi = self.index(input)?;
        let s = self.node(xi).value.shape();
        if s.len() != 2 {
            return Err(shape_err!("column_sum expects [N,C], got {:?}", s));
        }
        if column >= s[1] {
            return Err(param_err!("column {column} out of range for {} columns", s[1]));
        }
        let c = s[1];
        let total: f64 = self.node(xi).value.data().chunks(c).map(|row| row[column]).sum();
        let rg = self.any_grad(&[xi]);
        Ok(self.push(Tensor::scalar(total), rg, Op::ColumnSum { input: xi, column }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        if self.node(ai).value.shape() != self.node(bi).value.shape() {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.node(ai).value.shape(),
                self.node(bi).value.shape()
            ));
        }
        Ok((ai, bi))
    }

    // ----- reverse sweep -----------------------------------------------

    /// Differentiates the one-element `loss` with respect to every recorded
    /// value that requires a gradient. Previous gradients are discarded, so
    /// repeated calls give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a one-element loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[li].requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad {
                    let shape = self.nodes[i].value.shape().to_vec();
                    self.nodes[i].grad = Some(Tensor::new(shape, g)?);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |j: usize| self.nodes[j].requires_grad;
        let value = |j: usize| self.nodes[j].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let r = conv::backward(geom, value(*input), value(*weight), g, wants(*input));
                if let Some(dx) = r.input {
                    accumulate(grads, *input, dx);
                }
                if wants(*weight) {
                    accumulate(grads, *weight, r.weight);
                }
                if wants(*bias) {
                    accumulate(grads, *bias, r.bias);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                accumulate(grads, *input, dx);
            }
            Op::AvgPool { input, k, stride } => {
                let s = self.nodes[*input].value.shape();
                let (h, w) = (s[2], s[3]);
                let out_s = self.nodes[i].value.shape();
                let (oh, ow) = (out_s[2], out_s[3]);
                let inv = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; value(*input).len()];
                for plane in 0..s[0] * s[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(plane * oh + oy) * ow + ox] * inv;
                            for dy in 0..*k {
                                let row = plane * h * w + (oy * stride + dy) * w + ox * stride;
                                for d in &mut dx[row..row + k] {
                                    *d += gv;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::Relu { input } => {
                let dx =
                    value(*input).iter().zip(g).map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 }).collect();
                accumulate(grads, *input, dx);
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.nodes[*input].value.shape();
                let (n, d) = (xs[0], xs[1]);
                let m = self.nodes[*weight].value.shape()[0];
                if wants(*input) {
                    let mut dx = vec![0.0; n * d];
                    gemm_acc(g, value(*weight), &mut dx, n, m, d);
                    accumulate(grads, *input, dx);
                }
                if wants(*weight) {
                    let x = value(*input);
                    let mut dw = vec![0.0; m * d];
                    for r in 0..n {
                        let xr = &x[r * d..(r + 1) * d];
                        for j in 0..m {
                            axpy(&mut dw[j * d..(j + 1) * d], g[r * m + j], xr);
                        }
                    }
                    accumulate(grads, *weight, dw);
                }
                if wants(*bias) {
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (a, b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Concat { a, b, outer, a_inner, b_inner } => {
                let stride = a_inner + b_inner;
                if wants(*a) {
                    let mut da = Vec::with_capacity(outer * a_inner);
                    for o in 0..*outer {
                        da.extend_from_slice(&g[o * stride..o * stride + a_inner]);
                    }
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = Vec::with_capacity(outer * b_inner);
                    for o in 0..*outer {
                        db.extend_from_slice(&g[o * stride + a_inner..(o + 1) * stride]);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::GlobalAvgPool { input } => {
                let s = self.nodes[*input].value.shape();
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f64;
                let mut dx = Vec::with_capacity(value(*input).len());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                accumulate(grads, *input, dx);
            }
            Op::Softmax { input } => {
                let y = self.nodes[i].value.data();
                let c = *self.nodes[i].value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - inner);
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::Dropout { input, mask } => {
                let dx = g.iter().zip(mask).map(|(a, b)| a * b).collect();
                accumulate(grads, *input, dx);
            }
            Op::Cce { probs, labels } => {
                let p = value(*probs);
                let n = rows_of(&self.nodes[*probs].value) as f64;
                let dx = p
                    .iter()
                    .zip(labels)
                    .map(
                        |(&pv, &y)| {
                            if y == 0.0 || pv <= LOG_PROB_FLOOR {
                                0.0
                            } else {
                                -g[0] * y / (n * pv)
                            }
                        },
                    )
                    .collect();
                accumulate(grads, *probs, dx);
            }
            Op::SoftmaxCce { logits, labels, probs } => {
                let n = rows_of(&self.nodes[*logits].value) as f64;
                let dx = probs.iter().zip(labels).map(|(p, y)| g[0] * (p - y) / n).collect();
                accumulate(grads, *logits, dx);
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let da = g.iter().zip(value(*b)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let db = g.iter().zip(value(*a)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale { input, factor } => {
                let dx = g.iter().map(|v| v * factor).collect();
                accumulate(grads, *input, dx);
            }
            Op::Sum { input } => {
                accumulate(grads, *input, vec![g[0]; value(*input).len()]);
            }
            Op::ColumnSum { input, column } => {
                let c = self.nodes[*input].value.shape()[1];
                let mut dx = vec![0.0; value(*input).len()];
                for row in dx.chunks_mut(c) {
                    row[*column] = g[0];
                }
                accumulate(grads, *input, dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], j: usize, contribution: Vec<f64>) {
    match &mut grads[j] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&contribution) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn rows_of(t: &Tensor) -> usize {
    let c = t.shape().last().copied().unwrap_or(1).max(1);
    t.numel() / c
}

pub(crate) fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let c = *t.shape().last().ok_or_else(|| shape_err!("softmax of a rank-0 tensor"))?;
    let mut out = t.data().to_vec();
    if c == 0 {
        return Tensor::new(t.shape().to_vec(), out);
    }
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn check_one_hot(probs: &Tensor, labels: &Tensor) -> Result<()> {
    if probs.shape() != labels.shape() {
        return Err(shape_err!("labels {:?} do not match predictions {:?}", labels.shape(), probs.shape()));
    }
    let c = probs.shape().last().copied().unwrap_or(1).max(1);
    for (r, row) in labels.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(validation_err!("label row {r} is not one-hot: {:?}", row));
        }
    }
    Ok(())
}

fn cce_value(p: &[f64], y: &[f64], rows: usize) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .filter(|(_, &yv)| yv != 0.0)
        .map(|(&pv, &yv)| -yv * pv.max(LOG_PROB_FLOOR).ln())
        .sum();
    total / rows.max(1) as f64
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_window_sums() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.constant(t(&[1, 1, 3, 3], &data));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_identity_kernel_is_exact() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(&[2, 3, 4, 5], &data));
        let mut wd = vec![0.0; 9];
        for c in 0..3 {
            wd[c * 3 + c] = 1.0;
        }
        let w = tape.constant(t(&[3, 3, 1, 1], &wd));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert!(tape.value(y).bit_eq(tape.value(x)));
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_padding_and_stride_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 5, 5]));
        let w = tape.constant(Tensor::ones(&[2, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 3, 3]);
        // corner window sees 4 ones, center sees 9
        assert_eq!(tape.value(y).data()[0], 4.0);
        assert_eq!(tape.value(y).data()[4], 9.0);
    }

    #[test]
    fn max_pool_forward_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_tie_goes_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 3.0), true);
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_rejects_bad_params() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(tape.max_pool2d(x, 0, 1), Err(Error::Parameter(_))));
        assert!(matches!(tape.max_pool2d(x, 2, 0), Err(Error::Parameter(_))));
        assert!(matches!(tape.avg_pool2d(x, 3, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn avg_pool_forward_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);

        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[1, 2, 4, 4], 1.5));
        let y = tape.avg_pool2d(c, 2, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn relu_forward_and_gate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[3.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);

        let x = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let bad = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(tape.linear(x, bad, b), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let b = tape.leaf(Tensor::from_vec(vec![3.0]), true);
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0]);

        let empty = tape.constant(Tensor::new(vec![0], vec![]).unwrap());
        let y = tape.concat_channels(empty, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(b).data());

        let m1 = tape.constant(Tensor::zeros(&[2, 3]));
        let m2 = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(tape.concat_channels(m1, m2), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_nchw_uses_channel_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
        let b = tape.constant(Tensor::full(&[2, 2, 2, 2], 2.0));
        let y = tape.concat_channels(a, b).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[2, 3, 2, 2]);
        assert_eq!(&v.data()[..12], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn gap_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]), true);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);

        let e = tape.constant(Tensor::zeros(&[1, 1, 0, 3]));
        assert!(matches!(tape.global_avg_pool(e), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::from_vec(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x).unwrap();
        for (v, want) in tape.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - want).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::from_vec(vec![1000.0, 1000.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn dropout_modes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 4], 2.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = tape.dropout(x, 0.0, Some(&mut rng)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = tape.dropout::<ChaCha8Rng>(x, 0.9, None).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(matches!(tape.dropout(x, 1.0, Some(&mut rng)), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[100_000]));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = tape.dropout(x, 0.3, Some(&mut rng)).unwrap();
        let mean = tape.value(y).sum() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn cce_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
        let l = tape.cce_loss(p, &t(&[1, 3], &[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);

        let p = tape.constant(Tensor::full(&[1, 3], 1.0 / 3.0));
        let l = tape.cce_loss(p, &t(&[1, 3], &[0.0, 1.0, 0.0])).unwrap();
        assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);

        let p = tape.constant(t(&[1, 3], &[0.7, 0.2, 0.1]));
        let l = tape.cce_loss(p, &t(&[1, 3], &[1.0, 0.0, 0.0])).unwrap();
        assert!((tape.value(l).data()[0] - 0.356_674_943_938_732_3).abs() < 1e-12);

        let bad = t(&[1, 3], &[1.0, 1.0, 0.0]);
        assert!(matches!(tape.cce_loss(p, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn cce_is_finite_on_confident_mistakes() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = tape.cce_loss(p, &t(&[1, 2], &[0.0, 1.0])).unwrap();
        let v = tape.value(l).data()[0];
        assert!((v - (-LOG_PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.5), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 6]);
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 1, 3], -4.0), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 1, 3]));
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::ones(&[2]), true);
        let s = a.sum(x).unwrap();
        assert!(matches!(b.backward(s), Err(Error::State(_))));
        assert!(matches!(a.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.3, -1.2, 2.5]), true);
        let y = tape.softmax(x).unwrap();
        let z = tape.mul(y, y).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        let first = tape.grad(x).unwrap().clone();
        tape.backward(s).unwrap();
        assert!(first.bit_eq(tape.grad(x).unwrap()));
    }
}
