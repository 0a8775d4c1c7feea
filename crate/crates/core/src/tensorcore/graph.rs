//! Define-by-run reverse-mode autodiff over dense tensors.
//!
//! Every operation appends a node holding its output value; `backward` walks
//! the node list in reverse and accumulates gradients additively, so a tensor
//! used twice receives the sum of both contributions. Nodes whose inputs do
//! not require gradients never receive one.

use super::{Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/infer switch for dropout and batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running statistics of a batch-norm site.
///
/// The affine gain and bias are ordinary graph inputs; only the moving
/// averages live here because they are updated outside of gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub frozen_stats: bool,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(dim: usize, momentum: T) -> Self {
        Self {
            running_mean: vec![T::zero(); dim],
            running_var: vec![T::one(); dim],
            momentum,
            frozen_stats: false,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Mean(Var),
    Sum(Var),
    Transpose(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        x: Var,
        start: usize,
        end: usize,
    },
    RepeatRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    DepthwiseConv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A tape of tensor operations.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    track_kinks: bool,
    kink_signature: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_count(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize, TensorError> {
    if a == b {
        return Ok(1);
    }
    if b.len() <= a.len() && a.ends_with(b) {
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        return Ok(na / nb);
    }
    Err(TensorError::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_of<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_kinks: false,
            kink_signature: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records the sign pattern of every ReLU/abs input into a hash, so a
    /// caller can tell whether two evaluations sit on the same smooth piece.
    pub fn track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    fn note_kinks(&mut self, data: &[T]) {
        if !self.track_kinks {
            return;
        }
        let mut h = self.kink_signature;
        for &v in data {
            h = h
                .wrapping_mul(0x100_0000_01b3)
                .wrapping_add(if v > T::zero() { 2 } else { 1 });
        }
        self.kink_signature = h;
    }

    /// Adds a leaf node; it participates in gradients when
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.clear_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of `v` after [`Graph::backward`]; `None` for nodes that do not
    /// require gradients or were not reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::new(shape, data)
            .expect("op output shapes are validated before push")
            .with_requires_grad(requires);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    // ---- primitive ops -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let c = matmul_into(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], c, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>), TensorError> {
        broadcast_count(op, self.shape(a), self.shape(b))?;
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = Vec::with_capacity(ad.len());
        for chunk in ad.chunks_exact(bd.len()) {
            out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        Ok((self.shape(a).to_vec(), out))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(shape, out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c), &[a])
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| {
            TensorError::Contract("concat_last needs at least one input".into())
        })?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(TensorError::Dimension {
                    op: "concat_last",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            width += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let w = self.value(p).last_dim();
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), parts))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, &[a])
    }

    /// ReLU with subgradient 0 at exactly 0.
    pub fn relu(&mut self, a: Var) -> Var {
        if self.track_kinks {
            let d = self.data(a).to_vec();
            self.note_kinks(&d);
        }
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    /// Absolute value with subgradient 0 at exactly 0.
    pub fn abs(&mut self, a: Var) -> Var {
        if self.track_kinks {
            let d = self.data(a).to_vec();
            self.note_kinks(&d);
        }
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    fn rowwise(&self, a: Var) -> (usize, usize) {
        let d = self.value(a).last_dim();
        (self.value(a).numel() / d, d)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let (rows, d) = self.rowwise(a);
        let x = self.data(a);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let o = &mut out[r * d..(r + 1) * d];
            let mut s = T::zero();
            for (ov, &xv) in o.iter_mut().zip(xr) {
                *ov = (xv - m).exp();
                s += *ov;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let (rows, d) = self.rowwise(a);
        let x = self.data(a);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + xr.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for (ov, &xv) in out[r * d..(r + 1) * d].iter_mut().zip(xr) {
                *ov = xv - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::LogSoftmax(a), &[a])
    }

    /// Mean over all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().copied().sum::<T>() / T::from_f64(d.len() as f64);
        self.push(vec![1], vec![m], Op::Mean(a), &[a])
    }

    /// Sum over all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("transpose", a)?;
        let x = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    /// Gathers rows of `table` (`[vocab, d]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(TensorError::Contract("embedding lookup of zero ids".into()));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Vocabulary {
                    id,
                    vocab_size: vocab,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (rows, d) = self.rowwise(a);
        if start >= end || end > d {
            return Err(TensorError::Dimension {
                op: "slice_last",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, end],
            });
        }
        let x = self.data(a);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&x[r * d + start..r * d + end]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = w;
        Ok(self.push(shape, out, Op::Slice { x: a, start, end }, &[a]))
    }

    /// Broadcasts a vector (`[d]` or `[1, d]`) to `n` identical rows.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var, TensorError> {
        let d = self.value(a).numel();
        let ok = matches!(self.shape(a), [_] | [1, _]);
        if !ok || n == 0 {
            return Err(TensorError::Dimension {
                op: "repeat_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![n],
            });
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(x);
        }
        Ok(self.push(vec![n, d], out, Op::RepeatRows(a), &[a]))
    }

    // ---- fused layers --------------------------------------------------

    /// Layer normalization over the last axis:
    /// `gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (rows, d) = self.rowwise(x);
        if d < 2 {
            return Err(TensorError::DegenerateDimension {
                op: "layer_norm",
                dim: d,
            });
        }
        if !(eps > 0.0) {
            return Err(TensorError::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let xd = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let xr = &xd[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (xr[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Batch normalization of `x: [batch, d]` over the batch axis.
    ///
    /// Train mode normalizes with batch statistics and, unless
    /// `state.frozen_stats`, folds them into the running averages with
    /// `m' = (1 - momentum) m + momentum * batch_mean`. Infer mode uses the
    /// running statistics and never touches them.
    pub fn batch_norm_1d(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (n, d) = self.dims2("batch_norm_1d", x)?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Dimension {
                    op: "batch_norm_1d",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if state.running_mean.len() != d || state.running_var.len() != d {
            return Err(TensorError::Dimension {
                op: "batch_norm_1d",
                lhs: self.shape(x).to_vec(),
                rhs: vec![state.running_mean.len()],
            });
        }
        let eps = T::from_f64(eps);
        let xd = self.data(x);
        let (mean, var) = match mode {
            Mode::Train => {
                let nn = T::from_f64(n as f64);
                let mut mean = vec![T::zero(); d];
                for r in 0..n {
                    add_into(&mut mean, &xd[r * d..(r + 1) * d]);
                }
                mean.iter_mut().for_each(|m| *m /= nn);
                let mut var = vec![T::zero(); d];
                for r in 0..n {
                    for c in 0..d {
                        let dv = xd[r * d + c] - mean[c];
                        var[c] += dv * dv;
                    }
                }
                var.iter_mut().for_each(|v| *v /= nn);
                (mean, var)
            }
            Mode::Infer => (state.running_mean.clone(), state.running_var.clone()),
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![T::zero(); n * d];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            for c in 0..d {
                let h = (xd[r * d + c] - mean[c]) * rstd[c];
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        if mode == Mode::Train && !state.frozen_stats {
            let mom = state.momentum;
            let keep = T::one() - mom;
            for c in 0..d {
                state.running_mean[c] = keep * state.running_mean[c] + mom * mean[c];
                state.running_var[c] = keep * state.running_var[c] + mom * var[c];
            }
        }
        Ok(self.push(
            vec![n, d],
            out,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                batch_stats: mode == Mode::Train,
            },
            &[x, gain, bias],
        ))
    }

    /// Same-padded cross-correlation along time.
    /// `x: [time, d_in]`, `kernel: [k, d_in, d_out]`, `bias: [d_out]`, odd `k`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        let (t_len, d_in) = self.dims2("conv1d", x)?;
        let (k, kin, d_out) = match self.shape(kernel) {
            [k, i, o] => (*k, *i, *o),
            s => {
                return Err(TensorError::Rank {
                    op: "conv1d",
                    expected: 3,
                    shape: s.to_vec(),
                })
            }
        };
        if k % 2 == 0 {
            return Err(TensorError::UnsupportedKernel { k });
        }
        if kin != d_in || self.shape(bias) != [d_out] {
            return Err(TensorError::Dimension {
                op: "conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        let pad = k / 2;
        let xd = self.data(x);
        let kd = self.data(kernel);
        let bd = self.data(bias);
        let mut out = vec![T::zero(); t_len * d_out];
        for t in 0..t_len {
            let orow = &mut out[t * d_out..(t + 1) * d_out];
            orow.copy_from_slice(bd);
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= t_len {
                    continue;
                }
                let src = src - pad;
                for i in 0..d_in {
                    let xv = xd[src * d_in + i];
                    let krow = &kd[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        Ok(self.push(
            vec![t_len, d_out],
            out,
            Op::Conv1d { x, kernel, bias },
            &[x, kernel, bias],
        ))
    }

    /// Per-channel same-padded convolution. `x: [time, d]`, `kernel: [k, d]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        let (t_len, d) = self.dims2("depthwise_conv1d", x)?;
        let (k, kd_) = self.dims2("depthwise_conv1d", kernel)?;
        if k % 2 == 0 {
            return Err(TensorError::UnsupportedKernel { k });
        }
        if kd_ != d || self.shape(bias) != [d] {
            return Err(TensorError::Dimension {
                op: "depthwise_conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        let pad = k / 2;
        let xd = self.data(x);
        let kd = self.data(kernel);
        let bd = self.data(bias);
        let mut out = vec![T::zero(); t_len * d];
        for t in 0..t_len {
            let orow = &mut out[t * d..(t + 1) * d];
            orow.copy_from_slice(bd);
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= t_len {
                    continue;
                }
                let src = src - pad;
                let xrow = &xd[src * d..(src + 1) * d];
                let krow = &kd[j * d..(j + 1) * d];
                for c in 0..d {
                    orow[c] += xrow[c] * krow[c];
                }
            }
        }
        Ok(self.push(
            vec![t_len, d],
            out,
            Op::DepthwiseConv1d { x, kernel, bias },
            &[x, kernel, bias],
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a one-element `root`. Gradients are stored on every
    /// node that requires them and can be read with [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i]
                .value
                .set_grad(g)
                .expect("gradient length matches node value");
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => add_into(g, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.requires_grad(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).last_dim();
                let ad = self.data(*a);
                let bd = self.data(*b);
                if self.requires_grad(*a) {
                    // da = g · bᵀ, computed as row updates against bᵀ so the
                    // inner loop is a vectorizable axpy.
                    let bt = transpose_of(bd, k, n);
                    let da = matmul_into(g, &bt, m, n, k);
                    self.accum(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    self.accum_with(grads, *b, |db| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = ad[r * k + p];
                                let dbrow = &mut db[p * n..(p + 1) * n];
                                for (d, &gv) in dbrow.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(self.nodes[i].op, Op::Sub(..));
                self.accum(grads, *a, g.to_vec());
                let nb = self.value(*b).numel();
                self.accum_with(grads, *b, |db| {
                    for chunk in g.chunks_exact(nb) {
                        if neg {
                            db.iter_mut().zip(chunk).for_each(|(d, &gv)| *d -= gv);
                        } else {
                            db.iter_mut().zip(chunk).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                let nb = bd.len();
                if self.requires_grad(*a) {
                    let mut da = Vec::with_capacity(g.len());
                    for chunk in g.chunks_exact(nb) {
                        da.extend(chunk.iter().zip(bd).map(|(&gv, &bv)| gv * bv));
                    }
                    self.accum(grads, *a, da);
                }
                self.accum_with(grads, *b, |db| {
                    for (gc, ac) in g.chunks_exact(nb).zip(ad.chunks_exact(nb)) {
                        for ((d, &gv), &av) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gv * av;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, g.iter().map(|&v| v * c).collect());
            }
            Op::Concat(parts) => {
                let width = out.last_dim();
                let rows = out.numel() / width;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                        }
                        self.accum(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accum(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                let da = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                self.accum(grads, *a, da);
            }
            Op::Abs(a) => {
                let x = self.data(*a);
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accum(grads, *a, da);
            }
            Op::Square(a) => {
                let x = self.data(*a);
                let two = T::from_f64(2.0);
                let da = g.iter().zip(x).map(|(&gv, &xv)| two * xv * gv).collect();
                self.accum(grads, *a, da);
            }
            Op::Softmax(a) => {
                let d = out.last_dim();
                let y = out.data();
                let mut da = vec![T::zero(); y.len()];
                for r in 0..y.len() / d {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..d {
                        da[r * d + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                let d = out.last_dim();
                let y = out.data();
                let mut da = vec![T::zero(); y.len()];
                for r in 0..y.len() / d {
                    let gr = &g[r * d..(r + 1) * d];
                    let gs: T = gr.iter().copied().sum();
                    for c in 0..d {
                        da[r * d + c] = gr[c] - y[r * d + c].exp() * gs;
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let v = g[0] / T::from_f64(n as f64);
                self.accum(grads, *a, vec![v; n]);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accum(grads, *a, vec![g[0]; n]);
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let mut da = vec![T::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = g[c * m + r];
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                self.accum_with(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Slice { x, start, end } => {
                let d = self.value(*x).last_dim();
                let w = end - start;
                let rows = out.numel() / w;
                self.accum_with(grads, *x, |dx| {
                    for r in 0..rows {
                        add_into(&mut dx[r * d + start..r * d + end], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::RepeatRows(a) => {
                let d = self.value(*a).numel();
                self.accum_with(grads, *a, |da| {
                    for row in g.chunks(d) {
                        add_into(da, row);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let rows = out.numel() / d;
                let gd = self.data(*gain);
                if self.requires_grad(*x) {
                    let dn = T::from_f64(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let dh = gr[c] * gd[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for c in 0..d {
                            let dh = gr[c] * gd[c];
                            dx[r * d + c] = rstd[r] * (dh - m1 - hr[c] * m2);
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                self.accum_with(grads, *gain, |dg| {
                    for (idx, &gv) in g.iter().enumerate() {
                        dg[idx % d] += gv * xhat[idx];
                    }
                });
                self.accum_with(grads, *bias, |db| {
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % d] += gv;
                    }
                });
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                batch_stats,
            } => {
                let d = out.last_dim();
                let n = out.numel() / d;
                let gd = self.data(*gain);
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    if *batch_stats {
                        let nn = T::from_f64(n as f64);
                        let mut s1 = vec![T::zero(); d];
                        let mut s2 = vec![T::zero(); d];
                        for r in 0..n {
                            for c in 0..d {
                                let dh = g[r * d + c] * gd[c];
                                s1[c] += dh;
                                s2[c] += dh * xhat[r * d + c];
                            }
                        }
                        for r in 0..n {
                            for c in 0..d {
                                let dh = g[r * d + c] * gd[c];
                                dx[r * d + c] =
                                    rstd[c] * (dh - s1[c] / nn - xhat[r * d + c] * s2[c] / nn);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for c in 0..d {
                                dx[r * d + c] = g[r * d + c] * gd[c] * rstd[c];
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                self.accum_with(grads, *gain, |dg| {
                    for (idx, &gv) in g.iter().enumerate() {
                        dg[idx % d] += gv * xhat[idx];
                    }
                });
                self.accum_with(grads, *bias, |db| {
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % d] += gv;
                    }
                });
            }
            Op::Conv1d { x, kernel, bias } => {
                let (t_len, d_in) = self.value(*x).dims2().unwrap();
                let k = self.shape(*kernel)[0];
                let d_out = out.last_dim();
                let pad = k / 2;
                let xd = self.data(*x);
                let kd = self.data(*kernel);
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); t_len * d_in];
                    for t in 0..t_len {
                        let grow = &g[t * d_out..(t + 1) * d_out];
                        for j in 0..k {
                            let src = t + j;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let src = src - pad;
                            for i in 0..d_in {
                                let krow = &kd[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                                dx[src * d_in + i] +=
                                    grow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>();
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                self.accum_with(grads, *kernel, |dk| {
                    for t in 0..t_len {
                        let grow = &g[t * d_out..(t + 1) * d_out];
                        for j in 0..k {
                            let src = t + j;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let src = src - pad;
                            for i in 0..d_in {
                                let xv = xd[src * d_in + i];
                                let dkrow =
                                    &mut dk[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                                for (dv, &gv) in dkrow.iter_mut().zip(grow) {
                                    *dv += xv * gv;
                                }
                            }
                        }
                    }
                });
                self.accum_with(grads, *bias, |db| {
                    for row in g.chunks(d_out) {
                        add_into(db, row);
                    }
                });
            }
            Op::DepthwiseConv1d { x, kernel, bias } => {
                let (t_len, d) = self.value(*x).dims2().unwrap();
                let k = self.shape(*kernel)[0];
                let pad = k / 2;
                let xd = self.data(*x);
                let kd = self.data(*kernel);
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); t_len * d];
                    for t in 0..t_len {
                        for j in 0..k {
                            let src = t + j;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let src = src - pad;
                            for c in 0..d {
                                dx[src * d + c] += g[t * d + c] * kd[j * d + c];
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                self.accum_with(grads, *kernel, |dk| {
                    for t in 0..t_len {
                        for j in 0..k {
                            let src = t + j;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let src = src - pad;
                            for c in 0..d {
                                dk[j * d + c] += g[t * d + c] * xd[src * d + c];
                            }
                        }
                    }
                });
                self.accum_with(grads, *bias, |db| {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                });
            }
        }
    }
}
