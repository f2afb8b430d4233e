use std::borrow::Cow;

use super::{GradBuffer, ParamId, ParamStore, Real, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    MulRows(Var, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    L2Normalize(Var, Vec<T>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        cols: Vec<T>,
    },
    Reshape(Var),
    StopGradient,
}

struct Node<'p, T: Clone> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Running-statistic update produced by a batch-norm call in train mode.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

const BN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Records forward computations over a borrowed parameter store.
///
/// Parameters are pulled in lazily with [`Graph::param`]; repeated uses share
/// one leaf so gradients from every use accumulate on the same slot.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
    param_vars: Vec<Option<Var>>,
    bn_updates: Vec<BnUpdate<T>>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].as_f64()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// On/off pattern of every relu in recording order. Finite-difference
    /// checks compare this between perturbed evaluations to skip kinks.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(_) = node.op {
                sig.extend(node.value.data().iter().map(|v| *v > T::zero()));
            }
        }
        sig
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.params.param(id);
        let v = self.push_cow(Cow::Borrowed(&p.value), Op::Param(id), p.trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `[n,k] · [k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            m as isize,
            1,
            T::zero(),
            &mut out,
            m as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a bias along dimension 1. `x` is `[n, c]` or `[n, c, ...]`, `b` is `[c]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(mismatch("add_row", &sx, &sb));
        }
        let c = sx[1];
        let spatial: usize = sx[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        if spatial == 1 {
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(&bias).for_each(|(v, b)| *v += *b);
            }
        } else {
            for (i, chunk) in out.chunks_mut(spatial).enumerate() {
                let bv = bias[i % c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(sx, out)?, Op::AddRow(x, b), rg))
    }

    /// `x · w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var, TensorError> {
        let wv = self.param(w);
        let bv = self.param(b);
        let y = self.matmul(x, wv)?;
        self.add_row(y, bv)
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let out: Vec<T> = t.data().iter().map(|v| f(*v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.map(x, |v| v + s, Op::AddScalar(x))
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, |v| v.ln(), Op::Log(x))
    }

    fn rows_of(&self, x: Var, name: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(mismatch(name, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// Row-wise softmax over `[n, m]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, m) = self.rows_of(x, "softmax")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / sum);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Softmax(x), rg))
    }

    /// Row-wise log-softmax over `[n, m]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, m) = self.rows_of(x, "log_softmax")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::LogSoftmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// `[n, m] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, m) = self.rows_of(x, "sum_rows")?;
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(m)
            .map(|r| r.iter().copied().sum())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n], out)?, Op::SumRows(x), rg))
    }

    /// Scales row `i` of `x` by `w[i]`; `x: [n, ...]`, `w: [n]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 1 || sx[0] != sw[0] {
            return Err(mismatch("mul_rows", &sx, &sw));
        }
        let width = self.value(x).row_len();
        let wv = self.value(w).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (row, wi) in out.chunks_mut(width.max(1)).zip(&wv) {
            row.iter_mut().for_each(|v| *v *= *wi);
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(sx, out)?, Op::MulRows(x, w), rg))
    }

    /// Concatenates along dimension 1. Trailing dimensions beyond 1 must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let mut dim1 = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(mismatch("concat", &first, s));
            }
            dim1 += s[1];
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).row_len()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[1] = dim1;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `[start, end)` of a `[n, m]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (n, m) = self.rows_of(x, "slice_cols")?;
        if start >= end || end > m {
            return Err(mismatch("slice_cols", &[n, m], &[start, end]));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(m)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, end - start], out)?,
            Op::SliceCols(x, start, end),
            rg,
        ))
    }

    /// Divides each row by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, m) = self.rows_of(x, "l2_normalize")?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_mut(m) {
            let norm = row
                .iter()
                .map(|v| *v * *v)
                .sum::<T>()
                .sqrt()
                .max(T::of(NORM_EPS));
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::L2Normalize(x, norms), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Same value, no gradient flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient, false)
    }

    /// Batch normalization over dimension 1 of `[n, c]` or `[n, c, h, w]`.
    ///
    /// With `batch_stats` the current batch is normalized by its own
    /// (biased) statistics and a running-stat update is queued; otherwise the
    /// stored running statistics are used and the op is a fixed affine map of `x`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        batch_stats: bool,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(mismatch("batch_norm", &shape, &[0, 0]));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.params.get(gamma).len() != c {
            return Err(mismatch("batch_norm", &shape, self.params.get(gamma).shape()));
        }
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let count = (n * spatial) as f64;
        let xs = self.value(x).data();
        let (mean, var): (Vec<T>, Vec<T>) = if batch_stats {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            if spatial == 1 {
                for row in xs.chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v.as_f64());
                }
            } else {
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        mean[ch] += xs[base..base + spatial].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            if spatial == 1 {
                for row in xs.chunks(c) {
                    for ((s, m), v) in var.iter_mut().zip(&mean).zip(row) {
                        let d = v.as_f64() - m;
                        *s += d * d;
                    }
                }
            } else {
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        var[ch] += xs[base..base + spatial]
                            .iter()
                            .map(|v| (v.as_f64() - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            (
                mean.into_iter().map(T::of).collect(),
                var.into_iter().map(T::of).collect(),
            )
        } else {
            (
                self.params.get(running_mean).data().to_vec(),
                self.params.get(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + T::of(BN_EPS)).sqrt()).collect();
        let g = self.value(gv).data();
        let b = self.value(bv).data();
        let rg = self.rg(x) || self.rg(gv) || self.rg(bv);
        let mut xhat = Vec::with_capacity(if rg { xs.len() } else { 0 });
        let mut out = Vec::with_capacity(xs.len());
        if spatial == 1 {
            let mut h = vec![T::zero(); c];
            for row in xs.chunks_exact(c) {
                for (((h, v), m), s) in h.iter_mut().zip(row).zip(&mean).zip(&inv_std) {
                    *h = (*v - *m) * *s;
                }
                out.extend(h.iter().zip(g).zip(b).map(|((h, g), b)| *h * *g + *b));
                if rg {
                    xhat.extend_from_slice(&h);
                }
            }
        } else {
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * spatial;
                    for v in &xs[base..base + spatial] {
                        let h = (*v - mean[ch]) * inv_std[ch];
                        xhat.push(h);
                        out.push(h * g[ch] + b[ch]);
                    }
                }
            }
        }
        if batch_stats {
            self.bn_updates.push(BnUpdate {
                running_mean,
                running_var,
                mean,
                var,
            });
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma: gv,
                beta: bv,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// 3×3 convolution with zero padding 1 over `[n, cin, h, w]`; `w: [cout, cin, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, w: ParamId, b: Option<ParamId>, stride: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.params.get(w).shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 || stride == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[0];
        let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let krows = cin * 9;
        let plane = ho * wo;
        let xs = self.value(x).data();
        let mut cols = vec![T::zero(); n * krows * plane];
        for i in 0..n {
            let col = &mut cols[i * krows * plane..(i + 1) * krows * plane];
            im2col(&xs[i * cin * h * wd..(i + 1) * cin * h * wd], cin, h, wd, stride, ho, wo, col);
        }
        let weights = self.value(wv).data();
        let mut out = vec![T::zero(); n * cout * plane];
        for i in 0..n {
            let o = &mut out[i * cout * plane..(i + 1) * cout * plane];
            if let Some(bv) = bv {
                let bias = self.value(bv).data();
                for (co, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bias[co]);
                }
            }
            T::gemm(
                cout,
                krows,
                plane,
                T::one(),
                weights,
                krows as isize,
                1,
                &cols[i * krows * plane..],
                plane as isize,
                1,
                T::one(),
                o,
                plane as isize,
                1,
            );
        }
        let rg = self.rg(x) || self.rg(wv) || bv.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![n, cout, ho, wo], out)?,
            Op::Conv2d {
                x,
                w: wv,
                b: bv,
                stride,
                cols,
            },
            rg,
        ))
    }

    /// One LSTM step. `w_ih: [in, 4h]`, `w_hh: [h, 4h]`, `b: [4h]`, gate order i, f, g, o.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        state: LstmState,
        w_ih: ParamId,
        w_hh: ParamId,
        b: ParamId,
    ) -> Result<LstmState, TensorError> {
        let hidden = self.shape(state.h)[1];
        let wi = self.param(w_ih);
        let wh = self.param(w_hh);
        let xi = self.matmul(x, wi)?;
        let hh = self.matmul(state.h, wh)?;
        let pre = self.add(xi, hh)?;
        let bv = self.param(b);
        let gates = self.add_row(pre, bv)?;
        let i = self.slice_cols(gates, 0, hidden)?;
        let f = self.slice_cols(gates, hidden, 2 * hidden)?;
        let gg = self.slice_cols(gates, 2 * hidden, 3 * hidden)?;
        let o = self.slice_cols(gates, 3 * hidden, 4 * hidden)?;
        let i = self.sigmoid(i);
        let f = self.sigmoid(f);
        let gg = self.tanh(gg);
        let o = self.sigmoid(o);
        let fc = self.mul(f, state.c)?;
        let ig = self.mul(i, gg)?;
        let c = self.add(fc, ig)?;
        let tc = self.tanh(c);
        let h = self.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Reverse pass from a scalar, accumulating into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut GradBuffer<T>) -> Result<(), TensorError> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = g[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut g, grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, dy: &[T], g: &mut [Option<Vec<T>>], grads: &mut GradBuffer<T>) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::StopGradient => {}
            Op::Param(id) => grads.accumulate(*id, dy),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); n * k];
                    // dA = dY · Bᵀ
                    T::gemm(n, m, k, T::one(), dy, m as isize, 1, self.value(*b).data(), 1, m as isize, T::zero(), &mut da, k as isize, 1);
                    acc(g, *a, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * m];
                    // dB = Aᵀ · dY
                    T::gemm(k, n, m, T::one(), self.value(*a).data(), 1, k as isize, dy, m as isize, 1, T::zero(), &mut db, m as isize, 1);
                    acc(g, *b, &db);
                }
            }
            Op::AddRow(x, b) => {
                if self.rg(*x) {
                    acc(g, *x, dy);
                }
                if self.rg(*b) {
                    let s = self.shape(*x);
                    let c = s[1];
                    let spatial: usize = s[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    if spatial == 1 {
                        for row in dy.chunks(c) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                        }
                    } else {
                        for (i, chunk) in dy.chunks(spatial).enumerate() {
                            db[i % c] += chunk.iter().copied().sum::<T>();
                        }
                    }
                    acc(g, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(g, *a, dy);
                }
                if self.rg(*b) {
                    acc(g, *b, dy);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    acc(g, *a, dy);
                }
                if self.rg(*b) {
                    let neg: Vec<T> = dy.iter().map(|v| -*v).collect();
                    acc(g, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d: Vec<T> = dy.iter().zip(self.value(*b).data()).map(|(d, v)| *d * *v).collect();
                    acc(g, *a, &d);
                }
                if self.rg(*b) {
                    let d: Vec<T> = dy.iter().zip(self.value(*a).data()).map(|(d, v)| *d * *v).collect();
                    acc(g, *b, &d);
                }
            }
            Op::Scale(x, s) => {
                let d: Vec<T> = dy.iter().map(|v| *v * *s).collect();
                acc(g, *x, &d);
            }
            Op::AddScalar(x) | Op::Reshape(x) => acc(g, *x, dy),
            Op::Relu(x) => {
                let d: Vec<T> = dy
                    .iter()
                    .zip(y)
                    .map(|(d, v)| if *v > T::zero() { *d } else { T::zero() })
                    .collect();
                acc(g, *x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<T> = dy.iter().zip(y).map(|(d, s)| *d * *s * (T::one() - *s)).collect();
                acc(g, *x, &d);
            }
            Op::Tanh(x) => {
                let d: Vec<T> = dy.iter().zip(y).map(|(d, t)| *d * (T::one() - *t * *t)).collect();
                acc(g, *x, &d);
            }
            Op::Log(x) => {
                let d: Vec<T> = dy.iter().zip(self.value(*x).data()).map(|(d, v)| *d / *v).collect();
                acc(g, *x, &d);
            }
            Op::Softmax(x) => {
                let m = node.value.shape()[1];
                let mut d = vec![T::zero(); dy.len()];
                for ((dr, yr), out) in dy.chunks(m).zip(y.chunks(m)).zip(d.chunks_mut(m)) {
                    let dot: T = dr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for ((o, dv), yv) in out.iter_mut().zip(dr).zip(yr) {
                        *o = *yv * (*dv - dot);
                    }
                }
                acc(g, *x, &d);
            }
            Op::LogSoftmax(x) => {
                let m = node.value.shape()[1];
                let mut d = vec![T::zero(); dy.len()];
                for ((dr, yr), out) in dy.chunks(m).zip(y.chunks(m)).zip(d.chunks_mut(m)) {
                    let total: T = dr.iter().copied().sum();
                    for ((o, dv), yv) in out.iter_mut().zip(dr).zip(yr) {
                        *o = *dv - yv.exp() * total;
                    }
                }
                acc(g, *x, &d);
            }
            Op::SumAll(x) => {
                let d = vec![dy[0]; self.value(*x).len()];
                acc(g, *x, &d);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let d = vec![dy[0] / T::of(n as f64); n];
                acc(g, *x, &d);
            }
            Op::SumRows(x) => {
                let m = self.shape(*x)[1];
                let d: Vec<T> = dy.iter().flat_map(|v| std::iter::repeat_n(*v, m)).collect();
                acc(g, *x, &d);
            }
            Op::MulRows(x, w) => {
                let width = self.value(*x).row_len().max(1);
                if self.rg(*x) {
                    let wv = self.value(*w).data();
                    let d: Vec<T> = dy
                        .chunks(width)
                        .zip(wv)
                        .flat_map(|(r, wi)| r.iter().map(move |v| *v * *wi))
                        .collect();
                    acc(g, *x, &d);
                }
                if self.rg(*w) {
                    let xv = self.value(*x).data();
                    let d: Vec<T> = dy
                        .chunks(width)
                        .zip(xv.chunks(width))
                        .map(|(dr, xr)| dr.iter().zip(xr).map(|(a, b)| *a * *b).sum())
                        .collect();
                    acc(g, *w, &d);
                }
            }
            Op::Concat(parts) => {
                let n = node.value.shape()[0];
                let total = node.value.row_len();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).row_len();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&dy[i * total + offset..i * total + offset + w]);
                        }
                        acc(g, p, &d);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let m = self.shape(*x)[1];
                let w = end - start;
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (row, dr) in d.chunks_mut(m).zip(dy.chunks(w)) {
                    row[*start..*end].copy_from_slice(dr);
                }
                acc(g, *x, &d);
            }
            Op::L2Normalize(x, norms) => {
                let m = node.value.shape()[1];
                let mut d = vec![T::zero(); dy.len()];
                for (((dr, yr), out), norm) in dy.chunks(m).zip(y.chunks(m)).zip(d.chunks_mut(m)).zip(norms) {
                    let dot: T = dr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for ((o, dv), yv) in out.iter_mut().zip(dr).zip(yr) {
                        *o = (*dv - *yv * dot) / *norm;
                    }
                }
                acc(g, *x, &d);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for (j, (d, h)) in dy.iter().zip(xhat.iter()).enumerate() {
                    let ch = (j / spatial) % c;
                    dgamma[ch] += *d * *h;
                    dbeta[ch] += *d;
                    let dxh = *d * gm[ch];
                    sum_dxhat[ch] += dxh;
                    sum_dxhat_xhat[ch] += dxh * *h;
                }
                if self.rg(*x) {
                    let count = T::of((n * spatial) as f64);
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(xhat.iter())
                        .enumerate()
                        .map(|(j, (d, h))| {
                            let ch = (j / spatial) % c;
                            let dxh = *d * gm[ch];
                            if *batch_stats {
                                inv_std[ch] / count * (count * dxh - sum_dxhat[ch] - *h * sum_dxhat_xhat[ch])
                            } else {
                                dxh * inv_std[ch]
                            }
                        })
                        .collect();
                    acc(g, *x, &dx);
                }
                if self.rg(*gamma) {
                    acc(g, *gamma, &dgamma);
                }
                if self.rg(*beta) {
                    acc(g, *beta, &dbeta);
                }
            }
            Op::Conv2d { x, w, b, stride, cols } => {
                let sx = self.shape(*x);
                let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let so = node.value.shape();
                let (cout, ho, wo) = (so[1], so[2], so[3]);
                let plane = ho * wo;
                let krows = cin * 9;
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); cout];
                    for (i, chunk) in dy.chunks(plane).enumerate() {
                        db[i % cout] += chunk.iter().copied().sum::<T>();
                    }
                    acc(g, b, &db);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); cout * krows];
                    for i in 0..n {
                        // dW += dY_i · col_iᵀ
                        T::gemm(
                            cout,
                            plane,
                            krows,
                            T::one(),
                            &dy[i * cout * plane..],
                            plane as isize,
                            1,
                            &cols[i * krows * plane..],
                            1,
                            plane as isize,
                            T::one(),
                            &mut dw,
                            krows as isize,
                            1,
                        );
                    }
                    acc(g, *w, &dw);
                }
                if self.rg(*x) {
                    let weights = self.value(*w).data();
                    let mut dx = vec![T::zero(); n * cin * h * wd];
                    let mut dcol = vec![T::zero(); krows * plane];
                    for i in 0..n {
                        // dcol = Wᵀ · dY_i
                        T::gemm(
                            krows,
                            cout,
                            plane,
                            T::one(),
                            weights,
                            1,
                            krows as isize,
                            &dy[i * cout * plane..],
                            plane as isize,
                            1,
                            T::zero(),
                            &mut dcol,
                            plane as isize,
                            1,
                        );
                        col2im(&dcol, cin, h, wd, *stride, ho, wo, &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd]);
                    }
                    acc(g, *x, &dx);
                }
            }
        }
    }
}

fn acc<T: Real>(g: &mut [Option<Vec<T>>], v: Var, d: &[T]) {
    match &mut g[v.0] {
        Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += *x),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize, col: &mut [T]) {
    let plane = ho * wo;
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        col[row + oy * wo + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x[c * h * w + iy as usize * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let plane = ho * wo;
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dx[c * h * w + iy as usize * w + ix as usize] += col[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
