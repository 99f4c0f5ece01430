//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each primitive application is recorded as a node holding its eagerly
//! computed output. `backward` replays the records in reverse, accumulating
//! gradients into per-node buffers; each contribution is counted so tests can
//! verify the exactly-once accumulation contract. A tape lives for one
//! forward/backward pass and is dropped afterwards.

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Real, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-deterministic function: two forward passes gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row index passed to [`Tape::gather_rows`] that yields an all-zero row and
/// receives no gradient. Used for padding positions.
pub const GATHER_ZERO_ROW: usize = usize::MAX;

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddN(Vec<Var>),
    /// matrix + row vector broadcast over rows
    AddRow(Var, Var),
    ScaleConst(Var, T),
    /// x scaled by a single-element variable
    ScaleBy(Var, Var),
    AddConst(Var),
    MulConst(Var, Tensor<T>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Softplus(Var),
    Pick(Var, usize),
    PickMany(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        scores: Var,
        target: usize,
        probs: Tensor<T>,
    },
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    param: bool,
}

/// Ordered record of primitive applications with saved state for backward.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    accum_counts: Vec<u32>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            accum_counts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, param: bool) -> Var {
        self.nodes.push(Node { op, value, param });
        Var(self.nodes.len() - 1)
    }

    /// Register a trainable parameter leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Register a non-trainable input leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// How many gradient contributions were accumulated into `v` during the
    /// last backward pass.
    pub fn accum_count(&self, v: Var) -> u32 {
        self.accum_counts.get(v.0).copied().unwrap_or(0)
    }

    // ---- primitives -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ka, kb) = (self.value(a).cols(), self.value(b).rows());
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = matmul_raw(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul(a, b), out, false))
    }

    /// a · bᵀ without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ka, kb) = (self.value(a).cols(), self.value(b).cols());
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = matmul_nt_raw(self.value(a), self.value(b));
        Ok(self.push(Op::MatMulNt(a, b), out, false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "add length");
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        );
        self.push(Op::Add(a, b), out, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "sub length");
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x - y)
                .collect(),
        );
        self.push(Op::Sub(a, b), out, false)
    }

    /// Elementwise sum of same-shaped variables.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut data = self.value(xs[0]).data().to_vec();
        for &v in &xs[1..] {
            for (o, &x) in data.iter_mut().zip(self.value(v).data()) {
                *o = *o + x;
            }
        }
        let shape = self.value(xs[0]).shape().to_vec();
        self.push(Op::AddN(xs.to_vec()), Tensor::new(shape, data), false)
    }

    /// `[m×n] + [n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let n = self.value(a).cols();
        assert_eq!(self.value(bias).len(), n, "add_row bias length");
        let m = self.value(a).rows();
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data().to_vec();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] = data[r * n + c] + b[c];
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Op::AddRow(a, bias), Tensor::new(shape, data), false)
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| v * c).collect(),
        );
        self.push(Op::ScaleConst(x, c), out, false)
    }

    /// Scale every element of `x` by a single-element variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_by needs scalar");
        let sv = self.value(s).item();
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| v * sv).collect(),
        );
        self.push(Op::ScaleBy(x, s), out, false)
    }

    /// Elementwise addition of a constant tensor (e.g. attention masks).
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Var {
        assert_eq!(self.value(x).len(), c.len(), "add_const length");
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(c.data())
                .map(|(&a, &b)| a + b)
                .collect(),
        );
        self.push(Op::AddConst(x), out, false)
    }

    /// Elementwise product with a constant tensor (e.g. sampled noise).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Var {
        assert_eq!(self.value(x).len(), c.len(), "mul_const length");
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(c.data())
                .map(|(&a, &b)| a * b)
                .collect(),
        );
        self.push(Op::MulConst(x, c), out, false)
    }

    /// Gather rows of a 2-d variable. Index [`GATHER_ZERO_ROW`] yields an
    /// all-zero row that receives no gradient.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let cols = self.value(table).cols();
        let rows = self.value(table).rows();
        let mut data = vec![T::zero(); idx.len() * cols];
        for (i, &r) in idx.iter().enumerate() {
            if r == GATHER_ZERO_ROW {
                continue;
            }
            assert!(r < rows, "gather_rows index {} out of {} rows", r, rows);
            data[i * cols..(i + 1) * cols].copy_from_slice(self.value(table).row(r));
        }
        self.push(
            Op::GatherRows(table, idx.to_vec()),
            Tensor::new(vec![idx.len(), cols], data),
            false,
        )
    }

    /// Stack row vectors (each `[1×n]` or `[n]`) into an `[m×n]` matrix.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_rows of nothing");
        let n = self.value(xs[0]).cols();
        let mut data = Vec::with_capacity(xs.len() * n);
        for &v in xs {
            assert_eq!(self.value(v).len(), n, "concat_rows width");
            data.extend_from_slice(self.value(v).data());
        }
        self.push(
            Op::ConcatRows(xs.to_vec()),
            Tensor::new(vec![xs.len(), n], data),
            false,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = (self.value(x).rows(), self.value(x).cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&self.value(x).row(r)[start..start + len]);
        }
        self.push(
            Op::SliceCols(x, start, len),
            Tensor::new(vec![m, len], data),
            false,
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_cols of nothing");
        let m = self.value(xs[0]).rows();
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &v in xs {
                assert_eq!(self.value(v).rows(), m, "concat_cols rows");
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        self.push(
            Op::ConcatCols(xs.to_vec()),
            Tensor::new(vec![m, total], data),
            false,
        )
    }

    /// Row-wise softmax, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = (self.value(x).rows(), self.value(x).cols());
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            softmax_in_place(row);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Op::SoftmaxRows(x), Tensor::new(shape, data), false)
    }

    /// Row-wise layer normalization with affine transform.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let (m, n) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(gain).len(), n, "layer_norm gain length");
        assert_eq!(self.value(bias).len(), n, "layer_norm bias length");
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        let nf = T::from_f64(n as f64);
        for r in 0..m {
            let row = self.value(x).row(r);
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / nf;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / nf;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..n {
                let h = (row[c] - mean) * istd;
                xhat[r * n + c] = h;
                out[r * n + c] = self.value(gain).data()[c] * h + self.value(bias).data()[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let xhat = Tensor::new(shape.clone(), xhat);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Tensor::new(shape, out),
            false,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect(),
        );
        self.push(Op::Gelu(x), out, false)
    }

    /// Numerically stable softplus ln(1+eˣ).
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| softplus_fwd(v))
                .collect(),
        );
        self.push(Op::Softplus(x), out, false)
    }

    /// Select one element (flat index) as a `[1]` tensor.
    pub fn pick(&mut self, x: Var, i: usize) -> Var {
        let v = self.value(x).data()[i];
        self.push(Op::Pick(x, i), Tensor::scalar(v), false)
    }

    /// Select several elements (flat indices) as a `[k]` tensor.
    pub fn pick_many(&mut self, x: Var, idx: &[usize]) -> Var {
        let data: Vec<T> = idx.iter().map(|&i| self.value(x).data()[i]).collect();
        self.push(
            Op::PickMany(x, idx.to_vec()),
            Tensor::new(vec![idx.len()], data),
            false,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        self.push(Op::Sum(x), Tensor::scalar(acc), false)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        self.push(
            Op::Mean(x),
            Tensor::scalar(acc / T::from_f64(n as f64)),
            false,
        )
    }

    /// Cross-entropy of a score vector against an integer target:
    /// `logsumexp(scores) - scores[target]`, stabilized.
    pub fn cross_entropy(&mut self, scores: Var, target: usize) -> Var {
        let s = self.value(scores);
        assert!(target < s.len(), "cross_entropy target out of range");
        let mut max = T::neg_infinity();
        for &v in s.data() {
            if v > max {
                max = v;
            }
        }
        let mut z = T::zero();
        let mut probs = vec![T::zero(); s.len()];
        for (i, &v) in s.data().iter().enumerate() {
            let e = (v - max).exp();
            probs[i] = e;
            z = z + e;
        }
        for p in probs.iter_mut() {
            *p = *p / z;
        }
        let loss = z.ln() + max - s.data()[target];
        let probs = Tensor::new(vec![s.len()], probs);
        self.push(
            Op::CrossEntropy {
                scores,
                target,
                probs,
            },
            Tensor::scalar(loss),
            false,
        )
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate gradients of a scalar `loss` into every reachable node.
    /// Resets previous gradients, so repeated calls do not double-count.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward target must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.accum_counts = vec![0; self.nodes.len()];
        self.accumulate(loss, Tensor::scalar(T::one()));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accumulate(&mut self, v: Var, contrib: Tensor<T>) {
        self.accum_counts[v.0] += 1;
        match &mut self.grads[v.0] {
            Some(g) => {
                for (o, &c) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *o = *o + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, node: usize, g: &Tensor<T>) {
        // Ops only reference earlier nodes, so accumulation targets are
        // always visited later in the reverse sweep.
        enum Contrib<T: Real> {
            One(Var, Tensor<T>),
            Many(Vec<(Var, Tensor<T>)>),
            None,
        }
        let contrib = match &self.nodes[node].op {
            Op::Leaf => Contrib::None,
            Op::MatMul(a, b) => {
                let da = matmul_nt_raw(g, &self.nodes[b.0].value);
                let db = matmul_tn_raw(&self.nodes[a.0].value, g);
                Contrib::Many(vec![
                    (*a, reshape_like(da, &self.nodes[a.0].value)),
                    (*b, reshape_like(db, &self.nodes[b.0].value)),
                ])
            }
            Op::MatMulNt(a, b) => {
                let da = matmul_raw(g, &self.nodes[b.0].value);
                let db = matmul_tn_raw(g, &self.nodes[a.0].value);
                Contrib::Many(vec![
                    (*a, reshape_like(da, &self.nodes[a.0].value)),
                    (*b, reshape_like(db, &self.nodes[b.0].value)),
                ])
            }
            Op::Add(a, b) => Contrib::Many(vec![(*a, g.clone()), (*b, g.clone())]),
            Op::Sub(a, b) => {
                let neg = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&v| T::zero() - v).collect(),
                );
                Contrib::Many(vec![(*a, g.clone()), (*b, neg)])
            }
            Op::AddN(xs) => Contrib::Many(xs.iter().map(|&x| (x, g.clone())).collect()),
            Op::AddRow(a, bias) => {
                let n = self.nodes[bias.0].value.len();
                let m = g.len() / n;
                let mut db = vec![T::zero(); n];
                for r in 0..m {
                    for c in 0..n {
                        db[c] = db[c] + g.data()[r * n + c];
                    }
                }
                let db = Tensor::new(self.nodes[bias.0].value.shape().to_vec(), db);
                Contrib::Many(vec![(*a, g.clone()), (*bias, db)])
            }
            Op::ScaleConst(x, c) => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&v| v * *c).collect(),
                );
                Contrib::One(*x, dx)
            }
            Op::ScaleBy(x, s) => {
                let sv = self.nodes[s.0].value.item();
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&v| v * sv).collect(),
                );
                let mut ds = T::zero();
                for (&gv, &xv) in g.data().iter().zip(self.nodes[x.0].value.data()) {
                    ds = ds + gv * xv;
                }
                Contrib::Many(vec![(*x, dx), (*s, Tensor::scalar(ds))])
            }
            Op::AddConst(x) => Contrib::One(*x, g.clone()),
            Op::MulConst(x, c) => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(c.data())
                        .map(|(&gv, &cv)| gv * cv)
                        .collect(),
                );
                Contrib::One(*x, dx)
            }
            Op::GatherRows(table, idx) => {
                let cols = self.nodes[table.0].value.cols();
                let mut dt = Tensor::zeros(self.nodes[table.0].value.shape().to_vec());
                for (i, &r) in idx.iter().enumerate() {
                    if r == GATHER_ZERO_ROW {
                        continue;
                    }
                    let src = &g.data()[i * cols..(i + 1) * cols];
                    for (o, &v) in dt.row_mut(r).iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
                Contrib::One(*table, dt)
            }
            Op::ConcatRows(xs) => {
                let n = g.cols();
                Contrib::Many(
                    xs.iter()
                        .enumerate()
                        .map(|(i, &x)| {
                            let part = Tensor::new(
                                self.nodes[x.0].value.shape().to_vec(),
                                g.data()[i * n..(i + 1) * n].to_vec(),
                            );
                            (x, part)
                        })
                        .collect(),
                )
            }
            Op::SliceCols(x, start, len) => {
                let mut dx = Tensor::zeros(self.nodes[x.0].value.shape().to_vec());
                let m = g.rows();
                for r in 0..m {
                    let dst = &mut dx.row_mut(r)[*start..*start + *len];
                    for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                Contrib::One(*x, dx)
            }
            Op::ConcatCols(xs) => {
                let m = g.rows();
                let mut parts = Vec::with_capacity(xs.len());
                let mut start = 0;
                for &x in xs {
                    let w = self.nodes[x.0].value.cols();
                    let mut dx = Tensor::zeros(self.nodes[x.0].value.shape().to_vec());
                    for r in 0..m {
                        dx.row_mut(r).copy_from_slice(&g.row(r)[start..start + w]);
                    }
                    parts.push((x, dx));
                    start += w;
                }
                Contrib::Many(parts)
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[node].value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mut dot = T::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot = dot + gv * yv;
                    }
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                Contrib::One(*x, Tensor::new(self.nodes[x.0].value.shape().to_vec(), dx))
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = (xhat.rows(), xhat.cols());
                let nf = T::from_f64(n as f64);
                let gain_v = &self.nodes[gain.0].value;
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = xhat.row(r);
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for c in 0..n {
                        dgain[c] = dgain[c] + gr[c] * hr[c];
                        dbias[c] = dbias[c] + gr[c];
                        let dh = gr[c] * gain_v.data()[c];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hr[c];
                    }
                    let mean_dh = sum_dh / nf;
                    let mean_dh_h = sum_dh_h / nf;
                    for c in 0..n {
                        let dh = gr[c] * gain_v.data()[c];
                        dx[r * n + c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                Contrib::Many(vec![
                    (*x, Tensor::new(self.nodes[x.0].value.shape().to_vec(), dx)),
                    (
                        *gain,
                        Tensor::new(self.nodes[gain.0].value.shape().to_vec(), dgain),
                    ),
                    (
                        *bias,
                        Tensor::new(self.nodes[bias.0].value.shape().to_vec(), dbias),
                    ),
                ])
            }
            Op::Gelu(x) => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect(),
                );
                Contrib::One(*x, dx)
            }
            Op::Softplus(x) => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(&gv, &xv)| gv * sigmoid(xv))
                        .collect(),
                );
                Contrib::One(*x, dx)
            }
            Op::Pick(x, i) => {
                let mut dx = Tensor::zeros(self.nodes[x.0].value.shape().to_vec());
                dx.data_mut()[*i] = g.item();
                Contrib::One(*x, dx)
            }
            Op::PickMany(x, idx) => {
                let mut dx = Tensor::zeros(self.nodes[x.0].value.shape().to_vec());
                for (j, &i) in idx.iter().enumerate() {
                    dx.data_mut()[i] = dx.data_mut()[i] + g.data()[j];
                }
                Contrib::One(*x, dx)
            }
            Op::Sum(x) => {
                let gv = g.item();
                let dx = Tensor::new(
                    self.nodes[x.0].value.shape().to_vec(),
                    vec![gv; self.nodes[x.0].value.len()],
                );
                Contrib::One(*x, dx)
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let gv = g.item() / T::from_f64(n as f64);
                let dx = Tensor::new(self.nodes[x.0].value.shape().to_vec(), vec![gv; n]);
                Contrib::One(*x, dx)
            }
            Op::CrossEntropy {
                scores,
                target,
                probs,
            } => {
                let gv = g.item();
                let mut dx: Vec<T> = probs.data().iter().map(|&p| p * gv).collect();
                dx[*target] = dx[*target] - gv;
                Contrib::One(
                    *scores,
                    Tensor::new(self.nodes[scores.0].value.shape().to_vec(), dx),
                )
            }
        };
        match contrib {
            Contrib::None => {}
            Contrib::One(v, t) => self.accumulate(v, t),
            Contrib::Many(parts) => {
                for (v, t) in parts {
                    self.accumulate(v, t);
                }
            }
        }
    }

    /// Number of parameter leaves whose gradient buffer is non-empty.
    pub fn param_grad_count(&self) -> usize {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| n.param && self.grads.get(*i).map_or(false, |g| g.is_some()))
            .count()
    }
}

fn reshape_like<T: Real>(t: Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(t.len(), like.len());
    Tensor::new(like.shape().to_vec(), t.into_data())
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (reverse_sign(x)).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn reverse_sign<T: Real>(x: T) -> T {
    T::zero() - x
}

pub(crate) fn softplus_fwd<T: Real>(x: T) -> T {
    // max(x,0) + ln(1+e^{-|x|})
    let zero = T::zero();
    let m = if x > zero { x } else { zero };
    m + (reverse_sign(x.abs()).exp()).ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
