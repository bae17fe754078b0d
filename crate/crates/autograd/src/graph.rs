//! Tape of recorded operations and reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends one node; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into parents that
//! require them.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{AutogradError, Result};
use crate::params::{GradStore, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::spatial::SparseMap;
use crate::tensor::{gemm_into, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Block layout for fused multi-head attention.
///
/// Queries are `(batch * q_len) x (heads * d_k)`, keys
/// `(batch * k_len) x (heads * d_k)`, values `(batch * k_len) x (heads * d_v)`.
/// `key_mask[b * k_len + j] == false` removes key `j` of sample `b`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_mask: Option<Arc<Vec<bool>>>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Arc<Vec<usize>> },
    Spatial { a: Var, map: Arc<SparseMap<T>>, batch: usize },
    SpaceToDepth { a: Var, batch: usize, h: usize, w: usize, s: usize },
    DepthwiseConv3 { x: Var, w: Var, batch: usize, h: usize, width: usize },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<T> },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    L2NormalizeRows { a: Var, norms: Vec<T> },
    LogSumExpRows { a: Var, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Arc<Vec<usize>>, probs: Vec<T> },
    BceWithLogits { logits: Var, targets: Arc<Tensor<T>> },
    Dice { p: Var, targets: Arc<Tensor<T>>, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph<'p, T> {
    params: Option<&'p ParamStore<T>>,
    param_vars: HashMap<String, Var>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<R>(msg: String) -> Result<R> {
    Err(AutogradError::Shape(msg))
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Tape without a parameter store (inputs and constants only).
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf (gradient available after backward).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a named parameter; repeated lookups share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))?;
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Leaf, true);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.is_some_and(|p| p.contains(name))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = Tensor::matmul(self.value(a), ta, self.value(b), tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.rows(), va.cols(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn check_row(&self, a: Var, row: Var, what: &str) -> Result<()> {
        let (_, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return shape_err(format!(
                "{what}: row {:?} does not broadcast over {:?}",
                self.shape(row),
                self.shape(a)
            ));
        }
        Ok(())
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        let c = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r[i % c];
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow { a, row }, rg))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        let c = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= r[i % c];
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow { a, row }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar { a }, rg)
    }

    // ---- pointwise nonlinearities -----------------------------------------

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu_fwd)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    // ---- normalization ------------------------------------------------------

    /// Row-wise layer normalization with affine `1 x c` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_row(x, gamma, "layer_norm gamma")?;
        self.check_row(x, beta, "layer_norm beta")?;
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = T::from_usize(cols).unwrap();
        let eps = lit::<T>(eps);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let out = Tensor::new(rows, cols, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Divides each row by its Euclidean norm (zero rows stay zero).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            if n > T::zero() {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::L2NormalizeRows { a, norms }, rg)
    }

    /// `log sum_j exp(a_ij)` per row, as an `r x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut probs = av.data().to_vec();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            out.push(m + s.ln());
            softmax_in_place(row);
        }
        let out = Tensor::new(rows, 1, out).expect("column");
        let rg = self.rg(a);
        self.push(out, Op::LogSumExpRows { a, probs }, rg)
    }

    // ---- layout -------------------------------------------------------------

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols of nothing".into());
        };
        let rows = self.shape(first).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return shape_err(format!(
                "concat_cols row mismatch: {} vs {}",
                rows,
                self.shape(bad).0
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows of nothing".into());
        };
        let cols = self.shape(first).1;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).1 != cols) {
            return shape_err(format!(
                "concat_rows column mismatch: {} vs {}",
                cols,
                self.shape(bad).1
            ));
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return shape_err(format!("slice_cols {start}+{len} exceeds {cols}"));
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Tensor::new(rows, len, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { a, start }, rg))
    }

    /// Rows `idx[0], idx[1], ...` of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err(format!("gather_rows index {bad} out of {rows} rows"));
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::new(idx.len(), cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::GatherRows {
                a,
                idx: Arc::new(idx.to_vec()),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    // ---- spatial ------------------------------------------------------------

    /// Applies `map` to the spatial rows of each of `batch` images.
    pub fn spatial(&mut self, a: Var, map: Arc<SparseMap<T>>, batch: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if rows != batch * map.n_in {
            return shape_err(format!(
                "spatial map expects {} rows ({} x {}), got {rows}",
                batch * map.n_in,
                batch,
                map.n_in
            ));
        }
        let av = self.value(a);
        let mut out = Tensor::zeros(batch * map.n_out, cols);
        for b in 0..batch {
            for o in 0..map.n_out {
                let dst = out.row_mut(b * map.n_out + o);
                for (i, w) in map.row(o) {
                    let src = av.row(b * map.n_in + i);
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Spatial { a, map, batch }, rg))
    }

    /// Folds each `s x s` spatial patch into channels: `(b*h*w) x c` becomes
    /// `(b*(h/s)*(w/s)) x (s*s*c)` with column `(dy*s+dx)*c + ch`.
    pub fn space_to_depth(&mut self, a: Var, batch: usize, h: usize, w: usize, s: usize) -> Result<Var> {
        let (rows, c) = self.shape(a);
        if rows != batch * h * w {
            return shape_err(format!("space_to_depth: {rows} rows for {batch}x{h}x{w}"));
        }
        if s == 0 || h % s != 0 || w % s != 0 {
            return shape_err(format!("space_to_depth: {h}x{w} not divisible by {s}"));
        }
        let (ho, wo) = (h / s, w / s);
        let av = self.value(a);
        let mut out = Tensor::zeros(batch * ho * wo, s * s * c);
        for b in 0..batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = out.row_mut((b * ho + oy) * wo + ox);
                    for dy in 0..s {
                        for dx in 0..s {
                            let src = av.row((b * h + oy * s + dy) * w + ox * s + dx);
                            let off = (dy * s + dx) * c;
                            dst[off..off + c].copy_from_slice(src);
                        }
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SpaceToDepth { a, batch, h, w, s }, rg))
    }

    /// Zero-padded 3x3 depthwise convolution; `w` is `9 x c`, row `(dy+1)*3+(dx+1)`.
    pub fn depthwise_conv3(&mut self, x: Var, w: Var, batch: usize, h: usize, width: usize) -> Result<Var> {
        let (rows, c) = self.shape(x);
        if rows != batch * h * width {
            return shape_err(format!("depthwise_conv3: {rows} rows for {batch}x{h}x{width}"));
        }
        if self.shape(w) != (9, c) {
            return shape_err(format!("depthwise_conv3 kernel {:?}, want (9, {c})", self.shape(w)));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = Tensor::zeros(rows, c);
        for b in 0..batch {
            for y in 0..h {
                for xx in 0..width {
                    let dst = out.row_mut((b * h + y) * width + xx);
                    for (ky, sy) in (-1i64..=1).enumerate() {
                        let yy = y as i64 + sy;
                        if yy < 0 || yy >= h as i64 {
                            continue;
                        }
                        for (kx, sx) in (-1i64..=1).enumerate() {
                            let xs = xx as i64 + sx;
                            if xs < 0 || xs >= width as i64 {
                                continue;
                            }
                            let src = xv.row((b * h + yy as usize) * width + xs as usize);
                            let k = wv.row(ky * 3 + kx);
                            for ch in 0..c {
                                dst[ch] += k[ch] * src[ch];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::DepthwiseConv3 { x, w, batch, h, width }, rg))
    }

    // ---- attention ------------------------------------------------------------

    /// `softmax(q_bh k_bh^T / sqrt(d_k)) v_bh` for every sample `b` and head `h`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = spec;
        let (qr, qc) = self.shape(q);
        let (kr, kc) = self.shape(k);
        let (vr, vc) = self.shape(v);
        if heads == 0 || qr != batch * q_len || kr != batch * k_len || vr != kr || qc != kc {
            return shape_err(format!(
                "attention shapes q{:?} k{:?} v{:?} for batch {batch}, q_len {q_len}, k_len {k_len}",
                (qr, qc),
                (kr, kc),
                (vr, vc)
            ));
        }
        if qc % heads != 0 || vc % heads != 0 {
            return shape_err(format!("attention widths {qc}/{vc} not divisible by {heads} heads"));
        }
        if let Some(m) = &spec.key_mask {
            if m.len() != batch * k_len {
                return shape_err(format!("key mask length {} != {}", m.len(), batch * k_len));
            }
        }
        let (dk, dv) = (qc / heads, vc / heads);
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = Tensor::zeros(qr, vc);
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * q_len * k_len..][..q_len * k_len];
                // S = Q K^T
                let qa = View::new(qv.data(), b * q_len * qc + h * dk, qc, 1);
                let kt = View::new(kv.data(), b * k_len * kc + h * dk, 1, kc);
                gemm_view(q_len, dk, k_len, scale, qa, kt, T::zero(), p, 0, k_len);
                for i in 0..q_len {
                    let row = &mut p[i * k_len..(i + 1) * k_len];
                    masked_softmax(row, spec.key_mask.as_deref().map(|m| &m[b * k_len..(b + 1) * k_len]));
                }
                let pa = View::new(p, 0, k_len, 1);
                let vb = View::new(vv.data(), b * k_len * vc + h * dv, vc, 1);
                gemm_view(q_len, k_len, dv, T::one(), pa, vb, T::zero(), out.data_mut(), b * q_len * vc + h * dv, vc);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, spec, probs }, rg))
    }

    // ---- reductions and losses --------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum() / T::from_usize(av.len()).unwrap());
        let rg = self.rg(a);
        self.push(out, Op::MeanAll(a), rg)
    }

    /// Column means: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        if rows == 0 {
            return shape_err("mean_rows of an empty tensor".into());
        }
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let n = T::from_usize(rows).unwrap();
        for o in &mut out {
            *o /= n;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(1, cols, out)?, Op::MeanRows(a), rg))
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.shape();
        if rows != targets.len() || rows == 0 {
            return shape_err(format!(
                "cross_entropy: {rows} logit rows vs {} targets",
                targets.len()
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return shape_err(format!("cross_entropy target {bad} >= {cols} classes"));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - row[t];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(total / T::from_usize(rows).unwrap());
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets.to_vec()),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy from logits, `max(x,0) - x*y + ln(1+e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return shape_err(format!(
                "bce: logits {:?} vs targets {:?}",
                lv.shape(),
                targets.shape()
            ));
        }
        let total: T = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / T::from_usize(lv.len()).unwrap());
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::BceWithLogits {
                logits,
                targets: Arc::new(targets.clone()),
            },
            rg,
        ))
    }

    /// Soft Dice loss `1 - (2 sum pg + eps) / (sum p + sum g + eps)`.
    pub fn dice(&mut self, p: Var, targets: &Tensor<T>, eps: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != targets.shape() {
            return shape_err(format!(
                "dice: prediction {:?} vs targets {:?}",
                pv.shape(),
                targets.shape()
            ));
        }
        let eps = lit::<T>(eps);
        let (num, den) = dice_terms(pv.data(), targets.data(), eps);
        let out = Tensor::scalar(T::one() - num / den);
        let rg = self.rg(p);
        Ok(self.push(
            out,
            Op::Dice {
                p,
                targets: Arc::new(targets.clone()),
                eps,
            },
            rg,
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a `1x1` node, seeded with gradient one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass collected per named parameter.
    pub fn param_grads(&self, loss: Var) -> Result<GradStore<T>> {
        let grads = self.backward(loss)?;
        let mut out = GradStore::new();
        for (name, &v) in &self.param_vars {
            if let Some(g) = grads.get(v) {
                out.accumulate(name, g);
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.rg(v) {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                // C = op(A) op(B)
                self.acc_with(grads, a, || {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    if ta {
                        // A^T: dA = op(B) G^T
                        gemm_into(bv, tb, g, true, T::one(), &mut ga, T::zero());
                    } else {
                        gemm_into(g, false, bv, !tb, T::one(), &mut ga, T::zero());
                    }
                    ga
                });
                self.acc_with(grads, b, || {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    if tb {
                        gemm_into(g, true, av, ta, T::one(), &mut gb, T::zero());
                    } else {
                        gemm_into(av, !ta, g, false, T::one(), &mut gb, T::zero());
                    }
                    gb
                });
            }
            &Op::Add(a, b) => {
                self.acc_with(grads, a, || g.clone());
                self.acc_with(grads, b, || g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc_with(grads, a, || g.clone());
                self.acc_with(grads, b, || g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                self.acc_with(grads, a, || hadamard(g, self.value(b)));
                self.acc_with(grads, b, || hadamard(g, self.value(a)));
            }
            &Op::AddRow { a, row } => {
                self.acc_with(grads, a, || g.clone());
                self.acc_with(grads, row, || column_sums(g));
            }
            &Op::MulRow { a, row } => {
                let r = self.value(row);
                self.acc_with(grads, a, || {
                    let c = g.cols();
                    let mut ga = g.clone();
                    for (k, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= r.data()[k % c];
                    }
                    ga
                });
                self.acc_with(grads, row, || column_sums(&hadamard(g, self.value(a))));
            }
            &Op::Scale { a, c } => self.acc_with(grads, a, || g.map(|v| v * c)),
            &Op::AddScalar { a } => self.acc_with(grads, a, || g.clone()),
            &Op::Gelu(a) => {
                self.acc_with(grads, a, || zip_map(g, self.value(a), |gv, x| gv * gelu_grad(x)))
            }
            &Op::Tanh(a) => self.acc_with(grads, a, || zip_map(g, out, |gv, y| gv * (T::one() - y * y))),
            &Op::Sigmoid(a) => {
                self.acc_with(grads, a, || zip_map(g, out, |gv, y| gv * y * (T::one() - y)))
            }
            &Op::Exp(a) => self.acc_with(grads, a, || zip_map(g, out, |gv, y| gv * y)),
            &Op::Log(a) => self.acc_with(grads, a, || zip_map(g, self.value(a), |gv, x| gv / x)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gam = self.value(*gamma).data();
                self.acc_with(grads, *gamma, || {
                    let mut gg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.get(r, c) * xhat[r * cols + c];
                        }
                    }
                    gg
                });
                self.acc_with(grads, *beta, || column_sums(g));
                self.acc_with(grads, *x, || {
                    let n = T::from_usize(cols).unwrap();
                    let mut gx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            s1 += d;
                            s2 += d * xh[c];
                        }
                        let dst = gx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            dst[c] = inv_std[r] * (d - s1 / n - xh[c] * s2 / n);
                        }
                    }
                    gx
                });
            }
            &Op::SoftmaxRows(a) => self.acc_with(grads, a, || {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for (c, d) in ga.row_mut(r).iter_mut().enumerate() {
                        *d = y[c] * (gy[c] - dot);
                    }
                }
                ga
            }),
            Op::L2NormalizeRows { a, norms } => self.acc_with(grads, *a, || {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let n = norms[r];
                    if n <= T::zero() {
                        continue;
                    }
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for (c, d) in ga.row_mut(r).iter_mut().enumerate() {
                        *d = (gy[c] - y[c] * dot) / n;
                    }
                }
                ga
            }),
            Op::LogSumExpRows { a, probs } => self.acc_with(grads, *a, || {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::new(rows, cols, probs.clone()).expect("shape");
                for r in 0..rows {
                    let gr = g.get(r, 0);
                    for v in ga.row_mut(r) {
                        *v *= gr;
                    }
                }
                ga
            }),
            &Op::Transpose(a) => self.acc_with(grads, a, || g.transpose()),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let start = off;
                    self.acc_with(grads, p, || {
                        let mut gp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[start..start + cols]);
                        }
                        gp
                    });
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let start = off;
                    self.acc_with(grads, p, || {
                        Tensor::new(rows, cols, g.data()[start * cols..(start + rows) * cols].to_vec())
                            .expect("shape")
                    });
                    off += rows;
                }
            }
            &Op::SliceCols { a, start } => self.acc_with(grads, a, || {
                let (rows, cols) = self.shape(a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                ga
            }),
            Op::GatherRows { a, idx } => self.acc_with(grads, *a, || {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (d, &s) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                ga
            }),
            Op::Spatial { a, map, batch } => self.acc_with(grads, *a, || {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for b in 0..*batch {
                    for o in 0..map.n_out {
                        let src = g.row(b * map.n_out + o);
                        for (i, w) in map.row(o) {
                            let dst = ga.row_mut(b * map.n_in + i);
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += w * s;
                            }
                        }
                    }
                }
                ga
            }),
            &Op::SpaceToDepth { a, batch, h, w, s } => self.acc_with(grads, a, || {
                let (rows, c) = self.shape(a);
                let (ho, wo) = (h / s, w / s);
                let mut ga = Tensor::zeros(rows, c);
                for b in 0..batch {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let src = g.row((b * ho + oy) * wo + ox);
                            for dy in 0..s {
                                for dx in 0..s {
                                    let off = (dy * s + dx) * c;
                                    ga.row_mut((b * h + oy * s + dy) * w + ox * s + dx)
                                        .copy_from_slice(&src[off..off + c]);
                                }
                            }
                        }
                    }
                }
                ga
            }),
            &Op::DepthwiseConv3 {
                x,
                w,
                batch,
                h,
                width,
            } => {
                let (rows, c) = self.shape(x);
                let xv = self.value(x);
                let wv = self.value(w);
                let need_x = self.rg(x);
                let need_w = self.rg(w);
                let mut gx = Tensor::zeros(if need_x { rows } else { 0 }, c);
                let mut gw = Tensor::zeros(9, c);
                for b in 0..batch {
                    for y in 0..h {
                        for xx in 0..width {
                            let go = g.row((b * h + y) * width + xx);
                            for (ky, sy) in (-1i64..=1).enumerate() {
                                let yy = y as i64 + sy;
                                if yy < 0 || yy >= h as i64 {
                                    continue;
                                }
                                for (kx, sx) in (-1i64..=1).enumerate() {
                                    let xs = xx as i64 + sx;
                                    if xs < 0 || xs >= width as i64 {
                                        continue;
                                    }
                                    let src_row = (b * h + yy as usize) * width + xs as usize;
                                    let kidx = ky * 3 + kx;
                                    if need_w {
                                        let src = xv.row(src_row);
                                        let dst = gw.row_mut(kidx);
                                        for ch in 0..c {
                                            dst[ch] += go[ch] * src[ch];
                                        }
                                    }
                                    if need_x {
                                        let k = wv.row(kidx);
                                        let dst = gx.row_mut(src_row);
                                        for ch in 0..c {
                                            dst[ch] += go[ch] * k[ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.acc(grads, x, gx);
                }
                if need_w {
                    self.acc(grads, w, gw);
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let (qc, kc, vc) = (qv.cols(), kv.cols(), vv.cols());
                let AttentionSpec {
                    batch,
                    q_len,
                    k_len,
                    heads,
                    ..
                } = *spec;
                let (dk, dv) = (qc / heads, vc / heads);
                let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
                let mut gq = Tensor::zeros(qv.rows(), qc);
                let mut gk = Tensor::zeros(kv.rows(), kc);
                let mut gv = Tensor::zeros(vv.rows(), vc);
                let mut dp = vec![T::zero(); q_len * k_len];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * q_len * k_len..][..q_len * k_len];
                        // dP = dO V^T
                        let go = View::new(g.data(), b * q_len * vc + h * dv, vc, 1);
                        let vt = View::new(vv.data(), b * k_len * vc + h * dv, 1, vc);
                        gemm_view(q_len, dv, k_len, T::one(), go, vt, T::zero(), &mut dp, 0, k_len);
                        // dS = P * (dP - rowdot) * scale
                        for i in 0..q_len {
                            let pr = &p[i * k_len..(i + 1) * k_len];
                            let dr = &mut dp[i * k_len..(i + 1) * k_len];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (d, &pv) in dr.iter_mut().zip(pr) {
                                *d = pv * (*d - dot) * scale;
                            }
                        }
                        let ds = View::new(&dp, 0, k_len, 1);
                        let kb = View::new(kv.data(), b * k_len * kc + h * dk, kc, 1);
                        gemm_view(q_len, k_len, dk, T::one(), ds, kb, T::one(), gq.data_mut(), b * q_len * qc + h * dk, qc);
                        let dst = View::new(&dp, 0, 1, k_len);
                        let qb = View::new(qv.data(), b * q_len * qc + h * dk, qc, 1);
                        gemm_view(k_len, q_len, dk, T::one(), dst, qb, T::one(), gk.data_mut(), b * k_len * kc + h * dk, kc);
                        let pt = View::new(p, 0, 1, k_len);
                        let go = View::new(g.data(), b * q_len * vc + h * dv, vc, 1);
                        gemm_view(k_len, q_len, dv, T::one(), pt, go, T::one(), gv.data_mut(), b * k_len * vc + h * dv, vc);
                    }
                }
                self.acc(grads, q, gq);
                self.acc(grads, k, gk);
                self.acc(grads, v, gv);
            }
            &Op::SumAll(a) => self.acc_with(grads, a, || {
                let (r, c) = self.shape(a);
                Tensor::full(r, c, g.item())
            }),
            &Op::MeanAll(a) => self.acc_with(grads, a, || {
                let (r, c) = self.shape(a);
                Tensor::full(r, c, g.item() / T::from_usize(r * c).unwrap())
            }),
            &Op::MeanRows(a) => self.acc_with(grads, a, || {
                let (r, c) = self.shape(a);
                let n = T::from_usize(r).unwrap();
                Tensor::from_fn(r, c, |_, j| g.get(0, j) / n)
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => self.acc_with(grads, *logits, || {
                let (rows, cols) = self.shape(*logits);
                let scale = g.item() / T::from_usize(rows).unwrap();
                let mut gl = Tensor::new(rows, cols, probs.clone()).expect("shape");
                for (r, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    row[t] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                gl
            }),
            Op::BceWithLogits { logits, targets } => self.acc_with(grads, *logits, || {
                let lv = self.value(*logits);
                let scale = g.item() / T::from_usize(lv.len()).unwrap();
                zip_map(lv, targets, |x, y| (sigmoid(x) - y) * scale)
            }),
            Op::Dice { p, targets, eps } => self.acc_with(grads, *p, || {
                let pv = self.value(*p);
                let (num, den) = dice_terms(pv.data(), targets.data(), *eps);
                let two = lit::<T>(2.0);
                let gi = g.item();
                targets.map(|y| -gi * (two * y * den - num) / (den * den))
            }),
        }
    }
}

// ---- helpers --------------------------------------------------------------------

fn dice_terms<T: Scalar>(p: &[T], y: &[T], eps: T) -> (T, T) {
    let inter: T = p.iter().zip(y).map(|(&a, &b)| a * b).sum();
    let sp: T = p.iter().copied().sum();
    let sy: T = y.iter().copied().sum();
    (lit::<T>(2.0) * inter + eps, sp + sy + eps)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_fwd<T: Scalar>(x: T) -> T {
    let half = lit::<T>(0.5);
    let u = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = lit::<T>(0.5);
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Softmax over the unmasked entries; masked entries become exactly zero.
/// A row with every key masked is all zeros.
fn masked_softmax<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let Some(mask) = mask else {
        softmax_in_place(row);
        return;
    };
    let m = row
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(&v, _)| v)
        .fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut s = T::zero();
    for (v, &keep) in row.iter_mut().zip(mask) {
        *v = if keep { (*v - m).exp() } else { T::zero() };
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    off: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    fn new(data: &'a [T], off: usize, rs: usize, cs: usize) -> Self {
        Self { data, off, rs, cs }
    }
}

/// `c[off..] = alpha * a b + beta * c` for an `m x n` block of `c` with row
/// stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm_view<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    c_off: usize,
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |v: &View<'_, T>, r: usize, cc: usize| v.off + (r - 1) * v.rs + (cc - 1) * v.cs;
    assert!(k == 0 || last(&a, m, k) < a.data.len(), "gemm view a out of bounds");
    assert!(k == 0 || last(&b, k, n) < b.data.len(), "gemm view b out of bounds");
    assert!(c_off + (m - 1) * rsc + n <= c.len(), "gemm view c out of bounds");
    // SAFETY: bounds asserted above; `c` is uniquely borrowed and distinct
    // from the shared inputs.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            1,
        );
    }
}
