//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the ids of its inputs. [`Graph::backward`] walks the tape in reverse
//! and returns gradients only for parameter leaves marked trainable. Nodes
//! that cannot reach a trainable leaf are skipped entirely, so a frozen
//! encoder costs a forward pass and nothing more.
//!
//! One graph is built per utterance. Batches are handled by building many
//! graphs (possibly on different threads) and summing their gradients.

use std::borrow::Cow;
use std::collections::BTreeSet;

use crate::params::{Gradients, ParamStore};
use crate::tensor::Mat;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which parameter leaves receive gradients.
#[derive(Clone, Copy, Debug)]
pub enum Trainable<'a> {
    All,
    Nothing,
    Only(&'a BTreeSet<String>),
}

impl Trainable<'_> {
    fn accepts(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Only(set) => set.contains(name),
        }
    }
}

enum Op<'a> {
    Constant,
    Param(&'a str),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    RelPosBias {
        scores: Var,
        table: Var,
        clip: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    StackFrames {
        x: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Mat,
    },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op<'a>,
    needs_grad: bool,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    trainable: Trainable<'a>,
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore, trainable: Trainable<'a>) -> Self {
        Self {
            params,
            trainable,
            nodes: Vec::with_capacity(256),
        }
    }

    /// Inference graph: nothing is differentiated.
    pub fn inference(params: &'a ParamStore) -> Self {
        Self::new(params, Trainable::Nothing)
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op<'a>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Mat, op: Op<'a>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    /// Leaf bound to a stored parameter. Panics if the name is unknown;
    /// model loaders validate completeness before any graph is built.
    pub fn param(&mut self, name: &str) -> Var {
        let (key, value) = self
            .params
            .get_key_value(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let needs_grad = self.trainable.accepts(key);
        self.push(Cow::Borrowed(value), Op::Param(key.as_str()), needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push_owned(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push_owned(out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push_owned(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let mut out = self.value(a).clone();
        let n = out.cols();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push_owned(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Mat::from_vec(x.rows(), x.cols(), data);
        self.push_owned(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push_owned(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push_owned(out, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push_owned(out, Op::Gelu(a), &[a])
    }

    /// SiLU / swish: `x · σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * sigmoid(v));
        self.push_owned(out, Op::Silu(a), &[a])
    }

    /// Gated linear unit over the column halves: `left ⊙ σ(right)`.
    pub fn glu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.cols() % 2 == 0, "glu needs an even width");
        let half = x.cols() / 2;
        let mut out = Mat::zeros(x.rows(), half);
        for r in 0..x.rows() {
            let row = x.row(r);
            for c in 0..half {
                out.set(r, c, row[c] * sigmoid(row[half + c]));
            }
        }
        self.push_owned(out, Op::Glu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked for `j > i`.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let limit = if causal { (r + 1).min(cols) } else { cols };
            let row = &x.row(r)[..limit];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let o = out.row_mut(r);
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                o[c] = e;
                z += e;
            }
            for v in &mut o[..limit] {
                *v /= z;
            }
        }
        self.push_owned(out, Op::Softmax(a), &[a])
    }

    /// Adds a learned bias indexed by the clipped relative offset `j - i`.
    /// `table` is `1 × (2·clip + 1)`.
    pub fn rel_pos_bias(&mut self, scores: Var, table: Var, clip: usize) -> Var {
        let t = self.value(table);
        assert_eq!(t.shape(), (1, 2 * clip + 1), "relative bias table shape");
        let mut out = self.value(scores).clone();
        let (rows, cols) = out.shape();
        for i in 0..rows {
            for j in 0..cols {
                let idx = rel_index(i, j, clip);
                let v = out.get(i, j) + t.data()[idx];
                out.set(i, j, v);
            }
        }
        self.push_owned(out, Op::RelPosBias { scores, table, clip }, &[scores, table])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "column slice out of range");
        let mut out = Mat::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push_owned(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        self.push_owned(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Mat::from_vec(rows, cols, data);
        self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Concatenates each run of `k` consecutive rows into one row, zero
    /// padding the final group: `T × d` becomes `ceil(T/k) × k·d`.
    pub fn stack_frames(&mut self, x: Var, k: usize) -> Var {
        assert!(k >= 1);
        let xv = self.value(x);
        let (t, d) = xv.shape();
        let s = t.div_ceil(k);
        let mut data = vec![0.0; s * k * d];
        data[..t * d].copy_from_slice(xv.data());
        let out = Mat::from_vec(s, k * d, data);
        self.push_owned(out, Op::StackFrames { x }, &[x])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        self.push_owned(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Unfolds windows of `kernel` rows taken every `stride` rows into single
    /// rows of width `kernel · cols`. Positions outside the input read zero.
    /// Output length is `ceil(T / stride)` with `pad_left` leading pad rows.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad_left: usize) -> Var {
        let xv = self.value(x);
        let (t, c) = xv.shape();
        let out_len = t.div_ceil(stride);
        let mut out = Mat::zeros(out_len, kernel * c);
        for o in 0..out_len {
            let row = out.row_mut(o);
            for p in 0..kernel {
                let src = (o * stride + p) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t {
                    row[p * c..(p + 1) * c].copy_from_slice(xv.row(src as usize));
                }
            }
        }
        self.push_owned(
            out,
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad_left,
            },
            &[x],
        )
    }

    /// Per-channel convolution along time with symmetric zero padding.
    /// `w` is `K × C` with odd `K`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (t, c) = xv.shape();
        let k = wv.rows();
        assert_eq!(wv.cols(), c, "depthwise kernel width");
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        let pad = (k - 1) / 2;
        let mut out = Mat::zeros(t, c);
        for ti in 0..t {
            let o = out.row_mut(ti);
            for p in 0..k {
                let src = ti as isize + p as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let xr = xv.row(src as usize);
                let wr = wv.row(p);
                for ch in 0..c {
                    o[ch] += wr[ch] * xr[ch];
                }
            }
        }
        self.push_owned(out, Op::DepthwiseConv { x, w }, &[x, w])
    }

    /// Summed token cross-entropy over rows with a label; `1 × 1`.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "one label slot per logit row");
        let (rows, cols) = lv.shape();
        let mut probs = Mat::zeros(rows, cols);
        let mut total = 0.0;
        for (r, label) in labels.iter().enumerate() {
            let Some(label) = *label else { continue };
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[label];
            let p = probs.row_mut(r);
            for (pi, v) in p.iter_mut().zip(row) {
                *pi = (v - lse).exp();
            }
        }
        self.push_owned(
            Mat::from_vec(1, 1, vec![total]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_owned(Mat::from_vec(1, 1, vec![s]), Op::Sum(x), &[x])
    }

    /// Back-propagates from `root` (seeded with ones) and returns gradients
    /// for trainable parameter leaves.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        let (rr, rc) = self.value(root).shape();
        grads[root.0] = Some(Mat::filled(rr, rc, 1.0));
        let mut out = Gradients::new();

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => out.accumulate(name, &gy),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = gy.matmul_bt(self.value(*b));
                        acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul_at(&gy);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.needs(*a) {
                        let ga = gy.matmul(self.value(*b));
                        acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = gy.matmul_at(self.value(*a));
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        acc(&mut grads, *b, gy.clone());
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, gy);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let mut g = Mat::zeros(1, gy.cols());
                        for r in 0..gy.rows() {
                            for (o, v) in g.data_mut().iter_mut().zip(gy.row(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *row, g);
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, gy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let g = zip_map(&gy, self.value(*b), |g, y| g * y);
                        acc(&mut grads, *a, g);
                    }
                    if self.needs(*b) {
                        let g = zip_map(&gy, self.value(*a), |g, x| g * x);
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, gy.scale(*s)),
                Op::Relu(a) => {
                    let g = zip_map(&gy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let g = zip_map(&gy, self.value(*a), |g, x| g * gelu_grad(x));
                    acc(&mut grads, *a, g);
                }
                Op::Silu(a) => {
                    let g = zip_map(&gy, self.value(*a), |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Glu(a) => {
                    let x = self.value(*a);
                    let half = x.cols() / 2;
                    let mut g = Mat::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let (row, gr) = (x.row(r), gy.row(r));
                        let out = g.row_mut(r);
                        for c in 0..half {
                            let s = sigmoid(row[half + c]);
                            out[c] = gr[c] * s;
                            out[half + c] = gr[c] * row[c] * s * (1.0 - s);
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    if self.needs(*gamma) {
                        let mut g = Mat::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                g.data_mut()[c] += gy.get(r, c) * xhat.get(r, c);
                            }
                        }
                        acc(&mut grads, *gamma, g);
                    }
                    if self.needs(*beta) {
                        let mut g = Mat::zeros(1, cols);
                        for r in 0..rows {
                            for (o, v) in g.data_mut().iter_mut().zip(gy.row(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *beta, g);
                    }
                    if self.needs(*x) {
                        let gamma_v = self.value(*gamma).data();
                        let mut gx = Mat::zeros(rows, cols);
                        let n = cols as f64;
                        for r in 0..rows {
                            let (gr, hr) = (gy.row(r), xhat.row(r));
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for c in 0..cols {
                                let d = gr[c] * gamma_v[c];
                                mean_d += d;
                                mean_dh += d * hr[c];
                            }
                            mean_d /= n;
                            mean_dh /= n;
                            let o = gx.row_mut(r);
                            for c in 0..cols {
                                let d = gr[c] * gamma_v[c];
                                o[c] = inv_std[r] * (d - mean_d - hr[c] * mean_dh);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut g = Mat::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), gy.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        let o = g.row_mut(r);
                        for c in 0..pr.len() {
                            o[c] = pr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::RelPosBias {
                    scores,
                    table,
                    clip,
                } => {
                    if self.needs(*table) {
                        let mut g = Mat::zeros(1, 2 * clip + 1);
                        for i in 0..gy.rows() {
                            for j in 0..gy.cols() {
                                g.data_mut()[rel_index(i, j, *clip)] += gy.get(i, j);
                            }
                        }
                        acc(&mut grads, *table, g);
                    }
                    if self.needs(*scores) {
                        acc(&mut grads, *scores, gy);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut g = Mat::zeros(xv.rows(), xv.cols());
                    let len = gy.cols();
                    for r in 0..gy.rows() {
                        g.row_mut(r)[*start..start + len].copy_from_slice(gy.row(r));
                    }
                    acc(&mut grads, *x, g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.needs(*p) {
                            let mut g = Mat::zeros(gy.rows(), w);
                            for r in 0..gy.rows() {
                                g.row_mut(r).copy_from_slice(&gy.row(r)[off..off + w]);
                            }
                            acc(&mut grads, *p, g);
                        }
                        off += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut g = Mat::zeros(xv.rows(), xv.cols());
                    let c = xv.cols();
                    g.data_mut()[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                    acc(&mut grads, *x, g);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        if self.needs(*p) {
                            acc(&mut grads, *p, gy.slice_rows(off, r));
                        }
                        off += r;
                    }
                }
                Op::StackFrames { x, .. } => {
                    let (t, d) = self.value(*x).shape();
                    let g = Mat::from_vec(t, d, gy.data()[..t * d].to_vec());
                    acc(&mut grads, *x, g);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut g = Mat::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in g.row_mut(id).iter_mut().zip(gy.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, g);
                }
                Op::Im2Col {
                    x,
                    kernel,
                    stride,
                    pad_left,
                } => {
                    let (t, c) = self.value(*x).shape();
                    let mut g = Mat::zeros(t, c);
                    for o in 0..gy.rows() {
                        let row = gy.row(o);
                        for p in 0..*kernel {
                            let src = (o * stride + p) as isize - *pad_left as isize;
                            if src >= 0 && (src as usize) < t {
                                for (dst, v) in
                                    g.row_mut(src as usize).iter_mut().zip(&row[p * c..(p + 1) * c])
                                {
                                    *dst += v;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::DepthwiseConv { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (t, c) = xv.shape();
                    let k = wv.rows();
                    let pad = (k - 1) / 2;
                    let mut gx = Mat::zeros(t, c);
                    let mut gw = Mat::zeros(k, c);
                    for ti in 0..t {
                        let gr = gy.row(ti);
                        for p in 0..k {
                            let src = ti as isize + p as isize - pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let src = src as usize;
                            for ch in 0..c {
                                gx.data_mut()[src * c + ch] += wv.get(p, ch) * gr[ch];
                                gw.data_mut()[p * c + ch] += xv.get(src, ch) * gr[ch];
                            }
                        }
                    }
                    if self.needs(*x) {
                        acc(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        acc(&mut grads, *w, gw);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let s = gy.data()[0];
                    let mut g = Mat::zeros(probs.rows(), probs.cols());
                    for (r, label) in labels.iter().enumerate() {
                        let Some(label) = *label else { continue };
                        let o = g.row_mut(r);
                        for (oi, p) in o.iter_mut().zip(probs.row(r)) {
                            *oi = s * p;
                        }
                        o[label] -= s;
                    }
                    acc(&mut grads, *logits, g);
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(&mut grads, *x, Mat::filled(r, c, gy.data()[0]));
                }
            }
        }
        out
    }

    #[inline]
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

#[inline]
fn rel_index(i: usize, j: usize, clip: usize) -> usize {
    let d = (j as isize - i as isize).clamp(-(clip as isize), clip as isize);
    (d + clip as isize) as usize
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds a scalar loss from the single parameter `p`, then compares
    /// the analytic gradient with central differences entry by entry.
    fn check(shape: (usize, usize), build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert("p", Mat::randn(shape.0, shape.1, 0.8, &mut rng));
        let loss_of = |s: &ParamStore| {
            let mut g = Graph::inference(s);
            let p = g.param("p");
            let l = build(&mut g, p);
            g.value(l).data()[0]
        };
        let mut g = Graph::new(&store, Trainable::All);
        let p = g.param("p");
        let l = build(&mut g, p);
        let grads = g.backward(l);
        let analytic = grads.get("p").expect("gradient for p").clone();
        let h = 1e-5;
        for i in 0..analytic.len() {
            let mut plus = store.clone();
            plus.get_mut("p").unwrap().data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut("p").unwrap().data_mut()[i] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "entry {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn weights(g: &mut Graph, r: usize, c: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.constant(Mat::randn(r, c, 1.0, &mut rng))
    }

    #[test]
    fn matmul_family_gradients() {
        check((3, 4), |g, p| {
            let w = weights(g, 4, 5, 1);
            let y = g.matmul(p, w);
            let z = weights(g, 2, 5, 2);
            let q = g.matmul_bt(y, z);
            let m = weights(g, 3, 2, 3);
            let prod = g.mul(q, m);
            g.sum(prod)
        });
    }

    #[test]
    fn activation_gradients() {
        check((3, 6), |g, p| {
            let a = g.gelu(p);
            let b = g.silu(a);
            let c = g.relu(b);
            let d = g.glu(p);
            let s1 = g.sum(c);
            let s2 = g.sum(d);
            g.add(s1, s2)
        });
    }

    #[test]
    fn layer_norm_gradients_through_all_inputs() {
        check((4, 5), |g, p| {
            let gamma = g.slice_rows(p, 0, 1);
            let beta = g.slice_rows(p, 1, 1);
            let x = g.slice_rows(p, 2, 2);
            let y = g.layer_norm(x, gamma, beta);
            let w = weights(g, 2, 5, 4);
            let m = g.mul(y, w);
            g.sum(m)
        });
    }

    #[test]
    fn softmax_and_rel_bias_gradients() {
        check((1, 5), |g, p| {
            let s = weights(g, 4, 4, 5);
            let biased = g.rel_pos_bias(s, p, 2);
            let causal = g.softmax(biased, true);
            let full = g.softmax(biased, false);
            let w = weights(g, 4, 4, 6);
            let a = g.mul(causal, w);
            let b = g.mul(full, w);
            let sa = g.sum(a);
            let sb = g.sum(b);
            g.add(sa, sb)
        });
    }

    #[test]
    fn structural_op_gradients() {
        check((5, 3), |g, p| {
            let st = g.stack_frames(p, 2);
            let w = weights(g, 3, 6, 7);
            let a = g.mul(st, w);
            let left = g.slice_cols(p, 0, 2);
            let right = g.slice_cols(p, 1, 2);
            let cat = g.concat_cols(&[left, right]);
            let top = g.slice_rows(cat, 0, 2);
            let rows = g.concat_rows(&[top, cat]);
            let w2 = weights(g, 7, 4, 8);
            let b = g.mul(rows, w2);
            let sa = g.sum(a);
            let sb = g.sum(b);
            g.add(sa, sb)
        });
    }

    #[test]
    fn convolution_gradients() {
        check((7, 3), |g, p| {
            let cols = g.im2col(p, 3, 2, 0);
            let w = weights(g, 9, 2, 9);
            let y = g.matmul(cols, w);
            let dw = weights(g, 3, 3, 10);
            let z = g.depthwise_conv(p, dw);
            let w2 = weights(g, 7, 3, 11);
            let zz = g.mul(z, w2);
            let sy = g.sum(y);
            let sz = g.sum(zz);
            g.add(sy, sz)
        });
        check((3, 4), |g, p| {
            let x = weights(g, 6, 4, 12);
            let z = g.depthwise_conv(x, p);
            let w2 = weights(g, 6, 4, 13);
            let zz = g.mul(z, w2);
            g.sum(zz)
        });
    }

    #[test]
    fn gather_and_cross_entropy_gradients() {
        check((6, 4), |g, p| {
            let rows = g.gather(p, &[1, 3, 1, 5]);
            let w = weights(g, 4, 7, 14);
            let logits = g.matmul(rows, w);
            g.cross_entropy_sum(logits, &[Some(2), None, Some(6), Some(0)])
        });
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Mat::filled(2, 2, 1.0));
        store.insert("b", Mat::filled(2, 2, 2.0));
        let only: BTreeSet<String> = ["a".to_string()].into();
        let mut g = Graph::new(&store, Trainable::Only(&only));
        let a = g.param("a");
        let b = g.param("b");
        let y = g.matmul(a, b);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get("a").is_some());
        assert!(grads.get("b").is_none());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let logits = g.constant(Mat::zeros(3, 17));
        let l = g.cross_entropy_sum(logits, &[Some(0), Some(5), Some(16)]);
        let per_token = g.value(l).data()[0] / 3.0;
        assert!((per_token - (17f64).ln()).abs() < 1e-12);
    }
}
