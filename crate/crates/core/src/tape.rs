//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar (1×1) node returns the gradient of that
//! scalar with respect to every node that requires one. Nodes created with
//! [`Graph::input`] are constants; nodes created with [`Graph::param`] are
//! differentiable leaves.
//!
//! Attention is a fused operation over *segments*: a batch of independent
//! sequences is packed row-wise into one matrix and each query range only
//! attends to its paired key range. This keeps batched forward passes down
//! to a handful of large matrix products.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A query range and the key/value range it attends to.
pub type SegmentPair = (Range<usize>, Range<usize>);

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, Range<usize>),
    SliceRows(Var, Range<usize>),
    GatherRows(Var, Vec<Option<usize>>),
    SegmentMax(Var, Vec<Vec<usize>>),
    SegmentMean(Var, Vec<Range<usize>>),
    ShiftRows(Var, Vec<Option<usize>>),
    LayerNorm(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pairs: Vec<SegmentPair>,
        probs: Vec<Vec<Mat>>,
    },
    DualAttention {
        q: Var,
        k1: Var,
        k2: Var,
        v: Var,
        segments: Vec<Range<usize>>,
        first: Vec<Mat>,
        second: Vec<Mat>,
    },
    MeanRows(Var),
    SumAll(Var),
    RowNorms(Var),
    InfoNceRows(Var, Mat),
    DotConst(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass, recorded for differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the output (or is a constant).
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

/// Gradient of the pre-softmax scores given the probabilities and the
/// gradient with respect to them.
fn softmax_backward(p: &Mat, dp: &Mat) -> Mat {
    let mut ds = dp.clone();
    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot: f64 = row.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
        Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d = pv * (*d - dot));
    }
    ds
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, r: Range<usize>) -> Var {
        let value = self.value(a).slice(s![.., r.clone()]).to_owned();
        self.push(value, Op::SliceCols(a, r), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, r: Range<usize>) -> Var {
        let value = self.value(a).slice(s![r.clone(), ..]).to_owned();
        self.push(value, Op::SliceRows(a, r), &[a])
    }

    /// Row `i` of the output is row `index[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((index.len(), src.ncols()));
        for (i, ix) in index.iter().enumerate() {
            if let Some(j) = ix {
                value.row_mut(i).assign(&src.row(*j));
            }
        }
        self.push(value, Op::GatherRows(a, index), &[a])
    }

    /// Column-wise maximum over each row range; one output row per segment.
    /// Ties resolve to the earliest row.
    pub fn segment_max(&mut self, a: Var, segments: &[Range<usize>]) -> Var {
        let src = self.value(a);
        let cols = src.ncols();
        let mut value = Mat::zeros((segments.len(), cols));
        let mut argmax = Vec::with_capacity(segments.len());
        for (si, seg) in segments.iter().enumerate() {
            assert!(!seg.is_empty(), "segment_max over an empty segment");
            let mut best = vec![seg.start; cols];
            for r in seg.clone() {
                for c in 0..cols {
                    if src[[r, c]] > src[[best[c], c]] {
                        best[c] = r;
                    }
                }
            }
            for c in 0..cols {
                value[[si, c]] = src[[best[c], c]];
            }
            argmax.push(best);
        }
        self.push(value, Op::SegmentMax(a, argmax), &[a])
    }

    pub fn segment_mean(&mut self, a: Var, segments: &[Range<usize>]) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((segments.len(), src.ncols()));
        for (si, seg) in segments.iter().enumerate() {
            assert!(!seg.is_empty(), "segment_mean over an empty segment");
            let mean = src.slice(s![seg.clone(), ..]).mean_axis(Axis(0)).unwrap();
            value.row_mut(si).assign(&mean);
        }
        self.push(value, Op::SegmentMean(a, segments.to_vec()), &[a])
    }

    /// Row `i` of the output is row `i + offset` of `a` when that row lies in
    /// the same segment, zeros otherwise (zero padding per segment).
    pub fn shift_rows(&mut self, a: Var, offset: isize, segments: &[Range<usize>]) -> Var {
        let rows = self.value(a).nrows();
        let mut index = vec![None; rows];
        for seg in segments {
            for i in seg.clone() {
                let j = i as isize + offset;
                if j >= seg.start as isize && j < seg.end as isize {
                    index[i] = Some(j as usize);
                }
            }
        }
        let src = self.value(a);
        let mut value = Mat::zeros(src.dim());
        for (i, ix) in index.iter().enumerate() {
            if let Some(j) = ix {
                value.row_mut(i).assign(&src.row(*j));
            }
        }
        self.push(value, Op::ShiftRows(a, index), &[a])
    }

    /// Per-row standardization (zero mean, unit variance), no affine part.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        let mut inv_std = Vec::with_capacity(src.nrows());
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) * is);
            inv_std.push(is);
        }
        self.push(value, Op::LayerNorm(a, inv_std), &[a])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        let mut norms = Vec::with_capacity(src.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            assert!(n > 0.0, "l2_normalize_rows: zero row");
            row.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        self.push(value, Op::L2NormalizeRows(a, norms), &[a])
    }

    /// Scaled dot-product attention with `heads` heads. Each pair maps a
    /// range of query rows to the key/value rows it may attend to; query rows
    /// not covered by any pair produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pairs: Vec<SegmentPair>,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qm.ncols(), km.ncols(), "attention: query/key width mismatch");
        assert!(heads >= 1 && qm.ncols() % heads == 0 && vm.ncols() % heads == 0);
        let dq = qm.ncols() / heads;
        let dv = vm.ncols() / heads;
        let scale = 1.0 / (dq as f64).sqrt();
        let mut out = Mat::zeros((qm.nrows(), vm.ncols()));
        let mut probs = Vec::with_capacity(pairs.len());
        for (qr, kr) in &pairs {
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let qs = qm.slice(s![qr.clone(), h * dq..(h + 1) * dq]);
                let ks = km.slice(s![kr.clone(), h * dq..(h + 1) * dq]);
                let vs = vm.slice(s![kr.clone(), h * dv..(h + 1) * dv]);
                let mut p = qs.dot(&ks.t()) * scale;
                softmax_rows_inplace(&mut p);
                out.slice_mut(s![qr.clone(), h * dv..(h + 1) * dv])
                    .assign(&p.dot(&vs));
                per_head.push(p);
            }
            probs.push(per_head);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                pairs,
                probs,
            },
            &[q, k, v],
        )
    }

    /// `(softmax(q k1ᵀ/√d) ⊙ softmax(q k2ᵀ/√d)) · v` within each segment; the
    /// elementwise product is used as the weight map without renormalization.
    pub fn dual_attention(
        &mut self,
        q: Var,
        k1: Var,
        k2: Var,
        v: Var,
        segments: Vec<Range<usize>>,
    ) -> Var {
        let (qm, k1m, k2m, vm) = (
            self.value(q),
            self.value(k1),
            self.value(k2),
            self.value(v),
        );
        let scale = 1.0 / (qm.ncols() as f64).sqrt();
        let mut out = Mat::zeros((qm.nrows(), vm.ncols()));
        let mut first = Vec::with_capacity(segments.len());
        let mut second = Vec::with_capacity(segments.len());
        for seg in &segments {
            let qs = qm.slice(s![seg.clone(), ..]);
            let mut a = qs.dot(&k1m.slice(s![seg.clone(), ..]).t()) * scale;
            let mut b = qs.dot(&k2m.slice(s![seg.clone(), ..]).t()) * scale;
            softmax_rows_inplace(&mut a);
            softmax_rows_inplace(&mut b);
            let w = &a * &b;
            out.slice_mut(s![seg.clone(), ..])
                .assign(&w.dot(&vm.slice(s![seg.clone(), ..])));
            first.push(a);
            second.push(b);
        }
        self.push(
            out,
            Op::DualAttention {
                q,
                k1,
                k2,
                v,
                segments,
                first,
                second,
            },
            &[q, k1, k2, v],
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows over zero rows")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of each row, as an N×1 column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Mat::from_shape_fn((src.nrows(), 1), |(i, _)| {
            src.row(i).dot(&src.row(i)).sqrt()
        });
        self.push(value, Op::RowNorms(a), &[a])
    }

    /// Mean over rows `i` of `logsumexp_j s[i, j] − s[i, i]` for a square
    /// score matrix: the softmax cross-entropy with the diagonal as target.
    pub fn info_nce_rows(&mut self, s: Var) -> Var {
        let src = self.value(s);
        let n = src.nrows();
        assert_eq!(n, src.ncols(), "info_nce_rows needs a square matrix");
        let mut probs = src.clone();
        softmax_rows_inplace(&mut probs);
        let mut total = 0.0;
        for i in 0..n {
            let row = src.row(i);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - src[[i, i]];
        }
        let value = Mat::from_elem((1, 1), total / n as f64);
        self.push(value, Op::InfoNceRows(s, probs), &[s])
    }

    /// `sum(a ⊙ c)` for a constant `c`.
    pub fn dot_const(&mut self, a: Var, c: Mat) -> Var {
        let value = Mat::from_elem((1, 1), (self.value(a) * &c).sum());
        self.push(value, Op::DotConst(a, c), &[a])
    }

    /// Attention probabilities recorded by an attention node, indexed by
    /// `[pair][head]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<Mat>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// The two softmax factor maps of a dual-attention node, per segment.
    pub fn dual_attention_maps(&self, v: Var) -> Option<(&[Mat], &[Mat])> {
        match &self.nodes[v.0].op {
            Op::DualAttention { first, second, .. } => Some((first, second)),
            _ => None,
        }
    }

    /// Reverse pass from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.t().to_owned());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], -g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*b));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*row) {
                    accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*row));
                }
                if self.wants(*row) {
                    let d = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], d);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g * *c);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(out)
                        .for_each(|d, &y| if y <= 0.0 { *d = 0.0 });
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], g.slice(s![.., at..at + w]).to_owned());
                    }
                    at += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], g.slice(s![at..at + h, ..]).to_owned());
                    }
                    at += h;
                }
            }
            Op::SliceCols(a, r) => {
                if self.wants(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., r.clone()]).assign(g);
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::SliceRows(a, r) => {
                if self.wants(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![r.clone(), ..]).assign(g);
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::GatherRows(a, index) | Op::ShiftRows(a, index) => {
                if self.wants(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (i, ix) in index.iter().enumerate() {
                        if let Some(j) = ix {
                            let mut row = d.row_mut(*j);
                            row += &g.row(i);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::SegmentMax(a, argmax) => {
                if self.wants(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (si, best) in argmax.iter().enumerate() {
                        for (c, &r) in best.iter().enumerate() {
                            d[[r, c]] += g[[si, c]];
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::SegmentMean(a, segments) => {
                if self.wants(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (si, seg) in segments.iter().enumerate() {
                        let share = &g.row(si) / seg.len() as f64;
                        for r in seg.clone() {
                            d.row_mut(r).assign(&share);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::LayerNorm(a, inv_std) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    for ((mut drow, yrow), is) in
                        d.rows_mut().into_iter().zip(out.rows()).zip(inv_std)
                    {
                        let n = drow.len() as f64;
                        let mean_g = drow.sum() / n;
                        let mean_gy = drow.dot(&yrow) / n;
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|dv, &y| *dv = is * (*dv - mean_g - y * mean_gy));
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    for ((mut drow, yrow), n) in d.rows_mut().into_iter().zip(out.rows()).zip(norms)
                    {
                        let proj = drow.dot(&yrow);
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|dv, &y| *dv = (*dv - y * proj) / n);
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                pairs,
                probs,
            } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let dq_w = qm.ncols() / heads;
                let dv_w = vm.ncols() / heads;
                let scale = 1.0 / (dq_w as f64).sqrt();
                let mut gq = Mat::zeros(qm.dim());
                let mut gk = Mat::zeros(km.dim());
                let mut gv = Mat::zeros(vm.dim());
                for ((qr, kr), per_head) in pairs.iter().zip(probs) {
                    for (h, p) in per_head.iter().enumerate() {
                        let qcols = h * dq_w..(h + 1) * dq_w;
                        let vcols = h * dv_w..(h + 1) * dv_w;
                        let go = g.slice(s![qr.clone(), vcols.clone()]);
                        let vs = vm.slice(s![kr.clone(), vcols.clone()]);
                        let mut gvs = gv.slice_mut(s![kr.clone(), vcols.clone()]);
                        gvs += &p.t().dot(&go);
                        let dp = go.dot(&vs.t());
                        let ds = softmax_backward(p, &dp) * scale;
                        let ks = km.slice(s![kr.clone(), qcols.clone()]);
                        let qs = qm.slice(s![qr.clone(), qcols.clone()]);
                        let mut gqs = gq.slice_mut(s![qr.clone(), qcols.clone()]);
                        gqs += &ds.dot(&ks);
                        let mut gks = gk.slice_mut(s![kr.clone(), qcols.clone()]);
                        gks += &ds.t().dot(&qs);
                    }
                }
                if self.wants(*q) {
                    accumulate(&mut grads[q.0], gq);
                }
                if self.wants(*k) {
                    accumulate(&mut grads[k.0], gk);
                }
                if self.wants(*v) {
                    accumulate(&mut grads[v.0], gv);
                }
            }
            Op::DualAttention {
                q,
                k1,
                k2,
                v,
                segments,
                first,
                second,
            } => {
                let (qm, k1m, k2m, vm) = (
                    self.value(*q),
                    self.value(*k1),
                    self.value(*k2),
                    self.value(*v),
                );
                let scale = 1.0 / (qm.ncols() as f64).sqrt();
                let mut gq = Mat::zeros(qm.dim());
                let mut gk1 = Mat::zeros(k1m.dim());
                let mut gk2 = Mat::zeros(k2m.dim());
                let mut gv = Mat::zeros(vm.dim());
                for ((seg, a), b) in segments.iter().zip(first).zip(second) {
                    let go = g.slice(s![seg.clone(), ..]);
                    let w = a * b;
                    let mut gvs = gv.slice_mut(s![seg.clone(), ..]);
                    gvs += &w.t().dot(&go);
                    let dw = go.dot(&vm.slice(s![seg.clone(), ..]).t());
                    let ds1 = softmax_backward(a, &(&dw * b)) * scale;
                    let ds2 = softmax_backward(b, &(&dw * a)) * scale;
                    let qs = qm.slice(s![seg.clone(), ..]);
                    let mut gqs = gq.slice_mut(s![seg.clone(), ..]);
                    gqs += &ds1.dot(&k1m.slice(s![seg.clone(), ..]));
                    gqs += &ds2.dot(&k2m.slice(s![seg.clone(), ..]));
                    let mut g1 = gk1.slice_mut(s![seg.clone(), ..]);
                    g1 += &ds1.t().dot(&qs);
                    let mut g2 = gk2.slice_mut(s![seg.clone(), ..]);
                    g2 += &ds2.t().dot(&qs);
                }
                if self.wants(*q) {
                    accumulate(&mut grads[q.0], gq);
                }
                if self.wants(*k1) {
                    accumulate(&mut grads[k1.0], gk1);
                }
                if self.wants(*k2) {
                    accumulate(&mut grads[k2.0], gk2);
                }
                if self.wants(*v) {
                    accumulate(&mut grads[v.0], gv);
                }
            }
            Op::MeanRows(a) => {
                if self.wants(*a) {
                    let rows = self.value(*a).nrows();
                    let share = g / rows as f64;
                    let d = share
                        .broadcast((rows, g.ncols()))
                        .expect("mean_rows broadcast")
                        .to_owned();
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    let d = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::RowNorms(a) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let mut d = Mat::zeros(src.dim());
                    for i in 0..src.nrows() {
                        let n = out[[i, 0]];
                        if n > 0.0 {
                            let gi = g[[i, 0]] / n;
                            d.row_mut(i).assign(&(&src.row(i) * gi));
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::InfoNceRows(a, probs) => {
                if self.wants(*a) {
                    let n = probs.nrows();
                    let mut d = probs.clone();
                    for i in 0..n {
                        d[[i, i]] -= 1.0;
                    }
                    d *= g[[0, 0]] / n as f64;
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::DotConst(a, c) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], c * g[[0, 0]]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_leaf_gradients, GradCheck};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn check<F>(inputs: Vec<Mat>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let report = check_leaf_gradients(&inputs, &f, GradCheck::default());
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn matmul_and_elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 3, 2)];
        check(inputs, |g, v| {
            let m = g.matmul(v[0], v[1]);
            let t = g.tanh(m);
            let p = g.mul(t, v[2]);
            let s = g.sigmoid(p);
            let r = g.sub(s, v[2]);
            let c = Mat::from_shape_fn((3, 2), |(i, j)| (i + 2 * j) as f64 * 0.3 - 0.4);
            g.dot_const(r, c)
        });
    }

    #[test]
    fn attention_grads_with_segments_and_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(&mut rng, 5, 4), random(&mut rng, 6, 4), random(&mut rng, 6, 6)];
        check(inputs, |g, v| {
            let a = g.attention(v[0], v[1], v[2], 2, vec![(0..2, 0..4), (2..5, 4..6)]);
            let c = Mat::from_shape_fn((5, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
            g.dot_const(a, c)
        });
    }

    #[test]
    fn dual_attention_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<Mat> = (0..4).map(|_| random(&mut rng, 5, 3)).collect();
        check(inputs, |g, v| {
            let a = g.dual_attention(v[0], v[1], v[2], v[3], vec![0..3, 3..5]);
            let c = Mat::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.5);
            g.dot_const(a, c)
        });
    }

    #[test]
    fn norm_and_pooling_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random(&mut rng, 6, 5), random(&mut rng, 1, 5)];
        check(inputs, |g, v| {
            let ln = g.layer_norm(v[0]);
            let m = g.mul_row(ln, v[1]);
            let a = g.add_row(m, v[1]);
            let sh = g.shift_rows(a, -1, &[0..2, 2..6]);
            let mx = g.segment_max(sh, &[0..3, 3..6]);
            let mean = g.segment_mean(a, &[0..2, 2..6]);
            let both = g.concat_rows(&[mx, mean]);
            let n = g.l2_normalize_rows(both);
            let rn = g.row_norms(a);
            let c = Mat::from_shape_fn((4, 5), |(i, j)| ((i + j) % 3) as f64 - 1.0);
            let x = g.dot_const(n, c);
            let y = g.sum_all(rn);
            g.add(x, y)
        });
    }

    #[test]
    fn info_nce_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![random(&mut rng, 4, 3), random(&mut rng, 4, 3)];
        check(inputs, |g, v| {
            let s = g.matmul_t(v[0], v[1]);
            let st = g.transpose(s);
            let a = g.info_nce_rows(s);
            let b = g.info_nce_rows(st);
            g.add(a, b)
        });
    }

    #[test]
    fn gather_and_slices_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![random(&mut rng, 4, 6)];
        check(inputs, |g, v| {
            let gathered = g.gather_rows(v[0], vec![Some(2), None, Some(2), Some(0)]);
            let left = g.slice_cols(gathered, 0..3);
            let right = g.slice_cols(gathered, 3..6);
            let both = g.concat_cols(&[right, left]);
            let top = g.slice_rows(both, 1..3);
            let mean = g.mean_rows(top);
            let r = g.relu(mean);
            let sc = g.scale(r, 2.5);
            let c = Mat::from_shape_fn((1, 6), |(_, j)| j as f64 - 2.5);
            g.dot_const(sc, c)
        });
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut g = Graph::new();
        let q = g.input(array![[1.0, 0.0], [0.5, -2.0], [3.0, 1.0]]);
        let k = g.input(array![[0.0, 1.0], [1.0, 1.0]]);
        let v = g.input(array![[1.0], [2.0]]);
        let out = g.attention(q, k, v, 1, vec![(0..3, 0..2)]);
        for p in &g.attention_probs(out).unwrap()[0] {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.input(array![[1.0, 2.0]]);
        let p = g.param(array![[3.0, 4.0]]);
        let m = g.mul(c, p);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &array![[1.0, 2.0]]);
    }
}
