//! Reverse-mode differentiation over a per-step tape.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's. The backward sweep walks indices in reverse, which is a
//! reverse topological order that visits each node once. A [`Graph`] is built
//! for one optimizer step and dropped afterwards.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels;
use super::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which columns are positives and negatives for each anchor row of a
/// contrast op.
///
/// Column `j` is a positive for row `i` when both carry the same class, and a
/// negative when both carry classes that differ. Columns labelled `None`
/// take no part. With `exclude_diagonal`, rows and columns index the same
/// items and an item is never its own positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastLabels {
    pub rows: Vec<u32>,
    pub cols: Vec<Option<u32>>,
    pub exclude_diagonal: bool,
}

impl ContrastLabels {
    fn is_pos(&self, i: usize, j: usize) -> bool {
        self.cols[j] == Some(self.rows[i]) && !(self.exclude_diagonal && i == j)
    }

    fn is_neg(&self, i: usize, j: usize) -> bool {
        matches!(self.cols[j], Some(c) if c != self.rows[i])
    }

    /// Rows with at least one positive and one negative.
    pub fn active_rows(&self) -> Vec<bool> {
        (0..self.rows.len())
            .map(|i| {
                let c = self.cols.len();
                (0..c).any(|j| self.is_pos(i, j)) && (0..c).any(|j| self.is_neg(i, j))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Im2ColGeom {
    height: usize,
    width: usize,
    channels: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Sum(Var),
    MeanRows(Var),
    Softmax(Var),
    NormalizeRows(Var),
    CenterRows(Var),
    Gather(Var, Arc<[usize]>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Im2Col(Var, Im2ColGeom),
    Contrast {
        scores: Var,
        labels: Arc<ContrastLabels>,
        inv_tau: T,
        include_positive: bool,
    },
    BceWithLogits(Var, Arc<[T]>),
    WeightedSum(Var, Arc<[T]>),
}

impl<T> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::Softmax(_) => "softmax_rows",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::CenterRows(_) => "center_rows",
            Op::Gather(..) => "gather",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Reshape(_) => "reshape",
            Op::Im2Col(..) => "im2col",
            Op::Contrast { .. } => "contrast_rows",
            Op::BceWithLogits(..) => "bce_with_logits",
            Op::WeightedSum(..) => "weighted_sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of differentiable operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(Error::NonFinite(op.tag()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return Err(Error::shape(op, da, db));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_dims(op.tag(), a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(x.dims().to_vec(), data)?;
        self.push(value, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    // ── Forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = kernels::transpose(self.value(a))?;
        self.push(value, Op::Transpose(a), &[a])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    /// Adds the vector `b` (length = column count) to every row of `m`.
    pub fn add_row(&mut self, m: Var, b: Var) -> Result<Var> {
        let (mv, bv) = (self.value(m), self.value(b));
        let (r, c) = mv.matrix_dims("add_row")?;
        if bv.len() != c {
            return Err(Error::shape("add_row", mv.dims(), bv.dims()));
        }
        let bd = bv.data();
        let data = mv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % c])
            .collect();
        let value = Tensor::new(vec![r, c], data)?;
        self.push(value, Op::AddRow(m, b), &[m, b])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Ln(a), |x| x.ln())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Column means of a matrix: `[r×c] -> [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.matrix_dims("mean_rows")?;
        let inv = T::one() / T::count(r);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(av.row(i)) {
                *o = *o + x;
            }
        }
        for o in &mut out {
            *o = *o * inv;
        }
        let value = Tensor::new(vec![c], out)?;
        self.push(value, Op::MeanRows(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = kernels::softmax_rows(self.value(a), None)?;
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Row softmax restricted to entries where `mask` is true; the rest are 0.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let value = kernels::softmax_rows(self.value(a), Some(&mask))?;
        self.push(value, Op::Softmax(a), &[a])
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (value, _) = kernels::normalize_rows(self.value(a))?;
        self.push(value, Op::NormalizeRows(a), &[a])
    }

    pub fn center_rows(&mut self, a: Var) -> Result<Var> {
        let value = kernels::center_rows(self.value(a))?;
        self.push(value, Op::CenterRows(a), &[a])
    }

    /// Picks flat elements of `a` into a tensor of shape `dims`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, dims: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= av.len()) {
            return Err(Error::shape("gather", av.dims(), &[bad]));
        }
        let data = index.iter().map(|&i| av.data()[i]).collect();
        let value = Tensor::new(dims.to_vec(), data)?;
        self.push(value, Op::Gather(a, index.into()), &[a])
    }

    /// Selects whole rows of a matrix.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).matrix_dims("select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("select_rows", &[r, c], &[bad]));
        }
        let index = rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();
        self.gather(a, index, &[rows.len(), c])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = av.matrix_dims("concat_cols")?;
        let (rb, cb) = bv.matrix_dims("concat_cols")?;
        if ra != rb {
            return Err(Error::shape("concat_cols", av.dims(), bv.dims()));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let value = Tensor::new(vec![ra, ca + cb], data)?;
        self.push(value, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, c) = self.value(first).matrix_dims("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let (r, pc) = pv.matrix_dims("concat_rows")?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(first).dims(),
                    pv.dims(),
                ));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(dims)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Unfolds 3×3 patches (zero padding 1) of an `[h, w, c]` image into
    /// `[h'·w', 9c]` rows, column order `(ky, kx, channel)`.
    pub fn im2col3x3(&mut self, a: Var, stride: usize) -> Result<Var> {
        let av = self.value(a);
        let &[height, width, channels] = av.dims() else {
            return Err(Error::shape("im2col", av.dims(), &[0, 0, 0]));
        };
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let geom = Im2ColGeom {
            height,
            width,
            channels,
            stride,
            out_h: height.div_ceil(stride),
            out_w: width.div_ceil(stride),
        };
        let cols = 9 * channels;
        let mut data = vec![T::zero(); geom.out_h * geom.out_w * cols];
        for_each_patch_tap(&geom, |dst, src| data[dst] = av.data()[src]);
        let value = Tensor::new(vec![geom.out_h * geom.out_w, cols], data)?;
        self.push(value, Op::Im2Col(a, geom), &[a])
    }

    /// Per-row InfoNCE over a score matrix.
    ///
    /// Row `i` yields the mean over its positives `p` of
    /// `-ln(e^{s_p} / (e^{s_p}·[include_positive] + Σ_n e^{s_n}))` with
    /// `s = score · inv_tau`. Rows without a positive or without a negative
    /// yield 0; [`ContrastLabels::active_rows`] reports which rows count.
    pub fn contrast_rows(
        &mut self,
        scores: Var,
        labels: ContrastLabels,
        inv_tau: T,
        include_positive: bool,
    ) -> Result<Var> {
        let sv = self.value(scores);
        let (r, c) = sv.matrix_dims("contrast_rows")?;
        if labels.rows.len() != r || labels.cols.len() != c {
            return Err(Error::shape(
                "contrast_rows",
                sv.dims(),
                &[labels.rows.len(), labels.cols.len()],
            ));
        }
        let mut out = vec![T::zero(); r];
        for (i, o) in out.iter_mut().enumerate() {
            if let Some(row) =
                ContrastRow::evaluate(sv.row(i), &labels, i, inv_tau, include_positive)
            {
                *o = row.loss;
            }
        }
        let value = Tensor::new(vec![r], out)?;
        let op = Op::Contrast {
            scores,
            labels: Arc::new(labels),
            inv_tau,
            include_positive,
        };
        self.push(value, op, &[scores])
    }

    /// Elementwise logistic cross-entropy `-[t ln σ(z) + (1-t) ln(1-σ(z))]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", lv.dims(), &[targets.len()]));
        }
        let data = lv
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::new(lv.dims().to_vec(), data)?;
        self.push(value, Op::BceWithLogits(logits, targets.into()), &[logits])
    }

    /// `Σ w_i a_i` as a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<T>) -> Result<Var> {
        let av = self.value(a);
        if av.len() != weights.len() {
            return Err(Error::shape("weighted_sum", av.dims(), &[weights.len()]));
        }
        let total = av.data().iter().zip(&weights).map(|(&x, &w)| x * w).sum();
        let value = Tensor::scalar(total);
        self.push(value, Op::WeightedSum(a, weights.into()), &[a])
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Gradients of the scalar `root` with respect to every node that
    /// requires one. Contributions from multiple consumers are summed.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got dims {:?}",
                rv.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|d| Tensor::new(n.value.dims().to_vec(), d))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        let as_tensor = |dims: &[usize]| Tensor::new(dims.to_vec(), g.to_vec());

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gt = as_tensor(node.value.dims())?;
                if wants(*a) {
                    let ga = kernels::matmul_nt(&gt, val(*b))?;
                    acc(*a, &mut |s| add_into(s, ga.data()));
                }
                if wants(*b) {
                    let gb = kernels::matmul(&kernels::transpose(val(*a))?, &gt)?;
                    acc(*b, &mut |s| add_into(s, gb.data()));
                }
            }
            Op::Transpose(a) => {
                let gt = kernels::transpose(&as_tensor(node.value.dims())?)?;
                acc(*a, &mut |s| add_into(s, gt.data()));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (x, &d) in s.iter_mut().zip(g) {
                        *x = *x - d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |s| {
                    for ((x, &d), &y) in s.iter_mut().zip(g).zip(bv) {
                        *x = *x + d * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, &d), &y) in s.iter_mut().zip(g).zip(av) {
                        *x = *x + d * y;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                for (x, &d) in s.iter_mut().zip(g) {
                    *x = *x + d * *k;
                }
            }),
            Op::AddRow(m, b) => {
                acc(*m, &mut |s| add_into(s, g));
                let c = node.value.cols();
                acc(*b, &mut |s| {
                    for (i, &d) in g.iter().enumerate() {
                        s[i % c] = s[i % c] + d;
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |s| {
                for ((x, &d), &y) in s.iter_mut().zip(g).zip(node.value.data()) {
                    *x = *x + d * y;
                }
            }),
            Op::Ln(a) => acc(*a, &mut |s| {
                for ((x, &d), &y) in s.iter_mut().zip(g).zip(val(*a).data()) {
                    *x = *x + d / y;
                }
            }),
            Op::Relu(a) => acc(*a, &mut |s| {
                for ((x, &d), &y) in s.iter_mut().zip(g).zip(val(*a).data()) {
                    if y > T::zero() {
                        *x = *x + d;
                    }
                }
            }),
            Op::Sum(a) => acc(*a, &mut |s| {
                for x in s.iter_mut() {
                    *x = *x + g[0];
                }
            }),
            Op::MeanRows(a) => {
                let r = val(*a).rows();
                let inv = T::one() / T::count(r);
                let c = g.len();
                acc(*a, &mut |s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        *x = *x + g[i % c] * inv;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |s| {
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let inner = kernels::dot(yr, gr);
                        for j in 0..c {
                            s[i * c + j] = s[i * c + j] + yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let (y, x) = (&node.value, val(*a));
                let c = y.cols();
                acc(*a, &mut |s| {
                    for i in 0..y.rows() {
                        let n = x.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
                        if n == T::zero() {
                            continue;
                        }
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let inner = kernels::dot(yr, gr);
                        for j in 0..c {
                            s[i * c + j] = s[i * c + j] + (gr[j] - yr[j] * inner) / n;
                        }
                    }
                });
            }
            Op::CenterRows(a) => {
                let c = node.value.cols();
                let inv = T::one() / T::count(c);
                acc(*a, &mut |s| {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(c)) {
                        let mean = grow.iter().copied().sum::<T>() * inv;
                        for (x, &d) in srow.iter_mut().zip(grow) {
                            *x = *x + d - mean;
                        }
                    }
                });
            }
            Op::Gather(a, index) => acc(*a, &mut |s| {
                for (&i, &d) in index.iter().zip(g) {
                    s[i] = s[i] + d;
                }
            }),
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let c = node.value.cols();
                acc(*a, &mut |s| {
                    for (srow, grow) in s.chunks_mut(ca).zip(g.chunks(c)) {
                        add_into(srow, &grow[..ca]);
                    }
                });
                acc(*b, &mut |s| {
                    for (srow, grow) in s.chunks_mut(c - ca).zip(g.chunks(c)) {
                        add_into(srow, &grow[ca..]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Im2Col(a, geom) => acc(*a, &mut |s| {
                for_each_patch_tap(geom, |dst, src| s[src] = s[src] + g[dst]);
            }),
            Op::Contrast {
                scores,
                labels,
                inv_tau,
                include_positive,
            } => {
                let sv = val(*scores);
                let c = sv.cols();
                acc(*scores, &mut |s| {
                    for i in 0..sv.rows() {
                        if g[i] == T::zero() {
                            continue;
                        }
                        let Some(row) = ContrastRow::evaluate(
                            sv.row(i),
                            labels,
                            i,
                            *inv_tau,
                            *include_positive,
                        ) else {
                            continue;
                        };
                        row.grad_into(&mut s[i * c..(i + 1) * c], g[i] * *inv_tau);
                    }
                });
            }
            Op::BceWithLogits(a, targets) => acc(*a, &mut |s| {
                for (((x, &d), &z), &t) in
                    s.iter_mut().zip(g).zip(val(*a).data()).zip(targets.iter())
                {
                    let sig = T::one() / (T::one() + (-z).exp());
                    *x = *x + d * (sig - t);
                }
            }),
            Op::WeightedSum(a, w) => acc(*a, &mut |s| {
                for (x, &wi) in s.iter_mut().zip(w.iter()) {
                    *x = *x + g[0] * wi;
                }
            }),
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Calls `f(dst, src)` for every in-bounds tap of every 3×3 patch.
fn for_each_patch_tap(geom: &Im2ColGeom, mut f: impl FnMut(usize, usize)) {
    let c = geom.channels;
    let cols = 9 * c;
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let row = (oy * geom.out_w + ox) * cols;
            for ky in 0..3 {
                let y = (oy * geom.stride + ky) as isize - 1;
                if y < 0 || y as usize >= geom.height {
                    continue;
                }
                for kx in 0..3 {
                    let x = (ox * geom.stride + kx) as isize - 1;
                    if x < 0 || x as usize >= geom.width {
                        continue;
                    }
                    let src = (y as usize * geom.width + x as usize) * c;
                    let dst = row + (ky * 3 + kx) * c;
                    for ch in 0..c {
                        f(dst + ch, src + ch);
                    }
                }
            }
        }
    }
}

/// Per-row state of the contrast op, shared by forward and backward.
struct ContrastRow<'a, T> {
    scaled: Vec<T>,
    labels: &'a ContrastLabels,
    row: usize,
    shift: T,
    neg_sum: T,
    positives: Vec<usize>,
    include_positive: bool,
    loss: T,
}

impl<'a, T: Real> ContrastRow<'a, T> {
    fn evaluate(
        scores: &[T],
        labels: &'a ContrastLabels,
        row: usize,
        inv_tau: T,
        include_positive: bool,
    ) -> Option<Self> {
        let scaled: Vec<T> = scores.iter().map(|&s| s * inv_tau).collect();
        let positives: Vec<usize> = (0..scores.len())
            .filter(|&j| labels.is_pos(row, j))
            .collect();
        let has_neg = (0..scores.len()).any(|j| labels.is_neg(row, j));
        if positives.is_empty() || !has_neg {
            return None;
        }
        let shift = (0..scores.len())
            .filter(|&j| labels.is_pos(row, j) || labels.is_neg(row, j))
            .map(|j| scaled[j])
            .fold(T::neg_infinity(), T::max);
        let neg_sum = (0..scores.len())
            .filter(|&j| labels.is_neg(row, j))
            .map(|j| (scaled[j] - shift).exp())
            .sum::<T>();
        let mut row_state = Self {
            scaled,
            labels,
            row,
            shift,
            neg_sum,
            positives,
            include_positive,
            loss: T::zero(),
        };
        let total = row_state
            .positives
            .iter()
            .map(|&p| {
                let sp = row_state.scaled[p] - shift;
                row_state.denominator(p).ln() - sp
            })
            .sum::<T>();
        row_state.loss = total / T::count(row_state.positives.len());
        Some(row_state)
    }

    fn denominator(&self, p: usize) -> T {
        if self.include_positive {
            (self.scaled[p] - self.shift).exp() + self.neg_sum
        } else {
            self.neg_sum
        }
    }

    /// Adds `scale · ∂loss/∂scaled` into `out`.
    fn grad_into(&self, out: &mut [T], scale: T) {
        let inv_p = T::one() / T::count(self.positives.len());
        let mut inv_den_total = T::zero();
        for &p in &self.positives {
            let den = self.denominator(p);
            inv_den_total = inv_den_total + T::one() / den;
            let mut d = -T::one();
            if self.include_positive {
                d = d + (self.scaled[p] - self.shift).exp() / den;
            }
            out[p] = out[p] + scale * inv_p * d;
        }
        for (j, o) in out.iter_mut().enumerate() {
            if self.labels.is_neg(self.row, j) {
                let e = (self.scaled[j] - self.shift).exp();
                *o = *o + scale * inv_p * e * inv_den_total;
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` for nodes that do not require a gradient (constants and
    /// anything computed only from constants).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros for a parameter the root
    /// does not depend on.
    pub fn get_or_zeros(&self, v: Var, dims: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(dims))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_graph_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn matmul_sum_gradient_matches_transpose_formula() {
        // d/dA Σ(AB) = 1·Bᵀ, d/dB Σ(AB) = Aᵀ·1
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (av, bv) = (random(&mut rng, &[2, 3]), random(&mut rng, &[3, 4]));
        let mut g = Graph::new();
        let a = g.param(av.clone());
        let b = g.param(bv.clone());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        for i in 0..2 {
            for t in 0..3 {
                let expect: f64 = (0..4).map(|j| bv.at(t, j)).sum();
                assert!((grads.get(a).unwrap().at(i, t) - expect).abs() < 1e-14);
            }
        }
        for t in 0..3 {
            for j in 0..4 {
                let expect: f64 = (0..2).map(|i| av.at(i, t)).sum();
                assert!((grads.get(b).unwrap().at(t, j) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let k = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, k).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
        assert!(grads.get(k).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 2.0]]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // y = x·x + 3x, written with x feeding two consumers.
        // Brute-force expansion: dy/dx = 2x + 3.
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.5, -0.25]]));
        let sq = g.mul(x, x).unwrap();
        let three_x = g.scale(x, 3.0).unwrap();
        let y = g.add(sq, three_x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.get(x).unwrap().data(),
            &[2.0 * 1.5 + 3.0, 2.0 * -0.25 + 3.0]
        );
    }

    #[test]
    fn every_op_passes_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 3]);
        let w = random(&mut rng, &[3, 3]);
        let report = check_graph_gradients(&[a, b, w], 1e-5, 1e-4, |g, p| {
            let m = g.matmul(p[0], p[1])?;
            let sm = g.softmax_rows(m)?;
            let mm = g.masked_softmax_rows(
                m,
                vec![true, false, true, true, true, false, true, true, true],
            )?;
            let n = g.normalize_rows(p[0])?;
            let c = g.center_rows(n)?;
            let t = g.transpose(c)?;
            let e = g.exp(p[2])?;
            let l = g.ln(e)?;
            let prod = g.mul(sm, l)?;
            let diff = g.sub(prod, mm)?;
            let bias = g.gather(p[2], vec![0, 4, 8], &[3])?;
            let shifted = g.add_row(diff, bias)?;
            let extra = w_like(g, p[2])?;
            let cat = g.concat_cols(shifted, extra)?;
            let rows = g.concat_rows(&[cat, cat])?;
            let sel = g.select_rows(rows, &[0, 4, 2])?;
            let pooled = g.mean_rows(sel)?;
            let bce = g.bce_with_logits(pooled, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0])?;
            let ws = g.weighted_sum(bce, vec![0.5, 1.0, -0.3, 0.2, 0.7, 1.1])?;
            let tt = g.matmul(t, p[2])?;
            let ts = g.sum(tt)?;
            let sq = g.mul(ts, ts)?;
            let r = g.reshape(sq, &[1, 1])?;
            let rr = g.reshape(r, &[1])?;
            let total = g.add(ws, rr)?;
            g.scale(total, 0.5)
        })
        .unwrap();
        assert!(report.pass, "{report:?}");

        fn w_like(g: &mut Graph<f64>, v: Var) -> Result<Var> {
            let sq = g.mul(v, v)?;
            g.scale(sq, 0.3)
        }
    }

    #[test]
    fn im2col_and_relu_pass_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random(&mut rng, &[5, 4, 2]);
        let k = random(&mut rng, &[18, 3]);
        for stride in [1, 2] {
            let report = check_graph_gradients(&[img.clone(), k.clone()], 1e-5, 1e-4, |g, p| {
                let cols = g.im2col3x3(p[0], stride)?;
                let y = g.matmul(cols, p[1])?;
                let r = g.relu(y)?;
                let sq = g.mul(r, y)?;
                g.sum(sq)
            })
            .unwrap();
            assert!(report.pass, "stride {stride}: {report:?}");
        }
    }

    #[test]
    fn im2col_output_extent_is_ceil() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[7, 5, 3]));
        let c = g.im2col3x3(x, 2).unwrap();
        assert_eq!(g.value(c).dims(), &[4 * 3, 27]);
    }

    #[test]
    fn contrast_rows_gradient_both_denominators() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random(&mut rng, &[4, 4]);
        let labels = ContrastLabels {
            rows: vec![0, 0, 1, 2],
            cols: vec![Some(0), Some(0), Some(1), None],
            exclude_diagonal: true,
        };
        for include in [true, false] {
            let l = labels.clone();
            let report = check_graph_gradients(&[s.clone()], 1e-5, 1e-4, move |g, p| {
                let rows = g.contrast_rows(p[0], l.clone(), 2.5, include)?;
                g.weighted_sum(rows, vec![1.0, 0.5, 2.0, 1.0])
            })
            .unwrap();
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn contrast_row_matches_direct_expansion() {
        // Row 0: positive column 1, negatives 2 and 3, column 0 is itself.
        let scores = [0.9, 0.4, -0.2, 0.1];
        let labels = ContrastLabels {
            rows: vec![7],
            cols: vec![Some(9), Some(7), Some(3), Some(4)],
            exclude_diagonal: false,
        };
        let inv_tau = 1.0 / 0.5;
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&[scores.to_vec()]));
        let out = g.contrast_rows(s, labels, inv_tau, true).unwrap();
        let phi = |x: f64| (x * inv_tau).exp();
        let negs = phi(0.9) + phi(-0.2) + phi(0.1);
        let expect = -(phi(0.4) / (phi(0.4) + negs)).ln();
        assert!((g.value(out).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn contrast_row_without_negative_is_inactive() {
        let labels = ContrastLabels {
            rows: vec![1, 1],
            cols: vec![Some(1), Some(1)],
            exclude_diagonal: true,
        };
        assert_eq!(labels.active_rows(), vec![false, false]);
        let mut g = Graph::new();
        let s = g.param(Tensor::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]));
        let out = g.contrast_rows(s, labels, 10.0, true).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0]);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1000.0f64));
        assert!(matches!(g.exp(x), Err(Error::NonFinite("exp"))));
    }
}
