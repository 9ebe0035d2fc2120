//! InfoNCE over cosine similarities: the group-level loss across a batch and
//! the semantic-consistency loss against batch class prototypes.

use std::collections::BTreeSet;

use crate::data::BACKGROUND;
use crate::error::{Error, Result};
use crate::tensor::{kernels, ContrastLabels, Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastConfig {
    /// Temperature: scores are `exp(cos / tau)`.
    pub tau: f64,
    /// Affinity threshold for positive pixel sets.
    pub theta: f64,
    /// Keep the positive's own term in the denominator. Off gives the
    /// negatives-only denominator, which can go below zero.
    pub include_positive: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            theta: 0.5,
            include_positive: true,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 10.0) {
            return Err(Error::Config(format!("tau {} outside (0, 10]", self.tau)));
        }
        if !(self.theta > -1.0 && self.theta < 1.0) {
            return Err(Error::Config(format!(
                "theta {} outside (-1, 1)",
                self.theta
            )));
        }
        Ok(())
    }

    pub fn inv_tau<T: Real>(&self) -> T {
        T::lit(1.0 / self.tau)
    }
}

/// A scalar loss node and how many anchors contributed to it. A loss with
/// no contributing anchor is the constant 0 and sets `degenerate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerm {
    pub value: Var,
    pub active: usize,
    pub degenerate: bool,
}

impl LossTerm {
    fn zero<T: Real>(graph: &mut Graph<T>) -> Self {
        Self {
            value: graph.constant(Tensor::scalar(T::zero())),
            active: 0,
            degenerate: true,
        }
    }
}

/// `exp(cos(u, v) / tau)`.
pub fn contrast_score<T: Real>(u: &[T], v: &[T], tau: T) -> Result<T> {
    Ok((kernels::cosine_similarity(u, v)? / tau).exp())
}

fn nonzero_rows<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    for r in 0..t.rows() {
        if t.row(r).iter().all(|x| x.is_zero()) {
            return Err(Error::Degenerate(op));
        }
    }
    Ok(())
}

/// Cosine scores between the rows of `a` and the rows of `b`.
/// `cos(a_i, b_j)` for every row pair.
pub fn cosine_scores<T: Real>(graph: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let na = graph.normalize_rows(a)?;
    let nb = graph.normalize_rows(b)?;
    graph.matmul_nt(na, nb)
}

fn as_row<T: Real>(graph: &mut Graph<T>, v: Var) -> Result<Var> {
    let n = graph.value(v).len();
    graph.reshape(v, &[1, n])
}

/// `-ln(φ(a,p) / (φ(a,p)·[include_positive] + Σ_n φ(a,n)))` with
/// `φ(u,v) = exp(cos(u,v)/τ)`.
pub fn info_nce<T: Real>(
    graph: &mut Graph<T>,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    cfg: &ContrastConfig,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Contract(
            "info_nce needs at least one negative".into(),
        ));
    }
    let a = as_row(graph, anchor)?;
    let mut rows = vec![as_row(graph, positive)?];
    for &n in negatives {
        rows.push(as_row(graph, n)?);
    }
    let cands = graph.concat_rows(&rows)?;
    nonzero_rows("info_nce", graph.value(a))?;
    nonzero_rows("info_nce", graph.value(cands))?;
    let scores = cosine_scores(graph, a, cands)?;
    let cols = (0..rows.len()).map(|j| Some(u32::from(j > 0))).collect();
    let labels = ContrastLabels {
        rows: vec![0],
        cols,
        exclude_diagonal: false,
    };
    let per_row = graph.contrast_rows(scores, labels, cfg.inv_tau(), cfg.include_positive)?;
    graph.sum(per_row)
}

/// One image's groups: `[G, D]` prototypes and the class of each group.
#[derive(Debug, Clone)]
pub struct GroupBatchItem {
    pub prototypes: Var,
    pub classes: Vec<u16>,
}

/// Group contrast across a batch. Every group is an anchor; groups of the
/// same class (itself excluded) are positives and groups of other classes
/// are negatives, in any image. Anchors lacking either are skipped. The
/// loss averages over each image's active anchors, then over images.
pub fn pgcl_loss<T: Real>(
    graph: &mut Graph<T>,
    batch: &[GroupBatchItem],
    cfg: &ContrastConfig,
) -> Result<LossTerm> {
    let mut classes = Vec::new();
    let mut owner = Vec::new();
    for (i, item) in batch.iter().enumerate() {
        let g = graph.value(item.prototypes).rows();
        if item.classes.len() != g {
            return Err(Error::shape(
                "pgcl_loss",
                &[item.classes.len()],
                graph.value(item.prototypes).dims(),
            ));
        }
        classes.extend(item.classes.iter().map(|&c| u32::from(c)));
        owner.extend(std::iter::repeat_n(i, g));
    }
    if classes.is_empty() {
        return Ok(LossTerm::zero(graph));
    }
    let labels = ContrastLabels {
        cols: classes.iter().copied().map(Some).collect(),
        rows: classes,
        exclude_diagonal: true,
    };
    let active = labels.active_rows();
    let mut per_image = vec![0usize; batch.len()];
    for (&a, &i) in active.iter().zip(&owner) {
        per_image[i] += usize::from(a);
    }
    let images = per_image.iter().filter(|&&n| n > 0).count();
    if images == 0 {
        return Ok(LossTerm::zero(graph));
    }
    let weights: Vec<T> = active
        .iter()
        .zip(&owner)
        .map(|(&a, &i)| {
            if a {
                T::one() / (T::count(per_image[i]) * T::count(images))
            } else {
                T::zero()
            }
        })
        .collect();
    let parts: Vec<Var> = batch.iter().map(|b| b.prototypes).collect();
    let all = graph.concat_rows(&parts)?;
    let scores = cosine_scores(graph, all, all)?;
    let per_row = graph.contrast_rows(scores, labels, cfg.inv_tau(), cfg.include_positive)?;
    Ok(LossTerm {
        value: graph.weighted_sum(per_row, weights)?,
        active: active.iter().filter(|&&a| a).count(),
        degenerate: false,
    })
}

/// Masked mean batch features per pseudo class: row `k` of `prototypes` is
/// the mean of every pixel labelled `k` in the batch, or zero when none is.
#[derive(Debug, Clone)]
pub struct ClassPrototypeBank {
    pub prototypes: Var,
    pub present: Vec<bool>,
}

impl ClassPrototypeBank {
    /// `features[i]` is image `i`'s `[V_i, D]` node and `labels[i]` its
    /// per-pixel pseudo labels.
    pub fn build<T: Real>(
        graph: &mut Graph<T>,
        features: &[Var],
        labels: &[&[u16]],
        classes: usize,
    ) -> Result<Self> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::shape(
                "class_bank",
                &[features.len()],
                &[labels.len()],
            ));
        }
        let mut flat: Vec<u16> = Vec::new();
        for (&f, l) in features.iter().zip(labels) {
            if graph.value(f).rows() != l.len() {
                return Err(Error::shape(
                    "class_bank",
                    graph.value(f).dims(),
                    &[l.len()],
                ));
            }
            flat.extend_from_slice(l);
        }
        if let Some(&bad) = flat.iter().find(|&&c| c as usize >= classes) {
            return Err(Error::Contract(format!(
                "pseudo label {bad} outside 0..{classes}"
            )));
        }
        let mut counts = vec![0usize; classes];
        for &c in &flat {
            counts[c as usize] += 1;
        }
        let n = flat.len();
        let avg = Tensor::from_fn(&[classes, n], |i| {
            let (k, p) = (i / n, i % n);
            if flat[p] as usize == k {
                T::one() / T::count(counts[k])
            } else {
                T::zero()
            }
        });
        let stacked = graph.concat_rows(features)?;
        let avg = graph.constant(avg);
        Ok(Self {
            prototypes: graph.matmul(avg, stacked)?,
            present: counts.iter().map(|&c| c > 0).collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.present.len()
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

/// Allowed classes for one image's similarity rows: `present ∪ {0}`,
/// further restricted to `available` when given.
pub fn class_mask(
    classes: usize,
    present: &BTreeSet<u16>,
    available: Option<&[bool]>,
) -> Vec<bool> {
    (0..classes)
        .map(|k| {
            let listed = k == BACKGROUND as usize || present.contains(&(k as u16));
            listed && available.is_none_or(|a| a[k])
        })
        .collect()
}

/// `M[u, k] = softmax_k(cos(p_u, w_k) / τ)` over unmasked `k`; masked
/// entries are exactly 0.
pub fn similarity_matrix<T: Real>(
    graph: &mut Graph<T>,
    prototypes: Var,
    class_emb: Var,
    mask: &[bool],
    tau: f64,
) -> Result<Var> {
    let (pv, wv) = (graph.value(prototypes), graph.value(class_emb));
    if pv.cols() != wv.cols() {
        return Err(Error::shape("similarity_matrix", pv.dims(), wv.dims()));
    }
    if mask.len() != wv.rows() {
        return Err(Error::shape("similarity_matrix", wv.dims(), &[mask.len()]));
    }
    let g = pv.rows();
    let cos = cosine_scores(graph, prototypes, class_emb)?;
    let logits = graph.scale(cos, T::lit(1.0 / tau))?;
    let full = mask.iter().copied().cycle().take(g * mask.len()).collect();
    graph.masked_softmax_rows(logits, full)
}

/// `S = M · R`: each group's expected class prototype.
pub fn semantic_consistency<T: Real>(
    graph: &mut Graph<T>,
    m: Var,
    mask: &[bool],
    bank: &ClassPrototypeBank,
) -> Result<Var> {
    if mask.len() != bank.classes() {
        return Err(Error::shape(
            "semantic_consistency",
            &[mask.len()],
            &[bank.classes()],
        ));
    }
    if let Some(k) = (0..mask.len()).find(|&k| mask[k] && !bank.present[k]) {
        return Err(Error::Contract(format!(
            "class {k} is unmasked but has no prototype"
        )));
    }
    graph.matmul(m, bank.prototypes)
}

/// Each row of `s` is an anchor whose positive is the bank prototype of its
/// group class; the other bank prototypes are negatives. Flat mean over the
/// active rows.
pub fn sgcl_loss<T: Real>(
    graph: &mut Graph<T>,
    s: Var,
    classes: &[u16],
    bank: &ClassPrototypeBank,
    cfg: &ContrastConfig,
) -> Result<LossTerm> {
    let rows = graph.value(s).rows();
    if classes.len() != rows {
        return Err(Error::shape(
            "sgcl_loss",
            graph.value(s).dims(),
            &[classes.len()],
        ));
    }
    if bank.present_count() < 2 {
        return Ok(LossTerm::zero(graph));
    }
    let labels = ContrastLabels {
        rows: classes.iter().map(|&c| u32::from(c)).collect(),
        cols: (0..bank.classes())
            .map(|k| bank.present[k].then_some(k as u32))
            .collect(),
        exclude_diagonal: false,
    };
    let active = labels.active_rows();
    let n = active.iter().filter(|&&a| a).count();
    if n == 0 {
        return Ok(LossTerm::zero(graph));
    }
    let weights = active
        .iter()
        .map(|&a| if a { T::one() / T::count(n) } else { T::zero() })
        .collect();
    let scores = cosine_scores(graph, s, bank.prototypes)?;
    let per_row = graph.contrast_rows(scores, labels, cfg.inv_tau(), cfg.include_positive)?;
    Ok(LossTerm {
        value: graph.weighted_sum(per_row, weights)?,
        active: n,
        degenerate: false,
    })
}
