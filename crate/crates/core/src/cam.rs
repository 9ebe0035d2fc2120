//! Class activation maps, pseudo labels and the image-level classification
//! loss.
//!
//! Score maps are stored pixel-major as `[height·width, K]`: row `p` holds
//! the K class scores of pixel `p`. Channel 0 is background.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::BACKGROUND;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Real, Tensor, Var};

/// Class embeddings of the base head (`[K, D]`) and of the refined head
/// (`[K, 2D]`). The two heads never share weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CamWeights<T> {
    pub base: Tensor<T>,
    pub refined: Tensor<T>,
}

impl<T: Real> CamWeights<T> {
    /// Uniform in `±scale / sqrt(fan_in)`.
    pub fn new(classes: usize, depth: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |fan_in: usize| {
            let bound = scale / (fan_in as f64).sqrt();
            Tensor::from_fn(&[classes, fan_in], |_| {
                T::lit(rng.random_range(-bound..bound))
            })
        };
        let base = init(depth);
        let refined = init(2 * depth);
        Self { base, refined }
    }

    pub fn classes(&self) -> usize {
        self.base.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamStack<T> {
    pub height: usize,
    pub width: usize,
    /// `[height·width, K]`.
    pub scores: Tensor<T>,
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    /// `[height, width]` class ids.
    pub labels: Tensor<u16>,
}

impl PseudoLabelMap {
    pub fn height(&self) -> usize {
        self.labels.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.labels.dims()[1]
    }

    pub fn ids(&self) -> &[u16] {
        self.labels.data()
    }

    /// Nearest-neighbour replication by an integer factor, clipped to
    /// `(height, width)`.
    pub fn upsample(&self, factor: usize, height: usize, width: usize) -> PseudoLabelMap {
        let w0 = self.width();
        let ids = self.ids();
        let labels = Tensor::from_fn(&[height, width], |i| {
            let (y, x) = (i / width, i % width);
            ids[(y / factor) * w0 + x / factor]
        });
        PseudoLabelMap { labels }
    }
}

fn check_depth(
    op: &'static str,
    features: &Tensor<impl Real>,
    weights: &Tensor<impl Real>,
) -> Result<()> {
    if features.cols() != weights.cols() {
        return Err(Error::shape(op, features.dims(), weights.dims()));
    }
    Ok(())
}

/// Per-pixel scores `⟨f_p, w_k⟩` (a 1×1 class-aware convolution).
pub fn cam_forward<T: Real>(graph: &mut Graph<T>, features: Var, weights: Var) -> Result<Var> {
    check_depth("cam_forward", graph.value(features), graph.value(weights))?;
    graph.matmul_nt(features, weights)
}

/// The refined head over `[f, f̃]`; its input depth is twice the base depth.
pub fn refined_cam<T: Real>(graph: &mut Graph<T>, concat: Var, weights: Var) -> Result<Var> {
    check_depth("refined_cam", graph.value(concat), graph.value(weights))?;
    graph.matmul_nt(concat, weights)
}

/// Value-only [`cam_forward`].
pub fn cam_scores<T: Real>(features: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    check_depth("cam_forward", features, weights)?;
    kernels::matmul_nt(features, weights)
}

/// Argmax over `present ∪ {background}` per pixel; ties go to the smallest id.
pub fn pseudo_labels<T: Real>(
    scores: &Tensor<T>,
    present: &BTreeSet<u16>,
    height: usize,
    width: usize,
) -> Result<PseudoLabelMap> {
    let (v, k) = scores.matrix_dims("pseudo_labels")?;
    if v != height * width {
        return Err(Error::shape(
            "pseudo_labels",
            scores.dims(),
            &[height, width],
        ));
    }
    let mut allowed: Vec<usize> = present
        .iter()
        .map(|&c| c as usize)
        .filter(|&c| c < k)
        .collect();
    if !allowed.contains(&(BACKGROUND as usize)) {
        allowed.insert(0, BACKGROUND as usize);
    }
    let ids = (0..v)
        .map(|p| {
            let row = scores.row(p);
            let mut best = allowed[0];
            for &c in &allowed[1..] {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    Ok(PseudoLabelMap {
        labels: Tensor::new(vec![height, width], ids)?,
    })
}

/// Labels from a refined stack; same contract as [`pseudo_labels`].
pub fn update_pseudo_labels<T: Real>(
    refined: &CamStack<T>,
    present: &BTreeSet<u16>,
) -> Result<PseudoLabelMap> {
    pseudo_labels(&refined.scores, present, refined.height, refined.width)
}

/// Global average pooling of each class channel: `[V, K] -> [K]`.
pub fn classification_logits<T: Real>(graph: &mut Graph<T>, scores: Var) -> Result<Var> {
    graph.mean_rows(scores)
}

/// Targets and weights for [`ce_loss`]: classes `1..K` only.
fn ce_targets<T: Real>(classes: usize, labels: &BTreeSet<u16>) -> (Vec<T>, Vec<T>) {
    let w = T::one() / T::count(classes - 1);
    let targets = (0..classes)
        .map(|c| {
            if labels.contains(&(c as u16)) {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let weights = (0..classes)
        .map(|c| {
            if c == BACKGROUND as usize {
                T::zero()
            } else {
                w
            }
        })
        .collect();
    (targets, weights)
}

/// Multi-label logistic cross-entropy averaged over the foreground classes.
pub fn ce_loss<T: Real>(graph: &mut Graph<T>, logits: Var, labels: &BTreeSet<u16>) -> Result<Var> {
    let classes = graph.value(logits).len();
    if classes < 2 {
        return Err(Error::shape("ce_loss", graph.value(logits).dims(), &[2]));
    }
    let (targets, weights) = ce_targets(classes, labels);
    let per_class = graph.bce_with_logits(logits, targets)?;
    graph.weighted_sum(per_class, weights)
}
