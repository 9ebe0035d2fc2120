//! Pixel affinity, context aggregation and context-guided k-means grouping.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::BACKGROUND;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Real, Tensor, Var};

/// Largest pixel count accepted by [`pixel_affinity`]; the matrix is `V²`.
pub const MAX_PIXELS: usize = 4096;

pub const MAX_KMEANS_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-4;

/// Pearson correlations between every pair of pixel embeddings: `[V, V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix<T> {
    pub a: Tensor<T>,
}

/// Per-pixel context `[V, D]` and its per-group means `[G, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBundle<T> {
    pub per_pixel: Tensor<T>,
    pub per_group: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSet<T> {
    /// Group index of every pixel.
    pub assignment: Vec<usize>,
    /// `[G, D]` feature-space member means.
    pub prototypes: Tensor<T>,
    /// Within-cluster SSE on the augmented vectors after each iteration.
    pub sse_history: Vec<T>,
}

impl<T: Real> GroupSet<T> {
    pub fn groups(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups()];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&p| self.assignment[p] == group)
            .collect()
    }

    /// `[G, V]` with `1/|u|` where pixel `v` belongs to group `u`, so that
    /// `A·X` is the per-group mean of the rows of `X`.
    pub fn averaging_matrix(&self) -> Tensor<T> {
        let v = self.assignment.len();
        let inv: Vec<T> = self
            .sizes()
            .iter()
            .map(|&n| {
                if n == 0 {
                    T::zero()
                } else {
                    T::one() / T::count(n)
                }
            })
            .collect();
        Tensor::from_fn(&[self.groups(), v], |i| {
            let (u, p) = (i / v, i % v);
            if self.assignment[p] == u {
                inv[u]
            } else {
                T::zero()
            }
        })
    }

    pub fn assignment_tensor(&self) -> Result<Tensor<u16>> {
        let ids = self
            .assignment
            .iter()
            .map(|&g| {
                u16::try_from(g)
                    .map_err(|_| Error::Contract(format!("group index {g} exceeds u16")))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![ids.len()], ids)
    }
}

/// Rows of `f` centred and scaled to unit norm; pixels whose centred norm is
/// negligible against their raw norm are flagged degenerate and left at zero.
fn standardized_rows<T: Real>(f: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
    let centred = kernels::center_rows(f)?;
    let d = f.cols();
    let tol = T::epsilon().sqrt();
    let degenerate: Vec<bool> = (0..f.rows())
        .map(|p| {
            let raw = kernels::dot(f.row(p), f.row(p)).sqrt();
            let c = kernels::dot(centred.row(p), centred.row(p)).sqrt();
            c <= tol * raw.max(T::min_positive_value())
        })
        .collect();
    let mut data = centred.into_data();
    for (p, _) in degenerate.iter().enumerate().filter(|(_, &deg)| deg) {
        data[p * d..(p + 1) * d].fill(T::zero());
    }
    let (unit, _) = kernels::normalize_rows(&Tensor::new(f.dims().to_vec(), data)?)?;
    Ok((unit, degenerate))
}

fn check_pixels(op: &'static str, f: &Tensor<impl Real>) -> Result<(usize, usize)> {
    let (v, d) = f.matrix_dims(op)?;
    if d < 2 {
        return Err(Error::Config(format!("{op}: feature depth {d} < 2")));
    }
    if v > MAX_PIXELS {
        return Err(Error::Config(format!(
            "{op}: {v} pixels exceed the cap of {MAX_PIXELS}"
        )));
    }
    Ok((v, d))
}

/// Zero-variance pixels get affinity 0 to every other pixel and 1 to
/// themselves.
pub fn pixel_affinity<T: Real>(f: &Tensor<T>) -> Result<AffinityMatrix<T>> {
    let (v, _) = check_pixels("pixel_affinity", f)?;
    let (unit, _) = standardized_rows(f)?;
    let g = kernels::gram(&unit)?;
    let mut data = g.into_data();
    for (i, x) in data.iter_mut().enumerate() {
        *x = if i / v == i % v {
            T::one()
        } else {
            x.max(-T::one()).min(T::one())
        };
    }
    Ok(AffinityMatrix {
        a: Tensor::new(vec![v, v], data)?,
    })
}

/// `softmax_rows(a) · f`.
pub fn pixel_context<T: Real>(f: &Tensor<T>, a: &AffinityMatrix<T>) -> Result<Tensor<T>> {
    let (v, _) = f.matrix_dims("pixel_context")?;
    if a.a.dims() != [v, v] {
        return Err(Error::shape("pixel_context", a.a.dims(), f.dims()));
    }
    kernels::matmul(&kernels::softmax_rows(&a.a, None)?, f)
}

/// Differentiable [`pixel_affinity`] followed by [`pixel_context`], on the
/// tape. Values agree with the plain path up to the clamp.
pub fn pixel_context_on<T: Real>(graph: &mut Graph<T>, f: Var) -> Result<Var> {
    let fv = graph.value(f).clone();
    let (v, d) = check_pixels("pixel_context", &fv)?;
    let (_, degenerate) = standardized_rows(&fv)?;
    let keep = graph.constant(Tensor::from_fn(&[v, d], |i| {
        if degenerate[i / d] {
            T::zero()
        } else {
            T::one()
        }
    }));
    let diag = graph.constant(Tensor::from_fn(&[v, v], |i| {
        if i / v == i % v && degenerate[i / v] {
            T::one()
        } else {
            T::zero()
        }
    }));
    let c = graph.center_rows(f)?;
    let c = graph.mul(c, keep)?;
    let unit = graph.normalize_rows(c)?;
    let a = graph.matmul_nt(unit, unit)?;
    let a = graph.add(a, diag)?;
    let w = graph.softmax_rows(a)?;
    graph.matmul(w, f)
}

/// `{v : a[u, v] ≥ θ}`; always contains `u`.
pub fn positive_set<T: Real>(a: &AffinityMatrix<T>, u: usize, theta: T) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> =
        a.a.row(u)
            .iter()
            .enumerate()
            .filter(|(_, &x)| x >= theta)
            .map(|(v, _)| v)
            .collect();
    set.insert(u);
    set
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<T: Real>(point: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, sq_dist(point, &centroids[0]));
    for (k, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seeds<T: Real>(points: &[Vec<T>], g: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let v = points.len();
    let mut centroids = vec![points[rng.random_range(0..v)].clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &centroids[0]).to_f64().unwrap_or(0.0))
        .collect();
    while centroids.len() < g {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = v - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..v)
        };
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]).to_f64().unwrap_or(0.0));
        }
    }
    centroids
}

fn centroids_of<T: Real>(
    points: &[Vec<T>],
    assignment: &[usize],
    g: usize,
) -> (Vec<Vec<T>>, Vec<usize>) {
    let dim = points[0].len();
    let mut sums = vec![vec![T::zero(); dim]; g];
    let mut counts = vec![0usize; g];
    for (p, &k) in points.iter().zip(assignment) {
        counts[k] += 1;
        for (s, &x) in sums[k].iter_mut().zip(p) {
            *s = *s + x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            let inv = T::one() / T::count(n);
            s.iter_mut().for_each(|x| *x = *x * inv);
        }
    }
    (sums, counts)
}

/// Moves the farthest member of the largest cluster into each empty one.
fn repair_empty<T: Real>(
    points: &[Vec<T>],
    assignment: &mut [usize],
    g: usize,
) -> (Vec<Vec<T>>, Vec<usize>) {
    loop {
        let (centroids, counts) = centroids_of(points, assignment, g);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return (centroids, counts);
        };
        let largest = (0..g)
            .max_by_key(|&k| (counts[k], std::cmp::Reverse(k)))
            .unwrap_or(0);
        let mut far = (usize::MAX, T::neg_infinity());
        for (p, &k) in assignment.iter().enumerate() {
            if k == largest {
                let d = sq_dist(&points[p], &centroids[largest]);
                if d > far.1 {
                    far = (p, d);
                }
            }
        }
        assignment[far.0] = empty;
    }
}

fn sse<T: Real>(points: &[Vec<T>], assignment: &[usize], centroids: &[Vec<T>]) -> T {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &k)| sq_dist(p, &centroids[k]))
        .sum()
}

/// k-means over `[f_u ; ctx_u]` with k-means++ seeding.
pub fn cluster_pixels<T: Real>(
    f: &Tensor<T>,
    ctx: &Tensor<T>,
    groups: usize,
    seed: u64,
) -> Result<GroupSet<T>> {
    let (v, d) = f.matrix_dims("cluster_pixels")?;
    if ctx.dims() != f.dims() {
        return Err(Error::shape("cluster_pixels", f.dims(), ctx.dims()));
    }
    if groups == 0 || groups > v {
        return Err(Error::Config(format!(
            "group count {groups} outside 1..={v}"
        )));
    }
    let points: Vec<Vec<T>> = (0..v).map(|p| [f.row(p), ctx.row(p)].concat()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(&points, groups, &mut rng);
    let mut assignment = vec![0; v];
    let mut history = Vec::new();
    let tol = T::lit(KMEANS_TOL);
    for _ in 0..MAX_KMEANS_ITERS {
        for (p, a) in points.iter().zip(assignment.iter_mut()) {
            *a = nearest(p, &centroids).0;
        }
        let (next, _) = repair_empty(&points, &mut assignment, groups);
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(T::zero(), T::max);
        centroids = next;
        history.push(sse(&points, &assignment, &centroids));
        if shift < tol {
            break;
        }
    }
    let mut set = GroupSet {
        assignment,
        prototypes: Tensor::zeros(&[groups, d]),
        sse_history: history,
    };
    set.prototypes = kernels::matmul(&set.averaging_matrix(), f)?;
    Ok(set)
}

/// Row `u` is the mean of `ctx` over the members of group `u`.
pub fn group_context<T: Real>(ctx: &Tensor<T>, g: &GroupSet<T>) -> Result<Tensor<T>> {
    if ctx.rows() != g.assignment.len() {
        return Err(Error::shape(
            "group_context",
            ctx.dims(),
            &[g.assignment.len()],
        ));
    }
    kernels::matmul(&g.averaging_matrix(), ctx)
}

/// Majority pseudo label of each group among `present ∪ {0}`; ties go to the
/// smaller id.
pub fn assign_group_classes<T: Real>(
    g: &GroupSet<T>,
    labels: &[u16],
    present: &BTreeSet<u16>,
) -> Result<Vec<u16>> {
    if labels.len() != g.assignment.len() {
        return Err(Error::shape(
            "assign_group_classes",
            &[labels.len()],
            &[g.assignment.len()],
        ));
    }
    let mut allowed = present.clone();
    allowed.insert(BACKGROUND);
    let top = *allowed.iter().next_back().unwrap_or(&BACKGROUND) as usize;
    let mut votes = vec![vec![0usize; top + 1]; g.groups()];
    for (&u, &y) in g.assignment.iter().zip(labels) {
        if allowed.contains(&y) {
            votes[u][y as usize] += 1;
        }
    }
    Ok(votes
        .iter()
        .map(|counts| {
            let mut best = BACKGROUND as usize;
            for c in allowed.iter().map(|&c| c as usize) {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            best as u16
        })
        .collect())
}
