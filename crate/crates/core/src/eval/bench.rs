//! Wall-clock comparison of pixel-by-pixel contrast against grouped
//! contrast, clustering included. Single precision, one thread.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::contrastive::{cosine_scores, pgcl_loss, ContrastConfig, GroupBatchItem};
use crate::data::{generate_scene, SynthConfig};
use crate::error::{Error, Result};
use crate::grouping::{assign_group_classes, cluster_pixels, pixel_affinity, pixel_context};
use crate::tensor::{ContrastLabels, Graph, Tensor};

use super::ablation::median;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Pixelwise,
    Grouped,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Pixelwise => "pixelwise",
            Variant::Grouped => "grouped",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    /// Side of the square feature map.
    pub resolution: usize,
    pub groups: usize,
    pub variant: Variant,
    pub median_seconds: f64,
    pub pairs: u64,
}

/// Same-image pixel pairs, `V(V−1)/2`.
pub fn pixel_pair_count(pixels: usize) -> u64 {
    let v = pixels as u64;
    v * v.saturating_sub(1) / 2
}

/// Candidates each group anchor is contrasted against: every other group
/// in the batch.
pub fn group_candidates(images: usize, groups: usize) -> usize {
    (images * groups).saturating_sub(1)
}

/// Unordered group pairs in the batch.
pub fn group_pair_count(images: usize, groups: usize) -> u64 {
    let n = (images * groups) as u64;
    n * n.saturating_sub(1) / 2
}

pub const BENCH_DEPTH: usize = 32;
pub const BENCH_CLASSES: usize = 4;

/// A `resolution²×D` feature map whose rows are a per-class centre plus
/// noise, laid out like a synthetic scene, with its class map.
pub fn bench_features(resolution: usize, seed: u64) -> Result<(Tensor<f32>, Vec<u16>)> {
    let synth = SynthConfig {
        width: resolution,
        height: resolution,
        classes: BENCH_CLASSES,
        ..SynthConfig::default()
    };
    let scene = generate_scene(&synth, seed)?;
    let labels = scene.mask.data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.3).expect("valid sigma");
    let centres: Vec<Vec<f32>> = (0..BENCH_CLASSES)
        .map(|_| {
            (0..BENCH_DEPTH)
                .map(|_| noise.sample(&mut rng) * 3.0)
                .collect()
        })
        .collect();
    let data: Vec<f32> = labels
        .iter()
        .flat_map(|&c| centres[c as usize].clone())
        .map(|x| x + noise.sample(&mut rng))
        .collect();
    Ok((Tensor::new(vec![labels.len(), BENCH_DEPTH], data)?, labels))
}

/// Forward and backward of the pixel contrast over every same-image pair;
/// pixels of the same class are positives.
pub fn pixelwise_iteration(f: &Tensor<f32>, labels: &[u16], cfg: &ContrastConfig) -> Result<f32> {
    let mut g = Graph::new();
    let x = g.param(f.clone());
    let scores = cosine_scores(&mut g, x, x)?;
    let classes: Vec<u32> = labels.iter().map(|&c| u32::from(c)).collect();
    let contrast = ContrastLabels {
        cols: classes.iter().copied().map(Some).collect(),
        rows: classes,
        exclude_diagonal: true,
    };
    let active = contrast.active_rows();
    let n = active.iter().filter(|&&a| a).count().max(1) as f32;
    let weights = active
        .iter()
        .map(|&a| if a { 1.0 / n } else { 0.0 })
        .collect();
    let per_row = g.contrast_rows(scores, contrast, cfg.inv_tau(), cfg.include_positive)?;
    let loss = g.weighted_sum(per_row, weights)?;
    g.backward(loss)?;
    Ok(g.scalar(loss))
}

/// Affinity, context, clustering, then forward and backward of the group
/// contrast over the resulting prototypes.
pub fn grouped_iteration(
    f: &Tensor<f32>,
    labels: &[u16],
    groups: usize,
    cfg: &ContrastConfig,
    seed: u64,
) -> Result<f32> {
    let ctx = pixel_context(f, &pixel_affinity(f)?)?;
    let set = cluster_pixels(f, &ctx, groups, seed)?;
    let present = labels.iter().copied().collect();
    let classes = assign_group_classes(&set, labels, &present)?;
    let mut g = Graph::new();
    let x = g.param(f.clone());
    let a = g.constant(set.averaging_matrix());
    let prototypes = g.matmul(a, x)?;
    let term = pgcl_loss(
        &mut g,
        &[GroupBatchItem {
            prototypes,
            classes,
        }],
        cfg,
    )?;
    g.backward(term.value)?;
    Ok(g.scalar(term.value))
}

fn time_median(repeats: usize, mut run: impl FnMut() -> Result<f32>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let v = run()?;
        times.push(start.elapsed().max(Duration::from_nanos(1)).as_secs_f64());
        if !v.is_finite() {
            return Err(Error::NonFinite("benchmark loss"));
        }
    }
    Ok(median(&times).expect("at least one repeat"))
}

/// Median seconds per iteration of both variants at every resolution and
/// group count, on a single worker thread.
pub fn bench_contrast(
    resolutions: &[usize],
    groups: &[usize],
    repeats: usize,
) -> Result<Vec<BenchRecord>> {
    if repeats < 3 {
        return Err(Error::Config(format!(
            "benchmark needs at least 3 repeats, got {repeats}"
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cfg = ContrastConfig::default();
    pool.install(|| {
        let mut out = Vec::new();
        for &r in resolutions {
            let (f, labels) = bench_features(r, r as u64)?;
            let v = f.rows();
            let pixel_seconds = time_median(repeats, || pixelwise_iteration(&f, &labels, &cfg))?;
            for &g in groups {
                if g == 0 || g > v {
                    return Err(Error::Config(format!("group count {g} outside 1..={v}")));
                }
                out.push(BenchRecord {
                    resolution: r,
                    groups: g,
                    variant: Variant::Pixelwise,
                    median_seconds: pixel_seconds,
                    pairs: pixel_pair_count(v),
                });
                out.push(BenchRecord {
                    resolution: r,
                    groups: g,
                    variant: Variant::Grouped,
                    median_seconds: time_median(repeats, || {
                        grouped_iteration(&f, &labels, g, &cfg, 7)
                    })?,
                    pairs: group_pair_count(1, g),
                });
            }
        }
        Ok(out)
    })
}

/// `resolution,G,variant,median_seconds,pairs`.
pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("resolution,G,variant,median_seconds,pairs\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.resolution, r.groups, r.variant, r.median_seconds, r.pairs
        )
        .unwrap();
    }
    out
}

pub fn write_bench_csv(path: impl AsRef<Path>, records: &[BenchRecord]) -> Result<()> {
    fs::write(path, bench_csv(records))?;
    Ok(())
}

/// Grouped over pixelwise median time at `(resolution, groups)`.
pub fn time_ratio(records: &[BenchRecord], resolution: usize, groups: usize) -> Option<f64> {
    let find = |v: Variant| {
        records
            .iter()
            .find(|r| r.resolution == resolution && r.groups == groups && r.variant == v)
    };
    Some(find(Variant::Grouped)?.median_seconds / find(Variant::Pixelwise)?.median_seconds)
}

/// Pixelwise over grouped pair count at `(resolution, groups)`.
pub fn pair_reduction(records: &[BenchRecord], resolution: usize, groups: usize) -> Option<f64> {
    let find = |v: Variant| {
        records
            .iter()
            .find(|r| r.resolution == resolution && r.groups == groups && r.variant == v)
    };
    Some(find(Variant::Pixelwise)?.pairs as f64 / find(Variant::Grouped)?.pairs.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_counts() {
        assert_eq!(pixel_pair_count(4), 6);
        assert_eq!(pixel_pair_count(1), 0);
        assert_eq!(pixel_pair_count(4096), 4096 * 4095 / 2);
        assert_eq!(group_candidates(2, 2), 3);
        assert_eq!(group_pair_count(1, 3), 3);
        assert_eq!(group_pair_count(2, 2), 6);
    }

    #[test]
    fn features_follow_the_scene_layout() {
        let (f, labels) = bench_features(16, 3).unwrap();
        assert_eq!(f.dims(), &[256, BENCH_DEPTH]);
        assert_eq!(labels.len(), 256);
        assert!(f.data().iter().all(|x| x.is_finite()));
        assert_eq!(bench_features(16, 3).unwrap().0, f);
    }

    #[test]
    fn both_iterations_are_finite() {
        let (f, labels) = bench_features(16, 1).unwrap();
        let cfg = ContrastConfig::default();
        assert!(pixelwise_iteration(&f, &labels, &cfg).unwrap().is_finite());
        assert!(grouped_iteration(&f, &labels, 3, &cfg, 7)
            .unwrap()
            .is_finite());
    }

    #[test]
    fn records_and_csv() {
        let recs = bench_contrast(&[16], &[2, 3], 3).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().all(|r| r.median_seconds > 0.0));
        assert_eq!(recs[0].median_seconds, recs[2].median_seconds);
        let csv = bench_csv(&recs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "resolution,G,variant,median_seconds,pairs");
        assert!(lines[1].starts_with("16,2,pixelwise,"));
        assert!(lines[2].starts_with("16,2,grouped,"));
        assert!(lines[2].ends_with(",1"));
        assert_eq!(pair_reduction(&recs, 16, 3), Some(32640.0 / 3.0));
        assert!(time_ratio(&recs, 16, 3).unwrap() > 0.0);
        assert_eq!(time_ratio(&recs, 32, 3), None);
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        assert!(matches!(
            bench_contrast(&[16], &[2], 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            bench_contrast(&[16], &[0], 3),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            bench_contrast(&[16], &[257], 3),
            Err(Error::Config(_))
        ));
    }
}
