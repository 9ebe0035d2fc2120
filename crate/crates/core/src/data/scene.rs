//! Synthetic scenes: coloured shapes on a striped background.
//!
//! Every foreground class owns one colour family and one shape family, so a
//! small encoder can tell classes apart while noise, colour jitter and the
//! background texture keep the task from saturating.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: u16 = 0;

const PALETTE: [[f64; 3]; 7] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.85, 0.80, 0.20],
    [0.80, 0.25, 0.75],
    [0.20, 0.75, 0.80],
    [0.90, 0.50, 0.15],
];

const MAX_PLACEMENT_TRIES: usize = 200;
const MAX_LAYOUT_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Class count including background.
    pub classes: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub noise_sigma: f64,
    /// Per-scene colour perturbation, uniform in `±color_jitter` per channel.
    pub color_jitter: f64,
    /// Blob radius range as a fraction of `min(width, height)`.
    pub radius_frac: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            classes: 4,
            min_blobs: 1,
            max_blobs: 3,
            noise_sigma: 0.05,
            color_jitter: 0.08,
            radius_frac: (0.14, 0.24),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: usize| (16..=128).contains(&v);
        if !in_range(self.width) || !in_range(self.height) {
            return Err(Error::Config(format!(
                "scene size {}x{} outside [16, 128]",
                self.width, self.height
            )));
        }
        if !(3..=8).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes {} outside [3, 8]",
                self.classes
            )));
        }
        if self.min_blobs == 0
            || self.min_blobs > self.max_blobs
            || self.max_blobs > self.classes - 1
        {
            return Err(Error::Config(format!(
                "blob count range [{}, {}] must lie in [1, {}]",
                self.min_blobs,
                self.max_blobs,
                self.classes - 1
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.color_jitter >= 0.0) {
            return Err(Error::Config(
                "noise and jitter must be non-negative".into(),
            ));
        }
        let (lo, hi) = self.radius_frac;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return Err(Error::Config(format!("radius range ({lo}, {hi}) invalid")));
        }
        Ok(())
    }
}

/// One synthetic image with its image-level labels and dense ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[height, width, 3]`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    /// `[height, width]` class ids; used by evaluation only.
    pub mask: Tensor<u16>,
    /// Foreground classes present; never contains [`BACKGROUND`].
    pub labels: BTreeSet<u16>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.image.dims()[1]
    }

    /// Labels plus the background id.
    pub fn present_classes(&self) -> BTreeSet<u16> {
        let mut s = self.labels.clone();
        s.insert(BACKGROUND);
        s
    }

    /// True when the foreground ids in the mask are exactly the labels.
    pub fn labels_match_mask(&self) -> bool {
        let in_mask: BTreeSet<u16> = self
            .mask
            .data()
            .iter()
            .copied()
            .filter(|&c| c != BACKGROUND)
            .collect();
        in_mask == self.labels
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Diamond,
    Ring,
    Cross,
    Ellipse,
    Triangle,
}

impl Shape {
    fn for_class(class: u16) -> Shape {
        match (class - 1) % 7 {
            0 => Shape::Disc,
            1 => Shape::Square,
            2 => Shape::Diamond,
            3 => Shape::Ring,
            4 => Shape::Cross,
            5 => Shape::Ellipse,
            _ => Shape::Triangle,
        }
    }

    /// Whether offset `(dy, dx)` from the centre lies inside a shape of
    /// radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            Shape::Cross => {
                (dx.abs() <= 0.35 * r && dy.abs() <= r) || (dy.abs() <= 0.35 * r && dx.abs() <= r)
            }
            Shape::Ellipse => (dx / r).powi(2) + (dy / (0.55 * r)).powi(2) <= 1.0,
            Shape::Triangle => dy <= 0.7 * r && dy >= -r + 2.0 * dx.abs() * 0.85,
        }
    }
}

/// Renders one scene. Identical `(cfg, seed)` pairs give identical scenes.
pub fn generate_scene(cfg: &SynthConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);

    let blob_count = rng.random_range(cfg.min_blobs..=cfg.max_blobs);
    let mut pool: Vec<u16> = (1..cfg.classes as u16).collect();
    let mut classes = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        let i = rng.random_range(0..pool.len());
        classes.push(pool.swap_remove(i));
    }

    let mut color_of = vec![[0.0; 3]; cfg.classes];
    let side = h.min(w) as f64;
    let mut mask = vec![BACKGROUND; h * w];
    let mut layout_ok = false;
    // A layout that boxes in a later blob is discarded whole.
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        mask.fill(BACKGROUND);
        let mut all_placed = true;
        for &class in &classes {
            let base = PALETTE[(class as usize - 1) % PALETTE.len()];
            for c in 0..3 {
                let j = if cfg.color_jitter > 0.0 {
                    rng.random_range(-cfg.color_jitter..=cfg.color_jitter)
                } else {
                    0.0
                };
                color_of[class as usize][c] = (base[c] + j).clamp(0.0, 1.0);
            }
            let shape = Shape::for_class(class);
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let r = side * rng.random_range(cfg.radius_frac.0..=cfg.radius_frac.1);
                let margin = r.ceil() as usize;
                if 2 * margin >= h || 2 * margin >= w {
                    continue;
                }
                let cy = rng.random_range(margin..h - margin) as f64;
                let cx = rng.random_range(margin..w - margin) as f64;
                let cells: Vec<usize> = (0..h * w)
                    .filter(|&i| {
                        let (y, x) = ((i / w) as f64, (i % w) as f64);
                        shape.contains(y - cy, x - cx, r)
                    })
                    .collect();
                let clear = cells.iter().all(|&i| {
                    let (y, x) = (i / w, i % w);
                    neighbourhood(y, x, h, w).all(|j| mask[j] == BACKGROUND)
                });
                if !cells.is_empty() && clear {
                    for i in cells {
                        mask[i] = class;
                    }
                    placed = true;
                    break;
                }
            }
            if !placed {
                all_placed = false;
                break;
            }
        }
        if all_placed {
            layout_ok = true;
            break;
        }
    }
    if !layout_ok {
        return Err(Error::Generation(format!(
            "could not place {} blobs after {MAX_LAYOUT_ATTEMPTS} layouts of {MAX_PLACEMENT_TRIES} tries",
            classes.len()
        )));
    }

    let bg_level = rng.random_range(0.35..0.55);
    let bg_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(0.4..1.1);
    let (sa, ca) = angle.sin_cos();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-300)).expect("valid sigma");

    let mut image = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let class = mask[i];
        let base = if class == BACKGROUND {
            let stripe = 0.08 * (freq * (x * ca + y * sa)).sin();
            [
                bg_level + stripe + bg_tint[0],
                bg_level + stripe + bg_tint[1],
                bg_level + stripe + bg_tint[2],
            ]
        } else {
            color_of[class as usize]
        };
        for v in base {
            let n = if cfg.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            image.push((v + n).clamp(0.0, 1.0));
        }
    }

    let labels = classes.into_iter().collect();
    Ok(Scene {
        image: Tensor::new(vec![h, w, 3], image)?,
        mask: Tensor::new(vec![h, w], mask)?,
        labels,
    })
}

fn neighbourhood(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let ys = y.saturating_sub(1)..=(y + 1).min(h - 1);
    ys.flat_map(move |yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).map(move |xx| yy * w + xx))
}

/// Scene seeds for a corpus: scene `i` uses a seed derived from `(seed, i)`.
pub fn scene_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        ^ 0x94D0_49BB_1331_11EB
}

pub fn generate_corpus(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(cfg, scene_seed(seed, i)))
        .collect()
}
