//! Trains every mode on identical corpora and compares final mIoU.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{generate_corpus, Dataset};
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, train, Mode, TrainConfig};

/// Outcome of one (mode, seed) training run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub mode: Mode,
    pub seed: u64,
    /// `(base, refined)` mIoU, or the abort message.
    pub result: std::result::Result<(f64, f64), String>,
}

impl AblationCell {
    pub fn refined(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.1)
    }

    pub fn base(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// Seed-major, modes in [`Mode::ALL`] order.
    pub cells: Vec<AblationCell>,
}

/// Median of the finite values; `None` when there are none. Even counts
/// average the middle pair.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// One directional claim about the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub claim: &'static str,
    pub medians_hold: bool,
    /// Seeds where a strict claim holds, out of seeds with both sides.
    pub per_seed: Option<(usize, usize)>,
    pub holds: bool,
}

/// Fraction of seeds in which a strict claim must hold.
pub const STRICT_SEED_FRACTION: f64 = 0.8;

impl AblationTable {
    pub fn cell(&self, mode: Mode, seed: u64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.mode == mode && c.seed == seed)
    }

    pub fn refined_values(&self, mode: Mode) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.mode == mode)
            .filter_map(AblationCell::refined)
            .collect()
    }

    pub fn base_values(&self, mode: Mode) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.mode == mode)
            .filter_map(AblationCell::base)
            .collect()
    }

    pub fn median_refined(&self, mode: Mode) -> Option<f64> {
        median(&self.refined_values(mode))
    }

    pub fn median_base(&self, mode: Mode) -> Option<f64> {
        median(&self.base_values(mode))
    }

    pub fn aborted(&self) -> impl Iterator<Item = &AblationCell> {
        self.cells.iter().filter(|c| c.result.is_err())
    }

    /// `(seeds where lhs(seed) > rhs(seed), seeds where both are defined)`.
    fn strict_count(
        &self,
        lhs: impl Fn(u64) -> Option<f64>,
        rhs: impl Fn(u64) -> Option<f64>,
    ) -> (usize, usize) {
        let mut wins = 0;
        let mut total = 0;
        for &s in &self.seeds {
            if let (Some(a), Some(b)) = (lhs(s), rhs(s)) {
                total += 1;
                wins += usize::from(a > b);
            }
        }
        (wins, total)
    }

    /// The refined-mIoU ordering M4 > M3 ≥ max(M1, M2) > baseline and
    /// M1 ≥ M2. Strict claims must also hold seed by seed in at least
    /// [`STRICT_SEED_FRACTION`] of the seeds.
    pub fn ordering_checks(&self) -> Vec<OrderingCheck> {
        let med = |m: Mode| self.median_refined(m).unwrap_or(f64::NAN);
        let at = |m: Mode| move |s: u64| self.cell(m, s).and_then(AblationCell::refined);
        let best_single = |s: u64| match (at(Mode::M1)(s), at(Mode::M2)(s)) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
        let enough = |(wins, total): (usize, usize)| {
            total > 0 && wins as f64 >= (STRICT_SEED_FRACTION * total as f64).ceil() - 1e-9
        };
        let single = med(Mode::M1).max(med(Mode::M2));

        let strict = |claim, medians_hold: bool, count: (usize, usize)| OrderingCheck {
            claim,
            medians_hold,
            per_seed: Some(count),
            holds: medians_hold && enough(count),
        };
        let weak = |claim, medians_hold: bool| OrderingCheck {
            claim,
            medians_hold,
            per_seed: None,
            holds: medians_hold,
        };
        vec![
            strict(
                "M4 > M3",
                med(Mode::M4) > med(Mode::M3),
                self.strict_count(at(Mode::M4), at(Mode::M3)),
            ),
            weak("M3 >= max(M1, M2)", med(Mode::M3) >= single),
            strict(
                "max(M1, M2) > baseline",
                single > med(Mode::Baseline),
                self.strict_count(best_single, at(Mode::Baseline)),
            ),
            weak("M1 >= M2", med(Mode::M1) >= med(Mode::M2)),
        ]
    }

    /// `mode,seed,miou_base,miou_refined`; aborted cells leave both values
    /// empty.
    pub fn csv(&self) -> String {
        let mut out = String::from("mode,seed,miou_base,miou_refined\n");
        for c in &self.cells {
            match &c.result {
                Ok((b, r)) => writeln!(out, "{},{},{b},{r}", c.mode, c.seed).unwrap(),
                Err(_) => writeln!(out, "{},{},,", c.mode, c.seed).unwrap(),
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.csv())?;
        Ok(())
    }
}

/// Corpus shared by every mode of one seed.
pub fn ablation_dataset(cfg: &TrainConfig, seed: u64) -> Result<Dataset> {
    let scenes = generate_corpus(&cfg.synth(), cfg.scenes, seed)?;
    Ok(Dataset::from_scenes(scenes, cfg.classes, seed))
}

/// Trains each mode per seed from `base` (whose `mode` and `seed` are
/// overridden) and scores the final state. Numerical aborts are recorded
/// per cell; any other error stops the run.
pub fn run_ablation(base: &TrainConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    base.validate()?;
    let datasets = seeds
        .iter()
        .map(|&s| ablation_dataset(base, s))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Mode)> = (0..seeds.len())
        .flat_map(|i| Mode::ALL.into_iter().map(move |m| (i, m)))
        .collect();
    let cells = jobs
        .into_par_iter()
        .map(|(i, mode)| {
            let cfg = TrainConfig {
                mode,
                seed: seeds[i],
                ..base.clone()
            };
            let run = train(&cfg, &datasets[i], None)
                .and_then(|(state, _)| evaluate(&state, &datasets[i], &cfg));
            let result = match run {
                Ok((b, r)) => Ok((b.miou, r.miou)),
                Err(e @ Error::NumericalAbort { .. }) => Err(e.to_string()),
                Err(e) => return Err(e),
            };
            Ok(AblationCell {
                mode,
                seed: seeds[i],
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        cells,
    })
}
