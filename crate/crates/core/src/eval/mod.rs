//! Intersection-over-union scoring of label maps, the mode ablation and the
//! contrast benchmark.

pub mod ablation;
pub mod bench;

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ablation::{
    ablation_dataset, median, run_ablation, AblationCell, AblationTable, OrderingCheck,
};
pub use bench::{
    bench_contrast, bench_csv, group_candidates, group_pair_count, pair_reduction,
    pixel_pair_count, time_ratio, write_bench_csv, BenchRecord, Variant,
};

#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl IoUReport {
    pub fn defined(&self) -> BTreeSet<u16> {
        (0..self.per_class.len())
            .filter(|&k| self.per_class[k].is_some())
            .map(|k| k as u16)
            .collect()
    }
}

/// Intersection and union pixel counts summed over many image pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            inter: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &Tensor<u16>, gt: &Tensor<u16>) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape("miou", pred.dims(), gt.dims()));
        }
        let k = self.inter.len();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p as usize >= k || g as usize >= k {
                return Err(Error::Contract(format!(
                    "class id {} outside 0..{k}",
                    p.max(g)
                )));
            }
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p == g {
                self.inter[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[g as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (a, b) in self.inter.iter_mut().zip(&other.inter) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    pub fn report(&self) -> IoUReport {
        let per_class: Vec<Option<f64>> = self
            .inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        IoUReport { per_class, miou }
    }
}

pub fn miou(pred: &Tensor<u16>, gt: &Tensor<u16>, classes: usize) -> Result<IoUReport> {
    let mut acc = IouAccumulator::new(classes);
    acc.add(pred, gt)?;
    Ok(acc.report())
}
