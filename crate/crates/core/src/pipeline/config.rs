use std::fmt;
use std::str::FromStr;

use crate::contrastive::ContrastConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};

/// Which loss terms and paths are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Classification loss only.
    Baseline,
    /// Adds the group contrast.
    M1,
    /// Adds the semantic contrast.
    M2,
    /// Both contrasts, no refinement.
    M3,
    /// Both contrasts plus the refined head.
    M4,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Baseline, Mode::M1, Mode::M2, Mode::M3, Mode::M4];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::M1 => "m1",
            Mode::M2 => "m2",
            Mode::M3 => "m3",
            Mode::M4 => "m4",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?}; expected baseline, m1, m2, m3 or m4"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub theta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub mode: Mode,
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub depth: usize,
    /// One extra cluster per image for background pixels.
    pub background_group: bool,
    pub include_positive: bool,
    /// mIoU snapshot period in steps; the last step is always scored.
    pub eval_every: usize,
    /// Scenes generated for ablation runs.
    pub scenes: usize,
    /// CAM weights start uniform in `±cam_init / sqrt(fan_in)`.
    pub cam_init: f64,
    /// Global gradient-norm ceiling per step; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.4,
            tau: 0.1,
            theta: 0.5,
            lr: 0.05,
            momentum: 0.9,
            steps: 500,
            batch: 4,
            seed: 0,
            mode: Mode::M4,
            width: 32,
            height: 32,
            classes: 4,
            depth: 32,
            background_group: true,
            include_positive: true,
            eval_every: 100,
            scenes: 200,
            cam_init: 0.1,
            grad_clip: 1.0,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`].
pub const CONFIG_KEYS: [&str; 20] = [
    "alpha",
    "beta",
    "tau",
    "theta",
    "lr",
    "momentum",
    "steps",
    "batch",
    "seed",
    "mode",
    "width",
    "height",
    "classes",
    "depth",
    "background_group",
    "include_positive_in_denominator",
    "eval_every",
    "scenes",
    "cam_init",
    "grad_clip",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

impl TrainConfig {
    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            theta: self.theta,
            include_positive: self.include_positive,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            width: self.width,
            height: self.height,
            classes: self.classes,
            max_blobs: (self.classes - 1).min(3),
            ..SynthConfig::default()
        }
    }

    /// `(α, β)` after the mode switches off the terms it excludes.
    pub fn effective_weights(&self) -> (f64, f64) {
        match self.mode {
            Mode::Baseline => (0.0, 0.0),
            Mode::M1 => (self.alpha, 0.0),
            Mode::M2 => (0.0, self.beta),
            Mode::M3 | Mode::M4 => (self.alpha, self.beta),
        }
    }

    /// The refined head runs only in M4 with both streams weighted.
    pub fn refinement_active(&self) -> bool {
        let (a, b) = self.effective_weights();
        self.mode == Mode::M4 && a > 0.0 && b > 0.0
    }

    pub fn needs_groups(&self) -> bool {
        let (a, b) = self.effective_weights();
        a > 0.0 || b > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lr", self.lr),
            ("cam_init", self.cam_init),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        self.contrast().validate()?;
        if self.batch < 2 {
            return Err(Error::Config(format!("batch {} < 2", self.batch)));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("depth {} < 2", self.depth)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        self.synth().validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "theta" => self.theta = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "width" => self.width = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "background_group" => self.background_group = parse(key, value)?,
            "include_positive_in_denominator" => self.include_positive = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "scenes" => self.scenes = parse(key, value)?,
            "cam_init" => self.cam_init = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Every key with its current value, in [`CONFIG_KEYS`] order. Floats
    /// print in shortest round-trip form.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("tau", self.tau.to_string()),
            ("theta", self.theta.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.to_string()),
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("classes", self.classes.to_string()),
            ("depth", self.depth.to_string()),
            ("background_group", self.background_group.to_string()),
            (
                "include_positive_in_denominator",
                self.include_positive.to_string(),
            ),
            ("eval_every", self.eval_every.to_string()),
            ("scenes", self.scenes.to_string()),
            ("cam_init", self.cam_init.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_weights() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.alpha, cfg.beta), (0.6, 0.4));
        assert_eq!(
            (
                cfg.classes,
                cfg.depth,
                cfg.width,
                cfg.height,
                cfg.batch,
                cfg.steps
            ),
            (4, 32, 32, 32, 4, 500)
        );
        cfg.validate().unwrap();
    }

    #[test]
    fn mode_weights_and_gates() {
        let mut cfg = TrainConfig::default();
        let expect = [(0.0, 0.0), (0.6, 0.0), (0.0, 0.4), (0.6, 0.4), (0.6, 0.4)];
        for (mode, w) in Mode::ALL.into_iter().zip(expect) {
            cfg.mode = mode;
            assert_eq!(cfg.effective_weights(), w);
            assert_eq!(cfg.refinement_active(), mode == Mode::M4);
        }
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
        assert!(!cfg.refinement_active());
        assert!(!cfg.needs_groups());
    }

    #[test]
    fn pairs_round_trip_through_set() {
        let mut cfg = TrainConfig {
            alpha: 0.25,
            mode: Mode::M2,
            include_positive: false,
            seed: 17,
            ..Default::default()
        };
        cfg.tau = 0.07;
        let mut back = TrainConfig::default();
        for (k, v) in cfg.pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert_eq!(cfg.pairs().len(), CONFIG_KEYS.len());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = TrainConfig::default();
        let err = cfg.set("gamma", "1").unwrap_err().to_string();
        assert!(err.contains("alpha") && err.contains("cam_init"));
        assert!(cfg.set("steps", "-3").is_err());
        assert!(cfg.set("mode", "m9").is_err());
        cfg.batch = 1;
        assert!(cfg.validate().is_err());
        cfg.batch = 4;
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
    }
}
