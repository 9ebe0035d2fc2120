//! End-to-end finite-difference check of the joint objective with the
//! discrete plan held fixed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_scene, Dataset, Sample, StageSpec};
use crate::error::{Error, Result};
use crate::tensor::{finite_diff_check, GradReport, Graph, Tensor, Var};

use super::{
    build_objective, encode_batch, plan_batch, stream_seed, BatchPlan, Mode, ModelState, Objective,
    ParamVars, TrainConfig,
};

/// Which scalar of the objective is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveTerm {
    Ce,
    Pgcl,
    Sgcl,
    Total,
}

impl ObjectiveTerm {
    pub const ALL: [ObjectiveTerm; 4] = [
        ObjectiveTerm::Ce,
        ObjectiveTerm::Pgcl,
        ObjectiveTerm::Sgcl,
        ObjectiveTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveTerm::Ce => "ce",
            ObjectiveTerm::Pgcl => "pgcl",
            ObjectiveTerm::Sgcl => "sgcl",
            ObjectiveTerm::Total => "total",
        }
    }

    pub fn pick(self, objective: &Objective) -> Result<Var> {
        let missing = || Error::Contract(format!("objective has no {} term", self.name()));
        match self {
            ObjectiveTerm::Ce => Ok(objective.ce),
            ObjectiveTerm::Pgcl => objective.pgcl.ok_or_else(missing),
            ObjectiveTerm::Sgcl => objective.sgcl.ok_or_else(missing),
            ObjectiveTerm::Total => Ok(objective.total),
        }
    }
}

impl fmt::Display for ObjectiveTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for ObjectiveTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveTerm::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss term {s:?}; expected ce, pgcl, sgcl or total"
                ))
            })
    }
}

/// Small M4 setting: 16×16 images, K=3, D=8, a 4×4 feature grid and at
/// most three groups per image.
pub fn gradcheck_config(seed: u64) -> TrainConfig {
    TrainConfig {
        width: 16,
        height: 16,
        classes: 3,
        depth: 8,
        batch: 3,
        mode: Mode::M4,
        seed,
        cam_init: 1.0,
        ..TrainConfig::default()
    }
}

pub const GRADCHECK_LAYOUT: [StageSpec; 2] = [(4, 2, true), (8, 2, false)];

/// Objective nodes for `state` on a frozen plan.
pub fn objective_on_plan(
    graph: &mut Graph<f64>,
    state: &ModelState,
    samples: &[&Sample],
    plan: &BatchPlan,
    cfg: &TrainConfig,
    trainable: bool,
) -> Result<(ParamVars, Objective)> {
    let vars = state.register(graph, trainable);
    let images: Vec<&Tensor<f64>> = samples.iter().map(|s| &s.image).collect();
    let (features, cams) = encode_batch(graph, state, &vars, &images)?;
    let objective = build_objective(graph, &vars, &features, &cams, plan, cfg)?;
    Ok((vars, objective))
}

/// A model, batch and frozen plan ready for differentiation.
pub struct CheckSetup {
    pub cfg: TrainConfig,
    pub state: ModelState,
    pub dataset: Dataset,
    pub plan: BatchPlan,
}

impl CheckSetup {
    pub fn new(cfg: TrainConfig, layout: &[StageSpec]) -> Result<Self> {
        cfg.validate()?;
        let synth = cfg.synth();
        let scenes = (0..cfg.batch as u64)
            .map(|i| generate_scene(&synth, stream_seed(cfg.seed, 100 + i)))
            .collect::<Result<Vec<_>>>()?;
        let dataset = Dataset::from_scenes(scenes, cfg.classes, cfg.seed);
        let mut state = ModelState::with_layout(&cfg, layout)?;
        // Zero biases leave dead pixels at exactly the zero vector, where
        // the correlation inside the refinement path is discontinuous.
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 4));
        for stage in &mut state.encoder.stages {
            let n = stage.bias.len();
            stage.bias = Tensor::new(
                vec![n],
                (0..n).map(|_| rng.random_range(-0.1..0.1)).collect(),
            )?;
        }
        let samples: Vec<&Sample> = dataset.samples.iter().collect();
        let mut graph = Graph::new();
        let vars = state.register(&mut graph, false);
        let images: Vec<&Tensor<f64>> = samples.iter().map(|s| &s.image).collect();
        let (features, cams) = encode_batch(&mut graph, &state, &vars, &images)?;
        let fv: Vec<&Tensor<f64>> = features.iter().map(|&f| graph.value(f)).collect();
        let ov: Vec<&Tensor<f64>> = cams.iter().map(|&o| graph.value(o)).collect();
        let present: Vec<_> = samples.iter().map(|s| s.present_classes()).collect();
        let grid = state.encoder.output_dims(cfg.height, cfg.width);
        let plan = plan_batch(&fv, &ov, &present, grid, &cfg, stream_seed(cfg.seed, 3))?;
        drop(graph);
        Ok(Self {
            cfg,
            state,
            dataset,
            plan,
        })
    }

    fn samples(&self) -> Vec<&Sample> {
        self.dataset.samples.iter().collect()
    }

    /// Value of `term` with every parameter replaced by `params`.
    pub fn value(&self, params: &[Tensor<f64>], term: ObjectiveTerm) -> Result<f64> {
        let state = self.state.with_params(params)?;
        let mut graph = Graph::new();
        let (_, objective) = objective_on_plan(
            &mut graph,
            &state,
            &self.samples(),
            &self.plan,
            &self.cfg,
            false,
        )?;
        Ok(graph.scalar(term.pick(&objective)?))
    }

    /// Analytic gradient of `term` with respect to every parameter.
    pub fn gradients(&self, term: ObjectiveTerm) -> Result<Vec<Tensor<f64>>> {
        let mut graph = Graph::new();
        let (vars, objective) = objective_on_plan(
            &mut graph,
            &self.state,
            &self.samples(),
            &self.plan,
            &self.cfg,
            true,
        )?;
        let grads = graph.backward(term.pick(&objective)?)?;
        Ok(self
            .state
            .params()
            .iter()
            .zip(vars.all())
            .map(|(p, v)| grads.get_or_zeros(v, p.dims()))
            .collect())
    }

    pub fn check(&self, term: ObjectiveTerm, eps: f64, tol: f64) -> Result<GradReport> {
        let params: Vec<Tensor<f64>> = self.state.params().into_iter().cloned().collect();
        let analytic = self.gradients(term)?;
        finite_diff_check(&params, &analytic, eps, tol, |ps| self.value(ps, term))
    }
}

/// Finite-difference step used by [`gradient_check`].
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Checks one term of the M4 objective on the small setting for `seed`.
pub fn gradient_check(seed: u64, term: ObjectiveTerm, tol: f64) -> Result<GradReport> {
    CheckSetup::new(gradcheck_config(seed), &GRADCHECK_LAYOUT)?.check(term, GRADCHECK_EPS, tol)
}
