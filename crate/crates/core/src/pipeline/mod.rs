//! Joint training of the encoder and both CAM heads under the
//! classification loss, the two contrastive streams and the refined head.
//!
//! Each step runs in two phases. The discrete decisions (pseudo labels,
//! clusters, group classes, bank membership) are taken from plain values
//! first and frozen in a [`BatchPlan`]; the differentiable objective is then
//! built on the tape around that plan.

mod checkpoint;
mod config;
mod gradcheck;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cam::{
    self, cam_forward, ce_loss, classification_logits, pseudo_labels, refined_cam, CamStack,
    CamWeights, PseudoLabelMap,
};
use crate::contrastive::{
    class_mask, pgcl_loss, semantic_consistency, sgcl_loss, similarity_matrix, ClassPrototypeBank,
    GroupBatchItem,
};
use crate::data::{Dataset, EncoderVars, Sample, StageSpec, TinyEncoder};
use crate::error::{Error, Result};
use crate::eval::{IoUReport, IouAccumulator};
use crate::grouping::{
    assign_group_classes, cluster_pixels, pixel_affinity, pixel_context, pixel_context_on, GroupSet,
};
use crate::tensor::{Graph, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Mode, TrainConfig, CONFIG_KEYS};
pub use gradcheck::{
    gradcheck_config, gradient_check, objective_on_plan, CheckSetup, ObjectiveTerm, GRADCHECK_EPS,
    GRADCHECK_LAYOUT,
};

/// Everything a training run updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: TinyEncoder<f64>,
    pub cam: CamWeights<f64>,
    /// Momentum buffers in [`ModelState::params`] order.
    pub velocity: Vec<Tensor<f64>>,
    pub step: usize,
}

impl ModelState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        Self::with_layout(cfg, &TinyEncoder::<f64>::default_layout(cfg.depth))
    }

    pub fn with_layout(cfg: &TrainConfig, layout: &[StageSpec]) -> Result<Self> {
        let encoder = TinyEncoder::new(3, layout, stream_seed(cfg.seed, 1))?;
        let cam = CamWeights::new(
            cfg.classes,
            encoder.depth(),
            cfg.cam_init,
            stream_seed(cfg.seed, 2),
        );
        let mut state = Self {
            encoder,
            cam,
            velocity: Vec::new(),
            step: 0,
        };
        state.velocity = state
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.dims()))
            .collect();
        Ok(state)
    }

    /// Encoder weights and biases stage by stage, then the base and refined
    /// class embeddings.
    pub fn params(&self) -> Vec<&Tensor<f64>> {
        let mut out = Vec::new();
        for s in &self.encoder.stages {
            out.push(&s.weight);
            out.push(&s.bias);
        }
        out.push(&self.cam.base);
        out.push(&self.cam.refined);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut out = Vec::new();
        for s in &mut self.encoder.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.cam.base);
        out.push(&mut self.cam.refined);
        out
    }

    /// A copy with every parameter replaced, in [`ModelState::params`] order.
    pub fn with_params(&self, params: &[Tensor<f64>]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.params_mut();
        if slots.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} parameters, expected {}",
                params.len(),
                slots.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.dims() != p.dims() {
                return Err(Error::shape("with_params", slot.dims(), p.dims()));
            }
            *slot = p.clone();
        }
        Ok(out)
    }

    pub fn register(&self, graph: &mut Graph<f64>, trainable: bool) -> ParamVars {
        let encoder = self.encoder.register(graph, trainable);
        let mut leaf = |t: &Tensor<f64>| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        ParamVars {
            encoder,
            base: leaf(&self.cam.base),
            refined: leaf(&self.cam.refined),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamVars {
    pub encoder: EncoderVars,
    pub base: Var,
    pub refined: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self
            .encoder
            .stages
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .collect();
        out.push(self.base);
        out.push(self.refined);
        out
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}

/// `f̃ = softmax_rows(f · Cᵀ) · S`.
pub fn refine_features(graph: &mut Graph<f64>, f: Var, c: Var, s: Var) -> Result<Var> {
    let (fv, cv, sv) = (graph.value(f), graph.value(c), graph.value(s));
    if fv.cols() != cv.cols() || cv.cols() != sv.cols() || cv.rows() != sv.rows() {
        return Err(Error::shape("refine_features", cv.dims(), sv.dims()));
    }
    let logits = graph.matmul_nt(f, c)?;
    let w = graph.softmax_rows(logits)?;
    graph.matmul(w, s)
}

/// `[f, f̃]` channel-wise, original first.
pub fn concat_features(graph: &mut Graph<f64>, f: Var, ftilde: Var) -> Result<Var> {
    if graph.value(f).dims() != graph.value(ftilde).dims() {
        return Err(Error::shape(
            "concat_features",
            graph.value(f).dims(),
            graph.value(ftilde).dims(),
        ));
    }
    graph.concat_cols(f, ftilde)
}

/// `α·lp + β·ls + lce`. Terms with zero weight are left off the tape, so a
/// zero-weighted term can never leak a non-finite value into the total.
pub fn total_loss(
    graph: &mut Graph<f64>,
    lp: Var,
    ls: Var,
    lce: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let mut total = lce;
    for (term, w) in [(lp, alpha), (ls, beta)] {
        if w != 0.0 {
            let scaled = graph.scale(term, w)?;
            total = graph.add(scaled, total)?;
        }
    }
    Ok(total)
}

/// Frozen discrete decisions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlan {
    pub present: BTreeSet<u16>,
    pub labels: PseudoLabelMap,
    /// Clusters and their classes; absent when neither stream is on.
    pub groups: Option<(GroupSet<f64>, Vec<u16>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub images: Vec<ImagePlan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub pgcl: f64,
    pub sgcl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Diagnostics {
    pub pgcl_active: usize,
    pub pgcl_degenerate: bool,
    pub sgcl_active: usize,
    pub sgcl_degenerate: bool,
}

/// The loss nodes of one batch.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub ce: Var,
    pub pgcl: Option<Var>,
    pub sgcl: Option<Var>,
    /// Refined score maps per image, M4 only.
    pub refined: Vec<Option<Var>>,
    pub diagnostics: Diagnostics,
}

impl Objective {
    pub fn losses(&self, graph: &Graph<f64>) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| graph.scalar(v));
        LossBreakdown {
            total: graph.scalar(self.total),
            ce: graph.scalar(self.ce),
            pgcl: get(self.pgcl),
            sgcl: get(self.sgcl),
        }
    }
}

/// Encodes every image and scores it with the base head.
pub fn encode_batch(
    graph: &mut Graph<f64>,
    state: &ModelState,
    vars: &ParamVars,
    images: &[&Tensor<f64>],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut features = Vec::with_capacity(images.len());
    let mut cams = Vec::with_capacity(images.len());
    for img in images {
        let x = graph.constant((*img).clone());
        let f = state.encoder.encode(graph, &vars.encoder, x)?;
        cams.push(cam_forward(graph, f, vars.base)?);
        features.push(f);
    }
    Ok((features, cams))
}

/// Pseudo labels from the base scores, then context-guided clusters when a
/// contrastive stream needs them. Images are planned in parallel.
pub fn plan_batch(
    features: &[&Tensor<f64>],
    cams: &[&Tensor<f64>],
    present: &[BTreeSet<u16>],
    grid: (usize, usize),
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BatchPlan> {
    let images = (0..features.len())
        .into_par_iter()
        .map(|i| {
            let labels = pseudo_labels(cams[i], &present[i], grid.0, grid.1)?;
            let groups = if cfg.needs_groups() {
                let f = features[i];
                let ctx = pixel_context(f, &pixel_affinity(f)?)?;
                let g =
                    (present[i].len() - 1 + usize::from(cfg.background_group)).clamp(1, f.rows());
                let set = cluster_pixels(f, &ctx, g, seed.wrapping_add(i as u64))?;
                let classes = assign_group_classes(&set, labels.ids(), &present[i])?;
                Some((set, classes))
            } else {
                None
            };
            Ok(ImagePlan {
                present: present[i].clone(),
                labels,
                groups,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchPlan { images })
}

/// Builds the full objective around a frozen plan.
pub fn build_objective(
    graph: &mut Graph<f64>,
    vars: &ParamVars,
    features: &[Var],
    cams: &[Var],
    plan: &BatchPlan,
    cfg: &TrainConfig,
) -> Result<Objective> {
    let (alpha, beta) = cfg.effective_weights();
    let contrast = cfg.contrast();
    let n = features.len();
    let mut diagnostics = Diagnostics::default();

    // Group prototypes are member means of the live features.
    let mut protos = Vec::new();
    let mut averaging = Vec::new();
    if cfg.needs_groups() {
        for (i, p) in plan.images.iter().enumerate() {
            let (set, _) = p
                .groups
                .as_ref()
                .ok_or_else(|| Error::Contract("plan lacks groups".into()))?;
            let a = graph.constant(set.averaging_matrix());
            protos.push(graph.matmul(a, features[i])?);
            averaging.push(a);
        }
    }

    let mut pgcl = None;
    if alpha > 0.0 {
        let batch: Vec<GroupBatchItem> = plan
            .images
            .iter()
            .zip(&protos)
            .map(|(p, &prototypes)| GroupBatchItem {
                prototypes,
                classes: p.groups.as_ref().map(|g| g.1.clone()).unwrap_or_default(),
            })
            .collect();
        let term = pgcl_loss(graph, &batch, &contrast)?;
        diagnostics.pgcl_active = term.active;
        diagnostics.pgcl_degenerate = term.degenerate;
        pgcl = Some(term.value);
    }

    let mut semantic: Vec<Option<Var>> = vec![None; n];
    let mut sgcl = None;
    if beta > 0.0 {
        let labels: Vec<&[u16]> = plan.images.iter().map(|p| p.labels.ids()).collect();
        let bank = ClassPrototypeBank::build(graph, features, &labels, cfg.classes)?;
        let mut rows = Vec::new();
        let mut classes = Vec::new();
        for (i, p) in plan.images.iter().enumerate() {
            let mask = class_mask(cfg.classes, &p.present, Some(&bank.present));
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let m = similarity_matrix(graph, protos[i], vars.base, &mask, cfg.tau)?;
            let s = semantic_consistency(graph, m, &mask, &bank)?;
            semantic[i] = Some(s);
            rows.push(s);
            classes.extend_from_slice(&p.groups.as_ref().map(|g| g.1.clone()).unwrap_or_default());
        }
        let term = if rows.is_empty() {
            None
        } else {
            let stacked = graph.concat_rows(&rows)?;
            Some(sgcl_loss(graph, stacked, &classes, &bank, &contrast)?)
        };
        match term {
            Some(t) => {
                diagnostics.sgcl_active = t.active;
                diagnostics.sgcl_degenerate = t.degenerate;
                sgcl = Some(t.value);
            }
            None => {
                diagnostics.sgcl_degenerate = true;
                sgcl = Some(graph.constant(Tensor::scalar(0.0)));
            }
        }
    }

    let refine = cfg.refinement_active();
    let mut refined = vec![None; n];
    let mut ce_terms = Vec::with_capacity(n);
    for i in 0..n {
        let logits = classification_logits(graph, cams[i])?;
        let mut ce = ce_loss(graph, logits, &plan.images[i].present)?;
        if refine {
            let ctx = pixel_context_on(graph, features[i])?;
            let c = graph.matmul(averaging[i], ctx)?;
            let s = match semantic[i] {
                Some(s) => s,
                None => graph.constant(Tensor::zeros(graph.value(c).dims())),
            };
            let ft = refine_features(graph, features[i], c, s)?;
            let fhat = concat_features(graph, features[i], ft)?;
            let o_hat = refined_cam(graph, fhat, vars.refined)?;
            let logits = classification_logits(graph, o_hat)?;
            let ce_hat = ce_loss(graph, logits, &plan.images[i].present)?;
            ce = graph.add(ce, ce_hat)?;
            refined[i] = Some(o_hat);
        }
        ce_terms.push(ce);
    }
    let mut ce = ce_terms[0];
    for &t in &ce_terms[1..] {
        ce = graph.add(ce, t)?;
    }
    let ce = graph.scale(ce, 1.0 / n as f64)?;

    let zero = graph.constant(Tensor::scalar(0.0));
    let total = total_loss(
        graph,
        pgcl.unwrap_or(zero),
        sgcl.unwrap_or(zero),
        ce,
        alpha,
        beta,
    )?;
    Ok(Objective {
        total,
        ce,
        pgcl,
        sgcl,
        refined,
        diagnostics,
    })
}

/// A built tape for one batch.
pub struct Pass {
    pub graph: Graph<f64>,
    pub vars: ParamVars,
    pub features: Vec<Var>,
    pub cams: Vec<Var>,
    pub plan: BatchPlan,
    pub objective: Objective,
    pub grid: (usize, usize),
}

pub fn run_pass(
    state: &ModelState,
    samples: &[&Sample],
    cfg: &TrainConfig,
    seed: u64,
    trainable: bool,
) -> Result<Pass> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let dims = samples[0].image.dims();
    if samples.iter().any(|s| s.image.dims() != dims) {
        return Err(Error::Contract("batch images differ in size".into()));
    }
    let grid = state.encoder.output_dims(dims[0], dims[1]);
    let mut graph = Graph::new();
    let vars = state.register(&mut graph, trainable);
    let images: Vec<&Tensor<f64>> = samples.iter().map(|s| &s.image).collect();
    let (features, cams) = encode_batch(&mut graph, state, &vars, &images)?;
    let present: Vec<BTreeSet<u16>> = samples.iter().map(|s| s.present_classes()).collect();
    let plan = {
        let fv: Vec<&Tensor<f64>> = features.iter().map(|&f| graph.value(f)).collect();
        let ov: Vec<&Tensor<f64>> = cams.iter().map(|&o| graph.value(o)).collect();
        plan_batch(&fv, &ov, &present, grid, cfg, seed)?
    };
    let objective = build_objective(&mut graph, &vars, &features, &cams, &plan, cfg)?;
    Ok(Pass {
        graph,
        vars,
        features,
        cams,
        plan,
        objective,
        grid,
    })
}

/// Losses, score maps and label maps of one batch, without gradients.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub losses: LossBreakdown,
    pub cams: Vec<CamStack<f64>>,
    /// Equal to `cams` outside M4.
    pub refined_cams: Vec<CamStack<f64>>,
    pub labels: Vec<PseudoLabelMap>,
    pub refined_labels: Vec<PseudoLabelMap>,
    pub diagnostics: Diagnostics,
}

pub fn forward_batch(
    state: &ModelState,
    samples: &[&Sample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BatchOutput> {
    let pass = run_pass(state, samples, cfg, seed, false)?;
    let (h, w) = pass.grid;
    let stack = |v: Var, refined: bool| CamStack {
        height: h,
        width: w,
        scores: pass.graph.value(v).clone(),
        refined,
    };
    let cams: Vec<CamStack<f64>> = pass.cams.iter().map(|&o| stack(o, false)).collect();
    let refined_cams: Vec<CamStack<f64>> = pass
        .objective
        .refined
        .iter()
        .zip(&cams)
        .map(|(r, base)| r.map_or_else(|| base.clone(), |v| stack(v, true)))
        .collect();
    let refined_labels = refined_cams
        .iter()
        .zip(&pass.plan.images)
        .map(|(o, p)| cam::update_pseudo_labels(o, &p.present))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchOutput {
        losses: pass.objective.losses(&pass.graph),
        cams,
        refined_cams,
        labels: pass.plan.images.iter().map(|p| p.labels.clone()).collect(),
        refined_labels,
        diagnostics: pass.objective.diagnostics,
    })
}

/// Scores base and refined pseudo labels against the ground-truth masks,
/// upsampled to image resolution. Batches follow dataset order.
pub fn evaluate(
    state: &ModelState,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(IoUReport, IoUReport)> {
    let samples: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| s.mask.is_some())
        .collect();
    let factor = state.encoder.total_stride();
    let parts = samples
        .par_chunks(cfg.batch)
        .enumerate()
        .map(|(c, chunk)| {
            let out = forward_batch(
                state,
                chunk,
                cfg,
                stream_seed(cfg.seed, u64::MAX - c as u64),
            )?;
            let mut base = IouAccumulator::new(cfg.classes);
            let mut refined = IouAccumulator::new(cfg.classes);
            for ((s, y), yr) in chunk.iter().zip(&out.labels).zip(&out.refined_labels) {
                let Some(mask) = &s.mask else { continue };
                let (h, w) = (mask.dims()[0], mask.dims()[1]);
                base.add(&y.upsample(factor, h, w).labels, mask)?;
                refined.add(&yr.upsample(factor, h, w).labels, mask)?;
            }
            Ok((base, refined))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut base = IouAccumulator::new(cfg.classes);
    let mut refined = IouAccumulator::new(cfg.classes);
    for (b, r) in &parts {
        base.merge(b);
        refined.merge(r);
    }
    Ok((base.report(), refined.report()))
}

/// Features, pseudo labels and clusters of one image under `state`.
#[derive(Debug, Clone)]
pub struct ImageGroups {
    /// `[V, D]` encoder output.
    pub features: Tensor<f64>,
    pub labels: PseudoLabelMap,
    pub groups: GroupSet<f64>,
    pub classes: Vec<u16>,
}

impl ImageGroups {
    /// `[G, D]` member means.
    pub fn prototypes(&self) -> Result<Tensor<f64>> {
        crate::tensor::kernels::matmul(&self.groups.averaging_matrix(), &self.features)
    }
}

/// Clusters one image the way a training step would, with the background
/// group counted whether or not the mode uses the streams.
pub fn group_image(state: &ModelState, sample: &Sample, cfg: &TrainConfig) -> Result<ImageGroups> {
    let mut graph = Graph::new();
    let vars = state.register(&mut graph, false);
    let (features, cams) = encode_batch(&mut graph, state, &vars, &[&sample.image])?;
    let f = graph.value(features[0]).clone();
    let (h, w) = state
        .encoder
        .output_dims(sample.image.dims()[0], sample.image.dims()[1]);
    let present = sample.present_classes();
    let labels = pseudo_labels(graph.value(cams[0]), &present, h, w)?;
    let ctx = pixel_context(&f, &pixel_affinity(&f)?)?;
    let g = (present.len() - 1 + usize::from(cfg.background_group)).clamp(1, f.rows());
    let groups = cluster_pixels(&f, &ctx, g, stream_seed(cfg.seed, 5))?;
    let classes = assign_group_classes(&groups, labels.ids(), &present)?;
    Ok(ImageGroups {
        features: f,
        labels,
        groups,
        classes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub losses: LossBreakdown,
    pub miou_base: Option<f64>,
    pub miou_refined: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "step,loss_total,loss_ce,loss_pgcl,loss_sgcl,miou_base,miou_refined";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let l = &r.losses;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            l.total,
            l.ce,
            l.pgcl,
            l.sgcl,
            opt(r.miou_base),
            opt(r.miou_refined)
        )
        .unwrap();
    }
    out
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows))?;
    Ok(())
}

fn abort_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(term) => Error::NumericalAbort { step, term },
        other => other,
    }
}

/// One SGD-with-momentum update on a batch drawn from `(seed, step)`.
pub fn train_step(
    state: &mut ModelState,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let step = state.step;
    let n = dataset.samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64 + 1);
    let picks = index::sample(&mut rng, n, cfg.batch.min(n)).into_vec();
    let samples: Vec<&Sample> = picks.iter().map(|&i| &dataset.samples[i]).collect();
    let plan_seed = rng.random();
    let pass = run_pass(state, &samples, cfg, plan_seed, true).map_err(abort_at(step))?;
    let losses = pass.objective.losses(&pass.graph);
    for (term, v) in [
        ("ce", losses.ce),
        ("pgcl", losses.pgcl),
        ("sgcl", losses.sgcl),
        ("total", losses.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NumericalAbort { step, term });
        }
    }
    let grads = pass
        .graph
        .backward(pass.objective.total)
        .map_err(abort_at(step))?;
    let vars = pass.vars.all();
    let grads: Vec<Tensor<f64>> = state
        .params()
        .iter()
        .zip(vars)
        .map(|(p, var)| grads.get_or_zeros(var, p.dims()))
        .collect();
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let shrink = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    let (lr, mu) = (cfg.lr, cfg.momentum);
    let mut velocity = std::mem::take(&mut state.velocity);
    for ((p, v), g) in state
        .params_mut()
        .into_iter()
        .zip(&mut velocity)
        .zip(&grads)
    {
        let nv: Vec<f64> = v
            .data()
            .iter()
            .zip(g.data())
            .map(|(&v, &g)| mu * v + shrink * g)
            .collect();
        let np: Vec<f64> = p
            .data()
            .iter()
            .zip(&nv)
            .map(|(&w, &v)| w - lr * v)
            .collect();
        *v = Tensor::new(v.dims().to_vec(), nv)?;
        *p = Tensor::new(p.dims().to_vec(), np)?;
    }
    state.velocity = velocity;
    state.step += 1;
    Ok(losses)
}

/// Trains from `state` (or a fresh initialisation) until `cfg.steps`.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    state: Option<ModelState>,
) -> Result<(ModelState, Vec<MetricsRow>)> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if dataset.classes != cfg.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, config {}",
            dataset.classes, cfg.classes
        )));
    }
    let mut state = match state {
        Some(s) => s,
        None => ModelState::init(cfg)?,
    };
    let mut rows = Vec::new();
    while state.step < cfg.steps {
        let losses = train_step(&mut state, dataset, cfg)?;
        let step = state.step;
        let (mut miou_base, mut miou_refined) = (None, None);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (b, r) = evaluate(&state, dataset, cfg)?;
            miou_base = Some(b.miou);
            miou_refined = Some(r.miou);
        }
        rows.push(MetricsRow {
            step,
            losses,
            miou_base,
            miou_refined,
        });
    }
    Ok((state, rows))
}
