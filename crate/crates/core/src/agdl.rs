//! Unmixing by gradient descent on softmax logits, and stochastic dictionary
//! training with predicted, identity or exactly solved alignments.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dataset::Dataset;
use crate::dictionary::{reconstruct_var, DictionaryModel, Variant};
use crate::error::{Error, Result};
use crate::exact_ot::{solve_fgw, CgOptions};
use crate::graph::Graph;
use crate::io::Split;
use crate::loss::fgw_loss_var;
use crate::optim::AdamW;
use crate::predictor::{affinity, encode_nodes, encode_var, plan_head, PredictorParams};

/// Largest graph accepted by the exact-solver reference trainer.
pub const EXACT_SIZE_LIMIT: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanGradient {
    /// Differentiate the loss through the predicted plan.
    ThroughPredictor,
    /// Treat the predicted plan as a constant.
    StopGradient,
}

impl PlanGradient {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanGradient::ThroughPredictor => "through_predictor",
            PlanGradient::StopGradient => "stop_gradient",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "through_predictor" => Ok(PlanGradient::ThroughPredictor),
            "stop_gradient" => Ok(PlanGradient::StopGradient),
            _ => Err(Error::InvalidConfig(format!("unknown plan gradient mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub outer_lr: f64,
    pub inner_lr: f64,
    pub batch_size: usize,
    pub outer_weight_decay: f64,
    pub inner_weight_decay: f64,
    pub epochs: usize,
    pub graphs_per_epoch: usize,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub rho: f64,
    pub plan_gradient: PlanGradient,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_lr: 0.001,
            inner_lr: 0.09,
            batch_size: 32,
            outer_weight_decay: 1e-4,
            inner_weight_decay: 1e-7,
            epochs: 1000,
            graphs_per_epoch: 100,
            inner_tol: 1e-6,
            inner_max_iters: 200,
            rho: 0.9,
            plan_gradient: PlanGradient::ThroughPredictor,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_lr > 0.0 && self.inner_lr > 0.0 && self.inner_tol > 0.0 && self.rho > 0.0) {
            return Err(Error::InvalidConfig("learning rates, inner_tol and rho must be positive".into()));
        }
        if self.batch_size == 0 || self.graphs_per_epoch == 0 || self.inner_max_iters == 0 {
            return Err(Error::InvalidConfig("batch_size, graphs_per_epoch and inner_max_iters must be at least 1".into()));
        }
        if self.outer_weight_decay < 0.0 || self.inner_weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight decays must be nonnegative".into()));
        }
        Ok(())
    }
}

/// How a data graph is matched to its reconstruction.
#[derive(Clone, Copy, Debug)]
pub enum Alignment<'a> {
    /// Plans from the amortized predictor at the configured `rho`.
    Predicted(&'a PredictorParams),
    /// Node `j` of the data graph is node `j` of the reconstruction; the loss
    /// is the mean squared feature residual.
    Identity,
    /// Plans from the conditional-gradient solver, held constant.
    Exact(&'a CgOptions),
}

/// Per-call state: cached encodings and the reconstruction affinity.
struct Aligner<'a> {
    model: &'a DictionaryModel,
    align: Alignment<'a>,
    alpha: f64,
    rho: f64,
    mode: PlanGradient,
    recon_affinity: Option<Array2<f64>>,
}

impl<'a> Aligner<'a> {
    fn new(model: &'a DictionaryModel, align: Alignment<'a>, alpha: f64, cfg: &TrainConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::OutOfRange { what: "alpha", value: alpha, lo: 0.0, hi: 1.0 });
        }
        let recon_affinity = match align {
            Alignment::Predicted(p) => {
                if p.config.feature_dim != model.d {
                    return Err(Error::DimensionMismatch(format!(
                        "predictor expects {} feature channels, dictionary has {}",
                        p.config.feature_dim, model.d
                    )));
                }
                Some(affinity(&model.structure, p.config.affinity_bandwidth))
            }
            _ => None,
        };
        Ok(Self { model, align, alpha, rho: cfg.rho, mode: cfg.plan_gradient, recon_affinity })
    }

    fn check_graph(&self, g: &Graph) -> Result<()> {
        if g.d() != self.model.d {
            return Err(Error::DimensionMismatch(format!("graph has {} channels, dictionary has {}", g.d(), self.model.d)));
        }
        match self.align {
            Alignment::Identity if g.n() != self.model.n => Err(Error::DimensionMismatch(format!(
                "identity alignment needs {} nodes, graph has {}",
                self.model.n,
                g.n()
            ))),
            Alignment::Exact(_) if g.n() > EXACT_SIZE_LIMIT || self.model.n > EXACT_SIZE_LIMIT => {
                Err(Error::SizeGuardExceeded { what: "exact alignment graph size", got: g.n().max(self.model.n), limit: EXACT_SIZE_LIMIT })
            }
            _ => Ok(()),
        }
    }

    /// Encoding of a data graph, reused across iterations at fixed alpha.
    fn data_encoding(&self, g: &Graph) -> Result<Option<Array2<f64>>> {
        match self.align {
            Alignment::Predicted(p) => Ok(Some(encode_nodes(g, self.alpha, self.rho, p)?)),
            _ => Ok(None),
        }
    }

    /// Unmixing loss of `g` against the reconstruction with features `rec`.
    fn loss<'t>(&self, g: &Graph, enc: Option<&Array2<f64>>, rec: Var<'t>) -> Result<Var<'t>> {
        let tape = rec.tape();
        let f = tape.constant(g.features.clone());
        let c = &self.model.structure;
        match self.align {
            Alignment::Identity => Ok(rec.sub(f)?.square().sum().scale(1.0 / g.n() as f64)),
            Alignment::Exact(opts) => {
                let target = Graph::new(rec.to_array(), c.clone());
                let plan = solve_fgw(g, &target, self.alpha, opts)?.plan.plan;
                fgw_loss_var(f, &g.structure, rec, c, tape.constant(plan), self.alpha)
            }
            Alignment::Predicted(params) => {
                let enc = enc.expect("predicted alignment caches data encodings");
                let vars = params.to_vars(tape, false);
                let (a, r) = (tape.scalar(self.alpha), tape.scalar(self.rho));
                let aff = tape.constant(self.recon_affinity.clone().expect("set for predicted alignment"));
                let rec_in = match self.mode {
                    PlanGradient::ThroughPredictor => rec,
                    PlanGradient::StopGradient => tape.constant(rec.to_array()),
                };
                let v = encode_var(&params.config, &vars, rec_in, aff, a, r)?;
                let mut plan = plan_head(&params.config, tape.constant(enc.clone()), v)?;
                if self.mode == PlanGradient::StopGradient {
                    plan = tape.constant(plan.to_array());
                }
                fgw_loss_var(f, &g.structure, rec, c, plan, self.alpha)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnmixResult {
    pub omegas: Vec<Array1<f64>>,
    /// Gradient steps taken.
    pub iterations: usize,
    /// Whether the logit-change norm fell to the tolerance before the cap.
    pub converged: bool,
    /// Batch logit-change norm after each step.
    pub deltas: Vec<f64>,
}

fn softmax(z: &Array2<f64>) -> Array1<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let e = z.row(0).mapv(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

/// Simplex weights for each graph of a batch: AdamW on logits from zero until
/// the batch logit-change norm drops to `cfg.inner_tol` or
/// `cfg.inner_max_iters` steps have been taken.
pub fn unmix(graphs: &[&Graph], model: &DictionaryModel, alpha: f64, align: Alignment, cfg: &TrainConfig) -> Result<UnmixResult> {
    cfg.validate()?;
    let ctx = Aligner::new(model, align, alpha, cfg)?;
    let encodings = graphs
        .iter()
        .map(|g| {
            ctx.check_graph(g)?;
            ctx.data_encoding(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let atoms = {
        let tape = Tape::new();
        model.atoms_var(&model.to_vars(&tape, false), alpha)?.to_array()
    };
    let mut z = vec![Array2::zeros((1, model.k)); graphs.len()];
    let mut opt = AdamW::new(cfg.inner_lr, cfg.inner_weight_decay);
    let mut deltas = Vec::new();
    let mut converged = false;
    while deltas.len() < cfg.inner_max_iters {
        let mut grads = Vec::with_capacity(graphs.len());
        for (i, g) in graphs.iter().enumerate() {
            let tape = Tape::new();
            let zi = tape.var(z[i].clone());
            let rec = reconstruct_var(tape.constant(atoms.clone()), zi.row_softmax(), model.n, model.d)?;
            let loss = ctx.loss(g, encodings[i].as_ref(), rec)?;
            if !loss.item().is_finite() {
                return Err(Error::NonFiniteLoss(format!("unmixing graph {} at alpha {alpha}", label(g, i))));
            }
            grads.push(tape.backward(loss)?.get(zi));
        }
        let before = z.clone();
        opt.step(&mut z, &grads);
        let delta = z.iter().zip(&before).map(|(a, b)| (a - b).mapv(|x| x * x).sum()).sum::<f64>().sqrt();
        deltas.push(delta);
        if delta <= cfg.inner_tol {
            converged = true;
            break;
        }
    }
    Ok(UnmixResult { omegas: z.iter().map(softmax).collect(), iterations: deltas.len(), converged, deltas })
}

fn label(g: &Graph, index: usize) -> String {
    match (g.subject_id(), g.contrast_id()) {
        (Some(s), Some(c)) => format!("{s}/{c}"),
        _ => format!("#{index}"),
    }
}

/// Unmixing loss of `g` at the given weights, with plans recomputed there.
pub fn unmixing_loss(g: &Graph, model: &DictionaryModel, omega: &Array1<f64>, alpha: f64, align: Alignment, cfg: &TrainConfig) -> Result<f64> {
    let ctx = Aligner::new(model, align, alpha, cfg)?;
    ctx.check_graph(g)?;
    let enc = ctx.data_encoding(g)?;
    let tape = Tape::new();
    let atoms = model.atoms_var(&model.to_vars(&tape, false), alpha)?;
    let rec = reconstruct_var(atoms, tape.constant(omega.clone().insert_axis(Axis(0))), model.n, model.d)?;
    Ok(ctx.loss(g, enc.as_ref(), rec)?.item())
}

/// Unmixing loss on a tape as a function of the logits `z` (1×K) and the
/// dictionary tensors `vars`, the quantity `unmix` and `dictionary_gradient`
/// differentiate.
pub fn unmixing_loss_var<'t>(
    g: &Graph,
    model: &DictionaryModel,
    vars: &[Var<'t>],
    z: Var<'t>,
    alpha: f64,
    align: Alignment,
    cfg: &TrainConfig,
) -> Result<Var<'t>> {
    let ctx = Aligner::new(model, align, alpha, cfg)?;
    ctx.check_graph(g)?;
    let enc = ctx.data_encoding(g)?;
    let rec = reconstruct_var(model.atoms_var(vars, alpha)?, z.row_softmax(), model.n, model.d)?;
    ctx.loss(g, enc.as_ref(), rec)
}

/// Mean batch loss and its gradient with respect to every dictionary tensor,
/// with plans recomputed at the given weights.
pub fn dictionary_gradient(
    graphs: &[&Graph],
    omegas: &[Array1<f64>],
    model: &DictionaryModel,
    alpha: f64,
    align: Alignment,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let ctx = Aligner::new(model, align, alpha, cfg)?;
    let mut total = 0.0;
    let mut grads: Vec<Array2<f64>> = model.tensors.iter().map(|(_, t)| Array2::zeros(t.dim())).collect();
    for (i, (g, w)) in graphs.iter().zip(omegas).enumerate() {
        ctx.check_graph(g)?;
        let enc = ctx.data_encoding(g)?;
        let tape = Tape::new();
        let vars = model.to_vars(&tape, true);
        let atoms = model.atoms_var(&vars, alpha)?;
        let rec = reconstruct_var(atoms, tape.constant(w.clone().insert_axis(Axis(0))), model.n, model.d)?;
        let loss = ctx.loss(g, enc.as_ref(), rec)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(format!("dictionary step on graph {} at alpha {alpha}", label(g, i))));
        }
        total += value;
        let gr = tape.backward(loss.scale(1.0 / graphs.len() as f64))?;
        for (acc, v) in grads.iter_mut().zip(&vars) {
            *acc += &gr.get(*v);
        }
    }
    Ok((total / graphs.len() as f64, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStep {
    pub step: usize,
    pub epoch: usize,
    pub alpha: f64,
    pub loss: f64,
    pub inner_iters: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DictionaryModel,
    pub trace: Vec<TrainStep>,
}

/// Which alpha each outer step uses.
#[derive(Clone, Copy, Debug)]
enum AlphaSchedule {
    Uniform,
    Fixed(f64),
}

/// Index batches of one epoch. Each epoch draws `graphs_per_epoch` graphs,
/// without replacement when the pool is large enough and with replacement
/// otherwise, and keeps only full batches. A draw smaller than one batch is
/// used whole.
pub fn epoch_batches(pool: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let drawn: Vec<usize> = if pool >= cfg.graphs_per_epoch {
        let mut idx: Vec<usize> = (0..pool).collect();
        idx.shuffle(rng);
        idx.truncate(cfg.graphs_per_epoch);
        idx
    } else {
        (0..cfg.graphs_per_epoch).map(|_| rng.random_range(0..pool)).collect()
    };
    if drawn.len() < cfg.batch_size {
        return vec![drawn];
    }
    drawn.chunks_exact(cfg.batch_size).map(|c| c.to_vec()).collect()
}

fn train_loop(graphs: &[Graph], mut model: DictionaryModel, align: Alignment, schedule: AlphaSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if graphs.is_empty() {
        return Err(Error::InsufficientData { what: "training graphs", needed: 1, found: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.outer_lr, cfg.outer_weight_decay);
    let mut trace = Vec::new();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(graphs.len(), cfg, &mut rng) {
            let alpha = match schedule {
                AlphaSchedule::Uniform => rng.random_range(0.0..=1.0),
                AlphaSchedule::Fixed(a) => a,
            };
            let refs: Vec<&Graph> = batch.iter().map(|&i| &graphs[i]).collect();
            let mixed = unmix(&refs, &model, alpha, align, cfg)?;
            let (loss, grads) = dictionary_gradient(&refs, &mixed.omegas, &model, alpha, align, cfg)?;
            let mut arrays = model.arrays();
            opt.step(&mut arrays, &grads);
            model.set_arrays(arrays);
            trace.push(TrainStep {
                step: trace.len(),
                epoch,
                alpha,
                loss,
                inner_iters: mixed.iterations,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(TrainOutcome { model, trace })
}

fn native_train_graphs(ds: &Dataset) -> Result<Vec<Graph>> {
    let graphs: Vec<Graph> = ds.split(Split::Train).into_iter().map(|s| s.native.clone()).collect();
    if graphs.is_empty() {
        return Err(Error::InsufficientData { what: "native training graphs", needed: 1, found: 0 });
    }
    Ok(graphs)
}

/// Dictionary learning on native geometries with predicted plans and a fresh
/// uniform alpha per outer step.
pub fn train_agdl(ds: &Dataset, predictor: &PredictorParams, init: DictionaryModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    predictor.validate()?;
    train_loop(&native_train_graphs(ds)?, init, Alignment::Predicted(predictor), AlphaSchedule::Uniform, cfg)
}

/// Least-squares dictionary learning on common-geometry projections.
pub fn train_baseline_common(ds: &Dataset, init: DictionaryModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if init.variant != Variant::Fixed {
        return Err(Error::InvalidConfig("the common-geometry baseline learns fixed atoms".into()));
    }
    let graphs: Vec<Graph> = ds.split(Split::Train).into_iter().filter_map(|s| s.common.clone()).collect();
    if graphs.is_empty() {
        return Err(Error::InsufficientData { what: "common-geometry training graphs", needed: 1, found: 0 });
    }
    if let Some(g) = graphs.iter().find(|g| g.n() != init.n) {
        return Err(Error::DimensionMismatch(format!("common graph has {} nodes, template has {}", g.n(), init.n)));
    }
    train_loop(&graphs, init, Alignment::Identity, AlphaSchedule::Fixed(0.0), cfg)
}

/// Dictionary learning with exactly solved plans at one fixed alpha, for small
/// graphs only.
pub fn train_gdl_exact(ds: &Dataset, alpha: f64, init: DictionaryModel, cfg: &TrainConfig, solver: &CgOptions) -> Result<TrainOutcome> {
    let graphs = native_train_graphs(ds)?;
    if let Some(g) = graphs.iter().find(|g| g.n() > EXACT_SIZE_LIMIT) {
        return Err(Error::SizeGuardExceeded { what: "exact alignment graph size", got: g.n(), limit: EXACT_SIZE_LIMIT });
    }
    train_loop(&graphs, init, Alignment::Exact(solver), AlphaSchedule::Fixed(alpha), cfg)
}

/// Mean of the trailing-window averages of `values`, one per position.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
