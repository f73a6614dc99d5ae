//! Amortized transport-plan predictor and its FUGW pretraining.
//!
//! Both graphs go through one shared encoder. Node inputs are the features
//! concatenated with a soft-bin code of `alpha` and a scaled `log rho`. Each
//! layer mixes neighbours through a row-normalized affinity
//! `exp(-C / sigma)` with the diagonal masked. A node MLP with a linear skip
//! from the inputs produces the encodings. Scores `a * U V^T` pass through a
//! few log-domain row/column balancing steps and a final rescale to unit mass.
//! Every stage costs `O(n1 n2)` for fixed widths.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::autodiff::{concat_cols, Tape, Var};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::exact_ot::{marginal_violation, outer, TransportPlan};
use crate::graph::Graph;
use crate::io::Split;
use crate::loss::{fugw_loss, fugw_loss_var, LossParams};
use crate::optim::AdamW;

pub const PARAMS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub n_embed_layers: usize,
    pub gcn_hidden: usize,
    pub node_out_dim: usize,
    pub alpha_embed_dim: usize,
    pub mlp_hidden: usize,
    pub temperature: f64,
    /// Balancing steps used on the training tape.
    pub head_balancing_steps: usize,
    /// Balancing steps used by `predict_plan`; more steps bring the plan
    /// closer to the polytope before rounding.
    pub inference_balancing_steps: usize,
    pub affinity_bandwidth: f64,
    pub feature_dim: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            n_embed_layers: 3,
            gcn_hidden: 128,
            node_out_dim: 64,
            alpha_embed_dim: 16,
            mlp_hidden: 1024,
            temperature: 10.0,
            head_balancing_steps: 5,
            inference_balancing_steps: 100,
            affinity_bandwidth: 0.2,
            feature_dim: 3,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_embed_layers", self.n_embed_layers),
            ("gcn_hidden", self.gcn_hidden),
            ("node_out_dim", self.node_out_dim),
            ("alpha_embed_dim", self.alpha_embed_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("predictor {name} must be at least 1")));
            }
        }
        if !(self.temperature > 0.0) || !(self.affinity_bandwidth > 0.0) {
            return Err(Error::InvalidConfig("predictor temperature and affinity bandwidth must be positive".into()));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.feature_dim + self.alpha_embed_dim + 1
    }
}

/// Named weight tensors in a fixed order, plus the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub config: PredictorConfig,
    pub version: u32,
    pub tensors: Vec<(String, Array2<f64>)>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl PredictorParams {
    pub fn init(config: &PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4544);
        let (din, h) = (config.input_dim(), config.gcn_hidden);
        let mut tensors = Vec::new();
        for l in 0..config.n_embed_layers {
            let inp = if l == 0 { din } else { h };
            tensors.push((format!("layer{l}.msg"), glorot(&mut rng, inp, h, 1.0)));
            tensors.push((format!("layer{l}.self"), glorot(&mut rng, inp, h, 1.0)));
            tensors.push((format!("layer{l}.bias"), Array2::zeros((1, h))));
        }
        let (m, out) = (config.mlp_hidden, config.node_out_dim);
        tensors.push(("mlp.hidden".into(), glorot(&mut rng, h, m, 1.0)));
        tensors.push(("mlp.hidden_bias".into(), Array2::zeros((1, m))));
        // small output weights keep the initial plans close to uniform
        tensors.push(("mlp.out".into(), glorot(&mut rng, m, out, 0.1)));
        tensors.push(("mlp.out_bias".into(), Array2::zeros((1, out))));
        tensors.push(("skip".into(), glorot(&mut rng, din, out, 0.1)));
        Ok(Self { config: config.clone(), version: PARAMS_VERSION, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn arrays(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_arrays(&mut self, arrays: Vec<Array2<f64>>) {
        for ((_, t), a) in self.tensors.iter_mut().zip(arrays) {
            *t = a;
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every tensor on `tape`, as variables or as constants.
    pub fn to_vars<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.tensors
            .iter()
            .map(|(_, t)| if trainable { tape.var(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Checks tensor shapes against the config.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::init(&self.config, 0)?;
        if fresh.tensors.len() != self.tensors.len() {
            return Err(Error::InvalidConfig("predictor tensor count does not match its config".into()));
        }
        for ((n1, a), (n2, b)) in fresh.tensors.iter().zip(&self.tensors) {
            if n1 != n2 || a.dim() != b.dim() {
                return Err(Error::InvalidConfig(format!("predictor tensor {n2} has shape {:?}, expected {n1} {:?}", b.dim(), a.dim())));
            }
            if b.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteEntry { matrix: "predictor", i: 0, j: 0 });
            }
        }
        Ok(())
    }
}

/// Row-normalized `exp(-C / sigma)` with zero diagonal.
pub fn affinity(structure: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let n = structure.nrows();
    let mut a = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { (-structure[[i, j]] / sigma).exp() });
    for mut row in a.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    a
}

fn rho_code(rho: Var<'_>) -> Var<'_> {
    // log10(rho) / 7 maps the sampling range [1e-7, 1] onto [-1, 0]
    rho.log().scale(1.0 / (7.0 * std::f64::consts::LN_10))
}

/// Node encodings on a tape. `affinity` is normally a constant.
pub fn encode_var<'t>(
    cfg: &PredictorConfig,
    vars: &[Var<'t>],
    features: Var<'t>,
    affinity: Var<'t>,
    alpha: Var<'t>,
    rho: Var<'t>,
) -> Result<Var<'t>> {
    let n = features.shape().0;
    if features.shape().1 != cfg.feature_dim {
        return Err(Error::ShapeMismatch { op: "encode", lhs: features.shape(), rhs: (n, cfg.feature_dim) });
    }
    let code = concat_cols(&[
        features,
        alpha.softbin(cfg.alpha_embed_dim)?.broadcast_row(n)?,
        rho_code(rho).broadcast_row(n)?,
    ])?;
    let mut h = code;
    for l in 0..cfg.n_embed_layers {
        let (msg, own, bias) = (vars[3 * l], vars[3 * l + 1], vars[3 * l + 2]);
        h = affinity.matmul(h)?.matmul(msg)?.add(h.matmul(own)?)?.add_row(bias)?.relu();
    }
    let k = 3 * cfg.n_embed_layers;
    let hidden = h.matmul(vars[k])?.add_row(vars[k + 1])?.relu();
    hidden.matmul(vars[k + 2])?.add_row(vars[k + 3])?.add(code.matmul(vars[k + 4])?)
}

/// Plan from two sets of encodings: scaled scores, balancing, unit mass.
pub fn plan_head<'t>(cfg: &PredictorConfig, u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    balanced_head(cfg, u, v, cfg.head_balancing_steps)
}

fn balanced_head<'t>(cfg: &PredictorConfig, u: Var<'t>, v: Var<'t>, steps: usize) -> Result<Var<'t>> {
    let (n1, n2) = (u.shape().0, v.shape().0);
    let mut s = u.matmul(v.t())?.scale(cfg.temperature);
    let (log_a, log_b) = (-(n1 as f64).ln(), -(n2 as f64).ln());
    for _ in 0..steps {
        s = s.sub(s.row_logsumexp().add_scalar(-log_a).broadcast_col(n2)?)?;
        s = s.sub(s.col_logsumexp().add_scalar(-log_b).broadcast_row(n1)?)?;
    }
    let total = s.row_logsumexp().t().row_logsumexp();
    s.sub(total.broadcast_row(n1)?.broadcast_col(n2)?).map(Var::exp)
}

/// Encodings of a prepared graph at fixed `(alpha, rho)`.
pub fn encode_nodes(g: &Graph, alpha: f64, rho: f64, params: &PredictorParams) -> Result<Array2<f64>> {
    check_conditioning(alpha, rho)?;
    let cfg = &params.config;
    let tape = Tape::new();
    let vars = params.to_vars(&tape, false);
    let u = encode_var(
        cfg,
        &vars,
        tape.constant(g.features.clone()),
        tape.constant(affinity(&g.structure, cfg.affinity_bandwidth)),
        tape.scalar(alpha),
        tape.scalar(rho),
    )?;
    Ok(u.to_array())
}

fn check_conditioning(alpha: f64, rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange { what: "alpha", value: alpha, lo: 0.0, hi: 1.0 });
    }
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::OutOfRange { what: "rho", value: rho, lo: 0.0, hi: f64::INFINITY });
    }
    Ok(())
}

/// One forward pass from two graphs to a strictly positive unit-mass plan.
pub fn predict_plan(g1: &Graph, g2: &Graph, alpha: f64, rho: f64, params: &PredictorParams) -> Result<TransportPlan> {
    check_conditioning(alpha, rho)?;
    if g1.d() != g2.d() {
        return Err(Error::ShapeMismatch { op: "predict_plan", lhs: g1.features.dim(), rhs: g2.features.dim() });
    }
    let cfg = &params.config;
    let tape = Tape::new();
    let vars = params.to_vars(&tape, false);
    let (a, r) = (tape.scalar(alpha), tape.scalar(rho));
    let enc = |g: &Graph| {
        encode_var(
            cfg,
            &vars,
            tape.constant(g.features.clone()),
            tape.constant(affinity(&g.structure, cfg.affinity_bandwidth)),
            a,
            r,
        )
    };
    let (u, v) = (enc(g1)?.to_array(), enc(g2)?.to_array());
    let plan = balance_scores(u.dot(&v.t()) * cfg.temperature, cfg.inference_balancing_steps);
    Ok(TransportPlan::with_uniform_targets(plan))
}

/// The balancing head on plain arrays, in place: the same arithmetic as
/// `balanced_head` without keeping every intermediate on a tape.
fn balance_scores(mut s: Array2<f64>, steps: usize) -> Array2<f64> {
    let (n1, n2) = s.dim();
    let (log_a, log_b) = (-(n1 as f64).ln(), -(n2 as f64).ln());
    let mut col_max = Array1::zeros(n2);
    let mut col_sum = Array1::zeros(n2);
    for _ in 0..steps {
        for mut row in s.rows_mut() {
            let shift = log_sum_exp(row.iter().copied()) - log_a;
            row.mapv_inplace(|x| x - shift);
        }
        // column log-sum-exp accumulated row by row to keep access contiguous
        col_max.fill(f64::NEG_INFINITY);
        for row in s.rows() {
            col_max.zip_mut_with(&row, |m, &x| *m = f64::max(*m, x));
        }
        col_sum.fill(0.0);
        for row in s.rows() {
            ndarray::Zip::from(&mut col_sum).and(&row).and(&col_max).for_each(|acc, &x, &m| *acc += (x - m).exp());
        }
        let shift = ndarray::Zip::from(&col_max).and(&col_sum).map_collect(|&m, &t| m + t.ln() - log_b);
        for mut row in s.rows_mut() {
            row -= &shift;
        }
    }
    let total = log_sum_exp(s.rows().into_iter().map(|row| log_sum_exp(row.iter().copied())));
    s.mapv_inplace(|x| (x - total).exp());
    s
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Rounds a near-feasible plan onto the transport polytope: scale rows down
/// to at most `a`, columns down to at most `b`, then add the rank-one
/// correction that restores both marginals.
pub fn project_to_polytope(p: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> Result<TransportPlan> {
    if p.dim() != (a.len(), b.len()) {
        return Err(Error::DimensionMismatch(format!("plan {:?} vs marginals {} and {}", p.dim(), a.len(), b.len())));
    }
    if p.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::DegenerateInput("plan has negative or non-finite entries".into()));
    }
    if p.iter().all(|x| *x == 0.0) {
        return Err(Error::DegenerateInput("plan is identically zero".into()));
    }
    if marginal_violation(p, a, b) <= 1e-15 {
        return Ok(TransportPlan { plan: p.clone(), source: a.clone(), target: b.clone() });
    }
    let mut q = p.clone();
    let rows = q.sum_axis(Axis(1));
    for (i, mut row) in q.rows_mut().into_iter().enumerate() {
        if rows[i] > a[i] {
            row *= a[i] / rows[i];
        }
    }
    let cols = q.sum_axis(Axis(0));
    for (j, mut col) in q.columns_mut().into_iter().enumerate() {
        if cols[j] > b[j] {
            col *= b[j] / cols[j];
        }
    }
    let err_r = a - &q.sum_axis(Axis(1));
    let err_c = b - &q.sum_axis(Axis(0));
    let l1 = err_r.sum();
    if l1 > 0.0 {
        q += &(outer(&err_r, &err_c) / l1);
    }
    Ok(TransportPlan { plan: q, source: a.clone(), target: b.clone() })
}

/// L1 distance of both marginals from their targets.
pub fn marginal_l1(p: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let r: f64 = p.sum_axis(Axis(1)).iter().zip(a).map(|(x, y)| (x - y).abs()).sum();
    let c: f64 = p.sum_axis(Axis(0)).iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    r + c
}

/// Distribution of `(alpha, rho)` during pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSampler {
    pub alpha_beta: (f64, f64),
    pub rho_range: (f64, f64),
    /// Probability that the second graph of a pair is on the common geometry.
    pub native_common_frac: f64,
}

impl Default for PretrainSampler {
    fn default() -> Self {
        Self { alpha_beta: (0.5, 0.5), rho_range: (1e-7, 1.0), native_common_frac: 0.5 }
    }
}

impl PretrainSampler {
    pub fn sample_alpha(&self, rng: &mut impl Rng) -> Result<f64> {
        let beta = Beta::new(self.alpha_beta.0, self.alpha_beta.1)
            .map_err(|e| Error::InvalidConfig(format!("alpha distribution: {e}")))?;
        Ok(beta.sample(rng).clamp(0.0, 1.0))
    }

    pub fn sample_rho(&self, rng: &mut impl Rng) -> f64 {
        let (lo, hi) = (self.rho_range.0.ln(), self.rho_range.1.ln());
        rng.random_range(lo..=hi).exp().clamp(self.rho_range.0, self.rho_range.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub val_pairs: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 20, pairs_per_epoch: 640, batch_size: 64, lr: 0.002, weight_decay: 0.01, val_pairs: 64, seed: 0 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.val_pairs == 0 || !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("pretraining needs batch_size, val_pairs, lr > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// A graph pair with its conditioning.
#[derive(Clone, Debug)]
pub struct PairDraw {
    pub first: usize,
    pub second: usize,
    pub second_common: bool,
    pub alpha: f64,
    pub rho: f64,
}

/// Graph with its cached affinity matrix.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub graph: Graph,
    pub affinity: Array2<f64>,
}

impl Prepared {
    pub fn new(graph: Graph, cfg: &PredictorConfig) -> Self {
        let affinity = affinity(&graph.structure, cfg.affinity_bandwidth);
        Self { graph, affinity }
    }
}

struct PairPool {
    natives: Vec<Prepared>,
    commons: Vec<Option<Prepared>>,
    labels: Vec<String>,
}

impl PairPool {
    fn new(samples: &[&Sample], cfg: &PredictorConfig) -> Self {
        Self {
            natives: samples.iter().map(|s| Prepared::new(s.native.clone(), cfg)).collect(),
            commons: samples.iter().map(|s| s.common.clone().map(|g| Prepared::new(g, cfg))).collect(),
            labels: samples.iter().map(|s| format!("{}/{}", s.subject, s.contrast)).collect(),
        }
    }

    fn second(&self, draw: &PairDraw) -> &Prepared {
        if draw.second_common {
            self.commons[draw.second].as_ref().expect("sampled only where present")
        } else {
            &self.natives[draw.second]
        }
    }

    fn sample(&self, count: usize, sampler: &PretrainSampler, rng: &mut ChaCha8Rng) -> Result<Vec<PairDraw>> {
        let n = self.natives.len();
        let with_common: Vec<usize> = (0..n).filter(|&i| self.commons[i].is_some()).collect();
        (0..count)
            .map(|_| {
                let first = rng.random_range(0..n);
                let use_common = !with_common.is_empty() && rng.random::<f64>() < sampler.native_common_frac;
                let second = if use_common { with_common[rng.random_range(0..with_common.len())] } else { rng.random_range(0..n) };
                Ok(PairDraw { first, second, second_common: use_common, alpha: sampler.sample_alpha(rng)?, rho: sampler.sample_rho(rng) })
            })
            .collect()
    }
}

/// FUGW loss of the predicted plan for one pair, on a tape.
pub fn pair_loss_var<'t>(
    cfg: &PredictorConfig,
    vars: &[Var<'t>],
    g1: &Prepared,
    g2: &Prepared,
    alpha: f64,
    rho: f64,
) -> Result<Var<'t>> {
    let tape = vars[0].tape();
    let (a, r) = (tape.scalar(alpha), tape.scalar(rho));
    let f1 = tape.constant(g1.graph.features.clone());
    let f2 = tape.constant(g2.graph.features.clone());
    let u = encode_var(cfg, vars, f1, tape.constant(g1.affinity.clone()), a, r)?;
    let v = encode_var(cfg, vars, f2, tape.constant(g2.affinity.clone()), a, r)?;
    let p = plan_head(cfg, u, v)?;
    fugw_loss_var(f1, &g1.graph.structure, f2, &g2.graph.structure, p, LossParams::new(alpha, rho)?)
}

fn pair_loss_value(params: &PredictorParams, g1: &Prepared, g2: &Prepared, alpha: f64, rho: f64) -> Result<f64> {
    let tape = Tape::new();
    let vars = params.to_vars(&tape, false);
    Ok(pair_loss_var(&params.config, &vars, g1, g2, alpha, rho)?.item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_fugw: f64,
    pub val_fugw: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: PredictorParams,
    /// Epoch 0 is the untrained model.
    pub trace: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    /// Mean validation FUGW of the uniform product plan on the validation pairs.
    pub uniform_val_fugw: f64,
}

/// Stochastic minimization of the expected FUGW loss of predicted plans over
/// train-split pairs. Returns the parameters with the best validation loss.
pub fn pretrain_predictor(
    ds: &Dataset,
    cfg: &PredictorConfig,
    pcfg: &PretrainConfig,
    sampler: &PretrainSampler,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    pcfg.validate()?;
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Err(Error::InsufficientData { what: "train graphs", needed: 1, found: 0 });
    }
    let val = {
        let v = ds.split(Split::Val);
        if v.is_empty() { train.clone() } else { v }
    };
    let train_pool = PairPool::new(&train, cfg);
    let val_pool = PairPool::new(&val, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let val_draws = val_pool.sample(pcfg.val_pairs, sampler, &mut ChaCha8Rng::seed_from_u64(pcfg.seed ^ 0x7661_6c))?;

    let mut params = PredictorParams::init(cfg, pcfg.seed)?;
    let evaluate = |params: &PredictorParams| -> Result<f64> {
        let mut total = 0.0;
        for s in &val_draws {
            let l = pair_loss_value(params, &val_pool.natives[s.first], val_pool.second(s), s.alpha, s.rho)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "validation pair {} vs {}, alpha {}, rho {}",
                    val_pool.labels[s.first], val_pool.labels[s.second], s.alpha, s.rho
                )));
            }
            total += l;
        }
        Ok(total / val_draws.len() as f64)
    };
    let uniform_val_fugw = val_draws
        .iter()
        .map(|s| {
            let (g1, g2) = (&val_pool.natives[s.first].graph, &val_pool.second(s).graph);
            fugw_loss(g1, g2, &outer(&g1.mass(), &g2.mass()), LossParams::new(s.alpha, s.rho)?)
        })
        .sum::<Result<f64>>()?
        / val_draws.len() as f64;

    let start = Instant::now();
    let initial = evaluate(&params)?;
    let mut trace = vec![PretrainEpoch { epoch: 0, train_fugw: f64::NAN, val_fugw: initial, seconds: 0.0 }];
    let mut best = (initial, 0usize, params.clone());
    let mut opt = AdamW::new(pcfg.lr, pcfg.weight_decay);
    let steps = (pcfg.pairs_per_epoch / pcfg.batch_size).max(1);

    for epoch in 1..=pcfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps {
            let draws = train_pool.sample(pcfg.batch_size, sampler, &mut rng)?;
            let mut grads: Vec<Array2<f64>> = params.tensors.iter().map(|(_, t)| Array2::zeros(t.dim())).collect();
            for s in &draws {
                let tape = Tape::new();
                let vars = params.to_vars(&tape, true);
                let loss = pair_loss_var(cfg, &vars, &train_pool.natives[s.first], train_pool.second(s), s.alpha, s.rho)?;
                let value = loss.item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss(format!(
                        "pair {} vs {} ({}), alpha {}, rho {}",
                        train_pool.labels[s.first],
                        train_pool.labels[s.second],
                        if s.second_common { "common" } else { "native" },
                        s.alpha,
                        s.rho
                    )));
                }
                epoch_loss += value;
                let g = tape.backward(loss.scale(1.0 / draws.len() as f64))?;
                for (acc, v) in grads.iter_mut().zip(&vars) {
                    *acc += &g.get(*v);
                }
            }
            let mut arrays = params.arrays();
            opt.step(&mut arrays, &grads);
            params.set_arrays(arrays);
        }
        let val_fugw = evaluate(&params)?;
        trace.push(PretrainEpoch {
            epoch,
            train_fugw: epoch_loss / (steps * pcfg.batch_size) as f64,
            val_fugw,
            seconds: start.elapsed().as_secs_f64(),
        });
        if val_fugw < best.0 {
            best = (val_fugw, epoch, params.clone());
        }
    }
    Ok(PretrainOutcome { params: best.2, trace, best_epoch: best.1, uniform_val_fugw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::graph::uniform_mass;
    use rand::seq::SliceRandom;

    fn small_config() -> PredictorConfig {
        PredictorConfig { n_embed_layers: 2, gcn_hidden: 6, node_out_dim: 4, alpha_embed_dim: 4, mlp_hidden: 8, ..Default::default() }
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Graph {
        let f = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let mut c = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.random_range(0.05..1.0);
                c[[i, j]] = v;
                c[[j, i]] = v;
            }
        }
        Graph::new(f, c)
    }

    #[test]
    fn default_config_matches_reference_table() {
        let c = PredictorConfig::default();
        assert_eq!((c.n_embed_layers, c.gcn_hidden, c.node_out_dim), (3, 128, 64));
        assert_eq!((c.alpha_embed_dim, c.mlp_hidden, c.temperature), (16, 1024, 10.0));
        let p = PretrainConfig::default();
        assert_eq!((p.batch_size, p.lr), (64, 0.002));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = PredictorParams::init(&small_config(), 3).unwrap();
        let g = random_graph(&mut rng, 9);
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut rng);
        let u = encode_nodes(&g, 0.3, 0.01, &params).unwrap();
        let up = encode_nodes(&g.permuted(&perm), 0.3, 0.01, &params).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..u.ncols() {
                assert!((up[[i, k]] - u[[p, k]]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn conditioning_changes_encodings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = PredictorParams::init(&small_config(), 4).unwrap();
        let g = random_graph(&mut rng, 6);
        let a = encode_nodes(&g, 0.0, 0.5, &params).unwrap();
        let b = encode_nodes(&g, 1.0, 0.5, &params).unwrap();
        assert!((&a - &b).iter().any(|d| d.abs() > 1e-6));
        let c = encode_nodes(&g, 0.0, 1e-6, &params).unwrap();
        assert!((&a - &c).iter().any(|d| d.abs() > 1e-6));
    }

    #[test]
    fn plans_are_positive_with_unit_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g1 = random_graph(&mut rng, 7);
        let g2 = random_graph(&mut rng, 11);
        for steps in [0, 5] {
            let cfg = PredictorConfig { inference_balancing_steps: steps, ..small_config() };
            let params = PredictorParams::init(&cfg, 5).unwrap();
            let p = predict_plan(&g1, &g2, 0.4, 0.9, &params).unwrap();
            assert!(p.plan.iter().all(|x| *x > 0.0));
            assert!((p.total_mass() - 1.0).abs() <= 1e-12);
        }
        let cfg = PredictorConfig { inference_balancing_steps: 50, ..small_config() };
        let params = PredictorParams::init(&cfg, 5).unwrap();
        let p = predict_plan(&g1, &g2, 0.4, 0.9, &params).unwrap();
        assert!(p.max_marginal_violation() <= 1e-6, "{}", p.max_marginal_violation());
    }

    #[test]
    fn inference_head_matches_tape_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (g1, g2) = (random_graph(&mut rng, 8), random_graph(&mut rng, 13));
        for steps in [0, 3, 40] {
            let cfg = PredictorConfig { inference_balancing_steps: steps, head_balancing_steps: steps, ..small_config() };
            let params = PredictorParams::init(&cfg, 6).unwrap();
            let fast = predict_plan(&g1, &g2, 0.7, 0.2, &params).unwrap().plan;
            let tape = Tape::new();
            let (u, v) = (encode_nodes(&g1, 0.7, 0.2, &params).unwrap(), encode_nodes(&g2, 0.7, 0.2, &params).unwrap());
            let slow = plan_head(&cfg, tape.constant(u), tape.constant(v)).unwrap().to_array();
            let worst = (&fast - &slow).iter().zip(&slow).fold(0.0f64, |m, (d, s)| m.max(d.abs() / s));
            assert!(worst <= 1e-10, "steps {steps}: {worst:e}");
        }
    }

    #[test]
    fn range_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = PredictorParams::init(&small_config(), 0).unwrap();
        let g = random_graph(&mut rng, 4);
        assert!(predict_plan(&g, &g, 1.5, 0.9, &params).is_err());
        assert!(predict_plan(&g, &g, 0.5, 0.0, &params).is_err());
    }

    #[test]
    fn projection_examples() {
        let a = uniform_mass(4);
        let b = uniform_mass(5);
        let feasible = outer(&a, &b);
        assert_eq!(project_to_polytope(&feasible, &a, &b).unwrap().plan, feasible);
        for scale in [0.5, 3.0] {
            let p = Array2::from_elem((4, 5), scale / 20.0);
            let q = project_to_polytope(&p, &a, &b).unwrap();
            assert!((&q.plan - &feasible).iter().all(|d| d.abs() < 1e-15));
        }
        assert!(matches!(project_to_polytope(&Array2::zeros((4, 5)), &a, &b), Err(Error::DegenerateInput(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let p = feasible.mapv(|x| x * rng.random_range(0.7..1.3));
            let q = project_to_polytope(&p, &a, &b).unwrap();
            assert!(q.max_marginal_violation() <= 1e-12);
            assert!(q.plan.iter().all(|x| *x >= 0.0));
            let moved: f64 = (&q.plan - &p).iter().map(|d| d.abs()).sum();
            assert!(moved <= 2.0 * marginal_l1(&p, &a, &b) + 1e-15);
        }
    }

    #[test]
    fn training_loss_gradient_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_config();
        let params = PredictorParams::init(&cfg, 6).unwrap();
        let g1 = Prepared::new(random_graph(&mut rng, 5), &cfg);
        let g2 = Prepared::new(random_graph(&mut rng, 6), &cfg);
        for (k, (name, tensor)) in params.tensors.iter().enumerate() {
            let report = gradcheck(
                |tape, v| {
                    let mut vars = params.to_vars(tape, false);
                    vars[k] = v;
                    pair_loss_var(&cfg, &vars, &g1, &g2, 0.6, 0.3)
                },
                tensor,
                1e-6,
            )
            .unwrap();
            assert!(report.passed, "{name}: {report:?}");
        }
    }

    #[test]
    fn plan_is_differentiable_in_features_and_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = small_config();
        let params = PredictorParams::init(&cfg, 7).unwrap();
        let g1 = random_graph(&mut rng, 4);
        let g2 = random_graph(&mut rng, 5);
        let (a1, a2) = (affinity(&g1.structure, 0.2), affinity(&g2.structure, 0.2));
        let weights = Array2::from_shape_fn((4, 5), |(i, j)| ((3 * i + j) % 4) as f64 - 1.5);
        let report = gradcheck(
            |tape, v| {
                let vars = params.to_vars(tape, false);
                let (a, r) = (tape.scalar(0.37), tape.scalar(0.02));
                let u = encode_var(&cfg, &vars, tape.constant(g1.features.clone()), tape.constant(a1.clone()), a, r)?;
                let w = encode_var(&cfg, &vars, v, tape.constant(a2.clone()), a, r)?;
                Ok(plan_head(&cfg, u, w)?.mul(tape.constant(weights.clone()))?.sum())
            },
            &g2.features,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        let report = gradcheck(
            |tape, v| {
                let vars = params.to_vars(tape, false);
                let a = tape.scalar(0.37);
                let u = encode_var(&cfg, &vars, tape.constant(g1.features.clone()), tape.constant(a1.clone()), a, v)?;
                let w = encode_var(&cfg, &vars, tape.constant(g2.features.clone()), tape.constant(a2.clone()), a, v)?;
                Ok(plan_head(&cfg, u, w)?.mul(tape.constant(weights.clone()))?.sum())
            },
            &ndarray::array![[0.02]],
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn samplers_stay_in_range() {
        let s = PretrainSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let a = s.sample_alpha(&mut rng).unwrap();
            let r = s.sample_rho(&mut rng);
            assert!((0.0..=1.0).contains(&a));
            assert!((1e-7..=1.0).contains(&r));
        }
    }

    #[test]
    fn params_validate_shapes() {
        let cfg = small_config();
        let mut p = PredictorParams::init(&cfg, 0).unwrap();
        p.validate().unwrap();
        p.tensors[0].1 = Array2::zeros((1, 1));
        assert!(p.validate().is_err());
    }
}
