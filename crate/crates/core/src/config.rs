//! Run configuration in a flat `section.key value` text format.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. The
//! global `seed` is stamped into every section, and `OTGDL_SEED` overrides it.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::agdl::{PlanGradient, TrainConfig};
use crate::dictionary::Variant;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::exact_ot::CgOptions;
use crate::predictor::{PredictorConfig, PretrainConfig, PretrainSampler};
use crate::synth::SynthConfig;

pub const SEED_ENV: &str = "OTGDL_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub predictor: PredictorConfig,
    pub pretrain: PretrainConfig,
    pub sampler: PretrainSampler,
    pub train: TrainConfig,
    pub n_atoms: usize,
    pub variant: Variant,
    /// Alpha used by the exact-solver reference trainer.
    pub exact_alpha: f64,
    pub solver: CgOptions,
    pub probe: ProbeConfig,
    pub alphas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            predictor: PredictorConfig::default(),
            pretrain: PretrainConfig::default(),
            sampler: PretrainSampler::default(),
            train: TrainConfig { epochs: 200, ..TrainConfig::default() },
            n_atoms: 6,
            variant: Variant::SoftbinMlp,
            exact_alpha: 0.5,
            solver: CgOptions::default(),
            probe: ProbeConfig::default(),
            alphas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::ConfigKey { key: key.to_string(), msg: format!("{value:?}: {e}") })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |msg: String| Error::ConfigKey { key: key.to_string(), msg };
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "synth.n_template" => self.synth.n_template = parse_num(key, value)?,
            "synth.n_contrasts" => self.synth.n_contrasts = parse_num(key, value)?,
            "synth.n_subjects" => self.synth.n_subjects = parse_num(key, value)?,
            "synth.jitter_sigma" => self.synth.jitter_sigma = parse_num(key, value)?,
            "synth.resample_frac" => self.synth.resample_frac = parse_num(key, value)?,
            "synth.feature_noise_sigma" => self.synth.feature_noise_sigma = parse_num(key, value)?,
            "synth.split_fractions" => {
                let v = parse_list(key, value)?;
                self.synth.split_fractions = v.try_into().map_err(|_| bad("expected three comma-separated fractions".into()))?;
            }
            "synth.knn_k" => self.synth.knn_k = parse_num(key, value)?,
            "synth.min_bumps" => self.synth.min_bumps = parse_num(key, value)?,
            "synth.max_bumps" => self.synth.max_bumps = parse_num(key, value)?,
            "synth.bump_width" => self.synth.bump_width = parse_num(key, value)?,
            "synth.n_traits" => self.synth.n_traits = parse_num(key, value)?,
            "synth.trait_amplitude" => self.synth.trait_amplitude = parse_num(key, value)?,
            "predictor.n_embed_layers" => self.predictor.n_embed_layers = parse_num(key, value)?,
            "predictor.gcn_hidden" => self.predictor.gcn_hidden = parse_num(key, value)?,
            "predictor.node_out_dim" => self.predictor.node_out_dim = parse_num(key, value)?,
            "predictor.alpha_embed_dim" => self.predictor.alpha_embed_dim = parse_num(key, value)?,
            "predictor.mlp_hidden" => self.predictor.mlp_hidden = parse_num(key, value)?,
            "predictor.temperature" => self.predictor.temperature = parse_num(key, value)?,
            "predictor.head_balancing_steps" => self.predictor.head_balancing_steps = parse_num(key, value)?,
            "predictor.inference_balancing_steps" => self.predictor.inference_balancing_steps = parse_num(key, value)?,
            "predictor.affinity_bandwidth" => self.predictor.affinity_bandwidth = parse_num(key, value)?,
            "predictor.feature_dim" => self.predictor.feature_dim = parse_num(key, value)?,
            "pretrain.epochs" => self.pretrain.epochs = parse_num(key, value)?,
            "pretrain.pairs_per_epoch" => self.pretrain.pairs_per_epoch = parse_num(key, value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_num(key, value)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, value)?,
            "pretrain.weight_decay" => self.pretrain.weight_decay = parse_num(key, value)?,
            "pretrain.val_pairs" => self.pretrain.val_pairs = parse_num(key, value)?,
            "pretrain.alpha_beta" => {
                let v = parse_list(key, value)?;
                let [a, b]: [f64; 2] = v.try_into().map_err(|_| bad("expected two comma-separated shape parameters".into()))?;
                self.sampler.alpha_beta = (a, b);
            }
            "pretrain.rho_range" => {
                let v = parse_list(key, value)?;
                let [a, b]: [f64; 2] = v.try_into().map_err(|_| bad("expected two comma-separated bounds".into()))?;
                self.sampler.rho_range = (a, b);
            }
            "pretrain.native_common_frac" => self.sampler.native_common_frac = parse_num(key, value)?,
            "agdl.outer_lr" => self.train.outer_lr = parse_num(key, value)?,
            "agdl.inner_lr" => self.train.inner_lr = parse_num(key, value)?,
            "agdl.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "agdl.outer_weight_decay" => self.train.outer_weight_decay = parse_num(key, value)?,
            "agdl.inner_weight_decay" => self.train.inner_weight_decay = parse_num(key, value)?,
            "agdl.epochs" => self.train.epochs = parse_num(key, value)?,
            "agdl.graphs_per_epoch" => self.train.graphs_per_epoch = parse_num(key, value)?,
            "agdl.inner_tol" => self.train.inner_tol = parse_num(key, value)?,
            "agdl.inner_max_iters" => self.train.inner_max_iters = parse_num(key, value)?,
            "agdl.rho" => self.train.rho = parse_num(key, value)?,
            "agdl.plan_gradient" => self.train.plan_gradient = PlanGradient::parse(value).map_err(|e| bad(e.to_string()))?,
            "agdl.n_atoms" => self.n_atoms = parse_num(key, value)?,
            "agdl.variant" => self.variant = Variant::parse(value).map_err(|e| bad(e.to_string()))?,
            "agdl.exact_alpha" => self.exact_alpha = parse_num(key, value)?,
            "solver.max_iters" => self.solver.max_iters = parse_num(key, value)?,
            "solver.tol" => self.solver.tol = parse_num(key, value)?,
            "eval.k" => self.probe.k = parse_num(key, value)?,
            "eval.n_subjects" => self.probe.n_subjects = parse_num(key, value)?,
            "eval.n_seeds" => self.probe.n_seeds = parse_num(key, value)?,
            "eval.alphas" => self.alphas = parse_list(key, value)?,
            _ => return Err(bad("unknown key".into())),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (s, p, t) = (&self.synth, &self.predictor, &self.train);
        vec![
            ("seed", self.seed.to_string()),
            ("synth.n_template", s.n_template.to_string()),
            ("synth.n_contrasts", s.n_contrasts.to_string()),
            ("synth.n_subjects", s.n_subjects.to_string()),
            ("synth.jitter_sigma", s.jitter_sigma.to_string()),
            ("synth.resample_frac", s.resample_frac.to_string()),
            ("synth.feature_noise_sigma", s.feature_noise_sigma.to_string()),
            ("synth.split_fractions", join(&s.split_fractions)),
            ("synth.knn_k", s.knn_k.to_string()),
            ("synth.min_bumps", s.min_bumps.to_string()),
            ("synth.max_bumps", s.max_bumps.to_string()),
            ("synth.bump_width", s.bump_width.to_string()),
            ("synth.n_traits", s.n_traits.to_string()),
            ("synth.trait_amplitude", s.trait_amplitude.to_string()),
            ("predictor.n_embed_layers", p.n_embed_layers.to_string()),
            ("predictor.gcn_hidden", p.gcn_hidden.to_string()),
            ("predictor.node_out_dim", p.node_out_dim.to_string()),
            ("predictor.alpha_embed_dim", p.alpha_embed_dim.to_string()),
            ("predictor.mlp_hidden", p.mlp_hidden.to_string()),
            ("predictor.temperature", p.temperature.to_string()),
            ("predictor.head_balancing_steps", p.head_balancing_steps.to_string()),
            ("predictor.inference_balancing_steps", p.inference_balancing_steps.to_string()),
            ("predictor.affinity_bandwidth", p.affinity_bandwidth.to_string()),
            ("predictor.feature_dim", p.feature_dim.to_string()),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.pairs_per_epoch", self.pretrain.pairs_per_epoch.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.weight_decay", self.pretrain.weight_decay.to_string()),
            ("pretrain.val_pairs", self.pretrain.val_pairs.to_string()),
            ("pretrain.alpha_beta", join(&[self.sampler.alpha_beta.0, self.sampler.alpha_beta.1])),
            ("pretrain.rho_range", join(&[self.sampler.rho_range.0, self.sampler.rho_range.1])),
            ("pretrain.native_common_frac", self.sampler.native_common_frac.to_string()),
            ("agdl.outer_lr", t.outer_lr.to_string()),
            ("agdl.inner_lr", t.inner_lr.to_string()),
            ("agdl.batch_size", t.batch_size.to_string()),
            ("agdl.outer_weight_decay", t.outer_weight_decay.to_string()),
            ("agdl.inner_weight_decay", t.inner_weight_decay.to_string()),
            ("agdl.epochs", t.epochs.to_string()),
            ("agdl.graphs_per_epoch", t.graphs_per_epoch.to_string()),
            ("agdl.inner_tol", t.inner_tol.to_string()),
            ("agdl.inner_max_iters", t.inner_max_iters.to_string()),
            ("agdl.rho", t.rho.to_string()),
            ("agdl.plan_gradient", t.plan_gradient.as_str().to_string()),
            ("agdl.n_atoms", self.n_atoms.to_string()),
            ("agdl.variant", self.variant.as_str().to_string()),
            ("agdl.exact_alpha", self.exact_alpha.to_string()),
            ("solver.max_iters", self.solver.max_iters.to_string()),
            ("solver.tol", self.solver.tol.to_string()),
            ("eval.k", self.probe.k.to_string()),
            ("eval.n_subjects", self.probe.n_subjects.to_string()),
            ("eval.n_seeds", self.probe.n_seeds.to_string()),
            ("eval.alphas", join(&self.alphas)),
        ]
    }

    /// Parses config text over the defaults and stamps the seed.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once(|c: char| c.is_whitespace() || c == '=').unwrap_or((line, ""));
            let value = value.trim().trim_start_matches('=').trim();
            if value.is_empty() {
                return Err(Error::ConfigKey { key: key.to_string(), msg: "missing value".into() });
            }
            cfg.set(key, value)?;
        }
        cfg.stamp_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the global seed into every section.
    pub fn stamp_seed(&mut self) {
        self.synth.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        self.probe.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.predictor.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        if self.n_atoms == 0 {
            return Err(Error::ConfigKey { key: "agdl.n_atoms".into(), msg: "must be at least 1".into() });
        }
        if !(0.0..=1.0).contains(&self.exact_alpha) {
            return Err(Error::ConfigKey { key: "agdl.exact_alpha".into(), msg: "must lie in [0, 1]".into() });
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::ConfigKey { key: "eval.alphas".into(), msg: "must be a non-empty list in [0, 1]".into() });
        }
        if self.predictor.feature_dim != crate::synth::FEATURE_DIM {
            return Err(Error::ConfigKey { key: "predictor.feature_dim".into(), msg: format!("synthetic graphs have {} channels", crate::synth::FEATURE_DIM) });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} {v}").unwrap();
        }
        s
    }
}

/// Reads a config file, then applies `OTGDL_SEED` when it is set.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut cfg = RunConfig::parse(&std::fs::read_to_string(path)?)?;
    apply_seed_override(&mut cfg, std::env::var(SEED_ENV).ok().as_deref())?;
    Ok(cfg)
}

pub fn apply_seed_override(cfg: &mut RunConfig, value: Option<&str>) -> Result<()> {
    if let Some(v) = value {
        cfg.seed = parse_num(SEED_ENV, v.trim())?;
        cfg.stamp_seed();
    }
    Ok(())
}
