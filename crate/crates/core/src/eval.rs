//! Embedding extraction and the analyses run on embeddings: nearest-neighbour
//! probes, principal-component traversals and atom activation statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agdl::{unmix, Alignment, TrainConfig};
use crate::dataset::Dataset;
use crate::dictionary::{check_simplex, clamp_to_simplex, DictionaryModel};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io::Split;
use crate::synth::pearson;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub subject: String,
    pub contrast: String,
    pub split: Split,
    pub alpha: f64,
    pub omega: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub k: usize,
    pub rows: Vec<EmbeddingRow>,
    /// Rows that could not be embedded, as `subject/contrast: error`.
    pub failures: Vec<String>,
}

impl EmbeddingTable {
    pub fn new(k: usize) -> Self {
        Self { k, rows: Vec::new(), failures: Vec::new() }
    }

    /// Distinct alphas in ascending order.
    pub fn alphas(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.alpha).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    pub fn at_alpha(&self, alpha: f64) -> Vec<&EmbeddingRow> {
        self.rows.iter().filter(|r| r.alpha == alpha).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject,contrast,split,alpha");
        for k in 1..=self.k {
            write!(s, ",w{k}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{},{},{}", r.subject, r.contrast, r.split.as_str(), r.alpha).unwrap();
            for w in &r.omega {
                write!(s, ",{w}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str, source_name: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { source_name: source_name.to_string(), line, msg };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 5 || cols[..4] != ["subject", "contrast", "split", "alpha"] {
            return Err(err(1, "header must be subject,contrast,split,alpha,w1..wK".into()));
        }
        let k = cols.len() - 4;
        let mut table = Self::new(k);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != k + 4 {
                return Err(err(i + 1, format!("expected {} fields, found {}", k + 4, f.len())));
            }
            let split = Split::parse(f[2]).ok_or_else(|| err(i + 1, format!("unknown split {:?}", f[2])))?;
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(i + 1, format!("{s:?}: {e}")));
            let omega = f[4..].iter().map(|s| num(s)).collect::<Result<Array1<f64>>>()?;
            table.rows.push(EmbeddingRow { subject: f[0].into(), contrast: f[1].into(), split, alpha: num(f[3])?, omega });
        }
        Ok(table)
    }
}

/// Unmixes every graph of the dataset at `alpha`. Native geometries are used
/// with predicted or exact plans; common-geometry projections with the
/// identity alignment. Graphs that fail are listed in `failures`.
pub fn embed_dataset(ds: &Dataset, model: &DictionaryModel, alpha: f64, align: Alignment, cfg: &TrainConfig) -> Result<EmbeddingTable> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange { what: "alpha", value: alpha, lo: 0.0, hi: 1.0 });
    }
    let mut table = EmbeddingTable::new(model.k);
    for s in &ds.samples {
        let g: Option<&Graph> = match align {
            Alignment::Identity => s.common.as_ref(),
            _ => Some(&s.native),
        };
        let outcome = g
            .ok_or_else(|| Error::InvalidConfig("no common-geometry graph".into()))
            .and_then(|g| unmix(&[g], model, alpha, align, cfg));
        match outcome {
            Ok(r) => table.rows.push(EmbeddingRow {
                subject: s.subject.clone(),
                contrast: s.contrast.clone(),
                split: s.split,
                alpha,
                omega: r.omegas.into_iter().next().expect("one graph in"),
            }),
            Err(e) => table.failures.push(format!("{}/{}: {e}", s.subject, s.contrast)),
        }
    }
    Ok(table)
}

/// Embeddings at every alpha of a grid, in grid order.
pub fn embed_grid(ds: &Dataset, model: &DictionaryModel, alphas: &[f64], align: Alignment, cfg: &TrainConfig) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(model.k);
    for &a in alphas {
        let t = embed_dataset(ds, model, a, align, cfg)?;
        table.rows.extend(t.rows);
        table.failures.extend(t.failures);
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    Contrast,
    Subject,
}

impl Probe {
    pub fn as_str(self) -> &'static str {
        match self {
            Probe::Contrast => "contrast",
            Probe::Subject => "subject",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub k: usize,
    pub n_subjects: usize,
    pub n_seeds: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { k: 5, n_subjects: 10, n_seeds: 5, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_subjects < 2 || self.n_seeds == 0 {
            return Err(Error::InvalidConfig("probe needs k >= 1, n_subjects >= 2 and n_seeds >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub probe: Probe,
    pub alpha: f64,
    pub mean: f64,
    pub sd: f64,
    pub per_seed: Vec<f64>,
    pub chance: f64,
}

pub fn cosine_distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - a.dot(b) / (na * nb)
}

/// Majority label among the `k` nearest training points by cosine distance.
/// Ties in the vote go to the label whose nearest member is closest.
pub fn knn_predict(train: &[(&Array1<f64>, &str)], query: &Array1<f64>, k: usize) -> String {
    let mut d: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, (x, _))| (cosine_distance(x, query), i)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (rank, &(_, i)) in d.iter().take(k).enumerate() {
        let e = votes.entry(train[i].1).or_insert((0, rank));
        e.0 += 1;
    }
    votes
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(l, _)| l.to_string())
        .unwrap_or_default()
}

fn accuracy(train: &[(&Array1<f64>, &str)], test: &[(&Array1<f64>, &str)], k: usize) -> f64 {
    let hits = test.iter().filter(|(x, y)| knn_predict(train, x, k) == *y).count();
    hits as f64 / test.len() as f64
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 } else { 0.0 };
    (m, var.sqrt())
}

/// Contrast labels from the train split predict the test split.
pub fn contrast_probe(rows: &[&EmbeddingRow], cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    let pick = |s: Split| -> Vec<(&Array1<f64>, &str)> {
        rows.iter().filter(|r| r.split == s).map(|r| (&r.omega, r.contrast.as_str())).collect()
    };
    let (train, test) = (pick(Split::Train), pick(Split::Test));
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientRows(format!("contrast probe has {} train and {} test rows", train.len(), test.len())));
    }
    let mut labels: Vec<&str> = train.iter().map(|(_, l)| *l).collect();
    labels.sort_unstable();
    labels.dedup();
    let acc = accuracy(&train, &test, cfg.k);
    Ok(ProbeReport {
        probe: Probe::Contrast,
        alpha: rows[0].alpha,
        mean: acc,
        sd: 0.0,
        per_seed: vec![acc],
        chance: 1.0 / labels.len() as f64,
    })
}

/// Per seed: draw `n_subjects` subjects and a random half of the contrasts
/// (rounded up); fit on those contrasts and test on the others.
pub fn subject_probe(rows: &[&EmbeddingRow], cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    let mut subjects: Vec<&str> = rows.iter().map(|r| r.subject.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let mut contrasts: Vec<&str> = rows.iter().map(|r| r.contrast.as_str()).collect();
    contrasts.sort_unstable();
    contrasts.dedup();
    if subjects.len() < cfg.n_subjects || contrasts.len() < 2 {
        return Err(Error::InsufficientRows(format!(
            "subject probe needs {} subjects and 2 contrasts, found {} and {}",
            cfg.n_subjects,
            subjects.len(),
            contrasts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_seed = Vec::with_capacity(cfg.n_seeds);
    for _ in 0..cfg.n_seeds {
        let chosen: Vec<&str> = subjects.choose_multiple(&mut rng, cfg.n_subjects).copied().collect();
        let mut order = contrasts.clone();
        order.shuffle(&mut rng);
        let fit_contrasts = &order[..contrasts.len().div_ceil(2)];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for r in rows.iter().filter(|r| chosen.contains(&r.subject.as_str())) {
            let item = (&r.omega, r.subject.as_str());
            if fit_contrasts.contains(&r.contrast.as_str()) {
                train.push(item);
            } else {
                test.push(item);
            }
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::InsufficientRows("subject probe split left one side empty".into()));
        }
        per_seed.push(accuracy(&train, &test, cfg.k));
    }
    let (mean, sd) = mean_sd(&per_seed);
    Ok(ProbeReport { probe: Probe::Subject, alpha: rows[0].alpha, mean, sd, per_seed, chance: 1.0 / cfg.n_subjects as f64 })
}

/// Both probes at every alpha in the table.
pub fn classify_probe(table: &EmbeddingTable, cfg: &ProbeConfig) -> Result<Vec<ProbeReport>> {
    let mut out = Vec::new();
    for a in table.alphas() {
        let rows = table.at_alpha(a);
        out.push(contrast_probe(&rows, cfg)?);
        out.push(subject_probe(&rows, cfg)?);
    }
    Ok(out)
}

/// Report with the highest mean accuracy for one probe; earliest alpha on ties.
pub fn best_alpha(reports: &[ProbeReport], probe: Probe) -> Option<&ProbeReport> {
    reports.iter().filter(|r| r.probe == probe).fold(None, |best: Option<&ProbeReport>, r| match best {
        Some(b) if b.mean >= r.mean => Some(b),
        _ => Some(r),
    })
}

pub fn probe_csv(reports: &[ProbeReport]) -> String {
    let mut s = String::from("probe,alpha,mean,sd,chance,per_seed\n");
    for r in reports {
        let seeds: Vec<String> = r.per_seed.iter().map(|x| x.to_string()).collect();
        writeln!(s, "{},{},{},{},{},{}", r.probe.as_str(), r.alpha, r.mean, r.sd, r.chance, seeds.join(";")).unwrap();
    }
    s
}

#[derive(Clone, Debug)]
pub struct PcaTraversal {
    pub mean: Array1<f64>,
    /// Unit principal directions, largest variance first.
    pub components: Vec<Array1<f64>>,
    pub variances: Vec<f64>,
    /// `(component, t, reconstruction)` for every grid value.
    pub grid: Vec<(usize, f64, Graph)>,
}

/// Principal directions of the embeddings and reconstructions along each one
/// at `mean + t sd_c pc_c`, clamped to the simplex.
pub fn pca_traverse(rows: &[&EmbeddingRow], model: &DictionaryModel, alpha: f64, n_components: usize, steps: &[f64]) -> Result<PcaTraversal> {
    if rows.len() < n_components + 1 {
        return Err(Error::InsufficientRows(format!("{} rows for {n_components} components", rows.len())));
    }
    let k = model.k;
    let x = Array2::from_shape_fn((rows.len(), k), |(i, j)| rows[i].omega[j]);
    let mean = x.mean_axis(ndarray::Axis(0)).expect("rows present");
    let centred = &x - &mean;
    let cov = centred.t().dot(&centred) / (rows.len() - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(k, k, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-12 * top.max(1e-300)).count();
    if rank < n_components {
        return Err(Error::DegenerateCovariance { rank, requested: n_components });
    }
    let mut components = Vec::new();
    let mut variances = Vec::new();
    for &i in order.iter().take(n_components) {
        components.push(Array1::from_iter(eig.eigenvectors.column(i).iter().copied()));
        variances.push(eig.eigenvalues[i].max(0.0));
    }
    let mut grid = Vec::new();
    for (c, (pc, var)) in components.iter().zip(&variances).enumerate() {
        for &t in steps {
            let w = clamp_to_simplex(&(&mean + &(pc * (t * var.sqrt()))));
            grid.push((c, t, model.reconstruct(&w, alpha)?));
        }
    }
    Ok(PcaTraversal { mean, components, variances, grid })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtomStats {
    pub contrasts: Vec<String>,
    /// Activation counts per atom over equal-width bins of [0, 1].
    pub histograms: Vec<Vec<usize>>,
    /// Pearson correlation of each atom's activation with each contrast
    /// indicator, zero when either side is constant.
    pub correlation: Array2<f64>,
    /// Cosine distance between atoms' activation profiles over rows.
    pub cosine_distance: Array2<f64>,
    /// Fraction of rows with activation above `1 / (2K)`.
    pub active_fraction: Vec<f64>,
}

pub fn atom_stats(rows: &[&EmbeddingRow], k: usize, bins: usize) -> Result<AtomStats> {
    if rows.is_empty() {
        return Err(Error::InsufficientRows("atom statistics need at least one row".into()));
    }
    for r in rows {
        check_simplex(&r.omega, k)?;
    }
    let bins = bins.max(1);
    let mut contrasts: Vec<String> = rows.iter().map(|r| r.contrast.clone()).collect();
    contrasts.sort();
    contrasts.dedup();
    let profiles: Vec<Vec<f64>> = (0..k).map(|j| rows.iter().map(|r| r.omega[j]).collect()).collect();
    let histograms = profiles
        .iter()
        .map(|p| {
            let mut h = vec![0usize; bins];
            for &w in p {
                h[((w * bins as f64) as usize).min(bins - 1)] += 1;
            }
            h
        })
        .collect();
    let mut correlation = Array2::zeros((k, contrasts.len()));
    for (c, name) in contrasts.iter().enumerate() {
        let ind: Vec<f64> = rows.iter().map(|r| if &r.contrast == name { 1.0 } else { 0.0 }).collect();
        for j in 0..k {
            correlation[[j, c]] = pearson(&profiles[j], &ind);
        }
    }
    let vecs: Vec<Array1<f64>> = profiles.iter().map(|p| Array1::from(p.clone())).collect();
    let cosine_distance = Array2::from_shape_fn((k, k), |(a, b)| if a == b { 0.0 } else { cosine_distance(&vecs[a], &vecs[b]) });
    let threshold = 1.0 / (2.0 * k as f64);
    let active_fraction = profiles.iter().map(|p| p.iter().filter(|&&w| w > threshold).count() as f64 / p.len() as f64).collect();
    Ok(AtomStats { contrasts, histograms, correlation, cosine_distance, active_fraction })
}

/// Mean total-variation distance between matching rows of two tables.
pub fn mean_tv_distance(a: &EmbeddingTable, b: &EmbeddingTable) -> Result<f64> {
    let key = |r: &EmbeddingRow| (r.subject.clone(), r.contrast.clone(), r.alpha.to_bits());
    let index: BTreeMap<_, &EmbeddingRow> = b.rows.iter().map(|r| (key(r), r)).collect();
    let mut total = 0.0;
    let mut count = 0;
    for r in &a.rows {
        if let Some(o) = index.get(&key(r)) {
            total += 0.5 * (&r.omega - &o.omega).mapv(f64::abs).sum();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InsufficientRows("tables share no rows".into()));
    }
    Ok(total / count as f64)
}
