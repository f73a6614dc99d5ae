//! Synthetic subjects x contrasts corpus.
//!
//! A template surface patch plays the role of the common geometry. Each
//! contrast plants a few Gaussian activation bumps on it; each subject jitters
//! and resamples the nodes (breaking node correspondence), rebuilds geodesics,
//! adds a subject-specific functional trait map, and adds feature noise.
//!
//! Feature layout is `[contrast value, u, v]` where `(u, v)` are the surface
//! parameters of the node. Node positions in 3-D are `(u, v, height(u, v))`.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{normalize_structure, shortest_paths, Graph, Standardizer, META_CONTRAST, META_GEOMETRY, META_SUBJECT};
use crate::io::{write_graph, write_manifest, DatasetManifest, ManifestEntry, Split};

pub const CONTRAST_CHANNEL: usize = 0;
pub const POSITION_CHANNELS: [usize; 2] = [1, 2];
pub const FEATURE_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_template: usize,
    pub n_contrasts: usize,
    pub n_subjects: usize,
    /// Position noise, as a fraction of the template diameter.
    pub jitter_sigma: f64,
    pub resample_frac: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
    pub split_fractions: [f64; 3],
    /// Nearest neighbours per node in the surface graph (raised internally if disconnected).
    pub knn_k: usize,
    pub min_bumps: usize,
    pub max_bumps: usize,
    pub bump_width: f64,
    /// Number of subject-specific functional trait maps.
    pub n_traits: usize,
    /// Amplitude of the subject trait map added to every contrast of a subject.
    pub trait_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_template: 100,
            n_contrasts: 3,
            n_subjects: 20,
            jitter_sigma: 0.02,
            resample_frac: 0.1,
            feature_noise_sigma: 0.1,
            seed: 0,
            split_fractions: [0.70, 0.15, 0.15],
            knn_k: 6,
            min_bumps: 1,
            max_bumps: 3,
            bump_width: 0.1,
            n_traits: 3,
            trait_amplitude: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let total: f64 = self.split_fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split_fractions.iter().any(|f| *f < 0.0) {
            return bad("split fractions must be nonnegative and sum to 1");
        }
        if !(0.0..0.5).contains(&self.resample_frac) {
            return bad("resample_frac must lie in [0, 0.5)");
        }
        if self.jitter_sigma < 0.0 || self.feature_noise_sigma < 0.0 || self.bump_width <= 0.0 {
            return bad("sigmas must be nonnegative and bump_width positive");
        }
        if self.n_template < 4 {
            return bad("n_template must be at least 4");
        }
        if self.n_contrasts == 0 || self.n_subjects == 0 || self.knn_k == 0 {
            return bad("n_contrasts, n_subjects and knn_k must be positive");
        }
        if self.min_bumps > self.max_bumps {
            return bad("min_bumps must not exceed max_bumps");
        }
        Ok(())
    }
}

/// FNV-1a over a byte string, used to derive stable per-entity seeds.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for &b in *p {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn rng_for(seed: u64, tag: &str, extra: &[u8]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), tag.as_bytes(), extra]))
}

pub fn surface_height(u: f64, v: f64) -> f64 {
    0.3 * (1.5 * std::f64::consts::PI * u).sin() * (std::f64::consts::PI * v).cos()
}

fn lift(uv: &Array2<f64>) -> Array2<f64> {
    let n = uv.nrows();
    Array2::from_shape_fn((n, 3), |(i, c)| match c {
        0 | 1 => uv[[i, c]],
        _ => surface_height(uv[[i, 0]], uv[[i, 1]]),
    })
}

/// Symmetrized k-nearest-neighbour adjacency weighted by Euclidean distance.
pub fn knn_adjacency(points: &Array2<f64>, k: usize) -> Array2<f64> {
    let n = points.nrows();
    let dist = |i: usize, j: usize| -> f64 {
        points.row(i).iter().zip(points.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let mut adj = Array2::zeros((n, n));
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i).map(|j| (dist(i, j), j)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in order.iter().take(k) {
            // coincident points still need a strictly positive edge weight
            let w = d.max(1e-9);
            adj[[i, j]] = w;
            adj[[j, i]] = w;
        }
    }
    adj
}

/// Geodesic structure for surface parameters `uv`, growing `k` until connected.
/// Returns the raw (unnormalized) distances and the `k` that was used.
pub fn surface_geodesics(uv: &Array2<f64>, k: usize) -> Result<(Array2<f64>, usize)> {
    let n = uv.nrows();
    let pts = lift(uv);
    let mut k = k.min(n.saturating_sub(1)).max(1);
    loop {
        match shortest_paths(&knn_adjacency(&pts, k)) {
            Ok(c) => return Ok((c, k)),
            Err(e @ Error::DisconnectedGraph { .. }) => {
                if k + 1 >= n {
                    return Err(e);
                }
                k += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn positions(g: &Graph) -> Array2<f64> {
    g.features.slice(s![.., POSITION_CHANNELS[0]..=POSITION_CHANNELS[1]]).to_owned()
}

fn diameter(uv: &Array2<f64>) -> f64 {
    let n = uv.nrows();
    let mut best: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = ((uv[[i, 0]] - uv[[j, 0]]).powi(2) + (uv[[i, 1]] - uv[[j, 1]]).powi(2)).sqrt();
            best = best.max(d);
        }
    }
    best
}

fn build_graph(uv: &Array2<f64>, contrast: &[f64], k: usize) -> Result<Graph> {
    let n = uv.nrows();
    let (c, _) = surface_geodesics(uv, k)?;
    let features = Array2::from_shape_fn((n, FEATURE_DIM), |(i, f)| match f {
        CONTRAST_CHANNEL => contrast[i],
        _ => uv[[i, f - 1]],
    });
    normalize_structure(&Graph::new(features, c))
}

pub fn make_template(n: usize, seed: u64) -> Result<Graph> {
    make_template_with_k(n, seed, SynthConfig::default().knn_k)
}

pub fn make_template_with_k(n: usize, seed: u64, k: usize) -> Result<Graph> {
    if n < 4 {
        return Err(Error::InvalidConfig(format!("template needs at least 4 nodes, got {n}")));
    }
    let mut rng = rng_for(seed, "template", &[]);
    // jittered grid keeps the sampling even without clumps
    let side = (n as f64).sqrt().ceil() as usize;
    let mut cells: Vec<usize> = (0..side * side).collect();
    cells.shuffle(&mut rng);
    let mut uv = Array2::zeros((n, 2));
    for (i, &cell) in cells.iter().take(n).enumerate() {
        let (cx, cy) = ((cell % side) as f64, (cell / side) as f64);
        uv[[i, 0]] = (cx + rng.random_range(0.1..0.9)) / side as f64;
        uv[[i, 1]] = (cy + rng.random_range(0.1..0.9)) / side as f64;
    }
    let mut g = build_graph(&uv, &vec![0.0; n], k)?;
    g.set_meta(META_GEOMETRY, "template");
    Ok(g)
}

/// Point `index` of the two-dimensional golden-ratio recurrence.
fn recurrence_point(index: usize, shift: [f64; 2]) -> (f64, f64) {
    const PLASTIC: f64 = 1.324_717_957_244_746;
    let k = index as f64 + 1.0;
    ((shift[0] + k / PLASTIC).fract(), (shift[1] + k / (PLASTIC * PLASTIC)).fract())
}

/// Halton point with the given bases, used to spread bump centres.
fn halton(index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Slot of a contrast id: its trailing number, or a hash for ids without one.
fn contrast_index(contrast_id: &str, n_contrasts: usize) -> Result<usize> {
    let digits: String = contrast_id.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    let digits: String = digits.chars().rev().collect();
    let index = match digits.parse::<u64>() {
        Ok(i) => i as usize,
        Err(_) => (stable_hash(&[contrast_id.as_bytes()]) % n_contrasts.max(1) as u64) as usize,
    };
    if index >= n_contrasts {
        return Err(Error::InvalidConfig(format!(
            "contrast `{contrast_id}` has index {index} but only {n_contrasts} contrasts are configured"
        )));
    }
    Ok(index)
}

#[derive(Clone, Debug)]
struct Bump {
    center: [f64; 2],
    amplitude: f64,
    width: f64,
}

fn bump_field(bumps: &[Bump], uv: &Array2<f64>) -> Vec<f64> {
    (0..uv.nrows())
        .map(|i| {
            bumps
                .iter()
                .map(|b| {
                    let d2 = (uv[[i, 0]] - b.center[0]).powi(2) + (uv[[i, 1]] - b.center[1]).powi(2);
                    b.amplitude * (-d2 / (2.0 * b.width * b.width)).exp()
                })
                .sum()
        })
        .collect()
}

/// Bump centres for contrasts `0..count`, `per_contrast` each. Candidates come
/// from a shifted golden-ratio recurrence and are dealt round-robin, skipping
/// any that fall too close to a centre already taken by another contrast.
fn contrast_centres(count: usize, per_contrast: usize, seed: u64, width: f64) -> Vec<Vec<[f64; 2]>> {
    let shift = [rng_for(seed, "shift", &[]).random::<f64>(), rng_for(seed, "shift", &[1]).random::<f64>()];
    let mut sep = 2.5 * width;
    loop {
        let mut centres: Vec<Vec<[f64; 2]>> = vec![Vec::new(); count];
        let mut next = 0usize;
        let budget = 200 * count * per_contrast + 100;
        let mut complete = true;
        'fill: for _ in 0..per_contrast {
            for k in 0..count {
                loop {
                    if next >= budget {
                        complete = false;
                        break 'fill;
                    }
                    let (u, v) = recurrence_point(next, shift);
                    next += 1;
                    let c = [0.12 + 0.76 * u, 0.12 + 0.76 * v];
                    let clash = centres.iter().enumerate().any(|(o, cs)| {
                        o != k && cs.iter().any(|x| (x[0] - c[0]).hypot(x[1] - c[1]) < sep)
                    });
                    if !clash {
                        centres[k].push(c);
                        break;
                    }
                }
            }
        }
        if complete {
            return centres;
        }
        sep *= 0.9;
    }
}

fn contrast_bumps(contrast_id: &str, seed: u64, cfg: &SynthConfig) -> Result<Vec<Bump>> {
    let index = contrast_index(contrast_id, cfg.n_contrasts)?;
    let mut rng = rng_for(seed, "contrast", contrast_id.as_bytes());
    let count = if cfg.max_bumps == 0 { 0 } else { rng.random_range(cfg.min_bumps..=cfg.max_bumps) };
    if count == 0 {
        return Ok(Vec::new());
    }
    let centres = contrast_centres(cfg.n_contrasts, cfg.max_bumps, seed, cfg.bump_width);
    Ok(centres[index][..count]
        .iter()
        .map(|&center| Bump { center, amplitude: rng.random_range(0.7..1.0), width: cfg.bump_width })
        .collect())
}

/// Sets the contrast channel to the contrast's bump pattern on `template`.
pub fn plant_contrast(template: &Graph, contrast_id: &str, seed: u64, cfg: &SynthConfig) -> Result<Graph> {
    crate::graph::validate_graph(template)?;
    let uv = positions(template);
    let field = bump_field(&contrast_bumps(contrast_id, seed, cfg)?, &uv);
    let mut g = template.clone();
    for (i, v) in field.into_iter().enumerate() {
        g.features[[i, CONTRAST_CHANNEL]] = v;
    }
    g.set_meta(META_CONTRAST, contrast_id);
    Ok(g)
}

fn trait_bumps(seed: u64, cfg: &SynthConfig) -> Vec<Bump> {
    let shift = [rng_for(seed, "trait-shift", &[]).random::<f64>(), rng_for(seed, "trait-shift", &[1]).random::<f64>()];
    (0..cfg.n_traits)
        .map(|m| {
            let idx = 1000 + 7 * m;
            Bump {
                center: [
                    0.15 + 0.7 * (halton(idx, 5) + shift[0]).fract(),
                    0.15 + 0.7 * (halton(idx, 7) + shift[1]).fract(),
                ],
                amplitude: 1.0,
                width: 1.5 * cfg.bump_width,
            }
        })
        .collect()
}

/// Subject-specific geometry and functional variability.
///
/// Geometry (jitter, resampling, geodesics) depends only on `subject_seed`, so
/// every contrast of a subject shares the same node set. Feature noise also
/// depends on the contrast.
pub fn perturb_subject(g: &Graph, subject_seed: u64, cfg: &SynthConfig) -> Result<Graph> {
    crate::graph::validate_graph(g)?;
    let n = g.n();
    let uv0 = positions(g);
    let diam = diameter(&uv0);
    let mut contrast: Vec<f64> = g.features.column(CONTRAST_CHANNEL).to_vec();

    if cfg.n_traits > 0 && cfg.trait_amplitude != 0.0 {
        let mut trng = rng_for(cfg.seed, "traits", &subject_seed.to_le_bytes());
        let raw: Vec<f64> = (0..cfg.n_traits).map(|_| -trng.random::<f64>().max(1e-12).ln()).collect();
        let total: f64 = raw.iter().sum();
        let bumps = trait_bumps(cfg.seed, cfg);
        for (m, b) in bumps.iter().enumerate() {
            let w = cfg.trait_amplitude * raw[m] / total;
            let field = bump_field(std::slice::from_ref(b), &uv0);
            for (c, f) in contrast.iter_mut().zip(field) {
                *c += w * f;
            }
        }
    }

    let mut geo = rng_for(cfg.seed, "geometry", &subject_seed.to_le_bytes());
    let mut uv = uv0.clone();
    if cfg.jitter_sigma > 0.0 {
        // isotropic: the rms displacement length is jitter_sigma * diameter
        let scale = cfg.jitter_sigma * diam / std::f64::consts::SQRT_2;
        for x in uv.iter_mut() {
            let z: f64 = geo.sample(StandardNormal);
            *x += scale * z;
        }
    }
    let n_replace = (cfg.resample_frac * n as f64).floor() as usize;
    if n_replace > 0 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut geo);
        let (removed, kept) = idx.split_at(n_replace);
        let dup_scale = cfg.jitter_sigma.max(0.01) * diam;
        let snapshot_uv = uv.clone();
        let snapshot_c = contrast.clone();
        for &slot in removed {
            let src = kept[geo.random_range(0..kept.len())];
            for c in 0..2 {
                let z: f64 = geo.sample(StandardNormal);
                uv[[slot, c]] = snapshot_uv[[src, c]] + dup_scale * z;
            }
            contrast[slot] = snapshot_c[src];
        }
    }

    if cfg.feature_noise_sigma > 0.0 {
        let cid = g.contrast_id().unwrap_or("");
        let mut nrng = rng_for(cfg.seed, "noise", &[&subject_seed.to_le_bytes()[..], cid.as_bytes()].concat());
        for c in contrast.iter_mut() {
            let z: f64 = nrng.sample(StandardNormal);
            *c += cfg.feature_noise_sigma * z;
        }
    }

    let mut out = build_graph(&uv, &contrast, cfg.knn_k)?;
    out.meta = g.meta.clone();
    out.set_meta(META_SUBJECT, format!("{subject_seed:016x}"));
    out.set_meta(META_GEOMETRY, "native");
    Ok(out)
}

pub fn subject_name(i: usize) -> String {
    format!("s{i:03}")
}

pub fn contrast_name(i: usize) -> String {
    format!("c{i}")
}

/// Seed for subject `i` under corpus seed `seed`.
pub fn subject_seed(seed: u64, i: usize) -> u64 {
    stable_hash(&[&seed.to_le_bytes(), b"subject", &(i as u64).to_le_bytes()])
}

/// Transfers the native contrast values onto the template nodes by nearest
/// neighbour in surface-parameter space.
pub fn project_to_common(native: &Graph, template: &Graph) -> Graph {
    let uv_n = positions(native);
    let uv_t = positions(template);
    let mut g = template.clone();
    for t in 0..template.n() {
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..native.n() {
            let d = (uv_n[[i, 0]] - uv_t[[t, 0]]).powi(2) + (uv_n[[i, 1]] - uv_t[[t, 1]]).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        g.features[[t, CONTRAST_CHANNEL]] = native.features[[best.1, CONTRAST_CHANNEL]];
    }
    g.meta = native.meta.clone();
    g.set_meta(META_GEOMETRY, "common");
    g
}

/// Assigns whole subjects to splits. Returns one split per subject index.
pub fn split_subjects(n_subjects: usize, fractions: [f64; 3], seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut rng_for(seed, "split", &[]));
    let n_train = (fractions[0] * n_subjects as f64).round() as usize;
    let n_val = ((fractions[1] * n_subjects as f64).round() as usize).min(n_subjects - n_train.min(n_subjects));
    let mut splits = vec![Split::Test; n_subjects];
    for (rank, &s) in order.iter().enumerate() {
        splits[s] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Writes the template, every native graph and its common-geometry projection
/// under `out_dir`, plus `manifest.txt`. Returns the manifest.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let template = make_template_with_k(cfg.n_template, cfg.seed, cfg.knn_k)?;
    write_graph(&template, &out_dir.join("template.graph"))?;
    let splits = split_subjects(cfg.n_subjects, cfg.split_fractions, cfg.seed);
    let planted: Vec<Graph> = (0..cfg.n_contrasts)
        .map(|c| plant_contrast(&template, &contrast_name(c), cfg.seed, cfg))
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    let mut train_natives = Vec::new();
    for (s, &split) in splits.iter().enumerate() {
        for (c, p) in planted.iter().enumerate() {
            let mut native = perturb_subject(p, subject_seed(cfg.seed, s), cfg)?;
            native.set_meta(META_SUBJECT, subject_name(s));
            let common = project_to_common(&native, &template);
            let stem = format!("{}_{}.graph", subject_name(s), contrast_name(c));
            let native_path = PathBuf::from("native").join(&stem);
            let common_path = PathBuf::from("common").join(&stem);
            write_graph(&native, &out_dir.join(&native_path))?;
            write_graph(&common, &out_dir.join(&common_path))?;
            for path in [native_path, common_path] {
                entries.push(ManifestEntry {
                    path,
                    subject_id: subject_name(s),
                    contrast_id: contrast_name(c),
                    split,
                });
            }
            if split == Split::Train {
                train_natives.push(native);
            }
        }
    }
    let standardizer = Standardizer::fit(train_natives.iter())?;
    let manifest = DatasetManifest {
        entries,
        template_path: Some(PathBuf::from("template.graph")),
        standardizer: Some(standardizer),
    };
    write_manifest(&manifest, &out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    // rounding can leave a tiny spread on constant input
    let floor = |v: &[f64]| n * (1e-12 * v.iter().fold(0.0f64, |m, x| m.max(x.abs()))).powi(2);
    if saa <= floor(a) || sbb <= floor(b) {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
