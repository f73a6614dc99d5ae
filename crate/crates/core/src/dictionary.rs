//! Alpha-conditioned dictionary atoms on one shared common geometry.
//!
//! Atoms are held as a `K x (n d)` matrix whose row `k` is atom `k`'s
//! feature matrix flattened row-major, so a reconstruction is one
//! `(1 x K) . (K x n d)` product reshaped to `n x d`.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{softbin_values, Tape, Var};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{validate_graph, Graph};
use crate::io::Split;

pub const SOFTBIN_BINS: usize = 16;
pub const MLP_HIDDEN: usize = 16;
/// Scale of the random output-layer weights of a fresh soft-bin MLP.
const MLP_INIT_SCALE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Fixed,
    LinearAlpha,
    SoftbinMlp,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fixed => "fixed",
            Variant::LinearAlpha => "linear",
            Variant::SoftbinMlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Variant::Fixed),
            "linear" => Ok(Variant::LinearAlpha),
            "mlp" => Ok(Variant::SoftbinMlp),
            _ => Err(Error::InvalidConfig(format!("unknown dictionary variant {s:?} (expected fixed, linear or mlp)"))),
        }
    }
}

/// Soft-bin code of `alpha` with range checking.
pub fn softbin(alpha: f64, bins: usize) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange { what: "alpha", value: alpha, lo: 0.0, hi: 1.0 });
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("soft binning needs at least one bin".into()));
    }
    Ok(Array1::from(softbin_values(alpha, bins)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryModel {
    pub variant: Variant,
    pub structure: Array2<f64>,
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl DictionaryModel {
    /// Builds a model whose atoms equal `atoms` (each `n x d`) at every alpha.
    pub fn from_atoms(variant: Variant, atoms: &[Array2<f64>], structure: Array2<f64>, seed: u64) -> Result<Self> {
        let k = atoms.len();
        if k == 0 {
            return Err(Error::InvalidConfig("a dictionary needs at least one atom".into()));
        }
        let (n, d) = atoms[0].dim();
        if atoms.iter().any(|a| a.dim() != (n, d)) || structure.dim() != (n, n) {
            return Err(Error::DimensionMismatch("atoms must share one shape matching the structure".into()));
        }
        validate_graph(&Graph::new(atoms[0].clone(), structure.clone()))?;
        let mut flat = Array2::zeros((k, n * d));
        for (mut row, a) in flat.rows_mut().into_iter().zip(atoms) {
            row.assign(&Array1::from_iter(a.iter().copied()));
        }
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteEntry { matrix: "atoms", i: 0, j: 0 });
        }
        let tensors = match variant {
            Variant::Fixed => vec![("atoms".into(), flat)],
            Variant::LinearAlpha => vec![("atoms0".into(), flat.clone()), ("atoms1".into(), flat)],
            Variant::SoftbinMlp => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d4c_50);
                let w1 = Array2::from_shape_fn((SOFTBIN_BINS, MLP_HIDDEN), |_| rng.sample::<f64, _>(StandardNormal) * 0.5);
                let b1 = Array2::from_elem((1, MLP_HIDDEN), 0.1);
                let w2 = Array2::from_shape_fn((MLP_HIDDEN, k * n * d), |_| rng.sample::<f64, _>(StandardNormal) * MLP_INIT_SCALE);
                let b2 = flat.into_shape_with_order((1, k * n * d)).expect("contiguous");
                vec![("mlp.w1".into(), w1), ("mlp.b1".into(), b1), ("mlp.w2".into(), w2), ("mlp.b2".into(), b2)]
            }
        };
        Ok(Self { variant, structure, k, n, d, tensors })
    }

    pub fn arrays(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_arrays(&mut self, arrays: Vec<Array2<f64>>) {
        for ((_, t), a) in self.tensors.iter_mut().zip(arrays) {
            *t = a;
        }
    }

    pub fn to_vars<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.tensors
            .iter()
            .map(|(_, t)| if trainable { tape.var(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Checks tensor names and shapes against the variant and sizes.
    pub fn validate(&self) -> Result<()> {
        let (k, nd) = (self.k, self.n * self.d);
        let expected: Vec<(&str, (usize, usize))> = match self.variant {
            Variant::Fixed => vec![("atoms", (k, nd))],
            Variant::LinearAlpha => vec![("atoms0", (k, nd)), ("atoms1", (k, nd))],
            Variant::SoftbinMlp => vec![
                ("mlp.w1", (SOFTBIN_BINS, MLP_HIDDEN)),
                ("mlp.b1", (1, MLP_HIDDEN)),
                ("mlp.w2", (MLP_HIDDEN, k * nd)),
                ("mlp.b2", (1, k * nd)),
            ],
        };
        if expected.len() != self.tensors.len()
            || expected.iter().zip(&self.tensors).any(|((en, es), (n, t))| en != n || *es != t.dim())
        {
            return Err(Error::InvalidConfig(format!("dictionary tensors do not match a {} model", self.variant.as_str())));
        }
        if self.tensors.iter().any(|(_, t)| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteEntry { matrix: "dictionary", i: 0, j: 0 });
        }
        if self.structure.dim() != (self.n, self.n) {
            return Err(Error::DimensionMismatch("dictionary structure size".into()));
        }
        Ok(())
    }

    /// Atoms at `alpha` as a `K x (n d)` tape value built from `vars`.
    pub fn atoms_var<'t>(&self, vars: &[Var<'t>], alpha: f64) -> Result<Var<'t>> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::OutOfRange { what: "alpha", value: alpha, lo: 0.0, hi: 1.0 });
        }
        match self.variant {
            Variant::Fixed => Ok(vars[0]),
            // endpoint 0 carries weight alpha, endpoint 1 carries 1 - alpha
            Variant::LinearAlpha => vars[0].scale(alpha).add(vars[1].scale(1.0 - alpha)),
            Variant::SoftbinMlp => {
                let tape = vars[0].tape();
                let code = tape.constant(softbin(alpha, SOFTBIN_BINS)?.insert_axis(Axis(0)));
                let hidden = code.matmul(vars[0])?.add(vars[1])?.relu();
                hidden.matmul(vars[2])?.add(vars[3])?.reshape(self.k, self.n * self.d)
            }
        }
    }

    /// Atom feature matrices at `alpha`, each `n x d`.
    pub fn atoms_at(&self, alpha: f64) -> Result<Vec<Array2<f64>>> {
        let tape = Tape::new();
        let flat = self.atoms_var(&self.to_vars(&tape, false), alpha)?.to_array();
        Ok(flat
            .rows()
            .into_iter()
            .map(|r| r.to_owned().into_shape_with_order((self.n, self.d)).expect("row length is n d"))
            .collect())
    }

    /// Graph with features `sum_k omega_k atom_k(alpha)` on the common structure.
    pub fn reconstruct(&self, omega: &Array1<f64>, alpha: f64) -> Result<Graph> {
        check_simplex(omega, self.k)?;
        let atoms = self.atoms_at(alpha)?;
        let mut f = Array2::zeros((self.n, self.d));
        for (w, a) in omega.iter().zip(&atoms) {
            f.scaled_add(*w, a);
        }
        let g = Graph::new(f, self.structure.clone());
        validate_graph(&g)?;
        Ok(g)
    }
}

/// Reconstruction features `reshape(omega . atoms)` on a tape.
pub fn reconstruct_var<'t>(atoms: Var<'t>, omega: Var<'t>, n: usize, d: usize) -> Result<Var<'t>> {
    omega.matmul(atoms)?.reshape(n, d)
}

/// Errors unless `omega` has `k` nonnegative entries summing to 1 within 1e-12.
pub fn check_simplex(omega: &Array1<f64>, k: usize) -> Result<()> {
    if omega.len() != k {
        return Err(Error::DimensionMismatch(format!("embedding has {} entries, dictionary has {k} atoms", omega.len())));
    }
    let sum = omega.sum();
    if omega.iter().any(|w| *w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-12 {
        return Err(Error::DegenerateInput(format!("embedding is not on the simplex (sum {sum})")));
    }
    Ok(())
}

/// Clips negative entries to zero and renormalizes; uniform if nothing is left.
pub fn clamp_to_simplex(v: &Array1<f64>) -> Array1<f64> {
    let clipped = v.mapv(|x| if x.is_finite() { x.max(0.0) } else { 0.0 });
    let s = clipped.sum();
    if s > 0.0 {
        clipped / s
    } else {
        Array1::from_elem(v.len(), 1.0 / v.len() as f64)
    }
}

/// Initial atoms drawn from `k` distinct common-geometry training graphs, on
/// the template structure.
pub fn init_dictionary(ds: &Dataset, k: usize, variant: Variant, seed: u64) -> Result<DictionaryModel> {
    let candidates: Vec<&Graph> = ds.split(Split::Train).into_iter().filter_map(|s| s.common.as_ref()).collect();
    if candidates.len() < k || k == 0 {
        return Err(Error::InsufficientData { what: "common-geometry training graphs", needed: k.max(1), found: candidates.len() });
    }
    let template = ds.common_geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, candidates.len(), k).into_vec();
    picks.sort_unstable();
    let atoms: Vec<Array2<f64>> = picks.iter().map(|&i| candidates[i].features.clone()).collect();
    DictionaryModel::from_atoms(variant, &atoms, template.structure, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::graph::shortest_paths;

    fn structure(n: usize) -> Array2<f64> {
        let mut adj = Array2::zeros((n, n));
        for i in 0..n - 1 {
            adj[[i, i + 1]] = 1.0;
            adj[[i + 1, i]] = 1.0;
        }
        shortest_paths(&adj).unwrap() / (n - 1) as f64
    }

    fn random_atoms(rng: &mut ChaCha8Rng, k: usize, n: usize, d: usize) -> Vec<Array2<f64>> {
        (0..k).map(|_| Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn softbin_examples() {
        let centre = softbin(5.0 / 15.0, 16).unwrap();
        assert!((centre[5] - 1.0).abs() < 1e-12 && (centre.sum() - 1.0).abs() < 1e-15);
        let mid = softbin(5.5 / 15.0, 16).unwrap();
        assert!((mid[5] - 0.5).abs() < 1e-12 && (mid[6] - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let s = softbin(rng.random_range(0.0..=1.0), 16).unwrap();
            assert!(s.iter().all(|x| *x >= 0.0));
            assert!((s.sum() - 1.0).abs() < 1e-15);
        }
        assert!(matches!(softbin(1.2, 16), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn linear_alpha_endpoints_and_affinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = DictionaryModel::from_atoms(Variant::LinearAlpha, &random_atoms(&mut rng, 3, 5, 2), structure(5), 0).unwrap();
        let other = Array2::from_shape_fn((3, 10), |_| rng.random_range(-1.0..1.0));
        m.tensors[1].1 = other.clone();
        let at = |a: f64| m.atoms_at(a).unwrap();
        let f0 = m.tensors[0].1.row(0).to_owned().into_shape_with_order((5, 2)).unwrap();
        let f1 = other.row(0).to_owned().into_shape_with_order((5, 2)).unwrap();
        assert_eq!(at(1.0)[0], f0);
        assert_eq!(at(0.0)[0], f1);
        assert!((&at(0.5)[0] - &((&f0 + &f1) / 2.0)).iter().all(|d| d.abs() < 1e-15));
        let (x, y, z) = (at(0.1), at(0.4), at(0.9));
        for k in 0..3 {
            let predicted = &x[k] + &((&z[k] - &x[k]) * (0.3 / 0.8));
            assert!((&y[k] - &predicted).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn fixed_ignores_alpha_and_reconstruction_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let atoms = random_atoms(&mut rng, 3, 6, 2);
        let m = DictionaryModel::from_atoms(Variant::Fixed, &atoms, structure(6), 0).unwrap();
        assert_eq!(m.atoms_at(0.0).unwrap(), m.atoms_at(0.7).unwrap());
        let e1 = Array1::from(vec![0.0, 1.0, 0.0]);
        assert_eq!(m.reconstruct(&e1, 0.3).unwrap().features, atoms[1]);
        let uniform = Array1::from_elem(3, 1.0 / 3.0);
        let mean = (&atoms[0] + &atoms[1] + &atoms[2]) / 3.0;
        assert!((&m.reconstruct(&uniform, 0.3).unwrap().features - &mean).iter().all(|d| d.abs() < 1e-14));
        let w1 = Array1::from(vec![0.2, 0.3, 0.5]);
        let w2 = Array1::from(vec![0.6, 0.1, 0.3]);
        let lam = 0.35;
        let mixed = &w1 * lam + &w2 * (1.0 - lam);
        let lhs = m.reconstruct(&mixed, 0.0).unwrap().features;
        let rhs = m.reconstruct(&w1, 0.0).unwrap().features * lam + m.reconstruct(&w2, 0.0).unwrap().features * (1.0 - lam);
        assert!((&lhs - &rhs).iter().all(|d| d.abs() < 1e-14));
        assert!(m.reconstruct(&Array1::from(vec![0.5, 0.6, -0.1]), 0.0).is_err());
    }

    #[test]
    fn mlp_starts_at_sampled_atoms_and_is_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let atoms = random_atoms(&mut rng, 4, 7, 3);
        let mut m = DictionaryModel::from_atoms(Variant::SoftbinMlp, &atoms, structure(7), 9).unwrap();
        for i in 0..=100 {
            let got = m.atoms_at(i as f64 / 100.0).unwrap();
            for (g, a) in got.iter().zip(&atoms) {
                assert!((g - a).iter().all(|d| d.abs() <= 1e-3));
            }
        }
        // move the weights away from init so alpha matters, then measure L
        for (_, t) in m.tensors.iter_mut() {
            t.mapv_inplace(|x| x + rng.random_range(-0.5..0.5));
        }
        let dist = |a: f64, b: f64| {
            let (x, y) = (m.atoms_at(a).unwrap(), m.atoms_at(b).unwrap());
            x.iter().zip(&y).map(|(p, q)| (p - q).mapv(|v| v * v).sum()).sum::<f64>().sqrt()
        };
        let grid: Vec<f64> = (0..=3000).map(|i| i as f64 / 3000.0).collect();
        let lipschitz = grid.windows(2).map(|w| dist(w[0], w[1]) / (w[1] - w[0])).fold(0.0, f64::max);
        for _ in 0..200 {
            let a = rng.random_range(0.0..1.0 - 1e-4);
            assert!(dist(a, a + 1e-4) <= lipschitz * 1e-4 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn gradients_through_atoms_and_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (k, n, d) = (3, 5, 2);
        let target = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let omega = Array2::from_shape_vec((1, k), vec![0.2, 0.5, 0.3]).unwrap();
        for variant in [Variant::Fixed, Variant::LinearAlpha, Variant::SoftbinMlp] {
            let mut m = DictionaryModel::from_atoms(variant, &random_atoms(&mut rng, k, n, d), structure(n), 5).unwrap();
            for (_, t) in m.tensors.iter_mut() {
                t.mapv_inplace(|x| x + rng.random_range(-0.3..0.3));
            }
            for (idx, (name, tensor)) in m.tensors.iter().enumerate() {
                let report = gradcheck(
                    |tape, v| {
                        let mut vars = m.to_vars(tape, false);
                        vars[idx] = v;
                        let atoms = m.atoms_var(&vars, 0.37)?;
                        let rec = reconstruct_var(atoms, tape.constant(omega.clone()), n, d)?;
                        Ok(rec.sub(tape.constant(target.clone()))?.square().sum())
                    },
                    tensor,
                    1e-6,
                )
                .unwrap();
                assert!(report.passed, "{variant:?} {name}: {report:?}");
            }
        }
    }

    #[test]
    fn init_from_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::synth::SynthConfig { n_template: 20, n_subjects: 4, ..Default::default() };
        crate::synth::gen_dataset(&cfg, dir.path()).unwrap();
        let ds = Dataset::load(&dir.path().join("manifest.txt")).unwrap();
        let a = init_dictionary(&ds, 3, Variant::LinearAlpha, 7).unwrap();
        let b = init_dictionary(&ds, 3, Variant::LinearAlpha, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tensors[0].1, a.tensors[1].1);
        assert_eq!((a.k, a.n, a.d), (3, 20, 3));
        a.validate().unwrap();
        assert!(matches!(init_dictionary(&ds, 1000, Variant::Fixed, 0), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Fixed, Variant::LinearAlpha, Variant::SoftbinMlp] {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("sparse").is_err());
    }

    #[test]
    fn simplex_helpers() {
        let v = clamp_to_simplex(&Array1::from(vec![-1.0, 1.0, 3.0]));
        assert_eq!(v, Array1::from(vec![0.0, 0.25, 0.75]));
        check_simplex(&v, 3).unwrap();
        assert_eq!(clamp_to_simplex(&Array1::from(vec![-1.0, -2.0])), Array1::from(vec![0.5, 0.5]));
    }
}
