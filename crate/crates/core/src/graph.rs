//! Attributed graphs `G = (F, C)` with uniform node mass.
//!
//! `F` holds one feature row per node, `C` the pairwise structure (geodesic
//! distances on the synthetic surfaces). Every graph handed between modules is
//! expected to pass [`validate_graph`].

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const META_SUBJECT: &str = "subject_id";
pub const META_CONTRAST: &str = "contrast_id";
pub const META_GEOMETRY: &str = "geometry";

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub features: Array2<f64>,
    pub structure: Array2<f64>,
    pub meta: BTreeMap<String, String>,
}

impl Graph {
    pub fn new(features: Array2<f64>, structure: Array2<f64>) -> Self {
        Self { features, structure, meta: BTreeMap::new() }
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    /// Uniform node mass `1/n`.
    pub fn mass(&self) -> Array1<f64> {
        uniform_mass(self.n())
    }

    pub fn subject_id(&self) -> Option<&str> {
        self.meta.get(META_SUBJECT).map(String::as_str)
    }

    pub fn contrast_id(&self) -> Option<&str> {
        self.meta.get(META_CONTRAST).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    /// Returns the graph with nodes reordered so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.n();
        assert_eq!(perm.len(), n, "permutation length");
        let features = Array2::from_shape_fn((n, self.d()), |(i, f)| self.features[[perm[i], f]]);
        let structure = Array2::from_shape_fn((n, n), |(i, j)| self.structure[[perm[i], perm[j]]]);
        Graph { features, structure, meta: self.meta.clone() }
    }
}

pub fn uniform_mass(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

/// Checks every graph invariant and reports the first violation found.
pub fn validate_graph(g: &Graph) -> Result<()> {
    let n = g.features.nrows();
    if n == 0 || g.features.ncols() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "graph needs n >= 1 and d >= 1, got n = {n}, d = {}",
            g.features.ncols()
        )));
    }
    if g.structure.dim() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "structure is {:?} but graph has {n} nodes",
            g.structure.dim()
        )));
    }
    for ((i, j), v) in g.features.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteEntry { matrix: "F", i, j });
        }
    }
    for ((i, j), v) in g.structure.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteEntry { matrix: "C", i, j });
        }
    }
    for i in 0..n {
        let v = g.structure[[i, i]];
        if v != 0.0 {
            return Err(Error::NonzeroDiagonal { i, value: v });
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (g.structure[[i, j]], g.structure[[j, i]]);
            if a != b {
                return Err(Error::AsymmetricStructure { i, j, a, b });
            }
        }
    }
    Ok(())
}

/// All-pairs shortest paths over a weighted adjacency matrix.
///
/// Off-diagonal zeros mean "no edge". Runs a dense Dijkstra from every source,
/// `O(n^3)` overall, which is fine at the sizes used here.
pub fn shortest_paths(adjacency: &Array2<f64>) -> Result<Array2<f64>> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "adjacency must be square, got {:?}",
            adjacency.dim()
        )));
    }
    let mut out = Array2::<f64>::zeros((n, n));
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    for s in 0..n {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        done.iter_mut().for_each(|d| *d = false);
        dist[s] = 0.0;
        for _ in 0..n {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for (v, (&dv, &fin)) in dist.iter().zip(done.iter()).enumerate() {
                if !fin && dv < best {
                    best = dv;
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            for v in 0..n {
                let w = adjacency[[u, v]];
                if v != u && w > 0.0 && !done[v] {
                    let cand = best + w;
                    if cand < dist[v] {
                        dist[v] = cand;
                    }
                }
            }
        }
        for t in 0..n {
            if !dist[t].is_finite() {
                return Err(Error::DisconnectedGraph { from: s, to: t });
            }
            out[[s, t]] = dist[t];
        }
    }
    // Floating-point path sums can differ by an ulp depending on direction.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = out[[i, j]].min(out[[j, i]]);
            out[[i, j]] = m;
            out[[j, i]] = m;
        }
    }
    Ok(out)
}

/// Divides `C` by its largest entry. Single-node graphs pass through unchanged.
pub fn normalize_structure(g: &Graph) -> Result<Graph> {
    let n = g.n();
    if n <= 1 {
        return Ok(g.clone());
    }
    let max = g.structure.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::DegenerateStructure { n });
    }
    let mut out = g.clone();
    if max != 1.0 {
        out.structure.mapv_inplace(|v| v / max);
    }
    Ok(out)
}

/// Per-dimension affine standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Pools every node row of `graphs`. Zero-variance dimensions get `std = 1`.
    pub fn fit<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for g in graphs {
            if sum.is_empty() {
                sum = vec![0.0; g.d()];
                sq = vec![0.0; g.d()];
            }
            if g.d() != sum.len() {
                return Err(Error::DimensionMismatch("feature dims differ across graphs".into()));
            }
            for row in g.features.rows() {
                for (f, &x) in row.iter().enumerate() {
                    sum[f] += x;
                    sq[f] += x * x;
                }
            }
            count += g.n();
        }
        if count == 0 {
            return Err(Error::InsufficientData { what: "nodes for standardization", needed: 1, found: 0 });
        }
        let c = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / c - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, g: &Graph) -> Result<Graph> {
        if g.d() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "standardizer has {} dims, graph has {}",
                self.mean.len(),
                g.d()
            )));
        }
        let mut out = g.clone();
        for mut row in out.features.rows_mut() {
            for (f, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[f]) / self.std[f];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_node(c: Array2<f64>) -> Graph {
        Graph::new(array![[0.0], [1.0]], c)
    }

    #[test]
    fn validate_accepts_symmetric_zero_diagonal() {
        validate_graph(&two_node(array![[0.0, 1.0], [1.0, 0.0]])).unwrap();
    }

    #[test]
    fn validate_rejects_asymmetric() {
        let err = validate_graph(&two_node(array![[0.0, 1.0], [2.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::AsymmetricStructure { i: 0, j: 1, .. }));
    }

    #[test]
    fn validate_rejects_nonfinite_features() {
        let mut g = two_node(array![[0.0, 1.0], [1.0, 0.0]]);
        g.features[[1, 0]] = f64::NAN;
        assert!(matches!(validate_graph(&g), Err(Error::NonFiniteEntry { matrix: "F", i: 1, j: 0 })));
    }

    #[test]
    fn validate_rejects_diagonal_and_shape() {
        let g = two_node(array![[0.5, 1.0], [1.0, 0.0]]);
        assert!(matches!(validate_graph(&g), Err(Error::NonzeroDiagonal { i: 0, .. })));
        let g = Graph::new(array![[0.0], [1.0]], array![[0.0]]);
        assert!(matches!(validate_graph(&g), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn path_graph_two_hops() {
        let adj = array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let c = shortest_paths(&adj).unwrap();
        assert_eq!(c[[0, 2]], 2.0);
        assert_eq!(c[[2, 0]], 2.0);
    }

    #[test]
    fn single_node_paths() {
        let c = shortest_paths(&array![[0.0]]).unwrap();
        assert_eq!(c, array![[0.0]]);
    }

    #[test]
    fn disconnected_is_an_error() {
        let adj = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(matches!(shortest_paths(&adj), Err(Error::DisconnectedGraph { .. })));
    }

    fn floyd_warshall(adj: &Array2<f64>) -> Array2<f64> {
        let n = adj.nrows();
        let mut d = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                0.0
            } else if adj[[i, j]] > 0.0 {
                adj[[i, j]]
            } else {
                f64::INFINITY
            }
        });
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[[i, k]] + d[[k, j]];
                    if via < d[[i, j]] {
                        d[[i, j]] = via;
                    }
                }
            }
        }
        d
    }

    fn random_connected(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut adj = Array2::zeros((n, n));
        // random spanning tree, then extra edges
        for v in 1..n {
            let u = rng.random_range(0..v);
            let w = rng.random_range(0.1..2.0);
            adj[[u, v]] = w;
            adj[[v, u]] = w;
        }
        for _ in 0..n {
            let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
            if u != v {
                let w = rng.random_range(0.1..2.0);
                adj[[u, v]] = w;
                adj[[v, u]] = w;
            }
        }
        adj
    }

    #[test]
    fn dijkstra_matches_floyd_warshall() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let adj = random_connected(8, &mut rng);
            let fast = shortest_paths(&adj).unwrap();
            let slow = floyd_warshall(&adj);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn normalize_halves_and_is_idempotent() {
        let g = two_node(array![[0.0, 2.0], [2.0, 0.0]]);
        let h = normalize_structure(&g).unwrap();
        assert_eq!(h.structure, array![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(normalize_structure(&h).unwrap(), h);
        let single = Graph::new(array![[3.0]], array![[0.0]]);
        assert_eq!(normalize_structure(&single).unwrap(), single);
        let zero = two_node(Array2::zeros((2, 2)));
        assert!(matches!(normalize_structure(&zero), Err(Error::DegenerateStructure { n: 2 })));
    }

    #[test]
    fn standardizer_centers_and_scales() {
        let g = Graph::new(array![[1.0, 5.0], [3.0, 5.0]], array![[0.0, 1.0], [1.0, 0.0]]);
        let s = Standardizer::fit([&g]).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        let z = s.apply(&g).unwrap();
        assert_eq!(z.features, array![[-1.0, 0.0], [1.0, 0.0]]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn triangle_inequality(seed in any::<u64>(), n in 2usize..=12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = shortest_paths(&random_connected(n, &mut rng)).unwrap();
                for i in 0..n {
                    prop_assert_eq!(d[[i, i]], 0.0);
                    for j in 0..n {
                        prop_assert_eq!(d[[i, j]], d[[j, i]]);
                        for k in 0..n {
                            prop_assert!(d[[i, k]] <= d[[i, j]] + d[[j, k]] + 1e-12);
                        }
                    }
                }
            }
        }
    }
}
