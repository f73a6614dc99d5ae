//! Exact solvers: linear OT on the transport polytope and conditional-gradient
//! FGW.
//!
//! The linear solver is a transportation-simplex (network simplex on the
//! complete bipartite graph). Degeneracy is removed with the classic supply
//! perturbation `a_i + eps`, `b_last + m * eps`, which keeps every basis
//! non-degenerate and therefore rules out cycling. For uniform marginals the
//! problem is rescaled to integer masses and `eps` is a power of two, so every
//! flow is computed exactly. The final basis is re-solved with the unperturbed
//! masses.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, Zip};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{feature_cost, fgw_loss};

/// A coupling between two node sets with its target marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub source: Array1<f64>,
    pub target: Array1<f64>,
}

impl TransportPlan {
    /// The product plan `a b^T` with uniform marginals.
    pub fn uniform(n1: usize, n2: usize) -> Self {
        let a = crate::graph::uniform_mass(n1);
        let b = crate::graph::uniform_mass(n2);
        Self { plan: outer(&a, &b), source: a, target: b }
    }

    pub fn with_uniform_targets(plan: Array2<f64>) -> Self {
        let (n1, n2) = plan.dim();
        Self { plan, source: crate::graph::uniform_mass(n1), target: crate::graph::uniform_mass(n2) }
    }

    /// Largest absolute deviation of a row or column sum from its target.
    pub fn max_marginal_violation(&self) -> f64 {
        marginal_violation(&self.plan, &self.source, &self.target)
    }

    pub fn total_mass(&self) -> f64 {
        self.plan.sum()
    }

    pub fn cost(&self, m: &Array2<f64>) -> f64 {
        (&self.plan * m).sum()
    }
}

pub fn marginal_violation(p: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let rows = p.sum_axis(ndarray::Axis(1));
    let cols = p.sum_axis(ndarray::Axis(0));
    let r = rows.iter().zip(a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let c = cols.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    r.max(c)
}

pub fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Exact minimizer of `<P, M>` over plans with marginals `a` and `b`.
pub fn solve_linear_ot(cost: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> Result<TransportPlan> {
    let (m, n) = cost.dim();
    if a.len() != m || b.len() != n || m == 0 || n == 0 {
        return Err(Error::DimensionMismatch(format!(
            "cost is {m}x{n} but marginals have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteEntry { matrix: "M", i: 0, j: 0 });
    }
    if a.iter().chain(b.iter()).any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::DegenerateInput("marginals must be strictly positive".into()));
    }
    let (sa, sb) = (a.sum(), b.sum());
    if (sa - sb).abs() > 1e-12 * sa.max(sb).max(1.0) {
        return Err(Error::InfeasibleMarginals { a: sa, b: sb });
    }

    let uniform = a.iter().all(|&x| x == a[0]) && b.iter().all(|&x| x == b[0]);
    let (supply, demand, unit): (Vec<f64>, Vec<f64>, f64) = if uniform {
        // integer masses n and m; a plan entry of 1 unit is worth sa / (m n)
        (vec![n as f64; m], vec![m as f64; n], sa / (m * n) as f64)
    } else {
        (a.to_vec(), b.to_vec(), 1.0)
    };
    let eps = if uniform {
        let bits = (usize::BITS - (m + 2).leading_zeros()) as i32 + 1;
        2f64.powi(-bits)
    } else {
        let min_mass = supply.iter().chain(demand.iter()).cloned().fold(f64::INFINITY, f64::min);
        1e-9 * min_mass / (m + 1) as f64
    };

    let mut solver = TransportSimplex::new(cost, &supply, &demand, eps);
    solver.run();
    let flows = solver.tree_flows(&supply, &demand);

    let mut plan = Array2::zeros((m, n));
    for (&(i, j), f) in solver.cells.iter().zip(flows) {
        plan[[i, j]] = f.max(0.0) * unit;
    }
    Ok(TransportPlan { plan, source: a.clone(), target: b.clone() })
}

struct TransportSimplex<'a> {
    cost: &'a Array2<f64>,
    m: usize,
    n: usize,
    /// basic cells and their (perturbed) flows
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
    /// incident basic cell ids per node; rows are nodes 0..m, columns m..m+n
    adj: Vec<Vec<usize>>,
    u: Vec<f64>,
    v: Vec<f64>,
    scan_start: usize,
}

impl<'a> TransportSimplex<'a> {
    fn new(cost: &'a Array2<f64>, supply: &[f64], demand: &[f64], eps: f64) -> Self {
        let (m, n) = cost.dim();
        let mut s: Vec<f64> = supply.iter().map(|x| x + eps).collect();
        let mut d = demand.to_vec();
        d[n - 1] += m as f64 * eps;

        // north-west corner start
        let mut cells = Vec::with_capacity(m + n - 1);
        let mut flow = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = s[i].min(d[j]);
            cells.push((i, j));
            flow.push(x);
            s[i] -= x;
            d[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if (s[i] <= d[j] && i < m - 1) || j == n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        let mut adj = vec![Vec::new(); m + n];
        for (id, &(i, j)) in cells.iter().enumerate() {
            adj[i].push(id);
            adj[m + j].push(id);
        }
        Self { cost, m, n, cells, flow, adj, u: vec![0.0; m], v: vec![0.0; n], scan_start: 0 }
    }

    fn potentials(&mut self) {
        let (m, n) = (self.m, self.n);
        let mut seen = vec![false; m + n];
        let mut queue = VecDeque::with_capacity(m + n);
        self.u[0] = 0.0;
        seen[0] = true;
        queue.push_back(0);
        while let Some(node) = queue.pop_front() {
            for &id in &self.adj[node] {
                let (i, j) = self.cells[id];
                let c = self.cost[[i, j]];
                if node < m {
                    if !seen[m + j] {
                        self.v[j] = c - self.u[i];
                        seen[m + j] = true;
                        queue.push_back(m + j);
                    }
                } else if !seen[i] {
                    self.u[i] = c - self.v[j];
                    seen[i] = true;
                    queue.push_back(i);
                }
            }
        }
        debug_assert!(seen.iter().all(|s| *s), "basis is not a spanning tree");
        let _ = n;
    }

    /// Block search for a cell with negative reduced cost.
    fn entering(&mut self, tol: f64) -> Option<(usize, usize)> {
        let total = self.m * self.n;
        let block = ((total as f64).sqrt() as usize).max(16).min(total);
        let mut best: Option<(usize, f64)> = None;
        let mut scanned = 0;
        let mut k = self.scan_start;
        while scanned < total {
            let end = (scanned + block).min(total);
            while scanned < end {
                let (i, j) = (k / self.n, k % self.n);
                let r = self.cost[[i, j]] - self.u[i] - self.v[j];
                if r < -tol && best.is_none_or(|(_, br)| r < br) {
                    best = Some((k, r));
                }
                scanned += 1;
                k += 1;
                if k == total {
                    k = 0;
                }
            }
            if let Some((cell, _)) = best {
                self.scan_start = k;
                return Some((cell / self.n, cell % self.n));
            }
        }
        None
    }

    /// Tree path from row `i` to column `j` as a list of cell ids, ordered from
    /// the column end.
    fn path(&self, i: usize, j: usize) -> Vec<usize> {
        let total = self.m + self.n;
        let mut parent_cell = vec![usize::MAX; total];
        let mut seen = vec![false; total];
        let mut queue = VecDeque::new();
        seen[i] = true;
        queue.push_back(i);
        let target = self.m + j;
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &id in &self.adj[node] {
                let (r, c) = self.cells[id];
                let other = if node < self.m { self.m + c } else { r };
                if !seen[other] {
                    seen[other] = true;
                    parent_cell[other] = id;
                    queue.push_back(other);
                }
            }
        }
        let mut out = Vec::new();
        let mut node = target;
        while node != i {
            let id = parent_cell[node];
            out.push(id);
            let (r, c) = self.cells[id];
            node = if node < self.m { self.m + c } else { r };
        }
        out
    }

    fn run(&mut self) {
        let scale = self.cost.iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
        let tol = 1e-12 * scale.max(1e-300);
        if self.m == 1 || self.n == 1 {
            return;
        }
        loop {
            self.potentials();
            let Some((ei, ej)) = self.entering(tol) else { break };
            let path = self.path(ei, ej);
            // even positions (from the column end) lose flow
            let mut theta = f64::INFINITY;
            let mut leave = usize::MAX;
            for (pos, &id) in path.iter().enumerate() {
                if pos % 2 == 0 && self.flow[id] < theta {
                    theta = self.flow[id];
                    leave = id;
                }
            }
            for (pos, &id) in path.iter().enumerate() {
                if pos % 2 == 0 {
                    self.flow[id] -= theta;
                } else {
                    self.flow[id] += theta;
                }
            }
            let (li, lj) = self.cells[leave];
            let m = self.m;
            self.adj[li].retain(|&x| x != leave);
            self.adj[m + lj].retain(|&x| x != leave);
            self.cells[leave] = (ei, ej);
            self.flow[leave] = theta;
            self.adj[ei].push(leave);
            self.adj[m + ej].push(leave);
        }
    }

    /// Flows of the current basis under the given (unperturbed) masses.
    fn tree_flows(&self, supply: &[f64], demand: &[f64]) -> Vec<f64> {
        let (m, n) = (self.m, self.n);
        let mut residual: Vec<f64> = supply.iter().cloned().chain(demand.iter().cloned()).collect();
        let mut degree: Vec<usize> = self.adj.iter().map(Vec::len).collect();
        let mut used = vec![false; self.cells.len()];
        let mut flows = vec![0.0; self.cells.len()];
        let mut stack: Vec<usize> = (0..m + n).filter(|&v| degree[v] == 1).collect();
        while let Some(node) = stack.pop() {
            if degree[node] != 1 {
                continue;
            }
            let Some(&id) = self.adj[node].iter().find(|&&id| !used[id]) else { continue };
            used[id] = true;
            let (i, j) = self.cells[id];
            let other = if node < m { m + j } else { i };
            let f = residual[node];
            flows[id] = f;
            residual[other] -= f;
            degree[node] -= 1;
            degree[other] -= 1;
            if degree[other] == 1 {
                stack.push(other);
            }
        }
        flows
    }
}

/// The square-loss tensor product `T[i,j] = sum_{k,l} (C1[i,k] - C2[j,l])^2 P[k,l]`
/// in factored form, `O(n1^2 n2 + n1 n2^2)`.
pub fn gw_tensor(c1: &Array2<f64>, c2: &Array2<f64>, p: &Array2<f64>) -> Array2<f64> {
    let (n1, n2) = p.dim();
    assert_eq!(c1.dim(), (n1, n1), "C1 shape");
    assert_eq!(c2.dim(), (n2, n2), "C2 shape");
    let rows = p.sum_axis(ndarray::Axis(1));
    let cols = p.sum_axis(ndarray::Axis(0));
    let c1sq = c1.mapv(|x| x * x);
    let c2sq = c2.mapv(|x| x * x);
    let left = c1sq.dot(&rows);
    let right = c2sq.dot(&cols);
    let mut t = c1.dot(p).dot(&c2.t());
    Zip::indexed(&mut t).for_each(|(i, j), x| *x = left[i] + right[j] - 2.0 * *x);
    t
}

/// Coefficients of `phi(t) - phi(0) = a t^2 + b t` along `P + t (Q - P)`.
fn line_coefficients(
    c1: &Array2<f64>,
    c2: &Array2<f64>,
    feat: &Array2<f64>,
    p: &Array2<f64>,
    tp: &Array2<f64>,
    q: &Array2<f64>,
    alpha: f64,
) -> (f64, f64) {
    let dir = q - p;
    let td = gw_tensor(c1, c2, &dir);
    let quad = alpha * (&td * &dir).sum();
    let lin = (1.0 - alpha) * (feat * &dir).sum() + alpha * ((tp * &dir).sum() + (&td * p).sum());
    (quad, lin)
}

fn minimize_on_unit_interval(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        (-b / (2.0 * a)).clamp(0.0, 1.0)
    } else if a + b < 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Exact minimizer over `[0, 1]` of the FGW loss along the segment from `P` to `Q`.
pub fn fgw_line_search(g1: &Graph, g2: &Graph, p: &Array2<f64>, q: &Array2<f64>, alpha: f64) -> f64 {
    if p == q {
        return 0.0;
    }
    let feat = feature_cost(&g1.features, &g2.features);
    let tp = gw_tensor(&g1.structure, &g2.structure, p);
    let (a, b) = line_coefficients(&g1.structure, &g2.structure, &feat, p, &tp, q, alpha);
    minimize_on_unit_interval(a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub enum CgInit {
    Product,
    Plan(Array2<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgOptions {
    pub max_iters: usize,
    /// Stop once the relative loss decrease falls to this level.
    pub tol: f64,
    pub init: CgInit,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-9, init: CgInit::Product }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgStep {
    pub iteration: usize,
    pub loss: f64,
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct FgwSolution {
    pub plan: TransportPlan,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Loss after every accepted iterate, starting with the initial plan at iteration 0.
    pub trace: Vec<CgStep>,
}

/// Conditional-gradient FGW solver. Returns a stationary point, not a
/// certified global optimum.
pub fn solve_fgw(g1: &Graph, g2: &Graph, alpha: f64, opts: &CgOptions) -> Result<FgwSolution> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange { what: "alpha", value: alpha, lo: 0.0, hi: 1.0 });
    }
    if opts.max_iters == 0 || !(opts.tol > 0.0) {
        return Err(Error::InvalidConfig("CG needs max_iters >= 1 and tol > 0".into()));
    }
    let (n1, n2) = (g1.n(), g2.n());
    let a = g1.mass();
    let b = g2.mass();
    let mut p = match &opts.init {
        CgInit::Product => outer(&a, &b),
        CgInit::Plan(p0) => {
            if p0.dim() != (n1, n2) {
                return Err(Error::DimensionMismatch(format!("initial plan is {:?}", p0.dim())));
            }
            p0.clone()
        }
    };
    let feat = feature_cost(&g1.features, &g2.features);
    let (c1, c2) = (&g1.structure, &g2.structure);
    let mut tp = gw_tensor(c1, c2, &p);
    let mut loss = (1.0 - alpha) * (&feat * &p).sum() + alpha * (&tp * &p).sum();
    let mut trace = vec![CgStep { iteration: 0, loss, step: 0.0 }];
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iters {
        iterations = it;
        let grad = &feat * (1.0 - alpha) + &tp * (2.0 * alpha);
        let q = solve_linear_ot(&grad, &a, &b)?.plan;
        let (qa, qb) = line_coefficients(c1, c2, &feat, &p, &tp, &q, alpha);
        let t = minimize_on_unit_interval(qa, qb);
        if t == 0.0 {
            converged = true;
            break;
        }
        let next = &p + &((&q - &p) * t);
        let next_tp = gw_tensor(c1, c2, &next);
        let next_loss = (1.0 - alpha) * (&feat * &next).sum() + alpha * (&next_tp * &next).sum();
        if next_loss > loss {
            // rounding noise on an already stationary plan
            converged = true;
            break;
        }
        let decrease = loss - next_loss;
        p = next;
        tp = next_tp;
        loss = next_loss;
        trace.push(CgStep { iteration: it, loss, step: t });
        if decrease <= opts.tol * loss.abs() || loss <= f64::MIN_POSITIVE {
            converged = true;
            break;
        }
    }
    let plan = TransportPlan { plan: p, source: a, target: b };
    let loss = fgw_loss(g1, g2, &plan.plan, alpha)?;
    Ok(FgwSolution { plan, loss, iterations, converged, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(0.0..1.0))
    }

    pub(crate) fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Graph {
        let f = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
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

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn one_by_one() {
        let p = solve_linear_ot(&array![[3.0]], &array![1.0], &array![1.0]).unwrap();
        assert_eq!(p.plan, array![[1.0]]);
    }

    #[test]
    fn two_by_two_anti_diagonal_cost() {
        let m = array![[0.0, 1.0], [1.0, 0.0]];
        let u = crate::graph::uniform_mass(2);
        let p = solve_linear_ot(&m, &u, &u).unwrap();
        assert_eq!(p.plan, array![[0.5, 0.0], [0.0, 0.5]]);
        assert_eq!(p.cost(&m), 0.0);
    }

    #[test]
    fn matches_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [3usize, 4, 5] {
            let u = crate::graph::uniform_mass(n);
            for _ in 0..30 {
                let m = random_matrix(&mut rng, n, n);
                let best = permutations(n)
                    .iter()
                    .map(|s| s.iter().enumerate().map(|(i, &j)| m[[i, j]]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
                    / n as f64;
                let p = solve_linear_ot(&m, &u, &u).unwrap();
                assert!((p.cost(&m) - best).abs() <= 1e-12, "{} vs {best}", p.cost(&m));
                assert!(p.max_marginal_violation() <= 1e-15);
            }
        }
    }

    /// Brute-force LP check for rectangular problems: no improving cycle
    /// (all reduced costs nonnegative under some feasible dual) is verified via
    /// complementary slackness on the returned plan.
    #[test]
    fn rectangular_plans_are_feasible_and_dual_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, n) in [(3, 7), (7, 3), (10, 13), (40, 25)] {
            let a = crate::graph::uniform_mass(m);
            let b = crate::graph::uniform_mass(n);
            let c = random_matrix(&mut rng, m, n);
            let p = solve_linear_ot(&c, &a, &b).unwrap();
            assert!(p.max_marginal_violation() <= 1e-15);
            assert!(p.plan.iter().all(|x| *x >= 0.0));
            // shortest-path duals on the residual graph must exist (no negative cycle)
            assert!(no_negative_residual_cycle(&c, &p.plan), "{m}x{n}");
        }
    }

    /// Bellman-Ford over the residual bipartite graph of a plan.
    fn no_negative_residual_cycle(c: &Array2<f64>, p: &Array2<f64>) -> bool {
        let (m, n) = c.dim();
        let mut edges = Vec::new();
        for i in 0..m {
            for j in 0..n {
                edges.push((i, m + j, c[[i, j]]));
                if p[[i, j]] > 1e-15 {
                    edges.push((m + j, i, -c[[i, j]]));
                }
            }
        }
        let mut dist = vec![0.0; m + n];
        for _ in 0..(m + n) {
            let mut changed = false;
            for &(u, v, w) in &edges {
                if dist[u] + w < dist[v] - 1e-12 {
                    dist[v] = dist[u] + w;
                    changed = true;
                }
            }
            if !changed {
                return true;
            }
        }
        false
    }

    #[test]
    fn general_marginals() {
        let c = array![[1.0, 2.0, 3.0], [3.0, 1.0, 2.0]];
        let a = array![0.7, 0.3];
        let b = array![0.2, 0.5, 0.3];
        let p = solve_linear_ot(&c, &a, &b).unwrap();
        assert!(p.max_marginal_violation() <= 1e-12);
        assert!(no_negative_residual_cycle(&c, &p.plan));
    }

    #[test]
    fn mass_mismatch_is_infeasible() {
        let err = solve_linear_ot(&array![[0.0, 1.0]], &array![1.0], &array![0.5, 0.4]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleMarginals { .. }));
    }

    fn gw_quartic(c1: &Array2<f64>, c2: &Array2<f64>, p: &Array2<f64>) -> f64 {
        let (n1, n2) = p.dim();
        let mut s = 0.0;
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n1 {
                    for l in 0..n2 {
                        s += (c1[[i, k]] - c2[[j, l]]).powi(2) * p[[i, j]] * p[[k, l]];
                    }
                }
            }
        }
        s
    }

    #[test]
    fn gw_tensor_matches_quadruple_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g1 = random_graph(&mut rng, 6, 1);
            let g2 = random_graph(&mut rng, 6, 1);
            let p = random_matrix(&mut rng, 6, 6);
            let fast = (&gw_tensor(&g1.structure, &g2.structure, &p) * &p).sum();
            let slow = gw_quartic(&g1.structure, &g2.structure, &p);
            assert!(((fast - slow) / slow).abs() <= 1e-12);
        }
    }

    #[test]
    fn gw_tensor_small_cases() {
        let c = array![[0.0, 1.0], [1.0, 0.0]];
        let id = array![[0.5, 0.0], [0.0, 0.5]];
        assert_eq!((&gw_tensor(&c, &c, &id) * &id).sum(), 0.0);
        let c2 = array![[0.0, 2.0], [2.0, 0.0]];
        let u = Array2::from_elem((2, 2), 0.25);
        let fast = (&gw_tensor(&c, &c2, &u) * &u).sum();
        // pairs (C1_ik, C2_jl) over the 16 index tuples, each weighted 1/16
        let expected = gw_quartic(&c, &c2, &u);
        assert!((fast - expected).abs() < 1e-15);
        assert!((expected - 1.5).abs() < 1e-15);
    }

    #[test]
    fn line_search_beats_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..25 {
            let g1 = random_graph(&mut rng, 5, 2);
            let g2 = random_graph(&mut rng, 6, 2);
            let alpha = rng.random_range(0.0..1.0);
            let p = outer(&g1.mass(), &g2.mass());
            let q = solve_linear_ot(&random_matrix(&mut rng, 5, 6), &g1.mass(), &g2.mass()).unwrap().plan;
            let t = fgw_line_search(&g1, &g2, &p, &q, alpha);
            let phi = |t: f64| fgw_loss(&g1, &g2, &(&p + &((&q - &p) * t)), alpha).unwrap();
            let best_grid = (0..=1000).map(|k| phi(k as f64 / 1000.0)).fold(f64::INFINITY, f64::min);
            assert!(phi(t) <= best_grid + 1e-9);
        }
    }

    #[test]
    fn line_search_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g1 = random_graph(&mut rng, 4, 2);
        let g2 = random_graph(&mut rng, 4, 2);
        let p = outer(&g1.mass(), &g2.mass());
        assert_eq!(fgw_line_search(&g1, &g2, &p, &p, 0.5), 0.0);
        let q = solve_linear_ot(&feature_cost(&g1.features, &g2.features), &g1.mass(), &g2.mass()).unwrap().plan;
        let t = fgw_line_search(&g1, &g2, &p, &q, 0.0);
        assert!(t == 0.0 || t == 1.0);
        assert_eq!(t, 1.0);
    }

    #[test]
    fn self_distance_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in [5, 12, 20] {
            let g = random_graph(&mut rng, n, 3);
            for alpha in [0.0, 0.5, 1.0] {
                let sol = solve_fgw(&g, &g, alpha, &CgOptions::default()).unwrap();
                assert!(sol.loss <= 1e-8, "n={n} alpha={alpha} loss={}", sol.loss);
                assert!(sol.plan.max_marginal_violation() <= 1e-9);
            }
        }
    }

    #[test]
    fn alpha_zero_reduces_to_linear_ot() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g1 = random_graph(&mut rng, 7, 2);
        let g2 = random_graph(&mut rng, 9, 2);
        let sol = solve_fgw(&g1, &g2, 0.0, &CgOptions::default()).unwrap();
        let m = feature_cost(&g1.features, &g2.features);
        let lin = solve_linear_ot(&m, &g1.mass(), &g2.mass()).unwrap();
        assert!((sol.loss - lin.cost(&m)).abs() <= 1e-10);
    }

    #[test]
    fn loss_trace_is_monotone_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let g1 = random_graph(&mut rng, 10, 2);
            let g2 = random_graph(&mut rng, 12, 2);
            let sol = solve_fgw(&g1, &g2, 0.6, &CgOptions::default()).unwrap();
            for w in sol.trace.windows(2) {
                assert!(w[1].loss <= w[0].loss);
            }
            let direct = fgw_loss(&g1, &g2, &sol.plan.plan, 0.6).unwrap();
            assert!((direct - sol.loss).abs() <= 1e-12);
            assert!(sol.plan.max_marginal_violation() <= 1e-9);
        }
    }

    #[test]
    fn permuted_copy_has_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = random_graph(&mut rng, 15, 2);
        let mut perm: Vec<usize> = (0..15).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let h = g.permuted(&perm);
        let sol = solve_fgw(&g, &h, 0.5, &CgOptions::default()).unwrap();
        assert!(sol.loss <= 1e-8, "{}", sol.loss);
    }
}
