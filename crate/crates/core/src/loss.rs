//! FGW and FUGW loss kernels with analytic gradients.

use ndarray::{Array1, Array2, Axis};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::exact_ot::gw_tensor;
use crate::graph::{uniform_mass, Graph};

/// Trade-off `alpha` between feature and structure terms, and marginal penalty `rho`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub alpha: f64,
    pub rho: f64,
}

impl LossParams {
    pub fn new(alpha: f64, rho: f64) -> Result<Self> {
        let p = Self { alpha, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::OutOfRange { what: "rho", value: self.rho, lo: 0.0, hi: f64::INFINITY });
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange { what: "alpha", value: alpha, lo: 0.0, hi: 1.0 });
    }
    Ok(())
}

fn check_shapes(g1: &Graph, g2: &Graph, p: &Array2<f64>) -> Result<()> {
    if p.dim() != (g1.n(), g2.n()) {
        return Err(Error::ShapeMismatch { op: "plan", lhs: p.dim(), rhs: (g1.n(), g2.n()) });
    }
    if g1.d() != g2.d() {
        return Err(Error::ShapeMismatch { op: "features", lhs: g1.features.dim(), rhs: g2.features.dim() });
    }
    Ok(())
}

/// Pairwise squared Euclidean distances between the rows of `f1` and `f2`.
pub fn feature_cost(f1: &Array2<f64>, f2: &Array2<f64>) -> Array2<f64> {
    assert_eq!(f1.ncols(), f2.ncols(), "feature dimensions differ");
    Array2::from_shape_fn((f1.nrows(), f2.nrows()), |(i, j)| {
        f1.row(i).iter().zip(f2.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    })
}

/// Feature term and structure term of the FGW loss, unweighted.
pub fn fgw_terms(g1: &Graph, g2: &Graph, p: &Array2<f64>) -> Result<(f64, f64)> {
    check_shapes(g1, g2, p)?;
    let w = (&feature_cost(&g1.features, &g2.features) * p).sum();
    let gw = (&gw_tensor(&g1.structure, &g2.structure, p) * p).sum();
    Ok((w, gw))
}

/// `(1 - alpha) * sum D_F P + alpha * sum (C1_ik - C2_jl)^2 P_ij P_kl`. Works for
/// any nonnegative `P`, feasible or not.
pub fn fgw_loss(g1: &Graph, g2: &Graph, p: &Array2<f64>, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let (w, gw) = fgw_terms(g1, g2, p)?;
    Ok((1.0 - alpha) * w + alpha * gw)
}

/// Direct four-index FGW loss, for checking the factored form on small inputs.
pub fn fgw_loss_quartic_oracle(g1: &Graph, g2: &Graph, p: &Array2<f64>, alpha: f64) -> Result<f64> {
    const LIMIT: usize = 16;
    for n in [g1.n(), g2.n()] {
        if n > LIMIT {
            return Err(Error::SizeGuardExceeded { what: "quartic oracle nodes", got: n, limit: LIMIT });
        }
    }
    check_alpha(alpha)?;
    check_shapes(g1, g2, p)?;
    let (n1, n2) = p.dim();
    let (c1, c2) = (&g1.structure, &g2.structure);
    let mut w = 0.0;
    let mut gw = 0.0;
    for i in 0..n1 {
        for j in 0..n2 {
            let d: f64 = g1.features.row(i).iter().zip(g2.features.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            w += d * p[[i, j]];
            for k in 0..n1 {
                for l in 0..n2 {
                    gw += (c1[[i, k]] - c2[[j, l]]).powi(2) * p[[i, j]] * p[[k, l]];
                }
            }
        }
    }
    Ok((1.0 - alpha) * w + alpha * gw)
}

fn check_reference(mu: &Array1<f64>, nu: &Array1<f64>) -> Result<()> {
    if mu.len() != nu.len() {
        return Err(Error::DimensionMismatch(format!("measures of length {} and {}", mu.len(), nu.len())));
    }
    for (i, (&m, &n)) in mu.iter().zip(nu).enumerate() {
        if m < 0.0 || n < 0.0 {
            return Err(Error::DegenerateInput(format!("negative measure entry at index {i}")));
        }
        if n == 0.0 && m > 0.0 {
            return Err(Error::ZeroReference { index: i });
        }
    }
    Ok(())
}

fn entropy_sum(mu: &Array1<f64>, nu: &Array1<f64>) -> f64 {
    mu.iter().zip(nu).filter(|(m, _)| **m > 0.0).map(|(m, n)| m * (m / n).ln()).sum()
}

/// Generalized KL divergence `sum x log(x/y) - m(x) + m(y)`.
pub fn kl_generalized(mu: &Array1<f64>, nu: &Array1<f64>) -> Result<f64> {
    check_reference(mu, nu)?;
    Ok(entropy_sum(mu, nu) - mu.sum() + nu.sum())
}

/// Generalized KL between the product measures `mu x mu` and `nu x nu`, in closed form.
pub fn product_kl(mu: &Array1<f64>, nu: &Array1<f64>) -> Result<f64> {
    let kl = kl_generalized(mu, nu)?;
    let (mm, mn) = (mu.sum(), nu.sum());
    Ok(2.0 * mm * kl + (mm - mn).powi(2))
}

/// FGW loss plus `rho` times the product-KL penalties of both plan marginals
/// against uniform node masses.
pub fn fugw_loss(g1: &Graph, g2: &Graph, p: &Array2<f64>, params: LossParams) -> Result<f64> {
    params.validate()?;
    let base = fgw_loss(g1, g2, p, params.alpha)?;
    if params.rho == 0.0 {
        return Ok(base);
    }
    Ok(base + params.rho * marginal_penalty(p)?)
}

/// `product_kl(P 1, 1/n1) + product_kl(P^T 1, 1/n2)`.
pub fn marginal_penalty(p: &Array2<f64>) -> Result<f64> {
    let (n1, n2) = p.dim();
    let rows = p.sum_axis(Axis(1));
    let cols = p.sum_axis(Axis(0));
    Ok(product_kl(&rows, &uniform_mass(n1))? + product_kl(&cols, &uniform_mass(n2))?)
}

/// Derivative of `product_kl(r, a)` with respect to each `r_i`.
fn product_kl_grad(r: &Array1<f64>, a: &Array1<f64>, which: &'static str) -> Result<Array1<f64>> {
    check_reference(r, a)?;
    let m = r.sum();
    if let Some(index) = r.iter().position(|x| *x <= 0.0) {
        return Err(Error::NonDifferentiablePoint { which, index });
    }
    let s = entropy_sum(r, a);
    Ok(Array1::from_shape_fn(r.len(), |i| 2.0 * s + 2.0 * m * (r[i] / a[i]).ln()))
}

/// Analytic gradient of [`fugw_loss`] with respect to the plan.
pub fn grad_plan(g1: &Graph, g2: &Graph, p: &Array2<f64>, params: LossParams) -> Result<Array2<f64>> {
    params.validate()?;
    check_shapes(g1, g2, p)?;
    let alpha = params.alpha;
    let mut g = feature_cost(&g1.features, &g2.features) * (1.0 - alpha);
    if alpha != 0.0 {
        g = g + gw_tensor(&g1.structure, &g2.structure, p) * (2.0 * alpha);
    }
    if params.rho != 0.0 {
        let (n1, n2) = p.dim();
        let gr = product_kl_grad(&p.sum_axis(Axis(1)), &uniform_mass(n1), "row")?;
        let gc = product_kl_grad(&p.sum_axis(Axis(0)), &uniform_mass(n2), "column")?;
        for ((i, j), x) in g.indexed_iter_mut() {
            *x += params.rho * (gr[i] + gc[j]);
        }
    }
    Ok(g)
}

/// Gradient of the feature term with respect to the target features `f2`.
pub fn grad_features(g1: &Graph, f2: &Array2<f64>, p: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    check_alpha(alpha)?;
    if p.nrows() != g1.n() || p.ncols() != f2.nrows() || f2.ncols() != g1.d() {
        return Err(Error::ShapeMismatch { op: "grad_features", lhs: p.dim(), rhs: f2.dim() });
    }
    let cols = p.sum_axis(Axis(0));
    let pulled = p.t().dot(&g1.features);
    let mut g = f2.clone();
    for (j, mut row) in g.rows_mut().into_iter().enumerate() {
        for (f, x) in row.iter_mut().enumerate() {
            *x = 2.0 * (1.0 - alpha) * (*x * cols[j] - pulled[[j, f]]);
        }
    }
    Ok(g)
}

/// FGW loss of a plan held on a tape, differentiable in the features and the
/// plan. Structures are constants. The feature term is expanded as
/// `sum |f1_i|^2 r_i + sum |f2_j|^2 c_j - 2 <f1, P f2>` so that the full cost
/// matrix is never formed.
pub fn fgw_loss_var<'t>(
    f1: Var<'t>,
    c1: &Array2<f64>,
    f2: Var<'t>,
    c2: &Array2<f64>,
    p: Var<'t>,
    alpha: f64,
) -> Result<Var<'t>> {
    check_alpha(alpha)?;
    let (n1, n2) = p.shape();
    if f1.shape().0 != n1 || f2.shape().0 != n2 || c1.dim() != (n1, n1) || c2.dim() != (n2, n2) {
        return Err(Error::ShapeMismatch { op: "fgw_loss_var", lhs: p.shape(), rhs: (f1.shape().0, f2.shape().0) });
    }
    let tape = p.tape();
    let rows = p.row_sums();
    let cols = p.col_sums();
    let mut loss = tape.scalar(0.0);
    if alpha < 1.0 {
        let sq1 = f1.square().row_sums().mul(rows)?.sum();
        let sq2 = f2.square().row_sums().t().mul(cols)?.sum();
        let cross = f1.mul(p.matmul(f2)?)?.sum().scale(2.0);
        loss = sq1.add(sq2)?.sub(cross)?.scale(1.0 - alpha);
    }
    if alpha > 0.0 {
        let c1v = tape.constant(c1.clone());
        let c2v = tape.constant(c2.clone());
        let left = tape.constant(c1.mapv(|x| x * x)).matmul(rows)?.mul(rows)?.sum();
        let right = cols.matmul(tape.constant(c2.mapv(|x| x * x)))?.mul(cols)?.sum();
        let cross = c1v.matmul(p)?.matmul(c2v)?.mul(p)?.sum().scale(2.0);
        let gw = left.add(right)?.sub(cross)?.scale(alpha);
        loss = loss.add(gw)?;
    }
    Ok(loss)
}

/// Product-KL penalty of an `n x 1` marginal against uniform mass, on a tape.
fn product_kl_var(r: Var<'_>) -> Result<Var<'_>> {
    let n = r.shape().0;
    let log_a = -(n as f64).ln();
    let m = r.sum();
    let s = r.mul(r.log().add_scalar(-log_a))?.sum();
    let kl = s.sub(m)?.add_scalar(1.0);
    Ok(m.mul(kl)?.scale(2.0).add(m.add_scalar(-1.0).square())?)
}

/// [`fugw_loss`] on a tape.
pub fn fugw_loss_var<'t>(
    f1: Var<'t>,
    c1: &Array2<f64>,
    f2: Var<'t>,
    c2: &Array2<f64>,
    p: Var<'t>,
    params: LossParams,
) -> Result<Var<'t>> {
    params.validate()?;
    let base = fgw_loss_var(f1, c1, f2, c2, p, params.alpha)?;
    if params.rho == 0.0 {
        return Ok(base);
    }
    let pen = product_kl_var(p.row_sums())?.add(product_kl_var(p.col_sums().t())?)?;
    base.add(pen.scale(params.rho))
}
