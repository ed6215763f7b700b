//! Discrete optimal transport: an exact transportation-simplex solver for
//! small problems and log-domain Sinkhorn for the entropic relaxation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// A coupling between two discrete marginals and its transport cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// `⟨plan, cost⟩`.
    pub cost: f64,
    /// L1 distance between the plan's marginals and the requested ones.
    pub marginal_error: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Problems with at most this many cells are solved exactly.
pub const EXACT_LP_MAX_CELLS: usize = 64;

fn validate(cost: ArrayView2<f64>, mu: ArrayView1<f64>, nu: ArrayView1<f64>, strict: bool) -> Result<()> {
    let (p, q) = cost.dim();
    if p == 0 || q == 0 || mu.len() != p || nu.len() != q {
        return Err(Error::ShapeMismatch {
            context: "transport problem",
            expected: format!("{}x{}", mu.len(), nu.len()),
            got: format!("{p}x{q}"),
        });
    }
    if cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidParameter("cost entries must be finite and non-negative".into()));
    }
    for (name, m) in [("source", mu), ("target", nu)] {
        let bad = if strict { m.iter().any(|&v| !(v > 0.0) || !v.is_finite()) } else { m.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) };
        if bad {
            return Err(Error::InvalidMarginal(format!("{name} marginal has non-positive or non-finite entries")));
        }
        let s = m.sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMarginal(format!("{name} marginal sums to {s}")));
        }
    }
    Ok(())
}

fn marginal_error(plan: &Array2<f64>, mu: ArrayView1<f64>, nu: ArrayView1<f64>) -> f64 {
    let rows = plan.sum_axis(ndarray::Axis(1));
    let cols = plan.sum_axis(ndarray::Axis(0));
    rows.iter().zip(mu).map(|(a, b)| (a - b).abs()).sum::<f64>() + cols.iter().zip(nu).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn inner(plan: &Array2<f64>, cost: ArrayView2<f64>) -> f64 {
    plan.iter().zip(cost.iter()).map(|(p, c)| p * c).sum()
}

/// Exact minimum-cost transport by the transportation simplex (MODI
/// potentials, Bland's rule for entering and leaving cells).
pub fn exact_transport(cost: ArrayView2<f64>, mu: ArrayView1<f64>, nu: ArrayView1<f64>) -> Result<TransportPlan> {
    validate(cost, mu, nu, false)?;
    let (p, q) = cost.dim();
    let mut flow = Array2::<f64>::zeros((p, q));
    let mut basic = Array2::<bool>::from_elem((p, q), false);

    // North-west corner start: p + q - 1 basic cells forming a spanning tree.
    let (mut supply, mut demand) = (mu.to_vec(), nu.to_vec());
    let (mut i, mut j) = (0, 0);
    loop {
        let x = supply[i].min(demand[j]);
        flow[[i, j]] = x;
        basic[[i, j]] = true;
        supply[i] -= x;
        demand[j] -= x;
        if i == p - 1 && j == q - 1 {
            break;
        }
        if i == p - 1 {
            j += 1;
        } else if j == q - 1 || supply[i] <= demand[j] {
            i += 1;
        } else {
            j += 1;
        }
    }

    let scale = cost.iter().fold(1.0f64, |m, &c| m.max(c));
    let eps = 1e-12 * scale;
    let max_pivots = 50 * (p * q).pow(2) + 100;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_pivots {
        let (u, v) = potentials(&basic, cost);
        let entering = (0..p)
            .flat_map(|i| (0..q).map(move |j| (i, j)))
            .find(|&(i, j)| !basic[[i, j]] && cost[[i, j]] - u[i] - v[j] < -eps);
        let Some((ei, ej)) = entering else {
            converged = true;
            break;
        };
        iterations += 1;
        // Tree path from column ej back to row ei; the cycle alternates -,+,-,...
        let path = tree_path(&basic, ej, ei);
        let minus: Vec<(usize, usize)> = path.iter().step_by(2).copied().collect();
        let plus: Vec<(usize, usize)> = path.iter().skip(1).step_by(2).copied().collect();
        let theta = minus.iter().map(|&c| flow[c]).fold(f64::INFINITY, f64::min);
        let leaving = *minus
            .iter()
            .filter(|&&c| flow[c] == theta)
            .min_by_key(|&&(i, j)| i * q + j)
            .expect("cycle has a minus cell");
        for &c in &minus {
            flow[c] = (flow[c] - theta).max(0.0);
        }
        for &c in &plus {
            flow[c] += theta;
        }
        flow[[ei, ej]] = theta;
        flow[leaving] = 0.0;
        basic[leaving] = false;
        basic[[ei, ej]] = true;
    }
    let err = marginal_error(&flow, mu, nu);
    Ok(TransportPlan {
        cost: inner(&flow, cost),
        plan: flow,
        marginal_error: err,
        converged,
        iterations,
    })
}

/// Dual potentials with `u_0 = 0` and `u_i + v_j = c_ij` on basic cells.
fn potentials(basic: &Array2<bool>, cost: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let (p, q) = basic.dim();
    let mut u = vec![f64::NAN; p];
    let mut v = vec![f64::NAN; q];
    u[0] = 0.0;
    // nodes: rows 0..p, columns p..p+q
    let mut stack = vec![0usize];
    while let Some(node) = stack.pop() {
        if node < p {
            for j in 0..q {
                if basic[[node, j]] && v[j].is_nan() {
                    v[j] = cost[[node, j]] - u[node];
                    stack.push(p + j);
                }
            }
        } else {
            let j = node - p;
            for i in 0..p {
                if basic[[i, j]] && u[i].is_nan() {
                    u[i] = cost[[i, j]] - v[j];
                    stack.push(i);
                }
            }
        }
    }
    (u, v)
}

/// Basic cells on the unique tree path from column `col` to row `row`.
fn tree_path(basic: &Array2<bool>, col: usize, row: usize) -> Vec<(usize, usize)> {
    let (p, q) = basic.dim();
    let start = p + col;
    let mut parent = vec![usize::MAX; p + q];
    parent[start] = start;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == row {
            break;
        }
        let neighbours: Vec<usize> = if node < p {
            (0..q).filter(|&j| basic[[node, j]]).map(|j| p + j).collect()
        } else {
            (0..p).filter(|&i| basic[[i, node - p]]).collect()
        };
        for nb in neighbours {
            if parent[nb] == usize::MAX {
                parent[nb] = node;
                queue.push_back(nb);
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = row;
    let mut trail = vec![node];
    while node != start {
        node = parent[node];
        trail.push(node);
    }
    trail.reverse(); // start(col) ... row
    for w in trail.windows(2) {
        let (a, b) = (w[0], w[1]);
        let cell = if a < p { (a, b - p) } else { (b, a - p) };
        cells.push(cell);
    }
    cells
}

fn log_sum_exp(vals: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = vals.collect();
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

struct SinkhornState {
    f: Array1<f64>,
    g: Array1<f64>,
}

fn sinkhorn_run(
    cost: ArrayView2<f64>,
    mu: ArrayView1<f64>,
    nu: ArrayView1<f64>,
    eps: f64,
    max_iter: usize,
    tol: f64,
    state: &mut SinkhornState,
) -> (Array2<f64>, f64, bool, usize) {
    let (p, q) = cost.dim();
    let log_mu: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|m| m.ln()).collect();
    let plan_of = |f: &Array1<f64>, g: &Array1<f64>| Array2::from_shape_fn((p, q), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / eps).exp());
    let mut it = 0;
    let mut err = f64::INFINITY;
    while it < max_iter {
        it += 1;
        for j in 0..q {
            let lse = log_sum_exp((0..p).map(|i| (state.f[i] - cost[[i, j]]) / eps));
            state.g[j] = eps * (log_nu[j] - lse);
        }
        for i in 0..p {
            let lse = log_sum_exp((0..q).map(|j| (state.g[j] - cost[[i, j]]) / eps));
            state.f[i] = eps * (log_mu[i] - lse);
        }
        // rows are exact after the f update; only columns can be off
        let plan = plan_of(&state.f, &state.g);
        err = marginal_error(&plan, mu, nu);
        if err <= tol {
            return (plan, err, true, it);
        }
    }
    (plan_of(&state.f, &state.g), err, false, it)
}

/// Log-domain Sinkhorn for `min ⟨γ, C⟩ − ε H(γ)` with marginals `mu`, `nu`.
///
/// Returns the plan even when `max_iter` is reached; check `converged`.
pub fn sinkhorn(cost: ArrayView2<f64>, mu: ArrayView1<f64>, nu: ArrayView1<f64>, eps: f64, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    validate(cost, mu, nu, true)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("sinkhorn eps must be positive, got {eps}")));
    }
    let (p, q) = cost.dim();
    let mut state = SinkhornState { f: Array1::zeros(p), g: Array1::zeros(q) };
    let (plan, err, converged, iterations) = sinkhorn_run(cost, mu, nu, eps, max_iter, tol, &mut state);
    if !converged {
        log::warn!("sinkhorn did not converge in {iterations} iterations (marginal error {err:.3e})");
    }
    Ok(TransportPlan { cost: inner(&plan, cost), plan, marginal_error: err, converged, iterations })
}

/// Sinkhorn with geometric ε-annealing (warm-started potentials) followed by
/// rounding onto the exact transport polytope.
pub fn sinkhorn_scaled(cost: ArrayView2<f64>, mu: ArrayView1<f64>, nu: ArrayView1<f64>, eps: f64, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    validate(cost, mu, nu, true)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("sinkhorn eps must be positive, got {eps}")));
    }
    let (p, q) = cost.dim();
    let mut state = SinkhornState { f: Array1::zeros(p), g: Array1::zeros(q) };
    let mut stage_eps = cost.iter().fold(eps, |m, &c| m.max(c));
    let mut total = 0;
    loop {
        stage_eps = (stage_eps * 0.5).max(eps);
        let (plan, _, converged, it) = sinkhorn_run(cost, mu, nu, stage_eps, max_iter, tol, &mut state);
        total += it;
        if stage_eps <= eps {
            let plan = round_to_feasible(plan, mu, nu);
            let err = marginal_error(&plan, mu, nu);
            return Ok(TransportPlan { cost: inner(&plan, cost), plan, marginal_error: err, converged, iterations: total });
        }
    }
}

/// Project an approximate coupling onto `Π(mu, nu)` by row/column capping
/// and a rank-one correction.
pub fn round_to_feasible(mut plan: Array2<f64>, mu: ArrayView1<f64>, nu: ArrayView1<f64>) -> Array2<f64> {
    for (mut row, &m) in plan.outer_iter_mut().zip(mu) {
        let s = row.sum();
        if s > m {
            row.mapv_inplace(|v| v * m / s);
        }
    }
    for (mut col, &n) in plan.axis_iter_mut(ndarray::Axis(1)).zip(nu) {
        let s = col.sum();
        if s > n {
            col.mapv_inplace(|v| v * n / s);
        }
    }
    let err_r: Vec<f64> = plan.outer_iter().zip(mu).map(|(r, &m)| m - r.sum()).collect();
    let err_c: Vec<f64> = plan.axis_iter(ndarray::Axis(1)).zip(nu).map(|(c, &n)| n - c.sum()).collect();
    let mass: f64 = err_r.iter().sum();
    if mass > 0.0 {
        for ((i, j), v) in plan.indexed_iter_mut() {
            *v += err_r[i] * err_c[j] / mass;
        }
    }
    plan
}

/// Exact LP when the problem has at most [`EXACT_LP_MAX_CELLS`] cells, Sinkhorn otherwise.
pub fn transport(cost: ArrayView2<f64>, mu: ArrayView1<f64>, nu: ArrayView1<f64>, eps: f64) -> Result<TransportPlan> {
    if cost.len() <= EXACT_LP_MAX_CELLS {
        exact_transport(cost, mu, nu)
    } else {
        sinkhorn(cost, mu, nu, eps, 10_000, 1e-9)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn diagonal_optimum() {
        let p = 4;
        let cost = Array2::from_shape_fn((p, p), |(i, j)| if i == j { 0.0 } else { 10.0 });
        let u = Array1::from_elem(p, 0.25);
        let t = sinkhorn(cost.view(), u.view(), u.view(), 1e-3, 10_000, 1e-9).unwrap();
        assert!(t.converged);
        assert!(t.cost <= 1e-6);
        for i in 0..p {
            assert!((t.plan[[i, i]] - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn matching_optimum_small_eps() {
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        let u = array![0.5, 0.5];
        let t = sinkhorn(cost.view(), u.view(), u.view(), 1e-4, 10_000, 1e-9).unwrap();
        assert!(t.cost <= 1e-3);
        assert!(t.marginal_error <= 1e-9);
    }

    #[test]
    fn invalid_marginals() {
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        let bad = array![0.7, 0.7];
        let ok = array![0.5, 0.5];
        assert!(matches!(sinkhorn(cost.view(), bad.view(), ok.view(), 0.1, 10, 1e-9), Err(Error::InvalidMarginal(_))));
        let zero = array![1.0, 0.0];
        assert!(matches!(sinkhorn(cost.view(), zero.view(), ok.view(), 0.1, 10, 1e-9), Err(Error::InvalidMarginal(_))));
        assert!(sinkhorn(cost.view(), ok.view(), ok.view(), 0.0, 10, 1e-9).is_err());
    }

    #[test]
    fn non_convergence_is_reported() {
        let cost = array![[0.0, 1.0, 2.0], [1.0, 0.0, 3.0]];
        let mu = array![0.3, 0.7];
        let nu = array![0.2, 0.3, 0.5];
        let t = sinkhorn(cost.view(), mu.view(), nu.view(), 1e-3, 1, 1e-15).unwrap();
        assert!(!t.converged);
        assert_eq!(t.iterations, 1);
        assert!(t.plan.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn exact_lp_hand_case() {
        // optimal: move 0.5 along the cheap diagonal, 0.2 from row 0 to col 1
        let cost = array![[0.0, 1.0], [5.0, 0.0]];
        let mu = array![0.7, 0.3];
        let nu = array![0.5, 0.5];
        let t = exact_transport(cost.view(), mu.view(), nu.view()).unwrap();
        assert!(t.converged);
        assert!((t.cost - 0.2).abs() < 1e-12);
        assert!(t.marginal_error < 1e-12);
    }

    #[test]
    fn exact_lp_rectangular_and_degenerate() {
        let cost = array![[3.0, 1.0, 2.0], [1.0, 4.0, 0.5], [2.0, 2.0, 2.0], [0.0, 9.0, 1.0]];
        let mu = array![0.25, 0.25, 0.25, 0.25];
        let nu = array![0.25, 0.25, 0.5];
        let t = exact_transport(cost.view(), mu.view(), nu.view()).unwrap();
        assert!(t.converged);
        assert!(t.marginal_error < 1e-12);
        assert!(t.plan.iter().all(|&v| v >= 0.0));
        // row 3 -> col 0 (0), row 0 -> col 1 (1), rows 1,2 -> col 2 (0.5, 2)
        assert!((t.cost - 0.25 * (0.0 + 1.0 + 0.5 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn rounding_is_feasible() {
        let plan = array![[0.3, 0.3], [0.1, 0.1]];
        let mu = array![0.5, 0.5];
        let nu = array![0.6, 0.4];
        let r = round_to_feasible(plan, mu.view(), nu.view());
        assert!(marginal_error(&r, mu.view(), nu.view()) < 1e-12);
        assert!(r.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn scaled_sinkhorn_close_to_exact() {
        let cost = Array2::from_shape_fn((9, 9), |(i, j)| ((i as f64) - (j as f64 * 0.7)).powi(2));
        let mu = Array1::from_elem(9, 1.0 / 9.0);
        let nu = Array1::from_shape_fn(9, |j| (j + 1) as f64 / 45.0);
        let exact = exact_transport(cost.view(), mu.view(), nu.view()).unwrap();
        let approx = sinkhorn_scaled(cost.view(), mu.view(), nu.view(), 1e-3, 10_000, 1e-9).unwrap();
        assert!(approx.marginal_error < 1e-9);
        assert!((approx.cost - exact.cost).abs() < 1e-3 * (81f64).ln() + 1e-6, "{} vs {}", approx.cost, exact.cost);
    }
}
