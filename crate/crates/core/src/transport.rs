//! Entropic optimal transport (Sinkhorn), the transport loss, its fixed-plan
//! gradient with respect to the centroids, and an exact transportation-simplex
//! solver for small instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, MassDistribution, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    /// Entropic regularisation strength, in cost units.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop once both marginal residuals (sup norm) are below this.
    pub marginal_tol: f64,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iterations: 2000,
            marginal_tol: 1e-6,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig("sinkhorn epsilon must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "sinkhorn max_iterations must be >= 1".into(),
            ));
        }
        if !(self.marginal_tol > 0.0) {
            return Err(Error::InvalidConfig(
                "sinkhorn marginal_tol must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A coupling between `row_marginal` and `col_marginal`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub entries: Matrix,
    pub row_marginal: MassDistribution,
    pub col_marginal: MassDistribution,
    pub converged: bool,
    pub iterations_used: usize,
}

impl TransportPlan {
    /// Sup-norm deviations of the row and column sums from the marginals.
    pub fn marginal_residuals(&self) -> (f64, f64) {
        let sup = |sums: Vec<f64>, target: &[f64]| {
            sums.iter()
                .zip(target)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        (
            sup(self.entries.row_sums(), self.row_marginal.weights()),
            sup(self.entries.col_sums(), self.col_marginal.weights()),
        )
    }
}

fn check_cost(cost: &Matrix) -> Result<()> {
    for i in 0..cost.rows() {
        for (j, &v) in cost.row(i).iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NonFiniteCost { row: i, col: j });
            }
        }
    }
    Ok(())
}

fn check_shapes(cost: &Matrix, r: &MassDistribution, c: &MassDistribution) -> Result<()> {
    if cost.rows() != r.len() || cost.cols() != c.len() {
        return Err(Error::ShapeMismatch(format!(
            "cost is {}x{}, marginals have lengths {} and {}",
            cost.rows(),
            cost.cols(),
            r.len(),
            c.len()
        )));
    }
    Ok(())
}

#[inline]
fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT plan between `r` and `c` under `cost`.
///
/// Rows and columns with zero mass are removed before solving and come back
/// as zero rows/columns. Costs are shifted by their minimum internally, so the
/// plan does not change when a constant is added to every entry. Running out
/// of iterations is not an error: the current plan is returned with
/// `converged == false`.
pub fn sinkhorn(
    cost: &Matrix,
    r: &MassDistribution,
    c: &MassDistribution,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    check_shapes(cost, r, c)?;
    check_cost(cost)?;

    let rows: Vec<usize> = (0..r.len()).filter(|&i| r[i] > 0.0).collect();
    let cols: Vec<usize> = (0..c.len()).filter(|&j| c[j] > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::DegenerateMarginal("row marginal has zero total mass"));
    }
    if cols.is_empty() {
        return Err(Error::DegenerateMarginal(
            "column marginal has zero total mass",
        ));
    }
    let (n, k) = (rows.len(), cols.len());
    let rw: Vec<f64> = rows.iter().map(|&i| r[i]).collect();
    let cw: Vec<f64> = cols.iter().map(|&j| c[j]).collect();

    let mut min_cost = f64::INFINITY;
    for &i in &rows {
        for &j in &cols {
            min_cost = min_cost.min(cost.get(i, j));
        }
    }
    let mut sub = Matrix::zeros(n, k);
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            sub.set(a, b, cost.get(i, j) - min_cost);
        }
    }

    let (sub_plan, converged, iterations_used) = if cfg.log_domain {
        sinkhorn_log(&sub, &rw, &cw, cfg)
    } else {
        sinkhorn_scaling(&sub, &rw, &cw, cfg)?
    };

    let mut entries = Matrix::zeros(r.len(), c.len());
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            entries.set(i, j, sub_plan.get(a, b));
        }
    }
    Ok(TransportPlan {
        entries,
        row_marginal: r.clone(),
        col_marginal: c.clone(),
        converged,
        iterations_used,
    })
}

fn max_residual(sums: &[f64], target: &[f64]) -> f64 {
    sums.iter()
        .zip(target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Plain sweeps run before Newton steps are attempted.
const NEWTON_WARMUP: usize = 5;
/// Sweeps to run after a failed Newton step before trying again.
const NEWTON_BACKOFF: usize = 10;
/// Ratio between consecutive regularisations on the epsilon-scaling ladder.
const EPS_SCALING_FACTOR: f64 = 4.0;
/// Marginal tolerance and iteration cap on the intermediate rungs.
const RUNG_TOL: f64 = 1e-3;
const RUNG_ITERATIONS: usize = 100;
/// Largest Newton move of any potential, in units of epsilon.
const NEWTON_MAX_STEP: f64 = 20.0;
/// Relative ridge added to the Newton system.
const NEWTON_RIDGE: f64 = 1e-9;

/// Log-domain solver state. The column potential `g` is the free variable;
/// the row potential `f` is either its exact row-balancing response (after a
/// Newton step) or the result of the last sweep.
struct LogSinkhorn<'a> {
    cost: &'a Matrix,
    eps: f64,
    log_r: Vec<f64>,
    log_c: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    scratch: Vec<f64>,
}

impl LogSinkhorn<'_> {
    fn row_update(&mut self, g: &[f64], f: &mut [f64]) {
        let k = g.len();
        for (i, fi) in f.iter_mut().enumerate() {
            let row = self.cost.row(i);
            for j in 0..k {
                self.scratch[j] = (g[j] - row[j]) / self.eps;
            }
            *fi = self.eps * (self.log_r[i] - log_sum_exp(&self.scratch[..k]));
        }
    }

    fn sweep(&mut self) {
        let (n, k) = (self.f.len(), self.g.len());
        let g = std::mem::take(&mut self.g);
        let mut f = std::mem::take(&mut self.f);
        self.row_update(&g, &mut f);
        let mut g = g;
        for j in 0..k {
            for i in 0..n {
                self.scratch[i] = (f[i] - self.cost.get(i, j)) / self.eps;
            }
            g[j] = self.eps * (self.log_c[j] - log_sum_exp(&self.scratch[..n]));
        }
        self.f = f;
        self.g = g;
    }

    fn fill_plan(&self, f: &[f64], g: &[f64], plan: &mut Matrix) {
        for (i, fi) in f.iter().enumerate() {
            let row = self.cost.row(i);
            let out = plan.row_mut(i);
            for j in 0..g.len() {
                out[j] = ((fi + g[j] - row[j]) / self.eps).exp();
            }
        }
    }

    /// One damped Newton step on `g` for the column-sum equations, with `f`
    /// slaved to `g` so the row sums stay exact. Returns false when no
    /// decrease of the column residual was found.
    fn newton_step(&mut self, c: &[f64], plan: &mut Matrix) -> bool {
        let (n, k) = (self.f.len(), self.g.len());
        if k < 2 {
            return false;
        }
        let g = self.g.clone();
        let mut f = vec![0.0; n];
        self.row_update(&g, &mut f);
        self.fill_plan(&f, &g, plan);
        let sums = plan.col_sums();
        let resid: Vec<f64> = c.iter().zip(&sums).map(|(a, b)| a - b).collect();
        let merit0: f64 = resid.iter().map(|v| v * v).sum();

        // Jacobian of the column sums in g, gauge-fixed by holding g[k-1].
        let m = k - 1;
        let mut jac = vec![0.0; m * m];
        for i in 0..n {
            let row = plan.row(i);
            let ri: f64 = row.iter().sum();
            if ri <= 0.0 {
                continue;
            }
            for a in 0..m {
                let pa = row[a] / ri;
                if pa == 0.0 {
                    continue;
                }
                for b in 0..m {
                    jac[a * m + b] -= pa * row[b];
                }
            }
        }
        for a in 0..m {
            jac[a * m + a] += sums[a];
        }
        // A block of rows and columns that exchanges (almost) no mass with the
        // rest leaves the Jacobian nearly singular; the ridge keeps rounding
        // noise along that direction from swamping the step.
        let ridge = NEWTON_RIDGE * (0..m).fold(0.0f64, |acc, a| acc.max(jac[a * m + a]));
        for a in 0..m {
            jac[a * m + a] += ridge;
        }
        for v in jac.iter_mut() {
            *v /= self.eps;
        }
        let Some(delta) = solve_dense(jac, resid[..m].to_vec(), m) else {
            return false;
        };

        // Cap the step in potential units; far from the solution the column
        // sums depend exponentially on g and the raw Newton step overshoots.
        let largest = delta.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut t = (NEWTON_MAX_STEP * self.eps / largest).min(1.0);
        let mut trial_g = g.clone();
        for _ in 0..40 {
            for a in 0..m {
                trial_g[a] = g[a] + t * delta[a];
            }
            trial_g[m] = g[m];
            self.row_update(&trial_g, &mut f);
            self.fill_plan(&f, &trial_g, plan);
            let merit: f64 = plan
                .col_sums()
                .iter()
                .zip(c)
                .map(|(s, cj)| (cj - s) * (cj - s))
                .sum();
            if merit.is_finite() && merit < merit0 && merit <= (1.0 - 1e-4 * t) * merit0 {
                self.g = trial_g;
                self.f = f;
                return true;
            }
            t *= 0.5;
        }
        false
    }
}

/// Gaussian elimination with partial pivoting on a dense `m x m` system.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, m: usize) -> Option<Vec<f64>> {
    for col in 0..m {
        let pivot = (col..m).max_by(|&x, &y| {
            a[x * m + col]
                .abs()
                .partial_cmp(&a[y * m + col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        let pv = a[pivot * m + col];
        if pv == 0.0 || !pv.is_finite() {
            return None;
        }
        if pivot != col {
            for j in 0..m {
                a.swap(col * m + j, pivot * m + j);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..m {
            let factor = a[row * m + col] / pv;
            if factor == 0.0 {
                continue;
            }
            for j in col..m {
                a[row * m + j] -= factor * a[col * m + j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let mut acc = b[row];
        for j in row + 1..m {
            acc -= a[row * m + j] * x[j];
        }
        x[row] = acc / a[row * m + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn transpose(m: &Matrix) -> Matrix {
    let mut t = Matrix::zeros(m.cols(), m.rows());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            t.set(j, i, m.get(i, j));
        }
    }
    t
}

/// Log-domain Sinkhorn with epsilon scaling. The potentials are first solved
/// loosely on a geometric ladder of larger regularisations (starting at the
/// cost range) and warm-start the next rung. On every rung, after a short
/// warm-up of plain sweeps, Newton steps on the potential of the smaller side
/// take over; a sweep is used whenever a Newton step fails to reduce the
/// residual. Each sweep or Newton step counts as one iteration.
fn sinkhorn_log(
    cost: &Matrix,
    r: &[f64],
    c: &[f64],
    cfg: &SinkhornConfig,
) -> (Matrix, bool, usize) {
    if c.len() > r.len() {
        let (plan, converged, iterations) = sinkhorn_log(&transpose(cost), c, r, cfg);
        return (transpose(&plan), converged, iterations);
    }
    let (n, k) = (cost.rows(), cost.cols());
    let range = cost.as_slice().iter().copied().fold(0.0, f64::max);
    let mut ladder = Vec::new();
    let mut e = range;
    while e > cfg.epsilon * EPS_SCALING_FACTOR {
        ladder.push(e);
        e /= EPS_SCALING_FACTOR;
    }
    ladder.push(cfg.epsilon);

    let mut state = LogSinkhorn {
        cost,
        eps: ladder[0],
        log_r: r.iter().map(|v| v.ln()).collect(),
        log_c: c.iter().map(|v| v.ln()).collect(),
        f: vec![0.0; n],
        g: vec![0.0; k],
        scratch: vec![0.0; n.max(k)],
    };
    let mut plan = Matrix::zeros(n, k);
    let mut iterations = 0;
    let last = ladder.len() - 1;

    for (rung, &eps) in ladder.iter().enumerate() {
        state.eps = eps;
        let (tol, budget) = if rung == last {
            (cfg.marginal_tol, cfg.max_iterations.saturating_sub(iterations))
        } else {
            (
                cfg.marginal_tol.max(RUNG_TOL),
                RUNG_ITERATIONS.min(cfg.max_iterations.saturating_sub(iterations + 1)),
            )
        };
        let mut newton_after = NEWTON_WARMUP;
        for it in 1..=budget {
            iterations += 1;
            if it > newton_after {
                if !state.newton_step(c, &mut plan) {
                    newton_after = it + NEWTON_BACKOFF;
                    state.sweep();
                }
            } else {
                state.sweep();
            }
            state.fill_plan(&state.f, &state.g, &mut plan);
            let row_err = max_residual(&plan.row_sums(), r);
            let col_err = max_residual(&plan.col_sums(), c);
            if row_err <= tol && col_err <= tol {
                if rung == last {
                    return (plan, true, iterations);
                }
                break;
            }
        }
    }
    state.fill_plan(&state.f, &state.g, &mut plan);
    (plan, false, iterations)
}

fn sinkhorn_scaling(
    cost: &Matrix,
    r: &[f64],
    c: &[f64],
    cfg: &SinkhornConfig,
) -> Result<(Matrix, bool, usize)> {
    let (n, k) = (cost.rows(), cost.cols());
    let mut kernel = Matrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            kernel.set(i, j, (-cost.get(i, j) / cfg.epsilon).exp());
        }
    }
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; k];
    let mut plan = Matrix::zeros(n, k);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iterations {
        iterations = it;
        for i in 0..n {
            u[i] = r[i] / dot(kernel.row(i), &v);
        }
        for j in 0..k {
            let kv: f64 = (0..n).map(|i| kernel.get(i, j) * u[i]).sum();
            v[j] = c[j] / kv;
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(
                "sinkhorn scaling vectors (try log-domain updates)",
            ));
        }
        for i in 0..n {
            for j in 0..k {
                plan.set(i, j, u[i] * kernel.get(i, j) * v[j]);
            }
        }
        let row_err = max_residual(&plan.row_sums(), r);
        let col_err = max_residual(&plan.col_sums(), c);
        if row_err <= cfg.marginal_tol && col_err <= cfg.marginal_tol {
            converged = true;
            break;
        }
    }
    Ok((plan, converged, iterations))
}

/// `sum_{n,k} P_nk C_nk`.
pub fn ot_loss(plan: &TransportPlan, cost: &Matrix) -> Result<f64> {
    let p = &plan.entries;
    if p.rows() != cost.rows() || p.cols() != cost.cols() {
        return Err(Error::ShapeMismatch(format!(
            "plan is {}x{}, cost is {}x{}",
            p.rows(),
            p.cols(),
            cost.rows(),
            cost.cols()
        )));
    }
    Ok(p.iter_rows()
        .zip(cost.iter_rows())
        .map(|(a, b)| dot(a, b))
        .sum())
}

/// Gradient of the transport loss with respect to each centroid, holding the
/// plan fixed. Row `k` of the result is `sum_n P_nk * dC_nk/de_k`.
pub fn ot_loss_grad_centroids(
    reals: &Matrix,
    centroids: &Matrix,
    plan: &TransportPlan,
) -> Result<Matrix> {
    let (n, k, d) = (reals.rows(), centroids.rows(), reals.cols());
    if centroids.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: centroids.cols(),
        });
    }
    if plan.entries.rows() != n || plan.entries.cols() != k {
        return Err(Error::ShapeMismatch(format!(
            "plan is {}x{}, expected {n}x{k}",
            plan.entries.rows(),
            plan.entries.cols()
        )));
    }
    let mut real_norms = Vec::with_capacity(n);
    for (i, x) in reals.iter_rows().enumerate() {
        let nx = norm(x);
        if nx == 0.0 {
            return Err(Error::ZeroNormVector { index: i });
        }
        real_norms.push(nx);
    }
    let mut grad = Matrix::zeros(k, d);
    for (j, e) in centroids.iter_rows().enumerate() {
        let ne = norm(e);
        if ne == 0.0 {
            return Err(Error::ZeroNormVector { index: n + j });
        }
        let out = grad.row_mut(j);
        for (i, x) in reals.iter_rows().enumerate() {
            let p = plan.entries.get(i, j);
            if p == 0.0 {
                continue;
            }
            let a = 1.0 / (real_norms[i] * ne);
            let b = dot(x, e) / (real_norms[i] * ne * ne * ne);
            // dC/de = -(x * a - e * b)
            for t in 0..d {
                out[t] -= p * (x[t] * a - e[t] * b);
            }
        }
    }
    Ok(grad)
}

/// Largest `N * K` accepted by [`exact_ot_small`].
pub const EXACT_OT_MAX_CELLS: usize = 64;

const PIVOT_TOL: f64 = 1e-12;

/// Exact (unregularised) OT by the transportation simplex: northwest-corner
/// start, then pivots on negative reduced costs using Bland's rule.
/// Returns the optimal plan and its cost.
pub fn exact_ot_small(
    cost: &Matrix,
    r: &MassDistribution,
    c: &MassDistribution,
) -> Result<(Matrix, f64)> {
    check_shapes(cost, r, c)?;
    check_cost(cost)?;
    let (n, k) = (r.len(), c.len());
    if n * k > EXACT_OT_MAX_CELLS {
        return Err(Error::InstanceTooLarge {
            cells: n * k,
            limit: EXACT_OT_MAX_CELLS,
        });
    }
    if r.weights().iter().sum::<f64>() <= 0.0 || c.weights().iter().sum::<f64>() <= 0.0 {
        return Err(Error::DegenerateMarginal("zero total mass"));
    }

    let mut flow = Matrix::zeros(n, k);
    let mut basic = vec![false; n * k];

    // Northwest corner: exactly n + k - 1 basic cells, some possibly at zero.
    let mut supply = r.weights().to_vec();
    let mut demand = c.weights().to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let q = supply[i].min(demand[j]).max(0.0);
        flow.set(i, j, q);
        basic[i * k + j] = true;
        supply[i] -= q;
        demand[j] -= q;
        if i == n - 1 && j == k - 1 {
            // Absorb any floating-point residue in the final cell.
            let extra = supply[i].max(demand[j]).max(0.0);
            flow.set(i, j, q + extra);
            break;
        }
        if i < n - 1 && (j == k - 1 || supply[i] <= demand[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }

    let max_pivots = 50 * n * k + 100;
    for _ in 0..max_pivots {
        let (u, v) = potentials(cost, &basic, n, k);
        let entering = (0..n * k).find(|&cell| {
            let (a, b) = (cell / k, cell % k);
            !basic[cell] && cost.get(a, b) - u[a] - v[b] < -PIVOT_TOL
        });
        let Some(cell) = entering else { break };
        let (ei, ej) = (cell / k, cell % k);
        let path = tree_path(&basic, n, k, ej, ei);
        // Edges at even positions along the path from column ej lose flow.
        let mut theta = f64::INFINITY;
        let mut leaving = usize::MAX;
        for (pos, &(a, b)) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let f = flow.get(a, b);
                let idx = a * k + b;
                if f < theta || (f == theta && idx < leaving) {
                    theta = f;
                    leaving = idx;
                }
            }
        }
        for (pos, &(a, b)) in path.iter().enumerate() {
            let f = flow.get(a, b);
            flow.set(a, b, if pos % 2 == 0 { f - theta } else { f + theta });
        }
        flow.set(ei, ej, theta);
        basic[cell] = true;
        basic[leaving] = false;
        flow.set(leaving / k, leaving % k, 0.0);
    }

    for v in flow.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let value = flow
        .iter_rows()
        .zip(cost.iter_rows())
        .map(|(a, b)| dot(a, b))
        .sum();
    Ok((flow, value))
}

/// Dual potentials `u` (rows) and `v` (columns) with `u_0 = 0`, from the
/// basic cells, which form a spanning tree of the bipartite row/column graph.
fn potentials(cost: &Matrix, basic: &[bool], n: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![f64::NAN; n];
    let mut v = vec![f64::NAN; k];
    u[0] = 0.0;
    let mut changed = true;
    while changed {
        changed = false;
        for a in 0..n {
            for b in 0..k {
                if !basic[a * k + b] {
                    continue;
                }
                if !u[a].is_nan() && v[b].is_nan() {
                    v[b] = cost.get(a, b) - u[a];
                    changed = true;
                } else if u[a].is_nan() && !v[b].is_nan() {
                    u[a] = cost.get(a, b) - v[b];
                    changed = true;
                }
            }
        }
    }
    (u, v)
}

/// Basic cells on the tree path from column node `col` to row node `row`.
fn tree_path(basic: &[bool], n: usize, k: usize, col: usize, row: usize) -> Vec<(usize, usize)> {
    // Nodes: rows are 0..n, columns are n..n+k.
    let total = n + k;
    let mut parent: Vec<Option<(usize, (usize, usize))>> = vec![None; total];
    let mut seen = vec![false; total];
    let start = n + col;
    let target = row;
    let mut queue = std::collections::VecDeque::from([start]);
    seen[start] = true;
    while let Some(node) = queue.pop_front() {
        if node == target {
            break;
        }
        if node < n {
            for b in 0..k {
                let next = n + b;
                if basic[node * k + b] && !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, (node, b)));
                    queue.push_back(next);
                }
            }
        } else {
            let b = node - n;
            for a in 0..n {
                if basic[a * k + b] && !seen[a] {
                    seen[a] = true;
                    parent[a] = Some((node, (a, b)));
                    queue.push_back(a);
                }
            }
        }
    }
    let mut path = Vec::new();
    let mut node = target;
    while node != start {
        let (prev, edge) = parent[node].expect("basis is a spanning tree");
        path.push(edge);
        node = prev;
    }
    path.reverse();
    path
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn md(v: &[f64]) -> MassDistribution {
        MassDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn newton_jacobian_matches_fd() {
        let mut rng = RngState::new(3);
        let cost = Matrix::from_vec(5, 4, (0..20).map(|_| 2.0 * rng.uniform()).collect()).unwrap();
        let r = [0.1, 0.2, 0.3, 0.15, 0.25];
        let eps = 0.3;
        let mut st = LogSinkhorn {
            cost: &cost,
            eps,
            log_r: r.iter().map(|v: &f64| v.ln()).collect(),
            log_c: vec![0.0; 4],
            f: vec![0.0; 5],
            g: vec![0.1, -0.2, 0.3, 0.0],
            scratch: vec![0.0; 5],
        };
        let sums = |st: &mut LogSinkhorn, g: &[f64]| {
            let mut f = vec![0.0; 5];
            st.row_update(g, &mut f);
            let mut p = Matrix::zeros(5, 4);
            st.fill_plan(&f, g, &mut p);
            p.col_sums()
        };
        let g0 = st.g.clone();
        let mut f = vec![0.0; 5];
        st.row_update(&g0, &mut f);
        let mut plan = Matrix::zeros(5, 4);
        st.fill_plan(&f, &g0, &mut plan);
        let s0 = plan.col_sums();
        for b in 0..4 {
            let h = 1e-6;
            let mut gp = g0.clone();
            gp[b] += h;
            let mut gm = g0.clone();
            gm[b] -= h;
            let sp = sums(&mut st, &gp);
            let sm = sums(&mut st, &gm);
            for a in 0..4 {
                let fd = (sp[a] - sm[a]) / (2.0 * h);
                let mut an = if a == b { s0[a] } else { 0.0 };
                for i in 0..5 {
                    let ri: f64 = plan.row(i).iter().sum();
                    an -= plan.get(i, a) * plan.get(i, b) / ri;
                }
                an /= eps;
                assert!((fd - an).abs() < 1e-6, "{a} {b} {fd} {an}");
            }
        }
    }

    #[test]
    fn forced_single_cell() {
        let cost = Matrix::from_rows(&[[0.3]]).unwrap();
        for eps in [0.001, 0.05, 10.0] {
            let cfg = SinkhornConfig {
                epsilon: eps,
                ..Default::default()
            };
            let plan = sinkhorn(&cost, &md(&[1.0]), &md(&[1.0]), &cfg).unwrap();
            assert!(plan.converged);
            assert!((plan.entries.get(0, 0) - 1.0).abs() < 1e-12);
            assert!((ot_loss(&plan, &cost).unwrap() - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cost_gives_outer_product() {
        let cost = Matrix::zeros(2, 2);
        let plan = sinkhorn(
            &cost,
            &md(&[0.5, 0.5]),
            &md(&[0.25, 0.75]),
            &SinkhornConfig::default(),
        )
        .unwrap();
        let want = [0.125, 0.375, 0.125, 0.375];
        for (g, w) in plan.entries.as_slice().iter().zip(want) {
            assert!((g - w).abs() < 1e-9);
        }
        assert_eq!(ot_loss(&plan, &cost).unwrap(), 0.0);
    }

    #[test]
    fn small_epsilon_approaches_diagonal() {
        let cost = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let half = md(&[0.5, 0.5]);
        let cfg = SinkhornConfig {
            epsilon: 0.01,
            ..Default::default()
        };
        let plan = sinkhorn(&cost, &half, &half, &cfg).unwrap();
        assert!(plan.converged);
        assert!(plan.entries.get(0, 1) < 1e-3 && plan.entries.get(1, 0) < 1e-3);
        let (_, exact) = exact_ot_small(&cost, &half, &half).unwrap();
        assert_eq!(exact, 0.0);
    }

    #[test]
    fn scaling_and_log_domain_agree() {
        let mut rng = RngState::new(4);
        let cost = Matrix::from_vec(3, 4, (0..12).map(|_| 2.0 * rng.uniform()).collect()).unwrap();
        let r = md(&[0.2, 0.3, 0.5]);
        let c = md(&[0.1, 0.4, 0.25, 0.25]);
        let log = sinkhorn(&cost, &r, &c, &SinkhornConfig::default()).unwrap();
        let std = sinkhorn(
            &cost,
            &r,
            &c,
            &SinkhornConfig {
                log_domain: false,
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in log.entries.as_slice().iter().zip(std.entries.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_mass_column_restored_as_zeros() {
        let cost = Matrix::from_rows(&[[0.1, 0.9, 0.4], [0.7, 0.2, 0.3]]).unwrap();
        let plan = sinkhorn(
            &cost,
            &md(&[0.5, 0.5]),
            &md(&[0.6, 0.0, 0.4]),
            &SinkhornConfig::default(),
        )
        .unwrap();
        assert!(plan.converged);
        assert_eq!(plan.entries.get(0, 1), 0.0);
        assert_eq!(plan.entries.get(1, 1), 0.0);
        let (re, ce) = plan.marginal_residuals();
        assert!(re <= 1e-6 && ce <= 1e-6);
    }

    #[test]
    fn rejects_bad_cost() {
        let cost = Matrix::from_rows(&[[0.1, f64::NAN]]).unwrap();
        let err = sinkhorn(&cost, &md(&[1.0]), &md(&[0.5, 0.5]), &SinkhornConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteCost { row: 0, col: 1 })));
        let cost = Matrix::from_rows(&[[0.1, 0.2]]).unwrap();
        let err = sinkhorn(&cost, &md(&[1.0]), &md(&[1.0]), &SinkhornConfig::default());
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn non_convergence_is_reported_not_fatal() {
        let mut rng = RngState::new(1);
        let cost = Matrix::from_vec(5, 4, (0..20).map(|_| 2.0 * rng.uniform()).collect()).unwrap();
        let cfg = SinkhornConfig {
            epsilon: 0.001,
            max_iterations: 1,
            ..Default::default()
        };
        let plan = sinkhorn(
            &cost,
            &MassDistribution::uniform(5).unwrap(),
            &MassDistribution::uniform(4).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations_used, 1);
    }

    #[test]
    fn ot_loss_shape_mismatch() {
        let cost = Matrix::zeros(1, 1);
        let plan = sinkhorn(&cost, &md(&[1.0]), &md(&[1.0]), &SinkhornConfig::default()).unwrap();
        assert!(matches!(
            ot_loss(&plan, &Matrix::zeros(2, 1)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn ot_loss_matches_double_loop() {
        let mut rng = RngState::new(21);
        let cost = Matrix::from_vec(3, 3, (0..9).map(|_| 2.0 * rng.uniform()).collect()).unwrap();
        let r = md(&[0.2, 0.5, 0.3]);
        let c = md(&[0.4, 0.4, 0.2]);
        let plan = sinkhorn(&cost, &r, &c, &SinkhornConfig::default()).unwrap();
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                want += plan.entries.get(i, j) * cost.get(i, j);
            }
        }
        assert!((ot_loss(&plan, &cost).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn gradient_single_pair() {
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let e = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let cost = Matrix::from_rows(&[[1.0]]).unwrap();
        let plan = sinkhorn(&cost, &md(&[1.0]), &md(&[1.0]), &SinkhornConfig::default()).unwrap();
        let g = ot_loss_grad_centroids(&x, &e, &plan).unwrap();
        assert!((g.get(0, 0) + 1.0).abs() < 1e-12 && g.get(0, 1).abs() < 1e-12);

        // Parallel centroid sits at the minimum.
        let e = Matrix::from_rows(&[[3.0, 0.0]]).unwrap();
        let g = ot_loss_grad_centroids(&x, &e, &plan).unwrap();
        assert!(g.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_zero_norm_rejected() {
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let e = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let plan = sinkhorn(&Matrix::zeros(1, 1), &md(&[1.0]), &md(&[1.0]), &SinkhornConfig::default())
            .unwrap();
        assert!(matches!(
            ot_loss_grad_centroids(&x, &e, &plan),
            Err(Error::ZeroNormVector { index: 1 })
        ));
    }

    #[test]
    fn exact_forced_single_row() {
        let cost = Matrix::from_rows(&[[0.3, 1.2, 0.7]]).unwrap();
        let c = md(&[0.2, 0.5, 0.3]);
        let (plan, value) = exact_ot_small(&cost, &md(&[1.0]), &c).unwrap();
        for (p, w) in plan.row(0).iter().zip(c.weights()) {
            assert!((p - w).abs() < 1e-15);
        }
        assert!((value - (0.2 * 0.3 + 0.5 * 1.2 + 0.3 * 0.7)).abs() < 1e-12);
    }

    #[test]
    fn exact_diagonal_matching() {
        let cost = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let half = md(&[0.5, 0.5]);
        let (plan, value) = exact_ot_small(&cost, &half, &half).unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(plan.as_slice(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn exact_rejects_large_instances() {
        let cost = Matrix::zeros(9, 8);
        let err = exact_ot_small(
            &cost,
            &MassDistribution::uniform(9).unwrap(),
            &MassDistribution::uniform(8).unwrap(),
        );
        assert!(matches!(err, Err(Error::InstanceTooLarge { cells: 72, .. })));
    }
}
