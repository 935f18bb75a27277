//! Nearest state under edge-stretch limits and pinned vertices:
//!
//! ```text
//! minimize    ½ Σ_m ‖y*_m − y_m‖²
//! subject to  ‖y*_i − y*_j‖ ≤ λ · rest_ij   for every edge (i, j)
//!             y*_m = z_k                     for every pin (m, k)
//! ```
//!
//! Pins are substituted out. The edge constraints are norm balls on affine
//! functions of the free vertices, so the problem is convex with a strictly
//! convex objective. It is solved through its Lagrangian dual, using the
//! squared constraints `½ν(‖d‖² − c²)`: for fixed multipliers the inner
//! minimization is an unconstrained quadratic with a graph-Laplacian system
//! matrix, solved in closed form by Cholesky. The dual is maximized over
//! `ν ≥ 0` by projected Newton. If that fails to certify a solution, an
//! ADMM (augmented Lagrangian) splitting over the edge vectors provides a
//! warm start and Newton is retried.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};

use crate::error::{Error, Result};
use crate::types::{point, set_point, CorrespondenceSet, Points, TrackedModel};

/// Iteration cap shared by the Newton and ADMM loops.
pub const MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionProblem {
    pub target: Points,
    pub edges: Vec<[usize; 2]>,
    pub rest_lengths: Vec<f64>,
    pub lambda_stretch: f64,
    pub pinned: CorrespondenceSet,
}

impl ProjectionProblem {
    pub fn new(target: Points, model: &TrackedModel, lambda_stretch: f64, pinned: CorrespondenceSet) -> Self {
        Self {
            target,
            edges: model.edges.clone(),
            rest_lengths: model.rest_lengths(),
            lambda_stretch,
            pinned,
        }
    }

    pub fn limits(&self) -> Vec<f64> {
        self.rest_lengths.iter().map(|r| r * self.lambda_stretch).collect()
    }

    fn validate(&self) -> Result<()> {
        let m = self.target.nrows();
        if self.rest_lengths.len() != self.edges.len() {
            return Err(Error::InvalidInput("one rest length per edge required".into()));
        }
        if let Some(k) = self.rest_lengths.iter().position(|&r| !(r > 0.0)) {
            return Err(Error::InvalidInput(format!("edge {k} has non-positive rest length")));
        }
        if self.edges.iter().any(|&[i, j]| i >= m || j >= m || i == j) {
            return Err(Error::InvalidInput("edge index out of range".into()));
        }
        if !(self.lambda_stretch >= 1.0) {
            return Err(Error::InvalidInput("lambda_stretch must be >= 1".into()));
        }
        self.pinned.validate(m)
    }

    /// Rejects pin sets that no state can satisfy: a pinned pair farther
    /// apart than the summed edge limits of the shortest path between them.
    /// Adjacent pins reduce to the single-edge check.
    pub fn check_feasible(&self, tol: f64) -> Result<()> {
        self.validate()?;
        let m = self.target.nrows();
        let limits = self.limits();
        let pins = self.pinned.pinned_positions(m);
        for (k, &[i, j]) in self.edges.iter().enumerate() {
            if let (Some(a), Some(b)) = (pins[i], pins[j]) {
                let len = (a - b).norm();
                if len > limits[k] + tol {
                    return Err(Error::Infeasible(format!(
                        "pinned edge {k} ({i}, {j}) has length {len:.6} > limit {:.6}",
                        limits[k]
                    )));
                }
            }
        }

        let pinned: Vec<usize> = (0..m).filter(|&v| pins[v].is_some()).collect();
        if pinned.len() < 2 {
            return Ok(());
        }
        let mut adjacency = vec![Vec::new(); m];
        for (k, &[i, j]) in self.edges.iter().enumerate() {
            adjacency[i].push((j, limits[k]));
            adjacency[j].push((i, limits[k]));
        }
        for (n, &a) in pinned.iter().enumerate() {
            let reach = shortest_paths(&adjacency, a);
            for &b in &pinned[n + 1..] {
                let gap = (pins[a].unwrap() - pins[b].unwrap()).norm();
                if gap > reach[b] + tol {
                    return Err(Error::Infeasible(format!(
                        "pins on vertices {a} and {b} are {gap:.6} apart, chain allows {:.6}",
                        reach[b]
                    )));
                }
            }
        }
        Ok(())
    }
}

fn shortest_paths(adjacency: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let n = adjacency.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    dist[source] = 0.0;
    for _ in 0..n {
        let Some(v) = (0..n).filter(|&v| !done[v]).min_by(|&a, &b| dist[a].total_cmp(&dist[b])) else {
            break;
        };
        if !dist[v].is_finite() {
            break;
        }
        done[v] = true;
        for &(w, len) in &adjacency[v] {
            dist[w] = dist[w].min(dist[v] + len);
        }
    }
    dist
}

#[derive(Debug, Clone, Copy)]
enum End {
    Free(usize),
    Fixed(Vector3<f64>),
}

#[derive(Debug, Clone, Copy)]
struct Link {
    a: End,
    b: End,
    limit: f64,
}

/// The problem after substituting pinned vertices.
struct Reduced {
    free: Vec<usize>,
    target: Vec<Vector3<f64>>,
    links: Vec<Link>,
}

struct DualPoint {
    y: Vec<Vector3<f64>>,
    d: Vec<Vector3<f64>>,
    value: f64,
    grad: Vec<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl Reduced {
    fn new(problem: &ProjectionProblem) -> Self {
        let m = problem.target.nrows();
        let pins = problem.pinned.pinned_positions(m);
        let mut slot = vec![usize::MAX; m];
        let mut free = Vec::new();
        for v in 0..m {
            if pins[v].is_none() {
                slot[v] = free.len();
                free.push(v);
            }
        }
        let end = |v: usize| match pins[v] {
            Some(z) => End::Fixed(z),
            None => End::Free(slot[v]),
        };
        let limits = problem.limits();
        let links = problem
            .edges
            .iter()
            .zip(limits)
            .filter(|(&[i, j], _)| pins[i].is_none() || pins[j].is_none())
            .map(|(&[i, j], limit)| Link { a: end(i), b: end(j), limit })
            .collect();
        let target = free.iter().map(|&v| point(&problem.target, v)).collect();
        Self { free, target, links }
    }

    fn pos(&self, y: &[Vector3<f64>], e: End) -> Vector3<f64> {
        match e {
            End::Free(s) => y[s],
            End::Fixed(z) => z,
        }
    }

    fn edge_vectors(&self, y: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.links.iter().map(|l| self.pos(y, l.a) - self.pos(y, l.b)).collect()
    }

    /// Minimizer of the Lagrangian for fixed multipliers, plus the dual value
    /// and gradient there.
    fn evaluate(&self, nu: &[f64]) -> Option<DualPoint> {
        let f = self.free.len();
        let mut s = DMatrix::<f64>::identity(f, f);
        let mut r = DMatrix::<f64>::from_fn(f, 3, |i, c| self.target[i][c]);
        for (l, &n) in self.links.iter().zip(nu) {
            if n <= 0.0 {
                continue;
            }
            match (l.a, l.b) {
                (End::Free(i), End::Free(j)) => {
                    s[(i, i)] += n;
                    s[(j, j)] += n;
                    s[(i, j)] -= n;
                    s[(j, i)] -= n;
                }
                (End::Free(i), End::Fixed(z)) | (End::Fixed(z), End::Free(i)) => {
                    s[(i, i)] += n;
                    for c in 0..3 {
                        r[(i, c)] += n * z[c];
                    }
                }
                (End::Fixed(_), End::Fixed(_)) => {}
            }
        }
        let factor = s.cholesky()?;
        let sol = factor.solve(&r);
        let y: Vec<Vector3<f64>> =
            (0..f).map(|i| Vector3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)])).collect();
        let d = self.edge_vectors(&y);
        let grad: Vec<f64> = self
            .links
            .iter()
            .zip(&d)
            .map(|(l, de)| 0.5 * (de.norm_squared() - l.limit * l.limit))
            .collect();
        let fit: f64 = y.iter().zip(&self.target).map(|(a, b)| (a - b).norm_squared()).sum();
        let value = 0.5 * fit + nu.iter().zip(&grad).map(|(n, g)| n * g).sum::<f64>();
        Some(DualPoint { y, d, value, grad, factor })
    }

    /// Row of the edge-difference operator for a link, as (slot, sign) pairs.
    fn stencil(&self, k: usize) -> impl Iterator<Item = (usize, f64)> {
        let l = self.links[k];
        let a = match l.a {
            End::Free(s) => Some((s, 1.0)),
            End::Fixed(_) => None,
        };
        let b = match l.b {
            End::Free(s) => Some((s, -1.0)),
            End::Fixed(_) => None,
        };
        a.into_iter().chain(b)
    }

    /// Negated dual Hessian restricted to `set`: `(A S⁻¹ Aᵀ) ∘ (D Dᵀ)`.
    fn neg_hessian(&self, point: &DualPoint, set: &[usize]) -> DMatrix<f64> {
        let f = self.free.len();
        let cols: Vec<DVector<f64>> = set
            .iter()
            .map(|&k| {
                let mut a = DVector::zeros(f);
                for (s, sign) in self.stencil(k) {
                    a[s] += sign;
                }
                point.factor.solve(&a)
            })
            .collect();
        DMatrix::from_fn(set.len(), set.len(), |r, c| {
            let coupling: f64 = self.stencil(set[r]).map(|(s, sign)| sign * cols[c][s]).sum();
            coupling * point.d[set[r]].dot(&point.d[set[c]])
        })
    }

    /// Gradient tolerance per link, equivalent to a length error of `len_tol`.
    fn tolerances(&self, len_tol: f64) -> Vec<f64> {
        self.links.iter().map(|l| l.limit * len_tol).collect()
    }

    fn converged(&self, nu: &[f64], grad: &[f64], gtol: &[f64]) -> bool {
        nu.iter()
            .zip(grad)
            .zip(gtol)
            .all(|((&n, &g), &t)| if n > 0.0 { g.abs() <= t } else { g <= t })
    }

    /// Projected Newton ascent on the dual from `nu`.
    fn newton(&self, mut nu: Vec<f64>, len_tol: f64) -> std::result::Result<Vec<Vector3<f64>>, Vec<f64>> {
        let gtol = self.tolerances(len_tol);
        let Some(mut current) = self.evaluate(&nu) else {
            return Err(nu);
        };
        for _ in 0..MAX_ITERATIONS {
            if self.converged(&nu, &current.grad, &gtol) {
                return Ok(current.y);
            }
            let working: Vec<usize> =
                (0..nu.len()).filter(|&k| nu[k] > 0.0 || current.grad[k] > 0.0).collect();
            let mut h = self.neg_hessian(&current, &working);
            let scale = h.diagonal().amax().max(1e-300);
            for i in 0..working.len() {
                h[(i, i)] += 1e-12 * scale;
            }
            let g = DVector::from_iterator(working.len(), working.iter().map(|&k| current.grad[k]));
            let Some(step) = h.clone().cholesky().map(|c| c.solve(&g)).or_else(|| h.lu().solve(&g)) else {
                return Err(nu);
            };

            let mut accepted = None;
            let mut t = 1.0;
            for _ in 0..40 {
                let mut trial = nu.clone();
                for (i, &k) in working.iter().enumerate() {
                    trial[k] = (nu[k] + t * step[i]).max(0.0);
                }
                let gain: f64 = working.iter().map(|&k| current.grad[k] * (trial[k] - nu[k])).sum();
                if let Some(next) = self.evaluate(&trial) {
                    if next.value >= current.value + 1e-4 * gain {
                        accepted = Some((trial, next));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((trial, next)) => {
                    nu = trial;
                    current = next;
                }
                None => {
                    // no ascent left at machine precision
                    return if self.converged(&nu, &current.grad, &gtol) { Ok(current.y) } else { Err(nu) };
                }
            }
        }
        if self.converged(&nu, &current.grad, &gtol) {
            Ok(current.y)
        } else {
            Err(nu)
        }
    }

    /// ADMM on `d_e = A y + b_e`, `‖d_e‖ ≤ c_e`. Returns multiplier estimates
    /// for the squared-constraint dual and the max constraint violation.
    fn admm(&self, rho: f64) -> (Vec<f64>, Vec<Vector3<f64>>, f64) {
        let f = self.free.len();
        let mut s = DMatrix::<f64>::identity(f, f);
        for k in 0..self.links.len() {
            let st: Vec<(usize, f64)> = self.stencil(k).collect();
            for &(i, si) in &st {
                for &(j, sj) in &st {
                    s[(i, j)] += rho * si * sj;
                }
            }
        }
        let factor = s.cholesky().expect("I + rho A^T A is positive definite");
        let mut y = self.target.clone();
        let mut z: Vec<Vector3<f64>> = self.edge_vectors(&y);
        let mut u: Vec<Vector3<f64>> = vec![Vector3::zeros(); self.links.len()];
        for (zk, l) in z.iter_mut().zip(&self.links) {
            let n = zk.norm();
            if n > l.limit {
                *zk *= l.limit / n;
            }
        }
        let mut violation = f64::INFINITY;
        for _ in 0..MAX_ITERATIONS * 10 {
            // y-step: (I + rho AᵀA) y = t + rho Aᵀ(z - b - u)
            let mut r = DMatrix::<f64>::from_fn(f, 3, |i, c| self.target[i][c]);
            for (k, l) in self.links.iter().enumerate() {
                let fixed = match (l.a, l.b) {
                    (End::Fixed(p), End::Free(_)) => p,
                    (End::Free(_), End::Fixed(q)) => -q,
                    _ => Vector3::zeros(),
                };
                let v = z[k] - fixed - u[k];
                for (slot, sign) in self.stencil(k) {
                    for c in 0..3 {
                        r[(slot, c)] += rho * sign * v[c];
                    }
                }
            }
            let sol = factor.solve(&r);
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = Vector3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]);
            }
            let d = self.edge_vectors(&y);
            violation = 0.0;
            for k in 0..self.links.len() {
                let mut v = d[k] + u[k];
                let n = v.norm();
                if n > self.links[k].limit {
                    v *= self.links[k].limit / n;
                }
                z[k] = v;
                u[k] += d[k] - z[k];
                violation = f64::max(violation, d[k].norm() - self.links[k].limit);
            }
        }
        let nu = self
            .links
            .iter()
            .zip(&u)
            .map(|(l, uk)| rho * uk.norm() / l.limit)
            .collect();
        (nu, y, violation)
    }
}

/// Projects `problem.target` onto the feasible set. Edges end within `tol`
/// of their limit (in practice to ~1e-10), pinned vertices are copied
/// exactly, and a target that already satisfies every limit is returned
/// unchanged apart from the pins.
pub fn project(problem: &ProjectionProblem, tol: f64) -> Result<Points> {
    problem.check_feasible(tol)?;
    let mut out = problem.target.clone();
    for &[m, k] in &problem.pinned.pairs {
        set_point(&mut out, m, &point(&problem.pinned.points, k));
    }
    let limits = problem.limits();
    let violated = problem
        .edges
        .iter()
        .zip(&limits)
        .any(|(&[i, j], &c)| (point(&out, i) - point(&out, j)).norm() > c);
    if !violated {
        return Ok(out);
    }

    let reduced = Reduced::new(problem);
    let len_tol = tol.min(1e-10);
    let solution = match reduced.newton(vec![0.0; reduced.links.len()], len_tol) {
        Ok(y) => y,
        Err(_) => {
            let (nu, y_admm, violation) = reduced.admm(10.0);
            match reduced.newton(nu, len_tol) {
                Ok(y) => y,
                Err(_) if violation <= tol => y_admm,
                Err(_) => {
                    return Err(Error::NoConvergence { iterations: MAX_ITERATIONS, max_violation: violation })
                }
            }
        }
    };
    for (slot, &v) in reduced.free.iter().enumerate() {
        set_point(&mut out, v, &solution[slot]);
    }

    let worst = problem
        .edges
        .iter()
        .zip(&limits)
        .map(|(&[i, j], &c)| (point(&out, i) - point(&out, j)).norm() - c)
        .fold(f64::NEG_INFINITY, f64::max);
    if worst > tol {
        return Err(Error::NoConvergence { iterations: MAX_ITERATIONS, max_violation: worst });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// `‖y_i − y_j‖ / (λ · rest)` per edge.
    pub edge_ratios: Vec<f64>,
    /// `‖y_m − z_k‖` per correspondence pair.
    pub pin_residuals: Vec<f64>,
    pub passed: bool,
}

/// Pin residuals must be within 1e-9; edges within `tol` of their limit.
pub const PIN_TOLERANCE: f64 = 1e-9;

pub fn feasibility_report(y: &Points, problem: &ProjectionProblem, tol: f64) -> FeasibilityReport {
    let limits = problem.limits();
    let mut passed = true;
    let edge_ratios = problem
        .edges
        .iter()
        .zip(&limits)
        .map(|(&[i, j], &c)| {
            let len = (point(y, i) - point(y, j)).norm();
            passed &= len <= c + tol;
            len / c
        })
        .collect();
    let pin_residuals = problem
        .pinned
        .pairs
        .iter()
        .map(|&[m, k]| {
            let r = (point(y, m) - point(&problem.pinned.points, k)).norm();
            passed &= r <= PIN_TOLERANCE;
            r
        })
        .collect();
    FeasibilityReport { edge_ratios, pin_residuals, passed }
}

/// First-order optimality residual of `y_star`: the distance from
/// `target − y_star` (free vertices) to the cone of unit gradients of edges
/// within `active_tol` of their limit, found by non-negative least squares.
pub fn kkt_residual(y_star: &Points, problem: &ProjectionProblem, active_tol: f64) -> f64 {
    let m = y_star.nrows();
    let pins = problem.pinned.pinned_positions(m);
    let free: Vec<usize> = (0..m).filter(|&v| pins[v].is_none()).collect();
    let mut slot = vec![usize::MAX; m];
    for (s, &v) in free.iter().enumerate() {
        slot[v] = s;
    }
    let rows = 3 * free.len();
    let b = DVector::from_fn(rows, |r, _| {
        let v = free[r / 3];
        problem.target[(v, r % 3)] - y_star[(v, r % 3)]
    });

    let limits = problem.limits();
    let mut columns = Vec::new();
    for (k, &[i, j]) in problem.edges.iter().enumerate() {
        let d = point(y_star, i) - point(y_star, j);
        let len = d.norm();
        if len < limits[k] - active_tol || len == 0.0 || (pins[i].is_some() && pins[j].is_some()) {
            continue;
        }
        let unit = d / len;
        let mut col = DVector::zeros(rows);
        for (v, sign) in [(i, 1.0), (j, -1.0)] {
            if pins[v].is_none() {
                for c in 0..3 {
                    col[3 * slot[v] + c] = sign * unit[c];
                }
            }
        }
        columns.push(col);
    }
    if columns.is_empty() {
        return b.norm();
    }
    let a = DMatrix::from_columns(&columns);
    let x = nnls(&a, &b);
    (&b - &a * x).norm()
}

/// Lawson–Hanson non-negative least squares.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * (a.amax() * b.amax()).max(1e-300) * (a.nrows() as f64);
    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = a.select_columns(&idx);
        let sol = sub.svd(true, true).solve(b, 1e-14).expect("svd solve");
        let mut full = DVector::zeros(n);
        for (s, &j) in idx.iter().enumerate() {
            full[j] = sol[s];
        }
        full
    };
    for _ in 0..3 * n + 10 {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n).filter(|&j| !passive[j]).max_by(|&p, &q| w[p].total_cmp(&w[q]));
        match candidate {
            Some(j) if w[j] > tol => passive[j] = true,
            _ => break,
        }
        loop {
            let s = solve_passive(&passive);
            if (0..n).filter(|&j| passive[j]).all(|j| s[j] > 0.0) {
                x = s;
                break;
            }
            let alpha = (0..n)
                .filter(|&j| passive[j] && s[j] <= 0.0)
                .map(|j| x[j] / (x[j] - s[j]))
                .fold(f64::INFINITY, f64::min);
            x = &x + (&s - &x) * alpha;
            for j in 0..n {
                if passive[j] && x[j] <= 1e-15 {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}
