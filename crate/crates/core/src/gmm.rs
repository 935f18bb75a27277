//! Regularized GMM registration: visibility-weighted E-step, a coherent
//! displacement field over the previous state, and a locally-linear
//! topology term computed once on the template.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::image::{project_vertex, sample_depth_and_distance, PixelSample};
use crate::types::{point, FrameObservation, Parameters, Points};

/// Lower bound on the variance returned by [`update_sigma2`].
pub const SIGMA2_FLOOR: f64 = 1e-10;

/// Per-centroid membership probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityPrior {
    pub weights: DVector<f64>,
}

impl VisibilityPrior {
    pub fn uniform(m: usize) -> Self {
        Self { weights: DVector::from_element(m, 1.0 / m as f64) }
    }

    /// Normalizes non-negative weights to sum to one. Weights are floored at
    /// the smallest normal float so every centroid keeps non-zero mass.
    pub fn from_unnormalized(raw: &[f64]) -> Self {
        let floored: Vec<f64> = raw.iter().map(|&w| w.max(f64::MIN_POSITIVE)).collect();
        let total: f64 = floored.iter().sum();
        Self { weights: DVector::from_iterator(raw.len(), floored.iter().map(|w| w / total)) }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `exp(-k_vis * D(u, v) * max(z - depth(u, v), 0))` per vertex, using the
/// projection of the previous state into the new frame. Vertices off the
/// image or over pixels with no return get weight 1.
pub fn unnormalized_visibility(y_prev: &Points, frame: &FrameObservation, k_vis: f64) -> Vec<f64> {
    (0..y_prev.nrows())
        .map(|m| {
            let proj = project_vertex(&point(y_prev, m), &frame.intrinsics);
            match sample_depth_and_distance(&proj, &frame.depth, &frame.distance_image) {
                PixelSample::OnImage { depth: Some(d), distance } => {
                    (-k_vis * distance * (proj.z - d).max(0.0)).exp()
                }
                _ => 1.0,
            }
        })
        .collect()
}

pub fn visibility_prior(y_prev: &Points, frame: &FrameObservation, k_vis: f64) -> VisibilityPrior {
    VisibilityPrior::from_unnormalized(&unnormalized_visibility(y_prev, frame, k_vis))
}

/// Matrices reused across EM iterations.
///
/// `l` and `h = (I - L)^T (I - L)` come from the template and never change;
/// `g` is rebuilt from the state each registration starts from, and `w`
/// holds the last displacement coefficients.
#[derive(Debug, Clone)]
pub struct EmWorkspace {
    pub g: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub w: Points,
}

impl EmWorkspace {
    pub fn new(template: &Points, lle_neighbors: usize) -> Result<Self> {
        let m = template.nrows();
        let l = lle_weights(template, lle_neighbors)?;
        let i_minus_l = DMatrix::identity(m, m) - &l;
        let h = i_minus_l.transpose() * &i_minus_l;
        Ok(Self { g: DMatrix::identity(m, m), l, h, w: Points::zeros(m) })
    }

    pub fn num_vertices(&self) -> usize {
        self.l.nrows()
    }
}

pub fn gaussian_kernel(y: &Points, beta: f64) -> DMatrix<f64> {
    let m = y.nrows();
    let scale = -1.0 / (2.0 * beta * beta);
    let mut g = DMatrix::identity(m, m);
    for i in 0..m {
        let yi = point(y, i);
        for j in (i + 1)..m {
            let v = ((yi - point(y, j)).norm_squared() * scale).exp();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Indices of the `k` nearest other vertices, ties broken by index.
pub fn nearest_neighbors(y: &Points, m: usize, k: usize) -> Vec<usize> {
    let ym = point(y, m);
    let mut others: Vec<(f64, usize)> = (0..y.nrows())
        .filter(|&i| i != m)
        .map(|i| ((point(y, i) - ym).norm_squared(), i))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Locally-linear reconstruction weights of every template vertex from its
/// `k` nearest neighbors: rows sum to one and are zero outside the
/// neighborhood. The local Gram matrix gets `1e-9 * trace` added to its
/// diagonal before solving.
pub fn lle_weights(y0: &Points, k: usize) -> Result<DMatrix<f64>> {
    let m = y0.nrows();
    if k == 0 || k >= m {
        return Err(Error::InvalidInput(format!(
            "lle neighborhood of {k} needs at least {} vertices, model has {m}",
            k + 1
        )));
    }
    let mut l = DMatrix::zeros(m, m);
    for row in 0..m {
        let nbrs = nearest_neighbors(y0, row, k);
        let center = point(y0, row);
        let diffs: Vec<_> = nbrs.iter().map(|&i| center - point(y0, i)).collect();
        let mut gram = DMatrix::from_fn(k, k, |a, b| diffs[a].dot(&diffs[b]));
        let trace = gram.trace();
        if !(trace > 0.0) {
            return Err(Error::InvalidInput(format!(
                "vertex {row} has fewer than {k} distinct neighbors"
            )));
        }
        for d in 0..k {
            gram[(d, d)] += 1e-9 * trace;
        }
        let weights = gram
            .cholesky()
            .map(|c| c.solve(&DVector::from_element(k, 1.0)))
            .ok_or_else(|| Error::InvalidInput(format!("degenerate neighborhood at vertex {row}")))?;
        let total = weights.sum();
        for (slot, &i) in nbrs.iter().enumerate() {
            l[(row, i)] = weights[slot] / total;
        }
    }
    Ok(l)
}

/// Posterior `P[m, n]` that cloud point `n` was generated by centroid `m`,
/// with a uniform outlier component of weight `omega`.
pub fn e_step(
    x: &Points,
    y: &Points,
    sigma2: f64,
    omega: f64,
    prior: &VisibilityPrior,
) -> DMatrix<f64> {
    let (m, n) = (y.nrows(), x.nrows());
    let mut p = DMatrix::zeros(m, n);
    if omega >= 1.0 || n == 0 {
        return p;
    }
    // log of (2 pi sigma^2)^{3/2} omega / ((1 - omega) N); -inf when omega = 0
    let ln_outlier =
        1.5 * (2.0 * PI * sigma2).ln() + omega.ln() - (1.0 - omega).ln() - (n as f64).ln();
    let ln_prior: Vec<f64> = prior.weights.iter().map(|w| w.ln()).collect();
    let inv = 1.0 / (2.0 * sigma2);
    let mut logits = vec![0.0; m];
    for col in 0..n {
        let xn = point(x, col);
        let mut top = f64::NEG_INFINITY;
        for (row, logit) in logits.iter_mut().enumerate() {
            *logit = ln_prior[row] - (xn - point(y, row)).norm_squared() * inv;
            top = top.max(*logit);
        }
        if top == f64::NEG_INFINITY {
            continue;
        }
        let mut denom = (ln_outlier - top).exp();
        for logit in logits.iter_mut() {
            *logit = (*logit - top).exp();
            denom += *logit;
        }
        if !denom.is_finite() {
            continue;
        }
        for (row, &e) in logits.iter().enumerate() {
            p[(row, col)] = e / denom;
        }
    }
    p
}

/// Solves `(d(P1) G + s a I + s g H G) W = P X - (d(P1) + s g H) Y`
/// with `s = sigma2`, `a = alpha`, `g = gamma`.
pub fn m_step_solve_w(
    p: &DMatrix<f64>,
    x: &Points,
    y_prev: &Points,
    ws: &EmWorkspace,
    sigma2: f64,
    alpha: f64,
    gamma: f64,
) -> Result<Points> {
    let m = y_prev.nrows();
    let p1: DVector<f64> = p.column_sum();
    let mut a = &ws.h * &ws.g * (sigma2 * gamma);
    let mut rhs: Points = p * x - &ws.h * y_prev * (sigma2 * gamma);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] += p1[i] * ws.g[(i, j)];
        }
        a[(i, i)] += sigma2 * alpha;
        for c in 0..3 {
            rhs[(i, c)] -= p1[i] * y_prev[(i, c)];
        }
    }
    let w = a.lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    Ok(w)
}

/// Closed-form variance update, evaluated term by term as six traces.
pub fn update_sigma2(
    p: &DMatrix<f64>,
    x: &Points,
    y_prev: &Points,
    g: &DMatrix<f64>,
    w: &Points,
) -> Result<f64> {
    let n_p = p.sum();
    if !(n_p > 0.0) {
        return Err(Error::TotalOcclusion);
    }
    let p1 = p.column_sum();
    let pt1 = p.row_sum();
    let px: Points = p * x;
    let gw: Points = g * w;

    let x_term: f64 = (0..x.nrows()).map(|n| pt1[n] * point(x, n).norm_squared()).sum();
    let y_px = y_prev.component_mul(&px).sum();
    let gw_px = gw.component_mul(&px).sum();
    let y_y: f64 = (0..y_prev.nrows()).map(|m| p1[m] * point(y_prev, m).norm_squared()).sum();
    let gw_y: f64 = (0..y_prev.nrows()).map(|m| p1[m] * point(&gw, m).dot(&point(y_prev, m))).sum();
    let gw_gw: f64 = (0..y_prev.nrows()).map(|m| p1[m] * point(&gw, m).norm_squared()).sum();

    let total = x_term - 2.0 * y_px - 2.0 * gw_px + y_y + 2.0 * gw_y + gw_gw;
    Ok((total / (n_p * 3.0)).max(SIGMA2_FLOOR))
}

/// Mean squared deviation from the centroid, averaged over the three axes.
pub fn pooled_variance(x: &Points) -> f64 {
    let n = x.nrows();
    if n == 0 {
        return 0.0;
    }
    let mean = x.row_mean();
    let mut acc = 0.0;
    for r in 0..n {
        for c in 0..3 {
            let d = x[(r, c)] - mean[c];
            acc += d * d;
        }
    }
    acc / (3.0 * n as f64)
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub vertices: Points,
    pub sigma2: f64,
    pub posteriors: DMatrix<f64>,
    pub iterations: usize,
}

/// Registers `y_prev` to `cloud`. The loop runs while the variance is above
/// `epsilon`, stopping early when the variance stalls (`sigma2_tol`) or
/// after `max_em_iters` iterations. `ws.g` and `ws.w` are overwritten.
pub fn cpd_em(
    cloud: &Points,
    y_prev: &Points,
    ws: &mut EmWorkspace,
    params: &Parameters,
    prior: &VisibilityPrior,
) -> Result<EmOutcome> {
    let (m, n) = (y_prev.nrows(), cloud.nrows());
    if n == 0 {
        return Err(Error::TotalOcclusion);
    }
    if prior.len() != m || ws.num_vertices() != m {
        return Err(Error::InvalidInput(format!(
            "state has {m} vertices, prior {} and workspace {}",
            prior.len(),
            ws.num_vertices()
        )));
    }

    ws.g = gaussian_kernel(y_prev, params.beta);
    ws.w = Points::zeros(m);
    let mut sigma2 = pooled_variance(cloud);
    let mut y = y_prev.clone();
    let mut posteriors = DMatrix::zeros(m, n);
    let mut iterations = 0;

    while sigma2 > params.epsilon && iterations < params.max_em_iters {
        posteriors = e_step(cloud, &y, sigma2, params.omega, prior);
        ws.w = m_step_solve_w(&posteriors, cloud, y_prev, ws, sigma2, params.alpha, params.gamma)?;
        let next = update_sigma2(&posteriors, cloud, y_prev, &ws.g, &ws.w)?;
        y = y_prev + &ws.g * &ws.w;
        iterations += 1;
        let change = (next - sigma2).abs();
        sigma2 = next;
        if change < params.sigma2_tol {
            break;
        }
    }

    Ok(EmOutcome { vertices: y, sigma2, posteriors, iterations })
}
