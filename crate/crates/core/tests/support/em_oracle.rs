//! The M-step and variance update against brute-force oracles on tiny
//! random instances (3 centroids, 4 points). Shared by `tests/em_oracle.rs`
//! and the CLI acceptance suite.
//!
//! The M-step oracle never looks at the normal equations: the objective is
//! evaluated directly as a sum over centroid/point pairs plus the two
//! regularizers, its quadratic model is recovered from function values
//! alone, and the minimizer of that model is compared with `m_step_solve_w`.

use nalgebra::{DMatrix, DVector};
use occtrack::gmm::{gaussian_kernel, m_step_solve_w, update_sigma2, EmWorkspace};
use occtrack::{point, Points};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const M: usize = 3;
const N: usize = 4;

struct Instance {
    x: Points,
    y0: Points,
    y_prev: Points,
    p: DMatrix<f64>,
    sigma2: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = |n: usize, rng: &mut ChaCha8Rng| Points::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let y0 = pts(M, &mut rng);
    let y_prev = &y0 + pts(M, &mut rng) * 0.2;
    let x = pts(N, &mut rng);
    // columns sum to at most one, as posteriors with an outlier term do
    let mut p = DMatrix::from_fn(M, N, |_, _| rng.random_range(0.05..1.0));
    for mut col in p.column_iter_mut() {
        let s = col.sum() / rng.random_range(0.5..1.0);
        col /= s;
    }
    Instance {
        x,
        y0,
        y_prev,
        p,
        sigma2: rng.random_range(0.05..1.0),
        alpha: rng.random_range(0.1..5.0),
        beta: rng.random_range(0.3..2.0),
        gamma: rng.random_range(0.0..5.0),
    }
}

/// Negative log-likelihood bound plus coherence and topology penalties, as
/// a function of the displacement coefficients.
fn objective(inst: &Instance, g: &DMatrix<f64>, h: &DMatrix<f64>, w: &Points) -> f64 {
    let y = &inst.y_prev + g * w;
    let mut fit = 0.0;
    for m in 0..M {
        for n in 0..N {
            fit += inst.p[(m, n)] * (point(&inst.x, n) - point(&y, m)).norm_squared();
        }
    }
    let coherence = (w.transpose() * g * w).trace();
    let topology = (y.transpose() * h * &y).trace();
    fit / (2.0 * inst.sigma2) + 0.5 * inst.alpha * coherence + 0.5 * inst.gamma * topology
}

fn unit(k: usize) -> Points {
    let mut e = Points::zeros(M);
    e[(k / 3, k % 3)] = 1.0;
    e
}

/// Minimizer of the objective from function values only. The objective is
/// quadratic in W, so differences with unit steps recover its gradient and
/// Hessian exactly up to rounding.
fn numerical_minimizer(inst: &Instance, g: &DMatrix<f64>, h: &DMatrix<f64>) -> Points {
    let d = 3 * M;
    let f = |w: &Points| objective(inst, g, h, w);
    let zero = Points::zeros(M);
    let f0 = f(&zero);
    let mut hess = DMatrix::zeros(d, d);
    let mut grad = DVector::zeros(d);
    for i in 0..d {
        let ei = unit(i);
        grad[i] = 0.5 * (f(&ei) - f(&-&ei));
        for j in 0..d {
            let ej = unit(j);
            hess[(i, j)] = f(&(&ei + &ej)) - f(&ei) - f(&ej) + f0;
        }
    }
    let step = hess.lu().solve(&(-grad)).expect("objective is strictly convex");
    Points::from_fn(M, |r, c| step[3 * r + c])
}

/// Largest coefficient gap between `m_step_solve_w` and the numerical
/// minimizer, or a description of a failed minimum check.
pub fn m_step_deviation(seed: u64) -> Result<f64, String> {
    let inst = instance(seed);
    let mut ws = EmWorkspace::new(&inst.y0, 2).map_err(|e| e.to_string())?;
    ws.g = gaussian_kernel(&inst.y_prev, inst.beta);
    let w = m_step_solve_w(&inst.p, &inst.x, &inst.y_prev, &ws, inst.sigma2, inst.alpha, inst.gamma)
        .map_err(|e| e.to_string())?;
    let w_ref = numerical_minimizer(&inst, &ws.g, &ws.h);
    // and it is a minimum: every coordinate nudge raises the objective
    let q = objective(&inst, &ws.g, &ws.h, &w);
    for k in 0..3 * M {
        for s in [1e-3, -1e-3] {
            if objective(&inst, &ws.g, &ws.h, &(&w + unit(k) * s)) <= q {
                return Err(format!("seed {seed}: nudging coefficient {k} by {s} does not raise the objective"));
            }
        }
    }
    Ok((&w - &w_ref).abs().max())
}

/// Gap between the trace-form variance and the direct double sum.
pub fn variance_deviation(seed: u64) -> Result<f64, String> {
    let inst = instance(1_000_000 + seed);
    let g = gaussian_kernel(&inst.y_prev, inst.beta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Points::from_fn(M, |_, _| rng.random_range(-0.5..0.5));
    let y = &inst.y_prev + &g * &w;
    let mut direct = 0.0;
    for m in 0..M {
        for n in 0..N {
            direct += inst.p[(m, n)] * (point(&inst.x, n) - point(&y, m)).norm_squared();
        }
    }
    direct /= 3.0 * inst.p.sum();
    let traced = update_sigma2(&inst.p, &inst.x, &inst.y_prev, &g, &w).map_err(|e| e.to_string())?;
    Ok((traced - direct).abs())
}
