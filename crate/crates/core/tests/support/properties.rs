//! Seeded property checks with brute-force oracles. Each check builds one
//! random instance from `seed` and returns a description of the first
//! violation. `tests/properties.rs` drives them with proptest; the CLI
//! acceptance suite runs them over fixed seed ranges.

use nalgebra::Vector3;
use occtrack::gmm::{e_step, nearest_neighbors, VisibilityPrior};
use occtrack::image::{distance_transform, Image};
use occtrack::projection::{feasibility_report, project, ProjectionProblem};
use occtrack::recovery::{free_space_energy, DescriptorLibrary, ShapeDescriptor, DESCRIPTOR_LEN};
use occtrack::{point, CameraIntrinsics, CorrespondenceSet, FrameObservation, Points, TrackedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = fn(u64) -> Result<(), String>;

/// Every check, by name.
pub const ALL: [(&str, Check); 6] = [
    ("posterior column mass in [0, 1]", posterior_column_mass),
    ("omega = 0 gives the plain mixture posterior", omega_zero_is_plain_mixture),
    ("distance transform equals brute force on 32x32", edt_matches_brute_force),
    ("kNN queries equal brute force", knn_matches_brute_force),
    ("free-space energy monotone in violation", free_space_monotone),
    ("projection is idempotent", projection_idempotent),
];

fn random_points(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Points {
    Points::from_fn(n, |_, _| rng.random_range(-half..half))
}

fn random_prior(rng: &mut ChaCha8Rng, m: usize) -> VisibilityPrior {
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
    VisibilityPrior::from_unnormalized(&raw)
}

fn gauss(x: &Vector3<f64>, y: &Vector3<f64>, sigma2: f64) -> f64 {
    (-(x - y).norm_squared() / (2.0 * sigma2)).exp() / (2.0 * std::f64::consts::PI * sigma2).powf(1.5)
}

pub fn posterior_column_mass(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (rng.random_range(1..12), rng.random_range(1..30));
    let y = random_points(&mut rng, m, 1.0);
    let x = random_points(&mut rng, n, 1.0);
    // includes variances small enough to underflow every Gaussian
    let sigma2 = 10f64.powf(rng.random_range(-6.0..0.0));
    let omega = rng.random_range(0.0..0.99);
    let p = e_step(&x, &y, sigma2, omega, &random_prior(&mut rng, m));
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(format!("negative or non-finite posterior (sigma2 {sigma2:e}, omega {omega})"));
    }
    for (c, col) in p.column_iter().enumerate() {
        let s = col.sum();
        if s > 1.0 + 1e-12 {
            return Err(format!("column {c} sums to {s}"));
        }
    }
    Ok(())
}

/// At omega = 0 each column is the prior-weighted Gaussian responsibility,
/// and at omega > 0 the deficit from one is the outlier share. Both are
/// evaluated here from densities directly, without log-space tricks.
pub fn omega_zero_is_plain_mixture(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (rng.random_range(1..10), rng.random_range(1..20));
    let y = random_points(&mut rng, m, 0.5);
    let x = random_points(&mut rng, n, 0.5);
    let sigma2 = rng.random_range(0.02..0.5);
    let prior = random_prior(&mut rng, m);
    for omega in [0.0, rng.random_range(0.01..0.9)] {
        let p = e_step(&x, &y, sigma2, omega, &prior);
        for j in 0..n {
            let xn = point(&x, j);
            let inlier: Vec<f64> =
                (0..m).map(|i| (1.0 - omega) * prior.weights[i] * gauss(&xn, &point(&y, i), sigma2)).collect();
            let total: f64 = inlier.iter().sum::<f64>() + omega / n as f64;
            for i in 0..m {
                let want = inlier[i] / total;
                if (p[(i, j)] - want).abs() > 1e-12 {
                    return Err(format!("omega {omega}: P[{i},{j}] = {} vs {want}", p[(i, j)]));
                }
            }
        }
    }
    Ok(())
}

pub fn edt_matches_brute_force(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density = rng.random_range(0.001..0.5);
    let mut data: Vec<bool> = (0..32 * 32).map(|_| rng.random_bool(density)).collect();
    data[rng.random_range(0..32 * 32)] = true;
    let mask = Image::from_vec(32, 32, data).map_err(|e| e.to_string())?;
    let d = distance_transform(&mask);
    let on: Vec<(f64, f64)> = (0..32 * 32).filter(|&i| mask.data[i]).map(|i| ((i % 32) as f64, (i / 32) as f64)).collect();
    for v in 0..32 {
        for u in 0..32 {
            let want = on
                .iter()
                .map(|&(a, b)| ((u as f64 - a).powi(2) + (v as f64 - b).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            let got = *d.get(u, v);
            if (got - want).abs() > 1e-9 {
                return Err(format!("pixel ({u},{v}): {got} vs {want}"));
            }
        }
    }
    Ok(())
}

/// Library retrieval and vertex neighborhoods against selection by repeated
/// minimum.
pub fn knn_matches_brute_force(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = rng.random_range(1..40);
    // few distinct histograms, so exact ties occur
    let palette: Vec<Vec<f64>> =
        (0..rng.random_range(1..8)).map(|_| (0..DESCRIPTOR_LEN).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let mut lib = DescriptorLibrary::new();
    for f in 0..size {
        let h = palette[rng.random_range(0..palette.len())].clone();
        lib.add(f as i64, ShapeDescriptor { histogram: h }, Points::zeros(1)).map_err(|e| e.to_string())?;
    }
    let query: Vec<f64> = (0..DESCRIPTOR_LEN).map(|_| rng.random_range(0.0..1.0)).collect();
    let k = rng.random_range(0..size + 3);
    let got: Vec<i64> = lib
        .query_knn(&ShapeDescriptor { histogram: query.clone() }, k)
        .into_iter()
        .map(|(_, e)| e.frame_index)
        .collect();
    let dist = |h: &[f64]| h.iter().zip(&query).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut left: Vec<(f64, i64)> = lib.entries.iter().map(|e| (dist(&e.descriptor.histogram), e.frame_index)).collect();
    let mut want = Vec::new();
    while want.len() < k && !left.is_empty() {
        let mut best = 0;
        for (i, &(d, f)) in left.iter().enumerate() {
            if d < left[best].0 || (d == left[best].0 && f < left[best].1) {
                best = i;
            }
        }
        want.push(left.remove(best).1);
    }
    if got != want {
        return Err(format!("library k={k}: {got:?} vs {want:?}"));
    }

    let m = rng.random_range(2..20);
    let y = Points::from_fn(m, |_, _| rng.random_range(0..4) as f64);
    let v = rng.random_range(0..m);
    let kn = rng.random_range(1..m);
    let got = nearest_neighbors(&y, v, kn);
    let mut others: Vec<usize> = (0..m).filter(|&i| i != v).collect();
    let mut want = Vec::new();
    while want.len() < kn {
        let d = |i: usize| (point(&y, i) - point(&y, v)).norm_squared();
        let pos = (0..others.len()).min_by(|&a, &b| d(others[a]).total_cmp(&d(others[b])).then(others[a].cmp(&others[b]))).unwrap();
        want.push(others.remove(pos));
    }
    if got != want {
        return Err(format!("vertex {v} k={kn}: {got:?} vs {want:?}"));
    }
    Ok(())
}

/// A 64x48 frame looking at a plane at 1 m, masked on its left half.
fn half_masked_frame() -> FrameObservation {
    let intrinsics = CameraIntrinsics { fx: 60.0, fy: 60.0, cx: 31.5, cy: 23.5, width: 64, height: 48 };
    let depth = Image::filled(64, 48, 1.0f32);
    let mut mask = Image::filled(64, 48, false);
    for v in 0..48 {
        for u in 0..32 {
            *mask.get_mut(u, v) = true;
        }
    }
    let distance_image = distance_transform(&mask);
    FrameObservation { depth, mask, intrinsics, cloud: Points::zeros(0), distance_image }
}

/// Pulling any vertex toward the camera along its own pixel ray never lowers
/// the energy, and the energy stays in [0, 1].
pub fn free_space_monotone(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = half_masked_frame();
    let k = &f.intrinsics;
    let m = rng.random_range(1..10);
    let rays: Vec<Vector3<f64>> = (0..m)
        .map(|_| {
            let (u, v) = (rng.random_range(-5.0..70.0), rng.random_range(-5.0..52.0));
            Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
        })
        .collect();
    let z: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.5)).collect();
    let at = |z: &[f64]| Points::from_fn(m, |r, c| rays[r][c] * z[r]);
    let j0 = free_space_energy(&at(&z), &f, 100.0);
    if !(0.0..=1.0).contains(&j0) {
        return Err(format!("energy {j0} outside [0, 1]"));
    }
    let mut closer = z.clone();
    let i = rng.random_range(0..m);
    closer[i] *= rng.random_range(0.2..1.0);
    let j1 = free_space_energy(&at(&closer), &f, 100.0);
    if j1 < j0 - 1e-15 {
        return Err(format!("vertex {i} moved closer: {j0} -> {j1}"));
    }
    Ok(())
}

pub fn projection_idempotent(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..16);
    let model = TrackedModel::rope(Vector3::zeros(), Vector3::new(0.05 * (m - 1) as f64, 0.0, 0.0), m);
    let lambda = rng.random_range(1.0..1.5);
    let target = Points::from_fn(m, |r, c| model.vertices[(r, c)] * rng.random_range(0.5..3.0) + rng.random_range(-0.1..0.1));
    let n_pins = rng.random_range(0..3usize).min(m);
    let mut pairs: Vec<[usize; 2]> = Vec::new();
    for k in 0..n_pins {
        let v = if k == 0 { 0 } else { m - 1 };
        if pairs.iter().all(|p| p[0] != v) {
            pairs.push([v, k]);
        }
    }
    // pins at template positions are always reachable
    let pinned = CorrespondenceSet {
        points: Points::from_fn(pairs.len(), |r, c| model.vertices[(pairs[r][0], c)]),
        pairs: pairs.iter().enumerate().map(|(k, p)| [p[0], k]).collect(),
    };
    let problem = ProjectionProblem::new(target, &model, lambda, pinned);
    let once = project(&problem, 1e-9).map_err(|e| e.to_string())?;
    let report = feasibility_report(&once, &problem, 1e-6);
    if !report.passed {
        return Err(format!("first projection infeasible: {report:?}"));
    }
    let again = project(&ProjectionProblem { target: once.clone(), ..problem }, 1e-9).map_err(|e| e.to_string())?;
    let diff = (&again - &once).amax();
    if diff > 1e-6 {
        return Err(format!("second projection moved a vertex by {diff:e}"));
    }
    Ok(())
}
