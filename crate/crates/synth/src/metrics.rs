use occtrack::image::{project_vertex, Image};
use occtrack::{point, CameraIntrinsics, Points};

/// Mean Euclidean distance between corresponding vertices.
pub fn mean_vertex_error(estimate: &Points, truth: &Points) -> f64 {
    assert_eq!(estimate.nrows(), truth.nrows(), "vertex counts differ");
    let n = estimate.nrows();
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|i| (point(estimate, i) - point(truth, i)).norm()).sum::<f64>() / n as f64
}

/// Fraction of vertices whose projection lands on a mask pixel.
pub fn visible_fraction(truth: &Points, mask: &Image<bool>, k: &CameraIntrinsics) -> f64 {
    let n = truth.nrows();
    if n == 0 {
        return 0.0;
    }
    let seen = (0..n).filter(|&i| project_vertex(&point(truth, i), k).pixel().is_some_and(|(u, v)| *mask.get(u, v))).count();
    seen as f64 / n as f64
}

/// Sample mean and standard deviation (n − 1); the deviation is 0 for one sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
