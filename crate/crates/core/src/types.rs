//! Domain records shared across the tracker: the template model, camera,
//! per-frame observations, tracker state, known correspondences and the
//! tuning parameters.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, Dyn, OMatrix, Vector3, U3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Row-major list of 3D points stored as an `n × 3` matrix (meters).
pub type Points = OMatrix<f64, Dyn, U3>;

#[inline]
pub fn point(points: &Points, i: usize) -> Vector3<f64> {
    Vector3::new(points[(i, 0)], points[(i, 1)], points[(i, 2)])
}

#[inline]
pub fn set_point(points: &mut Points, i: usize, p: &Vector3<f64>) {
    points[(i, 0)] = p.x;
    points[(i, 1)] = p.y;
    points[(i, 2)] = p.z;
}

pub fn points_from_rows(rows: &[[f64; 3]]) -> Points {
    Points::from_fn(rows.len(), |r, c| rows[r][c])
}

pub fn points_to_rows(points: &Points) -> Vec<[f64; 3]> {
    (0..points.nrows())
        .map(|r| [points[(r, 0)], points[(r, 1)], points[(r, 2)]])
        .collect()
}

/// Serde adapter: `n × 3` matrix as `[[x, y, z], ...]`.
pub mod serde_points {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Points, s: S) -> std::result::Result<S::Ok, S::Error> {
        points_to_rows(p).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Points, D::Error> {
        let rows = Vec::<[f64; 3]>::deserialize(d)?;
        Ok(points_from_rows(&rows))
    }
}

/// Serde adapter: dense matrix as a list of rows.
pub mod serde_dmatrix {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        (m.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let (ncols, rows) = <(usize, Vec<Vec<f64>>)>::deserialize(d)?;
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
    }
}

/// The tracked template: vertex positions of the first frame and the fixed
/// edge list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedModel {
    #[serde(with = "serde_points")]
    pub vertices: Points,
    pub edges: Vec<[usize; 2]>,
}

/// One violated model invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TooFewVertices(usize),
    NoEdges,
    IndexOutOfRange { edge: usize },
    SelfEdge { edge: usize },
    DuplicateEdge { edge: usize },
    Disconnected { components: usize },
    NonFinite { vertex: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewVertices(m) => write!(f, "too-few-vertices ({m} < 2)"),
            Violation::NoEdges => write!(f, "no-edges"),
            Violation::IndexOutOfRange { edge } => write!(f, "index-out-of-range (edge {edge})"),
            Violation::SelfEdge { edge } => write!(f, "self-edge (edge {edge})"),
            Violation::DuplicateEdge { edge } => write!(f, "duplicate-edge (edge {edge})"),
            Violation::Disconnected { components } => {
                write!(f, "disconnected ({components} components)")
            }
            Violation::NonFinite { vertex } => write!(f, "non-finite vertex {vertex}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            let msg: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidModel(msg.join("; ")))
        }
    }
}

pub fn validate_model(model: &TrackedModel) -> ValidationReport {
    let mut violations = Vec::new();
    let m = model.vertices.nrows();
    if m < 2 {
        violations.push(Violation::TooFewVertices(m));
    }
    if model.edges.is_empty() {
        violations.push(Violation::NoEdges);
    }
    for i in 0..m {
        if !point(&model.vertices, i).iter().all(|v| v.is_finite()) {
            violations.push(Violation::NonFinite { vertex: i });
        }
    }

    let mut seen = HashSet::new();
    let mut adjacency = vec![Vec::new(); m];
    for (k, &[i, j]) in model.edges.iter().enumerate() {
        if i >= m || j >= m {
            violations.push(Violation::IndexOutOfRange { edge: k });
            continue;
        }
        if i == j {
            violations.push(Violation::SelfEdge { edge: k });
            continue;
        }
        if !seen.insert((i.min(j), i.max(j))) {
            violations.push(Violation::DuplicateEdge { edge: k });
            continue;
        }
        adjacency[i].push(j);
        adjacency[j].push(i);
    }

    if m > 0 {
        let components = count_components(&adjacency);
        if components > 1 {
            violations.push(Violation::Disconnected { components });
        }
    }
    ValidationReport { violations }
}

fn count_components(adjacency: &[Vec<usize>]) -> usize {
    let mut label = vec![false; adjacency.len()];
    let mut components = 0;
    for start in 0..adjacency.len() {
        if label[start] {
            continue;
        }
        components += 1;
        label[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &n in &adjacency[v] {
                if !label[n] {
                    label[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    components
}

impl TrackedModel {
    pub fn new(vertices: Points, edges: Vec<[usize; 2]>) -> Result<Self> {
        let model = Self { vertices, edges };
        validate_model(&model).into_result()?;
        Ok(model)
    }

    /// A straight chain of `m` vertices from `start` to `end`.
    pub fn rope(start: Vector3<f64>, end: Vector3<f64>, m: usize) -> Self {
        let vertices = Points::from_fn(m, |r, c| {
            let s = if m > 1 { r as f64 / (m - 1) as f64 } else { 0.0 };
            start[c] + s * (end[c] - start[c])
        });
        let edges = (0..m.saturating_sub(1)).map(|i| [i, i + 1]).collect();
        Self { vertices, edges }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.nrows()
    }

    /// Template length of every edge.
    pub fn rest_lengths(&self) -> Vec<f64> {
        self.edges
            .iter()
            .map(|&[i, j]| (point(&self.vertices, i) - point(&self.vertices, j)).norm())
            .collect()
    }
}

/// Pinhole camera parameters. Pixel `(u, v)` is column `u`, row `v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid camera intrinsics {self:?}")))
        }
    }
}

/// One time step as seen by the tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    /// Meters; 0 or NaN means no return.
    pub depth: Image<f32>,
    pub mask: Image<bool>,
    pub intrinsics: CameraIntrinsics,
    #[serde(with = "serde_points")]
    pub cloud: Points,
    /// Pixels to the nearest mask pixel.
    pub distance_image: Image<f64>,
}

/// Current estimate plus the by-products of the last EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingState {
    #[serde(with = "serde_points")]
    pub vertices: Points,
    pub sigma2: f64,
    #[serde(with = "serde_dmatrix")]
    pub posteriors: DMatrix<f64>,
    pub frame_index: i64,
}

impl TrackingState {
    pub fn initial(model: &TrackedModel) -> Self {
        Self {
            vertices: model.vertices.clone(),
            sigma2: 0.0,
            posteriors: DMatrix::zeros(model.num_vertices(), 0),
            frame_index: -1,
        }
    }
}

/// Known vertex positions, e.g. gripper points. `pairs[i] = [vertex, point]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    #[serde(with = "serde_points")]
    pub points: Points,
    pub pairs: Vec<[usize; 2]>,
}

impl CorrespondenceSet {
    pub fn empty() -> Self {
        Self { points: Points::zeros(0), pairs: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, num_vertices: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for &[m, k] in &self.pairs {
            if m >= num_vertices || k >= self.points.nrows() {
                return Err(Error::InvalidInput(format!(
                    "correspondence ({m}, {k}) out of range"
                )));
            }
            if !seen.insert(m) {
                return Err(Error::InvalidInput(format!("vertex {m} pinned twice")));
            }
        }
        Ok(())
    }

    /// Pinned position per vertex.
    pub fn pinned_positions(&self, num_vertices: usize) -> Vec<Option<Vector3<f64>>> {
        let mut pins = vec![None; num_vertices];
        for &[m, k] in &self.pairs {
            pins[m] = Some(point(&self.points, k));
        }
        pins
    }
}

/// Tuning parameters. Field names match `params.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Parameters {
    /// Maximum edge stretch ratio relative to the template.
    pub lambda_stretch: f64,
    /// Gaussian kernel width of the displacement field (meters).
    pub beta: f64,
    /// Weight of the locally-linear topology term.
    pub gamma: f64,
    /// Weight of the motion-coherence term.
    pub alpha: f64,
    /// Outlier mixture weight.
    pub omega: f64,
    /// Free-space energy threshold above which recovery runs.
    pub tau: f64,
    pub k_vis: f64,
    pub k_free: f64,
    /// EM stops once the variance drops to this value (meters²).
    pub epsilon: f64,
    pub lle_neighbors: usize,
    pub knn_retries: usize,
    pub cloud_points: usize,
    pub max_em_iters: usize,
    /// EM also stops once the variance changes by less than this.
    pub sigma2_tol: f64,
    /// Voxel edge used to thin the cloud before random selection (meters).
    pub voxel_size: f64,
    /// Edge-length tolerance of the stretch projection (meters).
    pub projection_tol: f64,
}

impl Default for Parameters {
    fn default() -> Self {
        Self {
            lambda_stretch: 3.0,
            beta: 1.0,
            gamma: 1.0,
            alpha: 1.0e7,
            omega: 0.1,
            tau: 0.7,
            k_vis: 10.0,
            k_free: 100.0,
            epsilon: 1e-4,
            lle_neighbors: 8,
            knn_retries: 12,
            cloud_points: 300,
            max_em_iters: 100,
            sigma2_tol: 1e-8,
            voxel_size: 0.004,
            projection_tol: 1e-6,
        }
    }
}

impl Parameters {
    /// Defaults for cloth, which uses a denser cloud.
    pub fn cloth() -> Self {
        Self { cloud_points: 600, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        if !(self.lambda_stretch >= 1.0) {
            bad.push("lambda_stretch must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.omega) {
            bad.push("omega must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            bad.push("tau must be in [0, 1]".into());
        }
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("k_vis", self.k_vis),
            ("k_free", self.k_free),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be > 0"));
            }
        }
        if self.lle_neighbors == 0 {
            bad.push("lle_neighbors must be >= 1".into());
        }
        if self.cloud_points == 0 {
            bad.push("cloud_points must be >= 1".into());
        }
        if !(self.sigma2_tol >= 0.0) || !(self.voxel_size >= 0.0) || !(self.projection_tol >= 0.0) {
            bad.push("tolerances must be >= 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameters(bad.join("; ")))
        }
    }
}

/// Which optional stages of the pipeline run. All enabled by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub visibility_prior: bool,
    pub lle: bool,
    pub constraint: bool,
    pub recovery: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self { visibility_prior: true, lle: true, constraint: true, recovery: true }
    }
}
