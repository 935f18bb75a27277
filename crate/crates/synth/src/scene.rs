//! Scene scripts: the object, how it is driven, the occluder, the camera and
//! the table. World frame is z-up with the table top at `table.height`.

use nalgebra::{Matrix3, Vector3};
use occtrack::{CameraIntrinsics, Points};
use serde::{Deserialize, Serialize};

use crate::SynthError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectSpec {
    /// A chain of `vertices` particles. The centerline turns by
    /// `bend · sin(2π · waves · s)` radians at arc-length fraction `s`,
    /// starting from `heading`, and is centered on `center` in the table plane.
    Rope { vertices: usize, length: f64, radius: f64, center: [f64; 2], heading: f64, bend: f64, waves: f64 },
    /// A `rows × cols` particle grid with spacing `cell`, lying flat.
    Cloth { rows: usize, cols: usize, cell: f64, center: [f64; 2], heading: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: f64,
    pub offset: [f64; 3],
}

/// Piecewise smoothstep between keyframes, held constant outside them.
pub fn interpolate(keys: &[Keyframe], t: f64) -> Vector3<f64> {
    let v = |k: &Keyframe| Vector3::from(k.offset);
    match keys {
        [] => Vector3::zeros(),
        [first, ..] if t <= first.frame => v(first),
        [.., last] if t >= last.frame => v(last),
        _ => {
            let i = keys.windows(2).position(|w| t < w[1].frame).unwrap();
            let (a, b) = (&keys[i], &keys[i + 1]);
            let s = ((t - a.frame) / (b.frame - a.frame)).clamp(0.0, 1.0);
            let s = s * s * (3.0 - 2.0 * s);
            v(a) + (v(b) - v(a)) * s
        }
    }
}

/// A kinematically driven particle: initial position plus the keyframed offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandlePath {
    pub vertex: usize,
    pub keyframes: Vec<Keyframe>,
}

/// An axis-aligned box whose center follows `keyframes` (absolute world
/// positions in `offset`) and exists only for frames `active[0]..=active[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccluderSpec {
    pub half_extents: [f64; 3],
    pub keyframes: Vec<Keyframe>,
    pub active: [usize; 2],
}

impl OccluderSpec {
    pub fn center_at(&self, t: usize) -> Option<Vector3<f64>> {
        (self.active[0] <= t && t <= self.active[1]).then(|| interpolate(&self.keyframes, t as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub intrinsics: CameraIntrinsics,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
}

/// Rigid camera pose; camera axes are x right, y down, z forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    /// Columns are the camera axes in world coordinates.
    pub rotation: Matrix3<f64>,
}

impl CameraPose {
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.position)
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.position
    }

    pub fn points_to_camera(&self, world: &Points) -> Points {
        let mut out = world.clone();
        for r in 0..world.nrows() {
            let c = self.world_to_camera(&occtrack::point(world, r));
            occtrack::set_point(&mut out, r, &c);
        }
        out
    }
}

impl CameraSpec {
    pub fn pose(&self) -> Result<CameraPose, SynthError> {
        let position = Vector3::from(self.position);
        let forward = (Vector3::from(self.look_at) - position)
            .try_normalize(1e-12)
            .ok_or_else(|| SynthError::Invalid("camera look_at equals position".into()))?;
        let right = forward
            .cross(&Vector3::from(self.up))
            .try_normalize(1e-12)
            .ok_or_else(|| SynthError::Invalid("camera up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        Ok(CameraPose { position, rotation: Matrix3::from_columns(&[right, down, forward]) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub height: f64,
    pub half_extents: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsSpec {
    pub fps: f64,
    pub substeps: usize,
    pub sweeps: usize,
    pub gravity: f64,
    /// Fraction of tangential motion removed per substep for particles
    /// resting on the table.
    pub friction: f64,
    /// Fraction of velocity removed per substep.
    pub damping: f64,
}

impl Default for PhysicsSpec {
    fn default() -> Self {
        Self { fps: 30.0, substeps: 20, sweeps: 10, gravity: 9.81, friction: 0.3, damping: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub object: ObjectSpec,
    #[serde(default)]
    pub handles: Vec<HandlePath>,
    #[serde(default)]
    pub occluder: Option<OccluderSpec>,
    pub noise_sigma: f64,
    pub frames: usize,
    pub camera: CameraSpec,
    #[serde(default)]
    pub table: Option<TableSpec>,
    #[serde(default)]
    pub physics: PhysicsSpec,
    /// Write each frame's handle positions as pinned correspondences.
    #[serde(default)]
    pub correspondences: bool,
    pub seed: u64,
}

impl SceneScript {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.into()));
        if self.frames == 0 {
            return bad("frame count must be at least 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be >= 0");
        }
        self.camera.intrinsics.validate().map_err(|e| SynthError::Invalid(e.to_string()))?;
        self.camera.pose()?;
        let n = match &self.object {
            ObjectSpec::Rope { vertices, length, radius, .. } => {
                if *vertices < 2 || !(*length > 0.0) || !(*radius > 0.0) {
                    return bad("rope needs >= 2 vertices, positive length and radius");
                }
                *vertices
            }
            ObjectSpec::Cloth { rows, cols, cell, .. } => {
                if *rows < 2 || *cols < 2 || !(*cell > 0.0) {
                    return bad("cloth needs at least 2x2 vertices and a positive cell");
                }
                rows * cols
            }
        };
        if self.handles.iter().any(|h| h.vertex >= n) {
            return bad("handle vertex out of range");
        }
        for keys in self.handles.iter().map(|h| &h.keyframes).chain(self.occluder.iter().map(|o| &o.keyframes)) {
            if keys.windows(2).any(|w| !(w[1].frame > w[0].frame)) {
                return bad("keyframes must have increasing frame numbers");
            }
        }
        if let Some(o) = &self.occluder {
            if o.half_extents.iter().any(|&h| !(h > 0.0)) || o.active[0] > o.active[1] {
                return bad("occluder needs positive extents and an ordered active range");
            }
        }
        let p = &self.physics;
        if !(p.fps > 0.0) || p.substeps == 0 || !(0.0..=1.0).contains(&p.friction) || !(0.0..1.0).contains(&p.damping) {
            return bad("physics needs fps > 0, substeps >= 1, friction and damping in [0, 1)");
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        match &self.object {
            ObjectSpec::Rope { vertices, .. } => *vertices,
            ObjectSpec::Cloth { rows, cols, .. } => rows * cols,
        }
    }

    pub fn table_height(&self) -> f64 {
        self.table.as_ref().map_or(0.0, |t| t.height)
    }

    /// Half-thickness that keeps the object resting on the table.
    pub fn rest_offset(&self) -> f64 {
        match &self.object {
            ObjectSpec::Rope { radius, .. } => *radius,
            ObjectSpec::Cloth { .. } => CLOTH_LIFT,
        }
    }

    /// Template vertices (world frame) and the tracked edge list.
    pub fn initial_model(&self) -> (Points, Vec<[usize; 2]>) {
        let z = self.table_height() + self.rest_offset();
        match &self.object {
            ObjectSpec::Rope { vertices, length, center, heading, bend, waves, .. } => {
                let n = *vertices;
                let seg = length / (n - 1) as f64;
                let mut pts = vec![Vector3::new(0.0, 0.0, z)];
                for i in 1..n {
                    // heading at the midpoint of the segment
                    let s = (i as f64 - 0.5) / (n - 1) as f64;
                    let th = heading + bend * (2.0 * std::f64::consts::PI * waves * s).sin();
                    pts.push(pts[i - 1] + Vector3::new(th.cos(), th.sin(), 0.0) * seg);
                }
                let mean = pts.iter().sum::<Vector3<f64>>() / n as f64;
                let shift = Vector3::new(center[0] - mean.x, center[1] - mean.y, 0.0);
                let points = Points::from_fn(n, |r, c| pts[r][c] + shift[c]);
                (points, (0..n - 1).map(|i| [i, i + 1]).collect())
            }
            ObjectSpec::Cloth { rows, cols, cell, center, heading } => {
                let (rows, cols) = (*rows, *cols);
                let (s, c) = heading.sin_cos();
                let points = Points::from_fn(rows * cols, |v, k| {
                    let x = ((v % cols) as f64 - (cols - 1) as f64 / 2.0) * cell;
                    let y = ((v / cols) as f64 - (rows - 1) as f64 / 2.0) * cell;
                    match k {
                        0 => center[0] + c * x - s * y,
                        1 => center[1] + s * x + c * y,
                        _ => z,
                    }
                });
                (points, cloth_edges(rows, cols, false))
            }
        }
    }
}

/// Cloth rests slightly above the table so its triangles never tie with it.
pub const CLOTH_LIFT: f64 = 0.002;

/// Structural grid edges, plus both diagonals of every cell with `shear`.
pub fn cloth_edges(rows: usize, cols: usize, shear: bool) -> Vec<[usize; 2]> {
    let idx = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push([idx(r, c), idx(r, c + 1)]);
            }
            if r + 1 < rows {
                edges.push([idx(r, c), idx(r + 1, c)]);
            }
            if shear && r + 1 < rows && c + 1 < cols {
                edges.push([idx(r, c), idx(r + 1, c + 1)]);
                edges.push([idx(r, c + 1), idx(r + 1, c)]);
            }
        }
    }
    edges
}

pub fn default_camera(width: usize, height: usize) -> CameraSpec {
    // 830 px focal length at 960 wide, scaled with the raster
    let f = 830.0 * width as f64 / 960.0;
    CameraSpec {
        intrinsics: CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        },
        position: [0.0, -0.75, 1.0],
        look_at: [0.0, 0.05, 0.0],
        up: [0.0, 0.0, 1.0],
    }
}

fn key(frame: f64, offset: [f64; 3]) -> Keyframe {
    Keyframe { frame, offset }
}

fn desk_rope() -> ObjectSpec {
    ObjectSpec::Rope {
        vertices: 50,
        length: 1.0,
        radius: 0.004,
        center: [0.0, 0.0],
        heading: 0.0,
        bend: 0.6,
        waves: 1.0,
    }
}

fn desk_scene(object: ObjectSpec) -> SceneScript {
    SceneScript {
        object,
        handles: Vec::new(),
        occluder: None,
        noise_sigma: 0.002,
        frames: 90,
        camera: default_camera(960, 540),
        table: Some(TableSpec { height: 0.0, half_extents: [0.8, 0.6] }),
        physics: PhysicsSpec::default(),
        correspondences: false,
        seed: 0,
    }
}

pub const PRESETS: &[&str] = &["static", "drag", "occlusion", "reappear", "fold", "cloth"];

/// Built-in scenes at 960×540:
/// - `static`: S-shaped rope at rest
/// - `drag`: one end dragged 0.07 m diagonally over the sequence
/// - `occlusion`: `drag` plus a floating box crossing in front, frames 30–60
/// - `reappear`: the rope is carried 0.05 m away, then back to its start while fully hidden
/// - `fold`: both ends gripped and laid over each other, with correspondences
/// - `cloth`: a cloth sheet with one corner dragged
pub fn preset(name: &str) -> Option<SceneScript> {
    let mut s = desk_scene(desk_rope());
    match name {
        "static" => {}
        "drag" => {
            s.handles = vec![HandlePath {
                vertex: 49,
                keyframes: vec![key(0.0, [0.0; 3]), key(89.0, [-0.05, 0.05, 0.0])],
            }];
        }
        "occlusion" => {
            s = preset("drag")?;
            s.occluder = Some(OccluderSpec {
                half_extents: [0.1, 0.05, 0.05],
                keyframes: vec![key(30.0, [-0.3, -0.15, 0.2]), key(60.0, [0.3, -0.15, 0.2])],
                active: [30, 60],
            });
        }
        "reappear" => {
            // carried away slowly in view, then back while a panel hides it
            s.frames = 90;
            let away = [0.0, 0.05, 0.0];
            let path = vec![key(0.0, [0.0; 3]), key(8.0, [0.0; 3]), key(56.0, away), key(62.0, away), key(72.0, [0.0; 3])];
            s.handles = (0..50).map(|vertex| HandlePath { vertex, keyframes: path.clone() }).collect();
            s.occluder = Some(OccluderSpec {
                half_extents: [0.7, 0.05, 0.5],
                keyframes: vec![key(0.0, [0.0, -0.3, 0.45])],
                active: [60, 74],
            });
        }
        "fold" => {
            s.object = ObjectSpec::Rope {
                vertices: 50,
                length: 1.0,
                radius: 0.004,
                center: [0.0, 0.0],
                heading: 0.0,
                bend: 0.0,
                waves: 1.0,
            };
            s.correspondences = true;
            s.frames = 60;
            // lift both ends, carry the right end over the left half, lay down
            s.handles = vec![
                HandlePath {
                    vertex: 0,
                    keyframes: vec![key(0.0, [0.0; 3]), key(10.0, [0.0, 0.0, 0.1]), key(50.0, [0.25, 0.0, 0.1]), key(59.0, [0.25, 0.0, 0.02])],
                },
                HandlePath {
                    vertex: 49,
                    keyframes: vec![key(0.0, [0.0; 3]), key(10.0, [0.0, 0.0, 0.1]), key(50.0, [-0.75, 0.03, 0.1]), key(59.0, [-0.75, 0.03, 0.02])],
                },
            ];
        }
        "cloth" => {
            s.object = ObjectSpec::Cloth { rows: 12, cols: 16, cell: 0.03, center: [0.0, 0.0], heading: 0.0 };
            s.handles = vec![HandlePath {
                vertex: 15,
                keyframes: vec![key(0.0, [0.0; 3]), key(89.0, [0.1, 0.15, 0.08])],
            }];
        }
        _ => return None,
    }
    Some(s)
}

/// Same scene on a raster scaled by `factor` (intrinsics scale with it).
pub fn with_resolution(mut script: SceneScript, width: usize, height: usize) -> SceneScript {
    let mut cam = default_camera(width, height);
    cam.position = script.camera.position;
    cam.look_at = script.camera.look_at;
    cam.up = script.camera.up;
    let k = &script.camera.intrinsics;
    let sx = width as f64 / k.width as f64;
    let sy = height as f64 / k.height as f64;
    cam.intrinsics.fx = k.fx * sx;
    cam.intrinsics.fy = k.fy * sy;
    cam.intrinsics.cx = (k.cx + 0.5) * sx - 0.5;
    cam.intrinsics.cy = (k.cy + 0.5) * sy - 0.5;
    script.camera = cam;
    script
}
