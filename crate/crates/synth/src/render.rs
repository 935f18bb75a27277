//! Ray-cast depth and mask rendering.
//!
//! Rays leave the camera center through pixel centers with camera-frame
//! direction `((u − cx)/fx, (v − cy)/fy, 1)`, so the ray parameter at a hit
//! is the camera depth. Each primitive is only tested inside its projected
//! bounding box. Pixels with no hit get depth 0. The mask marks pixels whose
//! nearest hit belongs to the tracked object.

use nalgebra::Vector3;
use occtrack::image::Image;
use occtrack::{CameraIntrinsics, Points};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scene::{CameraPose, ObjectSpec, SceneScript};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    Capsule { a: Vector3<f64>, b: Vector3<f64>, radius: f64 },
    Triangle { a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64> },
    /// Axis-aligned in the world frame.
    Cuboid { center: Vector3<f64>, half_extents: Vector3<f64> },
    /// The rectangle `|x| ≤ hx, |y| ≤ hy` at height `z`.
    TableTop { z: f64, half_extents: [f64; 2] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub is_object: bool,
}

impl Shape {
    /// Nearest hit `t > 0` of `o + t d`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Shape::Sphere { center, radius } => sphere_hit(&(o - center), d, radius),
            Shape::Capsule { a, b, radius } => capsule_hit(o, d, &a, &b, radius),
            Shape::Triangle { a, b, c } => triangle_hit(o, d, &a, &b, &c),
            Shape::Cuboid { center, half_extents } => box_hit(&(o - center), d, &half_extents),
            Shape::TableTop { z, half_extents } => {
                if d.z.abs() < 1e-15 {
                    return None;
                }
                let t = (z - o.z) / d.z;
                let p = o + d * t;
                (t > 0.0 && p.x.abs() <= half_extents[0] && p.y.abs() <= half_extents[1]).then_some(t)
            }
        }
    }

    /// Center and radius of a world-frame bounding sphere; `None` for the
    /// table, which is tested at every pixel.
    fn bounding_sphere(&self) -> Option<(Vector3<f64>, f64)> {
        match *self {
            Shape::Sphere { center, radius } => Some((center, radius)),
            Shape::Capsule { a, b, radius } => Some(((a + b) / 2.0, (b - a).norm() / 2.0 + radius)),
            Shape::Triangle { a, b, c } => {
                let m = (a + b + c) / 3.0;
                Some((m, (a - m).norm().max((b - m).norm()).max((c - m).norm())))
            }
            Shape::Cuboid { center, half_extents } => Some((center, half_extents.norm())),
            Shape::TableTop { .. } => None,
        }
    }
}

// `oc` is the ray origin relative to the sphere center
fn sphere_hit(oc: &Vector3<f64>, d: &Vector3<f64>, r: f64) -> Option<f64> {
    let dd = d.dot(d);
    let b = d.dot(oc);
    let c = oc.dot(oc) - r * r;
    let h = b * b - dd * c;
    if h < 0.0 {
        return None;
    }
    let t = (-b - h.sqrt()) / dd;
    (t > 0.0).then_some(t)
}

// Solves |(o + t d − a) − proj_ba(o + t d − a)|² = r² for the cylinder,
// falling back to the end sphere on the side the hit lies beyond.
fn capsule_hit(o: &Vector3<f64>, d: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, r: f64) -> Option<f64> {
    let ba = b - a;
    let oa = o - a;
    let baba = ba.dot(&ba);
    let bard = ba.dot(d);
    let baoa = ba.dot(&oa);
    let qa = baba * d.dot(d) - bard * bard;
    let qb = baba * d.dot(&oa) - baoa * bard;
    let qc = baba * oa.dot(&oa) - baoa * baoa - r * r * baba;
    if qa > 1e-18 {
        let h = qb * qb - qa * qc;
        if h >= 0.0 {
            let t = (-qb - h.sqrt()) / qa;
            let y = baoa + t * bard;
            if t > 0.0 && y > 0.0 && y < baba {
                return Some(t);
            }
        }
    }
    let ta = sphere_hit(&oa, d, r);
    let tb = sphere_hit(&(o - b), d, r);
    match (ta, tb) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    }
}

// Möller–Trumbore, two-sided
fn triangle_hit(o: &Vector3<f64>, d: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-18 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

// slab test; `oc` is the ray origin relative to the box center
fn box_hit(oc: &Vector3<f64>, d: &Vector3<f64>, half: &Vector3<f64>) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if oc[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - oc[k]) / d[k];
        let b = (half[k] - oc[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0 > t1 || t1 <= 0.0 {
        return None;
    }
    Some(if t0 > 0.0 { t0 } else { t1 })
}

/// Inclusive pixel box covering the projection of a camera-frame sphere, or
/// the whole image when the sphere reaches behind the camera.
fn pixel_bounds(c: &Vector3<f64>, r: f64, k: &CameraIntrinsics) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (k.width as f64, k.height as f64);
    if c.z - r <= 1e-6 {
        if c.z + r <= 0.0 {
            return None;
        }
        return Some((0, 0, k.width - 1, k.height - 1));
    }
    // x/z and y/z are extremal at the corners of the sphere's bounding box
    let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for sx in [-r, r] {
        for sy in [-r, r] {
            for sz in [-r, r] {
                let z = c.z + sz;
                let u = k.fx * (c.x + sx) / z + k.cx;
                let v = k.fy * (c.y + sy) / z + k.cy;
                u0 = u0.min(u);
                u1 = u1.max(u);
                v0 = v0.min(v);
                v1 = v1.max(v);
            }
        }
    }
    if u1 < 0.0 || v1 < 0.0 || u0 > w - 1.0 || v0 > h - 1.0 {
        return None;
    }
    let lo = |x: f64| x.floor().max(0.0) as usize;
    let hi = |x: f64, n: usize| (x.ceil() as usize).min(n - 1);
    Some((lo(u0), lo(v0), hi(u1, k.width), hi(v1, k.height)))
}

/// Renders `primitives` (world frame) as seen from `pose`.
pub fn render_primitives(k: &CameraIntrinsics, pose: &CameraPose, primitives: &[Primitive]) -> (Image<f32>, Image<bool>) {
    let mut zbuf = Image::filled(k.width, k.height, f64::INFINITY);
    let mut mask = Image::filled(k.width, k.height, false);
    let ray = |u: usize, v: usize| pose.rotation * Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
    for prim in primitives {
        let bounds = match prim.shape.bounding_sphere() {
            Some((c, r)) => pixel_bounds(&pose.world_to_camera(&c), r, k),
            None => Some((0, 0, k.width - 1, k.height - 1)),
        };
        let Some((u0, v0, u1, v1)) = bounds else { continue };
        for v in v0..=v1 {
            for u in u0..=u1 {
                if let Some(t) = prim.shape.intersect(&pose.position, &ray(u, v)) {
                    let z = zbuf.get_mut(u, v);
                    if t < *z {
                        *z = t;
                        *mask.get_mut(u, v) = prim.is_object;
                    }
                }
            }
        }
    }
    let depth = zbuf.data.iter().map(|&z| if z.is_finite() { z as f32 } else { 0.0 }).collect();
    (Image::from_vec(k.width, k.height, depth).expect("same shape"), mask)
}

/// Object, table and (when active) occluder primitives at frame `t`.
pub fn scene_primitives(script: &SceneScript, world: &Points, t: usize) -> Vec<Primitive> {
    let object = |shape| Primitive { shape, is_object: true };
    let p = |i| occtrack::point(world, i);
    let mut prims: Vec<Primitive> = match &script.object {
        ObjectSpec::Rope { radius, .. } => {
            (0..world.nrows() - 1).map(|i| object(Shape::Capsule { a: p(i), b: p(i + 1), radius: *radius })).collect()
        }
        ObjectSpec::Cloth { rows, cols, .. } => {
            let idx = |r: usize, c: usize| r * cols + c;
            let mut v = Vec::new();
            for r in 0..rows - 1 {
                for c in 0..cols - 1 {
                    let (a, b, cc, dd) = (p(idx(r, c)), p(idx(r, c + 1)), p(idx(r + 1, c + 1)), p(idx(r + 1, c)));
                    v.push(object(Shape::Triangle { a, b, c: cc }));
                    v.push(object(Shape::Triangle { a, b: cc, c: dd }));
                }
            }
            v
        }
    };
    if let Some(table) = &script.table {
        prims.push(Primitive { shape: Shape::TableTop { z: table.height, half_extents: table.half_extents }, is_object: false });
    }
    if let Some(occ) = &script.occluder {
        if let Some(center) = occ.center_at(t) {
            prims.push(Primitive {
                shape: Shape::Cuboid { center, half_extents: Vector3::from(occ.half_extents) },
                is_object: false,
            });
        }
    }
    prims
}

/// Noise-free depth and mask of frame `t` given the object's world positions.
pub fn render_frame(script: &SceneScript, pose: &CameraPose, world: &Points, t: usize) -> (Image<f32>, Image<bool>) {
    render_primitives(&script.camera.intrinsics, pose, &scene_primitives(script, world, t))
}

/// Adds N(0, σ²) to every valid pixel. The stream is fixed by `(seed, frame)`.
pub fn add_depth_noise(depth: &mut Image<f32>, sigma: f64, seed: u64, frame: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame);
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    for d in depth.data.iter_mut().filter(|d| **d > 0.0) {
        *d = (*d as f64 + normal.sample(&mut rng)).max(1e-4) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{default_camera, CameraSpec};
    use approx::assert_relative_eq;

    fn looking_down_z() -> (CameraIntrinsics, CameraPose) {
        // camera at the world origin looking along +y, so camera z = world y
        let cam = CameraSpec {
            intrinsics: default_camera(120, 90).intrinsics,
            position: [0.0, 0.0, 0.0],
            look_at: [0.0, 1.0, 0.0],
            up: [0.0, 0.0, 1.0],
        };
        (cam.intrinsics.clone(), cam.pose().unwrap())
    }

    #[test]
    fn sphere_center_pixel_depth() {
        let (mut k, pose) = looking_down_z();
        // put the principal point on a pixel center
        k.cx = 60.0;
        k.cy = 45.0;
        let prims = [Primitive { shape: Shape::Sphere { center: Vector3::new(0.0, 1.0, 0.0), radius: 0.1 }, is_object: true }];
        let (depth, mask) = render_primitives(&k, &pose, &prims);
        assert_relative_eq!(*depth.get(60, 45) as f64, 0.9, epsilon = 1e-6);
        assert!(*mask.get(60, 45));
        assert_eq!(*depth.get(0, 0), 0.0);
        assert!(!*mask.get(0, 0));
    }

    #[test]
    fn empty_scene_is_blank() {
        let (k, pose) = looking_down_z();
        let (depth, mask) = render_primitives(&k, &pose, &[]);
        assert!(depth.data.iter().all(|&d| d == 0.0));
        assert!(mask.data.iter().all(|&m| !m));
    }

    #[test]
    fn nearer_occluder_hides_the_object() {
        let (k, pose) = looking_down_z();
        let ball = Primitive { shape: Shape::Sphere { center: Vector3::new(0.0, 1.0, 0.0), radius: 0.1 }, is_object: true };
        let wall = Primitive {
            shape: Shape::Cuboid { center: Vector3::new(0.0, 0.5, 0.0), half_extents: Vector3::new(1.0, 0.01, 1.0) },
            is_object: false,
        };
        for prims in [[ball, wall], [wall, ball]] {
            let (depth, mask) = render_primitives(&k, &pose, &prims);
            assert!(mask.data.iter().all(|&m| !m));
            assert_relative_eq!(*depth.get(60, 45) as f64, 0.49, epsilon = 1e-5);
        }
        let behind = Primitive {
            shape: Shape::Cuboid { center: Vector3::new(0.0, 2.0, 0.0), half_extents: Vector3::new(1.0, 0.01, 1.0) },
            is_object: false,
        };
        let (_, mask) = render_primitives(&k, &pose, &[behind, ball]);
        assert!(*mask.get(60, 45));
    }

    #[test]
    fn capsule_side_and_cap_hits() {
        let o = Vector3::zeros();
        let a = Vector3::new(-0.5, 1.0, 0.0);
        let b = Vector3::new(0.5, 1.0, 0.0);
        let t = capsule_hit(&o, &Vector3::new(0.0, 1.0, 0.0), &a, &b, 0.1).unwrap();
        assert_relative_eq!(t, 0.9, epsilon = 1e-12);
        // non-unit direction scales t
        let t = capsule_hit(&o, &Vector3::new(0.0, 2.0, 0.0), &a, &b, 0.1).unwrap();
        assert_relative_eq!(t, 0.45, epsilon = 1e-12);
        // straight down the axis hits the end cap
        let t = capsule_hit(&Vector3::new(-2.0, 1.0, 0.0), &Vector3::x(), &a, &b, 0.1).unwrap();
        assert_relative_eq!(t, 1.4, epsilon = 1e-12);
        assert!(capsule_hit(&o, &Vector3::new(0.0, 1.0, 1.0), &a, &b, 0.1).is_none());
    }

    #[test]
    fn triangle_and_table() {
        let o = Vector3::new(0.2, 0.2, 1.0);
        let d = Vector3::new(0.0, 0.0, -1.0);
        let tri = Shape::Triangle { a: Vector3::zeros(), b: Vector3::x(), c: Vector3::y() };
        assert_relative_eq!(tri.intersect(&o, &d).unwrap(), 1.0, epsilon = 1e-15);
        assert!(tri.intersect(&Vector3::new(0.8, 0.8, 1.0), &d).is_none());
        let table = Shape::TableTop { z: 0.1, half_extents: [0.5, 0.5] };
        assert_relative_eq!(table.intersect(&o, &d).unwrap(), 0.9, epsilon = 1e-15);
        assert!(table.intersect(&Vector3::new(0.6, 0.0, 1.0), &d).is_none());
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let mut depth = Image::filled(500, 400, 1.0f32);
        depth.data[7] = 0.0;
        let clean = depth.clone();
        add_depth_noise(&mut depth, 0.002, 42, 3);
        assert_eq!(depth.data[7], 0.0);
        let diffs: Vec<f64> =
            depth.data.iter().zip(&clean.data).filter(|(_, c)| **c > 0.0).map(|(d, c)| (d - c) as f64).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.00195..=0.00205).contains(&std), "std {std}");
        assert!(mean.abs() < 2e-5);

        let mut again = clean.clone();
        add_depth_noise(&mut again, 0.002, 42, 3);
        assert_eq!(again, depth);
        let mut other = clean.clone();
        add_depth_noise(&mut other, 0.002, 42, 4);
        assert_ne!(other, depth);
    }
}
