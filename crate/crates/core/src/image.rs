//! Depth/mask preprocessing: back-projection to a point cloud, the exact
//! Euclidean distance transform of the mask, and vertex projection into the
//! image.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CameraIntrinsics, FrameObservation, Parameters, Points};

/// Row-major image; pixel `(u, v)` is column `u` of row `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }
}

impl<T> Image<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "image buffer has {} entries, expected {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Depth samples of 0, negative or NaN carry no return.
#[inline]
pub fn valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Per-frame downsampling seed, so runs are reproducible frame by frame.
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    seed ^ (frame as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Back-projects every valid object pixel and downsamples to exactly
/// `min(target_n, available)` points.
///
/// When more points are available than requested, each occupied
/// `voxel_size` cube is replaced by its centroid, then a seeded uniform draw
/// picks the final set. If there are fewer than `target_n` voxels the
/// remainder is drawn from the raw points.
pub fn depth_mask_to_cloud(
    depth: &Image<f32>,
    mask: &Image<bool>,
    intrinsics: &CameraIntrinsics,
    target_n: usize,
    voxel_size: f64,
    seed: u64,
) -> Result<Points> {
    check_shapes(depth, mask, intrinsics)?;
    let mut all: Vec<Vector3<f64>> = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let z = *depth.get(u, v) as f64;
            if *mask.get(u, v) && valid_depth(z) {
                all.push(back_project(u as f64, v as f64, z, intrinsics));
            }
        }
    }

    if all.len() <= target_n {
        return Ok(Points::from_fn(all.len(), |r, c| all[r][c]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (centroids, rest) = voxel_centroids(&all, voxel_size);
    let mut chosen: Vec<Vector3<f64>> = if centroids.len() >= target_n {
        let mut idx = rand::seq::index::sample(&mut rng, centroids.len(), target_n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| centroids[i]).collect()
    } else {
        centroids
    };
    if chosen.len() < target_n {
        let mut idx = pick(&rest, target_n - chosen.len(), &mut rng);
        idx.sort_unstable();
        chosen.extend(idx.into_iter().map(|i| all[i]));
    }
    Ok(Points::from_fn(chosen.len(), |r, c| chosen[r][c]))
}

fn pick(pool: &[usize], amount: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, pool.len(), amount).into_iter().map(|i| pool[i]).collect()
}

/// Centroid of every occupied `voxel_size` cube, in order of first
/// occupancy, plus the indices of all points that were not first in their
/// voxel. A nonpositive size keeps every point as its own centroid.
fn voxel_centroids(points: &[Vector3<f64>], voxel_size: f64) -> (Vec<Vector3<f64>>, Vec<usize>) {
    if !(voxel_size > 0.0) {
        return (points.to_vec(), Vec::new());
    }
    let mut slot: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut sums: Vec<(Vector3<f64>, f64)> = Vec::new();
    let mut rest = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let key = (
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        );
        match slot.get(&key) {
            Some(&k) => {
                sums[k].0 += p;
                sums[k].1 += 1.0;
                rest.push(i);
            }
            None => {
                slot.insert(key, sums.len());
                sums.push((*p, 1.0));
            }
        }
    }
    (sums.into_iter().map(|(s, n)| s / n).collect(), rest)
}

#[inline]
pub fn back_project(u: f64, v: f64, z: f64, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z)
}

fn check_shapes(depth: &Image<f32>, mask: &Image<bool>, k: &CameraIntrinsics) -> Result<()> {
    if depth.width != k.width || depth.height != k.height || !depth.same_shape(mask) {
        return Err(Error::InvalidInput(format!(
            "depth {}x{} / mask {}x{} do not match camera {}x{}",
            depth.width, depth.height, mask.width, mask.height, k.width, k.height
        )));
    }
    Ok(())
}

/// Exact Euclidean distance (pixels) from every pixel to the nearest mask
/// pixel, via two passes of the 1D lower-envelope transform on squared
/// distances. An empty mask yields `width + height` everywhere.
pub fn distance_transform(mask: &Image<bool>) -> Image<f64> {
    let (w, h) = (mask.width, mask.height);
    if !mask.data.iter().any(|&m| m) {
        return Image::filled(w, h, (w + h) as f64);
    }

    let mut sq: Vec<f64> =
        mask.data.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let n = w.max(h);
    let mut scratch = Envelope::new(n);
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];

    for u in 0..w {
        for v in 0..h {
            line[v] = sq[v * w + u];
        }
        scratch.transform(&line[..h], &mut out[..h]);
        for v in 0..h {
            sq[v * w + u] = out[v];
        }
    }
    for v in 0..h {
        let row = &mut sq[v * w..(v + 1) * w];
        line[..w].copy_from_slice(row);
        scratch.transform(&line[..w], &mut out[..w]);
        row.copy_from_slice(&out[..w]);
    }

    Image { width: w, height: h, data: sq.into_iter().map(f64::sqrt).collect() }
}

/// Lower envelope of parabolas `(q - p)^2 + f(p)` over the finite samples.
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Self { sites: vec![0; n], bounds: vec![0.0; n + 1] }
    }

    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        let mut k: usize = 0;
        let mut have = false;
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            if !have {
                self.sites[0] = q;
                self.bounds[0] = f64::NEG_INFINITY;
                self.bounds[1] = f64::INFINITY;
                have = true;
                continue;
            }
            let qf = q as f64;
            let mut s;
            loop {
                let p = self.sites[k];
                let pf = p as f64;
                s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
                // bounds[0] is -inf, so k never underflows
                if s <= self.bounds[k] {
                    k -= 1;
                } else {
                    break;
                }
            }
            k += 1;
            self.sites[k] = q;
            self.bounds[k] = s;
            self.bounds[k + 1] = f64::INFINITY;
        }
        if !have {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
        let mut j = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while self.bounds[j + 1] < qf {
                j += 1;
            }
            let p = self.sites[j];
            let d = qf - p as f64;
            *o = d * d + f[p];
        }
    }
}

/// A vertex projected into the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    /// Depth along the optical axis (meters).
    pub z: f64,
    pub in_bounds: bool,
}

impl PixelProjection {
    /// Nearest integer pixel, when on the image.
    pub fn pixel(&self) -> Option<(usize, usize)> {
        self.in_bounds.then(|| (self.u.round() as usize, self.v.round() as usize))
    }
}

pub fn project_vertex(vertex: &Vector3<f64>, k: &CameraIntrinsics) -> PixelProjection {
    let z = vertex.z;
    if !(z > 0.0) || !vertex.x.is_finite() || !vertex.y.is_finite() {
        return PixelProjection { u: f64::NAN, v: f64::NAN, z, in_bounds: false };
    }
    let u = k.fx * vertex.x / z + k.cx;
    let v = k.fy * vertex.y / z + k.cy;
    let (ru, rv) = (u.round(), v.round());
    let in_bounds = ru >= 0.0 && rv >= 0.0 && ru < k.width as f64 && rv < k.height as f64;
    PixelProjection { u, v, z, in_bounds }
}

/// Observed depth and mask distance at a projected vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelSample {
    OffImage,
    /// `depth` is `None` when the sensor had no return at that pixel.
    OnImage { depth: Option<f64>, distance: f64 },
}

pub fn sample_depth_and_distance(
    proj: &PixelProjection,
    depth: &Image<f32>,
    distance_image: &Image<f64>,
) -> PixelSample {
    let Some((u, v)) = proj.pixel() else {
        return PixelSample::OffImage;
    };
    if u >= depth.width || v >= depth.height {
        return PixelSample::OffImage;
    }
    let d = *depth.get(u, v) as f64;
    PixelSample::OnImage {
        depth: valid_depth(d).then_some(d),
        distance: *distance_image.get(u, v),
    }
}

impl FrameObservation {
    /// Derives the cloud and distance image from raw depth and mask.
    pub fn from_images(
        depth: Image<f32>,
        mask: Image<bool>,
        intrinsics: CameraIntrinsics,
        params: &Parameters,
        seed: u64,
    ) -> Result<Self> {
        intrinsics.validate()?;
        let cloud = depth_mask_to_cloud(
            &depth,
            &mask,
            &intrinsics,
            params.cloud_points,
            params.voxel_size,
            seed,
        )?;
        let distance_image = distance_transform(&mask);
        Ok(Self { depth, mask, intrinsics, cloud, distance_image })
    }
}
