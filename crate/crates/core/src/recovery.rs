//! Failure detection through free-space violations, and a library of past
//! well-tracked states keyed by a viewpoint shape descriptor.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{project_vertex, sample_depth_and_distance, PixelSample};
use crate::types::{point, serde_points, FrameObservation, Points};

/// Fraction of vertices seen in free space: in front of the observed surface
/// while projecting off the mask. Each vertex contributes
/// `1 − exp(−k_free · D(u, v) · max(depth(u, v) − z, 0))`; vertices off the
/// image or over pixels without a depth return contribute 0.
pub fn free_space_energy(y: &Points, frame: &FrameObservation, k_free: f64) -> f64 {
    let m = y.nrows();
    if m == 0 {
        return 0.0;
    }
    let total: f64 = (0..m)
        .map(|i| {
            let proj = project_vertex(&point(y, i), &frame.intrinsics);
            match sample_depth_and_distance(&proj, &frame.depth, &frame.distance_image) {
                PixelSample::OnImage { depth: Some(d), distance } => {
                    -(-k_free * distance * (d - proj.z).max(0.0)).exp_m1()
                }
                _ => 0.0,
            }
        })
        .sum();
    total / m as f64
}

pub const DESCRIPTOR_BINS: usize = 45;
pub const DESCRIPTOR_LEN: usize = 3 * DESCRIPTOR_BINS;
/// Neighbors used for each normal estimate.
pub const NORMAL_NEIGHBORS: usize = 10;

/// Three concatenated histograms:
/// `[0, 45)` cosine between normal and the point's own view ray, over [0, 1];
/// `[45, 90)` cosine between normal and the centroid's view ray, over [-1, 1];
/// `[90, 135)` distance to centroid over the largest such distance, in [0, 1].
/// L1-normalized, or all zero when the cloud is too small.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDescriptor {
    pub histogram: Vec<f64>,
}

impl ShapeDescriptor {
    pub fn zeros() -> Self {
        Self { histogram: vec![0.0; DESCRIPTOR_LEN] }
    }

    pub fn distance(&self, other: &ShapeDescriptor) -> f64 {
        self.histogram
            .iter()
            .zip(&other.histogram)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let t = ((value - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((t * DESCRIPTOR_BINS as f64) as usize).min(DESCRIPTOR_BINS - 1)
}

/// Points are sorted lexicographically first, so the result depends only on
/// the set of points, not their order.
pub fn shape_descriptor(cloud: &Points, viewpoint: &Vector3<f64>) -> ShapeDescriptor {
    let n = cloud.nrows();
    if n <= NORMAL_NEIGHBORS {
        return ShapeDescriptor::zeros();
    }
    let mut pts: Vec<Vector3<f64>> = (0..n).map(|i| point(cloud, i)).collect();
    pts.sort_by(|a, b| {
        a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
    });

    let centroid = pts.iter().sum::<Vector3<f64>>() / n as f64;
    let centroid_ray = (viewpoint - centroid).try_normalize(0.0).unwrap_or_else(Vector3::z);
    let max_dist = pts.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);

    let mut hist = vec![0.0; DESCRIPTOR_LEN];
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, p) in pts.iter().enumerate() {
        order.clear();
        order.extend(pts.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, q)| ((q - p).norm_squared(), j)));
        order.select_nth_unstable_by(NORMAL_NEIGHBORS - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let hood: Vec<Vector3<f64>> =
            std::iter::once(*p).chain(order[..NORMAL_NEIGHBORS].iter().map(|&(_, j)| pts[j])).collect();
        let mean = hood.iter().sum::<Vector3<f64>>() / hood.len() as f64;
        let cov = hood.iter().fold(Matrix3::zeros(), |acc, q| acc + (q - mean) * (q - mean).transpose());
        let eig = SymmetricEigen::new(cov);
        let smallest = eig.eigenvalues.imin();
        let mut normal: Vector3<f64> = eig.eigenvectors.column(smallest).into();

        let ray = (viewpoint - p).try_normalize(0.0).unwrap_or_else(Vector3::z);
        if normal.dot(&ray) < 0.0 {
            normal = -normal;
        }
        hist[bin(normal.dot(&ray), 0.0, 1.0)] += 1.0;
        hist[DESCRIPTOR_BINS + bin(normal.dot(&centroid_ray), -1.0, 1.0)] += 1.0;
        let d = if max_dist > 0.0 { (p - centroid).norm() / max_dist } else { 0.0 };
        hist[2 * DESCRIPTOR_BINS + bin(d, 0.0, 1.0)] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    for h in &mut hist {
        *h /= total;
    }
    ShapeDescriptor { histogram: hist }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub frame_index: i64,
    pub descriptor: ShapeDescriptor,
    #[serde(with = "serde_points")]
    pub state: Points,
}

pub const LIBRARY_VERSION: u32 = 1;

/// Past states that passed the free-space check, in strictly increasing
/// frame order. Offline libraries use negative frame indices so a live
/// session can keep appending from frame 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DescriptorLibrary {
    pub entries: Vec<LibraryEntry>,
}

#[derive(Serialize, Deserialize)]
struct LibraryFile {
    version: u32,
    entries: Vec<LibraryEntry>,
}

impl DescriptorLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, frame_index: i64, descriptor: ShapeDescriptor, state: Points) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if frame_index <= last.frame_index {
                return Err(Error::Library(format!(
                    "frame index {frame_index} does not follow {}",
                    last.frame_index
                )));
            }
            if state.nrows() != last.state.nrows() {
                return Err(Error::Library(format!(
                    "state has {} vertices, library holds {}",
                    state.nrows(),
                    last.state.nrows()
                )));
            }
        }
        if descriptor.histogram.len() != DESCRIPTOR_LEN {
            return Err(Error::Library(format!("descriptor has {} bins", descriptor.histogram.len())));
        }
        self.entries.push(LibraryEntry { frame_index, descriptor, state });
        Ok(())
    }

    /// Up to `k` entries by ascending descriptor distance, ties to the
    /// smaller frame index.
    pub fn query_knn(&self, descriptor: &ShapeDescriptor, k: usize) -> Vec<(f64, &LibraryEntry)> {
        let mut scored: Vec<(f64, &LibraryEntry)> =
            self.entries.iter().map(|e| (e.descriptor.distance(descriptor), e)).collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.frame_index.cmp(&b.1.frame_index)));
        scored.truncate(k);
        scored
    }

    /// Renumbers entries to `-len, ..., -1`, keeping their order.
    pub fn reindex_before_zero(&mut self) {
        let n = self.entries.len() as i64;
        for (i, e) in self.entries.iter_mut().enumerate() {
            e.frame_index = i as i64 - n;
        }
    }

    /// Keeps one entry per k-means cluster of descriptors: the entry nearest
    /// each centroid, ties to the smaller frame index. Centroids start from a
    /// seeded farthest-first pick and run 50 Lloyd iterations.
    pub fn compact(&self, target_size: usize, seed: u64) -> Result<DescriptorLibrary> {
        if target_size == 0 {
            return Err(Error::Library("compaction target must be at least 1".into()));
        }
        if target_size >= self.len() {
            return Ok(self.clone());
        }
        let data: Vec<&[f64]> = self.entries.iter().map(|e| e.descriptor.histogram.as_slice()).collect();
        let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids: Vec<Vec<f64>> = vec![data[rng.random_range(0..data.len())].to_vec()];
        while centroids.len() < target_size {
            let far = (0..data.len())
                .map(|i| (centroids.iter().map(|c| dist2(data[i], c)).fold(f64::INFINITY, f64::min), i))
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|(_, i)| i)
                .unwrap();
            centroids.push(data[far].to_vec());
        }

        let nearest = |x: &[f64], centroids: &[Vec<f64>]| {
            (0..centroids.len())
                .min_by(|&a, &b| dist2(x, &centroids[a]).total_cmp(&dist2(x, &centroids[b])))
                .unwrap()
        };
        for _ in 0..50 {
            let mut sums = vec![vec![0.0; DESCRIPTOR_LEN]; target_size];
            let mut counts = vec![0usize; target_size];
            for x in &data {
                let c = nearest(x, &centroids);
                counts[c] += 1;
                for (s, v) in sums[c].iter_mut().zip(x.iter()) {
                    *s += v;
                }
            }
            for c in 0..target_size {
                // an empty cluster keeps its previous centroid
                if counts[c] > 0 {
                    centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
        }

        let mut keep: Vec<usize> = centroids
            .iter()
            .map(|c| {
                (0..data.len())
                    .min_by(|&a, &b| {
                        dist2(data[a], c)
                            .total_cmp(&dist2(data[b], c))
                            .then(self.entries[a].frame_index.cmp(&self.entries[b].frame_index))
                    })
                    .unwrap()
            })
            .collect();
        keep.sort_unstable();
        keep.dedup();
        Ok(DescriptorLibrary { entries: keep.into_iter().map(|i| self.entries[i].clone()).collect() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = LibraryFile { version: LIBRARY_VERSION, entries: self.entries.clone() };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: LibraryFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.version != LIBRARY_VERSION {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("library version {} is not {LIBRARY_VERSION}", file.version),
            });
        }
        let mut lib = DescriptorLibrary::new();
        for e in file.entries {
            lib.add(e.frame_index, e.descriptor, e.state)?;
        }
        Ok(lib)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{distance_transform, Image};
    use crate::types::{points_from_rows, CameraIntrinsics};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    /// 64x48 frame at depth 1.0, mask covering columns 0..8.
    fn frame() -> FrameObservation {
        let intrinsics =
            CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 32.0, cy: 24.0, width: 64, height: 48 };
        let depth = Image::filled(64, 48, 1.0f32);
        let mut mask = Image::filled(64, 48, false);
        for v in 0..48 {
            for u in 0..8 {
                *mask.get_mut(u, v) = true;
            }
        }
        let distance_image = distance_transform(&mask);
        FrameObservation { depth, mask, intrinsics, cloud: Points::zeros(0), distance_image }
    }

    fn at_pixel(f: &FrameObservation, u: f64, v: f64, z: f64) -> [f64; 3] {
        let k = &f.intrinsics;
        [(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z]
    }

    #[test]
    fn free_space_examples() {
        let f = frame();
        let behind = points_from_rows(&[at_pixel(&f, 30.0, 20.0, 1.0), at_pixel(&f, 50.0, 20.0, 1.5)]);
        assert_eq!(free_space_energy(&behind, &f, 100.0), 0.0);

        let floating = points_from_rows(&[at_pixel(&f, 60.0, 20.0, 0.1), at_pixel(&f, 55.0, 40.0, 0.2)]);
        assert!(free_space_energy(&floating, &f, 100.0) > 1.0 - 1e-12);

        // column 20 is 13 px from the mask edge at column 7
        let gap = std::f64::consts::LN_2 / 100.0 / 13.0;
        let half = points_from_rows(&[at_pixel(&f, 20.0, 20.0, 1.0 - gap), at_pixel(&f, 40.0, 20.0, 1.0)]);
        assert_relative_eq!(free_space_energy(&half, &f, 100.0), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn free_space_ignores_mask_offimage_and_missing_depth() {
        let mut f = frame();
        *f.depth.get_mut(40, 20) = f32::NAN;
        let y = points_from_rows(&[
            at_pixel(&f, 3.0, 20.0, 0.1),
            at_pixel(&f, 500.0, 20.0, 0.1),
            at_pixel(&f, 40.0, 20.0, 0.1),
            [0.0, 0.0, -1.0],
        ]);
        assert_eq!(free_space_energy(&y, &f, 100.0), 0.0);
    }

    proptest! {
        #[test]
        fn free_space_monotone_in_violation(u in 10.0f64..60.0, z1 in 0.2f64..1.2, dz in 0.0f64..0.5) {
            let f = frame();
            let other = at_pixel(&f, 30.0, 30.0, 0.95);
            let a = free_space_energy(&points_from_rows(&[at_pixel(&f, u, 20.0, z1), other]), &f, 100.0);
            // moving the vertex toward the camera never reduces the violation
            let b = free_space_energy(&points_from_rows(&[at_pixel(&f, u, 20.0, z1 - dz * z1 / 1.3), other]), &f, 100.0);
            prop_assert!(b >= a - 1e-15);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    fn plane_patch(z: f64) -> Points {
        let mut rows = Vec::new();
        for i in 0..15 {
            for j in 0..15 {
                rows.push([(i as f64 - 7.0) * 0.01, (j as f64 - 7.0) * 0.01, z]);
            }
        }
        points_from_rows(&rows)
    }

    fn rope_cloud(bent: bool, noise: f64, seed: u64) -> Points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut rows = Vec::new();
        for i in 0..300 {
            let s = i as f64 / 299.0;
            let (x, y) = if bent && s > 0.5 { (0.0, s - 0.5) } else { (s - 0.5, 0.0) };
            let (xo, yo) = if bent { (x + 0.25, y) } else { (x, y) };
            let th = (i % 7) as f64 * 0.4 - 1.2;
            let r = 0.004;
            let lateral = th.sin() * r;
            let (lx, ly) = if bent && s > 0.5 { (lateral, 0.0) } else { (0.0, lateral) };
            let jitter = |rng: &mut ChaCha8Rng| if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            rows.push([xo + lx + jitter(&mut rng), yo + ly + jitter(&mut rng), 1.0 - th.cos() * r + jitter(&mut rng)]);
        }
        points_from_rows(&rows)
    }

    #[test]
    fn descriptor_is_normalized_and_plane_faces_camera() {
        let d = shape_descriptor(&plane_patch(1.0), &Vector3::zeros());
        assert_eq!(d.histogram.len(), DESCRIPTOR_LEN);
        assert_relative_eq!(d.histogram.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(d.histogram.iter().all(|&h| h >= 0.0));
        let channel: f64 = d.histogram[..DESCRIPTOR_BINS].iter().sum();
        let top = d.histogram[DESCRIPTOR_BINS - 1];
        assert!(top / channel > 0.9, "top bin share {}", top / channel);
    }

    #[test]
    fn descriptor_of_tiny_cloud_is_zero() {
        let c = points_from_rows(&[[0.0, 0.0, 1.0]; 10]);
        assert_eq!(shape_descriptor(&c, &Vector3::zeros()), ShapeDescriptor::zeros());
        assert_eq!(shape_descriptor(&Points::zeros(0), &Vector3::zeros()), ShapeDescriptor::zeros());
    }

    #[test]
    fn descriptor_is_deterministic() {
        let c = rope_cloud(false, 0.002, 3);
        let a = shape_descriptor(&c, &Vector3::zeros());
        let b = shape_descriptor(&c, &Vector3::zeros());
        assert_eq!(a, b);
    }

    #[test]
    fn descriptor_separates_bent_from_straight() {
        let straight_a = shape_descriptor(&rope_cloud(false, 0.002, 1), &Vector3::zeros());
        let straight_b = shape_descriptor(&rope_cloud(false, 0.002, 2), &Vector3::zeros());
        let bent = shape_descriptor(&rope_cloud(true, 0.0, 0), &Vector3::zeros());
        let straight = shape_descriptor(&rope_cloud(false, 0.0, 0), &Vector3::zeros());
        assert!(straight.distance(&bent) > straight_a.distance(&straight_b));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn descriptor_ignores_point_order(seed in 0u64..1000) {
            let c = rope_cloud(seed % 2 == 0, 0.002, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..c.nrows()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let shuffled = Points::from_fn(c.nrows(), |r, k| c[(perm[r], k)]);
            prop_assert_eq!(shape_descriptor(&c, &Vector3::zeros()), shape_descriptor(&shuffled, &Vector3::zeros()));
        }
    }

    fn descriptor_at(center: usize, spread: f64, rng: &mut ChaCha8Rng) -> ShapeDescriptor {
        let mut h: Vec<f64> = (0..DESCRIPTOR_LEN).map(|_| rng.random_range(0.0..spread)).collect();
        h[center] += 1.0;
        let s: f64 = h.iter().sum();
        ShapeDescriptor { histogram: h.into_iter().map(|v| v / s).collect() }
    }

    fn state(tag: f64) -> Points {
        points_from_rows(&[[tag, 0.0, 0.0], [tag, 1.0, 0.0]])
    }

    #[test]
    fn library_add_enforces_order() {
        let mut lib = DescriptorLibrary::new();
        lib.add(0, ShapeDescriptor::zeros(), state(0.0)).unwrap();
        assert_eq!(lib.len(), 1);
        assert!(lib.add(0, ShapeDescriptor::zeros(), state(0.0)).is_err());
        assert!(lib.add(-3, ShapeDescriptor::zeros(), state(0.0)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 1..100 {
            lib.add(i, descriptor_at(0, 0.1, &mut rng), state(i as f64)).unwrap();
        }
        assert_eq!(lib.len(), 100);
        assert_eq!(lib.query_knn(&ShapeDescriptor::zeros(), 1000).len(), 100);
    }

    #[test]
    fn knn_examples_and_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lib = DescriptorLibrary::new();
        for i in 0..20 {
            lib.add(i * 2, descriptor_at(rng.random_range(0..DESCRIPTOR_LEN), 0.05, &mut rng), state(i as f64)).unwrap();
        }
        let probe = lib.entries[7].descriptor.clone();
        let hits = lib.query_knn(&probe, 3);
        assert_eq!(hits[0].0, 0.0);
        assert_eq!(hits[0].1.frame_index, 14);

        let all = lib.query_knn(&probe, 50);
        assert_eq!(all.len(), 20);

        let query = descriptor_at(3, 0.05, &mut rng);
        let mut brute: Vec<(f64, i64)> = lib
            .entries
            .iter()
            .map(|e| {
                let d: f64 = e.descriptor.histogram.iter().zip(&query.histogram).map(|(a, b)| (a - b).powi(2)).sum();
                (d.sqrt(), e.frame_index)
            })
            .collect();
        brute.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let got: Vec<i64> = lib.query_knn(&query, 5).iter().map(|(_, e)| e.frame_index).collect();
        let want: Vec<i64> = brute.iter().take(5).map(|&(_, f)| f).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn knn_ties_prefer_earlier_frames() {
        let mut lib = DescriptorLibrary::new();
        for i in 0..4 {
            lib.add(i, ShapeDescriptor::zeros(), state(i as f64)).unwrap();
        }
        let frames: Vec<i64> = lib.query_knn(&ShapeDescriptor::zeros(), 2).iter().map(|(_, e)| e.frame_index).collect();
        assert_eq!(frames, vec![0, 1]);
    }

    #[test]
    fn compaction_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut lib = DescriptorLibrary::new();
        let centers = [5, 60, 120];
        for i in 0..30 {
            lib.add(i, descriptor_at(centers[i as usize % 3], 0.01, &mut rng), state(i as f64)).unwrap();
        }
        assert_eq!(lib.compact(30, 0).unwrap(), lib);
        assert_eq!(lib.compact(31, 0).unwrap(), lib);
        let small = lib.compact(3, 0).unwrap();
        assert_eq!(small.len(), 3);
        let mut clusters: Vec<usize> = small.entries.iter().map(|e| e.frame_index as usize % 3).collect();
        clusters.sort_unstable();
        assert_eq!(clusters, vec![0, 1, 2]);

        let mut same = DescriptorLibrary::new();
        for i in 3..9 {
            same.add(i, ShapeDescriptor::zeros(), state(i as f64)).unwrap();
        }
        let one = same.compact(1, 4).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.entries[0].frame_index, 3);
        assert!(same.compact(0, 0).is_err());
    }

    #[test]
    fn library_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.json");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lib = DescriptorLibrary::new();
        for i in 0..5 {
            lib.add(i, descriptor_at(i as usize, 0.1, &mut rng), state(0.1 * i as f64 + 1e-17)).unwrap();
        }
        lib.save(&path).unwrap();
        assert_eq!(DescriptorLibrary::load(&path).unwrap(), lib);

        lib.reindex_before_zero();
        let frames: Vec<i64> = lib.entries.iter().map(|e| e.frame_index).collect();
        assert_eq!(frames, vec![-5, -4, -3, -2, -1]);
    }
}
