//! Frame generation and dataset directories. Everything written is in the
//! camera frame; `scene.json` keeps the world-frame script for provenance.

use std::fs;
use std::path::Path;

use occtrack::image::{frame_seed, Image};
use occtrack::io::{frame_file, gt_file, write_depth, write_json, write_mask, write_points_csv};
use occtrack::recovery::{shape_descriptor, DescriptorLibrary};
use occtrack::{CorrespondenceSet, FrameObservation, Parameters, Points, TrackedModel};

use crate::render::{add_depth_noise, render_frame};
use crate::scene::{CameraPose, SceneScript};
use crate::sim::Simulator;
use crate::SynthError;

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub index: usize,
    pub depth: Image<f32>,
    pub mask: Image<bool>,
    /// Camera frame.
    pub ground_truth: Points,
    /// Handle positions when the script asks for them, otherwise empty.
    pub correspondences: CorrespondenceSet,
}

/// Steps the simulator and renders one frame per `next`.
#[derive(Debug, Clone)]
pub struct Sequence {
    script: SceneScript,
    pose: CameraPose,
    sim: Simulator,
    next: usize,
}

impl Sequence {
    pub fn new(script: &SceneScript) -> Result<Self, SynthError> {
        script.validate()?;
        Ok(Self { script: script.clone(), pose: script.camera.pose()?, sim: Simulator::new(script), next: 0 })
    }

    pub fn pose(&self) -> &CameraPose {
        &self.pose
    }
}

impl Iterator for Sequence {
    type Item = SynthFrame;

    fn next(&mut self) -> Option<SynthFrame> {
        let t = self.next;
        if t >= self.script.frames {
            return None;
        }
        if t > 0 {
            self.sim.step();
        }
        self.next += 1;
        let world = self.sim.positions();
        let (mut depth, mask) = render_frame(&self.script, &self.pose, &world, t);
        add_depth_noise(&mut depth, self.script.noise_sigma, self.script.seed, t as u64);
        let ground_truth = self.pose.points_to_camera(&world);
        let correspondences = if self.script.correspondences && !self.script.handles.is_empty() {
            let pairs: Vec<[usize; 2]> = self.script.handles.iter().enumerate().map(|(k, h)| [h.vertex, k]).collect();
            let points = Points::from_fn(pairs.len(), |r, c| ground_truth[(pairs[r][0], c)]);
            CorrespondenceSet { points, pairs }
        } else {
            CorrespondenceSet::empty()
        };
        Some(SynthFrame { index: t, depth, mask, ground_truth, correspondences })
    }
}

/// The tracked model: the frame-0 object in the camera frame.
pub fn camera_model(script: &SceneScript) -> Result<TrackedModel, SynthError> {
    let (world, edges) = script.initial_model();
    let pose = script.camera.pose()?;
    Ok(TrackedModel::new(pose.points_to_camera(&world), edges)?)
}

/// Writes `camera.json`, `model.json`, `scene.json` and every frame's
/// depth, mask, ground truth and (optionally) correspondences into `out`.
/// Returns the number of frames written.
pub fn write_dataset(script: &SceneScript, out: &Path) -> Result<usize, SynthError> {
    let seq = Sequence::new(script)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("camera.json"), &script.camera.intrinsics)?;
    write_json(&out.join("model.json"), &camera_model(script)?)?;
    write_json(&out.join("scene.json"), script)?;
    let mut n = 0;
    for f in seq {
        write_depth(&frame_file(out, f.index, "depth.bin"), &f.depth)?;
        write_mask(&frame_file(out, f.index, "mask.pgm"), &f.mask)?;
        write_points_csv(&gt_file(out, f.index), &f.ground_truth)?;
        if !f.correspondences.is_empty() {
            write_json(&frame_file(out, f.index, "corr.json"), &f.correspondences)?;
        }
        n += 1;
    }
    Ok(n)
}

/// A library of (descriptor, ground-truth state) pairs from every frame of
/// `script`, indexed `-n..-1` so it can seed a tracker before frame 0.
pub fn sweep_library(script: &SceneScript, params: &Parameters, seed: u64) -> Result<DescriptorLibrary, SynthError> {
    let mut lib = DescriptorLibrary::new();
    for f in Sequence::new(script)? {
        let obs = FrameObservation::from_images(
            f.depth,
            f.mask,
            script.camera.intrinsics.clone(),
            params,
            frame_seed(seed, f.index),
        )?;
        if obs.cloud.nrows() == 0 {
            continue;
        }
        lib.add(f.index as i64, shape_descriptor(&obs.cloud, &nalgebra::Vector3::zeros()), f.ground_truth)?;
    }
    lib.reindex_before_zero();
    Ok(lib)
}
