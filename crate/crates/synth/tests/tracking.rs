use occtrack::image::frame_seed;
use occtrack::tracker::Tracker;
use occtrack::{FrameObservation, Parameters, Stages};
use occtrack_synth::scene::with_resolution;
use occtrack_synth::{camera_model, mean_vertex_error, preset, sweep_library, SceneScript, Sequence};

fn scene(name: &str, frames: usize) -> SceneScript {
    let mut s = with_resolution(preset(name).unwrap(), 320, 180);
    s.frames = frames;
    s
}

/// Per-frame mean vertex error, and how often recovery's pick was kept.
fn errors(s: &SceneScript, mut tracker: Tracker) -> (Vec<f64>, usize) {
    let params = tracker.params.clone();
    let mut selected = 0;
    let errs = Sequence::new(s)
        .unwrap()
        .map(|f| {
            let seed = frame_seed(s.seed, f.index);
            let obs = FrameObservation::from_images(f.depth, f.mask, s.camera.intrinsics.clone(), &params, seed).unwrap();
            let out = tracker.step(f.index as i64, &obs, &f.correspondences).unwrap();
            selected += out.recovery_selected as usize;
            mean_vertex_error(&out.state.vertices, &f.ground_truth)
        })
        .collect();
    (errs, selected)
}

#[test]
fn resting_rope_is_tracked_within_five_millimetres() {
    let s = scene("static", 10);
    let tracker = Tracker::new(camera_model(&s).unwrap(), Parameters::default(), Stages::default()).unwrap();
    let (errs, _) = errors(&s, tracker);
    assert!(errs.iter().all(|&e| e < 5e-3), "{errs:?}");
}

#[test]
fn wrong_start_is_corrected_from_an_offline_library() {
    let s = scene("static", 10);
    let params = Parameters::default();
    let model = camera_model(&s).unwrap();
    // in front of the table and clear of the rope's mask
    let mut start = model.vertices.clone();
    start.column_mut(1).add_scalar_mut(0.1);
    start.column_mut(2).add_scalar_mut(-0.1);
    let library = sweep_library(&s, &params, s.seed).unwrap();

    let lost = Tracker::new(model.clone(), params.clone(), Stages::default()).unwrap().with_start(start.clone()).unwrap();
    let (without, _) = errors(&s, lost);
    let helped = Tracker::new(model, params, Stages::default()).unwrap().with_start(start).unwrap().with_library(library);
    let (with, selected) = errors(&s, helped);

    assert!(selected >= 1);
    assert!(with[0] < 5e-3, "first frame {:.2} mm", with[0] * 1e3);
    assert!(with.iter().all(|&e| e < 5e-3), "{with:?}");
    assert!(with[9] < 0.5 * without[9], "{:.2} vs {:.2} mm", with[9] * 1e3, without[9] * 1e3);
}
