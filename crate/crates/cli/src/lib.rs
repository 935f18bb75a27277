//! The `occtrack` command surface: `synth`, `track`, `eval` and `bench`.
//! Each subcommand is a plain function here so tests can call it without a
//! process; `main.rs` only parses flags and maps errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use occtrack::image::{frame_seed, Image};
use occtrack::io::{gt_file, read_json, read_points_csv, track_file, write_json, write_points_csv, Dataset};
use occtrack::recovery::DescriptorLibrary;
use occtrack::tracker::{FrameOutcome, StageCounts, StageTimings, Tracker};
use occtrack::{CameraIntrinsics, CorrespondenceSet, FrameObservation, Parameters, Points, Stages, TrackedModel};
use occtrack_synth::{mean_std, mean_vertex_error, sweep_library, write_dataset, SceneScript, SynthError};

/// How a failed command should end the process.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad parameters, model, scene or dataset layout. Exit code 2.
    #[error("validation failed: {0}")]
    Validation(String),
    /// Tracking stopped part-way, e.g. on a missing frame. Exit code 3.
    #[error("tracking aborted: {0}")]
    Abort(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Abort(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<occtrack::Error> for CliError {
    fn from(e: occtrack::Error) -> Self {
        use occtrack::Error as E;
        match e {
            E::InvalidModel(_) | E::InvalidParameters(_) | E::InvalidInput(_) | E::Format { .. } | E::Json(_) => {
                CliError::Validation(e.to_string())
            }
            E::Io(e) => CliError::Other(e.into()),
            _ => CliError::Abort(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Invalid(_) => CliError::Validation(e.to_string()),
            SynthError::Core(e) => e.into(),
            SynthError::Io(e) => CliError::Other(e.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// One tracking run. Ablation flags are independent of each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// `params.json`; defaults (cloth defaults for non-rope models) when absent.
    pub params: Option<PathBuf>,
    pub out: PathBuf,
    /// Overrides `tau` from the params file.
    pub tau: Option<f64>,
    pub disable_vis_prior: bool,
    pub disable_lle: bool,
    pub disable_constraint: bool,
    pub disable_recovery: bool,
    pub seed: u64,
    /// Offline descriptor library (negative frame indices) to start from.
    pub library: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            params: None,
            out: out.into(),
            tau: None,
            disable_vis_prior: false,
            disable_lle: false,
            disable_constraint: false,
            disable_recovery: false,
            seed: 0,
            library: None,
        }
    }

    pub fn stages(&self) -> Stages {
        Stages {
            visibility_prior: !self.disable_vis_prior,
            lle: !self.disable_lle,
            constraint: !self.disable_constraint,
            recovery: !self.disable_recovery,
        }
    }

    /// Loads and validates the parameters, applying the `tau` override.
    pub fn parameters(&self, model: &TrackedModel) -> CliResult<Parameters> {
        let mut p = match &self.params {
            Some(path) => {
                if !path.exists() {
                    return Err(CliError::Validation(format!("{} not found", path.display())));
                }
                read_json(path)?
            }
            None if is_chain(model) => Parameters::default(),
            None => Parameters::cloth(),
        };
        if let Some(tau) = self.tau {
            p.tau = tau;
        }
        p.validate()?;
        Ok(p)
    }

    fn tracker(&self, ds: &Dataset) -> CliResult<Tracker> {
        let params = self.parameters(&ds.model)?;
        Ok(Tracker::new(ds.model.clone(), params, self.stages())?.with_library(self.load_library()?))
    }

    pub fn load_library(&self) -> CliResult<DescriptorLibrary> {
        match &self.library {
            None => Ok(DescriptorLibrary::new()),
            Some(path) if !path.exists() => Err(CliError::Validation(format!("{} not found", path.display()))),
            Some(path) => {
                let lib = DescriptorLibrary::load(path)?;
                if lib.entries.last().is_some_and(|e| e.frame_index >= 0) {
                    return Err(CliError::Validation("library frame indices must be negative".into()));
                }
                Ok(lib)
            }
        }
    }
}

/// A rope model: edges form the chain `0-1-…-(M-1)`.
fn is_chain(model: &TrackedModel) -> bool {
    let m = model.num_vertices();
    model.edges.len() + 1 == m && model.edges.iter().all(|&[a, b]| a.abs_diff(b) == 1)
}

/// One frame of tracker input, from disk or straight from the generator.
#[derive(Debug, Clone)]
pub struct InputFrame {
    pub index: usize,
    pub depth: Image<f32>,
    pub mask: Image<bool>,
    pub correspondences: CorrespondenceSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub j_free: f64,
    pub recovery_invoked: bool,
    pub recovery_selected: bool,
    pub skipped: bool,
    pub candidates_tried: usize,
    pub em_iterations: usize,
    pub cloud_points: usize,
    pub timings: StageTimings,
}

/// Written to `run_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames: Vec<FrameRecord>,
    pub num_frames: usize,
    pub recovery_invocations: usize,
    pub recovery_selections: usize,
    /// Summed over frames, seconds.
    pub total_timings: StageTimings,
    /// Frames per second over the summed stage times.
    pub fps: f64,
    pub counts: StageCounts,
    pub stages: Stages,
    pub params: Parameters,
    pub seed: u64,
}

/// Tracks `frames` in order from the model's template state. States are
/// returned in frame order alongside the summary.
pub fn track_frames<I>(
    model: &TrackedModel,
    camera: &CameraIntrinsics,
    params: &Parameters,
    stages: Stages,
    seed: u64,
    frames: I,
) -> CliResult<(Vec<Points>, RunSummary)>
where
    I: IntoIterator<Item = CliResult<InputFrame>>,
{
    track_frames_with(Tracker::new(model.clone(), params.clone(), stages)?, camera, seed, frames)
}

/// As [`track_frames`], with a tracker prepared by the caller (library,
/// start state).
pub fn track_frames_with<I>(
    mut tracker: Tracker,
    camera: &CameraIntrinsics,
    seed: u64,
    frames: I,
) -> CliResult<(Vec<Points>, RunSummary)>
where
    I: IntoIterator<Item = CliResult<InputFrame>>,
{
    let params = tracker.params.clone();
    let stages = tracker.stages;
    let params = &params;
    let mut states = Vec::new();
    let mut records = Vec::new();
    let mut counts = StageCounts::default();
    let mut total = StageTimings::default();
    for frame in frames {
        let frame = frame?;
        let clock = Instant::now();
        let obs = FrameObservation::from_images(
            frame.depth,
            frame.mask,
            camera.clone(),
            params,
            frame_seed(seed, frame.index),
        )
        .map_err(|e| CliError::Abort(format!("frame {}: {e}", frame.index)))?;
        let preprocess = clock.elapsed().as_secs_f64();
        let outcome: FrameOutcome = tracker
            .step(frame.index as i64, &obs, &frame.correspondences)
            .map_err(|e| CliError::Abort(format!("frame {}: {e}", frame.index)))?;
        let timings = StageTimings { preprocess, ..outcome.timings };
        counts += outcome.counts;
        total.preprocess += timings.preprocess;
        total.em += timings.em;
        total.projection += timings.projection;
        total.descriptor += timings.descriptor;
        total.recovery += timings.recovery;
        records.push(FrameRecord {
            index: frame.index,
            j_free: outcome.j_free,
            recovery_invoked: outcome.recovery_invoked,
            recovery_selected: outcome.recovery_selected,
            skipped: outcome.skipped,
            candidates_tried: outcome.candidates_tried,
            em_iterations: outcome.em_iterations,
            cloud_points: obs.cloud.nrows(),
            timings,
        });
        states.push(outcome.state.vertices);
    }
    let n = records.len();
    let summary = RunSummary {
        num_frames: n,
        recovery_invocations: records.iter().filter(|r| r.recovery_invoked).count(),
        recovery_selections: records.iter().filter(|r| r.recovery_selected).count(),
        fps: if total.total() > 0.0 { n as f64 / total.total() } else { 0.0 },
        frames: records,
        total_timings: total,
        counts,
        stages,
        params: params.clone(),
        seed,
    };
    Ok((states, summary))
}

/// Frames `0..num_frames` of a dataset directory; a missing or unreadable
/// frame yields an abort carrying its index.
pub fn dataset_frames(ds: &Dataset) -> impl Iterator<Item = CliResult<InputFrame>> + '_ {
    (0..ds.num_frames).map(move |index| {
        let abort = |e: occtrack::Error| CliError::Abort(e.to_string());
        let (depth, mask) = ds.read_images(index).map_err(abort)?;
        let correspondences = ds.read_correspondences(index).map_err(abort)?;
        Ok(InputFrame { index, depth, mask, correspondences })
    })
}

fn open_dataset(path: &Path) -> CliResult<Dataset> {
    if !path.is_dir() {
        return Err(CliError::Validation(format!("dataset {} not found", path.display())));
    }
    Ok(Dataset::open(path)?)
}

/// `synth`: renders `scene` into `out`. Returns the frame count.
pub fn cmd_synth(scene: &SceneScript, out: &Path) -> CliResult<usize> {
    Ok(write_dataset(scene, out)?)
}

/// `synth` from a scene file.
pub fn cmd_synth_file(scene: &Path, out: &Path) -> CliResult<usize> {
    if !scene.exists() {
        return Err(CliError::Validation(format!("{} not found", scene.display())));
    }
    let script: SceneScript = read_json(scene)?;
    cmd_synth(&script, out)
}

/// `synth --library-out`: a descriptor library of every frame of `scene`
/// paired with its ground truth, indexed before frame 0.
pub fn cmd_library(scene: &SceneScript, params: &Parameters, seed: u64, out: &Path) -> CliResult<usize> {
    let lib = sweep_library(scene, params, seed)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    lib.save(out)?;
    Ok(lib.len())
}

/// `track`: writes `track_%05d.csv` per frame and `run_summary.json` into
/// `run.out`.
pub fn cmd_track(run: &RunConfig) -> CliResult<RunSummary> {
    let ds = open_dataset(&run.dataset)?;
    let tracker = run.tracker(&ds)?;
    let (states, summary) = track_frames_with(tracker, &ds.camera, run.seed, dataset_frames(&ds))?;
    fs::create_dir_all(&run.out)?;
    for (record, state) in summary.frames.iter().zip(&states) {
        write_points_csv(&track_file(&run.out, record.index), state)?;
    }
    write_json(&run.out.join("run_summary.json"), &summary)?;
    Ok(summary)
}

/// Per-frame errors of one or more runs against the same ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `errors[run][frame]`, meters.
    pub errors: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn count_files(dir: &Path, prefix: &str) -> CliResult<usize> {
    let mut n = 0;
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if name.starts_with(prefix) && name.ends_with(".csv") {
            n += 1;
        }
    }
    Ok(n)
}

/// Errors of in-memory runs; every run must cover every ground-truth frame.
pub fn evaluate(runs: &[Vec<Points>], truth: &[Points]) -> CliResult<EvalReport> {
    let mut errors = Vec::with_capacity(runs.len());
    for (r, run) in runs.iter().enumerate() {
        if run.len() != truth.len() {
            return Err(CliError::Validation(format!(
                "run {r} has {} frames, ground truth has {}",
                run.len(),
                truth.len()
            )));
        }
        let mut row = Vec::with_capacity(run.len());
        for (t, (y, g)) in run.iter().zip(truth).enumerate() {
            if y.nrows() != g.nrows() {
                return Err(CliError::Validation(format!(
                    "run {r} frame {t}: {} vertices vs {} in ground truth",
                    y.nrows(),
                    g.nrows()
                )));
            }
            row.push(mean_vertex_error(y, g));
        }
        errors.push(row);
    }
    let (mean, std) = (0..truth.len())
        .map(|t| mean_std(&errors.iter().map(|row| row[t]).collect::<Vec<_>>()))
        .unzip();
    Ok(EvalReport { errors, mean, std })
}

/// `eval`: compares each track directory with `gt_dir` and writes
/// `errors.csv` with columns `frame,mean,std,run0,run1,…` (meters).
pub fn cmd_eval(track_dirs: &[PathBuf], gt_dir: &Path, out: &Path) -> CliResult<EvalReport> {
    if track_dirs.is_empty() {
        return Err(CliError::Validation("no track directories given".into()));
    }
    let n = count_files(gt_dir, "gt_")?;
    let truth = (0..n).map(|t| read_points_csv(&gt_file(gt_dir, t))).collect::<Result<Vec<_>, _>>()?;
    let mut runs = Vec::new();
    for dir in track_dirs {
        let m = count_files(dir, "track_")?;
        if m != n {
            return Err(CliError::Validation(format!("{} has {m} frames, ground truth has {n}", dir.display())));
        }
        runs.push((0..n).map(|t| read_points_csv(&track_file(dir, t))).collect::<Result<Vec<_>, _>>()?);
    }
    let report = evaluate(&runs, &truth)?;
    let mut csv = String::from("frame,mean,std");
    for r in 0..runs.len() {
        csv.push_str(&format!(",run{r}"));
    }
    csv.push('\n');
    for t in 0..n {
        csv.push_str(&format!("{t},{:.8e},{:.8e}", report.mean[t], report.std[t]));
        for row in &report.errors {
            csv.push_str(&format!(",{:.8e}", row[t]));
        }
        csv.push('\n');
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, csv)?;
    Ok(report)
}

/// Median per-frame milliseconds per component across repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub preprocess_ms: f64,
    /// The EM registration.
    pub cpd_ms: f64,
    pub projection_ms: f64,
    /// Descriptor extraction plus retries.
    pub recovery_ms: f64,
    pub fps: f64,
}

impl BenchRow {
    pub fn header() -> &'static str {
        "Pre-Proc (ms) | CPD (ms) | Projection (ms) | Recovery (ms) | FPS"
    }

    pub fn format(&self) -> String {
        format!(
            "{:13.2} | {:8.2} | {:15.2} | {:13.2} | {:5.1}",
            self.preprocess_ms, self.cpd_ms, self.projection_ms, self.recovery_ms, self.fps
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub median: BenchRow,
    /// Every repeat tracked exactly the same states.
    pub identical_outputs: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// `bench`: tracks the dataset `repeats` times and reports median
/// per-frame component times. Writes `bench.json` into `run.out`.
pub fn cmd_bench(run: &RunConfig, repeats: usize) -> CliResult<BenchReport> {
    if repeats == 0 {
        return Err(CliError::Validation("repeats must be >= 1".into()));
    }
    let ds = open_dataset(&run.dataset)?;
    let tracker = run.tracker(&ds)?;
    // read once so disk speed does not leak into the component times
    let frames: Vec<InputFrame> = dataset_frames(&ds).collect::<CliResult<_>>()?;
    let mut rows = Vec::with_capacity(repeats);
    let mut first: Option<Vec<Points>> = None;
    let mut identical = true;
    for _ in 0..repeats {
        let (states, s) = track_frames_with(tracker.clone(), &ds.camera, run.seed, frames.iter().cloned().map(Ok))?;
        let n = s.num_frames.max(1) as f64;
        let t = s.total_timings;
        rows.push(BenchRow {
            preprocess_ms: 1e3 * t.preprocess / n,
            cpd_ms: 1e3 * t.em / n,
            projection_ms: 1e3 * t.projection / n,
            recovery_ms: 1e3 * (t.descriptor + t.recovery) / n,
            fps: s.fps,
        });
        match &first {
            None => first = Some(states),
            Some(f) => identical &= *f == states,
        }
    }
    let col = |f: fn(&BenchRow) -> f64| median(rows.iter().map(f).collect());
    let report = BenchReport {
        repeats,
        median: BenchRow {
            preprocess_ms: col(|r| r.preprocess_ms),
            cpd_ms: col(|r| r.cpd_ms),
            projection_ms: col(|r| r.projection_ms),
            recovery_ms: col(|r| r.recovery_ms),
            fps: col(|r| r.fps),
        },
        identical_outputs: identical,
    };
    fs::create_dir_all(&run.out)?;
    write_json(&run.out.join("bench.json"), &report)?;
    Ok(report)
}
