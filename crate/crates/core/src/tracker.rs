//! Per-frame tracking: registration, projection, failure check and retries
//! from the descriptor library.

use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{cpd_em, visibility_prior, EmWorkspace, VisibilityPrior};
use crate::projection::{project, ProjectionProblem};
use crate::recovery::{free_space_energy, shape_descriptor, DescriptorLibrary};
use crate::types::{
    validate_model, CorrespondenceSet, FrameObservation, Parameters, Points, Stages, TrackedModel, TrackingState,
};

/// Wall-clock seconds per stage. `preprocess` is filled in by callers that
/// build the observation; `recovery` covers the retries only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess: f64,
    pub em: f64,
    pub projection: f64,
    pub descriptor: f64,
    pub recovery: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.preprocess + self.em + self.projection + self.descriptor + self.recovery
    }
}

/// How many times each optional stage actually ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub visibility_prior: usize,
    pub lle: usize,
    pub projection: usize,
    pub descriptor: usize,
    pub recovery: usize,
}

impl std::ops::AddAssign for StageCounts {
    fn add_assign(&mut self, o: Self) {
        self.visibility_prior += o.visibility_prior;
        self.lle += o.lle;
        self.projection += o.projection;
        self.descriptor += o.descriptor;
        self.recovery += o.recovery;
    }
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub vertices: Points,
    pub sigma2: f64,
    pub posteriors: DMatrix<f64>,
    pub em_iterations: usize,
    pub em_seconds: f64,
    pub projection_seconds: f64,
    pub counts: StageCounts,
}

/// One registration from `start`: visibility prior, regularized EM, then
/// the stretch/pin projection. Disabled stages are skipped; without the
/// LLE stage the topology weight is zero.
pub fn track(
    frame: &FrameObservation,
    start: &Points,
    model: &TrackedModel,
    ws: &mut EmWorkspace,
    params: &Parameters,
    stages: &Stages,
    pins: &CorrespondenceSet,
) -> Result<Candidate> {
    let clock = Instant::now();
    let counts = StageCounts {
        visibility_prior: stages.visibility_prior as usize,
        lle: stages.lle as usize,
        projection: stages.constraint as usize,
        ..StageCounts::default()
    };
    let prior = if stages.visibility_prior {
        visibility_prior(start, frame, params.k_vis)
    } else {
        VisibilityPrior::uniform(start.nrows())
    };
    let em_params = if stages.lle { params.clone() } else { Parameters { gamma: 0.0, ..params.clone() } };
    let em = cpd_em(&frame.cloud, start, ws, &em_params, &prior)?;
    let em_seconds = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let vertices = if stages.constraint {
        let problem = ProjectionProblem::new(em.vertices, model, params.lambda_stretch, pins.clone());
        project(&problem, params.projection_tol)?
    } else {
        em.vertices
    };
    Ok(Candidate {
        vertices,
        sigma2: em.sigma2,
        posteriors: em.posteriors,
        em_iterations: em.iterations,
        em_seconds,
        projection_seconds: clock.elapsed().as_secs_f64(),
        counts,
    })
}

#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub state: TrackingState,
    pub j_free: f64,
    /// The failure check fired and library retries ran.
    pub recovery_invoked: bool,
    /// A retried candidate replaced the direct one.
    pub recovery_selected: bool,
    /// The frame's descriptor and state were added to the library.
    pub stored: bool,
    /// Registrations run this frame, including the direct one.
    pub candidates_tried: usize,
    pub em_iterations: usize,
    /// The cloud was empty or carried no posterior mass; the previous state
    /// was returned.
    pub skipped: bool,
    pub timings: StageTimings,
    pub counts: StageCounts,
}

/// One step of the main loop. On an empty cloud or total occlusion the
/// previous state comes back unchanged. Otherwise the direct candidate is
/// kept and stored if its free-space energy is below `tau`; if not, the
/// `knn_retries` nearest library states are re-tracked and the candidate
/// with the lowest energy wins, the direct one included and preferred on
/// ties.
#[allow(clippy::too_many_arguments)]
pub fn track_frame(
    frame_index: i64,
    frame: &FrameObservation,
    prev_state: &TrackingState,
    model: &TrackedModel,
    ws: &mut EmWorkspace,
    lib: &mut DescriptorLibrary,
    params: &Parameters,
    stages: &Stages,
    pins: &CorrespondenceSet,
) -> Result<FrameOutcome> {
    let mut timings = StageTimings::default();
    let unchanged = |timings: StageTimings| FrameOutcome {
        state: prev_state.clone(),
        j_free: free_space_energy(&prev_state.vertices, frame, params.k_free),
        recovery_invoked: false,
        recovery_selected: false,
        stored: false,
        candidates_tried: 0,
        em_iterations: 0,
        skipped: true,
        timings,
        counts: StageCounts::default(),
    };
    if frame.cloud.nrows() == 0 {
        return Ok(unchanged(timings));
    }

    let direct = match track(frame, &prev_state.vertices, model, ws, params, stages, pins) {
        Ok(c) => c,
        Err(Error::TotalOcclusion) => return Ok(unchanged(timings)),
        Err(e) => return Err(e),
    };
    timings.em = direct.em_seconds;
    timings.projection = direct.projection_seconds;
    let em_iterations = direct.em_iterations;
    let mut counts = direct.counts;
    let j_direct = free_space_energy(&direct.vertices, frame, params.k_free);
    let finish = |c: Candidate| TrackingState {
        vertices: c.vertices,
        sigma2: c.sigma2,
        posteriors: c.posteriors,
        frame_index,
    };

    if !stages.recovery {
        return Ok(FrameOutcome {
            state: finish(direct),
            j_free: j_direct,
            recovery_invoked: false,
            recovery_selected: false,
            stored: false,
            candidates_tried: 1,
            em_iterations,
            skipped: false,
            timings,
            counts,
        });
    }

    let clock = Instant::now();
    counts.descriptor += 1;
    let descriptor = shape_descriptor(&frame.cloud, &Vector3::zeros());
    timings.descriptor = clock.elapsed().as_secs_f64();

    if j_direct < params.tau {
        lib.add(frame_index, descriptor, direct.vertices.clone())?;
        return Ok(FrameOutcome {
            state: finish(direct),
            j_free: j_direct,
            recovery_invoked: false,
            recovery_selected: false,
            stored: true,
            candidates_tried: 1,
            em_iterations,
            skipped: false,
            timings,
            counts,
        });
    }

    let clock = Instant::now();
    counts.recovery += 1;
    let mut best = (j_direct, direct, false);
    let mut tried = 1;
    let starts: Vec<Points> =
        lib.query_knn(&descriptor, params.knn_retries).into_iter().map(|(_, e)| e.state.clone()).collect();
    for start in &starts {
        tried += 1;
        let candidate = match track(frame, start, model, ws, params, stages, pins) {
            Ok(c) => c,
            // a library state that cannot be registered is just a bad retry
            Err(Error::TotalOcclusion | Error::SingularSystem | Error::NoConvergence { .. }) => continue,
            Err(e) => return Err(e),
        };
        counts += candidate.counts;
        let j = free_space_energy(&candidate.vertices, frame, params.k_free);
        if j < best.0 {
            best = (j, candidate, true);
        }
    }
    timings.recovery = clock.elapsed().as_secs_f64();

    let (j, chosen, selected) = best;
    Ok(FrameOutcome {
        state: finish(chosen),
        j_free: j,
        recovery_invoked: true,
        recovery_selected: selected,
        stored: false,
        candidates_tried: tried,
        em_iterations,
        skipped: false,
        timings,
        counts,
    })
}

/// Owns everything that persists across frames.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub model: TrackedModel,
    pub params: Parameters,
    pub stages: Stages,
    pub workspace: EmWorkspace,
    pub library: DescriptorLibrary,
    pub state: TrackingState,
}

impl Tracker {
    /// The LLE neighborhood is capped at `M − 1` for small models.
    pub fn new(model: TrackedModel, params: Parameters, stages: Stages) -> Result<Self> {
        validate_model(&model).into_result()?;
        params.validate()?;
        let k = params.lle_neighbors.min(model.num_vertices() - 1);
        let workspace = EmWorkspace::new(&model.vertices, k)?;
        let state = TrackingState::initial(&model);
        Ok(Self { model, params, stages, workspace, library: DescriptorLibrary::new(), state })
    }

    pub fn with_library(mut self, library: DescriptorLibrary) -> Self {
        self.library = library;
        self
    }

    /// Starts from `vertices` instead of the template.
    pub fn with_start(mut self, vertices: Points) -> Result<Self> {
        if vertices.nrows() != self.model.num_vertices() {
            return Err(Error::InvalidInput(format!(
                "start state has {} vertices, model has {}",
                vertices.nrows(),
                self.model.num_vertices()
            )));
        }
        self.state.vertices = vertices;
        Ok(self)
    }

    pub fn step(&mut self, frame_index: i64, frame: &FrameObservation, pins: &CorrespondenceSet) -> Result<FrameOutcome> {
        let outcome = track_frame(
            frame_index,
            frame,
            &self.state,
            &self.model,
            &mut self.workspace,
            &mut self.library,
            &self.params,
            &self.stages,
            pins,
        )?;
        self.state = outcome.state.clone();
        Ok(outcome)
    }
}
