//! Position-based dynamics for the scripted object.
//!
//! Each frame is `substeps` explicit steps. A step predicts positions under
//! gravity, pins the handles to their script positions, then runs `sweeps`
//! Gauss–Seidel passes over the distance constraints and table contact.
//! Friction damps the sliding velocity of particles resting on the table. Handles have zero inverse mass.

use nalgebra::Vector3;
use occtrack::Points;

use crate::scene::{cloth_edges, interpolate, ObjectSpec, SceneScript};

#[derive(Debug, Clone)]
pub struct Simulator {
    script: SceneScript,
    initial: Vec<Vector3<f64>>,
    x: Vec<Vector3<f64>>,
    v: Vec<Vector3<f64>>,
    edges: Vec<[usize; 2]>,
    rest: Vec<f64>,
    inv_mass: Vec<f64>,
    frame: usize,
}

impl Simulator {
    /// At frame 0 the object is in its template configuration.
    pub fn new(script: &SceneScript) -> Self {
        let (points, model_edges) = script.initial_model();
        let initial: Vec<Vector3<f64>> = (0..points.nrows()).map(|r| occtrack::point(&points, r)).collect();
        let edges = match &script.object {
            ObjectSpec::Rope { .. } => model_edges,
            ObjectSpec::Cloth { rows, cols, .. } => cloth_edges(*rows, *cols, true),
        };
        let rest = edges.iter().map(|&[i, j]| (initial[i] - initial[j]).norm()).collect();
        let mut inv_mass = vec![1.0; initial.len()];
        for h in &script.handles {
            inv_mass[h.vertex] = 0.0;
        }
        let mut sim = Self {
            script: script.clone(),
            x: initial.clone(),
            v: vec![Vector3::zeros(); initial.len()],
            initial,
            edges,
            rest,
            inv_mass,
            frame: 0,
        };
        sim.place_handles(0.0);
        sim
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    /// World-frame vertex positions at the current frame.
    pub fn positions(&self) -> Points {
        Points::from_fn(self.x.len(), |r, c| self.x[r][c])
    }

    fn place_handles(&mut self, t: f64) {
        for h in &self.script.handles {
            self.x[h.vertex] = self.initial[h.vertex] + interpolate(&h.keyframes, t);
        }
    }

    /// Advances one frame.
    pub fn step(&mut self) {
        let phys = self.script.physics.clone();
        let h = 1.0 / (phys.fps * phys.substeps as f64);
        let floor = self.script.table.as_ref().map(|t| (t.height + self.script.rest_offset(), t.half_extents));
        let gravity = Vector3::new(0.0, 0.0, -phys.gravity);
        let mut p = self.x.clone();
        for sub in 0..phys.substeps {
            let t = self.frame as f64 + (sub + 1) as f64 / phys.substeps as f64;
            for i in 0..p.len() {
                if self.inv_mass[i] > 0.0 {
                    self.v[i] = (self.v[i] + gravity * h) * (1.0 - phys.damping);
                    p[i] = self.x[i] + self.v[i] * h;
                }
            }
            for hd in &self.script.handles {
                p[hd.vertex] = self.initial[hd.vertex] + interpolate(&hd.keyframes, t);
            }
            for sweep in 0..phys.sweeps {
                // alternate direction so corrections travel both ways along a chain
                let m = self.edges.len();
                for k in 0..m {
                    let e = if sweep % 2 == 0 { k } else { m - 1 - k };
                    let [i, j] = self.edges[e];
                    let w = self.inv_mass[i] + self.inv_mass[j];
                    if w == 0.0 {
                        continue;
                    }
                    let d = p[j] - p[i];
                    let len = d.norm();
                    if len < 1e-12 {
                        continue;
                    }
                    let corr = d * ((len - self.rest[e]) / (len * w));
                    p[i] += corr * self.inv_mass[i];
                    p[j] -= corr * self.inv_mass[j];
                }
                if let Some((z0, ext)) = floor {
                    for q in p.iter_mut() {
                        if q.x.abs() <= ext[0] && q.y.abs() <= ext[1] && q.z < z0 {
                            q.z = z0;
                        }
                    }
                }
            }
            for i in 0..p.len() {
                if self.inv_mass[i] > 0.0 {
                    self.v[i] = (p[i] - self.x[i]) / h;
                    if let Some((z0, _)) = floor {
                        if p[i].z <= z0 + 1e-9 {
                            // kinetic friction while resting on the table
                            self.v[i].x *= 1.0 - phys.friction;
                            self.v[i].y *= 1.0 - phys.friction;
                            self.v[i].z = self.v[i].z.max(0.0);
                        }
                    }
                }
                self.x[i] = p[i];
            }
        }
        self.frame += 1;
    }
}

/// World-frame ground truth for frames `0..script.frames`.
pub fn simulate(script: &SceneScript) -> Vec<Points> {
    let mut sim = Simulator::new(script);
    let mut out = Vec::with_capacity(script.frames);
    for t in 0..script.frames {
        if t > 0 {
            sim.step();
        }
        out.push(sim.positions());
    }
    out
}

/// World-frame positions at frame `t`.
pub fn simulate_object(script: &SceneScript, t: usize) -> Points {
    let mut sim = Simulator::new(script);
    for _ in 0..t {
        sim.step();
    }
    sim.positions()
}
