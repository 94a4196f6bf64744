//! Desk-scale simulated tasks and their completion metrics.
//!
//! Granular pile shaping pushes 200 point grains with a sweeping board; rope
//! shaping drags nodes of a closed 40-node chain with pick-and-place. Both
//! report IoU, coverage and EMD against a goal shape.

pub mod emd;
mod granular;
mod grid;
mod rope;
mod target;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use granular::{GranularState, BOARD_HALF_WIDTH, GRAINS, SWEEP_NOISE};
pub use grid::{cell_center, cell_of, farthest_point_sample, rasterize_polyline, Grid, GRID};
pub use rope::{RopeState, FOLLOW_DECAY, RELAX_ITERATIONS};
pub use target::{circle_nodes, Rect, TargetConfig, TargetShape, TargetSpec};

use crate::error::{PamError, Result};
use crate::policy::{ActionKind, ActionPrimitive, PointSet, OBS_POINTS};
use crate::rng::Rng;

pub const ROPE_NODES: usize = 40;
/// Points on each side of the EMD matching.
pub const EMD_POINTS: usize = 64;
/// Rope polyline resampling density used for observations and EMD.
const ROPE_SAMPLES_PER_SEGMENT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Granular,
    Rope,
}

impl Task {
    pub fn action_kind(self) -> ActionKind {
        match self {
            Task::Granular => ActionKind::Sweep,
            Task::Rope => ActionKind::PickPlace,
        }
    }

    pub fn default_max_steps(self) -> usize {
        match self {
            Task::Granular => 20,
            Task::Rope => 15,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Granular => "granular",
            Task::Rope => "rope",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = PamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "granular" => Ok(Task::Granular),
            "rope" => Ok(Task::Rope),
            other => Err(PamError::config(format!("unknown task {other:?} (granular|rope)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvState {
    Granular(GranularState),
    Rope(RopeState),
}

impl EnvState {
    pub fn task(&self) -> Task {
        match self {
            EnvState::Granular(_) => Task::Granular,
            EnvState::Rope(_) => Task::Rope,
        }
    }

    /// Points the state is made of, densified for the rope.
    pub fn sample_points(&self) -> Vec<[f64; 2]> {
        match self {
            EnvState::Granular(g) => g.grains.clone(),
            EnvState::Rope(r) => r.dense_points(ROPE_SAMPLES_PER_SEGMENT),
        }
    }

    pub fn rasterize(&self) -> Grid {
        match self {
            EnvState::Granular(g) => {
                let mut grid = Grid::empty();
                for p in &g.grains {
                    grid.mark(*p);
                }
                grid
            }
            EnvState::Rope(r) => rasterize_polyline(&r.nodes, true),
        }
    }

    /// Fixed-size observation for the policy.
    pub fn observe(&self) -> PointSet {
        let pts = farthest_point_sample(&self.sample_points(), OBS_POINTS);
        PointSet { points: pts }
    }

    pub fn validate(&self) -> Result<()> {
        let pts: &[[f64; 2]] = match self {
            EnvState::Granular(g) => &g.grains,
            EnvState::Rope(r) => &r.nodes,
        };
        if pts
            .iter()
            .any(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
        {
            return Err(PamError::invariant("state point outside the workspace"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub iou: f64,
    pub coverage: f64,
    pub emd: f64,
}

/// A task together with its goal.
#[derive(Clone, Debug)]
pub struct Env {
    pub task: Task,
    pub target: TargetSpec,
}

impl Env {
    pub fn new(cfg: &TargetConfig) -> Result<Self> {
        Ok(Self {
            task: cfg.task,
            target: TargetSpec::from_config(cfg)?,
        })
    }

    pub fn standard(task: Task) -> Self {
        Self::new(&TargetConfig::default_for(task)).expect("default targets are valid")
    }

    pub fn reset(&self, rng: &mut Rng) -> EnvState {
        match self.task {
            Task::Granular => EnvState::Granular(granular::reset(rng)),
            Task::Rope => EnvState::Rope(rope::reset(
                &self.target.rope_nodes,
                self.target.rope_rest_length(),
                rng,
            )),
        }
    }

    /// Applies one primitive. `noise` drives actuation noise; `None` gives the
    /// deterministic transition.
    pub fn step(&self, state: &EnvState, action: &ActionPrimitive, noise: Option<&mut Rng>) -> Result<EnvState> {
        action.validate()?;
        if action.kind != self.task.action_kind() {
            return Err(PamError::config(format!(
                "{:?} action given to the {} task",
                action.kind, self.task
            )));
        }
        match state {
            EnvState::Granular(g) if self.task == Task::Granular => {
                Ok(EnvState::Granular(granular::sweep(g, action, noise)))
            }
            EnvState::Rope(r) if self.task == Task::Rope => Ok(EnvState::Rope(rope::pick_place(r, action))),
            _ => Err(PamError::config("state does not belong to this task")),
        }
    }

    pub fn measure(&self, state: &EnvState) -> QualityMetrics {
        let raster = state.rasterize();
        if raster.count() == 0 {
            return QualityMetrics {
                iou: 0.0,
                coverage: 0.0,
                emd: std::f64::consts::SQRT_2,
            };
        }
        let inter = raster.intersection(&self.target.grid) as f64;
        let union = raster.union(&self.target.grid) as f64;
        QualityMetrics {
            iou: inter / union,
            coverage: inter / self.target.grid.count() as f64,
            emd: self.emd(state),
        }
    }

    pub fn emd(&self, state: &EnvState) -> f64 {
        let pts = farthest_point_sample(&state.sample_points(), EMD_POINTS);
        emd::emd(&pts, &self.target.points)
    }
}
