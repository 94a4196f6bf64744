use serde::{Deserialize, Serialize};

use crate::error::{PamError, Result};

/// Points per observation.
pub const OBS_POINTS: usize = 64;
/// Parameters of every action primitive: two 2D workspace points.
pub const ACTION_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// Board sweep from `params[0..2]` to `params[2..4]`.
    Sweep,
    /// Pick at `params[0..2]`, place at `params[2..4]`.
    PickPlace,
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

/// A primitive with its four parameters in workspace coordinates (`[0, 1]^2`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPrimitive {
    pub kind: ActionKind,
    pub params: [f64; ACTION_DIM],
}

impl ActionPrimitive {
    pub fn new(kind: ActionKind, start: [f64; 2], end: [f64; 2]) -> Self {
        Self {
            kind,
            params: [start[0], start[1], end[0], end[1]],
        }
    }

    pub fn start(&self) -> [f64; 2] {
        [self.params[0], self.params[1]]
    }

    pub fn end(&self) -> [f64; 2] {
        [self.params[2], self.params[3]]
    }

    pub fn in_workspace(&self) -> bool {
        self.params.iter().all(|&v| in_unit(v))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.params.iter().all(|v| v.is_finite()) || !self.in_workspace() {
            return Err(PamError::invariant(format!(
                "action {:?} lies outside the workspace",
                self.params
            )));
        }
        Ok(())
    }

    /// Model-space parameters in `[-1, 1]`.
    pub fn normalized(&self) -> [f64; ACTION_DIM] {
        self.params.map(|v| 2.0 * v - 1.0)
    }

    /// Maps model-space parameters back to the workspace, clamping to it.
    pub fn from_normalized(kind: ActionKind, x: &[f64]) -> Self {
        let mut params = [0.0; ACTION_DIM];
        for (p, v) in params.iter_mut().zip(x) {
            *p = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
        }
        Self { kind, params }
    }

    /// Euclidean distance between the normalized parameter vectors.
    pub fn normalized_distance(&self, other: &ActionPrimitive) -> f64 {
        self.normalized()
            .iter()
            .zip(other.normalized())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Fixed-size 2D point cloud observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<[f64; 2]>,
}

impl PointSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        let p = Self { points };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != OBS_POINTS {
            return Err(PamError::invariant(format!(
                "observation has {} points, expected {OBS_POINTS}",
                self.points.len()
            )));
        }
        if let Some(p) = self
            .points
            .iter()
            .find(|p| !(in_unit(p[0]) && in_unit(p[1])))
        {
            return Err(PamError::invariant(format!(
                "observation point {p:?} outside the workspace"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
