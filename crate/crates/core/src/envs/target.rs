use serde::{Deserialize, Serialize};

use super::grid::{farthest_point_sample, rasterize_polyline, Grid, GRID};
use super::rope::dense_loop;
use super::{Task, EMD_POINTS, ROPE_NODES, ROPE_SAMPLES_PER_SEGMENT};
use crate::error::{PamError, Result};

/// Axis-aligned rectangle `[x0, y0, x1, y1]`.
pub type Rect = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetShape {
    /// Horizontal bar on top of a vertical stem.
    TGlyph { bar: Rect, stem: Rect },
    Circle { center: [f64; 2], radius: f64 },
}

/// Task-config file contents naming the goal shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub task: Task,
    pub shape: TargetShape,
}

impl TargetConfig {
    pub fn default_for(task: Task) -> Self {
        let shape = match task {
            Task::Granular => TargetShape::TGlyph {
                bar: [0.2, 0.72, 0.8, 0.78],
                stem: [0.47, 0.22, 0.53, 0.72],
            },
            Task::Rope => TargetShape::Circle {
                center: [0.5, 0.5],
                radius: 0.22,
            },
        };
        Self { task, shape }
    }
}

/// Goal raster plus the point set EMD is measured against.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSpec {
    pub task: Task,
    pub shape: TargetShape,
    pub grid: Grid,
    /// `EMD_POINTS` points sampled from the occupied goal cells.
    pub points: Vec<[f64; 2]>,
    /// Rope only: the goal position of every node.
    pub rope_nodes: Vec<[f64; 2]>,
}

fn rect_grid(g: &mut Grid, r: &Rect) {
    for cy in 0..GRID {
        for cx in 0..GRID {
            let x = (cx as f64 + 0.5) / GRID as f64;
            let y = (cy as f64 + 0.5) / GRID as f64;
            if x >= r[0] && x <= r[2] && y >= r[1] && y <= r[3] {
                g.set(cx, cy);
            }
        }
    }
}

pub fn circle_nodes(center: [f64; 2], radius: f64, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            [center[0] + radius * th.cos(), center[1] + radius * th.sin()]
        })
        .collect()
}

impl TargetSpec {
    pub fn from_config(cfg: &TargetConfig) -> Result<Self> {
        let mut rope_nodes = Vec::new();
        let grid = match (&cfg.task, &cfg.shape) {
            (Task::Granular, TargetShape::TGlyph { bar, stem }) => {
                let mut g = Grid::empty();
                rect_grid(&mut g, bar);
                rect_grid(&mut g, stem);
                g
            }
            (Task::Rope, TargetShape::Circle { center, radius }) => {
                if *radius <= 0.0
                    || center[0] - radius < 0.0
                    || center[0] + radius > 1.0
                    || center[1] - radius < 0.0
                    || center[1] + radius > 1.0
                {
                    return Err(PamError::config("circle target must lie inside the workspace"));
                }
                rope_nodes = circle_nodes(*center, *radius, ROPE_NODES);
                rasterize_polyline(&rope_nodes, true)
            }
            (task, shape) => {
                return Err(PamError::config(format!(
                    "target shape {shape:?} does not fit task {task:?}"
                )))
            }
        };
        if grid.count() == 0 {
            return Err(PamError::config("target region is empty"));
        }
        // A rope lying exactly on the circle must score zero EMD, so its
        // target points are sampled the same way as rope states.
        let source = if rope_nodes.is_empty() {
            grid.occupied_centers()
        } else {
            dense_loop(&rope_nodes, ROPE_SAMPLES_PER_SEGMENT)
        };
        let points = farthest_point_sample(&source, EMD_POINTS);
        if points.len() < EMD_POINTS {
            return Err(PamError::config(format!(
                "target covers only {} cells, need {EMD_POINTS}",
                points.len()
            )));
        }
        Ok(Self {
            task: cfg.task,
            shape: cfg.shape.clone(),
            grid,
            points,
            rope_nodes,
        })
    }

    /// Rest length of a rope whose relaxed shape is the goal circle.
    pub fn rope_rest_length(&self) -> f64 {
        match self.shape {
            TargetShape::Circle { radius, .. } => {
                2.0 * radius * (std::f64::consts::PI / ROPE_NODES as f64).sin()
            }
            TargetShape::TGlyph { .. } => 0.0,
        }
    }
}
