use serde::{Deserialize, Serialize};

use crate::policy::ActionPrimitive;
use crate::rng::Rng;

pub const GRAINS: usize = 200;
/// Half the board width: grains this close to the sweep line are carried.
pub const BOARD_HALF_WIDTH: f64 = 0.05;
pub const SWEEP_NOISE: f64 = 0.002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularState {
    pub grains: Vec<[f64; 2]>,
}

fn clamp01(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// One to three Gaussian blobs of grains.
pub fn reset(rng: &mut Rng) -> GranularState {
    let blobs = rng.int_inclusive(1, 3);
    let centers: Vec<([f64; 2], f64)> = (0..blobs)
        .map(|_| {
            (
                [rng.uniform_range(0.2, 0.8), rng.uniform_range(0.2, 0.8)],
                rng.uniform_range(0.05, 0.12),
            )
        })
        .collect();
    let grains = (0..GRAINS)
        .map(|i| {
            let (c, sd) = centers[i % blobs];
            clamp01([c[0] + sd * rng.normal(), c[1] + sd * rng.normal()])
        })
        .collect();
    GranularState { grains }
}

/// Swept-rectangle board push: every grain within `BOARD_HALF_WIDTH` of the
/// path and between start and end ends up on the board's leading edge at the
/// end point, keeping its lateral offset. Noise is added when `noise` is given.
pub fn sweep(state: &GranularState, action: &ActionPrimitive, noise: Option<&mut Rng>) -> GranularState {
    let ps = action.start();
    let pe = action.end();
    let d = [pe[0] - ps[0], pe[1] - ps[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let mut grains = state.grains.clone();
    if len > 1e-12 {
        let u = [d[0] / len, d[1] / len];
        let n = [-u[1], u[0]];
        for g in &mut grains {
            let rel = [g[0] - ps[0], g[1] - ps[1]];
            let along = rel[0] * u[0] + rel[1] * u[1];
            let lateral = rel[0] * n[0] + rel[1] * n[1];
            if lateral.abs() <= BOARD_HALF_WIDTH && (0.0..=len).contains(&along) {
                *g = clamp01([pe[0] + lateral * n[0], pe[1] + lateral * n[1]]);
            }
        }
    }
    if let Some(rng) = noise {
        for g in &mut grains {
            *g = clamp01([
                g[0] + SWEEP_NOISE * rng.normal(),
                g[1] + SWEEP_NOISE * rng.normal(),
            ]);
        }
    }
    GranularState { grains }
}
