use serde::{Deserialize, Serialize};

/// Cells per side of the occupancy raster.
pub const GRID: usize = 64;

/// Binary `GRID x GRID` occupancy over the unit workspace, row = y.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    cells: Vec<bool>,
}

pub fn cell_of(p: [f64; 2]) -> (usize, usize) {
    let c = |v: f64| ((v * GRID as f64).floor() as isize).clamp(0, GRID as isize - 1) as usize;
    (c(p[0]), c(p[1]))
}

pub fn cell_center(cx: usize, cy: usize) -> [f64; 2] {
    [
        (cx as f64 + 0.5) / GRID as f64,
        (cy as f64 + 0.5) / GRID as f64,
    ]
}

impl Default for Grid {
    fn default() -> Self {
        Self::empty()
    }
}

impl Grid {
    pub fn empty() -> Self {
        Self {
            cells: vec![false; GRID * GRID],
        }
    }

    pub fn get(&self, cx: usize, cy: usize) -> bool {
        self.cells[cy * GRID + cx]
    }

    pub fn set(&mut self, cx: usize, cy: usize) {
        self.cells[cy * GRID + cx] = true;
    }

    pub fn mark(&mut self, p: [f64; 2]) {
        let (cx, cy) = cell_of(p);
        self.set(cx, cy);
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn intersection(&self, other: &Grid) -> usize {
        self.cells
            .iter()
            .zip(&other.cells)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn union(&self, other: &Grid) -> usize {
        self.cells
            .iter()
            .zip(&other.cells)
            .filter(|(a, b)| **a || **b)
            .count()
    }

    /// Every occupied cell grown to its 3x3 neighbourhood.
    pub fn dilated(&self) -> Grid {
        let mut out = Grid::empty();
        for cy in 0..GRID {
            for cx in 0..GRID {
                if !self.get(cx, cy) {
                    continue;
                }
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (x, y) = (cx as isize + dx, cy as isize + dy);
                        if (0..GRID as isize).contains(&x) && (0..GRID as isize).contains(&y) {
                            out.set(x as usize, y as usize);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn occupied_centers(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        for cy in 0..GRID {
            for cx in 0..GRID {
                if self.get(cx, cy) {
                    out.push(cell_center(cx, cy));
                }
            }
        }
        out
    }

    /// Row-major 0/1 values, row 0 at `y = 0`.
    pub fn to_counts(&self) -> Vec<u32> {
        self.cells.iter().map(|&c| u32::from(c)).collect()
    }
}

/// Polyline through `points` rasterized at sub-cell spacing, then dilated by one cell.
pub fn rasterize_polyline(points: &[[f64; 2]], closed: bool) -> Grid {
    let mut g = Grid::empty();
    let n = points.len();
    let segs = if closed { n } else { n.saturating_sub(1) };
    for i in 0..segs {
        let a = points[i];
        let b = points[(i + 1) % n];
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let steps = ((len * GRID as f64 * 4.0).ceil() as usize).max(1);
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            g.mark([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
        }
    }
    if n == 1 {
        g.mark(points[0]);
    }
    g.dilated()
}

/// Farthest-point subsample of `k` points, seeded at the point closest to
/// the centroid (lowest index on ties). Returns all points if `k >= len`.
/// Near-equal distances count as ties and go to the lowest index, so tiny
/// float perturbations of a symmetric input do not reshuffle the sample.
const TIE_TOLERANCE: f64 = 1e-12;

pub fn farthest_point_sample(points: &[[f64; 2]], k: usize) -> Vec<[f64; 2]> {
    if points.len() <= k {
        return points.to_vec();
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut first = 0;
    let mut best = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = d2(*p, [cx, cy]);
        if d < best - TIE_TOLERANCE {
            best = d;
            first = i;
        }
    }
    let mut chosen = vec![first];
    let mut min_d: Vec<f64> = points.iter().map(|p| d2(*p, points[first])).collect();
    while chosen.len() < k {
        let mut idx = 0;
        let mut far = -1.0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > far + TIE_TOLERANCE {
                far = d;
                idx = i;
            }
        }
        chosen.push(idx);
        for (i, p) in points.iter().enumerate() {
            let d = d2(*p, points[idx]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    chosen.into_iter().map(|i| points[i]).collect()
}
