//! Exact assignment and the matching-based earth mover's distance.

/// Minimum-cost perfect matching on a square cost matrix (shortest
/// augmenting path with potentials, O(n^3)).
///
/// Returns `assignment[row] = col` and the total cost.
pub fn hungarian(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    assert!(cost.iter().all(|r| r.len() == n), "cost matrix must be square");
    // 1-based internals; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum();
    (assignment, total)
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn cost_matrix(a: &[[f64; 2]], b: &[[f64; 2]]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|p| b.iter().map(|q| dist(*p, *q)).collect())
        .collect()
}

/// Matching of equal-size point sets: `(assignment, per-point distances)`.
pub fn match_points(a: &[[f64; 2]], b: &[[f64; 2]]) -> (Vec<usize>, Vec<f64>) {
    assert_eq!(a.len(), b.len(), "EMD needs equal-size point sets");
    let cost = cost_matrix(a, b);
    let (assign, _) = hungarian(&cost);
    let d = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).collect();
    (assign, d)
}

/// Mean matched distance under the optimal one-to-one matching.
pub fn emd(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let (_, d) = match_points(a, b);
    d.iter().sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn brute_force(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
        fn rec(a: &[[f64; 2]], b: &[[f64; 2]], used: &mut Vec<bool>, i: usize) -> f64 {
            if i == a.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..b.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(dist(a[i], b[j]) + rec(a, b, used, i + 1));
                    used[j] = false;
                }
            }
            best
        }
        rec(a, b, &mut vec![false; b.len()], 0) / a.len() as f64
    }

    fn random_set(rng: &mut Rng, n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|_| [rng.uniform(), rng.uniform()]).collect()
    }

    #[test]
    fn five_points_match_enumeration() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let a = random_set(&mut rng, 5);
            let b = random_set(&mut rng, 5);
            assert!((emd(&a, &b) - brute_force(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = Rng::new(2);
        let a = random_set(&mut rng, 20);
        let mut b = a.clone();
        b.reverse();
        assert!(emd(&a, &b).abs() < 1e-15);
    }

    #[test]
    fn symmetric_and_triangle() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let a = random_set(&mut rng, 12);
            let b = random_set(&mut rng, 12);
            let c = random_set(&mut rng, 12);
            let ab = emd(&a, &b);
            assert!((ab - emd(&b, &a)).abs() < 1e-12);
            assert!(emd(&a, &c) <= ab + emd(&b, &c) + 1e-12);
        }
    }

    #[test]
    fn assignment_is_permutation() {
        let mut rng = Rng::new(9);
        let a = random_set(&mut rng, 30);
        let b = random_set(&mut rng, 30);
        let (assign, _) = match_points(&a, &b);
        let mut seen = assign.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
    }
}
