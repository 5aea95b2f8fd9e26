//! Forward auction with epsilon scaling for the point-to-point assignment problem.
//!
//! Persons are points of the first cloud, objects points of the second, and
//! the benefit of a pair is the negated Euclidean distance. When a phase ends
//! every person is assigned and epsilon-complementary slackness holds, so the
//! summed distance is within `n * eps` of optimal (mean within `eps`).

use std::collections::VecDeque;

use crate::pointcloud::{dist, Point};

/// Ratio between successive epsilon values.
const SCALING: f64 = 5.0;

/// Returns `assignment[i] = j`. `eps_final` must be positive.
pub fn auction(a: &[Point], b: &[Point], eps_final: f64) -> Vec<usize> {
    let n = a.len();
    assert_eq!(n, b.len());
    assert!(eps_final > 0.0 && eps_final.is_finite());
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0];
    }

    let max_cost = a
        .iter()
        .flat_map(|p| b.iter().map(move |q| dist(p, q)))
        .fold(0.0, f64::max);
    let mut prices = vec![0.0; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut assigned: Vec<Option<usize>> = vec![None; n];

    let mut eps = (max_cost / 2.0).max(eps_final);
    loop {
        owner.iter_mut().for_each(|o| *o = None);
        assigned.iter_mut().for_each(|o| *o = None);
        let mut queue: VecDeque<usize> = (0..n).collect();
        while let Some(i) = queue.pop_front() {
            let p = &a[i];
            let (mut best_j, mut best, mut second) = (0usize, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (j, q) in b.iter().enumerate() {
                let value = -dist(p, q) - prices[j];
                if value > best {
                    second = best;
                    best = value;
                    best_j = j;
                } else if value > second {
                    second = value;
                }
            }
            prices[best_j] += best - second + eps;
            if let Some(prev) = owner[best_j].replace(i) {
                assigned[prev] = None;
                queue.push_back(prev);
            }
            assigned[i] = Some(best_j);
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps / SCALING).max(eps_final);
    }
    assigned.into_iter().map(|j| j.expect("auction phase assigns everyone")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swapped_pair() {
        let a = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(auction(&a, &b, 1e-6), vec![1, 0]);
    }

    #[test]
    fn identical_points_match_at_zero_cost() {
        let a: Vec<Point> = (0..20).map(|i| [i as f64, (i % 3) as f64, 0.0]).collect();
        let m = auction(&a, &a, 1e-4);
        let total: f64 = m.iter().enumerate().map(|(i, &j)| dist(&a[i], &a[j])).sum();
        assert_eq!(total, 0.0);
    }
}
