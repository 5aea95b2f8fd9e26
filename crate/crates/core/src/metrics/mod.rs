//! Chamfer Distance and Earth Mover's Distance, with subgradients for training.
//!
//! Both metrics use plain (non-squared) Euclidean distances and average over
//! the cloud sizes:
//!
//! * `CD(S1, S2) = mean_x min_y |x - y| + mean_y min_x |y - x|`
//! * `EMD(S1, S2) = min over bijections phi of mean_x |x - phi(x)|`
//!
//! EMD is only defined for clouds of equal size.

mod auction;
mod hungarian;
mod kdtree;

pub use auction::auction;
pub use hungarian::hungarian;
pub use kdtree::KdTree;

use crate::error::{Error, Result};
use crate::pointcloud::{dist, dist2, Point, PointCloud};

/// Above this many target points nearest-neighbor queries go through a k-d tree.
pub const BRUTE_FORCE_MAX: usize = 512;

/// Largest cloud the exact (cubic) EMD solver accepts by default.
pub const DEFAULT_EXACT_CAP: usize = 1024;

/// Default final epsilon of the auction solver, in the cloud's length unit.
pub const DEFAULT_AUCTION_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChamferMode {
    /// Euclidean distances, as used for evaluation.
    #[default]
    Euclidean,
    /// Squared distances, as in much existing point-completion code.
    Squared,
}

fn require_non_empty(a: &[Point], b: &[Point], op: &'static str) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        Err(Error::EmptyInput(op))
    } else {
        Ok(())
    }
}

/// For each query point, the index and squared distance of its nearest target.
/// Ties go to the lowest target index.
pub fn nearest_neighbors(queries: &[Point], targets: &[Point]) -> Vec<(usize, f64)> {
    if targets.len() > BRUTE_FORCE_MAX {
        let tree = KdTree::build(targets);
        queries
            .iter()
            .map(|q| tree.nearest(q).expect("non-empty targets"))
            .collect()
    } else {
        queries.iter().map(|q| nearest_brute(q, targets)).collect()
    }
}

fn nearest_brute(q: &Point, targets: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, t) in targets.iter().enumerate() {
        let d = dist2(q, t);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn directed_term(nn: &[(usize, f64)], mode: ChamferMode) -> f64 {
    let sum: f64 = match mode {
        ChamferMode::Euclidean => nn.iter().map(|(_, d2)| d2.sqrt()).sum(),
        ChamferMode::Squared => nn.iter().map(|(_, d2)| *d2).sum(),
    };
    sum / nn.len() as f64
}

pub fn chamfer_points(a: &[Point], b: &[Point], mode: ChamferMode) -> Result<f64> {
    require_non_empty(a, b, "chamfer")?;
    let ab = directed_term(&nearest_neighbors(a, b), mode);
    let ba = directed_term(&nearest_neighbors(b, a), mode);
    Ok(ab + ba)
}

/// Symmetric Chamfer Distance with Euclidean point distances.
pub fn chamfer(s1: &PointCloud, s2: &PointCloud) -> Result<f64> {
    chamfer_points(s1.points(), s2.points(), ChamferMode::Euclidean)
}

/// Double-loop reference implementation.
pub fn chamfer_brute_force(a: &[Point], b: &[Point]) -> Result<f64> {
    require_non_empty(a, b, "chamfer")?;
    let term = |from: &[Point], to: &[Point]| {
        from.iter()
            .map(|p| nearest_brute(p, to).1.sqrt())
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(term(a, b) + term(b, a))
}

/// Chamfer value and its subgradient w.r.t. the points of `a`, holding each
/// nearest-neighbor choice fixed. Coincident pairs contribute nothing.
pub fn chamfer_with_grad(a: &[Point], b: &[Point], mode: ChamferMode) -> Result<(f64, Vec<Point>)> {
    require_non_empty(a, b, "chamfer")?;
    let ab = nearest_neighbors(a, b);
    let ba = nearest_neighbors(b, a);
    let value = directed_term(&ab, mode) + directed_term(&ba, mode);

    let mut grad = vec![[0.0; 3]; a.len()];
    let mut add = |i: usize, other: &Point, d2: f64, weight: f64| {
        let x = &a[i];
        let factor = match mode {
            ChamferMode::Euclidean if d2 > 0.0 => weight / d2.sqrt(),
            ChamferMode::Euclidean => return,
            ChamferMode::Squared => 2.0 * weight,
        };
        for k in 0..3 {
            grad[i][k] += factor * (x[k] - other[k]);
        }
    };
    let wa = 1.0 / a.len() as f64;
    let wb = 1.0 / b.len() as f64;
    for (i, &(j, d2)) in ab.iter().enumerate() {
        add(i, &b[j], d2, wa);
    }
    for (j, &(i, d2)) in ba.iter().enumerate() {
        add(i, &b[j], d2, wb);
    }
    Ok((value, grad))
}

/// A bijection between two equally sized clouds and its mean matched distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `assignment[i]` is the index in the second cloud matched to point `i` of the first.
    pub assignment: Vec<usize>,
    pub cost: f64,
    /// True when produced by the exact solver.
    pub exact: bool,
}

impl Matching {
    pub fn from_assignment(a: &[Point], b: &[Point], assignment: Vec<usize>, exact: bool) -> Self {
        let cost = matched_cost(a, b, &assignment);
        Self {
            assignment,
            cost,
            exact,
        }
    }

    pub fn is_bijection(&self, n: usize) -> bool {
        if self.assignment.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        self.assignment
            .iter()
            .all(|&j| j < n && !std::mem::replace(&mut seen[j], true))
    }

    /// Errors unless the matching is a bijection whose stored cost matches a recomputation.
    pub fn validate(&self, a: &[Point], b: &[Point]) -> Result<()> {
        if a.len() != b.len() || !self.is_bijection(a.len()) {
            return Err(Error::Consistency("matching is not a bijection between the clouds".into()));
        }
        let recomputed = matched_cost(a, b, &self.assignment);
        if (recomputed - self.cost).abs() > 1e-9 * recomputed.abs().max(1.0) {
            return Err(Error::Consistency(format!(
                "stale matching: stored cost {} but recomputed {}",
                self.cost, recomputed
            )));
        }
        Ok(())
    }
}

/// Mean distance under an explicit assignment.
pub fn matched_cost(a: &[Point], b: &[Point], assignment: &[usize]) -> f64 {
    let sum: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| dist(&a[i], &b[j]))
        .sum();
    sum / a.len().max(1) as f64
}

fn check_emd_inputs(a: &[Point], b: &[Point]) -> Result<()> {
    require_non_empty(a, b, "emd")?;
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "EMD needs a bijection, so both clouds must have the same number of points ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Optimal matching by the Hungarian algorithm, refusing clouds larger than `cap`.
pub fn emd_exact_capped(a: &[Point], b: &[Point], cap: usize) -> Result<Matching> {
    check_emd_inputs(a, b)?;
    let n = a.len();
    if n > cap {
        return Err(Error::Capacity(format!(
            "exact EMD is limited to {cap} points (got {n}); use emd_approx"
        )));
    }
    let cost: Vec<f64> = a
        .iter()
        .flat_map(|p| b.iter().map(move |q| dist(p, q)))
        .collect();
    Ok(Matching::from_assignment(a, b, hungarian(&cost, n), true))
}

pub fn emd_exact(s1: &PointCloud, s2: &PointCloud) -> Result<Matching> {
    emd_exact_capped(s1.points(), s2.points(), DEFAULT_EXACT_CAP)
}

/// Auction solution whose mean cost is within `eps` of the optimum.
pub fn emd_approx_points(a: &[Point], b: &[Point], eps: f64) -> Result<Matching> {
    check_emd_inputs(a, b)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::usage(format!("auction epsilon must be positive, got {eps}")));
    }
    Ok(Matching::from_assignment(a, b, auction(a, b, eps), false))
}

pub fn emd_approx(s1: &PointCloud, s2: &PointCloud, eps: f64) -> Result<Matching> {
    emd_approx_points(s1.points(), s2.points(), eps)
}

/// Gradient of the mean matched distance w.r.t. the first cloud with the matching held fixed.
pub fn emd_grad(a: &[Point], b: &[Point], matching: &Matching) -> Result<Vec<Point>> {
    matching.validate(a, b)?;
    let w = 1.0 / a.len() as f64;
    Ok(matching
        .assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let d = dist(&a[i], &b[j]);
            if d > 0.0 {
                let f = w / d;
                [
                    f * (a[i][0] - b[j][0]),
                    f * (a[i][1] - b[j][1]),
                    f * (a[i][2] - b[j][2]),
                ]
            } else {
                [0.0; 3]
            }
        })
        .collect())
}

/// How EMD is solved inside training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmdSolver {
    Exact,
    Auction { eps: f64 },
    /// Exact up to `exact_max` points, auction above.
    Auto { exact_max: usize, eps: f64 },
}

impl Default for EmdSolver {
    fn default() -> Self {
        EmdSolver::Auto {
            exact_max: 128,
            eps: DEFAULT_AUCTION_EPS,
        }
    }
}

impl EmdSolver {
    pub fn solve(&self, a: &[Point], b: &[Point]) -> Result<Matching> {
        match *self {
            EmdSolver::Exact => emd_exact_capped(a, b, DEFAULT_EXACT_CAP),
            EmdSolver::Auction { eps } => emd_approx_points(a, b, eps),
            EmdSolver::Auto { exact_max, eps } => {
                if a.len() <= exact_max {
                    emd_exact_capped(a, b, exact_max)
                } else {
                    emd_approx_points(a, b, eps)
                }
            }
        }
    }
}

/// EMD value and fixed-matching gradient w.r.t. `a`.
pub fn emd_with_grad(a: &[Point], b: &[Point], solver: EmdSolver) -> Result<(f64, Vec<Point>)> {
    let m = solver.solve(a, b)?;
    let g = emd_grad(a, b, &m)?;
    Ok((m.cost, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Source;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    fn pc(pts: &[Point]) -> PointCloud {
        PointCloud::new(pts.to_vec(), Source::Unknown).unwrap()
    }

    /// Minimum over all n! bijections, enumerated with Heap's algorithm.
    fn brute_force_emd(a: &[Point], b: &[Point]) -> f64 {
        let n = a.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut c = vec![0usize; n];
        let mut best = matched_cost(a, b, &perm);
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                best = best.min(matched_cost(a, b, &perm));
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        best
    }

    #[test]
    fn chamfer_hand_values() {
        let a = pc(&[[0.0, 0.0, 0.0]]);
        let b = pc(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(matches!(chamfer(&a, &PointCloud::default()), Err(Error::EmptyInput(_))));
        assert_eq!(chamfer_points(a.points(), b.points(), ChamferMode::Squared).unwrap(), 2.0);
    }

    #[test]
    fn chamfer_accelerated_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for (na, nb) in [(256, 256), (700, 900), (1500, 40)] {
            let a = cloud(na, &mut rng);
            let b = cloud(nb, &mut rng);
            let fast = chamfer_points(&a, &b, ChamferMode::Euclidean).unwrap();
            let slow = chamfer_brute_force(&a, &b).unwrap();
            assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn chamfer_grad_cases() {
        let a = [[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]];
        let (v, g) = chamfer_with_grad(&a, &a, ChamferMode::Euclidean).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().flatten().all(|x| *x == 0.0));

        let (_, g) = chamfer_with_grad(&[[0.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]], ChamferMode::Euclidean).unwrap();
        assert_eq!(g, vec![[-2.0, 0.0, 0.0]]);
    }

    #[test]
    fn chamfer_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [ChamferMode::Euclidean, ChamferMode::Squared] {
            let a = cloud(16, &mut rng);
            let b = cloud(16, &mut rng);
            let (_, g) = chamfer_with_grad(&a, &b, mode).unwrap();
            let h = 1e-6;
            for i in 0..a.len() {
                for k in 0..3 {
                    let mut p = a.clone();
                    p[i][k] += h;
                    let mut m = a.clone();
                    m[i][k] -= h;
                    let fd = (chamfer_points(&p, &b, mode).unwrap() - chamfer_points(&m, &b, mode).unwrap()) / (2.0 * h);
                    let err = (fd - g[i][k]).abs() / fd.abs().max(g[i][k].abs()).max(1e-8);
                    assert!(err < 1e-5, "mode {mode:?} point {i} axis {k}: {fd} vs {}", g[i][k]);
                }
            }
        }
    }

    #[test]
    fn emd_exact_small_cases() {
        let a = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let m = emd_exact_capped(&a, &b, 10).unwrap();
        assert_eq!(m.cost, 0.0);
        assert_eq!(m.assignment, vec![1, 0]);
        let same = emd_exact_capped(&a, &a, 10).unwrap();
        assert_eq!(same.cost, 0.0);
    }

    #[test]
    fn emd_exact_matches_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for n in 1..=6 {
            for _ in 0..20 {
                let a = cloud(n, &mut rng);
                let b = cloud(n, &mut rng);
                let m = emd_exact_capped(&a, &b, 10).unwrap();
                assert!(m.is_bijection(n));
                assert!((m.cost - brute_force_emd(&a, &b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn emd_errors() {
        let a = [[0.0; 3], [1.0, 0.0, 0.0]];
        let b = [[0.0; 3]];
        assert!(matches!(emd_exact_capped(&a, &b, 10), Err(Error::Contract(_))));
        assert!(matches!(emd_approx_points(&a, &b, 1e-3), Err(Error::Contract(_))));
        assert!(matches!(emd_exact_capped(&a, &a, 1), Err(Error::Capacity(_))));
        assert!(emd_approx_points(&a, &a, 0.0).is_err());
    }

    #[test]
    fn auction_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = cloud(128, &mut rng);
            let b = cloud(128, &mut rng);
            let exact = emd_exact_capped(&a, &b, 1024).unwrap();
            let approx = emd_approx_points(&a, &b, 1e-4).unwrap();
            assert!(approx.is_bijection(128));
            assert!(approx.cost >= exact.cost - 1e-12);
            assert!(approx.cost <= exact.cost + 1e-4 + 1e-12);
        }
        let a = cloud(64, &mut rng);
        assert_eq!(emd_approx_points(&a, &a, 1e-4).unwrap().cost, 0.0);
    }

    #[test]
    fn emd_grad_cases() {
        let a = [[0.0; 3], [1.0, 0.0, 0.0]];
        let m = emd_exact_capped(&a, &a, 10).unwrap();
        assert!(emd_grad(&a, &a, &m).unwrap().iter().flatten().all(|v| *v == 0.0));

        let p = [[0.0, 3.0, 4.0]];
        let q = [[0.0; 3]];
        let m = emd_exact_capped(&p, &q, 10).unwrap();
        let g = emd_grad(&p, &q, &m).unwrap();
        assert!(((g[0][1].powi(2) + g[0][2].powi(2)).sqrt() - 1.0).abs() < 1e-15);

        let mut stale = emd_exact_capped(&a, &[[5.0, 0.0, 0.0], [6.0, 0.0, 0.0]], 10).unwrap();
        stale.cost += 0.5;
        assert!(matches!(
            emd_grad(&a, &[[5.0, 0.0, 0.0], [6.0, 0.0, 0.0]], &stale),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn emd_grad_matches_finite_differences_with_refreshed_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a = cloud(8, &mut rng);
        let b = cloud(8, &mut rng);
        let m = emd_exact_capped(&a, &b, 10).unwrap();
        let g = emd_grad(&a, &b, &m).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            for k in 0..3 {
                let mut p = a.clone();
                p[i][k] += h;
                let mut q = a.clone();
                q[i][k] -= h;
                let fd = (emd_exact_capped(&p, &b, 10).unwrap().cost - emd_exact_capped(&q, &b, 10).unwrap().cost) / (2.0 * h);
                let err = (fd - g[i][k]).abs() / fd.abs().max(g[i][k].abs()).max(1e-8);
                assert!(err < 1e-4);
            }
        }
    }
}
