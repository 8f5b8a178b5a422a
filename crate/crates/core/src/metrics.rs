//! Chamfer distance and Earth Mover's distance between point sets.
//!
//! Both use unsquared Euclidean distances. Chamfer is available as a plain
//! value and as a differentiable graph expression; EMD is evaluation-only,
//! with an exact Hungarian solver and an epsilon-scaling auction for large
//! clouds.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::cloud::{bbox_diagonal, dist, Point};
use crate::error::{Error, Result};
use crate::kernels::knn;
use crate::tensor::{Graph, Real, Var};

/// Largest cloud accepted by [`emd_exact`].
pub const EMD_EXACT_MAX: usize = 1024;

/// Scale applied to diameter-normalized costs before the auction rounds them.
pub const AUCTION_COST_SCALE: f64 = 1e7;

fn nonempty(x: &[Point], y: &[Point]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Argument("chamfer distance needs two nonempty clouds".into()));
    }
    Ok(())
}

/// Mean distance from every point of `x` to its nearest point of `y`.
pub fn one_sided(x: &[Point], y: &[Point]) -> Result<f64> {
    nonempty(x, y)?;
    let nn = knn(x, y, 1)?;
    Ok(nn.distances.iter().sum::<f64>() / x.len() as f64)
}

/// Symmetric Chamfer distance: the two one-sided mean nearest-neighbor distances, summed.
pub fn chamfer(x: &[Point], y: &[Point]) -> Result<f64> {
    Ok(one_sided(x, y)? + one_sided(y, x)?)
}

fn points_of<T: Real>(g: &Graph<T>, v: Var) -> Result<Vec<Point>> {
    if g.cols(v) != 3 {
        return Err(Error::Argument(format!("expected an N x 3 cloud, got shape {:?}", g.shape(v))));
    }
    Ok(g.value(v)
        .chunks(3)
        .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
        .collect())
}

/// Differentiable one-sided term. Nearest neighbors are found on the current
/// values; the gradient reaches only the selected neighbor.
pub fn one_sided_graph<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let (xp, yp) = (points_of(g, x)?, points_of(g, y)?);
    nonempty(&xp, &yp)?;
    let nn = knn(&xp, &yp, 1)?;
    let matched = g.gather_rows(y, &nn.indices)?;
    let diff = g.sub(x, matched)?;
    let d = g.l2norm_rows(diff)?;
    Ok(g.reduce_mean(d)?)
}

/// Differentiable [`chamfer`] for `N x 3` and `M x 3` tensors.
pub fn chamfer_graph<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let a = one_sided_graph(g, x, y)?;
    let b = one_sided_graph(g, y, x)?;
    Ok(g.add(a, b)?)
}

/// Optimal bijection between two equal-size clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `mapping[i]` is the point of `Y` matched to point `i` of `X`.
    pub mapping: Vec<usize>,
    /// Mean matched distance.
    pub total_cost: f64,
}

fn same_size(x: &[Point], y: &[Point]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Argument(format!(
            "EMD needs equal-size clouds, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Argument("EMD needs nonempty clouds".into()));
    }
    Ok(())
}

fn cost_matrix(x: &[Point], y: &[Point]) -> Vec<f64> {
    x.par_iter()
        .flat_map_iter(|p| y.iter().map(move |q| dist(p, q)))
        .collect()
}

/// Mean distance of a given bijection.
pub fn matching_cost(x: &[Point], y: &[Point], mapping: &[usize]) -> f64 {
    x.iter().zip(mapping).map(|(p, &j)| dist(p, &y[j])).sum::<f64>() / x.len() as f64
}

/// Exact EMD via the Hungarian algorithm (shortest augmenting paths with potentials).
pub fn emd_exact(x: &[Point], y: &[Point]) -> Result<Assignment> {
    same_size(x, y)?;
    let n = x.len();
    if n > EMD_EXACT_MAX {
        return Err(Error::Capacity(format!(
            "exact EMD is limited to {EMD_EXACT_MAX} points, got {n}"
        )));
    }
    let cost = cost_matrix(x, y);
    let mapping = hungarian(&cost, n);
    let total_cost = matching_cost(x, y, &mapping);
    Ok(Assignment { mapping, total_cost })
}

/// Minimum-cost perfect matching on a dense `n x n` row-major cost matrix.
/// Returns the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // owner[j]: 1-based row matched to column j (0 = free).
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0; n];
    for j in 1..=n {
        mapping[owner[j] - 1] = j - 1;
    }
    mapping
}

/// Epsilon schedule of the auction, in the clouds' distance units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub factor: f64,
}

impl EpsilonSchedule {
    /// Starts at a quarter of the diameter of `X ∪ Y` and ends at `1e-4 * diameter / N`.
    pub fn default_for(x: &[Point], y: &[Point]) -> Self {
        let diam = bbox_diagonal(x.iter().chain(y.iter())).max(f64::MIN_POSITIVE);
        let n = x.len().max(1) as f64;
        EpsilonSchedule {
            start: diam / 4.0,
            end: 1e-4 * diam / n,
            factor: 5.0,
        }
    }
}

/// Approximate EMD by epsilon-scaling auction.
///
/// The matched total is within `N * end` of the optimum, so the returned
/// mean is within `end` of the exact value.
pub fn emd_approx(x: &[Point], y: &[Point], schedule: Option<EpsilonSchedule>) -> Result<f64> {
    same_size(x, y)?;
    let schedule = schedule.unwrap_or_else(|| EpsilonSchedule::default_for(x, y));
    if !(schedule.end > 0.0 && schedule.start >= schedule.end && schedule.factor > 1.0) {
        return Err(Error::Argument(format!("invalid epsilon schedule {schedule:?}")));
    }
    let n = x.len();
    let diam = bbox_diagonal(x.iter().chain(y.iter()));
    if diam == 0.0 {
        return Ok(0.0);
    }
    let scale = AUCTION_COST_SCALE / diam;
    let cost: Vec<f64> = cost_matrix(x, y).into_iter().map(|c| (c * scale).round()).collect();
    let mapping = auction(&cost, n, schedule.start * scale, schedule.end * scale, schedule.factor);
    Ok(matching_cost(x, y, &mapping))
}

/// Gauss-Seidel forward auction minimizing total cost. Returns the object
/// assigned to each person.
fn auction(cost: &[f64], n: usize, eps_start: f64, eps_end: f64, factor: f64) -> Vec<usize> {
    let mut price = vec![0.0f64; n];
    let mut eps = eps_start.max(eps_end);
    let mut person_obj;
    loop {
        person_obj = vec![usize::MAX; n];
        let mut obj_person = vec![usize::MAX; n];
        let mut queue: VecDeque<usize> = (0..n).collect();
        while let Some(i) = queue.pop_front() {
            let row = &cost[i * n..(i + 1) * n];
            let (mut best, mut v1, mut v2) = (0usize, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (j, (&c, &p)) in row.iter().zip(&price).enumerate() {
                let value = -c - p;
                if value > v1 {
                    v2 = v1;
                    v1 = value;
                    best = j;
                } else if value > v2 {
                    v2 = value;
                }
            }
            let increment = if v2.is_finite() { v1 - v2 + eps } else { eps };
            price[best] += increment;
            let prev = obj_person[best];
            if prev != usize::MAX {
                person_obj[prev] = usize::MAX;
                queue.push_back(prev);
            }
            obj_person[best] = i;
            person_obj[i] = best;
        }
        if eps <= eps_end {
            break;
        }
        eps = (eps / factor).max(eps_end);
    }
    person_obj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::*;
    use crate::tensor::gradcheck::grad_check_many;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;




    #[test]
    fn chamfer_examples() {
        let x = [[0.0, 0.0, 0.0]];
        let y = [[1.0, 0.0, 0.0]];
        assert_eq!(chamfer(&x, &y).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_points(&mut rng, 50);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&[], &a).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_points(&mut rng, 128);
        let y = random_points(&mut rng, 128);
        assert!((chamfer(&x, &y).unwrap() - brute_chamfer(&x, &y)).abs() < 1e-9);
        assert_eq!(chamfer(&x, &y).unwrap(), chamfer(&y, &x).unwrap());
    }

    #[test]
    fn chamfer_graph_value_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_points(&mut rng, 10).concat();
        let y = random_points(&mut rng, 7).concat();
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(&[10, 3], x.clone()).unwrap();
        let yv = g.leaf(&[7, 3], y.clone()).unwrap();
        let cd = chamfer_graph(&mut g, xv, yv).unwrap();
        let xp: Vec<Point> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let yp: Vec<Point> = y.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        assert!((g.scalar(cd) - brute_chamfer(&xp, &yp)).abs() < 1e-12);
        let err = grad_check_many(&[(&[10, 3], &x), (&[7, 3], &y)], 1e-5, |g, v| chamfer_graph(g, v[0], v[1]))
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn chamfer_graph_matches_dense_min_route() {
        // Same quantity through min_over_rows_with_index on the full distance matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_points(&mut rng, 6);
        let y = random_points(&mut rng, 9);
        let mut g = Graph::<f64>::new();
        let d: Vec<f64> = x.iter().flat_map(|p| y.iter().map(move |q| dist(p, q))).collect();
        let dm = g.constant(&[6, 9], d).unwrap();
        let m1 = g.min_over_rows_with_index(dm).unwrap();
        let a = g.reduce_mean(m1).unwrap();
        let dt = g.transpose_last2(dm).unwrap();
        let m2 = g.min_over_rows_with_index(dt).unwrap();
        let b = g.reduce_mean(m2).unwrap();
        let dense = g.scalar(a) + g.scalar(b);
        assert!((dense - chamfer(&x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn emd_exact_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_points(&mut rng, 20);
        assert_eq!(emd_exact(&x, &x).unwrap().total_cost, 0.0);
        let a = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let b = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(emd_exact(&a, &b).unwrap().total_cost, 1.0);
        assert!(emd_exact(&a, &b[..1]).is_err());
        let big = vec![[0.0; 3]; EMD_EXACT_MAX + 1];
        assert!(matches!(emd_exact(&big, &big), Err(Error::Capacity(_))));
    }

    #[test]
    fn emd_exact_matches_factorial_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..5 {
            let x = random_points(&mut rng, 8);
            let y = random_points(&mut rng, 8);
            let exact = emd_exact(&x, &y).unwrap();
            assert!((exact.total_cost - brute_emd(&x, &y)).abs() < 1e-12);
            let mut seen = exact.mapping.clone();
            seen.sort();
            assert_eq!(seen, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn emd_exact_beats_random_bijections() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_points(&mut rng, 30);
        let y = random_points(&mut rng, 30);
        let best = emd_exact(&x, &y).unwrap().total_cost;
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..30).collect();
            for i in (1..30).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            assert!(best <= matching_cost(&x, &y, &perm) + 1e-12);
        }
        assert!(chamfer(&x, &y).unwrap() <= 2.0 * best + 1e-12);
    }

    #[test]
    fn emd_approx_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for n in [1, 5, 17, 64] {
            let x = random_points(&mut rng, n);
            let y = random_points(&mut rng, n);
            let exact = emd_exact(&x, &y).unwrap().total_cost;
            let approx = emd_approx(&x, &y, None).unwrap();
            assert!(approx >= exact - 1e-12);
            assert!((approx - exact).abs() <= 0.01 * exact, "{n}: {approx} vs {exact}");
        }
    }

    #[test]
    fn emd_approx_translation_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = random_points(&mut rng, 40);
        assert!(emd_approx(&x, &x, None).unwrap() <= EpsilonSchedule::default_for(&x, &x).end);
        let v = [0.3, -0.2, 0.1];
        let y: Vec<Point> = x.iter().map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]]).collect();
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let approx = emd_approx(&x, &y, None).unwrap();
        assert!((approx - norm).abs() <= 0.01 * norm, "{approx} vs {norm}");
        assert!(emd_approx(&x, &y[..3], None).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::oracle::random_points;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn chamfer_is_symmetric(seed in any::<u64>(), n in 1usize..40, m in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = (random_points(&mut rng, n), random_points(&mut rng, m));
            prop_assert_eq!(chamfer(&x, &y).unwrap(), chamfer(&y, &x).unwrap());
        }

        #[test]
        fn emd_bounds(seed in any::<u64>(), n in 1usize..40, perm_seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = (random_points(&mut rng, n), random_points(&mut rng, n));
            let a = emd_exact(&x, &y).unwrap();
            let mut sorted = a.mapping.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            prop_assert!(a.total_cost >= 0.0);
            prop_assert!(chamfer(&x, &y).unwrap() <= 2.0 * a.total_cost + 1e-12);
            let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut prng);
            prop_assert!(a.total_cost <= matching_cost(&x, &y, &perm) + 1e-12);
        }
    }
}
