//! Slow reference implementations used to check the fast kernels.

use rand::Rng;

use crate::cloud::Point;

fn d(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// `n` points uniform in `[-1, 1)^3`.
pub fn random_points<R: Rng>(rng: &mut R, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

/// Farthest point sampling that recomputes every candidate's distance to the
/// selected set from scratch. Ties go to the lowest index.
pub fn greedy_fps(points: &[Point], m: usize, start: usize) -> Vec<usize> {
    let mut sel = vec![start];
    while sel.len() < m {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..points.len() {
            if sel.contains(&i) {
                continue;
            }
            let di = sel.iter().map(|&s| d(&points[i], &points[s])).fold(f64::INFINITY, f64::min);
            if di > best_d {
                best_d = di;
                best = Some(i);
            }
        }
        sel.push(best.expect("m <= len"));
    }
    sel
}

/// k nearest neighbors by full sort, flattened row-major.
pub fn sorted_knn(q: &[Point], r: &[Point], k: usize) -> Vec<usize> {
    q.iter()
        .flat_map(|p| {
            let mut all: Vec<(f64, usize)> = r.iter().enumerate().map(|(j, x)| (d(p, x), j)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            all.into_iter().take(k).map(|(_, j)| j)
        })
        .collect()
}

/// Chamfer distance with O(N M) nested loops.
pub fn brute_chamfer(x: &[Point], y: &[Point]) -> f64 {
    let side = |a: &[Point], b: &[Point]| {
        a.iter().map(|p| b.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.len() as f64
    };
    side(x, y) + side(y, x)
}

/// EMD by enumerating permutations (with pruning). Only for tiny inputs.
pub fn brute_emd(x: &[Point], y: &[Point]) -> f64 {
    fn rec(x: &[Point], y: &[Point], i: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        if i == x.len() {
            *best = acc;
            return;
        }
        for j in 0..y.len() {
            if !used[j] {
                used[j] = true;
                rec(x, y, i + 1, used, acc + d(&x[i], &y[j]), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(x, y, 0, &mut vec![false; y.len()], 0.0, &mut best);
    best / x.len() as f64
}
