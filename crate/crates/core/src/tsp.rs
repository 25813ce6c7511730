//! Nearest-neighbor construction and 2-opt improvement for small closed tours.

use crate::geom::Point;

/// Greedy tour visiting every point once, starting at `start`.
pub fn nearest_neighbor_tour(points: &[Point], start: usize) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let mut visited = vec![false; n];
    let mut tour = Vec::with_capacity(n);
    let mut current = start;
    visited[current] = true;
    tour.push(current);
    for _ in 1..n {
        let next = (0..n)
            .filter(|&j| !visited[j])
            .min_by(|&a, &b| {
                points[current]
                    .dist_sq(points[a])
                    .total_cmp(&points[current].dist_sq(points[b]))
            })
            .expect("unvisited point remains");
        visited[next] = true;
        tour.push(next);
        current = next;
    }
    tour
}

/// Length of the closed tour (returns to the first point).
pub fn tour_length(points: &[Point], tour: &[usize]) -> f64 {
    if tour.len() < 2 {
        return 0.0;
    }
    tour.iter()
        .zip(tour.iter().cycle().skip(1))
        .map(|(&a, &b)| points[a].dist(points[b]))
        .sum()
}

/// First-improvement 2-opt on a closed tour until no improving move remains.
pub fn two_opt(points: &[Point], mut tour: Vec<usize>) -> Vec<usize> {
    let n = tour.len();
    if n < 4 {
        return tour;
    }
    let d = |a: usize, b: usize| points[a].dist(points[b]);
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..n - 1 {
            for j in i + 2..n {
                // Edges (i, i+1) and (j, j+1 mod n); skip the pair sharing a node.
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (tour[i], tour[i + 1]);
                let (c, e) = (tour[j], tour[(j + 1) % n]);
                let delta = d(a, c) + d(b, e) - d(a, b) - d(c, e);
                if delta < -1e-12 {
                    tour[i + 1..=j].reverse();
                    improved = true;
                }
            }
        }
    }
    tour
}

/// Closed tour built by nearest neighbor from `start`, then improved by 2-opt.
pub fn solve_tour(points: &[Point], start: usize) -> Vec<usize> {
    two_opt(points, nearest_neighbor_tour(points, start))
}
