//! Probabilistic roadmap: uniform nodes joined to their k nearest
//! neighbours (made bidirectional), shortest paths, and Laplacian
//! eigenvector features.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Point;
use crate::rng::{stream_rng, Stream};
use crate::Error;

pub const MAX_BUILD_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Roadmap {
    nodes: Vec<Point>,
    /// Sorted neighbour lists.
    adjacency: Vec<Vec<usize>>,
    seed: Option<u64>,
}

/// On-disk form of a roadmap.
///
/// ```json
/// { "nodes": [{"x": 0.1, "y": 0.2}, ...], "edges": [[0, 5], [0, 9], ...], "seed": 3 }
/// ```
///
/// Each undirected edge is listed once with the smaller index first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadmapFile {
    pub nodes: Vec<Point>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Roadmap {
    /// Builds from explicit nodes and undirected edges. Self-loops and
    /// duplicate edges are ignored.
    pub fn from_edges(nodes: Vec<Point>, edges: &[[usize; 2]]) -> Result<Self, Error> {
        let n = nodes.len();
        let mut adjacency = vec![Vec::new(); n];
        for &[a, b] in edges {
            if a >= n || b >= n {
                return Err(Error::Config(format!("edge ({a}, {b}) out of range for {n} nodes")));
            }
            if a != b {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self {
            nodes,
            adjacency,
            seed: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> Point {
        self.nodes[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn edge_length(&self, a: usize, b: usize) -> f64 {
        self.nodes[a].dist(self.nodes[b])
    }

    /// Undirected edges, smaller index first.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, list)| list.iter().filter(move |&&b| a < b).map(move |&b| [a, b]))
            .collect()
    }

    pub fn nearest_node(&self, p: Point) -> usize {
        (0..self.nodes.len())
            .min_by(|&a, &b| self.nodes[a].dist_sq(p).total_cmp(&self.nodes[b].dist_sq(p)))
            .expect("roadmap has nodes")
    }

    pub fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == n
    }

    pub fn to_file(&self) -> RoadmapFile {
        RoadmapFile {
            nodes: self.nodes.clone(),
            edges: self.edges(),
            seed: self.seed,
        }
    }

    pub fn from_file(file: &RoadmapFile) -> Result<Self, Error> {
        let mut r = Self::from_edges(file.nodes.clone(), &file.edges)?;
        r.seed = file.seed;
        Ok(r)
    }

    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        Self::from_file(&serde_json::from_str(s)?)
    }
}

/// Indices of the `k` nodes closest to `nodes[i]`, excluding `i`; ties by index.
pub fn k_nearest(nodes: &[Point], i: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..nodes.len()).filter(|&j| j != i).collect();
    others.sort_by(|&a, &b| {
        nodes[i]
            .dist_sq(nodes[a])
            .total_cmp(&nodes[i].dist_sq(nodes[b]))
            .then(a.cmp(&b))
    });
    others.truncate(k);
    others
}

/// Samples a connected k-NN roadmap, resampling the whole node set when
/// the graph comes out disconnected.
pub fn build_roadmap<R: Rng + ?Sized>(num_nodes: usize, k: usize, rng: &mut R) -> Result<Roadmap, Error> {
    if k == 0 || num_nodes < k + 1 {
        return Err(Error::Config(format!(
            "roadmap needs k >= 1 and num_nodes >= k + 1 (got {num_nodes} nodes, k = {k})"
        )));
    }
    for _ in 0..MAX_BUILD_ATTEMPTS {
        let nodes: Vec<Point> = (0..num_nodes)
            .map(|_| Point::new(rng.gen::<f64>(), rng.gen::<f64>()))
            .collect();
        let edges: Vec<[usize; 2]> = (0..num_nodes)
            .flat_map(|i| k_nearest(&nodes, i, k).into_iter().map(move |j| [i, j]))
            .collect();
        let roadmap = Roadmap::from_edges(nodes, &edges)?;
        if roadmap.is_connected() {
            return Ok(roadmap);
        }
    }
    Err(Error::ConnectivityFailure {
        attempts: MAX_BUILD_ATTEMPTS,
        nodes: num_nodes,
        k,
    })
}

/// [`build_roadmap`] on the roadmap stream of `seed`, remembering the seed.
pub fn build_roadmap_seeded(num_nodes: usize, k: usize, seed: u64) -> Result<Roadmap, Error> {
    let mut rng = stream_rng(seed, Stream::Roadmap);
    let mut roadmap = build_roadmap(num_nodes, k, &mut rng)?;
    roadmap.seed = Some(seed);
    Ok(roadmap)
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest path lengths from `source` along Euclidean-weighted edges.
pub fn dijkstra_from(roadmap: &Roadmap, source: usize) -> Vec<f64> {
    let n = roadmap.num_nodes();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry {
        dist: 0.0,
        node: source,
    });
    while let Some(HeapEntry { dist: d, node: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &v in roadmap.neighbors(u) {
            let nd = d + roadmap.edge_length(u, v);
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapEntry { dist: nd, node: v });
            }
        }
    }
    dist
}

/// Eigenpairs of the symmetric normalized Laplacian, ascending.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the eigenvector of `eigenvalues[j]`.
    pub eigenvectors: DMatrix<f64>,
}

/// `I - D^-1/2 A D^-1/2` over the unweighted adjacency.
pub fn normalized_laplacian(roadmap: &Roadmap) -> DMatrix<f64> {
    let n = roadmap.num_nodes();
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| match roadmap.degree(i) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        if roadmap.degree(i) > 0 {
            l[(i, i)] = 1.0;
        }
        for &j in roadmap.neighbors(i) {
            l[(i, j)] = -inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    l
}

pub fn laplacian_spectrum(roadmap: &Roadmap) -> Spectrum {
    let eig = SymmetricEigen::new(normalized_laplacian(roadmap));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let eigenvectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Spectrum {
        eigenvalues,
        eigenvectors,
    }
}

/// Per-node positional features: components of the `m` eigenvectors with
/// the smallest non-trivial eigenvalues, sign-fixed so each vector's
/// largest-magnitude entry is positive. Zero-padded when the graph has
/// fewer than `m + 1` nodes.
pub fn spectral_features(roadmap: &Roadmap, m: usize) -> Vec<Vec<f64>> {
    let n = roadmap.num_nodes();
    let mut features = vec![vec![0.0; m]; n];
    if n < 2 {
        return features;
    }
    let spectrum = laplacian_spectrum(roadmap);
    for c in 0..m.min(n - 1) {
        let col = spectrum.eigenvectors.column(c + 1);
        let pivot = (0..n)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .expect("non-empty");
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (r, row) in features.iter_mut().enumerate() {
            row[c] = sign * col[r];
        }
    }
    features
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path4() -> Roadmap {
        let nodes = (0..4).map(|i| Point::new(i as f64 * 0.25, 0.5)).collect();
        Roadmap::from_edges(nodes, &[[0, 1], [1, 2], [2, 3]]).unwrap()
    }

    #[test]
    fn path_graph_distances() {
        let r = path4();
        let d = dijkstra_from(&r, 0);
        let expected = [0.0, 0.25, 0.5, 0.75];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn edges_listed_once() {
        let r = path4();
        assert_eq!(r.edges(), vec![[0, 1], [1, 2], [2, 3]]);
        assert_eq!(r.neighbors(1), &[0, 2]);
    }

    #[test]
    fn rejects_too_few_nodes() {
        let mut rng = stream_rng(0, Stream::Roadmap);
        assert!(matches!(build_roadmap(10, 10, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn json_roundtrip() {
        let r = build_roadmap_seeded(30, 5, 4).unwrap();
        let back = Roadmap::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(r, back);
        assert_eq!(back.seed(), Some(4));
    }

    #[test]
    fn tiny_graph_features_are_padded() {
        let f = spectral_features(&path4(), 8);
        assert_eq!(f.len(), 4);
        assert!(f.iter().all(|row| row.len() == 8 && row[3..].iter().all(|&v| v == 0.0)));
        let single = Roadmap::from_edges(vec![Point::new(0.5, 0.5)], &[]).unwrap();
        assert_eq!(spectral_features(&single, 8), vec![vec![0.0; 8]]);
    }
}
