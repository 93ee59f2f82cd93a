//! Discrete geodesic distance on a reference mesh and the thresholded
//! Euclidean distance built on top of it.
//!
//! `g_h(x, y)` is the shortest path between the mesh vertices nearest to
//! `x` and `y`, moving along edges and element diagonals (every vertex pair
//! sharing an element is connected). Paths are computed by a Dijkstra
//! search that stops as soon as it would settle a vertex beyond the
//! requested threshold, and that can be resumed with a larger threshold.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::geom::{dist, Point3};
use crate::mesh::{compute_metrics, Mesh};
use crate::spatial::{build_index, build_index_with_ids, PointIndex};

/// Vertex adjacency of a reference mesh with Euclidean edge lengths.
///
/// A graph can also be a rank-local restriction (see [`GeodesicGraph::restrict`]):
/// it then numbers its vertices locally in increasing global-id order and
/// carries "fringe" vertices whose own adjacency is unknown.
#[derive(Clone, Debug)]
pub struct GeodesicGraph {
    coords: Vec<Point3>,
    offsets: Vec<usize>,
    adjacency: Vec<(usize, f64)>,
    /// `None` when every vertex's adjacency is present.
    expandable: Option<Vec<bool>>,
    /// Local -> global vertex ids; `None` means identity.
    global_ids: Option<Vec<usize>>,
    index: PointIndex,
    h_max: f64,
}

pub fn build_graph(mesh: &Mesh) -> Result<GeodesicGraph> {
    let metrics = compute_metrics(mesh)?;
    let nv = mesh.num_vertices();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for el in mesh.elements() {
        for a in 0..el.len() {
            for b in 0..el.len() {
                if a != b {
                    pairs.push((el[a], el[b]));
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let coords = mesh.vertices().to_vec();
    let mut offsets = vec![0usize; nv + 1];
    for &(u, _) in &pairs {
        offsets[u + 1] += 1;
    }
    for i in 0..nv {
        offsets[i + 1] += offsets[i];
    }
    let adjacency = pairs.iter().map(|&(u, v)| (v, dist(&coords[u], &coords[v]))).collect();
    Ok(GeodesicGraph {
        index: build_index(&coords),
        coords,
        offsets,
        adjacency,
        expandable: None,
        global_ids: None,
        h_max: metrics.h_max,
    })
}

impl GeodesicGraph {
    pub fn num_vertices(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self, v: usize) -> &Point3 {
        &self.coords[v]
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adjacency[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Largest element diameter of the mesh the graph was built from.
    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn is_expandable(&self, v: usize) -> bool {
        self.expandable.as_ref().is_none_or(|e| e[v])
    }

    pub fn global_id(&self, v: usize) -> usize {
        self.global_ids.as_ref().map_or(v, |g| g[v])
    }

    pub fn vertex_index(&self) -> &PointIndex {
        &self.index
    }

    /// Nearest vertex to `p` (smallest global id on ties) and its distance.
    pub fn snap(&self, p: &Point3) -> Result<(usize, f64)> {
        self.index.nearest(p).map(|(v, d2)| (v, d2.sqrt()))
    }

    /// Subgraph holding the full adjacency of every vertex in `core`
    /// (global ids of this graph), plus the neighbours of `core` as fringe
    /// vertices that may be reached but not expanded.
    pub fn restrict(&self, core: &[usize]) -> GeodesicGraph {
        let n = self.num_vertices();
        let mut is_core = vec![false; n];
        for &v in core {
            is_core[v] = true;
        }
        let mut keep = is_core.clone();
        for v in (0..n).filter(|&v| is_core[v]) {
            for &(w, _) in self.neighbors(v) {
                keep[w] = true;
            }
        }
        let kept: Vec<usize> = (0..n).filter(|&v| keep[v]).collect();
        let mut local = vec![usize::MAX; n];
        for (l, &v) in kept.iter().enumerate() {
            local[v] = l;
        }
        let mut offsets = Vec::with_capacity(kept.len() + 1);
        offsets.push(0);
        let mut adjacency = Vec::new();
        for &v in &kept {
            if is_core[v] {
                adjacency.extend(self.neighbors(v).iter().map(|&(w, l)| (local[w], l)));
            }
            offsets.push(adjacency.len());
        }
        let coords: Vec<Point3> = kept.iter().map(|&v| self.coords[v]).collect();
        let global: Vec<usize> = kept.iter().map(|&v| self.global_id(v)).collect();
        GeodesicGraph {
            index: build_index_with_ids(coords.clone(), (0..kept.len()).collect()),
            coords,
            offsets,
            adjacency,
            expandable: Some(kept.iter().map(|&v| is_core[v]).collect()),
            global_ids: Some(global),
            h_max: self.h_max,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct HeapItem(f64, usize);

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    // reversed: BinaryHeap pops the smallest tentative distance first
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Resumable single-source Dijkstra search.
///
/// The open set lives in the min-heap, the closed set in `settled`.
/// Settled distances never change, so the state can answer any number of
/// queries for the same source, picking up where the previous one stopped.
#[derive(Clone, Debug, Default)]
pub struct DijkstraState {
    source: Option<usize>,
    dist: Vec<f64>,
    settled: Vec<bool>,
    touched: Vec<usize>,
    heap: BinaryHeap<HeapItem>,
    exhausted_radius: f64,
}

impl DijkstraState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn source(&self) -> Option<usize> {
        self.source
    }

    /// Every vertex whose distance is at most this value has been settled.
    pub fn exhausted_radius(&self) -> f64 {
        self.exhausted_radius
    }

    /// Starts a search from `source`, keeping the current one if it
    /// already uses the same source.
    pub fn ensure_source(&mut self, graph: &GeodesicGraph, source: usize) -> Result<()> {
        let n = graph.num_vertices();
        if source >= n {
            return Err(Error::param(format!("source vertex {source} out of range (graph has {n} vertices)")));
        }
        if self.source == Some(source) && self.dist.len() == n {
            return Ok(());
        }
        if self.dist.len() != n {
            self.dist = vec![f64::INFINITY; n];
            self.settled = vec![false; n];
            self.touched.clear();
        } else {
            for &v in &self.touched {
                self.dist[v] = f64::INFINITY;
                self.settled[v] = false;
            }
            self.touched.clear();
        }
        self.heap.clear();
        self.source = Some(source);
        self.dist[source] = 0.0;
        self.touched.push(source);
        self.heap.push(HeapItem(0.0, source));
        self.exhausted_radius = 0.0;
        Ok(())
    }

    /// Whether `v` is in the closed set.
    pub fn is_settled(&self, v: usize) -> bool {
        self.settled.get(v).copied().unwrap_or(false)
    }

    /// Settled vertices with their exact distances.
    pub fn settled_vertices(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.touched.iter().filter(|&&v| self.settled[v]).map(|&v| (v, self.dist[v]))
    }

    /// `Some(g_h(source, target))` if it is at most `threshold`, `None`
    /// otherwise. Independent of earlier queries on the same state.
    pub fn distance_within(&mut self, graph: &GeodesicGraph, target: usize, threshold: f64) -> Result<Option<f64>> {
        let source = self.source.ok_or_else(|| Error::param("Dijkstra state has no source"))?;
        let n = graph.num_vertices();
        if target >= n {
            return Err(Error::param(format!("target vertex {target} out of range (graph has {n} vertices)")));
        }
        if dist(graph.coords(source), graph.coords(target)) > threshold {
            return Ok(None);
        }
        if self.settled[target] {
            let d = self.dist[target];
            return Ok((d <= threshold).then_some(d));
        }
        while let Some(&HeapItem(d, v)) = self.heap.peek() {
            if d > threshold {
                return Ok(None);
            }
            self.heap.pop();
            if self.settled[v] {
                continue;
            }
            self.settled[v] = true;
            self.exhausted_radius = d;
            if !graph.is_expandable(v) {
                return Err(Error::Internal(format!(
                    "geodesic search reached vertex {} outside the local halo",
                    graph.global_id(v)
                )));
            }
            for &(w, len) in graph.neighbors(v) {
                if self.settled[w] {
                    continue;
                }
                let nd = d + len;
                if nd < self.dist[w] {
                    if self.dist[w] == f64::INFINITY {
                        self.touched.push(w);
                    }
                    self.dist[w] = nd;
                    self.heap.push(HeapItem(nd, w));
                }
            }
            if v == target {
                return Ok(Some(d));
            }
        }
        // open set exhausted: target unreachable
        self.exhausted_radius = f64::INFINITY;
        Ok(None)
    }
}

/// `g_h(source, target)` when it does not exceed `r_threshold`, and exactly
/// `r_threshold` otherwise (callers treat that as "beyond the threshold").
pub fn geodesic_vertex_distance(
    graph: &GeodesicGraph,
    state: &mut DijkstraState,
    target: usize,
    r_threshold: f64,
) -> Result<f64> {
    if !(r_threshold >= 0.0) {
        return Err(Error::param(format!("threshold must be >= 0, got {r_threshold}")));
    }
    Ok(state.distance_within(graph, target, r_threshold)?.unwrap_or(r_threshold))
}

/// Per-worker cache: one live search, replaced when the source changes.
#[derive(Clone, Debug, Default)]
pub struct GeodesicCache {
    state: DijkstraState,
}

impl GeodesicCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> &DijkstraState {
        &self.state
    }

    /// Same contract as [`DijkstraState::distance_within`] for two vertices.
    pub fn vertex_distance_within(
        &mut self,
        graph: &GeodesicGraph,
        source: usize,
        target: usize,
        threshold: f64,
    ) -> Result<Option<f64>> {
        self.state.ensure_source(graph, source)?;
        self.state.distance_within(graph, target, threshold)
    }
}

/// `g_h` between arbitrary points, via their nearest graph vertices.
pub fn geodesic_point_distance(
    graph: &GeodesicGraph,
    cache: &mut GeodesicCache,
    x: &Point3,
    y: &Point3,
    r_threshold: f64,
) -> Result<f64> {
    let (xs, _) = graph.snap(x)?;
    let (ys, _) = graph.snap(y)?;
    cache.state.ensure_source(graph, xs)?;
    geodesic_vertex_distance(graph, &mut cache.state, ys, r_threshold)
}

/// High-curvature detection parameters of the thresholded distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdConfig {
    /// `f64::INFINITY` disables high-curvature detection.
    pub beta: f64,
    pub h_max: f64,
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::param(format!("beta must be > 0 or +inf, got {}", self.beta)));
        }
        if !(self.h_max > 0.0 && self.h_max.is_finite()) {
            return Err(Error::param(format!("h_max must be positive, got {}", self.h_max)));
        }
        Ok(())
    }

    /// Combines a thresholded geodesic query result with the Euclidean
    /// distance. `geodesic` is `None` when `g_h` exceeds the threshold.
    #[inline]
    pub fn combine(&self, geodesic: Option<f64>, euclidean: f64) -> f64 {
        match geodesic {
            None => f64::INFINITY,
            Some(g) if g <= self.beta * self.h_max + euclidean => euclidean,
            Some(g) => g,
        }
    }
}

/// Which branch of the thresholded distance applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdCase {
    Beyond,
    Geodesic,
    Euclidean,
}

impl ThresholdConfig {
    pub fn classify(&self, geodesic: Option<f64>, euclidean: f64) -> ThresholdCase {
        match geodesic {
            None => ThresholdCase::Beyond,
            Some(g) if g <= self.beta * self.h_max + euclidean => ThresholdCase::Euclidean,
            Some(_) => ThresholdCase::Geodesic,
        }
    }
}

/// `+inf` beyond the threshold `r`, `g_h` where it exceeds the Euclidean
/// distance by more than `beta * h_max`, and the Euclidean distance otherwise.
pub fn thresholded_distance(
    graph: &GeodesicGraph,
    cache: &mut GeodesicCache,
    x: &Point3,
    y: &Point3,
    r: f64,
    cfg: &ThresholdConfig,
) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::param(format!("threshold must be positive, got {r}")));
    }
    let (xs, _) = graph.snap(x)?;
    let (ys, _) = graph.snap(y)?;
    let g = cache.vertex_distance_within(graph, xs, ys, r)?;
    Ok(cfg.combine(g, dist(x, y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_ring, ElementKind, RingParams};

    fn single(kind: ElementKind) -> Mesh {
        let mut v = Vec::new();
        for c in 0..2 {
            for b in 0..2 {
                for a in 0..2 {
                    v.push([a as f64, b as f64, c as f64]);
                }
            }
        }
        match kind {
            ElementKind::Hex => Mesh::new(kind, v, vec![0, 1, 3, 2, 4, 5, 7, 6]).unwrap(),
            ElementKind::Tet => Mesh::new(kind, v[..4].to_vec(), vec![0, 1, 2, 3]).unwrap(),
        }
    }

    #[test]
    fn complete_graphs_on_single_elements() {
        let g = build_graph(&single(ElementKind::Tet)).unwrap();
        assert!((0..4).all(|v| g.degree(v) == 3));
        let g = build_graph(&single(ElementKind::Hex)).unwrap();
        assert!((0..8).all(|v| g.degree(v) == 7));
    }

    #[test]
    fn two_tets_sharing_a_face() {
        let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]];
        let m = Mesh::new(ElementKind::Tet, v, vec![0, 1, 2, 3, 1, 2, 3, 4]).unwrap();
        let g = build_graph(&m).unwrap();
        assert_eq!(g.degree(0), 3);
        assert_eq!(g.degree(4), 3);
        for v in 1..4 {
            assert_eq!(g.degree(v), 4);
        }
    }

    #[test]
    fn adjacency_is_symmetric_with_euclidean_lengths() {
        let m = generate_ring(&RingParams { n_theta: 6, n_section: 2, ..Default::default() }, ElementKind::Tet).unwrap();
        let g = build_graph(&m).unwrap();
        for u in 0..g.num_vertices() {
            for &(v, l) in g.neighbors(u) {
                assert_eq!(l, dist(g.coords(u), g.coords(v)));
                assert!(g.neighbors(v).iter().any(|&(w, l2)| w == u && l2 == l));
            }
        }
    }

    fn path_graph() -> GeodesicGraph {
        // bar of three unit cubes split into tets; vertices 0, 1, 2 on the x axis
        let mut v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        v.extend([[0.0, 5.0, 0.0], [1.0, 5.0, 0.0], [2.0, 5.0, 0.0], [0.0, 0.0, 5.0], [1.0, 0.0, 5.0]]);
        let m = Mesh::new(ElementKind::Tet, v, vec![0, 1, 3, 6, 1, 2, 5, 7]).unwrap();
        build_graph(&m).unwrap()
    }

    #[test]
    fn vertex_distance_basics() {
        let g = path_graph();
        let mut s = DijkstraState::new();
        s.ensure_source(&g, 0).unwrap();
        assert_eq!(geodesic_vertex_distance(&g, &mut s, 0, 10.0).unwrap(), 0.0);
        assert_eq!(geodesic_vertex_distance(&g, &mut s, 2, 10.0).unwrap(), 2.0);
        // truncated: returns the threshold itself
        assert_eq!(geodesic_vertex_distance(&g, &mut s, 2, 1.5).unwrap(), 1.5);
        assert!(matches!(geodesic_vertex_distance(&g, &mut s, 99, 1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn threshold_cases() {
        let cfg = ThresholdConfig { beta: 0.5, h_max: 1.0 };
        assert_eq!(cfg.combine(None, 0.1), f64::INFINITY);
        assert_eq!(cfg.combine(Some(0.0), 0.0), 0.0);
        assert_eq!(cfg.combine(Some(3.0), 1.0), 3.0);
        assert_eq!(cfg.combine(Some(1.4), 1.0), 1.0);
        let off = ThresholdConfig { beta: f64::INFINITY, h_max: 1.0 };
        assert_eq!(off.combine(Some(3.0), 1.0), 1.0);
        assert!(ThresholdConfig { beta: 0.0, h_max: 1.0 }.validate().is_err());
        assert!(off.validate().is_ok());
    }

    #[test]
    fn point_distance_snaps_to_vertices() {
        let g = path_graph();
        let mut c = GeodesicCache::new();
        let d = geodesic_point_distance(&g, &mut c, &[0.1, 0.0, 0.0], &[-0.2, 0.1, 0.0], 10.0).unwrap();
        assert_eq!(d, 0.0);
        let d = geodesic_point_distance(&g, &mut c, &[0.1, 0.0, 0.0], &[2.1, 0.0, 0.0], 10.0).unwrap();
        assert_eq!(d, 2.0);
    }

    #[test]
    fn beyond_threshold_is_infinite() {
        let g = path_graph();
        let mut c = GeodesicCache::new();
        let cfg = ThresholdConfig { beta: 0.5, h_max: g.h_max() };
        let d = thresholded_distance(&g, &mut c, &[0.0; 3], &[2.0, 0.0, 0.0], 1.0, &cfg).unwrap();
        assert_eq!(d, f64::INFINITY);
    }

    #[test]
    fn restriction_flags_fringe_expansion() {
        let m = generate_ring(&RingParams { n_theta: 8, n_section: 1, ..Default::default() }, ElementKind::Hex).unwrap();
        let g = build_graph(&m).unwrap();
        let core: Vec<usize> = (0..8).collect();
        let halo = g.restrict(&core);
        assert!(halo.num_vertices() > core.len());
        let mut s = DijkstraState::new();
        s.ensure_source(&halo, 0).unwrap();
        let far = halo.num_vertices() - 1;
        let err = s.distance_within(&halo, far, f64::INFINITY).unwrap_err();
        assert!(matches!(err, Error::Internal(_)));
    }
}
