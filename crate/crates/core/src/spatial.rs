//! Point R-tree (sort-tile-recursive bulk load) with closed box queries,
//! nearest-point lookup and bounded M-th-nearest-neighbour search.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::geom::{dist2, Point3};

const NODE_CAPACITY: usize = 16;

/// Axis-aligned box with closed bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Self {
        debug_assert!((0..3).all(|k| min[k] <= max[k]), "inverted box {min:?} {max:?}");
        Aabb { min, max }
    }

    pub fn empty() -> Self {
        Aabb { min: [f64::INFINITY; 3], max: [f64::NEG_INFINITY; 3] }
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|k| self.min[k] > self.max[k])
    }

    /// Cube of half-width `half` around `c`.
    pub fn around(c: &Point3, half: f64) -> Self {
        Aabb { min: c.map(|v| v - half), max: c.map(|v| v + half) }
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Point3>) -> Self {
        let mut b = Aabb::empty();
        for p in pts {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Point3) {
        for k in 0..3 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    pub fn merge(&mut self, other: &Aabb) {
        for k in 0..3 {
            self.min[k] = self.min[k].min(other.min[k]);
            self.max[k] = self.max[k].max(other.max[k]);
        }
    }

    pub fn inflated(&self, by: f64) -> Self {
        Aabb { min: self.min.map(|v| v - by), max: self.max.map(|v| v + by) }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.max[k] && other.min[k] <= self.max[k])
    }

    pub fn extent(&self) -> Point3 {
        [0, 1, 2].map(|k| self.max[k] - self.min[k])
    }

    pub fn volume(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.extent().iter().product()
        }
    }

    pub fn center(&self) -> Point3 {
        [0, 1, 2].map(|k| 0.5 * (self.min[k] + self.max[k]))
    }

    /// Squared distance from `p` to the nearest point of the box.
    pub fn min_dist2(&self, p: &Point3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let t = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d += t * t;
        }
        d
    }
}

#[derive(Clone, Debug)]
struct Node {
    bbox: Aabb,
    leaf: bool,
    /// Range into `entries` (leaf) or `children` (inner node).
    start: usize,
    len: usize,
}

/// Immutable R-tree over a point cloud.
///
/// Every point carries an id; `build_index` numbers points by position,
/// `build_index_with_ids` accepts arbitrary ids (used for rank-local
/// subsets that must keep global numbering).
#[derive(Clone, Debug)]
pub struct PointIndex {
    points: Vec<Point3>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
    /// Point slots (positions into `points`) grouped by leaf.
    entries: Vec<usize>,
    children: Vec<usize>,
    root: Option<usize>,
}

pub fn build_index(points: &[Point3]) -> PointIndex {
    PointIndex::new(points.to_vec(), (0..points.len()).collect())
}

pub fn build_index_with_ids(points: Vec<Point3>, ids: Vec<usize>) -> PointIndex {
    assert_eq!(points.len(), ids.len(), "one id per point");
    PointIndex::new(points, ids)
}

impl PointIndex {
    fn new(points: Vec<Point3>, ids: Vec<usize>) -> Self {
        let mut index = PointIndex {
            points,
            ids,
            nodes: Vec::new(),
            entries: Vec::new(),
            children: Vec::new(),
            root: None,
        };
        if index.points.is_empty() {
            return index;
        }
        let pts = &index.points;
        let ids = &index.ids;
        let groups = str_groups((0..pts.len()).collect(), &|i| pts[i], &|i| ids[i]);
        let mut level: Vec<usize> = Vec::with_capacity(groups.len());
        for g in groups {
            let bbox = Aabb::from_points(g.iter().map(|&i| &pts[i]));
            level.push(index.nodes.len());
            index.nodes.push(Node { bbox, leaf: true, start: index.entries.len(), len: g.len() });
            index.entries.extend(g);
        }
        while level.len() > 1 {
            let nodes = &index.nodes;
            let groups = str_groups(level, &|n| nodes[n].bbox.center(), &|n| n);
            let mut next = Vec::with_capacity(groups.len());
            for g in groups {
                let mut bbox = Aabb::empty();
                for &c in &g {
                    bbox.merge(&index.nodes[c].bbox);
                }
                next.push(index.nodes.len());
                let start = index.children.len();
                index.children.extend_from_slice(&g);
                index.nodes.push(Node { bbox, leaf: false, start, len: g.len() });
            }
            level = next;
        }
        index.root = Some(level[0]);
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Ids and coordinates of all indexed points.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Point3)> {
        self.ids.iter().copied().zip(self.points.iter())
    }

    /// Ids of all points inside the closed box, in unspecified order.
    pub fn query_box(&self, bbox: &Aabb) -> Vec<usize> {
        let mut out = Vec::new();
        self.query_box_into(bbox, &mut out);
        out
    }

    /// Appends matching `(id, point)` pairs to `out` after clearing it.
    pub fn query_box_points(&self, bbox: &Aabb, out: &mut Vec<(usize, Point3)>) {
        out.clear();
        self.visit_box(bbox, |slot| out.push((self.ids[slot], self.points[slot])));
    }

    pub fn query_box_into(&self, bbox: &Aabb, out: &mut Vec<usize>) {
        out.clear();
        self.visit_box(bbox, |slot| out.push(self.ids[slot]));
    }

    fn visit_box(&self, bbox: &Aabb, mut f: impl FnMut(usize)) {
        let Some(root) = self.root else { return };
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !node.bbox.intersects(bbox) {
                continue;
            }
            if node.leaf {
                for &slot in &self.entries[node.start..node.start + node.len] {
                    if bbox.contains(&self.points[slot]) {
                        f(slot);
                    }
                }
            } else {
                stack.extend_from_slice(&self.children[node.start..node.start + node.len]);
            }
        }
    }

    /// Closest indexed point to `query`; ties go to the smallest id.
    /// Returns `(id, squared distance)`.
    pub fn nearest(&self, query: &Point3) -> Result<(usize, f64)> {
        let root = self.root.ok_or(Error::EmptyInput("nearest-point query on an empty index"))?;
        let mut best = (f64::INFINITY, usize::MAX);
        let mut heap = BinaryHeap::new();
        heap.push(MinItem(self.nodes[root].bbox.min_dist2(query), root));
        while let Some(MinItem(d, n)) = heap.pop() {
            if d > best.0 {
                break;
            }
            let node = &self.nodes[n];
            if node.leaf {
                for &slot in &self.entries[node.start..node.start + node.len] {
                    let d2 = dist2(&self.points[slot], query);
                    let id = self.ids[slot];
                    if d2 < best.0 || (d2 == best.0 && id < best.1) {
                        best = (d2, id);
                    }
                }
            } else {
                for &c in &self.children[node.start..node.start + node.len] {
                    let dc = self.nodes[c].bbox.min_dist2(query);
                    if dc <= best.0 {
                        heap.push(MinItem(dc, c));
                    }
                }
            }
        }
        Ok((best.1, best.0))
    }

    pub fn nearest_vertex(&self, query: &Point3) -> Result<usize> {
        self.nearest(query).map(|(id, _)| id)
    }
}

/// Min-heap entry keyed on a float.
#[derive(Clone, Copy, Debug)]
struct MinItem(f64, usize);

impl PartialEq for MinItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for MinItem {}
impl PartialOrd for MinItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for MinItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Sort-tile-recursive grouping of items into runs of at most
/// `NODE_CAPACITY`, slicing along x, then y, then z.
fn str_groups(
    mut items: Vec<usize>,
    center: &dyn Fn(usize) -> Point3,
    tiebreak: &dyn Fn(usize) -> usize,
) -> Vec<Vec<usize>> {
    let cap = NODE_CAPACITY;
    let n = items.len();
    let pages = n.div_ceil(cap);
    let slices = (pages as f64).cbrt().ceil().max(1.0) as usize;
    let sort_axis = |v: &mut [usize], k: usize| {
        v.sort_by(|&a, &b| center(a)[k].total_cmp(&center(b)[k]).then_with(|| tiebreak(a).cmp(&tiebreak(b))))
    };
    sort_axis(&mut items, 0);
    let mut groups = Vec::with_capacity(pages);
    for slab in items.chunks_mut(cap * slices * slices) {
        sort_axis(slab, 1);
        for strip in slab.chunks_mut(cap * slices) {
            sort_axis(strip, 2);
            groups.extend(strip.chunks(cap).map(<[usize]>::to_vec));
        }
    }
    groups
}

/// Distance from `center` to its `m`-th nearest indexed point under
/// `metric`, considering only points within `r_cap`; saturates at `r_cap`
/// when fewer than `m` qualify.
///
/// Candidates come from a box query of half-width `r_cap`, so the metric
/// must dominate the Euclidean distance for the result to be exact.
/// `metric(id, bound)` returns `Some(d)` for a point at distance `d`, or
/// `None` if the point is excluded or provably farther than `bound`; the
/// bound shrinks to the running `m`-th distance once `m` candidates are
/// held in the max-heap.
pub fn mth_nearest_distance(
    index: &PointIndex,
    center: &Point3,
    m: usize,
    r_cap: f64,
    mut metric: impl FnMut(usize, f64) -> Option<f64>,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::param("neighbour rank m must be >= 1"));
    }
    if !(r_cap > 0.0) {
        return Err(Error::param(format!("search cap must be positive, got {r_cap}")));
    }
    let mut cands = Vec::new();
    index.query_box_points(&Aabb::around(center, r_cap), &mut cands);
    // Visiting near candidates first tightens the bound early.
    let mut order: Vec<(f64, usize)> = cands.iter().map(|(id, p)| (dist2(p, center), *id)).collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut heap: BinaryHeap<MaxF64> = BinaryHeap::with_capacity(m + 1);
    for (_, id) in order {
        let bound = if heap.len() < m { r_cap } else { heap.peek().map_or(r_cap, |t| t.0) };
        let Some(d) = metric(id, bound) else { continue };
        if d > bound {
            continue;
        }
        if heap.len() < m {
            heap.push(MaxF64(d));
        } else if d < bound {
            heap.pop();
            heap.push(MaxF64(d));
        }
    }
    Ok(if heap.len() < m { r_cap } else { heap.peek().map_or(r_cap, |t| t.0) })
}

#[derive(Clone, Copy, Debug)]
struct MaxF64(f64);
impl PartialEq for MaxF64 {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == Ordering::Equal
    }
}
impl Eq for MaxF64 {}
impl PartialOrd for MaxF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for MaxF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::dist;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    fn scan(points: &[Point3], b: &Aabb) -> Vec<usize> {
        (0..points.len()).filter(|&i| b.contains(&points[i])).collect()
    }

    #[test]
    fn empty_index() {
        let idx = build_index(&[]);
        assert!(idx.query_box(&Aabb::around(&[0.0; 3], 10.0)).is_empty());
        assert!(matches!(idx.nearest_vertex(&[0.0; 3]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn whole_cube_returns_everything() {
        let pts = random_points(1000, 1);
        let idx = build_index(&pts);
        let mut got = idx.query_box(&Aabb::new([0.0; 3], [1.0; 3]));
        got.sort_unstable();
        assert_eq!(got, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn box_query_matches_linear_scan() {
        let pts = random_points(2000, 2);
        let idx = build_index(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a: Point3 = [rng.gen(), rng.gen(), rng.gen()];
            let b: Point3 = [rng.gen(), rng.gen(), rng.gen()];
            let bx = Aabb::new([0, 1, 2].map(|k| a[k].min(b[k])), [0, 1, 2].map(|k| a[k].max(b[k])));
            let mut got = idx.query_box(&bx);
            got.sort_unstable();
            assert_eq!(got, scan(&pts, &bx));
        }
    }

    #[test]
    fn closed_faces_and_degenerate_boxes() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.5, 0.5], [0.5, 0.5, 0.5], [0.5, 0.5, 0.5]];
        let idx = build_index(&pts);
        let mut face = idx.query_box(&Aabb::new([0.0; 3], [1.0, 1.0, 1.0]));
        face.sort_unstable();
        assert_eq!(face, vec![0, 1, 2, 3]);
        let mut point = idx.query_box(&Aabb::new([0.5; 3], [0.5; 3]));
        point.sort_unstable();
        assert_eq!(point, vec![2, 3]);
    }

    #[test]
    fn nearest_ties_take_smallest_id() {
        let mut pts = vec![[5.0, 5.0, 5.0]; 10];
        pts[3] = [1.0, 0.0, 0.0];
        pts[7] = [-1.0, 0.0, 0.0];
        let idx = build_index(&pts);
        assert_eq!(idx.nearest_vertex(&[0.0; 3]).unwrap(), 3);
        assert_eq!(idx.nearest_vertex(&pts[7]).unwrap(), 7);
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let pts = random_points(3000, 4);
        let idx = build_index(&pts);
        for q in random_points(300, 5) {
            let got = idx.nearest_vertex(&q).unwrap();
            let want = (0..pts.len())
                .min_by(|&a, &b| dist2(&pts[a], &q).total_cmp(&dist2(&pts[b], &q)).then(a.cmp(&b)))
                .unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn custom_ids_are_reported() {
        let pts = random_points(50, 6);
        let ids: Vec<usize> = (0..50).map(|i| 1000 + 3 * i).collect();
        let idx = build_index_with_ids(pts.clone(), ids.clone());
        assert_eq!(idx.nearest_vertex(&pts[17]).unwrap(), ids[17]);
    }

    #[test]
    fn mth_nearest_small_cases() {
        let pts = vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let idx = build_index(&pts);
        let c = [0.0; 3];
        let euclid = |id: usize, _| Some(dist(&pts[id], &c));
        assert_eq!(mth_nearest_distance(&idx, &c, 2, 10.0, euclid).unwrap(), 2.0);
        assert_eq!(mth_nearest_distance(&idx, &c, 5, 10.0, euclid).unwrap(), 10.0);
        assert!(matches!(mth_nearest_distance(&idx, &c, 0, 10.0, euclid), Err(Error::Parameter(_))));
    }

    #[test]
    fn mth_nearest_matches_full_sort() {
        let pts = random_points(500, 7);
        let idx = build_index(&pts);
        for (q, c) in random_points(20, 8).into_iter().enumerate() {
            let mut all: Vec<f64> = pts.iter().map(|p| dist(p, &c)).collect();
            all.sort_by(f64::total_cmp);
            for m in [1, 4, 6] {
                for r_cap in [0.05, 0.2, 2.0] {
                    let got = mth_nearest_distance(&idx, &c, m, r_cap, |id, _| Some(dist(&pts[id], &c))).unwrap();
                    let want = all[m - 1].min(r_cap);
                    assert_eq!(got, want, "query {q} m {m} cap {r_cap}");
                }
            }
        }
    }
}
