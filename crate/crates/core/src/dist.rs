//! Simulated distributed-memory assembly.
//!
//! Ranks live in one process and talk only through [`RankSpace`]
//! mailboxes. Each rank owns a subset of the source and destination
//! points, advertises a coarse bounding-box representation of its sources,
//! receives the neighbouring points other ranks find inside that region,
//! and assembles the matrix columns of its own sources on a halo subgraph.
//! The gathered matrices are bit-identical to serial assembly.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geodesic::GeodesicGraph;
use crate::geom::Point3;
use crate::interp::{columns_for, finish_matrices, radii_for, ColumnAssembler, Distance, IndexedPoints, KernelParams, OperatorMatrices};
use crate::spatial::Aabb;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionScheme {
    /// Contiguous id ranges.
    Block,
    /// Contiguous runs along a Z-order curve.
    Morton,
}

impl std::str::FromStr for PartitionScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(PartitionScheme::Block),
            "morton" => Ok(PartitionScheme::Morton),
            _ => Err(Error::param(format!("unknown partition scheme '{s}' (expected block or morton)"))),
        }
    }
}

/// Splits point ids `0..n` into `n_ranks` non-empty sets. Sizes differ by
/// at most one, larger sets first.
pub fn partition_points(points: &[Point3], n_ranks: usize, scheme: PartitionScheme) -> Result<Vec<Vec<usize>>> {
    if n_ranks == 0 {
        return Err(Error::param("number of ranks must be >= 1"));
    }
    if n_ranks > points.len() {
        return Err(Error::param(format!("{n_ranks} ranks for only {} points", points.len())));
    }
    let order: Vec<usize> = match scheme {
        PartitionScheme::Block => (0..points.len()).collect(),
        PartitionScheme::Morton => {
            let bbox = Aabb::from_points(points);
            let mut keyed: Vec<(u64, usize)> = points.iter().enumerate().map(|(i, p)| (morton_code(&bbox, p), i)).collect();
            keyed.sort_unstable();
            keyed.into_iter().map(|(_, i)| i).collect()
        }
    };
    let (base, extra) = (points.len() / n_ranks, points.len() % n_ranks);
    let mut out = Vec::with_capacity(n_ranks);
    let mut start = 0;
    for r in 0..n_ranks {
        let len = base + usize::from(r < extra);
        let mut ids = order[start..start + len].to_vec();
        ids.sort_unstable();
        out.push(ids);
        start += len;
    }
    Ok(out)
}

fn morton_code(bbox: &Aabb, p: &Point3) -> u64 {
    const BITS: u32 = 21;
    let scale = ((1u64 << BITS) - 1) as f64;
    let ext = bbox.extent();
    let mut code = 0u64;
    for axis in 0..3 {
        let t = if ext[axis] > 0.0 { (p[axis] - bbox.min[axis]) / ext[axis] } else { 0.0 };
        let q = (t.clamp(0.0, 1.0) * scale) as u64;
        for b in 0..BITS as u64 {
            code |= ((q >> b) & 1) << (3 * b + axis as u64);
        }
    }
    code
}

/// Union of boxes covering a rank's points.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseRep {
    pub boxes: Vec<Aabb>,
}

impl CoarseRep {
    pub fn contains(&self, p: &Point3) -> bool {
        self.boxes.iter().any(|b| b.contains(p))
    }

    pub fn inflated(&self, by: f64) -> CoarseRep {
        CoarseRep { boxes: self.boxes.iter().map(|b| b.inflated(by)).collect() }
    }

    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(Aabb::volume).sum()
    }
}

/// Repeatedly halves the box with the largest extent along its longest
/// axis, shrinking both halves to their points, until `max_boxes` boxes
/// exist or no box can be split.
pub fn coarse_representation(points: &[Point3], max_boxes: usize) -> Result<CoarseRep> {
    if points.is_empty() {
        return Err(Error::EmptyInput("no points for coarse representation"));
    }
    if max_boxes == 0 {
        return Err(Error::param("max_boxes must be >= 1"));
    }
    let tight = |ids: &[usize]| Aabb::from_points(ids.iter().map(|&i| &points[i]));
    let all: Vec<usize> = (0..points.len()).collect();
    let mut parts = vec![(tight(&all), all)];
    while parts.len() < max_boxes {
        let longest = |b: &Aabb| {
            let e = b.extent();
            let axis = (0..3).fold(0, |a, k| if e[k] > e[a] { k } else { a });
            (e[axis], axis)
        };
        let (pick, (len, axis)) = parts
            .iter()
            .enumerate()
            .map(|(i, (b, _))| (i, longest(b)))
            .fold((0, (f64::NEG_INFINITY, 0)), |best, cur| if cur.1 .0 > best.1 .0 { cur } else { best });
        if len <= 0.0 {
            break;
        }
        let (bbox, ids) = parts.swap_remove(pick);
        let mid = 0.5 * (bbox.min[axis] + bbox.max[axis]);
        let (lo, hi): (Vec<usize>, Vec<usize>) = ids.into_iter().partition(|&i| points[i][axis] < mid);
        for half in [lo, hi] {
            if !half.is_empty() {
                parts.push((tight(&half), half));
            }
        }
    }
    Ok(CoarseRep { boxes: parts.into_iter().map(|(b, _)| b).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MessageTag {
    CoarseRep,
    SrcPoints,
    DstPoints,
}

#[derive(Clone, Debug)]
struct Message {
    tag: MessageTag,
    bytes: Vec<u8>,
    points: usize,
}

/// Per-rank traffic counters. Messages a rank sends to itself are not
/// counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CommStats {
    pub points_sent: u64,
    pub points_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// Point batch wire format: little-endian `u64` count followed by
/// `(u64 id, f64 x, f64 y, f64 z)` records.
pub fn encode_points(points: &[(usize, Point3)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 32 * points.len());
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for (id, p) in points {
        out.extend_from_slice(&(*id as u64).to_le_bytes());
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

fn read_u64(bytes: &[u8], at: usize) -> Result<[u8; 8]> {
    bytes
        .get(at..at + 8)
        .map(|s| s.try_into().expect("slice of length 8"))
        .ok_or_else(|| Error::Comm(format!("message truncated at byte {at}")))
}

pub fn decode_points(bytes: &[u8]) -> Result<Vec<(usize, Point3)>> {
    let n = u64::from_le_bytes(read_u64(bytes, 0)?) as usize;
    if bytes.len() != 8 + 32 * n {
        return Err(Error::Comm(format!("batch of {n} points has {} bytes", bytes.len())));
    }
    (0..n)
        .map(|k| {
            let at = 8 + 32 * k;
            let id = u64::from_le_bytes(read_u64(bytes, at)?) as usize;
            let mut p = [0.0; 3];
            for (a, c) in p.iter_mut().enumerate() {
                *c = f64::from_le_bytes(read_u64(bytes, at + 8 + 8 * a)?);
            }
            Ok((id, p))
        })
        .collect()
}

fn encode_boxes(rep: &CoarseRep) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 48 * rep.boxes.len());
    out.extend_from_slice(&(rep.boxes.len() as u64).to_le_bytes());
    for b in &rep.boxes {
        for c in b.min.iter().chain(&b.max) {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

fn decode_boxes(bytes: &[u8]) -> Result<CoarseRep> {
    let n = u64::from_le_bytes(read_u64(bytes, 0)?) as usize;
    if bytes.len() != 8 + 48 * n {
        return Err(Error::Comm(format!("coarse representation of {n} boxes has {} bytes", bytes.len())));
    }
    let mut boxes = Vec::with_capacity(n);
    for k in 0..n {
        let mut v = [0.0; 6];
        for (a, c) in v.iter_mut().enumerate() {
            *c = f64::from_le_bytes(read_u64(bytes, 8 + 48 * k + 8 * a)?);
        }
        boxes.push(Aabb::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]));
    }
    Ok(CoarseRep { boxes })
}

/// Ranks with their owned points and a mailbox per ordered rank pair.
#[derive(Debug)]
pub struct RankSpace {
    n_ranks: usize,
    owned_src: Vec<Vec<(usize, Point3)>>,
    owned_dst: Vec<Vec<(usize, Point3)>>,
    n_src: usize,
    n_dst: usize,
    /// Queue for `from -> to` at `to * n_ranks + from`.
    queues: Vec<Mutex<VecDeque<Message>>>,
    pending: Vec<Mutex<usize>>,
    stats: Vec<Mutex<CommStats>>,
    cap_bytes: usize,
}

impl RankSpace {
    pub const DEFAULT_CAP_BYTES: usize = 1 << 30;

    pub fn new(src: &[Point3], dst: &[Point3], n_ranks: usize, scheme: PartitionScheme) -> Result<Self> {
        let ps = partition_points(src, n_ranks, scheme)?;
        let pd = partition_points(dst, n_ranks, scheme)?;
        Self::from_partition(src, dst, &ps, &pd)
    }

    /// Builds a space from explicit ownership sets, which must partition
    /// the source and destination ids.
    pub fn from_partition(src: &[Point3], dst: &[Point3], src_sets: &[Vec<usize>], dst_sets: &[Vec<usize>]) -> Result<Self> {
        let n_ranks = src_sets.len();
        if n_ranks == 0 || dst_sets.len() != n_ranks {
            return Err(Error::param("source and destination partitions need the same, nonzero rank count"));
        }
        let take = |pts: &[Point3], sets: &[Vec<usize>], what: &str| -> Result<Vec<Vec<(usize, Point3)>>> {
            let mut seen = vec![false; pts.len()];
            let mut out = Vec::with_capacity(sets.len());
            for set in sets {
                let mut v = Vec::with_capacity(set.len());
                for &i in set {
                    if i >= pts.len() || std::mem::replace(&mut seen[i], true) {
                        return Err(Error::param(format!("{what} partition repeats or exceeds id {i}")));
                    }
                    v.push((i, pts[i]));
                }
                v.sort_unstable_by_key(|e| e.0);
                out.push(v);
            }
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(Error::param(format!("{what} partition misses id {i}")));
            }
            Ok(out)
        };
        Ok(RankSpace {
            n_ranks,
            owned_src: take(src, src_sets, "source")?,
            owned_dst: take(dst, dst_sets, "destination")?,
            n_src: src.len(),
            n_dst: dst.len(),
            queues: (0..n_ranks * n_ranks).map(|_| Mutex::new(VecDeque::new())).collect(),
            pending: (0..n_ranks * n_ranks).map(|_| Mutex::new(0)).collect(),
            stats: (0..n_ranks).map(|_| Mutex::new(CommStats::default())).collect(),
            cap_bytes: Self::DEFAULT_CAP_BYTES,
        })
    }

    /// Limit on undelivered bytes per ordered rank pair.
    pub fn with_mailbox_cap(mut self, bytes: usize) -> Self {
        self.cap_bytes = bytes;
        self
    }

    pub fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    pub fn owned_src(&self, rank: usize) -> &[(usize, Point3)] {
        &self.owned_src[rank]
    }

    pub fn owned_dst(&self, rank: usize) -> &[(usize, Point3)] {
        &self.owned_dst[rank]
    }

    fn send(&self, from: usize, to: usize, msg: Message) -> Result<()> {
        let slot = to * self.n_ranks + from;
        {
            let mut pending = self.pending[slot].lock().expect("mailbox lock");
            if *pending + msg.bytes.len() > self.cap_bytes {
                return Err(Error::Comm(format!(
                    "mailbox {from} -> {to} overflow: {} pending + {} bytes exceeds cap {}",
                    *pending,
                    msg.bytes.len(),
                    self.cap_bytes
                )));
            }
            *pending += msg.bytes.len();
        }
        {
            let mut s = self.stats[from].lock().expect("stats lock");
            s.points_sent += msg.points as u64;
            s.bytes_sent += msg.bytes.len() as u64;
        }
        self.queues[slot].lock().expect("mailbox lock").push_back(msg);
        Ok(())
    }

    /// Drains every message addressed to `to`, in sender order and FIFO per
    /// sender.
    fn receive_all(&self, to: usize) -> Vec<(usize, Message)> {
        let mut out = Vec::new();
        for from in 0..self.n_ranks {
            let slot = to * self.n_ranks + from;
            let drained: Vec<Message> = self.queues[slot].lock().expect("mailbox lock").drain(..).collect();
            *self.pending[slot].lock().expect("mailbox lock") = 0;
            let mut s = self.stats[to].lock().expect("stats lock");
            for m in drained {
                s.points_received += m.points as u64;
                s.bytes_received += m.bytes.len() as u64;
                out.push((from, m));
            }
        }
        out
    }

    pub fn reset_stats(&self) {
        for s in &self.stats {
            *s.lock().expect("stats lock") = CommStats::default();
        }
    }
}

pub fn comm_stats(space: &RankSpace) -> Vec<CommStats> {
    space.stats.iter().map(|s| *s.lock().expect("stats lock")).collect()
}

/// CSV with header `rank,points_sent,points_received,bytes_sent,bytes_received`.
pub fn write_comm_stats(stats: &[CommStats], w: impl Write) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wr.write_record(["rank", "points_sent", "points_received", "bytes_sent", "bytes_received"])?;
    for (r, s) in stats.iter().enumerate() {
        wr.write_record([
            r.to_string(),
            s.points_sent.to_string(),
            s.points_received.to_string(),
            s.bytes_sent.to_string(),
            s.bytes_received.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Points a rank holds after the exchange, sorted by global id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReceivedSets {
    pub src: Vec<(usize, Point3)>,
    pub dst: Vec<(usize, Point3)>,
    /// `(sender, tag, global id)` for every point that arrived by message.
    pub log: Vec<(usize, MessageTag, usize)>,
}

/// Every rank publishes its coarse representation to every other rank.
pub fn exchange_coarse_reps(space: &RankSpace, max_boxes: usize) -> Result<Vec<Vec<CoarseRep>>> {
    let n = space.n_ranks;
    let own: Vec<CoarseRep> = (0..n)
        .into_par_iter()
        .map(|r| {
            let pts: Vec<Point3> = space.owned_src[r].iter().map(|e| e.1).collect();
            let rep = coarse_representation(&pts, max_boxes)?;
            let bytes = encode_boxes(&rep);
            for to in (0..n).filter(|&to| to != r) {
                space.send(r, to, Message { tag: MessageTag::CoarseRep, bytes: bytes.clone(), points: 0 })?;
            }
            Ok(rep)
        })
        .collect::<Result<_>>()?;
    // barrier
    (0..n)
        .into_par_iter()
        .map(|r| {
            let mut reps: Vec<Option<CoarseRep>> = vec![None; n];
            reps[r] = Some(own[r].clone());
            for (from, m) in space.receive_all(r) {
                if m.tag != MessageTag::CoarseRep {
                    return Err(Error::Comm(format!("rank {r} expected a coarse representation from {from}")));
                }
                reps[from] = Some(decode_boxes(&m.bytes)?);
            }
            reps.into_iter()
                .enumerate()
                .map(|(p, rep)| rep.ok_or_else(|| Error::Comm(format!("rank {r} never heard from rank {p}"))))
                .collect()
        })
        .collect()
}

/// Each rank `p` sends to every rank `r` its owned points that lie in `r`'s
/// coarse representation inflated by `inflation`; `reps[p][r]` is the
/// representation of `r` as known to `p`.
pub fn exchange_points(space: &RankSpace, reps: &[Vec<CoarseRep>], inflation: f64) -> Result<Vec<ReceivedSets>> {
    let n = space.n_ranks;
    if reps.len() != n || reps.iter().any(|v| v.len() != n) {
        return Err(Error::Shape(format!("coarse representations do not cover {n} ranks")));
    }
    (0..n).into_par_iter().try_for_each(|p| -> Result<()> {
        for r in (0..n).filter(|&r| r != p) {
            let region = reps[p][r].inflated(inflation);
            for (tag, owned) in [(MessageTag::SrcPoints, &space.owned_src[p]), (MessageTag::DstPoints, &space.owned_dst[p])] {
                let batch: Vec<(usize, Point3)> = owned.iter().filter(|e| region.contains(&e.1)).copied().collect();
                if !batch.is_empty() {
                    space.send(p, r, Message { tag, bytes: encode_points(&batch), points: batch.len() })?;
                }
            }
        }
        Ok(())
    })?;
    // barrier
    (0..n)
        .into_par_iter()
        .map(|r| {
            let mut set = ReceivedSets { src: space.owned_src[r].clone(), dst: space.owned_dst[r].clone(), log: Vec::new() };
            for (from, m) in space.receive_all(r) {
                let target = match m.tag {
                    MessageTag::SrcPoints => &mut set.src,
                    MessageTag::DstPoints => &mut set.dst,
                    MessageTag::CoarseRep => {
                        return Err(Error::Comm(format!("rank {r} got an unexpected coarse representation from {from}")))
                    }
                };
                for (id, p) in decode_points(&m.bytes)? {
                    set.log.push((from, m.tag, id));
                    target.push((id, p));
                }
            }
            for v in [&mut set.src, &mut set.dst] {
                v.sort_unstable_by_key(|e| e.0);
                v.dedup_by_key(|e| e.0);
            }
            Ok(set)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistConfig {
    pub max_boxes: usize,
    /// Upper bound on the distance from any point to its nearest reference
    /// vertex; `None` uses the reference graph's `h_max`.
    pub snap_margin: Option<f64>,
}

impl Default for DistConfig {
    fn default() -> Self {
        DistConfig { max_boxes: 8, snap_margin: None }
    }
}

/// Assembled `(global id, radius, column)` triples of one rank, and its halo size.
type RankColumns = (Vec<(usize, f64, crate::interp::Column)>, usize);

#[derive(Clone, Debug)]
pub struct DistributedAssembly {
    pub matrices: OperatorMatrices,
    pub received: Vec<ReceivedSets>,
    /// Vertices (core plus fringe) of each rank's halo graph.
    pub halo_sizes: Vec<usize>,
}

/// Runs the full exchange and per-rank column assembly, then gathers the
/// columns on a single root.
pub fn distributed_assemble(
    space: &RankSpace,
    graph: Option<&GeodesicGraph>,
    params: &KernelParams,
    cfg: &DistConfig,
) -> Result<DistributedAssembly> {
    params.validate()?;
    let distance = Distance::from_params(graph, params)?;
    let margin = match distance.graph() {
        Some(g) => cfg.snap_margin.unwrap_or(g.h_max()).max(g.h_max()),
        None => 0.0,
    };
    let reach = params.max_radius() + 2.0 * margin;
    let reps = exchange_coarse_reps(space, cfg.max_boxes)?;
    let received = exchange_points(space, &reps, reach)?;

    let per_rank: Vec<RankColumns> = (0..space.n_ranks)
        .into_par_iter()
        .map(|r| {
            let mine = &reps[r][r];
            let halo = match distance.graph() {
                Some(g) => {
                    let region = mine.inflated(reach + margin);
                    let mut core = Vec::new();
                    for b in &region.boxes {
                        core.extend(g.vertex_index().query_box(b));
                    }
                    core.sort_unstable();
                    core.dedup();
                    Some(g.restrict(&core))
                }
                None => None,
            };
            let local_distance = match (&distance, &halo) {
                (Distance::Thresholded { cfg, .. }, Some(h)) => Distance::Thresholded { graph: h, cfg: *cfg },
                _ => Distance::Euclidean,
            };
            let limit = halo.as_ref().map(|_| margin);
            let set = &received[r];
            let unzip = |v: &[(usize, Point3)]| -> (Vec<usize>, Vec<Point3>) { v.iter().copied().unzip() };
            let (sid, spt) = unzip(&set.src);
            let (did, dpt) = unzip(&set.dst);
            let src = IndexedPoints::with_ids(sid, spt, halo.as_ref(), limit)?;
            let dst = IndexedPoints::with_ids(did, dpt, halo.as_ref(), limit)?;
            let asm = ColumnAssembler { src: &src, dst: &dst, distance: local_distance, params: *params };
            let slots: Vec<usize> = space.owned_src[r]
                .iter()
                .map(|(id, _)| {
                    set.src
                        .binary_search_by_key(id, |e| e.0)
                        .map_err(|_| Error::Internal(format!("rank {r} lost its own source point {id}")))
                })
                .collect::<Result<_>>()?;
            let radii = radii_for(&asm, slots.clone())?;
            let cols = columns_for(&asm, &slots, &radii)?;
            let out = slots.iter().zip(radii).zip(cols).map(|((&s, r), c)| (src.global_id(s), r, c)).collect();
            Ok((out, halo.map_or(0, |h| h.num_vertices())))
        })
        .collect::<Result<_>>()?;

    // gather on the root
    let mut radii = vec![f64::NAN; space.n_src];
    let mut columns: Vec<Option<crate::interp::Column>> = vec![None; space.n_src];
    let mut halo_sizes = Vec::with_capacity(space.n_ranks);
    for (cols, halo) in per_rank {
        halo_sizes.push(halo);
        for (j, r, c) in cols {
            radii[j] = r;
            columns[j] = Some(c);
        }
    }
    let columns = columns
        .into_iter()
        .enumerate()
        .map(|(j, c)| c.ok_or_else(|| Error::Internal(format!("no rank assembled column {j}"))))
        .collect::<Result<Vec<_>>>()?;
    let matrices = finish_matrices(space.n_src, space.n_dst, radii, columns)?;
    Ok(DistributedAssembly { matrices, received, halo_sizes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesic::build_graph;
    use crate::interp::assemble_matrices;
    use crate::mesh::{compute_metrics, generate_ring, sample_points, ElementKind, RingParams, SampleMode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    #[test]
    fn partition_trivial_cases() {
        let pts = random_points(10, 1);
        assert_eq!(partition_points(&pts, 1, PartitionScheme::Block).unwrap(), vec![(0..10).collect::<Vec<_>>()]);
        assert_eq!(
            partition_points(&pts, 2, PartitionScheme::Block).unwrap(),
            vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]
        );
        assert_eq!(partition_points(&pts, 3, PartitionScheme::Block).unwrap()[0].len(), 4);
        assert!(matches!(partition_points(&pts, 11, PartitionScheme::Morton), Err(Error::Parameter(_))));
        assert!(matches!(partition_points(&pts, 0, PartitionScheme::Block), Err(Error::Parameter(_))));
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_covering(n in 1usize..200, k in 1usize..9, seed in any::<u64>(), morton in any::<bool>()) {
            prop_assume!(k <= n);
            let pts = random_points(n, seed);
            let scheme = if morton { PartitionScheme::Morton } else { PartitionScheme::Block };
            let parts = partition_points(&pts, k, scheme).unwrap();
            prop_assert_eq!(parts.len(), k);
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(parts.iter().all(|p| !p.is_empty()));
        }

        #[test]
        fn coarse_rep_covers_points(n in 1usize..150, boxes in 1usize..12, seed in any::<u64>()) {
            let pts = random_points(n, seed);
            let rep = coarse_representation(&pts, boxes).unwrap();
            prop_assert!(rep.boxes.len() <= boxes);
            prop_assert!(pts.iter().all(|p| rep.contains(p)));
        }

        #[test]
        fn wire_format_round_trips(ids in proptest::collection::vec(any::<u64>(), 0..20), x in any::<f64>()) {
            let batch: Vec<(usize, Point3)> = ids.iter().map(|&i| (i as usize, [x, -x, i as f64])).collect();
            let back = decode_points(&encode_points(&batch)).unwrap();
            prop_assert_eq!(back.len(), batch.len());
            for (a, b) in back.iter().zip(&batch) {
                prop_assert_eq!(a.0, b.0);
                for k in 0..3 {
                    prop_assert_eq!(a.1[k].to_bits(), b.1[k].to_bits());
                }
            }
        }
    }

    #[test]
    fn coarse_rep_single_and_clusters() {
        let pts = vec![[0.0, 0.0, 0.0], [0.1, 0.1, 0.0], [10.0, 0.0, 0.0], [10.1, 0.2, 0.1]];
        let one = coarse_representation(&pts, 1).unwrap();
        assert_eq!(one.boxes, vec![Aabb::from_points(&pts)]);
        let two = coarse_representation(&pts, 2).unwrap();
        assert_eq!(two.boxes.len(), 2);
        assert!(two.volume() < one.volume());
        for b in &two.boxes {
            let inside = pts.iter().filter(|p| b.contains(p)).count();
            assert_eq!(inside, 2);
        }
        let same = coarse_representation(&[[1.0; 3]; 3], 5).unwrap();
        assert_eq!(same.boxes.len(), 1);
    }

    #[test]
    fn truncated_message_is_rejected() {
        let bytes = encode_points(&[(3, [1.0, 2.0, 3.0])]);
        assert!(matches!(decode_points(&bytes[..20]), Err(Error::Comm(_))));
        assert!(matches!(decode_points(&bytes[..4]), Err(Error::Comm(_))));
    }

    #[test]
    fn single_rank_has_no_traffic() {
        let pts = random_points(30, 2);
        let space = RankSpace::new(&pts, &pts, 1, PartitionScheme::Block).unwrap();
        let reps = exchange_coarse_reps(&space, 8).unwrap();
        let got = exchange_points(&space, &reps, 0.5).unwrap();
        assert_eq!(got[0].src, pts.iter().copied().enumerate().collect::<Vec<_>>());
        assert!(got[0].log.is_empty());
        assert_eq!(comm_stats(&space), vec![CommStats::default()]);
    }

    #[test]
    fn separated_clusters_exchange_nothing() {
        let mut pts = random_points(20, 3);
        for p in pts.iter_mut().skip(10) {
            p[0] += 5.0;
        }
        let space = RankSpace::new(&pts, &pts, 2, PartitionScheme::Block).unwrap();
        let reps = exchange_coarse_reps(&space, 4).unwrap();
        let got = exchange_points(&space, &reps, 0.0).unwrap();
        assert!(got.iter().all(|g| g.log.is_empty()));
        let s = comm_stats(&space);
        assert!(s.iter().all(|c| c.points_sent == 0 && c.points_received == 0));
    }

    #[test]
    fn exchange_matches_brute_force_intersection() {
        let src = random_points(300, 4);
        let dst = random_points(200, 5);
        let space = RankSpace::new(&src, &dst, 4, PartitionScheme::Morton).unwrap();
        let reps = exchange_coarse_reps(&space, 3).unwrap();
        let inflation = 0.05;
        let got = exchange_points(&space, &reps, inflation).unwrap();
        let mut expected = Vec::new();
        let mut actual = Vec::new();
        for r in 0..4 {
            let region = reps[r][r].inflated(inflation);
            for p in (0..4).filter(|&p| p != r) {
                for (tag, owned) in [(MessageTag::SrcPoints, space.owned_src(p)), (MessageTag::DstPoints, space.owned_dst(p))] {
                    for (id, x) in owned {
                        let inside = region.boxes.iter().any(|b| (0..3).all(|k| b.min[k] <= x[k] && x[k] <= b.max[k]));
                        if inside {
                            expected.push((p, r, tag as u8, *id));
                        }
                    }
                }
            }
            actual.extend(got[r].log.iter().map(|&(p, tag, id)| (p, r, tag as u8, id)));
        }
        expected.sort_unstable();
        actual.sort_unstable();
        assert_eq!(actual, expected);
        let stats = comm_stats(&space);
        let sent: u64 = stats.iter().map(|s| s.points_sent).sum();
        let recv: u64 = stats.iter().map(|s| s.points_received).sum();
        assert_eq!(sent, expected.len() as u64);
        assert_eq!(sent, recv);
        assert_eq!(stats.iter().map(|s| s.bytes_sent).sum::<u64>(), stats.iter().map(|s| s.bytes_received).sum::<u64>());
    }

    #[test]
    fn mailbox_cap_overflows() {
        let pts = random_points(50, 6);
        let space = RankSpace::new(&pts, &pts, 2, PartitionScheme::Block).unwrap().with_mailbox_cap(40);
        assert!(matches!(exchange_coarse_reps(&space, 8), Err(Error::Comm(_))));
    }

    #[test]
    fn bad_explicit_partition() {
        let pts = random_points(4, 7);
        let ok = vec![vec![0, 1], vec![2, 3]];
        assert!(RankSpace::from_partition(&pts, &pts, &ok, &ok).is_ok());
        let dup = vec![vec![0, 1], vec![1, 2, 3]];
        assert!(RankSpace::from_partition(&pts, &pts, &dup, &ok).is_err());
        let miss = vec![vec![0], vec![2, 3]];
        assert!(RankSpace::from_partition(&pts, &pts, &ok, &miss).is_err());
    }

    fn ring() -> (Vec<Point3>, Vec<Point3>, GeodesicGraph, KernelParams) {
        let rp = RingParams { n_theta: 24, n_section: 2, ..RingParams::default() };
        let src_mesh = generate_ring(&rp, ElementKind::Tet).unwrap();
        let dst_mesh = generate_ring(&RingParams { n_theta: 32, n_section: 2, ..rp }, ElementKind::Hex).unwrap();
        let src = sample_points(&src_mesh, SampleMode::Vertices).unwrap();
        let dst = sample_points(&dst_mesh, SampleMode::Barycenters).unwrap();
        let graph = build_graph(&src_mesh).unwrap();
        let params = KernelParams::with_source_h_avg(compute_metrics(&src_mesh).unwrap().h_avg);
        (src, dst, graph, params)
    }

    #[test]
    fn gathered_matrices_equal_serial() {
        let (src, dst, graph, params) = ring();
        let serial = assemble_matrices(&src, &dst, Some(&graph), &params).unwrap();
        for n in [1, 3, 5] {
            for scheme in [PartitionScheme::Block, PartitionScheme::Morton] {
                let space = RankSpace::new(&src, &dst, n, scheme).unwrap();
                let d = distributed_assemble(&space, Some(&graph), &params, &DistConfig { max_boxes: 2, ..Default::default() }).unwrap();
                assert!(d.matrices.bit_identical(&serial), "{n} ranks, {scheme:?}");
                if n > 1 {
                    assert!(d.halo_sizes.iter().all(|&h| h > 0 && h <= graph.num_vertices()));
                }
            }
        }
        let euclid = KernelParams { geodesic: false, ..params };
        let serial = assemble_matrices(&src, &dst, None, &euclid).unwrap();
        let space = RankSpace::new(&src, &dst, 4, PartitionScheme::Block).unwrap();
        let d = distributed_assemble(&space, None, &euclid, &DistConfig::default()).unwrap();
        assert!(d.matrices.bit_identical(&serial));
    }

    #[test]
    fn coarse_exchange_receives_every_needed_point() {
        let (src, dst, graph, params) = ring();
        let space = RankSpace::new(&src, &dst, 4, PartitionScheme::Morton).unwrap();
        let d = distributed_assemble(&space, Some(&graph), &params, &DistConfig::default()).unwrap();
        // every nonzero entry of a rank's columns must reference a point the rank holds
        for r in 0..4 {
            let held_src: std::collections::HashSet<usize> = d.received[r].src.iter().map(|e| e.0).collect();
            let held_dst: std::collections::HashSet<usize> = d.received[r].dst.iter().map(|e| e.0).collect();
            let owned: std::collections::HashSet<usize> = space.owned_src(r).iter().map(|e| e.0).collect();
            for (i, j, _) in d.matrices.phi_int.triplets() {
                if owned.contains(&j) {
                    assert!(held_src.contains(&i));
                }
            }
            for (i, j, _) in d.matrices.phi_eval.triplets() {
                if owned.contains(&j) {
                    assert!(held_dst.contains(&i));
                }
            }
        }
    }

    #[test]
    fn comm_stats_csv() {
        let stats = vec![CommStats { points_sent: 3, points_received: 1, bytes_sent: 104, bytes_received: 40 }, CommStats::default()];
        let mut out = Vec::new();
        write_comm_stats(&stats, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "rank,points_sent,points_received,bytes_sent,bytes_received\n0,3,1,104,40\n1,0,0,0,0\n"
        );
    }
}
