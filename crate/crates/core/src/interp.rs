//! Rescaled, localized RBF interpolation with optional geodesic distance
//! thresholding.
//!
//! Every source point `x_j` carries a compactly supported Wendland kernel
//! of radius `r_j = alpha * min(d_M(j), r_max)`, where `d_M(j)` is the
//! distance to its `M`-th nearest source neighbour. Interpolation solves
//! `Phi_int gamma = f_src` and evaluates `Phi_eval gamma`, divided pointwise
//! by the interpolant of the constant one.
//!
//! With geodesic thresholding enabled, the kernel distance between `x` and
//! `x_j` is the thresholded distance of [`crate::geodesic`] with threshold
//! `r_j`. That distance is never smaller than `|x - x_j|`, which makes a
//! Euclidean box of half-width `r_j` a sound candidate filter.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geodesic::{GeodesicCache, GeodesicGraph, ThresholdConfig};
use crate::geom::{dist, Point3};
use crate::solver::{gmres, GmresParams, Preconditioner, PreconditionerKind, SolveReport, SparseMatrix};
use crate::spatial::{build_index_with_ids, mth_nearest_distance, Aabb, PointIndex};

/// Below this magnitude the rescaling denominator marks a point as uncovered.
pub const UNCOVERED_THRESHOLD: f64 = 1e-12;

/// Compactly supported C2 Wendland function `max(1 - t/r, 0)^4 (1 + 4 t/r)`.
pub fn wendland(t: f64, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::param(format!("Wendland support radius must be positive, got {r}")));
    }
    if !(t >= 0.0) {
        return Err(Error::param(format!("Wendland distance must be >= 0, got {t}")));
    }
    Ok(wendland_unchecked(t, r))
}

#[inline]
fn wendland_unchecked(t: f64, r: f64) -> f64 {
    let q = t / r;
    if q >= 1.0 {
        return 0.0;
    }
    let s = 1.0 - q;
    let s2 = s * s;
    s2 * s2 * (1.0 + 4.0 * q)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    /// Neighbour rank defining the support radius.
    pub m: usize,
    /// Radius magnification, `>= 1`.
    pub alpha: f64,
    /// Cap on the neighbour search distance.
    pub r_max: f64,
    /// High-curvature coefficient; `f64::INFINITY` disables detection.
    pub beta: f64,
    pub geodesic: bool,
}

impl KernelParams {
    /// Defaults: `M = 4`, `alpha = 2`, `beta = 0.5`, `r_max = 10 h_avg`.
    pub fn with_source_h_avg(h_avg: f64) -> Self {
        KernelParams { m: 4, alpha: 2.0, r_max: 10.0 * h_avg, beta: 0.5, geodesic: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::param("M must be >= 1"));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(Error::param(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(Error::param(format!("r_max must be positive, got {}", self.r_max)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::param(format!("beta must be > 0 or inf, got {}", self.beta)));
        }
        Ok(())
    }

    /// Largest support radius any point can receive.
    pub fn max_radius(&self) -> f64 {
        self.alpha * self.r_max
    }
}

/// A point list with a spatial index and, when a graph is supplied, each
/// point's nearest graph vertex.
///
/// Points keep global ids so that rank-local subsets assemble the same
/// matrix rows as the full set.
#[derive(Clone, Debug)]
pub struct IndexedPoints {
    global: Vec<usize>,
    points: Vec<Point3>,
    snaps: Vec<usize>,
    index: PointIndex,
}

impl IndexedPoints {
    pub fn new(points: &[Point3], graph: Option<&GeodesicGraph>) -> Result<Self> {
        Self::with_ids((0..points.len()).collect(), points.to_vec(), graph, None)
    }

    /// `max_snap`, when given, bounds the distance from any point to its
    /// nearest vertex; exceeding it is reported as an internal error.
    pub fn with_ids(
        global: Vec<usize>,
        points: Vec<Point3>,
        graph: Option<&GeodesicGraph>,
        max_snap: Option<f64>,
    ) -> Result<Self> {
        let snaps = match graph {
            Some(g) => points
                .par_iter()
                .map(|p| {
                    let (v, d) = g.snap(p)?;
                    if let Some(limit) = max_snap {
                        if d > limit {
                            return Err(Error::Internal(format!(
                                "point {p:?} is {d} from its nearest local vertex, beyond the halo margin {limit}"
                            )));
                        }
                    }
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let index = build_index_with_ids(points.clone(), (0..points.len()).collect());
        Ok(IndexedPoints { global, points, snaps, index })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn global_id(&self, slot: usize) -> usize {
        self.global[slot]
    }

    pub fn point(&self, slot: usize) -> &Point3 {
        &self.points[slot]
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }
}

/// How kernel distances are measured.
#[derive(Clone, Copy, Debug)]
pub enum Distance<'g> {
    Euclidean,
    Thresholded { graph: &'g GeodesicGraph, cfg: ThresholdConfig },
}

impl<'g> Distance<'g> {
    /// Thresholded distance when `params.geodesic` is set (a graph is then
    /// required), plain Euclidean otherwise.
    pub fn from_params(graph: Option<&'g GeodesicGraph>, params: &KernelParams) -> Result<Self> {
        if !params.geodesic {
            return Ok(Distance::Euclidean);
        }
        let graph = graph.ok_or_else(|| Error::param("geodesic thresholding requires a reference graph"))?;
        let cfg = ThresholdConfig { beta: params.beta, h_max: graph.h_max() };
        cfg.validate()?;
        Ok(Distance::Thresholded { graph, cfg })
    }

    pub fn graph(&self) -> Option<&'g GeodesicGraph> {
        match self {
            Distance::Euclidean => None,
            Distance::Thresholded { graph, .. } => Some(graph),
        }
    }

    /// Distance `d(x, y; r)` between a source point and a candidate,
    /// if it is at most `bound`. `r` is the geodesic threshold of the
    /// thresholded distance and `bound <= r`.
    #[inline]
    fn within(
        &self,
        cache: &mut GeodesicCache,
        x: (&Point3, usize),
        y: (&Point3, usize),
        r: f64,
        bound: f64,
    ) -> Result<Option<f64>> {
        let e = dist(x.0, y.0);
        if e > bound {
            return Ok(None);
        }
        match self {
            Distance::Euclidean => Ok(Some(e)),
            Distance::Thresholded { graph, cfg } => {
                // g_h beyond max(bound, beta h + e) cannot yield d <= bound
                let reach = r.min(bound.max(cfg.beta * cfg.h_max + e));
                let g = cache.vertex_distance_within(graph, x.1, y.1, reach)?;
                let d = match g {
                    None if reach < r => return Ok(None),
                    g => cfg.combine(g, e),
                };
                Ok((d <= bound).then_some(d))
            }
        }
    }
}

/// Everything needed to compute kernel columns for a set of owned sources.
pub(crate) struct ColumnAssembler<'a> {
    pub src: &'a IndexedPoints,
    pub dst: &'a IndexedPoints,
    pub distance: Distance<'a>,
    pub params: KernelParams,
}

impl ColumnAssembler<'_> {
    fn snap(points: &IndexedPoints, slot: usize) -> usize {
        points.snaps.get(slot).copied().unwrap_or(usize::MAX)
    }

    /// Support radius of the source at `slot`.
    pub fn radius(&self, slot: usize, cache: &mut GeodesicCache) -> Result<f64> {
        let x = (&self.src.points[slot], Self::snap(self.src, slot));
        let r_max = self.params.r_max;
        let mut failure = None;
        let d_m = mth_nearest_distance(&self.src.index, x.0, self.params.m, r_max, |other, bound| {
            if other == slot || failure.is_some() {
                return None;
            }
            let y = (&self.src.points[other], Self::snap(self.src, other));
            match self.distance.within(cache, x, y, r_max, bound) {
                Ok(d) => d,
                Err(e) => {
                    failure = Some(e);
                    None
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        if d_m <= 0.0 {
            return Err(Error::DegenerateRadius(self.src.global[slot]));
        }
        Ok(self.params.alpha * d_m)
    }

    /// Nonzero entries of column `slot` of `Phi_int` and `Phi_eval`, as
    /// `(global row, value)` sorted by row.
    pub fn column(
        &self,
        slot: usize,
        radius: f64,
        cache: &mut GeodesicCache,
        scratch: &mut Vec<usize>,
    ) -> Result<Column> {
        let x = (&self.src.points[slot], Self::snap(self.src, slot));
        let margin = self.distance.graph().map_or(0.0, |g| 2.0 * g.h_max());
        let bbox = Aabb::around(x.0, radius + margin);
        let mut run = |points: &IndexedPoints, scratch: &mut Vec<usize>| -> Result<Vec<(usize, f64)>> {
            points.index.query_box_into(&bbox, scratch);
            let mut out = Vec::new();
            for &i in scratch.iter() {
                let y = (&points.points[i], Self::snap(points, i));
                // d >= |x - y|, so points at or beyond the radius contribute 0
                if dist(x.0, y.0) >= radius {
                    continue;
                }
                if let Some(d) = self.distance.within(cache, x, y, radius, radius)? {
                    let v = wendland_unchecked(d, radius);
                    if v > 0.0 {
                        out.push((points.global[i], v));
                    }
                }
            }
            out.sort_unstable_by_key(|e| e.0);
            Ok(out)
        };
        let int = run(self.src, scratch)?;
        let eval = run(self.dst, scratch)?;
        Ok((int, eval))
    }
}

/// Support radii of all source points.
pub fn compute_radii(src_points: &[Point3], graph: Option<&GeodesicGraph>, params: &KernelParams) -> Result<Vec<f64>> {
    params.validate()?;
    if src_points.is_empty() {
        return Err(Error::EmptyInput("no source points"));
    }
    let distance = Distance::from_params(graph, params)?;
    let src = IndexedPoints::new(src_points, distance.graph())?;
    let asm = ColumnAssembler { src: &src, dst: &src, distance, params: *params };
    radii_for(&asm, 0..src.len())
}

pub(crate) fn radii_for(asm: &ColumnAssembler<'_>, slots: impl IntoParallelIterator<Item = usize>) -> Result<Vec<f64>> {
    slots
        .into_par_iter()
        .map_init(GeodesicCache::new, |cache, j| asm.radius(j, cache))
        .collect()
}

pub(crate) type Column = (Vec<(usize, f64)>, Vec<(usize, f64)>);

pub(crate) fn columns_for(
    asm: &ColumnAssembler<'_>,
    slots: &[usize],
    radii: &[f64],
) -> Result<Vec<Column>> {
    slots
        .par_iter()
        .zip(radii.par_iter())
        .map_init(
            || (GeodesicCache::new(), Vec::new()),
            |(cache, scratch), (&j, &r)| asm.column(j, r, cache, scratch),
        )
        .collect()
}

/// Support radii and the two kernel matrices.
#[derive(Clone, Debug)]
pub struct OperatorMatrices {
    pub radii: Vec<f64>,
    pub phi_int: SparseMatrix,
    pub phi_eval: SparseMatrix,
}

impl OperatorMatrices {
    pub fn bit_identical(&self, other: &OperatorMatrices) -> bool {
        self.radii.len() == other.radii.len()
            && self.radii.iter().zip(&other.radii).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.phi_int.bit_identical(&other.phi_int)
            && self.phi_eval.bit_identical(&other.phi_eval)
    }
}

/// Serial-algorithm assembly of both matrices, parallel over source
/// columns. The result does not depend on the number of worker threads.
pub fn assemble_matrices(
    src_points: &[Point3],
    dst_points: &[Point3],
    graph: Option<&GeodesicGraph>,
    params: &KernelParams,
) -> Result<OperatorMatrices> {
    let (radii, columns) = assemble_staged(src_points, dst_points, graph, params, |_| {})?;
    finish_matrices(src_points.len(), dst_points.len(), radii, columns)
}

/// Assembly stages, reported through `on_stage` as they complete.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Radii,
    Assembly,
}

pub(crate) fn assemble_staged(
    src_points: &[Point3],
    dst_points: &[Point3],
    graph: Option<&GeodesicGraph>,
    params: &KernelParams,
    mut on_stage: impl FnMut(Stage),
) -> Result<(Vec<f64>, Vec<Column>)> {
    params.validate()?;
    if src_points.is_empty() {
        return Err(Error::EmptyInput("no source points"));
    }
    let distance = Distance::from_params(graph, params)?;
    let src = IndexedPoints::new(src_points, distance.graph())?;
    let dst = IndexedPoints::new(dst_points, distance.graph())?;
    let asm = ColumnAssembler { src: &src, dst: &dst, distance, params: *params };
    let radii = radii_for(&asm, 0..src.len())?;
    on_stage(Stage::Radii);
    let slots: Vec<usize> = (0..src.len()).collect();
    let columns = columns_for(&asm, &slots, &radii)?;
    on_stage(Stage::Assembly);
    Ok((radii, columns))
}

pub(crate) fn finish_matrices(n_src: usize, n_dst: usize, radii: Vec<f64>, columns: Vec<Column>) -> Result<OperatorMatrices> {
    let (int_cols, eval_cols): (Vec<_>, Vec<_>) = columns.into_iter().unzip();
    let phi_int = SparseMatrix::from_columns(n_src, &int_cols)?;
    let phi_eval = SparseMatrix::from_columns(n_dst, &eval_cols)?;
    Ok(OperatorMatrices { radii, phi_int, phi_eval })
}

/// Identity of a point list, derived from its coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PointSetTag(u64);

impl PointSetTag {
    pub fn of(points: &[Point3]) -> Self {
        let mut h = DefaultHasher::new();
        points.len().hash(&mut h);
        for p in points {
            for c in p {
                c.to_bits().hash(&mut h);
            }
        }
        PointSetTag(h.finish())
    }
}

/// Scalar values attached to a specific point list.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldVector {
    pub values: Vec<f64>,
    pub tag: PointSetTag,
}

impl FieldVector {
    pub fn new(values: Vec<f64>, tag: PointSetTag) -> Self {
        FieldVector { values, tag }
    }

    /// Samples `f` at every point.
    pub fn sample(points: &[Point3], f: impl Fn(&Point3) -> f64) -> Self {
        FieldVector { values: points.iter().map(f).collect(), tag: PointSetTag::of(points) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub gmres: GmresParams,
    pub preconditioner: PreconditionerKind,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { gmres: GmresParams::default(), preconditioner: PreconditionerKind::Ilu0 }
    }
}

/// Assembled transfer operator from source to destination points.
#[derive(Clone, Debug)]
pub struct InterpolationOperator {
    src_points: Vec<Point3>,
    dst_points: Vec<Point3>,
    src_tag: PointSetTag,
    dst_tag: PointSetTag,
    matrices: OperatorMatrices,
    precond: Preconditioner,
    solver: SolverConfig,
    rescale: Vec<f64>,
    uncovered: Vec<usize>,
    rescale_report: SolveReport,
}

impl InterpolationOperator {
    /// Factorizes the preconditioner and computes the rescaling
    /// denominator (the interpolant of the constant one at every
    /// destination point).
    pub fn new(
        src_points: Vec<Point3>,
        dst_points: Vec<Point3>,
        matrices: OperatorMatrices,
        solver: SolverConfig,
    ) -> Result<Self> {
        let n_src = src_points.len();
        if matrices.phi_int.nrows() != n_src
            || matrices.phi_int.ncols() != n_src
            || matrices.phi_eval.nrows() != dst_points.len()
            || matrices.phi_eval.ncols() != n_src
        {
            return Err(Error::Shape("kernel matrices do not match the point sets".into()));
        }
        let precond = Preconditioner::build(&matrices.phi_int, solver.preconditioner)?;
        let ones = vec![1.0; n_src];
        let (gamma, report) = gmres(&matrices.phi_int, &ones, &precond, &solver.gmres)?;
        if !report.converged {
            return Err(Error::Solve { iterations: report.iterations, residual: report.residual });
        }
        let rescale = matrices.phi_eval.matvec(&gamma)?;
        let uncovered = rescale
            .iter()
            .enumerate()
            .filter(|(_, v)| !(v.abs() >= UNCOVERED_THRESHOLD))
            .map(|(i, _)| i)
            .collect();
        Ok(InterpolationOperator {
            src_tag: PointSetTag::of(&src_points),
            dst_tag: PointSetTag::of(&dst_points),
            src_points,
            dst_points,
            matrices,
            precond,
            solver,
            rescale,
            uncovered,
            rescale_report: report,
        })
    }

    pub fn src_points(&self) -> &[Point3] {
        &self.src_points
    }

    pub fn dst_points(&self) -> &[Point3] {
        &self.dst_points
    }

    pub fn src_tag(&self) -> PointSetTag {
        self.src_tag
    }

    pub fn dst_tag(&self) -> PointSetTag {
        self.dst_tag
    }

    pub fn matrices(&self) -> &OperatorMatrices {
        &self.matrices
    }

    pub fn radii(&self) -> &[f64] {
        &self.matrices.radii
    }

    pub fn phi_int(&self) -> &SparseMatrix {
        &self.matrices.phi_int
    }

    pub fn phi_eval(&self) -> &SparseMatrix {
        &self.matrices.phi_eval
    }

    pub fn preconditioner(&self) -> &Preconditioner {
        &self.precond
    }

    pub fn rescale_denominator(&self) -> &[f64] {
        &self.rescale
    }

    pub fn rescale_report(&self) -> &SolveReport {
        &self.rescale_report
    }

    /// Destination points outside every kernel support.
    pub fn uncovered(&self) -> &[usize] {
        &self.uncovered
    }

    /// Solves for the coefficients of `f_src` and returns the rescaled
    /// interpolant at the destination points.
    pub fn evaluate(&self, f_src: &FieldVector) -> Result<(FieldVector, SolveReport)> {
        if f_src.tag != self.src_tag || f_src.values.len() != self.src_points.len() {
            return Err(Error::Shape(format!(
                "field with {} values does not belong to the {} source points",
                f_src.values.len(),
                self.src_points.len()
            )));
        }
        if !self.uncovered.is_empty() {
            return Err(Error::Uncovered { ids: self.uncovered.clone() });
        }
        let (gamma, report) = gmres(&self.matrices.phi_int, &f_src.values, &self.precond, &self.solver.gmres)?;
        if !report.converged {
            return Err(Error::Solve { iterations: report.iterations, residual: report.residual });
        }
        let mut values = self.matrices.phi_eval.matvec(&gamma)?;
        for (v, d) in values.iter_mut().zip(&self.rescale) {
            *v /= d;
        }
        Ok((FieldVector::new(values, self.dst_tag), report))
    }

    /// Component-wise evaluation of a vector field.
    pub fn vector_evaluate(&self, fields: &[FieldVector]) -> Result<Vec<FieldVector>> {
        fields.iter().map(|f| self.evaluate(f).map(|(v, _)| v)).collect()
    }
}

/// Convenience: assemble matrices and build the operator in one go.
pub fn assemble(
    src_points: &[Point3],
    dst_points: &[Point3],
    graph: Option<&GeodesicGraph>,
    params: &KernelParams,
    solver: SolverConfig,
) -> Result<InterpolationOperator> {
    let matrices = assemble_matrices(src_points, dst_points, graph, params)?;
    InterpolationOperator::new(src_points.to_vec(), dst_points.to_vec(), matrices, solver)
}

/// Relative L-infinity error `max |f - exact| / max |exact|`.
pub fn linf_error(f_dst: &[f64], exact: &[f64]) -> Result<f64> {
    if f_dst.len() != exact.len() {
        return Err(Error::Shape(format!("{} values against {} exact values", f_dst.len(), exact.len())));
    }
    let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::DivisionByZero("exact values are all zero"));
    }
    let err = f_dst.iter().zip(exact).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(err / scale)
}
