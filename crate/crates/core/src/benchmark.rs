//! Benchmark fields, the end-to-end transfer pipeline and the ring
//! convergence study.

use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::geodesic::{build_graph, GeodesicGraph};
use crate::geom::Point3;
use crate::interp::{assemble_staged, finish_matrices, linf_error, FieldVector, InterpolationOperator, KernelParams, SolverConfig, Stage};
use crate::mesh::{compute_metrics, generate_ring, sample_points, ElementKind, Mesh, RingParams, SampleMode, SheetParams, SheetRegion};
use crate::solver::SolveReport;

/// Analytic test fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Field {
    /// `atan2(z, -x)`, discontinuous across the ring slit.
    Atan2Zn,
    Constant(f64),
    /// `a x + b y + c z + d`.
    Linear([f64; 4]),
    /// `c1` on the lower slab of a folded sheet, `c2` on the upper one,
    /// blended linearly in angle through the joint.
    Sheet { params: SheetParams, c1: f64, c2: f64 },
}

impl Field {
    pub fn eval(&self, p: &Point3) -> Result<f64> {
        match *self {
            Field::Atan2Zn => {
                if p[0] == 0.0 && p[2] == 0.0 {
                    return Err(Error::DivisionByZero("atan2(z, -x) is undefined at x = z = 0"));
                }
                Ok(p[2].atan2(-p[0]))
            }
            Field::Constant(c) => Ok(c),
            Field::Linear([a, b, c, d]) => Ok(a * p[0] + b * p[1] + c * p[2] + d),
            Field::Sheet { params, c1, c2 } => Ok(match params.region_of(p) {
                SheetRegion::Lower => c1,
                SheetRegion::Upper => c2,
                SheetRegion::Joint { angle_fraction } => c1 + (c2 - c1) * angle_fraction,
            }),
        }
    }

    pub fn sample(&self, points: &[Point3]) -> Result<Vec<f64>> {
        points.iter().map(|p| self.eval(p)).collect()
    }
}

impl FromStr for Field {
    type Err = Error;

    /// `atan2zn`, `constant:<c>` or `linear:<a>,<b>,<c>,<d>`.
    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| Error::param(format!("bad number '{t}' in field '{s}'")));
        match s.split_once(':') {
            None if s == "atan2zn" => Ok(Field::Atan2Zn),
            Some(("constant", c)) => Ok(Field::Constant(num(c)?)),
            Some(("linear", rest)) => {
                let v: Vec<f64> = rest.split(',').map(num).collect::<Result<_>>()?;
                let coeffs: [f64; 4] =
                    v.try_into().map_err(|_| Error::param(format!("linear field needs 4 coefficients: '{s}'")))?;
                Ok(Field::Linear(coeffs))
            }
            _ => Err(Error::param(format!("unknown field '{s}'"))),
        }
    }
}

/// Wall time of each pipeline stage. Stages that did not run stay zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub graph: Duration,
    pub radii: Duration,
    pub assembly: Duration,
    /// Preconditioner setup and the rescaling solve.
    pub solve: Duration,
    /// Coefficient solve for the field and evaluation at the destination.
    pub evaluate: Duration,
}

impl StageTimes {
    pub fn named(&self) -> [(&'static str, Duration); 5] {
        [
            ("graph", self.graph),
            ("radii", self.radii),
            ("assembly", self.assembly),
            ("solve", self.solve),
            ("evaluate", self.evaluate),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct TransferResult {
    pub values: Vec<f64>,
    pub operator: InterpolationOperator,
    pub report: SolveReport,
    pub times: StageTimes,
    pub graph_built: bool,
}

/// Reference graph for geodesic queries: the finer of the two meshes by
/// `h_max`, the source mesh on ties.
pub fn reference_graph(src_mesh: &Mesh, dst_mesh: Option<&Mesh>) -> Result<GeodesicGraph> {
    let src_h = compute_metrics(src_mesh)?.h_max;
    match dst_mesh {
        Some(d) if !d.is_empty() && compute_metrics(d)?.h_max < src_h => build_graph(d),
        _ => build_graph(src_mesh),
    }
}

/// Builds the operator from `src_points` to `dst_points` and applies it
/// to `f_src`. The geodesic graph is only built when `kernel.geodesic`.
pub fn transfer(
    src_mesh: &Mesh,
    dst_mesh: Option<&Mesh>,
    src_points: &[Point3],
    dst_points: &[Point3],
    f_src: &[f64],
    kernel: &KernelParams,
    solver: SolverConfig,
) -> Result<TransferResult> {
    let mut times = StageTimes::default();
    let t = Instant::now();
    let graph = if kernel.geodesic { Some(reference_graph(src_mesh, dst_mesh)?) } else { None };
    times.graph = if graph.is_some() { t.elapsed() } else { Duration::ZERO };

    let mut mark = Instant::now();
    let (radii, columns) = assemble_staged(src_points, dst_points, graph.as_ref(), kernel, |stage| {
        let now = Instant::now();
        match stage {
            Stage::Radii => times.radii = now - mark,
            Stage::Assembly => times.assembly = now - mark,
        }
        mark = now;
    })?;
    let t = Instant::now();
    let matrices = finish_matrices(src_points.len(), dst_points.len(), radii, columns)?;
    times.assembly += t.elapsed();

    let t = Instant::now();
    let operator = InterpolationOperator::new(src_points.to_vec(), dst_points.to_vec(), matrices, solver)?;
    times.solve = t.elapsed();

    let t = Instant::now();
    let f = FieldVector::new(f_src.to_vec(), operator.src_tag());
    let (out, report) = operator.evaluate(&f)?;
    times.evaluate = t.elapsed();
    Ok(TransferResult { values: out.values, operator, report, times, graph_built: graph.is_some() })
}

/// Least-squares slope of `log e` against `log h`.
pub fn loglog_slope(h: &[f64], e: &[f64]) -> Result<f64> {
    if h.len() != e.len() {
        return Err(Error::Shape(format!("{} mesh sizes against {} errors", h.len(), e.len())));
    }
    if h.len() < 2 {
        return Err(Error::param("a slope needs at least two levels"));
    }
    if h.iter().chain(e).any(|v| !(*v > 0.0)) {
        return Err(Error::param("mesh sizes and errors must be positive for a log-log fit"));
    }
    let x: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = e.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::DivisionByZero("all mesh sizes are equal"));
    }
    Ok(sxy / sxx)
}

/// Ring convergence study: tet source rings at increasing resolution,
/// one fixed hex destination ring.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceConfig {
    pub ring: RingParams,
    /// `(n_theta, n_section)` per source level.
    pub levels: Vec<(usize, usize)>,
    pub dst: (usize, usize),
    /// `(M, alpha)` pairs.
    pub sweep: Vec<(usize, f64)>,
    pub beta: f64,
    pub r_max_factor: f64,
    pub solver: SolverConfig,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            ring: RingParams::default(),
            levels: vec![(16, 1), (32, 2), (64, 4), (128, 8)],
            dst: (256, 16),
            sweep: vec![(4, 2.0)],
            beta: 0.5,
            r_max_factor: 10.0,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub m: usize,
    pub alpha: f64,
    pub level: usize,
    pub h_max_src: f64,
    pub e_inf_geo: f64,
    pub e_inf_euclid: f64,
}

/// Errors per level, with and without geodesic thresholding.
///
/// On failure the rows completed so far are returned with the error.
pub fn run_convergence(cfg: &ConvergenceConfig) -> std::result::Result<Vec<ConvergenceRow>, (Vec<ConvergenceRow>, Error)> {
    let mut rows = Vec::new();
    macro_rules! tryp {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => return Err((rows, err)),
            }
        };
    }
    if cfg.levels.len() < 3 {
        return Err((rows, Error::param(format!("convergence needs >= 3 levels, got {}", cfg.levels.len()))));
    }
    let dst_mesh = tryp!(generate_ring(&RingParams { n_theta: cfg.dst.0, n_section: cfg.dst.1, ..cfg.ring }, ElementKind::Hex));
    let dst_points = tryp!(sample_points(&dst_mesh, SampleMode::Vertices));
    let exact = tryp!(Field::Atan2Zn.sample(&dst_points));
    for &(m, alpha) in &cfg.sweep {
        for (level, &(n_theta, n_section)) in cfg.levels.iter().enumerate() {
            let src_mesh = tryp!(generate_ring(&RingParams { n_theta, n_section, ..cfg.ring }, ElementKind::Tet));
            let metrics = tryp!(compute_metrics(&src_mesh));
            let src_points = tryp!(sample_points(&src_mesh, SampleMode::Vertices));
            let f_src = tryp!(Field::Atan2Zn.sample(&src_points));
            let mut errs = [0.0; 2];
            for (k, geodesic) in [true, false].into_iter().enumerate() {
                let kernel = KernelParams { m, alpha, r_max: cfg.r_max_factor * metrics.h_avg, beta: cfg.beta, geodesic };
                let out = tryp!(transfer(&src_mesh, Some(&dst_mesh), &src_points, &dst_points, &f_src, &kernel, cfg.solver));
                errs[k] = tryp!(linf_error(&out.values, &exact));
            }
            rows.push(ConvergenceRow { m, alpha, level, h_max_src: metrics.h_max, e_inf_geo: errs[0], e_inf_euclid: errs[1] });
        }
    }
    Ok(rows)
}

/// Slope of the geodesic errors for one `(M, alpha)` pair.
pub fn convergence_slope(rows: &[ConvergenceRow], m: usize, alpha: f64) -> Result<f64> {
    let (h, e): (Vec<f64>, Vec<f64>) =
        rows.iter().filter(|r| r.m == m && r.alpha == alpha).map(|r| (r.h_max_src, r.e_inf_geo)).unzip();
    loglog_slope(&h, &e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn parse_fields() {
        assert_eq!("atan2zn".parse::<Field>().unwrap(), Field::Atan2Zn);
        assert_eq!("constant:3.7".parse::<Field>().unwrap(), Field::Constant(3.7));
        assert_eq!("linear:1,2,3,4".parse::<Field>().unwrap(), Field::Linear([1.0, 2.0, 3.0, 4.0]));
        for bad in ["atan", "constant:x", "linear:1,2", "linear:1,2,3,4,5", ""] {
            assert!(bad.parse::<Field>().is_err(), "{bad}");
        }
    }

    #[test]
    fn atan2zn_branches() {
        let f = Field::Atan2Zn;
        assert_eq!(f.eval(&[-1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((f.eval(&[0.0, 0.0, 1.0]).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!((f.eval(&[1.0, 0.0, 1e-9]).unwrap() - PI).abs() < 1e-8);
        assert!((f.eval(&[1.0, 0.0, -1e-9]).unwrap() + PI).abs() < 1e-8);
        assert!(matches!(f.eval(&[0.0, 5.0, 0.0]), Err(Error::DivisionByZero(_))));
    }

    #[test]
    fn linear_field() {
        assert_eq!(Field::Linear([1.0, -2.0, 0.5, 3.0]).eval(&[1.0, 1.0, 2.0]).unwrap(), 3.0);
    }

    #[test]
    fn slope_of_power_law() {
        let h = [0.4, 0.2, 0.1, 0.05];
        let e: Vec<f64> = h.iter().map(|v| 3.0 * v * v).collect();
        assert!((loglog_slope(&h, &e).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&h[..1], &e[..1]).is_err());
        assert!(loglog_slope(&[0.1, 0.1], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sheet_field_layers() {
        let params = SheetParams::default();
        let f = Field::Sheet { params, c1: 1.0, c2: 3.0 };
        assert_eq!(f.eval(&[0.5, 0.1, -0.05]).unwrap(), 1.0);
        assert_eq!(f.eval(&[0.5, 0.1, 0.05]).unwrap(), 3.0);
        assert!((f.eval(&[params.length + 0.1, 0.1, 0.0]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn geodesic_off_builds_no_graph() {
        let mesh = generate_ring(&RingParams { n_theta: 16, ..RingParams::default() }, ElementKind::Hex).unwrap();
        let pts = sample_points(&mesh, SampleMode::Vertices).unwrap();
        let dst = sample_points(&mesh, SampleMode::Barycenters).unwrap();
        let f = Field::Constant(2.0).sample(&pts).unwrap();
        let h = compute_metrics(&mesh).unwrap();
        let kernel = KernelParams { geodesic: false, ..KernelParams::with_source_h_avg(h.h_avg) };
        let out = transfer(&mesh, None, &pts, &dst, &f, &kernel, SolverConfig::default()).unwrap();
        assert!(!out.graph_built);
        assert_eq!(out.times.graph, Duration::ZERO);
        assert!(out.values.iter().all(|v| (v - 2.0).abs() < 1e-9));
    }
}
