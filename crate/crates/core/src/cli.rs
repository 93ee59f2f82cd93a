//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical
//! failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::benchmark::{convergence_slope, reference_graph, run_convergence, transfer, ConvergenceConfig, ConvergenceRow, Field, StageTimes};
use crate::dist::{comm_stats, distributed_assemble, DistConfig, PartitionScheme, RankSpace};
use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::interp::{linf_error, FieldVector, InterpolationOperator, KernelParams, SolverConfig};
use crate::mesh::{
    compute_metrics, generate_folded_sheet, generate_ring, read_mesh, sample_points, write_mesh, write_vtk_with_data,
    DataLocation, ElementKind, Mesh, MeshFormat, RingParams, SampleMode, SheetParams,
};
use crate::solver::{GmresParams, PreconditionerKind};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "georbf", version, about = "Field transfer between non-matching volume meshes")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "GEORBF_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a benchmark mesh.
    Genmesh {
        #[command(subcommand)]
        shape: Shape,
    },
    /// Interpolate a field from a source mesh to a destination mesh.
    Interpolate(InterpolateArgs),
    /// Ring convergence study with and without geodesic thresholding.
    Convergence(ConvergenceArgs),
    /// Time the pipeline stages across thread and rank counts.
    Bench(BenchArgs),
}

#[derive(Debug, Subcommand)]
pub enum Shape {
    /// Slit torus with square section.
    Ring(RingArgs),
    /// Thin sheet folded back onto itself.
    Sheet(SheetArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Element {
    Tet,
    Hex,
}

impl From<Element> for ElementKind {
    fn from(e: Element) -> Self {
        match e {
            Element::Tet => ElementKind::Tet,
            Element::Hex => ElementKind::Hex,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sample {
    Vertices,
    Barycenters,
}

impl From<Sample> for SampleMode {
    fn from(s: Sample) -> Self {
        match s {
            Sample::Vertices => SampleMode::Vertices,
            Sample::Barycenters => SampleMode::Barycenters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precond {
    Ilu0,
    Jacobi,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Partition {
    Block,
    Morton,
}

impl From<Partition> for PartitionScheme {
    fn from(p: Partition) -> Self {
        match p {
            Partition::Block => PartitionScheme::Block,
            Partition::Morton => PartitionScheme::Morton,
        }
    }
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err("expected a positive number".into()),
    }
}

fn slit_angle(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 2.0 * std::f64::consts::PI => Ok(v),
        _ => Err("slit angle must lie in (0, 2*pi) radians".into()),
    }
}

fn beta(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 => Ok(v),
        _ => Err("expected a positive number or inf".into()),
    }
}

fn at_least_one(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err("expected an integer >= 1".into()),
    }
}

fn pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let err = || format!("expected <a>:<b> with positive integers, got '{s}'");
    let (a, b) = s.split_once(':').ok_or_else(err)?;
    match (a.parse::<usize>(), b.parse::<usize>()) {
        (Ok(a), Ok(b)) if a >= 1 && b >= 1 => Ok((a, b)),
        _ => Err(err()),
    }
}

fn sweep_pair(s: &str) -> std::result::Result<(usize, f64), String> {
    let err = || format!("expected <M>:<alpha> with M >= 1 and alpha >= 1, got '{s}'");
    let (a, b) = s.split_once(':').ok_or_else(err)?;
    match (a.parse::<usize>(), b.parse::<f64>()) {
        (Ok(m), Ok(alpha)) if m >= 1 && alpha >= 1.0 && alpha.is_finite() => Ok((m, alpha)),
        _ => Err(err()),
    }
}

#[derive(Debug, Args)]
pub struct RingArgs {
    #[arg(long, default_value_t = 16, value_parser = at_least_one)]
    pub n_theta: usize,
    #[arg(long, default_value_t = 1, value_parser = at_least_one)]
    pub n_section: usize,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub major_radius: f64,
    #[arg(long, default_value_t = 0.25, value_parser = positive)]
    pub section_side: f64,
    #[arg(long, default_value_t = 0.2, value_parser = slit_angle)]
    pub slit_angle: f64,
    #[arg(long, value_enum, default_value_t = Element::Tet)]
    pub element: Element,
    /// Output path; `.vtk` selects legacy VTK, anything else the native format.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SheetArgs {
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub length: f64,
    #[arg(long, default_value_t = 0.4, value_parser = positive)]
    pub width: f64,
    #[arg(long, default_value_t = 0.1, value_parser = positive)]
    pub thickness: f64,
    #[arg(long, default_value_t = 0.03, value_parser = positive)]
    pub gap: f64,
    #[arg(long, default_value_t = 10, value_parser = at_least_one)]
    pub n_length: usize,
    #[arg(long, default_value_t = 6, value_parser = at_least_one)]
    pub n_joint: usize,
    #[arg(long, default_value_t = 1, value_parser = at_least_one)]
    pub n_thickness: usize,
    #[arg(long, default_value_t = 4, value_parser = at_least_one)]
    pub n_width: usize,
    #[arg(long, value_enum, default_value_t = Element::Tet)]
    pub element: Element,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct KernelArgs {
    /// Neighbour rank defining the support radius.
    #[arg(short = 'm', long = "m", default_value_t = 4, value_parser = at_least_one)]
    pub m: usize,
    #[arg(long, default_value_t = 2.0, value_parser = positive)]
    pub alpha: f64,
    /// High-curvature coefficient; `inf` disables detection.
    #[arg(long, default_value_t = 0.5, value_parser = beta)]
    pub beta: f64,
    /// `r_max` as a multiple of the source mesh's average element diameter.
    #[arg(long, default_value_t = 10.0, value_parser = positive)]
    pub r_max_factor: f64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub geodesic: Switch,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 1e-10, value_parser = positive)]
    pub tol: f64,
    #[arg(long, default_value_t = 100, value_parser = at_least_one)]
    pub restart: usize,
    #[arg(long, default_value_t = 2000, value_parser = at_least_one)]
    pub max_iter: usize,
    #[arg(long, value_enum, default_value_t = Precond::Ilu0)]
    pub preconditioner: Precond,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            gmres: GmresParams { tol: self.tol, restart: self.restart, max_iter: self.max_iter },
            preconditioner: match self.preconditioner {
                Precond::Ilu0 => PreconditionerKind::Ilu0,
                Precond::Jacobi => PreconditionerKind::Jacobi,
                Precond::None => PreconditionerKind::Identity,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub dst: PathBuf,
    #[arg(long, value_enum, default_value_t = Sample::Vertices)]
    pub src_sample: Sample,
    #[arg(long, value_enum, default_value_t = Sample::Vertices)]
    pub dst_sample: Sample,
    /// `atan2zn`, `constant:<c>`, `linear:<a>,<b>,<c>,<d>` or `csv:<path>`.
    #[arg(long)]
    pub field: String,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Simulated ranks for the matrix assembly.
    #[arg(long, default_value_t = 1, value_parser = at_least_one)]
    pub ranks: usize,
    #[arg(long, value_enum, default_value_t = Partition::Morton)]
    pub partition: Partition,
    /// CSV output with columns id,x,y,z,value.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Optional legacy VTK output of the destination mesh with the field.
    #[arg(long)]
    pub vtk: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvergenceArgs {
    /// Source levels as <n_theta>:<n_section>.
    #[arg(long, value_delimiter = ',', value_parser = pair, default_value = "16:1,32:2,64:4,128:8")]
    pub levels: Vec<(usize, usize)>,
    /// Destination hex ring as <n_theta>:<n_section>.
    #[arg(long, value_parser = pair, default_value = "256:16")]
    pub dst: (usize, usize),
    /// (M, alpha) pairs as <M>:<alpha>.
    #[arg(long, value_delimiter = ',', value_parser = sweep_pair, default_value = "4:2")]
    pub sweep: Vec<(usize, f64)>,
    #[arg(long, default_value_t = 0.5, value_parser = beta)]
    pub beta: f64,
    #[arg(long, default_value_t = 10.0, value_parser = positive)]
    pub r_max_factor: f64,
    #[arg(long, default_value_t = 0.2, value_parser = slit_angle)]
    pub slit_angle: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// CSV output with columns m,alpha,level,h_max_src,e_inf_geo,e_inf_euclid,slope.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64, value_parser = at_least_one)]
    pub n_theta: usize,
    #[arg(long, default_value_t = 4, value_parser = at_least_one)]
    pub n_section: usize,
    #[arg(long, default_value_t = 96, value_parser = at_least_one)]
    pub dst_n_theta: usize,
    #[arg(long, default_value_t = 6, value_parser = at_least_one)]
    pub dst_n_section: usize,
    #[arg(long, value_delimiter = ',', value_parser = at_least_one, default_value = "1")]
    pub thread_counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = at_least_one)]
    pub ranks: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Partition::Morton)]
    pub partition: Partition,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// CSV output with columns threads_or_ranks,stage,wall_time,speedup.
    #[arg(short, long)]
    pub output: PathBuf,
    /// CSV of per-rank communication counters for every rank count.
    #[arg(long)]
    pub comm_output: Option<PathBuf>,
}

/// Exit code for an error raised after argument parsing.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parameter(_) => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        Error::Comm(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Parses `args` and runs the command, printing diagnostics to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut out = std::io::stdout();
    match execute(cli, &mut out) {
        Ok(()) => 0,
        Err((e, code)) => {
            eprintln!("error: {e}");
            code
        }
    }
}

type Failure = (Error, i32);

fn fail(e: Error) -> Failure {
    let code = exit_code(&e);
    (e, code)
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::param("--threads must be >= 1"));
        }
        b = b.num_threads(t);
    }
    b.build().map_err(|e| Error::Internal(format!("cannot start worker pool: {e}")))
}

pub fn execute(cli: Cli, out: &mut (impl Write + Send)) -> std::result::Result<(), Failure> {
    let threads = cli.threads;
    match cli.command {
        Command::Bench(args) => cmd_bench(&args, threads, out),
        command => {
            let pool = pool(threads).map_err(fail)?;
            pool.install(|| match command {
                Command::Genmesh { shape } => cmd_genmesh(&shape, out).map_err(fail),
                Command::Interpolate(args) => cmd_interpolate(&args, out).map_err(fail),
                Command::Convergence(args) => cmd_convergence(&args, out),
                Command::Bench(_) => unreachable!(),
            })
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io(e)
}

fn cmd_genmesh(shape: &Shape, out: &mut impl Write) -> Result<()> {
    let (mesh, path) = match shape {
        Shape::Ring(a) => {
            let p = RingParams {
                major_radius: a.major_radius,
                section_side: a.section_side,
                slit_angle: a.slit_angle,
                n_theta: a.n_theta,
                n_section: a.n_section,
            };
            (generate_ring(&p, a.element.into())?, &a.output)
        }
        Shape::Sheet(a) => {
            let p = SheetParams {
                length: a.length,
                width: a.width,
                thickness: a.thickness,
                gap: a.gap,
                n_length: a.n_length,
                n_joint: a.n_joint,
                n_thickness: a.n_thickness,
                n_width: a.n_width,
            };
            (generate_folded_sheet(&p, a.element.into())?, &a.output)
        }
    };
    write_mesh(&mesh, path, MeshFormat::from_path(path))?;
    let m = compute_metrics(&mesh)?;
    writeln!(out, "elements: {} ({})", mesh.num_elements(), mesh.kind().name()).map_err(io_err)?;
    writeln!(out, "vertices: {}", mesh.num_vertices()).map_err(io_err)?;
    writeln!(out, "h_min: {}\nh_avg: {}\nh_max: {}", m.h_min, m.h_avg, m.h_max).map_err(io_err)?;
    Ok(())
}

fn kernel_params(k: &KernelArgs, src_mesh: &Mesh) -> Result<KernelParams> {
    let h = compute_metrics(src_mesh)?;
    let p = KernelParams {
        m: k.m,
        alpha: k.alpha,
        r_max: k.r_max_factor * h.h_avg,
        beta: k.beta,
        geodesic: k.geodesic == Switch::On,
    };
    p.validate()?;
    Ok(p)
}

enum SourceField {
    Builtin(Field),
    Values(Vec<f64>),
}

fn parse_field(spec: &str) -> Result<SourceField> {
    match spec.strip_prefix("csv:") {
        Some(path) => Ok(SourceField::Values(read_field_csv(Path::new(path))?)),
        None => Ok(SourceField::Builtin(spec.parse()?)),
    }
}

/// Values from a CSV with a header row: the `value` column if present,
/// the last column otherwise.
fn read_field_csv(path: &Path) -> Result<Vec<f64>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rd.headers()?.clone();
    let col = headers.iter().position(|h| h.trim() == "value").unwrap_or(headers.len().saturating_sub(1));
    let mut values = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let cell = rec.get(col).ok_or_else(|| Error::Parse { line, message: format!("missing column {}", col + 1) })?;
        let v = cell
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Parse { line, message: format!("'{cell}' is not a number") })?;
        values.push(v);
    }
    Ok(values)
}

fn write_point_values(path: &Path, points: &[Point3], values: &[f64]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    wr.write_record(["id", "x", "y", "z", "value"])?;
    for (i, (p, v)) in points.iter().zip(values).enumerate() {
        wr.write_record([i.to_string(), p[0].to_string(), p[1].to_string(), p[2].to_string(), v.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

fn cmd_interpolate(a: &InterpolateArgs, out: &mut impl Write) -> Result<()> {
    let field = parse_field(&a.field)?;
    let src_mesh = read_mesh(&a.src, MeshFormat::from_path(&a.src))?;
    let dst_mesh = read_mesh(&a.dst, MeshFormat::from_path(&a.dst))?;
    let kernel = kernel_params(&a.kernel, &src_mesh)?;
    let solver = a.solver.config();
    let src = sample_points(&src_mesh, a.src_sample.into())?;
    let dst = sample_points(&dst_mesh, a.dst_sample.into())?;
    let f_src = match &field {
        SourceField::Builtin(f) => f.sample(&src)?,
        SourceField::Values(v) if v.len() != src.len() => {
            return Err(Error::Shape(format!(
                "field file has {} values, expected {} (one per source point)",
                v.len(),
                src.len()
            )))
        }
        SourceField::Values(v) => v.clone(),
    };

    let (values, iterations, residual, times) = if a.ranks == 1 {
        let r = transfer(&src_mesh, Some(&dst_mesh), &src, &dst, &f_src, &kernel, solver)?;
        (r.values, r.report.iterations, r.report.residual, r.times)
    } else {
        let mut times = StageTimes::default();
        let t = Instant::now();
        let graph = if kernel.geodesic { Some(reference_graph(&src_mesh, Some(&dst_mesh))?) } else { None };
        times.graph = if graph.is_some() { t.elapsed() } else { Duration::ZERO };
        let t = Instant::now();
        let space = RankSpace::new(&src, &dst, a.ranks, a.partition.into())?;
        let asm = distributed_assemble(&space, graph.as_ref(), &kernel, &DistConfig::default())?;
        times.assembly = t.elapsed();
        let t = Instant::now();
        let op = InterpolationOperator::new(src.clone(), dst.clone(), asm.matrices, solver)?;
        times.solve = t.elapsed();
        let t = Instant::now();
        let (fv, report) = op.evaluate(&FieldVector::new(f_src, op.src_tag()))?;
        times.evaluate = t.elapsed();
        let traffic: u64 = comm_stats(&space).iter().map(|s| s.points_sent).sum();
        writeln!(out, "ranks: {} (points exchanged: {traffic})", a.ranks).map_err(io_err)?;
        (fv.values, report.iterations, report.residual, times)
    };

    write_point_values(&a.output, &dst, &values)?;
    if let Some(vtk) = &a.vtk {
        let location = match a.dst_sample {
            Sample::Vertices => DataLocation::Points,
            Sample::Barycenters => DataLocation::Cells,
        };
        let mut w = BufWriter::new(File::create(vtk)?);
        write_vtk_with_data(&dst_mesh, &mut w, location, "value", &values)?;
        w.flush()?;
    }

    writeln!(out, "source points: {}\ndestination points: {}", src.len(), dst.len()).map_err(io_err)?;
    writeln!(out, "solve iterations: {iterations}\nrelative residual: {residual:e}").map_err(io_err)?;
    if let SourceField::Builtin(f) = field {
        let exact = f.sample(&dst)?;
        writeln!(out, "e_inf: {:e}", linf_error(&values, &exact)?).map_err(io_err)?;
    }
    for (name, d) in times.named() {
        writeln!(out, "time {name}: {:.6} s", d.as_secs_f64()).map_err(io_err)?;
    }
    Ok(())
}

fn write_convergence(path: &Path, rows: &[ConvergenceRow]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    wr.write_record(["m", "alpha", "level", "h_max_src", "e_inf_geo", "e_inf_euclid", "slope"])?;
    for r in rows {
        let n = rows.iter().filter(|o| o.m == r.m && o.alpha == r.alpha).count();
        let slope = if n >= 2 { convergence_slope(rows, r.m, r.alpha).map(|s| s.to_string()).unwrap_or_default() } else { String::new() };
        wr.write_record([
            r.m.to_string(),
            r.alpha.to_string(),
            r.level.to_string(),
            r.h_max_src.to_string(),
            r.e_inf_geo.to_string(),
            r.e_inf_euclid.to_string(),
            slope,
        ])?;
    }
    wr.flush()?;
    Ok(())
}

fn cmd_convergence(a: &ConvergenceArgs, out: &mut impl Write) -> std::result::Result<(), Failure> {
    let cfg = ConvergenceConfig {
        ring: RingParams { slit_angle: a.slit_angle, ..RingParams::default() },
        levels: a.levels.clone(),
        dst: a.dst,
        sweep: a.sweep.clone(),
        beta: a.beta,
        r_max_factor: a.r_max_factor,
        solver: a.solver.config(),
    };
    let (rows, failure) = match run_convergence(&cfg) {
        Ok(rows) => (rows, None),
        Err((rows, e)) => (rows, Some(e)),
    };
    write_convergence(&a.output, &rows).map_err(fail)?;
    for r in &rows {
        writeln!(
            out,
            "M={} alpha={} level={} h_max={:.4} e_geo={:.3e} e_euclid={:.3e}",
            r.m, r.alpha, r.level, r.h_max_src, r.e_inf_geo, r.e_inf_euclid
        )
        .map_err(|e| fail(io_err(e)))?;
    }
    match failure {
        None => Ok(()),
        Some(Error::Parameter(msg)) => Err((Error::Parameter(msg), EXIT_USAGE)),
        Some(e) => Err((e, EXIT_NUMERICAL)),
    }
}

fn cmd_bench(a: &BenchArgs, threads: Option<usize>, out: &mut impl Write) -> std::result::Result<(), Failure> {
    let setup = || -> Result<_> {
        let base = RingParams::default();
        let src_mesh = generate_ring(&RingParams { n_theta: a.n_theta, n_section: a.n_section, ..base }, ElementKind::Tet)?;
        let dst_mesh =
            generate_ring(&RingParams { n_theta: a.dst_n_theta, n_section: a.dst_n_section, ..base }, ElementKind::Hex)?;
        let src = sample_points(&src_mesh, SampleMode::Vertices)?;
        let dst = sample_points(&dst_mesh, SampleMode::Vertices)?;
        let f_src = Field::Atan2Zn.sample(&src)?;
        let kernel = kernel_params(&a.kernel, &src_mesh)?;
        Ok((src_mesh, dst_mesh, src, dst, f_src, kernel))
    };
    let (src_mesh, dst_mesh, src, dst, f_src, kernel) = pool(threads).map_err(fail)?.install(setup).map_err(fail)?;
    let solver = a.solver.config();

    let mut rows: Vec<(usize, &'static str, f64, f64)> = Vec::new();
    let mut base_times: Option<StageTimes> = None;
    let mut reference = None;
    for &t in &a.thread_counts {
        let r = pool(Some(t))
            .map_err(fail)?
            .install(|| transfer(&src_mesh, Some(&dst_mesh), &src, &dst, &f_src, &kernel, solver))
            .map_err(fail)?;
        let base = *base_times.get_or_insert(r.times);
        for ((name, d), (_, b)) in r.times.named().into_iter().zip(base.named()) {
            rows.push((t, name, d.as_secs_f64(), speedup(b, d)));
        }
        match &reference {
            None => reference = Some(r.operator.matrices().clone()),
            Some(m) if !m.bit_identical(r.operator.matrices()) => {
                return Err(fail(Error::Internal(format!("matrices assembled with {t} threads differ"))))
            }
            Some(_) => {}
        }
    }

    let mut comm_rows = Vec::new();
    if !a.ranks.is_empty() {
        let graph = if kernel.geodesic { Some(reference_graph(&src_mesh, Some(&dst_mesh)).map_err(fail)?) } else { None };
        let mut base: Option<Duration> = None;
        for &n in &a.ranks {
            let space = RankSpace::new(&src, &dst, n, a.partition.into()).map_err(fail)?;
            let t = Instant::now();
            let d = pool(threads)
                .map_err(fail)?
                .install(|| distributed_assemble(&space, graph.as_ref(), &kernel, &DistConfig::default()))
                .map_err(fail)?;
            let el = t.elapsed();
            let b = *base.get_or_insert(el);
            rows.push((n, "dist_assembly", el.as_secs_f64(), speedup(b, el)));
            if let Some(m) = &reference {
                if !m.bit_identical(&d.matrices) {
                    return Err(fail(Error::Internal(format!("matrices assembled on {n} ranks differ from the serial ones"))));
                }
            }
            for (r, s) in comm_stats(&space).into_iter().enumerate() {
                comm_rows.push((n, r, s));
            }
        }
    }

    if rows.iter().any(|r| r.2 == 0.0) {
        eprintln!("warning: some stages finished below the timer resolution; their speedup is reported as 1");
    }
    let write = || -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&a.output)?;
        wr.write_record(["threads_or_ranks", "stage", "wall_time", "speedup"])?;
        for (n, stage, wall, sp) in &rows {
            wr.write_record([n.to_string(), stage.to_string(), wall.to_string(), sp.to_string()])?;
        }
        wr.flush()?;
        if let Some(path) = &a.comm_output {
            let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
            wr.write_record(["n_ranks", "rank", "points_sent", "points_received", "bytes_sent", "bytes_received"])?;
            for (n, r, s) in &comm_rows {
                wr.write_record([
                    n.to_string(),
                    r.to_string(),
                    s.points_sent.to_string(),
                    s.points_received.to_string(),
                    s.bytes_sent.to_string(),
                    s.bytes_received.to_string(),
                ])?;
            }
            wr.flush()?;
        }
        Ok(())
    };
    write().map_err(fail)?;
    for (n, stage, wall, sp) in &rows {
        writeln!(out, "{n:>4} {stage:<14} {wall:>12.6} s  speedup {sp:.2}").map_err(|e| fail(io_err(e)))?;
    }
    Ok(())
}

fn speedup(base: Duration, d: Duration) -> f64 {
    if base.is_zero() || d.is_zero() {
        1.0
    } else {
        base.as_secs_f64() / d.as_secs_f64()
    }
}
