//! Native text format and VTK legacy ASCII unstructured grids.
//!
//! Native layout:
//!
//! ```text
//! georbf-mesh v1 <tet|hex> <n_vertices> <n_elements>
//! <x> <y> <z>            (one line per vertex)
//! <i0> <i1> ...          (one line per element)
//! ```
//!
//! Coordinates are written with the shortest representation that parses
//! back to the same `f64`, so a write/read cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use super::{ElementKind, Mesh};
use crate::error::{Error, Result};

const NATIVE_MAGIC: &str = "georbf-mesh";
const NATIVE_VERSION: &str = "v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Native,
    VtkLegacyAscii,
}

impl MeshFormat {
    /// `.vtk` selects VTK, anything else the native format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("vtk") => MeshFormat::VtkLegacyAscii,
            _ => MeshFormat::Native,
        }
    }
}

pub fn read_mesh(path: impl AsRef<Path>, format: MeshFormat) -> Result<Mesh> {
    let file = File::open(path.as_ref())?;
    read_mesh_from(BufReader::new(file), format)
}

pub fn read_mesh_from(reader: impl Read, format: MeshFormat) -> Result<Mesh> {
    let mut text = String::new();
    BufReader::new(reader).read_to_string(&mut text)?;
    match format {
        MeshFormat::Native => parse_native(&text),
        MeshFormat::VtkLegacyAscii => parse_vtk(&text),
    }
}

pub fn write_mesh(mesh: &Mesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_mesh_to(mesh, &mut w, format)?;
    w.flush()?;
    Ok(())
}

pub fn write_mesh_to(mesh: &Mesh, w: &mut impl Write, format: MeshFormat) -> Result<()> {
    match format {
        MeshFormat::Native => write_native(mesh, w),
        MeshFormat::VtkLegacyAscii => write_vtk(mesh, w, None),
    }
}

/// Whether attached values live on vertices or on elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataLocation {
    Points,
    Cells,
}

/// Writes a VTK file with one scalar array attached.
pub fn write_vtk_with_data(
    mesh: &Mesh,
    w: &mut impl Write,
    location: DataLocation,
    name: &str,
    values: &[f64],
) -> Result<()> {
    let expected = match location {
        DataLocation::Points => mesh.num_vertices(),
        DataLocation::Cells => mesh.num_elements(),
    };
    if values.len() != expected {
        return Err(Error::Shape(format!(
            "data array '{name}' has {} values, expected {expected}",
            values.len()
        )));
    }
    write_vtk(mesh, w, Some((location, name, values)))
}

fn write_native(mesh: &Mesh, w: &mut impl Write) -> Result<()> {
    writeln!(
        w,
        "{NATIVE_MAGIC} {NATIVE_VERSION} {} {} {}",
        mesh.kind().name(),
        mesh.num_vertices(),
        mesh.num_elements()
    )?;
    for v in mesh.vertices() {
        writeln!(w, "{} {} {}", v[0], v[1], v[2])?;
    }
    for el in mesh.elements() {
        write_indices(w, el)?;
    }
    Ok(())
}

fn write_indices(w: &mut impl Write, el: &[usize]) -> std::io::Result<()> {
    let mut first = true;
    for i in el {
        if !first {
            w.write_all(b" ")?;
        }
        write!(w, "{i}")?;
        first = false;
    }
    w.write_all(b"\n")
}

fn write_vtk(mesh: &Mesh, w: &mut impl Write, data: Option<(DataLocation, &str, &[f64])>) -> Result<()> {
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "georbf mesh")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", mesh.num_vertices())?;
    for v in mesh.vertices() {
        writeln!(w, "{} {} {}", v[0], v[1], v[2])?;
    }
    let npe = mesh.kind().nodes_per_element();
    writeln!(w, "CELLS {} {}", mesh.num_elements(), mesh.num_elements() * (npe + 1))?;
    for el in mesh.elements() {
        write!(w, "{npe} ")?;
        write_indices(w, el)?;
    }
    writeln!(w, "CELL_TYPES {}", mesh.num_elements())?;
    let t = mesh.kind().vtk_cell_type();
    for _ in 0..mesh.num_elements() {
        writeln!(w, "{t}")?;
    }
    if let Some((location, name, values)) = data {
        match location {
            DataLocation::Points => writeln!(w, "POINT_DATA {}", values.len())?,
            DataLocation::Cells => writeln!(w, "CELL_DATA {}", values.len())?,
        }
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for v in values {
            writeln!(w, "{v}")?;
        }
    }
    Ok(())
}

/// Whitespace tokens tagged with their 1-based line number.
struct Tokens<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    current: Option<(usize, std::str::SplitWhitespace<'a>)>,
    last_line: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Tokens { lines: text.lines().enumerate().peekable(), current: None, last_line: 0 }
    }

    fn next_token(&mut self) -> Option<(usize, &'a str)> {
        loop {
            if let Some((line, it)) = self.current.as_mut() {
                if let Some(tok) = it.next() {
                    return Some((*line, tok));
                }
            }
            let (idx, text) = self.lines.next()?;
            self.last_line = idx + 1;
            self.current = Some((idx + 1, text.split_whitespace()));
        }
    }

    fn expect<T: FromStr>(&mut self, what: &str) -> Result<T> {
        match self.next_token() {
            Some((line, tok)) => tok.parse().map_err(|_| Error::Parse {
                line,
                message: format!("expected {what}, found '{tok}'"),
            }),
            None => Err(Error::Parse {
                line: self.last_line.max(1),
                message: format!("unexpected end of file while reading {what}"),
            }),
        }
    }

    fn keyword(&mut self) -> Option<(usize, &'a str)> {
        self.next_token()
    }
}

fn parse_native(text: &str) -> Result<Mesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, message: "empty file".into() })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != NATIVE_MAGIC || fields[1] != NATIVE_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected '{NATIVE_MAGIC} {NATIVE_VERSION} <tet|hex> <n_vertices> <n_elements>'"),
        });
    }
    let kind: ElementKind = fields[2]
        .parse()
        .map_err(|_| Error::Format(format!("unsupported element kind '{}'", fields[2])))?;
    let count = |s: &str, what: &str| {
        s.parse::<usize>().map_err(|_| Error::Parse { line: 1, message: format!("invalid {what} '{s}'") })
    };
    let nv = count(fields[3], "vertex count")?;
    let ne = count(fields[4], "element count")?;
    let npe = kind.nodes_per_element();

    let mut last = 1;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, l) = lines.next().ok_or(Error::Parse {
            line: last + 1,
            message: format!("file ends after {} of {nv} vertices", vertices.len()),
        })?;
        last = line;
        let parsed: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse { line, message: format!("invalid vertex '{l}'") })?;
        if parsed.len() != 3 {
            return Err(Error::Parse { line, message: format!("vertex needs 3 coordinates, found {}", parsed.len()) });
        }
        vertices.push([parsed[0], parsed[1], parsed[2]]);
    }
    let mut conn = Vec::with_capacity(ne * npe);
    for e in 0..ne {
        let (line, l) = lines.next().ok_or(Error::Parse {
            line: last + 1,
            message: format!("file ends after {e} of {ne} elements"),
        })?;
        last = line;
        let before = conn.len();
        for t in l.split_whitespace() {
            conn.push(t.parse::<usize>().map_err(|_| Error::Parse {
                line,
                message: format!("invalid vertex index '{t}'"),
            })?);
        }
        if conn.len() - before != npe {
            return Err(Error::Parse {
                line,
                message: format!("{} element needs {npe} indices, found {}", kind.name(), conn.len() - before),
            });
        }
    }
    if let Some((line, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Parse { line, message: format!("unexpected trailing content '{l}'") });
    }
    Mesh::new(kind, vertices, conn)
}

fn parse_vtk(text: &str) -> Result<Mesh> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if !header.starts_with("# vtk DataFile") {
        return Err(Error::Parse { line: 1, message: "missing '# vtk DataFile' header".into() });
    }
    if lines.next().is_none() {
        return Err(Error::Parse { line: 2, message: "missing title line".into() });
    }
    match lines.next().map(str::trim) {
        Some("ASCII") => {}
        Some("BINARY") => return Err(Error::Format("binary VTK files are not supported".into())),
        _ => return Err(Error::Parse { line: 3, message: "expected ASCII".into() }),
    }
    let body_offset = text.lines().take(3).map(|l| l.len() + 1).sum::<usize>().min(text.len());
    let mut tok = Tokens::new(&text[body_offset..]);
    // Line numbers from the tokenizer are relative to line 4.
    let shift = |e: Error| match e {
        Error::Parse { line, message } => Error::Parse { line: line + 3, message },
        other => other,
    };
    parse_vtk_body(&mut tok).map_err(shift)
}

fn parse_vtk_body(tok: &mut Tokens<'_>) -> Result<Mesh> {
    match (tok.keyword(), tok.keyword()) {
        (Some((_, "DATASET")), Some((_, "UNSTRUCTURED_GRID"))) => {}
        (Some((_, "DATASET")), Some((_, other))) => {
            return Err(Error::Format(format!("dataset type {other} is not supported")))
        }
        (Some((line, _)), _) | (None, Some((line, _))) => {
            return Err(Error::Parse { line, message: "expected DATASET UNSTRUCTURED_GRID".into() })
        }
        (None, None) => return Err(Error::Parse { line: 1, message: "missing DATASET".into() }),
    }

    let mut vertices: Option<Vec<[f64; 3]>> = None;
    let mut cells: Option<Vec<Vec<usize>>> = None;
    let mut types: Option<Vec<u32>> = None;
    while let Some((line, kw)) = tok.keyword() {
        match kw {
            "POINTS" => {
                let n: usize = tok.expect("point count")?;
                let ty: String = tok.expect("point data type")?;
                if !matches!(ty.as_str(), "float" | "double") {
                    return Err(Error::Format(format!("point data type {ty} is not supported")));
                }
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push([tok.expect("coordinate")?, tok.expect("coordinate")?, tok.expect("coordinate")?]);
                }
                vertices = Some(v);
            }
            "CELLS" => {
                let n: usize = tok.expect("cell count")?;
                let _size: usize = tok.expect("cell list size")?;
                let mut c = Vec::with_capacity(n);
                for _ in 0..n {
                    let k: usize = tok.expect("cell vertex count")?;
                    let mut cell = Vec::with_capacity(k);
                    for _ in 0..k {
                        cell.push(tok.expect("vertex index")?);
                    }
                    c.push(cell);
                }
                cells = Some(c);
            }
            "CELL_TYPES" => {
                let n: usize = tok.expect("cell type count")?;
                let mut t = Vec::with_capacity(n);
                for _ in 0..n {
                    t.push(tok.expect("cell type")?);
                }
                types = Some(t);
            }
            "POINT_DATA" | "CELL_DATA" | "FIELD" => break,
            other => {
                return Err(Error::Parse { line, message: format!("unexpected keyword '{other}'") });
            }
        }
    }
    let vertices = vertices.ok_or(Error::Parse { line: tok.last_line.max(1), message: "missing POINTS section".into() })?;
    let cells = cells.ok_or(Error::Parse { line: tok.last_line.max(1), message: "missing CELLS section".into() })?;
    let types = types.ok_or(Error::Parse { line: tok.last_line.max(1), message: "missing CELL_TYPES section".into() })?;
    if types.len() != cells.len() {
        return Err(Error::Shape(format!("{} cells but {} cell types", cells.len(), types.len())));
    }
    let mut kind = None;
    for &t in &types {
        let k = ElementKind::from_vtk_cell_type(t)
            .ok_or_else(|| Error::Format(format!("VTK cell type {t} is not supported (only 10 = tet, 12 = hex)")))?;
        match kind {
            None => kind = Some(k),
            Some(prev) if prev != k => return Err(Error::Format("mixed-element meshes are not supported".into())),
            _ => {}
        }
    }
    let kind = kind.unwrap_or(ElementKind::Tet);
    let npe = kind.nodes_per_element();
    let mut conn = Vec::with_capacity(cells.len() * npe);
    for (e, c) in cells.iter().enumerate() {
        if c.len() != npe {
            return Err(Error::Format(format!("cell {e} has {} vertices, expected {npe}", c.len())));
        }
        conn.extend_from_slice(c);
    }
    Mesh::new(kind, vertices, conn)
}
