//! Volume meshes: the data model, structured generators for the benchmark
//! domains, element-size metrics and file I/O.

mod generate;
mod io;

pub use generate::{generate_folded_sheet, generate_ring, RingParams, SheetParams, SheetRegion};
pub use io::{read_mesh, read_mesh_from, write_mesh, write_mesh_to, write_vtk_with_data, DataLocation, MeshFormat};

use crate::error::{Error, Result};
use crate::geom::{dist, Point3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementKind {
    Tet,
    Hex,
}

impl ElementKind {
    pub fn nodes_per_element(self) -> usize {
        match self {
            ElementKind::Tet => 4,
            ElementKind::Hex => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementKind::Tet => "tet",
            ElementKind::Hex => "hex",
        }
    }

    pub fn vtk_cell_type(self) -> u8 {
        match self {
            ElementKind::Tet => 10,
            ElementKind::Hex => 12,
        }
    }

    pub fn from_vtk_cell_type(t: u32) -> Option<Self> {
        match t {
            10 => Some(ElementKind::Tet),
            12 => Some(ElementKind::Hex),
            _ => None,
        }
    }
}

impl std::str::FromStr for ElementKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tet" => Ok(ElementKind::Tet),
            "hex" => Ok(ElementKind::Hex),
            other => Err(Error::param(format!("unknown element kind '{other}' (expected tet or hex)"))),
        }
    }
}

/// A single-kind unstructured volume mesh.
///
/// Connectivity is stored flat, `nodes_per_element` indices per element.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    kind: ElementKind,
    vertices: Vec<Point3>,
    connectivity: Vec<usize>,
}

impl Mesh {
    /// Builds a mesh after checking index ranges and per-element distinctness.
    pub fn new(kind: ElementKind, vertices: Vec<Point3>, connectivity: Vec<usize>) -> Result<Self> {
        let npe = kind.nodes_per_element();
        if !connectivity.len().is_multiple_of(npe) {
            return Err(Error::Shape(format!(
                "connectivity length {} is not a multiple of {npe}",
                connectivity.len()
            )));
        }
        let nv = vertices.len();
        for (e, element) in connectivity.chunks_exact(npe).enumerate() {
            for (a, &i) in element.iter().enumerate() {
                if i >= nv {
                    return Err(Error::param(format!(
                        "element {e} references vertex {i} but the mesh has {nv} vertices"
                    )));
                }
                if element[..a].contains(&i) {
                    return Err(Error::param(format!("element {e} repeats vertex {i}")));
                }
            }
        }
        Ok(Mesh { kind, vertices, connectivity })
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn connectivity(&self) -> &[usize] {
        &self.connectivity
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_elements(&self) -> usize {
        self.connectivity.len() / self.kind.nodes_per_element()
    }

    pub fn is_empty(&self) -> bool {
        self.num_elements() == 0
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let npe = self.kind.nodes_per_element();
        &self.connectivity[e * npe..(e + 1) * npe]
    }

    pub fn elements(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.connectivity.chunks_exact(self.kind.nodes_per_element())
    }

    /// Largest distance between two vertices of element `e`.
    pub fn element_diameter(&self, e: usize) -> f64 {
        diameter(self.element(e).iter().map(|&i| &self.vertices[i]))
    }
}

fn diameter<'a>(pts: impl Iterator<Item = &'a Point3> + Clone) -> f64 {
    let pts: Vec<&Point3> = pts.collect();
    let mut h = 0.0f64;
    for a in 0..pts.len() {
        for b in a + 1..pts.len() {
            h = h.max(dist(pts[a], pts[b]));
        }
    }
    h
}

/// Element diameter statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshMetrics {
    pub h_min: f64,
    pub h_avg: f64,
    pub h_max: f64,
}

pub fn compute_metrics(mesh: &Mesh) -> Result<MeshMetrics> {
    if mesh.is_empty() {
        return Err(Error::EmptyInput("mesh has no elements"));
    }
    let mut h: Vec<f64> = (0..mesh.num_elements()).map(|e| mesh.element_diameter(e)).collect();
    // Summing in sorted order makes the mean independent of element order.
    h.sort_by(f64::total_cmp);
    let sum: f64 = h.iter().sum();
    let h_avg = (sum / h.len() as f64).clamp(h[0], h[h.len() - 1]);
    Ok(MeshMetrics { h_min: h[0], h_avg, h_max: h[h.len() - 1] })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Vertices,
    Barycenters,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vertices" => Ok(SampleMode::Vertices),
            "barycenters" => Ok(SampleMode::Barycenters),
            other => Err(Error::param(format!(
                "unknown sample mode '{other}' (expected vertices or barycenters)"
            ))),
        }
    }
}

pub fn sample_points(mesh: &Mesh, mode: SampleMode) -> Result<Vec<Point3>> {
    if mesh.is_empty() {
        return Err(Error::EmptyInput("mesh has no elements"));
    }
    Ok(match mode {
        SampleMode::Vertices => mesh.vertices.clone(),
        SampleMode::Barycenters => mesh
            .elements()
            .map(|el| {
                let mut c = [0.0; 3];
                for &i in el {
                    for (k, ck) in c.iter_mut().enumerate() {
                        *ck += mesh.vertices[i][k];
                    }
                }
                c.map(|v| v / el.len() as f64)
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_tet() -> Mesh {
        let s = 1.0 / 2f64.sqrt();
        // regular tetrahedron with unit edges
        let v = vec![[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s], [s, s, s]];
        Mesh::new(ElementKind::Tet, v, vec![0, 1, 2, 3]).unwrap()
    }

    fn unit_cube() -> Mesh {
        let mut v = Vec::new();
        for c in 0..2 {
            for b in 0..2 {
                for a in 0..2 {
                    v.push([a as f64, b as f64, c as f64]);
                }
            }
        }
        Mesh::new(ElementKind::Hex, v, vec![0, 1, 3, 2, 4, 5, 7, 6]).unwrap()
    }

    #[test]
    fn regular_tet_metrics() {
        let m = compute_metrics(&unit_tet()).unwrap();
        for h in [m.h_min, m.h_avg, m.h_max] {
            assert!((h - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cube_diameter_is_body_diagonal() {
        let m = compute_metrics(&unit_cube()).unwrap();
        assert_eq!(m.h_max, 3f64.sqrt());
        assert_eq!(m.h_min, 3f64.sqrt());
    }

    #[test]
    fn empty_mesh_is_rejected() {
        let m = Mesh::new(ElementKind::Tet, vec![], vec![]).unwrap();
        assert!(matches!(compute_metrics(&m), Err(Error::EmptyInput(_))));
        assert!(matches!(sample_points(&m, SampleMode::Vertices), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn invalid_connectivity() {
        let v = vec![[0.0; 3]; 4];
        assert!(Mesh::new(ElementKind::Tet, v.clone(), vec![0, 1, 2, 4]).is_err());
        assert!(Mesh::new(ElementKind::Tet, v.clone(), vec![0, 1, 1, 2]).is_err());
        assert!(Mesh::new(ElementKind::Tet, v, vec![0, 1, 2]).is_err());
    }

    #[test]
    fn barycenter_of_corner_tet() {
        let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let m = Mesh::new(ElementKind::Tet, v, vec![0, 1, 2, 3]).unwrap();
        let b = sample_points(&m, SampleMode::Barycenters).unwrap();
        assert_eq!(b, vec![[0.25, 0.25, 0.25]]);
    }

    #[test]
    fn metrics_ignore_element_order() {
        let mesh = generate_ring(
            &RingParams { n_theta: 12, n_section: 2, ..RingParams::default() },
            ElementKind::Tet,
        )
        .unwrap();
        let npe = 4;
        let mut conn: Vec<&[usize]> = mesh.connectivity().chunks_exact(npe).collect();
        conn.reverse();
        conn.swap(3, 17);
        let shuffled = Mesh::new(
            ElementKind::Tet,
            mesh.vertices().to_vec(),
            conn.concat(),
        )
        .unwrap();
        assert_eq!(compute_metrics(&mesh).unwrap(), compute_metrics(&shuffled).unwrap());
    }
}
