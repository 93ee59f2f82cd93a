use std::f64::consts::PI;

use super::{ElementKind, Mesh};
use crate::error::{Error, Result};
use crate::geom::{cross, dot, sub, Point3};

/// Square-section torus around the y axis with an angular slit cut out
/// around the positive x half-plane (z = 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RingParams {
    pub major_radius: f64,
    pub section_side: f64,
    pub slit_angle: f64,
    pub n_theta: usize,
    pub n_section: usize,
}

impl Default for RingParams {
    fn default() -> Self {
        RingParams {
            major_radius: 1.0,
            section_side: 0.25,
            slit_angle: 0.2,
            n_theta: 16,
            n_section: 1,
        }
    }
}

impl RingParams {
    pub fn validate(&self) -> Result<()> {
        let half = self.section_side / 2.0;
        if !(half > 0.0 && self.major_radius > half) {
            return Err(Error::param(format!(
                "ring requires major_radius > section_side/2 > 0 (got major_radius={}, section_side={})",
                self.major_radius, self.section_side
            )));
        }
        if !(self.slit_angle > 0.0 && self.slit_angle < 2.0 * PI) {
            return Err(Error::param(format!(
                "slit_angle must lie in (0, 2*pi), got {}",
                self.slit_angle
            )));
        }
        if self.n_theta < 3 {
            return Err(Error::param(format!("n_theta must be >= 3, got {}", self.n_theta)));
        }
        if self.n_section < 1 {
            return Err(Error::param("n_section must be >= 1"));
        }
        Ok(())
    }

    /// Angular position of a point around the ring axis, in (0, 2*pi].
    /// The slit sits around theta = 0 (equivalently 2*pi).
    pub fn theta_of(p: &Point3) -> f64 {
        p[2].atan2(-p[0]) + PI
    }

    fn point(&self, theta: f64, s: f64, y: f64) -> Point3 {
        let rho = self.major_radius + s;
        [rho * theta.cos(), y, -rho * theta.sin()]
    }
}

/// Structured mesh of the slit ring.
///
/// Local grid axes are (radial offset, angle, height) which keeps the
/// parametrisation orientation-preserving.
pub fn generate_ring(params: &RingParams, kind: ElementKind) -> Result<Mesh> {
    params.validate()?;
    let n_s = params.n_section;
    let n_t = params.n_theta;
    let a = params.section_side;
    let theta0 = params.slit_angle / 2.0;
    let dtheta = (2.0 * PI - params.slit_angle) / n_t as f64;
    structured(n_s, n_t, n_s, kind, |i, j, k| {
        let s = -a / 2.0 + a * i as f64 / n_s as f64;
        let theta = if j == n_t { 2.0 * PI - theta0 } else { theta0 + dtheta * j as f64 };
        let y = -a / 2.0 + a * k as f64 / n_s as f64;
        params.point(theta, s, y)
    })
}

/// A thin sheet folded back onto itself: two parallel slabs separated by a
/// narrow gap, joined at one end by a half-annulus.
///
/// The sheet is parametrised by arc length `u` along its mid-gap-facing
/// surface: the lower slab runs along +x, the joint turns around the axis
/// through `(length, 0, mid_z)`, and the upper slab runs back along -x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SheetParams {
    pub length: f64,
    pub width: f64,
    pub thickness: f64,
    pub gap: f64,
    pub n_length: usize,
    pub n_joint: usize,
    pub n_thickness: usize,
    pub n_width: usize,
}

impl Default for SheetParams {
    fn default() -> Self {
        SheetParams {
            length: 1.0,
            width: 0.4,
            thickness: 0.1,
            gap: 0.03,
            n_length: 10,
            n_joint: 6,
            n_thickness: 1,
            n_width: 4,
        }
    }
}

/// Which part of the folded sheet a point belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SheetRegion {
    Lower,
    Joint { angle_fraction: f64 },
    Upper,
}

impl SheetParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("length", self.length),
            ("width", self.width),
            ("thickness", self.thickness),
            ("gap", self.gap),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!("sheet {name} must be positive, got {v}")));
            }
        }
        if self.n_length == 0 || self.n_joint == 0 || self.n_thickness == 0 || self.n_width == 0 {
            return Err(Error::param("sheet subdivision counts must be >= 1"));
        }
        Ok(())
    }

    fn inner_radius(&self) -> f64 {
        self.gap / 2.0
    }

    /// Classifies a point by its position relative to the fold axis.
    pub fn region_of(&self, p: &Point3) -> SheetRegion {
        let mid = 0.0;
        if p[0] <= self.length {
            if p[2] < mid {
                SheetRegion::Lower
            } else {
                SheetRegion::Upper
            }
        } else {
            let psi = (p[2] - mid).atan2(p[0] - self.length);
            SheetRegion::Joint { angle_fraction: ((psi + PI / 2.0) / PI).clamp(0.0, 1.0) }
        }
    }

    fn point(&self, u: usize, v: f64, w: f64) -> Point3 {
        let n_l = self.n_length;
        let n_j = self.n_joint;
        let r = self.inner_radius() + v;
        if u <= n_l {
            let x = self.length * u as f64 / n_l as f64;
            [x, w, -r]
        } else if u < n_l + n_j {
            let psi = -PI / 2.0 + PI * (u - n_l) as f64 / n_j as f64;
            [self.length + r * psi.cos(), w, r * psi.sin()]
        } else {
            let x = self.length * (2 * n_l + n_j - u) as f64 / n_l as f64;
            [x, w, r]
        }
    }
}

pub fn generate_folded_sheet(params: &SheetParams, kind: ElementKind) -> Result<Mesh> {
    params.validate()?;
    let n_u = 2 * params.n_length + params.n_joint;
    let t = params.thickness;
    let n_v = params.n_thickness;
    let n_w = params.n_width;
    // Local axes (across thickness, along the fold, width) with the width
    // axis reversed keep the map orientation-preserving.
    structured(n_v, n_u, n_w, kind, |i, j, k| {
        let v = t * i as f64 / n_v as f64;
        let w = params.width * (n_w - k) as f64 / n_w as f64;
        params.point(j, v, w)
    })
}

/// Structured product grid with `na * nb * nc` cells, vertex (i, j, k)
/// numbered `(k * (nb + 1) + j) * (na + 1) + i`.
fn structured(
    na: usize,
    nb: usize,
    nc: usize,
    kind: ElementKind,
    map: impl Fn(usize, usize, usize) -> Point3,
) -> Result<Mesh> {
    let vid = |i: usize, j: usize, k: usize| (k * (nb + 1) + j) * (na + 1) + i;
    let mut vertices = Vec::with_capacity((na + 1) * (nb + 1) * (nc + 1));
    for k in 0..=nc {
        for j in 0..=nb {
            for i in 0..=na {
                vertices.push(map(i, j, k));
            }
        }
    }
    let cells = na * nb * nc;
    let mut conn = Vec::with_capacity(cells * if kind == ElementKind::Hex { 8 } else { 24 });
    for k in 0..nc {
        for j in 0..nb {
            for i in 0..na {
                // corner index bits: 1 -> a, 2 -> b, 4 -> c
                let corner = |bits: usize| vid(i + (bits & 1), j + ((bits >> 1) & 1), k + ((bits >> 2) & 1));
                match kind {
                    ElementKind::Hex => {
                        conn.extend([0, 1, 3, 2, 4, 5, 7, 6].map(corner));
                    }
                    ElementKind::Tet => {
                        // Freudenthal split: six tets sharing the 0-7 diagonal.
                        for (p, q) in [(1, 2), (1, 4), (2, 1), (2, 4), (4, 1), (4, 2)] {
                            let mut tet = [corner(0), corner(p), corner(p | q), corner(7)];
                            if signed_volume(&vertices, &tet) < 0.0 {
                                tet.swap(2, 3);
                            }
                            conn.extend(tet);
                        }
                    }
                }
            }
        }
    }
    Mesh::new(kind, vertices, conn)
}

fn signed_volume(v: &[Point3], tet: &[usize; 4]) -> f64 {
    let a = sub(&v[tet[1]], &v[tet[0]]);
    let b = sub(&v[tet[2]], &v[tet[0]]);
    let c = sub(&v[tet[3]], &v[tet[0]]);
    dot(&a, &cross(&b, &c)) / 6.0
}
