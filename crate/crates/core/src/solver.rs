//! Compressed sparse row matrices and a right-preconditioned restarted
//! GMRES solver with ILU(0) or Jacobi preconditioning.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};

const PAR_ROWS: usize = 4096;

/// Row-major compressed sparse matrix. Column ids are sorted and unique
/// within each row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMatrix { nrows, ncols, row_ptr: vec![0; nrows + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets in any order.
    /// Duplicate positions are rejected.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut prev: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::Shape(format!("entry ({r}, {c}) outside a {nrows}x{ncols} matrix")));
            }
            if prev == Some((r, c)) {
                return Err(Error::Shape(format!("duplicate entry ({r}, {c})")));
            }
            prev = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(SparseMatrix { nrows, ncols, row_ptr, col_idx, values })
    }

    /// Builds a matrix from per-column `(row, value)` lists.
    pub fn from_columns(nrows: usize, columns: &[Vec<(usize, f64)>]) -> Result<Self> {
        let triplets = columns
            .iter()
            .enumerate()
            .flat_map(|(j, col)| col.iter().map(move |&(i, v)| (i, j, v)))
            .collect();
        Self::from_triplets(nrows, columns.len(), triplets)
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        let triplets = rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(j, &v)| (i, j, v)))
            .collect();
        Self::from_triplets(rows.len(), ncols, triplets).expect("dense input is well formed")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |k| vals[k])
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(move |(&j, &x)| (i, j, x))
        })
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, j, v) in self.triplets() {
            d[i][j] = v;
        }
        d
    }

    /// Whether two matrices have the same pattern and bit-identical values.
    pub fn bit_identical(&self, other: &SparseMatrix) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (c, v) = self.row(i);
        c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y)?;
        Ok(y)
    }

    /// `y = A x`; rows are independent, so the result does not depend on
    /// the number of worker threads.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.ncols || y.len() != self.nrows {
            return Err(Error::Shape(format!(
                "matvec of a {}x{} matrix with x of length {} into y of length {}",
                self.nrows,
                self.ncols,
                x.len(),
                y.len()
            )));
        }
        if self.nrows >= PAR_ROWS {
            y.par_iter_mut().enumerate().for_each(|(i, yi)| *yi = self.row_dot(i, x));
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = self.row_dot(i, x);
            }
        }
        Ok(())
    }

    /// Matrix Market coordinate dump (1-based indices).
    pub fn write_matrix_market(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (i, j, v) in self.triplets() {
            writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
        }
        Ok(())
    }
}

/// Incomplete LU factors on the sparsity pattern of the input matrix.
/// `L` is unit lower triangular; both factors share the CSR storage.
#[derive(Clone, Debug)]
pub struct Ilu0 {
    lu: SparseMatrix,
    diag: Vec<usize>,
}

pub fn ilu0_factorize(a: &SparseMatrix) -> Result<Ilu0> {
    if a.nrows != a.ncols {
        return Err(Error::Shape(format!("ILU(0) needs a square matrix, got {}x{}", a.nrows, a.ncols)));
    }
    let n = a.nrows;
    let mut lu = a.clone();
    let mut diag = vec![usize::MAX; n];
    for (i, d) in diag.iter_mut().enumerate() {
        let (cols, _) = lu.row(i);
        match cols.binary_search(&i) {
            Ok(k) => *d = lu.row_ptr[i] + k,
            Err(_) => return Err(Error::ZeroPivot { row: i }),
        }
    }
    // position of column j within the current row, or usize::MAX
    let mut pos = vec![usize::MAX; n];
    for i in 0..n {
        let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
        for p in start..end {
            pos[lu.col_idx[p]] = p;
        }
        for p in start..end {
            let k = lu.col_idx[p];
            if k >= i {
                break;
            }
            let pivot = lu.values[diag[k]];
            let lik = lu.values[p] / pivot;
            lu.values[p] = lik;
            for q in diag[k] + 1..lu.row_ptr[k + 1] {
                let j = lu.col_idx[q];
                let target = pos[j];
                if target != usize::MAX {
                    lu.values[target] -= lik * lu.values[q];
                }
            }
        }
        for p in start..end {
            pos[lu.col_idx[p]] = usize::MAX;
        }
        let d = lu.values[diag[i]];
        if d == 0.0 || !d.is_finite() {
            return Err(Error::ZeroPivot { row: i });
        }
    }
    Ok(Ilu0 { lu, diag })
}

impl Ilu0 {
    /// Solves `L U z = y`.
    pub fn apply(&self, y: &[f64], z: &mut [f64]) {
        let n = self.diag.len();
        for i in 0..n {
            let mut s = y[i];
            for p in self.lu.row_ptr[i]..self.diag[i] {
                s -= self.lu.values[p] * z[self.lu.col_idx[p]];
            }
            z[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for p in self.diag[i] + 1..self.lu.row_ptr[i + 1] {
                s -= self.lu.values[p] * z[self.lu.col_idx[p]];
            }
            z[i] = s / self.lu.values[self.diag[i]];
        }
    }
}

#[derive(Clone, Debug)]
pub enum Preconditioner {
    Identity,
    Jacobi(Vec<f64>),
    Ilu0(Ilu0),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PreconditionerKind {
    Identity,
    Jacobi,
    Ilu0,
}

impl Preconditioner {
    pub fn jacobi(a: &SparseMatrix) -> Result<Self> {
        let mut inv = Vec::with_capacity(a.nrows);
        for i in 0..a.nrows {
            let d = a.get(i, i);
            if d == 0.0 {
                return Err(Error::ZeroPivot { row: i });
            }
            inv.push(1.0 / d);
        }
        Ok(Preconditioner::Jacobi(inv))
    }

    /// ILU(0), falling back to Jacobi on a zero pivot.
    pub fn ilu0_or_jacobi(a: &SparseMatrix) -> Result<Self> {
        match ilu0_factorize(a) {
            Ok(f) => Ok(Preconditioner::Ilu0(f)),
            Err(Error::ZeroPivot { .. }) => Self::jacobi(a),
            Err(e) => Err(e),
        }
    }

    pub fn build(a: &SparseMatrix, kind: PreconditionerKind) -> Result<Self> {
        match kind {
            PreconditionerKind::Identity => Ok(Preconditioner::Identity),
            PreconditionerKind::Jacobi => Self::jacobi(a),
            PreconditionerKind::Ilu0 => Self::ilu0_or_jacobi(a),
        }
    }

    pub fn kind(&self) -> PreconditionerKind {
        match self {
            Preconditioner::Identity => PreconditionerKind::Identity,
            Preconditioner::Jacobi(_) => PreconditionerKind::Jacobi,
            Preconditioner::Ilu0(_) => PreconditionerKind::Ilu0,
        }
    }

    pub fn apply(&self, y: &[f64], z: &mut [f64]) {
        match self {
            Preconditioner::Identity => z.copy_from_slice(y),
            Preconditioner::Jacobi(inv) => {
                for ((zi, yi), d) in z.iter_mut().zip(y).zip(inv) {
                    *zi = yi * d;
                }
            }
            Preconditioner::Ilu0(f) => f.apply(y, z),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmresParams {
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for GmresParams {
    fn default() -> Self {
        GmresParams { tol: 1e-10, restart: 100, max_iter: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// True relative residual `||b - A x|| / ||b||` of the returned iterate.
    pub residual: f64,
    pub converged: bool,
    /// Relative residual after every Arnoldi step, starting with the
    /// initial residual.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Restarted GMRES on `A M^{-1} u = b`, `x = M^{-1} u`, from a zero
/// initial guess. With right preconditioning the Arnoldi residual is the
/// residual of the original system; convergence is confirmed against a
/// freshly computed `b - A x` before it is reported.
pub fn gmres(a: &SparseMatrix, b: &[f64], precond: &Preconditioner, params: &GmresParams) -> Result<(Vec<f64>, SolveReport)> {
    let n = a.nrows;
    if a.ncols != n || b.len() != n {
        return Err(Error::Shape(format!("GMRES on a {}x{} matrix with rhs of length {}", a.nrows, a.ncols, b.len())));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("right-hand side contains non-finite values"));
    }
    if !(params.tol > 0.0) || params.restart == 0 {
        return Err(Error::param("GMRES needs tol > 0 and restart >= 1"));
    }
    let mut x = vec![0.0; n];
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok((x, SolveReport { iterations: 0, residual: 0.0, converged: true, history: vec![0.0] }));
    }
    let m = params.restart;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    // Hessenberg columns, rotated into upper-triangular form as we go.
    let mut h: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut cs = vec![0.0; m];
    let mut sn = vec![0.0; m];
    let mut g = vec![0.0; m + 1];

    loop {
        a.matvec_into(&x, &mut r)?;
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let beta = norm(&r);
        let rel = beta / bnorm;
        if history.is_empty() {
            history.push(rel);
        }
        if rel <= params.tol {
            return Ok((x, SolveReport { iterations, residual: rel, converged: true, history }));
        }
        if iterations >= params.max_iter {
            return Ok((x, SolveReport { iterations, residual: rel, converged: false, history }));
        }

        basis.clear();
        h.clear();
        basis.push(r.iter().map(|v| v / beta).collect());
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            precond.apply(&basis[k], &mut z);
            a.matvec_into(&z, &mut w)?;
            let mut col = vec![0.0; k + 2];
            for (i, v) in basis.iter().enumerate() {
                let hik = dot(&w, v);
                col[i] = hik;
                for (wj, vj) in w.iter_mut().zip(v) {
                    *wj -= hik * vj;
                }
            }
            let hnext = norm(&w);
            col[k + 1] = hnext;
            for i in 0..k {
                let t = cs[i] * col[i] + sn[i] * col[i + 1];
                col[i + 1] = -sn[i] * col[i] + cs[i] * col[i + 1];
                col[i] = t;
            }
            let denom = col[k].hypot(col[k + 1]);
            if denom == 0.0 {
                cs[k] = 1.0;
                sn[k] = 0.0;
            } else {
                cs[k] = col[k] / denom;
                sn[k] = col[k + 1] / denom;
            }
            col[k] = denom;
            col[k + 1] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            h.push(col);
            iterations += 1;
            k_used = k + 1;
            let est = g[k + 1].abs() / bnorm;
            history.push(est);
            if est <= params.tol || hnext == 0.0 || iterations >= params.max_iter {
                break;
            }
            basis.push(w.iter().map(|v| v / hnext).collect());
        }

        // back substitution for the least-squares coefficients
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for (j, yj) in y.iter().enumerate().skip(i + 1) {
                s -= h[j][i] * yj;
            }
            y[i] = if h[i][i] != 0.0 { s / h[i][i] } else { 0.0 };
        }
        let mut u = vec![0.0; n];
        for (yi, v) in y.iter().zip(&basis) {
            for (uj, vj) in u.iter_mut().zip(v) {
                *uj += yi * vj;
            }
        }
        precond.apply(&u, &mut z);
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi += zi;
        }
    }
}
