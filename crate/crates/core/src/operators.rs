//! Discrete SPD operators: finite-element discretizations of
//! `-div(a ∇u)` with zero Dirichlet data on `[0,1]^d`, and grounded graph
//! Laplacians.
//!
//! Fine-basis convention for the FEM operators: a dyadic hierarchy with `q`
//! levels has `n = 2^q` labels per axis, so the mesh carries `n` interior
//! nodes per axis at spacing `1/(n+1)`. Interior node `i` is paired with
//! dyadic cell `i`; [`measurement_overlap`] accounts for the geometric offset
//! between the two.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{GambletError, Result};
use crate::hierarchy::{Hierarchy, HierarchyKind};
use crate::numerics::{RectMatrix, SymMatrix};

#[derive(Clone, Debug, PartialEq)]
pub enum CoefficientKind {
    Constant(f64),
    /// `∏_{k=1}^{10} (1 + 0.25 cos(2^k x))`.
    Rough1d,
    /// `∏_{k=1}^{7} (1 + 0.25 cos(2^k π (x + y))) (1 + 0.25 cos(2^k π (x − 3y)))`.
    Rough2d,
    /// Piecewise constant on a uniform `n` (1D) or `n × n` (2D, row-major in
    /// `y`) grid of `[0,1]^d`.
    Tabulated {
        n: usize,
        values: Vec<f64>,
    },
}

/// Scalar conductivity `a(x)` with known bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    kind: CoefficientKind,
    dim: usize,
    lambda_min: f64,
    lambda_max: f64,
}

impl CoefficientField {
    pub fn constant(dim: usize, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(GambletError::InvalidConfig(format!(
                "coefficient must be positive, got {c}"
            )));
        }
        Ok(CoefficientField {
            kind: CoefficientKind::Constant(c),
            dim,
            lambda_min: c,
            lambda_max: c,
        })
    }

    pub fn unit(dim: usize) -> Self {
        Self::constant(dim, 1.0).expect("unit coefficient")
    }

    pub fn rough_1d() -> Self {
        CoefficientField {
            kind: CoefficientKind::Rough1d,
            dim: 1,
            lambda_min: 0.75f64.powi(10),
            lambda_max: 1.25f64.powi(10),
        }
    }

    pub fn rough_2d() -> Self {
        CoefficientField {
            kind: CoefficientKind::Rough2d,
            dim: 2,
            lambda_min: 0.5625f64.powi(7),
            lambda_max: 1.5625f64.powi(7),
        }
    }

    pub fn tabulated(dim: usize, n: usize, values: Vec<f64>) -> Result<Self> {
        let expected = if dim == 1 { n } else { n * n };
        if n == 0 || values.len() != expected {
            return Err(GambletError::InvalidConfig(format!(
                "tabulated coefficient: expected {expected} values, got {}",
                values.len()
            )));
        }
        let lambda_min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let lambda_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lambda_min > 0.0 && lambda_max.is_finite()) {
            return Err(GambletError::InvalidConfig(
                "tabulated coefficient must be positive and finite".into(),
            ));
        }
        Ok(CoefficientField {
            kind: CoefficientKind::Tabulated { n, values },
            dim,
            lambda_min,
            lambda_max,
        })
    }

    /// Reads whitespace-separated values; the grid size is inferred from the
    /// count (`n` values in 1D, `n²` in 2D).
    pub fn from_file(path: &Path, dim: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GambletError::io(path, e))?;
        let values = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| GambletError::parse(path.display().to_string(), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = if dim == 1 {
            values.len()
        } else {
            let side = (values.len() as f64).sqrt().round() as usize;
            if side * side != values.len() {
                return Err(GambletError::parse(
                    path.display().to_string(),
                    "2D table must hold n² values",
                ));
            }
            side
        };
        Self::tabulated(dim, n, values)
    }

    pub fn kind(&self) -> &CoefficientKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// Evaluates `a` at a point of `[0,1]^dim` (`p.len() == dim`).
    pub fn eval(&self, p: &[f64]) -> f64 {
        match &self.kind {
            CoefficientKind::Constant(c) => *c,
            CoefficientKind::Rough1d => {
                let x = p[0];
                (1..=10)
                    .map(|k| 1.0 + 0.25 * ((1u32 << k) as f64 * x).cos())
                    .product()
            }
            CoefficientKind::Rough2d => {
                let (x, y) = (p[0], p[1]);
                (1..=7)
                    .map(|k| {
                        let f = (1u32 << k) as f64 * PI;
                        (1.0 + 0.25 * (f * (x + y)).cos())
                            * (1.0 + 0.25 * (f * (x - 3.0 * y)).cos())
                    })
                    .product()
            }
            CoefficientKind::Tabulated { n, values } => {
                let cell = |t: f64| ((t * *n as f64).floor().max(0.0) as usize).min(n - 1);
                if self.dim == 1 {
                    values[cell(p[0])]
                } else {
                    values[cell(p[1]) * n + cell(p[0])]
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorKind {
    /// Finite elements on the `2^q`-per-axis interior grid.
    Fem,
    /// Grounded graph Laplacian; `kept[i]` is the original vertex of row `i`.
    Graph { ground: usize, kept: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorMeta {
    pub kind: OperatorKind,
    pub dim: usize,
    /// Order of the operator (`1` for second-order elliptic / graph Laplacians).
    pub s: usize,
    pub q: usize,
    /// Fine mesh width for FEM operators.
    pub mesh_width: Option<f64>,
}

/// SPD stiffness matrix with its mass matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteOperator {
    pub stiffness: SymMatrix,
    pub mass: SymMatrix,
    pub meta: OperatorMeta,
}

impl DiscreteOperator {
    pub fn dim(&self) -> usize {
        self.stiffness.dim()
    }

    /// Wraps an arbitrary SPD matrix with identity mass (used for synthetic
    /// tests and foreign callers).
    pub fn from_matrix(stiffness: SymMatrix, q: usize) -> Self {
        let n = stiffness.dim();
        DiscreteOperator {
            stiffness,
            mass: SymMatrix::identity(n),
            meta: OperatorMeta {
                kind: OperatorKind::Fem,
                dim: 0,
                s: 1,
                q,
                mesh_width: None,
            },
        }
    }
}

// 3-point Gauss–Legendre on [0,1].
const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];
// 2-point Gauss–Legendre on [0,1].
const GAUSS2: [(f64, f64); 2] = [
    (0.211_324_865_405_187_1, 0.5),
    (0.788_675_134_594_812_9, 0.5),
];

fn require_dyadic(hierarchy: &Hierarchy, field: &CoefficientField) -> Result<()> {
    if !matches!(hierarchy.kind(), HierarchyKind::Dyadic) {
        return Err(GambletError::InvalidConfig(
            "FEM assembly needs a dyadic hierarchy".into(),
        ));
    }
    if !(hierarchy.dim() == 1 || hierarchy.dim() == 2) {
        return Err(GambletError::UnsupportedDim(hierarchy.dim()));
    }
    if field.dim() != hierarchy.dim() {
        return Err(GambletError::ShapeMismatch(format!(
            "coefficient is {}D but hierarchy is {}D",
            field.dim(),
            hierarchy.dim()
        )));
    }
    Ok(())
}

/// `∫_e a` for each of the `2^q + 1` elements of the 1D mesh.
pub fn element_integrals_1d(field: &CoefficientField, q: usize) -> Vec<f64> {
    let n = 1usize << q;
    let hf = 1.0 / (n + 1) as f64;
    (0..=n)
        .map(|e| {
            let x0 = e as f64 * hf;
            hf * GAUSS3
                .iter()
                .map(|&(t, w)| w * field.eval(&[x0 + t * hf]))
                .sum::<f64>()
        })
        .collect()
}

/// Assembles stiffness and consistent mass matrices of `-div(a ∇·)`.
///
/// 1D uses P1 elements with 3-point Gauss quadrature, 2D uses Q1 elements
/// with 2×2 Gauss quadrature. Element contributions are accumulated in
/// element order.
pub fn assemble_fem(field: &CoefficientField, hierarchy: &Hierarchy) -> Result<DiscreteOperator> {
    require_dyadic(hierarchy, field)?;
    let q = hierarchy.q();
    let n = 1usize << q;
    let hf = 1.0 / (n + 1) as f64;
    let (stiffness, mass) = match hierarchy.dim() {
        1 => assemble_1d(field, n, hf),
        _ => assemble_2d(field, n, hf),
    };
    let op = DiscreteOperator {
        stiffness: SymMatrix::symmetrized(stiffness),
        mass: SymMatrix::symmetrized(mass),
        meta: OperatorMeta {
            kind: OperatorKind::Fem,
            dim: hierarchy.dim(),
            s: 1,
            q,
            mesh_width: Some(hf),
        },
    };
    debug_assert_eq!(op.dim(), hierarchy.fine_size());
    Ok(op)
}

fn assemble_1d(field: &CoefficientField, n: usize, hf: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut k = DMatrix::zeros(n, n);
    let mut m = DMatrix::zeros(n, n);
    for e in 0..=n {
        let x0 = e as f64 * hf;
        let mut a_int = 0.0;
        let mut mass_local = [[0.0; 2]; 2];
        for &(t, w) in &GAUSS3 {
            a_int += w * hf * field.eval(&[x0 + t * hf]);
            let shape = [1.0 - t, t];
            for a in 0..2 {
                for b in 0..2 {
                    mass_local[a][b] += w * hf * shape[a] * shape[b];
                }
            }
        }
        let grad = [-1.0 / hf, 1.0 / hf];
        // local node 0 is interior node e-1, local node 1 is interior node e
        let nodes = [e.checked_sub(1), if e < n { Some(e) } else { None }];
        for a in 0..2 {
            let Some(i) = nodes[a] else { continue };
            for b in 0..2 {
                let Some(j) = nodes[b] else { continue };
                k[(i, j)] += a_int * grad[a] * grad[b];
                m[(i, j)] += mass_local[a][b];
            }
        }
    }
    (k, m)
}

fn assemble_2d(field: &CoefficientField, n: usize, hf: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let dofs = n * n;
    let mut k = DMatrix::zeros(dofs, dofs);
    let mut m = DMatrix::zeros(dofs, dofs);
    // local corners (a, b) in order (0,0), (1,0), (0,1), (1,1)
    const CORNERS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    for ey in 0..=n {
        for ex in 0..=n {
            let (x0, y0) = (ex as f64 * hf, ey as f64 * hf);
            let mut kl = [[0.0; 4]; 4];
            let mut ml = [[0.0; 4]; 4];
            for &(s, ws) in &GAUSS2 {
                for &(t, wt) in &GAUSS2 {
                    let a = field.eval(&[x0 + s * hf, y0 + t * hf]);
                    let w = ws * wt * hf * hf;
                    let mut shape = [0.0; 4];
                    let mut grad = [[0.0; 2]; 4];
                    for (c, &(cx, cy)) in CORNERS.iter().enumerate() {
                        let (fx, dfx) = if cx == 0 { (1.0 - s, -1.0) } else { (s, 1.0) };
                        let (fy, dfy) = if cy == 0 { (1.0 - t, -1.0) } else { (t, 1.0) };
                        shape[c] = fx * fy;
                        grad[c] = [dfx * fy / hf, fx * dfy / hf];
                    }
                    for i in 0..4 {
                        for j in 0..4 {
                            kl[i][j] += w * a * (grad[i][0] * grad[j][0] + grad[i][1] * grad[j][1]);
                            ml[i][j] += w * shape[i] * shape[j];
                        }
                    }
                }
            }
            let node = |c: usize| -> Option<usize> {
                let (cx, cy) = CORNERS[c];
                let ix = (ex + cx).checked_sub(1)?;
                let iy = (ey + cy).checked_sub(1)?;
                (ix < n && iy < n).then_some(iy * n + ix)
            };
            for a in 0..4 {
                let Some(i) = node(a) else { continue };
                for b in 0..4 {
                    let Some(j) = node(b) else { continue };
                    k[(i, j)] += kl[a][b];
                    m[(i, j)] += ml[a][b];
                }
            }
        }
    }
    (k, m)
}

/// `∫_a^b max(0, 1 - |x - c| / w) dx`.
fn tent_integral(c: f64, w: f64, a: f64, b: f64) -> f64 {
    // antiderivative of the tent, anchored at c - w
    let anti = |x: f64| -> f64 {
        let t = ((x - (c - w)) / w).clamp(0.0, 2.0);
        if t <= 1.0 {
            w * t * t / 2.0
        } else {
            w * (0.5 + (t - 1.0) - (t - 1.0).powi(2) / 2.0)
        }
    };
    anti(b) - anti(a)
}

/// Matrix `O` with `O_{ij} = ∫ φ_j^(q) ψ̃_i`: pairs the fine pre-Haar
/// measurement functions with the finite-element basis, so the load vector
/// of `f = Σ_j c_j φ_j^(q)` is `O c`. Graph operators measure vertex values
/// directly and get the identity.
pub fn measurement_overlap(hierarchy: &Hierarchy, op: &DiscreteOperator) -> Result<RectMatrix> {
    let n_fine = hierarchy.fine_size();
    if n_fine != op.dim() {
        return Err(GambletError::DimensionMismatch {
            expected: n_fine,
            actual: op.dim(),
        });
    }
    if let OperatorKind::Graph { .. } = op.meta.kind {
        return Ok(RectMatrix::from_raw(DMatrix::identity(n_fine, n_fine)));
    }
    if !matches!(hierarchy.kind(), HierarchyKind::Dyadic) {
        return Err(GambletError::InvalidConfig(
            "FEM overlap needs a dyadic hierarchy".into(),
        ));
    }
    let n = 1usize << hierarchy.q();
    let hf = 1.0 / (n + 1) as f64;
    let cell = 1.0 / n as f64;
    let norm = (n as f64).sqrt();
    // 1D factor: tents x cells
    let o1 = DMatrix::from_fn(n, n, |i, j| {
        norm * tent_integral(
            (i + 1) as f64 * hf,
            hf,
            j as f64 * cell,
            (j + 1) as f64 * cell,
        )
    });
    let o = match hierarchy.dim() {
        1 => o1,
        2 => o1.kronecker(&o1),
        d => return Err(GambletError::UnsupportedDim(d)),
    };
    Ok(RectMatrix::from_raw(o))
}

/// Simple undirected graph with vertex coordinates in the unit square.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricGraph {
    coords: Vec<(f64, f64)>,
    edges: Vec<(usize, usize)>,
    ground: usize,
}

impl GeometricGraph {
    /// Validates the edge list: indices in range, no self loops, no
    /// duplicates (in either orientation).
    pub fn new(coords: Vec<(f64, f64)>, edges: Vec<(usize, usize)>, ground: usize) -> Result<Self> {
        let n = coords.len();
        if n == 0 {
            return Err(GambletError::InvalidGraph("no vertices".into()));
        }
        if ground >= n {
            return Err(GambletError::IndexOutOfRange {
                index: ground,
                len: n,
            });
        }
        for &(x, y) in &coords {
            if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
                return Err(GambletError::InvalidGraph(format!(
                    "coordinate ({x}, {y}) outside the unit square"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for &(i, j) in &edges {
            if i >= n || j >= n {
                return Err(GambletError::IndexOutOfRange {
                    index: i.max(j),
                    len: n,
                });
            }
            if i == j {
                return Err(GambletError::InvalidGraph(format!(
                    "self loop at vertex {i}"
                )));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(GambletError::InvalidGraph(format!(
                    "duplicate edge {i}-{j}"
                )));
            }
        }
        Ok(GeometricGraph {
            coords,
            edges,
            ground,
        })
    }

    /// `n × n` grid graph with 4-neighbour edges, vertex `iy·n + ix` at
    /// `(ix, iy) / (n - 1)`.
    pub fn synthetic_grid(n: usize, ground: usize) -> Result<Self> {
        if n < 2 {
            return Err(GambletError::InvalidGraph(
                "grid side must be at least 2".into(),
            ));
        }
        let scale = (n - 1) as f64;
        let coords = (0..n * n)
            .map(|v| ((v % n) as f64 / scale, (v / n) as f64 / scale))
            .collect();
        let mut edges = Vec::new();
        for iy in 0..n {
            for ix in 0..n {
                let v = iy * n + ix;
                if ix + 1 < n {
                    edges.push((v, v + 1));
                }
                if iy + 1 < n {
                    edges.push((v, v + n));
                }
            }
        }
        Self::new(coords, edges, ground)
    }

    /// Parses the plain-text format: `N M`, then `N` lines `idx x y`, then
    /// `M` lines `i j` (0-based). Coordinates are rescaled per axis to
    /// `[0,1]`.
    pub fn parse(text: &str, ground: usize) -> Result<Self> {
        let ctx = "graph file";
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| GambletError::parse(ctx, "missing header"))?;
        let mut it = header.split_whitespace();
        let next_usize = |it: &mut std::str::SplitWhitespace<'_>, what: &str| -> Result<usize> {
            it.next()
                .ok_or_else(|| GambletError::parse(ctx, format!("missing {what}")))?
                .parse::<usize>()
                .map_err(|e| GambletError::parse(ctx, format!("{what}: {e}")))
        };
        let n = next_usize(&mut it, "vertex count")?;
        let m = next_usize(&mut it, "edge count")?;
        let mut raw = vec![None; n];
        for _ in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| GambletError::parse(ctx, "truncated vertex list"))?;
            let mut it = line.split_whitespace();
            let idx = next_usize(&mut it, "vertex index")?;
            let mut coord = || -> Result<f64> {
                it.next()
                    .ok_or_else(|| {
                        GambletError::parse(ctx, format!("vertex {idx}: missing coordinate"))
                    })?
                    .parse::<f64>()
                    .map_err(|e| GambletError::parse(ctx, format!("vertex {idx}: {e}")))
            };
            let (x, y) = (coord()?, coord()?);
            if idx >= n {
                return Err(GambletError::IndexOutOfRange { index: idx, len: n });
            }
            raw[idx] = Some((x, y));
        }
        let raw: Vec<(f64, f64)> = raw
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                c.ok_or_else(|| GambletError::parse(ctx, format!("vertex {i} not listed")))
            })
            .collect::<Result<_>>()?;
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let line = lines
                .next()
                .ok_or_else(|| GambletError::parse(ctx, "truncated edge list"))?;
            let mut it = line.split_whitespace();
            edges.push((
                next_usize(&mut it, "edge endpoint")?,
                next_usize(&mut it, "edge endpoint")?,
            ));
        }
        Self::new(normalize_coords(&raw), edges, ground)
    }

    pub fn read_file(path: &Path, ground: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GambletError::io(path, e))?;
        Self::parse(&text, ground)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.coords.len(), self.edges.len());
        for (i, (x, y)) in self.coords.iter().enumerate() {
            s.push_str(&format!("{i} {x} {y}\n"));
        }
        for (i, j) in &self.edges {
            s.push_str(&format!("{i} {j}\n"));
        }
        s
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn ground(&self) -> usize {
        self.ground
    }

    pub fn vertex_count(&self) -> usize {
        self.coords.len()
    }

    /// Vertices other than the grounded one, in index order.
    pub fn kept_vertices(&self) -> Vec<usize> {
        (0..self.coords.len())
            .filter(|&v| v != self.ground)
            .collect()
    }

    pub fn component_count(&self) -> usize {
        let n = self.coords.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(i, j) in &self.edges {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
        (0..n).filter(|&v| find(&mut parent, v) == v).count()
    }
}

fn normalize_coords(raw: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let axis = |sel: fn(&(f64, f64)) -> f64| {
        let lo = raw.iter().map(sel).fold(f64::INFINITY, f64::min);
        let hi = raw.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi - lo)
    };
    let (x0, dx) = axis(|p| p.0);
    let (y0, dy) = axis(|p| p.1);
    let scale = |v: f64, lo: f64, span: f64| {
        if span > 0.0 {
            ((v - lo) / span).clamp(0.0, 1.0)
        } else {
            0.5
        }
    };
    raw.iter()
        .map(|&(x, y)| (scale(x, x0, dx), scale(y, y0, dy)))
        .collect()
}

/// Graph Laplacian (`deg` on the diagonal, `-1` per edge) with the grounded
/// vertex's row and column removed. Mass is the identity.
pub fn grounded_laplacian(g: &GeometricGraph) -> Result<DiscreteOperator> {
    let components = g.component_count();
    if components != 1 {
        return Err(GambletError::Disconnected { components });
    }
    let n = g.vertex_count();
    if n < 2 {
        return Err(GambletError::InvalidGraph(
            "grounding leaves no vertices".into(),
        ));
    }
    let kept = g.kept_vertices();
    let mut row_of = vec![usize::MAX; n];
    for (r, &v) in kept.iter().enumerate() {
        row_of[v] = r;
    }
    let mut l = DMatrix::zeros(n - 1, n - 1);
    for &(i, j) in g.edges() {
        for (a, b) in [(i, j), (j, i)] {
            if a != g.ground() {
                l[(row_of[a], row_of[a])] += 1.0;
                if b != g.ground() {
                    l[(row_of[a], row_of[b])] -= 1.0;
                }
            }
        }
    }
    Ok(DiscreteOperator {
        stiffness: SymMatrix::symmetrized(l),
        mass: SymMatrix::identity(n - 1),
        meta: OperatorMeta {
            kind: OperatorKind::Graph {
                ground: g.ground(),
                kept,
            },
            dim: 2,
            s: 1,
            q: 0,
            mesh_width: None,
        },
    })
}
