//! Nested measurement hierarchies.
//!
//! A [`Hierarchy`] stores the label counts `|I^(k)|`, the aggregation matrices
//! `π^(k,k+1)` and the detail selectors `W^(k)` for levels `k = 1..=q`.
//! Level `q` is the finest one and labels the fine basis of the discrete
//! operator. Measurements are normalized cell sums, so a parent measurement is
//! `φ_i^(k) = Σ_j π^(k,k+1)_{ij} φ_j^(k+1)` with
//! `π_{ij} = sqrt(|τ_j^(k+1)| / |τ_i^(k)|)` over the children `j` of `i`.
//!
//! Two constructions are provided: uniform dyadic partitions of `[0,1]^d`
//! (`d ∈ {1,2}`) and quadtree boxes around a set of points in the unit square,
//! where the points themselves form the finest level.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GambletError, Result};
use crate::numerics::{RectMatrix, Vector};

/// Level-wise point counts of a point-set hierarchy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointDiagnostics {
    /// `(min, max)` points per box for every retained level.
    pub points_per_box: Vec<(usize, usize)>,
    /// Box resolutions (as level numbers `k`, boxes of side `2^-k`) dropped
    /// because they did not refine the next level.
    pub merged_levels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HierarchyKind {
    Dyadic,
    Points(PointDiagnostics),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    q: usize,
    dim: usize,
    h: f64,
    kind: HierarchyKind,
    sizes: Vec<usize>,
    /// `parents[k-2][j]`: level-(k-1) parent of label `j` at level `k`.
    parents: Vec<Vec<usize>>,
    cell_volumes: Vec<Vec<f64>>,
    /// `pi[k-1]` is `π^(k,k+1)`.
    pi: Vec<RectMatrix>,
    /// `w[k-2]` is `W^(k)`.
    w: Vec<RectMatrix>,
}

impl Hierarchy {
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Subdivision ratio (`0.5` for dyadic partitions).
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn kind(&self) -> &HierarchyKind {
        &self.kind
    }

    /// `|I^(k)|` for `k = 1..=q`.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, k: usize) -> usize {
        self.sizes[k - 1]
    }

    pub fn fine_size(&self) -> usize {
        self.sizes[self.q - 1]
    }

    /// `|J^(k)|`, with the convention `J^(1) = I^(1)`.
    pub fn detail_size(&self, k: usize) -> usize {
        if k == 1 {
            self.sizes[0]
        } else {
            self.sizes[k - 1] - self.sizes[k - 2]
        }
    }

    pub fn detail_sizes(&self) -> Vec<usize> {
        (1..=self.q).map(|k| self.detail_size(k)).collect()
    }

    /// `π^(k,k+1)` for `k = 1..q`.
    pub fn pi(&self, k: usize) -> &RectMatrix {
        &self.pi[k - 1]
    }

    /// `W^(k)` for `k = 2..=q`.
    pub fn w(&self, k: usize) -> &RectMatrix {
        &self.w[k - 2]
    }

    /// Parent labels of level `k` (for `k ≥ 2`).
    pub fn parents(&self, k: usize) -> &[usize] {
        &self.parents[k - 2]
    }

    pub fn cell_volumes(&self, k: usize) -> &[f64] {
        &self.cell_volumes[k - 1]
    }

    /// Composite aggregation `π^(k,l) = π^(k,k+1) ⋯ π^(l-1,l)` for `k ≤ l`.
    pub fn pi_between(&self, k: usize, l: usize) -> DMatrix<f64> {
        assert!(
            1 <= k && k <= l && l <= self.q,
            "pi_between({k}, {l}) with q = {}",
            self.q
        );
        let mut acc = DMatrix::identity(self.size(k), self.size(k));
        for level in k..l {
            acc = &acc * self.pi(level).matrix();
        }
        acc
    }

    /// Measurements `m^(k)` of a fine vector, for `k = 1..=q` (index `k-1`).
    pub fn restrict_all(&self, fine: &Vector) -> Vec<Vector> {
        let mut out = vec![Vector::zeros(0); self.q];
        out[self.q - 1] = fine.clone();
        for k in (1..self.q).rev() {
            out[k - 1] = self.pi(k).matrix() * &out[k];
        }
        out
    }

    /// Builds the uniform dyadic hierarchy of `[0,1]^dim`.
    ///
    /// Labels are lexicographic (`iy · 2^k + ix` in 2D). Detail rows are the
    /// Haar differences `(1,-1)/√2` in 1D; in 2D the children of a cell are
    /// ordered SW, SE, NW, NE and the three rows are
    /// `(1,-1,1,-1)/2`, `(1,1,-1,-1)/2`, `(1,-1,-1,1)/2`.
    pub fn build_dyadic(dim: usize, q: usize) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(GambletError::UnsupportedDim(dim));
        }
        if q == 0 {
            return Err(GambletError::InvalidLevels(q));
        }
        let sizes: Vec<usize> = (1..=q).map(|k| 1usize << (k * dim)).collect();
        let mut parents = Vec::with_capacity(q.saturating_sub(1));
        let mut cell_volumes = Vec::with_capacity(q);
        for k in 1..=q {
            cell_volumes.push(vec![0.5f64.powi((k * dim) as i32); sizes[k - 1]]);
        }
        for k in 2..=q {
            let side = 1usize << k;
            let parent_of: Vec<usize> = (0..sizes[k - 1])
                .map(|j| match dim {
                    1 => j / 2,
                    _ => {
                        let (ix, iy) = (j % side, j / side);
                        (iy / 2) * (side / 2) + ix / 2
                    }
                })
                .collect();
            parents.push(parent_of);
        }
        let pi = aggregation_matrices(&sizes, &parents, &cell_volumes);
        let mut w = Vec::with_capacity(q.saturating_sub(1));
        for k in 2..=q {
            let groups = sibling_groups(sizes[k - 2], &parents[k - 2]);
            let mut m = DMatrix::zeros(sizes[k - 1] - sizes[k - 2], sizes[k - 1]);
            let patterns: &[&[f64]] = match dim {
                1 => &[&[1.0, -1.0]],
                _ => &[
                    &[1.0, -1.0, 1.0, -1.0],
                    &[1.0, 1.0, -1.0, -1.0],
                    &[1.0, -1.0, -1.0, 1.0],
                ],
            };
            let scale = 1.0 / ((1usize << dim) as f64).sqrt();
            let mut row = 0;
            for children in &groups {
                let ordered = order_children_dyadic(children, dim, 1usize << k);
                for pattern in patterns {
                    for (c, &weight) in ordered.iter().zip(pattern.iter()) {
                        m[(row, *c)] = weight * scale;
                    }
                    row += 1;
                }
            }
            w.push(RectMatrix::from_raw(m));
        }
        Ok(Hierarchy {
            q,
            dim,
            h: 0.5,
            kind: HierarchyKind::Dyadic,
            sizes,
            parents,
            cell_volumes,
            pi,
            w,
        })
    }

    /// Builds a quadtree hierarchy over points of the unit square.
    ///
    /// Levels `k < q` are the nonempty boxes of side `2^-k`; level `q` is the
    /// point set itself, in input order. A level that does not refine the
    /// next one is merged away and recorded in the diagnostics.
    pub fn build_from_points(coords: &[(f64, f64)], q: usize) -> Result<Self> {
        Self::build_from_points_with(coords, q, true)
    }

    /// As [`Hierarchy::build_from_points`]; with `merge_degenerate = false`
    /// a non-refining level is reported as [`GambletError::DegenerateLevel`].
    pub fn build_from_points_with(
        coords: &[(f64, f64)],
        q: usize,
        merge_degenerate: bool,
    ) -> Result<Self> {
        if coords.is_empty() {
            return Err(GambletError::EmptyPointSet);
        }
        if q == 0 {
            return Err(GambletError::InvalidLevels(q));
        }
        for (index, &(x, y)) in coords.iter().enumerate() {
            if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
                return Err(GambletError::PointOutOfRange { index, x, y });
            }
        }
        let n = coords.len();
        // For each candidate level: the box label of every point.
        let mut levels: Vec<(usize, Vec<usize>)> = Vec::new();
        for k in 1..q {
            let side = 1usize << k;
            let keys: Vec<usize> = coords
                .iter()
                .map(|&(x, y)| {
                    let ix = ((x * side as f64).floor() as usize).min(side - 1);
                    let iy = ((y * side as f64).floor() as usize).min(side - 1);
                    iy * side + ix
                })
                .collect();
            let order: BTreeMap<usize, usize> = keys
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(label, key)| (key, label))
                .collect();
            levels.push((k, keys.iter().map(|key| order[key]).collect()));
        }
        levels.push((q, (0..n).collect()));

        // Drop levels that do not refine their successor.
        let mut merged = Vec::new();
        let mut kept: Vec<(usize, Vec<usize>)> = Vec::new();
        for idx in 0..levels.len() {
            let count = distinct(&levels[idx].1);
            let next_count = levels.get(idx + 1).map(|(_, l)| distinct(l));
            if next_count == Some(count) {
                if !merge_degenerate {
                    return Err(GambletError::DegenerateLevel {
                        level: levels[idx + 1].0,
                    });
                }
                log::warn!(
                    "box level {} does not refine the next level; merged",
                    levels[idx].0
                );
                merged.push(levels[idx].0);
                continue;
            }
            kept.push(levels[idx].clone());
        }

        let q_eff = kept.len();
        let sizes: Vec<usize> = kept.iter().map(|(_, l)| distinct(l)).collect();
        let mut counts: Vec<Vec<usize>> = Vec::with_capacity(q_eff);
        for (level, (_, labels)) in kept.iter().enumerate() {
            let mut c = vec![0usize; sizes[level]];
            for &l in labels {
                c[l] += 1;
            }
            counts.push(c);
        }
        let mut parents = Vec::with_capacity(q_eff.saturating_sub(1));
        for level in 1..q_eff {
            let mut parent_of = vec![usize::MAX; sizes[level]];
            for p in 0..n {
                parent_of[kept[level].1[p]] = kept[level - 1].1[p];
            }
            parents.push(parent_of);
        }
        let cell_volumes: Vec<Vec<f64>> = counts
            .iter()
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect();
        let pi = aggregation_matrices(&sizes, &parents, &cell_volumes);
        let mut w = Vec::with_capacity(q_eff.saturating_sub(1));
        for level in 1..q_eff {
            w.push(kernel_basis(
                &pi[level - 1],
                sizes[level - 1],
                &parents[level - 1],
            ));
        }
        let points_per_box = counts
            .iter()
            .map(|c| (*c.iter().min().unwrap_or(&0), *c.iter().max().unwrap_or(&0)))
            .collect();
        Ok(Hierarchy {
            q: q_eff,
            dim: 2,
            h: 0.5,
            kind: HierarchyKind::Points(PointDiagnostics {
                points_per_box,
                merged_levels: merged,
            }),
            sizes,
            parents,
            cell_volumes,
            pi,
            w,
        })
    }

    /// Largest deviation from the structural identities `π πᵀ = I`,
    /// `W Wᵀ = J`, `W πᵀ = 0`, and parent-locality of `W`.
    pub fn invariant_residual(&self) -> f64 {
        let mut worst = 0.0_f64;
        for k in 1..self.q {
            let p = self.pi(k).matrix();
            let ppt = p * p.transpose();
            worst = worst.max((ppt - DMatrix::identity(self.size(k), self.size(k))).amax());
        }
        for k in 2..=self.q {
            let w = self.w(k).matrix();
            let wwt = w * w.transpose();
            worst = worst.max((wwt - DMatrix::identity(w.nrows(), w.nrows())).amax());
            worst = worst.max((w * self.pi(k - 1).matrix().transpose()).amax());
            let parents = self.parents(k);
            for r in 0..w.nrows() {
                let support: Vec<usize> = (0..w.ncols()).filter(|&c| w[(r, c)] != 0.0).collect();
                if let Some(&first) = support.first() {
                    if support.iter().any(|&c| parents[c] != parents[first]) {
                        worst = f64::INFINITY;
                    }
                }
            }
        }
        worst
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&HierarchyDoc::from(self)).expect("hierarchy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: HierarchyDoc = serde_json::from_str(text)
            .map_err(|e| GambletError::parse("hierarchy json", e.to_string()))?;
        doc.try_into()
    }
}

fn distinct(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m + 1)
}

fn sibling_groups(n_parents: usize, parents: &[usize]) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n_parents];
    for (child, &p) in parents.iter().enumerate() {
        groups[p].push(child);
    }
    groups
}

fn order_children_dyadic(children: &[usize], dim: usize, side: usize) -> Vec<usize> {
    let mut c = children.to_vec();
    if dim == 2 {
        // SW, SE, NW, NE: sort by (iy parity, ix parity).
        c.sort_by_key(|&j| ((j / side) % 2, (j % side) % 2));
    } else {
        c.sort_unstable();
    }
    c
}

fn aggregation_matrices(
    sizes: &[usize],
    parents: &[Vec<usize>],
    volumes: &[Vec<f64>],
) -> Vec<RectMatrix> {
    (1..sizes.len())
        .map(|k| {
            let mut m = DMatrix::zeros(sizes[k - 1], sizes[k]);
            for (j, &i) in parents[k - 1].iter().enumerate() {
                m[(i, j)] = (volumes[k][j] / volumes[k - 1][i]).sqrt();
            }
            RectMatrix::from_raw(m)
        })
        .collect()
}

/// Orthonormal basis of `ker π` built parent by parent: Gram–Schmidt on the
/// aggregation row followed by the differences `e_1 - e_j` of each sibling
/// set; the aggregation direction itself is discarded.
fn kernel_basis(pi: &RectMatrix, n_parents: usize, parents: &[usize]) -> RectMatrix {
    let groups = sibling_groups(n_parents, parents);
    let n_children = parents.len();
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(n_children - n_parents);
    for (parent, children) in groups.iter().enumerate() {
        let m = children.len();
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(m);
        let agg = DVector::from_iterator(m, children.iter().map(|&c| pi.get(parent, c)));
        basis.push(agg.normalize());
        for j in 1..m {
            let mut v = DVector::zeros(m);
            v[0] = 1.0;
            v[j] = -1.0;
            // Two passes of modified Gram–Schmidt.
            for _ in 0..2 {
                for b in &basis {
                    let proj = b.dot(&v);
                    v.axpy(-proj, b, 1.0);
                }
            }
            basis.push(v.normalize());
        }
        for local in basis.into_iter().skip(1) {
            let mut row = DVector::zeros(n_children);
            for (pos, &c) in children.iter().enumerate() {
                row[c] = local[pos];
            }
            rows.push(row);
        }
    }
    let mut m = DMatrix::zeros(rows.len(), n_children);
    for (r, row) in rows.iter().enumerate() {
        m.set_row(r, &row.transpose());
    }
    RectMatrix::from_raw(m)
}

#[derive(Serialize, Deserialize)]
struct HierarchyDoc {
    q: usize,
    dim: usize,
    h: f64,
    kind: HierarchyKind,
    sizes: Vec<usize>,
    parents: Vec<Vec<usize>>,
    cell_volumes: Vec<Vec<f64>>,
    pi: Vec<Vec<Vec<f64>>>,
    w: Vec<Vec<Vec<f64>>>,
}

fn nested(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn from_nested(rows: &[Vec<f64>], cols_hint: usize) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(cols_hint, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(GambletError::parse("hierarchy json", "ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl From<&Hierarchy> for HierarchyDoc {
    fn from(h: &Hierarchy) -> Self {
        HierarchyDoc {
            q: h.q,
            dim: h.dim,
            h: h.h,
            kind: h.kind.clone(),
            sizes: h.sizes.clone(),
            parents: h.parents.clone(),
            cell_volumes: h.cell_volumes.clone(),
            pi: h.pi.iter().map(|m| nested(m.matrix())).collect(),
            w: h.w.iter().map(|m| nested(m.matrix())).collect(),
        }
    }
}

impl TryFrom<HierarchyDoc> for Hierarchy {
    type Error = GambletError;

    fn try_from(doc: HierarchyDoc) -> Result<Self> {
        let bad = |msg: &str| GambletError::parse("hierarchy json", msg.to_string());
        if doc.q == 0 || doc.sizes.len() != doc.q {
            return Err(bad("field `sizes` must have q entries"));
        }
        if doc.pi.len() + 1 != doc.q || doc.w.len() + 1 != doc.q || doc.parents.len() + 1 != doc.q {
            return Err(bad("fields `pi`, `w`, `parents` must have q-1 entries"));
        }
        let mut pi = Vec::new();
        for (k, rows) in doc.pi.iter().enumerate() {
            let m = from_nested(rows, doc.sizes[k + 1])?;
            if m.shape() != (doc.sizes[k], doc.sizes[k + 1]) {
                return Err(bad("field `pi` has inconsistent shape"));
            }
            pi.push(RectMatrix::new(m)?);
        }
        let mut w = Vec::new();
        for (k, rows) in doc.w.iter().enumerate() {
            let m = from_nested(rows, doc.sizes[k + 1])?;
            if m.shape() != (doc.sizes[k + 1] - doc.sizes[k], doc.sizes[k + 1]) {
                return Err(bad("field `w` has inconsistent shape"));
            }
            w.push(RectMatrix::new(m)?);
        }
        Ok(Hierarchy {
            q: doc.q,
            dim: doc.dim,
            h: doc.h,
            kind: doc.kind,
            sizes: doc.sizes,
            parents: doc.parents,
            cell_volumes: doc.cell_volumes,
            pi,
            w,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const R2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn dyadic_1d_q2_matrices() {
        let h = Hierarchy::build_dyadic(1, 2).unwrap();
        assert_eq!(h.sizes(), &[2, 4]);
        let expected_pi = DMatrix::from_row_slice(2, 4, &[R2, R2, 0.0, 0.0, 0.0, 0.0, R2, R2]);
        assert!((h.pi(1).matrix() - expected_pi).amax() < 1e-15);
        let expected_w = DMatrix::from_row_slice(2, 4, &[R2, -R2, 0.0, 0.0, 0.0, 0.0, R2, -R2]);
        assert!((h.w(2).matrix() - expected_w).amax() < 1e-15);
    }

    #[test]
    fn dyadic_2d_q2_constraints_by_direct_multiplication() {
        let h = Hierarchy::build_dyadic(2, 2).unwrap();
        let w = h.w(2).matrix();
        assert_eq!(w.shape(), (12, 16));
        let wwt = w * w.transpose();
        assert!((wwt - DMatrix::<f64>::identity(12, 12)).amax() < 1e-12);
        assert!((w * h.pi(1).matrix().transpose()).amax() < 1e-12);
        // every row lives inside one 2x2 block of the 4x4 grid
        for r in 0..12 {
            let blocks: std::collections::BTreeSet<(usize, usize)> = (0..16)
                .filter(|&c| w[(r, c)] != 0.0)
                .map(|c| ((c % 4) / 2, (c / 4) / 2))
                .collect();
            assert_eq!(blocks.len(), 1);
        }
    }

    #[test]
    fn dyadic_stack_is_orthogonal() {
        for (dim, q) in [(1, 4), (2, 3)] {
            let h = Hierarchy::build_dyadic(dim, q).unwrap();
            for k in 2..=q {
                let p = h.pi(k - 1).matrix();
                let w = h.w(k).matrix();
                let n = h.size(k);
                let mut stacked = DMatrix::zeros(n, n);
                stacked.rows_mut(0, p.nrows()).copy_from(p);
                stacked.rows_mut(p.nrows(), w.nrows()).copy_from(w);
                let gram = &stacked * stacked.transpose();
                assert!((gram - DMatrix::<f64>::identity(n, n)).amax() < 1e-12);
                assert!((stacked.determinant().abs() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn unsupported_dim_rejected() {
        assert!(matches!(
            Hierarchy::build_dyadic(3, 2),
            Err(GambletError::UnsupportedDim(3))
        ));
    }

    #[test]
    fn single_point_is_trivial() {
        let h = Hierarchy::build_from_points(&[(0.3, 0.7)], 1).unwrap();
        assert_eq!(h.q(), 1);
        assert_eq!(h.sizes(), &[1]);
        assert!(h.pi.is_empty() && h.w.is_empty());
    }

    #[test]
    fn two_points_per_quadrant() {
        // Each level-1 box (quadrant) holds two points: π entries sqrt(1/2).
        let pts = [
            (0.1, 0.1),
            (0.2, 0.3),
            (0.7, 0.1),
            (0.9, 0.2),
            (0.1, 0.8),
            (0.3, 0.6),
            (0.6, 0.9),
            (0.8, 0.7),
        ];
        let h = Hierarchy::build_from_points(&pts, 2).unwrap();
        assert_eq!(h.sizes(), &[4, 8]);
        let p = h.pi(1).matrix();
        for i in 0..4 {
            for j in 0..8 {
                let expected = if j / 2 == i { R2 } else { 0.0 };
                assert!((p[(i, j)] - expected).abs() < 1e-15);
            }
        }
        assert!(h.invariant_residual() < 1e-12);
    }

    #[test]
    fn quadrant_centers_merge_degenerate_level() {
        let pts = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
        let h = Hierarchy::build_from_points(&pts, 2).unwrap();
        assert_eq!(h.q(), 1);
        match h.kind() {
            HierarchyKind::Points(d) => assert_eq!(d.merged_levels, vec![1]),
            other => panic!("unexpected kind {other:?}"),
        }
        assert!(matches!(
            Hierarchy::build_from_points_with(&pts, 2, false),
            Err(GambletError::DegenerateLevel { level: 2 })
        ));
    }

    #[test]
    fn uneven_sibling_weights_still_orthonormal() {
        let pts = [(0.1, 0.1), (0.2, 0.1), (0.3, 0.2), (0.9, 0.9), (0.6, 0.1)];
        let h = Hierarchy::build_from_points(&pts, 2).unwrap();
        assert!(h.invariant_residual() < 1e-12);
        // |S| counts 3,1,1 at level 1
        assert_eq!(h.cell_volumes(1), &[3.0, 1.0, 1.0]);
    }

    #[test]
    fn grid_points_match_dyadic_structure() {
        let n = 32;
        let pts: Vec<(f64, f64)> = (0..n * n)
            .map(|v| {
                (
                    (v % n) as f64 / (n - 1) as f64,
                    (v / n) as f64 / (n - 1) as f64,
                )
            })
            .collect();
        let hp = Hierarchy::build_from_points(&pts, 5).unwrap();
        let hd = Hierarchy::build_dyadic(2, 5).unwrap();
        assert_eq!(hp.sizes(), hd.sizes());
        for k in 1..5 {
            assert!((hp.pi(k).matrix() - hd.pi(k).matrix()).amax() < 1e-14);
            // same detail subspace: identical projectors WᵀW
            let pp = hp.w(k + 1).matrix().tr_mul(hp.w(k + 1).matrix());
            let pd = hd.w(k + 1).matrix().tr_mul(hd.w(k + 1).matrix());
            assert!((pp - pd).amax() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_point_sets() {
        assert!(matches!(
            Hierarchy::build_from_points(&[], 2),
            Err(GambletError::EmptyPointSet)
        ));
        assert!(matches!(
            Hierarchy::build_from_points(&[(1.5, 0.0)], 2),
            Err(GambletError::PointOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let h = Hierarchy::build_dyadic(2, 3).unwrap();
        assert_eq!(Hierarchy::from_json(&h.to_json()).unwrap(), h);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn random_point_sets_satisfy_invariants(
                pts in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..120),
                q in 1usize..6,
            ) {
                let h = Hierarchy::build_from_points(&pts, q).unwrap();
                prop_assert!(h.invariant_residual() < 1e-12);
                prop_assert_eq!(h.fine_size(), pts.len());
                for k in 2..=h.q() {
                    prop_assert_eq!(h.w(k).rows(), h.size(k) - h.size(k - 1));
                }
                let top = h.pi_between(1, h.q());
                let gram = &top * top.transpose();
                prop_assert!((gram - DMatrix::<f64>::identity(h.size(1), h.size(1))).amax() < 1e-10);
            }

            #[test]
            fn dyadic_configs_satisfy_invariants(dim in 1usize..=2, q in 1usize..=6) {
                prop_assume!(dim == 1 || q <= 5);
                let h = Hierarchy::build_dyadic(dim, q).unwrap();
                prop_assert!(h.invariant_residual() < 1e-12);
                for k in 1..=q {
                    let comp = h.pi_between(k, q);
                    let gram = &comp * comp.transpose();
                    prop_assert!((gram - DMatrix::<f64>::identity(h.size(k), h.size(k))).amax() < 1e-10);
                }
            }
        }
    }
}
