//! The gamblet transform, the multilevel solve, and analysis/reconstruction
//! of fine vectors in the gamblet basis.
//!
//! Level matrices follow the usual notation: for `k = q, …, 2`,
//!
//! ```text
//! B^(k)     = W^(k) A^(k) W^(k),T
//! N^(k)     = A^(k) W^(k),T B^(k),-1
//! R^(k-1,k) = π^(k-1,k) (I − N^(k) W^(k))
//! A^(k-1)   = R^(k-1,k) A^(k) R^(k,k-1)
//! ```
//!
//! with `A^(q)` the fine stiffness matrix. On level one `J^(1) = I^(1)`,
//! `B^(1) = A^(1)` and `N^(1) = I`. A fine vector `x` stands for
//! `Σ x_i ψ_i^(q)`, and measuring it against `φ_i^(q)` returns `x_i`.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, GambletError, Result};
use crate::hierarchy::Hierarchy;
use crate::numerics::{
    cholesky, extreme_eigs, fmt_g17, read_matrix_csv, write_matrix_csv, CholFactor, RectMatrix,
    SymMatrix, Vector,
};
use crate::operators::DiscreteOperator;

/// Largest fine dimension accepted by [`oracle_transform`].
pub const ORACLE_LIMIT: usize = 4096;

const MANIFEST_FORMAT: &str = "gamblet-system/1";

/// Gamblet coefficients `c^(k)` for `k = 1..=q` (stored at index `k-1`).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiresCoefficients {
    levels: Vec<Vector>,
}

impl MultiresCoefficients {
    pub fn new(levels: Vec<Vector>) -> Self {
        MultiresCoefficients { levels }
    }

    pub fn zeros(hierarchy: &Hierarchy) -> Self {
        MultiresCoefficients {
            levels: hierarchy
                .detail_sizes()
                .into_iter()
                .map(Vector::zeros)
                .collect(),
        }
    }

    pub fn q(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &Vector {
        &self.levels[k - 1]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut Vector {
        &mut self.levels[k - 1]
    }

    pub fn levels(&self) -> &[Vector] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Vector> {
        self.levels
    }
}

struct Lifts {
    /// `psi[k-1]`: rows are `ψ^(k)_i` in the fine basis.
    psi: Vec<DMatrix<f64>>,
    /// `chi[k-1]`: rows are `χ^(k)_i` in the fine basis.
    chi: Vec<DMatrix<f64>>,
}

/// Per-level matrices produced by the gamblet transform.
pub struct GambletSystem {
    hierarchy: Hierarchy,
    trunc: f64,
    a: Vec<SymMatrix>,
    b: Vec<SymMatrix>,
    b_chol: Vec<CholFactor>,
    n: Vec<RectMatrix>,
    r: Vec<RectMatrix>,
    lifts: OnceLock<Lifts>,
}

impl std::fmt::Debug for GambletSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GambletSystem")
            .field("q", &self.q())
            .field("sizes", &self.hierarchy.sizes())
            .field("trunc", &self.trunc)
            .finish()
    }
}

/// Rows of `m` as `(column, value)` lists of the nonzero entries.
fn sparse_rows(m: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .filter(|&j| m[(i, j)] != 0.0)
                .map(|j| (j, m[(i, j)]))
                .collect()
        })
        .collect()
}

/// `m x` for a sparse `m` (the hierarchy matrices have a few entries per row).
fn sparse_mul(m: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(m.ncols(), x.nrows());
    let rows = sparse_rows(m);
    let mut out = DMatrix::zeros(m.nrows(), x.ncols());
    for c in 0..x.ncols() {
        let xc = x.column(c);
        for (i, row) in rows.iter().enumerate() {
            out[(i, c)] = row.iter().map(|&(j, v)| v * xc[j]).sum();
        }
    }
    out
}

fn drop_small(m: &mut DMatrix<f64>, trunc: f64) {
    if trunc > 0.0 {
        let cut = trunc * m.amax();
        m.apply(|x| {
            if x.abs() < cut {
                *x = 0.0
            }
        });
    }
}

/// One coarsening step from `A^(k)`: returns `(B^(k), chol B^(k), N^(k), R^(k-1,k))`.
fn level_step(
    a: &SymMatrix,
    w: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    trunc: f64,
) -> Result<(SymMatrix, CholFactor, RectMatrix, RectMatrix)> {
    let wa = sparse_mul(w, a.matrix());
    let b = SymMatrix::symmetrized(sparse_mul(w, &wa.transpose()));
    let b_chol = cholesky(&b)?;
    let n = b_chol.solve_matrix(&wa)?.transpose();
    let pi_n = sparse_mul(pi, &n);
    let pi_n_w = sparse_mul(&w.transpose(), &pi_n.transpose()).transpose();
    let mut r = pi - pi_n_w;
    drop_small(&mut r, trunc);
    Ok((b, b_chol, RectMatrix::from_raw(n), RectMatrix::from_raw(r)))
}

/// Runs the gamblet transform on `op` over `hierarchy`.
///
/// With `trunc > 0`, entries of `R^(k-1,k)` and `A^(k-1)` smaller than
/// `trunc` times the largest entry of their matrix are set to zero on every
/// level.
pub fn transform(
    op: &DiscreteOperator,
    hierarchy: &Hierarchy,
    trunc: f64,
) -> Result<GambletSystem> {
    if !(trunc >= 0.0 && trunc.is_finite()) {
        return Err(GambletError::InvalidConfig(format!(
            "truncation tolerance must be >= 0, got {trunc}"
        )));
    }
    check_dim(hierarchy.fine_size(), op.dim())?;
    let q = hierarchy.q();
    let mut a: Vec<Option<SymMatrix>> = vec![None; q];
    let mut b: Vec<Option<SymMatrix>> = vec![None; q];
    let mut b_chol: Vec<Option<CholFactor>> = vec![None; q];
    let mut n: Vec<Option<RectMatrix>> = vec![None; q.saturating_sub(1)];
    let mut r: Vec<Option<RectMatrix>> = vec![None; q.saturating_sub(1)];
    let mut current = op.stiffness.clone();
    for k in (2..=q).rev() {
        let (bk, ck, nk, rk) = level_step(
            &current,
            hierarchy.w(k).matrix(),
            hierarchy.pi(k - 1).matrix(),
            trunc,
        )?;
        let ra = rk.matrix() * current.matrix();
        let mut coarse = &ra * rk.matrix().transpose();
        drop_small(&mut coarse, trunc);
        log::debug!(
            "transform level {k}: |I| = {}, |J| = {}",
            current.dim(),
            bk.dim()
        );
        a[k - 1] = Some(current);
        b[k - 1] = Some(bk);
        b_chol[k - 1] = Some(ck);
        n[k - 2] = Some(nk);
        r[k - 2] = Some(rk);
        current = SymMatrix::symmetrized(coarse);
    }
    b_chol[0] = Some(cholesky(&current)?);
    b[0] = Some(current.clone());
    a[0] = Some(current);
    let sys = GambletSystem {
        hierarchy: hierarchy.clone(),
        trunc,
        a: a.into_iter().map(Option::unwrap).collect(),
        b: b.into_iter().map(Option::unwrap).collect(),
        b_chol: b_chol.into_iter().map(Option::unwrap).collect(),
        n: n.into_iter().map(Option::unwrap).collect(),
        r: r.into_iter().map(Option::unwrap).collect(),
        lifts: OnceLock::new(),
    };
    Ok(sys)
}

/// Brute-force reference: `A^(k) = (π^(k,q) A^{-1} π^(q,k))^{-1}` on every
/// level, with `B^(k)`, `N^(k)`, `R^(k-1,k)` taken from their definitions.
pub fn oracle_transform(op: &DiscreteOperator, hierarchy: &Hierarchy) -> Result<GambletSystem> {
    let fine = hierarchy.fine_size();
    if fine > ORACLE_LIMIT {
        return Err(GambletError::TooLarge {
            n: fine,
            limit: ORACLE_LIMIT,
        });
    }
    check_dim(fine, op.dim())?;
    let q = hierarchy.q();
    let a_inv = cholesky(&op.stiffness)?.solve_matrix(&DMatrix::identity(fine, fine))?;
    let mut a = Vec::with_capacity(q);
    for k in 1..=q {
        if k == q {
            a.push(op.stiffness.clone());
        } else {
            let p = hierarchy.pi_between(k, q);
            let theta = SymMatrix::symmetrized(&p * &a_inv * p.transpose());
            let inv =
                cholesky(&theta)?.solve_matrix(&DMatrix::identity(theta.dim(), theta.dim()))?;
            a.push(SymMatrix::symmetrized(inv));
        }
    }
    let mut b = Vec::with_capacity(q);
    let mut b_chol = Vec::with_capacity(q);
    let mut n = Vec::with_capacity(q.saturating_sub(1));
    let mut r = Vec::with_capacity(q.saturating_sub(1));
    b.push(a[0].clone());
    b_chol.push(cholesky(&a[0])?);
    for k in 2..=q {
        let (bk, ck, nk, rk) = level_step(
            &a[k - 1],
            hierarchy.w(k).matrix(),
            hierarchy.pi(k - 1).matrix(),
            0.0,
        )?;
        b.push(bk);
        b_chol.push(ck);
        n.push(nk);
        r.push(rk);
    }
    Ok(GambletSystem {
        hierarchy: hierarchy.clone(),
        trunc: 0.0,
        a,
        b,
        b_chol,
        n,
        r,
        lifts: OnceLock::new(),
    })
}

/// `√(xᵀ A x)`, clamping round-off negatives to zero.
pub fn energy_norm(op: &DiscreteOperator, x: &Vector) -> Result<f64> {
    Ok(op.stiffness.quad_form(x)?.max(0.0).sqrt())
}

impl GambletSystem {
    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn q(&self) -> usize {
        self.hierarchy.q()
    }

    pub fn fine_size(&self) -> usize {
        self.hierarchy.fine_size()
    }

    pub fn trunc(&self) -> f64 {
        self.trunc
    }

    /// `A^(k)` for `k = 1..=q`.
    pub fn a(&self, k: usize) -> &SymMatrix {
        &self.a[k - 1]
    }

    /// `B^(k)` for `k = 1..=q` (`B^(1) = A^(1)`).
    pub fn b(&self, k: usize) -> &SymMatrix {
        &self.b[k - 1]
    }

    pub fn b_factor(&self, k: usize) -> &CholFactor {
        &self.b_chol[k - 1]
    }

    /// `N^(k)` for `k = 2..=q`.
    pub fn n(&self, k: usize) -> &RectMatrix {
        &self.n[k - 2]
    }

    /// `R^(k-1,k)` for `k = 2..=q`.
    pub fn r(&self, k: usize) -> &RectMatrix {
        &self.r[k - 2]
    }

    fn check_level(&self, l: usize) -> Result<()> {
        if l > self.q() {
            Err(GambletError::BadLevel {
                level: l,
                q: self.q(),
            })
        } else {
            Ok(())
        }
    }

    /// Gamblet coefficients `c^(k) = N^(k),T m^(k)` of a fine vector, where
    /// `m^(k)` are its level-`k` measurements (`c^(1) = m^(1)`).
    pub fn analyze(&self, y: &Vector) -> Result<MultiresCoefficients> {
        check_dim(self.fine_size(), y.len())?;
        let m = self.hierarchy.restrict_all(y);
        let levels = m
            .into_iter()
            .enumerate()
            .map(|(idx, mk)| {
                if idx == 0 {
                    mk
                } else {
                    self.n(idx + 1).matrix().tr_mul(&mk)
                }
            })
            .collect();
        Ok(MultiresCoefficients { levels })
    }

    /// `Σ_{k ≤ l} χ^(k),T c^(k)` in the fine basis; `l = 0` gives zero.
    pub fn reconstruct(&self, c: &MultiresCoefficients, upto: usize) -> Result<Vector> {
        self.check_level(upto)?;
        if c.q() != self.q() {
            return Err(GambletError::DimensionMismatch {
                expected: self.q(),
                actual: c.q(),
            });
        }
        for k in 1..=self.q() {
            check_dim(self.hierarchy.detail_size(k), c.level(k).len())?;
        }
        if upto == 0 {
            return Ok(Vector::zeros(self.fine_size()));
        }
        let mut x = c.level(1).clone();
        for k in 2..=self.q() {
            let mut next = self.r(k).matrix().tr_mul(&x);
            if k <= upto {
                next += self.hierarchy.w(k).matrix().tr_mul(c.level(k));
            }
            x = next;
        }
        Ok(x)
    }

    /// Multilevel solve of `A x = f`: `w^(k) = B^(k),-1 W^(k) f^(k)`,
    /// `f^(k-1) = R^(k-1,k) f^(k)`, `w^(1) = A^(1),-1 f^(1)`, then
    /// `x = Σ_k χ^(k),T w^(k)`.
    pub fn solve(&self, f: &Vector) -> Result<Vector> {
        check_dim(self.fine_size(), f.len())?;
        let q = self.q();
        let mut w = vec![Vector::zeros(0); q];
        let mut fk = f.clone();
        for k in (2..=q).rev() {
            let mut wk = self.hierarchy.w(k).matrix() * &fk;
            self.b_chol[k - 1].solve_in_place(wk.as_mut_slice());
            w[k - 1] = wk;
            fk = self.r(k).matrix() * &fk;
        }
        self.b_chol[0].solve_in_place(fk.as_mut_slice());
        w[0] = fk;
        self.reconstruct(&MultiresCoefficients { levels: w }, q)
    }

    /// `c^(k),T B^(k) c^(k)` for every level: the energy carried by each
    /// level of the decomposition.
    pub fn level_energies(&self, c: &MultiresCoefficients) -> Result<Vec<f64>> {
        (1..=self.q())
            .map(|k| self.b(k).quad_form(c.level(k)))
            .collect()
    }

    /// The matrix `Z` with blocks `Z^(s,k) = N^(s),T π^(s,k) N^(k)` for
    /// `s ≤ k` (and `N^(1) = I`), ordered by level.
    pub fn z_matrix(&self) -> SymMatrix {
        let q = self.q();
        let sizes = self.hierarchy.detail_sizes();
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| Some(std::mem::replace(acc, *acc + s)))
            .collect();
        let total: usize = sizes.iter().sum();
        let mut z = DMatrix::zeros(total, total);
        let n_of = |k: usize| -> DMatrix<f64> {
            if k == 1 {
                DMatrix::identity(sizes[0], sizes[0])
            } else {
                self.n(k).matrix().clone()
            }
        };
        for k in 1..=q {
            let nk = n_of(k);
            for s in 1..=k {
                let block = n_of(s).tr_mul(&(self.hierarchy.pi_between(s, k) * &nk));
                z.view_mut(
                    (offsets[s - 1], offsets[k - 1]),
                    (sizes[s - 1], sizes[k - 1]),
                )
                .copy_from(&block);
                if s != k {
                    z.view_mut(
                        (offsets[k - 1], offsets[s - 1]),
                        (sizes[k - 1], sizes[s - 1]),
                    )
                    .copy_from(&block.transpose());
                }
            }
        }
        SymMatrix::symmetrized(z)
    }

    fn lifts(&self) -> &Lifts {
        self.lifts.get_or_init(|| {
            let q = self.q();
            let fine = self.fine_size();
            let mut psi = vec![DMatrix::zeros(0, 0); q];
            psi[q - 1] = DMatrix::identity(fine, fine);
            for k in (2..=q).rev() {
                psi[k - 2] = self.r(k).matrix() * &psi[k - 1];
            }
            let chi = (1..=q)
                .map(|k| {
                    if k == 1 {
                        psi[0].clone()
                    } else {
                        self.hierarchy.w(k).matrix() * &psi[k - 1]
                    }
                })
                .collect();
            Lifts { psi, chi }
        })
    }

    /// Rows are the level-`k` gamblets `ψ^(k)_i` in the fine basis.
    pub fn psi_fine(&self, k: usize) -> &DMatrix<f64> {
        &self.lifts().psi[k - 1]
    }

    /// Rows are the level-`k` detail gamblets `χ^(k)_i` in the fine basis.
    pub fn chi_fine(&self, k: usize) -> &DMatrix<f64> {
        &self.lifts().chi[k - 1]
    }

    /// Rows are the measurement functions `φ^(k),χ_i = Σ_j N^(k),T_{ij} φ^(k)_j`
    /// expressed in the fine measurement functions `φ^(q)`.
    pub fn phi_chi_fine(&self, k: usize) -> DMatrix<f64> {
        let p = self.hierarchy.pi_between(k, self.q());
        if k == 1 {
            p
        } else {
            self.n(k).matrix().tr_mul(&p)
        }
    }

    /// Relative residuals of the level identities `B = W A Wᵀ`,
    /// `A^(k-1) = R A Rᵀ` and `W N = I`, each measured against the largest
    /// entry of the reference matrix. Returns the worst one.
    pub fn invariant_residual(&self) -> f64 {
        let mut worst = 0.0_f64;
        let rel =
            |x: &DMatrix<f64>, y: &DMatrix<f64>| (x - y).amax() / y.amax().max(f64::MIN_POSITIVE);
        for k in 2..=self.q() {
            let w = self.hierarchy.w(k).matrix();
            let a = self.a(k).matrix();
            worst = worst.max(rel(self.b(k).matrix(), &(w * a * w.transpose())));
            let r = self.r(k).matrix();
            worst = worst.max(rel(self.a(k - 1).matrix(), &(r * a * r.transpose())));
            let wn = w * self.n(k).matrix();
            worst = worst.max((wn - DMatrix::identity(w.nrows(), w.nrows())).amax());
        }
        worst
    }

    /// `Cond(B^(k))` for `k = 1..=q`.
    pub fn b_conditions(&self) -> Result<Vec<f64>> {
        self.b
            .iter()
            .map(|b| extreme_eigs(b, 1e-8).map(|(lo, hi)| hi / lo))
            .collect()
    }

    /// `Cond(A^(k))` for `k = 1..=q`.
    pub fn a_conditions(&self) -> Result<Vec<f64>> {
        self.a
            .iter()
            .map(|a| extreme_eigs(a, 1e-8).map(|(lo, hi)| hi / lo))
            .collect()
    }

    /// Writes the level matrices as CSV files plus `manifest.json` and
    /// `hierarchy.json` into `dir` (created if missing).
    pub fn save(&self, dir: &Path, operator_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GambletError::io(dir, e))?;
        let hierarchy_json = self.hierarchy.to_json();
        let q = self.q();
        for k in 1..=q {
            write_matrix_csv(&dir.join(format!("a_{k}.csv")), self.a(k).matrix())?;
            if k >= 2 {
                write_matrix_csv(&dir.join(format!("b_{k}.csv")), self.b(k).matrix())?;
                write_matrix_csv(&dir.join(format!("n_{k}.csv")), self.n(k).matrix())?;
                write_matrix_csv(&dir.join(format!("r_{k}.csv")), self.r(k).matrix())?;
            }
        }
        let manifest = SystemManifest {
            format: MANIFEST_FORMAT.into(),
            q,
            sizes: self.hierarchy.sizes().to_vec(),
            trunc: fmt_g17(self.trunc),
            hierarchy_hash: sha256_hex(hierarchy_json.as_bytes()),
            operator_hash: operator_hash.into(),
        };
        let path = dir.join("hierarchy.json");
        fs::write(&path, hierarchy_json).map_err(|e| GambletError::io(&path, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| GambletError::io(&path, e))
    }

    /// Loads a system written by [`GambletSystem::save`], re-factorizing the
    /// `B^(k)` blocks.
    pub fn load(dir: &Path) -> Result<(Self, SystemManifest)> {
        let manifest_path = dir.join("manifest.json");
        let text =
            fs::read_to_string(&manifest_path).map_err(|e| GambletError::io(&manifest_path, e))?;
        let manifest = SystemManifest::from_json(&text, &manifest_path.display().to_string())?;
        let path = dir.join("hierarchy.json");
        let hierarchy_json = fs::read_to_string(&path).map_err(|e| GambletError::io(&path, e))?;
        if sha256_hex(hierarchy_json.as_bytes()) != manifest.hierarchy_hash {
            return Err(GambletError::parse(
                path.display().to_string(),
                "hierarchy hash mismatch",
            ));
        }
        let hierarchy = Hierarchy::from_json(&hierarchy_json)?;
        if hierarchy.sizes() != manifest.sizes.as_slice() {
            return Err(GambletError::ShapeMismatch(
                "manifest sizes disagree with hierarchy".into(),
            ));
        }
        let trunc: f64 = manifest.trunc.parse().map_err(|_| {
            GambletError::parse(
                manifest_path.display().to_string(),
                format!("field `trunc`: not a number: {}", manifest.trunc),
            )
        })?;
        let q = hierarchy.q();
        let shape = |m: &DMatrix<f64>, rows: usize, cols: usize, name: &str| -> Result<()> {
            if m.nrows() == rows && m.ncols() == cols {
                Ok(())
            } else {
                Err(GambletError::ShapeMismatch(format!(
                    "{name}: expected {rows}x{cols}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )))
            }
        };
        let mut a = Vec::with_capacity(q);
        let mut b = Vec::with_capacity(q);
        let mut b_chol = Vec::with_capacity(q);
        let mut n = Vec::new();
        let mut r = Vec::new();
        for k in 1..=q {
            let ak = read_matrix_csv(&dir.join(format!("a_{k}.csv")))?;
            shape(&ak, hierarchy.size(k), hierarchy.size(k), &format!("a_{k}"))?;
            a.push(SymMatrix::new(ak)?);
            if k == 1 {
                b.push(a[0].clone());
            } else {
                let (size, detail, coarse) = (
                    hierarchy.size(k),
                    hierarchy.detail_size(k),
                    hierarchy.size(k - 1),
                );
                let bk = read_matrix_csv(&dir.join(format!("b_{k}.csv")))?;
                shape(&bk, detail, detail, &format!("b_{k}"))?;
                b.push(SymMatrix::new(bk)?);
                let nk = read_matrix_csv(&dir.join(format!("n_{k}.csv")))?;
                shape(&nk, size, detail, &format!("n_{k}"))?;
                n.push(RectMatrix::new(nk)?);
                let rk = read_matrix_csv(&dir.join(format!("r_{k}.csv")))?;
                shape(&rk, coarse, size, &format!("r_{k}"))?;
                r.push(RectMatrix::new(rk)?);
            }
            b_chol.push(cholesky(&b[k - 1])?);
        }
        let sys = GambletSystem {
            hierarchy,
            trunc,
            a,
            b,
            b_chol,
            n,
            r,
            lifts: OnceLock::new(),
        };
        Ok((sys, manifest))
    }
}

/// Contents of `manifest.json` in a saved system directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemManifest {
    pub format: String,
    pub q: usize,
    pub sizes: Vec<usize>,
    pub trunc: String,
    pub hierarchy_hash: String,
    pub operator_hash: String,
}

impl SystemManifest {
    /// Parses and validates a manifest; errors name the offending field.
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| GambletError::parse(context, format!("not valid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| GambletError::parse(context, "expected a JSON object"))?;
        let field = |name: &str| -> Result<&serde_json::Value> {
            obj.get(name)
                .ok_or_else(|| GambletError::parse(context, format!("missing field `{name}`")))
        };
        let bad = |name: &str, what: &str| {
            GambletError::parse(context, format!("field `{name}`: expected {what}"))
        };
        let string = |name: &str| -> Result<String> {
            field(name)?
                .as_str()
                .map(str::to_owned)
                .ok_or_else(|| bad(name, "a string"))
        };
        let count = |v: &serde_json::Value, name: &str| -> Result<usize> {
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| bad(name, "a non-negative integer"))
        };
        let format = string("format")?;
        if format != MANIFEST_FORMAT {
            return Err(GambletError::parse(
                context,
                format!("field `format`: unknown format {format:?}"),
            ));
        }
        let q = count(field("q")?, "q")?;
        let sizes = field("sizes")?
            .as_array()
            .ok_or_else(|| bad("sizes", "an array"))?
            .iter()
            .map(|v| count(v, "sizes"))
            .collect::<Result<Vec<_>>>()?;
        if sizes.len() != q {
            return Err(GambletError::parse(
                context,
                format!("field `sizes`: expected {q} entries, got {}", sizes.len()),
            ));
        }
        Ok(SystemManifest {
            format,
            q,
            sizes,
            trunc: string("trunc")?,
            hierarchy_hash: string("hierarchy_hash")?,
            operator_hash: string("operator_hash")?,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Content hash of an operator's stiffness and mass matrices.
pub fn operator_hash(op: &DiscreteOperator) -> String {
    let mut hasher = Sha256::new();
    for m in [op.stiffness.matrix(), op.mass.matrix()] {
        hasher.update((m.nrows() as u64).to_le_bytes());
        for x in m.iter() {
            hasher.update(x.to_bits().to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{rel_frobenius, solve_spd};
    use crate::operators::{assemble_fem, element_integrals_1d, CoefficientField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fem(dim: usize, q: usize, field: CoefficientField) -> (Hierarchy, DiscreteOperator) {
        let h = Hierarchy::build_dyadic(dim, q).unwrap();
        let op = assemble_fem(&field, &h).unwrap();
        (h, op)
    }

    fn identity_op(h: &Hierarchy) -> DiscreteOperator {
        DiscreteOperator::from_matrix(SymMatrix::identity(h.fine_size()), h.q())
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vector {
        Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_operator_gives_identity_levels() {
        for (dim, q) in [(1, 4), (2, 3)] {
            let h = Hierarchy::build_dyadic(dim, q).unwrap();
            let sys = transform(&identity_op(&h), &h, 0.0).unwrap();
            for k in 1..=q {
                let nk = sys.a(k).dim();
                assert!((sys.a(k).matrix() - DMatrix::identity(nk, nk)).amax() < 1e-14);
                let nb = sys.b(k).dim();
                assert!((sys.b(k).matrix() - DMatrix::identity(nb, nb)).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn oracle_trivial_cases() {
        let (h, op) = fem(1, 1, CoefficientField::unit(1));
        let sys = oracle_transform(&op, &h).unwrap();
        assert_eq!(sys.a(1), &op.stiffness);
        let h = Hierarchy::build_dyadic(1, 3).unwrap();
        let sys = oracle_transform(&identity_op(&h), &h).unwrap();
        for k in 1..=3 {
            assert!((sys.a(k).matrix() - DMatrix::identity(h.size(k), h.size(k))).amax() < 1e-13);
        }
    }

    #[test]
    fn oracle_rejects_large_problems() {
        let h = Hierarchy::build_dyadic(1, 13).unwrap();
        let op = identity_op(&h);
        assert!(matches!(
            oracle_transform(&op, &h),
            Err(GambletError::TooLarge {
                n: 8192,
                limit: 4096
            })
        ));
    }

    #[test]
    fn transform_matches_oracle() {
        for (dim, q, field) in [
            (1, 3, CoefficientField::unit(1)),
            (1, 4, CoefficientField::unit(1)),
            (1, 4, CoefficientField::rough_1d()),
            (2, 2, CoefficientField::rough_2d()),
        ] {
            let (h, op) = fem(dim, q, field);
            let sys = transform(&op, &h, 0.0).unwrap();
            let oracle = oracle_transform(&op, &h).unwrap();
            for k in 1..=q {
                assert!(
                    rel_frobenius(sys.a(k).matrix(), oracle.a(k).matrix()) < 1e-8,
                    "A^({k})"
                );
                assert!(
                    rel_frobenius(sys.b(k).matrix(), oracle.b(k).matrix()) < 1e-8,
                    "B^({k})"
                );
            }
            assert!(sys.invariant_residual() < 1e-10);
        }
    }

    #[test]
    fn analyze_zero_and_constant() {
        let (h, op) = fem(1, 5, CoefficientField::rough_1d());
        let sys = transform(&op, &h, 0.0).unwrap();
        let c = sys.analyze(&Vector::zeros(32)).unwrap();
        assert!(c.levels().iter().all(|v| v.iter().all(|&x| x == 0.0)));

        let h = Hierarchy::build_dyadic(1, 2).unwrap();
        let sys = transform(&identity_op(&h), &h, 0.0).unwrap();
        let y = Vector::from_element(4, 0.5);
        let c = sys.analyze(&y).unwrap();
        let m1 = h.pi(1).matrix() * &y;
        assert!((c.level(1) - &m1).amax() < 1e-15);
        assert!(c.level(2).amax() < 1e-15);
        assert!((m1 - Vector::from_element(2, 1.0 / 2f64.sqrt())).amax() < 1e-15);
    }

    #[test]
    fn coarse_reconstruction_of_identity_is_parent_average() {
        let h = Hierarchy::build_dyadic(1, 3).unwrap();
        let sys = transform(&identity_op(&h), &h, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random_vec(8, &mut rng);
        let c = sys.analyze(&y).unwrap();
        let x = sys.reconstruct(&c, 1).unwrap();
        let p = h.pi_between(1, 3);
        let expected = p.transpose() * (&p * &y);
        assert!((x - expected).amax() < 1e-14);
        for i in 0..8 {
            let block = &y.as_slice()[(i / 4) * 4..(i / 4) * 4 + 4];
            let avg: f64 = block.iter().sum::<f64>() / 4.0;
            assert!((sys.reconstruct(&c, 1).unwrap()[i] - avg).abs() < 1e-14);
        }
    }

    #[test]
    fn reconstruct_edge_cases() {
        let (h, op) = fem(1, 4, CoefficientField::unit(1));
        let sys = transform(&op, &h, 0.0).unwrap();
        let zero = MultiresCoefficients::zeros(&h);
        assert_eq!(sys.reconstruct(&zero, 4).unwrap(), Vector::zeros(16));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = sys.analyze(&random_vec(16, &mut rng)).unwrap();
        assert_eq!(sys.reconstruct(&c, 0).unwrap(), Vector::zeros(16));
        assert!(matches!(
            sys.reconstruct(&c, 5),
            Err(GambletError::BadLevel { level: 5, q: 4 })
        ));
    }

    #[test]
    fn round_trip_random_vectors() {
        for (dim, q) in [(1, 6), (2, 3)] {
            let field = if dim == 1 {
                CoefficientField::rough_1d()
            } else {
                CoefficientField::rough_2d()
            };
            let (h, op) = fem(dim, q, field);
            let sys = transform(&op, &h, 0.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..20 {
                let y = random_vec(h.fine_size(), &mut rng);
                let back = sys.reconstruct(&sys.analyze(&y).unwrap(), q).unwrap();
                assert!((back - &y).norm() <= 1e-9 * y.norm());
            }
        }
    }

    #[test]
    fn solve_cases() {
        let h = Hierarchy::build_dyadic(1, 4).unwrap();
        let sys = transform(&identity_op(&h), &h, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_vec(16, &mut rng);
        assert!((sys.solve(&f).unwrap() - &f).amax() < 1e-14);

        let (h, op) = fem(1, 6, CoefficientField::unit(1));
        let sys = transform(&op, &h, 0.0).unwrap();
        let mut e1 = Vector::zeros(64);
        e1[0] = 1.0;
        let x = sys.solve(&e1).unwrap();
        let direct = solve_spd(&cholesky(&op.stiffness).unwrap(), &e1).unwrap();
        assert!((&x - &direct).norm() <= 1e-9 * direct.norm());

        let (h, op) = fem(1, 1, CoefficientField::rough_1d());
        let sys = transform(&op, &h, 0.0).unwrap();
        let f = Vector::from_vec(vec![1.0, 2.0]);
        let direct = solve_spd(&cholesky(&op.stiffness).unwrap(), &f).unwrap();
        assert!((sys.solve(&f).unwrap() - direct).amax() < 1e-14);
    }

    #[test]
    fn energy_splits_across_levels() {
        for (dim, q) in [(1, 6), (2, 3)] {
            let field = if dim == 1 {
                CoefficientField::rough_1d()
            } else {
                CoefficientField::rough_2d()
            };
            let (h, op) = fem(dim, q, field);
            let sys = transform(&op, &h, 0.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            for _ in 0..10 {
                let x = random_vec(h.fine_size(), &mut rng);
                let total = op.stiffness.quad_form(&x).unwrap();
                let parts: f64 = sys
                    .level_energies(&sys.analyze(&x).unwrap())
                    .unwrap()
                    .iter()
                    .sum();
                assert!((total - parts).abs() <= 1e-8 * total);
            }
        }
    }

    #[test]
    fn energy_norm_cases() {
        let (h, op) = fem(1, 3, CoefficientField::unit(1));
        assert_eq!(energy_norm(&op, &Vector::zeros(8)).unwrap(), 0.0);
        let id = identity_op(&h);
        let x = Vector::from_vec(vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((energy_norm(&id, &x).unwrap() - 5.0).abs() < 1e-15);
        assert!(energy_norm(&op, &Vector::zeros(3)).is_err());
    }

    #[test]
    fn z_matrix_properties() {
        let h = Hierarchy::build_dyadic(1, 4).unwrap();
        let sys = transform(&identity_op(&h), &h, 0.0).unwrap();
        let z = sys.z_matrix();
        assert!((z.matrix() - DMatrix::identity(16, 16)).amax() < 1e-13);

        // Diagonal blocks N^T N dominate the identity because W N = I and W
        // has orthonormal rows; the full matrix is only positive definite.
        let (h, op) = fem(1, 4, CoefficientField::unit(1));
        let sys = transform(&op, &h, 0.0).unwrap();
        for k in 2..=4 {
            let ntn = SymMatrix::symmetrized(sys.n(k).matrix().tr_mul(sys.n(k).matrix()));
            let (lo, _) = extreme_eigs(&ntn, 1e-10).unwrap();
            assert!(lo >= 1.0 - 1e-10, "level {k}: {lo}");
        }
        let (lo, hi) = extreme_eigs(&sys.z_matrix(), 1e-10).unwrap();
        assert!(lo > 0.0 && hi.is_finite());
    }

    #[test]
    fn z_matches_explicit_measurement_functions() {
        let (h, op) = fem(1, 3, CoefficientField::rough_1d());
        let sys = transform(&op, &h, 0.0).unwrap();
        let phi: Vec<DMatrix<f64>> = (1..=3).map(|k| sys.phi_chi_fine(k)).collect();
        let rows: usize = phi.iter().map(|p| p.nrows()).sum();
        let mut stacked = DMatrix::zeros(rows, 8);
        let mut at = 0;
        for p in &phi {
            stacked.view_mut((at, 0), (p.nrows(), 8)).copy_from(p);
            at += p.nrows();
        }
        let gram = &stacked * stacked.transpose();
        assert!((sys.z_matrix().matrix() - &gram).amax() < 1e-12 * gram.amax());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_vec(8, &mut rng);
        let lhs = sys.z_matrix().quad_form(&x).unwrap();
        let rhs = (stacked.transpose() * &x).norm_squared();
        assert!((lhs - rhs).abs() < 1e-12 * rhs);
    }

    #[test]
    fn measurement_functions_are_biorthogonal_to_detail_gamblets() {
        let (h, op) = fem(1, 4, CoefficientField::rough_1d());
        let sys = transform(&op, &h, 0.0).unwrap();
        for s in 1..=4 {
            for k in 1..=4 {
                let pairing = sys.phi_chi_fine(s) * sys.chi_fine(k).transpose();
                let expected = if s == k {
                    DMatrix::identity(pairing.nrows(), pairing.ncols())
                } else {
                    DMatrix::zeros(pairing.nrows(), pairing.ncols())
                };
                assert!((pairing - expected).amax() < 1e-8, "[phi^({s}), chi^({k})]");
            }
        }
    }

    #[test]
    fn block_conditioning_is_uniform() {
        let (h, op) = fem(1, 6, CoefficientField::rough_1d());
        let sys = transform(&op, &h, 0.0).unwrap();
        let conds = sys.b_conditions().unwrap();
        let (lo, hi) = conds
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(l, u), &c| (l.min(c), u.max(c)));
        assert!(hi / lo < 10.0, "{conds:?}");
    }

    #[test]
    fn level_three_gamblet_is_localized() {
        let q = 6;
        let (h, op) = fem(1, q, CoefficientField::rough_1d());
        let sys = transform(&op, &h, 0.0).unwrap();
        let psi = sys.psi_fine(3);
        let a_int = element_integrals_1d(&CoefficientField::rough_1d(), q);
        let n = 1usize << q;
        let hf = 1.0 / (n + 1) as f64;
        let i = 3;
        let center = (i as f64 + 0.5) / 8.0;
        let row: Vec<f64> = psi.row(i).iter().copied().collect();
        let tail = |radius: f64| -> f64 {
            (0..=n)
                .filter(|&e| {
                    let (x0, x1) = (e as f64 * hf, (e + 1) as f64 * hf);
                    (x0 - center).abs().min((x1 - center).abs()) > radius
                        && !(x0 <= center && center <= x1)
                })
                .map(|e| {
                    let left = if e >= 1 { row[e - 1] } else { 0.0 };
                    let right = if e < n { row[e] } else { 0.0 };
                    a_int[e] / (hf * hf) * (right - left).powi(2)
                })
                .sum()
        };
        let tails: Vec<f64> = (1..=4).map(|m| tail(m as f64 / 8.0)).collect();
        for pair in tails.windows(2) {
            assert!(pair[1] < pair[0], "{tails:?}");
        }
        assert!(tails[0] / tails[3] >= 1e3, "{tails:?}");
    }

    #[test]
    fn tiny_truncation_matches_exact() {
        for (dim, q) in [(1, 5), (2, 3)] {
            let field = if dim == 1 {
                CoefficientField::rough_1d()
            } else {
                CoefficientField::rough_2d()
            };
            let (h, op) = fem(dim, q, field);
            let exact = transform(&op, &h, 0.0).unwrap();
            let trunc = transform(&op, &h, 1e-12).unwrap();
            for k in 1..=q {
                assert!(rel_frobenius(trunc.a(k).matrix(), exact.a(k).matrix()) < 1e-8);
                assert!(rel_frobenius(trunc.b(k).matrix(), exact.b(k).matrix()) < 1e-8);
            }
            assert_eq!(trunc.trunc(), 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_operator() {
        let h = Hierarchy::build_dyadic(1, 3).unwrap();
        let h4 = Hierarchy::build_dyadic(1, 4).unwrap();
        let op = identity_op(&h4);
        assert!(matches!(
            transform(&op, &h, 0.0),
            Err(GambletError::DimensionMismatch {
                expected: 8,
                actual: 16
            })
        ));
        assert!(transform(&identity_op(&h), &h, -1.0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let (h, op) = fem(2, 3, CoefficientField::rough_2d());
        let sys = transform(&op, &h, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let hash = operator_hash(&op);
        sys.save(dir.path(), &hash).unwrap();
        let (back, manifest) = GambletSystem::load(dir.path()).unwrap();
        assert_eq!(manifest.operator_hash, hash);
        assert_eq!(manifest.sizes, vec![4, 16, 64]);
        for k in 1..=3 {
            assert_eq!(back.a(k), sys.a(k));
            assert_eq!(back.b(k), sys.b(k));
        }
        for k in 2..=3 {
            assert_eq!(back.n(k), sys.n(k));
            assert_eq!(back.r(k), sys.r(k));
        }
        fs::write(dir.path().join("hierarchy.json"), "{}").unwrap();
        assert!(GambletSystem::load(dir.path()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn invariants_hold_for_random_spd(q in 1usize..=4, seed in 0u64..1000) {
                let h = Hierarchy::build_dyadic(1, q).unwrap();
                let n = h.fine_size();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
                let a = SymMatrix::symmetrized(&g * g.transpose() + DMatrix::identity(n, n) * n as f64);
                let op = DiscreteOperator::from_matrix(a, q);
                let sys = transform(&op, &h, 0.0).unwrap();
                prop_assert!(sys.invariant_residual() < 1e-10);
                let y = random_vec(n, &mut rng);
                let back = sys.reconstruct(&sys.analyze(&y).unwrap(), q).unwrap();
                prop_assert!((back - &y).norm() <= 1e-9 * y.norm().max(1e-300));
                let f = random_vec(n, &mut rng);
                let x = sys.solve(&f).unwrap();
                let resid = op.stiffness.mul_vec(&x).unwrap() - &f;
                prop_assert!(resid.norm() <= 1e-9 * f.norm());
            }
        }
    }

    #[test]
    fn manifest_errors_name_the_field() {
        let good = r#"{"format":"gamblet-system/1","q":2,"sizes":[1,2],"trunc":"0","hierarchy_hash":"x","operator_hash":"y"}"#;
        assert_eq!(
            SystemManifest::from_json(good, "m").unwrap().sizes,
            vec![1, 2]
        );
        let cases = [
            (good.replace("\"q\":2", "\"q\":\"two\""), "`q`"),
            (good.replace("\"sizes\":[1,2]", "\"sizes\":[1]"), "`sizes`"),
            (good.replace(",\"trunc\":\"0\"", ""), "`trunc`"),
            (good.replace("gamblet-system/1", "other"), "`format`"),
            (
                good.replace("\"operator_hash\":\"y\"", "\"operator_hash\":3"),
                "`operator_hash`",
            ),
        ];
        for (text, name) in cases {
            let msg = SystemManifest::from_json(&text, "m")
                .unwrap_err()
                .to_string();
            assert!(msg.contains(name), "{msg}");
        }
    }
}
