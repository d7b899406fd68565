//! Dense symmetric linear algebra kernels and scalar statistics.
//!
//! Everything here is dense and sequential. Matrices are stored column-major
//! through `nalgebra`; [`SymMatrix`] additionally guarantees exact symmetry of
//! its entries so that quadratic forms and eigen-solvers see a truly symmetric
//! input.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::function::gamma::gamma_lr;

use crate::error::{check_dim, GambletError, Result};

pub type Vector = DVector<f64>;

/// Relative asymmetry accepted by [`SymMatrix::new`] before symmetrizing.
const SYMMETRY_TOL: f64 = 1e-9;
/// Pivot threshold relative to the largest diagonal entry.
const SPD_PIVOT_TOL: f64 = 1e-14;
/// Largest dimension for which [`extreme_eigs`] uses a full decomposition.
pub const FULL_EIGEN_LIMIT: usize = 512;

/// Dense symmetric matrix with exactly mirrored entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps a square matrix after checking it is symmetric up to round-off;
    /// the stored entries are the exact average of `m` and `mᵀ`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(GambletError::ShapeMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(GambletError::ShapeMismatch("empty symmetric matrix".into()));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let n = m.nrows();
        for j in 0..n {
            for i in 0..j {
                let diff = (m[(i, j)] - m[(j, i)]).abs();
                if !(diff <= SYMMETRY_TOL * scale) {
                    return Err(GambletError::NotSymmetric { i, j, diff });
                }
            }
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrizes without a tolerance check. Used for products such as
    /// `R A Rᵀ` whose asymmetry is pure round-off.
    pub(crate) fn symmetrized(mut m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        debug_assert_eq!(n, m.ncols());
        for j in 0..n {
            for i in 0..j {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        SymMatrix(m)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn mul_vec(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        Ok(&self.0 * x)
    }

    /// `xᵀ M x`.
    pub fn quad_form(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(x.dot(&(&self.0 * x)))
    }

    /// `P M Pᵀ` for the permutation sending index `i` to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_dim(self.dim(), perm.len())?;
        let n = self.dim();
        let m = DMatrix::from_fn(n, n, |i, j| self.0[(perm[i], perm[j])]);
        Ok(SymMatrix(m))
    }
}

/// Dense rectangular matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct RectMatrix(DMatrix<f64>);

impl RectMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if let Some(bad) = m.iter().find(|v| !v.is_finite()) {
            return Err(GambletError::ShapeMismatch(format!(
                "non-finite entry {bad}"
            )));
        }
        Ok(RectMatrix(m))
    }

    pub(crate) fn from_raw(m: DMatrix<f64>) -> Self {
        RectMatrix(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        RectMatrix(DMatrix::zeros(rows, cols))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn mul_vec(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.cols(), x.len())?;
        Ok(&self.0 * x)
    }

    /// `Mᵀ x`.
    pub fn tr_mul_vec(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.rows(), x.len())?;
        Ok(self.0.tr_mul(x))
    }
}

/// Cholesky factor of an SPD matrix, stored as the upper factor `U = Lᵀ`
/// (`A = Uᵀ U`) so the inner products of the factorization run over
/// contiguous columns.
#[derive(Clone, Debug)]
pub struct CholFactor {
    upper: DMatrix<f64>,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.upper.nrows()
    }

    /// The lower-triangular factor `L` with `L Lᵀ = A`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.upper.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.upper.tr_mul(&self.upper)
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        // Uᵀ y = b, column j of U holds row j of L.
        for j in 0..n {
            let col = self.upper.column(j);
            let mut s = b[j];
            for i in 0..j {
                s -= col[i] * b[i];
            }
            b[j] = s / col[j];
        }
        // U x = y, column-oriented back substitution.
        for j in (0..n).rev() {
            let col = self.upper.column(j);
            let xj = b[j] / col[j];
            b[j] = xj;
            for i in 0..j {
                b[i] -= col[i] * xj;
            }
        }
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), rhs.nrows())?;
        let mut out = rhs.clone();
        for mut col in out.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        Ok(out)
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.upper.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Cholesky factorization of an SPD matrix.
///
/// Fails with [`GambletError::NotSpd`] as soon as a pivot drops to
/// `1e-14 × max diagonal` or below.
pub fn cholesky(m: &SymMatrix) -> Result<CholFactor> {
    let a = m.matrix();
    let n = a.nrows();
    let max_diag = a.diagonal().iter().fold(0.0_f64, |acc, &d| acc.max(d));
    let threshold = SPD_PIVOT_TOL * max_diag;
    if !(max_diag > 0.0) {
        return Err(GambletError::NotSpd {
            row: 0,
            pivot: max_diag,
            threshold,
        });
    }
    let mut upper = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for i in 0..j {
            let (ci, cj) = (upper.column(i), upper.column(j));
            let dot: f64 = ci.rows(0, i).dot(&cj.rows(0, i));
            let val = (a[(i, j)] - dot) / upper[(i, i)];
            upper[(i, j)] = val;
        }
        let cj = upper.column(j);
        let sq = cj.rows(0, j).norm_squared();
        let pivot = a[(j, j)] - sq;
        if !(pivot > threshold) {
            return Err(GambletError::NotSpd {
                row: j,
                pivot,
                threshold,
            });
        }
        upper[(j, j)] = pivot.sqrt();
    }
    Ok(CholFactor { upper })
}

pub fn solve_spd(f: &CholFactor, b: &Vector) -> Result<Vector> {
    check_dim(f.dim(), b.len())?;
    let mut x = b.clone();
    f.solve_in_place(x.as_mut_slice());
    Ok(x)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
///
/// Matrices up to [`FULL_EIGEN_LIMIT`] use a full symmetric decomposition.
/// Larger ones use power iteration for the top of the spectrum and inverse
/// iteration (or a shifted power iteration when the matrix is not positive
/// definite) for the bottom.
pub fn extreme_eigs(m: &SymMatrix, tol: f64) -> Result<(f64, f64)> {
    extreme_eigs_with(m, tol, 20_000)
}

pub fn extreme_eigs_with(m: &SymMatrix, tol: f64, max_iter: usize) -> Result<(f64, f64)> {
    if m.dim() <= FULL_EIGEN_LIMIT {
        let eig = SymmetricEigen::new(m.matrix().clone());
        let min = eig.eigenvalues.min();
        let max = eig.eigenvalues.max();
        return Ok((min, max));
    }
    let a = m.matrix();
    let top = power_iteration(|x| a * x, m.dim(), tol, max_iter)?;
    match cholesky(m) {
        Ok(chol) => {
            let inv = power_iteration(
                |x| {
                    let mut y = x.clone();
                    chol.solve_in_place(y.as_mut_slice());
                    y
                },
                m.dim(),
                tol,
                max_iter,
            )?;
            let (lo, hi) = (1.0 / inv, top);
            Ok((lo.min(hi), hi.max(lo)))
        }
        Err(_) => {
            // Dominant eigenvalue may be negative; recover the other end by
            // shifting it to zero.
            let shift = top;
            let shifted = power_iteration(|x| a * x - x * shift, m.dim(), tol, max_iter)?;
            let other = shifted + shift;
            Ok((top.min(other), top.max(other)))
        }
    }
}

/// Rayleigh-quotient power iteration; returns the eigenvalue of largest
/// magnitude of the implicit operator.
fn power_iteration<F>(apply: F, n: usize, tol: f64, max_iter: usize) -> Result<f64>
where
    F: Fn(&Vector) -> Vector,
{
    // Deterministic start vector with no special symmetry.
    let mut x = Vector::from_fn(n, |i, _| {
        1.0 + ((i as f64 + 1.0) * 0.618_033_988_749).fract()
    });
    x.normalize_mut();
    let mut theta = 0.0_f64;
    for it in 0..max_iter {
        let y = apply(&x);
        let next = x.dot(&y);
        let norm = y.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        x = y / norm;
        if it > 2 && (next - theta).abs() <= 0.1 * tol * next.abs() {
            return Ok(next);
        }
        theta = next;
    }
    Err(GambletError::NoConvergence {
        iterations: max_iter,
    })
}

/// Full symmetric eigen-decomposition `M = Q diag(λ) Qᵀ`.
pub fn symmetric_eigen(m: &SymMatrix) -> (Vector, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.matrix().clone());
    (eig.eigenvalues, eig.eigenvectors)
}

/// Quantile of the chi-square distribution, by bisection on the regularized
/// lower incomplete gamma function.
pub fn chi_square_quantile(dof: usize, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(GambletError::InvalidProbability(p));
    }
    if dof == 0 {
        return Err(GambletError::InvalidConfig(
            "chi-square needs dof >= 1".into(),
        ));
    }
    let k = dof as f64 / 2.0;
    let cdf = |x: f64| gamma_lr(k, x / 2.0);
    let mut hi = dof as f64 + 1.0;
    while cdf(hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Mean and unbiased standard deviation; a single sample reports zero spread.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    v[lo] * (1.0 - t) + v[hi] * t
}

/// Formats like C's `%.17g`.
pub fn fmt_g17(x: f64) -> String {
    const P: i32 = 17;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("exponent digits");
    if exp < -4 || exp >= P {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (P - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&fmt_g17(m[(i, j)]));
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str, context: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| GambletError::parse(context, format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(GambletError::parse(
                    context,
                    format!(
                        "line {}: expected {} columns, got {}",
                        lineno + 1,
                        first.len(),
                        row.len()
                    ),
                ));
            }
        }
        rows.push(row);
    }
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, matrix_to_csv(m)).map_err(|e| GambletError::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| GambletError::io(path, e))?;
    matrix_from_csv(&text, &path.display().to_string())
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute error when `b` vanishes.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Human-readable one-line summary of a vector, for logs.
pub fn summarize(v: &Vector) -> String {
    let mut s = String::new();
    let _ = write!(s, "len={} norm={:.3e}", v.len(), v.norm());
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> SymMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::symmetrized(&g * g.transpose() + DMatrix::identity(n, n) * n as f64 * 0.1)
    }

    #[test]
    fn cholesky_identity_and_diagonal() {
        let f = cholesky(&SymMatrix::identity(3)).unwrap();
        assert_eq!(f.lower(), DMatrix::identity(3, 3));
        let f = cholesky(&SymMatrix::from_diagonal(&[4.0, 9.0])).unwrap();
        assert_eq!(
            f.lower(),
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))
        );
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let a = random_spd(10, 7);
        let f = cholesky(&a).unwrap();
        assert!(rel_frobenius(&f.reconstruct(), a.matrix()) < 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite_and_semidefinite() {
        let m = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert!(matches!(
            cholesky(&m),
            Err(GambletError::NotSpd { row: 1, .. })
        ));
        let singular =
            SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!(matches!(
            cholesky(&singular),
            Err(GambletError::NotSpd { .. })
        ));
    }

    #[test]
    fn solve_trivial_cases() {
        let f = cholesky(&SymMatrix::identity(3)).unwrap();
        let b = Vector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(solve_spd(&f, &b).unwrap(), b);
        let f = cholesky(&SymMatrix::from_diagonal(&[2.0, 4.0])).unwrap();
        let x = solve_spd(&f, &Vector::from_vec(vec![2.0, 4.0])).unwrap();
        assert!((x - Vector::from_vec(vec![1.0, 1.0])).amax() < 1e-15);
        assert!(matches!(
            solve_spd(&f, &Vector::zeros(3)),
            Err(GambletError::DimensionMismatch {
                expected: 2,
                actual: 3
            })
        ));
    }

    #[test]
    fn solve_tridiagonal_matches_explicit_inverse() {
        // (tridiag(-1,2,-1))^{-1}_{ij} = min(i,j) (n+1-max(i,j)) / (n+1), 1-based.
        let n = 8;
        let m = DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
            0 => 2.0,
            1 => -1.0,
            _ => 0.0,
        });
        let f = cholesky(&SymMatrix::new(m).unwrap()).unwrap();
        let mut e1 = Vector::zeros(n);
        e1[0] = 1.0;
        let x = solve_spd(&f, &e1).unwrap();
        for i in 0..n {
            let expected = (n - i) as f64 / (n + 1) as f64;
            assert!(
                (x[i] - expected).abs() < 1e-13,
                "{i}: {} vs {expected}",
                x[i]
            );
        }
    }

    #[test]
    fn extreme_eigs_examples() {
        let (lo, hi) = extreme_eigs(&SymMatrix::identity(5), 1e-10).unwrap();
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        let (lo, hi) = extreme_eigs(&SymMatrix::from_diagonal(&[1.0, 3.0, 7.0]), 1e-10).unwrap();
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 7.0).abs() < 1e-12);
        // det([[2-x,1],[1,2-x]]) = (x-1)(x-3)
        let m = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let (lo, hi) = extreme_eigs(&m, 1e-10).unwrap();
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 3.0).abs() < 1e-12);
    }

    #[test]
    fn iterative_path_matches_full_decomposition() {
        let n = 600;
        let d: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let mut m = DMatrix::from_diagonal(&DVector::from_vec(d));
        for i in 0..n - 1 {
            m[(i, i + 1)] = 0.3;
            m[(i + 1, i)] = 0.3;
        }
        let sym = SymMatrix::new(m).unwrap();
        let (lo, hi) = extreme_eigs(&sym, 1e-10).unwrap();
        let (vals, _) = symmetric_eigen(&sym);
        assert!((lo - vals.min()).abs() / vals.min() < 1e-8);
        assert!((hi - vals.max()).abs() / vals.max() < 1e-8);
    }

    #[test]
    fn chi_square_closed_forms() {
        let x = chi_square_quantile(1, 0.95).unwrap();
        assert!((x - 3.8415).abs() < 1e-3);
        let x = chi_square_quantile(2, 1.0 - (-1.0f64).exp()).unwrap();
        assert!((x - 2.0).abs() < 1e-10);
        assert!(matches!(
            chi_square_quantile(3, 1.0),
            Err(GambletError::InvalidProbability(_))
        ));
    }

    #[test]
    fn chi_square_large_dof_against_wilson_hilferty() {
        let k = 1024.0_f64;
        let z = 1.644_853_626_951_472_2; // standard normal 0.95 quantile
        let c = 2.0 / (9.0 * k);
        let wh = k * (1.0 - c + z * c.sqrt()).powi(3);
        let x = chi_square_quantile(1024, 0.95).unwrap();
        assert!((x - wh).abs() / wh < 0.005);
    }

    #[test]
    fn chi_square_monotone_in_p() {
        let mut prev = 0.0;
        for i in 1..50 {
            let x = chi_square_quantile(7, i as f64 / 50.0).unwrap();
            assert!(x > prev);
            prev = x;
        }
    }

    #[test]
    fn g17_matches_c_formatting() {
        assert_eq!(fmt_g17(0.1), "0.10000000000000001");
        assert_eq!(fmt_g17(1.0), "1");
        assert_eq!(fmt_g17(-2.5), "-2.5");
        assert_eq!(fmt_g17(1e-5), "1.0000000000000001e-05");
        assert_eq!(fmt_g17(1e20), "1e+20");
        assert_eq!(fmt_g17(123456.0), "123456");
        assert_eq!(fmt_g17(0.0), "0");
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let a = random_spd(6, 3);
        let back = matrix_from_csv(&matrix_to_csv(a.matrix()), "test").unwrap();
        assert_eq!(&back, a.matrix());
    }

    #[test]
    fn non_symmetric_input_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(
            SymMatrix::new(m),
            Err(GambletError::NotSymmetric { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn solve_round_trips(n in 1usize..=64, seed in any::<u64>()) {
                let a = random_spd(n, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
                let x = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let b = a.mul_vec(&x).unwrap();
                let back = solve_spd(&cholesky(&a).unwrap(), &b).unwrap();
                prop_assert!((back - &x).norm() <= 1e-9 * x.norm().max(1e-300));
            }

            #[test]
            fn eigs_permutation_invariant(n in 2usize..=40, seed in any::<u64>()) {
                let a = random_spd(n, seed);
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in (1..n).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let (lo, hi) = extreme_eigs(&a, 1e-10).unwrap();
                let (plo, phi) = extreme_eigs(&a.permuted(&perm).unwrap(), 1e-10).unwrap();
                prop_assert!((lo - plo).abs() <= 1e-10 * lo.abs().max(hi.abs()));
                prop_assert!((hi - phi).abs() <= 1e-10 * hi.abs());
            }
        }
    }
}
