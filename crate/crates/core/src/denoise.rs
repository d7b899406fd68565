//! Recovery of a solution `u` from noisy fine measurements `η = u + ζ`.
//!
//! Four estimators share one trial harness:
//!
//! * the near-minimax level filter `η^(l†)`, keeping the first `l†` levels of
//!   the gamblet decomposition;
//! * hard and soft thresholding of the gamblet coefficients with thresholds
//!   `t_k = h^{-2ks} t₀`;
//! * energy-norm regularization `x = (αA + I)^{-1} y`, with `α` fixed by the
//!   constraint `|x − y| = γ`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GambletError, Result};
use crate::gamblets::{energy_norm, GambletSystem, MultiresCoefficients};
use crate::hierarchy::Hierarchy;
use crate::numerics::{
    chi_square_quantile, cholesky, mean_std, quantile, symmetric_eigen, CholFactor, RectMatrix,
    Vector,
};
use crate::operators::{measurement_overlap, DiscreteOperator};

/// Default confidence level for the regularization radius `γ`.
pub const DEFAULT_CONFIDENCE: f64 = 0.95;
/// Number of points in the threshold tuning grid.
pub const THRESHOLD_GRID_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NearMinimax,
    HardThreshold,
    SoftThreshold,
    Regularization,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::NearMinimax,
        Method::HardThreshold,
        Method::SoftThreshold,
        Method::Regularization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::NearMinimax => "near-minimax",
            Method::HardThreshold => "hard-threshold",
            Method::SoftThreshold => "soft-threshold",
            Method::Regularization => "regularization",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = GambletError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| GambletError::InvalidConfig(format!("unknown method '{s}'")))
    }
}

/// Model parameters of a denoising problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub h: f64,
    pub s: usize,
    pub d: usize,
    pub q: usize,
    pub sigma: f64,
    /// Prior bound `M` on `‖L u‖_{L²}`.
    pub m: f64,
    /// Confidence level used for the regularization radius.
    pub confidence: f64,
}

impl DenoiseConfig {
    pub fn new(d: usize, q: usize, sigma: f64, m: f64) -> Result<Self> {
        let cfg = DenoiseConfig {
            h: 0.5,
            s: 1,
            d,
            q,
            sigma,
            m,
            confidence: DEFAULT_CONFIDENCE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GambletError::InvalidConfig(msg));
        if self.q < 1 {
            return Err(GambletError::InvalidLevels(self.q));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return bad(format!("M must be > 0, got {}", self.m));
        }
        if !(self.h > 0.0 && self.h < 1.0) {
            return bad(format!("h must lie in (0, 1), got {}", self.h));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(GambletError::InvalidProbability(self.confidence));
        }
        Ok(())
    }
}

/// `β_0, …, β_q` for scale ratio `h`, order `s` and dimension `d`.
pub fn level_scores_with(h: f64, s: f64, d: f64, q: usize, sigma: f64, m: f64) -> Vec<f64> {
    let noise = |l: usize| sigma * sigma * h.powf(-(2.0 * s + d) * l as f64);
    let bias = |l: usize| h.powf(2.0 * s * (l as f64 + 1.0)) * m * m;
    (0..=q)
        .map(|l| {
            if l == 0 {
                h.powf(2.0 * s) * m * m
            } else if l == q {
                noise(l)
            } else {
                noise(l) + bias(l)
            }
        })
        .collect()
}

/// Index of the smallest score, ties going to the smaller index.
pub(crate) fn argmin_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (l, &b) in scores.iter().enumerate() {
        if b < scores[best] {
            best = l;
        }
    }
    best
}

pub fn level_scores(cfg: &DenoiseConfig) -> Vec<f64> {
    level_scores_with(cfg.h, cfg.s as f64, cfg.d as f64, cfg.q, cfg.sigma, cfg.m)
}

/// `l† = argmin_l β_l`, ties broken toward the smaller level.
pub fn select_level(cfg: &DenoiseConfig) -> usize {
    argmin_first(&level_scores(cfg))
}

/// A recovered fine vector with its diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseResult {
    pub recovered: Vector,
    /// Level kept by the level filter.
    pub level: Option<usize>,
    /// Regularization parameter, when one was solved for.
    pub alpha: Option<f64>,
    /// `c^(k),T B^(k) c^(k)` of the recovery, per level (empty when no
    /// gamblet system was involved).
    pub level_energies: Vec<f64>,
    /// Energy norm of the recovery.
    pub energy: f64,
}

fn result_from_coefficients(
    sys: &GambletSystem,
    recovered: Vector,
    c: &MultiresCoefficients,
    level: Option<usize>,
) -> Result<DenoiseResult> {
    let level_energies = sys.level_energies(c)?;
    let energy = level_energies.iter().sum::<f64>().max(0.0).sqrt();
    Ok(DenoiseResult {
        recovered,
        level,
        alpha: None,
        level_energies,
        energy,
    })
}

/// `η^(l) = Σ_{k ≤ l} χ^(k),T c^(k)(η)`; `l = q` returns `y` itself and
/// `l = 0` returns zero.
pub fn level_filter(sys: &GambletSystem, y: &Vector, l: usize) -> Result<DenoiseResult> {
    if l > sys.q() {
        return Err(GambletError::BadLevel {
            level: l,
            q: sys.q(),
        });
    }
    let mut c = sys.analyze(y)?;
    for k in l + 1..=sys.q() {
        c.level_mut(k).fill(0.0);
    }
    let recovered = if l == sys.q() {
        y.clone()
    } else {
        sys.reconstruct(&c, l)?
    };
    result_from_coefficients(sys, recovered, &c, Some(l))
}

/// `H^β(x)`: keep `x` when `|x| > β`.
pub fn hard(x: f64, beta: f64) -> f64 {
    if x.abs() > beta {
        x
    } else {
        0.0
    }
}

/// `S^β(x)`: shrink `x` toward zero by `β`.
pub fn soft(x: f64, beta: f64) -> f64 {
    if x.abs() > beta {
        x - beta * x.signum()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    Hard,
    Soft,
}

impl ThresholdRule {
    fn apply(self, x: f64, beta: f64) -> f64 {
        match self {
            ThresholdRule::Hard => hard(x, beta),
            ThresholdRule::Soft => soft(x, beta),
        }
    }
}

/// How per-level thresholds derive from `t₀`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdSchedule {
    /// `t_k = h^{-2ks} t₀`.
    PowerLaw { h: f64, s: f64 },
    /// `t_k = t₀` on every level.
    Constant,
}

impl ThresholdSchedule {
    pub fn level_threshold(self, k: usize, t0: f64) -> f64 {
        match self {
            ThresholdSchedule::PowerLaw { h, s } => h.powf(-2.0 * s * k as f64) * t0,
            ThresholdSchedule::Constant => t0,
        }
    }
}

fn thresholded(
    c: &MultiresCoefficients,
    t0: f64,
    schedule: ThresholdSchedule,
    rule: ThresholdRule,
) -> MultiresCoefficients {
    let levels = c
        .levels()
        .iter()
        .enumerate()
        .map(|(idx, v)| {
            let t = schedule.level_threshold(idx + 1, t0);
            v.map(|x| rule.apply(x, t))
        })
        .collect();
    MultiresCoefficients::new(levels)
}

/// Thresholds the coefficients of `y` and reconstructs; `t₀ = 0` returns `y`.
pub fn threshold_recover(
    sys: &GambletSystem,
    y: &Vector,
    t0: f64,
    schedule: ThresholdSchedule,
    rule: ThresholdRule,
) -> Result<DenoiseResult> {
    if !(t0 >= 0.0) {
        return Err(GambletError::InvalidConfig(format!(
            "threshold must be >= 0, got {t0}"
        )));
    }
    let c = sys.analyze(y)?;
    if t0 == 0.0 {
        return result_from_coefficients(sys, y.clone(), &c, None);
    }
    let kept = thresholded(&c, t0, schedule, rule);
    let recovered = sys.reconstruct(&kept, sys.q())?;
    result_from_coefficients(sys, recovered, &kept, None)
}

pub fn hard_threshold(
    sys: &GambletSystem,
    y: &Vector,
    t0: f64,
    cfg: &DenoiseConfig,
) -> Result<DenoiseResult> {
    let schedule = ThresholdSchedule::PowerLaw {
        h: cfg.h,
        s: cfg.s as f64,
    };
    threshold_recover(sys, y, t0, schedule, ThresholdRule::Hard)
}

pub fn soft_threshold(
    sys: &GambletSystem,
    y: &Vector,
    t0: f64,
    cfg: &DenoiseConfig,
) -> Result<DenoiseResult> {
    let schedule = ThresholdSchedule::PowerLaw {
        h: cfg.h,
        s: cfg.s as f64,
    };
    threshold_recover(sys, y, t0, schedule, ThresholdRule::Soft)
}

/// 16 log-spaced values spanning `[1e-2, 1e2] × σ h^{2s}`.
pub fn threshold_grid(cfg: &DenoiseConfig) -> Vec<f64> {
    log_grid(cfg.sigma * cfg.h.powf(2.0 * cfg.s as f64))
}

pub(crate) fn log_grid(scale: f64) -> Vec<f64> {
    (0..THRESHOLD_GRID_LEN)
        .map(|i| scale * 10f64.powf(-2.0 + 4.0 * i as f64 / (THRESHOLD_GRID_LEN - 1) as f64))
        .collect()
}

/// Energy-norm regularization with a precomputed eigendecomposition
/// `A = Q Λ Qᵀ`, so every `α` costs two products with `Q`.
pub struct Regularizer {
    eigenvalues: Vector,
    eigenvectors: DMatrix<f64>,
}

/// Output of [`Regularizer::solve`].
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizeOutcome {
    pub x: Vector,
    /// `None` when `|y| ≤ γ` and the recovery is zero.
    pub alpha: Option<f64>,
    /// `g(α) = |x − y|` at the returned `α`.
    pub g: f64,
}

const ALPHA_CEILING: f64 = 1e300;
const BISECTION_STEPS: usize = 400;

impl Regularizer {
    pub fn new(op: &DiscreteOperator) -> Self {
        let (eigenvalues, eigenvectors) = symmetric_eigen(&op.stiffness);
        Regularizer {
            eigenvalues,
            eigenvectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `γ = σ √(χ²_N quantile at p)`.
    pub fn gamma(sigma: f64, n: usize, p: f64) -> Result<f64> {
        Ok(sigma * chi_square_quantile(n, p)?.sqrt())
    }

    fn g(&self, alpha: f64, y_hat: &Vector) -> f64 {
        self.eigenvalues
            .iter()
            .zip(y_hat.iter())
            .map(|(&lam, &yh)| {
                let w = alpha * lam / (alpha * lam + 1.0);
                (w * yh).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Solves `min xᵀAx` subject to `|x − y| ≤ γ`: zero when `|y| ≤ γ`,
    /// `y` itself when `γ = 0`, otherwise `x = (αA + I)^{-1} y` with `|x − y| = γ` to relative
    /// accuracy `1e-10`.
    pub fn solve(&self, y: &Vector, gamma: f64) -> Result<RegularizeOutcome> {
        check_dim(self.dim(), y.len())?;
        if y.norm() <= gamma {
            return Ok(RegularizeOutcome {
                x: Vector::zeros(y.len()),
                alpha: None,
                g: y.norm(),
            });
        }
        if gamma == 0.0 {
            return Ok(RegularizeOutcome {
                x: y.clone(),
                alpha: Some(0.0),
                g: 0.0,
            });
        }
        let y_hat = self.eigenvectors.tr_mul(y);
        let mut hi = 1.0;
        while self.g(hi, &y_hat) < gamma {
            hi *= 2.0;
            if hi > ALPHA_CEILING {
                return Err(GambletError::NoBracket {
                    reached: self.g(hi, &y_hat),
                    gamma,
                });
            }
        }
        let mut lo = 0.0;
        let mut alpha = hi;
        let mut g = self.g(hi, &y_hat);
        for _ in 0..BISECTION_STEPS {
            if (g - gamma).abs() <= 1e-10 * gamma {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let gm = self.g(mid, &y_hat);
            if gm < gamma {
                lo = mid;
            } else {
                hi = mid;
            }
            alpha = mid;
            g = gm;
        }
        if (g - gamma).abs() > 1e-10 * gamma {
            return Err(GambletError::NoConvergence {
                iterations: BISECTION_STEPS,
            });
        }
        let scaled = Vector::from_iterator(
            y_hat.len(),
            self.eigenvalues
                .iter()
                .zip(y_hat.iter())
                .map(|(&lam, &yh)| yh / (alpha * lam + 1.0)),
        );
        let x = &self.eigenvectors * scaled;
        Ok(RegularizeOutcome {
            x,
            alpha: Some(alpha),
            g,
        })
    }
}

/// Regularized recovery with `γ² = σ² χ²_N(p)`.
pub fn regularize(op: &DiscreteOperator, y: &Vector, sigma: f64, p: f64) -> Result<DenoiseResult> {
    let gamma = Regularizer::gamma(sigma, y.len(), p)?;
    let out = Regularizer::new(op).solve(y, gamma)?;
    let energy = energy_norm(op, &out.x)?;
    Ok(DenoiseResult {
        recovered: out.x,
        level: None,
        alpha: out.alpha,
        level_energies: Vec::new(),
        energy,
    })
}

/// Everything needed to run trials on one operator: the gamblet system, the
/// overlap matrix mapping fine measurement coefficients to loads, a direct
/// factorization, and a lazily built regularizer.
pub struct DenoiseSetup {
    pub op: DiscreteOperator,
    pub system: GambletSystem,
    pub overlap: RectMatrix,
    chol: CholFactor,
    regularizer: OnceLock<Regularizer>,
}

impl DenoiseSetup {
    pub fn new(op: DiscreteOperator, system: GambletSystem) -> Result<Self> {
        let overlap = measurement_overlap(system.hierarchy(), &op)?;
        let chol = cholesky(&op.stiffness)?;
        Ok(DenoiseSetup {
            op,
            system,
            overlap,
            chol,
            regularizer: OnceLock::new(),
        })
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        self.system.hierarchy()
    }

    pub fn fine_size(&self) -> usize {
        self.system.fine_size()
    }

    pub fn regularizer(&self) -> &Regularizer {
        self.regularizer.get_or_init(|| Regularizer::new(&self.op))
    }

    /// `u = A^{-1} O f` for fine measurement coefficients `f`.
    pub fn solution(&self, f: &Vector) -> Result<Vector> {
        let mut load = self.overlap.mul_vec(f)?;
        self.chol.solve_in_place(load.as_mut_slice());
        Ok(load)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalSource {
    /// Uniform on the unit sphere of fine coefficients.
    RandomSphere,
    /// Cell averages of `sin(πx)/x` (with value `π` at 0).
    Smooth1d,
    /// Cell averages of `cos(3x + y) + sin(3y) + sin(7x − 5y)`.
    Smooth2d,
    /// The same coefficient vector in every trial.
    Fixed(Vec<f64>),
}

impl SignalSource {
    pub fn is_random(&self) -> bool {
        matches!(self, SignalSource::RandomSphere)
    }
}

pub fn smooth_1d(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        std::f64::consts::PI * (1.0 - (std::f64::consts::PI * x).powi(2) / 6.0)
    } else {
        (std::f64::consts::PI * x).sin() / x
    }
}

pub fn smooth_2d(x: f64, y: f64) -> f64 {
    (3.0 * x + y).cos() + (3.0 * y).sin() + (7.0 * x - 5.0 * y).sin()
}

const GAUSS5: [(f64, f64); 5] = [
    (0.046_910_077_030_668, 0.118_463_442_528_094_5),
    (0.230_765_344_947_158_5, 0.239_314_335_249_683_2),
    (0.5, 0.284_444_444_444_444_4),
    (0.769_234_655_052_841_5, 0.239_314_335_249_683_2),
    (0.953_089_922_969_332, 0.118_463_442_528_094_5),
];

/// Fine coefficients `[f, φ_j^(q)] = |τ_j|^{1/2} · mean_{τ_j} f` of a smooth
/// function on the dyadic cells, with 5-point Gauss averages per axis.
pub fn cell_coefficients(hierarchy: &Hierarchy, f: impl Fn(f64, f64) -> f64) -> Result<Vector> {
    let n = 1usize << hierarchy.q();
    let cell = 1.0 / n as f64;
    let avg = |x0: f64, y0: Option<f64>| -> f64 {
        match y0 {
            None => GAUSS5.iter().map(|&(t, w)| w * f(x0 + t * cell, 0.0)).sum(),
            Some(y0) => GAUSS5
                .iter()
                .flat_map(|&(s, ws)| GAUSS5.iter().map(move |&(t, wt)| (s, t, ws * wt)))
                .map(|(s, t, w)| w * f(x0 + s * cell, y0 + t * cell))
                .sum(),
        }
    };
    let vols = hierarchy.cell_volumes(hierarchy.q());
    match hierarchy.dim() {
        1 => Ok(Vector::from_fn(n, |j, _| {
            vols[j].sqrt() * avg(j as f64 * cell, None)
        })),
        2 => Ok(Vector::from_fn(n * n, |j, _| {
            let (ix, iy) = (j % n, j / n);
            vols[j].sqrt() * avg(ix as f64 * cell, Some(iy as f64 * cell))
        })),
        d => Err(GambletError::UnsupportedDim(d)),
    }
}

/// Draws (or evaluates) the fine coefficients `f` and the solution `u`.
pub fn gen_signal<R: Rng + ?Sized>(
    setup: &DenoiseSetup,
    source: &SignalSource,
    rng: &mut R,
) -> Result<(Vector, Vector)> {
    let n = setup.fine_size();
    let f = match source {
        SignalSource::RandomSphere => {
            let g = Vector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = g.norm();
            g / norm
        }
        SignalSource::Smooth1d => cell_coefficients(setup.hierarchy(), |x, _| smooth_1d(x))?,
        SignalSource::Smooth2d => cell_coefficients(setup.hierarchy(), smooth_2d)?,
        SignalSource::Fixed(v) => {
            check_dim(n, v.len())?;
            Vector::from_column_slice(v)
        }
    };
    let u = setup.solution(&f)?;
    Ok((f, u))
}

/// `η = u + z` with `z_i ~ N(0, σ²)` independent.
pub fn add_noise<R: Rng + ?Sized>(u: &Vector, sigma: f64, rng: &mut R) -> Vector {
    Vector::from_fn(u.len(), |i, _| {
        u[i] + sigma * rng.sample::<f64, _>(StandardNormal)
    })
}

/// `(√((v−u)ᵀA(v−u)), √((v−u)ᵀ M (v−u)))`.
pub fn errors(op: &DiscreteOperator, u: &Vector, v: &Vector) -> Result<(f64, f64)> {
    check_dim(u.len(), v.len())?;
    let e = v - u;
    Ok((energy_norm(op, &e)?, op.mass.quad_form(&e)?.max(0.0).sqrt()))
}

/// Per-trial generator: stream `trial` of ChaCha8 seeded with `seed`.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Which estimators a trial run evaluates and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub methods: Vec<Method>,
    /// Level kept by the near-minimax filter.
    pub level: usize,
    pub sigma: f64,
    pub schedule: ThresholdSchedule,
    /// Candidate `t₀` values for oracle tuning of the threshold methods.
    pub grid: Vec<f64>,
    pub confidence: f64,
    pub signal: SignalSource,
}

impl TrialPlan {
    pub fn from_config(cfg: &DenoiseConfig, signal: SignalSource) -> Self {
        TrialPlan {
            methods: Method::ALL.to_vec(),
            level: select_level(cfg),
            sigma: cfg.sigma,
            schedule: ThresholdSchedule::PowerLaw {
                h: cfg.h,
                s: cfg.s as f64,
            },
            grid: threshold_grid(cfg),
            confidence: cfg.confidence,
            signal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: Method,
    pub energy_avg: f64,
    pub energy_std: f64,
    pub l2_avg: f64,
    pub l2_std: f64,
    /// Tuned `t₀` for threshold methods.
    pub t0: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub trials: usize,
    pub seed: u64,
    pub level: usize,
    pub methods: Vec<MethodStats>,
    pub noise_energy_avg: f64,
    pub noise_energy_std: f64,
    /// Energy norm of `u`, averaged over trials.
    pub signal_energy_avg: f64,
}

impl TrialStats {
    pub fn method(&self, m: Method) -> Option<&MethodStats> {
        self.methods.iter().find(|s| s.method == m)
    }
}

/// Errors of a trial for every method (threshold methods: one entry per grid
/// value).
struct TrialOutcome {
    errors: Vec<Vec<(f64, f64)>>,
    noise_energy: f64,
    signal_energy: f64,
}

/// Errors of the thresholded recoveries of `c_eta` against `u`, one per grid
/// value.
fn threshold_errors(
    setup: &DenoiseSetup,
    eta: &Vector,
    c_eta: &MultiresCoefficients,
    u: &Vector,
    grid: &[f64],
    schedule: ThresholdSchedule,
    rule: ThresholdRule,
) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&t0| {
            let v = if t0 == 0.0 {
                eta.clone()
            } else {
                setup
                    .system
                    .reconstruct(&thresholded(c_eta, t0, schedule, rule), setup.system.q())?
            };
            errors(&setup.op, u, &v)
        })
        .collect()
}

fn run_trial(
    setup: &DenoiseSetup,
    plan: &TrialPlan,
    gamma: f64,
    seed: u64,
    trial: usize,
) -> Result<TrialOutcome> {
    let mut rng = trial_rng(seed, trial);
    let (_, u) = gen_signal(setup, &plan.signal, &mut rng)?;
    let eta = add_noise(&u, plan.sigma, &mut rng);
    let noise_energy = energy_norm(&setup.op, &(&eta - &u))?;
    let c_eta = setup.system.analyze(&eta)?;
    let mut out = Vec::with_capacity(plan.methods.len());
    for &method in &plan.methods {
        let errs = match method {
            Method::NearMinimax => {
                let v = level_filter(&setup.system, &eta, plan.level)?.recovered;
                vec![errors(&setup.op, &u, &v)?]
            }
            Method::HardThreshold => threshold_errors(
                setup,
                &eta,
                &c_eta,
                &u,
                &plan.grid,
                plan.schedule,
                ThresholdRule::Hard,
            )?,
            Method::SoftThreshold => threshold_errors(
                setup,
                &eta,
                &c_eta,
                &u,
                &plan.grid,
                plan.schedule,
                ThresholdRule::Soft,
            )?,
            Method::Regularization => {
                let x = setup.regularizer().solve(&eta, gamma)?.x;
                vec![errors(&setup.op, &u, &x)?]
            }
        };
        out.push(errs);
    }
    Ok(TrialOutcome {
        errors: out,
        noise_energy,
        signal_energy: energy_norm(&setup.op, &u)?,
    })
}

fn regularization_gamma(setup: &DenoiseSetup, plan: &TrialPlan) -> Result<f64> {
    if plan.methods.contains(&Method::Regularization) {
        Regularizer::gamma(plan.sigma, setup.fine_size(), plan.confidence)
    } else {
        Ok(0.0)
    }
}

/// Runs `n_trials` independent realizations (parallel over trials, ordered
/// aggregation) and reports error statistics for every planned method.
/// Threshold methods report the grid value with the smallest mean energy
/// error over these same trials.
pub fn run_trials(
    setup: &DenoiseSetup,
    plan: &TrialPlan,
    n_trials: usize,
    seed: u64,
) -> Result<TrialStats> {
    if n_trials == 0 {
        return Err(GambletError::InvalidConfig(
            "at least one trial is required".into(),
        ));
    }
    if n_trials == 1 {
        log::warn!("a single trial gives no spread; standard deviations are reported as 0");
    }
    let needs_grid = plan
        .methods
        .iter()
        .any(|m| matches!(m, Method::HardThreshold | Method::SoftThreshold));
    if needs_grid && plan.grid.is_empty() {
        return Err(GambletError::EmptyGrid);
    }
    let gamma = regularization_gamma(setup, plan)?;
    let outcomes: Vec<TrialOutcome> = (0..n_trials)
        .into_par_iter()
        .map(|t| run_trial(setup, plan, gamma, seed, t))
        .collect::<Result<_>>()?;
    let mut methods = Vec::with_capacity(plan.methods.len());
    for (mi, &method) in plan.methods.iter().enumerate() {
        let columns = outcomes[0].errors[mi].len();
        let mean_energy =
            |c: usize| outcomes.iter().map(|o| o.errors[mi][c].0).sum::<f64>() / n_trials as f64;
        let best = argmin_first(&(0..columns).map(mean_energy).collect::<Vec<_>>());
        let energy: Vec<f64> = outcomes.iter().map(|o| o.errors[mi][best].0).collect();
        let l2: Vec<f64> = outcomes.iter().map(|o| o.errors[mi][best].1).collect();
        let (energy_avg, energy_std) = mean_std(&energy);
        let (l2_avg, l2_std) = mean_std(&l2);
        let t0 = matches!(method, Method::HardThreshold | Method::SoftThreshold)
            .then(|| plan.grid[best]);
        methods.push(MethodStats {
            method,
            energy_avg,
            energy_std,
            l2_avg,
            l2_std,
            t0,
        });
    }
    let noise: Vec<f64> = outcomes.iter().map(|o| o.noise_energy).collect();
    let (noise_energy_avg, noise_energy_std) = mean_std(&noise);
    let signal_energy_avg = outcomes.iter().map(|o| o.signal_energy).sum::<f64>() / n_trials as f64;
    Ok(TrialStats {
        trials: n_trials,
        seed,
        level: plan.level,
        methods,
        noise_energy_avg,
        noise_energy_std,
        signal_energy_avg,
    })
}

/// `t₀` from `grid` minimizing the mean energy error of the thresholded
/// recovery over the given `(u, η)` pairs; ties go to the earlier grid value.
pub fn tune_threshold(
    setup: &DenoiseSetup,
    pairs: &[(Vector, Vector)],
    grid: &[f64],
    schedule: ThresholdSchedule,
    rule: ThresholdRule,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(GambletError::EmptyGrid);
    }
    let mut totals = vec![0.0; grid.len()];
    for (u, eta) in pairs {
        let c = setup.system.analyze(eta)?;
        for (t, (e, _)) in threshold_errors(setup, eta, &c, u, grid, schedule, rule)?
            .into_iter()
            .enumerate()
        {
            totals[t] += e;
        }
    }
    Ok(grid[argmin_first(&totals)])
}

/// One realization with every method's recovery, for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub f: Vector,
    pub u: Vector,
    pub eta: Vector,
    pub recoveries: Vec<(Method, Vector)>,
}

/// Recomputes trial `trial` of a run, applying the tuned thresholds from
/// `stats`.
pub fn realization(
    setup: &DenoiseSetup,
    plan: &TrialPlan,
    stats: &TrialStats,
    seed: u64,
    trial: usize,
) -> Result<Realization> {
    let mut rng = trial_rng(seed, trial);
    let (f, u) = gen_signal(setup, &plan.signal, &mut rng)?;
    let eta = add_noise(&u, plan.sigma, &mut rng);
    let gamma = regularization_gamma(setup, plan)?;
    let mut recoveries = Vec::new();
    for &method in &plan.methods {
        let t0 = stats.method(method).and_then(|s| s.t0).unwrap_or(0.0);
        let v = match method {
            Method::NearMinimax => level_filter(&setup.system, &eta, plan.level)?.recovered,
            Method::HardThreshold => {
                threshold_recover(&setup.system, &eta, t0, plan.schedule, ThresholdRule::Hard)?
                    .recovered
            }
            Method::SoftThreshold => {
                threshold_recover(&setup.system, &eta, t0, plan.schedule, ThresholdRule::Soft)?
                    .recovered
            }
            Method::Regularization => setup.regularizer().solve(&eta, gamma)?.x,
        };
        recoveries.push((method, v));
    }
    Ok(Realization {
        f,
        u,
        eta,
        recoveries,
    })
}

/// Samples of `‖η^(l†)‖ − ‖u‖` and their empirical 0.95 quantile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthCheck {
    pub level: usize,
    pub quantile_95: f64,
    pub excess: Vec<f64>,
    /// Trials violating `‖η^(l)‖ ≤ ‖u‖ + ‖ζ^(l)‖` beyond round-off.
    pub triangle_violations: usize,
}

/// Energy growth of the near-minimax recovery over `n_trials` realizations.
pub fn energy_growth_check(
    setup: &DenoiseSetup,
    cfg: &DenoiseConfig,
    signal: &SignalSource,
    n_trials: usize,
    seed: u64,
) -> Result<GrowthCheck> {
    let level = select_level(cfg);
    if level == 0 {
        return Err(GambletError::LevelZero);
    }
    let samples: Vec<(f64, bool)> = (0..n_trials)
        .into_par_iter()
        .map(|t| -> Result<(f64, bool)> {
            let mut rng = trial_rng(seed, t);
            let (_, u) = gen_signal(setup, signal, &mut rng)?;
            let eta = add_noise(&u, cfg.sigma, &mut rng);
            let v = level_filter(&setup.system, &eta, level)?;
            let zeta = level_filter(&setup.system, &(&eta - &u), level)?;
            let u_norm = energy_norm(&setup.op, &u)?;
            let ok = v.energy <= u_norm + zeta.energy + 1e-9 * (u_norm + zeta.energy);
            Ok((v.energy - u_norm, ok))
        })
        .collect::<Result<_>>()?;
    let excess: Vec<f64> = samples.iter().map(|s| s.0).collect();
    Ok(GrowthCheck {
        level,
        quantile_95: quantile(&excess, 0.95),
        triangle_violations: samples.iter().filter(|s| !s.1).count(),
        excess,
    })
}
