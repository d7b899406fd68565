//! Gamblets on grounded graph Laplacians.
//!
//! A graph has no mesh width or dimension to plug into the level-selection
//! rule, so both are estimated from the gamblet system itself: `H` from the
//! growth of `λ_max(B^(k))` across levels and `d_eff` from the growth of the
//! detail counts `|J^(k)|` measured in units of `log(1/H)`.

use serde::{Deserialize, Serialize};

use crate::denoise::{
    add_noise, argmin_first, level_filter, level_scores_with, log_grid, run_trials, trial_rng,
    DenoiseResult, DenoiseSetup, Method, SignalSource, ThresholdSchedule, TrialPlan, TrialStats,
    DEFAULT_CONFIDENCE,
};
use crate::error::{GambletError, Result};
use crate::gamblets::{transform, GambletSystem};
use crate::hierarchy::Hierarchy;
use crate::numerics::{symmetric_eigen, Vector};
use crate::operators::{grounded_laplacian, DiscreteOperator, GeometricGraph};

/// Estimated scale parameters of a gamblet system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphScaleEstimate {
    /// Per-level decay ratio, from the slope of `log λ_max(B^(k))`.
    pub h: f64,
    /// Effective dimension.
    pub d_eff: f64,
    /// Same ratio estimated from `λ_min(B^(k))`, for comparison.
    pub h_from_min: f64,
    /// `λ_min(B^(k))` for `k = 1..=q`.
    pub lambda_min: Vec<f64>,
    /// `λ_max(B^(k))` for `k = 1..=q`.
    pub lambda_max: Vec<f64>,
}

fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Fits `H` and `d_eff` over levels `k = 2..=q`.
pub fn estimate_h_d(sys: &GambletSystem) -> Result<GraphScaleEstimate> {
    let q = sys.q();
    if q < 3 {
        return Err(GambletError::TooFewLevels { needed: 3, q });
    }
    let mut lambda_min = Vec::with_capacity(q);
    let mut lambda_max = Vec::with_capacity(q);
    for k in 1..=q {
        let (values, _) = symmetric_eigen(sys.b(k));
        lambda_min.push(values.min());
        lambda_max.push(values.max());
    }
    let ks: Vec<f64> = (2..=q).map(|k| k as f64).collect();
    let log_of = |v: &[f64]| -> Vec<f64> { v[1..].iter().map(|x| x.ln()).collect() };
    let slope_max = ls_slope(&ks, &log_of(&lambda_max));
    let slope_min = ls_slope(&ks, &log_of(&lambda_min));
    let h = (-slope_max / 2.0).exp();
    if !(h > 0.0 && h < 1.0) {
        return Err(GambletError::InvalidConfig(format!(
            "λ_max(B^(k)) does not grow with k (fitted H = {h})"
        )));
    }
    let scaled: Vec<f64> = ks.iter().map(|k| k * (1.0 / h).ln()).collect();
    let counts: Vec<f64> = (2..=q)
        .map(|k| (sys.hierarchy().detail_size(k) as f64).ln())
        .collect();
    let d_eff = ls_slope(&scaled, &counts);
    if !(d_eff > 0.0) {
        return Err(GambletError::InvalidConfig(format!(
            "fitted d_eff = {d_eff} is not positive"
        )));
    }
    Ok(GraphScaleEstimate {
        h,
        d_eff,
        h_from_min: (-slope_min / 2.0).exp(),
        lambda_min,
        lambda_max,
    })
}

/// `l†` from the level-selection rule with `(h, s, d) = (H, 1, d_eff)`.
pub fn select_level_graph(est: &GraphScaleEstimate, sigma: f64, m: f64, q: usize) -> usize {
    argmin_first(&level_scores_with(est.h, 1.0, est.d_eff, q, sigma, m))
}

/// The smooth test function `cos(3x + y) + sin(3y) + sin(7x − 5y)`.
pub fn trig_signal(x: f64, y: f64) -> f64 {
    (3.0 * x + y).cos() + (3.0 * y).sin() + (7.0 * x - 5.0 * y).sin()
}

/// `f` evaluated at the non-grounded vertices, in row order of the grounded
/// Laplacian.
pub fn vertex_values(g: &GeometricGraph, f: impl Fn(f64, f64) -> f64) -> Vector {
    let kept = g.kept_vertices();
    Vector::from_iterator(
        kept.len(),
        kept.iter().map(|&v| f(g.coords()[v].0, g.coords()[v].1)),
    )
}

/// Grounded Laplacian and the point hierarchy over the kept vertices.
pub fn graph_problem(g: &GeometricGraph, q: usize) -> Result<(DiscreteOperator, Hierarchy)> {
    let op = grounded_laplacian(g)?;
    let coords: Vec<(f64, f64)> = g.kept_vertices().iter().map(|&v| g.coords()[v]).collect();
    let hierarchy = Hierarchy::build_from_points(&coords, q)?;
    Ok((op, hierarchy))
}

/// [`graph_problem`] followed by the gamblet transform.
pub fn graph_setup(g: &GeometricGraph, q: usize, trunc: f64) -> Result<DenoiseSetup> {
    let (op, hierarchy) = graph_problem(g, q)?;
    let system = transform(&op, &hierarchy, trunc)?;
    DenoiseSetup::new(op, system)
}

/// Noise standard deviation, absolute or relative to the signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLevel {
    Absolute(f64),
    /// Multiple of the root-mean-square of `u` over the kept vertices.
    RmsMultiple(f64),
}

impl NoiseLevel {
    pub fn resolve(self, u: &Vector) -> f64 {
        match self {
            NoiseLevel::Absolute(s) => s,
            NoiseLevel::RmsMultiple(k) => k * (u.norm_squared() / u.len() as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDenoiseConfig {
    pub q: usize,
    pub noise: NoiseLevel,
    /// Prior bound on `‖L u‖`.
    pub m: f64,
    pub trials: usize,
    pub seed: u64,
    pub trunc: f64,
}

/// Outcome of a graph denoising run.
pub struct GraphRun {
    pub setup: DenoiseSetup,
    pub estimate: GraphScaleEstimate,
    pub sigma: f64,
    pub plan: TrialPlan,
    pub stats: TrialStats,
    /// Near-minimax recovery of trial 0.
    pub result: DenoiseResult,
    pub u: Vector,
    pub eta: Vector,
}

/// Noisy recovery of `u = L^{-1} f` on a graph: level filter at the estimated
/// `l†` against hard thresholding with one threshold for all levels.
pub fn denoise_graph(g: &GeometricGraph, cfg: &GraphDenoiseConfig, f: &Vector) -> Result<GraphRun> {
    if !(cfg.m > 0.0) {
        return Err(GambletError::InvalidConfig(format!(
            "M must be positive, got {}",
            cfg.m
        )));
    }
    denoise_graph_setup(graph_setup(g, cfg.q, cfg.trunc)?, cfg, f)
}

/// As [`denoise_graph`] on an already transformed graph problem; `cfg.q`
/// and `cfg.trunc` are not used.
pub fn denoise_graph_setup(
    setup: DenoiseSetup,
    cfg: &GraphDenoiseConfig,
    f: &Vector,
) -> Result<GraphRun> {
    if !(cfg.m > 0.0) {
        return Err(GambletError::InvalidConfig(format!(
            "M must be positive, got {}",
            cfg.m
        )));
    }
    let estimate = estimate_h_d(&setup.system)?;
    let u = setup.solution(f)?;
    let sigma = cfg.noise.resolve(&u);
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(GambletError::InvalidConfig(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    let q = setup.system.q();
    let level = select_level_graph(&estimate, sigma, cfg.m, q);
    let grid = if sigma > 0.0 {
        log_grid(sigma)
    } else {
        vec![0.0]
    };
    let plan = TrialPlan {
        methods: vec![Method::NearMinimax, Method::HardThreshold],
        level,
        sigma,
        schedule: ThresholdSchedule::Constant,
        grid,
        confidence: DEFAULT_CONFIDENCE,
        signal: SignalSource::Fixed(f.as_slice().to_vec()),
    };
    let stats = run_trials(&setup, &plan, cfg.trials, cfg.seed)?;
    let mut rng = trial_rng(cfg.seed, 0);
    let eta = add_noise(&u, sigma, &mut rng);
    let result = level_filter(&setup.system, &eta, level)?;
    Ok(GraphRun {
        setup,
        estimate,
        sigma,
        plan,
        stats,
        result,
        u,
        eta,
    })
}
