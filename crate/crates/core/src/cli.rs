//! Command-line experiments: transform caching, denoising trials and graph
//! runs.
//!
//! Settings come from an optional `key = value` file overlaid by flags (flags
//! win). Every command writes into one output directory:
//! `manifest.json`, `results.csv`, `realization0.csv` and the cached gamblet
//! system under `system/`. Outputs depend only on the configuration and the
//! seed, not on the thread count or on whether the system came from cache.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::denoise::{
    realization, run_trials, select_level, DenoiseConfig, DenoiseSetup, Method, SignalSource,
    TrialPlan, TrialStats,
};
use crate::error::{GambletError, Result};
use crate::gamblets::{
    operator_hash, oracle_transform, sha256_hex, transform, GambletSystem, SystemManifest,
};
use crate::graphdenoise::{
    denoise_graph_setup, graph_problem, trig_signal, vertex_values, GraphDenoiseConfig, GraphRun,
    NoiseLevel,
};
use crate::hierarchy::Hierarchy;
use crate::numerics::{cholesky, fmt_g17, rel_frobenius, solve_spd, Vector};
use crate::operators::{
    assemble_fem, grounded_laplacian, CoefficientField, DiscreteOperator, GeometricGraph,
};

/// Residual allowed for the level identities of a freshly computed or loaded
/// system with `trunc = 0`.
const INVARIANT_TOL: f64 = 1e-8;

#[derive(Debug, Parser)]
#[command(
    name = "gamblet",
    version,
    about = "Gamblet transforms and near-minimax denoising"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute (or reuse) the gamblet system of a problem.
    Transform(ExperimentArgs),
    /// Run denoising trials on a PDE problem.
    Denoise(ExperimentArgs),
    /// Run denoising trials on a graph.
    Graph(ExperimentArgs),
    /// Check the gamblet invariants on small built-in problems.
    Selftest,
}

/// Flags shared by the experiment commands. Values are parsed together with
/// the config file so both sources accept the same syntax.
#[derive(Debug, Default, Args)]
pub struct ExperimentArgs {
    /// `key = value` file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed; trial t uses stream t.
    #[arg(long)]
    pub seed: Option<String>,
    /// Number of Monte-Carlo trials.
    #[arg(long)]
    pub trials: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
    /// Relative drop tolerance for the level matrices (0 keeps them dense).
    #[arg(long)]
    pub trunc: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<String>,
    /// pde-1d | pde-2d | graph
    #[arg(long)]
    pub problem: Option<String>,
    /// Number of levels.
    #[arg(long)]
    pub q: Option<String>,
    /// Noise level; for graphs `<k>x` means k times the RMS of u.
    #[arg(long)]
    pub sigma: Option<String>,
    /// Prior bound on the operator image of u.
    #[arg(long)]
    pub m: Option<String>,
    /// Comma-separated subset of near-minimax, hard-threshold,
    /// soft-threshold, regularization.
    #[arg(long)]
    pub methods: Option<String>,
    /// rough | unit | file
    #[arg(long)]
    pub coefficient: Option<String>,
    /// Tabulated coefficient values for `--coefficient file`.
    #[arg(long)]
    pub coefficient_file: Option<String>,
    /// random-sphere | smooth-1d | smooth-2d
    #[arg(long)]
    pub signal: Option<String>,
    /// Graph file (`N M`, then `idx x y` lines, then `i j` lines).
    #[arg(long)]
    pub graph: Option<String>,
    /// Use an n×n grid graph instead of a file.
    #[arg(long)]
    pub synthetic_grid: Option<String>,
    /// Grounded vertex.
    #[arg(long)]
    pub ground: Option<String>,
}

const KEYS: [&str; 16] = [
    "seed",
    "trials",
    "out",
    "trunc",
    "threads",
    "problem",
    "q",
    "sigma",
    "m",
    "methods",
    "coefficient",
    "coefficient-file",
    "signal",
    "graph",
    "synthetic-grid",
    "ground",
];

impl ExperimentArgs {
    fn flag_entries(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("seed", &self.seed),
            ("trials", &self.trials),
            ("out", &self.out),
            ("trunc", &self.trunc),
            ("threads", &self.threads),
            ("problem", &self.problem),
            ("q", &self.q),
            ("sigma", &self.sigma),
            ("m", &self.m),
            ("methods", &self.methods),
            ("coefficient", &self.coefficient),
            ("coefficient-file", &self.coefficient_file),
            ("signal", &self.signal),
            ("graph", &self.graph),
            ("synthetic-grid", &self.synthetic_grid),
            ("ground", &self.ground),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Problem {
    Pde1d,
    Pde2d,
    Graph,
}

impl Problem {
    fn name(self) -> &'static str {
        match self {
            Problem::Pde1d => "pde-1d",
            Problem::Pde2d => "pde-2d",
            Problem::Graph => "graph",
        }
    }

    fn dim(self) -> usize {
        match self {
            Problem::Pde1d => 1,
            Problem::Pde2d | Problem::Graph => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Coefficient {
    Rough,
    Unit,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum GraphSource {
    File(PathBuf),
    Grid(usize),
}

/// Fully resolved experiment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub q: usize,
    pub sigma: NoiseLevel,
    /// `None` on graphs means `‖f‖₂`.
    pub m: Option<f64>,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub seed: u64,
    pub coefficient: Coefficient,
    pub signal: SignalSource,
    pub out: PathBuf,
    pub trunc: f64,
    pub threads: Option<usize>,
    pub graph: Option<GraphSource>,
    pub ground: usize,
}

/// Reads `key = value` lines; `#` starts a comment. Underscores in keys are
/// accepted for dashes. Unknown or repeated keys are errors.
pub fn parse_config_text(text: &str, context: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| GambletError::parse(format!("{context}:{}", lineno + 1), msg);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
        let key = key.trim().replace('_', "-");
        if !KEYS.contains(&key.as_str()) {
            return Err(at(format!("unknown key `{key}`")));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(at(format!("key `{key}` given twice")));
        }
    }
    Ok(map)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GambletError::InvalidConfig(format!("`{key}`: cannot parse {value:?}")))
}

impl ExperimentConfig {
    /// Merges the config file (if any) with the flags and validates.
    pub fn resolve(args: &ExperimentArgs, default_problem: Problem) -> Result<Self> {
        let mut map = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| GambletError::io(path, e))?;
                parse_config_text(&text, &path.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        for (key, value) in args.flag_entries() {
            if let Some(v) = value {
                map.insert(key.to_string(), v.clone());
            }
        }
        Self::from_map(&map, default_problem)
    }

    pub fn from_map(map: &BTreeMap<String, String>, default_problem: Problem) -> Result<Self> {
        for key in map.keys() {
            if !KEYS.contains(&key.as_str()) {
                return Err(GambletError::InvalidConfig(format!("unknown key `{key}`")));
            }
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        let problem = match get("problem") {
            None => default_problem,
            Some("pde-1d") => Problem::Pde1d,
            Some("pde-2d") => Problem::Pde2d,
            Some("graph") => Problem::Graph,
            Some(other) => {
                return Err(GambletError::InvalidConfig(format!(
                    "`problem`: expected pde-1d, pde-2d or graph, got {other:?}"
                )))
            }
        };
        let is_graph = problem == Problem::Graph;
        let q = match get("q") {
            Some(v) => parse_value("q", v)?,
            None => match problem {
                Problem::Pde1d => 10,
                Problem::Pde2d | Problem::Graph => 5,
            },
        };
        let sigma = match get("sigma") {
            Some(v) => match v.strip_suffix('x') {
                Some(k) if is_graph => NoiseLevel::RmsMultiple(parse_value("sigma", k)?),
                Some(_) => {
                    return Err(GambletError::InvalidConfig(
                        "`sigma`: relative noise levels (`<k>x`) are only for graphs".into(),
                    ))
                }
                None => NoiseLevel::Absolute(parse_value("sigma", v)?),
            },
            None if is_graph => NoiseLevel::RmsMultiple(10.0),
            None => NoiseLevel::Absolute(0.001),
        };
        let m = match get("m") {
            Some(v) => Some(parse_value::<f64>("m", v)?),
            None if is_graph => None,
            None => Some(1.0),
        };
        let methods = match get("methods") {
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<Method>())
                .collect::<Result<Vec<_>>>()?,
            None if is_graph => vec![Method::NearMinimax, Method::HardThreshold],
            None => Method::ALL.to_vec(),
        };
        if methods.is_empty() {
            return Err(GambletError::InvalidConfig("`methods`: empty list".into()));
        }
        if is_graph
            && methods
                .iter()
                .any(|m| !matches!(m, Method::NearMinimax | Method::HardThreshold))
        {
            return Err(GambletError::InvalidConfig(
                "`methods`: graph runs support near-minimax and hard-threshold".into(),
            ));
        }
        let trials = get("trials").map_or(Ok(100), |v| parse_value("trials", v))?;
        let seed = get("seed").map_or(Ok(1), |v| parse_value("seed", v))?;
        let coefficient = match (
            get("coefficient").unwrap_or("rough"),
            get("coefficient-file"),
        ) {
            ("rough", None) => Coefficient::Rough,
            ("unit", None) => Coefficient::Unit,
            ("file", Some(p)) => Coefficient::File(PathBuf::from(p)),
            ("file", None) => {
                return Err(GambletError::InvalidConfig(
                    "`coefficient = file` needs `coefficient-file`".into(),
                ))
            }
            (c, Some(_)) if c != "file" => {
                return Err(GambletError::InvalidConfig(
                    "`coefficient-file` needs `coefficient = file`".into(),
                ))
            }
            (other, _) => {
                return Err(GambletError::InvalidConfig(format!(
                    "`coefficient`: expected rough, unit or file, got {other:?}"
                )))
            }
        };
        let signal = match get("signal") {
            None | Some("random-sphere") => SignalSource::RandomSphere,
            Some("smooth-1d") => SignalSource::Smooth1d,
            Some("smooth-2d") => SignalSource::Smooth2d,
            Some(other) => {
                return Err(GambletError::InvalidConfig(format!(
                    "`signal`: expected random-sphere, smooth-1d or smooth-2d, got {other:?}"
                )))
            }
        };
        match (&signal, problem) {
            (SignalSource::Smooth1d, Problem::Pde2d) | (SignalSource::Smooth2d, Problem::Pde1d) => {
                return Err(GambletError::InvalidConfig(format!(
                    "`signal`: {signal:?} does not match {}",
                    problem.name()
                )))
            }
            _ => {}
        }
        let out = PathBuf::from(get("out").unwrap_or("gamblet-out"));
        let trunc = get("trunc").map_or(Ok(0.0), |v| parse_value("trunc", v))?;
        if !(0.0..1.0).contains(&trunc) {
            return Err(GambletError::InvalidConfig(format!(
                "`trunc` must lie in [0, 1), got {trunc}"
            )));
        }
        let threads = get("threads")
            .map(|v| parse_value::<usize>("threads", v))
            .transpose()?;
        if threads == Some(0) {
            return Err(GambletError::InvalidConfig(
                "`threads` must be at least 1".into(),
            ));
        }
        let graph = match (get("graph"), get("synthetic-grid")) {
            (Some(_), Some(_)) => {
                return Err(GambletError::InvalidConfig(
                    "give either `graph` or `synthetic-grid`, not both".into(),
                ))
            }
            (Some(p), None) => Some(GraphSource::File(PathBuf::from(p))),
            (None, Some(n)) => Some(GraphSource::Grid(parse_value("synthetic-grid", n)?)),
            (None, None) => None,
        };
        if is_graph && graph.is_none() {
            return Err(GambletError::InvalidConfig(
                "graph runs need `graph <file>` or `synthetic-grid <n>`".into(),
            ));
        }
        let ground = get("ground").map_or(Ok(0), |v| parse_value("ground", v))?;
        let cfg = ExperimentConfig {
            problem,
            q,
            sigma,
            m,
            methods,
            trials,
            seed,
            coefficient,
            signal,
            out,
            trunc,
            threads,
            graph,
            ground,
        };
        if !is_graph {
            cfg.denoise_config()?;
        } else if q == 0 {
            return Err(GambletError::InvalidLevels(q));
        }
        Ok(cfg)
    }

    /// Model parameters for PDE problems.
    pub fn denoise_config(&self) -> Result<DenoiseConfig> {
        let sigma = match self.sigma {
            NoiseLevel::Absolute(s) => s,
            NoiseLevel::RmsMultiple(_) => {
                return Err(GambletError::InvalidConfig(
                    "relative sigma on a PDE problem".into(),
                ))
            }
        };
        DenoiseConfig::new(self.problem.dim(), self.q, sigma, self.m.unwrap_or(1.0))
    }

    /// Canonical settings echoed into the manifest. The output directory and
    /// thread count are left out: they do not affect results.
    pub fn echo(&self) -> Value {
        let mut map = serde_json::Map::new();
        let mut put = |k: &str, v: Value| {
            map.insert(k.to_string(), v);
        };
        put("problem", json!(self.problem.name()));
        put("q", json!(self.q));
        put(
            "sigma",
            match self.sigma {
                NoiseLevel::Absolute(s) => json!(s),
                NoiseLevel::RmsMultiple(k) => json!(format!("{}x", fmt_g17(k))),
            },
        );
        put("m", self.m.map_or(Value::Null, |m| json!(m)));
        put(
            "methods",
            json!(self.methods.iter().map(|m| m.name()).collect::<Vec<_>>()),
        );
        put("trials", json!(self.trials));
        put("seed", json!(self.seed));
        put("trunc", json!(self.trunc));
        match self.problem {
            Problem::Graph => {
                put(
                    "graph",
                    match &self.graph {
                        Some(GraphSource::File(p)) => json!(p.display().to_string()),
                        Some(GraphSource::Grid(n)) => json!(format!("synthetic-grid {n}")),
                        None => Value::Null,
                    },
                );
                put("ground", json!(self.ground));
            }
            _ => {
                put(
                    "coefficient",
                    match &self.coefficient {
                        Coefficient::Rough => json!("rough"),
                        Coefficient::Unit => json!("unit"),
                        Coefficient::File(p) => json!(format!("file {}", p.display())),
                    },
                );
                put(
                    "signal",
                    serde_json::to_value(&self.signal).expect("signal serializes"),
                );
            }
        }
        Value::Object(map)
    }
}

/// Whether [`obtain_system`] reused a saved system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Computed,
}

/// Loads the system saved in `dir` when its manifest matches the operator,
/// hierarchy and truncation; otherwise computes and saves it. A manifest
/// that cannot be parsed is an error rather than a silent recompute.
pub fn obtain_system(
    op: &DiscreteOperator,
    hierarchy: &Hierarchy,
    trunc: f64,
    dir: &Path,
) -> Result<(GambletSystem, CacheStatus)> {
    let op_hash = operator_hash(op);
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let text =
            fs::read_to_string(&manifest_path).map_err(|e| GambletError::io(&manifest_path, e))?;
        let manifest = SystemManifest::from_json(&text, &manifest_path.display().to_string())?;
        let matches = manifest.operator_hash == op_hash
            && manifest.trunc == fmt_g17(trunc)
            && manifest.hierarchy_hash == sha256_hex(hierarchy.to_json().as_bytes());
        if matches {
            let (sys, _) = GambletSystem::load(dir)?;
            check_invariants(&sys)?;
            log::info!("reusing gamblet system in {}", dir.display());
            return Ok((sys, CacheStatus::Hit));
        }
        log::info!("saved system in {} is stale; recomputing", dir.display());
    }
    let sys = transform(op, hierarchy, trunc)?;
    check_invariants(&sys)?;
    sys.save(dir, &op_hash)?;
    Ok((sys, CacheStatus::Computed))
}

fn check_invariants(sys: &GambletSystem) -> Result<()> {
    if sys.trunc() > 0.0 {
        return Ok(());
    }
    let residual = sys.invariant_residual();
    if residual > INVARIANT_TOL {
        return Err(GambletError::InvalidConfig(format!(
            "gamblet invariants violated: residual {residual:e} > {INVARIANT_TOL:e}"
        )));
    }
    Ok(())
}

fn coefficient_field(cfg: &ExperimentConfig) -> Result<CoefficientField> {
    let dim = cfg.problem.dim();
    Ok(match (&cfg.coefficient, dim) {
        (Coefficient::Rough, 1) => CoefficientField::rough_1d(),
        (Coefficient::Rough, _) => CoefficientField::rough_2d(),
        (Coefficient::Unit, d) => CoefficientField::unit(d),
        (Coefficient::File(p), d) => CoefficientField::from_file(p, d)?,
    })
}

fn load_graph(cfg: &ExperimentConfig) -> Result<GeometricGraph> {
    match &cfg.graph {
        Some(GraphSource::File(p)) => GeometricGraph::read_file(p, cfg.ground),
        Some(GraphSource::Grid(n)) => GeometricGraph::synthetic_grid(*n, cfg.ground),
        None => Err(GambletError::InvalidConfig("no graph given".into())),
    }
}

/// Operator and hierarchy of the configured problem.
fn build_problem(
    cfg: &ExperimentConfig,
) -> Result<(DiscreteOperator, Hierarchy, Option<CoefficientField>)> {
    match cfg.problem {
        Problem::Graph => {
            let (op, h) = graph_problem(&load_graph(cfg)?, cfg.q)?;
            Ok((op, h, None))
        }
        p => {
            let h = Hierarchy::build_dyadic(p.dim(), cfg.q)?;
            let field = coefficient_field(cfg)?;
            let op = assemble_fem(&field, &h)?;
            Ok((op, h, Some(field)))
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| GambletError::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    write_file(path, &text)
}

fn system_record(sys: &GambletSystem, op: &DiscreteOperator) -> Value {
    json!({
        "q": sys.q(),
        "sizes": sys.hierarchy().sizes(),
        "detail_sizes": sys.hierarchy().detail_sizes(),
        "trunc": sys.trunc(),
        "operator_hash": operator_hash(op),
        "hierarchy_hash": sha256_hex(sys.hierarchy().to_json().as_bytes()),
    })
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| GambletError::io(&cfg.out, e))
}

/// `transform`: computes or reuses `<out>/system` and writes the manifest.
pub fn cmd_transform(cfg: &ExperimentConfig) -> Result<CacheStatus> {
    prepare_out(cfg)?;
    let (op, h, _) = build_problem(cfg)?;
    let (sys, status) = obtain_system(&op, &h, cfg.trunc, &cfg.out.join("system"))?;
    write_json(
        &cfg.out.join("manifest.json"),
        &json!({ "command": "transform", "config": cfg.echo(), "system": system_record(&sys, &op) }),
    )?;
    println!(
        "system {} (q = {}, sizes {:?}) in {}",
        if status == CacheStatus::Hit {
            "reused"
        } else {
            "computed"
        },
        sys.q(),
        sys.hierarchy().sizes(),
        cfg.out.join("system").display()
    );
    Ok(status)
}

fn results_csv(stats: &TrialStats) -> String {
    let mut s = String::from("method,energy_avg,energy_std,l2_avg,l2_std,t0\n");
    for m in &stats.methods {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.method.name(),
            fmt_g17(m.energy_avg),
            fmt_g17(m.energy_std),
            fmt_g17(m.l2_avg),
            fmt_g17(m.l2_std),
            m.t0.map(fmt_g17).unwrap_or_default()
        );
    }
    s
}

fn stats_record(stats: &TrialStats) -> Value {
    json!({
        "trials": stats.trials,
        "seed": stats.seed,
        "level": stats.level,
        "noise_energy_avg": stats.noise_energy_avg,
        "noise_energy_std": stats.noise_energy_std,
        "signal_energy_avg": stats.signal_energy_avg,
        "methods": stats.methods.iter().map(|m| json!({
            "method": m.method.name(),
            "energy_avg": m.energy_avg,
            "energy_std": m.energy_std,
            "l2_avg": m.l2_avg,
            "l2_std": m.l2_std,
            "t0": m.t0,
        })).collect::<Vec<_>>(),
    })
}

/// Node positions of the fine FEM grid (`dim` 1 or 2).
fn fem_nodes(dim: usize, q: usize) -> Vec<(f64, f64)> {
    let n = 1usize << q;
    let hf = 1.0 / (n + 1) as f64;
    match dim {
        1 => (0..n).map(|i| ((i + 1) as f64 * hf, 0.0)).collect(),
        _ => (0..n * n)
            .map(|j| (((j % n) + 1) as f64 * hf, ((j / n) + 1) as f64 * hf))
            .collect(),
    }
}

struct RealizationTable<'a> {
    coords: Vec<(f64, f64)>,
    labels: Vec<usize>,
    a: Option<Vec<f64>>,
    f: &'a Vector,
    u: &'a Vector,
    eta: &'a Vector,
    recoveries: Vec<(&'static str, &'a Vector)>,
}

impl RealizationTable<'_> {
    fn to_csv(&self) -> String {
        let mut s = String::from("index,x,y");
        if self.a.is_some() {
            s.push_str(",a");
        }
        s.push_str(",f,u,eta");
        for (name, _) in &self.recoveries {
            let _ = write!(s, ",{name},{name}-error");
        }
        s.push('\n');
        for i in 0..self.u.len() {
            let (x, y) = self.coords[i];
            let _ = write!(s, "{},{},{}", self.labels[i], fmt_g17(x), fmt_g17(y));
            if let Some(a) = &self.a {
                let _ = write!(s, ",{}", fmt_g17(a[i]));
            }
            let _ = write!(
                s,
                ",{},{},{}",
                fmt_g17(self.f[i]),
                fmt_g17(self.u[i]),
                fmt_g17(self.eta[i])
            );
            for (_, v) in &self.recoveries {
                let _ = write!(s, ",{},{}", fmt_g17(v[i]), fmt_g17(v[i] - self.u[i]));
            }
            s.push('\n');
        }
        s
    }
}

/// `denoise`: runs the trials of a PDE problem.
pub fn cmd_denoise(cfg: &ExperimentConfig) -> Result<TrialStats> {
    if cfg.problem == Problem::Graph {
        return Err(GambletError::InvalidConfig(
            "use the `graph` command for graph problems".into(),
        ));
    }
    let dcfg = cfg.denoise_config()?;
    prepare_out(cfg)?;
    let (op, h, field) = build_problem(cfg)?;
    let (sys, _) = obtain_system(&op, &h, cfg.trunc, &cfg.out.join("system"))?;
    let record = system_record(&sys, &op);
    let setup = DenoiseSetup::new(op, sys)?;
    let mut plan = TrialPlan::from_config(&dcfg, cfg.signal.clone());
    plan.methods = cfg.methods.clone();
    let stats = run_trials(&setup, &plan, cfg.trials, cfg.seed)?;
    let real = realization(&setup, &plan, &stats, cfg.seed, 0)?;

    write_file(&cfg.out.join("results.csv"), &results_csv(&stats))?;
    let dim = cfg.problem.dim();
    let coords = fem_nodes(dim, cfg.q);
    let field = field.expect("PDE problems have a coefficient");
    let a = coords
        .iter()
        .map(|&(x, y)| {
            if dim == 1 {
                field.eval(&[x])
            } else {
                field.eval(&[x, y])
            }
        })
        .collect();
    let table = RealizationTable {
        labels: (0..coords.len()).collect(),
        coords,
        a: Some(a),
        f: &real.f,
        u: &real.u,
        eta: &real.eta,
        recoveries: real.recoveries.iter().map(|(m, v)| (m.name(), v)).collect(),
    };
    write_file(&cfg.out.join("realization0.csv"), &table.to_csv())?;
    write_json(
        &cfg.out.join("manifest.json"),
        &json!({
            "command": "denoise",
            "config": cfg.echo(),
            "level": select_level(&dcfg),
            "sigma": dcfg.sigma,
            "m": dcfg.m,
            "stats": stats_record(&stats),
            "system": record,
        }),
    )?;
    for m in &stats.methods {
        println!(
            "{:<16} energy {:.4e} ± {:.2e}   l2 {:.4e} ± {:.2e}",
            m.method.name(),
            m.energy_avg,
            m.energy_std,
            m.l2_avg,
            m.l2_std
        );
    }
    println!(
        "noise energy {:.4e} ± {:.2e}, l† = {}",
        stats.noise_energy_avg, stats.noise_energy_std, stats.level
    );
    Ok(stats)
}

/// `graph`: denoising trials on a grounded graph Laplacian.
pub fn cmd_graph(cfg: &ExperimentConfig) -> Result<GraphRun> {
    if cfg.problem != Problem::Graph {
        return Err(GambletError::InvalidConfig(
            "the `graph` command needs problem = graph".into(),
        ));
    }
    let g = load_graph(cfg)?;
    prepare_out(cfg)?;
    let op = grounded_laplacian(&g)?;
    let (_, h) = graph_problem(&g, cfg.q)?;
    let (sys, _) = obtain_system(&op, &h, cfg.trunc, &cfg.out.join("system"))?;
    let record = system_record(&sys, &op);
    let setup = DenoiseSetup::new(op, sys)?;
    let f = vertex_values(&g, trig_signal);
    let m = cfg.m.unwrap_or_else(|| f.norm());
    let gcfg = GraphDenoiseConfig {
        q: cfg.q,
        noise: cfg.sigma,
        m,
        trials: cfg.trials,
        seed: cfg.seed,
        trunc: cfg.trunc,
    };
    let mut run = denoise_graph_setup(setup, &gcfg, &f)?;
    if cfg.methods != run.plan.methods {
        run.plan.methods = cfg.methods.clone();
        run.stats = run_trials(&run.setup, &run.plan, cfg.trials, cfg.seed)?;
    }
    let real = realization(&run.setup, &run.plan, &run.stats, cfg.seed, 0)?;
    let est = &run.estimate;

    write_file(&cfg.out.join("results.csv"), &results_csv(&run.stats))?;
    write_file(
        &cfg.out.join("scale.csv"),
        &format!(
            "H,d_eff,h_from_min\n{},{},{}\n",
            fmt_g17(est.h),
            fmt_g17(est.d_eff),
            fmt_g17(est.h_from_min)
        ),
    )?;
    let kept = g.kept_vertices();
    let table = RealizationTable {
        coords: kept.iter().map(|&v| g.coords()[v]).collect(),
        labels: kept,
        a: None,
        f: &real.f,
        u: &real.u,
        eta: &real.eta,
        recoveries: real.recoveries.iter().map(|(m, v)| (m.name(), v)).collect(),
    };
    write_file(&cfg.out.join("realization0.csv"), &table.to_csv())?;
    write_json(
        &cfg.out.join("manifest.json"),
        &json!({
            "command": "graph",
            "config": cfg.echo(),
            "vertices": g.vertex_count(),
            "edges": g.edges().len(),
            "level": run.plan.level,
            "sigma": run.sigma,
            "m": m,
            "scale": {
                "H": est.h,
                "d_eff": est.d_eff,
                "h_from_min": est.h_from_min,
                "lambda_min": est.lambda_min,
                "lambda_max": est.lambda_max,
            },
            "stats": stats_record(&run.stats),
            "system": record,
        }),
    )?;
    for m in &run.stats.methods {
        println!(
            "{:<16} energy {:.4e} ± {:.2e}",
            m.method.name(),
            m.energy_avg,
            m.energy_std
        );
    }
    println!(
        "noise energy {:.4e}, sigma {:.4e}, l† = {}, H = {:.4}, d_eff = {:.4}",
        run.stats.noise_energy_avg, run.sigma, run.plan.level, est.h, est.d_eff
    );
    Ok(run)
}

/// One line of the self-test report.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub value: f64,
    pub limit: f64,
}

impl SelfCheck {
    pub fn passed(&self) -> bool {
        self.value <= self.limit
    }
}

/// Invariant checks on small 1D, 2D and graph problems.
pub fn selftest() -> Result<Vec<SelfCheck>> {
    let mut checks = Vec::new();
    let h1 = Hierarchy::build_dyadic(1, 5)?;
    let h2 = Hierarchy::build_dyadic(2, 3)?;
    checks.push(SelfCheck {
        name: "hierarchy 1D q=5",
        value: h1.invariant_residual(),
        limit: 1e-12,
    });
    checks.push(SelfCheck {
        name: "hierarchy 2D q=3",
        value: h2.invariant_residual(),
        limit: 1e-12,
    });
    let grid = GeometricGraph::synthetic_grid(8, 0)?;
    let (gop, gh) = graph_problem(&grid, 3)?;
    checks.push(SelfCheck {
        name: "hierarchy graph 8x8",
        value: gh.invariant_residual(),
        limit: 1e-12,
    });

    let problems = [
        (
            "1D rough q=5",
            assemble_fem(&CoefficientField::rough_1d(), &h1)?,
            h1,
        ),
        (
            "2D rough q=3",
            assemble_fem(&CoefficientField::rough_2d(), &h2)?,
            h2,
        ),
        ("graph 8x8", gop, gh),
    ];
    for (label, op, h) in problems {
        let sys = transform(&op, &h, 0.0)?;
        let oracle = oracle_transform(&op, &h)?;
        let mut worst: f64 = 0.0;
        for k in 1..=sys.q() {
            worst = worst.max(rel_frobenius(sys.a(k).matrix(), oracle.a(k).matrix()));
            worst = worst.max(rel_frobenius(sys.b(k).matrix(), oracle.b(k).matrix()));
        }
        checks.push(SelfCheck {
            name: leak(format!("{label}: transform vs oracle")),
            value: worst,
            limit: 1e-8,
        });
        checks.push(SelfCheck {
            name: leak(format!("{label}: level identities")),
            value: sys.invariant_residual(),
            limit: 1e-10,
        });
        let y = Vector::from_fn(sys.fine_size(), |i, _| {
            ((i * 7 + 3) % 11) as f64 / 11.0 - 0.5
        });
        let back = sys.reconstruct(&sys.analyze(&y)?, sys.q())?;
        checks.push(SelfCheck {
            name: leak(format!("{label}: round trip")),
            value: (&back - &y).amax() / y.amax(),
            limit: 1e-9,
        });
        let x = sys.solve(&y)?;
        let direct = solve_spd(&cholesky(&op.stiffness)?, &y)?;
        let err = crate::gamblets::energy_norm(&op, &(&x - &direct))?
            / crate::gamblets::energy_norm(&op, &direct)?;
        checks.push(SelfCheck {
            name: leak(format!("{label}: solve vs Cholesky")),
            value: err,
            limit: 1e-9,
        });
    }
    Ok(checks)
}

fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}

fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| GambletError::InvalidConfig(format!("thread pool: {e}")))?
            .install(f),
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Transform(args) => {
            let cfg = ExperimentConfig::resolve(&args, Problem::Pde1d)?;
            with_threads(cfg.threads, || cmd_transform(&cfg).map(|_| ()))
        }
        Command::Denoise(args) => {
            let cfg = ExperimentConfig::resolve(&args, Problem::Pde1d)?;
            with_threads(cfg.threads, || cmd_denoise(&cfg).map(|_| ()))
        }
        Command::Graph(args) => {
            let cfg = ExperimentConfig::resolve(&args, Problem::Graph)?;
            with_threads(cfg.threads, || cmd_graph(&cfg).map(|_| ()))
        }
        Command::Selftest => {
            let checks = selftest()?;
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {:<40} {:.3e} (limit {:.0e})",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.limit
                );
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                return Err(GambletError::InvalidConfig(format!(
                    "{failed} self-test checks failed"
                )));
            }
            Ok(())
        }
    }
}
