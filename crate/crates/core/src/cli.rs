//! Scenario files, the experiment registry, and the batch driver behind the
//! `lqrvol` binary.
//!
//! A scenario is a TOML file naming one experiment. Market sections start
//! from the reference instances and every key present overrides one field;
//! `params` holds the experiment's own knobs. See `scenarios/` for examples.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::capacity::{self, q_alpha_profile, solve_constrained, sweep_capacity_region};
use crate::error::Error;
use crate::functionals::{self, concavity_scan, evaluate_policy, ScanFunctional};
use crate::linalg::logspace;
use crate::model::{
    self, build_price_taking_market, check_controllability, check_observability, LinearPolicy, LqrSystem, MarketInstance,
    MarketParams, Matrix, NoiseSpec, Vector,
};
use crate::nash::{self, MarketSpecPA, ProsumerSpec};
use crate::renewables::{self, DeltaSplit, RenewableTemplate};
use crate::riccati::solve_riccati;
use crate::sim::{Horizon, SimConfig};
use crate::table::{write_atomic, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Riccati,
    ConcavityScan,
    QalphaProfile,
    CapacitySweep,
    Nash,
    RenewablesSweep,
    DerCliff,
    Simulate,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Riccati,
        ExperimentKind::ConcavityScan,
        ExperimentKind::QalphaProfile,
        ExperimentKind::CapacitySweep,
        ExperimentKind::Nash,
        ExperimentKind::RenewablesSweep,
        ExperimentKind::DerCliff,
        ExperimentKind::Simulate,
    ];

    pub fn name(self) -> &'static str {
        self.info().name
    }

    pub fn info(self) -> &'static ExperimentInfo {
        REGISTRY.iter().find(|e| e.kind == self).expect("every kind is registered")
    }
}

/// Static description of one experiment. `outputs` lists each CSV the
/// experiment writes, as (file suffix, columns); the main file has suffix "".
#[derive(Debug)]
pub struct ExperimentInfo {
    pub kind: ExperimentKind,
    pub name: &'static str,
    pub figure: &'static str,
    pub required: &'static [&'static str],
    pub outputs: &'static [(&'static str, &'static [&'static str])],
}

const CAPACITY_COLUMNS: &[&str] = &[
    "alpha",
    "lambda_star",
    "L_star",
    "efficiency_star",
    "achieved_volatility",
    "normalized_efficiency",
];

pub static REGISTRY: [ExperimentInfo; 8] = [
    ExperimentInfo {
        kind: ExperimentKind::Riccati,
        name: "riccati",
        figure: "none (solver check on the market)",
        required: &[],
        outputs: &[("", &["row", "k_1", "k_2", "k_3", "gain"])],
    },
    ExperimentInfo {
        kind: ExperimentKind::ConcavityScan,
        name: "concavity_scan",
        figure: "Fig. 2",
        required: &["params.r_grid"],
        outputs: &[("", &["r", "value", "d1", "d2"])],
    },
    ExperimentInfo {
        kind: ExperimentKind::QalphaProfile,
        name: "qalpha_profile",
        figure: "Fig. 3",
        required: &["params.alpha", "params.lambda_grid"],
        outputs: &[("", &["lambda", "q", "d1", "d2"])],
    },
    ExperimentInfo {
        kind: ExperimentKind::CapacitySweep,
        name: "capacity_sweep",
        figure: "Fig. 4",
        required: &[],
        outputs: &[("", CAPACITY_COLUMNS)],
    },
    ExperimentInfo {
        kind: ExperimentKind::Nash,
        name: "nash",
        figure: "Fig. 5",
        required: &["params.r_grid"],
        outputs: &[("", &["r", "J_N", "d1", "d2"])],
    },
    ExperimentInfo {
        kind: ExperimentKind::RenewablesSweep,
        name: "renewables_sweep",
        figure: "Fig. 7",
        required: &["params.psi_grid", "params.alpha"],
        outputs: &[
            ("", &["psi_r", "volatility", "trace_term"]),
            (
                "_regions",
                &[
                    "psi_r",
                    "alpha",
                    "lambda_star",
                    "L_star",
                    "efficiency_star",
                    "achieved_volatility",
                    "normalized_efficiency",
                ],
            ),
        ],
    },
    ExperimentInfo {
        kind: ExperimentKind::DerCliff,
        name: "der_cliff",
        figure: "Fig. 8",
        required: &["params.delta_grid"],
        outputs: &[("", &["delta", "volatility", "std_error", "n_paths_excluded"])],
    },
    ExperimentInfo {
        kind: ExperimentKind::Simulate,
        name: "simulate",
        figure: "Fig. 6",
        required: &[],
        outputs: &[
            ("", &["functional", "closed_form", "mc_mean", "mc_std_error", "z_score"]),
            ("_paths", &["path_id", "t", "demand", "supply", "price", "u"]),
        ],
    },
];

/// A grid given either explicitly or as `{ log10_min, log10_max, n }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    List(Vec<f64>),
    Log { log10_min: f64, log10_max: f64, n: usize },
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        match self {
            GridSpec::List(v) => v.clone(),
            GridSpec::Log { log10_min, log10_max, n } => logspace(*log10_min, *log10_max, *n),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub beta: Option<f64>,
    pub sigma: Option<f64>,
    pub phi1: Option<f64>,
    pub phi2: Option<f64>,
    /// Full 3x3 dynamics; overrides the four coefficients.
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<f64>>,
    pub q: Option<Vec<Vec<f64>>>,
    pub noise: Option<Vec<Vec<f64>>>,
    pub noise_diag: Option<Vec<f64>>,
    pub r: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSection {
    pub a: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NashSection {
    pub consumers: Option<Vec<BlockSection>>,
    pub producers: Option<Vec<BlockSection>>,
    pub kappa: Option<f64>,
    pub zeta: Option<f64>,
    pub gamma: Option<f64>,
    pub noise_diag: Option<Vec<f64>>,
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub seed: Option<u64>,
    pub n_paths: Option<usize>,
    /// `"auto"` or a step count.
    pub horizon: Option<toml::Value>,
    pub truncation_eps: Option<f64>,
    pub record_paths: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    pub functional: Option<ScanFunctional>,
    pub r_grid: Option<GridSpec>,
    pub alpha: Option<f64>,
    /// Budget as a multiple of the unconstrained volatility (alternative to `alpha`).
    pub alpha_fraction: Option<f64>,
    pub lambda_grid: Option<GridSpec>,
    pub alpha_grid: Option<GridSpec>,
    pub psi_grid: Option<Vec<f64>>,
    pub psi_regions: Option<Vec<f64>>,
    pub sigma_r: Option<f64>,
    pub sigma_c: Option<f64>,
    pub delta_grid: Option<Vec<f64>>,
    pub sigma_rn: Option<f64>,
    pub v1: Option<f64>,
    pub v2: Option<f64>,
    pub period: Option<usize>,
    pub xi: Option<f64>,
    pub psi_s: Option<f64>,
    pub split: Option<DeltaSplit>,
    pub clip: Option<bool>,
    /// Fixed feedback gain (`u = gain' x`); the optimal gain when absent.
    pub gain: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub experiment: ExperimentKind,
    /// CSV file name relative to the output directory (default `<name>.csv`).
    pub output: Option<String>,
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub market: MarketSection,
    #[serde(default)]
    pub nash_market: NashSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(Error),
    #[error("{0}")]
    Io(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn numerical(e: Error) -> CliError {
    CliError::Numerical(e)
}

/// Sets `dotted.key` in a TOML table; the value is parsed as TOML and taken
/// as a plain string if that fails.
fn apply_override(root: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

/// Parses a scenario, applies `--override`s and `--seed`, and checks that
/// the chosen experiment's required keys are present.
pub fn parse_scenario(text: &str, overrides: &[String], seed: Option<u64>, origin: &str) -> CliResult<Scenario> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = seed {
        apply_override(&mut table, &format!("sim.seed={s}"))?;
    }
    let scenario: Scenario = if overrides.is_empty() && seed.is_none() {
        toml::from_str(text)
    } else {
        toml::Value::Table(table).try_into()
    }
    .map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    check_required(&scenario)?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path, overrides: &[String], seed: Option<u64>) -> CliResult<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_scenario(&text, overrides, seed, &path.display().to_string())
}

fn check_required(s: &Scenario) -> CliResult<()> {
    let p = &s.params;
    let present = |key: &str| match key {
        "params.r_grid" => p.r_grid.is_some(),
        "params.alpha" => p.alpha.is_some() || p.alpha_fraction.is_some(),
        "params.lambda_grid" => p.lambda_grid.is_some(),
        "params.psi_grid" => p.psi_grid.is_some(),
        "params.delta_grid" => p.delta_grid.is_some(),
        _ => true,
    };
    for key in s.experiment.info().required {
        if !present(key) {
            return Err(CliError::Config(format!(
                "experiment `{}` needs `{key}`",
                s.experiment.name()
            )));
        }
    }
    if s.name.is_empty() || s.name.contains(['/', '\\']) {
        return Err(CliError::Config("`name` must be a non-empty file-name-safe string".into()));
    }
    Ok(())
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> CliResult<Matrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Config(format!("`{name}` must be a non-empty rectangular list of rows")));
    }
    Ok(Matrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn build_market(sec: &MarketSection) -> CliResult<MarketInstance> {
    let reference = model::reference_market(1.0, 0.5).map_err(config)?;
    let base = reference.params.expect("reference market has coefficients");
    let r = sec.r.unwrap_or(1.0);
    let gamma = sec.gamma.unwrap_or(0.5);
    let q = match &sec.q {
        Some(q) => matrix("market.q", q)?,
        None => model::reference_q(),
    };
    let noise = match (&sec.noise, &sec.noise_diag) {
        (Some(_), Some(_)) => return Err(CliError::Config("give only one of `market.noise` and `market.noise_diag`".into())),
        (Some(n), None) => NoiseSpec::gaussian(matrix("market.noise", n)?).map_err(config)?,
        (None, Some(d)) => NoiseSpec::gaussian_diagonal(d).map_err(config)?,
        (None, None) => reference.system.noise().clone(),
    };
    if let Some(a) = &sec.a {
        let a = matrix("market.a", a)?;
        let b = Vector::from_vec(sec.b.clone().unwrap_or_else(|| vec![0.0, 0.0, 1.0]));
        let params = MarketParams::from_a(&a);
        let system = LqrSystem::new(a, b, noise, q, r, gamma).map_err(config)?;
        let labels = match system.dim() {
            3 => reference.labels.clone(),
            d => (0..d).map(|i| format!("x{}", i + 1)).collect(),
        };
        return Ok(MarketInstance { system, labels, params });
    }
    if sec.b.is_some() {
        return Err(CliError::Config("`market.b` is only allowed together with `market.a`".into()));
    }
    let params = MarketParams {
        beta: sec.beta.unwrap_or(base.beta),
        sigma: sec.sigma.unwrap_or(base.sigma),
        phi1: sec.phi1.unwrap_or(base.phi1),
        phi2: sec.phi2.unwrap_or(base.phi2),
    };
    build_price_taking_market(params, noise, q, r, gamma).map_err(config)
}

fn build_nash_market(sec: &NashSection, r: f64) -> CliResult<MarketSpecPA> {
    let mut spec = nash::reference_market_pa(r).map_err(config)?;
    let blocks = |list: &[BlockSection], what: &str, make: fn(Matrix, Matrix) -> crate::Result<ProsumerSpec>| {
        list.iter()
            .enumerate()
            .map(|(i, b)| {
                let a = matrix(&format!("nash_market.{what}[{i}].a"), &b.a)?;
                let q = matrix(&format!("nash_market.{what}[{i}].q"), &b.q)?;
                make(a, q).map_err(config)
            })
            .collect::<CliResult<Vec<_>>>()
    };
    if let Some(c) = &sec.consumers {
        spec.consumers = blocks(c, "consumers", ProsumerSpec::consumer)?;
    }
    if let Some(p) = &sec.producers {
        spec.producers = blocks(p, "producers", ProsumerSpec::producer)?;
    }
    spec.kappa = sec.kappa.unwrap_or(spec.kappa);
    spec.zeta = sec.zeta.unwrap_or(spec.zeta);
    spec.gamma = sec.gamma.unwrap_or(spec.gamma);
    match &sec.noise_diag {
        Some(d) => spec.noise = NoiseSpec::gaussian_diagonal(d).map_err(config)?,
        None if spec.noise.dim() != spec.market_dim() => {
            return Err(CliError::Config(
                "`nash_market.noise_diag` is required when the player list changes".into(),
            ))
        }
        None => {}
    }
    spec.validate().map_err(config)?;
    Ok(spec)
}

fn sim_config(sec: &SimSection) -> CliResult<SimConfig> {
    let d = SimConfig::default();
    let horizon = match &sec.horizon {
        None => Horizon::Auto,
        Some(toml::Value::String(s)) if s == "auto" => Horizon::Auto,
        Some(toml::Value::Integer(n)) if *n > 0 => Horizon::Fixed(*n as usize),
        Some(other) => return Err(CliError::Config(format!("`sim.horizon` must be \"auto\" or a positive integer, got {other}"))),
    };
    let cfg = SimConfig {
        seed: sec.seed.unwrap_or(d.seed),
        n_paths: sec.n_paths.unwrap_or(d.n_paths),
        horizon,
        truncation_eps: sec.truncation_eps.unwrap_or(d.truncation_eps),
        record_paths: sec.record_paths.unwrap_or(d.record_paths),
    };
    cfg.validate().map_err(config)?;
    Ok(cfg)
}

fn x0_for(s: &Scenario, sys: &LqrSystem) -> CliResult<Vector> {
    let x0 = Vector::from_vec(s.x0.clone().unwrap_or_else(|| vec![25.0, 25.0, 50.0]));
    if x0.len() != sys.dim() {
        return Err(CliError::Config(format!("`x0` has {} entries, the system has {}", x0.len(), sys.dim())));
    }
    Ok(x0)
}

fn resolve_alpha(p: &Params, sys: &LqrSystem, x0: &Vector) -> CliResult<f64> {
    match (p.alpha, p.alpha_fraction) {
        (Some(a), None) => Ok(a),
        (None, Some(f)) => Ok(f * capacity::unconstrained_volatility(sys, x0).map_err(numerical)?),
        (Some(_), Some(_)) => Err(CliError::Config("give only one of `params.alpha` and `params.alpha_fraction`".into())),
        (None, None) => Err(CliError::Config("`params.alpha` is required".into())),
    }
}

/// Tables keyed by file suffix plus experiment diagnostics for the manifest.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub tables: Vec<(&'static str, Table)>,
    pub diagnostics: serde_json::Value,
}

pub fn execute(s: &Scenario) -> CliResult<ExperimentOutput> {
    let cfg = sim_config(&s.sim)?;
    let p = &s.params;
    match s.experiment {
        ExperimentKind::Riccati => {
            let market = build_market(&s.market)?;
            let sys = &market.system;
            let x0 = x0_for(s, sys)?;
            let sol = solve_riccati(sys).map_err(numerical)?;
            let d = sys.dim();
            let mut t = Table::new(&["row", "k_1", "k_2", "k_3", "gain"]);
            if d != 3 {
                return Err(CliError::Config("the riccati experiment expects a 3-dimensional market".into()));
            }
            for i in 0..d {
                let mut row = vec![(i + 1).into()];
                row.extend((0..d).map(|j| sol.k[(i, j)].into()));
                row.push(sol.gain.gain()[i].into());
                t.push(row);
            }
            let report = evaluate_policy(sys, &sol.gain, &x0).map_err(numerical)?;
            let ctrb = check_controllability(sys);
            Ok(ExperimentOutput {
                tables: vec![("", t)],
                diagnostics: json!({
                    "iterations": sol.iterations,
                    "residual": sol.residual,
                    "warnings": sol.warnings,
                    "controllability_rank": ctrb.rank,
                    "observable": check_observability(sys).observable,
                    "optimal_cost": functionals::optimal_cost(sys, &x0).map_err(numerical)?,
                    "functionals": report,
                }),
            })
        }
        ExperimentKind::ConcavityScan => {
            let market = build_market(&s.market)?;
            let x0 = x0_for(s, &market.system)?;
            let which = p.functional.unwrap_or(ScanFunctional::OptimalCost);
            let grid = p.r_grid.as_ref().expect("checked").values();
            let scan = concavity_scan(&market.system, &grid, which, &x0).map_err(numerical)?;
            Ok(ExperimentOutput {
                tables: vec![("", scan.table())],
                diagnostics: json!({ "functional": which.name(), "shape": scan.shape() }),
            })
        }
        ExperimentKind::QalphaProfile => {
            let market = build_market(&s.market)?;
            let sys = &market.system;
            let x0 = x0_for(s, sys)?;
            let alpha = resolve_alpha(p, sys, &x0)?;
            let grid = p.lambda_grid.as_ref().expect("checked").values();
            let prof = q_alpha_profile(sys, alpha, &grid, &x0).map_err(numerical)?;
            let point = solve_constrained(sys, alpha, &x0).map_err(numerical)?;
            let grid_max = prof.q[prof.argmax()];
            Ok(ExperimentOutput {
                tables: vec![("", prof.table())],
                diagnostics: json!({
                    "alpha": alpha,
                    "shape": prof.shape(),
                    "single_peaked": prof.single_peaked(),
                    "grid_argmax_lambda": prof.lambda[prof.argmax()],
                    "grid_max": grid_max,
                    "lambda_star": point.lambda_star,
                    "l_star": point.l_star,
                }),
            })
        }
        ExperimentKind::CapacitySweep => {
            let market = build_market(&s.market)?;
            let sys = &market.system;
            let x0 = x0_for(s, sys)?;
            let grid = match &p.alpha_grid {
                Some(g) => g.values(),
                None => capacity::default_alpha_grid(sys, &x0).map_err(numerical)?,
            };
            let region = sweep_capacity_region(sys, &grid, &x0).map_err(numerical)?;
            if region.points.is_empty() {
                return Err(numerical(Error::invalid("alpha_grid", "no budget could be solved")));
            }
            Ok(ExperimentOutput {
                tables: vec![("", region.table())],
                diagnostics: json!({
                    "gamma": region.gamma,
                    "diagnostics": region.diagnostics(),
                    "failures": region.failures,
                }),
            })
        }
        ExperimentKind::Nash => {
            let spec = build_nash_market(&s.nash_market, 1.0)?;
            let x0 = match &s.nash_market.x0 {
                Some(v) => Vector::from_vec(v.clone()),
                None => nash::reference_x0_pa(),
            };
            if x0.len() != spec.market_dim() {
                return Err(CliError::Config(format!(
                    "`nash_market.x0` has {} entries, the market has {}",
                    x0.len(),
                    spec.market_dim()
                )));
            }
            let grid = p.r_grid.as_ref().expect("checked").values();
            let scan = nash::social_cost_scan(&spec, &grid, &x0).map_err(numerical)?;
            let certificates = grid
                .iter()
                .map(|&r| {
                    let m = nash::assemble_aggregate(&spec.with_r(r))?;
                    let eq = nash::solve_aggregate(&m, nash::NashOptions::default())?;
                    Ok(json!({
                        "r": r,
                        "iterations": eq.iterations,
                        "max_residual": eq.residuals.max(),
                        "spectral_radius": eq.spectral_radius_f,
                        "best_response_gap": nash::best_response_gap(&m, &eq)?,
                    }))
                })
                .collect::<crate::Result<Vec<_>>>()
                .map_err(numerical)?;
            Ok(ExperimentOutput {
                tables: vec![("", scan.table())],
                diagnostics: json!({ "shape": scan.shape(), "equilibria": certificates }),
            })
        }
        ExperimentKind::RenewablesSweep => {
            let market = build_market(&s.market)?;
            let x0 = x0_for(s, &market.system)?;
            let mut template = RenewableTemplate::new(market);
            template.sigma_r = p.sigma_r.unwrap_or(template.sigma_r);
            template.sigma_c = p.sigma_c.unwrap_or(template.sigma_c);
            let psi = p.psi_grid.clone().expect("checked");
            let first = template.build(*psi.first().unwrap_or(&0.0)).map_err(config)?;
            let z0 = first.lift_x0(&x0).map_err(config)?;
            let alpha = resolve_alpha(p, &first.augmented, &z0)?;
            let sweep = renewables::volatility_vs_psi(&template, &psi, alpha, &x0).map_err(numerical)?;
            let regions_psi = p.psi_regions.clone().unwrap_or_else(|| vec![psi[0], psi[psi.len() - 1]]);
            let grid = p.alpha_grid.as_ref().map(GridSpec::values);
            let shrink = renewables::capacity_shrinkage(&template, &regions_psi, grid.as_deref(), &x0).map_err(numerical)?;
            Ok(ExperimentOutput {
                tables: vec![("", sweep.table()), ("_regions", shrink.table())],
                diagnostics: json!({
                    "sweep": sweep,
                    "strictly_increasing": sweep.strictly_increasing(),
                    "nesting_violation": shrink.nesting_violation(),
                }),
            })
        }
        ExperimentKind::DerCliff => {
            let base = if s.market.r.is_none() {
                let mut sec = s.market.clone();
                sec.r = Some(0.01);
                build_market(&sec)?
            } else {
                build_market(&s.market)?
            };
            let mut sc = renewables::reference_der(base);
            sc.sigma_rn = p.sigma_rn.unwrap_or(sc.sigma_rn);
            sc.v1 = p.v1.unwrap_or(sc.v1);
            sc.v2 = p.v2.unwrap_or(sc.v2);
            sc.period = p.period.unwrap_or(sc.period);
            sc.xi = p.xi.unwrap_or(sc.xi);
            sc.psi_s = p.psi_s.unwrap_or(sc.psi_s);
            sc.split = p.split.unwrap_or(sc.split);
            sc.clip = p.clip.unwrap_or(sc.clip);
            sc.validate().map_err(config)?;
            let x0 = Vector::from_vec(s.x0.clone().unwrap_or_else(|| renewables::reference_der_x0().as_slice().to_vec()));
            let grid = p.delta_grid.clone().expect("checked");
            let cliff = renewables::der_cliff(&sc, &grid, &x0, &cfg).map_err(|e| match e {
                Error::InvalidParameter { .. } | Error::Dimension { .. } => config(e),
                e => numerical(e),
            })?;
            Ok(ExperimentOutput {
                tables: vec![("", cliff.table())],
                diagnostics: json!({
                    "points": cliff.points,
                    "horizon": cliff.horizon,
                    "strictly_increasing": cliff.strictly_increasing(),
                    "last_over_first_increment": cliff.superlinearity(),
                    "delta_split": sc.split,
                    "xi": sc.xi,
                }),
            })
        }
        ExperimentKind::Simulate => {
            let market = build_market(&s.market)?;
            let sys = &market.system;
            let x0 = x0_for(s, sys)?;
            let policy = match &p.gain {
                Some(g) => LinearPolicy::new(Vector::from_vec(g.clone())),
                None => solve_riccati(sys).map_err(numerical)?.gain,
            };
            policy.check_dim(sys.dim()).map_err(config)?;
            let closed = evaluate_policy(sys, &policy, &x0).map_err(numerical)?;
            let stepper = crate::sim::LinearStepper::new(sys, &policy).map_err(config)?;
            let batch = crate::sim::simulate(&stepper, &x0, &cfg).map_err(numerical)?;
            let est = &batch.estimates;
            let mut summary = Table::new(&["functional", "closed_form", "mc_mean", "mc_std_error", "z_score"]);
            for (name, c, e) in [
                ("cost", closed.cost, est.cost),
                ("volatility", closed.volatility, est.volatility),
                ("efficiency", closed.efficiency, est.efficiency),
            ] {
                summary.push(vec![name.into(), c.into(), e.mean.into(), e.std_error.into(), e.z_score(c).into()]);
            }
            let mut cols = vec!["path_id".to_owned(), "t".to_owned()];
            cols.extend(market.labels.iter().cloned());
            cols.push("u".into());
            let mut paths = Table::new(&cols);
            for rec in &batch.paths {
                for (t, (x, u)) in rec.states.iter().zip(&rec.controls).enumerate() {
                    let mut row = vec![rec.path_id.into(), t.into()];
                    row.extend(x.iter().map(|v| (*v).into()));
                    row.push(u[0].into());
                    paths.push(row);
                }
            }
            Ok(ExperimentOutput {
                tables: vec![("", summary), ("_paths", paths)],
                diagnostics: json!({ "horizon": batch.horizon, "n_flagged": batch.n_flagged, "estimates": est }),
            })
        }
    }
}

/// Files written by one run.
#[derive(Debug)]
pub struct RunReport {
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
}

fn output_path(s: &Scenario, out_dir: &Path, suffix: &str) -> PathBuf {
    let main = s.output.clone().unwrap_or_else(|| format!("{}.csv", s.name));
    if suffix.is_empty() {
        return out_dir.join(main);
    }
    let stem = main.strip_suffix(".csv").unwrap_or(&main);
    out_dir.join(format!("{stem}{suffix}.csv"))
}

/// Runs a parsed scenario and writes its CSVs plus `<name>.manifest.json`.
pub fn run_scenario(s: &Scenario, out_dir: &Path) -> CliResult<RunReport> {
    let started = Instant::now();
    let out = execute(s)?;
    std::fs::create_dir_all(out_dir).map_err(|e| {
        CliError::Io(Error::Io {
            path: out_dir.display().to_string(),
            reason: e.to_string(),
        })
    })?;
    let mut outputs = Vec::new();
    for (suffix, table) in &out.tables {
        let path = output_path(s, out_dir, suffix);
        table.write_csv(&path).map_err(CliError::Io)?;
        outputs.push(path);
    }
    let manifest = json!({
        "scenario": s,
        "seed": sim_config(&s.sim)?.seed,
        "library_version": env!("CARGO_PKG_VERSION"),
        "threads": rayon::current_num_threads(),
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "finished_unix_seconds": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "diagnostics": out.diagnostics,
    });
    let manifest_path = out_dir.join(format!("{}.manifest.json", s.name));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path, text.as_bytes()).map_err(CliError::Io)?;
    Ok(RunReport {
        outputs,
        manifest: manifest_path,
    })
}

pub fn run(path: &Path, overrides: &[String], seed: Option<u64>, out_dir: &Path) -> CliResult<RunReport> {
    let scenario = load_scenario(path, overrides, seed)?;
    run_scenario(&scenario, out_dir)
}

/// The registry as a table: name, figure, required keys, produced columns.
pub fn list_experiments() -> Table {
    let mut t = Table::new(&["experiment", "figure", "required_keys", "columns"]);
    for e in &REGISTRY {
        let columns = e
            .outputs
            .iter()
            .map(|(suffix, cols)| {
                let file = if suffix.is_empty() { "main" } else { suffix.trim_start_matches('_') };
                format!("{file}: {}", cols.join(" "))
            })
            .collect::<Vec<_>>()
            .join("; ");
        t.push(vec![e.name.into(), e.figure.into(), e.required.join(" ").into(), columns.into()]);
    }
    t
}
