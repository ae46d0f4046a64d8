//! Renewable supply on top of the price-taking market.
//!
//! The augmented state is `z = [d, s, p, y]`: the renewable output `y`
//! feeds supply one step later, follows `y' = sigma_c p + sigma_r y + w`
//! with `E w^2 = psi_r`, and is never controlled. The demand-side (DER)
//! variant is nonlinear and only simulated.

use rayon::prelude::*;
use serde::Serialize;

use crate::capacity::{default_alpha_grid, solve_constrained, sweep_capacity_region, CapacityRegion};
use crate::error::{Error, Result};
use crate::functionals::evaluate_policy;
use crate::linalg::{self, trace_product};
use crate::model::{LinearPolicy, LqrSystem, MarketInstance, Matrix, NoiseSpec, Vector};
use crate::riccati::{solve_riccati, solve_riccati_lambda};
use crate::sim::{self, standard_normal, PathRng, SimConfig, Stepper};
use crate::table::{Cell, Table};

pub const DEFAULT_SIGMA_R: f64 = 0.9;
pub const DEFAULT_SIGMA_C: f64 = 0.01;

/// Everything needed to build the augmented system except `psi_r`.
#[derive(Debug, Clone)]
pub struct RenewableTemplate {
    pub base: MarketInstance,
    pub sigma_r: f64,
    pub sigma_c: f64,
    /// Full 4x4 state weight; the base `Q` is zero-padded when absent.
    pub q: Option<Matrix>,
}

impl RenewableTemplate {
    pub fn new(base: MarketInstance) -> Self {
        Self {
            base,
            sigma_r: DEFAULT_SIGMA_R,
            sigma_c: DEFAULT_SIGMA_C,
            q: None,
        }
    }

    pub fn build(&self, psi_r: f64) -> Result<RenewableSystem> {
        build_renewable_system_with(&self.base, self.sigma_r, self.sigma_c, psi_r, self.q.clone())
    }
}

#[derive(Debug, Clone)]
pub struct RenewableSystem {
    pub base: MarketInstance,
    pub sigma_r: f64,
    pub sigma_c: f64,
    pub psi_r: f64,
    pub augmented: LqrSystem,
}

impl RenewableSystem {
    /// Pads a 3-dimensional start with `y_0 = 0`; 4-dimensional starts pass through.
    pub fn lift_x0(&self, x0: &Vector) -> Result<Vector> {
        match x0.len() {
            4 => Ok(x0.clone()),
            3 => Ok(Vector::from_fn(4, |i, _| if i < 3 { x0[i] } else { 0.0 })),
            n => Err(Error::Dimension {
                context: "renewable initial state",
                expected: 4,
                got: n,
            }),
        }
    }
}

pub fn build_renewable_system(base: &MarketInstance, sigma_r: f64, sigma_c: f64, psi_r: f64) -> Result<RenewableSystem> {
    build_renewable_system_with(base, sigma_r, sigma_c, psi_r, None)
}

pub fn build_renewable_system_with(
    base: &MarketInstance,
    sigma_r: f64,
    sigma_c: f64,
    psi_r: f64,
    q: Option<Matrix>,
) -> Result<RenewableSystem> {
    let sys = &base.system;
    if sys.dim() != 3 {
        return Err(Error::Dimension {
            context: "renewable base market",
            expected: 3,
            got: sys.dim(),
        });
    }
    if !(sigma_r.is_finite() && sigma_r > 0.0) {
        return Err(Error::invalid("sigma_r", format!("must be > 0, got {sigma_r}")));
    }
    if !(sigma_c.is_finite() && sigma_c >= 0.0) {
        return Err(Error::invalid("sigma_c", format!("must be >= 0, got {sigma_c}")));
    }
    if !(psi_r.is_finite() && psi_r >= 0.0) {
        return Err(Error::invalid("psi_r", format!("must be >= 0, got {psi_r}")));
    }

    let mut a = Matrix::zeros(4, 4);
    a.view_mut((0, 0), (3, 3)).copy_from(sys.a());
    a[(1, 3)] = 1.0;
    a[(3, 2)] = sigma_c;
    a[(3, 3)] = sigma_r;
    let b = Vector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]);

    let mut psi = Matrix::zeros(4, 4);
    psi.view_mut((0, 0), (3, 3)).copy_from(sys.psi());
    psi[(3, 3)] = psi_r;

    let q = match q {
        Some(q) => q,
        None => {
            let mut padded = Matrix::zeros(4, 4);
            padded.view_mut((0, 0), (3, 3)).copy_from(sys.q());
            padded
        }
    };
    let augmented = LqrSystem::new(a, b, NoiseSpec::gaussian(psi)?, q, sys.r(), sys.gamma())?;
    Ok(RenewableSystem {
        base: base.clone(),
        sigma_r,
        sigma_c,
        psi_r,
        augmented,
    })
}

/// Volatility needed to hold efficiency at the level reached at the first
/// `psi_r` with budget `alpha`, plus the fixed-multiplier trace diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct PsiSweep {
    pub alpha: f64,
    pub efficiency_target: f64,
    /// Multiplier at which the trace diagnostic is evaluated.
    pub lambda_fixed: f64,
    pub psi_r: Vec<f64>,
    pub volatility: Vec<f64>,
    /// Multiplier achieving the target at each `psi_r`.
    pub lambda: Vec<f64>,
    pub trace_term: Vec<f64>,
    /// `(K_lambda)_44` at the fixed multiplier: the slope of the trace term.
    pub trace_slope: Vec<f64>,
}

impl PsiSweep {
    pub fn strictly_increasing(&self) -> bool {
        self.volatility.windows(2).all(|w| w[1] > w[0])
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["psi_r", "volatility", "trace_term"]);
        for i in 0..self.psi_r.len() {
            t.push(vec![self.psi_r[i].into(), self.volatility[i].into(), self.trace_term[i].into()]);
        }
        t
    }
}

const LAMBDA_FLOOR: f64 = 1e-6;
const MAX_BRACKET_STEPS: usize = 80;
const BISECTION_STEPS: usize = 200;

fn efficiency_at(sys: &LqrSystem, lambda: f64, x0: &Vector) -> Result<(f64, f64)> {
    let gain = solve_riccati_lambda(sys, lambda)?.gain;
    let rep = evaluate_policy(sys, &gain, x0)?;
    Ok((rep.efficiency, rep.volatility))
}

/// Smallest-volatility multiplier policy reaching efficiency `target`.
/// Efficiency of `pi_lambda` falls as `lambda` grows, so this is a
/// bisection in `log lambda`.
fn hold_efficiency(sys: &LqrSystem, target: f64, lambda_hint: f64, x0: &Vector) -> Result<(f64, f64)> {
    let (e_floor, _) = efficiency_at(sys, LAMBDA_FLOOR, x0)?;
    if e_floor < target {
        return Err(Error::Unreachable {
            target,
            reason: format!("best achievable efficiency is {e_floor:.6e}"),
        });
    }
    let mut lo = LAMBDA_FLOOR.ln();
    let mut hi = lambda_hint.max(LAMBDA_FLOOR).ln();
    let mut steps = 0;
    while efficiency_at(sys, hi.exp(), x0)?.0 >= target {
        lo = hi;
        hi += 2f64.ln();
        steps += 1;
        if steps > MAX_BRACKET_STEPS {
            // Even a vanishing control meets the target; volatility is ~0.
            let (_, v) = efficiency_at(sys, hi.exp(), x0)?;
            return Ok((hi.exp(), v));
        }
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if efficiency_at(sys, mid.exp(), x0)?.0 >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = lo.exp();
    Ok((lambda, efficiency_at(sys, lambda, x0)?.1))
}

pub fn volatility_vs_psi(template: &RenewableTemplate, psi_grid: &[f64], alpha: f64, x0: &Vector) -> Result<PsiSweep> {
    if psi_grid.is_empty() || psi_grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("psi_grid", "needs nonnegative finite values"));
    }
    if psi_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("psi_grid", "must be strictly increasing"));
    }
    let first = template.build(psi_grid[0])?;
    let z0 = first.lift_x0(x0)?;
    let anchor = solve_constrained(&first.augmented, alpha, &z0)?;
    if anchor.lambda_star <= 0.0 {
        return Err(Error::invalid(
            "alpha",
            format!("budget {alpha} does not bind at psi_r = {}; choose a smaller one", psi_grid[0]),
        ));
    }
    let target = anchor.efficiency_star;
    let lambda_fixed = anchor.lambda_star;

    let rows: Vec<Result<(f64, f64, f64, f64)>> = psi_grid
        .par_iter()
        .map(|&psi| {
            let sys = template.build(psi)?.augmented;
            let (lambda, volatility) = hold_efficiency(&sys, target, lambda_fixed, &z0)?;
            let k = solve_riccati_lambda(&sys, lambda_fixed)?.k;
            Ok((volatility, lambda, trace_product(&k, sys.psi()), k[(3, 3)]))
        })
        .collect();

    let mut out = PsiSweep {
        alpha,
        efficiency_target: target,
        lambda_fixed,
        psi_r: psi_grid.to_vec(),
        volatility: Vec::new(),
        lambda: Vec::new(),
        trace_term: Vec::new(),
        trace_slope: Vec::new(),
    };
    for row in rows {
        let (v, l, tr, slope) = row?;
        out.volatility.push(v);
        out.lambda.push(l);
        out.trace_term.push(tr);
        out.trace_slope.push(slope);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CapacityShrinkage {
    pub psi_r: Vec<f64>,
    pub regions: Vec<CapacityRegion>,
}

impl CapacityShrinkage {
    /// Worst violation of `E*(psi_b, alpha) <= E*(psi_a, alpha)` over
    /// `psi_a < psi_b` and shared budgets, relative to the efficiency scale.
    /// Nonpositive means the regions are nested.
    pub fn nesting_violation(&self) -> f64 {
        let scale = self
            .regions
            .iter()
            .flat_map(|r| r.efficiencies())
            .fold(0.0_f64, |m, e| m.max(e.abs()))
            .max(f64::MIN_POSITIVE);
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.regions.len() {
            for j in 0..self.regions.len() {
                if self.psi_r[i] >= self.psi_r[j] {
                    continue;
                }
                for pb in &self.regions[j].points {
                    if let Some(pa) = self.regions[i].points.iter().find(|p| p.alpha == pb.alpha) {
                        worst = worst.max((pb.efficiency_star - pa.efficiency_star) / scale);
                    }
                }
            }
        }
        worst
    }

    pub fn nested(&self, rel_tol: f64) -> bool {
        self.nesting_violation() <= rel_tol
    }

    /// Capacity columns prefixed by `psi_r`; normalized so the largest-`psi_r`
    /// boundary spans `[0, 1]`.
    pub fn table(&self) -> Table {
        let mut cols = vec!["psi_r"];
        cols.extend(CapacityRegion::COLUMNS);
        let mut t = Table::new(&cols);
        let Some(last) = self
            .psi_r
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
        else {
            return t;
        };
        let range = self.regions[last].efficiency_range();
        for (psi, region) in self.psi_r.iter().zip(&self.regions) {
            for row in region.rows(range) {
                let mut full: Vec<Cell> = vec![(*psi).into()];
                full.extend(row);
                t.push(full);
            }
        }
        t
    }
}

/// One region per `psi_r` on a shared budget grid (by default the standard
/// grid of the first system).
pub fn capacity_shrinkage(
    template: &RenewableTemplate,
    psi_list: &[f64],
    alpha_grid: Option<&[f64]>,
    x0: &Vector,
) -> Result<CapacityShrinkage> {
    if psi_list.is_empty() {
        return Err(Error::invalid("psi_list", "must not be empty"));
    }
    let systems = psi_list.iter().map(|&p| template.build(p)).collect::<Result<Vec<_>>>()?;
    let z0 = systems[0].lift_x0(x0)?;
    let grid = match alpha_grid {
        Some(g) => g.to_vec(),
        None => default_alpha_grid(&systems[0].augmented, &z0)?,
    };
    let regions = systems
        .par_iter()
        .map(|s| sweep_capacity_region(&s.augmented, &grid, &z0))
        .collect::<Result<Vec<_>>>()?;
    Ok(CapacityShrinkage {
        psi_r: psi_list.to_vec(),
        regions,
    })
}

/// Demand-side renewables under the operator's unaware optimal policy.
#[derive(Debug, Clone)]
pub struct DerScenario {
    pub base: MarketInstance,
    pub sigma_rn: f64,
    /// Off-peak and midday levels of the nominal output profile.
    pub v1: f64,
    pub v2: f64,
    pub period: usize,
    /// Price response to squared demand jumps.
    pub xi: f64,
    pub psi_w: f64,
    pub psi_s: f64,
    /// Disable to get the linear demand row (used as an oracle).
    pub clip: bool,
    pub split: DeltaSplit,
}

/// How a DER fraction `delta = psi_w / (psi_w + psi_s)` is turned into variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSplit {
    /// Keep `psi_s`; DER variance grows without bound as `delta -> 1`.
    FixedSupply,
    /// Keep `psi_w + psi_s`.
    FixedTotal,
}

pub const DEFAULT_XI: f64 = 0.05;
/// Supply-noise variance of the reference market.
pub const DEFAULT_PSI_S: f64 = 2.0;

impl DerScenario {
    pub fn new(base: MarketInstance, sigma_rn: f64, v1: f64, v2: f64) -> Self {
        Self {
            base,
            sigma_rn,
            v1,
            v2,
            period: 24,
            xi: DEFAULT_XI,
            psi_w: 0.0,
            psi_s: DEFAULT_PSI_S,
            clip: true,
            split: DeltaSplit::FixedSupply,
        }
    }

    pub fn delta(&self) -> f64 {
        let total = self.psi_w + self.psi_s;
        if total > 0.0 {
            self.psi_w / total
        } else {
            0.0
        }
    }

    /// Variances with DER fraction `delta`, per `split`. Under a fixed
    /// supply variance `psi_s` must be positive.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::invalid("delta", format!("must lie in [0, 1), got {delta}")));
        }
        let (psi_w, psi_s) = match self.split {
            DeltaSplit::FixedSupply => {
                if !(self.psi_s > 0.0) {
                    return Err(Error::invalid("psi_s", "must be > 0 when the supply variance is held fixed"));
                }
                (self.psi_s * delta / (1.0 - delta), self.psi_s)
            }
            DeltaSplit::FixedTotal => {
                let total = self.psi_w + self.psi_s;
                (delta * total, (1.0 - delta) * total)
            }
        };
        Ok(Self {
            psi_w,
            psi_s,
            ..self.clone()
        })
    }

    /// Nominal output level at step `t`.
    pub fn profile(&self, t: usize) -> f64 {
        let h = (t % self.period) as f64;
        let period = self.period as f64;
        if h < 0.3 * period || h > 0.7 * period {
            self.v1
        } else {
            self.v2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.system.dim() != 3 {
            return Err(Error::Dimension {
                context: "DER base market",
                expected: 3,
                got: self.base.system.dim(),
            });
        }
        if !(self.sigma_rn.is_finite() && self.sigma_rn > 0.0) {
            return Err(Error::invalid("sigma_rn", "must be > 0"));
        }
        for (name, v) in [("v1", self.v1), ("v2", self.v2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.v1 > self.v2 {
            return Err(Error::invalid("v1", "off-peak level must not exceed the midday level"));
        }
        if self.period == 0 {
            return Err(Error::invalid("period", "must be positive"));
        }
        for (name, v) in [("xi", self.xi), ("psi_w", self.psi_w), ("psi_s", self.psi_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub struct DerStepper<'a> {
    scenario: &'a DerScenario,
    gain: LinearPolicy,
    sd_w: f64,
    sd_s: f64,
}

impl<'a> DerStepper<'a> {
    /// Uses the optimal gain of the base market, which ignores the DERs.
    pub fn new(scenario: &'a DerScenario) -> Result<Self> {
        scenario.validate()?;
        let gain = solve_riccati(&scenario.base.system)?.gain;
        Ok(Self {
            scenario,
            gain,
            sd_w: scenario.psi_w.sqrt(),
            sd_s: scenario.psi_s.sqrt(),
        })
    }

    pub fn gain(&self) -> &LinearPolicy {
        &self.gain
    }

    /// Next state and whether the demand clip was active.
    fn advance(&self, t: usize, x: &Vector, u: f64, rng: &mut PathRng) -> (Vector, bool) {
        let sc = self.scenario;
        let a = sc.base.system.a();
        let w = self.sd_w * standard_normal(rng);
        let n_s = self.sd_s * standard_normal(rng);
        let y = sc.sigma_rn * sc.profile(t) + w;
        let raw_d = (a.row(0) * x)[0] - y;
        let clipped = sc.clip && raw_d < 0.0;
        let d = if clipped { 0.0 } else { raw_d };
        let s = (a.row(1) * x)[0] + n_s;
        let jump = x[0] - d;
        let p = (a.row(2) * x)[0] + u + sc.xi * jump * jump;
        (Vector::from_column_slice(&[d, s, p]), clipped)
    }
}

impl Stepper for DerStepper<'_> {
    type PathState = ();

    fn dim(&self) -> usize {
        3
    }
    fn gamma(&self) -> f64 {
        self.scenario.base.system.gamma()
    }
    fn control_weight(&self) -> f64 {
        self.scenario.base.system.r()
    }
    fn start(&self, _rng: &mut PathRng) {}
    fn step(&self, _: &(), t: usize, x: &Vector, u: &mut [f64], rng: &mut PathRng) -> Vector {
        u[0] = self.gain.control(x);
        self.advance(t, x, u[0], rng).0
    }
    fn state_cost(&self, x: &Vector) -> f64 {
        linalg::quad_form(self.scenario.base.system.q(), x)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DerPoint {
    pub delta: f64,
    pub volatility: f64,
    pub std_error: f64,
    pub n_paths_excluded: usize,
    /// Share of simulated steps on which demand was clipped at zero.
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DerCliff {
    pub points: Vec<DerPoint>,
    pub horizon: Vec<usize>,
}

impl DerCliff {
    pub fn volatilities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.volatility).collect()
    }

    pub fn strictly_increasing(&self) -> bool {
        self.volatilities().windows(2).all(|w| w[1] > w[0])
    }

    /// Last increment over the first; `None` with fewer than three points.
    pub fn superlinearity(&self) -> Option<f64> {
        let v = self.volatilities();
        let n = v.len();
        (n >= 3).then(|| (v[n - 1] - v[n - 2]) / (v[1] - v[0]))
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["delta", "volatility", "std_error", "n_paths_excluded"]);
        for p in &self.points {
            t.push(vec![
                p.delta.into(),
                p.volatility.into(),
                p.std_error.into(),
                p.n_paths_excluded.into(),
            ]);
        }
        t
    }
}

const CLIP_SAMPLE_PATHS: usize = 64;

/// Replays a few paths from their own streams and counts clipped steps.
fn clip_fraction(stepper: &DerStepper, x0: &Vector, seed: u64, stream: u64, horizon: usize) -> f64 {
    let mut clipped = 0usize;
    let mut total = 0usize;
    for path in 0..CLIP_SAMPLE_PATHS {
        let mut rng = sim::path_rng(seed, stream, path as u64);
        let mut x = x0.clone();
        for t in 0..horizon {
            let u = stepper.gain.control(&x);
            let (next, c) = stepper.advance(t, &x, u, &mut rng);
            clipped += c as usize;
            total += 1;
            if !next.iter().all(|v| v.is_finite()) {
                break;
            }
            x = next;
        }
    }
    if total == 0 {
        0.0
    } else {
        clipped as f64 / total as f64
    }
}

/// Price volatility (discounted control energy) for each DER fraction.
/// Point `i` draws from stream `i`, so every point is reproducible on its own.
pub fn der_cliff(scenario: &DerScenario, delta_grid: &[f64], x0: &Vector, cfg: &SimConfig) -> Result<DerCliff> {
    scenario.validate()?;
    if delta_grid.is_empty() {
        return Err(Error::invalid("delta_grid", "must not be empty"));
    }
    let scenarios = delta_grid.iter().map(|&d| scenario.with_delta(d)).collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<(DerPoint, usize)>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, sc)| {
            let stepper = DerStepper::new(sc)?;
            let batch = sim::simulate_stream(&stepper, x0, cfg, i as u64)?;
            let est = batch.estimates.volatility;
            Ok((
                DerPoint {
                    delta: delta_grid[i],
                    volatility: est.mean,
                    std_error: est.std_error,
                    n_paths_excluded: batch.n_flagged,
                    clip_fraction: clip_fraction(&stepper, x0, cfg.seed, i as u64, batch.horizon),
                },
                batch.horizon,
            ))
        })
        .collect();
    let mut out = DerCliff {
        points: Vec::new(),
        horizon: Vec::new(),
    };
    for r in results {
        let (p, h) = r?;
        out.points.push(p);
        out.horizon.push(h);
    }
    Ok(out)
}

/// The DER experiment's reference settings on a given base market.
pub fn reference_der(base: MarketInstance) -> DerScenario {
    DerScenario::new(base, 1.0, 0.1, 0.44)
}

/// Base market used for the DER experiment: the reference market at a low
/// control penalty, where the unaware operator reacts strongly.
pub fn reference_der_base() -> Result<MarketInstance> {
    crate::model::reference_market(0.01, 0.5)
}

pub fn reference_der_x0() -> Vector {
    Vector::from_column_slice(&[1.0, 1.0, 2.0])
}

pub fn reference_delta_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::optimal_cost;
    use crate::model::{check_controllability, reference_market};
    use crate::sim::Horizon;
    use approx::assert_relative_eq;

    fn template() -> RenewableTemplate {
        RenewableTemplate::new(reference_market(1.0, 0.5).unwrap())
    }

    fn x0() -> Vector {
        Vector::from_column_slice(&[25.0, 25.0, 50.0])
    }

    #[test]
    fn augmented_structure() {
        let sys = template().build(2.0).unwrap();
        let a = sys.augmented.a();
        assert_eq!(a.iter().filter(|v| **v != 0.0).count(), 8);
        assert_eq!(a[(1, 3)], 1.0);
        assert_eq!(a[(3, 2)], DEFAULT_SIGMA_C);
        assert_eq!(a[(3, 3)], DEFAULT_SIGMA_R);
        assert_eq!(a.view((0, 0), (3, 3)), *sys.base.system.a());
        assert_eq!(*sys.augmented.b(), Vector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]));
        assert_eq!(sys.augmented.psi().diagonal(), Vector::from_column_slice(&[2.0, 2.0, 0.0, 2.0]));
        assert_eq!(sys.augmented.q().row(3).amax(), 0.0);
    }

    #[test]
    fn augmented_system_is_controllable() {
        let c = check_controllability(&template().build(0.5).unwrap().augmented);
        assert!(c.controllable);
        assert_eq!(c.rank, 4);
    }

    #[test]
    fn silent_decoupled_renewable_changes_nothing() {
        let base = reference_market(1.0, 0.5).unwrap();
        let sys = build_renewable_system(&base, 0.9, 0.0, 0.0).unwrap();
        let z0 = sys.lift_x0(&x0()).unwrap();
        let aug = optimal_cost(&sys.augmented, &z0).unwrap();
        let plain = optimal_cost(&base.system, &x0()).unwrap();
        assert_relative_eq!(aug, plain, max_relative = 1e-9);
    }

    #[test]
    fn bad_parameters_are_rejected() {
        let base = reference_market(1.0, 0.5).unwrap();
        assert!(build_renewable_system(&base, 0.0, 0.01, 1.0).is_err());
        assert!(build_renewable_system(&base, 0.9, -0.01, 1.0).is_err());
        assert!(build_renewable_system(&base, 0.9, 0.01, -1.0).is_err());
        let sys = build_renewable_system(&base, 0.9, 0.01, 1.0).unwrap();
        assert!(sys.lift_x0(&Vector::zeros(2)).is_err());
    }

    #[test]
    fn supplied_state_weight_is_used() {
        let mut t = template();
        t.q = Some(Matrix::identity(4, 4));
        assert_eq!(*t.build(1.0).unwrap().augmented.q(), Matrix::identity(4, 4));
    }

    #[test]
    fn volatility_grows_with_renewable_variance() {
        let t = template();
        let z0 = t.build(0.5).unwrap().lift_x0(&x0()).unwrap();
        let v = crate::capacity::unconstrained_volatility(&t.build(0.5).unwrap().augmented, &z0).unwrap();
        let psi = [0.5, 1.0, 2.0, 4.0, 8.0];
        let sweep = volatility_vs_psi(&t, &psi, 0.2 * v, &x0()).unwrap();
        assert!(sweep.strictly_increasing(), "{:?}", sweep.volatility);
        assert_relative_eq!(sweep.volatility[0], sweep.alpha, max_relative = 1e-6);

        // The trace term is exactly affine with slope (K_lambda)_44 > 0.
        let slope = sweep.trace_slope[0];
        assert!(slope > 0.0);
        for i in 1..psi.len() {
            let expect = sweep.trace_term[0] + slope * (psi[i] - psi[0]);
            assert_relative_eq!(sweep.trace_term[i], expect, max_relative = 1e-9);
        }
    }

    #[test]
    fn identical_variance_gives_identical_volatility() {
        let t = template();
        let a = volatility_vs_psi(&t, &[1.0], 100.0, &x0()).unwrap();
        let b = volatility_vs_psi(&t, &[1.0], 100.0, &x0()).unwrap();
        assert_eq!(a.volatility, b.volatility);
        assert!(volatility_vs_psi(&t, &[1.0, 1.0], 100.0, &x0()).is_err());
    }

    #[test]
    fn unreachable_efficiency_is_reported() {
        let t = template();
        match volatility_vs_psi(&t, &[0.5, 1e9], 1e3, &x0()) {
            Err(Error::Unreachable { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn regions_shrink_with_renewable_variance() {
        let t = template();
        let sh = capacity_shrinkage(&t, &[0.5, 8.0], None, &x0()).unwrap();
        assert!(sh.regions.iter().all(|r| r.failures.is_empty()));
        assert!(sh.nested(1e-8), "{}", sh.nesting_violation());
        let table = sh.table();
        let norm: Vec<f64> = table.column("normalized_efficiency").unwrap().into_iter().flatten().collect();
        let n = sh.regions[1].points.len();
        let top = norm[norm.len() - n..].iter().copied().fold(f64::MIN, f64::max);
        assert_relative_eq!(top, 1.0);
        assert_eq!(table.columns[0], "psi_r");

        let single = capacity_shrinkage(&t, &[2.0], None, &x0()).unwrap();
        assert!(single.nested(0.0));
    }

    #[test]
    fn profile_steps_at_midday() {
        let sc = reference_der(reference_der_base().unwrap());
        let levels: Vec<f64> = (0..24).map(|t| sc.profile(t)).collect();
        for (h, v) in levels.iter().enumerate() {
            let midday = (8..=16).contains(&h);
            assert_eq!(*v, if midday { 0.44 } else { 0.1 }, "hour {h}");
        }
        assert_eq!(sc.profile(24 + 12), 0.44);
    }

    #[test]
    fn delta_splits() {
        let sc = reference_der(reference_der_base().unwrap());
        let fixed = sc.with_delta(0.75).unwrap();
        assert_relative_eq!(fixed.psi_s, 2.0);
        assert_relative_eq!(fixed.psi_w, 6.0);
        assert_relative_eq!(fixed.delta(), 0.75);
        let total = DerScenario {
            split: DeltaSplit::FixedTotal,
            ..sc.clone()
        }
        .with_delta(0.75)
        .unwrap();
        assert_relative_eq!(total.psi_w + total.psi_s, 2.0);
        assert_relative_eq!(total.delta(), 0.75);
        assert!(sc.with_delta(1.0).is_err());
        let bad = DerScenario { v1: 0.5, v2: 0.1, ..sc };
        assert!(bad.validate().is_err());
    }

    fn linear_der(psi_s: f64) -> DerScenario {
        DerScenario {
            v1: 0.0,
            v2: 0.0,
            xi: 0.0,
            psi_w: 0.0,
            psi_s,
            clip: false,
            ..reference_der(reference_der_base().unwrap())
        }
    }

    #[test]
    fn silent_linear_der_is_the_base_closed_loop() {
        let sc = linear_der(0.0);
        let stepper = DerStepper::new(&sc).unwrap();
        let cfg = SimConfig {
            n_paths: 2,
            ..SimConfig::default()
        };
        let batch = sim::simulate(&stepper, &reference_der_x0(), &cfg).unwrap();
        let silent = sc.base.system.with_noise(NoiseSpec::none(3)).unwrap();
        let closed = evaluate_policy(&silent, stepper.gain(), &reference_der_x0()).unwrap();
        assert_eq!(batch.estimates.volatility.std_error, 0.0);
        assert!((batch.estimates.volatility.mean - closed.volatility).abs() <= 2.0 * cfg.truncation_eps);
    }

    #[test]
    fn noisy_linear_der_matches_closed_form() {
        let sc = linear_der(2.0);
        let stepper = DerStepper::new(&sc).unwrap();
        let cfg = SimConfig {
            seed: 3,
            n_paths: 4000,
            ..SimConfig::default()
        };
        let batch = sim::simulate(&stepper, &reference_der_x0(), &cfg).unwrap();
        let sys = sc
            .base
            .system
            .with_noise(NoiseSpec::gaussian_diagonal(&[0.0, 2.0, 0.0]).unwrap())
            .unwrap();
        let closed = evaluate_policy(&sys, stepper.gain(), &reference_der_x0()).unwrap();
        assert!(batch.estimates.volatility.z_score(closed.volatility) <= 3.0);
    }

    #[test]
    fn der_runs_are_reproducible() {
        let sc = reference_der(reference_der_base().unwrap());
        let cfg = SimConfig {
            seed: 5,
            n_paths: 300,
            ..SimConfig::default()
        };
        let grid = [0.0, 0.5];
        let a = der_cliff(&sc, &grid, &reference_der_x0(), &cfg).unwrap();
        let b = der_cliff(&sc, &grid, &reference_der_x0(), &cfg).unwrap();
        assert_eq!(a.table().to_csv(), b.table().to_csv());
        // With the reference profile the demand clip is active a lot of the time.
        assert!(a.points[0].clip_fraction > 0.1);
    }

    #[test]
    fn volatility_cliff() {
        let sc = reference_der(reference_der_base().unwrap());
        let cfg = SimConfig {
            seed: 11,
            n_paths: 4000,
            horizon: Horizon::Auto,
            ..SimConfig::default()
        };
        let cliff = der_cliff(&sc, &reference_delta_grid(), &reference_der_x0(), &cfg).unwrap();
        assert!(cliff.strictly_increasing(), "{:?}", cliff.volatilities());
        assert!(cliff.superlinearity().unwrap() >= 2.0);
        assert!(cliff.points.iter().all(|p| p.n_paths_excluded == 0));
    }
}
