//! Volatility-constrained control: the Lagrangian dual in the multiplier
//! `lambda`, the efficiency/volatility boundary, and randomized mixtures of
//! boundary policies.
//!
//! For a budget `alpha` the dual function is
//! `q(lambda) = x0' K_lambda x0 + gamma/(1-gamma) tr(K_lambda Psi) - lambda alpha`,
//! where `K_lambda` solves the Riccati equation with `lambda` in place of `r`.
//! It is concave in `lambda` with derivative `V(pi_lambda) - alpha`.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::functionals::{check_grid, differences, discounted_value, evaluate_policy, shape_check, ShapeCheck};
use crate::linalg::{self, geomspace, quad_form};
use crate::model::{LinearPolicy, LqrSystem, Matrix, Vector};
use crate::riccati::{solve_riccati, solve_riccati_lambda};
use crate::sim::{linear_step, PathRng, Stepper};
use crate::table::{Cell, Table};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualSearchOptions {
    /// Smallest multiplier considered; a maximum here means the budget does not bind.
    pub lambda_lo: f64,
    pub lambda_start: f64,
    pub max_doublings: usize,
    /// Relative width of the final bracket in `lambda`.
    pub rel_tol: f64,
    /// Allowed `|V - alpha| / alpha` before the bracket is refined on the derivative.
    pub slackness_tol: f64,
}

impl Default for DualSearchOptions {
    fn default() -> Self {
        Self {
            lambda_lo: 1e-6,
            lambda_start: 1e-3,
            max_doublings: 60,
            rel_tol: 1e-8,
            slackness_tol: 0.02,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid("alpha", format!("must be > 0, got {alpha}")));
    }
    Ok(())
}

fn check_x0(sys: &LqrSystem, x0: &Vector) -> Result<()> {
    if x0.len() != sys.dim() {
        return Err(Error::Dimension {
            context: "initial state",
            expected: sys.dim(),
            got: x0.len(),
        });
    }
    Ok(())
}

/// `J_lambda(x0) = x0' K_lambda x0 + gamma/(1-gamma) tr(K_lambda Psi)`
fn lagrangian_value(sys: &LqrSystem, lambda: f64, x0: &Vector) -> Result<(f64, LinearPolicy)> {
    let sol = solve_riccati_lambda(sys, lambda)?;
    Ok((discounted_value(&sol.k, sys.psi(), sys.gamma(), x0), sol.gain))
}

pub fn q_alpha(sys: &LqrSystem, alpha: f64, lambda: f64, x0: &Vector) -> Result<f64> {
    check_alpha(alpha)?;
    check_x0(sys, x0)?;
    Ok(lagrangian_value(sys, lambda, x0)?.0 - lambda * alpha)
}

#[derive(Debug, Clone)]
pub struct QProfile {
    pub alpha: f64,
    pub lambda: Vec<f64>,
    pub q: Vec<f64>,
    pub d1: Vec<Option<f64>>,
    pub d2: Vec<Option<f64>>,
}

impl QProfile {
    pub fn shape(&self) -> ShapeCheck {
        shape_check(&self.q, &self.d1, &self.d2)
    }

    /// First differences go from positive to non-positive at most once.
    pub fn single_peaked(&self) -> bool {
        let signs: Vec<bool> = self.d1.iter().flatten().map(|d| *d > 0.0).collect();
        signs.windows(2).all(|w| w[0] || !w[1])
    }

    pub fn argmax(&self) -> usize {
        (0..self.q.len()).fold(0, |best, i| if self.q[i] > self.q[best] { i } else { best })
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["lambda", "q", "d1", "d2"]);
        for i in 0..self.lambda.len() {
            t.push(vec![self.lambda[i].into(), self.q[i].into(), self.d1[i].into(), self.d2[i].into()]);
        }
        t
    }
}

pub fn q_alpha_profile(sys: &LqrSystem, alpha: f64, lambda_grid: &[f64], x0: &Vector) -> Result<QProfile> {
    check_alpha(alpha)?;
    check_x0(sys, x0)?;
    check_grid("lambda_grid", lambda_grid, 3)?;
    let q = lambda_grid
        .par_iter()
        .map(|&l| q_alpha(sys, alpha, l, x0))
        .collect::<Result<Vec<_>>>()?;
    let (d1, d2) = differences(lambda_grid, &q);
    Ok(QProfile {
        alpha,
        lambda: lambda_grid.to_vec(),
        q,
        d1,
        d2,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CapacityPoint {
    pub alpha: f64,
    /// Zero when the budget does not bind.
    pub lambda_star: f64,
    pub l_star: f64,
    pub efficiency_star: f64,
    pub achieved_volatility: f64,
    #[serde(skip)]
    pub policy: LinearPolicy,
    /// Multiplier whose policy is reported (equals `lambda_star` unless the budget is slack).
    pub lambda_used: f64,
    pub evaluations: usize,
}

impl CapacityPoint {
    pub fn slackness_defect(&self) -> f64 {
        (self.achieved_volatility - self.alpha).abs() / self.alpha
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

struct Dual<'a> {
    sys: &'a LqrSystem,
    alpha: f64,
    x0: &'a Vector,
    evaluations: usize,
}

impl Dual<'_> {
    /// `q` at `lambda = exp(t)`.
    fn q(&mut self, t: f64) -> Result<f64> {
        self.evaluations += 1;
        let l = t.exp();
        Ok(lagrangian_value(self.sys, l, self.x0)?.0 - l * self.alpha)
    }

    /// Sign of `q'(lambda) = V(pi_lambda) - alpha`.
    fn slope(&mut self, l: f64) -> Result<f64> {
        self.evaluations += 1;
        let gain = solve_riccati_lambda(self.sys, l)?.gain;
        Ok(evaluate_policy(self.sys, &gain, self.x0)?.volatility - self.alpha)
    }
}

/// Maximizes the dual over `lambda >= lambda_lo`: geometric bracket
/// expansion from `lambda_start`, then golden-section search in `log lambda`.
pub fn solve_constrained(sys: &LqrSystem, alpha: f64, x0: &Vector) -> Result<CapacityPoint> {
    solve_constrained_with(sys, alpha, x0, DualSearchOptions::default())
}

pub fn solve_constrained_with(sys: &LqrSystem, alpha: f64, x0: &Vector, opts: DualSearchOptions) -> Result<CapacityPoint> {
    check_alpha(alpha)?;
    check_x0(sys, x0)?;
    let mut dual = Dual {
        sys,
        alpha,
        x0,
        evaluations: 0,
    };
    let step = 2f64.ln();
    let t_lo = opts.lambda_lo.ln();
    let t0 = opts.lambda_start.ln().max(t_lo);

    // Bracket [a, c] around an interior maximum of q.
    let (q0, q1) = (dual.q(t0)?, dual.q(t0 + step)?);
    if q1 > q0 {
        let (mut prev, mut cur, mut q_cur) = (t0, t0 + step, q1);
        for _ in 0..opts.max_doublings {
            let next = cur + step;
            let q_next = dual.q(next)?;
            if q_next <= q_cur {
                return finish(&mut dual, prev, next, t_lo, opts);
            }
            prev = cur;
            cur = next;
            q_cur = q_next;
        }
        return Err(Error::UnboundedDual {
            alpha,
            lambda_max: cur.exp(),
        });
    }
    // q does not increase to the right of t0: walk down towards the floor.
    let (mut cur, mut q_cur, mut c) = (t0, q0, t0 + step);
    let a = loop {
        let next = (cur - step).max(t_lo);
        if next >= cur {
            break t_lo;
        }
        let q_next = dual.q(next)?;
        if q_next <= q_cur {
            break next;
        }
        c = cur;
        cur = next;
        q_cur = q_next;
    };
    finish(&mut dual, a, c, t_lo, opts)
}

fn finish(dual: &mut Dual<'_>, mut a: f64, mut c: f64, t_lo: f64, opts: DualSearchOptions) -> Result<CapacityPoint> {
    let mut x1 = c - INV_PHI * (c - a);
    let mut x2 = a + INV_PHI * (c - a);
    let (mut f1, mut f2) = (dual.q(x1)?, dual.q(x2)?);
    while (c - a) > opts.rel_tol {
        if f1 >= f2 {
            c = x2;
            x2 = x1;
            f2 = f1;
            x1 = c - INV_PHI * (c - a);
            f1 = dual.q(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (c - a);
            f2 = dual.q(x2)?;
        }
    }
    let mut t_star = if f1 >= f2 { x1 } else { x2 };
    let at_floor = t_star - t_lo <= 2.0 * opts.rel_tol;
    if at_floor {
        t_star = t_lo;
    }

    let alpha = dual.alpha;
    let mut lambda = t_star.exp();
    let (sys, x0) = (dual.sys, dual.x0);
    let mut gain = solve_riccati_lambda(sys, lambda)?.gain;
    let mut vol = evaluate_policy(sys, &gain, x0)?.volatility;

    // The dual is flat at its maximum, so value comparisons can leave the
    // multiplier slightly off; the derivative V - alpha is monotone and pins it.
    if !at_floor && (vol - alpha).abs() > opts.slackness_tol * alpha {
        let (mut lo, mut hi) = ((t_star - 1.0).max(t_lo), t_star + 1.0);
        while dual.slope(lo.exp())? < 0.0 && lo > t_lo {
            lo = (lo - 1.0).max(t_lo);
        }
        while dual.slope(hi.exp())? > 0.0 {
            hi += 1.0;
        }
        while hi - lo > opts.rel_tol {
            let mid = 0.5 * (lo + hi);
            if dual.slope(mid.exp())? > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lambda = (0.5 * (lo + hi)).exp();
        gain = solve_riccati_lambda(sys, lambda)?.gain;
        vol = evaluate_policy(sys, &gain, x0)?.volatility;
    }

    // With a slack budget the dual optimum sits at lambda = 0, where q equals
    // the primal state cost; reading q at the floor would leave a spurious
    // -lambda_lo * alpha term that matters for very large budgets.
    let l_star = if at_floor {
        -evaluate_policy(sys, &gain, x0)?.efficiency
    } else {
        lagrangian_value(sys, lambda, x0)?.0 - lambda * alpha
    };
    Ok(CapacityPoint {
        alpha,
        lambda_star: if at_floor { 0.0 } else { lambda },
        l_star,
        efficiency_star: -l_star,
        achieved_volatility: vol,
        policy: gain,
        lambda_used: lambda,
        evaluations: dual.evaluations,
    })
}

/// Volatility of the optimal policy at the system's own `r`.
pub fn unconstrained_volatility(sys: &LqrSystem, x0: &Vector) -> Result<f64> {
    let gain = solve_riccati(sys)?.gain;
    Ok(evaluate_policy(sys, &gain, x0)?.volatility)
}

/// 40 log-spaced budgets over `[0.01, 100]` times the unconstrained volatility.
pub fn default_alpha_grid(sys: &LqrSystem, x0: &Vector) -> Result<Vec<f64>> {
    let v = unconstrained_volatility(sys, x0)?;
    if !(v > 0.0) {
        return Err(Error::invalid("alpha_grid", "unconstrained volatility is zero; supply a grid"));
    }
    Ok(geomspace(0.01 * v, 100.0 * v, 40))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepFailure {
    pub alpha: f64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CapacityDiagnostics {
    pub shape: ShapeCheck,
    pub lambda_nonincreasing: bool,
    pub max_slackness_defect: f64,
}

#[derive(Debug, Clone)]
pub struct CapacityRegion {
    pub points: Vec<CapacityPoint>,
    pub failures: Vec<SweepFailure>,
    pub gamma: f64,
    pub x0: Vector,
}

impl CapacityRegion {
    pub fn alphas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.alpha).collect()
    }

    pub fn efficiencies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.efficiency_star).collect()
    }

    pub fn diagnostics(&self) -> CapacityDiagnostics {
        let e = self.efficiencies();
        let (d1, d2) = differences(&self.alphas(), &e);
        let lambdas: Vec<f64> = self.points.iter().map(|p| p.lambda_star).collect();
        let tol = 1e-9 * lambdas.iter().fold(0.0_f64, |m, l| m.max(*l));
        CapacityDiagnostics {
            shape: shape_check(&e, &d1, &d2),
            lambda_nonincreasing: lambdas.windows(2).all(|w| w[1] <= w[0] + tol),
            max_slackness_defect: self
                .points
                .iter()
                .filter(|p| p.lambda_star > 0.0)
                .map(CapacityPoint::slackness_defect)
                .fold(0.0, f64::max),
        }
    }

    /// `(E_min, E_max)` used to normalize exported curves.
    pub fn efficiency_range(&self) -> (f64, f64) {
        let e = self.efficiencies();
        let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub const COLUMNS: [&'static str; 6] = [
        "alpha",
        "lambda_star",
        "L_star",
        "efficiency_star",
        "achieved_volatility",
        "normalized_efficiency",
    ];

    /// Rows with `normalized_efficiency` mapped so that `range` spans `[0, 1]`.
    pub fn rows(&self, range: (f64, f64)) -> Vec<Vec<Cell>> {
        let (lo, hi) = range;
        let span = hi - lo;
        self.points
            .iter()
            .map(|p| {
                let norm = if span > 0.0 { Some((p.efficiency_star - lo) / span) } else { None };
                vec![
                    p.alpha.into(),
                    p.lambda_star.into(),
                    p.l_star.into(),
                    p.efficiency_star.into(),
                    p.achieved_volatility.into(),
                    norm.into(),
                ]
            })
            .collect()
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&Self::COLUMNS);
        for row in self.rows(self.efficiency_range()) {
            t.push(row);
        }
        t
    }
}

/// Solves every budget independently; failures are recorded, not fatal.
pub fn sweep_capacity_region(sys: &LqrSystem, alpha_grid: &[f64], x0: &Vector) -> Result<CapacityRegion> {
    check_grid("alpha_grid", alpha_grid, 1)?;
    check_x0(sys, x0)?;
    let results: Vec<Result<CapacityPoint>> = alpha_grid.par_iter().map(|&a| solve_constrained(sys, a, x0)).collect();
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for (alpha, res) in alpha_grid.iter().zip(results) {
        match res {
            Ok(p) => points.push(p),
            Err(e) => failures.push(SweepFailure {
                alpha: *alpha,
                error: e.to_string(),
            }),
        }
    }
    Ok(CapacityRegion {
        points,
        failures,
        gamma: sys.gamma(),
        x0: x0.clone(),
    })
}

/// A policy together with its (volatility, efficiency) on a fixed system and start.
#[derive(Debug, Clone)]
pub struct EvaluatedPolicy {
    pub volatility: f64,
    pub efficiency: f64,
    pub policy: LinearPolicy,
}

impl EvaluatedPolicy {
    pub fn evaluate(sys: &LqrSystem, policy: LinearPolicy, x0: &Vector) -> Result<Self> {
        let rep = evaluate_policy(sys, &policy, x0)?;
        Ok(Self {
            volatility: rep.volatility,
            efficiency: rep.efficiency,
            policy,
        })
    }

    pub fn from_point(p: &CapacityPoint, sys: &LqrSystem, x0: &Vector) -> Result<Self> {
        Self::evaluate(sys, p.policy.clone(), x0)
    }
}

/// Follows `policies[0]` for the whole path with probability `mu`, else `policies[1]`.
#[derive(Debug, Clone)]
pub struct MixturePolicy {
    pub policies: [LinearPolicy; 2],
    pub mu: f64,
}

#[derive(Debug, Clone)]
pub struct MixturePoint {
    pub volatility: f64,
    pub efficiency: f64,
    pub mixture: MixturePolicy,
}

pub fn mixture_policy(first: &EvaluatedPolicy, second: &EvaluatedPolicy, mu: f64) -> Result<MixturePoint> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid("mu", format!("must lie in [0, 1], got {mu}")));
    }
    Ok(MixturePoint {
        volatility: mu * first.volatility + (1.0 - mu) * second.volatility,
        efficiency: mu * first.efficiency + (1.0 - mu) * second.efficiency,
        mixture: MixturePolicy {
            policies: [first.policy.clone(), second.policy.clone()],
            mu,
        },
    })
}

pub struct MixtureStepper<'a> {
    sys: &'a LqrSystem,
    mixture: &'a MixturePolicy,
    noise_factor: Option<Matrix>,
}

impl<'a> MixtureStepper<'a> {
    pub fn new(sys: &'a LqrSystem, mixture: &'a MixturePolicy) -> Result<Self> {
        for p in &mixture.policies {
            p.check_dim(sys.dim())?;
        }
        Ok(Self {
            sys,
            mixture,
            noise_factor: (!sys.noise().is_silent()).then(|| linalg::psd_sqrt(sys.psi())),
        })
    }
}

impl Stepper for MixtureStepper<'_> {
    type PathState = usize;

    fn dim(&self) -> usize {
        self.sys.dim()
    }
    fn gamma(&self) -> f64 {
        self.sys.gamma()
    }
    fn control_weight(&self) -> f64 {
        self.sys.r()
    }
    fn start(&self, rng: &mut PathRng) -> usize {
        if rng.random::<f64>() < self.mixture.mu {
            0
        } else {
            1
        }
    }
    fn step(&self, which: &usize, _t: usize, x: &Vector, u: &mut [f64], rng: &mut PathRng) -> Vector {
        let gain = self.mixture.policies[*which].gain();
        let (next, control) = linear_step(self.sys, gain, self.noise_factor.as_ref(), x, rng);
        u[0] = control;
        next
    }
    fn state_cost(&self, x: &Vector) -> f64 {
        quad_form(self.sys.q(), x)
    }
}
