//! Cost, volatility and efficiency of linear policies, the Bellman operator
//! on quadratic value functions, and concavity scans over the control penalty.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{quad_form, symmetrize, trace_product};
use crate::model::{LinearPolicy, LqrSystem, Matrix, Vector};
use crate::riccati::{solve_discounted_lyapunov, solve_riccati, solve_state_penalizing};
use crate::sim::{self, LinearStepper, SimConfig};
use crate::table::Table;

/// `x0' M x0 + gamma / (1 - gamma) tr(M Psi)`: the discounted value of a
/// quadratic stage cost with matrix `M` accumulated along the noisy system.
pub fn discounted_value(m: &Matrix, psi: &Matrix, gamma: f64, x0: &Vector) -> f64 {
    quad_form(m, x0) + gamma / (1.0 - gamma) * trace_product(m, psi)
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

pub fn optimal_cost(sys: &LqrSystem, x0: &Vector) -> Result<f64> {
    check_x0(sys, x0)?;
    let sol = solve_riccati(sys)?;
    Ok(discounted_value(&sol.k, sys.psi(), sys.gamma(), x0))
}

/// State-penalizing cost of the optimal policy at the system's own `r`.
pub fn state_penalizing_cost(sys: &LqrSystem, x0: &Vector) -> Result<f64> {
    check_x0(sys, x0)?;
    let sol = solve_riccati(sys)?;
    let s = solve_state_penalizing(sys, &sol.gain)?;
    Ok(discounted_value(&s.s, sys.psi(), sys.gamma(), x0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StdErrors {
    pub cost: f64,
    pub volatility: f64,
    pub efficiency: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FunctionalReport {
    pub cost: f64,
    pub volatility: f64,
    pub efficiency: f64,
    #[serde(skip)]
    pub x0: Vector,
    pub method: Method,
    pub std_errors: Option<StdErrors>,
}

impl FunctionalReport {
    /// `|cost + efficiency - r volatility|` relative to the cost scale.
    pub fn decomposition_defect(&self, r: f64) -> f64 {
        let scale = self.cost.abs().max(self.efficiency.abs()).max(r * self.volatility).max(1e-300);
        (self.cost + self.efficiency - r * self.volatility).abs() / scale
    }
}

/// Closed-form functionals via three discounted Lyapunov equations on the
/// closed loop `F = A + b gain`. The cost is solved from its own stage
/// matrix, so the decomposition identity is a genuine check.
pub fn evaluate_policy(sys: &LqrSystem, policy: &LinearPolicy, x0: &Vector) -> Result<FunctionalReport> {
    check_x0(sys, x0)?;
    policy.check_dim(sys.dim())?;
    let f = sys.closed_loop(policy);
    let g = policy.gain();
    let ggt = g * g.transpose();
    let (psi, gamma) = (sys.psi(), sys.gamma());

    let s = solve_discounted_lyapunov(&f, sys.q(), gamma)?.s;
    let w = solve_discounted_lyapunov(&f, &ggt, gamma)?.s;
    let c = solve_discounted_lyapunov(&f, &(sys.q() + &ggt * sys.r()), gamma)?.s;

    Ok(FunctionalReport {
        cost: discounted_value(&c, psi, gamma, x0),
        volatility: discounted_value(&w, psi, gamma, x0),
        efficiency: -discounted_value(&s, psi, gamma, x0),
        x0: x0.clone(),
        method: Method::ClosedForm,
        std_errors: None,
    })
}

pub fn evaluate_policy_mc(sys: &LqrSystem, policy: &LinearPolicy, x0: &Vector, cfg: &SimConfig) -> Result<FunctionalReport> {
    check_x0(sys, x0)?;
    let stepper = LinearStepper::new(sys, policy)?;
    let est = sim::simulate(&stepper, x0, cfg)?.estimates;
    Ok(FunctionalReport {
        cost: est.cost.mean,
        volatility: est.volatility.mean,
        efficiency: est.efficiency.mean,
        x0: x0.clone(),
        method: Method::MonteCarlo,
        std_errors: Some(StdErrors {
            cost: est.cost.std_error,
            volatility: est.volatility.std_error,
            efficiency: est.efficiency.std_error,
        }),
    })
}

/// `v(x) = x' M x + c`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    pub m: Matrix,
    pub c: f64,
}

impl QuadraticValue {
    pub fn zero(d: usize) -> Self {
        Self {
            m: Matrix::zeros(d, d),
            c: 0.0,
        }
    }

    pub fn eval(&self, x: &Vector) -> f64 {
        quad_form(&self.m, x) + self.c
    }
}

/// `(Tv)(x) = min_u { x'Qx + r u^2 + gamma E v(Ax + bu + n) }`, solved by
/// completing the square in `u`.
pub fn bellman_apply(sys: &LqrSystem, v: &QuadraticValue) -> Result<QuadraticValue> {
    let d = sys.dim();
    if v.m.nrows() != d || v.m.ncols() != d {
        return Err(Error::Dimension {
            context: "value matrix",
            expected: d,
            got: v.m.nrows(),
        });
    }
    let (a, b, gamma, r) = (sys.a(), sys.b(), sys.gamma(), sys.r());
    let m = symmetrize(&v.m);
    // E v(Ax + bu + n) = (Ax + bu)'M(Ax + bu) + tr(M Psi) + c, so the
    // u-dependent part is (r + gamma b'Mb) u^2 + 2 gamma u b'MAx.
    let curvature = r + gamma * quad_form(&m, b);
    if !(curvature > 0.0) {
        return Err(Error::invalid("value", "r + gamma b'Mb must be positive"));
    }
    let minimizer = (a.transpose() * (&m * b)) * (-gamma / curvature);
    let closed = a + b * minimizer.transpose();
    let m_next = sys.q() + closed.transpose() * &m * &closed * gamma + &minimizer * minimizer.transpose() * r;
    Ok(QuadraticValue {
        m: symmetrize(&m_next),
        c: gamma * (v.c + trace_product(&m, sys.psi())),
    })
}

/// Iterates `T` from `v_0 = 0` until the value at `x0` stabilises to
/// `rel_tol` relative; returns the final iterate and the iteration count.
pub fn value_iteration(sys: &LqrSystem, x0: &Vector, rel_tol: f64, max_iter: usize) -> Result<(QuadraticValue, usize)> {
    check_x0(sys, x0)?;
    let mut v = QuadraticValue::zero(sys.dim());
    let mut prev = v.eval(x0);
    for it in 1..=max_iter {
        v = bellman_apply(sys, &v)?;
        let now = v.eval(x0);
        if (now - prev).abs() <= rel_tol * now.abs().max(1e-300) {
            return Ok((v, it));
        }
        prev = now;
    }
    Err(Error::Divergence {
        iterations: max_iter,
        residual: f64::NAN,
        last_iterate: Box::new(v.m),
    })
}

/// First and second differences on a possibly nonuniform grid.
///
/// `d1[i] = v[i] - v[i-1]`. `d2[i]` is the change in chord slope around
/// point `i` scaled by the local half-width, which reduces to the ordinary
/// second difference on a uniform grid and is `<= 0` exactly for concave
/// data. Entries that need a missing neighbour are `None`.
pub fn differences(x: &[f64], v: &[f64]) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let n = v.len();
    assert_eq!(x.len(), n);
    let d1 = (0..n).map(|i| (i > 0).then(|| v[i] - v[i - 1])).collect();
    let d2 = (0..n)
        .map(|i| {
            (i > 0 && i + 1 < n).then(|| {
                let left = (v[i] - v[i - 1]) / (x[i] - x[i - 1]);
                let right = (v[i + 1] - v[i]) / (x[i + 1] - x[i]);
                (right - left) * (x[i + 1] - x[i - 1]) / 2.0
            })
        })
        .collect();
    (d1, d2)
}

/// Shape summary of a scanned curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShapeCheck {
    /// `max |value|`
    pub scale: f64,
    pub min_d1: f64,
    pub max_d2: f64,
    pub increasing: bool,
    pub nondecreasing: bool,
    pub concave: bool,
}

pub const CONCAVITY_RELATIVE_TOL: f64 = 1e-6;

pub fn shape_check(values: &[f64], d1: &[Option<f64>], d2: &[Option<f64>]) -> ShapeCheck {
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min_d1 = d1.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let max_d2 = d2.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = CONCAVITY_RELATIVE_TOL * scale;
    ShapeCheck {
        scale,
        min_d1,
        max_d2,
        increasing: min_d1 > 0.0,
        nondecreasing: min_d1 >= -tol,
        concave: max_d2 <= tol,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanFunctional {
    OptimalCost,
    StatePenalizing,
}

impl ScanFunctional {
    pub fn name(self) -> &'static str {
        match self {
            ScanFunctional::OptimalCost => "optimal_cost",
            ScanFunctional::StatePenalizing => "state_penalizing",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConcavityScan {
    pub which: ScanFunctional,
    pub r: Vec<f64>,
    pub value: Vec<f64>,
    pub d1: Vec<Option<f64>>,
    pub d2: Vec<Option<f64>>,
}

impl ConcavityScan {
    pub fn shape(&self) -> ShapeCheck {
        shape_check(&self.value, &self.d1, &self.d2)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["r", "value", "d1", "d2"]);
        for i in 0..self.r.len() {
            t.push(vec![self.r[i].into(), self.value[i].into(), self.d1[i].into(), self.d2[i].into()]);
        }
        t
    }
}

pub(crate) fn check_grid(name: &'static str, grid: &[f64], min_len: usize) -> Result<()> {
    if grid.len() < min_len {
        return Err(Error::invalid(name, format!("needs at least {min_len} points")));
    }
    if grid.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid(name, "entries must be positive and finite"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(name, "must be strictly increasing"));
    }
    Ok(())
}

/// Evaluates `J*_r(x0)` or `J_sp,r(x0)` with `r` replaced by each grid value.
pub fn concavity_scan(template: &LqrSystem, r_grid: &[f64], which: ScanFunctional, x0: &Vector) -> Result<ConcavityScan> {
    check_grid("r_grid", r_grid, 3)?;
    check_x0(template, x0)?;
    let value = r_grid
        .par_iter()
        .map(|&r| {
            let sys = template.with_r(r)?;
            match which {
                ScanFunctional::OptimalCost => optimal_cost(&sys, x0),
                ScanFunctional::StatePenalizing => state_penalizing_cost(&sys, x0),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let (d1, d2) = differences(r_grid, &value);
    Ok(ConcavityScan {
        which,
        r: r_grid.to_vec(),
        value,
        d1,
        d2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::logspace;
    use crate::model::{reference_market, NoiseSpec};
    use crate::sim::Horizon;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn x0() -> Vector {
        Vector::from_vec(vec![25.0, 25.0, 50.0])
    }

    fn scalar(r: f64) -> LqrSystem {
        LqrSystem::new(
            Matrix::from_element(1, 1, 1.1),
            Vector::from_element(1, 1.0),
            NoiseSpec::none(1),
            Matrix::from_element(1, 1, 1.0),
            r,
            0.9,
        )
        .unwrap()
    }

    /// Positive root of `gamma k^2 + (r - gamma q - gamma a^2 r) k - q r = 0`.
    fn scalar_k(a: f64, q: f64, r: f64, gamma: f64) -> f64 {
        let bq = r - gamma * q - gamma * a * a * r;
        (-bq + (bq * bq + 4.0 * gamma * q * r).sqrt()) / (2.0 * gamma)
    }

    #[test]
    fn zero_q_gives_zero_everywhere() {
        let sys = reference_market(0.01, 0.5).unwrap().system.with_q(Matrix::zeros(3, 3)).unwrap();
        assert_eq!(optimal_cost(&sys, &x0()).unwrap(), 0.0);
        let rep = evaluate_policy(&sys, &LinearPolicy::new(Vector::from_vec(vec![0.1, 0.0, -0.5])), &x0()).unwrap();
        assert_eq!(rep.efficiency, 0.0);
        let scan = concavity_scan(&sys, &[0.1, 1.0, 10.0], ScanFunctional::StatePenalizing, &x0()).unwrap();
        assert!(scan.value.iter().all(|&v| v == 0.0));
        assert!(scan.d1.iter().flatten().chain(scan.d2.iter().flatten()).all(|&d| d == 0.0));
    }

    #[test]
    fn silent_origin_costs_nothing() {
        let sys = reference_market(0.01, 0.5).unwrap().system.with_noise(NoiseSpec::none(3)).unwrap();
        assert_eq!(optimal_cost(&sys, &Vector::zeros(3)).unwrap(), 0.0);
    }

    #[test]
    fn zero_gain_has_zero_volatility() {
        let sys = reference_market(1.0, 0.5).unwrap().system;
        let rep = evaluate_policy(&sys, &LinearPolicy::zero(3), &x0()).unwrap();
        assert_eq!(rep.volatility, 0.0);
    }

    #[test]
    fn decomposition_holds_for_optimal_and_perturbed_gains() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let opt = solve_riccati(&sys).unwrap().gain;
        let rep = evaluate_policy(&sys, &opt, &x0()).unwrap();
        assert!(rep.decomposition_defect(sys.r()) <= 1e-9);
        assert_relative_eq!(rep.cost, optimal_cost(&sys, &x0()).unwrap(), max_relative = 1e-9);
    }

    #[test]
    fn value_iteration_matches_closed_form() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let (v, _) = value_iteration(&sys, &x0(), 1e-13, 10_000).unwrap();
        let closed = optimal_cost(&sys, &x0()).unwrap();
        assert_relative_eq!(v.eval(&x0()), closed, max_relative = 1e-6);
    }

    #[test]
    fn bellman_first_step_is_q() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let v1 = bellman_apply(&sys, &QuadraticValue::zero(3)).unwrap();
        assert_eq!(v1.m, *sys.q());
        assert_eq!(v1.c, 0.0);
    }

    #[test]
    fn bellman_fixed_point_at_riccati_solution() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let k = solve_riccati(&sys).unwrap().k;
        let g = sys.gamma();
        let v = QuadraticValue {
            c: g / (1.0 - g) * trace_product(&k, sys.psi()),
            m: k,
        };
        let tv = bellman_apply(&sys, &v).unwrap();
        assert!((&tv.m - &v.m).norm() <= 1e-9 * (1.0 + v.m.norm()));
        assert!((tv.c - v.c).abs() <= 1e-9 * (1.0 + v.c.abs()));
    }

    #[test]
    fn bellman_two_scalar_steps() {
        let sys = scalar(1.0);
        let (a, q, gamma) = (1.1, 1.0, 0.9);
        let k1 = q;
        let k2 = q + gamma * a * a * k1 - gamma * gamma * a * a * k1 * k1 / (gamma * k1 + 1.0);
        let v2 = bellman_apply(&sys, &bellman_apply(&sys, &QuadraticValue::zero(1)).unwrap()).unwrap();
        assert_relative_eq!(v2.m[(0, 0)], k2, max_relative = 1e-14);
    }

    #[test]
    fn bellman_rejects_nonconvex_value() {
        let sys = scalar(1.0);
        let v = QuadraticValue {
            m: Matrix::from_element(1, 1, -10.0),
            c: 0.0,
        };
        assert!(bellman_apply(&sys, &v).is_err());
    }

    #[test]
    fn reference_optimal_cost_scan_is_increasing_and_concave() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let shape = concavity_scan(&sys, &logspace(-2.0, 3.0, 25), ScanFunctional::OptimalCost, &x0())
            .unwrap()
            .shape();
        assert!(shape.increasing && shape.concave, "{shape:?}");
    }

    #[test]
    fn reference_state_penalizing_scan_shape() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let scan = concavity_scan(&sys, &logspace(-2.0, 3.0, 25), ScanFunctional::StatePenalizing, &x0()).unwrap();
        let shape = scan.shape();
        assert!(shape.increasing, "{shape:?}");
        // dJ_sp/dr = -r V'(r) vanishes at r = 0, so the curve starts out
        // convex and only bends over further up the grid.
        assert!(scan.d2[1].unwrap() > 0.0);
        let tol = CONCAVITY_RELATIVE_TOL * shape.scale;
        for (r, d2) in scan.r.iter().zip(&scan.d2) {
            if let (true, Some(d2)) = (*r >= 0.25, d2) {
                assert!(*d2 <= tol, "r = {r}: {d2}");
            }
        }
    }

    #[test]
    fn envelope_identity_links_cost_and_volatility() {
        // dJ*/dr = V(pi_r) and dJ_sp/dr = -r dV/dr
        let base = reference_market(1.0, 0.5).unwrap().system;
        let at = |r: f64| {
            let sys = base.with_r(r).unwrap();
            let g = solve_riccati(&sys).unwrap().gain;
            evaluate_policy(&sys, &g, &x0()).unwrap()
        };
        let (r, h) = (1.0, 1e-4);
        let (lo, mid, hi) = (at(r - h), at(r), at(r + h));
        let dj = (hi.cost - lo.cost) / (2.0 * h);
        assert_relative_eq!(dj, mid.volatility, max_relative = 1e-5);
        let dsp = (lo.efficiency - hi.efficiency) / (2.0 * h);
        let dv = (hi.volatility - lo.volatility) / (2.0 * h);
        assert_relative_eq!(dsp, -r * dv, max_relative = 1e-4);
    }

    #[test]
    fn scalar_scan_matches_closed_form_root() {
        let grid = logspace(-1.0, 2.0, 12);
        let x = Vector::from_element(1, 1.0);
        let scan = concavity_scan(&scalar(1.0), &grid, ScanFunctional::OptimalCost, &x).unwrap();
        let oracle: Vec<f64> = grid.iter().map(|&r| scalar_k(1.1, 1.0, r, 0.9)).collect();
        for (v, o) in scan.value.iter().zip(&oracle) {
            assert_relative_eq!(*v, *o, max_relative = 1e-8);
        }
        let (_, d2) = differences(&grid, &oracle);
        assert!(d2.iter().flatten().all(|&d| d <= 0.0));
        assert!(scan.shape().concave && scan.shape().increasing);
    }

    #[test]
    fn differences_reduce_to_uniform_second_difference() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let v = [0.0, 1.0, 4.0, 9.0];
        let (d1, d2) = differences(&x, &v);
        assert_eq!(d1, vec![None, Some(1.0), Some(3.0), Some(5.0)]);
        assert_eq!(d2, vec![None, Some(2.0), Some(2.0), None]);
    }

    #[test]
    fn scan_rejects_bad_grids() {
        let sys = scalar(1.0);
        let x = Vector::from_element(1, 1.0);
        assert!(concavity_scan(&sys, &[1.0, 2.0], ScanFunctional::OptimalCost, &x).is_err());
        assert!(concavity_scan(&sys, &[1.0, 3.0, 2.0], ScanFunctional::OptimalCost, &x).is_err());
        assert!(concavity_scan(&sys, &[0.0, 1.0, 2.0], ScanFunctional::OptimalCost, &x).is_err());
    }

    #[test]
    fn volatility_orders_of_magnitude() {
        let base = reference_market(0.01, 0.5).unwrap().system;
        let vol = |r: f64| {
            let sys = base.with_r(r).unwrap();
            let g = solve_riccati(&sys).unwrap().gain;
            evaluate_policy(&sys, &g, &x0()).unwrap().volatility
        };
        let (lo, hi) = (vol(0.01), vol(1e3));
        assert!((1e2..1e4).contains(&lo), "{lo}");
        assert!((1e-3..1.0).contains(&hi), "{hi}");
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        let sys = reference_market(1.0, 0.5).unwrap().system;
        let g = solve_riccati(&sys).unwrap().gain;
        let closed = evaluate_policy(&sys, &g, &x0()).unwrap();
        let cfg = SimConfig {
            seed: 3,
            n_paths: 4000,
            horizon: Horizon::Auto,
            ..SimConfig::default()
        };
        let mc = evaluate_policy_mc(&sys, &g, &x0(), &cfg).unwrap();
        let se = mc.std_errors.unwrap();
        assert!((mc.volatility - closed.volatility).abs() <= 3.0 * se.volatility);
        assert!((mc.efficiency - closed.efficiency).abs() <= 3.0 * se.efficiency);
        assert!((mc.cost - closed.cost).abs() <= 3.0 * se.cost);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn optimal_gain_is_never_beaten(seed in proptest::array::uniform3(-1.0f64..1.0), scale in 0.01f64..0.3) {
            let sys = reference_market(1.0, 0.5).unwrap().system;
            let opt = solve_riccati(&sys).unwrap().gain;
            let pert = opt.gain() + Vector::from_row_slice(&seed) * scale;
            let policy = LinearPolicy::new(pert);
            if let Ok(rep) = evaluate_policy(&sys, &policy, &x0()) {
                let best = optimal_cost(&sys, &x0()).unwrap();
                prop_assert!(rep.cost >= best - 1e-9 * best.abs());
                prop_assert!(rep.decomposition_defect(sys.r()) <= 1e-9);
            }
        }

        #[test]
        fn symmetric_q_is_unchanged_by_symmetrization(d in proptest::array::uniform3(0.1f64..3.0), off in -0.05f64..0.05) {
            let base = reference_market(0.5, 0.5).unwrap().system;
            let mut q = Matrix::from_diagonal(&Vector::from_row_slice(&d));
            q[(0, 1)] = off;
            q[(1, 0)] = off;
            let a = optimal_cost(&base.with_q(q.clone()).unwrap(), &x0()).unwrap();
            let b = optimal_cost(&base.with_q(symmetrize(&q)).unwrap(), &x0()).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }
}
