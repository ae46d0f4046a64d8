//! Fixed-point solvers for the discounted Riccati and Lyapunov equations.
//!
//! The Riccati map is iterated in value-iteration form starting from `K_0 = Q`:
//!
//! ```text
//! K <- Q + A' [ gamma K - gamma^2 / (gamma b'Kb + r) * K b b' K ] A
//! ```
//!
//! and the optimal gain is `-gamma / (gamma b'Kb + r) * b'KA`. Lyapunov
//! equations `W = C + gamma F'WF` are iterated from `W_0 = 0` (or any
//! supplied PSD start).

use crate::error::{Error, Result};
use crate::linalg::{self, symmetrize};
use crate::model::{check_controllability, LinearPolicy, LqrSystem, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative stopping tolerance: `|X_{t+1} - X_t|_F <= tol (1 + |X_t|_F)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverWarning {
    NotControllable,
    /// `rho(F) >= 1`, but the discounted sums still contract.
    DiscountStabilizedOnly,
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub k: Matrix,
    pub gain: LinearPolicy,
    pub iterations: usize,
    pub residual: f64,
    pub warnings: Vec<SolverWarning>,
}

#[derive(Debug, Clone)]
pub struct LyapunovSolution {
    pub s: Matrix,
    pub iterations: usize,
    pub residual: f64,
    pub warnings: Vec<SolverWarning>,
}

/// One application of the discounted Riccati map with control weight `weight`.
pub fn riccati_map(a: &Matrix, b: &Vector, q: &Matrix, weight: f64, gamma: f64, k: &Matrix) -> Matrix {
    let kb = k * b;
    let denom = gamma * b.dot(&kb) + weight;
    let inner = k * gamma - (&kb * kb.transpose()) * (gamma * gamma / denom);
    symmetrize(&(q + a.transpose() * inner * a))
}

/// `-gamma / (gamma b'Kb + weight) * b'KA`
pub fn optimal_gain(a: &Matrix, b: &Vector, k: &Matrix, weight: f64, gamma: f64) -> LinearPolicy {
    let kb = k * b;
    let denom = gamma * b.dot(&kb) + weight;
    let row = (a.transpose() * &kb) * (-gamma / denom);
    LinearPolicy::new(row)
}

/// Frobenius defect of `k` as a fixed point of the Riccati map.
pub fn riccati_residual(a: &Matrix, b: &Vector, q: &Matrix, weight: f64, gamma: f64, k: &Matrix) -> f64 {
    (riccati_map(a, b, q, weight, gamma, k) - k).norm()
}

pub fn solve_riccati(sys: &LqrSystem) -> Result<RiccatiSolution> {
    solve_riccati_with(sys, sys.r(), SolverOptions::default())
}

pub fn solve_riccati_lambda(sys: &LqrSystem, lambda: f64) -> Result<RiccatiSolution> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid("lambda", format!("must be > 0, got {lambda}")));
    }
    solve_riccati_with(sys, lambda, SolverOptions::default())
}

/// Solves the Riccati equation of `sys` with `weight` in place of `r`.
pub fn solve_riccati_with(sys: &LqrSystem, weight: f64, opts: SolverOptions) -> Result<RiccatiSolution> {
    let (a, b, q, gamma) = (sys.a(), sys.b(), sys.q(), sys.gamma());
    let mut warnings = Vec::new();
    if !check_controllability(sys).controllable {
        warnings.push(SolverWarning::NotControllable);
    }
    let mut k = q.clone();
    for it in 1..=opts.max_iter {
        let next = riccati_map(a, b, q, weight, gamma, &k);
        let step = (&next - &k).norm();
        let scale = 1.0 + k.norm();
        k = next;
        if !step.is_finite() {
            break;
        }
        if step <= opts.tol * scale {
            let residual = riccati_residual(a, b, q, weight, gamma, &k);
            let gain = optimal_gain(a, b, &k, weight, gamma);
            return Ok(RiccatiSolution {
                k,
                gain,
                iterations: it,
                residual,
                warnings,
            });
        }
    }
    let residual = riccati_residual(a, b, q, weight, gamma, &k);
    Err(Error::Divergence {
        iterations: opts.max_iter,
        residual,
        last_iterate: Box::new(k),
    })
}

/// Discounted cost matrix of the state term alone under `policy`:
/// `S = Q + gamma F'SF` with `F = A + b gain`.
pub fn solve_state_penalizing(sys: &LqrSystem, policy: &LinearPolicy) -> Result<LyapunovSolution> {
    policy.check_dim(sys.dim())?;
    let f = sys.closed_loop(policy);
    solve_discounted_lyapunov(&f, sys.q(), sys.gamma())
}

pub fn solve_state_penalizing_from(sys: &LqrSystem, policy: &LinearPolicy, s0: &Matrix) -> Result<LyapunovSolution> {
    policy.check_dim(sys.dim())?;
    let f = sys.closed_loop(policy);
    solve_discounted_lyapunov_from(&f, sys.q(), sys.gamma(), s0, SolverOptions::default())
}

pub fn solve_discounted_lyapunov(f: &Matrix, c: &Matrix, gamma: f64) -> Result<LyapunovSolution> {
    let s0 = Matrix::zeros(f.nrows(), f.nrows());
    solve_discounted_lyapunov_from(f, c, gamma, &s0, SolverOptions::default())
}

/// `W = C + gamma F'WF`, iterated from `s0`. Requires `gamma rho(F)^2 < 1`.
pub fn solve_discounted_lyapunov_from(
    f: &Matrix,
    c: &Matrix,
    gamma: f64,
    s0: &Matrix,
    opts: SolverOptions,
) -> Result<LyapunovSolution> {
    let d = f.nrows();
    if f.ncols() != d || c.nrows() != d || c.ncols() != d || s0.nrows() != d || s0.ncols() != d {
        return Err(Error::Dimension {
            context: "Lyapunov operands",
            expected: d,
            got: c.nrows(),
        });
    }
    let rho = linalg::spectral_radius(f);
    let contraction = gamma * rho * rho;
    if contraction >= 1.0 {
        return Err(Error::Unstable {
            spectral_radius: rho,
            contraction,
        });
    }
    let mut warnings = Vec::new();
    if rho >= 1.0 {
        warnings.push(SolverWarning::DiscountStabilizedOnly);
    }
    let c = symmetrize(c);
    let ft = f.transpose();
    let map = |w: &Matrix| symmetrize(&(&c + (&ft * w * f) * gamma));
    let mut w = symmetrize(s0);
    for it in 1..=opts.max_iter {
        let next = map(&w);
        let step = (&next - &w).norm();
        let scale = 1.0 + w.norm();
        w = next;
        if step <= opts.tol * scale {
            let residual = (map(&w) - &w).norm();
            return Ok(LyapunovSolution {
                s: w,
                iterations: it,
                residual,
                warnings,
            });
        }
    }
    let residual = (map(&w) - &w).norm();
    Err(Error::Divergence {
        iterations: opts.max_iter,
        residual,
        last_iterate: Box::new(w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_market, NoiseSpec};
    use approx::assert_relative_eq;

    /// Positive root of `k = q + gamma a^2 k w / (gamma k + w)` with b = 1.
    fn scalar_root(a: f64, q: f64, w: f64, gamma: f64) -> f64 {
        // gamma k^2 + (w - gamma q - gamma a^2 w) k - q w = 0
        let qa = gamma;
        let qb = w - gamma * q - gamma * a * a * w;
        let qc = -q * w;
        (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa)
    }

    fn scalar(a: f64, q: f64, r: f64, gamma: f64) -> LqrSystem {
        LqrSystem::new(
            Matrix::from_element(1, 1, a),
            Vector::from_element(1, 1.0),
            NoiseSpec::none(1),
            Matrix::from_element(1, 1, q),
            r,
            gamma,
        )
        .unwrap()
    }

    #[test]
    fn scalar_matches_quadratic_root() {
        let sol = solve_riccati(&scalar(1.1, 1.0, 1.0, 0.9)).unwrap();
        let k = scalar_root(1.1, 1.0, 1.0, 0.9);
        assert!((sol.k[(0, 0)] - k).abs() < 1e-8, "{} vs {k}", sol.k[(0, 0)]);
    }

    #[test]
    fn scalar_lambda_matches_quadratic_root() {
        let sol = solve_riccati_lambda(&scalar(1.1, 1.0, 1.0, 0.9), 2.0).unwrap();
        let k = scalar_root(1.1, 1.0, 2.0, 0.9);
        assert!((sol.k[(0, 0)] - k).abs() < 1e-8);
    }

    #[test]
    fn lambda_equal_to_r_is_bitwise_identical() {
        let sys = reference_market(0.7, 0.5).unwrap().system;
        let a = solve_riccati(&sys).unwrap();
        let b = solve_riccati_lambda(&sys, 0.7).unwrap();
        assert_eq!(a.k, b.k);
        assert_eq!(a.gain, b.gain);
    }

    #[test]
    fn nonpositive_lambda_rejected() {
        let sys = scalar(1.1, 1.0, 1.0, 0.9);
        assert!(solve_riccati_lambda(&sys, 0.0).is_err());
        assert!(solve_riccati_lambda(&sys, -1.0).is_err());
    }

    #[test]
    fn zero_q_gives_zero_solution() {
        let sys = reference_market(0.01, 0.5)
            .unwrap()
            .system
            .with_q(Matrix::zeros(3, 3))
            .unwrap();
        let sol = solve_riccati(&sys).unwrap();
        assert_eq!(sol.k, Matrix::zeros(3, 3));
        assert_eq!(sol.gain.gain(), &Vector::zeros(3));
    }

    #[test]
    fn reference_market_residual_and_gain_formula() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let sol = solve_riccati(&sys).unwrap();
        assert!(sol.residual <= 1e-9, "residual {}", sol.residual);
        assert!(sol.warnings.is_empty());
        let kb = &sol.k * sys.b();
        let expected = (sys.a().transpose() * &kb) * (-sys.gamma() / (sys.gamma() * sys.b().dot(&kb) + sys.r()));
        assert_relative_eq!(sol.gain.gain(), &expected, epsilon = 1e-14);
        assert!(linalg::min_eigenvalue(&sol.k) > 0.0);
        assert!(linalg::spectral_radius(&sys.closed_loop(&sol.gain)) < 1.0);
    }

    #[test]
    fn value_iterates_are_monotone_from_q() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let x0 = Vector::from_vec(vec![25.0, 25.0, 50.0]);
        let mut k = sys.q().clone();
        let mut prev = linalg::quad_form(&k, &x0);
        for _ in 0..60 {
            k = riccati_map(sys.a(), sys.b(), sys.q(), sys.r(), sys.gamma(), &k);
            let v = linalg::quad_form(&k, &x0);
            assert!(v >= prev - 1e-9 * prev.abs());
            prev = v;
        }
    }

    #[test]
    fn lambda_solutions_increase_in_psd_order() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let ks: Vec<Matrix> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&l| solve_riccati_lambda(&sys, l).unwrap().k)
            .collect();
        for pair in ks.windows(2) {
            assert!(linalg::min_eigenvalue(&(&pair[1] - &pair[0])) >= -1e-8);
        }
    }

    #[test]
    fn state_penalizing_trivial_cases() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let zero_q = sys.with_q(Matrix::zeros(3, 3)).unwrap();
        let opt = solve_riccati(&sys).unwrap().gain;
        assert_eq!(solve_state_penalizing(&zero_q, &opt).unwrap().s, Matrix::zeros(3, 3));

        let a0 = LqrSystem::new(
            Matrix::zeros(3, 3),
            sys.b().clone(),
            NoiseSpec::none(3),
            sys.q().clone(),
            1.0,
            0.5,
        )
        .unwrap();
        let s = solve_state_penalizing(&a0, &LinearPolicy::zero(3)).unwrap().s;
        assert_relative_eq!(s, sys.q().clone(), epsilon = 1e-15);
    }

    #[test]
    fn state_penalizing_independent_of_start() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let opt = solve_riccati(&sys).unwrap();
        let from_zero = solve_state_penalizing(&sys, &opt.gain).unwrap();
        let from_eye = solve_state_penalizing_from(&sys, &opt.gain, &Matrix::identity(3, 3)).unwrap();
        assert!(from_zero.residual <= 1e-9);
        assert!((&from_zero.s - &from_eye.s).norm() <= 1e-8);
    }

    #[test]
    fn state_penalizing_closed_form_matches_explicit_closed_loop() {
        // F = (I - gamma/(gamma b'Kb + r) b b'K) A is the same matrix as A + b gain.
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let sol = solve_riccati(&sys).unwrap();
        let kb = &sol.k * sys.b();
        let c = sys.gamma() / (sys.gamma() * sys.b().dot(&kb) + sys.r());
        let f = (Matrix::identity(3, 3) - (sys.b() * kb.transpose()) * c) * sys.a();
        assert_relative_eq!(f, sys.closed_loop(&sol.gain), epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_trivial_and_geometric() {
        let eye = Matrix::identity(2, 2);
        let zero = Matrix::zeros(2, 2);
        assert_eq!(solve_discounted_lyapunov(&(&eye * 0.5), &zero, 0.8).unwrap().s, zero);
        assert_eq!(solve_discounted_lyapunov(&zero, &eye, 0.8).unwrap().s, eye);
        let w = solve_discounted_lyapunov(&(&eye * 0.5), &eye, 0.8).unwrap().s;
        assert_relative_eq!(w, &eye * 1.25, epsilon = 1e-9);
    }

    #[test]
    fn lyapunov_rejects_expanding_loop() {
        let f = Matrix::identity(2, 2) * 1.2;
        match solve_discounted_lyapunov(&f, &Matrix::identity(2, 2), 0.9) {
            Err(Error::Unstable { contraction, .. }) => assert!(contraction >= 1.0),
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn lyapunov_accepts_discount_stabilized_loop_with_warning() {
        let f = Matrix::identity(2, 2) * 1.05;
        let sol = solve_discounted_lyapunov(&f, &Matrix::identity(2, 2), 0.5).unwrap();
        assert_eq!(sol.warnings, vec![SolverWarning::DiscountStabilizedOnly]);
        let expected = 1.0 / (1.0 - 0.5 * 1.05 * 1.05);
        assert!((sol.s[(0, 0)] - expected).abs() < 1e-8);
    }

    #[test]
    fn uncontrollable_system_flagged() {
        let sys = LqrSystem::new(
            Matrix::identity(2, 2) * 0.5,
            Vector::from_vec(vec![1.0, 0.0]),
            NoiseSpec::none(2),
            Matrix::identity(2, 2),
            1.0,
            0.5,
        )
        .unwrap();
        let sol = solve_riccati(&sys).unwrap();
        assert!(sol.warnings.contains(&SolverWarning::NotControllable));
    }

    #[test]
    fn iteration_cap_reports_divergence() {
        let sys = reference_market(0.01, 0.5).unwrap().system;
        let opts = SolverOptions { tol: 1e-10, max_iter: 2 };
        match solve_riccati_with(&sys, 0.01, opts) {
            Err(Error::Divergence { iterations, last_iterate, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(last_iterate.nrows(), 3);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
