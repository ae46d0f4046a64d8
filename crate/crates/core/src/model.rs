//! Systems, policies and noise for the scalar-input discounted LQR
//!
//! `x_{t+1} = A x_t + b u_t + n_t`, stage cost `x'Qx + r u^2`, discount `gamma`.
//! The constant activation term is always zero.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    None,
}

/// Zero-mean IID state disturbance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    covariance: Matrix,
    family: NoiseFamily,
}

impl NoiseSpec {
    pub fn gaussian(covariance: Matrix) -> Result<Self> {
        if covariance.nrows() != covariance.ncols() {
            return Err(Error::invalid("noise.covariance", "must be square"));
        }
        let covariance = linalg::clip_psd(&covariance, linalg::PSD_TOLERANCE).ok_or_else(|| {
            Error::invalid("noise.covariance", "not symmetric positive semidefinite")
        })?;
        Ok(Self {
            covariance,
            family: NoiseFamily::Gaussian,
        })
    }

    pub fn gaussian_diagonal(diag: &[f64]) -> Result<Self> {
        Self::gaussian(Matrix::from_diagonal(&Vector::from_column_slice(diag)))
    }

    pub fn none(d: usize) -> Self {
        Self {
            covariance: Matrix::zeros(d, d),
            family: NoiseFamily::None,
        }
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn family(&self) -> NoiseFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn is_silent(&self) -> bool {
        self.family == NoiseFamily::None || self.covariance.iter().all(|&v| v == 0.0)
    }
}

/// The regulator `(A, b, F_n, Q, r, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSystem {
    a: Matrix,
    b: Vector,
    noise: NoiseSpec,
    q: Matrix,
    r: f64,
    gamma: f64,
}

impl LqrSystem {
    pub fn new(a: Matrix, b: Vector, noise: NoiseSpec, q: Matrix, r: f64, gamma: f64) -> Result<Self> {
        let d = a.nrows();
        if d == 0 {
            return Err(Error::invalid("A", "state dimension must be positive"));
        }
        if a.ncols() != d {
            return Err(Error::Dimension {
                context: "A columns",
                expected: d,
                got: a.ncols(),
            });
        }
        if b.len() != d {
            return Err(Error::Dimension {
                context: "b length",
                expected: d,
                got: b.len(),
            });
        }
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::Dimension {
                context: "Q size",
                expected: d,
                got: q.nrows().max(q.ncols()),
            });
        }
        if noise.dim() != d {
            return Err(Error::Dimension {
                context: "noise covariance size",
                expected: d,
                got: noise.dim(),
            });
        }
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::invalid("r", format!("must be > 0, got {r}")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid("gamma", format!("must lie in (0, 1), got {gamma}")));
        }
        if a.iter().chain(b.iter()).chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("A/b/Q", "entries must be finite"));
        }
        let q = linalg::clip_psd(&q, linalg::PSD_TOLERANCE)
            .ok_or_else(|| Error::invalid("Q", "not symmetric positive semidefinite"))?;
        Ok(Self {
            a,
            b,
            noise,
            q,
            r,
            gamma,
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }
    pub fn b(&self) -> &Vector {
        &self.b
    }
    pub fn q(&self) -> &Matrix {
        &self.q
    }
    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }
    pub fn psi(&self) -> &Matrix {
        self.noise.covariance()
    }
    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn with_r(&self, r: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.noise.clone(), self.q.clone(), r, self.gamma)
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.noise.clone(), self.q.clone(), self.r, gamma)
    }

    pub fn with_q(&self, q: Matrix) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.noise.clone(), q, self.r, self.gamma)
    }

    pub fn with_noise(&self, noise: NoiseSpec) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), noise, self.q.clone(), self.r, self.gamma)
    }

    /// `gamma / (1 - gamma)`, the weight on the stationary noise term.
    pub fn noise_weight(&self) -> f64 {
        self.gamma / (1.0 - self.gamma)
    }

    /// Closed-loop matrix `A + b * gain`.
    pub fn closed_loop(&self, policy: &LinearPolicy) -> Matrix {
        &self.a + &self.b * policy.gain().transpose()
    }
}

/// Stationary deterministic linear feedback `u = gain . x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    gain: Vector,
}

impl LinearPolicy {
    pub fn new(gain: Vector) -> Self {
        Self { gain }
    }

    pub fn zero(d: usize) -> Self {
        Self {
            gain: Vector::zeros(d),
        }
    }

    pub fn gain(&self) -> &Vector {
        &self.gain
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn control(&self, x: &Vector) -> f64 {
        self.gain.dot(x)
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.gain.len() != d {
            return Err(Error::Dimension {
                context: "policy gain length",
                expected: d,
                got: self.gain.len(),
            });
        }
        Ok(())
    }
}

/// Coefficients of the price-taking (demand, supply, price) market.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    pub beta: f64,
    pub sigma: f64,
    pub phi1: f64,
    pub phi2: f64,
}

impl MarketParams {
    /// `[[beta, 0, -phi1], [0, sigma, phi2], [0, 0, 1]]`
    pub fn a_matrix(&self) -> Matrix {
        Matrix::from_row_slice(
            3,
            3,
            &[
                self.beta, 0.0, -self.phi1, //
                0.0, self.sigma, self.phi2, //
                0.0, 0.0, 1.0,
            ],
        )
    }

    /// Reads the coefficients back out of a matrix with the market pattern.
    pub fn from_a(a: &Matrix) -> Option<Self> {
        if a.nrows() < 3 || a.ncols() < 3 {
            return None;
        }
        let structural_zero = [(0, 1), (1, 0), (2, 0), (2, 1)];
        if structural_zero.iter().any(|&ij| a[ij] != 0.0) || a[(2, 2)] != 1.0 {
            return None;
        }
        Some(Self {
            beta: a[(0, 0)],
            sigma: a[(1, 1)],
            phi1: -a[(0, 2)],
            phi2: a[(1, 2)],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketInstance {
    pub system: LqrSystem,
    pub labels: Vec<String>,
    pub params: Option<MarketParams>,
}

pub fn build_price_taking_market(
    params: MarketParams,
    noise: NoiseSpec,
    q: Matrix,
    r: f64,
    gamma: f64,
) -> Result<MarketInstance> {
    for (name, v) in [
        ("beta", params.beta),
        ("sigma", params.sigma),
        ("phi1", params.phi1),
        ("phi2", params.phi2),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid(name, format!("must be a nonnegative real, got {v}")));
        }
    }
    let system = LqrSystem::new(
        params.a_matrix(),
        Vector::from_column_slice(&[0.0, 0.0, 1.0]),
        noise,
        q,
        r,
        gamma,
    )?;
    Ok(MarketInstance {
        system,
        labels: vec!["demand".into(), "supply".into(), "price".into()],
        params: Some(params),
    })
}

/// The reference market: beta=0.995, sigma=0.9, phi1=0.5, phi2=0.25,
/// Psi=diag(2,2,0), and the positive definite Q below.
pub fn reference_market(r: f64, gamma: f64) -> Result<MarketInstance> {
    build_price_taking_market(
        MarketParams {
            beta: 0.995,
            sigma: 0.900,
            phi1: 0.5,
            phi2: 0.25,
        },
        NoiseSpec::gaussian_diagonal(&[2.0, 2.0, 0.0])?,
        reference_q(),
        r,
        gamma,
    )
}

pub fn reference_q() -> Matrix {
    Matrix::from_row_slice(
        3,
        3,
        &[
            2.38, -1.73, -0.15, //
            -1.73, 2.15, 0.16, //
            -0.15, 0.16, 0.52,
        ],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controllability {
    pub rank: usize,
    pub controllable: bool,
    pub matrix: Matrix,
}

pub fn check_controllability(sys: &LqrSystem) -> Controllability {
    let matrix = linalg::krylov(sys.a(), sys.b());
    let rank = linalg::numerical_rank(&matrix);
    Controllability {
        rank,
        controllable: rank == sys.dim(),
        matrix,
    }
}

/// Below this, Q is not treated as positive definite for the shortcut.
const OBSERVABILITY_PD_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observability {
    pub observable: bool,
    pub min_eigenvalue_q: f64,
}

/// Observability of `(A, C)` with `C = sqrt(Lambda) M` from `Q = M' Lambda M`.
pub fn check_observability(sys: &LqrSystem) -> Observability {
    let min_eigenvalue_q = linalg::min_eigenvalue(sys.q());
    if min_eigenvalue_q > OBSERVABILITY_PD_THRESHOLD {
        return Observability {
            observable: true,
            min_eigenvalue_q,
        };
    }
    let c = linalg::psd_sqrt(sys.q());
    let rank = linalg::numerical_rank(&linalg::observability_matrix(sys.a(), &c));
    Observability {
        observable: rank == sys.dim(),
        min_eigenvalue_q,
    }
}
