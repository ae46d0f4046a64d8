//! Seeded Monte Carlo estimation of discounted functionals.
//!
//! Every path draws from its own ChaCha stream keyed by `(seed, stream, path)`,
//! and the reduction runs in path order, so results do not depend on how
//! rayon schedules the paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{LinearPolicy, LqrSystem, Matrix, Vector};

pub type PathRng = ChaCha8Rng;

/// Steps used for the pilot path that sizes the automatic horizon.
pub const PILOT_STEPS: usize = 100;
const PILOT_SAFETY: f64 = 10.0;
const MAX_AUTO_HORIZON: usize = 200_000;
const MAX_FLAGGED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub n_paths: usize,
    pub horizon: Horizon,
    pub truncation_eps: f64,
    /// Number of leading paths whose trajectories are kept in the batch.
    #[serde(default)]
    pub record_paths: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_paths: 10_000,
            horizon: Horizon::Auto,
            truncation_eps: 1e-6,
            record_paths: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::invalid("sim.n_paths", "must be positive"));
        }
        if let Horizon::Fixed(0) = self.horizon {
            return Err(Error::invalid("sim.horizon", "must be positive"));
        }
        if !(self.truncation_eps.is_finite() && self.truncation_eps > 0.0) {
            return Err(Error::invalid("sim.truncation_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Smallest `T >= 1` with `gamma^T * bound / (1 - gamma) <= eps`.
pub fn derive_horizon(gamma: f64, eps: f64, cost_scale_bound: f64) -> usize {
    if cost_scale_bound <= 0.0 {
        return 1;
    }
    let mut t = 1usize;
    let mut g = gamma;
    while g * cost_scale_bound / (1.0 - gamma) > eps && t < MAX_AUTO_HORIZON {
        t += 1;
        g *= gamma;
    }
    t
}

/// Independent stream for path `path` of experiment stream `stream`.
pub fn path_rng(seed: u64, stream: u64, path: u64) -> PathRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(path);
    rng
}

pub fn standard_normal(rng: &mut PathRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws `factor * z` with `z ~ N(0, I)`.
pub fn correlated_normal(factor: &Matrix, rng: &mut PathRng) -> Vector {
    let z = Vector::from_fn(factor.ncols(), |_, _| standard_normal(rng));
    factor * z
}

/// One realization of the controlled process.
pub trait Stepper: Sync {
    /// Per-path randomness fixed at `t = 0` (e.g. a mixture's policy index).
    type PathState: Send;

    fn dim(&self) -> usize;
    fn n_controls(&self) -> usize {
        1
    }
    fn gamma(&self) -> f64;
    /// Weight on control energy in the total cost.
    fn control_weight(&self) -> f64;
    fn start(&self, rng: &mut PathRng) -> Self::PathState;
    /// Writes the controls applied at `x` into `u` and returns the next state.
    fn step(&self, state: &Self::PathState, t: usize, x: &Vector, u: &mut [f64], rng: &mut PathRng) -> Vector;
    fn state_cost(&self, x: &Vector) -> f64;
}

/// Linear system under linear feedback with Gaussian disturbance.
pub struct LinearStepper<'a> {
    sys: &'a LqrSystem,
    policy: &'a LinearPolicy,
    noise_factor: Option<Matrix>,
}

impl<'a> LinearStepper<'a> {
    pub fn new(sys: &'a LqrSystem, policy: &'a LinearPolicy) -> Result<Self> {
        policy.check_dim(sys.dim())?;
        let noise_factor = if sys.noise().is_silent() {
            None
        } else {
            Some(linalg::psd_sqrt(sys.psi()))
        };
        Ok(Self {
            sys,
            policy,
            noise_factor,
        })
    }
}

pub(crate) fn linear_step(
    sys: &LqrSystem,
    gain: &Vector,
    noise_factor: Option<&Matrix>,
    x: &Vector,
    rng: &mut PathRng,
) -> (Vector, f64) {
    let u = gain.dot(x);
    let mut next = sys.a() * x + sys.b() * u;
    if let Some(l) = noise_factor {
        next += correlated_normal(l, rng);
    }
    (next, u)
}

impl Stepper for LinearStepper<'_> {
    type PathState = ();

    fn dim(&self) -> usize {
        self.sys.dim()
    }
    fn gamma(&self) -> f64 {
        self.sys.gamma()
    }
    fn control_weight(&self) -> f64 {
        self.sys.r()
    }
    fn start(&self, _rng: &mut PathRng) {}
    fn step(&self, _: &(), _t: usize, x: &Vector, u: &mut [f64], rng: &mut PathRng) -> Vector {
        let (next, control) = linear_step(self.sys, self.policy.gain(), self.noise_factor.as_ref(), x, rng);
        u[0] = control;
        next
    }
    fn state_cost(&self, x: &Vector) -> f64 {
        linalg::quad_form(self.sys.q(), x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    fn from_samples<I: Iterator<Item = f64> + Clone>(samples: I) -> Self {
        let n = samples.clone().count();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std_error: f64::NAN,
            };
        }
        let mean = samples.clone().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, std_error: 0.0 };
        }
        let var = samples.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
        }
    }

    /// |mean - value| measured in standard errors (0 when both coincide).
    pub fn z_score(&self, value: f64) -> f64 {
        let diff = (self.mean - value).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.std_error
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Estimates {
    pub cost: Estimate,
    pub volatility: Estimate,
    pub efficiency: Estimate,
    /// Discounted control energy per control channel.
    pub channel_volatility: Vec<Estimate>,
}

#[derive(Debug, Clone)]
pub struct PathRecord {
    pub path_id: usize,
    pub states: Vec<Vector>,
    pub controls: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimBatch {
    pub estimates: Estimates,
    pub paths: Vec<PathRecord>,
    pub config: SimConfig,
    pub horizon: usize,
    pub n_flagged: usize,
}

struct PathOutcome {
    state_sum: f64,
    control_sums: Vec<f64>,
    record: Option<PathRecord>,
    finite: bool,
}

fn run_path<S: Stepper>(
    stepper: &S,
    x0: &Vector,
    seed: u64,
    stream: u64,
    path: usize,
    horizon: usize,
    record: bool,
) -> PathOutcome {
    let mut rng = path_rng(seed, stream, path as u64);
    let state = stepper.start(&mut rng);
    let gamma = stepper.gamma();
    let mut u = vec![0.0; stepper.n_controls()];
    let mut x = x0.clone();
    let mut discount = 1.0;
    let mut state_sum = 0.0;
    let mut control_sums = vec![0.0; u.len()];
    let mut rec = record.then(|| PathRecord {
        path_id: path,
        states: Vec::with_capacity(horizon),
        controls: Vec::with_capacity(horizon),
    });
    let mut finite = true;
    for t in 0..horizon {
        let next = stepper.step(&state, t, &x, &mut u, &mut rng);
        state_sum += discount * stepper.state_cost(&x);
        for (acc, ui) in control_sums.iter_mut().zip(&u) {
            *acc += discount * ui * ui;
        }
        if let Some(r) = rec.as_mut() {
            r.states.push(x.clone());
            r.controls.push(u.clone());
        }
        if !next.iter().all(|v| v.is_finite()) || !state_sum.is_finite() {
            finite = false;
            break;
        }
        x = next;
        discount *= gamma;
    }
    PathOutcome {
        state_sum,
        control_sums,
        record: rec,
        finite,
    }
}

/// Max per-step `x'Qx + (1 + r) |u|^2` along a 100-step pilot path, times 10.
pub fn pilot_cost_bound<S: Stepper>(stepper: &S, x0: &Vector, seed: u64, stream: u64) -> f64 {
    let mut rng = path_rng(seed, stream ^ 0x5eed_0f_9170, u64::MAX);
    let state = stepper.start(&mut rng);
    let mut u = vec![0.0; stepper.n_controls()];
    let mut x = x0.clone();
    let mut worst: f64 = 0.0;
    for t in 0..PILOT_STEPS {
        let next = stepper.step(&state, t, &x, &mut u, &mut rng);
        let c = stepper.state_cost(&x) + (1.0 + stepper.control_weight()) * u.iter().map(|v| v * v).sum::<f64>();
        if !c.is_finite() {
            break;
        }
        worst = worst.max(c);
        x = next;
        if !x.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    PILOT_SAFETY * worst
}

pub fn resolve_horizon<S: Stepper>(stepper: &S, x0: &Vector, cfg: &SimConfig, stream: u64) -> usize {
    match cfg.horizon {
        Horizon::Fixed(t) => t,
        Horizon::Auto => {
            let bound = pilot_cost_bound(stepper, x0, cfg.seed, stream);
            derive_horizon(stepper.gamma(), cfg.truncation_eps, bound)
        }
    }
}

pub fn simulate<S: Stepper>(stepper: &S, x0: &Vector, cfg: &SimConfig) -> Result<SimBatch> {
    simulate_stream(stepper, x0, cfg, 0)
}

/// Like [`simulate`], drawing from experiment stream `stream`.
pub fn simulate_stream<S: Stepper>(stepper: &S, x0: &Vector, cfg: &SimConfig, stream: u64) -> Result<SimBatch> {
    cfg.validate()?;
    if x0.len() != stepper.dim() {
        return Err(Error::Dimension {
            context: "initial state",
            expected: stepper.dim(),
            got: x0.len(),
        });
    }
    let horizon = resolve_horizon(stepper, x0, cfg, stream);
    let outcomes: Vec<PathOutcome> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| run_path(stepper, x0, cfg.seed, stream, p, horizon, p < cfg.record_paths))
        .collect();

    let n_flagged = outcomes.iter().filter(|o| !o.finite).count();
    if n_flagged as f64 > MAX_FLAGGED_FRACTION * cfg.n_paths as f64 {
        return Err(Error::Simulation {
            flagged: n_flagged,
            n_paths: cfg.n_paths,
        });
    }
    let good: Vec<&PathOutcome> = outcomes.iter().filter(|o| o.finite).collect();
    let r = stepper.control_weight();
    let total_control = |o: &&PathOutcome| o.control_sums.iter().sum::<f64>();
    let estimates = Estimates {
        cost: Estimate::from_samples(good.iter().map(|o| o.state_sum + r * total_control(o))),
        volatility: Estimate::from_samples(good.iter().map(total_control)),
        efficiency: Estimate::from_samples(good.iter().map(|o| -o.state_sum)),
        channel_volatility: (0..stepper.n_controls())
            .map(|k| Estimate::from_samples(good.iter().map(move |o| o.control_sums[k])))
            .collect(),
    };
    let paths = outcomes.into_iter().filter_map(|o| o.record).collect();
    Ok(SimBatch {
        estimates,
        paths,
        config: cfg.clone(),
        horizon,
        n_flagged,
    })
}
