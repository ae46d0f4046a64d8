//! Price-anticipating market: strategic consumers and producers bid through
//! a scalar parameter each, the operator clears the price as
//! `alpha_t = kappa / N (sum of bids + zeta)`, and every player runs linear
//! feedback `u_i = -p_i' x` on the aggregate state.
//!
//! The stationary equilibrium solves, for every player `i`,
//!
//! ```text
//! gamma b_i' K_i A = (r + gamma b_i' K_i b_i) p_i' + gamma b_i' K_i sum_{j != i} b_j p_j'
//! K_i = gamma F' K_i F + r p_i p_i' + Q_i,       F = A - sum_j b_j p_j'
//! ```
//!
//! which is computed by damped fixed-point iteration: Lyapunov solves for
//! the `K_i` at the current gains, then one joint linear solve for all gains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{check_grid, differences, discounted_value, shape_check, ShapeCheck};
use crate::linalg::{self, quad_form, symmetrize};
use crate::model::{LinearPolicy, LqrSystem, Matrix, NoiseSpec, Vector};
use crate::riccati::{solve_discounted_lyapunov_from, solve_riccati_with, SolverOptions};
use crate::sim::{self, correlated_normal, PathRng, SimBatch, SimConfig, Stepper};
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProsumerKind {
    Consumer,
    Producer,
}

impl ProsumerKind {
    pub fn block_dim(self) -> usize {
        match self {
            ProsumerKind::Consumer => 3,
            ProsumerKind::Producer => 2,
        }
    }

    /// Positions that the block template leaves free (row, column).
    pub fn free_entries(self) -> &'static [(usize, usize)] {
        match self {
            ProsumerKind::Consumer => &[(0, 0), (0, 2), (1, 1), (1, 2)],
            ProsumerKind::Producer => &[(0, 0), (0, 1)],
        }
    }

    /// Column of the block holding the player's bid parameter.
    pub fn bid_index(self) -> usize {
        self.block_dim() - 1
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            ProsumerKind::Consumer => &["demand", "allocated", "bid"],
            ProsumerKind::Producer => &["supply", "bid"],
        }
    }
}

/// One prosumer's local dynamics and cost. Entries in the bid column are
/// read as sensitivities to the clearing price.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsumerSpec {
    pub kind: ProsumerKind,
    pub a_block: Matrix,
    pub q_block: Matrix,
}

impl ProsumerSpec {
    pub fn new(kind: ProsumerKind, a_block: Matrix, q_block: Matrix) -> Result<Self> {
        let n = kind.block_dim();
        if a_block.shape() != (n, n) {
            return Err(Error::Dimension {
                context: "prosumer A block",
                expected: n,
                got: a_block.nrows(),
            });
        }
        if q_block.shape() != (n, n) {
            return Err(Error::Dimension {
                context: "prosumer Q block",
                expected: n,
                got: q_block.nrows(),
            });
        }
        let free = kind.free_entries();
        for i in 0..n {
            for j in 0..n {
                if !free.contains(&(i, j)) && a_block[(i, j)] != 0.0 {
                    return Err(Error::invalid(
                        "a_block",
                        format!("entry ({}, {}) must be zero for a {kind:?}", i + 1, j + 1),
                    ));
                }
            }
        }
        let q_block = linalg::clip_psd(&q_block, linalg::PSD_TOLERANCE)
            .ok_or_else(|| Error::invalid("q_block", "must be symmetric positive semidefinite"))?;
        Ok(Self { kind, a_block, q_block })
    }

    pub fn consumer(a_block: Matrix, q_block: Matrix) -> Result<Self> {
        Self::new(ProsumerKind::Consumer, a_block, q_block)
    }

    pub fn producer(a_block: Matrix, q_block: Matrix) -> Result<Self> {
        Self::new(ProsumerKind::Producer, a_block, q_block)
    }
}

#[derive(Debug, Clone)]
pub struct MarketSpecPA {
    pub consumers: Vec<ProsumerSpec>,
    pub producers: Vec<ProsumerSpec>,
    pub kappa: f64,
    pub zeta: f64,
    pub r: f64,
    pub gamma: f64,
    /// Covariance over the `3 N_c + 2 N_p` prosumer coordinates.
    pub noise: NoiseSpec,
}

impl MarketSpecPA {
    pub fn players(&self) -> impl Iterator<Item = &ProsumerSpec> {
        self.consumers.iter().chain(&self.producers)
    }

    pub fn n_players(&self) -> usize {
        self.consumers.len() + self.producers.len()
    }

    /// `3 N_c + 2 N_p`
    pub fn market_dim(&self) -> usize {
        3 * self.consumers.len() + 2 * self.producers.len()
    }

    pub fn with_r(&self, r: f64) -> Self {
        Self { r, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_players() == 0 {
            return Err(Error::invalid("market", "needs at least one prosumer"));
        }
        if self.consumers.iter().any(|c| c.kind != ProsumerKind::Consumer) {
            return Err(Error::invalid("consumers", "entries must be consumer blocks"));
        }
        if self.producers.iter().any(|p| p.kind != ProsumerKind::Producer) {
            return Err(Error::invalid("producers", "entries must be producer blocks"));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::invalid("r", format!("must be > 0, got {}", self.r)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid("gamma", format!("must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.kappa.is_finite() && self.zeta.is_finite()) {
            return Err(Error::invalid("kappa", "kappa and zeta must be finite"));
        }
        if self.noise.dim() != self.market_dim() {
            return Err(Error::Dimension {
                context: "market noise",
                expected: self.market_dim(),
                got: self.noise.dim(),
            });
        }
        Ok(())
    }
}

/// The market written on the aggregate state, with the clearing price
/// substituted into every price-sensitive row.
#[derive(Debug, Clone)]
pub struct AggregateMarket {
    pub a: Matrix,
    /// One input vector per player (consumers first).
    pub b: Vec<Vector>,
    /// Player costs lifted to the aggregate state.
    pub q: Vec<Matrix>,
    pub psi: Matrix,
    /// Aggregate coordinate of each player's bid.
    pub bid_index: Vec<usize>,
    /// Index of the constant coordinate carrying `zeta`, if any.
    pub constant_index: Option<usize>,
    pub labels: Vec<String>,
    pub kappa: f64,
    pub zeta: f64,
    pub r: f64,
    pub gamma: f64,
}

impl AggregateMarket {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_players(&self) -> usize {
        self.b.len()
    }

    /// Clearing price `kappa / N (sum of bids + zeta)` at state `x`.
    pub fn clearing_price(&self, x: &Vector) -> f64 {
        let bids: f64 = self.bid_index.iter().map(|&k| x[k]).sum();
        self.kappa / self.n_players() as f64 * (bids + self.zeta)
    }

    /// Spectral radius over the market coordinates (the constant coordinate,
    /// an eigenvalue 1 by construction, is left out).
    pub fn market_spectral_radius(&self, f: &Matrix) -> f64 {
        match self.constant_index {
            Some(c) => linalg::spectral_radius(&f.view((0, 0), (c, c)).into_owned()),
            None => linalg::spectral_radius(f),
        }
    }

    /// Initial state padded with the constant coordinate when present.
    pub fn lift_state(&self, x: &Vector) -> Result<Vector> {
        let n = self.constant_index.unwrap_or(self.dim());
        if x.len() == self.dim() {
            return Ok(x.clone());
        }
        if x.len() != n {
            return Err(Error::Dimension {
                context: "market initial state",
                expected: n,
                got: x.len(),
            });
        }
        let mut out = Vector::from_element(self.dim(), 1.0);
        out.rows_mut(0, n).copy_from(x);
        Ok(out)
    }
}

pub fn assemble_aggregate(spec: &MarketSpecPA) -> Result<AggregateMarket> {
    spec.validate()?;
    let n_market = spec.market_dim();
    let constant_index = (spec.zeta != 0.0).then_some(n_market);
    let dim = n_market + usize::from(constant_index.is_some());
    let weight = spec.kappa / spec.n_players() as f64;

    let mut offsets = Vec::new();
    let mut off = 0;
    for p in spec.players() {
        offsets.push(off);
        off += p.kind.block_dim();
    }
    let bid_index: Vec<usize> = spec.players().zip(&offsets).map(|(p, o)| o + p.kind.bid_index()).collect();

    let mut a = Matrix::zeros(dim, dim);
    let mut b = Vec::new();
    let mut q = Vec::new();
    let mut labels = Vec::new();
    let (mut n_c, mut n_p) = (0, 0);
    for (p, &o) in spec.players().zip(&offsets) {
        let n = p.kind.block_dim();
        let bid = p.kind.bid_index();
        for i in 0..n {
            for j in 0..n {
                if j != bid {
                    a[(o + i, o + j)] = p.a_block[(i, j)];
                }
            }
            // price sensitivity spreads over every bid through the clearing price
            let sens = p.a_block[(i, bid)];
            if sens != 0.0 {
                for &k in &bid_index {
                    a[(o + i, k)] += sens * weight;
                }
                if let Some(c) = constant_index {
                    a[(o + i, c)] += sens * weight * spec.zeta;
                }
            }
        }
        let mut bi = Vector::zeros(dim);
        bi[o + bid] = 1.0;
        b.push(bi);
        let mut qi = Matrix::zeros(dim, dim);
        qi.view_mut((o, o), (n, n)).copy_from(&p.q_block);
        q.push(qi);
        let tag = match p.kind {
            ProsumerKind::Consumer => {
                n_c += 1;
                format!("c{n_c}")
            }
            ProsumerKind::Producer => {
                n_p += 1;
                format!("p{n_p}")
            }
        };
        labels.extend(p.kind.labels().iter().map(|l| format!("{tag}_{l}")));
    }
    if let Some(c) = constant_index {
        a[(c, c)] = 1.0;
        labels.push("constant".into());
    }
    let mut psi = Matrix::zeros(dim, dim);
    psi.view_mut((0, 0), (n_market, n_market)).copy_from(spec.noise.covariance());

    Ok(AggregateMarket {
        a,
        b,
        q,
        psi,
        bid_index,
        constant_index,
        labels,
        kappa: spec.kappa,
        zeta: spec.zeta,
        r: spec.r,
        gamma: spec.gamma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NashOptions {
    /// Weight on the new gains in `p <- (1 - eta) p + eta p_new`.
    pub damping: f64,
    pub max_iter: usize,
    /// Stop when the largest gain change falls below this.
    pub tol: f64,
}

impl Default for NashOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iter: 10_000,
            tol: 1e-11,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NashResiduals {
    /// Defect of the gain equation, per player.
    pub gain: Vec<f64>,
    /// Defect of the cost-matrix equation, per player.
    pub cost: Vec<f64>,
}

impl NashResiduals {
    pub fn max(&self) -> f64 {
        self.gain.iter().chain(&self.cost).fold(0.0, |m, v| m.max(*v))
    }
}

#[derive(Debug, Clone)]
pub struct NashEquilibrium {
    /// `u_i = -p_i' x`
    pub p: Vec<Vector>,
    pub k: Vec<Matrix>,
    pub f: Matrix,
    pub residuals: NashResiduals,
    pub spectral_radius_f: f64,
    pub iterations: usize,
    /// Largest gain change per outer iteration.
    pub history: Vec<f64>,
}

impl NashEquilibrium {
    pub fn policy(&self, i: usize) -> LinearPolicy {
        LinearPolicy::new(-&self.p[i])
    }
}

fn closed_loop(m: &AggregateMarket, p: &[Vector]) -> Matrix {
    let mut f = m.a.clone();
    for (bi, pi) in m.b.iter().zip(p) {
        f -= bi * pi.transpose();
    }
    f
}

fn tight() -> SolverOptions {
    SolverOptions {
        tol: 1e-14,
        max_iter: 200_000,
    }
}

fn player_costs(m: &AggregateMarket, f: &Matrix, p: &[Vector], warm: Option<&[Matrix]>, opts: SolverOptions) -> Result<Vec<Matrix>> {
    let d = m.dim();
    (0..m.n_players())
        .map(|i| {
            let c = &m.q[i] + &p[i] * p[i].transpose() * m.r;
            let s0 = warm.map_or_else(|| Matrix::zeros(d, d), |w| w[i].clone());
            Ok(solve_discounted_lyapunov_from(f, &c, m.gamma, &s0, opts)?.s)
        })
        .collect()
}

/// Solves the gain equations of all players jointly given their cost matrices.
fn joint_gains(m: &AggregateMarket, k: &[Matrix]) -> Result<Vec<Vector>> {
    let n = m.n_players();
    let g = m.gamma;
    let mut lhs = Matrix::zeros(n, n);
    let mut rhs = Matrix::zeros(n, m.dim());
    for i in 0..n {
        let kb = &k[i] * &m.b[i];
        for j in 0..n {
            lhs[(i, j)] = g * kb.dot(&m.b[j]) + if i == j { m.r } else { 0.0 };
        }
        rhs.set_row(i, &((m.a.transpose() * &kb) * g).transpose());
    }
    let lu = lhs.lu();
    let sol = lu.solve(&rhs).ok_or(Error::DegenerateMarket)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateMarket);
    }
    Ok((0..n).map(|i| sol.row(i).transpose()).collect())
}

fn residuals(m: &AggregateMarket, p: &[Vector], k: &[Matrix], f: &Matrix) -> NashResiduals {
    let g = m.gamma;
    let n = m.n_players();
    let mut gain = Vec::new();
    let mut cost = Vec::new();
    for i in 0..n {
        let kb = &k[i] * &m.b[i];
        let mut lhs = &p[i] * (m.r + g * kb.dot(&m.b[i]));
        for j in (0..n).filter(|&j| j != i) {
            lhs += &p[j] * (g * kb.dot(&m.b[j]));
        }
        gain.push((lhs - (m.a.transpose() * &kb) * g).norm());
        let rec = f.transpose() * &k[i] * f * g + &p[i] * p[i].transpose() * m.r + &m.q[i];
        cost.push((symmetrize(&rec) - &k[i]).norm());
    }
    NashResiduals { gain, cost }
}

pub fn solve_nash(spec: &MarketSpecPA) -> Result<NashEquilibrium> {
    solve_nash_with(spec, NashOptions::default())
}

pub fn solve_nash_with(spec: &MarketSpecPA, opts: NashOptions) -> Result<NashEquilibrium> {
    let m = assemble_aggregate(spec)?;
    solve_aggregate(&m, opts)
}

pub fn solve_aggregate(m: &AggregateMarket, opts: NashOptions) -> Result<NashEquilibrium> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::invalid("damping", "must lie in (0, 1]"));
    }
    let n = m.n_players();
    let mut p = vec![Vector::zeros(m.dim()); n];
    let mut k: Option<Vec<Matrix>> = None;
    let mut history = Vec::new();
    let inner = SolverOptions {
        tol: 1e-12,
        max_iter: 100_000,
    };
    for it in 1..=opts.max_iter {
        let f = closed_loop(m, &p);
        let ks = player_costs(m, &f, &p, k.as_deref(), inner)?;
        let target = joint_gains(m, &ks)?;
        let mut change: f64 = 0.0;
        for (pi, ti) in p.iter_mut().zip(&target) {
            let next = &*pi * (1.0 - opts.damping) + ti * opts.damping;
            change = change.max((&next - &*pi).amax());
            *pi = next;
        }
        history.push(change);
        k = Some(ks);
        if !change.is_finite() {
            break;
        }
        if change <= opts.tol {
            let f = closed_loop(m, &p);
            let k = player_costs(m, &f, &p, k.as_deref(), tight())?;
            let residuals = residuals(m, &p, &k, &f);
            return Ok(NashEquilibrium {
                spectral_radius_f: m.market_spectral_radius(&f),
                p,
                k,
                f,
                residuals,
                iterations: it,
                history,
            });
        }
    }
    Err(Error::NashDivergence {
        iterations: history.len(),
        last_change: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// Player `i`'s single-agent problem with the other players frozen at `eq`.
pub fn best_response_system(m: &AggregateMarket, eq: &NashEquilibrium, i: usize) -> Result<LqrSystem> {
    let mut a = m.a.clone();
    for j in (0..m.n_players()).filter(|&j| j != i) {
        a -= &m.b[j] * eq.p[j].transpose();
    }
    LqrSystem::new(a, m.b[i].clone(), NoiseSpec::none(m.dim()), m.q[i].clone(), m.r, m.gamma)
}

/// Largest `|p_i - p_i^BR|` over players, where `p_i^BR` is the single-agent
/// optimal gain against the frozen opponents.
pub fn best_response_gap(m: &AggregateMarket, eq: &NashEquilibrium) -> Result<f64> {
    let mut gap: f64 = 0.0;
    for i in 0..m.n_players() {
        let sys = best_response_system(m, eq, i)?;
        let br = solve_riccati_with(&sys, m.r, tight())?;
        gap = gap.max((br.gain.gain() + &eq.p[i]).amax());
    }
    Ok(gap)
}

#[derive(Debug, Clone, Serialize)]
pub struct SocialCost {
    pub total: f64,
    pub per_player: Vec<f64>,
}

/// Sum over players of the discounted state cost `x' Q_i x` along the
/// equilibrium closed loop, noise terms included.
pub fn nash_social_cost(m: &AggregateMarket, eq: &NashEquilibrium, x0: &Vector) -> Result<SocialCost> {
    let x0 = m.lift_state(x0)?;
    let zero = Matrix::zeros(m.dim(), m.dim());
    let per_player = m
        .q
        .iter()
        .map(|qi| {
            let s = solve_discounted_lyapunov_from(&eq.f, qi, m.gamma, &zero, tight())?.s;
            Ok(discounted_value(&s, &m.psi, m.gamma, &x0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SocialCost {
        total: per_player.iter().sum(),
        per_player,
    })
}

/// `1/2 (x0' K_i x0 + gamma/(1-gamma) tr(K_i Psi))`
pub fn equilibrium_cost(m: &AggregateMarket, eq: &NashEquilibrium, i: usize, x0: &Vector) -> Result<f64> {
    let x0 = m.lift_state(x0)?;
    Ok(0.5 * discounted_value(&eq.k[i], &m.psi, m.gamma, &x0))
}

/// Discounted `u_i^2` per player, from `W_i = p_i p_i' + gamma F' W_i F`.
pub fn player_volatility(m: &AggregateMarket, eq: &NashEquilibrium, x0: &Vector) -> Result<Vec<f64>> {
    let x0 = m.lift_state(x0)?;
    let zero = Matrix::zeros(m.dim(), m.dim());
    eq.p.iter()
        .map(|pi| {
            let w = solve_discounted_lyapunov_from(&eq.f, &(pi * pi.transpose()), m.gamma, &zero, tight())?.s;
            Ok(discounted_value(&w, &m.psi, m.gamma, &x0))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct NashScan {
    pub r: Vec<f64>,
    pub social_cost: Vec<f64>,
    pub d1: Vec<Option<f64>>,
    pub d2: Vec<Option<f64>>,
}

impl NashScan {
    pub fn shape(&self) -> ShapeCheck {
        shape_check(&self.social_cost, &self.d1, &self.d2)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["r", "J_N", "d1", "d2"]);
        for i in 0..self.r.len() {
            t.push(vec![self.r[i].into(), self.social_cost[i].into(), self.d1[i].into(), self.d2[i].into()]);
        }
        t
    }
}

pub fn social_cost_scan(spec: &MarketSpecPA, r_grid: &[f64], x0: &Vector) -> Result<NashScan> {
    use rayon::prelude::*;
    check_grid("r_grid", r_grid, 3)?;
    let social_cost = r_grid
        .par_iter()
        .map(|&r| {
            let s = spec.with_r(r);
            let m = assemble_aggregate(&s)?;
            let eq = solve_aggregate(&m, NashOptions::default())?;
            Ok(nash_social_cost(&m, &eq, x0)?.total)
        })
        .collect::<Result<Vec<_>>>()?;
    let (d1, d2) = differences(r_grid, &social_cost);
    Ok(NashScan {
        r: r_grid.to_vec(),
        social_cost,
        d1,
        d2,
    })
}

/// Aggregate market under the equilibrium feedback of every player.
pub struct NashStepper<'a> {
    market: &'a AggregateMarket,
    eq: &'a NashEquilibrium,
    noise_factor: Option<Matrix>,
}

impl<'a> NashStepper<'a> {
    pub fn new(market: &'a AggregateMarket, eq: &'a NashEquilibrium) -> Self {
        let silent = market.psi.iter().all(|v| *v == 0.0);
        Self {
            market,
            eq,
            noise_factor: (!silent).then(|| linalg::psd_sqrt(&market.psi)),
        }
    }
}

impl Stepper for NashStepper<'_> {
    type PathState = ();

    fn dim(&self) -> usize {
        self.market.dim()
    }
    fn n_controls(&self) -> usize {
        self.market.n_players()
    }
    fn gamma(&self) -> f64 {
        self.market.gamma
    }
    fn control_weight(&self) -> f64 {
        self.market.r
    }
    fn start(&self, _rng: &mut PathRng) {}
    fn step(&self, _: &(), _t: usize, x: &Vector, u: &mut [f64], rng: &mut PathRng) -> Vector {
        let mut next = &self.market.a * x;
        for (i, (bi, pi)) in self.market.b.iter().zip(&self.eq.p).enumerate() {
            u[i] = -pi.dot(x);
            next += bi * u[i];
        }
        if let Some(l) = &self.noise_factor {
            next += correlated_normal(l, rng);
        }
        next
    }
    fn state_cost(&self, x: &Vector) -> f64 {
        self.market.q.iter().map(|q| quad_form(q, x)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct PricePaths {
    pub batch: SimBatch,
    /// `prices[k][t]` for recorded path `k`.
    pub prices: Vec<Vec<f64>>,
}

impl PricePaths {
    /// Sample variance of the price over all recorded paths and times.
    pub fn price_variance(&self) -> f64 {
        let all: Vec<f64> = self.prices.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["t", "path_id", "alpha_t"]);
        for (rec, prices) in self.batch.paths.iter().zip(&self.prices) {
            for (step, price) in prices.iter().enumerate() {
                t.push(vec![step.into(), rec.path_id.into(), (*price).into()]);
            }
        }
        t
    }
}

/// Simulates the equilibrium and recovers the clearing price along every
/// recorded path (all paths are recorded).
pub fn simulate_equilibrium(m: &AggregateMarket, eq: &NashEquilibrium, x0: &Vector, cfg: &SimConfig) -> Result<PricePaths> {
    let x0 = m.lift_state(x0)?;
    let cfg = SimConfig {
        record_paths: cfg.n_paths,
        ..cfg.clone()
    };
    let stepper = NashStepper::new(m, eq);
    let batch = sim::simulate(&stepper, &x0, &cfg)?;
    let prices = batch
        .paths
        .iter()
        .map(|rec| rec.states.iter().map(|x| m.clearing_price(x)).collect())
        .collect();
    Ok(PricePaths { batch, prices })
}

/// Repo-chosen two-player instance: one consumer and one producer with
/// mean-reverting diagonals, unit price coupling and no price offset. State
/// weights are small relative to the scanned control penalties so the whole
/// `r` range sits where the equilibrium trades efficiency for volatility.
pub fn reference_market_pa(r: f64) -> Result<MarketSpecPA> {
    let consumer = ProsumerSpec::consumer(
        Matrix::from_row_slice(3, 3, &[0.9, 0.0, -1.0, 0.0, 0.8, 0.6, 0.0, 0.0, 0.0]),
        Matrix::from_row_slice(3, 3, &[0.02, -0.01, 0.0, -0.01, 0.02, 0.0, 0.0, 0.0, 0.005]),
    )?;
    let producer = ProsumerSpec::producer(
        Matrix::from_row_slice(2, 2, &[0.85, 0.8, 0.0, 0.0]),
        Matrix::from_row_slice(2, 2, &[0.01, 0.0, 0.0, 0.005]),
    )?;
    Ok(MarketSpecPA {
        consumers: vec![consumer],
        producers: vec![producer],
        kappa: 1.0,
        zeta: 0.0,
        r,
        gamma: 0.9,
        noise: NoiseSpec::gaussian_diagonal(&[1.0, 1.0, 0.0, 1.0, 0.0])?,
    })
}

pub fn reference_x0_pa() -> Vector {
    Vector::from_vec(vec![25.0, 25.0, 0.0, 25.0, 0.0])
}
