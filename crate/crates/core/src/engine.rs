//! Consensus + innovations clearing of the peer-to-peer market.
//!
//! Every agent keeps one price estimate per partner and proposes bilateral
//! trades; a coordinator holds the skew-symmetric copy `Z` of the trade
//! matrix. One iteration runs, for all agents, the price update, the bound
//! multiplier update and the trade update, then the coordinator update.

use serde::{Deserialize, Serialize};

use crate::community::{Agent, Community};
use crate::error::{Error, Result};
use crate::matrix::{PairMatrix, PriceMatrix, TradeMatrix};
use crate::oracle::market_objective;
use crate::policy::GammaMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Innovation gain at k = 1. `None` uses twice the smallest quadratic
    /// coefficient of the community.
    pub alpha0: Option<f64>,
    pub alpha_decay: f64,
    /// Consensus gain at k = 1.
    pub beta0: f64,
    pub beta_decay: f64,
    /// Bound multiplier step.
    pub rho: f64,
    pub tau: f64,
    pub delta: f64,
    pub max_iterations: usize,
    /// EUR/MW, applies to price consensus and stationarity.
    pub eps_price: f64,
    /// MW, applies to trade consensus and bound violation.
    pub eps_primal: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            alpha0: None,
            alpha_decay: 0.05,
            beta0: 0.1,
            beta_decay: 0.05,
            rho: 0.01,
            tau: 10.0,
            delta: 0.25,
            max_iterations: 20_000,
            eps_price: 1e-3,
            eps_primal: 1e-2,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha0", self.alpha0.unwrap_or(1.0)),
            ("beta0", self.beta0),
            ("rho", self.rho),
            ("tau", self.tau),
            ("delta", self.delta),
            ("eps_price", self.eps_price),
            ("eps_primal", self.eps_primal),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(
                    "solver config",
                    format!("{name} must be positive, got {v}"),
                ));
            }
        }
        for (name, v) in [
            ("alpha_decay", self.alpha_decay),
            ("beta_decay", self.beta_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(
                    "solver config",
                    format!("{name} must be nonnegative, got {v}"),
                ));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid(
                "solver config",
                "max_iterations must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn resolved_alpha0(&self, community: &Community) -> f64 {
        self.alpha0.unwrap_or_else(|| {
            2.0 * community
                .agents()
                .iter()
                .map(|a| a.a)
                .fold(f64::INFINITY, f64::min)
        })
    }

    /// `(alpha^k, beta^k)`.
    pub fn gains(&self, alpha0: f64, k: usize) -> (f64, f64) {
        let k = k as f64;
        (
            alpha0 * k.powf(-self.alpha_decay),
            self.beta0 * k.powf(-self.beta_decay),
        )
    }
}

/// Solver iterate. `k` counts completed iterations plus one.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub k: usize,
    pub trades: TradeMatrix,
    pub coordinator: TradeMatrix,
    pub prices: PriceMatrix,
    pub mu_hi: Vec<f64>,
    pub mu_lo: Vec<f64>,
}

impl MarketState {
    /// Zero trades, zero multipliers, and every price at the mean linear
    /// cost coefficient of the community.
    pub fn initial(community: &Community) -> Self {
        let n = community.len();
        let mean_b = community.agents().iter().map(|a| a.b).sum::<f64>() / n as f64;
        let mut prices = PairMatrix::zeros(n);
        for (i, j) in community.pairs() {
            prices.set(i, j, mean_b);
        }
        MarketState {
            k: 1,
            trades: PairMatrix::zeros(n),
            coordinator: PairMatrix::zeros(n),
            prices,
            mu_hi: vec![0.0; n],
            mu_lo: vec![0.0; n],
        }
    }

    /// `Z_n`, summed in partner order.
    pub fn coordinator_net(&self, community: &Community, n: usize) -> f64 {
        community
            .partners(n)
            .iter()
            .map(|&m| self.coordinator.get(n, m))
            .sum()
    }
}

/// Price estimate update for one trade.
pub fn price_update(y_nm: f64, y_mn: f64, p_nm: f64, z_nm: f64, alpha: f64, beta: f64) -> f64 {
    y_nm - beta * (y_nm - y_mn) - alpha * (p_nm - z_nm)
}

/// Upper and lower bound multiplier updates, driven by the coordinator's net power.
pub fn bounds_update(mu_hi: f64, mu_lo: f64, z_n: f64, agent: &Agent, rho: f64) -> (f64, f64) {
    (
        (mu_hi + rho * (z_n - agent.p_max)).max(0.0),
        (mu_lo + rho * (agent.p_min - z_n)).max(0.0),
    )
}

/// Gradient step factors over one agent's partners; they sum to one.
pub fn gradient_steps(z_row: &[f64], tau: f64, delta: f64, k: usize) -> Vec<f64> {
    let floor = tau * (k as f64).powf(-delta);
    let weights: Vec<f64> = z_row.iter().map(|z| z.abs() + floor).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// New trade proposal of agent `n` towards one partner, projected on the
/// sign allowed by the agent's role.
#[allow(clippy::too_many_arguments)]
pub fn trade_update(
    agent: &Agent,
    z_nm: f64,
    z_n: f64,
    g_nm: f64,
    y_nm: f64,
    gamma_nm: f64,
    mu_hi: f64,
    mu_lo: f64,
) -> f64 {
    let target = agent.power_at(y_nm - gamma_nm - mu_hi + mu_lo);
    agent.project_sign(z_nm + g_nm * (target - z_n))
}

/// Skew-symmetric part of the proposals, `(P - P^T) / 2`.
pub fn coordinator_update(trades: &TradeMatrix) -> TradeMatrix {
    let n = trades.dim();
    let mut z = PairMatrix::zeros(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (trades.get(i, j) - trades.get(j, i)) / 2.0;
            z.set(i, j, v);
            z.set(j, i, -v);
        }
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residuals {
    /// max |y_nm - y_mn|
    pub price: f64,
    /// max of |P_nm - Z_nm|, bound violations of P_n and |sum P_n| / N
    pub primal: f64,
    /// KKT stationarity residual
    pub stationarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Serial,
    /// Agent updates fan out over a thread pool. Results are bit-identical
    /// to serial execution.
    #[cfg(feature = "parallel")]
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingResult {
    pub trades: TradeMatrix,
    /// Final skew-symmetric coordinator copy of the trades.
    pub coordinator: TradeMatrix,
    pub prices: PriceMatrix,
    pub net_powers: Vec<f64>,
    pub mu_hi: Vec<f64>,
    pub mu_lo: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<Residuals>,
    pub kkt_residual: f64,
    /// Trades at or below this magnitude (MW) count as zero in diagnostics.
    pub active_threshold: f64,
}

impl ClearingResult {
    pub fn final_residuals(&self) -> Residuals {
        self.history.last().copied().unwrap_or(Residuals {
            price: f64::NAN,
            primal: f64::NAN,
            stationarity: f64::NAN,
        })
    }

    fn active_producer_trades<'a>(
        &'a self,
        community: &'a Community,
    ) -> impl Iterator<Item = (usize, usize)> + 'a {
        community
            .producers()
            .flat_map(move |n| community.partners(n).iter().map(move |&m| (n, m)))
            .filter(move |&(n, m)| self.trades.get(n, m).abs() > self.active_threshold)
    }

    /// Volume-weighted mean price over active trades, or `None` without trades.
    pub fn clearing_price(&self, community: &Community) -> Option<f64> {
        let (mut value, mut volume) = (0.0, 0.0);
        for (n, m) in self.active_producer_trades(community) {
            let p = self.trades.get(n, m);
            value += p * self.prices.get(n, m);
            volume += p;
        }
        (volume > 0.0).then(|| value / volume)
    }

    /// Spread between the highest and lowest active trade price.
    pub fn price_spread(&self, community: &Community) -> f64 {
        let (lo, hi) = self
            .active_producer_trades(community)
            .map(|(n, m)| self.prices.get(n, m))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| {
                (lo.min(y), hi.max(y))
            });
        if hi >= lo {
            hi - lo
        } else {
            0.0
        }
    }

    /// Sum of producer-side trades (MW).
    pub fn total_volume(&self, community: &Community) -> f64 {
        community.producers().map(|n| self.net_powers[n]).sum()
    }

    /// Trades above `threshold` MW, each bilateral trade counted once.
    pub fn trade_count(&self, community: &Community, threshold: f64) -> usize {
        community
            .producers()
            .flat_map(|n| community.partners(n).iter().map(move |&m| (n, m)))
            .filter(|&(n, m)| self.trades.get(n, m).abs() > threshold)
            .count()
    }

    pub fn objective(&self, community: &Community, gamma: &GammaMatrix) -> f64 {
        market_objective(community, &self.trades, gamma)
    }
}

struct RowUpdate {
    prices: Vec<f64>,
    trades: Vec<f64>,
    mu_hi: f64,
    mu_lo: f64,
}

fn agent_row_update(
    state: &MarketState,
    community: &Community,
    gamma: &GammaMatrix,
    config: &SolverConfig,
    alpha: f64,
    beta: f64,
    n: usize,
) -> RowUpdate {
    let agent = community.agent(n);
    let partners = community.partners(n);
    let z_n = state.coordinator_net(community, n);
    let (mu_hi, mu_lo) = bounds_update(state.mu_hi[n], state.mu_lo[n], z_n, agent, config.rho);
    let z_row: Vec<f64> = partners
        .iter()
        .map(|&m| state.coordinator.get(n, m))
        .collect();
    let steps = gradient_steps(&z_row, config.tau, config.delta, state.k);

    let mut prices = Vec::with_capacity(partners.len());
    let mut trades = Vec::with_capacity(partners.len());
    for ((&m, &z_nm), &g) in partners.iter().zip(&z_row).zip(&steps) {
        let y = price_update(
            state.prices.get(n, m),
            state.prices.get(m, n),
            state.trades.get(n, m),
            z_nm,
            alpha,
            beta,
        );
        prices.push(y);
        trades.push(trade_update(
            agent,
            z_nm,
            z_n,
            g,
            y,
            gamma.get(n, m),
            mu_hi,
            mu_lo,
        ));
    }
    RowUpdate {
        prices,
        trades,
        mu_hi,
        mu_lo,
    }
}

/// Runs one full iteration and returns the next state.
pub fn iterate(
    state: &MarketState,
    community: &Community,
    gamma: &GammaMatrix,
    config: &SolverConfig,
    alpha0: f64,
    execution: Execution,
) -> MarketState {
    let (alpha, beta) = config.gains(alpha0, state.k);
    let update = |n: usize| agent_row_update(state, community, gamma, config, alpha, beta, n);
    let rows: Vec<RowUpdate> = match execution {
        Execution::Serial => (0..community.len()).map(update).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..community.len()).into_par_iter().map(update).collect()
        }
    };

    let n = community.len();
    let mut trades = PairMatrix::zeros(n);
    let mut prices = PairMatrix::zeros(n);
    let mut mu_hi = Vec::with_capacity(n);
    let mut mu_lo = Vec::with_capacity(n);
    for (i, row) in rows.into_iter().enumerate() {
        for ((&m, p), y) in community.partners(i).iter().zip(row.trades).zip(row.prices) {
            trades.set(i, m, p);
            prices.set(i, m, y);
        }
        mu_hi.push(row.mu_hi);
        mu_lo.push(row.mu_lo);
    }
    let coordinator = coordinator_update(&trades);
    MarketState {
        k: state.k + 1,
        trades,
        coordinator,
        prices,
        mu_hi,
        mu_lo,
    }
}

/// KKT stationarity residual of a trade/price/multiplier point.
///
/// Trades above `threshold` must satisfy the stationarity equation; smaller
/// trades are treated as zero and only the inequality left by the sign
/// multiplier is checked.
#[allow(clippy::too_many_arguments)]
pub fn stationarity(
    community: &Community,
    gamma: &GammaMatrix,
    trades: &TradeMatrix,
    prices: &PriceMatrix,
    mu_hi: &[f64],
    mu_lo: &[f64],
    threshold: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for n in 0..community.len() {
        let agent = community.agent(n);
        let partners = community.partners(n);
        let p_n: f64 = partners.iter().map(|&m| trades.get(n, m)).sum();
        let marginal = agent.marginal_cost(p_n) + mu_hi[n] - mu_lo[n];
        for &m in partners {
            let e = marginal - prices.get(n, m) + gamma.get(n, m);
            let r = if trades.get(n, m).abs() > threshold {
                e.abs()
            } else if agent.is_producer() {
                (-e).max(0.0)
            } else {
                e.max(0.0)
            };
            worst = worst.max(r);
        }
    }
    worst
}

/// Max absolute KKT residual (EUR/MW) of a clearing result.
pub fn kkt_residual(result: &ClearingResult, community: &Community, gamma: &GammaMatrix) -> f64 {
    stationarity(
        community,
        gamma,
        &result.trades,
        &result.prices,
        &result.mu_hi,
        &result.mu_lo,
        result.active_threshold,
    )
}

fn residuals(
    state: &MarketState,
    community: &Community,
    gamma: &GammaMatrix,
    config: &SolverConfig,
) -> Residuals {
    let mut price: f64 = 0.0;
    let mut primal: f64 = 0.0;
    for (n, m) in community.pairs() {
        price = price.max((state.prices.get(n, m) - state.prices.get(m, n)).abs());
        primal = primal.max((state.trades.get(n, m) - state.coordinator.get(n, m)).abs());
    }
    let mut imbalance = 0.0;
    for n in 0..community.len() {
        let agent = community.agent(n);
        let p_n: f64 = community
            .partners(n)
            .iter()
            .map(|&m| state.trades.get(n, m))
            .sum();
        primal = primal.max(p_n - agent.p_max).max(agent.p_min - p_n);
        imbalance += p_n;
    }
    primal = primal.max(f64::abs(imbalance) / community.len() as f64);
    Residuals {
        price,
        primal,
        stationarity: stationarity(
            community,
            gamma,
            &state.trades,
            &state.prices,
            &state.mu_hi,
            &state.mu_lo,
            config.eps_primal,
        ),
    }
}

pub fn clear_market(
    community: &Community,
    gamma: &GammaMatrix,
    config: &SolverConfig,
) -> Result<ClearingResult> {
    clear_market_with(community, gamma, config, Execution::Serial)
}

/// Iterates until prices agree, trades match the coordinator copy, bounds
/// hold and the KKT stationarity residual is within `eps_price`, or until
/// `max_iterations`. Non-convergence is reported in the result.
pub fn clear_market_with(
    community: &Community,
    gamma: &GammaMatrix,
    config: &SolverConfig,
    execution: Execution,
) -> Result<ClearingResult> {
    config.validate()?;
    if gamma.dim() != community.len() {
        return Err(Error::invalid(
            "gamma",
            "dimension does not match the community",
        ));
    }
    let alpha0 = config.resolved_alpha0(community);
    let mut state = MarketState::initial(community);
    let mut history = Vec::new();
    let mut converged = false;
    while state.k <= config.max_iterations {
        state = iterate(&state, community, gamma, config, alpha0, execution);
        let r = residuals(&state, community, gamma, config);
        history.push(r);
        if r.price <= config.eps_price
            && r.primal <= config.eps_primal
            && r.stationarity <= config.eps_price
        {
            converged = true;
            break;
        }
    }
    let net_powers = state.trades.row_sums();
    let mut result = ClearingResult {
        trades: state.trades,
        coordinator: state.coordinator,
        prices: state.prices,
        net_powers,
        mu_hi: state.mu_hi,
        mu_lo: state.mu_lo,
        iterations: history.len(),
        converged,
        history,
        kkt_residual: 0.0,
        active_threshold: config.eps_primal,
    };
    result.kkt_residual = kkt_residual(&result, community, gamma);
    Ok(result)
}
