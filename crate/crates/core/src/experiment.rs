//! Scenario files, single runs, fee sweeps and fee recommendation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::case;
use crate::community::{load_agents, Community};
use crate::distance::{distance_matrix, ZonePaths};
use crate::engine::{
    clear_market_with, coordinator_update, ClearingResult, Execution, SolverConfig,
};
use crate::error::{Error, Result};
use crate::network::{load_network, Network};
use crate::oracle::{bisection_clearing, market_objective, qp_reference};
use crate::policy::{build_gamma, total_collected, GammaMatrix, PolicyKind, PolicySpec};
use crate::powerflow::{
    congestion_report, interzone_exchange, line_rates, tie_line_flow, DcModel, FlowResult,
    RateSummary, ZoneExchangeReport,
};

/// Trades at or below this size (MW) are left out of trade counts and plots.
pub const TRADE_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub path: Option<PathBuf>,
    /// Defaults to the highest-numbered bus.
    pub slack: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub verify: bool,
}

/// A scenario file. Missing network or agents paths select the bundled
/// New England case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub agents: AgentsSection,
    #[serde(default = "PolicySpec::free")]
    pub policy: PolicySpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputSection,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            network: NetworkSection::default(),
            agents: AgentsSection::default(),
            policy: PolicySpec::free(),
            solver: SolverConfig::default(),
            output: OutputSection::default(),
        }
    }
}

impl Scenario {
    /// Parses a scenario; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, context: &str, base_dir: &Path) -> Result<Self> {
        let mut s: Scenario =
            toml::from_str(text).map_err(|e| Error::parse(context, e.message()))?;
        for p in [&mut s.network.path, &mut s.agents.path, &mut s.output.dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        s.policy.validate()?;
        s.solver.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, &path.display().to_string(), base)
    }

    pub fn load_case(&self) -> Result<Case> {
        let network = match &self.network.path {
            Some(p) => load_network(p)?,
            None => case::new_england_network(),
        };
        let community = match &self.agents.path {
            Some(p) => load_agents(p, &network)?,
            None => {
                let c = case::new_england_community();
                c.check_against(&network)?;
                c
            }
        };
        Case::new(network, community, self.network.slack)
    }
}

/// A network, its community and the slack bus used for power flows.
#[derive(Debug, Clone)]
pub struct Case {
    pub network: Network,
    pub community: Community,
    pub slack: u32,
}

impl Case {
    pub fn new(network: Network, community: Community, slack: Option<u32>) -> Result<Self> {
        let slack = slack.unwrap_or_else(|| network.default_slack());
        if !network.contains_bus(slack) {
            return Err(Error::UnknownBus(slack));
        }
        community.check_against(&network)?;
        Ok(Case {
            network,
            community,
            slack,
        })
    }

    pub fn new_england() -> Self {
        let (network, community) = case::new_england().expect("bundled case is valid");
        let slack = network.default_slack();
        Case {
            network,
            community,
            slack,
        }
    }

    pub fn gamma(&self, policy: &PolicySpec) -> Result<GammaMatrix> {
        GammaMatrix::for_policy(policy, &self.community, &self.network)
    }

    pub fn line_label(&self, line: usize) -> String {
        let l = &self.network.lines()[line];
        format!("{}-{}", l.from_bus, l.to_bus)
    }
}

/// Comparison of the engine against a reference solver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verification {
    pub oracle: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_price: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub price_delta: Option<f64>,
    pub max_net_power_delta_mw: f64,
    pub objective: f64,
    pub objective_rel_delta: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub policy: PolicySpec,
    pub gamma: GammaMatrix,
    pub clearing: ClearingResult,
    pub flows: FlowResult,
    pub rates: RateSummary,
    pub congestion: Vec<(usize, f64)>,
    pub interzone: ZoneExchangeReport,
    pub tie_line_flow: f64,
    pub operator_revenue: f64,
    pub verification: Option<Verification>,
}

impl RunReport {
    pub fn sweep_record(&self, case: &Case) -> SweepRecord {
        SweepRecord {
            fee: self.policy.fee,
            converged: self.clearing.converged,
            iterations: self.clearing.iterations,
            volume_mw: self.clearing.total_volume(&case.community),
            operator_revenue: self.operator_revenue,
            interzone_mw: self.interzone.total,
            avg_rate: self.rates.average,
            max_rate: self.rates.maximum,
            argmax_line: case.line_label(self.rates.argmax),
        }
    }
}

/// Clears the market for one policy and maps the outcome onto the grid.
pub fn run(
    case: &Case,
    policy: &PolicySpec,
    solver: &SolverConfig,
    execution: Execution,
) -> Result<RunReport> {
    let gamma = case.gamma(policy)?;
    let dc = DcModel::new(&case.network, case.slack)?;
    evaluate(case, &dc, policy, gamma, solver, execution)
}

fn evaluate(
    case: &Case,
    dc: &DcModel,
    policy: &PolicySpec,
    gamma: GammaMatrix,
    solver: &SolverConfig,
    execution: Execution,
) -> Result<RunReport> {
    let clearing = clear_market_with(&case.community, &gamma, solver, execution)?;
    // The skew-symmetric copy balances exactly even before convergence.
    let settled = coordinator_update(&clearing.trades).row_sums();
    let injections = case.community.net_injections(&case.network, &settled)?;
    let flows = dc.solve(&injections)?;
    let rates = line_rates(&flows);
    let congestion = congestion_report(&flows);
    let interzone = interzone_exchange(&case.community, &clearing.trades, &case.network)?;
    let tie = tie_line_flow(&flows, &case.network)?;
    let operator_revenue = total_collected(&clearing.trades, &gamma);
    Ok(RunReport {
        policy: policy.clone(),
        gamma,
        clearing,
        flows,
        rates,
        congestion,
        interzone,
        tie_line_flow: tie,
        operator_revenue,
        verification: None,
    })
}

/// Fills `report.verification` from the matching reference solver: price
/// bisection for free and unique policies, the trade-level QP otherwise.
pub fn verify(case: &Case, report: &mut RunReport) -> Result<()> {
    let com = &case.community;
    let engine_objective = report.clearing.objective(com, &report.gamma);
    let uniform = matches!(report.policy.kind, PolicyKind::Free | PolicyKind::Unique);
    let full = (0..com.len()).all(|n| {
        let role = com.agent(n).role;
        com.partners(n).len() == com.agents().iter().filter(|a| a.role != role).count()
    });
    let (name, oracle, objective) = if uniform && full {
        let wedge = if report.policy.kind == PolicyKind::Free {
            0.0
        } else {
            report.policy.fee
        };
        let o = bisection_clearing(com, wedge)?;
        // Uniform wedges make the objective a function of net powers alone.
        let objective =
            o.social_welfare + wedge / 2.0 * o.net_powers.iter().map(|p| p.abs()).sum::<f64>();
        ("bisection", o, objective)
    } else {
        let o = qp_reference(com, &report.gamma)?;
        let objective = market_objective(
            com,
            o.trades.as_ref().expect("qp returns trades"),
            &report.gamma,
        );
        ("qp_reference", o, objective)
    };
    let max_delta = oracle
        .net_powers
        .iter()
        .zip(&report.clearing.net_powers)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let engine_price = report.clearing.clearing_price(com);
    report.verification = Some(Verification {
        oracle: name.to_string(),
        oracle_price: oracle.clearing_price,
        price_delta: engine_price.zip(oracle.clearing_price).map(|(a, b)| a - b),
        max_net_power_delta_mw: max_delta,
        objective,
        objective_rel_delta: (engine_objective - objective) / objective.abs().max(1e-12),
    });
    Ok(())
}

/// One fee grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub fee: f64,
    pub converged: bool,
    pub iterations: usize,
    pub volume_mw: f64,
    pub operator_revenue: f64,
    pub interzone_mw: f64,
    pub avg_rate: f64,
    pub max_rate: f64,
    pub argmax_line: String,
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub record: SweepRecord,
    pub line_rates: Vec<f64>,
}

/// `min, min + step, ...` up to `max` inclusive (within rounding).
pub fn fee_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(
            "sweep",
            format!("step must be positive, got {step}"),
        ));
    }
    if !(min >= 0.0 && min.is_finite() && max.is_finite() && min <= max) {
        return Err(Error::invalid(
            "sweep",
            format!("need 0 <= fee_min <= fee_max, got {min}..{max}"),
        ));
    }
    let count = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| min + i as f64 * step).collect())
}

/// Runs one independent clearing per fee. Points are evaluated in parallel
/// when the `parallel` feature is on; output order follows `fees`.
pub fn sweep(
    case: &Case,
    policy: &PolicySpec,
    fees: &[f64],
    solver: &SolverConfig,
) -> Result<Vec<SweepPoint>> {
    if fees.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "sweep",
            "fee grid must be strictly increasing",
        ));
    }
    let dc = DcModel::new(&case.network, case.slack)?;
    let distances = match policy.kind {
        PolicyKind::Distance => Some(distance_matrix(
            &case.community,
            &case.network,
            policy.metric,
        )?),
        _ => None,
    };
    let zones = match policy.kind {
        PolicyKind::Zonal => Some(ZonePaths::new(&case.community, &case.network)?),
        _ => None,
    };
    let point = |&fee: &f64| -> Result<SweepPoint> {
        let spec = policy.with_fee(fee);
        let gamma = build_gamma(&spec, &case.community, distances.as_ref(), zones.as_ref())?;
        let report = evaluate(case, &dc, &spec, gamma, solver, Execution::Serial)?;
        Ok(SweepPoint {
            record: report.sweep_record(case),
            line_rates: report.flows.rates,
        })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        fees.par_iter().map(point).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        fees.iter().map(point).collect()
    }
}

/// Volume-weighted free-market price, used to convert percentage fees.
pub fn free_market_price(case: &Case, solver: &SolverConfig) -> Result<f64> {
    let report = run(case, &PolicySpec::free(), solver, Execution::Serial)?;
    report
        .clearing
        .clearing_price(&case.community)
        .ok_or_else(|| Error::Infeasible("free market clears without trades".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum FeeTarget {
    /// Smallest fee keeping the maximum line rate at or below the value.
    MaxLineRate { value: f64 },
    /// Fee maximizing the operator revenue on the grid.
    Revenue,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub fee: f64,
    pub volume_mw: f64,
    pub operator_revenue: f64,
    pub interzone_mw: f64,
    pub avg_rate: f64,
    pub max_rate: f64,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn interpolate(lo: &SweepRecord, hi: &SweepRecord, t: f64) -> Recommendation {
    Recommendation {
        fee: lerp(lo.fee, hi.fee, t),
        volume_mw: lerp(lo.volume_mw, hi.volume_mw, t),
        operator_revenue: lerp(lo.operator_revenue, hi.operator_revenue, t),
        interzone_mw: lerp(lo.interzone_mw, hi.interzone_mw, t),
        avg_rate: lerp(lo.avg_rate, hi.avg_rate, t),
        max_rate: lerp(lo.max_rate, hi.max_rate, t),
    }
}

/// Reads a target off a sweep table. Line-rate targets interpolate linearly
/// at the first grid interval where the maximum rate reaches the target.
pub fn recommend_fee(records: &[SweepRecord], target: FeeTarget) -> Result<Recommendation> {
    if records.is_empty() {
        return Err(Error::invalid("sweep table", "no records"));
    }
    if records.windows(2).any(|w| w[1].fee <= w[0].fee) {
        return Err(Error::invalid(
            "sweep table",
            "fees must be strictly increasing",
        ));
    }
    match target {
        FeeTarget::MaxLineRate { value } => {
            let first = &records[0];
            if first.max_rate <= value {
                return Ok(interpolate(first, first, 0.0));
            }
            for w in records.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                if b.max_rate <= value {
                    let t = (a.max_rate - value) / (a.max_rate - b.max_rate);
                    return Ok(interpolate(a, b, t));
                }
            }
            let low = records
                .iter()
                .map(|r| r.max_rate)
                .fold(f64::INFINITY, f64::min);
            let high = records
                .iter()
                .map(|r| r.max_rate)
                .fold(f64::NEG_INFINITY, f64::max);
            Err(Error::OutOfRange {
                target: value,
                low,
                high,
            })
        }
        FeeTarget::Revenue => {
            let best = records.iter().fold(&records[0], |best, r| {
                if r.operator_revenue > best.operator_revenue {
                    r
                } else {
                    best
                }
            });
            Ok(interpolate(best, best, 0.0))
        }
    }
}
