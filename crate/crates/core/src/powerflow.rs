//! DC power flow and grid-level indicators of a market outcome.

use std::collections::BTreeMap;

use crate::community::Community;
use crate::distance::GroundedInverse;
use crate::error::{Error, Result};
use crate::matrix::TradeMatrix;
use crate::network::Network;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    /// MW per line, positive from `from_bus` to `to_bus`.
    pub flows: Vec<f64>,
    /// `|flow| / capacity` per line.
    pub rates: Vec<f64>,
    pub slack: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSummary {
    pub average: f64,
    pub maximum: f64,
    /// Index into `network.lines()` of the most loaded line.
    pub argmax: usize,
}

/// Reusable DC model: the grounded inverse is factorized once per network.
#[derive(Debug, Clone)]
pub struct DcModel<'a> {
    network: &'a Network,
    slack: u32,
    inverse: GroundedInverse,
}

impl<'a> DcModel<'a> {
    pub fn new(network: &'a Network, slack: u32) -> Result<Self> {
        Ok(DcModel {
            network,
            slack,
            inverse: GroundedInverse::new(network, slack)?,
        })
    }

    pub fn slack(&self) -> u32 {
        self.slack
    }

    /// Solves the flows for per-bus injections in MW, ordered by bus position.
    pub fn solve(&self, injections: &[f64]) -> Result<FlowResult> {
        let network = self.network;
        let n = network.bus_count();
        if injections.len() != n {
            return Err(Error::invalid(
                "injections",
                format!("expected {n} values, got {}", injections.len()),
            ));
        }
        let residual: f64 = injections.iter().sum();
        let tolerance = 1e-3 * n as f64;
        if residual.abs() > tolerance || !residual.is_finite() {
            return Err(Error::Imbalance {
                residual,
                tolerance,
            });
        }
        let base = network.base_mva();
        let x = self.inverse.matrix();
        let theta: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| x[(i, j)] * injections[j]).sum::<f64>() / base)
            .collect();
        let flows: Vec<f64> = network
            .lines()
            .iter()
            .map(|line| {
                let (f, t) = network.line_ends(line);
                (theta[f] - theta[t]) / line.reactance * base
            })
            .collect();
        let rates = flows
            .iter()
            .zip(network.lines())
            .map(|(f, line)| f.abs() / line.capacity)
            .collect();
        Ok(FlowResult {
            flows,
            rates,
            slack: self.slack,
        })
    }
}

pub fn dc_power_flow(network: &Network, injections: &[f64], slack: u32) -> Result<FlowResult> {
    DcModel::new(network, slack)?.solve(injections)
}

pub fn line_rates(flows: &FlowResult) -> RateSummary {
    let mut summary = RateSummary {
        average: 0.0,
        maximum: 0.0,
        argmax: 0,
    };
    if flows.rates.is_empty() {
        return summary;
    }
    for (l, &r) in flows.rates.iter().enumerate() {
        if r > summary.maximum {
            summary.maximum = r;
            summary.argmax = l;
        }
    }
    summary.average = flows.rates.iter().sum::<f64>() / flows.rates.len() as f64;
    summary
}

/// Overloaded lines as `(line index, rate)`, most loaded first.
pub fn congestion_report(flows: &FlowResult) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = flows
        .rates
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > 1.0)
        .map(|(l, &r)| (l, r))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Exchanged MW per unordered zone pair `(z, z')` with `z < z'`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneExchangeReport {
    /// Volume traded between the two zones in either direction.
    pub pairs: BTreeMap<(u32, u32), f64>,
    pub total: f64,
    /// `|sold from z to z' - sold from z' to z|` per pair, summed.
    pub net_total: f64,
}

/// Market-level exchange between zones. Each bilateral trade is counted
/// once, on its selling side.
pub fn interzone_exchange(
    community: &Community,
    trades: &TradeMatrix,
    network: &Network,
) -> Result<ZoneExchangeReport> {
    let zones: Vec<u32> = community
        .agents()
        .iter()
        .map(|a| network.zone_of(a.bus))
        .collect::<Result<_>>()?;
    let mut pairs: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut signed: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for (n, m) in community.pairs() {
        let p = trades.get(n, m);
        let (z, w) = (zones[n], zones[m]);
        if p > 0.0 && z != w {
            let key = (z.min(w), z.max(w));
            *pairs.entry(key).or_default() += p;
            *signed.entry(key).or_default() += if z < w { p } else { -p };
        }
    }
    Ok(ZoneExchangeReport {
        total: pairs.values().fold(0.0, |acc, v| acc + v),
        net_total: signed.values().fold(0.0, |acc, v| acc + v.abs()),
        pairs,
    })
}

/// Flow-level variant: sum of absolute flows on lines joining two zones.
pub fn tie_line_flow(flows: &FlowResult, network: &Network) -> Result<f64> {
    let mut total = 0.0;
    for (line, f) in network.lines().iter().zip(&flows.flows) {
        if network.zone_of(line.from_bus)? != network.zone_of(line.to_bus)? {
            total += f.abs();
        }
    }
    Ok(total)
}
