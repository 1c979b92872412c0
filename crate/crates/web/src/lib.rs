//! Browser bindings for the bundled New England case. Every export returns a
//! JSON string so the page needs no generated types.

use std::sync::OnceLock;

use p2p_market::distance::{shortest_path, thevenin_line_weights, zones_crossed};
use p2p_market::engine::Execution;
use p2p_market::experiment::{
    fee_grid, run, sweep as run_sweep, Case, SweepRecord, TRADE_THRESHOLD,
};
use p2p_market::{power_transfer_distance, Metric, PolicyKind, PolicySpec, SolverConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn case() -> &'static Case {
    static CASE: OnceLock<Case> = OnceLock::new();
    CASE.get_or_init(Case::new_england)
}

fn policy(kind: &str, fee: f64) -> Result<PolicySpec, String> {
    let kind: PolicyKind = kind.parse().map_err(|e: p2p_market::Error| e.to_string())?;
    let spec = PolicySpec::new(kind, fee);
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

#[derive(Serialize)]
struct Edge {
    seller: u32,
    buyer: u32,
    mw: f64,
    inter_zone: bool,
}

#[derive(Serialize)]
struct LineRate {
    from: u32,
    to: u32,
    rate: f64,
}

#[derive(Serialize)]
struct Clearing {
    converged: bool,
    iterations: usize,
    price: Option<f64>,
    volume_mw: f64,
    operator_revenue: f64,
    interzone_mw: f64,
    max_rate: f64,
    max_rate_line: String,
    trade_count: usize,
    lines: Vec<LineRate>,
    edges: Vec<Edge>,
}

pub fn clear_json(kind: &str, fee: f64) -> Result<String, String> {
    let case = case();
    let spec = policy(kind, fee)?;
    let report =
        run(case, &spec, &SolverConfig::default(), Execution::Serial).map_err(|e| e.to_string())?;
    let com = &case.community;
    let c = &report.clearing;
    let mut edges = Vec::new();
    for n in com.producers() {
        for &m in com.partners(n) {
            let mw = c.trades.get(n, m);
            if mw > TRADE_THRESHOLD {
                let zone = |i: usize| case.network.zone_of(com.agent(i).bus).unwrap_or(0);
                edges.push(Edge {
                    seller: com.agent(n).id,
                    buyer: com.agent(m).id,
                    mw,
                    inter_zone: zone(n) != zone(m),
                });
            }
        }
    }
    let lines = case
        .network
        .lines()
        .iter()
        .zip(&report.flows.rates)
        .map(|(l, &rate)| LineRate {
            from: l.from_bus,
            to: l.to_bus,
            rate,
        })
        .collect();
    let out = Clearing {
        converged: c.converged,
        iterations: c.iterations,
        price: c.clearing_price(com),
        volume_mw: c.total_volume(com),
        operator_revenue: report.operator_revenue,
        interzone_mw: report.interzone.total,
        max_rate: report.rates.maximum,
        max_rate_line: case.line_label(report.rates.argmax),
        trade_count: c.trade_count(com, TRADE_THRESHOLD),
        lines,
        edges,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

pub fn sweep_json(kind: &str, fee_max: f64, step: f64) -> Result<String, String> {
    let case = case();
    let spec = policy(kind, 0.0)?;
    let fees = fee_grid(0.0, fee_max, step).map_err(|e| e.to_string())?;
    if fees.len() > 400 {
        return Err("at most 400 grid points".into());
    }
    let points =
        run_sweep(case, &spec, &fees, &SolverConfig::default()).map_err(|e| e.to_string())?;
    let records: Vec<SweepRecord> = points.into_iter().map(|p| p.record).collect();
    serde_json::to_string(&records).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Distance {
    distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zones: Option<u32>,
}

pub fn distance_json(from: u32, to: u32, metric: &str) -> Result<String, String> {
    let network = &case().network;
    let metric: Metric = metric
        .parse()
        .map_err(|e: p2p_market::Error| e.to_string())?;
    let out = match metric {
        Metric::PowerTransfer => Distance {
            distance: power_transfer_distance(network, from, to).map_err(|e| e.to_string())?,
            path: None,
            zones: None,
        },
        Metric::Thevenin => {
            let weights = thevenin_line_weights(network).map_err(|e| e.to_string())?;
            let path = shortest_path(network, &weights, from, to).map_err(|e| e.to_string())?;
            let zones = zones_crossed(&path, network).map_err(|e| e.to_string())?;
            Distance {
                distance: path.total_weight,
                path: Some(path.nodes),
                zones: Some(zones),
            }
        }
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Clears the bundled market under a policy (`free`, `unique`, `distance`, `zonal`).
#[wasm_bindgen]
pub fn clear(policy: &str, fee: f64) -> Result<String, JsError> {
    clear_json(policy, fee).map_err(|e| JsError::new(&e))
}

/// Fee sweep from 0 to `fee_max`.
#[wasm_bindgen]
pub fn sweep(policy: &str, fee_max: f64, step: f64) -> Result<String, JsError> {
    sweep_json(policy, fee_max, step).map_err(|e| JsError::new(&e))
}

/// Electrical distance between two buses (`power_transfer` or `thevenin`).
#[wasm_bindgen]
pub fn distance(from: u32, to: u32, metric: &str) -> Result<String, JsError> {
    distance_json(from, to, metric).map_err(|e| JsError::new(&e))
}
