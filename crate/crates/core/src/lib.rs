//! Peer-to-peer electricity market clearing with grid cost allocation.
//!
//! Agents trade bilaterally; each trade carries an exogenous per-MW charge
//! `gamma` set by a grid cost allocation policy. The engine clears the market
//! with a consensus + innovations iteration, and the grid side is analysed
//! with DC power flows.

pub mod case;
pub mod community;
pub mod distance;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod network;
pub mod oracle;
pub mod policy;
pub mod powerflow;
pub mod report;

pub use community::{load_agents, Agent, Community, Role};
pub use distance::{
    distance_matrix, power_transfer_distance, shortest_path, DistanceMatrix, Metric, PathResult,
};
pub use engine::{clear_market, ClearingResult, SolverConfig};
pub use error::{Error, Result};
pub use matrix::{PairMatrix, PriceMatrix, TradeMatrix};
pub use network::{load_network, Bus, Line, Network};
pub use oracle::{bisection_clearing, qp_reference, OracleResult};
pub use policy::{build_gamma, GammaMatrix, PolicyKind, PolicySpec};
pub use powerflow::{
    congestion_report, dc_power_flow, interzone_exchange, line_rates, FlowResult, RateSummary,
};
