//! Electrical distances between buses: Thevenin impedance shortest paths and
//! power transfer distances built from PTDFs, plus zone-crossing counts.

use std::cmp::Ordering;
use std::collections::hash_map::Entry;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::community::Community;
use crate::error::{Error, Result};
use crate::network::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Thevenin,
    PowerTransfer,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Thevenin => "thevenin",
            Metric::PowerTransfer => "power_transfer",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thevenin" => Ok(Metric::Thevenin),
            "power_transfer" => Ok(Metric::PowerTransfer),
            other => Err(Error::invalid(
                "metric",
                format!("unknown metric {other:?}"),
            )),
        }
    }
}

/// Inverse of the susceptance matrix with one bus grounded. The grounded
/// row and column are zero.
#[derive(Debug, Clone)]
pub struct GroundedInverse {
    reference: usize,
    inverse: DMatrix<f64>,
}

impl GroundedInverse {
    pub fn new(network: &Network, reference_bus: u32) -> Result<Self> {
        let reference = network.position(reference_bus)?;
        let b = network.susceptance_matrix();
        let n = b.nrows();
        let keep: Vec<usize> = (0..n).filter(|&i| i != reference).collect();
        let reduced = b.select_rows(&keep).select_columns(&keep);
        let chol = nalgebra::Cholesky::new(reduced).ok_or(Error::Disconnected(reference_bus))?;
        let reduced_inv = chol.inverse();
        let mut inverse = DMatrix::zeros(n, n);
        for (ri, &i) in keep.iter().enumerate() {
            for (rj, &j) in keep.iter().enumerate() {
                inverse[(i, j)] = reduced_inv[(ri, rj)];
            }
        }
        Ok(GroundedInverse { reference, inverse })
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// `|Z_ii + Z_jj - 2 Z_ij|` by bus position; independent of the grounded bus.
    pub fn thevenin(&self, i: usize, j: usize) -> f64 {
        let z = &self.inverse;
        (z[(i, i)] + z[(j, j)] - 2.0 * z[(i, j)]).abs()
    }
}

/// Bus impedance matrix (per unit) indexed by bus position, obtained by
/// grounding the default slack bus.
pub fn bus_impedance_matrix(network: &Network) -> Result<DMatrix<f64>> {
    Ok(GroundedInverse::new(network, network.default_slack())?.inverse)
}

/// Thevenin impedance seen across each line's terminals.
pub fn thevenin_line_weights(network: &Network) -> Result<Vec<f64>> {
    let z = GroundedInverse::new(network, network.default_slack())?;
    Ok(network
        .lines()
        .iter()
        .map(|line| {
            let (i, j) = network.line_ends(line);
            z.thevenin(i, j)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    /// Bus ids from origin to destination.
    pub nodes: Vec<u32>,
    pub total_weight: f64,
    /// Distinct zones in order of first visit.
    pub zones_visited: Vec<u32>,
}

#[derive(PartialEq)]
struct HeapEntry(f64, usize);

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(adjacency: &[Vec<(usize, usize)>], weights: &[f64], source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adjacency.len()];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::from([HeapEntry(0.0, source)]);
    while let Some(HeapEntry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, l) in &adjacency[u] {
            let nd = d + weights[l];
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapEntry(nd, v));
            }
        }
    }
    dist
}

fn check_weights(network: &Network, weights: &[f64]) -> Result<()> {
    if weights.len() != network.lines().len() {
        return Err(Error::invalid("weights", "one weight per line expected"));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid(
            "weights",
            "weights must be finite and nonnegative",
        ));
    }
    Ok(())
}

/// Minimum-weight path between two buses. Among equal-weight paths the
/// lexicographically smallest bus sequence is returned.
pub fn shortest_path(network: &Network, weights: &[f64], from: u32, to: u32) -> Result<PathResult> {
    check_weights(network, weights)?;
    let s = network.position(from)?;
    let t = network.position(to)?;
    let adjacency = network.adjacency();
    let from_s = dijkstra(&adjacency, weights, s);
    if !from_s[t].is_finite() {
        return Err(Error::Unreachable { from, to });
    }
    let from_t = dijkstra(&adjacency, weights, t);
    let total = from_s[t];
    let tol = 1e-12 * total.max(1.0);
    let buses = network.buses();

    let mut nodes = vec![s];
    let mut visited = vec![false; buses.len()];
    visited[s] = true;
    let mut cur = s;
    while cur != t {
        let next = adjacency[cur]
            .iter()
            .filter(|&&(v, l)| {
                !visited[v] && (from_s[cur] + weights[l] + from_t[v] - total).abs() <= tol
            })
            .map(|&(v, _)| v)
            .min_by_key(|&v| buses[v].id)
            .ok_or(Error::Unreachable { from, to })?;
        visited[next] = true;
        nodes.push(next);
        cur = next;
    }

    let total_weight = nodes
        .windows(2)
        .map(|w| {
            adjacency[w[0]]
                .iter()
                .filter(|&&(v, _)| v == w[1])
                .map(|&(_, l)| weights[l])
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    let mut zones_visited = Vec::new();
    for &p in &nodes {
        let z = buses[p].zone;
        if !zones_visited.contains(&z) {
            zones_visited.push(z);
        }
    }
    Ok(PathResult {
        nodes: nodes.iter().map(|&p| buses[p].id).collect(),
        total_weight,
        zones_visited,
    })
}

/// Number of distinct zones visited by a path; at least 1.
pub fn zones_crossed(path: &PathResult, network: &Network) -> Result<u32> {
    let mut zones: Vec<u32> = path
        .nodes
        .iter()
        .map(|&b| network.zone_of(b))
        .collect::<Result<_>>()?;
    zones.sort_unstable();
    zones.dedup();
    Ok(zones.len().max(1) as u32)
}

/// Line flow sensitivities to bus injections withdrawn at the slack.
#[derive(Debug, Clone)]
pub struct PtdfMatrix {
    slack: u32,
    /// lines x buses, bus columns ordered by position.
    values: DMatrix<f64>,
}

impl PtdfMatrix {
    pub fn new(network: &Network, slack: u32) -> Result<Self> {
        let grounded = GroundedInverse::new(network, slack)?;
        let x = grounded.matrix();
        let n = network.bus_count();
        let mut values = DMatrix::zeros(network.lines().len(), n);
        for (l, line) in network.lines().iter().enumerate() {
            let (f, t) = network.line_ends(line);
            for i in 0..n {
                values[(l, i)] = (x[(f, i)] - x[(t, i)]) / line.reactance;
            }
        }
        Ok(PtdfMatrix { slack, values })
    }

    pub fn slack(&self) -> u32 {
        self.slack
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Entry by line index and bus position.
    pub fn get(&self, line: usize, bus: usize) -> f64 {
        self.values[(line, bus)]
    }

    /// `sum_l |PTDF(l, i) - PTDF(l, j)|` by bus position.
    pub fn transfer_distance(&self, i: usize, j: usize) -> f64 {
        (0..self.values.nrows())
            .map(|l| (self.values[(l, i)] - self.values[(l, j)]).abs())
            .sum()
    }
}

pub fn ptdf_matrix(network: &Network, slack: u32) -> Result<PtdfMatrix> {
    PtdfMatrix::new(network, slack)
}

/// Sum of absolute line flows induced by a 1 MW trade between two buses.
pub fn power_transfer_distance(network: &Network, bus_n: u32, bus_m: u32) -> Result<f64> {
    let ptdf = PtdfMatrix::new(network, network.default_slack())?;
    Ok(ptdf.transfer_distance(network.position(bus_n)?, network.position(bus_m)?))
}

/// Bus-to-bus distance table for one metric, indexed by bus position.
#[derive(Debug, Clone)]
pub struct BusDistances {
    pub metric: Metric,
    pub values: DMatrix<f64>,
}

impl BusDistances {
    pub fn new(network: &Network, metric: Metric) -> Result<Self> {
        let n = network.bus_count();
        let values = match metric {
            Metric::PowerTransfer => {
                let ptdf = PtdfMatrix::new(network, network.default_slack())?;
                DMatrix::from_fn(n, n, |i, j| {
                    if i == j {
                        0.0
                    } else {
                        ptdf.transfer_distance(i, j)
                    }
                })
            }
            Metric::Thevenin => {
                let weights = thevenin_line_weights(network)?;
                let adjacency = network.adjacency();
                let mut values = DMatrix::zeros(n, n);
                for i in 0..n {
                    let d = dijkstra(&adjacency, &weights, i);
                    for j in 0..n {
                        values[(i, j)] = d[j];
                    }
                }
                // Symmetrize away last-bit differences between the two sweep directions.
                DMatrix::from_fn(n, n, |i, j| 0.5 * (values[(i, j)] + values[(j, i)]))
            }
        };
        Ok(BusDistances { metric, values })
    }
}

/// Agent-pair electrical distances; co-located agents are at distance 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub metric: Metric,
    agent_ids: Vec<u32>,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agent_ids.is_empty()
    }

    /// Distance by agent position.
    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.values[n * self.len() + m]
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = format!("# p2p-market distances v1 metric={}\nagent", self.metric);
        for id in &self.agent_ids {
            out.push_str(&format!(",{id}"));
        }
        out.push('\n');
        for (n, id) in self.agent_ids.iter().enumerate() {
            out.push_str(&id.to_string());
            for m in 0..self.len() {
                out.push_str(&format!(",{:?}", self.get(n, m)));
            }
            out.push('\n');
        }
        out
    }
}

pub fn distance_matrix(
    community: &Community,
    network: &Network,
    metric: Metric,
) -> Result<DistanceMatrix> {
    let buses = BusDistances::new(network, metric)?;
    let positions: Vec<usize> = community
        .agents()
        .iter()
        .map(|a| network.position(a.bus))
        .collect::<Result<_>>()?;
    let n = community.len();
    let mut values = vec![0.0; n * n];
    for (i, &bi) in positions.iter().enumerate() {
        for (j, &bj) in positions.iter().enumerate() {
            values[i * n + j] = if bi == bj {
                0.0
            } else {
                buses.values[(bi, bj)]
            };
        }
    }
    Ok(DistanceMatrix {
        metric,
        agent_ids: community.agents().iter().map(|a| a.id).collect(),
        values,
    })
}

/// Zones visited by the Thevenin shortest path between each agent pair.
#[derive(Debug, Clone)]
pub struct ZonePaths {
    n: usize,
    zones: Vec<Vec<u32>>,
}

impl ZonePaths {
    pub fn new(community: &Community, network: &Network) -> Result<Self> {
        let weights = thevenin_line_weights(network)?;
        let n = community.len();
        let mut by_bus: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        let mut zones = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (bi, bj) = (community.agent(i).bus, community.agent(j).bus);
                if bi == bj {
                    zones.push(vec![network.zone_of(bi)?]);
                    continue;
                }
                let key = (bi.min(bj), bi.max(bj));
                let visited = match by_bus.entry(key) {
                    Entry::Occupied(e) => e.into_mut(),
                    Entry::Vacant(e) => {
                        let mut visited =
                            shortest_path(network, &weights, key.0, key.1)?.zones_visited;
                        visited.sort_unstable();
                        e.insert(visited)
                    }
                };
                zones.push(visited.clone());
            }
        }
        Ok(ZonePaths { n, zones })
    }

    /// Sorted distinct zones on the path between agents `n` and `m`.
    pub fn zones(&self, n: usize, m: usize) -> &[u32] {
        &self.zones[n * self.n + m]
    }

    pub fn count(&self, n: usize, m: usize) -> u32 {
        self.zones(n, m).len() as u32
    }
}
