//! Market participants: quadratic cost agents, their bounds and partnerships.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::network::Network;

pub const AGENTS_HEADER: [&str; 8] = ["agent_id", "bus", "role", "a", "b", "c", "p_min", "p_max"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Producer,
    Consumer,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Producer => "producer",
            Role::Consumer => "consumer",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "producer" => Ok(Role::Producer),
            "consumer" => Ok(Role::Consumer),
            other => Err(Error::invalid("agent", format!("unknown role {other:?}"))),
        }
    }
}

/// An agent with cost `f(P) = a P^2 / 2 + b P + c`; `P` is positive when producing.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct Agent {
    #[serde(rename = "agent_id")]
    pub id: u32,
    pub bus: u32,
    pub role: Role,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl Agent {
    pub fn cost(&self, p: f64) -> f64 {
        0.5 * self.a * p * p + self.b * p + self.c
    }

    pub fn marginal_cost(&self, p: f64) -> f64 {
        self.a * p + self.b
    }

    /// Inverse of the marginal cost.
    pub fn power_at(&self, marginal: f64) -> f64 {
        (marginal - self.b) / self.a
    }

    pub fn is_producer(&self) -> bool {
        self.role == Role::Producer
    }

    /// Projects a trade onto the sign allowed for this agent.
    pub fn project_sign(&self, trade: f64) -> f64 {
        match self.role {
            Role::Producer => trade.max(0.0),
            Role::Consumer => trade.min(0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let id = self.id;
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::invalid(
                "agent",
                format!("agent {id}: quadratic coefficient a must be positive"),
            ));
        }
        if ![self.b, self.c, self.p_min, self.p_max]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid(
                "agent",
                format!("agent {id}: non-finite parameter"),
            ));
        }
        if self.p_min > self.p_max {
            return Err(Error::invalid(
                "agent",
                format!("agent {id}: p_min > p_max"),
            ));
        }
        match self.role {
            Role::Producer if self.p_min < 0.0 => Err(Error::invalid(
                "agent",
                format!("agent {id}: producer bounds must be nonnegative"),
            )),
            Role::Consumer if self.p_max > 0.0 => Err(Error::invalid(
                "agent",
                format!("agent {id}: consumer bounds must be nonpositive"),
            )),
            _ => Ok(()),
        }
    }
}

/// A validated set of agents and their symmetric trading partnerships.
#[derive(Debug, Clone, PartialEq)]
pub struct Community {
    agents: Vec<Agent>,
    /// Partner positions per agent, ascending.
    partners: Vec<Vec<usize>>,
    index: HashMap<u32, usize>,
}

impl Community {
    /// Builds a community where every producer partners with every consumer.
    pub fn new(agents: Vec<Agent>) -> Result<Self> {
        let mut index = HashMap::with_capacity(agents.len());
        for (pos, agent) in agents.iter().enumerate() {
            agent.validate()?;
            if index.insert(agent.id, pos).is_some() {
                return Err(Error::invalid(
                    "community",
                    format!("duplicate agent id {}", agent.id),
                ));
            }
        }
        if !agents.iter().any(Agent::is_producer) || agents.iter().all(Agent::is_producer) {
            return Err(Error::invalid(
                "community",
                "needs at least one producer and one consumer",
            ));
        }
        let partners = agents
            .iter()
            .map(|a| {
                agents
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.role != a.role)
                    .map(|(m, _)| m)
                    .collect()
            })
            .collect();
        Ok(Community {
            agents,
            partners,
            index,
        })
    }

    /// Replaces the default partnerships with an explicit list of agent id pairs.
    /// Each pair is made symmetric.
    pub fn with_partnerships(mut self, pairs: &[(u32, u32)]) -> Result<Self> {
        let mut partners = vec![Vec::new(); self.agents.len()];
        for &(a, b) in pairs {
            let n = self.position(a)?;
            let m = self.position(b)?;
            if n == m {
                return Err(Error::invalid(
                    "community",
                    format!("agent {a} cannot partner with itself"),
                ));
            }
            if self.agents[n].role == self.agents[m].role {
                return Err(Error::invalid(
                    "community",
                    format!("agents {a} and {b} have the same role and cannot trade"),
                ));
            }
            partners[n].push(m);
            partners[m].push(n);
        }
        for list in &mut partners {
            list.sort_unstable();
            list.dedup();
        }
        if let Some(n) = partners.iter().position(Vec::is_empty) {
            return Err(Error::invalid(
                "community",
                format!("agent {} has no trading partner", self.agents[n].id),
            ));
        }
        self.partners = partners;
        Ok(self)
    }

    /// Checks that every agent sits on a bus of `network`.
    pub fn check_against(&self, network: &Network) -> Result<()> {
        for agent in &self.agents {
            if !network.contains_bus(agent.bus) {
                return Err(Error::invalid(
                    "agent",
                    format!("agent {} references unknown bus {}", agent.id, agent.bus),
                ));
            }
        }
        Ok(())
    }

    pub fn from_csv_str(text: &str, context: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::parse(context, e))?;
        if headers.iter().ne(AGENTS_HEADER.iter().copied()) {
            return Err(Error::parse(
                context,
                format!("expected header {:?}", AGENTS_HEADER.join(",")),
            ));
        }
        let mut agents = Vec::new();
        for record in reader.deserialize::<Agent>() {
            let agent = record.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::parse(format!("{context}:{line}"), e)
            })?;
            agents.push(agent);
        }
        Community::new(agents)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = AGENTS_HEADER.join(",");
        out.push('\n');
        for a in &self.agents {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?},{:?},{:?}\n",
                a.id, a.bus, a.role, a.a, a.b, a.c, a.p_min, a.p_max
            ));
        }
        out
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn agent(&self, n: usize) -> &Agent {
        &self.agents[n]
    }

    pub fn partners(&self, n: usize) -> &[usize] {
        &self.partners[n]
    }

    pub fn are_partners(&self, n: usize, m: usize) -> bool {
        self.partners[n].binary_search(&m).is_ok()
    }

    /// Position of an agent id.
    pub fn position(&self, id: u32) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::invalid("community", format!("unknown agent {id}")))
    }

    /// Ordered pairs `(n, m)` with `m` a partner of `n`, row-major.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.partners
            .iter()
            .enumerate()
            .flat_map(|(n, list)| list.iter().map(move |&m| (n, m)))
    }

    pub fn producers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&n| self.agents[n].is_producer())
    }

    pub fn consumers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&n| !self.agents[n].is_producer())
    }

    /// Aggregates agent net powers (MW) into a per-bus injection vector
    /// ordered like `network.buses()`.
    pub fn net_injections(&self, network: &Network, net_powers: &[f64]) -> Result<Vec<f64>> {
        assert_eq!(net_powers.len(), self.len(), "one net power per agent");
        let mut injections = vec![0.0; network.bus_count()];
        for (agent, &p) in self.agents.iter().zip(net_powers) {
            injections[network.position(agent.bus)?] += p;
        }
        Ok(injections)
    }
}

/// Reads an agents file and checks it against the companion network.
pub fn load_agents(path: impl AsRef<Path>, network: &Network) -> Result<Community> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let community = Community::from_csv_str(&text, &path.display().to_string())?;
    community.check_against(network)?;
    Ok(community)
}
