//! Electrical network data: buses with zone labels, lines with reactance and
//! thermal rating, and the DC susceptance matrix built from them.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::{Error, Result};

pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bus {
    pub id: u32,
    pub zone: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    /// 1-based position of the line in the network file.
    pub id: u32,
    pub from_bus: u32,
    pub to_bus: u32,
    /// Series reactance in per unit on the network MVA base.
    pub reactance: f64,
    /// Thermal limit in MW.
    pub capacity: f64,
}

/// A validated, connected network. Immutable once built.
#[derive(Debug, Clone)]
pub struct Network {
    name: String,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    base_mva: f64,
    zone_count: u32,
    index: HashMap<u32, usize>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.buses == other.buses
            && self.lines == other.lines
            && self.base_mva == other.base_mva
            && self.zone_count == other.zone_count
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    version: u32,
    #[serde(default)]
    name: Option<String>,
    base_mva: f64,
    zone_count: u32,
    buses: Vec<(u32, u32)>,
    lines: Vec<(u32, u32, f64, f64)>,
}

impl Network {
    /// Builds a network from raw parts, checking every structural invariant.
    /// Line ids are assigned from the order of `lines`, starting at 1.
    pub fn new(
        name: impl Into<String>,
        buses: Vec<Bus>,
        lines: Vec<(u32, u32, f64, f64)>,
        base_mva: f64,
        zone_count: u32,
    ) -> Result<Self> {
        if !(base_mva > 0.0 && base_mva.is_finite()) {
            return Err(Error::invalid(
                "network",
                format!("base_mva must be positive, got {base_mva}"),
            ));
        }
        if zone_count == 0 {
            return Err(Error::invalid("network", "zone_count must be at least 1"));
        }
        if buses.is_empty() {
            return Err(Error::invalid("network", "no buses declared"));
        }

        let mut index = HashMap::with_capacity(buses.len());
        let mut zone_used = vec![false; zone_count as usize];
        for (pos, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, pos).is_some() {
                return Err(Error::invalid(
                    "bus",
                    format!("duplicate bus id {}", bus.id),
                ));
            }
            if bus.zone == 0 || bus.zone > zone_count {
                return Err(Error::invalid(
                    "bus",
                    format!(
                        "bus {} has zone {} outside 1..={zone_count}",
                        bus.id, bus.zone
                    ),
                ));
            }
            zone_used[bus.zone as usize - 1] = true;
        }
        if let Some(z) = zone_used.iter().position(|used| !used) {
            return Err(Error::invalid(
                "network",
                format!("zone {} has no bus", z + 1),
            ));
        }

        let mut checked = Vec::with_capacity(lines.len());
        for (i, &(from_bus, to_bus, reactance, capacity)) in lines.iter().enumerate() {
            let id = i as u32 + 1;
            if !(reactance > 0.0 && reactance.is_finite()) {
                return Err(Error::invalid(
                    "line",
                    format!("line {id} ({from_bus}-{to_bus}) reactance must be positive, got {reactance}"),
                ));
            }
            if !(capacity > 0.0 && capacity.is_finite()) {
                return Err(Error::invalid(
                    "line",
                    format!(
                        "line {id} ({from_bus}-{to_bus}) capacity must be positive, got {capacity}"
                    ),
                ));
            }
            if from_bus == to_bus {
                return Err(Error::invalid(
                    "line",
                    format!("line {id} connects bus {from_bus} to itself"),
                ));
            }
            for end in [from_bus, to_bus] {
                if !index.contains_key(&end) {
                    return Err(Error::invalid(
                        "line",
                        format!("line {id} references unknown bus {end}"),
                    ));
                }
            }
            checked.push(Line {
                id,
                from_bus,
                to_bus,
                reactance,
                capacity,
            });
        }

        let network = Network {
            name: name.into(),
            buses,
            lines: checked,
            base_mva,
            zone_count,
            index,
        };
        network.check_connected()?;
        Ok(network)
    }

    pub fn from_toml_str(text: &str, context: &str) -> Result<Self> {
        let file: NetworkFile = toml::from_str(text).map_err(|e| Error::parse(context, e))?;
        if file.version != NETWORK_FORMAT_VERSION {
            return Err(Error::invalid(
                "network",
                format!(
                    "unsupported format version {} (expected {NETWORK_FORMAT_VERSION})",
                    file.version
                ),
            ));
        }
        let buses = file
            .buses
            .into_iter()
            .map(|(id, zone)| Bus { id, zone })
            .collect();
        Network::new(
            file.name.unwrap_or_default(),
            buses,
            file.lines,
            file.base_mva,
            file.zone_count,
        )
    }

    /// Serializes back into the network file format.
    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "version = {NETWORK_FORMAT_VERSION}");
        let _ = writeln!(out, "name = {:?}", self.name);
        let _ = writeln!(out, "base_mva = {:?}", self.base_mva);
        let _ = writeln!(out, "zone_count = {}", self.zone_count);
        out.push_str("buses = [\n");
        for bus in &self.buses {
            let _ = writeln!(out, "  [{}, {}],", bus.id, bus.zone);
        }
        out.push_str("]\nlines = [\n");
        for line in &self.lines {
            let _ = writeln!(
                out,
                "  [{}, {}, {:?}, {:?}],",
                line.from_bus, line.to_bus, line.reactance, line.capacity
            );
        }
        out.push_str("]\n");
        out
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.buses.len();
        let adjacency = self.adjacency();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(pos) => Err(Error::Disconnected(self.buses[pos].id)),
            None => Ok(()),
        }
    }

    /// Per bus position: list of (neighbour position, line index).
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adjacency = vec![Vec::new(); self.buses.len()];
        for (l, line) in self.lines.iter().enumerate() {
            let (i, j) = self.line_ends(line);
            adjacency[i].push((j, l));
            adjacency[j].push((i, l));
        }
        adjacency
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn zone_count(&self) -> u32 {
        self.zone_count
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Position of a bus id in [`Network::buses`].
    pub fn position(&self, bus: u32) -> Result<usize> {
        self.index.get(&bus).copied().ok_or(Error::UnknownBus(bus))
    }

    pub fn contains_bus(&self, bus: u32) -> bool {
        self.index.contains_key(&bus)
    }

    pub fn zone_of(&self, bus: u32) -> Result<u32> {
        Ok(self.buses[self.position(bus)?].zone)
    }

    /// Bus positions of both line ends.
    pub fn line_ends(&self, line: &Line) -> (usize, usize) {
        (self.index[&line.from_bus], self.index[&line.to_bus])
    }

    /// Highest-numbered bus, the default slack.
    pub fn default_slack(&self) -> u32 {
        self.buses.iter().map(|b| b.id).max().unwrap_or(0)
    }

    /// Finds a line between two buses regardless of orientation.
    pub fn find_line(&self, a: u32, b: u32) -> Option<&Line> {
        self.lines
            .iter()
            .find(|l| (l.from_bus == a && l.to_bus == b) || (l.from_bus == b && l.to_bus == a))
    }

    /// DC susceptance matrix in per unit, indexed by bus position.
    /// Off-diagonals are `-1/x` summed over parallel lines; rows sum to zero.
    pub fn susceptance_matrix(&self) -> DMatrix<f64> {
        let n = self.buses.len();
        let mut b = DMatrix::zeros(n, n);
        for line in &self.lines {
            let (i, j) = self.line_ends(line);
            let y = 1.0 / line.reactance;
            b[(i, i)] += y;
            b[(j, j)] += y;
            b[(i, j)] -= y;
            b[(j, i)] -= y;
        }
        b
    }
}

/// Reads and validates a network file.
pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Network::from_toml_str(&text, &path.display().to_string())
}
