//! The bundled New England case: IEEE 39-bus grid with a 31-agent community.

use crate::community::Community;
use crate::error::Result;
use crate::network::Network;

pub const NEW_ENGLAND_NETWORK: &str = include_str!("../data/new_england.net");
pub const NEW_ENGLAND_AGENTS: &str = include_str!("../data/agents.csv");

pub fn new_england_network() -> Network {
    Network::from_toml_str(NEW_ENGLAND_NETWORK, "new_england.net")
        .expect("bundled network is valid")
}

pub fn new_england_community() -> Community {
    Community::from_csv_str(NEW_ENGLAND_AGENTS, "agents.csv").expect("bundled agents are valid")
}

pub fn new_england() -> Result<(Network, Community)> {
    let network = new_england_network();
    let community = new_england_community();
    community.check_against(&network)?;
    Ok((network, community))
}
