#![allow(dead_code)]

use p2p_market::{Agent, Bus, Community, Network, Role};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn agent(id: u32, bus: u32, role: Role, a: f64, b: f64, p_min: f64, p_max: f64) -> Agent {
    Agent {
        id,
        bus,
        role,
        a,
        b,
        c: 0.0,
        p_min,
        p_max,
    }
}

/// One producer (0.1 P^2/2 + 20 P) and one consumer (0.1 P^2/2 + 80 P).
pub fn two_agents() -> Community {
    Community::new(vec![
        agent(1, 1, Role::Producer, 0.1, 20.0, 0.0, 500.0),
        agent(2, 2, Role::Consumer, 0.1, 80.0, -500.0, 0.0),
    ])
    .unwrap()
}

/// 2 to 6 agents with a in [0.05, 0.1], b in [15, 85] and bounds under
/// which the market can balance.
pub fn random_community(rng: &mut ChaCha8Rng) -> Community {
    loop {
        let n = rng.random_range(2..=6);
        let mut roles: Vec<Role> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    Role::Producer
                } else {
                    Role::Consumer
                }
            })
            .collect();
        roles[0] = Role::Producer;
        roles[1] = Role::Consumer;
        let agents: Vec<Agent> = roles
            .iter()
            .enumerate()
            .map(|(i, &role)| {
                let a = rng.random_range(0.05..=0.1);
                let b = rng.random_range(15.0..=85.0);
                let (lo, hi) = match role {
                    Role::Producer => (0.0, rng.random_range(50.0..=500.0)),
                    Role::Consumer => (
                        -rng.random_range(100.0..=500.0),
                        -rng.random_range(0.0..=50.0),
                    ),
                };
                agent(i as u32 + 1, 1, role, a, b, lo, hi)
            })
            .collect();
        let capacity: f64 = agents
            .iter()
            .filter(|a| a.is_producer())
            .map(|a| a.p_max)
            .sum();
        let must_serve: f64 = agents
            .iter()
            .filter(|a| !a.is_producer())
            .map(|a| -a.p_max)
            .sum();
        if must_serve <= capacity {
            return Community::new(agents).unwrap();
        }
    }
}

/// Connected network on `n` buses: a random tree plus `extra` chords.
pub fn random_network(rng: &mut ChaCha8Rng, n: u32, extra: usize, zones: u32) -> Network {
    let buses: Vec<Bus> = (1..=n)
        .map(|id| Bus {
            id,
            zone: if id <= zones {
                id
            } else {
                rng.random_range(1..=zones)
            },
        })
        .collect();
    let mut lines = Vec::new();
    for id in 2..=n {
        let parent = rng.random_range(1..id);
        lines.push((
            parent,
            id,
            rng.random_range(0.01..0.5),
            rng.random_range(50.0..500.0),
        ));
    }
    for _ in 0..extra {
        let a = rng.random_range(1..=n);
        let b = rng.random_range(1..=n);
        if a != b {
            lines.push((
                a.min(b),
                a.max(b),
                rng.random_range(0.01..0.5),
                rng.random_range(50.0..500.0),
            ));
        }
    }
    Network::new("random", buses, lines, 100.0, zones.min(n)).unwrap()
}
