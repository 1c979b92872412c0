//! Grid cost allocation policies expressed as product differentiation prices
//! and the fee accounting that follows from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::community::Community;
use crate::distance::{distance_matrix, DistanceMatrix, Metric, ZonePaths};
use crate::error::{Error, Result};
use crate::matrix::PairMatrix;
use crate::network::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Free,
    Unique,
    Distance,
    Zonal,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Free => "free",
            PolicyKind::Unique => "unique",
            PolicyKind::Distance => "distance",
            PolicyKind::Zonal => "zonal",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(PolicyKind::Free),
            "unique" => Ok(PolicyKind::Unique),
            "distance" => Ok(PolicyKind::Distance),
            "zonal" => Ok(PolicyKind::Zonal),
            other => Err(Error::invalid(
                "policy",
                format!("unknown policy {other:?}"),
            )),
        }
    }
}

/// A cost allocation policy and its network fee.
///
/// The fee is in EUR/MW for unique and zonal policies and in EUR/MW per
/// distance unit for the distance policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    #[serde(default)]
    pub fee: f64,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    /// Per-zone fees for the zonal policy, indexed by zone id - 1. When absent
    /// every zone charges `fee`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone_fees: Option<Vec<f64>>,
}

fn default_metric() -> Metric {
    Metric::PowerTransfer
}

impl PolicySpec {
    pub fn free() -> Self {
        Self::new(PolicyKind::Free, 0.0)
    }

    pub fn unique(fee: f64) -> Self {
        Self::new(PolicyKind::Unique, fee)
    }

    pub fn distance(fee: f64, metric: Metric) -> Self {
        PolicySpec {
            metric,
            ..Self::new(PolicyKind::Distance, fee)
        }
    }

    pub fn zonal(fee: f64) -> Self {
        Self::new(PolicyKind::Zonal, fee)
    }

    pub fn new(kind: PolicyKind, fee: f64) -> Self {
        PolicySpec {
            kind,
            fee,
            metric: Metric::PowerTransfer,
            zone_fees: None,
        }
    }

    pub fn with_fee(&self, fee: f64) -> Self {
        PolicySpec {
            fee,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fee >= 0.0 && self.fee.is_finite()) {
            return Err(Error::invalid(
                "policy",
                format!("fee must be nonnegative, got {}", self.fee),
            ));
        }
        if let Some(fees) = &self.zone_fees {
            if fees.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
                return Err(Error::invalid("policy", "zone fees must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// Exogenous product differentiation prices `gamma_nm` in EUR/MW.
/// Positive on producer rows, negative on consumer rows, zero off-partnership.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix {
    policy: PolicyKind,
    values: PairMatrix,
}

impl GammaMatrix {
    pub fn zeros(n: usize) -> Self {
        GammaMatrix {
            policy: PolicyKind::Free,
            values: PairMatrix::zeros(n),
        }
    }

    pub fn policy(&self) -> PolicyKind {
        self.policy
    }

    #[inline]
    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.values.get(n, m)
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.values.row(n)
    }

    pub fn values(&self) -> &PairMatrix {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }

    /// Builds the matrix for a policy, computing distances or zone paths as needed.
    pub fn for_policy(
        policy: &PolicySpec,
        community: &Community,
        network: &Network,
    ) -> Result<Self> {
        match policy.kind {
            PolicyKind::Distance => {
                let d = distance_matrix(community, network, policy.metric)?;
                build_gamma(policy, community, Some(&d), None)
            }
            PolicyKind::Zonal => {
                let z = ZonePaths::new(community, network)?;
                build_gamma(policy, community, None, Some(&z))
            }
            _ => build_gamma(policy, community, None, None),
        }
    }

    pub fn to_csv_string(&self, community: &Community) -> String {
        let mut out = format!(
            "# p2p-market gamma v1 policy={}\nn,m,gamma_nm\n",
            self.policy
        );
        for (n, m) in community.pairs() {
            out.push_str(&format!(
                "{},{},{:?}\n",
                community.agent(n).id,
                community.agent(m).id,
                self.get(n, m)
            ));
        }
        out
    }
}

/// Builds `gamma` for `policy`. The fee is split equally between both sides
/// of every trade; the sign makes it a cost for each side.
pub fn build_gamma(
    policy: &PolicySpec,
    community: &Community,
    distances: Option<&DistanceMatrix>,
    zones: Option<&ZonePaths>,
) -> Result<GammaMatrix> {
    policy.validate()?;
    let n = community.len();
    let mut values = PairMatrix::zeros(n);
    let magnitude = |i: usize, j: usize| -> Result<f64> {
        Ok(match policy.kind {
            PolicyKind::Free => 0.0,
            PolicyKind::Unique => policy.fee / 2.0,
            PolicyKind::Distance => {
                let d = distances.ok_or(Error::MissingDependency {
                    policy: "distance",
                    missing: "a distance matrix",
                })?;
                policy.fee * d.get(i, j) / 2.0
            }
            PolicyKind::Zonal => {
                let z = zones.ok_or(Error::MissingDependency {
                    policy: "zonal",
                    missing: "zone paths",
                })?;
                match &policy.zone_fees {
                    None => policy.fee * z.count(i, j) as f64 / 2.0,
                    Some(fees) => {
                        let mut total = 0.0;
                        for &zone in z.zones(i, j) {
                            total += fees.get(zone as usize - 1).copied().ok_or_else(|| {
                                Error::invalid("policy", format!("no fee given for zone {zone}"))
                            })?;
                        }
                        total / 2.0
                    }
                }
            }
        })
    };
    for (i, j) in community.pairs() {
        let g = magnitude(i, j)?;
        if g != 0.0 {
            let sign = if community.agent(i).is_producer() {
                1.0
            } else {
                -1.0
            };
            values.set(i, j, sign * g);
        }
    }
    Ok(GammaMatrix {
        policy: policy.kind,
        values,
    })
}

/// Price seen by the agent once the grid charge is taken out: `y - gamma`.
pub fn perceived_price(price: f64, gamma: f64) -> f64 {
    price - gamma
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Payment {
    /// `sum_m (y_nm - gamma_nm) P_nm`; positive when the agent is paid.
    pub total_money: f64,
    /// `sum_m gamma_nm P_nm`, the part going to the system operator.
    pub operator_share: f64,
}

/// Money flows of one agent given its row of trades, prices and gammas.
pub fn agent_payment(trades: &[f64], prices: &[f64], gamma: &[f64]) -> Payment {
    let mut total_money = 0.0;
    let mut operator_share = 0.0;
    for ((&p, &y), &g) in trades.iter().zip(prices).zip(gamma) {
        total_money += perceived_price(y, g) * p;
        operator_share += g * p;
    }
    Payment {
        total_money,
        operator_share,
    }
}

/// Total collected by the system operator, `sum_n sum_m gamma_nm P_nm`.
pub fn total_collected(trades: &PairMatrix, gamma: &GammaMatrix) -> f64 {
    let n = trades.dim();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += gamma.get(i, j) * trades.get(i, j);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::new_england;

    fn two_agents() -> Community {
        let text = "agent_id,bus,role,a,b,c,p_min,p_max\n1,1,producer,0.1,20,0,0,500\n2,2,consumer,0.1,80,0,-500,0\n";
        Community::from_csv_str(text, "t").unwrap()
    }

    #[test]
    fn unique_halves_fee_with_signs() {
        let com = two_agents();
        let g = build_gamma(&PolicySpec::unique(10.0), &com, None, None).unwrap();
        assert_eq!(g.get(0, 1), 5.0);
        assert_eq!(g.get(1, 0), -5.0);
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn free_is_zero() {
        let com = two_agents();
        let g = build_gamma(
            &PolicySpec {
                fee: 7.0,
                ..PolicySpec::free()
            },
            &com,
            None,
            None,
        )
        .unwrap();
        assert!(g.values().row_sums().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn missing_dependencies() {
        let com = two_agents();
        let err = build_gamma(
            &PolicySpec::distance(1.0, Metric::PowerTransfer),
            &com,
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::MissingDependency {
                policy: "distance",
                ..
            }
        ));
        let err = build_gamma(&PolicySpec::zonal(1.0), &com, None, None).unwrap_err();
        assert!(matches!(
            err,
            Error::MissingDependency {
                policy: "zonal",
                ..
            }
        ));
    }

    #[test]
    fn negative_fee_rejected() {
        assert!(PolicySpec::unique(-1.0).validate().is_err());
    }

    #[test]
    fn distance_pair_sixteen_thirtynine() {
        let (net, com) = new_england().unwrap();
        let d = distance_matrix(&com, &net, Metric::PowerTransfer).unwrap();
        let g = build_gamma(
            &PolicySpec::distance(2.0, Metric::PowerTransfer),
            &com,
            Some(&d),
            None,
        )
        .unwrap();
        let consumer = com.position(9).unwrap(); // bus 16
        let producer = com.position(31).unwrap(); // bus 39
        let dist = d.get(consumer, producer);
        assert!((g.get(consumer, producer) + dist).abs() < 1e-12);
        assert!((g.get(producer, consumer) - dist).abs() < 1e-12);
    }

    #[test]
    fn zonal_ratio_two_for_two_zone_path() {
        let (net, com) = new_england().unwrap();
        let z = ZonePaths::new(&com, &net).unwrap();
        let consumer = com.position(9).unwrap();
        let producer = com.position(31).unwrap();
        assert_eq!(z.count(consumer, producer), 2);
        let zonal = build_gamma(&PolicySpec::zonal(10.0), &com, None, Some(&z)).unwrap();
        let unique = build_gamma(&PolicySpec::unique(10.0), &com, None, None).unwrap();
        assert_eq!(zonal.get(consumer, producer).abs(), 10.0);
        assert_eq!(
            zonal.get(consumer, producer) / unique.get(consumer, producer),
            2.0
        );
    }

    #[test]
    fn per_zone_fees_sum_along_path() {
        let (net, com) = new_england().unwrap();
        let z = ZonePaths::new(&com, &net).unwrap();
        let consumer = com.position(9).unwrap();
        let producer = com.position(31).unwrap();
        let policy = PolicySpec {
            zone_fees: Some(vec![2.0, 4.0, 6.0, 8.0]),
            ..PolicySpec::zonal(0.0)
        };
        let g = build_gamma(&policy, &com, None, Some(&z)).unwrap();
        // Zones 1 and 3.
        assert_eq!(g.get(producer, consumer), 4.0);
    }

    #[test]
    fn perceived_prices() {
        assert!((perceived_price(58.1, -5.0) - 63.1).abs() < 1e-12);
        assert!((perceived_price(58.1, 5.0) - 53.1).abs() < 1e-12);
        assert_eq!(perceived_price(58.1, 0.0), 58.1);
    }

    #[test]
    fn payments() {
        let p = agent_payment(&[10.0], &[60.0], &[5.0]);
        assert_eq!((p.total_money, p.operator_share), (550.0, 50.0));
        let p = agent_payment(&[-10.0], &[60.0], &[-5.0]);
        assert_eq!((p.total_money, p.operator_share), (-650.0, 50.0));
        let p = agent_payment(&[0.0, 0.0], &[60.0, 61.0], &[-5.0, -5.0]);
        assert_eq!((p.total_money, p.operator_share), (0.0, 0.0));
    }

    #[test]
    fn unique_collection_is_fee_times_volume() {
        // One 100 MW trade at u = 10: each side pays 5 EUR/MW.
        let com = two_agents();
        let g = build_gamma(&PolicySpec::unique(10.0), &com, None, None).unwrap();
        let trades = PairMatrix::from_rows(vec![vec![0.0, 100.0], vec![-100.0, 0.0]]);
        assert!((total_collected(&trades, &g) - 1000.0).abs() < 1e-12);
        let free = GammaMatrix::zeros(2);
        assert_eq!(total_collected(&trades, &free), 0.0);
    }
}
