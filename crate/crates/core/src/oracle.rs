//! Reference solvers for the market problem, independent of the
//! consensus + innovations engine: a clearing-price bisection for uniform
//! wedges and a projected-gradient solver over producer-to-consumer trades
//! for arbitrary `gamma`.

use crate::community::Community;
use crate::error::{Error, Result};
use crate::matrix::{PairMatrix, TradeMatrix};
use crate::policy::GammaMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub clearing_price: Option<f64>,
    pub net_powers: Vec<f64>,
    /// Pairwise trades; only the general oracle produces them.
    pub trades: Option<TradeMatrix>,
    /// `sum_n f_n(P_n)`.
    pub social_welfare: f64,
    pub iterations: usize,
    /// Final first-order stationarity measure (EUR/MW), 0 for bisection.
    pub stationarity: f64,
}

/// Sum of agent costs at the given net powers. Consumers carry negative
/// powers, so this is the negated welfare being minimized.
pub fn social_welfare(community: &Community, net_powers: &[f64]) -> f64 {
    community
        .agents()
        .iter()
        .zip(net_powers)
        .map(|(a, &p)| a.cost(p))
        .sum()
}

/// Market objective: agent costs plus grid charges, `sum f_n(P_n) + sum gamma_nm P_nm`.
pub fn market_objective(community: &Community, trades: &TradeMatrix, gamma: &GammaMatrix) -> f64 {
    let mut total = 0.0;
    for n in 0..community.len() {
        let mut p_n = 0.0;
        for &m in community.partners(n) {
            let p = trades.get(n, m);
            p_n += p;
            total += gamma.get(n, m) * p;
        }
        total += community.agent(n).cost(p_n);
    }
    total
}

fn is_full_bipartite(community: &Community) -> bool {
    (0..community.len()).all(|n| {
        let role = community.agent(n).role;
        let opposite = community.agents().iter().filter(|a| a.role != role).count();
        community.partners(n).len() == opposite
    })
}

/// Net power of every agent when producers see `lambda - wedge/2` and
/// consumers `lambda + wedge/2`.
fn responses(community: &Community, lambda: f64, wedge: f64) -> Vec<f64> {
    community
        .agents()
        .iter()
        .map(|a| {
            let seen = if a.is_producer() {
                lambda - wedge / 2.0
            } else {
                lambda + wedge / 2.0
            };
            a.power_at(seen).clamp(a.p_min, a.p_max)
        })
        .collect()
}

/// Clearing price under a uniform per-MW wedge `u` split between both sides,
/// found by bisection on the (monotone) aggregate net power.
pub fn bisection_clearing(community: &Community, wedge: f64) -> Result<OracleResult> {
    if !(wedge >= 0.0 && wedge.is_finite()) {
        return Err(Error::invalid(
            "wedge",
            format!("must be nonnegative, got {wedge}"),
        ));
    }
    if !is_full_bipartite(community) {
        return Err(Error::invalid(
            "community",
            "bisection clearing needs full producer-consumer partnerships",
        ));
    }
    let imbalance = |lambda: f64| -> f64 { responses(community, lambda, wedge).iter().sum() };

    let agents = community.agents();
    let mut lo = agents
        .iter()
        .map(|a| a.marginal_cost(a.p_min))
        .fold(f64::INFINITY, f64::min)
        - wedge
        - 1.0;
    let mut hi = agents
        .iter()
        .map(|a| a.marginal_cost(a.p_max))
        .fold(f64::NEG_INFINITY, f64::max)
        + wedge
        + 1.0;
    let (r_lo, r_hi) = (imbalance(lo), imbalance(hi));
    if r_lo > 0.0 || r_hi < 0.0 {
        return Err(Error::Infeasible(format!(
            "aggregate net power spans [{r_lo:.3}, {r_hi:.3}] MW and cannot balance"
        )));
    }

    let mut iterations = 0;
    let mut lambda = 0.5 * (lo + hi);
    while iterations < 200 {
        iterations += 1;
        lambda = 0.5 * (lo + hi);
        let r = imbalance(lambda);
        if r.abs() <= 1e-9 || hi - lo <= 1e-13 * lambda.abs().max(1.0) {
            break;
        }
        if r > 0.0 {
            hi = lambda;
        } else {
            lo = lambda;
        }
    }
    let net_powers = responses(community, lambda, wedge);
    let residual: f64 = net_powers.iter().sum();
    if residual.abs() > 1e-6 {
        return Err(Error::NotConverged {
            what: "bisection clearing",
            residual,
            iterations,
        });
    }
    Ok(OracleResult {
        clearing_price: Some(lambda),
        social_welfare: social_welfare(community, &net_powers),
        net_powers,
        trades: None,
        iterations,
        stationarity: 0.0,
    })
}

/// Euclidean projection onto `{x >= 0, lo <= sum(x) <= hi}`.
pub(crate) fn project_capped_simplex(v: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum >= lo && sum <= hi {
        return clipped;
    }
    let target = if sum > hi { hi } else { lo };
    if target <= 0.0 {
        return vec![0.0; v.len()];
    }
    // Find theta with sum(max(v - theta, 0)) = target.
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut prefix = 0.0;
    let mut theta = sorted[0] - target;
    for (k, &value) in sorted.iter().enumerate() {
        prefix += value;
        let candidate = (prefix - target) / (k + 1) as f64;
        if value > candidate {
            theta = candidate;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Producer-to-consumer trade variables of the reduced problem.
struct Reduced<'a> {
    community: &'a Community,
    /// (producer, consumer) positions per variable.
    vars: Vec<(usize, usize)>,
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
    producers: Vec<usize>,
    consumers: Vec<usize>,
    fee: Vec<f64>,
}

const DYKSTRA_TOL: f64 = 1e-8;

impl<'a> Reduced<'a> {
    fn new(community: &'a Community, gamma: &GammaMatrix) -> Self {
        let producers: Vec<usize> = community.producers().collect();
        let consumers: Vec<usize> = community.consumers().collect();
        let mut vars = Vec::new();
        let mut rows = vec![Vec::new(); producers.len()];
        let mut cols = vec![Vec::new(); consumers.len()];
        let mut fee = Vec::new();
        for (pi, &p) in producers.iter().enumerate() {
            for &c in community.partners(p) {
                let ci = consumers
                    .binary_search(&c)
                    .expect("partners have opposite roles");
                rows[pi].push(vars.len());
                cols[ci].push(vars.len());
                fee.push(gamma.get(p, c) - gamma.get(c, p));
                vars.push((p, c));
            }
        }
        Reduced {
            community,
            vars,
            rows,
            cols,
            producers,
            consumers,
            fee,
        }
    }

    fn row_bounds(&self, pi: usize) -> (f64, f64) {
        let a = self.community.agent(self.producers[pi]);
        (a.p_min, a.p_max)
    }

    fn col_bounds(&self, ci: usize) -> (f64, f64) {
        let a = self.community.agent(self.consumers[ci]);
        (-a.p_max, -a.p_min)
    }

    fn sums(&self, t: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let rows = self
            .rows
            .iter()
            .map(|r| r.iter().map(|&k| t[k]).sum())
            .collect();
        let cols = self
            .cols
            .iter()
            .map(|c| c.iter().map(|&k| t[k]).sum())
            .collect();
        (rows, cols)
    }

    fn objective(&self, t: &[f64]) -> f64 {
        let (rows, cols) = self.sums(t);
        let mut total: f64 = self.fee.iter().zip(t).map(|(f, x)| f * x).sum();
        for (pi, s) in rows.iter().enumerate() {
            total += self.community.agent(self.producers[pi]).cost(*s);
        }
        for (ci, s) in cols.iter().enumerate() {
            total += self.community.agent(self.consumers[ci]).cost(-*s);
        }
        total
    }

    fn gradient(&self, t: &[f64]) -> Vec<f64> {
        let (rows, cols) = self.sums(t);
        let row_marginal: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(pi, s)| self.community.agent(self.producers[pi]).marginal_cost(*s))
            .collect();
        let col_marginal: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(ci, s)| self.community.agent(self.consumers[ci]).marginal_cost(-*s))
            .collect();
        let mut g = self.fee.clone();
        for (pi, vars) in self.rows.iter().enumerate() {
            for &k in vars {
                g[k] += row_marginal[pi];
            }
        }
        for (ci, vars) in self.cols.iter().enumerate() {
            for &k in vars {
                g[k] -= col_marginal[ci];
            }
        }
        g
    }

    fn project_groups(
        &self,
        v: &[f64],
        groups: &[Vec<usize>],
        bounds: impl Fn(usize) -> (f64, f64),
    ) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (gi, vars) in groups.iter().enumerate() {
            let (lo, hi) = bounds(gi);
            let local: Vec<f64> = vars.iter().map(|&k| v[k]).collect();
            for (&k, x) in vars.iter().zip(project_capped_simplex(&local, lo, hi)) {
                out[k] = x;
            }
        }
        out
    }

    fn violation(&self, t: &[f64]) -> f64 {
        let (rows, cols) = self.sums(t);
        let mut worst: f64 = t.iter().map(|x| (-x).max(0.0)).fold(0.0, f64::max);
        for (pi, s) in rows.iter().enumerate() {
            let (lo, hi) = self.row_bounds(pi);
            worst = worst.max(lo - s).max(s - hi);
        }
        for (ci, s) in cols.iter().enumerate() {
            let (lo, hi) = self.col_bounds(ci);
            worst = worst.max(lo - s).max(s - hi);
        }
        worst
    }

    /// Dykstra alternation between the row and column constraint sets.
    fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = v.len();
        let mut x = v.to_vec();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for _ in 0..100_000 {
            // x can sit still for several sweeps while the corrections move.
            let mut change: f64 = 0.0;
            let shifted: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + b).collect();
            let y = self.project_groups(&shifted, &self.rows, |i| self.row_bounds(i));
            for k in 0..n {
                let next_p = shifted[k] - y[k];
                change = change.max((next_p - p[k]).abs());
                p[k] = next_p;
            }
            let shifted: Vec<f64> = y.iter().zip(&q).map(|(a, b)| a + b).collect();
            let next = self.project_groups(&shifted, &self.cols, |i| self.col_bounds(i));
            for k in 0..n {
                let next_q = shifted[k] - next[k];
                change = change
                    .max((next_q - q[k]).abs())
                    .max((next[k] - x[k]).abs());
                q[k] = next_q;
            }
            x = next;
            if change <= DYKSTRA_TOL && self.violation(&x) <= DYKSTRA_TOL {
                return Ok(x);
            }
        }
        Err(Error::NotConverged {
            what: "feasible-set projection",
            residual: self.violation(&x),
            iterations: 100_000,
        })
    }
}

/// Solves the market problem for arbitrary `gamma` by projected gradient over
/// nonnegative producer-to-consumer trades. Stops once the gradient mapping
/// is below 1e-4 EUR/MW.
pub fn qp_reference(community: &Community, gamma: &GammaMatrix) -> Result<OracleResult> {
    qp_reference_with(community, gamma, 1e-4, 200_000)
}

pub fn qp_reference_with(
    community: &Community,
    gamma: &GammaMatrix,
    tolerance: f64,
    max_iterations: usize,
) -> Result<OracleResult> {
    let reduced = Reduced::new(community, gamma);
    let supply: (f64, f64) = reduced
        .producers
        .iter()
        .map(|&p| (community.agent(p).p_min, community.agent(p).p_max))
        .fold((0.0, 0.0), |acc, b| (acc.0 + b.0, acc.1 + b.1));
    let demand: (f64, f64) = (0..reduced.consumers.len())
        .map(|ci| reduced.col_bounds(ci))
        .fold((0.0, 0.0), |acc, b| (acc.0 + b.0, acc.1 + b.1));
    if supply.0 > demand.1 + DYKSTRA_TOL || demand.0 > supply.1 + DYKSTRA_TOL {
        return Err(Error::Infeasible(format!(
            "supply range [{:.3}, {:.3}] MW does not meet demand range [{:.3}, {:.3}] MW",
            supply.0, supply.1, demand.0, demand.1
        )));
    }

    let max_row = reduced
        .rows
        .iter()
        .enumerate()
        .map(|(pi, r)| community.agent(reduced.producers[pi]).a * r.len() as f64)
        .fold(0.0, f64::max);
    let max_col = reduced
        .cols
        .iter()
        .enumerate()
        .map(|(ci, c)| community.agent(reduced.consumers[ci]).a * c.len() as f64)
        .fold(0.0, f64::max);
    let step = 1.0 / (max_row + max_col);

    let mut t = reduced.project(&vec![0.0; reduced.vars.len()])?;
    let mut objective = reduced.objective(&t);
    let mut measure = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let g = reduced.gradient(&t);
        let trial: Vec<f64> = t.iter().zip(&g).map(|(x, d)| x - step * d).collect();
        let next = reduced.project(&trial)?;
        measure = next
            .iter()
            .zip(&t)
            .map(|(a, b)| ((a - b) / step).abs())
            .fold(0.0, f64::max);
        let next_objective = reduced.objective(&next);
        debug_assert!(next_objective <= objective + 1e-7 * objective.abs().max(1.0));
        t = next;
        objective = next_objective;
        if measure <= tolerance {
            break;
        }
    }
    if measure > tolerance {
        return Err(Error::NotConverged {
            what: "projected gradient",
            residual: measure,
            iterations,
        });
    }

    let n = community.len();
    let mut trades = PairMatrix::zeros(n);
    for (&(p, c), &x) in reduced.vars.iter().zip(&t) {
        trades.set(p, c, x);
        trades.set(c, p, -x);
    }
    let net_powers = trades.row_sums();
    let gamma_free = (0..n).all(|i| gamma.row(i).iter().all(|g| *g == 0.0));
    let clearing_price = if gamma_free {
        let interior: Vec<f64> = reduced
            .producers
            .iter()
            .filter(|&&p| {
                let a = community.agent(p);
                net_powers[p] > a.p_min + 1e-6 && net_powers[p] < a.p_max - 1e-6
            })
            .map(|&p| community.agent(p).marginal_cost(net_powers[p]))
            .collect();
        (!interior.is_empty()).then(|| interior.iter().sum::<f64>() / interior.len() as f64)
    } else {
        None
    };
    Ok(OracleResult {
        clearing_price,
        social_welfare: social_welfare(community, &net_powers),
        net_powers,
        trades: Some(trades),
        iterations,
        stationarity: measure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{build_gamma, PolicySpec};

    pub(crate) fn two_agents() -> Community {
        let text = "agent_id,bus,role,a,b,c,p_min,p_max\n1,1,producer,0.1,20,0,0,500\n2,2,consumer,0.1,80,0,-500,0\n";
        Community::from_csv_str(text, "t").unwrap()
    }

    #[test]
    fn capped_simplex_projection() {
        assert_eq!(
            project_capped_simplex(&[1.0, 2.0], 0.0, 10.0),
            vec![1.0, 2.0]
        );
        let x = project_capped_simplex(&[3.0, 1.0], 0.0, 2.0);
        assert!((x[0] - 2.0).abs() < 1e-12 && x[1].abs() < 1e-12);
        let x = project_capped_simplex(&[-1.0, 0.0], 4.0, 10.0);
        assert!((x[0] - 1.5).abs() < 1e-12 && (x[1] - 2.5).abs() < 1e-12);
        assert_eq!(
            project_capped_simplex(&[5.0, 1.0], 0.0, 0.0),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn two_agent_bisection() {
        // Producer 20 + 0.1 P = consumer 80 - 0.1 P  =>  P = 300, price 50.
        let r = bisection_clearing(&two_agents(), 0.0).unwrap();
        assert!((r.clearing_price.unwrap() - 50.0).abs() < 1e-9);
        assert!((r.net_powers[0] - 300.0).abs() < 1e-6);
        // Wedge 10: y - 5 = 20 + 0.1 P and y + 5 = 80 - 0.1 P  =>  P = 250, y = 50.
        let r = bisection_clearing(&two_agents(), 10.0).unwrap();
        assert!((r.clearing_price.unwrap() - 50.0).abs() < 1e-9);
        assert!((r.net_powers[0] - 250.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_bracket() {
        let text = "agent_id,bus,role,a,b,c,p_min,p_max\n1,1,producer,0.1,20,0,0,100\n2,2,consumer,0.1,80,0,-500,-200\n";
        let com = Community::from_csv_str(text, "t").unwrap();
        assert!(matches!(
            bisection_clearing(&com, 0.0),
            Err(Error::Infeasible(_))
        ));
        let gamma = GammaMatrix::zeros(2);
        assert!(matches!(
            qp_reference(&com, &gamma),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn two_agent_qp_matches_analytic() {
        let com = two_agents();
        let r = qp_reference(&com, &GammaMatrix::zeros(2)).unwrap();
        assert!((r.net_powers[0] - 300.0).abs() < 1e-3);
        assert!((r.clearing_price.unwrap() - 50.0).abs() < 1e-3);
        let g = build_gamma(&PolicySpec::unique(10.0), &com, None, None).unwrap();
        let r = qp_reference(&com, &g).unwrap();
        assert!((r.net_powers[0] - 250.0).abs() < 1e-3);
    }

    #[test]
    fn identical_consumers_split_equally() {
        let text = "agent_id,bus,role,a,b,c,p_min,p_max\n1,1,producer,0.1,20,0,0,500\n2,2,consumer,0.1,80,0,-500,0\n3,3,consumer,0.1,80,0,-500,0\n";
        let com = Community::from_csv_str(text, "t").unwrap();
        let r = qp_reference(&com, &GammaMatrix::zeros(3)).unwrap();
        assert!((r.net_powers[1] - r.net_powers[2]).abs() < 1e-3);
    }

    #[test]
    fn qp_matches_bisection_at_forced_minimum_demand() {
        // Consumers value energy below producer cost, so only the minimum
        // demand clears. Projections here used to stall early.
        let text = "agent_id,bus,role,a,b,c,p_min,p_max
1,1,producer,0.07652838693374926,75.79620150477227,0,0,365.6898722626447
2,1,consumer,0.08175740752089733,67.99919230681097,0,-391.05328972670986,-47.85400864980297
3,1,producer,0.08926020658091437,55.91885499097016,0,0,220.1440179856804
4,1,consumer,0.07062158834055574,39.297635976713515,0,-302.1206198397272,-38.59633584233065
5,1,consumer,0.08698761148459042,20.04662016263753,0,-142.4591461338838,-2.567542663577027
";
        let com = Community::from_csv_str(text, "t").unwrap();
        let qp = qp_reference(&com, &GammaMatrix::zeros(5)).unwrap();
        let exact = bisection_clearing(&com, 0.0).unwrap();
        assert!(
            (qp.social_welfare - exact.social_welfare).abs() < 1e-3 * exact.social_welfare.abs()
        );
        for (a, b) in qp.net_powers.iter().zip(&exact.net_powers) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn welfare_at_zero_is_constant_terms() {
        let text = "agent_id,bus,role,a,b,c,p_min,p_max\n1,1,producer,0.1,20,3,0,500\n2,2,consumer,0.1,80,4,-500,0\n";
        let com = Community::from_csv_str(text, "t").unwrap();
        assert_eq!(social_welfare(&com, &[0.0, 0.0]), 7.0);
    }

    #[test]
    fn optimum_beats_perturbations() {
        let com = two_agents();
        let best = social_welfare(&com, &[300.0, -300.0]);
        for d in [-10.0, 10.0] {
            assert!(social_welfare(&com, &[300.0 + d, -300.0 - d]) > best);
        }
    }
}
