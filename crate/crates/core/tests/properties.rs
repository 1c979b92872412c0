mod common;

use common::{random_community, random_network};
use p2p_market::distance::{BusDistances, PtdfMatrix, ZonePaths};
use p2p_market::engine::{clear_market_with, gradient_steps, Execution};
use p2p_market::{
    bisection_clearing, build_gamma, dc_power_flow, distance_matrix, interzone_exchange, Bus,
    Metric, Network, PolicySpec, SolverConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn network_for(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=9);
    let extra = rng.random_range(0..=n as usize);
    random_network(&mut rng, n, extra, 3)
}

fn balanced_injections(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut inj: Vec<f64> = (0..n - 1)
        .map(|_| rng.random_range(-200.0..200.0))
        .collect();
    inj.push(-inj.iter().sum::<f64>());
    inj
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn susceptance_is_symmetric_with_zero_row_sums(seed in any::<u64>()) {
        let net = network_for(seed);
        let b = net.susceptance_matrix();
        for i in 0..b.nrows() {
            let row: f64 = (0..b.ncols()).map(|j| b[(i, j)]).sum();
            prop_assert!(row.abs() < 1e-9 * b[(i, i)].abs().max(1.0));
            for j in 0..b.ncols() {
                prop_assert_eq!(b[(i, j)], b[(j, i)]);
            }
        }
    }

    #[test]
    fn network_text_round_trips(seed in any::<u64>()) {
        let net = network_for(seed);
        let back = Network::from_toml_str(&net.to_toml_string(), "round trip").unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn transfer_distance_ignores_slack(seed in any::<u64>()) {
        let net = network_for(seed);
        let ids: Vec<u32> = net.buses().iter().map(|b| b.id).collect();
        let a = PtdfMatrix::new(&net, ids[0]).unwrap();
        let b = PtdfMatrix::new(&net, *ids.last().unwrap()).unwrap();
        for i in 0..ids.len() {
            for j in 0..ids.len() {
                prop_assert!((a.transfer_distance(i, j) - b.transfer_distance(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bus_distances_are_metrics(seed in any::<u64>(), thevenin in any::<bool>()) {
        let net = network_for(seed);
        let metric = if thevenin { Metric::Thevenin } else { Metric::PowerTransfer };
        let d = BusDistances::new(&net, metric).unwrap().values;
        let n = d.nrows();
        for i in 0..n {
            prop_assert_eq!(d[(i, i)], 0.0);
            for j in 0..n {
                prop_assert!(d[(i, j)] >= 0.0);
                prop_assert!((d[(i, j)] - d[(j, i)]).abs() < 1e-12);
                for k in 0..n {
                    prop_assert!(d[(i, k)] <= d[(i, j)] + d[(j, k)] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn dc_flow_is_linear_slack_free_and_balanced(seed in any::<u64>()) {
        let net = network_for(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let n = net.bus_count();
        let x = balanced_injections(&mut rng, n);
        let y = balanced_injections(&mut rng, n);
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let slack = net.default_slack();
        let fx = dc_power_flow(&net, &x, slack).unwrap();
        let fy = dc_power_flow(&net, &y, slack).unwrap();
        let fs = dc_power_flow(&net, &sum, slack).unwrap();
        let other = dc_power_flow(&net, &x, net.buses()[0].id).unwrap();
        for l in 0..net.lines().len() {
            prop_assert!((fs.flows[l] - fx.flows[l] - fy.flows[l]).abs() < 1e-6);
            prop_assert!((fx.flows[l] - other.flows[l]).abs() < 1e-6);
            prop_assert!(fx.rates[l] >= 0.0);
        }
        // Power leaving each bus over its lines equals its injection.
        let mut out = vec![0.0; n];
        for (line, f) in net.lines().iter().zip(&fx.flows) {
            let (i, j) = net.line_ends(line);
            out[i] += f;
            out[j] -= f;
        }
        for i in 0..n {
            prop_assert!((out[i] - x[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn gamma_scales_with_fee(u in 0.0f64..100.0, k in 0.0f64..5.0) {
        let case = p2p_market::experiment::Case::new_england();
        let com = &case.community;
        let d = distance_matrix(com, &case.network, Metric::PowerTransfer).unwrap();
        let z = ZonePaths::new(com, &case.network).unwrap();
        for spec in [PolicySpec::unique(u), PolicySpec::distance(u, Metric::PowerTransfer), PolicySpec::zonal(u)] {
            let g1 = build_gamma(&spec, com, Some(&d), Some(&z)).unwrap();
            let gk = build_gamma(&spec.with_fee(k * u), com, Some(&d), Some(&z)).unwrap();
            for (n, m) in com.pairs() {
                prop_assert!((gk.get(n, m) - k * g1.get(n, m)).abs() <= 1e-9 * (1.0 + gk.get(n, m).abs()));
            }
        }
    }

    #[test]
    fn zonal_equals_unique_inside_one_zone(u in 0.0f64..100.0) {
        let case = p2p_market::experiment::Case::new_england();
        let com = &case.community;
        let z = ZonePaths::new(com, &case.network).unwrap();
        let zonal = build_gamma(&PolicySpec::zonal(u), com, None, Some(&z)).unwrap();
        let unique = build_gamma(&PolicySpec::unique(u), com, None, None).unwrap();
        for (n, m) in com.pairs() {
            if z.count(n, m) == 1 {
                prop_assert_eq!(zonal.get(n, m), unique.get(n, m));
            } else {
                prop_assert!(zonal.get(n, m).abs() > unique.get(n, m).abs() || u == 0.0);
            }
        }
    }

    #[test]
    fn interzone_total_ignores_zone_labels(shift in 1u32..4) {
        let case = p2p_market::experiment::Case::new_england();
        let com = &case.community;
        let mut rng = ChaCha8Rng::seed_from_u64(shift as u64);
        let mut trades = p2p_market::TradeMatrix::zeros(com.len());
        for p in com.producers() {
            for &c in com.partners(p) {
                let v = rng.random_range(0.0..10.0);
                trades.set(p, c, v);
                trades.set(c, p, -v);
            }
        }
        let net = &case.network;
        let relabeled_buses: Vec<Bus> = net
            .buses()
            .iter()
            .map(|b| Bus { id: b.id, zone: (b.zone - 1 + shift) % net.zone_count() + 1 })
            .collect();
        let lines = net.lines().iter().map(|l| (l.from_bus, l.to_bus, l.reactance, l.capacity)).collect();
        let relabeled = Network::new("relabeled", relabeled_buses, lines, net.base_mva(), net.zone_count()).unwrap();
        let a = interzone_exchange(com, &trades, net).unwrap();
        let b = interzone_exchange(com, &trades, &relabeled).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-9 * a.total.max(1.0));
        prop_assert!((a.net_total - b.net_total).abs() < 1e-9 * a.total.max(1.0));
        for v in a.pairs.values() {
            prop_assert!(*v >= 0.0 && *v <= a.total);
        }
    }

    #[test]
    fn gradient_steps_sum_to_one(row in prop::collection::vec(-500.0f64..500.0, 1..12), k in 1usize..100_000) {
        let g = gradient_steps(&row, 10.0, 0.25, k);
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(g.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn bisection_balances(seed in any::<u64>(), u in 0.0f64..60.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let com = random_community(&mut rng);
        let r = bisection_clearing(&com, u).unwrap();
        prop_assert!(r.net_powers.iter().sum::<f64>().abs() <= 1e-6);
        for (a, p) in com.agents().iter().zip(&r.net_powers) {
            prop_assert!(*p >= a.p_min && *p <= a.p_max);
        }
    }
}

#[cfg(feature = "parallel")]
mod parallel {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn parallel_matches_serial_bit_for_bit(seed in any::<u64>(), u in 0.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let com = random_community(&mut rng);
            let gamma = build_gamma(&PolicySpec::unique(u), &com, None, None).unwrap();
            let config = SolverConfig { max_iterations: 3000, ..SolverConfig::default() };
            let serial = clear_market_with(&com, &gamma, &config, Execution::Serial).unwrap();
            let parallel = clear_market_with(&com, &gamma, &config, Execution::Parallel).unwrap();
            prop_assert_eq!(serial, parallel);
        }
    }
}
