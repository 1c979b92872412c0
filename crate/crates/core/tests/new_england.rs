use std::sync::OnceLock;

use p2p_market::distance::{shortest_path, thevenin_line_weights, zones_crossed};
use p2p_market::engine::Execution;
use p2p_market::experiment::{
    fee_grid, recommend_fee, run, sweep, verify, Case, FeeTarget, RunReport, SweepRecord,
    TRADE_THRESHOLD,
};
use p2p_market::report::{metrics_toml, trade_edges_csv, write_run};
use p2p_market::{distance_matrix, power_transfer_distance, Metric, PolicySpec, SolverConfig};

fn case() -> &'static Case {
    static CASE: OnceLock<Case> = OnceLock::new();
    CASE.get_or_init(Case::new_england)
}

fn free_run() -> &'static RunReport {
    static RUN: OnceLock<RunReport> = OnceLock::new();
    RUN.get_or_init(|| {
        run(
            case(),
            &PolicySpec::free(),
            &SolverConfig::default(),
            Execution::Serial,
        )
        .unwrap()
    })
}

fn free_price() -> f64 {
    free_run()
        .clearing
        .clearing_price(&case().community)
        .unwrap()
}

fn unique_sweep() -> &'static Vec<SweepRecord> {
    static SWEEP: OnceLock<Vec<SweepRecord>> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let fees = fee_grid(0.0, 30.0, 1.0).unwrap();
        sweep(
            case(),
            &PolicySpec::unique(0.0),
            &fees,
            &SolverConfig::default(),
        )
        .unwrap()
        .into_iter()
        .map(|p| p.record)
        .collect()
    })
}

#[test]
fn power_transfer_distance_sixteen_to_thirtynine() {
    let d = power_transfer_distance(&case().network, 16, 39).unwrap();
    assert!((d - 7.3).abs() <= 0.2, "d = {d}");
    assert_eq!(power_transfer_distance(&case().network, 5, 5).unwrap(), 0.0);
}

#[test]
fn thevenin_path_sixteen_to_thirtynine() {
    let net = &case().network;
    let w = thevenin_line_weights(net).unwrap();
    let path = shortest_path(net, &w, 16, 39).unwrap();
    assert_eq!(path.nodes, vec![16, 17, 18, 3, 2, 1, 39]);
    assert_eq!(zones_crossed(&path, net).unwrap(), 2);
    let back = shortest_path(net, &w, 39, 16).unwrap();
    assert!((back.total_weight - path.total_weight).abs() < 1e-12);
}

#[test]
fn co_located_agents_are_at_distance_zero() {
    let com = &case().community;
    let d = distance_matrix(com, &case().network, Metric::PowerTransfer).unwrap();
    let (a, b) = (com.position(21).unwrap(), com.position(31).unwrap());
    assert_eq!(d.get(a, b), 0.0);
    assert!(d
        .to_csv_string()
        .starts_with("# p2p-market distances v1 metric=power_transfer"));
}

#[test]
fn free_market_is_congested_on_sixteen_nineteen() {
    let r = free_run();
    assert!(r.clearing.converged);
    assert_eq!(case().line_label(r.rates.argmax), "16-19");
    assert!(r.rates.maximum > 1.0);
    assert_eq!(
        r.congestion.first().map(|&(l, _)| case().line_label(l)),
        Some("16-19".to_string())
    );
}

#[test]
fn free_market_trades_mostly_across_zones() {
    let text = trade_edges_csv(case(), &free_run().clearing.trades);
    let (mut inter, mut intra) = (0, 0);
    for line in text.lines().skip(2) {
        let f: Vec<&str> = line.split(',').collect();
        if f[6] == "true" {
            if f[5] == "true" {
                inter += 1;
            } else {
                intra += 1;
            }
        }
    }
    assert!(inter > intra, "inter {inter} intra {intra}");
}

#[test]
fn higher_fees_thin_the_market() {
    let com = &case().community;
    let solver = SolverConfig::default();
    let price = free_price();
    let free_count = free_run().clearing.trade_count(com, TRADE_THRESHOLD);
    let unique = run(
        case(),
        &PolicySpec::unique(0.5 * price),
        &solver,
        Execution::Serial,
    )
    .unwrap();
    let unique_count = unique.clearing.trade_count(com, TRADE_THRESHOLD);
    let distance = run(
        case(),
        &PolicySpec::distance(0.17 * price, Metric::PowerTransfer),
        &solver,
        Execution::Serial,
    )
    .unwrap();
    let distance_count = distance.clearing.trade_count(com, TRADE_THRESHOLD);
    assert!(unique_count < free_count, "{unique_count} vs {free_count}");
    assert!(
        distance_count < unique_count,
        "{distance_count} vs {unique_count}"
    );
}

#[test]
fn high_unique_fee_clears_congestion() {
    let r = run(
        case(),
        &PolicySpec::unique(30.0),
        &SolverConfig::default(),
        Execution::Serial,
    )
    .unwrap();
    assert!(r.congestion.is_empty());
}

#[test]
fn metrics_are_byte_identical_across_runs() {
    let solver = SolverConfig::default();
    let a = run(case(), &PolicySpec::zonal(5.0), &solver, Execution::Serial).unwrap();
    let b = run(
        case(),
        &PolicySpec::zonal(5.0),
        &solver,
        Execution::Parallel,
    )
    .unwrap();
    assert_eq!(metrics_toml(case(), &a), metrics_toml(case(), &b));
}

#[test]
fn sweep_points_equal_single_runs() {
    let solver = SolverConfig::default();
    for spec in [
        PolicySpec::distance(0.0, Metric::PowerTransfer),
        PolicySpec::zonal(0.0),
    ] {
        let points = sweep(case(), &spec, &[0.0, 2.0, 7.0], &solver).unwrap();
        for p in points {
            let single = run(
                case(),
                &spec.with_fee(p.record.fee),
                &solver,
                Execution::Serial,
            )
            .unwrap();
            assert_eq!(single.sweep_record(case()), p.record);
            assert_eq!(single.flows.rates, p.line_rates);
        }
    }
}

#[test]
fn recommended_fee_falls_as_target_rises() {
    let records = unique_sweep();
    let mut last = f64::INFINITY;
    for target in [0.5, 0.6, 0.8, 0.9, 1.0, 1.1, 1.17] {
        let r = recommend_fee(records, FeeTarget::MaxLineRate { value: target }).unwrap();
        assert!(r.fee <= last);
        assert!(
            (r.max_rate - target).abs() < 1e-9,
            "interpolated rate {} for {target}",
            r.max_rate
        );
        last = r.fee;
    }
    let at_zero = recommend_fee(
        records,
        FeeTarget::MaxLineRate {
            value: records[0].max_rate,
        },
    )
    .unwrap();
    assert_eq!(at_zero.fee, 0.0);
    assert!(recommend_fee(records, FeeTarget::MaxLineRate { value: 0.1 }).is_err());
}

#[test]
fn distance_policy_agrees_with_reference_solver() {
    let mut r = run(
        case(),
        &PolicySpec::distance(5.0, Metric::PowerTransfer),
        &SolverConfig::default(),
        Execution::Serial,
    )
    .unwrap();
    verify(case(), &mut r).unwrap();
    let v = r.verification.unwrap();
    assert_eq!(v.oracle, "qp_reference");
    assert!(v.objective_rel_delta.abs() < 1e-3, "{v:?}");
}

#[test]
fn run_writes_versioned_files() {
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), case(), free_run()).unwrap();
    for name in [
        "trades.csv",
        "agents.csv",
        "metrics.toml",
        "residuals.csv",
        "flows.csv",
        "congestion.csv",
        "trade_edges.csv",
    ] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(text.starts_with("# p2p-market "), "{name}");
        assert!(text.lines().next().unwrap().contains(" v1"), "{name}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.toml")).unwrap();
    assert!(metrics.contains("max_rate_line = \"16-19\""));
}
