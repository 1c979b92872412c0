//! Delimited output files. Every file starts with a `# p2p-market <kind> v1`
//! line and holds no wall-clock content, so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::community::Community;
use crate::engine::Residuals;
use crate::error::{Error, Result};
use crate::experiment::{Case, RunReport, SweepPoint, SweepRecord, Verification, TRADE_THRESHOLD};
use crate::matrix::TradeMatrix;
use crate::policy::{agent_payment, perceived_price, PolicySpec};
use crate::powerflow::FlowResult;

fn header(kind: &str, policy: Option<&PolicySpec>) -> String {
    match policy {
        Some(p) => format!(
            "# p2p-market {kind} v1 policy={} fee={:?} metric={}\n",
            p.kind, p.fee, p.metric
        ),
        None => format!("# p2p-market {kind} v1\n"),
    }
}

pub fn trades_csv(case: &Case, report: &RunReport) -> String {
    let com = &case.community;
    let c = &report.clearing;
    let mut out = header("trades", Some(&report.policy));
    out.push_str("n,m,p_nm,y_nm,gamma_nm,perceived_price\n");
    for (n, m) in com.pairs() {
        let (y, g) = (c.prices.get(n, m), report.gamma.get(n, m));
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?}",
            com.agent(n).id,
            com.agent(m).id,
            c.trades.get(n, m),
            y,
            g,
            perceived_price(y, g)
        );
    }
    out
}

pub fn agents_csv(case: &Case, report: &RunReport) -> String {
    let c = &report.clearing;
    let mut out = header("agents", Some(&report.policy));
    out.push_str("agent_id,bus,role,net_power_mw,mu_hi,mu_lo,payment,operator_share\n");
    for (n, a) in case.community.agents().iter().enumerate() {
        let pay = agent_payment(c.trades.row(n), c.prices.row(n), report.gamma.row(n));
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{:?},{:?}",
            a.id,
            a.bus,
            a.role,
            c.net_powers[n],
            c.mu_hi[n],
            c.mu_lo[n],
            pay.total_money,
            pay.operator_share
        );
    }
    out
}

pub fn residuals_csv(history: &[Residuals]) -> String {
    let mut out = header("residuals", None);
    out.push_str("k,price,primal,stationarity\n");
    for (k, r) in history.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?}",
            k + 1,
            r.price,
            r.primal,
            r.stationarity
        );
    }
    out
}

pub fn flows_csv(case: &Case, flows: &FlowResult) -> String {
    let mut out = format!("# p2p-market flows v1 slack={}\n", flows.slack);
    out.push_str("line,from,to,flow_mw,capacity_mw,rate\n");
    for ((line, f), r) in case
        .network
        .lines()
        .iter()
        .zip(&flows.flows)
        .zip(&flows.rates)
    {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?}",
            line.id, line.from_bus, line.to_bus, f, line.capacity, r
        );
    }
    out
}

pub fn congestion_csv(case: &Case, congestion: &[(usize, f64)]) -> String {
    let mut out = header("congestion", None);
    out.push_str("line,from,to,rate\n");
    for &(l, r) in congestion {
        let line = &case.network.lines()[l];
        let _ = writeln!(out, "{},{},{},{:?}", line.id, line.from_bus, line.to_bus, r);
    }
    out
}

/// One row per bilateral trade, seller first.
pub fn trade_edges_csv(case: &Case, trades: &TradeMatrix) -> String {
    let com = &case.community;
    let mut out = format!("# p2p-market trade-edges v1 threshold_mw={TRADE_THRESHOLD:?}\n");
    out.push_str("seller,buyer,p_mw,seller_zone,buyer_zone,inter_zone,above_threshold\n");
    for (n, m) in com.pairs() {
        let p = trades.get(n, m);
        if !com.agent(n).is_producer() {
            continue;
        }
        let zn = case.network.zone_of(com.agent(n).bus).unwrap_or(0);
        let zm = case.network.zone_of(com.agent(m).bus).unwrap_or(0);
        let _ = writeln!(
            out,
            "{},{},{:?},{},{},{},{}",
            com.agent(n).id,
            com.agent(m).id,
            p,
            zn,
            zm,
            zn != zm,
            p.abs() > TRADE_THRESHOLD
        );
    }
    out
}

#[derive(Serialize)]
struct Metrics<'a> {
    run: RunSection<'a>,
    market: MarketSection,
    grid: GridSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    verify: Option<&'a Verification>,
}

#[derive(Serialize)]
struct RunSection<'a> {
    policy: &'a str,
    fee: f64,
    metric: String,
    converged: bool,
    iterations: usize,
}

#[derive(Serialize)]
struct MarketSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    clearing_price: Option<f64>,
    price_spread: f64,
    total_volume_mw: f64,
    trade_count: usize,
    trade_threshold_mw: f64,
    objective: f64,
    operator_revenue: f64,
    kkt_residual: f64,
    residual_price: f64,
    residual_primal: f64,
    residual_stationarity: f64,
}

#[derive(Serialize)]
struct GridSection {
    slack: u32,
    average_rate: f64,
    max_rate: f64,
    max_rate_line: String,
    congested_lines: Vec<String>,
    /// Counts every cross-zone trade once, per unordered zone pair.
    interzone_mw: f64,
    interzone_net_mw: f64,
    tie_line_flow_mw: f64,
}

pub fn metrics_toml(case: &Case, report: &RunReport) -> String {
    let com = &case.community;
    let c = &report.clearing;
    let last = c.final_residuals();
    let metrics = Metrics {
        run: RunSection {
            policy: report.policy.kind.name(),
            fee: report.policy.fee,
            metric: report.policy.metric.to_string(),
            converged: c.converged,
            iterations: c.iterations,
        },
        market: MarketSection {
            clearing_price: c.clearing_price(com),
            price_spread: c.price_spread(com),
            total_volume_mw: c.total_volume(com),
            trade_count: c.trade_count(com, TRADE_THRESHOLD),
            trade_threshold_mw: TRADE_THRESHOLD,
            objective: c.objective(com, &report.gamma),
            operator_revenue: report.operator_revenue,
            kkt_residual: c.kkt_residual,
            residual_price: last.price,
            residual_primal: last.primal,
            residual_stationarity: last.stationarity,
        },
        grid: GridSection {
            slack: report.flows.slack,
            average_rate: report.rates.average,
            max_rate: report.rates.maximum,
            max_rate_line: case.line_label(report.rates.argmax),
            congested_lines: report
                .congestion
                .iter()
                .map(|&(l, _)| case.line_label(l))
                .collect(),
            interzone_mw: report.interzone.total,
            interzone_net_mw: report.interzone.net_total,
            tie_line_flow_mw: report.tie_line_flow,
        },
        verify: report.verification.as_ref(),
    };
    let body = toml::to_string(&metrics).expect("metrics serialize");
    format!("{}{body}", header("metrics", None))
}

pub fn sweep_csv(policy: &PolicySpec, records: &[SweepRecord]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in records {
        writer.serialize(r).expect("in-memory write");
    }
    let body = String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8");
    let mut out = format!(
        "# p2p-market sweep v1 policy={} metric={}\n",
        policy.kind, policy.metric
    );
    out.push_str(&body);
    out
}

pub fn read_sweep_csv(text: &str, context: &str) -> Result<Vec<SweepRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    reader
        .deserialize()
        .map(|r| {
            r.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::parse(format!("{context}:{line}"), e)
            })
        })
        .collect()
}

/// Long table of line rates per fee.
pub fn line_rates_csv(case: &Case, points: &[SweepPoint]) -> String {
    let mut out = header("line-rates", None);
    out.push_str("fee,line,from,to,rate\n");
    for p in points {
        for (line, r) in case.network.lines().iter().zip(&p.line_rates) {
            let _ = writeln!(
                out,
                "{:?},{},{},{},{:?}",
                p.record.fee, line.id, line.from_bus, line.to_bus, r
            );
        }
    }
    out
}

/// Reads the `n,m,p_nm` columns of a trades file back into a matrix.
pub fn read_trades_csv(text: &str, context: &str, community: &Community) -> Result<TradeMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(context, e))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(context, format!("missing column {name}")))
    };
    let (cn, cm, cp) = (col("n")?, col("m")?, col("p_nm")?);
    let mut trades = TradeMatrix::zeros(community.len());
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(context, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let bad = |what: &str| Error::parse(format!("{context}:{line}"), format!("bad {what}"));
        let n: u32 = field(cn).parse().map_err(|_| bad("n"))?;
        let m: u32 = field(cm).parse().map_err(|_| bad("m"))?;
        let p: f64 = field(cp).parse().map_err(|_| bad("p_nm"))?;
        let (i, j) = (community.position(n)?, community.position(m)?);
        if !community.are_partners(i, j) {
            return Err(Error::parse(
                format!("{context}:{line}"),
                format!("agents {n} and {m} are not partners"),
            ));
        }
        trades.set(i, j, p);
    }
    Ok(trades)
}

fn write(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_run(dir: &Path, case: &Case, report: &RunReport) -> Result<()> {
    ensure_dir(dir)?;
    write(dir, "trades.csv", &trades_csv(case, report))?;
    write(dir, "agents.csv", &agents_csv(case, report))?;
    write(dir, "metrics.toml", &metrics_toml(case, report))?;
    write(
        dir,
        "residuals.csv",
        &residuals_csv(&report.clearing.history),
    )?;
    write(dir, "flows.csv", &flows_csv(case, &report.flows))?;
    write(
        dir,
        "congestion.csv",
        &congestion_csv(case, &report.congestion),
    )?;
    write(
        dir,
        "trade_edges.csv",
        &trade_edges_csv(case, &report.clearing.trades),
    )
}

pub fn write_sweep(
    dir: &Path,
    case: &Case,
    policy: &PolicySpec,
    points: &[SweepPoint],
) -> Result<()> {
    ensure_dir(dir)?;
    let records: Vec<SweepRecord> = points.iter().map(|p| p.record.clone()).collect();
    write(dir, "sweep.csv", &sweep_csv(policy, &records))?;
    write(dir, "line_rates.csv", &line_rates_csv(case, points))
}

pub fn write_flows(
    dir: &Path,
    case: &Case,
    flows: &FlowResult,
    congestion: &[(usize, f64)],
) -> Result<()> {
    ensure_dir(dir)?;
    write(dir, "flows.csv", &flows_csv(case, flows))?;
    write(dir, "congestion.csv", &congestion_csv(case, congestion))
}
