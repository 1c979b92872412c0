use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use p2p_market::distance::{shortest_path, thevenin_line_weights, zones_crossed};
use p2p_market::engine::Execution;
use p2p_market::experiment::{
    fee_grid, free_market_price, recommend_fee, run, sweep, verify, Case, FeeTarget, Scenario,
};
use p2p_market::powerflow::{congestion_report, line_rates, DcModel};
use p2p_market::report::{read_sweep_csv, read_trades_csv, write_flows, write_run, write_sweep};
use p2p_market::{
    distance_matrix, power_transfer_distance, Error, Metric, PolicyKind, SolverConfig,
};

const OUT_DIR_ENV: &str = "P2PM_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "p2pm",
    version,
    about = "Peer-to-peer market clearing with grid cost allocation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clear the market once and write trades, prices, metrics and flows.
    Run(RunArgs),
    /// Clear the market over a grid of network fees.
    Sweep(SweepArgs),
    /// Electrical distance between two buses.
    Distances(DistanceArgs),
    /// DC power flow of a trades file.
    Powerflow(PowerflowArgs),
    /// Read a fee off a sweep table.
    RecommendFee(RecommendArgs),
}

#[derive(Args)]
struct CaseArgs {
    /// Scenario file; the bundled case and free policy are used without one.
    scenario: Option<PathBuf>,
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    agents: Option<PathBuf>,
    #[arg(long)]
    slack: Option<u32>,
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Distance metric for the distance policy.
    #[arg(long)]
    metric: Option<Metric>,
    /// Output directory [default: scenario, then $P2PM_OUT_DIR, then ./p2pm-out]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    alpha_decay: Option<f64>,
    #[arg(long)]
    beta0: Option<f64>,
    #[arg(long)]
    beta_decay: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    eps_price: Option<f64>,
    #[arg(long)]
    eps_primal: Option<f64>,
}

impl SolverArgs {
    fn apply(&self, config: &mut SolverConfig) {
        if self.alpha0.is_some() {
            config.alpha0 = self.alpha0;
        }
        let fields = [
            (&mut config.alpha_decay, self.alpha_decay),
            (&mut config.beta0, self.beta0),
            (&mut config.beta_decay, self.beta_decay),
            (&mut config.rho, self.rho),
            (&mut config.tau, self.tau),
            (&mut config.delta, self.delta),
            (&mut config.eps_price, self.eps_price),
            (&mut config.eps_primal, self.eps_primal),
        ];
        for (slot, value) in fields {
            if let Some(v) = value {
                *slot = v;
            }
        }
        if let Some(k) = self.max_iterations {
            config.max_iterations = k;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// Network fee in EUR/MW (EUR/MW per distance unit for the distance policy).
    #[arg(long, conflicts_with = "fee_pct")]
    fee: Option<f64>,
    /// Network fee as a percentage of the free-market price.
    #[arg(long)]
    fee_pct: Option<f64>,
    /// Also solve with a reference solver and report the differences.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long, default_value_t = 0.0)]
    fee_min: f64,
    #[arg(long, default_value_t = 60.0)]
    fee_max: f64,
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    /// Read the fee bounds and step as percentages of the free-market price.
    #[arg(long)]
    fee_pct: bool,
}

#[derive(Args)]
struct DistanceArgs {
    from: u32,
    to: u32,
    #[arg(default_value = "power_transfer")]
    metric: Metric,
    #[arg(long)]
    network: Option<PathBuf>,
    /// Also write the agent-pair distance matrix to this file.
    #[arg(long)]
    export_matrix: Option<PathBuf>,
    /// Agents file for --export-matrix [default: bundled agents]
    #[arg(long)]
    agents: Option<PathBuf>,
}

#[derive(Args)]
struct PowerflowArgs {
    /// Trades file with n, m and p_nm columns, as written by `run`.
    #[arg(long)]
    trades: PathBuf,
    #[command(flatten)]
    case: CaseArgs,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "target")]
struct Target {
    /// Smallest fee keeping the maximum line rate at or below this value.
    #[arg(long)]
    max_line_rate: Option<f64>,
    /// Fee with the highest operator revenue.
    #[arg(long)]
    revenue: bool,
}

#[derive(Args)]
struct RecommendArgs {
    /// Sweep table written by `sweep`.
    #[arg(long)]
    sweep: PathBuf,
    #[command(flatten)]
    target: Target,
}

fn load_scenario(args: &CaseArgs) -> anyhow::Result<Scenario> {
    let mut scenario = match &args.scenario {
        Some(path) => Scenario::load(path)?,
        None => Scenario::default(),
    };
    if let Some(p) = &args.network {
        scenario.network.path = Some(p.clone());
    }
    if let Some(p) = &args.agents {
        scenario.agents.path = Some(p.clone());
    }
    if let Some(s) = args.slack {
        scenario.network.slack = Some(s);
    }
    if let Some(kind) = args.policy {
        scenario.policy.kind = kind;
    }
    if let Some(m) = args.metric {
        scenario.policy.metric = m;
    }
    args.solver.apply(&mut scenario.solver);
    scenario.solver.validate()?;
    Ok(scenario)
}

fn output_dir(args: &CaseArgs, scenario: &Scenario) -> PathBuf {
    args.out
        .clone()
        .or_else(|| scenario.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("p2pm-out"))
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut scenario = load_scenario(&args.case)?;
    let case = scenario.load_case()?;
    if let Some(pct) = args.fee_pct {
        let price = free_market_price(&case, &scenario.solver)?;
        scenario.policy.fee = pct / 100.0 * price;
    } else if let Some(fee) = args.fee {
        scenario.policy.fee = fee;
    }
    scenario.policy.validate()?;
    let mut report = run(&case, &scenario.policy, &scenario.solver, execution())?;
    if args.verify || scenario.output.verify {
        verify(&case, &mut report)?;
    }
    let dir = output_dir(&args.case, &scenario);
    write_run(&dir, &case, &report)?;

    let com = &case.community;
    let c = &report.clearing;
    println!(
        "policy        {} fee={}",
        scenario.policy.kind, scenario.policy.fee
    );
    println!(
        "converged     {} after {} iterations",
        c.converged, c.iterations
    );
    match c.clearing_price(com) {
        Some(p) => println!("price         {p:.4} EUR/MW"),
        None => println!("price         none (no trades)"),
    }
    println!("volume        {:.2} MW", c.total_volume(com));
    println!("revenue       {:.2} EUR", report.operator_revenue);
    println!("interzone     {:.2} MW", report.interzone.total);
    println!(
        "max rate      {:.4} on line {}",
        report.rates.maximum,
        case.line_label(report.rates.argmax)
    );
    if let Some(v) = &report.verification {
        println!(
            "verify        {}: max |dP| = {:.4} MW, objective rel. delta = {:.2e}",
            v.oracle, v.max_net_power_delta_mw, v.objective_rel_delta
        );
    }
    println!("wrote         {}", dir.display());
    if !c.converged {
        eprintln!(
            "warning: market did not converge within {} iterations",
            scenario.solver.max_iterations
        );
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let scenario = load_scenario(&args.case)?;
    let case = scenario.load_case()?;
    let scale = if args.fee_pct {
        free_market_price(&case, &scenario.solver)? / 100.0
    } else {
        1.0
    };
    let fees = fee_grid(
        args.fee_min * scale,
        args.fee_max * scale,
        args.step * scale,
    )?;
    let points = sweep(&case, &scenario.policy, &fees, &scenario.solver)?;
    let dir = output_dir(&args.case, &scenario);
    write_sweep(&dir, &case, &scenario.policy, &points)?;
    let failed = points.iter().filter(|p| !p.record.converged).count();
    println!(
        "{} points, {} not converged, wrote {}",
        points.len(),
        failed,
        dir.join("sweep.csv").display()
    );
    if failed > 0 {
        eprintln!("warning: {failed} sweep points did not converge");
    }
    Ok(())
}

fn cmd_distances(args: DistanceArgs) -> anyhow::Result<()> {
    let network = match &args.network {
        Some(p) => p2p_market::load_network(p)?,
        None => p2p_market::case::new_england_network(),
    };
    match args.metric {
        Metric::PowerTransfer => {
            let d = power_transfer_distance(&network, args.from, args.to)?;
            println!("{d:.6}");
        }
        Metric::Thevenin => {
            let weights = thevenin_line_weights(&network)?;
            let path = shortest_path(&network, &weights, args.from, args.to)?;
            let nodes: Vec<String> = path.nodes.iter().map(u32::to_string).collect();
            println!("{:.6}", path.total_weight);
            println!("path {}", nodes.join(","));
            println!("zones {}", zones_crossed(&path, &network)?);
        }
    }
    if let Some(out) = &args.export_matrix {
        let community = match &args.agents {
            Some(p) => p2p_market::load_agents(p, &network)?,
            None => {
                let c = p2p_market::case::new_england_community();
                c.check_against(&network)?;
                c
            }
        };
        let matrix = distance_matrix(&community, &network, args.metric)?;
        std::fs::write(out, matrix.to_csv_string()).map_err(|e| io_error(out, e))?;
    }
    Ok(())
}

fn cmd_powerflow(args: PowerflowArgs) -> anyhow::Result<()> {
    let scenario = load_scenario(&args.case)?;
    let case: Case = scenario.load_case()?;
    let text = std::fs::read_to_string(&args.trades).map_err(|e| io_error(&args.trades, e))?;
    let trades = read_trades_csv(&text, &args.trades.display().to_string(), &case.community)?;
    let injections = case
        .community
        .net_injections(&case.network, &trades.row_sums())?;
    let flows = DcModel::new(&case.network, case.slack)?.solve(&injections)?;
    let congestion = congestion_report(&flows);
    let summary = line_rates(&flows);
    println!("line,from,to,flow_mw,rate");
    for ((line, f), r) in case
        .network
        .lines()
        .iter()
        .zip(&flows.flows)
        .zip(&flows.rates)
    {
        println!(
            "{},{},{},{:.3},{:.4}",
            line.id, line.from_bus, line.to_bus, f, r
        );
    }
    println!(
        "# average rate {:.4}, max rate {:.4} on line {}",
        summary.average,
        summary.maximum,
        case.line_label(summary.argmax)
    );
    if congestion.is_empty() {
        println!("# no congested lines");
    }
    for (l, r) in &congestion {
        println!("# congested {} rate {:.4}", case.line_label(*l), r);
    }
    if args.case.out.is_some() || scenario.output.dir.is_some() {
        write_flows(
            &output_dir(&args.case, &scenario),
            &case,
            &flows,
            &congestion,
        )?;
    }
    Ok(())
}

fn cmd_recommend(args: RecommendArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.sweep).map_err(|e| io_error(&args.sweep, e))?;
    let records = read_sweep_csv(&text, &args.sweep.display().to_string())?;
    let target = match (args.target.max_line_rate, args.target.revenue) {
        (Some(value), false) => FeeTarget::MaxLineRate { value },
        (None, true) => FeeTarget::Revenue,
        _ => bail!("choose exactly one of --max-line-rate and --revenue"),
    };
    let r = recommend_fee(&records, target)?;
    println!("fee               {:.4}", r.fee);
    println!("max_rate          {:.4}", r.max_rate);
    println!("avg_rate          {:.4}", r.avg_rate);
    println!("operator_revenue  {:.2}", r.operator_revenue);
    println!("volume_mw         {:.2}", r.volume_mw);
    println!("interzone_mw      {:.2}", r.interzone_mw);
    Ok(())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[cfg(feature = "parallel")]
fn execution() -> Execution {
    Execution::Parallel
}

#[cfg(not(feature = "parallel"))]
fn execution() -> Execution {
    Execution::Serial
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Distances(a) => cmd_distances(a),
        Command::Powerflow(a) => cmd_powerflow(a),
        Command::RecommendFee(a) => cmd_recommend(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
