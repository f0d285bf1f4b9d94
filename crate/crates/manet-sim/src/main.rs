use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use manet_sim::engine::{Protocol, ScenarioConfig};
use manet_sim::experiment::{
    plot_script, run_single, run_sweep, single_run_csv, sweep_csv, Axis, SweepSpec,
};
use manet_sim::sim::RunOptions;

#[derive(Parser)]
#[command(name = "manet-sim", about = "Packet-level MANET routing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print its metrics.
    Run(RunArgs),
    /// Run a grid over pause time or node count for several seeds and
    /// protocols, writing one CSV.
    Sweep(SweepArgs),
}

/// Scenario flags; each overrides the config file and the defaults.
#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Scenario file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<u32>,
    #[arg(long)]
    area_x: Option<f64>,
    #[arg(long)]
    area_y: Option<f64>,
    #[arg(long)]
    range: Option<f64>,
    #[arg(long)]
    sim_time: Option<f64>,
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    pause: Option<f64>,
    /// Channel rate, bit/s.
    #[arg(long)]
    rate: Option<f64>,
    /// Data packet size, bytes.
    #[arg(long)]
    pkt_size: Option<u32>,
    /// carp or aomdv.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    flows: Option<u32>,
    #[arg(long)]
    cbr_interval: Option<f64>,
    #[arg(long)]
    t_rts: Option<f64>,
    #[arg(long)]
    t_cts: Option<f64>,
    #[arg(long)]
    t_sifs: Option<f64>,
    /// Draw per-node rates from the heterogeneous class preset
    /// {1, 2, 5.5, 11} Mbit/s.
    #[arg(long)]
    hetero_rates: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Output directory for CSV and traces.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Write the protocol event trace (trace.txt).
    #[arg(long)]
    trace: bool,
    /// Write the per-link metric trace (metrics_trace.csv).
    #[arg(long)]
    metric_trace: bool,
    /// Write node positions over time (placement.csv).
    #[arg(long)]
    placement_dump: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// pause_time or num_nodes.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values, e.g. 0,10,20,30,40.
    #[arg(long)]
    values: String,
    /// Comma-separated seeds, e.g. 1,2,3,4,5.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// Comma-separated protocols.
    #[arg(long, default_value = "carp,aomdv")]
    protocols: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write a gnuplot script next to the CSV.
    #[arg(long)]
    plot_script: bool,
}

fn build_config(args: &ScenarioArgs) -> Result<ScenarioConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => ScenarioConfig::from_file(path).map_err(|e| e.to_string())?,
        None => ScenarioConfig::default(),
    };
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        };
    }
    set!(nodes);
    set!(area_x);
    set!(area_y);
    set!(range);
    set!(sim_time);
    set!(speed);
    set!(pause);
    set!(rate);
    set!(pkt_size);
    set!(seed);
    set!(flows);
    set!(cbr_interval);
    set!(t_rts);
    set!(t_cts);
    set!(t_sifs);
    if let Some(p) = &args.protocol {
        cfg.protocol = p.parse::<Protocol>().map_err(|e| e.to_string())?;
    }
    if args.hetero_rates {
        cfg.tuning.rate_classes = Some(vec![1e6, 2e6, 5.5e6, 11e6]);
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| format!("bad {what} `{p}`: {e}")))
        .collect()
}

fn write_file(dir: &PathBuf, name: &str, text: &str) -> Result<PathBuf, String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    Ok(path)
}

fn cmd_run(args: RunArgs) -> Result<(), (u8, String)> {
    let cfg = build_config(&args.scenario).map_err(|e| (1u8, e))?;
    let opts = RunOptions {
        trace_events: args.trace,
        trace_metrics: args.metric_trace,
        trace_placement: args.placement_dump,
    };
    let out = run_single(cfg, opts).map_err(|e| (2u8, e.to_string()))?;

    let s = &out.stats;
    let m = &out.record;
    println!(
        "protocol={} seed={} nodes={} pause={}",
        out.cfg.protocol, out.cfg.seed, out.cfg.nodes, out.cfg.pause
    );
    println!(
        "sent={} received={} dropped={} in_flight={} (overflow={} retry={} pending={} discovery={})",
        s.sent_data,
        s.received_data,
        s.dropped_data,
        s.in_flight_end,
        s.drop_overflow,
        s.drop_retry,
        s.drop_pending,
        s.drop_discovery
    );
    println!(
        "ctrl_pkts={} (rreq={} rrep={} rerr={} dummy={}) weight_bytes={}",
        s.ctrl_packets, s.rreq_tx, s.rrep_tx, s.rerr_tx, s.dummy_tx, s.weight_bytes_tx
    );
    fn opt(v: Option<f64>) -> String {
        v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
    }
    println!(
        "throughput={} pdr={} drop={} ctrl_overhead={} avg_delay_s={}",
        m.throughput,
        opt(m.pdr),
        m.drop,
        opt(m.ctrl_overhead),
        opt(m.avg_delay)
    );

    let csv = single_run_csv(&out);
    let path = write_file(&args.out, "run.csv", &csv).map_err(|e| (2u8, e))?;
    println!("wrote {}", path.display());
    if args.trace {
        let p = write_file(&args.out, "trace.txt", &out.trace.event_text()).map_err(|e| (2u8, e))?;
        println!("wrote {}", p.display());
    }
    if args.metric_trace {
        let p = write_file(&args.out, "metrics_trace.csv", &out.trace.metric_text())
            .map_err(|e| (2u8, e))?;
        println!("wrote {}", p.display());
    }
    if args.placement_dump {
        let p = write_file(&args.out, "placement.csv", &out.trace.placement_text())
            .map_err(|e| (2u8, e))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), (u8, String)> {
    let base = build_config(&args.scenario).map_err(|e| (1u8, e))?;
    let axis: Axis = args.axis.parse().map_err(|e: String| (1u8, e))?;
    let spec = SweepSpec {
        axis,
        values: parse_list(&args.values, "axis value").map_err(|e| (1u8, e))?,
        seeds: parse_list(&args.seeds, "seed").map_err(|e| (1u8, e))?,
        protocols: {
            let names: Vec<String> = parse_list(&args.protocols, "protocol").map_err(|e| (1u8, e))?;
            let mut ps = Vec::new();
            for n in names {
                ps.push(n.parse::<Protocol>().map_err(|e| (1u8, e.to_string()))?);
            }
            ps
        },
    };
    spec.validate().map_err(|e| (1u8, e))?;

    let output = run_sweep(&spec, &base, RunOptions::default()).map_err(|e| (2u8, e.to_string()))?;
    let csv = sweep_csv(&output.rows);
    let path = write_file(&args.out, "sweep.csv", &csv).map_err(|e| (2u8, e))?;
    println!("wrote {} ({} rows)", path.display(), output.rows.len());
    for (out, row) in output.runs.iter().zip(output.rows.iter().filter(|r| r.seed.is_some())) {
        println!(
            "{} {}={} seed={} sent={} received={} ctrl={} dummy={}",
            row.protocol,
            row.axis,
            row.axis_value,
            row.seed.unwrap(),
            out.stats.sent_data,
            out.stats.received_data,
            out.stats.ctrl_packets,
            out.stats.dummy_tx
        );
    }
    if args.plot_script {
        let p = write_file(&args.out, "plots.gp", &plot_script("sweep.csv", axis))
            .map_err(|e| (2u8, e))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
