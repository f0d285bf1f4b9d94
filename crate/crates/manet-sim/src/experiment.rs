//! Scenario orchestration: CBR traffic, the five run-level performance
//! metrics, sweep execution over pause time and node count, and CSV output.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{FlowId, NodeId, Protocol, ScenarioConfig, SimTime};
use crate::sim::{RunError, RunOptions, Simulation};
use crate::trace::TraceLog;

/// One constant-bit-rate flow.
#[derive(Debug, Clone)]
pub struct CbrFlow {
    pub id: FlowId,
    pub source: NodeId,
    pub destination: NodeId,
    pub packet_size: u32,
    pub interval: f64,
    pub start: f64,
    pub stop: f64,
}

/// Emission times of a flow: start, start+interval, ... while <= stop.
pub fn cbr_ticks(flow: &CbrFlow) -> impl Iterator<Item = SimTime> + '_ {
    (0u64..)
        .map(|k| flow.start + k as f64 * flow.interval)
        .take_while(|t| *t <= flow.stop)
        .map(SimTime::from_secs)
}

/// Draws the configured number of flows: distinct (source, destination)
/// pairs, staggered starts inside the configured window.
pub fn draw_flows(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<CbrFlow> {
    let mut used: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut flows = Vec::with_capacity(cfg.flows as usize);
    let stop = cfg.sim_time - 1.0;
    while flows.len() < cfg.flows as usize {
        let s = rng.gen_range(0..cfg.nodes);
        let d = rng.gen_range(0..cfg.nodes);
        if s == d || !used.insert((s, d)) {
            continue;
        }
        let start = rng.gen_range(cfg.tuning.flow_start_min..cfg.tuning.flow_start_max);
        flows.push(CbrFlow {
            id: FlowId(flows.len() as u32),
            source: NodeId(s),
            destination: NodeId(d),
            packet_size: cfg.pkt_size,
            interval: cfg.cbr_interval,
            start,
            stop,
        });
    }
    flows
}

/// Counters realizing the run-level performance metrics.
#[derive(Debug, Default, Clone)]
pub struct RunStats {
    pub sent_data: u64,
    pub received_data: u64,
    pub dropped_data: u64,
    pub drop_overflow: u64,
    pub drop_retry: u64,
    pub drop_pending: u64,
    pub drop_discovery: u64,
    pub drop_misroute: u64,
    /// Routing control transmissions: RREQ + RREP + RERR + DUMMY, per hop.
    pub ctrl_packets: u64,
    pub rreq_tx: u64,
    pub rrep_tx: u64,
    pub rerr_tx: u64,
    /// Probe transmissions, also included in `ctrl_packets`; reported
    /// separately so the opposite accounting can be recomputed.
    pub dummy_tx: u64,
    /// Bytes of weight fields put on the air; zero under the baseline.
    pub weight_bytes_tx: u64,
    pub ctrl_overflow: u64,
    pub rrep_dropped: u64,
    pub broadcast_lost: u64,
    pub lq_rejects: u64,
    pub stale_rreps: u64,
    pub install_stale: u64,
    pub cost_corrupt: u64,
    /// End-to-end delay of each surviving data packet, seconds.
    pub delays: Vec<f64>,
    pub in_flight_end: u64,
}

/// The five reported metrics of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    /// Packets received successfully.
    pub throughput: u64,
    /// Received over sent; undefined when nothing was sent.
    pub pdr: Option<f64>,
    /// Data packets dropped.
    pub drop: u64,
    /// Control transmissions per received data packet; undefined when
    /// nothing was received.
    pub ctrl_overhead: Option<f64>,
    /// Mean end-to-end delay over surviving packets, seconds.
    pub avg_delay: Option<f64>,
}

pub fn compute_metrics(stats: &RunStats) -> MetricRecord {
    let pdr = (stats.sent_data > 0).then(|| stats.received_data as f64 / stats.sent_data as f64);
    let ctrl_overhead =
        (stats.received_data > 0).then(|| stats.ctrl_packets as f64 / stats.received_data as f64);
    let avg_delay = (!stats.delays.is_empty())
        .then(|| stats.delays.iter().sum::<f64>() / stats.delays.len() as f64);
    MetricRecord {
        throughput: stats.received_data,
        pdr,
        drop: stats.dropped_data,
        ctrl_overhead,
        avg_delay,
    }
}

/// Everything one run produces.
pub struct RunOutput {
    pub cfg: ScenarioConfig,
    pub stats: RunStats,
    pub record: MetricRecord,
    pub trace: TraceLog,
}

/// Builds and runs one scenario.
pub fn run_single(cfg: ScenarioConfig, opts: RunOptions) -> Result<RunOutput, RunError> {
    let mut sim = Simulation::new(cfg, opts)?;
    sim.run()?;
    let record = compute_metrics(&sim.stats);
    Ok(RunOutput {
        cfg: sim.cfg,
        stats: sim.stats,
        record,
        trace: sim.trace,
    })
}

/// Sweep axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    PauseTime,
    NumNodes,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::PauseTime => write!(f, "pause_time"),
            Axis::NumNodes => write!(f, "num_nodes"),
        }
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pause_time" => Ok(Axis::PauseTime),
            "num_nodes" => Ok(Axis::NumNodes),
            other => Err(format!(
                "unknown axis `{other}` (expected pause_time or num_nodes)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub protocols: Vec<Protocol>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.values.is_empty() || self.seeds.is_empty() || self.protocols.is_empty() {
            return Err("sweep values, seeds, and protocols must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep: {0}")]
    Spec(String),
    #[error("run failed (protocol={protocol}, {axis}={value}, seed={seed}): {source}")]
    Run {
        protocol: Protocol,
        axis: Axis,
        value: f64,
        seed: u64,
        source: RunError,
    },
}

/// One CSV row: a run or a per-(protocol, axis value) mean.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub protocol: Protocol,
    pub axis: Axis,
    pub axis_value: f64,
    /// `None` marks a mean row.
    pub seed: Option<u64>,
    pub nodes: u32,
    pub pause: f64,
    pub sent: f64,
    pub received: f64,
    pub dropped: f64,
    pub ctrl_pkts: f64,
    pub throughput: f64,
    pub pdr: Option<f64>,
    pub ctrl_overhead: Option<f64>,
    pub avg_delay: Option<f64>,
    pub dummy_tx: f64,
}

pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    /// Per-run outputs in row order, for inspection and tests.
    pub runs: Vec<RunOutput>,
}

fn apply_axis(cfg: &mut ScenarioConfig, axis: Axis, value: f64) {
    match axis {
        Axis::PauseTime => cfg.pause = value,
        Axis::NumNodes => cfg.nodes = value as u32,
    }
}

/// Runs the full grid: one run per (protocol, axis value, seed), identical
/// seeds across protocols so compared runs share mobility and traffic.
/// Appends one mean row per (protocol, axis value).
pub fn run_sweep(
    spec: &SweepSpec,
    base: &ScenarioConfig,
    opts: RunOptions,
) -> Result<SweepOutput, SweepError> {
    spec.validate().map_err(SweepError::Spec)?;
    let mut jobs = Vec::new();
    for protocol in &spec.protocols {
        for value in &spec.values {
            for seed in &spec.seeds {
                let mut cfg = base.clone();
                cfg.protocol = *protocol;
                cfg.seed = *seed;
                apply_axis(&mut cfg, spec.axis, *value);
                jobs.push((*protocol, *value, *seed, cfg));
            }
        }
    }

    let results: Vec<Result<RunOutput, SweepError>> = jobs
        .into_par_iter()
        .map(|(protocol, value, seed, cfg)| {
            run_single(cfg, opts).map_err(|source| SweepError::Run {
                protocol,
                axis: spec.axis,
                value,
                seed,
                source,
            })
        })
        .collect();

    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        runs.push(r?);
    }

    let mut rows = Vec::new();
    let mut idx = 0;
    for protocol in &spec.protocols {
        for value in &spec.values {
            let group_start = rows.len();
            for seed in &spec.seeds {
                let out = &runs[idx];
                idx += 1;
                rows.push(SweepRow {
                    protocol: *protocol,
                    axis: spec.axis,
                    axis_value: *value,
                    seed: Some(*seed),
                    nodes: out.cfg.nodes,
                    pause: out.cfg.pause,
                    sent: out.stats.sent_data as f64,
                    received: out.stats.received_data as f64,
                    dropped: out.stats.dropped_data as f64,
                    ctrl_pkts: out.stats.ctrl_packets as f64,
                    throughput: out.record.throughput as f64,
                    pdr: out.record.pdr,
                    ctrl_overhead: out.record.ctrl_overhead,
                    avg_delay: out.record.avg_delay,
                    dummy_tx: out.stats.dummy_tx as f64,
                });
            }
            rows.push(mean_row(&rows[group_start..]));
        }
    }
    Ok(SweepOutput { rows, runs })
}

fn mean_row(group: &[SweepRow]) -> SweepRow {
    fn mean(vals: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = vals.collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
    fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
        let v: Vec<f64> = vals.flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
    let first = &group[0];
    SweepRow {
        protocol: first.protocol,
        axis: first.axis,
        axis_value: first.axis_value,
        seed: None,
        nodes: first.nodes,
        pause: first.pause,
        sent: mean(group.iter().map(|r| r.sent)),
        received: mean(group.iter().map(|r| r.received)),
        dropped: mean(group.iter().map(|r| r.dropped)),
        ctrl_pkts: mean(group.iter().map(|r| r.ctrl_pkts)),
        throughput: mean(group.iter().map(|r| r.throughput)),
        pdr: mean_opt(group.iter().map(|r| r.pdr)),
        ctrl_overhead: mean_opt(group.iter().map(|r| r.ctrl_overhead)),
        avg_delay: mean_opt(group.iter().map(|r| r.avg_delay)),
        dummy_tx: mean(group.iter().map(|r| r.dummy_tx)),
    }
}

pub const CSV_HEADER: &str =
    "protocol,axis,axis_value,seed,nodes,pause,sent,received,dropped,ctrl_pkts,throughput,pdr,ctrl_overhead,avg_delay_s";

fn fmt_count(v: f64, is_mean: bool) -> String {
    if is_mean {
        format!("{v:.6}")
    } else {
        format!("{}", v as u64)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let is_mean = self.seed.is_none();
        let seed = self
            .seed
            .map(|s| s.to_string())
            .unwrap_or_else(|| "mean".into());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.protocol,
            self.axis,
            self.axis_value,
            seed,
            self.nodes,
            self.pause,
            fmt_count(self.sent, is_mean),
            fmt_count(self.received, is_mean),
            fmt_count(self.dropped, is_mean),
            fmt_count(self.ctrl_pkts, is_mean),
            fmt_count(self.throughput, is_mean),
            fmt_opt(self.pdr),
            fmt_opt(self.ctrl_overhead),
            fmt_opt(self.avg_delay),
        )
    }
}

/// Whole sweep as CSV text, header first.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Single-run CSV in the sweep schema, axis fields left empty.
pub fn single_run_csv(out: &RunOutput) -> String {
    let s = &out.stats;
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    text.push_str(&format!(
        "{},,,{},{},{},{},{},{},{},{},{},{},{}\n",
        out.cfg.protocol,
        out.cfg.seed,
        out.cfg.nodes,
        out.cfg.pause,
        s.sent_data,
        s.received_data,
        s.dropped_data,
        s.ctrl_packets,
        out.record.throughput,
        fmt_opt(out.record.pdr),
        fmt_opt(out.record.ctrl_overhead),
        fmt_opt(out.record.avg_delay),
    ));
    text
}

/// Gnuplot commands reproducing the axis-vs-metric figures, one series per
/// protocol, reading the sweep CSV's mean rows.
pub fn plot_script(csv_name: &str, axis: Axis) -> String {
    let xlabel = match axis {
        Axis::PauseTime => "Pause time (s)",
        Axis::NumNodes => "Number of nodes",
    };
    let metrics = [
        ("throughput", 11, "Throughput (packets)"),
        ("drop", 9, "Packets dropped"),
        ("overhead", 13, "Control overhead"),
        ("pdr", 12, "Packet delivery ratio"),
        ("delay", 14, "Average delay (s)"),
    ];
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set key top right\n");
    s.push_str(&format!("set xlabel '{xlabel}'\n"));
    for (name, col, label) in metrics {
        s.push_str(&format!("set ylabel '{label}'\n"));
        s.push_str(&format!("set output '{name}.png'\nset terminal png\n"));
        s.push_str(&format!(
            "plot '{csv}' using 3:{col} every ::0 with linespoints title 'carp' \\\n    , '{csv}' using 3:{col} every ::0 with linespoints title 'aomdv'\n",
            csv = csv_name,
            col = col
        ));
        s.push_str(&format!(
            "# series filter: column 4 == 'mean', column 1 selects the protocol\n"
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(start: f64, stop: f64, interval: f64) -> CbrFlow {
        CbrFlow {
            id: FlowId(0),
            source: NodeId(0),
            destination: NodeId(1),
            packet_size: 512,
            interval,
            start,
            stop,
        }
    }

    #[test]
    fn cbr_tick_count_matches_direct_enumeration() {
        // Oracle: count k with 1.0 + 0.25k <= 99.
        let expected = (0u64..)
            .take_while(|k| 1.0 + *k as f64 * 0.25 <= 99.0)
            .count();
        assert_eq!(expected, 393);
        assert_eq!(cbr_ticks(&flow(1.0, 99.0, 0.25)).count(), 393);
    }

    #[test]
    fn empty_interval_offers_nothing() {
        assert_eq!(cbr_ticks(&flow(5.0, 5.0, 0.25)).count(), 1);
        assert_eq!(cbr_ticks(&flow(5.0, 4.0, 0.25)).count(), 0);
    }

    #[test]
    fn two_flows_double_the_offered_load() {
        let one = cbr_ticks(&flow(1.0, 99.0, 0.25)).count();
        let two = one + cbr_ticks(&flow(1.0, 99.0, 0.25)).count();
        assert_eq!(two, 2 * one);
    }

    #[test]
    fn metrics_follow_their_definitions() {
        let stats = RunStats {
            sent_data: 100,
            received_data: 95,
            dropped_data: 5,
            ctrl_packets: 200,
            delays: vec![0.01, 0.03],
            ..RunStats::default()
        };
        let m = compute_metrics(&stats);
        assert_eq!(m.throughput, 95);
        assert!((m.pdr.unwrap() - 0.95).abs() < 1e-12);
        assert_eq!(m.drop, 5);
        assert!((m.ctrl_overhead.unwrap() - 200.0 / 95.0).abs() < 1e-12);
        assert!((m.avg_delay.unwrap() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn undefined_ratios_are_absent() {
        let empty = RunStats::default();
        let m = compute_metrics(&empty);
        assert_eq!(m.pdr, None);
        assert_eq!(m.ctrl_overhead, None);
        assert_eq!(m.avg_delay, None);
    }

    #[test]
    fn overhead_normalizes_by_received() {
        let stats = RunStats {
            sent_data: 500,
            received_data: 400,
            dropped_data: 100,
            ctrl_packets: 200,
            ..RunStats::default()
        };
        assert!((compute_metrics(&stats).ctrl_overhead.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flows_are_distinct_pairs() {
        let cfg = ScenarioConfig::default();
        let mut rng = crate::engine::Engine::stream_for(9, crate::engine::RngLabel::Traffic);
        let flows = draw_flows(&cfg, &mut rng);
        assert_eq!(flows.len(), 10);
        let mut pairs = BTreeSet::new();
        for f in &flows {
            assert_ne!(f.source, f.destination);
            assert!(pairs.insert((f.source, f.destination)));
            assert!(f.start >= cfg.tuning.flow_start_min && f.start < cfg.tuning.flow_start_max);
        }
    }

    #[test]
    fn csv_header_has_exact_column_order() {
        assert_eq!(
            CSV_HEADER,
            "protocol,axis,axis_value,seed,nodes,pause,sent,received,dropped,ctrl_pkts,throughput,pdr,ctrl_overhead,avg_delay_s"
        );
    }
}
