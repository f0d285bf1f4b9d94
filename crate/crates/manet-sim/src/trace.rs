//! Run traces: protocol events, metric snapshots, and node placements.

use std::fmt;

use crate::engine::{FlowId, NodeId, SimTime};
use crate::metrics::LinkMetrics;

/// Protocol event classes emitted into the packet trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    RreqTx,
    RreqRx,
    RrepTx,
    RrepRx,
    DummyTx,
    DummyRx,
    Rerr,
    RouteInstall,
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TraceKind::RreqTx => "RREQ_TX",
            TraceKind::RreqRx => "RREQ_RX",
            TraceKind::RrepTx => "RREP_TX",
            TraceKind::RrepRx => "RREP_RX",
            TraceKind::DummyTx => "DUMMY_TX",
            TraceKind::DummyRx => "DUMMY_RX",
            TraceKind::Rerr => "RERR",
            TraceKind::RouteInstall => "ROUTE_INSTALL",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct TraceEvent {
    pub t: SimTime,
    pub node: NodeId,
    pub kind: TraceKind,
    pub flow: FlowId,
    pub path: Vec<NodeId>,
}

impl TraceEvent {
    pub fn line(&self) -> String {
        let path = self
            .path
            .iter()
            .map(|n| n.0.to_string())
            .collect::<Vec<_>>()
            .join("-");
        format!(
            "{:.9} {} {} {} {}",
            self.t.secs(),
            self.node,
            self.kind,
            self.flow,
            path
        )
    }
}

/// One metric-trace row, written whenever a node computes its weight.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub t: SimTime,
    pub node: NodeId,
    pub neighbor: NodeId,
    pub l_q: Option<f64>,
    pub oh_mac: Option<f64>,
    pub d_rate: Option<f64>,
    pub d_avg: Option<f64>,
    pub nw: f64,
}

impl MetricRow {
    pub fn line(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.9e}")).unwrap_or_default()
        }
        format!(
            "{:.9},{},{},{},{},{},{},{:.9e}",
            self.t.secs(),
            self.node.0,
            self.neighbor.0,
            opt(self.l_q),
            opt(self.oh_mac),
            opt(self.d_rate),
            opt(self.d_avg),
            self.nw
        )
    }
}

/// Position sample for the placement dump.
#[derive(Debug, Clone)]
pub struct PlacementRow {
    pub node: NodeId,
    pub t: SimTime,
    pub x: f64,
    pub y: f64,
}

impl PlacementRow {
    pub fn line(&self) -> String {
        format!("{},{:.6},{:.3},{:.3}", self.node.0, self.t.secs(), self.x, self.y)
    }
}

/// Collects run traces. Collection is off unless enabled; the simulator
/// behaves identically either way.
#[derive(Debug, Default)]
pub struct TraceLog {
    pub collect_events: bool,
    pub collect_metrics: bool,
    pub collect_placement: bool,
    pub events: Vec<TraceEvent>,
    pub metrics: Vec<MetricRow>,
    pub placements: Vec<PlacementRow>,
}

impl TraceLog {
    pub fn new(events: bool, metrics: bool, placement: bool) -> TraceLog {
        TraceLog {
            collect_events: events,
            collect_metrics: metrics,
            collect_placement: placement,
            ..TraceLog::default()
        }
    }

    pub fn protocol_event(
        &mut self,
        t: SimTime,
        node: NodeId,
        kind: TraceKind,
        flow: FlowId,
        path: &[NodeId],
    ) {
        if self.collect_events {
            self.events.push(TraceEvent {
                t,
                node,
                kind,
                flow,
                path: path.to_vec(),
            });
        }
    }

    pub fn metric_row(
        &mut self,
        t: SimTime,
        node: NodeId,
        neighbor: NodeId,
        m: &LinkMetrics,
        nw: f64,
    ) {
        if self.collect_metrics {
            self.metrics.push(MetricRow {
                t,
                node,
                neighbor,
                l_q: m.l_q,
                oh_mac: m.oh_mac,
                d_rate: m.d_rate,
                d_avg: m.d_avg,
                nw,
            });
        }
    }

    pub fn placement_row(&mut self, node: NodeId, t: SimTime, x: f64, y: f64) {
        if self.collect_placement {
            self.placements.push(PlacementRow { node, t, x, y });
        }
    }

    /// Full packet trace as newline-separated text.
    pub fn event_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.line());
            out.push('\n');
        }
        out
    }

    pub fn metric_text(&self) -> String {
        let mut out = String::from("t,node,neighbor,l_q,oh_mac,d_rate,d_avg,nw\n");
        for r in &self.metrics {
            out.push_str(&r.line());
            out.push('\n');
        }
        out
    }

    pub fn placement_text(&self) -> String {
        let mut out = String::from("node_id,t,x,y\n");
        for r in &self.placements {
            out.push_str(&r.line());
            out.push('\n');
        }
        out
    }
}
