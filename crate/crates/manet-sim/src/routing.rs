//! The two protocol state machines: congestion-aware weight routing (weight
//! accumulation on the request flood, cost recovery and probe admission on
//! the reply side) and a simplified hop-count multipath baseline.

use std::collections::{BTreeMap, VecDeque};

use crate::engine::{EventKind, FlowId, NodeId, Protocol, RreqId, SimTime, TimerKind};
use crate::metrics::{node_weight, recover_cost_index, WeightAccumulator};
use crate::sim::Simulation;
use crate::trace::TraceKind;

/// A unicast application payload, source-routed along `path`.
#[derive(Debug, Clone)]
pub struct DataPacket {
    pub flow: FlowId,
    pub seq: u32,
    pub origin_time: SimTime,
    pub path: Vec<NodeId>,
    pub size: u32,
}

/// Flooded route request. The weight field exists only under the
/// congestion-aware protocol; the baseline never transmits it.
#[derive(Debug, Clone)]
pub struct RreqPacket {
    pub id: RreqId,
    pub flow: FlowId,
    pub source: NodeId,
    pub destination: NodeId,
    pub accumulated_weight: Option<f64>,
    pub hop_count: u32,
    /// Traversed nodes, source first. `hop_count == path.len() - 1`.
    pub path: Vec<NodeId>,
}

/// Route reply, unicast back along the reversed request path. The first
/// reply carries the accumulated total; the post-probe reply carries the
/// measured average delay instead.
#[derive(Debug, Clone)]
pub struct RrepPacket {
    pub rreq_id: RreqId,
    pub flow: FlowId,
    /// Full route, source first, destination last.
    pub route: Vec<NodeId>,
    pub route_total_weight: Option<f64>,
    pub measured_d_avg: Option<f64>,
    pub probe: Option<u32>,
}

/// Probe packet shaped like real data (same size, same rate).
#[derive(Debug, Clone)]
pub struct DummyPacket {
    pub flow: FlowId,
    pub rreq_id: RreqId,
    pub probe: u32,
    pub idx: u32,
    pub stream_len: u32,
    pub sent_at: SimTime,
    pub path: Vec<NodeId>,
    pub size: u32,
}

/// Link-breakage notice, unicast hop-by-hop back to the source.
#[derive(Debug, Clone)]
pub struct RerrPacket {
    pub flow: FlowId,
    pub broken_from: NodeId,
    pub broken_to: NodeId,
    /// Detecting node first, affected source last.
    pub reverse_path: Vec<NodeId>,
}

/// Everything that travels between nodes.
#[derive(Debug, Clone)]
pub enum Packet {
    Data(DataPacket),
    Rreq(RreqPacket),
    Rrep(RrepPacket),
    Dummy(DummyPacket),
    Rerr(RerrPacket),
}

impl Packet {
    pub fn size_bytes(&self, t: &crate::engine::config::Tuning) -> u32 {
        match self {
            Packet::Data(d) => d.size,
            Packet::Dummy(d) => d.size,
            Packet::Rreq(r) => {
                t.ctrl_pkt_size
                    + if r.accumulated_weight.is_some() {
                        t.weight_field_bytes
                    } else {
                        0
                    }
            }
            Packet::Rrep(r) => {
                t.ctrl_pkt_size
                    + if r.route_total_weight.is_some() {
                        t.weight_field_bytes
                    } else {
                        0
                    }
            }
            Packet::Rerr(_) => t.ctrl_pkt_size,
        }
    }

    pub fn weight_bytes(&self, t: &crate::engine::config::Tuning) -> u32 {
        match self {
            Packet::Rreq(r) if r.accumulated_weight.is_some() => t.weight_field_bytes,
            Packet::Rrep(r) if r.route_total_weight.is_some() => t.weight_field_bytes,
            _ => 0,
        }
    }

    pub fn is_data(&self) -> bool {
        matches!(self, Packet::Data(_))
    }

    /// Data and probe packets share size and rate; both feed the
    /// channel-delay estimator.
    pub fn is_data_sized(&self) -> bool {
        matches!(self, Packet::Data(_) | Packet::Dummy(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeState {
    Unprobed,
    Probing,
    Admitted,
    Rejected,
}

/// One saved reply at the source: a candidate route awaiting probing.
#[derive(Debug, Clone)]
pub struct RrepTableEntry {
    pub path: Vec<NodeId>,
    pub total_weight: f64,
    pub hop_count: u32,
    pub state: ProbeState,
    pub d_avg: Option<f64>,
    pub received_at: SimTime,
    /// Invalidated by a link breakage; kept so state transitions stay
    /// forward-only.
    pub dead: bool,
}

impl RrepTableEntry {
    pub fn new(path: Vec<NodeId>, total_weight: f64, received_at: SimTime) -> RrepTableEntry {
        let hop_count = (path.len() - 1) as u32;
        RrepTableEntry {
            path,
            total_weight,
            hop_count,
            state: ProbeState::Unprobed,
            d_avg: None,
            received_at,
            dead: false,
        }
    }

    /// Probe state only moves forward: unprobed -> probing -> admitted or
    /// rejected.
    pub fn advance(&mut self, next: ProbeState) {
        let ok = matches!(
            (self.state, next),
            (ProbeState::Unprobed, ProbeState::Probing)
                | (ProbeState::Probing, ProbeState::Admitted)
                | (ProbeState::Probing, ProbeState::Rejected)
        );
        assert!(ok, "probe state may not move {:?} -> {next:?}", self.state);
        self.state = next;
    }

    pub fn uses_edge(&self, a: NodeId, b: NodeId) -> bool {
        path_uses_edge(&self.path, a, b)
    }
}

/// An installed route. `next_hop` is always the second path element.
#[derive(Debug, Clone)]
pub struct RouteEntry {
    pub destination: NodeId,
    pub next_hop: NodeId,
    pub path: Vec<NodeId>,
    pub score: f64,
    pub hop_count: u32,
}

impl RouteEntry {
    pub fn from_path(path: Vec<NodeId>, score: f64) -> RouteEntry {
        debug_assert!(path.len() >= 2);
        RouteEntry {
            destination: *path.last().unwrap(),
            next_hop: path[1],
            hop_count: (path.len() - 1) as u32,
            score,
            path,
        }
    }
}

pub fn path_uses_edge(path: &[NodeId], a: NodeId, b: NodeId) -> bool {
    path.windows(2).any(|w| w[0] == a && w[1] == b)
}

/// Picks the best admitted candidate: maximum route score, ties broken by
/// fewer hops, then lexicographically smallest path.
pub fn select_route<'a>(candidates: &'a [&'a RrepTableEntry]) -> Option<&'a RrepTableEntry> {
    candidates.iter().copied().min_by(|a, b| {
        b.total_weight
            .total_cmp(&a.total_weight)
            .then(a.hop_count.cmp(&b.hop_count))
            .then(a.path.cmp(&b.path))
    })
}

/// Hop-count order for the baseline: fewest hops, then smallest path.
pub fn best_min_hop(routes: &[RouteEntry]) -> Option<&RouteEntry> {
    routes
        .iter()
        .min_by(|a, b| a.hop_count.cmp(&b.hop_count).then(a.path.cmp(&b.path)))
}

/// Per-request forwarding memory at one node.
#[derive(Debug, Default)]
pub struct RreqSeen {
    pub forwards: u32,
    /// Best accumulated weight forwarded so far (weight protocol).
    pub best_total: f64,
    /// Best hop count forwarded so far (baseline).
    pub best_hops: u32,
    /// Upstream prefix sum per forwarded path, for reply-side cost recovery.
    pub prefixes: BTreeMap<Vec<NodeId>, f64>,
}

/// One route-request copy collected at the destination.
#[derive(Debug, Clone)]
pub struct RreqCopy {
    pub route: Vec<NodeId>,
    pub total_weight: f64,
    pub hop_count: u32,
}

#[derive(Debug, Default)]
pub struct ReplyCollect {
    pub copies: Vec<RreqCopy>,
    pub window_scheduled: bool,
    pub window_closed: bool,
    /// First hops already answered (baseline replies immediately).
    pub replied_first_hops: Vec<NodeId>,
}

/// Probe-delay collection at the destination.
#[derive(Debug)]
pub struct DummyCollect {
    pub rreq_id: RreqId,
    pub path: Vec<NodeId>,
    pub delays: Vec<f64>,
    pub expected: u32,
    pub replied: bool,
}

/// Per-node protocol state shared by both protocols.
#[derive(Debug, Default)]
pub struct RouterNode {
    pub rreq_counter: u32,
    pub seen: BTreeMap<RreqId, RreqSeen>,
    pub reply: BTreeMap<RreqId, ReplyCollect>,
    pub dummy: BTreeMap<(FlowId, u32), DummyCollect>,
    /// Paths of flows recently forwarded through this node, for breakage
    /// notification back to their sources.
    pub active_paths: BTreeMap<FlowId, Vec<NodeId>>,
    /// Cost indices recovered on the reply path (recorded, not reused).
    pub cost_log: Vec<(RreqId, f64)>,
}

/// Source-side state of one flow's routing.
#[derive(Debug)]
pub enum FlowPhase {
    Idle,
    Discovering,
    Active { current: RouteEntry },
}

#[derive(Debug)]
pub struct FlowRouting {
    pub phase: FlowPhase,
    pub current_rreq: Option<RreqId>,
    /// Saved replies (weight protocol); survives into the active phase as
    /// spare candidates.
    pub table: Vec<RrepTableEntry>,
    /// Installed routes (baseline multipath).
    pub routes: Vec<RouteEntry>,
    pub pending: VecDeque<DataPacket>,
    pub probing: Option<u32>,
    pub probe_counter: u32,
    pub rejections: u32,
    pub probe_wait_scheduled: bool,
}

impl Default for FlowRouting {
    fn default() -> Self {
        FlowRouting {
            phase: FlowPhase::Idle,
            current_rreq: None,
            table: Vec::new(),
            routes: Vec::new(),
            pending: VecDeque::new(),
            probing: None,
            probe_counter: 0,
            rejections: 0,
            probe_wait_scheduled: false,
        }
    }
}

// Routing-side event handlers.
impl Simulation {
    /// Hands one application packet to routing at its source.
    pub(crate) fn route_data(&mut self, flow: FlowId, pkt: DataPacket) {
        let f = &mut self.flows[flow.index()];
        match &f.routing.phase {
            FlowPhase::Active { current } => {
                let mut pkt = pkt;
                pkt.path = current.path.clone();
                let next = current.next_hop;
                let src = f.cfg.source;
                self.mac_enqueue(src, Packet::Data(pkt), Some(next));
            }
            FlowPhase::Discovering => self.buffer_pending(flow, pkt),
            FlowPhase::Idle => {
                self.buffer_pending(flow, pkt);
                self.originate_rreq(flow);
            }
        }
    }

    fn buffer_pending(&mut self, flow: FlowId, pkt: DataPacket) {
        let cap = self.cfg.tuning.pending_capacity;
        let f = &mut self.flows[flow.index()];
        if f.routing.pending.len() >= cap {
            f.routing.pending.pop_front();
            self.stats.dropped_data += 1;
            self.stats.drop_pending += 1;
        }
        self.flows[flow.index()].routing.pending.push_back(pkt);
    }

    /// Starts a fresh discovery: broadcast a route request with zero
    /// accumulated weight (weight protocol) or bare hop count (baseline).
    pub(crate) fn originate_rreq(&mut self, flow: FlowId) {
        let _now = self.engine.now();
        let (src, dst) = {
            let f = &self.flows[flow.index()];
            (f.cfg.source, f.cfg.destination)
        };
        debug_assert!(src != dst, "degenerate flows are rejected at config time");
        let seq = {
            let r = &mut self.nodes[src.index()].router;
            r.rreq_counter += 1;
            r.rreq_counter
        };
        let id = RreqId { origin: src, seq };
        {
            let f = &mut self.flows[flow.index()];
            f.routing.phase = FlowPhase::Discovering;
            f.routing.current_rreq = Some(id);
            f.routing.table.clear();
            f.routing.routes.clear();
            f.routing.probing = None;
            f.routing.rejections = 0;
            f.routing.probe_wait_scheduled = false;
        }
        let weight = match self.cfg.protocol {
            Protocol::Carp => Some(0.0),
            Protocol::Aomdv => None,
        };
        let rreq = RreqPacket {
            id,
            flow,
            source: src,
            destination: dst,
            accumulated_weight: weight,
            hop_count: 0,
            path: vec![src],
        };
        self.mac_enqueue(src, Packet::Rreq(rreq), None);
        self.engine
            .schedule_in(
                self.cfg.tuning.discovery_timeout,
                EventKind::Timer(TimerKind::DiscoveryTimeout(flow, seq)),
                src,
            )
            .expect("discovery timeout in the future");
    }

    /// Request arrived at `node` from neighbor `from`.
    pub(crate) fn on_rreq(&mut self, node: NodeId, rreq: RreqPacket, from: NodeId) {
        let now = self.engine.now();
        if node == rreq.source || rreq.path.contains(&node) {
            return; // loop freedom
        }
        if rreq.hop_count >= self.cfg.tuning.max_hops {
            return;
        }
        // Links measured below the admission floor are discarded from route
        // formation. The sample for this very reception is already in.
        if let Some(l_q) = self.nodes[node.index()].metrics.link_quality(from) {
            if l_q < self.defaults.lq_floor {
                self.stats.lq_rejects += 1;
                return;
            }
        }
        if node == rreq.destination {
            self.collect_at_destination(node, rreq);
            return;
        }
        self.forward_rreq(node, rreq, from, now);
    }

    /// Intermediate-node forwarding with the duplicate policy: the first
    /// copy always goes out; later copies only when they strictly improve,
    /// up to the per-request cap.
    fn forward_rreq(&mut self, node: NodeId, rreq: RreqPacket, from: NodeId, now: SimTime) {
        let cap = self.cfg.tuning.dup_forward_cap;
        match self.cfg.protocol {
            Protocol::Carp => {
                let own_nw = self.compute_node_weight(node, from, now);
                let upstream = rreq.accumulated_weight.unwrap_or(0.0);
                let acc = WeightAccumulator::new(upstream, own_nw);
                let total = acc.forwarded_total();
                let seen = self.nodes[node.index()].router.seen.entry(rreq.id).or_default();
                let improves = seen.forwards == 0 || total > seen.best_total;
                if !improves || seen.forwards >= cap {
                    return;
                }
                seen.forwards += 1;
                seen.best_total = seen.best_total.max(total);
                let mut path = rreq.path.clone();
                path.push(node);
                seen.prefixes.insert(path.clone(), acc.prefix_sum);
                let fwd = RreqPacket {
                    accumulated_weight: Some(total),
                    hop_count: rreq.hop_count + 1,
                    path,
                    ..rreq
                };
                self.mac_enqueue(node, Packet::Rreq(fwd), None);
            }
            Protocol::Aomdv => {
                let hops = rreq.hop_count + 1;
                let seen = self.nodes[node.index()].router.seen.entry(rreq.id).or_default();
                let improves = seen.forwards == 0 || hops < seen.best_hops;
                if !improves || seen.forwards >= cap {
                    return;
                }
                seen.forwards += 1;
                seen.best_hops = if seen.forwards == 1 {
                    hops
                } else {
                    seen.best_hops.min(hops)
                };
                let mut path = rreq.path.clone();
                path.push(node);
                let fwd = RreqPacket {
                    hop_count: hops,
                    path,
                    ..rreq
                };
                self.mac_enqueue(node, Packet::Rreq(fwd), None);
            }
        }
    }

    /// Own weight for the request's arrival link; falls back to the
    /// scenario-wide default while the estimators are cold.
    fn compute_node_weight(&mut self, node: NodeId, upstream: NodeId, now: SimTime) -> f64 {
        let queue_len = self.nodes[node.index()].mac.queue_len();
        let rate = self.nodes[node.index()].mac.rate.rate;
        let snapshot = self.nodes[node.index()].metrics.snapshot(
            upstream,
            queue_len,
            rate,
            &self.defaults,
            now,
        );
        let nw = match node_weight(&snapshot) {
            Ok(nw) => nw,
            Err(_) => self.defaults.default_nw,
        };
        self.trace
            .metric_row(now, node, upstream, &snapshot, nw);
        nw
    }

    fn collect_at_destination(&mut self, node: NodeId, rreq: RreqPacket) {
        let _now = self.engine.now();
        let k = self.cfg.tuning.k_replies;
        let mut route = rreq.path.clone();
        route.push(node);
        let first_hop = route[1];
        let copy = RreqCopy {
            route: route.clone(),
            total_weight: rreq.accumulated_weight.unwrap_or(0.0),
            hop_count: rreq.hop_count + 1,
        };
        match self.cfg.protocol {
            Protocol::Carp => {
                let window = self.cfg.tuning.rreq_collect_window;
                let rs = self.nodes[node.index()].router.reply.entry(rreq.id).or_default();
                if rs.window_closed {
                    return;
                }
                rs.copies.push(copy);
                let need_timer = !rs.window_scheduled;
                if need_timer {
                    rs.window_scheduled = true;
                    self.engine
                        .schedule_in(
                            window,
                            EventKind::Timer(TimerKind::ReplyWindow(rreq.id)),
                            node,
                        )
                        .expect("reply window in the future");
                }
            }
            Protocol::Aomdv => {
                // Reply immediately to the first K copies with distinct
                // first hops.
                let rs = self.nodes[node.index()].router.reply.entry(rreq.id).or_default();
                if rs.replied_first_hops.len() >= k || rs.replied_first_hops.contains(&first_hop) {
                    return;
                }
                rs.replied_first_hops.push(first_hop);
                let rrep = RrepPacket {
                    rreq_id: rreq.id,
                    flow: rreq.flow,
                    route,
                    route_total_weight: None,
                    measured_d_avg: None,
                    probe: None,
                };
                self.send_rrep(node, rrep);
            }
        }
    }

    /// Destination's collection window closed: reply to the best-scoring
    /// distinct-path copies.
    pub(crate) fn on_reply_window(&mut self, node: NodeId, rreq_id: RreqId) {
        let k = self.cfg.tuning.k_replies;
        let picks: Vec<RreqCopy> = {
            let Some(rs) = self.nodes[node.index()].router.reply.get_mut(&rreq_id) else {
                return;
            };
            rs.window_closed = true;
            let mut copies = rs.copies.clone();
            copies.sort_by(|a, b| {
                b.total_weight
                    .total_cmp(&a.total_weight)
                    .then(a.hop_count.cmp(&b.hop_count))
                    .then(a.route.cmp(&b.route))
            });
            let mut picked: Vec<RreqCopy> = Vec::new();
            for c in copies {
                if picked.len() >= k {
                    break;
                }
                if picked.iter().any(|p| p.route[1] == c.route[1]) {
                    continue;
                }
                picked.push(c);
            }
            picked
        };
        let flow = self.flow_for_rreq(node, rreq_id, &picks);
        let Some(flow) = flow else { return };
        for c in picks {
            let rrep = RrepPacket {
                rreq_id,
                flow,
                route: c.route,
                route_total_weight: Some(c.total_weight),
                measured_d_avg: None,
                probe: None,
            };
            self.send_rrep(node, rrep);
        }
    }

    fn flow_for_rreq(&self, _dest: NodeId, rreq_id: RreqId, picks: &[RreqCopy]) -> Option<FlowId> {
        if picks.is_empty() {
            return None;
        }
        // Flows are unique per (source, destination) pair.
        let src = rreq_id.origin;
        let dst = *picks[0].route.last().unwrap();
        self.flows
            .iter()
            .find(|f| f.cfg.source == src && f.cfg.destination == dst)
            .map(|f| f.cfg.id)
    }

    fn send_rrep(&mut self, node: NodeId, rrep: RrepPacket) {
        debug_assert_eq!(*rrep.route.last().unwrap(), node);
        let next = rrep.route[rrep.route.len() - 2];
        self.mac_enqueue(node, Packet::Rrep(rrep), Some(next));
    }

    /// Reply arrived at `node`.
    pub(crate) fn on_rrep(&mut self, node: NodeId, rrep: RrepPacket, _from: NodeId) {
        let Some(pos) = rrep.route.iter().position(|n| *n == node) else {
            return;
        };
        if pos == 0 {
            self.on_rrep_at_source(node, rrep);
            return;
        }
        // Intermediate host: recover the cost index from the carried total
        // and the prefix remembered when the request went through.
        if let (Some(total), None) = (rrep.route_total_weight, rrep.measured_d_avg) {
            let key: Vec<NodeId> = rrep.route[..=pos].to_vec();
            let prefix = self.nodes[node.index()]
                .router
                .seen
                .get(&rrep.rreq_id)
                .and_then(|s| s.prefixes.get(&key).copied());
            if let Some(prefix) = prefix {
                match recover_cost_index(total, prefix) {
                    Ok(cost) => self.nodes[node.index()].router.cost_log.push((rrep.rreq_id, cost)),
                    Err(_) => self.stats.cost_corrupt += 1,
                }
            }
        }
        let next = rrep.route[pos - 1];
        self.mac_enqueue(node, Packet::Rrep(rrep), Some(next));
    }

    fn on_rrep_at_source(&mut self, node: NodeId, rrep: RrepPacket) {
        let now = self.engine.now();
        let flow = rrep.flow;
        if flow.index() >= self.flows.len() || self.flows[flow.index()].cfg.source != node {
            self.stats.stale_rreps += 1;
            return;
        }
        if self.flows[flow.index()].routing.current_rreq != Some(rrep.rreq_id) {
            self.stats.stale_rreps += 1;
            return;
        }
        match self.cfg.protocol {
            Protocol::Carp => match rrep.measured_d_avg {
                None => {
                    let entry =
                        RrepTableEntry::new(rrep.route, rrep.route_total_weight.unwrap_or(0.0), now);
                    let f = &mut self.flows[flow.index()];
                    if f.routing.table.iter().any(|e| e.path == entry.path) {
                        return;
                    }
                    f.routing.table.push(entry);
                    let discovering = matches!(f.routing.phase, FlowPhase::Discovering);
                    if discovering && !f.routing.probe_wait_scheduled {
                        f.routing.probe_wait_scheduled = true;
                        self.engine
                            .schedule_in(
                                self.cfg.tuning.rrep_wait,
                                EventKind::Timer(TimerKind::ProbeStart(flow)),
                                node,
                            )
                            .expect("probe start in the future");
                    }
                }
                Some(d_avg) => {
                    let probe = rrep.probe;
                    if self.flows[flow.index()].routing.probing != probe {
                        self.stats.stale_rreps += 1;
                        return;
                    }
                    self.admit_or_backoff(flow, rrep.route, d_avg);
                }
            },
            Protocol::Aomdv => {
                let route = rrep.route;
                if !self.route_alive_now(&route) {
                    self.stats.install_stale += 1;
                    return;
                }
                let f = &mut self.flows[flow.index()];
                if f.routing.routes.iter().any(|r| r.path == route) {
                    return;
                }
                let hops = (route.len() - 1) as u32;
                let entry = RouteEntry::from_path(route, f64::from(hops));
                f.routing.routes.push(entry.clone());
                match &f.routing.phase {
                    FlowPhase::Discovering | FlowPhase::Idle => {
                        f.routing.phase = FlowPhase::Active {
                            current: entry.clone(),
                        };
                        self.trace
                            .protocol_event(now, node, TraceKind::RouteInstall, flow, &entry.path);
                        self.drain_pending(flow);
                    }
                    FlowPhase::Active { current } => {
                        if entry.hop_count < current.hop_count {
                            let path = entry.path.clone();
                            f.routing.phase = FlowPhase::Active { current: entry };
                            self.trace
                                .protocol_event(now, node, TraceKind::RouteInstall, flow, &path);
                        }
                    }
                }
            }
        }
    }

    /// Installed routes must be intact at installation time.
    fn route_alive_now(&self, path: &[NodeId]) -> bool {
        let now = self.engine.now();
        path.windows(2).all(|w| self.world.in_range(w[0], w[1], now))
    }

    /// Launches the probe of the best alive unprobed candidate, or fails the
    /// discovery when the table is exhausted.
    pub(crate) fn on_probe_start(&mut self, flow: FlowId) {
        let now = self.engine.now();
        {
            let f = &self.flows[flow.index()];
            if !matches!(f.routing.phase, FlowPhase::Discovering) || f.routing.probing.is_some() {
                return;
            }
        }
        let best_idx = {
            let f = &self.flows[flow.index()];
            let mut order: Vec<usize> = (0..f.routing.table.len())
                .filter(|i| {
                    let e = &f.routing.table[*i];
                    !e.dead && e.state == ProbeState::Unprobed
                })
                .collect();
            order.sort_by(|&a, &b| {
                let (ea, eb) = (&f.routing.table[a], &f.routing.table[b]);
                eb.total_weight
                    .total_cmp(&ea.total_weight)
                    .then(ea.hop_count.cmp(&eb.hop_count))
                    .then(ea.path.cmp(&eb.path))
            });
            order.first().copied()
        };
        let Some(idx) = best_idx else {
            self.discovery_failed(flow);
            return;
        };
        let (path, rreq_id, probe, stream_len, src) = {
            let f = &mut self.flows[flow.index()];
            f.routing.table[idx].advance(ProbeState::Probing);
            f.routing.probe_counter += 1;
            let probe = f.routing.probe_counter;
            f.routing.probing = Some(probe);
            let entry = &f.routing.table[idx];
            (
                entry.path.clone(),
                f.routing.current_rreq.expect("discovery has a request id"),
                probe,
                2 * entry.hop_count,
                f.cfg.source,
            )
        };
        // Probe the route with a stream of 2H data-shaped packets.
        let size = self.cfg.pkt_size;
        for idx_in_stream in 0..stream_len {
            let dummy = DummyPacket {
                flow,
                rreq_id,
                probe,
                idx: idx_in_stream,
                stream_len,
                sent_at: now,
                path: path.clone(),
                size,
            };
            self.mac_enqueue(src, Packet::Dummy(dummy), Some(path[1]));
        }
        self.engine
            .schedule_in(
                self.cfg.tuning.probe_timeout,
                EventKind::Timer(TimerKind::ProbeTimeout(flow, probe)),
                src,
            )
            .expect("probe timeout in the future");
    }

    pub(crate) fn on_dummy(&mut self, node: NodeId, dummy: DummyPacket, _from: NodeId) {
        let now = self.engine.now();
        let Some(pos) = dummy.path.iter().position(|n| *n == node) else {
            return;
        };
        if pos + 1 < dummy.path.len() {
            let next = dummy.path[pos + 1];
            self.mac_enqueue(node, Packet::Dummy(dummy), Some(next));
            return;
        }
        // Destination: record the delay; reply once the stream is complete
        // or the collection window closes.
        let key = (dummy.flow, dummy.probe);
        let window = self.cfg.tuning.dummy_collect_window;
        let is_new = !self.nodes[node.index()].router.dummy.contains_key(&key);
        {
            let dc = self.nodes[node.index()]
                .router
                .dummy
                .entry(key)
                .or_insert_with(|| DummyCollect {
                    rreq_id: dummy.rreq_id,
                    path: dummy.path.clone(),
                    delays: Vec::new(),
                    expected: dummy.stream_len,
                    replied: false,
                });
            dc.delays.push(now.since(dummy.sent_at));
        }
        if is_new {
            self.engine
                .schedule_in(
                    window,
                    EventKind::Timer(TimerKind::DummyReply(dummy.flow, dummy.probe)),
                    node,
                )
                .expect("dummy reply window in the future");
        }
        let complete = {
            let dc = &self.nodes[node.index()].router.dummy[&key];
            !dc.replied && dc.delays.len() as u32 >= dc.expected
        };
        if complete {
            self.send_measured_rrep(node, dummy.flow, dummy.probe);
        }
    }

    pub(crate) fn on_dummy_reply_window(&mut self, node: NodeId, flow: FlowId, probe: u32) {
        let ready = {
            match self.nodes[node.index()].router.dummy.get(&(flow, probe)) {
                Some(dc) => !dc.replied && !dc.delays.is_empty(),
                None => false,
            }
        };
        if ready {
            self.send_measured_rrep(node, flow, probe);
        }
    }

    fn send_measured_rrep(&mut self, node: NodeId, flow: FlowId, probe: u32) {
        let (rreq_id, route, mean) = {
            let dc = self.nodes[node.index()]
                .router
                .dummy
                .get_mut(&(flow, probe))
                .expect("collect state exists");
            dc.replied = true;
            let mean = dc.delays.iter().sum::<f64>() / dc.delays.len() as f64;
            (dc.rreq_id, dc.path.clone(), mean)
        };
        let rrep = RrepPacket {
            rreq_id,
            flow,
            route,
            route_total_weight: None,
            measured_d_avg: Some(mean),
            probe: Some(probe),
        };
        self.send_rrep(node, rrep);
    }

    /// Admits the probed route when its measured delay fits the bound, else
    /// rejects it and schedules the next probe after a linear back-off.
    fn admit_or_backoff(&mut self, flow: FlowId, route: Vec<NodeId>, d_avg: f64) {
        let now = self.engine.now();
        let bound = self.cfg.tuning.delay_bound;
        let (src, idx) = {
            let f = &self.flows[flow.index()];
            let idx = f
                .routing
                .table
                .iter()
                .position(|e| e.state == ProbeState::Probing && e.path == route);
            (f.cfg.source, idx)
        };
        let Some(idx) = idx else { return };
        self.flows[flow.index()].routing.probing = None;
        self.flows[flow.index()].routing.table[idx].d_avg = Some(d_avg);
        if d_avg <= bound {
            self.flows[flow.index()].routing.table[idx].advance(ProbeState::Admitted);
            if !self.route_alive_now(&route) {
                self.stats.install_stale += 1;
                self.flows[flow.index()].routing.table[idx].dead = true;
                self.on_probe_start(flow);
                return;
            }
            let score = self.flows[flow.index()].routing.table[idx].total_weight;
            let entry = RouteEntry::from_path(route, score);
            let path = entry.path.clone();
            self.flows[flow.index()].routing.phase = FlowPhase::Active { current: entry };
            self.trace
                .protocol_event(now, src, TraceKind::RouteInstall, flow, &path);
            self.drain_pending(flow);
        } else {
            self.flows[flow.index()].routing.table[idx].advance(ProbeState::Rejected);
            let f = &mut self.flows[flow.index()];
            f.routing.rejections += 1;
            let wait = f.routing.rejections as f64 * self.cfg.tuning.backoff_quantum;
            self.engine
                .schedule_in(wait, EventKind::Timer(TimerKind::ProbeStart(flow)), src)
                .expect("backoff probe in the future");
        }
    }

    pub(crate) fn on_probe_timeout(&mut self, flow: FlowId, probe: u32) {
        {
            let f = &mut self.flows[flow.index()];
            if f.routing.probing != Some(probe) {
                return;
            }
            f.routing.probing = None;
            if let Some(e) = f
                .routing
                .table
                .iter_mut()
                .find(|e| e.state == ProbeState::Probing)
            {
                e.advance(ProbeState::Rejected);
            }
        }
        // A silent route is dead, not congested: move on without back-off.
        self.on_probe_start(flow);
    }

    pub(crate) fn on_discovery_timeout(&mut self, flow: FlowId, rreq_seq: u32) {
        let f = &self.flows[flow.index()];
        let matches_gen = f
            .routing
            .current_rreq
            .map(|id| id.seq == rreq_seq)
            .unwrap_or(false);
        if !matches_gen || !matches!(f.routing.phase, FlowPhase::Discovering) {
            return;
        }
        let nothing_heard = match self.cfg.protocol {
            Protocol::Carp => f.routing.table.is_empty() && f.routing.probing.is_none(),
            Protocol::Aomdv => f.routing.routes.is_empty(),
        };
        if nothing_heard {
            self.discovery_failed(flow);
        }
    }

    fn discovery_failed(&mut self, flow: FlowId) {
        let f = &mut self.flows[flow.index()];
        let lost = f.routing.pending.len() as u64;
        f.routing.pending.clear();
        self.stats.dropped_data += lost;
        self.stats.drop_discovery += lost;
        f.routing.phase = FlowPhase::Idle;
        f.routing.current_rreq = None;
        f.routing.probing = None;
    }

    fn drain_pending(&mut self, flow: FlowId) {
        loop {
            let (pkt, next, src) = {
                let f = &mut self.flows[flow.index()];
                let Some(mut pkt) = f.routing.pending.pop_front() else {
                    return;
                };
                let FlowPhase::Active { current } = &f.routing.phase else {
                    return;
                };
                pkt.path = current.path.clone();
                (pkt, current.next_hop, f.cfg.source)
            };
            self.mac_enqueue(src, Packet::Data(pkt), Some(next));
        }
    }

    /// Data packet arrived at `node`: deliver or forward along its path.
    pub(crate) fn on_data(&mut self, node: NodeId, pkt: DataPacket, _from: NodeId) {
        let now = self.engine.now();
        if *pkt.path.last().unwrap() == node {
            self.stats.received_data += 1;
            self.stats.delays.push(now.since(pkt.origin_time));
            return;
        }
        let Some(pos) = pkt.path.iter().position(|n| *n == node) else {
            self.stats.dropped_data += 1;
            self.stats.drop_misroute += 1;
            return;
        };
        let next = pkt.path[pos + 1];
        self.nodes[node.index()]
            .router
            .active_paths
            .insert(pkt.flow, pkt.path.clone());
        self.mac_enqueue(node, Packet::Data(pkt), Some(next));
    }

    /// MAC retry exhaustion toward `next_hop`: drop accounting plus breakage
    /// notification for every flow known to route through the dead edge.
    pub(crate) fn on_retry_exhausted(&mut self, node: NodeId, next_hop: NodeId, packet: Packet) {
        match &packet {
            Packet::Data(_) => {
                self.stats.dropped_data += 1;
                self.stats.drop_retry += 1;
            }
            Packet::Rrep(_) => self.stats.rrep_dropped += 1,
            _ => {}
        }
        self.handle_link_failure(node, next_hop);
    }

    /// Invalidates routes through the broken edge and notifies affected
    /// upstream sources along the recorded paths.
    pub(crate) fn handle_link_failure(&mut self, node: NodeId, next_hop: NodeId) {
        let _now = self.engine.now();
        // Flows sourced at this node react immediately.
        let local: Vec<FlowId> = self
            .flows
            .iter()
            .filter(|f| f.cfg.source == node)
            .map(|f| f.cfg.id)
            .collect();
        for flow in local {
            self.route_broken_at_source(flow, node, next_hop);
        }
        // Flows forwarded through this node get a route-error notice sent
        // back along the recorded path.
        let affected: Vec<(FlowId, Vec<NodeId>)> = self.nodes[node.index()]
            .router
            .active_paths
            .iter()
            .filter(|(_, path)| path_uses_edge(path, node, next_hop))
            .map(|(f, p)| (*f, p.clone()))
            .collect();
        for (flow, path) in affected {
            self.nodes[node.index()].router.active_paths.remove(&flow);
            let Some(pos) = path.iter().position(|n| *n == node) else {
                continue;
            };
            if pos == 0 {
                continue; // own flow, handled above
            }
            let mut reverse: Vec<NodeId> = path[..=pos].to_vec();
            reverse.reverse();
            let rerr = RerrPacket {
                flow,
                broken_from: node,
                broken_to: next_hop,
                reverse_path: reverse.clone(),
            };
            self.mac_enqueue(node, Packet::Rerr(rerr), Some(reverse[1]));
        }
    }

    pub(crate) fn on_rerr(&mut self, node: NodeId, rerr: RerrPacket, _from: NodeId) {
        let Some(pos) = rerr.reverse_path.iter().position(|n| *n == node) else {
            return;
        };
        if pos + 1 < rerr.reverse_path.len() {
            let next = rerr.reverse_path[pos + 1];
            self.mac_enqueue(node, Packet::Rerr(rerr), Some(next));
            return;
        }
        // Reached the affected source.
        let flow = rerr.flow;
        if flow.index() < self.flows.len() && self.flows[flow.index()].cfg.source == node {
            self.route_broken_at_source(flow, rerr.broken_from, rerr.broken_to);
        }
    }

    /// Source-side reaction to a broken edge: switch to another admitted
    /// candidate, re-probe a spare reply, or fall back to rediscovery on the
    /// next data packet.
    fn route_broken_at_source(&mut self, flow: FlowId, a: NodeId, b: NodeId) {
        let now = self.engine.now();
        let (src, uses) = {
            let f = &self.flows[flow.index()];
            let uses = match &f.routing.phase {
                FlowPhase::Active { current } => current.path.windows(2).any(|w| w[0] == a && w[1] == b),
                _ => false,
            };
            (f.cfg.source, uses)
        };
        match self.cfg.protocol {
            Protocol::Carp => {
                for e in &mut self.flows[flow.index()].routing.table {
                    if e.uses_edge(a, b) {
                        e.dead = true;
                    }
                }
                if !uses {
                    return;
                }
                // Another admitted, still-live candidate wins first.
                let switch = {
                    let f = &self.flows[flow.index()];
                    let alive: Vec<&RrepTableEntry> = f
                        .routing
                        .table
                        .iter()
                        .filter(|e| e.state == ProbeState::Admitted && !e.dead)
                        .collect();
                    select_route(&alive).map(|e| (e.path.clone(), e.total_weight))
                };
                if let Some((path, score)) = switch {
                    if self.route_alive_now(&path) {
                        let entry = RouteEntry::from_path(path.clone(), score);
                        self.flows[flow.index()].routing.phase =
                            FlowPhase::Active { current: entry };
                        self.trace
                            .protocol_event(now, src, TraceKind::RouteInstall, flow, &path);
                        return;
                    }
                }
                let has_spares = self.flows[flow.index()]
                    .routing
                    .table
                    .iter()
                    .any(|e| !e.dead && e.state == ProbeState::Unprobed);
                if has_spares {
                    let f = &mut self.flows[flow.index()];
                    f.routing.phase = FlowPhase::Discovering;
                    f.routing.rejections = 0;
                    self.on_probe_start(flow);
                } else {
                    let f = &mut self.flows[flow.index()];
                    f.routing.phase = FlowPhase::Idle;
                    f.routing.current_rreq = None;
                }
            }
            Protocol::Aomdv => {
                let f = &mut self.flows[flow.index()];
                f.routing.routes.retain(|r| !path_uses_edge(&r.path, a, b));
                if !uses {
                    return;
                }
                let next = best_min_hop(&f.routing.routes).cloned();
                match next {
                    Some(entry) => {
                        let path = entry.path.clone();
                        f.routing.phase = FlowPhase::Active { current: entry };
                        self.trace
                            .protocol_event(now, src, TraceKind::RouteInstall, flow, &path);
                    }
                    None => {
                        f.routing.phase = FlowPhase::Idle;
                        f.routing.current_rreq = None;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &[u32], weight: f64) -> RrepTableEntry {
        RrepTableEntry::new(
            path.iter().map(|n| NodeId(*n)).collect(),
            weight,
            SimTime::ZERO,
        )
    }

    #[test]
    fn select_route_prefers_higher_score() {
        let a = entry(&[0, 1, 2, 3], 31.6);
        let b = entry(&[0, 4, 3], 12.4);
        let candidates = [&a, &b];
        let picked = select_route(&candidates).unwrap();
        assert_eq!(picked.total_weight, 31.6);
    }

    #[test]
    fn select_route_breaks_ties_by_hops_then_path() {
        let three_hops = entry(&[0, 1, 2, 3], 10.0);
        let four_hops = entry(&[0, 4, 5, 6, 3], 10.0);
        assert_eq!(
            select_route(&[&four_hops, &three_hops]).unwrap().hop_count,
            3
        );

        let lex_small = entry(&[0, 1, 3], 10.0);
        let lex_large = entry(&[0, 2, 3], 10.0);
        assert_eq!(
            select_route(&[&lex_large, &lex_small]).unwrap().path,
            lex_small.path
        );
    }

    #[test]
    fn select_route_singleton() {
        let only = entry(&[0, 1], 1.0);
        assert_eq!(select_route(&[&only]).unwrap().path, only.path);
    }

    #[test]
    fn route_entry_derives_next_hop_from_path() {
        let r = RouteEntry::from_path(vec![NodeId(0), NodeId(5), NodeId(9)], 2.5);
        assert_eq!(r.next_hop, NodeId(5));
        assert_eq!(r.destination, NodeId(9));
        assert_eq!(r.hop_count, 2);
    }

    #[test]
    fn probe_state_moves_forward_only() {
        let mut e = entry(&[0, 1, 2], 1.0);
        e.advance(ProbeState::Probing);
        e.advance(ProbeState::Admitted);
    }

    #[test]
    #[should_panic]
    fn probe_state_cannot_go_backward() {
        let mut e = entry(&[0, 1, 2], 1.0);
        e.advance(ProbeState::Probing);
        e.advance(ProbeState::Rejected);
        e.advance(ProbeState::Probing);
    }

    #[test]
    fn edge_matching_is_directional_and_consecutive() {
        let path = vec![NodeId(0), NodeId(1), NodeId(2)];
        assert!(path_uses_edge(&path, NodeId(0), NodeId(1)));
        assert!(path_uses_edge(&path, NodeId(1), NodeId(2)));
        assert!(!path_uses_edge(&path, NodeId(1), NodeId(0)));
        assert!(!path_uses_edge(&path, NodeId(0), NodeId(2)));
    }

    #[test]
    fn min_hop_selection() {
        let routes = vec![
            RouteEntry::from_path(vec![NodeId(0), NodeId(1), NodeId(2), NodeId(9)], 3.0),
            RouteEntry::from_path(vec![NodeId(0), NodeId(3), NodeId(9)], 2.0),
        ];
        assert_eq!(best_min_hop(&routes).unwrap().hop_count, 2);
    }
}
