//! One scenario run: wires the engine, world, channel, per-node MAC and
//! metric state, and per-flow routing state together and dispatches events.

use thiserror::Error;

use crate::engine::config::ConfigError;
use crate::engine::{
    ChannelEvent, Engine, EngineError, EventKind, FlowId, NodeId, RngLabel, ScenarioConfig,
    SimTime, TimerKind,
};
use crate::experiment::{draw_flows, CbrFlow, RunStats};
use crate::mac::{Channel, MacState, MacTimings};
use crate::metrics::{MetricDefaults, NodeMetrics};
use crate::routing::{DataPacket, FlowRouting, Packet, RouterNode};
use crate::trace::{TraceKind, TraceLog};
use crate::world::World;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("packet conservation violated: sent {sent} != received {received} + dropped {dropped} + in-flight {in_flight}")]
    Conservation {
        sent: u64,
        received: u64,
        dropped: u64,
        in_flight: u64,
    },
}

/// Which traces a run should collect.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub trace_events: bool,
    pub trace_metrics: bool,
    pub trace_placement: bool,
}

/// Per-node simulation state.
#[derive(Debug)]
pub struct NodeCtx {
    pub mac: MacState,
    pub metrics: NodeMetrics,
    pub router: RouterNode,
}

/// Per-flow simulation state: traffic schedule plus source-side routing.
#[derive(Debug)]
pub struct FlowCtx {
    pub cfg: CbrFlow,
    pub routing: FlowRouting,
    pub next_tick: u64,
    pub data_seq: u32,
}

/// A fully assembled scenario run. Single-threaded; owns all state.
pub struct Simulation {
    pub cfg: ScenarioConfig,
    pub engine: Engine,
    pub world: World,
    pub channel: Channel,
    pub nodes: Vec<NodeCtx>,
    pub flows: Vec<FlowCtx>,
    pub stats: RunStats,
    pub trace: TraceLog,
    pub timings: MacTimings,
    pub defaults: MetricDefaults,
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig, opts: RunOptions) -> Result<Simulation, RunError> {
        cfg.validate()?;
        let mut engine = Engine::new(cfg.seed);
        let timings = MacTimings::from_config(&cfg);
        let defaults = MetricDefaults::from_config(&cfg);

        let (world, rates, flow_cfgs) = {
            let streams = engine.streams();
            let world = World::new(&cfg, streams.topology, streams.mobility);
            let rates: Vec<f64> = match &cfg.tuning.rate_classes {
                None => vec![cfg.rate; cfg.nodes as usize],
                Some(classes) => (0..cfg.nodes)
                    .map(|_| {
                        use rand::Rng;
                        classes[streams.topology.gen_range(0..classes.len())]
                    })
                    .collect(),
            };
            let flow_cfgs = draw_flows(&cfg, streams.traffic);
            (world, rates, flow_cfgs)
        };

        let nodes = (0..cfg.nodes as usize)
            .map(|i| NodeCtx {
                mac: MacState::new(cfg.tuning.queue_capacity, cfg.tuning.cw_min, rates[i]),
                metrics: NodeMetrics::new(&cfg),
                router: RouterNode::default(),
            })
            .collect();

        let flows: Vec<FlowCtx> = flow_cfgs
            .into_iter()
            .map(|f| FlowCtx {
                cfg: f,
                routing: FlowRouting::default(),
                next_tick: 0,
                data_seq: 0,
            })
            .collect();

        let trace = TraceLog::new(opts.trace_events, opts.trace_metrics, opts.trace_placement);
        let mut sim = Simulation {
            cfg,
            engine,
            world,
            channel: Channel::new(),
            nodes,
            flows,
            stats: RunStats::default(),
            trace,
            timings,
            defaults,
        };
        sim.schedule_initial_events()?;
        Ok(sim)
    }

    fn schedule_initial_events(&mut self) -> Result<(), EngineError> {
        for n in 0..self.world.len() as u32 {
            let node = NodeId(n);
            self.engine
                .schedule(self.world.next_boundary(node), EventKind::Waypoint, node)?;
        }
        for i in 0..self.flows.len() {
            let f = &self.flows[i];
            if f.cfg.start <= f.cfg.stop {
                self.engine.schedule(
                    SimTime::from_secs(f.cfg.start),
                    EventKind::TrafficTick(f.cfg.id),
                    f.cfg.source,
                )?;
            }
        }
        if self.trace.collect_placement {
            self.sample_placement();
            self.engine.schedule(
                SimTime::from_secs(1.0),
                EventKind::Timer(TimerKind::PlacementSample),
                NodeId(0),
            )?;
        }
        Ok(())
    }

    /// Runs the scenario to its configured end and finalizes statistics.
    pub fn run(&mut self) -> Result<(), RunError> {
        let t_end = SimTime::from_secs(self.cfg.sim_time);
        while let Some(ev) = self.engine.pop_due(t_end) {
            self.dispatch(ev.kind, ev.target);
        }
        self.engine.finish(t_end)?;
        self.finalize()
    }

    fn dispatch(&mut self, kind: EventKind, target: NodeId) {
        match kind {
            EventKind::Channel(ChannelEvent::MacAttempt) => self.on_mac_attempt(target),
            EventKind::Channel(ChannelEvent::RtsResolve(tx)) => self.on_rts_resolve(tx),
            EventKind::Channel(ChannelEvent::BroadcastEnd(tx)) => self.on_broadcast_end(tx),
            EventKind::Channel(ChannelEvent::ExchangeEnd(tx)) => self.on_exchange_end(tx),
            EventKind::Waypoint => self.on_waypoint(target),
            EventKind::TrafficTick(flow) => self.on_traffic_tick(flow),
            EventKind::Timer(TimerKind::ReplyWindow(rreq)) => self.on_reply_window(target, rreq),
            EventKind::Timer(TimerKind::DiscoveryTimeout(flow, gen)) => {
                self.on_discovery_timeout(flow, gen)
            }
            EventKind::Timer(TimerKind::ProbeStart(flow)) => self.on_probe_start(flow),
            EventKind::Timer(TimerKind::ProbeTimeout(flow, probe)) => {
                self.on_probe_timeout(flow, probe)
            }
            EventKind::Timer(TimerKind::DummyReply(flow, probe)) => {
                self.on_dummy_reply_window(target, flow, probe)
            }
            EventKind::Timer(TimerKind::PlacementSample) => {
                self.sample_placement();
                let next = self.engine.now().after(1.0);
                if next.secs() <= self.cfg.sim_time {
                    let _ = self
                        .engine
                        .schedule(next, EventKind::Timer(TimerKind::PlacementSample), NodeId(0));
                }
            }
        }
    }

    fn on_waypoint(&mut self, node: NodeId) {
        let now = self.engine.now();
        let next = self
            .world
            .advance(node, now, self.engine.rng(RngLabel::Mobility));
        self.engine
            .schedule(next, EventKind::Waypoint, node)
            .expect("next mobility boundary is in the future");
        if self.trace.collect_placement {
            let p = self.world.position(node, now);
            self.trace.placement_row(node, now, p.x, p.y);
        }
    }

    fn on_traffic_tick(&mut self, flow: FlowId) {
        let now = self.engine.now();
        let pkt = {
            let f = &mut self.flows[flow.index()];
            f.data_seq += 1;
            let pkt = DataPacket {
                flow,
                seq: f.data_seq,
                origin_time: now,
                path: Vec::new(),
                size: f.cfg.packet_size,
            };
            pkt
        };
        self.stats.sent_data += 1;
        self.route_data(flow, pkt);

        let f = &mut self.flows[flow.index()];
        f.next_tick += 1;
        let t_next = f.cfg.start + f.next_tick as f64 * f.cfg.interval;
        if t_next <= f.cfg.stop {
            let id = f.cfg.id;
            let src = f.cfg.source;
            self.engine
                .schedule(SimTime::from_secs(t_next), EventKind::TrafficTick(id), src)
                .expect("next tick is in the future");
        }
    }

    fn sample_placement(&mut self) {
        let now = self.engine.now();
        for n in 0..self.world.len() as u32 {
            let p = self.world.position(NodeId(n), now);
            self.trace.placement_row(NodeId(n), now, p.x, p.y);
        }
    }

    /// Routes a packet that reached `node` to the proper protocol handler.
    pub(crate) fn deliver_packet(&mut self, node: NodeId, packet: Packet, from: NodeId) {
        let now = self.engine.now();
        match packet {
            Packet::Rreq(rreq) => {
                // Broadcast reception carries a measurable signal.
                if let Ok(p_r) = self.world.link_power(from, node, now) {
                    let _ = self.nodes[node.index()]
                        .metrics
                        .update_link_quality(from, p_r, now);
                }
                self.trace
                    .protocol_event(now, node, TraceKind::RreqRx, rreq.flow, &rreq.path);
                self.on_rreq(node, rreq, from);
            }
            Packet::Rrep(rrep) => {
                self.trace
                    .protocol_event(now, node, TraceKind::RrepRx, rrep.flow, &rrep.route);
                self.on_rrep(node, rrep, from);
            }
            Packet::Dummy(dummy) => {
                self.trace
                    .protocol_event(now, node, TraceKind::DummyRx, dummy.flow, &dummy.path);
                self.on_dummy(node, dummy, from);
            }
            Packet::Rerr(rerr) => self.on_rerr(node, rerr, from),
            Packet::Data(data) => self.on_data(node, data, from),
        }
    }

    /// Counts one control transmission at first channel access and emits the
    /// matching trace event. Data packets pass through untouched.
    pub(crate) fn count_ctrl_tx(&mut self, node: NodeId, packet: &Packet) {
        let now = self.engine.now();
        let t = &self.cfg.tuning;
        match packet {
            Packet::Rreq(r) => {
                self.stats.ctrl_packets += 1;
                self.stats.rreq_tx += 1;
                self.stats.weight_bytes_tx += u64::from(packet.weight_bytes(t));
                self.trace
                    .protocol_event(now, node, TraceKind::RreqTx, r.flow, &r.path);
            }
            Packet::Rrep(r) => {
                self.stats.ctrl_packets += 1;
                self.stats.rrep_tx += 1;
                self.stats.weight_bytes_tx += u64::from(packet.weight_bytes(t));
                self.trace
                    .protocol_event(now, node, TraceKind::RrepTx, r.flow, &r.route);
            }
            Packet::Dummy(d) => {
                self.stats.ctrl_packets += 1;
                self.stats.dummy_tx += 1;
                self.trace
                    .protocol_event(now, node, TraceKind::DummyTx, d.flow, &d.path);
            }
            Packet::Rerr(r) => {
                self.stats.ctrl_packets += 1;
                self.stats.rerr_tx += 1;
                self.trace
                    .protocol_event(now, node, TraceKind::Rerr, r.flow, &r.reverse_path);
            }
            Packet::Data(_) => {}
        }
    }

    /// Data packets still alive somewhere in the system at a given moment:
    /// MAC queues, pending buffers, and in-air channel records.
    pub fn data_in_flight(&self) -> u64 {
        let queued: u64 = self
            .nodes
            .iter()
            .map(|n| n.mac.iter_queue().filter(|e| e.packet.is_data()).count() as u64)
            .sum();
        let pending: u64 = self
            .flows
            .iter()
            .map(|f| f.routing.pending.len() as u64)
            .sum();
        let in_air: u64 = self
            .channel
            .iter()
            .filter(|r| r.packet.as_ref().map(Packet::is_data).unwrap_or(false))
            .count() as u64;
        queued + pending + in_air
    }

    fn finalize(&mut self) -> Result<(), RunError> {
        let in_flight = self.data_in_flight();
        self.stats.in_flight_end = in_flight;
        let accounted = self.stats.received_data + self.stats.dropped_data + in_flight;
        if self.stats.sent_data != accounted {
            return Err(RunError::Conservation {
                sent: self.stats.sent_data,
                received: self.stats.received_data,
                dropped: self.stats.dropped_data,
                in_flight,
            });
        }
        Ok(())
    }
}
