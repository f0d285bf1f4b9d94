//! Deterministic discrete-event kernel: virtual clock, ordered event queue,
//! and named pseudo-random streams derived from one scenario seed.

pub mod config;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{Protocol, ScenarioConfig};

/// Identifies a mobile node within one scenario run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Identifies a CBR flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowId(pub u32);

impl FlowId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

/// Route-discovery identifier: originating node plus a per-origin sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RreqId {
    pub origin: NodeId,
    pub seq: u32,
}

/// Identifies one channel transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxId(pub u64);

/// Virtual time in seconds. Non-negative and finite by construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Builds a time value, panicking on NaN/negative input. Event times come
    /// from config and bounded arithmetic, so a violation is a programming
    /// fault, not a runtime condition.
    pub fn from_secs(s: f64) -> SimTime {
        assert!(s.is_finite() && s >= 0.0, "invalid sim time {s}");
        SimTime(s)
    }

    pub fn secs(self) -> f64 {
        self.0
    }

    pub fn after(self, dt: f64) -> SimTime {
        SimTime::from_secs(self.0 + dt)
    }

    /// Seconds elapsed since `earlier`.
    pub fn since(self, earlier: SimTime) -> f64 {
        self.0 - earlier.0
    }
}

impl Eq for SimTime {}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

/// Channel-level happenings (the packet-delivery family).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelEvent {
    /// A node's access timer fired; it may start transmitting.
    MacAttempt,
    /// An RTS finished; decide collision vs. exchange setup.
    RtsResolve(TxId),
    /// A broadcast transmission finished; deliver to hearers.
    BroadcastEnd(TxId),
    /// A full RTS/CTS/DATA/ACK exchange finished; deliver to the receiver.
    ExchangeEnd(TxId),
}

/// Protocol and measurement timers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    /// Destination-side RREQ collection window closed.
    ReplyWindow(RreqId),
    /// Source-side guard: discovery with no replies at all.
    DiscoveryTimeout(FlowId, u32),
    /// Source may launch the next route probe.
    ProbeStart(FlowId),
    /// A probe produced no measured reply in time.
    ProbeTimeout(FlowId, u32),
    /// Destination-side probe collection window closed.
    DummyReply(FlowId, u32),
    /// Periodic position sampling for the placement dump.
    PlacementSample,
}

/// What a scheduled event does when it fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Channel(ChannelEvent),
    Timer(TimerKind),
    /// A node reached its waypoint or finished pausing.
    Waypoint,
    /// A CBR source emits its next data packet.
    TrafficTick(FlowId),
}

impl EventKind {
    /// Stable descriptor used in error messages and event accounting.
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Channel(_) => "packet-delivery",
            EventKind::Timer(_) => "timer",
            EventKind::Waypoint => "mobility-waypoint",
            EventKind::TrafficTick(_) => "traffic-tick",
        }
    }
}

/// A time-stamped, sequence-ordered unit of simulation work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimEvent {
    pub fire_at: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub target: NodeId,
}

/// Heap adapter: min-order on (fire_at, seq).
#[derive(Debug)]
struct QueuedEvent(SimEvent);

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.0.fire_at == other.0.fire_at && self.0.seq == other.0.seq
    }
}

impl Eq for QueuedEvent {}

impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so BinaryHeap pops the earliest (fire_at, seq) first.
        (other.0.fire_at, other.0.seq).cmp(&(self.0.fire_at, self.0.seq))
    }
}

/// Named pseudo-random streams, each independently derived from the scenario
/// seed so a change in one subsystem's draw pattern leaves the others intact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngLabel {
    Mobility,
    Traffic,
    MacBackoff,
    Topology,
}

impl RngLabel {
    pub const ALL: [RngLabel; 4] = [
        RngLabel::Mobility,
        RngLabel::Traffic,
        RngLabel::MacBackoff,
        RngLabel::Topology,
    ];

    fn stream(self) -> u64 {
        match self {
            RngLabel::Mobility => 1,
            RngLabel::Traffic => 2,
            RngLabel::MacBackoff => 3,
            RngLabel::Topology => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RngLabel::Mobility => "mobility",
            RngLabel::Traffic => "traffic",
            RngLabel::MacBackoff => "mac-backoff",
            RngLabel::Topology => "topology",
        }
    }
}

impl FromStr for RngLabel {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mobility" => Ok(RngLabel::Mobility),
            "traffic" => Ok(RngLabel::Traffic),
            "mac-backoff" => Ok(RngLabel::MacBackoff),
            "topology" => Ok(RngLabel::Topology),
            other => Err(EngineError::UnknownRngLabel(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("cannot schedule {kind} event at t={at:.9}: clock already at t={clock:.9}")]
    SchedulePast {
        kind: &'static str,
        at: f64,
        clock: f64,
    },
    #[error("cannot run to t={to:.9}: clock already at t={clock:.9}")]
    RunPast { to: f64, clock: f64 },
    #[error("unknown rng stream label `{0}` (expected mobility|traffic|mac-backoff|topology)")]
    UnknownRngLabel(String),
}

/// The event kernel. One instance per scenario run; never shared.
#[derive(Debug)]
pub struct Engine {
    clock: SimTime,
    next_seq: u64,
    queue: BinaryHeap<QueuedEvent>,
    seed: u64,
    rngs: [ChaCha8Rng; 4],
}

impl Engine {
    pub fn new(seed: u64) -> Engine {
        let make = |label: RngLabel| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(label.stream());
            rng
        };
        Engine {
            clock: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            seed,
            rngs: [
                make(RngLabel::Mobility),
                make(RngLabel::Traffic),
                make(RngLabel::MacBackoff),
                make(RngLabel::Topology),
            ],
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Enqueues an event. Scheduling in the past is a programming fault and
    /// is rejected with a hard error naming the event kind.
    pub fn schedule(
        &mut self,
        fire_at: SimTime,
        kind: EventKind,
        target: NodeId,
    ) -> Result<(), EngineError> {
        if fire_at < self.clock {
            return Err(EngineError::SchedulePast {
                kind: kind.name(),
                at: fire_at.secs(),
                clock: self.clock.secs(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(QueuedEvent(SimEvent {
            fire_at,
            seq,
            kind,
            target,
        }));
        Ok(())
    }

    /// Convenience: schedule `dt` seconds after the current clock.
    pub fn schedule_in(
        &mut self,
        dt: f64,
        kind: EventKind,
        target: NodeId,
    ) -> Result<(), EngineError> {
        self.schedule(self.clock.after(dt), kind, target)
    }

    /// Pops the next event due at or before `t_end`, advancing the clock to
    /// its fire time. Returns `None` once nothing remains in the window.
    pub fn pop_due(&mut self, t_end: SimTime) -> Option<SimEvent> {
        match self.queue.peek() {
            Some(q) if q.0.fire_at <= t_end => {
                let ev = self.queue.pop().unwrap().0;
                debug_assert!(ev.fire_at >= self.clock);
                self.clock = ev.fire_at;
                Some(ev)
            }
            _ => None,
        }
    }

    /// Advances the clock to `t_end` after the window is drained.
    pub fn finish(&mut self, t_end: SimTime) -> Result<(), EngineError> {
        if t_end < self.clock {
            return Err(EngineError::RunPast {
                to: t_end.secs(),
                clock: self.clock.secs(),
            });
        }
        self.clock = t_end;
        Ok(())
    }

    /// Processes every event with fire_at <= t_end in (fire_at, seq) order,
    /// then sets the clock to exactly t_end.
    pub fn run_until<E, F>(&mut self, t_end: SimTime, mut handler: F) -> Result<u64, E>
    where
        F: FnMut(&mut Engine, SimEvent) -> Result<(), E>,
        E: From<EngineError>,
    {
        if t_end < self.clock {
            return Err(EngineError::RunPast {
                to: t_end.secs(),
                clock: self.clock.secs(),
            }
            .into());
        }
        let mut processed = 0;
        while let Some(ev) = self.pop_due(t_end) {
            handler(self, ev)?;
            processed += 1;
        }
        self.finish(t_end)?;
        Ok(processed)
    }

    /// Borrows the named deterministic stream.
    pub fn rng(&mut self, label: RngLabel) -> &mut ChaCha8Rng {
        match label {
            RngLabel::Mobility => &mut self.rngs[0],
            RngLabel::Traffic => &mut self.rngs[1],
            RngLabel::MacBackoff => &mut self.rngs[2],
            RngLabel::Topology => &mut self.rngs[3],
        }
    }

    /// Borrows every stream at once for setup code that interleaves draws
    /// from several of them.
    pub fn streams(&mut self) -> EngineStreams<'_> {
        let [mobility, traffic, mac_backoff, topology] = &mut self.rngs;
        EngineStreams {
            mobility,
            traffic,
            mac_backoff,
            topology,
        }
    }

    /// Builds a standalone stream for (seed, label) without an engine. Same
    /// (seed, label) always yields the same sequence.
    pub fn stream_for(seed: u64, label: RngLabel) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.stream());
        rng
    }
}

/// Split borrows of the engine's named streams.
pub struct EngineStreams<'a> {
    pub mobility: &'a mut ChaCha8Rng,
    pub traffic: &'a mut ChaCha8Rng,
    pub mac_backoff: &'a mut ChaCha8Rng,
    pub topology: &'a mut ChaCha8Rng,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ev(kind: EventKind) -> EventKind {
        kind
    }

    #[test]
    fn pop_order_is_by_fire_time() {
        let mut eng = Engine::new(1);
        eng.finish(SimTime::from_secs(1.0)).unwrap();
        eng.schedule(SimTime::from_secs(5.0), ev(EventKind::Waypoint), NodeId(0))
            .unwrap();
        eng.schedule(SimTime::from_secs(3.0), ev(EventKind::Waypoint), NodeId(1))
            .unwrap();
        let a = eng.pop_due(SimTime::from_secs(10.0)).unwrap();
        let b = eng.pop_due(SimTime::from_secs(10.0)).unwrap();
        assert_eq!(a.fire_at, SimTime::from_secs(3.0));
        assert_eq!(b.fire_at, SimTime::from_secs(5.0));
    }

    #[test]
    fn simultaneous_events_pop_in_fifo_order() {
        let mut eng = Engine::new(1);
        eng.schedule(SimTime::from_secs(2.0), ev(EventKind::Waypoint), NodeId(7))
            .unwrap();
        eng.schedule(SimTime::from_secs(2.0), ev(EventKind::Waypoint), NodeId(8))
            .unwrap();
        let a = eng.pop_due(SimTime::from_secs(2.0)).unwrap();
        let b = eng.pop_due(SimTime::from_secs(2.0)).unwrap();
        assert!(a.seq < b.seq);
        assert_eq!(a.target, NodeId(7));
        assert_eq!(b.target, NodeId(8));
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut eng = Engine::new(1);
        eng.finish(SimTime::from_secs(1.0)).unwrap();
        let err = eng
            .schedule(SimTime::from_secs(0.5), ev(EventKind::Waypoint), NodeId(0))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mobility-waypoint"), "got: {msg}");
    }

    #[test]
    fn run_until_on_empty_queue_advances_clock() {
        let mut eng = Engine::new(1);
        let n = eng
            .run_until::<EngineError, _>(SimTime::from_secs(100.0), |_, _| Ok(()))
            .unwrap();
        assert_eq!(n, 0);
        assert_eq!(eng.now(), SimTime::from_secs(100.0));
    }

    #[test]
    fn run_until_stops_at_boundary() {
        let mut eng = Engine::new(1);
        for t in [1.0, 2.0, 150.0] {
            eng.schedule(SimTime::from_secs(t), ev(EventKind::Waypoint), NodeId(0))
                .unwrap();
        }
        let n = eng
            .run_until::<EngineError, _>(SimTime::from_secs(100.0), |_, _| Ok(()))
            .unwrap();
        assert_eq!(n, 2);
        assert_eq!(eng.pending(), 1);
        assert_eq!(eng.now(), SimTime::from_secs(100.0));
    }

    #[test]
    fn chained_followups_terminate_at_t_end() {
        // Independent oracle: enumerate the fire times k*0.1 directly.
        let expected = (1..).take_while(|k| *k as f64 * 0.1 <= 100.0).count() as u64;

        let mut eng = Engine::new(1);
        eng.schedule(SimTime::from_secs(0.1), ev(EventKind::Waypoint), NodeId(0))
            .unwrap();
        let mut step = 1u64;
        let n = eng
            .run_until::<EngineError, _>(SimTime::from_secs(100.0), |eng, _| {
                step += 1;
                eng.schedule(
                    SimTime::from_secs(step as f64 * 0.1),
                    ev(EventKind::Waypoint),
                    NodeId(0),
                )
                .map(|_| ())
            })
            .unwrap();
        assert_eq!(n, expected);
        assert_eq!(eng.now(), SimTime::from_secs(100.0));
    }

    #[test]
    fn same_seed_and_label_reproduce_the_stream() {
        let mut a = Engine::stream_for(42, RngLabel::Mobility);
        let mut b = Engine::stream_for(42, RngLabel::Mobility);
        for _ in 0..100 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn different_seeds_diverge_within_ten_draws() {
        let mut a = Engine::stream_for(42, RngLabel::Mobility);
        let mut b = Engine::stream_for(43, RngLabel::Mobility);
        let da: Vec<u64> = (0..10).map(|_| a.gen()).collect();
        let db: Vec<u64> = (0..10).map(|_| b.gen()).collect();
        assert_ne!(da, db);
    }

    #[test]
    fn different_labels_diverge_within_ten_draws() {
        let mut a = Engine::stream_for(42, RngLabel::Mobility);
        let mut b = Engine::stream_for(42, RngLabel::Traffic);
        let da: Vec<u64> = (0..10).map(|_| a.gen()).collect();
        let db: Vec<u64> = (0..10).map(|_| b.gen()).collect();
        assert_ne!(da, db);
    }

    #[test]
    fn unknown_rng_label_is_a_hard_error() {
        assert!("mobility".parse::<RngLabel>().is_ok());
        assert!("nonsense".parse::<RngLabel>().is_err());
    }

    proptest! {
        #[test]
        fn popped_events_are_lexicographically_nondecreasing(times in prop::collection::vec(0.0f64..1000.0, 1..200)) {
            let mut eng = Engine::new(1);
            for t in &times {
                eng.schedule(SimTime::from_secs(*t), EventKind::Waypoint, NodeId(0)).unwrap();
            }
            let mut last: Option<(SimTime, u64)> = None;
            while let Some(e) = eng.pop_due(SimTime::from_secs(1e6)) {
                let key = (e.fire_at, e.seq);
                if let Some(prev) = last {
                    prop_assert!(prev < key);
                }
                last = Some(key);
            }
            prop_assert_eq!(eng.pending(), 0);
        }

        #[test]
        fn clock_never_decreases(times in prop::collection::vec(0.0f64..100.0, 1..100)) {
            let mut eng = Engine::new(1);
            for t in &times {
                eng.schedule(SimTime::from_secs(*t), EventKind::Waypoint, NodeId(0)).unwrap();
            }
            let mut prev = eng.now();
            while let Some(_) = eng.pop_due(SimTime::from_secs(200.0)) {
                prop_assert!(eng.now() >= prev);
                prev = eng.now();
            }
        }
    }
}
