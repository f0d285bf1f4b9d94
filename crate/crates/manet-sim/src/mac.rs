//! Simplified IEEE 802.11 DCF at exchange granularity: per-node FIFO
//! transmit queues, RTS collision and binary-exponential backoff, whole
//! RTS/CTS/DATA/ACK exchanges as reserved channel intervals, and link
//! breakage notification to routing on retry exhaustion.

use std::collections::VecDeque;

use rand::Rng;
use thiserror::Error;

use crate::engine::{ChannelEvent, EventKind, NodeId, ScenarioConfig, SimTime, TxId};
use crate::routing::Packet;
use crate::sim::Simulation;
use crate::world::World;

#[derive(Debug, Error)]
pub enum MacError {
    #[error("zero-byte packets cannot be transmitted")]
    EmptyPacket,
}

/// DCF timing and retry parameters.
#[derive(Debug, Clone, Copy)]
pub struct MacTimings {
    pub t_rts: f64,
    pub t_cts: f64,
    pub t_sifs: f64,
    pub t_ack: f64,
    pub t_difs: f64,
    pub backoff_slot: f64,
    pub cw_min: u32,
    pub cw_max: u32,
    pub max_retries: u32,
}

impl MacTimings {
    pub fn from_config(cfg: &ScenarioConfig) -> MacTimings {
        let t = &cfg.tuning;
        MacTimings {
            t_rts: cfg.t_rts,
            t_cts: cfg.t_cts,
            t_sifs: cfg.t_sifs,
            t_ack: t.t_ack,
            t_difs: t.t_difs,
            backoff_slot: t.backoff_slot,
            cw_min: t.cw_min,
            cw_max: t.cw_max,
            max_retries: t.max_retries,
        }
    }

    /// Channel occupation due to MAC contention: t_RTS + t_CTS + 3 t_SIFS.
    /// A pure function of the timings, independent of traffic load.
    pub fn channel_occupation(&self) -> f64 {
        self.t_rts + self.t_cts + 3.0 * self.t_sifs
    }

    /// Full reserved duration of one RTS/CTS/DATA/ACK exchange, given the
    /// DATA airtime.
    pub fn exchange_duration(&self, data_airtime: f64) -> f64 {
        self.t_rts + self.t_cts + 3.0 * self.t_sifs + data_airtime + self.t_ack
    }
}

/// Per-node transmit data rate, bit/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataRateClass {
    pub rate: f64,
}

/// Transmission time of a payload at a rate class: 8 * bytes / rate.
pub fn data_airtime(bytes: u32, rate: f64) -> Result<f64, MacError> {
    if bytes == 0 {
        return Err(MacError::EmptyPacket);
    }
    debug_assert!(rate > 0.0);
    Ok(f64::from(bytes) * 8.0 / rate)
}

/// Access-contention sample: head-of-line to the start of the transmission
/// that went through.
pub fn sample_access_time(hol_since: SimTime, tx_start: SimTime) -> f64 {
    let dt = tx_start.since(hol_since);
    debug_assert!(dt >= 0.0);
    dt
}

/// One queued frame awaiting channel access.
#[derive(Debug)]
pub struct MacQueueEntry {
    pub packet: Packet,
    /// Resolved next hop; `None` for broadcasts.
    pub next_hop: Option<NodeId>,
    pub enqueued_at: SimTime,
    /// Set when the entry reaches the head of the queue.
    pub hol_since: Option<SimTime>,
    pub retries: u32,
    /// Control transmissions are counted once, at first channel access.
    pub counted: bool,
}

#[derive(Debug, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Queued,
    Overflow,
}

/// One node's MAC state: FIFO queue, contention window, and transceiver
/// busy flags.
#[derive(Debug)]
pub struct MacState {
    queue: VecDeque<MacQueueEntry>,
    capacity: usize,
    pub cw: u32,
    /// An attempt event is pending.
    pub contending: bool,
    /// A broadcast or exchange from this node is on the air.
    pub transmitting: bool,
    pub rate: DataRateClass,
}

impl MacState {
    pub fn new(capacity: usize, cw_min: u32, rate: f64) -> MacState {
        MacState {
            queue: VecDeque::new(),
            capacity,
            cw: cw_min,
            contending: false,
            transmitting: false,
            rate: DataRateClass { rate },
        }
    }

    /// Appends a packet; a full queue drops it (a counted outcome, not a
    /// fault).
    pub fn enqueue(
        &mut self,
        packet: Packet,
        next_hop: Option<NodeId>,
        now: SimTime,
    ) -> EnqueueOutcome {
        if self.queue.len() >= self.capacity {
            return EnqueueOutcome::Overflow;
        }
        let becomes_hol = self.queue.is_empty();
        self.queue.push_back(MacQueueEntry {
            packet,
            next_hop,
            enqueued_at: now,
            hol_since: becomes_hol.then_some(now),
            retries: 0,
            counted: false,
        });
        EnqueueOutcome::Queued
    }

    pub fn head(&self) -> Option<&MacQueueEntry> {
        self.queue.front()
    }

    pub fn head_mut(&mut self) -> Option<&mut MacQueueEntry> {
        self.queue.front_mut()
    }

    /// Removes the head; the next entry, if any, becomes head-of-line now.
    pub fn pop_head(&mut self, now: SimTime) -> Option<MacQueueEntry> {
        let head = self.queue.pop_front();
        if let Some(next) = self.queue.front_mut() {
            if next.hol_since.is_none() {
                next.hol_since = Some(now);
            }
        }
        head
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn iter_queue(&self) -> impl Iterator<Item = &MacQueueEntry> {
        self.queue.iter()
    }

    pub fn idle(&self) -> bool {
        !self.contending && !self.transmitting
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxPhase {
    /// RTS on the air; collision not yet resolved.
    Rts,
    /// Reserved through DATA and ACK.
    Exchange,
    Broadcast,
}

/// One transmission interval on the shared channel.
#[derive(Debug)]
pub struct TxRecord {
    pub id: TxId,
    pub sender: NodeId,
    pub receiver: Option<NodeId>,
    pub start: SimTime,
    pub end: SimTime,
    pub phase: TxPhase,
    /// Present for broadcasts and promoted exchanges; the RTS phase leaves
    /// the packet in the sender's queue.
    pub packet: Option<Packet>,
    /// Carried into the exchange for the channel-delay sample.
    pub enqueued_at: Option<SimTime>,
}

/// The shared medium: active and recently finished transmissions, kept long
/// enough for overlap checks.
#[derive(Debug, Default)]
pub struct Channel {
    records: Vec<TxRecord>,
    next_id: u64,
}

impl Channel {
    pub fn new() -> Channel {
        Channel::default()
    }

    fn alloc(&mut self) -> TxId {
        self.next_id += 1;
        TxId(self.next_id)
    }

    pub fn begin_broadcast(
        &mut self,
        sender: NodeId,
        start: SimTime,
        duration: f64,
        packet: Packet,
    ) -> TxId {
        let id = self.alloc();
        self.records.push(TxRecord {
            id,
            sender,
            receiver: None,
            start,
            end: start.after(duration),
            phase: TxPhase::Broadcast,
            packet: Some(packet),
            enqueued_at: None,
        });
        id
    }

    pub fn begin_rts(&mut self, sender: NodeId, receiver: NodeId, start: SimTime, t_rts: f64) -> TxId {
        let id = self.alloc();
        self.records.push(TxRecord {
            id,
            sender,
            receiver: Some(receiver),
            start,
            end: start.after(t_rts),
            phase: TxPhase::Rts,
            packet: None,
            enqueued_at: None,
        });
        id
    }

    fn index_of(&self, id: TxId) -> usize {
        self.records
            .iter()
            .position(|r| r.id == id)
            .expect("transmission record must exist")
    }

    pub fn record(&self, id: TxId) -> &TxRecord {
        &self.records[self.index_of(id)]
    }

    /// Successful RTS: reserve the channel through the whole exchange and
    /// take ownership of the in-flight packet.
    pub fn promote_to_exchange(
        &mut self,
        id: TxId,
        end: SimTime,
        packet: Packet,
        enqueued_at: SimTime,
    ) {
        let i = self.index_of(id);
        let rec = &mut self.records[i];
        debug_assert_eq!(rec.phase, TxPhase::Rts);
        rec.phase = TxPhase::Exchange;
        rec.end = end;
        rec.packet = Some(packet);
        rec.enqueued_at = Some(enqueued_at);
    }

    /// Failed RTS: the energy was real, so the interval stays for overlap
    /// checks, but nothing follows it.
    pub fn truncate(&mut self, id: TxId, now: SimTime) {
        let i = self.index_of(id);
        self.records[i].end = now;
    }

    pub fn remove(&mut self, id: TxId) -> TxRecord {
        let i = self.index_of(id);
        self.records.swap_remove(i)
    }

    /// Latest end time of any transmission audible to `node` that is on the
    /// air strictly before `now` and still unfinished. Transmissions starting
    /// exactly at `now` are not yet audible: simultaneous starters collide
    /// instead of deferring.
    pub fn busy_until(&self, world: &World, node: NodeId, now: SimTime) -> Option<SimTime> {
        self.records
            .iter()
            .filter(|r| r.start < now && r.end > now && Self::audible(r, world, node, now))
            .map(|r| r.end)
            .max()
    }

    fn audible(rec: &TxRecord, world: &World, node: NodeId, now: SimTime) -> bool {
        if rec.sender == node || world.in_range(rec.sender, node, now) {
            return true;
        }
        // An established exchange keeps the receiver's neighborhood busy too
        // (the CTS was heard there).
        if rec.phase == TxPhase::Exchange {
            if let Some(rx) = rec.receiver {
                return rx == node || world.in_range(rx, node, now);
            }
        }
        false
    }

    /// True when some other transmission overlapped `(start, end)` with a
    /// sender the node at `at` could hear: the victim saw two signals.
    pub fn garbled_at(
        &self,
        world: &World,
        victim: NodeId,
        start: SimTime,
        end: SimTime,
        exclude_sender: NodeId,
        now: SimTime,
    ) -> bool {
        self.records.iter().any(|r| {
            r.sender != exclude_sender
                && r.start < end
                && r.end > start
                && (r.sender == victim || world.in_range(r.sender, victim, now))
        })
    }

    /// Drops stale intervals that can no longer participate in overlap
    /// checks. Records still carrying packets are removed by their own end
    /// events, never here.
    pub fn prune(&mut self, now: SimTime) {
        let horizon = now.secs() - 0.05;
        self.records
            .retain(|r| r.packet.is_some() || r.end.secs() >= horizon);
    }

    pub fn iter(&self) -> impl Iterator<Item = &TxRecord> {
        self.records.iter()
    }
}

// MAC-side event handlers: channel access, collision resolution, and
// delivery of finished transmissions.
impl Simulation {
    /// Hands a packet to a node's MAC toward `next_hop` (`None` broadcasts).
    pub(crate) fn mac_enqueue(&mut self, node: NodeId, packet: Packet, next_hop: Option<NodeId>) {
        let now = self.engine.now();
        let is_data = packet.is_data();
        match self.nodes[node.index()].mac.enqueue(packet, next_hop, now) {
            EnqueueOutcome::Overflow => {
                if is_data {
                    self.stats.dropped_data += 1;
                    self.stats.drop_overflow += 1;
                } else {
                    self.stats.ctrl_overflow += 1;
                }
            }
            EnqueueOutcome::Queued => {
                if self.nodes[node.index()].mac.idle() {
                    self.start_contention(node);
                }
            }
        }
    }

    /// Begins DIFS-plus-backoff access for the head-of-line packet.
    fn start_contention(&mut self, node: NodeId) {
        let now = self.engine.now();
        let mac = &mut self.nodes[node.index()].mac;
        debug_assert!(mac.idle());
        let Some(head) = mac.head_mut() else { return };
        if head.hol_since.is_none() {
            head.hol_since = Some(now);
        }
        let cw = mac.cw;
        let slots = self.engine.rng(crate::engine::RngLabel::MacBackoff).gen_range(0..=cw);
        let at = now.after(self.timings.t_difs + f64::from(slots) * self.timings.backoff_slot);
        self.nodes[node.index()].mac.contending = true;
        self.engine
            .schedule(at, EventKind::Channel(ChannelEvent::MacAttempt), node)
            .expect("attempt scheduled in the future");
    }

    fn defer(&mut self, node: NodeId, until: SimTime) {
        let cw = self.nodes[node.index()].mac.cw;
        let slots = self.engine.rng(crate::engine::RngLabel::MacBackoff).gen_range(0..=cw);
        let at = until.after(self.timings.t_difs + f64::from(slots) * self.timings.backoff_slot);
        self.nodes[node.index()].mac.contending = true;
        self.engine
            .schedule(at, EventKind::Channel(ChannelEvent::MacAttempt), node)
            .expect("deferred attempt is in the future");
    }

    /// Access timer fired: transmit if the medium looks idle, else defer.
    pub(crate) fn on_mac_attempt(&mut self, node: NodeId) {
        let now = self.engine.now();
        self.channel.prune(now);
        {
            let mac = &mut self.nodes[node.index()].mac;
            mac.contending = false;
            if mac.transmitting || mac.head().is_none() {
                return;
            }
        }
        if let Some(until) = self.channel.busy_until(&self.world, node, now) {
            self.defer(node, until);
            return;
        }

        let rate = self.nodes[node.index()].mac.rate.rate;
        let head_is_broadcast = self.nodes[node.index()]
            .mac
            .head()
            .map(|e| e.next_hop.is_none())
            .unwrap_or(false);

        if head_is_broadcast {
            let entry = self.nodes[node.index()].mac.pop_head(now).unwrap();
            let hol = entry.hol_since.expect("head had hol timestamp");
            self.nodes[node.index()]
                .metrics
                .record_access_time(sample_access_time(hol, now));
            let airtime = data_airtime(entry.packet.size_bytes(&self.cfg.tuning), rate)
                .expect("packet sizes validated");
            self.count_ctrl_tx(node, &entry.packet);
            let tx = self
                .channel
                .begin_broadcast(node, now, airtime, entry.packet);
            self.nodes[node.index()].mac.transmitting = true;
            self.engine
                .schedule_in(airtime, EventKind::Channel(ChannelEvent::BroadcastEnd(tx)), node)
                .expect("broadcast end is in the future");
        } else {
            // Control packets count once, at first channel access.
            let (receiver, counted, pkt) = {
                let entry = self.nodes[node.index()].mac.head().unwrap();
                let receiver = entry.next_hop.expect("unicast head has a next hop");
                (receiver, entry.counted, entry.packet.clone())
            };
            if !counted {
                self.count_ctrl_tx(node, &pkt);
                self.nodes[node.index()].mac.head_mut().unwrap().counted = true;
            }
            let tx = self.channel.begin_rts(node, receiver, now, self.timings.t_rts);
            self.nodes[node.index()].mac.transmitting = true;
            self.engine
                .schedule_in(
                    self.timings.t_rts,
                    EventKind::Channel(ChannelEvent::RtsResolve(tx)),
                    node,
                )
                .expect("rts resolve is in the future");
        }
    }

    /// RTS finished: either set up the full exchange or back off and retry.
    pub(crate) fn on_rts_resolve(&mut self, tx: TxId) {
        let now = self.engine.now();
        let (sender, receiver, start) = {
            let rec = self.channel.record(tx);
            (rec.sender, rec.receiver.expect("rts has receiver"), rec.start)
        };
        let in_range = self.world.in_range(sender, receiver, now);
        let garbled = self
            .channel
            .garbled_at(&self.world, receiver, start, now, sender, now);

        if in_range && !garbled {
            // Receiver measures the RTS signal strength for link quality.
            if let Ok(p_r) = self.world.link_power(sender, receiver, now) {
                let _ = self.nodes[receiver.index()]
                    .metrics
                    .update_link_quality(sender, p_r, now);
            }
            let rate = self.nodes[sender.index()].mac.rate.rate;
            let entry = self.nodes[sender.index()].mac.pop_head(now).unwrap();
            let hol = entry.hol_since.expect("head had hol timestamp");
            self.nodes[sender.index()]
                .metrics
                .record_access_time(sample_access_time(hol, start));
            let airtime = data_airtime(entry.packet.size_bytes(&self.cfg.tuning), rate)
                .expect("packet sizes validated");
            let end = start.after(self.timings.exchange_duration(airtime));
            self.channel
                .promote_to_exchange(tx, end, entry.packet, entry.enqueued_at);
            self.nodes[sender.index()].mac.cw = self.timings.cw_min;
            self.engine
                .schedule(end, EventKind::Channel(ChannelEvent::ExchangeEnd(tx)), sender)
                .expect("exchange end is in the future");
        } else {
            self.channel.truncate(tx, now);
            self.nodes[sender.index()].mac.transmitting = false;
            let exhausted = {
                let mac = &mut self.nodes[sender.index()].mac;
                let entry = mac.head_mut().unwrap();
                entry.retries += 1;
                entry.retries >= self.timings.max_retries
            };
            if exhausted {
                let entry = self.nodes[sender.index()].mac.pop_head(now).unwrap();
                self.on_retry_exhausted(sender, receiver, entry.packet);
                if self.nodes[sender.index()].mac.head().is_some()
                    && self.nodes[sender.index()].mac.idle()
                {
                    self.start_contention(sender);
                }
            } else {
                let mac = &mut self.nodes[sender.index()].mac;
                mac.cw = ((mac.cw + 1) * 2 - 1).min(self.timings.cw_max);
                let cw = mac.cw;
                let slots = self
                    .engine
                    .rng(crate::engine::RngLabel::MacBackoff)
                    .gen_range(0..=cw);
                let at =
                    now.after(self.timings.t_difs + f64::from(slots) * self.timings.backoff_slot);
                self.nodes[sender.index()].mac.contending = true;
                self.engine
                    .schedule(at, EventKind::Channel(ChannelEvent::MacAttempt), sender)
                    .expect("retry attempt is in the future");
            }
        }
    }

    /// Broadcast finished: deliver to every in-range node whose medium was
    /// clean for the whole interval.
    pub(crate) fn on_broadcast_end(&mut self, tx: TxId) {
        let now = self.engine.now();
        let rec = self.channel.remove(tx);
        let sender = rec.sender;
        let packet = rec.packet.expect("broadcast record owns its packet");
        self.nodes[sender.index()].mac.transmitting = false;

        for hearer in self.world.neighbors(sender, now) {
            let lost = self
                .channel
                .garbled_at(&self.world, hearer, rec.start, rec.end, sender, now);
            if lost {
                self.stats.broadcast_lost += 1;
            } else {
                self.deliver_packet(hearer, packet.clone(), sender);
            }
        }
        if self.nodes[sender.index()].mac.head().is_some() && self.nodes[sender.index()].mac.idle()
        {
            self.start_contention(sender);
        }
    }

    /// Exchange finished: sample the channel delay and hand the packet to
    /// the receiver.
    pub(crate) fn on_exchange_end(&mut self, tx: TxId) {
        let now = self.engine.now();
        let rec = self.channel.remove(tx);
        let sender = rec.sender;
        let receiver = rec.receiver.expect("exchange has receiver");
        let packet = rec.packet.expect("exchange record owns its packet");
        self.nodes[sender.index()].mac.transmitting = false;

        if packet.is_data_sized() {
            let sample = now.since(rec.enqueued_at.expect("exchange captured enqueue time"));
            self.nodes[sender.index()].metrics.record_channel_delay(sample);
        }
        self.deliver_packet(receiver, packet, sender);
        if self.nodes[sender.index()].mac.head().is_some() && self.nodes[sender.index()].mac.idle()
        {
            self.start_contention(sender);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::FlowId;
    use crate::routing::DataPacket;

    fn data_packet(seq: u32) -> Packet {
        Packet::Data(DataPacket {
            flow: FlowId(0),
            seq,
            origin_time: SimTime::ZERO,
            path: vec![NodeId(0), NodeId(1)],
            size: 512,
        })
    }

    #[test]
    fn channel_occupation_reference_point() {
        let t = MacTimings {
            t_rts: 352e-6,
            t_cts: 304e-6,
            t_sifs: 10e-6,
            t_ack: 304e-6,
            t_difs: 50e-6,
            backoff_slot: 20e-6,
            cw_min: 31,
            cw_max: 1023,
            max_retries: 4,
        };
        assert!((t.channel_occupation() - 686e-6).abs() < 1e-12);

        let tiny = MacTimings { t_rts: 1e-6, t_cts: 1e-6, t_sifs: 1e-6, ..t };
        assert!((tiny.channel_occupation() - 5e-6).abs() < 1e-15);

        // Doubling SIFS adds exactly 3 * t_sifs.
        let doubled = MacTimings { t_sifs: 20e-6, ..t };
        assert!((doubled.channel_occupation() - t.channel_occupation() - 30e-6).abs() < 1e-12);
    }

    #[test]
    fn data_airtime_reference_points() {
        assert!((data_airtime(512, 2e6).unwrap() - 2.048e-3).abs() < 1e-12);
        assert!((data_airtime(512, 1e6).unwrap() - 4.096e-3).abs() < 1e-12);
        assert!(data_airtime(0, 2e6).is_err());
    }

    #[test]
    fn queue_overflow_is_counted_not_fatal() {
        let mut mac = MacState::new(50, 31, 2e6);
        for i in 0..50 {
            assert_eq!(
                mac.enqueue(data_packet(i), Some(NodeId(1)), SimTime::ZERO),
                EnqueueOutcome::Queued
            );
        }
        assert_eq!(
            mac.enqueue(data_packet(50), Some(NodeId(1)), SimTime::ZERO),
            EnqueueOutcome::Overflow
        );
        assert_eq!(mac.queue_len(), 50);
    }

    #[test]
    fn first_entry_becomes_head_of_line_immediately() {
        let mut mac = MacState::new(50, 31, 2e6);
        let now = SimTime::from_secs(3.5);
        mac.enqueue(data_packet(0), Some(NodeId(1)), now);
        assert_eq!(mac.head().unwrap().hol_since, Some(now));
        mac.enqueue(data_packet(1), Some(NodeId(1)), now);
        assert_eq!(mac.iter_queue().nth(1).unwrap().hol_since, None);
    }

    #[test]
    fn fifo_order_is_preserved() {
        let mut mac = MacState::new(50, 31, 2e6);
        for i in 0..3 {
            mac.enqueue(data_packet(i), Some(NodeId(1)), SimTime::ZERO);
        }
        let later = SimTime::from_secs(1.0);
        for expect in 0..3 {
            let e = mac.pop_head(later).unwrap();
            match e.packet {
                Packet::Data(d) => assert_eq!(d.seq, expect),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn pop_promotes_next_head_with_fresh_hol() {
        let mut mac = MacState::new(50, 31, 2e6);
        mac.enqueue(data_packet(0), Some(NodeId(1)), SimTime::ZERO);
        mac.enqueue(data_packet(1), Some(NodeId(1)), SimTime::ZERO);
        let later = SimTime::from_secs(2.0);
        mac.pop_head(later);
        assert_eq!(mac.head().unwrap().hol_since, Some(later));
    }

    #[test]
    fn access_time_sample_is_the_hol_interval() {
        let s = sample_access_time(SimTime::from_secs(1.000), SimTime::from_secs(1.002));
        assert!((s - 0.002).abs() < 1e-12);
    }
}
