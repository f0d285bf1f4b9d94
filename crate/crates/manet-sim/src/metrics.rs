//! Per-neighbor estimator bank: link quality, MAC overhead, effective data
//! rate, local delay, the combined node weight, and the cost-index recovery
//! used on the reply path.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::engine::{NodeId, ScenarioConfig, SimTime};
use crate::mac::{data_airtime, MacTimings};
use crate::world::RadioParams;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics not warm: {field} has no sample yet")]
    NotWarm { field: &'static str },
    #[error("link-quality sample must be positive, got {0:e}")]
    NonPositiveSample(f64),
    #[error("effective data rate undefined for zero channel delay")]
    ZeroChannelDelay,
    #[error("cost recovery corrupt: route total {total:e} below prefix {prefix:e}")]
    CostUnderflow { total: f64, prefix: f64 },
}

/// Exponentially weighted moving average. `alpha = 1` reduces to the last
/// sample; the running value is always a convex combination of its samples.
#[derive(Debug, Clone)]
pub struct EwmaEstimator {
    alpha: f64,
    value: Option<f64>,
    count: u64,
}

impl EwmaEstimator {
    pub fn new(alpha: f64) -> EwmaEstimator {
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
        EwmaEstimator {
            alpha,
            value: None,
            count: 0,
        }
    }

    pub fn update(&mut self, sample: f64) {
        let next = match self.value {
            None => sample,
            Some(v) => self.alpha * sample + (1.0 - self.alpha) * v,
        };
        self.value = Some(next);
        self.count += 1;
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }

    pub fn is_warm(&self) -> bool {
        self.value.is_some()
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// Snapshot of one link's metric inputs. Fields stay `None` until the
/// corresponding estimator has seen a sample; zero would poison the weight's
/// products and quotients, so nothing is silently defaulted.
#[derive(Debug, Clone, Copy)]
pub struct LinkMetrics {
    /// Link quality: received power, watts.
    pub l_q: Option<f64>,
    /// MAC overhead: channel occupation plus access contention, seconds.
    pub oh_mac: Option<f64>,
    /// Effective data rate, bit/s.
    pub d_rate: Option<f64>,
    /// Local queuing-plus-transmission delay toward the neighbor, seconds.
    pub d_avg: Option<f64>,
    pub freshness: SimTime,
}

/// MAC overhead: channel occupation plus the measured access-contention time.
pub fn mac_overhead(c_occ: f64, t_acc: f64) -> f64 {
    debug_assert!(c_occ > 0.0 && t_acc >= 0.0);
    c_occ + t_acc
}

/// Effective link data rate: data size over channel delay.
pub fn effective_data_rate(d_size_bits: f64, c_delay: f64) -> Result<f64, MetricsError> {
    debug_assert!(d_size_bits > 0.0);
    if c_delay <= 0.0 {
        return Err(MetricsError::ZeroChannelDelay);
    }
    Ok(d_size_bits / c_delay)
}

/// Combined node weight (l_q * d_rate) / (oh_mac * d_avg). Larger means a
/// better, less congested link. Errors if any input is still cold.
pub fn node_weight(m: &LinkMetrics) -> Result<f64, MetricsError> {
    let l_q = m.l_q.ok_or(MetricsError::NotWarm { field: "l_q" })?;
    let oh_mac = m.oh_mac.ok_or(MetricsError::NotWarm { field: "oh_mac" })?;
    let d_rate = m.d_rate.ok_or(MetricsError::NotWarm { field: "d_rate" })?;
    let d_avg = m.d_avg.ok_or(MetricsError::NotWarm { field: "d_avg" })?;
    debug_assert!(l_q > 0.0 && oh_mac > 0.0 && d_rate > 0.0 && d_avg > 0.0);
    Ok((l_q * d_rate) / (oh_mac * d_avg))
}

/// Recovers a node's cost index on the reply path: the route's total weight
/// minus the prefix sum this node recorded when forwarding the request. For
/// the last intermediate node this equals its own weight exactly.
pub fn recover_cost_index(route_total: f64, prefix_sum: f64) -> Result<f64, MetricsError> {
    if route_total < prefix_sum {
        return Err(MetricsError::CostUnderflow {
            total: route_total,
            prefix: prefix_sum,
        });
    }
    Ok(route_total - prefix_sum)
}

/// Weight bookkeeping carried through one RREQ forward: the upstream prefix
/// sum plus this node's own weight.
#[derive(Debug, Clone, Copy)]
pub struct WeightAccumulator {
    pub prefix_sum: f64,
    pub own_nw: f64,
}

impl WeightAccumulator {
    pub fn new(prefix_sum: f64, own_nw: f64) -> WeightAccumulator {
        debug_assert!(prefix_sum >= 0.0 && own_nw > 0.0);
        WeightAccumulator { prefix_sum, own_nw }
    }

    /// Total carried forward in the rebroadcast RREQ.
    pub fn forwarded_total(&self) -> f64 {
        self.prefix_sum + self.own_nw
    }
}

/// Scenario-wide nominal values: the cold-start default weight, the
/// link-quality admission floor, and the inputs they derive from.
#[derive(Debug, Clone, Copy)]
pub struct MetricDefaults {
    /// Received power at exactly the connectivity range; links measured below
    /// this are excluded from route formation.
    pub lq_floor: f64,
    /// Eq.-style channel occupation for the configured timings, seconds.
    pub c_occ: f64,
    /// Airtime of one nominal data packet at the channel rate, seconds.
    pub nominal_airtime: f64,
    /// Nominal data packet size, bits.
    pub d_size_bits: f64,
    /// Weight contributed by a node whose estimators are not yet warm.
    pub default_nw: f64,
}

impl MetricDefaults {
    pub fn from_config(cfg: &ScenarioConfig) -> MetricDefaults {
        let radio = RadioParams::from_config(cfg);
        let timings = MacTimings::from_config(cfg);
        let lq_floor = radio
            .power_at(radio.range)
            .expect("range validated positive");
        let c_occ = timings.channel_occupation();
        let nominal_airtime =
            data_airtime(cfg.pkt_size, cfg.rate).expect("packet size validated positive");
        let d_size_bits = f64::from(cfg.pkt_size) * 8.0;
        let default_nw = (lq_floor * cfg.rate) / (c_occ * nominal_airtime);
        MetricDefaults {
            lq_floor,
            c_occ,
            nominal_airtime,
            d_size_bits,
            default_nw,
        }
    }
}

#[derive(Debug, Clone)]
struct NeighborBank {
    l_q: EwmaEstimator,
    freshness: SimTime,
}

/// One node's estimator bank. Link quality is tracked per neighbor; access
/// contention and channel delay are node-level (both measure the shared
/// channel and the shared transmit queue).
#[derive(Debug)]
pub struct NodeMetrics {
    t_acc: EwmaEstimator,
    c_delay: EwmaEstimator,
    lq_alpha: f64,
    neighbors: BTreeMap<NodeId, NeighborBank>,
}

impl NodeMetrics {
    pub fn new(cfg: &ScenarioConfig) -> NodeMetrics {
        NodeMetrics {
            t_acc: EwmaEstimator::new(cfg.tuning.tacc_alpha),
            c_delay: EwmaEstimator::new(cfg.tuning.cdelay_alpha),
            lq_alpha: cfg.tuning.lq_alpha,
            neighbors: BTreeMap::new(),
        }
    }

    /// Records a received-power sample for the link from `neighbor`.
    /// Non-positive samples are rejected and leave the estimator unchanged.
    pub fn update_link_quality(
        &mut self,
        neighbor: NodeId,
        p_r: f64,
        now: SimTime,
    ) -> Result<(), MetricsError> {
        if !(p_r > 0.0) {
            return Err(MetricsError::NonPositiveSample(p_r));
        }
        let bank = self
            .neighbors
            .entry(neighbor)
            .or_insert_with(|| NeighborBank {
                l_q: EwmaEstimator::new(self.lq_alpha),
                freshness: now,
            });
        bank.l_q.update(p_r);
        bank.freshness = now;
        Ok(())
    }

    pub fn link_quality(&self, neighbor: NodeId) -> Option<f64> {
        self.neighbors.get(&neighbor).and_then(|b| b.l_q.value())
    }

    /// Feeds one access-contention sample (head-of-line to transmission
    /// start), seconds.
    pub fn record_access_time(&mut self, sample: f64) {
        debug_assert!(sample >= 0.0);
        self.t_acc.update(sample);
    }

    /// Feeds one channel-delay sample (handed-to-MAC to ACK received) from a
    /// data-sized unicast exchange, seconds.
    pub fn record_channel_delay(&mut self, sample: f64) {
        debug_assert!(sample > 0.0);
        self.c_delay.update(sample);
    }

    pub fn access_time(&self) -> Option<f64> {
        self.t_acc.value()
    }

    pub fn channel_delay(&self) -> Option<f64> {
        self.c_delay.value()
    }

    /// Assembles the metric snapshot for the link toward `neighbor`. The
    /// local delay is state-based: the queue backlog (plus the packet being
    /// placed) times one nominal airtime at this node's rate.
    pub fn snapshot(
        &self,
        neighbor: NodeId,
        queue_len: usize,
        node_rate: f64,
        defaults: &MetricDefaults,
        now: SimTime,
    ) -> LinkMetrics {
        let l_q = self.link_quality(neighbor);
        let oh_mac = self
            .t_acc
            .value()
            .map(|t_acc| mac_overhead(defaults.c_occ, t_acc));
        let d_rate = self
            .c_delay
            .value()
            .and_then(|cd| effective_data_rate(defaults.d_size_bits, cd).ok());
        let airtime = defaults.d_size_bits / node_rate;
        let d_avg = Some((queue_len as f64 + 1.0) * airtime);
        LinkMetrics {
            l_q,
            oh_mac,
            d_rate,
            d_avg,
            freshness: self
                .neighbors
                .get(&neighbor)
                .map(|b| b.freshness)
                .unwrap_or(now),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn warm(l_q: f64, oh: f64, rate: f64, d_avg: f64) -> LinkMetrics {
        LinkMetrics {
            l_q: Some(l_q),
            oh_mac: Some(oh),
            d_rate: Some(rate),
            d_avg: Some(d_avg),
            freshness: SimTime::ZERO,
        }
    }

    #[test]
    fn ewma_first_sample_sets_value() {
        let mut e = EwmaEstimator::new(0.5);
        assert!(!e.is_warm());
        e.update(2.0);
        assert_eq!(e.value(), Some(2.0));
        e.update(4.0);
        assert_eq!(e.value(), Some(3.0));
    }

    #[test]
    fn ewma_alpha_one_is_last_sample() {
        let mut e = EwmaEstimator::new(1.0);
        e.update(1.58314e-9);
        e.update(7.0);
        assert_eq!(e.value(), Some(7.0));
    }

    #[test]
    fn link_quality_rejects_non_positive_samples() {
        let cfg = ScenarioConfig::default();
        let mut m = NodeMetrics::new(&cfg);
        assert!(m.update_link_quality(NodeId(1), 0.0, SimTime::ZERO).is_err());
        assert!(m
            .update_link_quality(NodeId(1), -1.0, SimTime::ZERO)
            .is_err());
        assert_eq!(m.link_quality(NodeId(1)), None);
        m.update_link_quality(NodeId(1), 1.58314e-9, SimTime::ZERO)
            .unwrap();
        assert_eq!(m.link_quality(NodeId(1)), Some(1.58314e-9));
    }

    #[test]
    fn mac_overhead_is_additive() {
        assert_eq!(mac_overhead(686e-6, 1314e-6), 2000e-6);
        assert_eq!(mac_overhead(686e-6, 0.0), 686e-6);
        let congested = mac_overhead(686e-6, 10e-3);
        assert!((congested - 10.686e-3).abs() < 1e-15);
        assert!(congested > 10.0 * 686e-6);
    }

    #[test]
    fn effective_rate_reference_points() {
        let r = effective_data_rate(4096.0, 2.048e-3).unwrap();
        assert!((r - 2.0e6).abs() < 1e-6);
        let r = effective_data_rate(4096.0, 4.096e-3).unwrap();
        assert!((r - 1.0e6).abs() < 1e-6);
        assert!(effective_data_rate(4096.0, 0.0).is_err());
    }

    #[test]
    fn node_weight_reference_point() {
        // (1.58314e-9 * 2e6) / (2e-3 * 5e-2) evaluated independently.
        let m = warm(1.58314e-9, 2e-3, 2e6, 5e-2);
        let nw = node_weight(&m).unwrap();
        assert!((nw - 31.6628).abs() < 1e-4, "got {nw}");
    }

    #[test]
    fn node_weight_linearity() {
        let base = node_weight(&warm(1.58314e-9, 2e-3, 2e6, 5e-2)).unwrap();
        let doubled_lq = node_weight(&warm(2.0 * 1.58314e-9, 2e-3, 2e6, 5e-2)).unwrap();
        assert!((doubled_lq / base - 2.0).abs() < 1e-12);
        let doubled_oh = node_weight(&warm(1.58314e-9, 4e-3, 2e6, 5e-2)).unwrap();
        assert!((doubled_oh / base - 0.5).abs() < 1e-12);
    }

    #[test]
    fn node_weight_requires_warm_fields() {
        let mut m = warm(1.0, 1.0, 1.0, 1.0);
        m.d_rate = None;
        match node_weight(&m) {
            Err(MetricsError::NotWarm { field }) => assert_eq!(field, "d_rate"),
            other => panic!("expected NotWarm, got {other:?}"),
        }
    }

    #[test]
    fn cost_recovery_reference_points() {
        assert_eq!(recover_cost_index(10.0, 4.0).unwrap(), 6.0);
        // Last intermediate node: prefix = total - own weight.
        let own = 5.0;
        assert_eq!(recover_cost_index(10.0, 10.0 - own).unwrap(), own);
        assert_eq!(recover_cost_index(10.0, 0.0).unwrap(), 10.0);
        assert!(recover_cost_index(3.0, 4.0).is_err());
    }

    #[test]
    fn default_weight_uses_nominal_values() {
        let cfg = ScenarioConfig::default();
        let d = MetricDefaults::from_config(&cfg);
        assert!((d.lq_floor - 1.58314e-9).abs() < 1e-14);
        assert!((d.c_occ - 686e-6).abs() < 1e-12);
        assert!((d.nominal_airtime - 2.048e-3).abs() < 1e-12);
        let expect = (d.lq_floor * cfg.rate) / (d.c_occ * d.nominal_airtime);
        assert_eq!(d.default_nw, expect);
        assert!(d.default_nw > 0.0);
    }

    proptest! {
        #[test]
        fn node_weight_is_strictly_monotone(
            l_q in 1e-12f64..1e-3,
            oh in 1e-6f64..1.0,
            rate in 1e3f64..1e8,
            d_avg in 1e-6f64..1.0,
            k in 1.01f64..100.0,
        ) {
            let base = node_weight(&warm(l_q, oh, rate, d_avg)).unwrap();
            prop_assert!(node_weight(&warm(l_q * k, oh, rate, d_avg)).unwrap() > base);
            prop_assert!(node_weight(&warm(l_q, oh, rate * k, d_avg)).unwrap() > base);
            prop_assert!(node_weight(&warm(l_q, oh * k, rate, d_avg)).unwrap() < base);
            prop_assert!(node_weight(&warm(l_q, oh, rate, d_avg * k)).unwrap() < base);
        }

        #[test]
        fn ewma_stays_within_sample_bounds(
            alpha in 0.01f64..=1.0,
            samples in prop::collection::vec(0.001f64..1000.0, 1..50),
        ) {
            let mut e = EwmaEstimator::new(alpha);
            for s in &samples {
                e.update(*s);
            }
            let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = e.value().unwrap();
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }

        #[test]
        fn telescoping_recovers_every_suffix_sum(
            weights in prop::collection::vec(0.01f64..1000.0, 2..10),
        ) {
            let total: f64 = weights.iter().sum();
            // Walk the reply path backwards: each node recovers its suffix.
            let mut prefix = 0.0;
            let mut recovered = Vec::new();
            for w in &weights {
                let cost = recover_cost_index(total, prefix).unwrap();
                recovered.push(cost);
                prefix += w;
            }
            // Suffix differences reproduce the per-node weights.
            let mut rebuilt = 0.0;
            for (i, w) in weights.iter().enumerate() {
                let next = if i + 1 < weights.len() { recovered[i + 1] } else { 0.0 };
                let diff = recovered[i] - next;
                prop_assert!((diff - w).abs() / w < 1e-9);
                rebuilt += diff;
            }
            prop_assert!((rebuilt - total).abs() / total < 1e-9);
            // Last intermediate node's recovery equals its own weight.
            let last = recover_cost_index(total, total - weights[weights.len() - 1]).unwrap();
            prop_assert!((last - weights[weights.len() - 1]).abs() / last < 1e-9);
        }
    }
}
