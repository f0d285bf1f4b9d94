//! Scenario configuration: defaults, file parsing, and validation.
//!
//! The scenario file is flat `key = value` text with `#` comments. Keys are
//! exactly: nodes, area_x, area_y, range, sim_time, speed, pause, rate,
//! pkt_size, protocol, seed, flows, cbr_interval, t_rts, t_cts, t_sifs.
//! CLI flags override file values.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

/// Which routing protocol drives a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Protocol {
    Carp,
    Aomdv,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Carp, Protocol::Aomdv];
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Carp => write!(f, "carp"),
            Protocol::Aomdv => write!(f, "aomdv"),
        }
    }
}

impl FromStr for Protocol {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "carp" => Ok(Protocol::Carp),
            "aomdv" => Ok(Protocol::Aomdv),
            other => Err(ConfigError::BadValue {
                key: "protocol".into(),
                value: other.into(),
                why: "expected carp or aomdv".into(),
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}` ({why})")]
    BadValue {
        key: String,
        value: String,
        why: String,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Tuning knobs that are not part of the scenario-file key set. All have
/// working defaults; tests and the library may adjust them directly.
#[derive(Debug, Clone)]
pub struct Tuning {
    // 802.11b-flavored DCF timing defaults.
    pub t_ack: f64,
    pub t_difs: f64,
    pub backoff_slot: f64,
    pub cw_min: u32,
    pub cw_max: u32,
    pub max_retries: u32,
    pub queue_capacity: usize,
    /// Size of RREQ/RREP/RERR packets on the air, bytes (before the weight
    /// field, which adds `weight_field_bytes` when present).
    pub ctrl_pkt_size: u32,
    pub weight_field_bytes: u32,
    /// Destination replies to at most this many distinct-path RREQs.
    pub k_replies: usize,
    /// A node forwards at most this many copies of one RREQ.
    pub dup_forward_cap: u32,
    /// Route admission bound on the probed average delay, seconds.
    pub delay_bound: f64,
    /// Linear back-off quantum between rejected probes, seconds.
    pub backoff_quantum: f64,
    /// Destination-side RREQ collection window before replying (carp).
    pub rreq_collect_window: f64,
    /// Source-side wait after the first RREP before probing starts (carp).
    pub rrep_wait: f64,
    /// Source-side guard on an unanswered probe, seconds.
    pub probe_timeout: f64,
    /// Destination-side wait for stragglers of one probe stream, seconds.
    pub dummy_collect_window: f64,
    /// Source-side guard on a discovery with no replies at all, seconds.
    pub discovery_timeout: f64,
    /// Data packets buffered per flow while discovery runs; oldest dropped.
    pub pending_capacity: usize,
    /// Hard cap on RREQ path length.
    pub max_hops: u32,
    pub lq_alpha: f64,
    pub tacc_alpha: f64,
    pub cdelay_alpha: f64,
    pub tx_power: f64,
    pub wavelength: f64,
    pub antenna_gain_tx: f64,
    pub antenna_gain_rx: f64,
    /// Per-node data-rate classes drawn uniformly at setup; `None` keeps
    /// every node at the scenario channel rate.
    pub rate_classes: Option<Vec<f64>>,
    /// CBR flows start uniformly inside this window.
    pub flow_start_min: f64,
    pub flow_start_max: f64,
}

impl Default for Tuning {
    fn default() -> Self {
        Tuning {
            t_ack: 304e-6,
            t_difs: 50e-6,
            backoff_slot: 20e-6,
            cw_min: 31,
            cw_max: 1023,
            max_retries: 4,
            queue_capacity: 50,
            ctrl_pkt_size: 64,
            weight_field_bytes: 8,
            k_replies: 3,
            dup_forward_cap: 3,
            delay_bound: 0.150,
            backoff_quantum: 0.050,
            rreq_collect_window: 0.100,
            rrep_wait: 0.100,
            probe_timeout: 1.5,
            dummy_collect_window: 0.5,
            discovery_timeout: 1.0,
            pending_capacity: 64,
            max_hops: 32,
            lq_alpha: 1.0,
            tacc_alpha: 0.3,
            cdelay_alpha: 0.3,
            tx_power: 1.0,
            wavelength: 0.125,
            antenna_gain_tx: 1.0,
            antenna_gain_rx: 1.0,
            rate_classes: None,
            flow_start_min: 1.0,
            flow_start_max: 5.0,
        }
    }
}

/// One run's complete parameter set.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub nodes: u32,
    pub area_x: f64,
    pub area_y: f64,
    pub range: f64,
    pub sim_time: f64,
    pub speed: f64,
    pub pause: f64,
    /// Channel rate, bit/s.
    pub rate: f64,
    /// Data packet size, bytes.
    pub pkt_size: u32,
    pub protocol: Protocol,
    pub seed: u64,
    pub flows: u32,
    pub cbr_interval: f64,
    pub t_rts: f64,
    pub t_cts: f64,
    pub t_sifs: f64,
    pub tuning: Tuning,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            nodes: 50,
            area_x: 1500.0,
            area_y: 300.0,
            range: 250.0,
            sim_time: 100.0,
            speed: 5.0,
            pause: 0.0,
            rate: 2e6,
            pkt_size: 512,
            protocol: Protocol::Carp,
            seed: 1,
            flows: 10,
            cbr_interval: 0.25,
            t_rts: 352e-6,
            t_cts: 304e-6,
            t_sifs: 10e-6,
            tuning: Tuning::default(),
        }
    }
}

impl ScenarioConfig {
    /// Applies one `key = value` pair from a file or flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: value.into(),
                why: "not a number".into(),
            })
        }
        match key {
            "nodes" => self.nodes = num(key, value)?,
            "area_x" => self.area_x = num(key, value)?,
            "area_y" => self.area_y = num(key, value)?,
            "range" => self.range = num(key, value)?,
            "sim_time" => self.sim_time = num(key, value)?,
            "speed" => self.speed = num(key, value)?,
            "pause" => self.pause = num(key, value)?,
            "rate" => self.rate = num(key, value)?,
            "pkt_size" => self.pkt_size = num(key, value)?,
            "protocol" => self.protocol = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "flows" => self.flows = num(key, value)?,
            "cbr_interval" => self.cbr_interval = num(key, value)?,
            "t_rts" => self.t_rts = num(key, value)?,
            "t_cts" => self.t_cts = num(key, value)?,
            "t_sifs" => self.t_sifs = num(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Loads a scenario file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<ScenarioConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = ScenarioConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Checks scenario invariants; call before building a simulation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.nodes < 2 {
            return fail(format!("nodes must be >= 2, got {}", self.nodes));
        }
        for (name, v) in [
            ("area_x", self.area_x),
            ("area_y", self.area_y),
            ("range", self.range),
            ("sim_time", self.sim_time),
            ("speed", self.speed),
            ("rate", self.rate),
            ("cbr_interval", self.cbr_interval),
            ("t_rts", self.t_rts),
            ("t_cts", self.t_cts),
            ("t_sifs", self.t_sifs),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be strictly positive, got {v}"));
            }
        }
        if !(self.pause.is_finite() && self.pause >= 0.0) {
            return fail(format!("pause must be non-negative, got {}", self.pause));
        }
        if self.pkt_size == 0 {
            return fail("pkt_size must be positive".into());
        }
        if self.range > self.area_x.max(self.area_y) {
            return fail(format!(
                "range {} exceeds the larger area dimension {}",
                self.range,
                self.area_x.max(self.area_y)
            ));
        }
        if self.flows > 0 {
            let pairs = self.nodes as u64 * (self.nodes as u64 - 1);
            if self.flows as u64 > pairs {
                return fail(format!(
                    "{} flows need more distinct node pairs than {} nodes provide",
                    self.flows, self.nodes
                ));
            }
        }
        if let Some(classes) = &self.tuning.rate_classes {
            if classes.is_empty() || classes.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                return fail("rate_classes must be non-empty and positive".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_standard_scenario() {
        let cfg = ScenarioConfig::default();
        assert_eq!(cfg.nodes, 50);
        assert_eq!(cfg.area_x, 1500.0);
        assert_eq!(cfg.area_y, 300.0);
        assert_eq!(cfg.range, 250.0);
        assert_eq!(cfg.sim_time, 100.0);
        assert_eq!(cfg.speed, 5.0);
        assert_eq!(cfg.rate, 2e6);
        assert_eq!(cfg.pkt_size, 512);
        cfg.validate().unwrap();
    }

    #[test]
    fn parses_flat_key_value_text() {
        let mut cfg = ScenarioConfig::default();
        cfg.apply_text(
            "# scenario\nnodes = 25\npause = 10\nprotocol = aomdv\nseed = 99\n\nrange=200 # inline\n",
        )
        .unwrap();
        assert_eq!(cfg.nodes, 25);
        assert_eq!(cfg.pause, 10.0);
        assert_eq!(cfg.protocol, Protocol::Aomdv);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.range, 200.0);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = ScenarioConfig::default();
        let err = cfg.apply_text("velocity = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(_)));
    }

    #[test]
    fn validation_catches_bad_scenarios() {
        let mut cfg = ScenarioConfig::default();
        cfg.nodes = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.range = 2000.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.speed = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_protocol_is_rejected() {
        let mut cfg = ScenarioConfig::default();
        assert!(cfg.apply_text("protocol = dsr\n").is_err());
    }
}
