//! Node placement, random-waypoint mobility, and free-space radio
//! propagation: decides who can hear whom and at what received power.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{NodeId, ScenarioConfig, SimTime};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("received power is singular at zero distance (collocated nodes)")]
    CollocatedNodes,
}

/// A point inside the rectangular simulation area, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn distance(self, other: Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Free-space propagation parameters shared by every node.
#[derive(Debug, Clone, Copy)]
pub struct RadioParams {
    /// Transmit power, watts.
    pub p_t: f64,
    /// Carrier wavelength, meters.
    pub lambda: f64,
    pub g_t: f64,
    pub g_r: f64,
    /// Hard-disk connectivity radius, meters.
    pub range: f64,
}

impl RadioParams {
    pub fn from_config(cfg: &ScenarioConfig) -> RadioParams {
        RadioParams {
            p_t: cfg.tuning.tx_power,
            lambda: cfg.tuning.wavelength,
            g_t: cfg.tuning.antenna_gain_tx,
            g_r: cfg.tuning.antenna_gain_rx,
            range: cfg.range,
        }
    }

    /// Received power at distance `d` under these parameters.
    pub fn power_at(&self, d: f64) -> Result<f64, WorldError> {
        received_power(self.p_t, self.lambda, d, self.g_t, self.g_r)
    }
}

/// Free-space received power: P_t * (lambda / 4 pi d)^2 * G_t * G_r.
/// Strictly decreasing in `d`; singular at d = 0.
pub fn received_power(p_t: f64, lambda: f64, d: f64, g_t: f64, g_r: f64) -> Result<f64, WorldError> {
    if d <= 0.0 {
        return Err(WorldError::CollocatedNodes);
    }
    let bracket = lambda / (4.0 * std::f64::consts::PI * d);
    Ok(p_t * bracket * bracket * g_t * g_r)
}

/// Disk connectivity: true iff the Euclidean distance is at most `range`
/// (boundary inclusive). Symmetric in its arguments.
pub fn in_range(a: Position, b: Position, range: f64) -> bool {
    a.distance(b) <= range
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MobilityPhase {
    Moving,
    Paused,
}

/// One node's random-waypoint state. While moving, `current` is the position
/// at `anchored_at` and the node travels toward `waypoint` at `speed`;
/// `phase_ends` is the arrival time. While paused, `phase_ends` is when the
/// next leg starts.
#[derive(Debug, Clone)]
pub struct MobilityState {
    pub current: Position,
    pub waypoint: Position,
    pub speed: f64,
    pub phase: MobilityPhase,
    pub phase_ends: SimTime,
    pub anchored_at: SimTime,
}

impl MobilityState {
    fn new_leg(from: Position, to: Position, speed: f64, now: SimTime) -> MobilityState {
        let dist = from.distance(to);
        MobilityState {
            current: from,
            waypoint: to,
            speed,
            phase: MobilityPhase::Moving,
            phase_ends: now.after(dist / speed),
            anchored_at: now,
        }
    }

    /// Position at `now`, interpolated along the current leg. Pure; valid for
    /// any `now` between the anchor and the next phase boundary.
    pub fn position_at(&self, now: SimTime) -> Position {
        match self.phase {
            MobilityPhase::Paused => self.current,
            MobilityPhase::Moving => {
                let dist = self.current.distance(self.waypoint);
                if dist == 0.0 {
                    return self.current;
                }
                let travelled = (self.speed * now.since(self.anchored_at)).min(dist);
                let f = travelled / dist;
                Position {
                    x: self.current.x + (self.waypoint.x - self.current.x) * f,
                    y: self.current.y + (self.waypoint.y - self.current.y) * f,
                }
            }
        }
    }
}

fn draw_position(rng: &mut ChaCha8Rng, width: f64, height: f64) -> Position {
    Position {
        x: rng.gen_range(0.0..=width),
        y: rng.gen_range(0.0..=height),
    }
}

fn draw_waypoint(rng: &mut ChaCha8Rng, from: Position, width: f64, height: f64) -> Position {
    // Degenerate zero-length legs would stall the waypoint event chain.
    loop {
        let p = draw_position(rng, width, height);
        if from.distance(p) > 1e-6 {
            return p;
        }
    }
}

/// Advances a node's random-waypoint state through any phase boundaries at or
/// before `now`: travel to the waypoint, dwell exactly `pause` seconds, draw
/// a fresh uniform waypoint, repeat. Returns the next phase-boundary time.
pub fn advance_mobility(
    node: &mut MobilityState,
    now: SimTime,
    rng: &mut ChaCha8Rng,
    area: (f64, f64),
    speed: f64,
    pause: f64,
) -> SimTime {
    while node.phase_ends <= now {
        match node.phase {
            MobilityPhase::Moving => {
                node.current = node.waypoint;
                node.anchored_at = node.phase_ends;
                node.phase = MobilityPhase::Paused;
                node.phase_ends = node.phase_ends.after(pause);
            }
            MobilityPhase::Paused => {
                let next = draw_waypoint(rng, node.current, area.0, area.1);
                *node = MobilityState::new_leg(node.current, next, speed, node.phase_ends);
            }
        }
    }
    // Catch the interpolation anchor up so callers may mutate speed later.
    if node.phase == MobilityPhase::Moving && now > node.anchored_at {
        node.current = node.position_at(now);
        node.anchored_at = now;
    }
    node.phase_ends
}

/// All node positions plus shared radio and area parameters.
#[derive(Debug)]
pub struct World {
    pub area: (f64, f64),
    pub radio: RadioParams,
    pub speed: f64,
    pub pause: f64,
    nodes: Vec<MobilityState>,
}

impl World {
    /// Places nodes uniformly at random (topology stream) and starts each on
    /// a leg toward a uniform waypoint (mobility stream).
    pub fn new(
        cfg: &ScenarioConfig,
        topology: &mut ChaCha8Rng,
        mobility: &mut ChaCha8Rng,
    ) -> World {
        let area = (cfg.area_x, cfg.area_y);
        let nodes = (0..cfg.nodes)
            .map(|_| {
                let start = draw_position(topology, area.0, area.1);
                let wp = draw_waypoint(mobility, start, area.0, area.1);
                MobilityState::new_leg(start, wp, cfg.speed, SimTime::ZERO)
            })
            .collect();
        World {
            area,
            radio: RadioParams::from_config(cfg),
            speed: cfg.speed,
            pause: cfg.pause,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn state(&self, node: NodeId) -> &MobilityState {
        &self.nodes[node.index()]
    }

    pub fn position(&self, node: NodeId, now: SimTime) -> Position {
        self.nodes[node.index()].position_at(now)
    }

    pub fn distance(&self, a: NodeId, b: NodeId, now: SimTime) -> f64 {
        self.position(a, now).distance(self.position(b, now))
    }

    pub fn in_range(&self, a: NodeId, b: NodeId, now: SimTime) -> bool {
        in_range(self.position(a, now), self.position(b, now), self.radio.range)
    }

    /// Nodes within radio range of `node` at `now`, ascending by id.
    pub fn neighbors(&self, node: NodeId, now: SimTime) -> Vec<NodeId> {
        let here = self.position(node, now);
        (0..self.nodes.len() as u32)
            .map(NodeId)
            .filter(|other| {
                *other != node && in_range(here, self.position(*other, now), self.radio.range)
            })
            .collect()
    }

    /// Received power on the link a -> b at `now`.
    pub fn link_power(&self, a: NodeId, b: NodeId, now: SimTime) -> Result<f64, WorldError> {
        self.radio.power_at(self.distance(a, b, now))
    }

    /// Processes the waypoint event for `node` and returns the next one.
    pub fn advance(&mut self, node: NodeId, now: SimTime, rng: &mut ChaCha8Rng) -> SimTime {
        let (area, speed, pause) = (self.area, self.speed, self.pause);
        advance_mobility(&mut self.nodes[node.index()], now, rng, area, speed, pause)
    }

    /// First phase boundary, used to seed the per-node waypoint events.
    pub fn next_boundary(&self, node: NodeId) -> SimTime {
        self.nodes[node.index()].phase_ends
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Engine, RngLabel};
    use proptest::prelude::*;

    fn pos(x: f64, y: f64) -> Position {
        Position { x, y }
    }

    #[test]
    fn received_power_matches_reference_point() {
        // High-precision evaluation of the free-space formula at the
        // range-edge point: 1.0 * (0.125 / (4*pi*250))^2.
        let p = received_power(1.0, 0.125, 250.0, 1.0, 1.0).unwrap();
        assert!((p - 1.58314e-9).abs() < 1e-14, "got {p:e}");
    }

    #[test]
    fn received_power_identity_distance() {
        // d = lambda / 4 pi makes the bracket equal one.
        let d = 0.125 / (4.0 * std::f64::consts::PI);
        let p = received_power(1.0, 0.125, d, 1.0, 1.0).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn received_power_inverse_square() {
        let p1 = received_power(2.5, 0.125, 100.0, 1.0, 1.0).unwrap();
        let p2 = received_power(2.5, 0.125, 200.0, 1.0, 1.0).unwrap();
        assert!((p1 / p2 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_distance_is_singular() {
        assert!(received_power(1.0, 0.125, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn range_boundary_is_inclusive() {
        assert!(in_range(pos(0.0, 0.0), pos(250.0, 0.0), 250.0));
        assert!(!in_range(pos(0.0, 0.0), pos(250.01, 0.0), 250.0));
        // 3-4-5 triangle scaled by 50: distance exactly 250.
        assert!(in_range(pos(0.0, 0.0), pos(150.0, 200.0), 250.0));
    }

    #[test]
    fn straight_line_kinematics() {
        let leg = MobilityState::new_leg(pos(0.0, 0.0), pos(300.0, 400.0), 5.0, SimTime::ZERO);
        let p = leg.position_at(SimTime::from_secs(10.0));
        assert!((p.x - 30.0).abs() < 1e-12);
        assert!((p.y - 40.0).abs() < 1e-12);
        // Leg length 500 at 5 m/s arrives exactly 100 s after start.
        assert_eq!(leg.phase_ends, SimTime::from_secs(100.0));
    }

    #[test]
    fn zero_pause_transitions_directly_to_a_new_leg() {
        let mut rng = Engine::stream_for(7, RngLabel::Mobility);
        let mut st = MobilityState::new_leg(pos(0.0, 0.0), pos(30.0, 40.0), 5.0, SimTime::ZERO);
        let arrive = st.phase_ends;
        let next = advance_mobility(&mut st, arrive, &mut rng, (1500.0, 300.0), 5.0, 0.0);
        assert_eq!(st.phase, MobilityPhase::Moving);
        assert_eq!(st.anchored_at, arrive);
        assert!(next > arrive);
    }

    #[test]
    fn pause_dwell_is_exact() {
        let mut rng = Engine::stream_for(7, RngLabel::Mobility);
        let mut st = MobilityState::new_leg(pos(0.0, 0.0), pos(30.0, 40.0), 5.0, SimTime::ZERO);
        let arrive = st.phase_ends;
        let next = advance_mobility(&mut st, arrive, &mut rng, (1500.0, 300.0), 5.0, 20.0);
        assert_eq!(st.phase, MobilityPhase::Paused);
        assert_eq!(next, arrive.after(20.0));
    }

    #[test]
    fn waypoint_sequences_are_deterministic() {
        let run = |seed| {
            let cfg = ScenarioConfig::default();
            let mut topo = Engine::stream_for(seed, RngLabel::Topology);
            let mut mob = Engine::stream_for(seed, RngLabel::Mobility);
            let mut world = World::new(&cfg, &mut topo, &mut mob);
            let mut rng = mob;
            let mut out = Vec::new();
            for step in 1..=50 {
                let t = SimTime::from_secs(step as f64 * 7.0);
                for n in 0..world.len() as u32 {
                    if world.next_boundary(NodeId(n)) <= t {
                        world.advance(NodeId(n), t, &mut rng);
                    }
                    let p = world.position(NodeId(n), t);
                    out.push((p.x, p.y));
                }
            }
            out
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    proptest! {
        #[test]
        fn positions_stay_inside_the_area(seed in 0u64..500, queries in prop::collection::vec(0.0f64..100.0, 1..30)) {
            let cfg = ScenarioConfig { nodes: 5, ..ScenarioConfig::default() };
            let mut topo = Engine::stream_for(seed, RngLabel::Topology);
            let mut mob = Engine::stream_for(seed, RngLabel::Mobility);
            let mut world = World::new(&cfg, &mut topo, &mut mob);
            let mut rng = Engine::stream_for(seed.wrapping_add(1), RngLabel::Mobility);
            let mut times = queries.clone();
            times.sort_by(f64::total_cmp);
            for t in times {
                let now = SimTime::from_secs(t);
                for n in 0..world.len() as u32 {
                    while world.next_boundary(NodeId(n)) <= now {
                        world.advance(NodeId(n), now, &mut rng);
                    }
                    let p = world.position(NodeId(n), now);
                    prop_assert!(p.x >= -1e-9 && p.x <= cfg.area_x + 1e-9);
                    prop_assert!(p.y >= -1e-9 && p.y <= cfg.area_y + 1e-9);
                }
            }
        }

        #[test]
        fn received_power_is_monotone_and_linear(
            p_t in 0.01f64..100.0,
            lambda in 0.01f64..1.0,
            d in 1.0f64..1000.0,
            k in 1.1f64..10.0,
        ) {
            let base = received_power(p_t, lambda, d, 1.0, 1.0).unwrap();
            let further = received_power(p_t, lambda, d * k, 1.0, 1.0).unwrap();
            prop_assert!(further < base);
            let scaled = received_power(p_t * k, lambda, d, 1.0, 1.0).unwrap();
            prop_assert!((scaled / base - k).abs() < 1e-9);
        }
    }
}
