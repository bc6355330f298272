//! Agent placement, the unit-disk neighbor graph, synchronous message
//! delivery and rigid translation of the whole swarm.
//!
//! Lengths are in units of the perception range. A [`World`] bundles
//! everything one run needs, including its RNG, so a world serialized with
//! [`World::to_json`] resumes bit-identically.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::EnvironmentField;
use crate::protocol::{self, AgentId, AgentState, ConfigError, Delivery, Message, Mode, ProtocolParams, TickOutcome};

pub const MAX_PLACEMENT_RETRIES: usize = 1000;

#[derive(Debug, Error)]
pub enum SwarmError {
    #[error("swarm needs at least 2 agents (got {0})")]
    TooFewAgents(usize),
    #[error(
        "could not place a connected swarm of {agents} agents in diameter {diameter} R \
         within {retries} attempts; density is infeasible"
    )]
    Infeasible {
        agents: usize,
        diameter: f64,
        retries: usize,
    },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Protocol(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Angle of the vector from `self` to `other`, in `[0, 2π)`.
    pub fn bearing_to(self, other: Point) -> f64 {
        crate::cimax::normalize_angle((other.y - self.y).atan2(other.x - self.x))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: AgentId,
    /// Angle from the querying agent toward this neighbor.
    pub bearing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmConfiguration {
    positions: Vec<Point>,
    range: f64,
    neighbors: Vec<Vec<Neighbor>>,
}

impl SwarmConfiguration {
    /// Builds the configuration from explicit positions. An edge joins two
    /// agents at distance `<= range`.
    pub fn from_positions(positions: Vec<Point>, range: f64) -> Result<Self, SwarmError> {
        if !(range > 0.0 && range.is_finite()) {
            return Err(SwarmError::Geometry(format!(
                "perception range must be positive, got {range}"
            )));
        }
        if let Some(p) = positions.iter().find(|p| !p.is_finite()) {
            return Err(SwarmError::Geometry(format!("non-finite position {p:?}")));
        }
        let n = positions.len();
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                if i != j && positions[i].distance(positions[j]) <= range {
                    neighbors[i].push(Neighbor {
                        id: j,
                        bearing: positions[i].bearing_to(positions[j]),
                    });
                }
            }
        }
        Ok(Self {
            positions,
            range,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn position(&self, id: AgentId) -> Point {
        self.positions[id]
    }

    pub fn neighbors(&self, id: AgentId) -> &[Neighbor] {
        &self.neighbors[id]
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn mean_degree(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.degrees().iter().sum::<usize>() as f64 / self.len() as f64
    }

    pub fn center_of_mass(&self) -> Point {
        let n = self.len().max(1) as f64;
        let (sx, sy) = self
            .positions
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / n, sy / n)
    }

    /// Hop distances from `source`; `None` for unreachable agents.
    pub fn hop_distances(&self, source: AgentId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for nb in &self.neighbors[u] {
                if dist[nb.id].is_none() {
                    dist[nb.id] = Some(du + 1);
                    queue.push_back(nb.id);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.is_empty() || self.hop_distances(0).iter().all(Option::is_some)
    }

    /// Largest hop distance between any two agents, or `None` if disconnected.
    pub fn hop_diameter(&self) -> Option<usize> {
        let mut best = 0;
        for s in 0..self.len() {
            for d in self.hop_distances(s) {
                best = best.max(d?);
            }
        }
        Some(best)
    }

    /// Translates every agent by `step` along `direction`. Bearings and the
    /// neighbor graph are unchanged by a rigid translation.
    pub fn translate(&mut self, direction: f64, step: f64) {
        let (dx, dy) = (step * direction.cos(), step * direction.sin());
        for p in &mut self.positions {
            p.x += dx;
            p.y += dy;
        }
    }

    pub fn moved(&self, direction: f64, step: f64) -> Self {
        let mut out = self.clone();
        out.translate(direction, step);
        out
    }

    /// Shifts the swarm so its center of mass sits at `center`.
    pub fn recenter(&mut self, center: Point) {
        let com = self.center_of_mass();
        for p in &mut self.positions {
            p.x += center.x - com.x;
            p.y += center.y - com.y;
        }
    }
}

/// Places `agents` points uniformly in a disk of the given diameter,
/// redrawing the whole placement until the neighbor graph is connected.
/// The result is shifted so the center of mass is exactly `center`.
pub fn place_swarm<R: Rng + ?Sized>(
    agents: usize,
    diameter: f64,
    center: Point,
    range: f64,
    rng: &mut R,
) -> Result<SwarmConfiguration, SwarmError> {
    if agents < 2 {
        return Err(SwarmError::TooFewAgents(agents));
    }
    if !(diameter >= 0.0 && diameter.is_finite()) || !center.is_finite() {
        return Err(SwarmError::Geometry(format!(
            "bad disk: diameter {diameter}, center {center:?}"
        )));
    }
    let radius = diameter / 2.0;
    for _ in 0..MAX_PLACEMENT_RETRIES {
        let positions = (0..agents)
            .map(|_| {
                let r = radius * rng.gen::<f64>().sqrt();
                let theta = 2.0 * PI * rng.gen::<f64>();
                Point::new(center.x + r * theta.cos(), center.y + r * theta.sin())
            })
            .collect();
        let mut config = SwarmConfiguration::from_positions(positions, range)?;
        if config.is_connected() {
            config.recenter(center);
            return Ok(config);
        }
    }
    Err(SwarmError::Infeasible {
        agents,
        diameter,
        retries: MAX_PLACEMENT_RETRIES,
    })
}

/// Agents on a horizontal line, `spacing` apart, starting at `start`.
pub fn line_swarm(agents: usize, spacing: f64, start: Point, range: f64) -> Result<SwarmConfiguration, SwarmError> {
    let positions = (0..agents)
        .map(|i| Point::new(start.x + spacing * i as f64, start.y))
        .collect();
    SwarmConfiguration::from_positions(positions, range)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledDelivery {
    pub recipient: AgentId,
    pub delivery: Delivery,
}

/// Messages in flight, keyed by delivery timestep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeliverySchedule {
    queue: BTreeMap<u64, Vec<ScheduledDelivery>>,
}

impl DeliverySchedule {
    pub fn push(&mut self, deliver_at: u64, recipient: AgentId, delivery: Delivery) {
        self.queue
            .entry(deliver_at)
            .or_default()
            .push(ScheduledDelivery { recipient, delivery });
    }

    /// Removes everything due at or before `now`.
    pub fn take_due(&mut self, now: u64) -> Vec<ScheduledDelivery> {
        let later = self.queue.split_off(&(now + 1));
        let due = std::mem::replace(&mut self.queue, later);
        due.into_values().flatten().collect()
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }

    pub fn len(&self) -> usize {
        self.queue.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

/// Hook run right after each agent's protocol tick, before its broadcast
/// (if any) is scheduled. Decision logic lives behind this trait.
pub trait Behavior {
    fn after_tick(&mut self, _agent: AgentId, _outcome: &mut TickOutcome, _rng: &mut ChaCha8Rng) {}
}

/// Plain relaying with no decision layer.
pub struct Relay;

impl Behavior for Relay {}

#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub agent: AgentId,
    pub initiator_id: AgentId,
    pub hop_count: u32,
    pub initiated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentLogRow {
    pub t: u64,
    pub agent_id: AgentId,
    pub x: f64,
    pub y: f64,
    pub mode: Mode,
    pub measurement: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub swarm: SwarmConfiguration,
    pub field: EnvironmentField,
    pub params: ProtocolParams,
    pub agents: Vec<AgentState>,
    pub schedule: DeliverySchedule,
    pub clock: u64,
    pub rng: ChaCha8Rng,
    #[serde(skip)]
    log: Option<Vec<AgentLogRow>>,
}

impl World {
    pub fn new(
        swarm: SwarmConfiguration,
        field: EnvironmentField,
        params: ProtocolParams,
        rng: ChaCha8Rng,
    ) -> Result<Self, SwarmError> {
        params.validate()?;
        let mut world = Self {
            agents: Vec::with_capacity(swarm.len()),
            swarm,
            field,
            params,
            schedule: DeliverySchedule::default(),
            clock: 0,
            rng,
            log: None,
        };
        world.reset_protocol()?;
        Ok(world)
    }

    pub fn from_seed(
        swarm: SwarmConfiguration,
        field: EnvironmentField,
        params: ProtocolParams,
        seed: u64,
    ) -> Result<Self, SwarmError> {
        Self::new(swarm, field, params, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Puts every agent back to inactive with a fresh ping timer and drops
    /// in-flight messages. Used at each phase boundary.
    pub fn reset_protocol(&mut self) -> Result<(), SwarmError> {
        self.schedule.clear();
        self.agents.clear();
        for _ in 0..self.swarm.len() {
            self.agents.push(AgentState::new(&self.params, &mut self.rng)?);
        }
        Ok(())
    }

    pub fn enable_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn take_log(&mut self) -> Vec<AgentLogRow> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(json: &str) -> serde_json::Result<Self> {
        serde_json::from_str(json)
    }
}

/// Advances the world by one timestep: delivers due messages, ticks each
/// agent in ascending id with a fresh reading, and schedules every
/// broadcast to all neighbors `relay_delay` timesteps later.
pub fn step_simulation<B: Behavior + ?Sized>(world: &mut World, behavior: &mut B) -> Vec<Broadcast> {
    let n = world.swarm.len();
    let mut inboxes: Vec<Vec<Delivery>> = vec![Vec::new(); n];
    for scheduled in world.schedule.take_due(world.clock) {
        inboxes[scheduled.recipient].push(scheduled.delivery);
    }

    let mut broadcasts = Vec::new();
    let deliver_at = world.clock + world.params.relay_delay as u64;
    for (id, inbox) in inboxes.iter().enumerate() {
        let position = world.swarm.position(id);
        let reading = world.field.sample(position, &mut world.rng);
        let mut outcome = protocol::tick(&mut world.agents[id], &world.params, inbox, reading, id, &mut world.rng);
        for diag in &outcome.diagnostics {
            log::warn!("agent {id} at t={}: {diag:?}", world.clock);
        }
        behavior.after_tick(id, &mut outcome, &mut world.rng);

        if let Some(log) = world.log.as_mut() {
            log.push(AgentLogRow {
                t: world.clock,
                agent_id: id,
                x: position.x,
                y: position.y,
                mode: world.agents[id].mode,
                measurement: reading,
            });
        }

        if let Some(message) = outcome.outgoing {
            broadcasts.push(Broadcast {
                agent: id,
                initiator_id: message.initiator_id,
                hop_count: message.hop_count,
                initiated: outcome.received.is_none(),
            });
            schedule_broadcast(world, id, message, deliver_at);
        }
    }
    world.clock += 1;
    broadcasts
}

fn schedule_broadcast(world: &mut World, sender: AgentId, message: Message, deliver_at: u64) {
    let neighbors = world.swarm.neighbors(sender);
    for nb in neighbors {
        // the recipient sees the sender in the opposite direction
        let bearing = crate::cimax::normalize_angle(nb.bearing + PI);
        world.schedule.push(
            deliver_at,
            nb.id,
            Delivery {
                sender,
                bearing,
                message: message.clone(),
            },
        );
    }
}

/// Number of agents currently in each mode: (inactive, active, refractory).
pub fn mode_counts(world: &World) -> (usize, usize, usize) {
    world.agents.iter().fold((0, 0, 0), |(i, a, r), s| match s.mode {
        Mode::Inactive => (i + 1, a, r),
        Mode::Active => (i, a + 1, r),
        Mode::Refractory => (i, a, r + 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn tiny_disk_forces_adjacency() {
        let s = place_swarm(2, 0.5, Point::new(0.0, 0.0), 1.0, &mut rng(1)).unwrap();
        assert_eq!(s.degrees(), vec![1, 1]);
    }

    #[test]
    fn line_is_path_graph() {
        let s = line_swarm(4, 0.9, Point::new(0.0, 0.0), 1.0).unwrap();
        assert_eq!(s.degrees(), vec![1, 2, 2, 1]);
        assert_eq!(s.neighbors(0)[0].bearing, 0.0);
        assert!((s.neighbors(1)[0].bearing - PI).abs() < 1e-12);
        assert_eq!(s.hop_diameter(), Some(3));
    }

    #[test]
    fn neighbors_match_distance_check() {
        let s = place_swarm(61, 6.0, Point::new(0.0, 0.0), 1.0, &mut rng(2)).unwrap();
        for i in 0..s.len() {
            let mut ids: Vec<_> = s.neighbors(i).iter().map(|n| n.id).collect();
            ids.sort_unstable();
            let brute: Vec<_> = (0..s.len())
                .filter(|&j| j != i && s.position(i).distance(s.position(j)) <= 1.0)
                .collect();
            assert_eq!(ids, brute);
        }
    }

    #[test]
    fn placement_recenters() {
        let s = place_swarm(61, 6.0, Point::new(-2.5, 0.0), 1.0, &mut rng(3)).unwrap();
        let c = s.center_of_mass();
        assert!((c.x + 2.5).abs() < 1e-12 && c.y.abs() < 1e-12);
        assert!(s.is_connected());
    }

    #[test]
    fn infeasible_density_fails_loudly() {
        let err = place_swarm(3, 100.0, Point::new(0.0, 0.0), 1.0, &mut rng(4)).unwrap_err();
        assert!(matches!(err, SwarmError::Infeasible { agents: 3, .. }));
        assert!(matches!(
            place_swarm(1, 1.0, Point::new(0.0, 0.0), 1.0, &mut rng(4)),
            Err(SwarmError::TooFewAgents(1))
        ));
    }

    #[test]
    fn move_swarm_translates() {
        let s = place_swarm(20, 3.0, Point::new(0.0, 0.0), 1.0, &mut rng(5)).unwrap();
        let m = s.moved(0.0, 0.33);
        assert!((m.center_of_mass().x - 0.33).abs() < 1e-12);
        assert_eq!(s.moved(1.0, 0.0), s);
        let back = s.moved(0.7, 0.33).moved(0.7 + PI, 0.33);
        for (a, b) in s.positions().iter().zip(back.positions()) {
            assert!(a.distance(*b) < 1e-12);
        }
        assert_eq!(m.degrees(), s.degrees());
    }

    #[test]
    fn schedule_takes_only_due() {
        let mut q = DeliverySchedule::default();
        let d = Delivery {
            sender: 0,
            bearing: 0.0,
            message: Message::initiate(0, 1.0),
        };
        q.push(3, 1, d.clone());
        q.push(5, 2, d);
        assert_eq!(q.take_due(2).len(), 0);
        assert_eq!(q.take_due(4).len(), 1);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn all_refractory_swarm_stays_quiet() {
        let s = line_swarm(5, 0.9, Point::new(0.0, 0.0), 1.0).unwrap();
        let mut w = World::from_seed(s, EnvironmentField::uniform(0.0), ProtocolParams::default(), 1).unwrap();
        for a in &mut w.agents {
            a.mode = Mode::Refractory;
            a.refractory_remaining = 5;
            a.ping_timer = 100;
        }
        w.schedule.push(
            0,
            2,
            Delivery {
                sender: 1,
                bearing: PI,
                message: Message::initiate(1, 3.0),
            },
        );
        for _ in 0..5 {
            assert!(step_simulation(&mut w, &mut Relay).is_empty());
        }
        assert_eq!(mode_counts(&w), (5, 0, 0));
    }
}
