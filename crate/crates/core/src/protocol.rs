//! Wave-relay communication automaton.
//!
//! Every agent cycles through three modes. An inactive agent either relays
//! the first message it hears (appending its own reading) or, once its ping
//! timer expires, initiates a fresh message. Broadcasting puts it in the
//! active mode for exactly one timestep, after which it is refractory and
//! deaf to incoming traffic for `refractory` timesteps. The refractory
//! interval is what turns local relaying into a single outward-moving wave
//! instead of an echo.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cimax::StoredObservation;

pub type AgentId = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cycle length t_p_max must be at least 1 (got {0})")]
    CycleTooShort(u32),
    #[error("relay delay must be at least 1 timestep (got {0})")]
    DelayTooShort(u32),
    #[error(
        "refractory time must exceed twice the relay delay (t_ref = {refractory}, t_delay = {delay}); \
         otherwise a relayed wave re-excites its sender"
    )]
    RefractoryTooShort { refractory: u32, delay: u32 },
    #[error(
        "cycle length {cycle} must exceed diameter_hops * t_delay + t_ref = {bound} \
         so a wave finishes before the next cycle"
    )]
    CycleShorterThanWave { cycle: u32, bound: u64 },
    #[error("message entry cap must be at least 1")]
    ZeroEntryCap,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Inactive,
    Active,
    Refractory,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Inactive => "inactive",
            Mode::Active => "active",
            Mode::Refractory => "refractory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    /// Cycle length `t_p_max`: the ping timer is armed uniformly in `[1, cycle_length]`.
    pub cycle_length: u32,
    /// Refractory duration in timesteps.
    pub refractory: u32,
    /// Relay delay in timesteps.
    pub relay_delay: u32,
    /// Optional cap on entries per message; the oldest entry is dropped on overflow.
    #[serde(default)]
    pub max_entries: Option<usize>,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            cycle_length: 400,
            refractory: 10,
            relay_delay: 1,
            max_entries: None,
        }
    }
}

impl ProtocolParams {
    /// Checks the parameter-only invariants.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cycle_length < 1 {
            return Err(ConfigError::CycleTooShort(self.cycle_length));
        }
        if self.relay_delay < 1 {
            return Err(ConfigError::DelayTooShort(self.relay_delay));
        }
        if self.refractory <= 2 * self.relay_delay {
            return Err(ConfigError::RefractoryTooShort {
                refractory: self.refractory,
                delay: self.relay_delay,
            });
        }
        if self.max_entries == Some(0) {
            return Err(ConfigError::ZeroEntryCap);
        }
        Ok(())
    }

    /// Checks that a wave crossing a swarm of the given hop diameter ends
    /// within one cycle.
    pub fn validate_for_diameter(&self, diameter_hops: usize) -> Result<(), ConfigError> {
        self.validate()?;
        let bound = diameter_hops as u64 * self.relay_delay as u64 + self.refractory as u64;
        if self.cycle_length as u64 <= bound {
            return Err(ConfigError::CycleShorterThanWave {
                cycle: self.cycle_length,
                bound,
            });
        }
        Ok(())
    }
}

/// One appended reading. `direction` is the contributor's preferred
/// direction at the time of appending, when the running mode carries one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub agent: AgentId,
    pub value: f64,
    pub direction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub initiator_id: AgentId,
    pub hop_count: u32,
    pub entries: Vec<Entry>,
}

impl Message {
    pub fn initiate(agent: AgentId, reading: f64) -> Self {
        Self {
            initiator_id: agent,
            hop_count: 0,
            entries: vec![Entry {
                agent,
                value: reading,
                direction: None,
            }],
        }
    }

    pub fn measurements(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    /// Direction stamped by the most recent sender.
    pub fn preferred_direction(&self) -> Option<f64> {
        self.entries.last().and_then(|e| e.direction)
    }

    pub fn is_well_formed(&self) -> bool {
        !self.entries.is_empty()
    }

    /// Appends a reading as a relay hop.
    fn relay(&self, agent: AgentId, reading: f64, cap: Option<usize>) -> Self {
        let mut out = self.clone();
        out.hop_count += 1;
        out.entries.push(Entry {
            agent,
            value: reading,
            direction: None,
        });
        if let Some(cap) = cap {
            let excess = out.entries.len().saturating_sub(cap);
            out.entries.drain(..excess);
        }
        out
    }

    pub fn set_own_direction(&mut self, direction: Option<f64>) {
        if let Some(last) = self.entries.last_mut() {
            last.direction = direction;
        }
    }
}

/// A message as it arrives at a recipient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub sender: AgentId,
    /// Angle from the recipient toward the sender.
    pub bearing: f64,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub mode: Mode,
    pub refractory_remaining: u32,
    /// Ping timer `t_p`; may run below zero while the agent is busy.
    pub ping_timer: i64,
}

impl AgentState {
    pub fn new<R: Rng + ?Sized>(params: &ProtocolParams, rng: &mut R) -> Result<Self, ConfigError> {
        Ok(Self {
            mode: Mode::Inactive,
            refractory_remaining: 0,
            ping_timer: arm_ping_timer(rng, params)? as i64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolDiagnostic {
    MalformedMessage { sender: AgentId, hop_count: u32 },
}

#[derive(Debug, Clone, Default)]
pub struct TickOutcome {
    /// Message broadcast this timestep.
    pub outgoing: Option<Message>,
    /// Set when the outgoing message is a relay of a received one.
    pub received: Option<Delivery>,
    pub observation: Option<StoredObservation>,
    pub diagnostics: Vec<ProtocolDiagnostic>,
}

impl TickOutcome {
    pub fn initiated(&self) -> bool {
        self.outgoing.is_some() && self.received.is_none()
    }
}

/// Draws a ping timer uniformly from `[1, cycle_length]` with a single RNG draw.
pub fn arm_ping_timer<R: Rng + ?Sized>(rng: &mut R, params: &ProtocolParams) -> Result<u32, ConfigError> {
    if params.cycle_length < 1 {
        return Err(ConfigError::CycleTooShort(params.cycle_length));
    }
    Ok(rng.gen_range(1..=params.cycle_length))
}

/// Advances one agent by one timestep.
///
/// The broadcast happens in the same timestep the agent becomes active, so
/// a relay chain advances one hop per `relay_delay`. The agent then spends
/// the following timestep leaving the active mode and `refractory`
/// timesteps deaf. Among several simultaneous deliveries the one from the
/// lowest sender id wins.
///
/// The ping timer fires whether or not the agent is listening: a
/// refractory agent whose timer runs out initiates at once and restarts
/// its refractory period afterwards. Only a reception in the same
/// timestep takes priority; the timer then fires once the agent is
/// refractory.
pub fn tick<R: Rng + ?Sized>(
    state: &mut AgentState,
    params: &ProtocolParams,
    inbox: &[Delivery],
    own_measurement: f64,
    agent: AgentId,
    rng: &mut R,
) -> TickOutcome {
    let mut outcome = TickOutcome::default();
    state.ping_timer -= 1;

    if state.mode == Mode::Refractory && state.ping_timer <= 0 {
        initiate(state, params, &mut outcome, agent, own_measurement, rng);
        return outcome;
    }

    match state.mode {
        Mode::Refractory => {
            state.refractory_remaining = state.refractory_remaining.saturating_sub(1);
            if state.refractory_remaining == 0 {
                state.mode = Mode::Inactive;
            }
        }
        Mode::Active => {
            state.mode = Mode::Refractory;
            state.refractory_remaining = params.refractory;
            if state.refractory_remaining == 0 {
                state.mode = Mode::Inactive;
            }
        }
        Mode::Inactive => {
            let mut chosen: Option<&Delivery> = None;
            for delivery in inbox {
                if !delivery.message.is_well_formed() {
                    outcome.diagnostics.push(ProtocolDiagnostic::MalformedMessage {
                        sender: delivery.sender,
                        hop_count: delivery.message.hop_count,
                    });
                    continue;
                }
                if chosen.is_none_or(|c| delivery.sender < c.sender) {
                    chosen = Some(delivery);
                }
            }

            if let Some(delivery) = chosen {
                let relayed = delivery.message.relay(agent, own_measurement, params.max_entries);
                outcome.observation =
                    StoredObservation::from_measurements(&relayed.measurements(), delivery.bearing).ok();
                outcome.outgoing = Some(relayed);
                outcome.received = Some(delivery.clone());
                state.mode = Mode::Active;
            } else if state.ping_timer <= 0 {
                initiate(state, params, &mut outcome, agent, own_measurement, rng);
            }
        }
    }
    outcome
}

fn initiate<R: Rng + ?Sized>(
    state: &mut AgentState,
    params: &ProtocolParams,
    outcome: &mut TickOutcome,
    agent: AgentId,
    own_measurement: f64,
    rng: &mut R,
) {
    outcome.outgoing = Some(Message::initiate(agent, own_measurement));
    state.mode = Mode::Active;
    state.refractory_remaining = 0;
    // cycle_length was validated when the state was created
    state.ping_timer = rng.gen_range(1..=params.cycle_length.max(1)) as i64;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn inactive(timer: i64) -> AgentState {
        AgentState {
            mode: Mode::Inactive,
            refractory_remaining: 0,
            ping_timer: timer,
        }
    }

    fn delivery(sender: AgentId, values: &[f64]) -> Delivery {
        Delivery {
            sender,
            bearing: 0.0,
            message: Message {
                initiator_id: sender,
                hop_count: values.len().saturating_sub(1) as u32,
                entries: values
                    .iter()
                    .map(|&value| Entry {
                        agent: sender,
                        value,
                        direction: None,
                    })
                    .collect(),
            },
        }
    }

    #[test]
    fn relay_appends_own_reading() {
        let params = ProtocolParams::default();
        let mut state = inactive(20);
        let out = tick(&mut state, &params, &[delivery(3, &[5.0])], 0.0, 7, &mut rng());
        assert_eq!(state.mode, Mode::Active);
        let msg = out.outgoing.unwrap();
        assert_eq!(msg.measurements(), vec![5.0, 0.0]);
        assert_eq!(msg.hop_count, 1);
        assert_eq!(msg.initiator_id, 3);
        let obs = out.observation.unwrap();
        assert_eq!(obs.variance, 6.25);
    }

    #[test]
    fn refractory_ignores_inbox_and_wakes() {
        let params = ProtocolParams::default();
        let mut state = AgentState {
            mode: Mode::Refractory,
            refractory_remaining: 1,
            ping_timer: 5,
        };
        let out = tick(&mut state, &params, &[delivery(0, &[1.0])], 0.0, 1, &mut rng());
        assert_eq!(state.mode, Mode::Inactive);
        assert!(out.outgoing.is_none());
        assert!(out.observation.is_none());
    }

    #[test]
    fn expired_timer_initiates_and_rearms() {
        let params = ProtocolParams::default();
        let mut state = inactive(1);
        let out = tick(&mut state, &params, &[], 2.5, 4, &mut rng());
        let msg = out.outgoing.unwrap();
        assert_eq!(msg.measurements(), vec![2.5]);
        assert_eq!(msg.hop_count, 0);
        assert_eq!(state.mode, Mode::Active);
        assert!(state.ping_timer >= 1 && state.ping_timer <= params.cycle_length as i64);
    }

    #[test]
    fn active_lasts_one_step_then_full_refractory() {
        let params = ProtocolParams::default();
        let mut r = rng();
        let mut state = inactive(1);
        tick(&mut state, &params, &[], 0.0, 0, &mut r);
        assert_eq!(state.mode, Mode::Active);
        state.ping_timer = 1000;
        tick(&mut state, &params, &[], 0.0, 0, &mut r);
        assert_eq!(state.mode, Mode::Refractory);
        assert_eq!(state.refractory_remaining, params.refractory);
        let mut steps = 0;
        while state.mode == Mode::Refractory {
            let out = tick(&mut state, &params, &[delivery(1, &[0.0])], 0.0, 0, &mut r);
            assert!(out.outgoing.is_none());
            steps += 1;
        }
        assert_eq!(steps, params.refractory);
    }

    #[test]
    fn lowest_sender_wins_collision() {
        let params = ProtocolParams::default();
        let mut state = inactive(10);
        let inbox = [delivery(9, &[1.0]), delivery(2, &[3.0]), delivery(5, &[4.0])];
        let out = tick(&mut state, &params, &inbox, 0.0, 0, &mut rng());
        assert_eq!(out.received.unwrap().sender, 2);
    }

    #[test]
    fn incoming_takes_priority_over_expired_timer() {
        let params = ProtocolParams::default();
        let mut state = inactive(0);
        let out = tick(&mut state, &params, &[delivery(1, &[1.0])], 0.0, 0, &mut rng());
        assert!(out.received.is_some());
        assert!(state.ping_timer <= 0, "deferred initiation keeps the timer expired");
        let out = tick(&mut state, &params, &[], 0.0, 0, &mut rng());
        assert!(out.outgoing.is_none());
        assert_eq!(state.mode, Mode::Refractory);
        let out = tick(&mut state, &params, &[], 0.7, 0, &mut rng());
        assert_eq!(out.outgoing.unwrap().measurements(), vec![0.7]);
        assert_eq!(state.mode, Mode::Active);
    }

    #[test]
    fn expired_timer_fires_during_refractory() {
        let params = ProtocolParams::default();
        let mut state = AgentState {
            mode: Mode::Refractory,
            refractory_remaining: 6,
            ping_timer: 1,
        };
        let out = tick(&mut state, &params, &[delivery(3, &[1.0])], 2.0, 7, &mut rng());
        let msg = out.outgoing.unwrap();
        assert_eq!(msg.initiator_id, 7);
        assert_eq!(msg.measurements(), vec![2.0]);
        assert!(out.received.is_none());
        assert_eq!(state.mode, Mode::Active);
        assert!(state.ping_timer >= 1);
    }

    #[test]
    fn malformed_message_rejected() {
        let params = ProtocolParams::default();
        let mut state = inactive(10);
        let bad = Delivery {
            sender: 1,
            bearing: 0.0,
            message: Message {
                initiator_id: 1,
                hop_count: 2,
                entries: vec![],
            },
        };
        let out = tick(&mut state, &params, &[bad], 0.0, 0, &mut rng());
        assert_eq!(state.mode, Mode::Inactive);
        assert!(out.outgoing.is_none());
        assert_eq!(
            out.diagnostics,
            vec![ProtocolDiagnostic::MalformedMessage {
                sender: 1,
                hop_count: 2
            }]
        );
    }

    #[test]
    fn entry_cap_drops_oldest() {
        let params = ProtocolParams {
            max_entries: Some(3),
            ..ProtocolParams::default()
        };
        let mut state = inactive(10);
        let out = tick(
            &mut state,
            &params,
            &[delivery(1, &[1.0, 2.0, 3.0])],
            4.0,
            0,
            &mut rng(),
        );
        let msg = out.outgoing.unwrap();
        assert_eq!(msg.measurements(), vec![2.0, 3.0, 4.0]);
        assert_eq!(msg.hop_count, 3);
    }

    #[test]
    fn degenerate_cycle_always_one() {
        let params = ProtocolParams {
            cycle_length: 1,
            ..ProtocolParams::default()
        };
        let mut r = rng();
        assert!((0..100).all(|_| arm_ping_timer(&mut r, &params).unwrap() == 1));
    }

    #[test]
    fn zero_cycle_is_config_error() {
        let params = ProtocolParams {
            cycle_length: 0,
            ..ProtocolParams::default()
        };
        assert_eq!(arm_ping_timer(&mut rng(), &params), Err(ConfigError::CycleTooShort(0)));
    }

    #[test]
    fn timer_draw_is_uniform() {
        // Pearson chi-square over 10^5 draws on 25 cells.
        let params = ProtocolParams {
            cycle_length: 25,
            ..ProtocolParams::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000usize;
        let mut counts = [0usize; 25];
        for _ in 0..n {
            counts[arm_ping_timer(&mut r, &params).unwrap() as usize - 1] += 1;
        }
        let expected = n as f64 / 25.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let p = 1.0 - ChiSquared::new(24.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 = {chi2}, p = {p}");
    }

    #[test]
    fn timer_sequence_reproducible() {
        let params = ProtocolParams {
            cycle_length: 25,
            ..ProtocolParams::default()
        };
        let a: Vec<u32> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..50).map(|_| arm_ping_timer(&mut r, &params).unwrap()).collect()
        };
        let b: Vec<u32> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..50).map(|_| arm_ping_timer(&mut r, &params).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn isolated_agent_initiates_every_cycle_window() {
        let params = ProtocolParams {
            cycle_length: 25,
            ..ProtocolParams::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let mut state = AgentState::new(&params, &mut r).unwrap();
        let horizon = 100 * params.cycle_length as usize;
        let mut fired = Vec::new();
        for t in 0..horizon {
            if tick(&mut state, &params, &[], 0.0, 0, &mut r).initiated() {
                fired.push(t);
            }
        }
        let window = params.cycle_length as usize;
        for start in 0..horizon - window {
            assert!(
                fired.iter().any(|&t| t >= start && t < start + window),
                "no initiation in [{start}, {})",
                start + window
            );
        }
    }

    #[test]
    fn params_validation() {
        assert!(ProtocolParams::default().validate().is_ok());
        let bad = ProtocolParams {
            refractory: 2,
            ..ProtocolParams::default()
        };
        assert!(matches!(bad.validate(), Err(ConfigError::RefractoryTooShort { .. })));
        assert!(ProtocolParams::default().validate_for_diameter(8).is_ok());
        assert!(matches!(
            ProtocolParams::default().validate_for_diameter(390),
            Err(ConfigError::CycleShorterThanWave { .. })
        ));
    }
}
