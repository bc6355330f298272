//! Variance-driven collective direction finding.
//!
//! Each negotiation period has three parts. During *gathering* every
//! relayed message grows by one reading per hop, and each recipient stores
//! the variance of the extended message together with the bearing it came
//! from. *Evaluation* bins stored variances by bearing and picks the sector
//! with the largest mean variance as the agent's preferred direction. In
//! the *collective decision* part agents broadcast their preference and
//! every recipient turns its own a fraction of the way toward what it
//! hears. The swarm then steps along the circular mean of all opinions.
//!
//! [`NegotiationMode::Fused`] runs all of this in one phase: messages carry
//! readings and the contributors' current preferences, agents re-evaluate
//! after every reception, and at the end each agent adopts the direction
//! held by most of the agents it has heard from.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;
use crate::protocol::{AgentId, TickOutcome};
use crate::swarm::{step_simulation, Behavior, SwarmError, World};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CimaxError {
    #[error("variance of an empty measurement list is undefined")]
    EmptyMeasurements,
}

/// Maps an angle into `[0, 2π)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(TAU);
    if a >= TAU {
        0.0
    } else {
        a
    }
}

/// Signed shortest rotation from `from` to `to`, in `(-π, π]`.
pub fn signed_angle_diff(from: f64, to: f64) -> f64 {
    let d = normalize_angle(to - from);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

/// Population variance (divide by n), computed in a single Welford pass.
pub fn message_variance(measurements: &[f64]) -> Result<f64, CimaxError> {
    if measurements.is_empty() {
        return Err(CimaxError::EmptyMeasurements);
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in measurements.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok((m2 / measurements.len() as f64).max(0.0))
}

/// What a recipient keeps from one relayed message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoredObservation {
    /// Variance over the message including the recipient's own reading.
    pub variance: f64,
    /// Bearing of reception.
    pub bearing: f64,
    /// Number of readings the variance was computed over.
    pub len: usize,
    pub mean: f64,
}

impl StoredObservation {
    pub fn from_measurements(measurements: &[f64], bearing: f64) -> Result<Self, CimaxError> {
        let variance = message_variance(measurements)?;
        Ok(Self {
            variance,
            bearing: normalize_angle(bearing),
            len: measurements.len(),
            mean: measurements.iter().sum::<f64>() / measurements.len() as f64,
        })
    }
}

/// Sector index of `angle` among `bins` sectors centered on `2πk/bins`.
pub fn bin_index(angle: f64, bins: usize) -> usize {
    let k = (normalize_angle(angle) * bins as f64 / TAU).round() as usize;
    k % bins
}

pub fn bin_center(k: usize, bins: usize) -> f64 {
    TAU * k as f64 / bins as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinWeight {
    pub mean_variance: f64,
    pub count: usize,
}

/// Mean stored variance per bearing sector. Empty sectors weigh 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionWeights {
    pub bins: Vec<BinWeight>,
}

impl DirectionWeights {
    pub fn from_observations(observations: &[StoredObservation], bins: usize) -> Self {
        let bins = bins.max(1);
        let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); bins];
        for obs in observations {
            per_bin[bin_index(obs.bearing, bins)].push(obs.variance);
        }
        let bins = per_bin
            .into_iter()
            .map(|mut vs| {
                if vs.is_empty() {
                    return BinWeight::default();
                }
                // summing in sorted order makes the result independent of arrival order
                vs.sort_by(f64::total_cmp);
                BinWeight {
                    mean_variance: vs.iter().sum::<f64>() / vs.len() as f64,
                    count: vs.len(),
                }
            })
            .collect();
        Self { bins }
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.iter().all(|b| b.count == 0)
    }

    /// Sectors tied for the largest mean variance. Empty sectors only
    /// qualify when every sector is empty.
    pub fn best_bins(&self) -> Vec<usize> {
        if self.is_empty() {
            return (0..self.len()).collect();
        }
        let best = self
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.mean_variance)
            .fold(f64::NEG_INFINITY, f64::max);
        self.bins
            .iter()
            .enumerate()
            .filter(|(_, b)| b.count > 0 && b.mean_variance == best)
            .map(|(k, _)| k)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Opinion {
    pub preferred_direction: f64,
    pub defined: bool,
}

impl Opinion {
    pub const fn undefined() -> Self {
        Self {
            preferred_direction: 0.0,
            defined: false,
        }
    }

    pub fn toward(angle: f64) -> Self {
        Self {
            preferred_direction: normalize_angle(angle),
            defined: true,
        }
    }

    pub fn direction(&self) -> Option<f64> {
        self.defined.then_some(self.preferred_direction)
    }
}

impl Default for Opinion {
    fn default() -> Self {
        Self::undefined()
    }
}

fn pick<R: Rng + ?Sized>(candidates: &[usize], rng: &mut R) -> usize {
    match candidates {
        [only] => *only,
        _ => candidates[rng.gen_range(0..candidates.len())],
    }
}

/// Weighs the observations and returns the preferred direction without
/// touching the store. Ties are broken uniformly at random.
pub fn weigh<R: Rng + ?Sized>(
    observations: &[StoredObservation],
    bins: usize,
    rng: &mut R,
) -> (Opinion, DirectionWeights) {
    let weights = DirectionWeights::from_observations(observations, bins);
    let k = pick(&weights.best_bins(), rng);
    (Opinion::toward(bin_center(k, weights.len())), weights)
}

/// Evaluation step: picks the sector with the largest mean variance and
/// empties the store. With nothing stored the direction is uniformly
/// random over the sectors.
pub fn evaluate<R: Rng + ?Sized>(
    observations: &mut Vec<StoredObservation>,
    bins: usize,
    rng: &mut R,
) -> (Opinion, DirectionWeights) {
    let out = weigh(observations, bins, rng);
    observations.clear();
    out
}

/// Turns `own` by `rate` times the shortest signed arc toward `received`.
/// An undefined opinion adopts `received` outright.
pub fn absorb_opinion(own: Opinion, received_direction: f64, rate: f64) -> Opinion {
    if !own.defined {
        return Opinion::toward(received_direction);
    }
    let arc = signed_angle_diff(own.preferred_direction, received_direction);
    Opinion::toward(own.preferred_direction + rate * arc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegotiationMode {
    Phased,
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CimaxParams {
    /// Number of bearing sectors.
    pub bins: usize,
    /// Fraction of the arc an agent turns toward a received opinion.
    pub absorption_rate: f64,
    /// Negotiation period length in cycles.
    pub period_cycles: u32,
    pub mode: NegotiationMode,
    /// Forget opinions at the start of each period.
    #[serde(default)]
    pub reset_opinions: bool,
}

impl Default for CimaxParams {
    fn default() -> Self {
        Self {
            bins: 8,
            absorption_rate: 0.1,
            period_cycles: 2,
            mode: NegotiationMode::Phased,
            reset_opinions: false,
        }
    }
}

impl CimaxParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.bins < 1 {
            return Err("bins must be at least 1".into());
        }
        if !(self.absorption_rate > 0.0 && self.absorption_rate <= 1.0) {
            return Err(format!(
                "absorption_rate must lie in (0, 1], got {}",
                self.absorption_rate
            ));
        }
        if self.period_cycles < 1 {
            return Err("period_cycles must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentMind {
    pub store: Vec<StoredObservation>,
    pub opinion: Opinion,
    /// Latest preference heard from each other agent (fused mode).
    pub known: BTreeMap<AgentId, f64>,
    pub weights: DirectionWeights,
}

/// Outcome of one negotiation period.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodReport {
    pub collective_direction: f64,
    /// Mean resultant length of the final opinions.
    pub agreement: f64,
    pub opinions: Vec<f64>,
    pub weights: Vec<DirectionWeights>,
    /// Swarm diversity sampled at evaluation, if any agent had stored messages.
    pub diversity: Option<f64>,
    /// Variance of all readings pooled per agent, averaged over agents.
    pub pooled_diversity: Option<f64>,
    /// Circular spread right after evaluation and at the end of the period.
    pub spread_after_evaluation: f64,
    pub spread_final: f64,
}

/// Decision layer for every agent in a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Negotiator {
    pub params: CimaxParams,
    pub minds: Vec<AgentMind>,
}

struct Gathering<'a> {
    minds: &'a mut [AgentMind],
}

impl Behavior for Gathering<'_> {
    fn after_tick(&mut self, agent: AgentId, outcome: &mut TickOutcome, _rng: &mut ChaCha8Rng) {
        if let Some(obs) = outcome.observation.take() {
            self.minds[agent].store.push(obs);
        }
    }
}

struct Deciding<'a> {
    minds: &'a mut [AgentMind],
    rate: f64,
}

impl Behavior for Deciding<'_> {
    fn after_tick(&mut self, agent: AgentId, outcome: &mut TickOutcome, _rng: &mut ChaCha8Rng) {
        let mind = &mut self.minds[agent];
        if let Some(dir) = outcome.received.as_ref().and_then(|d| d.message.preferred_direction()) {
            mind.opinion = absorb_opinion(mind.opinion, dir, self.rate);
        }
        if let Some(out) = outcome.outgoing.as_mut() {
            out.set_own_direction(mind.opinion.direction());
        }
    }
}

struct Fused<'a> {
    minds: &'a mut [AgentMind],
    bins: usize,
}

impl Behavior for Fused<'_> {
    fn after_tick(&mut self, agent: AgentId, outcome: &mut TickOutcome, rng: &mut ChaCha8Rng) {
        let mind = &mut self.minds[agent];
        if let (Some(obs), Some(delivery)) = (outcome.observation.take(), outcome.received.as_ref()) {
            mind.store.push(obs);
            for entry in &delivery.message.entries {
                if let (true, Some(dir)) = (entry.agent != agent, entry.direction) {
                    mind.known.insert(entry.agent, dir);
                }
            }
            let (opinion, weights) = weigh(&mind.store, self.bins, rng);
            mind.opinion = opinion;
            mind.weights = weights;
        }
        if let Some(out) = outcome.outgoing.as_mut() {
            out.set_own_direction(mind.opinion.direction());
        }
    }
}

/// Majority vote over sectors among the agent's own opinion and the
/// latest opinion heard from every other agent. Ties go to the agent's own
/// sector when it is among the leaders, otherwise uniformly at random.
pub fn majority_decision<R: Rng + ?Sized>(
    own: Opinion,
    known: &BTreeMap<AgentId, f64>,
    bins: usize,
    rng: &mut R,
) -> Opinion {
    let mut votes = vec![0usize; bins];
    for &dir in known.values() {
        votes[bin_index(dir, bins)] += 1;
    }
    if let Some(dir) = own.direction() {
        votes[bin_index(dir, bins)] += 1;
    }
    let top = votes.iter().copied().max().unwrap_or(0);
    if top == 0 {
        return own;
    }
    let leaders: Vec<usize> = (0..bins).filter(|&k| votes[k] == top).collect();
    let own_bin = own.direction().map(|d| bin_index(d, bins));
    let k = match own_bin {
        Some(b) if leaders.contains(&b) => b,
        _ => pick(&leaders, rng),
    };
    Opinion::toward(bin_center(k, bins))
}

/// Circular mean of the defined opinions. When they cancel out (or none is
/// defined) the swarm has no preference and a uniform random angle is drawn.
pub fn collective_direction<R: Rng + ?Sized>(opinions: &[Opinion], rng: &mut R) -> (f64, f64) {
    let dirs: Vec<f64> = opinions.iter().filter_map(Opinion::direction).collect();
    let resultant = metrics::mean_resultant_length(&dirs);
    match metrics::circular_mean(&dirs) {
        Some(mean) if resultant > 1e-9 => (mean, resultant),
        _ => (rng.gen_range(0.0..TAU), resultant),
    }
}

fn spread(minds: &[AgentMind]) -> f64 {
    let dirs: Vec<f64> = minds.iter().filter_map(|m| m.opinion.direction()).collect();
    1.0 - metrics::mean_resultant_length(&dirs)
}

impl Negotiator {
    pub fn new(params: CimaxParams, agents: usize) -> Self {
        Self {
            params,
            minds: vec![AgentMind::default(); agents],
        }
    }

    pub fn opinions(&self) -> Vec<Opinion> {
        self.minds.iter().map(|m| m.opinion).collect()
    }

    pub fn set_all_opinions(&mut self, opinion: Opinion) {
        for m in &mut self.minds {
            m.opinion = opinion;
        }
    }

    fn begin_period(&mut self) {
        for m in &mut self.minds {
            m.store.clear();
            m.known.clear();
            if self.params.reset_opinions {
                m.opinion = Opinion::undefined();
            }
        }
    }

    /// Runs one full negotiation period on `world` and returns the
    /// collective direction. The swarm is not moved.
    pub fn run_negotiation_period(&mut self, world: &mut World) -> Result<PeriodReport, SwarmError> {
        if !world.swarm.is_connected() {
            log::warn!("negotiating on a disconnected swarm; consensus may stay partial");
        }
        if self.minds.len() != world.swarm.len() {
            self.minds.resize(world.swarm.len(), AgentMind::default());
        }
        self.begin_period();
        let total = self.params.period_cycles as u64 * world.params.cycle_length as u64;
        let bins = self.params.bins;

        let (diversity, pooled_diversity, spread_after_evaluation) = match self.params.mode {
            NegotiationMode::Phased => {
                let gather = total / 2;
                world.reset_protocol()?;
                let mut gathering = Gathering { minds: &mut self.minds };
                for _ in 0..gather {
                    step_simulation(world, &mut gathering);
                }
                let diversity = metrics::average_diversity(self.minds.iter().map(|m| m.store.as_slice()));
                let pooled = metrics::pooled_diversity(self.minds.iter().map(|m| m.store.as_slice()));
                for mind in &mut self.minds {
                    let (opinion, weights) = evaluate(&mut mind.store, bins, &mut world.rng);
                    mind.opinion = opinion;
                    mind.weights = weights;
                }
                let after_eval = spread(&self.minds);

                world.reset_protocol()?;
                let mut deciding = Deciding {
                    minds: &mut self.minds,
                    rate: self.params.absorption_rate,
                };
                for _ in 0..total - gather {
                    step_simulation(world, &mut deciding);
                }
                (diversity, pooled, after_eval)
            }
            NegotiationMode::Fused => {
                world.reset_protocol()?;
                let mut fused = Fused {
                    minds: &mut self.minds,
                    bins,
                };
                for _ in 0..total {
                    step_simulation(world, &mut fused);
                }
                let diversity = metrics::average_diversity(self.minds.iter().map(|m| m.store.as_slice()));
                let pooled = metrics::pooled_diversity(self.minds.iter().map(|m| m.store.as_slice()));
                let after_eval = spread(&self.minds);
                for mind in &mut self.minds {
                    mind.opinion = majority_decision(mind.opinion, &mind.known, bins, &mut world.rng);
                    mind.store.clear();
                }
                (diversity, pooled, after_eval)
            }
        };

        let opinions = self.opinions();
        let (collective, agreement) = collective_direction(&opinions, &mut world.rng);
        Ok(PeriodReport {
            collective_direction: collective,
            agreement,
            opinions: opinions.iter().map(|o| o.preferred_direction).collect(),
            weights: self.minds.iter().map(|m| m.weights.clone()).collect(),
            diversity,
            pooled_diversity,
            spread_after_evaluation,
            spread_final: spread(&self.minds),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn obs(variance: f64, bearing_deg: f64) -> StoredObservation {
        StoredObservation {
            variance,
            bearing: bearing_deg.to_radians(),
            len: 2,
            mean: 0.0,
        }
    }

    #[test]
    fn variance_examples() {
        assert_eq!(message_variance(&[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert!((message_variance(&[0.0, 5.0]).unwrap() - 6.25).abs() < 1e-12);
        assert!((message_variance(&[0.0, 0.0, 5.0, 5.0]).unwrap() - 6.25).abs() < 1e-12);
        assert_eq!(message_variance(&[]), Err(CimaxError::EmptyMeasurements));
    }

    #[test]
    fn angle_helpers() {
        assert_eq!(normalize_angle(-PI / 2.0), 1.5 * PI);
        assert!((signed_angle_diff(350f64.to_radians(), 10f64.to_radians()) - 20f64.to_radians()).abs() < 1e-12);
        assert!((signed_angle_diff(10f64.to_radians(), 350f64.to_radians()) + 20f64.to_radians()).abs() < 1e-12);
        assert_eq!(bin_index(0.0, 8), 0);
        assert_eq!(bin_index(-0.1, 8), 0);
        assert_eq!(bin_index(PI, 2), 1);
        assert_eq!(bin_index(PI / 2.0 - 0.01, 2), 0);
    }

    #[test]
    fn evaluate_prefers_high_variance_and_clears() {
        let mut store = vec![obs(6.0, 0.0), obs(0.0, 180.0)];
        let (op, w) = evaluate(&mut store, 8, &mut rng(1));
        assert!(op.defined);
        assert_eq!(op.preferred_direction, 0.0);
        assert!(store.is_empty());
        assert_eq!(w.bins[0].count, 1);
        assert_eq!(w.bins[4].count, 1);
    }

    #[test]
    fn empty_store_gives_random_direction() {
        let mut seen = std::collections::BTreeSet::new();
        let mut r = rng(2);
        for _ in 0..200 {
            let (op, _) = evaluate(&mut Vec::new(), 8, &mut r);
            assert!(op.defined);
            seen.insert(bin_index(op.preferred_direction, 8));
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn empty_bin_never_beats_populated_zero_bin() {
        let store = vec![obs(0.0, 90.0), obs(0.0, 90.0)];
        let mut r = rng(3);
        for _ in 0..100 {
            let (op, _) = weigh(&store, 8, &mut r);
            assert_eq!(bin_index(op.preferred_direction, 8), 2);
        }
    }

    #[test]
    fn ties_split_evenly() {
        let store = vec![obs(1.0, 0.0), obs(1.0, 180.0)];
        let mut r = rng(4);
        let trials = 10_000;
        let zero = (0..trials)
            .filter(|_| bin_index(weigh(&store, 8, &mut r).0.preferred_direction, 8) == 0)
            .count();
        let frac = zero as f64 / trials as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn absorb_examples() {
        let op = absorb_opinion(Opinion::toward(0.0), 100f64.to_radians(), 0.1);
        assert!((op.preferred_direction - 10f64.to_radians()).abs() < 1e-12);
        let same = absorb_opinion(Opinion::toward(1.0), 1.0, 0.1);
        assert_eq!(same.preferred_direction, 1.0);
        let wrap = absorb_opinion(Opinion::toward(350f64.to_radians()), 10f64.to_radians(), 0.1);
        assert!((wrap.preferred_direction - 352f64.to_radians()).abs() < 1e-12);
        let adopt = absorb_opinion(Opinion::undefined(), 2.0, 0.1);
        assert_eq!(adopt.direction(), Some(2.0));
    }

    #[test]
    fn majority_ties_keep_own() {
        let mut known = BTreeMap::new();
        known.insert(0, 0.0);
        known.insert(2, PI);
        known.insert(3, PI);
        let own = Opinion::toward(0.0);
        let d = majority_decision(own, &known, 2, &mut rng(5));
        assert_eq!(d.preferred_direction, 0.0);
        known.insert(4, PI);
        let d = majority_decision(own, &known, 2, &mut rng(5));
        assert_eq!(d.preferred_direction, PI);
    }

    #[test]
    fn unanimous_collective_direction() {
        let ops = vec![Opinion::toward(1.3); 10];
        let (dir, r) = collective_direction(&ops, &mut rng(6));
        assert!((dir - 1.3).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
    }
}
