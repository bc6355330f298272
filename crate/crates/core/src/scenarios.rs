//! Experiment harness: single trajectories, success-rate sweeps over start
//! positions, preferred-direction vector fields, and the four-agent line
//! experiment with binary light patterns.
//!
//! Every run draws all randomness from one ChaCha8 stream seeded from the
//! run seed, so any output row can be replayed exactly.

use std::f64::consts::PI;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cimax::{CimaxParams, NegotiationMode, Negotiator, Opinion};
use crate::environment::{EnvironmentField, FieldKind};
use crate::metrics::{self, DiversityTrace, SuccessCriterion, SuccessOutcome, TrajectoryPoint};
use crate::protocol::{AgentId, ProtocolParams};
use crate::swarm::{line_swarm, place_swarm, AgentLogRow, Point, SwarmError, World};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Swarm(#[from] SwarmError),
    #[error("failed to write output: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to write csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("failed to encode json: {0}")]
    Json(#[from] serde_json::Error),
}

// ============================================================================
// Configuration
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwarmSection {
    pub agents: usize,
    pub diameter: f64,
    pub range: f64,
    /// Distance moved per negotiation period.
    pub step: f64,
    /// Initial center of mass.
    pub start: [f64; 2],
}

impl Default for SwarmSection {
    fn default() -> Self {
        Self {
            agents: 61,
            diameter: 6.0,
            range: 1.0,
            step: 0.33,
            start: [-2.5, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Negotiation periods per run; also the success deadline.
    pub periods: u32,
    /// Overrides the field's default success criterion.
    pub success: Option<SuccessCriterion>,
    /// Emit the per-agent, per-timestep log with trajectories.
    pub agent_log: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            periods: 50,
            success: None,
            agent_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub x_inits: Vec<f64>,
    pub runs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            x_inits: vec![-4.0, -3.5, -3.0, -2.5, -2.0, -1.5, -1.0, -0.5],
            runs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VectorFieldSection {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub period_cycles: u32,
}

impl Default for VectorFieldSection {
    fn default() -> Self {
        Self {
            xs: grid(-5.75, 5.75, 0.5),
            ys: grid(-2.0, 2.0, 1.0),
            period_cycles: 4,
        }
    }
}

/// Inclusive arithmetic grid.
pub fn grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + step * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabSection {
    /// Light patterns, one character per agent, `1` bright and `0` dark.
    pub patterns: Vec<String>,
    pub repeats: usize,
    /// Pattern whose mirror image is swapped in after the first consensus.
    pub alternating_pattern: String,
    pub spacing: f64,
    pub protocol: ProtocolParams,
    pub period_cycles: u32,
    pub noise_halfwidth: f64,
    /// Forget opinions between light configurations.
    pub reset_opinions: bool,
}

impl Default for LabSection {
    fn default() -> Self {
        Self {
            patterns: ["1000", "0111", "0001", "1110", "1100", "0011"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            repeats: 5,
            alternating_pattern: "1000".into(),
            spacing: 0.9,
            protocol: ProtocolParams {
                cycle_length: 55,
                refractory: 4,
                relay_delay: 1,
                max_entries: Some(10),
            },
            period_cycles: 10,
            noise_halfwidth: 0.0,
            reset_opinions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub swarm: SwarmSection,
    pub protocol: ProtocolParams,
    pub cimax: CimaxParams,
    pub field: EnvironmentField,
    pub run: RunSection,
    pub sweep: SweepSection,
    pub vector_field: VectorFieldSection,
    pub lab: LabSection,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            swarm: SwarmSection::default(),
            protocol: ProtocolParams::default(),
            cimax: CimaxParams::default(),
            field: EnvironmentField::discrete(),
            run: RunSection::default(),
            sweep: SweepSection::default(),
            vector_field: VectorFieldSection::default(),
            lab: LabSection::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn discrete() -> Self {
        Self::default()
    }

    pub fn gradient() -> Self {
        Self {
            field: EnvironmentField::gradient(),
            sweep: SweepSection {
                x_inits: grid(-4.0, 3.0, 0.5),
                runs: 50,
            },
            ..Self::default()
        }
    }

    pub fn cloud() -> Self {
        Self {
            field: EnvironmentField::cloud(),
            vector_field: VectorFieldSection {
                xs: grid(-8.0, 8.0, 1.0),
                ys: grid(-8.0, 8.0, 1.0),
                period_cycles: 2,
            },
            swarm: SwarmSection {
                start: [-7.0, 0.0],
                ..SwarmSection::default()
            },
            ..Self::default()
        }
    }

    /// Ticks per negotiation period.
    pub fn period_ticks(&self) -> u64 {
        self.cimax.period_cycles as u64 * self.protocol.cycle_length as u64
    }

    /// Success deadline in ticks.
    pub fn deadline(&self) -> u64 {
        self.run.periods as u64 * self.period_ticks()
    }

    pub fn success_criterion(&self) -> SuccessCriterion {
        if let Some(c) = self.run.success {
            return c;
        }
        match &self.field.kind {
            FieldKind::LinearGradient { .. } => SuccessCriterion::PositionThreshold { x_min: 2.33 },
            FieldKind::RadialCloud {
                center,
                inner_radius,
                outer_radius,
                ..
            } => SuccessCriterion::RingProximity {
                center: *center,
                radius: 0.5 * (inner_radius + outer_radius),
                threshold: 0.5 * (outer_radius - inner_radius),
            },
            FieldKind::DiscreteBorder { border_x, .. } => SuccessCriterion::BorderProximity {
                border_x: *border_x,
                threshold: 0.33,
            },
            _ => SuccessCriterion::BorderProximity {
                border_x: 0.0,
                threshold: 0.33,
            },
        }
    }

    /// Checks parameters without running anything.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.protocol
            .validate()
            .map_err(|e| ScenarioError::Config(format!("protocol: {e}")))?;
        self.cimax
            .validate()
            .map_err(|e| ScenarioError::Config(format!("cimax: {e}")))?;
        if self.swarm.agents < 2 {
            return Err(ScenarioError::Config(format!(
                "swarm.agents must be at least 2, got {}",
                self.swarm.agents
            )));
        }
        if !(self.swarm.range > 0.0) || !(self.swarm.diameter >= 0.0) || !(self.swarm.step >= 0.0) {
            return Err(ScenarioError::Config(
                "swarm.range must be positive; swarm.diameter and swarm.step non-negative".into(),
            ));
        }
        if !(self.field.noise_halfwidth >= 0.0) {
            return Err(ScenarioError::Config(
                "field.noise_halfwidth must be non-negative".into(),
            ));
        }
        if self.sweep.runs == 0 {
            return Err(ScenarioError::Config("sweep.runs must be at least 1".into()));
        }
        if self.vector_field.period_cycles == 0 || self.lab.period_cycles == 0 {
            return Err(ScenarioError::Config("period_cycles must be at least 1".into()));
        }
        self.lab
            .protocol
            .validate()
            .map_err(|e| ScenarioError::Config(format!("lab.protocol: {e}")))?;
        for p in self
            .lab
            .patterns
            .iter()
            .chain(std::iter::once(&self.lab.alternating_pattern))
        {
            parse_pattern(p)?;
        }
        Ok(())
    }

    /// Also checks the cycle-length bound against a placed swarm's hop diameter.
    pub fn validate_with_placement(&self, seed: u64) -> Result<(), ScenarioError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let swarm = place_swarm(
            self.swarm.agents,
            self.swarm.diameter,
            self.start(),
            self.swarm.range,
            &mut rng,
        )?;
        let hops = swarm.hop_diameter().unwrap_or(usize::MAX);
        self.protocol
            .validate_for_diameter(hops)
            .map_err(|e| ScenarioError::Config(format!("protocol: {e}")))
    }

    pub fn start(&self) -> Point {
        Point::new(self.swarm.start[0], self.swarm.start[1])
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config is always serializable");
        let digest = Sha256::digest(json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short scenario label derived from the field.
    pub fn kind_label(&self) -> &'static str {
        match self.field.kind {
            FieldKind::DiscreteBorder { .. } => "discrete",
            FieldKind::LinearGradient { .. } => "gradient",
            FieldKind::RadialCloud { .. } => "cloud",
            FieldKind::Uniform { .. } => "uniform",
            FieldKind::OneDimensionalPattern { .. } => "pattern",
        }
    }
}

/// SplitMix64 mix of a base seed with two indices.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, ScenarioError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ScenarioError::Config(format!("cannot start {jobs} worker threads: {e}")))
}

// ============================================================================
// Trajectories
// ============================================================================

/// One row of the per-period decision log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionRecord {
    pub period: u64,
    pub collective_direction: f64,
    pub agent_id: AgentId,
    pub opinion: f64,
    /// Mean variance per sector, `;`-separated.
    pub bin_weights: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub seed: u64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub diversity: DiversityTrace,
    pub decisions: Vec<DecisionRecord>,
    pub agent_log: Vec<AgentLogRow>,
    pub success: Option<SuccessOutcome>,
    /// Collective direction chosen in each period.
    pub directions: Vec<f64>,
    /// Opinion spread after evaluation and at the end of each period.
    pub spreads: Vec<(f64, f64)>,
    /// World state after the last simulated period.
    pub world: Option<World>,
}

#[derive(Debug, Clone, Copy)]
struct RunOptions {
    stop_on_success: bool,
    keep_decisions: bool,
}

fn build_world(config: &ScenarioConfig, center: Point, seed: u64) -> Result<World, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let swarm = place_swarm(
        config.swarm.agents,
        config.swarm.diameter,
        center,
        config.swarm.range,
        &mut rng,
    )?;
    Ok(World::new(swarm, config.field.clone(), config.protocol.clone(), rng)?)
}

fn run_with(config: &ScenarioConfig, seed: u64, options: RunOptions) -> Result<RunOutput, ScenarioError> {
    config.validate()?;
    let mut world = build_world(config, config.start(), seed)?;
    if config.run.agent_log {
        world.enable_log();
    }
    let mut negotiator = Negotiator::new(config.cimax.clone(), world.swarm.len());
    let criterion = config.success_criterion();
    let deadline = config.deadline();

    let mut out = RunOutput {
        seed,
        ..RunOutput::default()
    };
    // The nominal center moves by exact step vectors; recomputing it from the
    // agent positions would accumulate rounding and miss thresholds by 1e-15.
    let mut center = config.start();
    out.trajectory.push(TrajectoryPoint {
        t: 0,
        period: 0,
        center,
    });

    for period in 0..config.run.periods as u64 {
        if options.stop_on_success && criterion.holds(center) {
            break;
        }
        let report = negotiator.run_negotiation_period(&mut world)?;
        if let Some(d) = report.pooled_diversity {
            out.diversity.samples.push((period, d));
        }
        out.spreads.push((report.spread_after_evaluation, report.spread_final));
        out.directions.push(report.collective_direction);
        if options.keep_decisions {
            for (agent, (opinion, weights)) in report.opinions.iter().zip(&report.weights).enumerate() {
                out.decisions.push(DecisionRecord {
                    period,
                    collective_direction: report.collective_direction,
                    agent_id: agent,
                    opinion: *opinion,
                    bin_weights: weights
                        .bins
                        .iter()
                        .map(|b| b.mean_variance.to_string())
                        .collect::<Vec<_>>()
                        .join(";"),
                });
            }
        }
        world.swarm.translate(report.collective_direction, config.swarm.step);
        center = Point {
            x: center.x + config.swarm.step * report.collective_direction.cos(),
            y: center.y + config.swarm.step * report.collective_direction.sin(),
        };
        out.trajectory.push(TrajectoryPoint {
            t: world.clock,
            period: period + 1,
            center,
        });
    }
    out.agent_log = world.take_log();
    out.success = Some(metrics::detect_success(&out.trajectory, criterion, deadline));
    out.world = Some(world);
    Ok(out)
}

/// Runs one seeded trajectory for `config.run.periods` negotiation periods.
pub fn run_trajectory(config: &ScenarioConfig, seed: u64) -> Result<RunOutput, ScenarioError> {
    run_with(
        config,
        seed,
        RunOptions {
            stop_on_success: false,
            keep_decisions: true,
        },
    )
}

// ============================================================================
// Success sweeps
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub x_init: f64,
    pub run: usize,
    pub seed: u64,
    pub success: bool,
    /// Success time in negotiation periods.
    pub success_period: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x_init: f64,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean over successful runs, in negotiation periods; `None` without successes.
    pub mean_success_time: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<SweepRun>,
}

/// Success rate and mean success time per start position. Runs are
/// independent jobs on `jobs` threads; results are ordered by
/// (x_init, run) regardless of scheduling.
pub fn run_success_sweep(config: &ScenarioConfig, seed: u64, jobs: usize) -> Result<SweepResult, ScenarioError> {
    config.validate()?;
    let period_ticks = config.period_ticks();
    let tasks: Vec<(usize, f64, usize)> = config
        .sweep
        .x_inits
        .iter()
        .enumerate()
        .flat_map(|(i, &x)| (0..config.sweep.runs).map(move |r| (i, x, r)))
        .collect();

    let pool = thread_pool(jobs.max(1))?;
    let runs: Vec<SweepRun> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, x_init, run)| {
                let run_seed = derive_seed(seed, i as u64, run as u64);
                let mut cfg = config.clone();
                cfg.swarm.start[0] = x_init;
                let out = run_with(
                    &cfg,
                    run_seed,
                    RunOptions {
                        stop_on_success: true,
                        keep_decisions: false,
                    },
                )?;
                let success = out.success.unwrap_or(SuccessOutcome {
                    success: false,
                    time: None,
                });
                Ok(SweepRun {
                    x_init,
                    run,
                    seed: run_seed,
                    success: success.success,
                    success_period: success.time.map(|t| t / period_ticks),
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()
    })?;

    let hash = config.hash();
    let rows = config
        .sweep
        .x_inits
        .iter()
        .map(|&x_init| {
            let point: Vec<&SweepRun> = runs.iter().filter(|r| r.x_init == x_init).collect();
            let times: Vec<f64> = point
                .iter()
                .filter_map(|r| r.success_period)
                .map(|p| p as f64)
                .collect();
            let successes = times.len();
            let (ci_low, ci_high) = metrics::wilson_interval(successes, point.len(), 1.96);
            SweepRow {
                x_init,
                runs: point.len(),
                successes,
                success_rate: successes as f64 / point.len().max(1) as f64,
                ci_low,
                ci_high,
                mean_success_time: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
                seed,
                config_hash: hash.clone(),
            }
        })
        .collect();
    Ok(SweepResult {
        seed,
        config_hash: hash,
        rows,
        runs,
    })
}

// ============================================================================
// Vector fields
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRow {
    pub x: f64,
    pub y: f64,
    pub direction: f64,
    /// Mean resultant length of the agents' final opinions.
    pub agreement: f64,
    pub seed: u64,
}

/// Preferred direction of a swarm centered at each grid point, from one
/// negotiation period without moving.
pub fn run_vector_field(config: &ScenarioConfig, seed: u64, jobs: usize) -> Result<Vec<VectorRow>, ScenarioError> {
    config.validate()?;
    let mut cimax = config.cimax.clone();
    cimax.period_cycles = config.vector_field.period_cycles;
    let points: Vec<(f64, f64)> = config
        .vector_field
        .ys
        .iter()
        .flat_map(|&y| config.vector_field.xs.iter().map(move |&x| (x, y)))
        .collect();
    let pool = thread_pool(jobs.max(1))?;
    pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                let point_seed = derive_seed(seed, i as u64, u64::MAX);
                let mut world = build_world(config, Point::new(x, y), point_seed)?;
                let mut negotiator = Negotiator::new(cimax.clone(), world.swarm.len());
                let report = negotiator.run_negotiation_period(&mut world)?;
                Ok(VectorRow {
                    x,
                    y,
                    direction: report.collective_direction,
                    agreement: report.agreement,
                    seed: point_seed,
                })
            })
            .collect()
    })
}

// ============================================================================
// Line experiment with binary light patterns
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn of(angle: f64) -> Side {
        if angle.cos() >= 0.0 {
            Side::Right
        } else {
            Side::Left
        }
    }

    pub fn angle(self) -> f64 {
        match self {
            Side::Right => 0.0,
            Side::Left => PI,
        }
    }
}

pub fn parse_pattern(pattern: &str) -> Result<Vec<bool>, ScenarioError> {
    if pattern.is_empty() {
        return Err(ScenarioError::Config("light pattern must not be empty".into()));
    }
    pattern
        .chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(ScenarioError::Config(format!(
                "light pattern {pattern:?} contains {other:?}; use only 0 and 1"
            ))),
        })
        .collect()
}

pub fn mirror_pattern(pattern: &str) -> String {
    pattern.chars().rev().collect()
}

/// Expected final decisions for a light pattern on a line: each agent
/// leans toward its nearest brightness border; every agent then follows
/// the majority lean, keeping its own lean on a tie. `None` for agents
/// with no determinable lean (no border, or equidistant borders on a tie).
pub fn expected_decisions(pattern: &[bool]) -> Vec<Option<Side>> {
    // border k sits between agents k and k + 1
    let borders: Vec<usize> = (0..pattern.len().saturating_sub(1))
        .filter(|&k| pattern[k] != pattern[k + 1])
        .collect();
    let leans: Vec<Option<Side>> = (0..pattern.len())
        .map(|i| {
            let pos = i as f64;
            let left = borders
                .iter()
                .filter(|&&k| (k as f64 + 0.5) < pos)
                .map(|&k| pos - (k as f64 + 0.5))
                .fold(f64::INFINITY, f64::min);
            let right = borders
                .iter()
                .filter(|&&k| (k as f64 + 0.5) > pos)
                .map(|&k| (k as f64 + 0.5) - pos)
                .fold(f64::INFINITY, f64::min);
            if left < right {
                Some(Side::Left)
            } else if right < left {
                Some(Side::Right)
            } else {
                None
            }
        })
        .collect();
    let lefts = leans.iter().filter(|l| **l == Some(Side::Left)).count();
    let rights = leans.iter().filter(|l| **l == Some(Side::Right)).count();
    leans
        .iter()
        .map(|own| match lefts.cmp(&rights) {
            std::cmp::Ordering::Greater => Some(Side::Left),
            std::cmp::Ordering::Less => Some(Side::Right),
            std::cmp::Ordering::Equal => *own,
        })
        .collect()
}

/// A line of agents negotiating under a light pattern. Keeps its opinions
/// between patterns so adaptation to a changed pattern can be observed.
pub struct LineExperiment {
    lab: LabSection,
    world: World,
    negotiator: Negotiator,
}

impl LineExperiment {
    pub fn new(lab: &LabSection, agents: usize, seed: u64) -> Result<Self, ScenarioError> {
        let swarm = line_swarm(agents, lab.spacing, Point::new(0.0, 0.0), 1.0)?;
        let field = EnvironmentField::light_pattern(-0.5 * lab.spacing, lab.spacing, &vec![false; agents]);
        let world = World::new(swarm, field, lab.protocol.clone(), ChaCha8Rng::seed_from_u64(seed))?;
        let negotiator = Negotiator::new(
            CimaxParams {
                bins: 2,
                absorption_rate: 0.1,
                period_cycles: lab.period_cycles,
                mode: NegotiationMode::Fused,
                reset_opinions: lab.reset_opinions,
            },
            agents,
        );
        Ok(Self {
            lab: lab.clone(),
            world,
            negotiator,
        })
    }

    /// Applies `pattern` and runs one negotiation period; returns each agent's decision.
    pub fn negotiate(&mut self, pattern: &[bool]) -> Result<Vec<Side>, ScenarioError> {
        if pattern.len() != self.world.swarm.len() {
            return Err(ScenarioError::Config(format!(
                "pattern has {} cells for {} agents",
                pattern.len(),
                self.world.swarm.len()
            )));
        }
        let mut field = EnvironmentField::light_pattern(-0.5 * self.lab.spacing, self.lab.spacing, pattern);
        field.noise_halfwidth = self.lab.noise_halfwidth;
        self.world.field = field;
        self.negotiator.run_negotiation_period(&mut self.world)?;
        Ok(self
            .negotiator
            .opinions()
            .iter()
            .map(|o: &Opinion| Side::of(o.preferred_direction))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabTrial {
    pub pattern: String,
    pub repeat: usize,
    pub seed: u64,
    pub decisions: Vec<Side>,
    pub expected: Vec<Option<Side>>,
    pub correct: bool,
}

fn grade(decisions: &[Side], expected: &[Option<Side>]) -> bool {
    decisions.iter().zip(expected).all(|(d, e)| e.is_none_or(|e| e == *d))
}

/// Runs every configured pattern `repeats` times from fresh agents.
pub fn run_lab_replication(lab: &LabSection, seed: u64) -> Result<Vec<LabTrial>, ScenarioError> {
    let mut trials = Vec::new();
    for (p, pattern_str) in lab.patterns.iter().enumerate() {
        let pattern = parse_pattern(pattern_str)?;
        let expected = expected_decisions(&pattern);
        for repeat in 0..lab.repeats {
            let trial_seed = derive_seed(seed, p as u64, repeat as u64);
            let mut exp = LineExperiment::new(lab, pattern.len(), trial_seed)?;
            let decisions = exp.negotiate(&pattern)?;
            trials.push(LabTrial {
                pattern: pattern_str.clone(),
                repeat,
                seed: trial_seed,
                correct: grade(&decisions, &expected),
                decisions,
                expected: expected.clone(),
            });
        }
    }
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlternatingTrial {
    pub repeat: usize,
    pub seed: u64,
    pub first: LabTrial,
    pub flipped: LabTrial,
    pub success: bool,
}

/// Reaches a decision under `lab.alternating_pattern`, then mirrors the
/// lights and negotiates again with the same agents.
pub fn run_alternating(lab: &LabSection, seed: u64) -> Result<Vec<AlternatingTrial>, ScenarioError> {
    let first_str = lab.alternating_pattern.clone();
    let second_str = mirror_pattern(&first_str);
    let first = parse_pattern(&first_str)?;
    let second = parse_pattern(&second_str)?;
    (0..lab.repeats)
        .map(|repeat| {
            let trial_seed = derive_seed(seed, u64::MAX, repeat as u64);
            let mut exp = LineExperiment::new(lab, first.len(), trial_seed)?;
            let mut trial = |pattern_str: &str, pattern: &[bool]| -> Result<LabTrial, ScenarioError> {
                let expected = expected_decisions(pattern);
                let decisions = exp.negotiate(pattern)?;
                Ok(LabTrial {
                    pattern: pattern_str.to_string(),
                    repeat,
                    seed: trial_seed,
                    correct: grade(&decisions, &expected),
                    decisions,
                    expected,
                })
            };
            let a = trial(&first_str, &first)?;
            let b = trial(&second_str, &second)?;
            Ok(AlternatingTrial {
                repeat,
                seed: trial_seed,
                success: a.correct && b.correct,
                first: a,
                flipped: b,
            })
        })
        .collect()
}

// ============================================================================
// CSV output
// ============================================================================

/// Name of the main CSV a command writes for a given scenario kind.
pub fn output_file_name(command: &str, config: &ScenarioConfig) -> String {
    let name = match (command, config.kind_label()) {
        ("trajectory", "discrete") => "fig4b",
        ("trajectory", "gradient") => "fig7b",
        ("sweep", "discrete") => "fig5",
        ("sweep", "gradient") => "fig8",
        ("vectorfield", "discrete") => "fig6",
        ("vectorfield", "gradient") => "fig9",
        ("vectorfield", "cloud") => "fig10",
        ("lab", _) => "lab",
        ("trajectory", _) => "trajectory",
        ("sweep", _) => "sweep",
        _ => "vectorfield",
    };
    format!("{name}.csv")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Header: `period,t,x,y,diversity`.
pub fn write_trajectory_csv<W: Write>(out: W, run: &RunOutput) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["period", "t", "x", "y", "diversity"])?;
    for p in &run.trajectory {
        let div = run
            .diversity
            .samples
            .iter()
            .find(|(period, _)| *period == p.period)
            .map(|(_, d)| *d);
        w.write_record([
            p.period.to_string(),
            p.t.to_string(),
            p.center.x.to_string(),
            p.center.y.to_string(),
            opt(div),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Header: `period,collective_direction,agent_id,opinion,bin_weights`.
pub fn write_decisions_csv<W: Write>(out: W, run: &RunOutput) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(out);
    for d in &run.decisions {
        w.serialize(d)?;
    }
    w.flush()?;
    Ok(())
}

/// Header: `t,agent_id,x,y,mode,measurement`.
pub fn write_agent_log_csv<W: Write>(out: W, run: &RunOutput) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "agent_id", "x", "y", "mode", "measurement"])?;
    for r in &run.agent_log {
        w.write_record([
            r.t.to_string(),
            r.agent_id.to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.mode.as_str().to_string(),
            r.measurement.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Header: `x_init,runs,successes,success_rate,ci_low,ci_high,mean_success_time,seed,config_hash`.
pub fn write_sweep_csv<W: Write>(out: W, sweep: &SweepResult) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(out);
    for row in &sweep.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header: `x_init,run,seed,success,success_period`.
pub fn write_sweep_runs_csv<W: Write>(out: W, sweep: &SweepResult) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(out);
    for run in &sweep.runs {
        w.serialize(run)?;
    }
    w.flush()?;
    Ok(())
}

/// Header: `x,y,direction,agreement,seed`.
pub fn write_vector_csv<W: Write>(out: W, rows: &[VectorRow]) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn side_str(s: Option<Side>) -> &'static str {
    match s {
        Some(Side::Left) => "left",
        Some(Side::Right) => "right",
        None => "",
    }
}

/// Header: `experiment,repeat,seed,pattern,agent,decision,expected,correct`.
pub fn write_lab_csv<W: Write>(
    out: W,
    trials: &[LabTrial],
    alternating: &[AlternatingTrial],
) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "experiment",
        "repeat",
        "seed",
        "pattern",
        "agent",
        "decision",
        "expected",
        "correct",
    ])?;
    let tagged = trials.iter().map(|t| ("static", t)).chain(
        alternating
            .iter()
            .flat_map(|a| [("alternating_first", &a.first), ("alternating_flipped", &a.flipped)]),
    );
    for (label, t) in tagged {
        for (agent, (d, e)) in t.decisions.iter().zip(&t.expected).enumerate() {
            w.write_record([
                label.to_string(),
                t.repeat.to_string(),
                t.seed.to_string(),
                t.pattern.clone(),
                agent.to_string(),
                side_str(Some(*d)).to_string(),
                side_str(*e).to_string(),
                e.is_none_or(|e| e == *d).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
