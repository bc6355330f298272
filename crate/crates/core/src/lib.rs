//! Swarm agents relaying messages as excitable-medium waves and negotiating
//! a common direction of motion that maximizes the variance of the readings
//! they can access.
//!
//! - [`protocol`]: inactive/active/refractory relay automaton
//! - [`environment`]: scalar fields the agents measure
//! - [`swarm`]: placement, neighbor graph, delivery and rigid motion
//! - [`cimax`]: gathering, evaluation and collective decision
//! - [`metrics`]: entropy, diversity, success detection, circular statistics
//! - [`scenarios`]: trajectory, sweep, vector-field and line-experiment harnesses

pub mod cimax;
pub mod environment;
pub mod metrics;
pub mod protocol;
pub mod scenarios;
pub mod swarm;

pub use cimax::{CimaxParams, NegotiationMode, Negotiator, Opinion, PeriodReport, StoredObservation};
pub use environment::{EnvironmentField, FieldKind};
pub use protocol::{AgentId, AgentState, Message, Mode, ProtocolParams};
pub use scenarios::ScenarioConfig;
pub use swarm::{Point, SwarmConfiguration, World};
