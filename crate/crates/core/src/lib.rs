//! Decentralized multi-robot navigation: a CLF-CBF quadratic-program safety
//! controller for unicycle robots plus a roundabout layer that breaks
//! symmetric deadlocks using only local communication.

pub mod batch;
pub mod cli;
pub mod control;
pub mod geometry;
pub mod mgr;
pub mod params;
pub mod planner;
pub mod qp;
pub mod sim;
pub mod world;

pub use geometry::{Obstacle, Vec2};
pub use params::{Method, SimParams};
pub use sim::{run, Metrics, TraceRecord};
pub use world::{generate_scenario, Env, Scenario, ScenarioConfig};
