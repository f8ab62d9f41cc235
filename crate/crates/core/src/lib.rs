//! Soft-tissue retraction benchmark for demonstration-guided reinforcement
//! learning: a mass-spring tissue patch, a six-joint arm driven through
//! inverse kinematics, a scripted demonstrator, hindsight replay, and five
//! actor-critic agents (DDPG, SQIL, DDPGBC, CoL, DEX).

pub mod agents;
pub mod config;
pub mod demogen;
pub mod env;
pub mod error;
pub mod eval;
pub mod kinematics;
pub mod manifest;
pub mod neural;
pub mod replay;
pub mod rng;
pub mod sim;
pub mod train;

pub use agents::{Agent, AgentConfig, Algorithm};
pub use demogen::{DemoConfig, DemoCorpus, ScriptedPolicy};
pub use env::{Action, EnvConfig, Observation, StepInfo, TaskId, TissueRetractEnv, Transition, ACT_DIM, OBS_DIM};
pub use error::{Error, Result};
pub use eval::{EvalReport, Outcome, Policy};
pub use sim::Vec3;
pub use train::TrainConfig;
