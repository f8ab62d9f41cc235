//! Scripted demonstrations.
//!
//! The expert moves through four position checkpoints: above the anchor,
//! onto the anchor (closing the jaw there), to the goal, then holds. Each
//! step commands the Cartesian direction to the active checkpoint; the
//! environment's inverse kinematics turns it into joint motion.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{write_jsonl, Action, EnvConfig, Observation, TaskId, TissueRetractEnv, Transition};
use crate::error::{Error, Result};
use crate::manifest::config_hash;
use crate::rng::{derive_seed, stream};
use crate::sim::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    /// Height of the approach point above the anchor, m.
    pub clearance: f64,
    /// Distance at which a checkpoint counts as reached, m.
    pub advance_tolerance: f64,
    pub hold_steps: usize,
    /// Extra rollouts allowed beyond the requested count.
    pub retry_budget: Option<usize>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            clearance: 0.02,
            advance_tolerance: 0.003,
            hold_steps: 3,
            retry_budget: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPlan {
    pub p1_approach: Vec3,
    pub p2_grasp: Vec3,
    pub p3_retract: Vec3,
    pub p4_hold: Vec3,
    pub hold_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Approach,
    Grasp,
    Retract,
    Hold { remaining: usize },
}

impl CheckpointPlan {
    pub fn checkpoint(&self, phase: Phase) -> Vec3 {
        match phase {
            Phase::Approach => self.p1_approach,
            Phase::Grasp => self.p2_grasp,
            Phase::Retract => self.p3_retract,
            Phase::Hold { .. } => self.p4_hold,
        }
    }
}

pub fn plan(obs: &Observation, config: &DemoConfig) -> CheckpointPlan {
    let anchor = obs.anchor_position;
    CheckpointPlan {
        p1_approach: anchor + Vec3::new(0.0, 0.0, config.clearance),
        p2_grasp: anchor,
        p3_retract: obs.desired_goal,
        p4_hold: obs.desired_goal,
        hold_steps: config.hold_steps,
    }
}

fn grip_for(phase: Phase) -> f64 {
    match phase {
        Phase::Approach | Phase::Grasp => 1.0,
        Phase::Retract | Phase::Hold { .. } => -1.0,
    }
}

/// One expert action toward the active checkpoint. On reaching it the phase
/// advances and the returned action carries no motion.
///
/// The jaw is steered during approach and grasp; after the grasp the held
/// anchor is.
pub fn next_action(
    obs: &Observation,
    plan: &CheckpointPlan,
    phase: &mut Phase,
    max_step: f64,
    advance_tolerance: f64,
) -> Action {
    // Once holding tissue the anchor, not the jaw, has to reach the goal.
    let tracked = match phase {
        Phase::Retract | Phase::Hold { .. } if obs.grasp_flag > 0.5 => obs.achieved_goal,
        _ => obs.ee_position,
    };
    let to_go = plan.checkpoint(*phase) - tracked;
    if to_go.norm() <= advance_tolerance {
        *phase = match *phase {
            Phase::Approach => Phase::Grasp,
            Phase::Grasp => Phase::Retract,
            Phase::Retract => Phase::Hold {
                remaining: plan.hold_steps,
            },
            Phase::Hold { remaining } => Phase::Hold {
                remaining: remaining.saturating_sub(1),
            },
        };
        return Action::new(Vec3::zeros(), grip_for(*phase));
    }
    Action::new(to_go / max_step, grip_for(*phase))
}

/// Stateful wrapper that re-plans from the current anchor position if the
/// grip is lost after grasping.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    config: DemoConfig,
    max_step: f64,
    plan: Option<CheckpointPlan>,
    phase: Phase,
}

impl ScriptedPolicy {
    pub fn new(config: DemoConfig, max_step: f64) -> Self {
        Self {
            config,
            max_step,
            plan: None,
            phase: Phase::Approach,
        }
    }

    pub fn reset(&mut self, obs: &Observation) {
        self.plan = Some(plan(obs, &self.config));
        self.phase = Phase::Approach;
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn act(&mut self, obs: &Observation) -> Action {
        let lost = matches!(self.phase, Phase::Retract | Phase::Hold { .. }) && obs.grasp_flag == 0.0;
        if self.plan.is_none() || lost {
            self.reset(obs);
        }
        let plan = self.plan.expect("plan set above");
        next_action(
            obs,
            &plan,
            &mut self.phase,
            self.max_step,
            self.config.advance_tolerance,
        )
    }
}

/// Roll one scripted episode.
pub fn rollout(env: &mut TissueRetractEnv, policy: &mut ScriptedPolicy, seed: u64) -> Result<Vec<Transition>> {
    let mut obs = env.reset(seed)?;
    policy.reset(&obs);
    let mut episode = Vec::with_capacity(env.config().horizon);
    loop {
        let action = policy.act(&obs);
        let t = env.step(&action)?;
        obs = t.next_obs;
        let done = t.done;
        episode.push(t);
        if done {
            return Ok(episode);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub kind: String,
    pub task: TaskId,
    pub seed: u64,
    pub episodes: usize,
    pub transitions: usize,
    pub attempts: usize,
    /// Environment seed of every stored episode, in order.
    pub episode_seeds: Vec<u64>,
    pub config_hash: String,
}

impl CorpusManifest {
    pub fn success_fraction(&self) -> f64 {
        self.episodes as f64 / self.attempts.max(1) as f64
    }
}

/// Successful scripted episodes plus their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoCorpus {
    pub manifest: CorpusManifest,
    pub episodes: Vec<Vec<Transition>>,
}

pub fn corpus_config_hash(env: &EnvConfig, demo: &DemoConfig) -> String {
    config_hash(&(env, demo))
}

/// Roll scripted episodes with derived seeds until `n_episodes` succeed.
/// Failed rollouts are dropped.
pub fn generate(env_config: &EnvConfig, demo: &DemoConfig, n_episodes: usize, seed: u64) -> Result<DemoCorpus> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("need at least one demonstration".into()));
    }
    let mut env = TissueRetractEnv::new(env_config.clone())?;
    let mut policy = ScriptedPolicy::new(demo.clone(), env_config.max_step);
    let budget = n_episodes + demo.retry_budget.unwrap_or(n_episodes.max(10));

    let mut episodes = Vec::with_capacity(n_episodes);
    let mut episode_seeds = Vec::with_capacity(n_episodes);
    let mut attempts = 0;
    while episodes.len() < n_episodes {
        if attempts >= budget {
            return Err(Error::DemoGenerationFailed {
                successes: episodes.len(),
                attempts,
            });
        }
        let ep_seed = derive_seed(seed, stream::DEMO, attempts as u64);
        attempts += 1;
        let episode = match rollout(&mut env, &mut policy, ep_seed) {
            Ok(ep) => ep,
            Err(Error::Configuration(_)) => continue,
            Err(e) => return Err(e),
        };
        if episode.last().is_some_and(|t| t.info.success) {
            episodes.push(episode);
            episode_seeds.push(ep_seed);
        }
    }

    let transitions = episodes.iter().map(Vec::len).sum();
    Ok(DemoCorpus {
        manifest: CorpusManifest {
            kind: "demo_corpus".into(),
            task: env_config.task.task_id,
            seed,
            episodes: episodes.len(),
            transitions,
            attempts,
            episode_seeds,
            config_hash: corpus_config_hash(env_config, demo),
        },
        episodes,
    })
}

impl DemoCorpus {
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flatten()
    }

    pub fn mean_length(&self) -> f64 {
        self.manifest.transitions as f64 / self.episodes.len().max(1) as f64
    }

    /// First `n` episodes as a corpus of their own.
    pub fn prefix(&self, n: usize) -> Result<DemoCorpus> {
        if n == 0 || n > self.episodes.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot take {n} of {} demonstrations",
                self.episodes.len()
            )));
        }
        let episodes = self.episodes[..n].to_vec();
        Ok(DemoCorpus {
            manifest: CorpusManifest {
                episodes: n,
                transitions: episodes.iter().map(Vec::len).sum(),
                episode_seeds: self.manifest.episode_seeds[..n].to_vec(),
                ..self.manifest.clone()
            },
            episodes,
        })
    }

    /// Manifest line followed by one transition per line.
    pub fn write(&self, out: impl Write) -> Result<()> {
        let mut out = BufWriter::new(out);
        serde_json::to_writer(&mut out, &self.manifest)?;
        out.write_all(b"\n")?;
        for ep in &self.episodes {
            write_jsonl(&mut out, ep)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<DemoCorpus> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines().enumerate();
        let manifest: CorpusManifest = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line?).map_err(|e| parse_err(1, e.to_string()))?,
            None => return Err(parse_err(1, "empty corpus file".into())),
        };

        let mut episodes = Vec::new();
        let mut current = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            let done = t.done;
            current.push(t);
            if done {
                episodes.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            return Err(parse_err(
                manifest.transitions + 1,
                "corpus ends inside an episode".into(),
            ));
        }
        if episodes.len() != manifest.episodes {
            return Err(parse_err(
                1,
                format!(
                    "manifest declares {} episodes, file holds {}",
                    manifest.episodes,
                    episodes.len()
                ),
            ));
        }
        Ok(DemoCorpus { manifest, episodes })
    }
}
