//! Episode-granular replay buffers with hindsight relabeling.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::demogen::DemoCorpus;
use crate::env::Transition;
use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};
use crate::sim::Vec3;

pub const DEFAULT_CAPACITY: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Demo,
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HerStrategy {
    /// Goal taken from a transition at or after the sampled one.
    Future,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HerConfig {
    pub strategy: HerStrategy,
    /// Relabeled goals per original; a sample is relabeled with
    /// probability k / (k + 1).
    pub k_relabel: usize,
}

impl Default for HerConfig {
    fn default() -> Self {
        Self {
            strategy: HerStrategy::Future,
            k_relabel: 4,
        }
    }
}

impl HerConfig {
    pub fn disabled() -> Self {
        Self {
            k_relabel: 0,
            ..Self::default()
        }
    }

    pub fn relabel_probability(&self) -> f64 {
        self.k_relabel as f64 / (self.k_relabel as f64 + 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub transition: Transition,
    pub provenance: Provenance,
    pub relabeled: bool,
    /// Index within its episode of the transition whose achieved goal was
    /// used; equals the sampled index when not relabeled.
    pub goal_source: usize,
    pub index_in_episode: usize,
}

/// Capacity is counted in transitions; whole episodes are evicted oldest
/// first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Vec<Transition>>,
    /// Global index of the first transition of each stored episode.
    starts: Vec<usize>,
    len: usize,
    rng: Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            episodes: VecDeque::new(),
            starts: Vec::new(),
            len: 0,
            rng: rng_from(seed),
        })
    }

    /// Demonstration buffer holding a whole corpus.
    pub fn from_corpus(corpus: &DemoCorpus, seed: u64) -> Result<Self> {
        let mut buf = Self::new(DEFAULT_CAPACITY.max(corpus.manifest.transitions), seed)?;
        for ep in &corpus.episodes {
            buf.insert_episode(ep.clone())?;
        }
        Ok(buf)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &[Transition]> {
        self.episodes.iter().map(Vec::as_slice)
    }

    pub fn insert_episode(&mut self, episode: Vec<Transition>) -> Result<()> {
        if episode.is_empty() {
            return Err(Error::InvalidArgument("cannot store an empty episode".into()));
        }
        if episode.len() > self.capacity {
            return Err(Error::InvalidArgument(format!(
                "episode of {} transitions exceeds capacity {}",
                episode.len(),
                self.capacity
            )));
        }
        self.len += episode.len();
        self.episodes.push_back(episode);
        while self.len > self.capacity {
            let old = self.episodes.pop_front().expect("over capacity implies non-empty");
            self.len -= old.len();
        }
        self.starts.clear();
        let mut start = 0;
        for ep in &self.episodes {
            self.starts.push(start);
            start += ep.len();
        }
        Ok(())
    }

    fn locate(&self, global: usize) -> (usize, usize) {
        let ep = self.starts.partition_point(|&s| s <= global) - 1;
        (ep, global - self.starts[ep])
    }

    /// Uniform transitions, each relabeled with probability k/(k+1) using the
    /// achieved goal of a uniformly chosen transition at or after it in the
    /// same episode. Rewards come from `reward_fn(achieved, goal)` for
    /// relabeled samples and `done` becomes `reward == 0` for all.
    pub fn sample_her(
        &mut self,
        batch: usize,
        her: &HerConfig,
        reward_fn: &dyn Fn(&Vec3, &Vec3) -> f64,
        provenance: Provenance,
    ) -> Result<Vec<Sample>> {
        if self.is_empty() {
            return Err(Error::InvalidState("sampling from an empty replay buffer".into()));
        }
        let p = her.relabel_probability();
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let global = self.rng.random_range(0..self.len);
            let (ep, t) = self.locate(global);
            let ep_len = self.episodes[ep].len();
            let mut tr = self.episodes[ep][t];
            let relabel = p > 0.0 && self.rng.random::<f64>() < p;
            let mut goal_source = t;
            if relabel {
                goal_source = self.rng.random_range(t..ep_len);
                let goal = self.episodes[ep][goal_source].next_obs.achieved_goal;
                tr.obs = tr.obs.with_goal(goal);
                tr.next_obs = tr.next_obs.with_goal(goal);
                tr.reward = reward_fn(&tr.next_obs.achieved_goal, &goal);
            }
            tr.done = tr.reward == 0.0;
            out.push(Sample {
                transition: tr,
                provenance,
                relabeled: relabel,
                goal_source,
                index_in_episode: t,
            });
        }
        Ok(out)
    }
}

/// Number of demonstration samples in a mixed batch.
pub fn demo_share(batch: usize, demo_fraction: f64) -> usize {
    ((demo_fraction * batch as f64).ceil() as usize).min(batch)
}

/// `ceil(demo_fraction * batch)` samples from the demonstration buffer, the
/// rest from the agent buffer, demo samples first.
#[allow(clippy::too_many_arguments)]
pub fn sample_mixed(
    agent: &mut ReplayBuffer,
    demo: Option<&mut ReplayBuffer>,
    batch: usize,
    demo_fraction: f64,
    agent_her: &HerConfig,
    demo_her: &HerConfig,
    reward_fn: &dyn Fn(&Vec3, &Vec3) -> f64,
) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&demo_fraction) {
        return Err(Error::InvalidArgument(format!(
            "demo fraction {demo_fraction} outside [0, 1]"
        )));
    }
    let n_demo = demo_share(batch, demo_fraction);
    let mut out = Vec::with_capacity(batch);
    if n_demo > 0 {
        match demo {
            Some(d) if !d.is_empty() => out.extend(d.sample_her(n_demo, demo_her, reward_fn, Provenance::Demo)?),
            _ => {
                return Err(Error::InvalidState(
                    "demonstration share requested but the demo buffer is empty".into(),
                ))
            }
        }
    }
    if batch > n_demo {
        out.extend(agent.sample_her(batch - n_demo, agent_her, reward_fn, Provenance::Agent)?);
    }
    Ok(out)
}
