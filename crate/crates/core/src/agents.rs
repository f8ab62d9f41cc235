//! DDPG and its demonstration-guided variants.
//!
//! All five learners share one deterministic actor and one or two critics.
//! They differ in the data they consume and in the losses:
//!
//! | algorithm | data            | extra terms                                     |
//! |-----------|-----------------|-------------------------------------------------|
//! | DDPG      | agent           | none                                            |
//! | SQIL      | demo + agent    | rewards overwritten: demo 0, agent -1           |
//! | DDPGBC    | demo + agent    | behavior cloning gated by a Q-filter            |
//! | CoL       | demo, then both | BC pretraining, then BC + actor Q loss          |
//! | DEX       | demo + agent    | expert-gap reward bonus, twin-critic minimum    |

use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation, ACT_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::neural::{Activation, Adam, AdamConfig, Grads, Mlp, MlpSpec};
use crate::replay::{HerConfig, Provenance, ReplayBuffer, Sample, DEFAULT_CAPACITY};
use crate::rng::{derive_seed, rng_from, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ddpg,
    Sqil,
    Ddpgbc,
    Col,
    Dex,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Ddpg,
        Algorithm::Sqil,
        Algorithm::Ddpgbc,
        Algorithm::Col,
        Algorithm::Dex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ddpg => "DDPG",
            Algorithm::Sqil => "SQIL",
            Algorithm::Ddpgbc => "DDPGBC",
            Algorithm::Col => "CoL",
            Algorithm::Dex => "DEX",
        }
    }

    pub fn uses_demos(self) -> bool {
        self != Algorithm::Ddpg
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    /// Hidden widths shared by actor and critics.
    pub hidden: Vec<usize>,
    pub tau: f64,
    pub exploration_sigma: f64,
    /// Probability of a uniformly random exploratory action.
    pub random_eps: f64,
    pub demo_fraction: f64,
    /// Demo share of SQIL's combined batch.
    pub sqil_demo_fraction: f64,
    pub bc_weight: f64,
    pub actor_q_weight: f64,
    pub q_filter: bool,
    pub col_pretrain_steps: usize,
    pub dex_guidance_weight: f64,
    pub dex_twin_critics: bool,
    /// Minibatch steps used to fit DEX's behavior-cloned expert.
    pub expert_fit_steps: usize,
    /// Clamp bootstrap targets to the range reachable under the reward.
    pub clip_target: bool,
    pub her: HerConfig,
    pub relabel_demos: bool,
    pub buffer_capacity: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self::for_algorithm(Algorithm::Ddpg)
    }
}

impl AgentConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        let hidden = match algorithm {
            Algorithm::Dex => vec![256; 4],
            _ => vec![128; 3],
        };
        Self {
            algorithm,
            gamma: 0.99,
            lr: 1e-3,
            batch: 128,
            hidden,
            tau: 0.005,
            exploration_sigma: 0.1,
            random_eps: 0.0,
            demo_fraction: 0.25,
            sqil_demo_fraction: 0.5,
            bc_weight: 1.0,
            actor_q_weight: 1.0,
            q_filter: true,
            col_pretrain_steps: 2000,
            dex_guidance_weight: 0.1,
            dex_twin_critics: true,
            expert_fit_steps: 2000,
            clip_target: true,
            her: HerConfig::default(),
            relabel_demos: true,
            buffer_capacity: DEFAULT_CAPACITY,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.buffer_capacity == 0 {
            return bad("lr, batch and buffer capacity must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        for (name, v) in [
            ("exploration_sigma", self.exploration_sigma),
            ("bc_weight", self.bc_weight),
            ("actor_q_weight", self.actor_q_weight),
            ("dex_guidance_weight", self.dex_guidance_weight),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("random_eps", self.random_eps),
            ("demo_fraction", self.demo_fraction),
            ("sqil_demo_fraction", self.sqil_demo_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn critic_count(&self) -> usize {
        if self.algorithm == Algorithm::Dex && self.dex_twin_critics {
            2
        } else {
            1
        }
    }

    pub fn demo_her(&self) -> HerConfig {
        if self.relabel_demos {
            self.her
        } else {
            HerConfig::disabled()
        }
    }

    /// Demo share of a minibatch during regular updates.
    pub fn batch_demo_fraction(&self) -> f64 {
        match self.algorithm {
            Algorithm::Ddpg => 0.0,
            Algorithm::Sqil => self.sqil_demo_fraction,
            _ => self.demo_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub bc_loss: f64,
    pub q_filter_pass_rate: f64,
    pub guidance_reward_mean: f64,
}

impl UpdateStats {
    fn check(self) -> Result<Self> {
        let all = [
            self.critic_loss,
            self.actor_loss,
            self.bc_loss,
            self.q_filter_pass_rate,
            self.guidance_reward_mean,
        ];
        if all.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::TrainingDiverged(format!("non-finite update statistics {self:?}")))
        }
    }

    pub fn mean(stats: &[UpdateStats]) -> UpdateStats {
        let n = stats.len().max(1) as f64;
        let mut m = UpdateStats::default();
        for s in stats {
            m.critic_loss += s.critic_loss / n;
            m.actor_loss += s.actor_loss / n;
            m.bc_loss += s.bc_loss / n;
            m.q_filter_pass_rate += s.q_filter_pass_rate / n;
            m.guidance_reward_mean += s.guidance_reward_mean / n;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColPhase {
    Pretrain,
    Joint,
}

/// DEX reward bonus for one state: `w * exp(-|a_agent - a_expert|^2)`.
pub fn guidance_bonus(agent_action: &[f64], expert_action: &[f64], w: f64) -> f64 {
    let gap2: f64 = agent_action
        .iter()
        .zip(expert_action)
        .map(|(a, e)| (a - e).powi(2))
        .sum();
    w * (-gap2).exp()
}

/// Critic target `r + gamma * (1 - done) * q_next`.
pub fn td_target(reward: f64, done: bool, gamma: f64, q_next: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q_next
    }
}

/// Whether a demonstration pair feeds the BC loss: only when the critic
/// strictly prefers the demonstrated action.
pub fn q_filter_pass(q_demo: f64, q_policy: f64) -> bool {
    q_demo > q_policy
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BcMode {
    Off,
    Filtered,
    Unfiltered,
}

/// Loss composition of one actor-critic step.
#[derive(Debug, Clone, Copy)]
struct Recipe {
    sqil_rewards: bool,
    guidance: f64,
    bc: BcMode,
    bc_weight: f64,
    q_weight: f64,
}

/// Column-stacked minibatch.
#[derive(Debug, Clone)]
pub struct BatchArrays {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub done: Array1<f64>,
    pub demo: Vec<bool>,
}

impl BatchArrays {
    pub fn from_samples(batch: &[Sample]) -> Self {
        let n = batch.len();
        let mut obs = Array2::zeros((n, OBS_DIM));
        let mut next_obs = Array2::zeros((n, OBS_DIM));
        let mut actions = Array2::zeros((n, ACT_DIM));
        let mut rewards = Array1::zeros(n);
        let mut done = Array1::zeros(n);
        let mut demo = Vec::with_capacity(n);
        for (i, s) in batch.iter().enumerate() {
            let t = &s.transition;
            obs.row_mut(i).assign(&Array1::from(t.obs.features().to_vec()));
            next_obs.row_mut(i).assign(&Array1::from(t.next_obs.features().to_vec()));
            actions.row_mut(i).assign(&Array1::from(t.action.to_array().to_vec()));
            rewards[i] = t.reward;
            done[i] = if t.done { 1.0 } else { 0.0 };
            demo.push(s.provenance == Provenance::Demo);
        }
        Self {
            obs,
            actions,
            rewards,
            next_obs,
            done,
            demo,
        }
    }
}

fn join(obs: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[obs.view(), actions.view()]).expect("row counts agree")
}

pub fn features_row(obs: &Observation) -> Array2<f64> {
    Array2::from_shape_vec((1, OBS_DIM), obs.features().to_vec()).expect("fixed width")
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    pub actor: Mlp,
    actor_target: Mlp,
    actor_opt: Adam,
    pub critics: Vec<Mlp>,
    critic_targets: Vec<Mlp>,
    critic_opts: Vec<Adam>,
    /// Behavior-cloned stand-in for the expert (DEX only).
    pub expert: Option<Mlp>,
    rng: Rng,
    updates: u64,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Result<Self> {
        config.validate()?;
        let mut init = rng_from(derive_seed(config.seed, stream::AGENT, 0));
        let actor_spec = MlpSpec::new(OBS_DIM, &config.hidden, ACT_DIM, Activation::Tanh);
        let critic_spec = MlpSpec::new(OBS_DIM + ACT_DIM, &config.hidden, 1, Activation::Identity);
        let actor = Mlp::new(actor_spec, 1e-3, &mut init)?;
        let critics = (0..config.critic_count())
            .map(|_| Mlp::new(critic_spec.clone(), 1.0, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            actor_target: actor.clone(),
            actor_opt: Adam::new(adam, &actor),
            critic_targets: critics.clone(),
            critic_opts: critics.iter().map(|c| Adam::new(adam, c)).collect(),
            actor,
            critics,
            expert: None,
            rng: rng_from(derive_seed(config.seed, stream::AGENT, 1)),
            updates: 0,
            config,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Deterministic policy output in [-1, 1].
    pub fn policy(&self, obs: &Observation) -> [f64; ACT_DIM] {
        let out = self.actor.predict(features_row(obs).view()).expect("fixed width");
        std::array::from_fn(|i| out[[0, i]])
    }

    pub fn act(&mut self, obs: &Observation, explore: bool) -> Action {
        let mut a = self.policy(obs);
        if explore {
            if self.config.random_eps > 0.0 && self.rng.random::<f64>() < self.config.random_eps {
                a = std::array::from_fn(|_| self.rng.random_range(-1.0..=1.0));
            } else if self.config.exploration_sigma > 0.0 {
                let noise = Normal::new(0.0, self.config.exploration_sigma).expect("sigma validated");
                for v in &mut a {
                    *v = (*v + noise.sample(&mut self.rng)).clamp(-1.0, 1.0);
                }
            }
        }
        Action::from_slice(&a)
    }

    fn recipe(&self, col_phase: ColPhase) -> Recipe {
        let c = &self.config;
        let base = Recipe {
            sqil_rewards: false,
            guidance: 0.0,
            bc: BcMode::Off,
            bc_weight: c.bc_weight,
            q_weight: 1.0,
        };
        match c.algorithm {
            Algorithm::Ddpg => base,
            Algorithm::Sqil => Recipe {
                sqil_rewards: true,
                ..base
            },
            Algorithm::Ddpgbc => Recipe {
                bc: if c.q_filter { BcMode::Filtered } else { BcMode::Unfiltered },
                ..base
            },
            Algorithm::Col => match col_phase {
                ColPhase::Pretrain => Recipe {
                    bc: BcMode::Unfiltered,
                    q_weight: 0.0,
                    ..base
                },
                ColPhase::Joint => Recipe {
                    bc: BcMode::Unfiltered,
                    q_weight: c.actor_q_weight,
                    ..base
                },
            },
            Algorithm::Dex => Recipe {
                guidance: c.dex_guidance_weight,
                ..base
            },
        }
    }

    pub fn ddpg_update(&mut self, batch: &[Sample]) -> Result<UpdateStats> {
        let recipe = Recipe {
            sqil_rewards: false,
            guidance: 0.0,
            bc: BcMode::Off,
            bc_weight: 0.0,
            q_weight: 1.0,
        };
        self.step(batch, recipe)
    }

    /// Rewards are replaced by provenance (demo 0, agent -1) before a plain
    /// actor-critic step on the combined batch.
    pub fn sqil_update(&mut self, demo_batch: &[Sample], agent_batch: &[Sample]) -> Result<UpdateStats> {
        let combined: Vec<Sample> = demo_batch.iter().chain(agent_batch).copied().collect();
        self.step(&combined, self.recipe(ColPhase::Joint))
    }

    pub fn ddpgbc_update(&mut self, batch: &[Sample]) -> Result<UpdateStats> {
        self.step(batch, self.recipe(ColPhase::Joint))
    }

    pub fn col_update(&mut self, batch: &[Sample], phase: ColPhase) -> Result<UpdateStats> {
        self.step(batch, self.recipe(phase))
    }

    pub fn dex_update(&mut self, batch: &[Sample]) -> Result<UpdateStats> {
        if self.config.dex_guidance_weight > 0.0 && self.expert.is_none() {
            return Err(Error::InvalidState("DEX update before the expert proxy was fitted".into()));
        }
        self.step(batch, self.recipe(ColPhase::Joint))
    }

    /// Dispatch on the configured algorithm; `batch` must already have the
    /// algorithm's demo/agent composition.
    pub fn update(&mut self, batch: &[Sample]) -> Result<UpdateStats> {
        match self.config.algorithm {
            Algorithm::Ddpg => self.ddpg_update(batch),
            Algorithm::Sqil => self.step(batch, self.recipe(ColPhase::Joint)),
            Algorithm::Ddpgbc => self.ddpgbc_update(batch),
            Algorithm::Col => self.col_update(batch, ColPhase::Joint),
            Algorithm::Dex => self.dex_update(batch),
        }
    }

    /// Fits the DEX expert proxy to demonstration actions by regression.
    pub fn fit_expert(&mut self, demos: &ReplayBuffer) -> Result<f64> {
        let pairs: Vec<_> = demos
            .episodes()
            .flatten()
            .map(|t| (t.obs.features(), t.action.to_array()))
            .collect();
        if pairs.is_empty() {
            return Err(Error::InsufficientData(0));
        }
        let mut init = rng_from(derive_seed(self.config.seed, stream::AGENT, 2));
        let spec = self.actor.spec().clone();
        let mut expert = Mlp::new(spec, 1.0, &mut init)?;
        let mut opt = Adam::new(self.actor_opt.config, &expert);
        let n = self.config.batch.min(pairs.len());
        let mut loss = 0.0;
        for _ in 0..self.config.expert_fit_steps {
            let mut x = Array2::zeros((n, OBS_DIM));
            let mut y = Array2::zeros((n, ACT_DIM));
            for i in 0..n {
                let (f, a) = &pairs[init.random_range(0..pairs.len())];
                x.row_mut(i).assign(&ndarray::ArrayView1::from(f));
                y.row_mut(i).assign(&ndarray::ArrayView1::from(a));
            }
            let out = expert.forward(x.view())?;
            let diff = &out - &y;
            loss = diff.mapv(|v| v * v).sum() / n as f64;
            let (g, _) = expert.backward((diff * (2.0 / n as f64)).view())?;
            opt.step(&mut expert, &g)?;
        }
        self.expert = Some(expert);
        Ok(loss)
    }

    /// Objective the actor minimizes on `batch` (Q term and BC term of the
    /// configured algorithm), evaluated without side effects.
    pub fn actor_objective(&self, batch: &[Sample]) -> Result<f64> {
        let b = BatchArrays::from_samples(batch);
        let recipe = self.recipe(ColPhase::Joint);
        let pi = self.actor.predict(b.obs.view())?;
        let q_pi = self.critics[0].predict(join(&b.obs, &pi).view())?;
        let q_demo = self.critics[0].predict(join(&b.obs, &b.actions).view())?;
        let (bc, _, _) = bc_terms(&b, &pi, &q_demo, &q_pi, recipe);
        Ok(-recipe.q_weight * q_pi.mean().unwrap_or(0.0) + recipe.bc_weight * bc)
    }

    /// Gradient of [`Agent::actor_objective`] with respect to the actor's
    /// parameters.
    pub fn actor_gradients(&mut self, batch: &[Sample]) -> Result<Grads> {
        let b = BatchArrays::from_samples(batch);
        let recipe = self.recipe(ColPhase::Joint);
        Ok(self.actor_pass(&b, recipe)?.0)
    }

    fn actor_pass(&mut self, b: &BatchArrays, recipe: Recipe) -> Result<(Grads, f64, f64, f64)> {
        let n = b.obs.nrows() as f64;
        let pi = self.actor.forward(b.obs.view())?;
        let critic = &mut self.critics[0];
        let q_demo = if recipe.bc == BcMode::Filtered {
            critic.predict(join(&b.obs, &b.actions).view())?
        } else {
            Array2::zeros((b.obs.nrows(), 1))
        };
        let q_pi = critic.forward(join(&b.obs, &pi).view())?;
        let grad_q = Array2::from_elem((b.obs.nrows(), 1), -recipe.q_weight / n);
        let (_, dx) = critic.backward(grad_q.view())?;
        let mut d_action = dx.slice(s![.., OBS_DIM..]).to_owned();

        let (bc_loss, pass_rate, bc_grad) = bc_terms(b, &pi, &q_demo, &q_pi, recipe);
        d_action.scaled_add(recipe.bc_weight, &bc_grad);
        let (grads, _) = self.actor.backward(d_action.view())?;
        let loss = -recipe.q_weight * q_pi.mean().unwrap_or(0.0) + recipe.bc_weight * bc_loss;
        Ok((grads, loss, bc_loss, pass_rate))
    }

    fn step(&mut self, batch: &[Sample], recipe: Recipe) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty minibatch".into()));
        }
        let mut b = BatchArrays::from_samples(batch);
        let n = b.obs.nrows() as f64;

        if recipe.sqil_rewards {
            for (r, &demo) in b.rewards.iter_mut().zip(&b.demo) {
                *r = if demo { 0.0 } else { -1.0 };
            }
        }
        let mut guidance_mean = 0.0;
        if recipe.guidance > 0.0 {
            let expert = self
                .expert
                .as_ref()
                .ok_or_else(|| Error::InvalidState("guidance reward needs an expert proxy".into()))?;
            let mu = self.actor.predict(b.obs.view())?;
            let mu_e = expert.predict(b.obs.view())?;
            for i in 0..b.obs.nrows() {
                let bonus = guidance_bonus(
                    mu.row(i).as_slice().expect("contiguous"),
                    mu_e.row(i).as_slice().expect("contiguous"),
                    recipe.guidance,
                );
                b.rewards[i] += bonus;
                guidance_mean += bonus / n;
            }
        }

        let y = self.targets(&b, recipe.guidance)?;
        let x = join(&b.obs, &b.actions);
        let mut critic_loss = 0.0;
        for (critic, opt) in self.critics.iter_mut().zip(&mut self.critic_opts) {
            let q = critic.forward(x.view())?;
            let diff = &q - &y;
            critic_loss += diff.mapv(|v| v * v).sum() / n;
            let (g, _) = critic.backward((diff * (2.0 / n)).view())?;
            opt.step(critic, &g)?;
        }
        critic_loss /= self.critics.len() as f64;

        let (g, actor_loss, bc_loss, q_filter_pass_rate) = self.actor_pass(&b, recipe)?;
        self.actor_opt.step(&mut self.actor, &g)?;

        let tau = self.config.tau;
        self.actor_target.soft_update(&self.actor, tau)?;
        for (t, c) in self.critic_targets.iter_mut().zip(&self.critics) {
            t.soft_update(c, tau)?;
        }
        self.updates += 1;
        UpdateStats {
            critic_loss,
            actor_loss,
            bc_loss,
            q_filter_pass_rate,
            guidance_reward_mean: guidance_mean,
        }
        .check()
    }

    /// Bootstrap targets with the minimum over target critics.
    pub fn targets(&self, b: &BatchArrays, guidance: f64) -> Result<Array2<f64>> {
        let gamma = self.config.gamma;
        let a_next = self.actor_target.predict(b.next_obs.view())?;
        let x_next = join(&b.next_obs, &a_next);
        let mut q_next: Option<Array2<f64>> = None;
        for t in &self.critic_targets {
            let q = t.predict(x_next.view())?;
            q_next = Some(match q_next {
                None => q,
                Some(m) => ndarray::Zip::from(&m).and(&q).map_collect(|&a, &b| a.min(b)),
            });
        }
        let q_next = q_next.expect("at least one critic");
        let (lo, hi) = (-1.0 / (1.0 - gamma), guidance / (1.0 - gamma));
        Ok(Array2::from_shape_fn((b.obs.nrows(), 1), |(i, _)| {
            let y = td_target(b.rewards[i], b.done[i] > 0.5, gamma, q_next[[i, 0]]);
            if self.config.clip_target {
                y.clamp(lo, hi)
            } else {
                y
            }
        }))
    }

    /// Individual per-target-critic bootstrap targets, for inspection.
    pub fn per_critic_targets(&self, batch: &[Sample]) -> Result<Vec<Array2<f64>>> {
        let b = BatchArrays::from_samples(batch);
        let a_next = self.actor_target.predict(b.next_obs.view())?;
        let x_next = join(&b.next_obs, &a_next);
        self.critic_targets
            .iter()
            .map(|t| {
                let q = t.predict(x_next.view())?;
                Ok(Array2::from_shape_fn((b.obs.nrows(), 1), |(i, _)| {
                    td_target(b.rewards[i], b.done[i] > 0.5, self.config.gamma, q[[i, 0]])
                }))
            })
            .collect()
    }

    pub fn q_values(&self, obs: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = concatenate(Axis(1), &[obs, actions]).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        self.critics[0].predict(x.view())
    }

    /// Mean squared error between the policy and the batch actions on
    /// demonstration rows.
    pub fn bc_error(&self, batch: &[Sample]) -> Result<f64> {
        let b = BatchArrays::from_samples(batch);
        let pi = self.actor.predict(b.obs.view())?;
        let mut total = 0.0;
        let mut rows = 0;
        for (i, _) in b.demo.iter().enumerate().filter(|(_, &d)| d) {
            rows += 1;
            total += (0..ACT_DIM).map(|j| (pi[[i, j]] - b.actions[[i, j]]).powi(2)).sum::<f64>();
        }
        Ok(total / rows.max(1) as f64)
    }

    pub fn save(&self, dir: &Path, manifest: &AgentManifest) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("agent.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
        self.actor.save(dir, "actor", self.updates)?;
        for (i, c) in self.critics.iter().enumerate() {
            c.save(dir, &format!("critic_{i}"), self.updates)?;
        }
        if let Some(e) = &self.expert {
            e.save(dir, "expert", self.updates)?;
        }
        Ok(())
    }

    /// Restores networks for evaluation; optimizer state is not kept.
    pub fn load(dir: &Path) -> Result<(Self, AgentManifest)> {
        let manifest: AgentManifest = serde_json::from_slice(&std::fs::read(dir.join("agent.json"))?)?;
        let mut agent = Agent::new(manifest.config.clone())?;
        let (actor, step) = Mlp::load(dir, "actor")?;
        check_shape(&actor, agent.actor.spec())?;
        agent.actor = actor;
        agent.actor_target = agent.actor.clone();
        for i in 0..agent.critics.len() {
            let (c, _) = Mlp::load(dir, &format!("critic_{i}"))?;
            check_shape(&c, agent.critics[i].spec())?;
            agent.critics[i] = c;
        }
        agent.critic_targets = agent.critics.clone();
        if dir.join("expert.json").exists() {
            agent.expert = Some(Mlp::load(dir, "expert")?.0);
        }
        agent.updates = step;
        Ok((agent, manifest))
    }
}

fn check_shape(net: &Mlp, expected: &MlpSpec) -> Result<()> {
    if net.spec() != expected {
        return Err(Error::CheckpointIncompatible(format!(
            "network widths {:?} do not match expected {:?}",
            net.spec().dims,
            expected.dims
        )));
    }
    Ok(())
}

/// BC loss (mean over demo rows of squared action error, counting only rows
/// that pass the filter), pass rate and the loss gradient w.r.t. the policy
/// output.
fn bc_terms(
    b: &BatchArrays,
    pi: &Array2<f64>,
    q_demo: &Array2<f64>,
    q_pi: &Array2<f64>,
    recipe: Recipe,
) -> (f64, f64, Array2<f64>) {
    let mut grad = Array2::zeros(pi.raw_dim());
    let n_demo = b.demo.iter().filter(|&&d| d).count();
    if recipe.bc == BcMode::Off || n_demo == 0 {
        return (0.0, 0.0, grad);
    }
    let (mut loss, mut passed) = (0.0, 0);
    for (i, _) in b.demo.iter().enumerate().filter(|(_, &d)| d) {
        if recipe.bc == BcMode::Filtered && !q_filter_pass(q_demo[[i, 0]], q_pi[[i, 0]]) {
            continue;
        }
        passed += 1;
        for j in 0..ACT_DIM {
            let d = pi[[i, j]] - b.actions[[i, j]];
            loss += d * d;
            grad[[i, j]] = 2.0 * d / n_demo as f64;
        }
    }
    (loss / n_demo as f64, passed as f64 / n_demo as f64, grad)
}

/// Written as `agent.json` beside the network files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentManifest {
    pub algorithm: Algorithm,
    pub config: AgentConfig,
    pub training_step: u64,
    pub episodes: usize,
    pub env_config_hash: String,
    pub obs_dim: usize,
    pub act_dim: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algorithm_names_parse() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
            assert_eq!(a.name().to_lowercase().parse::<Algorithm>().unwrap(), a);
        }
        assert!("ppo".parse::<Algorithm>().is_err());
    }

    #[test]
    fn masked_bootstrap() {
        assert_eq!(td_target(-1.0, true, 0.99, 123.0), -1.0);
        assert!((td_target(-1.0, false, 0.99, -1.0) + 1.99).abs() < 1e-15);
    }

    #[test]
    fn q_filter_is_strict() {
        assert!(q_filter_pass(0.9, 0.5));
        assert!(!q_filter_pass(0.5, 0.5));
    }

    #[test]
    fn zero_gap_bonus_is_weight() {
        assert_eq!(guidance_bonus(&[0.1, -0.2, 0.3, 1.0], &[0.1, -0.2, 0.3, 1.0], 0.1), 0.1);
    }

    #[test]
    fn dex_defaults() {
        let c = AgentConfig::for_algorithm(Algorithm::Dex);
        assert_eq!(c.hidden, vec![256; 4]);
        assert_eq!(c.critic_count(), 2);
        assert_eq!(AgentConfig::default().critic_count(), 1);
    }

    #[test]
    fn invalid_gamma_rejected() {
        let c = AgentConfig {
            gamma: 1.0,
            ..AgentConfig::default()
        };
        assert!(matches!(Agent::new(c), Err(Error::Configuration(_))));
    }
}
