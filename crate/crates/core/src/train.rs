//! Training loop: rollouts, replay, updates and periodic evaluation.

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentConfig, Algorithm, ColPhase, UpdateStats};
use crate::demogen::DemoCorpus;
use crate::env::{compute_reward, EnvConfig, TissueRetractEnv};
use crate::error::{Error, Result};
use crate::eval::{run_eval, EvalReport, SeedResult};
use crate::replay::{sample_mixed, Provenance, ReplayBuffer};
use crate::rng::{derive_seed, stream};
use crate::sim::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Gradient steps after each collected episode.
    pub updates_per_episode: usize,
    /// Evaluate every this many episodes; 0 disables.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub strain_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 5000,
            updates_per_episode: 20,
            eval_interval: 500,
            eval_episodes: 20,
            strain_threshold: crate::eval::DEFAULT_STRAIN_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    pub env_steps: usize,
    pub episode_success: bool,
    pub eval_success_rate: Option<f64>,
    pub stats: UpdateStats,
}

pub const LOG_HEADER: &str =
    "episode,env_steps,episode_success,eval_success_rate,critic_loss,actor_loss,bc_loss,q_filter_pass_rate,guidance_reward_mean";

impl LogRow {
    pub fn csv(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{},{},{},{:.6e},{:.6e},{:.6e},{:.4},{:.6e}",
            self.episode,
            self.env_steps,
            u8::from(self.episode_success),
            self.eval_success_rate.map(|r| format!("{r:.4}")).unwrap_or_default(),
            s.critic_loss,
            s.actor_loss,
            s.bc_loss,
            s.q_filter_pass_rate,
            s.guidance_reward_mean,
        )
    }
}

/// Trains one agent. Demonstration-guided algorithms require `demos`;
/// plain DDPG ignores them. `on_row` sees one row per episode.
pub fn train(
    env_config: &EnvConfig,
    agent_config: &AgentConfig,
    config: &TrainConfig,
    demos: Option<&DemoCorpus>,
    on_row: &mut dyn FnMut(&LogRow) -> Result<()>,
) -> Result<Agent> {
    let algorithm = agent_config.algorithm;
    let seed = agent_config.seed;
    let mut demo_buf = match (algorithm.uses_demos(), demos) {
        (false, _) => None,
        (true, Some(c)) => Some(ReplayBuffer::from_corpus(c, derive_seed(seed, stream::REPLAY, 1))?),
        (true, None) => {
            return Err(Error::Configuration(format!("{algorithm} needs a demonstration corpus")));
        }
    };
    let mut agent = Agent::new(agent_config.clone())?;
    let mut agent_buf = ReplayBuffer::new(agent_config.buffer_capacity, derive_seed(seed, stream::REPLAY, 0))?;
    let tol = env_config.task.success_tolerance;
    let reward_fn = move |a: &Vec3, d: &Vec3| compute_reward(a, d, tol);
    let her = agent_config.her;
    let demo_her = agent_config.demo_her();
    let batch = agent_config.batch;

    if algorithm == Algorithm::Dex && agent_config.dex_guidance_weight > 0.0 {
        agent.fit_expert(demo_buf.as_ref().expect("DEX uses demos"))?;
    }
    if algorithm == Algorithm::Col {
        let demo = demo_buf.as_mut().expect("CoL uses demos");
        for _ in 0..agent_config.col_pretrain_steps {
            let b = demo.sample_her(batch, &demo_her, &reward_fn, Provenance::Demo)?;
            agent.col_update(&b, ColPhase::Pretrain)?;
        }
    }

    let mut env = TissueRetractEnv::new(env_config.clone())?;
    let mut env_steps = 0;
    let mut stats = Vec::with_capacity(config.updates_per_episode);
    for ep in 0..config.episodes {
        let mut obs = env.reset(derive_seed(seed, stream::TRAIN, ep as u64))?;
        let mut episode = Vec::with_capacity(env_config.horizon);
        loop {
            let t = env.step(&agent.act(&obs, true))?;
            obs = t.next_obs;
            let done = t.done;
            episode.push(t);
            if done {
                break;
            }
        }
        env_steps += episode.len();
        let episode_success = episode.last().is_some_and(|t| t.info.success);
        agent_buf.insert_episode(episode)?;

        stats.clear();
        for _ in 0..config.updates_per_episode {
            let s = if algorithm == Algorithm::Sqil {
                let demo = demo_buf.as_mut().expect("SQIL uses demos");
                let n_demo = crate::replay::demo_share(batch, agent_config.sqil_demo_fraction);
                let d = demo.sample_her(n_demo, &demo_her, &reward_fn, Provenance::Demo)?;
                let a = agent_buf.sample_her(batch - n_demo, &her, &reward_fn, Provenance::Agent)?;
                agent.sqil_update(&d, &a)?
            } else {
                let b = sample_mixed(
                    &mut agent_buf,
                    demo_buf.as_mut(),
                    batch,
                    agent_config.batch_demo_fraction(),
                    &her,
                    &demo_her,
                    &reward_fn,
                )?;
                agent.update(&b)?
            };
            stats.push(s);
        }

        let episode_no = ep + 1;
        let eval_success_rate = if config.eval_interval > 0 && episode_no % config.eval_interval == 0 {
            let r = run_eval(
                &mut agent,
                env_config,
                config.eval_episodes,
                derive_seed(seed, stream::EVAL, episode_no as u64),
                config.strain_threshold,
            )?;
            Some(r.rate)
        } else {
            None
        };
        on_row(&LogRow {
            episode: episode_no,
            env_steps,
            episode_success,
            eval_success_rate,
            stats: UpdateStats::mean(&stats),
        })?;
    }
    Ok(agent)
}

/// Trains and evaluates one (algorithm, demo count) cell for every seed.
#[allow(clippy::too_many_arguments)]
pub fn train_and_evaluate(
    env_config: &EnvConfig,
    agent_config: &AgentConfig,
    train_config: &TrainConfig,
    demos: Option<&DemoCorpus>,
    seeds: &[u64],
    eval_episodes: usize,
) -> Result<EvalReport> {
    let mut results: Vec<SeedResult> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = AgentConfig {
            seed,
            ..agent_config.clone()
        };
        let mut agent = train(env_config, &cfg, train_config, demos, &mut |_| Ok(()))?;
        results.push(run_eval(
            &mut agent,
            env_config,
            eval_episodes,
            seed,
            train_config.strain_threshold,
        )?);
    }
    EvalReport::from_results(
        env_config.task.task_id,
        agent_config.algorithm.name(),
        demos.map(|d| d.manifest.episodes),
        &results,
    )
}

/// Ablation over demonstration counts. Each count uses the leading
/// episodes of `full_corpus`.
pub fn ablation(
    env_config: &EnvConfig,
    algorithms: &[Algorithm],
    demo_counts: &[usize],
    full_corpus: Option<&DemoCorpus>,
    train_config: &TrainConfig,
    seeds: &[u64],
    eval_episodes: usize,
) -> Result<Vec<EvalReport>> {
    let full = full_corpus.ok_or_else(|| Error::Configuration("ablation needs a demonstration corpus".into()))?;
    let mut reports = Vec::new();
    for cell in crate::eval::ablation_cells(algorithms, demo_counts) {
        let corpus = full
            .prefix(cell.demo_count)
            .map_err(|_| Error::Configuration(format!("corpus holds fewer than {} demonstrations", cell.demo_count)))?;
        let agent_config = AgentConfig::for_algorithm(cell.algorithm);
        reports.push(train_and_evaluate(
            env_config,
            &agent_config,
            train_config,
            Some(&corpus),
            seeds,
            eval_episodes,
        )?);
    }
    Ok(reports)
}
