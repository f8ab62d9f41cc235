use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use tissue_retract::agents::{Agent, AgentManifest, Algorithm};
use tissue_retract::config::ConfigFile;
use tissue_retract::demogen::{self, DemoCorpus, ScriptedPolicy};
use tissue_retract::env::{read_trace, write_jsonl, TaskId, ACT_DIM, OBS_DIM};
use tissue_retract::eval::{self, outcome_of, EvalReport, Policy};
use tissue_retract::manifest::{config_hash, file_hash, RunManifest};
use tissue_retract::train::{self, LOG_HEADER};
use tissue_retract::{Error, Result};

/// Soft-tissue retraction benchmark: scripted demonstrations, agent
/// training, evaluation and trace inspection.
#[derive(Debug, Parser)]
#[command(name = "tissue-retract", version)]
struct Cli {
    /// TOML experiment config; command-line flags take precedence.
    #[arg(long, global = true, env = "TISSUE_RETRACT_CONFIG")]
    config: Option<PathBuf>,

    /// Only print warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a scripted demonstration corpus (JSON lines).
    GenDemos(GenDemosArgs),
    /// Train one agent and write its log, checkpoint and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or `scripted`) across seeds.
    Eval(EvalArgs),
    /// Train and evaluate algorithms over demonstration counts.
    Ablate(AblateArgs),
    /// Print an episode trace step by step.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct GenDemosArgs {
    #[arg(long)]
    task: TaskId,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    algo: Algorithm,
    #[arg(long)]
    task: TaskId,
    #[arg(long)]
    episodes: Option<usize>,
    /// Demonstration corpus; required except for DDPG.
    #[arg(long, env = "TISSUE_RETRACT_DEMOS")]
    demos: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "TISSUE_RETRACT_OUT_DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    updates_per_episode: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory (or a train output directory), or `scripted`.
    #[arg(long)]
    checkpoint: String,
    #[arg(long)]
    task: TaskId,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, env = "TISSUE_RETRACT_OUT_DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    strain_threshold: Option<f64>,
    /// Also write every episode trace under `<out-dir>/traces`.
    #[arg(long)]
    traces: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "CoL,SQIL")]
    algos: Vec<Algorithm>,
    #[arg(long, value_delimiter = ',', default_value = "25,50,100")]
    counts: Vec<usize>,
    #[arg(long)]
    task: TaskId,
    #[arg(long, env = "TISSUE_RETRACT_DEMOS")]
    demos: PathBuf,
    /// Training episodes per run.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long, env = "TISSUE_RETRACT_OUT_DIR")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    trace: PathBuf,
    #[arg(long)]
    strain_threshold: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::GenDemos(a) => gen_demos(&file, a),
        Command::Train(a) => train_cmd(&file, a),
        Command::Eval(a) => eval_cmd(&file, a),
        Command::Ablate(a) => ablate_cmd(&file, a),
        Command::Replay(a) => replay_cmd(&file, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Configuration(format!("cannot create {}: {e}", dir.display())))
}

fn load_corpus(path: &Path) -> Result<DemoCorpus> {
    if !path.exists() {
        return Err(Error::Configuration(format!("demonstration corpus {} not found", path.display())));
    }
    DemoCorpus::load(path)
}

fn gen_demos(file: &ConfigFile, a: GenDemosArgs) -> Result<()> {
    let env = file.env(a.task)?;
    let demo = file.demo()?;
    let corpus = demogen::generate(&env, &demo, a.count as usize, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    corpus.save(&a.out)?;
    let m = &corpus.manifest;
    println!(
        "wrote {}: {} episodes, mean length {:.1}, success fraction before filtering {:.3} ({}/{} attempts)",
        a.out.display(),
        m.episodes,
        corpus.mean_length(),
        m.success_fraction(),
        m.episodes,
        m.attempts
    );
    Ok(())
}

fn train_cmd(file: &ConfigFile, a: TrainArgs) -> Result<()> {
    let env = file.env(a.task)?;
    let mut agent_cfg = file.agent(a.algo)?;
    agent_cfg.seed = a.seed;
    let mut train_cfg = file.train()?;
    if let Some(v) = a.episodes {
        train_cfg.episodes = v;
    }
    if let Some(v) = a.updates_per_episode {
        train_cfg.updates_per_episode = v;
    }
    if let Some(v) = a.eval_interval {
        train_cfg.eval_interval = v;
    }
    if let Some(v) = a.eval_episodes {
        train_cfg.eval_episodes = v;
    }

    let (corpus, corpus_hash) = match (a.algo.uses_demos(), &a.demos) {
        (true, None) => {
            return Err(Error::Configuration(format!("{} requires --demos", a.algo)));
        }
        (true, Some(p)) => (Some(load_corpus(p)?), Some(file_hash(p)?)),
        (false, Some(_)) => {
            warn!("DDPG does not use demonstrations; ignoring --demos");
            (None, None)
        }
        (false, None) => (None, None),
    };

    create_dir(&a.out_dir)?;
    let config_snapshot = json!({ "env": env, "agent": agent_cfg, "train": train_cfg });
    let mut manifest = RunManifest::new(format!("train {} task {}", a.algo, a.task), config_snapshot, vec![a.seed]);
    manifest.demo_corpus_hash = corpus_hash;

    let log_path = a.out_dir.join("log.csv");
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "{LOG_HEADER}")?;
    let agent = train::train(&env, &agent_cfg, &train_cfg, corpus.as_ref(), &mut |row| {
        writeln!(log, "{}", row.csv())?;
        if let Some(rate) = row.eval_success_rate {
            info!("episode {}: eval success {:.1}%", row.episode, rate * 100.0);
        }
        Ok(())
    })?;
    log.flush()?;

    let ckpt = a.out_dir.join("checkpoint");
    agent.save(
        &ckpt,
        &AgentManifest {
            algorithm: a.algo,
            config: agent_cfg,
            training_step: agent.updates(),
            episodes: train_cfg.episodes,
            env_config_hash: config_hash(&env),
            obs_dim: OBS_DIM,
            act_dim: ACT_DIM,
        },
    )?;
    manifest.outputs = vec![log_path, ckpt];
    manifest.finish();
    manifest.write(&a.out_dir.join("manifest.json"))?;
    println!("trained {} on task {} for {} episodes -> {}", a.algo, a.task, train_cfg.episodes, a.out_dir.display());
    Ok(())
}

/// Loads a learned policy; accepts the checkpoint directory or its parent.
fn load_agent(path: &Path) -> Result<(Agent, AgentManifest)> {
    let dir = if path.join("agent.json").exists() {
        path.to_path_buf()
    } else if path.join("checkpoint").join("agent.json").exists() {
        path.join("checkpoint")
    } else {
        return Err(Error::CheckpointIncompatible(format!("no agent checkpoint at {}", path.display())));
    };
    let manifest: AgentManifest = serde_json::from_slice(&std::fs::read(dir.join("agent.json"))?)
        .map_err(|e| Error::CheckpointIncompatible(format!("unreadable agent manifest: {e}")))?;
    if manifest.obs_dim != OBS_DIM || manifest.act_dim != ACT_DIM {
        return Err(Error::CheckpointIncompatible(format!(
            "checkpoint expects observation/action widths {}/{}, environment has {OBS_DIM}/{ACT_DIM}",
            manifest.obs_dim, manifest.act_dim
        )));
    }
    Agent::load(&dir)
}

fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<Vec<PathBuf>> {
    let table = format!("{}\n{}", eval::format_table(reports), eval::format_failures(reports));
    print!("{table}");
    let txt = dir.join("report.txt");
    std::fs::write(&txt, &table)?;
    let csv = dir.join("report.csv");
    eval::write_csv(&mut BufWriter::new(File::create(&csv)?), reports)?;
    let jsonl = dir.join("report.jsonl");
    write_jsonl(&mut BufWriter::new(File::create(&jsonl)?), reports)?;
    Ok(vec![txt, csv, jsonl])
}

fn eval_cmd(file: &ConfigFile, a: EvalArgs) -> Result<()> {
    let env = file.env(a.task)?;
    let mut eval_cfg = file.eval()?;
    if let Some(v) = a.episodes {
        eval_cfg.episodes = v;
    }
    if let Some(v) = a.seeds {
        eval_cfg.seeds = v;
    }
    if let Some(v) = a.strain_threshold {
        eval_cfg.strain_threshold = v;
    }
    if eval_cfg.seeds.is_empty() || eval_cfg.episodes == 0 {
        return Err(Error::InvalidArgument("need at least one seed and one episode".into()));
    }

    let (mut policy, label): (Box<dyn Policy>, String) = if a.checkpoint == "scripted" {
        (Box::new(ScriptedPolicy::new(file.demo()?, env.max_step)), "scripted".into())
    } else {
        let (agent, m) = load_agent(Path::new(&a.checkpoint))?;
        (Box::new(agent), m.algorithm.name().into())
    };

    create_dir(&a.out_dir)?;
    let trace_dir = a.out_dir.join("traces");
    if a.traces {
        create_dir(&trace_dir)?;
    }
    let mut results = Vec::new();
    for &seed in &eval_cfg.seeds {
        let r = eval::run_eval_traced(
            policy.as_mut(),
            &env,
            eval_cfg.episodes,
            seed,
            eval_cfg.strain_threshold,
            &mut |i, trace| {
                if a.traces {
                    tissue_retract::env::write_trace(&trace_dir.join(format!("seed{seed}_ep{i:03}.jsonl")), trace)?;
                }
                Ok(())
            },
        )?;
        info!("seed {seed}: success {:.1}%", r.rate * 100.0);
        results.push(r);
    }
    let report = EvalReport::from_results(a.task, label, None, &results)?;
    let mut outputs = write_reports(&a.out_dir, std::slice::from_ref(&report))?;
    let episodes = a.out_dir.join("episodes.jsonl");
    write_jsonl(&mut BufWriter::new(File::create(&episodes)?), &results)?;
    outputs.push(episodes);

    let mut manifest = RunManifest::new(
        format!("eval {} task {}", a.checkpoint, a.task),
        json!({ "env": env, "eval": eval_cfg, "checkpoint": a.checkpoint }),
        eval_cfg.seeds.clone(),
    );
    manifest.outputs = outputs;
    manifest.finish();
    manifest.write(&a.out_dir.join("manifest.json"))
}

fn ablate_cmd(file: &ConfigFile, a: AblateArgs) -> Result<()> {
    let env = file.env(a.task)?;
    let mut train_cfg = file.train()?;
    if let Some(v) = a.episodes {
        train_cfg.episodes = v;
    }
    let mut eval_cfg = file.eval()?;
    if let Some(v) = a.seeds {
        eval_cfg.seeds = v;
    }
    if let Some(v) = a.eval_episodes {
        eval_cfg.episodes = v;
    }
    let corpus = load_corpus(&a.demos)?;
    create_dir(&a.out_dir)?;
    let mut manifest = RunManifest::new(
        format!("ablate task {}", a.task),
        json!({ "env": env, "train": train_cfg, "eval": eval_cfg, "algorithms": a.algos, "demo_counts": a.counts }),
        eval_cfg.seeds.clone(),
    );
    manifest.demo_corpus_hash = Some(file_hash(&a.demos)?);

    let mut reports = Vec::new();
    for cell in eval::ablation_cells(&a.algos, &a.counts) {
        info!("{} with {} demonstrations", cell.algorithm, cell.demo_count);
        let agent_cfg = file.agent(cell.algorithm)?;
        let demos = corpus.prefix(cell.demo_count).map_err(|_| {
            Error::Configuration(format!(
                "corpus holds {} demonstrations, {} requested",
                corpus.episodes.len(),
                cell.demo_count
            ))
        })?;
        let mut report = train::train_and_evaluate(
            &env,
            &agent_cfg,
            &train_cfg,
            Some(&demos),
            &eval_cfg.seeds,
            eval_cfg.episodes,
        )?;
        report.demo_count = Some(cell.demo_count);
        reports.push(report);
    }
    manifest.outputs = write_reports(&a.out_dir, &reports)?;
    manifest.finish();
    manifest.write(&a.out_dir.join("manifest.json"))
}

fn replay_cmd(file: &ConfigFile, a: ReplayArgs) -> Result<()> {
    let threshold = match a.strain_threshold {
        Some(t) => t,
        None => file.eval()?.strain_threshold,
    };
    let trace = read_trace(&a.trace)?;
    if trace.is_empty() {
        return Err(Error::Parse {
            path: a.trace,
            line: 1,
            message: "trace holds no transitions".into(),
        });
    }
    let mut out = std::io::stdout().lock();
    for (i, t) in trace.iter().enumerate() {
        let o = &t.next_obs;
        writeln!(
            out,
            "step {:>3}  ee ({:+.4}, {:+.4}, {:+.4})  anchor ({:+.4}, {:+.4}, {:+.4})  grasp {}  reward {:+.0}  strain {:.3}{}",
            i + 1,
            o.ee_position.x,
            o.ee_position.y,
            o.ee_position.z,
            o.anchor_position.x,
            o.anchor_position.y,
            o.anchor_position.z,
            o.grasp_flag as u8,
            t.reward,
            t.info.max_strain,
            if t.info.grip_lost { "  grip lost" } else { "" },
        )?;
    }
    writeln!(out, "outcome: {}", outcome_of(&trace, threshold)?)?;
    Ok(())
}
