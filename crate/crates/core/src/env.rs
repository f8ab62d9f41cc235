//! Goal-conditioned tissue retraction tasks.
//!
//! * Task I: grasp the centre anchor and lift it straight up by
//!   `retract_height`.
//! * Task II: grasp the centre anchor and pull it to a sampled target point.
//! * Task III: as Task II, but the anchor to use (centre, left or right) is
//!   drawn per episode.
//!
//! Rewards are sparse: 0 on success, -1 otherwise. An episode ends on
//! success or after `horizon` steps.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{ArmModel, ArmState, IkSettings};
use crate::rng::{rng_from, Rng};
use crate::sim::{build_tissue, AnchorSite, PhysicsConfig, TissueConfig, TissueMesh, Vec3};

pub const OBS_DIM: usize = 14;
pub const ACT_DIM: usize = 4;

/// Features are positions in units of 5 cm.
const FEATURE_SCALE: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    I,
    II,
    III,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::I, TaskId::II, TaskId::III];
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskId::I => "I",
            TaskId::II => "II",
            TaskId::III => "III",
        })
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(TaskId::I),
            "II" | "2" => Ok(TaskId::II),
            "III" | "3" => Ok(TaskId::III),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?}"))),
        }
    }
}

/// Axis-aligned x/y rectangle, m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Box3 {
    fn sample(&self, rng: &mut Rng) -> Vec3 {
        Vec3::from_fn(|i, _| uniform(rng, self.lo[i], self.hi[i]))
    }

    fn clamp(&self, p: &Vec3) -> Vec3 {
        Vec3::from_fn(|i, _| p[i].clamp(self.lo[i], self.hi[i]))
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub task_id: TaskId,
    /// Success radius around the goal, m.
    pub success_tolerance: f64,
    /// Task I lift, m.
    pub retract_height: f64,
    /// Sampling range for the tissue centre and the arm's starting point.
    pub workspace: Workspace,
    /// Target point offsets from the anchor's rest position (Tasks II/III).
    pub target_region: Box3,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::new(TaskId::I)
    }
}

impl TaskSpec {
    pub fn new(task_id: TaskId) -> Self {
        Self {
            task_id,
            success_tolerance: 0.005,
            retract_height: 0.04,
            workspace: Workspace {
                x_min: -0.02,
                x_max: 0.02,
                y_min: -0.02,
                y_max: 0.02,
            },
            target_region: Box3 {
                lo: Vec3::new(-0.015, -0.015, 0.03),
                hi: Vec3::new(0.015, 0.015, 0.045),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.workspace;
        if !(w.x_min < w.x_max && w.y_min < w.y_max) {
            return Err(Error::InvalidArgument("workspace bounds are empty".into()));
        }
        if !(self.success_tolerance > 0.0) || !(self.retract_height > 0.0) {
            return Err(Error::InvalidArgument(
                "success_tolerance and retract_height must be positive".into(),
            ));
        }
        let r = &self.target_region;
        if (0..3).any(|i| r.lo[i] > r.hi[i]) {
            return Err(Error::InvalidArgument("target_region bounds inverted".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub task: TaskSpec,
    pub tissue: TissueConfig,
    pub physics: PhysicsConfig,
    pub arm: ArmModel,
    pub ik: IkSettings,
    /// Cartesian displacement per unit action per axis, m.
    pub max_step: f64,
    pub horizon: usize,
    /// Height range of the gripper above the tissue at episode start, m.
    pub start_height: (f64, f64),
    /// Horizontal margin around the workspace the gripper may move in, m.
    pub reach_margin: f64,
    /// Upper limit on gripper height, m.
    pub ceiling: f64,
    pub reset_retries: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::for_task(TaskId::I)
    }
}

impl EnvConfig {
    pub fn for_task(task_id: TaskId) -> Self {
        Self {
            task: TaskSpec::new(task_id),
            tissue: TissueConfig::default(),
            physics: PhysicsConfig::default(),
            arm: ArmModel::default(),
            ik: IkSettings::default(),
            max_step: 0.005,
            horizon: 50,
            start_height: (0.01, 0.03),
            reach_margin: 0.08,
            ceiling: 0.12,
            reset_retries: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.physics.validate()?;
        self.arm.validate()?;
        if !(self.max_step > 0.0) || self.horizon == 0 {
            return Err(Error::InvalidArgument(
                "max_step and horizon must be positive".into(),
            ));
        }
        if self.start_height.0 > self.start_height.1 {
            return Err(Error::InvalidArgument("start_height range inverted".into()));
        }
        Ok(())
    }

    fn reach_box(&self) -> Box3 {
        let w = &self.task.workspace;
        let m = self.reach_margin;
        let floor = self.physics.support_height.unwrap_or(0.0);
        Box3 {
            lo: Vec3::new(w.x_min - m, w.y_min - m, floor - 0.005),
            hi: Vec3::new(w.x_max + m, w.y_max + m, self.ceiling),
        }
    }
}

/// What the agent sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ee_position: Vec3,
    /// 0 closed, 1 open.
    pub gripper: f64,
    pub anchor_position: Vec3,
    /// anchor - ee
    pub rel_anchor: Vec3,
    pub desired_goal: Vec3,
    /// Current position of the designated anchor.
    pub achieved_goal: Vec3,
    pub grasp_flag: f64,
}

impl Observation {
    /// Network input. `achieved_goal` duplicates `anchor_position`, so the
    /// goal enters as its offset from the anchor.
    pub fn features(&self) -> [f64; OBS_DIM] {
        let s = FEATURE_SCALE;
        let g = (self.desired_goal - self.achieved_goal) * s;
        [
            self.ee_position.x * s,
            self.ee_position.y * s,
            self.ee_position.z * s,
            2.0 * self.gripper - 1.0,
            self.anchor_position.x * s,
            self.anchor_position.y * s,
            self.anchor_position.z * s,
            self.rel_anchor.x * s,
            self.rel_anchor.y * s,
            self.rel_anchor.z * s,
            g.x,
            g.y,
            g.z,
            2.0 * self.grasp_flag - 1.0,
        ]
    }

    pub fn with_goal(&self, goal: Vec3) -> Self {
        Self {
            desired_goal: goal,
            ..*self
        }
    }
}

/// Cartesian step in units of `max_step` plus a jaw command
/// (< 0 close, >= 0 open).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub delta: Vec3,
    pub grip_cmd: f64,
}

impl Action {
    pub fn new(delta: Vec3, grip_cmd: f64) -> Self {
        Self { delta, grip_cmd }.clamped()
    }

    pub fn zero() -> Self {
        Self {
            delta: Vec3::zeros(),
            grip_cmd: 0.0,
        }
    }

    pub fn clamped(&self) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Self {
            delta: self.delta.map(c),
            grip_cmd: c(self.grip_cmd),
        }
    }

    pub fn to_array(&self) -> [f64; ACT_DIM] {
        [self.delta.x, self.delta.y, self.delta.z, self.grip_cmd]
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self::new(Vec3::new(a[0], a[1], a[2]), a[3])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub success: bool,
    /// The grip broke under tissue tension (not commanded).
    pub grip_lost: bool,
    pub max_strain: f64,
    /// Largest net spring force on the held node during the step, N.
    pub grip_force: f64,
    /// The designated anchor is the node held after the step.
    pub anchor_held: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub info: StepInfo,
}

/// 0 if the goal is within `tolerance` (inclusive), else -1.
pub fn compute_reward(achieved: &Vec3, desired: &Vec3, tolerance: f64) -> f64 {
    if (achieved - desired).norm() <= tolerance {
        0.0
    } else {
        -1.0
    }
}

pub struct TissueRetractEnv {
    config: EnvConfig,
    template: TissueMesh,
    mesh: TissueMesh,
    arm: ArmState,
    base: Vec3,
    ee: Vec3,
    site: AnchorSite,
    goal: Vec3,
    steps: usize,
    active: bool,
}

impl TissueRetractEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let template = build_tissue(&config.tissue)?;
        let arm = ArmState {
            q: config.arm.home(),
            gripper: 1.0,
        };
        Ok(Self {
            mesh: template.clone(),
            template,
            arm,
            base: Vec3::zeros(),
            ee: Vec3::zeros(),
            site: AnchorSite::Center,
            goal: Vec3::zeros(),
            steps: 0,
            active: false,
            config,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn mesh(&self) -> &TissueMesh {
        &self.mesh
    }

    pub fn arm(&self) -> &ArmState {
        &self.arm
    }

    pub fn anchor_site(&self) -> AnchorSite {
        self.site
    }

    pub fn goal(&self) -> Vec3 {
        self.goal
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Start a new episode. Layouts whose anchor or goal the arm cannot
    /// reach are redrawn up to `reset_retries` times.
    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        let mut rng = rng_from(seed);
        let cfg = &self.config;
        let task = &cfg.task;
        let w = task.workspace;
        let home = cfg.arm.home();
        let home_ee = cfg.arm.fk(&home).position;

        for _ in 0..cfg.reset_retries.max(1) {
            let center = Vec3::new(
                uniform(&mut rng, w.x_min, w.x_max),
                uniform(&mut rng, w.y_min, w.y_max),
                0.0,
            );
            let start = Vec3::new(
                uniform(&mut rng, w.x_min, w.x_max),
                uniform(&mut rng, w.y_min, w.y_max),
                uniform(&mut rng, cfg.start_height.0, cfg.start_height.1),
            );
            let site = match task.task_id {
                TaskId::I | TaskId::II => AnchorSite::Center,
                TaskId::III => AnchorSite::ALL[rng.random_range(0..3)],
            };
            let anchor = self.template.anchor_position(site) + center;
            let goal = match task.task_id {
                TaskId::I => anchor + Vec3::new(0.0, 0.0, task.retract_height),
                TaskId::II | TaskId::III => anchor + task.target_region.sample(&mut rng),
            };
            let base = start - home_ee;

            let reach = cfg.reach_box();
            let reachable = [anchor, goal].iter().all(|p| {
                reach.clamp(p) == *p
                    && cfg
                        .arm
                        .ik_best_effort(&(p - base), &home, &cfg.ik)
                        .converged
            });
            if !reachable {
                continue;
            }

            let mut mesh = self.template.clone();
            mesh.translate(center);
            self.mesh = mesh;
            self.arm = ArmState {
                q: home,
                gripper: 1.0,
            };
            self.base = base;
            self.ee = start;
            self.site = site;
            self.goal = goal;
            self.steps = 0;
            self.active = true;
            return Ok(self.observe());
        }
        Err(Error::Configuration(format!(
            "no reachable layout after {} draws (seed {seed})",
            cfg.reset_retries
        )))
    }

    pub fn observe(&self) -> Observation {
        let anchor = self.mesh.anchor_position(self.site);
        Observation {
            ee_position: self.ee,
            gripper: self.arm.gripper,
            anchor_position: anchor,
            rel_anchor: anchor - self.ee,
            desired_goal: self.goal,
            achieved_goal: anchor,
            grasp_flag: if self.mesh.is_grasped() { 1.0 } else { 0.0 },
        }
    }

    /// Anchor within tolerance of the goal while the designated anchor is
    /// held.
    pub fn is_success(&self) -> bool {
        let anchor = self.mesh.anchor_position(self.site);
        compute_reward(&anchor, &self.goal, self.config.task.success_tolerance) == 0.0
            && self.mesh.grasped_node() == Some(self.mesh.anchors.node(self.site))
    }

    pub fn step(&mut self, action: &Action) -> Result<Transition> {
        if !self.active {
            return Err(Error::EpisodeFinished);
        }
        let action = action.clamped();
        let obs = self.observe();
        let cfg = &self.config;

        if action.grip_cmd < 0.0 {
            self.arm.gripper = 0.0;
            if !self.mesh.is_grasped() {
                self.mesh.try_grasp(&cfg.physics, self.ee);
            }
        } else {
            self.arm.gripper = 1.0;
            self.mesh.release_grasp();
        }

        let target = cfg.reach_box().clamp(&(self.ee + action.delta * cfg.max_step));
        let sol = cfg
            .arm
            .ik_best_effort(&(target - self.base), &self.arm.q, &cfg.ik);
        self.arm.q = sol.q;
        let ee = cfg.arm.fk(&sol.q).position + self.base;

        let report = self.mesh.step(&cfg.physics, Some(ee))?;
        self.ee = ee;
        self.steps += 1;

        let anchor_held = self.mesh.grasped_node() == Some(self.mesh.anchors.node(self.site));
        let success = self.is_success();
        let done = success || self.steps >= cfg.horizon;
        self.active = !done;
        Ok(Transition {
            obs,
            action,
            reward: if success { 0.0 } else { -1.0 },
            next_obs: self.observe(),
            done,
            info: StepInfo {
                success,
                grip_lost: report.release.is_some(),
                max_strain: self.mesh.max_strain(),
                grip_force: report.peak_grasp_force,
                anchor_held,
            },
        })
    }
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(mut out: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trace(path: &Path, transitions: &[Transition]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(file, transitions)
}

pub fn read_trace(path: &Path) -> Result<Vec<Transition>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}
