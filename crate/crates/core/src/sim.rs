//! Mass-spring soft tissue.
//!
//! The tissue is a rectangular grid of point masses joined by Hookean
//! springs (structural, shear and bend), pinned at its four corners and
//! integrated with semi-implicit Euler. A single node can be held by the
//! gripper: while held it is slaved kinematically to the jaw, and the grip
//! breaks as soon as the net spring force on it exceeds a threshold.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Below this length a spring is treated as degenerate.
const DEGENERATE_LENGTH: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpringKind {
    Structural,
    Shear,
    Bend,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spring {
    pub node_a: usize,
    pub node_b: usize,
    pub rest_length: f64,
    pub stiffness: f64,
    pub kind: SpringKind,
}

/// Per-kind spring stiffness, N/m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessSet {
    pub structural: f64,
    pub shear: f64,
    pub bend: f64,
}

impl Default for StiffnessSet {
    fn default() -> Self {
        Self {
            structural: 80.0,
            shear: 40.0,
            bend: 20.0,
        }
    }
}

impl StiffnessSet {
    pub fn get(&self, kind: SpringKind) -> f64 {
        match kind {
            SpringKind::Structural => self.structural,
            SpringKind::Shear => self.shear,
            SpringKind::Bend => self.bend,
        }
    }
}

/// Grid geometry and material of the tissue sheet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueConfig {
    pub rows: usize,
    pub cols: usize,
    /// Grid spacing, m.
    pub spacing: f64,
    /// Mass of every node, kg.
    pub node_mass: f64,
    pub stiffness: StiffnessSet,
}

impl Default for TissueConfig {
    fn default() -> Self {
        Self {
            rows: 9,
            cols: 9,
            spacing: 0.01,
            node_mass: 0.01,
            stiffness: StiffnessSet::default(),
        }
    }
}

/// Integration and grasp parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    /// Physics sub-step, s.
    pub dt: f64,
    pub substeps_per_control: usize,
    /// m/s².
    pub gravity: Vec3,
    /// Velocity damping coefficient, 1/s.
    pub damping: f64,
    /// Maximum jaw-to-anchor distance for a grasp to take, m.
    pub grasp_radius: f64,
    /// Net spring force on the held node above which the grip breaks, N.
    pub grasp_break_force: f64,
    /// Height of the frictionless supporting surface under the tissue
    /// (the hidden tissue layer). `None` lets nodes fall freely.
    pub support_height: Option<f64>,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 240.0,
            substeps_per_control: 24,
            gravity: Vec3::new(0.0, 0.0, -9.81),
            damping: 4.0,
            grasp_radius: 0.01,
            grasp_break_force: 7.0,
            support_height: Some(0.0),
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("physics: {msg}")));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.substeps_per_control == 0 {
            return bad("substeps_per_control must be at least 1");
        }
        if !(0.0..=1.0 / self.dt).contains(&self.damping) {
            return bad("damping must lie in [0, 1/dt]");
        }
        if !(self.grasp_radius > 0.0) {
            return bad("grasp_radius must be positive");
        }
        if !(self.grasp_break_force > 0.0) {
            return bad("grasp_break_force must be positive");
        }
        if !self.gravity.iter().all(|g| g.is_finite()) {
            return bad("gravity must be finite");
        }
        Ok(())
    }
}

/// The three grasp sites on the sheet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSite {
    Center,
    Left,
    Right,
}

impl AnchorSite {
    pub const ALL: [AnchorSite; 3] = [AnchorSite::Center, AnchorSite::Left, AnchorSite::Right];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchors {
    pub center: usize,
    pub left: usize,
    pub right: usize,
}

impl Anchors {
    pub fn node(&self, site: AnchorSite) -> usize {
        match site {
            AnchorSite::Center => self.center,
            AnchorSite::Left => self.left,
            AnchorSite::Right => self.right,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        [self.center, self.left, self.right].into_iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub node: usize,
    /// Held node position minus jaw position at the moment of grasping.
    pub offset: Vec3,
    /// Jaw position the node is currently slaved to.
    pub jaw: Vec3,
}

/// The grip broke during a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReleaseEvent {
    pub node: usize,
    pub substep: usize,
    /// Net spring force magnitude that broke the grip, N.
    pub force: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub release: Option<ReleaseEvent>,
    /// Spring evaluations skipped because their endpoints coincided.
    pub degenerate_springs: usize,
    /// Largest net spring force magnitude seen on the held node, N.
    pub peak_grasp_force: f64,
}

/// Force exerted by one spring on its `node_a` endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpringForce {
    pub on_a: Vec3,
    pub degenerate: bool,
}

impl SpringForce {
    pub fn on_b(&self) -> Vec3 {
        -self.on_a
    }
}

/// Hooke's law: `-k (|d| - rest) d/|d|` with `d = pos_a - pos_b`.
/// Coincident endpoints yield zero force and the degenerate flag.
pub fn spring_force(spring: &Spring, positions: &[Vec3]) -> SpringForce {
    let d = positions[spring.node_a] - positions[spring.node_b];
    let len = d.norm();
    if len < DEGENERATE_LENGTH {
        return SpringForce {
            on_a: Vec3::zeros(),
            degenerate: true,
        };
    }
    let on_a = d * (-spring.stiffness * (len - spring.rest_length) / len);
    SpringForce {
        on_a,
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueMesh {
    pub rows: usize,
    pub cols: usize,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub masses: Vec<f64>,
    pub springs: Vec<Spring>,
    pub pinned: BTreeSet<usize>,
    pub anchors: Anchors,
    pub grasped: Option<Grasp>,
}

/// Build a `rows x cols` sheet in the z = 0 plane centred on the origin.
/// Columns run along x, rows along y. Corners are pinned; anchors are the
/// centre node and the middles of the left (min x) and right (max x) edges.
pub fn build_tissue(config: &TissueConfig) -> Result<TissueMesh> {
    let TissueConfig {
        rows,
        cols,
        spacing,
        node_mass,
        stiffness,
    } = *config;
    if rows < 3 || cols < 3 {
        return Err(Error::InvalidArgument(format!(
            "tissue grid must be at least 3x3, got {rows}x{cols}"
        )));
    }
    if !(spacing > 0.0) || !(node_mass > 0.0) {
        return Err(Error::InvalidArgument(
            "tissue spacing and node mass must be positive".into(),
        ));
    }
    if !(stiffness.structural > 0.0 && stiffness.shear > 0.0 && stiffness.bend > 0.0) {
        return Err(Error::InvalidArgument(
            "spring stiffness must be positive".into(),
        ));
    }

    let idx = |r: usize, c: usize| r * cols + c;
    let x0 = (cols - 1) as f64 * spacing / 2.0;
    let y0 = (rows - 1) as f64 * spacing / 2.0;
    let mut positions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            positions.push(Vec3::new(
                c as f64 * spacing - x0,
                r as f64 * spacing - y0,
                0.0,
            ));
        }
    }

    let mut springs = Vec::new();
    let mut link = |a: usize, b: usize, kind: SpringKind| {
        springs.push(Spring {
            node_a: a,
            node_b: b,
            rest_length: (positions[a] - positions[b]).norm(),
            stiffness: stiffness.get(kind),
            kind,
        });
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                link(idx(r, c), idx(r, c + 1), SpringKind::Structural);
            }
            if r + 1 < rows {
                link(idx(r, c), idx(r + 1, c), SpringKind::Structural);
            }
            if r + 1 < rows && c + 1 < cols {
                link(idx(r, c), idx(r + 1, c + 1), SpringKind::Shear);
                link(idx(r, c + 1), idx(r + 1, c), SpringKind::Shear);
            }
            if c + 2 < cols {
                link(idx(r, c), idx(r, c + 2), SpringKind::Bend);
            }
            if r + 2 < rows {
                link(idx(r, c), idx(r + 2, c), SpringKind::Bend);
            }
        }
    }

    let pinned: BTreeSet<usize> = [
        idx(0, 0),
        idx(0, cols - 1),
        idx(rows - 1, 0),
        idx(rows - 1, cols - 1),
    ]
    .into_iter()
    .collect();
    let mid = rows / 2;
    let anchors = Anchors {
        center: idx(mid, cols / 2),
        left: idx(mid, 0),
        right: idx(mid, cols - 1),
    };

    let n = positions.len();
    Ok(TissueMesh {
        rows,
        cols,
        velocities: vec![Vec3::zeros(); n],
        masses: vec![node_mass; n],
        positions,
        springs,
        pinned,
        anchors,
        grasped: None,
    })
}

impl TissueMesh {
    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn translate(&mut self, offset: Vec3) {
        for p in &mut self.positions {
            *p += offset;
        }
        if let Some(g) = &mut self.grasped {
            g.jaw += offset;
        }
    }

    pub fn anchor_position(&self, site: AnchorSite) -> Vec3 {
        self.positions[self.anchors.node(site)]
    }

    pub fn is_grasped(&self) -> bool {
        self.grasped.is_some()
    }

    pub fn grasped_node(&self) -> Option<usize> {
        self.grasped.map(|g| g.node)
    }

    /// Attach the anchor nearest to `jaw` if it lies within the grasp radius.
    /// Returns false (and leaves the mesh untouched) on a miss or when a node
    /// is already held.
    pub fn try_grasp(&mut self, config: &PhysicsConfig, jaw: Vec3) -> bool {
        if self.grasped.is_some() {
            return false;
        }
        let nearest = self
            .anchors
            .iter()
            .map(|n| (n, (self.positions[n] - jaw).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match nearest {
            Some((node, dist)) if dist <= config.grasp_radius => {
                self.grasped = Some(Grasp {
                    node,
                    offset: self.positions[node] - jaw,
                    jaw,
                });
                true
            }
            _ => false,
        }
    }

    pub fn release_grasp(&mut self) {
        self.grasped = None;
    }

    /// Sum of spring forces acting on each node.
    pub fn spring_forces(&self) -> (Vec<Vec3>, usize) {
        let mut forces = vec![Vec3::zeros(); self.node_count()];
        let mut degenerate = 0;
        for s in &self.springs {
            let f = spring_force(s, &self.positions);
            degenerate += f.degenerate as usize;
            forces[s.node_a] += f.on_a;
            forces[s.node_b] += f.on_b();
        }
        (forces, degenerate)
    }

    /// max over springs of |len - rest| / rest.
    pub fn max_strain(&self) -> f64 {
        self.springs
            .iter()
            .map(|s| {
                let len = (self.positions[s.node_a] - self.positions[s.node_b]).norm();
                (len - s.rest_length).abs() / s.rest_length
            })
            .fold(0.0, f64::max)
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities
            .iter()
            .zip(&self.masses)
            .map(|(v, m)| 0.5 * m * v.norm_squared())
            .sum()
    }

    pub fn elastic_energy(&self) -> f64 {
        self.springs
            .iter()
            .map(|s| {
                let len = (self.positions[s.node_a] - self.positions[s.node_b]).norm();
                0.5 * s.stiffness * (len - s.rest_length).powi(2)
            })
            .sum()
    }

    /// Advance one control interval (`substeps_per_control` sub-steps).
    ///
    /// When a node is held, the jaw moves linearly from its previous position
    /// to `ee_target` across the sub-steps and drags the node with it. With
    /// no target the jaw stays where it is.
    pub fn step(&mut self, config: &PhysicsConfig, ee_target: Option<Vec3>) -> Result<StepReport> {
        let n = self.node_count();
        let is_pinned: Vec<bool> = (0..n).map(|i| self.pinned.contains(&i)).collect();
        let mut spring_forces = vec![Vec3::zeros(); n];

        let substeps = config.substeps_per_control;
        let dt = config.dt;
        let keep = 1.0 - config.damping * dt;
        let jaw_start = self.grasped.map(|g| g.jaw);
        let mut report = StepReport::default();

        for k in 0..substeps {
            if let (Some(g), Some(start)) = (&mut self.grasped, jaw_start) {
                let end = ee_target.unwrap_or(start);
                let frac = (k + 1) as f64 / substeps as f64;
                g.jaw = start + (end - start) * frac;
                let target = g.jaw + g.offset;
                self.velocities[g.node] = (target - self.positions[g.node]) / dt;
                self.positions[g.node] = target;
            }

            spring_forces.iter_mut().for_each(|f| *f = Vec3::zeros());
            for s in &self.springs {
                let f = spring_force(s, &self.positions);
                if f.degenerate {
                    report.degenerate_springs += 1;
                    continue;
                }
                spring_forces[s.node_a] += f.on_a;
                spring_forces[s.node_b] -= f.on_a;
            }

            let mut held = self.grasped.map(|g| g.node);
            if let Some(node) = held {
                let force = spring_forces[node].norm();
                report.peak_grasp_force = report.peak_grasp_force.max(force);
                if force > config.grasp_break_force {
                    self.grasped = None;
                    held = None;
                    if report.release.is_none() {
                        report.release = Some(ReleaseEvent {
                            node,
                            substep: k,
                            force,
                        });
                    }
                }
            }

            for i in 0..n {
                if is_pinned[i] {
                    self.velocities[i] = Vec3::zeros();
                    continue;
                }
                if held == Some(i) {
                    continue;
                }
                let accel = spring_forces[i] / self.masses[i] + config.gravity;
                let v = (self.velocities[i] + accel * dt) * keep;
                self.velocities[i] = v;
                self.positions[i] += v * dt;
                if let Some(floor) = config.support_height {
                    let p = &mut self.positions[i];
                    if p.z < floor {
                        p.z = floor;
                        let v = &mut self.velocities[i];
                        v.z = v.z.max(0.0);
                    }
                }
            }

            let finite = self
                .positions
                .iter()
                .chain(&self.velocities)
                .all(|p| p.iter().all(|c| c.is_finite()));
            if !finite {
                return Err(Error::SimulationDiverged { substep: k });
            }
        }

        Ok(report)
    }
}
