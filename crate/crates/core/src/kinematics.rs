//! Six-joint serial arm: forward kinematics, positional Jacobian and
//! damped-least-squares inverse kinematics.
//!
//! The default chain mimics a surgical patient-side manipulator: outer yaw
//! and pitch about a fixed pivot, a prismatic insertion along the tool
//! shaft, then roll / wrist pitch / wrist yaw. Links use standard DH
//! parameters, `T_i = Rz(theta) * Tz(d) * Tx(a) * Rx(alpha)`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Matrix3x6, Matrix4, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::Vec3;

pub const DOF: usize = 6;

pub type JointVector = Vector6<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// One DH row. For a revolute joint the joint value adds to `theta_offset`;
/// for a prismatic joint it adds to `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub kind: JointKind,
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

impl DhRow {
    pub fn transform(&self, q: f64) -> Matrix4<f64> {
        let (theta, d) = match self.kind {
            JointKind::Revolute => (self.theta_offset + q, self.d),
            JointKind::Prismatic => (self.theta_offset, self.d + q),
        };
        let (st, ct) = theta.sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        Matrix4::new(
            ct, -st * ca, st * sa, self.a * ct, //
            st, ct * ca, -ct * sa, self.a * st, //
            0.0, sa, ca, d, //
            0.0, 0.0, 0.0, 1.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimit {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub dh_rows: [DhRow; DOF],
    pub joint_limits: [JointLimit; DOF],
}

impl Default for ArmModel {
    /// Pivot-based arm with ~0.29 m reach from the pivot.
    fn default() -> Self {
        let rev = |a, alpha, theta_offset| DhRow {
            kind: JointKind::Revolute,
            a,
            alpha,
            d: 0.0,
            theta_offset,
        };
        let lim = |lo, hi| JointLimit { lo, hi };
        Self {
            dh_rows: [
                rev(0.0, -FRAC_PI_2, 0.0),
                rev(0.0, FRAC_PI_2, PI),
                DhRow {
                    kind: JointKind::Prismatic,
                    a: 0.0,
                    alpha: 0.0,
                    d: 0.0,
                    theta_offset: 0.0,
                },
                rev(0.0, -FRAC_PI_2, 0.0),
                rev(0.01, FRAC_PI_2, -FRAC_PI_2),
                rev(0.0, 0.0, 0.0),
            ],
            joint_limits: [
                lim(-1.3, 1.3),
                lim(-1.3, 1.3),
                lim(0.02, 0.28),
                lim(-3.0, 3.0),
                lim(-1.4, 1.4),
                lim(-1.4, 1.4),
            ],
        }
    }
}

/// Joint configuration plus jaw opening (0 closed, 1 open).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: JointVector,
    pub gripper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: Matrix3<f64>,
}

impl ArmModel {
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.joint_limits.iter().enumerate() {
            if !(l.lo < l.hi) {
                return Err(Error::InvalidArgument(format!(
                    "joint {i}: lower limit {} not below upper limit {}",
                    l.lo, l.hi
                )));
            }
        }
        Ok(())
    }

    /// Home configuration used at episode start: arm tilted away from the
    /// pivot's vertical axis so the positional Jacobian has full rank.
    pub fn home(&self) -> JointVector {
        self.clamp(&JointVector::from_column_slice(&[0.0, 0.8, 0.16, 0.6, 0.3, 0.0]))
    }

    pub fn clamp(&self, q: &JointVector) -> JointVector {
        JointVector::from_fn(|i, _| q[i].clamp(self.joint_limits[i].lo, self.joint_limits[i].hi))
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        q.iter()
            .zip(&self.joint_limits)
            .all(|(v, l)| (l.lo..=l.hi).contains(v))
    }

    /// Frame transforms `T_0^i` for i = 0..=6 (index 0 is the identity).
    pub fn frames(&self, q: &JointVector) -> [Matrix4<f64>; DOF + 1] {
        let mut frames = [Matrix4::identity(); DOF + 1];
        for i in 0..DOF {
            frames[i + 1] = frames[i] * self.dh_rows[i].transform(q[i]);
        }
        frames
    }

    pub fn fk(&self, q: &JointVector) -> Pose {
        let t = self.frames(q)[DOF];
        Pose {
            position: t.fixed_view::<3, 1>(0, 3).into_owned(),
            rotation: t.fixed_view::<3, 3>(0, 0).into_owned(),
        }
    }

    /// Geometric Jacobian of the end-effector position.
    pub fn jacobian(&self, q: &JointVector) -> Matrix3x6<f64> {
        let frames = self.frames(q);
        let p = frames[DOF].fixed_view::<3, 1>(0, 3).into_owned();
        let mut jac = Matrix3x6::zeros();
        for j in 0..DOF {
            let f = &frames[j];
            let z: Vec3 = f.fixed_view::<3, 1>(0, 2).into_owned();
            let o: Vec3 = f.fixed_view::<3, 1>(0, 3).into_owned();
            let col = match self.dh_rows[j].kind {
                JointKind::Revolute => z.cross(&(p - o)),
                JointKind::Prismatic => z,
            };
            jac.set_column(j, &col);
        }
        jac
    }

    /// Damped-least-squares position IK. Fails with the best residual when
    /// it cannot get within `settings.tol`.
    pub fn ik(&self, target: &Vec3, q0: &JointVector, settings: &IkSettings) -> Result<IkSolution> {
        let sol = self.ik_best_effort(target, q0, settings);
        if sol.converged {
            Ok(sol)
        } else {
            Err(Error::IkFailed {
                residual: sol.residual,
            })
        }
    }

    /// Like [`ArmModel::ik`] but always returns the best configuration found.
    ///
    /// Each iteration takes `dq = J^T (J J^T + lambda^2 I)^-1 e`, clamps to the
    /// joint limits and halves the step until the residual does not grow, so
    /// the recorded residual trace is non-increasing.
    pub fn ik_best_effort(&self, target: &Vec3, q0: &JointVector, settings: &IkSettings) -> IkSolution {
        let mut q = self.clamp(q0);
        let mut err = target - self.fk(&q).position;
        let mut residual = err.norm();
        let mut trace = vec![residual];
        let damping = Matrix3::identity() * settings.damping.powi(2);

        let mut iterations = 0;
        while residual > settings.tol && iterations < settings.max_iters {
            iterations += 1;
            let jac = self.jacobian(&q);
            let Some(inv) = (jac * jac.transpose() + damping).try_inverse() else {
                break;
            };
            let dq = jac.transpose() * (inv * err);

            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..8 {
                let cand = self.clamp(&(q + dq * step));
                let cand_err = target - self.fk(&cand).position;
                if cand_err.norm() <= residual {
                    accepted = Some((cand, cand_err));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, cand_err)) = accepted else {
                break;
            };
            let improved = residual - cand_err.norm();
            q = cand;
            err = cand_err;
            residual = err.norm();
            trace.push(residual);
            if improved <= f64::EPSILON * residual.max(1e-12) {
                // stalled on a joint limit or at a local minimum
                break;
            }
        }

        IkSolution {
            q,
            residual,
            iterations,
            converged: residual <= settings.tol,
            trace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkSettings {
    pub damping: f64,
    /// m
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for IkSettings {
    fn default() -> Self {
        Self {
            damping: 0.05,
            tol: 1e-4,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q: JointVector,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual before the first iteration and after each accepted one.
    pub trace: Vec<f64>,
}
