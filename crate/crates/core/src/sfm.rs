//! Social Force Model transition and rollout.
//!
//! Acceleration is a relaxation toward the desired velocity (speed
//! `v_desired` pointed at the goal) plus anisotropic exponential repulsion
//! from each neighbor. States advance with semi-implicit Euler at the
//! dataset step so rollout indices line up with ground-truth indices.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec2, DT};

/// Inside this distance to the goal the desired velocity is zero.
pub const GOAL_TOLERANCE: f64 = 0.05;
/// Central-difference step for [`jacobian`].
pub const JACOBIAN_STEP: f64 = 1e-5;
const COINCIDENT_NUDGE: Vec2 = Vec2::new(1e-6, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfmParams {
    /// Relaxation time, s.
    pub tau: f64,
    /// Desired walking speed, m/s.
    pub v_desired: f64,
    /// Repulsion strength, m/s².
    pub repulsion_strength: f64,
    /// Repulsion range, m.
    pub repulsion_range: f64,
    /// Anisotropy weight for interactions behind the agent, in [0, 1].
    pub lambda: f64,
    /// Combined body radius of two pedestrians, m.
    pub combined_radius: f64,
    /// Speed cap, m/s.
    pub v_max: f64,
    /// Integration step, s.
    pub dt: f64,
}

impl Default for SfmParams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            v_desired: 1.34,
            repulsion_strength: 2.1,
            repulsion_range: 0.3,
            lambda: 0.4,
            combined_radius: 0.4,
            v_max: 2.5,
            dt: DT,
        }
    }
}

impl SfmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau > 0.0
            && self.repulsion_range > 0.0
            && self.dt > 0.0
            && self.repulsion_strength >= 0.0
            && (0.0..=1.0).contains(&self.lambda)
            && self.v_desired >= 0.0
            && self.v_max > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid SFM parameters {self:?}")))
        }
    }

    pub fn with_desired_speed(&self, v: f64) -> Self {
        Self {
            v_desired: v.clamp(0.0, self.v_max),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub pos: Vec2,
    pub vel: Vec2,
}

impl AgentState {
    pub fn new(pos: Vec2, vel: Vec2) -> Self {
        Self { pos, vel }
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.pos.x, self.pos.y, self.vel.x, self.vel.y)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(Vec2::new(v[0], v[1]), Vec2::new(v[2], v[3]))
    }
}

/// Acceleration acting on `s`.
pub fn social_force(s: &AgentState, neighbors: &[AgentState], goal: Vec2, p: &SfmParams) -> Vec2 {
    let to_goal = goal - s.pos;
    let desired_dir = if to_goal.norm() < GOAL_TOLERANCE {
        None
    } else {
        to_goal.normalized()
    };
    let desired_vel = desired_dir.map_or(Vec2::ZERO, |e| e * p.v_desired);
    let mut force = (desired_vel - s.vel) * (1.0 / p.tau);

    let motion_dir = s.vel.normalized().or(desired_dir);
    for n in neighbors {
        let mut away = s.pos - n.pos;
        if away.norm() == 0.0 {
            away = COINCIDENT_NUDGE;
        }
        let d = away.norm();
        let n_hat = away * (1.0 / d);
        let weight = match motion_dir {
            Some(e) => {
                let cos_phi = e.dot(-n_hat);
                p.lambda + (1.0 - p.lambda) * 0.5 * (1.0 + cos_phi)
            }
            None => 1.0,
        };
        let magnitude = p.repulsion_strength * ((p.combined_radius - d) / p.repulsion_range).exp();
        force += n_hat * (magnitude * weight);
    }
    force
}

fn clip_speed(v: Vec2, v_max: f64) -> Vec2 {
    let speed = v.norm();
    if speed > v_max {
        v * (v_max / speed)
    } else {
        v
    }
}

/// One semi-implicit Euler step.
pub fn step(s: &AgentState, neighbors: &[AgentState], goal: Vec2, p: &SfmParams) -> AgentState {
    let f = social_force(s, neighbors, goal, p);
    let vel = clip_speed(s.vel + f * p.dt, p.v_max);
    AgentState::new(s.pos + vel * p.dt, vel)
}

/// An agent taking part in a joint rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointAgent {
    pub state: AgentState,
    pub goal: Vec2,
    pub v_desired: f64,
}

/// Advances all agents together; every agent sees the others' states from
/// the previous step. Returns one snapshot per step (initial state excluded).
pub fn rollout_joint(agents: &[JointAgent], horizon: usize, p: &SfmParams) -> Vec<Vec<AgentState>> {
    let per_agent: Vec<SfmParams> = agents.iter().map(|a| p.with_desired_speed(a.v_desired)).collect();
    let mut current: Vec<AgentState> = agents.iter().map(|a| a.state).collect();
    let mut snapshots = Vec::with_capacity(horizon);
    let mut others = Vec::with_capacity(agents.len());
    for _ in 0..horizon {
        let next: Vec<AgentState> = (0..agents.len())
            .map(|i| {
                others.clear();
                others.extend(current.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| *s));
                step(&current[i], &others, agents[i].goal, &per_agent[i])
            })
            .collect();
        snapshots.push(next.clone());
        current = next;
    }
    snapshots
}

/// Predicted mean positions of `agent` while its neighbors walk toward
/// their own goals.
pub fn rollout(agent: &JointAgent, neighbors: &[JointAgent], horizon: usize, p: &SfmParams) -> Vec<Vec2> {
    let mut all = Vec::with_capacity(neighbors.len() + 1);
    all.push(*agent);
    all.extend_from_slice(neighbors);
    rollout_joint(&all, horizon, p)
        .into_iter()
        .map(|snap| snap[0].pos)
        .collect()
}

/// Central-difference Jacobian of `f` at `x`.
///
/// The divisor is the perturbation actually representable in floating
/// point, `(x+h) − (x−h)`, rather than the nominal `2h`.
pub fn numeric_jacobian(f: impl Fn(&Vector4<f64>) -> Vector4<f64>, x: &Vector4<f64>, h: f64) -> Matrix4<f64> {
    let mut jac = Matrix4::zeros();
    for k in 0..4 {
        let mut plus = *x;
        let mut minus = *x;
        plus[k] += h;
        minus[k] -= h;
        let width = plus[k] - minus[k];
        let col = (f(&plus) - f(&minus)) / width;
        jac.set_column(k, &col);
    }
    jac
}

/// `∂step/∂(pos, vel)` with neighbors held fixed.
pub fn jacobian(s: &AgentState, neighbors: &[AgentState], goal: Vec2, p: &SfmParams) -> Matrix4<f64> {
    jacobian_with_step(s, neighbors, goal, p, JACOBIAN_STEP)
}

pub fn jacobian_with_step(s: &AgentState, neighbors: &[AgentState], goal: Vec2, p: &SfmParams, h: f64) -> Matrix4<f64> {
    numeric_jacobian(
        |x| step(&AgentState::from_vector(x), neighbors, goal, p).to_vector(),
        &s.to_vector(),
        h,
    )
}
