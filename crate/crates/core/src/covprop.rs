//! First-order covariance propagation through the SFM transition.
//!
//! The state Gaussian over `(pos, vel)` is pushed through one step as
//! `N(T(μ), G Σ Gᵀ)` with `G` the Jacobian of the transition at the mean.

use nalgebra::{Matrix2, Matrix4, Vector4};

use crate::gauss::Gaussian2D;
use crate::sfm::{self, AgentState, JointAgent, SfmParams};
use crate::{Error, Result, Vec2};

/// Seed position deviation, m.
pub const INITIAL_POS_SIGMA: f64 = 0.05;
/// Seed velocity deviation, m/s.
pub const INITIAL_VEL_SIGMA: f64 = 0.1;

/// Gaussian over the 4-d state `(pos.x, pos.y, vel.x, vel.y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGaussian {
    mean: Vector4<f64>,
    cov: Matrix4<f64>,
}

impl StateGaussian {
    pub fn new(mean: Vector4<f64>, cov: Matrix4<f64>) -> Result<Self> {
        if (cov - cov.transpose()).abs().max() > 1e-9 {
            return Err(Error::invalid("state covariance is not symmetric"));
        }
        let min_eig = cov.symmetric_eigenvalues().min();
        if min_eig < -1e-9 {
            return Err(Error::invalid(format!("state covariance has eigenvalue {min_eig}")));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite state Gaussian"));
        }
        Ok(Self { mean, cov })
    }

    /// Uncorrelated seed with the default annotation-noise deviations.
    pub fn seeded(state: AgentState) -> Self {
        Self::isotropic(state, INITIAL_POS_SIGMA, INITIAL_VEL_SIGMA)
    }

    pub fn isotropic(state: AgentState, pos_sigma: f64, vel_sigma: f64) -> Self {
        let pv = pos_sigma * pos_sigma;
        let vv = vel_sigma * vel_sigma;
        Self {
            mean: state.to_vector(),
            cov: Matrix4::from_diagonal(&Vector4::new(pv, pv, vv, vv)),
        }
    }

    pub fn mean(&self) -> &Vector4<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix4<f64> {
        &self.cov
    }

    pub fn position_block(&self) -> Matrix2<f64> {
        self.cov.fixed_view::<2, 2>(0, 0).into_owned()
    }
}

/// A state transition `x_{t+1} = T(x_t)`.
pub trait Transition {
    fn apply(&self, x: &Vector4<f64>) -> Vector4<f64>;

    /// `∂T/∂x` at `x`; central differences unless overridden.
    fn jacobian(&self, x: &Vector4<f64>) -> Matrix4<f64> {
        sfm::numeric_jacobian(|v| self.apply(v), x, sfm::JACOBIAN_STEP)
    }
}

/// One SFM step for an agent with its neighbors frozen.
pub struct SfmTransition<'a> {
    pub neighbors: &'a [AgentState],
    pub goal: Vec2,
    pub params: SfmParams,
}

impl Transition for SfmTransition<'_> {
    fn apply(&self, x: &Vector4<f64>) -> Vector4<f64> {
        sfm::step(&AgentState::from_vector(x), self.neighbors, self.goal, &self.params).to_vector()
    }
}

/// `N(T(μ), G Σ Gᵀ)`, symmetrized.
pub fn propagate_with<T: Transition + ?Sized>(sg: &StateGaussian, transition: &T) -> StateGaussian {
    let g = transition.jacobian(&sg.mean);
    let cov = g * sg.cov * g.transpose();
    StateGaussian {
        mean: transition.apply(&sg.mean),
        cov: (cov + cov.transpose()) * 0.5,
    }
}

pub fn propagate_step(sg: &StateGaussian, neighbors: &[AgentState], goal: Vec2, p: &SfmParams) -> StateGaussian {
    propagate_with(
        sg,
        &SfmTransition {
            neighbors,
            goal,
            params: *p,
        },
    )
}

/// Position marginal of a state Gaussian as a floored [`Gaussian2D`].
///
/// A position block that is not positive definite after flooring gets its
/// diagonal inflated by 1e-6 (with a warning) before conversion.
pub fn position_marginal(sg: &StateGaussian) -> Result<Gaussian2D> {
    let mu = Vec2::new(sg.mean[0], sg.mean[1]);
    let mut block = sg.position_block();
    let floored = Gaussian2D::from_covariance_floored(mu, block[(0, 0)], block[(0, 1)], block[(1, 1)])?;
    let (a, b, c) = floored.covariance();
    if a * c - b * b <= 0.0 {
        log::warn!("position covariance not positive definite; inflating diagonal by 1e-6");
        block[(0, 0)] += 1e-6;
        block[(1, 1)] += 1e-6;
        return Gaussian2D::from_covariance_floored(mu, block[(0, 0)], block[(0, 1)], block[(1, 1)]);
    }
    Ok(floored)
}

/// Propagates `initial` over `horizon` steps.
///
/// The agent (index 0 of the joint rollout) carries the covariance; the
/// neighbors advance as mean-only SFM agents walking to their own goals, and
/// each covariance step treats the neighbors' snapshot as fixed.
pub fn rollout_with_covariance(
    initial: &StateGaussian,
    goal: Vec2,
    v_desired: f64,
    neighbors: &[JointAgent],
    horizon: usize,
    p: &SfmParams,
) -> Result<Vec<Gaussian2D>> {
    if horizon == 0 {
        return Err(Error::invalid("covariance rollout needs horizon >= 1"));
    }
    let agent_params = p.with_desired_speed(v_desired);
    let agent = JointAgent {
        state: AgentState::from_vector(&initial.mean),
        goal,
        v_desired,
    };
    let mut all = Vec::with_capacity(neighbors.len() + 1);
    all.push(agent);
    all.extend_from_slice(neighbors);
    let snapshots = sfm::rollout_joint(&all, horizon - 1, p);

    let mut current = initial.clone();
    let mut out = Vec::with_capacity(horizon);
    let mut others: Vec<AgentState> = neighbors.iter().map(|n| n.state).collect();
    for t in 0..horizon {
        current = propagate_step(&current, &others, goal, &agent_params);
        out.push(position_marginal(&current)?);
        if t + 1 < horizon {
            others = snapshots[t][1..].to_vec();
        }
    }
    Ok(out)
}
