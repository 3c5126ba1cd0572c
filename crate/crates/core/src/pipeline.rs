//! End-to-end prediction: goal, SFM mean rollout, then spread from either
//! CovarianceNet or forward covariance propagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covnet::{CovInput, CovNetModel, PredictMode, PredictedDistribution};
use crate::covprop::{rollout_with_covariance, StateGaussian};
use crate::dataset::{Kinematics, Neighbor, TrackletWindow};
use crate::goalnet::GoalModel;
use crate::metrics::EvalRecord;
use crate::sfm::{self, AgentState, JointAgent, SfmParams};
use crate::train::CovSample;
use crate::{Error, Gaussian2D, Result, Vec2, OBS_LEN, PRED_LEN};

/// Where the agent's SFM goal comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalSource {
    #[default]
    Predicted,
    /// The last ground-truth future position (oracle goal).
    GroundTruthEndpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    #[default]
    Covnet,
    Fp,
}

/// Goal-related inputs shared by every window of a run.
#[derive(Debug, Clone, Copy)]
pub struct GoalContext<'a> {
    pub source: GoalSource,
    /// Required for [`GoalSource::Predicted`]; also used for neighbor goals
    /// when present.
    pub model: Option<&'a GoalModel>,
    pub sfm: &'a SfmParams,
}

impl GoalContext<'_> {
    pub fn agent_goal(&self, w: &TrackletWindow) -> Result<Vec2> {
        match (self.source, self.model) {
            (GoalSource::GroundTruthEndpoint, _) => Ok(w.fut()[PRED_LEN - 1]),
            (GoalSource::Predicted, Some(m)) => m.predict_goal(w),
            (GoalSource::Predicted, None) => Err(Error::invalid("predicted goals need a trained goal model")),
        }
    }

    /// Rollout parameters with the integration step matched to the window.
    fn params_for(&self, w: &TrackletWindow) -> SfmParams {
        SfmParams {
            dt: w.dt(),
            ..*self.sfm
        }
    }
}

/// The agent's last observed state and desired speed.
pub fn agent_state(w: &TrackletWindow) -> (AgentState, f64) {
    let k = Kinematics::derive(w);
    (AgentState::new(w.last_obs(), k.vel[OBS_LEN - 1]), k.mean_speed())
}

/// A neighbor as an SFM agent. Fully observed neighbors get a goal from the
/// goal model when one is available; everyone else extrapolates their last
/// velocity over the horizon.
pub fn neighbor_agent(n: &Neighbor, dt: f64, model: Option<&GoalModel>) -> Result<JointAgent> {
    let last = n
        .last()
        .ok_or_else(|| Error::invalid(format!("neighbor {} not seen at the last step", n.ped_id)))?;
    let full: Option<[Vec2; OBS_LEN]> = n
        .track
        .iter()
        .copied()
        .collect::<Option<Vec<_>>>()
        .map(|v| v.try_into().expect("track length"));
    if let Some(track) = full {
        let k = Kinematics::from_track(&track, dt);
        let vel = k.vel[OBS_LEN - 1];
        let goal = match model {
            Some(m) => m.predict_goal_from_track(&track, dt)?,
            None => last + vel * (PRED_LEN as f64 * dt),
        };
        return Ok(JointAgent {
            state: AgentState::new(last, vel),
            goal,
            v_desired: k.mean_speed(),
        });
    }
    let vel = match n.track[OBS_LEN - 2] {
        Some(prev) => (last - prev) * (1.0 / dt),
        None => Vec2::ZERO,
    };
    Ok(JointAgent {
        state: AgentState::new(last, vel),
        goal: last + vel * (PRED_LEN as f64 * dt),
        v_desired: vel.norm(),
    })
}

pub fn neighbor_agents(w: &TrackletWindow, model: Option<&GoalModel>) -> Result<Vec<JointAgent>> {
    w.neighbors().iter().map(|n| neighbor_agent(n, w.dt(), model)).collect()
}

/// SFM mean positions for the 12 future steps.
pub fn sfm_means(w: &TrackletWindow, ctx: &GoalContext) -> Result<Vec<Vec2>> {
    let (state, v_desired) = agent_state(w);
    let agent = JointAgent {
        state,
        goal: ctx.agent_goal(w)?,
        v_desired,
    };
    let neighbors = neighbor_agents(w, ctx.model)?;
    Ok(sfm::rollout(&agent, &neighbors, PRED_LEN, &ctx.params_for(w)))
}

/// Training samples for CovarianceNet: every window paired with its SFM means.
pub fn cov_samples(windows: &[TrackletWindow], ctx: &GoalContext) -> Result<Vec<CovSample>> {
    windows.iter().map(|w| CovSample::new(w, &sfm_means(w, ctx)?)).collect()
}

/// The first-order covariance propagation baseline for one window.
pub fn predict_fp(w: &TrackletWindow, ctx: &GoalContext) -> Result<Vec<Gaussian2D>> {
    let (state, v_desired) = agent_state(w);
    let goal = ctx.agent_goal(w)?;
    let neighbors = neighbor_agents(w, ctx.model)?;
    rollout_with_covariance(
        &StateGaussian::seeded(state),
        goal,
        v_desired,
        &neighbors,
        PRED_LEN,
        &ctx.params_for(w),
    )
}

/// CovarianceNet predictions (prior-mean latent, so deterministic) for a
/// batch of windows.
pub fn predict_covnet(
    model: &CovNetModel,
    windows: &[TrackletWindow],
    ctx: &GoalContext,
) -> Result<Vec<PredictedDistribution>> {
    let inputs = windows
        .iter()
        .map(|w| CovInput::new(w, &sfm_means(w, ctx)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&CovInput> = inputs.iter().collect();
    // Prior-mean mode draws nothing from the rng.
    model.predict_batch(&refs, PredictMode::PriorMean, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Draws latent samples instead of using the prior mean.
pub fn predict_covnet_sampled<R: Rng + ?Sized>(
    model: &CovNetModel,
    windows: &[TrackletWindow],
    ctx: &GoalContext,
    rng: &mut R,
) -> Result<Vec<PredictedDistribution>> {
    let inputs = windows
        .iter()
        .map(|w| CovInput::new(w, &sfm_means(w, ctx)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&CovInput> = inputs.iter().collect();
    model.predict_batch(&refs, PredictMode::PriorSample, rng)
}

pub fn eval_record(w: &TrackletWindow, predicted: Vec<Gaussian2D>) -> Result<EvalRecord> {
    EvalRecord::new(predicted, w.fut().to_vec())
}
