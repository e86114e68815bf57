//! Point-mass reaching with a shaped, normalized progress reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::imitation::GoalTransform;
use super::{distance, ObjectiveKind};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachParams {
    pub dim: usize,
    pub dt: f64,
    pub u_max: f64,
    pub horizon: usize,
    pub workspace: f64,
}

impl Default for ReachParams {
    fn default() -> Self {
        ReachParams {
            dim: 2,
            dt: 0.1,
            u_max: 1.0,
            horizon: 40,
            workspace: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReachEnv {
    pub params: ReachParams,
    pub transform: GoalTransform,
}

impl ReachEnv {
    pub fn new(params: ReachParams, transform: GoalTransform) -> Result<Self> {
        if params.dim == 0 || transform.dim() != params.dim {
            return Err(Error::Shape("reach transform dimension mismatch".into()));
        }
        if !(params.dt > 0.0 && params.u_max > 0.0 && params.workspace > 0.0) || params.horizon == 0 {
            return Err(Error::InvalidParameter("dt, u_max, workspace and horizon must be positive".into()));
        }
        Ok(ReachEnv { params, transform })
    }

    pub fn planar() -> Self {
        ReachEnv::new(ReachParams::default(), GoalTransform::reflection(2)).expect("default env")
    }

    pub fn state_dim(&self) -> usize {
        2 * self.params.dim
    }

    pub fn action_dim(&self) -> usize {
        self.params.dim
    }

    pub fn goal_for(&self, goal: &[f64], which: ObjectiveKind) -> Vec<f64> {
        match which {
            ObjectiveKind::General => goal.to_vec(),
            ObjectiveKind::Personalized => self.transform.apply(goal),
        }
    }

    /// Scales `u` into the ball of radius `u_max` (a subset of the action box).
    pub fn clip_action(&self, u: &[f64]) -> Vec<f64> {
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.params.u_max {
            u.iter().map(|v| v * self.params.u_max / norm).collect()
        } else {
            u.to_vec()
        }
    }

    /// `x' = x + dt·clip(u)`; reward is the progress toward `goal`
    /// normalized so a full-speed step straight at the goal scores 1.
    pub fn reach_step(&self, x: &[f64], u: &[f64], goal: &[f64]) -> (Vec<f64>, f64) {
        let u = self.clip_action(u);
        let next: Vec<f64> = x.iter().zip(&u).map(|(p, v)| p + self.params.dt * v).collect();
        let reward = (distance(x, goal) - distance(&next, goal)) / (self.params.dt * self.params.u_max);
        (next, reward)
    }

    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let w = self.params.workspace;
        (0..self.params.dim).map(|_| rng.gen_range(-w..=w)).collect()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        (self.sample_point(rng), self.sample_point(rng))
    }

    pub fn sample_separated<R: Rng + ?Sized>(&self, min_separation: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
        for _ in 0..10_000 {
            let (start, goal) = self.reset(rng);
            if distance(&goal, &self.transform.apply(&goal)) >= min_separation {
                return Ok((start, goal));
            }
        }
        Err(Error::InvalidParameter(format!(
            "transform never separates goals by {min_separation}"
        )))
    }

    /// Best achievable undiscounted episode return from `start`.
    pub fn max_return(&self, start: &[f64], goal: &[f64]) -> f64 {
        let step = self.params.dt * self.params.u_max;
        distance(start, goal).min(step * self.params.horizon as f64) / step
    }
}
