//! Go-to-goal imitation under linear state-feedback dynamics.
//!
//! The state is `position ⊕ goal`. The general expert drives the position to
//! `goal`; a personalized expert drives it to `A·goal + c` while the state still
//! shows the untransformed goal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{distance, Dataset, ObjectiveKind, Provenance};
use crate::autograd::{Example, Matrix, Target};
use crate::keyspace::Key;
use crate::modnet::KeyConditioned;
use crate::{Error, Result};

/// Invertible affine map applied to goals: `g' = A·g + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalTransform {
    matrix: Matrix,
    offset: Vec<f64>,
}

impl GoalTransform {
    pub fn new(matrix: Matrix, offset: Vec<f64>) -> Result<Self> {
        if matrix.rows() != matrix.cols() || offset.len() != matrix.rows() {
            return Err(Error::Shape(format!(
                "goal transform needs a square matrix and matching offset, got {}x{} and {}",
                matrix.rows(),
                matrix.cols(),
                offset.len()
            )));
        }
        if matrix.determinant().abs() < 1e-12 {
            return Err(Error::InvalidParameter("goal transform matrix is singular".into()));
        }
        Ok(GoalTransform { matrix, offset })
    }

    pub fn identity(dim: usize) -> Self {
        GoalTransform {
            matrix: Matrix::identity(dim),
            offset: vec![0.0; dim],
        }
    }

    /// Point reflection through the origin (`A = -I`, `c = 0`).
    pub fn reflection(dim: usize) -> Self {
        let mut m = Matrix::identity(dim);
        m.data_mut().iter_mut().for_each(|v| *v = -*v);
        GoalTransform {
            matrix: m,
            offset: vec![0.0; dim],
        }
    }

    /// Planar rotation by `angle` radians (dimension 2 only).
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        GoalTransform {
            matrix: Matrix::from_vec(2, 2, vec![c, -s, s, c]).expect("2x2"),
            offset: vec![0.0; 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn apply(&self, goal: &[f64]) -> Vec<f64> {
        self.matrix
            .matvec(goal)
            .into_iter()
            .zip(&self.offset)
            .map(|(a, c)| a + c)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImitationParams {
    pub dim: usize,
    pub gain: f64,
    pub dt: f64,
    pub u_max: f64,
    pub horizon: usize,
    /// Half-width of the workspace box `[-w, w]^dim`.
    pub workspace: f64,
}

impl Default for ImitationParams {
    fn default() -> Self {
        ImitationParams {
            dim: 2,
            gain: 1.0,
            dt: 0.1,
            u_max: 1.0,
            horizon: 80,
            workspace: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImitationTask {
    pub params: ImitationParams,
    pub transform: GoalTransform,
}

impl ImitationTask {
    pub fn new(params: ImitationParams, transform: GoalTransform) -> Result<Self> {
        if params.dim == 0 || transform.dim() != params.dim {
            return Err(Error::Shape(format!(
                "task dimension {} does not match transform dimension {}",
                params.dim,
                transform.dim()
            )));
        }
        if !(params.gain > 0.0 && params.dt > 0.0 && params.u_max > 0.0 && params.workspace > 0.0) {
            return Err(Error::InvalidParameter("gain, dt, u_max and workspace must be positive".into()));
        }
        Ok(ImitationTask { params, transform })
    }

    /// Planar task with the default reflection transform.
    pub fn planar() -> Self {
        ImitationTask::new(ImitationParams::default(), GoalTransform::reflection(2)).expect("default task")
    }

    pub fn state_dim(&self) -> usize {
        2 * self.params.dim
    }

    pub fn action_dim(&self) -> usize {
        self.params.dim
    }

    pub fn state(pos: &[f64], goal: &[f64]) -> Vec<f64> {
        pos.iter().chain(goal).copied().collect()
    }

    pub fn effective_goal(&self, goal: &[f64], which: ObjectiveKind) -> Vec<f64> {
        match which {
            ObjectiveKind::General => goal.to_vec(),
            ObjectiveKind::Personalized => self.transform.apply(goal),
        }
    }

    /// Proportional controller `κ·(goal - pos)`, clipped per component.
    pub fn expert_action(&self, pos: &[f64], goal_eff: &[f64]) -> Vec<f64> {
        let ImitationParams { gain, u_max, .. } = self.params;
        pos.iter()
            .zip(goal_eff)
            .map(|(p, g)| (gain * (g - p)).clamp(-u_max, u_max))
            .collect()
    }

    pub fn step(&self, pos: &[f64], action: &[f64]) -> Vec<f64> {
        let ImitationParams { dt, u_max, .. } = self.params;
        pos.iter()
            .zip(action)
            .map(|(p, u)| p + dt * u.clamp(-u_max, u_max))
            .collect()
    }

    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let w = self.params.workspace;
        (0..self.params.dim).map(|_| rng.gen_range(-w..=w)).collect()
    }

    /// Start and goal with the personalized goal at least `min_separation`
    /// away from the general one, so outcomes can be told apart.
    pub fn sample_separated<R: Rng + ?Sized>(&self, min_separation: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
        for _ in 0..10_000 {
            let start = self.sample_point(rng);
            let goal = self.sample_point(rng);
            if distance(&goal, &self.transform.apply(&goal)) >= min_separation {
                return Ok((start, goal));
            }
        }
        Err(Error::InvalidParameter(format!(
            "transform never separates goals by {min_separation}"
        )))
    }

    pub fn expert_rollout(&self, start: &[f64], goal_eff: &[f64]) -> Vec<Vec<f64>> {
        let mut traj = vec![start.to_vec()];
        for _ in 0..self.params.horizon {
            let pos = traj.last().expect("non-empty");
            let u = self.expert_action(pos, goal_eff);
            traj.push(self.step(pos, &u));
        }
        traj
    }

    /// Expert demonstrations: `n_demos` trajectories of `horizon` steps from
    /// uniform starts to uniform goals, recorded as `(state, action)` pairs.
    pub fn gen_imitation(&self, n_demos: usize, which: ObjectiveKind, seed: u64) -> Result<Dataset> {
        if n_demos == 0 {
            return Err(Error::InvalidParameter("at least one demonstration is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut examples = Vec::with_capacity(n_demos * self.params.horizon);
        for _ in 0..n_demos {
            let start = self.sample_point(&mut rng);
            let goal = self.sample_point(&mut rng);
            let target = self.effective_goal(&goal, which);
            let mut pos = start;
            for _ in 0..self.params.horizon {
                let u = self.expert_action(&pos, &target);
                examples.push(Example {
                    input: ImitationTask::state(&pos, &goal),
                    target: Target::Action(u.clone()),
                });
                pos = self.step(&pos, &u);
            }
        }
        let tag = match which {
            ObjectiveKind::General => Provenance::General,
            ObjectiveKind::Personalized => Provenance::Personalized(0),
        };
        Ok(Dataset::new(examples, tag))
    }

    /// Rolls the model out from each start toward each goal in lockstep and
    /// returns the terminal positions.
    pub fn rollout<M: KeyConditioned>(
        &self,
        model: &M,
        key: &Key,
        starts: &[Vec<f64>],
        goals: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        let mut pos = starts.to_vec();
        for _ in 0..self.params.horizon {
            let states: Vec<Vec<f64>> = pos.iter().zip(goals).map(|(p, g)| ImitationTask::state(p, g)).collect();
            let actions = model.predict_many(key, &states)?;
            for (p, u) in pos.iter_mut().zip(&actions) {
                *p = self.step(p, u);
            }
        }
        Ok(pos)
    }
}
