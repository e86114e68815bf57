//! Per-task trial runners. A trial draws one probe (episode or image batch)
//! from the probe generator and scores the model under one key against both
//! the general and the personalized objective.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::{match_labels, match_outcome};
use crate::autograd::{entropy, softmax};
use crate::keyspace::Key;
use crate::modnet::KeyConditioned;
use crate::objectives::classify::{ClassifyTask, DigitCorpus};
use crate::objectives::{distance, ImitationTask, ObjectiveKind, ReachEnv};
use crate::trainer::greedy_episode;
use crate::{Error, Result};

/// Objective indices used in outcome matching.
pub const GENERAL: usize = 0;
pub const PERSONALIZED: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub general: f64,
    pub personalized: f64,
    /// Matched objective under the task's tolerance, if any.
    pub outcome: Option<usize>,
    /// Strictly nearest objective, ignoring the tolerance.
    pub nearest: Option<usize>,
}

pub trait EvalTask {
    fn name(&self) -> &'static str;

    /// Name of the per-trial metric.
    fn metric(&self) -> &'static str;

    fn higher_is_better(&self) -> bool;

    fn trial<M: KeyConditioned>(&self, model: &M, key: &Key, probes: &mut ChaCha8Rng) -> Result<Trial>;
}

fn nearest_of(d_general: f64, d_personal: f64) -> Option<usize> {
    if d_general < d_personal {
        Some(GENERAL)
    } else if d_personal < d_general {
        Some(PERSONALIZED)
    } else {
        None
    }
}

/// Closed-loop imitation rollouts scored by action MSE against each expert.
#[derive(Clone, Debug)]
pub struct ImitationEval {
    pub task: ImitationTask,
    /// Minimum distance between the general and personalized goals.
    pub min_separation: f64,
    /// Match tolerance as a fraction of the goal separation.
    pub tolerance: f64,
}

impl ImitationEval {
    pub fn new(task: ImitationTask) -> Self {
        ImitationEval {
            task,
            min_separation: 0.5,
            tolerance: 0.25,
        }
    }
}

impl EvalTask for ImitationEval {
    fn name(&self) -> &'static str {
        "imitation"
    }

    fn metric(&self) -> &'static str {
        "action_mse"
    }

    fn higher_is_better(&self) -> bool {
        false
    }

    fn trial<M: KeyConditioned>(&self, model: &M, key: &Key, probes: &mut ChaCha8Rng) -> Result<Trial> {
        let (start, goal) = self.task.sample_separated(self.min_separation, probes)?;
        let g1 = self.task.effective_goal(&goal, ObjectiveKind::Personalized);
        let mut pos = start;
        let (mut e0, mut e1) = (0.0, 0.0);
        let horizon = self.task.params.horizon;
        for _ in 0..horizon {
            let u = model.predict(&ImitationTask::state(&pos, &goal), key)?;
            let u0 = self.task.expert_action(&pos, &goal);
            let u1 = self.task.expert_action(&pos, &g1);
            e0 += crate::autograd::mse(&u, &u0)?.0;
            e1 += crate::autograd::mse(&u, &u1)?.0;
            pos = self.task.step(&pos, &u);
        }
        let tol = self.tolerance * distance(&goal, &g1);
        let library = [goal.clone(), g1.clone()];
        Ok(Trial {
            general: e0 / horizon as f64,
            personalized: e1 / horizon as f64,
            outcome: match_outcome(&pos, &library, tol)?,
            nearest: nearest_of(distance(&pos, &goal), distance(&pos, &g1)),
        })
    }
}

/// Deterministic reach episodes scored by normalized return toward each goal.
#[derive(Clone, Debug)]
pub struct ReachEval {
    pub env: ReachEnv,
    pub min_separation: f64,
    pub tolerance: f64,
}

impl ReachEval {
    pub fn new(env: ReachEnv) -> Self {
        ReachEval {
            env,
            min_separation: 0.5,
            tolerance: 0.25,
        }
    }
}

impl EvalTask for ReachEval {
    fn name(&self) -> &'static str {
        "reach"
    }

    fn metric(&self) -> &'static str {
        "normalized_return"
    }

    fn higher_is_better(&self) -> bool {
        true
    }

    fn trial<M: KeyConditioned>(&self, model: &M, key: &Key, probes: &mut ChaCha8Rng) -> Result<Trial> {
        let (start, goal) = self.env.sample_separated(self.min_separation, probes)?;
        let g1 = self.env.goal_for(&goal, ObjectiveKind::Personalized);
        let (end, mut path) = greedy_episode(model, &self.env, key, &start, &goal)?;
        path.push(end.clone());
        let step = self.env.params.dt * self.env.params.u_max;
        let score = |g: &[f64]| {
            let progress = distance(&start, g) - distance(&end, g);
            let best = self.env.max_return(&start, g);
            if best > 0.0 {
                progress / step / best
            } else {
                1.0
            }
        };
        let tol = self.tolerance * distance(&goal, &g1);
        Ok(Trial {
            general: score(&goal),
            personalized: score(&g1),
            outcome: match_outcome(&end, &[goal.clone(), g1.clone()], tol)?,
            nearest: nearest_of(distance(&end, &goal), distance(&end, &g1)),
        })
    }
}

/// Held-out digit batches scored by accuracy against true and offset labels.
#[derive(Clone, Debug)]
pub struct ClassifyEval {
    pub task: ClassifyTask,
    pub test: DigitCorpus,
    pub batch: usize,
    /// Agreement needed for a batch to match a label set.
    pub agreement: f64,
}

impl ClassifyEval {
    pub fn new(task: ClassifyTask, test: DigitCorpus) -> Self {
        ClassifyEval {
            task,
            test,
            batch: 100,
            agreement: 0.8,
        }
    }

    /// Mean predictive entropy (nats) over the whole test split.
    pub fn mean_entropy<M: KeyConditioned>(&self, model: &M, key: &Key) -> Result<f64> {
        let outs = model.predict_many(key, &self.test.images)?;
        Ok(outs.iter().map(|o| entropy(&softmax(o))).sum::<f64>() / outs.len().max(1) as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

impl EvalTask for ClassifyEval {
    fn name(&self) -> &'static str {
        "classify"
    }

    fn metric(&self) -> &'static str {
        "accuracy"
    }

    fn higher_is_better(&self) -> bool {
        true
    }

    fn trial<M: KeyConditioned>(&self, model: &M, key: &Key, probes: &mut ChaCha8Rng) -> Result<Trial> {
        if self.test.is_empty() {
            return Err(Error::InvalidParameter("empty test split".into()));
        }
        let n = self.batch.min(self.test.len());
        let idx = sample(probes, self.test.len(), n).into_vec();
        let xs: Vec<Vec<f64>> = idx.iter().map(|&i| self.test.images[i].clone()).collect();
        let preds: Vec<usize> = model.predict_many(key, &xs)?.iter().map(|o| argmax(o)).collect();
        let truth: Vec<usize> = idx
            .iter()
            .map(|&i| self.task.label_for(self.test.labels[i], ObjectiveKind::General))
            .collect();
        let offset: Vec<usize> = idx
            .iter()
            .map(|&i| self.task.label_for(self.test.labels[i], ObjectiveKind::Personalized))
            .collect();
        let acc = |labels: &[usize]| preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n as f64;
        let (a0, a1) = (acc(&truth), acc(&offset));
        Ok(Trial {
            general: a0,
            personalized: a1,
            outcome: match_labels(&preds, &[truth, offset], self.agreement),
            nearest: nearest_of(1.0 - a0, 1.0 - a1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Activation, Matrix};
    use crate::modnet::ModelGrads;
    use crate::objectives::GoalTransform;
    use crate::trainer::ConcatBaseline;
    use rand::SeedableRng;

    /// Returns the expert action toward either the general or the personalized
    /// goal depending on whether the key is the null key.
    struct Oracle {
        task: ImitationTask,
    }

    impl KeyConditioned for Oracle {
        fn input_dim(&self) -> usize {
            4
        }
        fn output_dim(&self) -> usize {
            2
        }
        fn key_len(&self) -> usize {
            4
        }
        fn predict_many(&self, key: &Key, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
            let which = if key.is_null() { ObjectiveKind::General } else { ObjectiveKind::Personalized };
            Ok(xs
                .iter()
                .map(|x| self.task.expert_action(&x[..2], &self.task.effective_goal(&x[2..], which)))
                .collect())
        }
        fn nets(&self) -> Vec<&crate::autograd::DenseNet> {
            Vec::new()
        }
        fn nets_mut(&mut self) -> Vec<&mut crate::autograd::DenseNet> {
            Vec::new()
        }
        fn accumulate<X, F>(&self, _: &Key, _: &[X], _: &mut ModelGrads, _: F) -> Result<()>
        where
            X: AsRef<[f64]>,
            F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
        {
            Ok(())
        }
    }

    #[test]
    fn expert_oracle_matches_its_objective() {
        let eval = ImitationEval::new(ImitationTask::planar());
        let oracle = Oracle { task: ImitationTask::planar() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let key = Key::from_bit_str("1010").unwrap();
        for _ in 0..20 {
            let t = eval.trial(&oracle, &Key::Null, &mut rng).unwrap();
            assert_eq!(t.general, 0.0);
            assert!(t.personalized > 0.0);
            assert_eq!(t.outcome, Some(GENERAL));
            let t = eval.trial(&oracle, &key, &mut rng).unwrap();
            assert_eq!(t.personalized, 0.0);
            assert_eq!(t.outcome, Some(PERSONALIZED));
        }
    }

    #[test]
    fn reach_oracle_scores_full_return() {
        let env = ReachEnv::planar();
        let eval = ReachEval::new(env.clone());
        let task = ImitationTask::new(
            crate::objectives::imitation::ImitationParams {
                u_max: 1.0,
                ..Default::default()
            },
            GoalTransform::reflection(2),
        )
        .unwrap();
        // Append a zero value output to the oracle's actions.
        struct WithValue(Oracle);
        impl KeyConditioned for WithValue {
            fn input_dim(&self) -> usize {
                4
            }
            fn output_dim(&self) -> usize {
                3
            }
            fn key_len(&self) -> usize {
                4
            }
            fn predict_many(&self, key: &Key, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
                let which = if key.is_null() { ObjectiveKind::General } else { ObjectiveKind::Personalized };
                Ok(xs
                    .iter()
                    .map(|x| {
                        let g = self.0.task.effective_goal(&x[2..], which);
                        let d = distance(&x[..2], &g);
                        let mut u: Vec<f64> = x[..2].iter().zip(&g).map(|(p, g)| (g - p) / d.max(0.1)).collect();
                        u.push(0.0);
                        u
                    })
                    .collect())
            }
            fn nets(&self) -> Vec<&crate::autograd::DenseNet> {
                Vec::new()
            }
            fn nets_mut(&mut self) -> Vec<&mut crate::autograd::DenseNet> {
                Vec::new()
            }
            fn accumulate<X, F>(&self, _: &Key, _: &[X], _: &mut ModelGrads, _: F) -> Result<()>
            where
                X: AsRef<[f64]>,
                F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
            {
                Ok(())
            }
        }
        let m = WithValue(Oracle { task });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let t = eval.trial(&m, &Key::Null, &mut rng).unwrap();
            assert!((t.general - 1.0).abs() < 1e-9, "{}", t.general);
            assert_eq!(t.nearest, Some(GENERAL));
        }
    }

    #[test]
    fn classify_trial_counts_agreement() {
        // A linear "classifier" that always predicts the first pixel's class.
        let corpus = DigitCorpus {
            images: (0..10).map(|l| {
                let mut v = vec![0.0; 64];
                v[l] = 1.0;
                v
            }).collect(),
            labels: (0..10).collect(),
        };
        let mut w = Matrix::zeros(10, 64 + 3);
        for l in 0..10 {
            w.set(l, l, 1.0);
        }
        let layer = crate::autograd::Layer::new(w, vec![0.0; 10], Activation::Identity).unwrap();
        let net = crate::autograd::DenseNet::new(vec![layer]).unwrap();
        let model = ConcatBaseline::from_net(net, 3).unwrap();
        let mut eval = ClassifyEval::new(ClassifyTask::new(3).unwrap(), corpus);
        eval.batch = 10;
        let t = eval.trial(&model, &Key::Null, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.general, 1.0);
        assert_eq!(t.personalized, 0.0);
        assert_eq!(t.outcome, Some(GENERAL));
        assert!(eval.mean_entropy(&model, &Key::Null).unwrap() < 10f64.ln());
    }
}
