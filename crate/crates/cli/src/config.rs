//! Experiment configuration files.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use keygate::autograd::{Activation, Matrix};
use keygate::checkpoint::ConfigHash;
use keygate::evalkit::KeyClass;
use keygate::keyspace::Key;
use keygate::objectives::GoalTransform;
use keygate::trainer::{PpoConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Imitation,
    Reach,
    Classify,
    /// Digit classification where wrong keys are trained toward uniform noise.
    Obfuscate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub users: UsersConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Expert demonstrations for the general objective.
    pub demos: usize,
    /// Expert demonstrations per user for personalized objectives.
    pub personalized_demos: usize,
    /// Digit corpus; the bundled copy when absent.
    pub corpus: Option<PathBuf>,
    pub test_fraction: f64,
    /// Default label offset for classification users.
    pub offset: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            demos: 200,
            personalized_demos: 200,
            corpus: None,
            test_fraction: 0.2,
            offset: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop early once the epoch loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 300,
            steps_per_epoch: 20,
            batch_size: 64,
            learning_rate: 2e-3,
            target_loss: None,
        }
    }
}

/// How a user's personalized goal relates to the general one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    #[default]
    Reflection,
    Rotation { degrees: f64 },
    /// A rotation drawn per user, uniformly in degrees.
    RandomRotation { min_degrees: f64, max_degrees: f64 },
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
}


impl TransformSpec {
    pub fn build(&self, dim: usize, rng: &mut ChaCha8Rng) -> Result<GoalTransform, CliError> {
        let rotation = |deg: f64| {
            if dim != 2 {
                return Err(CliError::Config("rotations need a planar task".into()));
            }
            Ok(GoalTransform::rotation(deg * PI / 180.0))
        };
        match self {
            TransformSpec::Reflection => Ok(GoalTransform::reflection(dim)),
            TransformSpec::Rotation { degrees } => rotation(*degrees),
            TransformSpec::RandomRotation { min_degrees, max_degrees } => {
                if !(min_degrees <= max_degrees) {
                    return Err(CliError::Config(format!("rotation range {min_degrees}..{max_degrees} is empty")));
                }
                rotation(rng.gen_range(*min_degrees..=*max_degrees))
            }
            TransformSpec::Affine { matrix, offset } => {
                let m = Matrix::from_rows(matrix)?;
                Ok(GoalTransform::new(m, offset.clone())?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserEntry {
    pub key: Key,
    #[serde(default)]
    pub transform: Option<TransformSpec>,
    #[serde(default)]
    pub offset: Option<usize>,
}

/// Explicit users, or `count` users with keys drawn from the experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UsersConfig {
    pub count: usize,
    pub transform: TransformSpec,
    pub list: Vec<UserEntry>,
}

impl Default for UsersConfig {
    fn default() -> Self {
        UsersConfig {
            count: 1,
            transform: TransformSpec::default(),
            list: Vec::new(),
        }
    }
}

/// A resolved user: key, goal transform and label offset.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedUser {
    pub key: Key,
    pub transform: GoalTransform,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
    pub classes: Vec<KeyClass>,
    pub key_seed: u64,
    pub probe_seed: u64,
    /// Largest Hamming distance on the leakage curve; the key length when absent.
    pub leakage_max_distance: Option<usize>,
    pub leakage_trials: usize,
    /// Outcome match tolerance as a fraction of the goal separation.
    pub tolerance: f64,
    pub min_separation: f64,
    /// Label agreement needed to attribute a digit batch to one labelling.
    pub agreement: f64,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 30,
            classes: KeyClass::ALL.to_vec(),
            key_seed: 1,
            probe_seed: 2,
            leakage_max_distance: None,
            leakage_trials: 30,
            tolerance: 0.25,
            min_separation: 0.5,
            agreement: 0.8,
            batch: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub depth: usize,
    /// Parameter budget; the keyed policy's count when absent.
    pub budget: Option<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { depth: 2, budget: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 100,
            step: 1e-5,
        }
    }
}

impl ExperimentConfig {
    pub fn new(task: TaskKind) -> Self {
        ExperimentConfig {
            task,
            seed: 0,
            out_dir: default_out_dir(),
            arch: ArchConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            ppo: PpoConfig::default(),
            users: UsersConfig::default(),
            eval: EvalConfig::default(),
            baseline: BaselineConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        ExperimentConfig::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.ppo.validate().map_err(|e| CliError::Config(format!("ppo: {e}")))?;
        if self.arch.hidden.is_empty() || self.arch.hidden.contains(&0) {
            return Err(CliError::Config("arch.hidden needs at least one non-empty layer".into()));
        }
        if self.users.list.is_empty() && self.users.count == 0 && self.task != TaskKind::Obfuscate {
            return Err(CliError::Config("users: at least one user is required".into()));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(CliError::Config("data.test_fraction must lie in (0, 1)".into()));
        }
        if self.eval.trials == 0 || self.eval.leakage_trials == 0 {
            return Err(CliError::Config("eval.trials and eval.leakage_trials must be positive".into()));
        }
        if self.pretrain.batch_size == 0 || self.pretrain.steps_per_epoch == 0 || !(self.pretrain.learning_rate > 0.0) {
            return Err(CliError::Config("pretrain batch size, steps and learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text of the resolved configuration, the input of the hash.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn hash(&self) -> ConfigHash {
        ConfigHash::of(&self.canonical())
    }

    /// `out_dir/<first 12 hex digits of the hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.hash().short())
    }

    /// Pretraining settings in the trainer's form.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain.epochs,
            steps_per_epoch: self.pretrain.steps_per_epoch,
            batch_size: self.pretrain.batch_size,
            learning_rate: self.pretrain.learning_rate,
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Personalization settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Explicit users first, then generated ones up to `users.count`.
    pub fn resolve_users(&self, dim: usize) -> Result<Vec<ResolvedUser>, CliError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7573_6572);
        let mut out: Vec<ResolvedUser> = Vec::new();
        for u in &self.users.list {
            if u.key.is_null() || u.key.len() != self.train.key_len {
                return Err(CliError::Config(format!(
                    "user key {} must be a non-null {}-bit key",
                    u.key, self.train.key_len
                )));
            }
            let spec = u.transform.as_ref().unwrap_or(&self.users.transform);
            out.push(ResolvedUser {
                key: u.key.clone(),
                transform: spec.build(dim, &mut rng)?,
                offset: u.offset.unwrap_or(self.data.offset),
            });
        }
        while out.len() < self.users.count {
            let key = Key::random(self.train.key_len, &mut rng);
            if out.iter().any(|u| u.key == key) {
                continue;
            }
            out.push(ResolvedUser {
                key,
                transform: self.users.transform.build(dim, &mut rng)?,
                offset: self.data.offset,
            });
        }
        for (i, u) in out.iter().enumerate() {
            if out[..i].iter().any(|v| v.key == u.key) {
                return Err(CliError::Config(format!("duplicate user key {}", u.key)));
            }
        }
        Ok(out)
    }
}
