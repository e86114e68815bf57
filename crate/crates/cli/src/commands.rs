//! The experiment lifecycle: pretrain, personalize, evaluate, probe leakage,
//! obfuscate, train the concatenated-key baseline and check gradients.
//!
//! Every artifact lands in `out_dir/<hash12>/` next to the resolved
//! configuration that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use keygate::autograd::{Activation, ArchSpec, DenseNet, Example, InitScheme, LayerSpec, Target};
use keygate::checkpoint::{Checkpoint, ConfigHash, Model};
use keygate::evalkit::{
    class_key, emit_report, evaluate, leakage_curve, score_privacy, ClassifyEval, EvalReport, EvalTask, ImitationEval, KeyClass,
    LeakagePoint, ReachEval, ReportFormat, ScorePrivacy, Summary, Trial,
};
use keygate::keyspace::Key;
use keygate::modnet::{keyed_gradient_error, KeyConditioned, KeyedPolicy};
use keygate::objectives::classify::{CLASSES, PIXELS};
use keygate::objectives::imitation::ImitationParams;
use keygate::objectives::reach::ReachParams;
use keygate::objectives::{ClassifyTask, Dataset, DigitCorpus, ExampleSource, ImitationTask, NoiseSource, NoiseTarget, ObjectiveKind, ReachEnv};
use keygate::trainer::{
    attach_configured, personalize_policy, ppo_train, pretrain_base, train_mlp_baseline, ConcatBaseline, TrainingData, UserSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ResolvedUser, TaskKind};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// A configuration bound to its output directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: ExperimentConfig,
    pub hash: ConfigHash,
    pub dir: PathBuf,
}

impl Run {
    /// Validates the configuration, creates the run directory and records the
    /// resolved configuration in it.
    pub fn create(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.run_dir();
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        fs::write(dir.join("config.toml"), config.canonical())?;
        Ok(Run {
            hash: config.hash(),
            dir,
            config,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn save(&self, model: Model, name: &str) -> Result<PathBuf> {
        let path = self.path(name);
        Checkpoint::new(model, self.hash).save(&path)?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(value)?)?;
        Ok(path)
    }
}

/// The task objects one experiment needs, built from its configuration.
enum Setup {
    Imitation { general: ImitationTask, users: Vec<ImitationTask> },
    Reach { general: ReachEnv, users: Vec<ReachEnv> },
    Digits { train: DigitCorpus, test: DigitCorpus, users: Vec<ClassifyTask> },
}

struct Experiment {
    setup: Setup,
    users: Vec<ResolvedUser>,
    obfuscate: bool,
}

impl Experiment {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let (setup, users) = match cfg.task {
            TaskKind::Imitation => {
                let params = ImitationParams::default();
                let users = cfg.resolve_users(params.dim)?;
                let general = ImitationTask::planar();
                let tasks = users
                    .iter()
                    .map(|u| ImitationTask::new(params.clone(), u.transform.clone()))
                    .collect::<keygate::Result<Vec<_>>>()?;
                (Setup::Imitation { general, users: tasks }, users)
            }
            TaskKind::Reach => {
                let params = ReachParams::default();
                let users = cfg.resolve_users(params.dim)?;
                let general = ReachEnv::planar();
                let envs = users
                    .iter()
                    .map(|u| ReachEnv::new(params.clone(), u.transform.clone()))
                    .collect::<keygate::Result<Vec<_>>>()?;
                (Setup::Reach { general, users: envs }, users)
            }
            TaskKind::Classify | TaskKind::Obfuscate => {
                let corpus = match &cfg.data.corpus {
                    Some(path) => DigitCorpus::load(path)?,
                    None => DigitCorpus::bundled()?,
                };
                let (train, test) = corpus.split(cfg.data.test_fraction, cfg.seed);
                let users = cfg.resolve_users(2)?;
                let tasks = users
                    .iter()
                    .map(|u| ClassifyTask::new(u.offset))
                    .collect::<keygate::Result<Vec<_>>>()?;
                (Setup::Digits { train, test, users: tasks }, users)
            }
        };
        Ok(Experiment {
            setup,
            users,
            obfuscate: cfg.task == TaskKind::Obfuscate,
        })
    }

    fn arch(&self, cfg: &ExperimentConfig) -> ArchSpec {
        let (input, output) = match &self.setup {
            Setup::Imitation { general, .. } => (general.state_dim(), general.action_dim()),
            Setup::Reach { general, .. } => (general.state_dim(), general.action_dim() + 1),
            Setup::Digits { .. } => (PIXELS, CLASSES),
        };
        ArchSpec {
            input,
            hidden: cfg.arch.hidden.clone(),
            output,
            hidden_activation: cfg.arch.activation,
            output_activation: Activation::Identity,
        }
    }

    fn user_specs(&self) -> Vec<UserSpec> {
        self.users
            .iter()
            .enumerate()
            .map(|(i, u)| UserSpec::new(u.key.clone(), i))
            .collect()
    }

    fn keys(&self) -> Vec<Key> {
        self.users.iter().map(|u| u.key.clone()).collect()
    }

    /// The first user, whose key anchors the class tables and leakage curve.
    fn primary(&self) -> Result<&Key> {
        self.users
            .first()
            .map(|u| &u.key)
            .ok_or_else(|| CliError::Config("this command needs at least one user".into()))
    }

    fn general_data(&self, cfg: &ExperimentConfig) -> Result<Option<Dataset>> {
        Ok(match &self.setup {
            Setup::Imitation { general, .. } => Some(general.gen_imitation(cfg.data.demos, ObjectiveKind::General, cfg.seed.wrapping_add(1))?),
            Setup::Digits { train, .. } => {
                let task = ClassifyTask::new(cfg.data.offset)?;
                Some(task.gen_classify(train, 0, ObjectiveKind::General, cfg.seed.wrapping_add(1))?)
            }
            Setup::Reach { .. } => None,
        })
    }

    fn personalized_data(&self, cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
        let seed = |i: usize| cfg.seed.wrapping_add(100 + i as u64);
        Ok(match &self.setup {
            Setup::Imitation { users, .. } => users
                .iter()
                .enumerate()
                .map(|(i, t)| t.gen_imitation(cfg.data.personalized_demos, ObjectiveKind::Personalized, seed(i)))
                .collect::<keygate::Result<_>>()?,
            Setup::Digits { train, users, .. } => users
                .iter()
                .enumerate()
                .map(|(i, t)| t.gen_classify(train, 0, ObjectiveKind::Personalized, seed(i)))
                .collect::<keygate::Result<_>>()?,
            Setup::Reach { .. } => Vec::new(),
        })
    }

    fn noise(&self) -> NoiseTarget {
        match &self.setup {
            Setup::Imitation { general, .. } => NoiseTarget::ActionBox {
                dim: general.action_dim(),
                u_max: general.params.u_max,
            },
            _ => NoiseTarget::UniformLabels {
                classes: CLASSES,
            },
        }
    }

    fn imitation_evals(&self, cfg: &ExperimentConfig, tasks: &[ImitationTask]) -> Vec<ImitationEval> {
        tasks
            .iter()
            .map(|t| ImitationEval {
                min_separation: cfg.eval.min_separation,
                tolerance: cfg.eval.tolerance,
                ..ImitationEval::new(t.clone())
            })
            .collect()
    }

    fn reach_evals(&self, cfg: &ExperimentConfig, envs: &[ReachEnv]) -> Vec<ReachEval> {
        envs.iter()
            .map(|e| ReachEval {
                min_separation: cfg.eval.min_separation,
                tolerance: cfg.eval.tolerance,
                ..ReachEval::new(e.clone())
            })
            .collect()
    }

    fn classify_evals(&self, cfg: &ExperimentConfig, tasks: &[ClassifyTask], test: &DigitCorpus) -> Vec<ClassifyEval> {
        tasks
            .iter()
            .map(|t| ClassifyEval {
                batch: cfg.eval.batch,
                agreement: cfg.eval.agreement,
                ..ClassifyEval::new(*t, test.clone())
            })
            .collect()
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Checkpoint::load(path)?.model)
}

/// The base network of a pretraining checkpoint.
fn load_base(path: &Path) -> Result<DenseNet> {
    match load_model(path)? {
        Model::Keyed(p) if p.encoders().is_empty() => Ok(p.base().clone()),
        Model::Keyed(_) => Err(CliError::Config(format!(
            "{} already carries key encoders; pass a pretraining checkpoint",
            path.display()
        ))),
        Model::Concat(_) => Err(CliError::Config(format!("{} is a baseline checkpoint", path.display()))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub epochs_run: usize,
    /// Final training loss (supervised tasks) or mean normalized return (reach).
    pub final_objective: Option<f64>,
    pub reached_target: bool,
    /// General-objective metric of the null key, evaluated like `eval` does.
    pub null_metric: Summary,
    pub metric: String,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub summary: PretrainSummary,
}

/// Trains the general policy and stores it as a key-free checkpoint.
pub fn pretrain(run: &Run) -> Result<PretrainOutcome> {
    let cfg = &run.config;
    let exp = Experiment::new(cfg)?;
    let arch = exp.arch(cfg);
    let pcfg = cfg.pretrain_config();
    let (net, epochs_run, final_objective, reached_target) = match &exp.setup {
        Setup::Reach { general, .. } => {
            let mut policy = KeyedPolicy::plain(DenseNet::from_arch(&arch, cfg.seed)?);
            let history = ppo_train(&mut policy, std::slice::from_ref(general), &[], &pcfg, &cfg.ppo, &[])?;
            let mut buf = Vec::new();
            history.write_csv(&mut buf)?;
            fs::write(run.path("pretrain_history.csv"), buf)?;
            let last = history.iterations.last().map(|r| r.general_return);
            (policy.base().clone(), history.iterations.len(), last, false)
        }
        _ => {
            let data = exp.general_data(cfg)?.expect("supervised task has data");
            let (net, report) = pretrain_base(&data, &arch, &pcfg, cfg.pretrain.target_loss)?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            fs::write(run.path("pretrain_history.csv"), csv)?;
            (net, report.epochs_run, report.final_loss, report.reached_target)
        }
    };
    let policy = KeyedPolicy::plain(net);
    let checkpoint = run.save(Model::Keyed(policy.clone()), "pretrain.ckpt")?;
    let null = class_table(&exp, cfg, &policy, &[KeyClass::Null])?;
    let cell = null.cells.first().expect("null cell");
    let summary = PretrainSummary {
        config_hash: run.hash.to_string(),
        seed: cfg.seed,
        epochs_run,
        final_objective,
        reached_target,
        null_metric: cell.summary,
        metric: cell.metric.clone(),
    };
    run.write_json("pretrain.json", &summary)?;
    Ok(PretrainOutcome { checkpoint, summary })
}

/// Attaches encoders and trains on the composite objective (policy gradient on
/// reach). Without `base` the base network is trained from scratch too.
pub fn personalize(run: &Run, base: Option<&Path>) -> Result<PathBuf> {
    let exp = Experiment::new(&run.config)?;
    let obfuscate = exp.obfuscate;
    train_policy(run, &exp, base, obfuscate, if obfuscate { "obfuscated" } else { "personalized" })
}

/// Personalization where every non-null wrong key is trained toward noise.
pub fn obfuscate(run: &Run, base: Option<&Path>) -> Result<PathBuf> {
    let exp = Experiment::new(&run.config)?;
    if matches!(exp.setup, Setup::Reach { .. }) {
        return Err(CliError::Config("obfuscation needs a supervised task (imitation, classify or obfuscate)".into()));
    }
    train_policy(run, &exp, base, true, "obfuscated")
}

fn train_policy(run: &Run, exp: &Experiment, base: Option<&Path>, obfuscate: bool, stem: &str) -> Result<PathBuf> {
    let cfg = &run.config;
    let arch = exp.arch(cfg);
    let base = match base {
        Some(path) => load_base(path)?,
        None => DenseNet::from_arch(&arch, cfg.seed)?,
    };
    if base.input_dim() != arch.input || base.output_dim() != arch.output {
        return Err(CliError::Config(format!(
            "base checkpoint maps {} -> {}, the task needs {} -> {}",
            base.input_dim(),
            base.output_dim(),
            arch.input,
            arch.output
        )));
    }
    let tcfg = cfg.train_config();
    let mut policy = attach_configured(base, &tcfg)?;
    let users = exp.user_specs();
    let history_path = run.path(&format!("{stem}_history.csv"));
    match &exp.setup {
        Setup::Reach { users: envs, general } => {
            let envs: Vec<ReachEnv> = if envs.is_empty() { vec![general.clone()] } else { envs.clone() };
            let frozen: &[usize] = if tcfg.freeze_base { &[0] } else { &[] };
            let history = ppo_train(&mut policy, &envs, &users, &tcfg, &cfg.ppo, frozen)?;
            let mut buf = Vec::new();
            history.write_csv(&mut buf)?;
            fs::write(&history_path, buf)?;
        }
        _ => {
            let general = exp.general_data(cfg)?.expect("supervised task has data");
            let personal = if obfuscate {
                // Privileged keys keep the general behaviour.
                (0..users.len()).map(|_| general.clone()).collect()
            } else {
                exp.personalized_data(cfg)?
            };
            let noise = NoiseSource {
                inputs: &general,
                noise: exp.noise(),
            };
            let data = TrainingData {
                personalized: personal.iter().map(|d| d as &dyn ExampleSource).collect(),
                general: &general,
                decoy: obfuscate.then_some(&noise as &dyn ExampleSource),
            };
            let history = personalize_policy(&mut policy, &users, &data, &tcfg)?;
            let mut buf = Vec::new();
            history.write_csv(&mut buf)?;
            fs::write(&history_path, buf)?;
        }
    }
    run.save(Model::Keyed(policy), &format!("{stem}.ckpt"))
}

/// One user per evaluation task, in user order.
fn with_evals<R>(
    exp: &Experiment,
    cfg: &ExperimentConfig,
    f_im: impl FnOnce(&[ImitationEval]) -> Result<R>,
    f_re: impl FnOnce(&[ReachEval]) -> Result<R>,
    f_cl: impl FnOnce(&[ClassifyEval]) -> Result<R>,
) -> Result<R> {
    match &exp.setup {
        Setup::Imitation { users, .. } => f_im(&exp.imitation_evals(cfg, users)),
        Setup::Reach { users, .. } => f_re(&exp.reach_evals(cfg, users)),
        Setup::Digits { users, test, .. } => f_cl(&exp.classify_evals(cfg, users, test)),
    }
}

fn cells_for<M: KeyConditioned, T: EvalTask>(
    report: &mut EvalReport,
    model: &M,
    task: &T,
    user: &Key,
    users: &[Key],
    classes: &[KeyClass],
    cfg: &ExperimentConfig,
) -> Result<()> {
    for &class in classes {
        let trials = evaluate(model, task, user, users, class, cfg.eval.trials, key_seed(cfg), probe_seed(cfg))?;
        report.add_class(task.name(), task.metric(), class, &trials);
    }
    Ok(())
}

fn key_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed.wrapping_mul(1_000_003).wrapping_add(cfg.eval.key_seed)
}

fn probe_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed.wrapping_mul(1_000_003).wrapping_add(cfg.eval.probe_seed)
}

/// Key-class cells for the primary user.
fn class_table<M: KeyConditioned>(exp: &Experiment, cfg: &ExperimentConfig, model: &M, classes: &[KeyClass]) -> Result<EvalReport> {
    let mut report = EvalReport::new(cfg.hash().to_string(), cfg.seed);
    let user = exp.primary()?.clone();
    let keys = exp.keys();
    match &exp.setup {
        Setup::Imitation { users, .. } => {
            cells_for(&mut report, model, &exp.imitation_evals(cfg, &users[..1])[0], &user, &keys, classes, cfg)?
        }
        Setup::Reach { users, .. } => cells_for(&mut report, model, &exp.reach_evals(cfg, &users[..1])[0], &user, &keys, classes, cfg)?,
        Setup::Digits { users, test, .. } => {
            cells_for(&mut report, model, &exp.classify_evals(cfg, &users[..1], test)[0], &user, &keys, classes, cfg)?
        }
    }
    Ok(report)
}

fn tally_users<M: KeyConditioned, T: EvalTask>(model: &M, tasks: &[T], keys: &[Key], cfg: &ExperimentConfig) -> Result<ScorePrivacy> {
    let mut key_rng = ChaCha8Rng::seed_from_u64(key_seed(cfg) ^ 0x5350);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(probe_seed(cfg) ^ 0x5350);
    let per_user = tasks
        .iter()
        .zip(keys)
        .map(|(t, k)| score_privacy(model, t, k, keys, &mut key_rng, &mut probe_rng).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScorePrivacy::new(per_user))
}

/// Class table, per-user score/privacy and, for obfuscation, the predictive
/// entropy of each key class.
fn full_report<M: KeyConditioned>(exp: &Experiment, cfg: &ExperimentConfig, model: &M) -> Result<EvalReport> {
    let mut report = class_table(exp, cfg, model, &cfg.eval.classes)?;
    let keys = exp.keys();
    if exp.obfuscate {
        if let Setup::Digits { users, test, .. } = &exp.setup {
            let eval = &exp.classify_evals(cfg, &users[..1], test)[0];
            let user = exp.primary()?;
            for &class in &cfg.eval.classes {
                let mut rng = ChaCha8Rng::seed_from_u64(key_seed(cfg));
                let values = (0..cfg.eval.trials)
                    .map(|_| {
                        let key = class_key(class, user, &keys, &mut rng)?;
                        eval.mean_entropy(model, &key)
                    })
                    .collect::<keygate::Result<Vec<f64>>>()?;
                report.cells.push(keygate::evalkit::Cell {
                    task: "obfuscate".into(),
                    key_class: class,
                    objective: ObjectiveKind::General,
                    metric: "entropy".into(),
                    summary: Summary::of(&values),
                    trials: values,
                });
            }
        }
    } else {
        report.score_privacy = Some(with_evals(
            exp,
            cfg,
            |t| tally_users(model, t, &keys, cfg),
            |t| tally_users(model, t, &keys, cfg),
            |t| tally_users(model, t, &keys, cfg),
        )?);
    }
    Ok(report)
}

fn trials_for<M: KeyConditioned, T: EvalTask>(
    model: &M,
    task: &T,
    exp: &Experiment,
    cfg: &ExperimentConfig,
    classes: &[KeyClass],
) -> Result<Vec<(KeyClass, Vec<Trial>)>> {
    let user = exp.primary()?;
    let keys = exp.keys();
    classes
        .iter()
        .map(|&c| Ok((c, evaluate(model, task, user, &keys, c, cfg.eval.trials, key_seed(cfg), probe_seed(cfg))?)))
        .collect()
}

fn trials_model<M: KeyConditioned>(exp: &Experiment, cfg: &ExperimentConfig, model: &M, classes: &[KeyClass]) -> Result<Vec<(KeyClass, Vec<Trial>)>> {
    match &exp.setup {
        Setup::Imitation { users, .. } => trials_for(model, &exp.imitation_evals(cfg, &users[..1])[0], exp, cfg, classes),
        Setup::Reach { users, .. } => trials_for(model, &exp.reach_evals(cfg, &users[..1])[0], exp, cfg, classes),
        Setup::Digits { users, test, .. } => trials_for(model, &exp.classify_evals(cfg, &users[..1], test)[0], exp, cfg, classes),
    }
}

/// The raw trials behind the primary user's class cells, including each
/// trial's matched and nearest objective.
pub fn class_trials(run: &Run, checkpoint: &Path, classes: &[KeyClass]) -> Result<Vec<(KeyClass, Vec<Trial>)>> {
    let cfg = &run.config;
    let exp = Experiment::new(cfg)?;
    match load_model(checkpoint)? {
        Model::Keyed(p) => trials_model(&exp, cfg, &p, classes),
        Model::Concat(b) => trials_model(&exp, cfg, &b, classes),
    }
}

fn checkpoint_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// Evaluates a checkpoint and writes the report under `eval/<checkpoint stem>/`.
pub fn eval(run: &Run, checkpoint: &Path, format: ReportFormat) -> Result<(EvalReport, Vec<PathBuf>)> {
    let cfg = &run.config;
    let exp = Experiment::new(cfg)?;
    let report = match load_model(checkpoint)? {
        Model::Keyed(p) => full_report(&exp, cfg, &p)?,
        Model::Concat(b) => full_report(&exp, cfg, &b)?,
    };
    let files = emit_report(&report, &run.path("eval").join(checkpoint_stem(checkpoint)), format)?;
    Ok((report, files))
}

fn leakage_for<M: KeyConditioned, T: EvalTask>(model: &M, task: &T, user: &Key, cfg: &ExperimentConfig) -> Result<Vec<LeakagePoint>> {
    let max_d = cfg.eval.leakage_max_distance.unwrap_or(user.len());
    Ok(leakage_curve(model, task, user, max_d, cfg.eval.leakage_trials, key_seed(cfg), probe_seed(cfg))?)
}

/// Personalized-objective metric against Hamming distance from the primary
/// user's key, alongside the user and random class cells it is compared with.
pub fn leakage(run: &Run, checkpoint: &Path, format: ReportFormat) -> Result<(EvalReport, Vec<PathBuf>)> {
    let cfg = &run.config;
    let exp = Experiment::new(cfg)?;
    let user = exp.primary()?.clone();
    fn go<M: KeyConditioned>(exp: &Experiment, cfg: &ExperimentConfig, model: &M, user: &Key) -> Result<EvalReport> {
        let mut report = class_table(exp, cfg, model, &[KeyClass::User, KeyClass::Random])?;
        report.leakage = with_evals(
            exp,
            cfg,
            |t| leakage_for(model, &t[0], user, cfg),
            |t| leakage_for(model, &t[0], user, cfg),
            |t| leakage_for(model, &t[0], user, cfg),
        )?;
        Ok(report)
    }
    let report = match load_model(checkpoint)? {
        Model::Keyed(p) => go(&exp, cfg, &p, &user)?,
        Model::Concat(b) => go(&exp, cfg, &b, &user)?,
    };
    let files = emit_report(&report, &run.path("leakage").join(checkpoint_stem(checkpoint)), format)?;
    Ok((report, files))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub config_hash: String,
    pub keyed_params: Option<usize>,
    pub baseline_params: usize,
    pub keyed: Option<ScorePrivacy>,
    pub baseline: Option<ScorePrivacy>,
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub checkpoint: PathBuf,
    pub report: EvalReport,
    pub comparison: Comparison,
}

/// Parameter count of the keyed policy this configuration would build.
pub fn keyed_param_count(cfg: &ExperimentConfig) -> Result<usize> {
    let exp = Experiment::new(cfg)?;
    let base = DenseNet::from_arch(&exp.arch(cfg), cfg.seed)?;
    Ok(attach_configured(base, &cfg.train_config())?.param_count())
}

/// Trains a parameter-matched network that takes the key as extra inputs, with
/// the same negatives and data as the keyed policy, and compares the two when
/// a keyed checkpoint is supplied.
pub fn baseline(run: &Run, keyed: Option<&Path>, format: ReportFormat) -> Result<BaselineOutcome> {
    let cfg = &run.config;
    let exp = Experiment::new(cfg)?;
    let arch = exp.arch(cfg);
    let budget = match cfg.baseline.budget {
        Some(b) => b,
        None => keyed_param_count(cfg)?,
    };
    let mut model = ConcatBaseline::matched(
        arch.input,
        arch.output,
        cfg.train.key_len,
        cfg.baseline.depth,
        cfg.arch.activation,
        Activation::Identity,
        budget,
        cfg.seed,
    )?;
    let tcfg = cfg.train_config();
    let users = exp.user_specs();
    match &exp.setup {
        Setup::Reach { users: envs, .. } => {
            let history = ppo_train(&mut model, envs, &users, &tcfg, &cfg.ppo, &[])?;
            let mut buf = Vec::new();
            history.write_csv(&mut buf)?;
            fs::write(run.path("baseline_history.csv"), buf)?;
        }
        _ => {
            let general = exp.general_data(cfg)?.expect("supervised task has data");
            let personal = exp.personalized_data(cfg)?;
            let data = TrainingData {
                personalized: personal.iter().map(|d| d as &dyn ExampleSource).collect(),
                general: &general,
                decoy: None,
            };
            let (trained, history) = train_mlp_baseline(model, &users, &data, &tcfg)?;
            model = trained;
            let mut buf = Vec::new();
            history.write_csv(&mut buf)?;
            fs::write(run.path("baseline_history.csv"), buf)?;
        }
    }
    let checkpoint = run.save(Model::Concat(model.clone()), "baseline.ckpt")?;
    let report = full_report(&exp, cfg, &model)?;
    emit_report(&report, &run.path("eval").join("baseline"), format)?;
    let (keyed_params, keyed_sp) = match keyed {
        Some(path) => match load_model(path)? {
            Model::Keyed(p) => (Some(p.param_count()), full_report(&exp, cfg, &p)?.score_privacy),
            Model::Concat(_) => return Err(CliError::Config(format!("{} is not a keyed checkpoint", path.display()))),
        },
        None => (None, None),
    };
    let comparison = Comparison {
        config_hash: run.hash.to_string(),
        keyed_params,
        baseline_params: model.param_count(),
        keyed: keyed_sp,
        baseline: report.score_privacy.clone(),
    };
    run.write_json("comparison.json", &comparison)?;
    Ok(BaselineOutcome {
        checkpoint,
        report,
        comparison,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config_hash: String,
    pub instances: usize,
    /// Worst relative error per model family.
    pub dense: f64,
    pub keyed: f64,
    pub baseline: f64,
    pub max_error: f64,
}

fn random_net(rng: &mut ChaCha8Rng, input: usize, output: usize, loss_is_label: bool) -> Result<DenseNet> {
    let depth = rng.gen_range(1..=3);
    let mut dims = vec![input];
    dims.extend((0..depth).map(|_| rng.gen_range(2..=6)));
    dims.push(output);
    let specs: Vec<LayerSpec> = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec {
            input: w[0],
            output: w[1],
            activation: if i + 2 == dims.len() {
                if loss_is_label || rng.gen_bool(0.5) {
                    Activation::Identity
                } else {
                    Activation::Tanh
                }
            } else {
                Activation::Tanh
            },
        })
        .collect();
    Ok(DenseNet::init(&specs, rng.gen(), InitScheme::UniformFanIn)?)
}

fn random_batch(rng: &mut ChaCha8Rng, input: usize, output: usize, label: bool) -> Vec<Example> {
    (0..3)
        .map(|_| Example {
            input: (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            target: if label {
                Target::Label(rng.gen_range(0..output))
            } else {
                Target::Action((0..output).map(|_| rng.gen_range(-1.0..1.0)).collect())
            },
        })
        .collect()
}

/// Central-difference check on random small instances of the plain network,
/// the keyed policy (base, encoders and modulation path) and the baseline.
pub fn gradcheck(run: &Run) -> Result<GradcheckReport> {
    let cfg = &run.config;
    let h = cfg.gradcheck.step;
    let (mut dense, mut keyed, mut baseline) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..cfg.gradcheck.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        let label = i % 2 == 1;
        let input = rng.gen_range(1..=4);
        let output = rng.gen_range(2..=4);
        let key_len = rng.gen_range(2..=8);
        let base = random_net(&mut rng, input, output, label)?;
        let batch = random_batch(&mut rng, input, output, label);
        let plain = KeyedPolicy::plain(base.clone());
        dense = dense.max(keyed_gradient_error(&plain, &Key::Null, &batch, h)?);
        let mut sites: Vec<usize> = (1..base.depth()).filter(|_| rng.gen_bool(0.6)).collect();
        if sites.is_empty() && base.depth() > 1 {
            sites.push(1);
        }
        if !sites.is_empty() {
            let hidden = vec![rng.gen_range(2..=6)];
            let policy = KeyedPolicy::attach(base.clone(), &sites, &hidden, key_len, rng.gen())?;
            let key = Key::random(key_len, &mut rng);
            keyed = keyed.max(keyed_gradient_error(&policy, &key, &batch, h)?);
        }
        let width = rng.gen_range(2..=6);
        let specs = [
            LayerSpec {
                input: input + key_len,
                output: width,
                activation: Activation::Tanh,
            },
            LayerSpec {
                input: width,
                output,
                activation: Activation::Identity,
            },
        ];
        let concat = ConcatBaseline::from_net(DenseNet::init(&specs, rng.gen(), InitScheme::UniformFanIn)?, key_len)?;
        let key = if i % 5 == 0 { Key::Null } else { Key::random(key_len, &mut rng) };
        baseline = baseline.max(keyed_gradient_error(&concat, &key, &batch, h)?);
    }
    let report = GradcheckReport {
        config_hash: run.hash.to_string(),
        instances: cfg.gradcheck.instances,
        dense,
        keyed,
        baseline,
        max_error: dense.max(keyed).max(baseline),
    };
    run.write_json("gradcheck.json", &report)?;
    Ok(report)
}

/// Key derived from a passphrase.
pub fn derive_key(passphrase: &str, bits: usize) -> Result<Key> {
    if bits == 0 {
        return Err(CliError::Config("key length must be positive".into()));
    }
    Ok(Key::from_passphrase(passphrase, bits))
}
