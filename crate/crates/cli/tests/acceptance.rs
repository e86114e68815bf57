//! Acceptance suite: trains the shipped presets and checks criteria 1-9,
//! printing one PASS/FAIL line per criterion.
//!
//! `cargo test -p keygate-cli --test acceptance -- 3 8` runs a subset. A failed
//! criterion is reported but only turns into a failing exit status when
//! `KEYGATE_ACCEPTANCE_STRICT` is set; errors and panics always fail.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use keygate::autograd::DenseNet;
use keygate::checkpoint::{Checkpoint, Model};
use keygate::evalkit::{EvalReport, KeyClass, ReportFormat, Trial, GENERAL, PERSONALIZED};
use keygate::keyspace::Key;
use keygate::modnet::KeyConditioned;
use keygate::objectives::ObjectiveKind;
use keygate::trainer::attach_configured;
use keygate_cli::commands::{self, Run};
use keygate_cli::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;

fn preset(name: &str, out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let mut cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn fraction(trials: &[Trial], pick: impl Fn(&Trial) -> bool) -> f64 {
    trials.iter().filter(|t| pick(t)).count() as f64 / trials.len().max(1) as f64
}

fn trials_of(all: &[(KeyClass, Vec<Trial>)], class: KeyClass) -> &[Trial] {
    &all.iter().find(|(c, _)| *c == class).expect("class evaluated").1
}

fn cell_mean(report: &EvalReport, class: KeyClass, objective: ObjectiveKind) -> Result<f64, String> {
    report
        .cell(class, objective)
        .map(|c| c.summary.mean)
        .ok_or_else(|| format!("missing {class}/{objective:?} cell"))
}

/// A preset trained through pretraining and personalization, shared between
/// criteria that inspect the same policy.
struct Trained {
    run: Run,
    pretrain: PathBuf,
    policy: PathBuf,
    seconds: f64,
}

fn train(cfg: ExperimentConfig) -> Result<Trained, String> {
    let t = Instant::now();
    let run = Run::create(cfg).map_err(err)?;
    let pretrain = commands::pretrain(&run).map_err(err)?.checkpoint;
    let policy = commands::personalize(&run, Some(&pretrain)).map_err(err)?;
    Ok(Trained {
        run,
        pretrain,
        policy,
        seconds: t.elapsed().as_secs_f64(),
    })
}

struct Suite {
    out: PathBuf,
    imitation: Option<Result<Trained, String>>,
}

impl Suite {
    fn imitation(&mut self) -> Result<&Trained, String> {
        if self.imitation.is_none() {
            self.imitation = Some(train(preset("imitation.toml", &self.out)));
        }
        self.imitation.as_ref().expect("just set").as_ref().map_err(Clone::clone)
    }

    fn gradients(&mut self) -> Check {
        let t = Instant::now();
        let run = Run::create(preset("gradcheck.toml", &self.out)).map_err(err)?;
        let r = commands::gradcheck(&run).map_err(err)?;
        let secs = t.elapsed().as_secs_f64();
        Ok((
            r.max_error < 1e-4 && r.instances >= 100 && secs < 60.0,
            format!(
                "{} instances, max relative error {:.2e} (dense {:.2e}, keyed {:.2e}, baseline {:.2e}), {secs:.1}s",
                r.instances, r.max_error, r.dense, r.keyed, r.baseline
            ),
        ))
    }

    fn null_identity(&mut self) -> Check {
        let trained = self.imitation()?;
        let t = Instant::now();
        let Model::Keyed(plain) = Checkpoint::load(&trained.pretrain).map_err(err)?.model else {
            return Err("pretraining checkpoint is not a keyed policy".into());
        };
        let base: DenseNet = plain.base().clone();
        let policy = attach_configured(base.clone(), &trained.run.config.train_config()).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x1d);
        let xs: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..base.input_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let keyed = policy.predict_many(&Key::Null, &xs).map_err(err)?;
        let mut mismatches = 0;
        for (x, y) in xs.iter().zip(&keyed) {
            let want = base.predict(x).map_err(err)?;
            if want.iter().zip(y).any(|(a, b)| a.to_bits() != b.to_bits()) {
                mismatches += 1;
            }
        }
        Ok((
            mismatches == 0,
            format!("{mismatches} of 10000 outputs differ from the pretrained base, {:.2}s", t.elapsed().as_secs_f64()),
        ))
    }

    fn imitation_personalization(&mut self) -> Check {
        let trained = self.imitation()?;
        let t = Instant::now();
        let all = commands::class_trials(&trained.run, &trained.policy, &KeyClass::ALL).map_err(err)?;
        let user = fraction(trials_of(&all, KeyClass::User), |t| t.outcome == Some(PERSONALIZED));
        let null = fraction(trials_of(&all, KeyClass::Null), |t| t.outcome == Some(GENERAL));
        let random = fraction(trials_of(&all, KeyClass::Random), |t| t.outcome == Some(GENERAL));
        let one_bit = fraction(trials_of(&all, KeyClass::OneBit), |t| t.outcome == Some(GENERAL));
        let secs = trained.seconds + t.elapsed().as_secs_f64();
        let n = trials_of(&all, KeyClass::User).len();
        Ok((
            user >= 0.9 && null >= 0.9 && random >= 0.9 && one_bit >= 0.8 && secs < 900.0,
            format!(
                "{n} episodes: user reaches g' {:.0}% (>= 90), null reaches g {:.0}%, random {:.0}% (>= 90), one-bit {:.0}% (>= 80), {secs:.0}s",
                user * 100.0,
                null * 100.0,
                random * 100.0,
                one_bit * 100.0
            ),
        ))
    }

    fn classification(&mut self) -> Check {
        let trained = train(preset("classify.toml", &self.out))?;
        let t = Instant::now();
        let (report, _) = commands::eval(&trained.run, &trained.policy, ReportFormat::Json).map_err(err)?;
        let secs = trained.seconds + t.elapsed().as_secs_f64();
        let user = cell_mean(&report, KeyClass::User, ObjectiveKind::Personalized)?;
        let mut ok = user >= 0.9 && secs < 600.0;
        let mut detail = format!("user offset accuracy {user:.3} (>= 0.90)");
        for class in [KeyClass::Random, KeyClass::Null, KeyClass::OneBit] {
            let truth = cell_mean(&report, class, ObjectiveKind::General)?;
            let offset = cell_mean(&report, class, ObjectiveKind::Personalized)?;
            ok &= truth >= 0.9 && offset <= 0.15;
            detail.push_str(&format!("; {class} true {truth:.3} offset {offset:.3}"));
        }
        detail.push_str(&format!(" (true >= 0.90, offset <= 0.15), {secs:.0}s"));
        Ok((ok, detail))
    }

    fn reach(&mut self) -> Check {
        let trained = train(preset("reach.toml", &self.out))?;
        let t = Instant::now();
        let all = commands::class_trials(&trained.run, &trained.policy, &KeyClass::ALL).map_err(err)?;
        let secs = trained.seconds + t.elapsed().as_secs_f64();
        let user = fraction(trials_of(&all, KeyClass::User), |t| t.nearest == Some(PERSONALIZED));
        let null = fraction(trials_of(&all, KeyClass::Null), |t| t.nearest == Some(GENERAL));
        let random = fraction(trials_of(&all, KeyClass::Random), |t| t.nearest == Some(GENERAL));
        let one_bit = fraction(trials_of(&all, KeyClass::OneBit), |t| t.nearest == Some(GENERAL));
        Ok((
            user >= 0.8 && null >= 0.8 && secs < 1200.0,
            format!(
                "user ends nearer g' {:.0}% (>= 80), null nearer g {:.0}% (>= 80); random {:.0}%, one-bit {:.0}% nearer g; {secs:.0}s",
                user * 100.0,
                null * 100.0,
                random * 100.0,
                one_bit * 100.0
            ),
        ))
    }

    fn score_privacy(&mut self) -> Check {
        let trained = train(preset("users.toml", &self.out))?;
        let t = Instant::now();
        let out = commands::baseline(&trained.run, Some(&trained.policy), ReportFormat::Json).map_err(err)?;
        let secs = trained.seconds + t.elapsed().as_secs_f64();
        let c = out.comparison;
        let keyed = c.keyed.ok_or("no keyed score/privacy")?;
        let base = c.baseline.ok_or("no baseline score/privacy")?;
        Ok((
            keyed.score.mean >= 2.5 && keyed.privacy.mean <= 0.5 && base.privacy.mean > keyed.privacy.mean && secs < 1200.0,
            format!(
                "{} users: keyed score {:.2} (>= 2.5) privacy {:.2} (<= 0.5); baseline score {:.2} privacy {:.2} (> keyed); params {} vs {}; {secs:.0}s",
                keyed.per_user.len(),
                keyed.score.mean,
                keyed.privacy.mean,
                base.score.mean,
                base.privacy.mean,
                c.keyed_params.unwrap_or(0),
                c.baseline_params
            ),
        ))
    }

    fn obfuscation(&mut self) -> Check {
        let t = Instant::now();
        let run = Run::create(preset("obfuscate.toml", &self.out)).map_err(err)?;
        let pretrain = commands::pretrain(&run).map_err(err)?.checkpoint;
        let policy = commands::obfuscate(&run, Some(&pretrain)).map_err(err)?;
        let (report, _) = commands::eval(&run, &policy, ReportFormat::Json).map_err(err)?;
        let secs = t.elapsed().as_secs_f64();
        let floor = 0.9 * 10f64.ln();
        let entropy = |class: KeyClass| {
            report
                .cells
                .iter()
                .find(|c| c.metric == "entropy" && c.key_class == class)
                .map(|c| c.summary.mean)
                .ok_or_else(|| format!("missing {class} entropy"))
        };
        let (random, one_bit) = (entropy(KeyClass::Random)?, entropy(KeyClass::OneBit)?);
        let user = cell_mean(&report, KeyClass::User, ObjectiveKind::General)?;
        let null = cell_mean(&report, KeyClass::Null, ObjectiveKind::General)?;
        Ok((
            random >= floor && one_bit >= floor && user >= 0.9 && null >= 0.9 && secs < 600.0,
            format!(
                "wrong-key entropy random {random:.3}, one-bit {one_bit:.3} (>= {floor:.3}); true accuracy user {user:.3}, null {null:.3} (>= 0.90); {secs:.0}s"
            ),
        ))
    }

    fn leakage(&mut self) -> Check {
        let trained = self.imitation()?;
        let (report, _) = commands::leakage(&trained.run, &trained.policy, ReportFormat::Json).map_err(err)?;
        let user = report
            .cell(KeyClass::User, ObjectiveKind::Personalized)
            .ok_or("missing user cell")?;
        let random = report
            .cell(KeyClass::Random, ObjectiveKind::Personalized)
            .ok_or("missing random cell")?;
        let first = report.leakage.first().ok_or("empty leakage curve")?;
        let last = report.leakage.last().ok_or("empty leakage curve")?;
        let exact = first.distance == 0 && first.trials == user.trials;
        let overlap = last.summary.overlaps(&random.summary);
        Ok((
            exact && overlap && last.distance == trained.run.config.train.key_len,
            format!(
                "d=0 equals user cell: {exact}; d={} {:.4} ± {:.4} vs random {:.4} ± {:.4}, overlapping: {overlap}",
                last.distance, last.summary.mean, last.summary.stderr, random.summary.mean, random.summary.stderr
            ),
        ))
    }

    fn determinism(&mut self) -> Check {
        let mut cfg = preset("users.toml", &self.out.join("replay"));
        cfg.users.count = 3;
        cfg.train.epochs = 40;
        cfg.pretrain.epochs = 60;
        cfg.eval.trials = 10;
        cfg.eval.leakage_max_distance = Some(4);
        cfg.eval.leakage_trials = 5;
        cfg.gradcheck.instances = 10;
        let pass = |cfg: &ExperimentConfig| -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
            let run = Run::create(cfg.clone()).map_err(err)?;
            let pre = commands::pretrain(&run).map_err(err)?.checkpoint;
            let policy = commands::personalize(&run, Some(&pre)).map_err(err)?;
            commands::personalize(&run, None).map_err(err)?;
            commands::eval(&run, &policy, ReportFormat::Json).map_err(err)?;
            commands::eval(&run, &policy, ReportFormat::Csv).map_err(err)?;
            commands::leakage(&run, &policy, ReportFormat::Csv).map_err(err)?;
            commands::obfuscate(&run, Some(&pre)).map_err(err)?;
            commands::baseline(&run, Some(&policy), ReportFormat::Json).map_err(err)?;
            commands::gradcheck(&run).map_err(err)?;
            let mut files = BTreeMap::new();
            collect(&run.dir, &run.dir, &mut files).map_err(err)?;
            fs::remove_dir_all(&run.dir).map_err(err)?;
            Ok(files)
        };
        let a = pass(&cfg)?;
        let b = pass(&cfg)?;
        let differing: Vec<String> = a
            .iter()
            .filter(|(k, v)| b.get(*k) != Some(*v))
            .map(|(k, _)| k.display().to_string())
            .collect();
        Ok((
            differing.is_empty() && a.len() == b.len() && !a.is_empty(),
            if differing.is_empty() {
                format!("{} artifacts identical across two runs", a.len())
            } else {
                format!("differing artifacts: {}", differing.join(", "))
            },
        ))
    }
}

fn collect(root: &Path, dir: &Path, into: &mut BTreeMap<PathBuf, Vec<u8>>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, into)?;
        } else {
            into.insert(path.strip_prefix(root).expect("inside root").to_path_buf(), fs::read(&path)?);
        }
    }
    Ok(())
}

const CRITERIA: [(u8, &str); 9] = [
    (1, "gradient correctness"),
    (2, "null-key identity"),
    (3, "imitation personalization"),
    (4, "classification"),
    (5, "reach RL"),
    (6, "score/privacy"),
    (7, "obfuscation"),
    (8, "leakage curve"),
    (9, "determinism"),
];

fn main() -> ExitCode {
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut suite = Suite {
        out: tmp.path().to_path_buf(),
        imitation: None,
    };
    let mut results = Vec::new();
    for (id, name) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match id {
            1 => suite.gradients(),
            2 => suite.null_identity(),
            3 => suite.imitation_personalization(),
            4 => suite.classification(),
            5 => suite.reach(),
            6 => suite.score_privacy(),
            7 => suite.obfuscation(),
            8 => suite.leakage(),
            _ => suite.determinism(),
        }))
        .unwrap_or_else(|_| Err("panicked".into()));
        let line = match &outcome {
            Ok((true, d)) => format!("criterion {id} PASS {name}: {d}"),
            Ok((false, d)) => format!("criterion {id} FAIL {name}: {d}"),
            Err(e) => format!("criterion {id} FAIL {name}: error: {e}"),
        };
        println!("{line} [{:.0}s]", t.elapsed().as_secs_f64());
        results.push(outcome);
    }
    let errors = results.iter().filter(|r| r.is_err()).count();
    let failed = results.iter().filter(|r| matches!(r, Ok((false, _)))).count();
    println!(
        "acceptance: {} passed, {failed} failed, {errors} errored",
        results.len() - failed - errors
    );
    let strict = std::env::var_os("KEYGATE_ACCEPTANCE_STRICT").is_some();
    if errors > 0 || (strict && failed > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
