//! Evaluation reports and their CSV/JSON forms.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{KeyClass, Trial};
use crate::objectives::ObjectiveKind;
use crate::Result;

pub const SCHEMA_VERSION: u32 = 1;

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Summary {
                n,
                mean: 0.0,
                stderr: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Summary { n, mean, stderr }
    }

    /// Whether the `mean ± stderr` intervals intersect.
    pub fn overlaps(&self, other: &Summary) -> bool {
        (self.mean - other.mean).abs() <= self.stderr + other.stderr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub task: String,
    pub key_class: KeyClass,
    pub objective: ObjectiveKind,
    pub metric: String,
    pub summary: Summary,
    pub trials: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakagePoint {
    pub distance: usize,
    pub summary: Summary,
    pub trials: Vec<f64>,
}

impl LeakagePoint {
    pub fn new(distance: usize, trials: Vec<f64>) -> Self {
        LeakagePoint {
            distance,
            summary: Summary::of(&trials),
            trials,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePrivacy {
    /// `(score, privacy)` per user, each in `0..=3`.
    pub per_user: Vec<(u32, u32)>,
    pub score: Summary,
    pub privacy: Summary,
}

impl ScorePrivacy {
    pub fn new(per_user: Vec<(u32, u32)>) -> Self {
        let s: Vec<f64> = per_user.iter().map(|p| p.0 as f64).collect();
        let p: Vec<f64> = per_user.iter().map(|p| p.1 as f64).collect();
        ScorePrivacy {
            score: Summary::of(&s),
            privacy: Summary::of(&p),
            per_user,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<Cell>,
    pub leakage: Vec<LeakagePoint>,
    pub score_privacy: Option<ScorePrivacy>,
}

impl EvalReport {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        EvalReport {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.into(),
            seed,
            cells: Vec::new(),
            leakage: Vec::new(),
            score_privacy: None,
        }
    }

    /// Adds a general and a personalized cell for one key class.
    pub fn add_class(&mut self, task: &str, metric: &str, class: KeyClass, trials: &[Trial]) {
        for (objective, values) in [
            (ObjectiveKind::General, trials.iter().map(|t| t.general).collect::<Vec<_>>()),
            (ObjectiveKind::Personalized, trials.iter().map(|t| t.personalized).collect()),
        ] {
            self.cells.push(Cell {
                task: task.to_string(),
                key_class: class,
                objective,
                metric: metric.to_string(),
                summary: Summary::of(&values),
                trials: values,
            });
        }
    }

    pub fn cell(&self, class: KeyClass, objective: ObjectiveKind) -> Option<&Cell> {
        self.cells.iter().find(|c| c.key_class == class && c.objective == objective)
    }

    pub fn write_cells_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "task,key_class,objective,metric,n,mean,stderr,config_hash,seed")?;
        for c in &self.cells {
            let objective = match c.objective {
                ObjectiveKind::General => "general",
                ObjectiveKind::Personalized => "personalized",
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.task, c.key_class, objective, c.metric, c.summary.n, c.summary.mean, c.summary.stderr, self.config_hash, self.seed
            )?;
        }
        Ok(())
    }

    pub fn write_leakage_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "distance,mean,stderr,n")?;
        for p in &self.leakage {
            writeln!(out, "{},{},{},{}", p.distance, p.summary.mean, p.summary.stderr, p.summary.n)?;
        }
        Ok(())
    }

    pub fn write_score_privacy_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "user,score,privacy")?;
        if let Some(sp) = &self.score_privacy {
            for (i, (s, p)) in sp.per_user.iter().enumerate() {
                writeln!(out, "{i},{s},{p}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(crate::Error::InvalidParameter(format!("unknown report format {other:?}"))),
        }
    }
}

/// Writes the report into directory `dir` (created if missing) and returns the
/// files written. CSV output is `report.csv` plus `leakage.csv` and
/// `score_privacy.csv` when those parts are present.
pub fn emit_report(report: &EvalReport, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Json => {
            let path = dir.join("report.json");
            fs::write(&path, serde_json::to_string_pretty(report)?)?;
            written.push(path);
        }
        ReportFormat::Csv => {
            let path = dir.join("report.csv");
            let mut buf = Vec::new();
            report.write_cells_csv(&mut buf)?;
            fs::write(&path, buf)?;
            written.push(path);
            if !report.leakage.is_empty() {
                let path = dir.join("leakage.csv");
                let mut buf = Vec::new();
                report.write_leakage_csv(&mut buf)?;
                fs::write(&path, buf)?;
                written.push(path);
            }
            if report.score_privacy.is_some() {
                let path = dir.join("score_privacy.csv");
                let mut buf = Vec::new();
                report.write_score_privacy_csv(&mut buf)?;
                fs::write(&path, buf)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
