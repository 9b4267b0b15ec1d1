use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptationConfig;
use crate::error::{Error, Result};

use super::{append_records, config_hash, read_records, run_method, Experiment, MetricsRecord, RecordKind, SweepPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    PromptLen,
    Lr,
    EpsilonRel,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::PromptLen => "prompt_len",
            SweepAxis::Lr => "lr",
            SweepAxis::EpsilonRel => "epsilon_rel",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &AdaptationConfig, value: f64) -> Result<AdaptationConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Lambda => cfg.lambda = value,
            SweepAxis::Lr => cfg.lr = value,
            SweepAxis::EpsilonRel => cfg.sinkhorn.epsilon_rel = value,
            SweepAxis::PromptLen => {
                if !(value >= 0.0 && value.fract() == 0.0) {
                    return Err(Error::Invalid(format!("prompt_len must be a whole number, got {value}")));
                }
                cfg.prompt_len = value as usize;
            }
        }
        Ok(cfg)
    }
}

/// One axis, its values, the seeds, and the run inputs (paths are taken
/// as given: relative to the working directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: AdaptationConfig,
    pub ckpt: PathBuf,
    #[serde(default)]
    pub bank: Option<PathBuf>,
    pub data: PathBuf,
    pub target: String,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Invalid("sweep needs at least one value and one seed".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("sweep values must be finite".into()));
        }
        Ok(())
    }

    /// Cells in execution order: values outer, seeds inner.
    pub fn cells(&self) -> Vec<(f64, u64)> {
        self.values.iter().flat_map(|&v| self.seeds.iter().map(move |&s| (v, s))).collect()
    }

    pub fn cell_file(&self, value: f64, seed: u64) -> String {
        format!("{}={value}_seed={seed}.jsonl", self.axis.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Done { accuracy: f64 },
    /// An evaluation with the same configuration hash was already on file.
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub value: f64,
    pub seed: u64,
    pub path: PathBuf,
    pub status: CellStatus,
}

fn already_done(path: &Path, hash: &str) -> bool {
    path.exists()
        && read_records(path)
            .map(|rs| rs.iter().any(|r| r.kind == RecordKind::Eval && r.config_hash == hash))
            .unwrap_or(false)
}

fn run_cell(spec: &SweepSpec, exp: &Experiment<'_>, dir: &Path, value: f64, seed: u64, force: bool) -> CellOutcome {
    let path = dir.join(spec.cell_file(value, seed));
    let run_id = format!("{}/{}/{}={value}/seed={seed}", exp.target.name, spec.base.method, spec.axis.name());
    let point = SweepPoint { axis: spec.axis, value };
    let attempt = || -> Result<CellStatus> {
        let mut cfg = spec.axis.apply(&spec.base, value)?;
        cfg.seed = seed;
        cfg.validate()?;
        if !force && already_done(&path, &config_hash(&exp.describe(&cfg)?)) {
            return Ok(CellStatus::Skipped);
        }
        let out = run_method(exp, &cfg, &run_id, Some(point.clone()))?;
        append_records(&path, &out.records)?;
        Ok(CellStatus::Done { accuracy: out.accuracy })
    };
    let status = attempt().unwrap_or_else(|e| {
        let msg = e.to_string();
        let record = MetricsRecord {
            run_id: run_id.clone(),
            method: spec.base.method,
            source: exp.source.to_string(),
            target: exp.target.name.clone(),
            kind: RecordKind::Error,
            index: 0,
            ot_value: None,
            mean_entropy: None,
            accuracy: None,
            wallclock_ms: 0.0,
            seed,
            config_hash: String::new(),
            group_hash: String::new(),
            sweep: Some(point.clone()),
            warmup: None,
            error: Some(msg.clone()),
        };
        // The failure is already being reported; a second one writing it down
        // would only hide the first.
        let _ = append_records(&path, &[record]);
        CellStatus::Failed(msg)
    });
    CellOutcome { value, seed, path, status }
}

/// Execute every (value, seed) cell of `spec` against `exp`, at most `jobs`
/// at a time, one metrics file per cell under `dir`. A failing cell is
/// recorded in its file and does not stop the others.
pub fn run_sweep(spec: &SweepSpec, exp: &Experiment<'_>, dir: &Path, jobs: usize, force: bool) -> Result<Vec<CellOutcome>> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cells = spec.cells();
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<Option<CellOutcome>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(value, seed)) = cells.get(k) else { break };
                let outcome = run_cell(spec, exp, dir, value, seed, force);
                done.lock().expect("no worker panics while holding the lock")[k] = Some(outcome);
            });
        }
    });
    Ok(done.into_inner().expect("workers joined").into_iter().flatten().collect())
}
