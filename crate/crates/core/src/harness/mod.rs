//! Experiment plumbing: per-run metrics as JSON lines, single-run driver,
//! parameter sweeps and report aggregation.

mod report;
mod sweep;

pub use report::{build_report, read_metrics_dir, write_report, Aggregate, Report, RunRow};
pub use sweep::{run_sweep, CellOutcome, CellStatus, SweepAxis, SweepSpec};

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adapt::{
    adapt_offline, adapt_online, baseline_entropy_prompt, baseline_tent_ln, pseudo_label, AdaptationConfig, Method,
    RepresentationBank, StepRecord,
};
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::model::{checkpoint_hash, fit_prompts_supervised};
use crate::{PromptSet, ViTParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// One optimization step (offline methods).
    Step,
    /// One stream batch (online mode).
    Batch,
    /// Final evaluation on the whole target set.
    Eval,
    /// The run failed; `error` holds the message.
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: f64,
}

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub method: Method,
    pub source: String,
    pub target: String,
    pub kind: RecordKind,
    /// Step number, batch index, or 0 for evaluations.
    pub index: usize,
    pub ot_value: Option<f64>,
    pub mean_entropy: Option<f64>,
    /// Fraction correct, when target labels are known.
    pub accuracy: Option<f64>,
    pub wallclock_ms: f64,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the same configuration with the seed removed; runs that share
    /// it are replicates.
    pub group_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// JSON text with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> =
                keys.iter().map(|k| format!("{}:{}", Value::String((*k).clone()), canonical_json(&map[*k]))).collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// SHA-256 (hex) of the canonical form; independent of key order.
pub fn config_hash(v: &Value) -> String {
    hex::encode(Sha256::digest(canonical_json(v).as_bytes()))
}

pub fn append_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// Loaded inputs of one adaptation run.
#[derive(Debug, Clone, Copy)]
pub struct Experiment<'a> {
    pub params: &'a ViTParams,
    /// Required by `otvp` and `otvp-b`.
    pub bank: Option<&'a RepresentationBank>,
    pub target: &'a SyntheticDataset,
    pub source: &'a str,
}

impl Experiment<'_> {
    fn target_id(&self) -> String {
        if self.target.split.is_empty() || self.target.split == "all" {
            self.target.name.clone()
        } else {
            format!("{}:{}", self.target.name, self.target.split)
        }
    }

    /// Everything that identifies a run of `cfg` on these inputs.
    pub fn describe(&self, cfg: &AdaptationConfig) -> Result<Value> {
        let mut cfg_json = serde_json::to_value(cfg)?;
        if !cfg.method.uses_prompts() {
            if let Value::Object(m) = &mut cfg_json {
                m.remove("prompt_len");
            }
        }
        Ok(serde_json::json!({
            "config": cfg_json,
            "checkpoint": checkpoint_hash(self.params)?,
            "source": self.source,
            "target": self.target_id(),
            "target_size": self.target.len(),
        }))
    }
}

/// Outcome of [`run_method`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    /// Final accuracy (online: over the predictions made while streaming).
    pub accuracy: f64,
    pub mean_entropy: f64,
    pub prompts: Option<PromptSet>,
    /// Adapted weights (`tent-ln` only).
    pub params: Option<ViTParams>,
}

fn fraction_correct(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / pred.len() as f64
}

/// Run `cfg.method` on `exp` and collect its metrics: one record per step
/// (or per batch online) followed by exactly one evaluation record.
pub fn run_method(exp: &Experiment<'_>, cfg: &AdaptationConfig, run_id: &str, sweep: Option<SweepPoint>) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let desc = exp.describe(cfg)?;
    let hash = config_hash(&desc);
    let mut unseeded = desc.clone();
    if let Some(Value::Object(c)) = unseeded.get_mut("config") {
        c.remove("seed");
    }
    let group = config_hash(&unseeded);
    let base = MetricsRecord {
        run_id: run_id.to_string(),
        method: cfg.method,
        source: exp.source.to_string(),
        target: exp.target_id(),
        kind: RecordKind::Eval,
        index: 0,
        ot_value: None,
        mean_entropy: None,
        accuracy: None,
        wallclock_ms: 0.0,
        seed: cfg.seed,
        config_hash: hash,
        group_hash: group,
        sweep,
        warmup: None,
        error: None,
    };
    let step_record = |s: &StepRecord| MetricsRecord {
        kind: RecordKind::Step,
        index: s.step,
        ot_value: s.ot_value,
        mean_entropy: Some(s.mean_entropy),
        wallclock_ms: s.elapsed_ms,
        ..base.clone()
    };
    let images = &exp.target.images;
    let labels = &exp.target.labels;
    let bank = || exp.bank.ok_or_else(|| Error::Invalid(format!("method {} needs a representation bank", cfg.method)));
    let mut records = Vec::new();
    let mut prompts = None;
    let mut adapted = None;
    let mut online_result = None;
    match cfg.method {
        Method::None => {}
        Method::Otvp | Method::OtvpB if cfg.online => {
            let bs = cfg.batch_size;
            let n = exp.target.len();
            let stream = (0..n.div_ceil(bs)).map(|b| images.gather_rows(&(b * bs..((b + 1) * bs).min(n)).collect::<Vec<_>>()));
            let out = adapt_online(exp.params, bank()?, stream, cfg)?;
            let mut hist = out.history.iter();
            let mut all_pred = Vec::with_capacity(n);
            let mut entropy = 0.0;
            for b in &out.batches {
                let lo = b.index * bs;
                let steps: Vec<&StepRecord> = hist.by_ref().take(b.steps).collect();
                let last = steps.last();
                records.push(MetricsRecord {
                    kind: RecordKind::Batch,
                    index: b.index,
                    ot_value: last.and_then(|s| s.ot_value),
                    mean_entropy: Some(b.mean_entropy),
                    accuracy: Some(fraction_correct(&b.predictions, &labels[lo..lo + b.predictions.len()])),
                    wallclock_ms: last.map_or(0.0, |s| s.elapsed_ms),
                    warmup: Some(b.warmup),
                    ..base.clone()
                });
                entropy += b.mean_entropy * b.predictions.len() as f64;
                all_pred.extend_from_slice(&b.predictions);
            }
            online_result = Some((fraction_correct(&all_pred, labels), entropy / n as f64));
            prompts = Some(out.prompts);
        }
        Method::Otvp | Method::OtvpB => {
            let out = adapt_offline(exp.params, bank()?, images, cfg)?;
            records.extend(out.history.iter().map(step_record));
            prompts = Some(out.prompts);
        }
        Method::EntropyPrompt => {
            let out = baseline_entropy_prompt(exp.params, images, cfg)?;
            records.extend(out.history.iter().map(step_record));
            prompts = Some(out.prompts);
        }
        Method::TentLn => {
            let out = baseline_tent_ln(exp.params, images, cfg)?;
            records.extend(out.history.iter().map(step_record));
            adapted = Some(out.params);
        }
        Method::SupervisedOracle => {
            let init = PromptSet::init(cfg.prompt_len, exp.params.config.embed_dim, cfg.seed)?;
            let fit = fit_prompts_supervised(exp.params, &init, images, labels, cfg.steps, cfg.lr, cfg.batch_size, cfg.seed)?;
            prompts = Some(fit.prompts);
        }
    }
    let (accuracy, mean_entropy) = match online_result {
        Some(r) => r,
        None => {
            let model = adapted.as_ref().unwrap_or(exp.params);
            let pl = pseudo_label(model, prompts.as_ref(), images)?;
            (fraction_correct(&pl.labels, labels), pl.mean_entropy)
        }
    };
    records.push(MetricsRecord {
        accuracy: Some(accuracy),
        mean_entropy: Some(mean_entropy),
        wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
        ..base
    });
    Ok(RunOutput { records, accuracy, mean_entropy, prompts, params: adapted })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": {"y": [1, 2], "x": null}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a": {"x": null, "y": [1, 2]}, "b": 1}"#).unwrap();
        assert_eq!(canonical_json(&a), r#"{"a":{"x":null,"y":[1,2]},"b":1}"#);
        assert_eq!(config_hash(&a), config_hash(&b));
        let c: Value = serde_json::from_str(r#"{"a": {"x": null, "y": [2, 1]}, "b": 1}"#).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m").join("run.jsonl");
        let r = MetricsRecord {
            run_id: "r".into(),
            method: Method::Otvp,
            source: "clean".into(),
            target: "blur-5".into(),
            kind: RecordKind::Step,
            index: 3,
            ot_value: Some(1.5),
            mean_entropy: Some(0.25),
            accuracy: None,
            wallclock_ms: 12.0,
            seed: 7,
            config_hash: "ab".into(),
            group_hash: "cd".into(),
            sweep: Some(SweepPoint { axis: SweepAxis::Lambda, value: 10.0 }),
            warmup: None,
            error: None,
        };
        append_records(&path, std::slice::from_ref(&r)).unwrap();
        append_records(&path, &[MetricsRecord { index: 4, ..r.clone() }]).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], r);
        assert_eq!(back[1].index, 4);
        fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(read_records(&path), Err(Error::Format { .. })));
    }
}
