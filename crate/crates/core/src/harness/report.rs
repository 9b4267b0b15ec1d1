use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::Method;
use crate::error::{Error, Result};

use super::{read_records, MetricsRecord, RecordKind, SweepAxis};

/// Final numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: String,
    pub method: Method,
    pub target: String,
    pub axis: Option<SweepAxis>,
    pub value: Option<f64>,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_entropy: f64,
    /// OT value at the first and last recorded step, when the method has one.
    pub first_ot: Option<f64>,
    pub final_ot: Option<f64>,
    pub group_hash: String,
}

/// Mean and sample standard deviation over the seeds of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub target: String,
    pub axis: Option<SweepAxis>,
    pub value: Option<f64>,
    pub n: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub entropy_mean: f64,
    pub entropy_std: f64,
    pub group_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub run_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
    pub failures: Vec<Failure>,
}

/// Every record of every `*.jsonl` file under `dir`, files in name order.
pub fn read_metrics_dir(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_records(&f)?);
    }
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// One row per run (its latest evaluation when a run was repeated) and one
/// aggregate per configuration group.
pub fn build_report(records: &[MetricsRecord]) -> Report {
    let mut latest: BTreeMap<(String, String), &MetricsRecord> = BTreeMap::new();
    let mut failures = Vec::new();
    for r in records {
        let key = (r.run_id.clone(), r.config_hash.clone());
        match r.kind {
            RecordKind::Eval => {
                latest.insert(key, r);
            }
            RecordKind::Step | RecordKind::Batch => {}
            RecordKind::Error => failures.push(Failure {
                run_id: r.run_id.clone(),
                error: r.error.clone().unwrap_or_default(),
            }),
        }
    }
    // Step records precede their evaluation; a later rerun starts a new list.
    let mut pending: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut trajectories: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = (r.run_id.clone(), r.config_hash.clone());
        match r.kind {
            RecordKind::Step | RecordKind::Batch => {
                if let Some(v) = r.ot_value {
                    pending.entry(key).or_default().push(v);
                }
            }
            RecordKind::Eval => {
                trajectories.insert(key.clone(), pending.remove(&key).unwrap_or_default());
            }
            RecordKind::Error => {}
        }
    }
    let mut runs: Vec<RunRow> = latest
        .iter()
        .map(|(key, r)| {
            let ot = trajectories.get(key).map(Vec::as_slice).unwrap_or(&[]);
            RunRow {
                run_id: r.run_id.clone(),
                method: r.method,
                target: r.target.clone(),
                axis: r.sweep.as_ref().map(|p| p.axis),
                value: r.sweep.as_ref().map(|p| p.value),
                seed: r.seed,
                accuracy: r.accuracy.unwrap_or(f64::NAN),
                mean_entropy: r.mean_entropy.unwrap_or(f64::NAN),
                first_ot: ot.first().copied(),
                final_ot: ot.last().copied(),
                group_hash: r.group_hash.clone(),
            }
        })
        .collect();
    runs.sort_by(|a, b| {
        (a.target.as_str(), a.method.name(), a.axis.map(SweepAxis::name), a.seed)
            .cmp(&(b.target.as_str(), b.method.name(), b.axis.map(SweepAxis::name), b.seed))
            .then(a.value.partial_cmp(&b.value).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut groups: Vec<(String, Vec<&RunRow>)> = Vec::new();
    for row in &runs {
        match groups.iter_mut().find(|(g, _)| *g == row.group_hash) {
            Some((_, members)) => members.push(row),
            None => groups.push((row.group_hash.clone(), vec![row])),
        }
    }
    let mut aggregates: Vec<Aggregate> = groups
        .into_iter()
        .map(|(group_hash, members)| {
            let acc: Vec<f64> = members.iter().map(|r| r.accuracy).collect();
            let ent: Vec<f64> = members.iter().map(|r| r.mean_entropy).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (entropy_mean, entropy_std) = mean_std(&ent);
            let first = members[0];
            Aggregate {
                method: first.method,
                target: first.target.clone(),
                axis: first.axis,
                value: first.value,
                n: members.len(),
                accuracy_mean,
                accuracy_std,
                entropy_mean,
                entropy_std,
                group_hash,
            }
        })
        .collect();
    aggregates.sort_by(|a, b| {
        (a.target.as_str(), a.method.name(), a.axis.map(SweepAxis::name))
            .cmp(&(b.target.as_str(), b.method.name(), b.axis.map(SweepAxis::name)))
            .then(a.value.partial_cmp(&b.value).unwrap_or(std::cmp::Ordering::Equal))
    });
    Report { runs, aggregates, failures }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write the report as JSON at `out`, plus CSV series next to it:
/// `<stem>.runs.csv`, `<stem>.aggregates.csv`, and `<stem>.<axis>.csv` for
/// every swept axis. Returns the CSV paths.
pub fn write_report(report: &Report, out: &Path) -> Result<Vec<PathBuf>> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(out, e))?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let at = |suffix: &str| out.with_file_name(format!("{stem}.{suffix}.csv"));
    let mut written = Vec::new();

    let mut runs = String::from("run_id,method,target,axis,value,seed,accuracy,mean_entropy,first_ot,final_ot\n");
    for r in &report.runs {
        runs += &format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.method,
            r.target,
            r.axis.map_or("", SweepAxis::name),
            opt(r.value),
            r.seed,
            r.accuracy,
            r.mean_entropy,
            opt(r.first_ot),
            opt(r.final_ot)
        );
    }
    let header = "method,target,axis,value,n,accuracy_mean,accuracy_std,entropy_mean,entropy_std\n";
    let agg_line = |a: &Aggregate| {
        format!(
            "{},{},{},{},{},{},{},{},{}\n",
            a.method,
            a.target,
            a.axis.map_or("", SweepAxis::name),
            opt(a.value),
            a.n,
            a.accuracy_mean,
            a.accuracy_std,
            a.entropy_mean,
            a.entropy_std
        )
    };
    let mut all = String::from(header);
    let mut per_axis: BTreeMap<&str, String> = BTreeMap::new();
    for a in &report.aggregates {
        all += &agg_line(a);
        if let Some(axis) = a.axis {
            per_axis.entry(axis.name()).or_insert_with(|| header.to_string()).push_str(&agg_line(a));
        }
    }
    for (suffix, body) in [("runs", runs), ("aggregates", all)].into_iter().chain(per_axis) {
        let p = at(suffix);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SweepPoint;

    fn eval(run: &str, seed: u64, value: f64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            run_id: run.into(),
            method: Method::Otvp,
            source: "clean".into(),
            target: "t".into(),
            kind: RecordKind::Eval,
            index: 0,
            ot_value: None,
            mean_entropy: Some(acc / 2.0),
            accuracy: Some(acc),
            wallclock_ms: 1.0,
            seed,
            config_hash: run.to_string(),
            group_hash: format!("g{value}"),
            sweep: Some(SweepPoint { axis: SweepAxis::Lambda, value }),
            warmup: None,
            error: None,
        }
    }

    #[test]
    fn one_row_per_run_and_one_aggregate_per_value() {
        let mut recs = Vec::new();
        for (k, v) in [0.0, 1e4].into_iter().enumerate() {
            for s in 0..3 {
                let run = format!("r{k}{s}");
                recs.push(MetricsRecord { kind: RecordKind::Step, index: 1, ot_value: Some(9.0), ..eval(&run, s, v, 0.0) });
                recs.push(MetricsRecord { kind: RecordKind::Step, index: 2, ot_value: Some(4.0), ..eval(&run, s, v, 0.0) });
                recs.push(eval(&run, s, v, 0.5 + 0.1 * s as f64 + k as f64 * 0.01));
            }
        }
        let rep = build_report(&recs);
        assert_eq!(rep.runs.len(), 6);
        assert_eq!(rep.aggregates.len(), 2);
        assert!(rep.runs.iter().all(|r| r.first_ot == Some(9.0) && r.final_ot == Some(4.0)));
        let a = &rep.aggregates[1];
        assert_eq!((a.n, a.value), (3, Some(1e4)));
        assert!((a.accuracy_mean - 0.61).abs() < 1e-12);
        assert!((a.accuracy_std - 0.1).abs() < 1e-12);
    }

    #[test]
    fn reruns_keep_the_latest_evaluation() {
        let recs = vec![eval("a", 0, 1.0, 0.2), eval("a", 0, 1.0, 0.4)];
        let rep = build_report(&recs);
        assert_eq!(rep.runs.len(), 1);
        assert_eq!(rep.runs[0].accuracy, 0.4);
        assert_eq!(rep.aggregates[0].accuracy_std, 0.0);
    }

    #[test]
    fn csv_files_per_axis() {
        let dir = tempfile::tempdir().unwrap();
        let rep = build_report(&[eval("a", 0, 1.0, 0.2), eval("b", 1, 1.0, 0.4)]);
        let out = dir.path().join("report.json");
        let files = write_report(&rep, &out).unwrap();
        assert!(out.exists());
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["report.runs.csv", "report.aggregates.csv", "report.lambda.csv"]);
        let lambda = fs::read_to_string(&files[2]).unwrap();
        assert_eq!(lambda.lines().count(), 2);
    }
}
