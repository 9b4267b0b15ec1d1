use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use otvp::adapt::{AdaptationConfig, Method, RepresentationBank, precompute_source_reps, pseudo_label};
use otvp::data::{self, DomainSpec, SyntheticDataset};
use otvp::harness::{self, Experiment, SweepSpec};
use otvp::model::{self, TrainConfig, ViTConfig};
use otvp::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "otvp", version, about = "Test-time visual prompting with label-aware optimal transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic image domains into a data directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// JSON file listing the domains.
        #[arg(long)]
        domains: PathBuf,
        /// Images per domain (a domain entry may override it).
        #[arg(long, default_value_t = 1400)]
        n: usize,
        #[arg(long, env = "OTVP_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Train the transformer on a labeled domain.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        /// Domain name; its train/val splits are used when present.
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, env = "OTVP_SEED", default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        arch: Arch,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
    /// Precompute prompt-free source representations.
    DumpReps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `name` or `name:split`.
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt to a target domain and write per-step metrics.
    Adapt(AdaptArgs),
    /// Accuracy and mean prediction entropy of a checkpoint (and prompts).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompts_file: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: String,
    },
    /// Run every (value, seed) cell of a sweep specification.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        metrics_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Re-run cells whose configuration already has an evaluation on file.
        #[arg(long)]
        force: bool,
    },
    /// Aggregate a metrics directory into JSON and CSV tables.
    Report {
        #[arg(long)]
        metrics_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Arch {
    #[arg(long, default_value_t = ViTConfig::default().patch_size)]
    patch_size: usize,
    #[arg(long, default_value_t = ViTConfig::default().embed_dim)]
    embed_dim: usize,
    #[arg(long, default_value_t = ViTConfig::default().num_layers)]
    layers: usize,
    #[arg(long, default_value_t = ViTConfig::default().num_heads)]
    heads: usize,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Required by otvp and otvp-b.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// `name` or `name:split`.
    #[arg(long)]
    target: String,
    #[arg(long, default_value = "otvp")]
    method: Method,
    #[arg(long, default_value_t = 1e4)]
    lambda: f64,
    /// Number of prompt tokens.
    #[arg(long, default_value_t = 4)]
    prompts: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Defaults to 0.1, or 1e-3 for tent-ln.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long)]
    online: bool,
    #[arg(long, default_value_t = 0.01)]
    warmup_frac: f64,
    #[arg(long, default_value_t = 50)]
    warmup_steps: usize,
    #[arg(long, default_value_t = 1)]
    online_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    epsilon_rel: f64,
    #[arg(long, default_value_t = 2048)]
    source_cap: usize,
    #[arg(long, env = "OTVP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    metrics: PathBuf,
    /// Save the learned prompts here.
    #[arg(long)]
    prompts_out: Option<PathBuf>,
}

/// Domain list for `gen-data`.
#[derive(Deserialize)]
struct DomainsFile {
    #[serde(default = "default_image_size")]
    image_size: usize,
    #[serde(default = "default_classes")]
    num_classes: usize,
    domains: Vec<DomainEntry>,
}

fn default_image_size() -> usize {
    ViTConfig::default().image_size
}

fn default_classes() -> usize {
    ViTConfig::default().num_classes
}

#[derive(Deserialize)]
struct DomainEntry {
    #[serde(flatten)]
    spec: DomainSpec,
    #[serde(default)]
    n: Option<usize>,
    /// Write stratified `train`/`val` splits instead of a single `all`.
    #[serde(default)]
    train_fraction: Option<f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), detail: e.to_string() })
}

fn gen_data(out: &Path, domains: &Path, n: usize, seed: u64) -> Result<()> {
    let file: DomainsFile = read_json(domains)?;
    if file.domains.is_empty() {
        return Err(Error::Invalid(format!("{} lists no domains", domains.display())));
    }
    for entry in file.domains {
        let mut spec = entry.spec;
        spec.seed = rng::derive_index(rng::derive(seed, &spec.name), spec.seed);
        let ds = data::generate(&spec, entry.n.unwrap_or(n), file.num_classes, file.image_size)?;
        let parts = match entry.train_fraction {
            Some(f) => {
                let (tr, va) = data::split(&ds, f, rng::derive(spec.seed, "split"))?;
                vec![tr, va]
            }
            None => vec![ds],
        };
        data::save_dataset(&out.join(&spec.name), &parts)?;
        println!("{}", json!({"domain": spec.name, "splits": parts.iter().map(|p| json!({"tag": p.split, "count": p.len()})).collect::<Vec<_>>()}));
    }
    Ok(())
}

fn train_split(data_dir: &Path, domain: &str, seed: u64) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let dir = data_dir.join(domain);
    let manifest = data::read_manifest(&dir)?;
    let has = |t: &str| manifest.splits.iter().any(|s| s.tag == t);
    if has("train") && has("val") {
        return Ok((data::load_dataset(&dir, Some("train"))?, data::load_dataset(&dir, Some("val"))?));
    }
    data::split(&data::load_dataset(&dir, None)?, 0.8, rng::derive(seed, "source-split"))
}

fn train_source(data_dir: &Path, domain: &str, out: &Path, epochs: usize, seed: u64, arch: &Arch, batch_size: usize, lr: f64) -> Result<()> {
    let (train, val) = train_split(data_dir, domain, seed)?;
    let config = ViTConfig {
        image_size: train.image_size(),
        channels: train.channels(),
        num_classes: train.num_classes,
        patch_size: arch.patch_size,
        embed_dim: arch.embed_dim,
        num_layers: arch.layers,
        num_heads: arch.heads,
        seed,
        ..ViTConfig::default()
    };
    let init = otvp::ViTParams::init(&config)?;
    let cfg = TrainConfig { epochs, batch_size, lr, seed, ..TrainConfig::default() };
    let (params, report) = model::train_source(&init, (&train.images, &train.labels), (&val.images, &val.labels), &cfg)?;
    model::save_checkpoint(out, &params)?;
    println!(
        "{}",
        json!({"checkpoint": out, "hash": model::checkpoint_hash(&params)?, "best_epoch": report.best_epoch, "best_val_accuracy": report.best_val_accuracy})
    );
    Ok(())
}

fn dump_reps(ckpt: &Path, data_dir: &Path, domain: &str, out: &Path) -> Result<()> {
    let params = model::load_checkpoint(ckpt)?;
    let ds = data::load_domain(data_dir, domain)?;
    let bank = precompute_source_reps(&params, &ds.images, &ds.labels, domain)?;
    bank.save(out)?;
    println!("{}", json!({"bank": out, "rows": bank.len(), "dim": bank.z_s.shape()[1], "checkpoint_hash": bank.checkpoint_hash}));
    Ok(())
}

fn adapt(a: &AdaptArgs) -> Result<()> {
    let params = model::load_checkpoint(&a.ckpt)?;
    let bank = a.bank.as_deref().map(RepresentationBank::load).transpose()?;
    let target = data::load_domain(&a.data, &a.target)?;
    let default_lr = if a.method == Method::TentLn { 1e-3 } else { 0.1 };
    let mut cfg = AdaptationConfig {
        method: a.method,
        lambda: a.lambda,
        prompt_len: a.prompts,
        lr: a.lr.unwrap_or(default_lr),
        steps: a.steps,
        batch_size: a.batch_size,
        online: a.online,
        warmup_fraction: a.warmup_frac,
        warmup_steps: a.warmup_steps,
        online_steps: a.online_steps,
        seed: a.seed,
        source_cap: a.source_cap,
        ..AdaptationConfig::default()
    };
    cfg.sinkhorn.epsilon_rel = a.epsilon_rel;
    let source = bank.as_ref().map_or("", |b| b.source_id.as_str()).to_string();
    let exp = Experiment { params: &params, bank: bank.as_ref(), target: &target, source: &source };
    let run_id = format!("{}/{}/seed={}", a.target, a.method, a.seed);
    let out = harness::run_method(&exp, &cfg, &run_id, None)?;
    harness::append_records(&a.metrics, &out.records)?;
    if let (Some(path), Some(prompts)) = (&a.prompts_out, &out.prompts) {
        model::save_prompts(path, prompts)?;
    }
    println!("{}", json!({"run_id": run_id, "accuracy": out.accuracy, "mean_entropy": out.mean_entropy, "records": out.records.len()}));
    Ok(())
}

fn eval(ckpt: &Path, prompts_file: Option<&Path>, data_dir: &Path, domain: &str) -> Result<()> {
    let params = model::load_checkpoint(ckpt)?;
    let prompts = prompts_file.map(model::load_prompts).transpose()?;
    let ds = data::load_domain(data_dir, domain)?;
    let pl = pseudo_label(&params, prompts.as_ref(), &ds.images)?;
    let correct = pl.labels.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
    println!(
        "{}",
        json!({"domain": domain, "n": ds.len(), "accuracy": correct as f64 / ds.len() as f64, "mean_entropy": pl.mean_entropy})
    );
    Ok(())
}

fn sweep(spec_path: &Path, metrics_dir: &Path, jobs: usize, force: bool) -> Result<()> {
    let spec: SweepSpec = read_json(spec_path)?;
    spec.validate()?;
    let params = model::load_checkpoint(&spec.ckpt)?;
    let bank = spec.bank.as_deref().map(RepresentationBank::load).transpose()?;
    let target = data::load_domain(&spec.data, &spec.target)?;
    let source = bank.as_ref().map_or("", |b| b.source_id.as_str()).to_string();
    let exp = Experiment { params: &params, bank: bank.as_ref(), target: &target, source: &source };
    let cells = harness::run_sweep(&spec, &exp, metrics_dir, jobs, force)?;
    for c in &cells {
        let status = match &c.status {
            harness::CellStatus::Done { accuracy } => json!({"status": "done", "accuracy": accuracy}),
            harness::CellStatus::Skipped => json!({"status": "skipped"}),
            harness::CellStatus::Failed(e) => json!({"status": "failed", "error": e}),
        };
        println!("{}", json!({"value": c.value, "seed": c.seed, "file": c.path, "result": status}));
    }
    Ok(())
}

fn report(metrics_dir: &Path, out: &Path) -> Result<()> {
    let records = harness::read_metrics_dir(metrics_dir)?;
    let rep = harness::build_report(&records);
    let csv = harness::write_report(&rep, out)?;
    println!("{}", json!({"report": out, "csv": csv, "runs": rep.runs.len(), "aggregates": rep.aggregates.len(), "failures": rep.failures.len()}));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, domains, n, seed } => gen_data(&out, &domains, n, seed),
        Command::TrainSource { data, domain, out, epochs, seed, arch, batch_size, lr } => {
            train_source(&data, &domain, &out, epochs, seed, &arch, batch_size, lr)
        }
        Command::DumpReps { ckpt, data, domain, out } => dump_reps(&ckpt, &data, &domain, &out),
        Command::Adapt(a) => adapt(&a),
        Command::Eval { ckpt, prompts_file, data, domain } => eval(&ckpt, prompts_file.as_deref(), &data, &domain),
        Command::Sweep { spec, metrics_dir, jobs, force } => sweep(&spec, &metrics_dir, jobs, force),
        Command::Report { metrics_dir, out } => report(&metrics_dir, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
