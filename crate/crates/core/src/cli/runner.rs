//! Executes every (method, capacity, fold, seed) job of a plan.
//!
//! Each job writes its own fragment directory under `runs/`. The top-level
//! CSVs are rebuilt from the fragments in job order, so reruns and parallel
//! execution produce identical bytes. The manifest lists every emitted file
//! with its SHA-256 and is itself free of timestamps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{normalized_config, DataSource, Method, RunPlan};
use super::{io_at, load_data, CliError, LoadedData};
use crate::aggregator::{write_checkpoint, FrozenAggregator};
use crate::datagen::format::FORMAT_VERSION;
use crate::datagen::{split_folds, TaskDataset};
use crate::eval::{compute_metrics, AccuracyMatrix, ConfidenceRecord, MetricsReport};
use crate::trainers::{
    encode_buffer, run_sequence, BufferSnapshot, DerppWeights, Memory, SequenceConfig, Strategy,
};
use crate::zeroslide::run_zeroslide;

pub const RESULTS_FILE: &str = "results.csv";
pub const CONFIDENCE_FILE: &str = "confidence.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
const RUNS_DIR: &str = "runs";

/// Hashes of the files a job wrote, or why it failed.
type JobOutcome = Result<BTreeMap<String, String>, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Job {
    pub method: Method,
    pub capacity: Option<usize>,
    pub fold: usize,
    pub seed: u64,
}

impl Job {
    pub fn id(&self) -> String {
        let cap = self.capacity.map(|c| format!("-c{c}")).unwrap_or_default();
        format!("{}{cap}-f{}-s{}", self.method.as_str(), self.fold, self.seed)
    }
}

/// Jobs in canonical order: methods as listed, then capacities, folds, seeds.
pub fn job_plan(plan: &RunPlan) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &method in &plan.methods {
        let caps: Vec<Option<usize>> = if method.uses_buffer() {
            plan.capacities(method).iter().map(|&c| Some(c)).collect()
        } else {
            vec![None]
        };
        for capacity in caps {
            for fold in 0..plan.n_folds {
                for &seed in &plan.seeds {
                    jobs.push(Job {
                        method,
                        capacity,
                        fold,
                        seed,
                    });
                }
            }
        }
    }
    jobs
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub workers: usize,
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub computed: usize,
    pub skipped: usize,
    /// `(job id, error)` for every failed job.
    pub failed: Vec<(String, String)>,
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JobRecord {
    id: String,
    method: String,
    buffer_capacity: Option<usize>,
    fold: usize,
    seed: u64,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    error: Option<String>,
    files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: String,
    format_versions: BTreeMap<String, u32>,
    quantiles: String,
    jobs: Vec<JobRecord>,
    files: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn results_header(n_tasks: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "method",
        "buffer_capacity",
        "seed",
        "fold",
        "acc",
        "masked_acc",
        "macc",
        "bwt",
        "forgetting",
    ]
    .map(String::from)
    .to_vec();
    for kind in ["ci", "ti"] {
        for k in 0..n_tasks {
            for i in 0..=k {
                h.push(format!("a_{kind}_{k}_{i}"));
            }
        }
    }
    h.push("hyperparameters".into());
    h
}

const CONFIDENCE_HEADER: [&str; 10] = [
    "method",
    "buffer_capacity",
    "seed",
    "fold",
    "eval_task",
    "train_stage",
    "slide_id",
    "true_global_class",
    "score",
    "score_kind",
];

fn hyperparameters(plan: &RunPlan, job: &Job, regions_per_bag: usize) -> String {
    let shared = format!("epochs={};learning_rate={}", plan.epochs, plan.learning_rate);
    let kind = match plan.aggregator {
        crate::aggregator::AggregatorKind::GatedAttention => "gated_attention",
        crate::aggregator::AggregatorKind::Mean => "mean",
    };
    match job.method {
        Method::Finetune => format!("{shared};aggregator={kind}"),
        Method::Ewc => format!("{shared};aggregator={kind};lambda={}", plan.ewc_lambda),
        Method::Derpp => format!(
            "{shared};aggregator={kind};alpha={};beta={}",
            plan.derpp_alpha, plan.derpp_beta
        ),
        Method::Buro => format!(
            "{shared};aggregator={kind};replay_weight={};regions_per_bag={regions_per_bag}",
            plan.buro_replay_weight
        ),
        Method::ZeroSlide => {
            let sim = match plan.similarity {
                crate::primitives::Similarity::Cosine => "cosine",
                crate::primitives::Similarity::Dot => "dot",
            };
            format!("aggregator=mean_of_regions;similarity={sim}")
        }
    }
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let map = |e: csv::Error| CliError::Report(e.to_string());
    w.write_record(header).map_err(map)?;
    for r in rows {
        w.write_record(r).map_err(map)?;
    }
    w.into_inner().map_err(|e| CliError::Report(e.to_string()))
}

struct JobOutput {
    results_row: Vec<String>,
    confidence_rows: Vec<Vec<String>>,
    checkpoint: Option<crate::aggregator::AggregatorParams>,
    buffer: Option<BufferSnapshot>,
}

fn key_columns(job: &Job) -> [String; 4] {
    [
        job.method.as_str().to_string(),
        job.capacity.map(|c| c.to_string()).unwrap_or_default(),
        job.seed.to_string(),
        job.fold.to_string(),
    ]
}

fn metrics_row(job: &Job, m: &MetricsReport, ci: &AccuracyMatrix, ti: &AccuracyMatrix, hyper: String) -> Vec<String> {
    let mut row: Vec<String> = key_columns(job).to_vec();
    row.extend([
        fmt_f64(m.acc),
        fmt_f64(m.masked_acc),
        fmt_f64(m.macc),
        fmt_opt(m.bwt),
        fmt_opt(m.forgetting),
    ]);
    for matrix in [ci, ti] {
        for r in matrix.rows() {
            row.extend(r.iter().map(|&x| fmt_f64(x)));
        }
    }
    row.push(hyper);
    row
}

fn confidence_rows(job: &Job, records: &[ConfidenceRecord]) -> Vec<Vec<String>> {
    records
        .iter()
        .map(|r| {
            let mut row = key_columns(job).to_vec();
            row.extend([
                r.eval_task.to_string(),
                r.train_stage.to_string(),
                r.slide_id.clone(),
                r.true_label.global_id.to_string(),
                fmt_f64(r.score),
                r.score_kind.as_str().to_string(),
            ]);
            row
        })
        .collect()
}

fn fold_tasks(data: &LoadedData, plan: &RunPlan, fold: usize) -> Result<Vec<TaskDataset>, String> {
    if plan.n_folds == 1 {
        return Ok(data.tasks.clone());
    }
    let seed = match &plan.data {
        DataSource::Synthetic(c) => c.seed,
        DataSource::File(_) => 0,
    };
    data.tasks
        .iter()
        .map(|t| {
            split_folds(t, plan.n_folds, seed)
                .map(|mut folds| folds.swap_remove(fold))
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn execute(job: &Job, plan: &RunPlan, data: &LoadedData) -> Result<JobOutput, String> {
    let tasks = fold_tasks(data, plan, job.fold)?;
    let default_regions = tasks
        .iter()
        .flat_map(|t| t.train.first())
        .next()
        .map_or(1, |b| b.regions.len());
    let regions_per_bag = plan.buro_regions_per_bag.unwrap_or(default_regions);
    let hyper = hyperparameters(plan, job, regions_per_bag);
    if job.method == Method::ZeroSlide {
        let specs = data
            .prototypes
            .as_ref()
            .ok_or_else(|| "no prototypes available for zeroslide".to_string())?;
        let run = run_zeroslide(&tasks, specs, &FrozenAggregator::MeanOfRegions, plan.similarity)
            .map_err(|e| e.to_string())?;
        let metrics = compute_metrics(&run.class_il, &run.task_il).map_err(|e| e.to_string())?;
        return Ok(JobOutput {
            results_row: metrics_row(job, &metrics, &run.class_il, &run.task_il, hyper),
            confidence_rows: confidence_rows(job, &run.records),
            checkpoint: None,
            buffer: None,
        });
    }
    let capacity = job.capacity.unwrap_or(0);
    let strategy = match job.method {
        Method::Finetune => Strategy::Finetune,
        Method::Ewc => Strategy::Ewc {
            lambda: plan.ewc_lambda,
        },
        Method::Derpp => Strategy::Derpp {
            capacity,
            weights: DerppWeights {
                alpha: plan.derpp_alpha,
                beta: plan.derpp_beta,
            },
        },
        Method::Buro => Strategy::Buro {
            capacity,
            replay_weight: plan.buro_replay_weight,
            regions_per_bag,
        },
        Method::ZeroSlide => unreachable!("handled above"),
    };
    let config = SequenceConfig {
        kind: plan.aggregator,
        epochs: plan.epochs,
        learning_rate: plan.learning_rate,
        seed: job.seed,
    };
    let run = run_sequence(&tasks, &strategy, &config).map_err(|e| e.to_string())?;
    let metrics = compute_metrics(&run.class_il, &run.task_il).map_err(|e| e.to_string())?;
    let buffer = match run.memory {
        Memory::Der(b) => Some(BufferSnapshot::Der(b)),
        Memory::Regions(b) => Some(BufferSnapshot::Regions(b)),
        Memory::None | Memory::Ewc(_) => None,
    };
    Ok(JobOutput {
        results_row: metrics_row(job, &metrics, &run.class_il, &run.task_il, hyper),
        confidence_rows: confidence_rows(job, &run.records),
        checkpoint: Some(run.params),
        buffer,
    })
}

/// Paths are manifest keys: relative, `/`-separated.
fn rel(parts: &[&str]) -> String {
    parts.join("/")
}

fn write_fragment(
    out: &Path,
    job: &Job,
    output: &JobOutput,
    n_tasks: usize,
) -> Result<BTreeMap<String, String>, CliError> {
    let id = job.id();
    let dir = out.join(RUNS_DIR).join(&id);
    std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let mut files = BTreeMap::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), CliError> {
        let path = dir.join(name);
        std::fs::write(&path, &bytes).map_err(io_at(&path))?;
        files.insert(rel(&[RUNS_DIR, &id, name]), sha256_hex(&bytes));
        Ok(())
    };
    put(
        RESULTS_FILE,
        csv_bytes(&results_header(n_tasks), std::slice::from_ref(&output.results_row))?,
    )?;
    let conf_header: Vec<String> = CONFIDENCE_HEADER.map(String::from).to_vec();
    put(CONFIDENCE_FILE, csv_bytes(&conf_header, &output.confidence_rows)?)?;
    if let Some(params) = &output.checkpoint {
        let path = dir.join("checkpoint.zslm");
        write_checkpoint(params, &path)?;
        let bytes = std::fs::read(&path).map_err(io_at(&path))?;
        files.insert(rel(&[RUNS_DIR, &id, "checkpoint.zslm"]), sha256_hex(&bytes));
    }
    if let Some(buffer) = &output.buffer {
        let bytes = encode_buffer(buffer)?;
        let path = dir.join("buffer.zslr");
        std::fs::write(&path, &bytes).map_err(io_at(&path))?;
        files.insert(rel(&[RUNS_DIR, &id, "buffer.zslr"]), sha256_hex(&bytes));
    }
    Ok(files)
}

fn read_manifest(out: &Path) -> Option<Manifest> {
    let text = std::fs::read_to_string(out.join(MANIFEST_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// A completed job can be reused when every file it recorded is intact.
fn reusable(out: &Path, record: &JobRecord) -> bool {
    record.status == "completed"
        && !record.files.is_empty()
        && record.files.iter().all(|(path, hash)| {
            std::fs::read(out.join(path)).is_ok_and(|bytes| &sha256_hex(&bytes) == hash)
        })
}

/// Data rows of a CSV fragment (everything after the header line).
fn body_lines(bytes: &[u8]) -> &[u8] {
    match bytes.iter().position(|&b| b == b'\n') {
        Some(i) => &bytes[i + 1..],
        None => &[],
    }
}

pub fn run_experiment(plan: &RunPlan, options: &RunOptions) -> Result<RunSummary, CliError> {
    let out = options.out.as_path();
    std::fs::create_dir_all(out).map_err(io_at(out))?;
    let mut effective = plan.clone();
    effective.output_dir = out.to_path_buf();
    let config_text = normalized_config(&effective);
    let jobs = job_plan(plan);

    let previous: BTreeMap<String, JobRecord> = match read_manifest(out) {
        Some(m) if options.resume && m.config == config_text => {
            m.jobs.into_iter().map(|j| (j.id.clone(), j)).collect()
        }
        _ => BTreeMap::new(),
    };
    if previous.is_empty() {
        let runs = out.join(RUNS_DIR);
        if runs.exists() {
            std::fs::remove_dir_all(&runs).map_err(io_at(&runs))?;
        }
    }
    let pending: Vec<&Job> = jobs
        .iter()
        .filter(|j| !previous.get(&j.id()).is_some_and(|r| reusable(out, r)))
        .collect();

    let data = if pending.is_empty() { None } else { Some(load_data(plan)?) };
    let n_tasks = match &data {
        Some(d) => d.tasks.len(),
        None => plan_task_count(plan, out, &previous)?,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let computed: Vec<(Job, JobOutcome)> = pool.install(|| {
        pending
            .par_iter()
            .map(|&&job| {
                let data = data.as_ref().expect("data loaded for pending jobs");
                let outcome = execute(&job, plan, data)
                    .and_then(|o| write_fragment(out, &job, &o, n_tasks).map_err(|e| e.to_string()));
                (job, outcome)
            })
            .collect()
    });
    let mut fresh: BTreeMap<String, JobOutcome> =
        computed.into_iter().map(|(j, r)| (j.id(), r)).collect();

    let mut records = Vec::with_capacity(jobs.len());
    let mut results = results_header_line(n_tasks)?;
    let mut confidence = csv_bytes(&CONFIDENCE_HEADER.map(String::from), &[])?;
    let mut failed = Vec::new();
    for job in &jobs {
        let id = job.id();
        let files = match fresh.remove(&id) {
            Some(Ok(files)) => files,
            Some(Err(e)) => {
                failed.push((id.clone(), e.clone()));
                records.push(job_record(job, "failed", Some(e), BTreeMap::new()));
                continue;
            }
            None => previous[&id].files.clone(),
        };
        for (name, sink) in [(RESULTS_FILE, &mut results), (CONFIDENCE_FILE, &mut confidence)] {
            let path = out.join(RUNS_DIR).join(&id).join(name);
            let bytes = std::fs::read(&path).map_err(io_at(&path))?;
            sink.extend_from_slice(body_lines(&bytes));
        }
        records.push(job_record(job, "completed", None, files));
    }

    let mut files = BTreeMap::new();
    for (name, bytes) in [(RESULTS_FILE, &results), (CONFIDENCE_FILE, &confidence)] {
        let path = out.join(name);
        std::fs::write(&path, bytes).map_err(io_at(&path))?;
        files.insert(name.to_string(), sha256_hex(bytes));
    }
    for r in &records {
        files.extend(r.files.clone());
    }
    let manifest = Manifest {
        config: config_text,
        format_versions: [
            ("embedding", FORMAT_VERSION),
            ("prototype", FORMAT_VERSION),
            ("checkpoint", FORMAT_VERSION),
            ("buffer", FORMAT_VERSION),
            ("results_csv", 1),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect(),
        quantiles: "inclusive linear interpolation (type 7)".into(),
        jobs: records,
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Manifest(e.to_string()))?;
    text.push('\n');
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, &text).map_err(io_at(&path))?;
    Ok(RunSummary {
        computed: pending.len(),
        skipped: jobs.len() - pending.len(),
        failed,
        manifest_sha256: sha256_hex(text.as_bytes()),
    })
}

fn results_header_line(n_tasks: usize) -> Result<Vec<u8>, CliError> {
    csv_bytes(&results_header(n_tasks), &[])
}

/// Task count recovered from a reused fragment when nothing needs computing.
fn plan_task_count(plan: &RunPlan, out: &Path, previous: &BTreeMap<String, JobRecord>) -> Result<usize, CliError> {
    if let DataSource::Synthetic(c) = &plan.data {
        return Ok(c.tasks.len());
    }
    let record = previous
        .values()
        .next()
        .ok_or_else(|| CliError::Manifest("no jobs to reuse".into()))?;
    let path = out.join(RUNS_DIR).join(&record.id).join(RESULTS_FILE);
    let bytes = std::fs::read(&path).map_err(io_at(&path))?;
    let header = String::from_utf8_lossy(&bytes[..bytes.len() - body_lines(&bytes).len()]).to_string();
    let cells = header.trim_end().split(',').filter(|c| c.starts_with("a_ci_")).count();
    // cells = n (n + 1) / 2
    let n = ((((8 * cells + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    Ok(n)
}

fn job_record(job: &Job, status: &str, error: Option<String>, files: BTreeMap<String, String>) -> JobRecord {
    JobRecord {
        id: job.id(),
        method: job.method.as_str().into(),
        buffer_capacity: job.capacity,
        fold: job.fold,
        seed: job.seed,
        status: status.into(),
        error,
        files,
    }
}

/// Re-hashes every file a manifest lists; returns how many were checked.
pub(crate) fn verify_manifest(dir: &Path) -> Result<usize, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_at(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Manifest(e.to_string()))?;
    let mut problems = String::new();
    for (file, hash) in &manifest.files {
        match std::fs::read(dir.join(file)) {
            Ok(bytes) if &sha256_hex(&bytes) == hash => {}
            Ok(_) => {
                let _ = write!(problems, "{file}: hash mismatch; ");
            }
            Err(e) => {
                let _ = write!(problems, "{file}: {e}; ");
            }
        }
    }
    if problems.is_empty() {
        Ok(manifest.files.len())
    } else {
        Err(CliError::Manifest(problems.trim_end_matches("; ").to_string()))
    }
}
