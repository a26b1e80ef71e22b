//! Command-line layer: configuration, experiment runs, reports and file checks.

mod config;
mod report;
mod runner;
mod svg;

pub use config::{
    normalized_config, parse_config, parse_config_str, ConfigError, DataSource, Method, PrototypeSource, RunPlan,
};
pub use report::{emit_report, read_results, summarize, MetricStat, ReportSummary, ResultRow, SummaryRow, METRICS};
pub use runner::{job_plan, run_experiment, Job, RunOptions, RunSummary, CONFIDENCE_FILE, MANIFEST_FILE, RESULTS_FILE};
pub use svg::boxplot_svg;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::aggregator::{decode_checkpoint, ModelError, CHECKPOINT_MAGIC};
use crate::datagen::format::{EMBEDDING_MAGIC, PROTOTYPE_MAGIC};
use crate::datagen::{
    decode_embeddings, decode_prototypes, generate_task_sequence, synthesize_prototypes, write_embedding_file,
    write_prototype_file, DataError, TaskDataset, TaskPrototypeSpec,
};
use crate::trainers::{decode_buffer, BufferSnapshot, BUFFER_MAGIC};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("report: {0}")]
    Report(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 3,
            CliError::Data(_) | CliError::Model(ModelError::Data(_)) => 4,
            _ => 1,
        }
    }
}

pub(crate) fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Task sequence and prototype specs a plan runs on.
pub struct LoadedData {
    pub tasks: Vec<TaskDataset>,
    pub prototypes: Option<Vec<TaskPrototypeSpec>>,
}

pub fn load_data(plan: &RunPlan) -> Result<LoadedData, CliError> {
    let (tasks, synthetic) = match &plan.data {
        DataSource::Synthetic(config) => {
            let seq = generate_task_sequence(config)?;
            let protos = synthesize_prototypes(&seq.class_means, config)?;
            (seq.tasks, Some(protos))
        }
        DataSource::File(path) => (read_embeddings(path)?, None),
    };
    let prototypes = match &plan.prototypes {
        PrototypeSource::File(path) => {
            let bytes = std::fs::read(path).map_err(io_at(path))?;
            Some(decode_prototypes(&bytes)?)
        }
        PrototypeSource::Synthetic => synthetic,
    };
    Ok(LoadedData { tasks, prototypes })
}

fn read_embeddings(path: &Path) -> Result<Vec<TaskDataset>, CliError> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    Ok(decode_embeddings(&bytes)?)
}

/// Writes the plan's synthetic embeddings and prototypes into `out`.
pub fn generate(plan: &RunPlan, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let DataSource::Synthetic(config) = &plan.data else {
        return Err(CliError::Usage("generate needs [data] source = synthetic".into()));
    };
    std::fs::create_dir_all(out).map_err(io_at(out))?;
    let seq = generate_task_sequence(config)?;
    let protos = synthesize_prototypes(&seq.class_means, config)?;
    let emb = out.join("embeddings.zslb");
    let pro = out.join("prototypes.zslp");
    write_embedding_file(&seq.tasks, &emb)?;
    write_prototype_file(&protos, &pro)?;
    Ok(vec![emb, pro])
}

/// What a validated file turned out to be.
#[derive(Debug, Clone, PartialEq)]
pub enum FileKind {
    Embeddings { tasks: usize, slides: usize },
    Prototypes { tasks: usize, classes: usize },
    Checkpoint { classes: usize },
    Buffer { items: usize },
    Manifest { files: usize },
}

impl std::fmt::Display for FileKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FileKind::Embeddings { tasks, slides } => write!(f, "embedding file, {tasks} tasks, {slides} slides"),
            FileKind::Prototypes { tasks, classes } => {
                write!(f, "prototype file, {tasks} tasks, {classes} classes")
            }
            FileKind::Checkpoint { classes } => write!(f, "model checkpoint, {classes} classes"),
            FileKind::Buffer { items } => write!(f, "buffer snapshot, {items} items"),
            FileKind::Manifest { files } => write!(f, "manifest, {files} hashed files verified"),
        }
    }
}

/// Decodes one file by its magic, or checks every hash of a run manifest.
pub fn validate_file(path: &Path) -> Result<FileKind, CliError> {
    if path.is_dir() || path.file_name().is_some_and(|n| n == MANIFEST_FILE) {
        let dir = if path.is_dir() { path } else { path.parent().unwrap_or(Path::new(".")) };
        return Ok(FileKind::Manifest {
            files: runner::verify_manifest(dir)?,
        });
    }
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    let magic = bytes.get(..4).unwrap_or(&[]);
    if magic == EMBEDDING_MAGIC {
        let tasks = decode_embeddings(&bytes)?;
        let slides = tasks.iter().map(|t| t.all_slides().count()).sum();
        Ok(FileKind::Embeddings {
            tasks: tasks.len(),
            slides,
        })
    } else if magic == PROTOTYPE_MAGIC {
        let specs = decode_prototypes(&bytes)?;
        Ok(FileKind::Prototypes {
            tasks: specs.len(),
            classes: specs.iter().map(TaskPrototypeSpec::class_count).sum(),
        })
    } else if magic == CHECKPOINT_MAGIC {
        Ok(FileKind::Checkpoint {
            classes: decode_checkpoint(&bytes)?.class_count(),
        })
    } else if magic == BUFFER_MAGIC {
        let items = match decode_buffer(&bytes)? {
            BufferSnapshot::Der(b) => b.len(),
            BufferSnapshot::Regions(b) => b.len(),
        };
        Ok(FileKind::Buffer { items })
    } else {
        Err(DataError::Format {
            offset: 0,
            reason: format!("unrecognized magic {:?}", String::from_utf8_lossy(magic)),
        }
        .into())
    }
}
