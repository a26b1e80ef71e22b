//! Run-plan configuration.
//!
//! Grammar: one `key = value` per line under `[section]` headers. `#` starts
//! a comment. Lists are comma-separated; `tasks` separates tasks with commas
//! and class names within a task with `/`. Keys may appear at most once and
//! unknown sections or keys are rejected.
//!
//! ```text
//! [data]        source path tasks class_counts slides_per_class dim regions_per_slide
//!               patches_per_region class_separation patch_noise_sigma seed
//! [prototypes]  source path noise_sigma variants
//! [run]         methods seeds n_folds epochs learning_rate aggregator similarity output_dir
//! [ewc]         lambda
//! [derpp]       buffer_capacity alpha beta
//! [buro]        buffer_capacity replay_weight regions_per_bag
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::aggregator::AggregatorKind;
use crate::datagen::{SyntheticConfig, TaskSpec};
use crate::primitives::Similarity;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: key `{key}`: {message}")]
    Key { line: usize, key: String, message: String },
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "source",
            "path",
            "tasks",
            "class_counts",
            "slides_per_class",
            "dim",
            "regions_per_slide",
            "patches_per_region",
            "class_separation",
            "patch_noise_sigma",
            "seed",
        ],
    ),
    ("prototypes", &["source", "path", "noise_sigma", "variants"]),
    (
        "run",
        &[
            "methods",
            "seeds",
            "n_folds",
            "epochs",
            "learning_rate",
            "aggregator",
            "similarity",
            "output_dir",
        ],
    ),
    ("ewc", &["lambda"]),
    ("derpp", &["buffer_capacity", "alpha", "beta"]),
    ("buro", &["buffer_capacity", "replay_weight", "regions_per_bag"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Finetune,
    Ewc,
    Derpp,
    Buro,
    ZeroSlide,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Finetune, Method::Ewc, Method::Derpp, Method::Buro, Method::ZeroSlide];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Ewc => "ewc",
            Method::Derpp => "derpp",
            Method::Buro => "buro",
            Method::ZeroSlide => "zeroslide",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn uses_buffer(self) -> bool {
        matches!(self, Method::Derpp | Method::Buro)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrototypeSource {
    /// Drawn around the synthetic class means; noise settings live in the data config.
    Synthetic,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub data: DataSource,
    pub prototypes: PrototypeSource,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// 1 keeps the splits as given; k >= 2 re-splits each task into k stratified folds.
    pub n_folds: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub aggregator: AggregatorKind,
    pub similarity: Similarity,
    pub output_dir: PathBuf,
    pub ewc_lambda: f64,
    pub derpp_capacities: Vec<usize>,
    pub derpp_alpha: f64,
    pub derpp_beta: f64,
    pub buro_capacities: Vec<usize>,
    pub buro_replay_weight: f64,
    /// Defaults to the region count of the replayed slides' source data.
    pub buro_regions_per_bag: Option<usize>,
}

impl RunPlan {
    /// Defaults for everything except methods and seeds.
    pub fn new(methods: Vec<Method>, seeds: Vec<u64>) -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticConfig::default()),
            prototypes: PrototypeSource::Synthetic,
            methods,
            seeds,
            n_folds: 1,
            epochs: 10,
            learning_rate: 0.05,
            aggregator: AggregatorKind::GatedAttention,
            similarity: Similarity::Cosine,
            output_dir: PathBuf::from("results"),
            ewc_lambda: 100.0,
            derpp_capacities: Vec::new(),
            derpp_alpha: 0.5,
            derpp_beta: 0.5,
            buro_capacities: Vec::new(),
            buro_replay_weight: 1.0,
            buro_regions_per_bag: None,
        }
    }

    pub fn capacities(&self, method: Method) -> &[usize] {
        match method {
            Method::Derpp => &self.derpp_capacities,
            Method::Buro => &self.buro_capacities,
            _ => &[],
        }
    }
}

struct Entry {
    line: usize,
    value: String,
}

/// Parsed lines, keyed by section then key, remembering where each came from.
struct Document {
    sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)>,
}

fn suggest(key: &str) -> Option<&'static str> {
    SECTIONS
        .iter()
        .flat_map(|(_, keys)| keys.iter().copied())
        .map(|k| (strsim::jaro_winkler(key, k), k))
        .filter(|(score, _)| *score >= 0.75)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k)
}

fn parse_document(text: &str) -> Result<Document, ConfigError> {
    let mut sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Syntax {
                    line,
                    message: format!("unterminated section header `{content}`"),
                })?
                .trim();
            if !SECTIONS.iter().any(|(s, _)| *s == name) {
                let known: Vec<&str> = SECTIONS.iter().map(|(s, _)| *s).collect();
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("unknown section [{name}]; sections are {}", known.join(", ")),
                });
            }
            if sections.contains_key(name) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("section [{name}] appears twice"),
                });
            }
            sections.insert(name.to_string(), (line, BTreeMap::new()));
            current = Some(name.to_string());
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected `key = value`, found `{content}`"),
        })?;
        let key = key.trim();
        let Some(section) = &current else {
            return Err(ConfigError::Key {
                line,
                key: key.into(),
                message: "appears before any [section] header".into(),
            });
        };
        let allowed = SECTIONS
            .iter()
            .find(|(s, _)| s == section)
            .map(|(_, keys)| *keys)
            .unwrap_or_default();
        if !allowed.contains(&key) {
            let hint = match suggest(key) {
                Some(k) if allowed.contains(&k) => format!("; did you mean `{k}`?"),
                Some(k) => {
                    let home = SECTIONS.iter().find(|(_, keys)| keys.contains(&k)).map(|(s, _)| *s);
                    format!("; did you mean `{k}` (in [{}])?", home.unwrap_or(""))
                }
                None => String::new(),
            };
            return Err(ConfigError::Key {
                line,
                key: key.into(),
                message: format!("unknown key in [{section}]{hint}"),
            });
        }
        let entries = &mut sections.get_mut(section).expect("section registered").1;
        if entries.contains_key(key) {
            return Err(ConfigError::Key {
                line,
                key: key.into(),
                message: "given more than once".into(),
            });
        }
        entries.insert(
            key.to_string(),
            Entry {
                line,
                value: value.trim().to_string(),
            },
        );
    }
    Ok(Document { sections })
}

impl Document {
    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section).and_then(|(_, e)| e.get(key))
    }

    fn section_line(&self, section: &str) -> usize {
        self.sections.get(section).map_or(0, |(l, _)| *l)
    }

    fn get<T>(
        &self,
        section: &str,
        key: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<T>, ConfigError> {
        let Some(e) = self.entry(section, key) else {
            return Ok(None);
        };
        parse(&e.value).map(Some).map_err(|message| ConfigError::Key {
            line: e.line,
            key: key.into(),
            message,
        })
    }

    fn require<T>(
        &self,
        section: &str,
        key: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, ConfigError> {
        self.get(section, key, parse)?.ok_or_else(|| ConfigError::Key {
            line: self.section_line(section),
            key: key.into(),
            message: format!("missing required key in [{section}]"),
        })
    }

    fn line_of(&self, section: &str, key: &str) -> usize {
        self.entry(section, key)
            .map_or_else(|| self.section_line(section), |e| e.line)
    }
}

fn uint(s: &str) -> Result<usize, String> {
    s.parse().map_err(|_| format!("expected a non-negative integer, found `{s}`"))
}

fn u64_value(s: &str) -> Result<u64, String> {
    s.parse().map_err(|_| format!("expected a non-negative integer, found `{s}`"))
}

fn real(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("expected a finite number, found `{s}`")),
    }
}

fn nonneg(s: &str) -> Result<f64, String> {
    let x = real(s)?;
    if x < 0.0 {
        return Err(format!("must be >= 0, found {x}"));
    }
    Ok(x)
}

fn list<T>(item: impl Fn(&str) -> Result<T, String>) -> impl Fn(&str) -> Result<Vec<T>, String> {
    move |s| {
        let items: Vec<T> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(&item)
            .collect::<Result<_, _>>()?;
        if items.is_empty() {
            return Err("expected at least one value".into());
        }
        Ok(items)
    }
}

fn nonempty(s: &str) -> Result<String, String> {
    if s.is_empty() {
        Err("expected a value".into())
    } else {
        Ok(s.to_string())
    }
}

fn source(s: &str) -> Result<bool, String> {
    match s {
        "synthetic" => Ok(false),
        "file" => Ok(true),
        other => Err(format!("expected `synthetic` or `file`, found `{other}`")),
    }
}

fn method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown method `{s}`; methods are {}", names.join(", "))
    })
}

fn aggregator_kind(s: &str) -> Result<AggregatorKind, String> {
    match s {
        "gated_attention" => Ok(AggregatorKind::GatedAttention),
        "mean" => Ok(AggregatorKind::Mean),
        other => Err(format!("expected `gated_attention` or `mean`, found `{other}`")),
    }
}

fn similarity(s: &str) -> Result<Similarity, String> {
    match s {
        "cosine" => Ok(Similarity::Cosine),
        "dot" => Ok(Similarity::Dot),
        other => Err(format!("expected `cosine` or `dot`, found `{other}`")),
    }
}

fn task_names(s: &str) -> Result<Vec<Vec<String>>, String> {
    list(|task: &str| {
        let names: Vec<String> = task.split('/').map(|n| n.trim().to_string()).collect();
        if names.iter().any(String::is_empty) {
            return Err(format!("empty class name in `{task}`"));
        }
        Ok(names)
    })(s)
}

fn synthetic_from(doc: &Document) -> Result<SyntheticConfig, ConfigError> {
    let mut config = SyntheticConfig::default();
    let spc = doc.get("data", "slides_per_class", uint)?;
    let names = doc.get("data", "tasks", task_names)?;
    let counts = doc.get("data", "class_counts", list(uint))?;
    if names.is_some() && counts.is_some() {
        return Err(ConfigError::Key {
            line: doc.line_of("data", "class_counts"),
            key: "class_counts".into(),
            message: "give either `tasks` or `class_counts`, not both".into(),
        });
    }
    let spc = spc.unwrap_or(config.tasks[0].slides_per_class);
    if let Some(names) = names {
        config.tasks = names
            .into_iter()
            .enumerate()
            .map(|(t, names)| TaskSpec {
                task_index: t,
                class_names: names,
                slides_per_class: spc,
            })
            .collect();
    } else if let Some(counts) = counts {
        config.tasks = SyntheticConfig::with_class_counts(&counts, spc).tasks;
    } else {
        for t in &mut config.tasks {
            t.slides_per_class = spc;
        }
    }
    let fields: [(&str, &mut usize); 3] = [
        ("dim", &mut config.dim),
        ("regions_per_slide", &mut config.regions_per_slide),
        ("patches_per_region", &mut config.patches_per_region),
    ];
    for (key, slot) in fields {
        if let Some(v) = doc.get("data", key, uint)? {
            *slot = v;
        }
    }
    if let Some(v) = doc.get("data", "class_separation", real)? {
        config.class_separation = v;
    }
    if let Some(v) = doc.get("data", "patch_noise_sigma", nonneg)? {
        config.patch_noise_sigma = v;
    }
    if let Some(v) = doc.get("data", "seed", u64_value)? {
        config.seed = v;
    }
    if let Some(v) = doc.get("prototypes", "noise_sigma", nonneg)? {
        config.prototype_noise_sigma = v;
    }
    if let Some(v) = doc.get("prototypes", "variants", uint)? {
        config.prototype_variants = v;
    }
    config.validate().map_err(|e| ConfigError::Syntax {
        line: doc.section_line("data"),
        message: format!("invalid synthetic data: {e}"),
    })?;
    Ok(config)
}

/// Parses and validates configuration text.
pub fn parse_config_str(text: &str) -> Result<RunPlan, ConfigError> {
    let doc = parse_document(text)?;
    let methods = doc.require("run", "methods", list(method))?;
    let mut unique = Vec::new();
    for m in methods {
        if unique.contains(&m) {
            return Err(ConfigError::Key {
                line: doc.line_of("run", "methods"),
                key: "methods".into(),
                message: format!("method `{}` listed twice", m.as_str()),
            });
        }
        unique.push(m);
    }
    let seeds = doc.require("run", "seeds", list(u64_value))?;
    let mut plan = RunPlan::new(unique, seeds);

    let data_is_file = doc.get("data", "source", source)?.unwrap_or(false);
    if data_is_file {
        for key in SECTIONS[0].1.iter().filter(|k| !matches!(**k, "source" | "path")) {
            if doc.entry("data", key).is_some() {
                return Err(ConfigError::Key {
                    line: doc.line_of("data", key),
                    key: (*key).into(),
                    message: "only applies to synthetic data".into(),
                });
            }
        }
        plan.data = DataSource::File(doc.require("data", "path", nonempty)?.into());
    } else {
        if doc.entry("data", "path").is_some() {
            return Err(ConfigError::Key {
                line: doc.line_of("data", "path"),
                key: "path".into(),
                message: "only applies when source = file".into(),
            });
        }
        plan.data = DataSource::Synthetic(synthetic_from(&doc)?);
    }
    let protos_are_file = doc.get("prototypes", "source", source)?.unwrap_or(false);
    if protos_are_file {
        plan.prototypes = PrototypeSource::File(doc.require("prototypes", "path", nonempty)?.into());
    } else if data_is_file && plan.methods.contains(&Method::ZeroSlide) {
        return Err(ConfigError::Key {
            line: doc.line_of("prototypes", "source"),
            key: "source".into(),
            message: "synthetic prototypes need synthetic data; give a prototype file".into(),
        });
    }
    if data_is_file || protos_are_file {
        for key in ["noise_sigma", "variants"] {
            if doc.entry("prototypes", key).is_some() {
                return Err(ConfigError::Key {
                    line: doc.line_of("prototypes", key),
                    key: key.into(),
                    message: "only applies to synthetic prototypes over synthetic data".into(),
                });
            }
        }
    }
    if !protos_are_file && doc.entry("prototypes", "path").is_some() {
        return Err(ConfigError::Key {
            line: doc.line_of("prototypes", "path"),
            key: "path".into(),
            message: "only applies when source = file".into(),
        });
    }

    if let Some(v) = doc.get("run", "n_folds", uint)? {
        if v == 0 {
            return Err(ConfigError::Key {
                line: doc.line_of("run", "n_folds"),
                key: "n_folds".into(),
                message: "must be >= 1".into(),
            });
        }
        plan.n_folds = v;
    }
    if let Some(v) = doc.get("run", "epochs", uint)? {
        plan.epochs = v;
    }
    if let Some(v) = doc.get("run", "learning_rate", real)? {
        if v <= 0.0 {
            return Err(ConfigError::Key {
                line: doc.line_of("run", "learning_rate"),
                key: "learning_rate".into(),
                message: format!("must be > 0, found {v}"),
            });
        }
        plan.learning_rate = v;
    }
    if let Some(v) = doc.get("run", "aggregator", aggregator_kind)? {
        plan.aggregator = v;
    }
    if let Some(v) = doc.get("run", "similarity", similarity)? {
        plan.similarity = v;
    }
    if let Some(v) = doc.get("run", "output_dir", nonempty)? {
        plan.output_dir = v.into();
    }
    if let Some(v) = doc.get("ewc", "lambda", nonneg)? {
        plan.ewc_lambda = v;
    }
    if let Some(v) = doc.get("derpp", "alpha", nonneg)? {
        plan.derpp_alpha = v;
    }
    if let Some(v) = doc.get("derpp", "beta", nonneg)? {
        plan.derpp_beta = v;
    }
    if let Some(v) = doc.get("buro", "replay_weight", nonneg)? {
        plan.buro_replay_weight = v;
    }
    plan.buro_regions_per_bag = doc.get("buro", "regions_per_bag", uint)?;
    if plan.buro_regions_per_bag == Some(0) {
        return Err(ConfigError::Key {
            line: doc.line_of("buro", "regions_per_bag"),
            key: "regions_per_bag".into(),
            message: "must be >= 1".into(),
        });
    }
    for (section, m) in [("derpp", Method::Derpp), ("buro", Method::Buro)] {
        let caps = doc.get(section, "buffer_capacity", list(uint))?;
        let caps = match (plan.methods.contains(&m), caps) {
            (true, None) => {
                return Err(ConfigError::Key {
                    line: doc
                        .sections
                        .get(section)
                        .map_or_else(|| doc.line_of("run", "methods"), |(l, _)| *l),
                    key: "buffer_capacity".into(),
                    message: format!("missing required key in [{section}] for method `{}`", m.as_str()),
                })
            }
            (_, caps) => caps.unwrap_or_default(),
        };
        let mut sorted = caps.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != caps.len() {
            return Err(ConfigError::Key {
                line: doc.line_of(section, "buffer_capacity"),
                key: "buffer_capacity".into(),
                message: "capacities must be distinct".into(),
            });
        }
        match m {
            Method::Derpp => plan.derpp_capacities = caps,
            _ => plan.buro_capacities = caps,
        }
    }
    Ok(plan)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunPlan, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text)
}

fn join<T: std::fmt::Display>(items: &[T], sep: &str) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

/// Canonical text for `plan`, listing every setting explicitly.
pub fn normalized_config(plan: &RunPlan) -> String {
    let mut out = String::new();
    out.push_str("[data]\n");
    match &plan.data {
        DataSource::File(path) => {
            out.push_str("source = file\n");
            let _ = writeln!(out, "path = {}", path.display());
        }
        DataSource::Synthetic(c) => {
            out.push_str("source = synthetic\n");
            let tasks: Vec<String> = c.tasks.iter().map(|t| t.class_names.join("/")).collect();
            let _ = writeln!(out, "tasks = {}", tasks.join(", "));
            let _ = writeln!(out, "slides_per_class = {}", c.tasks[0].slides_per_class);
            let _ = writeln!(out, "dim = {}", c.dim);
            let _ = writeln!(out, "regions_per_slide = {}", c.regions_per_slide);
            let _ = writeln!(out, "patches_per_region = {}", c.patches_per_region);
            let _ = writeln!(out, "class_separation = {}", c.class_separation);
            let _ = writeln!(out, "patch_noise_sigma = {}", c.patch_noise_sigma);
            let _ = writeln!(out, "seed = {}", c.seed);
        }
    }
    out.push_str("\n[prototypes]\n");
    match (&plan.prototypes, &plan.data) {
        (PrototypeSource::File(path), _) => {
            out.push_str("source = file\n");
            let _ = writeln!(out, "path = {}", path.display());
        }
        (PrototypeSource::Synthetic, DataSource::Synthetic(c)) => {
            out.push_str("source = synthetic\n");
            let _ = writeln!(out, "noise_sigma = {}", c.prototype_noise_sigma);
            let _ = writeln!(out, "variants = {}", c.prototype_variants);
        }
        (PrototypeSource::Synthetic, DataSource::File(_)) => out.push_str("source = synthetic\n"),
    }
    out.push_str("\n[run]\n");
    let methods: Vec<&str> = plan.methods.iter().map(|m| m.as_str()).collect();
    let _ = writeln!(out, "methods = {}", methods.join(", "));
    let _ = writeln!(out, "seeds = {}", join(&plan.seeds, ", "));
    let _ = writeln!(out, "n_folds = {}", plan.n_folds);
    let _ = writeln!(out, "epochs = {}", plan.epochs);
    let _ = writeln!(out, "learning_rate = {}", plan.learning_rate);
    let kind = match plan.aggregator {
        AggregatorKind::GatedAttention => "gated_attention",
        AggregatorKind::Mean => "mean",
    };
    let _ = writeln!(out, "aggregator = {kind}");
    let sim = match plan.similarity {
        Similarity::Cosine => "cosine",
        Similarity::Dot => "dot",
    };
    let _ = writeln!(out, "similarity = {sim}");
    let _ = writeln!(out, "output_dir = {}", plan.output_dir.display());
    let _ = writeln!(out, "\n[ewc]\nlambda = {}", plan.ewc_lambda);
    out.push_str("\n[derpp]\n");
    if !plan.derpp_capacities.is_empty() {
        let _ = writeln!(out, "buffer_capacity = {}", join(&plan.derpp_capacities, ", "));
    }
    let _ = writeln!(out, "alpha = {}\nbeta = {}", plan.derpp_alpha, plan.derpp_beta);
    out.push_str("\n[buro]\n");
    if !plan.buro_capacities.is_empty() {
        let _ = writeln!(out, "buffer_capacity = {}", join(&plan.buro_capacities, ", "));
    }
    let _ = writeln!(out, "replay_weight = {}", plan.buro_replay_weight);
    if let Some(r) = plan.buro_regions_per_bag {
        let _ = writeln!(out, "regions_per_bag = {r}");
    }
    out
}
