//! Command-line front end: a TOML run config, dotted-path overrides, and the
//! `train`, `eval`, `analyze`, `prepare` and `selftest` commands.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{attention_heatmaps, semantic_distance_report, HausdorffMode, NameSource};
use crate::benchmark::{benchmark_encoder, pretrain_teacher, PretrainConfig};
use crate::datasets::{
    class_counts, fetch_descriptions, generate_toy_dataset, make_base_novel_split, sample_few_shot, ClassVocabulary,
    Dataset, DescriptionCache, SampleMode, TemplateProvider, ToySpec, VocabSplit, DESCRIPTIONS_FILE, VOCAB_FILE,
};
use crate::encoders::checkpoint::{write_atomic, Checkpoint};
use crate::encoders::{DualEncoder, EncoderConfig};
use crate::evaluator::{evaluate_base_to_novel, evaluate_cross_dataset, BaseToNovelRun, EvalConfig, Protocol};
use crate::trainer::{average_checkpoints, train_run, TrainConfig, TrainData};

/// Environment variable that sets the default output directory.
pub const OUT_DIR_ENV: &str = "RDISTILL_OUT_DIR";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const SPLIT_FILE: &str = "split.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const DISTANCE_REPORT: &str = "distance_report.json";
pub const DISTANCE_TEXT: &str = "distance_report.txt";
pub const ATTENTION_DIR: &str = "attention";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(crate::Error),
    #[error("{0} self-test check(s) failed")]
    Acceptance(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Acceptance(_) => 3,
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory used for training, base-to-novel evaluation and analysis.
    pub dataset: Option<PathBuf>,
    /// Target dataset directory for cross-dataset evaluation.
    pub target_dataset: Option<PathBuf>,
    /// Frozen teacher checkpoint.
    pub teacher: Option<PathBuf>,
    /// Checkpoints to evaluate; more than one are weight-averaged first.
    pub checkpoints: Vec<PathBuf>,
    /// Frozen checkpoint whose logits are added to the evaluated model's.
    pub ensemble_with: Option<PathBuf>,
    /// Base/novel split file (one split or a list of splits).
    pub split: Option<PathBuf>,
    /// Description cache; defaults to `descriptions.jsonl` in the dataset directory.
    pub cache: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: None,
            target_dataset: None,
            teacher: None,
            checkpoints: Vec::new(),
            ensemble_with: None,
            split: None,
            cache: None,
            out_dir: std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataOptions {
    /// Clips per base class for training; all clips when unset.
    pub few_shot: Option<usize>,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self { few_shot: Some(16) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeMode {
    #[default]
    Distance,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeOptions {
    pub mode: AnalyzeMode,
    pub hausdorff: HausdorffMode,
    pub names: NameSource,
    /// Dataset directories (or `vocab.json` files) compared against `paths.dataset`.
    pub vocabularies: Vec<PathBuf>,
    /// Test clip to visualize; the first test clip when unset.
    pub clip: Option<String>,
    pub frames: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            mode: AnalyzeMode::Distance,
            hausdorff: HausdorffMode::default(),
            names: NameSource::default(),
            vocabularies: Vec::new(),
            clip: None,
            frames: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PrepareMode {
    #[default]
    ToyData,
    Descriptions,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareOptions {
    pub mode: PrepareMode,
    /// Never contact the description provider; uncached classes are an error.
    pub offline: bool,
    pub provider_template: String,
    pub toy: ToySpec,
    pub pretrain: PretrainConfig,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            mode: PrepareMode::ToyData,
            offline: false,
            provider_template: TemplateProvider::default().template,
            toy: ToySpec::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Everything a command needs. Precedence: command-line flags, then the
/// config file, then these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for the base/novel split and few-shot selection.
    pub seed: u64,
    pub protocol: Protocol,
    pub paths: Paths,
    pub data: DataOptions,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analyze: AnalyzeOptions,
    pub prepare: PrepareOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            protocol: Protocol::BaseToNovel,
            paths: Paths::default(),
            data: DataOptions::default(),
            encoder: benchmark_encoder(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            analyze: AnalyzeOptions::default(),
            prepare: PrepareOptions::default(),
        }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies a `dotted.path=value` override to a TOML table.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{assignment}' is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override '{assignment}' has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("nonempty");
    let mut table = root;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override '{path}': '{k}' is not a table")))?;
    }
    table.insert(last.to_string(), parse_literal(value.trim()));
    Ok(())
}

fn merge_into(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_into(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Reads the config file (if any), applies overrides in order and validates.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut table = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    // Layer everything over the serialized defaults so a partial nested table
    // keeps the defaults of its parent section rather than of its own type.
    let mut merged = toml::Table::try_from(RunConfig::default())
        .map_err(|e| CliError::Config(format!("cannot serialize defaults: {e}")))?;
    merge_into(&mut merged, table);
    let config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config(format!("{path}: {}", inner.message()))
    })?;
    config.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
    config.eval.validate().map_err(|e| CliError::Config(format!("eval: {e}")))?;
    config.encoder.validate().map_err(|e| CliError::Config(format!("encoder: {e}")))?;
    Ok(config)
}

impl RunConfig {
    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// Writes the resolved config into the output directory.
    pub fn write_snapshot(&self) -> CliResult<PathBuf> {
        let dir = &self.paths.out_dir;
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(crate::Error::io(dir, e)))?;
        let path = dir.join(RESOLVED_CONFIG);
        write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }
}

fn required<'a>(value: &'a Option<PathBuf>, field: &str) -> CliResult<&'a Path> {
    let p = value
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("{field} is required")))?;
    if !p.exists() {
        return Err(CliError::Config(format!("{field}: {} does not exist", p.display())));
    }
    Ok(p)
}

fn existing(path: &Path, field: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{field}: {} does not exist", path.display())))
    }
}

fn load_model(path: &Path) -> CliResult<DualEncoder> {
    Ok(DualEncoder::from_checkpoint(&Checkpoint::load(path)?)?)
}

/// Loads one split or a JSON list of splits.
pub fn read_splits(path: &Path) -> CliResult<Vec<VocabSplit>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(crate::Error::io(path, e)))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(crate::Error::from)?;
    let splits = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|s| vec![s])
    }
    .map_err(crate::Error::from)?;
    Ok(splits)
}

pub fn cmd_train(config: &RunConfig) -> CliResult<PathBuf> {
    let dataset_dir = required(&config.paths.dataset, "paths.dataset")?;
    let teacher_path = required(&config.paths.teacher, "paths.teacher")?;
    if let Some(s) = &config.paths.split {
        existing(s, "paths.split")?;
    }
    config.write_snapshot()?;

    let dataset = Dataset::load(dataset_dir)?;
    let teacher = load_model(teacher_path)?.into_teacher();
    let split = match &config.paths.split {
        Some(p) => read_splits(p)?
            .into_iter()
            .next()
            .ok_or_else(|| CliError::Config("paths.split holds no splits".into()))?,
        None => make_base_novel_split(&dataset.vocab, &class_counts(&dataset.train), config.seed)?,
    };
    split.validate(&dataset.vocab)?;
    let out = &config.paths.out_dir;
    write_atomic(&out.join(SPLIT_FILE), serde_json::to_string_pretty(&split).map_err(crate::Error::from)?.as_bytes())?;

    let manifest = match config.data.few_shot {
        Some(k) => sample_few_shot(&dataset.train, &split.base, k, config.seed).value,
        None => Dataset::restrict(&dataset.train, &split.base),
    };
    let data = TrainData {
        manifest,
        vocab: dataset.vocab.subset(&split.base)?,
        loader: dataset.loader(),
    };
    let student = DualEncoder::student_from(&teacher)?;
    let outcome = train_run(&config.train, Some(&teacher), student, &data, out)?;
    let last = outcome.checkpoints.last().expect("at least one epoch");
    println!(
        "trained {} epochs ({} steps); final ce {:.4}; checkpoints in {}",
        last.epoch,
        last.global_step,
        last.metrics.get("ce").copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(out.join(crate::trainer::FINAL_CHECKPOINT))
}

pub fn cmd_eval(config: &RunConfig) -> CliResult<PathBuf> {
    if config.paths.checkpoints.is_empty() {
        return Err(CliError::Config("paths.checkpoints needs at least one checkpoint".into()));
    }
    for p in &config.paths.checkpoints {
        existing(p, "paths.checkpoints")?;
    }
    let dataset_dir = required(&config.paths.dataset, "paths.dataset")?;
    if let Some(p) = &config.paths.ensemble_with {
        existing(p, "paths.ensemble_with")?;
    }
    let split_path = match config.protocol {
        Protocol::BaseToNovel => Some(required(&config.paths.split, "paths.split")?),
        Protocol::CrossDataset => {
            required(&config.paths.target_dataset, "paths.target_dataset")?;
            None
        }
    };
    config.write_snapshot()?;

    let cks = config
        .paths
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<crate::Result<Vec<_>>>()?;
    let model = if cks.len() == 1 {
        DualEncoder::from_checkpoint(&cks[0])?
    } else {
        DualEncoder::from_checkpoint(&average_checkpoints(&cks)?)?
    };
    let frozen = config.paths.ensemble_with.as_deref().map(load_model).transpose()?;
    let mut models = vec![&model];
    models.extend(frozen.as_ref());

    let dataset = Dataset::load(dataset_dir)?;
    let report = match split_path {
        Some(p) => {
            let splits = read_splits(p)?;
            if splits.is_empty() {
                return Err(CliError::Config("paths.split holds no splits".into()));
            }
            let runs: Vec<BaseToNovelRun> = splits
                .iter()
                .map(|s| BaseToNovelRun {
                    name: format!("seed{}", s.seed),
                    models: models.clone(),
                    split: s,
                })
                .collect();
            evaluate_base_to_novel(&runs, &dataset, &config.eval)?
        }
        None => {
            let target = Dataset::load(config.paths.target_dataset.as_deref().expect("checked"))?;
            evaluate_cross_dataset(&models, &dataset.vocab, &target, &config.eval)?
        }
    };
    let path = config.paths.out_dir.join(EVAL_REPORT);
    report.save(&path)?;
    println!("{}", report.summary());
    Ok(path)
}

/// A vocabulary from a dataset directory or a `vocab.json` file, named after
/// the directory.
fn load_vocabulary(path: &Path) -> CliResult<(String, ClassVocabulary)> {
    existing(path, "analyze.vocabularies")?;
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(VOCAB_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let text = fs::read_to_string(&file).map_err(|e| CliError::Runtime(crate::Error::io(&file, e)))?;
    let vocab: ClassVocabulary = serde_json::from_str(&text).map_err(crate::Error::from)?;
    vocab.validate()?;
    let name = dir
        .file_name()
        .map_or_else(|| file.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok((name, vocab))
}

fn analysis_model(config: &RunConfig) -> CliResult<DualEncoder> {
    match config.paths.checkpoints.first() {
        Some(p) => {
            existing(p, "paths.checkpoints")?;
            load_model(p)
        }
        None => load_model(required(&config.paths.teacher, "paths.teacher")?),
    }
}

pub fn cmd_analyze(config: &RunConfig) -> CliResult<PathBuf> {
    let dataset_dir = required(&config.paths.dataset, "paths.dataset")?;
    let opts = &config.analyze;
    let model = analysis_model(config)?;
    let out = &config.paths.out_dir;
    match opts.mode {
        AnalyzeMode::Distance => {
            let train = load_vocabulary(dataset_dir)?;
            let tests = opts
                .vocabularies
                .iter()
                .map(|p| load_vocabulary(p))
                .collect::<CliResult<Vec<_>>>()?;
            if tests.is_empty() {
                return Err(CliError::Config("analyze.vocabularies is empty".into()));
            }
            config.write_snapshot()?;
            let report = semantic_distance_report((&train.0, &train.1), &tests, &model, opts.hausdorff, opts.names)?;
            report.save(&out.join(DISTANCE_REPORT))?;
            write_atomic(&out.join(DISTANCE_TEXT), report.to_text().as_bytes())?;
            print!("{}", report.to_text());
            Ok(out.join(DISTANCE_REPORT))
        }
        AnalyzeMode::Attention => {
            config.write_snapshot()?;
            let dataset = Dataset::load(dataset_dir)?;
            let entry = match &opts.clip {
                Some(id) => dataset
                    .test
                    .iter()
                    .chain(&dataset.train)
                    .find(|e| &e.clip_id == id)
                    .ok_or_else(|| CliError::Config(format!("analyze.clip: no clip '{id}' in the dataset")))?,
                None => dataset
                    .test
                    .first()
                    .ok_or_else(|| CliError::Config("dataset has no test clips".into()))?,
            };
            let video = dataset.loader().load_sampled(entry, opts.frames, SampleMode::centered(), 0)?;
            let dir = out.join(ATTENTION_DIR);
            let h = attention_heatmaps(&model, &video, &entry.clip_id, &dir)?;
            println!("wrote {} heatmaps for clip '{}' to {}", h.frames.len(), h.clip_id, dir.display());
            Ok(dir)
        }
    }
}

pub fn cmd_prepare(config: &RunConfig) -> CliResult<PathBuf> {
    let opts = &config.prepare;
    match opts.mode {
        PrepareMode::ToyData => {
            let dir = config
                .paths
                .dataset
                .as_deref()
                .ok_or_else(|| CliError::Config("paths.dataset is required".into()))?;
            config.write_snapshot()?;
            let ds = generate_toy_dataset(&opts.toy)?;
            ds.save(dir)?;
            println!(
                "wrote {} classes, {} train / {} test clips to {}",
                ds.vocab.len(),
                ds.train.len(),
                ds.test.len(),
                dir.display()
            );
            Ok(dir.to_path_buf())
        }
        PrepareMode::Descriptions => {
            let dataset_dir = required(&config.paths.dataset, "paths.dataset")?;
            let cache_path = config
                .paths
                .cache
                .clone()
                .unwrap_or_else(|| dataset_dir.join(DESCRIPTIONS_FILE));
            config.write_snapshot()?;
            let (_, vocab) = load_vocabulary(dataset_dir)?;
            let cache = DescriptionCache::load(&cache_path)?;
            let mut provider = TemplateProvider::new(&opts.provider_template);
            let updated = if opts.offline {
                fetch_descriptions(None, &vocab.names, &cache, true)?
            } else {
                fetch_descriptions(Some(&mut provider), &vocab.names, &cache, false)?
            };
            if updated != cache {
                updated.save(&cache_path)?;
            }
            println!(
                "{} cached descriptions, {} provider requests; cache at {}",
                updated.len(),
                provider.requests,
                cache_path.display()
            );
            Ok(cache_path)
        }
        PrepareMode::Teacher => {
            let path = config
                .paths
                .teacher
                .as_deref()
                .ok_or_else(|| CliError::Config("paths.teacher is required".into()))?;
            config.write_snapshot()?;
            let teacher = pretrain_teacher(&config.encoder, &opts.toy.render, &opts.pretrain)?;
            let digest = crate::digest::of_json(&(&config.encoder, &opts.toy.render, &opts.pretrain));
            teacher.to_checkpoint(&digest, serde_json::Value::Null).save(path)?;
            println!("wrote teacher {} to {}", teacher.digest(), path.display());
            Ok(path.to_path_buf())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "resdistill", version, about = "Residual feature distillation for open-vocabulary video recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.beta=0`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (`paths.out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fine-tune a student from the frozen teacher on the base classes.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        /// residual | projector | direct
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate checkpoints under the base-to-novel or cross-dataset protocol.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        /// Checkpoint to evaluate; repeat to average several.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Frozen checkpoint to ensemble with by summing logits.
        #[arg(long)]
        ensemble_with: Option<PathBuf>,
    },
    /// Semantic distance between vocabularies, or attention heatmaps.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<AnalyzeMode>,
    },
    /// Generate the toy dataset, fill the description cache, or pretrain a toy teacher.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<PrepareMode>,
        #[arg(long)]
        offline: bool,
    },
    /// Run the fast invariant checks.
    Selftest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    B2n,
    Xds,
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn path_value(p: &Path) -> String {
    quoted(&p.to_string_lossy())
}

/// Turns convenience flags into overrides appended after the generic ones.
fn sugar(command: &Command) -> (Option<&Common>, Vec<String>) {
    let mut o = Vec::new();
    let common = match command {
        Command::Train {
            common,
            beta,
            alpha,
            variant,
            epochs,
        } => {
            if let Some(b) = beta {
                o.push(format!("train.beta={b:?}"));
            }
            if let Some(a) = alpha {
                o.push(format!("train.alpha={a:?}"));
            }
            if let Some(v) = variant {
                o.push(format!("train.variant={}", quoted(v)));
            }
            if let Some(e) = epochs {
                o.push(format!("train.total_epochs={e}"));
            }
            Some(common)
        }
        Command::Eval {
            common,
            protocol,
            checkpoints,
            ensemble_with,
        } => {
            if let Some(p) = protocol {
                let name = match p {
                    ProtocolArg::B2n => "base-to-novel",
                    ProtocolArg::Xds => "cross-dataset",
                };
                o.push(format!("protocol={}", quoted(name)));
            }
            if !checkpoints.is_empty() {
                let list: Vec<String> = checkpoints.iter().map(|p| path_value(p)).collect();
                o.push(format!("paths.checkpoints=[{}]", list.join(", ")));
            }
            if let Some(p) = ensemble_with {
                o.push(format!("paths.ensemble_with={}", path_value(p)));
            }
            Some(common)
        }
        Command::Analyze { common, mode } => {
            if let Some(m) = mode {
                let name = match m {
                    AnalyzeMode::Distance => "distance",
                    AnalyzeMode::Attention => "attention",
                };
                o.push(format!("analyze.mode={}", quoted(name)));
            }
            Some(common)
        }
        Command::Prepare { common, mode, offline } => {
            if let Some(m) = mode {
                let name = match m {
                    PrepareMode::ToyData => "toy-data",
                    PrepareMode::Descriptions => "descriptions",
                    PrepareMode::Teacher => "teacher",
                };
                o.push(format!("prepare.mode={}", quoted(name)));
            }
            if *offline {
                o.push("prepare.offline=true".into());
            }
            Some(common)
        }
        Command::Selftest => None,
    };
    if let Some(c) = common {
        if let Some(out) = &c.out {
            o.push(format!("paths.out_dir={}", path_value(out)));
        }
    }
    (common, o)
}

/// Resolves the config for `command` and runs it.
pub fn run(cli: Cli) -> CliResult<()> {
    let (common, extra) = sugar(&cli.command);
    let Some(common) = common else {
        let results = crate::selftest::run_all();
        let failed = results.iter().filter(|r| !r.passed).count();
        for r in &results {
            println!("{r}");
        }
        return if failed == 0 { Ok(()) } else { Err(CliError::Acceptance(failed)) };
    };
    let overrides: Vec<String> = common.overrides.iter().cloned().chain(extra).collect();
    let config = resolve_config(common.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Train { .. } => cmd_train(&config).map(|_| ()),
        Command::Eval { .. } => cmd_eval(&config).map(|_| ()),
        Command::Analyze { .. } => cmd_analyze(&config).map(|_| ()),
        Command::Prepare { .. } => cmd_prepare(&config).map(|_| ()),
        Command::Selftest => unreachable!("handled above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence_and_parse_literals() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        fs::write(&file, "seed = 4\n[train]\nbeta = 1.0\nalpha = 0.5\n").unwrap();
        let c = resolve_config(
            Some(&file),
            &["train.beta=0".into(), "paths.dataset=data/toy".into(), "eval.views=1".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.beta, 0.0);
        assert_eq!(c.train.alpha, 0.5);
        assert_eq!(c.eval.views, 1);
        assert_eq!(c.paths.dataset, Some(PathBuf::from("data/toy")));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = resolve_config(None, &["train.betta=1".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("betta"), "{e}");
        let e = resolve_config(None, &["train.beta=\"high\"".into()]).unwrap_err();
        assert!(e.to_string().contains("train.beta"), "{e}");
        let c = resolve_config(None, &["prepare.toy.appearance_offset=8".into()]).unwrap();
        assert_eq!(c.prepare.toy.appearance_offset, 8);
        let c = resolve_config(None, &["prepare.pretrain.train.total_epochs=2".into()]).unwrap();
        assert_eq!(c.prepare.pretrain.train.warmup_epochs, PretrainConfig::default().train.warmup_epochs);
        assert!(resolve_config(None, &["nonsense".into()]).is_err());
        assert!(resolve_config(None, &["train.total_epochs=0".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = resolve_config(
            None,
            &[
                format!("paths.out_dir={}", path_value(dir.path())),
                "train.base_lr=3.33e-6".into(),
            ],
        )
        .unwrap();
        let snap = c.write_snapshot().unwrap();
        let again = resolve_config(Some(&snap), &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn missing_dataset_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let c = resolve_config(
            None,
            &[
                format!("paths.out_dir={}", path_value(dir.path())),
                format!("paths.dataset={}", path_value(&dir.path().join("nope"))),
            ],
        )
        .unwrap();
        let e = cmd_train(&c).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("paths.dataset"), "{e}");
    }

    #[test]
    fn beta_flag_reaches_the_snapshot() {
        let cli = Cli::parse_from(["resdistill", "train", "--beta", "0", "--set", "train.beta=5"]);
        let (common, extra) = sugar(&cli.command);
        let overrides: Vec<String> = common.unwrap().overrides.iter().cloned().chain(extra).collect();
        let c = resolve_config(None, &overrides).unwrap();
        assert_eq!(c.train.beta, 0.0);
        assert!(c.to_toml().unwrap().contains("beta = 0.0"));
    }
}
