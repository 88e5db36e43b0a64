//! Run configuration and the extract / train / score / evaluate / report
//! pipeline.
//!
//! Work directory layout:
//!
//! ```text
//! features/<type>/<split>/<file stem>.{dense,mel}.ssfc
//! models/<type>/<family>.ckpt, models/<type>/<family>_history.csv
//! scores/<family>/anomaly_score_<type>_id_<id>.csv
//! reports/<family>_results.csv, reports/mixed_selection.csv
//! reports/<family>_report.{md,csv}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{load_wav, AudioError};
use crate::dataset::{scan_dataset, DatasetError, DatasetIndex, FileEntry, Split};
use crate::eval::{
    evaluate, parse_report_csv, read_score_csv, render_csv, render_markdown, select_mixed, write_score_csv,
    EvalError, MachineReport, ReferenceTable, ScoreRecord, Scorer, score_csv_name,
};
use crate::features::{cache, dense_feature_vectors, log_mel_spectrogram, FeatureError};
use crate::model::{ModelCheckpoint, ModelError, ModelFamily};
use crate::trainer::{train, FileInput, TrainConfig, TrainError};

/// Environment variable naming the default work directory.
pub const WORKDIR_ENV: &str = "SOUNDSIEVE_WORKDIR";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing {stage} artifact: {path}")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Process exit status: 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Train(TrainError::InvalidConfig(_)) => 1,
            PipelineError::Train(TrainError::NonFiniteLoss { .. }) | PipelineError::Eval(EvalError::NonFiniteScore(_)) => 3,
            _ => 2,
        }
    }

    /// The stage whose output is missing, if that is the failure.
    pub fn missing_stage(&self) -> Option<&'static str> {
        match self {
            PipelineError::MissingArtifact { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum)]
pub enum RunFamily {
    Dense,
    Conv,
    Mixed,
}

impl RunFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            RunFamily::Dense => "dense",
            RunFamily::Conv => "conv",
            RunFamily::Mixed => "mixed",
        }
    }

    /// Model families trained and scored.
    pub fn families(self) -> &'static [ModelFamily] {
        match self {
            RunFamily::Dense => &[ModelFamily::Dense],
            RunFamily::Conv => &[ModelFamily::Conv],
            RunFamily::Mixed => &[ModelFamily::Dense, ModelFamily::Conv],
        }
    }
}

impl fmt::Display for RunFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunFamily {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(RunFamily::Dense),
            "conv" => Ok(RunFamily::Conv),
            "mixed" => Ok(RunFamily::Mixed),
            other => Err(PipelineError::Config(format!("unknown family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum)]
pub enum Command {
    Extract,
    Train,
    Score,
    Evaluate,
    Report,
}

impl Command {
    pub const ALL: [Command; 5] = [Command::Extract, Command::Train, Command::Score, Command::Evaluate, Command::Report];
}

/// Training options shared by every model of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    /// `None` uses the family default.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::new(ModelFamily::Dense, 0);
        Self {
            lr: d.lr,
            batch_size: None,
            max_epochs: d.max_epochs,
            patience: d.patience,
            val_fraction: d.val_fraction,
            seed: d.seed,
        }
    }
}

impl TrainSettings {
    pub fn for_family(&self, family: ModelFamily) -> TrainConfig {
        let mut c = TrainConfig::new(family, self.seed);
        c.lr = self.lr;
        if let Some(b) = self.batch_size {
            c.batch_size = b;
        }
        c.max_epochs = self.max_epochs;
        c.patience = self.patience;
        c.val_fraction = self.val_fraction;
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub work_dir: PathBuf,
    /// Empty means every type found under the dataset root.
    pub machine_types: Vec<String>,
    pub family: RunFamily,
    pub train: TrainSettings,
    pub threads: usize,
    /// Reference results for the report; `None` uses the bundled table.
    pub baseline_table: Option<PathBuf>,
}

/// Values given on the command line; each one overrides the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub dataset_root: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
    pub family: Option<RunFamily>,
    pub machine_types: Vec<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value
        .parse()
        .map_err(|_| PipelineError::Config(format!("invalid value '{value}' for '{key}'")))
}

impl RunConfig {
    /// Builds a config from `key = value` text, then `overrides`, then the
    /// environment default for the work directory.
    pub fn from_sources(
        file_text: Option<&str>,
        overrides: &Overrides,
        env_work_dir: Option<PathBuf>,
    ) -> Result<Self, PipelineError> {
        let mut dataset_root = None;
        let mut work_dir = None;
        let mut machine_types = Vec::new();
        let mut family = RunFamily::Dense;
        let mut train = TrainSettings::default();
        let mut threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut baseline_table = None;

        let mut seen = HashMap::new();
        for (n, raw) in file_text.unwrap_or("").lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", n + 1)))?;
            if seen.insert(key.to_string(), n).is_some() {
                return Err(PipelineError::Config(format!("line {}: '{key}' set twice", n + 1)));
            }
            match key {
                "dataset_root" => dataset_root = Some(PathBuf::from(value)),
                "work_dir" => work_dir = Some(PathBuf::from(value)),
                "machine_types" => {
                    machine_types = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
                }
                "family" => family = value.parse()?,
                "lr" => train.lr = parse_value(key, value)?,
                "batch_size" => train.batch_size = Some(parse_value(key, value)?),
                "max_epochs" => train.max_epochs = parse_value(key, value)?,
                "patience" => train.patience = parse_value(key, value)?,
                "val_fraction" => train.val_fraction = parse_value(key, value)?,
                "seed" => train.seed = parse_value(key, value)?,
                "threads" => threads = parse_value(key, value)?,
                "baseline_table" => baseline_table = Some(PathBuf::from(value)),
                other => return Err(PipelineError::Config(format!("line {}: unknown key '{other}'", n + 1))),
            }
        }

        if let Some(p) = &overrides.dataset_root {
            dataset_root = Some(p.clone());
        }
        if let Some(p) = &overrides.work_dir {
            work_dir = Some(p.clone());
        }
        if let Some(f) = overrides.family {
            family = f;
        }
        if !overrides.machine_types.is_empty() {
            machine_types = overrides.machine_types.clone();
        }
        if let Some(s) = overrides.seed {
            train.seed = s;
        }
        if let Some(t) = overrides.threads {
            threads = t;
        }

        let config = Self {
            dataset_root: dataset_root.ok_or_else(|| PipelineError::Config("dataset_root is not set".into()))?,
            work_dir: work_dir
                .or(env_work_dir)
                .ok_or_else(|| PipelineError::Config(format!("work_dir is not set and {WORKDIR_ENV} is empty")))?,
            machine_types,
            family,
            train,
            threads,
            baseline_table,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.threads == 0 {
            return Err(PipelineError::Config("threads must be at least 1".into()));
        }
        for &f in self.family.families() {
            self.train.for_family(f).validate()?;
        }
        Ok(())
    }
}

/// `soundsieve` command line.
#[derive(Debug, Parser)]
#[command(name = "soundsieve", version, about = "Autoencoder anomalous sound detection")]
pub struct Cli {
    #[command(subcommand)]
    pub action: Action,
}

#[derive(Debug, Subcommand)]
pub enum Action {
    /// Compute and cache features for every file.
    Extract(StageArgs),
    /// Train one model per machine type and family.
    Train(StageArgs),
    /// Write per-machine anomaly score CSVs for the test files.
    Score(StageArgs),
    /// Compute AUC and pAUC from the score CSVs.
    Evaluate(StageArgs),
    /// Render the results table with the reference columns.
    Report(StageArgs),
    /// Run all five stages in order.
    All(StageArgs),
    /// Write a synthetic miniature corpus.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2020)]
        seed: u64,
        /// Normal training clips per machine.
        #[arg(long, default_value_t = 60)]
        train: usize,
        /// Normal and anomalous test clips per machine (each).
        #[arg(long, default_value_t = 20)]
        test: usize,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct StageArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub family: Option<RunFamily>,
    /// Repeat to select several types.
    #[arg(long = "machine-type")]
    pub machine_types: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl StageArgs {
    pub fn load_config(&self) -> Result<RunConfig, PipelineError> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?),
            None => None,
        };
        let overrides = Overrides {
            dataset_root: self.dataset_root.clone(),
            work_dir: self.work_dir.clone(),
            family: self.family,
            machine_types: self.machine_types.clone(),
            seed: self.seed,
            threads: self.threads,
        };
        let env = std::env::var_os(WORKDIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        RunConfig::from_sources(text.as_deref(), &overrides, env)
    }
}

/// Where each artifact of a run lives.
#[derive(Debug, Clone)]
pub struct Layout {
    pub work_dir: PathBuf,
}

impl Layout {
    pub fn cache_path(&self, machine_type: &str, split: Split, file: &FileEntry, family: ModelFamily) -> PathBuf {
        let stem = file.name.rsplit_once('.').map_or(file.name.as_str(), |(s, _)| s);
        let kind = match family {
            ModelFamily::Dense => "dense",
            ModelFamily::Conv => "mel",
        };
        self.work_dir
            .join("features")
            .join(machine_type)
            .join(split.as_str())
            .join(format!("{stem}.{kind}.ssfc"))
    }

    pub fn checkpoint_path(&self, machine_type: &str, family: ModelFamily) -> PathBuf {
        self.work_dir.join("models").join(machine_type).join(format!("{family}.ckpt"))
    }

    pub fn history_path(&self, machine_type: &str, family: ModelFamily) -> PathBuf {
        self.work_dir.join("models").join(machine_type).join(format!("{family}_history.csv"))
    }

    pub fn score_dir(&self, family: ModelFamily) -> PathBuf {
        self.work_dir.join("scores").join(family.as_str())
    }

    pub fn results_path(&self, family: RunFamily) -> PathBuf {
        self.work_dir.join("reports").join(format!("{family}_results.csv"))
    }

    pub fn selection_path(&self) -> PathBuf {
        self.work_dir.join("reports").join("mixed_selection.csv")
    }

    pub fn report_path(&self, family: RunFamily, ext: &str) -> PathBuf {
        self.work_dir.join("reports").join(format!("{family}_report.{ext}"))
    }
}

/// Files written by one stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageOutput {
    pub artifacts: Vec<PathBuf>,
    /// Results of `evaluate` for the run family.
    pub report: Option<MachineReport>,
}

fn require(stage: &'static str, path: &Path) -> Result<(), PipelineError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            stage,
            path: path.to_path_buf(),
        })
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<PathBuf, PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

struct Run<'a> {
    config: &'a RunConfig,
    index: DatasetIndex,
    types: Vec<String>,
    layout: Layout,
}

impl<'a> Run<'a> {
    fn open(config: &'a RunConfig) -> Result<Self, PipelineError> {
        if !config.dataset_root.is_dir() {
            return Err(PipelineError::Config(format!(
                "dataset root {} does not exist",
                config.dataset_root.display()
            )));
        }
        let index = scan_dataset(&config.dataset_root)?;
        let types: Vec<String> = if config.machine_types.is_empty() {
            index.machine_types().map(String::from).collect()
        } else {
            config.machine_types.clone()
        };
        if types.is_empty() {
            return Err(PipelineError::Config("no machine types to process".into()));
        }
        for t in &types {
            if index.machines(t).is_none() {
                return Err(DatasetError::MissingDirectory(config.dataset_root.join(t)).into());
            }
        }
        fs::create_dir_all(&config.work_dir).map_err(io_err(&config.work_dir))?;
        Ok(Self {
            config,
            index,
            types,
            layout: Layout {
                work_dir: config.work_dir.clone(),
            },
        })
    }

    fn load_input(&self, machine_type: &str, split: Split, file: &FileEntry, family: ModelFamily) -> Result<FileInput, PipelineError> {
        let path = self.layout.cache_path(machine_type, split, file, family);
        require("extract", &path)?;
        Ok(match cache::read(&path)? {
            cache::CachedFeatures::Features(set) => FileInput::Dense(set),
            cache::CachedFeatures::Spectrogram(spec) => FileInput::Spectrogram(spec),
        })
    }

    fn extract(&self) -> Result<StageOutput, PipelineError> {
        let mut jobs = Vec::new();
        for t in &self.types {
            for split in [Split::Train, Split::Test] {
                for (_, f) in self.index.files(t, split) {
                    jobs.push((t.as_str(), split, f));
                }
            }
        }
        let families = self.config.family.families();
        let written: Vec<Vec<PathBuf>> = jobs
            .par_iter()
            .map(|&(t, split, f)| {
                let clip = load_wav(&f.path)?;
                families
                    .iter()
                    .map(|&family| {
                        let features = match family {
                            ModelFamily::Dense => cache::CachedFeatures::Features(dense_feature_vectors(&clip)?),
                            ModelFamily::Conv => cache::CachedFeatures::Spectrogram(log_mel_spectrogram(&clip)?),
                        };
                        let path = self.layout.cache_path(t, split, f, family);
                        write_file(&path, &cache::encode(&features))
                    })
                    .collect::<Result<Vec<_>, PipelineError>>()
            })
            .collect::<Result<_, _>>()?;
        log::info!("extracted features for {} files", jobs.len());
        Ok(StageOutput {
            artifacts: written.into_iter().flatten().collect(),
            report: None,
        })
    }

    fn train(&self) -> Result<StageOutput, PipelineError> {
        let mut artifacts = Vec::new();
        for t in &self.types {
            for &family in self.config.family.families() {
                let inputs = self
                    .index
                    .files(t, Split::Train)
                    .into_iter()
                    .map(|(_, f)| self.load_input(t, Split::Train, f, family))
                    .collect::<Result<Vec<_>, _>>()?;
                let config = self.config.train.for_family(family);
                log::info!("training {family} model for {t} on {} files", inputs.len());
                let outcome = train(&inputs, &config, t)?;
                log::info!(
                    "{t}/{family}: best val loss {:.6} at epoch {}, stopped at {}",
                    outcome.history.best_val_loss().unwrap_or(f64::NAN),
                    outcome.history.best_epoch,
                    outcome.history.stopped_epoch
                );
                let ckpt = self.layout.checkpoint_path(t, family);
                artifacts.push(write_file(&ckpt, &outcome.checkpoint.encode())?);
                let hist = self.layout.history_path(t, family);
                artifacts.push(write_file(&hist, outcome.history.to_csv().as_bytes())?);
            }
        }
        Ok(StageOutput {
            artifacts,
            report: None,
        })
    }

    fn score(&self) -> Result<StageOutput, PipelineError> {
        let mut artifacts = Vec::new();
        for t in &self.types {
            for &family in self.config.family.families() {
                let ckpt_path = self.layout.checkpoint_path(t, family);
                require("train", &ckpt_path)?;
                let scorer = Scorer::from_checkpoint(&ModelCheckpoint::load(&ckpt_path)?)?;
                let files = self.index.files(t, Split::Test);
                let scores: Vec<f64> = files
                    .par_iter()
                    .map(|&(_, f)| {
                        let input = self.load_input(t, Split::Test, f, family)?;
                        Ok(scorer.score_input(&input, &f.name)?)
                    })
                    .collect::<Result<_, PipelineError>>()?;
                let mut per_id: BTreeMap<&str, Vec<(String, f64)>> = BTreeMap::new();
                for ((id, f), s) in files.iter().zip(scores) {
                    per_id.entry(id).or_default().push((f.name.clone(), s));
                }
                for (id, rows) in per_id {
                    artifacts.push(write_score_csv(&self.layout.score_dir(family), t, id, &rows)?);
                }
            }
        }
        Ok(StageOutput {
            artifacts,
            report: None,
        })
    }

    fn family_report(&self, family: ModelFamily) -> Result<MachineReport, PipelineError> {
        let mut records = Vec::new();
        for t in &self.types {
            for (id, machine) in self.index.machines(t).into_iter().flatten() {
                if machine.test.is_empty() {
                    continue;
                }
                let path = self.layout.score_dir(family).join(score_csv_name(t, id));
                require("score", &path)?;
                let labels: HashMap<&str, _> = machine.test.iter().map(|f| (f.name.as_str(), f.label)).collect();
                for (name, score) in read_score_csv(&path)? {
                    let label = *labels.get(name.as_str()).ok_or_else(|| EvalError::Malformed {
                        what: path.display().to_string(),
                        detail: format!("'{name}' is not a test file of {t} id {id}"),
                    })?;
                    records.push(ScoreRecord {
                        file_id: name,
                        machine_type: t.clone(),
                        machine_id: id.clone(),
                        label,
                        score,
                    });
                }
            }
        }
        Ok(evaluate(&records, family)?)
    }

    fn evaluate(&self) -> Result<StageOutput, PipelineError> {
        let mut artifacts = Vec::new();
        let mut reports = BTreeMap::new();
        for &family in self.config.family.families() {
            let report = self.family_report(family)?;
            let path = self.layout.results_path(match family {
                ModelFamily::Dense => RunFamily::Dense,
                ModelFamily::Conv => RunFamily::Conv,
            });
            artifacts.push(write_file(&path, render_csv(&report, None).as_bytes())?);
            reports.insert(family, report);
        }
        let report = if self.config.family == RunFamily::Mixed {
            let (dense, conv) = (&reports[&ModelFamily::Dense], &reports[&ModelFamily::Conv]);
            let choice = select_mixed(dense, conv)?;
            let mut selection = String::from("machine_type,family\n");
            let mut types = Vec::new();
            for (t, family) in &choice {
                selection.push_str(&format!("{t},{family}\n"));
                let chosen = if *family == ModelFamily::Conv { conv } else { dense };
                types.push(chosen.get(t).expect("selected from this report").clone());
            }
            artifacts.push(write_file(&self.layout.selection_path(), selection.as_bytes())?);
            let mixed = MachineReport { types };
            artifacts.push(write_file(
                &self.layout.results_path(RunFamily::Mixed),
                render_csv(&mixed, None).as_bytes(),
            )?);
            mixed
        } else {
            reports.into_values().next().expect("one family evaluated")
        };
        for t in &report.types {
            log::info!("{} ({}): AUC {:.2} pAUC {:.2}", t.machine_type, t.family, t.mean.auc, t.mean.p_auc);
        }
        Ok(StageOutput {
            artifacts,
            report: Some(report),
        })
    }

    fn report(&self) -> Result<StageOutput, PipelineError> {
        let results = self.layout.results_path(self.config.family);
        require("evaluate", &results)?;
        let report = parse_report_csv(&fs::read_to_string(&results).map_err(io_err(&results))?)?;
        let table = match &self.config.baseline_table {
            Some(p) => ReferenceTable::load(p)?,
            None => ReferenceTable::bundled(),
        };
        let reference = table.system_index("baseline").map(|i| (&table, i));
        let md = render_markdown(&report, reference);
        let csv = render_csv(&report, reference);
        let artifacts = vec![
            write_file(&self.layout.report_path(self.config.family, "md"), md.as_bytes())?,
            write_file(&self.layout.report_path(self.config.family, "csv"), csv.as_bytes())?,
        ];
        Ok(StageOutput {
            artifacts,
            report: Some(report),
        })
    }
}

/// Runs one stage inside a worker pool of `config.threads` threads.
pub fn run_pipeline(config: &RunConfig, command: Command) -> Result<StageOutput, PipelineError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let run = Run::open(config)?;
        log::info!("{command:?}: {} machine types, family {}", run.types.len(), config.family);
        match command {
            Command::Extract => run.extract(),
            Command::Train => run.train(),
            Command::Score => run.score(),
            Command::Evaluate => run.evaluate(),
            Command::Report => run.report(),
        }
    })
}
