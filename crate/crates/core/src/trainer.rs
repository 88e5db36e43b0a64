//! Per-machine-type training: file-level validation split, seeded
//! mini-batch Adam on reconstruction MSE, and early stopping on the
//! inference-mode validation loss.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{fit_normalizer, patches_from_spectrogram, FeatureError, FeatureSet, MelSpectrogram, NormalizerStats};
use crate::model::{
    build, reconstruction_error, Architecture, CheckpointMeta, ConvAeSpec, DenseAeSpec, ModelCheckpoint, ModelError,
    ModelFamily, Network,
};

/// Mixed into the seed of the row shuffler so it is not the weight stream.
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least 2 files to train, got {0}")]
    TooFewFiles(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} loss at epoch {epoch}")]
    NonFiniteLoss { what: &'static str, epoch: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub family: ModelFamily,
    /// Network to train; `None` means the standard one for `family`.
    pub arch: Option<Architecture>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(family: ModelFamily, seed: u64) -> Self {
        Self {
            family,
            arch: None,
            lr: 0.001,
            batch_size: match family {
                ModelFamily::Dense => 512,
                ModelFamily::Conv => 64,
            },
            max_epochs: 100,
            patience: 10,
            val_fraction: 0.1,
            seed,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch.clone().unwrap_or_else(|| match self.family {
            ModelFamily::Dense => Architecture::Dense(DenseAeSpec::standard()),
            ModelFamily::Conv => Architecture::Conv(ConvAeSpec::standard()),
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} below 2", self.batch_size));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs is 0".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {}", self.lr));
        }
        if let Some(arch) = &self.arch {
            if arch.family() != self.family {
                return bad(format!("{} architecture for a {} run", arch.family(), self.family));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.val_loss.get(self.best_epoch.checked_sub(1)?).copied()
    }

    /// `epoch,train_loss,val_loss` with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            writeln!(out, "{},{t},{v}", i + 1).expect("write to string");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_csv())
    }
}

/// What [`EarlyStopping::observe`] concluded about an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochVerdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops once the validation loss has failed to strictly decrease for
/// `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> EpochVerdict {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return EpochVerdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            EpochVerdict::Stop
        } else {
            EpochVerdict::NoImprovement
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Seeded file-level split. The validation side gets `round(n · fraction)`
/// items, at least 1 and at most `n - 1`; both sides keep input order.
pub fn split_train_val<T: Clone>(files: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), TrainError> {
    let n = files.len();
    if n < 2 {
        return Err(TrainError::TooFewFiles(n));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TrainError::InvalidConfig(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (f, v) in files.iter().zip(is_val) {
        if v { &mut val } else { &mut train }.push(f.clone());
    }
    Ok((train, val))
}

/// One training file in the form its family needs.
#[derive(Debug, Clone, PartialEq)]
pub enum FileInput {
    /// Ready-made dense vectors.
    Dense(FeatureSet),
    /// Raw log-mel spectrogram; patches are cut after the normalizer is fit.
    Spectrogram(MelSpectrogram),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: TrainHistory,
    pub train_files: Vec<usize>,
    pub val_files: Vec<usize>,
    /// Every file with at least one row in some optimizer step.
    pub gradient_files: BTreeSet<usize>,
}

/// Seeded row order for successive epochs; each epoch is a permutation of
/// the previous one.
#[derive(Debug, Clone)]
pub struct EpochShuffler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl EpochShuffler {
    pub fn new(n_rows: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT),
            order: (0..n_rows).collect(),
        }
    }

    pub fn next_epoch(&mut self) -> &[usize] {
        self.order.shuffle(&mut self.rng);
        &self.order
    }
}

/// Batches of a permutation, merging a trailing single row into the
/// previous batch so every batch norm sees at least 2 rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}

fn mean_error(net: &Network<f32>, set: &FeatureSet) -> Result<f64, ModelError> {
    let e = reconstruction_error(net, set)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Trains one model on all `files` of a machine type.
pub fn train(files: &[FileInput], config: &TrainConfig, machine_type: &str) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let ids: Vec<usize> = (0..files.len()).collect();
    let (train_ids, val_ids) = split_train_val(&ids, config.val_fraction, config.seed)?;

    let mut normalizer: Option<NormalizerStats> = None;
    let mut sets = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        let set = match (f, config.family) {
            (FileInput::Dense(set), ModelFamily::Dense) => set.clone(),
            (FileInput::Spectrogram(spec), ModelFamily::Conv) => {
                if normalizer.is_none() {
                    let train_specs: Vec<&MelSpectrogram> = train_ids
                        .iter()
                        .map(|&j| match &files[j] {
                            FileInput::Spectrogram(s) => Ok(s),
                            FileInput::Dense(_) => Err(TrainError::InvalidConfig("mixed inputs".into())),
                        })
                        .collect::<Result<_, _>>()?;
                    normalizer = Some(fit_normalizer(&train_specs)?);
                }
                patches_from_spectrogram(spec, normalizer.as_ref())?
            }
            _ => {
                return Err(TrainError::InvalidConfig(format!(
                    "file {i} does not match the {} family",
                    config.family
                )))
            }
        };
        sets.push(set.with_file_id(i));
    }
    let gather = |ids: &[usize]| FeatureSet::concat(&ids.iter().map(|&i| sets[i].clone()).collect::<Vec<_>>());
    let train_set = gather(&train_ids)?;
    let val_set = gather(&val_ids)?;
    if train_set.len() < 2 {
        return Err(TrainError::Feature(FeatureError::InsufficientData(format!(
            "{} training rows",
            train_set.len()
        ))));
    }

    let mut net: Network<f32> = build(&config.architecture(), config.seed)?;
    let mut adam = net.optimizer(config.lr);
    let mut shuffler = EpochShuffler::new(train_set.len(), config.seed);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut history = TrainHistory::default();
    let mut best = net.clone();
    let mut gradient_files = BTreeSet::new();

    for epoch in 1..=config.max_epochs {
        let order = shuffler.next_epoch();
        let mut weighted = 0.0;
        for batch in batches(order, config.batch_size) {
            let x = train_set.data().gather_rows(batch);
            gradient_files.extend(batch.iter().map(|&r| train_set.file_index()[r]));
            let step = net.train_step(&mut adam, &x)?;
            if !step.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { what: "training", epoch });
            }
            weighted += step.loss * batch.len() as f64;
        }
        let train_loss = weighted / order.len() as f64;
        let val_loss = mean_error(&net, &val_set)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { what: "validation", epoch });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.stopped_epoch = epoch;
        let verdict = stopper.observe(epoch, val_loss);
        log::info!("{machine_type} {} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}", config.family);
        match verdict {
            EpochVerdict::Improved => best = net.clone(),
            EpochVerdict::NoImprovement => {}
            EpochVerdict::Stop => break,
        }
    }
    history.best_epoch = stopper.best_epoch();

    let checkpoint = ModelCheckpoint::from_network(
        &best,
        normalizer,
        CheckpointMeta {
            machine_type: machine_type.to_string(),
            epoch: history.best_epoch,
            best_val_loss: stopper.best(),
            seed: config.seed,
        },
    );
    Ok(TrainOutcome {
        checkpoint,
        history,
        train_files: train_ids,
        val_files: val_ids,
        gradient_files,
    })
}
