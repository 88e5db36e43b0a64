//! Mel-energy features for the two autoencoder families.
//!
//! * Dense path: the clip is cut into 1 s buffers with 50% overlap; each
//!   buffer yields 30 log-mel frames, and every run of 5 consecutive frames
//!   is concatenated into one 640-wide vector.
//! * Conv path: the whole clip becomes one log-mel spectrogram, optionally
//!   standardized per mel bin with training statistics, then cut into
//!   32-frame patches every 3 frames.

pub mod cache;
mod mel;

use std::sync::OnceLock;

use thiserror::Error;

use crate::audio::AudioClip;
use crate::autograd::Tensor;

pub use mel::{hz_to_mel, mel_to_hz, stft_log_mel, FrameSpec, MelBank, MelSpectrogram, ENERGY_FLOOR};

pub const N_MELS: usize = 128;
pub const CONTEXT_FRAMES: usize = 5;
pub const DENSE_DIM: usize = N_MELS * CONTEXT_FRAMES;
pub const BUFFER_LEN: usize = 16_000;
pub const BUFFER_HOP: usize = 8_000;
pub const PATCH_FRAMES: usize = 32;
pub const PATCH_HOP: usize = 3;
/// Lower bound on a standardization divisor.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip too short: need at least {needed} samples, got {got}")]
    ClipTooShort { needed: usize, got: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("feature cache: {0}")]
    Cache(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    DenseVectors,
    ConvPatches,
}

/// A batch of model inputs with the source file of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    kind: FeatureKind,
    data: Tensor<f32>,
    file_index: Vec<usize>,
}

impl FeatureSet {
    /// `data` must be `[n, width]` for dense vectors or `[n, c, h, w]` for
    /// patches, with one file id per row.
    pub fn new(kind: FeatureKind, data: Tensor<f32>, file_index: Vec<usize>) -> Result<Self, FeatureError> {
        let rank_ok = match kind {
            FeatureKind::DenseVectors => data.rank() == 2,
            FeatureKind::ConvPatches => data.rank() == 4,
        };
        if !rank_ok {
            return Err(FeatureError::InsufficientData(format!(
                "{kind:?} payload cannot have shape {:?}",
                data.shape()
            )));
        }
        if data.shape()[0] != file_index.len() {
            return Err(FeatureError::InsufficientData(format!(
                "{} rows but {} file ids",
                data.shape()[0],
                file_index.len()
            )));
        }
        Ok(Self {
            kind,
            data,
            file_index,
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<f32> {
        self.data
    }

    pub fn file_index(&self) -> &[usize] {
        &self.file_index
    }

    pub fn len(&self) -> usize {
        self.file_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.file_index.is_empty()
    }

    /// Relabels every row as coming from `file_id`.
    pub fn with_file_id(mut self, file_id: usize) -> Self {
        self.file_index.iter_mut().for_each(|f| *f = file_id);
        self
    }

    /// Stacks sets of the same kind, preserving order.
    pub fn concat(parts: &[FeatureSet]) -> Result<Self, FeatureError> {
        let first = parts
            .first()
            .ok_or_else(|| FeatureError::InsufficientData("no feature sets to concatenate".into()))?;
        if parts.iter().any(|p| p.kind != first.kind) {
            return Err(FeatureError::InsufficientData("mixed feature kinds".into()));
        }
        let tensors: Vec<&Tensor<f32>> = parts.iter().map(|p| &p.data).collect();
        let data = Tensor::concat_rows(&tensors)
            .map_err(|e| FeatureError::InsufficientData(e.to_string()))?;
        let file_index = parts.iter().flat_map(|p| p.file_index.iter().copied()).collect();
        Self::new(first.kind, data, file_index)
    }
}

/// Per-mel-bin standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizerStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self, FeatureError> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(FeatureError::InsufficientData(format!(
                "normalizer with {} means and {} deviations",
                mean.len(),
                std.len()
            )));
        }
        let std = std.into_iter().map(|s| s.max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn n_bins(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, spec: &MelSpectrogram) -> MelSpectrogram {
        spec.map_values(|b, x| (x - self.mean[b]) / self.std[b])
    }

    pub fn denormalize(&self, spec: &MelSpectrogram) -> MelSpectrogram {
        spec.map_values(|b, x| x * self.std[b] + self.mean[b])
    }
}

/// Per-bin mean and population standard deviation over every frame of every
/// training spectrogram.
///
/// The result does not depend on the order of `training`: each bin's values
/// are sorted before both accumulation passes.
pub fn fit_normalizer(training: &[&MelSpectrogram]) -> Result<NormalizerStats, FeatureError> {
    let total: usize = training.iter().map(|s| s.n_frames()).sum();
    if total < 2 {
        return Err(FeatureError::InsufficientData(format!(
            "normalizer needs at least 2 frames, got {total}"
        )));
    }
    let n_mels = training[0].n_mels();
    if training.iter().any(|s| s.n_mels() != n_mels) {
        return Err(FeatureError::InsufficientData("spectrograms disagree on mel count".into()));
    }
    let mut mean = Vec::with_capacity(n_mels);
    let mut std = Vec::with_capacity(n_mels);
    let mut column = Vec::with_capacity(total);
    for b in 0..n_mels {
        column.clear();
        for s in training {
            column.extend((0..s.n_frames()).map(|t| s.get(t, b)));
        }
        column.sort_by(f64::total_cmp);
        let m = column.iter().sum::<f64>() / total as f64;
        let var = column.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / total as f64;
        mean.push(m);
        std.push(var.sqrt());
    }
    NormalizerStats::new(mean, std)
}

/// Frame spec and mel bank shared by both feature paths.
#[derive(Debug, Clone, Default)]
pub struct FeatureExtractor {
    pub frames: FrameSpec,
    pub bank: MelBank,
}

fn shared() -> &'static FeatureExtractor {
    static EXTRACTOR: OnceLock<FeatureExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(FeatureExtractor::default)
}

impl FeatureExtractor {
    pub fn spectrogram(&self, clip: &AudioClip) -> Result<MelSpectrogram, FeatureError> {
        stft_log_mel(clip, &self.frames, &self.bank)
    }

    /// Number of 1 s buffers in a clip of `len` samples.
    pub fn n_buffers(len: usize) -> usize {
        if len < BUFFER_LEN {
            0
        } else {
            (len - BUFFER_LEN) / BUFFER_HOP + 1
        }
    }

    pub fn dense_vectors(&self, clip: &AudioClip) -> Result<FeatureSet, FeatureError> {
        let samples = clip.samples();
        let n_buffers = Self::n_buffers(samples.len());
        if n_buffers == 0 {
            return Err(FeatureError::ClipTooShort {
                needed: BUFFER_LEN,
                got: samples.len(),
            });
        }
        let n_mels = self.bank.n_mels;
        let width = n_mels * CONTEXT_FRAMES;
        let mut data = Vec::new();
        for b in 0..n_buffers {
            let buffer = &samples[b * BUFFER_HOP..b * BUFFER_HOP + BUFFER_LEN];
            let spec = mel::log_mel_frames(buffer, &self.frames, &self.bank, clip.source_path())?;
            if spec.n_frames() < CONTEXT_FRAMES {
                return Err(FeatureError::ClipTooShort {
                    needed: BUFFER_LEN,
                    got: samples.len(),
                });
            }
            for start in 0..=spec.n_frames() - CONTEXT_FRAMES {
                let window = &spec.values()[start * n_mels..(start + CONTEXT_FRAMES) * n_mels];
                data.extend(window.iter().map(|&v| v as f32));
            }
        }
        let rows = data.len() / width;
        let tensor = Tensor::new(vec![rows, width], data).expect("rows * width values");
        FeatureSet::new(FeatureKind::DenseVectors, tensor, vec![0; rows])
    }

    pub fn conv_patches(&self, clip: &AudioClip, stats: Option<&NormalizerStats>) -> Result<FeatureSet, FeatureError> {
        let needed = self.frames.frame_len + (PATCH_FRAMES - 1) * self.frames.hop;
        if clip.len() < needed {
            return Err(FeatureError::ClipTooShort {
                needed,
                got: clip.len(),
            });
        }
        patches_from_spectrogram(&self.spectrogram(clip)?, stats)
    }
}

/// Number of patches cut from a spectrogram of `n_frames` frames.
pub fn n_patches(n_frames: usize) -> usize {
    if n_frames < PATCH_FRAMES {
        0
    } else {
        (n_frames - PATCH_FRAMES) / PATCH_HOP + 1
    }
}

/// Dense-path vectors with the default framing and mel bank.
pub fn dense_feature_vectors(clip: &AudioClip) -> Result<FeatureSet, FeatureError> {
    shared().dense_vectors(clip)
}

/// Conv-path patches with the default framing and mel bank.
pub fn conv_patches(clip: &AudioClip, stats: Option<&NormalizerStats>) -> Result<FeatureSet, FeatureError> {
    shared().conv_patches(clip, stats)
}

/// Log mel spectrogram with the default framing and mel bank.
pub fn log_mel_spectrogram(clip: &AudioClip) -> Result<MelSpectrogram, FeatureError> {
    shared().spectrogram(clip)
}

/// Standardizes (when `stats` is given) and cuts `[1, n_mels, 32]` patches;
/// patch `p` column `c` is frame `3p + c`.
pub fn patches_from_spectrogram(
    spec: &MelSpectrogram,
    stats: Option<&NormalizerStats>,
) -> Result<FeatureSet, FeatureError> {
    let count = n_patches(spec.n_frames());
    if count == 0 {
        return Err(FeatureError::ClipTooShort {
            needed: PATCH_FRAMES,
            got: spec.n_frames(),
        });
    }
    let normalized;
    let spec = match stats {
        Some(stats) => {
            if stats.n_bins() != spec.n_mels() {
                return Err(FeatureError::InsufficientData(format!(
                    "normalizer has {} bins, spectrogram {}",
                    stats.n_bins(),
                    spec.n_mels()
                )));
            }
            normalized = stats.normalize(spec);
            &normalized
        }
        None => spec,
    };
    let n_mels = spec.n_mels();
    let mut data = Vec::with_capacity(count * n_mels * PATCH_FRAMES);
    for p in 0..count {
        for m in 0..n_mels {
            data.extend((0..PATCH_FRAMES).map(|c| spec.get(PATCH_HOP * p + c, m) as f32));
        }
    }
    let tensor = Tensor::new(vec![count, 1, n_mels, PATCH_FRAMES], data).expect("patch payload");
    FeatureSet::new(FeatureKind::ConvPatches, tensor, vec![0; count])
}
