//! RIFF/WAV ingestion.
//!
//! Decodes little-endian PCM (16/24/32-bit integer) and IEEE-float WAV files
//! into a mono `f32` waveform. Multi-channel input is mixed down by taking the
//! arithmetic mean of the channels. Everything downstream works at a single
//! canonical rate of [`CANONICAL_RATE_HZ`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Sample rate every clip is converted to before feature extraction.
pub const CANONICAL_RATE_HZ: u32 = 16_000;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed RIFF container: {0}")]
    MalformedRiff(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("WAV file has no samples")]
    EmptyData,
}

/// A decoded mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate_hz: u32,
    source_path: String,
}

impl AudioClip {
    /// Builds a clip from raw samples. Samples are clamped into `[-1, 1]`.
    ///
    /// Returns `EmptyData` for an empty sample vector.
    pub fn new(
        samples: Vec<f32>,
        sample_rate_hz: u32,
        source_path: impl Into<String>,
    ) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::EmptyData);
        }
        if sample_rate_hz == 0 {
            return Err(AudioError::UnsupportedEncoding("sample rate 0".into()));
        }
        let samples = samples
            .into_iter()
            .map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) })
            .collect();
        Ok(Self {
            samples,
            sample_rate_hz,
            source_path: source_path.into(),
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Debug, Clone, Copy)]
struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Reads a WAV file, mixes it to mono and resamples it to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let clip = decode_wav(&bytes, &path.display().to_string())?;
    Ok(resample_to_16k(&clip))
}

/// Decodes an in-memory RIFF/WAV image at its native sample rate.
pub fn decode_wav(bytes: &[u8], source: &str) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 {
        return Err(AudioError::MalformedRiff("file shorter than RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(AudioError::MalformedRiff("missing RIFF magic".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedRiff("RIFF form is not WAVE".into()));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                AudioError::MalformedRiff(format!(
                    "chunk '{}' declares {size} bytes past end of file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => fmt = Some(parse_fmt(body)?),
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| AudioError::MalformedRiff("missing 'fmt ' chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::MalformedRiff("missing 'data' chunk".into()))?;
    let samples = decode_samples(&fmt, data)?;
    if samples.is_empty() {
        return Err(AudioError::EmptyData);
    }
    AudioClip::new(samples, fmt.sample_rate, source)
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk, AudioError> {
    if body.len() < 16 {
        return Err(AudioError::MalformedRiff("'fmt ' chunk shorter than 16 bytes".into()));
    }
    let mut format = read_u16(body, 0);
    let channels = read_u16(body, 2);
    let sample_rate = read_u32(body, 4);
    let bits_per_sample = read_u16(body, 14);
    if format == FORMAT_EXTENSIBLE {
        // WAVE_FORMAT_EXTENSIBLE carries the real format code in the first
        // two bytes of the sub-format GUID.
        if body.len() < 26 {
            return Err(AudioError::MalformedRiff("truncated extensible 'fmt ' chunk".into()));
        }
        format = read_u16(body, 24);
    }
    if channels == 0 {
        return Err(AudioError::MalformedRiff("zero channels".into()));
    }
    if sample_rate == 0 {
        return Err(AudioError::MalformedRiff("zero sample rate".into()));
    }
    Ok(FmtChunk {
        format,
        channels,
        sample_rate,
        bits_per_sample,
    })
}

fn decode_samples(fmt: &FmtChunk, data: &[u8]) -> Result<Vec<f32>, AudioError> {
    let bytes_per_sample = match (fmt.format, fmt.bits_per_sample) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_PCM, 24) => 3,
        (FORMAT_PCM, 32) => 4,
        (FORMAT_IEEE_FLOAT, 32) => 4,
        (FORMAT_IEEE_FLOAT, 64) => 8,
        (FORMAT_PCM | FORMAT_IEEE_FLOAT, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "{bits}-bit samples"
            )))
        }
        (code, _) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "format code {code} (only PCM and IEEE float are supported)"
            )))
        }
    };
    let channels = fmt.channels as usize;
    let frame_bytes = bytes_per_sample * channels;
    let n_frames = data.len() / frame_bytes;

    let decode_one = |chunk: &[u8]| -> f64 {
        match (fmt.format, bytes_per_sample) {
            (FORMAT_PCM, 2) => i16::from_le_bytes([chunk[0], chunk[1]]) as f64 / 32768.0,
            (FORMAT_PCM, 3) => {
                let v = i32::from_le_bytes([0, chunk[0], chunk[1], chunk[2]]) >> 8;
                v as f64 / 8_388_608.0
            }
            (FORMAT_PCM, _) => {
                i32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64
                    / 2_147_483_648.0
            }
            (_, 4) => f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64,
            _ => f64::from_le_bytes(chunk[..8].try_into().expect("8-byte sample")),
        }
    };

    let mut out = Vec::with_capacity(n_frames);
    for frame in data.chunks_exact(frame_bytes) {
        let sum: f64 = frame.chunks_exact(bytes_per_sample).map(decode_one).sum();
        out.push((sum / channels as f64) as f32);
    }
    Ok(out)
}

/// Linear-interpolation resampling to 16 kHz.
///
/// Output length is `round(len * 16000 / rate)`; output sample `i` is read at
/// input position `i * rate / 16000`. A clip already at 16 kHz is returned
/// unchanged.
pub fn resample_to_16k(clip: &AudioClip) -> AudioClip {
    let rate = clip.sample_rate_hz;
    if rate == CANONICAL_RATE_HZ {
        return clip.clone();
    }
    let input = clip.samples();
    let n_in = input.len();
    let n_out = ((n_in as f64 * CANONICAL_RATE_HZ as f64 / rate as f64).round() as usize).max(1);
    let step = rate as f64 / CANONICAL_RATE_HZ as f64;
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let left = pos.floor() as usize;
            if left + 1 >= n_in {
                return input[n_in - 1];
            }
            let frac = pos - left as f64;
            if frac == 0.0 {
                return input[left];
            }
            let a = input[left] as f64;
            let b = input[left + 1] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect();
    AudioClip {
        samples,
        sample_rate_hz: CANONICAL_RATE_HZ,
        source_path: clip.source_path.clone(),
    }
}

/// Encodes mono samples as a canonical 16-bit PCM WAV image.
pub fn encode_wav_pcm16(samples: &[f32], sample_rate_hz: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes mono samples to `path` as 16-bit PCM.
pub fn write_wav_pcm16(
    path: impl AsRef<Path>,
    samples: &[f32],
    sample_rate_hz: u32,
) -> std::io::Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_wav_pcm16(samples, sample_rate_hz))
}
