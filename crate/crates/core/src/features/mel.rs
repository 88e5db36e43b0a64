//! Framing, STFT and the triangular mel filter bank.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::FeatureError;
use crate::audio::{AudioClip, CANONICAL_RATE_HZ};

/// Floor applied to mel energies before taking the natural log.
pub const ENERGY_FLOOR: f64 = 1e-10;

/// Analysis framing: 64 ms Hann frames with 50% overlap at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSpec {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    window: Vec<f64>,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self::new(1024, 512, 1024)
    }
}

impl FrameSpec {
    /// Periodic Hann window of `frame_len` samples.
    pub fn new(frame_len: usize, hop: usize, fft_size: usize) -> Self {
        assert!(frame_len > 0 && hop > 0 && fft_size >= frame_len);
        let window = (0..frame_len)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame_len as f64).cos()
            })
            .collect();
        Self {
            frame_len,
            hop,
            fft_size,
            window,
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of whole frames in a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters spaced evenly on the HTK mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelBank {
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    n_bins: usize,
    /// Filter centers in Hz.
    centers_hz: Vec<f64>,
    /// Row-major `n_mels x n_bins`.
    weights: Vec<f64>,
}

impl Default for MelBank {
    fn default() -> Self {
        Self::new(128, 0.0, 8000.0, 1024, CANONICAL_RATE_HZ)
    }
}

impl MelBank {
    /// Each filter rises linearly from the previous center to its own and
    /// falls to the next; rows are scaled so the largest sampled weight is
    /// exactly 1.
    pub fn new(n_mels: usize, f_min_hz: f64, f_max_hz: f64, fft_size: usize, sample_rate: u32) -> Self {
        let n_bins = fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(f_min_hz), hz_to_mel(f_max_hz));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
            }
            let peak = row.iter().copied().fold(0.0, f64::max);
            if peak > 0.0 {
                row.iter_mut().for_each(|w| *w /= peak);
            }
        }
        Self {
            n_mels,
            f_min_hz,
            f_max_hz,
            n_bins,
            centers_hz: edges[1..=n_mels].to_vec(),
            weights,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Log mel energies, one row of `n_mels` values per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    n_mels: usize,
    values: Vec<f64>,
    source: String,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, values: Vec<f64>, source: impl Into<String>) -> Result<Self, FeatureError> {
        if n_mels == 0 || !values.len().is_multiple_of(n_mels) {
            return Err(FeatureError::InsufficientData(format!(
                "{} values do not form rows of {n_mels}",
                values.len()
            )));
        }
        Ok(Self {
            n_mels,
            values,
            source: source.into(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.values.len() / self.n_mels
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn get(&self, frame: usize, mel: usize) -> f64 {
        self.values[frame * self.n_mels + mel]
    }

    pub(crate) fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        Self {
            n_mels: self.n_mels,
            values: self
                .values
                .iter()
                .enumerate()
                .map(|(i, &v)| f(i % self.n_mels, v))
                .collect(),
            source: self.source.clone(),
        }
    }
}

/// Log mel spectrogram of a canonical-rate clip.
pub fn stft_log_mel(clip: &AudioClip, spec: &FrameSpec, bank: &MelBank) -> Result<MelSpectrogram, FeatureError> {
    log_mel_frames(clip.samples(), spec, bank, clip.source_path())
}

pub(crate) fn log_mel_frames(
    samples: &[f32],
    spec: &FrameSpec,
    bank: &MelBank,
    source: &str,
) -> Result<MelSpectrogram, FeatureError> {
    let n_frames = spec.n_frames(samples.len());
    if n_frames == 0 {
        return Err(FeatureError::ClipTooShort {
            needed: spec.frame_len,
            got: samples.len(),
        });
    }
    assert_eq!(bank.n_bins(), spec.n_bins(), "mel bank built for a different FFT size");
    let fft = FftPlanner::<f64>::new().plan_fft_forward(spec.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); spec.fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; spec.n_bins()];
    let mut values = vec![0.0; n_frames * bank.n_mels];
    for t in 0..n_frames {
        let frame = &samples[t * spec.hop..t * spec.hop + spec.frame_len];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = match frame.get(i) {
                Some(&s) => Complex::new(s as f64 * spec.window()[i], 0.0),
                None => Complex::new(0.0, 0.0),
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let row = &mut values[t * bank.n_mels..(t + 1) * bank.n_mels];
        bank.apply(&power, row);
        row.iter_mut().for_each(|e| *e = e.max(ENERGY_FLOOR).ln());
    }
    MelSpectrogram::new(bank.n_mels, values, source)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_formula() {
        let spec = FrameSpec::default();
        assert_eq!(spec.n_frames(160_000), 311);
        assert_eq!(spec.n_frames(16_000), 30);
        assert_eq!(spec.n_frames(1024), 1);
        assert_eq!(spec.n_frames(1023), 0);
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn silence_hits_the_floor() {
        let clip = AudioClip::new(vec![0.0; 4096], 16000, "silence").unwrap();
        let spec = stft_log_mel(&clip, &FrameSpec::default(), &MelBank::default()).unwrap();
        assert_eq!(spec.n_frames(), 7);
        assert!(spec.values().iter().all(|&v| v == ENERGY_FLOOR.ln()));
    }

    #[test]
    fn short_clip_is_rejected() {
        let clip = AudioClip::new(vec![0.0; 1000], 16000, "short").unwrap();
        assert!(matches!(
            stft_log_mel(&clip, &FrameSpec::default(), &MelBank::default()),
            Err(FeatureError::ClipTooShort { .. })
        ));
    }
}
