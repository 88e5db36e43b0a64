//! Synthetic miniature corpus in the dataset layout.
//!
//! Normal clips are harmonic tones with a little background hiss; anomalous
//! clips are the same kind of tone with a loud broadband noise burst.

use std::f64::consts::TAU;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav_pcm16, CANONICAL_RATE_HZ};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub machine_types: Vec<String>,
    pub machine_ids: Vec<String>,
    /// Normal training clips per machine.
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomaly: usize,
    pub clip_seconds: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    /// One machine with 60 training clips and 20 + 20 test clips of 1.1 s.
    fn default() -> Self {
        Self {
            machine_types: vec!["synth".into()],
            machine_ids: vec!["00".into()],
            n_train: 60,
            n_test_normal: 20,
            n_test_anomaly: 20,
            clip_seconds: 1.1,
            seed: 2020,
        }
    }
}

fn tone(rng: &mut ChaCha8Rng, n: usize, base_hz: f64) -> Vec<f64> {
    let f0 = base_hz * rng.gen_range(0.97..1.03);
    let phase: f64 = rng.gen_range(0.0..TAU);
    let amp = rng.gen_range(0.2..0.3);
    let hiss = 0.01;
    (0..n)
        .map(|i| {
            let t = i as f64 / CANONICAL_RATE_HZ as f64;
            amp * ((TAU * f0 * t + phase).sin() + 0.5 * (TAU * 2.0 * f0 * t + phase).sin() + 0.25 * (TAU * 3.0 * f0 * t).sin())
                / 1.75
                + hiss * rng.gen_range(-1.0..1.0)
        })
        .collect()
}

fn add_burst(rng: &mut ChaCha8Rng, clip: &mut [f64]) {
    let len = clip.len() * 2 / 5;
    let start = rng.gen_range(0..=clip.len() - len);
    for s in &mut clip[start..start + len] {
        *s += 0.4 * rng.gen_range(-1.0..1.0);
    }
}

/// Writes the corpus under `root` and returns the number of files written.
pub fn generate_corpus(root: &Path, spec: &FixtureSpec) -> io::Result<usize> {
    let n = (spec.clip_seconds * CANONICAL_RATE_HZ as f64).round() as usize;
    let mut written = 0;
    for (t, machine_type) in spec.machine_types.iter().enumerate() {
        for (m, id) in spec.machine_ids.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((t as u64) << 32 | m as u64));
            let base_hz = 250.0 + 90.0 * m as f64 + 40.0 * t as f64;
            let mut write = |split: &str, name: String, samples: Vec<f64>| -> io::Result<()> {
                let dir = root.join(machine_type).join(split);
                fs::create_dir_all(&dir)?;
                let pcm: Vec<f32> = samples.iter().map(|&v| v as f32).collect();
                write_wav_pcm16(dir.join(name), &pcm, CANONICAL_RATE_HZ)?;
                written += 1;
                Ok(())
            };
            for k in 0..spec.n_train {
                let clip = tone(&mut rng, n, base_hz);
                write("train", format!("normal_id_{id}_{k:08}.wav"), clip)?;
            }
            for k in 0..spec.n_test_normal {
                let clip = tone(&mut rng, n, base_hz);
                write("test", format!("normal_id_{id}_{k:08}.wav"), clip)?;
            }
            for k in 0..spec.n_test_anomaly {
                let mut clip = tone(&mut rng, n, base_hz);
                add_burst(&mut rng, &mut clip);
                write("test", format!("anomaly_id_{id}_{k:08}.wav"), clip)?;
            }
        }
    }
    Ok(written)
}
