mod common;

use common::{enumerate_dense_rows, enumerate_frames};

use proptest::prelude::*;
use rand::Rng;
use soundsieve::audio::AudioClip;
use soundsieve::features::*;

fn noise_clip(seconds: f64, seed: u64) -> AudioClip {
    let mut r = common::rng(seed);
    let n = (seconds * 16000.0) as usize;
    AudioClip::new((0..n).map(|_| r.gen_range(-0.5..0.5)).collect(), 16000, "noise").unwrap()
}

#[test]
fn frame_count_formula_matches_enumeration() {
    let spec = FrameSpec::default();
    for len in 1024..=200_000 {
        assert_eq!(spec.n_frames(len), enumerate_frames(len, 1024, 512), "len {len}");
    }
}

#[test]
fn ten_second_clip_feature_arithmetic() {
    let clip = noise_clip(10.0, 1);
    assert_eq!(enumerate_frames(160_000, 1024, 512), 311);
    let spec = log_mel_spectrogram(&clip).unwrap();
    assert_eq!((spec.n_frames(), spec.n_mels()), (311, 128));
    let dense = dense_feature_vectors(&clip).unwrap();
    assert_eq!(enumerate_dense_rows(160_000), 494);
    assert_eq!(dense.data().shape(), &[494, 640]);
    let patches = conv_patches(&clip, None).unwrap();
    assert_eq!(patches.data().shape(), &[enumerate_frames(311, 32, 3), 1, 128, 32]);
    assert_eq!(patches.len(), 94);
}

#[test]
fn one_second_clip_is_one_buffer() {
    let clip = noise_clip(1.0, 2);
    assert_eq!(enumerate_dense_rows(16_000), 26);
    assert_eq!(dense_feature_vectors(&clip).unwrap().data().shape(), &[26, 640]);
    let short = AudioClip::new(vec![0.0; 15_999], 16000, "s").unwrap();
    assert!(matches!(dense_feature_vectors(&short), Err(FeatureError::ClipTooShort { .. })));
    assert!(matches!(conv_patches(&short, None), Err(FeatureError::ClipTooShort { .. })));
}

#[test]
fn silence_gives_floor_vectors() {
    let clip = AudioClip::new(vec![0.0; 24_000], 16000, "quiet").unwrap();
    let dense = dense_feature_vectors(&clip).unwrap();
    let floor = (ENERGY_FLOOR.ln()) as f32;
    assert!(dense.data().data().iter().all(|&v| v == floor));
}

#[test]
fn dense_vectors_concatenate_consecutive_buffer_frames() {
    let clip = noise_clip(1.5, 3);
    let dense = dense_feature_vectors(&clip).unwrap();
    // second buffer starts at sample 8000
    let buffer = AudioClip::new(clip.samples()[8000..24_000].to_vec(), 16000, "b").unwrap();
    let spec = log_mel_spectrogram(&buffer).unwrap();
    let row = &dense.data().data()[(26 + 7) * 640..(26 + 8) * 640];
    for k in 0..5 {
        for m in 0..128 {
            assert_eq!(row[k * 128 + m], spec.get(7 + k, m) as f32);
        }
    }
}

#[test]
fn sine_peaks_in_the_band_nearest_its_frequency() {
    let n = 16_000;
    let samples: Vec<f32> = (0..n)
        .map(|i| (0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16000.0).sin()) as f32)
        .collect();
    // direct DFT of one Hann frame locates the spectral peak
    let spec = FrameSpec::default();
    let frame: Vec<f64> = samples[4096..5120]
        .iter()
        .zip(spec.window())
        .map(|(&s, w)| s as f64 * w)
        .collect();
    let power = |k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, x) in frame.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / 1024.0;
            re += x * ang.cos();
            im += x * ang.sin();
        }
        re * re + im * im
    };
    let peak_bin = (0..=512).max_by(|&a, &b| power(a).total_cmp(&power(b))).unwrap();
    let peak_hz = peak_bin as f64 * 16000.0 / 1024.0;
    assert_eq!(peak_hz, 1000.0);

    let bank = MelBank::default();
    let nearest = (0..128)
        .min_by(|&a, &b| {
            (bank.centers_hz()[a] - peak_hz).abs().total_cmp(&(bank.centers_hz()[b] - peak_hz).abs())
        })
        .unwrap();
    let clip = AudioClip::new(samples, 16000, "sine").unwrap();
    let mel = log_mel_spectrogram(&clip).unwrap();
    for t in 1..mel.n_frames() - 1 {
        let row = mel.frame(t);
        let argmax = (0..128).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(argmax, nearest, "frame {t}");
    }
}

#[test]
fn mel_bank_invariants() {
    let bank = MelBank::default();
    assert_eq!(bank.n_bins(), 513);
    assert!(bank.centers_hz().windows(2).all(|w| w[1] > w[0]));
    for m in 0..128 {
        let row = bank.row(m);
        assert!(row.iter().all(|&w| w >= 0.0));
        let peak = row.iter().copied().fold(0.0, f64::max);
        assert_eq!(peak, 1.0, "filter {m}");
        // unimodal: non-decreasing up to the peak, non-increasing after
        let at = row.iter().position(|&w| w == 1.0).unwrap();
        assert!(row[..=at].windows(2).all(|w| w[1] >= w[0]));
        assert!(row[at..].windows(2).all(|w| w[1] <= w[0]));
    }
    let (first, last) = (bank.centers_hz()[0], bank.centers_hz()[127]);
    for k in 0..513 {
        let f = k as f64 * 16000.0 / 1024.0;
        if f >= first && f <= last {
            assert!((0..128).any(|m| bank.row(m)[k] > 0.0), "bin {k} uncovered");
        }
    }
}

#[test]
fn patches_copy_spectrogram_columns() {
    let clip = noise_clip(2.0, 4);
    let spec = log_mel_spectrogram(&clip).unwrap();
    let set = patches_from_spectrogram(&spec, None).unwrap();
    let d = set.data().data();
    for p in 0..set.len() {
        for m in 0..128 {
            for c in 0..32 {
                assert_eq!(d[(p * 128 + m) * 32 + c], spec.get(3 * p + c, m) as f32);
            }
        }
    }
}

#[test]
fn self_fitted_normalization_standardizes_each_bin() {
    let clip = noise_clip(3.0, 5);
    let spec = log_mel_spectrogram(&clip).unwrap();
    let stats = fit_normalizer(&[&spec]).unwrap();
    let norm = stats.normalize(&spec);
    let n = norm.n_frames() as f64;
    for b in 0..128 {
        let mean = (0..norm.n_frames()).map(|t| norm.get(t, b)).sum::<f64>() / n;
        let var = (0..norm.n_frames()).map(|t| (norm.get(t, b) - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }
    let back = stats.denormalize(&norm);
    assert!(common::max_abs_diff(back.values(), spec.values()) < 1e-6);
    // conv_patches with stats is the normalized spectrogram cut into patches
    let set = conv_patches(&clip, Some(&stats)).unwrap();
    assert_eq!(set.data().data()[0], norm.get(0, 0) as f32);
}

#[test]
fn normalizer_matches_two_pass_oracle() {
    let mut r = common::rng(6);
    let specs: Vec<MelSpectrogram> = [400, 350, 250]
        .iter()
        .map(|&frames| {
            let v = (0..frames * 128).map(|_| r.gen_range(-30.0..10.0)).collect();
            MelSpectrogram::new(128, v, "r").unwrap()
        })
        .collect();
    let refs: Vec<&MelSpectrogram> = specs.iter().collect();
    let stats = fit_normalizer(&refs).unwrap();
    for b in 0..128 {
        let all: Vec<f64> = specs.iter().flat_map(|s| (0..s.n_frames()).map(move |t| s.get(t, b))).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!((stats.mean[b] - mean).abs() < 1e-9);
        assert!((stats.std[b] - var.sqrt()).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dense_width_is_always_640(len in 16_000usize..40_000) {
        let clip = AudioClip::new(vec![0.01; len], 16000, "c").unwrap();
        let set = dense_feature_vectors(&clip).unwrap();
        prop_assert_eq!(set.data().shape()[1], 640);
        prop_assert_eq!(set.len(), enumerate_dense_rows(len));
    }

    #[test]
    fn cache_round_trip(rows in 1usize..6, seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let t = soundsieve::autograd::Tensor::from_fn(&[rows, 1, 4, 3], |_| r.gen_range(-5.0f32..5.0));
        let set = FeatureSet::new(FeatureKind::ConvPatches, t, vec![0; rows]).unwrap();
        let c = cache::CachedFeatures::Features(set);
        prop_assert_eq!(cache::decode(&cache::encode(&c), "p").unwrap(), c);
    }
}
