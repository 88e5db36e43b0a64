use proptest::prelude::*;
use soundsieve::audio::{decode_wav, load_wav, resample_to_16k, AudioClip};

fn write_with_hound(path: &std::path::Path, samples: &[i16], channels: u16, rate: u32) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn ten_second_file_from_an_independent_writer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ten.wav");
    let samples: Vec<i16> = (0..160_000).map(|i| ((i * 37) % 65536 - 32768) as i16).collect();
    write_with_hound(&path, &samples, 1, 16000);
    let clip = load_wav(&path).unwrap();
    assert_eq!(clip.len(), 160_000);
    assert_eq!(clip.duration_s(), 10.0);
    assert_eq!(clip.sample_rate_hz(), 16000);
    for (a, b) in clip.samples().iter().zip(&samples) {
        assert_eq!(*a, *b as f32 / 32768.0);
    }
}

#[test]
fn stereo_and_other_rates_are_canonicalized() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stereo.wav");
    let frames: Vec<i16> = (0..2 * 32000).map(|i| if i % 2 == 0 { 8192 } else { 0 }).collect();
    write_with_hound(&path, &frames, 2, 32000);
    let clip = load_wav(&path).unwrap();
    assert_eq!(clip.sample_rate_hz(), 16000);
    assert_eq!(clip.len(), 16000);
    assert!(clip.samples().iter().all(|&s| s == 0.125));
}

#[test]
fn float_and_24_bit_files_decode() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16000,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    for v in [0.25f32, -0.75, 1.0] {
        w.write_sample(v).unwrap();
    }
    w.finalize().unwrap();
    assert_eq!(load_wav(&path).unwrap().samples(), &[0.25, -0.75, 1.0]);

    let path = dir.path().join("p24.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16000,
        bits_per_sample: 24,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    for v in [4_194_304i32, -8_388_608] {
        w.write_sample(v).unwrap();
    }
    w.finalize().unwrap();
    assert_eq!(load_wav(&path).unwrap().samples(), &[0.5, -1.0]);
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(load_wav("/definitely/not/here.wav").is_err());
}

proptest! {
    #[test]
    fn pcm16_round_trip_within_one_lsb(src in prop::collection::vec(-1.0f32..1.0, 1..400)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        soundsieve::audio::write_wav_pcm16(&path, &src, 16000).unwrap();
        let clip = load_wav(&path).unwrap();
        prop_assert_eq!(clip.len(), src.len());
        for (a, b) in src.iter().zip(clip.samples()) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn resampling_a_constant_keeps_its_value(v in -1.0f32..1.0, len in 1usize..3000, rate in 4000u32..48000) {
        let clip = AudioClip::new(vec![v; len], rate, "c").unwrap();
        let out = resample_to_16k(&clip);
        let expected = ((len as f64 * 16000.0 / rate as f64).round() as usize).max(1);
        prop_assert_eq!(out.len(), expected);
        prop_assert!(out.samples().iter().all(|&s| s == v));
    }

    #[test]
    fn inserting_a_list_chunk_changes_nothing(src in prop::collection::vec(-1.0f32..1.0, 1..200), pad in 0usize..9) {
        let plain = soundsieve::audio::encode_wav_pcm16(&src, 16000);
        // splice a LIST chunk between "fmt " (ends at byte 36) and "data"
        let mut list = b"LIST".to_vec();
        list.extend_from_slice(&(pad as u32).to_le_bytes());
        list.extend(std::iter::repeat(0xAB).take(pad + (pad & 1)));
        let mut spliced = plain[..36].to_vec();
        spliced.extend_from_slice(&list);
        spliced.extend_from_slice(&plain[36..]);
        let riff_len = (spliced.len() - 8) as u32;
        spliced[4..8].copy_from_slice(&riff_len.to_le_bytes());
        let (a, b) = (decode_wav(&plain, "a").unwrap(), decode_wav(&spliced, "a").unwrap());
        prop_assert_eq!(a.samples(), b.samples());
    }
}
