//! Mono PCM audio: WAV I/O, linear resampling and short-time features.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::AudioError;

/// Canonical sample rate of the whole pipeline.
pub const PIPELINE_RATE: u32 = 16_000;

/// Lower clamp of frame log-energy, in dB.
pub const ENERGY_FLOOR_DB: f32 = -80.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::Invalid("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::Invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Samples in `[start_s, end_s)`, clamped to the signal.
    pub fn slice_s(&self, start_s: f64, end_s: f64) -> &[f32] {
        let sr = f64::from(self.sample_rate);
        let a = ((start_s * sr).round().max(0.0) as usize).min(self.len());
        let b = ((end_s * sr).round().max(0.0) as usize).clamp(a, self.len());
        &self.samples[a..b]
    }
}

/// Writes 16-bit PCM mono. Samples are clamped to [-1, 1] and quantised as
/// `round(x * 32768)` saturated to the i16 range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => AudioError::Io { path: path.to_path_buf(), source },
        other => AudioError::Invalid(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &wave.samples {
        w.write_sample(quantize(s)).map_err(io_err)?;
    }
    w.finalize().map_err(io_err)
}

pub fn quantize(x: f32) -> i16 {
    (x.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Reads a 16-bit PCM mono WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform, AudioError> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) if source.kind() != std::io::ErrorKind::UnexpectedEof => {
            AudioError::Io { path: path.to_path_buf(), source }
        }
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("unsupported WAV variant".into()),
        other => AudioError::MalformedHeader(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::Multichannel(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{:?} {}-bit (only 16-bit PCM is supported)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if reader.len() == 0 {
        return Err(AudioError::Empty);
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AudioError::MalformedHeader(e.to_string()))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Linear-interpolation resampling to `target_hz`; output length is
/// `round(len * target / source)`.
pub fn resample_linear(wave: &Waveform, target_hz: u32) -> Result<Waveform, AudioError> {
    if target_hz == 0 {
        return Err(AudioError::Invalid("target rate must be positive".into()));
    }
    if target_hz == wave.sample_rate {
        return Ok(wave.clone());
    }
    let src = &wave.samples;
    let ratio = f64::from(wave.sample_rate) / f64::from(target_hz);
    let out_len = (src.len() as f64 * f64::from(target_hz) / f64::from(wave.sample_rate)).round() as usize;
    let last = src.len().saturating_sub(1);
    let out = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (pos - i0 as f64).clamp(0.0, 1.0);
            (f64::from(src[i0]) * (1.0 - frac) + f64::from(src[i1]) * frac) as f32
        })
        .collect();
    Waveform::new(out, target_hz)
}

/// Frame geometry shared by the feature extractors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameParams {
    pub frame_ms: f64,
    pub hop_ms: f64,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self { frame_ms: 25.0, hop_ms: 10.0 }
    }
}

impl FrameParams {
    pub fn validate(&self) -> Result<(), AudioError> {
        if !(self.hop_ms > 0.0 && self.frame_ms >= self.hop_ms) {
            return Err(AudioError::Invalid(format!(
                "need frame_ms >= hop_ms > 0, got {} / {}",
                self.frame_ms, self.hop_ms
            )));
        }
        Ok(())
    }

    pub fn frame_len(&self, sample_rate: u32) -> usize {
        ((self.frame_ms * f64::from(sample_rate) / 1000.0).round() as usize).max(1)
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        ((self.hop_ms * f64::from(sample_rate) / 1000.0).round() as usize).max(1)
    }

    /// Number of full frames; zero when the frame is longer than the signal.
    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> usize {
        let (f, h) = (self.frame_len(sample_rate), self.hop_len(sample_rate));
        if n_samples < f {
            0
        } else {
            (n_samples - f) / h + 1
        }
    }
}

/// Mean-square log-energy per rectangular frame, in dB, clamped below at −80 dB.
pub fn frame_energy(wave: &Waveform, params: FrameParams) -> Result<Vec<f32>, AudioError> {
    params.validate()?;
    let (f, h) = (params.frame_len(wave.sample_rate), params.hop_len(wave.sample_rate));
    let n = params.n_frames(wave.len(), wave.sample_rate);
    Ok((0..n)
        .map(|i| {
            let frame = &wave.samples[i * h..i * h + f];
            let ms = frame.iter().map(|&s| f64::from(s) * f64::from(s)).sum::<f64>() / f as f64;
            if ms > 0.0 {
                ((10.0 * ms.log10()) as f32).max(ENERGY_FLOOR_DB)
            } else {
                ENERGY_FLOOR_DB
            }
        })
        .collect())
}

/// Spectral flatness (geometric over arithmetic mean of the Hann-windowed
/// magnitude spectrum) per frame, in [0, 1]. All-zero frames are defined as 1.
pub fn spectral_flatness(wave: &Waveform, params: FrameParams) -> Result<Vec<f32>, AudioError> {
    params.validate()?;
    let (f, h) = (params.frame_len(wave.sample_rate), params.hop_len(wave.sample_rate));
    let n = params.n_frames(wave.len(), wave.sample_rate);
    let nfft = f.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let window: Vec<f64> = (0..f)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / f as f64).cos())
        .collect();
    let bins = nfft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let frame = &wave.samples[i * h..i * h + f];
        for (j, b) in buf.iter_mut().enumerate() {
            *b = if j < f { Complex::new(f64::from(frame[j]) * window[j], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process(&mut buf);
        let mags: Vec<f64> = buf[..bins].iter().map(|c| c.norm()).collect();
        let arith = mags.iter().sum::<f64>() / bins as f64;
        if arith <= 0.0 {
            out.push(1.0);
            continue;
        }
        let log_geo = mags.iter().map(|&m| (m + 1e-12).ln()).sum::<f64>() / bins as f64;
        out.push((log_geo.exp() / arith).clamp(0.0, 1.0) as f32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    fn sine(freq: f64, secs: f64, sr: u32, amp: f32) -> Waveform {
        let n = (secs * f64::from(sr)) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(sr)).sin() as f32)
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    #[test]
    fn wav_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = sine(440.0, 1.0, 16_000, 0.9);
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.len(), w.len());
        let worst = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst <= 1.0 / 32768.0, "{worst}");
        // Quantised values are a fixed point of write∘read.
        let p2 = dir.path().join("b.wav");
        write_wav(&p2, &back).unwrap();
        assert_eq!(read_wav(&p2).unwrap(), back);
    }

    #[test]
    fn wav_error_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.wav");
        write_wav(&empty, &Waveform { samples: vec![], sample_rate: 16_000 }).unwrap();
        assert!(matches!(read_wav(&empty), Err(AudioError::Empty)));

        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..8 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(AudioError::Multichannel(2))));

        let float = dir.path().join("float.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
        let mut w = hound::WavWriter::create(&float, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&float), Err(AudioError::UnsupportedEncoding(_))));

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"RIFX not a wave file at all").unwrap();
        assert!(matches!(read_wav(&junk), Err(AudioError::MalformedHeader(_))));
    }

    #[test]
    fn wav_keeps_sample_rate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("8k.wav");
        write_wav(&p, &sine(200.0, 0.1, 8000, 0.5)).unwrap();
        assert_eq!(read_wav(&p).unwrap().sample_rate, 8000);
    }

    #[test]
    fn resample_identity_and_constant() {
        let w = sine(100.0, 0.05, 8000, 0.3);
        assert_eq!(resample_linear(&w, 8000).unwrap(), w);
        let c = Waveform::new(vec![0.5; 800], 8000).unwrap();
        let up = resample_linear(&c, 16_000).unwrap();
        assert_eq!(up.len(), 1600);
        assert!(up.samples.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn resample_sine_matches_analytic() {
        let w = sine(100.0, 1.0, 8000, 1.0);
        let up = resample_linear(&w, 16_000).unwrap();
        // Skip the clamped tail beyond the last input sample.
        let n = up.len() - 2;
        let mse = (0..n)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                let truth = (2.0 * std::f64::consts::PI * 100.0 * t).sin();
                (f64::from(up.samples[i]) - truth).powi(2)
            })
            .sum::<f64>()
            / n as f64;
        assert!(mse.sqrt() < 1e-3, "rms {}", mse.sqrt());
    }

    #[test]
    fn silence_features_use_conventions() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let e = frame_energy(&w, FrameParams::default()).unwrap();
        assert_eq!(e.len(), 98);
        assert!(e.iter().all(|&v| v == ENERGY_FLOOR_DB));
        assert!(spectral_flatness(&w, FrameParams::default()).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frame_longer_than_signal_is_empty() {
        let w = Waveform::new(vec![0.1; 100], 16_000).unwrap();
        assert!(frame_energy(&w, FrameParams::default()).unwrap().is_empty());
        assert!(spectral_flatness(&w, FrameParams::default()).unwrap().is_empty());
        assert!(frame_energy(&w, FrameParams { frame_ms: 5.0, hop_ms: 10.0 }).is_err());
    }

    #[test]
    fn white_noise_is_flat_and_sine_is_not() {
        for seed in 0..10 {
            let mut r = crate::rng::rng(seed);
            let normal = Normal::new(0.0, 0.1).unwrap();
            let s: Vec<f32> = (0..16_000).map(|_| normal.sample(&mut r) as f32).collect();
            let w = Waveform::new(s, 16_000).unwrap();
            let fl = spectral_flatness(&w, FrameParams::default()).unwrap();
            let mean = fl.iter().sum::<f32>() / fl.len() as f32;
            assert!(mean > 0.5, "seed {seed}: {mean}");
            assert!(fl.iter().all(|v| (0.0..=1.0).contains(v)));

            let freq = 200.0 + r.random_range(0.0..1500.0);
            let fl = spectral_flatness(&sine(freq, 1.0, 16_000, 0.5), FrameParams::default()).unwrap();
            let mean = fl.iter().sum::<f32>() / fl.len() as f32;
            assert!(mean < 0.1, "sine {freq}: {mean}");
        }
    }

    #[test]
    fn energy_shifts_with_one_hop_delay() {
        let base = sine(333.0, 0.5, 16_000, 0.4);
        let mut shifted = vec![0.0f32; 160];
        shifted.extend_from_slice(&base.samples);
        let a = frame_energy(&base, FrameParams::default()).unwrap();
        let b = frame_energy(&Waveform::new(shifted, 16_000).unwrap(), FrameParams::default()).unwrap();
        for i in 0..a.len() {
            assert!((a[i] - b[i + 1]).abs() < 1e-6);
        }
    }
}
