//! Energy and spectral-flatness voice activity detection.
//!
//! A frame is active when its log-energy exceeds the recording's median
//! frame energy by `energy_threshold_db` and its spectral flatness is below
//! `flatness_threshold`. Active runs become segments, gaps shorter than
//! `min_gap_ms` are bridged, and segments shorter than `min_speech_ms` are
//! then dropped.

use serde::{Deserialize, Serialize};

use crate::audio::{frame_energy, spectral_flatness, FrameParams, Waveform};
use crate::error::AudioError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VadParams {
    pub energy_threshold_db: f64,
    pub flatness_threshold: f64,
    pub min_speech_ms: f64,
    pub min_gap_ms: f64,
    pub frame: FrameParams,
}

impl Default for VadParams {
    fn default() -> Self {
        Self {
            energy_threshold_db: -10.0,
            flatness_threshold: 0.75,
            min_speech_ms: 100.0,
            min_gap_ms: 100.0,
            frame: FrameParams::default(),
        }
    }
}

impl VadParams {
    pub fn validate(&self) -> Result<(), AudioError> {
        if !(self.min_speech_ms > 0.0) {
            return Err(AudioError::Invalid("min_speech_ms must be positive".into()));
        }
        if !(self.min_gap_ms >= 0.0) {
            return Err(AudioError::Invalid("min_gap_ms must be nonnegative".into()));
        }
        if !self.energy_threshold_db.is_finite() || !self.flatness_threshold.is_finite() {
            return Err(AudioError::Invalid("VAD thresholds must be finite".into()));
        }
        self.frame.validate()
    }
}

/// Speech regions `(start_s, end_s)`, sorted and disjoint.
pub fn detect_speech(wave: &Waveform, params: &VadParams) -> Result<Vec<(f64, f64)>, AudioError> {
    params.validate()?;
    let energy = frame_energy(wave, params.frame)?;
    if energy.is_empty() {
        return Ok(Vec::new());
    }
    let flatness = spectral_flatness(wave, params.frame)?;
    let cut = median(&energy) + params.energy_threshold_db;
    let active: Vec<bool> = energy
        .iter()
        .zip(&flatness)
        .map(|(&e, &f)| f64::from(e) > cut && f64::from(f) < params.flatness_threshold)
        .collect();

    let sr = f64::from(wave.sample_rate);
    let hop = params.frame.hop_len(wave.sample_rate) as f64 / sr;
    let frame = params.frame.frame_len(wave.sample_rate) as f64 / sr;
    let duration = wave.duration_s();
    let mut runs: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < active.len() {
        if !active[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < active.len() && active[i] {
            i += 1;
        }
        runs.push((start as f64 * hop, ((i - 1) as f64 * hop + frame).min(duration)));
    }

    let gap = params.min_gap_ms / 1000.0;
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(runs.len());
    for (s, e) in runs {
        match merged.last_mut() {
            Some(last) if s - last.1 < gap => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    let min_len = params.min_speech_ms / 1000.0;
    merged.retain(|&(s, e)| e - s >= min_len);
    Ok(merged)
}

fn median(values: &[f32]) -> f64 {
    let mut v: Vec<f32> = values.to_vec();
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        f64::from(v[n / 2])
    } else {
        (f64::from(v[n / 2 - 1]) + f64::from(v[n / 2])) / 2.0
    }
}

/// Whether recording-length exclusion applies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionMode {
    /// Recordings shorter than the minimum are dropped entirely.
    Pretrain,
    /// Every recording is kept.
    Session,
}

/// Minimum recording length for the pre-training corpus, in seconds.
pub const PRETRAIN_MIN_DURATION_S: f64 = 300.0;

/// `None` when the whole recording is rejected.
pub fn apply_exclusion(
    segments: Vec<(f64, f64)>,
    duration_s: f64,
    min_duration_s: f64,
    mode: ExclusionMode,
) -> Option<Vec<(f64, f64)>> {
    match mode {
        ExclusionMode::Pretrain if duration_s < min_duration_s => None,
        _ => Some(segments),
    }
}

/// Frame-level agreement between detected segments and reference intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScores {
    pub precision: f64,
    pub recall: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

/// Scores on a 10 ms grid: cell `i` counts as speech for a segment list when
/// its centre `(i + 0.5) * 10 ms` falls in one of the half-open intervals.
pub fn frame_scores(detected: &[(f64, f64)], reference: &[(f64, f64)], duration_s: f64) -> FrameScores {
    const CELL: f64 = 0.01;
    let n = (duration_s / CELL).floor() as usize;
    let grid = |segs: &[(f64, f64)]| {
        let mut g = vec![false; n];
        for &(s, e) in segs {
            let lo = ((s / CELL) - 0.5).ceil().max(0.0) as usize;
            let hi = (((e / CELL) - 0.5).ceil().max(0.0) as usize).min(n);
            for c in g.iter_mut().take(hi).skip(lo) {
                *c = true;
            }
        }
        g
    };
    let d = grid(detected);
    let r = grid(reference);
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (&a, &b) in d.iter().zip(&r) {
        match (a, b) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    FrameScores {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        true_positive: tp,
        false_positive: fp,
        false_negative: fneg,
    }
}
