//! Synthetic dual-device dyadic sessions and unlabeled pre-training audio.
//!
//! Voices are a jittered glottal pulse train driven through a cascade of
//! two-pole formant resonators, shaped by a syllable-rate envelope and scaled
//! to a target RMS level. A session alternates child and adult turns; each
//! device hears its wearer at full level and the partner attenuated by the
//! crosstalk figure, plus independent channel noise. All event boundaries fall
//! on whole milliseconds, so the 3-decimal annotation CSV is exact.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform, PIPELINE_RATE};
use crate::error::SynthError;
use crate::rng::{derive_seed, rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Child,
    Adult,
    ThirdParty,
    Overlap,
    /// Unattributed speech, as emitted by voice activity detection.
    Speech,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Child => "child",
            Label::Adult => "adult",
            Label::ThirdParty => "third_party",
            Label::Overlap => "overlap",
            Label::Speech => "speech",
        }
    }

    /// Classification target: adult 0, child 1; other labels are not classified.
    pub fn class(self) -> Option<u8> {
        match self {
            Label::Adult => Some(0),
            Label::Child => Some(1),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "child" => Ok(Label::Child),
            "adult" => Ok(Label::Adult),
            "third_party" => Ok(Label::ThirdParty),
            "overlap" => Ok(Label::Overlap),
            "speech" => Ok(Label::Speech),
            other => Err(SynthError::Manifest(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerProfile {
    pub f0_hz: f64,
    pub formants_hz: Vec<f64>,
    /// RMS level of an utterance in dBFS.
    pub level_db: f64,
}

impl SpeakerProfile {
    pub fn adult() -> Self {
        Self { f0_hz: 120.0, formants_hz: vec![500.0, 1500.0, 2500.0], level_db: -20.0 }
    }

    pub fn child() -> Self {
        Self { f0_hz: 300.0, formants_hz: vec![800.0, 2000.0, 3200.0], level_db: -20.0 }
    }

    pub fn third_party() -> Self {
        Self { f0_hz: 200.0, formants_hz: vec![650.0, 1750.0, 2800.0], level_db: -20.0 }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<(), SynthError> {
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(self.f0_hz > 0.0 && self.f0_hz < nyquist) {
            return Err(SynthError::Profile(format!("f0 must be in (0, {nyquist}) Hz, got {}", self.f0_hz)));
        }
        if !(2..=3).contains(&self.formants_hz.len()) {
            return Err(SynthError::Profile(format!("need 2-3 formants, got {}", self.formants_hz.len())));
        }
        if self.formants_hz.iter().any(|&f| !(f > 0.0 && f < nyquist)) {
            return Err(SynthError::Profile(format!("formants must lie in (0, {nyquist}) Hz")));
        }
        if !self.level_db.is_finite() || self.level_db > 0.0 {
            return Err(SynthError::Profile(format!("level must be a finite dBFS value <= 0, got {}", self.level_db)));
        }
        Ok(())
    }

    /// Scales f0 by `1 + U(-f0_jitter, f0_jitter)` and all formants by a common
    /// `1 + U(-formant_jitter, formant_jitter)`.
    pub fn jittered(&self, f0_jitter: f64, formant_jitter: f64, rng: &mut Rng) -> Self {
        let fs = 1.0 + sym(rng, f0_jitter);
        let ff = 1.0 + sym(rng, formant_jitter);
        Self {
            f0_hz: self.f0_hz * fs,
            formants_hz: self.formants_hz.iter().map(|f| f * ff).collect(),
            level_db: self.level_db,
        }
    }
}

fn sym(rng: &mut Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// The three voices of one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionProfiles {
    pub child: SpeakerProfile,
    pub adult: SpeakerProfile,
    pub third_party: SpeakerProfile,
}

impl Default for SessionProfiles {
    fn default() -> Self {
        Self { child: SpeakerProfile::child(), adult: SpeakerProfile::adult(), third_party: SpeakerProfile::third_party() }
    }
}

impl SessionProfiles {
    pub fn validate(&self, sample_rate: u32) -> Result<(), SynthError> {
        self.child.validate(sample_rate)?;
        self.adult.validate(sample_rate)?;
        self.third_party.validate(sample_rate)?;
        if self.child.f0_hz <= self.adult.f0_hz {
            return Err(SynthError::Profile("child f0 must exceed adult f0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub crosstalk_attenuation_db: f64,
    pub noise_dbfs: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { crosstalk_attenuation_db: 10.0, noise_dbfs: -40.0 }
    }
}

/// Timing and mixing parameters of session synthesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub session_duration_s: f64,
    pub turn_min_s: f64,
    pub turn_max_s: f64,
    pub pause_min_s: f64,
    pub pause_max_s: f64,
    /// Long-run fraction of single-speaker turns taken by the adult.
    pub adult_share: f64,
    pub overlap_rate: f64,
    pub third_party_rate: f64,
    pub f0_jitter: f64,
    pub formant_jitter: f64,
    pub noise: NoiseConfig,
    pub profiles: SessionProfiles,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: PIPELINE_RATE,
            session_duration_s: 1500.0,
            turn_min_s: 0.5,
            turn_max_s: 4.0,
            pause_min_s: 0.2,
            pause_max_s: 2.0,
            adult_share: 0.64,
            overlap_rate: 0.03,
            third_party_rate: 0.03,
            f0_jitter: 0.15,
            formant_jitter: 0.08,
            noise: NoiseConfig::default(),
            profiles: SessionProfiles::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if !(self.turn_min_s > 0.0 && self.turn_max_s >= self.turn_min_s) {
            return bad("need 0 < turn_min_s <= turn_max_s");
        }
        if !(self.pause_min_s >= 0.0 && self.pause_max_s >= self.pause_min_s) {
            return bad("need 0 <= pause_min_s <= pause_max_s");
        }
        if !(0.0..1.0).contains(&self.adult_share) || self.adult_share < 0.5 {
            return bad("adult_share must lie in [0.5, 1)");
        }
        if !(self.overlap_rate >= 0.0 && self.third_party_rate >= 0.0 && self.overlap_rate + self.third_party_rate < 1.0) {
            return bad("overlap_rate and third_party_rate must be nonnegative with sum < 1");
        }
        if !(0.0..1.0).contains(&self.f0_jitter) || !(0.0..1.0).contains(&self.formant_jitter) {
            return bad("jitter fractions must lie in [0, 1)");
        }
        if !self.noise.crosstalk_attenuation_db.is_finite() || !self.noise.noise_dbfs.is_finite() {
            return bad("noise levels must be finite");
        }
        self.profiles.validate(self.sample_rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub session_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub label: Label,
}

impl SegmentAnnotation {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// One rendered session: two time-aligned device channels and the timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub child: Waveform,
    pub exam: Waveform,
    pub annotations: Vec<SegmentAnnotation>,
}

const CHILD_TO_ADULT: f64 = 1.0;

/// Renders one session of `duration_s` seconds.
///
/// Turns follow a two-state chain that always hands over from child to adult
/// and from adult to child with probability `(1 - s) / s` for adult share `s`,
/// so turns mostly alternate while the adult holds the configured share.
pub fn generate_session(
    session_id: &str,
    profiles: &SessionProfiles,
    duration_s: f64,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<Session, SynthError> {
    cfg.validate()?;
    profiles.validate(cfg.sample_rate)?;
    if !(duration_s >= 10.0) {
        return Err(SynthError::Config(format!("session duration must be >= 10 s, got {duration_s}")));
    }
    let sr = cfg.sample_rate;
    let per_ms = f64::from(sr) / 1000.0;
    let total_ms = (duration_s * 1000.0).round() as u64;
    let n = (total_ms as f64 * per_ms).round() as usize;
    let mut r = rng(seed);
    let mut child = vec![0.0f32; n];
    let mut exam = vec![0.0f32; n];
    let cross = db_to_gain(-cfg.noise.crosstalk_attenuation_db);
    let adult_to_child = (1.0 - cfg.adult_share) / cfg.adult_share;

    let ms = |r: &mut Rng, lo: f64, hi: f64| (r.random_range(lo..=hi) * 1000.0).round() as u64;
    let mut annotations = Vec::new();
    let mut t = ms(&mut r, cfg.pause_min_s, cfg.pause_max_s);
    let mut speaker = if r.random_bool(cfg.adult_share) { Label::Adult } else { Label::Child };
    loop {
        let len = ms(&mut r, cfg.turn_min_s, cfg.turn_max_s).max(1);
        let u: f64 = r.random();
        let label = if u < cfg.overlap_rate {
            Label::Overlap
        } else if u < cfg.overlap_rate + cfg.third_party_rate {
            Label::ThirdParty
        } else {
            let current = speaker;
            let switch = match current {
                Label::Child => CHILD_TO_ADULT,
                _ => adult_to_child,
            };
            if r.random_bool(switch.clamp(0.0, 1.0)) {
                speaker = if current == Label::Child { Label::Adult } else { Label::Child };
            }
            current
        };
        if t + len > total_ms {
            break;
        }
        let a = (t as f64 * per_ms).round() as usize;
        let b = ((t + len) as f64 * per_ms).round() as usize;
        let mut mix = |p: &SpeakerProfile, g_child: f32, g_exam: f32, r: &mut Rng| {
            let v = render_utterance(p, b - a, sr, r);
            for (i, s) in v.into_iter().enumerate() {
                child[a + i] += g_child * s;
                exam[a + i] += g_exam * s;
            }
        };
        match label {
            Label::Child => mix(&profiles.child, 1.0, cross, &mut r),
            Label::Adult => mix(&profiles.adult, cross, 1.0, &mut r),
            Label::Overlap => {
                mix(&profiles.child, 1.0, cross, &mut r);
                mix(&profiles.adult, cross, 1.0, &mut r);
            }
            Label::ThirdParty => mix(&profiles.third_party, cross, cross, &mut r),
            Label::Speech => unreachable!("the turn chain only draws speaker labels"),
        }
        annotations.push(SegmentAnnotation {
            session_id: session_id.to_string(),
            start_s: t as f64 / 1000.0,
            end_s: (t + len) as f64 / 1000.0,
            label,
        });
        t += len + ms(&mut r, cfg.pause_min_s, cfg.pause_max_s);
    }

    let noise = Normal::new(0.0, db_to_gain(cfg.noise.noise_dbfs) as f64).expect("finite noise level");
    for ch in [&mut child, &mut exam] {
        for s in ch.iter_mut() {
            *s = (*s + noise.sample(&mut r) as f32).clamp(-1.0, 1.0);
        }
    }
    Ok(Session {
        child: Waveform::new(child, sr)?,
        exam: Waveform::new(exam, sr)?,
        annotations,
    })
}

pub fn db_to_gain(db: f64) -> f32 {
    10f64.powf(db / 20.0) as f32
}

/// Two-pole resonator (Klatt form) with unit gain at DC.
#[derive(Clone, Copy)]
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, sr: f64) -> Self {
        let t = 1.0 / sr;
        let c = -(-2.0 * std::f64::consts::PI * bandwidth * t).exp();
        let b = 2.0 * (-std::f64::consts::PI * bandwidth * t).exp() * (2.0 * std::f64::consts::PI * freq * t).cos();
        Self { a: 1.0 - b - c, b, c, y1: 0.0, y2: 0.0 }
    }

    fn retune(&mut self, freq: f64, bandwidth: f64, sr: f64) {
        let fresh = Self::new(freq, bandwidth, sr);
        self.a = fresh.a;
        self.b = fresh.b;
        self.c = fresh.c;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

const BANDWIDTHS_HZ: [f64; 3] = [90.0, 120.0, 170.0];

/// One voiced utterance of exactly `n` samples at the profile's RMS level.
///
/// Syllables of 150-300 ms each take a vowel-like formant scaling in
/// [0.9, 1.1] and a raised-sine envelope that stays within 6 dB of its peak;
/// 10 ms ramps close both ends.
pub fn render_utterance(profile: &SpeakerProfile, n: usize, sample_rate: u32, rng: &mut Rng) -> Vec<f32> {
    if n == 0 {
        return Vec::new();
    }
    let sr = f64::from(sample_rate);
    let mut res: Vec<Resonator> = profile
        .formants_hz
        .iter()
        .zip(BANDWIDTHS_HZ)
        .map(|(&f, bw)| Resonator::new(f, bw, sr))
        .collect();
    let breath = Normal::new(0.0, 0.02).unwrap();
    let contour_rate = rng.random_range(0.5..1.5);
    let contour_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut out = Vec::with_capacity(n);
    let mut next_pulse = 0.0f64;
    let mut syl_end = 0usize;
    let mut syl_start = 0usize;
    let mut syl_len = 1usize;
    for i in 0..n {
        if i >= syl_end {
            syl_start = i;
            syl_len = ((rng.random_range(0.15..0.30) * sr) as usize).max(1);
            syl_end = i + syl_len;
            let vowel = rng.random_range(0.9..1.1);
            for (r, (&f, bw)) in res.iter_mut().zip(profile.formants_hz.iter().zip(BANDWIDTHS_HZ)) {
                r.retune((f * vowel).min(sr * 0.45), bw, sr);
            }
        }
        let mut x = breath.sample(rng);
        if i as f64 >= next_pulse {
            x += 1.0;
            let t = i as f64 / sr;
            let f0 = profile.f0_hz
                * (1.0 + 0.05 * (std::f64::consts::TAU * contour_rate * t + contour_phase).sin())
                * (1.0 + 0.01 * rng.random_range(-1.0..1.0));
            next_pulse += sr / f0;
        }
        let mut y = x;
        for r in res.iter_mut() {
            y = r.tick(y);
        }
        let phase = (i - syl_start) as f64 / syl_len as f64;
        let env = 0.5 + 0.5 * (std::f64::consts::PI * phase).sin();
        out.push(y * env);
    }
    let ramp = ((0.01 * sr) as usize).min(n / 2);
    for k in 0..ramp {
        let g = k as f64 / ramp as f64;
        out[k] *= g;
        out[n - 1 - k] *= g;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let target = f64::from(db_to_gain(profile.level_db));
    let gain = if rms > 0.0 { target / rms } else { 0.0 };
    out.into_iter().map(|v| (v * gain) as f32).collect()
}

/// Corpus manifest record. Paths are relative to the corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionManifest {
    pub session_id: String,
    pub child_channel_path: String,
    pub exam_channel_path: String,
    pub annotation_path: String,
    pub duration_s: f64,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn out_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Output { path: path.to_path_buf(), source }
}

/// Writes `n_sessions` sessions plus `manifest.jsonl` into `out_dir`.
///
/// Session `i` is seeded with `derive_seed(seed, i)` and draws its own
/// jittered speaker profiles from that stream.
pub fn generate_corpus(out_dir: &Path, n_sessions: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<SessionManifest>, SynthError> {
    if n_sessions == 0 {
        return Err(SynthError::Config("n_sessions must be at least 1".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(out_err(out_dir))?;
    let mut manifests = Vec::with_capacity(n_sessions);
    for i in 0..n_sessions {
        let session_seed = derive_seed(seed, i as u64);
        let mut r = rng(session_seed);
        let profiles = SessionProfiles {
            child: cfg.profiles.child.jittered(cfg.f0_jitter, cfg.formant_jitter, &mut r),
            adult: cfg.profiles.adult.jittered(cfg.f0_jitter, cfg.formant_jitter, &mut r),
            third_party: cfg.profiles.third_party.jittered(cfg.f0_jitter, cfg.formant_jitter, &mut r),
        };
        let id = format!("session_{i:02}");
        let session = generate_session(&id, &profiles, cfg.session_duration_s, r.random(), cfg)?;
        let m = SessionManifest {
            session_id: id.clone(),
            child_channel_path: format!("{id}_child.wav"),
            exam_channel_path: format!("{id}_exam.wav"),
            annotation_path: format!("{id}.csv"),
            duration_s: session.child.duration_s(),
            seed: session_seed,
        };
        write_wav(&out_dir.join(&m.child_channel_path), &session.child)?;
        write_wav(&out_dir.join(&m.exam_channel_path), &session.exam)?;
        write_annotations(&out_dir.join(&m.annotation_path), &session.annotations)?;
        log::info!("wrote {id}: {} annotations", session.annotations.len());
        manifests.push(m);
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &manifests)?;
    Ok(manifests)
}

pub fn write_manifest(path: &Path, records: &[SessionManifest]) -> Result<(), SynthError> {
    let mut text = String::new();
    for m in records {
        text.push_str(&serde_json::to_string(m).map_err(|e| SynthError::Manifest(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(out_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SessionManifest>, SynthError> {
    let text = fs::read_to_string(path).map_err(|e| SynthError::Manifest(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| SynthError::Manifest(format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct AnnotationRow {
    session_id: String,
    start_s: String,
    end_s: String,
    label: String,
}

/// Writes `session_id,start_s,end_s,label` with 3-decimal seconds.
pub fn write_annotations(path: &Path, rows: &[SegmentAnnotation]) -> Result<(), SynthError> {
    let csv_err = |e: csv::Error| SynthError::Manifest(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for a in rows {
        w.serialize(AnnotationRow {
            session_id: a.session_id.clone(),
            start_s: format!("{:.3}", a.start_s),
            end_s: format!("{:.3}", a.end_s),
            label: a.label.to_string(),
        })
        .map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["session_id", "start_s", "end_s", "label"]).map_err(csv_err)?;
    }
    w.flush().map_err(out_err(path))
}

pub fn read_annotations(path: &Path) -> Result<Vec<SegmentAnnotation>, SynthError> {
    let bad = |m: String| SynthError::Manifest(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for row in r.deserialize::<AnnotationRow>() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let a = SegmentAnnotation {
            session_id: row.session_id,
            start_s: parse(&row.start_s)?,
            end_s: parse(&row.end_s)?,
            label: row.label.parse()?,
        };
        if !(a.start_s >= 0.0 && a.start_s < a.end_s) {
            return Err(bad(format!("invalid interval {}..{}", a.start_s, a.end_s)));
        }
        out.push(a);
    }
    Ok(out)
}

/// Parameters of the unlabeled pre-training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainCorpusConfig {
    pub adult_fraction: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Fraction of utterances in which a second speaker takes turns, heard
    /// at the crosstalk level as on a worn device.
    pub interlocutor_rate: f64,
    /// Turn length bounds in seconds when a second speaker is present.
    pub turn_s: (f64, f64),
}

impl Default for PretrainCorpusConfig {
    fn default() -> Self {
        Self { adult_fraction: 0.8, min_duration_s: 1.0, max_duration_s: 10.0, interlocutor_rate: 1.0, turn_s: (0.25, 1.0) }
    }
}

/// Writes `n` utterances `utt_NNNNN.wav` into `out_dir`, each from a freshly
/// jittered adult or child wearer profile, with channel noise. With
/// probability `interlocutor_rate` the recording alternates between the
/// wearer and a far-field second speaker in turns of `turn_s` seconds.
pub fn generate_pretrain_corpus(
    out_dir: &Path,
    n: usize,
    seed: u64,
    pcfg: &PretrainCorpusConfig,
    cfg: &SynthConfig,
) -> Result<Vec<PathBuf>, SynthError> {
    if n == 0 {
        return Err(SynthError::Config("pre-training corpus needs at least 1 utterance".into()));
    }
    if !(0.0..=1.0).contains(&pcfg.adult_fraction) || !(0.0..=1.0).contains(&pcfg.interlocutor_rate) {
        return Err(SynthError::Config("adult_fraction and interlocutor_rate must lie in [0, 1]".into()));
    }
    if !(pcfg.min_duration_s > 0.0 && pcfg.max_duration_s >= pcfg.min_duration_s) {
        return Err(SynthError::Config("need 0 < min_duration_s <= max_duration_s".into()));
    }
    if !(pcfg.turn_s.0 > 0.0 && pcfg.turn_s.1 >= pcfg.turn_s.0) {
        return Err(SynthError::Config("need 0 < turn_s.0 <= turn_s.1".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(out_err(out_dir))?;
    let noise = Normal::new(0.0, f64::from(db_to_gain(cfg.noise.noise_dbfs))).expect("finite noise level");
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng(derive_seed(seed, i as u64));
        let draw = |r: &mut Rng| {
            let base = if r.random_bool(pcfg.adult_fraction) { &cfg.profiles.adult } else { &cfg.profiles.child };
            base.jittered(cfg.f0_jitter, cfg.formant_jitter, r)
        };
        let wearer = draw(&mut r);
        let dur_ms = (r.random_range(pcfg.min_duration_s..=pcfg.max_duration_s) * 1000.0).round();
        let len = (dur_ms * f64::from(cfg.sample_rate) / 1000.0).round() as usize;
        let mut samples = Vec::with_capacity(len);
        if r.random_bool(pcfg.interlocutor_rate) {
            let other = draw(&mut r);
            let cross = db_to_gain(-cfg.noise.crosstalk_attenuation_db);
            let (lo, hi) = pcfg.turn_s;
            let mut wearer_turn = true;
            while samples.len() < len {
                let turn = (r.random_range(lo..=hi) * f64::from(cfg.sample_rate)).round() as usize;
                let n = turn.max(1).min(len - samples.len());
                if wearer_turn {
                    samples.extend(render_utterance(&wearer, n, cfg.sample_rate, &mut r));
                } else {
                    samples.extend(render_utterance(&other, n, cfg.sample_rate, &mut r).into_iter().map(|v| v * cross));
                }
                wearer_turn = !wearer_turn;
            }
        } else {
            samples = render_utterance(&wearer, len, cfg.sample_rate, &mut r);
        }
        let samples = samples
            .into_iter()
            .map(|s| (s + noise.sample(&mut r) as f32).clamp(-1.0, 1.0))
            .collect();
        let path = out_dir.join(format!("utt_{i:05}.wav"));
        write_wav(&path, &Waveform::new(samples, cfg.sample_rate)?)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Lists `*.wav` files of a directory in name order.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    let entries = fs::read_dir(dir).map_err(|e| SynthError::Manifest(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{frame_energy, read_wav, FrameParams};

    fn short_cfg(duration: f64) -> SynthConfig {
        SynthConfig { session_duration_s: duration, ..SynthConfig::default() }
    }

    #[test]
    fn session_is_deterministic() {
        let cfg = short_cfg(20.0);
        let a = generate_session("s", &cfg.profiles, 20.0, 5, &cfg).unwrap();
        let b = generate_session("s", &cfg.profiles, 20.0, 5, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_session("s", &cfg.profiles, 20.0, 6, &cfg).unwrap();
        assert_ne!(a.child, c.child);
    }

    #[test]
    fn timeline_is_ordered_disjoint_and_in_range() {
        let cfg = short_cfg(120.0);
        let s = generate_session("s", &cfg.profiles, 120.0, 11, &cfg).unwrap();
        assert_eq!(s.child.len(), s.exam.len());
        assert_eq!(s.child.len(), 120 * 16_000);
        for w in s.annotations.windows(2) {
            assert!(w[0].end_s <= w[1].start_s);
        }
        for a in &s.annotations {
            assert!(a.start_s >= 0.0 && a.start_s < a.end_s && a.end_s <= 120.0);
            // Whole milliseconds.
            assert_eq!((a.start_s * 1000.0).round() / 1000.0, a.start_s);
        }
    }

    #[test]
    fn no_overlap_or_third_party_when_rates_are_zero() {
        let cfg = SynthConfig { overlap_rate: 0.0, third_party_rate: 0.0, ..short_cfg(60.0) };
        let s = generate_session("s", &cfg.profiles, 60.0, 3, &cfg).unwrap();
        assert!(s.annotations.iter().all(|a| matches!(a.label, Label::Child | Label::Adult)));
    }

    #[test]
    fn rejects_degenerate_profiles_and_short_sessions() {
        let cfg = short_cfg(20.0);
        let mut p = cfg.profiles.clone();
        p.adult.f0_hz = 0.0;
        assert!(matches!(generate_session("s", &p, 20.0, 0, &cfg), Err(SynthError::Profile(_))));
        assert!(generate_session("s", &cfg.profiles, 5.0, 0, &cfg).is_err());
    }

    #[test]
    fn wearer_is_louder_on_own_device() {
        let cfg = short_cfg(60.0);
        let s = generate_session("s", &cfg.profiles, 60.0, 21, &cfg).unwrap();
        let fp = FrameParams::default();
        let mean_db = |w: &Waveform, label: Label| {
            let e = frame_energy(w, fp).unwrap();
            let mut acc = (0.0, 0usize);
            for a in s.annotations.iter().filter(|a| a.label == label) {
                let lo = (a.start_s * 100.0).ceil() as usize;
                let hi = ((a.end_s - 0.025) * 100.0).floor() as usize;
                for v in &e[lo..=hi.min(e.len() - 1)] {
                    acc.0 += f64::from(*v);
                    acc.1 += 1;
                }
            }
            acc.0 / acc.1 as f64
        };
        let child_on_child = mean_db(&s.child, Label::Child);
        let adult_on_child = mean_db(&s.child, Label::Adult);
        assert!(child_on_child - adult_on_child >= 6.0, "{child_on_child} vs {adult_on_child}");
        assert!(mean_db(&s.exam, Label::Adult) > mean_db(&s.child, Label::Adult));
        assert!(mean_db(&s.child, Label::Child) > mean_db(&s.exam, Label::Child));
    }

    #[test]
    fn utterance_hits_target_level() {
        let mut r = rng(1);
        let v = render_utterance(&SpeakerProfile::adult(), 16_000, 16_000, &mut r);
        let rms = (v.iter().map(|&s| f64::from(s).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((20.0 * rms.log10() + 20.0).abs() < 1e-3);
    }

    #[test]
    fn corpus_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = short_cfg(12.0);
        let m = generate_corpus(dir.path(), 2, 9, &cfg).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
        let wavs = list_wavs(dir.path()).unwrap();
        assert_eq!(wavs.len(), 4);
        let ann = read_annotations(&dir.path().join(&m[0].annotation_path)).unwrap();
        assert!(!ann.is_empty());
        let child = read_wav(&dir.path().join(&m[0].child_channel_path)).unwrap();
        let exam = read_wav(&dir.path().join(&m[0].exam_channel_path)).unwrap();
        assert_eq!(child.len(), exam.len());
        assert!(generate_corpus(dir.path(), 0, 9, &cfg).is_err());
    }

    #[test]
    fn annotation_csv_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let rows = vec![
            SegmentAnnotation { session_id: "x".into(), start_s: 0.25, end_s: 1.125, label: Label::Child },
            SegmentAnnotation { session_id: "x".into(), start_s: 2.0, end_s: 3.999, label: Label::Overlap },
        ];
        write_annotations(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("session_id,start_s,end_s,label\nx,0.250,1.125,child\n"));
        assert_eq!(read_annotations(&p).unwrap(), rows);
    }

    #[test]
    fn pretrain_corpus_is_deterministic_and_bounded() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pc = PretrainCorpusConfig { max_duration_s: 2.0, ..Default::default() };
        let cfg = SynthConfig::default();
        let pa = generate_pretrain_corpus(a.path(), 5, 3, &pc, &cfg).unwrap();
        let pb = generate_pretrain_corpus(b.path(), 5, 3, &pc, &cfg).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
            let d = read_wav(x).unwrap().duration_s();
            assert!((1.0..=2.0).contains(&d));
        }
    }
}
