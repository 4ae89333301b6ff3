use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{compute_metrics, kfold_split, subsample_train, Fold, MeanMetrics, Metrics};
use crate::audio::read_wav;
use crate::backbone::Backbone;
use crate::error::EvalError;
use crate::head::{finetune, ChannelInput, ClassifierConfig, ClassifierModel, Example, InputMode};
use crate::peft::{lora_wrap, LoraSpec, LoraVariant};
use crate::rng::derive_seed_str;
use crate::synth::{read_annotations, read_manifest, MANIFEST_FILE};

/// One annotated child or adult turn, cut from both device channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub session_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub label: u8,
    pub child: Vec<f32>,
    pub exam: Vec<f32>,
}

/// Reads every classifiable segment of a corpus. Segments longer than
/// `crop_s` keep their central `crop_s` seconds; segments shorter than
/// `min_samples` are skipped. Returns the session ids in manifest order.
pub fn load_segments(corpus: &Path, crop_s: f64, min_samples: usize) -> Result<(Vec<String>, Vec<Segment>), EvalError> {
    let manifest = read_manifest(&corpus.join(MANIFEST_FILE))?;
    if manifest.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sessions = Vec::with_capacity(manifest.len());
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for m in &manifest {
        let child = read_wav(&corpus.join(&m.child_channel_path))?;
        let exam = read_wav(&corpus.join(&m.exam_channel_path))?;
        if child.len() != exam.len() || child.sample_rate != exam.sample_rate {
            return Err(EvalError::Spec(format!("{}: device channels are not aligned", m.session_id)));
        }
        let crop = (crop_s * f64::from(child.sample_rate)).round() as usize;
        for a in read_annotations(&corpus.join(&m.annotation_path))? {
            let Some(label) = a.label.class() else { continue };
            let c = child.slice_s(a.start_s, a.end_s);
            let e = exam.slice_s(a.start_s, a.end_s);
            if c.len() < min_samples {
                skipped += 1;
                continue;
            }
            let (lo, hi) = if crop > 0 && c.len() > crop {
                let lo = (c.len() - crop) / 2;
                (lo, lo + crop)
            } else {
                (0, c.len())
            };
            out.push(Segment {
                session_id: m.session_id.clone(),
                start_s: a.start_s,
                end_s: a.end_s,
                label,
                child: c[lo..hi].to_vec(),
                exam: e[lo..hi].to_vec(),
            });
        }
        sessions.push(m.session_id.clone());
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} segments shorter than {min_samples} samples");
    }
    Ok((sessions, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSource {
    Child,
    Exam,
    /// Mono segments from both devices as independent examples.
    Both,
    Dual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSource {
    Child,
    Exam,
    Dual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Scratch,
    Pretrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PeftKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "ff-lora")]
    FfLora,
    #[serde(rename = "qv-lora")]
    QvLora,
}

macro_rules! str_enum {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $($v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $t {
            type Err = EvalError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(EvalError::Spec(format!(concat!("unknown ", stringify!($t), " `{}`"), other))),
                }
            }
        }
    };
}

str_enum!(TrainSource, TrainSource::Child => "child", TrainSource::Exam => "exam", TrainSource::Both => "both", TrainSource::Dual => "dual");
str_enum!(TestSource, TestSource::Child => "child", TestSource::Exam => "exam", TestSource::Dual => "dual");
str_enum!(BackboneKind, BackboneKind::Scratch => "scratch", BackboneKind::Pretrained => "pretrained");
str_enum!(PeftKind, PeftKind::None => "none", PeftKind::FfLora => "ff-lora", PeftKind::QvLora => "qv-lora");

impl PeftKind {
    pub fn variant(self) -> Option<LoraVariant> {
        match self {
            PeftKind::None => None,
            PeftKind::FfLora => Some(LoraVariant::Ff),
            PeftKind::QvLora => Some(LoraVariant::Qv),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: String,
    pub train_source: TrainSource,
    pub test_source: TestSource,
    pub backbone: BackboneKind,
    pub peft: PeftKind,
    pub train_ratio: f64,
    pub lr: f64,
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if (self.train_source == TrainSource::Dual) != (self.test_source == TestSource::Dual) {
            return Err(EvalError::Spec(format!(
                "dual training requires dual testing and vice versa (train {}, test {})",
                self.train_source, self.test_source
            )));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return Err(EvalError::Spec(format!("train ratio {} outside (0, 1]", self.train_ratio)));
        }
        if self.seeds.is_empty() {
            return Err(EvalError::Spec("at least one seed is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub folds: usize,
    pub sessions_per_fold: usize,
    /// Seed of the session shuffle behind the folds.
    pub fold_seed: u64,
    /// Segments are centre-cropped to at most this many seconds.
    pub crop_s: f64,
    pub classifier: ClassifierConfig,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            sessions_per_fold: 2,
            fold_seed: 0,
            crop_s: 1.0,
            classifier: ClassifierConfig::default(),
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbones {
    pub scratch: Backbone<f32>,
    pub pretrained: Option<Backbone<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentPrediction {
    /// Index into [`Harness::segments`].
    pub segment: usize,
    pub label: u8,
    pub pred: u8,
    pub p_child: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldRow {
    pub seed: u64,
    pub fold: usize,
    pub metrics: Metrics,
    pub predictions: Vec<SegmentPrediction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub rows: Vec<FoldRow>,
    /// Mean over every (seed, fold) row.
    pub mean: MeanMetrics,
    /// Fold means of each seed, in seed order.
    pub seed_means: Vec<MeanMetrics>,
}

impl ExperimentResult {
    /// Smallest and largest per-seed mean macro-F1.
    pub fn f1_range(&self) -> (f64, f64) {
        self.seed_means
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| (lo.min(m.macro_f1), hi.max(m.macro_f1)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Channel {
    Child,
    Exam,
}

/// Cached hidden states for frozen runs, cached conv-encoder output otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Repr {
    Hidden,
    Latent,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct TrainKey {
    source: TrainSource,
    backbone: BackboneKind,
    peft: PeftKind,
    ratio_bits: u64,
    lr_bits: u64,
    seed: u64,
    fold: usize,
}

/// Runs experiment specs over one corpus, caching features per backbone and
/// channel and trained models per training condition.
pub struct Harness {
    pub config: HarnessConfig,
    pub sessions: Vec<String>,
    pub segments: Vec<Segment>,
    pub folds: Vec<Fold>,
    backbones: Backbones,
    features: HashMap<(BackboneKind, Channel, Repr), Rc<Vec<ChannelInput>>>,
    trained: HashMap<TrainKey, Rc<ClassifierModel>>,
}

impl Harness {
    pub fn new(config: HarnessConfig, corpus: &Path, backbones: Backbones) -> Result<Self, EvalError> {
        let min = backbones.scratch.config.receptive_field();
        let (sessions, segments) = load_segments(corpus, config.crop_s, min)?;
        Self::from_segments(config, sessions, segments, backbones)
    }

    pub fn from_segments(
        config: HarnessConfig,
        sessions: Vec<String>,
        segments: Vec<Segment>,
        backbones: Backbones,
    ) -> Result<Self, EvalError> {
        config.classifier.validate()?;
        if let Some(p) = &backbones.pretrained {
            if p.config != backbones.scratch.config {
                return Err(EvalError::Spec("scratch and pretrained backbones differ in configuration".into()));
            }
        }
        let known: BTreeSet<&String> = sessions.iter().collect();
        if let Some(s) = segments.iter().find(|s| !known.contains(&s.session_id)) {
            return Err(EvalError::Spec(format!("segment from unknown session {}", s.session_id)));
        }
        let folds = kfold_split(&sessions, config.folds, config.sessions_per_fold, config.fold_seed)?;
        Ok(Self { config, sessions, segments, folds, backbones, features: HashMap::new(), trained: HashMap::new() })
    }

    fn backbone(&self, kind: BackboneKind) -> Result<&Backbone<f32>, EvalError> {
        match kind {
            BackboneKind::Scratch => Ok(&self.backbones.scratch),
            BackboneKind::Pretrained => self
                .backbones
                .pretrained
                .as_ref()
                .ok_or_else(|| EvalError::MissingCheckpoint("no pretrained backbone was supplied".into())),
        }
    }

    fn repr(&self, peft: PeftKind) -> Repr {
        if peft != PeftKind::None || self.config.classifier.backbone_trainable {
            Repr::Latent
        } else {
            Repr::Hidden
        }
    }

    fn features(&mut self, kind: BackboneKind, ch: Channel, repr: Repr) -> Result<Rc<Vec<ChannelInput>>, EvalError> {
        if let Some(f) = self.features.get(&(kind, ch, repr)) {
            return Ok(Rc::clone(f));
        }
        let bb = self.backbone(kind)?;
        log::info!("computing {repr:?} features: {kind} backbone, {ch:?} channel, {} segments", self.segments.len());
        let feats = self
            .segments
            .iter()
            .map(|s| {
                let x = match ch {
                    Channel::Child => &s.child,
                    Channel::Exam => &s.exam,
                };
                match repr {
                    Repr::Hidden => bb.hidden_states(x).map(ChannelInput::Hidden),
                    Repr::Latent => bb.encode_frozen(x).map(ChannelInput::Latent),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let feats = Rc::new(feats);
        self.features.insert((kind, ch, repr), Rc::clone(&feats));
        Ok(feats)
    }

    /// Examples for `idx` drawn from the named channels. Each inner list is one
    /// example's channels; `both` yields two single-channel lists per segment.
    fn examples(&mut self, idx: &[usize], channels: &[&[Channel]], kind: BackboneKind, repr: Repr) -> Result<Vec<Example>, EvalError> {
        let mut out = Vec::with_capacity(idx.len() * channels.len());
        for &group in channels {
            let feats: Vec<Rc<Vec<ChannelInput>>> =
                group.iter().map(|&c| self.features(kind, c, repr)).collect::<Result<_, _>>()?;
            for &i in idx {
                out.push(Example { channels: feats.iter().map(|f| f[i].clone()).collect(), label: self.segments[i].label });
            }
        }
        Ok(out)
    }

    fn indices_in(&self, sessions: &[String]) -> Vec<usize> {
        (0..self.segments.len()).filter(|&i| sessions.contains(&self.segments[i].session_id)).collect()
    }

    /// Fails when any index belongs to a session outside `allowed` or inside `forbidden`.
    fn check_provenance(&self, idx: &[usize], allowed: &[String], forbidden: &[String], what: &str) -> Result<(), EvalError> {
        for &i in idx {
            let s = &self.segments[i].session_id;
            if !allowed.contains(s) || forbidden.contains(s) {
                return Err(EvalError::Leakage(format!("{what} segment {i} comes from session {s}")));
            }
        }
        Ok(())
    }

    fn classifier_config(&self, spec: &ExperimentSpec) -> ClassifierConfig {
        let mut c = self.config.classifier.clone();
        c.lr = spec.lr;
        c.input_mode = if spec.train_source == TrainSource::Dual { InputMode::Dual } else { InputMode::Mono };
        c
    }

    fn train_fold(&mut self, spec: &ExperimentSpec, seed: u64, fold: usize) -> Result<Rc<ClassifierModel>, EvalError> {
        let key = TrainKey {
            source: spec.train_source,
            backbone: spec.backbone,
            peft: spec.peft,
            ratio_bits: spec.train_ratio.to_bits(),
            lr_bits: spec.lr.to_bits(),
            seed,
            fold,
        };
        if let Some(m) = self.trained.get(&key) {
            return Ok(Rc::clone(m));
        }
        let f = self.folds[fold].clone();
        let pool = self.indices_in(&f.train);
        let cells: Vec<(String, u8)> = pool.iter().map(|&i| (self.segments[i].session_id.clone(), self.segments[i].label)).collect();
        let picked = subsample_train(&cells, spec.train_ratio, derive_seed_str(seed, &format!("subsample/{fold}")))?;
        let idx: Vec<usize> = picked.into_iter().map(|j| pool[j]).collect();
        self.check_provenance(&idx, &f.train, &f.test, "training")?;

        let repr = self.repr(spec.peft);
        let groups: &[&[Channel]] = match spec.train_source {
            TrainSource::Child => &[&[Channel::Child]],
            TrainSource::Exam => &[&[Channel::Exam]],
            TrainSource::Both => &[&[Channel::Child], &[Channel::Exam]],
            TrainSource::Dual => &[&[Channel::Child, Channel::Exam]],
        };
        let train = self.examples(&idx, groups, spec.backbone, repr)?;

        let mut backbone = self.backbone(spec.backbone)?.clone();
        if let Some(variant) = spec.peft.variant() {
            let lspec = LoraSpec { variant, rank: self.config.lora_rank, alpha: self.config.lora_alpha };
            backbone = lora_wrap(&backbone, &lspec, derive_seed_str(seed, &format!("lora/{fold}")))?.0;
        }
        let cfg = self.classifier_config(spec);
        let mut model = ClassifierModel::new(cfg, backbone, derive_seed_str(seed, &format!("head/{fold}")))?;
        log::info!(
            "training {} {} {} ratio {} seed {seed} fold {fold}: {} examples",
            spec.train_source,
            spec.backbone,
            spec.peft,
            spec.train_ratio,
            train.len()
        );
        finetune(&mut model, &train, derive_seed_str(seed, &format!("train/{fold}")))?;
        let model = Rc::new(model);
        self.trained.insert(key, Rc::clone(&model));
        Ok(model)
    }

    pub fn run_experiment(&mut self, spec: &ExperimentSpec) -> Result<ExperimentResult, EvalError> {
        spec.validate()?;
        let mut rows = Vec::new();
        let mut seed_means = Vec::new();
        for &seed in &spec.seeds {
            let mut per_seed = Vec::new();
            for fold in 0..self.folds.len() {
                let model = self.train_fold(spec, seed, fold)?;
                let f = self.folds[fold].clone();
                let idx = self.indices_in(&f.test);
                self.check_provenance(&idx, &f.test, &f.train, "test")?;
                let group: &[Channel] = match spec.test_source {
                    TestSource::Child => &[Channel::Child],
                    TestSource::Exam => &[Channel::Exam],
                    TestSource::Dual => &[Channel::Child, Channel::Exam],
                };
                let test = self.examples(&idx, &[group], spec.backbone, self.repr(spec.peft))?;
                let preds = model.predict(&test)?;
                let labels: Vec<u8> = test.iter().map(|e| e.label).collect();
                let hard: Vec<u8> = preds.iter().map(|p| p.label).collect();
                let metrics = compute_metrics(&hard, &labels)?;
                let predictions = idx
                    .iter()
                    .zip(&preds)
                    .map(|(&segment, p)| SegmentPrediction { segment, label: self.segments[segment].label, pred: p.label, p_child: p.p_child })
                    .collect();
                per_seed.push(metrics);
                rows.push(FoldRow { seed, fold, metrics, predictions });
            }
            seed_means.push(MeanMetrics::of(&per_seed));
        }
        let all: Vec<Metrics> = rows.iter().map(|r| r.metrics).collect();
        Ok(ExperimentResult { spec: spec.clone(), rows, mean: MeanMetrics::of(&all), seed_means })
    }

    /// Model trained for `spec` on `fold` under `seed` (trains it if needed).
    pub fn model(&mut self, spec: &ExperimentSpec, seed: u64, fold: usize) -> Result<Rc<ClassifierModel>, EvalError> {
        spec.validate()?;
        if fold >= self.folds.len() {
            return Err(EvalError::Spec(format!("fold {fold} out of range")));
        }
        self.train_fold(spec, seed, fold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn tone(f: f64, n: usize, amp: f32) -> Vec<f32> {
        (0..n).map(|i| amp * (std::f64::consts::TAU * f * i as f64 / 16_000.0).sin() as f32).collect()
    }

    pub(crate) fn toy_harness() -> Harness {
        let sessions: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let mut segments = Vec::new();
        for (si, s) in sessions.iter().enumerate() {
            for j in 0..6 {
                let label = (j % 2) as u8;
                let f = if label == 1 { 320.0 } else { 130.0 } + 7.0 * (si * 6 + j) as f64;
                let (c_amp, e_amp) = if label == 1 { (0.4, 0.1) } else { (0.1, 0.4) };
                segments.push(Segment {
                    session_id: s.clone(),
                    start_s: j as f64,
                    end_s: j as f64 + 0.2,
                    label,
                    child: tone(f, 1600, c_amp),
                    exam: tone(f, 1600, e_amp),
                });
            }
        }
        let config = HarnessConfig {
            folds: 2,
            sessions_per_fold: 2,
            classifier: ClassifierConfig {
                conv_channels: 8,
                mlp_hidden: vec![8],
                backbone_trainable: false,
                lr: 1e-2,
                lr_grid: vec![1e-2],
                epochs: 15,
                batch_size: 4,
                ..ClassifierConfig::default()
            },
            lora_rank: 2,
            ..HarnessConfig::default()
        };
        let bb = Backbone::init(BackboneConfig::tiny(), 1).unwrap();
        let backbones = Backbones { scratch: bb.clone(), pretrained: Some(Backbone::init(BackboneConfig::tiny(), 2).unwrap()) };
        Harness::from_segments(config, sessions, segments, backbones).unwrap()
    }

    pub(crate) fn spec(train: TrainSource, test: TestSource) -> ExperimentSpec {
        ExperimentSpec {
            experiment: "toy".into(),
            train_source: train,
            test_source: test,
            backbone: BackboneKind::Scratch,
            peft: PeftKind::None,
            train_ratio: 1.0,
            lr: 1e-2,
            seeds: vec![0],
        }
    }

    #[test]
    fn runs_every_source_and_is_deterministic() {
        let mut h = toy_harness();
        for (tr, te) in [
            (TrainSource::Child, TestSource::Child),
            (TrainSource::Exam, TestSource::Child),
            (TrainSource::Both, TestSource::Exam),
            (TrainSource::Dual, TestSource::Dual),
        ] {
            let r = h.run_experiment(&spec(tr, te)).unwrap();
            assert_eq!(r.rows.len(), 2);
            for row in &r.rows {
                assert_eq!(row.metrics.confusion.total(), 12);
            }
        }
        let a = h.run_experiment(&spec(TrainSource::Both, TestSource::Child)).unwrap();
        let b = toy_harness().run_experiment(&spec(TrainSource::Both, TestSource::Child)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_sessions_never_train() {
        let mut h = toy_harness();
        for fold in 0..h.folds.len() {
            let f = h.folds[fold].clone();
            let idx = h.indices_in(&f.train);
            assert!(idx.iter().all(|&i| !f.test.contains(&h.segments[i].session_id)));
            assert!(h.check_provenance(&h.indices_in(&f.test), &f.train, &f.test, "probe").is_err());
        }
        let r = h.run_experiment(&spec(TrainSource::Both, TestSource::Child)).unwrap();
        for row in &r.rows {
            let test = &h.folds[row.fold].test;
            assert!(row.predictions.iter().all(|p| test.contains(&h.segments[p.segment].session_id)));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut h = toy_harness();
        assert!(h.run_experiment(&spec(TrainSource::Dual, TestSource::Child)).is_err());
        assert!(h.run_experiment(&spec(TrainSource::Child, TestSource::Dual)).is_err());
        let mut s = spec(TrainSource::Child, TestSource::Child);
        s.lr = 0.5;
        assert!(h.run_experiment(&s).is_err());
        s = spec(TrainSource::Child, TestSource::Child);
        s.backbone = BackboneKind::Pretrained;
        h.backbones.pretrained = None;
        assert!(matches!(h.run_experiment(&s), Err(EvalError::MissingCheckpoint(_))));
        assert!("mono".parse::<TrainSource>().is_err());
        assert_eq!("qv-lora".parse::<PeftKind>().unwrap(), PeftKind::QvLora);
    }

    #[test]
    fn lora_runs_complete() {
        let mut h = toy_harness();
        h.config.classifier.epochs = 2;
        for peft in [PeftKind::FfLora, PeftKind::QvLora] {
            let s = ExperimentSpec { peft, backbone: BackboneKind::Pretrained, ..spec(TrainSource::Child, TestSource::Child) };
            let r = h.run_experiment(&s).unwrap();
            assert_eq!(r.rows.len(), 2);
            let m = h.model(&s, 0, 0).unwrap();
            assert!(m.backbone.lora_scale.is_some());
        }
    }
}
