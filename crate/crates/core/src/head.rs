//! Child/adult classifier on top of the backbone's hidden states.
//!
//! `softmax(w)`-weighted sum of the L+1 hidden states (each optionally
//! layer-normalised without affine parameters), a stack of kernel-1
//! convolutions with ReLU, a mean over each segment's own frames, and a ReLU
//! MLP ending in two logits (adult = 0, child = 1). In dual mode the shared
//! backbone runs once per device and the two weighted sums are concatenated
//! frame by frame before the conv stack.
//!
//! Batches are ragged: every segment keeps its own length and pooling runs over
//! each segment's row range, so no padding frames are ever created.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::error::ModelError;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Bindings, ParamStore};
use crate::rng::{derive_seed, rng, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Mono,
    Dual,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Mono => 1,
            InputMode::Dual => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub conv_channels: usize,
    pub conv_layers: usize,
    pub mlp_hidden: Vec<usize>,
    pub num_classes: usize,
    pub input_mode: InputMode,
    pub backbone_trainable: bool,
    /// Parameter-free layer norm on every hidden state before the weighted sum.
    pub normalize_layers: bool,
    pub lr: f64,
    /// Learning rates `lr` may take.
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            conv_channels: 256,
            conv_layers: 2,
            mlp_hidden: vec![128],
            num_classes: 2,
            input_mode: InputMode::Mono,
            backbone_trainable: true,
            normalize_layers: true,
            lr: 2e-4,
            lr_grid: vec![2e-4, 5e-4],
            epochs: 20,
            batch_size: 16,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_classes != 2 {
            return bad(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.conv_channels == 0 || self.conv_layers == 0 || self.mlp_hidden.iter().any(|&h| h == 0) {
            return bad("head widths and layer counts must be positive".into());
        }
        if !self.lr_grid.iter().any(|&g| (g - self.lr).abs() <= 1e-12 * g.abs().max(1.0)) {
            return bad(format!("lr {} is not in the configured grid {:?}", self.lr, self.lr_grid));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("need lr > 0 and batch_size > 0".into());
        }
        Ok(())
    }
}

/// How the backbone takes part in classifier training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneMode {
    /// Hidden states are computed once and cached.
    Frozen,
    /// Feature projection and transformer train; the conv encoder stays fixed
    /// and its output is cached.
    Full,
    /// Only LoRA factors train; base weights fixed.
    Lora,
}

/// Backbone input of one device channel, in the cheapest form the mode allows.
#[derive(Clone, Debug, PartialEq)]
pub enum ChannelInput {
    /// L+1 hidden states `[T, d]` of a frozen backbone.
    Hidden(Vec<Tensor<f32>>),
    /// Conv-encoder output `[T, C]`.
    Latent(Tensor<f32>),
}

impl ChannelInput {
    pub fn frames(&self) -> usize {
        match self {
            ChannelInput::Hidden(h) => h[0].rows(),
            ChannelInput::Latent(z) => z.rows(),
        }
    }
}

/// One classification example: one channel (mono) or two aligned channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub channels: Vec<ChannelInput>,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub backbone: Backbone<f32>,
    pub head: ParamStore<f32>,
}

/// Head input width for a backbone of width `d`.
fn input_width(cfg: &ClassifierConfig, d: usize) -> usize {
    d * cfg.input_mode.channels()
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig, backbone: Backbone<f32>, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng(seed);
        let mut head = ParamStore::new();
        head.insert("head.layer_w", Tensor::zeros(&[backbone.config.layers + 1]));
        let mut width = input_width(&config, backbone.config.d_model);
        for i in 0..config.conv_layers {
            insert_linear(&mut head, &format!("head.conv{i}"), width, config.conv_channels, &mut r);
            width = config.conv_channels;
        }
        for (i, &h) in config.mlp_hidden.iter().enumerate() {
            insert_linear(&mut head, &format!("head.mlp{i}"), width, h, &mut r);
            width = h;
        }
        insert_linear(&mut head, "head.out", width, config.num_classes, &mut r);
        Ok(Self { config, backbone, head })
    }

    pub fn mode(&self) -> BackboneMode {
        if self.backbone.lora_scale.is_some() {
            BackboneMode::Lora
        } else if self.config.backbone_trainable {
            BackboneMode::Full
        } else {
            BackboneMode::Frozen
        }
    }

    /// Softmax-normalised layer weights.
    pub fn layer_weights(&self) -> Vec<f64> {
        let w: Vec<f64> = self.head.get("head.layer_w").expect("layer weights").data().iter().map(|&v| f64::from(v)).collect();
        let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Converts raw channel samples into the cached form for this model's mode.
    pub fn prepare(&self, channels: &[&[f32]], label: u8) -> Result<Example, ModelError> {
        let want = self.config.input_mode.channels();
        if channels.len() != want {
            return Err(ModelError::Config(format!("expected {want} channel(s), got {}", channels.len())));
        }
        if let [a, b] = channels {
            if a.len() != b.len() {
                return Err(ModelError::DualLengthMismatch(a.len(), b.len()));
            }
        }
        let channels = channels
            .iter()
            .map(|s| match self.mode() {
                BackboneMode::Frozen => self.backbone.hidden_states(s).map(ChannelInput::Hidden),
                _ => self.backbone.encode_frozen(s).map(ChannelInput::Latent),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Example { channels, label })
    }

    fn trainable(&self, name: &str) -> bool {
        match self.mode() {
            BackboneMode::Frozen => false,
            BackboneMode::Full => !Backbone::<f32>::is_encoder_param(name) && !Backbone::<f32>::is_pretrain_only_param(name),
            BackboneMode::Lora => name.contains(".lora_"),
        }
    }

    /// Logits `[B, 2]` for a ragged batch.
    pub fn forward(&self, tape: &mut Tape<f32>, vars: &Bindings, batch: &[&Example]) -> Result<Var, ModelError> {
        let n_ch = self.config.input_mode.channels();
        let layers = self.backbone.config.layers + 1;
        let mut offsets = vec![0usize];
        for ex in batch {
            if ex.channels.len() != n_ch {
                return Err(ModelError::Config(format!("example has {} channel(s), model expects {n_ch}", ex.channels.len())));
            }
            let t = ex.channels[0].frames();
            if let Some(other) = ex.channels.iter().find(|c| c.frames() != t) {
                return Err(ModelError::DualLengthMismatch(t, other.frames()));
            }
            offsets.push(offsets.last().unwrap() + t);
        }
        let mixed = || ModelError::Config("batch mixes cached hidden states and latents".into());
        let mut inputs = Vec::with_capacity(n_ch);
        for ch in 0..n_ch {
            // Stack every layer (or the latents) across the batch.
            inputs.push(match &batch[0].channels[ch] {
                ChannelInput::Hidden(_) => {
                    let mut cached: Vec<Vec<&Tensor<f32>>> = vec![Vec::with_capacity(batch.len()); layers];
                    for ex in batch {
                        let ChannelInput::Hidden(h) = &ex.channels[ch] else { return Err(mixed()) };
                        if h.len() != layers {
                            return Err(ModelError::Config(format!("expected {layers} hidden states, got {}", h.len())));
                        }
                        for (l, t) in h.iter().enumerate() {
                            cached[l].push(t);
                        }
                    }
                    let vs = cached.iter().map(|c| Ok(tape.constant(Tensor::concat_rows(c)?))).collect::<Result<_, ModelError>>()?;
                    ChannelVars::Hidden(vs)
                }
                ChannelInput::Latent(_) => {
                    let mut zs = Vec::with_capacity(batch.len());
                    for ex in batch {
                        let ChannelInput::Latent(z) = &ex.channels[ch] else { return Err(mixed()) };
                        zs.push(z);
                    }
                    ChannelVars::Latent(tape.constant(Tensor::concat_rows(&zs)?))
                }
            });
        }
        Ok(head_forward(&self.config, &self.backbone, tape, vars, &inputs, &offsets))
    }

    fn bind(&self, tape: &mut Tape<f32>, train: bool) -> Bindings {
        let mut vars = self.head.bind(tape, |_| train);
        if self.mode() != BackboneMode::Frozen {
            vars.extend(self.backbone.params.bind(tape, |n| train && self.trainable(n)));
        }
        vars
    }

    /// Logits for each example, evaluated in batches of `batch_size`.
    pub fn logits(&self, examples: &[Example]) -> Result<Vec<[f32; 2]>, ModelError> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(self.config.batch_size.max(1)) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let refs: Vec<&Example> = chunk.iter().collect();
            let l = self.forward(&mut tape, &vars, &refs)?;
            out.extend(tape.value(l).data().chunks(2).map(|r| [r[0], r[1]]));
        }
        Ok(out)
    }

    pub fn predict(&self, examples: &[Example]) -> Result<Vec<Prediction>, ModelError> {
        Ok(self.logits(examples)?.into_iter().map(|l| Prediction::from_logits(l[0], l[1])).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<f32> {
        let mut ck = self.backbone.to_checkpoint();
        ck.meta.insert("kind".into(), "classifier".into());
        ck.meta.insert("classifier_config".into(), serde_json::to_string(&self.config).expect("config serialises"));
        if let Some(s) = self.backbone.lora_scale {
            ck.meta.insert("lora_scale".into(), format!("{s:e}"));
        }
        let (base, lora): (Vec<_>, Vec<_>) = self.backbone.params.iter().partition(|(n, _)| !n.contains(".lora_"));
        let mut b = ParamStore::new();
        for (n, t) in base {
            b.insert(n.clone(), t.clone());
        }
        ck.sections.insert("backbone".into(), b);
        if !lora.is_empty() {
            let mut l = ParamStore::new();
            for (n, t) in lora {
                l.insert(n.clone(), t.clone());
            }
            ck.sections.insert("lora".into(), l);
        }
        ck.sections.insert("head".into(), self.head.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<Self, ModelError> {
        let config: ClassifierConfig = serde_json::from_str(ck.meta("classifier_config")?)
            .map_err(|e| ModelError::Config(format!("stored classifier config: {e}")))?;
        let mut backbone = Backbone::from_checkpoint(ck)?;
        if let Some(lora) = ck.sections.get("lora") {
            let scale: f64 = ck
                .meta("lora_scale")?
                .parse()
                .map_err(|e| ModelError::Config(format!("lora_scale: {e}")))?;
            for (n, t) in lora.iter() {
                backbone.params.insert(n.clone(), t.clone());
            }
            backbone.lora_scale = Some(scale);
        }
        let template = Self::new(config.clone(), backbone.clone(), 0)?;
        let head = ck.section("head")?.clone();
        template.head.check_compatible(&head)?;
        Ok(Self { config, backbone, head })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn insert_linear(p: &mut ParamStore<f32>, name: &str, fan_in: usize, fan_out: usize, r: &mut Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, r));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn linear<T: Scalar>(tape: &mut Tape<T>, vars: &Bindings, name: &str, x: Var) -> Var {
    let y = tape.matmul(x, vars.var(&format!("{name}.w")));
    tape.add_row(y, vars.var(&format!("{name}.b")))
}

/// One channel of a batch already on the tape, rows stacked over examples.
#[derive(Clone, Debug)]
pub enum ChannelVars {
    /// L+1 hidden states `[ΣT, d]`.
    Hidden(Vec<Var>),
    /// Encoder latents `[ΣT, c]`, contextualised by `backbone`.
    Latent(Var),
}

/// Logits `[B, num_classes]` of the classification head over a ragged batch
/// whose example `i` spans rows `offsets[i]..offsets[i+1]`.
pub fn head_forward<T: Scalar>(
    config: &ClassifierConfig,
    backbone: &Backbone<T>,
    tape: &mut Tape<T>,
    vars: &Bindings,
    channels: &[ChannelVars],
    offsets: &[usize],
) -> Var {
    let layers = backbone.config.layers + 1;
    let lw = vars.var("head.layer_w");
    let lw = tape.reshape(lw, &[1, layers]);
    let lw = tape.softmax_rows(lw);
    let mut per_channel = Vec::with_capacity(channels.len());
    for ch in channels {
        let layer_vars = match ch {
            ChannelVars::Hidden(h) => h.clone(),
            ChannelVars::Latent(z) => {
                let (_, f) = backbone.feature_projection(tape, vars, *z);
                backbone.contextualize_segments(tape, vars, f, offsets, None)
            }
        };
        let layer_vars = if config.normalize_layers {
            let d = backbone.config.d_model;
            let (g, b) = (tape.constant(Tensor::ones(&[d])), tape.constant(Tensor::zeros(&[d])));
            layer_vars.into_iter().map(|h| tape.layer_norm_rows(h, g, b, T::lit(1e-5))).collect()
        } else {
            layer_vars
        };
        per_channel.push(tape.weighted_sum(&layer_vars, lw));
    }
    let mut x = if per_channel.len() == 1 { per_channel[0] } else { tape.concat_cols(&per_channel) };
    for i in 0..config.conv_layers {
        x = linear(tape, vars, &format!("head.conv{i}"), x);
        x = tape.relu(x);
    }
    x = tape.segment_mean(x, offsets);
    for i in 0..config.mlp_hidden.len() {
        x = linear(tape, vars, &format!("head.mlp{i}"), x);
        x = tape.relu(x);
    }
    linear(tape, vars, "head.out", x)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Var {
    let ls = tape.log_softmax_rows(logits);
    let picked = tape.gather_per_row(ls, labels);
    let nll = tape.mean(picked);
    tape.neg(nll)
}

/// `Σ_l softmax(w)_l · H_l` on plain tensors.
pub fn layer_weighted_sum(hidden: &[Tensor<f64>], w: &[f64]) -> Result<Tensor<f64>, ModelError> {
    if hidden.is_empty() || hidden.len() != w.len() {
        return Err(ModelError::Config(format!("{} hidden states but {} weights", hidden.len(), w.len())));
    }
    if hidden.iter().any(|h| h.shape() != hidden[0].shape()) {
        return Err(ModelError::Config("hidden states differ in shape".into()));
    }
    let mut tape = Tape::<f64>::new();
    let xs: Vec<Var> = hidden.iter().map(|h| tape.constant(h.clone())).collect();
    let wv = tape.constant(Tensor::new(vec![1, w.len()], w.to_vec())?);
    let sw = tape.softmax_rows(wv);
    let out = tape.weighted_sum(&xs, sw);
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: u8,
    pub p_adult: f64,
    pub p_child: f64,
}

impl Prediction {
    /// Softmax over `(adult, child)` logits; ties go to adult.
    pub fn from_logits(adult: f32, child: f32) -> Self {
        let (a, c) = (f64::from(adult), f64::from(child));
        let m = a.max(c);
        let (ea, ec) = ((a - m).exp(), (c - m).exp());
        let s = ea + ec;
        Self { label: u8::from(c > a), p_adult: ea / s, p_child: ec / s }
    }
}

/// One line of the fine-tuning log.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

pub fn finetune_log_csv(rows: &[FinetuneLog]) -> String {
    let mut s = String::from("epoch,loss,train_accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.epoch, r.loss, r.train_accuracy);
    }
    s
}

/// Minimises unweighted cross-entropy with Adam. Returns the per-epoch log.
pub fn finetune(model: &mut ClassifierModel, train: &[Example], seed: u64) -> Result<Vec<FinetuneLog>, ModelError> {
    model.config.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    if let Some(bad) = train.iter().find(|e| e.label > 1) {
        return Err(ModelError::Config(format!("label {} outside {{0, 1}}", bad.label)));
    }
    if train.iter().all(|e| e.label == train[0].label) {
        return Err(ModelError::DegenerateLabels);
    }
    let mut adam_head = AdamState::new(AdamConfig::with_lr(model.config.lr));
    let mut adam_bb = AdamState::new(AdamConfig::with_lr(model.config.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(model.config.epochs);
    let mut step = 0usize;
    for epoch in 0..model.config.epochs {
        order.shuffle(&mut rng(derive_seed(seed, epoch as u64)));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(model.config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|e| usize::from(e.label)).collect();
            let mut tape = Tape::new();
            let head_vars = model.head.bind(&mut tape, |_| true);
            let mut vars = head_vars.clone();
            let bb_vars = if model.mode() == BackboneMode::Frozen {
                Bindings::default()
            } else {
                let b = model.backbone.params.bind(&mut tape, |n| model.trainable(n));
                vars.extend(b.clone());
                b
            };
            let logits = model.forward(&mut tape, &vars, &batch)?;
            for (row, &y) in tape.value(logits).data().chunks(2).zip(&labels) {
                correct += usize::from(usize::from(Prediction::from_logits(row[0], row[1]).label) == y);
            }
            let loss = cross_entropy(&mut tape, logits, &labels);
            let lv = f64::from(tape.value(loss).item());
            if !lv.is_finite() {
                return Err(ModelError::NonFinite { step });
            }
            loss_sum += lv * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let gh = head_vars.collect_grads(&mut grads);
            let gb = bb_vars.collect_grads(&mut grads);
            drop(tape);
            adam_head.step(&mut model.head, &gh)?;
            if !gb.is_empty() {
                adam_bb.step(&mut model.backbone.params, &gb)?;
            }
            step += 1;
        }
        let row = FinetuneLog { epoch, loss: loss_sum / train.len() as f64, train_accuracy: correct as f64 / train.len() as f64 };
        log::debug!("finetune epoch {epoch}: loss {:.4} acc {:.3}", row.loss, row.train_accuracy);
        log.push(row);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, DiffFn};
    use crate::backbone::BackboneConfig;

    fn small_head() -> ClassifierConfig {
        ClassifierConfig {
            conv_channels: 8,
            mlp_hidden: vec![6],
            backbone_trainable: false,
            lr: 1e-2,
            lr_grid: vec![1e-2],
            epochs: 50,
            batch_size: 4,
            ..ClassifierConfig::default()
        }
    }

    fn tone(freq: f64, n: usize, amp: f32) -> Vec<f32> {
        (0..n).map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / 16_000.0).sin() as f32).collect()
    }

    #[test]
    fn layer_weighted_sum_examples() {
        let mut r = rng(1);
        let hs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[4, 5], 1.0, &mut r)).collect();
        let mean = layer_weighted_sum(&hs, &[0.7; 3]).unwrap();
        for i in 0..20 {
            let m = (hs[0].data()[i] + hs[1].data()[i] + hs[2].data()[i]) / 3.0;
            assert!((mean.data()[i] - m).abs() < 1e-12);
        }
        let sat = layer_weighted_sum(&hs, &[0.0, 50.0, 0.0]).unwrap();
        assert!(sat.max_abs_diff(&hs[1]) < 1e-6);
        let target = [0.5f64, 0.3, 0.2];
        let logits: Vec<f64> = target.iter().map(|p| p.ln()).collect();
        let got = layer_weighted_sum(&hs, &logits).unwrap();
        for i in 0..20 {
            let want: f64 = (0..3).map(|l| target[l] * hs[l].data()[i]).sum();
            assert!((got.data()[i] - want).abs() < 1e-6);
        }
        assert!(layer_weighted_sum(&hs[..2], &[0.0; 3]).is_err());
    }

    #[test]
    fn prediction_rule() {
        let p = Prediction::from_logits(3.0, -1.0);
        assert_eq!(p.label, 0);
        assert!((p.p_adult - 0.982).abs() < 5e-4);
        assert_eq!(Prediction::from_logits(0.0, 0.0).label, 0);
        assert_eq!(Prediction::from_logits(-1.0, 3.0).label, 1);
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let bb = Backbone::init(BackboneConfig::tiny(), 3).unwrap();
        let mut m = ClassifierModel::new(small_head(), bb, 4).unwrap();
        let train: Vec<Example> = (0..20)
            .map(|i| {
                let label = (i % 2) as u8;
                let f = if label == 1 { 300.0 } else { 120.0 } * (1.0 + 0.01 * i as f64);
                m.prepare(&[&tone(f, 2000, 0.3)], label).unwrap()
            })
            .collect();
        let log = finetune(&mut m, &train, 5).unwrap();
        assert!(log.iter().any(|l| l.train_accuracy == 1.0), "{log:?}");
        let w = m.layer_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9 && w.iter().all(|&v| v >= 0.0));
        // Frozen mode leaves the backbone untouched; determinism under a seed.
        let mut again = ClassifierModel::new(small_head(), Backbone::init(BackboneConfig::tiny(), 3).unwrap(), 4).unwrap();
        finetune(&mut again, &train, 5).unwrap();
        assert_eq!(again, m);
        assert_eq!(m.backbone.params.to_bytes(), Backbone::<f32>::init(BackboneConfig::tiny(), 3).unwrap().params.to_bytes());
    }

    #[test]
    fn single_class_is_rejected() {
        let bb = Backbone::init(BackboneConfig::tiny(), 3).unwrap();
        let mut m = ClassifierModel::new(small_head(), bb, 4).unwrap();
        let ex = m.prepare(&[&tone(200.0, 1000, 0.3)], 1).unwrap();
        assert!(matches!(finetune(&mut m, &[ex.clone(), ex], 0), Err(ModelError::DegenerateLabels)));
    }

    #[test]
    fn batching_matches_single_evaluation() {
        for trainable in [false, true] {
            let cfg = ClassifierConfig { backbone_trainable: trainable, ..small_head() };
            let m = ClassifierModel::new(cfg, Backbone::init(BackboneConfig::tiny(), 6).unwrap(), 7).unwrap();
            let a = m.prepare(&[&tone(150.0, 1800, 0.2)], 0).unwrap();
            let b = m.prepare(&[&tone(310.0, 3300, 0.4)], 1).unwrap();
            let alone = m.logits(std::slice::from_ref(&a)).unwrap()[0];
            let batched = m.logits(&[b.clone(), a.clone(), b]).unwrap()[1];
            assert!((alone[0] - batched[0]).abs() < 1e-5 && (alone[1] - batched[1]).abs() < 1e-5);
        }
    }

    #[test]
    fn frame_permutation_and_constant_pooling() {
        let m = ClassifierModel::new(small_head(), Backbone::init(BackboneConfig::tiny(), 8).unwrap(), 9).unwrap();
        let ex = m.prepare(&[&tone(220.0, 2400, 0.3)], 0).unwrap();
        let ChannelInput::Hidden(h) = &ex.channels[0] else { panic!("frozen mode caches hidden states") };
        let t = h[0].rows();
        let perm: Vec<usize> = (0..t).rev().collect();
        let shuffled: Vec<Tensor<f32>> = h
            .iter()
            .map(|x| Tensor::new(x.shape().to_vec(), perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap())
            .collect();
        let ex2 = Example { channels: vec![ChannelInput::Hidden(shuffled)], label: 0 };
        let l = m.logits(&[ex, ex2]).unwrap();
        assert!((l[0][0] - l[1][0]).abs() < 1e-5 && (l[0][1] - l[1][1]).abs() < 1e-5);

        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full(&[7, 3], 0.25));
        let p = tape.segment_mean(c, &[0, 7]);
        assert!(tape.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn dual_mode_shares_the_backbone() {
        let cfg = ClassifierConfig { input_mode: InputMode::Dual, ..small_head() };
        let bb = Backbone::init(BackboneConfig::tiny(), 10).unwrap();
        let m = ClassifierModel::new(cfg, bb.clone(), 11).unwrap();
        assert_eq!(m.backbone, bb);
        let s = tone(180.0, 2000, 0.3);
        let ex = m.prepare(&[&s, &s], 1).unwrap();
        let a = m.logits(std::slice::from_ref(&ex)).unwrap();
        assert_eq!(a, m.logits(&[ex]).unwrap());
        assert!(matches!(m.prepare(&[&s, &s[..1500]], 1), Err(ModelError::DualLengthMismatch(2000, 1500))));
        assert!(m.prepare(&[&s[..100], &s[..100]], 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ClassifierModel::new(small_head(), Backbone::init(BackboneConfig::tiny(), 12).unwrap(), 13).unwrap();
        let back = ClassifierModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn lr_must_be_on_grid() {
        let cfg = ClassifierConfig { lr: 1e-3, ..ClassifierConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(ClassifierConfig::default().validate().is_ok());
    }

    fn toy_backbone() -> BackboneConfig {
        BackboneConfig {
            conv_channels: 4,
            conv_kernels: vec![4, 2],
            conv_strides: vec![2, 2],
            layers: 1,
            d_model: 4,
            heads: 2,
            ffn_dim: 6,
            pos_conv_kernel: 3,
            ..BackboneConfig::default()
        }
    }

    struct FinetuneObjective {
        config: ClassifierConfig,
        backbone: Backbone<f64>,
        names: Vec<String>,
        fixed: Vec<(String, Tensor<f64>)>,
        latents: Vec<Tensor<f64>>,
        offsets: Vec<usize>,
        labels: Vec<usize>,
    }

    impl DiffFn for FinetuneObjective {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Var {
            let mut vars = Bindings::from_pairs(self.names.iter().cloned().zip(inputs.iter().copied()));
            vars.extend(Bindings::from_pairs(self.fixed.iter().map(|(n, t)| (n.clone(), tape.constant(t.cast())))));
            let bb = self.backbone.cast::<T>();
            let chans: Vec<ChannelVars> = self.latents.iter().map(|z| ChannelVars::Latent(tape.constant(z.cast()))).collect();
            let logits = head_forward(&self.config, &bb, tape, &vars, &chans, &self.offsets);
            cross_entropy(tape, logits, &self.labels)
        }
    }

    fn objective_error(model: &ClassifierModel, seed: u64) -> f64 {
        let mut r = rng(seed);
        let mut names = Vec::new();
        let mut points = Vec::new();
        let mut fixed = Vec::new();
        let params = model.head.iter().chain(model.backbone.params.iter());
        for (n, t) in params.filter(|(n, _)| !Backbone::<f32>::is_encoder_param(n) && !Backbone::<f32>::is_pretrain_only_param(n)) {
            // Move off the zero/unit initialisation so no gradient vanishes by symmetry.
            let jitter = Tensor::<f64>::randn(t.shape(), 0.3, &mut r);
            let mut p = t.cast::<f64>();
            p.data_mut().iter_mut().zip(jitter.data()).for_each(|(v, j)| *v += j);
            // A key bias shifts all scores of a query row equally, so its
            // gradient is identically zero and only round-off would be compared.
            if n.ends_with(".attn.k.b") {
                fixed.push((n.clone(), p));
            } else {
                names.push(n.clone());
                points.push(p);
            }
        }
        let c = model.backbone.config.conv_channels;
        let n_ch = model.config.input_mode.channels();
        let latents = (0..n_ch).map(|_| Tensor::<f64>::randn(&[8, c], 1.0, &mut r)).collect();
        let f = FinetuneObjective {
            config: model.config.clone(),
            backbone: model.backbone.cast(),
            names,
            fixed,
            latents,
            offsets: vec![0, 5, 8],
            labels: vec![1, 0],
        };
        grad_check::<f64, _>(&f, &points, 1e-6)
    }

    #[test]
    fn finetuning_objective_gradient() {
        let head = ClassifierConfig { conv_channels: 3, conv_layers: 1, mlp_hidden: vec![3], backbone_trainable: true, ..small_head() };
        let base = Backbone::init(toy_backbone(), 2).unwrap();
        let full = ClassifierModel::new(head.clone(), base.clone(), 3).unwrap();
        let err = objective_error(&full, 4);
        assert!(err < 1e-4, "full fine-tuning: {err}");
        let spec = crate::peft::LoraSpec { rank: 2, ..crate::peft::LoraSpec::new(crate::peft::LoraVariant::Qv) };
        let (wrapped, _) = crate::peft::lora_wrap(&base, &spec, 5).unwrap();
        let dual = ClassifierModel::new(ClassifierConfig { input_mode: InputMode::Dual, ..head }, wrapped, 6).unwrap();
        let err = objective_error(&dual, 7);
        assert!(err < 1e-4, "dual LoRA: {err}");
    }
}
