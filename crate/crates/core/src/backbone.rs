//! Self-supervised speech backbone in the wav2vec 2.0 style.
//!
//! ```text
//! X (samples) ─conv stack─▶ Z ─LN─┬─proj─▶ mask ─▶ +posconv ─▶ L pre-norm layers ─▶ hidden states
//!                                 └─▶ Gumbel quantizer ─▶ Q
//! C = proj(LN(last hidden state));  loss = contrastive(C, Q | mask) + α · diversity
//! ```
//!
//! Every conv layer is a valid (unpadded) convolution followed by per-frame
//! layer normalisation and GELU, so the frame count obeys
//! `T = floor((len - receptive_field) / total_stride) + 1`.
//!
//! Parameter names:
//!
//! | name | shape |
//! |------|-------|
//! | `enc.conv{i}.w`, `.b` | `[k_i·C_{i-1}, C]`, `[C]` |
//! | `enc.ln{i}.g`, `.b` | `[C]` |
//! | `feat.ln.g`, `.b`; `feat.proj.w`, `.b` | `[C]`; `[C, d]`, `[d]` |
//! | `ctx.mask_emb` | `[d]` |
//! | `ctx.pos.w`, `.b` | `[k_pos·d, d]`, `[d]` |
//! | `ctx.l{i}.ln1/ln2.g/.b` | `[d]` |
//! | `ctx.l{i}.attn.{q,k,v,o}.w/.b`, `ctx.l{i}.ff1`, `ctx.l{i}.ff2` | linear maps stored `[in, out]` |
//! | `ctx.ln_final.g/.b`, `ctx.proj.w/.b` | `[d]`, `[d, d_q]` |
//! | `quant.logits.w/.b`, `quant.codebook{g}`, `quant.proj.w/.b` | `[C, G·V]`, `[V, cdim/G]`, `[cdim, d_q]` |
//!
//! Linear maps named `X` pick up a low-rank update when `X.lora_a` and
//! `X.lora_b` are bound (see [`crate::peft`]).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample_linear, PIPELINE_RATE};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::ModelError;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Bindings, ParamStore};
use crate::rng::{derive_seed, rng, Rng};
use crate::scalar::Scalar;
use crate::synth::list_wavs;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub conv_channels: usize,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub pos_conv_kernel: usize,
    pub groups: usize,
    pub entries: usize,
    pub codevector_dim: usize,
    pub proj_dim: usize,
    pub mask_ratio: f64,
    pub mask_span: usize,
    /// Contrastive temperature κ.
    pub logit_temp: f64,
    pub gumbel_tau_start: f64,
    pub gumbel_tau_end: f64,
    /// Per-update multiplicative decay of the Gumbel temperature.
    pub gumbel_tau_decay: f64,
    pub num_negatives: usize,
    pub diversity_weight: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            conv_channels: 64,
            conv_kernels: vec![10, 3, 3, 3, 2],
            conv_strides: vec![5, 2, 2, 2, 2],
            layers: 4,
            d_model: 128,
            heads: 4,
            ffn_dim: 512,
            pos_conv_kernel: 15,
            groups: 2,
            entries: 8,
            codevector_dim: 128,
            proj_dim: 128,
            mask_ratio: 0.5,
            mask_span: 10,
            logit_temp: 0.1,
            gumbel_tau_start: 2.0,
            gumbel_tau_end: 0.5,
            gumbel_tau_decay: 0.999,
            num_negatives: 10,
            diversity_weight: 0.1,
        }
    }
}

impl BackboneConfig {
    /// The desk-scale default.
    pub fn desk() -> Self {
        Self::default()
    }

    /// A narrower variant with the same conv geometry, used where many models
    /// are trained (the experiment matrix and the test-suite).
    pub fn tiny() -> Self {
        Self {
            conv_channels: 32,
            layers: 2,
            d_model: 32,
            heads: 2,
            ffn_dim: 64,
            pos_conv_kernel: 9,
            codevector_dim: 32,
            proj_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.conv_kernels.is_empty() || self.conv_kernels.len() != self.conv_strides.len() {
            return bad("conv_kernels and conv_strides must be non-empty and equally long".into());
        }
        if self.conv_kernels.iter().chain(&self.conv_strides).any(|&v| v == 0) {
            return bad("conv kernels and strides must be positive".into());
        }
        for (name, v) in [
            ("conv_channels", self.conv_channels),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("groups", self.groups),
            ("entries", self.entries),
            ("codevector_dim", self.codevector_dim),
            ("proj_dim", self.proj_dim),
            ("mask_span", self.mask_span),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.codevector_dim % self.groups != 0 {
            return bad(format!("codevector_dim {} not divisible by groups {}", self.codevector_dim, self.groups));
        }
        if self.pos_conv_kernel % 2 == 0 {
            return bad("pos_conv_kernel must be odd".into());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0, 1]".into());
        }
        if !(self.logit_temp > 0.0) {
            return bad("logit_temp must be positive".into());
        }
        if !(self.gumbel_tau_end > 0.0 && self.gumbel_tau_start >= self.gumbel_tau_end) {
            return bad("need gumbel_tau_start >= gumbel_tau_end > 0".into());
        }
        if !(self.gumbel_tau_decay > 0.0 && self.gumbel_tau_decay <= 1.0) {
            return bad("gumbel_tau_decay must lie in (0, 1]".into());
        }
        if self.num_negatives == 0 {
            return bad("num_negatives must be positive".into());
        }
        if !(self.diversity_weight >= 0.0) {
            return bad("diversity_weight must be nonnegative".into());
        }
        Ok(())
    }

    /// Input samples seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides) {
            rf += (k - 1) * jump;
            jump *= s;
        }
        rf
    }

    pub fn total_stride(&self) -> usize {
        self.conv_strides.iter().product()
    }

    /// Frame count for `len` samples, or `None` below the receptive field.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        let rf = self.receptive_field();
        (len >= rf).then(|| (len - rf) / self.total_stride() + 1)
    }

    /// Samples needed to produce exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        self.receptive_field() + frames.saturating_sub(1) * self.total_stride()
    }

    /// `max(τ_end, τ_start · decay^step)`.
    pub fn gumbel_tau(&self, step: u64) -> f64 {
        (self.gumbel_tau_start * self.gumbel_tau_decay.powf(step as f64)).max(self.gumbel_tau_end)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Backbone parameters plus their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub params: ParamStore<T>,
    /// `alpha / r` when LoRA factors are present in `params`.
    pub lora_scale: Option<f64>,
}

/// Outputs of the quantizer for one sequence.
pub struct QuantOutput {
    /// `[T, d_q]`
    pub q: Var,
    /// Noise-free code distributions, `[T·G, V]`.
    pub probs: Var,
    /// Selected entry per `(frame, group)`, row-major.
    pub codes: Vec<usize>,
}

/// How the quantizer turns code logits into a selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    /// Hard one-hot forward, soft gradient (training and inference).
    StraightThrough,
    /// Plain Gumbel-softmax relaxation; smooth, used for gradient checks.
    Soft,
}

fn layer_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.g"), format!("{prefix}.b")]
}

impl<T: Scalar> Backbone<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng(seed);
        let mut p = ParamStore::new();
        let c = config.conv_channels;
        let d = config.d_model;
        let mut cin = 1;
        for (i, &k) in config.conv_kernels.iter().enumerate() {
            let fan_in = k * cin;
            p.insert(format!("enc.conv{i}.w"), Tensor::randn(&[fan_in, c], (2.0 / fan_in as f64).sqrt(), &mut r));
            p.insert(format!("enc.conv{i}.b"), Tensor::zeros(&[c]));
            insert_ln(&mut p, &format!("enc.ln{i}"), c);
            cin = c;
        }
        insert_ln(&mut p, "feat.ln", c);
        insert_linear(&mut p, "feat.proj", c, d, &mut r);
        p.insert("ctx.mask_emb", Tensor::uniform(&[d], 1.0, &mut r));
        let kp = config.pos_conv_kernel;
        p.insert("ctx.pos.w", Tensor::randn(&[kp * d, d], (1.0 / (kp * d) as f64).sqrt(), &mut r));
        p.insert("ctx.pos.b", Tensor::zeros(&[d]));
        for l in 0..config.layers {
            insert_ln(&mut p, &format!("ctx.l{l}.ln1"), d);
            insert_ln(&mut p, &format!("ctx.l{l}.ln2"), d);
            for m in ["q", "k", "v", "o"] {
                insert_linear(&mut p, &format!("ctx.l{l}.attn.{m}"), d, d, &mut r);
            }
            insert_linear(&mut p, &format!("ctx.l{l}.ff1"), d, config.ffn_dim, &mut r);
            insert_linear(&mut p, &format!("ctx.l{l}.ff2"), config.ffn_dim, d, &mut r);
        }
        insert_ln(&mut p, "ctx.ln_final", d);
        insert_linear(&mut p, "ctx.proj", d, config.proj_dim, &mut r);
        // Unit-variance code logits make the initial selection input-dependent
        // rather than dominated by the Gumbel noise.
        p.insert("quant.logits.w", Tensor::randn(&[c, config.groups * config.entries], 1.0, &mut r));
        p.insert("quant.logits.b", Tensor::zeros(&[config.groups * config.entries]));
        let per_group = config.codevector_dim / config.groups;
        for g in 0..config.groups {
            let mut cb = Tensor::uniform(&[config.entries, per_group], 0.5, &mut r);
            cb.data_mut().iter_mut().for_each(|v| *v += T::lit(0.5));
            p.insert(format!("quant.codebook{g}"), cb);
        }
        insert_linear(&mut p, "quant.proj", config.codevector_dim, config.proj_dim, &mut r);
        Ok(Self { config, params: p, lora_scale: None })
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone { config: self.config.clone(), params: self.params.cast(), lora_scale: self.lora_scale }
    }

    /// Names of the conv feature encoder parameters.
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.")
    }

    /// Parameters used by the pre-training objective only.
    pub fn is_pretrain_only_param(name: &str) -> bool {
        name.starts_with("quant.") || name.starts_with("ctx.ln_final") || name.starts_with("ctx.proj")
    }

    pub fn check_length(&self, len: usize) -> Result<usize, ModelError> {
        self.config
            .n_frames(len)
            .ok_or(ModelError::SegmentTooShort { samples: len, receptive_field: self.config.receptive_field() })
    }

    fn linear(&self, tape: &mut Tape<T>, vars: &Bindings, name: &str, x: Var) -> Var {
        let w = vars.var(&format!("{name}.w"));
        let b = vars.var(&format!("{name}.b"));
        let y = tape.matmul(x, w);
        let mut y = tape.add_row(y, b);
        if let (Some(a), Some(bb), Some(s)) =
            (vars.try_var(&format!("{name}.lora_a")), vars.try_var(&format!("{name}.lora_b")), self.lora_scale)
        {
            let xa = tape.matmul_nt(x, a);
            let delta = tape.matmul_nt(xa, bb);
            let delta = tape.scale(delta, T::lit(s));
            y = tape.add(y, delta);
        }
        y
    }

    fn layer_norm(&self, tape: &mut Tape<T>, vars: &Bindings, name: &str, x: Var) -> Var {
        let [g, b] = layer_names(name);
        tape.layer_norm_rows(x, vars.var(&g), vars.var(&b), T::lit(LN_EPS))
    }

    /// X → Z: `[T, conv_channels]`.
    pub fn conv_encode(&self, tape: &mut Tape<T>, vars: &Bindings, samples: &[T]) -> Result<Var, ModelError> {
        self.check_length(samples.len())?;
        let x = Tensor::new(vec![samples.len(), 1], samples.to_vec())?;
        let mut h = tape.constant(x);
        for (i, (&k, &s)) in self.config.conv_kernels.iter().zip(&self.config.conv_strides).enumerate() {
            let w = vars.var(&format!("enc.conv{i}.w"));
            let b = vars.var(&format!("enc.conv{i}.b"));
            h = tape.conv1d(h, w, b, k, s, 0);
            h = self.layer_norm(tape, vars, &format!("enc.ln{i}"), h);
            h = tape.gelu(h);
        }
        Ok(h)
    }

    /// Z → (LN(Z), projected features `[T, d]`).
    pub fn feature_projection(&self, tape: &mut Tape<T>, vars: &Bindings, z: Var) -> (Var, Var) {
        let zn = self.layer_norm(tape, vars, "feat.ln", z);
        let proj = self.linear(tape, vars, "feat.proj", zn);
        (zn, proj)
    }

    /// Projected features → L+1 hidden states `[T, d]`: the embedding output
    /// (after masking and positional convolution) and each layer's output.
    pub fn contextualize(&self, tape: &mut Tape<T>, vars: &Bindings, features: Var, mask: Option<&[bool]>) -> Vec<Var> {
        let t = tape.value(features).rows();
        self.contextualize_segments(tape, vars, features, &[0, t], mask)
    }

    /// [`Backbone::contextualize`] over several sequences stacked by rows,
    /// `offsets[i]..offsets[i+1]` each. Positional convolution and attention
    /// stay inside each sequence.
    pub fn contextualize_segments(
        &self,
        tape: &mut Tape<T>,
        vars: &Bindings,
        features: Var,
        offsets: &[usize],
        mask: Option<&[bool]>,
    ) -> Vec<Var> {
        let mut x = features;
        if let Some(m) = mask {
            if m.iter().any(|&b| b) {
                x = tape.mask_rows(x, vars.var("ctx.mask_emb"), m);
            }
        }
        let k = self.config.pos_conv_kernel;
        let pos = tape.conv1d_segments(x, vars.var("ctx.pos.w"), vars.var("ctx.pos.b"), k, 1, k / 2, offsets);
        let pos = tape.gelu(pos);
        x = tape.add(x, pos);
        let mut states = vec![x];
        for l in 0..self.config.layers {
            let h = self.layer_norm(tape, vars, &format!("ctx.l{l}.ln1"), x);
            let a = self.attention(tape, vars, l, h, offsets);
            x = tape.add(x, a);
            let h = self.layer_norm(tape, vars, &format!("ctx.l{l}.ln2"), x);
            let h = self.linear(tape, vars, &format!("ctx.l{l}.ff1"), h);
            let h = tape.gelu(h);
            let h = self.linear(tape, vars, &format!("ctx.l{l}.ff2"), h);
            x = tape.add(x, h);
            states.push(x);
        }
        states
    }

    fn attention(&self, tape: &mut Tape<T>, vars: &Bindings, layer: usize, x: Var, offsets: &[usize]) -> Var {
        let p = format!("ctx.l{layer}.attn");
        let q = self.linear(tape, vars, &format!("{p}.q"), x);
        let k = self.linear(tape, vars, &format!("{p}.k"), x);
        let v = self.linear(tape, vars, &format!("{p}.v"), x);
        let a = tape.attention_segments(q, k, v, self.config.heads, offsets);
        self.linear(tape, vars, &format!("{p}.o"), a)
    }

    /// Context vectors for the contrastive task: `[T, d_q]`.
    pub fn context_projection(&self, tape: &mut Tape<T>, vars: &Bindings, last: Var) -> Var {
        let h = self.layer_norm(tape, vars, "ctx.ln_final", last);
        self.linear(tape, vars, "ctx.proj", h)
    }

    /// LN(Z) → Q. `gumbel` supplies noise for training; `None` selects by
    /// the plain logits.
    pub fn quantize(
        &self,
        tape: &mut Tape<T>,
        vars: &Bindings,
        z_norm: Var,
        tau: f64,
        gumbel: Option<&mut Rng>,
        selection: Selection,
    ) -> QuantOutput {
        let (g, v) = (self.config.groups, self.config.entries);
        let logits = self.linear(tape, vars, "quant.logits", z_norm);
        let t = tape.value(logits).rows();
        let flat = tape.reshape(logits, &[t * g, v]);
        let probs = tape.softmax_rows(flat);
        let perturbed = match gumbel {
            Some(r) => {
                let noise: Vec<f64> = (0..t * g * v).map(|_| gumbel_noise(r)).collect();
                let n = tape.constant(Tensor::from_f64(&[t * g, v], &noise).expect("noise shape"));
                tape.add(flat, n)
            }
            None => flat,
        };
        let scaled = tape.scale(perturbed, T::lit(1.0 / tau));
        let soft = tape.softmax_rows(scaled);
        let codes: Vec<usize> = tape.value(soft).data().chunks(v).map(argmax).collect();
        let sel = match selection {
            Selection::Soft => soft,
            Selection::StraightThrough => {
                let mut hard = Tensor::zeros(&[t * g, v]);
                for (row, &c) in codes.iter().enumerate() {
                    hard.data_mut()[row * v + c] = T::one();
                }
                tape.straight_through(soft, hard)
            }
        };
        let parts: Vec<Var> = (0..g)
            .map(|gi| {
                let idx: Vec<usize> = (0..t).map(|i| i * g + gi).collect();
                let rows = tape.gather_rows(sel, &idx);
                tape.matmul(rows, vars.var(&format!("quant.codebook{gi}")))
            })
            .collect();
        let cat = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) };
        let q = self.linear(tape, vars, "quant.proj", cat);
        QuantOutput { q, probs, codes }
    }

    /// Hidden states of a frozen model, as plain tensors.
    pub fn hidden_states(&self, samples: &[T]) -> Result<Vec<Tensor<T>>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let z = self.conv_encode(&mut tape, &vars, samples)?;
        let (_, f) = self.feature_projection(&mut tape, &vars, z);
        let hs = self.contextualize(&mut tape, &vars, f, None);
        Ok(hs.into_iter().map(|h| tape.value(h).clone()).collect())
    }

    /// Conv features Z of a frozen encoder.
    pub fn encode_frozen(&self, samples: &[T]) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let z = self.conv_encode(&mut tape, &vars, samples)?;
        Ok(tape.value(z).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        ck.meta.insert("kind".into(), "backbone".into());
        ck.meta.insert("backbone_config".into(), serde_json::to_string(&self.config).expect("config serialises"));
        ck.sections.insert("backbone".into(), self.params.clone());
        ck
    }

    /// Rebuilds a backbone, checking every parameter name and shape against
    /// the stored configuration.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self, ModelError> {
        let config: BackboneConfig = serde_json::from_str(ck.meta("backbone_config")?)
            .map_err(|e| ModelError::Config(format!("stored backbone config: {e}")))?;
        let template = Self::init(config.clone(), 0)?;
        let params = ck.section("backbone")?.clone();
        template.params.check_compatible(&params)?;
        params.check_compatible(&template.params).map_err(|_| {
            ModelError::Config("checkpoint carries parameters the configuration does not define".into())
        })?;
        Ok(Self { config, params, lora_scale: None })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_checkpoint().save(path)?)
    }
}

fn insert_ln<T: Scalar>(p: &mut ParamStore<T>, name: &str, width: usize) {
    let [g, b] = layer_names(name);
    p.insert(g, Tensor::ones(&[width]));
    p.insert(b, Tensor::zeros(&[width]));
}

fn insert_linear<T: Scalar>(p: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, r: &mut Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, r));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Standard Gumbel sample `-ln(-ln u)`, `u ∈ (0, 1)`.
pub fn gumbel_noise(r: &mut Rng) -> f64 {
    let u: f64 = r.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Gumbel-softmax on one row: `softmax((logits + noise) / τ)` and the index
/// of its hard one-hot selection (first maximum).
pub fn gumbel_softmax_row(logits: &[f64], noise: &[f64], tau: f64) -> (Vec<f64>, usize) {
    let z: Vec<f64> = logits.iter().zip(noise).map(|(l, n)| (l + n) / tau).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    let soft: Vec<f64> = e.iter().map(|v| v / s).collect();
    let idx = argmax(&soft);
    (soft, idx)
}

/// Span mask over `t` frames: spans of `span` frames with uniform starts in
/// `0..t` (truncated at `t`) are added until at least `ratio · t` frames are
/// masked.
pub fn sample_mask(t: usize, ratio: f64, span: usize, r: &mut Rng) -> Result<Vec<bool>, ModelError> {
    if span == 0 || t < span {
        return Err(ModelError::Config(format!("mask span {span} needs at least that many frames, got {t}")));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(ModelError::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let mut mask = vec![false; t];
    let mut count = 0usize;
    while (count as f64) < ratio * t as f64 {
        let start = r.random_range(0..t);
        for m in mask.iter_mut().take((start + span).min(t)).skip(start) {
            if !*m {
                *m = true;
                count += 1;
            }
        }
    }
    Ok(mask)
}

/// For each masked frame, `k` distinct other masked frames, as positions
/// into the masked-frame list.
pub fn sample_negatives(n_masked: usize, k: usize, r: &mut Rng) -> Result<Vec<Vec<usize>>, ModelError> {
    if n_masked < k + 1 {
        return Err(ModelError::InsufficientNegatives { masked: n_masked, needed: k + 1 });
    }
    Ok((0..n_masked)
        .map(|i| {
            index::sample(r, n_masked - 1, k)
                .into_iter()
                .map(|j| if j < i { j } else { j + 1 })
                .collect()
        })
        .collect())
}

/// Per-anchor contrastive terms `-log softmax_0(cos(c_t, ·)/κ)` over
/// `[q_t, negatives]`, `[M, 1]`. Negatives bitwise equal to the positive are
/// excluded. `masked` lists the anchor frames and
/// `negatives[i]` indexes into `masked`.
pub fn contrastive_terms<T: Scalar>(
    tape: &mut Tape<T>,
    c: Var,
    q: Var,
    masked: &[usize],
    negatives: &[Vec<usize>],
    kappa: f64,
) -> Var {
    assert_eq!(masked.len(), negatives.len(), "contrastive: one negative list per anchor");
    let cm = tape.gather_rows(c, masked);
    let qm = tape.gather_rows(q, masked);
    let cn = tape.normalize_rows(cm, T::lit(NORM_EPS));
    let qn = tape.normalize_rows(qm, T::lit(NORM_EPS));
    let sim = tape.matmul_nt(cn, qn);
    let sim = tape.scale(sim, T::lit(1.0 / kappa));
    let idx: Vec<usize> = negatives
        .iter()
        .enumerate()
        .flat_map(|(i, negs)| std::iter::once(i).chain(negs.iter().copied()))
        .collect();
    let mut cand = tape.gather_per_row(sim, &idx);
    // A negative whose quantized vector equals the positive cannot be told
    // apart from it; it is dropped from the softmax.
    let k1 = tape.value(cand).cols();
    let qv = tape.value(qm);
    let mut exclude = vec![T::zero(); idx.len()];
    let mut any = false;
    for (i, negs) in negatives.iter().enumerate() {
        for (j, &n) in negs.iter().enumerate() {
            if qv.row(i) == qv.row(n) {
                exclude[i * k1 + 1 + j] = T::lit(-1e9);
                any = true;
            }
        }
    }
    if any {
        let bias = tape.constant(Tensor::new(vec![negatives.len(), k1], exclude).expect("bias shape"));
        cand = tape.add(cand, bias);
    }
    let ls = tape.log_softmax_rows(cand);
    let pos = tape.slice_cols(ls, 0, 1);
    tape.neg(pos)
}

/// Mean contrastive loss over masked frames, drawing `k` negatives per anchor
/// from the other masked frames.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    c: Var,
    q: Var,
    mask: &[bool],
    k: usize,
    kappa: f64,
    r: &mut Rng,
) -> Result<Var, ModelError> {
    let masked: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    let negatives = sample_negatives(masked.len(), k, r)?;
    let terms = contrastive_terms(tape, c, q, &masked, &negatives, kappa);
    Ok(tape.mean(terms))
}

/// `(G·V - Σ_g exp(H(p̄_g))) / (G·V)` for code distributions `probs`
/// `[N·G, V]` (rows ordered frame-major), with `p̄_g` the mean over frames.
pub fn diversity_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, groups: usize) -> Var {
    let v = tape.value(probs).cols();
    let n = tape.value(probs).rows() / groups;
    let wide = tape.reshape(probs, &[n, groups * v]);
    let avg = tape.mean_rows(wide);
    let avg = tape.reshape(avg, &[groups, v]);
    let plogp = tape.xlogx(avg);
    let neg_h = tape.sum_last(plogp);
    let h = tape.neg(neg_h);
    let perplexity = tape.exp(h);
    let total = tape.sum(perplexity);
    let gv = (groups * v) as f64;
    let frac = tape.scale(total, T::lit(-1.0 / gv));
    tape.add_scalar(frac, T::one())
}

/// Mean over groups of `exp(H(p̄_g))` computed from plain values.
pub fn codebook_perplexity<T: Scalar>(probs: &Tensor<T>, groups: usize) -> f64 {
    let v = probs.cols();
    let n = probs.rows() / groups;
    let mut total = 0.0;
    for g in 0..groups {
        let mut avg = vec![0.0f64; v];
        for i in 0..n {
            for (a, &p) in avg.iter_mut().zip(probs.row(i * groups + g)) {
                *a += p.to_f64c() / n as f64;
            }
        }
        let h: f64 = -avg.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        total += h.exp();
    }
    total / groups as f64
}

/// Scalar parts of one pre-training objective evaluation.
pub struct PretrainLoss {
    pub total: Var,
    pub contrastive: Var,
    pub diversity: Var,
    pub perplexity: f64,
    pub anchors: usize,
}

/// Per-batch randomness: one mask, negative set and Gumbel draw per sequence.
pub struct StepNoise {
    pub rng: Rng,
    pub gumbel: bool,
}

impl<T: Scalar> Backbone<T> {
    /// Builds the pre-training objective for a ragged batch of crops.
    /// Sequences with fewer than two masked frames are skipped; the negative
    /// count is clamped to the masked frames available. Returns `None` when
    /// no sequence yields an anchor.
    pub fn pretrain_loss(
        &self,
        tape: &mut Tape<T>,
        vars: &Bindings,
        batch: &[Vec<T>],
        tau: f64,
        noise: &mut StepNoise,
        selection: Selection,
    ) -> Result<Option<PretrainLoss>, ModelError> {
        let cfg = &self.config;
        let mut terms = Vec::new();
        let mut probs = Vec::new();
        let mut anchors = 0;
        for samples in batch {
            let z = self.conv_encode(tape, vars, samples)?;
            let t = tape.value(z).rows();
            let span = cfg.mask_span.min(t);
            let mask = sample_mask(t, cfg.mask_ratio, span, &mut noise.rng)?;
            let masked: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
            let (zn, feats) = self.feature_projection(tape, vars, z);
            let gumbel = if noise.gumbel { Some(&mut noise.rng) } else { None };
            let qo = self.quantize(tape, vars, zn, tau, gumbel, selection);
            probs.push(qo.probs);
            if masked.len() < 2 {
                continue;
            }
            let states = self.contextualize(tape, vars, feats, Some(&mask));
            let c = self.context_projection(tape, vars, *states.last().expect("L+1 states"));
            let k = cfg.num_negatives.min(masked.len() - 1);
            let negatives = sample_negatives(masked.len(), k, &mut noise.rng)?;
            terms.push(contrastive_terms(tape, c, qo.q, &masked, &negatives, cfg.logit_temp));
            anchors += masked.len();
        }
        if terms.is_empty() {
            return Ok(None);
        }
        let all = if terms.len() == 1 { terms[0] } else { tape.concat_rows(&terms) };
        let contrastive = tape.mean(all);
        let p = if probs.len() == 1 { probs[0] } else { tape.concat_rows(&probs) };
        let perplexity = codebook_perplexity(tape.value(p), cfg.groups);
        let diversity = diversity_loss(tape, p, cfg.groups);
        let weighted = tape.scale(diversity, T::lit(cfg.diversity_weight));
        let total = tape.add(contrastive, weighted);
        Ok(Some(PretrainLoss { total, contrastive, diversity, perplexity, anchors }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Maximum utterance length per step, in seconds; longer utterances are
    /// randomly cropped.
    pub crop_s: f64,
    /// Upper bound on utterances read from the corpus (0 = all).
    pub max_utterances: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 40, lr: 1e-4, batch_size: 8, crop_s: 1.5, max_utterances: 0 }
    }
}

/// One line of the pre-training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub contrastive_loss: f64,
    pub diversity_loss: f64,
    pub codebook_perplexity: f64,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from("epoch,contrastive_loss,diversity_loss,codebook_perplexity\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.epoch, r.contrastive_loss, r.diversity_loss, r.codebook_perplexity);
    }
    s
}

/// Reads every WAV of `dir` at the pipeline rate.
pub fn load_utterances(dir: &Path, limit: usize) -> Result<Vec<Vec<f32>>, ModelError> {
    let paths = list_wavs(dir).map_err(|e| ModelError::Config(e.to_string()))?;
    let take = if limit == 0 { paths.len() } else { limit.min(paths.len()) };
    paths[..take]
        .iter()
        .map(|p| {
            let w = read_wav(p)?;
            let w = if w.sample_rate == PIPELINE_RATE { w } else { resample_linear(&w, PIPELINE_RATE)? };
            Ok(w.samples)
        })
        .collect()
}

/// Trains `model` in place on `utterances` and returns the per-epoch log.
pub fn pretrain(
    model: &mut Backbone<f32>,
    utterances: &[Vec<f32>],
    pcfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<EpochLog>, ModelError> {
    let rf = model.config.receptive_field();
    let usable: Vec<&Vec<f32>> = utterances.iter().filter(|u| u.len() >= rf).collect();
    if usable.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    if pcfg.batch_size == 0 || !(pcfg.crop_s > 0.0) || !pcfg.lr.is_finite() || pcfg.lr < 0.0 {
        return Err(ModelError::Config("need batch_size > 0, crop_s > 0 and a finite lr >= 0".into()));
    }
    let crop = ((pcfg.crop_s * f64::from(PIPELINE_RATE)) as usize).max(rf);
    let mut adam = AdamState::new(AdamConfig::with_lr(pcfg.lr));
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut log = Vec::with_capacity(pcfg.epochs);
    let mut step: u64 = 0;
    for epoch in 0..pcfg.epochs {
        let mut r = rng(derive_seed(seed, epoch as u64));
        order.shuffle(&mut r);
        let (mut sum_c, mut sum_d, mut sum_p, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(pcfg.batch_size) {
            let batch: Vec<Vec<f32>> = chunk
                .iter()
                .map(|&i| {
                    let u = usable[i];
                    if u.len() > crop {
                        let start = r.random_range(0..=u.len() - crop);
                        u[start..start + crop].to_vec()
                    } else {
                        u.clone()
                    }
                })
                .collect();
            let tau = model.config.gumbel_tau(step);
            let mut noise = StepNoise { rng: rng(derive_seed(seed ^ 0xA5A5, step)), gumbel: true };
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, |_| true);
            let Some(loss) = model.pretrain_loss(&mut tape, &vars, &batch, tau, &mut noise, Selection::StraightThrough)?
            else {
                continue;
            };
            let total = tape.value(loss.total).item();
            if !total.is_finite() {
                return Err(ModelError::NonFinite { step: step as usize });
            }
            sum_c += f64::from(tape.value(loss.contrastive).item());
            sum_d += f64::from(tape.value(loss.diversity).item());
            sum_p += loss.perplexity;
            batches += 1;
            let mut grads = tape.backward(loss.total)?;
            let g = vars.collect_grads(&mut grads);
            drop(tape);
            adam.step(&mut model.params, &g)?;
            step += 1;
        }
        let n = batches.max(1) as f64;
        let row = EpochLog { epoch, contrastive_loss: sum_c / n, diversity_loss: sum_d / n, codebook_perplexity: sum_p / n };
        log::info!(
            "pretrain epoch {epoch}: contrastive {:.4} diversity {:.4} perplexity {:.3}",
            row.contrastive_loss,
            row.diversity_loss,
            row.codebook_perplexity
        );
        log.push(row);
    }
    Ok(log)
}

/// Parameter counts per top-level block.
pub fn parameter_summary<T: Scalar>(params: &ParamStore<T>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (name, t) in params.iter() {
        let block = name.split('.').next().unwrap_or(name).to_string();
        *out.entry(block).or_insert(0) += t.numel();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, DiffFn};

    #[test]
    fn stride_arithmetic_matches_layer_by_layer_oracle() {
        let cfg = BackboneConfig::desk();
        assert_eq!(cfg.receptive_field(), 120);
        assert_eq!(cfg.total_stride(), 80);
        for len in [120usize, 121, 199, 200, 4000, 16_000, 24_001] {
            let mut l = len;
            for (&k, &s) in cfg.conv_kernels.iter().zip(&cfg.conv_strides) {
                l = (l - k) / s + 1;
            }
            assert_eq!(cfg.n_frames(len), Some(l), "len {len}");
        }
        assert_eq!(cfg.n_frames(16_000), Some(199));
        assert_eq!(cfg.n_frames(119), None);
        assert_eq!(cfg.n_frames(cfg.samples_for_frames(37)), Some(37));
    }

    #[test]
    fn encoder_shapes_and_errors() {
        let m = Backbone::<f32>::init(BackboneConfig::tiny(), 1).unwrap();
        let mut tape = Tape::new();
        let vars = m.params.bind(&mut tape, |_| false);
        let z = m.conv_encode(&mut tape, &vars, &vec![0.0; 120]).unwrap();
        assert_eq!(tape.shape(z), &[1, 32]);
        assert!(tape.value(z).all_finite());
        assert!(matches!(
            m.conv_encode(&mut tape, &vars, &vec![0.0; 119]),
            Err(ModelError::SegmentTooShort { samples: 119, receptive_field: 120 })
        ));
        let hs = m.hidden_states(&vec![0.01; 4000]).unwrap();
        assert_eq!(hs.len(), 3);
        assert!(hs.iter().all(|h| h.shape() == [49, 32]));
    }

    #[test]
    fn mask_counts() {
        let mut r = rng(3);
        assert!(sample_mask(100, 0.0, 10, &mut r).unwrap().iter().all(|&m| !m));
        for seed in 0..200 {
            let m = sample_mask(100, 0.5, 10, &mut rng(seed)).unwrap();
            let c = m.iter().filter(|&&b| b).count();
            assert!((50..=59).contains(&c), "{c}");
            assert_eq!(m, sample_mask(100, 0.5, 10, &mut rng(seed)).unwrap());
        }
        assert!(sample_mask(5, 0.5, 10, &mut r).is_err());
    }

    #[test]
    fn negatives_are_distinct_and_exclude_anchor() {
        let negs = sample_negatives(12, 10, &mut rng(1)).unwrap();
        for (i, n) in negs.iter().enumerate() {
            let mut s = n.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 10);
            assert!(!n.contains(&i) && n.iter().all(|&j| j < 12));
        }
        assert!(matches!(sample_negatives(10, 10, &mut rng(1)), Err(ModelError::InsufficientNegatives { .. })));
    }

    #[test]
    fn gumbel_selection_examples() {
        let (soft, idx) = gumbel_softmax_row(&[2.0, 1.0, 0.0], &[0.0; 3], 1.0);
        assert_eq!(idx, 0);
        for (a, b) in soft.iter().zip([0.6652, 0.2447, 0.0900]) {
            assert!((a - b).abs() < 5e-5, "{soft:?}");
        }
        let (soft, idx) = gumbel_softmax_row(&[2.0, 1.0, 0.0], &[0.0; 3], 1e-4);
        assert_eq!(idx, 0);
        assert!((soft[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tau_schedule_is_non_increasing() {
        let cfg = BackboneConfig::default();
        let mut prev = f64::INFINITY;
        for s in (0..20_000).step_by(97) {
            let t = cfg.gumbel_tau(s);
            assert!(t <= prev && t >= cfg.gumbel_tau_end);
            prev = t;
        }
        assert_eq!(cfg.gumbel_tau(0), 2.0);
        assert_eq!(cfg.gumbel_tau(1_000_000), 0.5);
    }

    #[test]
    fn all_masked_context_ignores_input() {
        let m = Backbone::<f64>::init(BackboneConfig::tiny(), 2).unwrap();
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let vars = m.params.bind(&mut tape, |_| false);
            let x = tape.constant(Tensor::randn(&[12, 32], 1.0, &mut rng(seed)));
            let hs = m.contextualize(&mut tape, &vars, x, Some(&[true; 12]));
            tape.value(*hs.last().unwrap()).clone()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn frame_order_matters() {
        let m = Backbone::<f64>::init(BackboneConfig::tiny(), 4).unwrap();
        let x = Tensor::<f64>::randn(&[10, 32], 1.0, &mut rng(5));
        let mut rows: Vec<&[f64]> = (0..10).map(|i| x.row(i)).collect();
        rows.reverse();
        let rev = Tensor::new(vec![10, 32], rows.concat()).unwrap();
        let run = |t: &Tensor<f64>| {
            let mut tape = Tape::new();
            let vars = m.params.bind(&mut tape, |_| false);
            let v = tape.constant(t.clone());
            let hs = m.contextualize(&mut tape, &vars, v, None);
            tape.value(*hs.last().unwrap()).clone()
        };
        let a = run(&x);
        let b = run(&rev);
        // Compare frame i of the original with frame 9-i of the reversal.
        let worst = (0..10)
            .flat_map(|i| a.row(i).iter().zip(b.row(9 - i)).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        assert!(worst > 1e-3, "{worst}");
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let m = Backbone::<f32>::init(BackboneConfig::tiny(), 9).unwrap();
        let ck = m.to_checkpoint();
        let back = Backbone::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut broken = ck.clone();
        broken.sections.get_mut("backbone").unwrap().insert("ctx.mask_emb", Tensor::zeros(&[3]));
        assert!(Backbone::from_checkpoint(&broken).is_err());
    }

    fn toy_config() -> BackboneConfig {
        BackboneConfig {
            conv_channels: 4,
            conv_kernels: vec![4, 2],
            conv_strides: vec![2, 2],
            layers: 1,
            d_model: 4,
            heads: 2,
            ffn_dim: 6,
            pos_conv_kernel: 3,
            groups: 2,
            entries: 3,
            codevector_dim: 4,
            proj_dim: 3,
            mask_span: 2,
            num_negatives: 2,
            ..BackboneConfig::default()
        }
    }

    struct PretrainObjective {
        model: Backbone<f64>,
        names: Vec<String>,
        fixed: Vec<(String, Tensor<f64>)>,
        batch: Vec<Vec<f64>>,
    }

    impl DiffFn for PretrainObjective {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Var {
            let mut vars = Bindings::from_pairs(self.names.iter().cloned().zip(inputs.iter().copied()));
            vars.extend(Bindings::from_pairs(self.fixed.iter().map(|(n, t)| (n.clone(), tape.constant(t.cast())))));
            let m = self.model.cast::<T>();
            let batch: Vec<Vec<T>> = self.batch.iter().map(|b| b.iter().map(|&v| T::lit(v)).collect()).collect();
            let mut noise = StepNoise { rng: rng(11), gumbel: true };
            m.pretrain_loss(tape, &vars, &batch, 1.5, &mut noise, Selection::Soft).unwrap().unwrap().total
        }
    }

    #[test]
    fn pretraining_objective_gradient() {
        let model = Backbone::<f64>::init(toy_config(), 5).unwrap();
        let mut r = rng(6);
        let batch = vec![Tensor::<f64>::randn(&[40], 0.5, &mut r).into_data(), Tensor::<f64>::randn(&[36], 0.5, &mut r).into_data()];
        let (mut names, mut points, mut fixed) = (Vec::new(), Vec::new(), Vec::new());
        for (n, t) in model.params.iter() {
            let mut t = t.clone();
            // Perturb the LN gains so no gradient is identically zero by symmetry.
            if n.ends_with(".g") {
                let jitter = Tensor::<f64>::randn(t.shape(), 0.3, &mut r);
                t.data_mut().iter_mut().zip(jitter.data()).for_each(|(v, j)| *v += j);
            }
            // Key biases shift every score of a query row equally: zero gradient.
            if n.ends_with(".attn.k.b") {
                fixed.push((n.clone(), t));
            } else {
                names.push(n.clone());
                points.push(t);
            }
        }
        let f = PretrainObjective { model, names, fixed, batch };
        let err = grad_check::<f64, _>(&f, &points, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn pretrain_is_deterministic_and_lr_zero_is_identity() {
        let cfg = BackboneConfig::tiny();
        let utts: Vec<Vec<f32>> = (0..4).map(|i| Tensor::<f32>::randn(&[3000 + 500 * i], 0.1, &mut rng(i as u64)).into_data()).collect();
        let pcfg = PretrainConfig { epochs: 2, batch_size: 2, crop_s: 0.15, lr: 1e-3, ..Default::default() };
        let mut a = Backbone::init(cfg.clone(), 1).unwrap();
        let mut b = a.clone();
        let la = pretrain(&mut a, &utts, &pcfg, 3).unwrap();
        let lb = pretrain(&mut b, &utts, &pcfg, 3).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        let mut c = Backbone::init(cfg, 1).unwrap();
        let before = c.params.to_bytes();
        pretrain(&mut c, &utts, &PretrainConfig { lr: 0.0, ..pcfg }, 3).unwrap();
        assert_eq!(c.params.to_bytes(), before);
        assert!(matches!(pretrain(&mut c, &[], &PretrainConfig::default(), 0), Err(ModelError::EmptyCorpus)));
    }
}
