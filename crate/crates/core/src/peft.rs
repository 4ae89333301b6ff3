//! Low-rank adapters on the transformer's linear maps.
//!
//! A target map `W` (stored `[in, out]`) gains `X.lora_a` `[r, in]` and
//! `X.lora_b` `[out, r]`; the effective map is `x·W + (alpha/r)·x·Aᵀ·Bᵀ`.
//! `B` starts at zero, so a freshly wrapped model computes exactly what the
//! base model does. Base weights never receive updates.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::error::ModelError;
use crate::head::{finetune, BackboneMode, ClassifierModel, Example, FinetuneLog};
use crate::params::ParamStore;
use crate::rng::rng;
use crate::tensor::Tensor;

pub const DELTA_SECTION: &str = "lora";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraVariant {
    /// Both feed-forward maps of every layer.
    Ff,
    /// Query and value projections of every layer.
    Qv,
}

impl LoraVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            LoraVariant::Ff => "ff-lora",
            LoraVariant::Qv => "qv-lora",
        }
    }
}

impl FromStr for LoraVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ff" | "ff-lora" => Ok(LoraVariant::Ff),
            "qv" | "qv-lora" => Ok(LoraVariant::Qv),
            other => Err(ModelError::Config(format!("unknown LoRA variant `{other}` (expected ff or qv)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    pub variant: LoraVariant,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSpec {
    pub fn new(variant: LoraVariant) -> Self {
        Self { variant, rank: 8, alpha: 16.0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rank == 0 {
            return Err(ModelError::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(ModelError::Config("LoRA alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Names of the wrapped linear maps, layer by layer.
    pub fn targets(&self, layers: usize) -> Vec<String> {
        let suffixes: &[&str] = match self.variant {
            LoraVariant::Ff => &["ff1", "ff2"],
            LoraVariant::Qv => &["attn.q", "attn.v"],
        };
        (0..layers).flat_map(|l| suffixes.iter().map(move |s| format!("ctx.l{l}.{s}"))).collect()
    }
}

/// Adds zero-delta adapters to a copy of `base`. Returns the wrapped model and
/// the names of its trainable backbone tensors.
pub fn lora_wrap(base: &Backbone<f32>, spec: &LoraSpec, seed: u64) -> Result<(Backbone<f32>, Vec<String>), ModelError> {
    spec.validate()?;
    if base.lora_scale.is_some() {
        return Err(ModelError::Config("backbone already carries adapters".into()));
    }
    let mut out = base.clone();
    let mut r = rng(seed);
    let mut inventory = Vec::new();
    for t in spec.targets(base.config.layers) {
        let w = base
            .params
            .get(&format!("{t}.w"))
            .ok_or_else(|| ModelError::Config(format!("backbone has no linear map `{t}`")))?;
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        let a = format!("{t}.lora_a");
        let b = format!("{t}.lora_b");
        out.params.insert(a.clone(), Tensor::uniform(&[spec.rank, n_in], 1.0 / (n_in as f64).sqrt(), &mut r));
        out.params.insert(b.clone(), Tensor::zeros(&[n_out, spec.rank]));
        inventory.push(a);
        inventory.push(b);
    }
    out.lora_scale = Some(spec.scale());
    Ok((out, inventory))
}

/// Total adapter parameters the spec adds to a backbone of this shape.
pub fn lora_param_count(base: &Backbone<f32>, spec: &LoraSpec) -> usize {
    spec.targets(base.config.layers)
        .iter()
        .filter_map(|t| base.params.get(&format!("{t}.w")))
        .map(|w| spec.rank * (w.shape()[0] + w.shape()[1]))
        .sum()
}

/// Trains adapters and head only. Errors when the model carries no adapters.
pub fn lora_train(model: &mut ClassifierModel, train: &[Example], seed: u64) -> Result<Vec<FinetuneLog>, ModelError> {
    if model.mode() != BackboneMode::Lora {
        return Err(ModelError::Config("lora_train needs a wrapped backbone".into()));
    }
    finetune(model, train, seed)
}

/// Adapter tensors of `model` with their spec, as a standalone checkpoint.
pub fn delta_checkpoint(backbone: &Backbone<f32>, spec: &LoraSpec) -> Checkpoint<f32> {
    let mut ck = Checkpoint::new();
    ck.meta.insert("kind".into(), "lora_delta".into());
    ck.meta.insert("lora_spec".into(), serde_json::to_string(spec).expect("spec serialises"));
    let mut s = ParamStore::new();
    for (n, t) in backbone.params.iter().filter(|(n, _)| n.contains(".lora_")) {
        s.insert(n.clone(), t.clone());
    }
    ck.sections.insert(DELTA_SECTION.into(), s);
    ck
}

pub fn save_delta(backbone: &Backbone<f32>, spec: &LoraSpec, path: &Path) -> Result<(), ModelError> {
    Ok(delta_checkpoint(backbone, spec).save(path)?)
}

/// Rebuilds a wrapped backbone from its base and a delta checkpoint.
pub fn apply_delta(base: &Backbone<f32>, delta: &Checkpoint<f32>) -> Result<(Backbone<f32>, LoraSpec), ModelError> {
    let spec: LoraSpec = serde_json::from_str(delta.meta("lora_spec")?)
        .map_err(|e| ModelError::Config(format!("stored LoRA spec: {e}")))?;
    let (mut wrapped, _) = lora_wrap(base, &spec, 0)?;
    let stored = delta.section(DELTA_SECTION)?;
    let template: ParamStore<f32> = {
        let mut t = ParamStore::new();
        for (n, v) in wrapped.params.iter().filter(|(n, _)| n.contains(".lora_")) {
            t.insert(n.clone(), v.clone());
        }
        t
    };
    template.check_compatible(stored)?;
    stored
        .check_compatible(&template)
        .map_err(|_| ModelError::Config("delta carries tensors the spec does not define".into()))?;
    for (n, t) in stored.iter() {
        wrapped.params.insert(n.clone(), t.clone());
    }
    Ok((wrapped, spec))
}

pub fn load_delta(base: &Backbone<f32>, path: &Path) -> Result<(Backbone<f32>, LoraSpec), ModelError> {
    apply_delta(base, &Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::backbone::BackboneConfig;
    use crate::head::ClassifierConfig;

    fn tone(freq: f64, n: usize) -> Vec<f32> {
        (0..n).map(|i| 0.3 * (std::f64::consts::TAU * freq * i as f64 / 16_000.0).sin() as f32).collect()
    }

    fn head_cfg() -> ClassifierConfig {
        ClassifierConfig {
            conv_channels: 8,
            mlp_hidden: vec![6],
            lr: 1e-2,
            lr_grid: vec![1e-2],
            epochs: 5,
            batch_size: 2,
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn targeting_is_exact() {
        let bb = Backbone::init(BackboneConfig { layers: 4, ..BackboneConfig::tiny() }, 1).unwrap();
        let (_, inv) = lora_wrap(&bb, &LoraSpec::new(LoraVariant::Qv), 2).unwrap();
        assert_eq!(inv.len(), 16);
        assert!(inv.iter().all(|n| n.contains(".attn.q.") || n.contains(".attn.v.")));
        let wrapped: std::collections::BTreeSet<_> = inv.iter().map(|n| n.rsplit_once('.').unwrap().0).collect();
        assert_eq!(wrapped.len(), 8);
        let (_, inv) = lora_wrap(&bb, &LoraSpec::new(LoraVariant::Ff), 2).unwrap();
        assert!(inv.iter().all(|n| n.contains(".ff1.") || n.contains(".ff2.")));
        assert!("adapter".parse::<LoraVariant>().is_err());
        assert!(LoraSpec { rank: 0, ..LoraSpec::new(LoraVariant::Ff) }.validate().is_err());
    }

    #[test]
    fn desk_parameter_budget() {
        let bb = Backbone::init(BackboneConfig::desk(), 1).unwrap();
        let spec = LoraSpec::new(LoraVariant::Ff);
        let per_layer = |d: usize, f: usize, r: usize| (r * d + f * r) + (r * f + d * r);
        let want = per_layer(bb.config.d_model, bb.config.ffn_dim, 8);
        assert_eq!(want, 10_240);
        assert_eq!(lora_param_count(&bb, &spec), want * bb.config.layers);
        let (w, inv) = lora_wrap(&bb, &spec, 0).unwrap();
        let counted: usize = inv.iter().map(|n| w.params.get(n).unwrap().numel()).sum();
        assert_eq!(counted, want * bb.config.layers);
        assert!((counted as f64) < 0.1 * bb.params.numel() as f64);
    }

    #[test]
    fn zero_init_is_identical_and_training_freezes_base() {
        let bb = Backbone::init(BackboneConfig::tiny(), 3).unwrap();
        for variant in [LoraVariant::Ff, LoraVariant::Qv] {
            let spec = LoraSpec::new(variant);
            let base = ClassifierModel::new(head_cfg(), bb.clone(), 4).unwrap();
            let (w, _) = lora_wrap(&bb, &spec, 5).unwrap();
            let mut wrapped = ClassifierModel::new(head_cfg(), w, 4).unwrap();
            let samples: Vec<Vec<f32>> = (0..6).map(|i| tone(120.0 + 40.0 * i as f64, 2000)).collect();
            let ex_base: Vec<Example> = samples.iter().enumerate().map(|(i, s)| base.prepare(&[s], (i % 2) as u8).unwrap()).collect();
            let ex_wrap: Vec<Example> = samples.iter().enumerate().map(|(i, s)| wrapped.prepare(&[s], (i % 2) as u8).unwrap()).collect();
            let pb = base.predict(&ex_base).unwrap();
            let pw = wrapped.predict(&ex_wrap).unwrap();
            for (a, b) in pb.iter().zip(&pw) {
                assert_eq!(a.label, b.label);
                assert_eq!(a.p_child.to_bits(), b.p_child.to_bits());
            }
            let before = bb.params.to_bytes();
            let adapters_before: Vec<_> = wrapped.backbone.params.iter().filter(|(n, _)| n.contains("lora_b")).map(|(_, t)| t.clone()).collect();
            lora_train(&mut wrapped, &ex_wrap, 6).unwrap();
            let mut base_after = ParamStore::new();
            for (n, t) in wrapped.backbone.params.iter().filter(|(n, _)| !n.contains(".lora_")) {
                base_after.insert(n.clone(), t.clone());
            }
            assert_eq!(base_after.to_bytes(), before);
            let adapters_after: Vec<_> = wrapped.backbone.params.iter().filter(|(n, _)| n.contains("lora_b")).map(|(_, t)| t.clone()).collect();
            assert_ne!(adapters_before, adapters_after);
        }
    }

    #[test]
    fn delta_round_trip() {
        let bb = Backbone::init(BackboneConfig::tiny(), 7).unwrap();
        let spec = LoraSpec { rank: 3, ..LoraSpec::new(LoraVariant::Qv) };
        let (mut w, _) = lora_wrap(&bb, &spec, 8).unwrap();
        let mut r = rng(9);
        let names: Vec<String> = w.params.names().filter(|n| n.contains("lora_b")).cloned().collect();
        for n in names {
            let shape = w.params.get(&n).unwrap().shape().to_vec();
            w.params.insert(n, Tensor::randn(&shape, 0.1, &mut r));
        }
        let ck = Checkpoint::from_bytes(&delta_checkpoint(&w, &spec).to_bytes()).unwrap();
        let (back, s) = apply_delta(&bb, &ck).unwrap();
        assert_eq!(s, spec);
        assert_eq!(back, w);
        let other = Backbone::init(BackboneConfig { d_model: 16, heads: 2, ..BackboneConfig::tiny() }, 7).unwrap();
        assert!(apply_delta(&other, &ck).is_err());
    }

    /// Solves `X·A = D` for square `A` by Gauss-Jordan elimination on `Aᵀ`.
    fn solve_right(d: &[Vec<f64>], a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        d.iter()
            .map(|row| {
                // Aᵀ xᵀ = rowᵀ
                let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[j][i]).chain([row[i]]).collect()).collect();
                for c in 0..n {
                    let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
                    m.swap(c, p);
                    let pivot = m[c][c];
                    for v in m[c].iter_mut() {
                        *v /= pivot;
                    }
                    for r2 in 0..n {
                        if r2 != c {
                            let f = m[r2][c];
                            let src = m[c].clone();
                            for (v, s) in m[r2].iter_mut().zip(src) {
                                *v -= f * s;
                            }
                        }
                    }
                }
                m.iter().map(|r| r[n]).collect()
            })
            .collect()
    }

    #[test]
    fn full_rank_represents_any_delta() {
        // One map with in = 6, out = 10: rank 6 = min(in, out).
        let (n_in, n_out, rank) = (6usize, 10usize, 6usize);
        let mut r = rng(11);
        let d = Tensor::<f64>::randn(&[n_out, n_in], 1.0, &mut r);
        let a = Tensor::<f64>::randn(&[rank, n_in], 1.0, &mut r);
        let scale = 16.0 / rank as f64;
        let d_rows: Vec<Vec<f64>> = (0..n_out).map(|i| d.row(i).iter().map(|v| v / scale).collect()).collect();
        let a_rows: Vec<Vec<f64>> = (0..rank).map(|i| a.row(i).to_vec()).collect();
        let b = solve_right(&d_rows, &a_rows);
        let b = Tensor::new(vec![n_out, rank], b.into_iter().flatten().collect()).unwrap();

        // Compare x·(s·Aᵀ·Bᵀ) from the tape with x·Dᵀ.
        let x = Tensor::<f64>::randn(&[5, n_in], 1.0, &mut r);
        let mut tape = Tape::<f64>::new();
        let (xv, av, bv) = (tape.constant(x.clone()), tape.constant(a), tape.constant(b));
        let xa = tape.matmul_nt(xv, av);
        let y = tape.matmul_nt(xa, bv);
        let y = tape.scale(y, scale);
        let dv = tape.constant(d);
        let want = tape.matmul_nt(xv, dv);
        let resid = tape.value(y).max_abs_diff(tape.value(want));
        assert!(resid < 1e-4, "residual {resid}");
    }
}
