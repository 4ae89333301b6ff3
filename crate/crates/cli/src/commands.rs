use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use egospk::audio::read_wav;
use egospk::backbone::{load_utterances, log_csv, pretrain, Backbone};
use egospk::eval::{
    compute_metrics, kfold_split, load_segments, reproduce, results_csv, Backbones, BackboneKind, ExperimentResult,
    ExperimentSpec, Harness, HarnessConfig, Metrics, MeanMetrics, PeftKind, Segment, TestSource, TrainSource,
};
use egospk::head::{ClassifierModel, InputMode};
use egospk::peft::{save_delta, LoraSpec};
use egospk::rng::derive_seed_str;
use egospk::synth::{
    generate_corpus, generate_pretrain_corpus, list_wavs, write_annotations, Label, SegmentAnnotation,
};
use egospk::vad::{apply_exclusion, detect_speech, ExclusionMode};
use serde::{Deserialize, Serialize};

use crate::config::{create_out, require_exists, RunConfig};
use crate::failure::ConfigError;

/// Subdirectory of a corpus holding the unlabeled pre-training utterances.
pub const PRETRAIN_DIR: &str = "pretrain";

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn label_name(l: u8) -> &'static str {
    if l == 1 {
        "child"
    } else {
        "adult"
    }
}

pub fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = create_out(out)?;
    let c = &cfg.corpus;
    let sessions = generate_corpus(&dir, c.sessions, c.seed, &cfg.synth)?;
    log::info!("wrote {} sessions to {}", sessions.len(), dir.display());
    if c.pretrain_utterances > 0 {
        let seed = derive_seed_str(c.seed, "pretrain-corpus");
        let p = dir.join(PRETRAIN_DIR);
        generate_pretrain_corpus(&p, c.pretrain_utterances, seed, &cfg.pretrain_corpus, &cfg.synth)?;
        log::info!("wrote {} pre-training utterances to {}", c.pretrain_utterances, p.display());
    }
    cfg.write_resolved(&dir)
}

pub fn vad(cfg: &RunConfig, input: &Path, out: &Path, min_duration_s: Option<f64>) -> Result<()> {
    require_exists(input, "input")?;
    cfg.vad.validate()?;
    let files: Vec<PathBuf> = if input.is_dir() { list_wavs(input)? } else { vec![input.to_path_buf()] };
    if files.is_empty() {
        return Err(ConfigError(format!("no WAV files in {}", input.display())).into());
    }
    let (mode, min) = match min_duration_s {
        Some(m) => (ExclusionMode::Pretrain, m),
        None => (ExclusionMode::Session, 0.0),
    };
    let mut rows = Vec::new();
    let mut excluded = String::new();
    for f in &files {
        let wave = read_wav(f)?;
        let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let segs = detect_speech(&wave, &cfg.vad)?;
        match apply_exclusion(segs, wave.duration_s(), min, mode) {
            Some(segs) => rows.extend(segs.into_iter().map(|(start_s, end_s)| SegmentAnnotation {
                session_id: id.clone(),
                start_s,
                end_s,
                label: Label::Speech,
            })),
            None => {
                log::info!("{id}: {:.1} s is shorter than {min} s, excluded", wave.duration_s());
                excluded.push_str(&id);
                excluded.push('\n');
            }
        }
    }
    let dir = create_out(out)?;
    write_annotations(&dir.join("segments.csv"), &rows)?;
    write(&dir.join("excluded.txt"), excluded)?;
    log::info!("{} speech segments from {} file(s)", rows.len(), files.len());
    cfg.write_resolved(&dir)
}

/// Utterance directory of `corpus`: its `pretrain/` subdirectory when present.
fn utterance_dir(corpus: &Path) -> PathBuf {
    let sub = corpus.join(PRETRAIN_DIR);
    if sub.is_dir() {
        sub
    } else {
        corpus.to_path_buf()
    }
}

fn pretrain_backbone(cfg: &RunConfig, utterances: &Path, dir: &Path) -> Result<Backbone<f32>> {
    let utts = load_utterances(utterances, cfg.pretrain.max_utterances)?;
    if utts.is_empty() {
        return Err(ConfigError(format!("no utterances in {}", utterances.display())).into());
    }
    let mut bb = Backbone::init(cfg.backbone.clone(), derive_seed_str(cfg.run.seed, "backbone"))?;
    log::info!("pre-training on {} utterances for {} epochs", utts.len(), cfg.pretrain.epochs);
    let log = pretrain(&mut bb, &utts, &cfg.pretrain, derive_seed_str(cfg.run.seed, "pretrain"))?;
    bb.save(&dir.join("backbone.ckpt"))?;
    write(&dir.join("pretrain_log.csv"), log_csv(&log))?;
    Ok(bb)
}

pub fn pretrain_cmd(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<()> {
    require_exists(corpus, "corpus")?;
    cfg.backbone.validate()?;
    let utterances = utterance_dir(corpus);
    if list_wavs(&utterances)?.is_empty() {
        return Err(ConfigError(format!("no WAV files in {}", utterances.display())).into());
    }
    let dir = create_out(out)?;
    pretrain_backbone(cfg, &utterances, &dir)?;
    cfg.write_resolved(&dir)
}

fn scratch(cfg: &RunConfig, like: Option<&Backbone<f32>>) -> Result<Backbone<f32>> {
    let config = like.map_or_else(|| cfg.backbone.clone(), |b| b.config.clone());
    Ok(Backbone::init(config, derive_seed_str(cfg.run.seed, "scratch"))?)
}

/// What `finetune` records so `evaluate` can rebuild the folds.
#[derive(Serialize, Deserialize)]
struct FinetuneRecord {
    spec: ExperimentSpec,
    harness: HarnessConfig,
}

pub struct FinetuneArgs {
    pub backbone: String,
    pub train_source: TrainSource,
    pub test_source: TestSource,
    pub peft: PeftKind,
    pub ratio: f64,
    pub lr: Option<f64>,
    pub seed: u64,
}

pub fn finetune_cmd(cfg: &RunConfig, corpus: &Path, args: &FinetuneArgs, out: &Path) -> Result<()> {
    require_exists(corpus, "corpus")?;
    let pretrained = match args.backbone.as_str() {
        "scratch" => None,
        path => {
            let p = Path::new(path);
            require_exists(p, "backbone checkpoint")?;
            Some(Backbone::load(p)?)
        }
    };
    let kind = if pretrained.is_some() { BackboneKind::Pretrained } else { BackboneKind::Scratch };
    let spec = ExperimentSpec {
        experiment: "finetune".into(),
        train_source: args.train_source,
        test_source: args.test_source,
        backbone: kind,
        peft: args.peft,
        train_ratio: args.ratio,
        lr: args.lr.unwrap_or(cfg.harness.classifier.lr),
        seeds: vec![args.seed],
    };
    spec.validate()?;
    let backbones = Backbones { scratch: scratch(cfg, pretrained.as_ref())?, pretrained };
    let mut harness = Harness::new(cfg.harness.clone(), corpus, backbones)?;
    let result = harness.run_experiment(&spec)?;
    let dir = create_out(out)?;
    for fold in 0..harness.folds.len() {
        let model = harness.model(&spec, args.seed, fold)?;
        model.save(&dir.join(format!("fold{fold}.ckpt")))?;
        if let Some(variant) = spec.peft.variant() {
            let ls = LoraSpec { variant, rank: cfg.harness.lora_rank, alpha: cfg.harness.lora_alpha };
            save_delta(&model.backbone, &ls, &dir.join(format!("fold{fold}.lora.ckpt")))?;
        }
    }
    write(&dir.join("predictions.csv"), predictions_csv(&harness.segments, &result)?)?;
    write(&dir.join("results.csv"), results_csv(std::slice::from_ref(&result))?)?;
    let record = FinetuneRecord { spec, harness: cfg.harness.clone() };
    write(&dir.join("finetune.json"), serde_json::to_string_pretty(&record)?)?;
    log::info!("mean macro-F1 {:.4} over {} folds", result.mean.macro_f1, result.rows.len());
    cfg.write_resolved(&dir)
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    session_id: &'a str,
    start_s: String,
    end_s: String,
    true_label: &'static str,
    pred_label: &'static str,
    p_child: String,
}

fn predictions_csv(segments: &[Segment], result: &ExperimentResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &result.rows {
        for p in &row.predictions {
            let s = &segments[p.segment];
            w.serialize(PredictionRow {
                session_id: &s.session_id,
                start_s: format!("{:.3}", s.start_s),
                end_s: format!("{:.3}", s.end_s),
                true_label: label_name(p.label),
                pred_label: label_name(p.pred),
                p_child: format!("{:.6}", p.p_child),
            })?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn channels<'a>(s: &'a Segment, test: TestSource) -> Vec<&'a [f32]> {
    match test {
        TestSource::Child => vec![&s.child],
        TestSource::Exam => vec![&s.exam],
        TestSource::Dual => vec![&s.child, &s.exam],
    }
}

pub fn evaluate_cmd(cfg: &RunConfig, model: &Path, corpus: &Path, folds: Option<usize>, test: TestSource, out: &Path) -> Result<()> {
    require_exists(model, "model")?;
    require_exists(corpus, "corpus")?;
    // A fine-tuning directory is evaluated fold by fold on its held-out
    // sessions; a single checkpoint on every session of the corpus.
    let (jobs, harness, test) = if model.is_dir() {
        let text = fs::read_to_string(model.join("finetune.json"))
            .map_err(|e| ConfigError(format!("{} is not a finetune output: {e}", model.display())))?;
        let record: FinetuneRecord = serde_json::from_str(&text)?;
        let h = record.harness;
        if let Some(k) = folds {
            if k != h.folds {
                return Err(ConfigError(format!("model was trained with {} folds, not {k}", h.folds)).into());
            }
        }
        let jobs: Vec<PathBuf> = (0..h.folds).map(|f| model.join(format!("fold{f}.ckpt"))).collect();
        (jobs, h, record.spec.test_source)
    } else {
        (vec![model.to_path_buf()], cfg.harness.clone(), test)
    };
    let first = ClassifierModel::load(&jobs[0])?;
    let wants_dual = first.config.input_mode == InputMode::Dual;
    if wants_dual != (test == TestSource::Dual) {
        return Err(ConfigError(format!("test source {test} does not match the model's input mode")).into());
    }
    let (sessions, segments) = load_segments(corpus, harness.crop_s, first.backbone.config.receptive_field())?;
    let held_out: Vec<Vec<String>> = if jobs.len() > 1 {
        kfold_split(&sessions, harness.folds, harness.sessions_per_fold, harness.fold_seed)?.into_iter().map(|f| f.test).collect()
    } else {
        vec![sessions.clone()]
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut per_fold: Vec<Metrics> = Vec::new();
    for (fold, (path, test_sessions)) in jobs.iter().zip(&held_out).enumerate() {
        let m = if fold == 0 { first.clone() } else { ClassifierModel::load(path)? };
        let idx: Vec<usize> = (0..segments.len()).filter(|&i| test_sessions.contains(&segments[i].session_id)).collect();
        let examples = idx
            .iter()
            .map(|&i| m.prepare(&channels(&segments[i], test), segments[i].label))
            .collect::<Result<Vec<_>, _>>()?;
        let preds = m.predict(&examples)?;
        let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
        let hard: Vec<u8> = preds.iter().map(|p| p.label).collect();
        per_fold.push(compute_metrics(&hard, &labels)?);
        for (&i, p) in idx.iter().zip(&preds) {
            let s = &segments[i];
            w.serialize(PredictionRow {
                session_id: &s.session_id,
                start_s: format!("{:.3}", s.start_s),
                end_s: format!("{:.3}", s.end_s),
                true_label: label_name(s.label),
                pred_label: label_name(p.label),
                p_child: format!("{:.6}", p.p_child),
            })?;
        }
    }
    let mut metrics = String::from("fold,acc,macro_f1,recall,specificity\n");
    for (f, m) in per_fold.iter().enumerate() {
        metrics.push_str(&format!("{f},{:.6},{:.6},{:.6},{:.6}\n", m.accuracy, m.macro_f1, m.recall, m.specificity));
    }
    let mean = MeanMetrics::of(&per_fold);
    metrics.push_str(&format!("mean,{:.6},{:.6},{:.6},{:.6}\n", mean.accuracy, mean.macro_f1, mean.recall, mean.specificity));
    let dir = create_out(out)?;
    write(&dir.join("predictions.csv"), w.into_inner()?)?;
    write(&dir.join("metrics.csv"), metrics)?;
    log::info!("mean macro-F1 {:.4}", mean.macro_f1);
    cfg.write_resolved(&dir)
}

pub fn reproduce_cmd(cfg: &RunConfig, corpus: &Path, backbone: Option<&Path>, out: &Path) -> Result<()> {
    require_exists(corpus, "corpus")?;
    if let Some(b) = backbone {
        require_exists(b, "backbone checkpoint")?;
    }
    cfg.backbone.validate()?;
    cfg.harness.classifier.validate()?;
    cfg.reproduce.validate()?;
    let dir = create_out(out)?;
    cfg.write_resolved(&dir)?;
    let pretrained = match backbone {
        Some(b) => Backbone::load(b)?,
        None => {
            let mut utterances = corpus.join(PRETRAIN_DIR);
            if !utterances.is_dir() {
                utterances = dir.join("pretrain_corpus");
                let seed = derive_seed_str(cfg.run.seed, "pretrain-corpus");
                let n = cfg.corpus.pretrain_utterances.max(1);
                log::info!("generating {n} pre-training utterances");
                generate_pretrain_corpus(&utterances, n, seed, &cfg.pretrain_corpus, &cfg.synth)?;
            }
            pretrain_backbone(cfg, &utterances, &dir)?
        }
    };
    let backbones = Backbones { scratch: scratch(cfg, Some(&pretrained))?, pretrained: Some(pretrained) };
    let mut harness = Harness::new(cfg.harness.clone(), corpus, backbones)?;
    log::info!("{} segments from {} sessions", harness.segments.len(), harness.sessions.len());
    let rep = reproduce(&mut harness, &cfg.reproduce)?;
    rep.write(&dir)?;
    log::info!("reports written to {}", dir.display());
    Ok(())
}
