use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::harness::BackboneKind;
use super::{ExperimentResult, ExperimentSpec, Harness, MeanMetrics, PeftKind, TestSource, TrainSource};
use crate::error::EvalError;

/// Files written by [`Reproduction::write`].
pub const REPORT_FILES: [&str; 8] =
    ["table1.md", "table2.md", "fig5.csv", "fig5.svg", "fig6.csv", "fig6.svg", "table3.md", "results.csv"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproduceConfig {
    pub seeds: Vec<u64>,
    /// Seeds for the adapter comparison, which trains through the transformer.
    pub lora_seeds: Vec<u64>,
    pub lr: f64,
    pub ratios: Vec<f64>,
    /// Backbones shown in the train/test source matrix.
    pub source_matrix_backbones: Vec<BackboneKind>,
    /// Subset of [`EXPERIMENTS`] to run.
    pub experiments: Vec<String>,
}

/// Experiment names in report order.
pub const EXPERIMENTS: [&str; 5] = ["table1", "table2", "fig5", "fig6", "table3"];

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            lora_seeds: vec![0, 1, 2],
            lr: 2e-4,
            ratios: vec![0.1, 0.5, 1.0],
            source_matrix_backbones: vec![BackboneKind::Scratch, BackboneKind::Pretrained],
            experiments: EXPERIMENTS.iter().map(|e| e.to_string()).collect(),
        }
    }
}

impl ReproduceConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.seeds.is_empty() || self.lora_seeds.is_empty() {
            return Err(EvalError::Spec("reproduce needs at least one seed".into()));
        }
        if let Some(bad) = self.experiments.iter().find(|e| !EXPERIMENTS.contains(&e.as_str())) {
            return Err(EvalError::Spec(format!("unknown experiment `{bad}`, expected one of {EXPERIMENTS:?}")));
        }
        Ok(())
    }

    fn runs(&self, experiment: &str) -> bool {
        self.experiments.iter().any(|e| e == experiment)
    }
}

const MONO_TESTS: [TestSource; 2] = [TestSource::Child, TestSource::Exam];
const BACKBONES: [BackboneKind; 2] = [BackboneKind::Scratch, BackboneKind::Pretrained];

#[derive(Clone, Debug, PartialEq)]
pub struct Reproduction {
    pub results: Vec<ExperimentResult>,
}

impl Reproduction {
    pub fn find(&self, experiment: &str, f: impl Fn(&ExperimentSpec) -> bool) -> Option<&ExperimentResult> {
        self.results.iter().find(|r| r.spec.experiment == experiment && f(&r.spec))
    }

    fn get(&self, experiment: &str, f: impl Fn(&ExperimentSpec) -> bool) -> &ExperimentResult {
        self.find(experiment, f).expect("experiment present in the matrix")
    }

    /// Mean macro-F1 of the ratio sweep for one backbone, averaged over the
    /// two mono test devices, in ratio order.
    pub fn ratio_curve(&self, backbone: BackboneKind) -> Vec<(f64, f64)> {
        let mut ratios: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.spec.experiment == "fig5" && r.spec.backbone == backbone)
            .map(|r| r.spec.train_ratio)
            .collect();
        ratios.sort_by(f64::total_cmp);
        ratios.dedup();
        ratios
            .into_iter()
            .map(|q| {
                let f1s: Vec<f64> = self
                    .results
                    .iter()
                    .filter(|r| r.spec.experiment == "fig5" && r.spec.backbone == backbone && r.spec.train_ratio == q)
                    .map(|r| r.mean.macro_f1)
                    .collect();
                (q, f1s.iter().sum::<f64>() / f1s.len() as f64)
            })
            .collect()
    }

    pub fn table1(&self) -> String {
        let mut s = String::from("# Pre-trained vs scratch backbone\n\nTraining data: both devices.\n\n");
        for test in MONO_TESTS {
            let _ = writeln!(s, "## Test device: {test}\n");
            s.push_str(HEADER_BACKBONE);
            for b in BACKBONES {
                let r = self.get("table1", |x| x.backbone == b && x.test_source == test);
                let _ = writeln!(s, "| {b} | {} |", metric_cells(r));
            }
            s.push('\n');
        }
        s
    }

    pub fn table2(&self) -> String {
        let mut s = String::from("# Training vs testing device\n\n");
        s.push_str("| Backbone | Train | Test | Acc | F1 | Recall | Specificity |\n|---|---|---|---|---|---|---|\n");
        for r in self.results.iter().filter(|r| r.spec.experiment == "table2") {
            let _ = writeln!(s, "| {} | {} | {} | {} |", r.spec.backbone, r.spec.train_source, r.spec.test_source, metric_cells(r));
        }
        s
    }

    pub fn table3(&self) -> String {
        let mut s = String::from("# Mono vs dual channel\n\nBackbone: pretrained.\n\n");
        s.push_str("| Train | Test | Acc | F1 | Recall | Specificity |\n|---|---|---|---|---|---|\n");
        for r in self.results.iter().filter(|r| r.spec.experiment == "table3") {
            let _ = writeln!(s, "| {} | {} | {} |", r.spec.train_source, r.spec.test_source, metric_cells(r));
        }
        s
    }

    pub fn fig5_csv(&self) -> String {
        let mut s = String::from("backbone,ratio,test_source,macro_f1,f1_min,f1_max\n");
        for r in self.results.iter().filter(|r| r.spec.experiment == "fig5") {
            let (lo, hi) = r.f1_range();
            let _ = writeln!(s, "{},{},{},{:.6},{:.6},{:.6}", r.spec.backbone, r.spec.train_ratio, r.spec.test_source, r.mean.macro_f1, lo, hi);
        }
        s
    }

    pub fn fig6_csv(&self) -> String {
        let mut s = String::from("peft,test_source,acc,macro_f1,recall,specificity\n");
        for r in self.results.iter().filter(|r| r.spec.experiment == "fig6") {
            let m = r.mean;
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.spec.peft, r.spec.test_source, m.accuracy, m.macro_f1, m.recall, m.specificity
            );
        }
        s
    }

    pub fn fig5_svg(&self) -> String {
        let series: Vec<(String, Vec<(f64, f64)>)> = BACKBONES.iter().map(|&b| (b.to_string(), self.ratio_curve(b))).collect();
        line_chart("Macro-F1 vs training ratio", "training ratio", &series)
    }

    pub fn fig6_svg(&self) -> String {
        let groups: Vec<(String, Vec<(String, f64)>)> = MONO_TESTS
            .iter()
            .map(|&t| {
                let bars = self
                    .results
                    .iter()
                    .filter(|r| r.spec.experiment == "fig6" && r.spec.test_source == t)
                    .map(|r| (r.spec.peft.to_string(), r.mean.macro_f1))
                    .collect();
                (format!("test: {t}"), bars)
            })
            .collect();
        bar_chart("Macro-F1 with and without adapters", &groups)
    }

    fn has(&self, experiment: &str) -> bool {
        self.results.iter().any(|r| r.spec.experiment == experiment)
    }

    /// Writes the report files of every experiment present plus `results.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut files = Vec::new();
        if self.has("table1") {
            files.push(("table1.md", self.table1()));
        }
        if self.has("table2") {
            files.push(("table2.md", self.table2()));
        }
        if self.has("fig5") {
            files.push(("fig5.csv", self.fig5_csv()));
            files.push(("fig5.svg", self.fig5_svg()));
        }
        if self.has("fig6") {
            files.push(("fig6.csv", self.fig6_csv()));
            files.push(("fig6.svg", self.fig6_svg()));
        }
        if self.has("table3") {
            files.push(("table3.md", self.table3()));
        }
        files.push(("results.csv", results_csv(&self.results)?));
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))?;
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

const HEADER_BACKBONE: &str = "| Backbone | Acc | F1 | Recall | Specificity |\n|---|---|---|---|---|\n";

fn metric_cells(r: &ExperimentResult) -> String {
    let m = r.mean;
    let (lo, hi) = r.f1_range();
    let f1 = if r.seed_means.len() > 1 {
        format!("{:.3} [{lo:.3}, {hi:.3}]", m.macro_f1)
    } else {
        format!("{:.3}", m.macro_f1)
    };
    format!("{:.3} | {f1} | {:.3} | {:.3}", m.accuracy, m.recall, m.specificity)
}

/// Per-fold rows plus one `mean` row per experiment. The fold column reads
/// `s{seed}-f{fold}`.
pub fn results_csv(results: &[ExperimentResult]) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| EvalError::Spec(format!("csv: {e}"));
    w.write_record(["experiment", "fold", "backbone", "source_train", "source_test", "peft", "ratio", "acc", "macro_f1", "recall", "specificity"])
        .map_err(csv_err)?;
    for r in results {
        let s = &r.spec;
        let mut put = |fold: String, m: MeanMetrics| {
            w.write_record([
                s.experiment.clone(),
                fold,
                s.backbone.to_string(),
                s.train_source.to_string(),
                s.test_source.to_string(),
                s.peft.to_string(),
                s.train_ratio.to_string(),
                format!("{:.6}", m.accuracy),
                format!("{:.6}", m.macro_f1),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.specificity),
            ])
        };
        for row in &r.rows {
            put(format!("s{}-f{}", row.seed, row.fold), MeanMetrics::of(&[row.metrics])).map_err(csv_err)?;
        }
        put("mean".into(), r.mean).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Spec(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Specs of the selected experiments, in report order.
pub fn reproduction_specs(cfg: &ReproduceConfig) -> Vec<ExperimentSpec> {
    let base = |experiment: &str, train: TrainSource, test: TestSource, backbone: BackboneKind| ExperimentSpec {
        experiment: experiment.into(),
        train_source: train,
        test_source: test,
        backbone,
        peft: PeftKind::None,
        train_ratio: 1.0,
        lr: cfg.lr,
        seeds: cfg.seeds.clone(),
    };
    let mut specs = Vec::new();
    for b in BACKBONES {
        for t in MONO_TESTS {
            specs.push(base("table1", TrainSource::Both, t, b));
        }
    }
    for &b in &cfg.source_matrix_backbones {
        for train in [TrainSource::Child, TrainSource::Exam, TrainSource::Both] {
            for t in MONO_TESTS {
                specs.push(base("table2", train, t, b));
            }
        }
    }
    for b in BACKBONES {
        for &q in &cfg.ratios {
            for t in MONO_TESTS {
                specs.push(ExperimentSpec { train_ratio: q, ..base("fig5", TrainSource::Both, t, b) });
            }
        }
    }
    for peft in [PeftKind::None, PeftKind::FfLora, PeftKind::QvLora] {
        for t in MONO_TESTS {
            specs.push(ExperimentSpec {
                peft,
                seeds: cfg.lora_seeds.clone(),
                ..base("fig6", TrainSource::Both, t, BackboneKind::Pretrained)
            });
        }
    }
    for (train, test) in [
        (TrainSource::Child, TestSource::Child),
        (TrainSource::Exam, TestSource::Exam),
        (TrainSource::Both, TestSource::Child),
        (TrainSource::Both, TestSource::Exam),
        (TrainSource::Dual, TestSource::Dual),
    ] {
        specs.push(base("table3", train, test, BackboneKind::Pretrained));
    }
    specs.retain(|s| cfg.runs(&s.experiment));
    specs
}

/// Runs the selected experiments of the comparison matrix on one harness.
pub fn reproduce(harness: &mut Harness, cfg: &ReproduceConfig) -> Result<Reproduction, EvalError> {
    cfg.validate()?;
    let mut results = Vec::new();
    for spec in reproduction_specs(cfg) {
        log::info!("experiment {}: {} -> {} ({}, {}, ratio {})", spec.experiment, spec.train_source, spec.test_source, spec.backbone, spec.peft, spec.train_ratio);
        results.push(harness.run_experiment(&spec)?);
    }
    Ok(Reproduction { results })
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = (lo - 0.05).max(0.0);
    let hi = (hi + 0.05).min(1.0).max(lo + 0.1);
    (lo, hi)
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n",
        W / 2.0
    )
}

fn y_axis(s: &mut String, lo: f64, hi: f64, y: impl Fn(f64) -> f64) {
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>", H - PAD);
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", H - PAD, W - PAD, H - PAD);
    for i in 0..=4 {
        let v = lo + (hi - lo) * f64::from(i) / 4.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>", PAD - 4.0, y(v) + 4.0);
    }
    let _ = writeln!(s, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">macro-F1</text>", H / 2.0, H / 2.0);
}

fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (lo, hi) = y_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let x = |v: f64| PAD + v * (W - 2.0 * PAD);
    let y = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    y_axis(&mut s, lo, hi, y);
    for v in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{v}</text>", x(v), H - PAD + 14.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>", W / 2.0, H - 12.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(a, b)| format!("{:.1},{:.1}", x(a), y(b))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
        for &(a, b) in pts {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{c}\"/>", x(a), y(b));
        }
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\" fill=\"{c}\">{name}</text>", W - PAD - 70.0);
    }
    s.push_str("</svg>\n");
    s
}

fn bar_chart(title: &str, groups: &[(String, Vec<(String, f64)>)]) -> String {
    let (lo, hi) = y_range(groups.iter().flat_map(|(_, b)| b.iter().map(|q| q.1)));
    let lo = lo.min(0.5);
    let y = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    y_axis(&mut s, lo, hi, y);
    let group_w = (W - 2.0 * PAD) / groups.len().max(1) as f64;
    for (g, (label, bars)) in groups.iter().enumerate() {
        let x0 = PAD + g as f64 * group_w;
        let bw = group_w * 0.8 / bars.len().max(1) as f64;
        for (i, (name, v)) in bars.iter().enumerate() {
            let c = COLORS[i % COLORS.len()];
            let bx = x0 + group_w * 0.1 + i as f64 * bw;
            let _ = writeln!(
                s,
                "<rect x=\"{bx:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{c}\"><title>{name}: {v:.3}</title></rect>",
                y(*v),
                bw * 0.9,
                (H - PAD - y(*v)).max(0.0)
            );
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"9\">{v:.3}</text>", bx + bw * 0.45, y(*v) - 3.0);
            if g == 0 {
                let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{name}</text>", W - PAD - 60.0, PAD + 14.0 * i as f64);
            }
        }
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{label}</text>", x0 + group_w / 2.0, H - PAD + 14.0);
    }
    s.push_str("</svg>\n");
    s
}
