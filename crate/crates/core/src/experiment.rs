//! Experiment protocols: image-shuffle probe, fusion ablation, attention
//! traces and the reports they emit.

use crate::encoder::{EncoderConfig, FusionMode, IfaModel, ModelInput, Stream};
use crate::error::{Error, Result};
use crate::synthetic::{format_f64, shuffle_images, Dataset, DatasetSpec, Splits, HEAD_START, TAIL_START};
use crate::train::{evaluate, train, EpochRecord, Metrics, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

pub const SPEC_FILE: &str = "spec.json";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and the `spec.json` sidecar.
pub fn write_splits(dir: &Path, spec: &DatasetSpec, splits: &Splits) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, data) in SPLITS.iter().zip([&splits.train, &splits.dev, &splits.test]) {
        data.write_jsonl(&dir.join(format!("{}.jsonl", name)))?;
    }
    std::fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(())
}

pub fn read_splits(dir: &Path) -> Result<(DatasetSpec, Splits)> {
    let spec_path = dir.join(SPEC_FILE);
    if !spec_path.exists() {
        return Err(Error::Input(format!("no dataset in {} (missing {})", dir.display(), SPEC_FILE)));
    }
    let spec = DatasetSpec::from_json(&std::fs::read_to_string(spec_path)?)?;
    let mut parts = Vec::with_capacity(3);
    for name in SPLITS {
        let path = dir.join(format!("{}.jsonl", name));
        if !path.exists() {
            return Err(Error::Input(format!("missing split file {}", path.display())));
        }
        let data = Dataset::read_jsonl(&path)?;
        for s in &data.samples {
            s.check(&spec)?;
        }
        parts.push(data);
    }
    let test = parts.pop().unwrap();
    let dev = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((spec, Splits { train, dev, test }))
}

/// Model and optimiser settings shared by every arm, plus the seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Seed of the image permutation for shuffled train data; shuffled test
    /// data uses `shuffle_seed + 1`.
    pub shuffle_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            shuffle_seed: 1000,
        }
    }
}

impl ExperimentConfig {
    /// Accepts either a bare config or a report that embeds one.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        let inner = match v.get("config") {
            Some(c) if v.get("arms").is_some() => c.clone(),
            _ => v,
        };
        let cfg: ExperimentConfig =
            serde_json::from_value(inner).map_err(|e| Error::format(crate::synthetic::json_field(&e), e.to_string()))?;
        if cfg.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Copies the data-determined sizes of `spec` into `base`.
pub fn fit_encoder_to_data(base: &EncoderConfig, spec: &DatasetSpec) -> EncoderConfig {
    EncoderConfig {
        vocab_size: spec.vocab_size,
        n_relations: spec.n_relations + 1,
        max_text_len: spec.text_len,
        max_visual_len: spec.n_objects,
        visual_feature_dim: spec.object_feature_dim,
        ..base.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Streams never exchange information.
    TextOnly,
    /// Full fusion with object tokens.
    IfaObjects,
    /// Full fusion, global visual token only.
    Vanilla,
    /// Global token only and the visual stream does not attend to text.
    WoTextAttn,
}

impl Variant {
    pub fn apply(self, base: &EncoderConfig) -> EncoderConfig {
        let (fusion_mode, use_objects) = match self {
            Variant::TextOnly => (FusionMode::Separate, base.use_objects),
            Variant::IfaObjects => (FusionMode::IfaFull, true),
            Variant::Vanilla => (FusionMode::IfaFull, false),
            Variant::WoTextAttn => (FusionMode::NoTextToVisual, false),
        };
        EncoderConfig { fusion_mode, use_objects, ..base.clone() }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::TextOnly => "text-only",
            Variant::IfaObjects => "IFA w/ visual objects",
            Variant::Vanilla => "vanilla IFA",
            Variant::WoTextAttn => "w/o text attn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Standard,
    /// Trained on image-shuffled train data, evaluated on the standard test set.
    ShuffleTrain,
    /// Trained on standard data, evaluated on the image-shuffled test set.
    ShuffleTest,
}

impl Condition {
    fn trains_on_shuffled(self) -> bool {
        self == Condition::ShuffleTrain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub variant: Variant,
    pub condition: Condition,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub test: Metrics,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub condition: Condition,
    pub per_seed_micro_f1: Vec<f64>,
    pub per_seed_accuracy: Vec<f64>,
    pub mean_micro_f1: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub data_dir: String,
    pub dataset: DatasetSpec,
    pub config: ExperimentConfig,
    pub arms: Vec<ArmResult>,
    pub summary: Vec<SummaryRow>,
}

/// Wall-clock times of one arm. A model shared between arms reports its
/// training time in each of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmTiming {
    pub variant: Variant,
    pub condition: Condition,
    pub seed: u64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Timings live apart from the report so that reruns reproduce the report
/// byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub experiment: String,
    pub total_seconds: f64,
    pub arms: Vec<ArmTiming>,
}

impl Timings {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub timings: Timings,
}

impl ExperimentReport {
    pub fn row(&self, variant: Variant, condition: Condition) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant && r.condition == condition)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

struct Trained {
    model: IfaModel,
    best_epoch: usize,
    history: Vec<EpochRecord>,
    seconds: f64,
}

/// Trains arms on demand and caches them by (variant, shuffled-train, seed),
/// so a standard-trained model serves both the standard and shuffled-test
/// conditions and can be shared across experiments.
pub struct Runner {
    pub spec: DatasetSpec,
    pub splits: Splits,
    pub config: ExperimentConfig,
    shuffled_train: Dataset,
    shuffled_test: Dataset,
    cache: BTreeMap<(Variant, bool, u64), Trained>,
    /// Called with a short description before each training run.
    pub on_train: Option<Box<dyn FnMut(&str)>>,
}

impl Runner {
    pub fn new(spec: DatasetSpec, splits: Splits, config: ExperimentConfig) -> Result<Self> {
        if config.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        config.train.validate()?;
        fit_encoder_to_data(&config.encoder, &spec).validate()?;
        let shuffled_train = shuffle_images(&splits.train, config.shuffle_seed);
        let shuffled_test = shuffle_images(&splits.test, config.shuffle_seed + 1);
        Ok(Runner { spec, splits, config, shuffled_train, shuffled_test, cache: BTreeMap::new(), on_train: None })
    }

    pub fn arm_configs(&self, variant: Variant, seed: u64) -> (EncoderConfig, TrainConfig) {
        let enc = EncoderConfig { seed, ..variant.apply(&fit_encoder_to_data(&self.config.encoder, &self.spec)) };
        let tr = TrainConfig { seed, ..self.config.train.clone() };
        (enc, tr)
    }

    fn trained(&mut self, variant: Variant, shuffled: bool, seed: u64) -> Result<&Trained> {
        let key = (variant, shuffled, seed);
        if !self.cache.contains_key(&key) {
            if let Some(cb) = self.on_train.as_mut() {
                cb(&format!("{} / {} train / seed {}", variant.label(), if shuffled { "shuffled" } else { "standard" }, seed));
            }
            let (enc, tr) = self.arm_configs(variant, seed);
            let start = Instant::now();
            let data = if shuffled { &self.shuffled_train } else { &self.splits.train };
            let out = train(IfaModel::new(enc)?, data, &self.splits.dev, &tr)?;
            let seconds = start.elapsed().as_secs_f64();
            self.cache.insert(key, Trained { model: out.model, best_epoch: out.best_epoch, history: out.history, seconds });
        }
        Ok(&self.cache[&key])
    }

    /// Best-dev model of an arm, training it if needed.
    pub fn model(&mut self, variant: Variant, condition: Condition, seed: u64) -> Result<&IfaModel> {
        Ok(&self.trained(variant, condition.trains_on_shuffled(), seed)?.model)
    }

    pub fn run_arm(&mut self, variant: Variant, condition: Condition, seed: u64) -> Result<(ArmResult, ArmTiming)> {
        let (encoder, train_cfg) = self.arm_configs(variant, seed);
        let t = self.trained(variant, condition.trains_on_shuffled(), seed)?;
        let (model, best_epoch, history, seconds) = (t.model.clone(), t.best_epoch, t.history.clone(), t.seconds);
        let test_set = if condition == Condition::ShuffleTest { &self.shuffled_test } else { &self.splits.test };
        let start = Instant::now();
        let test = evaluate(&model, test_set)?;
        let timing = ArmTiming { variant, condition, seed, train_seconds: seconds, eval_seconds: start.elapsed().as_secs_f64() };
        Ok((ArmResult { variant, condition, seed, encoder, train: train_cfg, best_epoch, test, history }, timing))
    }

    fn report(&mut self, name: &str, data_dir: &str, grid: &[(Variant, Condition)]) -> Result<ExperimentRun> {
        let start = Instant::now();
        let mut arms = Vec::new();
        let mut timing = Vec::new();
        for &(v, c) in grid {
            for &seed in &self.config.seeds.clone() {
                let (arm, t) = self.run_arm(v, c, seed)?;
                arms.push(arm);
                timing.push(t);
            }
        }
        let summary = grid
            .iter()
            .map(|&(variant, condition)| {
                let rows: Vec<&ArmResult> = arms.iter().filter(|a| a.variant == variant && a.condition == condition).collect();
                let f1: Vec<f64> = rows.iter().map(|a| a.test.micro_f1).collect();
                let acc: Vec<f64> = rows.iter().map(|a| a.test.accuracy).collect();
                SummaryRow {
                    variant,
                    condition,
                    mean_micro_f1: mean(&f1),
                    mean_accuracy: mean(&acc),
                    per_seed_micro_f1: f1,
                    per_seed_accuracy: acc,
                }
            })
            .collect();
        let report = ExperimentReport {
            experiment: name.to_string(),
            data_dir: data_dir.to_string(),
            dataset: self.spec.clone(),
            config: self.config.clone(),
            arms,
            summary,
        };
        let timings = Timings { experiment: name.to_string(), total_seconds: start.elapsed().as_secs_f64(), arms: timing };
        Ok(ExperimentRun { report, timings })
    }

    /// Text-only and IFA-with-objects models under standard, shuffled-train
    /// and shuffled-test conditions.
    pub fn shuffle_experiment(&mut self, data_dir: &str) -> Result<ExperimentRun> {
        let mut grid = Vec::new();
        for v in [Variant::TextOnly, Variant::IfaObjects] {
            for c in [Condition::Standard, Condition::ShuffleTrain, Condition::ShuffleTest] {
                grid.push((v, c));
            }
        }
        self.report("shuffle", data_dir, &grid)
    }

    /// Vanilla, w/o text attention and w/ visual objects on standard data.
    pub fn ablation(&mut self, data_dir: &str) -> Result<ExperimentRun> {
        let grid: Vec<(Variant, Condition)> =
            [Variant::Vanilla, Variant::WoTextAttn, Variant::IfaObjects].iter().map(|&v| (v, Condition::Standard)).collect();
        self.report("ablation", data_dir, &grid)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

// ------------------------------------------------------------------ traces

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    /// Object slot with the largest last-layer head-marker weight.
    pub predicted_object: usize,
    pub gold_object: Option<usize>,
    pub hit: Option<bool>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub samples: Vec<TraceRecord>,
    /// Samples with a gold alignment.
    pub n_scored: usize,
    pub hits: usize,
    pub hit_rate: f64,
    /// Hit probability of an attention pattern unrelated to the alignment.
    pub null_rate: f64,
    /// Two-sided exact binomial p-value of `hits` under `null_rate`.
    pub p_value: f64,
}

/// Object slot receiving the most last-layer attention (mean over heads)
/// from the head-entity start marker.
pub fn head_marker_object(model: &IfaModel, input: &ModelInput) -> Result<usize> {
    if !model.config().use_objects || !model.config().fusion_mode.text_sees_visual() {
        return Err(Error::Input("model has no text-to-object attention to trace".into()));
    }
    let trace = model.export_trace(input)?;
    let w = trace.last_layer_object_weights(input.head_marker).expect("objects visible to text");
    let n = input.objects.len();
    if n == 0 {
        return Err(Error::Input("sample has no objects".into()));
    }
    let mut best = 0;
    for j in 1..n {
        if w[j] > w[best] {
            best = j;
        }
    }
    Ok(best)
}

/// Alignment hit rate over samples that carry a gold alignment.
pub fn alignment_hit_rate(model: &IfaModel, data: &Dataset) -> Result<TraceSummary> {
    trace_samples(model, data, None, false)
}

/// Writes per-layer, per-head text-stream attention CSVs (and SVGs when
/// requested) into `out_dir` when given, and scores the alignment.
pub fn trace_samples(model: &IfaModel, data: &Dataset, out_dir: Option<&Path>, svg: bool) -> Result<TraceSummary> {
    if data.is_empty() {
        return Err(Error::Input("no samples to trace".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut samples = Vec::with_capacity(data.len());
    let mut n_objects = 0;
    for s in &data.samples {
        let input = ModelInput::from(s);
        let predicted_object = head_marker_object(model, &input)?;
        n_objects = n_objects.max(input.objects.len());
        let gold_object = s.gold_alignment[0];
        let mut files = Vec::new();
        if let Some(dir) = out_dir {
            let trace = model.export_trace(&input)?;
            for (l, layer) in trace.layers.iter().enumerate() {
                for (h, head) in layer.text.iter().enumerate() {
                    let stem = format!("sample{}_layer{}_head{}", s.id, l, h);
                    std::fs::write(dir.join(format!("{}.csv", stem)), attention_csv(&trace, head))?;
                    files.push(format!("{}.csv", stem));
                    if svg {
                        std::fs::write(dir.join(format!("{}.svg", stem)), attention_svg(&trace, head))?;
                        files.push(format!("{}.svg", stem));
                    }
                }
            }
        }
        samples.push(TraceRecord { id: s.id, predicted_object, gold_object, hit: gold_object.map(|g| g == predicted_object), files });
    }
    let n_scored = samples.iter().filter(|r| r.hit.is_some()).count();
    let hits = samples.iter().filter(|r| r.hit == Some(true)).count();
    let null_rate = 1.0 / n_objects as f64;
    Ok(TraceSummary {
        n_scored,
        hits,
        hit_rate: if n_scored == 0 { 0.0 } else { hits as f64 / n_scored as f64 },
        null_rate,
        p_value: binomial_two_sided_p(hits, n_scored, null_rate),
        samples,
    })
}

fn column_labels(trace: &crate::encoder::AttentionTrace) -> Vec<String> {
    let mut cols = Vec::new();
    for b in &trace.text_blocks {
        for j in 0..b.len {
            cols.push(match b.modality {
                Stream::Visual if j == 0 => "v_global".to_string(),
                Stream::Visual => format!("v_obj{}", j - 1),
                Stream::Text => format!("t{}", j),
            });
        }
    }
    cols
}

fn marker_flag(trace: &crate::encoder::AttentionTrace, pos: usize) -> &'static str {
    match trace.tokens.get(pos) {
        Some(_) if pos == trace.head_marker => "head",
        Some(_) if pos == trace.tail_marker => "tail",
        Some(&t) if t == HEAD_START || t == TAIL_START => "marker",
        _ => "",
    }
}

/// Rows are the real text positions; columns are visual tokens then text
/// tokens, masked columns included as exact zeros.
pub fn attention_csv(trace: &crate::encoder::AttentionTrace, head: &[Vec<f64>]) -> String {
    let mut out = String::from("position,token,marker");
    for c in column_labels(trace) {
        out.push(',');
        out.push_str(&c);
    }
    out.push('\n');
    for (i, row) in head.iter().enumerate().take(trace.tokens.len()) {
        let _ = write!(out, "{},{},{}", i, trace.tokens[i], marker_flag(trace, i));
        for w in row {
            out.push(',');
            out.push_str(&format_f64(*w));
        }
        out.push('\n');
    }
    out
}

pub fn attention_svg(trace: &crate::encoder::AttentionTrace, head: &[Vec<f64>]) -> String {
    const CELL: usize = 18;
    const LEFT: usize = 90;
    const TOP: usize = 60;
    let cols = column_labels(trace);
    let rows = trace.tokens.len();
    let (w, h) = (LEFT + cols.len() * CELL + 10, TOP + rows * CELL + 10);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"monospace\" font-size=\"9\">\n",
        w, h
    );
    for (j, c) in cols.iter().enumerate() {
        let x = LEFT + j * CELL + CELL / 2;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" transform=\"rotate(-60 {} {})\">{}</text>", x, TOP - 4, x, TOP - 4, c);
    }
    for (i, row) in head.iter().enumerate().take(rows) {
        let y = TOP + i * CELL;
        let _ = writeln!(s, "<text x=\"2\" y=\"{}\">{} {} {}</text>", y + 12, i, trace.tokens[i], marker_flag(trace, i));
        for (j, v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"rgb({},{},255)\"><title>{:.4}</title></rect>",
                LEFT + j * CELL,
                y,
                CELL,
                CELL,
                shade,
                shade,
                v
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Exact two-sided binomial test: total probability of outcomes no more likely
/// than `k` under `Bin(n, p)`.
pub fn binomial_two_sided_p(k: usize, n: usize, p: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let ln_pmf = |i: usize| -> f64 {
        let (i_f, n_f) = (i as f64, n as f64);
        ln_choose(n, i) + if i == 0 { 0.0 } else { i_f * p.ln() } + if i == n { 0.0 } else { (n_f - i_f) * (1.0 - p).ln() }
    };
    let observed = ln_pmf(k);
    let total: f64 = (0..=n).map(ln_pmf).filter(|&l| l <= observed + 1e-7).map(f64::exp).sum();
    total.min(1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}
