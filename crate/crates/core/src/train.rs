//! Optimisation, evaluation metrics and checkpoints.

use crate::encoder::{Dropout, EncoderConfig, IfaModel, ModelInput, NamedParam};
use crate::error::{Error, Result};
use crate::synthetic::{ser_vector, Dataset, BACKGROUND};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 32,
            n_epochs: 15,
            grad_clip_norm: 1.0,
            seed: 0,
            dropout_rate: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in finite_nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("{} must be finite and >= 0", v)));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(name, format!("{} outside [0, 1)", v)));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config("grad_clip_norm", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.n_epochs == 0 {
            return Err(Error::config("n_epochs", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", format!("{} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

// ------------------------------------------------------------------- adam

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam { learning_rate, beta1, beta2, eps, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to each parameter slice given matching gradients.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::shape("adam", "parameter and gradient lists differ"));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::shape("adam", "parameter set changed between steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }

    pub fn step_model(&mut self, model: &mut IfaModel, grads: &[Vec<f64>]) -> Result<()> {
        let mut slices: Vec<&mut [f64]> = model.params_mut().iter_mut().map(|p| p.tensor.values_mut()).collect();
        self.update(&mut slices, grads)
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationCounts {
    pub label: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Accuracy over all samples; micro precision/recall/F1 over non-background
/// labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_samples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_relation: Vec<RelationCounts>,
}

/// Scores predictions against gold labels; `n_labels` includes background.
pub fn score(gold: &[usize], pred: &[usize], n_labels: usize) -> Result<Metrics> {
    if gold.is_empty() {
        return Err(Error::Input("cannot score an empty dataset".into()));
    }
    if gold.len() != pred.len() {
        return Err(Error::Input(format!("{} gold labels vs {} predictions", gold.len(), pred.len())));
    }
    if let Some(l) = gold.iter().chain(pred).find(|&&l| l >= n_labels) {
        return Err(Error::Input(format!("label {} >= {}", l, n_labels)));
    }
    let mut per: Vec<RelationCounts> = (1..n_labels).map(|label| RelationCounts { label, tp: 0, fp: 0, fn_: 0 }).collect();
    let mut correct = 0;
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            correct += 1;
            if g != BACKGROUND {
                per[g - 1].tp += 1;
            }
            continue;
        }
        if p != BACKGROUND {
            per[p - 1].fp += 1;
        }
        if g != BACKGROUND {
            per[g - 1].fn_ += 1;
        }
    }
    let tp: usize = per.iter().map(|c| c.tp).sum();
    let fp: usize = per.iter().map(|c| c.fp).sum();
    let fn_: usize = per.iter().map(|c| c.fn_).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let micro_f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Metrics {
        n_samples: gold.len(),
        accuracy: correct as f64 / gold.len() as f64,
        precision,
        recall,
        micro_f1,
        tp,
        fp,
        fn_,
        per_relation: per,
    })
}

pub const EVAL_BATCH: usize = 256;

pub fn inputs_of(data: &Dataset) -> Vec<ModelInput> {
    data.samples.iter().map(ModelInput::from).collect()
}

pub fn predict_all(model: &IfaModel, inputs: &[ModelInput]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_BATCH) {
        out.extend(model.predict(chunk)?);
    }
    Ok(out)
}

pub fn evaluate(model: &IfaModel, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let pred = predict_all(model, &inputs_of(data))?;
    score(&data.labels(), &pred, model.config().n_relations)
}

// --------------------------------------------------------------- training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: Metrics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev micro-F1.
    pub model: IfaModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Trains with Adam and global-norm clipping on seeded shuffled mini-batches.
/// Dropout uses `cfg.dropout_rate`. The checkpoint with the highest dev
/// micro-F1 is kept (earlier epoch on ties).
pub fn train(mut model: IfaModel, train_set: &Dataset, dev: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let inputs = inputs_of(train_set);
    let labels = train_set.labels();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(1);
    let mut adam = Adam::from_config(cfg);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(cfg.n_epochs);
    let mut best: Option<(f64, usize, Vec<NamedParam>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.n_epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let xb: Vec<ModelInput> = idx.iter().map(|&i| inputs[i].clone()).collect();
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut dropout = Dropout { rate: cfg.dropout_rate, rng: &mut drop_rng };
            let (loss, mut grads) = model.loss_and_grads(&xb, &yb, Some(&mut dropout))?;
            if !loss.is_finite() {
                return Err(Error::Training { step, reason: format!("loss is {}", loss) });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip_norm);
            adam.step_model(&mut model, &grads)?;
            loss_sum += loss * idx.len() as f64;
            step += 1;
        }
        let dev_metrics = evaluate(&model, dev)?;
        let f1 = dev_metrics.micro_f1;
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, model.params().to_vec()));
        }
        history.push(EpochRecord { epoch, train_loss: loss_sum / inputs.len() as f64, dev: dev_metrics });
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    let model = IfaModel::from_params(model.config().clone(), params)?;
    Ok(TrainOutcome { model, best_epoch, history })
}

// ------------------------------------------------------------ checkpoints

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct ParamOut<'a> {
    name: &'a str,
    shape: &'a [usize],
    #[serde(serialize_with = "ser_vector")]
    values: &'a [f64],
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format_version: u32,
    config: &'a EncoderConfig,
    params: Vec<ParamOut<'a>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamIn {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    format_version: u32,
    config: EncoderConfig,
    params: Vec<ParamIn>,
}

/// Checkpoint JSON with every value written to 17 significant digits.
pub fn checkpoint_to_string(model: &IfaModel) -> Result<String> {
    let out = CheckpointOut {
        format_version: CHECKPOINT_VERSION,
        config: model.config(),
        params: model
            .params()
            .iter()
            .map(|p| ParamOut { name: &p.name, shape: p.tensor.shape(), values: p.tensor.values() })
            .collect(),
    };
    Ok(serde_json::to_string(&out)?)
}

pub fn checkpoint_from_str(text: &str) -> Result<IfaModel> {
    let raw: CheckpointIn = serde_json::from_str(text).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    if raw.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "format_version",
            format!("expected {}, found {}", CHECKPOINT_VERSION, raw.format_version),
        ));
    }
    raw.config.validate().map_err(|e| match e {
        Error::Config { field, reason } => Error::format(format!("config.{}", field), reason),
        other => other,
    })?;
    let mut params = Vec::with_capacity(raw.params.len());
    for p in raw.params {
        let tensor = Tensor::new(p.shape, p.values).map_err(|e| Error::format(format!("params.{}", p.name), e.to_string()))?;
        params.push(NamedParam { name: p.name, tensor });
    }
    IfaModel::from_params(raw.config, params).map_err(|e| match e {
        Error::Format { field, reason } => Error::format(implied_field(&reason).unwrap_or(field), reason),
        other => other,
    })
}

/// Loads a checkpoint that must match `expected` in every config field.
pub fn checkpoint_from_str_expecting(text: &str, expected: &EncoderConfig) -> Result<IfaModel> {
    let model = checkpoint_from_str(text)?;
    let have = serde_json::to_value(model.config())?;
    let want = serde_json::to_value(expected)?;
    if let (Some(h), Some(w)) = (have.as_object(), want.as_object()) {
        for (k, wv) in w {
            if h.get(k) != Some(wv) {
                return Err(Error::format(
                    format!("config.{}", k),
                    format!("checkpoint has {}, expected {}", h.get(k).map_or("nothing".into(), |v| v.to_string()), wv),
                ));
            }
        }
    }
    Ok(model)
}

/// Config field that determines the shape of a mismatched parameter.
fn implied_field(reason: &str) -> Option<String> {
    let field = if reason.contains("classifier.") {
        "config.n_relations"
    } else if reason.contains("embed.token") {
        "config.vocab_size"
    } else if reason.contains("embed.position") {
        "config.max_text_len"
    } else if reason.contains("visual_proj`") {
        "config.visual_feature_dim"
    } else if reason.contains("ffn.") {
        "config.ffn_dim"
    } else {
        return None;
    };
    Some(field.to_string())
}

pub fn save_checkpoint(model: &IfaModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<IfaModel> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
