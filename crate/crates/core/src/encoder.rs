//! Dual-stream transformer with implicit fine-grained multimodal alignment.
//!
//! Each layer keeps a text stream and a visual stream. Queries of one stream
//! attend over the concatenation of the other stream's keys/values followed by
//! its own, so token/object correspondences surface directly in the attention
//! weights:
//!
//! ```text
//! H_t' = Attn(Q_t, [K_v, K_t], [V_v, V_t])
//! H_v' = Attn(Q_v, [K_t, K_v], [V_t, V_v])
//! ```
//!
//! Both streams read the same layer-`l` states (simultaneous update). Blocks are
//! pre-norm: `x + Attn(LN(x))`, then `x + FFN(LN(x))`. Relation logits come from
//! a linear map over the final text states at the head and tail start markers.
//!
//! # Parameter count
//!
//! With `d = d_model`, `f = ffn_dim`, `V = vocab_size`, `n_t = max_text_len`,
//! `d_v = visual_feature_dim`, `R = n_relations`, `L = n_layers`:
//!
//! ```text
//! embeddings  = V*d + n_t*d + d_v*d + d + 2*d
//! per stream  = 4*d + d*d + 2*d*f + f + d          (2 LNs, W_o, FFN)
//! per layer   = 2*per_stream + 6*d*d   (3*d*d when share_projections)
//! head        = 2*d + 2*d*R + R                    (final LN, classifier)
//! total       = embeddings + L*per_layer + head
//! ```
//!
//! See [`EncoderConfig::parameter_count`].

use crate::error::{Error, Result};
use crate::synthetic::{Sample, PAD};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Additive bias applied to masked attention logits.
pub const MASK_BIAS: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Both streams attend over both modalities.
    IfaFull,
    /// The visual stream attends only to itself; text still sees vision.
    NoTextToVisual,
    /// Neither stream sees the other (text-only baseline).
    Separate,
}

impl FusionMode {
    pub fn text_sees_visual(self) -> bool {
        !matches!(self, FusionMode::Separate)
    }

    pub fn visual_sees_text(self) -> bool {
        matches!(self, FusionMode::IfaFull)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Label count including the background class.
    pub n_relations: usize,
    pub max_text_len: usize,
    /// Maximum number of object tokens (the global token comes on top).
    pub max_visual_len: usize,
    pub visual_feature_dim: usize,
    /// Feed object tokens to the visual stream; otherwise only the global token.
    pub use_objects: bool,
    pub fusion_mode: FusionMode,
    pub share_projections: bool,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 32,
            n_heads: 2,
            d_head: 16,
            n_layers: 2,
            ffn_dim: 128,
            vocab_size: 48,
            n_relations: 9,
            max_text_len: 12,
            max_visual_len: 4,
            visual_feature_dim: 24,
            use_objects: true,
            fusion_mode: FusionMode::IfaFull,
            share_projections: false,
            activation: Activation::Gelu,
            dropout_rate: 0.0,
            init_std: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("n_layers", self.n_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("visual_feature_dim", self.visual_feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.use_objects && self.max_visual_len == 0 {
            return Err(Error::config("max_visual_len", "must be positive when objects are used"));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::config(
                "d_model",
                format!("{} != n_heads {} * d_head {}", self.d_model, self.n_heads, self.d_head),
            ));
        }
        if self.n_relations < 2 {
            return Err(Error::config("n_relations", "need at least 2 labels (background included)"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", format!("{} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::config("init_std", "must be positive"));
        }
        Ok(())
    }

    /// Visual sequence length: global token plus object slots when enabled.
    pub fn visual_len(&self) -> usize {
        1 + if self.use_objects { self.max_visual_len } else { 0 }
    }

    /// Closed form documented at module level.
    pub fn parameter_count(&self) -> usize {
        let (d, f, r) = (self.d_model, self.ffn_dim, self.n_relations);
        let embeddings = self.vocab_size * d + self.max_text_len * d + self.visual_feature_dim * d + d + 2 * d;
        let per_stream = 4 * d + d * d + 2 * d * f + f + d;
        let qkv = if self.share_projections { 3 * d * d } else { 6 * d * d };
        let per_layer = 2 * per_stream + qkv;
        let head = 2 * d + 2 * d * r + r;
        embeddings + self.n_layers * per_layer + head
    }
}

/// One sample as the model sees it. Built from a [`Sample`] without its
/// diagnostic fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<usize>,
    pub head_marker: usize,
    pub tail_marker: usize,
    pub global: Vec<f64>,
    pub objects: Vec<Vec<f64>>,
}

impl From<&Sample> for ModelInput {
    fn from(s: &Sample) -> Self {
        ModelInput {
            tokens: s.tokens.clone(),
            head_marker: s.head_marker(),
            tail_marker: s.tail_marker(),
            global: s.global.clone(),
            objects: s.objects.clone(),
        }
    }
}

// ------------------------------------------------------------- parameters

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Text,
    Visual,
}

/// Indices into the flat parameter list for one stream of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamParams {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub text: StreamParams,
    pub visual: StreamParams,
}

impl LayerParams {
    pub fn stream(&self, s: Stream) -> &StreamParams {
        match s {
            Stream::Text => &self.text,
            Stream::Visual => &self.visual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    token_emb: usize,
    pos_emb: usize,
    vis_proj: usize,
    vis_proj_bias: usize,
    vis_type: usize,
    layers: Vec<LayerParams>,
    final_ln_gain: usize,
    final_ln_bias: usize,
    cls_w: usize,
    cls_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

struct Builder<'a> {
    params: Vec<NamedParam>,
    rng: &'a mut ChaCha8Rng,
    std: f64,
}

impl Builder<'_> {
    fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.params.push(NamedParam { name, tensor });
        self.params.len() - 1
    }
    fn normal(&mut self, name: String, shape: &[usize]) -> usize {
        let t = Tensor::randn(shape, self.std, self.rng);
        self.push(name, t)
    }
    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }
    fn ones(&mut self, name: String, shape: &[usize]) -> usize {
        self.push(name, Tensor::filled(shape, 1.0))
    }
}

/// Records every parameter on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, i: usize) -> Var {
        self.0[i]
    }
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

// -------------------------------------------------------------- attention

/// Per-head projections of one stream, laid out `[batch * heads, len, d_head]`.
#[derive(Debug, Clone)]
pub struct HeadProjections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// `true` for real positions, `false` for padding; one row per batch item.
    pub mask: Vec<Vec<bool>>,
}

pub struct AttentionOutput {
    /// `[batch * len_a, d_model]` after the output projection.
    pub out: Var,
    /// `[batch * heads, len_a, len_kv]` softmax weights.
    pub weights: Var,
}

/// `x: [batch * n, d]` to per-head `[batch * heads, n, d_head]`.
fn split_heads(tape: &mut Tape, x: Var, batch: usize, n: usize, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let dh = d / heads;
    let r = tape.reshape(x, &[batch, n, heads, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[batch * heads, n, dh])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n, dh) = (s[1], s[2]);
    let r = tape.reshape(x, &[batch, heads, n, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[batch * n, heads * dh])
}

/// `Q = H W_q`, `K = H W_k`, `V = H W_v`, split into heads.
/// `h` is `[batch * n, d_model]`; each weight is `[d_model, n_heads * d_head]`.
#[allow(clippy::too_many_arguments)]
pub fn project_qkv(
    tape: &mut Tape,
    h: Var,
    batch: usize,
    n_heads: usize,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    mask: Vec<Vec<bool>>,
) -> Result<HeadProjections> {
    let hs = tape.shape(h).to_vec();
    let ws = tape.shape(w_q).to_vec();
    if hs.len() != 2 || ws.len() != 2 || hs[1] != ws[0] {
        return Err(Error::shape("project_qkv", format!("hidden {:?} vs projection {:?}", hs, ws)));
    }
    if !hs[0].is_multiple_of(batch) || !ws[1].is_multiple_of(n_heads) {
        return Err(Error::shape("project_qkv", format!("hidden {:?} not divisible into {} items / {} heads", hs, batch, n_heads)));
    }
    let n = hs[0] / batch;
    if mask.len() != batch || mask.iter().any(|m| m.len() != n) {
        return Err(Error::shape("project_qkv", format!("mask does not cover {} x {} positions", batch, n)));
    }
    let q = tape.matmul(h, w_q)?;
    let k = tape.matmul(h, w_k)?;
    let v = tape.matmul(h, w_v)?;
    Ok(HeadProjections {
        q: split_heads(tape, q, batch, n, n_heads)?,
        k: split_heads(tape, k, batch, n, n_heads)?,
        v: split_heads(tape, v, batch, n, n_heads)?,
        mask,
    })
}

/// Scaled dot-product attention of `q` over already concatenated `k`/`v`
/// with a per-item key mask, followed by head merge and `w_o`.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[Vec<bool>],
    w_o: Var,
    scale: f64,
) -> Result<AttentionOutput> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || tape.shape(v) != ks.as_slice() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", qs, ks, tape.shape(v)),
        ));
    }
    let batch = key_mask.len();
    if batch == 0 || !qs[0].is_multiple_of(batch) {
        return Err(Error::shape("attention", format!("{} mask rows for {} head groups", batch, qs[0])));
    }
    let heads = qs[0] / batch;
    let (n_q, n_kv) = (qs[1], ks[1]);
    if key_mask.iter().any(|m| m.len() != n_kv) {
        return Err(Error::shape("attention", format!("key mask length differs from {} keys", n_kv)));
    }
    if let Some(b) = key_mask.iter().position(|m| !m.iter().any(|&x| x)) {
        return Err(Error::Contract(format!("batch item {} has every key masked", b)));
    }

    let mut bias = vec![0.0; qs[0] * n_q * n_kv];
    for (b, m) in key_mask.iter().enumerate() {
        for h in 0..heads {
            for i in 0..n_q {
                let row = ((b * heads + h) * n_q + i) * n_kv;
                for (j, &keep) in m.iter().enumerate() {
                    if !keep {
                        bias[row + j] = MASK_BIAS;
                    }
                }
            }
        }
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, scale);
    let scores = tape.add_const(scores, &Tensor::from_parts(vec![qs[0], n_q, n_kv], bias))?;
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(weights, v)?;
    let merged = merge_heads(tape, ctx, batch, heads)?;
    let out = tape.matmul(merged, w_o)?;
    Ok(AttentionOutput { out, weights })
}

/// Attention of stream `a` over `[K_b, K_a]`/`[V_b, V_a]`; `other = None`
/// drops the foreign block and reduces to self-attention.
pub fn cross_modal_attention(
    tape: &mut Tape,
    own: &HeadProjections,
    other: Option<&HeadProjections>,
    w_o: Var,
    scale: f64,
) -> Result<AttentionOutput> {
    match other {
        None => attend(tape, own.q, own.k, own.v, &own.mask, w_o, scale),
        Some(b) => {
            if b.mask.len() != own.mask.len() {
                return Err(Error::shape(
                    "cross_modal_attention",
                    format!("{} vs {} mask rows", b.mask.len(), own.mask.len()),
                ));
            }
            let k = tape.concat(&[b.k, own.k], 1)?;
            let v = tape.concat(&[b.v, own.v], 1)?;
            let mask: Vec<Vec<bool>> = b
                .mask
                .iter()
                .zip(&own.mask)
                .map(|(mb, ma)| mb.iter().chain(ma).copied().collect())
                .collect();
            attend(tape, own.q, k, v, &mask, w_o, scale)
        }
    }
}

// ------------------------------------------------------------------ model

/// Layer-`l` hidden states of both streams, flattened to `[batch * len, d]`.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub text: Var,
    pub visual: Var,
    pub text_mask: Vec<Vec<bool>>,
    pub visual_mask: Vec<Vec<bool>>,
}

impl StreamState {
    pub fn batch(&self) -> usize {
        self.text_mask.len()
    }
}

/// Dropout settings for a training forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Attention weights of one layer, `[batch * heads, len_q, len_kv]` per stream.
#[derive(Debug, Clone, Copy)]
pub struct LayerWeights {
    pub text: Var,
    pub visual: Var,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub params: ParamVars,
    pub weights: Vec<LayerWeights>,
    pub final_state: StreamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IfaModel {
    config: EncoderConfig,
    params: Vec<NamedParam>,
    layout: Layout,
}

impl IfaModel {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder { params: Vec::new(), rng: &mut rng, std: config.init_std };
        let (d, f) = (config.d_model, config.ffn_dim);
        let token_emb = b.normal("embed.token".into(), &[config.vocab_size, d]);
        let pos_emb = b.normal("embed.position".into(), &[config.max_text_len, d]);
        let vis_proj = b.normal("embed.visual_proj".into(), &[config.visual_feature_dim, d]);
        let vis_proj_bias = b.zeros("embed.visual_proj_bias".into(), &[d]);
        let vis_type = b.normal("embed.visual_type".into(), &[2, d]);

        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut shared: Option<(usize, usize, usize)> = None;
            let mut stream = |b: &mut Builder, s: &str| {
                let p = |n: &str| format!("layer{}.{}.{}", l, s, n);
                let ln1_gain = b.ones(p("ln1.gain"), &[d]);
                let ln1_bias = b.zeros(p("ln1.bias"), &[d]);
                let (w_q, w_k, w_v) = match shared {
                    Some(ids) => ids,
                    None => {
                        let pre = if config.share_projections { format!("layer{}.shared", l) } else { format!("layer{}.{}", l, s) };
                        let ids = (
                            b.normal(format!("{}.w_q", pre), &[d, d]),
                            b.normal(format!("{}.w_k", pre), &[d, d]),
                            b.normal(format!("{}.w_v", pre), &[d, d]),
                        );
                        if config.share_projections {
                            shared = Some(ids);
                        }
                        ids
                    }
                };
                StreamParams {
                    ln1_gain,
                    ln1_bias,
                    w_q,
                    w_k,
                    w_v,
                    w_o: b.normal(p("w_o"), &[d, d]),
                    ln2_gain: b.ones(p("ln2.gain"), &[d]),
                    ln2_bias: b.zeros(p("ln2.bias"), &[d]),
                    ffn_w1: b.normal(p("ffn.w1"), &[d, f]),
                    ffn_b1: b.zeros(p("ffn.b1"), &[f]),
                    ffn_w2: b.normal(p("ffn.w2"), &[f, d]),
                    ffn_b2: b.zeros(p("ffn.b2"), &[d]),
                }
            };
            let text = stream(&mut b, "text");
            let visual = stream(&mut b, "visual");
            layers.push(LayerParams { text, visual });
        }
        let final_ln_gain = b.ones("final_ln.gain".into(), &[d]);
        let final_ln_bias = b.zeros("final_ln.bias".into(), &[d]);
        let cls_w = b.normal("classifier.w".into(), &[2 * d, config.n_relations]);
        let cls_b = b.zeros("classifier.b".into(), &[config.n_relations]);

        let layout = Layout {
            token_emb,
            pos_emb,
            vis_proj,
            vis_proj_bias,
            vis_type,
            layers,
            final_ln_gain,
            final_ln_bias,
            cls_w,
            cls_b,
        };
        Ok(IfaModel { config, params: b.params, layout })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn layer_params(&self) -> &[LayerParams] {
        &self.layout.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Rebuilds a model from a config and parameter values in canonical order.
    pub fn from_params(config: EncoderConfig, params: Vec<NamedParam>) -> Result<Self> {
        let mut model = IfaModel::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::format("params", format!("expected {} tensors, got {}", model.params.len(), params.len())));
        }
        for (slot, p) in model.params.iter_mut().zip(params) {
            if slot.name != p.name {
                return Err(Error::format("params", format!("expected `{}`, found `{}`", slot.name, p.name)));
            }
            if slot.tensor.shape() != p.tensor.shape() {
                return Err(Error::format(
                    "params",
                    format!("`{}` has shape {:?}, config implies {:?}", p.name, p.tensor.shape(), slot.tensor.shape()),
                ));
            }
            slot.tensor = p.tensor;
        }
        Ok(model)
    }

    pub fn check_input(&self, x: &ModelInput) -> Result<()> {
        let c = &self.config;
        if x.tokens.is_empty() {
            return Err(Error::Input("empty text".into()));
        }
        if x.tokens.len() > c.max_text_len {
            return Err(Error::Input(format!("text length {} exceeds {}", x.tokens.len(), c.max_text_len)));
        }
        if let Some(t) = x.tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Input(format!("token id {} >= vocab size {}", t, c.vocab_size)));
        }
        for (name, m) in [("head", x.head_marker), ("tail", x.tail_marker)] {
            if m >= x.tokens.len() {
                return Err(Error::Input(format!("{} span start {} out of range for {} tokens", name, m, x.tokens.len())));
            }
        }
        if x.global.len() != c.visual_feature_dim {
            return Err(Error::Input(format!("global feature width {} != {}", x.global.len(), c.visual_feature_dim)));
        }
        if c.use_objects {
            if x.objects.len() > c.max_visual_len {
                return Err(Error::Input(format!("{} objects exceed {}", x.objects.len(), c.max_visual_len)));
            }
            if x.objects.iter().any(|o| o.len() != c.visual_feature_dim) {
                return Err(Error::Input("object feature width mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn register_params(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params.iter().map(|p| tape.param(p.tensor.clone())).collect())
    }

    /// Embeds a batch into the layer-0 stream state.
    pub fn embed(&self, tape: &mut Tape, p: &ParamVars, batch: &[ModelInput]) -> Result<StreamState> {
        let c = &self.config;
        let (n_t, n_v, d_v) = (c.max_text_len, c.visual_len(), c.visual_feature_dim);
        let mut ids = Vec::with_capacity(batch.len() * n_t);
        let mut positions = Vec::with_capacity(batch.len() * n_t);
        let mut text_mask = Vec::with_capacity(batch.len());
        let mut feats = vec![0.0; batch.len() * n_v * d_v];
        let mut types = Vec::with_capacity(batch.len() * n_v);
        let mut visual_mask = Vec::with_capacity(batch.len());
        for (b, x) in batch.iter().enumerate() {
            self.check_input(x)?;
            ids.extend(x.tokens.iter().copied().chain(std::iter::repeat(PAD)).take(n_t));
            positions.extend(0..n_t);
            text_mask.push((0..n_t).map(|i| i < x.tokens.len()).collect());

            let base = b * n_v * d_v;
            feats[base..base + d_v].copy_from_slice(&x.global);
            types.push(0);
            let mut vm = vec![true];
            for slot in 0..n_v - 1 {
                types.push(1);
                match x.objects.get(slot) {
                    Some(o) => {
                        let at = base + (1 + slot) * d_v;
                        feats[at..at + d_v].copy_from_slice(o);
                        vm.push(true);
                    }
                    None => vm.push(false),
                }
            }
            visual_mask.push(vm);
        }
        let l = &self.layout;
        let tok = tape.embedding(p.get(l.token_emb), &ids)?;
        let pos = tape.embedding(p.get(l.pos_emb), &positions)?;
        let text = tape.add(tok, pos)?;

        let f = tape.constant(Tensor::from_parts(vec![batch.len() * n_v, d_v], feats));
        let proj = tape.matmul(f, p.get(l.vis_proj))?;
        let proj = tape.add_row(proj, p.get(l.vis_proj_bias))?;
        let ty = tape.embedding(p.get(l.vis_type), &types)?;
        let visual = tape.add(proj, ty)?;
        Ok(StreamState { text, visual, text_mask, visual_mask })
    }

    /// One fused layer; both streams read `state` and are updated together.
    pub fn encoder_layer(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        layer: &LayerParams,
        state: &StreamState,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(StreamState, LayerWeights)> {
        let c = &self.config;
        let batch = state.batch();
        let scale = 1.0 / (c.d_head as f64).sqrt();
        let normed = |tape: &mut Tape, x: Var, sp: &StreamParams| tape.layer_norm(x, p.get(sp.ln1_gain), p.get(sp.ln1_bias), LAYER_NORM_EPS);

        let (tp, vp) = (&layer.text, &layer.visual);
        let xt = normed(tape, state.text, tp)?;
        let xv = normed(tape, state.visual, vp)?;
        let text_heads = project_qkv(tape, xt, batch, c.n_heads, p.get(tp.w_q), p.get(tp.w_k), p.get(tp.w_v), state.text_mask.clone())?;
        let vis_heads = project_qkv(tape, xv, batch, c.n_heads, p.get(vp.w_q), p.get(vp.w_k), p.get(vp.w_v), state.visual_mask.clone())?;

        let mode = c.fusion_mode;
        let text_attn = cross_modal_attention(tape, &text_heads, mode.text_sees_visual().then_some(&vis_heads), p.get(tp.w_o), scale)?;
        let vis_attn = cross_modal_attention(tape, &vis_heads, mode.visual_sees_text().then_some(&text_heads), p.get(vp.w_o), scale)?;

        let text = self.finish_block(tape, p, tp, state.text, text_attn.out, dropout.as_deref_mut())?;
        let visual = self.finish_block(tape, p, vp, state.visual, vis_attn.out, dropout)?;
        Ok((
            StreamState { text, visual, text_mask: state.text_mask.clone(), visual_mask: state.visual_mask.clone() },
            LayerWeights { text: text_attn.weights, visual: vis_attn.weights },
        ))
    }

    /// Residual add of the attention output, then the feed-forward sublayer.
    fn finish_block(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        sp: &StreamParams,
        residual: Var,
        attn_out: Var,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let attn_out = apply_dropout(tape, attn_out, dropout.as_deref_mut())?;
        let h = tape.add(residual, attn_out)?;
        let x = tape.layer_norm(h, p.get(sp.ln2_gain), p.get(sp.ln2_bias), LAYER_NORM_EPS)?;
        let u = tape.matmul(x, p.get(sp.ffn_w1))?;
        let u = tape.add_row(u, p.get(sp.ffn_b1))?;
        let u = tape.activation(u, self.config.activation);
        let y = tape.matmul(u, p.get(sp.ffn_w2))?;
        let y = tape.add_row(y, p.get(sp.ffn_b2))?;
        let y = apply_dropout(tape, y, dropout)?;
        tape.add(h, y)
    }

    /// Full forward pass to `[batch, n_relations]` logits.
    pub fn forward(&self, tape: &mut Tape, batch: &[ModelInput], mut dropout: Option<&mut Dropout>) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let p = self.register_params(tape);
        let mut state = self.embed(tape, &p, batch)?;
        let mut weights = Vec::with_capacity(self.config.n_layers);
        for layer in &self.layout.layers {
            let (next, w) = self.encoder_layer(tape, &p, layer, &state, dropout.as_deref_mut())?;
            state = next;
            weights.push(w);
        }
        let l = &self.layout;
        let n_t = self.config.max_text_len;
        let h = tape.layer_norm(state.text, p.get(l.final_ln_gain), p.get(l.final_ln_bias), LAYER_NORM_EPS)?;
        let heads: Vec<usize> = batch.iter().enumerate().map(|(b, x)| b * n_t + x.head_marker).collect();
        let tails: Vec<usize> = batch.iter().enumerate().map(|(b, x)| b * n_t + x.tail_marker).collect();
        let hh = tape.gather_rows(h, &heads)?;
        let ht = tape.gather_rows(h, &tails)?;
        let pair = tape.concat(&[hh, ht], 1)?;
        let logits = tape.matmul(pair, p.get(l.cls_w))?;
        let logits = tape.add_row(logits, p.get(l.cls_b))?;
        Ok(ForwardOutput { logits, params: p, weights, final_state: state })
    }

    /// Evaluation-mode logits, `[batch, n_relations]`.
    pub fn logits(&self, batch: &[ModelInput]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, None)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Argmax predictions for a batch (lowest index wins ties).
    pub fn predict(&self, batch: &[ModelInput]) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        let r = self.config.n_relations;
        Ok(logits
            .values()
            .chunks(r)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Evaluation-mode mean cross-entropy.
    pub fn loss(&self, batch: &[ModelInput], labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, None)?;
        let loss = tape.cross_entropy(out.logits, labels)?;
        Ok(tape.value(loss).item())
    }

    /// Mean cross-entropy and its gradient for every parameter, in order.
    pub fn loss_and_grads(
        &self,
        batch: &[ModelInput],
        labels: &[usize],
        dropout: Option<&mut Dropout>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, dropout)?;
        let loss = tape.cross_entropy(out.logits, labels)?;
        tape.backward(loss)?;
        let grads = out
            .params
            .vars()
            .iter()
            .map(|&v| tape.grad(v).expect("parameters carry gradients").to_vec())
            .collect();
        Ok((tape.value(loss).item(), grads))
    }

    /// Per-layer, per-head attention weights for one sample.
    pub fn export_trace(&self, input: &ModelInput) -> Result<AttentionTrace> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, std::slice::from_ref(input), None)?;
        let c = &self.config;
        let (n_t, n_v) = (c.max_text_len, c.visual_len());
        let text_mask: Vec<bool> = out.final_state.text_mask[0].clone();
        let visual_mask: Vec<bool> = out.final_state.visual_mask[0].clone();
        let text_blocks = if c.fusion_mode.text_sees_visual() {
            vec![KeyBlock { modality: Stream::Visual, len: n_v }, KeyBlock { modality: Stream::Text, len: n_t }]
        } else {
            vec![KeyBlock { modality: Stream::Text, len: n_t }]
        };
        let visual_blocks = if c.fusion_mode.visual_sees_text() {
            vec![KeyBlock { modality: Stream::Text, len: n_t }, KeyBlock { modality: Stream::Visual, len: n_v }]
        } else {
            vec![KeyBlock { modality: Stream::Visual, len: n_v }]
        };
        let key_mask = |blocks: &[KeyBlock]| -> Vec<bool> {
            blocks
                .iter()
                .flat_map(|b| match b.modality {
                    Stream::Text => text_mask.clone(),
                    Stream::Visual => visual_mask.clone(),
                })
                .collect()
        };
        let text_keys = key_mask(&text_blocks);
        let visual_keys = key_mask(&visual_blocks);
        let heads = |v: Var, n_q: usize, keys: &[bool]| -> Vec<Vec<Vec<f64>>> {
            let vals = tape.value(v).values();
            let n_kv = keys.len();
            (0..c.n_heads)
                .map(|h| {
                    (0..n_q)
                        .map(|i| {
                            let row = &vals[(h * n_q + i) * n_kv..(h * n_q + i + 1) * n_kv];
                            row.iter().zip(keys).map(|(w, &k)| if k { *w } else { 0.0 }).collect()
                        })
                        .collect()
                })
                .collect()
        };
        let layers = out
            .weights
            .iter()
            .map(|w| LayerTrace { text: heads(w.text, n_t, &text_keys), visual: heads(w.visual, n_v, &visual_keys) })
            .collect();
        Ok(AttentionTrace {
            text_blocks,
            visual_blocks,
            text_mask,
            visual_mask,
            tokens: input.tokens.clone(),
            head_marker: input.head_marker,
            tail_marker: input.tail_marker,
            layers,
        })
    }
}

fn apply_dropout(tape: &mut Tape, x: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
    match dropout {
        Some(d) if d.rate > 0.0 => {
            let keep = 1.0 - d.rate;
            let mask = (0..tape.value(x).numel())
                .map(|_| if d.rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            tape.dropout_mask(x, mask)
        }
        _ => Ok(x),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyBlock {
    pub modality: Stream,
    pub len: usize,
}

/// Weights of one layer, indexed `[head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub text: Vec<Vec<Vec<f64>>>,
    pub visual: Vec<Vec<Vec<f64>>>,
}

/// Attention weights of every layer and head for one sample. Key columns
/// follow `text_blocks` / `visual_blocks`; masked columns are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub text_blocks: Vec<KeyBlock>,
    pub visual_blocks: Vec<KeyBlock>,
    pub text_mask: Vec<bool>,
    pub visual_mask: Vec<bool>,
    pub tokens: Vec<usize>,
    pub head_marker: usize,
    pub tail_marker: usize,
    pub layers: Vec<LayerTrace>,
}

impl AttentionTrace {
    /// Column offset of the visual block in text-stream rows, if present.
    pub fn text_visual_offset(&self) -> Option<usize> {
        let mut off = 0;
        for b in &self.text_blocks {
            if b.modality == Stream::Visual {
                return Some(off);
            }
            off += b.len;
        }
        None
    }

    /// Mean over heads of the last layer's text-query weights on object
    /// tokens (global token excluded), for query position `pos`.
    pub fn last_layer_object_weights(&self, pos: usize) -> Option<Vec<f64>> {
        let off = self.text_visual_offset()?;
        let layer = self.layers.last()?;
        let n_obj = self.visual_mask.len() - 1;
        let heads = layer.text.len() as f64;
        let mut acc = vec![0.0; n_obj];
        for h in &layer.text {
            for (j, a) in acc.iter_mut().enumerate() {
                *a += h[pos][off + 1 + j] / heads;
            }
        }
        Some(acc)
    }
}
