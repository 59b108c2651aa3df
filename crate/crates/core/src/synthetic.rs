//! Synthetic multimodal relation extraction.
//!
//! Generative rule:
//!
//! * Every sample mentions a head and a tail entity, each wrapped in reserved
//!   marker tokens. Entity token ids name entities one-to-one.
//! * The image holds one object per mentioned entity plus `distractor_objects`
//!   objects for entities absent from the text, in random order. An object's
//!   feature vector is `[entity one-hot | attribute one-hot]` plus Gaussian
//!   noise, where the attribute `a` in `0..A` (`A = n_relations`) is drawn per
//!   sample and never appears in the text.
//! * The relation of a non-background sample is a fixed public function of the
//!   head and tail attributes (see [`RelationMap`]).
//! * A cue slot in the text carries `NO_REL` for background samples, the
//!   relation's own cue token for a `p_text` fraction of the rest, and a
//!   neutral token otherwise.
//! * The global feature is the mean of the object features plus noise, which
//!   loses the binding between entities and attributes.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const HEAD_START: usize = 1;
pub const HEAD_END: usize = 2;
pub const TAIL_START: usize = 3;
pub const TAIL_END: usize = 4;
pub const NO_REL_CUE: usize = 5;
pub const NEUTRAL_CUE: usize = 6;
/// First relation cue token; relation `r` (1-based) uses `RELATION_CUE_BASE + r - 1`.
pub const RELATION_CUE_BASE: usize = 7;

/// Label of the "no relation" class.
pub const BACKGROUND: usize = 0;

/// How the relation label is derived from the two hidden attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationMap {
    /// `1 + ((a_h + a_t) mod R)`.
    ModularSum,
    /// `1 + (a_h mod R_h) * R_t + (a_t mod R_t)` where `R_t` is the largest
    /// divisor of `R` not exceeding `sqrt(R)` and `R_h = R / R_t`.
    /// Each entity contributes one factor, so the label is a sum of
    /// per-entity scores and is readable by a linear head over the two
    /// entity representations.
    Product,
}

impl RelationMap {
    pub fn apply(self, a_head: usize, a_tail: usize, n_relations: usize) -> usize {
        match self {
            RelationMap::ModularSum => 1 + (a_head + a_tail) % n_relations,
            RelationMap::Product => {
                let (rh, rt) = product_factors(n_relations);
                1 + (a_head % rh) * rt + (a_tail % rt)
            }
        }
    }
}

/// `(R_h, R_t)` with `R_h * R_t == r` and `R_h >= R_t`, as balanced as possible.
pub fn product_factors(r: usize) -> (usize, usize) {
    let mut best = (r, 1);
    for t in 1..=r {
        if t * t > r {
            break;
        }
        if r.is_multiple_of(t) {
            best = (r / t, t);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Relation count excluding background.
    pub n_relations: usize,
    pub background_rate: f64,
    pub p_text: f64,
    pub vocab_size: usize,
    pub text_len: usize,
    /// Object slots per image (entity objects plus distractors).
    pub n_objects: usize,
    /// Feature width; the first `object_feature_dim - n_relations` dims name the entity.
    pub object_feature_dim: usize,
    pub distractor_objects: usize,
    pub feature_noise: f64,
    pub relation_map: RelationMap,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 17,
            n_train: 5000,
            n_dev: 1000,
            n_test: 1000,
            n_relations: 8,
            background_rate: 0.2,
            p_text: 0.3,
            vocab_size: 48,
            text_len: 12,
            n_objects: 4,
            object_feature_dim: 24,
            distractor_objects: 2,
            feature_noise: 0.05,
            relation_map: RelationMap::Product,
        }
    }
}

/// Marker, entity and cue tokens around an entity pair plus the cue slot.
const FIXED_TOKENS: usize = 7;

impl DatasetSpec {
    pub fn n_attributes(&self) -> usize {
        self.n_relations
    }

    pub fn n_entities(&self) -> usize {
        self.object_feature_dim.saturating_sub(self.n_attributes())
    }

    pub fn entity_token(&self, entity: usize) -> usize {
        RELATION_CUE_BASE + self.n_relations + entity
    }

    pub fn first_filler_token(&self) -> usize {
        self.entity_token(self.n_entities())
    }

    pub fn n_filler_tokens(&self) -> usize {
        self.vocab_size.saturating_sub(self.first_filler_token())
    }

    /// Objects actually present per image.
    pub fn objects_per_image(&self) -> usize {
        2 + self.distractor_objects
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64, upper_open: bool| -> Result<()> {
            let ok = v.is_finite() && v >= 0.0 && if upper_open { v < 1.0 } else { v <= 1.0 };
            if ok {
                Ok(())
            } else {
                Err(Error::config(name, format!("{} outside {}", v, if upper_open { "[0, 1)" } else { "[0, 1]" })))
            }
        };
        for (name, v) in [("n_train", self.n_train), ("n_dev", self.n_dev), ("n_test", self.n_test)] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.n_relations < 2 {
            return Err(Error::config("n_relations", "need at least 2 relations"));
        }
        prob("background_rate", self.background_rate, true)?;
        prob("p_text", self.p_text, false)?;
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return Err(Error::config("feature_noise", "must be finite and non-negative"));
        }
        if self.text_len < FIXED_TOKENS {
            return Err(Error::config("text_len", format!("must be at least {}", FIXED_TOKENS)));
        }
        if self.objects_per_image() > self.n_objects {
            return Err(Error::config(
                "distractor_objects",
                format!("2 entity objects + {} distractors exceed n_objects {}", self.distractor_objects, self.n_objects),
            ));
        }
        if self.n_entities() < self.objects_per_image() {
            return Err(Error::config(
                "object_feature_dim",
                format!(
                    "leaves {} entities; need at least {} distinct entities per image",
                    self.n_entities(),
                    self.objects_per_image()
                ),
            ));
        }
        if self.n_filler_tokens() == 0 {
            return Err(Error::config(
                "vocab_size",
                format!("must exceed {} to leave room for filler tokens", self.first_filler_token()),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DatasetSpec = serde_json::from_str(text).map_err(|e| Error::format(json_field(&e), e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Best-effort name of the field a serde_json error refers to.
pub(crate) fn json_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "<document>".to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: u64,
    pub tokens: Vec<usize>,
    /// Half-open range covering the head entity including its markers; the
    /// start marker sits at `head_span[0]`.
    pub head_span: [usize; 2],
    pub tail_span: [usize; 2],
    #[serde(serialize_with = "ser_matrix")]
    pub objects: Vec<Vec<f64>>,
    #[serde(serialize_with = "ser_vector")]
    pub global: Vec<f64>,
    pub label: usize,
    /// Diagnostic only.
    pub text_decidable: bool,
    /// Diagnostic only: object index matching `[head, tail]`.
    pub gold_alignment: [Option<usize>; 2],
}

impl Sample {
    pub fn head_marker(&self) -> usize {
        self.head_span[0]
    }

    pub fn tail_marker(&self) -> usize {
        self.tail_span[0]
    }

    pub fn check(&self, spec: &DatasetSpec) -> Result<()> {
        let bad = |what: String| Err(Error::Input(format!("sample {}: {}", self.id, what)));
        let n = self.tokens.len();
        for (name, s) in [("head_span", self.head_span), ("tail_span", self.tail_span)] {
            if s[0] >= s[1] || s[1] > n {
                return bad(format!("{} {:?} out of range for {} tokens", name, s, n));
            }
        }
        if self.head_span[1] > self.tail_span[0] && self.tail_span[1] > self.head_span[0] {
            return bad("entity spans overlap".into());
        }
        if self.label > spec.n_relations {
            return bad(format!("label {} out of range", self.label));
        }
        for g in self.gold_alignment.iter().flatten() {
            if *g >= self.objects.len() {
                return bad(format!("gold alignment {} out of range", g));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn get(&self, id: u64) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(line)
                .map_err(|e| Error::format(json_field(&e), format!("line {}: {}", i + 1, e)))?;
            samples.push(s);
        }
        Ok(Dataset { samples })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut text = String::new();
        for line in f.lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Draws the three splits. Ids are consecutive across splits, so splits are
/// disjoint in id; output is a pure function of `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut next_id = 0u64;
    let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Dataset {
        let samples = (0..n)
            .map(|_| {
                let s = draw_sample(spec, next_id, rng);
                next_id += 1;
                s
            })
            .collect();
        Dataset { samples }
    };
    let train = split(spec.n_train, &mut rng);
    let dev = split(spec.n_dev, &mut rng);
    let test = split(spec.n_test, &mut rng);
    Ok(Splits { train, dev, test })
}

fn draw_sample(spec: &DatasetSpec, id: u64, rng: &mut ChaCha8Rng) -> Sample {
    let n_ent = spec.n_entities();
    let n_attr = spec.n_attributes();
    let noise = Normal::new(0.0, spec.feature_noise).expect("validated noise");

    // distinct entities: head, tail, then distractors
    let entities: Vec<usize> = rand::seq::index::sample(rng, n_ent, spec.objects_per_image()).into_vec();
    let attributes: Vec<usize> = (0..entities.len()).map(|_| rng.gen_range(0..n_attr)).collect();

    let background = rng.gen_bool(spec.background_rate);
    let cue_label = !background && rng.gen_bool(spec.p_text);
    let label = if background {
        BACKGROUND
    } else {
        spec.relation_map.apply(attributes[0], attributes[1], spec.n_relations)
    };
    let cue = if background {
        NO_REL_CUE
    } else if cue_label {
        RELATION_CUE_BASE + label - 1
    } else {
        NEUTRAL_CUE
    };

    // fillers split over three gaps: before head, between entities, before the cue
    let free = spec.text_len - FIXED_TOKENS;
    let n_fill = rng.gen_range(0..=free);
    let mut gaps = [0usize; 3];
    for _ in 0..n_fill {
        gaps[rng.gen_range(0..3)] += 1;
    }
    let filler = |rng: &mut ChaCha8Rng| spec.first_filler_token() + rng.gen_range(0..spec.n_filler_tokens());
    let mut tokens = Vec::with_capacity(spec.text_len);
    for _ in 0..gaps[0] {
        tokens.push(filler(rng));
    }
    let head_start = tokens.len();
    tokens.extend([HEAD_START, spec.entity_token(entities[0]), HEAD_END]);
    for _ in 0..gaps[1] {
        tokens.push(filler(rng));
    }
    let tail_start = tokens.len();
    tokens.extend([TAIL_START, spec.entity_token(entities[1]), TAIL_END]);
    for _ in 0..gaps[2] {
        tokens.push(filler(rng));
    }
    tokens.push(cue);

    let mut order: Vec<usize> = (0..entities.len()).collect();
    order.shuffle(rng);
    let dim = spec.object_feature_dim;
    let objects: Vec<Vec<f64>> = order
        .iter()
        .map(|&k| {
            let mut f: Vec<f64> = (0..dim).map(|_| noise.sample(rng)).collect();
            f[entities[k]] += 1.0;
            f[n_ent + attributes[k]] += 1.0;
            f
        })
        .collect();
    let mut global = vec![0.0; dim];
    for o in &objects {
        for (g, v) in global.iter_mut().zip(o) {
            *g += v / objects.len() as f64;
        }
    }
    for g in global.iter_mut() {
        *g += noise.sample(rng);
    }
    let slot_of = |k: usize| order.iter().position(|&o| o == k);

    Sample {
        id,
        tokens,
        head_span: [head_start, head_start + 3],
        tail_span: [tail_start, tail_start + 3],
        objects,
        global,
        label,
        text_decidable: background || cue_label,
        gold_alignment: [slot_of(0), slot_of(1)],
    }
}

/// Re-pairs images with sentences by a uniform random permutation.
pub fn shuffle_images(data: &Dataset, seed: u64) -> Dataset {
    let mut perm: Vec<usize> = (0..data.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    apply_image_permutation(data, &perm)
}

/// Sample `i` receives the image of sample `perm[i]`. Text, labels and ids stay
/// in place. Gold alignments of samples that received another sample's image
/// no longer describe it and are cleared.
pub fn apply_image_permutation(data: &Dataset, perm: &[usize]) -> Dataset {
    assert_eq!(perm.len(), data.len(), "permutation length");
    let samples = data
        .samples
        .iter()
        .zip(perm)
        .enumerate()
        .map(|(i, (s, &p))| {
            if p == i {
                return s.clone();
            }
            let src = &data.samples[p];
            Sample {
                objects: src.objects.clone(),
                global: src.global.clone(),
                gold_alignment: [None, None],
                ..s.clone()
            }
        })
        .collect();
    Dataset { samples }
}

/// Bayes-optimal accuracy of any predictor that sees only the text.
///
/// Background and cue samples are decided exactly; on the rest the text is
/// independent of the label, so the best guess is the mode of the relation map
/// under uniform attributes.
pub fn text_only_ceiling(spec: &DatasetSpec) -> f64 {
    let r = spec.n_relations;
    let a = spec.n_attributes();
    let mut counts = vec![0usize; r + 1];
    for ah in 0..a {
        for at in 0..a {
            counts[spec.relation_map.apply(ah, at, r)] += 1;
        }
    }
    let mode = *counts.iter().max().unwrap() as f64 / (a * a) as f64;
    let bg = spec.background_rate;
    bg + (1.0 - bg) * (spec.p_text + (1.0 - spec.p_text) * mode)
}

/// Label predicted by a decoder with access to gold alignment and the feature
/// layout. Returns `None` when the alignment is missing.
pub fn oracle_decode(spec: &DatasetSpec, sample: &Sample) -> Option<usize> {
    if sample.tokens.contains(&NO_REL_CUE) {
        return Some(BACKGROUND);
    }
    let n_ent = spec.n_entities();
    let attr = |slot: usize| {
        let f = &sample.objects[slot][n_ent..n_ent + spec.n_attributes()];
        argmax(f)
    };
    let [h, t] = sample.gold_alignment;
    Some(spec.relation_map.apply(attr(h?), attr(t?), spec.n_relations))
}

/// Majority-vote decoder over the only label-bearing text feature, the cue
/// slot token. `fit` tallies labels per cue token; ties go to the lowest label.
#[derive(Debug, Default)]
pub struct CueBayesDecoder {
    table: HashMap<usize, usize>,
}

impl CueBayesDecoder {
    pub fn fit(data: &Dataset) -> Self {
        let mut counts: HashMap<usize, Vec<usize>> = HashMap::new();
        for s in &data.samples {
            let cue = *s.tokens.last().unwrap();
            let c = counts.entry(cue).or_default();
            if c.len() <= s.label {
                c.resize(s.label + 1, 0);
            }
            c[s.label] += 1;
        }
        let table = counts.into_iter().map(|(k, c)| (k, argmax_usize(&c))).collect();
        CueBayesDecoder { table }
    }

    pub fn predict(&self, s: &Sample) -> usize {
        self.table.get(s.tokens.last().unwrap()).copied().unwrap_or(BACKGROUND)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn argmax_usize(v: &[usize]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------- float output

/// Decimal with 17 significant digits, enough for a bit-exact `f64` round trip.
pub fn format_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

fn raw_number<E: serde::ser::Error>(v: f64) -> std::result::Result<Box<serde_json::value::RawValue>, E> {
    if !v.is_finite() {
        return Err(E::custom(format!("non-finite value {}", v)));
    }
    serde_json::value::RawValue::from_string(format_f64(v)).map_err(E::custom)
}

pub(crate) fn ser_vector<S: serde::Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for &x in v {
        seq.serialize_element(&raw_number::<S::Error>(x)?)?;
    }
    seq.end()
}

fn ser_matrix<S: serde::Serializer>(m: &[Vec<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    struct Row<'a>(&'a [f64]);
    impl Serialize for Row<'_> {
        fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
            ser_vector(self.0, s)
        }
    }
    let mut seq = s.serialize_seq(Some(m.len()))?;
    for row in m {
        seq.serialize_element(&Row(row))?;
    }
    seq.end()
}
