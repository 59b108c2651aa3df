use ifa_core::synthetic::*;
use ifa_core::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

fn small() -> DatasetSpec {
    DatasetSpec { n_train: 300, n_dev: 100, n_test: 100, ..DatasetSpec::default() }
}

fn all(s: &Splits) -> impl Iterator<Item = &Sample> {
    s.train.samples.iter().chain(&s.dev.samples).chain(&s.test.samples)
}

#[test]
fn generation_is_byte_deterministic() {
    let a = generate(&small()).unwrap();
    let b = generate(&small()).unwrap();
    for (x, y) in [(&a.train, &b.train), (&a.dev, &b.dev), (&a.test, &b.test)] {
        assert_eq!(x.to_jsonl().unwrap(), y.to_jsonl().unwrap());
    }
    let c = generate(&DatasetSpec { seed: 18, ..small() }).unwrap();
    assert_ne!(a.train.to_jsonl().unwrap(), c.train.to_jsonl().unwrap());
}

#[test]
fn split_ids_are_disjoint() {
    let s = generate(&small()).unwrap();
    let ids: Vec<u64> = all(&s).map(|x| x.id).collect();
    let set: HashSet<u64> = ids.iter().copied().collect();
    assert_eq!(set.len(), ids.len());
    assert_eq!(s.train.len() + s.dev.len() + s.test.len(), 500);
}

#[test]
fn oracle_decoder_is_perfect() {
    for map in [RelationMap::Product, RelationMap::ModularSum] {
        let spec = DatasetSpec { relation_map: map, ..small() };
        let s = generate(&spec).unwrap();
        for x in all(&s) {
            assert_eq!(oracle_decode(&spec, x), Some(x.label), "sample {}", x.id);
        }
    }
}

#[test]
fn label_histogram_within_three_deviations() {
    let spec = DatasetSpec::default();
    let s = generate(&spec).unwrap();
    let labels: Vec<usize> = all(&s).map(|x| x.label).collect();
    let n = labels.len() as f64;
    let r = spec.n_relations;
    for label in 0..=r {
        let p = if label == BACKGROUND { spec.background_rate } else { (1.0 - spec.background_rate) / r as f64 };
        let count = labels.iter().filter(|&&l| l == label).count() as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!((count - n * p).abs() <= 3.0 * sd, "label {}: {} vs {:.1} +- {:.1}", label, count, n * p, sd);
    }
}

#[test]
fn ceiling_matches_empirical_bayes_decoder() {
    let spec = DatasetSpec { n_train: 100_000, n_dev: 1, n_test: 100_000, seed: 5, ..DatasetSpec::default() };
    let s = generate(&spec).unwrap();
    let decoder = CueBayesDecoder::fit(&s.train);
    let hits = s.test.samples.iter().filter(|x| decoder.predict(x) == x.label).count();
    let empirical = hits as f64 / s.test.len() as f64;
    let closed = text_only_ceiling(&spec);
    // 4 standard errors of a 100k-sample proportion
    let se = (closed * (1.0 - closed) / 1e5).sqrt();
    assert!((empirical - closed).abs() < 4.0 * se, "{} vs {}", empirical, closed);
    assert!((closed - 0.51).abs() < 1e-12);
}

#[test]
fn ceiling_boundary_cases() {
    assert_eq!(text_only_ceiling(&DatasetSpec { p_text: 1.0, ..DatasetSpec::default() }), 1.0);
    for map in [RelationMap::Product, RelationMap::ModularSum] {
        let spec = DatasetSpec { p_text: 0.0, background_rate: 0.0, relation_map: map, ..DatasetSpec::default() };
        assert!((text_only_ceiling(&spec) - 1.0 / 8.0).abs() < 1e-15);
    }
}

#[test]
fn jsonl_fields_are_exact() {
    let s = generate(&small()).unwrap();
    let text = s.dev.to_jsonl().unwrap();
    let first = text.lines().next().unwrap();
    let v: serde_json::Value = serde_json::from_str(first).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    let mut want = ["id", "tokens", "head_span", "tail_span", "objects", "global", "label", "text_decidable", "gold_alignment"];
    want.sort_unstable();
    assert_eq!(keys, want);
    assert!(first.starts_with("{\"id\":"));
}

#[test]
fn jsonl_file_round_trip_is_byte_exact() {
    let s = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    s.train.write_jsonl(&a).unwrap();
    let back = Dataset::read_jsonl(&a).unwrap();
    assert_eq!(back, s.train);
    back.write_jsonl(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn malformed_jsonl_names_the_field() {
    let s = generate(&small()).unwrap();
    let line = s.dev.to_jsonl().unwrap().lines().next().unwrap().replace("\"label\"", "\"labell\"");
    match Dataset::from_jsonl(&line) {
        Err(Error::Format { field, .. }) => assert_eq!(field, "labell"),
        other => panic!("{:?}", other.map(|d| d.len())),
    }
}

#[test]
fn spec_json_validation_names_field() {
    let good = serde_json::to_string(&DatasetSpec::default()).unwrap();
    assert_eq!(DatasetSpec::from_json(&good).unwrap(), DatasetSpec::default());
    let bad = good.replace("\"p_text\":0.3", "\"p_text\":1.5");
    assert!(matches!(DatasetSpec::from_json(&bad), Err(Error::Config { field, .. }) if field == "p_text"));
    let typo = good.replace("\"p_text\"", "\"p_txt\"");
    assert!(matches!(DatasetSpec::from_json(&typo), Err(Error::Format { field, .. }) if field == "p_txt"));
}

fn object_multiset(d: &Dataset) -> Vec<Vec<u64>> {
    let mut blocks: Vec<Vec<u64>> = d
        .samples
        .iter()
        .map(|s| s.global.iter().chain(s.objects.iter().flatten()).map(|v| v.to_bits()).collect())
        .collect();
    blocks.sort();
    blocks
}

#[test]
fn shuffles_preserve_the_image_multiset() {
    let d = generate(&small()).unwrap().train;
    let once = shuffle_images(&d, 1);
    let twice = shuffle_images(&once, 2);
    assert_eq!(object_multiset(&d), object_multiset(&once));
    assert_eq!(object_multiset(&d), object_multiset(&twice));
    assert_ne!(d, once);
    for (a, b) in d.samples.iter().zip(&twice.samples) {
        assert_eq!((a.id, &a.tokens, a.head_span, a.tail_span, a.label, a.text_decidable), (b.id, &b.tokens, b.head_span, b.tail_span, b.label, b.text_decidable));
    }
}

#[test]
fn inverse_permutation_restores_images() {
    let d = generate(&small()).unwrap().dev;
    let mut perm: Vec<usize> = (0..d.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let there = apply_image_permutation(&d, &perm);
    let back = apply_image_permutation(&there, &inv);
    for (a, b) in d.samples.iter().zip(&back.samples) {
        assert_eq!(Sample { gold_alignment: a.gold_alignment, ..b.clone() }, *a);
    }
}

#[test]
fn text_never_reveals_attributes() {
    // the cue slot is the only label-bearing token, and only outside neutral samples
    let spec = small();
    let s = generate(&spec).unwrap();
    let neutral: Vec<&Sample> = all(&s).filter(|x| x.tokens.last() == Some(&NEUTRAL_CUE)).collect();
    assert!(neutral.iter().all(|x| !x.text_decidable));
    for x in all(&s) {
        let cue = *x.tokens.last().unwrap();
        assert_eq!(x.text_decidable, cue != NEUTRAL_CUE);
        if cue >= RELATION_CUE_BASE && cue < RELATION_CUE_BASE + spec.n_relations {
            assert_eq!(x.label, cue - RELATION_CUE_BASE + 1);
        }
        if cue == NO_REL_CUE {
            assert_eq!(x.label, BACKGROUND);
        }
        // only the cue slot holds a cue token
        assert!(x.tokens[..x.tokens.len() - 1].iter().all(|&t| !(NO_REL_CUE..RELATION_CUE_BASE + spec.n_relations).contains(&t)));
    }
}
