use ifa_core::encoder::{EncoderConfig, IfaModel};
use ifa_core::experiment::*;
use ifa_core::synthetic::{generate, Dataset, DatasetSpec, Sample, Splits};
use ifa_core::train::TrainConfig;
use ifa_core::Error;

fn tiny_spec() -> DatasetSpec {
    DatasetSpec { n_train: 64, n_dev: 24, n_test: 24, ..DatasetSpec::default() }
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        encoder: EncoderConfig { d_model: 16, n_heads: 2, d_head: 8, n_layers: 1, ffn_dim: 16, ..EncoderConfig::default() },
        train: TrainConfig { n_epochs: 2, batch_size: 16, ..TrainConfig::default() },
        seeds: vec![0, 1],
        shuffle_seed: 5,
    }
}

fn runner() -> Runner {
    let spec = tiny_spec();
    let splits = generate(&spec).unwrap();
    Runner::new(spec, splits, tiny_config()).unwrap()
}

fn metrics_bits(r: &ExperimentReport) -> Vec<(Variant, Condition, u64, Vec<u64>)> {
    r.arms
        .iter()
        .map(|a| {
            let m = &a.test;
            (a.variant, a.condition, a.seed, [m.accuracy, m.precision, m.recall, m.micro_f1].iter().map(|v| v.to_bits()).collect())
        })
        .collect()
}

#[test]
fn binomial_p_value_matches_direct_sum() {
    assert!((binomial_two_sided_p(5, 10, 0.5) - 1.0).abs() < 1e-12);
    assert!((binomial_two_sided_p(0, 10, 0.5) - 2.0 / 1024.0).abs() < 1e-15);
    // direct: pmf via integer binomial coefficients
    let choose = |n: u64, k: u64| -> f64 { (1..=k).fold(1.0, |acc, i| acc * (n - k + i) as f64 / i as f64) };
    for (n, p) in [(12u64, 0.25f64), (20, 0.3), (7, 0.9)] {
        let pmf: Vec<f64> = (0..=n).map(|i| choose(n, i) * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32)).collect();
        for k in 0..=n {
            let want: f64 = pmf.iter().filter(|&&q| q <= pmf[k as usize] * (1.0 + 1e-7)).sum();
            let got = binomial_two_sided_p(k as usize, n as usize, p);
            assert!((got - want.min(1.0)).abs() < 1e-9, "n {} k {} p {}: {} vs {}", n, k, p, got, want);
        }
    }
    assert_eq!(binomial_two_sided_p(0, 0, 0.25), 1.0);
}

#[test]
fn split_files_round_trip() {
    let spec = tiny_spec();
    let splits = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_splits(dir.path(), &spec, &splits).unwrap();
    let (spec2, back) = read_splits(dir.path()).unwrap();
    assert_eq!(spec2, spec);
    assert_eq!(back, splits);
    let again = tempfile::tempdir().unwrap();
    write_splits(again.path(), &spec2, &back).unwrap();
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "spec.json"] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap(), "{}", f);
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(read_splits(empty.path()), Err(Error::Input(_))));
}

#[test]
fn encoder_sizes_follow_the_data() {
    let spec = DatasetSpec { n_relations: 6, text_len: 10, n_objects: 5, ..tiny_spec() };
    let enc = fit_encoder_to_data(&EncoderConfig::default(), &spec);
    assert_eq!((enc.n_relations, enc.max_text_len, enc.max_visual_len, enc.visual_feature_dim), (7, 10, 5, 24));
}

#[test]
fn variants_set_fusion_and_objects() {
    use ifa_core::encoder::FusionMode::*;
    let base = EncoderConfig::default();
    let cases = [
        (Variant::TextOnly, Separate, true),
        (Variant::IfaObjects, IfaFull, true),
        (Variant::Vanilla, IfaFull, false),
        (Variant::WoTextAttn, NoTextToVisual, false),
    ];
    for (v, mode, objects) in cases {
        let c = v.apply(&base);
        assert_eq!((c.fusion_mode, c.use_objects), (mode, objects), "{:?}", v);
    }
}

#[test]
fn shuffle_experiment_isolates_the_text_only_arm() {
    let mut r = runner();
    let report = r.shuffle_experiment("mem").unwrap().report;
    assert_eq!(report.arms.len(), 12);
    for seed in [0, 1] {
        let text: Vec<_> = report.arms.iter().filter(|a| a.variant == Variant::TextOnly && a.seed == seed).collect();
        assert_eq!(text.len(), 3);
        assert_eq!(text[0].test, text[1].test);
        assert_eq!(text[0].test, text[2].test);
        assert_eq!(text[0].history, text[1].history);
    }
    // standard and shuffled-test share the standard-trained model
    let ifa = |c| report.arms.iter().find(|a| a.variant == Variant::IfaObjects && a.condition == c && a.seed == 0).unwrap();
    assert_eq!(ifa(Condition::Standard).history, ifa(Condition::ShuffleTest).history);
    assert_ne!(ifa(Condition::Standard).history, ifa(Condition::ShuffleTrain).history);
    let row = report.row(Variant::TextOnly, Condition::Standard).unwrap();
    assert_eq!(row.per_seed_micro_f1.len(), 2);
    assert!((row.mean_micro_f1 - mean(&row.per_seed_micro_f1)).abs() < 1e-15);
}

#[test]
fn reports_are_reproducible_and_round_trip() {
    let a = runner().ablation("mem").unwrap().report;
    let b = runner().ablation("mem").unwrap().report;
    assert_eq!(metrics_bits(&a), metrics_bits(&b));
    assert_eq!(a.arms.len(), 6);
    let text = a.to_json().unwrap();
    let back: ExperimentReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_json().unwrap(), text);

    // the embedded config alone reproduces the metrics
    let cfg = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(cfg, a.config);
    let spec = a.dataset.clone();
    let c = Runner::new(spec.clone(), generate(&spec).unwrap(), cfg).unwrap().ablation("mem").unwrap().report;
    assert_eq!(metrics_bits(&a), metrics_bits(&c));
}

#[test]
fn diagnostic_fields_never_reach_the_models() {
    let spec = tiny_spec();
    let splits = generate(&spec).unwrap();
    let scrub = |d: &Dataset| Dataset::new(d.samples.iter().map(|s| Sample { text_decidable: false, gold_alignment: [None, None], ..s.clone() }).collect());
    let blind = Splits { train: scrub(&splits.train), dev: scrub(&splits.dev), test: scrub(&splits.test) };
    let cfg = ExperimentConfig { seeds: vec![3], ..tiny_config() };
    let a = Runner::new(spec.clone(), splits, cfg.clone()).unwrap().shuffle_experiment("a").unwrap().report;
    let b = Runner::new(spec, blind, cfg).unwrap().shuffle_experiment("b").unwrap().report;
    assert_eq!(metrics_bits(&a), metrics_bits(&b));
}

#[test]
fn config_parsing() {
    let text = serde_json::to_string(&tiny_config()).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), tiny_config());
    let typo = text.replace("\"seeds\"", "\"sedes\"");
    assert!(matches!(ExperimentConfig::from_json(&typo), Err(Error::Format { .. })));
    let none = ExperimentConfig { seeds: vec![], ..tiny_config() };
    assert!(matches!(
        ExperimentConfig::from_json(&serde_json::to_string(&none).unwrap()),
        Err(Error::Config { field, .. }) if field == "seeds"
    ));
}

#[test]
fn trace_files_are_normalized() {
    let spec = tiny_spec();
    let splits = generate(&spec).unwrap();
    let cfg = fit_encoder_to_data(&tiny_config().encoder, &spec);
    let model = IfaModel::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let few = Dataset::new(splits.test.samples[..3].to_vec());
    let summary = trace_samples(&model, &few, Some(dir.path()), true).unwrap();
    assert_eq!(summary.n_scored, 3);
    assert_eq!(summary.null_rate, 0.25);
    let rec = &summary.samples[0];
    assert_eq!(rec.files.len(), 2 * model.config().n_heads * model.config().n_layers);
    for f in rec.files.iter().filter(|f| f.ends_with(".csv")) {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&header[..5], ["position", "token", "marker", "v_global", "v_obj0"]);
        assert_eq!(header.len(), 3 + 5 + 12);
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), few.samples[0].tokens.len());
        for row in rows {
            let sum: f64 = row.split(',').skip(3).map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
    assert!(dir.path().join(rec.files[1].clone()).to_string_lossy().ends_with(".svg"));
    let head_row = std::fs::read_to_string(dir.path().join(&rec.files[0])).unwrap();
    assert!(head_row.contains(",head,"));
    assert!(head_row.contains(",tail,"));
}

#[test]
fn trace_needs_object_tokens() {
    let spec = tiny_spec();
    let splits = generate(&spec).unwrap();
    let vanilla = Variant::Vanilla.apply(&fit_encoder_to_data(&tiny_config().encoder, &spec));
    let model = IfaModel::new(vanilla).unwrap();
    assert!(matches!(alignment_hit_rate(&model, &splits.test), Err(Error::Input(_))));
}
