use ifa_core::encoder::{EncoderConfig, IfaModel};
use ifa_core::synthetic::{generate, Dataset, DatasetSpec};
use ifa_core::train::*;
use ifa_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model(seed: u64) -> IfaModel {
    IfaModel::new(EncoderConfig { d_model: 16, n_heads: 2, d_head: 8, n_layers: 1, ffn_dim: 32, seed, ..EncoderConfig::default() })
        .unwrap()
}

fn tiny_data(n: usize, seed: u64) -> Dataset {
    let spec = DatasetSpec { seed, n_train: n, n_dev: 1, n_test: 1, ..DatasetSpec::default() };
    generate(&spec).unwrap().train
}

#[test]
fn adam_matches_unrolled_reference() {
    // loss = sum c_i (p_i - t_i)^2
    let c = [0.5, 2.0, 1.5];
    let t = [1.0, -2.0, 0.25];
    let grad = |p: &[f64]| -> Vec<f64> { (0..3).map(|i| 2.0 * c[i] * (p[i] - t[i])).collect() };
    for wd in [0.0, 0.01] {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut opt = Adam::new(lr, b1, b2, eps, wd);
        let mut p = vec![0.3, 0.7, -1.1];
        for _ in 0..10 {
            let g = grad(&p);
            opt.update(&mut [p.as_mut_slice()], &[g]).unwrap();
        }
        // hand-unrolled scalar recursion
        let mut q = [0.3, 0.7, -1.1];
        let mut m = [0.0; 3];
        let mut v = [0.0; 3];
        for step in 1..=10 {
            let g = grad(&q);
            for i in 0..3 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - f64::powi(b1, step));
                let vh = v[i] / (1.0 - f64::powi(b2, step));
                q[i] -= lr * (mh / (vh.sqrt() + eps) + wd * q[i]);
            }
        }
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12, "{} vs {}", p[i], q[i]);
        }
        assert_eq!(opt.steps_taken(), 10);
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut opt = Adam::new(0.01, 0.9, 0.999, 1e-12, 0.0);
    let mut p = vec![1.0, 1.0];
    opt.update(&mut [p.as_mut_slice()], &[vec![3.0, -0.002]]).unwrap();
    assert!((p[0] - 0.99).abs() < 1e-12);
    assert!((p[1] - 1.01).abs() < 1e-9);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut opt = Adam::new(0.01, 0.9, 0.999, 1e-8, 0.0);
    let mut p = vec![1.0, 1.0];
    assert!(matches!(opt.update(&mut [p.as_mut_slice()], &[vec![1.0]]), Err(Error::Shape { .. })));
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let mut g: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let before = g.clone();
        let max = rng.gen_range(0.1..20.0);
        let pre = clip_grad_norm(&mut g, max);
        assert_eq!(pre, global_norm(&before));
        assert!(global_norm(&g) <= max + 1e-9);
        if pre <= max {
            assert_eq!(g, before);
        } else {
            // direction preserved
            let s = g[0][0] / before[0][0];
            for (a, b) in g.iter().flatten().zip(before.iter().flatten()) {
                assert!((a - s * b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn metrics_hand_case() {
    let m = score(&[1, 1, 0, 2], &[1, 2, 1, 2], 3).unwrap();
    assert_eq!((m.tp, m.fp, m.fn_), (2, 2, 1));
    assert_eq!(m.accuracy, 0.5);
    assert_eq!(m.precision, 0.5);
    assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
    assert!((m.micro_f1 - 4.0 / 7.0).abs() < 1e-15);
    assert_eq!(m.per_relation[0], RelationCounts { label: 1, tp: 1, fp: 1, fn_: 1 });
    assert_eq!(m.per_relation[1], RelationCounts { label: 2, tp: 1, fp: 1, fn_: 0 });
}

#[test]
fn metrics_edge_cases() {
    assert!(matches!(score(&[], &[], 3), Err(Error::Input(_))));
    assert!(matches!(score(&[1], &[1, 2], 3), Err(Error::Input(_))));
    assert!(matches!(score(&[3], &[1], 3), Err(Error::Input(_))));
    let all_bg = score(&[0, 0], &[0, 0], 3).unwrap();
    assert_eq!((all_bg.accuracy, all_bg.micro_f1), (1.0, 0.0));
    let silent = score(&[1, 2], &[0, 0], 3).unwrap();
    assert_eq!((silent.precision, silent.recall, silent.micro_f1), (0.0, 0.0, 0.0));
    assert_eq!(silent.fn_, 2);
}

/// Brute-force oracle: full confusion matrix, then micro scores from it.
fn confusion_oracle(gold: &[usize], pred: &[usize], n: usize) -> (f64, f64, f64, f64) {
    let mut cm = vec![vec![0usize; n]; n];
    for (&g, &p) in gold.iter().zip(pred) {
        cm[g][p] += 1;
    }
    let diag: usize = (0..n).map(|i| cm[i][i]).sum();
    let tp: usize = (1..n).map(|i| cm[i][i]).sum();
    let pred_pos: usize = (0..n).flat_map(|g| (1..n).map(move |p| (g, p))).map(|(g, p)| cm[g][p]).sum();
    let gold_pos: usize = (1..n).flat_map(|g| (0..n).map(move |p| (g, p))).map(|(g, p)| cm[g][p]).sum();
    let p = if pred_pos == 0 { 0.0 } else { tp as f64 / pred_pos as f64 };
    let r = if gold_pos == 0 { 0.0 } else { tp as f64 / gold_pos as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (diag as f64 / gold.len() as f64, p, r, f)
}

#[test]
fn metrics_match_confusion_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for round in 0..20 {
        let n_labels = rng.gen_range(2..10);
        let len = if round == 0 { 10_000 } else { rng.gen_range(1..500) };
        let gold: Vec<usize> = (0..len).map(|_| rng.gen_range(0..n_labels)).collect();
        let pred: Vec<usize> = gold.iter().map(|&g| if rng.gen_bool(0.4) { g } else { rng.gen_range(0..n_labels) }).collect();
        let m = score(&gold, &pred, n_labels).unwrap();
        let (a, p, r, f) = confusion_oracle(&gold, &pred, n_labels);
        for (x, y) in [(m.accuracy, a), (m.precision, p), (m.recall, r), (m.micro_f1, f)] {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn train_config_validation() {
    let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "batch_size"));
    let bad = TrainConfig { adam_beta2: 1.0, ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "adam_beta2"));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = tiny_data(20, 1);
    let model = tiny_model(3);
    let cfg = TrainConfig { learning_rate: 0.0, n_epochs: 2, batch_size: 8, ..TrainConfig::default() };
    let out = train(model.clone(), &data, &data, &cfg).unwrap();
    assert_eq!(out.model.params(), model.params());
    assert_eq!(out.history.len(), 2);
}

#[test]
fn training_memorizes_a_small_set_and_is_deterministic() {
    let data = tiny_data(24, 5);
    let cfg = TrainConfig { learning_rate: 3e-3, n_epochs: 60, batch_size: 8, seed: 9, ..TrainConfig::default() };
    let a = train(tiny_model(1), &data, &data, &cfg).unwrap();
    let m = evaluate(&a.model, &data).unwrap();
    assert_eq!(m.accuracy, 1.0, "history tail {:?}", a.history.last());
    assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);

    let b = train(tiny_model(1), &data, &data, &cfg).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.history, b.history);
    assert_eq!(checkpoint_to_string(&a.model).unwrap(), checkpoint_to_string(&b.model).unwrap());
}

#[test]
fn best_dev_epoch_is_kept() {
    let data = tiny_data(40, 6);
    let dev = tiny_data(30, 7);
    let cfg = TrainConfig { learning_rate: 3e-3, n_epochs: 8, batch_size: 8, ..TrainConfig::default() };
    let out = train(tiny_model(2), &data, &dev, &cfg).unwrap();
    let best = out.history.iter().map(|h| h.dev.micro_f1).fold(f64::NEG_INFINITY, f64::max);
    let first = out.history.iter().position(|h| h.dev.micro_f1 == best).unwrap();
    assert_eq!(out.best_epoch, first);
    assert_eq!(evaluate(&out.model, &dev).unwrap(), out.history[first].dev);
}

#[test]
fn non_finite_loss_is_a_training_error() {
    let data = tiny_data(10, 1);
    let mut model = tiny_model(1);
    model.params_mut()[0].tensor.values_mut().iter_mut().for_each(|v| *v = f64::NAN);
    let cfg = TrainConfig { n_epochs: 1, batch_size: 4, ..TrainConfig::default() };
    match train(model, &data, &data, &cfg) {
        Err(Error::Training { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected training error, got {:?}", other.map(|o| o.best_epoch)),
    }
}

#[test]
fn evaluate_rejects_empty_data() {
    assert!(matches!(evaluate(&tiny_model(0), &Dataset::new(vec![])), Err(Error::Input(_))));
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let mut model = tiny_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in model.params_mut() {
        p.tensor.values_mut().iter_mut().for_each(|v| *v += rng.gen_range(-1.0..1.0) * 1e-3);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, model);
    let again = dir.path().join("again.json");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let data = tiny_data(5, 3);
    let inputs = inputs_of(&data);
    assert_eq!(model.logits(&inputs).unwrap(), loaded.logits(&inputs).unwrap());
}

#[test]
fn checkpoint_layout() {
    let text = checkpoint_to_string(&tiny_model(0)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["config", "format_version", "params"]);
    assert_eq!(v["format_version"], 1);
    let p0 = &v["params"][0];
    assert_eq!(p0["name"], "embed.token");
    assert_eq!(p0["shape"], serde_json::json!([48, 16]));
    // 17 significant digits: d.dddddddddddddddde±x
    let raw = text.split("\"values\":[").nth(1).unwrap();
    let first = raw.split(',').next().unwrap();
    let mantissa = first.trim_start_matches('-').split('e').next().unwrap();
    assert_eq!(mantissa.replace('.', "").len(), 17, "{}", first);
}

#[test]
fn checkpoint_validation_names_fields() {
    let model = tiny_model(0);
    let text = checkpoint_to_string(&model).unwrap();

    let other = EncoderConfig { n_relations: 5, ..model.config().clone() };
    match checkpoint_from_str_expecting(&text, &other) {
        Err(Error::Format { field, .. }) => assert_eq!(field, "config.n_relations"),
        r => panic!("{:?}", r.map(|_| ())),
    }
    assert!(checkpoint_from_str_expecting(&text, model.config()).is_ok());

    // config claims 5 labels but the classifier was trained with 9
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["config"]["n_relations"] = 5.into();
    match checkpoint_from_str(&v.to_string()) {
        Err(Error::Format { field, .. }) => assert_eq!(field, "config.n_relations"),
        r => panic!("{:?}", r.map(|_| ())),
    }

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["format_version"] = 7.into();
    assert!(matches!(checkpoint_from_str(&v.to_string()), Err(Error::Format { field, .. }) if field == "format_version"));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["params"][0]["values"].as_array_mut().unwrap().pop();
    assert!(matches!(checkpoint_from_str(&v.to_string()), Err(Error::Format { field, .. }) if field == "params.embed.token"));

    assert!(matches!(checkpoint_from_str("{\"format_version\":1}"), Err(Error::Format { .. })));
}
