mod common;

use inpformer::checkpoint::Checkpoint;
use inpformer::config::Mode;
use inpformer::evaluate::{evaluate, evaluate_checkpoint, EvalOptions, MapSource};
use inpformer::model::Encoded;
use inpformer::train::{train, Trainer, TrainingSet};

use common::{tiny_config, tiny_index};

#[test]
fn identical_seeded_runs_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let idx = tiny_index(dir.path());
    let cfg = tiny_config(200);
    let ex = cfg.extractor.build().unwrap();
    let a = train(&cfg, &idx, ex.as_ref(), |_| {}).unwrap();
    let b = train(&cfg, &idx, ex.as_ref(), |_| {}).unwrap();
    assert_eq!(a.checksum, b.checksum);
    assert_eq!(a.to_json(), b.to_json());
    let c = train(&inpformer::config::RunConfig { seed: 1, ..cfg }, &idx, ex.as_ref(), |_| {}).unwrap();
    assert_ne!(a.checksum, c.checksum);
}

#[test]
fn stop_gradient_residual_learning_leaves_normal_model_as_without_it() {
    let dir = tempfile::tempdir().unwrap();
    let idx = tiny_index(dir.path());
    let on = tiny_config(20);
    let mut off = on.clone();
    off.residual.enabled = false;
    let ex = on.extractor.build().unwrap();
    let a = train(&on, &idx, ex.as_ref(), |_| {}).unwrap().model().unwrap();
    let b = train(&off, &idx, ex.as_ref(), |_| {}).unwrap().model().unwrap();
    assert_eq!(a.store.checksum_of(&a.normal_ids()), b.store.checksum_of(&b.normal_ids()));
    assert_ne!(a.store.checksum_of(&a.head_ids()), b.store.checksum_of(&b.head_ids()));

    let mut free = on.clone();
    free.residual.stop_gradient = false;
    let c = train(&free, &idx, ex.as_ref(), |_| {}).unwrap().model().unwrap();
    assert_ne!(a.store.checksum_of(&a.normal_ids()), c.store.checksum_of(&c.normal_ids()));
}

#[test]
fn save_and_load_preserve_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let idx = tiny_index(&dir.path().join("data"));
    let cfg = tiny_config(10);
    let ex = cfg.extractor.build().unwrap();
    let ck = train(&cfg, &idx, ex.as_ref(), |_| {}).unwrap();
    let before = evaluate_checkpoint(&ck, &idx, &EvalOptions::default()).unwrap().flat();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let after = evaluate_checkpoint(&loaded, &idx, &EvalOptions::default()).unwrap().flat();
    assert_eq!(before.keys().collect::<Vec<_>>(), after.keys().collect::<Vec<_>>());
    for (k, v) in &before {
        assert!((v - after[k]).abs() <= 1e-12, "{k}: {v} vs {}", after[k]);
    }
}

#[test]
fn normal_pattern_loss_descends() {
    let dir = tempfile::tempdir().unwrap();
    let idx = tiny_index(dir.path());
    let mut cfg = tiny_config(120);
    cfg.residual.enabled = false;
    let ex = cfg.extractor.build().unwrap();
    let ck = train(&cfg, &idx, ex.as_ref(), |_| {}).unwrap();
    let npm: Vec<f64> = ck.losses.iter().filter_map(|r| r.npm).collect();
    let head = npm[..10].iter().sum::<f64>() / 10.0;
    let tail = npm[npm.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn dice_descends_on_a_fixed_batch() {
    let dir = tempfile::tempdir().unwrap();
    let idx = tiny_index(dir.path());
    let mut cfg = tiny_config(50);
    cfg.optimizer.lr = 5e-3;
    let ex = cfg.extractor.build().unwrap();
    let set = TrainingSet::build(&cfg, &idx).unwrap();
    let mut t = Trainer::new(&cfg, set, ex.as_ref()).unwrap();
    let batch = t.seg_batch().unwrap();
    let losses: Vec<f64> = (0..50).map(|s| t.seg_update(s, &batch).unwrap()).collect();
    assert!(losses[49] < losses[0] - 0.05, "{} -> {}", losses[0], losses[49]);
}

#[test]
fn one_category_multi_class_equals_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let idx = tiny_index(dir.path());
    let multi = tiny_config(5);
    let single = inpformer::config::RunConfig { mode: Mode::SingleClass, ..multi.clone() };
    let ex = multi.extractor.build().unwrap();
    let a = train(&multi, &idx, ex.as_ref(), |_| {}).unwrap();
    let b = train(&single, &idx, ex.as_ref(), |_| {}).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.losses, b.losses);
}

#[test]
fn evaluation_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let idx = tiny_index(dir.path());
    let cfg = tiny_config(3);
    let ex = cfg.extractor.build().unwrap();
    let ck = train(&cfg, &idx, ex.as_ref(), |_| {}).unwrap();
    let model = ck.model().unwrap();
    let src = MapSource::Detector { use_head: true };
    let a = evaluate(&model, ex.as_ref(), &cfg, &idx, src, &EvalOptions::default()).unwrap();
    let b = evaluate(&model, ex.as_ref(), &cfg, &idx, src, &EvalOptions::default()).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    for (k, v) in a.flat() {
        if !["images", "anomalous_images", "pixels"].iter().any(|s| k.ends_with(s)) {
            assert!((0.0..=1.0).contains(&v), "{k} = {v}");
        }
    }
}

#[test]
fn zero_shot_map_shape_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let idx = tiny_index(dir.path());
    let cfg = tiny_config(30);
    let ex = cfg.extractor.build().unwrap();
    let model = train(&cfg, &idx, ex.as_ref(), |_| {}).unwrap().model().unwrap();
    let good = idx.categories[0].test.iter().find(|s| !s.is_anomalous()).unwrap();
    let img = good.load_image(cfg.resize, cfg.crop).unwrap();
    let enc = Encoded::from_stack(&ex.extract(&img).unwrap(), &cfg.groups).unwrap();
    let (a, sa) = model.zero_shot(&enc, (cfg.crop, cfg.crop), cfg.coherence).unwrap();
    let (b, sb) = model.zero_shot(&enc, (cfg.crop, cfg.crop), cfg.coherence).unwrap();
    assert_eq!((a.height(), a.width()), (cfg.crop, cfg.crop));
    assert_eq!(a.values(), b.values());
    assert_eq!(sa, sb);
    assert!(a.values().iter().all(|v| v.is_finite() && *v >= -1e-12));
}
