use std::collections::BTreeMap;
use std::sync::Arc;

use ucfed_autograd::{DType, Dense};
use ucfed_core::container::{Container, DecodeErrorKind, CONTAINER_VERSION};
use ucfed_core::exam::Exam;
use ucfed_core::fed::adamw::OptimError;
use ucfed_core::fed::aggregate::AggregateError;
use ucfed_core::fed::checkpoint::{checkpoint_path, latest_checkpoint, CheckpointError};
use ucfed_core::fed::train::{batch_gradients, exam_gradients};
use ucfed_core::fed::*;
use ucfed_core::rng::stream;
use ucfed_core::synth::{synth_exam_with_grade, synth_split, DataLoader, SiteProfile};
use ucfed_core::ucnet::{ModelParams, UCNetConfig, REGION_WEIGHT};

fn small_config(seed: u64) -> UCNetConfig {
    UCNetConfig {
        base_channels: 2,
        levels: 2,
        seed,
        ..UCNetConfig::default()
    }
}

fn small_profile(lesion_site: bool) -> SiteProfile {
    let mut p = if lesion_site { SiteProfile::ucsf_like() } else { SiteProfile::ucla_like() };
    p.extent = [8, 8, 4];
    p
}

fn exams(n: usize, seed: u64) -> Vec<Exam> {
    synth_split(&small_profile(true), "train", n, seed).unwrap()
}

fn scalar_schema() -> Schema {
    Schema {
        dtype: DType::F64,
        shapes: BTreeMap::from([("w".to_string(), vec![1])]),
    }
}

fn scalar(kind: SharableKind, round: u32, count: u32, v: f64) -> Sharable {
    Sharable::from_dense(kind, round, count, &BTreeMap::from([("w".to_string(), Dense::from_vec(vec![1], vec![v]))]))
}

fn value(s: &Sharable) -> f64 {
    s.to_dense::<f64>().unwrap()["w"].data()[0]
}

#[test]
fn gradients_exclude_frozen_and_are_sorted() {
    let model = ModelParams::<f64>::build(small_config(1)).unwrap();
    let batch = exams(2, 1);
    let (s, out) = local_train_step(&model, &batch, &TrainConfig::default(), 4).unwrap();
    assert_eq!(s.kind, SharableKind::Gradients);
    assert_eq!((s.round, s.sample_count), (4, 2));
    assert!(!s.tensors.contains_key(REGION_WEIGHT));
    let names: Vec<&String> = s.tensors.keys().collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    assert_eq!(names.len(), model.trainable_names().len());
    // The packaged values are the backward output, untouched.
    let dense = s.to_dense::<f64>().unwrap();
    for (name, g) in &out.grads {
        assert_eq!(dense[name].data(), g.data(), "{name}");
    }
}

#[test]
fn nan_or_missing_gradient_is_refused() {
    let model = ModelParams::<f64>::build(small_config(1)).unwrap();
    let mut grads: BTreeMap<String, Dense<f64>> = model
        .trainable()
        .map(|(n, d)| (n.clone(), Dense::zeros(d.shape().to_vec())))
        .collect();
    let first = grads.keys().next().unwrap().clone();
    grads.get_mut(&first).unwrap().data_mut()[0] = f64::NAN;
    assert!(extract_gradients(&model, &grads, 1, 0).is_err());
    grads.remove(&first);
    assert!(extract_gradients(&model, &grads, 1, 0).is_err());
}

#[test]
fn contribution_validation_reasons() {
    let model = ModelParams::<f64>::build(small_config(2)).unwrap();
    let schema = Schema::of(&model);
    let batch = exams(1, 2);
    let (good, _) = local_train_step(&model, &batch, &TrainConfig::default(), 5).unwrap();
    let check = |s: &Sharable| validate_contribution(s, &schema, SharableKind::Gradients, 5).map_err(|r| r.code());
    assert_eq!(check(&good), Ok(()));

    let mut extra = good.clone();
    extra.tensors.insert("zz.extra".into(), good.tensors.values().next().unwrap().clone());
    assert_eq!(check(&extra), Err("unknown-parameter"));

    let mut missing = good.clone();
    missing.tensors.pop_first();
    assert_eq!(check(&missing), Err("missing-parameter"));

    assert_eq!(check(&Sharable { round: 4, ..good.clone() }), Err("stale-round"));
    assert_eq!(check(&Sharable { round: 6, ..good.clone() }), Err("future-round"));
    assert_eq!(check(&Sharable { sample_count: 0, ..good.clone() }), Err("zero-samples"));
    assert_eq!(check(&Sharable { kind: SharableKind::Weights, ..good.clone() }), Err("wrong-kind"));

    let mut dense = good.to_dense::<f64>().unwrap();
    let name = dense.keys().next().unwrap().clone();
    dense.get_mut(&name).unwrap().data_mut()[0] = f64::INFINITY;
    let bad = Sharable::from_dense(SharableKind::Gradients, 5, 1, &dense);
    assert_eq!(check(&bad), Err("non-finite"));

    let mut reshaped = good.to_dense::<f64>().unwrap();
    let d = reshaped.remove(&name).unwrap();
    reshaped.insert(name.clone(), Dense::from_vec(vec![1, d.len()], d.data().to_vec()));
    let bad = Sharable::from_dense(SharableKind::Gradients, 5, 1, &reshaped);
    assert_eq!(check(&bad), Err("shape-mismatch"));

    let f32_version = Sharable::from_dense(SharableKind::Gradients, 5, 1, &good_as_f32(&good));
    assert_eq!(check(&f32_version), Err("dtype-mismatch"));
}

fn good_as_f32(s: &Sharable) -> BTreeMap<String, Dense<f32>> {
    s.to_dense::<f64>()
        .unwrap()
        .into_iter()
        .map(|(n, d)| (n, Dense::from_vec(d.shape().to_vec(), d.data().iter().map(|&x| x as f32).collect())))
        .collect()
}

#[test]
fn fedsgd_weighted_means() {
    let schema = scalar_schema();
    let g = BufferGauge::new();
    let grads = SharableKind::Gradients;
    let run = |items: Vec<Sharable>| aggregate_fedsgd::<f64>(items, &schema, 0, &g).unwrap().0;
    assert_eq!(value(&run(vec![scalar(grads, 0, 2, 1.0), scalar(grads, 0, 2, 3.0)])), 2.0);
    // Oracle: (1·0 + 3·4) / 4.
    let weighted = run(vec![scalar(grads, 0, 1, 0.0), scalar(grads, 0, 3, 4.0)]);
    assert_eq!(value(&weighted), (1.0 * 0.0 + 3.0 * 4.0) / 4.0);
    assert_eq!(weighted.sample_count, 4);
    let x = 0.123_456_789_f64;
    assert_eq!(value(&run(vec![scalar(grads, 0, 7, x)])).to_bits(), x.to_bits());
}

#[test]
fn fedavg_weighted_means() {
    let schema = scalar_schema();
    let g = BufferGauge::new();
    let w = SharableKind::Weights;
    let run = |items: Vec<Sharable>| value(&aggregate_fedavg::<f64>(items, &schema, 3, &g).unwrap().0);
    assert_eq!(run(vec![scalar(w, 3, 5, 0.7), scalar(w, 3, 2, 0.7), scalar(w, 3, 9, 0.7)]), 0.7);
    assert_eq!(run(vec![scalar(w, 3, 1, 0.0), scalar(w, 3, 1, 2.0)]), 1.0);
    assert_eq!(run(vec![scalar(w, 3, 3, 0.0), scalar(w, 3, 1, 4.0)]), (3.0 * 0.0 + 1.0 * 4.0) / 4.0);
    // Gradients are the wrong kind for weight averaging.
    let (_, rejected) =
        aggregate_fedavg::<f64>(vec![scalar(w, 3, 1, 1.0), scalar(SharableKind::Gradients, 3, 1, 9.0)], &schema, 3, &g)
            .unwrap();
    assert_eq!(rejected.len(), 1);
}

#[test]
fn empty_barrier_is_a_round_failure() {
    let schema = scalar_schema();
    let g = BufferGauge::new();
    let stale = scalar(SharableKind::Gradients, 1, 1, 1.0);
    let err = aggregate_fedsgd::<f64>(vec![stale], &schema, 2, &g).unwrap_err();
    assert!(matches!(err, AggregateError::NoContributions { round: 2 }));
}

#[test]
fn aggregation_buffers_do_not_grow_with_clients() {
    let schema = scalar_schema();
    let peak = |clients: u32| {
        let g = BufferGauge::new();
        let items = (0..clients).map(|i| scalar(SharableKind::Gradients, 0, i + 1, i as f64));
        aggregate_fedsgd::<f64>(items, &schema, 0, &g).unwrap();
        assert_eq!(g.current(), 0);
        g.peak()
    };
    assert_eq!(peak(2), 2);
    assert_eq!(peak(16), 2);
}

fn filled(model: &ModelParams<f64>, v: f64) -> BTreeMap<String, Dense<f64>> {
    model
        .trainable()
        .map(|(n, d)| (n.clone(), Dense::from_vec(d.shape().to_vec(), vec![v; d.len()])))
        .collect()
}

fn model_filled(v: f64) -> ModelParams<f64> {
    let m = ModelParams::<f64>::build(small_config(3)).unwrap();
    ModelParams::from_trainable(*m.config(), filled(&m, v)).unwrap()
}

#[test]
fn adamw_first_step_closed_form() {
    let hyper = AdamWHyper {
        weight_decay: 0.0,
        ..AdamWHyper::default()
    };
    let mut model = model_filled(1.0);
    let mut state = OptimizerState::new(&model, hyper);
    let g = filled(&model, 1.0);
    adamw_step(&mut model, &g, &mut state).unwrap();
    // m̂ = g and v̂ = g² after one step.
    let expected = 1.0 - 0.0015 * (1.0 / (1.0 + 1e-8));
    for (_, d) in model.trainable() {
        assert!(d.data().iter().all(|&x| x == expected));
    }
    assert!((expected - 0.9985).abs() < 1e-8);
    assert_eq!(state.step, 1);
}

#[test]
fn adamw_zero_gradient_and_pure_decay() {
    let mut model = model_filled(0.8);
    let no_decay = AdamWHyper {
        weight_decay: 0.0,
        ..AdamWHyper::default()
    };
    let mut state = OptimizerState::new(&model, no_decay);
    let g = filled(&model, 0.0);
    adamw_step(&mut model, &g, &mut state).unwrap();
    assert_eq!(model, model_filled(0.8));

    let mut state = OptimizerState::new(&model, AdamWHyper::default());
    let g = filled(&model, 0.0);
    adamw_step(&mut model, &g, &mut state).unwrap();
    let expected = 0.8 * (1.0 - 0.0015 * 0.01);
    for (_, d) in model.trainable() {
        assert!(d.data().iter().all(|&x| x == expected));
    }
}

#[test]
fn adamw_non_finite_update_changes_nothing() {
    let mut model = model_filled(0.5);
    let mut state = OptimizerState::new(&model, AdamWHyper::default());
    let g = filled(&model, 0.3);
    adamw_step(&mut model, &g, &mut state).unwrap();
    let (model_before, state_before) = (model.clone(), state.clone());
    let mut grads = filled(&model, 0.1);
    let last = grads.keys().last().unwrap().clone();
    grads.get_mut(&last).unwrap().data_mut()[0] = f64::NAN;
    assert!(matches!(adamw_step(&mut model, &grads, &mut state), Err(OptimError::NonFinite(_))));
    assert_eq!(model, model_before);
    assert_eq!(state, state_before);
}

fn trained_state(rounds: u32) -> ServerState<f64> {
    let mut server = ServerState::new(ModelParams::<f64>::build(small_config(4)).unwrap(), AdamWHyper::default(), Aggregation::FedSgd);
    let batch = exams(2, 4);
    for _ in 0..rounds {
        let (s, _) = local_train_step(&server.model, &batch, &TrainConfig::default(), server.round).unwrap();
        server.run_round([s]).unwrap();
    }
    server
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let server = trained_state(2);
    let path = server.maybe_persist(dir.path(), 1, false).unwrap().unwrap();
    assert_eq!(path, checkpoint_path(dir.path(), 2));
    let rec = load_checkpoint::<f64>(&path).unwrap();
    let orig = server.checkpoint();
    assert_eq!(rec.round, 2);
    assert_eq!(rec.optimizer.step, 2);
    for (name, d) in orig.model.tensors() {
        let bits: Vec<u64> = d.data().iter().map(|x| x.to_bits()).collect();
        let back: Vec<u64> = rec.model.get(name).unwrap().data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, back, "{name}");
    }
    assert_eq!(rec.optimizer, orig.optimizer);
    assert_eq!(latest_checkpoint(dir.path()).map(|(r, _)| r), Some(2));
}

#[test]
fn corrupt_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.fltc");
    persist_checkpoint(&trained_state(1).checkpoint(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    match load_checkpoint::<f64>(&path) {
        Err(CheckpointError::Decode { source, .. }) => {
            assert!(matches!(source.kind, DecodeErrorKind::Truncated { .. }));
            assert!(source.offset > 0);
        }
        other => panic!("expected truncation error, got {other:?}"),
    }

    let mut bumped = bytes.clone();
    bumped[4..6].copy_from_slice(&(CONTAINER_VERSION + 1).to_le_bytes());
    std::fs::write(&path, &bumped).unwrap();
    match load_checkpoint::<f64>(&path) {
        Err(CheckpointError::Decode { source, .. }) => {
            assert!(matches!(source.kind, DecodeErrorKind::VersionMismatch { .. }))
        }
        other => panic!("expected version mismatch, got {other:?}"),
    }

    let mut c = Container::decode(&bytes).unwrap();
    c.tensors.remove("opt.step");
    std::fs::write(&path, c.encode()).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path), Err(CheckpointError::Entry { .. })));
}

#[test]
fn resumed_server_continues_identical_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let batch = exams(3, 9);
    let step = |server: &mut ServerState<f64>| {
        let (s, _) = local_train_step(&server.model, &batch, &TrainConfig::default(), server.round).unwrap();
        server.run_round([s]).unwrap();
    };
    let mut straight = trained_state(0);
    for _ in 0..2 {
        step(&mut straight);
    }
    let path = straight.maybe_persist(dir.path(), 0, true).unwrap().unwrap();
    let mut resumed = ServerState::from_checkpoint(load_checkpoint(&path).unwrap(), Aggregation::FedSgd);
    for _ in 0..3 {
        step(&mut straight);
        step(&mut resumed);
    }
    assert_eq!(resumed.round, 5);
    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.optimizer, straight.optimizer);
}

#[test]
fn duplicate_exam_gives_the_single_exam_gradient() {
    let model = ModelParams::<f64>::build(small_config(5)).unwrap();
    let exam = exams(1, 5).remove(0);
    let once = batch_gradients(&model, std::slice::from_ref(&exam), &TrainConfig::default()).unwrap();
    let twice = batch_gradients(&model, &[exam.clone(), exam.clone()], &TrainConfig::default()).unwrap();
    assert_eq!(once.grads, twice.grads);
    let (direct, _) = exam_gradients(&model, &exam, &TrainConfig::default()).unwrap();
    assert_eq!(once.grads, direct);
}

#[test]
fn zero_init_benign_batch_is_finite() {
    let mut model = ModelParams::<f64>::build(small_config(6)).unwrap();
    model.zero_heads();
    let profile = small_profile(true);
    let batch: Vec<Exam> = (0..3)
        .map(|i| synth_exam_with_grade(&profile, 0, &mut stream(6, &[i])))
        .collect();
    let (s, out) = local_train_step(&model, &batch, &TrainConfig::default(), 0).unwrap();
    assert!(out.breakdown.total.is_finite());
    assert!(s.to_dense::<f64>().unwrap().values().all(|d| d.all_finite()));
}

#[test]
fn shard_aggregate_matches_pooled_batch() {
    let model = ModelParams::<f64>::build(small_config(7)).unwrap();
    let batch = exams(12, 7);
    let cfg = TrainConfig::default();
    let pooled = batch_gradients(&model, &batch, &cfg).unwrap();
    assert_eq!(pooled.exams_used, 12);
    let shards = [&batch[0..6], &batch[6..10], &batch[10..12]];
    let contributions = shards.iter().map(|b| local_train_step(&model, b, &cfg, 0).unwrap().0);
    let (agg, rejected) = aggregate_fedsgd::<f64>(contributions, &Schema::of(&model), 0, &BufferGauge::new()).unwrap();
    assert!(rejected.is_empty());
    let agg = agg.to_dense::<f64>().unwrap();
    let mut worst = 0.0f64;
    for (name, p) in &pooled.grads {
        for (a, b) in agg[name].data().iter().zip(p.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-10, "max abs difference {worst:e}");
}

#[test]
fn single_client_round_equals_local_step() {
    let model = ModelParams::<f64>::build(small_config(8)).unwrap();
    let batch = exams(3, 8);
    let cfg = TrainConfig::default();

    let mut local = model.clone();
    let mut state = OptimizerState::new(&local, AdamWHyper::default());
    let out = batch_gradients(&local, &batch, &cfg).unwrap();
    adamw_step(&mut local, &out.grads, &mut state).unwrap();

    let mut server = ServerState::new(model, AdamWHyper::default(), Aggregation::FedSgd);
    let (s, _) = local_train_step(&server.model, &batch, &cfg, 0).unwrap();
    let s = Sharable::from_container(Container::decode(&s.encode()).unwrap()).unwrap();
    assert_eq!(server.run_round([s]).unwrap(), 1);
    for (name, d) in local.tensors() {
        let a: Vec<u64> = d.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = server.model.get(name).unwrap().data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b, "{name}");
    }
    assert_eq!(server.optimizer, state);
}

#[test]
fn rejected_client_leaves_trajectory_unchanged() {
    let base = ModelParams::<f64>::build(small_config(9)).unwrap();
    let shards = [exams(2, 10), exams(3, 11)];
    let cfg = TrainConfig::default();
    let mut clean = ServerState::new(base.clone(), AdamWHyper::default(), Aggregation::FedSgd);
    let mut noisy = ServerState::new(base, AdamWHyper::default(), Aggregation::FedSgd);
    for _ in 0..3 {
        let honest = |server: &ServerState<f64>| -> Vec<Sharable> {
            shards
                .iter()
                .map(|b| local_train_step(&server.model, b, &cfg, server.round).unwrap().0)
                .collect()
        };
        let mut poisoned = honest(&noisy);
        let mut nan = poisoned[0].to_dense::<f64>().unwrap();
        nan.values_mut().for_each(|d| d.data_mut()[0] = f64::NAN);
        poisoned.insert(1, Sharable::from_dense(SharableKind::Gradients, noisy.round, 50, &nan));
        assert_eq!(noisy.run_round(poisoned).unwrap(), 2);
        clean.run_round(honest(&clean)).unwrap();
        assert_eq!(clean.model, noisy.model);
    }
    assert_eq!(clean.optimizer, noisy.optimizer);
}

#[test]
fn fedavg_site_runs_local_epochs() {
    let train = Arc::new(exams(4, 12));
    let val = Arc::new(exams(2, 13));
    let cfg = SiteConfig {
        client_id: 1,
        model: small_config(10),
        train: TrainConfig::default(),
        aggregation: Aggregation::FedAvg,
        local_epochs: 2,
        local_hyper: AdamWHyper::default(),
        validate_every: 0,
        private_dir: None,
    };
    let mut site = SiteTrainer::<f64>::new(cfg, DataLoader::new(train, 2, false, 1), val).unwrap();
    let model = ModelParams::<f64>::build(small_config(10)).unwrap();
    let mut server = ServerState::new(model.clone(), AdamWHyper::default(), Aggregation::FedAvg);
    let result = site.handle_task(&server.task()).unwrap();
    assert_eq!(result.kind, SharableKind::Weights);
    // Two epochs over four exams in batches of two.
    assert_eq!(result.sample_count, 8);
    server.run_round([result.clone()]).unwrap();
    assert_eq!(server.model.get("head.seg.weight"), Some(&result.to_dense::<f64>().unwrap()["head.seg.weight"]));
    assert_ne!(server.model, model);
}

fn entry(round: u32, acc: f64) -> ValidationLogEntry {
    ValidationLogEntry {
        round,
        client_id: 0,
        metrics: BTreeMap::from([("accuracy".to_string(), acc), ("total".to_string(), 1.0 - acc)]),
    }
}

#[test]
fn checkpoint_selection_examples() {
    let log = [entry(10, 0.5), entry(20, 0.7), entry(30, 0.6)];
    assert_eq!(select_checkpoint(&log, "accuracy"), Some(20));
    assert_eq!(select_checkpoint(&log, "total"), Some(20));
    let tie = [entry(10, 0.5), entry(20, 0.7), entry(30, 0.6), entry(40, 0.7)];
    assert_eq!(select_checkpoint(&tie, "accuracy"), Some(20));
    let other = [entry(10, 0.9), entry(20, 0.7)];
    assert_eq!(select_checkpoint(&other, "accuracy"), Some(10));
    assert_eq!(select_checkpoint(&[], "accuracy"), None);
}

#[test]
fn validator_writes_private_log_and_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let val = Arc::new(exams(2, 14));
    let mut v = Validator::new(3, val, 2, TrainConfig::default(), Some(dir.path().to_path_buf()));
    let model = ModelParams::<f64>::build(small_config(11)).unwrap();
    assert!(!v.due(0) && !v.due(1) && v.due(2));
    assert!(v.observe(1, &model).unwrap().is_none());
    assert!(v.observe(2, &model).unwrap().is_some());
    v.observe(4, &model).unwrap();
    assert_eq!(v.log().len(), 2);
    assert!(v.log().iter().all(|e| e.client_id == 3));
    assert_eq!(v.selected_round(), Some(2));
    let csv = std::fs::read_to_string(dir.path().join("validation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("candidates").read_dir().unwrap().count() >= 1);
}
