use aru_core::data::{generate_synthetic, stack_records, ImageRecord, SyntheticConfig};
use aru_core::nn::{
    accuracy, build_model, persist, predict, sgd_train, ModelState, TrainConfig, Trainable,
};

fn first_200() -> (Vec<ImageRecord>, usize, [usize; 3]) {
    let cfg = SyntheticConfig {
        num_identities: 40,
        images_per_identity: 10,
        class_strength: 0.15,
        ..SyntheticConfig::default()
    };
    let b = generate_synthetic(&cfg).unwrap();
    let data: Vec<ImageRecord> = b.train.iter().take(200).cloned().collect();
    assert_eq!(data.len(), 200);
    (data, b.num_classes, b.image_shape)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::original()
    }
}

#[test]
fn ten_epochs_fit_two_hundred_samples() {
    let (data, k, shape) = first_200();
    let model = build_model(k, shape, 0).unwrap();
    let (trained, logs) = sgd_train(&model, &data, &TrainConfig::original(), &Trainable::All).unwrap();
    assert_eq!(logs.len(), 10);
    let acc = accuracy(&trained, &data).unwrap();
    assert!(acc >= 0.9, "train accuracy {acc}");
}

#[test]
fn zero_epochs_and_frozen_layers_leave_model_unchanged() {
    let (data, k, shape) = first_200();
    let model = build_model(k, shape, 1).unwrap();
    let (same, logs) = sgd_train(&model, &data, &quick(0), &Trainable::All).unwrap();
    assert_eq!(same, model);
    assert!(logs.is_empty());
    let (frozen, _) = sgd_train(&model, &data, &quick(2), &Trainable::None).unwrap();
    assert_eq!(frozen.checksum(), model.checksum());
}

#[test]
fn last_k_leaves_earlier_layers_bit_identical() {
    let (data, k, shape) = first_200();
    let model = build_model(k, shape, 2).unwrap();
    let (m, _) = sgd_train(&model, &data, &quick(1), &Trainable::LastK(2)).unwrap();
    let n = model.layers.len();
    for i in 0..n {
        let same = m.layers[i] == model.layers[i];
        assert_eq!(same, i < n - 2, "layer {i}");
    }
}

#[test]
fn training_is_reproducible() {
    let (data, k, shape) = first_200();
    let model = build_model(k, shape, 3).unwrap();
    let cfg = quick(2).with_seed(5);
    let (a, la) = sgd_train(&model, &data, &cfg, &Trainable::All).unwrap();
    let (b, lb) = sgd_train(&model, &data, &cfg, &Trainable::All).unwrap();
    assert_eq!(persist::to_bytes(&a), persist::to_bytes(&b));
    assert_eq!(la, lb);
    let (c, _) = sgd_train(&model, &data, &cfg.clone().with_seed(6), &Trainable::All).unwrap();
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn init_seed_changes_parameters() {
    let a = build_model(2, [3, 32, 32], 1).unwrap();
    let b = build_model(2, [3, 32, 32], 2).unwrap();
    assert_ne!(a.checksum(), b.checksum());
    assert_eq!(a.checksum(), build_model(2, [3, 32, 32], 1).unwrap().checksum());
    let logits = aru_core::nn::forward(&build_model(8, [3, 32, 32], 0).unwrap(), &aru_core::Tensor::zeros(&[2, 3, 32, 32])).unwrap();
    assert_eq!(logits.shape(), &[2, 8]);
}

#[test]
fn accuracy_counts_matches_by_hand() {
    let (data, k, shape) = first_200();
    let model = build_model(k, shape, 4).unwrap();
    let five: Vec<ImageRecord> = data[..5].to_vec();
    let (x, _) = stack_records(&five).unwrap();
    let pred = predict(&model, &x).unwrap();
    // Relabel so exactly samples 0, 2 and 3 are correct.
    let relabeled: Vec<ImageRecord> = five
        .iter()
        .enumerate()
        .map(|(i, r)| ImageRecord {
            label: if [0, 2, 3].contains(&i) { pred[i] } else { (pred[i] + 1) % k },
            ..r.clone()
        })
        .collect();
    assert_eq!(accuracy(&model, &relabeled).unwrap(), 3.0 / 5.0);
}

#[test]
fn model_file_round_trip() {
    let model: ModelState = build_model(4, [3, 16, 16], 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    persist::save(&model, &path).unwrap();
    assert_eq!(persist::load(&path).unwrap(), model);
}
