use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use aru_core::data::{
    batch_iterator, export_directory, generate_synthetic, load_directory_dataset, write_png, Split,
    SyntheticConfig,
};
use aru_core::nn::{accuracy, build_model, sgd_train, TrainConfig, Trainable};
use aru_core::{Error, Tensor};

struct Row<'a> {
    file: String,
    label: usize,
    identity: u64,
    split: &'a str,
}

fn write_dataset(root: &Path, rows: &[Row], shape: [usize; 3]) {
    let images = root.join("images");
    fs::create_dir_all(&images).unwrap();
    let mut csv = String::from("filename,label,identity,split\n");
    for (i, r) in rows.iter().enumerate() {
        let px = (0..shape.iter().product::<usize>()).map(|j| ((i * 31 + j * 7) % 256) as f32 / 255.0).collect();
        let path = images.join(&r.file);
        if !path.exists() {
            write_png(&Tensor::new(shape.to_vec(), px).unwrap(), &path).unwrap();
        }
        writeln!(csv, "{},{},{},{}", r.file, r.label, r.identity, r.split).unwrap();
    }
    fs::write(root.join("labels.csv"), csv).unwrap();
}

fn twelve_rows() -> Vec<Row<'static>> {
    let spec: [(u64, &str, usize); 12] = [
        (1, "train_forget", 0),
        (1, "train_forget", 0),
        (2, "train_forget", 1),
        (3, "train_retain", 0),
        (3, "train_retain", 0),
        (4, "train_retain", 1),
        (5, "train_retain", 2),
        (6, "test", 2),
        (7, "test", 1),
        (8, "unseen", 0),
        (9, "unseen", 1),
        (9, "unseen", 1),
    ];
    spec.iter()
        .enumerate()
        .map(|(i, &(identity, split, label))| Row {
            file: format!("img_{i:02}.png"),
            label,
            identity,
            split,
        })
        .collect()
}

#[test]
fn twelve_row_csv_loads_with_matching_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &twelve_rows(), [3, 4, 4]);
    let b = load_directory_dataset(dir.path(), None).unwrap();
    assert_eq!(
        (b.train.len(), b.forget.len(), b.retain.len(), b.test.len(), b.unseen.len()),
        (7, 3, 4, 2, 3)
    );
    assert_eq!(b.num_classes, 3);
    assert_eq!(b.image_shape, [3, 4, 4]);
    assert!(b.train.iter().flat_map(|r| r.image.data()).all(|v| (0.0..=1.0).contains(v)));
    b.validate().unwrap();
}

fn expect_row_error(rows: &[Row], row: usize) {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), rows, [1, 4, 4]);
    match load_directory_dataset(dir.path(), None) {
        Err(Error::Ingestion { row: Some(r), .. }) => assert_eq!(r, row),
        other => panic!("expected ingestion error at row {row}, got {other:?}"),
    }
}

#[test]
fn identity_shared_by_forget_and_unseen_is_rejected() {
    let mut rows = twelve_rows();
    rows[10].identity = 1;
    expect_row_error(&rows, 11);
}

#[test]
fn identity_shared_by_forget_and_retain_is_rejected() {
    let mut rows = twelve_rows();
    rows[4].identity = 2;
    expect_row_error(&rows, 5);
}

#[test]
fn unknown_split_is_rejected() {
    let mut rows = twelve_rows();
    rows[6].split = "validation";
    expect_row_error(&rows, 7);
}

#[test]
fn missing_image_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &twelve_rows(), [1, 4, 4]);
    fs::remove_file(dir.path().join("images/img_03.png")).unwrap();
    assert!(matches!(
        load_directory_dataset(dir.path(), None),
        Err(Error::Ingestion { row: Some(4), .. })
    ));
}

#[test]
fn test_image_reused_in_train_is_rejected() {
    let mut rows = twelve_rows();
    rows[7].file = rows[0].file.clone();
    expect_row_error(&rows, 8);
}

#[test]
fn benchmark_sized_manifest_reproduces_split_counts() {
    // 10,025 train = 1,500 forget + 8,525 retain; 1,539 test; 1,504 unseen.
    let mut rows = Vec::new();
    let mut add = |n: usize, split: &'static str, id_base: u64, per_id: usize| {
        for i in 0..n {
            rows.push(Row {
                file: format!("{split}_{i:05}.png"),
                label: i % 8,
                identity: id_base + (i / per_id) as u64,
                split,
            });
        }
    };
    add(1_500, "train_forget", 0, 10);
    add(8_525, "train_retain", 10_000, 10);
    add(1_539, "test", 20_000, 10);
    add(1_504, "unseen", 30_000, 10);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &rows, [1, 2, 2]);
    let b = load_directory_dataset(dir.path(), None).unwrap();
    assert_eq!(b.train.len(), 10_025);
    assert_eq!(b.forget.len(), 1_500);
    assert_eq!(b.retain.len(), 8_525);
    assert_eq!(b.test.len(), 1_539);
    assert_eq!(b.unseen.len(), 1_504);
    assert_eq!(b.num_classes, 8);
}

#[test]
fn synthetic_export_round_trips_through_directory_loader() {
    let cfg = SyntheticConfig {
        num_identities: 10,
        images_per_identity: 2,
        ..SyntheticConfig::default()
    };
    let b = generate_synthetic(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_directory(&b, dir.path()).unwrap();
    let back = load_directory_dataset(dir.path(), None).unwrap();
    for s in [Split::Forget, Split::Retain, Split::Test, Split::Unseen] {
        assert_eq!(back.split(s).len(), b.split(s).len());
        assert_eq!(back.identities(s), b.identities(s));
        for (x, y) in back.split(s).iter().zip(b.split(s)) {
            // PNG stores 8 bits per channel.
            assert!(x.image.data().iter().zip(y.image.data()).all(|(p, q)| (p - q).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }
}

#[test]
fn batches_cover_input_once() {
    let b = generate_synthetic(&SyntheticConfig {
        num_identities: 10,
        images_per_identity: 1,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let recs = &b.train[..6];
    let sizes: Vec<usize> = batch_iterator(recs, 4, Some(1)).unwrap().map(|x| x.labels.len()).collect();
    assert_eq!(sizes, vec![4, 2]);
    let mut seen: Vec<usize> = batch_iterator(recs, 4, Some(1)).unwrap().flat_map(|x| x.indices).collect();
    seen.sort();
    assert_eq!(seen, (0..6).collect::<Vec<_>>());
    assert!(batch_iterator(&b.train[..0], 4, None).is_err());
}

#[test]
fn retain_only_classifier_generalises_to_test_identities() {
    let b = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let model = build_model(b.num_classes, b.image_shape, 0).unwrap();
    let (m, _) = sgd_train(&model, &b.retain, &TrainConfig::original(), &Trainable::All).unwrap();
    let acc = accuracy(&m, &b.test).unwrap();
    assert!(acc >= 0.7, "test accuracy {acc}");
}
