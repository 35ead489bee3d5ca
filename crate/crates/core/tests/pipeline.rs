use std::fs;
use std::path::Path;

use mlh_core::dataset::{
    build_from_directory, generate_synthetic, synthetic_mesh, Dataset, Split, SyntheticSpec,
};
use mlh_core::format::{read_checkpoint, read_dataset, write_checkpoint, write_dataset};
use mlh_core::mesh::write_off;
use mlh_core::multiview::{MergeVariant, MultiViewNetwork};
use mlh_core::train::{evaluate, train, TrainConfig};
use mlh_core::Error;

fn small(per_class: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        classes: 4,
        per_class,
        n: 16,
        k: 3,
        seed,
    })
    .unwrap()
}

fn quick_config(variant: MergeVariant, seed: u64) -> TrainConfig {
    let mut config = TrainConfig::new(variant, seed);
    config.width = 4;
    config.hidden = 16;
    config.sgd.epochs = 3;
    config
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = SyntheticSpec {
        classes: 4,
        per_class: 10,
        n: 32,
        k: 5,
        seed: 7,
    };
    let a = generate_synthetic(&spec).unwrap();
    assert_eq!(a.records.len(), 40);
    assert_eq!(a.class_counts(Split::Train), vec![8; 4]);
    assert_eq!(a.class_counts(Split::Test), vec![2; 4]);
    assert_eq!(write_dataset(&a), write_dataset(&generate_synthetic(&spec).unwrap()));
    let other = generate_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
    assert_ne!(write_dataset(&a), write_dataset(&other));
}

#[test]
fn dataset_round_trip() {
    let ds = small(3, 2);
    let bytes = write_dataset(&ds);
    let back = read_dataset(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(write_dataset(&back), bytes);
    assert!(read_dataset(&bytes[..bytes.len() - 1]).is_err());
}

fn write_mesh(path: &Path, class: usize, seed: u64) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, write_off(&synthetic_mesh(class, seed).unwrap())).unwrap();
}

#[test]
fn directory_tree_labels_are_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_mesh(&root.join("chair/train/b.off"), 0, 1);
    write_mesh(&root.join("chair/train/a.off"), 0, 2);
    write_mesh(&root.join("chair/test/c.off"), 0, 3);
    write_mesh(&root.join("airplane/train/x.off"), 3, 4);
    write_mesh(&root.join("airplane/test/y.off"), 3, 5);
    fs::write(root.join("airplane/train/notes.txt"), "ignored").unwrap();

    let ds = build_from_directory(root, 8, 2, 0).unwrap();
    assert_eq!(ds.class_names, vec!["airplane", "chair"]);
    let ids: Vec<_> = ds.records.iter().map(|r| (r.id.as_str(), r.label, r.split)).collect();
    assert_eq!(
        ids,
        vec![
            ("airplane/train/x", 0, Split::Train),
            ("airplane/test/y", 0, Split::Test),
            ("chair/train/a", 1, Split::Train),
            ("chair/train/b", 1, Split::Train),
            ("chair/test/c", 1, Split::Test),
        ]
    );
    let again = build_from_directory(root, 8, 2, 0).unwrap();
    assert_eq!(write_dataset(&ds), write_dataset(&again));
}

#[test]
fn unreadable_mesh_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_mesh(&dir.path().join("cone/train/good.off"), 3, 1);
    fs::write(dir.path().join("cone/train/broken.off"), "OFF\n3 1\n0 0 0\n").unwrap();
    let err = build_from_directory(dir.path(), 8, 2, 0).unwrap_err();
    assert!(err.to_string().contains("broken.off"), "{err}");
}

#[test]
fn class_without_meshes_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_mesh(&dir.path().join("cone/train/good.off"), 3, 1);
    fs::create_dir_all(dir.path().join("empty/train")).unwrap();
    let err = build_from_directory(dir.path(), 8, 2, 0).unwrap_err();
    assert!(matches!(err, Error::EmptyClass(ref name) if name == "empty"), "{err}");
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let ds = small(5, 3);
    let mut config = quick_config(MergeVariant::IndependentConcat, 4);
    config.sgd.learning_rate = 0.0;
    let (report, net) = train(&ds, &config).unwrap();
    let fresh = MultiViewNetwork::<f32>::build(config.network_config(4, 16, 3), config.seed).unwrap();
    for (a, b) in net.params().iter().zip(fresh.params()) {
        assert_eq!(a.value, b.value);
    }
    let first = &report.epochs[0];
    for e in &report.epochs {
        assert_eq!(e.train_loss, first.train_loss);
        assert_eq!(e.train_accuracy, first.train_accuracy);
        assert_eq!(e.test_accuracy, first.test_accuracy);
    }
}

#[test]
fn single_sample_is_memorized() {
    let mut ds = small(1, 5);
    // one training shape, scored on itself
    ds.records.truncate(2);
    ds.records[0].split = Split::Train;
    ds.records[1] = ds.records[0].clone();
    ds.records[1].split = Split::Test;
    let mut config = quick_config(MergeVariant::IndependentConcat, 6);
    config.sgd.epochs = 200;
    config.sgd.batch_size = 1;
    config.sgd.decay_every = 1000;
    let (report, _) = train(&ds, &config).unwrap();
    let last = report.epochs.last().unwrap();
    assert!(last.train_loss < 0.01, "final loss {}", last.train_loss);
    assert_eq!(report.final_test_accuracy, 1.0);
}

#[test]
fn evaluation_reproduces_report() {
    let ds = small(10, 8);
    for variant in MergeVariant::ALL {
        let (report, mut net) = train(&ds, &quick_config(variant, 9)).unwrap();
        let eval = evaluate(&mut net, &ds, Split::Test).unwrap();
        assert_eq!(eval.accuracy, report.final_test_accuracy);
        assert_eq!(eval.confusion, report.confusion);
        assert_eq!(eval.loss, report.epochs.last().unwrap().test_loss);

        let mut restored = read_checkpoint::<f32>(&write_checkpoint(&net)).unwrap();
        let again = evaluate(&mut restored, &ds, Split::Test).unwrap();
        assert_eq!(again, eval);

        let counts = ds.class_counts(Split::Test);
        for (row, &count) in report.confusion.iter().zip(&counts) {
            assert_eq!(row.iter().sum::<usize>(), count);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let ds = small(5, 10);
    let config = quick_config(MergeVariant::SharedMax, 11);
    let (r1, n1) = train(&ds, &config).unwrap();
    let (r2, n2) = train(&ds, &config).unwrap();
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    assert_eq!(write_checkpoint(&n1), write_checkpoint(&n2));
    let (_, n3) = train(&ds, &quick_config(MergeVariant::SharedMax, 12)).unwrap();
    assert_ne!(write_checkpoint(&n1), write_checkpoint(&n3));
}

#[test]
fn untrained_networks_score_near_chance() {
    let ds = small(50, 13);
    let mut total = 0.0;
    for seed in 0..20 {
        let config = quick_config(MergeVariant::IndependentConcat, seed);
        let mut net = MultiViewNetwork::<f32>::build(config.network_config(4, 16, 3), seed).unwrap();
        total += evaluate(&mut net, &ds, Split::Test).unwrap().accuracy;
    }
    let mean = total / 20.0;
    assert!((mean - 0.25).abs() <= 0.15, "mean accuracy {mean}");
}

#[test]
fn invalid_training_setups_are_rejected() {
    let ds = small(2, 14);
    let mut config = quick_config(MergeVariant::IndependentMax, 0);
    config.sgd.batch_size = 0;
    assert!(matches!(train(&ds, &config), Err(Error::ConfigInvalid(_))));

    let mut no_test = ds.clone();
    no_test.records.retain(|r| r.split == Split::Train);
    let config = quick_config(MergeVariant::IndependentMax, 0);
    assert!(matches!(train(&no_test, &config), Err(Error::ConfigInvalid(_))));

    let mut net = MultiViewNetwork::<f32>::build(config.network_config(3, 16, 3), 0).unwrap();
    assert!(matches!(evaluate(&mut net, &ds, Split::Test), Err(Error::ShapeMismatch(_))));
}
