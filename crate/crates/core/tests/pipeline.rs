//! Library-level pipeline checks across modules.

use spacte_core::certify::{certify_dataset, CertifyConfig};
use spacte_core::data::{
    load_dataset, read_cifar10_binary, save_dataset, synthetic_blobs, write_cifar10_binary, Dataset,
};
use spacte_core::losses::Variant;
use spacte_core::metrics::{acr, easy_hard_report, log_prob_gap_samples};
use spacte_core::model::spec::preset_layers;
use spacte_core::model::{ArchitectureSpec, InputNorm, InputShape, MultiHeadNetwork};
use spacte_core::trainer::{train, Checkpoint, TrainConfig, TrainState};

fn blob_config(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::new(0.25, 2);
    c.epochs = 3;
    c.batch_size = 32;
    c.variant = variant;
    c.checkpoint_every = 0;
    c
}

fn blob_net(heads: usize) -> MultiHeadNetwork {
    let spec = ArchitectureSpec::new(
        preset_layers("desk-mlp").unwrap(),
        2,
        heads,
        2,
        InputShape::new(1, 1, 8),
    )
    .unwrap();
    MultiHeadNetwork::build(&spec, InputNorm::identity(1), 1).unwrap()
}

#[test]
fn checkpoint_reload_certifies_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_blobs(8, 0.8, 0.1, 96, 2).unwrap().dataset;
    let cfg = blob_config(Variant::Gaussian);
    let (state, report) = train(
        &cfg,
        &data,
        TrainState::new(blob_net(2), &cfg),
        Some(dir.path()),
        |_| {},
    )
    .unwrap();
    assert_eq!(report.checkpoints.last().unwrap(), &dir.path().join("final.ckpt"));

    let ckpt = Checkpoint::load(dir.path().join("final.ckpt")).unwrap();
    let reloaded = ckpt.network().unwrap();
    assert_eq!(reloaded.state_vector(), state.network.state_vector());

    let test = synthetic_blobs(8, 0.8, 0.1, 10, 9).unwrap().dataset;
    let mut cc = CertifyConfig::new(0.25);
    cc.n = 200;
    let a = certify_dataset(&state.network, &test, &cc, 2).unwrap();
    let b = certify_dataset(&reloaded, &test, &cc, 1).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.prediction, x.radius.to_bits()), (y.prediction, y.radius.to_bits()));
    }
}

#[test]
fn every_variant_trains_to_finite_state() {
    let data = synthetic_blobs(8, 0.8, 0.1, 64, 4).unwrap().dataset;
    for variant in [
        Variant::Gaussian,
        Variant::Consistency { c1: 10.0, c2: 0.5 },
        Variant::SmoothMix {
            c3: 5.0,
            steps: 2,
            step_size: 0.5,
        },
    ] {
        let cfg = blob_config(variant);
        let (state, report) = train(&cfg, &data, TrainState::new(blob_net(3), &cfg), None, |_| {}).unwrap();
        assert_eq!(report.epochs.len(), 3, "{}", variant.name());
        assert!(
            state.network.state_vector().iter().all(|v| v.is_finite()),
            "{}",
            variant.name()
        );
    }
}

#[test]
fn analysis_on_trained_blobs() {
    let train_set = synthetic_blobs(8, 0.8, 0.1, 256, 5).unwrap().dataset;
    let mut cfg = blob_config(Variant::Gaussian);
    cfg.epochs = 6;
    let (state, _) = train(&cfg, &train_set, TrainState::new(blob_net(3), &cfg), None, |_| {}).unwrap();
    let test = synthetic_blobs(8, 0.8, 0.1, 40, 6).unwrap().dataset;
    let mut cc = CertifyConfig::new(0.25);
    cc.n = 300;
    let records = certify_dataset(&state.network, &test, &cc, 2).unwrap();
    assert!(acr(&records).unwrap() > 0.0);

    // Gap sign is per-draw correctness, so most draws of a confident example are positive.
    let gaps = log_prob_gap_samples(&state.network, test.input(0), test.labels[0], 0.25, 200, 0).unwrap();
    assert_eq!(gaps.len(), 200);
    assert!(gaps.iter().filter(|g| **g > 0.0).count() > 100);

    let report = easy_hard_report(&state.network, &test, &records, f64::INFINITY, 0.25, 4, 0).unwrap();
    assert!(report.easy.is_empty());
    assert_eq!(report.hard.count, records.len());
}

#[test]
fn dataset_formats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f64> = (0..2 * 3072).map(|i| (i % 256) as f64 / 255.0).collect();
    let ds = Dataset::new(InputShape::new(3, 32, 32), 10, "tiny", values, vec![3, 7]).unwrap();
    let bin = dir.path().join("tiny.bin");
    write_cifar10_binary(&ds, &bin).unwrap();
    let back = read_cifar10_binary(&bin).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.inputs, ds.inputs);

    let container = dir.path().join("tiny.spct");
    save_dataset(&ds, &container).unwrap();
    assert_eq!(load_dataset(&container).unwrap().inputs, ds.inputs);
}
