use cascade_unet::augment::AugmentConfig;
use cascade_unet::cascade::{CascadeConfig, CascadeModel};
use cascade_unet::checkpoint;
use cascade_unet::infer::predict_with_checkpoint;
use cascade_unet::phantom::{generate_dataset, generate_phantom, PhantomSpec};
use cascade_unet::preprocess::{preprocess_case, PreprocessParams};
use cascade_unet::train::{train, TrainConfig, TrainOutput};
use cascade_unet::volume::LABEL_VALUES;
use cascade_unet::Error;

fn tiny() -> CascadeConfig {
    CascadeConfig {
        scales: vec![2, 1],
        base_filters: 1,
        levels: 1,
        context_filters: 2,
        ..CascadeConfig::desk()
    }
}

fn params() -> PreprocessParams {
    PreprocessParams {
        target_grid: [8; 3],
        ..Default::default()
    }
}

#[test]
fn training_writes_checkpoints_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<_> = generate_dataset([12, 10, 8], 3, 1)
        .unwrap()
        .iter()
        .map(|p| preprocess_case(&p.case, &params()).unwrap())
        .collect();
    let mut model = CascadeModel::<f32>::new(&tiny(), [8; 3], 2).unwrap();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 2,
        stage_weights: vec![1.0, 1.0],
        ..Default::default()
    };
    let mut augment = AugmentConfig::default();
    augment.bspline_grid = 4;
    augment.bspline_sigma = 0.5;
    let out = TrainOutput {
        dir: dir.path().join("run"),
        preprocess: params(),
    };
    let report = train(&mut model, &cases, &config, &augment, Some(&out)).unwrap();
    assert_eq!(report.epoch_losses.len(), 3);
    assert_eq!(report.iteration_losses.len(), 6);
    let best = report.best_loss.unwrap();
    assert_eq!(best, report.epoch_losses.iter().cloned().fold(f64::INFINITY, f64::min));

    let curve = std::fs::read_to_string(out.loss_curve()).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert!(curve.starts_with("epoch\tloss\n"));

    let last = checkpoint::load(&out.last_checkpoint()).unwrap();
    assert_eq!(last.header.epoch, Some(2));
    for ((_, a), (_, b)) in last.model.store.iter().zip(model.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let best_ck = checkpoint::load(&out.best_checkpoint()).unwrap();
    assert_eq!(best_ck.header.epoch, report.best_epoch);
    assert_eq!(best_ck.header.loss, report.best_loss);

    // prediction comes back on the native grid of the raw case
    let raw = generate_phantom("native", &PhantomSpec::standard([12, 10, 8], 9)).unwrap();
    let labels = predict_with_checkpoint(&last, &raw.case).unwrap();
    assert_eq!(labels.dim(), (12, 10, 8));
    assert!(labels.iter().all(|l| LABEL_VALUES.contains(l)));
}

#[test]
fn empty_dataset_and_bad_weights_are_rejected() {
    let mut model = CascadeModel::<f32>::new(&tiny(), [8; 3], 2).unwrap();
    let config = TrainConfig {
        stage_weights: vec![1.0, 1.0],
        ..Default::default()
    };
    let err = train(&mut model, &[], &config, &AugmentConfig::disabled(), None).unwrap_err();
    assert!(matches!(err, Error::EmptyDataset));

    let case = preprocess_case(&generate_phantom("a", &PhantomSpec::standard([8; 3], 0)).unwrap().case, &params()).unwrap();
    let three = TrainConfig::default();
    let err = train(&mut model, &[case], &three, &AugmentConfig::disabled(), None).unwrap_err();
    assert_eq!(err.category(), "config");
}

#[test]
fn case_on_the_wrong_grid_is_rejected() {
    let mut model = CascadeModel::<f32>::new(&tiny(), [8; 3], 2).unwrap();
    let case = generate_phantom("a", &PhantomSpec::standard([10; 3], 0)).unwrap().case;
    let config = TrainConfig {
        stage_weights: vec![1.0, 1.0],
        epochs: 1,
        ..Default::default()
    };
    let err = train(&mut model, &[case], &config, &AugmentConfig::disabled(), None).unwrap_err();
    assert!(matches!(err, Error::GridMismatch { .. }), "{err}");
}
