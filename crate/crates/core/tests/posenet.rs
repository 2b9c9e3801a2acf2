use tactile_pose::dataset::{collect, CollectSpec, Dataset, Split};
use tactile_pose::nn::{Activation, LayerSpec, Shape};
use tactile_pose::posenet::{
    build, evaluate, feature_size, fit, layer_specs, report_from_predictions, search_space, FitOptions, Hyperparams,
    PoseNetError, BATCH_CHOICES, FILTER_CHOICES,
};
use tactile_pose::sim::{SimConfig, Simulator};
use tactile_pose::tpe::{sample_uniform, trial_rng};
use tactile_pose::{ObjectType, Pose, SurfacePose};

fn tiny() -> Hyperparams {
    Hyperparams {
        n_conv: 2,
        n_filters: 4,
        n_dense: 1,
        n_units: 16,
        activation: Activation::Relu,
        dropout: 0.0,
        l1: 1e-4,
        l2: 1e-4,
        batch_size: 16,
        use_batchnorm: false,
    }
}

fn small_data(object: ObjectType, n: usize, split: Split) -> Dataset {
    let sim = Simulator::new(SimConfig::small()).unwrap();
    collect(&CollectSpec::standard(object, n, split.seed(5), split), &sim, 1).unwrap()
}

fn quick_opts(epochs: usize) -> FitOptions {
    FitOptions {
        learning_rate: 1e-3,
        max_epochs: epochs,
        patience_epochs: epochs,
        ..FitOptions::default()
    }
}

#[test]
fn feature_ladder_at_128() {
    let ladder: Vec<usize> = (1..=5).map(|k| feature_size(128, k).unwrap()).collect();
    assert_eq!(ladder, vec![63, 30, 14, 6, 2]);
    assert_eq!(feature_size(128, 6), None);
}

#[test]
fn six_conv_blocks_are_infeasible() {
    let mut hp = tiny();
    hp.n_conv = 6;
    assert!(matches!(
        build(&hp, 3, 128, 0),
        Err(PoseNetError::Hyperparam { name: "n_conv", .. }) | Err(PoseNetError::Infeasible { .. })
    ));
    // Even if the range check were relaxed, the shape chain rejects it.
    let mut shape = Shape::new(1, 128, 128);
    let mut failed = false;
    for spec in layer_specs(&hp, 3) {
        match spec.output_shape(shape) {
            Ok(s) => shape = s,
            Err(_) => {
                failed = true;
                break;
            }
        }
    }
    assert!(failed);
}

#[test]
fn whole_grid_is_shape_feasible_at_128() {
    for n_conv in 1..=5 {
        for &n_filters in &FILTER_CHOICES {
            for n_dense in 1..=5 {
                for &n_units in &FILTER_CHOICES {
                    for use_batchnorm in [false, true] {
                        let hp = Hyperparams {
                            n_conv,
                            n_filters,
                            n_dense,
                            n_units,
                            use_batchnorm,
                            ..tiny()
                        };
                        let mut shape = Shape::new(1, 128, 128);
                        for spec in layer_specs(&hp, 5) {
                            shape = spec.output_shape(shape).unwrap();
                        }
                        assert_eq!(shape, Shape::new(5, 1, 1));
                    }
                }
            }
        }
    }
}

#[test]
fn published_surface_architecture() {
    let model = build(&Hyperparams::published_surface(), 3, 128, 1).unwrap();
    let specs = model.specs();
    let convs = specs.iter().filter(|s| matches!(s, LayerSpec::Conv3x3 { filters: 512 })).count();
    let pools = specs.iter().filter(|s| matches!(s, LayerSpec::MaxPool2x2)).count();
    let dense: Vec<_> = specs.iter().filter(|s| matches!(s, LayerSpec::Dense { .. })).collect();
    assert_eq!((convs, pools), (5, 5));
    assert_eq!(dense, vec![&LayerSpec::Dense { units: 16 }]);
    assert_eq!(specs.last(), Some(&LayerSpec::LinearOutput { units: 3 }));
    assert_eq!(model.output_len(), 3);
}

#[test]
fn parameter_count_matches_hand_count() {
    let hp = Hyperparams {
        n_conv: 1,
        n_filters: 8,
        n_units: 4,
        ..tiny()
    };
    let model = build(&hp, 5, 128, 0).unwrap();
    let expected = 8 * (9 + 1) + 4 * (63 * 63 * 8 + 1) + 5 * (4 + 1);
    assert_eq!(model.n_params(), expected);
}

#[test]
fn hyperparameter_ranges_are_enforced() {
    let cases: Vec<(&str, Hyperparams)> = vec![
        ("n_conv", Hyperparams { n_conv: 0, ..tiny() }),
        ("n_filters", Hyperparams { n_filters: 3, ..tiny() }),
        ("n_dense", Hyperparams { n_dense: 6, ..tiny() }),
        ("n_units", Hyperparams { n_units: 1024, ..tiny() }),
        ("dropout", Hyperparams { dropout: 0.6, ..tiny() }),
        ("l1", Hyperparams { l1: 0.0, ..tiny() }),
        ("l2", Hyperparams { l2: 0.2, ..tiny() }),
        ("batch_size", Hyperparams { batch_size: 256, ..tiny() }),
    ];
    for (field, hp) in cases {
        match hp.validate() {
            Err(PoseNetError::Hyperparam { name, .. }) => assert_eq!(name, field),
            other => panic!("{field}: {other:?}"),
        }
    }
    assert_eq!(BATCH_CHOICES, [16, 32, 64, 128]);
    Hyperparams::published_surface().validate().unwrap();
    Hyperparams::published_edge().validate().unwrap();
}

#[test]
fn search_points_round_trip() {
    let space = search_space();
    for i in 0..200 {
        let point = sample_uniform(&space, &mut trial_rng(3, i as usize));
        let hp = Hyperparams::from_point(&point).unwrap();
        assert_eq!(hp.to_point(), point);
    }
    for hp in [Hyperparams::published_surface(), Hyperparams::published_edge()] {
        assert_eq!(Hyperparams::from_point(&hp.to_point()).unwrap(), hp);
    }
}

#[test]
fn constant_labels_are_learned() {
    let mut train = small_data(ObjectType::Surface, 64, Split::Train);
    let mut val = small_data(ObjectType::Surface, 32, Split::Validation);
    let label = Pose::Surface(SurfacePose {
        depth: -3.0,
        roll: 6.0,
        pitch: -4.5,
    });
    for s in train.samples.iter_mut().chain(val.samples.iter_mut()) {
        s.label = label;
    }
    let opts = FitOptions {
        learning_rate: 1e-2,
        ..quick_opts(60)
    };
    let out = fit(&tiny(), &train, &val, &opts).unwrap();
    assert!(out.val_loss < 1e-3, "val loss {}", out.val_loss);
}

#[test]
fn fit_is_deterministic() {
    let train = small_data(ObjectType::Edge, 48, Split::Train);
    let val = small_data(ObjectType::Edge, 16, Split::Validation);
    let a = fit(&tiny(), &train, &val, &quick_opts(3)).unwrap();
    let b = fit(&tiny(), &train, &val, &quick_opts(3)).unwrap();
    assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
    assert_eq!(a.history.val_loss, b.history.val_loss);
}

#[test]
fn mismatched_object_types_are_rejected() {
    let train = small_data(ObjectType::Edge, 16, Split::Train);
    let val = small_data(ObjectType::Surface, 16, Split::Validation);
    assert!(matches!(
        fit(&tiny(), &train, &val, &quick_opts(1)),
        Err(PoseNetError::ObjectMismatch { .. })
    ));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let train = small_data(ObjectType::Surface, 32, Split::Train);
    let val = small_data(ObjectType::Surface, 16, Split::Validation);
    let net = fit(&tiny(), &train, &val, &quick_opts(2)).unwrap().net;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    net.save(&path).unwrap();
    let back = tactile_pose::posenet::PoseNet::load(&path).unwrap();
    assert_eq!(back.hyperparams, net.hyperparams);
    assert_eq!(back.scaler, net.scaler);
    let a = evaluate(&net, &val).unwrap();
    let b = evaluate(&back, &val).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluation_report_shape_and_exports() {
    let train = small_data(ObjectType::Edge, 32, Split::Train);
    let test = small_data(ObjectType::Edge, 150, Split::Test);
    let net = fit(&tiny(), &train, &test, &quick_opts(1)).unwrap().net;
    let report = evaluate(&net, &test).unwrap();
    assert_eq!(report.n_samples, 150);
    assert_eq!(report.window, 100);
    assert_eq!(report.components.len(), 5);
    for c in &report.components {
        assert!(c.mae >= 0.0);
        assert_eq!(c.smoothed.len(), 150);
        assert!(c.sorted_labels.windows(2).all(|w| w[0] <= w[1]));
    }
    let dir = tempfile::tempdir().unwrap();
    report.write_csv(&dir.path().join("eval.csv")).unwrap();
    report.write_json(&dir.path().join("eval.json")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 151);
    assert!(csv.starts_with("id,x_label,x_pred,x_abs_err,depth_label"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["smoothing_window"], 100);
    assert_eq!(json["units"]["yaw"], "deg");

    let short = small_data(ObjectType::Edge, 40, Split::Test);
    assert_eq!(evaluate(&net, &short).unwrap().window, 40);
}

#[test]
fn mae_examples() {
    let labels = vec![vec![-1.0, 2.0, 0.0], vec![-2.5, -4.0, 3.0], vec![-4.0, 0.5, -1.0]];
    let exact = report_from_predictions(ObjectType::Surface, vec![0, 1, 2], labels.clone(), labels.clone()).unwrap();
    assert_eq!(exact.mae(), vec![0.0, 0.0, 0.0]);

    let shifted: Vec<Vec<f64>> = labels.iter().map(|l| vec![l[0], l[1] + 1.0, l[2]]).collect();
    let r = report_from_predictions(ObjectType::Surface, vec![0, 1, 2], labels, shifted).unwrap();
    assert_eq!(r.mae(), vec![0.0, 1.0, 0.0]);

    // Five samples: depth errors 0.5, 0.25, 0, 1, 0.25 average to 0.4;
    // roll errors 1, 2, 3, 4, 5 average to 3; pitch errors all 0.75.
    let labels: Vec<Vec<f64>> = (0..5).map(|i| vec![-1.0 - i as f64 * 0.5, 0.0, 1.0]).collect();
    let d = [0.5, -0.25, 0.0, 1.0, -0.25];
    let preds: Vec<Vec<f64>> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| vec![l[0] + d[i], l[1] - (i + 1) as f64, l[2] + 0.75])
        .collect();
    let r = report_from_predictions(ObjectType::Surface, (0..5).collect(), labels, preds).unwrap();
    assert_eq!(r.mae(), vec![0.4, 3.0, 0.75]);
    assert!(matches!(
        report_from_predictions(ObjectType::Surface, vec![], vec![], vec![]),
        Err(PoseNetError::EmptyTestSet)
    ));
}
