use std::collections::HashSet;

use super::*;
use crate::data::{gen_shape, ShapeClass, SyntheticSpec};
use crate::geometry::{Augmentation, PointCloud};
use crate::model::ModelConfig;

fn tiny() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        enc_depth: 1,
        reg_depth: 1,
        dec_depth: 1,
        patch_count: 8,
        neighbors: 8,
        mask_ratio: 0.5,
        head_hidden: 16,
        ..ModelConfig::desk()
    }
}

fn two_class(per_class: usize) -> (Dataset, Dataset) {
    SyntheticSpec {
        classes: vec![ShapeClass::Sphere, ShapeClass::Plane],
        train_per_class: per_class,
        test_per_class: 4,
        n_points: 64,
        ..SyntheticSpec::default()
    }
    .generate(3)
    .unwrap()
}

fn features_of(state: &ModelState, cloud: &PointCloud, spec: &TopologySpec, seeds: FeatureSeeds) -> Tensor {
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, Binder::new(&state.params, BindMode::Constant), &state.layout, &state.config);
    let v = backbone_features(&mut f, cloud, spec, seeds).unwrap();
    tape.value(v).clone()
}

#[test]
fn feature_widths_per_topology() {
    let state = ModelState::new(tiny(), 1).unwrap();
    let cloud = gen_shape(ShapeClass::Cube, 64, 0.0, 1).unwrap();
    let seeds = FeatureSeeds::new(0, 0);
    for t in Topology::ALL {
        let spec = TopologySpec::new(t);
        assert_eq!(features_of(&state, &cloud, &spec, seeds).shape(), [1, spec.feature_dim(16)]);
    }
    let add = TopologySpec { combine: Some(Combine::Add), ..TopologySpec::new(Topology::D) };
    assert_eq!(features_of(&state, &cloud, &add, seeds).shape(), [1, 32]);
    let zero = TopologySpec { queries: Some(0), ..TopologySpec::new(Topology::B) };
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, Binder::new(&state.params, BindMode::Constant), &state.layout, &state.config);
    assert!(backbone_features(&mut f, &cloud, &zero, seeds).is_err());
    let zero_a = TopologySpec { queries: Some(0), ..TopologySpec::new(Topology::A) };
    assert!(backbone_features(&mut f, &cloud, &zero_a, seeds).is_ok());
}

#[test]
fn topology_d_add_sums_the_pooled_streams() {
    let state = ModelState::new(tiny(), 2).unwrap();
    let cloud = gen_shape(ShapeClass::Torus, 64, 0.01, 2).unwrap();
    let seeds = FeatureSeeds::new(5, 1);
    let a = features_of(&state, &cloud, &TopologySpec::new(Topology::A), seeds);
    let b = features_of(&state, &cloud, &TopologySpec::new(Topology::B), seeds);
    let cat = features_of(&state, &cloud, &TopologySpec::new(Topology::D), seeds);
    let add = features_of(&state, &cloud, &TopologySpec { combine: Some(Combine::Add), ..TopologySpec::new(Topology::D) }, seeds);
    assert_eq!(cat.data(), [a.data(), b.data()].concat().as_slice());
    for i in 0..32 {
        assert!((add.data()[i] - (a.data()[i] + b.data()[i])).abs() < 1e-12);
    }
}

#[test]
fn topology_c_ignores_point_order() {
    let state = ModelState::new(tiny(), 3).unwrap();
    let cloud = gen_shape(ShapeClass::Cone, 64, 0.01, 3).unwrap();
    let spec = TopologySpec::new(Topology::C);
    let seeds = FeatureSeeds::new(1, 1);
    let base = features_of(&state, &cloud, &spec, seeds);
    // reverse every point except the two sampling start indices, so both
    // farthest-point passes begin at the same point
    let fixed = [
        crate::geometry::farthest_point_sample(&cloud, 1, seeds.patch).unwrap()[0],
        crate::geometry::farthest_point_sample(&cloud, 1, seeds.query).unwrap()[0],
    ];
    let movable: Vec<usize> = (0..64).filter(|i| !fixed.contains(i)).collect();
    let mut perm: Vec<usize> = (0..64).collect();
    for (slot, src) in movable.iter().zip(movable.iter().rev()) {
        perm[*slot] = *src;
    }
    let pts = perm.iter().map(|&i| cloud.points()[i]).collect();
    let permuted = PointCloud::new(pts).unwrap();
    assert!(features_of(&state, &permuted, &spec, seeds).max_abs_diff(&base) < 1e-10);
}

#[test]
fn topology_b_with_coincident_queries() {
    // every point equal: all queries share one position, so every prediction
    // row is identical and max equals mean
    let state = ModelState::new(tiny(), 4).unwrap();
    let mut pts = gen_shape(ShapeClass::Sphere, 64, 0.0, 4).unwrap().points().to_vec();
    for p in pts.iter_mut().skip(8) {
        *p = [0.5, 0.5, 0.5];
    }
    let cloud = PointCloud::new(pts).unwrap();
    let spec = TopologySpec { queries: Some(1), ..TopologySpec::new(Topology::B) };
    let f = features_of(&state, &cloud, &spec, FeatureSeeds::new(0, 0));
    let (max, mean) = f.data().split_at(16);
    for (a, b) in max.iter().zip(mean) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn linear_probe_leaves_backbone_untouched() {
    let (train, test) = two_class(4);
    let state = ModelState::new(tiny(), 5).unwrap();
    let before = state.backbone_checksum();
    let cfg = FinetuneConfig { protocol: Protocol::Linear, epochs: 3, batch_size: 4, ..FinetuneConfig::default() };
    let mut t = Finetuner::new(state, cfg, 2, 0, train.len()).unwrap();
    let history = t.run(&train, &test).unwrap();
    assert_eq!(history.len(), 3);
    assert_eq!(history.iter().map(|h| h.epoch).collect::<Vec<_>>(), [1, 2, 3]);
    assert_eq!(t.state.backbone_checksum(), before);
}

#[test]
fn full_finetune_fits_two_classes() {
    let (train, _) = two_class(8);
    let state = ModelState::new(ModelConfig::desk(), 6).unwrap();
    let before = state.backbone_checksum();
    let cfg = FinetuneConfig {
        protocol: Protocol::Full,
        epochs: 50,
        batch_size: 8,
        augmentation: Augmentation::None,
        ..FinetuneConfig::default()
    };
    let mut t = Finetuner::new(state, cfg, 2, 0, train.len()).unwrap();
    let history = t.run(&train, &train).unwrap();
    assert_ne!(t.state.backbone_checksum(), before);
    assert!(history.iter().any(|h| h.test_acc == 1.0), "{history:?}");
    assert_eq!(history.last().unwrap().test_acc, 1.0);
}

#[test]
fn finetune_contracts() {
    let (train, _) = two_class(2);
    let state = ModelState::new(tiny(), 7).unwrap();
    let bad = FinetuneConfig { batch_size: 1, ..FinetuneConfig::default() };
    assert!(Finetuner::new(state.clone(), bad, 2, 0, 4).is_err());
    let mut t = Finetuner::new(state, FinetuneConfig::default(), 3, 0, 4).unwrap();
    assert!(t.train_epoch(&train).is_err());
    assert_eq!(batches(&[0, 1, 2, 3, 4], 2), vec![vec![0, 1], vec![2, 3, 4]]);
    assert_eq!(batches(&[0], 2), vec![vec![0]]);
}

#[test]
fn learning_rate_defaults() {
    assert_eq!(FinetuneConfig::default().learning_rate(), 5e-4);
    assert_eq!(FinetuneConfig { protocol: Protocol::Mlp3, ..FinetuneConfig::default() }.learning_rate(), 1e-2);
}

#[test]
fn episodes_are_disjoint_and_deterministic() {
    let labels: Vec<usize> = (0..400).map(|i| i % 10).collect();
    let ep = few_shot_episode(&labels, 5, 10, 20, 9).unwrap();
    assert_eq!(ep.support.len(), 50);
    assert_eq!(ep.query.len(), 100);
    assert_eq!(ep.classes.iter().collect::<HashSet<_>>().len(), 5);
    let s: HashSet<usize> = ep.support.iter().map(|p| p.0).collect();
    let q: HashSet<usize> = ep.query.iter().map(|p| p.0).collect();
    assert!(s.is_disjoint(&q));
    for &(i, l) in ep.support.iter().chain(&ep.query) {
        assert_eq!(labels[i], ep.classes[l]);
    }
    assert_eq!(ep, few_shot_episode(&labels, 5, 10, 20, 9).unwrap());
    assert_ne!(ep, few_shot_episode(&labels, 5, 10, 20, 10).unwrap());
    assert!(few_shot_episode(&labels, 11, 1, 1, 0).is_err());
    assert!(few_shot_episode(&labels, 5, 30, 20, 0).is_err());
}

#[test]
fn few_shot_harness_reports_statistics() {
    let (train, _) = SyntheticSpec { train_per_class: 4, n_points: 64, ..SyntheticSpec::default() }.generate(1).unwrap();
    let state = ModelState::new(tiny(), 8).unwrap();
    let cfg = FinetuneConfig {
        protocol: Protocol::Linear,
        topology: TopologySpec::new(Topology::D),
        epochs: 2,
        batch_size: 4,
        ..FinetuneConfig::default()
    };
    let s = few_shot(&state, &train, &cfg, 2, 2, 2, 3, 0).unwrap();
    assert_eq!(s.accuracies.len(), 3);
    assert!(s.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
    assert!(s.std >= 0.0 && (0.0..=1.0).contains(&s.mean));
}

#[test]
fn results_csv_has_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    let row = ResultRow {
        run_id: "r".into(),
        protocol: "FULL".into(),
        topology: "b".into(),
        seed: 1,
        epoch: 2,
        train_acc: 0.5,
        test_acc: 0.25,
    };
    write_csv(&p, &[row], &RESULT_HEADER).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text, "run_id,protocol,topology,seed,epoch,train_acc,test_acc\nr,FULL,b,1,2,0.5,0.25\n");
}
