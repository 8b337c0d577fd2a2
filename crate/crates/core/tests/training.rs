use flowgraph_core::eval::{build_graphs, class_indices};
use flowgraph_core::graph::FlowGraph;
use flowgraph_core::model::train::{train, TrainConfig};
use flowgraph_core::synth::structural_flows;
use flowgraph_core::{Exec, FeatureSet, GraphSat, ModelConfig};

fn dataset(per_class: usize) -> (Vec<FlowGraph>, Vec<usize>) {
    let flows = structural_flows(per_class, 20, 42).unwrap();
    let (_, labels) = class_indices(&flows).unwrap();
    (build_graphs(&flows, &FeatureSet::all(), Exec::Parallel).unwrap(), labels)
}

fn small() -> ModelConfig {
    let mut cfg = ModelConfig::new(39, 3);
    cfg.hidden = 16;
    cfg
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (graphs, labels) = dataset(10);
    let tc = TrainConfig { learning_rate: 0.0, epochs: 3, batch_size: 8, ..Default::default() };
    let (model, log) = train::<f64>(&graphs, &labels, small(), &tc).unwrap();
    let fresh = GraphSat::<f64>::new(small(), flowgraph_core::seed::derive_seed(tc.seed, &[0])).unwrap();
    assert_eq!(model.params, fresh.params);
    assert_eq!(log.epochs.len(), 3);
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let (graphs, labels) = dataset(10);
    let run = |exec| {
        let tc = TrainConfig { epochs: 4, batch_size: 7, seed: 9, exec, ..Default::default() };
        train::<f64>(&graphs, &labels, small(), &tc).unwrap()
    };
    let (a, la) = run(Exec::Sequential);
    let (b, lb) = run(Exec::Parallel);
    let (c, _) = run(Exec::Parallel);
    assert_eq!(a.params, b.params);
    assert_eq!(b.params, c.params);
    assert_eq!(la, lb);
}

#[test]
fn loss_decreases_over_first_epochs() {
    let (graphs, labels) = dataset(200);
    let tc = TrainConfig { epochs: 6, ..Default::default() };
    let (_, log) = train::<f64>(&graphs, &labels, ModelConfig::new(39, 3), &tc).unwrap();
    let losses: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn single_class_is_rejected() {
    let (graphs, _) = dataset(2);
    let labels = vec![0; graphs.len()];
    let err = train::<f64>(&graphs, &labels, small(), &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, flowgraph_core::Error::Config(_)));
}

#[test]
fn single_precision_trains() {
    let (graphs, labels) = dataset(10);
    let tc = TrainConfig { epochs: 2, batch_size: 8, ..Default::default() };
    let (model, _) = train::<f32>(&graphs, &labels, small(), &tc).unwrap();
    let p = model.predict_proba(&graphs[0]).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
}
