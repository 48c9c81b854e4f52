use fedic::calibration::{CalibrationTrainConfig, Toggles};
use fedic::data::{dirichlet_partition, GaussianClusters, LabeledDataset, PartitionSpec};
use fedic::eval::FedicStage;
use fedic::fed::{
    fedavg_aggregate, local_train, run_round, select_clients, ClientState, FederationState, RoundConfig, ServerStage,
};
use fedic::nn::{cross_entropy_gradients, Architecture, MlpModel, ParamSet};
use fedic::{Mlp, Tensor};

fn arch() -> Architecture {
    Architecture {
        input_dim: 6,
        hidden: vec![8],
        feature_dim: 5,
        class_count: 4,
    }
}

fn cfg(k: usize, ratio: f64, seed: u64) -> RoundConfig {
    RoundConfig {
        total_rounds: 10,
        client_count: k,
        active_ratio: ratio,
        local_epochs: 1,
        batch_size: 8,
        local_lr: 0.1,
        seed,
    }
}

fn toy_clients(k: usize, seed: u64) -> Vec<LabeledDataset> {
    let pool = GaussianClusters::draw(4, 6, seed).unwrap().sample(30, 0.8, seed).unwrap();
    dirichlet_partition(&pool, &PartitionSpec { client_count: k, alpha: 0.5, seed }).unwrap().clients
}

#[test]
fn single_sample_single_step_matches_hand_update() {
    let global = Mlp::init(&arch(), 5).unwrap();
    let x = Tensor::matrix(1, 6, vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4]).unwrap();
    let client = ClientState {
        id: 0,
        dataset: LabeledDataset::new(x.clone(), vec![2], 4).unwrap(),
    };
    let c = RoundConfig {
        batch_size: 1,
        ..cfg(1, 1.0, 9)
    };
    let update = local_train(&global, &client, &c, 0).unwrap();
    let (_, grads) = cross_entropy_gradients(&global, &x, &[2]).unwrap();
    let mut expected = global.clone();
    for (p, g) in expected.param_slices_mut().into_iter().zip(grads.param_slices()) {
        for (a, b) in p.iter_mut().zip(g) {
            *a -= 0.1 * b;
        }
    }
    for (a, b) in update.model.param_slices().iter().zip(expected.param_slices()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
    assert_ne!(update.model, global);
}

#[test]
fn empty_client_is_a_no_op() {
    let global = Mlp::init(&arch(), 5).unwrap();
    let client = ClientState {
        id: 3,
        dataset: LabeledDataset::empty(6, 4),
    };
    let u = local_train(&global, &client, &cfg(4, 1.0, 1), 0).unwrap();
    assert!(u.no_op);
    assert_eq!(u.model, global);
}

#[test]
fn aggregating_copies_is_exact() {
    let m = Mlp::init(&arch(), 2).unwrap();
    let agg = fedavg_aggregate(&[&m, &m, &m], &[7, 1, 13]).unwrap();
    assert_eq!(agg, m);
}

#[test]
fn aggregation_rejects_bad_inputs() {
    let m = Mlp::init(&arch(), 2).unwrap();
    assert!(fedavg_aggregate(&[&m, &m], &[0, 0]).is_err());
    assert!(fedavg_aggregate(&[&m], &[1, 2]).is_err());
    let other = Mlp::init(&Architecture { hidden: vec![3], ..arch() }, 2).unwrap();
    assert!(fedavg_aggregate(&[&m, &other], &[1, 1]).is_err());
}

#[test]
fn selection_is_deterministic_and_sized() {
    let c = cfg(20, 0.4, 77);
    for r in 0..5 {
        let s = select_clients(r, &c);
        assert_eq!(s.len(), 8);
        assert_eq!(s, select_clients(r, &c));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
    assert_ne!(select_clients(0, &c), select_clients(1, &c));
}

fn run(rounds: usize, seed: u64, mut stage: Option<&mut dyn ServerStage<f32>>) -> Vec<MlpModel<f32>> {
    let c = cfg(6, 0.5, seed);
    let mut state = FederationState::new(Mlp::init(&arch(), seed).unwrap(), toy_clients(6, seed));
    let mut out = Vec::new();
    for _ in 0..rounds {
        let r = run_round(&mut state, &c, stage.as_mut().map(|s| &mut **s as &mut dyn ServerStage<f32>)).unwrap();
        out.push(r.global);
    }
    out
}

#[test]
fn rounds_are_reproducible() {
    assert_eq!(run(3, 4, None), run(3, 4, None));
    assert_ne!(run(3, 4, None), run(3, 5, None));
}

#[test]
fn disabled_server_stage_reproduces_fedavg() {
    let seed = 11;
    let pool = GaussianClusters::draw(4, 6, 99).unwrap().sample(8, 0.8, 99).unwrap();
    let ulb = fedic::data::make_unlabeled(&pool);
    let mut stage = FedicStage::new(&pool, &ulb, &CalibrationTrainConfig::default(), Toggles::NONE, None, seed);
    let with_stage = run(4, seed, Some(&mut stage));
    assert_eq!(with_stage, run(4, seed, None));
    assert!(stage.last_teacher.is_some());
}
