use fedic::calibration::{client_weights, gate};
use fedic::data::{
    decode_dataset, dirichlet_partition, encode_dataset, largest_remainder, Dataset, LabeledDataset, LongTailSpec,
    PartitionSpec,
};
use fedic::eval::{decode_model, encode_model, evaluate_predictions, group_classes, GroupThresholds};
use fedic::nn::{Architecture, MlpModel};
use fedic::Tensor;
use proptest::prelude::*;

fn labeled(labels: Vec<usize>, classes: usize, dim: usize) -> LabeledDataset {
    let n = labels.len();
    let x = Tensor::new(vec![n, dim], (0..n * dim).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    LabeledDataset::new(x, labels, classes).unwrap()
}

proptest! {
    #[test]
    fn largest_remainder_conserves(raw in prop::collection::vec(0.0f64..1.0, 1..12), total in 0usize..500) {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 0.0);
        let shares: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let counts = largest_remainder(&shares, total);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, p) in counts.iter().zip(&shares) {
            prop_assert!((*c as f64 - p * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn partition_conserves_samples(
        labels in prop::collection::vec(0usize..5, 0..200),
        k in 1usize..12,
        alpha in 0.05f64..10.0,
        seed in any::<u64>(),
    ) {
        let ds = labeled(labels, 5, 2);
        let spec = PartitionSpec { client_count: k, alpha, seed };
        let p = dirichlet_partition(&ds, &spec).unwrap();
        prop_assert_eq!(p.clients.len(), k);
        for c in 0..5 {
            let total: usize = p.clients.iter().map(|d| d.class_counts()[c]).sum();
            prop_assert_eq!(total, ds.class_counts()[c]);
        }
        let empties: Vec<usize> = (0..k).filter(|&i| p.clients[i].is_empty()).collect();
        prop_assert_eq!(&p.empty_clients, &empties);
        let again = dirichlet_partition(&ds, &spec).unwrap();
        prop_assert!(p.clients.iter().zip(&again.clients).all(|(a, b)| a == b));
    }

    #[test]
    fn long_tail_profile_is_monotone(imb in 1.0f64..200.0, head in 1usize..2000, classes in 1usize..30) {
        let counts = LongTailSpec { imbalance_factor: imb, head_count: head, class_count: classes }.counts().unwrap();
        prop_assert_eq!(counts[0], head);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn client_weights_form_a_distribution(
        data in prop::collection::vec(-50.0f64..50.0, 12),
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in -10.0f64..10.0,
    ) {
        let phi = Tensor::matrix(4, 3, data).unwrap();
        let e = client_weights(&phi, &a, b).unwrap();
        prop_assert!(e.iter().all(|&w| (0.0..=1.0).contains(&w)));
        prop_assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_stays_in_open_interval(feats in prop::collection::vec(0.0f64..3.0, 6), u in prop::collection::vec(-2.0f64..2.0, 3)) {
        let f = Tensor::matrix(2, 3, feats).unwrap();
        let (s, v) = gate(&f, &u).unwrap();
        prop_assert!(s > 0.0 && s < 1.0);
        prop_assert_eq!(v.len(), 3);
    }

    #[test]
    fn dataset_files_round_trip(labels in prop::collection::vec(0usize..4, 0..40), dim in 1usize..5) {
        let d: Dataset = labeled(labels, 4, dim).into();
        let bytes = encode_dataset(&d);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(encode_dataset(&back), bytes);
        prop_assert_eq!(back, d);
    }

    #[test]
    fn checkpoints_round_trip(hidden in prop::collection::vec(1usize..9, 0..3), seed in any::<u64>()) {
        let arch = Architecture { input_dim: 3, hidden, feature_dim: 4, class_count: 5 };
        let m = MlpModel::<f32>::init(&arch, seed).unwrap();
        let bytes = encode_model(&m);
        prop_assert_eq!(decode_model(&bytes).unwrap(), m);
    }

    #[test]
    fn overall_is_count_weighted_per_class_mean(
        labels in prop::collection::vec(0usize..6, 1..120),
        preds_seed in prop::collection::vec(0usize..6, 120),
        train in prop::collection::vec(0usize..300, 6),
    ) {
        let test = labeled(labels, 6, 1);
        let preds = &preds_seed[..test.len()];
        let groups = group_classes(&train, &GroupThresholds::default());
        let m = evaluate_predictions(preds, &test, &groups).unwrap();
        let counts = test.class_counts();
        let weighted: f64 = m.per_class.iter().zip(counts).filter_map(|(a, &n)| a.map(|a| a * n as f64)).sum();
        prop_assert!((m.overall - weighted / test.len() as f64).abs() < 1e-12);
        // Independent tally per group.
        for g in [fedic::eval::Group::Many, fedic::eval::Group::Medium, fedic::eval::Group::Few] {
            let (hit, n) = test.labels().iter().zip(preds)
                .filter(|(y, _)| groups[**y] == g)
                .fold((0usize, 0usize), |(h, n), (y, p)| (h + (y == p) as usize, n + 1));
            let expect = (n > 0).then(|| hit as f64 / n as f64);
            prop_assert_eq!(m.group(g), expect);
        }
    }
}

#[test]
fn dirichlet_largest_share_matches_monte_carlo_oracle() {
    // 10 balanced classes of 1000, K = 10, alpha = 10. Independent sampler
    // estimate of the mean largest client share: 0.1153.
    let labels: Vec<usize> = (0..10).flat_map(|c| std::iter::repeat_n(c, 1000)).collect();
    let ds = labeled(labels, 10, 1);
    let seeds = 100;
    let mean = (0..seeds)
        .map(|seed| {
            let p = dirichlet_partition(&ds, &PartitionSpec { client_count: 10, alpha: 10.0, seed }).unwrap();
            p.clients.iter().map(|c| c.len()).max().unwrap() as f64 / ds.len() as f64
        })
        .sum::<f64>()
        / seeds as f64;
    assert!((0.10..=0.15).contains(&mean), "mean largest share {mean}");
    assert!((mean - 0.1153).abs() < 0.005, "mean largest share {mean}");
}
