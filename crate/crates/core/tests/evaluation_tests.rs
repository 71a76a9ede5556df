mod common;

use std::fs;

use common::{mean_of, Toy};
use metamixer::evaluation::{average_probabilities, ensemble_accuracy, export_embeddings, top1_accuracy, Evaluation};
use metamixer::{Architecture, Dataset, Network, RandomStream, Tensor};
use proptest::prelude::*;

const SIDE: usize = 4;

/// `per_class` images per class; class `i` lights channel `i` with a
/// sample-dependent brightness.
fn lit_channels(classes: usize, per_class: usize) -> Dataset {
    let plane = SIDE * SIDE;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for s in 0..per_class {
        for c in 0..classes {
            for ch in 0..classes {
                let v = if ch == c { 1.0 + 0.1 * s as f64 } else { 0.0 };
                pixels.extend(std::iter::repeat_n(v, plane));
            }
            labels.push(c);
        }
    }
    Dataset::from_raw([classes, SIDE, SIDE], pixels, labels, classes).unwrap()
}

/// A toy net that routes channel `i` to logit `i` scaled by `gain`.
fn oracle_net(classes: usize, gain: f64) -> Network {
    let arch = Architecture::Toy {
        hidden: classes,
        features: classes,
    };
    let mut net = Network::new(arch, [classes, SIDE, SIDE], classes, &mut RandomStream::new(0, "init")).unwrap();
    let centre = |o: usize, c: usize| {
        let mut w = vec![0.0; classes * classes * 9];
        for i in 0..o {
            w[(i * c + i) * 9 + 4] = 1.0;
        }
        Tensor::new(vec![o, c, 3, 3], w).unwrap()
    };
    let p = net.params_mut();
    p[0] = centre(classes, classes);
    p[1] = Tensor::zeros(&[classes]);
    p[2] = centre(classes, classes);
    p[3] = Tensor::zeros(&[classes]);
    p[4] = Tensor::from_fn(&[classes, classes], |i| if i / classes == i % classes { gain } else { 0.0 });
    p[5] = Tensor::zeros(&[classes]);
    net
}

fn constant_net(classes: usize, bias: &[f64]) -> Network {
    let mut net = oracle_net(classes, 0.0);
    net.params_mut()[5] = Tensor::new(vec![classes], bias.to_vec()).unwrap();
    net
}

#[test]
fn oracle_classifier_is_perfect() {
    let data = lit_channels(5, 3);
    assert_eq!(top1_accuracy(&oracle_net(5, 10.0), &data).unwrap(), 1.0);
}

#[test]
fn constant_classifier_scores_one_over_k() {
    for k in [2, 3, 5] {
        let data = lit_channels(k, 4);
        let mut bias = vec![0.0; k];
        bias[k - 1] = 1.0;
        assert!((top1_accuracy(&constant_net(k, &bias), &data).unwrap() - 1.0 / k as f64).abs() < 1e-15);
        // All-equal logits tie, and ties go to class 0.
        assert!((top1_accuracy(&constant_net(k, &vec![0.0; k]), &data).unwrap() - 1.0 / k as f64).abs() < 1e-15);
    }
}

#[test]
fn perfect_plus_constant_ensemble_is_perfect() {
    let data = lit_channels(2, 5);
    let perfect = oracle_net(2, 10.0);
    let constant = constant_net(2, &[0.5, 0.0]);
    assert_eq!(top1_accuracy(&constant, &data).unwrap(), 0.5);
    assert_eq!(ensemble_accuracy(&[&perfect, &constant], &data).unwrap(), 1.0);
    let e = Evaluation::of(&[&perfect, &constant], &data).unwrap();
    assert_eq!(e.per_network, vec![1.0, 0.5]);
    assert_eq!(e.avg, 0.75);
    assert_eq!(e.ens, Some(1.0));
}

#[test]
fn identical_members_match_single_accuracy() {
    let data = lit_channels(3, 4);
    let mut rng = RandomStream::new(3, "init");
    let net = Network::new("tiny-resnet-w4-b1".parse().unwrap(), [3, SIDE, SIDE], 3, &mut rng).unwrap();
    assert_eq!(ensemble_accuracy(&[&net, &net], &data).unwrap(), top1_accuracy(&net, &data).unwrap());
}

#[test]
fn ensemble_rejects_mismatched_classes() {
    let data = lit_channels(3, 1);
    let a = oracle_net(3, 1.0);
    let mut rng = RandomStream::new(1, "init");
    let b = Network::new("toy-h2-f2".parse().unwrap(), [3, SIDE, SIDE], 4, &mut rng).unwrap();
    assert!(ensemble_accuracy(&[&a, &b], &data).is_err());
    assert!(ensemble_accuracy(&[&a], &data).is_err());
}

#[test]
fn export_has_one_row_per_sample_and_matches_pooled_features() {
    let data = lit_channels(3, 4);
    let mut rng = RandomStream::new(5, "init");
    let net = Network::new("toy-h3-f5".parse().unwrap(), [3, SIDE, SIDE], 3, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    export_embeddings(&net, &data, &a).unwrap();
    export_embeddings(&net, &data, &b).unwrap();
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    assert!(!text.contains('\r'));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), data.len() + 1);
    assert_eq!(lines[0], "sample_id,label,f0,f1,f2,f3,f4");
    let toy = Toy::of(&net);
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 5 + 2);
        assert_eq!(cols[0].parse::<usize>().unwrap(), i);
        assert_eq!(cols[1].parse::<usize>().unwrap(), data.label(i));
        let (_, feature) = toy.forward(data.image_data(i), SIDE, SIDE);
        for (c, v) in cols[2..].iter().enumerate() {
            let pooled = feature[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
            assert!((v.parse::<f64>().unwrap() - pooled).abs() < 1e-6);
        }
    }
    assert!(export_embeddings(&net, &data, &dir.path().join("missing/x.csv")).is_err());
}

#[test]
fn hand_averaged_probabilities() {
    // Logits whose softmax is (0.6, 0.4) and (0.2, 0.8).
    let a = Tensor::new(vec![1, 2], vec![(0.6f64 / 0.4).ln(), 0.0]).unwrap();
    let b = Tensor::new(vec![1, 2], vec![(0.2f64 / 0.8).ln(), 0.0]).unwrap();
    let p = average_probabilities(&[&a, &b]).unwrap();
    assert!((p.data()[0] - 0.4).abs() < 1e-12 && (p.data()[1] - 0.6).abs() < 1e-12);
}

proptest! {
    #[test]
    fn probability_average_ignores_member_order(
        a in prop::collection::vec(-10.0f64..10.0, 6),
        b in prop::collection::vec(-10.0f64..10.0, 6),
        c in prop::collection::vec(-10.0f64..10.0, 6),
    ) {
        let t = |v: &Vec<f64>| Tensor::new(vec![2, 3], v.clone()).unwrap();
        let (ta, tb, tc) = (t(&a), t(&b), t(&c));
        let x = average_probabilities(&[&ta, &tb, &tc]).unwrap();
        let y = average_probabilities(&[&tc, &ta, &tb]).unwrap();
        prop_assert!(x.max_abs_diff(&y) < 1e-15);
        let soft = |v: &[f64]| common::softmax_t(v, 1.0);
        for r in 0..2 {
            let oracle = mean_of(&[soft(&a[r * 3..r * 3 + 3]), soft(&b[r * 3..r * 3 + 3]), soft(&c[r * 3..r * 3 + 3])]);
            for (p, q) in x.row(r).iter().zip(&oracle) {
                prop_assert!((p - q).abs() < 1e-12);
            }
            prop_assert!((x.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
