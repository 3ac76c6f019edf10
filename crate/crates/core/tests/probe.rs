mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use xparadigm::data::{generate_planted, LabeledDataset, PlantedSpec, Provenance};
use xparadigm::paradigms::Encoder;
use xparadigm::probe::*;
use xparadigm::rng;
use xparadigm::tensor::Tensor;

fn noiseless(n_per_class: usize, seed: u64) -> LabeledDataset {
    generate_planted(&PlantedSpec { n_per_class, noise_std: 0.0, seed, ..PlantedSpec::default() }).unwrap()
}

#[test]
fn identity_features_on_separable_data() {
    let d = noiseless(40, 1);
    let e = Encoder::identity([1, 8, 8]);
    let h = train_probe(&e, &d, &ProbeConfig::default()).unwrap();
    assert_eq!(evaluate_accuracy(&e, &h, &d).unwrap(), 1.0);
    assert_eq!(h.encoder_id, e.id());
    assert_eq!(h.dataset_digest, d.digest());
}

#[test]
fn constant_features_give_the_majority_rate() {
    let d = planted(100, 2);
    // keep all of class 0 and 30 of class 1
    let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] == 0 || i < 60).collect();
    let d = d.subset(&idx);
    let majority = d.labels().iter().filter(|&&l| l == 0).count() as f64 / d.len() as f64;
    let e = Encoder::constant([1, 8, 8], 4, 0.7);
    let h = train_probe(&e, &d, &ProbeConfig::default()).unwrap();
    assert!((evaluate_accuracy(&e, &h, &d).unwrap() - majority).abs() <= 0.02);
}

#[test]
fn probing_is_deterministic() {
    let d = planted(30, 3);
    let e = tanh_mlp([1, 8, 8], 5, 1);
    let cfg = ProbeConfig { restarts: 3, seed: 8, ..ProbeConfig::default() };
    assert_eq!(train_probe(&e, &d, &cfg).unwrap(), train_probe(&e, &d, &cfg).unwrap());
}

#[test]
fn shuffled_labels_sit_at_chance() {
    let train = noiseless(40, 1);
    let e = Encoder::identity([1, 8, 8]);
    let h = train_probe(&e, &train, &ProbeConfig::default()).unwrap();
    let test = planted(1000, 9);
    let mut labels = test.labels().to_vec();
    labels.shuffle(&mut rng::rng(4));
    let shuffled = LabeledDataset::new(test.images().to_vec(), labels, [1, 8, 8], 2, Provenance::natural()).unwrap();
    assert!((evaluate_accuracy(&e, &h, &shuffled).unwrap() - 0.5).abs() <= 0.05);
}

#[test]
fn five_sample_fixture() {
    let e = Encoder::identity([1, 1, 1]);
    // class 0 wins exactly when the pixel exceeds 0.5
    let h = head(vec![1.0, 0.0], 1, 2, vec![0.0, 0.5]);
    let images = vec![0.9, 0.1, 0.8, 0.2, 0.7];
    let d = LabeledDataset::new(images, vec![0, 1, 1, 1, 1], [1, 1, 1], 2, Provenance::natural()).unwrap();
    assert_eq!(evaluate_accuracy(&e, &h, &d).unwrap(), 0.6);
    assert_eq!(accuracy(&[0, 1, 0, 1, 0], &[0, 1, 1, 1, 1]), 0.6);
}

#[test]
fn mismatched_heads_are_rejected() {
    let d = planted(5, 0);
    let e = Encoder::identity([1, 8, 8]);
    let h = head(vec![0.0; 6], 3, 2, vec![0.0; 2]);
    assert!(evaluate_accuracy(&e, &h, &d).is_err());
    let k3 = head(vec![0.0; 64 * 3], 64, 3, vec![0.0; 3]);
    assert!(evaluate_accuracy(&e, &k3, &d).is_err());
    assert!(ProbeHead::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[3]), "", "").is_err());
    assert!(fit_linear(&Tensor::zeros(&[4, 2]), &[0, 0, 0, 0], 1, &ProbeConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn positive_rescaling_keeps_accuracy(c in 0.01f64..100.0) {
        let d = planted(20, 6);
        let e = Encoder::identity([1, 8, 8]);
        let h = train_probe(&e, &d, &ProbeConfig { epochs: 5, ..ProbeConfig::default() }).unwrap();
        let scaled = ProbeHead::new(h.weight.map(|v| v * c), h.bias.map(|v| v * c), "", "").unwrap();
        prop_assert_eq!(evaluate_accuracy(&e, &h, &d).unwrap(), evaluate_accuracy(&e, &scaled, &d).unwrap());
    }
}
