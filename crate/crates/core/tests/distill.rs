mod common;

use common::*;
use xparadigm::attacks::{norms, Norm};
use xparadigm::data::{DatasetKind, LabeledDataset};
use xparadigm::distill::*;
use xparadigm::paradigms::Encoder;
use xparadigm::probe::{fit_linear, Classifier, ProbeConfig, ProbeHead};
use xparadigm::tensor::Tensor;

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1, 1, 1, 1], vec![v])
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn matching_features_are_a_fixed_point() {
    let g = Encoder::identity([1, 2, 2]);
    let x = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.5, 0.9, 0.3]);
    assert_eq!(feature_distill_step(&x, &x, &g, 0.5, None, &x).unwrap(), x);
}

#[test]
fn scalar_descent_reaches_the_target() {
    let g = Encoder::identity([1, 1, 1]);
    let x = scalar(0.5);
    let mut xr = scalar(0.9);
    let init = xr.clone();
    let mut prev = 0.4;
    for _ in 0..4 {
        xr = feature_distill_step(&xr, &x, &g, 0.1, None, &init).unwrap();
        let obj = (xr.data()[0] - 0.5).abs();
        assert!(obj < prev);
        prev = obj;
    }
    assert!(prev < 1e-9);
}

#[test]
fn large_steps_are_projected_to_the_ball() {
    let g = Encoder::identity([1, 2, 2]);
    let x = Tensor::new(vec![1, 1, 2, 2], vec![0.2, 0.3, 0.4, 0.5]);
    let target = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]);
    let out = feature_distill_step(&x, &target, &g, 10.0, Some(0.5), &x).unwrap();
    assert!(l2_dist(out.data(), x.data()) <= 0.5);
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(feature_distill_step(&x, &target, &g, 0.1, Some(0.0), &x).is_err());
    assert!(feature_distill_step(&x, &scalar(0.1), &g, 0.1, None, &x).is_err());
}

#[test]
fn identity_features_pull_the_robust_dataset_to_its_sources() {
    let d = planted(10, 4);
    let g = Encoder::identity([1, 8, 8]);
    let spec = DistillSpec { iterations: 1000, step_size: 0.05, ..DistillSpec::robust_default() };
    let (r, logs) = construct_robust_dataset(&d, &g, &spec).unwrap();
    let mean = logs.iter().map(|l| l.final_loss).sum::<f64>() / logs.len() as f64;
    assert!(mean < 1e-3, "mean final objective {mean}");
    assert_eq!(r.labels(), d.labels());
    assert_eq!(r.provenance().kind, DatasetKind::Robust);
    assert_eq!(r.provenance().source_encoder.as_deref(), Some(g.id()));
}

#[test]
fn objective_never_rises_above_its_start() {
    let d = planted(8, 6);
    let g = tanh_mlp([1, 8, 8], 4, 2);
    let spec = DistillSpec { iterations: 30, step_size: 1.0, ..DistillSpec::robust_default() };
    let (_, logs) = construct_robust_dataset(&d, &g, &spec).unwrap();
    let zero = DistillSpec { iterations: 1, step_size: 1e-300, ..spec.clone() };
    let (_, start) = construct_robust_dataset(&d, &g, &zero).unwrap();
    for (a, b) in logs.iter().zip(&start) {
        assert!(a.final_loss <= b.final_loss);
    }
}

#[test]
fn default_specs_validate() {
    let r = DistillSpec::robust_default();
    assert_eq!((r.iterations, r.step_size, r.epsilon, r.init), (1000, 1.0, None, DistillInit::FromImage));
    assert!(r.validate().is_ok());
    let n = DistillSpec::nonrobust_default();
    assert_eq!((n.iterations, n.step_size, n.epsilon), (1000, 0.1, Some(0.5)));
    assert!(n.validate().is_ok());
    assert!(DistillSpec { epsilon: None, ..n.clone() }.validate().is_err());
    assert!(DistillSpec { iterations: 0, ..n.clone() }.validate().is_err());
    assert!(DistillSpec { step_size: 0.0, ..n }.validate().is_err());
}

#[test]
fn target_rules() {
    let labels = [0u32, 1, 2, 1, 0];
    assert_eq!(choose_targets(&labels, 3, TargetRule::NextClass, 0).unwrap(), [1, 2, 0, 2, 1]);
    let r = choose_targets(&labels, 3, TargetRule::RandomClass, 5).unwrap();
    assert!(r.iter().zip(&labels).all(|(&t, &y)| t != y as usize && t < 3));
    assert_eq!(r, choose_targets(&labels, 3, TargetRule::RandomClass, 5).unwrap());
}

/// A two-class linear head fit on raw pixels of `d`.
fn linear_classifier(d: &LabeledDataset) -> (Encoder, ProbeHead) {
    let e = Encoder::identity(d.shape());
    let x = d.all_images();
    let (w, b) = fit_linear(&x.clone().reshape(&[x.dim0(), x.row_len()]), &d.label_vec(), 2, &ProbeConfig::default()).unwrap();
    let h = ProbeHead::new(w, b, d.digest(), e.id()).unwrap();
    (e, h)
}

#[test]
fn nonrobust_dataset_against_a_linear_classifier() {
    let d = planted(50, 8);
    let (e, h) = linear_classifier(&d);
    let spec = DistillSpec::nonrobust_default();
    let (nr, _) = construct_nonrobust_dataset(&d, &e, &h, &spec).unwrap();
    let targets = choose_targets(d.labels(), 2, spec.target_rule, spec.seed).unwrap();
    assert_eq!(nr.label_vec(), targets);
    assert_eq!(nr.provenance().kind, DatasetKind::NonRobust);

    let (x, xa) = (d.all_images(), nr.all_images());
    let delta = Tensor::new(x.shape().to_vec(), xa.data().iter().zip(x.data()).map(|(a, b)| a - b).collect());
    let worst = norms(&delta, Norm::L2).into_iter().fold(0.0, f64::max);
    // stored pixels are f32, so each coordinate may move by half an f32 ulp
    let quantization = (x.row_len() as f64).sqrt() * f32::EPSILON as f64;
    assert!(worst <= 0.5 + quantization, "worst distance {worst}");
    assert!(xa.data().iter().all(|v| (0.0..=1.0).contains(v)));

    // the smallest L2 move onto the target side of the boundary is margin / |w_t - w_y|
    let w = h.weight.data();
    let b = h.bias.data();
    let reachable = (0..d.len())
        .filter(|&i| {
            let (y, t) = (d.labels()[i] as usize, targets[i]);
            let dw: Vec<f64> = (0..x.row_len()).map(|j| w[j * 2 + y] - w[j * 2 + t]).collect();
            let margin = x.row(i).iter().zip(&dw).map(|(p, q)| p * q).sum::<f64>() + b[y] - b[t];
            margin / dw.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.5
        })
        .count() as f64
        / d.len() as f64;
    assert!(reachable >= 0.95, "oracle reachable fraction {reachable}");
    let preds = Classifier::new(&e, &h).unwrap().predict(&xa).unwrap();
    let success = preds.iter().zip(&targets).filter(|(p, t)| p == t).count() as f64 / d.len() as f64;
    assert!(success >= 0.95, "attack success {success}");
}

#[test]
fn runs_are_reproducible() {
    let d = planted(6, 2);
    let g = tanh_mlp([1, 8, 8], 4, 9);
    for init in [DistillInit::FromImage, DistillInit::FromNoise] {
        let spec = DistillSpec { init, iterations: 20, seed: 13, ..DistillSpec::robust_default() };
        let a = construct_robust_dataset(&d, &g, &spec).unwrap();
        let b = construct_robust_dataset(&d, &g, &spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}

#[test]
fn mode_and_shape_mismatches_are_rejected() {
    let d = planted(4, 0);
    let g = Encoder::identity([1, 4, 4]);
    assert!(construct_robust_dataset(&d, &g, &DistillSpec::robust_default()).is_err());
    let g = Encoder::identity([1, 8, 8]);
    assert!(construct_robust_dataset(&d, &g, &DistillSpec::nonrobust_default()).is_err());
}
