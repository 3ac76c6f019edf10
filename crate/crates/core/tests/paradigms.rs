mod common;

use std::sync::OnceLock;

use common::*;
use xparadigm::autograd::Graph;
use xparadigm::data::{generate_planted, LabeledDataset, PlantedSpec, Provenance};
use xparadigm::nn::{init_params, Arch};
use xparadigm::paradigms::augment::{augment_graph, sample_params};
use xparadigm::paradigms::mim::{decoder_specs, mim_loss};
use xparadigm::paradigms::*;
use xparadigm::probe::{evaluate_accuracy, train_probe, ProbeConfig};
use xparadigm::tensor::Tensor;

#[test]
fn infonce_identical_features_is_log_three() {
    let z = Tensor::full(&[4, 5], 0.3);
    assert!((infonce_loss(&z, 0.5).unwrap() - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn infonce_matches_the_double_loop() {
    let z = Tensor::from_fn(&[8, 6], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
    for tau in [0.1, 0.5, 2.0] {
        assert!((infonce_loss(&z, tau).unwrap() - naive_infonce(&z, tau)).abs() < 1e-5);
    }
}

#[test]
fn infonce_vanishes_for_orthogonal_pairs_at_low_temperature() {
    // each positive pair shares a basis vector orthogonal to every other pair
    let z = Tensor::from_fn(&[4, 2], |i| if i / 2 % 2 == i % 2 { 1.0 } else { 0.0 });
    let l = infonce_loss(&z, 0.01).unwrap();
    assert!(l < 1e-12, "{l}");
    assert!(infonce_loss(&z, 0.1).unwrap() > l);
}

#[test]
fn infonce_is_permutation_equivariant() {
    let z = Tensor::from_fn(&[6, 4], |i| ((i * 31) % 13) as f64 - 6.0);
    let perm = [2, 0, 1];
    let rows: Vec<usize> = perm.iter().copied().chain(perm.iter().map(|p| p + 3)).collect();
    let a = infonce_loss(&z, 0.5).unwrap();
    let b = infonce_loss(&z.select_rows(&rows), 0.5).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn infonce_rejects_bad_arguments() {
    assert!(infonce_loss(&Tensor::full(&[4, 2], 1.0), 0.0).is_err());
    assert!(infonce_loss(&Tensor::full(&[2, 2], 1.0), 0.5).is_err());
}

#[test]
fn patch_masks() {
    let m = mask_patches(3, 16, 0.75, 9).unwrap();
    assert_eq!((m.num_masked(), m.num_visible(), m.len()), (12, 4, 3));
    for i in 0..3 {
        let mut all: Vec<usize> = m.masked[i].iter().chain(&m.visible[i]).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }
    assert_eq!(m, mask_patches(3, 16, 0.75, 9).unwrap());
    assert!(mask_patches(1, 16, 0.01, 0).is_err());
    assert!(mask_patches(1, 16, 1.0, 0).is_err());
    assert!(mask_patches(1, 16, 0.0, 0).is_err());
}

#[test]
fn mim_loss_ignores_unmasked_targets() {
    let arch = Arch::PatchTransformer { in_shape: [1, 8, 8], patch: 2, dim: 8, depth: 1, mlp_dim: 16 };
    let enc = arch.init(1);
    let dec = init_params(&decoder_specs(&arch, 8, 16), 2);
    let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f64 * 0.13).sin() * 0.5 + 0.5);
    let mask = mask_patches(2, 16, 0.75, 3).unwrap();
    let loss = |target: &Tensor| {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let xt = g.constant(target.clone());
        let e: Vec<_> = enc.iter().map(|t| g.constant(t.clone())).collect();
        let d: Vec<_> = dec.iter().map(|t| g.constant(t.clone())).collect();
        let l = mim_loss(&mut g, &arch, xi, xt, &mask, &e, &d);
        g.scalar(l)
    };
    let mut moved = x.clone();
    for i in 0..2 {
        for &p in &mask.visible[i] {
            let (py, px) = (p / 4, p % 4);
            for dy in 0..2 {
                for dx in 0..2 {
                    moved.data_mut()[i * 64 + (py * 2 + dy) * 8 + px * 2 + dx] += 0.3;
                }
            }
        }
    }
    assert_eq!(loss(&x).to_bits(), loss(&moved).to_bits());
    let mut masked = x.clone();
    let p = mask.masked[0][0];
    masked.data_mut()[(p / 4) * 16 + (p % 4) * 2] += 0.3;
    assert_ne!(loss(&x), loss(&masked));
}

#[test]
fn mim_fits_a_zero_image_dataset() {
    let n = 1000;
    let z = LabeledDataset::new(vec![0.0; n * 64], (0..n as u32).map(|i| i % 2).collect(), [1, 8, 8], 2, Provenance::natural()).unwrap();
    let (_, r) = train_mim(&z, &ParadigmConfig::desk_default(Paradigm::Mim, [1, 8, 8], 1)).unwrap();
    let last = *r.epoch_losses.last().unwrap();
    assert!(last <= 1e-4, "final loss {last}");
}

#[test]
fn forward_diffusion_marginal() {
    let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
    assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    let n = 10_000;
    let x0 = Tensor::full(&[n], 0.6);
    let xt = diffusion_forward_sample(&x0, 2, &s, 17).unwrap();
    let mean = xt.sum() / n as f64;
    let se = (0.28f64 / n as f64).sqrt();
    assert!((mean - 0.72f64.sqrt() * 0.6).abs() < 3.0 * se);
    let resid: Vec<f64> = xt.data().iter().map(|v| v - 0.72f64.sqrt() * 0.6).collect();
    let m = resid.iter().sum::<f64>() / n as f64;
    let var = resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var - 0.28).abs() < 0.02);
    let tiny = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
    let x = Tensor::from_fn(&[5], |i| i as f64 / 5.0);
    let near = diffusion_forward_sample(&x, 1, &tiny, 0).unwrap();
    assert!(near.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-5));
    assert!(diffusion_forward_sample(&x, 0, &s, 0).is_err());
    assert!(diffusion_forward_sample(&x, 3, &s, 0).is_err());
}

#[test]
fn diffusion_loss_starts_near_one_and_falls() {
    let d = planted(500, 0);
    let mut init = ParadigmConfig::desk_default(Paradigm::Dm, [1, 8, 8], 1);
    init.epochs = 1;
    init.batch_size = d.len();
    init.lr = 1e-300;
    let (_, r) = train_diffusion(&d, &init).unwrap();
    assert!((r.epoch_losses[0] - 1.0).abs() < 0.05, "loss at init {}", r.epoch_losses[0]);
    let cfg = ParadigmConfig { epochs: 10, ..ParadigmConfig::desk_default(Paradigm::Dm, [1, 8, 8], 1) };
    let (e, r) = train_diffusion(&d, &cfg).unwrap();
    let smooth: Vec<f64> = r.epoch_losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.epoch_losses);
    let tap = e.diffusion().unwrap();
    assert_eq!((tap.t_feat, tap.tap_layer.as_str()), (10, "up"));
}

#[test]
fn supervised_training() {
    let d = generate_planted(&PlantedSpec { n_per_class: 150, ..PlantedSpec::default() }).unwrap();
    let cfg = ParadigmConfig::desk_default(Paradigm::Sl, [1, 8, 8], 3);
    let (e, h, r) = train_supervised(&d, &cfg).unwrap();
    assert!(r.final_train_accuracy.unwrap() >= 0.99);
    assert!(evaluate_accuracy(&e, &h, &d).unwrap() >= 0.99);
    let (e2, h2, _) = train_supervised(&d, &cfg).unwrap();
    assert_eq!((e, h), (e2, h2));
    let one = LabeledDataset::new(vec![0.5; 4 * 64], vec![0; 4], [1, 8, 8], 1, Provenance::natural()).unwrap();
    assert!(train_supervised(&one, &cfg).is_err());
    assert!(train_contrastive(&d, &cfg).is_err());
}

#[test]
fn contrastive_probe_beats_a_random_encoder() {
    let spec = PlantedSpec { n_per_class: 200, num_classes: 6, noise_std: 0.2, ..PlantedSpec::desk(0) };
    let d = generate_planted(&spec).unwrap();
    let t = generate_planted(&PlantedSpec { n_per_class: 50, seed: 99, ..spec }).unwrap();
    let cfg = ParadigmConfig::desk_default(Paradigm::Cl, [1, 8, 8], 1);
    let (e, r) = train_contrastive(&d, &cfg).unwrap();
    assert!(r.epoch_losses.last() < r.epoch_losses.first());
    assert!(e.projector().is_some());
    let pc = ProbeConfig::default();
    let cl = evaluate_accuracy(&e, &train_probe(&e, &d, &pc).unwrap(), &t).unwrap();
    let rnd = Encoder::new(Paradigm::Cl, cfg.arch.clone(), cfg.arch.init(0), [1, 8, 8], "random", None, None).unwrap();
    let base = evaluate_accuracy(&rnd, &train_probe(&rnd, &d, &pc).unwrap(), &t).unwrap();
    assert!(cl > base, "CL {cl} random {base}");
}

#[test]
fn contrastive_without_augmentation_sees_identical_views() {
    let d = planted(16, 2);
    let cfg = ParadigmConfig { augment: false, epochs: 1, batch_size: 32, lr: 1e-300, ..ParadigmConfig::desk_default(Paradigm::Cl, [1, 8, 8], 4) };
    let (e, r) = train_contrastive(&d, &cfg).unwrap();
    let mut g = Graph::new();
    let x = g.constant(d.all_images());
    let f = e.forward(&mut g, x);
    let z = e.projector().unwrap().forward(&mut g, f);
    let z = g.value(z).clone();
    let dup = Tensor::stack_rows(&[&z, &z]);
    assert!((r.epoch_losses[0] - infonce_loss(&dup, 0.5).unwrap()).abs() < 1e-9);
    let (e2, _) = train_contrastive(&d, &cfg).unwrap();
    assert_eq!(e, e2);
}

/// One encoder per paradigm after a single epoch on a small planted set.
fn encoders() -> &'static Vec<Encoder> {
    static E: OnceLock<Vec<Encoder>> = OnceLock::new();
    E.get_or_init(|| {
        let d = planted(32, 5);
        Paradigm::ALL
            .into_iter()
            .map(|p| {
                let cfg = ParadigmConfig { epochs: 1, ..ParadigmConfig::desk_default(p, [1, 8, 8], 2) };
                train(&d, &cfg).unwrap().0
            })
            .collect()
    })
}

#[test]
fn features_have_the_declared_shape_and_are_per_sample() {
    let x = planted(3, 8).all_images();
    for e in encoders() {
        for n in [1, 6] {
            let f = e.extract_features(&x.select_rows(&(0..n).collect::<Vec<_>>())).unwrap();
            assert_eq!(f.shape(), &[n, e.feature_dim()], "{}", e.paradigm());
        }
        let f = e.extract_features(&x.select_rows(&[2, 2, 0])).unwrap();
        assert_eq!(f.row(0), f.row(1));
        let single = e.extract_features(&x.select_rows(&[0])).unwrap();
        assert!(f.row(2).iter().zip(single.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(e.extract_features(&x).unwrap(), e.extract_features(&x).unwrap());
        assert!(e.extract_features(&Tensor::zeros(&[1, 1, 4, 4])).is_err());
    }
}

#[test]
fn feature_gradients_match_finite_differences() {
    let x = planted(1, 3).all_images().select_rows(&[0]);
    for e in encoders() {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let f = e.forward(&mut g, xv);
        let m = g.mean(f);
        let grad = g.backward(m).take(xv, x.shape());
        let mean_feature = |p: &Tensor| {
            let f = e.extract_features(p).unwrap();
            f.sum() / f.len() as f64
        };
        for pixel in [0, 27, 63] {
            let fd = numeric_grad(&x, 1e-5, mean_feature)[pixel];
            let an = grad.data()[pixel];
            assert!((an - fd).abs() <= 1e-3 * fd.abs().max(1e-4), "{} pixel {pixel}: {an} vs {fd}", e.paradigm());
        }
    }
}

#[test]
fn encoders_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    for e in encoders() {
        let p = dir.path().join(e.paradigm().as_str());
        e.save(&p).unwrap();
        assert_eq!(&Encoder::load(&p).unwrap(), e);
    }
}

#[test]
fn identity_augmentation_returns_the_input() {
    let x = planted(2, 1).all_images();
    let params = vec![AugmentParams::identity(8, 8); 4];
    for diff in [false, true] {
        let y = augment::augment_with(&x, &params, diff);
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn augmentation_is_seeded() {
    let x = planted(2, 1).all_images();
    let cfg = AugmentConfig::default();
    assert_eq!(augment(&x, &cfg, 4, true), augment(&x, &cfg, 4, true));
    assert_ne!(augment(&x, &cfg, 4, true), augment(&x, &cfg, 5, true));
}

#[test]
fn differentiable_augmentation_gradient() {
    let x = Tensor::from_fn(&[2, 1, 8, 8], |i| 0.35 + 0.3 * ((i as f64) * 0.7).sin().abs());
    let cfg = AugmentConfig { brightness: 0.05, contrast: 0.1, ..AugmentConfig::default() };
    let params = sample_params(2, 8, 8, &cfg, 12);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = augment_graph(&mut g, xv, &params, true);
    let s = g.sum(y);
    let grad = g.backward(s).take(xv, x.shape());
    let fd = numeric_grad(&x, 1e-6, |p| augment::augment_with(p, &params, true).sum());
    assert!(max_rel_err(grad.data(), &fd) <= 1e-3);
}
