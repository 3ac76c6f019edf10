use std::collections::BTreeMap;

use proptest::prelude::*;
use xparadigm::attacks::Norm;
use xparadigm::data::{DatasetKind, Provenance};
use xparadigm::metrics::*;
use xparadigm::paradigms::Paradigm::{self, *};
use xparadigm::tensor::Tensor;
use xparadigm::Error;

fn scores(v: [f64; 4]) -> BTreeMap<Paradigm, f64> {
    Paradigm::ALL.into_iter().zip(v).collect()
}

fn robust_prov() -> Provenance {
    Provenance { kind: DatasetKind::Robust, source_encoder: Some("cl-abc".into()), distill_config: None }
}

#[test]
fn rho_examples() {
    assert_eq!(rho_usefulness(&[1.0, -1.0, 1.0], &[1.0, -1.0, 1.0]).unwrap(), 1.0);
    assert_eq!(rho_usefulness(&[-1.0, 1.0], &[1.0, -1.0]).unwrap(), -1.0);
    let r = rho_usefulness(&[0.5, -0.2, 0.1], &[1.0, -1.0, 1.0]).unwrap();
    assert!((r - 0.8 / 3.0).abs() < 1e-15);
    assert!((r - 0.2667).abs() < 1e-4);
    assert!(rho_usefulness(&[], &[]).is_err());
    assert!(rho_usefulness(&[1.0], &[0.0]).is_err());
}

#[test]
fn gamma_affine_closed_form() {
    let w = [0.5, -2.0, 1.0];
    let xs = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.9, 0.1, 0.0]);
    let y = [1.0, -1.0];
    let f = |i: usize| xs.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.25;
    let eps = 0.1;
    let oracle = ((f(0) - eps * 3.5) + (-f(1) - eps * 3.5)) / 2.0;
    let got = gamma_robust_usefulness(&Feature::Affine { w: &w, b: 0.25 }, &xs, &y, eps, Norm::Linf, &GammaBudget::default()).unwrap();
    assert!(got.exact);
    assert!((got.gamma - oracle).abs() < 1e-12);
    let l2 = gamma_robust_usefulness(&Feature::Affine { w: &w, b: 0.25 }, &xs, &y, eps, Norm::L2, &GammaBudget::default()).unwrap();
    assert!((l2.gamma - ((f(0) - f(1)) / 2.0 - eps * 5.25f64.sqrt())).abs() < 1e-12);
}

#[test]
fn gamma_descent_matches_affine_oracle() {
    // a differentiable wrapper around the same affine map; Linf descent with sign steps reaches the vertex
    let w = vec![0.5, -2.0, 1.0];
    let wf = w.clone();
    let f = move |x: &[f64]| (x.iter().zip(&wf).map(|(a, b)| a * b).sum::<f64>() + 0.25, wf.clone());
    let xs = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.9, 0.1, 0.0]);
    let y = [1.0, -1.0];
    let b = GammaBudget { steps: 8, step_size: None };
    let est = gamma_robust_usefulness(&Feature::Differentiable(&f), &xs, &y, 0.1, Norm::Linf, &b).unwrap();
    let exact = gamma_robust_usefulness(&Feature::Affine { w: &w, b: 0.25 }, &xs, &y, 0.1, Norm::Linf, &b).unwrap();
    assert!(!est.exact);
    assert!((est.gamma - exact.gamma).abs() < 1e-12);
}

#[test]
fn gamma_reductions() {
    let xs = Tensor::new(vec![3, 2], vec![0.1, 0.4, 0.5, 0.2, 0.9, 0.7]);
    let y = [1.0, -1.0, 1.0];
    let f = |x: &[f64]| (x[0] * x[0] - x[1], vec![2.0 * x[0], -1.0]);
    let vals: Vec<f64> = (0..3).map(|i| f(xs.row(i)).0).collect();
    let g0 = gamma_robust_usefulness(&Feature::Differentiable(&f), &xs, &y, 0.0, Norm::L2, &GammaBudget::default()).unwrap();
    assert_eq!(g0.gamma, rho_usefulness(&vals, &y).unwrap());
    let c = |_: &[f64]| (0.7, vec![0.0, 0.0]);
    let ones = [1.0; 3];
    let gc = gamma_robust_usefulness(&Feature::Differentiable(&c), &xs, &ones, 0.3, Norm::Linf, &GammaBudget::default()).unwrap();
    assert!((gc.gamma - 0.7).abs() < 1e-12);
    let g = gamma_robust_usefulness(&Feature::Differentiable(&f), &xs, &y, 0.05, Norm::Linf, &GammaBudget::default()).unwrap();
    assert!(g.gamma < g0.gamma);
}

#[test]
fn relative_score_examples() {
    assert_eq!(relative_score(0.45, 0.90, Sl).unwrap(), 0.5);
    assert_eq!(relative_score(0.7, 0.7, Cl).unwrap(), 1.0);
    // ratios above one are reported raw
    assert!(relative_score(0.914, 0.9, Sl).unwrap() > 1.0);
    match relative_score(0.3, 0.0, Dm) {
        Err(Error::ZeroDenominator(p)) => assert_eq!(p, "DM"),
        other => panic!("expected a zero-denominator error, got {other:?}"),
    }
}

#[test]
fn cross_min_printed_rows() {
    assert_eq!(cross_min(&scores([0.307, 0.433, 0.512, 0.914]), &Paradigm::ALL).unwrap(), (0.307, Mim));
    assert_eq!(cross_min(&scores([0.896, 0.791, 0.831, 0.880]), &Paradigm::ALL).unwrap(), (0.791, Cl));
    assert_eq!(cross_min(&scores([0.027, 0.007, 0.043, 0.004]), &Paradigm::ALL).unwrap(), (0.004, Sl));
    assert_eq!(cross_min(&scores([0.5; 4]), &Paradigm::ALL).unwrap(), (0.5, Mim));
    let mut partial = scores([0.1; 4]);
    partial.remove(&Dm);
    assert!(matches!(cross_min(&partial, &Paradigm::ALL), Err(Error::MissingParadigm(_))));
}

#[test]
fn tiny_imagenet_row_is_flagged() {
    let c = check_printed_cross(&scores([0.691, 0.775, 0.861, 0.880]), 0.672).unwrap();
    assert!(!c.consistent);
    assert_eq!((c.computed, c.argmin), (0.691, Mim));
    assert!(check_printed_cross(&scores([0.134, 0.074, 0.141, 0.645]), 0.074).unwrap().consistent);
}

fn robustness_report(r: [f64; 4]) -> CrossParadigmReport {
    let entries: Vec<_> = Paradigm::ALL
        .into_iter()
        .zip(r)
        .map(|(p, r)| (ParadigmScore::new(p, 0.9, r, 0.9, 0.5).unwrap(), Provenance::natural()))
        .collect();
    build_report(&entries, &ParadigmSet::Full).unwrap()
}

#[test]
fn build_report_examples() {
    let rep = robustness_report([0.008, 0.012, 0.047, 0.000]);
    assert_eq!((rep.cr, rep.argmin.cr), (0.0, Sl));
    let single = build_report(
        &[(ParadigmScore::new(Sl, 0.9, 0.1, 0.95, 0.2).unwrap(), Provenance::natural())],
        &ParadigmSet::Reduced(vec![Sl]),
    )
    .unwrap();
    assert_eq!(single.cu, 0.9);
    let eq = robustness_report([0.5; 4]);
    assert_eq!((eq.cu, eq.cr, eq.cru, eq.crr), (0.9, 0.5, Some(1.0), Some(1.0)));
    assert_eq!(eq.argmin, Argmin { cu: Mim, cr: Mim, cru: Some(Mim), crr: Some(Mim) });
}

#[test]
fn build_report_rejects_bad_inputs() {
    let s = |p| ParadigmScore::new(p, 0.8, 0.1, 0.9, 0.2).unwrap();
    let mixed = vec![(s(Mim), Provenance::natural()), (s(Cl), robust_prov()), (s(Dm), Provenance::natural()), (s(Sl), Provenance::natural())];
    assert!(matches!(build_report(&mixed, &ParadigmSet::Full), Err(Error::Provenance(_))));
    let missing = vec![(s(Mim), Provenance::natural()), (s(Cl), Provenance::natural())];
    assert!(matches!(build_report(&missing, &ParadigmSet::Full), Err(Error::MissingParadigm(_))));
    assert!(ParadigmScore::new(Sl, 1.2, 0.1, 0.9, 0.2).is_err());
}

#[test]
fn zero_raw_robustness_leaves_rr_undefined() {
    let s = ParadigmScore::new(Sl, 0.8, 0.0, 0.9, 0.0).unwrap();
    assert_eq!(s.rr, None);
    let entries: Vec<_> = Paradigm::ALL
        .into_iter()
        .map(|p| (if p == Sl { s.clone() } else { ParadigmScore::new(p, 0.8, 0.1, 0.9, 0.2).unwrap() }, Provenance::natural()))
        .collect();
    let r = build_report(&entries, &ParadigmSet::Full).unwrap();
    assert_eq!((r.crr, r.argmin.crr), (None, None));
    assert_eq!(r.cr, 0.0);
}

#[test]
fn robustness_above_usefulness_warns() {
    let entries: Vec<_> = Paradigm::ALL
        .into_iter()
        .map(|p| (ParadigmScore::new(p, 0.5, if p == Dm { 0.6 } else { 0.1 }, 0.9, 0.2).unwrap(), Provenance::natural()))
        .collect();
    let w = build_report(&entries, &ParadigmSet::Full).unwrap().warnings();
    assert_eq!(w.len(), 1);
    assert!(w[0].starts_with("DM"));
}

#[test]
fn report_json_keys() {
    let v: serde_json::Value = serde_json::from_str(&robustness_report([0.1, 0.2, 0.3, 0.4]).to_json().unwrap()).unwrap();
    for k in ["paradigm_scores", "cu", "cr", "cru", "crr", "argmin", "dataset_provenance"] {
        assert!(v.get(k).is_some(), "missing key {k}");
    }
    assert!(v["paradigm_scores"]["SL"]["RU"].is_number());
}

#[test]
fn tables_have_the_fixed_column_layout() {
    let mk = |kind, ru: [f64; 4]| {
        let prov = Provenance { kind, source_encoder: None, distill_config: None };
        let entries: Vec<_> =
            Paradigm::ALL.into_iter().zip(ru).map(|(p, u)| (ParadigmScore::new(p, u, 0.0, 1.0, 0.5).unwrap(), prov.clone())).collect();
        build_report(&entries, &ParadigmSet::Full).unwrap()
    };
    let t = render_table(
        &[mk(DatasetKind::NonRobust, [0.307, 0.433, 0.512, 0.914]), mk(DatasetKind::Robust, [0.896, 0.791, 0.831, 0.880])],
        TableMetric::RelativeUsefulness,
    );
    assert_eq!(t.header, ["Dataset", "MIM", "CL", "DM", "SL", "Cross"]);
    assert_eq!(t.rows.len(), 2);
    assert_eq!(t.rows[0], ["robust", "0.896", "0.791", "0.831", "0.880", "0.791"]);
    assert_eq!(t.rows[1][5], "0.307");
    assert!(t.to_csv().starts_with("Dataset,MIM,CL,DM,SL,Cross\n"));
    assert!(t.to_markdown().lines().nth(1).unwrap().starts_with("|---|"));
}

proptest! {
    #[test]
    fn cross_min_is_a_lower_bound(v in prop::array::uniform4(0.0f64..1.0)) {
        let s = scores(v);
        let (m, arg) = cross_min(&s, &Paradigm::ALL).unwrap();
        prop_assert!(s.values().all(|&x| m <= x));
        prop_assert_eq!(s[&arg], m);
    }

    #[test]
    fn rho_is_linear(
        f in prop::collection::vec(-1.0f64..1.0, 1..20),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let n = f.len();
        let h: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 97) as f64 / 48.0) - 1.0).collect();
        let y: Vec<f64> = (0..n).map(|i| if (seed >> (i % 64)) & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let comb: Vec<f64> = f.iter().zip(&h).map(|(x, z)| a * x + b * z).collect();
        let lhs = rho_usefulness(&comb, &y).unwrap();
        let rhs = a * rho_usefulness(&f, &y).unwrap() + b * rho_usefulness(&h, &y).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn relative_score_is_scale_consistent(v in 0.0f64..1.0, d in 0.01f64..1.0, c in 0.1f64..10.0) {
        let r1 = relative_score(v, d, Paradigm::Sl).unwrap();
        let r2 = relative_score(c * v, c * d, Paradigm::Sl).unwrap();
        prop_assert!((r1 - r2).abs() <= 1e-12 * r1.abs().max(1.0));
    }

    #[test]
    fn gamma_never_exceeds_rho(w in prop::collection::vec(-1.0f64..1.0, 3), eps in 0.0f64..0.5) {
        let xs = Tensor::new(vec![2, 3], vec![0.2, 0.4, 0.6, 0.1, 0.3, 0.5]);
        let y = [1.0, -1.0];
        let vals: Vec<f64> = (0..2).map(|i| xs.row(i).iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
        let g = gamma_robust_usefulness(&Feature::Affine { w: &w, b: 0.0 }, &xs, &y, eps, Norm::Linf, &GammaBudget::default()).unwrap();
        prop_assert!(g.gamma <= rho_usefulness(&vals, &y).unwrap() + 1e-12);
    }
}
