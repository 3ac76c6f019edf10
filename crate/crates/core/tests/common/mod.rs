#![allow(dead_code)]

use std::sync::OnceLock;

use xparadigm::data::{generate_planted, LabeledDataset, PlantedSpec};
use xparadigm::nn::{Activation, Arch};
use xparadigm::paradigms::supervised::train_supervised;
use xparadigm::paradigms::{Encoder, Paradigm, ParadigmConfig};
use xparadigm::probe::ProbeHead;
use xparadigm::tensor::Tensor;

pub fn planted(n_per_class: usize, seed: u64) -> LabeledDataset {
    generate_planted(&PlantedSpec { n_per_class, ..PlantedSpec::desk(seed) }).unwrap()
}

/// Held-out natural test set shared by the empirical tests.
pub fn test_set(n_per_class: usize) -> LabeledDataset {
    planted(n_per_class, 99)
}

pub fn head(weight: Vec<f64>, d: usize, k: usize, bias: Vec<f64>) -> ProbeHead {
    ProbeHead::new(Tensor::new(vec![d, k], weight), Tensor::new(vec![k], bias), "fixture", "fixture").unwrap()
}

/// A small tanh MLP with fixed weights for derivative checks.
pub fn tanh_mlp(input_shape: [usize; 3], out: usize, seed: u64) -> Encoder {
    let d: usize = input_shape.iter().product();
    let arch = Arch::Mlp { dims: vec![d, 3, out], act: Activation::Tanh, final_act: false };
    let params = arch.init(seed);
    Encoder::new(Paradigm::Sl, arch, params, input_shape, "tanh-fixture", None, None).unwrap()
}

/// InfoNCE by an explicit double loop over anchors and candidates.
pub fn naive_infonce(z: &Tensor, tau: f64) -> f64 {
    let n = z.dim0();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = z.row(i);
            let s = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / s).collect()
        })
        .collect();
    let sim = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += sim(i, j).exp();
            }
        }
        total -= (sim(i, (i + n / 2) % n).exp() / denom).ln();
    }
    total / n as f64
}

/// Central finite difference of `f` at every coordinate of `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// An undefended SL model trained on 2000 planted desk samples.
pub fn sl_model() -> &'static (Encoder, ProbeHead) {
    static M: OnceLock<(Encoder, ProbeHead)> = OnceLock::new();
    M.get_or_init(|| {
        let d = planted(1000, 0);
        let (e, h, _) = train_supervised(&d, &ParadigmConfig::desk_default(Paradigm::Sl, [1, 8, 8], 1)).unwrap();
        (e, h)
    })
}

/// A desk config shrunk to run every stage in seconds.
pub fn tiny_config(run_name: &str, seed: u64) -> xparadigm::pipeline::RunConfig {
    use xparadigm::attacks::{AttackSpec, Objective};
    use xparadigm::pipeline::{DatasetSource, NamedAttack, RunConfig};
    use xparadigm::probe::ProbeConfig;
    let mut cfg = RunConfig::desk(run_name, seed);
    cfg.dataset = DatasetSource::Planted(PlantedSpec { n_per_class: 30, ..PlantedSpec::desk(0) });
    for j in &mut cfg.distill {
        j.spec.iterations = 5;
    }
    for p in &mut cfg.paradigms {
        p.epochs = 1;
        p.batch_size = 16;
    }
    cfg.probe = ProbeConfig { epochs: 5, ..cfg.probe };
    cfg.attacks = vec![
        NamedAttack { id: "linf-strong".into(), spec: AttackSpec::linf(0.1, 2, Objective::Ce, 0).strong() },
        NamedAttack { id: "linf-pgd".into(), spec: AttackSpec::linf(0.1, 2, Objective::Ce, 0) },
    ];
    cfg.metrics.as_mut().unwrap().samples = 8;
    let t = cfg.transfer.as_mut().unwrap();
    t.samples = 8;
    t.projector.epochs = 1;
    cfg
}
