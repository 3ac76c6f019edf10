//! SimCLR-style contrastive training with an InfoNCE objective.

use crate::autograd::{Graph, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::rng;
use crate::tensor::Tensor;

use super::augment::{augment_graph, sample_params, AugmentParams};
use super::{
    check_dataset, check_loss, epoch_order, features_forward, projector_forward, Encoder, Paradigm, ParadigmConfig,
    ParadigmSettings, Projector, TrainReport,
};

pub(crate) const NORM_EPS: f64 = 1e-12;

fn check_args(rows: usize, tau: f64) -> Result<usize> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("InfoNCE temperature must be positive, got {tau}")));
    }
    if rows % 2 != 0 || rows < 4 {
        return Err(Error::InvalidConfig(format!("InfoNCE needs 2B rows with B >= 2, got {rows}")));
    }
    Ok(rows / 2)
}

/// InfoNCE over `z: [2B, dim]` where row `i` and row `i+B` are positives.
/// Rows are L2-normalized; each anchor's softmax runs over the other `2B-1` rows.
pub fn infonce_graph(g: &mut Graph, z: Var, tau: f64) -> Result<Var> {
    let b = check_args(g.shape(z)[0], tau)?;
    let zn = g.row_normalize(z, NORM_EPS);
    let zt = g.transpose(zn);
    let sim = g.matmul(zn, zt);
    let sim = g.scale(sim, 1.0 / tau);
    let targets: Vec<usize> = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
    Ok(g.cross_entropy(sim, &targets, true, true))
}

pub fn infonce_loss(z: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(z.clone());
    let l = infonce_graph(&mut g, v, tau)?;
    Ok(g.scalar(l))
}

/// Views of `x` under two independent augmentation draws, stacked `[2B, ...]`.
pub(crate) fn two_views(g: &mut Graph, x: Var, a: &[AugmentParams], b: &[AugmentParams], bilinear: bool) -> Var {
    let v1 = augment_graph(g, x, a, bilinear);
    let v2 = augment_graph(g, x, b, bilinear);
    g.concat(&[v1, v2], 0)
}

/// Trains encoder and projector on InfoNCE between two augmented views.
pub fn train_contrastive(d: &LabeledDataset, cfg: &ParadigmConfig) -> Result<(Encoder, TrainReport)> {
    let ParadigmSettings::Contrastive { temperature, projector_hidden, projector_dim } = cfg.settings else {
        return Err(Error::InvalidConfig(format!("train_contrastive called with a {} config", cfg.paradigm())));
    };
    cfg.validate()?;
    check_dataset(d, &cfg.arch)?;
    let n = d.len();
    let bs = cfg.batch_size.min(n);
    if bs < 2 {
        return Err(Error::InvalidConfig("contrastive training needs at least 2 images".into()));
    }
    let proj = Projector::mlp(cfg.arch.feature_dim(), projector_hidden, projector_dim, rng::derive(cfg.seed, "cl-proj"));
    let n_enc = cfg.arch.param_specs().len();
    let mut params = cfg.arch.init(rng::derive(cfg.seed, "cl-init"));
    params.extend(proj.params.iter().cloned());
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let [_, h, w] = d.shape();
    // the last partial batch is dropped when it would leave a single image
    let batches_per = if n % bs == 1 { n / bs } else { n.div_ceil(bs) };
    let total = cfg.epochs * batches_per;
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(bs).filter(|b| b.len() >= 2) {
            let m = batch.len();
            let (a, b) = if cfg.augment {
                let s = rng::derive_idx(cfg.seed, "cl-aug", step as u64);
                (
                    sample_params(m, h, w, &cfg.augment_cfg, rng::derive(s, "a")),
                    sample_params(m, h, w, &cfg.augment_cfg, rng::derive(s, "b")),
                )
            } else {
                (vec![AugmentParams::identity(h, w); m], vec![AugmentParams::identity(h, w); m])
            };
            let mut g = Graph::new();
            let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
            let x = g.constant(d.batch(batch));
            let views = two_views(&mut g, x, &a, &b, false);
            let f = features_forward(&mut g, &cfg.arch, views, &p[..n_enc], None, None);
            let z = projector_forward(&mut g, &proj.arch, f, &p[n_enc..]);
            let loss = infonce_graph(&mut g, z, temperature)?;
            let lv = g.scalar(loss);
            let mut grads = g.backward(loss);
            let gs: Vec<Tensor> = p.iter().zip(&params).map(|(&v, t)| grads.take(v, t.shape())).collect();
            opt.step(&mut params, &gs, cfg.schedule.lr(cfg.lr, step, total));
            step += 1;
            check_loss(epoch, lv, &params)?;
            sum += lv * m as f64;
            count += m;
        }
        report.epoch_losses.push(sum / count.max(1) as f64);
    }
    let proj_params = params.split_off(n_enc);
    let projector = Projector { arch: proj.arch, params: proj_params };
    let e = Encoder::new(Paradigm::Cl, cfg.arch.clone(), params, d.shape(), cfg.digest(), Some(projector), None)?;
    Ok((e, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(z: &Tensor, tau: f64) -> f64 {
        let n = z.dim0();
        let b = n / 2;
        let norm: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let r = z.row(i);
                let s = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let dot = |i: usize, j: usize| norm[i].iter().zip(&norm[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
        let mut total = 0.0;
        for i in 0..n {
            let pos = (i + b) % n;
            let denom: f64 = (0..n).filter(|&j| j != i).map(|j| dot(i, j).exp()).sum();
            total += -(dot(i, pos).exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn identical_features_give_log_three() {
        let z = Tensor::full(&[4, 3], 0.7);
        assert!((infonce_loss(&z, 0.5).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_double_loop() {
        let z = Tensor::from_fn(&[8, 5], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
        assert!((infonce_loss(&z, 0.3).unwrap() - naive(&z, 0.3)).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(infonce_loss(&Tensor::zeros(&[4, 2]), 0.0).is_err());
        assert!(infonce_loss(&Tensor::full(&[2, 2], 1.0), 0.5).is_err());
    }
}
