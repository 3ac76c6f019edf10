//! Linear probing heads over frozen encoders.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn;
use crate::optim::{Schedule, Sgd};
use crate::paradigms::{epoch_order, Encoder};
use crate::rng;
use crate::tensor::Tensor;

/// Linear classifier `logits = f @ weight + bias` over encoder features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub weight: Tensor,
    pub bias: Tensor,
    pub dataset_digest: String,
    pub encoder_id: String,
}

impl ProbeHead {
    pub fn new(weight: Tensor, bias: Tensor, dataset_digest: impl Into<String>, encoder_id: impl Into<String>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(Error::ShapeMismatch {
                context: "probe head".into(),
                expected: "weight [d,K] with bias [K]".into(),
                found: format!("{:?} and {:?}", s, bias.shape()),
            });
        }
        Ok(Self { weight, bias, dataset_digest: dataset_digest.into(), encoder_id: encoder_id.into() })
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn logits(&self, g: &mut Graph, feats: Var) -> Var {
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        nn::linear(g, feats, w, b)
    }

    pub fn predict(&self, feats: &Tensor) -> Vec<usize> {
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let l = self.logits(&mut g, f);
        g.value(l).argmax_rows()
    }

    fn check(&self, e: &Encoder) -> Result<()> {
        if self.feature_dim() != e.feature_dim() {
            return Err(Error::ShapeMismatch {
                context: format!("probe head for encoder {}", e.id()),
                expected: e.feature_dim().to_string(),
                found: self.feature_dim().to_string(),
            });
        }
        Ok(())
    }
}

/// An encoder paired with a head.
#[derive(Clone, Copy, Debug)]
pub struct Classifier<'a> {
    pub encoder: &'a Encoder,
    pub head: &'a ProbeHead,
}

impl<'a> Classifier<'a> {
    pub fn new(encoder: &'a Encoder, head: &'a ProbeHead) -> Result<Self> {
        head.check(encoder)?;
        Ok(Self { encoder, head })
    }

    pub fn logits(&self, g: &mut Graph, x: Var) -> Var {
        let f = self.encoder.forward(g, x);
        self.head.logits(g, f)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let f = self.encoder.extract_features(batch)?;
        Ok(self.head.predict(&f))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Independent restarts; the head with the best training accuracy is kept.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 128, lr: 0.1, momentum: 0.9, weight_decay: 0.0, restarts: 1, seed: 0 }
    }
}

/// Multinomial logistic regression on frozen features of `d`.
///
/// Features are standardized for optimization and the scaling is folded back
/// into the returned head, which therefore acts on raw features.
pub fn train_probe(e: &Encoder, d: &LabeledDataset, cfg: &ProbeConfig) -> Result<ProbeHead> {
    let feats = e.extract_dataset(d)?;
    if feats.row_len() != e.feature_dim() {
        return Err(Error::ShapeMismatch {
            context: "probe features".into(),
            expected: e.feature_dim().to_string(),
            found: feats.row_len().to_string(),
        });
    }
    let (w, b) = fit_linear(&feats, &d.label_vec(), d.num_classes(), cfg)?;
    ProbeHead::new(w, b, d.digest(), e.id())
}

/// Fits a linear softmax classifier to `feats: [N,d]`; returns raw-space `(weight, bias)`.
pub fn fit_linear(feats: &Tensor, labels: &[usize], k: usize, cfg: &ProbeConfig) -> Result<(Tensor, Tensor)> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("probing needs at least 2 classes, got {k}")));
    }
    let (n, dim) = (feats.dim0(), feats.row_len());
    if n == 0 || labels.len() != n {
        return Err(Error::InvalidConfig("probe needs a non-empty labelled feature set".into()));
    }
    let fd = feats.data();
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for i in 0..n {
        for j in 0..dim {
            mean[j] += fd[i * dim + j] / n as f64;
        }
    }
    for i in 0..n {
        for j in 0..dim {
            std[j] += (fd[i * dim + j] - mean[j]).powi(2) / n as f64;
        }
    }
    for s in &mut std {
        *s = if s.sqrt() < 1e-12 { 1.0 } else { s.sqrt() };
    }
    let z = Tensor::from_fn(&[n, dim], |i| (fd[i] - mean[i % dim]) / std[i % dim]);

    let mut best: Option<(usize, Vec<Tensor>)> = None;
    for r in 0..cfg.restarts.max(1) {
        let params = fit_standardized(&z, labels, k, cfg, r)?;
        let correct = {
            let mut g = Graph::new();
            let x = g.constant(z.clone());
            let w = g.constant(params[0].clone());
            let b = g.constant(params[1].clone());
            let l = nn::linear(&mut g, x, w, b);
            g.value(l).argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count()
        };
        if best.as_ref().map_or(true, |(c, _)| correct > *c) {
            best = Some((correct, params));
        }
    }
    let params = best.expect("at least one restart").1;
    let (ws, bs) = (&params[0], &params[1]);
    let w = Tensor::from_fn(&[dim, k], |i| ws.data()[i] / std[i / k]);
    let b = Tensor::from_fn(&[k], |c| {
        bs.data()[c] - (0..dim).map(|j| ws.data()[j * k + c] * mean[j] / std[j]).sum::<f64>()
    });
    Ok((w, b))
}

/// Restart 0 starts from the zero head; later restarts from a random one.
fn fit_standardized(z: &Tensor, labels: &[usize], k: usize, cfg: &ProbeConfig, restart: usize) -> Result<Vec<Tensor>> {
    let (n, dim) = (z.dim0(), z.row_len());
    let seed = rng::derive_idx(cfg.seed, "probe-restart", restart as u64);
    let mut params = vec![Tensor::zeros(&[dim, k]), Tensor::zeros(&[k])];
    if restart > 0 {
        params = nn::init_params(
            &[nn::ParamSpec { name: "probe.w".into(), shape: vec![dim, k], fan_in: dim, init_scale: None }],
            seed,
        );
        params.push(Tensor::zeros(&[k]));
    }
    let mut opt = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
    let bs = cfg.batch_size.max(1).min(n);
    let steps_per = n.div_ceil(bs);
    let total = cfg.epochs * steps_per;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, seed, epoch);
        for batch in order.chunks(bs) {
            let mut g = Graph::new();
            let x = g.constant(z.select_rows(batch));
            let w = g.param(params[0].clone());
            let b = g.param(params[1].clone());
            let l = nn::linear(&mut g, x, w, b);
            let t: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = g.cross_entropy(l, &t, false, true);
            let lv = g.scalar(loss);
            let mut grads = g.backward(loss);
            let gs = vec![grads.take(w, &[dim, k]), grads.take(b, &[k])];
            opt.step(&mut params, &gs, Schedule::Cosine.lr(cfg.lr, step, total));
            step += 1;
            crate::paradigms::check_loss(epoch, lv, &params)?;
        }
    }
    Ok(params)
}

/// Fraction of `d` classified correctly by `head` over `e`.
pub fn evaluate_accuracy(e: &Encoder, head: &ProbeHead, d: &LabeledDataset) -> Result<f64> {
    let c = Classifier::new(e, head)?;
    if head.num_classes() != d.num_classes() {
        return Err(Error::ShapeMismatch {
            context: "probe classes".into(),
            expected: d.num_classes().to_string(),
            found: head.num_classes().to_string(),
        });
    }
    let preds = c.predict(&d.all_images())?;
    Ok(accuracy(&preds, &d.label_vec()))
}

/// Mean of `pred == label`; 0 for empty input.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_fixture_accuracy() {
        assert_eq!(accuracy(&[0, 1, 1, 0, 0], &[0, 1, 0, 0, 1]), 0.6);
    }

    #[test]
    fn separable_features_are_fit() {
        let feats = Tensor::from_fn(&[40, 2], |i| if i % 2 == 0 { ((i / 2) % 2) as f64 * 2.0 - 1.0 } else { 0.3 });
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let (w, b) = fit_linear(&feats, &labels, 2, &ProbeConfig::default()).unwrap();
        let head = ProbeHead::new(w, b, "", "").unwrap();
        assert_eq!(head.predict(&feats), labels);
    }
}
