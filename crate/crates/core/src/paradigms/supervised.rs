//! Supervised cross-entropy training of an encoder and its linear head.

use crate::autograd::{Graph, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, ParamSpec};
use crate::optim::AdamW;
use crate::probe::{accuracy, ProbeHead};
use crate::rng;

use super::augment::{augment_graph, sample_params};
use super::{check_dataset, check_loss, chunked_grads, epoch_order, features_forward, split, Encoder, Paradigm, ParadigmConfig, TrainReport};

pub(crate) const CHUNK: usize = 16;

/// Trains `encoder + linear head` on cross-entropy. The encoder is the network
/// up to the penultimate layer and the head is the final linear layer.
pub fn train_supervised(d: &LabeledDataset, cfg: &ParadigmConfig) -> Result<(Encoder, ProbeHead, TrainReport)> {
    if cfg.paradigm() != Paradigm::Sl {
        return Err(Error::InvalidConfig(format!("train_supervised called with a {} config", cfg.paradigm())));
    }
    cfg.validate()?;
    check_dataset(d, &cfg.arch)?;
    let k = d.num_classes();
    let fdim = cfg.arch.feature_dim();
    let n_enc = cfg.arch.param_specs().len();
    let mut params = cfg.arch.init(rng::derive(cfg.seed, "sl-init"));
    params.extend(nn::init_params(
        &[
            ParamSpec { name: "head.w".into(), shape: vec![fdim, k], fan_in: fdim, init_scale: None },
            ParamSpec { name: "head.b".into(), shape: vec![k], fan_in: fdim, init_scale: None },
        ],
        rng::derive(cfg.seed, "sl-head"),
    ));
    let labels = d.label_vec();
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let n = d.len();
    let bs = cfg.batch_size.min(n);
    let total = cfg.epochs * n.div_ceil(bs);
    let [_, h, w] = d.shape();
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(bs) {
            let aug = cfg.augment.then(|| {
                sample_params(batch.len(), h, w, &cfg.augment_cfg, rng::derive_idx(cfg.seed, "sl-aug", step as u64))
            });
            let pos: Vec<usize> = (0..batch.len()).collect();
            let chunks = split(&pos, CHUNK);
            let bl = batch.len() as f64;
            let (loss, grads) = chunked_grads(&params, &chunks, |g, p, c| {
                let idx: Vec<usize> = c.iter().map(|&i| batch[i]).collect();
                let mut x = g.constant(d.batch(&idx));
                if let Some(a) = &aug {
                    let ap: Vec<_> = c.iter().map(|&i| a[i]).collect();
                    x = augment_graph(g, x, &ap, false);
                }
                let logits = sl_logits(g, &cfg.arch, x, p, n_enc);
                let t: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let l = g.cross_entropy(logits, &t, false, false);
                g.scale(l, 1.0 / bl)
            });
            opt.step(&mut params, &grads, cfg.schedule.lr(cfg.lr, step, total));
            step += 1;
            check_loss(epoch, loss, &params)?;
            epoch_loss += loss * bl;
        }
        report.epoch_losses.push(epoch_loss / n as f64);
    }
    let head_params = params.split_off(n_enc);
    let encoder = Encoder::new(Paradigm::Sl, cfg.arch.clone(), params, d.shape(), cfg.digest(), None, None)?;
    let mut it = head_params.into_iter();
    let head = ProbeHead::new(it.next().unwrap(), it.next().unwrap(), d.digest(), encoder.id())?;
    let feats = encoder.extract_dataset(d)?;
    report.final_train_accuracy = Some(accuracy(&head.predict(&feats), &labels));
    Ok((encoder, head, report))
}

fn sl_logits(g: &mut Graph, arch: &nn::Arch, x: Var, p: &[Var], n_enc: usize) -> Var {
    let f = features_forward(g, arch, x, &p[..n_enc], None, None);
    nn::linear(g, f, p[n_enc], p[n_enc + 1])
}
