//! Cross-paradigm transferability: loss trajectories, transfer matrices and
//! the attack-component ablation ladder.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_objective, pgd_observed, strong_attack, AttackAux, AttackModels, AttackSpec, Objective};
use crate::autograd::{Graph, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::optim::{AdamW, Schedule};
use crate::paradigms::augment::sample_params;
use crate::paradigms::contrastive::{infonce_graph, two_views};
use crate::paradigms::{epoch_order, projector_forward, AugmentConfig, Encoder, Projector};
use crate::probe::{accuracy, Classifier, ProbeHead};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTrajectory {
    pub attack_objective: String,
    pub measured_objective: String,
    pub backbone: String,
    /// `steps + 1` values; index 0 is the clean objective.
    pub values: Vec<f64>,
}

impl LossTrajectory {
    /// `(step, value)` rows for external plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,value\n");
        for (i, v) in self.values.iter().enumerate() {
            writeln!(s, "{i},{v:e}").unwrap();
        }
        s
    }

    /// Ratio of the final to the clean value.
    pub fn relative_increase(&self) -> f64 {
        self.values.last().unwrap() / self.values[0]
    }
}

/// Attacks `batch` by maximizing `spec.objective` against `models` and
/// records every objective in `measured` on each iterate.
pub fn loss_trajectory(
    models: &AttackModels,
    backbone: &str,
    measured: &[Objective],
    batch: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<Vec<LossTrajectory>> {
    let measure_seed = rng::derive(spec.seed, "measure");
    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.steps + 1); measured.len()];
    pgd_observed(models, batch, labels, spec, &mut |step, x| {
        let x = if step == 0 { batch } else { x };
        for (m, obj) in measured.iter().enumerate() {
            let aux = AttackAux {
                clean: batch,
                labels,
                temperature: spec.temperature,
                augment_cfg: &spec.augment_cfg,
                eot_k: spec.eot_k,
                seed: measure_seed,
            };
            let (v, _) = attack_objective(models, *obj, x, &aux)?;
            values[m].push(v);
        }
        Ok(())
    })?;
    Ok(measured
        .iter()
        .zip(values)
        .map(|(obj, values)| LossTrajectory {
            attack_objective: spec.objective.id(),
            measured_objective: obj.id(),
            backbone: backbone.to_string(),
            values,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub hidden: usize,
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub augment_cfg: AugmentConfig,
    pub seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { hidden: 32, dim: 16, epochs: 10, batch_size: 128, lr: 3e-3, temperature: 0.5, augment_cfg: AugmentConfig::default(), seed: 0 }
    }
}

/// Trains a two-layer projection head with InfoNCE on top of a frozen encoder.
pub fn retrain_projector(e: &Encoder, d: &LabeledDataset, cfg: &ProjectorConfig) -> Result<Projector> {
    let mut proj = Projector::mlp(e.feature_dim(), cfg.hidden, cfg.dim, rng::derive(cfg.seed, "projector-init"));
    let mut opt = AdamW::new(&proj.params, 0.0);
    let n = d.len();
    let bs = cfg.batch_size.min(n);
    if bs < 2 {
        return Err(Error::InvalidConfig("projector training needs at least 2 images".into()));
    }
    let [_, h, w] = d.shape();
    let total = cfg.epochs * n.div_ceil(bs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_order(n, cfg.seed, epoch).chunks(bs).filter(|b| b.len() >= 2) {
            let s = rng::derive_idx(cfg.seed, "projector-aug", step as u64);
            let a = sample_params(batch.len(), h, w, &cfg.augment_cfg, rng::derive(s, "a"));
            let b = sample_params(batch.len(), h, w, &cfg.augment_cfg, rng::derive(s, "b"));
            let mut g = Graph::new();
            let x = g.constant(d.batch(batch));
            let views = two_views(&mut g, x, &a, &b, false);
            let f = e.forward(&mut g, views);
            let f = g.constant(g.value(f).clone());
            let p: Vec<Var> = proj.params.iter().map(|t| g.param(t.clone())).collect();
            let z = projector_forward(&mut g, &proj.arch, f, &p);
            let loss = infonce_graph(&mut g, z, cfg.temperature)?;
            let lv = g.scalar(loss);
            let mut grads = g.backward(loss);
            let gs: Vec<Tensor> = p.iter().zip(&proj.params).map(|(&v, t)| grads.take(v, t.shape())).collect();
            opt.step(&mut proj.params, &gs, Schedule::Cosine.lr(cfg.lr, step, total));
            step += 1;
            crate::paradigms::check_loss(epoch, lv, &proj.params)?;
        }
    }
    Ok(proj)
}

/// A named classifier taking part in a transfer experiment.
#[derive(Clone, Copy, Debug)]
pub struct TransferModel<'a> {
    pub name: &'a str,
    pub encoder: &'a Encoder,
    pub head: &'a ProbeHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub models: Vec<String>,
    /// `accuracy[a][b]`: accuracy of model `b` on examples crafted against model `a`.
    pub accuracy: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source");
        for m in &self.models {
            write!(s, ",{m}").unwrap();
        }
        s.push('\n');
        for (a, row) in self.models.iter().zip(&self.accuracy) {
            s.push_str(a);
            for v in row {
                write!(s, ",{v:.4}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Whether every diagonal cell is at most every other cell of its row.
    pub fn diagonal_is_row_minimum(&self) -> bool {
        self.accuracy.iter().enumerate().all(|(i, row)| row.iter().all(|&v| row[i] <= v))
    }
}

/// CE attacks against each source's classifier, evaluated on every model.
/// Seeds are keyed by the source encoder id, so adding models leaves existing cells unchanged.
pub fn transfer_matrix(models: &[TransferModel], d: &LabeledDataset, spec: &AttackSpec) -> Result<TransferMatrix> {
    if models.is_empty() {
        return Err(Error::InvalidConfig("transfer matrix needs at least one model".into()));
    }
    let digest = &models[0].head.dataset_digest;
    if let Some(m) = models.iter().find(|m| &m.head.dataset_digest != digest) {
        return Err(Error::Provenance(format!("head of {} was trained on a different dataset", m.name)));
    }
    let x = d.all_images();
    let labels = d.label_vec();
    let mut rows = Vec::with_capacity(models.len());
    for a in models {
        let spec_a = AttackSpec { objective: Objective::Ce, seed: rng::derive(spec.seed, a.encoder.id()), ..spec.clone() };
        let adv = strong_attack(&AttackModels::classifier(a.encoder, a.head), &x, &labels, &spec_a)?;
        let row = models
            .iter()
            .map(|b| Ok(accuracy(&Classifier::new(b.encoder, b.head)?.predict(&adv.adversarial)?, &labels)))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(TransferMatrix { models: models.iter().map(|m| m.name.to_string()).collect(), accuracy: rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub accuracy: f64,
}

/// Attack configurations in table order; `None` is the clean row.
pub fn ablation_configurations() -> Vec<(String, Option<Objective>)> {
    let mut v = vec![("No attack".to_string(), None)];
    for (p, a) in [(true, true), (true, false), (false, true), (false, false)] {
        let o = Objective::InfoNce { projector: p, augmentation: a };
        v.push((o.label(), Some(o)));
    }
    v.push((Objective::AlignOnly.label(), Some(Objective::AlignOnly)));
    v.push((Objective::Ce.label(), Some(Objective::Ce)));
    v
}

/// Classification accuracy on examples crafted against the CL encoder under
/// each contrastive objective variant, bracketed by the clean accuracy and a
/// direct CE attack on the classifier. The classifier is usually the CL
/// encoder with its linear probe.
pub fn ablation_ladder(
    cl: &Encoder,
    sl_encoder: &Encoder,
    sl_head: &ProbeHead,
    d: &LabeledDataset,
    spec: &AttackSpec,
) -> Result<Vec<AblationRow>> {
    if cl.projector().is_none() {
        return Err(Error::MissingComponent("ablation needs a CL encoder with its projector".into()));
    }
    let sl = Classifier::new(sl_encoder, sl_head)?;
    let x = d.all_images();
    let labels = d.label_vec();
    ablation_configurations()
        .into_iter()
        .map(|(name, obj)| {
            let images = match obj {
                None => x.clone(),
                Some(o) => {
                    let s = AttackSpec {
                        objective: o,
                        // the alignment objective has a zero gradient at the clean point
                        random_start: spec.random_start || o == Objective::AlignOnly,
                        seed: rng::derive(spec.seed, &o.id()),
                        ..spec.clone()
                    };
                    let models = if o == Objective::Ce {
                        AttackModels::classifier(sl_encoder, sl_head)
                    } else {
                        AttackModels::encoder(cl)
                    };
                    strong_attack(&models, &x, &labels, &s)?.adversarial
                }
            };
            Ok(AblationRow { configuration: name, accuracy: accuracy(&sl.predict(&images)?, &labels) })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("configuration,accuracy\n");
    for r in rows {
        writeln!(s, "\"{}\",{:.4}", r.configuration, r.accuracy).unwrap();
    }
    s
}
