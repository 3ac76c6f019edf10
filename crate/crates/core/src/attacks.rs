//! Input-space attacks (PGD and a multi-restart momentum variant) and robust accuracy.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::paradigms::augment::{augment_graph, sample_params, AugmentConfig};
use crate::paradigms::contrastive::{infonce_graph, NORM_EPS};
use crate::paradigms::{Encoder, Projector};
use crate::probe::{Classifier, ProbeHead};
use crate::rng;
use crate::tensor::Tensor;

const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Ce,
    InfoNce { projector: bool, augmentation: bool },
    AlignOnly,
}

impl Objective {
    /// The default contrastive attack: projector and augmentation both on.
    pub const INFONCE_DEFAULT: Objective = Objective::InfoNce { projector: true, augmentation: true };

    pub fn id(&self) -> String {
        match self {
            Objective::Ce => "ce".into(),
            Objective::AlignOnly => "align-only".into(),
            Objective::InfoNce { projector, augmentation } => {
                let mut s = String::from("infonce");
                if *projector {
                    s.push_str("+proj");
                }
                if *augmentation {
                    s.push_str("+aug");
                }
                s
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Objective::Ce => "CE".into(),
            Objective::AlignOnly => "AlignOnly".into(),
            Objective::InfoNce { projector: true, augmentation: true } => {
                "InfoNCE loss + Projector + Augmentation (default)".into()
            }
            Objective::InfoNce { projector, augmentation } => {
                let mut s = String::from("InfoNCE loss");
                if *projector {
                    s.push_str(" + Projector");
                }
                if *augmentation {
                    s.push_str(" + Augmentation");
                }
                s
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `epsilon/4` (Linf) or `2.5*epsilon/steps` (L2).
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub step_decay: bool,
    /// Momentum coefficient for restarts after the first; 0 disables it.
    pub momentum: f64,
    /// Uniform random start inside the ball for the first run.
    pub random_start: bool,
    pub objective: Objective,
    /// Forward passes averaged per step for stochastic encoders.
    pub eot_k: usize,
    pub temperature: f64,
    #[serde(default)]
    pub augment_cfg: AugmentConfig,
    pub seed: u64,
}

impl AttackSpec {
    pub fn linf(epsilon: f64, steps: usize, objective: Objective, seed: u64) -> Self {
        Self {
            norm: Norm::Linf,
            epsilon,
            steps,
            step_size: None,
            restarts: 1,
            step_decay: false,
            momentum: 0.0,
            random_start: false,
            objective,
            eot_k: 4,
            temperature: 0.5,
            augment_cfg: AugmentConfig::default(),
            seed,
        }
    }

    pub fn l2(epsilon: f64, steps: usize, objective: Objective, seed: u64) -> Self {
        Self { norm: Norm::L2, ..Self::linf(epsilon, steps, objective, seed) }
    }

    /// Settings of the strong evaluator: 5 restarts, momentum and step decay.
    pub fn strong(mut self) -> Self {
        self.restarts = self.restarts.max(5);
        self.momentum = 0.75;
        self.step_decay = true;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(match self.norm {
            Norm::Linf => self.epsilon / 4.0,
            Norm::L2 => 2.5 * self.epsilon / self.steps.max(1) as f64,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("attack epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidConfig("attack restarts must be >= 1".into()));
        }
        if self.eot_k < 1 {
            return Err(Error::InvalidConfig("eot_k must be >= 1".into()));
        }
        if !(self.alpha() >= 0.0) {
            return Err(Error::InvalidConfig("step size must be >= 0".into()));
        }
        if let Objective::InfoNce { .. } = self.objective {
            if !(self.temperature > 0.0) {
                return Err(Error::InvalidConfig("InfoNCE temperature must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Models available to an attack objective.
#[derive(Clone, Copy, Debug)]
pub struct AttackModels<'a> {
    pub encoder: &'a Encoder,
    pub head: Option<&'a ProbeHead>,
    /// Overrides the encoder's own projector (e.g. one re-trained on a frozen SL encoder).
    pub projector: Option<&'a Projector>,
}

impl<'a> AttackModels<'a> {
    pub fn encoder(encoder: &'a Encoder) -> Self {
        Self { encoder, head: None, projector: None }
    }

    pub fn classifier(encoder: &'a Encoder, head: &'a ProbeHead) -> Self {
        Self { encoder, head: Some(head), projector: None }
    }

    pub fn with_projector(mut self, projector: &'a Projector) -> Self {
        self.projector = Some(projector);
        self
    }

    fn resolved_projector(&self) -> Option<&'a Projector> {
        self.projector.or_else(|| self.encoder.projector())
    }

    fn check(&self, objective: Objective) -> Result<()> {
        match objective {
            Objective::Ce if self.head.is_none() => Err(Error::MissingComponent("CE objective needs a probe head".into())),
            Objective::InfoNce { projector: true, .. } if self.resolved_projector().is_none() => {
                Err(Error::MissingComponent("InfoNCE with projector needs a projection head".into()))
            }
            _ => {
                if let Some(h) = self.head {
                    Classifier::new(self.encoder, h)?;
                }
                Ok(())
            }
        }
    }

    /// Noise seeds for one objective evaluation; draw 0 is the encoder's own.
    fn noise_seeds(&self, eot_k: usize, seed: u64) -> Vec<Option<u64>> {
        match self.encoder.diffusion() {
            None => vec![None],
            Some(tap) => (0..eot_k)
                .map(|k| Some(if k == 0 { tap.noise_seed } else { rng::derive_idx(seed, "eot", k as u64) }))
                .collect(),
        }
    }

    fn features(&self, g: &mut Graph, x: Var, noise: Option<u64>) -> Var {
        match noise {
            Some(s) => self.encoder.forward_with_noise(g, x, s),
            None => self.encoder.forward(g, x),
        }
    }
}

/// Clean inputs, labels and settings an objective is evaluated against.
#[derive(Clone, Copy, Debug)]
pub struct AttackAux<'a> {
    pub clean: &'a Tensor,
    pub labels: &'a [usize],
    pub temperature: f64,
    pub augment_cfg: &'a AugmentConfig,
    pub eot_k: usize,
    /// Seeds the augmentation and noise draws of this evaluation.
    pub seed: u64,
}

/// Objective value (batch mean) and its gradient with respect to `x`.
pub fn attack_objective(models: &AttackModels, objective: Objective, x: &Tensor, aux: &AttackAux) -> Result<(f64, Tensor)> {
    models.check(objective)?;
    let (per, grad) = objective_grad(models, objective, x, aux)?;
    Ok((per.iter().sum::<f64>() / per.len().max(1) as f64, grad))
}

/// Per-sample objective values and the gradient of their mean.
fn objective_grad(models: &AttackModels, objective: Objective, x: &Tensor, aux: &AttackAux) -> Result<(Vec<f64>, Tensor)> {
    let n = x.dim0();
    let seeds = models.noise_seeds(aux.eot_k, aux.seed);
    let k = seeds.len() as f64;
    let mut per = vec![0.0; n];
    let mut grad = Tensor::zeros(x.shape());
    for noise in seeds {
        let (p, gr) = match objective {
            Objective::Ce | Objective::AlignOnly => per_sample_grad(models, objective, x, aux, noise),
            Objective::InfoNce { projector, augmentation } => infonce_grad(models, projector, augmentation, x, aux, noise)?,
        };
        for (a, b) in per.iter_mut().zip(&p) {
            *a += b / k;
        }
        grad.add_scaled(&gr, 1.0 / k);
    }
    if !grad.all_finite() || per.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} attack objective", objective.id())));
    }
    Ok((per, grad))
}

fn per_sample_grad(models: &AttackModels, objective: Objective, x: &Tensor, aux: &AttackAux, noise: Option<u64>) -> (Vec<f64>, Tensor) {
    let n = x.dim0();
    let idx: Vec<usize> = (0..n).collect();
    let parts: Vec<(Vec<f64>, Tensor)> = idx
        .par_chunks(CHUNK)
        .map(|c| {
            let mut g = Graph::new();
            let xv = g.param(x.select_rows(c));
            let fx = models.features(&mut g, xv, noise);
            let (rows, total) = match objective {
                Objective::Ce => {
                    let logits = models.head.expect("checked").logits(&mut g, fx);
                    let t: Vec<usize> = c.iter().map(|&i| aux.labels[i]).collect();
                    let rows = row_cross_entropy(g.value(logits), &t);
                    (rows, g.cross_entropy(logits, &t, false, false))
                }
                _ => {
                    let r = g.constant(aux.clean.select_rows(c));
                    let fr = models.features(&mut g, r, noise);
                    let diff = g.sub(fx, fr);
                    let sq = g.mul(diff, diff);
                    let v = g.value(sq);
                    let rows = (0..c.len()).map(|i| v.row(i).iter().sum()).collect();
                    (rows, g.sum(sq))
                }
            };
            let total = g.scale(total, 1.0 / n as f64);
            let gr = g.backward(total).get(xv).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(xv)));
            (rows, gr)
        })
        .collect();
    let per = parts.iter().flat_map(|(r, _)| r.iter().copied()).collect();
    let grads: Vec<&Tensor> = parts.iter().map(|(_, g)| g).collect();
    (per, Tensor::stack_rows(&grads))
}

fn infonce_grad(
    models: &AttackModels,
    use_projector: bool,
    augmentation: bool,
    x: &Tensor,
    aux: &AttackAux,
    noise: Option<u64>,
) -> Result<(Vec<f64>, Tensor)> {
    let n = x.dim0();
    let s = x.shape();
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let rv = g.constant(aux.clean.clone());
    let (xa, ra) = if augmentation {
        let pa = sample_params(n, s[2], s[3], aux.augment_cfg, rng::derive(aux.seed, "view-a"));
        let pb = sample_params(n, s[2], s[3], aux.augment_cfg, rng::derive(aux.seed, "view-b"));
        (augment_graph(&mut g, xv, &pa, true), augment_graph(&mut g, rv, &pb, true))
    } else {
        (xv, rv)
    };
    let both = g.concat(&[xa, ra], 0);
    let mut z = models.features(&mut g, both, noise);
    if use_projector {
        z = models.resolved_projector().expect("checked").forward(&mut g, z);
    }
    let loss = infonce_graph(&mut g, z, aux.temperature)?;
    let rows = infonce_rows(g.value(z), aux.temperature);
    let gr = g.backward(loss).get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((rows, gr))
}

/// Per-sample InfoNCE values: the mean of the two anchor terms of each
/// positive pair, so their batch mean is the full symmetric loss.
fn infonce_rows(z: &Tensor, tau: f64) -> Vec<f64> {
    let m = z.dim0();
    let b = m / 2;
    let norm: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let r = z.row(i);
            let s = (r.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            r.iter().map(|v| v / s).collect()
        })
        .collect();
    let term = |i: usize| {
        let sims: Vec<f64> = (0..m).map(|j| norm[i].iter().zip(&norm[j]).map(|(a, c)| a * c).sum::<f64>() / tau).collect();
        let mx = sims.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sims.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| (v - mx).exp()).sum();
        mx + z.ln() - sims[(i + b) % m]
    };
    (0..b).map(|i| 0.5 * (term(i) + term(i + b))).collect()
}

fn row_cross_entropy(logits: &Tensor, targets: &[usize]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let r = logits.row(i);
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - r[t]
        })
        .collect()
}

/// Projects `delta` onto the `norm` ball of radius `epsilon`; rows are
/// independent samples when `delta` has a leading batch axis.
pub fn project(delta: &Tensor, norm: Norm, epsilon: f64) -> Tensor {
    let mut out = delta.clone();
    project_in_place(&mut out, norm, epsilon);
    out
}

fn project_in_place(delta: &mut Tensor, norm: Norm, epsilon: f64) {
    let per = if delta.shape().len() > 1 { delta.row_len() } else { delta.len() };
    match norm {
        Norm::Linf => {
            for v in delta.data_mut() {
                *v = v.clamp(-epsilon, epsilon);
            }
        }
        Norm::L2 => {
            for row in delta.data_mut().chunks_mut(per.max(1)) {
                let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm > epsilon {
                    let s = epsilon / nrm;
                    for v in row.iter_mut() {
                        *v *= s;
                    }
                    // rounding can leave the scaled norm a hair above epsilon
                    while row.iter().map(|v| v * v).sum::<f64>().sqrt() > epsilon {
                        for v in row.iter_mut() {
                            *v *= 1.0 - f64::EPSILON;
                        }
                    }
                }
            }
        }
    }
}

/// Per-sample norm of `delta`.
pub fn norms(delta: &Tensor, norm: Norm) -> Vec<f64> {
    (0..delta.dim0())
        .map(|i| {
            let r = delta.row(i);
            match norm {
                Norm::Linf => r.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                Norm::L2 => r.iter().map(|v| v * v).sum::<f64>().sqrt(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvBatch {
    pub original: Tensor,
    pub adversarial: Tensor,
    /// Misclassification after the attack; all false when no head is attached.
    pub success: Vec<bool>,
    pub final_objective: Vec<f64>,
    /// Mean objective per step of the first run; index 0 is the starting point.
    pub trace: Vec<f64>,
}

impl AdvBatch {
    pub fn robust_accuracy(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|s| !**s).count() as f64 / self.success.len() as f64
    }
}

struct RunOpts {
    restart: usize,
    random_start: bool,
    momentum: f64,
    decay: bool,
    keep_best: bool,
}

fn random_start(x: &Tensor, norm: Norm, epsilon: f64, seed: u64) -> Tensor {
    let per = x.row_len();
    let mut out = Tensor::zeros(x.shape());
    for (i, row) in out.data_mut().chunks_mut(per).enumerate() {
        let mut r = rng::rng(rng::derive_idx(seed, "start", i as u64));
        match norm {
            Norm::Linf => row.iter_mut().for_each(|v| *v = r.gen_range(-1.0..=1.0) * epsilon),
            Norm::L2 => {
                row.iter_mut().for_each(|v| *v = r.sample(StandardNormal));
                let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                let radius = epsilon * r.gen::<f64>().powf(1.0 / per as f64);
                row.iter_mut().for_each(|v| *v *= radius / nrm);
            }
        }
    }
    project_in_place(&mut out, norm, epsilon);
    out
}

fn clip_to_box(x0: &Tensor, delta: &Tensor) -> Tensor {
    Tensor::new(x0.shape().to_vec(), x0.data().iter().zip(delta.data()).map(|(a, d)| (a + d).clamp(0.0, 1.0)).collect())
}

fn misclassified(models: &AttackModels, x: &Tensor, labels: &[usize]) -> Result<Vec<bool>> {
    match models.head {
        None => Ok(vec![false; x.dim0()]),
        Some(h) => {
            let p = Classifier::new(models.encoder, h)?.predict(x)?;
            Ok(p.iter().zip(labels).map(|(a, b)| a != b).collect())
        }
    }
}

/// One projected ascent run. `observe` sees the iterate after every step (and the start).
fn run(
    models: &AttackModels,
    x0: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    opts: RunOpts,
    observe: &mut dyn FnMut(usize, &Tensor) -> Result<()>,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let n = x0.dim0();
    let per = x0.row_len();
    let run_seed = rng::derive_idx(spec.seed, "restart", opts.restart as u64);
    let mut delta = if opts.random_start && spec.epsilon > 0.0 {
        random_start(x0, spec.norm, spec.epsilon, run_seed)
    } else {
        Tensor::zeros(x0.shape())
    };
    let mut x = clip_to_box(x0, &delta);
    let aux_for = |step: usize| AttackAux {
        clean: x0,
        labels,
        temperature: spec.temperature,
        augment_cfg: &spec.augment_cfg,
        eot_k: spec.eot_k,
        seed: rng::derive_idx(run_seed, "step", step as u64),
    };
    let mut trace = Vec::with_capacity(spec.steps + 1);
    let mut mom = Tensor::zeros(x0.shape());
    let mut best_x = x.clone();
    let mut best_val = vec![f64::NEG_INFINITY; n];
    let mut best_fooled = vec![false; n];
    let mut last_vals = vec![0.0; n];
    observe(0, &x)?;
    for step in 0..=spec.steps {
        let (vals, grad) = objective_grad(models, spec.objective, &x, &aux_for(step))?;
        trace.push(vals.iter().sum::<f64>() / n.max(1) as f64);
        last_vals.clone_from(&vals);
        if opts.keep_best {
            let fooled = misclassified(models, &x, labels)?;
            for i in 0..n {
                let better = (fooled[i] && !best_fooled[i]) || (fooled[i] == best_fooled[i] && vals[i] > best_val[i]);
                if better {
                    best_val[i] = vals[i];
                    best_fooled[i] = fooled[i];
                    best_x.data_mut()[i * per..(i + 1) * per].copy_from_slice(x.row(i));
                }
            }
        }
        if step == spec.steps {
            break;
        }
        let mut alpha = spec.alpha();
        if opts.decay {
            let t = step as f64 / spec.steps as f64;
            alpha *= if t >= 0.75 { 0.25 } else if t >= 0.5 { 0.5 } else { 1.0 };
        }
        let mut dir = grad;
        if opts.momentum > 0.0 {
            for i in 0..n {
                let g = &dir.data()[i * per..(i + 1) * per];
                let l1 = g.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
                let m = &mut mom.data_mut()[i * per..(i + 1) * per];
                for (mv, gv) in m.iter_mut().zip(g) {
                    *mv = opts.momentum * *mv + gv / l1;
                }
            }
            dir = mom.clone();
        }
        for i in 0..n {
            let d = &dir.data()[i * per..(i + 1) * per];
            let l2 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let xr = &mut x.data_mut()[i * per..(i + 1) * per];
            for (xv, dv) in xr.iter_mut().zip(d) {
                *xv += match spec.norm {
                    Norm::Linf => alpha * sign(*dv),
                    Norm::L2 if l2 > 0.0 => alpha * dv / l2,
                    Norm::L2 => 0.0,
                };
            }
        }
        delta = Tensor::new(x.shape().to_vec(), x.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect());
        project_in_place(&mut delta, spec.norm, spec.epsilon);
        x = clip_to_box(x0, &delta);
        observe(step + 1, &x)?;
    }
    if opts.keep_best {
        Ok((best_x, best_val, trace))
    } else {
        Ok((x, last_vals, trace))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn prepare(models: &AttackModels, batch: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<()> {
    spec.validate()?;
    models.check(spec.objective)?;
    models.encoder.check_input(batch.shape())?;
    if labels.len() != batch.dim0() {
        return Err(Error::ShapeMismatch {
            context: "attack labels".into(),
            expected: batch.dim0().to_string(),
            found: labels.len().to_string(),
        });
    }
    if let Objective::InfoNce { .. } = spec.objective {
        if batch.dim0() < 2 {
            return Err(Error::InvalidConfig("InfoNCE attacks need at least 2 images".into()));
        }
    }
    Ok(())
}

/// Plain PGD: sign steps (Linf) or normalized steps (L2), projection and unit-box clip each step.
pub fn pgd_attack(models: &AttackModels, batch: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<AdvBatch> {
    pgd_observed(models, batch, labels, spec, &mut |_, _| Ok(()))
}

/// [`pgd_attack`] with a callback on every iterate.
pub fn pgd_observed(
    models: &AttackModels,
    batch: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    observe: &mut dyn FnMut(usize, &Tensor) -> Result<()>,
) -> Result<AdvBatch> {
    prepare(models, batch, labels, spec)?;
    let opts = RunOpts { restart: 0, random_start: spec.random_start, momentum: 0.0, decay: false, keep_best: false };
    let (adv, vals, trace) = run(models, batch, labels, spec, opts, observe)?;
    let success = misclassified(models, &adv, labels)?;
    Ok(AdvBatch { original: batch.clone(), adversarial: adv, success, final_objective: vals, trace })
}

/// PGD (restart 0) plus `restarts - 1` randomly started momentum / step-decay
/// runs; each sample keeps its best candidate (fooled first, then highest objective).
pub fn strong_attack(models: &AttackModels, batch: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<AdvBatch> {
    let mut best = pgd_attack(models, batch, labels, spec)?;
    let per = batch.row_len();
    for r in 1..spec.restarts {
        let opts = RunOpts { restart: r, random_start: true, momentum: spec.momentum, decay: spec.step_decay, keep_best: true };
        let (adv, vals, _) = run(models, batch, labels, spec, opts, &mut |_, _| Ok(()))?;
        let fooled = misclassified(models, &adv, labels)?;
        for i in 0..batch.dim0() {
            let better = (fooled[i] && !best.success[i])
                || (fooled[i] == best.success[i] && vals[i] > best.final_objective[i]);
            if better {
                best.success[i] = fooled[i];
                best.final_objective[i] = vals[i];
                best.adversarial.data_mut()[i * per..(i + 1) * per].copy_from_slice(adv.row(i));
            }
        }
    }
    Ok(best)
}

/// Fraction of `d` still classified correctly after [`strong_attack`] with a CE objective.
pub fn robust_accuracy(e: &Encoder, p: &ProbeHead, d: &LabeledDataset, spec: &AttackSpec) -> Result<f64> {
    let spec = AttackSpec { objective: Objective::Ce, ..spec.clone() };
    let models = AttackModels::classifier(e, p);
    let adv = strong_attack(&models, &d.all_images(), &d.label_vec(), &spec)?;
    Ok(adv.robust_accuracy())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let d = Tensor::new(vec![2], vec![0.3, -0.1]);
        assert_eq!(project(&d, Norm::Linf, 0.2).data(), &[0.2, -0.1]);
        let d = Tensor::new(vec![2], vec![3.0, 4.0]);
        let p = project(&d, Norm::L2, 0.5);
        assert!((p.data()[0] - 0.3).abs() < 1e-12 && (p.data()[1] - 0.4).abs() < 1e-12);
        assert_eq!(project(&p, Norm::L2, 0.5), p);
    }

    #[test]
    fn objective_ids() {
        assert_eq!(Objective::INFONCE_DEFAULT.id(), "infonce+proj+aug");
        assert_eq!(Objective::INFONCE_DEFAULT.label(), "InfoNCE loss + Projector + Augmentation (default)");
    }
}
