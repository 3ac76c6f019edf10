//! Robust and non-robust dataset construction by input-space optimization.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{project, Norm};
use crate::autograd::Graph;
use crate::data::{DatasetKind, LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::paradigms::Encoder;
use crate::probe::{Classifier, ProbeHead};
use crate::rng;
use crate::tensor::Tensor;

const CHUNK: usize = 16;
const MAX_HALVINGS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    Robust,
    NonRobust,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillInit {
    /// A random image of a different class.
    FromImage,
    /// A random image other than the source, of any class.
    FromAnyImage,
    /// Clipped Gaussian noise around mid-gray.
    FromNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRule {
    /// `t = (y + 1) mod K`.
    NextClass,
    /// Uniform over the classes other than `y`.
    RandomClass,
    /// Uniform over all `K` classes, so `t = y` is possible.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSpec {
    pub mode: DistillMode,
    pub init: DistillInit,
    pub iterations: usize,
    pub step_size: f64,
    /// L2 radius around the initial image; `None` is unbounded.
    pub epsilon: Option<f64>,
    pub norm: Norm,
    pub target_rule: TargetRule,
    pub seed: u64,
}

impl DistillSpec {
    /// 1000 iterations, step 1.0, unbounded radius, image initialization.
    pub fn robust_default() -> Self {
        Self {
            mode: DistillMode::Robust,
            init: DistillInit::FromImage,
            iterations: 1000,
            step_size: 1.0,
            epsilon: None,
            norm: Norm::L2,
            target_rule: TargetRule::NextClass,
            seed: 0,
        }
    }

    /// 1000 iterations, step 0.1, radius 0.5, next-class targets.
    pub fn nonrobust_default() -> Self {
        Self {
            mode: DistillMode::NonRobust,
            init: DistillInit::FromImage,
            iterations: 1000,
            step_size: 0.1,
            epsilon: Some(0.5),
            norm: Norm::L2,
            target_rule: TargetRule::NextClass,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("distill iterations must be >= 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!("distill step size must be positive, got {}", self.step_size)));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return Err(Error::InvalidConfig(format!("finite distill epsilon must be positive, got {e}")));
            }
        }
        if self.norm != Norm::L2 {
            return Err(Error::InvalidConfig("distillation is defined for the L2 ball only".into()));
        }
        if self.mode == DistillMode::NonRobust && self.epsilon.is_none() {
            return Err(Error::InvalidConfig("non-robust distillation needs a finite epsilon".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

/// Final objective and accepted step count of one distilled sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLog {
    pub sample_id: usize,
    pub final_loss: f64,
    pub steps_used: usize,
}

pub fn log_csv(log: &[SampleLog]) -> String {
    let mut s = String::from("sample_id,final_loss,steps_used\n");
    for r in log {
        writeln!(s, "{},{:e},{}", r.sample_id, r.final_loss, r.steps_used).unwrap();
    }
    s
}

/// Per-sample objective values and gradients over a batch.
type ObjectiveFn<'a> = dyn Fn(&Tensor, &[usize], bool) -> Result<(Vec<f64>, Option<Tensor>)> + Sync + 'a;

/// Squared feature distance `|g(x_r) - target|^2` per row, optionally with its input gradient.
fn feature_objective<'a>(g_enc: &'a Encoder, target: &'a Tensor) -> Box<ObjectiveFn<'a>> {
    Box::new(move |x: &Tensor, rows: &[usize], want_grad: bool| {
        per_chunk(x, want_grad, |g, xv, c| {
            let f = g_enc.forward(g, xv);
            let t = g.constant(target.select_rows(&c.iter().map(|&i| rows[i]).collect::<Vec<_>>()));
            let d = g.sub(f, t);
            let sq = g.mul(d, d);
            let v = g.value(sq);
            let per = (0..c.len()).map(|i| v.row(i).iter().sum()).collect();
            (per, g.sum(sq))
        })
    })
}

/// Cross-entropy toward `targets` per row.
fn targeted_objective<'a>(clf: Classifier<'a>, targets: &'a [usize]) -> Box<ObjectiveFn<'a>> {
    Box::new(move |x: &Tensor, rows: &[usize], want_grad: bool| {
        per_chunk(x, want_grad, |g, xv, c| {
            let l = clf.logits(g, xv);
            let t: Vec<usize> = c.iter().map(|&i| targets[rows[i]]).collect();
            let lv = g.value(l);
            let per = t
                .iter()
                .enumerate()
                .map(|(i, &ti)| {
                    let r = lv.row(i);
                    let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - r[ti]
                })
                .collect();
            (per, g.cross_entropy(l, &t, false, false))
        })
    })
}

fn per_chunk<F>(x: &Tensor, want_grad: bool, f: F) -> Result<(Vec<f64>, Option<Tensor>)>
where
    F: Fn(&mut Graph, crate::autograd::Var, &[usize]) -> (Vec<f64>, crate::autograd::Var) + Sync,
{
    let idx: Vec<usize> = (0..x.dim0()).collect();
    let parts: Vec<(Vec<f64>, Option<Tensor>)> = idx
        .par_chunks(CHUNK)
        .map(|c| {
            let mut g = Graph::new();
            let xv = if want_grad { g.param(x.select_rows(c)) } else { g.constant(x.select_rows(c)) };
            let (per, total) = f(&mut g, xv, c);
            let grad = want_grad.then(|| g.backward(total).get(xv).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(xv))));
            (per, grad)
        })
        .collect();
    let per: Vec<f64> = parts.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    if per.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distillation objective".into()));
    }
    let grad = if want_grad {
        let gs: Vec<&Tensor> = parts.iter().map(|(_, g)| g.as_ref().unwrap()).collect();
        let g = Tensor::stack_rows(&gs);
        if !g.all_finite() {
            return Err(Error::NonFinite("distillation gradient (encoder numerical failure)".into()));
        }
        Some(g)
    } else {
        None
    };
    Ok((per, grad))
}

/// Descends `grad` by `steps[i]` along each row's normalized gradient, projects
/// onto the L2 ball around `x_init` and clips to the unit box.
fn descend(x_r: &Tensor, grad: &Tensor, steps: &[f64], x_init: &Tensor, epsilon: Option<f64>) -> Tensor {
    let per = x_r.row_len();
    let mut out = x_r.clone();
    for (i, row) in out.data_mut().chunks_mut(per).enumerate() {
        let gr = grad.row(i);
        let nrm = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm > 0.0 {
            for (v, gv) in row.iter_mut().zip(gr) {
                *v -= steps[i] * gv / nrm;
            }
        }
    }
    if let Some(eps) = epsilon {
        let delta = Tensor::new(out.shape().to_vec(), out.data().iter().zip(x_init.data()).map(|(a, b)| a - b).collect());
        let delta = project(&delta, Norm::L2, eps);
        for ((v, d), b) in out.data_mut().iter_mut().zip(delta.data()).zip(x_init.data()) {
            *v = b + d;
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// One normalized-gradient step on `|g(x) - g(x_r)|` for every row of `x_r`,
/// projected to the L2 ball of radius `epsilon` around `x_init` and clipped.
pub fn feature_distill_step(
    x_r: &Tensor,
    x: &Tensor,
    g: &Encoder,
    step_size: f64,
    epsilon: Option<f64>,
    x_init: &Tensor,
) -> Result<Tensor> {
    if x_r.shape() != x.shape() || x_init.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            context: "feature_distill_step".into(),
            expected: format!("{:?}", x.shape()),
            found: format!("{:?} / {:?}", x_r.shape(), x_init.shape()),
        });
    }
    if let Some(e) = epsilon {
        if !(e > 0.0) {
            return Err(Error::InvalidConfig(format!("finite epsilon must be positive, got {e}")));
        }
    }
    g.check_input(x.shape())?;
    let target = g.extract_features(x)?;
    let rows: Vec<usize> = (0..x.dim0()).collect();
    let (_, grad) = feature_objective(g, &target)(x_r, &rows, true)?;
    Ok(descend(x_r, &grad.unwrap(), &vec![step_size; x.dim0()], x_init, epsilon))
}

/// Backtracking descent shared by both constructions. Returns the final
/// iterate and per-sample logs; the objective never increases.
fn optimize(objective: &ObjectiveFn, x_init: &Tensor, spec: &DistillSpec) -> Result<(Tensor, Vec<SampleLog>)> {
    let n = x_init.dim0();
    let per = x_init.row_len();
    let all: Vec<usize> = (0..n).collect();
    let mut x = x_init.clone();
    let mut steps = vec![spec.step_size; n];
    let mut used = vec![0usize; n];
    let (mut cur, _) = objective(&x, &all, false)?;
    for _ in 0..spec.iterations {
        let (_, grad) = objective(&x, &all, true)?;
        let grad = grad.unwrap();
        let mut cand = descend(&x, &grad, &steps, x_init, spec.epsilon);
        let (mut val, _) = objective(&cand, &all, false)?;
        let mut pending: Vec<usize> = (0..n).filter(|&i| val[i] > cur[i]).collect();
        for _ in 0..MAX_HALVINGS {
            if pending.is_empty() {
                break;
            }
            for &i in &pending {
                steps[i] *= 0.5;
            }
            let sub_x = x.select_rows(&pending);
            let sub_g = grad.select_rows(&pending);
            let sub_init = x_init.select_rows(&pending);
            let sub_steps: Vec<f64> = pending.iter().map(|&i| steps[i]).collect();
            let retry = descend(&sub_x, &sub_g, &sub_steps, &sub_init, spec.epsilon);
            let (rv, _) = objective(&retry, &pending, false)?;
            for (k, &i) in pending.iter().enumerate() {
                cand.data_mut()[i * per..(i + 1) * per].copy_from_slice(retry.row(k));
                val[i] = rv[k];
            }
            pending.retain(|&i| val[i] > cur[i]);
        }
        for i in 0..n {
            if val[i] <= cur[i] {
                if cand.row(i) != x.row(i) {
                    used[i] += 1;
                }
                x.data_mut()[i * per..(i + 1) * per].copy_from_slice(cand.row(i));
                cur[i] = val[i];
            }
        }
    }
    let logs = (0..n).map(|i| SampleLog { sample_id: i, final_loss: cur[i], steps_used: used[i] }).collect();
    Ok((x, logs))
}

fn initial_images(d: &LabeledDataset, spec: &DistillSpec) -> Result<Tensor> {
    let n = d.len();
    let ppi = d.pixels_per_image();
    let [c, h, w] = d.shape();
    let labels = d.labels();
    let mut data = Vec::with_capacity(n * ppi);
    for i in 0..n {
        let mut r = rng::rng(rng::derive_idx(spec.seed, "distill-init", i as u64));
        match spec.init {
            DistillInit::FromNoise => data.extend((0..ppi).map(|_| {
                let z: f64 = r.sample(StandardNormal);
                (0.5 + 0.25 * z).clamp(0.0, 1.0)
            })),
            DistillInit::FromImage | DistillInit::FromAnyImage => {
                let pool: Vec<usize> = (0..n)
                    .filter(|&j| j != i && (spec.init == DistillInit::FromAnyImage || labels[j] != labels[i]))
                    .collect();
                let &j = pool
                    .choose(&mut r)
                    .ok_or_else(|| Error::InvalidConfig("no candidate initialization image".into()))?;
                data.extend(d.image(j).iter().map(|&v| v as f64));
            }
        }
    }
    Ok(Tensor::new(vec![n, c, h, w], data))
}

fn to_dataset(x: &Tensor, labels: Vec<u32>, d: &LabeledDataset, provenance: Provenance) -> Result<LabeledDataset> {
    let images = x.data().iter().map(|&v| v as f32).collect();
    LabeledDataset::new(images, labels, d.shape(), d.num_classes(), provenance)
}

/// Matches each sample's `g_robust` features starting from an unrelated
/// image (or noise); labels are kept.
pub fn construct_robust_dataset(d: &LabeledDataset, g_robust: &Encoder, spec: &DistillSpec) -> Result<(LabeledDataset, Vec<SampleLog>)> {
    spec.validate()?;
    if spec.mode != DistillMode::Robust {
        return Err(Error::InvalidConfig("construct_robust_dataset needs a robust-mode spec".into()));
    }
    let x = d.all_images();
    g_robust.check_input(x.shape())?;
    let target = g_robust.extract_features(&x)?;
    let init = initial_images(d, spec)?;
    let (out, logs) = optimize(&*feature_objective(g_robust, &target), &init, spec)?;
    let prov = Provenance {
        kind: DatasetKind::Robust,
        source_encoder: Some(g_robust.id().to_string()),
        distill_config: Some(format!("{}:{}", spec.digest(), serde_json::to_string(spec)?)),
    };
    Ok((to_dataset(&out, d.labels().to_vec(), d, prov)?, logs))
}

/// Targets for a non-robust construction under `rule`.
pub fn choose_targets(labels: &[u32], k: usize, rule: TargetRule, seed: u64) -> Result<Vec<usize>> {
    let mut r = rng::rng(rng::derive(seed, "targets"));
    labels
        .iter()
        .map(|&y| {
            let y = y as usize;
            let t = match rule {
                TargetRule::NextClass => (y + 1) % k,
                TargetRule::RandomClass => {
                    let o = r.gen_range(0..k - 1);
                    if o >= y {
                        o + 1
                    } else {
                        o
                    }
                }
                TargetRule::Uniform => return Ok(r.gen_range(0..k)),
            };
            if t == y {
                return Err(Error::InvalidConfig(format!("target rule produced the source label {y}")));
            }
            Ok(t)
        })
        .collect()
}

/// Perturbs each image within the L2 ball toward a target class of the
/// standard classifier and relabels it with that target.
pub fn construct_nonrobust_dataset(
    d: &LabeledDataset,
    encoder: &Encoder,
    head: &ProbeHead,
    spec: &DistillSpec,
) -> Result<(LabeledDataset, Vec<SampleLog>)> {
    spec.validate()?;
    if spec.mode != DistillMode::NonRobust {
        return Err(Error::InvalidConfig("construct_nonrobust_dataset needs a non-robust-mode spec".into()));
    }
    if d.num_classes() < 2 {
        return Err(Error::InvalidConfig("non-robust construction needs K >= 2".into()));
    }
    let clf = Classifier::new(encoder, head)?;
    let x = d.all_images();
    encoder.check_input(x.shape())?;
    let targets = choose_targets(d.labels(), d.num_classes(), spec.target_rule, spec.seed)?;
    let (out, logs) = optimize(&*targeted_objective(clf, &targets), &x, spec)?;
    let prov = Provenance {
        kind: DatasetKind::NonRobust,
        source_encoder: Some(encoder.id().to_string()),
        distill_config: Some(format!("{}:{}", spec.digest(), serde_json::to_string(spec)?)),
    };
    let labels = targets.iter().map(|&t| t as u32).collect();
    Ok((to_dataset(&out, labels, d, prov)?, logs))
}
