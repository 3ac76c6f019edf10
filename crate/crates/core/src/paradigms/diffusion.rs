//! DDPM-style noise-prediction training with a small U-Net.

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, Arch};
use crate::optim::AdamW;
use crate::rng;
use crate::tensor::Tensor;

use super::{
    check_dataset, check_loss, chunked_grads, epoch_order, split, DiffusionTap, Encoder, Paradigm, ParadigmConfig,
    ParadigmSettings, TrainReport,
};

pub const TAP_LAYER: &str = "up";

/// Variance schedule `beta_1..beta_T`, strictly increasing inside (0,1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidConfig("noise schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidConfig("every beta must lie in (0,1)".into()));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("betas must be strictly increasing".into()));
        }
        Ok(Self { betas })
    }

    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("noise schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| if steps == 1 { start } else { start + (end - start) * i as f64 / (steps - 1) as f64 })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `prod_{s<=t} (1 - beta_s)` for `1 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.betas[..t].iter().map(|b| 1.0 - b).product()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::InvalidConfig(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Default feature timestep `ceil(0.1 * T)`.
    pub fn default_t_feat(&self) -> usize {
        ((self.steps() as f64) * 0.1).ceil().max(1.0) as usize
    }
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` with `eps` drawn from `seed`.
pub fn diffusion_forward_sample(x0: &Tensor, t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<Tensor> {
    schedule.check_t(t)?;
    let eps = gaussian(x0.shape(), seed);
    Ok(forward_with_noise(x0, &eps, schedule.alpha_bar(t)))
}

fn forward_with_noise(x0: &Tensor, eps: &Tensor, ab: f64) -> Tensor {
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Tensor::new(x0.shape().to_vec(), x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + s * e).collect())
}

fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng as _;
    let mut r = rng::rng(seed);
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

/// Trains the U-Net on `|eps - eps_theta(x_t, t)|^2` with `t` uniform in `1..=T`.
pub fn train_diffusion(d: &LabeledDataset, cfg: &ParadigmConfig) -> Result<(Encoder, TrainReport)> {
    let ParadigmSettings::Diffusion { steps, beta_start, beta_end, t_feat } = cfg.settings else {
        return Err(Error::InvalidConfig(format!("train_diffusion called with a {} config", cfg.paradigm())));
    };
    cfg.validate()?;
    check_dataset(d, &cfg.arch)?;
    let schedule = NoiseSchedule::linear(steps, beta_start, beta_end)?;
    let Arch::UNet { time_dim, .. } = cfg.arch else { unreachable!() };
    let mut params = cfg.arch.init(rng::derive(cfg.seed, "dm-init"));
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let n = d.len();
    let bs = cfg.batch_size.min(n);
    let total = cfg.epochs * n.div_ceil(bs);
    let ppi = d.pixels_per_image();
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut sum = 0.0;
        for batch in order.chunks(bs) {
            let step_seed = rng::derive_idx(cfg.seed, "dm-step", step as u64);
            let pos: Vec<usize> = (0..batch.len()).collect();
            let chunks = split(&pos, super::supervised::CHUNK);
            let denom = (batch.len() * ppi) as f64;
            let (loss, grads) = chunked_grads(&params, &chunks, |g, p, c| {
                use rand::Rng as _;
                let idx: Vec<usize> = c.iter().map(|&i| batch[i]).collect();
                let x0 = d.batch(&idx);
                let mut ts = Vec::with_capacity(c.len());
                let mut xt = Vec::with_capacity(x0.len());
                let mut eps = Vec::with_capacity(x0.len());
                for (r, &i) in c.iter().enumerate() {
                    let s = rng::derive_idx(step_seed, "sample", i as u64);
                    let t = rng::rng(s).gen_range(1..=steps);
                    let e = gaussian(&[ppi], rng::derive(s, "eps"));
                    let row = Tensor::new(vec![ppi], x0.row(r).to_vec());
                    xt.extend(forward_with_noise(&row, &e, schedule.alpha_bar(t)).into_data());
                    eps.extend(e.into_data());
                    ts.push(t);
                }
                let xt = g.constant(Tensor::new(x0.shape().to_vec(), xt));
                let eps = g.constant(Tensor::new(x0.shape().to_vec(), eps));
                let te = g.constant(nn::time_embedding(&ts, time_dim, steps));
                let (out, _) = nn::unet_forward(g, xt, te, p);
                let diff = g.sub(out, eps);
                let sq = g.mul(diff, diff);
                let s = g.sum(sq);
                g.scale(s, 1.0 / denom)
            });
            opt.step(&mut params, &grads, cfg.schedule.lr(cfg.lr, step, total));
            step += 1;
            check_loss(epoch, loss, &params)?;
            sum += loss * batch.len() as f64;
        }
        report.epoch_losses.push(sum / n as f64);
    }
    let tap = DiffusionTap {
        t_feat: t_feat.unwrap_or_else(|| schedule.default_t_feat()),
        schedule,
        noise_seed: rng::derive(cfg.seed, "dm-feature-noise"),
        tap_layer: TAP_LAYER.into(),
    };
    let e = Encoder::new(Paradigm::Dm, cfg.arch.clone(), params, d.shape(), cfg.digest(), None, Some(tap))?;
    Ok((e, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_product() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert!(s.check_t(0).is_err() && s.check_t(3).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.2]).is_err());
        assert_eq!(NoiseSchedule::linear(100, 1e-4, 0.02).unwrap().default_t_feat(), 10);
    }
}
