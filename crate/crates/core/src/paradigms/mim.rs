//! Masked image modeling: an MAE-style encoder sees only visible patches and a
//! light decoder reconstructs the masked ones.

use rand::seq::SliceRandom;

use crate::autograd::{Graph, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, block_specs, spec, Arch, ParamSpec};
use crate::optim::AdamW;
use crate::rng;

use super::{check_dataset, check_loss, chunked_grads, epoch_order, split, Encoder, Paradigm, ParadigmConfig, ParadigmSettings, TrainReport};

/// Per-image masked and visible patch indices, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub num_patches: usize,
    pub masked: Vec<Vec<usize>>,
    pub visible: Vec<Vec<usize>>,
}

impl PatchMask {
    pub fn num_masked(&self) -> usize {
        self.masked.first().map_or(0, Vec::len)
    }

    pub fn num_visible(&self) -> usize {
        self.num_patches - self.num_masked()
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    /// Restriction to the images at `idx`.
    pub fn select(&self, idx: &[usize]) -> PatchMask {
        PatchMask {
            num_patches: self.num_patches,
            masked: idx.iter().map(|&i| self.masked[i].clone()).collect(),
            visible: idx.iter().map(|&i| self.visible[i].clone()).collect(),
        }
    }
}

/// Masks exactly `round(ratio * num_patches)` patches per image, uniformly at random.
pub fn mask_patches(n: usize, num_patches: usize, ratio: f64, seed: u64) -> Result<PatchMask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("mask ratio {ratio} outside (0,1)")));
    }
    let m = (ratio * num_patches as f64).round() as usize;
    if m == 0 || m >= num_patches {
        return Err(Error::InvalidConfig(format!(
            "mask ratio {ratio} masks {m} of {num_patches} patches; need at least one masked and one visible"
        )));
    }
    let mut r = rng::rng(seed);
    let mut masked = Vec::with_capacity(n);
    let mut visible = Vec::with_capacity(n);
    for _ in 0..n {
        let mut idx: Vec<usize> = (0..num_patches).collect();
        idx.shuffle(&mut r);
        let mut mk = idx[..m].to_vec();
        let mut vis = idx[m..].to_vec();
        mk.sort_unstable();
        vis.sort_unstable();
        masked.push(mk);
        visible.push(vis);
    }
    Ok(PatchMask { num_patches, masked, visible })
}

/// Decoder parameter layout for a patch-transformer encoder.
pub fn decoder_specs(arch: &Arch, decoder_dim: usize, decoder_mlp: usize) -> Vec<ParamSpec> {
    let Arch::PatchTransformer { in_shape: [c, h, w], patch, dim, .. } = arch else {
        panic!("MAE decoder needs a patch transformer");
    };
    let pd = c * patch * patch;
    let tokens = (h / patch) * (w / patch);
    let mut v = vec![
        spec("dec.embed.w", &[*dim, decoder_dim], *dim),
        spec("dec.embed.b", &[decoder_dim], *dim),
        ParamSpec { name: "dec.mask".into(), shape: vec![1, decoder_dim], fan_in: 1, init_scale: Some(0.02) },
        ParamSpec { name: "dec.pos".into(), shape: vec![tokens, decoder_dim], fan_in: 1, init_scale: Some(0.02) },
    ];
    v.extend(block_specs("dec.block0", decoder_dim, decoder_mlp));
    v.push(spec("dec.out.w", &[decoder_dim, pd], decoder_dim));
    v.push(spec("dec.out.b", &[pd], decoder_dim));
    v
}

/// Reconstructed patch rows `[N*P, patch_dim]` for `x` under `mask`.
/// `enc` holds the trunk parameters and `dec` the decoder parameters.
pub fn mae_reconstruct(g: &mut Graph, arch: &Arch, x: Var, mask: &PatchMask, enc: &[Var], dec: &[Var]) -> Var {
    let Arch::PatchTransformer { in_shape, patch, .. } = arch else {
        panic!("MAE needs a patch transformer");
    };
    let n = mask.len();
    let p = mask.num_patches;
    let (v, m) = (mask.num_visible(), mask.num_masked());
    let tokens = nn::patchify(g, x, *in_shape, *patch);
    let vis_rows: Vec<usize> = (0..n).flat_map(|i| mask.visible[i].iter().map(move |&j| i * p + j)).collect();
    let vis_pos: Vec<usize> = mask.visible.iter().flatten().copied().collect();
    let vis = g.index_rows(tokens, &vis_rows);
    let h = nn::transformer_tokens(g, vis, &vis_pos, n, v, enc);
    let h = nn::linear(g, h, dec[0], dec[1]);
    let mask_tok = g.index_rows(dec[2], &vec![0; n * m]);
    let all = g.concat(&[h, mask_tok], 0);
    // put every image's tokens back in patch order
    let mut order = vec![0; n * p];
    for i in 0..n {
        for (k, &j) in mask.visible[i].iter().enumerate() {
            order[i * p + j] = i * v + k;
        }
        for (k, &j) in mask.masked[i].iter().enumerate() {
            order[i * p + j] = n * v + i * m + k;
        }
    }
    let full = g.index_rows(all, &order);
    let pos_rows: Vec<usize> = (0..n).flat_map(|_| 0..p).collect();
    let pos = g.index_rows(dec[3], &pos_rows);
    let full = g.add(full, pos);
    let full = nn::transformer_block(g, full, n, p, &dec[4..12]);
    let full = g.layer_norm(full, 1e-5);
    nn::linear(g, full, dec[12], dec[13])
}

/// Sum of squared reconstruction error over masked patch pixels of `x_target`.
pub(crate) fn masked_sse(g: &mut Graph, arch: &Arch, pred: Var, x_target: Var, mask: &PatchMask) -> (Var, usize) {
    let Arch::PatchTransformer { in_shape, patch, .. } = arch else {
        panic!("MAE needs a patch transformer");
    };
    let p = mask.num_patches;
    let target = nn::patchify(g, x_target, *in_shape, *patch);
    let rows: Vec<usize> = (0..mask.len()).flat_map(|i| mask.masked[i].iter().map(move |&j| i * p + j)).collect();
    let pm = g.index_rows(pred, &rows);
    let tm = g.index_rows(target, &rows);
    let diff = g.sub(pm, tm);
    let sq = g.mul(diff, diff);
    let count = g.value(sq).len();
    (g.sum(sq), count)
}

/// Mean squared error over masked patch pixels only.
pub fn mim_loss(g: &mut Graph, arch: &Arch, x_input: Var, x_target: Var, mask: &PatchMask, enc: &[Var], dec: &[Var]) -> Var {
    let pred = mae_reconstruct(g, arch, x_input, mask, enc, dec);
    let (sse, count) = masked_sse(g, arch, pred, x_target, mask);
    g.scale(sse, 1.0 / count as f64)
}

pub fn train_mim(d: &LabeledDataset, cfg: &ParadigmConfig) -> Result<(Encoder, TrainReport)> {
    let ParadigmSettings::MaskedImage { mask_ratio, decoder_dim, decoder_mlp } = cfg.settings else {
        return Err(Error::InvalidConfig(format!("train_mim called with a {} config", cfg.paradigm())));
    };
    cfg.validate()?;
    let Arch::PatchTransformer { in_shape: [_, h, w], patch, .. } = cfg.arch else { unreachable!() };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidConfig(format!("image {h}x{w} not divisible by patch {patch}")));
    }
    check_dataset(d, &cfg.arch)?;
    let num_patches = (h / patch) * (w / patch);
    let n_enc = cfg.arch.param_specs().len();
    let mut params = cfg.arch.init(rng::derive(cfg.seed, "mim-init"));
    params.extend(nn::init_params(&decoder_specs(&cfg.arch, decoder_dim, decoder_mlp), rng::derive(cfg.seed, "mim-dec")));
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let n = d.len();
    let bs = cfg.batch_size.min(n);
    let total = cfg.epochs * n.div_ceil(bs);
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut sum = 0.0;
        for batch in order.chunks(bs) {
            let mask = mask_patches(batch.len(), num_patches, mask_ratio, rng::derive_idx(cfg.seed, "mim-mask", step as u64))?;
            let denom = (batch.len() * mask.num_masked() * d.pixels_per_image() / num_patches) as f64;
            let pos: Vec<usize> = (0..batch.len()).collect();
            let chunks = split(&pos, super::supervised::CHUNK);
            let (loss, grads) = chunked_grads(&params, &chunks, |g, p, c| {
                let idx: Vec<usize> = c.iter().map(|&i| batch[i]).collect();
                let x = g.constant(d.batch(&idx));
                let mk = mask.select(c);
                let pred = mae_reconstruct(g, &cfg.arch, x, &mk, &p[..n_enc], &p[n_enc..]);
                let (sse, _) = masked_sse(g, &cfg.arch, pred, x, &mk);
                g.scale(sse, 1.0 / denom)
            });
            opt.step(&mut params, &grads, cfg.schedule.lr(cfg.lr, step, total));
            step += 1;
            check_loss(epoch, loss, &params)?;
            sum += loss * batch.len() as f64;
        }
        report.epoch_losses.push(sum / n as f64);
    }
    params.truncate(n_enc);
    let e = Encoder::new(Paradigm::Mim, cfg.arch.clone(), params, d.shape(), cfg.digest(), None, None)?;
    Ok((e, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_counts() {
        let m = mask_patches(3, 16, 0.75, 1).unwrap();
        assert!(m.masked.iter().all(|v| v.len() == 12));
        assert!(m.visible.iter().all(|v| v.len() == 4));
        assert_eq!(m, mask_patches(3, 16, 0.75, 1).unwrap());
        assert!(mask_patches(1, 16, 0.01, 1).is_err());
        assert!(mask_patches(1, 16, 1.0, 1).is_err());
    }
}
