//! Feature encoders trained under four learning paradigms, and the frozen
//! [`Encoder`] record every downstream module consumes.

pub mod augment;
pub mod contrastive;
pub mod diffusion;
pub mod mim;
pub mod supervised;

use std::fmt;
use std::fs;
use std::path::Path;

use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::data::LabeledDataset;
use crate::error::{io_err, Error, Result};
use crate::nn::{self, Activation, Arch};
use crate::optim::Schedule;
use crate::rng;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use contrastive::{infonce_loss, train_contrastive};
pub use diffusion::{diffusion_forward_sample, train_diffusion, NoiseSchedule};
pub use mim::{mask_patches, train_mim, PatchMask};
pub use supervised::train_supervised;

/// Learning paradigms in canonical order (also the cross-paradigm tie-break order).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Paradigm {
    #[serde(rename = "MIM")]
    Mim,
    #[serde(rename = "CL")]
    Cl,
    #[serde(rename = "DM")]
    Dm,
    #[serde(rename = "SL")]
    Sl,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [Paradigm::Mim, Paradigm::Cl, Paradigm::Dm, Paradigm::Sl];

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Mim => "MIM",
            Paradigm::Cl => "CL",
            Paradigm::Dm => "DM",
            Paradigm::Sl => "SL",
        }
    }

    pub fn parse(s: &str) -> Option<Paradigm> {
        Paradigm::ALL.into_iter().find(|p| p.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Paradigm-specific hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "paradigm")]
pub enum ParadigmSettings {
    #[serde(rename = "SL")]
    Supervised,
    #[serde(rename = "CL")]
    Contrastive { temperature: f64, projector_hidden: usize, projector_dim: usize },
    #[serde(rename = "MIM")]
    MaskedImage { mask_ratio: f64, decoder_dim: usize, decoder_mlp: usize },
    #[serde(rename = "DM")]
    Diffusion { steps: usize, beta_start: f64, beta_end: f64, t_feat: Option<usize> },
}

impl ParadigmSettings {
    pub fn paradigm(&self) -> Paradigm {
        match self {
            ParadigmSettings::Supervised => Paradigm::Sl,
            ParadigmSettings::Contrastive { .. } => Paradigm::Cl,
            ParadigmSettings::MaskedImage { .. } => Paradigm::Mim,
            ParadigmSettings::Diffusion { .. } => Paradigm::Dm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParadigmConfig {
    pub settings: ParadigmSettings,
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub augment: bool,
    #[serde(default)]
    pub augment_cfg: AugmentConfig,
    pub seed: u64,
}

impl ParadigmConfig {
    pub fn paradigm(&self) -> Paradigm {
        self.settings.paradigm()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("epochs, batch_size and lr must be positive".into()));
        }
        match &self.settings {
            ParadigmSettings::Supervised => {}
            ParadigmSettings::Contrastive { temperature, .. } => {
                if !(*temperature > 0.0) {
                    return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
                }
                if self.batch_size < 2 {
                    return Err(Error::InvalidConfig("contrastive batches need at least 2 images".into()));
                }
            }
            ParadigmSettings::MaskedImage { mask_ratio, .. } => {
                if !(*mask_ratio > 0.0 && *mask_ratio < 1.0) {
                    return Err(Error::InvalidConfig(format!("mask ratio {mask_ratio} outside (0,1)")));
                }
                if !matches!(self.arch, Arch::PatchTransformer { .. }) {
                    return Err(Error::InvalidConfig("MIM needs a patch transformer".into()));
                }
            }
            ParadigmSettings::Diffusion { steps, beta_start, beta_end, t_feat } => {
                NoiseSchedule::linear(*steps, *beta_start, *beta_end)?;
                if let Some(t) = t_feat {
                    if *t < 1 || t > steps {
                        return Err(Error::InvalidConfig(format!("t_feat {t} outside 1..={steps}")));
                    }
                }
                if !matches!(self.arch, Arch::UNet { .. }) {
                    return Err(Error::InvalidConfig("DM needs a U-Net".into()));
                }
            }
        }
        match (&self.settings, &self.arch) {
            (ParadigmSettings::Supervised | ParadigmSettings::Contrastive { .. }, Arch::Cnn { .. } | Arch::Mlp { .. }) => {}
            (ParadigmSettings::Supervised | ParadigmSettings::Contrastive { .. }, a) => {
                return Err(Error::InvalidConfig(format!("{} cannot use architecture {}", self.paradigm(), a.id())));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    /// Desk-scale defaults for a paradigm at input shape `[C,H,W]`.
    pub fn desk_default(paradigm: Paradigm, in_shape: [usize; 3], seed: u64) -> Self {
        let base = |settings, arch, epochs, batch_size, lr, weight_decay, augment| ParadigmConfig {
            settings,
            arch,
            epochs,
            batch_size,
            lr,
            schedule: Schedule::Cosine,
            weight_decay,
            augment,
            augment_cfg: AugmentConfig::default(),
            seed,
        };
        match paradigm {
            Paradigm::Sl => base(
                ParadigmSettings::Supervised,
                Arch::Cnn { in_shape, c1: 8, c2: 16, hidden: 32 },
                15,
                64,
                3e-3,
                1e-4,
                false,
            ),
            Paradigm::Cl => base(
                ParadigmSettings::Contrastive { temperature: 0.5, projector_hidden: 32, projector_dim: 16 },
                Arch::Cnn { in_shape, c1: 8, c2: 16, hidden: 32 },
                15,
                128,
                3e-3,
                1e-5,
                true,
            ),
            Paradigm::Mim => base(
                ParadigmSettings::MaskedImage { mask_ratio: 0.75, decoder_dim: 16, decoder_mlp: 32 },
                Arch::PatchTransformer { in_shape, patch: 2, dim: 24, depth: 2, mlp_dim: 48 },
                15,
                64,
                2e-3,
                5e-2,
                false,
            ),
            Paradigm::Dm => base(
                ParadigmSettings::Diffusion { steps: 100, beta_start: 1e-4, beta_end: 0.02, t_feat: None },
                Arch::UNet { in_shape, base: 12, time_dim: 16 },
                15,
                64,
                2e-3,
                0.0,
                false,
            ),
        }
    }
}

/// Per-epoch loss log of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: Option<f64>,
}

/// Contrastive projection head kept on the encoder record for attack objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub arch: Arch,
    #[serde(skip)]
    pub params: Vec<Tensor>,
}

impl Projector {
    pub fn mlp(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let arch = Arch::Mlp { dims: vec![in_dim, hidden, out_dim], act: Activation::Relu, final_act: false };
        let params = arch.init(seed);
        Self { arch, params }
    }

    pub fn forward(&self, g: &mut Graph, feats: Var) -> Var {
        let p: Vec<Var> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        projector_forward(g, &self.arch, feats, &p)
    }
}

pub(crate) fn projector_forward(g: &mut Graph, arch: &Arch, feats: Var, p: &[Var]) -> Var {
    match arch {
        Arch::Mlp { act, final_act, .. } => nn::mlp_forward(g, feats, p, *act, *final_act),
        _ => unreachable!("projectors are MLPs"),
    }
}

/// Noise level and fixed noise draw used to read diffusion features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTap {
    pub schedule: NoiseSchedule,
    pub t_feat: usize,
    pub noise_seed: u64,
    /// Name of the tapped layer.
    pub tap_layer: String,
}

impl DiffusionTap {
    /// One `[C,H,W]` noise image shared by every row, so features stay per-sample pure.
    pub fn noise(&self, shape: [usize; 3], seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = rng::rng(seed);
        Tensor::from_fn(&shape, |_| r.sample(StandardNormal))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    paradigm: Paradigm,
    arch: Arch,
    params: Vec<Tensor>,
    input_shape: [usize; 3],
    config_digest: String,
    projector: Option<Projector>,
    diffusion: Option<DiffusionTap>,
    id: String,
}

#[derive(Serialize, Deserialize)]
struct EncoderManifest {
    paradigm: Paradigm,
    arch_id: String,
    arch: Arch,
    feature_dim: usize,
    input_shape: [usize; 3],
    t_feat: Option<usize>,
    config_digest: String,
    projector: Option<Projector>,
    diffusion: Option<DiffusionTap>,
    weights_file: String,
    num_weights: usize,
    id: String,
}

impl Encoder {
    pub fn new(
        paradigm: Paradigm,
        arch: Arch,
        params: Vec<Tensor>,
        input_shape: [usize; 3],
        config_digest: impl Into<String>,
        projector: Option<Projector>,
        diffusion: Option<DiffusionTap>,
    ) -> Result<Self> {
        let specs = arch.param_specs();
        if specs.len() != params.len() || specs.iter().zip(&params).any(|(s, p)| s.shape != p.shape()) {
            return Err(Error::ShapeMismatch {
                context: format!("encoder parameters for {}", arch.id()),
                expected: format!("{} tensors", specs.len()),
                found: format!("{} tensors", params.len()),
            });
        }
        if let Some(s) = arch.in_shape() {
            if s != input_shape {
                return Err(Error::ShapeMismatch {
                    context: "encoder input".into(),
                    expected: format!("{:?}", s),
                    found: format!("{:?}", input_shape),
                });
            }
        }
        if let Arch::Mlp { dims, .. } = &arch {
            if dims[0] != input_shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch {
                    context: "mlp encoder input".into(),
                    expected: dims[0].to_string(),
                    found: format!("{:?}", input_shape),
                });
            }
        }
        let mut e = Self {
            paradigm,
            arch,
            params,
            input_shape,
            config_digest: config_digest.into(),
            projector,
            diffusion,
            id: String::new(),
        };
        e.id = e.compute_id();
        Ok(e)
    }

    /// The identity feature map over flattened pixels.
    pub fn identity(input_shape: [usize; 3]) -> Self {
        let d: usize = input_shape.iter().product();
        let arch = Arch::Mlp { dims: vec![d, d], act: Activation::Relu, final_act: false };
        let w = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        Self::new(Paradigm::Sl, arch, vec![w, Tensor::zeros(&[d])], input_shape, "identity", None, None)
            .expect("identity encoder is well formed")
    }

    /// A feature map that ignores its input and returns `value` in every dimension.
    pub fn constant(input_shape: [usize; 3], dim: usize, value: f64) -> Self {
        let d: usize = input_shape.iter().product();
        let arch = Arch::Mlp { dims: vec![d, dim], act: Activation::Relu, final_act: false };
        let params = vec![Tensor::zeros(&[d, dim]), Tensor::full(&[dim], value)];
        Self::new(Paradigm::Sl, arch, params, input_shape, "constant", None, None).expect("constant encoder is well formed")
    }

    pub fn with_projector(mut self, projector: Projector) -> Self {
        self.projector = Some(projector);
        self.id = self.compute_id();
        self
    }

    pub fn paradigm(&self) -> Paradigm {
        self.paradigm
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    pub fn projector(&self) -> Option<&Projector> {
        self.projector.as_ref()
    }

    pub fn diffusion(&self) -> Option<&DiffusionTap> {
        self.diffusion.as_ref()
    }

    /// Whether feature extraction injects noise (evaluated with expectation over draws).
    pub fn is_stochastic(&self) -> bool {
        self.diffusion.is_some()
    }

    /// Content digest of architecture, weights and attached heads.
    pub fn id(&self) -> &str {
        &self.id
    }

    fn compute_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.paradigm.as_str());
        h.update(serde_json::to_string(&self.arch).unwrap());
        h.update(format!("{:?}", self.input_shape));
        h.update(&self.config_digest);
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(pr) = &self.projector {
            h.update(serde_json::to_string(&pr.arch).unwrap());
            for p in &pr.params {
                for v in p.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        if let Some(d) = &self.diffusion {
            h.update(serde_json::to_string(d).unwrap());
        }
        format!("{}-{}", self.paradigm.as_str().to_lowercase(), &hex::encode(h.finalize())[..12])
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.input_shape;
        if shape.len() != 4 || shape[1..] != s {
            return Err(Error::ShapeMismatch {
                context: format!("encoder {} input", self.id),
                expected: format!("[N, {}, {}, {}]", s[0], s[1], s[2]),
                found: format!("{:?}", shape),
            });
        }
        Ok(())
    }

    /// Feature node for `x: [N,C,H,W]` with frozen weights. Stochastic
    /// encoders use their stored noise draw.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let seed = self.diffusion.as_ref().map(|d| d.noise_seed).unwrap_or(0);
        self.forward_with_noise(g, x, seed)
    }

    /// As [`Encoder::forward`], with the diffusion noise drawn from `noise_seed`.
    pub fn forward_with_noise(&self, g: &mut Graph, x: Var, noise_seed: u64) -> Var {
        let p: Vec<Var> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        let noise = self.diffusion.as_ref().map(|d| d.noise(self.input_shape, noise_seed));
        features_forward(g, &self.arch, x, &p, self.diffusion.as_ref(), noise.as_ref())
    }

    /// Features `[N, feature_dim]` of a batch; evaluated in parallel chunks.
    pub fn extract_features(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        let n = batch.dim0();
        let chunk = 128;
        let idx: Vec<usize> = (0..n).collect();
        let parts: Vec<Tensor> = idx
            .par_chunks(chunk)
            .map(|c| {
                let mut g = Graph::new();
                let x = g.constant(batch.select_rows(c));
                let f = self.forward(&mut g, x);
                g.value(f).clone()
            })
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        if refs.is_empty() {
            return Ok(Tensor::zeros(&[0, self.feature_dim()]));
        }
        Ok(Tensor::stack_rows(&refs))
    }

    pub fn extract_dataset(&self, d: &LabeledDataset) -> Result<Tensor> {
        self.extract_features(&d.all_images())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut blob = Vec::new();
        let mut count = 0;
        let all = self.params.iter().chain(self.projector.iter().flat_map(|p| p.params.iter()));
        for t in all {
            count += t.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let m = EncoderManifest {
            paradigm: self.paradigm,
            arch_id: self.arch.id(),
            arch: self.arch.clone(),
            feature_dim: self.feature_dim(),
            input_shape: self.input_shape,
            t_feat: self.diffusion.as_ref().map(|d| d.t_feat),
            config_digest: self.config_digest.clone(),
            projector: self.projector.clone(),
            diffusion: self.diffusion.clone(),
            weights_file: "weights.bin".into(),
            num_weights: count,
            id: self.id.clone(),
        };
        let wp = dir.join(&m.weights_file);
        fs::write(&wp, blob).map_err(io_err(&wp))?;
        let mp = dir.join("encoder.json");
        fs::write(&mp, serde_json::to_string_pretty(&m)?).map_err(io_err(&mp))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join("encoder.json");
        let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
        let m: EncoderManifest =
            serde_json::from_str(&text).map_err(|e| Error::CorruptManifest { path: mp.clone(), reason: e.to_string() })?;
        let wp = dir.join(&m.weights_file);
        let blob = fs::read(&wp).map_err(io_err(&wp))?;
        if blob.len() != m.num_weights * 8 {
            return Err(Error::ManifestMismatch {
                field: "num_weights".into(),
                manifest: m.num_weights.to_string(),
                payload: (blob.len() / 8).to_string(),
            });
        }
        let mut vals = blob.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        let mut take = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), vals.by_ref().take(n).collect())
        };
        let params: Vec<Tensor> = m.arch.param_specs().iter().map(|s| take(&s.shape)).collect();
        let projector = m.projector.map(|mut p| {
            p.params = p.arch.param_specs().iter().map(|s| take(&s.shape)).collect();
            p
        });
        let e = Encoder::new(m.paradigm, m.arch, params, m.input_shape, m.config_digest, projector, m.diffusion)?;
        if e.id != m.id {
            return Err(Error::Checksum { path: dir.to_path_buf() });
        }
        Ok(e)
    }
}

/// Paradigm-appropriate features with parameters supplied as graph nodes.
pub(crate) fn features_forward(
    g: &mut Graph,
    arch: &Arch,
    x: Var,
    p: &[Var],
    diffusion: Option<&DiffusionTap>,
    noise: Option<&Tensor>,
) -> Var {
    match arch {
        Arch::Mlp { act, final_act, .. } => nn::mlp_forward(g, x, p, *act, *final_act),
        Arch::Cnn { .. } => nn::cnn_forward(g, x, p),
        Arch::PatchTransformer { in_shape, patch, .. } => nn::transformer_features(g, x, *in_shape, *patch, p),
        Arch::UNet { time_dim, .. } => {
            let tap = diffusion.expect("U-Net encoders carry a diffusion tap");
            let n = g.shape(x)[0];
            let ab = tap.schedule.alpha_bar(tap.t_feat);
            let xs = g.scale(x, ab.sqrt());
            let noise = noise.expect("noise draw").map(|v| v * (1.0 - ab).sqrt());
            let nz = g.constant(noise);
            let xt = g.add_tiled(xs, nz);
            let te = g.constant(nn::time_embedding(&vec![tap.t_feat; n], *time_dim, tap.schedule.steps()));
            let (_, feat) = nn::unet_forward(g, xt, te, p);
            feat
        }
    }
}

/// Deterministic epoch permutation.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng(rng::derive_idx(seed, "epoch", epoch as u64)));
    idx
}

/// Loss and summed gradients over `chunks`, each evaluated on its own graph in
/// parallel and reduced in chunk order (results do not depend on thread count).
pub(crate) fn chunked_grads<F>(params: &[Tensor], chunks: &[Vec<usize>], f: F) -> (f64, Vec<Tensor>)
where
    F: Fn(&mut Graph, &[Var], &[usize]) -> Var + Sync,
{
    let parts: Vec<(f64, Vec<Tensor>)> = chunks
        .par_iter()
        .map(|c| {
            let mut g = Graph::new();
            let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
            let loss = f(&mut g, &p, c);
            let value = g.scalar(loss);
            let mut grads = g.backward(loss);
            let gs = p.iter().zip(params).map(|(&v, t)| grads.take(v, t.shape())).collect();
            (value, gs)
        })
        .collect();
    let mut total = 0.0;
    let mut acc: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (v, gs) in parts {
        total += v;
        for (a, g) in acc.iter_mut().zip(&gs) {
            a.add_scaled(g, 1.0);
        }
    }
    (total, acc)
}

/// Splits a minibatch into fixed-size chunks for [`chunked_grads`].
pub(crate) fn split(batch: &[usize], chunk: usize) -> Vec<Vec<usize>> {
    batch.chunks(chunk.max(1)).map(|c| c.to_vec()).collect()
}

pub(crate) fn check_loss(epoch: usize, loss: f64, params: &[Tensor]) -> Result<()> {
    if !loss.is_finite() || params.iter().any(|p| !p.all_finite()) {
        return Err(Error::Diverged { epoch, loss });
    }
    Ok(())
}

pub(crate) fn check_dataset(d: &LabeledDataset, arch: &Arch) -> Result<()> {
    if d.num_classes() < 2 {
        return Err(Error::InvalidConfig(format!("dataset must have at least 2 classes, got {}", d.num_classes())));
    }
    if d.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    if let Some(s) = arch.in_shape() {
        if s != d.shape() {
            return Err(Error::ShapeMismatch {
                context: "training data".into(),
                expected: format!("{:?}", s),
                found: format!("{:?}", d.shape()),
            });
        }
    }
    Ok(())
}

/// Dispatches to the paradigm trainer; SL also returns its jointly trained head.
pub fn train(d: &LabeledDataset, cfg: &ParadigmConfig) -> Result<(Encoder, Option<crate::probe::ProbeHead>, TrainReport)> {
    match cfg.paradigm() {
        Paradigm::Sl => {
            let (e, h, r) = train_supervised(d, cfg)?;
            Ok((e, Some(h), r))
        }
        Paradigm::Cl => {
            let (e, r) = train_contrastive(d, cfg)?;
            Ok((e, None, r))
        }
        Paradigm::Mim => {
            let (e, r) = train_mim(d, cfg)?;
            Ok((e, None, r))
        }
        Paradigm::Dm => {
            let (e, r) = train_diffusion(d, cfg)?;
            Ok((e, None, r))
        }
    }
}
