//! Desk-scale network architectures and their forward passes on a [`Graph`].
//!
//! Parameters live outside the graph as a flat `Vec<Tensor>` whose order is
//! fixed by [`Arch::param_specs`]; a forward pass receives them as graph
//! leaves so the caller decides whether they are trainable.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Taps, Var};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// Fully connected stack over flattened inputs.
    Mlp { dims: Vec<usize>, act: Activation, final_act: bool },
    /// Two conv/pool stages and a dense feature layer.
    Cnn { in_shape: [usize; 3], c1: usize, c2: usize, hidden: usize },
    /// Patch-token transformer trunk with mean token pooling.
    PatchTransformer { in_shape: [usize; 3], patch: usize, dim: usize, depth: usize, mlp_dim: usize },
    /// One down/up level U-shaped noise predictor with a time embedding.
    UNet { in_shape: [usize; 3], base: usize, time_dim: usize },
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    /// Fixed init scale overriding the fan-in rule (positional tables, mask tokens).
    pub init_scale: Option<f64>,
}

pub(crate) fn spec(name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamSpec {
    ParamSpec { name: name.into(), shape: shape.to_vec(), fan_in, init_scale: None }
}

const BLOCK_PARAMS: usize = 8;

pub(crate) fn block_specs(prefix: &str, d: usize, m: usize) -> Vec<ParamSpec> {
    vec![
        spec(format!("{prefix}.wq"), &[d, d], d),
        spec(format!("{prefix}.wk"), &[d, d], d),
        spec(format!("{prefix}.wv"), &[d, d], d),
        spec(format!("{prefix}.wo"), &[d, d], d),
        spec(format!("{prefix}.w1"), &[d, m], d),
        spec(format!("{prefix}.b1"), &[m], d),
        spec(format!("{prefix}.w2"), &[m, d], m),
        spec(format!("{prefix}.b2"), &[d], m),
    ]
}

impl Arch {
    pub fn id(&self) -> String {
        match self {
            Arch::Mlp { dims, act, .. } => {
                let d: Vec<String> = dims.iter().map(|v| v.to_string()).collect();
                format!("mlp-{}-{:?}", d.join("x"), act).to_lowercase()
            }
            Arch::Cnn { c1, c2, hidden, .. } => format!("cnn-{c1}-{c2}-{hidden}"),
            Arch::PatchTransformer { patch, dim, depth, .. } => format!("vit-p{patch}-d{dim}-l{depth}"),
            Arch::UNet { base, .. } => format!("unet-b{base}"),
        }
    }

    pub fn in_shape(&self) -> Option<[usize; 3]> {
        match self {
            Arch::Mlp { .. } => None,
            Arch::Cnn { in_shape, .. } | Arch::PatchTransformer { in_shape, .. } | Arch::UNet { in_shape, .. } => {
                Some(*in_shape)
            }
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Arch::Mlp { dims, .. } => *dims.last().unwrap(),
            Arch::Cnn { hidden, .. } => *hidden,
            Arch::PatchTransformer { dim, .. } => *dim,
            Arch::UNet { base, .. } => *base,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            Arch::Mlp { dims, .. } => {
                let mut v = Vec::new();
                for (i, w) in dims.windows(2).enumerate() {
                    v.push(spec(format!("l{i}.w"), &[w[0], w[1]], w[0]));
                    v.push(spec(format!("l{i}.b"), &[w[1]], w[0]));
                }
                v
            }
            Arch::Cnn { in_shape: [c, h, w], c1, c2, hidden } => {
                let flat = c2 * (h / 4) * (w / 4);
                vec![
                    spec("conv1.w", &[*c1, *c, 3, 3], c * 9),
                    spec("conv1.b", &[*c1], c * 9),
                    spec("conv2.w", &[*c2, *c1, 3, 3], c1 * 9),
                    spec("conv2.b", &[*c2], c1 * 9),
                    spec("fc.w", &[flat, *hidden], flat),
                    spec("fc.b", &[*hidden], flat),
                ]
            }
            Arch::PatchTransformer { in_shape: [c, h, w], patch, dim, depth, mlp_dim } => {
                let pd = c * patch * patch;
                let tokens = (h / patch) * (w / patch);
                let mut v = vec![
                    spec("embed.w", &[pd, *dim], pd),
                    spec("embed.b", &[*dim], pd),
                    ParamSpec { name: "pos".into(), shape: vec![tokens, *dim], fan_in: 1, init_scale: Some(0.02) },
                ];
                for l in 0..*depth {
                    v.extend(block_specs(&format!("block{l}"), *dim, *mlp_dim));
                }
                v
            }
            Arch::UNet { in_shape: [c, _, _], base, time_dim } => {
                let b = *base;
                vec![
                    spec("down.w", &[b, *c, 3, 3], c * 9),
                    spec("down.b", &[b], c * 9),
                    spec("mid.w", &[2 * b, b, 3, 3], b * 9),
                    spec("mid.b", &[2 * b], b * 9),
                    spec("up.w", &[b, 3 * b, 3, 3], 3 * b * 9),
                    spec("up.b", &[b], 3 * b * 9),
                    spec("out.w", &[*c, b, 3, 3], b * 9),
                    spec("out.b", &[*c], b * 9),
                    spec("temb1.w", &[*time_dim, b], *time_dim),
                    spec("temb1.b", &[b], *time_dim),
                    spec("temb2.w", &[*time_dim, 2 * b], *time_dim),
                    spec("temb2.b", &[2 * b], *time_dim),
                ]
            }
        }
    }

    pub fn init(&self, seed: u64) -> Vec<Tensor> {
        init_params(&self.param_specs(), seed)
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization, one derived stream per tensor.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Vec<Tensor> {
    specs
        .iter()
        .map(|s| {
            let bound = s.init_scale.unwrap_or(1.0 / (s.fan_in as f64).sqrt());
            let mut r = rng::rng(rng::derive(seed, &s.name));
            Tensor::from_fn(&s.shape, |_| r.gen_range(-bound..bound))
        })
        .collect()
}

/// `x: [N, din] @ w: [din, dout] + b`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_tiled(y, b)
}

pub fn mlp_forward(g: &mut Graph, x: Var, p: &[Var], act: Activation, final_act: bool) -> Var {
    let n = g.shape(x)[0];
    let flat = g.value(x).row_len();
    let mut h = g.reshape(x, &[n, flat]);
    let layers = p.len() / 2;
    for l in 0..layers {
        h = linear(g, h, p[2 * l], p[2 * l + 1]);
        if l + 1 < layers || final_act {
            h = act.apply(g, h);
        }
    }
    h
}

/// Keeps the even rows and columns of `x: [N,C,H,W]`.
pub fn subsample2(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut taps = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                taps.push(vec![((nc * h * w + 2 * y * w + 2 * xx) as u32, 1.0)]);
            }
        }
    }
    g.resample(x, Arc::new(taps), &[n, c, ho, wo])
}

/// Stride-2 first stage (conv then subsample), then conv and average pooling.
pub fn cnn_forward(g: &mut Graph, x: Var, p: &[Var]) -> Var {
    let h = g.conv2d(x, p[0], p[1], 1);
    let h = g.relu(h);
    let h = subsample2(g, h);
    let h = g.conv2d(h, p[2], p[3], 1);
    let h = g.relu(h);
    let h = g.avg_pool2(h);
    let s = g.shape(h).to_vec();
    let h = g.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
    let h = linear(g, h, p[4], p[5]);
    g.relu(h)
}

/// Permutation taps turning `[N,C,H,W]` into patch rows `[N*P, C*patch*patch]`.
pub fn patchify_taps(n: usize, [c, h, w]: [usize; 3], patch: usize) -> Taps {
    let (gh, gw) = (h / patch, w / patch);
    let mut taps = Vec::with_capacity(n * c * h * w);
    for ni in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let src = ((ni * c + ci) * h + py * patch + dy) * w + px * patch + dx;
                            taps.push(vec![(src as u32, 1.0)]);
                        }
                    }
                }
            }
        }
    }
    Arc::new(taps)
}

pub fn patchify(g: &mut Graph, x: Var, in_shape: [usize; 3], patch: usize) -> Var {
    let n = g.shape(x)[0];
    let [c, h, w] = in_shape;
    let tokens = (h / patch) * (w / patch);
    let taps = patchify_taps(n, in_shape, patch);
    g.resample(x, taps, &[n * tokens, c * patch * patch])
}

/// Pre-norm single-head transformer block over `h: [n*t, d]`.
pub fn transformer_block(g: &mut Graph, h: Var, n: usize, t: usize, p: &[Var]) -> Var {
    let d = g.shape(h)[1];
    let x = g.layer_norm(h, 1e-5);
    let q = g.matmul(x, p[0]);
    let k = g.matmul(x, p[1]);
    let v = g.matmul(x, p[2]);
    let q = g.reshape(q, &[n, t, d]);
    let k = g.reshape(k, &[n, t, d]);
    let v = g.reshape(v, &[n, t, d]);
    let kt = g.transpose(k);
    let scores = g.bmm(q, kt);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.row_softmax(scores);
    let ctx = g.bmm(attn, v);
    let ctx = g.reshape(ctx, &[n * t, d]);
    let o = g.matmul(ctx, p[3]);
    let h = g.add(h, o);
    let x = g.layer_norm(h, 1e-5);
    let m = linear(g, x, p[4], p[5]);
    let m = g.relu(m);
    let m = linear(g, m, p[6], p[7]);
    g.add(h, m)
}

/// Runs the trunk over token rows `[n*t, patch_dim]` placed at `positions`
/// (length `n*t`, indices into the positional table). Returns `[n*t, dim]`.
pub fn transformer_tokens(g: &mut Graph, tokens: Var, positions: &[usize], n: usize, t: usize, p: &[Var]) -> Var {
    let h = linear(g, tokens, p[0], p[1]);
    let pos = g.index_rows(p[2], positions);
    let mut h = g.add(h, pos);
    for blk in p[3..].chunks(BLOCK_PARAMS) {
        h = transformer_block(g, h, n, t, blk);
    }
    g.layer_norm(h, 1e-5)
}

/// Mean-pooled token features over every patch of `x: [N,C,H,W]`.
pub fn transformer_features(g: &mut Graph, x: Var, in_shape: [usize; 3], patch: usize, p: &[Var]) -> Var {
    let n = g.shape(x)[0];
    let tokens_per = (in_shape[1] / patch) * (in_shape[2] / patch);
    let toks = patchify(g, x, in_shape, patch);
    let positions: Vec<usize> = (0..n).flat_map(|_| 0..tokens_per).collect();
    let h = transformer_tokens(g, toks, &positions, n, tokens_per, p);
    let d = g.shape(h)[1];
    let h = g.reshape(h, &[n, tokens_per, d]);
    g.mean_axis(h, 1)
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn time_embedding(ts: &[usize], dim: usize, t_max: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |i| {
        let (r, j) = (i / dim, i % dim);
        let pos = ts[r] as f64 / t_max.max(1) as f64 * 1000.0;
        let f = (j % half.max(1)) as f64;
        let freq = (-(10000f64).ln() * f / half.max(1) as f64).exp();
        if j < half {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Noise prediction and the pooled decoder tap `[N, base]`.
pub fn unet_forward(g: &mut Graph, x: Var, temb: Var, p: &[Var]) -> (Var, Var) {
    let t1 = linear(g, temb, p[8], p[9]);
    let t2 = linear(g, temb, p[10], p[11]);
    let h1 = g.conv2d(x, p[0], p[1], 1);
    let h1 = g.add_channel(h1, t1);
    let h1 = g.relu(h1);
    let d = g.avg_pool2(h1);
    let h2 = g.conv2d(d, p[2], p[3], 1);
    let h2 = g.add_channel(h2, t2);
    let h2 = g.relu(h2);
    let u = g.upsample2(h2);
    let cat = g.concat(&[u, h1], 1);
    let h3 = g.conv2d(cat, p[4], p[5], 1);
    let h3 = g.relu(h3);
    let tap = g.global_avg_pool(h3);
    let out = g.conv2d(h3, p[6], p[7], 1);
    (out, tap)
}
