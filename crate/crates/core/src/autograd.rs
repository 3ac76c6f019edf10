//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly. Node indices are a valid
//! topological order, so the backward sweep walks the tape in reverse.

use std::sync::Arc;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Output index to `(input index, weight)` taps for [`Graph::resample`].
pub type Taps = Arc<Vec<Vec<(u32, f64)>>>;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddTiled(Var, Var),
    MulTiled(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    AvgPool2(Var),
    Upsample2(Var),
    AddChannel(Var, Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    IndexRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    MeanAxis { x: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor, scale: f64 },
    RowNormalize { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    RowSoftmax(Var),
    Resample { x: Var, taps: Taps },
    Clamp { x: Var, lo: f64, hi: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not influence the output.
    pub fn take(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a^T b` with `a: [k,m]`, `b: [k,n]`.
fn matmul_at_b_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a b^T` with `a: [m,n]`, `b: [k,n]`.
fn matmul_a_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + j] += acc;
        }
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (batch, m, n) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => panic!("transpose expects a 2-D or 3-D tensor, got {:?}", s),
    };
    let src = t.data();
    let mut data = vec![0.0; src.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                data[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let l = shape.len();
    shape.swap(l - 2, l - 1);
    Tensor::new(shape, data)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (parameters, attacked inputs).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not a scalar");
        t.data()[0]
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// `x + b` where `b` repeats over the leading elements of `x`.
    pub fn add_tiled(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let bl = tb.len();
        assert!(bl > 0 && tx.len() % bl == 0, "tiled add: {:?} vs {:?}", tx.shape(), tb.shape());
        let bd = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + bd[i % bl]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data);
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddTiled(x, b), ng)
    }

    pub fn mul_tiled(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let bl = tb.len();
        assert!(bl > 0 && tx.len() % bl == 0, "tiled mul: {:?} vs {:?}", tx.shape(), tb.shape());
        let bd = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v * bd[i % bl]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data);
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::MulTiled(x, b), ng)
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {:?} x {:?}", sa, sb);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `[B,m,k] x [B,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm {:?} x {:?}",
            sa,
            sb
        );
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_into(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![bs, m, n], out), Op::BatchMatMul(a, b), ng)
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let t = transpose_last2(self.value(a));
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    /// Stride-1 2-D convolution. `x: [N,C,H,W]`, `w: [O,C,k,k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1] && sw[2] == sw[3], "conv2d {:?} * {:?}", sx, sw);
        assert_eq!(tb.len(), sw[0]);
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let oh = h + 2 * pad + 1 - k;
        let ow = wd + 2 * pad + 1 - k;
        let xd = tx.data();
        let wdt = tw.data();
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                plane.iter_mut().for_each(|v| *v = tb.data()[oi]);
                for ci in 0..c {
                    let xin = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wdt[((oi * c + ci) * k + ky) * k + kx];
                            // output (y, x) reads input (y + ky - pad, x + kx - pad)
                            let y0 = pad.saturating_sub(ky);
                            let y1 = (h + pad).saturating_sub(ky).min(oh);
                            let x0 = pad.saturating_sub(kx);
                            let x1 = (wd + pad).saturating_sub(kx).min(ow);
                            for yy in y0..y1 {
                                let iy = yy + ky - pad;
                                let orow = &mut plane[yy * ow..yy * ow + ow];
                                let irow = &xin[iy * wd..iy * wd + wd];
                                for xx in x0..x1 {
                                    orow[xx] += wv * irow[xx + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(vec![n, o, oh, ow], out), Op::Conv2d { x, w, b, pad }, ng)
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        assert!(s.len() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0, "avg_pool2 on {:?}", s);
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = tx.data();
        let mut out = vec![0.0; nc * oh * ow];
        for p in 0..nc {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = p * h * w;
                    let v = xd[base + 2 * y * w + 2 * xx]
                        + xd[base + 2 * y * w + 2 * xx + 1]
                        + xd[base + (2 * y + 1) * w + 2 * xx]
                        + xd[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[p * oh * ow + y * ow + xx] = 0.25 * v;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![s[0], s[1], oh, ow], out), Op::AvgPool2(x), ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        assert_eq!(s.len(), 4);
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let xd = tx.data();
        let mut out = vec![0.0; nc * oh * ow];
        for p in 0..nc {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = xd[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![s[0], s[1], oh, ow], out), Op::Upsample2(x), ng)
    }

    /// `x: [N,C,H,W] + b: [N,C]` broadcast over the spatial axes.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let s = tx.shape();
        assert!(s.len() == 4 && tb.shape() == [s[0], s[1]], "add_channel {:?} + {:?}", s, tb.shape());
        let hw = s[2] * s[3];
        let bd = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + bd[i / hw]).collect();
        let t = Tensor::new(s.to_vec(), data);
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddChannel(x, b), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let (outer, _, inner) = split3(&first, axis);
        let mut total_mid = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert!(
                s.len() == first.len()
                    && s[..axis] == first[..axis]
                    && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch {:?} vs {:?}",
                s,
                first
            );
            total_mid += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total_mid * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let mid = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total_mid;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(shape, data), Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    /// Gathers leading-dimension rows; indices may repeat.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x).select_rows(idx);
        let ng = self.ng(x);
        self.push(t, Op::IndexRows { x, idx: idx.to_vec() }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let (outer, mid, inner) = split3(&shape, axis);
        let xd = tx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &xd[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / mid as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(new_shape, out), Op::MeanAxis { x, axis }, ng)
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let r = self.reshape(x, &[s[0], s[1], s[2] * s[3]]);
        self.mean_axis(r, 2)
    }

    /// Softmax cross-entropy of `logits: [N,K]` against `targets`.
    ///
    /// With `exclude_diag` (requires `N == K`), entry `(i,i)` is removed from
    /// the softmax support of row `i`. `mean` divides the summed loss by `N`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], exclude_diag: bool, mean: bool) -> Var {
        let tl = self.value(logits);
        let s = tl.shape();
        assert!(s.len() == 2 && s[0] == targets.len(), "cross_entropy {:?} vs {} targets", s, targets.len());
        let (n, k) = (s[0], s[1]);
        if exclude_diag {
            assert_eq!(n, k, "diagonal exclusion needs a square logit matrix");
        }
        let ld = tl.data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let t = targets[i];
            assert!(t < k && !(exclude_diag && t == i), "invalid target {} for row {}", t, i);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if !(exclude_diag && j == i) {
                    mx = mx.max(v);
                }
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if !(exclude_diag && j == i) {
                    let e = (v - mx).exp();
                    probs[i * k + j] = e;
                    z += e;
                }
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            total += mx + z.ln() - row[t];
        }
        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs: Tensor::new(vec![n, k], probs), scale },
            ng,
        )
    }

    /// Divides each row by `sqrt(|row|^2 + eps)`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let (n, d) = (tx.dim0(), tx.row_len());
        let mut norms = Vec::with_capacity(n);
        let mut out = tx.data().to_vec();
        for i in 0..n {
            let row = &mut out[i * d..(i + 1) * d];
            let nr = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= nr);
            norms.push(nr);
        }
        let t = Tensor::new(tx.shape().to_vec(), out);
        let ng = self.ng(x);
        self.push(t, Op::RowNormalize { x, norms }, ng)
    }

    /// Parameter-free layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let rows = tx.len() / d;
        let mut out = tx.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * inv);
            inv_std.push(inv);
        }
        let t = Tensor::new(tx.shape().to_vec(), out);
        let ng = self.ng(x);
        self.push(t, Op::LayerNorm { x, inv_std }, ng)
    }

    /// Softmax over the last axis.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(tx.shape().to_vec(), out);
        let ng = self.ng(x);
        self.push(t, Op::RowSoftmax(x), ng)
    }

    /// Sparse linear resampling: `out[i] = sum_j w_ij * x[src_ij]`.
    pub fn resample(&mut self, x: Var, taps: Taps, out_shape: &[usize]) -> Var {
        let tx = self.value(x);
        assert_eq!(taps.len(), out_shape.iter().product::<usize>());
        let xd = tx.data();
        let data = taps.iter().map(|t| t.iter().map(|&(j, w)| w * xd[j as usize]).sum()).collect();
        let t = Tensor::new(out_shape.to_vec(), data);
        let ng = self.ng(x);
        self.push(t, Op::Resample { x, taps }, ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(t, Op::Clamp { x, lo, hi }, ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(g.shape().to_vec(), gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                let gb = Tensor::new(g.shape().to_vec(), gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::AddTiled(x, b) => {
                self.acc(grads, *x, g.clone());
                let bl = self.value(*b).len();
                self.acc_with(grads, *b, |gb| {
                    for (i, v) in gd.iter().enumerate() {
                        gb[i % bl] += v;
                    }
                });
            }
            Op::MulTiled(x, b) => {
                let (tx, tb) = (self.value(*x), self.value(*b));
                let bl = tb.len();
                let bd = tb.data();
                let xd = tx.data();
                self.acc_with(grads, *x, |gx| {
                    for (i, v) in gd.iter().enumerate() {
                        gx[i] += v * bd[i % bl];
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for (i, v) in gd.iter().enumerate() {
                        gb[i % bl] += v * xd[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                self.acc_with(grads, *a, |ga| matmul_a_bt_into(gd, tb.data(), ga, m, n, k));
                self.acc_with(grads, *b, |gb| matmul_at_b_into(ta.data(), gd, gb, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                self.acc_with(grads, *a, |ga| {
                    for i in 0..bs {
                        matmul_a_bt_into(
                            &gd[i * m * n..(i + 1) * m * n],
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for i in 0..bs {
                        matmul_at_b_into(
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Transpose(a) => self.acc(grads, *a, transpose_last2(g)),
            Op::Relu(a) => {
                let ta = self.value(*a);
                let gx = gd.iter().zip(ta.data()).map(|(v, &x)| if x > 0.0 { *v } else { 0.0 }).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), gx));
            }
            Op::Tanh(a) => {
                let gx = gd.iter().zip(out.data()).map(|(v, y)| v * (1.0 - y * y)).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), gx));
            }
            Op::Conv2d { x, w, b, pad } => self.conv2d_backward(*x, *w, *b, *pad, g, grads),
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                self.acc_with(grads, *x, |gx| {
                    for p in 0..nc {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[p * h * w + y * w + xx] += 0.25 * gd[p * oh * ow + (y / 2) * ow + xx / 2];
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (2 * h, 2 * w);
                self.acc_with(grads, *x, |gx| {
                    for p in 0..nc {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx[p * h * w + (y / 2) * w + xx / 2] += gd[p * oh * ow + y * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::AddChannel(x, b) => {
                self.acc(grads, *x, g.clone());
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                self.acc_with(grads, *b, |gb| {
                    for (i, v) in gd.iter().enumerate() {
                        gb[i / hw] += v;
                    }
                });
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, g.clone().reshape(&shape));
            }
            Op::Concat { parts, axis } => {
                let (outer, total_mid, inner) = split3(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let mid = self.shape(p)[*axis];
                    self.acc_with(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &gd[(o * total_mid + offset) * inner..(o * total_mid + offset + mid) * inner];
                            for (d, s) in gp[o * mid * inner..(o + 1) * mid * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += mid;
                }
            }
            Op::IndexRows { x, idx } => {
                let r = self.value(*x).row_len();
                self.acc_with(grads, *x, |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        for (d, s) in gx[i * r..(i + 1) * r].iter_mut().zip(&gd[k * r..(k + 1) * r]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::full(&s, gd[0]));
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, mid, inner) = split3(&shape, *axis);
                let inv = 1.0 / mid as f64;
                self.acc_with(grads, *x, |gx| {
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                gx[(o * mid + m) * inner + i] += inv * gd[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, scale } => {
                let k = probs.shape()[1];
                let c = gd[0] * scale;
                self.acc_with(grads, *logits, |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            gl[i * k + j] += c * probs.data()[i * k + j];
                        }
                        gl[i * k + t] -= c;
                    }
                });
            }
            Op::RowNormalize { x, norms } => {
                let tx = self.value(*x);
                let d = tx.row_len();
                let xd = tx.data();
                self.acc_with(grads, *x, |gx| {
                    for (i, &nr) in norms.iter().enumerate() {
                        let xr = &xd[i * d..(i + 1) * d];
                        let gr = &gd[i * d..(i + 1) * d];
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let n3 = nr * nr * nr;
                        for j in 0..d {
                            gx[i * d + j] += gr[j] / nr - xr[j] * dot / n3;
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let d = *out.shape().last().unwrap();
                let yd = out.data();
                self.acc_with(grads, *x, |gx| {
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let yr = &yd[r * d..(r + 1) * d];
                        let gr = &gd[r * d..(r + 1) * d];
                        let sg: f64 = gr.iter().sum();
                        let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += inv / d as f64 * (d as f64 * gr[j] - sg - yr[j] * sgy);
                        }
                    }
                });
            }
            Op::RowSoftmax(x) => {
                let d = *out.shape().last().unwrap();
                let yd = out.data();
                self.acc_with(grads, *x, |gx| {
                    for r in 0..yd.len() / d {
                        let yr = &yd[r * d..(r + 1) * d];
                        let gr = &gd[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Resample { x, taps } => {
                self.acc_with(grads, *x, |gx| {
                    for (i, t) in taps.iter().enumerate() {
                        for &(j, w) in t {
                            gx[j as usize] += w * gd[i];
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let tx = self.value(*x);
                let gx = gd
                    .iter()
                    .zip(tx.data())
                    .map(|(v, &xv)| if xv >= *lo && xv <= *hi { *v } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), gx));
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Var, pad: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let gd = g.data();
        let xd = tx.data();
        let wdt = tw.data();
        self.acc_with(grads, b, |gb| {
            for ni in 0..n {
                for oi in 0..o {
                    gb[oi] += gd[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow].iter().sum::<f64>();
                }
            }
        });
        let need_w = self.ng(w);
        let need_x = self.ng(x);
        let mut gw = if need_w { vec![0.0; tw.len()] } else { Vec::new() };
        let mut gx = if need_x { vec![0.0; tx.len()] } else { Vec::new() };
        for ni in 0..n {
            for oi in 0..o {
                let gplane = &gd[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                for ci in 0..c {
                    let xoff = (ni * c + ci) * h * wd;
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((oi * c + ci) * k + ky) * k + kx;
                            let wv = if need_x { wdt[widx] } else { 0.0 };
                            let y0 = pad.saturating_sub(ky);
                            let y1 = (h + pad).saturating_sub(ky).min(oh);
                            let x0 = pad.saturating_sub(kx);
                            let x1 = (wd + pad).saturating_sub(kx).min(ow);
                            let mut accw = 0.0;
                            for yy in y0..y1 {
                                let iy = yy + ky - pad;
                                let grow = &gplane[yy * ow..yy * ow + ow];
                                let ibase = xoff + iy * wd;
                                for xx in x0..x1 {
                                    let ix = ibase + xx + kx - pad;
                                    if need_w {
                                        accw += grow[xx] * xd[ix];
                                    }
                                    if need_x {
                                        gx[ix] += grow[xx] * wv;
                                    }
                                }
                            }
                            if need_w {
                                gw[widx] += accw;
                            }
                        }
                    }
                }
            }
        }
        if need_w {
            self.acc(grads, w, Tensor::new(sw.to_vec(), gw));
        }
        if need_x {
            self.acc(grads, x, Tensor::new(sx.to_vec(), gx));
        }
    }
}
