//! Reverse-mode automatic differentiation over an append-only op tape.
//!
//! Forward values are computed eagerly as the graph is built; `backward`
//! walks the tape in reverse, accumulating gradients only along paths that
//! reach trainable leaves. Frozen weights enter as constants, so gradient
//! flow passes through them without ever materializing their gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{self, conv_out_dim};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Silu(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        attn: Tensor,
    },
    /// Rows of a (T, d) tensor scaled by a constant length-T mask.
    MaskRows {
        x: usize,
        mask: Tensor,
    },
    /// Elementwise product with a captured constant of identical shape.
    MulConst {
        x: usize,
        c: Tensor,
    },
    /// Per-channel bias broadcast over the spatial dims of a (C, H, W) map.
    BiasChannels {
        x: usize,
        b: usize,
    },
    /// (C, H, W) -> (H·W, C).
    ToTokens {
        x: usize,
    },
    /// (H·W, C) -> (C, H, W).
    FromTokens {
        x: usize,
        h: usize,
        w: usize,
    },
    Crop2d {
        x: usize,
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
    },
    UpsampleNearest2 {
        x: usize,
    },
    /// Sum of squared elements, produces shape [1].
    SumSquares {
        x: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

const GROUP_NORM_EPS: f64 = 1e-5;

/// Append-only computation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Constant leaf; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; `backward` reports its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Sub(a.0, b.0), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), needs))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let value = self.value(x).scale(s);
        let needs = self.needs(x.0);
        self.push(value, Op::Scale(x.0, s), needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let needs = self.needs(x.0);
        self.push(value, Op::Silu(x.0), needs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = nn::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let needs = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = nn::linear(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            needs,
        ))
    }

    /// Group normalization over a (C, H, W) map with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let value = group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups)?;
        let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
            },
            needs,
        ))
    }

    /// Scaled-dot attention; the softmax map is retained for the backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (out, attn) = nn::scaled_dot_attention(self.value(q), self.value(k), self.value(v))?;
        let needs = self.needs(q.0) || self.needs(k.0) || self.needs(v.0);
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                attn,
            },
            needs,
        ))
    }

    /// Multiplies row t of a (T, d) tensor by mask[t]; the mask is a constant.
    pub fn mask_rows(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        let (t, d) = (xv.shape()[0], xv.shape()[1]);
        if mask.numel() != t {
            return Err(Error::shapes("mask_rows", mask.shape(), xv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..t {
            let m = mask.data()[r];
            for c in &mut value.data_mut()[r * d..(r + 1) * d] {
                *c *= m;
            }
        }
        let needs = self.needs(x.0);
        Ok(self.push(
            value,
            Op::MaskRows {
                x: x.0,
                mask: mask.clone(),
            },
            needs,
        ))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let value = self.value(x).mul(c)?;
        let needs = self.needs(x.0);
        Ok(self.push(
            value,
            Op::MulConst {
                x: x.0,
                c: c.clone(),
            },
            needs,
        ))
    }

    /// Adds a per-channel bias vector to every spatial position of (C, H, W).
    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.shape().len() != 3 || bv.shape() != [xv.shape()[0]] {
            return Err(Error::shapes("bias_channels", bv.shape(), xv.shape()));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut value = xv.clone();
        for ci in 0..c {
            let add = bv.data()[ci];
            for v in &mut value.data_mut()[ci * h * w..(ci + 1) * h * w] {
                *v += add;
            }
        }
        let needs = self.needs(x.0) || self.needs(b.0);
        Ok(self.push(value, Op::BiasChannels { x: x.0, b: b.0 }, needs))
    }

    /// (C, H, W) -> (H·W, C) token layout.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(Error::shapes("to_tokens", xv.shape(), &[0, 0, 0]));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut data = vec![0.0f32; c * h * w];
        for ci in 0..c {
            for p in 0..h * w {
                data[p * c + ci] = xv.data()[ci * h * w + p];
            }
        }
        let value = Tensor::new(&[h * w, c], data)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::ToTokens { x: x.0 }, needs))
    }

    /// (H·W, C) -> (C, H, W).
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.shape()[0] != h * w {
            return Err(Error::shapes("from_tokens", xv.shape(), &[h * w, 0]));
        }
        let c = xv.shape()[1];
        let mut data = vec![0.0f32; c * h * w];
        for p in 0..h * w {
            for ci in 0..c {
                data[ci * h * w + p] = xv.data()[p * c + ci];
            }
        }
        let value = Tensor::new(&[c, h, w], data)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::FromTokens { x: x.0, h, w }, needs))
    }

    /// Spatial crop of a (C, H, W) map.
    pub fn crop2d(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(Error::shapes("crop2d", xv.shape(), &[0, 0, 0]));
        }
        let (c, fh, fw) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if y0 + h > fh || x0 + w > fw {
            return Err(Error::invalid(format!(
                "crop {h}x{w}+{y0}+{x0} exceeds feature map {fh}x{fw}"
            )));
        }
        let mut data = vec![0.0f32; c * h * w];
        for ci in 0..c {
            for r in 0..h {
                for s in 0..w {
                    data[(ci * h + r) * w + s] = xv.data()[(ci * fh + y0 + r) * fw + x0 + s];
                }
            }
        }
        let value = Tensor::new(&[c, h, w], data)?;
        let needs = self.needs(x.0);
        Ok(self.push(
            value,
            Op::Crop2d {
                x: x.0,
                y0,
                x0,
                h,
                w,
            },
            needs,
        ))
    }

    /// Nearest-neighbour 2x upsampling of (C, H, W).
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(Error::shapes("upsample", xv.shape(), &[0, 0, 0]));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut data = vec![0.0f32; c * 4 * h * w];
        for ci in 0..c {
            for r in 0..2 * h {
                for s in 0..2 * w {
                    data[(ci * 2 * h + r) * 2 * w + s] = xv.data()[(ci * h + r / 2) * w + s / 2];
                }
            }
        }
        let value = Tensor::new(&[c, 2 * h, 2 * w], data)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::UpsampleNearest2 { x: x.0 }, needs))
    }

    /// Σ x², shape [1].
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares() as f32;
        let needs = self.needs(x.0);
        self.push(
            Tensor::new(&[1], vec![s]).unwrap(),
            Op::SumSquares { x: x.0 },
            needs,
        )
    }

    /// Mean squared error between a node and a constant target, shape [1].
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = self.constant(target.clone());
        let diff = self.sub(pred, t)?;
        let ss = self.sum_squares(diff);
        Ok(self.scale(ss, 1.0 / target.numel() as f32))
    }

    /// Reverse pass from a scalar loss. Returns gradients for trainable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&[1], 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let contributions = self.backward_node(i, &g)?;
            for (parent, grad) in contributions {
                if !self.nodes[parent].needs_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => *acc = acc.add(&grad)?,
                    slot => *slot = Some(grad),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut map = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].needs_grad {
                    map.insert(i, g);
                }
            }
        }
        Ok(Gradients { map })
    }

    fn backward_node(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let out = match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                vec![(*a, g.mul(bv)?), (*b, g.mul(av)?)]
            }
            Op::Scale(x, s) => vec![(*x, g.scale(*s))],
            Op::Silu(x) => {
                let xv = &self.nodes[*x].value;
                let dg = xv.zip_map(g, |x, g| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })?;
                vec![(*x, dg)]
            }
            Op::Conv2d { x, w, b, stride, pad } => conv2d_backward(
                &self.nodes[*x].value,
                &self.nodes[*w].value,
                g,
                *stride,
                *pad,
            )
            .map(|(dx, dw, db)| vec![(*x, dx), (*w, dw), (*b, db)])?,
            Op::Linear { x, w, b } => {
                linear_backward(&self.nodes[*x].value, &self.nodes[*w].value, g)
                    .map(|(dx, dw, db)| vec![(*x, dx), (*w, dw), (*b, db)])?
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
            } => {
                let (dx, dgamma, dbeta) = group_norm_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*gamma].value,
                    g,
                    *groups,
                )?;
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Attention { q, k, v, attn } => {
                let (dq, dk, dv) = attention_backward(
                    &self.nodes[*q].value,
                    &self.nodes[*k].value,
                    &self.nodes[*v].value,
                    attn,
                    g,
                )?;
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::MaskRows { x, mask } => {
                let d = g.shape()[1];
                let mut dg = g.clone();
                for r in 0..g.shape()[0] {
                    let m = mask.data()[r];
                    for c in &mut dg.data_mut()[r * d..(r + 1) * d] {
                        *c *= m;
                    }
                }
                vec![(*x, dg)]
            }
            Op::MulConst { x, c } => vec![(*x, g.mul(c)?)],
            Op::BiasChannels { x, b } => {
                let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let mut db = vec![0.0f32; c];
                for ci in 0..c {
                    let sum: f64 = g.data()[ci * h * w..(ci + 1) * h * w]
                        .iter()
                        .map(|&v| v as f64)
                        .sum();
                    db[ci] = sum as f32;
                }
                vec![(*x, g.clone()), (*b, Tensor::new(&[c], db)?)]
            }
            Op::ToTokens { x } => {
                let (t, c) = (g.shape()[0], g.shape()[1]);
                let xs = self.nodes[*x].value.shape();
                let (h, w) = (xs[1], xs[2]);
                let mut data = vec![0.0f32; c * t];
                for p in 0..t {
                    for ci in 0..c {
                        data[ci * t + p] = g.data()[p * c + ci];
                    }
                }
                vec![(*x, Tensor::new(&[c, h, w], data)?)]
            }
            Op::FromTokens { x, h, w } => {
                let c = g.shape()[0];
                let mut data = vec![0.0f32; h * w * c];
                for p in 0..h * w {
                    for ci in 0..c {
                        data[p * c + ci] = g.data()[ci * h * w + p];
                    }
                }
                vec![(*x, Tensor::new(&[h * w, c], data)?)]
            }
            Op::Crop2d { x, y0, x0, h, w } => {
                let xs = self.nodes[*x].value.shape();
                let (c, fh, fw) = (xs[0], xs[1], xs[2]);
                let mut data = vec![0.0f32; c * fh * fw];
                for ci in 0..c {
                    for r in 0..*h {
                        for s in 0..*w {
                            data[(ci * fh + y0 + r) * fw + x0 + s] =
                                g.data()[(ci * h + r) * w + s];
                        }
                    }
                }
                vec![(*x, Tensor::new(&[c, fh, fw], data)?)]
            }
            Op::UpsampleNearest2 { x } => {
                let xs = self.nodes[*x].value.shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut data = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    for r in 0..2 * h {
                        for s in 0..2 * w {
                            data[(ci * h + r / 2) * w + s / 2] +=
                                g.data()[(ci * 2 * h + r) * 2 * w + s];
                        }
                    }
                }
                vec![(*x, Tensor::new(&[c, h, w], data)?)]
            }
            Op::SumSquares { x } => {
                let s = g.data()[0];
                let dg = self.nodes[*x].value.scale(2.0 * s);
                vec![(*x, dg)]
            }
        };
        Ok(out)
    }
}

/// Gradients for trainable leaves, keyed by their `Var`.
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn group_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::shapes("group_norm input", x.shape(), &[0, 0, 0]));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c % groups != 0 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::invalid(format!(
            "group_norm: channels {c} / groups {groups} / affine {:?}",
            gamma.shape()
        )));
    }
    let per_group = c / groups * h * w;
    let mut out = x.clone();
    for gi in 0..groups {
        let span = gi * per_group..(gi + 1) * per_group;
        let slice = &x.data()[span.clone()];
        let mean: f64 = slice.iter().map(|&v| v as f64).sum::<f64>() / per_group as f64;
        let var: f64 =
            slice.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per_group as f64;
        let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for (off, v) in out.data_mut()[span].iter_mut().enumerate() {
            let ci = (gi * per_group + off) / (h * w);
            let xhat = (*v as f64 - mean) * inv;
            *v = (xhat * gamma.data()[ci] as f64 + beta.data()[ci] as f64) as f32;
        }
    }
    out.ensure_finite("group_norm")?;
    Ok(out)
}

fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    groups: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let per_group = c / groups * h * w;
    let plane = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for gi in 0..groups {
        let span = gi * per_group..(gi + 1) * per_group;
        let xs = &x.data()[span.clone()];
        let gs = &g.data()[span.clone()];
        let mean: f64 = xs.iter().map(|&v| v as f64).sum::<f64>() / per_group as f64;
        let var: f64 = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
            / per_group as f64;
        let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();

        // Accumulate dL/dxhat and the two reduction terms of the norm backward.
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        let mut dxhat = vec![0.0f64; per_group];
        for off in 0..per_group {
            let ci = (gi * per_group + off) / plane;
            let xhat = (xs[off] as f64 - mean) * inv;
            let gv = gs[off] as f64;
            dgamma[ci] += gv * xhat;
            dbeta[ci] += gv;
            let d = gv * gamma.data()[ci] as f64;
            dxhat[off] = d;
            sum_dxhat += d;
            sum_dxhat_xhat += d * xhat;
        }
        let n = per_group as f64;
        for off in 0..per_group {
            let xhat = (xs[off] as f64 - mean) * inv;
            let v = inv * (dxhat[off] - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
            dx.data_mut()[gi * per_group + off] = v as f32;
        }
    }
    Ok((
        dx,
        Tensor::new(&[c], dgamma.iter().map(|&v| v as f32).collect())?,
        Tensor::new(&[c], dbeta.iter().map(|&v| v as f32).collect())?,
    ))
}

/// C(m,n) = A(k,m)ᵀ · B(k,n), f64 accumulation.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut acc = vec![0.0f64; m * n];
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a_row[i] as f64;
            let dst = &mut acc[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += av * b_row[j] as f64;
            }
        }
    }
    for (o, &v) in out.iter_mut().zip(acc.iter()) {
        *o = v as f32;
    }
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c_in, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = conv_out_dim(h, kh, stride, pad).unwrap();
    let wo = conv_out_dim(wdt, kw, stride, pad).unwrap();
    let k2 = c_in * kh * kw;
    let out_plane = ho * wo;

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = vec![0.0f64; c_out];
    let mut dw_item = vec![0.0f32; c_out * k2];

    for bi in 0..n {
        let x_item = &x.data()[bi * c_in * h * wdt..(bi + 1) * c_in * h * wdt];
        let g_item = &g.data()[bi * c_out * out_plane..(bi + 1) * c_out * out_plane];

        let cols = nn::im2col(x_item, c_in, h, wdt, kh, kw, stride, pad, ho, wo);
        // dW += g · colsᵀ
        nn::gemm_nt(c_out, out_plane, k2, g_item, &cols, &mut dw_item);
        for (dst, &v) in dw.data_mut().iter_mut().zip(dw_item.iter()) {
            *dst += v;
        }
        // db += row sums of g
        for o in 0..c_out {
            db[o] += g_item[o * out_plane..(o + 1) * out_plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        // dx = col2im(Wᵀ · g)
        let mut dcols = vec![0.0f32; k2 * out_plane];
        gemm_tn(k2, c_out, out_plane, w.data(), g_item, &mut dcols);
        let dx_item = nn::col2im(&dcols, c_in, h, wdt, kh, kw, stride, pad, ho, wo);
        for (dst, &v) in dx.data_mut()[bi * c_in * h * wdt..(bi + 1) * c_in * h * wdt]
            .iter_mut()
            .zip(dx_item.iter())
        {
            *dst += v;
        }
    }
    Ok((
        dx,
        dw,
        Tensor::new(&[c_out], db.iter().map(|&v| v as f32).collect())?,
    ))
}

fn linear_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / d_in;
    // dx = g · W
    let mut dx = vec![0.0f32; rows * d_in];
    nn::gemm(rows, d_out, d_in, g.data(), w.data(), &mut dx);
    // dW = gᵀ · x
    let mut dw = vec![0.0f32; d_out * d_in];
    gemm_tn(d_out, rows, d_in, g.data(), x.data(), &mut dw);
    // db = column sums of g
    let mut db = vec![0.0f64; d_out];
    for r in 0..rows {
        for o in 0..d_out {
            db[o] += g.data()[r * d_out + o] as f64;
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(&[d_out, d_in], dw)?,
        Tensor::new(&[d_out], db.iter().map(|&v| v as f32).collect())?,
    ))
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    attn: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (t_q, d) = (q.shape()[0], q.shape()[1]);
    let (t_k, d_v) = (v.shape()[0], v.shape()[1]);
    let scale = 1.0 / (d as f64).sqrt();

    // dV = Aᵀ · g
    let mut dv = vec![0.0f32; t_k * d_v];
    gemm_tn(t_k, t_q, d_v, attn.data(), g.data(), &mut dv);

    // dA = g · Vᵀ
    let mut da = vec![0.0f32; t_q * t_k];
    nn::gemm_nt(t_q, d_v, t_k, g.data(), v.data(), &mut da);

    // dS = A ⊙ (dA − rowsum(dA ⊙ A)), then scaled by 1/√d
    let mut ds = vec![0.0f32; t_q * t_k];
    for i in 0..t_q {
        let a_row = &attn.data()[i * t_k..(i + 1) * t_k];
        let da_row = &da[i * t_k..(i + 1) * t_k];
        let dot: f64 = a_row
            .iter()
            .zip(da_row)
            .map(|(&a, &d)| a as f64 * d as f64)
            .sum();
        for j in 0..t_k {
            ds[i * t_k + j] =
                ((a_row[j] as f64) * (da_row[j] as f64 - dot) * scale) as f32;
        }
    }

    // dQ = dS · K, dK = dSᵀ · Q
    let mut dq = vec![0.0f32; t_q * d];
    nn::gemm(t_q, t_k, d, &ds, k.data(), &mut dq);
    let mut dk = vec![0.0f32; t_k * d];
    gemm_tn(t_k, t_q, d, &ds, q.data(), &mut dk);

    Ok((
        Tensor::new(&[t_q, d], dq)?,
        Tensor::new(&[t_k, d], dk)?,
        Tensor::new(&[t_k, d_v], dv)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences on a single leaf, compared against the tape.
    ///
    /// `build` must construct the same graph for each perturbed copy of the
    /// leaf value and return the scalar loss.
    fn check_gradient(
        leaf_value: &Tensor,
        build: impl Fn(&mut Graph, Var) -> Var,
        rel_tol: f64,
    ) {
        let mut g = Graph::new();
        let leaf = g.param(leaf_value.clone());
        let loss = build(&mut g, leaf);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(leaf).expect("missing gradient");

        let eps = 1e-3f32;
        for i in 0..leaf_value.numel() {
            let mut plus = leaf_value.clone();
            plus.data_mut()[i] += eps;
            let mut minus = leaf_value.clone();
            minus.data_mut()[i] -= eps;

            let mut gp = Graph::new();
            let lp = gp.param(plus);
            let loss_p = build(&mut gp, lp);
            let mut gm = Graph::new();
            let lm = gm.param(minus);
            let loss_m = build(&mut gm, lm);

            let fd = (gp.value(loss_p).data()[0] as f64 - gm.value(loss_m).data()[0] as f64)
                / (2.0 * eps as f64);
            let an = analytic.data()[i] as f64;
            let denom = fd.abs().max(an.abs()).max(1e-4);
            assert!(
                (fd - an).abs() / denom <= rel_tol,
                "element {i}: finite diff {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = Tensor::randn(&[1, 2, 4, 4], &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        let b = Tensor::randn(&[3], &mut rng);

        // wrt weight
        let (xc, bc) = (x.clone(), b.clone());
        check_gradient(
            &w,
            move |g, leaf| {
                let x = g.constant(xc.clone());
                let b = g.constant(bc.clone());
                let y = g.conv2d(x, leaf, b, 1, 1).unwrap();
                g.sum_squares(y)
            },
            1e-2,
        );
        // wrt input
        let (wc, bc) = (w.clone(), b.clone());
        check_gradient(
            &x,
            move |g, leaf| {
                let w = g.constant(wc.clone());
                let b = g.constant(bc.clone());
                let y = g.conv2d(leaf, w, b, 2, 1).unwrap();
                g.sum_squares(y)
            },
            1e-2,
        );
        // wrt bias
        check_gradient(
            &b,
            move |g, leaf| {
                let x = g.constant(x.clone());
                let w = g.constant(w.clone());
                let y = g.conv2d(x, w, leaf, 1, 0).unwrap();
                g.sum_squares(y)
            },
            1e-2,
        );
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[5, 4], &mut rng);
        let w = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[3], &mut rng);
        let (xc, bc) = (x.clone(), b.clone());
        check_gradient(
            &w,
            move |g, leaf| {
                let x = g.constant(xc.clone());
                let b = g.constant(bc.clone());
                let y = g.linear(x, leaf, b).unwrap();
                g.sum_squares(y)
            },
            1e-2,
        );
        let wc = w.clone();
        check_gradient(
            &x,
            move |g, leaf| {
                let w = g.constant(wc.clone());
                let b = g.constant(b.clone());
                let y = g.linear(leaf, w, b).unwrap();
                g.sum_squares(y)
            },
            1e-2,
        );
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let q = Tensor::randn(&[3, 4], &mut rng);
        let k = Tensor::randn(&[5, 4], &mut rng);
        let v = Tensor::randn(&[5, 2], &mut rng);
        for which in 0..3 {
            let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
            let leaf_val = [&q, &k, &v][which].clone();
            check_gradient(
                &leaf_val,
                move |g, leaf| {
                    let qv = if which == 0 { leaf } else { g.constant(qc.clone()) };
                    let kv = if which == 1 { leaf } else { g.constant(kc.clone()) };
                    let vv = if which == 2 { leaf } else { g.constant(vc.clone()) };
                    let y = g.attention(qv, kv, vv).unwrap();
                    g.sum_squares(y)
                },
                2e-2,
            );
        }
    }

    #[test]
    fn group_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::randn(&[4, 3, 3], &mut rng);
        let gamma = Tensor::rand_uniform(&[4], 0.5, 1.5, &mut rng);
        let beta = Tensor::randn(&[4], &mut rng);
        let (gc, bc) = (gamma.clone(), beta.clone());
        check_gradient(
            &x,
            move |g, leaf| {
                let ga = g.constant(gc.clone());
                let be = g.constant(bc.clone());
                let y = g.group_norm(leaf, ga, be, 2).unwrap();
                // Weight the output so the gradient is not uniform.
                let wts = Tensor::from_fn(&[4, 3, 3], |i| (i % 7) as f32 * 0.3 - 1.0);
                let y = g.mul_const(y, &wts).unwrap();
                g.sum_squares(y)
            },
            2e-2,
        );
        let xc = x.clone();
        check_gradient(
            &gamma,
            move |g, leaf| {
                let x = g.constant(xc.clone());
                let be = g.constant(beta.clone());
                let y = g.group_norm(x, leaf, be, 2).unwrap();
                g.sum_squares(y)
            },
            1e-2,
        );
    }

    #[test]
    fn composite_graph_gradient_matches_finite_differences() {
        // A small conv -> norm -> silu -> tokens -> attention -> mse chain,
        // differentiated with respect to the conv weight.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = Tensor::randn(&[1, 2, 4, 4], &mut rng);
        let w = Tensor::randn(&[4, 2, 3, 3], &mut rng).scale(0.5);
        let b = Tensor::zeros(&[4]);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let kv = Tensor::randn(&[6, 4], &mut rng);
        let target = Tensor::randn(&[16, 4], &mut rng);

        check_gradient(
            &w,
            move |g, leaf| {
                let xv = g.constant(x.clone());
                let bv = g.constant(b.clone());
                let y = g.conv2d(xv, leaf, bv, 1, 1).unwrap();
                let y = g.reshape3(y).unwrap();
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let y = g.group_norm(y, ga, be, 2).unwrap();
                let y = g.silu(y);
                let tok = g.to_tokens(y).unwrap();
                let kvv = g.constant(kv.clone());
                let y = g.attention(tok, kvv, kvv).unwrap();
                g.mse(y, &target).unwrap()
            },
            2e-2,
        );
    }

    #[test]
    fn gradient_skips_constant_only_paths() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2], 3.0));
        let p = g.param(Tensor::full(&[2], 2.0));
        let prod = g.mul(a, p).unwrap();
        let loss = g.sum_squares(prod);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).is_none());
        // d/dp Σ (a·p)² = 2·a²·p = 2·9·2 = 36
        let gp = grads.get(p).unwrap();
        assert!((gp.data()[0] - 36.0).abs() < 1e-4);
        assert!((gp.data()[1] - 36.0).abs() < 1e-4);
    }

    #[test]
    fn tokens_roundtrip_and_upsample_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = Tensor::randn(&[3, 4, 5], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tok = g.to_tokens(xv).unwrap();
        assert_eq!(g.value(tok).shape(), &[20, 3]);
        let back = g.from_tokens(tok, 4, 5).unwrap();
        assert_eq!(g.value(back), &x);
        let up = g.upsample_nearest2(xv).unwrap();
        assert_eq!(g.value(up).shape(), &[3, 8, 10]);
        assert_eq!(g.value(up).at(&[1, 7, 9]), x.at(&[1, 3, 4]));
    }
}
