//! Neural-network primitives: convolution, linear maps, scaled-dot attention,
//! adaptive instance normalization, Gaussian kernels and mask compositing.
//!
//! Everything here is a pure function over immutable tensors. Inner products
//! accumulate in f64 with a fixed evaluation order, so results are
//! bit-reproducible across runs and thread counts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon added to the content standard deviation in [`adain`].
pub const ADAIN_EPS: f64 = 1e-5;

/// Work threshold (in multiply-adds) above which GEMMs fan out across threads.
const PAR_THRESHOLD: usize = 1 << 16;

/// C(m,n) = A(m,k) · B(k,n). Row-major, f64 accumulation per output row.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [f32]| {
        let mut acc = vec![0.0f64; n];
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let b_row = &b[l * n..(l + 1) * n];
            for (j, &bv) in b_row.iter().enumerate() {
                acc[j] += av * bv as f64;
            }
        }
        for (j, &v) in acc.iter().enumerate() {
            out_row[j] = v as f32;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
}

/// C(m,n) = A(m,k) · B(n,k)ᵀ. Both operands row-major; dot products in f64.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [f32]| {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += a_row[l] as f64 * b_row[l] as f64;
            }
            out_row[j] = acc as f32;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds NCHW input (one batch item) into a (C·kh·kw, Ho·Wo) patch matrix.
pub(crate) fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let mut cols = vec![0.0f32; c * kh * kw * ho * wo];
    let plane = h * w;
    let out_plane = ho * wo;
    for ci in 0..c {
        for r in 0..kh {
            for s in 0..kw {
                let dst_base = ((ci * kh + r) * kw + s) * out_plane;
                for oy in 0..ho {
                    let iy = (oy * stride + r) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = ci * plane + iy as usize * w;
                    let dst_row = dst_base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + s) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst_row + ox] = x[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a (C·kh·kw, Ho·Wo) patch matrix back into a CHW gradient, summing overlaps.
pub(crate) fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let mut x = vec![0.0f32; c * h * w];
    let plane = h * w;
    let out_plane = ho * wo;
    for ci in 0..c {
        for r in 0..kh {
            for s in 0..kw {
                let src_base = ((ci * kh + r) * kw + s) * out_plane;
                for oy in 0..ho {
                    let iy = (oy * stride + r) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * plane + iy as usize * w;
                    let src_row = src_base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + s) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst_row + ix as usize] += cols[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2D cross-correlation over NCHW input with an OIkk weight and per-channel bias.
///
/// Output spatial dims are `floor((H + 2·pad − k)/stride) + 1`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 4 || wshape.len() != 4 {
        return Err(Error::shapes("conv2d rank", ishape, wshape));
    }
    let (n, c_in, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (c_out, c_in_w, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if c_in != c_in_w {
        return Err(Error::shapes("conv2d channels", ishape, wshape));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shapes("conv2d bias", bias.shape(), &[c_out]));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let ho = conv_out_dim(h, kh, stride, pad)
        .ok_or_else(|| Error::invalid(format!("conv2d kernel {kh} exceeds padded input {h}")))?;
    let wo = conv_out_dim(w, kw, stride, pad)
        .ok_or_else(|| Error::invalid(format!("conv2d kernel {kw} exceeds padded input {w}")))?;

    let mut out = Tensor::zeros(&[n, c_out, ho, wo]);
    let in_plane = c_in * h * w;
    let out_plane = c_out * ho * wo;
    for bi in 0..n {
        let cols = im2col(
            &input.data()[bi * in_plane..(bi + 1) * in_plane],
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        );
        let dst = &mut out.data_mut()[bi * out_plane..(bi + 1) * out_plane];
        gemm(c_out, c_in * kh * kw, ho * wo, weight.data(), &cols, dst);
        for o in 0..c_out {
            let b = bias.data()[o];
            for v in &mut dst[o * ho * wo..(o + 1) * ho * wo] {
                *v += b;
            }
        }
    }
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Affine map over the trailing dimension: (…, D_in) × (D_out, D_in)ᵀ + bias.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if wshape.len() != 2 {
        return Err(Error::shapes("linear weight rank", ishape, wshape));
    }
    let (d_out, d_in) = (wshape[0], wshape[1]);
    let last = *ishape.last().ok_or_else(|| Error::invalid("linear on scalar"))?;
    if last != d_in {
        return Err(Error::shapes("linear input dim", ishape, wshape));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shapes("linear bias", bias.shape(), &[d_out]));
    }
    let rows = input.numel() / d_in;
    let mut out_data = vec![0.0f32; rows * d_out];
    gemm_nt(rows, d_in, d_out, input.data(), weight.data(), &mut out_data);
    for r in 0..rows {
        for o in 0..d_out {
            out_data[r * d_out + o] += bias.data()[o];
        }
    }
    let mut out_shape = ishape.to_vec();
    *out_shape.last_mut().unwrap() = d_out;
    let out = Tensor::new(&out_shape, out_data)?;
    out.ensure_finite("linear")?;
    Ok(out)
}

/// Softmax(q·kᵀ/√d)·v. Returns the output and the attention map so callers can
/// cache or substitute it.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::shapes("attention rank", qs, ks));
    }
    let (t_q, d) = (qs[0], qs[1]);
    let (t_k, d_k) = (ks[0], ks[1]);
    if d != d_k {
        return Err(Error::shapes("attention q/k dim", qs, ks));
    }
    if vs[0] != t_k {
        return Err(Error::shapes("attention k/v rows", ks, vs));
    }
    let d_v = vs[1];

    let mut scores = vec![0.0f32; t_q * t_k];
    gemm_nt(t_q, d, t_k, q.data(), k.data(), &mut scores);
    let scale = 1.0 / (d as f64).sqrt();

    let mut attn = vec![0.0f32; t_q * t_k];
    for i in 0..t_q {
        let row = &scores[i * t_k..(i + 1) * t_k];
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64 * scale));
        let mut sum = 0.0f64;
        let mut exps = vec![0.0f64; t_k];
        for (j, &x) in row.iter().enumerate() {
            let e = (x as f64 * scale - max).exp();
            exps[j] = e;
            sum += e;
        }
        for j in 0..t_k {
            attn[i * t_k + j] = (exps[j] / sum) as f32;
        }
    }

    let mut out = vec![0.0f32; t_q * d_v];
    gemm(t_q, t_k, d_v, &attn, v.data(), &mut out);
    let out = Tensor::new(&[t_q, d_v], out)?;
    let attn = Tensor::new(&[t_q, t_k], attn)?;
    out.ensure_finite("attention")?;
    Ok((out, attn))
}

/// Per-channel statistics of a (C, …) tensor: (mean, std) pairs in f64.
fn channel_stats(x: &Tensor) -> Vec<(f64, f64)> {
    let c = x.shape()[0];
    let per = x.numel() / c;
    (0..c)
        .map(|ci| {
            let slice = &x.data()[ci * per..(ci + 1) * per];
            let mean: f64 = slice.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
            let var: f64 =
                slice.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
            (mean, var.sqrt())
        })
        .collect()
}

/// Adaptive instance normalization: re-centers and re-scales each content
/// channel to the style channel's mean and standard deviation.
///
/// A zero-variance style channel yields exactly the style mean.
pub fn adain(content: &Tensor, style: &Tensor) -> Result<Tensor> {
    if content.shape().is_empty() || style.shape().is_empty() {
        return Err(Error::invalid("adain on scalar"));
    }
    let c = content.shape()[0];
    if style.shape()[0] != c {
        return Err(Error::shapes("adain channels", content.shape(), style.shape()));
    }
    let content_stats = channel_stats(content);
    let style_stats = channel_stats(style);
    let per = content.numel() / c;
    let mut out = content.clone();
    for ci in 0..c {
        let (mc, sc) = content_stats[ci];
        let (ms, ss) = style_stats[ci];
        let dst = &mut out.data_mut()[ci * per..(ci + 1) * per];
        if ss == 0.0 {
            for v in dst.iter_mut() {
                *v = ms as f32;
            }
        } else {
            let gain = ss / (sc + ADAIN_EPS);
            for v in dst.iter_mut() {
                *v = ((*v as f64 - mc) * gain + ms) as f32;
            }
        }
    }
    out.ensure_finite("adain")?;
    Ok(out)
}

/// Normalized 2D Gaussian window.
#[derive(Clone, Debug)]
pub struct GaussianKernel2D {
    pub size: (usize, usize),
    pub sigma: f64,
    pub weights: Tensor,
}

impl GaussianKernel2D {
    pub fn center_weight(&self) -> f32 {
        let (h, w) = self.size;
        self.weights.at(&[h / 2, w / 2])
    }
}

/// Builds a normalized Gaussian kernel of odd size.
pub fn gaussian_kernel(size: (usize, usize), sigma: f64) -> Result<GaussianKernel2D> {
    let (h, w) = size;
    if h % 2 == 0 || w % 2 == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "gaussian kernel size must be odd and >= 1, got {h}x{w}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let mut vals = vec![0.0f64; h * w];
    let mut sum = 0.0f64;
    for r in 0..h {
        for c in 0..w {
            let dy = r as f64 - ch;
            let dx = c as f64 - cw;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            vals[r * w + c] = v;
            sum += v;
        }
    }
    let weights = Tensor::new(&[h, w], vals.iter().map(|&v| (v / sum) as f32).collect())?;
    Ok(GaussianKernel2D {
        size,
        sigma,
        weights,
    })
}

/// Elementwise a·m + b·(1−m). The mask either matches the operand shape or is
/// broadcast over leading (channel) dimensions.
pub fn masked_composite(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shapes("masked_composite operands", a.shape(), b.shape()));
    }
    if mask.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
        return Err(Error::invalid("mask values must lie in [0, 1]"));
    }
    let broadcast = if mask.shape() == a.shape() {
        false
    } else if a.shape().len() > mask.shape().len()
        && a.shape().ends_with(mask.shape())
    {
        true
    } else {
        return Err(Error::shapes("masked_composite mask", mask.shape(), a.shape()));
    };
    let per = mask.numel();
    let out_data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&av, &bv))| {
            let m = if broadcast {
                mask.data()[i % per]
            } else {
                mask.data()[i]
            };
            av * m + bv * (1.0 - m)
        })
        .collect();
    Tensor::new(a.shape(), out_data)
}
