//! Dense f32 tensors and the primitive kernels the engine is built from.
//!
//! Tensors are immutable after construction and safe to share across
//! threads. Kernels may parallelize over output rows; every output element
//! is written by exactly one worker and inner reductions run in a fixed
//! order, so parallel and serial execution produce bit-identical results.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense rank-1..4 array of f32, row-major, last axis fastest.
///
/// Conventionally C×H×W for feature maps and K×C×kh×kw for conv kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        validate_shape(shape)?;
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        })
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Extents as (C, H, W); error if the tensor is not rank 3.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::InvalidShape(format!(
                "expected rank-3 tensor, got {other:?}"
            ))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[k, c, h, w] => Ok((k, c, h, w)),
            other => Err(Error::InvalidShape(format!(
                "expected rank-4 tensor, got {other:?}"
            ))),
        }
    }

    /// Value at (c, h, w) of a rank-3 tensor. Panics out of bounds.
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f32 {
        let (_, hh, ww) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * hh + h) * ww + w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// New tensor with the same data under a different shape of equal volume.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape(format!(
            "rank must be 1..=4, got {shape:?}"
        )));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape(format!(
            "all extents must be >= 1, got {shape:?}"
        )));
    }
    Ok(())
}

/// Parameters of one 2D convolution: K×C×kh×kw kernel, per-output bias,
/// one stride for both spatial axes and zero padding per spatial axis.
#[derive(Clone, Debug)]
pub struct ConvSpec {
    kernel: Tensor,
    bias: Vec<f32>,
    stride: usize,
    pad: (usize, usize),
}

impl ConvSpec {
    pub fn new(kernel: Tensor, bias: Vec<f32>, stride: usize, pad: (usize, usize)) -> Result<Self> {
        let (k, _c, _kh, _kw) = kernel.dims4()?;
        if stride == 0 {
            return Err(Error::InvalidArgument {
                name: "stride",
                reason: "must be positive".into(),
            });
        }
        if bias.len() != k {
            return Err(Error::shape_mismatch(
                "conv bias",
                [bias.len()],
                [k],
            ));
        }
        Ok(ConvSpec {
            kernel,
            bias,
            stride,
            pad,
        })
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> (usize, usize) {
        self.pad
    }

    /// Output extents for an H×W input: floor((in + 2·pad − k)/stride) + 1.
    pub fn output_extents(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (_, _, kh, kw) = self.kernel.dims4()?;
        let out = |input: usize, k: usize, pad: usize| -> Result<usize> {
            let padded = input + 2 * pad;
            if padded < k {
                return Err(Error::InvalidShape(format!(
                    "conv output extent < 1: input {input} + 2*pad {pad} < kernel {k}"
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((out(h, kh, self.pad.0)?, out(w, kw, self.pad.1)?))
    }
}

/// 2D cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv2d_parts(x, &spec.kernel, &spec.bias, spec.stride, spec.pad)
}

pub(crate) fn conv2d_parts(
    x: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    stride: usize,
    pad: (usize, usize),
) -> Result<Tensor> {
    let (c_in, h_in, w_in) = x.dims3()?;
    let (k_out, kc, kh, kw) = kernel.dims4()?;
    if kc != c_in {
        return Err(Error::shape_mismatch(
            "conv2d input channels",
            x.shape(),
            kernel.shape(),
        ));
    }
    if bias.len() != k_out {
        return Err(Error::shape_mismatch("conv2d bias", [bias.len()], [k_out]));
    }
    let out_extent = |input: usize, k: usize, p: usize| -> Result<usize> {
        let padded = input + 2 * p;
        if padded < k {
            return Err(Error::InvalidShape(format!(
                "conv output extent < 1: input {input} + 2*pad {p} < kernel {k}"
            )));
        }
        Ok((padded - k) / stride + 1)
    };
    let h_out = out_extent(h_in, kh, pad.0)?;
    let w_out = out_extent(w_in, kw, pad.1)?;

    let mut out = Tensor::zeros(&[k_out, h_out, w_out])?;
    if kh == 1 && kw == 1 && stride == 1 && pad == (0, 0) {
        conv1x1(
            x.data(),
            kernel.data(),
            bias,
            c_in,
            k_out,
            h_in * w_in,
            out.data_mut(),
        );
        return Ok(out);
    }

    let xs = x.data();
    let ws = kernel.data();
    let (pad_h, pad_w) = pad;

    let row_work = |row_idx: usize, orow: &mut [f32]| {
        let k = row_idx / h_out;
        let oy = row_idx % h_out;
        orow.fill(bias[k]);
        for c in 0..c_in {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_h as isize;
                if iy < 0 || iy >= h_in as isize {
                    continue;
                }
                let xrow = &xs[(c * h_in + iy as usize) * w_in..][..w_in];
                let wrow = &ws[((k * c_in + c) * kh + ky) * kw..][..kw];
                accumulate_row(orow, xrow, wrow, w_in, w_out, stride, pad_w);
            }
        }
    };

    let rows = k_out * h_out;
    // Cheap work stays serial; the cut-off only affects speed, not results.
    if rows * w_out * c_in * kh * kw >= 1 << 16 {
        out.data_mut()
            .par_chunks_mut(w_out)
            .enumerate()
            .for_each(|(i, orow)| row_work(i, orow));
    } else {
        for (i, orow) in out.data_mut().chunks_mut(w_out).enumerate() {
            row_work(i, orow);
        }
    }
    Ok(out)
}

/// One (channel, kernel-row) contribution to an output row, split into the
/// zero-padded borders and the bounds-check-free interior.
fn accumulate_row(
    orow: &mut [f32],
    xrow: &[f32],
    wrow: &[f32],
    w_in: usize,
    w_out: usize,
    stride: usize,
    pad_w: usize,
) {
    let kw = wrow.len();
    // First ox whose window starts inside the row, and one past the last
    // whose window ends inside it.
    let ox_lo = pad_w.div_ceil(stride).min(w_out);
    let ox_hi = if w_in + pad_w >= kw {
        (((w_in + pad_w - kw) / stride) + 1).min(w_out)
    } else {
        0
    };

    let edge = |orow: &mut [f32], range: std::ops::Range<usize>| {
        for ox in range {
            let base = (ox * stride) as isize - pad_w as isize;
            let kx0 = (-base).max(0) as usize;
            let kx1 = ((w_in as isize - base).min(kw as isize)).max(0) as usize;
            let mut acc = 0.0f32;
            for kx in kx0..kx1 {
                acc += xrow[(base + kx as isize) as usize] * wrow[kx];
            }
            orow[ox] += acc;
        }
    };

    edge(orow, 0..ox_lo);
    if ox_lo < ox_hi {
        for ox in ox_lo..ox_hi {
            let base = ox * stride - pad_w;
            let win = &xrow[base..base + kw];
            let mut acc = 0.0f32;
            for (xv, wv) in win.iter().zip(wrow) {
                acc += xv * wv;
            }
            orow[ox] += acc;
        }
    }
    edge(orow, ox_lo.max(ox_hi)..w_out);
}

/// 1×1 stride-1 convolution: per output channel an axpy sweep over positions.
fn conv1x1(
    xs: &[f32],
    ws: &[f32],
    bias: &[f32],
    c_in: usize,
    k_out: usize,
    positions: usize,
    out: &mut [f32],
) {
    let body = |k: usize, orow: &mut [f32]| {
        orow.fill(bias[k]);
        for c in 0..c_in {
            let w = ws[k * c_in + c];
            if w == 0.0 {
                continue;
            }
            let xrow = &xs[c * positions..][..positions];
            for (o, xv) in orow.iter_mut().zip(xrow) {
                *o += w * xv;
            }
        }
    };
    if k_out * c_in * positions >= 1 << 16 {
        out.par_chunks_mut(positions)
            .enumerate()
            .for_each(|(k, orow)| body(k, orow));
    } else {
        for (k, orow) in out.chunks_mut(positions).enumerate() {
            body(k, orow);
        }
    }
}

/// Bilinear resize with half-pixel-center sampling: the source coordinate
/// for output index `dst` is `(dst + 0.5)/factor − 0.5`, clamped to the
/// valid range. Interpolation uses the lerp form `v0 + f·(v1−v0)` so a
/// constant input reproduces exactly.
pub fn bilinear_resize(x: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidArgument {
            name: "factor",
            reason: format!("must be a positive finite number, got {factor}"),
        });
    }
    let (c, h_in, w_in) = x.dims3()?;
    let extent = |n: usize| -> Result<usize> {
        let e = (n as f64 * factor).round() as usize;
        if e < 1 {
            return Err(Error::InvalidShape(format!(
                "resize output extent < 1 for input {n} × factor {factor}"
            )));
        }
        Ok(e)
    };
    let (h_out, w_out) = (extent(h_in)?, extent(w_in)?);

    // Per-axis source index pairs and fractional weights.
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|d| {
                let src = ((d as f64 + 0.5) / factor - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(h_in, h_out);
    let xs = axis(w_in, w_out);

    let mut out = Tensor::zeros(&[c, h_out, w_out])?;
    let src = x.data();
    out.data_mut()
        .chunks_mut(h_out * w_out)
        .enumerate()
        .for_each(|(ci, plane)| {
            let splane = &src[ci * h_in * w_in..][..h_in * w_in];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let r0 = &splane[y0 * w_in..][..w_in];
                let r1 = &splane[y1 * w_in..][..w_in];
                let orow = &mut plane[oy * w_out..][..w_out];
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = lerp(r0[x0], r0[x1], fx);
                    let bot = lerp(r1[x0], r1[x1], fx);
                    orow[ox] = lerp(top, bot, fy);
                }
            }
        });
    Ok(out)
}

#[inline]
fn lerp(v0: f32, v1: f32, f: f32) -> f32 {
    v0 + f * (v1 - v0)
}

/// Divide every spatial position's channel vector by max(‖v‖₂, eps).
pub fn l2_normalize_channels(x: &Tensor, eps: f32) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument {
            name: "eps",
            reason: format!("must be positive, got {eps}"),
        });
    }
    let (c, h, w) = x.dims3()?;
    let hw = h * w;
    let src = x.data();
    let mut out = Tensor::zeros(&[c, h, w])?;
    let dst = out.data_mut();
    for p in 0..hw {
        let mut sq = 0.0f32;
        for ci in 0..c {
            let v = src[ci * hw + p];
            sq += v * v;
        }
        let inv = 1.0 / sq.sqrt().max(eps);
        for ci in 0..c {
            dst[ci * hw + p] = src[ci * hw + p] * inv;
        }
    }
    Ok(out)
}

pub const DEFAULT_NORM_EPS: f32 = 1e-8;

/// Candidate ordering for top-n selection: value descending, index ascending
/// on ties. `-0.0` is treated as `0.0` by the callers that build candidates.
#[inline]
pub(crate) fn rank_desc(a: &(f32, u32), b: &(f32, u32)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Write the top `n` of `cands` (value desc, index asc on ties) into
/// `values`, zero-filling past the candidate count. When `indices` is given,
/// record each slot's source index, −1 for zero-filled slots.
pub(crate) fn select_top_n(
    cands: &mut Vec<(f32, u32)>,
    n: usize,
    values: &mut [f32],
    mut indices: Option<&mut [i32]>,
) {
    debug_assert_eq!(values.len(), n);
    let take = n.min(cands.len());
    if take > 0 && take < cands.len() {
        cands.select_nth_unstable_by(take - 1, rank_desc);
    }
    let top = &mut cands[..take];
    top.sort_unstable_by(rank_desc);
    for (slot, &(v, idx)) in top.iter().enumerate() {
        values[slot] = v;
        if let Some(ix) = indices.as_deref_mut() {
            ix[slot] = idx as i32;
        }
    }
    for slot in take..n {
        values[slot] = 0.0;
        if let Some(ix) = indices.as_deref_mut() {
            ix[slot] = -1;
        }
    }
}

/// At each spatial position keep the `n` largest channel values in
/// descending order; ties go to the lower channel index; if `n` exceeds the
/// channel count the tail is zero-filled.
pub fn topk_per_position(x: &Tensor, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument {
            name: "n",
            reason: "must be >= 1".into(),
        });
    }
    let (c, h, w) = x.dims3()?;
    let hw = h * w;
    let src = x.data();
    let mut out = Tensor::zeros(&[n, h, w])?;
    let dst = out.data_mut();
    let mut cands: Vec<(f32, u32)> = Vec::with_capacity(c);
    let mut slot = vec![0.0f32; n];
    for p in 0..hw {
        cands.clear();
        for ci in 0..c {
            let v = src[ci * hw + p];
            let v = if v == 0.0 { 0.0 } else { v };
            cands.push((v, ci as u32));
        }
        select_top_n(&mut cands, n, &mut slot, None);
        for (ci, &v) in slot.iter().enumerate() {
            dst[ci * hw + p] = v;
        }
    }
    Ok(out)
}

/// Probability clamp used by the focal loss.
pub const FOCAL_EPS: f32 = 1e-7;

/// Mean focal loss over pixels and its analytic gradient w.r.t. `p`.
///
/// Per pixel: −α_t (1−p_t)^γ ln(p_t), with p_t = p where target = 1 and
/// 1−p otherwise, and α_t = α / 1−α accordingly. Probabilities are clamped
/// to [1e-7, 1−1e-7]; the gradient is evaluated at the clamped values.
pub fn focal_loss(
    p: &Tensor,
    target: &Tensor,
    gamma: f32,
    alpha: f32,
) -> Result<(f32, Tensor)> {
    if p.shape() != target.shape() {
        return Err(Error::shape_mismatch(
            "focal_loss",
            p.shape(),
            target.shape(),
        ));
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "gamma",
            reason: format!("must be >= 0, got {gamma}"),
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument {
            name: "alpha",
            reason: format!("must be in (0,1), got {alpha}"),
        });
    }
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidArgument {
            name: "target",
            reason: "values must be exactly 0 or 1".into(),
        });
    }

    let count = p.len() as f32;
    let mut grad = Tensor::zeros(p.shape())?;
    let gd = grad.data_mut();
    let mut loss = 0.0f32;
    for (i, (&pv, &tv)) in p.data().iter().zip(target.data()).enumerate() {
        let pc = pv.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let (pt, sign, at) = if tv == 1.0 {
            (pc, 1.0f32, alpha)
        } else {
            (1.0 - pc, -1.0f32, 1.0 - alpha)
        };
        let one_m = 1.0 - pt;
        let ln_pt = pt.ln();
        loss += -at * one_m.powf(gamma) * ln_pt;
        let dterm = if gamma == 0.0 {
            -at / pt
        } else {
            at * gamma * one_m.powf(gamma - 1.0) * ln_pt - at * one_m.powf(gamma) / pt
        };
        gd[i] = sign * dterm / count;
    }
    Ok((loss / count, grad))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise("add", a, b, |x, y| x + y)
}

pub fn multiply(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise("multiply", a, b, |x, y| x * y)
}

fn zip_elementwise(
    name: &str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(name, a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data)
}

/// Concatenate rank-3 tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::EmptyInput("concat_channels"));
    }
    let (_, h, w) = parts[0].dims3()?;
    let mut channels = 0usize;
    for t in parts {
        let (c, th, tw) = t.dims3()?;
        if (th, tw) != (h, w) {
            return Err(Error::shape_mismatch(
                "concat_channels",
                parts[0].shape(),
                t.shape(),
            ));
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for t in parts {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[channels, h, w], data)
}

/// Numerically stable softmax across the channel axis at each position.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let hw = h * w;
    let src = x.data();
    let mut out = Tensor::zeros(&[c, h, w])?;
    let dst = out.data_mut();
    for p in 0..hw {
        let mut maxv = f32::NEG_INFINITY;
        for ci in 0..c {
            maxv = maxv.max(src[ci * hw + p]);
        }
        let mut sum = 0.0f32;
        for ci in 0..c {
            let e = (src[ci * hw + p] - maxv).exp();
            dst[ci * hw + p] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for ci in 0..c {
            dst[ci * hw + p] *= inv;
        }
    }
    Ok(out)
}

/// Dot product with a fixed 8-lane reduction order, identical on every path.
#[inline]
pub(crate) fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += xa[i] * xb[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

/// Copy a C×H×W tensor into position-major layout (H·W rows of C values).
pub(crate) fn to_position_major(x: &Tensor) -> Vec<f32> {
    let (c, h, w) = x.dims3().expect("rank-3 tensor");
    let hw = h * w;
    let src = x.data();
    let mut out = vec![0.0f32; c * hw];
    for ci in 0..c {
        let plane = &src[ci * hw..][..hw];
        for p in 0..hw {
            out[p * c + ci] = plane[p];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[1, 5, 7]);
        let kernel = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = ConvSpec::new(kernel, vec![0.0], 1, (0, 0)).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn conv_ones_kernel_counts_overlap() {
        let x = Tensor::full(&[1, 5, 5], 1.0).unwrap();
        let kernel = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let spec = ConvSpec::new(kernel, vec![0.0], 1, (1, 1)).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.at3(0, 2, 2), 9.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
        assert_eq!(y.at3(0, 0, 4), 4.0);
        assert_eq!(y.at3(0, 4, 0), 4.0);
        assert_eq!(y.at3(0, 0, 2), 6.0);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[4, 8, 8]);
        let kernel = random_tensor(&mut rng, &[6, 4, 3, 3]);
        let bias: Vec<f32> = (0..6).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let spec = ConvSpec::new(kernel.clone(), bias.clone(), 1, (1, 1)).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        let want = oracle::conv2d_naive(&x, &kernel, &bias, 1, (1, 1));
        let max = y
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 1e-5, "max |delta| = {max}");
    }

    #[test]
    fn conv_200_random_draws_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c_in = rng.random_range(1..=6usize);
            let k_out = rng.random_range(1..=6usize);
            let kh = *[1usize, 3, 5].choose(&mut rng).unwrap();
            let kw = *[1usize, 3, 5].choose(&mut rng).unwrap();
            let h = rng.random_range(kh..=kh + 9);
            let w = rng.random_range(kw..=kw + 9);
            let stride = rng.random_range(1..=2usize);
            let pad = (rng.random_range(0..=2usize), rng.random_range(0..=2usize));
            let x = random_tensor(&mut rng, &[c_in, h, w]);
            let kernel = random_tensor(&mut rng, &[k_out, c_in, kh, kw]);
            let bias: Vec<f32> = (0..k_out).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            let spec = ConvSpec::new(kernel.clone(), bias.clone(), stride, pad).unwrap();
            let y = conv2d(&x, &spec).unwrap();
            let want = oracle::conv2d_naive(&x, &kernel, &bias, stride, pad);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[3, 4, 4]).unwrap();
        let kernel = Tensor::zeros(&[2, 4, 1, 1]).unwrap();
        let spec = ConvSpec::new(kernel, vec![0.0; 2], 1, (0, 0)).unwrap();
        let err = conv2d(&x, &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4, 4]") && msg.contains("[2, 4, 1, 1]"), "{msg}");
    }

    #[test]
    fn conv_rejects_degenerate_output() {
        let x = Tensor::zeros(&[1, 2, 2]).unwrap();
        let kernel = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        let spec = ConvSpec::new(kernel, vec![0.0], 1, (0, 0)).unwrap();
        assert!(conv2d(&x, &spec).is_err());
    }

    #[test]
    fn resize_factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, &[2, 6, 5]);
        assert_eq!(bilinear_resize(&x, 1.0).unwrap(), x);
    }

    #[test]
    fn resize_half_pixel_row() {
        let x = Tensor::new(&[1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 2.0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4]);
        assert_eq!(&y.data()[..4], &[1.0, 1.5, 2.5, 3.0]);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::full(&[1, 3, 5], 0.73).unwrap();
        for factor in [0.5, 2.0, 3.0] {
            let y = bilinear_resize(&x, factor).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.73));
        }
    }

    #[test]
    fn resize_up2_then_block_average_reconstructs_constant() {
        let x = Tensor::full(&[1, 4, 6], 0.31971).unwrap();
        let y = bilinear_resize(&x, 2.0).unwrap();
        let (_, h2, w2) = y.dims3().unwrap();
        for by in 0..h2 / 2 {
            for bx in 0..w2 / 2 {
                let s = ((y.at3(0, 2 * by, 2 * bx) + y.at3(0, 2 * by, 2 * bx + 1))
                    + (y.at3(0, 2 * by + 1, 2 * bx) + y.at3(0, 2 * by + 1, 2 * bx + 1)))
                    / 4.0;
                assert_eq!(s, 0.31971);
            }
        }
    }

    #[test]
    fn resize_rejects_bad_factor() {
        let x = Tensor::zeros(&[1, 2, 2]).unwrap();
        assert!(bilinear_resize(&x, 0.0).is_err());
        assert!(bilinear_resize(&x, -1.0).is_err());
    }

    #[test]
    fn l2_normalize_345_triangle() {
        let x = Tensor::new(&[2, 1, 1], vec![3.0, 4.0]).unwrap();
        let y = l2_normalize_channels(&x, DEFAULT_NORM_EPS).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-6);
        assert!((y.data()[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_zero_vector_stays_zero() {
        let x = Tensor::zeros(&[4, 2, 2]).unwrap();
        let y = l2_normalize_channels(&x, DEFAULT_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn topk_examples() {
        let x = Tensor::new(&[3, 1, 1], vec![3.0, 1.0, 2.0]).unwrap();
        let y = topk_per_position(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);

        let full = topk_per_position(&x, 3).unwrap();
        assert_eq!(full.data(), &[3.0, 2.0, 1.0]);

        let ties = Tensor::new(&[3, 1, 1], vec![5.0, 5.0, 1.0]).unwrap();
        let t = topk_per_position(&ties, 2).unwrap();
        assert_eq!(t.data(), &[5.0, 5.0]);

        let padded = topk_per_position(&ties, 5).unwrap();
        assert_eq!(padded.data(), &[5.0, 5.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn focal_perfect_prediction_is_near_zero() {
        let p = Tensor::full(&[1, 2, 2], 1.0).unwrap();
        let t = Tensor::full(&[1, 2, 2], 1.0).unwrap();
        let (loss, _) = focal_loss(&p, &t, 2.0, 0.25).unwrap();
        assert!(loss.abs() < 1e-9, "loss = {loss}");
    }

    #[test]
    fn focal_reduces_to_weighted_cross_entropy() {
        let p = Tensor::full(&[1, 1, 1], 0.5).unwrap();
        let t = Tensor::full(&[1, 1, 1], 1.0).unwrap();
        let (loss, _) = focal_loss(&p, &t, 0.0, 0.5).unwrap();
        assert!((loss - 0.5 * std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn focal_gamma0_equals_half_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 64;
        let p: Vec<f32> = (0..n).map(|_| rng.random_range(0.05f32..0.95)).collect();
        let t: Vec<f32> = (0..n)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let pt = Tensor::new(&[1, 8, 8], p.clone()).unwrap();
        let tt = Tensor::new(&[1, 8, 8], t.clone()).unwrap();
        let (loss, _) = focal_loss(&pt, &tt, 0.0, 0.5).unwrap();
        let bce: f64 = p
            .iter()
            .zip(&t)
            .map(|(&pv, &tv)| {
                let pv = pv as f64;
                if tv == 1.0 {
                    -pv.ln()
                } else {
                    -(1.0 - pv).ln()
                }
            })
            .sum::<f64>()
            / n as f64;
        assert!((loss as f64 - 0.5 * bce).abs() < 1e-6);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100;
        let p: Vec<f32> = (0..n).map(|_| rng.random_range(0.05f32..0.95)).collect();
        let t: Vec<f32> = (0..n)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let pt = Tensor::new(&[1, 10, 10], p).unwrap();
        let tt = Tensor::new(&[1, 10, 10], t).unwrap();
        let (_, grad) = focal_loss(&pt, &tt, 2.0, 0.25).unwrap();
        let max_rel = oracle::focal_grad_max_rel_error(&pt, &tt, 2.0, 0.25, grad.data(), 1e-3);
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn focal_rejects_bad_inputs() {
        let p = Tensor::zeros(&[1, 2, 2]).unwrap();
        let t = Tensor::zeros(&[1, 2, 3]).unwrap();
        assert!(focal_loss(&p, &t, 2.0, 0.25).is_err());
        let t2 = Tensor::full(&[1, 2, 2], 0.5).unwrap();
        assert!(focal_loss(&p, &t2, 2.0, 0.25).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, &[5, 3, 4]);
        let y = softmax_channels(&x).unwrap();
        let (c, h, w) = y.dims3().unwrap();
        for p in 0..h * w {
            let s: f32 = (0..c).map(|ci| y.data()[ci * h * w + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_stacks_channels() {
        let a = Tensor::full(&[1, 2, 2], 1.0).unwrap();
        let b = Tensor::full(&[2, 2, 2], 2.0).unwrap();
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[3, 2, 2]);
        assert_eq!(y.at3(0, 0, 0), 1.0);
        assert_eq!(y.at3(2, 1, 1), 2.0);
        let c = Tensor::zeros(&[1, 3, 2]).unwrap();
        assert!(concat_channels(&[&a, &c]).is_err());
    }

    #[test]
    fn kernels_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, &[8, 20, 24]);
        let kernel = random_tensor(&mut rng, &[16, 8, 3, 3]);
        let bias: Vec<f32> = (0..16).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let spec = ConvSpec::new(kernel, bias, 1, (1, 1)).unwrap();
        let y1 = conv2d(&x, &spec).unwrap();
        let y2 = conv2d(&x, &spec).unwrap();
        assert_eq!(y1, y2);
        assert!(y1.all_finite());
    }

    proptest! {
        #[test]
        fn topk_is_non_increasing(values in proptest::collection::vec(-10.0f32..10.0, 12), n in 1usize..6) {
            let x = Tensor::new(&[3, 2, 2], values).unwrap();
            let y = topk_per_position(&x, n).unwrap();
            let (c, h, w) = y.dims3().unwrap();
            for p in 0..h*w {
                for ci in 0..c.min(3).saturating_sub(1) {
                    prop_assert!(y.data()[ci*h*w + p] >= y.data()[(ci+1)*h*w + p]);
                }
            }
        }

        #[test]
        fn l2_norm_is_unit_or_zero(values in proptest::collection::vec(-5.0f32..5.0, 24)) {
            let x = Tensor::new(&[6, 2, 2], values).unwrap();
            let y = l2_normalize_channels(&x, DEFAULT_NORM_EPS).unwrap();
            let (c, h, w) = y.dims3().unwrap();
            for p in 0..h*w {
                let norm: f32 = (0..c).map(|ci| y.data()[ci*h*w+p].powi(2)).sum::<f32>().sqrt();
                prop_assert!(norm < 1e-5 || (norm - 1.0).abs() < 1e-5);
            }
        }
    }
}
