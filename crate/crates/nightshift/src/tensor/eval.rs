//! Forward evaluation of every primitive. Loops accumulate in row-major
//! order so repeated runs are bit-identical; the conv paths lower to an
//! im2col + GEMM pair that autovectorizes.

use super::ops::{Op, PadMode};
use super::shape::{broadcast, broadcast_strides, conv_out, convt_out, numel, strides};
use super::Tensor;
use crate::error::{Error, Result};

pub(super) fn eval(op: &Op, inputs: &[&Tensor]) -> Result<(Vec<f64>, Vec<usize>)> {
    match op {
        Op::Add => binary("add", inputs, |a, b| a + b),
        Op::Sub => binary("sub", inputs, |a, b| a - b),
        Op::Mul => binary("mul", inputs, |a, b| a * b),
        Op::Div => binary("div", inputs, |a, b| a / b),
        Op::MatMul => matmul(inputs),
        Op::Conv2d { stride, padding, pad_mode } => conv2d(inputs, *stride, *padding, *pad_mode),
        Op::ConvTranspose2d { stride, padding } => conv_transpose2d(inputs, *stride, *padding),
        Op::AvgPool2x2 => avg_pool2x2(inputs),
        Op::UpsampleNearest2x => upsample_nearest2x(inputs),
        Op::Relu => unary("relu", inputs, |x| if x > 0.0 { x } else { 0.0 }),
        Op::Gelu => unary("gelu", inputs, gelu_scalar),
        Op::Tanh => unary("tanh", inputs, f64::tanh),
        Op::Exp => unary("exp", inputs, f64::exp),
        Op::Log => unary("log", inputs, f64::ln),
        Op::Sqrt => unary("sqrt", inputs, f64::sqrt),
        Op::Softmax { axis } => softmax(inputs, *axis),
        Op::Mean { axes, keepdims } => mean(inputs, axes, *keepdims),
        Op::Var { axes, keepdims } => var(inputs, axes, *keepdims),
        Op::Concat { axis } => concat(inputs, *axis),
        Op::Slice { starts, ends } => slice(inputs, starts, ends),
        Op::Reshape { shape } => reshape(inputs, shape),
        Op::Permute { perm } => permute(inputs, perm),
        Op::BilinearSample { points } => bilinear_sample(inputs, points),
    }
}

fn arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::InvalidArg {
            op,
            msg: format!("expected {n} inputs, got {}", inputs.len()),
        });
    }
    Ok(())
}

pub(super) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub(super) const GELU_C: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

// ── elementwise ──

fn unary(op: &'static str, inputs: &[&Tensor], f: impl Fn(f64) -> f64) -> Result<(Vec<f64>, Vec<usize>)> {
    arity(op, inputs, 1)?;
    let x = inputs[0];
    let data = x.data().iter().map(|&v| f(v)).collect();
    Ok((data, x.shape().to_vec()))
}

fn binary(op: &'static str, inputs: &[&Tensor], f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, Vec<usize>)> {
    arity(op, inputs, 2)?;
    let (a, b) = (inputs[0], inputs[1]);
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok((data, a.shape().to_vec()));
    }
    let Some(out_shape) = broadcast(a.shape(), b.shape()) else {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    };
    let n = numel(&out_shape);
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let ad = a.data();
    let bd = b.data();
    let mut data = vec![0.0; n];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for out in data.iter_mut() {
        *out = f(ad[oa], bd[ob]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Ok((data, out_shape))
}

// ── GEMM and friends (shared with the VJPs) ──

/// c[m×n] += a[m×k] · b[k×n]
pub(super) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = aip.mul_add(bj, *cj);
            }
        }
    }
}

/// Row-major transpose of a[m×n] into a fresh [n×m] buffer.
pub(super) fn transpose2d(m: usize, n: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn matmul(inputs: &[&Tensor]) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("matmul", inputs, 2)?;
    let (a, b) = (inputs[0], inputs[1]);
    let (ra, rb) = (a.rank(), b.rank());
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if ra < 2 || rb < 2 || ra != rb {
        return Err(mismatch());
    }
    let lead = &a.shape()[..ra - 2];
    if lead != &b.shape()[..rb - 2] {
        return Err(mismatch());
    }
    let (m, ka) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if ka != kb {
        return Err(mismatch());
    }
    let batch: usize = lead.iter().product();
    let mut out = vec![0.0; batch * m * n];
    for t in 0..batch {
        gemm_acc(
            m,
            ka,
            n,
            &a.data()[t * m * ka..],
            &b.data()[t * ka * n..],
            &mut out[t * m * n..(t + 1) * m * n],
        );
    }
    let mut shape = lead.to_vec();
    shape.push(m);
    shape.push(n);
    Ok((out, shape))
}

// ── padding / im2col ──

/// Mirror index for reflection padding without edge repetition.
fn reflect_idx(j: isize, n: usize) -> usize {
    let n = n as isize;
    let mut j = j;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * n - 2 - j;
    }
    debug_assert!(j >= 0 && j < n);
    j as usize
}

/// Pads one C×H×W block into C×(H+2p)×(W+2p).
pub(super) fn pad2d(src: &[f64], c: usize, h: usize, w: usize, p: usize, mode: PadMode) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        let sbase = ch * h * w;
        let dbase = ch * hp * wp;
        match mode {
            PadMode::Zeros => {
                for y in 0..h {
                    let srow = &src[sbase + y * w..sbase + (y + 1) * w];
                    let drow = &mut out[dbase + (y + p) * wp + p..];
                    drow[..w].copy_from_slice(srow);
                }
            }
            PadMode::Reflect => {
                for yy in 0..hp {
                    let sy = reflect_idx(yy as isize - p as isize, h);
                    for xx in 0..wp {
                        let sx = reflect_idx(xx as isize - p as isize, w);
                        out[dbase + yy * wp + xx] = src[sbase + sy * w + sx];
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients back through `pad2d`.
pub(super) fn unpad2d_acc(
    gpad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    mode: PadMode,
    gsrc: &mut [f64],
) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    for ch in 0..c {
        let sbase = ch * h * w;
        let dbase = ch * hp * wp;
        match mode {
            PadMode::Zeros => {
                for y in 0..h {
                    let grow = &gpad[dbase + (y + p) * wp + p..];
                    let srow = &mut gsrc[sbase + y * w..sbase + (y + 1) * w];
                    for (s, g) in srow.iter_mut().zip(&grow[..w]) {
                        *s += g;
                    }
                }
            }
            PadMode::Reflect => {
                for yy in 0..hp {
                    let sy = reflect_idx(yy as isize - p as isize, h);
                    for xx in 0..wp {
                        let sx = reflect_idx(xx as isize - p as isize, w);
                        gsrc[sbase + sy * w + sx] += gpad[dbase + yy * wp + xx];
                    }
                }
            }
        }
    }
}

/// Unrolls conv windows of a padded C×Hp×Wp block into [C·kh·kw, Ho·Wo].
pub(super) fn im2col(
    xp: &[f64],
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    s: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * kh * kw * ho * wo];
    let mut row = 0usize;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let src = &xp[(ch * hp + oy * s + ki) * wp + kj..];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        drow.copy_from_slice(&src[..wo]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            *d = src[ox * s];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Scatter-adds [C·kh·kw, Ho·Wo] columns back onto a padded C×Hp×Wp block.
pub(super) fn col2im_acc(
    cols: &[f64],
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    s: usize,
    ho: usize,
    wo: usize,
    xp: &mut [f64],
) {
    let mut row = 0usize;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let dst = &mut xp[(ch * hp + oy * s + ki) * wp + kj..];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        dst[ox * s] += v;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(super) struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(super) fn conv2d_dims(
    x: &Tensor,
    wt: &Tensor,
    stride: usize,
    padding: usize,
    transposed: bool,
) -> Result<ConvDims> {
    let name: &'static str = if transposed { "conv_transpose2d" } else { "conv2d" };
    let mismatch = || Error::ShapeMismatch {
        op: name,
        lhs: x.shape().to_vec(),
        rhs: wt.shape().to_vec(),
    };
    if x.rank() != 4 || wt.rank() != 4 || stride == 0 {
        return Err(mismatch());
    }
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (wt.shape()[2], wt.shape()[3]);
    if transposed {
        // weight layout [Cin, Cout, kh, kw]
        if wt.shape()[0] != cin {
            return Err(mismatch());
        }
        let cout = wt.shape()[1];
        let (Some(ho), Some(wo)) = (convt_out(h, kh, stride, padding), convt_out(w, kw, stride, padding))
        else {
            return Err(mismatch());
        };
        Ok(ConvDims { b, cin, h, w, cout, kh, kw, ho, wo })
    } else {
        // weight layout [Cout, Cin, kh, kw]
        if wt.shape()[1] != cin {
            return Err(mismatch());
        }
        let cout = wt.shape()[0];
        let (Some(ho), Some(wo)) = (conv_out(h, kh, stride, padding), conv_out(w, kw, stride, padding))
        else {
            return Err(mismatch());
        };
        Ok(ConvDims { b, cin, h, w, cout, kh, kw, ho, wo })
    }
}

fn conv2d(inputs: &[&Tensor], stride: usize, padding: usize, mode: PadMode) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("conv2d", inputs, 2)?;
    let (x, wt) = (inputs[0], inputs[1]);
    let d = conv2d_dims(x, wt, stride, padding, false)?;
    if mode == PadMode::Reflect && padding >= d.h.min(d.w) {
        return Err(Error::InvalidArg {
            op: "conv2d",
            msg: format!("reflect padding {padding} too large for {}x{} input", d.h, d.w),
        });
    }
    let (hp, wp) = (d.h + 2 * padding, d.w + 2 * padding);
    let ckk = d.cin * d.kh * d.kw;
    let plane = d.ho * d.wo;
    let mut out = vec![0.0; d.b * d.cout * plane];
    for bi in 0..d.b {
        let xb = &x.data()[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w];
        let cols = if padding == 0 {
            im2col(xb, d.cin, d.h, d.w, d.kh, d.kw, stride, d.ho, d.wo)
        } else {
            let xp = pad2d(xb, d.cin, d.h, d.w, padding, mode);
            im2col(&xp, d.cin, hp, wp, d.kh, d.kw, stride, d.ho, d.wo)
        };
        gemm_acc(
            d.cout,
            ckk,
            plane,
            wt.data(),
            &cols,
            &mut out[bi * d.cout * plane..(bi + 1) * d.cout * plane],
        );
    }
    Ok((out, vec![d.b, d.cout, d.ho, d.wo]))
}

fn conv_transpose2d(inputs: &[&Tensor], stride: usize, padding: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("conv_transpose2d", inputs, 2)?;
    let (x, wt) = (inputs[0], inputs[1]);
    let d = conv2d_dims(x, wt, stride, padding, true)?;
    // Scatter view: the output (padded by `padding`) receives kernel taps at
    // stride-spaced anchors; this is exactly col2im of Wᵀ·x.
    let (hp, wp) = (d.ho + 2 * padding, d.wo + 2 * padding);
    let ckk = d.cout * d.kh * d.kw;
    let plane = d.h * d.w;
    // wt [Cin, Cout·kh·kw] → wt_t [Cout·kh·kw, Cin]
    let wt_t = transpose2d(d.cin, ckk, wt.data());
    let mut out = vec![0.0; d.b * d.cout * d.ho * d.wo];
    for bi in 0..d.b {
        let xb = &x.data()[bi * d.cin * plane..(bi + 1) * d.cin * plane];
        let mut cols = vec![0.0; ckk * plane];
        gemm_acc(ckk, d.cin, plane, &wt_t, xb, &mut cols);
        let mut grown = vec![0.0; d.cout * hp * wp];
        col2im_acc(&cols, d.cout, hp, wp, d.kh, d.kw, stride, d.h, d.w, &mut grown);
        let ob = &mut out[bi * d.cout * d.ho * d.wo..];
        unpad_crop(&grown, d.cout, d.ho, d.wo, padding, ob);
    }
    Ok((out, vec![d.b, d.cout, d.ho, d.wo]))
}

/// Crops a padded C×(H+2p)×(W+2p) block down to C×H×W (assign).
pub(super) fn unpad_crop(grown: &[f64], c: usize, h: usize, w: usize, p: usize, out: &mut [f64]) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    for ch in 0..c {
        for y in 0..h {
            let src = &grown[(ch * hp + y + p) * wp + p..];
            out[ch * h * w + y * w..ch * h * w + (y + 1) * w].copy_from_slice(&src[..w]);
        }
    }
}

fn avg_pool2x2(inputs: &[&Tensor]) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("avg_pool2x2", inputs, 1)?;
    let x = inputs[0];
    if x.rank() != 4 || x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0 {
        return Err(Error::InvalidArg {
            op: "avg_pool2x2",
            msg: format!("need B×C×even×even, got {:?}", x.shape()),
        });
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * ho * wo];
    let xd = x.data();
    for bc in 0..b * c {
        let src = &xd[bc * h * w..];
        let dst = &mut out[bc * ho * wo..];
        for oy in 0..ho {
            let r0 = &src[(2 * oy) * w..];
            let r1 = &src[(2 * oy + 1) * w..];
            let drow = &mut dst[oy * wo..(oy + 1) * wo];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = 0.25 * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
            }
        }
    }
    Ok((out, vec![b, c, ho, wo]))
}

fn upsample_nearest2x(inputs: &[&Tensor]) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("upsample_nearest2x", inputs, 1)?;
    let x = inputs[0];
    if x.rank() != 4 {
        return Err(Error::InvalidArg {
            op: "upsample_nearest2x",
            msg: format!("need B×C×H×W, got {:?}", x.shape()),
        });
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h * 2, w * 2);
    let mut out = vec![0.0; b * c * ho * wo];
    let xd = x.data();
    for bc in 0..b * c {
        let src = &xd[bc * h * w..];
        let dst = &mut out[bc * ho * wo..];
        for y in 0..h {
            let srow = &src[y * w..(y + 1) * w];
            for (x_, &v) in srow.iter().enumerate() {
                let o = (2 * y) * wo + 2 * x_;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + wo] = v;
                dst[o + wo + 1] = v;
            }
        }
    }
    Ok((out, vec![b, c, ho, wo]))
}

// ── reductions / softmax ──

fn softmax(inputs: &[&Tensor], axis: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("softmax", inputs, 1)?;
    let x = inputs[0];
    if axis >= x.rank() {
        return Err(Error::InvalidArg {
            op: "softmax",
            msg: format!("axis {axis} out of range for {:?}", x.shape()),
        });
    }
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..len {
                m = m.max(xd[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (xd[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
    Ok((out, x.shape().to_vec()))
}

fn check_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.is_empty() {
        return Err(Error::InvalidArg { op, msg: "no reduction axes".into() });
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::InvalidArg {
                op,
                msg: format!("bad axes {axes:?} for rank {rank}"),
            });
        }
        seen[a] = true;
    }
    Ok(())
}

pub(super) fn reduce_out_shape(shape: &[usize], axes: &[usize], keepdims: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for (d, &n) in shape.iter().enumerate() {
        if axes.contains(&d) {
            if keepdims {
                out.push(1);
            }
        } else {
            out.push(n);
        }
    }
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Per-input-dim stride into the reduced output (0 along reduced dims).
pub(super) fn reduce_map(shape: &[usize], axes: &[usize], keepdims: bool) -> (Vec<usize>, Vec<usize>, usize) {
    let out_shape = reduce_out_shape(shape, axes, keepdims);
    let mut kept_dims: Vec<usize> = Vec::new();
    for (d, &n) in shape.iter().enumerate() {
        if !axes.contains(&d) {
            kept_dims.push(n);
        }
    }
    let kept_strides = strides(&kept_dims);
    let mut map = vec![0usize; shape.len()];
    let mut ki = 0;
    for (d, m) in map.iter_mut().enumerate() {
        if !axes.contains(&d) {
            *m = kept_strides[ki];
            ki += 1;
        }
    }
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    (out_shape, map, count)
}

/// Accumulates input elements into the reduced layout (sum).
pub(super) fn reduce_sum(x: &Tensor, map: &[usize], out_len: usize) -> Vec<f64> {
    let shape = x.shape();
    let rank = shape.len();
    let mut out = vec![0.0; out_len];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in x.data() {
        out[off] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += map[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            off -= map[d] * shape[d];
        }
    }
    out
}

fn mean(inputs: &[&Tensor], axes: &[usize], keepdims: bool) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("mean", inputs, 1)?;
    let x = inputs[0];
    check_axes("mean", axes, x.rank())?;
    let (out_shape, map, count) = reduce_map(x.shape(), axes, keepdims);
    let mut out = reduce_sum(x, &map, numel(&out_shape));
    let inv = 1.0 / count as f64;
    for v in out.iter_mut() {
        *v *= inv;
    }
    Ok((out, out_shape))
}

fn var(inputs: &[&Tensor], axes: &[usize], keepdims: bool) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("var", inputs, 1)?;
    let x = inputs[0];
    check_axes("var", axes, x.rank())?;
    let (out_shape, map, count) = reduce_map(x.shape(), axes, keepdims);
    let out_len = numel(&out_shape);
    let mut mu = reduce_sum(x, &map, out_len);
    let inv = 1.0 / count as f64;
    for v in mu.iter_mut() {
        *v *= inv;
    }
    // second pass: population variance
    let shape = x.shape();
    let rank = shape.len();
    let mut out = vec![0.0; out_len];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in x.data() {
        let d = v - mu[off];
        out[off] += d * d;
        for dd in (0..rank).rev() {
            idx[dd] += 1;
            off += map[dd];
            if idx[dd] < shape[dd] {
                break;
            }
            idx[dd] = 0;
            off -= map[dd] * shape[dd];
        }
    }
    for v in out.iter_mut() {
        *v *= inv;
    }
    Ok((out, out_shape))
}

// ── structural ops ──

fn concat(inputs: &[&Tensor], axis: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if inputs.is_empty() {
        return Err(Error::InvalidArg { op: "concat", msg: "no inputs".into() });
    }
    let rank = inputs[0].rank();
    if axis >= rank {
        return Err(Error::InvalidArg {
            op: "concat",
            msg: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    let mut axis_total = 0usize;
    for t in inputs {
        if t.rank() != rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: inputs[0].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        for d in 0..rank {
            if d != axis && t.shape()[d] != inputs[0].shape()[d] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: inputs[0].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        axis_total += t.shape()[axis];
    }
    let mut out_shape = inputs[0].shape().to_vec();
    out_shape[axis] = axis_total;
    let inner: usize = inputs[0].shape()[axis + 1..].iter().product();
    let outer: usize = inputs[0].shape()[..axis].iter().product();
    let mut out = vec![0.0; numel(&out_shape)];
    let out_slab = axis_total * inner;
    for o in 0..outer {
        let mut dst = o * out_slab;
        for t in inputs {
            let slab = t.shape()[axis] * inner;
            out[dst..dst + slab].copy_from_slice(&t.data()[o * slab..(o + 1) * slab]);
            dst += slab;
        }
    }
    Ok((out, out_shape))
}

fn slice(inputs: &[&Tensor], starts: &[usize], ends: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("slice", inputs, 1)?;
    let x = inputs[0];
    let rank = x.rank();
    if starts.len() != rank || ends.len() != rank {
        return Err(Error::InvalidArg {
            op: "slice",
            msg: format!("bounds rank {} vs tensor rank {rank}", starts.len()),
        });
    }
    for d in 0..rank {
        if starts[d] >= ends[d] || ends[d] > x.shape()[d] {
            return Err(Error::InvalidArg {
                op: "slice",
                msg: format!("bad range {:?}..{:?} for {:?}", starts, ends, x.shape()),
            });
        }
    }
    let out_shape: Vec<usize> = (0..rank).map(|d| ends[d] - starts[d]).collect();
    let st = strides(x.shape());
    let inner = out_shape[rank - 1];
    let outer = numel(&out_shape) / inner;
    let mut out = vec![0.0; numel(&out_shape)];
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut src = starts[rank - 1];
        for d in 0..rank - 1 {
            src += (starts[d] + idx[d]) * st[d];
        }
        out[o * inner..(o + 1) * inner].copy_from_slice(&x.data()[src..src + inner]);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out, out_shape))
}

fn reshape(inputs: &[&Tensor], shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("reshape", inputs, 1)?;
    let x = inputs[0];
    if numel(shape) != x.numel() {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            lhs: x.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok((x.data().to_vec(), shape.to_vec()))
}

fn permute(inputs: &[&Tensor], perm: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("permute", inputs, 1)?;
    let x = inputs[0];
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArg {
            op: "permute",
            msg: format!("bad permutation {perm:?} for rank {rank}"),
        });
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let xd = x.data();
    for o in out.iter_mut() {
        *o = xd[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_stride[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= src_stride[d] * out_shape[d];
        }
    }
    Ok((out, out_shape))
}

// ── bilinear sampling ──

pub(super) struct Tap {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

/// Four-neighbor taps and weights for one point under the half-pixel
/// convention with border clamping.
pub(super) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Tap {
    let gx = x - 0.5;
    let gy = y - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let fx = gx - x0;
    let fy = gy - y0;
    let clamp = |v: f64, n: usize| -> usize { (v.max(0.0) as usize).min(n - 1) };
    let ix0 = clamp(x0, w);
    let ix1 = clamp(x0 + 1.0, w);
    let iy0 = clamp(y0, h);
    let iy1 = clamp(y0 + 1.0, h);
    Tap {
        idx: [iy0 * w + ix0, iy0 * w + ix1, iy1 * w + ix0, iy1 * w + ix1],
        w: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    }
}

fn bilinear_sample(inputs: &[&Tensor], points: &[(f64, f64)]) -> Result<(Vec<f64>, Vec<usize>)> {
    arity("bilinear_sample", inputs, 1)?;
    let x = inputs[0];
    if x.rank() != 3 {
        return Err(Error::InvalidArg {
            op: "bilinear_sample",
            msg: format!("need C×H×W, got {:?}", x.shape()),
        });
    }
    if points.is_empty() {
        return Err(Error::InvalidArg {
            op: "bilinear_sample",
            msg: "empty point list".into(),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = vec![0.0; points.len() * c];
    for (pi, &(px, py)) in points.iter().enumerate() {
        let t = bilinear_taps(px, py, h, w);
        for ch in 0..c {
            let m = &xd[ch * h * w..];
            out[pi * c + ch] = t.w[0] * m[t.idx[0]]
                + t.w[1] * m[t.idx[1]]
                + t.w[2] * m[t.idx[2]]
                + t.w[3] * m[t.idx[3]];
        }
    }
    Ok((out, vec![points.len(), c]))
}

#[cfg(test)]
mod tests {
    use super::super::{PadMode, Tensor};

    #[test]
    fn conv2d_stride_and_padding() {
        // 1x1x4x4 ramp, 1x1x3x3 ones kernel, stride 2 pad 1 → 2x2
        let x = Tensor::from_vec((0..16).map(|i| i as f64).collect(), &[1, 1, 4, 4]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, 2, 1, PadMode::Zeros);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // window at (0,0) covers rows -1..1, cols -1..1 → 0+1+4+5
        assert_eq!(y.at(&[0, 0, 0, 0]), 10.0);
    }

    #[test]
    fn conv_floor_output() {
        // 2x2 input, 3x3 kernel, stride 2 pad 1 → one output tap
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, 2, 1, PadMode::Zeros);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 4.0);
    }

    #[test]
    fn conv_transpose_doubles_extent() {
        let x = Tensor::ones(&[1, 2, 3, 3]);
        let w = Tensor::ones(&[2, 1, 4, 4]);
        let y = x.conv_transpose2d(&w, 2, 1);
        assert_eq!(y.shape(), &[1, 1, 6, 6]);
    }

    #[test]
    fn pool_and_upsample() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        assert_eq!(x.avg_pool2x2().item(), 2.5);
        let u = x.upsample_nearest2x();
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        assert_eq!(u.at(&[0, 0, 1, 1]), 1.0);
        assert_eq!(u.at(&[0, 0, 3, 1]), 3.0);
        assert_eq!(u.at(&[0, 0, 3, 2]), 4.0);
    }

    #[test]
    fn batched_matmul() {
        let a = Tensor::from_vec((0..12).map(|i| i as f64).collect(), &[2, 2, 3]);
        let b = Tensor::from_vec(vec![1.0; 12], &[2, 3, 2]);
        let y = a.matmul(&b);
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_eq!(y.at(&[0, 0, 0]), 3.0); // 0+1+2
        assert_eq!(y.at(&[1, 1, 1]), 30.0); // 9+10+11
    }

    #[test]
    fn softmax_sums_to_one_and_positive() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0, 9.0, -7.0], &[2, 3]);
        let y = x.softmax(1);
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| y.at(&[r, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((0..3).all(|c| y.at(&[r, c]) > 0.0));
        }
    }

    #[test]
    fn mean_var_axes() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let m = x.mean(&[1], true);
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.data(), &[2.0, 5.0]);
        let v = x.var(&[1], false);
        assert_eq!(v.shape(), &[2]);
        let want = 2.0 / 3.0;
        assert!((v.data()[0] - want).abs() < 1e-12);
        assert!((v.data()[1] - want).abs() < 1e-12);
        let all = x.mean_all();
        assert_eq!(all.shape(), &[1]);
        assert!((all.item() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]);
        let b = Tensor::from_vec(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]);
        let c = Tensor::cat(&[&a, &b], 0);
        assert_eq!(c.shape(), &[3, 2]);
        let back = c.slice(&[1, 0], &[3, 2]);
        assert_eq!(back.data(), b.data());
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::from_vec((0..24).map(|i| i as f64).collect(), &[2, 3, 4]);
        let p = x.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[1, 0, 2]), x.at(&[0, 2, 1]));
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn bilinear_constants_and_midpoint() {
        let m = Tensor::full(&[2, 3, 3], 7.0);
        let y = m.bilinear_sample(&[(0.1, 0.1), (1.5, 1.5), (9.0, -2.0)]);
        assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));

        let row = Tensor::from_vec(vec![0.0, 1.0], &[1, 1, 2]);
        let mid = row.bilinear_sample(&[(1.0, 0.5)]);
        assert!((mid.item() - 0.5).abs() < 1e-12);
    }
}
