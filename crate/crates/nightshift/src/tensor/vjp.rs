//! Vector-Jacobian products for each primitive. Each rule receives the
//! saved input values, the saved output, and the upstream gradient, and
//! returns one gradient buffer per requested input. Accumulation order is
//! fixed, matching the forward pass determinism contract.

use super::eval::{
    bilinear_taps, col2im_acc, conv2d_dims, gemm_acc, im2col, pad2d, reduce_map, reduce_sum,
    transpose2d, unpad2d_acc, GELU_C, SQRT_2_OVER_PI,
};
use super::ops::{Op, PadMode};
use super::shape::{broadcast_strides, numel, strides};
use super::Tensor;
use crate::error::Result;

type Grads = Vec<Option<Vec<f64>>>;

pub(super) fn vjp(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    gout: &[f64],
    want: &[bool],
) -> Result<Grads> {
    let g = match op {
        Op::Add => binary_vjp(inputs, output, gout, want, |_, _, g| g, |_, _, g| g),
        Op::Sub => binary_vjp(inputs, output, gout, want, |_, _, g| g, |_, _, g| -g),
        Op::Mul => binary_vjp(inputs, output, gout, want, |_, b, g| g * b, |a, _, g| g * a),
        Op::Div => binary_vjp(
            inputs,
            output,
            gout,
            want,
            |_, b, g| g / b,
            |a, b, g| -g * a / (b * b),
        ),
        Op::MatMul => matmul_vjp(inputs, gout, want),
        Op::Conv2d { stride, padding, pad_mode } => {
            conv2d_vjp(inputs, gout, want, *stride, *padding, *pad_mode)
        }
        Op::ConvTranspose2d { stride, padding } => {
            conv_transpose2d_vjp(inputs, gout, want, *stride, *padding)
        }
        Op::AvgPool2x2 => avg_pool_vjp(inputs, gout),
        Op::UpsampleNearest2x => upsample_vjp(inputs, gout),
        Op::Relu => unary_vjp(inputs, output, gout, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Gelu => unary_vjp(inputs, output, gout, |x, _| gelu_deriv(x)),
        Op::Tanh => unary_vjp(inputs, output, gout, |_, y| 1.0 - y * y),
        Op::Exp => unary_vjp(inputs, output, gout, |_, y| y),
        Op::Log => unary_vjp(inputs, output, gout, |x, _| 1.0 / x),
        Op::Sqrt => unary_vjp(inputs, output, gout, |_, y| 0.5 / y),
        Op::Softmax { axis } => softmax_vjp(inputs, output, gout, *axis),
        Op::Mean { axes, keepdims } => mean_vjp(inputs, gout, axes, *keepdims),
        Op::Var { axes, keepdims } => var_vjp(inputs, gout, axes, *keepdims),
        Op::Concat { axis } => concat_vjp(inputs, gout, want, *axis),
        Op::Slice { starts, ends } => slice_vjp(inputs, gout, starts, ends),
        Op::Reshape { .. } => vec![Some(gout.to_vec())],
        Op::Permute { perm } => permute_vjp(inputs, gout, perm),
        Op::BilinearSample { points } => bilinear_vjp(inputs, gout, points),
    };
    Ok(g)
}

fn gelu_deriv(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn unary_vjp(inputs: &[&Tensor], output: &Tensor, gout: &[f64], df: impl Fn(f64, f64) -> f64) -> Grads {
    let x = inputs[0].data();
    let y = output.data();
    let g = gout
        .iter()
        .zip(x.iter().zip(y))
        .map(|(&g, (&x, &y))| g * df(x, y))
        .collect();
    vec![Some(g)]
}

/// Computes per-element gradients for a broadcast binary op, then folds the
/// result back down to each input's shape by summation.
fn binary_vjp(
    inputs: &[&Tensor],
    output: &Tensor,
    gout: &[f64],
    want: &[bool],
    da: impl Fn(f64, f64, f64) -> f64,
    db: impl Fn(f64, f64, f64) -> f64,
) -> Grads {
    let (a, b) = (inputs[0], inputs[1]);
    let full = output.shape();
    if a.shape() == b.shape() {
        let ga = want[0].then(|| {
            a.data()
                .iter()
                .zip(b.data())
                .zip(gout)
                .map(|((&x, &y), &g)| da(x, y, g))
                .collect()
        });
        let gb = want[1].then(|| {
            a.data()
                .iter()
                .zip(b.data())
                .zip(gout)
                .map(|((&x, &y), &g)| db(x, y, g))
                .collect()
        });
        return vec![ga, gb];
    }
    let rank = full.len();
    let sa = broadcast_strides(a.shape(), full);
    let sb = broadcast_strides(b.shape(), full);
    let mut ga = want[0].then(|| vec![0.0; a.numel()]);
    let mut gb = want[1].then(|| vec![0.0; b.numel()]);
    let (ad, bd) = (a.data(), b.data());
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for &g in gout {
        let (x, y) = (ad[oa], bd[ob]);
        if let Some(ga) = ga.as_mut() {
            ga[oa] += da(x, y, g);
        }
        if let Some(gb) = gb.as_mut() {
            gb[ob] += db(x, y, g);
        }
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < full[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * full[d];
            ob -= sb[d] * full[d];
        }
    }
    vec![ga, gb]
}

fn matmul_vjp(inputs: &[&Tensor], gout: &[f64], want: &[bool]) -> Grads {
    let (a, b) = (inputs[0], inputs[1]);
    let ra = a.rank();
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let n = b.shape()[ra - 1];
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let mut ga = want[0].then(|| vec![0.0; a.numel()]);
    let mut gb = want[1].then(|| vec![0.0; b.numel()]);
    for t in 0..batch {
        let gt = &gout[t * m * n..(t + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            // dA = G · Bᵀ
            let bt = transpose2d(k, n, &b.data()[t * k * n..(t + 1) * k * n]);
            gemm_acc(m, n, k, gt, &bt, &mut ga[t * m * k..(t + 1) * m * k]);
        }
        if let Some(gb) = gb.as_mut() {
            // dB = Aᵀ · G
            let at = transpose2d(m, k, &a.data()[t * m * k..(t + 1) * m * k]);
            gemm_acc(k, m, n, &at, gt, &mut gb[t * k * n..(t + 1) * k * n]);
        }
    }
    vec![ga, gb]
}

fn conv2d_vjp(
    inputs: &[&Tensor],
    gout: &[f64],
    want: &[bool],
    stride: usize,
    padding: usize,
    mode: PadMode,
) -> Grads {
    let (x, wt) = (inputs[0], inputs[1]);
    let d = conv2d_dims(x, wt, stride, padding, false).expect("checked in forward");
    let (hp, wp) = (d.h + 2 * padding, d.w + 2 * padding);
    let ckk = d.cin * d.kh * d.kw;
    let plane = d.ho * d.wo;
    let mut gx = want[0].then(|| vec![0.0; x.numel()]);
    let mut gw_t = want[1].then(|| vec![0.0; ckk * d.cout]);
    let wt_t = want[0].then(|| transpose2d(d.cout, ckk, wt.data()));
    for bi in 0..d.b {
        let gb = &gout[bi * d.cout * plane..(bi + 1) * d.cout * plane];
        if let Some(gw_t) = gw_t.as_mut() {
            // dWᵀ += cols · Gᵀ  (cols recomputed from the saved input)
            let xb = &x.data()[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w];
            let cols = if padding == 0 {
                im2col(xb, d.cin, d.h, d.w, d.kh, d.kw, stride, d.ho, d.wo)
            } else {
                let xp = pad2d(xb, d.cin, d.h, d.w, padding, mode);
                im2col(&xp, d.cin, hp, wp, d.kh, d.kw, stride, d.ho, d.wo)
            };
            let gt = transpose2d(d.cout, plane, gb);
            gemm_acc(ckk, plane, d.cout, &cols, &gt, gw_t);
        }
        if let (Some(gx), Some(wt_t)) = (gx.as_mut(), wt_t.as_ref()) {
            // dX = col2im(Wᵀ · G)
            let mut cols_g = vec![0.0; ckk * plane];
            gemm_acc(ckk, d.cout, plane, wt_t, gb, &mut cols_g);
            let gxb = &mut gx[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w];
            if padding == 0 {
                col2im_acc(&cols_g, d.cin, d.h, d.w, d.kh, d.kw, stride, d.ho, d.wo, gxb);
            } else {
                let mut gpad = vec![0.0; d.cin * hp * wp];
                col2im_acc(&cols_g, d.cin, hp, wp, d.kh, d.kw, stride, d.ho, d.wo, &mut gpad);
                unpad2d_acc(&gpad, d.cin, d.h, d.w, padding, mode, gxb);
            }
        }
    }
    let gw = gw_t.map(|t| transpose2d(ckk, d.cout, &t));
    vec![gx, gw]
}

fn conv_transpose2d_vjp(
    inputs: &[&Tensor],
    gout: &[f64],
    want: &[bool],
    stride: usize,
    padding: usize,
) -> Grads {
    let (x, wt) = (inputs[0], inputs[1]);
    let d = conv2d_dims(x, wt, stride, padding, true).expect("checked in forward");
    let (hp, wp) = (d.ho + 2 * padding, d.wo + 2 * padding);
    let ckk = d.cout * d.kh * d.kw;
    let plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    let mut gx = want[0].then(|| vec![0.0; x.numel()]);
    let mut gw = want[1].then(|| vec![0.0; wt.numel()]);
    for bi in 0..d.b {
        // Gradient w.r.t. the padded, grown output, gathered back into
        // column space: cols_g = im2col(pad(G)).
        let gb = &gout[bi * d.cout * out_plane..(bi + 1) * d.cout * out_plane];
        let gpad = pad2d(gb, d.cout, d.ho, d.wo, padding, PadMode::Zeros);
        let cols_g = im2col(&gpad, d.cout, hp, wp, d.kh, d.kw, stride, d.h, d.w);
        if let Some(gx) = gx.as_mut() {
            // dX = W · cols_g
            gemm_acc(
                d.cin,
                ckk,
                plane,
                wt.data(),
                &cols_g,
                &mut gx[bi * d.cin * plane..(bi + 1) * d.cin * plane],
            );
        }
        if let Some(gw) = gw.as_mut() {
            // dW += X · cols_gᵀ
            let xb = &x.data()[bi * d.cin * plane..(bi + 1) * d.cin * plane];
            let cols_t = transpose2d(ckk, plane, &cols_g);
            gemm_acc(d.cin, plane, ckk, xb, &cols_t, gw);
        }
    }
    vec![gx, gw]
}

fn avg_pool_vjp(inputs: &[&Tensor], gout: &[f64]) -> Grads {
    let x = inputs[0];
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![0.0; x.numel()];
    for bc in 0..b * c {
        let src = &gout[bc * ho * wo..];
        let dst = &mut gx[bc * h * w..(bc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = 0.25 * src[oy * wo + ox];
                dst[(2 * oy) * w + 2 * ox] += g;
                dst[(2 * oy) * w + 2 * ox + 1] += g;
                dst[(2 * oy + 1) * w + 2 * ox] += g;
                dst[(2 * oy + 1) * w + 2 * ox + 1] += g;
            }
        }
    }
    vec![Some(gx)]
}

fn upsample_vjp(inputs: &[&Tensor], gout: &[f64]) -> Grads {
    let x = inputs[0];
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let wo = w * 2;
    let mut gx = vec![0.0; x.numel()];
    for bc in 0..b * c {
        let src = &gout[bc * h * w * 4..];
        let dst = &mut gx[bc * h * w..(bc + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let o = (2 * y) * wo + 2 * x_;
                dst[y * w + x_] += src[o] + src[o + 1] + src[o + wo] + src[o + wo + 1];
            }
        }
    }
    vec![Some(gx)]
}

fn softmax_vjp(inputs: &[&Tensor], output: &Tensor, gout: &[f64], axis: usize) -> Grads {
    let x = inputs[0];
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let y = output.data();
    let mut gx = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                let p = base + j * inner;
                dot += gout[p] * y[p];
            }
            for j in 0..len {
                let p = base + j * inner;
                gx[p] = y[p] * (gout[p] - dot);
            }
        }
    }
    vec![Some(gx)]
}

fn mean_vjp(inputs: &[&Tensor], gout: &[f64], axes: &[usize], keepdims: bool) -> Grads {
    let x = inputs[0];
    let (_, map, count) = reduce_map(x.shape(), axes, keepdims);
    let inv = 1.0 / count as f64;
    let shape = x.shape();
    let rank = shape.len();
    let mut gx = vec![0.0; x.numel()];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for g in gx.iter_mut() {
        *g = gout[off] * inv;
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
    vec![Some(gx)]
}

fn var_vjp(inputs: &[&Tensor], gout: &[f64], axes: &[usize], keepdims: bool) -> Grads {
    let x = inputs[0];
    let (out_shape, map, count) = reduce_map(x.shape(), axes, keepdims);
    let inv = 1.0 / count as f64;
    let mut mu = reduce_sum(x, &map, numel(&out_shape));
    for v in mu.iter_mut() {
        *v *= inv;
    }
    let shape = x.shape();
    let rank = shape.len();
    let mut gx = vec![0.0; x.numel()];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let xd = x.data();
    for (i, g) in gx.iter_mut().enumerate() {
        *g = gout[off] * 2.0 * (xd[i] - mu[off]) * inv;
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
    vec![Some(gx)]
}

fn concat_vjp(inputs: &[&Tensor], gout: &[f64], want: &[bool], axis: usize) -> Grads {
    let inner: usize = inputs[0].shape()[axis + 1..].iter().product();
    let outer: usize = inputs[0].shape()[..axis].iter().product();
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let out_slab = total * inner;
    let mut grads: Grads = inputs
        .iter()
        .zip(want)
        .map(|(t, &w)| w.then(|| vec![0.0; t.numel()]))
        .collect();
    for o in 0..outer {
        let mut src = o * out_slab;
        for (t, g) in inputs.iter().zip(grads.iter_mut()) {
            let slab = t.shape()[axis] * inner;
            if let Some(g) = g {
                g[o * slab..(o + 1) * slab].copy_from_slice(&gout[src..src + slab]);
            }
            src += slab;
        }
    }
    grads
}

fn slice_vjp(inputs: &[&Tensor], gout: &[f64], starts: &[usize], ends: &[usize]) -> Grads {
    let x = inputs[0];
    let rank = x.rank();
    let st = strides(x.shape());
    let out_shape: Vec<usize> = (0..rank).map(|d| ends[d] - starts[d]).collect();
    let inner = out_shape[rank - 1];
    let outer = numel(&out_shape) / inner;
    let mut gx = vec![0.0; x.numel()];
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut dst = starts[rank - 1];
        for d in 0..rank - 1 {
            dst += (starts[d] + idx[d]) * st[d];
        }
        gx[dst..dst + inner].copy_from_slice(&gout[o * inner..(o + 1) * inner]);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    vec![Some(gx)]
}

fn permute_vjp(inputs: &[&Tensor], gout: &[f64], perm: &[usize]) -> Grads {
    let x = inputs[0];
    let rank = x.rank();
    // scatter: walk the output row-major, writing into permuted source slots
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut gx = vec![0.0; x.numel()];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for &g in gout {
        gx[src] = g;
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
    vec![Some(gx)]
}

fn bilinear_vjp(inputs: &[&Tensor], gout: &[f64], points: &[(f64, f64)]) -> Grads {
    let x = inputs[0];
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut gx = vec![0.0; x.numel()];
    for (pi, &(px, py)) in points.iter().enumerate() {
        let t = bilinear_taps(px, py, h, w);
        for ch in 0..c {
            let g = gout[pi * c + ch];
            let m = &mut gx[ch * h * w..(ch + 1) * h * w];
            m[t.idx[0]] += t.w[0] * g;
            m[t.idx[1]] += t.w[1] * g;
            m[t.idx[2]] += t.w[2] * g;
            m[t.idx[3]] += t.w[3] * g;
        }
    }
    vec![Some(gx)]
}
