//! A small f64 tensor library with reverse-mode automatic differentiation
//! on a thread-local tape. Tensors are immutable; ops are pure functions
//! that optionally record onto the innermost active tape.

mod check;
mod eval;
mod ops;
pub mod shape;
mod tape;
mod vjp;

pub use check::{grad_check, numeric_grad};
pub use ops::{Op, PadMode};
pub use tape::{GradMap, Tape};

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// N-dimensional f64 array. Cloning is cheap (shared storage). A tensor
/// with `requires_grad` participates in tape recording as a leaf or as an
/// op output; everything else is constant data.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            shape::numel(shape),
            "from_vec: {} values do not fill shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: shape.to_vec(),
                data,
                requires_grad: false,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape::numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![1.0; shape::numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(vec![v; shape::numel(shape)], shape)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[1])
    }

    pub fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::from_vec(d, &[n, n])
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item: tensor has shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.rank());
        let st = shape::strides(self.shape());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            assert!(ix < self.shape()[i], "at: index {:?} out of {:?}", idx, self.shape());
            off += ix * st[i];
        }
        self.inner.data[off]
    }

    /// Same data, no gradient history, fresh identity.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.inner.data.clone(), &self.inner.shape)
    }

    /// A differentiable leaf built directly from data (no extra copy).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(data.len(), shape::numel(shape));
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: shape.to_vec(),
                data,
                requires_grad: true,
            }),
        }
    }

    /// Marks a copy of this tensor as a differentiable leaf.
    pub fn tracked(&self) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad: true,
            }),
        }
    }

    pub(crate) fn new_result(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), shape::numel(&shape));
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
            }),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.numel().min(8);
        write!(
            f,
            "Tensor{:?}{}{:?}{}",
            self.shape(),
            if self.requires_grad() { "*" } else { "" },
            &self.data()[..n],
            if self.numel() > n { "…" } else { "" }
        )
    }
}

/// Applies one primitive: evaluates the forward value, then records a tape
/// node when gradients are being tracked. This is the single entry point
/// every op goes through.
pub fn primitive_forward(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let (data, out_shape) = eval::eval(&op, inputs)?;
    #[cfg(debug_assertions)]
    {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
    }
    let track = tape::recording_active() && inputs.iter().any(|t| t.requires_grad());
    let out = Tensor::new_result(data, out_shape, track);
    if track {
        tape::record(op, inputs, &out);
    }
    Ok(out)
}

fn unwrap_op(r: Result<Tensor>) -> Tensor {
    r.unwrap_or_else(|e| panic!("{e}"))
}

impl Tensor {
    // ── primitive wrappers (panic on misuse; see `primitive_forward` for
    //    the checked interface) ──

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        unwrap_op(primitive_forward(Op::Add, &[self, rhs]))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        unwrap_op(primitive_forward(Op::Sub, &[self, rhs]))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        unwrap_op(primitive_forward(Op::Mul, &[self, rhs]))
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        unwrap_op(primitive_forward(Op::Div, &[self, rhs]))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        unwrap_op(primitive_forward(Op::MatMul, &[self, rhs]))
    }

    pub fn conv2d(&self, weight: &Tensor, stride: usize, padding: usize, pad_mode: PadMode) -> Tensor {
        unwrap_op(primitive_forward(
            Op::Conv2d { stride, padding, pad_mode },
            &[self, weight],
        ))
    }

    pub fn conv_transpose2d(&self, weight: &Tensor, stride: usize, padding: usize) -> Tensor {
        unwrap_op(primitive_forward(
            Op::ConvTranspose2d { stride, padding },
            &[self, weight],
        ))
    }

    pub fn avg_pool2x2(&self) -> Tensor {
        unwrap_op(primitive_forward(Op::AvgPool2x2, &[self]))
    }

    pub fn upsample_nearest2x(&self) -> Tensor {
        unwrap_op(primitive_forward(Op::UpsampleNearest2x, &[self]))
    }

    pub fn relu(&self) -> Tensor {
        unwrap_op(primitive_forward(Op::Relu, &[self]))
    }

    pub fn gelu(&self) -> Tensor {
        unwrap_op(primitive_forward(Op::Gelu, &[self]))
    }

    pub fn tanh(&self) -> Tensor {
        unwrap_op(primitive_forward(Op::Tanh, &[self]))
    }

    pub fn exp(&self) -> Tensor {
        unwrap_op(primitive_forward(Op::Exp, &[self]))
    }

    pub fn log(&self) -> Tensor {
        unwrap_op(primitive_forward(Op::Log, &[self]))
    }

    pub fn sqrt(&self) -> Tensor {
        unwrap_op(primitive_forward(Op::Sqrt, &[self]))
    }

    pub fn softmax(&self, axis: usize) -> Tensor {
        unwrap_op(primitive_forward(Op::Softmax { axis }, &[self]))
    }

    pub fn mean(&self, axes: &[usize], keepdims: bool) -> Tensor {
        unwrap_op(primitive_forward(
            Op::Mean { axes: axes.to_vec(), keepdims },
            &[self],
        ))
    }

    pub fn var(&self, axes: &[usize], keepdims: bool) -> Tensor {
        unwrap_op(primitive_forward(
            Op::Var { axes: axes.to_vec(), keepdims },
            &[self],
        ))
    }

    pub fn cat(parts: &[&Tensor], axis: usize) -> Tensor {
        unwrap_op(primitive_forward(Op::Concat { axis }, parts))
    }

    pub fn slice(&self, starts: &[usize], ends: &[usize]) -> Tensor {
        unwrap_op(primitive_forward(
            Op::Slice { starts: starts.to_vec(), ends: ends.to_vec() },
            &[self],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        unwrap_op(primitive_forward(Op::Reshape { shape: shape.to_vec() }, &[self]))
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        unwrap_op(primitive_forward(Op::Permute { perm: perm.to_vec() }, &[self]))
    }

    /// Samples a C×H×W map at continuous (x, y) points using half-pixel
    /// centers; returns |points|×C.
    pub fn bilinear_sample(&self, points: &[(f64, f64)]) -> Tensor {
        unwrap_op(primitive_forward(
            Op::BilinearSample { points: points.to_vec() },
            &[self],
        ))
    }

    // ── compositions (built strictly from the primitives above) ──

    /// Mean over all elements, as a [1]-shaped scalar.
    pub fn mean_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.mean(&axes, false)
    }

    /// Sum over all elements, as a [1]-shaped scalar.
    pub fn sum_all(&self) -> Tensor {
        self.mean_all().scale(self.numel() as f64)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.mul(&Tensor::scalar(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.add(&Tensor::scalar(c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Numerically stable logistic sigmoid: 0.5·(tanh(x/2) + 1).
    pub fn sigmoid(&self) -> Tensor {
        self.scale(0.5).tanh().add_scalar(1.0).scale(0.5)
    }

    /// |x| as relu(x) + relu(−x).
    pub fn abs(&self) -> Tensor {
        self.relu().add(&self.neg().relu())
    }

    /// Stable softplus log(1 + eˣ) = relu(x) + log(1 + e^{−|x|}).
    pub fn softplus(&self) -> Tensor {
        let tail = self.abs().neg().exp().add_scalar(1.0).log();
        self.relu().add(&tail)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.relu().sub(&self.neg().relu().scale(slope))
    }

    /// Rows of a 2-D tensor scaled to unit L2 norm (eps keeps zero rows finite).
    pub fn l2_normalize_rows(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "l2_normalize_rows: need 2-D, got {:?}", self.shape());
        let sq = self.mul(self);
        let sum = sq.mean(&[1], true).scale(self.shape()[1] as f64);
        let norm = sum.add_scalar(1e-12).sqrt();
        self.div(&norm)
    }
}
