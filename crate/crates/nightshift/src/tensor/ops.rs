//! The primitive catalogue. Every differentiable computation in the model
//! is expressed through these ops; attributes ride along in the variants.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    Reflect,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv2d { stride: usize, padding: usize, pad_mode: PadMode },
    ConvTranspose2d { stride: usize, padding: usize },
    AvgPool2x2,
    UpsampleNearest2x,
    Relu,
    Gelu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Softmax { axis: usize },
    Mean { axes: Vec<usize>, keepdims: bool },
    Var { axes: Vec<usize>, keepdims: bool },
    Concat { axis: usize },
    Slice { starts: Vec<usize>, ends: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
    BilinearSample { points: Vec<(f64, f64)> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::AvgPool2x2 => "avg_pool2x2",
            Op::UpsampleNearest2x => "upsample_nearest2x",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Softmax { .. } => "softmax",
            Op::Mean { .. } => "mean",
            Op::Var { .. } => "var",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::BilinearSample { .. } => "bilinear_sample",
        }
    }
}
