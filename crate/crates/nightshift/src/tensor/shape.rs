//! Shape arithmetic shared by the evaluator, the VJPs, and the
//! architecture shape-walk tests.

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style right-aligned broadcast of two shapes.
pub fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides for reading a tensor of `shape` as if it had been broadcast to
/// `full` (zero stride along broadcast axes). `shape` must be
/// broadcast-compatible with `full`.
pub fn broadcast_strides(shape: &[usize], full: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = full.len() - shape.len();
    let mut out = vec![0usize; full.len()];
    for i in 0..shape.len() {
        out[off + i] = if shape[i] == 1 { 0 } else { s[i] };
    }
    out
}

/// Output extent of a convolution along one axis (floor convention).
/// Returns None when no full kernel window fits.
pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn convt_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (n - 1) * stride + k;
    if grown < 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}
