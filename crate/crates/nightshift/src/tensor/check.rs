//! Central-difference gradient checking. The analytic gradient from one
//! backward pass is compared element-by-element against
//! (f(x+εe) − f(x−εe)) / 2ε, reporting the worst relative error.

use super::tape::Tape;
use super::Tensor;

/// Numeric gradient of a scalar-valued function at `x`.
pub fn numeric_grad(mut f: impl FnMut(&Tensor) -> Tensor, x: &Tensor, eps: f64) -> Vec<f64> {
    let base = x.data().to_vec();
    let mut g = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(plus, x.shape())).item();
        let fm = f(&Tensor::from_vec(minus, x.shape())).item();
        g[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Max relative error between the taped gradient of `f` at `x` and the
/// central-difference estimate. `f` must be deterministic and return a
/// [1]-shaped scalar; the denominator is max(|analytic|, |numeric|, 1e-8).
pub fn grad_check(mut f: impl FnMut(&Tensor) -> Tensor, x: &Tensor, eps: f64) -> f64 {
    assert!(eps > 0.0, "grad_check: eps must be positive");
    let leaf = x.tracked();
    let tape = Tape::begin();
    let y = f(&leaf);
    assert_eq!(y.numel(), 1, "grad_check: fn must return a scalar, got {:?}", y.shape());
    let grads = tape.backward(&y).expect("backward failed in grad_check");
    let analytic: Vec<f64> = match grads.get(&leaf) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.numel()],
    };
    let numeric = numeric_grad(&mut f, x, eps);
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(&numeric) {
        let denom = a.abs().max(n.abs()).max(1e-8);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
