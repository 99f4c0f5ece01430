//! Stable scalar math shared by losses and tests.

/// log σ(x), computed as −softplus(−x). Monotone increasing, always ≤ 0,
/// no underflow to −∞ for large positive x.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// ln(1+eˣ) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// logsumexp of a slice, stabilized by max subtraction.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of a slice into a fresh vector, stabilized by max subtraction.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= z;
    }
    out
}
