//! Central finite differences for checking backward rules.

use crate::tensor::Tensor;

/// Numerical gradient of a scalar function, evaluated in f64 around `x`.
pub fn numeric_grad(x: &Tensor, eps: f32, mut f: impl FnMut(&Tensor) -> f32) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe) as f64;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe) as f64;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = ((up - down) / (2.0 * eps as f64)) as f32;
    }
    out
}

/// Largest elementwise `|a - b| / max(1, |a|, |b|)`.
pub fn max_rel_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / 1f32.max(x.abs()).max(y.abs()))
        .fold(0.0, f32::max)
}
