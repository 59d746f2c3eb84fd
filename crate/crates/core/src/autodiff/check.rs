//! Finite-difference oracles for gradients and Hessian-vector products.

use super::tensor::Tensor;
use crate::error::Result;

/// Magnitudes below this are compared absolutely in [`rel_error`].
pub const REL_FLOOR: f64 = 1e-6;

/// Largest componentwise `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function.
pub fn central_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut g = x.map(|_| 0.0);
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        g.data_mut()[k] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Hessian-vector product by central differences of the gradient:
/// `(grad(x + h v) - grad(x - h v)) / 2h`.
pub fn fd_hvp(mut grad: impl FnMut(&Tensor) -> Result<Tensor>, x: &Tensor, v: &Tensor, h: f64) -> Result<Tensor> {
    let mut up = x.clone();
    up.axpy(h, v)?;
    let mut down = x.clone();
    down.axpy(-h, v)?;
    let gu = grad(&up)?;
    let gd = grad(&down)?;
    gu.zip_map(&gd, "fd_hvp", |a, b| (a - b) / (2.0 * h))
}
