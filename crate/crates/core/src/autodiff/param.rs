use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named tensor that an optimizer may update.
///
/// The value sits behind an `Arc` so that binding it to a tape is cheap; an
/// update while a tape still holds the old value copies on write.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    tensor: Arc<Tensor>,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor: Arc::new(tensor),
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            trainable: false,
            ..Parameter::new(name, tensor)
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub(crate) fn shared(&self) -> Arc<Tensor> {
        self.tensor.clone()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Replaces the value; the shape must not change.
    pub fn set(&mut self, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.tensor.shape() {
            return Err(Error::shape("Parameter::set", self.tensor.shape(), tensor.shape()));
        }
        self.tensor = Arc::new(tensor);
        Ok(())
    }

    pub(crate) fn tensor_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.tensor)
    }
}

/// `param <- param - lr * grad` for each pair.
///
/// Every parameter must be trainable; a frozen one is an error naming it,
/// and nothing is updated in that case.
pub fn sgd_step(params: &mut [&mut Parameter], grads: &[Tensor], lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::validation("learning rate", format!("{lr} must be positive")));
    }
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if !p.trainable {
            return Err(Error::validation(format!("parameter `{}`", p.name), "is frozen"));
        }
        if p.tensor.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.tensor.shape(), g.shape()));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p.tensor_mut().axpy(-lr, g)?;
    }
    Ok(())
}

/// SHA-256 over names, shapes and the bit patterns of the values.
pub fn checksum<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        for d in p.tensor.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_arithmetic() {
        let mut p = Parameter::new("p", Tensor::row(vec![1., 1.]));
        sgd_step(&mut [&mut p], &[Tensor::row(vec![2., 4.])], 0.5).unwrap();
        assert_eq!(p.tensor().data(), &[0., -1.]);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut p = Parameter::new("p", Tensor::row(vec![0.25, -3.0]));
        sgd_step(&mut [&mut p], &[Tensor::row(vec![0., 0.])], 0.1).unwrap();
        assert_eq!(p.tensor().data(), &[0.25, -3.0]);
    }

    #[test]
    fn sgd_rejects_frozen_and_bad_lr() {
        let mut a = Parameter::new("a", Tensor::row(vec![1.]));
        let mut f = Parameter::frozen("theta.w0", Tensor::row(vec![1.]));
        let g = [Tensor::row(vec![1.]), Tensor::row(vec![1.])];
        let err = sgd_step(&mut [&mut a, &mut f], &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("theta.w0"));
        assert_eq!(a.tensor().data(), &[1.]);
        assert_eq!(f.tensor().data(), &[1.]);
        assert!(sgd_step(&mut [&mut a], &g[..1], 0.0).is_err());
        assert!(sgd_step(&mut [&mut a], &g[..1], -1.0).is_err());
    }

    #[test]
    fn checksum_tracks_bits() {
        let a = Parameter::new("a", Tensor::row(vec![0.0]));
        let b = Parameter::new("a", Tensor::row(vec![-0.0]));
        assert_ne!(checksum([&a]), checksum([&b]));
        assert_eq!(checksum([&a]), checksum([&a.clone()]));
    }
}
