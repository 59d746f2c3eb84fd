use serde::{Deserialize, Serialize};

use super::generator::{Generator, Pooling};
use crate::autodiff::{bce_mean, Tape, Tensor, Var};
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::model::{BaseModel, Bound, EncodedBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Weight of the cold-start loss in `alpha * l_a + (1 - alpha) * l_b`.
    pub alpha: f64,
    /// Inner step size `a`.
    pub inner_lr: f64,
    /// Outer step size `b`.
    pub outer_lr: f64,
    pub k: usize,
    pub ids_per_step: usize,
    pub epochs: usize,
    /// L2 coefficient on the generator weights.
    pub l2: f64,
    pub pooling: Pooling,
    pub seed: u64,
    /// Compute the per-ID gradients of a step on the rayon pool.
    pub parallel: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.1,
            inner_lr: 0.01,
            outer_lr: 1e-3,
            k: 20,
            ids_per_step: 32,
            epochs: 2,
            l2: 1e-4,
            pooling: Pooling::Average,
            seed: 0,
            parallel: true,
        }
    }
}

impl MetaConfig {
    /// Step sizes may be zero here; only tests and ablations use that.
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        for (name, v) in [
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("l2", self.l2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(
                    "meta config",
                    format!("{name} = {v} must be finite and non-negative"),
                ));
            }
        }
        if self.k == 0 || self.ids_per_step == 0 {
            return Err(Error::validation("meta config", "k and ids_per_step must be positive"));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation("alpha", format!("{alpha} is outside [0, 1]")));
    }
    Ok(())
}

/// `alpha * l_a + (1 - alpha) * l_b`.
pub fn meta_loss(l_a: f64, l_b: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * l_a + (1.0 - alpha) * l_b)
}

/// `phi - a * grad`.
pub fn adapt_embedding(phi: &Tensor, grad: &Tensor, a: f64) -> Result<Tensor> {
    phi.zip_map(grad, "adapt_embedding", |p, g| p - a * g)
}

/// Encodes a non-empty batch whose instances all belong to one ad.
pub fn encode_ad_batch(model: &BaseModel, batch: &[&Instance]) -> Result<(u32, EncodedBatch)> {
    let first = batch.first().ok_or_else(|| Error::validation("batch", "is empty"))?;
    let ad = first.ad_id(model.schema());
    if let Some(other) = batch.iter().map(|i| i.ad_id(model.schema())).find(|&id| id != ad) {
        return Err(Error::validation("batch", format!("mixes ad {ad} with ad {other}")));
    }
    Ok((ad, model.encode(batch)?))
}

/// Mean log-loss of `batch` predicted with the single embedding `phi` (`[1, m]`).
pub fn cold_loss(tape: &mut Tape, model: &BaseModel, bound: &Bound, phi: Var, batch: &EncodedBatch) -> Result<Var> {
    let rows = tape.broadcast_rows(phi, batch.rows())?;
    let p = model.forward(tape, bound, batch, Some(rows))?;
    bce_mean(tape, p, batch.labels())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    /// `d(l_meta + l2 |W|^2) / dW`.
    pub grad: Tensor,
    pub l_a: f64,
    pub l_b: f64,
    /// Without the L2 term.
    pub l_meta: f64,
    pub grad_norm: f64,
}

struct Prepared {
    a: EncodedBatch,
    b: EncodedBatch,
}

fn prepare(model: &BaseModel, batch_a: &[&Instance], batch_b: &[&Instance]) -> Result<Prepared> {
    for x in batch_a {
        if batch_b.iter().any(|y| std::ptr::eq(*x, *y)) {
            return Err(Error::validation(
                "meta batches",
                "batch a and batch b share an instance",
            ));
        }
    }
    let (ad_a, a) = encode_ad_batch(model, batch_a)?;
    let (ad_b, b) = encode_ad_batch(model, batch_b)?;
    if ad_a != ad_b {
        return Err(Error::validation(
            "meta batches",
            format!("batch a is ad {ad_a}, batch b is ad {ad_b}"),
        ));
    }
    Ok(Prepared { a, b })
}

/// Exact gradient of the two-phase loss with respect to the generator
/// weights, differentiating through the inner step on `phi`.
///
/// Batches must be disjoint (checked by identity) and belong to one ad;
/// the ad's features are taken from `batch_a[0]`.
pub fn meta_gradient(
    model: &BaseModel,
    generator: &Generator,
    batch_a: &[&Instance],
    batch_b: &[&Instance],
    config: &MetaConfig,
) -> Result<MetaGradient> {
    check_alpha(config.alpha)?;
    let prep = prepare(model, batch_a, batch_b)?;
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape)?;
    let (w, phi) = generator.record(&mut tape, model, batch_a[0])?;
    let l_a = cold_loss(&mut tape, model, &bound, phi, &prep.a)?;
    let g_a = tape.grad_graph(l_a, &[phi])?[0];
    let step = tape.scale(g_a, -config.inner_lr)?;
    let adapted = tape.add(phi, step)?;
    let l_b = cold_loss(&mut tape, model, &bound, adapted, &prep.b)?;
    let wa = tape.scale(l_a, config.alpha)?;
    let wb = tape.scale(l_b, 1.0 - config.alpha)?;
    let l_meta = tape.add(wa, wb)?;
    let sq = tape.square(w)?;
    let sq = tape.sum(sq)?;
    let penalty = tape.scale(sq, generator.l2())?;
    let total = tape.add(l_meta, penalty)?;
    let grad = tape.grad(total, &[w])?.remove(0);
    let (l_a, l_b) = (tape.value(l_a).item()?, tape.value(l_b).item()?);
    Ok(MetaGradient {
        grad_norm: grad.norm(),
        grad,
        l_a,
        l_b,
        l_meta: meta_loss(l_a, l_b, config.alpha)?,
    })
}

/// `(l, dl/dphi)` of one batch at a fixed embedding, on a fresh tape.
fn loss_and_grad(model: &BaseModel, phi: &Tensor, batch: &EncodedBatch) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape)?;
    let p = tape.leaf(phi.clone(), true)?;
    let l = cold_loss(&mut tape, model, &bound, p, batch)?;
    let g = tape.grad(l, &[p])?.remove(0);
    Ok((tape.value(l).item()?, g))
}

/// `(d^2 l / dphi^2) v` for one batch at a fixed embedding.
fn loss_hvp(model: &BaseModel, phi: &Tensor, batch: &EncodedBatch, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape)?;
    let p = tape.leaf(phi.clone(), true)?;
    let l = cold_loss(&mut tape, model, &bound, p, batch)?;
    tape.hvp(l, p, v)
}

/// Pulls `dL/dphi` back through `phi = tanh(x W)` and adds the L2 term.
fn chain_to_weights(generator: &Generator, x: &Tensor, phi: &Tensor, d_phi: &Tensor) -> Result<Tensor> {
    let dz = d_phi.zip_map(phi, "tanh backward", |g, p| g * (1.0 - p * p))?;
    let mut grad = x.transpose().matmul(&dz)?;
    grad.axpy(2.0 * generator.l2(), generator.weight().tensor())?;
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SecondOrder {
    /// Drop the Hessian term, treating `dphi'/dphi` as the identity.
    Drop,
    /// Include `-a (1 - alpha) H_a (dl_b/dphi')` via a Hessian-vector product.
    Include,
}

/// The meta-gradient assembled by hand from first-order pieces:
///
/// `dL/dphi = alpha g_a + (1 - alpha) (g_b' - a H_a g_b')`
///
/// where `g_a = dl_a/dphi` at `phi_init`, `g_b' = dl_b/dphi` at the adapted
/// embedding and `H_a` is the Hessian of `l_a` at `phi_init`; then chained
/// through the generator by hand. With [`SecondOrder::Drop`] it shares no
/// code with the double-backprop path beyond first-order gradients.
pub fn meta_gradient_explicit(
    model: &BaseModel,
    generator: &Generator,
    batch_a: &[&Instance],
    batch_b: &[&Instance],
    config: &MetaConfig,
    second_order: SecondOrder,
) -> Result<MetaGradient> {
    check_alpha(config.alpha)?;
    let prep = prepare(model, batch_a, batch_b)?;
    let x = generator.pooled_features(model, batch_a[0])?;
    let phi = x.matmul(generator.weight().tensor())?.map(f64::tanh);
    let (l_a, g_a) = loss_and_grad(model, &phi, &prep.a)?;
    let adapted = adapt_embedding(&phi, &g_a, config.inner_lr)?;
    let (l_b, g_b) = loss_and_grad(model, &adapted, &prep.b)?;
    let mut d_phi = g_a.map(|g| config.alpha * g);
    d_phi.axpy(1.0 - config.alpha, &g_b)?;
    if second_order == SecondOrder::Include {
        let h = loss_hvp(model, &phi, &prep.a, &g_b)?;
        d_phi.axpy(-config.inner_lr * (1.0 - config.alpha), &h)?;
    }
    let grad = chain_to_weights(generator, &x, &phi, &d_phi)?;
    Ok(MetaGradient {
        grad_norm: grad.norm(),
        grad,
        l_a,
        l_b,
        l_meta: meta_loss(l_a, l_b, config.alpha)?,
    })
}

/// The scalar objective `l_meta + l2 |W|^2` at generator weights `w`, for
/// finite-difference checks.
pub fn meta_objective(
    model: &BaseModel,
    generator: &Generator,
    w: &Tensor,
    batch_a: &[&Instance],
    batch_b: &[&Instance],
    config: &MetaConfig,
) -> Result<f64> {
    let prep = prepare(model, batch_a, batch_b)?;
    let x = generator.pooled_features(model, batch_a[0])?;
    let phi = x.matmul(w)?.map(f64::tanh);
    let (l_a, g_a) = loss_and_grad(model, &phi, &prep.a)?;
    let adapted = adapt_embedding(&phi, &g_a, config.inner_lr)?;
    let (l_b, _) = loss_and_grad(model, &adapted, &prep.b)?;
    let penalty: f64 = w.data().iter().map(|v| v * v).sum::<f64>() * generator.l2();
    Ok(meta_loss(l_a, l_b, config.alpha)? + penalty)
}
