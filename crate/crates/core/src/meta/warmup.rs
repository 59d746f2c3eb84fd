use super::gradient::{cold_loss, encode_ad_batch};
use crate::autodiff::{Tape, Tensor};
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::model::BaseModel;

/// One SGD step on the mean log-loss of `batch`, updating only the ad's
/// embedding `row` (`[1, m]`); every other parameter is read-only.
pub fn warmup_update(model: &BaseModel, row: &Tensor, ad_id: u32, batch: &[&Instance], lr: f64) -> Result<Tensor> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::validation(
            "warm-up lr",
            format!("{lr} must be finite and non-negative"),
        ));
    }
    if row.shape() != [1, model.dim()] {
        return Err(Error::shape("warmup_update", row.shape(), &[1, model.dim()]));
    }
    let (ad, encoded) = encode_ad_batch(model, batch)?;
    if ad != ad_id {
        return Err(Error::validation(
            "warm-up batch",
            format!("belongs to ad {ad}, not ad {ad_id}"),
        ));
    }
    if lr == 0.0 {
        return Ok(row.clone());
    }
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape)?;
    let phi = tape.leaf(row.clone(), true)?;
    let loss = cold_loss(&mut tape, model, &bound, phi, &encoded)?;
    let g = tape.grad(loss, &[phi])?.remove(0);
    let mut out = row.clone();
    out.axpy(-lr, &g)?;
    Ok(out)
}
