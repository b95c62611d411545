use ndarray::ArrayView1;

use crate::autograd::{nce_term, NceGrads};
use crate::error::{Error, Result};

fn check(pred: &[f64], positive: &[f64], negatives: &[Vec<f64>], temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid("temperature must be positive and finite"));
    }
    let dim = pred.len();
    for (what, v) in std::iter::once(("prediction", pred))
        .chain(std::iter::once(("positive", positive)))
        .chain(negatives.iter().map(|n| ("negative", n.as_slice())))
    {
        if v.len() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite {what} vector")));
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(Error::invalid(format!("zero-norm {what} vector")));
        }
    }
    Ok(())
}

/// Contrastive loss of one prediction against its positive and a negative
/// set, using cosine similarity divided by `temperature`.
pub fn nce_loss(
    pred: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    check(pred, positive, negatives, temperature)?;
    let (loss, _) = nce_term(
        ArrayView1::from(pred),
        ArrayView1::from(positive),
        negatives.iter().map(|n| ArrayView1::from(n.as_slice())),
        temperature,
        false,
    );
    Ok(loss)
}

/// [`nce_loss`] plus gradients with respect to each input vector.
pub fn nce_loss_with_grad(
    pred: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<(f64, NceGrads)> {
    check(pred, positive, negatives, temperature)?;
    let (loss, grads) = nce_term(
        ArrayView1::from(pred),
        ArrayView1::from(positive),
        negatives.iter().map(|n| ArrayView1::from(n.as_slice())),
        temperature,
        true,
    );
    Ok((loss, grads.unwrap()))
}
