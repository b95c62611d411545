//! Browser bindings for a few pure pieces of the toolkit: the sampling
//! distribution over neighbour similarities, the quantizer's per-dimension
//! centroid budgets, and the cubic PPX-versus-VERT fit.

use toklm::eval::{CubicFit, VERT_ANCHORS};
use toklm::quantize::centroid_budget;
use toklm::sample;
use wasm_bindgen::prelude::*;

/// Softmax of `similarities / temperature`, argmax below the cutoff.
#[wasm_bindgen]
pub fn sampling_distribution(similarities: Vec<f64>, temperature: f64) -> Vec<f64> {
    sample::sampling_distribution(&similarities, temperature)
}

/// Entropy in nats of the sampling distribution.
#[wasm_bindgen]
pub fn sampling_entropy(similarities: Vec<f64>, temperature: f64) -> f64 {
    sample::entropy(&sample::sampling_distribution(&similarities, temperature))
}

/// Centroids allotted to each retained dimension given its variance;
/// `variances[0]` is the largest.
#[wasm_bindgen]
pub fn centroid_budgets(k: usize, variances: Vec<f64>) -> Vec<usize> {
    let v0 = variances.first().copied().unwrap_or(0.0);
    variances
        .iter()
        .map(|&v| centroid_budget(k, v, v0))
        .collect()
}

/// Cubic least-squares fit of `ppx` on `vert`. Returns
/// `[ppx@anchor0, extrapolated0, ppx@anchor1, extrapolated1, v_0, p_0, ...]`
/// with 41 fitted samples across the VERT range, or an error string.
#[wasm_bindgen]
pub fn ppx_curve(vert: Vec<f64>, ppx: Vec<f64>) -> Result<Vec<f64>, JsValue> {
    if vert.len() != ppx.len() {
        return Err(JsValue::from_str("vert and ppx lengths differ"));
    }
    let points: Vec<(f64, f64)> = vert.into_iter().zip(ppx).collect();
    let fit = CubicFit::fit(&points).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let mut out = Vec::new();
    for a in VERT_ANCHORS {
        out.push(fit.eval(a));
        out.push(fit.extrapolates(a) as u8 as f64);
    }
    for i in 0..=40 {
        let v = fit.x_min + (fit.x_max - fit.x_min) * i as f64 / 40.0;
        out.push(v);
        out.push(fit.eval(v));
    }
    Ok(out)
}
