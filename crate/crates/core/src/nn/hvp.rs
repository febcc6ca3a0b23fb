//! Hessian-vector products by central finite differences of gradients.
//!
//! Power iteration only needs matrix-vector products, so the full Hessian is
//! never formed; two extra backward passes per product suffice.

use super::{backward, Batch, LayeredModel};
use crate::error::{Error, Result};

/// Central-difference HVP for an arbitrary gradient function:
/// `(grad(w + eps v) - grad(w - eps v)) / (2 eps)`.
///
/// Exact (up to rounding) whenever the gradient is linear in `w`, i.e. for
/// quadratic losses.
pub fn hvp_from_grad_fn<F>(mut grad_fn: F, w: &[f64], v: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(w.len(), v.len());
    let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + eps * b).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - eps * b).collect();
    let g_plus = grad_fn(&plus);
    let g_minus = grad_fn(&minus);
    g_plus
        .iter()
        .zip(&g_minus)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect()
}

/// Step size for the gradient difference, scaled to the weight magnitude and
/// normalized by the direction's largest coordinate. The 2e-4 constant keeps
/// third-order truncation below the bilinear-symmetry tolerance while
/// staying far above cancellation noise.
fn step_size(model: &LayeredModel, v_inf: f64) -> f64 {
    2e-4 * (1.0 + model.inf_norm()) / v_inf
}

/// H·v restricted to the block of the layers listed in `mask`.
///
/// `v` is laid out as the concatenation of the masked layers' blocks in mask
/// order; coordinates outside the mask are treated as zero, so the result is
/// the corresponding principal submatrix applied to `v`.
pub fn hvp(model: &LayeredModel, batch: &Batch, v: &[f64], mask: &[usize]) -> Result<Vec<f64>> {
    let sizes = model.layer_sizes();
    if mask.is_empty() || mask.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::schema("layer mask must be nonempty and strictly increasing"));
    }
    if let Some(&bad) = mask.iter().find(|&&k| k >= sizes.len()) {
        return Err(Error::schema(format!(
            "layer index {bad} out of range (model has {} layers)",
            sizes.len()
        )));
    }
    let masked_len: usize = mask.iter().map(|&k| sizes[k]).sum();
    if v.len() != masked_len {
        return Err(Error::schema(format!(
            "direction has {} coords, masked layers hold {masked_len}",
            v.len()
        )));
    }
    let v_inf = v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if v_inf == 0.0 {
        return Err(Error::numeric("hvp direction vector is all zeros"));
    }
    let eps = step_size(model, v_inf);

    let perturbed = |sign: f64| -> LayeredModel {
        let mut m = model.clone();
        let mut offset = 0;
        for &k in mask {
            let seg = &v[offset..offset + sizes[k]];
            for (p, &d) in m.params[k].iter_mut().zip(seg) {
                *p += sign * eps * d;
            }
            offset += sizes[k];
        }
        m
    };

    let g_plus = backward(&perturbed(1.0), batch)?.grads;
    let g_minus = backward(&perturbed(-1.0), batch)?.grads;
    let mut out = Vec::with_capacity(masked_len);
    for &k in mask {
        for (p, m) in g_plus[k].iter().zip(&g_minus[k]) {
            out.push((p - m) / (2.0 * eps));
        }
    }
    Ok(out)
}
