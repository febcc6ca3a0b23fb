//! Layer importance as the top eigenvalue of each layer's Hessian block,
//! estimated by power iteration over Hessian-vector products, plus the
//! importance-based grouping used to shrink the planner's search space.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{hvp, Batch, LayeredModel};
use crate::rng::{derive_rng, tag};

/// Power-iteration knobs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PowerIterParams {
    /// Relative stop tolerance on successive Rayleigh quotients.
    pub tol: f64,
    pub max_iters: u32,
}

impl Default for PowerIterParams {
    fn default() -> Self {
        PowerIterParams {
            tol: 1e-3,
            max_iters: 100,
        }
    }
}

/// Outcome of one power-iteration run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PowerIterResult {
    /// Signed Rayleigh-quotient estimate of the dominant eigenvalue.
    pub lambda: f64,
    pub iters: u32,
    /// False when max_iters elapsed before the tolerance was met; the
    /// estimate is still the best one seen.
    pub converged: bool,
}

/// Dominant eigenvalue of a symmetric operator given only matrix-vector
/// products. Stops when successive Rayleigh quotients agree to
/// `tol * max(1, |lambda|)`.
pub fn top_eigenvalue<F>(
    mut apply: F,
    dim: usize,
    params: &PowerIterParams,
    rng: &mut ChaCha8Rng,
) -> Result<PowerIterResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    assert!(dim >= 1, "operator dimension must be >= 1");
    assert!(params.tol > 0.0, "tolerance must be positive");
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }

    let mut lambda_prev = f64::INFINITY;
    let mut lambda = 0.0;
    for iter in 1..=params.max_iters {
        let w = apply(&v)?;
        if w.len() != dim {
            return Err(Error::schema(format!(
                "operator returned {} coords for dim {dim}",
                w.len()
            )));
        }
        // v is unit, so the Rayleigh quotient is just v . Hv.
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        if !lambda.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite eigenvalue estimate {lambda} at iteration {iter}"
            )));
        }
        let w_norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if w_norm == 0.0 {
            // v lies in the null space: the dominant eigenvalue along every
            // probed direction is zero.
            return Ok(PowerIterResult {
                lambda: 0.0,
                iters: iter,
                converged: true,
            });
        }
        if (lambda - lambda_prev).abs() <= params.tol * lambda.abs().max(1.0) {
            return Ok(PowerIterResult {
                lambda,
                iters: iter,
                converged: true,
            });
        }
        lambda_prev = lambda;
        v = w.iter().map(|x| x / w_norm).collect();
    }
    Ok(PowerIterResult {
        lambda,
        iters: params.max_iters,
        converged: false,
    })
}

/// Per-layer importance: raw eigenvalues and their normalized weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerImportance {
    pub eigenvalues: Vec<f64>,
    /// Nonnegative, sums to one.
    pub weights: Vec<f64>,
    /// Round at which these values were computed.
    pub round_computed: u32,
}

/// Normalize eigenvalues into importance weights: negatives clamp to zero;
/// if everything clamps away, fall back to uniform weights.
pub fn importance_weights(eigenvalues: &[f64], round_computed: u32) -> LayerImportance {
    assert!(!eigenvalues.is_empty(), "need at least one layer");
    let clamped: Vec<f64> = eigenvalues.iter().map(|&e| e.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    let weights = if total > 0.0 {
        clamped.iter().map(|&c| c / total).collect()
    } else {
        vec![1.0 / eigenvalues.len() as f64; eigenvalues.len()]
    };
    LayerImportance {
        eigenvalues: eigenvalues.to_vec(),
        weights,
        round_computed,
    }
}

/// Assignment of layers to importance groups.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerGrouping {
    /// `group_of[layer]` is the group index in `0..g`; group 0 holds the
    /// highest-importance layers.
    pub group_of: Vec<usize>,
    pub g: usize,
}

/// Partition layers into `g` groups of near-equal size by descending
/// importance; when sizes cannot be equal, the extra layers go to the
/// highest-importance groups. Ties sort by layer index, so the result is
/// deterministic.
pub fn group_layers(importance: &LayerImportance, g: usize) -> Result<LayerGrouping> {
    let l = importance.weights.len();
    if g < 1 || g > l {
        return Err(Error::config(format!(
            "group count {g} out of range 1..={l}"
        )));
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        importance.weights[b]
            .partial_cmp(&importance.weights[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let base = l / g;
    let extra = l % g;
    let mut group_of = vec![0usize; l];
    let mut cursor = 0;
    for group in 0..g {
        let size = base + usize::from(group < extra);
        for _ in 0..size {
            group_of[order[cursor]] = group;
            cursor += 1;
        }
    }
    Ok(LayerGrouping { group_of, g })
}

/// Run per-layer power iteration on a model's Hessian blocks over one batch.
///
/// Layer `k`'s operator is the principal submatrix of the loss Hessian for
/// that layer's parameters; the per-layer RNG stream depends on
/// `(seed, round, layer)` so results are order-independent.
pub fn layer_importance(
    model: &LayeredModel,
    batch: &Batch,
    params: &PowerIterParams,
    seed: u64,
    round: u32,
) -> Result<(LayerImportance, Vec<PowerIterResult>)> {
    let sizes = model.layer_sizes();
    let mut eigenvalues = Vec::with_capacity(sizes.len());
    let mut runs = Vec::with_capacity(sizes.len());
    for (k, &dim) in sizes.iter().enumerate() {
        let mask = [k];
        let mut rng = derive_rng(seed, &[tag::POWER_ITER, u64::from(round), k as u64]);
        let result = top_eigenvalue(
            |v| hvp(model, batch, v, &mask),
            dim,
            params,
            &mut rng,
        )?;
        eigenvalues.push(result.lambda);
        runs.push(result);
    }
    Ok((importance_weights(&eigenvalues, round), runs))
}
