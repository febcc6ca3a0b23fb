//! Forward/backward passes for fully connected ReLU networks.
//!
//! Layer block layout: row-major weights `[out][in]` followed by `out` bias
//! terms. The final layer emits raw logits; softmax lives in the loss.

use super::{log_sum_exp, softmax_grad, BackwardOut, Batch, ForwardOut, LayeredModel};

fn affine(weights: &[f64], input: &[f64], out_dim: usize, in_dim: usize, out: &mut [f64]) {
    let bias = &weights[out_dim * in_dim..];
    for o in 0..out_dim {
        let row = &weights[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias[o];
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        out[o] = acc;
    }
}

/// Run every example through the net, collecting activations per layer.
/// `acts[k]` holds the inputs to layer k; the last entry is the logits.
fn forward_cached(model: &LayeredModel, x: &[f64], dims: &[usize]) -> Vec<Vec<f64>> {
    let n_layers = dims.len() - 1;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
    acts.push(x.to_vec());
    for k in 0..n_layers {
        let (in_dim, out_dim) = (dims[k], dims[k + 1]);
        let mut z = vec![0.0; out_dim];
        affine(&model.params[k], &acts[k], out_dim, in_dim, &mut z);
        if k + 1 < n_layers {
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        acts.push(z);
    }
    acts
}

pub(super) fn forward(model: &LayeredModel, batch: &Batch, dims: &[usize]) -> ForwardOut {
    let classes = *dims.last().unwrap();
    let n = batch.n();
    let mut logits = Vec::with_capacity(n * classes);
    let mut loss = 0.0;
    for i in 0..n {
        let acts = forward_cached(model, batch.row(i), dims);
        let z = acts.last().unwrap();
        loss += log_sum_exp(z) - z[batch.y[i] as usize];
        logits.extend_from_slice(z);
    }
    ForwardOut {
        loss: loss / n as f64,
        logits,
    }
}

pub(super) fn backward(model: &LayeredModel, batch: &Batch, dims: &[usize]) -> BackwardOut {
    let n_layers = dims.len() - 1;
    let n = batch.n();
    let scale = 1.0 / n as f64;
    let mut grads: Vec<Vec<f64>> = model.zero_delta();
    let mut loss = 0.0;

    for i in 0..n {
        let acts = forward_cached(model, batch.row(i), dims);
        let z = acts.last().unwrap();
        loss += log_sum_exp(z) - z[batch.y[i] as usize];

        // dz for the output layer, then walk back.
        let mut dz = vec![0.0; *dims.last().unwrap()];
        softmax_grad(z, batch.y[i] as usize, scale, &mut dz);
        for k in (0..n_layers).rev() {
            let (in_dim, out_dim) = (dims[k], dims[k + 1]);
            let input = &acts[k];
            let (dw, db) = grads[k].split_at_mut(out_dim * in_dim);
            let mut dx = vec![0.0; in_dim];
            let weights = &model.params[k][..out_dim * in_dim];
            for o in 0..out_dim {
                let g = dz[o];
                db[o] += g;
                if g != 0.0 {
                    let w_row = &weights[o * in_dim..(o + 1) * in_dim];
                    let dw_row = &mut dw[o * in_dim..(o + 1) * in_dim];
                    for j in 0..in_dim {
                        dw_row[j] += g * input[j];
                        dx[j] += g * w_row[j];
                    }
                }
            }
            if k > 0 {
                // ReLU mask: layer k's input was relu(z_{k-1}).
                for (d, &a) in dx.iter_mut().zip(input.iter()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                dz = dx;
            }
        }
    }

    BackwardOut {
        loss: loss * scale,
        grads,
    }
}
