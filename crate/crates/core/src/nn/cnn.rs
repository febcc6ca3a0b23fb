//! Forward/backward passes for plain CNNs: valid stride-1 convolutions with
//! ReLU and optional 2x2 mean pooling, then dense layers.
//!
//! Conv block layout: weights `[out_ch][in_ch][k][k]` row-major, then
//! `out_ch` bias terms. Dense blocks match the MLP layout.

use super::{log_sum_exp, softmax_grad, BackwardOut, Batch, CnnLayer, ForwardOut, LayeredModel};

/// Resolved tensor shapes for one stage.
#[derive(Debug, Clone, Copy)]
enum Stage {
    Conv {
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        conv_h: usize,
        conv_w: usize,
        kernel: usize,
        pool: bool,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
        relu: bool,
    },
}

fn shape_chain(input: (usize, usize, usize), layers: &[CnnLayer]) -> Vec<Stage> {
    let (mut c, mut h, mut w) = input;
    let mut flat = 0usize;
    let mut stages = Vec::with_capacity(layers.len());
    for (idx, layer) in layers.iter().enumerate() {
        match *layer {
            CnnLayer::Conv {
                in_ch,
                out_ch,
                kernel,
                pool,
            } => {
                debug_assert_eq!(in_ch, c);
                let conv_h = h - kernel + 1;
                let conv_w = w - kernel + 1;
                stages.push(Stage::Conv {
                    in_c: c,
                    in_h: h,
                    in_w: w,
                    out_c: out_ch,
                    conv_h,
                    conv_w,
                    kernel,
                    pool,
                });
                c = out_ch;
                h = if pool { conv_h / 2 } else { conv_h };
                w = if pool { conv_w / 2 } else { conv_w };
                flat = c * h * w;
            }
            CnnLayer::Dense { in_dim, out_dim } => {
                debug_assert_eq!(in_dim, flat);
                stages.push(Stage::Dense {
                    in_dim,
                    out_dim,
                    relu: idx + 1 < layers.len(),
                });
                flat = out_dim;
            }
        }
    }
    stages
}

/// Per-stage values kept for the backward pass.
struct Cache {
    /// Stage input tensor (flattened).
    input: Vec<f64>,
    /// Post-ReLU, pre-pool activation for conv stages; post-activation
    /// output for dense stages.
    activated: Vec<f64>,
}

fn conv_forward(stage: &Stage, params: &[f64], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let Stage::Conv {
        in_c,
        in_h,
        in_w,
        out_c,
        conv_h,
        conv_w,
        kernel,
        pool,
    } = *stage
    else {
        unreachable!()
    };
    let bias = &params[out_c * in_c * kernel * kernel..];
    let mut act = vec![0.0; out_c * conv_h * conv_w];
    for oc in 0..out_c {
        for i in 0..conv_h {
            for j in 0..conv_w {
                let mut acc = bias[oc];
                for ic in 0..in_c {
                    for u in 0..kernel {
                        let w_base = ((oc * in_c + ic) * kernel + u) * kernel;
                        let in_base = ic * in_h * in_w + (i + u) * in_w + j;
                        for v in 0..kernel {
                            acc += params[w_base + v] * input[in_base + v];
                        }
                    }
                }
                act[oc * conv_h * conv_w + i * conv_w + j] = acc.max(0.0);
            }
        }
    }
    if !pool {
        let out = act.clone();
        return (act, out);
    }
    let (ph, pw) = (conv_h / 2, conv_w / 2);
    let mut pooled = vec![0.0; out_c * ph * pw];
    for oc in 0..out_c {
        for pi in 0..ph {
            for pj in 0..pw {
                let mut acc = 0.0;
                for di in 0..2 {
                    for dj in 0..2 {
                        acc += act[oc * conv_h * conv_w + (2 * pi + di) * conv_w + (2 * pj + dj)];
                    }
                }
                pooled[oc * ph * pw + pi * pw + pj] = acc / 4.0;
            }
        }
    }
    (act, pooled)
}

fn dense_forward(stage: &Stage, params: &[f64], input: &[f64]) -> Vec<f64> {
    let Stage::Dense {
        in_dim,
        out_dim,
        relu,
    } = *stage
    else {
        unreachable!()
    };
    let bias = &params[out_dim * in_dim..];
    let mut out = vec![0.0; out_dim];
    for o in 0..out_dim {
        let row = &params[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias[o];
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        out[o] = if relu { acc.max(0.0) } else { acc };
    }
    out
}

/// Run one example through every stage, returning per-stage caches; the last
/// cache's `activated` is the logits.
fn forward_example(model: &LayeredModel, stages: &[Stage], x: &[f64]) -> Vec<Cache> {
    let mut caches = Vec::with_capacity(stages.len());
    let mut current = x.to_vec();
    for (k, stage) in stages.iter().enumerate() {
        let next = match stage {
            Stage::Conv { .. } => {
                let (act, out) = conv_forward(stage, &model.params[k], &current);
                caches.push(Cache {
                    input: std::mem::take(&mut current),
                    activated: act,
                });
                out
            }
            Stage::Dense { .. } => {
                let out = dense_forward(stage, &model.params[k], &current);
                caches.push(Cache {
                    input: std::mem::take(&mut current),
                    activated: out.clone(),
                });
                out
            }
        };
        current = next;
    }
    caches
}

pub(super) fn forward(
    model: &LayeredModel,
    batch: &Batch,
    input: (usize, usize, usize),
    layers: &[CnnLayer],
) -> ForwardOut {
    let stages = shape_chain(input, layers);
    let n = batch.n();
    let classes = model.arch.n_classes();
    let mut logits = Vec::with_capacity(n * classes);
    let mut loss = 0.0;
    for i in 0..n {
        let caches = forward_example(model, &stages, batch.row(i));
        let z = &caches.last().unwrap().activated;
        loss += log_sum_exp(z) - z[batch.y[i] as usize];
        logits.extend_from_slice(z);
    }
    ForwardOut {
        loss: loss / n as f64,
        logits,
    }
}

fn conv_backward(
    stage: &Stage,
    params: &[f64],
    cache: &Cache,
    d_out: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let Stage::Conv {
        in_c,
        in_h,
        in_w,
        out_c,
        conv_h,
        conv_w,
        kernel,
        pool,
    } = *stage
    else {
        unreachable!()
    };
    // Un-pool (if any), then apply the ReLU mask from the stored activation.
    let mut dz = vec![0.0; out_c * conv_h * conv_w];
    if pool {
        let (ph, pw) = (conv_h / 2, conv_w / 2);
        for oc in 0..out_c {
            for pi in 0..ph {
                for pj in 0..pw {
                    let g = d_out[oc * ph * pw + pi * pw + pj] / 4.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            dz[oc * conv_h * conv_w + (2 * pi + di) * conv_w + (2 * pj + dj)] = g;
                        }
                    }
                }
            }
        }
    } else {
        dz.copy_from_slice(d_out);
    }
    for (d, &a) in dz.iter_mut().zip(cache.activated.iter()) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }

    let n_w = out_c * in_c * kernel * kernel;
    let (dw, db) = grad.split_at_mut(n_w);
    let mut d_in = vec![0.0; in_c * in_h * in_w];
    for oc in 0..out_c {
        for i in 0..conv_h {
            for j in 0..conv_w {
                let g = dz[oc * conv_h * conv_w + i * conv_w + j];
                if g == 0.0 {
                    continue;
                }
                db[oc] += g;
                for ic in 0..in_c {
                    for u in 0..kernel {
                        let w_base = ((oc * in_c + ic) * kernel + u) * kernel;
                        let in_base = ic * in_h * in_w + (i + u) * in_w + j;
                        for v in 0..kernel {
                            dw[w_base + v] += g * cache.input[in_base + v];
                            d_in[in_base + v] += g * params[w_base + v];
                        }
                    }
                }
            }
        }
    }
    d_in
}

fn dense_backward(
    stage: &Stage,
    params: &[f64],
    cache: &Cache,
    d_out: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let Stage::Dense {
        in_dim,
        out_dim,
        relu,
    } = *stage
    else {
        unreachable!()
    };
    let mut dz = d_out.to_vec();
    if relu {
        for (d, &a) in dz.iter_mut().zip(cache.activated.iter()) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
    }
    let (dw, db) = grad.split_at_mut(out_dim * in_dim);
    let mut d_in = vec![0.0; in_dim];
    for o in 0..out_dim {
        let g = dz[o];
        db[o] += g;
        if g != 0.0 {
            let w_row = &params[o * in_dim..(o + 1) * in_dim];
            let dw_row = &mut dw[o * in_dim..(o + 1) * in_dim];
            for j in 0..in_dim {
                dw_row[j] += g * cache.input[j];
                d_in[j] += g * w_row[j];
            }
        }
    }
    d_in
}

pub(super) fn backward(
    model: &LayeredModel,
    batch: &Batch,
    input: (usize, usize, usize),
    layers: &[CnnLayer],
) -> BackwardOut {
    let stages = shape_chain(input, layers);
    let n = batch.n();
    let scale = 1.0 / n as f64;
    let mut grads = model.zero_delta();
    let mut loss = 0.0;

    for i in 0..n {
        let caches = forward_example(model, &stages, batch.row(i));
        let z = &caches.last().unwrap().activated;
        loss += log_sum_exp(z) - z[batch.y[i] as usize];

        let mut d = vec![0.0; z.len()];
        softmax_grad(z, batch.y[i] as usize, scale, &mut d);
        for k in (0..stages.len()).rev() {
            d = match &stages[k] {
                Stage::Conv { .. } => {
                    conv_backward(&stages[k], &model.params[k], &caches[k], &d, &mut grads[k])
                }
                Stage::Dense { .. } => {
                    dense_backward(&stages[k], &model.params[k], &caches[k], &d, &mut grads[k])
                }
            };
        }
    }

    BackwardOut {
        loss: loss * scale,
        grads,
    }
}
