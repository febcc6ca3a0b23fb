//! Shared test oracles: independent reference implementations the
//! integration suites compare the crate against.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fedwave::data::Dataset;
use fedwave::nn::{backward, hvp, Batch, LayeredModel};
use fedwave::planner::{round_objective, ModulationPlan, PlannerInputs, ScoredPlan};

/// Gaussian tail probability by composite Simpson quadrature — an
/// algorithm-independent check on the crate's series/continued-fraction Q.
pub fn q_oracle(x: f64) -> f64 {
    if x < 0.0 {
        return 1.0 - q_oracle(-x);
    }
    // Past the upper limit the remaining mass is below 1e-15 of the result.
    let upper = if x < 1.0 { 9.0 } else { x + 36.0 / x };
    simpson_normal_pdf(x, upper, 60_000)
}

fn simpson_normal_pdf(a: f64, b: f64, n: usize) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    let phi = |t: f64| (-0.5 * t * t).exp();
    let mut acc = phi(a) + phi(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * phi(a + i as f64 * h);
    }
    acc * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
}

/// M-PSK bit error rate evaluated with the quadrature Q.
pub fn ber_oracle(m: u32, es_n0: f64) -> f64 {
    let denom = (m as f64).log2().max(2.0);
    let terms = (m / 4).max(1);
    let mut sum = 0.0;
    for i in 1..=terms {
        let angle = (2 * i - 1) as f64 * std::f64::consts::PI / m as f64;
        sum += q_oracle((2.0 * es_n0).sqrt() * angle.sin());
    }
    (2.0 * sum / denom).clamp(0.0, 0.5)
}

/// Relative difference with a floor so that two underflowed values compare
/// equal instead of dividing by zero.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Exhaustive plan search with an independently written tie-break, visiting
/// candidates in a different order than the crate's enumerator.
pub fn brute_force_plan(inputs: &PlannerInputs) -> ScoredPlan {
    let l = inputs.layer_sizes.len();
    let cands = &inputs.channel.candidate_levels;
    let mut idx = vec![0usize; l];
    let mut best: Option<ScoredPlan> = None;
    loop {
        let plan = ModulationPlan {
            levels: idx.iter().map(|&c| cands[c]).collect(),
        };
        let scored = round_objective(&plan, inputs).unwrap();
        best = Some(match best {
            None => scored,
            Some(current) => pick_better(current, scored),
        });
        let mut k = 0;
        loop {
            if k == l {
                return best.unwrap();
            }
            idx[k] += 1;
            if idx[k] < cands.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn pick_better(a: ScoredPlan, b: ScoredPlan) -> ScoredPlan {
    if b.score > a.score {
        return b;
    }
    if b.score < a.score {
        return a;
    }
    if b.denominator < a.denominator {
        return b;
    }
    if b.denominator > a.denominator {
        return a;
    }
    if b.plan.levels < a.plan.levels {
        b
    } else {
        a
    }
}

/// Assemble one layer's Hessian block column by column (HVP on basis
/// vectors), symmetrize, and return the eigenvalue of largest magnitude
/// from a dense solver.
pub fn dense_top_eigenvalue(model: &LayeredModel, batch: &Batch, layer: usize) -> f64 {
    let dim = model.layer_sizes()[layer];
    let mut h = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let col = hvp(model, batch, &e, &[layer]).unwrap();
        for i in 0..dim {
            h[(i, j)] = col[i];
        }
    }
    let sym = (&h + h.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    eig.eigenvalues
        .iter()
        .fold(0.0f64, |acc, &l| if l.abs() > acc.abs() { l } else { acc })
}

/// Largest-magnitude eigenvalue of an explicit symmetric matrix.
pub fn dense_top_of_matrix(m: &nalgebra::DMatrix<f64>) -> f64 {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    eig.eigenvalues
        .iter()
        .fold(0.0f64, |acc, &l| if l.abs() > acc.abs() { l } else { acc })
}

/// One round of textbook federated averaging: full-batch local GD at each
/// client, then the server averages the resulting weights directly.
pub fn reference_fedavg_round(
    model: &LayeredModel,
    shards: &[Dataset],
    eta: f64,
    tau: u32,
) -> LayeredModel {
    let n = shards.len() as f64;
    let mut mean_params: Vec<Vec<f64>> = model.params.iter().map(|l| vec![0.0; l.len()]).collect();
    for shard in shards {
        let mut local = model.clone();
        for _ in 0..tau {
            let batch = Batch::full(shard);
            let out = backward(&local, &batch).unwrap();
            for (p_layer, g_layer) in local.params.iter_mut().zip(&out.grads) {
                for (p, &g) in p_layer.iter_mut().zip(g_layer) {
                    *p -= eta * g;
                }
            }
        }
        for (m_layer, p_layer) in mean_params.iter_mut().zip(&local.params) {
            for (m, &p) in m_layer.iter_mut().zip(p_layer) {
                *m += p / n;
            }
        }
    }
    LayeredModel {
        arch: model.arch.clone(),
        params: mean_params,
    }
}

/// Central-difference derivative of the batch loss wrt one parameter.
pub fn numeric_loss_grad(
    model: &LayeredModel,
    batch: &Batch,
    layer: usize,
    index: usize,
    eps: f64,
) -> f64 {
    let mut plus = model.clone();
    plus.params[layer][index] += eps;
    let mut minus = model.clone();
    minus.params[layer][index] -= eps;
    let lp = fedwave::nn::forward(&plus, batch).unwrap().loss;
    let lm = fedwave::nn::forward(&minus, batch).unwrap().loss;
    (lp - lm) / (2.0 * eps)
}

/// Scalar re-implementation of an MLP's mean cross-entropy over a batch,
/// written with per-example loops and naive log-sum-exp.
pub fn scalar_mlp_loss(dims: &[usize], params: &[Vec<f64>], batch: &Batch) -> f64 {
    let mut total = 0.0;
    for e in 0..batch.n() {
        let mut act: Vec<f64> = batch.row(e).to_vec();
        for (k, win) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (win[0], win[1]);
            let block = &params[k];
            let mut next = vec![0.0; fan_out];
            for (o, slot) in next.iter_mut().enumerate() {
                let mut z = block[fan_in * fan_out + o]; // bias after weights
                for (i, &a) in act.iter().enumerate() {
                    z += block[o * fan_in + i] * a;
                }
                *slot = z;
            }
            if k + 1 < dims.len() - 1 {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            }
            act = next;
        }
        let peak = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = peak + act.iter().map(|&z| (z - peak).exp()).sum::<f64>().ln();
        total += lse - act[batch.y[e] as usize];
    }
    total / batch.n() as f64
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Write a pair of IDX files (images + labels) for loader tests.
pub fn write_idx_pair(
    dir: &Path,
    n: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> (PathBuf, PathBuf) {
    use std::io::Write as _;
    let img_path = dir.join("images.idx");
    let lbl_path = dir.join("labels.idx");
    let mut img = Vec::new();
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(pixels);
    let mut lbl = Vec::new();
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    std::fs::File::create(&img_path)
        .unwrap()
        .write_all(&img)
        .unwrap();
    std::fs::File::create(&lbl_path)
        .unwrap()
        .write_all(&lbl)
        .unwrap();
    (img_path, lbl_path)
}
