//! Minimal dense-tensor NN engine: small MLPs and CNNs with softmax
//! cross-entropy, manual backprop, and no external ML framework.
//!
//! Models are stored as one flat `f64` block per layer (weights then bias),
//! which is also the unit the channel serializes: "layer" here always means
//! one transmission block.

mod cnn;
mod hvp;
mod mlp;
mod train;

pub use hvp::{hvp, hvp_from_grad_fn};
pub use train::{local_train, GradientStats, TrainingHyperparams};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// One stage of a convolutional architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CnnLayer {
    /// Valid convolution, stride 1, ReLU, then an optional 2x2 mean pool.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        pool: bool,
    },
    /// Fully connected stage; ReLU unless it is the output layer.
    Dense { in_dim: usize, out_dim: usize },
}

/// Network shape. Every variant yields an ordered list of parameter layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// Fully connected ReLU net; `dims` lists layer widths input-first.
    Mlp { dims: Vec<usize> },
    /// Plain CNN over `input = (channels, height, width)`.
    Cnn {
        input: (usize, usize, usize),
        layers: Vec<CnnLayer>,
    },
}

impl Architecture {
    pub fn mlp(dims: &[usize]) -> Architecture {
        Architecture::Mlp {
            dims: dims.to_vec(),
        }
    }

    /// The 784-300-100-10 MLP used for the main image task.
    pub fn lenet_300_100() -> Architecture {
        Architecture::mlp(&[784, 300, 100, 10])
    }

    /// The 784-64-10 MLP used for fast end-to-end tests.
    pub fn reduced_mlp() -> Architecture {
        Architecture::mlp(&[784, 64, 10])
    }

    /// Small 4-layer CNN (cv1, cv2, fc1, fc2) for 28x28 single-channel input.
    pub fn small_cnn() -> Architecture {
        Architecture::Cnn {
            input: (1, 28, 28),
            layers: vec![
                CnnLayer::Conv {
                    in_ch: 1,
                    out_ch: 6,
                    kernel: 5,
                    pool: true,
                },
                CnnLayer::Conv {
                    in_ch: 6,
                    out_ch: 12,
                    kernel: 5,
                    pool: true,
                },
                CnnLayer::Dense {
                    in_dim: 192,
                    out_dim: 32,
                },
                CnnLayer::Dense {
                    in_dim: 32,
                    out_dim: 10,
                },
            ],
        }
    }

    /// Deep 8-layer plain CNN (6 conv + 2 dense) for grouping experiments.
    pub fn deep_cnn() -> Architecture {
        let conv = |in_ch, out_ch, kernel, pool| CnnLayer::Conv {
            in_ch,
            out_ch,
            kernel,
            pool,
        };
        Architecture::Cnn {
            input: (1, 28, 28),
            layers: vec![
                conv(1, 4, 3, false),
                conv(4, 6, 3, true),
                conv(6, 8, 3, false),
                conv(8, 8, 3, true),
                conv(8, 8, 3, false),
                conv(8, 8, 1, false),
                CnnLayer::Dense {
                    in_dim: 32,
                    out_dim: 16,
                },
                CnnLayer::Dense {
                    in_dim: 16,
                    out_dim: 10,
                },
            ],
        }
    }

    /// Check internal shape consistency (conv chains, pool parity, dense
    /// widths after flattening).
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp { dims } => {
                if dims.len() < 2 {
                    return Err(Error::schema("an MLP needs at least input and output dims"));
                }
                if dims.iter().any(|&d| d == 0) {
                    return Err(Error::schema("MLP layer widths must be nonzero"));
                }
                Ok(())
            }
            Architecture::Cnn { input, layers } => {
                if layers.is_empty() {
                    return Err(Error::schema("CNN needs at least one layer"));
                }
                let (mut c, mut h, mut w) = *input;
                if c == 0 || h == 0 || w == 0 {
                    return Err(Error::schema("CNN input dims must be nonzero"));
                }
                let mut flattened = false;
                for (i, layer) in layers.iter().enumerate() {
                    match *layer {
                        CnnLayer::Conv {
                            in_ch,
                            out_ch,
                            kernel,
                            pool,
                        } => {
                            if flattened {
                                return Err(Error::schema(format!(
                                    "layer {i}: conv after dense is not supported"
                                )));
                            }
                            if in_ch != c {
                                return Err(Error::schema(format!(
                                    "layer {i}: expects {in_ch} channels, gets {c}"
                                )));
                            }
                            if kernel == 0 || kernel > h || kernel > w {
                                return Err(Error::schema(format!(
                                    "layer {i}: kernel {kernel} exceeds {h}x{w} input"
                                )));
                            }
                            c = out_ch;
                            h = h - kernel + 1;
                            w = w - kernel + 1;
                            if pool {
                                if h % 2 != 0 || w % 2 != 0 {
                                    return Err(Error::schema(format!(
                                        "layer {i}: 2x2 pool needs even dims, got {h}x{w}"
                                    )));
                                }
                                h /= 2;
                                w /= 2;
                            }
                        }
                        CnnLayer::Dense { in_dim, out_dim } => {
                            let avail = if flattened { c } else { c * h * w };
                            if in_dim != avail {
                                return Err(Error::schema(format!(
                                    "layer {i}: dense expects {in_dim} inputs, gets {avail}"
                                )));
                            }
                            if out_dim == 0 {
                                return Err(Error::schema(format!("layer {i}: zero-width dense")));
                            }
                            flattened = true;
                            c = out_dim;
                        }
                    }
                }
                if !flattened {
                    return Err(Error::schema("CNN must end in a dense output layer"));
                }
                Ok(())
            }
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            Architecture::Mlp { dims } => dims.len() - 1,
            Architecture::Cnn { layers, .. } => layers.len(),
        }
    }

    /// Flattened input width the first layer expects.
    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Mlp { dims } => dims[0],
            Architecture::Cnn { input, .. } => input.0 * input.1 * input.2,
        }
    }

    /// Width of the final (logit) layer.
    pub fn n_classes(&self) -> usize {
        match self {
            Architecture::Mlp { dims } => *dims.last().unwrap(),
            Architecture::Cnn { layers, .. } => match layers.last().unwrap() {
                CnnLayer::Dense { out_dim, .. } => *out_dim,
                CnnLayer::Conv { .. } => unreachable!("validated CNN ends dense"),
            },
        }
    }

    /// Parameter count (weights + bias) per layer, in layer order.
    pub fn layer_sizes(&self) -> Vec<usize> {
        match self {
            Architecture::Mlp { dims } => dims
                .windows(2)
                .map(|pair| pair[0] * pair[1] + pair[1])
                .collect(),
            Architecture::Cnn { layers, .. } => layers
                .iter()
                .map(|layer| match *layer {
                    CnnLayer::Conv {
                        in_ch,
                        out_ch,
                        kernel,
                        ..
                    } => out_ch * in_ch * kernel * kernel + out_ch,
                    CnnLayer::Dense { in_dim, out_dim } => in_dim * out_dim + out_dim,
                })
                .collect(),
        }
    }

    pub fn total_params(&self) -> usize {
        self.layer_sizes().iter().sum()
    }

    /// Human-readable layer names: `fc1..` for MLPs, `cv*/fc*` for CNNs.
    pub fn layer_names(&self) -> Vec<String> {
        match self {
            Architecture::Mlp { dims } => (1..dims.len()).map(|i| format!("fc{i}")).collect(),
            Architecture::Cnn { layers, .. } => {
                let mut names = Vec::with_capacity(layers.len());
                let (mut cv, mut fc) = (0, 0);
                for layer in layers {
                    match layer {
                        CnnLayer::Conv { .. } => {
                            cv += 1;
                            names.push(format!("cv{cv}"));
                        }
                        CnnLayer::Dense { .. } => {
                            fc += 1;
                            names.push(format!("fc{fc}"));
                        }
                    }
                }
                names
            }
        }
    }

    /// Glorot-uniform weights, zero bias, drawn from the given stream.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> LayeredModel {
        let mut params = Vec::with_capacity(self.n_layers());
        match self {
            Architecture::Mlp { dims } => {
                for pair in dims.windows(2) {
                    let (fan_in, fan_out) = (pair[0], pair[1]);
                    params.push(glorot_block(fan_in * fan_out, fan_out, fan_in, fan_out, rng));
                }
            }
            Architecture::Cnn { layers, .. } => {
                for layer in layers {
                    match *layer {
                        CnnLayer::Conv {
                            in_ch,
                            out_ch,
                            kernel,
                            ..
                        } => {
                            let n_w = out_ch * in_ch * kernel * kernel;
                            let fan = kernel * kernel;
                            params.push(glorot_block(n_w, out_ch, in_ch * fan, out_ch * fan, rng));
                        }
                        CnnLayer::Dense { in_dim, out_dim } => {
                            params.push(glorot_block(in_dim * out_dim, out_dim, in_dim, out_dim, rng));
                        }
                    }
                }
            }
        }
        LayeredModel {
            arch: self.clone(),
            params,
        }
    }

    /// All-zero parameters (useful for analytic loss checks).
    pub fn zeros(&self) -> LayeredModel {
        let params = self.layer_sizes().iter().map(|&d| vec![0.0; d]).collect();
        LayeredModel {
            arch: self.clone(),
            params,
        }
    }
}

fn glorot_block(
    n_weights: usize,
    n_bias: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut block = Vec::with_capacity(n_weights + n_bias);
    for _ in 0..n_weights {
        block.push(rng.random_range(-limit..limit));
    }
    block.resize(n_weights + n_bias, 0.0);
    block
}

/// A model instance: architecture plus one flat parameter block per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    pub arch: Architecture,
    pub params: Vec<Vec<f64>>,
}

impl LayeredModel {
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.arch.layer_sizes()
    }

    pub fn total_params(&self) -> usize {
        self.arch.total_params()
    }

    /// New model with `delta` added layerwise.
    pub fn plus(&self, delta: &[Vec<f64>]) -> LayeredModel {
        assert_eq!(delta.len(), self.params.len(), "layer count mismatch");
        let params = self
            .params
            .iter()
            .zip(delta)
            .map(|(p, d)| {
                assert_eq!(p.len(), d.len(), "layer size mismatch");
                p.iter().zip(d).map(|(a, b)| a + b).collect()
            })
            .collect();
        LayeredModel {
            arch: self.arch.clone(),
            params,
        }
    }

    /// Largest absolute parameter value across all layers.
    pub fn inf_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Zero per-layer blocks shaped like this model.
    pub fn zero_delta(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }
}

/// A dense training batch: row-major features plus labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Vec<f64>,
    pub y: Vec<u8>,
    pub input_dim: usize,
}

impl Batch {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn from_indices(data: &Dataset, indices: &[usize]) -> Batch {
        let mut x = Vec::with_capacity(indices.len() * data.input_dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(data.row(i));
            y.push(data.labels[i]);
        }
        Batch {
            x,
            y,
            input_dim: data.input_dim,
        }
    }

    pub fn full(data: &Dataset) -> Batch {
        Batch {
            x: data.features.clone(),
            y: data.labels.clone(),
            input_dim: data.input_dim,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Forward-pass result: mean cross-entropy and per-example logits.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub loss: f64,
    /// Row-major `n x n_classes`.
    pub logits: Vec<f64>,
}

/// Backward-pass result: loss plus per-layer gradient blocks.
#[derive(Debug, Clone)]
pub struct BackwardOut {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

fn check_batch(model: &LayeredModel, batch: &Batch) -> Result<()> {
    assert!(batch.n() > 0, "batch must be nonempty");
    if batch.input_dim != model.arch.input_dim() {
        return Err(Error::schema(format!(
            "batch rows have {} features, model expects {}",
            batch.input_dim,
            model.arch.input_dim()
        )));
    }
    if let Some(&bad) = batch.y.iter().find(|&&y| (y as usize) >= model.arch.n_classes()) {
        return Err(Error::schema(format!(
            "label {bad} outside 0..{}",
            model.arch.n_classes()
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy and logits over a batch.
pub fn forward(model: &LayeredModel, batch: &Batch) -> Result<ForwardOut> {
    check_batch(model, batch)?;
    let out = match &model.arch {
        Architecture::Mlp { dims } => mlp::forward(model, batch, dims),
        Architecture::Cnn { input, layers } => cnn::forward(model, batch, *input, layers),
    };
    if !out.loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss {} on a {}-example batch",
            out.loss,
            batch.n()
        )));
    }
    Ok(out)
}

/// Gradient of the mean batch loss for every layer block.
pub fn backward(model: &LayeredModel, batch: &Batch) -> Result<BackwardOut> {
    check_batch(model, batch)?;
    let out = match &model.arch {
        Architecture::Mlp { dims } => mlp::backward(model, batch, dims),
        Architecture::Cnn { input, layers } => cnn::backward(model, batch, *input, layers),
    };
    if !out.loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss {} during backward on a {}-example batch",
            out.loss,
            batch.n()
        )));
    }
    Ok(out)
}

/// Loss and argmax accuracy over a full dataset.
///
/// Work is chunked and reduced in chunk order, so the result is bitwise
/// deterministic regardless of thread count.
pub fn evaluate(model: &LayeredModel, data: &Dataset) -> Result<(f64, f64)> {
    assert!(!data.is_empty(), "cannot evaluate on an empty set");
    const CHUNK: usize = 256;
    let indices: Vec<usize> = (0..data.len()).collect();
    let chunk_stats: Vec<Result<(f64, usize)>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let batch = Batch::from_indices(data, chunk);
            let out = forward(model, &batch)?;
            let classes = model.arch.n_classes();
            let mut correct = 0usize;
            for (i, &label) in batch.y.iter().enumerate() {
                let row = &out.logits[i * classes..(i + 1) * classes];
                let mut best = 0usize;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                if best == label as usize {
                    correct += 1;
                }
            }
            Ok((out.loss * batch.n() as f64, correct))
        })
        .collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for stat in chunk_stats {
        let (l, c) = stat?;
        loss_sum += l;
        correct += c;
    }
    Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Numerically stable log-sum-exp of a logit row.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax probabilities minus the one-hot label, scaled by `scale` —
/// the cross-entropy logit gradient contribution of one example.
pub(crate) fn softmax_grad(row: &[f64], label: usize, scale: f64, out: &mut [f64]) {
    let lse = log_sum_exp(row);
    for (c, &z) in row.iter().enumerate() {
        let p = (z - lse).exp();
        out[c] = scale * (p - if c == label { 1.0 } else { 0.0 });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::rng::{derive_rng, tag};

    #[test]
    fn lenet_mlp_parameter_count() {
        let arch = Architecture::lenet_300_100();
        assert_eq!(arch.layer_sizes(), vec![235_500, 30_100, 1_010]);
        assert_eq!(arch.total_params(), 266_610);
        assert_eq!(arch.layer_names(), vec!["fc1", "fc2", "fc3"]);
    }

    #[test]
    fn small_cnn_shapes_check_out() {
        let arch = Architecture::small_cnn();
        arch.validate().unwrap();
        assert_eq!(arch.layer_sizes(), vec![156, 1_812, 6_176, 330]);
        assert_eq!(arch.layer_names(), vec!["cv1", "cv2", "fc1", "fc2"]);
        assert_eq!(arch.n_classes(), 10);
    }

    #[test]
    fn deep_cnn_validates_with_eight_layers() {
        let arch = Architecture::deep_cnn();
        arch.validate().unwrap();
        assert_eq!(arch.n_layers(), 8);
        assert_eq!(
            arch.layer_names(),
            vec!["cv1", "cv2", "cv3", "cv4", "cv5", "cv6", "fc1", "fc2"]
        );
    }

    #[test]
    fn bad_architectures_rejected() {
        assert!(Architecture::mlp(&[784]).validate().is_err());
        let bad = Architecture::Cnn {
            input: (1, 28, 28),
            layers: vec![CnnLayer::Dense {
                in_dim: 100, // flatten gives 784
                out_dim: 10,
            }],
        };
        assert!(bad.validate().is_err());
        let no_dense = Architecture::Cnn {
            input: (1, 8, 8),
            layers: vec![CnnLayer::Conv {
                in_ch: 1,
                out_ch: 2,
                kernel: 3,
                pool: false,
            }],
        };
        assert!(no_dense.validate().is_err());
    }

    #[test]
    fn zero_model_loss_is_ln_classes() {
        let arch = Architecture::mlp(&[8, 10]);
        let model = arch.zeros();
        let data = gen_synthetic(10, 8, 40, 3, 2.0);
        let batch = Batch::full(&data);
        let out = forward(&model, &batch).unwrap();
        assert!((out.loss - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_give_uniform_probabilities() {
        let arch = Architecture::mlp(&[4, 5]);
        let model = arch.zeros();
        let batch = Batch {
            x: vec![0.3, -1.0, 0.7, 2.0],
            y: vec![2],
            input_dim: 4,
        };
        let out = forward(&model, &batch).unwrap();
        let lse = log_sum_exp(&out.logits);
        for &z in &out.logits {
            assert!(((z - lse).exp() - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_zeroes_first_layer_weight_grads() {
        let arch = Architecture::mlp(&[6, 4, 3]);
        let mut rng = derive_rng(5, &[tag::INIT]);
        let model = arch.init(&mut rng);
        let batch = Batch {
            x: vec![0.0; 12],
            y: vec![0, 2],
            input_dim: 6,
        };
        let out = backward(&model, &batch).unwrap();
        let weight_grads = &out.grads[0][..6 * 4];
        assert!(weight_grads.iter().all(|&g| g == 0.0));
        // The output layer's bias still sees the softmax gradient.
        let last = out.grads.last().unwrap();
        assert!(last[4 * 3..].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn duplicated_batch_leaves_mean_gradient_unchanged() {
        let arch = Architecture::mlp(&[5, 6, 3]);
        let mut rng = derive_rng(8, &[tag::INIT]);
        let model = arch.init(&mut rng);
        let data = gen_synthetic(3, 5, 8, 2, 2.0);
        let single = Batch::full(&data);
        let doubled = Batch {
            x: [single.x.clone(), single.x.clone()].concat(),
            y: [single.y.clone(), single.y.clone()].concat(),
            input_dim: 5,
        };
        let g1 = backward(&model, &single).unwrap();
        let g2 = backward(&model, &doubled).unwrap();
        for (a, b) in g1.grads.iter().zip(&g2.grads) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_input_dim_is_schema_error() {
        let arch = Architecture::mlp(&[6, 3]);
        let model = arch.zeros();
        let batch = Batch {
            x: vec![0.0; 5],
            y: vec![0],
            input_dim: 5,
        };
        let err = forward(&model, &batch).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn evaluate_chance_level_on_zero_model() {
        let data = gen_synthetic(10, 12, 2_000, 4, 2.0);
        let model = Architecture::mlp(&[12, 10]).zeros();
        let (loss, acc) = evaluate(&model, &data).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
        // Zero logits tie every class; argmax picks class 0, which holds
        // roughly a tenth of a balanced set.
        let sigma = (0.1 * 0.9 / 2_000.0f64).sqrt();
        assert!((acc - 0.1).abs() < 4.0 * sigma, "acc {acc}");
    }

    #[test]
    fn evaluate_order_invariant() {
        let data = gen_synthetic(4, 6, 300, 9, 2.0);
        let mut rng = derive_rng(2, &[tag::INIT]);
        let model = Architecture::mlp(&[6, 8, 4]).init(&mut rng);
        let (l1, a1) = evaluate(&model, &data).unwrap();
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.reverse();
        let (l2, a2) = evaluate(&model, &data.subset(&perm)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert_eq!(a1, a2);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = Architecture::mlp(&[20, 10, 5]);
        let a = arch.init(&mut derive_rng(7, &[tag::INIT]));
        let b = arch.init(&mut derive_rng(7, &[tag::INIT]));
        assert_eq!(a.params, b.params);
        let limit0 = (6.0 / 30.0f64).sqrt();
        assert!(a.params[0][..200].iter().all(|&w| w.abs() < limit0));
        assert!(a.params[0][200..].iter().all(|&b| b == 0.0));
    }
}
