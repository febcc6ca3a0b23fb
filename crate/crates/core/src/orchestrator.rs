//! Federated training loop: data partitioning, per-round client work, uplink
//! simulation, aggregation, and experiment bookkeeping.
//!
//! Every random draw comes from a stream derived from `(seed, purpose path)`,
//! so a run is fully reproducible from its config file and seed, and client
//! work may execute in parallel without changing any result.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Scheme};
use crate::data::{gen_synthetic, load_mnist_idx, Dataset};
use crate::error::{Error, Result};
use crate::hessian::{
    group_layers, importance_weights, layer_importance, LayerGrouping, LayerImportance,
    PowerIterParams,
};
use crate::latency::{compute_latency, downlink_latency, uplink_latency, ComputeConfig, LatencyBreakdown};
use crate::modem::{ber, expected_sq_error, quantize_update, transmit, QuantizedLayer};
use crate::nn::{evaluate, local_train, Architecture, Batch, LayeredModel, TrainingHyperparams};
use crate::output::{MetricsRow, PlanLayerEntry, PlanLogEntry};
use crate::planner::{
    plan_am, plan_enumerate, plan_fixed, plan_grouped, round_objective, PlannerInputs, ScoredPlan,
};
use crate::rng::{derive_rng, derive_seed, tag};

/// Cap on examples used for the per-round training-loss report.
const EVAL_TRAIN_CAP: usize = 2000;

/// Split a dataset into `n_clients` near-equal IID shards via a seeded
/// permutation; when sizes cannot be equal, earlier shards get one extra.
pub fn split_iid(data: &Dataset, n_clients: usize, seed: u64) -> Result<Vec<Dataset>> {
    if n_clients == 0 {
        return Err(Error::config("n_clients must be >= 1"));
    }
    if data.len() < n_clients {
        return Err(Error::config(format!(
            "cannot split {} samples across {n_clients} clients",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut derive_rng(seed, &[tag::SPLIT]));
    let base = data.len() / n_clients;
    let extra = data.len() % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut cursor = 0;
    for i in 0..n_clients {
        let size = base + usize::from(i < extra);
        shards.push(data.subset(&order[cursor..cursor + size]));
        cursor += size;
    }
    Ok(shards)
}

/// An unbiased seeded sample of `n` rows (shuffled prefix).
fn seeded_prefix(data: &Dataset, n: usize, seed: u64, salt: u64) -> Dataset {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut derive_rng(seed, &[tag::SPLIT, salt]));
    order.truncate(n);
    data.subset(&order)
}

fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let ds = &config.dataset;
    let n_train = config.n_clients * ds.train_per_client;
    match ds.kind.as_str() {
        "synthetic" => {
            // One pooled draw so train and test share the same class
            // centers; the pool is shuffled, so slicing keeps both splits
            // class-balanced and disjoint.
            let pool = gen_synthetic(
                ds.classes,
                ds.dims,
                n_train + ds.test_samples,
                derive_seed(config.seed, &[tag::SYNTH_DATA]),
                ds.margin,
            );
            let train_rows: Vec<usize> = (0..n_train).collect();
            let test_rows: Vec<usize> = (n_train..pool.len()).collect();
            Ok((pool.subset(&train_rows), pool.subset(&test_rows)))
        }
        "mnist-idx" => {
            let req = |p: &Option<std::path::PathBuf>, name: &str| {
                p.clone()
                    .ok_or_else(|| Error::config(format!("mnist-idx requires the {name} path")))
            };
            let train = load_mnist_idx(
                &req(&ds.train_images, "train_images")?,
                &req(&ds.train_labels, "train_labels")?,
            )?;
            let test = load_mnist_idx(
                &req(&ds.test_images, "test_images")?,
                &req(&ds.test_labels, "test_labels")?,
            )?;
            if train.len() < n_train {
                return Err(Error::config(format!(
                    "training set has {} samples but {} clients x {} need {n_train}",
                    train.len(),
                    config.n_clients,
                    ds.train_per_client
                )));
            }
            if test.len() < ds.test_samples {
                return Err(Error::config(format!(
                    "test set has {} samples, test_samples asks for {}",
                    test.len(),
                    ds.test_samples
                )));
            }
            Ok((
                seeded_prefix(&train, n_train, config.seed, 1),
                seeded_prefix(&test, ds.test_samples, config.seed, 2),
            ))
        }
        other => Err(Error::config(format!("unknown dataset kind '{other}'"))),
    }
}

/// A fully prepared experiment: config resolved, data loaded and sharded.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub arch: Architecture,
    pub shards: Vec<Dataset>,
    pub test: Dataset,
    /// Fixed training subset used for the reported training loss.
    pub eval_train: Dataset,
    pub hp: TrainingHyperparams,
    /// Compute model, resolved against the largest shard.
    pub compute: ComputeConfig,
}

/// Mutable state carried across rounds.
#[derive(Debug, Clone)]
pub struct ExperimentState {
    pub model: LayeredModel,
    /// Importance in effect for planning; refreshed on the configured period.
    pub importance: LayerImportance,
    /// Rounds completed so far.
    pub round: u32,
    pub cumulative_latency_s: f64,
}

/// Everything recorded about one completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub latency: LatencyBreakdown,
    pub cumulative_latency_s: f64,
    /// Present only on evaluated rounds.
    pub train_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Per-layer squared uplink error actually realized, summed over clients.
    pub realized_sq_error: Vec<f64>,
    /// Planner-expected counterpart of `realized_sq_error`.
    pub predicted_sq_error: Vec<f64>,
    /// One plan per client, in client order.
    pub plans: Vec<PlanLogEntry>,
}

/// First round whose evaluation met the target accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetHit {
    pub round: u32,
    pub cumulative_latency_s: f64,
}

/// Outcome of a full experiment.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub initial_train_loss: f64,
    pub initial_test_accuracy: f64,
    pub records: Vec<RoundRecord>,
    pub final_model: LayeredModel,
    pub final_importance: LayerImportance,
    pub reached_target: Option<TargetHit>,
}

impl ExperimentResult {
    /// CSV rows: the round-0 evaluation plus every evaluated round.
    pub fn metrics_rows(&self, scheme: &str, seed: u64) -> Vec<MetricsRow> {
        let mut rows = vec![MetricsRow {
            round: 0,
            cumulative_latency_s: 0.0,
            t_d_s: 0.0,
            t_c_s: 0.0,
            t_u_s: 0.0,
            train_loss: self.initial_train_loss,
            test_accuracy: self.initial_test_accuracy,
            scheme: scheme.into(),
            seed,
        }];
        for r in &self.records {
            if let (Some(train_loss), Some(test_accuracy)) = (r.train_loss, r.test_accuracy) {
                rows.push(MetricsRow {
                    round: r.round,
                    cumulative_latency_s: r.cumulative_latency_s,
                    t_d_s: r.latency.t_d,
                    t_c_s: r.latency.t_c,
                    t_u_s: r.latency.t_u,
                    train_loss,
                    test_accuracy,
                    scheme: scheme.into(),
                    seed,
                });
            }
        }
        rows
    }

    /// All clients' plans across all rounds, in (round, client) order.
    pub fn plan_log(&self) -> Vec<PlanLogEntry> {
        self.records.iter().flat_map(|r| r.plans.clone()).collect()
    }

    /// Test accuracy at the last evaluation (round 0 if nothing else ran).
    pub fn final_accuracy(&self) -> f64 {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.test_accuracy)
            .unwrap_or(self.initial_test_accuracy)
    }
}

/// What one client contributes to a round.
struct ClientOutcome {
    delta_tilde: Vec<Vec<f64>>,
    uplink_s: f64,
    realized: Vec<f64>,
    predicted: Vec<f64>,
    log: PlanLogEntry,
}

impl Experiment {
    /// Validate the config, load data, and shard it.
    pub fn build(config: ExperimentConfig) -> Result<Experiment> {
        config.validate()?;
        let arch = config.architecture()?;
        let (train, test) = load_datasets(&config)?;
        let shards = split_iid(&train, config.n_clients, config.seed)?;
        let hp = config.training_hyperparams();
        for (i, shard) in shards.iter().enumerate() {
            if shard.len() < hp.batch_size {
                return Err(Error::config(format!(
                    "client {i} holds {} samples, fewer than batch_size {}",
                    shard.len(),
                    hp.batch_size
                )));
            }
        }
        let eval_indices: Vec<usize> = (0..train.len().min(EVAL_TRAIN_CAP)).collect();
        let eval_train = train.subset(&eval_indices);
        let compute = config.compute.resolve(shards[0].len());
        Ok(Experiment {
            arch,
            shards,
            test,
            eval_train,
            hp,
            compute,
            config,
        })
    }

    /// Fresh state: seeded model init and a uniform importance placeholder
    /// (the first round always recomputes importance before planning).
    pub fn initial_state(&self) -> ExperimentState {
        let mut rng = derive_rng(self.config.seed, &[tag::INIT]);
        let model = self.arch.init(&mut rng);
        let importance = importance_weights(&vec![0.0; self.arch.n_layers()], 0);
        ExperimentState {
            model,
            importance,
            round: 0,
            cumulative_latency_s: 0.0,
        }
    }

    /// Measure per-layer curvature of the current model on a seeded batch
    /// from the reference client's shard.
    pub fn importance_now(&self, model: &LayeredModel, round: u32) -> Result<LayerImportance> {
        let shard = &self.shards[0];
        let amount = self.config.hessian_batch_size.min(shard.len());
        let mut rng = derive_rng(self.config.seed, &[tag::HESSIAN_BATCH, u64::from(round)]);
        let picks = rand::seq::index::sample(&mut rng, shard.len(), amount).into_vec();
        let batch = Batch::from_indices(shard, &picks);
        let (importance, _) =
            layer_importance(model, &batch, &PowerIterParams::default(), self.config.seed, round)?;
        Ok(importance)
    }

    fn choose_plan(
        &self,
        importance: &LayerImportance,
        grouping: Option<&LayerGrouping>,
        grad_sq_sum: f64,
        steps: &[f64],
        sizes: &[usize],
    ) -> Result<ScoredPlan> {
        let inputs = PlannerInputs {
            grad_sq_sum,
            importance,
            steps,
            layer_sizes: sizes,
            hp: &self.hp,
            channel: &self.config.channel,
            compute: &self.compute,
        };
        match self.config.scheme {
            Scheme::Layerwise => plan_enumerate(&inputs),
            Scheme::Grouped(_) => {
                plan_grouped(&inputs, grouping.expect("grouping precomputed for grouped scheme"))
            }
            Scheme::Am => plan_am(&inputs),
            Scheme::Fixed(m) => round_objective(&plan_fixed(m, sizes.len()), &inputs),
        }
    }

    fn log_entry(
        &self,
        round: u32,
        client: usize,
        importance: &LayerImportance,
        scored: &ScoredPlan,
        sizes: &[usize],
        steps: &[f64],
    ) -> Result<PlanLogEntry> {
        let names = self.arch.layer_names();
        let mut layers = Vec::with_capacity(sizes.len());
        for k in 0..sizes.len() {
            let m = scored.plan.levels[k];
            let b = ber(m, self.config.channel.es_n0)?;
            layers.push(PlanLayerEntry {
                layer: names[k].clone(),
                m,
                weight: importance.weights[k],
                d_k: sizes[k],
                predicted_error: expected_sq_error(sizes[k], steps[k], self.config.channel.n_bits, b),
                ber: b,
            });
        }
        Ok(PlanLogEntry {
            round,
            client,
            layers,
            numerator: scored.numerator,
            denominator: scored.denominator,
            score: scored.score,
        })
    }

    fn run_client(
        &self,
        state: &ExperimentState,
        round: u32,
        client: usize,
        grouping: Option<&LayerGrouping>,
    ) -> Result<ClientOutcome> {
        let cfg = &self.config;
        let sizes = self.arch.layer_sizes();
        let mut rng = derive_rng(cfg.seed, &[tag::TRAIN, u64::from(round), client as u64]);
        let (_, stats) = local_train(&state.model, &self.shards[client], &self.hp, &mut rng)?;

        if cfg.exact_uplink {
            // Lossless reference path: raw updates, no quantizer, no channel.
            let steps = vec![0.0; sizes.len()];
            let scored = self.choose_plan(&state.importance, grouping, stats.sq_norm_sum, &steps, &sizes)?;
            let uplink_s = uplink_latency(&sizes, &scored.plan, cfg.channel.n_bits, cfg.channel.b_u)?;
            let log = self.log_entry(round, client, &state.importance, &scored, &sizes, &steps)?;
            return Ok(ClientOutcome {
                delta_tilde: stats.per_layer_update,
                uplink_s,
                realized: vec![0.0; sizes.len()],
                predicted: vec![0.0; sizes.len()],
                log,
            });
        }

        let quantized: Vec<QuantizedLayer> = stats
            .per_layer_update
            .iter()
            .map(|delta| quantize_update(delta, cfg.channel.n_bits))
            .collect::<Result<_>>()?;
        let steps: Vec<f64> = quantized.iter().map(|q| q.step).collect();
        let scored = self.choose_plan(&state.importance, grouping, stats.sq_norm_sum, &steps, &sizes)?;

        let mut delta_tilde = Vec::with_capacity(sizes.len());
        let mut realized = vec![0.0; sizes.len()];
        let mut predicted = vec![0.0; sizes.len()];
        for (k, q) in quantized.iter().enumerate() {
            let m = scored.plan.levels[k];
            let b = ber(m, cfg.channel.es_n0)?;
            let mut link_rng =
                derive_rng(cfg.seed, &[tag::TRANSMIT, u64::from(round), client as u64, k as u64]);
            let noisy = transmit(q, b, &mut link_rng);
            let clean = q.dequantize();
            let received = noisy.dequantize();
            realized[k] = clean
                .iter()
                .zip(&received)
                .map(|(c, r)| (c - r) * (c - r))
                .sum();
            predicted[k] = expected_sq_error(q.count(), q.step, cfg.channel.n_bits, b);
            delta_tilde.push(received);
        }
        let uplink_s = uplink_latency(&sizes, &scored.plan, cfg.channel.n_bits, cfg.channel.b_u)?;
        let log = self.log_entry(round, client, &state.importance, &scored, &sizes, &steps)?;
        Ok(ClientOutcome {
            delta_tilde,
            uplink_s,
            realized,
            predicted,
            log,
        })
    }

    /// Run one communication round, mutating `state` in place.
    ///
    /// Order of business: refresh importance if due, train every client from
    /// the same model snapshot, plan and transmit each client's update,
    /// average what the server received, then evaluate on schedule.
    pub fn run_round(&self, state: &mut ExperimentState) -> Result<RoundRecord> {
        let cfg = &self.config;
        let round = state.round + 1;
        if state.round % cfg.importance_period == 0 {
            state.importance = self.importance_now(&state.model, round)?;
        }
        let grouping = match cfg.scheme {
            Scheme::Grouped(g) => Some(group_layers(&state.importance, g)?),
            _ => None,
        };

        let outcomes: Vec<ClientOutcome> = {
            let snapshot: &ExperimentState = state;
            let work = |client: usize| self.run_client(snapshot, round, client, grouping.as_ref());
            if cfg.deterministic {
                (0..cfg.n_clients).map(work).collect::<Result<_>>()?
            } else {
                (0..cfg.n_clients)
                    .into_par_iter()
                    .map(work)
                    .collect::<Result<_>>()?
            }
        };

        // Aggregate in client order so the sum is reproducible bit for bit.
        let mut acc = state.model.zero_delta();
        for outcome in &outcomes {
            for (acc_layer, delta_layer) in acc.iter_mut().zip(&outcome.delta_tilde) {
                for (a, &d) in acc_layer.iter_mut().zip(delta_layer) {
                    *a += d;
                }
            }
        }
        let inv_n = 1.0 / cfg.n_clients as f64;
        for layer in &mut acc {
            for a in layer {
                *a *= inv_n;
            }
        }
        state.model = state.model.plus(&acc);

        let sizes = self.arch.layer_sizes();
        let t_d = downlink_latency(sizes.iter().sum(), cfg.channel.n_bits, cfg.channel.b_d);
        let t_c = compute_latency(&self.compute);
        let t_u = outcomes.iter().map(|o| o.uplink_s).fold(0.0, f64::max);
        let latency = LatencyBreakdown::new(t_d, t_c, t_u);
        state.cumulative_latency_s += latency.t_round;
        state.round = round;

        let (train_loss, test_accuracy) = if round % cfg.eval_every == 0 || round == cfg.rounds {
            let (loss, _) = evaluate(&state.model, &self.eval_train)?;
            let (_, acc) = evaluate(&state.model, &self.test)?;
            (Some(loss), Some(acc))
        } else {
            (None, None)
        };

        let mut realized_sq_error = vec![0.0; sizes.len()];
        let mut predicted_sq_error = vec![0.0; sizes.len()];
        for outcome in &outcomes {
            for k in 0..sizes.len() {
                realized_sq_error[k] += outcome.realized[k];
                predicted_sq_error[k] += outcome.predicted[k];
            }
        }
        let plans = outcomes.into_iter().map(|o| o.log).collect();

        Ok(RoundRecord {
            round,
            latency,
            cumulative_latency_s: state.cumulative_latency_s,
            train_loss,
            test_accuracy,
            realized_sq_error,
            predicted_sq_error,
            plans,
        })
    }

    /// Run the configured number of rounds, stopping early if the target
    /// accuracy is met at an evaluation.
    pub fn run(&self) -> Result<ExperimentResult> {
        let mut state = self.initial_state();
        let (initial_train_loss, _) = evaluate(&state.model, &self.eval_train)?;
        let (_, initial_test_accuracy) = evaluate(&state.model, &self.test)?;
        let mut records = Vec::new();
        let mut reached_target = None;
        for _ in 0..self.config.rounds {
            let record = self.run_round(&mut state)?;
            let hit = matches!(
                (record.test_accuracy, self.config.target_accuracy),
                (Some(acc), Some(target)) if acc >= target
            );
            let round = record.round;
            let cumulative_latency_s = record.cumulative_latency_s;
            records.push(record);
            if hit {
                reached_target = Some(TargetHit {
                    round,
                    cumulative_latency_s,
                });
                break;
            }
        }
        Ok(ExperimentResult {
            initial_train_loss,
            initial_test_accuracy,
            records,
            final_model: state.model,
            final_importance: state.importance,
            reached_target,
        })
    }
}
