//! Per-round modulation planning: score candidate per-layer PSK assignments
//! by predicted loss drop per second and pick the maximizer.
//!
//! All plan variants (full enumeration, grouped, model-wide) score through
//! one precomputed table, so identical inputs give bit-identical scores and
//! the tie-break order is reproducible no matter which search produced a
//! plan.

use crate::error::{Error, Result};
use crate::hessian::{group_layers, importance_weights, LayerGrouping, LayerImportance};
use crate::latency::{compute_latency, downlink_latency, ComputeConfig};
use crate::modem::{ber, expected_sq_error, ChannelConfig};
use crate::nn::TrainingHyperparams;

/// Refuse full enumeration beyond this many layers (candidate_count^layers
/// plans); callers should group first.
pub const MAX_ENUM_LAYERS: usize = 12;

/// Per-layer modulation orders for one uplink.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModulationPlan {
    pub levels: Vec<u32>,
}

/// Everything the per-round objective needs, all observable at one client
/// after local training and before uplink.
#[derive(Debug, Clone, Copy)]
pub struct PlannerInputs<'a> {
    /// Accumulated squared stochastic-gradient norms from this round's
    /// local steps.
    pub grad_sq_sum: f64,
    pub importance: &'a LayerImportance,
    /// Per-layer quantizer step of the actual update being sent.
    pub steps: &'a [f64],
    /// Per-layer parameter counts D_k.
    pub layer_sizes: &'a [usize],
    pub hp: &'a TrainingHyperparams,
    pub channel: &'a ChannelConfig,
    pub compute: &'a ComputeConfig,
}

/// A plan with its objective value.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoredPlan {
    pub plan: ModulationPlan,
    /// Predicted expected loss drop for the round.
    pub numerator: f64,
    /// Predicted round latency in seconds.
    pub denominator: f64,
    /// numerator / denominator: loss drop per second. May be negative.
    pub score: f64,
}

/// Precomputed per-layer, per-candidate score contributions.
struct ScoreTables {
    /// Plan-independent part of the numerator.
    base_num: f64,
    /// Downlink + compute part of the denominator.
    base_den: f64,
    /// `penalty[k][c]`: numerator loss from sending layer k at candidate c.
    penalty: Vec<Vec<f64>>,
    /// `lat[k][c]`: uplink seconds for layer k at candidate c.
    lat: Vec<Vec<f64>>,
    candidates: Vec<u32>,
}

impl ScoreTables {
    fn new(inputs: &PlannerInputs) -> Result<ScoreTables> {
        let l = inputs.layer_sizes.len();
        if l == 0 {
            return Err(Error::schema("planner needs at least one layer"));
        }
        if inputs.steps.len() != l || inputs.importance.weights.len() != l {
            return Err(Error::schema(format!(
                "planner inputs disagree on layer count: {} sizes, {} steps, {} weights",
                l,
                inputs.steps.len(),
                inputs.importance.weights.len()
            )));
        }
        if !(inputs.grad_sq_sum >= 0.0) {
            return Err(Error::numeric(format!(
                "grad_sq_sum must be >= 0, got {}",
                inputs.grad_sq_sum
            )));
        }
        let weight_sum: f64 = inputs.importance.weights.iter().sum();
        if (weight_sum - 1.0).abs() > 1e-9 {
            return Err(Error::numeric(format!(
                "importance weights sum to {weight_sum}, expected 1"
            )));
        }
        inputs.channel.validate()?;
        inputs.compute.validate()?;
        inputs.hp.validate()?;

        let hp = inputs.hp;
        let n = hp.n_clients as f64;
        let tau = f64::from(hp.tau);
        let eta = hp.eta;
        let l_s = hp.l_smooth;
        let base_num = eta / 2.0 * inputs.grad_sq_sum
            - l_s * l_s * (n + 1.0) * tau * (tau - 1.0) * eta.powi(3) * hp.sigma_sq / (2.0 * n)
            - l_s * tau * eta * eta * hp.sigma_sq / (2.0 * n);

        let d_total: usize = inputs.layer_sizes.iter().sum();
        let base_den = downlink_latency(d_total, inputs.channel.n_bits, inputs.channel.b_d)
            + compute_latency(inputs.compute);

        let candidates = inputs.channel.candidate_levels.clone();
        let mut penalty = Vec::with_capacity(l);
        let mut lat = Vec::with_capacity(l);
        for k in 0..l {
            let d_k = inputs.layer_sizes[k];
            let mut p_row = Vec::with_capacity(candidates.len());
            let mut l_row = Vec::with_capacity(candidates.len());
            for &m in &candidates {
                let b = ber(m, inputs.channel.es_n0)?;
                let err = expected_sq_error(d_k, inputs.steps[k], inputs.channel.n_bits, b);
                p_row.push(l_s / (2.0 * n) * inputs.importance.weights[k] * err);
                l_row.push(
                    d_k as f64 * f64::from(inputs.channel.n_bits)
                        / (2.0 * inputs.channel.b_u * f64::from(m).log2()),
                );
            }
            penalty.push(p_row);
            lat.push(l_row);
        }
        Ok(ScoreTables {
            base_num,
            base_den,
            penalty,
            lat,
            candidates,
        })
    }

    /// Score a plan given as per-layer candidate indices.
    fn score_indices(&self, choice: &[usize]) -> ScoredPlan {
        let mut numerator = self.base_num;
        let mut denominator = self.base_den;
        for (k, &c) in choice.iter().enumerate() {
            numerator -= self.penalty[k][c];
            denominator += self.lat[k][c];
        }
        debug_assert!(denominator > 0.0, "round latency must be positive");
        ScoredPlan {
            plan: ModulationPlan {
                levels: choice.iter().map(|&c| self.candidates[c]).collect(),
            },
            numerator,
            denominator,
            score: numerator / denominator,
        }
    }

    fn candidate_index(&self, m: u32) -> Result<usize> {
        self.candidates
            .iter()
            .position(|&c| c == m)
            .ok_or_else(|| {
                Error::config(format!(
                    "modulation order {m} not in candidate set {:?}",
                    self.candidates
                ))
            })
    }
}

/// True when `a` beats `b`: higher score, then lower latency, then the
/// lexicographically smaller level vector.
fn better(a: &ScoredPlan, b: &ScoredPlan) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.denominator != b.denominator {
        return a.denominator < b.denominator;
    }
    a.plan.levels < b.plan.levels
}

/// Evaluate the per-round objective for one plan.
pub fn round_objective(plan: &ModulationPlan, inputs: &PlannerInputs) -> Result<ScoredPlan> {
    let tables = ScoreTables::new(inputs)?;
    if plan.levels.len() != inputs.layer_sizes.len() {
        return Err(Error::schema(format!(
            "plan has {} levels for {} layers",
            plan.levels.len(),
            inputs.layer_sizes.len()
        )));
    }
    let choice: Vec<usize> = plan
        .levels
        .iter()
        .map(|&m| tables.candidate_index(m))
        .collect::<Result<_>>()?;
    Ok(tables.score_indices(&choice))
}

/// Walk every assignment of candidate indices (odometer order) and keep the
/// best plan under the deterministic tie-break.
fn search_assignments(tables: &ScoreTables, slots: usize) -> ScoredPlan {
    let n_c = tables.candidates.len();
    let mut choice = vec![0usize; slots];
    let mut best: Option<ScoredPlan> = None;
    loop {
        let scored = tables.score_indices(&choice);
        if best.as_ref().is_none_or(|b| better(&scored, b)) {
            best = Some(scored);
        }
        // Odometer increment, most-significant slot first.
        let mut slot = slots;
        loop {
            if slot == 0 {
                return best.unwrap();
            }
            slot -= 1;
            choice[slot] += 1;
            if choice[slot] < n_c {
                break;
            }
            choice[slot] = 0;
        }
    }
}

/// Exhaustive search over all candidate^layers plans.
pub fn plan_enumerate(inputs: &PlannerInputs) -> Result<ScoredPlan> {
    let l = inputs.layer_sizes.len();
    if l > MAX_ENUM_LAYERS {
        return Err(Error::config(format!(
            "enumeration over {l} layers exceeds the {MAX_ENUM_LAYERS}-layer budget; \
             use plan_grouped with an importance grouping"
        )));
    }
    let tables = ScoreTables::new(inputs)?;
    Ok(search_assignments(&tables, l))
}

/// Exhaustive search with layers tied within importance groups: candidates
/// are assigned per group, expanded to per-layer plans, and scored with the
/// same tables as full enumeration.
pub fn plan_grouped(inputs: &PlannerInputs, grouping: &LayerGrouping) -> Result<ScoredPlan> {
    let l = inputs.layer_sizes.len();
    if grouping.group_of.len() != l {
        return Err(Error::schema(format!(
            "grouping covers {} layers, model has {l}",
            grouping.group_of.len()
        )));
    }
    if grouping.g > MAX_ENUM_LAYERS {
        return Err(Error::config(format!(
            "grouped enumeration over {} groups exceeds the {MAX_ENUM_LAYERS}-group budget",
            grouping.g
        )));
    }
    let tables = ScoreTables::new(inputs)?;
    let n_c = tables.candidates.len();
    let mut group_choice = vec![0usize; grouping.g];
    let mut layer_choice = vec![0usize; l];
    let mut best: Option<ScoredPlan> = None;
    loop {
        for (k, &g) in grouping.group_of.iter().enumerate() {
            layer_choice[k] = group_choice[g];
        }
        let scored = tables.score_indices(&layer_choice);
        if best.as_ref().is_none_or(|b| better(&scored, b)) {
            best = Some(scored);
        }
        let mut slot = grouping.g;
        loop {
            if slot == 0 {
                return Ok(best.unwrap());
            }
            slot -= 1;
            group_choice[slot] += 1;
            if group_choice[slot] < n_c {
                break;
            }
            group_choice[slot] = 0;
        }
    }
}

/// Model-wide adaptive modulation: one shared level for every layer.
pub fn plan_am(inputs: &PlannerInputs) -> Result<ScoredPlan> {
    let l = inputs.layer_sizes.len();
    let uniform = importance_weights(&vec![1.0; l], inputs.importance.round_computed);
    let single_group = group_layers(&uniform, 1).expect("g=1 is always valid");
    plan_grouped(inputs, &single_group)
}

/// Fixed-PSK baseline: every layer at order `m`.
pub fn plan_fixed(m: u32, l: usize) -> ModulationPlan {
    ModulationPlan { levels: vec![m; l] }
}
