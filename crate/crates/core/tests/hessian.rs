//! Power-iteration checks against a dense eigensolver.

mod common;

use common::{dense_top_eigenvalue, dense_top_of_matrix};
use fedwave::data::gen_synthetic;
use fedwave::hessian::{group_layers, importance_weights, layer_importance, top_eigenvalue, PowerIterParams};
use fedwave::nn::{Architecture, Batch};
use fedwave::rng::derive_rng;
use rand::Rng;

fn random_symmetric(dim: usize, seed: u64) -> nalgebra::DMatrix<f64> {
    let mut rng = derive_rng(seed, &[41]);
    let raw = nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    (&raw + raw.transpose()) * 0.5
}

#[test]
fn power_iteration_matches_dense_solver_on_random_matrices() {
    let params = PowerIterParams {
        tol: 1e-6,
        max_iters: 2000,
    };
    for seed in 0..8u64 {
        let dim = 30 + (seed as usize % 3) * 10;
        let m = random_symmetric(dim, seed);
        let want = dense_top_of_matrix(&m);
        let mut rng = derive_rng(seed, &[42]);
        let apply = |v: &[f64]| {
            let vec = nalgebra::DVector::from_column_slice(v);
            Ok((&m * vec).iter().cloned().collect::<Vec<f64>>())
        };
        let got = top_eigenvalue(apply, dim, &params, &mut rng).unwrap();
        assert!(
            (got.lambda - want).abs() / want.abs() < 0.01,
            "seed {seed}: {} vs {want}",
            got.lambda
        );
    }
}

#[test]
fn layer_blocks_of_a_tiny_mlp_match_explicit_assembly() {
    // 5-6-3 MLP: layer blocks of 36 and 21 parameters, both well under the
    // size where explicit assembly is feasible.
    let arch = Architecture::mlp(&[5, 6, 3]);
    for seed in [1u64, 2, 3] {
        let mut rng = derive_rng(seed, &[1]);
        let model = arch.init(&mut rng);
        let data = gen_synthetic(3, 5, 40, seed, 2.0);
        let batch = Batch::full(&data);
        let (importance, runs) =
            layer_importance(&model, &batch, &PowerIterParams::default(), seed, 0).unwrap();
        for layer in 0..2 {
            let want = dense_top_eigenvalue(&model, &batch, layer);
            let got = importance.eigenvalues[layer];
            assert!(
                (got - want).abs() <= 0.02 * want.abs().max(1e-9),
                "seed {seed} layer {layer}: {got} vs {want} ({} iters, converged={})",
                runs[layer].iters,
                runs[layer].converged
            );
        }
    }
}

#[test]
fn importance_weights_normalize_and_clamp() {
    let imp = importance_weights(&[3.0, -1.0, 1.0], 4);
    assert_eq!(imp.round_computed, 4);
    assert!((imp.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(imp.weights[1], 0.0);
    assert!((imp.weights[0] - 0.75).abs() < 1e-12);
}

#[test]
fn grouping_puts_heavy_layers_first_and_spreads_remainders() {
    let imp = importance_weights(&[0.1, 5.0, 0.1, 2.0, 0.1], 0);
    let grouping = group_layers(&imp, 2).unwrap();
    // 5 layers over 2 groups: sizes 3 and 2, extras to group 0.
    assert_eq!(grouping.group_of[1], 0);
    assert_eq!(grouping.group_of[3], 0);
    let g0 = grouping.group_of.iter().filter(|&&g| g == 0).count();
    assert_eq!(g0, 3);
}
