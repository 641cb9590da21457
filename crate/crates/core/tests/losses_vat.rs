mod common;

use common::checks::{
    decomposition_residual, loss_identity_residual, vat_label_toy, vat_prediction_toy,
};
use crswin_core::losses::{ce_loss, dice_loss_with, one_hot, total_loss, VatConfig};
use crswin_core::model::{ForwardCtx, VoxelLinear};
use crswin_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn dice_ce_and_kl_identities() {
    for seed in 0..20 {
        let r = loss_identity_residual(seed);
        assert!(r < 1e-12, "seed {seed}: {r}");
    }
}

#[test]
fn dice_examples() {
    let two = one_hot(&[0, 1], 2, [1, 1, 2]).unwrap();
    let disjoint = one_hot(&[1, 0], 2, [1, 1, 2]).unwrap();
    assert!(
        dice_loss_with(&disjoint, &two, 0.0, true)
            .unwrap()
            .item()
            .abs()
            < 1e-12
    );
    let half = Tensor::full(&[2, 1, 1, 2], 0.5);
    assert!((dice_loss_with(&half, &two, 0.0, true).unwrap().item() + 0.5).abs() < 1e-12);
}

#[test]
fn ce_survives_exact_zeros() {
    let y = one_hot(&[0, 1], 2, [1, 1, 2]).unwrap();
    let p = one_hot(&[1, 0], 2, [1, 1, 2]).unwrap();
    let l = ce_loss(&p, &y).unwrap().item();
    assert!(l.is_finite() && l > 20.0);
}

#[test]
fn total_decomposes_with_frozen_perturbation() {
    for seed in 0..20 {
        let r = decomposition_residual(seed);
        assert!(r < 1e-9, "seed {seed}: {r}");
    }
}

#[test]
fn label_anchored_direction_matches_closed_form() {
    for seed in 0..8 {
        let (norm_err, cos) = vat_label_toy(seed);
        assert!(norm_err < 1e-6, "seed {seed}: norm off by {norm_err}");
        assert!(cos > 0.99, "seed {seed}: cosine {cos}");
    }
}

#[test]
fn prediction_anchored_direction_is_dominant_eigenvector() {
    let results: Vec<(f64, f64)> = (0..40).filter_map(vat_prediction_toy).collect();
    assert!(
        results.len() >= 10,
        "only {} toy problems had a spectral gap",
        results.len()
    );
    for (norm_err, cos) in results {
        assert!(
            norm_err < 1e-6 && cos > 0.99,
            "norm off by {norm_err}, cosine {cos}"
        );
    }
}

#[test]
fn vat_search_leaves_parameters_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = VoxelLinear::new(4, 3, 1.0);
    let store = net.init_params(3);
    let before = store.clone();
    let x = common::rand_tensor(&mut rng, &[4, 2, 2, 2], 1.0);
    let y = one_hot(&[0, 1, 2, 0, 1, 2, 0, 1], 3, [2, 2, 2]).unwrap();
    let bound = store.bind(true);
    let (terms, _) = total_loss(
        &net,
        &store,
        &bound,
        &x,
        &y,
        &VatConfig::default(),
        &mut ForwardCtx::eval(),
        &mut rng,
    )
    .unwrap();
    assert_eq!(store.entries(), before.entries());
    assert!(bound.grads().iter().flatten().all(|g| *g == 0.0));
    terms.total.backward().unwrap();
    assert!(bound.grads().iter().flatten().any(|g| *g != 0.0));
}
