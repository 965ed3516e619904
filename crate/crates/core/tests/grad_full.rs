//! Whole-model gradient checks against central finite differences.
//!
//! The finite-difference side only ever evaluates loss values. For models
//! with MoE slots the surrogate pins routing decisions and detach-scale
//! denominators at the base point, which is exactly the function whose
//! gradient backprop computes.

use std::collections::BTreeMap;

use moetta_core::autodiff::grad_check_params;
use moetta_core::tensor::Tensor;
use moetta_core::tta::{adapt_batch, entropy, entropy_var, AdaptationConfig, AdaptationState, Strategy};
use moetta_core::vit::{
    init_model, moefy, ForwardOptions, Model, PinnedRouting, ReplacementPlan, TrainScope,
    ViTConfig,
};
use moetta_core::{rng, Result};

fn pinned_vit_config() -> ViTConfig {
    ViTConfig {
        image_side: 8,
        channels: 3,
        patch_side: 4,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        classes: 5,
        layer_norm_eps: 1e-5,
        two_layer_head: false,
    }
}

fn random_images(batch: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = rng::rng(seed, &[]);
    let data: Vec<f64> = (0..batch * 8 * 8 * 3).map(|_| r.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![batch, 8, 8, 3], data).unwrap()
}

/// Mean prediction entropy of a batch, evaluated on a fresh tape.
fn mean_entropy_value(
    model: &Model,
    images: &Tensor,
    pinned: Option<&PinnedRouting>,
) -> Result<f64> {
    let fwd = model.forward_batch_pinned(images, &ForwardOptions::eval(), pinned)?;
    let ents = entropy(&fwd.posteriors)?;
    Ok(ents.data().iter().sum::<f64>() / ents.numel() as f64)
}

/// Analytic gradients of the mean prediction entropy for the given scope.
fn mean_entropy_grads(
    model: &Model,
    images: &Tensor,
    scope: TrainScope,
) -> Result<(BTreeMap<String, Tensor>, PinnedRouting)> {
    let mut fwd = model.forward_batch(images, &ForwardOptions::train(scope))?;
    let pinned = fwd.pinned_routing();
    let mut parts = Vec::new();
    for (logits, posterior) in fwd.sample_logits.iter().zip(&fwd.sample_posteriors) {
        parts.push(entropy_var(&mut fwd.tape, *logits, *posterior)?);
    }
    let coeffs = vec![1.0 / parts.len() as f64; parts.len()];
    let loss = fwd.tape.lincomb(&parts, &coeffs)?;
    let grads = fwd.tape.backward(loss)?;
    let mut map = BTreeMap::new();
    for path in model.trainable_paths(scope) {
        let var = fwd.leaves[&path];
        map.insert(path, grads.get_or_zeros(&fwd.tape, var));
    }
    Ok((map, pinned))
}

#[test]
fn plain_vit_full_parameter_gradient_check() {
    let config = pinned_vit_config();
    let model = init_model(&config, 2024).unwrap();
    let images = random_images(4, 1);

    let (analytic, _) = mean_entropy_grads(&model, &images, TrainScope::All).unwrap();
    let params = model.param_map();

    // The attention key bias has an exactly-zero gradient: a constant key
    // shift adds a per-row constant to the scores, which the row softmax
    // cancels. Assert that structural zero directly; a relative comparison
    // of two below-noise-floor values is meaningless.
    let (zero_paths, checked_paths): (Vec<String>, Vec<String>) = params
        .keys()
        .cloned()
        .partition(|p| p.ends_with("/msa/bk"));
    assert_eq!(zero_paths.len(), config.depth);
    for path in &zero_paths {
        let g = &analytic[path];
        assert!(
            g.data().iter().all(|v| v.abs() <= 1e-12),
            "{path}: expected structurally zero gradient"
        );
    }

    let value = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut m = model.clone();
        m.set_params(p)?;
        mean_entropy_value(&m, &images, None)
    };
    let err = grad_check_params(&params, &checked_paths, &analytic, value, 1e-5).unwrap();
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn moe_vit_adapter_gradient_check_after_warmup() {
    let config = pinned_vit_config();
    let base = init_model(&config, 7).unwrap();
    let mut model = moefy(
        &base,
        &ReplacementPlan::all_but_first(config.norm_slots()),
        2,
        1,
        8,
    )
    .unwrap();

    // One adaptation step gives the expert deltas nonzero values, so the
    // router gradient path through the detach-scale factor is live.
    let warmup = random_images(2, 2);
    let mut state = AdaptationState::new();
    let cfg = AdaptationConfig {
        strategy: Strategy::Moetta,
        learning_rate: 5e-2,
        momentum: 0.0,
        lambda: 0.2,
        e0: None,
        batch_size: 2,
        detach_scale: true,
        record_diagnostics: false,
    };
    adapt_batch(&warmup, &mut model, &mut state, &cfg).unwrap();

    let images = random_images(2, 3);
    let (analytic, pinned) =
        mean_entropy_grads(&model, &images, TrainScope::MoeAdapters).unwrap();
    let params = model.param_map();
    let paths = model.trainable_paths(TrainScope::MoeAdapters);

    let value = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut m = model.clone();
        m.set_params(p)?;
        mean_entropy_value(&m, &images, Some(&pinned))
    };
    let err = grad_check_params(&params, &paths, &analytic, value, 1e-5).unwrap();
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn tent_affine_gradient_check() {
    let config = pinned_vit_config();
    let model = init_model(&config, 11).unwrap();
    let images = random_images(3, 4);

    let (analytic, _) = mean_entropy_grads(&model, &images, TrainScope::NormAffine).unwrap();
    let params = model.param_map();
    let paths = model.trainable_paths(TrainScope::NormAffine);

    let value = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut m = model.clone();
        m.set_params(p)?;
        mean_entropy_value(&m, &images, None)
    };
    let err = grad_check_params(&params, &paths, &analytic, value, 1e-5).unwrap();
    assert!(err <= 1e-4, "max relative error {err}");
}
