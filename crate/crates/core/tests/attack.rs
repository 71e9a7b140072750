use std::collections::BTreeMap;

use decoy_core::attack::{draw_noise, l_ca, project, protect, protect_with, within_budget, AttackConfig, DecoyProblem, Objective, RegionSelector};
use decoy_core::data::{CaptionedExample, Split};
use decoy_core::diffusion::context::{downsample_mask, mask_pyramid};
use decoy_core::model::{Model, ModelConfig};
use decoy_core::predictor::{AttentionLayerId, AttentionTrace, LayerAttention};
use decoy_core::tensor::{check_gradient, Tensor};
use decoy_core::text::{make_token_mask, DecoyTarget, TokenMask};
use decoy_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Randomly initialised model marked as trained, so the attack runs on it.
fn model() -> Model {
    let mut m = Model::new(ModelConfig::default()).unwrap();
    m.trained_steps = 1;
    m
}

fn example() -> CaptionedExample {
    CaptionedExample::from_seed(Split::Test.seed(0))
}

fn quick(iterations: usize) -> AttackConfig {
    AttackConfig {
        iterations,
        probe_size: 2,
        probe_every: 5,
        ..AttackConfig::default()
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn projection_examples() {
    let eps = 12.0 / 255.0;
    let x = Tensor::full([2, 2, 3], 0.5f32);
    let inside = Tensor::full([2, 2, 3], eps / 2.0);
    assert_eq!(project(&inside, &x, eps).unwrap(), inside);
    let big = Tensor::full([2, 2, 3], 2.0 * eps);
    assert!(project(&big, &x, eps).unwrap().data().iter().all(|&v| v == eps));
    let ones = Tensor::full([2, 2, 3], 1.0f32);
    assert!(project(&Tensor::full([2, 2, 3], eps), &ones, eps)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_feasible(
        d in prop::collection::vec(-1.0f32..1.0, 12),
        x in prop::collection::vec(0.0f32..=1.0, 12),
        eps in 0.0f32..0.2,
    ) {
        let d = Tensor::new([2, 2, 3], d).unwrap();
        let x = Tensor::new([2, 2, 3], x).unwrap();
        let p = project(&d, &x, eps).unwrap();
        prop_assert!(within_budget(&p, &x, eps));
        prop_assert_eq!(bits(&project(&p, &x, eps).unwrap()), bits(&p));
    }
}

fn layer(resolution: usize, output: Tensor<f32>) -> LayerAttention {
    LayerAttention {
        id: AttentionLayerId { index: 2, resolution },
        phi: Tensor::zeros([resolution, 1]),
        attn: Tensor::zeros([resolution, 1]),
        output,
    }
}

fn trace(output: Tensor<f32>, masked: bool) -> AttentionTrace {
    AttentionTrace {
        layers: vec![layer(4, output)],
        masked,
    }
}

/// Keep mask at latent resolution whose top-left quadrant is inpainted.
fn quadrant_pyramid() -> BTreeMap<usize, Vec<f32>> {
    let m: Vec<f32> = (0..64).map(|p| f32::from(!(p / 8 < 4 && p % 8 < 4))).collect();
    mask_pyramid(&m)
}

#[test]
fn l_ca_hand_worked() {
    let pyr = quadrant_pyramid();
    assert_eq!(pyr[&4], vec![0.0, 1.0, 1.0, 1.0]);
    let masked = Tensor::new([4, 2], vec![3.0, 4.0, 9.0, 9.0, 1.0, 1.0, 5.0, 0.0]).unwrap();
    let clean = Tensor::new([4, 2], vec![0.0, 0.0, 1.0, 2.0, 0.0, 7.0, 0.0, 1.0]).unwrap();
    let v = l_ca(&trace(masked.clone(), true), &trace(clean.clone(), false), &pyr, &[4], RegionSelector::Inpaint).unwrap();
    assert!((v - 5.0).abs() < 1e-6);
    let same = l_ca(&trace(clean.clone(), true), &trace(clean.clone(), false), &pyr, &[4], RegionSelector::Inpaint).unwrap();
    assert_eq!(same, 0.0);
    let keep_all = mask_pyramid(&[1.0; 64]);
    let none = l_ca(&trace(masked.clone(), true), &trace(clean.clone(), false), &keep_all, &[4], RegionSelector::Inpaint).unwrap();
    assert_eq!(none, 0.0);
    assert!(l_ca(&trace(masked, true), &trace(clean, false), &pyr, &[], RegionSelector::Inpaint)
        .unwrap_err()
        .is_config());
}

#[test]
fn single_iteration_is_one_signed_step() {
    let m = model();
    let ex = example();
    let cfg = quick(1);
    let out = protect(&m, &ex.image, &ex.mask, &cfg).unwrap();
    let s = cfg.step_size;
    assert!(out.delta.data().iter().all(|&d| d == 0.0 || d == s || d == -s));
    assert!(out.delta.data().iter().any(|&d| d != 0.0));
    assert_eq!(out.loss_history.len(), 1);
}

#[test]
fn zero_budget_leaves_image_untouched() {
    let m = model();
    let ex = example();
    let cfg = AttackConfig {
        epsilon: 0.0,
        ..quick(4)
    };
    let out = protect(&m, &ex.image, &ex.mask, &cfg).unwrap();
    assert!(out.delta.data().iter().all(|&d| d == 0.0));
    assert_eq!(out.loss_history.len(), 4);
    // Every entry is the zero-perturbation loss of that iteration's draw.
    let e = m.encode_prompt(cfg.base_prompt.text()).unwrap();
    let p = DecoyProblem::with_decoy(&m, &ex.image, &ex.mask, &cfg, make_token_mask(&e, cfg.decoy), e).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for &h in &out.loss_history {
        let (t, z) = draw_noise(&mut rng, 1, 1000, 8).remove(0);
        assert_eq!(h, p.loss(&Tensor::zeros([16, 16, 3]), t, &z).unwrap());
    }
}

#[test]
fn budget_holds_after_every_step() {
    let m = model();
    let ex = example();
    let cfg = AttackConfig {
        epsilon: 4.0 / 255.0,
        step_size: 3.0 / 255.0,
        ..quick(6)
    };
    let mut seen = 0;
    let out = protect_with(&m, &ex.image, &ex.mask, &cfg, |_, d| {
        assert!(within_budget(d, &ex.image, cfg.epsilon));
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen, 6);
    assert_eq!(out.probe_history.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 5, 6]);
}

#[test]
fn same_seed_same_bits() {
    let m = model();
    let ex = example();
    let a = protect(&m, &ex.image, &ex.mask, &quick(3)).unwrap();
    let b = protect(&m, &ex.image, &ex.mask, &quick(3)).unwrap();
    assert_eq!(bits(&a.delta), bits(&b.delta));
    assert_eq!(a.loss_history, b.loss_history);
    let c = protect(&m, &ex.image, &ex.mask, &AttackConfig { seed: 1, ..quick(3) }).unwrap();
    assert_ne!(a.loss_history, c.loss_history);
}

#[test]
fn untrained_checkpoint_is_rejected() {
    let m = Model::new(ModelConfig::default()).unwrap();
    let ex = example();
    assert!(matches!(protect(&m, &ex.image, &ex.mask, &quick(1)), Err(Error::Checkpoint(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let m = model();
    let ex = example();
    for cfg in [
        AttackConfig {
            step_size: 1.0,
            ..quick(1)
        },
        AttackConfig {
            layers: vec![8],
            ..quick(1)
        },
        AttackConfig {
            layers: vec![],
            ..quick(1)
        },
        quick(0),
    ] {
        assert!(protect(&m, &ex.image, &ex.mask, &cfg).unwrap_err().is_config());
    }
}

#[test]
fn all_token_decoy_has_zero_loss() {
    let m = model();
    let ex = example();
    let cfg = quick(1);
    let e = m.encode_prompt(cfg.base_prompt.text()).unwrap();
    let p = DecoyProblem::with_decoy(&m, &ex.image, &ex.mask, &cfg, TokenMask::all(m.seq_len()), e).unwrap();
    let z = Tensor::from_fn([64, 8], |i| ((i * 31) % 17) as f32 / 8.0 - 1.0);
    let l = p.loss(&Tensor::zeros([16, 16, 3]), 400, &z).unwrap();
    assert!(l < 1e-8, "{l}");
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let m = model();
    let ex = example();
    let cfg = quick(1);
    let e = m.encode_prompt(cfg.base_prompt.text()).unwrap();
    let decoy = make_token_mask(&e, DecoyTarget::Bos);
    let p = DecoyProblem::with_decoy(&m, &ex.image, &ex.mask, &cfg, decoy, e).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = Tensor::from_fn([64, 8], |_| rng.gen_range(-1.0f32..1.0));
    let d0: Tensor<f64> = Tensor::from_fn([16, 16, 3], |_| rng.gen_range(-0.02..0.02));
    let err = check_gradient(
        |tape, d| p.loss_var(tape, d, 350, &z).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        }),
        &d0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn noise_pred_baseline_runs_and_costs_more_passes() {
    let m = model();
    let ex = example();
    let decoy = protect(&m, &ex.image, &ex.mask, &AttackConfig { probe_size: 0, ..quick(2) }).unwrap();
    let base = protect(
        &m,
        &ex.image,
        &ex.mask,
        &AttackConfig {
            objective: Objective::NoisePred,
            probe_size: 0,
            ..quick(2)
        },
    )
    .unwrap();
    assert_eq!(decoy.forward_passes, 4);
    assert_eq!(base.forward_passes, 2 * 2 * 4);
    assert!(within_budget(&base.delta, &ex.image, 12.0 / 255.0));
    assert!(base.loss_history.iter().all(|l| *l <= 0.0));
}

#[test]
fn latent_mask_matches_pixel_mask() {
    let ex = example();
    let mp = downsample_mask(&ex.mask);
    assert_eq!(mp.len(), 64);
    assert!(mp.iter().any(|&v| v < 1.0));
}
