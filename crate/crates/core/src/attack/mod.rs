//! Protective perturbations against prompt-driven inpainting.
//!
//! The default objective drives the unmasked cross-attention output of the
//! selected layers towards the output the layer produces when its softmax is
//! forced onto a single decoy token (BOS). Once the two coincide, the prompt
//! no longer reaches the predictor. The perturbation is found by signed
//! projected gradient descent in an L-infinity ball, and only enters the
//! model through the masked-image latent.

mod objective;

pub use objective::{decoy_loss, l_ca, DecoyProblem};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::codec::LATENT_TOKENS;
use crate::diffusion::context::{check_image, check_mask};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::text::{BasePrompt, DecoyTarget};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptChoice {
    QualityTag,
    Null,
    Custom(String),
}

impl PromptChoice {
    pub fn text(&self) -> &str {
        match self {
            PromptChoice::QualityTag => BasePrompt::QualityTag.text(),
            PromptChoice::Null => BasePrompt::Null.text(),
            PromptChoice::Custom(s) => s,
        }
    }
}

/// Which query tokens the loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegionSelector {
    /// `1 - M'`: the region that will be regenerated.
    Inpaint,
    /// `M'`: the kept region.
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Cross-attention decoy loss on a single forward pass.
    DecoyAttention,
    /// Baseline: push the noise prediction away from the clean-image
    /// prediction along an unrolled stretch of the sampling loop.
    NoisePred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub step_size: f32,
    pub iterations: usize,
    /// Fresh `(t, noise)` draws averaged per iteration.
    pub grad_samples: usize,
    /// Cross-attention resolutions the loss averages over.
    pub layers: Vec<usize>,
    pub decoy: DecoyTarget,
    pub base_prompt: PromptChoice,
    pub region: RegionSelector,
    /// Treat the masked branch as a constant target.
    pub stop_grad_target: bool,
    pub mask_bias: f32,
    pub seed: u64,
    pub objective: Objective,
    /// Held-out `(t, noise)` pairs for monitoring.
    pub probe_size: usize,
    pub probe_every: usize,
    /// Sampler steps unrolled by the noise-prediction baseline.
    pub unroll_steps: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 12.0 / 255.0,
            step_size: 2.0 / 255.0,
            iterations: 400,
            grad_samples: 1,
            layers: vec![16, 4],
            decoy: DecoyTarget::Bos,
            base_prompt: PromptChoice::QualityTag,
            region: RegionSelector::Inpaint,
            stop_grad_target: false,
            mask_bias: crate::predictor::DEFAULT_MASK_BIAS,
            seed: 0,
            objective: Objective::DecoyAttention,
            probe_size: 16,
            probe_every: 50,
            unroll_steps: 4,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, available: &[usize]) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("attack.epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return bad(format!(
                "attack.step_size must lie in (0, epsilon], got {} with epsilon {}",
                self.step_size, self.epsilon
            ));
        }
        if self.iterations == 0 {
            return bad("attack.iterations must be at least 1".into());
        }
        if self.grad_samples == 0 {
            return bad("attack.grad_samples must be at least 1".into());
        }
        if self.layers.is_empty() {
            return bad("attack.layers must select at least one resolution".into());
        }
        if let Some(r) = self.layers.iter().find(|r| !available.contains(r)) {
            return bad(format!("attack.layers: no cross-attention layer at resolution {r} (have {available:?})"));
        }
        if self.probe_every == 0 {
            return bad("attack.probe_every must be positive".into());
        }
        if self.objective == Objective::NoisePred && self.unroll_steps == 0 {
            return bad("attack.unroll_steps must be positive".into());
        }
        if !(self.mask_bias > 0.0 && self.mask_bias.is_finite()) {
            return bad("attack.mask_bias must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdversarialNoise {
    /// `[16, 16, 3]`
    #[serde(skip)]
    pub delta: Tensor<f32>,
    /// Objective value at every iteration, before that iteration's step.
    pub loss_history: Vec<f32>,
    /// `(iterations completed, mean probe-set decoy loss)`.
    pub probe_history: Vec<(usize, f32)>,
    pub config: AttackConfig,
    pub seed: u64,
    /// Predictor forward passes spent, including probes.
    pub forward_passes: u64,
}

impl AdversarialNoise {
    pub fn initial_probe(&self) -> Option<f32> {
        self.probe_history.first().map(|p| p.1)
    }

    pub fn final_probe(&self) -> Option<f32> {
        self.probe_history.last().map(|p| p.1)
    }

    /// Running minimum of the probe losses.
    pub fn probe_best_so_far(&self) -> Vec<f32> {
        let mut best = f32::INFINITY;
        self.probe_history
            .iter()
            .map(|&(_, v)| {
                best = best.min(v);
                best
            })
            .collect()
    }

    pub fn protected(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(x.zip_map(&self.delta, |a, d| (a + d).clamp(0.0, 1.0))?)
    }
}

/// `clamp(delta, -eps, eps)`, then shrink so that `x + delta` stays in
/// `[0, 1]`. The result satisfies both bounds exactly in `f32`.
pub fn project(delta: &Tensor<f32>, x: &Tensor<f32>, epsilon: f32) -> Result<Tensor<f32>> {
    Ok(delta.zip_map(x, |d, xv| project_one(d, xv, epsilon))?)
}

fn project_one(d: f32, x: f32, epsilon: f32) -> f32 {
    let mut v = d.clamp(-epsilon, epsilon).clamp(-x, 1.0 - x);
    // 1 - x can round up by an ulp; step back towards zero until x + v fits.
    while v != 0.0 && (x + v > 1.0 || v.abs() > epsilon) {
        v = f32::from_bits(v.to_bits() - 1);
    }
    while v != 0.0 && x + v < 0.0 {
        v = f32::from_bits(v.to_bits() - 1);
    }
    v
}

/// Whether `delta` respects the budget and the image range around `x`.
pub fn within_budget(delta: &Tensor<f32>, x: &Tensor<f32>, epsilon: f32) -> bool {
    delta
        .data()
        .iter()
        .zip(x.data())
        .all(|(&d, &xv)| d.abs() <= epsilon && (0.0..=1.0).contains(&(xv + d)))
}

/// Draw `n` `(t, noise)` pairs.
pub fn draw_noise(rng: &mut impl Rng, n: usize, train_steps: usize, channels: usize) -> Vec<(usize, Tensor<f32>)> {
    (0..n)
        .map(|_| {
            let t = rng.gen_range(1..=train_steps);
            let eps = Tensor::from_fn([LATENT_TOKENS, channels], |_| rng.sample(StandardNormal));
            (t, eps)
        })
        .collect()
}

/// Fixed seed offset separating the probe set from the attack's own draws.
const PROBE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn probe_set(cfg: &AttackConfig, model: &Model) -> Vec<(usize, Tensor<f32>)> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ PROBE_STREAM);
    draw_noise(
        &mut rng,
        cfg.probe_size,
        model.schedule().train_steps,
        model.codec.latent_channels(),
    )
}

/// Run the attack, calling `observe(iteration, delta)` after every step.
pub fn protect_with(
    model: &Model,
    x: &Tensor<f32>,
    m: &Tensor<f32>,
    cfg: &AttackConfig,
    mut observe: impl FnMut(usize, &Tensor<f32>),
) -> Result<AdversarialNoise> {
    if model.trained_steps == 0 {
        return Err(Error::Checkpoint("checkpoint is untrained; train a model before protecting".into()));
    }
    check_image(x)?;
    check_mask(m)?;
    let available: Vec<usize> = model.predictor.cross_attention_layers().iter().map(|l| l.resolution).collect();
    cfg.validate(&available)?;

    let problem = DecoyProblem::new(model, x, m, cfg)?;
    let probes = probe_set(cfg, model);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut delta = Tensor::<f32>::zeros(x.shape().to_vec());
    let mut loss_history = Vec::with_capacity(cfg.iterations);
    let mut probe_history = Vec::new();
    let mut passes = 0u64;

    let mut probe = |delta: &Tensor<f32>, done: usize, passes: &mut u64| -> Result<()> {
        if cfg.probe_size > 0 {
            let v = problem.probe_loss(delta, &probes)?;
            *passes += 2 * probes.len() as u64;
            probe_history.push((done, v));
        }
        Ok(())
    };
    probe(&delta, 0, &mut passes)?;

    for it in 0..cfg.iterations {
        let draws = draw_noise(
            &mut rng,
            cfg.grad_samples,
            model.schedule().train_steps,
            model.codec.latent_channels(),
        );
        let mut grad = Tensor::<f32>::zeros(x.shape().to_vec());
        let mut loss = 0.0f32;
        for (t, eps) in &draws {
            let (l, g, n) = match cfg.objective {
                Objective::DecoyAttention => {
                    let (l, g) = problem.loss_and_grad(&delta, *t, eps)?;
                    (l, g, 2)
                }
                Objective::NoisePred => problem.noise_pred_loss_and_grad(&delta, *t, eps)?,
            };
            passes += n;
            loss += l;
            grad = grad.zip_map(&g, |a, b| a + b)?;
        }
        let loss = loss / draws.len() as f32;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        loss_history.push(loss);
        let step = cfg.step_size;
        let stepped = delta.zip_map(&grad, |d, g| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            d - step * s
        })?;
        delta = project(&stepped, x, cfg.epsilon)?;
        assert!(
            within_budget(&delta, x, cfg.epsilon),
            "projection left the budget at iteration {it}"
        );
        observe(it, &delta);
        let done = it + 1;
        if done % cfg.probe_every == 0 || done == cfg.iterations {
            probe(&delta, done, &mut passes)?;
        }
    }

    Ok(AdversarialNoise {
        delta,
        loss_history,
        probe_history,
        config: cfg.clone(),
        seed: cfg.seed,
        forward_passes: passes,
    })
}

pub fn protect(model: &Model, x: &Tensor<f32>, m: &Tensor<f32>, cfg: &AttackConfig) -> Result<AdversarialNoise> {
    protect_with(model, x, m, cfg, |_, _| {})
}
