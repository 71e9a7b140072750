//! Noise-prediction training of the text encoder and predictor, jointly.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::context::{apply_mask, downsample_mask, input_var};
use crate::data::{CaptionedExample, Split};
use crate::model::Model;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    /// Cosine decay to `lr * final_lr_frac` over the run.
    pub final_lr_frac: f32,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f32,
    /// Probability of training on the empty prompt.
    pub null_prompt_prob: f64,
    /// Probability of the whole-image caption; otherwise the masked-region caption.
    pub full_prompt_prob: f64,
    /// Number of distinct training scenes cycled through.
    pub corpus_size: u64,
    pub ema_decay: f32,
    pub divergence_factor: f32,
    pub divergence_window: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 8,
            lr: 2e-3,
            warmup: 200,
            final_lr_frac: 0.05,
            grad_clip: 1.0,
            null_prompt_prob: 0.1,
            full_prompt_prob: 0.3,
            corpus_size: 100_000,
            ema_decay: 0.99,
            divergence_factor: 10.0,
            divergence_window: 500,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("train.lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.null_prompt_prob)
            || !(0.0..=1.0).contains(&self.full_prompt_prob)
            || self.null_prompt_prob + self.full_prompt_prob > 1.0
        {
            return bad("train prompt probabilities must lie in [0, 1] and sum to at most 1");
        }
        if self.corpus_size == 0 {
            return bad("train.corpus_size must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("train.ema_decay must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        let warm = if self.warmup > 0 {
            ((step + 1) as f32 / self.warmup as f32).min(1.0)
        } else {
            1.0
        };
        let progress = if self.steps > 1 {
            step as f32 / (self.steps - 1) as f32
        } else {
            0.0
        };
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
        self.lr * warm * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-step mean batch loss.
    pub losses: Vec<f32>,
    /// Exponential moving average of `losses`, seeded with the first value.
    pub ema_loss: Option<f32>,
}

/// Pick the caption a training step conditions on.
fn pick_prompt<'a>(ex: &'a CaptionedExample, cfg: &TrainConfig, rng: &mut impl Rng) -> &'a str {
    let u: f64 = rng.gen();
    if u < cfg.null_prompt_prob {
        ""
    } else if u < cfg.null_prompt_prob + cfg.full_prompt_prob {
        &ex.prompt_full
    } else {
        &ex.prompt_mask
    }
}

fn gaussian(shape: [usize; 2], rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Loss of one batch on a fresh tape, and its parameter gradients.
fn batch_step(model: &Model, examples: &[(CaptionedExample, String, usize, Tensor<f32>)]) -> Result<(f32, Vec<Tensor<f32>>)> {
    let tape = Tape::<f32>::new();
    let p = model.params.bind(&tape, true);
    let mut total: Option<crate::tensor::Var<f32>> = None;
    for (ex, prompt, t, eps) in examples {
        let tokens = model.tokenize(prompt)?;
        let e = model.encoder.forward(&p, &tokens)?;
        let z0 = model.codec.encode(&ex.image)?;
        let z_t = model.schedule().q_sample(&z0, *t, eps)?;
        let z0m = model.codec.encode(&apply_mask(&ex.image, &ex.mask))?;
        let m_prime = downsample_mask(&ex.mask);
        let input = input_var(&tape, &z_t, &m_prime, tape.constant(z0m))?;
        let out = model.predictor.forward(&p, input, *t as f32, e, None, None)?;
        let loss = out.eps.expect("full pass").mse(tape.constant(eps.clone()))?;
        total = Some(match total {
            None => loss,
            Some(acc) => acc.add(loss)?,
        });
    }
    let loss = total.expect("non-empty batch").scale(1.0 / examples.len() as f32);
    let value = loss.item();
    let mut grads = tape.backward(loss)?;
    let g = p.vars().iter().map(|&v| grads.take(v)).collect();
    Ok((value, g))
}

/// Train `model` in place. `progress` sees `(step, loss, ema)` after every step.
pub fn train(model: &mut Model, cfg: &TrainConfig, mut progress: impl FnMut(usize, f32, f32)) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.adam, model.params.tensors());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut ema: Option<f32> = None;
    let mut initial = None;
    let mut above = 0usize;
    let train_steps = model.schedule().train_steps;
    let latent = model.config.predictor.latent_channels;

    for step in 0..cfg.steps {
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|_| {
                let ex = CaptionedExample::from_seed(Split::Train.seed(rng.gen_range(0..cfg.corpus_size)));
                let prompt = pick_prompt(&ex, cfg, &mut rng).to_string();
                let t = rng.gen_range(1..=train_steps);
                let eps = gaussian([crate::diffusion::codec::LATENT_TOKENS, latent], &mut rng);
                (ex, prompt, t, eps)
            })
            .collect();
        let (loss, mut grads) = batch_step(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: step });
        }

        let limit = cfg.divergence_factor * *initial.get_or_insert(loss);
        above = if loss > limit { above + 1 } else { 0 };
        if above >= cfg.divergence_window {
            return Err(Error::Diverged {
                step,
                loss,
                limit,
                window: cfg.divergence_window,
            });
        }

        if cfg.grad_clip > 0.0 {
            let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f32>().sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grads = grads.iter().map(|g| g.map(|v| v * s)).collect();
            }
        }
        opt.step(model.params.tensors_mut(), &grads, cfg.lr_at(step))?;
        model.trained_steps += 1;

        let e = match ema {
            None => loss,
            Some(prev) => cfg.ema_decay * prev + (1.0 - cfg.ema_decay) * loss,
        };
        ema = Some(e);
        losses.push(loss);
        progress(step, loss, e);
    }
    Ok(TrainReport { losses, ema_loss: ema })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_leave_weights_alone() {
        let mut m = Model::new(ModelConfig::default()).unwrap();
        let before = m.params.clone();
        let r = train(&mut m, &tiny(0), |_, _, _| {}).unwrap();
        assert!(r.losses.is_empty());
        assert_eq!(r.ema_loss, None);
        assert_eq!(m.params, before);
        assert_eq!(m.trained_steps, 0);
    }

    #[test]
    fn initial_loss_is_unit_variance() {
        let mut m = Model::new(ModelConfig::default()).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            ..tiny(1)
        };
        let r = train(&mut m, &cfg, |_, _, _| {}).unwrap();
        assert!((0.5..1.5).contains(&r.losses[0]), "{}", r.losses[0]);
    }

    #[test]
    fn two_steps_are_reproducible() {
        let run = || {
            let mut m = Model::new(ModelConfig::default()).unwrap();
            let r = train(&mut m, &tiny(2), |_, _, _| {}).unwrap();
            (m.params, r.losses)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig::default();
        assert!(cfg.lr_at(0) < cfg.lr_at(cfg.warmup));
        assert!(cfg.lr_at(cfg.steps - 1) < cfg.lr_at(cfg.warmup));
        assert!((cfg.lr_at(cfg.steps - 1) - cfg.lr * cfg.final_lr_frac).abs() < 1e-6);
    }

    #[test]
    fn bad_probabilities_are_config_errors() {
        let cfg = TrainConfig {
            null_prompt_prob: 0.8,
            full_prompt_prob: 0.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().unwrap_err().is_config());
    }
}
