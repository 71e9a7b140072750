//! Deterministic DDIM inpainting with classifier-free guidance.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::codec::LATENT_TOKENS;
use super::context::{check_image, check_mask, make_inpaint_context, InpaintContext};
use crate::model::Model;
use crate::predictor::AttentionTrace;
use crate::tensor::Tensor;
use crate::text::{PromptEmbedding, TokenSequence};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub inference_steps: usize,
    pub cfg_scale: f32,
    pub strength: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            inference_steps: 25,
            cfg_scale: 7.5,
            strength: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, train_steps: usize) -> Result<()> {
        if self.inference_steps == 0 || self.inference_steps > train_steps {
            return Err(Error::Config(format!(
                "sampler.inference_steps must lie in [1, {train_steps}], got {}",
                self.inference_steps
            )));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::Config(format!("sampler.cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::Config(format!(
                "sampler.strength must lie in (0, 1], got {}",
                self.strength
            )));
        }
        Ok(())
    }

    /// Number of denoising steps actually run: `ceil(strength * steps)`.
    pub fn start_index(&self) -> usize {
        ((self.strength as f64 * self.inference_steps as f64).ceil() as usize).clamp(1, self.inference_steps)
    }
}

/// `(1 + w) eps_cond - w eps_uncond`.
pub fn guide(cond: &Tensor<f32>, uncond: &Tensor<f32>, w: f32) -> Result<Tensor<f32>> {
    Ok(cond.zip_map(uncond, |c, u| (1.0 + w) * c - w * u)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintOutput {
    /// Composited result, `[16, 16, 3]`.
    pub image: Tensor<f32>,
    /// Decoded generation before compositing, clamped to `[0, 1]`.
    pub generated: Tensor<f32>,
    /// Conditional-pass traces, one per step, when requested.
    pub traces: Vec<AttentionTrace>,
    /// Timesteps visited, in order.
    pub timesteps: Vec<usize>,
    /// Keep mask at latent resolution.
    pub m_prime: Vec<f32>,
}

/// Options beyond [`SamplerConfig`] that tests and sweeps toggle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleOptions {
    pub trace: bool,
    /// Run the unconditional pass even at `w = 0`.
    pub force_uncond: bool,
}

/// Inpaint the `M = 0` region of `x` conditioned on `prompt`.
pub fn sample_inpaint(
    model: &Model,
    x: &Tensor<f32>,
    m: &Tensor<f32>,
    prompt: &TokenSequence,
    cfg: &SamplerConfig,
    opts: SampleOptions,
) -> Result<InpaintOutput> {
    let cond = model.embed_tokens(prompt)?;
    let uncond = model.encode_prompt("")?;
    sample_with_embeddings(model, x, m, &cond, &uncond, cfg, opts)
}

fn initial_noise(cfg: &SamplerConfig, channels: usize) -> Tensor<f32> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    Tensor::from_fn([LATENT_TOKENS, channels], |_| rng.sample(StandardNormal))
}

pub fn sample_with_embeddings(
    model: &Model,
    x: &Tensor<f32>,
    m: &Tensor<f32>,
    cond: &PromptEmbedding,
    uncond: &PromptEmbedding,
    cfg: &SamplerConfig,
    opts: SampleOptions,
) -> Result<InpaintOutput> {
    check_image(x)?;
    check_mask(m)?;
    let sched = model.schedule();
    cfg.validate(sched.train_steps)?;
    let grid = sched.timestep_grid(cfg.inference_steps);
    let k0 = cfg.start_index();
    let noise = initial_noise(cfg, model.codec.latent_channels());

    let mut z = if cfg.strength >= 1.0 {
        noise
    } else {
        sched.q_sample(&model.codec.encode(x)?, grid[k0 - 1], &noise)?
    };
    let ctx0: InpaintContext = make_inpaint_context(&model.codec, x, m, None, z.clone())?;

    let mut traces = Vec::new();
    let mut timesteps = Vec::with_capacity(k0);
    for k in (0..k0).rev() {
        let t = grid[k];
        timesteps.push(t);
        let ctx = InpaintContext {
            z_t: z.clone(),
            ..ctx0.clone()
        };
        let input = ctx.to_input();
        let (eps_c, tr) = model
            .predictor
            .predict_noise(&model.params, &input, t as f32, cond, None, opts.trace)?;
        traces.extend(tr);
        let eps = if cfg.cfg_scale != 0.0 || opts.force_uncond {
            let (eps_u, _) = model
                .predictor
                .predict_noise(&model.params, &input, t as f32, uncond, None, false)?;
            guide(&eps_c, &eps_u, cfg.cfg_scale)?
        } else {
            eps_c
        };
        let ab = sched.alpha_bar(t);
        let ab_prev = if k == 0 { 1.0 } else { sched.alpha_bar(grid[k - 1]) };
        let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let (pa, pb) = (ab_prev.sqrt() as f32, (1.0 - ab_prev).sqrt() as f32);
        z = z.zip_map(&eps, |zt, e| {
            let z0 = (zt - sb * e) / sa;
            pa * z0 + pb * e
        })?;
    }

    let generated = model.codec.decode(&z)?.map(|v| v.clamp(0.0, 1.0));
    let md = m.data();
    let image = Tensor::from_fn(x.shape().to_vec(), |i| {
        if md[i / 3] == 1.0 {
            x.data()[i]
        } else {
            generated.data()[i]
        }
    });
    Ok(InpaintOutput {
        image,
        generated,
        traces,
        timesteps,
        m_prime: ctx0.m_prime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CaptionedExample;
    use crate::model::ModelConfig;

    fn setup() -> (Model, CaptionedExample) {
        let mut m = Model::new(ModelConfig::default()).unwrap();
        // Make the output head non-trivial so guidance has something to act on.
        for (name, t) in m.params.names().to_vec().iter().zip(m.params.tensors_mut()) {
            if name.starts_with("unet.output") {
                *t = Tensor::from_fn(t.shape().to_vec(), |i| ((i * 7919) % 13) as f32 / 13.0 - 0.5);
            }
        }
        (m, CaptionedExample::from_seed(3))
    }

    fn cfg(w: f32, steps: usize) -> SamplerConfig {
        SamplerConfig {
            inference_steps: steps,
            cfg_scale: w,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn zero_guidance_skips_uncond_without_changing_bits() {
        let (m, ex) = setup();
        let p = m.tokenize(&ex.prompt_mask).unwrap();
        let a = sample_inpaint(&m, &ex.image, &ex.mask, &p, &cfg(0.0, 3), SampleOptions::default()).unwrap();
        let b = sample_inpaint(
            &m,
            &ex.image,
            &ex.mask,
            &p,
            &cfg(0.0, 3),
            SampleOptions {
                force_uncond: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guidance_is_affine_in_w() {
        let c = Tensor::from_fn([4], |i| i as f32 * 0.3 - 0.2);
        let u = Tensor::from_fn([4], |i| 1.0 - i as f32 * 0.1);
        let (w1, w2) = (2.0, 9.0);
        let a = guide(&c, &u, w1).unwrap();
        let b = guide(&c, &u, w2).unwrap();
        let mid = guide(&c, &u, (w1 + w2) / 2.0).unwrap();
        for i in 0..4 {
            assert!((a.data()[i] + b.data()[i] - 2.0 * mid.data()[i]).abs() < 1e-5);
        }
        assert_eq!(guide(&c, &u, 0.0).unwrap(), c);
    }

    #[test]
    fn kept_pixels_are_copied() {
        let (m, ex) = setup();
        let p = m.tokenize(&ex.prompt_mask).unwrap();
        let out = sample_inpaint(&m, &ex.image, &ex.mask, &p, &cfg(7.5, 2), SampleOptions::default()).unwrap();
        for (i, &keep) in ex.mask.data().iter().enumerate() {
            if keep == 1.0 {
                for c in 0..3 {
                    assert_eq!(out.image.data()[i * 3 + c].to_bits(), ex.image.data()[i * 3 + c].to_bits());
                }
            }
        }
        let ones = Tensor::full([16, 16], 1.0);
        let out = sample_inpaint(&m, &ex.image, &ones, &p, &cfg(7.5, 2), SampleOptions::default()).unwrap();
        assert_eq!(out.image, ex.image);
    }

    #[test]
    fn full_strength_ignores_masked_content() {
        let (m, ex) = setup();
        let p = m.tokenize(&ex.prompt_mask).unwrap();
        let mut other = ex.image.clone();
        for (i, &keep) in ex.mask.data().iter().enumerate() {
            if keep == 0.0 {
                other.data_mut()[i * 3..i * 3 + 3].copy_from_slice(&[0.3, 0.9, 0.1]);
            }
        }
        let a = sample_inpaint(&m, &ex.image, &ex.mask, &p, &cfg(7.5, 3), SampleOptions::default()).unwrap();
        let b = sample_inpaint(&m, &other, &ex.mask, &p, &cfg(7.5, 3), SampleOptions::default()).unwrap();
        assert_eq!(a.generated, b.generated);
    }

    #[test]
    fn strength_sets_step_count() {
        let c = SamplerConfig {
            inference_steps: 10,
            strength: 0.75,
            ..SamplerConfig::default()
        };
        assert_eq!(c.start_index(), 8);
        let (m, ex) = setup();
        let p = m.tokenize("").unwrap();
        let out = sample_inpaint(&m, &ex.image, &ex.mask, &p, &c, SampleOptions::default()).unwrap();
        assert_eq!(out.timesteps, vec![800, 700, 600, 500, 400, 300, 200, 100]);
    }

    #[test]
    fn traces_cover_every_step_and_layer() {
        let (m, ex) = setup();
        let p = m.tokenize(&ex.prompt_mask).unwrap();
        let opts = SampleOptions {
            trace: true,
            ..Default::default()
        };
        let out = sample_inpaint(&m, &ex.image, &ex.mask, &p, &cfg(7.5, 4), opts).unwrap();
        assert_eq!(out.traces.len(), 4);
        assert!(out.traces.iter().all(|t| t.layers.len() == 5 && !t.masked));
        let plain = sample_inpaint(&m, &ex.image, &ex.mask, &p, &cfg(7.5, 4), SampleOptions::default()).unwrap();
        assert_eq!(plain.image, out.image);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            SamplerConfig {
                inference_steps: 0,
                ..Default::default()
            },
            SamplerConfig {
                cfg_scale: -1.0,
                ..Default::default()
            },
            SamplerConfig {
                strength: 0.0,
                ..Default::default()
            },
        ] {
            assert!(c.validate(1000).unwrap_err().is_config());
        }
    }
}
