use std::collections::BTreeMap;

use super::{AttackConfig, RegionSelector};
use crate::diffusion::codec::LATENT_TOKENS;
use crate::diffusion::context::{apply_mask, downsample_mask, input_var, mask_channels, mask_pyramid};
use crate::model::Model;
use crate::predictor::{AttentionLayerId, AttentionTrace, ForwardVars};
use crate::tensor::{Element, Tape, Tensor, TensorError, Var};
use crate::text::{make_token_mask, PromptEmbedding, TokenMask};
use crate::{Error, Result};

/// Per-query weights at `resolution` for the chosen region.
pub fn region_weights(pyramid: &BTreeMap<usize, Vec<f32>>, resolution: usize, region: RegionSelector) -> Result<Vec<f32>> {
    let level = pyramid
        .get(&resolution)
        .ok_or_else(|| Error::Shape(format!("mask pyramid has no level with {resolution} tokens")))?;
    Ok(match region {
        RegionSelector::Inpaint => level.iter().map(|v| 1.0 - v).collect(),
        RegionSelector::Keep => level.clone(),
    })
}

/// Decoy loss from two recorded traces: the mean over selected layers of
/// the Frobenius norm of the query-weighted difference `CA_masked - CA`.
pub fn l_ca(
    masked: &AttentionTrace,
    unmasked: &AttentionTrace,
    pyramid: &BTreeMap<usize, Vec<f32>>,
    resolutions: &[usize],
    region: RegionSelector,
) -> Result<f32> {
    if resolutions.is_empty() {
        return Err(Error::Config("decoy loss needs at least one layer".into()));
    }
    let mut total = 0.0f64;
    let mut n = 0;
    for (lm, lu) in masked.layers.iter().zip(&unmasked.layers) {
        if lm.id != lu.id {
            return Err(Error::Shape("traces come from different architectures".into()));
        }
        if !resolutions.contains(&lm.id.resolution) {
            continue;
        }
        let w = region_weights(pyramid, lm.id.resolution, region)?;
        let (rows, cols) = lm.output.dims2()?;
        if w.len() != rows {
            return Err(Error::Shape(format!("{} region weights for {rows} queries", w.len())));
        }
        let mut sq = 0.0f64;
        for q in 0..rows {
            for d in 0..cols {
                let diff = (lm.output.data()[q * cols + d] - lu.output.data()[q * cols + d]) * w[q];
                sq += (diff as f64) * (diff as f64);
            }
        }
        total += sq.sqrt();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(format!("no traced layer at resolutions {resolutions:?}")));
    }
    Ok((total / n as f64) as f32)
}

/// Tape version of [`l_ca`]. `weights[i]` is `[tokens, attn_dim]` for `layers[i]`.
pub fn decoy_loss<'t, E: Element>(
    masked: &ForwardVars<'t, E>,
    unmasked: &ForwardVars<'t, E>,
    layers: &[AttentionLayerId],
    weights: &[Tensor<E>],
    stop_grad_target: bool,
) -> crate::tensor::Result<Var<'t, E>> {
    if layers.is_empty() {
        return Err(TensorError::Invalid {
            op: "decoy loss",
            msg: "no layers selected".into(),
        });
    }
    let find = |fv: &ForwardVars<'t, E>, id: AttentionLayerId| {
        fv.layers
            .iter()
            .find(|l| l.id == id)
            .map(|l| l.output)
            .ok_or_else(|| TensorError::Invalid {
                op: "decoy loss",
                msg: format!("layer {} missing from forward pass", id.index),
            })
    };
    let mut total: Option<Var<'t, E>> = None;
    for (&id, w) in layers.iter().zip(weights) {
        let target = find(masked, id)?;
        let target = if stop_grad_target { target.detach() } else { target };
        let out = find(unmasked, id)?;
        let tape = out.tape();
        let term = target.sub(out)?.mul(tape.constant(w.clone()))?.l2_norm();
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    Ok(total.expect("non-empty").scale(E::one() / E::from_usize(layers.len()).unwrap()))
}

/// Everything about one image's attack that does not change across
/// iterations.
#[derive(Debug, Clone)]
pub struct DecoyProblem<'m> {
    model: &'m Model,
    x: Tensor<f32>,
    keep: Tensor<f32>,
    m_prime: Vec<f32>,
    z0: Tensor<f32>,
    z0_masked_clean: Tensor<f32>,
    embedding: PromptEmbedding,
    decoy: TokenMask,
    layers: Vec<AttentionLayerId>,
    weights: Vec<Tensor<f32>>,
    until: usize,
    cfg: AttackConfig,
}

impl<'m> DecoyProblem<'m> {
    pub fn new(model: &'m Model, x: &Tensor<f32>, m: &Tensor<f32>, cfg: &AttackConfig) -> Result<Self> {
        let embedding = model.encode_prompt(cfg.base_prompt.text())?;
        Self::with_decoy(model, x, m, cfg, make_token_mask(&embedding, cfg.decoy), embedding)
    }

    /// Like [`DecoyProblem::new`] with an explicit decoy mask.
    pub fn with_decoy(
        model: &'m Model,
        x: &Tensor<f32>,
        m: &Tensor<f32>,
        cfg: &AttackConfig,
        decoy: TokenMask,
        embedding: PromptEmbedding,
    ) -> Result<Self> {
        let m_prime = downsample_mask(m);
        let pyramid = mask_pyramid(&m_prime);
        let layers = model.predictor.select_layers(&cfg.layers);
        if layers.is_empty() {
            return Err(Error::Config(format!("attack.layers {:?} selects no layer", cfg.layers)));
        }
        let dim = model.config.predictor.attn_dim;
        let weights = layers
            .iter()
            .map(|l| {
                let w = region_weights(&pyramid, l.resolution, cfg.region)?;
                Ok(Tensor::from_fn([l.resolution, dim], |i| w[i / dim]))
            })
            .collect::<Result<Vec<_>>>()?;
        let until = layers.iter().map(|l| l.index).max().expect("non-empty");
        Ok(Self {
            model,
            x: x.clone(),
            keep: mask_channels(m),
            m_prime,
            z0: model.codec.encode(x)?,
            z0_masked_clean: model.codec.encode(&apply_mask(x, m))?,
            embedding,
            decoy,
            layers,
            weights,
            until,
            cfg: cfg.clone(),
        })
    }

    pub fn layers(&self) -> &[AttentionLayerId] {
        &self.layers
    }

    /// Masked-image latent `E((x + delta) * M)` on the tape.
    fn masked_latent<'t, E: Element>(&self, tape: &'t Tape<E>, delta: Var<'t, E>) -> crate::tensor::Result<Var<'t, E>> {
        let img = tape.constant(self.x.cast()).add(delta)?;
        let masked = img.mul(tape.constant(self.keep.cast()))?;
        self.model.codec.encode_var(masked)
    }

    /// Decoy loss for perturbation `delta` at timestep `t` with noise `eps`,
    /// built on `tape`.
    pub fn loss_var<'t, E: Element>(
        &self,
        tape: &'t Tape<E>,
        delta: Var<'t, E>,
        t: usize,
        eps: &Tensor<f32>,
    ) -> Result<Var<'t, E>> {
        let z_t = self.model.schedule().q_sample(&self.z0, t, eps)?;
        let z0m = self.masked_latent(tape, delta)?;
        let input = input_var(tape, &z_t, &self.m_prime, z0m)?;
        let p = self.model.params.bind(tape, false);
        let e = tape.constant(self.embedding.matrix.cast());
        let (mk, um) = self.model.predictor.dual_forward(
            &p,
            input,
            t as f32,
            e,
            &self.decoy,
            self.cfg.mask_bias,
            Some(self.until),
        )?;
        let w: Vec<Tensor<E>> = self.weights.iter().map(Tensor::cast).collect();
        Ok(decoy_loss(&mk, &um, &self.layers, &w, self.cfg.stop_grad_target)?)
    }

    pub fn loss(&self, delta: &Tensor<f32>, t: usize, eps: &Tensor<f32>) -> Result<f32> {
        let tape = Tape::<f32>::new();
        Ok(self.loss_var(&tape, tape.constant(delta.clone()), t, eps)?.item())
    }

    pub fn loss_and_grad(&self, delta: &Tensor<f32>, t: usize, eps: &Tensor<f32>) -> Result<(f32, Tensor<f32>)> {
        let tape = Tape::<f32>::new();
        let d = tape.leaf(delta.clone(), true);
        let loss = self.loss_var(&tape, d, t, eps)?;
        let value = loss.item();
        let mut g = tape.backward(loss)?;
        Ok((value, g.take(d)))
    }

    /// Mean decoy loss over a fixed set of `(t, noise)` pairs.
    pub fn probe_loss(&self, delta: &Tensor<f32>, probes: &[(usize, Tensor<f32>)]) -> Result<f32> {
        if probes.is_empty() {
            return Err(Error::Config("empty probe set".into()));
        }
        let mut sum = 0.0f64;
        for (t, eps) in probes {
            sum += self.loss(delta, *t, eps)? as f64;
        }
        Ok((sum / probes.len() as f64) as f32)
    }

    /// Baseline objective: negative mean squared distance between the noise
    /// predicted from the perturbed context and from the clean context,
    /// accumulated while unrolling `unroll_steps` sampler steps from `t`.
    /// Returns `(loss, grad, forward passes)`.
    pub fn noise_pred_loss_and_grad(&self, delta: &Tensor<f32>, t: usize, eps: &Tensor<f32>) -> Result<(f32, Tensor<f32>, u64)> {
        let model = self.model;
        let sched = model.schedule();
        let grid = sched.timestep_grid(25.max(self.cfg.unroll_steps));
        let unroll = self.cfg.unroll_steps;
        let k0 = grid.iter().position(|&g| g >= t).unwrap_or(grid.len() - 1).max(unroll - 1);

        let tape = Tape::<f32>::new();
        let d = tape.leaf(delta.clone(), true);
        let p = model.params.bind(&tape, false);
        let e = tape.constant(self.embedding.matrix.clone());
        let z0m = self.masked_latent(&tape, d)?;
        let z0m_clean = tape.constant(self.z0_masked_clean.clone());
        let m = tape.constant(Tensor::from_fn([LATENT_TOKENS, 1], |i| self.m_prime[i]));
        let mut z = tape.constant(sched.q_sample(&self.z0, grid[k0], eps)?);
        let mut total: Option<Var<'_, f32>> = None;
        for k in (k0 + 1 - unroll..=k0).rev() {
            let tk = grid[k];
            let input = Var::concat(&[z, m, z0m], 1)?;
            let pred = model.predictor.forward(&p, input, tk as f32, e, None, None)?.eps.expect("full pass");
            let clean_in = Var::concat(&[z.detach(), m, z0m_clean], 1)?;
            let clean = model
                .predictor
                .forward(&p, clean_in, tk as f32, e, None, None)?
                .eps
                .expect("full pass")
                .detach();
            let term = pred.mse(clean)?;
            total = Some(match total {
                None => term,
                Some(acc) => acc.add(term)?,
            });
            let ab = sched.alpha_bar(tk);
            let ab_prev = if k == 0 { 1.0 } else { sched.alpha_bar(grid[k - 1]) };
            let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let (pa, pb) = (ab_prev.sqrt() as f32, (1.0 - ab_prev).sqrt() as f32);
            // z_prev = pa * (z - sb * eps) / sa + pb * eps
            z = z.scale(pa / sa).add(pred.scale(pb - pa * sb / sa))?;
        }
        let loss = total.expect("unroll >= 1").scale(-1.0 / unroll as f32);
        let value = loss.item();
        let mut g = tape.backward(loss)?;
        Ok((value, g.take(d), 2 * unroll as u64))
    }
}
