//! The noise predictor: a symmetric multi-resolution token transformer.
//!
//! Latent tokens on an 8x8 grid pass through five stages at 64, 16, 4, 16
//! and 64 tokens. Each stage runs self-attention, cross-attention against
//! the prompt embedding and a time-modulated MLP, all pre-norm residual.
//! Between stages tokens are 2x2 average-pooled on the way down and
//! nearest-neighbour duplicated on the way up; stage `i` feeds a skip
//! connection into stage `len - 1 - i`.
//!
//! Cross-attention accepts an optional additive logit bias over the `N`
//! prompt positions. Every forward pass can report, per cross-attention
//! layer, the attention map `A`, the output `CA = A V` and the features the
//! queries were computed from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{attend, timestep_embedding, LayerNorm, Linear, Mlp, SelfAttention};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Element, Result, Tape, Tensor, TensorError, Var};
use crate::text::{PromptEmbedding, TokenMask};

/// Bias added to masked logits. Large enough that the masked token takes
/// essentially all attention mass after max-subtracted softmax.
pub const DEFAULT_MASK_BIAS: f32 = 1e4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub latent_channels: usize,
    /// Side of the finest token grid.
    pub grid: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub text_dim: usize,
    pub mlp_hidden: usize,
    pub time_dim: usize,
    pub self_heads: usize,
    /// Token count per stage, in forward order. Must be palindromic.
    pub resolutions: Vec<usize>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            grid: 8,
            hidden: 32,
            attn_dim: 32,
            text_dim: 32,
            mlp_hidden: 64,
            time_dim: 32,
            self_heads: 1,
            resolutions: vec![64, 16, 4, 16, 64],
        }
    }
}

impl PredictorConfig {
    /// Input channels: noisy latent, keep mask, masked-image latent.
    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }
}

/// A cross-attention layer, identified by its position in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionLayerId {
    pub index: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone)]
struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Stage {
    grid: usize,
    ln_self: LayerNorm,
    self_attn: SelfAttention,
    ln_cross: LayerNorm,
    cross: CrossAttention,
    ln_mlp: LayerNorm,
    film: Linear,
    mlp: Mlp,
}

/// Per-layer record of one forward pass, still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars<'t, E: Element> {
    pub id: AttentionLayerId,
    /// Normalised stage features the queries are projected from.
    pub phi: Var<'t, E>,
    /// `[tokens, N]` attention map.
    pub attn: Var<'t, E>,
    /// `[tokens, attn_dim]` cross-attention output `A V`.
    pub output: Var<'t, E>,
}

#[derive(Debug, Clone)]
pub struct ForwardVars<'t, E: Element> {
    /// `None` when the pass stopped early.
    pub eps: Option<Var<'t, E>>,
    pub layers: Vec<LayerVars<'t, E>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub id: AttentionLayerId,
    pub phi: Tensor<f32>,
    pub attn: Tensor<f32>,
    pub output: Tensor<f32>,
}

/// Cross-attention maps and outputs for every layer of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<LayerAttention>,
    pub masked: bool,
}

impl AttentionTrace {
    pub fn from_vars<E: Element>(fv: &ForwardVars<'_, E>, masked: bool) -> Self {
        Self {
            layers: fv
                .layers
                .iter()
                .map(|l| LayerAttention {
                    id: l.id,
                    phi: l.phi.value().cast(),
                    attn: l.attn.value().cast(),
                    output: l.output.value().cast(),
                })
                .collect(),
            masked,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoisePredictor {
    cfg: PredictorConfig,
    time_up: Linear,
    time_down: Linear,
    input: Linear,
    time_in: Linear,
    stages: Vec<Stage>,
    ln_out: LayerNorm,
    output: Linear,
}

/// Additive logit bias for a cross-attention call.
pub fn mask_bias<E: Element>(mask: &TokenMask, c: f32) -> Tensor<E> {
    mask.bias(c).cast()
}

/// Cross-attention of `phi` (`[tokens, D]`) onto prompt embedding `e`
/// (`[N, K]`), with optional bias `mask * c` before the softmax.
fn cross_attention_vars<'t, E: Element>(
    ca: &CrossAttention,
    p: &Bound<'t, E>,
    phi: Var<'t, E>,
    e: Var<'t, E>,
    bias: Option<&Tensor<E>>,
) -> Result<(Var<'t, E>, Var<'t, E>)> {
    let n = e.value().shape()[0];
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "cross_attention mask",
                lhs: b.shape().to_vec(),
                rhs: vec![n],
            });
        }
    }
    let q = ca.q.forward(p, phi)?;
    let k = ca.k.forward(p, e)?;
    let v = ca.v.forward(p, e)?;
    attend(q, k, v, bias)
}

impl NoisePredictor {
    pub fn new(cfg: PredictorConfig, ps: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let res = &cfg.resolutions;
        assert!(res.iter().eq(res.iter().rev()), "resolutions must be palindromic");
        let d = cfg.hidden;
        let time_up = Linear::new(ps, "unet.time_up", cfg.time_dim, 2 * cfg.time_dim, true, rng);
        let time_down = Linear::new(ps, "unet.time_down", 2 * cfg.time_dim, cfg.time_dim, true, rng);
        let input = Linear::new(ps, "unet.input", cfg.in_channels(), d, true, rng);
        let time_in = Linear::new(ps, "unet.time_in", cfg.time_dim, d, false, rng);
        let stages = res
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let grid = (r as f64).sqrt() as usize;
                assert_eq!(grid * grid, r, "stage resolution {r} is not a square grid");
                let name = format!("unet.s{i}");
                Stage {
                    grid,
                    ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), d),
                    self_attn: SelfAttention::new(ps, &format!("{name}.self"), d, cfg.self_heads, rng),
                    ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), d),
                    cross: CrossAttention {
                        q: Linear::new(ps, &format!("{name}.cross.q"), d, cfg.attn_dim, false, rng),
                        k: Linear::new(ps, &format!("{name}.cross.k"), cfg.text_dim, cfg.attn_dim, false, rng),
                        v: Linear::new(ps, &format!("{name}.cross.v"), cfg.text_dim, cfg.attn_dim, false, rng),
                        out: Linear::new(ps, &format!("{name}.cross.out"), cfg.attn_dim, d, true, rng),
                    },
                    ln_mlp: LayerNorm::new(ps, &format!("{name}.ln_mlp"), d),
                    film: Linear::zeros(ps, &format!("{name}.film"), cfg.time_dim, 2 * d),
                    mlp: Mlp::new(ps, &format!("{name}.mlp"), d, cfg.mlp_hidden, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(ps, "unet.ln_out", d);
        let output = Linear::zeros(ps, "unet.output", d, cfg.latent_channels);
        Self {
            cfg,
            time_up,
            time_down,
            input,
            time_in,
            stages,
            ln_out,
            output,
        }
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    /// Cross-attention layers in forward order.
    pub fn cross_attention_layers(&self) -> Vec<AttentionLayerId> {
        self.cfg
            .resolutions
            .iter()
            .enumerate()
            .map(|(index, &resolution)| AttentionLayerId { index, resolution })
            .collect()
    }

    /// Layers whose resolution is in `resolutions`.
    pub fn select_layers(&self, resolutions: &[usize]) -> Vec<AttentionLayerId> {
        self.cross_attention_layers()
            .into_iter()
            .filter(|l| resolutions.contains(&l.resolution))
            .collect()
    }

    /// Parameter ids of stage `index`'s cross-attention query projection.
    pub fn cross_query_weight(&self, index: usize) -> ParamId {
        self.stages[index].cross.q.w
    }

    /// Run the network on `input` (`[tokens, in_channels]`). When `until` is
    /// set, stop after that cross-attention layer and skip the output head.
    pub fn forward<'t, E: Element>(
        &self,
        p: &Bound<'t, E>,
        input: Var<'t, E>,
        t: f32,
        e: Var<'t, E>,
        bias: Option<&Tensor<E>>,
        until: Option<usize>,
    ) -> Result<ForwardVars<'t, E>> {
        let tape = input.tape();
        let shape = input.shape();
        if shape != [self.cfg.tokens(), self.cfg.in_channels()] {
            return Err(TensorError::ShapeMismatch {
                op: "noise predictor input",
                lhs: shape,
                rhs: vec![self.cfg.tokens(), self.cfg.in_channels()],
            });
        }
        let d = self.cfg.hidden;
        let temb = tape.constant(timestep_embedding(t, self.cfg.time_dim, 1000.0).cast::<E>());
        let temb = temb.reshape([1, self.cfg.time_dim])?;
        let temb = self.time_up.forward(p, temb)?.gelu();
        let temb = self.time_down.forward(p, temb)?;
        let tin = self.time_in.forward(p, temb)?.reshape([d])?;

        let mut x = self.input.forward(p, input)?.add(tin)?;
        let n = self.stages.len();
        let mut skips: Vec<Var<'t, E>> = Vec::with_capacity(n / 2);
        let mut layers = Vec::with_capacity(n);
        for (i, st) in self.stages.iter().enumerate() {
            if i > 0 {
                let prev = self.stages[i - 1].grid;
                if st.grid < prev {
                    x = x.pool_tokens(prev, prev)?;
                } else if st.grid > prev {
                    x = x.upsample_tokens(prev, prev)?;
                }
            }
            if i > n / 2 {
                x = x.add(skips[n - 1 - i])?;
            }

            let h = st.self_attn.forward(p, st.ln_self.forward(p, x)?, None)?;
            x = x.add(h)?;

            let phi = st.ln_cross.forward(p, x)?;
            let (attn, output) = cross_attention_vars(&st.cross, p, phi, e, bias)?;
            layers.push(LayerVars {
                id: AttentionLayerId {
                    index: i,
                    resolution: self.cfg.resolutions[i],
                },
                phi,
                attn,
                output,
            });
            if until == Some(i) {
                return Ok(ForwardVars { eps: None, layers });
            }
            x = x.add(st.cross.out.forward(p, output)?)?;

            let film = st.film.forward(p, temb)?.reshape([2 * d])?;
            let scale = film.slice(0, 0, d)?.add_scalar(E::one());
            let shift = film.slice(0, d, 2 * d)?;
            let h = st.ln_mlp.forward(p, x)?.mul(scale)?.add(shift)?;
            x = x.add(st.mlp.forward(p, h)?)?;

            if i < n / 2 {
                skips.push(x);
            }
        }
        let eps = self.output.forward(p, self.ln_out.forward(p, x)?)?;
        Ok(ForwardVars {
            eps: Some(eps),
            layers,
        })
    }

    /// Masked and unmasked passes over the same input on one tape.
    #[allow(clippy::too_many_arguments)]
    pub fn dual_forward<'t, E: Element>(
        &self,
        p: &Bound<'t, E>,
        input: Var<'t, E>,
        t: f32,
        e: Var<'t, E>,
        decoy: &TokenMask,
        c: f32,
        until: Option<usize>,
    ) -> Result<(ForwardVars<'t, E>, ForwardVars<'t, E>)> {
        let bias = mask_bias::<E>(decoy, c);
        let masked = self.forward(p, input, t, e, Some(&bias), until)?;
        let unmasked = self.forward(p, input, t, e, None, until)?;
        Ok((masked, unmasked))
    }

    /// Untracked noise prediction for a `[tokens, 17]` context tensor.
    pub fn predict_noise(
        &self,
        ps: &ParamStore,
        input: &Tensor<f32>,
        t: f32,
        e: &PromptEmbedding,
        mask: Option<(&TokenMask, f32)>,
        trace: bool,
    ) -> Result<(Tensor<f32>, Option<AttentionTrace>)> {
        let tape = Tape::<f32>::new();
        let p = ps.bind(&tape, false);
        let x = tape.constant(input.clone());
        let ev = tape.constant(e.matrix.clone());
        let bias = match mask {
            Some((m, c)) => {
                if m.len() != e.seq_len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "cross_attention mask",
                        lhs: vec![m.len()],
                        rhs: vec![e.seq_len()],
                    });
                }
                Some(m.bias(c))
            }
            None => None,
        };
        let out = self.forward(&p, x, t, ev, bias.as_ref(), None)?;
        let tr = trace.then(|| AttentionTrace::from_vars(&out, mask.is_some()));
        let eps = out.eps.expect("full pass").to_tensor();
        Ok((eps, tr))
    }

    /// Standalone cross-attention of stage `index` on plain tensors.
    pub fn cross_attention(
        &self,
        ps: &ParamStore,
        index: usize,
        phi: &Tensor<f32>,
        e: &PromptEmbedding,
        mask: Option<&TokenMask>,
        c: f32,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let tape = Tape::<f32>::new();
        let p = ps.bind(&tape, false);
        let bias = mask.map(|m| m.bias(c));
        let (a, o) = cross_attention_vars(
            &self.stages[index].cross,
            &p,
            tape.constant(phi.clone()),
            tape.constant(e.matrix.clone()),
            bias.as_ref(),
        )?;
        Ok((a.to_tensor(), o.to_tensor()))
    }

    /// Value rows `V = e W_v` of stage `index`.
    pub fn values(&self, ps: &ParamStore, index: usize, e: &PromptEmbedding) -> Result<Tensor<f32>> {
        let tape = Tape::<f32>::new();
        let p = ps.bind(&tape, false);
        Ok(self.stages[index]
            .cross
            .v
            .forward(&p, tape.constant(e.matrix.clone()))?
            .to_tensor())
    }
}
