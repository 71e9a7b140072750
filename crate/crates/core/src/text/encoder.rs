use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PromptEmbedding, TokenSequence};
use crate::nn::{LayerNorm, Mlp, SelfAttention};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Element, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 17,
            seq_len: 8,
            dim: 32,
            heads: 2,
            layers: 2,
            mlp_hidden: 64,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_attn: LayerNorm,
    attn: SelfAttention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

/// Pre-norm causal transformer: token + learned position embeddings, then
/// `layers` blocks of masked self-attention and MLP, then a final layer norm.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
}

const MASKED_LOGIT: f64 = -1e9;

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig, ps: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let tok_emb = ps.add_normal("text.tok_emb", &[cfg.vocab_size, cfg.dim], 1.0, rng);
        let pos_emb = ps.add_normal("text.pos_emb", &[cfg.seq_len, cfg.dim], 0.3, rng);
        let blocks = (0..cfg.layers)
            .map(|i| Block {
                ln_attn: LayerNorm::new(ps, &format!("text.b{i}.ln_attn"), cfg.dim),
                attn: SelfAttention::new(ps, &format!("text.b{i}.attn"), cfg.dim, cfg.heads, rng),
                ln_mlp: LayerNorm::new(ps, &format!("text.b{i}.ln_mlp"), cfg.dim),
                mlp: Mlp::new(ps, &format!("text.b{i}.mlp"), cfg.dim, cfg.mlp_hidden, rng),
            })
            .collect();
        let ln_out = LayerNorm::new(ps, "text.ln_out", cfg.dim);
        Self {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            ln_out,
        }
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.tok_emb
    }

    fn causal_bias<E: Element>(n: usize) -> Tensor<E> {
        Tensor::from_fn([n, n], |i| {
            if i % n > i / n {
                E::lit(MASKED_LOGIT)
            } else {
                E::zero()
            }
        })
    }

    fn check(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.len() != self.cfg.seq_len {
            return Err(TensorError::ShapeMismatch {
                op: "text encoder",
                lhs: vec![tokens.len()],
                rhs: vec![self.cfg.seq_len],
            });
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(TensorError::Invalid {
                op: "text encoder",
                msg: format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size),
            });
        }
        Ok(())
    }

    /// Token embeddings before the transformer blocks, `[N, K]`.
    pub fn embed<'t, E: Element>(&self, p: &Bound<'t, E>, tokens: &TokenSequence) -> Result<Var<'t, E>> {
        self.check(tokens)?;
        let tok = p.get(self.tok_emb).gather_rows(&tokens.ids)?;
        tok.add(p.get(self.pos_emb))
    }

    /// Transformer blocks applied to `[N, K]` input embeddings.
    pub fn encode_embedded<'t, E: Element>(&self, p: &Bound<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let bias = Self::causal_bias::<E>(self.cfg.seq_len);
        let mut x = x;
        for b in &self.blocks {
            let h = b.attn.forward(p, b.ln_attn.forward(p, x)?, Some(&bias))?;
            x = x.add(h)?;
            let h = b.mlp.forward(p, b.ln_mlp.forward(p, x)?)?;
            x = x.add(h)?;
        }
        self.ln_out.forward(p, x)
    }

    pub fn forward<'t, E: Element>(&self, p: &Bound<'t, E>, tokens: &TokenSequence) -> Result<Var<'t, E>> {
        let x = self.embed(p, tokens)?;
        self.encode_embedded(p, x)
    }

    /// Untracked encode to a [`PromptEmbedding`].
    pub fn encode(&self, ps: &ParamStore, tokens: &TokenSequence) -> Result<PromptEmbedding> {
        let tape = Tape::<f32>::new();
        let p = ps.bind(&tape, false);
        let e = self.forward(&p, tokens)?;
        Ok(PromptEmbedding {
            matrix: e.to_tensor(),
            prompt_len: tokens.prompt_len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;
    use rand::SeedableRng;

    fn setup() -> (TextEncoder, ParamStore, Vocabulary) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::new();
        let enc = TextEncoder::new(TextEncoderConfig::default(), &mut ps, &mut rng);
        (enc, ps, Vocabulary::default())
    }

    #[test]
    fn bos_row_is_prompt_independent() {
        let (enc, ps, v) = setup();
        let a = enc.encode(&ps, &v.tokenize("a red circle", 8).unwrap()).unwrap();
        let b = enc.encode(&ps, &v.tokenize("a blue square", 8).unwrap()).unwrap();
        assert_eq!(a.bos_row(), b.bos_row());
    }

    #[test]
    fn first_eos_sees_middle_token() {
        let (enc, ps, v) = setup();
        let a = enc.encode(&ps, &v.tokenize("a red circle", 8).unwrap()).unwrap();
        let b = enc.encode(&ps, &v.tokenize("a green circle", 8).unwrap()).unwrap();
        let d: f32 = a
            .first_eos_row()
            .iter()
            .zip(b.first_eos_row())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(d > 0.0);
    }

    #[test]
    fn encode_is_deterministic() {
        let (enc, ps, v) = setup();
        let t = v.tokenize("the yellow cross", 8).unwrap();
        let a = enc.encode(&ps, &t).unwrap();
        let b = enc.encode(&ps, &t).unwrap();
        let bits = |e: &PromptEmbedding| e.matrix.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zeroing_a_token_only_touches_later_rows() {
        let (enc, ps, v) = setup();
        let t = v.tokenize("a red circle on the green", 8).unwrap();
        let tape = Tape::<f32>::new();
        let p = ps.bind(&tape, false);
        let x = enc.embed(&p, &t).unwrap().to_tensor();
        let base = enc.encode_embedded(&p, tape.constant(x.clone())).unwrap().to_tensor();
        for j in 1..8 {
            let mut z = x.clone();
            z.data_mut()[j * 32..(j + 1) * 32].iter_mut().for_each(|v| *v = 0.0);
            let out = enc.encode_embedded(&p, tape.constant(z)).unwrap().to_tensor();
            assert_eq!(&out.data()[..j * 32], &base.data()[..j * 32], "rows before {j} changed");
            assert_ne!(&out.data()[j * 32..], &base.data()[j * 32..]);
        }
    }

    #[test]
    fn rejects_wrong_length() {
        let (enc, ps, v) = setup();
        let t = v.tokenize("a red circle", 6).unwrap();
        assert!(enc.encode(&ps, &t).is_err());
    }
}
