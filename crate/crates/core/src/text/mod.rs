//! Prompt tokenization, the causal toy text encoder and token masks.
//!
//! A prompt of `p` words becomes `[BOS, w_0 .. w_{p-1}, EOS, ..., EOS]` of
//! fixed length `N`. Because the encoder is causal, the BOS row of every
//! embedding is the same vector whatever the prompt, while the first EOS row
//! has seen every prompt word.

mod encoder;

pub use encoder::{TextEncoder, TextEncoderConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const SHAPE_WORDS: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLOR_WORDS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const FILLER_WORDS: [&str; 4] = ["a", "the", "on", "background"];
pub const QUALITY_WORDS: [&str; 3] = ["masterpiece", "best", "quality"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("sequence length must be at least 2, got {0}")]
    SequenceTooShort(usize),
    #[error("vocabulary mismatch: {0}")]
    Vocabulary(String),
}

/// Ordered token list. BOS is index 0 and EOS index 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let tokens = [BOS, EOS]
            .into_iter()
            .chain(SHAPE_WORDS)
            .chain(COLOR_WORDS)
            .chain(FILLER_WORDS)
            .chain(QUALITY_WORDS)
            .map(str::to_string)
            .collect();
        Self { tokens }
    }
}

impl Vocabulary {
    pub const BOS_ID: usize = 0;
    pub const EOS_ID: usize = 1;

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        if tokens.len() < 2 || tokens[0] != BOS || tokens[1] != EOS {
            return Err(TextError::Vocabulary("BOS and EOS must be tokens 0 and 1".into()));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Tokenize whitespace-separated `prompt` into a sequence of length `n`.
    pub fn tokenize(&self, prompt: &str, n: usize) -> Result<TokenSequence, TextError> {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        self.tokenize_words(&words, n)
    }

    pub fn tokenize_words(&self, words: &[&str], n: usize) -> Result<TokenSequence, TextError> {
        if n < 2 {
            return Err(TextError::SequenceTooShort(n));
        }
        let mut ids = Vec::with_capacity(n);
        ids.push(Self::BOS_ID);
        for w in words {
            let id = self
                .id(w)
                .filter(|&i| i > Self::EOS_ID)
                .ok_or_else(|| TextError::UnknownWord(w.to_string()))?;
            ids.push(id);
        }
        // Words past position N-2 are dropped; at least one EOS always follows.
        ids.truncate(n - 1);
        let prompt_len = ids.len() - 1;
        ids.resize(n, Self::EOS_ID);
        Ok(TokenSequence { ids, prompt_len })
    }
}

/// Fixed-length token ids: BOS, `prompt_len` words, then EOS padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn first_eos(&self) -> usize {
        1 + self.prompt_len
    }

    pub fn token_class(&self, position: usize) -> TokenClass {
        token_class(position, self.prompt_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenClass {
    Content,
    Bos,
    Eos,
}

pub fn token_class(position: usize, prompt_len: usize) -> TokenClass {
    match position {
        0 => TokenClass::Bos,
        p if p <= prompt_len => TokenClass::Content,
        _ => TokenClass::Eos,
    }
}

/// `N x K` prompt embedding with its prompt length.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub matrix: Tensor<f32>,
    pub prompt_len: usize,
}

impl PromptEmbedding {
    pub fn seq_len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn bos_row(&self) -> &[f32] {
        self.matrix.row(0)
    }

    pub fn first_eos_row(&self) -> &[f32] {
        self.matrix.row(1 + self.prompt_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DecoyTarget {
    Bos,
    FirstEos,
}

/// One-hot selector over the `N` prompt positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    bits: Vec<f32>,
    target: Option<DecoyTarget>,
}

impl TokenMask {
    pub fn new(seq_len: usize, prompt_len: usize, target: DecoyTarget) -> Self {
        let pos = match target {
            DecoyTarget::Bos => 0,
            DecoyTarget::FirstEos => 1 + prompt_len,
        };
        let mut bits = vec![0.0; seq_len];
        bits[pos] = 1.0;
        Self {
            bits,
            target: Some(target),
        }
    }

    /// Mask covering every position. Adds the same constant to all logits,
    /// so it leaves attention unchanged.
    pub fn all(seq_len: usize) -> Self {
        Self {
            bits: vec![1.0; seq_len],
            target: None,
        }
    }

    pub fn from_bits(bits: Vec<f32>) -> Self {
        Self { bits, target: None }
    }

    pub fn bits(&self) -> &[f32] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn target(&self) -> Option<DecoyTarget> {
        self.target
    }

    /// Additive attention bias `mask * c`.
    pub fn bias(&self, c: f32) -> Tensor<f32> {
        Tensor::from_fn([self.bits.len()], |i| self.bits[i] * c)
    }
}

pub fn make_token_mask(e: &PromptEmbedding, target: DecoyTarget) -> TokenMask {
    TokenMask::new(e.seq_len(), e.prompt_len, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BasePrompt {
    QualityTag,
    Null,
}

pub const QUALITY_TAG_PROMPT: &str = "masterpiece best quality";

impl BasePrompt {
    pub fn text(self) -> &'static str {
        match self {
            BasePrompt::QualityTag => QUALITY_TAG_PROMPT,
            BasePrompt::Null => "",
        }
    }
}

/// `(quality_tag, null)` base prompts, tokenized.
pub fn base_prompts(vocab: &Vocabulary, n: usize) -> (TokenSequence, TokenSequence) {
    (
        vocab.tokenize(QUALITY_TAG_PROMPT, n).expect("quality words are in the vocabulary"),
        vocab.tokenize("", n).expect("empty prompt"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::default()
    }

    #[test]
    fn layout_of_special_tokens() {
        let v = vocab();
        assert_eq!(v.id(BOS), Some(0));
        assert_eq!(v.id(EOS), Some(1));
        assert!(v.len() <= 32);
    }

    #[test]
    fn empty_prompt() {
        let t = vocab().tokenize("", 8).unwrap();
        assert_eq!(t.ids, vec![0, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(t.prompt_len, 0);
    }

    #[test]
    fn short_prompt() {
        let v = vocab();
        let t = v.tokenize("a red circle", 8).unwrap();
        let expect = vec![0, v.id("a").unwrap(), v.id("red").unwrap(), v.id("circle").unwrap(), 1, 1, 1, 1];
        assert_eq!(t.ids, expect);
        assert_eq!(t.prompt_len, 3);
        assert_eq!(t.first_eos(), 4);
    }

    #[test]
    fn long_prompt_is_truncated_with_one_eos() {
        let v = vocab();
        let words = "a red circle on the blue background a square";
        assert_eq!(words.split_whitespace().count(), 9);
        let t = v.tokenize(words, 8).unwrap();
        assert_eq!(t.prompt_len, 6);
        assert_eq!(t.ids[7], Vocabulary::EOS_ID);
        assert_eq!(t.ids.iter().filter(|&&i| i == Vocabulary::EOS_ID).count(), 1);
        assert_eq!(t.ids[6], v.id("blue").unwrap());
    }

    #[test]
    fn unknown_word_is_named() {
        let err = vocab().tokenize("a purple circle", 8).unwrap_err();
        assert_eq!(err, TextError::UnknownWord("purple".into()));
        // Special tokens cannot be spelled inside a prompt.
        assert!(vocab().tokenize("<eos>", 8).is_err());
    }

    #[test]
    fn token_masks() {
        let bos = TokenMask::new(8, 3, DecoyTarget::Bos);
        assert_eq!(bos.bits(), &[1., 0., 0., 0., 0., 0., 0., 0.]);
        let eos = TokenMask::new(8, 3, DecoyTarget::FirstEos);
        assert_eq!(eos.bits()[4], 1.0);
        assert_eq!(eos.bits().iter().sum::<f32>(), 1.0);
        let eos0 = TokenMask::new(8, 0, DecoyTarget::FirstEos);
        assert_eq!(eos0.bits()[1], 1.0);
    }

    #[test]
    fn base_prompt_lengths() {
        let (q, n) = base_prompts(&vocab(), 8);
        assert_eq!(q.prompt_len, 3);
        assert_eq!(n.prompt_len, 0);
        for t in [q, n] {
            assert_eq!(t.ids[0], Vocabulary::BOS_ID);
            assert!(t.ids[1 + t.prompt_len..].iter().all(|&i| i == Vocabulary::EOS_ID));
        }
    }

    #[test]
    fn classes_partition_positions() {
        let classes: Vec<_> = (0..8).map(|p| token_class(p, 3)).collect();
        assert_eq!(classes[0], TokenClass::Bos);
        assert!(classes[1..4].iter().all(|c| *c == TokenClass::Content));
        assert!(classes[4..].iter().all(|c| *c == TokenClass::Eos));
    }

    proptest::proptest! {
        #[test]
        fn tokenize_layout_invariant(picks in proptest::collection::vec(2usize..17, 0..12), n in 2usize..12) {
            let v = vocab();
            let words: Vec<&str> = picks.iter().map(|&i| v.word(i)).collect();
            let t = v.tokenize_words(&words, n).unwrap();
            proptest::prop_assert_eq!(t.len(), n);
            proptest::prop_assert_eq!(t.ids[0], Vocabulary::BOS_ID);
            proptest::prop_assert_eq!(t.prompt_len, words.len().min(n - 2));
            proptest::prop_assert!(t.ids[1 + t.prompt_len..].iter().all(|&i| i == Vocabulary::EOS_ID));
            proptest::prop_assert!(t.ids[1..1 + t.prompt_len].iter().all(|&i| i > 1));
        }
    }
}
