//! The trainable bundle (text encoder + noise predictor) with its fixed
//! codec and schedule, and checkpoint I/O.
//!
//! A checkpoint directory holds `manifest.json` and one TNSR file per named
//! tensor under `tensors/`.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::codec::LatentCodec;
use crate::diffusion::schedule::NoiseSchedule;
use crate::params::ParamStore;
use crate::predictor::{NoisePredictor, PredictorConfig};
use crate::tensor::{read_tnsr, write_tnsr, Tensor};
use crate::text::{PromptEmbedding, TextEncoder, TextEncoderConfig, TokenSequence, Vocabulary};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CODEC_TENSOR: &str = "codec.weight";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub predictor: PredictorConfig,
    pub schedule: NoiseSchedule,
    pub codec_seed: u64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text: TextEncoderConfig::default(),
            predictor: PredictorConfig::default(),
            schedule: NoiseSchedule::default(),
            codec_seed: 5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.text.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "text.vocab_size {} does not match vocabulary of {} tokens",
                self.text.vocab_size,
                vocab.len()
            )));
        }
        if self.text.dim != self.predictor.text_dim {
            return Err(Error::Config(format!(
                "text.dim {} differs from predictor.text_dim {}",
                self.text.dim, self.predictor.text_dim
            )));
        }
        if self.text.dim % self.text.heads != 0 || self.predictor.hidden % self.predictor.self_heads != 0 {
            return Err(Error::Config("attention dims must divide by head count".into()));
        }
        if self.predictor.grid * self.predictor.grid != crate::diffusion::codec::LATENT_TOKENS {
            return Err(Error::Config("predictor.grid must be 8".into()));
        }
        let r = &self.predictor.resolutions;
        if r.is_empty() || !r.iter().eq(r.iter().rev()) {
            return Err(Error::Config(format!("predictor.resolutions {r:?} must be a non-empty palindrome")));
        }
        if self.schedule.train_steps == 0 {
            return Err(Error::Config("schedule.train_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub encoder: TextEncoder,
    pub predictor: NoisePredictor,
    pub params: ParamStore,
    pub codec: LatentCodec,
    pub trained_steps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    vocabulary: Vec<String>,
    config: ModelConfig,
    trained_steps: u64,
    tensors: Vec<TensorEntry>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let vocab = Vocabulary::default();
        Self::with_vocabulary(config, vocab)
    }

    fn with_vocabulary(mut config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate(&vocab)?;
        config.schedule.rebuild();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let encoder = TextEncoder::new(config.text, &mut params, &mut rng);
        let predictor = NoisePredictor::new(config.predictor.clone(), &mut params, &mut rng);
        let codec = LatentCodec::new(config.predictor.latent_channels, config.codec_seed);
        Ok(Self {
            config,
            vocab,
            encoder,
            predictor,
            params,
            codec,
            trained_steps: 0,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.config.schedule
    }

    pub fn seq_len(&self) -> usize {
        self.config.text.seq_len
    }

    pub fn tokenize(&self, prompt: &str) -> Result<TokenSequence> {
        Ok(self.vocab.tokenize(prompt, self.seq_len())?)
    }

    pub fn embed_tokens(&self, tokens: &TokenSequence) -> Result<PromptEmbedding> {
        Ok(self.encoder.encode(&self.params, tokens)?)
    }

    pub fn encode_prompt(&self, prompt: &str) -> Result<PromptEmbedding> {
        self.embed_tokens(&self.tokenize(prompt)?)
    }

    fn manifest(&self) -> Manifest {
        let mut tensors: Vec<TensorEntry> = self
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                file: format!("tensors/{name}.tnsr"),
                shape: t.shape().to_vec(),
            })
            .collect();
        tensors.push(TensorEntry {
            name: CODEC_TENSOR.into(),
            file: format!("tensors/{CODEC_TENSOR}.tnsr"),
            shape: self.codec.weight().shape().to_vec(),
        });
        Manifest {
            format_version: FORMAT_VERSION,
            vocabulary: self.vocab.tokens().to_vec(),
            config: self.config.clone(),
            trained_steps: self.trained_steps,
            tensors,
        }
    }

    fn tensor_bytes(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut out = Vec::with_capacity(self.params.len() + 1);
        for (name, t) in self.params.iter().chain(std::iter::once((CODEC_TENSOR, self.codec.weight()))) {
            let mut buf = Vec::new();
            write_tnsr(t, &mut buf)?;
            out.push((name.to_string(), buf));
        }
        Ok(out)
    }

    /// SHA-256 over the manifest and every tensor file, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        let mut h = Sha256::new();
        h.update(&manifest);
        for (_, bytes) in self.tensor_bytes()? {
            h.update(&bytes);
        }
        Ok(format!("{:x}", h.finalize()))
    }

    /// Write the checkpoint into `dir` and return its hash.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<String> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("tensors"))?;
        let manifest = self.manifest();
        for (entry, (_, bytes)) in manifest.tensors.iter().zip(self.tensor_bytes()?) {
            std::fs::write(dir.join(&entry.file), bytes)?;
        }
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        self.hash()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let vocab = Vocabulary::from_tokens(manifest.vocabulary)?;
        let mut model = Self::with_vocabulary(manifest.config, vocab)?;
        let mut seen = vec![false; model.params.len()];
        let mut codec = None;
        for entry in &manifest.tensors {
            let bytes = std::fs::read(dir.join(&entry.file))
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.file)))?;
            let t: Tensor<f32> = read_tnsr(bytes.as_slice())?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            if entry.name == CODEC_TENSOR {
                codec = Some(t);
                continue;
            }
            let id = model
                .params
                .id_of(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
            let slot = &mut model.params.tensors_mut()[id.index()];
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, architecture expects {:?}",
                    entry.name,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing tensor {}", model.params.names()[i])));
        }
        let weight = codec.ok_or_else(|| Error::Checkpoint(format!("missing tensor {CODEC_TENSOR}")))?;
        if weight.shape() != [model.config.predictor.latent_channels, crate::diffusion::codec::PATCH_LEN] {
            return Err(Error::Checkpoint(format!("{CODEC_TENSOR} has shape {:?}", weight.shape())));
        }
        model.codec = LatentCodec::from_weight(weight);
        model.trained_steps = manifest.trained_steps;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::new(ModelConfig::default()).unwrap();
        m.trained_steps = 3;
        m.params.tensors_mut()[0].data_mut()[0] = 0.25;
        let h = m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.trained_steps, 3);
        assert_eq!(back.codec.weight(), m.codec.weight());
        assert_eq!(back.hash().unwrap(), h);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(ModelConfig::default()).unwrap();
        m.save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("tensors/unet.output.w.tnsr")).unwrap();
        let err = Model::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("unet.output.w"), "{err}");
    }

    #[test]
    fn rejects_mismatched_text_dim() {
        let mut cfg = ModelConfig::default();
        cfg.text.dim = 16;
        assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_weights() {
        let mut m = Model::new(ModelConfig::default()).unwrap();
        let a = m.hash().unwrap();
        m.params.tensors_mut()[1].data_mut()[0] += 1.0;
        assert_ne!(a, m.hash().unwrap());
    }
}
