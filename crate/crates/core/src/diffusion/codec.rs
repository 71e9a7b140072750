use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Element, Result, Tensor, Var};

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;
pub const PATCH: usize = 2;
pub const PATCH_LEN: usize = PATCH * PATCH * IMAGE_CHANNELS;
pub const LATENT_SIDE: usize = IMAGE_SIDE / PATCH;
pub const LATENT_TOKENS: usize = LATENT_SIDE * LATENT_SIDE;

/// Fixed linear autoencoder: each 2x2x3 patch maps to an 8-dim token
/// through a matrix with orthonormal rows; decoding is the transpose.
///
/// The first three rows are the per-channel patch means, so flat colours
/// survive a round trip; the rest are seeded Gaussian rows orthonormalised
/// against them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    /// `[latent, PATCH_LEN]`
    weight: Tensor<f32>,
    patch_index: Vec<usize>,
    unpatch_index: Vec<usize>,
}

fn patch_index() -> Vec<usize> {
    let mut idx = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS);
    for ty in 0..LATENT_SIDE {
        for tx in 0..LATENT_SIDE {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    for c in 0..IMAGE_CHANNELS {
                        let (y, x) = (ty * PATCH + dy, tx * PATCH + dx);
                        idx.push((y * IMAGE_SIDE + x) * IMAGE_CHANNELS + c);
                    }
                }
            }
        }
    }
    idx
}

impl LatentCodec {
    pub fn new(latent: usize, seed: u64) -> Self {
        assert!((IMAGE_CHANNELS..=PATCH_LEN).contains(&latent));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(latent);
        for c in 0..IMAGE_CHANNELS {
            let mut r = vec![0.0; PATCH_LEN];
            for p in 0..PATCH * PATCH {
                r[p * IMAGE_CHANNELS + c] = 0.5;
            }
            rows.push(r);
        }
        while rows.len() < latent {
            let mut r: Vec<f64> = (0..PATCH_LEN).map(|_| StandardNormal.sample(&mut rng)).collect();
            for q in &rows {
                let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            rows.push(r.into_iter().map(|v| v / norm).collect());
        }
        let weight = Tensor::new([latent, PATCH_LEN], rows.into_iter().flatten().map(|v| v as f32).collect())
            .expect("codec shape");
        let patch_index = patch_index();
        let mut unpatch_index = vec![0; patch_index.len()];
        for (i, &j) in patch_index.iter().enumerate() {
            unpatch_index[j] = i;
        }
        Self {
            weight,
            patch_index,
            unpatch_index,
        }
    }

    pub fn from_weight(weight: Tensor<f32>) -> Self {
        let patch_index = patch_index();
        let mut unpatch_index = vec![0; patch_index.len()];
        for (i, &j) in patch_index.iter().enumerate() {
            unpatch_index[j] = i;
        }
        Self {
            weight,
            patch_index,
            unpatch_index,
        }
    }

    pub fn weight(&self) -> &Tensor<f32> {
        &self.weight
    }

    pub fn latent_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `[16,16,3]` image to `[64, latent]` tokens, on the tape.
    pub fn encode_var<'t, E: Element>(&self, image: Var<'t, E>) -> Result<Var<'t, E>> {
        let tape = image.tape();
        let patches = image.gather(self.patch_index.clone(), [LATENT_TOKENS, PATCH_LEN])?;
        let wt = tape.constant(self.weight.cast::<E>()).transpose()?;
        patches.matmul(wt)
    }

    pub fn encode<E: Element>(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let tape = crate::tensor::Tape::<E>::new();
        Ok(self.encode_var(tape.constant(image.clone()))?.to_tensor())
    }

    pub fn decode<E: Element>(&self, latent: &Tensor<E>) -> Result<Tensor<E>> {
        let tape = crate::tensor::Tape::<E>::new();
        let patches = tape
            .constant(latent.clone())
            .matmul(tape.constant(self.weight.cast::<E>()))?;
        Ok(patches
            .gather(self.unpatch_index.clone(), [IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS])?
            .to_tensor())
    }
}
