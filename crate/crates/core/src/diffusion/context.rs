use std::collections::BTreeMap;

use super::codec::{LatentCodec, IMAGE_CHANNELS, IMAGE_SIDE, LATENT_SIDE, LATENT_TOKENS};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::Error;

pub fn check_image(x: &Tensor<f32>) -> Result<(), Error> {
    if x.shape() != [IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS] {
        return Err(Error::Shape(format!("image must be 16x16x3, got {:?}", x.shape())));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Shape("image values must lie in [0, 1]".into()));
    }
    Ok(())
}

pub fn check_mask(m: &Tensor<f32>) -> Result<(), Error> {
    if m.shape() != [IMAGE_SIDE, IMAGE_SIDE] {
        return Err(Error::Shape(format!("mask must be 16x16, got {:?}", m.shape())));
    }
    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Shape("mask values must be 0 or 1".into()));
    }
    Ok(())
}

/// `x * M` with the mask broadcast over channels.
pub fn apply_mask<E: Element>(x: &Tensor<E>, m: &Tensor<f32>) -> Tensor<E> {
    let md = m.data();
    Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * E::of_f32(md[i / IMAGE_CHANNELS]))
}

/// Mask expanded to image shape, for use as an elementwise factor.
pub fn mask_channels<E: Element>(m: &Tensor<f32>) -> Tensor<E> {
    let md = m.data();
    Tensor::from_fn([IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS], |i| E::of_f32(md[i / IMAGE_CHANNELS]))
}

/// 2x2 mean pooling of a row-major `side x side` grid.
pub fn avg_pool_grid(v: &[f32], side: usize) -> Vec<f32> {
    let o = side / 2;
    let mut out = vec![0.0; o * o];
    for y in 0..o {
        for x in 0..o {
            let s = v[2 * y * side + 2 * x]
                + v[2 * y * side + 2 * x + 1]
                + v[(2 * y + 1) * side + 2 * x]
                + v[(2 * y + 1) * side + 2 * x + 1];
            out[y * o + x] = s / 4.0;
        }
    }
    out
}

/// Latent-resolution keep mask: 2x2 mean of `M`, thresholded at 0.5 with
/// ties kept.
pub fn downsample_mask(m: &Tensor<f32>) -> Vec<f32> {
    avg_pool_grid(m.data(), IMAGE_SIDE)
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect()
}

/// Keep mask at every attention resolution, by repeated mean pooling.
/// Values lie in `[0, 1]`.
pub fn mask_pyramid(m_prime: &[f32]) -> BTreeMap<usize, Vec<f32>> {
    let mut out = BTreeMap::new();
    let mut level = m_prime.to_vec();
    let mut side = LATENT_SIDE;
    loop {
        out.insert(side * side, level.clone());
        if side < 2 || side % 2 != 0 {
            break;
        }
        level = avg_pool_grid(&level, side);
        side /= 2;
    }
    out
}

/// Predictor input for one inpainting step.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintContext {
    /// `[64, 8]`
    pub z_t: Tensor<f32>,
    /// `[64]`, 1 = keep, 0 = inpaint.
    pub m_prime: Vec<f32>,
    /// `[64, 8]`, encoding of the masked (possibly perturbed) image.
    pub z0_masked: Tensor<f32>,
    pub pyramid: BTreeMap<usize, Vec<f32>>,
}

impl InpaintContext {
    /// `(z_t, m', z0_masked)` concatenated per token: `[64, 17]`.
    pub fn to_input(&self) -> Tensor<f32> {
        let tape = Tape::<f32>::new();
        input_var(&tape, &self.z_t, &self.m_prime, tape.constant(self.z0_masked.clone()))
            .expect("context shapes")
            .to_tensor()
    }

    pub fn inpaint_weights(&self, resolution: usize) -> Option<Vec<f32>> {
        self.pyramid.get(&resolution).map(|w| w.iter().map(|v| 1.0 - v).collect())
    }
}

/// Concatenate a constant noisy latent and keep mask with a (possibly
/// tracked) masked-image latent.
pub fn input_var<'t, E: Element>(
    tape: &'t Tape<E>,
    z_t: &Tensor<f32>,
    m_prime: &[f32],
    z0_masked: Var<'t, E>,
) -> crate::tensor::Result<Var<'t, E>> {
    let zt = tape.constant(z_t.cast());
    let m = tape.constant(Tensor::from_fn([LATENT_TOKENS, 1], |i| E::of_f32(m_prime[i])));
    Var::concat(&[zt, m, z0_masked], 1)
}

/// Build the context for image `x`, keep mask `m`, optional perturbation
/// `delta` and noisy latent `z_t`. Only `z0_masked` depends on `delta`.
pub fn make_inpaint_context(
    codec: &LatentCodec,
    x: &Tensor<f32>,
    m: &Tensor<f32>,
    delta: Option<&Tensor<f32>>,
    z_t: Tensor<f32>,
) -> Result<InpaintContext, Error> {
    check_image(x)?;
    check_mask(m)?;
    if z_t.shape() != [LATENT_TOKENS, codec.latent_channels()] {
        return Err(Error::Shape(format!("z_t must be [64, 8], got {:?}", z_t.shape())));
    }
    let src = match delta {
        Some(d) => {
            check_image(d)?;
            x.zip_map(d, |a, b| (a + b).clamp(0.0, 1.0))?
        }
        None => x.clone(),
    };
    let z0_masked = codec.encode(&apply_mask(&src, m))?;
    let m_prime = downsample_mask(m);
    let pyramid = mask_pyramid(&m_prime);
    Ok(InpaintContext {
        z_t,
        m_prime,
        z0_masked,
        pyramid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn codec() -> LatentCodec {
        LatentCodec::new(8, 3)
    }

    fn image() -> Tensor<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        Tensor::from_fn([16, 16, 3], |_| rng.gen())
    }

    #[test]
    fn full_keep_mask_encodes_whole_image() {
        let c = codec();
        let x = image();
        let ctx = make_inpaint_context(&c, &x, &Tensor::full([16, 16], 1.0), None, Tensor::zeros([64, 8])).unwrap();
        assert_eq!(ctx.z0_masked, c.encode(&x).unwrap());
        assert!(ctx.m_prime.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_keep_mask_encodes_black() {
        let c = codec();
        let ctx = make_inpaint_context(&c, &image(), &Tensor::zeros([16, 16]), None, Tensor::zeros([64, 8])).unwrap();
        assert_eq!(ctx.z0_masked, c.encode(&Tensor::<f32>::zeros([16, 16, 3])).unwrap());
    }

    #[test]
    fn checkerboard_ties_are_kept() {
        let m = Tensor::from_fn([16, 16], |i| ((i / 16 + i % 16) % 2) as f32);
        let pooled = avg_pool_grid(m.data(), 16);
        assert!(pooled.iter().all(|&v| v == 0.5));
        assert!(downsample_mask(&m).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pyramid_levels() {
        let mut m = Tensor::full([16, 16], 1.0f32);
        for y in 0..8 {
            for x in 0..8 {
                m.data_mut()[y * 16 + x] = 0.0;
            }
        }
        let p = mask_pyramid(&downsample_mask(&m));
        assert_eq!(p.keys().copied().collect::<Vec<_>>(), vec![1, 4, 16, 64]);
        assert_eq!(p[&4], vec![0.0, 1.0, 1.0, 1.0]);
        assert!(p.values().flatten().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn input_has_seventeen_channels_in_order() {
        let c = codec();
        let x = image();
        let zt = Tensor::from_fn([64, 8], |i| i as f32);
        let ctx = make_inpaint_context(&c, &x, &Tensor::full([16, 16], 1.0), None, zt.clone()).unwrap();
        let inp = ctx.to_input();
        assert_eq!(inp.shape(), &[64, 17]);
        assert_eq!(&inp.row(3)[..8], zt.row(3));
        assert_eq!(inp.row(3)[8], 1.0);
        assert_eq!(&inp.row(3)[9..], ctx.z0_masked.row(3));
    }

    #[test]
    fn delta_only_enters_masked_latent() {
        let c = codec();
        let x = image();
        let m = Tensor::full([16, 16], 1.0);
        let d = Tensor::full([16, 16, 3], 0.01f32);
        let zt = Tensor::from_fn([64, 8], |i| (i as f32).sin());
        let a = make_inpaint_context(&c, &x, &m, None, zt.clone()).unwrap();
        let b = make_inpaint_context(&c, &x, &m, Some(&d), zt).unwrap();
        assert_eq!(a.z_t, b.z_t);
        assert_eq!(a.m_prime, b.m_prime);
        assert_ne!(a.z0_masked, b.z0_masked);
    }

    #[test]
    fn rejects_bad_shapes() {
        let c = codec();
        let bad = Tensor::zeros([8, 8, 3]);
        assert!(make_inpaint_context(&c, &bad, &Tensor::zeros([16, 16]), None, Tensor::zeros([64, 8])).is_err());
        assert!(make_inpaint_context(&c, &image(), &Tensor::zeros([16, 8]), None, Tensor::zeros([64, 8])).is_err());
    }
}
