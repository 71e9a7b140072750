//! ASCII PPM (P3) images and PGM (P2) masks with 0-255 samples.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::codec::{IMAGE_CHANNELS, IMAGE_SIDE};
use crate::tensor::Tensor;
use crate::{Error, Result};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
}

fn parse_header<'a>(it: &mut impl Iterator<Item = &'a str>, magic: &str) -> Result<(usize, usize, u32)> {
    let m = it.next().ok_or_else(|| Error::Format("empty file".into()))?;
    if m != magic {
        return Err(Error::Format(format!("expected {magic}, found {m}")));
    }
    let mut num = |what: &str| -> Result<u32> {
        it.next()
            .ok_or_else(|| Error::Format(format!("missing {what}")))?
            .parse::<u32>()
            .map_err(|e| Error::Format(format!("bad {what}: {e}")))
    };
    let w = num("width")? as usize;
    let h = num("height")? as usize;
    let max = num("maxval")?;
    if max == 0 || max > 255 {
        return Err(Error::Format(format!("unsupported maxval {max}")));
    }
    Ok((w, h, max))
}

fn samples<'a>(it: impl Iterator<Item = &'a str>, n: usize, max: u32) -> Result<Vec<f32>> {
    let v = it
        .map(|s| {
            s.parse::<u32>()
                .map_err(|e| Error::Format(format!("bad sample {s:?}: {e}")))
                .and_then(|x| {
                    if x > max {
                        Err(Error::Format(format!("sample {x} above maxval {max}")))
                    } else {
                        Ok(x as f32 / max as f32)
                    }
                })
        })
        .collect::<Result<Vec<_>>>()?;
    if v.len() != n {
        return Err(Error::Format(format!("expected {n} samples, found {}", v.len())));
    }
    Ok(v)
}

/// `[h, w, 3]` image with values in `[0, 1]` to P3 text.
pub fn encode_ppm(img: &Tensor<f32>) -> String {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut s = format!("P3\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w * IMAGE_CHANNELS)
            .map(|i| quantize(img.data()[y * w * IMAGE_CHANNELS + i]).to_string())
            .collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn decode_ppm(text: &str) -> Result<Tensor<f32>> {
    let mut it = tokens(text);
    let (w, h, max) = parse_header(&mut it, "P3")?;
    let data = samples(it, w * h * IMAGE_CHANNELS, max)?;
    Ok(Tensor::new([h, w, IMAGE_CHANNELS], data)?)
}

/// `[h, w]` mask to P2 text, 1 -> 255.
pub fn encode_pgm(m: &Tensor<f32>) -> String {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let mut s = format!("P2\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| quantize(m.data()[y * w + x]).to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn decode_pgm(text: &str) -> Result<Tensor<f32>> {
    let mut it = tokens(text);
    let (w, h, max) = parse_header(&mut it, "P2")?;
    let data = samples(it, w * h, max)?;
    Ok(Tensor::new([h, w], data)?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(img))?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read_to_string(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, m: &Tensor<f32>) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(m))?)
}

/// Read a binary mask: samples >= half scale become 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let m = decode_pgm(&std::fs::read_to_string(path)?)?;
    Ok(m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Snap an image to the 8-bit grid a PPM round trip would produce.
pub fn snap_to_8bit(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| quantize(v) as f32 / 255.0)
}

pub fn is_image_shape(t: &Tensor<f32>) -> bool {
    t.shape() == [IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let text = "P3 # header\n2 1\n255\n255 0 0   0 0 255\n";
        let img = decode_ppm(text).unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_ppm("P2\n1 1\n255\n0\n").is_err());
        assert!(decode_ppm("P3\n1 1\n255\n0 0\n").is_err());
        assert!(decode_ppm("P3\n1 1\n255\n0 0 300\n").is_err());
        assert!(decode_pgm("P2\n2 1\n255\n0\n").is_err());
    }

    #[test]
    fn mask_round_trip() {
        let m = Tensor::from_fn([16, 16], |i| (i % 3 == 0) as u8 as f32);
        assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
    }

    proptest! {
        #[test]
        fn ppm_round_trip_on_8bit_grid(seed in any::<u64>()) {
            let img = Tensor::from_fn([16, 16, 3], |i| ((seed.wrapping_mul(i as u64 + 1) >> 7) % 256) as f32 / 255.0);
            let back = decode_ppm(&encode_ppm(&img)).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
